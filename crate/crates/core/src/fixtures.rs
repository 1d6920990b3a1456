//! Synthetic corpora for closed-loop tests and the CLI's `gen-fixtures`.
//!
//! Topic turns start with the mock extractor's `#topic` marker. Each question
//! shares at least two content tokens with its evidence turn and at most one
//! with any other turn, which is what the mock generator keys on.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent_loop::Script;
use crate::embedding::EmbeddingVector;
use crate::reranker::{Reranker, RerankerError, RewardVector, SelectionMode};
use crate::eval::EvalQuestion;
use crate::transcript::{SegmentRef, Session};

const ACK: &str = "Got it, thanks for telling me.";

struct Fact {
    statement: &'static str,
    question: &'static str,
    answer: &'static str,
}

const PLANTED: [[Fact; 4]; 3] = [
    [
        Fact {
            statement: "I am allergic to the medication penicillin.",
            question: "Which medication am I allergic to?",
            answer: "penicillin",
        },
        Fact {
            statement: "My sister Clara lives in Lisbon.",
            question: "Which city does my sister Clara live in?",
            answer: "Lisbon",
        },
        Fact {
            statement: "I play the cello in a community orchestra.",
            question: "What instrument do I play in the community orchestra?",
            answer: "cello",
        },
        Fact {
            statement: "My dog is a beagle named Biscuit.",
            question: "What breed is my dog Biscuit?",
            answer: "beagle",
        },
    ],
    [
        Fact {
            statement: "I work as a nurse at the city hospital.",
            question: "What is my job at the city hospital?",
            answer: "nurse",
        },
        Fact {
            statement: "My favorite food is spicy ramen.",
            question: "What is my favorite food?",
            answer: "ramen",
        },
        Fact {
            statement: "I drive a blue electric scooter to work.",
            question: "What color is the electric scooter I drive?",
            answer: "blue",
        },
        Fact {
            statement: "My birthday party is always in March.",
            question: "In which month is my birthday party?",
            answer: "March",
        },
    ],
    [
        Fact {
            statement: "I am learning to speak Japanese.",
            question: "Which language am I learning to speak?",
            answer: "Japanese",
        },
        Fact {
            statement: "My favorite author is Ursula Le Guin.",
            question: "Who is my favorite author?",
            answer: "Ursula Le Guin",
        },
        Fact {
            statement: "I run a marathon every October.",
            question: "Which month do I run the marathon?",
            answer: "October",
        },
        Fact {
            statement: "My car is an old green pickup truck.",
            question: "What color is my old pickup truck?",
            answer: "green",
        },
    ],
];

fn closed(mut s: Session) -> Session {
    s.close();
    s
}

/// Three sessions with four planted facts each and one question per fact.
pub fn planted_facts() -> Script {
    let mut sessions = Vec::new();
    let mut questions = Vec::new();
    for (si, facts) in PLANTED.iter().enumerate() {
        let id = format!("planted-s{si}");
        let mut s = Session::new(&id);
        s.push_turn("Hello again, how are you today?", "Doing well, what is new?", None)
            .expect("open session");
        for (fi, f) in facts.iter().enumerate() {
            let t = s.push_turn(format!("#topic {}", f.statement), ACK, None).expect("open session");
            questions.push(EvalQuestion {
                qid: format!("planted-q{:02}", si * 4 + fi),
                question: f.question.into(),
                gold_answer: f.answer.into(),
                gold_evidence: vec![SegmentRef::new(&id, vec![t]).expect("non-empty")],
                asked_after_session: None,
            });
        }
        sessions.push(closed(s));
    }
    Script { sessions, questions }
}

struct SplitFact {
    opener: &'static str,
    detail: &'static str,
    question: &'static str,
    answer: &'static str,
}

const SPLIT: [SplitFact; 4] = [
    SplitFact {
        opener: "I am planning a trip to Kyoto with my cousin.",
        detail: "It leaves on the twelfth, right after exams.",
        question: "When does my Kyoto trip with my cousin start?",
        answer: "twelfth",
    },
    SplitFact {
        opener: "I started a kitchen renovation in our flat.",
        detail: "The new counters will be dark walnut.",
        question: "What material did I pick for the kitchen renovation?",
        answer: "walnut",
    },
    SplitFact {
        opener: "I adopted a rescue cat from the shelter downtown.",
        detail: "She is called Pepper and sleeps all afternoon.",
        question: "What is the name of the rescue cat I adopted?",
        answer: "Pepper",
    },
    SplitFact {
        opener: "I joined a climbing gym near the office.",
        detail: "Sessions run every Tuesday evening.",
        question: "Which evening do I go to the climbing gym?",
        answer: "Tuesday",
    },
];

const FILLER: [(&str, &str); 4] = [
    ("The weather has been grey and windy all week.", "Hopefully it clears up soon."),
    ("I watched a documentary about deep sea creatures.", "Those are fascinating."),
    ("Traffic on the bridge was terrible this morning.", "That sounds frustrating."),
    ("I tried a new recipe for lentil soup yesterday.", "How did it turn out?"),
];

/// Facts whose answer sits in a follow-up turn of the topic that introduced
/// them. Each session holds one topic plus small talk.
pub fn multi_evidence() -> Script {
    let mut sessions = Vec::new();
    let mut questions = Vec::new();
    for (i, f) in SPLIT.iter().enumerate() {
        let id = format!("multi-s{i}");
        let mut s = Session::new(&id);
        let (fu, fa) = FILLER[i];
        s.push_turn(format!("#topic {fu}"), fa, None).expect("open session");
        let (gu, ga) = FILLER[(i + 1) % FILLER.len()];
        s.push_turn(gu, ga, None).expect("open session");
        let a = s.push_turn(format!("#topic {}", f.opener), "Tell me more.", None).expect("open session");
        let b = s.push_turn(f.detail, ACK, None).expect("open session");
        questions.push(EvalQuestion {
            qid: format!("multi-q{i}"),
            question: f.question.into(),
            gold_answer: f.answer.into(),
            gold_evidence: vec![SegmentRef::new(&id, vec![a, b]).expect("non-empty")],
            asked_after_session: None,
        });
        sessions.push(closed(s));
    }
    Script { sessions, questions }
}

/// Memories with identical base scores against every query, one of which is
/// always the useful one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditFixture {
    pub dimension: usize,
    pub memory_ids: Vec<String>,
    pub memories: Vec<EmbeddingVector>,
    pub target: usize,
    pub query_noise: f64,
}

impl BanditFixture {
    /// Memory i is `(e0 + e_{i+1}) / sqrt 2`; queries are `e0` plus noise on the
    /// axes no memory uses, so every memory scores the same before training.
    pub fn new(n_memories: usize, dimension: usize, target: usize) -> Self {
        assert!(dimension > n_memories + 1 && target < n_memories, "bandit fixture shape");
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let memories = (0..n_memories)
            .map(|i| {
                let mut v = vec![0.0; dimension];
                v[0] = h;
                v[i + 1] = h;
                EmbeddingVector::new(v).expect("finite")
            })
            .collect();
        Self {
            dimension,
            memory_ids: (0..n_memories).map(|i| format!("bandit-m{i:02}")).collect(),
            memories,
            target,
            query_noise: 0.3,
        }
    }

    pub fn standard() -> Self {
        Self::new(20, 32, 7)
    }

    pub fn target_id(&self) -> &str {
        &self.memory_ids[self.target]
    }

    pub fn query(&self, rng: &mut impl Rng) -> EmbeddingVector {
        let free = self.memories.len() + 1;
        let mut v = vec![0.0; self.dimension];
        v[0] = 1.0;
        for x in &mut v[free..] {
            *x = self.query_noise * rng.sample::<f64, _>(StandardNormal);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        EmbeddingVector::new(v.into_iter().map(|x| x / n).collect()).expect("finite")
    }

    /// Candidate list in a random order, as retrieval over exact ties would give.
    pub fn candidates(&self, rng: &mut impl Rng) -> Vec<(String, &EmbeddingVector)> {
        let mut c: Vec<(String, &EmbeddingVector)> =
            self.memory_ids.iter().cloned().zip(self.memories.iter()).collect();
        c.shuffle(rng);
        c
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Runs `steps` train-mode selections of `m`, rewarding only the target,
    /// and returns the per-step fraction of selected memories that were useful.
    pub fn train(
        &self,
        reranker: &mut Reranker,
        steps: usize,
        m: usize,
        seed: u64,
    ) -> Result<Vec<f64>, RerankerError> {
        let mut rng = Self::rng(seed);
        let mut useful = Vec::with_capacity(steps);
        for _ in 0..steps {
            let q = self.query(&mut rng);
            let cands = self.candidates(&mut rng);
            let trace = reranker.rerank(&q, &cands, m, SelectionMode::Train)?;
            let rewards: Vec<i8> = trace
                .selected_ids()
                .iter()
                .map(|id| if id == self.target_id() { 1 } else { -1 })
                .collect();
            let rewards = RewardVector::new(rewards)?;
            useful.push(rewards.positives() as f64 / m as f64);
            reranker.reinforce_update(&trace, &rewards)?;
        }
        Ok(useful)
    }

    /// Fraction of fresh queries whose infer-mode top `m` contains the target.
    pub fn inclusion_rate(
        &self,
        reranker: &mut Reranker,
        queries: usize,
        m: usize,
        seed: u64,
    ) -> Result<f64, RerankerError> {
        let mut rng = Self::rng(seed);
        let mut hits = 0;
        for _ in 0..queries {
            let q = self.query(&mut rng);
            let cands = self.candidates(&mut rng);
            let trace = reranker.rerank(&q, &cands, m, SelectionMode::Infer)?;
            if trace.selected_ids().iter().any(|id| id == self.target_id()) {
                hits += 1;
            }
        }
        Ok(hits as f64 / queries as f64)
    }
}
