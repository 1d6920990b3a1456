//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

use rmm_core::agent_loop::{run_scripted, AgentConfig, AgentMode, Clients, Engine, StorePaths};
use rmm_core::attribution::{parse_citations, ParseStatus};
use rmm_core::clock::LogicalClock;
use rmm_core::embedding::{Embedder, EmbedderConfig, EmbeddingVector, HashingEmbedder, Normalization};
use rmm_core::eval::{evaluate, MetricsReport};
use rmm_core::fixtures::{multi_evidence, planted_facts, BanditFixture};
use rmm_core::memory_bank::{IngestionMode, MemoryBank, MemoryEntry};
use rmm_core::mock::MockJudge;
use rmm_core::prospective::{parse_actions, render_actions, UpdateAction};
use rmm_core::reranker::{plackett_luce_log_prob, Matrix, Reranker, RerankerParams, SelectionMode};
use rmm_core::transcript::{SegmentRef, Session, TranscriptStore};
use rmm_service::server::AppState;

const SAMPLING_TOL: f64 = 0.01;
const GRAD_TOL: f64 = 1e-4;
/// Relative error uses max(|a|, |n|, GRAD_FLOOR) so entries near zero are
/// judged on absolute error rather than finite-difference rounding noise.
const GRAD_FLOOR: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const BANDIT_INIT: (f64, f64) = (0.15, 0.35);
const BANDIT_TARGET: f64 = 0.9;

type Outcome = Result<String, String>;

fn at(secs: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let z: f64 = logits.iter().map(|s| (s / tau).exp()).sum();
    logits.iter().map(|s| (s / tau).exp() / z).collect()
}

fn sampler(seed: u64, tau: f64) -> Reranker {
    let mut r = Reranker::zero_init(4, seed);
    let mut p = r.params().clone();
    p.tau = tau;
    r.set_params(p).unwrap();
    r
}

fn gumbel_single() -> Outcome {
    let logits = [2.0, 1.0, 0.0];
    let draws = 200_000;
    let mut r = sampler(20_240_601, 1.0);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let (sel, _, _) = r.select_top_m(&logits, 1, SelectionMode::Train).map_err(|e| e.to_string())?;
        counts[sel[0]] += 1;
    }
    let exact = softmax(&logits, 1.0);
    let dev = (0..3).map(|i| (counts[i] as f64 / draws as f64 - exact[i]).abs()).fold(0.0, f64::max);
    ensure(dev <= SAMPLING_TOL, format!("max |freq - softmax| = {dev:.5} (tol {SAMPLING_TOL})"))
}

fn gumbel_pair() -> Outcome {
    let logits = [2.0, 1.0, 0.0];
    let draws = 200_000;
    let mut r = sampler(20_240_602, 1.0);
    let mut hits = 0usize;
    for _ in 0..draws {
        let (sel, _, _) = r.select_top_m(&logits, 2, SelectionMode::Train).map_err(|e| e.to_string())?;
        if sel == [0, 1] {
            hits += 1;
        }
    }
    let p = softmax(&logits, 1.0);
    let exact = p[0] * p[1] / (p[1] + p[2]);
    let dev = (hits as f64 / draws as f64 - exact).abs();
    ensure(dev <= SAMPLING_TOL, format!("P(0,1) exact {exact:.5}, |dev| = {dev:.5} (tol {SAMPLING_TOL})"))
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

fn random_matrix(rng: &mut impl Rng, d: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(d);
    for r in 0..d {
        for c in 0..d {
            m.set(r, c, rng.random_range(-scale..scale));
        }
    }
    m
}

fn log_prob_at(params: &RerankerParams, q: &[f64], mems: &[&[f64]], selected: &[usize]) -> f64 {
    let r = Reranker::new(params.clone()).unwrap();
    let (q2, m2) = r.adapt(q, mems).unwrap();
    plackett_luce_log_prob(&Reranker::score(&q2, &m2), params.tau, selected)
}

fn gradient_check() -> Outcome {
    let (d, k, m) = (16, 8, 3);
    let mut rng = BanditFixture::rng(31_337);
    let mut worst: f64 = 0.0;
    for instance in 0..50 {
        let mut params = RerankerParams::zero_init(d, instance);
        params.w_q = random_matrix(&mut rng, d, 0.1);
        params.w_m = random_matrix(&mut rng, d, 0.1);
        let mut r = Reranker::new(params.clone()).map_err(|e| e.to_string())?;
        let q = EmbeddingVector::new(unit(&mut rng, d)).unwrap();
        let mems: Vec<EmbeddingVector> = (0..k).map(|_| EmbeddingVector::new(unit(&mut rng, d)).unwrap()).collect();
        let cands: Vec<(String, &EmbeddingVector)> = mems.iter().enumerate().map(|(i, e)| (format!("m{i}"), e)).collect();
        let trace = r.rerank(&q, &cands, m, SelectionMode::Train).map_err(|e| e.to_string())?;
        let slices: Vec<&[f64]> = mems.iter().map(EmbeddingVector::as_slice).collect();
        let grads = r.grad_log_prob(q.as_slice(), &slices, &trace).map_err(|e| e.to_string())?;
        let mut g_q = Matrix::zeros(d);
        let mut g_m = Matrix::zeros(d);
        for g in &grads {
            for row in 0..d {
                for col in 0..d {
                    g_q.set(row, col, g_q.get(row, col) + g.d_wq.get(row, col));
                    g_m.set(row, col, g_m.get(row, col) + g.d_wm.get(row, col));
                }
            }
        }
        let sel = &trace.selected_positions;
        for which in 0..2 {
            for row in 0..d {
                for col in 0..d {
                    let bump = |delta: f64| {
                        let mut p = params.clone();
                        let w = if which == 0 { &mut p.w_q } else { &mut p.w_m };
                        w.set(row, col, w.get(row, col) + delta);
                        log_prob_at(&p, q.as_slice(), &slices, sel)
                    };
                    let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
                    let analytic = if which == 0 { g_q.get(row, col) } else { g_m.get(row, col) };
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
                    worst = worst.max(rel);
                }
            }
        }
    }
    ensure(worst <= GRAD_TOL, format!("max relative error {worst:.3e} (tol {GRAD_TOL:.0e})"))
}

fn identity_at_init() -> Outcome {
    let mut rng = BanditFixture::rng(4_242);
    let transcripts = {
        let mut s = Session::new("s0");
        s.push_turn("u", "a", None).unwrap();
        s.close();
        let mut t = TranscriptStore::new();
        t.insert(s).unwrap();
        t
    };
    let d = 8;
    let cfg = EmbedderConfig::hashing(d, Normalization::None);
    let mut agree = 0;
    let pairs = 1000;
    for case in 0..pairs {
        let n = rng.random_range(1..60);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let mut bank = MemoryBank::new("b", "o", &cfg, IngestionMode::Topic);
        for (i, id) in ids.into_iter().enumerate() {
            // Coarse components make exact score ties common.
            let v: Vec<f64> = (0..d).map(|_| f64::from(rng.random_range(-2i8..=2)) / 2.0).collect();
            let t = rng.random_range(0..4);
            bank.add_entry(
                MemoryEntry {
                    entry_id: format!("e{id:03}"),
                    owner: "o".into(),
                    topic_summary: format!("entry {i}"),
                    segments: vec![SegmentRef::new("s0", vec![0]).unwrap()],
                    embedding: EmbeddingVector::new(v).unwrap(),
                    created_at: at(t),
                    updated_at: at(t),
                    merge_count: 0,
                },
                &transcripts,
            )
            .map_err(|e| e.to_string())?;
        }
        let q: Vec<f64> = (0..d).map(|_| f64::from(rng.random_range(-2i8..=2))).collect();
        let k = 20.min(n);
        let m = rng.random_range(1..=k.min(5));

        let mut brute: Vec<(f64, _, &str)> = bank
            .entries()
            .iter()
            .map(|e| (e.embedding.as_slice().iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), e.created_at, e.entry_id.as_str()))
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2)));
        let expected: Vec<String> = brute.iter().take(m).map(|x| x.2.to_owned()).collect();

        let qv = EmbeddingVector::new(q.clone()).unwrap();
        let hits = bank.search_top_k(&qv, k).map_err(|e| e.to_string())?;
        let cands: Vec<(String, &EmbeddingVector)> =
            hits.iter().map(|h| (h.entry_id.clone(), &bank.get(&h.entry_id).unwrap().embedding)).collect();
        let mut r = Reranker::zero_init(d, case);
        let trace = r.rerank(&qv, &cands, m, SelectionMode::Infer).map_err(|e| e.to_string())?;
        if trace.selected_ids() == expected {
            agree += 1;
        }
    }
    ensure(agree == pairs, format!("{agree}/{pairs} pairs agree"))
}

fn bandit() -> Outcome {
    let fx = BanditFixture::standard();
    let mut r = Reranker::zero_init(fx.dimension, 5);
    let before = fx.inclusion_rate(&mut r, 200, 5, 900).map_err(|e| e.to_string())?;
    fx.train(&mut r, 500, 5, 17).map_err(|e| e.to_string())?;
    let after = fx.inclusion_rate(&mut r, 200, 5, 901).map_err(|e| e.to_string())?;
    let detail = format!(
        "inclusion {before:.3} -> {after:.3} after 500 updates ({} applied batches)",
        r.params().update_count
    );
    ensure((BANDIT_INIT.0..=BANDIT_INIT.1).contains(&before) && after > BANDIT_TARGET, detail)
}

fn mock_engine(mode: AgentMode, seed: u64, paths: Option<StorePaths>) -> Engine {
    let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(256, Normalization::UnitL2));
    let cfg = AgentConfig { owner: "alice".into(), mode, seed, ..Default::default() };
    Engine::open(cfg, Clients::mock(embedder), Arc::new(LogicalClock::new()), paths).unwrap()
}

fn scripted_report(script: &rmm_core::agent_loop::Script, mode: AgentMode, seed: u64) -> Result<MetricsReport, String> {
    let mut e = mock_engine(mode, seed, None);
    let rec = run_scripted(&mut e, script, None).map_err(|e| e.to_string())?;
    evaluate(&rec, &MockJudge::new(), 5).map_err(|e| e.to_string())
}

fn planted_recall() -> Outcome {
    let script = planted_facts();
    let a = scripted_report(&script, AgentMode::Rmm, 7)?;
    let b = scripted_report(&script, AgentMode::Rmm, 7)?;
    let (recall, acc) = (a.aggregates.recall_at_k, a.aggregates.accuracy);
    let same = a.to_json() == b.to_json();
    ensure(
        recall == 1.0 && acc == 1.0 && same,
        format!("Recall@5 {recall}, accuracy {acc}, rerun identical: {same}"),
    )
}

fn granularity() -> Outcome {
    let script = multi_evidence();
    let r = |mode| scripted_report(&script, mode, 3).map(|m| m.aggregates.recall_at_k);
    let (topic, session, turn) = (r(AgentMode::Rmm)?, r(AgentMode::RagSession)?, r(AgentMode::RagTurn)?);
    ensure(
        topic >= session && session >= turn,
        format!("Recall@5 topic {topic:.3} >= session {session:.3} >= turn {turn:.3}"),
    )
}

const MERGE_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789,.;:()'! ";

fn summary(rng: &mut impl Rng) -> String {
    let len = rng.random_range(1..60);
    let mut s: String = (0..len).map(|_| MERGE_ALPHABET[rng.random_range(0..MERGE_ALPHABET.len())] as char).collect();
    let end = b"abcXYZ019.)";
    s.push(end[rng.random_range(0..end.len())] as char);
    s.trim().to_owned()
}

fn action_grammar() -> Outcome {
    let worked = "Merge(0, SPEAKER_1 exercises every Monday and Thursday, although he doesn't particularly enjoy it.)";
    let parsed = parse_actions(worked, 1).map_err(|e| e.to_string())?;
    let want = vec![UpdateAction::Merge {
        merge_index: 0,
        merged_summary: "SPEAKER_1 exercises every Monday and Thursday, although he doesn't particularly enjoy it.".into(),
    }];
    if parsed.actions != want || parsed.degraded != 0 {
        return Err(format!("worked example parsed to {:?}", parsed.actions));
    }
    let mut rng = BanditFixture::rng(808);
    for case in 0..1000 {
        let n = rng.random_range(1..6);
        let actions: Vec<UpdateAction> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    UpdateAction::Add
                } else {
                    UpdateAction::Merge { merge_index: rng.random_range(0..8), merged_summary: summary(&mut rng) }
                }
            })
            .collect();
        let text = render_actions(&actions);
        let back = parse_actions(&text, 8).map_err(|e| format!("case {case}: {e}"))?;
        if back.actions != actions {
            return Err(format!("case {case} did not round-trip: {text:?}"));
        }
    }
    Ok("worked example exact; 1000/1000 action lists round-trip".into())
}

fn citation_parsing() -> Outcome {
    let cited = parse_citations("You enjoy hiking, playing the guitar, and stargazing. [0, 1, 2]", 3);
    let none = parse_citations("I don't have enough information to answer that. [NO_CITE]", 3);
    if cited.citations != [0, 1, 2] || cited.parse_status != ParseStatus::Cited {
        return Err(format!("first example: {:?} {:?}", cited.citations, cited.parse_status));
    }
    if !none.citations.is_empty() || none.parse_status != ParseStatus::NoCite {
        return Err(format!("second example: {:?} {:?}", none.citations, none.parse_status));
    }
    let mut rng = BanditFixture::rng(909);
    let noise = ["[", "]", ",", " ", "0", "1", "7", "12", "99", "-1", "NO_CITE", "x", "[3]", "[0,", "]]"];
    for case in 0..5000 {
        let m = rng.random_range(1..6);
        let raw: String = (0..rng.random_range(0..30)).map(|_| noise[rng.random_range(0..noise.len())]).collect();
        let r = parse_citations(&raw, m);
        if r.citations.iter().any(|&i| i >= m) {
            return Err(format!("case {case}: {raw:?} gave {:?} with m={m}", r.citations));
        }
    }
    Ok("worked examples exact; 5000 fuzzed strings stay in range".into())
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = StorePaths::new(dir.path());
    let script = planted_facts();
    let mut live = mock_engine(AgentMode::Rmm, 21, Some(paths.clone()));
    for s in &script.sessions {
        let id = live.start_session().map_err(|e| e.to_string())?.session_id;
        for t in &s.turns {
            live.run_turn(&id, &t.user_utterance).map_err(|e| e.to_string())?;
        }
        live.end_session(&id).map_err(|e| e.to_string())?;
    }
    live.checkpoint().map_err(|e| e.to_string())?;

    let bank = MemoryBank::load(&paths.bank(), None).map_err(|e| e.to_string())?;
    let bank_ok = bank.to_jsonl() == live.bank().to_jsonl()
        && std::fs::read_to_string(paths.bank()).map_err(|e| e.to_string())? == bank.to_jsonl();
    let transcripts = TranscriptStore::load(&paths.transcripts()).map_err(|e| e.to_string())?;
    let transcripts_ok = &transcripts == live.transcripts() && transcripts.to_jsonl() == live.transcripts().to_jsonl();

    let mut params = Reranker::load(&paths.params(), Some(256)).map_err(|e| e.to_string())?;
    let mut original = live.reranker().clone();
    let params_ok = params.to_json() == original.to_json() && params.params() == original.params();
    // The restored generator continues the same stream.
    let fx = BanditFixture::new(20, 256, 3);
    let mut rng = BanditFixture::rng(1);
    let q = fx.query(&mut rng);
    let cands = fx.candidates(&mut rng);
    let a = params.rerank(&q, &cands, 5, SelectionMode::Train).map_err(|e| e.to_string())?;
    let b = original.rerank(&q, &cands, 5, SelectionMode::Train).map_err(|e| e.to_string())?;
    let rng_ok = a.selected_positions == b.selected_positions && a.perturbed == b.perturbed;

    let mut fresh = mock_engine(AgentMode::Rmm, 21, None);
    fresh.replay(transcripts.sessions()).map_err(|e| e.to_string())?;
    let replay_ok = fresh.bank().state_hash() == live.bank().state_hash();
    ensure(
        bank_ok && transcripts_ok && params_ok && rng_ok && replay_ok,
        format!(
            "bank {bank_ok}, transcripts {transcripts_ok}, params {params_ok}, rng stream {rng_ok}, replay hash {replay_ok}"
        ),
    )
}

async fn parity() -> Outcome {
    let served = tempfile::tempdir().map_err(|e| e.to_string())?;
    let direct = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = common::config(served.path());
    let srv = common::Running::start(AppState::new(cfg.clone())).await;
    let c = reqwest::Client::new();
    let mut lib = common::direct_engine(&cfg, "alice", direct.path());
    let mut mismatches = Vec::new();
    let mut checked = 0;
    let mut check = |name: &str, got: Value, want: Value| {
        checked += 1;
        if got != want {
            mismatches.push(name.to_owned());
        }
    };
    async fn send(r: reqwest::RequestBuilder) -> Value {
        r.send().await.unwrap().json().await.unwrap()
    }

    let script = planted_facts();
    for s in &script.sessions {
        let info = send(c.post(srv.url("/v1/sessions")).json(&json!({"owner": "alice"}))).await;
        let lib_info = lib.start_session().map_err(|e| e.to_string())?;
        check("POST /v1/sessions", info.clone(), serde_json::to_value(&lib_info).unwrap());
        let id = lib_info.session_id;
        for t in &s.turns {
            let got = send(c.post(srv.url(&format!("/v1/sessions/{id}/messages"))).json(&json!({"text": t.user_utterance}))).await;
            let want = serde_json::to_value(lib.run_turn(&id, &t.user_utterance).map_err(|e| e.to_string())?).unwrap();
            check("POST /v1/sessions/{id}/messages", common::without_timing(got), common::without_timing(want));
        }
        let got = send(c.delete(srv.url(&format!("/v1/sessions/{id}")))).await;
        check("DELETE /v1/sessions/{id}", got, serde_json::to_value(lib.end_session(&id).map_err(|e| e.to_string())?).unwrap());
    }
    for q in &script.questions {
        let query: String = q.question.split_whitespace().collect::<Vec<_>>().join("%20").replace('?', "%3F");
        let got = send(c.get(srv.url(&format!("/v1/memory/search?q={query}&k=5")))).await;
        let want = lib.bank().search_text(lib.embedder(), &q.question, 5).map_err(|e| e.to_string())?;
        check("GET /v1/memory/search", got, serde_json::to_value(&want).unwrap());
        let first = &want[0].entry_id;
        let got = send(c.get(srv.url(&format!("/v1/memory/{first}")))).await;
        check("GET /v1/memory/{id}", got, serde_json::to_value(lib.bank().get(first).unwrap()).unwrap());
    }
    let got = send(c.get(srv.url("/v1/metrics?owner=alice"))).await;
    check("GET /v1/metrics", got, serde_json::to_value(lib.metrics()).unwrap());
    let health = c.get(srv.url("/healthz")).send().await.map_err(|e| e.to_string())?;
    check("GET /healthz", json!(health.status().as_u16()), json!(200));
    srv.stop().await;
    lib.checkpoint().map_err(|e| e.to_string())?;
    for f in ["bank.jsonl", "transcripts.jsonl", "reflected.jsonl", "params.json"] {
        let a = std::fs::read(served.path().join("owners/alice").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(direct.path().join("owners/alice").join(f)).map_err(|e| e.to_string())?;
        check(f, json!(a), json!(b));
    }
    mismatches.dedup();
    ensure(mismatches.is_empty(), format!("{checked} comparisons, mismatched: {mismatches:?}"))
}

fn service_parity() -> Outcome {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?
        .block_on(parity())
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("gumbel top-1 matches softmax", Duration::from_secs(10), gumbel_single),
        ("gumbel ordered pair matches plackett-luce", Duration::from_secs(20), gumbel_pair),
        ("analytic gradient matches finite differences", Duration::from_secs(30), gradient_check),
        ("zero adapters reproduce brute-force top-m", Duration::from_secs(60), identity_at_init),
        ("bandit target inclusion converges", Duration::from_secs(60), bandit),
        ("planted facts recalled and judged correct", Duration::from_secs(120), planted_recall),
        ("topic >= session >= turn granularity", Duration::from_secs(120), granularity),
        ("update action grammar", Duration::from_secs(30), action_grammar),
        ("citation parsing", Duration::from_secs(30), citation_parsing),
        ("persistence and replay determinism", Duration::from_secs(120), persistence),
        ("service parity with library calls", Duration::from_secs(120), service_parity),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.2}s / {}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
