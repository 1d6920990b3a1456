//! Reflective memory management for long-running conversational agents.

pub mod agent_loop;
pub mod attribution;
pub mod canonical;
pub mod clock;
pub mod embedding;
pub mod eval;
pub mod fixtures;
pub mod llm;
pub mod memory_bank;
pub mod mock;
pub mod prompts;
pub mod prospective;
pub mod reranker;
pub mod transcript;
