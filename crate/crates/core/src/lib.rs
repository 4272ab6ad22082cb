//! Caption-evaluation bench core.

pub mod api;
pub mod dataset;
pub mod gateway;
pub mod head;
pub mod jsonl;
pub mod leaderboard;
pub mod pipeline;
pub mod rank;
pub mod report;
pub mod subjective;
pub mod synth;
