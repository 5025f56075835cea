//! Pipeline orchestration behind the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod leaderboard;

pub use checkpoint::{config_hash, Checkpoint};
pub use config::RunConfig;
pub use leaderboard::{emit_leaderboard, LeaderboardRow, COLUMNS};
pub mod pipeline;
pub mod suite;
