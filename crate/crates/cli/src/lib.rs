pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod ablation;
