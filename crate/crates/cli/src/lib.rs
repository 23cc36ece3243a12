//! Command implementations behind the capvid binary.

pub mod ablation;
pub mod commands;
pub mod figures;
