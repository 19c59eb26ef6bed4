//! Optional techniques: mixture-of-experts feed-forward layers,
//! sharpness-aware minimization and gradient-ascent post-training.

pub mod gap;
pub mod moe;
pub mod sam;
