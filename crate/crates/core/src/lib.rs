//! Pregnancy identification and complication-risk triage over
//! administrative claims.

pub mod claims;
pub mod cohort;
pub mod eval;
pub mod features;
pub mod fingerprint;
pub mod glm;
pub mod hapi;
pub mod pipeline;
pub mod risk;
pub mod stats;
pub mod synth;
pub mod workflow;
