//! Detection and analysis of erroneous outbound traffic in packet traces.

pub mod codec;
pub mod detector;
pub mod mirror;
pub mod pipeline;
pub mod analytics;
pub mod privacy;
pub mod rules;
pub mod store;
pub mod synth;
pub mod time;
