//! Audio anti-spoofing with hybrid learned/Mel features and self-attention.

pub mod audio;
pub mod corpus;
pub mod dsp;
pub mod metrics;
pub mod pipeline;
pub mod model;
pub mod tensor;
