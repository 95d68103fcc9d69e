pub mod annotate;
pub mod judge;
pub mod probe;
pub mod scenario;
pub mod stats;
pub mod synth;
