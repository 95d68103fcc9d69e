//! Shared fixtures for the benchmarks.

use scenflow::agents::scenario::Kind;
use scenflow::agents::synth::synth_dataset;
use scenflow::text::{ReferenceEncoder, TextEmbedding, Vocabulary, REFERENCE_DIM};

/// `n` synthetic PV series of length `len`.
pub fn pv_series(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    synth_dataset(Kind::Pv, n, len, seed)
        .expect("valid synthesis arguments")
        .into_iter()
        .map(|s| s.series)
        .collect()
}

pub fn prompt_embedding(prompt: &str) -> TextEmbedding {
    ReferenceEncoder::new(Vocabulary::template_lexicon(), REFERENCE_DIM, 0)
        .and_then(|e| e.encode_prompt(prompt))
        .expect("prompt uses the template lexicon")
}
