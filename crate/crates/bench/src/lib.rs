//! Fixtures shared by the benchmarks.

use flood_core::corpus_io::{generate_tree_corpus, CorpusSpec};
use flood_core::{ConditionedCorpus, DenoiserConfig, DenoiserParams, Mat};

/// The default toy network for a `D = 2`, two-control corpus.
pub fn toy_model() -> DenoiserParams {
    DenoiserParams::init(&DenoiserConfig::toy(2, 2), 0).expect("toy config is valid")
}

pub fn four_atom_corpus() -> ConditionedCorpus {
    generate_tree_corpus(&CorpusSpec::standard_four_atom()).expect("preset is valid")
}

/// A deterministic `rows × 2` window with a descending α ramp.
pub fn window(rows: usize) -> (Mat, Vec<u32>, Vec<f64>) {
    let x = Mat::from_vec(rows, 2, (0..rows * 2).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect());
    let controls = (0..rows as u32).map(|k| k % 2).collect();
    let alpha = (0..rows).map(|k| 1.0 - (k + 1) as f64 / (rows + 1) as f64).collect();
    (x, controls, alpha)
}
