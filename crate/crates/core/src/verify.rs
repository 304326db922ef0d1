//! Cached-vs-full equivalence verification: randomized toy instances where
//! full inference is the oracle for the cached ranking path.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    Backbone, ModelConfig, ModelError, SegmentedSequence, EPSILON_F32, EPSILON_F64,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub trials: u32,
    pub max_deviation: f64,
    pub epsilon: f64,
    pub passed: bool,
}

/// Run `trials` randomized instances (prefix <= 256, layers <= 4, dim <= 32,
/// suffix 0-32, candidates 1-16) comparing cached ranking against full
/// inference. `corrupt` perturbs one cached value per trial as a negative
/// control; the check must then fail.
pub fn verify_equivalence(
    elem_bytes: usize,
    trials: u32,
    seed: u64,
    corrupt: bool,
) -> Result<VerifyOutcome, ModelError> {
    let epsilon = if elem_bytes == 8 {
        EPSILON_F64
    } else {
        EPSILON_F32
    };
    let mut meta = ChaCha8Rng::seed_from_u64(seed);
    let mut max_deviation = 0.0f64;
    for _ in 0..trials {
        let dim = meta.random_range(4..=32usize);
        let cfg = ModelConfig {
            layers: meta.random_range(1..=4usize),
            dim,
            elem_bytes,
            seed: meta.random(),
        };
        let backbone = Backbone::new(cfg)?;
        let tok = |rng: &mut ChaCha8Rng, n: usize| {
            let mut m = Array2::zeros((n, dim));
            for r in 0..n {
                for c in 0..dim {
                    m[[r, c]] = rng.random::<f64>() * 2.0 - 1.0;
                }
            }
            m
        };
        let ui_len = meta.random_range(0..=4usize);
        let lt_len = meta.random_range(1..=(256 - ui_len).min(252));
        let suffix_len = meta.random_range(0..=32usize);
        let cand_len = meta.random_range(1..=16usize);
        let seq = SegmentedSequence {
            user_info: tok(&mut meta, ui_len),
            long_term: tok(&mut meta, lt_len),
            short_term: tok(&mut meta, suffix_len),
            cross_features: Array2::zeros((0, dim)),
            candidates: tok(&mut meta, cand_len),
        };
        let full = backbone.full_infer(&seq)?;
        let mut cache = backbone.prefix_preinfer("verify", &seq.user_info, &seq.long_term)?;
        if corrupt {
            for kv in cache.per_layer_kv.iter_mut() {
                kv.v.row_mut(0).mapv_inplace(|x| x + 0.25);
            }
        }
        let cached = backbone.rank_with_cache(&cache, &seq.suffix(), &seq.candidates)?;
        max_deviation = max_deviation.max(cached.max_abs_diff(&full));
    }
    Ok(VerifyOutcome {
        trials,
        max_deviation,
        epsilon,
        passed: max_deviation <= epsilon,
    })
}
