//! Workload generation: Poisson arrivals with a long-tailed per-user prefix
//! length mixture (most users short, a small fraction long), and a refresh
//! model where a fraction of trials are rapid repeats from recently seen
//! users. Repeats are what give the DRAM tier something to hit.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, Suffix};
use crate::router::stable_hash64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload config: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    /// Offered trial rate, queries per second.
    pub offered_qps: f64,
    /// Simulated duration over which arrivals are generated, seconds.
    pub horizon_s: f64,
    /// Candidate items per ranking query.
    pub items_per_query: usize,
    /// Incremental (short-term + cross) tokens per trial, uniform inclusive.
    pub suffix_range: (usize, usize),
    /// Fraction of users whose prefix falls in the long range.
    pub long_fraction: f64,
    pub short_prefix_range: (usize, usize),
    pub long_prefix_range: (usize, usize),
    /// Probability that a trial repeats a recently seen user (rapid refresh).
    pub repeat_prob: f64,
    /// How many recent users the refresh model draws from.
    pub repeat_pool: usize,
    /// Cap on simultaneously in-flight rank executions; None leaves the
    /// offered rate as the only control.
    pub rank_concurrency_clamp: Option<u32>,
    pub rng_seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            offered_qps: 100.0,
            horizon_s: 30.0,
            items_per_query: 512,
            suffix_range: (32, 128),
            // Fewer than 6% of users carry long sequences past 2K tokens.
            long_fraction: 0.06,
            short_prefix_range: (64, 2000),
            long_prefix_range: (4200, 8000),
            repeat_prob: 0.0,
            repeat_pool: 512,
            rank_concurrency_clamp: None,
            rng_seed: 1,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.offered_qps <= 0.0 {
            return Err(WorkloadError::Invalid("offered_qps must be positive"));
        }
        if self.horizon_s <= 0.0 {
            return Err(WorkloadError::Invalid("horizon must be positive"));
        }
        if !(0.0..=1.0).contains(&self.long_fraction) {
            return Err(WorkloadError::Invalid("long_fraction must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return Err(WorkloadError::Invalid("repeat_prob must be in [0, 1]"));
        }
        for (lo, hi) in [
            self.suffix_range,
            self.short_prefix_range,
            self.long_prefix_range,
        ] {
            if lo > hi {
                return Err(WorkloadError::Invalid("range lower bound above upper"));
            }
        }
        if self.short_prefix_range.0 == 0 || self.long_prefix_range.0 == 0 {
            return Err(WorkloadError::Invalid("prefix lengths must be at least 1"));
        }
        Ok(())
    }
}

/// One recommendation trial flowing through the pipeline.
#[derive(Debug, Clone)]
pub struct Trial {
    pub trial_id: u64,
    pub user_key: String,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub items: usize,
    pub arrive_us: u64,
}

impl Trial {
    pub fn item_ids(&self) -> Vec<u64> {
        (0..self.items as u64)
            .map(|i| self.trial_id * 100_000 + i)
            .collect()
    }
}

/// Generate the full arrival trace. Deterministic for a fixed config.
pub fn generate_trials(cfg: &WorkloadConfig) -> Result<Vec<Trial>, WorkloadError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut trials = Vec::new();
    let mut prefix_of: HashMap<String, usize> = HashMap::new();
    let mut recent: Vec<String> = Vec::new();
    let horizon_us = (cfg.horizon_s * 1e6) as u64;
    let mut t_s = 0.0f64;
    let mut next_user = 0u64;
    let mut trial_id = 0u64;
    loop {
        let u: f64 = rng.random();
        t_s += -(1.0 - u).ln() / cfg.offered_qps;
        let arrive_us = (t_s * 1e6).ceil() as u64;
        if arrive_us >= horizon_us {
            break;
        }
        let repeat = !recent.is_empty() && rng.random::<f64>() < cfg.repeat_prob;
        let user_key = if repeat {
            recent[rng.random_range(0..recent.len())].clone()
        } else {
            let key = format!("u{next_user}");
            next_user += 1;
            let long = rng.random::<f64>() < cfg.long_fraction;
            let (lo, hi) = if long {
                cfg.long_prefix_range
            } else {
                cfg.short_prefix_range
            };
            prefix_of.insert(key.clone(), rng.random_range(lo..=hi));
            key
        };
        // The refresh pool holds distinct recent users.
        recent.retain(|u| *u != user_key);
        recent.push(user_key.clone());
        if recent.len() > cfg.repeat_pool {
            recent.remove(0);
        }
        trials.push(Trial {
            trial_id,
            user_key: user_key.clone(),
            prefix_len: prefix_of[&user_key],
            suffix_len: rng.random_range(cfg.suffix_range.0..=cfg.suffix_range.1),
            items: cfg.items_per_query,
            arrive_us,
        });
        trial_id += 1;
    }
    Ok(trials)
}

/// Deterministic stand-in for the user-behavior and item stores: token
/// vectors derived from stable hashes of (seed, role, key, position), so
/// every component sees identical data for the same user or item.
#[derive(Debug, Clone)]
pub struct BehaviorStore {
    model: ModelConfig,
    seed: u64,
}

impl BehaviorStore {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self { model, seed }
    }

    fn tokens(&self, label: &str, n: usize) -> Array2<f64> {
        let h = stable_hash64(format!("{}/{}", self.seed, label).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut m = Array2::zeros((n, self.model.dim));
        for r in 0..n {
            for c in 0..self.model.dim {
                m[[r, c]] = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
        m
    }

    /// User info and long-term behavior segments for a prefix of the given
    /// length. User info takes up to 4 leading tokens.
    pub fn prefix_segments(&self, user_key: &str, prefix_len: usize) -> (Array2<f64>, Array2<f64>) {
        let ui_len = prefix_len.min(4);
        let ui = self.tokens(&format!("ui/{user_key}"), ui_len);
        let lt = self.tokens(&format!("lt/{user_key}"), prefix_len - ui_len);
        (ui, lt)
    }

    /// Per-trial incremental tokens (short-term behaviors; cross features
    /// are folded into the same opaque suffix block).
    pub fn suffix(&self, user_key: &str, trial_id: u64, suffix_len: usize) -> Suffix {
        Suffix {
            short_term: self.tokens(&format!("st/{user_key}/{trial_id}"), suffix_len),
            cross_features: Array2::zeros((0, self.model.dim)),
        }
    }

    /// Candidate vectors for the given item ids.
    pub fn candidates(&self, item_ids: &[u64]) -> Array2<f64> {
        let mut m = Array2::zeros((item_ids.len(), self.model.dim));
        for (row, id) in item_ids.iter().enumerate() {
            let one = self.tokens(&format!("item/{id}"), 1);
            m.row_mut(row).assign(&one.row(0));
        }
        m
    }
}
