//! Latency histograms and percentile summaries.

use serde::{Deserialize, Serialize};

/// A plain sample collector; percentiles use the nearest-rank method.
#[derive(Debug, Clone, Default)]
pub struct Histogram {
    samples: Vec<u64>,
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, value_us: u64) {
        self.samples.push(value_us);
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Nearest-rank percentile: the smallest sample with at least p of the
    /// mass at or below it. Returns 0 on an empty histogram.
    pub fn percentile_us(&self, p: f64) -> u64 {
        if self.samples.is_empty() {
            return 0;
        }
        let mut sorted = self.samples.clone();
        sorted.sort_unstable();
        let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
        sorted[rank.clamp(1, sorted.len()) - 1]
    }

    pub fn max_us(&self) -> u64 {
        self.samples.iter().copied().max().unwrap_or(0)
    }

    pub fn mean_us(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.samples.iter().sum::<u64>() as f64 / self.samples.len() as f64
        }
    }

    pub fn summary(&self) -> StageSummary {
        StageSummary {
            count: self.count() as u64,
            mean_ms: self.mean_us() / 1e3,
            p50_ms: self.percentile_us(50.0) as f64 / 1e3,
            p90_ms: self.percentile_us(90.0) as f64 / 1e3,
            p99_ms: self.percentile_us(99.0) as f64 / 1e3,
            p999_ms: self.percentile_us(99.9) as f64 / 1e3,
            max_ms: self.max_us() as f64 / 1e3,
        }
    }
}

/// Percentile summary of one latency stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub p999_ms: f64,
    pub max_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let mut h = Histogram::new();
        for v in 1..=100u64 {
            h.record(v * 1000);
        }
        assert_eq!(h.percentile_us(50.0), 50_000);
        assert_eq!(h.percentile_us(99.0), 99_000);
        assert_eq!(h.percentile_us(100.0), 100_000);
        assert_eq!(h.percentile_us(1.0), 1_000);
        assert_eq!(h.max_us(), 100_000);
    }

    #[test]
    fn empty_histogram_is_zero() {
        let h = Histogram::new();
        assert_eq!(h.percentile_us(99.0), 0);
        assert_eq!(h.summary().count, 0);
    }

    #[test]
    fn single_sample() {
        let mut h = Histogram::new();
        h.record(777);
        assert_eq!(h.percentile_us(50.0), 777);
        assert_eq!(h.percentile_us(99.9), 777);
    }
}
