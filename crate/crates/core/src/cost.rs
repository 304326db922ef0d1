//! Calibrated latency cost model.
//!
//! Attention-stack compute grows super-linearly with sequence length, so
//! pre-inference latency is a quadratic `a2*n^2 + a1*n + a0` over prefix
//! tokens, and the baseline full-inference latency is the same curve
//! evaluated at the full length (prefix + suffix + items). Cache loading is
//! linear in bytes: `bytes / bandwidth + fixed`. Ranking on a cache touches
//! only the incremental tokens: `b1*(suffix + items) + b0 + b2*suffix^2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("under-determined fit: {0}")]
    UnderDetermined(&'static str),
    #[error("singular system while fitting {0}")]
    Singular(&'static str),
    #[error("anchor ({x}, {y} ms) reproduced as {got} ms, off by more than 10%")]
    AnchorMismatch { x: f64, y: f64, got: f64 },
    #[error("load anchor target {target} ms must exceed the fixed overhead {fixed} ms")]
    LoadAnchorTooSmall { target: f64, fixed: f64 },
}

/// Latency model for every simulated component, milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Pre-inference curve coefficients (a2, a1, a0) over prefix tokens.
    pub pre_coeffs: (f64, f64, f64),
    /// DRAM -> HBM reload bandwidth, bytes per second.
    pub reload_bandwidth_bytes_per_s: f64,
    /// Fixed reload overhead, ms.
    pub load_fixed_ms: f64,
    /// Ranking-on-cache coefficients: b1 per incremental token, b0 fixed,
    /// b2 quadratic in suffix length (suffix tokens attend to each other).
    pub rank_coeffs: (f64, f64, f64),
    /// Retrieval stage delay, uniform range in ms (an assumption; the
    /// upstream stages are modeled as delays, not contended resources).
    pub retrieval_ms: (f64, f64),
    /// Pre-processing stage delay, uniform range in ms (assumption).
    pub preproc_ms: (f64, f64),
    /// Delivery delay of the auxiliary pre-infer signal, ms.
    pub dispatch_ms: f64,
    /// Configured remote-fetch latency, for local-vs-remote comparison only;
    /// never used on any rank path.
    pub remote_fetch_ms: f64,
    /// Local HBM cache access latency, for the same comparison.
    pub local_probe_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        calibrate(&CalibrationAnchors::default()).expect("default anchors must fit")
    }
}

impl CostModel {
    /// Pre-inference latency over a prefix of `n` tokens.
    pub fn pre_ms(&self, n: usize) -> f64 {
        let n = n as f64;
        let (a2, a1, a0) = self.pre_coeffs;
        (a2 * n * n + a1 * n + a0).max(0.0)
    }

    /// DRAM -> HBM load latency for a cache of `bytes`, with `sharing`
    /// concurrent reloads dividing the server's bandwidth.
    pub fn load_ms(&self, bytes: u64, sharing: u32) -> f64 {
        let effective = self.reload_bandwidth_bytes_per_s / sharing.max(1) as f64;
        bytes as f64 / effective * 1e3 + self.load_fixed_ms
    }

    /// Ranking-on-cache latency for `suffix` incremental tokens and `items`
    /// candidates.
    pub fn rank_ms(&self, suffix: usize, items: usize) -> f64 {
        let (b1, b0, b2) = self.rank_coeffs;
        let s = suffix as f64;
        (b1 * (s + items as f64) + b0 + b2 * s * s).max(0.0)
    }

    /// Baseline full inference: the pre curve at the total length.
    pub fn baseline_ms(&self, prefix: usize, suffix: usize, items: usize) -> f64 {
        self.pre_ms(prefix + suffix + items)
    }

    pub fn sample_retrieval_us(&self, u: f64) -> u64 {
        uniform_us(self.retrieval_ms, u)
    }

    pub fn sample_preproc_us(&self, u: f64) -> u64 {
        uniform_us(self.preproc_ms, u)
    }
}

fn uniform_us(range_ms: (f64, f64), u: f64) -> u64 {
    let ms = range_ms.0 + (range_ms.1 - range_ms.0) * u;
    ms_to_us(ms)
}

/// Integer-microsecond timestamps; cost-model outputs always round up.
pub fn ms_to_us(ms: f64) -> u64 {
    (ms * 1e3).ceil().max(0.0) as u64
}

/// Anchor points the calibration fits through.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationAnchors {
    /// (prefix tokens, ms) points for the pre curve; at least three.
    pub pre: Vec<(f64, f64)>,
    /// One (bytes, ms) point pinning the reload bandwidth.
    pub load: (f64, f64),
    pub load_fixed_ms: f64,
    /// (incremental tokens, ms) points for the rank line; at least two.
    pub rank: Vec<(f64, f64)>,
    pub rank_suffix_quadratic: f64,
    pub retrieval_ms: (f64, f64),
    pub preproc_ms: (f64, f64),
    pub dispatch_ms: f64,
    pub remote_fetch_ms: f64,
    pub local_probe_ms: f64,
}

impl Default for CalibrationAnchors {
    fn default() -> Self {
        Self {
            // 35 ms at ~2K tokens; the flanking points shape the quadratic.
            pre: vec![(1024.0, 15.0), (2048.0, 35.0), (4096.0, 95.0)],
            // A 15K-token cache at 8 layers x 256 dim x 4 B is ~245.8 MB and
            // must load in well under 20 ms.
            load: (245_760_000.0, 18.0),
            load_fixed_ms: 1.0,
            rank: vec![(640.0, 3.1), (2176.0, 9.2)],
            rank_suffix_quadratic: 1e-6,
            retrieval_ms: (20.0, 40.0),
            preproc_ms: (20.0, 40.0),
            dispatch_ms: 1.0,
            remote_fetch_ms: 25.0,
            local_probe_ms: 0.05,
        }
    }
}

/// Least-squares fit of the cost model through the anchors. Errors when the
/// system is under-determined; every anchor must be reproduced within 10%.
pub fn calibrate(anchors: &CalibrationAnchors) -> Result<CostModel, CalibrationError> {
    if anchors.pre.len() < 3 {
        return Err(CalibrationError::UnderDetermined(
            "pre curve needs at least 3 anchors",
        ));
    }
    if anchors.rank.len() < 2 {
        return Err(CalibrationError::UnderDetermined(
            "rank line needs at least 2 anchors",
        ));
    }
    let pre = fit_poly2(&anchors.pre)?;
    let (load_bytes, load_target) = anchors.load;
    if load_target <= anchors.load_fixed_ms {
        return Err(CalibrationError::LoadAnchorTooSmall {
            target: load_target,
            fixed: anchors.load_fixed_ms,
        });
    }
    let bandwidth = load_bytes * 1e3 / (load_target - anchors.load_fixed_ms);
    let (b1, b0) = fit_line(&anchors.rank)?;
    let model = CostModel {
        pre_coeffs: pre,
        reload_bandwidth_bytes_per_s: bandwidth,
        load_fixed_ms: anchors.load_fixed_ms,
        rank_coeffs: (b1, b0, anchors.rank_suffix_quadratic),
        retrieval_ms: anchors.retrieval_ms,
        preproc_ms: anchors.preproc_ms,
        dispatch_ms: anchors.dispatch_ms,
        remote_fetch_ms: anchors.remote_fetch_ms,
        local_probe_ms: anchors.local_probe_ms,
    };
    for &(x, y) in &anchors.pre {
        let got = model.pre_ms(x as usize);
        if (got - y).abs() > 0.10 * y.abs() {
            return Err(CalibrationError::AnchorMismatch { x, y, got });
        }
    }
    let got = model.load_ms(load_bytes as u64, 1);
    if (got - load_target).abs() > 0.10 * load_target {
        return Err(CalibrationError::AnchorMismatch {
            x: load_bytes,
            y: load_target,
            got,
        });
    }
    for &(x, y) in &anchors.rank {
        let got = model.rank_ms(0, x as usize);
        if (got - y).abs() > 0.10 * y.abs() {
            return Err(CalibrationError::AnchorMismatch { x, y, got });
        }
    }
    Ok(model)
}

fn fit_poly2(points: &[(f64, f64)]) -> Result<(f64, f64, f64), CalibrationError> {
    // Normal equations for y = a2 x^2 + a1 x + a0.
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(x, y) in points {
        let row = [x * x, x, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    let sol = solve3(ata, aty).ok_or(CalibrationError::Singular("pre curve"))?;
    Ok((sol[0], sol[1], sol[2]))
}

fn fit_line(points: &[(f64, f64)]) -> Result<(f64, f64), CalibrationError> {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 {
        return Err(CalibrationError::Singular("rank line"));
    }
    let b1 = (n * sxy - sx * sy) / det;
    let b0 = (sy - b1 * sx) / n;
    Ok((b1, b0))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in (row + 1)..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::kv_cache_bytes;

    #[test]
    fn default_model_hits_the_anchors() {
        let m = CostModel::default();
        let pre2k = m.pre_ms(2048);
        assert!((31.5..=38.5).contains(&pre2k), "pre(2048) = {pre2k}");
        let bytes_15k = kv_cache_bytes(8, 15_000, 256, 4);
        assert!(m.load_ms(bytes_15k, 1) <= 20.0);
        assert!(m.rank_ms(64, 2048) <= 10.0);
        assert!(m.rank_ms(64, 512) <= 10.0);
    }

    #[test]
    fn reload_is_far_cheaper_than_recompute_at_threshold() {
        let m = CostModel::default();
        let bytes_2k = kv_cache_bytes(8, 2048, 256, 4);
        assert!(m.load_ms(bytes_2k, 1) < m.pre_ms(2048) / 5.0);
    }

    #[test]
    fn remote_fetch_dwarfs_local_access() {
        let m = CostModel::default();
        assert!(m.remote_fetch_ms >= 100.0 * m.local_probe_ms);
    }

    #[test]
    fn pre_curve_is_superlinear_and_load_linear() {
        let m = CostModel::default();
        // Doubling tokens more than doubles pre latency (a2 > 0).
        assert!(m.pre_ms(8192) > 2.0 * m.pre_ms(4096));
        // Load is linear in bytes.
        let l1 = m.load_ms(100_000_000, 1) - m.load_fixed_ms;
        let l2 = m.load_ms(200_000_000, 1) - m.load_fixed_ms;
        assert!((l2 / l1 - 2.0).abs() < 1e-9);
        // Sharing divides bandwidth.
        assert!(m.load_ms(100_000_000, 2) > m.load_ms(100_000_000, 1));
    }

    #[test]
    fn under_determined_fit_is_an_error() {
        let mut anchors = CalibrationAnchors::default();
        anchors.pre.truncate(2);
        assert!(matches!(
            calibrate(&anchors),
            Err(CalibrationError::UnderDetermined(_))
        ));
        let mut anchors = CalibrationAnchors::default();
        anchors.rank.truncate(1);
        assert!(calibrate(&anchors).is_err());
    }

    #[test]
    fn overdetermined_fit_stays_within_tolerance() {
        let mut anchors = CalibrationAnchors::default();
        // A fourth, slightly-off point: least squares must still reproduce
        // every anchor within 10%.
        anchors.pre.push((3072.0, 62.0));
        let m = calibrate(&anchors).unwrap();
        for (x, y) in anchors.pre {
            let got = m.pre_ms(x as usize);
            assert!((got - y).abs() <= 0.10 * y, "pre({x}) = {got}, anchor {y}");
        }
    }

    #[test]
    fn rounding_is_up_and_integral() {
        assert_eq!(ms_to_us(0.0101), 11);
        assert_eq!(ms_to_us(1.0), 1000);
        assert_eq!(ms_to_us(-3.0), 0);
    }
}
