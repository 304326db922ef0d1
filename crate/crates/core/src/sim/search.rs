//! Capacity searches and parameter sweeps built on repeated runs: largest
//! SLO-compliant sequence length, largest SLO-compliant offered rate, and
//! the grid sweeps behind the evaluation figures.

use std::str::FromStr;

use crate::config::{ConfigError, SimMode, SystemConfig};

use super::engine::{run, EngineError};
use super::report::SimReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    SeqLen,
    Items,
    Dim,
    Layers,
    RetrievalSlack,
    Concurrency,
    OfferedQps,
    DramHit,
}

impl FromStr for SweepParam {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seq-len" => Ok(Self::SeqLen),
            "items" => Ok(Self::Items),
            "dim" => Ok(Self::Dim),
            "layers" => Ok(Self::Layers),
            "retrieval-slack" => Ok(Self::RetrievalSlack),
            "concurrency" => Ok(Self::Concurrency),
            "offered-qps" | "qps" => Ok(Self::OfferedQps),
            "dram-hit" => Ok(Self::DramHit),
            other => Err(ConfigError::Invalid(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SeqLen => "seq-len",
            Self::Items => "items",
            Self::Dim => "dim",
            Self::Layers => "layers",
            Self::RetrievalSlack => "retrieval-slack",
            Self::Concurrency => "concurrency",
            Self::OfferedQps => "offered-qps",
            Self::DramHit => "dram-hit",
        }
    }
}

#[derive(Debug)]
pub struct SweepRow {
    pub value: f64,
    pub report: SimReport,
}

/// Apply one sweep value to a copy of the base config.
pub fn apply_param(
    base: &SystemConfig,
    mode: SimMode,
    param: SweepParam,
    value: f64,
    seed: u64,
) -> Result<SystemConfig, EngineError> {
    let mut cfg = base.clone();
    match param {
        SweepParam::SeqLen => {
            let len = value as usize;
            cfg.workload.short_prefix_range = (len, len);
            cfg.workload.long_prefix_range = (len, len);
            cfg.workload.long_fraction = 1.0;
        }
        SweepParam::Items => cfg.workload.items_per_query = value as usize,
        SweepParam::Dim => cfg.model.dim = value as usize,
        SweepParam::Layers => cfg.model.layers = value as usize,
        SweepParam::RetrievalSlack => {
            let hi = value;
            let lo = value * 0.5;
            cfg.cost.anchors.retrieval_ms = (lo, hi);
            if let Some(explicit) = cfg.cost.explicit.as_mut() {
                explicit.retrieval_ms = (lo, hi);
            }
        }
        SweepParam::Concurrency => {
            cfg.workload.rank_concurrency_clamp = Some(value as u32);
        }
        SweepParam::OfferedQps => cfg.workload.offered_qps = value,
        SweepParam::DramHit => {
            cfg.workload.repeat_prob = repeat_prob_for_target(base, mode, seed, value / 100.0)?;
        }
    }
    Ok(cfg)
}

/// One run per value, shared seed.
pub fn sweep(
    base: &SystemConfig,
    mode: SimMode,
    param: SweepParam,
    values: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>, EngineError> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = apply_param(base, mode, param, value, seed)?;
        let out = run(&cfg, mode, seed)?;
        rows.push(SweepRow {
            value,
            report: out.report,
        });
    }
    Ok(rows)
}

/// Largest sequence length (on the step grid) whose run meets the pipeline
/// SLO at the required success rate. Zero when even `min_len` fails.
pub fn find_max_seq(
    base: &SystemConfig,
    mode: SimMode,
    seed: u64,
    min_len: usize,
    max_len: usize,
    step: usize,
) -> Result<usize, EngineError> {
    let feasible = |len: usize| -> Result<bool, EngineError> {
        let cfg = apply_param(base, mode, SweepParam::SeqLen, len as f64, seed)?;
        Ok(run(&cfg, mode, seed)?.report.slo_met)
    };
    let step = step.max(1);
    if !feasible(min_len)? {
        return Ok(0);
    }
    if feasible(max_len)? {
        return Ok(max_len);
    }
    // Invariant: lo feasible, hi infeasible.
    let mut lo = min_len / step;
    let mut hi = max_len.div_ceil(step);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if feasible(mid * step)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * step).max(min_len))
}

/// Largest offered rate (on the resolution grid) meeting the pipeline SLO.
pub fn slo_compliant_qps(
    base: &SystemConfig,
    mode: SimMode,
    seed: u64,
    lo_qps: f64,
    hi_qps: f64,
    resolution: f64,
) -> Result<f64, EngineError> {
    search_qps(base, mode, seed, lo_qps, hi_qps, resolution, |r| r.slo_met).map(|(q, _)| q)
}

/// Largest offered rate keeping the ranking-stage P99 within its budget,
/// plus the measured mean in-flight ranking concurrency at that rate.
pub fn max_qps_under_ranking_budget(
    base: &SystemConfig,
    mode: SimMode,
    seed: u64,
    lo_qps: f64,
    hi_qps: f64,
    resolution: f64,
) -> Result<(f64, f64), EngineError> {
    let budget = base.slo.ranking_stage_budget_ms;
    search_qps(base, mode, seed, lo_qps, hi_qps, resolution, move |r| {
        r.ranking_stage.p99_ms <= budget
    })
    .map(|(q, r)| (q, r.map(|rep| rep.mean_ranking_concurrency).unwrap_or(0.0)))
}

fn search_qps(
    base: &SystemConfig,
    mode: SimMode,
    seed: u64,
    lo_qps: f64,
    hi_qps: f64,
    resolution: f64,
    ok: impl Fn(&SimReport) -> bool,
) -> Result<(f64, Option<SimReport>), EngineError> {
    let step = resolution.max(1e-6);
    let probe = |q: f64| -> Result<(bool, SimReport), EngineError> {
        let cfg = apply_param(base, mode, SweepParam::OfferedQps, q, seed)?;
        let report = run(&cfg, mode, seed)?.report;
        Ok((ok(&report), report))
    };
    let (lo_ok, lo_report) = probe(lo_qps)?;
    if !lo_ok {
        return Ok((0.0, None));
    }
    let (hi_ok, hi_report) = probe(hi_qps)?;
    if hi_ok {
        return Ok((hi_qps, Some(hi_report)));
    }
    let mut lo = (lo_qps / step).round() as u64;
    let mut hi = (hi_qps / step).round() as u64;
    let mut best = lo_report;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let (mid_ok, mid_report) = probe(mid as f64 * step)?;
        if mid_ok {
            lo = mid;
            best = mid_report;
        } else {
            hi = mid;
        }
    }
    Ok((lo as f64 * step, Some(best)))
}

/// Find a refresh intensity whose measured DRAM hit rate approaches the
/// target. The hit rate is emergent, not a direct input, so this bisects
/// `repeat_prob` against short probe runs.
pub fn repeat_prob_for_target(
    base: &SystemConfig,
    mode: SimMode,
    seed: u64,
    target: f64,
) -> Result<f64, EngineError> {
    if target <= 0.0 {
        return Ok(0.0);
    }
    let mut probe_cfg = base.clone();
    probe_cfg.workload.horizon_s = probe_cfg.workload.horizon_s.min(12.0);
    let measure = |p: f64| -> Result<f64, EngineError> {
        let mut cfg = probe_cfg.clone();
        cfg.workload.repeat_prob = p;
        Ok(run(&cfg, mode, seed)?.report.cache.dram_hit_rate)
    };
    let (mut lo, mut hi) = (0.0f64, 0.98f64);
    let mut best = (hi, (measure(hi)? - target).abs());
    if measure(hi)? < target {
        // Even maximum refresh cannot reach the target; use the maximum.
        return Ok(hi);
    }
    for _ in 0..7 {
        let mid = 0.5 * (lo + hi);
        let rate = measure(mid)?;
        let err = (rate - target).abs();
        if err < best.1 {
            best = (mid, err);
        }
        if rate < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.0)
}
