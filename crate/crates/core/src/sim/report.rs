//! Run report assembly: per-stage histograms, SLO verdicts, cache and
//! admission statistics, and the invariant audit.

use serde::{Deserialize, Serialize};

use crate::config::{SimMode, SystemConfig};
use crate::metrics::{Histogram, StageSummary};
use crate::trace::{CacheEventKind, TraceEvent};
use crate::workload::Trial;

use super::audit::{self, AuditReport};
use super::engine::{AdmissionLogEntry, RankClass, TrialRecord};

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub hbm_hits: u64,
    pub dram_hits: u64,
    pub misses: u64,
    pub reloads: u64,
    pub spills: u64,
    pub evictions: u64,
    pub inserts: u64,
    /// DRAM hits over all probed (keyed, special-instance) ranks.
    pub dram_hit_rate: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AdmissionStats {
    pub at_risk: u64,
    pub admitted: u64,
    pub rejected_hbm: u64,
    pub rejected_rate: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PathCounts {
    pub cached_hbm: u64,
    pub cached_after_reload: u64,
    pub fallback_full: u64,
    pub normal_full: u64,
    pub preinfer_done: u64,
}

/// Everything a run measured, plus the audit verdicts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: SimMode,
    pub seed: u64,
    pub offered_qps: f64,
    pub horizon_s: f64,
    pub trials: u64,
    pub completed: u64,
    pub achieved_qps: f64,
    pub success_rate: f64,
    pub slo_met: bool,
    pub pipeline: StageSummary,
    pub ranking_stage: StageSummary,
    pub queue: StageSummary,
    pub pre: StageSummary,
    pub load: StageSummary,
    pub rank: StageSummary,
    pub paths: PathCounts,
    pub cache: CacheStats,
    pub admission: AdmissionStats,
    pub mean_ranking_concurrency: f64,
    pub peak_ranking_concurrency: u32,
    pub audit: AuditReport,
}

pub(crate) struct EngineCounters {
    pub at_risk: u64,
    pub admitted: u64,
    pub rejected_hbm: u64,
    pub rejected_rate: u64,
    pub hbm_hits: u64,
    pub dram_hits: u64,
    pub misses: u64,
    pub mean_ranking_concurrency: f64,
    pub peak_ranking_concurrency: u32,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build(
    cfg: &SystemConfig,
    mode: SimMode,
    seed: u64,
    trials: &[Trial],
    records: &[TrialRecord],
    preinfer_latencies: &[(u64, u64)],
    trace: &[TraceEvent],
    admissions: &[AdmissionLogEntry],
    counters: EngineCounters,
) -> SimReport {
    let mut pipeline = Histogram::new();
    let mut ranking_stage = Histogram::new();
    let mut queue = Histogram::new();
    let mut load = Histogram::new();
    let mut rank = Histogram::new();
    let mut pre = Histogram::new();
    let mut paths = PathCounts::default();
    let budget_us = cfg.slo.pipeline_budget_us();
    let mut within_budget = 0u64;
    for r in records {
        pipeline.record(r.pipeline_us());
        ranking_stage.record(r.ranking_stage_us());
        queue.record(r.queue_us);
        load.record(r.load_us);
        rank.record(r.rank_us);
        if r.pipeline_us() <= budget_us {
            within_budget += 1;
        }
        match r.class {
            RankClass::CachedHbm => paths.cached_hbm += 1,
            RankClass::CachedAfterReload => paths.cached_after_reload += 1,
            RankClass::Fallback => paths.fallback_full += 1,
            RankClass::NormalFull => paths.normal_full += 1,
        }
    }
    for &(_, pre_us) in preinfer_latencies {
        if pre_us > 0 {
            pre.record(pre_us);
        }
    }
    paths.preinfer_done = preinfer_latencies.len() as u64;

    let mut cache = CacheStats {
        hbm_hits: counters.hbm_hits,
        dram_hits: counters.dram_hits,
        misses: counters.misses,
        ..Default::default()
    };
    for ev in trace {
        match ev.kind {
            CacheEventKind::ReloadStart => cache.reloads += 1,
            CacheEventKind::Spill => cache.spills += 1,
            CacheEventKind::Evict => cache.evictions += 1,
            CacheEventKind::Insert => cache.inserts += 1,
            _ => {}
        }
    }
    let probed = cache.hbm_hits + cache.dram_hits + cache.misses;
    cache.dram_hit_rate = if probed > 0 {
        cache.dram_hits as f64 / probed as f64
    } else {
        0.0
    };

    let success_rate = if records.is_empty() {
        1.0
    } else {
        within_budget as f64 / records.len() as f64
    };
    let pipeline_summary = pipeline.summary();
    let slo_met = success_rate >= cfg.slo.required_success_rate
        && pipeline_summary.p99_ms <= cfg.slo.pipeline_p99_budget_ms;

    let horizon_s = cfg.workload.horizon_s;
    let achieved_qps = if horizon_s > 0.0 {
        records.len() as f64 / horizon_s
    } else {
        0.0
    };

    let audit = audit::audit(cfg, mode, trace, admissions, trials.len(), records.len());

    SimReport {
        mode,
        seed,
        offered_qps: cfg.workload.offered_qps,
        horizon_s,
        trials: trials.len() as u64,
        completed: records.len() as u64,
        achieved_qps,
        success_rate,
        slo_met,
        pipeline: pipeline_summary,
        ranking_stage: ranking_stage.summary(),
        queue: queue.summary(),
        pre: pre.summary(),
        load: load.summary(),
        rank: rank.summary(),
        paths,
        cache,
        admission: AdmissionStats {
            at_risk: counters.at_risk,
            admitted: counters.admitted,
            rejected_hbm: counters.rejected_hbm,
            rejected_rate: counters.rejected_rate,
        },
        mean_ranking_concurrency: counters.mean_ranking_concurrency,
        peak_ranking_concurrency: counters.peak_ranking_concurrency,
        audit,
    }
}

impl SimReport {
    /// Render the human-readable summary block.
    pub fn text_summary(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write;
        let _ = writeln!(s, "mode: {}  seed: {}", self.mode.as_str(), self.seed);
        let _ = writeln!(
            s,
            "trials: {}  completed: {}  offered_qps: {:.1}  achieved_qps: {:.1}",
            self.trials, self.completed, self.offered_qps, self.achieved_qps
        );
        let _ = writeln!(
            s,
            "success_rate: {:.4}  slo_met: {}  pipeline_p99: {:.2} ms",
            self.success_rate, self.slo_met, self.pipeline.p99_ms
        );
        let _ = writeln!(
            s,
            "ranking_stage_p99: {:.2} ms  queue_p99: {:.2} ms  pre_p99: {:.2} ms  load_p99: {:.2} ms  rank_p99: {:.2} ms",
            self.ranking_stage.p99_ms,
            self.queue.p99_ms,
            self.pre.p99_ms,
            self.load.p99_ms,
            self.rank.p99_ms
        );
        let _ = writeln!(
            s,
            "paths: hbm={} reload={} fallback={} normal={} preinfer={}",
            self.paths.cached_hbm,
            self.paths.cached_after_reload,
            self.paths.fallback_full,
            self.paths.normal_full,
            self.paths.preinfer_done
        );
        let _ = writeln!(
            s,
            "cache: hbm_hits={} dram_hits={} misses={} reloads={} spills={} evictions={} dram_hit_rate={:.3}",
            self.cache.hbm_hits,
            self.cache.dram_hits,
            self.cache.misses,
            self.cache.reloads,
            self.cache.spills,
            self.cache.evictions,
            self.cache.dram_hit_rate
        );
        let _ = writeln!(
            s,
            "admission: at_risk={} admitted={} rejected_hbm={} rejected_rate={}",
            self.admission.at_risk,
            self.admission.admitted,
            self.admission.rejected_hbm,
            self.admission.rejected_rate
        );
        let _ = writeln!(
            s,
            "concurrency: mean={:.2} peak={}",
            self.mean_ranking_concurrency, self.peak_ranking_concurrency
        );
        let _ = writeln!(
            s,
            "audit: passed={} remote_fetch={} occupancy={} premature_evictions={} rate={} conservation={}",
            self.audit.passed,
            self.audit.remote_fetch_events,
            self.audit.hbm_occupancy_violations + self.audit.dram_occupancy_violations,
            self.audit.premature_evictions,
            self.audit.rate_violations,
            self.audit.conservation_violations
        );
        s
    }
}
