//! Post-hoc invariant auditor: an independent replay of the trace and
//! admission logs that re-derives occupancy, lifecycle, locality, and
//! admission-rate facts instead of trusting the engine's own accounting.
//!
//! Checks, per event: no rank-path cache access on an instance other than
//! the one holding the user's cache (no remote fetch); HBM occupancy within
//! the reserved budget and DRAM within its capacity; no live-unconsumed
//! cache evicted before its ranking or its lifecycle expiry; sliding-window
//! admission rate within the planned cap; and every generated trial
//! terminating in exactly one outcome.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::{SimMode, SystemConfig};
use crate::trace::{CacheEventKind, Tier, TraceEvent};
use crate::trigger::compute_capacity_plan;

use super::engine::{AdmissionLogEntry, AdmissionOutcome};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub remote_fetch_events: u64,
    pub hbm_occupancy_violations: u64,
    pub dram_occupancy_violations: u64,
    pub premature_evictions: u64,
    pub rate_violations: u64,
    pub live_count_violations: u64,
    pub conservation_violations: u64,
    pub passed: bool,
    /// First offending trace line, when any check failed.
    pub offending: Option<String>,
}

pub fn audit(
    cfg: &SystemConfig,
    mode: SimMode,
    trace: &[TraceEvent],
    admissions: &[AdmissionLogEntry],
    trials: usize,
    completed: usize,
) -> AuditReport {
    let mut report = AuditReport::default();
    let tier_cfg = cfg.tier_config(mode);
    let hbm_cap = tier_cfg.hbm_capacity_bytes as i128;
    let dram_cap = tier_cfg.dram_capacity_bytes as i128;
    let t_life = cfg.trigger.t_life_us();

    let offend = |report: &mut AuditReport, ev: &TraceEvent| {
        if report.offending.is_none() {
            report.offending = Some(ev.csv_row());
        }
    };

    // Admission timestamps per (instance, user), for expiry legality.
    let mut admit_times: HashMap<(u32, &str), Vec<u64>> = HashMap::new();
    for a in admissions {
        if a.outcome == AdmissionOutcome::Admitted {
            admit_times
                .entry((a.instance_id, a.user_key.as_str()))
                .or_default()
                .push(a.t_us);
        }
    }

    let mut hbm_occ: HashMap<u32, i128> = HashMap::new();
    let mut dram_occ: HashMap<u32, i128> = HashMap::new();
    let mut live: HashMap<(u32, &str), u64> = HashMap::new();
    let mut live_per_inst: HashMap<u32, u64> = HashMap::new();
    let mut home: HashMap<&str, u32> = HashMap::new();
    let plan = compute_capacity_plan(&cfg.trigger).ok();

    for ev in trace {
        let inst = ev.instance_id;
        let user = ev.user_key.as_str();
        match ev.kind {
            CacheEventKind::Insert => {
                *hbm_occ.entry(inst).or_insert(0) += ev.bytes as i128;
                live.insert((inst, user), ev.t_us);
                *live_per_inst.entry(inst).or_insert(0) += 1;
                home.insert(user, inst);
                if let Some(plan) = &plan {
                    if live_per_inst[&inst] > plan.l_max {
                        report.live_count_violations += 1;
                        offend(&mut report, ev);
                    }
                }
            }
            CacheEventKind::Consume => {
                if home.get(user) != Some(&inst) {
                    report.remote_fetch_events += 1;
                    offend(&mut report, ev);
                }
                if live.remove(&(inst, user)).is_some() {
                    if let Some(c) = live_per_inst.get_mut(&inst) {
                        *c = c.saturating_sub(1);
                    }
                }
            }
            CacheEventKind::Spill => {
                *hbm_occ.entry(inst).or_insert(0) -= ev.bytes as i128;
                *dram_occ.entry(inst).or_insert(0) += ev.bytes as i128;
            }
            CacheEventKind::ReloadStart => {
                if home.get(user) != Some(&inst) {
                    report.remote_fetch_events += 1;
                    offend(&mut report, ev);
                }
            }
            CacheEventKind::ReloadEnd => {
                if ev.tier == Some(Tier::Hbm) {
                    *dram_occ.entry(inst).or_insert(0) -= ev.bytes as i128;
                    *hbm_occ.entry(inst).or_insert(0) += ev.bytes as i128;
                    home.insert(user, inst);
                }
            }
            CacheEventKind::Evict => match ev.tier {
                Some(Tier::Hbm) => {
                    *hbm_occ.entry(inst).or_insert(0) -= ev.bytes as i128;
                    if live.remove(&(inst, user)).is_some() {
                        if let Some(c) = live_per_inst.get_mut(&inst) {
                            *c = c.saturating_sub(1);
                        }
                        let legal = admit_times
                            .get(&(inst, user))
                            .map(|ts| ts.iter().any(|&a| a + t_life <= ev.t_us))
                            .unwrap_or(false);
                        if !legal {
                            report.premature_evictions += 1;
                            offend(&mut report, ev);
                        }
                    }
                }
                Some(Tier::Dram) => {
                    *dram_occ.entry(inst).or_insert(0) -= ev.bytes as i128;
                }
                None => {}
            },
            CacheEventKind::MissFallback => {}
        }
        let h = hbm_occ.get(&inst).copied().unwrap_or(0);
        if h > hbm_cap || h < 0 {
            report.hbm_occupancy_violations += 1;
            offend(&mut report, ev);
        }
        let d = dram_occ.get(&inst).copied().unwrap_or(0);
        if d > dram_cap || d < 0 {
            report.dram_occupancy_violations += 1;
            offend(&mut report, ev);
        }
    }

    // Sliding-window admission rate per instance: any window of width
    // t_life holds at most q_admit_max * t_life admissions (+1 boundary
    // slack).
    if let Some(plan) = &plan {
        let cap = (plan.q_admit_max * cfg.trigger.t_life_s).floor() as usize + 1;
        let mut per_inst: HashMap<u32, Vec<u64>> = HashMap::new();
        for a in admissions {
            if a.outcome == AdmissionOutcome::Admitted {
                per_inst.entry(a.instance_id).or_default().push(a.t_us);
            }
        }
        for times in per_inst.values() {
            for (i, &start) in times.iter().enumerate() {
                let in_window = times[i..]
                    .iter()
                    .take_while(|&&t| t < start + t_life)
                    .count();
                if in_window > cap {
                    report.rate_violations += 1;
                }
            }
        }
    }

    if trials != completed {
        report.conservation_violations += 1;
    }

    report.passed = report.remote_fetch_events == 0
        && report.hbm_occupancy_violations == 0
        && report.dram_occupancy_violations == 0
        && report.premature_evictions == 0
        && report.rate_violations == 0
        && report.live_count_violations == 0
        && report.conservation_violations == 0;
    report
}
