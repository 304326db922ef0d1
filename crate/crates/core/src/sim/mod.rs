//! Deterministic discrete-event simulator composing the trigger, router,
//! cache tiers, and instances under the calibrated cost model.

mod audit;
mod engine;
mod report;
mod search;

pub use audit::{audit, AuditReport};
pub use engine::{
    run, run_script, AdmissionLogEntry, AdmissionOutcome, Engine, RankClass, ScriptEvent,
    SimOutput, TrialRecord,
};
pub use report::{AdmissionStats, CacheStats, PathCounts, SimReport};
pub use search::{
    find_max_seq, max_qps_under_ranking_budget, repeat_prob_for_target, slo_compliant_qps, sweep,
    SweepParam, SweepRow,
};
