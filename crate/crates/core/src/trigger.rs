//! Sequence-aware trigger: a metadata-only risk test plus admission control
//! that keeps live prefix caches inside the reserved HBM budget and the
//! admitted pre-inference rate inside sustainable compute throughput.
//!
//! The budgets: a special instance can hold at most
//! `l_max = floor(r1 * hbm / kv_p99)` simultaneously live caches; over a
//! lifecycle window `t_life`, admissions are capped by
//! `q_admit_max = min(l_max / t_life, q_m * m_slots)`, and system-wide
//! admitted long-sequence traffic by `q_max = q_m * m_slots * floor(r2 * n)`.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::request::Request;

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("invalid trigger config: {0}")]
    InvalidConfig(&'static str),
    #[error("release for user {0} which is not counted live")]
    UnknownRelease(String),
}

/// Lightweight per-user metadata the risk test inspects. Fetching this is
/// cheap; full behavior sequences are never transferred to the trigger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehaviorMetadata {
    pub user_key: String,
    pub prefix_len: usize,
    pub feature_dim: usize,
}

/// Planning inputs for the admission budgets.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    /// Prefix lengths strictly above this are at risk.
    pub length_threshold: usize,
    /// Feature dims strictly above this are at risk.
    pub dim_threshold: usize,
    /// P99 footprint of one prefix cache, bytes.
    pub kv_p99_bytes: u64,
    /// Device memory per special instance, bytes.
    pub hbm_bytes: u64,
    /// Fraction of HBM reserved for live caches, in [0, 1].
    pub r1: f64,
    /// Sustainable pre-infer throughput per model slot, queries/s.
    pub q_m: f64,
    /// Concurrent model slots per special instance.
    pub m_slots: u32,
    /// Total ranking instances in the pool.
    pub n_instances: u32,
    /// Fraction of instances designated special, in [0, 1].
    pub r2: f64,
    /// Lifecycle window from pre-infer issuance to ranking consumption, seconds.
    pub t_life_s: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            length_threshold: 4096,
            dim_threshold: 8192,
            kv_p99_bytes: 100_000_000,
            hbm_bytes: 32_000_000_000,
            r1: 0.5,
            q_m: 30.0,
            m_slots: 5,
            n_instances: 20,
            r2: 0.1,
            t_life_s: 0.5,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<(), TriggerError> {
        if !(0.0..=1.0).contains(&self.r1) {
            return Err(TriggerError::InvalidConfig("r1 must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.r2) {
            return Err(TriggerError::InvalidConfig("r2 must be in [0, 1]"));
        }
        if self.t_life_s <= 0.0 {
            return Err(TriggerError::InvalidConfig("t_life must be positive"));
        }
        if self.q_m < 0.0 {
            return Err(TriggerError::InvalidConfig("q_m must be nonnegative"));
        }
        Ok(())
    }

    pub fn t_life_us(&self) -> u64 {
        (self.t_life_s * 1e6).round() as u64
    }
}

/// Which budget determines `q_admit_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binding {
    Hbm,
    Compute,
}

/// The derived admission budget triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPlan {
    /// Max simultaneously live caches per special instance.
    pub l_max: u64,
    /// Max admitted pre-infer rate per special instance, queries/s.
    pub q_admit_max: f64,
    /// System-wide admitted long-sequence rate, queries/s.
    pub q_max: f64,
    /// Which of the two constraints binds `q_admit_max`.
    pub binding_constraint: Binding,
}

/// True iff the request is at risk of violating the ranking-stage tail
/// budget: prefix strictly longer than the length threshold, or feature dim
/// strictly wider than the dim threshold. Pure; performs no bookkeeping.
pub fn is_at_risk(meta: &BehaviorMetadata, cfg: &TriggerConfig) -> bool {
    meta.prefix_len > cfg.length_threshold || meta.feature_dim > cfg.dim_threshold
}

/// Derive the budget triple from the config.
pub fn compute_capacity_plan(cfg: &TriggerConfig) -> Result<CapacityPlan, TriggerError> {
    cfg.validate()?;
    if cfg.kv_p99_bytes == 0 {
        return Err(TriggerError::InvalidConfig("kv_p99_bytes must be positive"));
    }
    let l_max = (cfg.r1 * cfg.hbm_bytes as f64 / cfg.kv_p99_bytes as f64).floor() as u64;
    let hbm_rate = l_max as f64 / cfg.t_life_s;
    let compute_rate = cfg.q_m * cfg.m_slots as f64;
    let (q_admit_max, binding_constraint) = if hbm_rate < compute_rate {
        (hbm_rate, Binding::Hbm)
    } else {
        (compute_rate, Binding::Compute)
    };
    let q_max = compute_rate * (cfg.r2 * cfg.n_instances as f64).floor();
    Ok(CapacityPlan {
        l_max,
        q_admit_max,
        q_max,
        binding_constraint,
    })
}

/// Outcome of an admission attempt. Rejection is a value, not an error.
#[derive(Debug, Clone)]
pub enum Admission {
    Admitted(Request),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    HbmBudget,
    RateBudget,
}

/// Per-special-instance admission bookkeeping: the set of users with a live
/// cache, and a sliding window of admission timestamps of width `t_life`.
/// Mutations must be serialized per instance.
#[derive(Debug)]
pub struct AdmissionState {
    cfg: TriggerConfig,
    plan: CapacityPlan,
    live: HashMap<String, u64>,
    window: VecDeque<u64>,
    clock: u64,
}

impl AdmissionState {
    pub fn new(cfg: TriggerConfig) -> Result<Self, TriggerError> {
        let plan = compute_capacity_plan(&cfg)?;
        Ok(Self {
            cfg,
            plan,
            live: HashMap::new(),
            window: VecDeque::new(),
            clock: 0,
        })
    }

    pub fn plan(&self) -> &CapacityPlan {
        &self.plan
    }

    pub fn config(&self) -> &TriggerConfig {
        &self.cfg
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn is_live(&self, user_key: &str) -> bool {
        self.live.contains_key(user_key)
    }

    /// Admissions inside the trailing lifecycle window ending at `now_us`.
    pub fn admitted_in_window(&mut self, now_us: u64) -> usize {
        self.prune(now_us);
        self.window.len()
    }

    fn prune(&mut self, now_us: u64) {
        // Window covers (now - t_life, now]: an admission at t leaves at
        // exactly t + t_life.
        let t_life = self.cfg.t_life_us();
        while let Some(&front) = self.window.front() {
            if front + t_life <= now_us {
                self.window.pop_front();
            } else {
                break;
            }
        }
    }

    /// Check-then-update admission for an at-risk request. Callers must only
    /// invoke this for requests that passed [`is_at_risk`]. On success the
    /// cache slot and a rate slot are consumed atomically and the auxiliary
    /// pre-infer request is returned. Admitting a user that is already live
    /// consumes a rate slot but no additional cache slot.
    pub fn try_admit(&mut self, meta: &BehaviorMetadata, now_us: u64) -> Admission {
        self.clock = now_us;
        self.prune(now_us);
        let already_live = self.live.contains_key(&meta.user_key);
        if !already_live && self.live.len() as u64 + 1 > self.plan.l_max {
            return Admission::Rejected(RejectReason::HbmBudget);
        }
        let cap = self.plan.q_admit_max * self.cfg.t_life_s;
        if (self.window.len() + 1) as f64 > cap {
            return Admission::Rejected(RejectReason::RateBudget);
        }
        self.window.push_back(now_us);
        if !already_live {
            self.live.insert(meta.user_key.clone(), now_us);
        }
        Admission::Admitted(Request::pre_infer(meta.user_key.clone()))
    }

    /// Decrement the live count for a consumed or expired cache. Exactly one
    /// release per admitted cache; anything else is an accounting error.
    pub fn release(&mut self, user_key: &str) -> Result<(), TriggerError> {
        self.live
            .remove(user_key)
            .map(|_| ())
            .ok_or_else(|| TriggerError::UnknownRelease(user_key.to_string()))
    }
}

/// Trigger entry point: zero work and zero state change for requests that
/// are not at risk.
pub fn trigger_request(
    state: &mut AdmissionState,
    meta: &BehaviorMetadata,
    now_us: u64,
) -> Option<Admission> {
    if is_at_risk(meta, &state.cfg) {
        Some(state.try_admit(meta, now_us))
    } else {
        None
    }
}
