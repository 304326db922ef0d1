//! Ranking instances. A special instance hosts the tier pair and admission
//! state and serves a mix of pre-infer and rank requests across `m_slots`
//! concurrent model slots; normal instances run full inference only.
//!
//! Slot scheduling is FIFO across both request classes (a rank-priority
//! mode is available behind a flag). The discrete-event engine drives
//! [`Instance::push_work`] / [`Instance::finish_work`]; [`Instance::handle`]
//! serves one request to completion on an otherwise idle instance, which is
//! the unit-testable contract for the serving paths.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, PreInferProbe, ProbeOutcome, TieredCache, TierConfig};
use crate::cost::{ms_to_us, CostModel};
use crate::model::{Backbone, ModelError, PrefixCache, ScoreVector};
use crate::request::{Request, Stage};
use crate::router::InstanceKind;
use crate::trigger::{AdmissionState, TriggerError};
use crate::workload::BehaviorStore;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("protocol error: {0}")]
    Protocol(&'static str),
    #[error("operation requires a special instance")]
    NotSpecial,
    #[error("user has a cache-affecting action in flight; quiet-instance handle cannot join")]
    Busy,
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
}

/// How a request was served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServePath {
    PreinferDone,
    RankCachedHbm,
    RankCachedAfterReload,
    RankFallbackFull,
}

/// Component durations of one served request, microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub queue_us: u64,
    pub pre_us: u64,
    pub load_us: u64,
    pub rank_us: u64,
}

impl StageLatencies {
    pub fn total_us(&self) -> u64 {
        self.queue_us + self.pre_us + self.load_us + self.rank_us
    }
}

#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub user_key: String,
    pub path: ServePath,
    pub stage_latencies: StageLatencies,
    pub scores: Option<ScoreVector>,
}

/// Model-slot work classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkKind {
    PreInferCompute { user_key: String },
    Rank { rank_id: u64 },
}

#[derive(Debug, Clone)]
pub struct WorkItem {
    pub work_id: u64,
    pub kind: WorkKind,
    pub duration_us: u64,
    pub enqueued_us: u64,
}

/// A work item that just began executing on a slot.
#[derive(Debug, Clone)]
pub struct StartedWork {
    pub item: WorkItem,
    pub start_us: u64,
}

/// Scoring context for runs that compute real scores (toy model scale):
/// the backbone plus the deterministic behavior/item store.
pub struct ScoringContext {
    pub backbone: Backbone,
    pub store: BehaviorStore,
}

impl ScoringContext {
    pub fn new(backbone: Backbone, store: BehaviorStore) -> Self {
        Self { backbone, store }
    }

    pub fn preinfer(&self, user_key: &str, prefix_len: usize) -> Result<PrefixCache, ModelError> {
        let (ui, lt) = self.store.prefix_segments(user_key, prefix_len);
        self.backbone.prefix_preinfer(user_key, &ui, &lt)
    }

    pub fn rank_cached(
        &self,
        cache: &PrefixCache,
        user_key: &str,
        trial_id: u64,
        suffix_len: usize,
        item_ids: &[u64],
    ) -> Result<ScoreVector, ModelError> {
        let suffix = self.store.suffix(user_key, trial_id, suffix_len);
        let candidates = self.store.candidates(item_ids);
        self.backbone.rank_with_cache(cache, &suffix, &candidates)
    }

    pub fn full(
        &self,
        user_key: &str,
        prefix_len: usize,
        trial_id: u64,
        suffix_len: usize,
        item_ids: &[u64],
    ) -> Result<ScoreVector, ModelError> {
        let (ui, lt) = self.store.prefix_segments(user_key, prefix_len);
        let suffix = self.store.suffix(user_key, trial_id, suffix_len);
        let candidates = self.store.candidates(item_ids);
        let seq = crate::model::SegmentedSequence {
            user_info: ui,
            long_term: lt,
            short_term: suffix.short_term,
            cross_features: suffix.cross_features,
            candidates,
        };
        self.backbone.full_infer(&seq)
    }
}

/// Admission ticket bookkeeping: exactly one release per admitted cache,
/// whether the release comes from consumption or lifecycle expiry.
#[derive(Debug, Clone, Copy)]
struct Ticket {
    id: u64,
    released: bool,
}

/// One ranking instance's simulation state.
pub struct Instance {
    pub id: u32,
    pub kind: InstanceKind,
    pub server_id: u32,
    pub m_slots: u32,
    /// Model shape used for cache byte accounting.
    pub model: crate::model::ModelConfig,
    rank_priority: bool,
    busy_slots: u32,
    queue: VecDeque<WorkItem>,
    /// Tier pair; present on special instances only.
    pub tiers: Option<TieredCache>,
    /// Admission state; present on special instances only.
    pub admission: Option<AdmissionState>,
    tickets: HashMap<String, Ticket>,
    /// In-flight executing work count never exceeds `m_slots`.
    pub peak_busy: u32,
}

impl Instance {
    pub fn normal(id: u32, server_id: u32, m_slots: u32, model: crate::model::ModelConfig) -> Self {
        Self {
            id,
            kind: InstanceKind::Normal,
            server_id,
            m_slots,
            model,
            rank_priority: false,
            busy_slots: 0,
            queue: VecDeque::new(),
            tiers: None,
            admission: None,
            tickets: HashMap::new(),
            peak_busy: 0,
        }
    }

    pub fn special(
        id: u32,
        server_id: u32,
        m_slots: u32,
        model: crate::model::ModelConfig,
        tier_cfg: TierConfig,
        admission: Option<AdmissionState>,
        rank_priority: bool,
    ) -> Self {
        Self {
            id,
            kind: InstanceKind::Special,
            server_id,
            m_slots,
            model,
            rank_priority,
            busy_slots: 0,
            queue: VecDeque::new(),
            tiers: Some(TieredCache::new(id, tier_cfg)),
            admission,
            tickets: HashMap::new(),
            peak_busy: 0,
        }
    }

    pub fn busy_slots(&self) -> u32 {
        self.busy_slots
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Enqueue work; returns it started if a slot is free.
    pub fn push_work(&mut self, item: WorkItem, now_us: u64) -> Option<StartedWork> {
        if self.busy_slots < self.m_slots {
            self.busy_slots += 1;
            self.peak_busy = self.peak_busy.max(self.busy_slots);
            Some(StartedWork {
                item,
                start_us: now_us,
            })
        } else {
            self.queue.push_back(item);
            None
        }
    }

    /// Release a slot after a completion; returns the next item to start.
    pub fn finish_work(&mut self, now_us: u64) -> Option<StartedWork> {
        self.busy_slots = self.busy_slots.saturating_sub(1);
        let next = if self.rank_priority {
            let pos = self
                .queue
                .iter()
                .position(|w| matches!(w.kind, WorkKind::Rank { .. }))
                .unwrap_or(0);
            if self.queue.is_empty() {
                None
            } else {
                self.queue.remove(pos)
            }
        } else {
            self.queue.pop_front()
        };
        next.map(|item| {
            self.busy_slots += 1;
            self.peak_busy = self.peak_busy.max(self.busy_slots);
            StartedWork {
                item,
                start_us: now_us,
            }
        })
    }

    /// Record an admission ticket for a user so consumption or expiry can
    /// release it exactly once.
    pub fn register_ticket(&mut self, user_key: &str, ticket_id: u64) {
        self.tickets.insert(
            user_key.to_string(),
            Ticket {
                id: ticket_id,
                released: false,
            },
        );
    }

    /// Release the admission for `user_key` if a live ticket exists.
    /// Idempotent per ticket. `ticket_id` of None releases whatever ticket
    /// is current (used by consumption); Some(id) only matches that ticket
    /// (used by expiry events so a stale expiry cannot release a newer
    /// admission).
    pub fn release_ticket(&mut self, user_key: &str, ticket_id: Option<u64>) -> bool {
        let Some(ticket) = self.tickets.get_mut(user_key) else {
            return false;
        };
        if ticket.released {
            return false;
        }
        if let Some(id) = ticket_id {
            if ticket.id != id {
                return false;
            }
        }
        ticket.released = true;
        if let Some(admission) = self.admission.as_mut() {
            let _ = admission.release(user_key);
        }
        true
    }

    pub fn ticket_is_live(&self, user_key: &str, ticket_id: u64) -> bool {
        self.tickets
            .get(user_key)
            .is_some_and(|t| t.id == ticket_id && !t.released)
    }

    /// Serve one request to completion on an otherwise idle instance,
    /// charging latencies from the cost model. Reload and pre-infer waits
    /// resolve inline; queueing is zero by construction.
    pub fn handle(
        &mut self,
        req: &Request,
        trial_id: u64,
        prefix_len: usize,
        suffix_len: usize,
        cost: &CostModel,
        scorer: Option<&ScoringContext>,
        now_us: u64,
    ) -> Result<ServeOutcome, InstanceError> {
        if !req.is_well_formed() {
            return Err(InstanceError::Protocol("malformed request"));
        }
        match req.body.stage {
            Stage::PreInfer => self.handle_preinfer(req, prefix_len, cost, scorer, now_us),
            Stage::Rank => {
                if req.body.items.is_empty() {
                    return Err(InstanceError::Protocol("rank request with no items"));
                }
                self.handle_rank(req, trial_id, prefix_len, suffix_len, cost, scorer, now_us)
            }
        }
    }

    fn handle_preinfer(
        &mut self,
        req: &Request,
        prefix_len: usize,
        cost: &CostModel,
        scorer: Option<&ScoringContext>,
        now_us: u64,
    ) -> Result<ServeOutcome, InstanceError> {
        let user = req.body.user_id.clone();
        let tiers = self.tiers.as_mut().ok_or(InstanceError::NotSpecial)?;
        let mut lat = StageLatencies::default();
        match tiers.preinfer_probe(&user, now_us) {
            PreInferProbe::NoOp => {}
            PreInferProbe::ReloadScheduled { bytes, .. } => {
                lat.load_us = ms_to_us(cost.load_ms(bytes, 1));
                tiers.complete_reload(&user, now_us + lat.load_us);
            }
            PreInferProbe::NeedsCompute => {
                lat.pre_us = ms_to_us(cost.pre_ms(prefix_len));
                let cache = match scorer {
                    Some(s) => s.preinfer(&user, prefix_len)?,
                    None => PrefixCache::sizing_only(&user, &self.model, prefix_len),
                };
                let out = tiers.complete_preinfer(cache, now_us + lat.pre_us);
                if let Some(e) = out.rejection {
                    return Err(e.into());
                }
            }
        }
        Ok(ServeOutcome {
            user_key: user,
            path: ServePath::PreinferDone,
            stage_latencies: lat,
            scores: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn handle_rank(
        &mut self,
        req: &Request,
        trial_id: u64,
        prefix_len: usize,
        suffix_len: usize,
        cost: &CostModel,
        scorer: Option<&ScoringContext>,
        now_us: u64,
    ) -> Result<ServeOutcome, InstanceError> {
        let user = req.body.user_id.clone();
        let items = req.body.items.len();
        let mut lat = StageLatencies::default();
        let path = if self.kind == InstanceKind::Special && req.is_keyed() {
            let tiers = self.tiers.as_mut().expect("special instances carry tiers");
            match tiers.pseudo_preinfer(&user, trial_id, now_us) {
                ProbeOutcome::AlreadyInHbm => ServePath::RankCachedHbm,
                ProbeOutcome::ReloadScheduled { bytes, .. } => {
                    lat.load_us = ms_to_us(cost.load_ms(bytes, 1));
                    let done = tiers.complete_reload(&user, now_us + lat.load_us);
                    if done.installed {
                        ServePath::RankCachedAfterReload
                    } else {
                        ServePath::RankFallbackFull
                    }
                }
                ProbeOutcome::JoinedInFlight => return Err(InstanceError::Busy),
                ProbeOutcome::Miss => ServePath::RankFallbackFull,
            }
        } else {
            ServePath::RankFallbackFull
        };
        let scores = match path {
            ServePath::RankCachedHbm | ServePath::RankCachedAfterReload => {
                lat.rank_us = ms_to_us(cost.rank_ms(suffix_len, items));
                let tiers = self.tiers.as_mut().expect("cached path implies tiers");
                let scores = match scorer {
                    Some(s) => {
                        let cache = tiers
                            .window
                            .get(&user)
                            .ok_or(CacheError::UnknownKey(user.clone()))?;
                        Some(s.rank_cached(cache, &user, trial_id, suffix_len, &req.body.items)?)
                    }
                    None => None,
                };
                let t_done = now_us + lat.total_us();
                if tiers.mark_consumed(&user, t_done)? {
                    self.release_ticket(&user, None);
                }
                scores
            }
            ServePath::RankFallbackFull => {
                lat.rank_us = ms_to_us(cost.baseline_ms(prefix_len, suffix_len, items));
                match scorer {
                    Some(s) => {
                        Some(s.full(&user, prefix_len, trial_id, suffix_len, &req.body.items)?)
                    }
                    None => None,
                }
            }
            ServePath::PreinferDone => unreachable!("rank paths only"),
        };
        Ok(ServeOutcome {
            user_key: user,
            path,
            stage_latencies: lat,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::TierConfig;
    use crate::model::ModelConfig;

    const MIB: u64 = 1024 * 1024;

    fn toy_model() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 16,
            elem_bytes: 8,
            seed: 42,
        }
    }

    fn tier_cfg() -> TierConfig {
        TierConfig {
            hbm_capacity_bytes: 64 * MIB,
            dram_capacity_bytes: 256 * MIB,
            spill_on_evict: true,
            dram_ttl_us: 60_000_000,
            t_life_us: 500_000,
            max_concurrent_reloads: 2,
        }
    }

    fn scoring() -> ScoringContext {
        let model = toy_model();
        ScoringContext::new(
            Backbone::new(model).unwrap(),
            BehaviorStore::new(model, 7),
        )
    }

    fn special() -> Instance {
        Instance::special(0, 0, 2, toy_model(), tier_cfg(), None, false)
    }

    #[test]
    fn preinfer_then_rank_hits_hbm_and_matches_oracle() {
        let mut inst = special();
        let cost = CostModel::default();
        let scorer = scoring();
        let user = "u1";
        let (prefix, suffix) = (40usize, 8usize);
        let pre = inst
            .handle(&Request::pre_infer(user), 0, prefix, 0, &cost, Some(&scorer), 0)
            .unwrap();
        assert_eq!(pre.path, ServePath::PreinferDone);
        assert!(pre.stage_latencies.pre_us > 0);

        let items: Vec<u64> = (0..5).collect();
        let rank = inst
            .handle(
                &Request::rank_keyed(user, items.clone()),
                1,
                prefix,
                suffix,
                &cost,
                Some(&scorer),
                100,
            )
            .unwrap();
        assert_eq!(rank.path, ServePath::RankCachedHbm);
        let oracle = scorer.full(user, prefix, 1, suffix, &items).unwrap();
        let got = rank.scores.unwrap();
        assert!(got.max_abs_diff(&oracle) <= toy_model().epsilon());
    }

    #[test]
    fn rank_without_cache_falls_back_with_correct_scores() {
        let mut inst = special();
        let cost = CostModel::default();
        let scorer = scoring();
        let items: Vec<u64> = (0..4).collect();
        let out = inst
            .handle(
                &Request::rank_keyed("stranger", items.clone()),
                9,
                30,
                4,
                &cost,
                Some(&scorer),
                0,
            )
            .unwrap();
        assert_eq!(out.path, ServePath::RankFallbackFull);
        let oracle = scorer.full("stranger", 30, 9, 4, &items).unwrap();
        assert!(out.scores.unwrap().max_abs_diff(&oracle) <= toy_model().epsilon());
    }

    #[test]
    fn rank_after_spill_reloads_and_matches_oracle() {
        let mut inst = special();
        let cost = CostModel::default();
        let scorer = scoring();
        let user = "u2";
        inst.handle(&Request::pre_infer(user), 0, 40, 0, &cost, Some(&scorer), 0)
            .unwrap();
        inst.handle(
            &Request::rank_keyed(user, vec![1, 2]),
            1,
            40,
            0,
            &cost,
            Some(&scorer),
            10,
        )
        .unwrap();
        inst.tiers.as_mut().unwrap().spill(user, 20).unwrap();
        let out = inst
            .handle(
                &Request::rank_keyed(user, vec![3, 4]),
                2,
                40,
                6,
                &cost,
                Some(&scorer),
                30,
            )
            .unwrap();
        assert_eq!(out.path, ServePath::RankCachedAfterReload);
        assert!(out.stage_latencies.load_us > 0);
        let oracle = scorer.full(user, 40, 2, 6, &[3, 4]).unwrap();
        assert!(out.scores.unwrap().max_abs_diff(&oracle) <= toy_model().epsilon());
    }

    #[test]
    fn preinfer_carries_no_items_and_rank_requires_them() {
        let mut inst = special();
        let cost = CostModel::default();
        let pre = Request::pre_infer("u");
        assert!(pre.body.items.is_empty());
        assert!(inst.handle(&pre, 0, 30, 0, &cost, None, 0).is_ok());
        let bad = Request::rank_keyed("u", vec![]);
        assert!(matches!(
            inst.handle(&bad, 1, 30, 0, &cost, None, 1),
            Err(InstanceError::Protocol(_))
        ));
    }

    #[test]
    fn duplicate_preinfer_is_noop() {
        let mut inst = special();
        let cost = CostModel::default();
        let a = inst
            .handle(&Request::pre_infer("u"), 0, 64, 0, &cost, None, 0)
            .unwrap();
        assert!(a.stage_latencies.pre_us > 0);
        let b = inst
            .handle(&Request::pre_infer("u"), 0, 64, 0, &cost, None, 50)
            .unwrap();
        assert_eq!(b.stage_latencies.pre_us, 0, "second pre-infer is a no-op");
    }

    #[test]
    fn slots_respect_capacity_and_fifo() {
        let mut inst = Instance::normal(0, 0, 1, toy_model());
        let w = |id: u64, t: u64| WorkItem {
            work_id: id,
            kind: WorkKind::Rank { rank_id: id },
            duration_us: 1000,
            enqueued_us: t,
        };
        // M=1: two simultaneous arrivals serialize.
        let first = inst.push_work(w(1, 0), 0);
        assert!(first.is_some());
        let second = inst.push_work(w(2, 0), 0);
        assert!(second.is_none());
        assert_eq!(inst.busy_slots(), 1);
        let next = inst.finish_work(1000).unwrap();
        assert_eq!(next.item.work_id, 2);
        assert_eq!(next.start_us, 1000);
        assert!(inst.finish_work(2000).is_none());
        assert_eq!(inst.busy_slots(), 0);
    }

    #[test]
    fn five_slots_absorb_five_arrivals() {
        let mut inst = Instance::normal(0, 0, 5, toy_model());
        for id in 0..5 {
            let started = inst.push_work(
                WorkItem {
                    work_id: id,
                    kind: WorkKind::Rank { rank_id: id },
                    duration_us: 500,
                    enqueued_us: 0,
                },
                0,
            );
            assert!(started.is_some(), "slot {id} should start immediately");
        }
        assert_eq!(inst.busy_slots(), 5);
        assert_eq!(inst.peak_busy, 5);
    }

    #[test]
    fn rank_priority_skips_preinfer_queue() {
        let mut inst = Instance::special(0, 0, 1, toy_model(), tier_cfg(), None, true);
        inst.push_work(
            WorkItem {
                work_id: 0,
                kind: WorkKind::Rank { rank_id: 0 },
                duration_us: 100,
                enqueued_us: 0,
            },
            0,
        );
        inst.push_work(
            WorkItem {
                work_id: 1,
                kind: WorkKind::PreInferCompute {
                    user_key: "u".into(),
                },
                duration_us: 100,
                enqueued_us: 0,
            },
            0,
        );
        inst.push_work(
            WorkItem {
                work_id: 2,
                kind: WorkKind::Rank { rank_id: 2 },
                duration_us: 100,
                enqueued_us: 0,
            },
            0,
        );
        let next = inst.finish_work(100).unwrap();
        assert_eq!(next.item.work_id, 2, "rank jumps the pre-infer");
    }

    #[test]
    fn tickets_release_exactly_once() {
        let mut inst = special();
        inst.register_ticket("u", 1);
        assert!(inst.ticket_is_live("u", 1));
        assert!(inst.release_ticket("u", None));
        assert!(!inst.release_ticket("u", None), "second release is a no-op");
        assert!(!inst.ticket_is_live("u", 1));
        // A stale expiry (old ticket id) cannot release a newer admission.
        inst.register_ticket("u", 2);
        assert!(!inst.release_ticket("u", Some(1)));
        assert!(inst.release_ticket("u", Some(2)));
    }
}
