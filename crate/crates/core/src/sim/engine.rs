//! The event loop: trials arrive, the trigger admits at-risk users and fires
//! auxiliary pre-infer signals, the ring routes coupled requests to one
//! special instance, instances execute slot work under the cost model, and
//! every cache movement lands in the trace log.
//!
//! Time is integer microseconds; ties break on event creation order, so a
//! run is a pure function of (config, mode, seed).

use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{FlightAction, PreInferProbe, ProbeOutcome};
use crate::config::{SimMode, SystemConfig};
use crate::cost::{ms_to_us, CostModel};
use crate::instance::{Instance, ScoringContext, ServePath, StartedWork, WorkItem, WorkKind};
use crate::model::{Backbone, PrefixCache, ScoreVector};
use crate::request::Request;
use crate::router::{stable_hash64, InstanceKind, InstancePool};
use crate::trace::TraceEvent;
use crate::trigger::{is_at_risk, Admission, BehaviorMetadata, RejectReason};
use crate::workload::{generate_trials, BehaviorStore, Trial};

use super::report::{self, SimReport};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Trigger(#[from] crate::trigger::TriggerError),
    #[error(transparent)]
    Router(#[from] crate::router::RouterError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Workload(#[from] crate::workload::WorkloadError),
}

/// How a rank was ultimately served, at probe granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankClass {
    /// Served from an HBM-resident cache (including waits on the user's own
    /// in-flight pre-inference).
    CachedHbm,
    /// Served after a DRAM -> HBM reload.
    CachedAfterReload,
    /// Keyed rank that missed both tiers: full inference on the special
    /// instance.
    Fallback,
    /// Unkeyed rank served by the normal service with full inference.
    NormalFull,
}

impl RankClass {
    pub fn path(&self) -> ServePath {
        match self {
            RankClass::CachedHbm => ServePath::RankCachedHbm,
            RankClass::CachedAfterReload => ServePath::RankCachedAfterReload,
            RankClass::Fallback | RankClass::NormalFull => ServePath::RankFallbackFull,
        }
    }
}

/// Per-trial outcome record.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub user_key: String,
    pub instance_id: u32,
    pub admitted: bool,
    pub class: RankClass,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub items: usize,
    pub t_arrive_us: u64,
    pub t_rank_arrive_us: u64,
    pub t_done_us: u64,
    pub queue_us: u64,
    pub load_us: u64,
    pub rank_us: u64,
    pub scores: Option<ScoreVector>,
}

impl TrialRecord {
    pub fn pipeline_us(&self) -> u64 {
        self.t_done_us - self.t_arrive_us
    }

    pub fn ranking_stage_us(&self) -> u64 {
        self.t_done_us - self.t_rank_arrive_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionOutcome {
    Admitted,
    RejectedHbm,
    RejectedRate,
}

#[derive(Debug, Clone)]
pub struct AdmissionLogEntry {
    pub t_us: u64,
    pub instance_id: u32,
    pub user_key: String,
    pub outcome: AdmissionOutcome,
}

/// Scripted primitive for scenario runs (bursts, out-of-order arrivals).
#[derive(Debug, Clone)]
pub enum ScriptEvent {
    PreInfer {
        at_us: u64,
        user: String,
        prefix_len: usize,
    },
    Rank {
        at_us: u64,
        user: String,
        prefix_len: usize,
        suffix_len: usize,
        items: Vec<u64>,
    },
    /// Force a consumed cache out of the window into DRAM.
    Spill { at_us: u64, user: String },
}

/// Everything a run produces.
#[derive(Debug)]
pub struct SimOutput {
    pub report: SimReport,
    pub records: Vec<TrialRecord>,
    pub trace: Vec<TraceEvent>,
    pub admissions: Vec<AdmissionLogEntry>,
    /// (queue_us, pre_us) per executed pre-inference.
    pub preinfer_latencies: Vec<(u64, u64)>,
}

#[derive(Debug)]
enum Event {
    TrialArrive { idx: usize },
    PreInferArrive { instance: u32, user: String, prefix_len: usize },
    RankReady { idx: usize },
    RankDispatch { idx: usize },
    WorkComplete { instance: u32, work_id: u64 },
    ReloadComplete { instance: u32, user: String },
    CacheExpire { instance: u32, user: String, ticket: u64 },
    ScriptSpill { instance: u32, user: String },
}

struct TimedEvent {
    t_us: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for TimedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.t_us == other.t_us && self.seq == other.seq
    }
}
impl Eq for TimedEvent {}
impl PartialOrd for TimedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest event.
        other
            .t_us
            .cmp(&self.t_us)
            .then(other.seq.cmp(&self.seq))
    }
}

enum CtxKind {
    PreInfer {
        user: String,
        prefix_len: usize,
        t_arrive: u64,
    },
    Rank {
        trial_idx: usize,
        class: RankClass,
        t_arrive: u64,
        t_ready: u64,
        scores: Option<ScoreVector>,
    },
}

struct WorkCtx {
    duration_us: u64,
    t_start: u64,
    kind: CtxKind,
}

struct PendingRank {
    class: RankClass,
    t_arrive: u64,
}

#[derive(Default)]
struct Counters {
    at_risk: u64,
    admitted: u64,
    rejected_hbm: u64,
    rejected_rate: u64,
    hbm_hits: u64,
    dram_hits: u64,
    misses: u64,
}

/// The simulation engine for one run.
pub struct Engine {
    cfg: SystemConfig,
    mode: SimMode,
    seed: u64,
    cost: CostModel,
    pool: InstancePool,
    instances: Vec<Instance>,
    trials: Vec<Trial>,
    scripted_items: HashMap<u64, Vec<u64>>,
    admitted: Vec<bool>,
    heap: BinaryHeap<TimedEvent>,
    seq: u64,
    now: u64,
    rng: ChaCha8Rng,
    works: HashMap<u64, WorkCtx>,
    next_work_id: u64,
    next_ticket: u64,
    pending_ranks: HashMap<u64, PendingRank>,
    records: Vec<TrialRecord>,
    trace: Vec<TraceEvent>,
    admissions: Vec<AdmissionLogEntry>,
    preinfer_latencies: Vec<(u64, u64)>,
    permits: Option<u32>,
    permit_queue: VecDeque<usize>,
    server_reloads: HashMap<u32, u32>,
    scoring: Option<ScoringContext>,
    counters: Counters,
    in_ranking: u32,
    peak_ranking: u32,
    conc_area_us: u128,
    last_conc_change: u64,
    scripted: bool,
}

/// Run the generated workload for a mode and seed.
pub fn run(cfg: &SystemConfig, mode: SimMode, seed: u64) -> Result<SimOutput, EngineError> {
    let mut engine = Engine::new(cfg.clone(), mode, seed)?;
    let mut workload = cfg.workload.clone();
    workload.rng_seed = seed;
    let trials = generate_trials(&workload)?;
    engine.load_trials(trials);
    engine.run_to_completion();
    Ok(engine.into_output())
}

/// Run a scripted scenario on a minimal pool (one special instance plus one
/// normal). Scripted ranks are keyed; admission bookkeeping is bypassed.
pub fn run_script(
    cfg: &SystemConfig,
    mode: SimMode,
    events: Vec<ScriptEvent>,
) -> Result<SimOutput, EngineError> {
    let mut engine = Engine::new_scripted(cfg.clone(), mode)?;
    engine.load_script(events);
    engine.run_to_completion();
    Ok(engine.into_output())
}

impl Engine {
    fn new(cfg: SystemConfig, mode: SimMode, seed: u64) -> Result<Self, EngineError> {
        cfg.validate()?;
        let cost = cfg.cost.build()?;
        let r2 = if mode == SimMode::Baseline {
            0.0
        } else {
            cfg.trigger.r2
        };
        let pool = InstancePool::build(
            cfg.trigger.n_instances,
            r2,
            cfg.router.instances_per_server,
            cfg.router.virtual_nodes,
            cfg.router.per_server_special_cap,
            cfg.router.keyless_policy,
        )?;
        Self::with_pool(cfg, mode, seed, cost, pool)
    }

    fn new_scripted(cfg: SystemConfig, mode: SimMode) -> Result<Self, EngineError> {
        let cost = cfg.cost.build()?;
        let mut pool = InstancePool::new(
            cfg.router.virtual_nodes,
            cfg.router.per_server_special_cap,
            cfg.router.keyless_policy,
        );
        pool.add_instance(crate::router::InstanceInfo {
            instance_id: 0,
            kind: InstanceKind::Special,
            server_id: 0,
        })?;
        pool.add_instance(crate::router::InstanceInfo {
            instance_id: 1,
            kind: InstanceKind::Normal,
            server_id: 1,
        })?;
        let mut engine = Self::with_pool(cfg, mode, 0, cost, pool)?;
        engine.scripted = true;
        Ok(engine)
    }

    fn with_pool(
        cfg: SystemConfig,
        mode: SimMode,
        seed: u64,
        cost: CostModel,
        pool: InstancePool,
    ) -> Result<Self, EngineError> {
        let tier_cfg = cfg.tier_config(mode);
        let mut instances = Vec::new();
        for info in pool.instances() {
            let inst = match info.kind {
                InstanceKind::Special => Instance::special(
                    info.instance_id,
                    info.server_id,
                    cfg.instance.m_slots,
                    cfg.model,
                    tier_cfg,
                    Some(crate::trigger::AdmissionState::new(cfg.trigger)?),
                    cfg.instance.rank_priority,
                ),
                InstanceKind::Normal => Instance::normal(
                    info.instance_id,
                    info.server_id,
                    cfg.instance.m_slots,
                    cfg.model,
                ),
            };
            instances.push(inst);
        }
        instances.sort_by_key(|i| i.id);
        debug_assert!(instances.iter().enumerate().all(|(i, inst)| inst.id as usize == i));
        let scoring = if cfg.instance.score_requests {
            Some(ScoringContext::new(
                Backbone::new(cfg.model)?,
                BehaviorStore::new(cfg.model, seed),
            ))
        } else {
            None
        };
        let permits = cfg.workload.rank_concurrency_clamp;
        let rng = ChaCha8Rng::seed_from_u64(stable_hash64(
            format!("stage-delays/{seed}").as_bytes(),
        ));
        Ok(Self {
            cfg,
            mode,
            seed,
            cost,
            pool,
            instances,
            trials: Vec::new(),
            scripted_items: HashMap::new(),
            admitted: Vec::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            rng,
            works: HashMap::new(),
            next_work_id: 0,
            next_ticket: 0,
            pending_ranks: HashMap::new(),
            records: Vec::new(),
            trace: Vec::new(),
            admissions: Vec::new(),
            preinfer_latencies: Vec::new(),
            permits,
            permit_queue: VecDeque::new(),
            server_reloads: HashMap::new(),
            scoring,
            counters: Counters::default(),
            in_ranking: 0,
            peak_ranking: 0,
            conc_area_us: 0,
            last_conc_change: 0,
            scripted: false,
        })
    }

    fn load_trials(&mut self, trials: Vec<Trial>) {
        self.admitted = vec![false; trials.len()];
        for (idx, t) in trials.iter().enumerate() {
            self.schedule(t.arrive_us, Event::TrialArrive { idx });
        }
        self.trials = trials;
    }

    fn load_script(&mut self, events: Vec<ScriptEvent>) {
        for ev in events {
            match ev {
                ScriptEvent::PreInfer {
                    at_us,
                    user,
                    prefix_len,
                } => {
                    let instance = self.pool.owner_of(&user).expect("script pool has a special");
                    self.schedule(
                        at_us,
                        Event::PreInferArrive {
                            instance,
                            user,
                            prefix_len,
                        },
                    );
                }
                ScriptEvent::Rank {
                    at_us,
                    user,
                    prefix_len,
                    suffix_len,
                    items,
                } => {
                    let idx = self.trials.len();
                    let trial_id = idx as u64;
                    self.scripted_items.insert(trial_id, items.clone());
                    self.trials.push(Trial {
                        trial_id,
                        user_key: user,
                        prefix_len,
                        suffix_len,
                        items: items.len(),
                        arrive_us: at_us,
                    });
                    self.admitted.push(true);
                    self.schedule(at_us, Event::RankDispatch { idx });
                }
                ScriptEvent::Spill { at_us, user } => {
                    let instance = self.pool.owner_of(&user).expect("script pool has a special");
                    self.schedule(at_us, Event::ScriptSpill { instance, user });
                }
            }
        }
    }

    fn schedule(&mut self, t_us: u64, event: Event) {
        self.heap.push(TimedEvent {
            t_us,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    fn run_to_completion(&mut self) {
        while let Some(te) = self.heap.pop() {
            debug_assert!(te.t_us >= self.now, "time moves forward");
            self.now = te.t_us;
            match te.event {
                Event::TrialArrive { idx } => self.on_trial_arrive(idx),
                Event::PreInferArrive {
                    instance,
                    user,
                    prefix_len,
                } => self.on_preinfer_arrive(instance, &user, prefix_len),
                Event::RankReady { idx } => self.on_rank_ready(idx),
                Event::RankDispatch { idx } => self.on_rank_dispatch(idx),
                Event::WorkComplete { instance, work_id } => {
                    self.on_work_complete(instance, work_id)
                }
                Event::ReloadComplete { instance, user } => {
                    self.on_reload_complete(instance, &user)
                }
                Event::CacheExpire {
                    instance,
                    user,
                    ticket,
                } => self.on_cache_expire(instance, &user, ticket),
                Event::ScriptSpill { instance, user } => {
                    let _ = self.instances[instance as usize]
                        .tiers
                        .as_mut()
                        .expect("script targets the special instance")
                        .spill(&user, self.now);
                }
            }
        }
    }

    fn on_trial_arrive(&mut self, idx: usize) {
        let trial = self.trials[idx].clone();
        if self.mode != SimMode::Baseline {
            let meta = BehaviorMetadata {
                user_key: trial.user_key.clone(),
                prefix_len: trial.prefix_len,
                feature_dim: self.cfg.model.dim,
            };
            if is_at_risk(&meta, &self.cfg.trigger) {
                self.counters.at_risk += 1;
                if let Some(target) = self.pool.owner_of(&trial.user_key) {
                    self.try_admit_at(target, &meta, idx);
                }
            }
        }
        let retr = self.cost.sample_retrieval_us(self.rng.random());
        let prep = self.cost.sample_preproc_us(self.rng.random());
        self.schedule(self.now + retr + prep, Event::RankReady { idx });
    }

    fn try_admit_at(&mut self, target: u32, meta: &BehaviorMetadata, idx: usize) {
        let now = self.now;
        let inst = &mut self.instances[target as usize];
        let admission = inst
            .admission
            .as_mut()
            .expect("ring members are special instances");
        // A user whose cache is already live needs no new pre-infer; the
        // rank just carries the key and rendezvouses with the live cache.
        if admission.is_live(&meta.user_key) && inst.tiers.as_ref().is_some_and(|t| t.window.contains(&meta.user_key)) {
            self.admitted[idx] = true;
            return;
        }
        match admission.try_admit(meta, now) {
            Admission::Admitted(_req) => {
                self.counters.admitted += 1;
                self.admitted[idx] = true;
                let ticket = self.next_ticket;
                self.next_ticket += 1;
                inst.register_ticket(&meta.user_key, ticket);
                self.admissions.push(AdmissionLogEntry {
                    t_us: now,
                    instance_id: target,
                    user_key: meta.user_key.clone(),
                    outcome: AdmissionOutcome::Admitted,
                });
                let dispatch = ms_to_us(self.cost.dispatch_ms);
                let prefix_len = self.trials[idx].prefix_len;
                self.schedule(
                    now + dispatch,
                    Event::PreInferArrive {
                        instance: target,
                        user: meta.user_key.clone(),
                        prefix_len,
                    },
                );
                self.schedule(
                    now + self.cfg.trigger.t_life_us(),
                    Event::CacheExpire {
                        instance: target,
                        user: meta.user_key.clone(),
                        ticket,
                    },
                );
            }
            Admission::Rejected(reason) => {
                let outcome = match reason {
                    RejectReason::HbmBudget => {
                        self.counters.rejected_hbm += 1;
                        AdmissionOutcome::RejectedHbm
                    }
                    RejectReason::RateBudget => {
                        self.counters.rejected_rate += 1;
                        AdmissionOutcome::RejectedRate
                    }
                };
                self.admissions.push(AdmissionLogEntry {
                    t_us: now,
                    instance_id: target,
                    user_key: meta.user_key.clone(),
                    outcome,
                });
            }
        }
    }

    fn on_preinfer_arrive(&mut self, instance: u32, user: &str, prefix_len: usize) {
        let now = self.now;
        let inst = &mut self.instances[instance as usize];
        let Some(tiers) = inst.tiers.as_mut() else {
            return;
        };
        let consumed_in_hbm = tiers
            .window
            .get(user)
            .is_some_and(|c| c.state == crate::model::CacheState::Consumed);
        match tiers.preinfer_probe(user, now) {
            PreInferProbe::NoOp => {
                // A cache that is already consumed will not go live again for
                // this admission; free the reservation immediately.
                if consumed_in_hbm {
                    inst.release_ticket(user, None);
                }
                self.preinfer_latencies.push((0, 0));
            }
            PreInferProbe::ReloadScheduled { bytes, started } => {
                self.preinfer_latencies.push((0, 0));
                if started {
                    self.begin_reload_transfer(instance, user.to_string(), bytes);
                }
            }
            PreInferProbe::NeedsCompute => {
                let duration = ms_to_us(self.cost.pre_ms(prefix_len));
                self.enqueue_work(
                    instance,
                    CtxKind::PreInfer {
                        user: user.to_string(),
                        prefix_len,
                        t_arrive: now,
                    },
                    WorkKind::PreInferCompute {
                        user_key: user.to_string(),
                    },
                    duration,
                );
            }
        }
    }

    fn on_rank_ready(&mut self, idx: usize) {
        match &mut self.permits {
            Some(available) if *available == 0 => {
                self.permit_queue.push_back(idx);
            }
            Some(available) => {
                *available -= 1;
                let now = self.now;
                self.schedule(now, Event::RankDispatch { idx });
            }
            None => {
                let now = self.now;
                self.schedule(now, Event::RankDispatch { idx });
            }
        }
    }

    fn on_rank_dispatch(&mut self, idx: usize) {
        let now = self.now;
        let trial = self.trials[idx].clone();
        let keyed = self.admitted[idx] && self.mode != SimMode::Baseline || self.scripted;
        self.set_in_ranking(self.in_ranking + 1);
        let (instance, _keyed_route) = if keyed {
            match self.pool.owner_of(&trial.user_key) {
                Some(id) => (id, true),
                None => (self.fallback_normal(idx), false),
            }
        } else {
            (self.fallback_normal(idx), false)
        };
        let inst_kind = self.instances[instance as usize].kind;
        if keyed && inst_kind == InstanceKind::Special {
            let probe = {
                let tiers = self.instances[instance as usize]
                    .tiers
                    .as_mut()
                    .expect("special instance has tiers");
                tiers.pseudo_preinfer(&trial.user_key, trial.trial_id, now)
            };
            match probe {
                ProbeOutcome::AlreadyInHbm => {
                    // A resident copy restored from DRAM counts as DRAM
                    // reuse even though the reload ran off the rank path;
                    // the credit goes to the first rank that reads it.
                    let via_reload = self.instances[instance as usize]
                        .tiers
                        .as_mut()
                        .expect("special instance has tiers")
                        .take_via_reload(&trial.user_key);
                    let class = if via_reload {
                        self.counters.dram_hits += 1;
                        RankClass::CachedAfterReload
                    } else {
                        self.counters.hbm_hits += 1;
                        RankClass::CachedHbm
                    };
                    self.enqueue_rank_exec(instance, idx, class, now, now);
                }
                ProbeOutcome::JoinedInFlight => {
                    let action = self.instances[instance as usize]
                        .tiers
                        .as_ref()
                        .and_then(|t| t.in_flight(&trial.user_key));
                    let class = match action {
                        Some(FlightAction::Reload) => {
                            self.counters.dram_hits += 1;
                            RankClass::CachedAfterReload
                        }
                        _ => {
                            self.counters.hbm_hits += 1;
                            RankClass::CachedHbm
                        }
                    };
                    self.pending_ranks
                        .insert(trial.trial_id, PendingRank { class, t_arrive: now });
                }
                ProbeOutcome::ReloadScheduled { bytes, started } => {
                    self.counters.dram_hits += 1;
                    self.pending_ranks.insert(
                        trial.trial_id,
                        PendingRank {
                            class: RankClass::CachedAfterReload,
                            t_arrive: now,
                        },
                    );
                    if started {
                        self.begin_reload_transfer(instance, trial.user_key.clone(), bytes);
                    }
                }
                ProbeOutcome::Miss => {
                    self.counters.misses += 1;
                    self.enqueue_rank_exec(instance, idx, RankClass::Fallback, now, now);
                }
            }
        } else {
            self.enqueue_rank_exec(instance, idx, RankClass::NormalFull, now, now);
        }
    }

    fn fallback_normal(&mut self, idx: usize) -> u32 {
        let trial = &self.trials[idx];
        let req = Request::rank_plain(trial.user_key.clone(), vec![0]);
        match self.pool.route(&req) {
            Ok(d) => d.instance_id,
            // No normal instances configured; spread over the whole pool.
            Err(_) => (trial.trial_id % self.instances.len() as u64) as u32,
        }
    }

    fn rank_duration_us(&self, trial: &Trial, class: RankClass) -> u64 {
        match class {
            RankClass::CachedHbm | RankClass::CachedAfterReload => {
                ms_to_us(self.cost.rank_ms(trial.suffix_len, trial.items))
            }
            RankClass::Fallback | RankClass::NormalFull => ms_to_us(self.cost.baseline_ms(
                trial.prefix_len,
                trial.suffix_len,
                trial.items,
            )),
        }
    }

    fn item_ids(&self, trial: &Trial) -> Vec<u64> {
        self.scripted_items
            .get(&trial.trial_id)
            .cloned()
            .unwrap_or_else(|| trial.item_ids())
    }

    fn compute_scores(&self, instance: u32, trial: &Trial, class: RankClass) -> Option<ScoreVector> {
        let scorer = self.scoring.as_ref()?;
        let items = self.item_ids(trial);
        let scores = match class {
            RankClass::CachedHbm | RankClass::CachedAfterReload => {
                let cache = self.instances[instance as usize]
                    .tiers
                    .as_ref()?
                    .window
                    .get(&trial.user_key)?;
                scorer
                    .rank_cached(cache, &trial.user_key, trial.trial_id, trial.suffix_len, &items)
                    .ok()?
            }
            RankClass::Fallback | RankClass::NormalFull => scorer
                .full(
                    &trial.user_key,
                    trial.prefix_len,
                    trial.trial_id,
                    trial.suffix_len,
                    &items,
                )
                .ok()?,
        };
        Some(scores)
    }

    fn enqueue_rank_exec(
        &mut self,
        instance: u32,
        idx: usize,
        class: RankClass,
        t_arrive: u64,
        t_ready: u64,
    ) {
        let trial = self.trials[idx].clone();
        let duration = self.rank_duration_us(&trial, class);
        let scores = self.compute_scores(instance, &trial, class);
        self.enqueue_work(
            instance,
            CtxKind::Rank {
                trial_idx: idx,
                class,
                t_arrive,
                t_ready,
                scores,
            },
            WorkKind::Rank {
                rank_id: trial.trial_id,
            },
            duration,
        );
    }

    fn enqueue_work(&mut self, instance: u32, kind: CtxKind, work: WorkKind, duration_us: u64) {
        let now = self.now;
        let work_id = self.next_work_id;
        self.next_work_id += 1;
        self.works.insert(
            work_id,
            WorkCtx {
                duration_us,
                t_start: 0,
                kind,
            },
        );
        let item = WorkItem {
            work_id,
            kind: work,
            duration_us,
            enqueued_us: now,
        };
        if let Some(started) = self.instances[instance as usize].push_work(item, now) {
            self.start_work(instance, started);
        }
    }

    fn start_work(&mut self, instance: u32, started: StartedWork) {
        let work_id = started.item.work_id;
        if let Some(ctx) = self.works.get_mut(&work_id) {
            ctx.t_start = started.start_us;
        }
        self.schedule(
            started.start_us + started.item.duration_us,
            Event::WorkComplete { instance, work_id },
        );
    }

    fn on_work_complete(&mut self, instance: u32, work_id: u64) {
        let now = self.now;
        let ctx = self.works.remove(&work_id).expect("work ctx exists");
        if let Some(next) = self.instances[instance as usize].finish_work(now) {
            self.start_work(instance, next);
        }
        match ctx.kind {
            CtxKind::PreInfer {
                user,
                prefix_len,
                t_arrive,
            } => {
                self.preinfer_latencies
                    .push((ctx.t_start - t_arrive, ctx.duration_us));
                let cache = match self.scoring.as_ref() {
                    Some(s) => match s.preinfer(&user, prefix_len) {
                        Ok(c) => c,
                        Err(_) => PrefixCache::sizing_only(&user, &self.cfg.model, prefix_len),
                    },
                    None => PrefixCache::sizing_only(&user, &self.cfg.model, prefix_len),
                };
                let out = self.instances[instance as usize]
                    .tiers
                    .as_mut()
                    .expect("pre-infer runs on special instances")
                    .complete_preinfer(cache, now);
                let installed = out.installed();
                if !installed {
                    // Nothing went live for this admission.
                    self.instances[instance as usize].release_ticket(&user, None);
                }
                for waiter in out.waiters {
                    self.wake_rank(instance, waiter, installed);
                }
            }
            CtxKind::Rank {
                trial_idx,
                class,
                t_arrive,
                t_ready,
                scores,
            } => {
                self.finish_rank(instance, trial_idx, class, t_arrive, t_ready, ctx.t_start, scores);
            }
        }
    }

    fn wake_rank(&mut self, instance: u32, trial_id: u64, installed: bool) {
        let Some(pending) = self.pending_ranks.remove(&trial_id) else {
            return;
        };
        let idx = trial_id as usize;
        let idx = if idx < self.trials.len() && self.trials[idx].trial_id == trial_id {
            idx
        } else {
            match self.trials.iter().position(|t| t.trial_id == trial_id) {
                Some(i) => i,
                None => return,
            }
        };
        let class = if installed {
            pending.class
        } else {
            // Reinsertion was rejected: the probe outcome this rank was
            // counted under never materialized.
            match pending.class {
                RankClass::CachedAfterReload => {
                    self.counters.dram_hits = self.counters.dram_hits.saturating_sub(1)
                }
                _ => self.counters.hbm_hits = self.counters.hbm_hits.saturating_sub(1),
            }
            self.counters.misses += 1;
            RankClass::Fallback
        };
        let now = self.now;
        self.enqueue_rank_exec(instance, idx, class, pending.t_arrive, now);
    }

    fn finish_rank(
        &mut self,
        instance: u32,
        trial_idx: usize,
        class: RankClass,
        t_arrive: u64,
        t_ready: u64,
        t_start: u64,
        scores: Option<ScoreVector>,
    ) {
        let now = self.now;
        let trial = &self.trials[trial_idx];
        if matches!(class, RankClass::CachedHbm | RankClass::CachedAfterReload) {
            let inst = &mut self.instances[instance as usize];
            let consumed_first = inst
                .tiers
                .as_mut()
                .and_then(|t| t.mark_consumed(&trial.user_key, now).ok())
                .unwrap_or(false);
            if consumed_first {
                inst.release_ticket(&trial.user_key, None);
            }
        }
        let wait = t_ready - t_arrive;
        let (queue_extra, load_us) = match class {
            RankClass::CachedAfterReload => (0, wait),
            _ => (wait, 0),
        };
        self.records.push(TrialRecord {
            trial_id: trial.trial_id,
            user_key: trial.user_key.clone(),
            instance_id: instance,
            admitted: self.admitted[trial_idx],
            class,
            prefix_len: trial.prefix_len,
            suffix_len: trial.suffix_len,
            items: trial.items,
            t_arrive_us: trial.arrive_us,
            t_rank_arrive_us: t_arrive,
            t_done_us: now,
            queue_us: (t_start - t_ready) + queue_extra,
            load_us,
            rank_us: now - t_start,
            scores,
        });
        self.set_in_ranking(self.in_ranking - 1);
        if let Some(available) = &mut self.permits {
            if let Some(next) = self.permit_queue.pop_front() {
                self.schedule(now, Event::RankDispatch { idx: next });
            } else {
                *available += 1;
            }
        }
    }

    fn begin_reload_transfer(&mut self, instance: u32, user: String, bytes: u64) {
        let server = self.instances[instance as usize].server_id;
        let sharing = {
            let c = self.server_reloads.entry(server).or_insert(0);
            *c += 1;
            *c
        };
        let latency = ms_to_us(self.cost.load_ms(bytes, sharing));
        self.schedule(self.now + latency, Event::ReloadComplete { instance, user });
    }

    fn on_reload_complete(&mut self, instance: u32, user: &str) {
        let now = self.now;
        let server = self.instances[instance as usize].server_id;
        if let Some(c) = self.server_reloads.get_mut(&server) {
            *c = c.saturating_sub(1);
        }
        let done = {
            let tiers = self.instances[instance as usize]
                .tiers
                .as_mut()
                .expect("reloads happen on special instances");
            tiers.complete_reload(user, now)
        };
        for waiter in done.waiters {
            self.wake_rank(instance, waiter, done.installed);
        }
        if let Some((next_user, bytes)) = done.next_started {
            self.instances[instance as usize]
                .tiers
                .as_mut()
                .expect("special instance")
                .note_queued_reload_start(&next_user, now, bytes);
            self.begin_reload_transfer(instance, next_user, bytes);
        }
    }

    fn on_cache_expire(&mut self, instance: u32, user: &str, ticket: u64) {
        let now = self.now;
        let inst = &mut self.instances[instance as usize];
        if !inst.ticket_is_live(user, ticket) {
            return;
        }
        inst.release_ticket(user, Some(ticket));
        if let Some(tiers) = inst.tiers.as_mut() {
            tiers.expire_live(user, now);
        }
    }

    fn set_in_ranking(&mut self, value: u32) {
        self.conc_area_us += self.in_ranking as u128 * (self.now - self.last_conc_change) as u128;
        self.last_conc_change = self.now;
        self.in_ranking = value;
        self.peak_ranking = self.peak_ranking.max(value);
    }

    fn into_output(mut self) -> SimOutput {
        // Flush concurrency accounting to the final clock.
        self.set_in_ranking(self.in_ranking);
        for inst in &mut self.instances {
            if let Some(tiers) = inst.tiers.as_mut() {
                self.trace.extend(tiers.drain_events());
            }
        }
        self.trace.sort_by_key(|e| e.t_us);
        let mean_conc = if self.now > 0 {
            self.conc_area_us as f64 / self.now as f64
        } else {
            0.0
        };
        let report = report::build(
            &self.cfg,
            self.mode,
            self.seed,
            &self.trials,
            &self.records,
            &self.preinfer_latencies,
            &self.trace,
            &self.admissions,
            report::EngineCounters {
                at_risk: self.counters.at_risk,
                admitted: self.counters.admitted,
                rejected_hbm: self.counters.rejected_hbm,
                rejected_rate: self.counters.rejected_rate,
                hbm_hits: self.counters.hbm_hits,
                dram_hits: self.counters.dram_hits,
                misses: self.counters.misses,
                mean_ranking_concurrency: mean_conc,
                peak_ranking_concurrency: self.peak_ranking,
            },
        );
        SimOutput {
            report,
            records: self.records,
            trace: self.trace,
            admissions: self.admissions,
            preinfer_latencies: self.preinfer_latencies,
        }
    }
}
