//! Two-tier lifecycle cache: an HBM sliding window bounded by the reserved
//! fraction of device memory, and a server-local DRAM spill store for
//! short-term cross-request reuse. Per-user single-flight serialization and
//! an idempotent pseudo pre-inference probe guarantee at most one
//! DRAM-to-HBM reload per user per burst, even under out-of-order arrivals.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CacheState, PrefixCache};
use crate::trace::{CacheEventKind, Tier, TraceEvent};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache of {bytes} B exceeds tier capacity {capacity} B")]
    Oversize { bytes: u64, capacity: u64 },
    #[error("window full: only unexpired live entries remain")]
    WindowFull,
    #[error("lifecycle violation: cannot {action} entry in state {from:?}")]
    LifecycleViolation {
        from: CacheState,
        action: &'static str,
    },
    #[error("no cache entry for user {0}")]
    UnknownKey(String),
}

/// Result of a two-level lookup. Pure inspection: a DRAM hit does not move
/// data by itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupResult {
    HbmHit,
    DramHit,
    Miss,
}

/// HBM sliding-window tier. Entries are inserted by pre-inference, consumed
/// by ranking, and evicted as new admitted users arrive: consumed entries go
/// first (FIFO by consumption time), then live entries past their lifecycle
/// window. Unexpired live entries are never evicted; if only those remain
/// the insertion is rejected, which admission control should have prevented.
#[derive(Debug)]
pub struct HbmWindow {
    capacity_bytes: u64,
    entries: HashMap<String, PrefixCache>,
    occupancy_bytes: u64,
    insertion_order: VecDeque<String>,
    consumption_order: VecDeque<String>,
}

impl HbmWindow {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            entries: HashMap::new(),
            occupancy_bytes: 0,
            insertion_order: VecDeque::new(),
            consumption_order: VecDeque::new(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn occupancy_bytes(&self) -> u64 {
        self.occupancy_bytes
    }

    pub fn contains(&self, user_key: &str) -> bool {
        self.entries.contains_key(user_key)
    }

    pub fn get(&self, user_key: &str) -> Option<&PrefixCache> {
        self.entries.get(user_key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert an entry, evicting victims as needed. Returns the evicted
    /// entries in eviction order so the caller can spill or drop them.
    /// An existing entry for the same user is replaced and returned first.
    pub fn insert(
        &mut self,
        cache: PrefixCache,
        now_us: u64,
        t_life_us: u64,
    ) -> Result<Vec<PrefixCache>, CacheError> {
        if cache.byte_size > self.capacity_bytes {
            return Err(CacheError::Oversize {
                bytes: cache.byte_size,
                capacity: self.capacity_bytes,
            });
        }
        let mut victims = Vec::new();
        if self.entries.contains_key(&cache.user_key) {
            victims.push(self.remove(&cache.user_key).expect("checked above"));
        }
        // Pick victims without mutating, then apply, so a rejection leaves
        // the window untouched.
        let mut planned: Vec<String> = Vec::new();
        {
            let mut freed: u64 = victims.iter().map(|v| v.byte_size).sum();
            let mut consumed_iter = self.consumption_order.iter();
            let mut insertion_iter = self.insertion_order.iter();
            while self.occupancy_bytes + cache.byte_size > self.capacity_bytes + freed {
                let mut picked = None;
                for key in consumed_iter.by_ref() {
                    if planned.iter().any(|p| p == key) {
                        continue;
                    }
                    if let Some(e) = self.entries.get(key) {
                        if e.state == CacheState::Consumed {
                            picked = Some(key.clone());
                            break;
                        }
                    }
                }
                if picked.is_none() {
                    for key in insertion_iter.by_ref() {
                        if planned.iter().any(|p| p == key) {
                            continue;
                        }
                        if let Some(e) = self.entries.get(key) {
                            if e.state == CacheState::LiveUnconsumed
                                && e.created_at + t_life_us <= now_us
                            {
                                picked = Some(key.clone());
                                break;
                            }
                        }
                    }
                }
                match picked {
                    Some(key) => {
                        freed += self.entries[&key].byte_size;
                        planned.push(key);
                    }
                    None => return Err(CacheError::WindowFull),
                }
            }
        }
        for key in planned {
            victims.push(self.remove(&key).expect("planned victims exist"));
        }
        self.occupancy_bytes += cache.byte_size;
        self.insertion_order.push_back(cache.user_key.clone());
        if cache.state == CacheState::Consumed {
            self.consumption_order.push_back(cache.user_key.clone());
        }
        self.entries.insert(cache.user_key.clone(), cache);
        Ok(victims)
    }

    /// Mark an entry consumed. Returns true on the first consumption;
    /// repeat calls are idempotent no-ops returning false.
    pub fn mark_consumed(&mut self, user_key: &str) -> Result<bool, CacheError> {
        let entry = self
            .entries
            .get_mut(user_key)
            .ok_or_else(|| CacheError::UnknownKey(user_key.to_string()))?;
        match entry.state {
            CacheState::Consumed => Ok(false),
            CacheState::LiveUnconsumed | CacheState::Reloading => {
                entry.state = CacheState::Consumed;
                self.consumption_order.push_back(user_key.to_string());
                Ok(true)
            }
            other => Err(CacheError::LifecycleViolation {
                from: other,
                action: "consume",
            }),
        }
    }

    pub fn remove(&mut self, user_key: &str) -> Option<PrefixCache> {
        let entry = self.entries.remove(user_key)?;
        self.occupancy_bytes -= entry.byte_size;
        self.insertion_order.retain(|k| k != user_key);
        self.consumption_order.retain(|k| k != user_key);
        Some(entry)
    }
}

/// Server-local DRAM spill store with LRU eviction and a staleness TTL.
#[derive(Debug)]
pub struct DramStore {
    capacity_bytes: u64,
    entries: HashMap<String, DramEntry>,
    occupancy_bytes: u64,
    lru: VecDeque<String>,
}

#[derive(Debug)]
struct DramEntry {
    cache: PrefixCache,
    stored_at: u64,
}

impl DramStore {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            entries: HashMap::new(),
            occupancy_bytes: 0,
            lru: VecDeque::new(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn occupancy_bytes(&self) -> u64 {
        self.occupancy_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_fresh(&self, user_key: &str, now_us: u64, ttl_us: u64) -> bool {
        self.entries
            .get(user_key)
            .is_some_and(|e| e.stored_at + ttl_us > now_us)
    }

    /// Store a spilled cache, LRU-evicting colder entries as needed.
    /// Returns the victims. Entries mid-reload are never victims.
    pub fn insert(
        &mut self,
        cache: PrefixCache,
        now_us: u64,
    ) -> Result<Vec<PrefixCache>, CacheError> {
        if cache.byte_size > self.capacity_bytes {
            return Err(CacheError::Oversize {
                bytes: cache.byte_size,
                capacity: self.capacity_bytes,
            });
        }
        let mut victims = Vec::new();
        if self.entries.contains_key(&cache.user_key) {
            victims.push(self.remove(&cache.user_key).expect("checked above"));
        }
        while self.occupancy_bytes + cache.byte_size > self.capacity_bytes {
            let victim_key = self
                .lru
                .iter()
                .find(|k| {
                    self.entries
                        .get(*k)
                        .is_some_and(|e| e.cache.state != CacheState::Reloading)
                })
                .cloned();
            match victim_key {
                Some(key) => victims.push(self.remove(&key).expect("lru entries exist")),
                None => return Err(CacheError::WindowFull),
            }
        }
        self.occupancy_bytes += cache.byte_size;
        self.lru.push_back(cache.user_key.clone());
        self.entries.insert(
            cache.user_key.clone(),
            DramEntry {
                cache,
                stored_at: now_us,
            },
        );
        Ok(victims)
    }

    pub fn touch(&mut self, user_key: &str) {
        if self.entries.contains_key(user_key) {
            self.lru.retain(|k| k != user_key);
            self.lru.push_back(user_key.to_string());
        }
    }

    pub fn set_state(&mut self, user_key: &str, state: CacheState) {
        if let Some(e) = self.entries.get_mut(user_key) {
            e.cache.state = state;
        }
    }

    pub fn remove(&mut self, user_key: &str) -> Option<PrefixCache> {
        let entry = self.entries.remove(user_key)?;
        self.occupancy_bytes -= entry.cache.byte_size;
        self.lru.retain(|k| k != user_key);
        Some(entry.cache)
    }

    /// Drop entries older than the TTL. Returns the expired caches.
    pub fn evict_stale(&mut self, now_us: u64, ttl_us: u64) -> Vec<PrefixCache> {
        let stale: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, e)| e.stored_at + ttl_us <= now_us && e.cache.state != CacheState::Reloading)
            .map(|(k, _)| k.clone())
            .collect();
        let mut out: Vec<PrefixCache> = Vec::new();
        for key in stale {
            if let Some(c) = self.remove(&key) {
                out.push(c);
            }
        }
        out.sort_by(|a, b| a.user_key.cmp(&b.user_key));
        out
    }
}

/// What a cache-affecting action in flight is doing for a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlightAction {
    PreInferCompute,
    Reload,
}

/// Per-user serialization state: at most one cache-affecting action in
/// flight; later requests for the same user join its completion.
#[derive(Debug, Default)]
pub struct UserFlightState {
    pub in_flight: Option<FlightAction>,
    pub waiters: Vec<u64>,
}

/// Bounded-concurrency reload scheduler. Reloads beyond the bound queue in
/// FIFO order and start as running reloads finish.
#[derive(Debug)]
pub struct ReloadGovernor {
    max_concurrent_reloads: u32,
    current_reloads: u32,
    pending: VecDeque<String>,
}

impl ReloadGovernor {
    pub fn new(max_concurrent_reloads: u32) -> Self {
        Self {
            max_concurrent_reloads,
            current_reloads: 0,
            pending: VecDeque::new(),
        }
    }

    pub fn current_reloads(&self) -> u32 {
        self.current_reloads
    }

    fn try_start(&mut self, user_key: &str) -> bool {
        if self.current_reloads < self.max_concurrent_reloads {
            self.current_reloads += 1;
            true
        } else {
            self.pending.push_back(user_key.to_string());
            false
        }
    }

    fn finish(&mut self) -> Option<String> {
        self.current_reloads = self.current_reloads.saturating_sub(1);
        let next = self.pending.pop_front();
        if next.is_some() {
            self.current_reloads += 1;
        }
        next
    }
}

/// Tier pair configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TierConfig {
    pub hbm_capacity_bytes: u64,
    pub dram_capacity_bytes: u64,
    /// Spill consumed entries to DRAM when they fall out of the window.
    pub spill_on_evict: bool,
    /// Staleness bound for DRAM entries, microseconds.
    pub dram_ttl_us: u64,
    /// Lifecycle window; live entries older than this become evictable.
    pub t_life_us: u64,
    pub max_concurrent_reloads: u32,
}

/// Outcome of the pseudo pre-inference probe placed in front of each rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeOutcome {
    /// Cache resident in HBM; rank proceeds immediately.
    AlreadyInHbm,
    /// A pre-infer or reload for this user is in flight; the rank was added
    /// to its waiters and proceeds when it completes.
    JoinedInFlight,
    /// Cache found in DRAM; a reload was committed. `started` is false when
    /// the governor queued it behind other reloads.
    ReloadScheduled { bytes: u64, started: bool },
    /// Absent in both tiers; caller falls back to full inference.
    Miss,
}

/// Outcome of the cache check a real pre-infer request performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreInferProbe {
    /// Cache already resident or being produced; the pre-infer is a no-op.
    NoOp,
    /// Cache in DRAM; reloading is cheaper than recomputing.
    ReloadScheduled { bytes: u64, started: bool },
    /// Nothing cached: the prefix must be computed.
    NeedsCompute,
}

/// Result of installing a freshly computed cache.
#[derive(Debug)]
pub struct InstallOutcome {
    /// Why installation was rejected, when it was.
    pub rejection: Option<CacheError>,
    /// Ranks that joined the pre-infer while it was computing.
    pub waiters: Vec<u64>,
}

impl InstallOutcome {
    pub fn installed(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Completion report for a finished reload.
#[derive(Debug)]
pub struct ReloadDone {
    /// Ranks waiting on this cache; they observe an HBM hit.
    pub waiters: Vec<u64>,
    /// False when reinsertion was rejected (window full of unexpired live
    /// entries); waiters must fall back to full inference.
    pub installed: bool,
    /// Next queued reload released by the governor, with its byte size.
    pub next_started: Option<(String, u64)>,
}

/// The two-tier cache with single-flight bookkeeping for one instance.
#[derive(Debug)]
pub struct TieredCache {
    instance_id: u32,
    pub window: HbmWindow,
    pub dram: DramStore,
    flights: HashMap<String, UserFlightState>,
    pub governor: ReloadGovernor,
    cfg: TierConfig,
    events: Vec<TraceEvent>,
}

impl TieredCache {
    pub fn new(instance_id: u32, cfg: TierConfig) -> Self {
        Self {
            instance_id,
            window: HbmWindow::new(cfg.hbm_capacity_bytes),
            dram: DramStore::new(cfg.dram_capacity_bytes),
            flights: HashMap::new(),
            governor: ReloadGovernor::new(cfg.max_concurrent_reloads),
            cfg,
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &TierConfig {
        &self.cfg
    }

    pub fn drain_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, t_us: u64, user: &str, kind: CacheEventKind, tier: Option<Tier>, bytes: u64) {
        self.events.push(TraceEvent {
            t_us,
            instance_id: self.instance_id,
            user_key: user.to_string(),
            kind,
            tier,
            bytes,
        });
    }

    pub fn in_flight(&self, user_key: &str) -> Option<FlightAction> {
        self.flights.get(user_key).and_then(|f| f.in_flight)
    }

    /// Two-level lookup, HBM first. Pure inspection.
    pub fn lookup(&self, user_key: &str, now_us: u64) -> LookupResult {
        if self.window.contains(user_key) {
            LookupResult::HbmHit
        } else if self
            .dram
            .contains_fresh(user_key, now_us, self.cfg.dram_ttl_us)
        {
            LookupResult::DramHit
        } else {
            LookupResult::Miss
        }
    }

    /// Install a freshly pre-inferred cache (state live-unconsumed), evicting
    /// and spilling victims as configured. Wakes any ranks that joined the
    /// pre-infer while it was computing; when installation is rejected
    /// (window full of unexpired live entries) the waiters must fall back.
    pub fn complete_preinfer(&mut self, mut cache: PrefixCache, now_us: u64) -> InstallOutcome {
        cache.created_at = now_us;
        cache.state = CacheState::LiveUnconsumed;
        cache.via_reload = false;
        let user = cache.user_key.clone();
        let bytes = cache.byte_size;
        let result = self.install(cache, now_us);
        let waiters = self.clear_flight(&user);
        let rejection = match result {
            Ok(()) => {
                self.log(now_us, &user, CacheEventKind::Insert, Some(Tier::Hbm), bytes);
                None
            }
            Err(e) => Some(e),
        };
        InstallOutcome { rejection, waiters }
    }

    fn install(&mut self, cache: PrefixCache, now_us: u64) -> Result<(), CacheError> {
        let user = cache.user_key.clone();
        let victims = self
            .window
            .insert(cache, now_us, self.cfg.t_life_us)?;
        for mut victim in victims {
            // A replaced entry for the same user is dropped, never spilled:
            // the fresh HBM copy is the only authoritative one.
            if victim.user_key != user
                && self.cfg.spill_on_evict
                && victim.state == CacheState::Consumed
                && victim.byte_size <= self.dram.capacity_bytes()
            {
                victim.state = CacheState::Spilled;
                let key = victim.user_key.clone();
                let bytes = victim.byte_size;
                let dram_victims = self.dram.insert(victim, now_us)?;
                for dv in dram_victims {
                    self.log(
                        now_us,
                        &dv.user_key.clone(),
                        CacheEventKind::Evict,
                        Some(Tier::Dram),
                        dv.byte_size,
                    );
                }
                self.log(now_us, &key, CacheEventKind::Spill, Some(Tier::Dram), bytes);
            } else {
                self.log(
                    now_us,
                    &victim.user_key.clone(),
                    CacheEventKind::Evict,
                    Some(Tier::Hbm),
                    victim.byte_size,
                );
            }
        }
        Ok(())
    }

    fn clear_flight(&mut self, user_key: &str) -> Vec<u64> {
        match self.flights.remove(user_key) {
            Some(f) => f.waiters,
            None => Vec::new(),
        }
    }

    /// The idempotent probe inserted in front of every rank on a special
    /// instance.
    pub fn pseudo_preinfer(&mut self, user_key: &str, rank_id: u64, now_us: u64) -> ProbeOutcome {
        if let Some(flight) = self.flights.get_mut(user_key) {
            if flight.in_flight.is_some() {
                flight.waiters.push(rank_id);
                return ProbeOutcome::JoinedInFlight;
            }
        }
        match self.lookup(user_key, now_us) {
            LookupResult::HbmHit => ProbeOutcome::AlreadyInHbm,
            LookupResult::DramHit => {
                let bytes = self.begin_reload(user_key, now_us);
                let flight = self.flights.entry(user_key.to_string()).or_default();
                flight.in_flight = Some(FlightAction::Reload);
                flight.waiters.push(rank_id);
                let started = self.governor_started(user_key, now_us, bytes);
                ProbeOutcome::ReloadScheduled { bytes, started }
            }
            LookupResult::Miss => {
                self.log(now_us, user_key, CacheEventKind::MissFallback, None, 0);
                ProbeOutcome::Miss
            }
        }
    }

    /// Cache check performed by a real pre-infer request.
    pub fn preinfer_probe(&mut self, user_key: &str, now_us: u64) -> PreInferProbe {
        if self.in_flight(user_key).is_some() {
            return PreInferProbe::NoOp;
        }
        match self.lookup(user_key, now_us) {
            LookupResult::HbmHit => PreInferProbe::NoOp,
            LookupResult::DramHit => {
                let bytes = self.begin_reload(user_key, now_us);
                let flight = self.flights.entry(user_key.to_string()).or_default();
                flight.in_flight = Some(FlightAction::Reload);
                let started = self.governor_started(user_key, now_us, bytes);
                PreInferProbe::ReloadScheduled { bytes, started }
            }
            LookupResult::Miss => {
                let flight = self.flights.entry(user_key.to_string()).or_default();
                flight.in_flight = Some(FlightAction::PreInferCompute);
                PreInferProbe::NeedsCompute
            }
        }
    }

    fn begin_reload(&mut self, user_key: &str, _now_us: u64) -> u64 {
        self.dram.touch(user_key);
        self.dram.set_state(user_key, CacheState::Reloading);
        self.dram
            .entries
            .get(user_key)
            .map(|e| e.cache.byte_size)
            .unwrap_or(0)
    }

    fn governor_started(&mut self, user_key: &str, now_us: u64, bytes: u64) -> bool {
        let started = self.governor.try_start(user_key);
        if started {
            self.log(
                now_us,
                user_key,
                CacheEventKind::ReloadStart,
                Some(Tier::Dram),
                bytes,
            );
        }
        started
    }

    /// Log the start of a reload the governor had queued.
    pub fn note_queued_reload_start(&mut self, user_key: &str, now_us: u64, bytes: u64) {
        self.log(
            now_us,
            user_key,
            CacheEventKind::ReloadStart,
            Some(Tier::Dram),
            bytes,
        );
    }

    /// Byte size of the user's DRAM entry, if present.
    pub fn dram_bytes(&self, user_key: &str) -> Option<u64> {
        self.dram.entries.get(user_key).map(|e| e.cache.byte_size)
    }

    /// Finish a reload: move the entry DRAM -> HBM, wake waiters, release the
    /// governor slot and hand back the next queued reload if any.
    pub fn complete_reload(&mut self, user_key: &str, now_us: u64) -> ReloadDone {
        let waiters = self.clear_flight(user_key);
        let next = self.governor.finish();
        let next_started = next.and_then(|u| self.dram_bytes(&u).map(|b| (u, b)));
        let cache = self.dram.remove(user_key);
        let installed = match cache {
            Some(mut cache) => {
                let bytes = cache.byte_size;
                cache.state = CacheState::Consumed;
                cache.via_reload = true;
                match self.install(cache, now_us) {
                    Ok(()) => {
                        self.log(
                            now_us,
                            user_key,
                            CacheEventKind::ReloadEnd,
                            Some(Tier::Hbm),
                            bytes,
                        );
                        true
                    }
                    Err(_) => {
                        self.log(now_us, user_key, CacheEventKind::Evict, Some(Tier::Dram), bytes);
                        false
                    }
                }
            }
            None => false,
        };
        ReloadDone {
            waiters,
            installed,
            next_started,
        }
    }

    /// Whether the user's resident copy arrived via a DRAM reload, clearing
    /// the marker: reload credit goes to the first rank that reads it.
    pub fn take_via_reload(&mut self, user_key: &str) -> bool {
        match self.window.entries.get_mut(user_key) {
            Some(c) if c.via_reload => {
                c.via_reload = false;
                true
            }
            _ => false,
        }
    }

    /// Mark the user's window entry consumed. True on first consumption.
    pub fn mark_consumed(&mut self, user_key: &str, now_us: u64) -> Result<bool, CacheError> {
        let first = self.window.mark_consumed(user_key)?;
        if first {
            let bytes = self.window.get(user_key).map(|c| c.byte_size).unwrap_or(0);
            self.log(now_us, user_key, CacheEventKind::Consume, Some(Tier::Hbm), bytes);
        }
        Ok(first)
    }

    /// Spill a consumed entry to DRAM.
    pub fn spill(&mut self, user_key: &str, now_us: u64) -> Result<(), CacheError> {
        let state = self
            .window
            .get(user_key)
            .map(|c| c.state)
            .ok_or_else(|| CacheError::UnknownKey(user_key.to_string()))?;
        if state != CacheState::Consumed {
            return Err(CacheError::LifecycleViolation {
                from: state,
                action: "spill",
            });
        }
        let mut cache = self.window.remove(user_key).expect("checked above");
        cache.state = CacheState::Spilled;
        let bytes = cache.byte_size;
        if bytes > self.dram.capacity_bytes() {
            self.log(now_us, user_key, CacheEventKind::Evict, Some(Tier::Hbm), bytes);
            return Ok(());
        }
        // Victims leave before the new entry lands; the trace preserves
        // that order so occupancy replay never sees a transient overshoot.
        let victims = self.dram.insert(cache, now_us)?;
        for v in victims {
            self.log(
                now_us,
                &v.user_key.clone(),
                CacheEventKind::Evict,
                Some(Tier::Dram),
                v.byte_size,
            );
        }
        self.log(now_us, user_key, CacheEventKind::Spill, Some(Tier::Dram), bytes);
        Ok(())
    }

    /// Evict a live entry whose lifecycle window lapsed without a rank.
    /// Returns true if an entry was evicted.
    pub fn expire_live(&mut self, user_key: &str, now_us: u64) -> bool {
        let is_live = self
            .window
            .get(user_key)
            .is_some_and(|c| c.state == CacheState::LiveUnconsumed);
        if !is_live {
            return false;
        }
        let cache = self.window.remove(user_key).expect("checked above");
        self.log(
            now_us,
            user_key,
            CacheEventKind::Evict,
            Some(Tier::Hbm),
            cache.byte_size,
        );
        true
    }

    /// Drop DRAM entries past the staleness TTL.
    pub fn evict_stale_dram(&mut self, now_us: u64) {
        for v in self.dram.evict_stale(now_us, self.cfg.dram_ttl_us) {
            self.log(
                now_us,
                &v.user_key.clone(),
                CacheEventKind::Evict,
                Some(Tier::Dram),
                v.byte_size,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::trace::CacheEventKind as Ev;

    const MIB: u64 = 1024 * 1024;

    fn cfg() -> TierConfig {
        TierConfig {
            hbm_capacity_bytes: 128 * MIB,
            dram_capacity_bytes: 512 * MIB,
            spill_on_evict: true,
            dram_ttl_us: 60_000_000,
            t_life_us: 500_000,
            max_concurrent_reloads: 2,
        }
    }

    fn model() -> ModelConfig {
        ModelConfig {
            layers: 8,
            dim: 256,
            elem_bytes: 4,
            seed: 0,
        }
    }

    fn cache_of(user: &str, prefix_len: usize) -> PrefixCache {
        PrefixCache::sizing_only(user, &model(), prefix_len)
    }

    fn count(events: &[TraceEvent], kind: Ev) -> usize {
        events.iter().filter(|e| e.kind == kind).count()
    }

    #[test]
    fn insert_into_empty_window() {
        let mut tier = TieredCache::new(0, cfg());
        // 2048 tokens at 8x256x4 B: 32 MiB.
        let out = tier.complete_preinfer(cache_of("u1", 2048), 10);
        assert!(out.installed());
        assert!(out.waiters.is_empty());
        assert_eq!(tier.window.occupancy_bytes(), 32 * MIB);
        assert_eq!(tier.lookup("u1", 10), LookupResult::HbmHit);
    }

    #[test]
    fn oversize_cache_rejected() {
        let mut tier = TieredCache::new(0, cfg());
        // 16384 tokens = 256 MiB > 128 MiB capacity.
        let out = tier.complete_preinfer(cache_of("u1", 16_384), 0);
        assert!(matches!(out.rejection, Some(CacheError::Oversize { .. })));
    }

    #[test]
    fn consumed_entries_evict_fifo_and_spill() {
        let mut tier = TieredCache::new(0, cfg());
        // Four 32 MiB entries fill the window.
        for (i, t) in [(1, 10), (2, 20), (3, 30), (4, 40)] {
            assert!(tier
                .complete_preinfer(cache_of(&format!("u{i}"), 2048), t)
                .installed());
        }
        // Consume u2 first, then u1.
        tier.mark_consumed("u2", 50).unwrap();
        tier.mark_consumed("u1", 60).unwrap();
        // Next insert evicts the oldest-consumed entry (u2), spilled to DRAM.
        assert!(tier.complete_preinfer(cache_of("u5", 2048), 70).installed());
        assert!(!tier.window.contains("u2"));
        assert_eq!(tier.lookup("u2", 70), LookupResult::DramHit);
        assert_eq!(tier.lookup("u1", 70), LookupResult::HbmHit);
        let events = tier.drain_events();
        assert_eq!(count(&events, Ev::Spill), 1);
        assert_eq!(tier.window.occupancy_bytes(), 128 * MIB);
    }

    #[test]
    fn window_of_unexpired_live_entries_rejects() {
        let mut tier = TieredCache::new(0, cfg());
        for i in 1..=4 {
            assert!(tier
                .complete_preinfer(cache_of(&format!("u{i}"), 2048), 100)
                .installed());
        }
        // All four live and unexpired at t=200; nothing evictable.
        let out = tier.complete_preinfer(cache_of("u5", 2048), 200);
        assert!(matches!(out.rejection, Some(CacheError::WindowFull)));
        // Past the lifecycle window the live entries become evictable.
        let t = 100 + cfg().t_life_us + 1;
        assert!(tier.complete_preinfer(cache_of("u5", 2048), t).installed());
        assert!(tier.window.contains("u5"));
    }

    #[test]
    fn lookup_tiers() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        tier.mark_consumed("u1", 5).unwrap();
        assert_eq!(tier.lookup("u1", 5), LookupResult::HbmHit);
        tier.spill("u1", 10).unwrap();
        assert_eq!(tier.lookup("u1", 10), LookupResult::DramHit);
        assert_eq!(tier.lookup("nobody", 10), LookupResult::Miss);
    }

    #[test]
    fn spill_requires_consumed_state() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        assert!(matches!(
            tier.spill("u1", 5),
            Err(CacheError::LifecycleViolation { .. })
        ));
    }

    #[test]
    fn spill_conserves_bytes_across_tiers() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        tier.mark_consumed("u1", 5).unwrap();
        let hbm_before = tier.window.occupancy_bytes();
        let dram_before = tier.dram.occupancy_bytes();
        tier.spill("u1", 10).unwrap();
        assert_eq!(tier.window.occupancy_bytes(), hbm_before - 32 * MIB);
        assert_eq!(tier.dram.occupancy_bytes(), dram_before + 32 * MIB);
    }

    #[test]
    fn dram_lru_evicts_coldest() {
        let mut small = cfg();
        small.dram_capacity_bytes = 64 * MIB; // room for two 32 MiB entries
        let mut tier = TieredCache::new(0, small);
        for (i, t) in [(1, 0), (2, 10), (3, 20)] {
            let user = format!("u{i}");
            assert!(tier.complete_preinfer(cache_of(&user, 2048), t).installed());
            tier.mark_consumed(&user, t + 1).unwrap();
            tier.spill(&user, t + 2).unwrap();
        }
        // u1 was coldest and evicted from DRAM.
        assert_eq!(tier.lookup("u1", 30), LookupResult::Miss);
        assert_eq!(tier.lookup("u2", 30), LookupResult::DramHit);
        assert_eq!(tier.lookup("u3", 30), LookupResult::DramHit);
    }

    #[test]
    fn probe_hbm_hit_causes_zero_reloads() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        tier.drain_events();
        assert_eq!(tier.pseudo_preinfer("u1", 1, 5), ProbeOutcome::AlreadyInHbm);
        let events = tier.drain_events();
        assert_eq!(count(&events, Ev::ReloadStart), 0);
    }

    #[test]
    fn burst_of_ranks_reloads_once() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        tier.mark_consumed("u1", 5).unwrap();
        tier.spill("u1", 10).unwrap();
        tier.drain_events();
        // Five concurrent ranks for one user with the cache in DRAM.
        let first = tier.pseudo_preinfer("u1", 1, 20);
        assert!(matches!(first, ProbeOutcome::ReloadScheduled { started: true, .. }));
        for rank in 2..=5 {
            assert_eq!(
                tier.pseudo_preinfer("u1", rank, 20),
                ProbeOutcome::JoinedInFlight
            );
        }
        let done = tier.complete_reload("u1", 1000);
        assert!(done.installed);
        assert_eq!(done.waiters, vec![1, 2, 3, 4, 5]);
        // After completion further ranks hit HBM directly.
        assert_eq!(tier.pseudo_preinfer("u1", 6, 1001), ProbeOutcome::AlreadyInHbm);
        let events = tier.drain_events();
        assert_eq!(count(&events, Ev::ReloadStart), 1);
        assert_eq!(count(&events, Ev::ReloadEnd), 1);
    }

    #[test]
    fn rank_before_preinfer_reloads_once_and_preinfer_noops() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        tier.mark_consumed("u1", 5).unwrap();
        tier.spill("u1", 10).unwrap();
        tier.drain_events();
        // Ranks arrive before the real pre-infer of the next trial.
        assert!(matches!(
            tier.pseudo_preinfer("u1", 1, 20),
            ProbeOutcome::ReloadScheduled { started: true, .. }
        ));
        assert_eq!(tier.pseudo_preinfer("u1", 2, 21), ProbeOutcome::JoinedInFlight);
        // The late real pre-infer joins the in-flight reload: no new work.
        assert_eq!(tier.preinfer_probe("u1", 22), PreInferProbe::NoOp);
        let done = tier.complete_reload("u1", 900);
        assert!(done.installed);
        assert_eq!(done.waiters, vec![1, 2]);
        // Now in HBM: a later pre-infer is still a no-op.
        assert_eq!(tier.preinfer_probe("u1", 901), PreInferProbe::NoOp);
        let events = tier.drain_events();
        assert_eq!(count(&events, Ev::ReloadStart), 1);
    }

    #[test]
    fn governor_bounds_concurrent_reloads() {
        let mut tier = TieredCache::new(0, cfg());
        for i in 1..=3 {
            let user = format!("u{i}");
            assert!(tier.complete_preinfer(cache_of(&user, 1024), i).installed());
            tier.mark_consumed(&user, 10 + i).unwrap();
            tier.spill(&user, 20 + i).unwrap();
        }
        tier.drain_events();
        assert!(matches!(
            tier.pseudo_preinfer("u1", 1, 100),
            ProbeOutcome::ReloadScheduled { started: true, .. }
        ));
        assert!(matches!(
            tier.pseudo_preinfer("u2", 2, 100),
            ProbeOutcome::ReloadScheduled { started: true, .. }
        ));
        // Third reload exceeds the bound and queues.
        assert!(matches!(
            tier.pseudo_preinfer("u3", 3, 100),
            ProbeOutcome::ReloadScheduled { started: false, .. }
        ));
        assert_eq!(tier.governor.current_reloads(), 2);
        let done = tier.complete_reload("u1", 200);
        assert_eq!(done.next_started.as_ref().map(|(u, _)| u.as_str()), Some("u3"));
        assert_eq!(tier.governor.current_reloads(), 2);
    }

    #[test]
    fn mark_consumed_idempotent_and_unknown_errors() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        assert!(tier.mark_consumed("u1", 5).unwrap());
        assert!(!tier.mark_consumed("u1", 6).unwrap());
        assert!(matches!(
            tier.mark_consumed("ghost", 7),
            Err(CacheError::UnknownKey(_))
        ));
        let events = tier.drain_events();
        assert_eq!(count(&events, Ev::Consume), 1);
    }

    #[test]
    fn dram_ttl_expires_entries() {
        let mut short = cfg();
        short.dram_ttl_us = 1_000;
        let mut tier = TieredCache::new(0, short);
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        tier.mark_consumed("u1", 5).unwrap();
        tier.spill("u1", 10).unwrap();
        assert_eq!(tier.lookup("u1", 500), LookupResult::DramHit);
        assert_eq!(tier.lookup("u1", 2_000), LookupResult::Miss);
    }

    #[test]
    fn expire_live_entry() {
        let mut tier = TieredCache::new(0, cfg());
        assert!(tier.complete_preinfer(cache_of("u1", 2048), 0).installed());
        assert!(tier.expire_live("u1", cfg().t_life_us));
        assert_eq!(tier.lookup("u1", cfg().t_life_us), LookupResult::Miss);
        // Consumed entries are not expiry targets.
        assert!(tier.complete_preinfer(cache_of("u2", 2048), 0).installed());
        tier.mark_consumed("u2", 1).unwrap();
        assert!(!tier.expire_live("u2", cfg().t_life_us));
    }

    #[test]
    fn tier_exclusivity_under_random_ops() {
        let mut tier = TieredCache::new(0, cfg());
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let users: Vec<String> = (0..8).map(|i| format!("u{i}")).collect();
        let mut now = 0u64;
        let mut rank_id = 0u64;
        for _ in 0..500 {
            now += rng.random_range(1..5_000);
            let user = &users[rng.random_range(0..users.len())];
            match rng.random_range(0..4) {
                0 => {
                    if tier.preinfer_probe(user, now) == PreInferProbe::NeedsCompute {
                        let _ = tier.complete_preinfer(cache_of(user, 1024), now);
                    }
                }
                1 => {
                    let _ = tier.mark_consumed(user, now);
                }
                2 => {
                    let _ = tier.spill(user, now);
                }
                _ => {
                    rank_id += 1;
                    if let ProbeOutcome::ReloadScheduled { started: true, .. } =
                        tier.pseudo_preinfer(user, rank_id, now)
                    {
                        tier.complete_reload(user, now + 100);
                    }
                }
            }
            // Occupancy safety and tier exclusivity after every op.
            assert!(tier.window.occupancy_bytes() <= tier.window.capacity_bytes());
            assert!(tier.dram.occupancy_bytes() <= tier.dram.capacity_bytes());
            for u in &users {
                let in_hbm = tier.window.contains(u);
                let in_dram = tier.dram.entries.contains_key(u.as_str());
                assert!(!(in_hbm && in_dram), "user {u} authoritative in both tiers");
            }
        }
    }
}
