//! TOML configuration schema: sections [model], [trigger], [router],
//! [cache], [cost], [workload], [slo], [instance]. Every field has a
//! default, so a config file only needs the overrides a run cares about.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::TierConfig;
use crate::cost::{calibrate, CalibrationAnchors, CostModel};
use crate::model::ModelConfig;
use crate::router::KeylessPolicy;
use crate::trigger::TriggerConfig;
use crate::workload::WorkloadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which pipeline the simulator executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    /// Full inference inline at ranking; no caching side path.
    Baseline,
    /// In-HBM relay with no DRAM reuse.
    Relay,
    /// Relay plus the server-local DRAM tier.
    RelayDram,
}

impl SimMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimMode::Baseline => "baseline",
            SimMode::Relay => "relay",
            SimMode::RelayDram => "relay-dram",
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(SimMode::Baseline),
            "relay" => Ok(SimMode::Relay),
            "relay-dram" | "relay+dram" => Ok(SimMode::RelayDram),
            other => Err(ConfigError::Invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterSection {
    pub instances_per_server: u32,
    pub virtual_nodes: usize,
    pub per_server_special_cap: usize,
    pub keyless_policy: KeylessPolicy,
}

impl Default for RouterSection {
    fn default() -> Self {
        Self {
            instances_per_server: 2,
            virtual_nodes: crate::router::DEFAULT_VIRTUAL_NODES,
            per_server_special_cap: 1,
            keyless_policy: KeylessPolicy::RoundRobin,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheSection {
    pub dram_capacity_bytes: u64,
    pub spill_on_evict: bool,
    /// DRAM staleness bound, seconds. Defaults to the simulation horizon
    /// scale; the production invalidation policy is a deliberate knob.
    pub dram_ttl_s: f64,
    pub max_concurrent_reloads: u32,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            dram_capacity_bytes: 500_000_000_000,
            spill_on_evict: true,
            dram_ttl_s: 600.0,
            max_concurrent_reloads: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CostSection {
    pub anchors: CalibrationAnchors,
    /// Explicit coefficients override the anchor fit entirely.
    pub explicit: Option<CostModel>,
}

impl CostSection {
    pub fn build(&self) -> Result<CostModel, ConfigError> {
        match &self.explicit {
            Some(m) => Ok(m.clone()),
            None => calibrate(&self.anchors).map_err(|e| ConfigError::Invalid(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SloConfig {
    pub pipeline_p99_budget_ms: f64,
    pub ranking_stage_budget_ms: f64,
    pub required_success_rate: f64,
}

impl Default for SloConfig {
    fn default() -> Self {
        Self {
            pipeline_p99_budget_ms: 135.0,
            ranking_stage_budget_ms: 50.0,
            required_success_rate: 0.999,
        }
    }
}

impl SloConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ranking_stage_budget_ms > self.pipeline_p99_budget_ms {
            return Err(ConfigError::Invalid(
                "ranking budget exceeds pipeline budget".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.required_success_rate) {
            return Err(ConfigError::Invalid(
                "required_success_rate must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn pipeline_budget_us(&self) -> u64 {
        (self.pipeline_p99_budget_ms * 1e3) as u64
    }

    pub fn ranking_budget_us(&self) -> u64 {
        (self.ranking_stage_budget_ms * 1e3) as u64
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceSection {
    pub m_slots: u32,
    pub rank_priority: bool,
    /// Compute real scores through the backbone (toy scale only).
    pub score_requests: bool,
}

impl Default for InstanceSection {
    fn default() -> Self {
        Self {
            m_slots: 5,
            rank_priority: false,
            score_requests: false,
        }
    }
}

/// The full system configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub model: ModelConfig,
    pub trigger: TriggerConfig,
    pub router: RouterSection,
    pub cache: CacheSection,
    pub cost: CostSection,
    pub workload: WorkloadConfig,
    pub slo: SloConfig,
    pub instance: InstanceSection,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            trigger: TriggerConfig::default(),
            router: RouterSection::default(),
            cache: CacheSection::default(),
            cost: CostSection::default(),
            workload: WorkloadConfig::default(),
            slo: SloConfig::default(),
            instance: InstanceSection::default(),
        }
    }
}

impl SystemConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SystemConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.trigger
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.workload
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.slo.validate()?;
        self.cost.build().map(|_| ())?;
        if self.instance.m_slots == 0 {
            return Err(ConfigError::Invalid("m_slots must be at least 1".into()));
        }
        Ok(())
    }

    /// HBM window capacity per special instance: the reserved fraction.
    pub fn hbm_window_bytes(&self) -> u64 {
        (self.trigger.r1 * self.trigger.hbm_bytes as f64).floor() as u64
    }

    /// Tier configuration for one special instance under the given mode.
    pub fn tier_config(&self, mode: SimMode) -> TierConfig {
        let dram_enabled = mode == SimMode::RelayDram;
        TierConfig {
            hbm_capacity_bytes: self.hbm_window_bytes(),
            dram_capacity_bytes: if dram_enabled {
                self.cache.dram_capacity_bytes
            } else {
                0
            },
            spill_on_evict: dram_enabled && self.cache.spill_on_evict,
            dram_ttl_us: (self.cache.dram_ttl_s * 1e6) as u64,
            t_life_us: self.trigger.t_life_us(),
            max_concurrent_reloads: self.cache.max_concurrent_reloads,
        }
    }

    /// Stable content hash of the effective config, for run manifests.
    pub fn content_hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        format!("{:016x}", crate::router::stable_hash64(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = SystemConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hbm_window_bytes(), 16_000_000_000);
    }

    #[test]
    fn toml_roundtrip_with_overrides() {
        let text = r#"
[model]
layers = 2
dim = 16
elem_bytes = 8
seed = 7

[trigger]
length_threshold = 1024
t_life_s = 1.0

[workload]
offered_qps = 50.0
horizon_s = 5.0

[slo]
pipeline_p99_budget_ms = 135.0
"#;
        let cfg = SystemConfig::from_toml(text).unwrap();
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.trigger.length_threshold, 1024);
        assert_eq!(cfg.trigger.r1, 0.5, "unset fields keep defaults");
        assert_eq!(cfg.workload.offered_qps, 50.0);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(SystemConfig::from_toml("[slo]\nranking_stage_budget_ms = 500.0").is_err());
        assert!(SystemConfig::from_toml("[model]\nelem_bytes = 3").is_err());
        assert!(SystemConfig::from_toml("not toml at all [").is_err());
    }

    #[test]
    fn mode_parsing() {
        use std::str::FromStr;
        assert_eq!(SimMode::from_str("baseline").unwrap(), SimMode::Baseline);
        assert_eq!(SimMode::from_str("relay").unwrap(), SimMode::Relay);
        assert_eq!(SimMode::from_str("relay+dram").unwrap(), SimMode::RelayDram);
        assert!(SimMode::from_str("quantum").is_err());
    }

    #[test]
    fn tier_config_follows_mode() {
        let cfg = SystemConfig::default();
        let relay = cfg.tier_config(SimMode::Relay);
        assert_eq!(relay.dram_capacity_bytes, 0);
        assert!(!relay.spill_on_evict);
        let dram = cfg.tier_config(SimMode::RelayDram);
        assert_eq!(dram.dram_capacity_bytes, cfg.cache.dram_capacity_bytes);
    }

    #[test]
    fn content_hash_tracks_changes() {
        let a = SystemConfig::default();
        let mut b = SystemConfig::default();
        assert_eq!(a.content_hash(), b.content_hash());
        b.workload.offered_qps = 123.0;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
