//! Cache event trace log: one record per lifecycle event, consumed by the
//! invariant auditor and dumped as CSV.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hbm,
    Dram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheEventKind {
    Insert,
    Consume,
    Spill,
    ReloadStart,
    ReloadEnd,
    Evict,
    MissFallback,
}

impl CacheEventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CacheEventKind::Insert => "insert",
            CacheEventKind::Consume => "consume",
            CacheEventKind::Spill => "spill",
            CacheEventKind::ReloadStart => "reload_start",
            CacheEventKind::ReloadEnd => "reload_end",
            CacheEventKind::Evict => "evict",
            CacheEventKind::MissFallback => "miss_fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub t_us: u64,
    pub instance_id: u32,
    pub user_key: String,
    pub kind: CacheEventKind,
    pub tier: Option<Tier>,
    pub bytes: u64,
}

pub const TRACE_CSV_HEADER: &str = "timestamp_us,instance,user_key,event,tier,bytes";

impl TraceEvent {
    pub fn csv_row(&self) -> String {
        let tier = match self.tier {
            Some(Tier::Hbm) => "hbm",
            Some(Tier::Dram) => "dram",
            None => "-",
        };
        format!(
            "{},{},{},{},{},{}",
            self.t_us,
            self.instance_id,
            self.user_key,
            self.kind.as_str(),
            tier,
            self.bytes
        )
    }
}
