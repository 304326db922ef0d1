//! Capacity-search behavior: feasibility boundaries, degenerate cases, and
//! sweep plumbing.

use relay_core::config::{SimMode, SystemConfig};
use relay_core::cost::CostModel;
use relay_core::sim::{find_max_seq, slo_compliant_qps, sweep, SweepParam};

fn search_config() -> SystemConfig {
    let mut cfg = SystemConfig::default();
    cfg.model.layers = 2;
    cfg.model.dim = 16;
    cfg.model.elem_bytes = 4;
    cfg.trigger.length_threshold = 512;
    cfg.trigger.kv_p99_bytes = 2_100_000;
    cfg.trigger.hbm_bytes = 84_000_000;
    cfg.trigger.r1 = 0.5;
    cfg.trigger.q_m = 10.0;
    cfg.trigger.m_slots = 4;
    cfg.trigger.n_instances = 4;
    cfg.trigger.r2 = 0.5;
    cfg.trigger.t_life_s = 0.5;
    cfg.router.instances_per_server = 2;
    cfg.router.per_server_special_cap = 1;
    cfg.instance.m_slots = 4;
    cfg.workload.offered_qps = 12.0;
    cfg.workload.horizon_s = 6.0;
    cfg.workload.items_per_query = 128;
    cfg.workload.suffix_range = (16, 64);
    cfg
}

#[test]
fn max_seq_relay_exceeds_baseline() {
    let cfg = search_config();
    let base = find_max_seq(&cfg, SimMode::Baseline, 3, 512, 8192, 128).unwrap();
    let relay = find_max_seq(&cfg, SimMode::Relay, 3, 512, 8192, 128).unwrap();
    assert!(base > 0, "baseline supports something at desk scale");
    assert!(
        relay > base,
        "relay ({relay}) should support longer sequences than baseline ({base})"
    );
}

#[test]
fn impossible_cost_model_gives_zero_capacity() {
    let mut cfg = search_config();
    // Even one token exceeds the pipeline budget.
    cfg.cost.explicit = Some(CostModel {
        pre_coeffs: (0.0, 0.0, 500.0),
        ..CostModel::default()
    });
    let len = find_max_seq(&cfg, SimMode::Baseline, 1, 64, 2048, 64).unwrap();
    assert_eq!(len, 0);
}

#[test]
fn qps_search_finds_positive_capacity() {
    let mut cfg = search_config();
    cfg.workload.long_fraction = 1.0;
    cfg.workload.short_prefix_range = (2000, 2000);
    cfg.workload.long_prefix_range = (2000, 2000);
    cfg.workload.horizon_s = 4.0;
    let qps = slo_compliant_qps(&cfg, SimMode::Relay, 5, 4.0, 64.0, 4.0).unwrap();
    assert!(qps >= 4.0, "relay sustains at least the probe floor, got {qps}");
}

#[test]
fn unknown_sweep_parameter_is_config_error() {
    assert!("warp-drive".parse::<SweepParam>().is_err());
    assert!("seq-len".parse::<SweepParam>().is_ok());
}

#[test]
fn items_sweep_grows_rank_latency_linearly() {
    let mut cfg = search_config();
    cfg.workload.long_fraction = 1.0;
    cfg.workload.short_prefix_range = (2000, 2000);
    cfg.workload.long_prefix_range = (2000, 2000);
    cfg.workload.horizon_s = 4.0;
    let rows = sweep(
        &cfg,
        SimMode::Relay,
        SweepParam::Items,
        &[128.0, 512.0, 2048.0],
        7,
    )
    .unwrap();
    let ranks: Vec<f64> = rows.iter().map(|r| r.report.rank.p99_ms).collect();
    assert!(ranks[0] < ranks[1] && ranks[1] < ranks[2]);
    // Cached ranking at 2048 items stays within the ranking budget.
    assert!(ranks[2] <= 10.0, "rank p99 at 2048 items = {}", ranks[2]);
}
