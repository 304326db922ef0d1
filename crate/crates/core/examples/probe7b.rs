use relay_core::config::{SimMode, SystemConfig};
use relay_core::sim::run;
use relay_core::trace::CacheEventKind;

fn main() {
    let mut cfg = SystemConfig::default();
    cfg.model.layers = 2;
    cfg.model.dim = 16;
    cfg.model.elem_bytes = 4;
    cfg.trigger.length_threshold = 512;
    cfg.trigger.hbm_bytes = 16_800_000;
    cfg.trigger.kv_p99_bytes = 800_000;
    cfg.trigger.r1 = 0.5;
    cfg.trigger.q_m = 16.7;
    cfg.trigger.m_slots = 2;
    cfg.trigger.n_instances = 4;
    cfg.trigger.r2 = 0.5;
    cfg.trigger.t_life_s = 0.5;
    cfg.router.instances_per_server = 2;
    cfg.router.per_server_special_cap = 1;
    cfg.cache.dram_capacity_bytes = 256_000_000;
    cfg.instance.m_slots = 2;
    cfg.workload.items_per_query = 128;
    cfg.workload.suffix_range = (16, 64);
    cfg.workload.long_fraction = 1.0;
    cfg.workload.short_prefix_range = (3000, 3000);
    cfg.workload.long_prefix_range = (3000, 3000);
    cfg.workload.offered_qps = 24.0;
    cfg.workload.horizon_s = 8.0;
    cfg.workload.repeat_prob = 0.9;
    let out = run(&cfg, SimMode::RelayDram, 5).unwrap();
    println!("{}", out.report.text_summary());
    let spills = out.trace.iter().filter(|e| e.kind == CacheEventKind::Spill).count();
    let reload_starts = out.trace.iter().filter(|e| e.kind == CacheEventKind::ReloadStart).count();
    println!("spills={spills} reload_starts={reload_starts}");
    println!("window entries tracked; trials {}", out.report.trials);
}
