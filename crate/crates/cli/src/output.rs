//! Run artifacts: the manifest plus deterministic CSV and JSON outputs.
//! Identical manifests produce byte-identical files.

use std::fs;
use std::path::Path;

use serde::Serialize;

use relay_core::config::{SimMode, SystemConfig};
use relay_core::metrics::StageSummary;
use relay_core::sim::{SimOutput, SweepParam, SweepRow};
use relay_core::trace::TRACE_CSV_HEADER;

use crate::CliError;

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'a str,
    command: &'a str,
    config_path: &'a str,
    config_hash: String,
    seed: u64,
    mode: &'a str,
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &SystemConfig,
    config_path: &str,
    mode: SimMode,
    seed: u64,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        config_path,
        config_hash: cfg.content_hash(),
        seed,
        mode: mode.as_str(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    write(&dir.join("manifest.json"), &json)
}

fn stage_row(name: &str, s: &StageSummary) -> String {
    format!(
        "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
        name, s.count, s.mean_ms, s.p50_ms, s.p90_ms, s.p99_ms, s.p999_ms, s.max_ms
    )
}

pub fn write_simulation(
    dir: &Path,
    cfg: &SystemConfig,
    config_path: &str,
    mode: SimMode,
    seed: u64,
    output: &SimOutput,
) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_manifest(dir, "simulate", cfg, config_path, mode, seed)?;

    let report_json =
        serde_json::to_string_pretty(&output.report).map_err(|e| CliError::Io(e.to_string()))?;
    write(&dir.join("report.json"), &report_json)?;
    write(&dir.join("report.txt"), &output.report.text_summary())?;

    let mut trials = String::from(
        "trial_id,user_key,instance,admitted,class,prefix_len,suffix_len,items,arrive_us,rank_arrive_us,done_us,queue_us,load_us,rank_us,pipeline_us,ranking_stage_us\n",
    );
    let mut records: Vec<_> = output.records.iter().collect();
    records.sort_by_key(|r| r.trial_id);
    for r in records {
        trials.push_str(&format!(
            "{},{},{},{},{:?},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.trial_id,
            r.user_key,
            r.instance_id,
            r.admitted,
            r.class,
            r.prefix_len,
            r.suffix_len,
            r.items,
            r.t_arrive_us,
            r.t_rank_arrive_us,
            r.t_done_us,
            r.queue_us,
            r.load_us,
            r.rank_us,
            r.pipeline_us(),
            r.ranking_stage_us()
        ));
    }
    write(&dir.join("trials.csv"), &trials)?;

    let mut trace = String::from(TRACE_CSV_HEADER);
    trace.push('\n');
    for e in &output.trace {
        trace.push_str(&e.csv_row());
        trace.push('\n');
    }
    write(&dir.join("trace.csv"), &trace)?;

    let mut adm = String::from("t_us,instance,user_key,outcome\n");
    for a in &output.admissions {
        adm.push_str(&format!(
            "{},{},{},{:?}\n",
            a.t_us, a.instance_id, a.user_key, a.outcome
        ));
    }
    write(&dir.join("admissions.csv"), &adm)?;

    let r = &output.report;
    let mut stages = String::from("stage,count,mean_ms,p50_ms,p90_ms,p99_ms,p999_ms,max_ms\n");
    for (name, s) in [
        ("pipeline", &r.pipeline),
        ("ranking_stage", &r.ranking_stage),
        ("queue", &r.queue),
        ("pre", &r.pre),
        ("load", &r.load),
        ("rank", &r.rank),
    ] {
        stages.push_str(&stage_row(name, s));
        stages.push('\n');
    }
    write(&dir.join("stage_latency.csv"), &stages)?;
    Ok(())
}

pub fn write_sweep(
    dir: &Path,
    cfg: &SystemConfig,
    config_path: &str,
    mode: SimMode,
    seed: u64,
    param: SweepParam,
    rows: &[SweepRow],
) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_manifest(dir, "sweep", cfg, config_path, mode, seed)?;
    let mut csv = String::from(
        "param,value,slo_met,success_rate,achieved_qps,pipeline_p99_ms,ranking_stage_p99_ms,queue_p99_ms,pre_p99_ms,load_p99_ms,rank_p99_ms,dram_hit_rate,mean_concurrency,audit_passed\n",
    );
    for row in rows {
        let r = &row.report;
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.6},{:.3},{}\n",
            param.as_str(),
            row.value,
            r.slo_met,
            r.success_rate,
            r.achieved_qps,
            r.pipeline.p99_ms,
            r.ranking_stage.p99_ms,
            r.queue.p99_ms,
            r.pre.p99_ms,
            r.load.p99_ms,
            r.rank.p99_ms,
            r.cache.dram_hit_rate,
            r.mean_ranking_concurrency,
            r.audit.passed
        ));
    }
    write(&dir.join("sweep.csv"), &csv)
}
