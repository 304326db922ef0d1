//! Routing inspection: map keys through a pool spec, and diff ownership
//! before and after removing an instance.

use std::path::Path;

use serde::Deserialize;

use relay_core::router::{InstanceInfo, InstanceKind, InstancePool, KeylessPolicy};

use crate::CliError;

#[derive(Debug, Deserialize)]
struct PoolSpec {
    #[serde(default = "default_virtual_nodes")]
    virtual_nodes: usize,
    #[serde(default = "default_cap")]
    per_server_special_cap: usize,
    #[serde(rename = "instance")]
    instances: Vec<InstanceSpec>,
}

fn default_virtual_nodes() -> usize {
    relay_core::router::DEFAULT_VIRTUAL_NODES
}

fn default_cap() -> usize {
    2
}

#[derive(Debug, Deserialize)]
struct InstanceSpec {
    id: u32,
    kind: String,
    #[serde(default)]
    server: u32,
}

fn load_pool(path: &Path) -> Result<InstancePool, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec: PoolSpec =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("pool spec: {e}")))?;
    let mut pool = InstancePool::new(
        spec.virtual_nodes,
        spec.per_server_special_cap,
        KeylessPolicy::RoundRobin,
    );
    for inst in spec.instances {
        let kind = match inst.kind.as_str() {
            "special" => InstanceKind::Special,
            "normal" => InstanceKind::Normal,
            other => {
                return Err(CliError::Config(format!(
                    "instance {} has unknown kind '{other}'",
                    inst.id
                )))
            }
        };
        pool.add_instance(InstanceInfo {
            instance_id: inst.id,
            kind,
            server_id: inst.server,
        })
        .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(pool)
}

fn load_keys(count: usize, key_file: Option<&Path>) -> Result<Vec<String>, CliError> {
    match key_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        }
        None => Ok((0..count).map(|i| format!("user-{i}")).collect()),
    }
}

pub fn cmd_route_check(
    pool_path: &Path,
    keys: usize,
    key_file: Option<&Path>,
    remove: Option<u32>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut pool = load_pool(pool_path)?;
    let keys = load_keys(keys, key_file)?;
    if keys.is_empty() {
        return Err(CliError::Config("no keys to route".into()));
    }
    let before: Vec<(String, u32)> = keys
        .iter()
        .map(|k| {
            pool.owner_of(k)
                .map(|id| (k.clone(), id))
                .ok_or_else(|| CliError::Config("pool has no special instances".into()))
        })
        .collect::<Result<_, _>>()?;

    let mut routes_csv = String::from("key,instance\n");
    for (k, id) in &before {
        routes_csv.push_str(&format!("{k},{id}\n"));
    }

    let mut remap_csv = String::new();
    let mut summary = format!("routed {} keys over the ring\n", before.len());
    if let Some(removed) = remove {
        pool.remove_instance(removed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let owned = before.iter().filter(|(_, id)| *id == removed).count();
        let mut remapped = 0usize;
        let mut violations = 0usize;
        remap_csv.push_str("key,old_instance,new_instance\n");
        for (k, old) in &before {
            let new = pool
                .owner_of(k)
                .ok_or_else(|| CliError::Config("ring empty after removal".into()))?;
            if new != *old {
                remapped += 1;
                remap_csv.push_str(&format!("{k},{old},{new}\n"));
                if *old != removed {
                    violations += 1;
                }
            }
        }
        summary.push_str(&format!(
            "removed instance {removed}: owned {owned} keys, remapped {remapped}, remap_fraction {:.4}, violations {violations}\n",
            remapped as f64 / before.len() as f64
        ));
        if violations > 0 {
            print!("{summary}");
            return Err(CliError::Check(format!(
                "{violations} keys moved that were not owned by the removed instance"
            )));
        }
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(dir.join("routes.csv"), &routes_csv)
            .map_err(|e| CliError::Io(e.to_string()))?;
        if !remap_csv.is_empty() {
            std::fs::write(dir.join("remap.csv"), &remap_csv)
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
    } else if remove.is_none() {
        print!("{routes_csv}");
    }
    print!("{summary}");
    Ok(())
}
