//! Loading experiment configs and applying `KEY=VALUE` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fedstyle_core::experiment::ExperimentConfig;
use fedstyle_core::model::parse_group_set;
use toml::{Table, Value};

const TOGGLES: [&str; 5] = ["fda_pretrain", "self_training", "kd", "swat", "cluster_aggr"];

/// Reads a TOML config, or the `config` echoed in a `summary.json`.
pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let inner = v.get("config").cloned().unwrap_or(v);
        serde_json::from_value(inner).with_context(|| format!("config in {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Resolves a short key to its dotted path in the config tree.
fn resolve(root: &Table, key: &str) -> Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    if TOGGLES.contains(&key) {
        return Ok(vec!["toggles".into(), key.into()]);
    }
    let fed = root.get("federation").and_then(Value::as_table);
    if fed.is_some_and(|t| t.contains_key(key)) || key == "selection" {
        return Ok(vec!["federation".into(), key.into()]);
    }
    if matches!(key, "seeds" | "world_seed" | "schema_version") {
        return Ok(vec![key.into()]);
    }
    bail!("unknown config key `{key}`")
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| anyhow!("empty key"))?;
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Applies one `key=value` override.
///
/// Besides dotted paths and plain field names, two keys are special:
/// `cluster_groups` takes a group set (`none`, `all`, `norm+classifier`), and
/// `style_window=none` turns stylized pre-training off.
pub fn apply_override(cfg: &ExperimentConfig, key: &str, raw: &str) -> Result<ExperimentConfig> {
    let mut root = Table::try_from(cfg)?;
    let key = key.trim();
    let raw = raw.trim();
    match key {
        "cluster_groups" => {
            let groups = parse_group_set(raw)?;
            let names = groups.iter().map(|g| Value::String(g.name().into())).collect();
            set_path(&mut root, &["federation".into(), "cluster_groups".into()], Value::Array(names))?;
        }
        "style_window" if raw.eq_ignore_ascii_case("none") => {
            set_path(&mut root, &["toggles".into(), "fda_pretrain".into()], Value::Boolean(false))?;
        }
        "style_window" => {
            set_path(&mut root, &["toggles".into(), "fda_pretrain".into()], Value::Boolean(true))?;
            set_path(&mut root, &["federation".into(), "style_window".into()], parse_scalar(raw))?;
        }
        _ => {
            let path = resolve(&root, key)?;
            set_path(&mut root, &path, parse_scalar(raw))?;
        }
    }
    let out: ExperimentConfig = Value::Table(root)
        .try_into()
        .with_context(|| format!("applying {key}={raw}"))?;
    Ok(out)
}

/// One ablation axis: a key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s.split_once('=').ok_or_else(|| anyhow!("expected KEY=V1,V2,... in `{s}`"))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            bail!("expected KEY=V1,V2,... in `{s}`");
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

/// Cartesian product of the axes, each variant labeled `k1=v1,k2=v2`.
pub fn expand(base: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut out = vec![(String::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.values.len());
        for (label, cfg) in &out {
            for v in &axis.values {
                let cfg = apply_override(cfg, &axis.key, v)?;
                let part = format!("{}={}", axis.key, v);
                let label = if label.is_empty() { part } else { format!("{label},{part}") };
                next.push((label, cfg));
            }
        }
        out = next;
    }
    for (label, cfg) in &out {
        cfg.validate().with_context(|| format!("variant `{label}`"))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedstyle_core::model::Group;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_is_defaulted() {
        let cfg: ExperimentConfig = toml::from_str("schema_version = 1\n[federation]\nrounds = 3\n").unwrap();
        assert_eq!(cfg.federation.rounds, 3);
        assert_eq!(cfg.world, ExperimentConfig::default().world);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[federation]\nroundz = 3\n").is_err());
        assert!(apply_override(&ExperimentConfig::default(), "roundz", "3").is_err());
    }

    #[test]
    fn overrides() {
        let base = ExperimentConfig::default();
        let c = apply_override(&base, "lr", "0.5").unwrap();
        assert_eq!(c.federation.lr, 0.5);
        let c = apply_override(&base, "kd", "false").unwrap();
        assert!(!c.toggles.kd);
        let c = apply_override(&base, "cluster_groups", "norm+classifier").unwrap();
        assert_eq!(c.federation.cluster_groups, [Group::Norm, Group::Classifier].into_iter().collect());
        let c = apply_override(&base, "world.domains.domains", "4").unwrap();
        assert_eq!(c.world.domains.domains, 4);
        let c = apply_override(&base, "style_window", "none").unwrap();
        assert!(!c.toggles.fda_pretrain);
        let c = apply_override(&base, "style_window", "5").unwrap();
        assert_eq!(c.federation.style_window, 5);
        assert!(apply_override(&base, "lr", "fast").is_err());
    }

    #[test]
    fn expansion_is_cartesian() {
        let axes: Vec<Axis> = ["cluster_groups=none,norm,all", "kd=true,false"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let v = expand(&ExperimentConfig::default(), &axes).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v[0].0, "cluster_groups=none,kd=true");
        assert!(v[0].1.federation.cluster_groups.is_empty());
        assert!(!v[5].1.toggles.kd);
    }

    #[test]
    fn bad_axis() {
        assert!("kd".parse::<Axis>().is_err());
        assert!("kd=".parse::<Axis>().is_err());
    }
}
