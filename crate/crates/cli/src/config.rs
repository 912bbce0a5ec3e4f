//! Layered run configuration: built-in defaults, then a TOML file, then `--set` and `--seed`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use vidfuse::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { clips: 2, frames: 24, height: 64, width: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub extractor_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { extractor_seed: vidfuse::metrics::VideoFeatureExtractor::DEFAULT_SEED }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; `train.seed` always follows it.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Small end-to-end setting used by `demo`.
    pub fn demo() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig { clips: 2, frames: 20, height: 32, width: 32 },
            train: TrainConfig {
                k: 2,
                l: 8,
                batch: 1,
                pretrain_batch: 2,
                iters_pretrain: 200,
                iters_full: 40,
                channels: 8,
                disc_widths: [8, 16, 32],
                height: 32,
                width: 32,
                checkpoint_every: 20,
                validate_every: 20,
                holdout: 8,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string.
fn parse_set(spec: &str) -> Result<Table> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("--set expects key=value, got `{spec}`");
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("--set has a malformed key in `{spec}`");
    }
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut node = value;
    for part in key.rsplit('.') {
        let mut t = Table::new();
        t.insert(part.to_string(), node);
        node = Value::Table(t);
    }
    match node {
        Value::Table(t) => Ok(t),
        _ => unreachable!(),
    }
}

/// Merges the layers over `defaults` and validates the result.
pub fn resolve(defaults: RunConfig, file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = Table::try_from(&defaults).context("serializing default configuration")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let over: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut table, over);
    }
    for s in sets {
        merge(&mut table, parse_set(s)?);
    }
    if let Some(seed) = seed {
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    let mut cfg: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
    cfg.train.seed = cfg.seed;
    cfg.train.validate()?;
    if cfg.data.clips == 0 || cfg.data.frames == 0 {
        bail!("data.clips and data.frames must be positive");
    }
    Ok(cfg)
}
