//! Executes experiments and writes their artifacts.
//!
//! ```text
//! <out>/summary.json
//! <out>/config.toml                 effective config
//! <out>/seed-<n>/rounds.jsonl
//! <out>/seed-<n>/partition.json
//! <out>/seed-<n>/pretrained_eval.json
//! <out>/seed-<n>/checkpoints/{pretrained,global,cluster-<c>,teacher-<c>}.ckpt
//! <out>/error.json                  only when a run failed
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedstyle_core::checkpoint::Checkpoint;
use fedstyle_core::experiment::{ExperimentConfig, Summary, SCHEMA_VERSION};
use fedstyle_core::federation::{self, FederatedWorld, RunOutput, TAIL_FRACTION};
use log::info;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub schema_version: u32,
    /// Effective config; `run --config summary.json` reproduces the run.
    pub config: ExperimentConfig,
    /// Fraction of final rounds behind the `tail_*` statistics.
    pub tail_fraction: f64,
    #[serde(flatten)]
    pub summary: Summary,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_checkpoints(dir: &Path, out: &RunOutput) -> Result<()> {
    let dir = dir.join("checkpoints");
    fs::create_dir_all(&dir)?;
    Checkpoint::from_params(&out.pretrained).save(&dir.join("pretrained.ckpt"))?;
    Checkpoint::from_slice(&out.models.phi).save(&dir.join("global.ckpt"))?;
    for (c, theta) in out.models.thetas.iter().enumerate() {
        Checkpoint::from_slice(theta).save(&dir.join(format!("cluster-{c}.ckpt")))?;
    }
    for (c, teacher) in out.models.teachers.iter().enumerate() {
        Checkpoint::from_params(teacher).save(&dir.join(format!("teacher-{c}.ckpt")))?;
    }
    Ok(())
}

/// Runs one seed, streaming round records to `rounds.jsonl`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunOutput> {
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir)?;
    let world = cfg.world_for(seed)?;
    let mut rounds = BufWriter::new(File::create(dir.join("rounds.jsonl"))?);
    let result = federation::run_with(&cfg.effective(seed), FederatedWorld::from(world), |r| {
        federation::write_jsonl(&mut rounds, r)?;
        rounds.flush()?;
        Ok(())
    });
    rounds.flush()?;
    let run = result.with_context(|| format!("seed {seed}"))?;
    write_json(
        &dir.join("partition.json"),
        &run.partition.to_export(run.selection_range, run.selection_seeds.clone()),
    )?;
    write_json(&dir.join("pretrained_eval.json"), &run.pretrained_eval)?;
    write_checkpoints(&dir, &run)?;
    Ok(run)
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    seed: u64,
    error: &'a str,
}

/// Runs every seed of `cfg` into `out` and writes `summary.json`.
///
/// A failing seed stops the experiment after writing `error.json`; the
/// artifacts of earlier seeds and the rounds already streamed remain.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<SummaryFile> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), crate::config::to_toml(cfg)?)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        info!("seed {seed}: starting");
        match run_seed(cfg, seed, out) {
            Ok(run) => {
                let (m, s) = run.tail_stats();
                info!("seed {seed}: last-rounds mIoU {m:.4} ± {s:.4}");
                runs.push((seed, run));
            }
            Err(e) => {
                let msg = format!("{e:#}");
                write_json(&out.join("error.json"), &ErrorRecord { seed, error: &msg })?;
                return Err(e);
            }
        }
    }
    let refs: Vec<(u64, &RunOutput)> = runs.iter().map(|(s, r)| (*s, r)).collect();
    let file = SummaryFile {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        tail_fraction: TAIL_FRACTION,
        summary: Summary::from_runs(&refs),
    };
    write_json(&out.join("summary.json"), &file)?;
    Ok(file)
}

pub fn read_summary(dir: &Path) -> Result<SummaryFile> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).with_context(|| format!("missing summary {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
