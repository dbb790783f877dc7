//! Side-by-side tables of finished runs.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedstyle_core::federation::RoundRecord;

use crate::runner::{read_summary, seed_dir};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run: String,
    pub miou_mean_over_seeds: f64,
    pub miou_std_over_seeds: f64,
    pub miou_std_over_last_rounds: f64,
    pub delta_vs_first: f64,
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Mean mIoU per round over the seeds of one run.
fn curve(dir: &Path, seeds: &[u64]) -> Result<Vec<f64>> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for &seed in seeds {
        let path = seed_dir(dir, seed).join("rounds.jsonl");
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RoundRecord = serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?;
            if sums.len() <= r.round {
                sums.resize(r.round + 1, (0.0, 0));
            }
            sums[r.round].0 += r.miou;
            sums[r.round].1 += 1;
        }
    }
    Ok(sums.iter().map(|(s, n)| s / (*n).max(1) as f64).collect())
}

/// Writes `comparison.csv` and `curves.csv` into `out` and returns the rows.
pub fn compare(runs: &[PathBuf], out: &Path) -> Result<Vec<Row>> {
    if runs.len() < 2 {
        bail!("compare needs at least two runs, got {}", runs.len());
    }
    let mut rows = Vec::with_capacity(runs.len());
    let mut curves: Vec<(String, Vec<f64>)> = Vec::with_capacity(runs.len());
    for dir in runs {
        let s = read_summary(dir)?;
        let name = run_name(dir);
        curves.push((name.clone(), curve(dir, &s.config.seeds)?));
        rows.push(Row {
            run: name,
            miou_mean_over_seeds: s.summary.miou_mean_over_seeds,
            miou_std_over_seeds: s.summary.miou_std_over_seeds,
            miou_std_over_last_rounds: s.summary.miou_std_over_last_rounds,
            delta_vs_first: 0.0,
        });
    }
    let first = rows[0].miou_mean_over_seeds;
    rows.iter_mut().for_each(|r| r.delta_vs_first = r.miou_mean_over_seeds - first);

    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    w.write_record(["run", "miou_mean_over_seeds", "miou_std_over_seeds", "miou_std_over_last_rounds", "delta_vs_first"])?;
    for r in &rows {
        w.write_record([
            r.run.clone(),
            format!("{:.6}", r.miou_mean_over_seeds),
            format!("{:.6}", r.miou_std_over_seeds),
            format!("{:.6}", r.miou_std_over_last_rounds),
            format!("{:+.6}", r.delta_vs_first),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("curves.csv"))?;
    let mut header = vec!["round".to_string()];
    header.extend(curves.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    let len = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for t in 0..len {
        let mut rec = vec![t.to_string()];
        rec.extend(curves.iter().map(|(_, c)| c.get(t).map_or(String::new(), |v| format!("{v:.6}"))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}
