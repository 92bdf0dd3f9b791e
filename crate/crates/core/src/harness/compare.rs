use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{read_records, read_summary, summarize, RunReference};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub label: String,
    pub steps: usize,
    pub windowed_hv: Vec<f64>,
    pub final_hv: f64,
    /// `(HV / HV_full − 1) · 100`; `None` when the full run has zero HV.
    pub delta_pct: Option<f64>,
    pub final_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub objectives: Vec<String>,
    pub hv_reference: Vec<f64>,
    pub full: usize,
    pub runs: Vec<RunEntry>,
}

fn load_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::from_file(&dir.join("config.txt"))
}

/// Labels from modes, disambiguated by seed and then by position.
pub(crate) fn labels(configs: &[RunConfig]) -> Vec<String> {
    let base: Vec<String> = configs.iter().map(|c| c.mode.to_string()).collect();
    let with_seed: Vec<String> = configs.iter().map(|c| format!("{}_s{}", c.mode, c.seed)).collect();
    let unique = |v: &[String]| v.iter().enumerate().all(|(i, a)| v.iter().skip(i + 1).all(|b| a != b));
    if unique(&base) {
        base
    } else if unique(&with_seed) {
        with_seed
    } else {
        with_seed.iter().enumerate().map(|(i, l)| format!("{l}_{i}")).collect()
    }
}

/// Windowed-HV comparison of runs sharing the same objectives, scored
/// against the reference of the designated full run.
pub fn compare(dirs: &[PathBuf], full: usize) -> Result<ComparisonReport> {
    if dirs.is_empty() || full >= dirs.len() {
        return Err(Error::config("compare needs at least one run and a valid full-run index"));
    }
    let configs = dirs.iter().map(|d| load_config(d)).collect::<Result<Vec<_>>>()?;
    for (c, d) in configs.iter().zip(dirs) {
        if c.rewards != configs[full].rewards {
            return Err(Error::config(format!("{} uses different reward specs from the full run", d.display())));
        }
        if c.hv_window != configs[full].hv_window {
            return Err(Error::config(format!("{} uses a different HV window", d.display())));
        }
    }
    let reference: RunReference = read_summary(&dirs[full])
        .map_err(|e| Error::config(format!("full run {} has no summary: {e}", dirs[full].display())))?
        .reference;
    let labels = labels(&configs);
    let mut runs = Vec::with_capacity(dirs.len());
    for ((dir, cfg), label) in dirs.iter().zip(&configs).zip(labels) {
        let records = read_records(dir)?;
        let s = summarize(cfg, &reference, &records)?;
        runs.push(RunEntry {
            dir: dir.clone(),
            label,
            steps: records.len(),
            windowed_hv: s.windowed_hv.iter().map(|w| w.1).collect(),
            final_hv: s.final_hv,
            delta_pct: None,
            final_means: s.final_means,
        });
    }
    let full_hv = runs[full].final_hv;
    for r in &mut runs {
        r.delta_pct = (full_hv > 0.0).then(|| (r.final_hv / full_hv - 1.0) * 100.0);
    }
    Ok(ComparisonReport {
        objectives: configs[full].rewards.iter().map(|r| r.name.clone()).collect(),
        hv_reference: reference.hv_reference,
        full,
        runs,
    })
}

impl ComparisonReport {
    /// Plain-text table: final HV, delta vs. the full run, final means.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<24} {:>6} {:>12} {:>9}", "run", "steps", "final_hv", "delta");
        for o in &self.objectives {
            let _ = write!(s, " {o:>11}");
        }
        s.push('\n');
        for (i, r) in self.runs.iter().enumerate() {
            let delta = match (i == self.full, r.delta_pct) {
                (true, _) => "full".to_string(),
                (false, Some(d)) => format!("{d:+.1}%"),
                (false, None) => "n/a".to_string(),
            };
            let _ = write!(s, "{:<24} {:>6} {:>12.4e} {:>9}", r.label, r.steps, r.final_hv, delta);
            for m in &r.final_means {
                let _ = write!(s, " {m:>11.4}");
            }
            s.push('\n');
        }
        s
    }
}
