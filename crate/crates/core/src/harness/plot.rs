use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::compare::labels;
use super::config::RunConfig;
use super::run::{read_records, read_summary, summarize, StepRecord};
use crate::error::{Error, Result};
use crate::pareto::csv_error;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Per-objective batch-mean rewards.
    Dynamics,
    /// LP, CP, PN, Ψ and weights per objective.
    Factors,
    /// Windowed cumulative hypervolume.
    Hv,
    /// Composite variance before the final standardization.
    Variance,
    /// KL to the reference and clip fraction.
    Stability,
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamics" => Ok(Figure::Dynamics),
            "factors" => Ok(Figure::Factors),
            "hv" => Ok(Figure::Hv),
            "variance" => Ok(Figure::Variance),
            "stability" => Ok(Figure::Stability),
            _ => Err(Error::config(format!(
                "unknown figure '{s}' (expected dynamics, factors, hv, variance or stability)"
            ))),
        }
    }
}

struct Column {
    name: String,
    values: Vec<Option<f64>>,
}

fn column(name: String, values: Vec<Option<f64>>, smoothing: Option<usize>) -> Column {
    match smoothing {
        Some(w) if w > 1 => {
            // smooth the contiguous prefix of present values
            let present: Vec<f64> = values.iter().map_while(|v| *v).collect();
            let mut smoothed: Vec<Option<f64>> = stats::moving_average(&present, w).into_iter().map(Some).collect();
            smoothed.extend(values[present.len()..].iter().copied());
            Column { name: format!("{name}_ma{w}"), values: smoothed }
        }
        _ => Column { name, values },
    }
}

fn write_table(path: &Path, index_name: &str, index: &[u64], columns: &[Column]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let mut header = vec![index_name.to_string()];
    header.extend(columns.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(csv_error)?;
    for (row, i) in index.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        for c in columns {
            rec.push(c.values.get(row).copied().flatten().map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn series(records: &[StepRecord], len: usize, f: impl Fn(&StepRecord) -> Option<f64>) -> Vec<Option<f64>> {
    (0..len).map(|i| records.get(i).and_then(&f)).collect()
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Writes the delimited-text tables for one figure into `out_dir` and
/// returns their paths. `smoothing` applies a trailing moving average and
/// tags the affected headers with `_ma<window>`.
pub fn emit_plot_data(
    run_dirs: &[PathBuf],
    figure: Figure,
    out_dir: &Path,
    smoothing: Option<usize>,
) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::config("no run directories given"));
    }
    std::fs::create_dir_all(out_dir)?;
    let configs = run_dirs.iter().map(|d| RunConfig::from_file(&d.join("config.txt"))).collect::<Result<Vec<_>>>()?;
    let logs = run_dirs.iter().map(|d| read_records(d)).collect::<Result<Vec<_>>>()?;
    let labels = labels(&configs);
    let len = logs.iter().map(Vec::len).max().unwrap_or(0);
    let steps: Vec<u64> = (0..len as u64).collect();
    let objectives: Vec<String> = configs[0].rewards.iter().map(|r| r.name.clone()).collect();
    let mut written = Vec::new();
    match figure {
        Figure::Dynamics => {
            for (k, obj) in objectives.iter().enumerate() {
                let cols: Vec<Column> = logs
                    .iter()
                    .zip(&labels)
                    .map(|(log, l)| {
                        column(format!("{l}_reward"), series(log, len, |r| r.rewards.get(k).copied()), smoothing)
                    })
                    .collect();
                let path = out_dir.join(format!("dynamics_{}.csv", file_safe(obj)));
                write_table(&path, "step", &steps, &cols)?;
                written.push(path);
            }
        }
        Figure::Factors => {
            type Getter = fn(&StepRecord) -> Option<&Vec<f64>>;
            let factors: [(&str, Getter); 5] = [
                ("lp", |r| r.lp.as_ref()),
                ("cp", |r| r.cp.as_ref()),
                ("pn", |r| r.pn.as_ref()),
                ("psi", |r| r.psi.as_ref()),
                ("weights", |r| Some(&r.weights)),
            ];
            for (name, get) in factors {
                let mut cols = Vec::new();
                for (log, l) in logs.iter().zip(&labels) {
                    for (k, obj) in objectives.iter().enumerate() {
                        let v = series(log, len, |r| get(r).and_then(|f| f.get(k).copied()));
                        cols.push(column(format!("{l}_{obj}"), v, smoothing));
                    }
                }
                let path = out_dir.join(format!("factors_{name}.csv"));
                write_table(&path, "step", &steps, &cols)?;
                written.push(path);
            }
        }
        Figure::Hv => {
            let reference = read_summary(&run_dirs[0])?.reference;
            let mut cols = Vec::new();
            let mut windows = 0;
            for ((log, cfg), l) in logs.iter().zip(&configs).zip(&labels) {
                let s = summarize(cfg, &reference, log)?;
                windows = windows.max(s.windowed_hv.len());
                cols.push(Column {
                    name: format!("{l}_hv"),
                    values: s.windowed_hv.iter().map(|w| Some(w.1)).collect(),
                });
            }
            let path = out_dir.join("hv.csv");
            write_table(&path, "window", &(0..windows as u64).collect::<Vec<_>>(), &cols)?;
            written.push(path);
        }
        Figure::Variance => {
            let cols: Vec<Column> = logs
                .iter()
                .zip(&labels)
                .map(|(log, l)| {
                    column(format!("{l}_pre_norm_variance"), series(log, len, |r| Some(r.pre_norm_variance)), smoothing)
                })
                .collect();
            let path = out_dir.join("variance.csv");
            write_table(&path, "step", &steps, &cols)?;
            written.push(path);
        }
        Figure::Stability => {
            let mut cols = Vec::new();
            for (log, l) in logs.iter().zip(&labels) {
                cols.push(column(format!("{l}_kl"), series(log, len, |r| Some(r.mean_kl_to_ref)), smoothing));
                cols.push(column(format!("{l}_clip_fraction"), series(log, len, |r| Some(r.clip_fraction)), smoothing));
            }
            let path = out_dir.join("stability.csv");
            write_table(&path, "step", &steps, &cols)?;
            written.push(path);
        }
    }
    Ok(written)
}
