use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunMode};
use crate::error::{Error, Result};
use crate::flowmatch::FlowPolicyParams;
use crate::grpo::{self, RolloutStreams, StepData, StreamCoords, TrainingSetup, TrainingState};
use crate::pareto::{self, NormalizationSpec};
use crate::rewards::{self, RewardVector, UtopiaPoints, UtopiaSource};

pub const RECORD_SCHEMA: u32 = 1;
const CHECKPOINT_SCHEMA: u32 = 1;

/// One line of `records.jsonl`. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema: u32,
    pub step: u64,
    pub mode: String,
    pub weights: Vec<f64>,
    pub lp: Option<Vec<f64>>,
    pub cp: Option<Vec<f64>>,
    pub pn: Option<Vec<f64>>,
    pub psi: Option<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub pre_norm_variance: f64,
    pub mean_kl_to_ref: f64,
    pub clip_fraction: f64,
    pub loss: f64,
    pub wall_time_ms: Option<f64>,
}

impl StepRecord {
    fn check_finite(&self) -> Result<()> {
        let mut all: Vec<f64> = self.weights.iter().chain(&self.rewards).copied().collect();
        for f in [&self.lp, &self.cp, &self.pn, &self.psi].into_iter().flatten() {
            all.extend(f);
        }
        all.extend([self.pre_norm_variance, self.mean_kl_to_ref, self.clip_fraction, self.loss]);
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite value in the record of step {}", self.step)));
        }
        Ok(())
    }
}

/// Fixed quantities derived from the configuration before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReference {
    /// Mean rewards of the initial policy, normalized by `r_max`.
    pub initial_means: Vec<f64>,
    pub hv_reference: Vec<f64>,
    pub utopia: UtopiaPoints,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: u32,
    reference: RunReference,
    state: TrainingState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub steps: u64,
    pub objectives: Vec<String>,
    /// Mean rewards over the final window.
    pub final_means: Vec<f64>,
    pub reference: RunReference,
    pub windowed_hv: Vec<(usize, f64)>,
    pub final_hv: f64,
    /// Product of normalized per-objective gains over the initial policy.
    pub product_improvement_hv: f64,
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    kind: &'a str,
    step: u64,
    message: String,
}

/// Training loop over a configuration, independent of any files.
pub struct Runner {
    pub config: RunConfig,
    pub setup: TrainingSetup,
    pub state: TrainingState,
    pub reference: RunReference,
}

pub fn initial_params(config: &RunConfig) -> FlowPolicyParams {
    FlowPolicyParams::random(
        config.policy_feature_seed,
        config.policy_dim,
        config.policy_features,
        config.policy_init_scale,
        config.seed,
    )
}

fn build_setup(config: &RunConfig, utopia: UtopiaPoints) -> Result<TrainingSetup> {
    let setup = TrainingSetup {
        run_seed: config.seed,
        grid: config.grid()?,
        sched: config.noise()?,
        specs: config.rewards.clone(),
        contexts: config.contexts(),
        utopia,
        group_size: config.group_size,
        contexts_per_step: config.contexts_per_step,
        microbatch_size: config.microbatch,
        clip: config.clip(),
        scheduler: config.scheduler(),
        advantages: config.mode.advantages(),
        scheduler_every: config.scheduler_every,
        epochs: config.epochs,
    };
    setup.validate()?;
    Ok(setup)
}

/// Normalized mean rewards of `params` over `eval.samples` draws spread
/// evenly across the context pool.
pub fn evaluate_policy(config: &RunConfig, params: &FlowPolicyParams, tag: u64) -> Result<Vec<f64>> {
    let contexts = config.contexts();
    let per = (config.eval_samples / contexts.len()).max(2);
    let grid = config.grid()?;
    let sched = config.noise()?;
    let mut all = Vec::with_capacity(per * contexts.len());
    for (slot, ctx) in contexts.iter().enumerate() {
        let g = grpo::collect_group(
            params,
            ctx,
            &config.rewards,
            per,
            &grid,
            &sched,
            StreamCoords { run_seed: config.seed, step: tag, slot: slot as u64, family: RolloutStreams::Evaluation },
        )?;
        all.extend(g.reward_vectors());
    }
    let mean = rewards::batch_running_performance(&all)?;
    Ok(normalize(config, &mean.r_bar))
}

fn normalize(config: &RunConfig, raw: &[f64]) -> Vec<f64> {
    raw.iter().zip(&config.rewards).map(|(r, s)| r / s.r_max).collect()
}

fn specialist_utopia(config: &RunConfig) -> Result<UtopiaPoints> {
    let mut traces = Vec::with_capacity(config.objectives());
    for k in 0..config.objectives() {
        let mut sub = config.clone();
        sub.mode = RunMode::Specialist(k);
        sub.steps = config.utopia_specialist_steps;
        sub.utopia_source = UtopiaSource::Configured;
        sub.utopia_values = vec![1.0; config.objectives()];
        let mut runner = Runner::new(sub)?;
        let mut trace = Vec::with_capacity(config.utopia_specialist_steps as usize);
        for _ in 0..config.utopia_specialist_steps {
            let rec = runner.step()?;
            trace.push(rec.rewards[k] / config.rewards[k].r_max);
        }
        traces.push(trace);
    }
    rewards::estimate_utopia(&traces, config.hv_window, None)
}

impl Runner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let utopia = match config.utopia_source {
            UtopiaSource::Configured => UtopiaPoints::configured(config.utopia_values.clone())?,
            UtopiaSource::SpecialistRun => specialist_utopia(&config)?,
        };
        let params = initial_params(&config);
        let initial_means = evaluate_policy(&config, &params, u64::MAX)?;
        let hv_reference = config.hv_reference.preset().unwrap_or_else(|| initial_means.clone());
        let setup = build_setup(&config, utopia.clone())?;
        let state = TrainingState::new(params, config.lr, config.objectives(), &setup.scheduler);
        Ok(Self { config, setup, state, reference: RunReference { initial_means, hv_reference, utopia } })
    }

    fn from_checkpoint(config: RunConfig, cp: Checkpoint) -> Result<Self> {
        config.validate()?;
        let setup = build_setup(&config, cp.reference.utopia.clone())?;
        Ok(Self { config, setup, state: cp.state, reference: cp.reference })
    }

    /// One training step and its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        self.step_with_data().map(|(r, _)| r)
    }

    pub fn step_with_data(&mut self) -> Result<(StepRecord, StepData)> {
        let started = Instant::now();
        let (d, data) = grpo::training_step_with_data(&mut self.state, &self.setup)?;
        let f = d.factors.as_ref();
        let rec = StepRecord {
            schema: RECORD_SCHEMA,
            step: d.step,
            mode: self.config.mode.to_string(),
            weights: d.weights,
            lp: f.map(|f| f.lp.clone()),
            cp: f.map(|f| f.cp.clone()),
            pn: f.map(|f| f.pn.clone()),
            psi: f.map(|f| f.psi.clone()),
            rewards: d.batch_mean_rewards,
            pre_norm_variance: d.pre_norm_variance,
            mean_kl_to_ref: d.mean_kl_to_ref,
            clip_fraction: d.clip_fraction,
            loss: d.loss,
            wall_time_ms: self.config.log_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        rec.check_finite()?;
        Ok((rec, data))
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint { schema: CHECKPOINT_SCHEMA, reference: self.reference.clone(), state: self.state.clone() }
    }

    /// Summary statistics of a finished (or partial) record stream.
    pub fn summarize(&self, records: &[StepRecord]) -> Result<RunSummary> {
        summarize(&self.config, &self.reference, records)
    }
}

pub fn summarize(config: &RunConfig, reference: &RunReference, records: &[StepRecord]) -> Result<RunSummary> {
    let log: Vec<Vec<f64>> = records.iter().map(|r| normalize(config, &r.rewards)).collect();
    let k = config.objectives();
    let windowed_hv = pareto::windowed_cumulative_hv(
        &log,
        config.hv_window,
        &reference.hv_reference,
        &NormalizationSpec::identity(k),
    )?;
    let tail = &log[log.len().saturating_sub(config.hv_window)..];
    let final_means: Vec<f64> = if tail.is_empty() {
        reference.initial_means.clone()
    } else {
        (0..k).map(|j| tail.iter().map(|r| r[j]).sum::<f64>() / tail.len() as f64).collect()
    };
    Ok(RunSummary {
        mode: config.mode.to_string(),
        seed: config.seed,
        steps: records.len() as u64,
        objectives: config.rewards.iter().map(|r| r.name.clone()).collect(),
        product_improvement_hv: pareto::product_improvement_hv(&final_means, &reference.initial_means)?,
        final_hv: windowed_hv.last().map(|w| w.1).unwrap_or(0.0),
        windowed_hv,
        final_means,
        reference: reference.clone(),
    })
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:08}.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_failure(dir: &Path, step: u64, e: &Error) {
    let rec = FailureRecord { kind: e.kind(), step, message: e.to_string() };
    if let Err(err) = write_json(&dir.join("failure.json"), &rec) {
        log::error!("could not write failure record: {err}");
    }
}

fn drive(
    runner: &mut Runner,
    dir: &Path,
    mut records: Vec<StepRecord>,
    mut out: BufWriter<File>,
) -> Result<RunSummary> {
    let total = runner.config.steps;
    while runner.state.step < total {
        let step = runner.state.step;
        let rec = match runner.step() {
            Ok(r) => r,
            Err(e) => {
                out.flush()?;
                write_failure(dir, step, &e);
                return Err(e);
            }
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        records.push(rec);
        let done = runner.state.step;
        if done.is_multiple_of(runner.config.checkpoint_every) || done == total {
            out.flush()?;
            write_json(&checkpoint_path(dir, done), &runner.checkpoint())?;
            log::info!("{}: step {done}/{total}", runner.config.mode);
        }
    }
    out.flush()?;
    let summary = runner.summarize(&records)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Executes a configured run into `dir`: `config.txt`, `records.jsonl`,
/// `checkpoints/`, `summary.json` (or `failure.json`).
pub fn run(config: RunConfig, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    let _ = fs::remove_file(dir.join("failure.json"));
    fs::write(dir.join("config.txt"), config.snapshot())?;
    let mut runner = match Runner::new(config) {
        Ok(r) => r,
        Err(e) => {
            write_failure(dir, 0, &e);
            return Err(e);
        }
    };
    let out = BufWriter::new(File::create(dir.join("records.jsonl"))?);
    drive(&mut runner, dir, Vec::new(), out)
}

/// Latest checkpoint in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let cdir = dir.join("checkpoints");
    if !cdir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(cdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Continues a run from a checkpoint (the latest one by default), trimming
/// the record stream back to the checkpoint first. `steps` overrides the
/// configured total.
pub fn resume(dir: &Path, checkpoint: Option<&Path>, steps: Option<u64>) -> Result<RunSummary> {
    let mut config = RunConfig::from_file(&dir.join("config.txt"))?;
    if let Some(s) = steps {
        config.steps = s;
    }
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(dir)?.ok_or_else(|| Error::config(format!("no checkpoint in {}", dir.display())))?,
    };
    let cp: Checkpoint = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    if cp.schema != CHECKPOINT_SCHEMA {
        return Err(Error::config(format!("checkpoint schema {} is not supported", cp.schema)));
    }
    let mut runner = Runner::from_checkpoint(config, cp)?;
    let mut records = read_records(dir)?;
    let keep = runner.state.step as usize;
    if records.len() < keep {
        return Err(Error::config(format!(
            "record stream has {} steps but the checkpoint is at step {keep}",
            records.len()
        )));
    }
    records.truncate(keep);
    let mut out = BufWriter::new(OpenOptions::new().write(true).truncate(true).open(dir.join("records.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    let _ = fs::remove_file(dir.join("failure.json"));
    drive(&mut runner, dir, records, out)
}

pub fn read_records(dir: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(dir.join("records.jsonl"))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord =
            serde_json::from_str(&line).map_err(|e| Error::config(format!("records.jsonl line {}: {e}", i + 1)))?;
        if rec.schema != RECORD_SCHEMA {
            return Err(Error::config(format!("record schema {} is not supported", rec.schema)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_reader(BufReader::new(File::open(dir.join("summary.json"))?))?)
}

/// Mean rewards of a record stream (for quick inspection).
pub fn mean_rewards(records: &[StepRecord]) -> Option<RewardVector> {
    let v: Vec<RewardVector> = records.iter().map(|r| RewardVector { values: r.rewards.clone() }).collect();
    rewards::batch_running_performance(&v).ok().map(|m| RewardVector { values: m.r_bar })
}
