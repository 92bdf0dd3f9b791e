//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! mode = apex
//! seed = 7
//! reward.0.kind = discrete_region
//! reward.0.center = 1.0, 0.0
//! ```
//!
//! Every key has a default; [`RunConfig::snapshot`] prints all of them in a
//! fixed order and parses back to the same configuration.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flowmatch::{Context, Mode, NoiseSchedule, TimeGrid};
use crate::grpo::{AdvantageScheme, ClipConfig};
use crate::pareto::ReferencePoint;
use crate::rewards::{self, RewardKind, RewardSpec, UtopiaSource};
use crate::scheduler::{FactorGates, SchedulerConfig, WeightingMode};

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Apex,
    Static,
    WoDsan,
    OnlyLp,
    WoLp,
    WoCp,
    WoPn,
    Specialist(usize),
}

impl RunMode {
    pub fn weighting(self) -> WeightingMode {
        let adaptive = |lp, cp, pn| WeightingMode::Adaptive { gates: FactorGates { lp, cp, pn } };
        match self {
            RunMode::Apex | RunMode::WoDsan => adaptive(true, true, true),
            RunMode::Static => WeightingMode::Static,
            RunMode::OnlyLp => adaptive(true, false, false),
            RunMode::WoLp => adaptive(false, true, true),
            RunMode::WoCp => adaptive(true, false, true),
            RunMode::WoPn => adaptive(true, true, false),
            RunMode::Specialist(k) => WeightingMode::Specialist { objective: k },
        }
    }

    pub fn advantages(self) -> AdvantageScheme {
        match self {
            RunMode::Static | RunMode::WoDsan => AdvantageScheme::Naive,
            _ => AdvantageScheme::Dsan,
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self.weighting(), WeightingMode::Adaptive { .. })
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunMode::Apex => f.write_str("apex"),
            RunMode::Static => f.write_str("static"),
            RunMode::WoDsan => f.write_str("wo_dsan"),
            RunMode::OnlyLp => f.write_str("only_lp"),
            RunMode::WoLp => f.write_str("wo_lp"),
            RunMode::WoCp => f.write_str("wo_cp"),
            RunMode::WoPn => f.write_str("wo_pn"),
            RunMode::Specialist(k) => write!(f, "specialist_{k}"),
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "apex" => RunMode::Apex,
            "static" => RunMode::Static,
            "wo_dsan" => RunMode::WoDsan,
            "only_lp" => RunMode::OnlyLp,
            "wo_lp" => RunMode::WoLp,
            "wo_cp" => RunMode::WoCp,
            "wo_pn" => RunMode::WoPn,
            other => match other.strip_prefix("specialist_").map(str::parse::<usize>) {
                Some(Ok(k)) => RunMode::Specialist(k),
                _ => return Err(Error::config(format!("unknown mode '{s}'"))),
            },
        })
    }
}

/// Reference point for hypervolume in normalized reward units.
#[derive(Debug, Clone, PartialEq)]
pub enum HvReference {
    /// Mean rewards of the initial policy.
    Initial,
    /// The text-to-image base-model preset.
    Base,
    /// The text-to-image early-checkpoint preset.
    Early,
    Explicit(Vec<f64>),
}

impl fmt::Display for HvReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HvReference::Initial => f.write_str("initial"),
            HvReference::Base => f.write_str("base"),
            HvReference::Early => f.write_str("early"),
            HvReference::Explicit(v) => f.write_str(&join(v)),
        }
    }
}

impl HvReference {
    pub fn preset(&self) -> Option<Vec<f64>> {
        match self {
            HvReference::Base => Some(ReferencePoint::base()),
            HvReference::Early => Some(ReferencePoint::early()),
            HvReference::Explicit(v) => Some(v.clone()),
            HvReference::Initial => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub group_size: usize,
    pub contexts_per_step: usize,
    pub steps: u64,
    pub time_steps: usize,
    pub tau: f64,
    pub gamma: f64,
    pub eps: f64,
    pub eps_clip: f64,
    pub beta_kl: f64,
    pub lr: f64,
    pub epochs: usize,
    pub noise_a: f64,
    pub noise_clamp: f64,
    pub scheduler_every: u64,
    pub microbatch: usize,
    pub hv_window: usize,
    pub hv_reference: HvReference,
    pub eval_samples: usize,
    pub utopia_source: UtopiaSource,
    pub utopia_values: Vec<f64>,
    pub utopia_specialist_steps: u64,
    pub policy_dim: usize,
    pub policy_features: usize,
    pub policy_feature_seed: u64,
    pub policy_init_scale: f64,
    pub context_count: usize,
    pub context_spread: f64,
    pub checkpoint_every: u64,
    pub log_wall_time: bool,
    pub rewards: Vec<RewardSpec>,
}

/// Utopia points of the default benchmark: each reward's `r_max`.
pub const DEFAULT_UTOPIA: [f64; 4] = [1.0, 1.0, 1.0, 1.0];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Apex,
            seed: 0,
            group_size: 24,
            contexts_per_step: 4,
            steps: 600,
            time_steps: 10,
            tau: 1.0,
            gamma: 0.8,
            eps: 1e-8,
            eps_clip: 0.2,
            beta_kl: 0.01,
            lr: 3e-4,
            epochs: 1,
            noise_a: 0.7,
            noise_clamp: NoiseSchedule::default().clamp_delta,
            scheduler_every: 1,
            microbatch: 8,
            hv_window: 50,
            hv_reference: HvReference::Initial,
            eval_samples: 2048,
            utopia_source: UtopiaSource::Configured,
            utopia_values: DEFAULT_UTOPIA.to_vec(),
            utopia_specialist_steps: 600,
            policy_dim: 2,
            policy_features: 64,
            policy_feature_seed: 17,
            policy_init_scale: 0.0,
            context_count: 8,
            context_spread: 0.3,
            checkpoint_every: 100,
            log_wall_time: false,
            rewards: rewards::default_benchmark(),
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| Error::config(format!("{key} = {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse::<f64>(key, s)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} expects true/false, got {value:?}"))),
    }
}

/// Parses `key = value` lines into a map; later duplicates are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_pairs(mut pairs: BTreeMap<String, String>) -> Result<Self> {
        let mut c = RunConfig::default();
        let reward_pairs: BTreeMap<String, String> = {
            let keys: Vec<String> = pairs.keys().filter(|k| k.starts_with("reward.")).cloned().collect();
            keys.into_iter().map(|k| (k.clone(), pairs.remove(&k).unwrap())).collect()
        };
        let mut objectives: Option<usize> = None;
        for (k, v) in &pairs {
            let v = v.as_str();
            match k.as_str() {
                "mode" => c.mode = v.parse()?,
                "seed" => c.seed = parse(k, v)?,
                "objectives" => objectives = Some(parse(k, v)?),
                "group_size" => c.group_size = parse(k, v)?,
                "contexts_per_step" => c.contexts_per_step = parse(k, v)?,
                "steps" => c.steps = parse(k, v)?,
                "time_steps" => c.time_steps = parse(k, v)?,
                "tau" => c.tau = parse(k, v)?,
                "gamma" => c.gamma = parse(k, v)?,
                "eps" => c.eps = parse(k, v)?,
                "eps_clip" => c.eps_clip = parse(k, v)?,
                "beta_kl" => c.beta_kl = parse(k, v)?,
                "lr" => c.lr = parse(k, v)?,
                "epochs" => c.epochs = parse(k, v)?,
                "noise.a" => c.noise_a = parse(k, v)?,
                "noise.clamp_delta" => c.noise_clamp = parse(k, v)?,
                "scheduler.every" => c.scheduler_every = parse(k, v)?,
                "scheduler.microbatch" => c.microbatch = parse(k, v)?,
                "hv.window" => c.hv_window = parse(k, v)?,
                "hv.reference" => {
                    c.hv_reference = match v {
                        "initial" => HvReference::Initial,
                        "base" => HvReference::Base,
                        "early" => HvReference::Early,
                        _ => HvReference::Explicit(parse_list(k, v)?),
                    }
                }
                "eval.samples" => c.eval_samples = parse(k, v)?,
                "utopia.source" => {
                    c.utopia_source = match v {
                        "configured" => UtopiaSource::Configured,
                        "specialist_run" => UtopiaSource::SpecialistRun,
                        _ => return Err(Error::config(format!("unknown utopia.source '{v}'"))),
                    }
                }
                "utopia.values" => c.utopia_values = parse_list(k, v)?,
                "utopia.specialist_steps" => c.utopia_specialist_steps = parse(k, v)?,
                "policy.dim" => c.policy_dim = parse(k, v)?,
                "policy.features" => c.policy_features = parse(k, v)?,
                "policy.feature_seed" => c.policy_feature_seed = parse(k, v)?,
                "policy.init_scale" => c.policy_init_scale = parse(k, v)?,
                "contexts.count" => c.context_count = parse(k, v)?,
                "contexts.spread" => c.context_spread = parse(k, v)?,
                "checkpoint.every" => c.checkpoint_every = parse(k, v)?,
                "log.wall_time" => c.log_wall_time = parse_bool(k, v)?,
                _ => return Err(Error::config(format!("unknown key '{k}'"))),
            }
        }
        if !reward_pairs.is_empty() {
            c.rewards = parse_rewards(&reward_pairs)?;
        }
        if let Some(k) = objectives {
            if k != c.rewards.len() {
                return Err(Error::config(format!("objectives = {k} but {} rewards are configured", c.rewards.len())));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn objectives(&self) -> usize {
        self.rewards.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.objectives();
        if k < 2 {
            return Err(Error::config("at least two rewards are required"));
        }
        for r in &self.rewards {
            r.validate(self.policy_dim)?;
        }
        if let RunMode::Specialist(i) = self.mode {
            if i >= k {
                return Err(Error::config(format!("specialist_{i} needs i < K = {k}")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if self.contexts_per_step == 0 || self.context_count == 0 {
            return Err(Error::config("contexts_per_step and contexts.count must be positive"));
        }
        if self.mode.is_adaptive() && self.microbatch < 2 {
            return Err(Error::config("scheduler.microbatch must be at least 2"));
        }
        if self.scheduler_every == 0 || self.epochs == 0 || self.hv_window == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("scheduler.every, epochs, hv.window and checkpoint.every must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.lr > 0.0) {
            return Err(Error::config("eps and lr must be positive"));
        }
        if self.policy_dim == 0 || self.policy_features == 0 {
            return Err(Error::config("policy.dim and policy.features must be positive"));
        }
        if !(self.policy_init_scale >= 0.0) || !(self.context_spread >= 0.0) {
            return Err(Error::config("policy.init_scale and contexts.spread must be non-negative"));
        }
        if self.eval_samples < 2 {
            return Err(Error::config("eval.samples must be at least 2"));
        }
        if self.utopia_source == UtopiaSource::Configured && self.utopia_values.len() != k {
            return Err(Error::config(format!("utopia.values has {} entries for K = {k}", self.utopia_values.len())));
        }
        if let Some(r) = self.hv_reference.preset() {
            if r.len() != k {
                return Err(Error::config(format!("hv.reference has {} entries for K = {k}", r.len())));
            }
        }
        self.clip().validate()?;
        self.grid()?;
        self.noise()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time_steps).map_err(|e| Error::config(e.to_string()))
    }

    pub fn noise(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.noise_a, self.noise_clamp).map_err(|e| Error::config(e.to_string()))
    }

    pub fn clip(&self) -> ClipConfig {
        ClipConfig { eps_clip: self.eps_clip, beta_kl: self.beta_kl }
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig { mode: self.mode.weighting(), tau: self.tau, gamma: self.gamma, eps: self.eps }
    }

    /// The context pool: evenly spaced offsets on a circle of radius
    /// `contexts.spread` in the first two coordinates.
    pub fn contexts(&self) -> Vec<Context> {
        (0..self.context_count)
            .map(|i| {
                let mut center = vec![0.0; self.policy_dim];
                let angle = 2.0 * std::f64::consts::PI * i as f64 / self.context_count as f64;
                center[0] = self.context_spread * angle.cos();
                if self.policy_dim > 1 {
                    center[1] = self.context_spread * angle.sin();
                }
                Context { id: i as u64, target_modes: vec![Mode { center, scale: 1.0 }] }
            })
            .collect()
    }

    /// Every key with its effective value, in a fixed order.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("seed", self.seed.to_string());
        put("objectives", self.objectives().to_string());
        put("group_size", self.group_size.to_string());
        put("contexts_per_step", self.contexts_per_step.to_string());
        put("steps", self.steps.to_string());
        put("time_steps", self.time_steps.to_string());
        put("tau", self.tau.to_string());
        put("gamma", self.gamma.to_string());
        put("eps", self.eps.to_string());
        put("eps_clip", self.eps_clip.to_string());
        put("beta_kl", self.beta_kl.to_string());
        put("lr", self.lr.to_string());
        put("epochs", self.epochs.to_string());
        put("noise.a", self.noise_a.to_string());
        put("noise.clamp_delta", self.noise_clamp.to_string());
        put("scheduler.every", self.scheduler_every.to_string());
        put("scheduler.microbatch", self.microbatch.to_string());
        put("hv.window", self.hv_window.to_string());
        put("hv.reference", self.hv_reference.to_string());
        put("eval.samples", self.eval_samples.to_string());
        put(
            "utopia.source",
            match self.utopia_source {
                UtopiaSource::Configured => "configured".into(),
                UtopiaSource::SpecialistRun => "specialist_run".into(),
            },
        );
        put("utopia.values", join(&self.utopia_values));
        put("utopia.specialist_steps", self.utopia_specialist_steps.to_string());
        put("policy.dim", self.policy_dim.to_string());
        put("policy.features", self.policy_features.to_string());
        put("policy.feature_seed", self.policy_feature_seed.to_string());
        put("policy.init_scale", self.policy_init_scale.to_string());
        put("contexts.count", self.context_count.to_string());
        put("contexts.spread", self.context_spread.to_string());
        put("checkpoint.every", self.checkpoint_every.to_string());
        put("log.wall_time", self.log_wall_time.to_string());
        for (i, r) in self.rewards.iter().enumerate() {
            let p = format!("reward.{i}");
            put(&format!("{p}.name"), r.name.clone());
            put(&format!("{p}.r_max"), r.r_max.to_string());
            match &r.kind {
                RewardKind::DiscreteRegion { center, radius, payoff } => {
                    put(&format!("{p}.kind"), "discrete_region".into());
                    put(&format!("{p}.center"), join(center));
                    put(&format!("{p}.radius"), radius.to_string());
                    put(&format!("{p}.payoff"), payoff.to_string());
                }
                RewardKind::SmoothRadial { center, bandwidth } => {
                    put(&format!("{p}.kind"), "smooth_radial".into());
                    put(&format!("{p}.center"), join(center));
                    put(&format!("{p}.bandwidth"), bandwidth.to_string());
                }
                RewardKind::Directional { direction, scale } => {
                    put(&format!("{p}.kind"), "directional".into());
                    put(&format!("{p}.direction"), join(direction));
                    put(&format!("{p}.scale"), scale.to_string());
                }
                RewardKind::Ridge { point, axis, width } => {
                    put(&format!("{p}.kind"), "ridge".into());
                    put(&format!("{p}.point"), join(point));
                    put(&format!("{p}.axis"), join(axis));
                    put(&format!("{p}.width"), width.to_string());
                }
            }
        }
        s
    }
}

fn parse_rewards(pairs: &BTreeMap<String, String>) -> Result<Vec<RewardSpec>> {
    let mut by_index: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
    for (k, v) in pairs {
        let mut parts = k.splitn(3, '.');
        let (_, idx, field) = (parts.next(), parts.next(), parts.next());
        let idx: usize = idx
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::config(format!("reward key '{k}' needs an index")))?;
        let field = field.ok_or_else(|| Error::config(format!("reward key '{k}' needs a field")))?;
        by_index.entry(idx).or_default().insert(field.to_string(), v.clone());
    }
    if by_index.keys().copied().ne(0..by_index.len()) {
        return Err(Error::config("reward indices must be contiguous from 0"));
    }
    by_index
        .into_iter()
        .map(|(i, mut f)| {
            let mut take =
                |name: &str| f.remove(name).ok_or_else(|| Error::config(format!("reward.{i}.{name} is missing")));
            let kind_name = take("kind")?;
            let name = take("name").unwrap_or_else(|_| format!("objective_{i}"));
            let r_max = match take("r_max") {
                Ok(v) => parse(&format!("reward.{i}.r_max"), &v)?,
                Err(_) => 1.0,
            };
            let key = |field: &str| format!("reward.{i}.{field}");
            let kind = match kind_name.as_str() {
                "discrete_region" => RewardKind::DiscreteRegion {
                    center: parse_list(&key("center"), &take("center")?)?,
                    radius: parse(&key("radius"), &take("radius")?)?,
                    payoff: parse(&key("payoff"), &take("payoff")?)?,
                },
                "smooth_radial" => RewardKind::SmoothRadial {
                    center: parse_list(&key("center"), &take("center")?)?,
                    bandwidth: parse(&key("bandwidth"), &take("bandwidth")?)?,
                },
                "directional" => RewardKind::Directional {
                    direction: parse_list(&key("direction"), &take("direction")?)?,
                    scale: parse(&key("scale"), &take("scale")?)?,
                },
                "ridge" => RewardKind::Ridge {
                    point: parse_list(&key("point"), &take("point")?)?,
                    axis: parse_list(&key("axis"), &take("axis")?)?,
                    width: parse(&key("width"), &take("width")?)?,
                },
                other => return Err(Error::config(format!("reward.{i}.kind: unknown kind '{other}'"))),
            };
            if let Some(extra) = f.keys().next() {
                return Err(Error::config(format!("reward.{i}.{extra} does not apply to {kind_name}")));
            }
            Ok(RewardSpec { name, kind, r_max })
        })
        .collect()
}
