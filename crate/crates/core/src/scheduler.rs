//! Adaptive objective priorities.
//!
//! Each objective gets a priority `Ψ_k = LP_k · CP_k^α · PN_k^β` built from
//!
//! * learning potential `LP_k = ‖g_k‖ / (Σ_ℓ ‖g_ℓ‖ + ε)`,
//! * conflict penalty `CP_k = 1 + (K−1)⁻¹ Σ_{ℓ≠k} min(0, cos(g_k, g_ℓ))`,
//! * progress need `PN_k = 1 + max(0, (U_k − R̄_k) / (U_k + ε))`,
//!
//! where `g_k` are EMA-smoothed per-objective policy gradients. Weights are
//! the temperature softmax of `Ψ`. Since `Ψ ∈ [0, 2]`, the weights obey
//! `max w / min w ≤ exp(2/τ)` and `‖Δw‖₁ ≤ 2(1 − exp(−2/τ))`; both bounds are
//! checked after every update.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dsan;
use crate::error::{Error, Result};
use crate::flowmatch::{self, FlowPolicyParams, NoiseSchedule, TimeGrid, Trajectory};
use crate::rewards::{RewardVector, RunningPerformance, UtopiaPoints};
use crate::stats;

/// Slack allowed on the weight bounds.
pub const BOUND_TOLERANCE: f64 = 1e-6;

/// Raw and EMA-smoothed per-objective gradient estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimates {
    pub raw: Vec<Vec<f64>>,
    pub ema: Vec<Vec<f64>>,
    pub gamma: f64,
    pub initialized: Vec<bool>,
}

impl GradientEstimates {
    pub fn new(objectives: usize, num_params: usize, gamma: f64) -> Self {
        Self {
            raw: vec![vec![0.0; num_params]; objectives],
            ema: vec![vec![0.0; num_params]; objectives],
            gamma,
            initialized: vec![false; objectives],
        }
    }

    /// `ema ← γ·ema + (1−γ)·raw`; the first update copies `raw`.
    pub fn ema_update(&mut self, raw: Vec<Vec<f64>>) -> Result<()> {
        if raw.len() != self.ema.len() || raw.iter().zip(&self.ema).any(|(r, e)| r.len() != e.len()) {
            return Err(Error::contract("gradient estimate shape mismatch"));
        }
        let g = self.gamma;
        for k in 0..raw.len() {
            if self.initialized[k] {
                for (e, r) in self.ema[k].iter_mut().zip(&raw[k]) {
                    *e = g * *e + (1.0 - g) * r;
                }
            } else {
                self.ema[k].clone_from(&raw[k]);
                self.initialized[k] = true;
            }
        }
        if self.ema.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite EMA gradient"));
        }
        self.raw = raw;
        Ok(())
    }
}

/// Sum over a trajectory of `∇_W log π(x_{t−1} | x_t)`.
pub fn trajectory_score(
    params: &FlowPolicyParams,
    traj: &Trajectory,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    traj.check_grid(grid)?;
    let mut score = vec![0.0; params.num_params()];
    for i in 0..traj.steps() {
        flowmatch::log_prob_step_with_grad(
            params,
            &traj.states[i],
            &traj.states[i + 1],
            traj.node_of(i),
            grid,
            sched,
            1.0,
            &mut score,
        )?;
    }
    Ok(score)
}

/// Score-function estimate of `∇_θ J_k` for every objective:
/// `(1/N) Σ_i Ã_k^(i) Σ_t ∇ log π(x_{t−1}^(i) | x_t^(i))` with `Ã_k` the
/// group-standardized reward of objective `k` over the micro-batch.
pub fn estimate_objective_gradients(
    params: &FlowPolicyParams,
    microbatch: &[(Trajectory, RewardVector)],
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    if microbatch.len() < 2 {
        return Err(Error::domain(format!(
            "gradient estimation needs a micro-batch of at least 2, got {}",
            microbatch.len()
        )));
    }
    let rows: Vec<Vec<f64>> = microbatch.iter().map(|(_, r)| r.values.clone()).collect();
    let adv = dsan::stage1_standardize(&dsan::GroupRewards::new(&rows)?, eps)?;
    let k = adv.cols();
    let n = microbatch.len() as f64;
    let mut grads = vec![vec![0.0; params.num_params()]; k];
    for (i, (traj, _)) in microbatch.iter().enumerate() {
        let score = trajectory_score(params, traj, grid, sched)?;
        for (obj, g) in grads.iter_mut().enumerate() {
            let a = adv.get(i, obj) / n;
            if a != 0.0 {
                for (gi, si) in g.iter_mut().zip(&score) {
                    *gi += a * si;
                }
            }
        }
    }
    Ok(grads)
}

pub fn learning_potential(grads: &[Vec<f64>], eps: f64) -> Vec<f64> {
    let norms: Vec<f64> = grads.iter().map(|g| stats::l2_norm(g)).collect();
    let total: f64 = norms.iter().sum();
    norms.iter().map(|n| n / (total + eps)).collect()
}

pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    stats::dot(a, b) / (stats::l2_norm(a) * stats::l2_norm(b) + eps)
}

pub fn conflict_penalty(grads: &[Vec<f64>], eps: f64) -> Vec<f64> {
    let k = grads.len();
    if k < 2 {
        return vec![1.0; k];
    }
    let norms: Vec<f64> = grads.iter().map(|g| stats::l2_norm(g)).collect();
    let mut neg = vec![0.0; k];
    for a in 0..k {
        for b in a + 1..k {
            let c = stats::dot(&grads[a], &grads[b]) / (norms[a] * norms[b] + eps);
            let m = c.min(0.0);
            neg[a] += m;
            neg[b] += m;
        }
    }
    // rounding in the cosine can push it a hair below -1
    neg.iter().map(|s| (1.0 + s / (k - 1) as f64).clamp(0.0, 1.0)).collect()
}

pub fn progress_need(r_bar: &RunningPerformance, utopia: &UtopiaPoints, eps: f64) -> Result<Vec<f64>> {
    if r_bar.r_bar.len() != utopia.u.len() {
        return Err(Error::contract("running performance and utopia have different lengths"));
    }
    r_bar
        .r_bar
        .iter()
        .zip(&utopia.u)
        .map(|(&r, &u)| {
            if !(u > 0.0) {
                return Err(Error::config(format!("utopia point {u} must be positive")));
            }
            if !(r >= 0.0) {
                return Err(Error::domain(format!("running performance {r} is negative")));
            }
            Ok(1.0 + ((u - r) / (u + eps)).max(0.0))
        })
        .collect()
}

/// Which factors enter the priority product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorGates {
    pub lp: bool,
    /// `α`: exponent of the conflict penalty.
    pub cp: bool,
    /// `β`: exponent of the progress need.
    pub pn: bool,
}

impl FactorGates {
    pub const FULL: FactorGates = FactorGates { lp: true, cp: true, pn: true };
    pub const ONLY_LP: FactorGates = FactorGates { lp: true, cp: false, pn: false };

    pub fn alpha(&self) -> u8 {
        self.cp as u8
    }

    pub fn beta(&self) -> u8 {
        self.pn as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityFactors {
    pub lp: Vec<f64>,
    pub cp: Vec<f64>,
    pub pn: Vec<f64>,
    pub psi: Vec<f64>,
    pub gates: FactorGates,
}

impl PriorityFactors {
    pub fn new(lp: Vec<f64>, cp: Vec<f64>, pn: Vec<f64>, gates: FactorGates) -> Self {
        let psi = (0..lp.len())
            .map(|k| {
                let mut p = 1.0;
                if gates.lp {
                    p *= lp[k];
                }
                if gates.cp {
                    p *= cp[k];
                }
                if gates.pn {
                    p *= pn[k];
                }
                p
            })
            .collect();
        Self { lp, cp, pn, psi, gates }
    }

    /// Checks the factor ranges `LP, CP ∈ [0, 1]`, `PN ∈ [1, 2)` and
    /// `Ψ ∈ [0, 2]`.
    pub fn check_ranges(&self) -> Result<()> {
        let within = |v: &[f64], lo: f64, hi: f64, hi_open: bool| {
            v.iter().all(|x| x.is_finite() && *x >= lo && if hi_open { *x < hi } else { *x <= hi })
        };
        if !within(&self.lp, 0.0, 1.0, false) {
            return Err(Error::invariant(format!("learning potential out of [0,1]: {:?}", self.lp)));
        }
        if !within(&self.cp, 0.0, 1.0, false) {
            return Err(Error::invariant(format!("conflict penalty out of [0,1]: {:?}", self.cp)));
        }
        if !within(&self.pn, 1.0, 2.0, true) {
            return Err(Error::invariant(format!("progress need out of [1,2): {:?}", self.pn)));
        }
        if !within(&self.psi, 0.0, 2.0, false) {
            return Err(Error::invariant(format!("priority out of [0,2]: {:?}", self.psi)));
        }
        Ok(())
    }
}

/// Max-subtracted softmax of `psi / tau`.
pub fn softmax_weights(psi: &[f64], tau: f64) -> Vec<f64> {
    let m = psi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = psi.iter().map(|p| ((p - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// The three weight guarantees for priorities in `[0, 2]`.
pub fn check_weight_bounds(w: &[f64], previous: Option<&[f64]>, tau: f64) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invariant(format!("weights {w:?} left the simplex")));
    }
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio_bound = (2.0 / tau).exp();
    if max / min > ratio_bound + BOUND_TOLERANCE {
        return Err(Error::invariant(format!("weight ratio {} exceeds exp(2/tau) = {ratio_bound}", max / min)));
    }
    if let Some(prev) = previous {
        let l1: f64 = w.iter().zip(prev).map(|(a, b)| (a - b).abs()).sum();
        let step_bound = 2.0 * (1.0 - (-2.0 / tau).exp());
        if l1 > step_bound + BOUND_TOLERANCE {
            return Err(Error::invariant(format!("weight step {l1} exceeds {step_bound}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub step: u64,
    pub w: Vec<f64>,
    pub factors: Option<PriorityFactors>,
}

/// Current simplex weights plus a bounded history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub w: Vec<f64>,
    pub tau: f64,
    pub history: VecDeque<WeightRecord>,
    pub history_capacity: usize,
}

impl WeightState {
    pub fn uniform(objectives: usize, tau: f64) -> Self {
        Self { w: vec![1.0 / objectives as f64; objectives], tau, history: VecDeque::new(), history_capacity: 64 }
    }

    fn push(&mut self, record: WeightRecord) {
        if self.history.len() == self.history_capacity {
            self.history.pop_front();
        }
        self.history.push_back(record);
    }

    /// Softmax update from priorities with the weight bounds enforced.
    pub fn compute_weights(&mut self, factors: &PriorityFactors, step: u64) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.tau)));
        }
        if factors.psi.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("non-finite priority"));
        }
        let w = softmax_weights(&factors.psi, self.tau);
        check_weight_bounds(&w, Some(&self.w), self.tau)?;
        self.w = w;
        self.push(WeightRecord { step, w: self.w.clone(), factors: Some(factors.clone()) });
        Ok(())
    }

    /// Sets weights without the softmax (static and specialist modes).
    pub fn set_fixed(&mut self, w: Vec<f64>, step: u64) -> Result<()> {
        dsan::check_simplex(&w)?;
        self.w = w;
        self.push(WeightRecord { step, w: self.w.clone(), factors: None });
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightingMode {
    /// Priority-driven weights with the given factors.
    Adaptive { gates: FactorGates },
    /// `w ≡ 1/K`, scheduler bypassed.
    Static,
    /// All weight on one objective.
    Specialist { objective: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub mode: WeightingMode,
    pub tau: f64,
    pub gamma: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub estimates: GradientEstimates,
    pub weights: WeightState,
}

impl SchedulerState {
    pub fn new(objectives: usize, num_params: usize, config: &SchedulerConfig) -> Self {
        Self {
            estimates: GradientEstimates::new(objectives, num_params, config.gamma),
            weights: WeightState::uniform(objectives, config.tau),
        }
    }
}

/// One scheduler invocation: raw gradients → EMA → factors on the EMA
/// gradients → gated priorities → softmax weights.
///
/// Static and specialist modes skip the gradient work and return no factors.
#[allow(clippy::too_many_arguments)]
pub fn scheduler_step(
    state: &mut SchedulerState,
    params: &FlowPolicyParams,
    microbatch: &[(Trajectory, RewardVector)],
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    r_bar: &RunningPerformance,
    utopia: &UtopiaPoints,
    config: &SchedulerConfig,
    step: u64,
) -> Result<Option<PriorityFactors>> {
    let k = state.weights.w.len();
    match config.mode {
        WeightingMode::Static => {
            state.weights.set_fixed(vec![1.0 / k as f64; k], step)?;
            Ok(None)
        }
        WeightingMode::Specialist { objective } => {
            if objective >= k {
                return Err(Error::config(format!("specialist objective {objective} >= K = {k}")));
            }
            let mut w = vec![0.0; k];
            w[objective] = 1.0;
            state.weights.set_fixed(w, step)?;
            Ok(None)
        }
        WeightingMode::Adaptive { gates } => {
            let raw = estimate_objective_gradients(params, microbatch, grid, sched, config.eps)?;
            state.estimates.ema_update(raw)?;
            let factors = factors_from_gradients(&state.estimates.ema, r_bar, utopia, gates, config.eps)?;
            state.weights.compute_weights(&factors, step)?;
            Ok(Some(factors))
        }
    }
}

/// LP/CP/PN and the gated priority for a set of gradients.
pub fn factors_from_gradients(
    grads: &[Vec<f64>],
    r_bar: &RunningPerformance,
    utopia: &UtopiaPoints,
    gates: FactorGates,
    eps: f64,
) -> Result<PriorityFactors> {
    if grads.len() != utopia.u.len() {
        return Err(Error::contract("gradient count differs from objective count"));
    }
    let lp = learning_potential(grads, eps);
    let cp = conflict_penalty(grads, eps);
    let pn = progress_need(r_bar, utopia, eps)?;
    let factors = PriorityFactors::new(lp, cp, pn, gates);
    factors.check_ranges()?;
    Ok(factors)
}
