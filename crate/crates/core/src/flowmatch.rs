//! Toy stochastic flow-matching policy.
//!
//! The generator transports `x_1 ~ N(0, I_d)` at `j = 1` to a sample `x_0` at
//! `j = 0` along the reverse-time SDE obtained from a velocity field
//! `v(x, j)`. Its Euler–Maruyama discretization is a Markov chain of
//! isotropic Gaussian transitions
//!
//! ```text
//! mean     = x + [v + σ²/(2 j) · (x + (1 - j) v)] · Δj
//! variance = σ² · |Δj|,      σ(j) = a · sqrt(j / (1 - j)),   Δj = -1/T
//! ```
//!
//! so per-step log-densities, likelihood ratios and the KL divergence to a
//! reference policy are all closed-form.
//!
//! The velocity field is a linear read-out `v = W · φ(x, j)` of fixed random
//! Fourier features. Because the transition mean is affine in `v`, it is also
//! affine in `W`, which makes every gradient in this crate analytic.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamPurpose};

/// Uniform reverse-time grid `j_t = t / T`, `t = 0..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("time grid needs T >= 2, got {steps}")));
        }
        Ok(Self { steps })
    }

    /// Number of transitions `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Time of node `t`.
    pub fn node(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|t| self.node(t)).collect()
    }

    /// Signed step `j_{t-1} - j_t = -1/T`.
    pub fn delta(&self) -> f64 {
        -1.0 / self.steps as f64
    }
}

/// Noise level `σ(j) = a · sqrt(j_c / (1 - j_c))` with the time clamped to
/// `[δ, 1 - δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub a: f64,
    pub clamp_delta: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { a: 0.7, clamp_delta: 0.1 }
    }
}

impl NoiseSchedule {
    pub fn new(a: f64, clamp_delta: f64) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::config(format!("noise level a must be finite and >= 0, got {a}")));
        }
        if !(clamp_delta > 0.0 && clamp_delta < 0.5) {
            return Err(Error::config(format!("clamp_delta must lie in (0, 0.5), got {clamp_delta}")));
        }
        Ok(Self { a, clamp_delta })
    }

    pub fn clamp_time(&self, j: f64) -> f64 {
        j.max(self.clamp_delta).min(1.0 - self.clamp_delta)
    }

    pub fn sigma_sq(&self, j: f64) -> f64 {
        let jc = self.clamp_time(j);
        self.a * self.a * jc / (1.0 - jc)
    }

    pub fn sigma(&self, j: f64) -> f64 {
        self.sigma_sq(j).sqrt()
    }

    pub fn is_deterministic(&self) -> bool {
        self.a == 0.0
    }
}

/// Fixed random Fourier feature map `φ(x, j) ∈ R^F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    seed: u64,
    dim: usize,
    count: usize,
    /// `count × dim`, row-major.
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    phase: Vec<f64>,
    amplitude: f64,
}

const FEATURE_LENGTH_SCALE: f64 = 1.5;
const FEATURE_TIME_FREQUENCY: f64 = 2.0;

impl FeatureMap {
    pub fn new(seed: u64, dim: usize, count: usize) -> Self {
        let mut rng = rng::stream(seed, StreamPurpose::Features, &[dim as u64, count as u64]);
        let mut spatial = Vec::with_capacity(count * dim);
        let mut temporal = Vec::with_capacity(count);
        let mut phase = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..dim {
                let w: f64 = StandardNormal.sample(&mut rng);
                spatial.push(w / FEATURE_LENGTH_SCALE);
            }
            let nu: f64 = StandardNormal.sample(&mut rng);
            temporal.push(nu * FEATURE_TIME_FREQUENCY);
            phase.push(rng.random::<f64>() * std::f64::consts::TAU);
        }
        Self { seed, dim, count, spatial, temporal, phase, amplitude: (2.0 / count as f64).sqrt() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Writes `φ(x, j)` into `out` (length `count`).
    pub fn eval_into(&self, x: &[f64], j: f64, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.count);
        for (f, o) in out.iter_mut().enumerate() {
            let row = &self.spatial[f * self.dim..(f + 1) * self.dim];
            let arg: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.temporal[f] * j + self.phase[f];
            *o = self.amplitude * arg.cos();
        }
    }

    pub fn eval(&self, x: &[f64], j: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.count];
        self.eval_into(x, j, &mut out);
        out
    }
}

/// Learnable read-out `W` (`dim × feature_count`, row-major) over a fixed
/// feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRepr", try_from = "ParamsRepr")]
pub struct FlowPolicyParams {
    pub weights: Vec<f64>,
    features: Arc<FeatureMap>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    feature_seed: u64,
    dim: usize,
    feature_count: usize,
    weights: Vec<f64>,
}

impl From<FlowPolicyParams> for ParamsRepr {
    fn from(p: FlowPolicyParams) -> Self {
        ParamsRepr {
            feature_seed: p.features.seed,
            dim: p.features.dim,
            feature_count: p.features.count,
            weights: p.weights,
        }
    }
}

impl TryFrom<ParamsRepr> for FlowPolicyParams {
    type Error = String;

    fn try_from(r: ParamsRepr) -> std::result::Result<Self, String> {
        if r.weights.len() != r.dim * r.feature_count {
            return Err(format!("weight count {} does not match {}x{}", r.weights.len(), r.dim, r.feature_count));
        }
        Ok(FlowPolicyParams {
            weights: r.weights,
            features: Arc::new(FeatureMap::new(r.feature_seed, r.dim, r.feature_count)),
        })
    }
}

impl FlowPolicyParams {
    /// Zero read-out over a freshly built feature map.
    pub fn zeros(feature_seed: u64, dim: usize, feature_count: usize) -> Self {
        Self {
            weights: vec![0.0; dim * feature_count],
            features: Arc::new(FeatureMap::new(feature_seed, dim, feature_count)),
        }
    }

    /// Read-out with i.i.d. `N(0, scale²)` entries drawn from `param_seed`.
    pub fn random(feature_seed: u64, dim: usize, feature_count: usize, scale: f64, param_seed: u64) -> Self {
        let mut p = Self::zeros(feature_seed, dim, feature_count);
        if scale != 0.0 {
            let mut rng = rng::stream(param_seed, StreamPurpose::Parameters, &[feature_seed]);
            for w in &mut p.weights {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = scale * z;
            }
        }
        p
    }

    /// Same feature map, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(Error::contract(format!("expected {} weights, got {}", self.weights.len(), weights.len())));
        }
        Ok(Self { weights, features: Arc::clone(&self.features) })
    }

    pub fn dim(&self) -> usize {
        self.features.dim
    }

    pub fn feature_count(&self) -> usize {
        self.features.count
    }

    pub fn feature_seed(&self) -> u64 {
        self.features.seed
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn same_layout(&self, other: &FlowPolicyParams) -> bool {
        self.dim() == other.dim() && self.feature_count() == other.feature_count()
    }

    /// `W · φ` for a precomputed feature vector.
    fn readout(&self, phi: &[f64]) -> Vec<f64> {
        let f = self.feature_count();
        (0..self.dim()).map(|a| self.weights[a * f..(a + 1) * f].iter().zip(phi).map(|(w, p)| w * p).sum()).collect()
    }
}

/// Velocity `v_θ(x, j) = W · φ(x, j)`.
pub fn velocity(params: &FlowPolicyParams, x: &[f64], j: f64) -> Result<Vec<f64>> {
    check_state(params, x)?;
    if !(0.0..=1.0).contains(&j) {
        return Err(Error::domain(format!("time {j} outside [0, 1]")));
    }
    Ok(params.readout(&params.features.eval(x, j)))
}

fn check_state(params: &FlowPolicyParams, x: &[f64]) -> Result<()> {
    if x.len() != params.dim() {
        return Err(Error::contract(format!("state has dimension {}, policy expects {}", x.len(), params.dim())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite state"));
    }
    Ok(())
}

/// Mean and isotropic variance of one reverse transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMoments {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Scalar coefficients of one grid position, independent of the state and
/// of the policy.
///
/// `mean = x · (1 + drift · Δj) + gain · v`, so `gain = ∂mean/∂v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub j: f64,
    pub delta: f64,
    pub sigma_sq: f64,
    /// `σ² / (2 j_c)`.
    pub drift: f64,
    /// `(1 + drift · (1 - j)) · Δj`.
    pub gain: f64,
    pub variance: f64,
}

impl StepCoefficients {
    pub fn new(t: usize, grid: &TimeGrid, sched: &NoiseSchedule) -> Result<Self> {
        if t == 0 || t > grid.steps() {
            return Err(Error::contract(format!("no transition out of grid node {t} (valid: 1..={})", grid.steps())));
        }
        let j = grid.node(t);
        let delta = grid.delta();
        let sigma_sq = sched.sigma_sq(j);
        let drift = sigma_sq / (2.0 * sched.clamp_time(j));
        let gain = (1.0 + drift * (1.0 - j)) * delta;
        Ok(Self { j, delta, sigma_sq, drift, gain, variance: sigma_sq * delta.abs() })
    }

    fn mean(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        x.iter().zip(v).map(|(xi, vi)| xi + (vi + self.drift * (xi + (1.0 - self.j) * vi)) * self.delta).collect()
    }
}

/// Gaussian transition out of grid node `t` (time `j_t = t/T`).
pub fn transition_moments(
    params: &FlowPolicyParams,
    x: &[f64],
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<TransitionMoments> {
    let c = StepCoefficients::new(t, grid, sched)?;
    let v = velocity(params, x, c.j)?;
    Ok(TransitionMoments { mean: c.mean(x, &v), variance: c.variance })
}

/// Result of one Euler–Maruyama step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub next: Vec<f64>,
    pub noise: Vec<f64>,
    /// Log-density of `next`. Zero in the deterministic (`a = 0`) mode.
    pub logprob: f64,
}

/// Draws `x_{t-1} = mean + sqrt(variance) · ε`.
pub fn sample_step<R: Rng + ?Sized>(
    params: &FlowPolicyParams,
    x: &[f64],
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<StepSample> {
    let noise: Vec<f64> = (0..params.dim()).map(|_| StandardNormal.sample(rng)).collect();
    step_with_noise(params, x, t, grid, sched, noise)
}

/// Deterministic transition for a given standard-normal draw.
pub fn step_with_noise(
    params: &FlowPolicyParams,
    x: &[f64],
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    noise: Vec<f64>,
) -> Result<StepSample> {
    let m = transition_moments(params, x, t, grid, sched)?;
    if sched.is_deterministic() {
        return Ok(StepSample { next: m.mean, noise, logprob: 0.0 });
    }
    if m.variance <= 0.0 {
        return Err(Error::invariant(format!("zero transition variance at t={t} with a={}", sched.a)));
    }
    let sd = m.variance.sqrt();
    let next: Vec<f64> = m.mean.iter().zip(&noise).map(|(mu, e)| mu + sd * e).collect();
    let logprob = gaussian_logpdf(&next, &m.mean, m.variance);
    Ok(StepSample { next, noise, logprob })
}

fn gaussian_logpdf(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * variance).ln() - sq / (2.0 * variance)
}

/// Per-step log-density `log π(x_to | x_from)` of the transition out of node `t`.
pub fn log_prob_step(
    params: &FlowPolicyParams,
    x_from: &[f64],
    x_to: &[f64],
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let m = transition_moments(params, x_from, t, grid, sched)?;
    if m.variance <= 0.0 {
        return Err(Error::domain("log-density undefined for zero transition variance"));
    }
    if x_to.len() != m.mean.len() {
        return Err(Error::contract("target state has the wrong dimension"));
    }
    Ok(gaussian_logpdf(x_to, &m.mean, m.variance))
}

/// Log-density together with its gradient with respect to the read-out
/// weights, accumulated as `grad += scale · ∂ log π / ∂W`.
pub fn log_prob_step_with_grad(
    params: &FlowPolicyParams,
    x_from: &[f64],
    x_to: &[f64],
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let c = StepCoefficients::new(t, grid, sched)?;
    if c.variance <= 0.0 {
        return Err(Error::domain("log-density undefined for zero transition variance"));
    }
    check_state(params, x_from)?;
    let phi = params.features.eval(x_from, c.j);
    let v = params.readout(&phi);
    let mean = c.mean(x_from, &v);
    let logprob = gaussian_logpdf(x_to, &mean, c.variance);
    if scale != 0.0 {
        let f = params.feature_count();
        for a in 0..params.dim() {
            // ∂logπ/∂mean_a · ∂mean_a/∂v_a · ∂v_a/∂W_af
            let coef = scale * (x_to[a] - mean[a]) / c.variance * c.gain;
            for (g, p) in grad[a * f..(a + 1) * f].iter_mut().zip(&phi) {
                *g += coef * p;
            }
        }
    }
    Ok(logprob)
}

/// Closed-form KL between the transitions of `params` and `ref_params` out of
/// node `t` at state `x`. Both share the grid and noise schedule, hence the
/// covariance.
pub fn kl_step(
    params: &FlowPolicyParams,
    ref_params: &FlowPolicyParams,
    x: &[f64],
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<f64> {
    kl_step_with_grad(params, ref_params, x, t, grid, sched, 0.0, &mut [])
}

/// KL step plus `grad += scale · ∂KL/∂W` (gradient with respect to `params`).
pub fn kl_step_with_grad(
    params: &FlowPolicyParams,
    ref_params: &FlowPolicyParams,
    x: &[f64],
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if params.dim() != ref_params.dim() {
        return Err(Error::contract("policy and reference have different state dimensions"));
    }
    let c = StepCoefficients::new(t, grid, sched)?;
    if c.variance <= 0.0 {
        return Err(Error::domain("closed-form KL needs a positive transition variance"));
    }
    check_state(params, x)?;
    let phi = params.features.eval(x, c.j);
    let v = params.readout(&phi);
    let v_ref = if params.features.as_ref() == ref_params.features.as_ref() {
        ref_params.readout(&phi)
    } else {
        velocity(ref_params, x, c.j)?
    };
    let dv: Vec<f64> = v.iter().zip(&v_ref).map(|(a, b)| a - b).collect();
    let factor = c.gain * c.gain / c.variance;
    let kl = 0.5 * factor * dv.iter().map(|d| d * d).sum::<f64>();
    if scale != 0.0 {
        let f = params.feature_count();
        for a in 0..params.dim() {
            let coef = scale * factor * dv[a];
            for (g, p) in grad[a * f..(a + 1) * f].iter_mut().zip(&phi) {
                *g += coef * p;
            }
        }
    }
    Ok(kl)
}

/// One generated trajectory `x_{j_T}, …, x_{j_0}`.
///
/// `states[i]` sits at grid node `T - i`; transition `i` goes from
/// `states[i]` to `states[i + 1]` out of node `T - i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub step_logprobs: Vec<f64>,
    pub noise_draws: Vec<Vec<f64>>,
    pub context_id: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.step_logprobs.len()
    }

    /// Terminal sample `x_0`.
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Grid node of transition `i`.
    pub fn node_of(&self, i: usize) -> usize {
        self.steps() - i
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.states.len() != grid.steps() + 1
            || self.step_logprobs.len() != grid.steps()
            || self.noise_draws.len() != grid.steps()
        {
            return Err(Error::contract(format!(
                "trajectory with {} states does not match a {}-step grid",
                self.states.len(),
                grid.steps()
            )));
        }
        Ok(())
    }
}

/// Toy analogue of a prompt: modes that shift and rescale the reward
/// landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: u64,
    pub target_modes: Vec<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl Context {
    pub fn new(id: u64, target_modes: Vec<Mode>) -> Result<Self> {
        if target_modes.is_empty() {
            return Err(Error::config("context needs at least one mode"));
        }
        for m in &target_modes {
            if m.center.iter().any(|c| !c.is_finite()) || !(m.scale.is_finite() && m.scale > 0.0) {
                return Err(Error::config(format!("context {id} has a non-finite or degenerate mode")));
            }
        }
        Ok(Self { id, target_modes })
    }

    /// Context with a single unshifted unit-scale mode.
    pub fn neutral(id: u64, dim: usize) -> Self {
        Self { id, target_modes: vec![Mode { center: vec![0.0; dim], scale: 1.0 }] }
    }

    pub fn offset(&self) -> &[f64] {
        &self.target_modes[0].center
    }

    pub fn scale(&self) -> f64 {
        self.target_modes[0].scale
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "context#{}", self.id)
    }
}

/// Samples `x_{j_T} ~ N(0, I)` from `init_rng` and runs the chain down to
/// `j = 0` with `step_rng`.
pub fn sample_trajectory<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    params: &FlowPolicyParams,
    context: &Context,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    init_rng: &mut R1,
    step_rng: &mut R2,
) -> Result<Trajectory> {
    let x_init: Vec<f64> = (0..params.dim()).map(|_| StandardNormal.sample(init_rng)).collect();
    sample_trajectory_from(params, context, grid, sched, x_init, step_rng)
}

/// As [`sample_trajectory`] with a given initial latent.
pub fn sample_trajectory_from<R: Rng + ?Sized>(
    params: &FlowPolicyParams,
    context: &Context,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    x_init: Vec<f64>,
    step_rng: &mut R,
) -> Result<Trajectory> {
    let steps = grid.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut step_logprobs = Vec::with_capacity(steps);
    let mut noise_draws = Vec::with_capacity(steps);
    states.push(x_init);
    for t in (1..=steps).rev() {
        let s = sample_step(params, states.last().unwrap(), t, grid, sched, step_rng)?;
        states.push(s.next);
        step_logprobs.push(s.logprob);
        noise_draws.push(s.noise);
    }
    Ok(Trajectory { states, step_logprobs, noise_draws, context_id: context.id })
}

/// Re-runs a trajectory from its initial latent and stored noise.
pub fn replay_trajectory(
    params: &FlowPolicyParams,
    traj: &Trajectory,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    traj.check_grid(grid)?;
    let steps = grid.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut step_logprobs = Vec::with_capacity(steps);
    states.push(traj.states[0].clone());
    for (i, noise) in traj.noise_draws.iter().enumerate() {
        let s = step_with_noise(params, &states[i], steps - i, grid, sched, noise.clone())?;
        states.push(s.next);
        step_logprobs.push(s.logprob);
    }
    Ok(Trajectory { states, step_logprobs, noise_draws: traj.noise_draws.clone(), context_id: traj.context_id })
}

/// Trajectory-level KL: sum of [`kl_step`] over the stored states.
pub fn kl_trajectory(
    params: &FlowPolicyParams,
    ref_params: &FlowPolicyParams,
    traj: &Trajectory,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<f64> {
    traj.check_grid(grid)?;
    let mut total = 0.0;
    for i in 0..traj.steps() {
        total += kl_step(params, ref_params, &traj.states[i], traj.node_of(i), grid, sched)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(scale: f64, seed: u64) -> FlowPolicyParams {
        FlowPolicyParams::random(11, 2, 64, scale, seed)
    }

    #[test]
    fn grid_nodes_and_step() {
        let g = TimeGrid::new(10).unwrap();
        let nodes = g.nodes();
        assert_eq!(nodes.len(), 11);
        assert_eq!(nodes[0], 0.0);
        assert_eq!(nodes[10], 1.0);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.delta(), -0.1);
        assert!(TimeGrid::new(1).is_err());
    }

    #[test]
    fn sigma_is_finite_and_monotone_on_clamped_range() {
        let s = NoiseSchedule::new(0.7, 1e-3).unwrap();
        let mut prev = 0.0;
        for i in 0..=1000 {
            let sig = s.sigma(i as f64 / 1000.0);
            assert!(sig.is_finite() && sig >= 0.0);
            assert!(sig >= prev);
            prev = sig;
        }
        assert!(NoiseSchedule::new(0.7, 0.0).is_err());
        assert!(NoiseSchedule::new(-1.0, 0.1).is_err());
    }

    #[test]
    fn zero_weights_give_zero_velocity() {
        let p = FlowPolicyParams::zeros(3, 2, 64);
        assert_eq!(velocity(&p, &[0.3, -1.2], 0.4).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn velocity_is_linear_in_weights() {
        let p = policy(0.3, 1);
        let p2 = p.with_weights(p.weights.iter().map(|w| 2.0 * w).collect()).unwrap();
        let v = velocity(&p, &[0.5, 0.1], 0.7).unwrap();
        let v2 = velocity(&p2, &[0.5, 0.1], 0.7).unwrap();
        for (a, b) in v.iter().zip(&v2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn features_are_deterministic_in_seed() {
        let a = FeatureMap::new(5, 2, 64);
        let b = FeatureMap::new(5, 2, 64);
        let c = FeatureMap::new(6, 2, 64);
        let x = [0.2, -0.4];
        assert_eq!(a.eval(&x, 0.3), b.eval(&x, 0.3));
        assert_ne!(a.eval(&x, 0.3), c.eval(&x, 0.3));
    }

    #[test]
    fn velocity_rejects_bad_inputs() {
        let p = policy(0.3, 1);
        assert!(matches!(velocity(&p, &[f64::NAN, 0.0], 0.5), Err(Error::Domain(_))));
        assert!(matches!(velocity(&p, &[0.0, 0.0], 1.5), Err(Error::Domain(_))));
        assert!(matches!(velocity(&p, &[0.0], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_mode_is_euler_step() {
        let p = policy(0.3, 2);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::new(0.0, 0.1).unwrap();
        let x = [0.4, -0.2];
        let m = transition_moments(&p, &x, 6, &g, &s).unwrap();
        let v = velocity(&p, &x, 0.6).unwrap();
        assert_eq!(m.variance, 0.0);
        for a in 0..2 {
            assert!((m.mean[a] - (x[a] + v[a] * -0.1)).abs() < 1e-15);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let s1 = sample_step(&p, &x, 6, &g, &s, &mut r1).unwrap();
        let s2 = sample_step(&p, &x, 6, &g, &s, &mut r2).unwrap();
        assert_eq!(s1.next, m.mean);
        assert_eq!(s1.next, s2.next);
    }

    #[test]
    fn hand_evaluated_transition_in_one_dimension() {
        // d = 1, x = 1, v = 0.5, j = 0.5, T = 10, a = 0.7
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::new(0.7, 1e-3).unwrap();
        let c = StepCoefficients::new(5, &g, &s).unwrap();
        let sigma_sq = 0.7 * 0.7 * 0.5 / 0.5;
        assert!((c.sigma_sq - 0.49).abs() < 1e-15);
        let expected = 1.0 + (0.5 + (sigma_sq / (2.0 * 0.5)) * (1.0 + 0.5 * 0.5)) * -0.1;
        let mean = c.mean(&[1.0], &[0.5]);
        assert!((mean[0] - expected).abs() < 1e-15);
        assert!((mean[0] - 0.88875).abs() < 1e-12);
        assert!((c.variance - 0.049).abs() < 1e-15);
    }

    #[test]
    fn variance_is_state_independent() {
        let p = policy(0.3, 3);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::default();
        for t in 1..=10 {
            let expected = s.sigma_sq(g.node(t)) / 10.0;
            for x in [[0.0, 0.0], [3.0, -2.0]] {
                let m = transition_moments(&p, &x, t, &g, &s).unwrap();
                assert!((m.variance - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn no_transition_out_of_data_time() {
        let p = policy(0.3, 3);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::default();
        assert!(matches!(transition_moments(&p, &[0.0, 0.0], 0, &g, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn mode_value_and_quadratic_identity() {
        let p = policy(0.3, 4);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::default();
        let x = [0.1, 0.9];
        let m = transition_moments(&p, &x, 4, &g, &s).unwrap();
        let at_mode = log_prob_step(&p, &x, &m.mean, 4, &g, &s).unwrap();
        let expected = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * m.variance).ln();
        assert!((at_mode - expected).abs() < 1e-12);

        let y1 = [m.mean[0] + 0.3, m.mean[1] - 0.1];
        let y2 = [m.mean[0] - 0.05, m.mean[1] + 0.4];
        let d1 = 0.3f64.powi(2) + 0.1f64.powi(2);
        let d2 = 0.05f64.powi(2) + 0.4f64.powi(2);
        let lhs = log_prob_step(&p, &x, &y1, 4, &g, &s).unwrap() - log_prob_step(&p, &x, &y2, 4, &g, &s).unwrap();
        assert!((lhs - (d2 - d1) / (2.0 * m.variance)).abs() < 1e-10);
    }

    #[test]
    fn kl_is_zero_for_identical_policies_and_quadratic_in_difference() {
        let p = policy(0.3, 5);
        let q = policy(0.3, 6);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::default();
        let x = [0.3, -0.7];
        assert_eq!(kl_step(&p, &p, &x, 5, &g, &s).unwrap(), 0.0);
        // q + 2(p - q) doubles the velocity difference
        let far = q.with_weights(p.weights.iter().zip(&q.weights).map(|(a, b)| b + 2.0 * (a - b)).collect()).unwrap();
        let k1 = kl_step(&p, &q, &x, 5, &g, &s).unwrap();
        let k2 = kl_step(&far, &q, &x, 5, &g, &s).unwrap();
        assert!((k2 - 4.0 * k1).abs() < 1e-12 * k2.max(1.0));
        // mean form
        let mp = transition_moments(&p, &x, 5, &g, &s).unwrap();
        let mq = transition_moments(&q, &x, 5, &g, &s).unwrap();
        let sq: f64 = mp.mean.iter().zip(&mq.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((k1 - sq / (2.0 * mp.variance)).abs() < 1e-12);
    }

    #[test]
    fn replay_reproduces_states_bitwise() {
        let p = policy(0.3, 7);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::default();
        let ctx = Context::neutral(0, 2);
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let tr = sample_trajectory(&p, &ctx, &g, &s, &mut r1, &mut r2).unwrap();
        assert_eq!(tr.states.len(), 11);
        assert_eq!(tr.step_logprobs.len(), 10);
        let again = replay_trajectory(&p, &tr, &g, &s).unwrap();
        assert_eq!(again, tr);
        for i in 0..tr.steps() {
            let lp = log_prob_step(&p, &tr.states[i], &tr.states[i + 1], tr.node_of(i), &g, &s).unwrap();
            assert!((lp - tr.step_logprobs[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_flow_ignores_step_seed() {
        let p = policy(0.3, 8);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::new(0.0, 0.1).unwrap();
        let ctx = Context::neutral(0, 2);
        let a = sample_trajectory_from(&p, &ctx, &g, &s, vec![0.5, -0.5], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_trajectory_from(&p, &ctx, &g, &s, vec![0.5, -0.5], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn kl_trajectory_rejects_grid_mismatch() {
        let p = policy(0.3, 9);
        let g = TimeGrid::new(10).unwrap();
        let s = NoiseSchedule::default();
        let ctx = Context::neutral(0, 2);
        let tr =
            sample_trajectory(&p, &ctx, &g, &s, &mut ChaCha8Rng::seed_from_u64(1), &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap();
        let other = TimeGrid::new(12).unwrap();
        assert!(matches!(kl_trajectory(&p, &p, &tr, &other, &s), Err(Error::Contract(_))));
        assert_eq!(kl_trajectory(&p, &p, &tr, &g, &s).unwrap(), 0.0);
    }

    #[test]
    fn params_serde_rebuilds_feature_map() {
        let p = policy(0.3, 10);
        let json = serde_json::to_string(&p).unwrap();
        let back: FlowPolicyParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
