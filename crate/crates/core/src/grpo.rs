//! Group-relative clipped policy-gradient training of the flow policy.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsan::{self, GroupRewards};
use crate::error::{Error, Result};
use crate::flowmatch::{self, Context, FlowPolicyParams, NoiseSchedule, TimeGrid, Trajectory};
use crate::rewards::{self, RewardSpec, RewardVector, RunningPerformance, UtopiaPoints};
use crate::rng::{self, StreamPurpose};
use crate::scheduler::{self, PriorityFactors, SchedulerConfig, SchedulerState, WeightingMode};

/// `G` trajectories for one context together with their rewards.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub context: Context,
    pub trajectories: Vec<Trajectory>,
    pub rewards: GroupRewards,
    pub behavior_params: FlowPolicyParams,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn reward_vectors(&self) -> Vec<RewardVector> {
        (0..self.size()).map(|i| RewardVector { values: self.rewards.matrix().row(i).to_vec() }).collect()
    }
}

/// Which stream family a rollout draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutStreams {
    Training,
    Scheduler,
    Evaluation,
}

impl RolloutStreams {
    fn purposes(self) -> (StreamPurpose, StreamPurpose) {
        match self {
            RolloutStreams::Training => (StreamPurpose::InitialLatent, StreamPurpose::StepNoise),
            RolloutStreams::Scheduler => (StreamPurpose::SchedulerLatent, StreamPurpose::SchedulerNoise),
            RolloutStreams::Evaluation => (StreamPurpose::Evaluation, StreamPurpose::Evaluation),
        }
    }
}

/// Where a group's random streams live: `(run_seed, step, slot)` plus the
/// rollout index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamCoords {
    pub run_seed: u64,
    pub step: u64,
    pub slot: u64,
    pub family: RolloutStreams,
}

/// Samples `G` trajectories from `policy_old`, each from its own pair of
/// streams, and scores the terminal states.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    policy_old: &FlowPolicyParams,
    context: &Context,
    specs: &[RewardSpec],
    group_size: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    coords: StreamCoords,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::config(format!("group size must be at least 2, got {group_size}")));
    }
    let (init_purpose, step_purpose) = coords.family.purposes();
    let samples: Vec<Result<(Trajectory, RewardVector)>> = (0..group_size as u64)
        .into_par_iter()
        .map(|i| {
            let c = [coords.step, coords.slot, i];
            let mut init = rng::stream(coords.run_seed, init_purpose, &c);
            let mut steps = if init_purpose == step_purpose {
                rng::stream(coords.run_seed, step_purpose, &[coords.step, coords.slot, i, u64::MAX])
            } else {
                rng::stream(coords.run_seed, step_purpose, &c)
            };
            let traj = flowmatch::sample_trajectory(policy_old, context, grid, sched, &mut init, &mut steps)?;
            let r = rewards::evaluate_rewards(traj.terminal(), context, specs)?;
            Ok((traj, r))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(group_size);
    let mut rows = Vec::with_capacity(group_size);
    for s in samples {
        let (t, r) = s?;
        trajectories.push(t);
        rows.push(r.values);
    }
    Ok(RolloutGroup {
        context: context.clone(),
        trajectories,
        rewards: GroupRewards::new(&rows)?,
        behavior_params: policy_old.clone(),
    })
}

/// `π_θ / π_θ_old` at the stored transition out of node `t ∈ [1, T]`.
pub fn likelihood_ratio(
    params: &FlowPolicyParams,
    behavior_params: &FlowPolicyParams,
    traj: &Trajectory,
    t: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<f64> {
    traj.check_grid(grid)?;
    if t == 0 || t > grid.steps() {
        return Err(Error::contract(format!("node {t} outside [1, {}]", grid.steps())));
    }
    let i = grid.steps() - t;
    let new = flowmatch::log_prob_step(params, &traj.states[i], &traj.states[i + 1], t, grid, sched)?;
    let old = flowmatch::log_prob_step(behavior_params, &traj.states[i], &traj.states[i + 1], t, grid, sched)?;
    ratio_from_logprobs(new, old, t)
}

fn ratio_from_logprobs(new: f64, old: f64, t: usize) -> Result<f64> {
    let r = (new - old).exp();
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::numeric(format!("likelihood ratio at node {t} is {r} (log-prob gap {})", new - old)));
    }
    Ok(r)
}

fn clip(ratio: f64, eps_clip: f64) -> f64 {
    ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip)
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, eps_clip) * advantage)
}

/// True where the clipped branch is strictly the minimum, i.e. where the
/// surrogate has zero gradient.
pub fn clip_active(ratio: f64, advantage: f64, eps_clip: f64) -> bool {
    clip(ratio, eps_clip) * advantage < ratio * advantage
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_clip: f64,
    pub beta_kl: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { eps_clip: 0.2, beta_kl: 0.01 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(Error::config(format!("eps_clip must lie in (0, 1), got {}", self.eps_clip)));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::config(format!("beta_kl must be non-negative, got {}", self.beta_kl)));
        }
        Ok(())
    }
}

/// Loss, gradient and monitors for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Mean trajectory KL to the reference policy.
    pub mean_kl_to_ref: f64,
    pub clip_fraction: f64,
}

struct TrajectoryTerms {
    surrogate: f64,
    kl: f64,
    clipped: usize,
    grad: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn trajectory_terms(
    traj: &Trajectory,
    advantage: f64,
    params: &FlowPolicyParams,
    behavior: &FlowPolicyParams,
    ref_params: &FlowPolicyParams,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    clip_cfg: &ClipConfig,
    weight: f64,
) -> Result<TrajectoryTerms> {
    let steps = grid.steps();
    let mut grad = vec![0.0; params.num_params()];
    let (mut surrogate, mut kl, mut clipped) = (0.0, 0.0, 0);
    for i in 0..steps {
        let t = traj.node_of(i);
        let (from, to) = (&traj.states[i], &traj.states[i + 1]);
        let new = flowmatch::log_prob_step(params, from, to, t, grid, sched)?;
        let old = flowmatch::log_prob_step(behavior, from, to, t, grid, sched)?;
        let ratio = ratio_from_logprobs(new, old, t)?;
        surrogate += clipped_surrogate(ratio, advantage, clip_cfg.eps_clip);
        if clip_active(ratio, advantage, clip_cfg.eps_clip) {
            clipped += 1;
        } else if advantage != 0.0 {
            // d(ρA)/dθ = A ρ ∇log π_θ
            flowmatch::log_prob_step_with_grad(
                params,
                from,
                to,
                t,
                grid,
                sched,
                -weight * advantage * ratio,
                &mut grad,
            )?;
        }
        kl += flowmatch::kl_step_with_grad(
            params,
            ref_params,
            from,
            t,
            grid,
            sched,
            weight * clip_cfg.beta_kl,
            &mut grad,
        )?;
    }
    Ok(TrajectoryTerms { surrogate, kl, clipped, grad })
}

/// `−(1/G) Σ_i (1/T) Σ_t min(ρ A, clip(ρ) A) + β (1/G) Σ_i (1/T) KL_i`
/// and its analytic gradient.
pub fn grpo_loss_and_grad(
    group: &RolloutGroup,
    advantages: &[f64],
    params: &FlowPolicyParams,
    ref_params: &FlowPolicyParams,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    clip_cfg: &ClipConfig,
) -> Result<LossOutput> {
    let g = group.size();
    if advantages.len() != g {
        return Err(Error::contract(format!("{} advantages for a group of {g}", advantages.len())));
    }
    if !params.same_layout(&group.behavior_params) || !params.same_layout(ref_params) {
        return Err(Error::contract("policy, behavior and reference parameters differ in shape"));
    }
    let steps = grid.steps() as f64;
    let weight = 1.0 / (g as f64 * steps);
    let terms: Vec<Result<TrajectoryTerms>> = group
        .trajectories
        .par_iter()
        .zip(advantages.par_iter())
        .map(|(traj, &a)| {
            traj.check_grid(grid)?;
            trajectory_terms(traj, a, params, &group.behavior_params, ref_params, grid, sched, clip_cfg, weight)
        })
        .collect();
    let mut grad = vec![0.0; params.num_params()];
    let (mut surrogate, mut kl, mut clipped) = (0.0, 0.0, 0usize);
    for t in terms {
        let t = t?;
        surrogate += t.surrogate;
        kl += t.kl;
        clipped += t.clipped;
        for (a, b) in grad.iter_mut().zip(&t.grad) {
            *a += b;
        }
    }
    let loss = -surrogate * weight + clip_cfg.beta_kl * kl * weight;
    Ok(LossOutput { loss, grad, mean_kl_to_ref: kl / g as f64, clip_fraction: clipped as f64 / (g as f64 * steps) })
}

/// Bias-corrected adaptive-moment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One descent step on the loss. A non-finite gradient leaves everything
/// untouched and returns a numeric error.
pub fn optimizer_step(opt: &mut OptimizerState, params: &mut FlowPolicyParams, grad: &[f64]) -> Result<()> {
    if grad.len() != params.num_params() || opt.m.len() != grad.len() {
        return Err(Error::contract("gradient, moments and parameters differ in length"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient component {i}: {}", grad[i])));
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for i in 0..grad.len() {
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grad[i];
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        params.weights[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// How per-group advantages are formed from the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageScheme {
    /// Per-objective standardization, weighting, re-standardization.
    Dsan,
    /// Weight raw rewards, then standardize once.
    Naive,
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub run_seed: u64,
    pub grid: TimeGrid,
    pub sched: NoiseSchedule,
    pub specs: Vec<RewardSpec>,
    pub contexts: Vec<Context>,
    pub utopia: UtopiaPoints,
    pub group_size: usize,
    pub contexts_per_step: usize,
    pub microbatch_size: usize,
    pub clip: ClipConfig,
    pub scheduler: SchedulerConfig,
    pub advantages: AdvantageScheme,
    pub scheduler_every: u64,
    /// Gradient epochs per collection.
    pub epochs: usize,
}

impl TrainingSetup {
    pub fn objectives(&self) -> usize {
        self.specs.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if self.specs.len() != self.utopia.u.len() {
            return Err(Error::config("utopia points and reward specs differ in length"));
        }
        if self.contexts.is_empty() {
            return Err(Error::config("context pool is empty"));
        }
        if self.contexts_per_step == 0 || self.epochs == 0 || self.scheduler_every == 0 {
            return Err(Error::config("contexts_per_step, epochs and scheduler_every must be positive"));
        }
        if self.group_size < 2 {
            return Err(Error::config("group size must be at least 2"));
        }
        if matches!(self.scheduler.mode, WeightingMode::Adaptive { .. }) && self.microbatch_size < 2 {
            return Err(Error::config("scheduler micro-batch must be at least 2"));
        }
        Ok(())
    }
}

/// Mutable training state; everything needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub params: FlowPolicyParams,
    pub ref_params: FlowPolicyParams,
    pub optimizer: OptimizerState,
    pub scheduler: SchedulerState,
    pub step: u64,
}

impl TrainingState {
    pub fn new(params: FlowPolicyParams, lr: f64, objectives: usize, scheduler: &SchedulerConfig) -> Self {
        let n = params.num_params();
        Self {
            ref_params: params.clone(),
            optimizer: OptimizerState::new(n, lr),
            scheduler: SchedulerState::new(objectives, n, scheduler),
            params,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub weights: Vec<f64>,
    pub factors: Option<PriorityFactors>,
    pub batch_mean_rewards: Vec<f64>,
    /// Mean over groups of the composite's variance before the final
    /// standardization.
    pub pre_norm_variance: f64,
    pub mean_kl_to_ref: f64,
    pub clip_fraction: f64,
    pub loss: f64,
}

/// Per-step artefacts kept for analysis alongside the diagnostics.
#[derive(Debug, Clone)]
pub struct StepData {
    pub groups: Vec<RolloutGroup>,
    pub advantages: Vec<Vec<f64>>,
}

/// Picks the `B` contexts of a step.
pub fn choose_contexts(setup: &TrainingSetup, step: u64) -> Vec<Context> {
    (0..setup.contexts_per_step as u64)
        .map(|slot| {
            let mut r = rng::stream(setup.run_seed, StreamPurpose::ContextChoice, &[step, slot]);
            setup.contexts[r.random_range(0..setup.contexts.len())].clone()
        })
        .collect()
}

/// Collects the `B` groups of a step from the current policy.
pub fn collect_batch(state: &TrainingState, setup: &TrainingSetup) -> Result<Vec<RolloutGroup>> {
    choose_contexts(setup, state.step)
        .par_iter()
        .enumerate()
        .map(|(slot, ctx)| {
            collect_group(
                &state.params,
                ctx,
                &setup.specs,
                setup.group_size,
                &setup.grid,
                &setup.sched,
                StreamCoords {
                    run_seed: setup.run_seed,
                    step: state.step,
                    slot: slot as u64,
                    family: RolloutStreams::Training,
                },
            )
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn scheduler_microbatch(
    state: &TrainingState,
    setup: &TrainingSetup,
    context: &Context,
) -> Result<Vec<(Trajectory, RewardVector)>> {
    let g = collect_group(
        &state.params,
        context,
        &setup.specs,
        setup.microbatch_size,
        &setup.grid,
        &setup.sched,
        StreamCoords { run_seed: setup.run_seed, step: state.step, slot: 0, family: RolloutStreams::Scheduler },
    )?;
    let rv = g.reward_vectors();
    Ok(g.trajectories.into_iter().zip(rv).collect())
}

/// Sample contexts, collect groups, update weights, form advantages, take one
/// optimizer step per epoch.
pub fn training_step(state: &mut TrainingState, setup: &TrainingSetup) -> Result<StepDiagnostics> {
    training_step_with_data(state, setup).map(|(d, _)| d)
}

/// [`training_step`] that also hands back the groups and advantages.
pub fn training_step_with_data(
    state: &mut TrainingState,
    setup: &TrainingSetup,
) -> Result<(StepDiagnostics, StepData)> {
    let k = setup.objectives();
    let groups = collect_batch(state, setup)?;

    let all: Vec<RewardVector> = groups.iter().flat_map(|g| g.reward_vectors()).collect();
    let batch = rewards::batch_running_performance(&all)?;
    for (kk, (m, s)) in batch.r_bar.iter().zip(&setup.specs).enumerate() {
        if !(*m >= 0.0 && *m <= s.r_max) {
            return Err(Error::invariant(format!("batch mean {m} of objective {kk} outside [0, {}]", s.r_max)));
        }
    }
    let normalized =
        RunningPerformance { r_bar: batch.r_bar.iter().zip(&setup.specs).map(|(m, s)| m / s.r_max).collect() };

    let factors = if state.step.is_multiple_of(setup.scheduler_every) {
        let microbatch = match setup.scheduler.mode {
            WeightingMode::Adaptive { .. } => scheduler_microbatch(state, setup, &groups[0].context)?,
            _ => Vec::new(),
        };
        scheduler::scheduler_step(
            &mut state.scheduler,
            &state.params,
            &microbatch,
            &setup.grid,
            &setup.sched,
            &normalized,
            &setup.utopia,
            &setup.scheduler,
            state.step,
        )?
    } else {
        None
    };
    let weights = state.scheduler.weights.w.clone();
    if weights.len() != k {
        return Err(Error::contract("weight vector length differs from objective count"));
    }

    let mut advantages = Vec::with_capacity(groups.len());
    let mut pre_norm = 0.0;
    for g in &groups {
        match setup.advantages {
            AdvantageScheme::Dsan => {
                let a = dsan::dsan_advantages(&g.rewards, &weights, setup.scheduler.eps)?;
                pre_norm += a.pre_norm_variance;
                advantages.push(a.final_advantages);
            }
            AdvantageScheme::Naive => {
                pre_norm += dsan::naive_pre_norm_variance(&g.rewards, &weights)?;
                advantages.push(dsan::naive_weight_then_normalize(&g.rewards, &weights, setup.scheduler.eps)?);
            }
        }
    }
    let b = groups.len() as f64;

    let (mut loss, mut kl, mut clip_fraction) = (0.0, 0.0, 0.0);
    for epoch in 0..setup.epochs {
        let mut grad = vec![0.0; state.params.num_params()];
        let (mut l, mut k_sum, mut c_sum) = (0.0, 0.0, 0.0);
        for (g, adv) in groups.iter().zip(&advantages) {
            let out =
                grpo_loss_and_grad(g, adv, &state.params, &state.ref_params, &setup.grid, &setup.sched, &setup.clip)?;
            l += out.loss;
            k_sum += out.mean_kl_to_ref;
            c_sum += out.clip_fraction;
            for (a, x) in grad.iter_mut().zip(&out.grad) {
                *a += x / b;
            }
        }
        if epoch == 0 {
            loss = l / b;
            kl = k_sum / b;
        }
        clip_fraction += c_sum / b / setup.epochs as f64;
        optimizer_step(&mut state.optimizer, &mut state.params, &grad)?;
    }
    if !state.params.is_finite() {
        return Err(Error::numeric(format!("parameters became non-finite at step {}", state.step)));
    }

    let diag = StepDiagnostics {
        step: state.step,
        weights,
        factors,
        batch_mean_rewards: batch.r_bar,
        pre_norm_variance: pre_norm / b,
        mean_kl_to_ref: kl,
        clip_fraction,
        loss,
    };
    state.step += 1;
    Ok((diag, StepData { groups, advantages }))
}
