//! Synthetic heterogeneous terminal rewards.
//!
//! The default benchmark pairs one discrete, high-dispersion objective (a
//! hit/miss region, standing in for text-rendering accuracy) with three
//! smooth, low-dispersion objectives whose optima disagree. Every reward is
//! bounded in `[0, r_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::Context;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    /// `payoff · 1[‖x − center‖ ≤ radius]`.
    DiscreteRegion { center: Vec<f64>, radius: f64, payoff: f64 },
    /// `r_max · exp(−‖x − center‖² / (2 bandwidth²))`.
    SmoothRadial { center: Vec<f64>, bandwidth: f64 },
    /// `r_max · clip01(0.5 + 0.5 ⟨x, direction⟩ / scale)`.
    Directional { direction: Vec<f64>, scale: f64 },
    /// `r_max · exp(−dist(x, line)² / (2 width²))` for the line through
    /// `point` along `axis`.
    Ridge { point: Vec<f64>, axis: Vec<f64>, width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: RewardKind,
    pub r_max: f64,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = stats::l2_norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

impl RewardSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("reward '{}': {msg}", self.name)));
        if !(self.r_max.is_finite() && self.r_max > 0.0) {
            return bad("r_max must be positive");
        }
        let check_vec = |v: &Vec<f64>| v.len() == dim && v.iter().all(|x| x.is_finite());
        match &self.kind {
            RewardKind::DiscreteRegion { center, radius, payoff } => {
                if !check_vec(center) {
                    return bad("center has wrong dimension or non-finite entries");
                }
                if !(*radius > 0.0) {
                    return bad("radius must be positive");
                }
                if !(*payoff >= 0.0 && *payoff <= self.r_max) {
                    return bad("payoff must lie in [0, r_max]");
                }
            }
            RewardKind::SmoothRadial { center, bandwidth } => {
                if !check_vec(center) {
                    return bad("center has wrong dimension or non-finite entries");
                }
                if !(*bandwidth > 0.0) {
                    return bad("bandwidth must be positive");
                }
            }
            RewardKind::Directional { direction, scale } => {
                if !check_vec(direction) || unit(direction).is_none() {
                    return bad("direction must be a nonzero finite vector");
                }
                if !(*scale > 0.0) {
                    return bad("scale must be positive");
                }
            }
            RewardKind::Ridge { point, axis, width } => {
                if !check_vec(point) || !check_vec(axis) || unit(axis).is_none() {
                    return bad("ridge point/axis invalid");
                }
                if !(*width > 0.0) {
                    return bad("width must be positive");
                }
            }
        }
        Ok(())
    }

    /// Reward at `x0` for a context. The context's first mode shifts the
    /// landscape by its center and stretches it by its scale.
    pub fn evaluate(&self, x0: &[f64], context: &Context) -> f64 {
        let offset = context.offset();
        let s = context.scale();
        let local: Vec<f64> = x0.iter().zip(offset).map(|(x, o)| (x - o) / s).collect();
        let sq_dist = |c: &[f64]| local.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let r = match &self.kind {
            RewardKind::DiscreteRegion { center, radius, payoff } => {
                if sq_dist(center) <= radius * radius {
                    *payoff
                } else {
                    0.0
                }
            }
            RewardKind::SmoothRadial { center, bandwidth } => {
                self.r_max * (-sq_dist(center) / (2.0 * bandwidth * bandwidth)).exp()
            }
            RewardKind::Directional { direction, scale } => {
                let u = unit(direction).unwrap_or_else(|| direction.clone());
                let proj = stats::dot(&local, &u);
                self.r_max * (0.5 + 0.5 * proj / scale).clamp(0.0, 1.0)
            }
            RewardKind::Ridge { point, axis, width } => {
                let u = unit(axis).unwrap_or_else(|| axis.clone());
                let rel: Vec<f64> = local.iter().zip(point).map(|(a, b)| a - b).collect();
                let along = stats::dot(&rel, &u);
                let perp_sq = (rel.iter().map(|r| r * r).sum::<f64>() - along * along).max(0.0);
                self.r_max * (-perp_sq / (2.0 * width * width)).exp()
            }
        };
        r.clamp(0.0, self.r_max)
    }
}

/// Per-objective terminal rewards of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub values: Vec<f64>,
}

impl RewardVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Evaluates all `K ≥ 2` rewards at a terminal state.
pub fn evaluate_rewards(x0: &[f64], context: &Context, specs: &[RewardSpec]) -> Result<RewardVector> {
    if specs.len() < 2 {
        return Err(Error::config(format!("need at least two objectives, got {}", specs.len())));
    }
    if x0.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite terminal state"));
    }
    Ok(RewardVector { values: specs.iter().map(|s| s.evaluate(x0, context)).collect() })
}

/// Batch-mean rewards `R̄_k` over all `B·G` samples of a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningPerformance {
    pub r_bar: Vec<f64>,
}

pub fn batch_running_performance(batch: &[RewardVector]) -> Result<RunningPerformance> {
    let first = batch.first().ok_or_else(|| Error::domain("empty reward batch"))?;
    let k = first.len();
    let mut sums = vec![0.0; k];
    for rv in batch {
        if rv.len() != k {
            return Err(Error::contract("reward vectors of different lengths"));
        }
        for (s, v) in sums.iter_mut().zip(&rv.values) {
            *s += v;
        }
    }
    let n = batch.len() as f64;
    Ok(RunningPerformance { r_bar: sums.into_iter().map(|s| s / n).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtopiaSource {
    Configured,
    SpecialistRun,
}

/// Per-objective empirical upper bounds `U_k > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtopiaPoints {
    pub u: Vec<f64>,
    pub source: UtopiaSource,
}

impl UtopiaPoints {
    pub fn configured(u: Vec<f64>) -> Result<Self> {
        if u.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(format!("utopia points must be positive, got {u:?}")));
        }
        Ok(Self { u, source: UtopiaSource::Configured })
    }

    /// Normalized specialist bounds for (OCR, PickScore, DeQA, Aesthetic)
    /// reported for the full-scale text-to-image setting.
    pub fn reference_preset() -> Self {
        Self { u: vec![0.92, 0.90, 0.86, 0.62], source: UtopiaSource::Configured }
    }
}

/// Largest sliding-window mean of a trace. Traces shorter than the window
/// contribute their overall mean.
pub fn max_window_mean(trace: &[f64], window: usize) -> Option<f64> {
    if trace.is_empty() {
        return None;
    }
    let w = window.max(1).min(trace.len());
    let mut acc: f64 = trace[..w].iter().sum();
    let mut best = acc;
    for i in w..trace.len() {
        acc += trace[i] - trace[i - w];
        best = best.max(acc);
    }
    Some(best / w as f64)
}

/// `U_k` = best windowed mean of objective `k`'s specialist trace, optionally
/// floored at a preset.
pub fn estimate_utopia(
    specialist_histories: &[Vec<f64>],
    window: usize,
    floor: Option<&UtopiaPoints>,
) -> Result<UtopiaPoints> {
    if let Some(f) = floor {
        if f.u.len() != specialist_histories.len() {
            return Err(Error::contract("utopia floor has the wrong number of objectives"));
        }
    }
    let mut u = Vec::with_capacity(specialist_histories.len());
    for (k, trace) in specialist_histories.iter().enumerate() {
        let mut best = max_window_mean(trace, window)
            .ok_or_else(|| Error::domain(format!("empty specialist trace for objective {k}")))?;
        if let Some(f) = floor {
            best = best.max(f.u[k]);
        }
        if !(best > 0.0) {
            return Err(Error::domain(format!("specialist for objective {k} never scored above 0")));
        }
        u.push(best);
    }
    Ok(UtopiaPoints { u, source: UtopiaSource::SpecialistRun })
}

/// The default four-objective benchmark in `d = 2`.
///
/// Objective 0 is a hit/miss region; 1–3 are smooth with deliberately small
/// dispersion under the initial policy and partially conflicting optima.
pub fn default_benchmark() -> Vec<RewardSpec> {
    vec![
        RewardSpec {
            name: "text".into(),
            kind: RewardKind::DiscreteRegion { center: vec![1.0, 0.0], radius: 0.9, payoff: 1.0 },
            r_max: 1.0,
        },
        RewardSpec {
            name: "preference".into(),
            kind: RewardKind::SmoothRadial { center: vec![-0.52, 2.95], bandwidth: 10.0 },
            r_max: 1.0,
        },
        RewardSpec {
            name: "quality".into(),
            kind: RewardKind::Directional { direction: vec![0.5, -0.866], scale: 13.0 },
            r_max: 1.0,
        },
        RewardSpec {
            name: "aesthetic".into(),
            kind: RewardKind::Ridge { point: vec![2.6, 1.5], axis: vec![-0.5, 0.866], width: 8.0 },
            r_max: 1.0,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ctx() -> Context {
        Context::neutral(0, 2)
    }

    #[test]
    fn peak_values() {
        let specs = default_benchmark();
        assert_eq!(specs[0].evaluate(&[1.0, 0.0], &ctx()), 1.0);
        assert!((specs[1].evaluate(&[-0.52, 2.95], &ctx()) - 1.0).abs() < 1e-15);
        assert!((specs[3].evaluate(&[2.6, 1.5], &ctx()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn far_away_rewards_vanish() {
        let specs = default_benchmark();
        // along the directional reward's negative side
        let far = [-800.0, -200.0];
        for s in &specs {
            assert!(s.evaluate(&far, &ctx()) < 1e-12, "{} = {}", s.name, s.evaluate(&far, &ctx()));
        }
    }

    #[test]
    fn bounded_over_random_states() {
        let specs = default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let x: Vec<f64> = (0..2)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    3.0 * z
                })
                .collect::<Vec<f64>>();
            for s in &specs {
                let r = s.evaluate(&x, &ctx());
                assert!((0.0..=s.r_max).contains(&r));
            }
        }
    }

    #[test]
    fn context_shifts_landscape() {
        let specs = default_benchmark();
        let shifted = Context::new(1, vec![crate::flowmatch::Mode { center: vec![0.5, 0.5], scale: 1.0 }]).unwrap();
        assert_eq!(specs[0].evaluate(&[1.5, 0.5], &shifted), 1.0);
    }

    #[test]
    fn evaluate_rewards_requires_two_objectives() {
        let specs = default_benchmark();
        assert!(matches!(evaluate_rewards(&[0.0, 0.0], &ctx(), &specs[..1]), Err(Error::Config(_))));
        assert_eq!(evaluate_rewards(&[0.0, 0.0], &ctx(), &specs).unwrap().len(), 4);
    }

    #[test]
    fn spec_validation() {
        let mut s = default_benchmark().remove(0);
        assert!(s.validate(2).is_ok());
        assert!(s.validate(3).is_err());
        s.r_max = 0.5;
        assert!(s.validate(2).is_err(), "payoff above r_max");
    }

    #[test]
    fn running_performance() {
        let one = RewardVector { values: vec![0.3, 0.7] };
        assert_eq!(batch_running_performance(std::slice::from_ref(&one)).unwrap().r_bar, one.values);
        let two = [RewardVector { values: vec![0.0, 1.0] }, RewardVector { values: vec![1.0, 0.0] }];
        assert_eq!(batch_running_performance(&two).unwrap().r_bar, vec![0.5, 0.5]);
        assert!(matches!(batch_running_performance(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn running_performance_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let batch: Vec<RewardVector> =
            (0..1000).map(|_| RewardVector { values: (0..4).map(|_| rng.random::<f64>()).collect() }).collect();
        let got = batch_running_performance(&batch).unwrap();
        for k in 0..4 {
            let col: Vec<f64> = batch.iter().map(|r| r.values[k]).collect();
            // pairwise summation as an independent route
            fn pairwise(xs: &[f64]) -> f64 {
                if xs.len() <= 2 {
                    return xs.iter().sum();
                }
                let (a, b) = xs.split_at(xs.len() / 2);
                pairwise(a) + pairwise(b)
            }
            let oracle = pairwise(&col) / col.len() as f64;
            assert!((got.r_bar[k] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn utopia_from_constant_and_monotone_traces() {
        let u = estimate_utopia(&[vec![0.9; 120], vec![0.9; 10]], 50, None).unwrap();
        assert!((u.u[0] - 0.9).abs() < 1e-12);
        assert!((u.u[1] - 0.9).abs() < 1e-12);

        let trace: Vec<f64> = (0..=70).map(|i| 0.1 + 0.01 * i as f64).collect();
        let got = estimate_utopia(std::slice::from_ref(&trace), 50, None).unwrap().u[0];
        let brute = (0..=trace.len() - 50)
            .map(|s| trace[s..s + 50].iter().sum::<f64>() / 50.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let last = trace[trace.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!((got - brute).abs() < 1e-12);
        assert!((got - last).abs() < 1e-12);
    }

    #[test]
    fn utopia_preset_and_errors() {
        let preset = UtopiaPoints::reference_preset();
        assert_eq!(preset.u, vec![0.92, 0.90, 0.86, 0.62]);
        assert_eq!(preset.source, UtopiaSource::Configured);
        assert!(matches!(estimate_utopia(&[vec![0.5], vec![]], 50, None), Err(Error::Domain(_))));
        let floored =
            estimate_utopia(&[vec![0.1; 60]], 50, Some(&UtopiaPoints::configured(vec![0.4]).unwrap())).unwrap();
        assert_eq!(floored.u, vec![0.4]);
    }
}
