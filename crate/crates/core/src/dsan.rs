//! Dual-stage adaptive normalization of multi-objective group rewards.
//!
//! Stage 1 standardizes every objective within the group, stage 2 combines
//! the standardized columns with the current weights and standardizes the
//! composite again. Both stages use the population standard deviation and a
//! shared `eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const DEFAULT_EPS: f64 = 1e-8;

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
    }
}

/// `G × K` rewards of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards(Matrix);

impl GroupRewards {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let m = Matrix::from_rows(rows)?;
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite reward"));
        }
        Ok(Self(m))
    }

    pub fn group_size(&self) -> usize {
        self.0.rows
    }

    pub fn objectives(&self) -> usize {
        self.0.cols
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.0.column(k)
    }

    /// Copy with column `k` multiplied by `scales[k]`.
    pub fn scaled(&self, scales: &[f64]) -> Self {
        let mut m = self.0.clone();
        for r in 0..m.rows {
            for c in 0..m.cols {
                let v = m.get(r, c) * scales[c];
                m.set(r, c, v);
            }
        }
        Self(m)
    }
}

/// `(x − mean) / (std + eps)`; a constant input maps to zeros.
pub fn standardize(xs: &[f64], eps: f64) -> Vec<f64> {
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if lo == hi {
        return vec![0.0; xs.len()];
    }
    let m = stats::mean(xs);
    let s = stats::population_std(xs);
    xs.iter().map(|x| (x - m) / (s + eps)).collect()
}

fn check_group(g: usize) -> Result<()> {
    if g < 2 {
        return Err(Error::domain(format!("group statistics need G >= 2, got {g}")));
    }
    Ok(())
}

/// Stage 1: per-objective group standardization.
pub fn stage1_standardize(rewards: &GroupRewards, eps: f64) -> Result<Matrix> {
    check_group(rewards.group_size())?;
    let mut out = Matrix::zeros(rewards.group_size(), rewards.objectives());
    for k in 0..rewards.objectives() {
        out.set_column(k, &standardize(&rewards.column(k), eps));
    }
    Ok(out)
}

pub fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("weights {weights:?} are not on the simplex")));
    }
    Ok(())
}

/// Stage 2: weighted aggregation `V = Ã w` and re-standardization.
///
/// Returns the final advantages and the population variance of `V`.
pub fn stage2_aggregate(stage1: &Matrix, weights: &[f64], eps: f64) -> Result<(Vec<f64>, f64)> {
    let (v, var) = aggregate(stage1, weights)?;
    Ok((standardize(&v, eps), var))
}

fn aggregate(stage1: &Matrix, weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_simplex(weights)?;
    if weights.len() != stage1.cols() {
        return Err(Error::contract(format!("{} weights for {} objectives", weights.len(), stage1.cols())));
    }
    check_group(stage1.rows())?;
    let v: Vec<f64> = (0..stage1.rows()).map(|i| stats::dot(stage1.row(i), weights)).collect();
    let var = stats::population_variance(&v);
    Ok((v, var))
}

/// Stage-1 matrix, composite, final advantages and the composite's
/// pre-normalization variance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageMatrix {
    pub stage1: Matrix,
    pub aggregated: Vec<f64>,
    pub final_advantages: Vec<f64>,
    pub pre_norm_variance: f64,
}

pub fn dsan_advantages(rewards: &GroupRewards, weights: &[f64], eps: f64) -> Result<AdvantageMatrix> {
    let stage1 = stage1_standardize(rewards, eps)?;
    let (aggregated, pre_norm_variance) = aggregate(&stage1, weights)?;
    let final_advantages = standardize(&aggregated, eps);
    Ok(AdvantageMatrix { stage1, aggregated, final_advantages, pre_norm_variance })
}

/// Weight-then-normalize baseline: standardize `Σ_k w_k R_k` directly.
pub fn naive_weight_then_normalize(rewards: &GroupRewards, weights: &[f64], eps: f64) -> Result<Vec<f64>> {
    let (total, _) = aggregate(rewards.matrix(), weights)?;
    Ok(standardize(&total, eps))
}

/// Variance of the weighted raw-reward composite, the naive analogue of
/// [`AdvantageMatrix::pre_norm_variance`].
pub fn naive_pre_norm_variance(rewards: &GroupRewards, weights: &[f64]) -> Result<f64> {
    Ok(aggregate(rewards.matrix(), weights)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(values: &[f64]) -> GroupRewards {
        GroupRewards::new(&values.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let s = stage1_standardize(&col(&[5.0, 5.0, 5.0]), DEFAULT_EPS).unwrap();
        assert_eq!(s.column(0), vec![0.0; 3]);
        let s = stage1_standardize(&col(&[0.1, 0.1, 0.1]), DEFAULT_EPS).unwrap();
        assert_eq!(s.column(0), vec![0.0; 3]);
    }

    #[test]
    fn standardizes_one_two_three() {
        // independent two-pass oracle
        let xs = [1.0, 2.0, 3.0];
        let m = xs.iter().sum::<f64>() / 3.0;
        let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0).sqrt();
        assert!((sd - 0.816496580927726).abs() < 1e-12);
        let s = stage1_standardize(&col(&xs), 1e-8).unwrap().column(0);
        for (got, x) in s.iter().zip(xs) {
            assert!((got - (x - m) / (sd + 1e-8)).abs() < 1e-15);
        }
        assert!((s[0] + 1.224744871).abs() < 1e-6);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 1.224744871).abs() < 1e-6);
    }

    #[test]
    fn group_of_one_is_rejected() {
        assert!(matches!(stage1_standardize(&col(&[1.0]), DEFAULT_EPS), Err(Error::Domain(_))));
    }

    #[test]
    fn single_objective_is_idempotent() {
        let r = col(&[0.3, 1.7, -0.2, 0.9]);
        let s1 = stage1_standardize(&r, DEFAULT_EPS).unwrap();
        let (fin, _) = stage2_aggregate(&s1, &[1.0], DEFAULT_EPS).unwrap();
        for (a, b) in fin.iter().zip(s1.column(0)) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn duplicated_objective_matches_single() {
        let base = [0.3, 1.7, -0.2, 0.9];
        let single = dsan_advantages(&col(&base), &[1.0], DEFAULT_EPS).unwrap();
        let dup = GroupRewards::new(&base.iter().map(|v| vec![*v, *v]).collect::<Vec<_>>()).unwrap();
        let double = dsan_advantages(&dup, &[0.5, 0.5], DEFAULT_EPS).unwrap();
        assert_eq!(single.final_advantages, double.final_advantages);
    }

    #[test]
    fn anti_correlated_columns_cancel() {
        let mut m = Matrix::zeros(3, 2);
        for (i, (a, b)) in [(1.0, -1.0), (0.0, 0.0), (-1.0, 1.0)].into_iter().enumerate() {
            m.set(i, 0, a);
            m.set(i, 1, b);
        }
        let (fin, var) = stage2_aggregate(&m, &[0.5, 0.5], DEFAULT_EPS).unwrap();
        assert_eq!(var, 0.0);
        assert_eq!(fin, vec![0.0; 3]);
    }

    #[test]
    fn simplex_violation_is_contract_error() {
        let m = Matrix::zeros(3, 2);
        assert!(matches!(stage2_aggregate(&m, &[0.7, 0.7], DEFAULT_EPS), Err(Error::Contract(_))));
        assert!(matches!(stage2_aggregate(&m, &[1.2, -0.2], DEFAULT_EPS), Err(Error::Contract(_))));
        assert!(matches!(stage2_aggregate(&m, &[1.0], DEFAULT_EPS), Err(Error::Contract(_))));
    }

    #[test]
    fn group_of_two_is_symmetric_pair() {
        let r = GroupRewards::new(&[vec![0.2, 3.0], vec![0.9, 1.0]]).unwrap();
        let a = dsan_advantages(&r, &[0.3, 0.7], DEFAULT_EPS).unwrap();
        assert_eq!(a.final_advantages[0], -a.final_advantages[1]);
    }

    #[test]
    fn naive_reduces_to_stage1_for_one_objective() {
        let r = col(&[0.3, 1.7, -0.2, 0.9]);
        assert_eq!(
            naive_weight_then_normalize(&r, &[1.0], DEFAULT_EPS).unwrap(),
            stage1_standardize(&r, DEFAULT_EPS).unwrap().column(0)
        );
        let flat = GroupRewards::new(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(naive_weight_then_normalize(&flat, &[0.5, 0.5], DEFAULT_EPS).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn naive_baseline_is_hijacked_by_dispersion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut corr_sum = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let rows: Vec<Vec<f64>> = (0..24).map(|_| vec![100.0 * rng.random::<f64>(), rng.random::<f64>()]).collect();
            let r = GroupRewards::new(&rows).unwrap();
            let naive = naive_weight_then_normalize(&r, &[0.5, 0.5], DEFAULT_EPS).unwrap();
            let own = stage1_standardize(&r, DEFAULT_EPS).unwrap().column(0);
            corr_sum += stats::pearson(&naive, &own).unwrap();
        }
        assert!(corr_sum / trials as f64 >= 0.99);
    }

    fn reward_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..30, 1usize..6).prop_flat_map(|(g, k)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, k), g))
    }

    proptest! {
        #[test]
        fn permutation_equivariance(rows in reward_matrix(), shift in 0usize..100) {
            let k = rows[0].len();
            let w = vec![1.0 / k as f64; k];
            let a = dsan_advantages(&GroupRewards::new(&rows).unwrap(), &w, DEFAULT_EPS).unwrap();
            let g = rows.len();
            let mut rotated = rows.clone();
            rotated.rotate_left(shift % g);
            let b = dsan_advantages(&GroupRewards::new(&rotated).unwrap(), &w, DEFAULT_EPS).unwrap();
            for i in 0..g {
                prop_assert!((a.final_advantages[(i + shift) % g] - b.final_advantages[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn final_advantages_are_calibrated(rows in reward_matrix()) {
            let k = rows[0].len();
            let w = vec![1.0 / k as f64; k];
            let a = dsan_advantages(&GroupRewards::new(&rows).unwrap(), &w, DEFAULT_EPS).unwrap();
            let m = stats::mean(&a.final_advantages);
            let s = stats::population_std(&a.final_advantages);
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!(s <= 1.0 + 1e-12);
            let sv = a.pre_norm_variance.sqrt();
            if sv > 0.0 && s > 0.0 {
                prop_assert!(s >= 1.0 - 10.0 * DEFAULT_EPS / sv);
            }
            for c in 0..k {
                let col = a.stage1.column(c);
                prop_assert!(stats::mean(&col).abs() <= 1e-9);
                prop_assert!(stats::population_std(&col) <= 1.0 + 1e-12);
            }
        }
    }
}
