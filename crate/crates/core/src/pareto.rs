//! Domination, Pareto filtering and hypervolume (all objectives maximized).

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamPurpose};
use crate::stats;

/// Per-objective divisors mapping raw scores to comparable units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub divisors: Vec<f64>,
}

impl NormalizationSpec {
    pub fn new(divisors: Vec<f64>) -> Result<Self> {
        if divisors.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::config(format!("normalization divisors must be positive, got {divisors:?}")));
        }
        Ok(Self { divisors })
    }

    /// Divisors for (OCR accuracy, PickScore, DeQA, Aesthetic).
    pub fn text_to_image() -> Self {
        Self { divisors: vec![1.0, 26.0, 5.0, 10.0] }
    }

    pub fn identity(k: usize) -> Self {
        Self { divisors: vec![1.0; k] }
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        check_len(raw, &self.divisors)?;
        Ok(raw.iter().zip(&self.divisors).map(|(r, d)| r / d).collect())
    }
}

/// Named reference points in normalized (OCR, PickScore, DeQA, Aesthetic)
/// units.
pub struct ReferencePoint;

impl ReferencePoint {
    /// The normalized base model.
    pub fn base() -> Vec<f64> {
        vec![0.59, 0.835, 0.814, 0.539]
    }

    /// An early training checkpoint.
    pub fn early() -> Vec<f64> {
        vec![0.38, 0.81, 0.60, 0.50]
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `a ≻ b`: at least as good everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    check_len(a, b)?;
    Ok(dominates_unchecked(a, b))
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        strict |= x > y;
    }
    strict
}

/// Indices of the non-dominated points, in input order.
pub fn pareto_indices(points: &[Vec<f64>]) -> Result<Vec<usize>> {
    let first = points.first().ok_or_else(|| Error::domain("Pareto filter of an empty set"))?;
    if points.iter().any(|p| p.len() != first.len()) {
        return Err(Error::contract("points of different dimension"));
    }
    // A dominator is lexicographically larger, so scanning in descending
    // lexicographic order only needs to compare against the front so far.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[j]
            .iter()
            .zip(&points[i])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| dominates_unchecked(&points[f], &points[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    Ok(front)
}

pub fn pareto_filter(points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(pareto_indices(points)?.into_iter().map(|i| points[i].clone()).collect())
}

/// Exact Lebesgue measure of `∪_a [ref, a]`.
///
/// Coordinates at or below the reference contribute nothing, so such points
/// are dropped. Uses a recursive sweep over the last coordinate down to a
/// sorted 2-D staircase.
pub fn hypervolume_exact(points: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    for p in points {
        check_len(p, reference)?;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("non-finite objective point"));
        }
    }
    let shifted: Vec<Vec<f64>> = points
        .iter()
        .filter(|p| p.iter().zip(reference).all(|(x, r)| x > r))
        .map(|p| p.iter().zip(reference).map(|(x, r)| x - r).collect())
        .collect();
    if shifted.is_empty() {
        return Ok(0.0);
    }
    let mut refs: Vec<&[f64]> = shifted.iter().map(|p| p.as_slice()).collect();
    Ok(sweep(&mut refs, reference.len()))
}

/// Volume dominated by `pts` over the origin in the first `d` coordinates;
/// every coordinate is positive.
fn sweep(pts: &mut [&[f64]], d: usize) -> f64 {
    match d {
        0 => 0.0,
        1 => pts.iter().map(|p| p[0]).fold(0.0, f64::max),
        2 => {
            pts.sort_by(|a, b| b[0].total_cmp(&a[0]));
            let mut area = 0.0;
            let mut best_y = 0.0;
            for p in pts.iter() {
                if p[1] > best_y {
                    area += p[0] * (p[1] - best_y);
                    best_y = p[1];
                }
            }
            area
        }
        _ => {
            let last = d - 1;
            pts.sort_by(|a, b| b[last].total_cmp(&a[last]));
            let mut volume = 0.0;
            for i in 0..pts.len() {
                let next = if i + 1 < pts.len() { pts[i + 1][last] } else { 0.0 };
                let height = pts[i][last] - next;
                if height > 0.0 {
                    let mut slice: Vec<&[f64]> = pts[..=i].to_vec();
                    volume += height * sweep(&mut slice, d - 1);
                }
            }
            volume
        }
    }
}

/// Uniform Monte Carlo estimate of the hypervolume in the box from `ref` to
/// the coordinate-wise maximum, with its binomial standard error.
pub fn hypervolume_mc(points: &[Vec<f64>], reference: &[f64], n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    for p in points {
        check_len(p, reference)?;
    }
    let upper: Vec<f64> =
        (0..reference.len()).map(|k| points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let sides: Vec<f64> = upper.iter().zip(reference).map(|(u, r)| u - r).collect();
    if points.is_empty() || n_samples == 0 || sides.iter().any(|s| !(*s > 0.0)) {
        return Ok((0.0, 0.0));
    }
    let box_volume: f64 = sides.iter().product();
    let mut rng = rng::stream(seed, StreamPurpose::Evaluation, &[n_samples as u64]);
    let mut sample = vec![0.0; reference.len()];
    let mut hits = 0usize;
    for _ in 0..n_samples {
        for (k, s) in sample.iter_mut().enumerate() {
            *s = reference[k] + sides[k] * rng.random::<f64>();
        }
        if points.iter().any(|p| p.iter().zip(&sample).all(|(a, x)| a >= x)) {
            hits += 1;
        }
    }
    let frac = hits as f64 / n_samples as f64;
    let se = (frac * (1.0 - frac) / n_samples as f64).sqrt() * box_volume;
    Ok((frac * box_volume, se))
}

/// `Π_k (model_k − base_k)` when every objective improved, else 0.
pub fn product_improvement_hv(model: &[f64], base: &[f64]) -> Result<f64> {
    check_len(model, base)?;
    let diffs: Vec<f64> = model.iter().zip(base).map(|(m, b)| m - b).collect();
    if diffs.iter().all(|d| *d > 0.0) {
        Ok(diffs.iter().product())
    } else {
        Ok(0.0)
    }
}

/// Means of consecutive non-overlapping windows; a trailing partial window
/// is dropped.
pub fn window_means(log: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    if window == 0 {
        return Vec::new();
    }
    log.chunks_exact(window)
        .map(|chunk| {
            let k = chunk[0].len();
            (0..k).map(|j| stats::mean(&chunk.iter().map(|r| r[j]).collect::<Vec<_>>())).collect()
        })
        .collect()
}

/// For each window `i`, the hypervolume of the Pareto front of window means
/// `0..=i` (after normalization) against `reference`.
pub fn windowed_cumulative_hv(
    log: &[Vec<f64>],
    window: usize,
    reference: &[f64],
    normalization: &NormalizationSpec,
) -> Result<Vec<(usize, f64)>> {
    if window == 0 || log.len() < window {
        log::warn!("reward log of {} steps is shorter than one window of {window}", log.len());
        return Ok(Vec::new());
    }
    let means = window_means(log, window);
    let mut points = Vec::with_capacity(means.len());
    let mut series = Vec::with_capacity(means.len());
    for (i, m) in means.iter().enumerate() {
        points.push(normalization.apply(m)?);
        let front = pareto_filter(&points)?;
        series.push((i, hypervolume_exact(&front, reference)?));
    }
    Ok(series)
}

/// Writes points as comma-separated rows under a header of objective names.
pub fn write_points<W: Write>(writer: W, names: &[String], points: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(names).map_err(csv_error)?;
    for p in points {
        check_len(p, &vec![0.0; names.len()])?;
        w.write_record(p.iter().map(|x| x.to_string())).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads points written by [`write_points`]; returns `(names, points)`.
pub fn read_points<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(reader);
    let names: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let p = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::domain(format!("bad number {f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if p.len() != names.len() {
            return Err(Error::domain("row length differs from header"));
        }
        points.push(p);
    }
    Ok((names, points))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::domain(format!("delimited text: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn domination_cases() {
        assert!(!dominates(&[1.0, 1.0], &[1.0, 1.0]).unwrap());
        assert!(dominates(&[1.0, 1.0], &[0.0, 0.0]).unwrap());
        assert!(!dominates(&[1.0, 0.0], &[0.0, 1.0]).unwrap());
        assert!(!dominates(&[0.0, 1.0], &[1.0, 0.0]).unwrap());
        assert!(matches!(dominates(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn filter_cases() {
        assert_eq!(pareto_filter(&[vec![0.3, 0.2]]).unwrap(), vec![vec![0.3, 0.2]]);
        let chain = vec![vec![0.5, 0.5], vec![1.0, 1.0], vec![0.0, 0.0]];
        assert_eq!(pareto_filter(&chain).unwrap(), vec![vec![1.0, 1.0]]);
        let dup = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(pareto_indices(&dup).unwrap(), vec![0, 1, 2]);
        assert!(matches!(pareto_filter(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn hypervolume_hand_cases() {
        assert_eq!(hypervolume_exact(&[vec![1.0, 1.0]], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(hypervolume_exact(&[vec![0.5, 1.0], vec![1.0, 0.5]], &[0.0, 0.0]).unwrap(), 0.75);
        assert_eq!(hypervolume_exact(&[vec![2.0, 3.0, 4.0]], &[1.0, 1.0, 1.0]).unwrap(), 6.0);
        // 3-D inclusion-exclusion: two unit-ish boxes overlapping in [0,1]x[0,1]x[0,1]
        let pts = vec![vec![2.0, 1.0, 1.0], vec![1.0, 1.0, 2.0]];
        assert!((hypervolume_exact(&pts, &[0.0; 3]).unwrap() - 3.0).abs() < 1e-15);
        // a point below the reference in one coordinate adds nothing
        assert_eq!(hypervolume_exact(&[vec![1.0, -1.0]], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(hypervolume_exact(&[vec![3.0]], &[1.0]).unwrap(), 2.0);
        assert_eq!(hypervolume_exact(&[], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn mc_cases() {
        let (est, se) = hypervolume_mc(&[vec![1.0, 1.0]], &[0.0, 0.0], 1000, 3).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(se, 0.0);
        assert_eq!(hypervolume_mc(&[vec![0.0, 1.0]], &[0.0, 0.0], 1000, 3).unwrap(), (0.0, 0.0));
        let pts = vec![vec![0.5, 1.0], vec![1.0, 0.5]];
        let (est, se) = hypervolume_mc(&pts, &[0.0, 0.0], 100_000, 9).unwrap();
        assert!((est - 0.75).abs() < 3.0 * se);
    }

    #[test]
    fn mc_error_shrinks_like_inverse_sqrt() {
        let pts = vec![vec![0.5, 1.0, 0.7], vec![1.0, 0.5, 0.4], vec![0.3, 0.3, 1.0]];
        let ses: Vec<f64> =
            [1_000usize, 10_000, 100_000].iter().map(|&n| hypervolume_mc(&pts, &[0.0; 3], n, 5).unwrap().1).collect();
        for w in ses.windows(2) {
            let r = w[0] / w[1];
            assert!((r - 10f64.sqrt()).abs() < 0.5, "ratio {r}");
        }
    }

    #[test]
    fn product_improvement_cases() {
        assert!((product_improvement_hv(&[2.0, 3.0], &[1.0, 1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(product_improvement_hv(&[2.0, 0.5], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(product_improvement_hv(&[2.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn windowed_cases() {
        let flat = vec![vec![0.5, 0.5]; 120];
        let s = windowed_cumulative_hv(&flat, 50, &[0.5, 0.5], &NormalizationSpec::identity(2)).unwrap();
        assert_eq!(s, vec![(0, 0.0), (1, 0.0)]);
        let above = vec![vec![0.7, 0.9]; 50];
        let s = windowed_cumulative_hv(&above, 50, &[0.5, 0.5], &NormalizationSpec::identity(2)).unwrap();
        assert!((s[0].1 - 0.2 * 0.4).abs() < 1e-12);
        assert!(windowed_cumulative_hv(&above[..10], 50, &[0.0, 0.0], &NormalizationSpec::identity(2))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn points_roundtrip() {
        let names = vec!["a".to_string(), "b".to_string()];
        let pts = vec![vec![0.1, 0.25], vec![1.0 / 3.0, 7.0]];
        let mut buf = Vec::new();
        write_points(&mut buf, &names, &pts).unwrap();
        let (n, p) = read_points(buf.as_slice()).unwrap();
        assert_eq!(n, names);
        assert_eq!(p, pts);
    }

    fn point_set(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, k), 1..25)
    }

    proptest! {
        #[test]
        fn adding_a_point_never_decreases(pts in point_set(3), extra in prop::collection::vec(0.0f64..1.0, 3)) {
            let r = [0.0; 3];
            let before = hypervolume_exact(&pts, &r).unwrap();
            let mut more = pts.clone();
            more.push(extra);
            prop_assert!(hypervolume_exact(&more, &r).unwrap() >= before - 1e-12);
        }

        #[test]
        fn dominated_points_do_not_matter(pts in point_set(4)) {
            let r = [0.0; 4];
            let front = pareto_filter(&pts).unwrap();
            let a = hypervolume_exact(&pts, &r).unwrap();
            let b = hypervolume_exact(&front, &r).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn objective_permutation_invariance(pts in point_set(3), r in prop::collection::vec(0.0f64..0.3, 3)) {
            let perm = [2usize, 0, 1];
            let pp: Vec<Vec<f64>> = pts.iter().map(|p| perm.iter().map(|&i| p[i]).collect()).collect();
            let rp: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
            let a = hypervolume_exact(&pts, &r).unwrap();
            let b = hypervolume_exact(&pp, &rp).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn domination_is_antisymmetric(a in prop::collection::vec(0u8..3, 3), b in prop::collection::vec(0u8..3, 3)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert!(!(dominates(&a, &b).unwrap() && dominates(&b, &a).unwrap()));
        }
    }
}
