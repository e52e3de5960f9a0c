//! Softmax probabilities, multi-class log loss and its derivatives.
//!
//! Two parametrizations of the per-sample loss `L_i = -log p_{i,y_i}` are
//! supported. The classical one treats all `K` scores as free; the
//! adaptive-base-class (ABC) one fixes a base class `b` and eliminates its
//! score through the sum-to-zero constraint `F_b = -sum_{k != b} F_k`.

use crate::error::{Error, Result};

/// Probabilities are clamped to this value before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

/// Softmax of `scores` written into `out`, with max-subtraction.
#[inline]
pub fn softmax_into(scores: &[f64], out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax_probs(scores: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    out
}

/// `-log p` with the probability floor applied.
#[inline]
pub fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Per-class training losses `L^(k) = -sum_{i: y_i = k} log p_{i,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLosses {
    pub per_class: Vec<f64>,
    pub total: f64,
}

/// Per-class and total loss from a row-major `N x K` probability matrix.
pub fn class_losses(probs: &[f64], labels: &[u32], num_classes: usize) -> ClassLosses {
    let mut per_class = vec![0.0; num_classes];
    for (row, &y) in probs.chunks_exact(num_classes).zip(labels) {
        per_class[y as usize] += neg_log(row[y as usize]);
    }
    let total = per_class.iter().sum();
    ClassLosses { per_class, total }
}

#[inline]
fn indicator(label: usize, k: usize) -> f64 {
    if label == k {
        1.0
    } else {
        0.0
    }
}

/// Classical first and second derivative of `L_i` with respect to `F_{i,k}`.
#[inline]
pub fn classical_derivs(probs: &[f64], label: usize, k: usize) -> (f64, f64) {
    let p = probs[k];
    (-(indicator(label, k) - p), p * (1.0 - p))
}

/// Derivatives of `L_i` with respect to `F_{i,k}` when `base` is the class
/// eliminated by the sum-to-zero constraint.
pub fn abc_derivs(probs: &[f64], label: usize, k: usize, base: usize) -> Result<(f64, f64)> {
    if k == base {
        return Err(Error::BaseClassConflict(base));
    }
    Ok(abc_derivs_unchecked(probs, label, k, base))
}

#[inline]
pub(crate) fn abc_derivs_unchecked(probs: &[f64], label: usize, k: usize, base: usize) -> (f64, f64) {
    abc_derivs_from(probs[k], probs[base], indicator(label, k), indicator(label, base))
}

/// ABC derivatives from the probabilities and label indicators of class `k`
/// and the base class.
#[inline]
pub(crate) fn abc_derivs_from(pk: f64, pb: f64, rk: f64, rb: f64) -> (f64, f64) {
    let g = (rb - pb) - (rk - pk);
    let h = pb * (1.0 - pb) + pk * (1.0 - pk) + 2.0 * pb * pk;
    (g, h)
}

/// Full `K x K` Hessian of `L_i` in the classical parametrization, row-major.
/// It is always singular.
pub fn classical_hessian(probs: &[f64]) -> Vec<f64> {
    let k = probs.len();
    let mut h = vec![0.0; k * k];
    for a in 0..k {
        for c in 0..k {
            h[a * k + c] = if a == c {
                probs[a] * (1.0 - probs[a])
            } else {
                -probs[a] * probs[c]
            };
        }
    }
    h
}

/// `(K-1) x (K-1)` Hessian of `L_i` in the free coordinates `{F_k}_{k != base}`.
///
/// The diagonal is the ABC second derivative. Off-diagonal entries follow
/// from `dp_k/dF_s = p_k (p_b - p_s)` and `dp_b/dF_s = p_b (p_b - p_s - 1)`:
/// `H_{k,s} = p_k p_b - p_k p_s + p_b (1 - p_b) + p_b p_s`.
pub fn abc_hessian(probs: &[f64], base: usize) -> Vec<f64> {
    let free: Vec<usize> = (0..probs.len()).filter(|&k| k != base).collect();
    let n = free.len();
    let pb = probs[base];
    let mut h = vec![0.0; n * n];
    for (a, &k) in free.iter().enumerate() {
        for (c, &s) in free.iter().enumerate() {
            let (pk, ps) = (probs[k], probs[s]);
            h[a * n + c] = if k == s {
                pb * (1.0 - pb) + pk * (1.0 - pk) + 2.0 * pb * pk
            } else {
                pk * pb - pk * ps + pb * (1.0 - pb) + pb * ps
            };
        }
    }
    h
}

/// Determinant of [`abc_hessian`]; the same for every choice of base.
pub fn hessian_det(probs: &[f64], base: usize) -> f64 {
    determinant(abc_hessian(probs, base), probs.len() - 1)
}

/// Determinant of a row-major `n x n` matrix by partially pivoted elimination.
pub fn determinant(mut m: Vec<f64>, n: usize) -> f64 {
    assert_eq!(m.len(), n * n);
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a * n + col].abs().total_cmp(&m[b * n + col].abs()))
            .unwrap();
        if m[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        let d = m[col * n + col];
        det *= d;
        for row in col + 1..n {
            let factor = m[row * n + col] / d;
            for j in col..n {
                m[row * n + j] -= factor * m[col * n + j];
            }
        }
    }
    det
}

/// Function values `F` and their softmax probabilities for `N` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    num_classes: usize,
    scores: Vec<f64>,
    probs: Vec<f64>,
}

impl ScoreMatrix {
    /// All scores zero, all probabilities `1/K`.
    pub fn zeros(n_samples: usize, num_classes: usize) -> Self {
        ScoreMatrix {
            num_classes,
            scores: vec![0.0; n_samples * num_classes],
            probs: vec![1.0 / num_classes as f64; n_samples * num_classes],
        }
    }

    pub fn from_scores(scores: Vec<f64>, num_classes: usize) -> Self {
        assert_eq!(scores.len() % num_classes, 0);
        let mut m = ScoreMatrix {
            num_classes,
            probs: vec![0.0; scores.len()],
            scores,
        };
        m.refresh_probs();
        m
    }

    pub fn n_samples(&self) -> usize {
        self.scores.len() / self.num_classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn score_row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    #[inline]
    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.scores, self.probs)
    }

    pub fn refresh_probs(&mut self) {
        let k = self.num_classes;
        for (f, p) in self.scores.chunks_exact(k).zip(self.probs.chunks_exact_mut(k)) {
            softmax_into(f, p);
        }
    }

    /// Subtract each row's mean so every row sums to zero. Probabilities are
    /// unchanged up to rounding; they are recomputed.
    pub fn recenter(&mut self) {
        recenter_rows(&mut self.scores, self.num_classes);
        self.refresh_probs();
    }

    pub fn losses(&self, labels: &[u32]) -> ClassLosses {
        class_losses(&self.probs, labels, self.num_classes)
    }

    /// Largest `|sum_k F_{i,k}|` over samples.
    pub fn max_row_sum(&self) -> f64 {
        self.scores
            .chunks_exact(self.num_classes)
            .map(|row| row.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn recenter_rows(scores: &mut [f64], num_classes: usize) {
    for row in scores.chunks_exact_mut(num_classes) {
        let mean = row.iter().sum::<f64>() / num_classes as f64;
        for f in row.iter_mut() {
            *f -= mean;
        }
    }
}

/// Index of the largest entry; ties go to the smaller index.
#[inline]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        for p in softmax_probs(&[0.0, 0.0, 0.0]) {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let p = softmax_probs(&[2f64.ln(), 0.0, 0.0]);
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], 0.25, 1e-15) && close(p[2], 0.25, 1e-15));
        let p = softmax_probs(&[1000.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p[0], 1.0, 1e-15) && p[1] < 1e-300);
    }

    #[test]
    fn loss_examples() {
        let probs = [0.5, 0.25, 0.25, 0.25, 0.5, 0.25];
        let losses = class_losses(&probs, &[0, 1], 3);
        let ln2 = 2f64.ln();
        assert!(close(losses.per_class[0], ln2, 1e-15));
        assert!(close(losses.per_class[1], ln2, 1e-15));
        assert_eq!(losses.per_class[2], 0.0);
        assert!(close(losses.total, 2.0 * ln2, 1e-15));

        let uniform = ScoreMatrix::zeros(7, 4);
        let labels = [0, 1, 2, 3, 0, 1, 2];
        assert!(close(uniform.losses(&labels).total, 7.0 * 4f64.ln(), 1e-12));

        let perfect = class_losses(&[1.0, 0.0, 0.0, 1.0], &[0, 1], 2);
        assert_eq!(perfect.total, 0.0);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let losses = class_losses(&[0.0, 1.0], &[0], 2);
        assert!(close(losses.total, -PROB_FLOOR.ln(), 1e-9));
        assert!(losses.total.is_finite());
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(classical_derivs(&[0.5, 0.5], 0, 0), (-0.5, 0.25));
        assert_eq!(classical_derivs(&[0.0, 1.0], 0, 0), (-1.0, 0.0));

        let (g, h) = abc_derivs(&[0.5, 0.25, 0.25], 0, 1, 0).unwrap();
        assert!(close(g, 0.75, 1e-15) && close(h, 0.6875, 1e-15));
        let (_, h) = abc_derivs(&[0.0, 0.0, 1.0], 2, 1, 0).unwrap();
        assert_eq!(h, 0.0);
        assert!(matches!(abc_derivs(&[0.5, 0.5, 0.0], 0, 1, 1), Err(Error::BaseClassConflict(1))));
    }

    #[test]
    fn hessian_det_examples() {
        let p = [0.5, 0.25, 0.25];
        // explicit 2x2 determinant with base 0
        let d = 0.6875;
        let off = 0.25 * 0.5 - 0.25 * 0.25 + 0.5 * 0.5 + 0.5 * 0.25;
        let expected = d * d - off * off;
        for b in 0..3 {
            assert!(close(hessian_det(&p, b), expected, 1e-12), "base {b}");
        }
        // K = 2: a single free coordinate
        let p = [0.3, 0.7];
        let (_, h) = abc_derivs(&p, 0, 1, 0).unwrap();
        assert!(close(hessian_det(&p, 0), h, 1e-15));
        assert!(close(hessian_det(&p, 1), h, 1e-15));
        assert!(determinant(classical_hessian(&[0.5, 0.25, 0.25]), 3).abs() < 1e-10);
    }

    #[test]
    fn recenter_keeps_probabilities() {
        let mut m = ScoreMatrix::from_scores(vec![1.0, 2.0, 6.0, -3.0, 0.5, 0.25], 3);
        let before = m.probs().to_vec();
        m.recenter();
        assert!(m.max_row_sum() < 1e-12);
        for (a, b) in before.iter().zip(m.probs()) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn argmax_ties_to_smallest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
