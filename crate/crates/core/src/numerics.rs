//! Flat-vector numerics shared by every module: parameter vectors,
//! numerically stable softmax, and a central finite-difference gradient
//! oracle used to verify analytic backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to at least this value before any logarithm.
pub const EPS_CLAMP: f64 = 1e-12;

/// A flat, fixed-length vector of f64 model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a parameter vector, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite parameter at index {i}"
            )));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Consumes the vector, returning the raw values.
    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A probability distribution over K classes; entries clamped away from zero
/// and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the most probable class.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Max-subtracted softmax over at least two logits.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps
        .into_iter()
        .map(|e| (e / sum).max(EPS_CLAMP))
        .collect();
    Ok(ProbVector(probs))
}

/// Returns `a*x + b*y` elementwise.
pub fn axpy_combine(a: f64, x: &ParamVector, b: f64, y: &ParamVector) -> Result<ParamVector> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "axpy_combine: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let values = x
        .iter()
        .zip(y.iter())
        .map(|(xi, yi)| a * xi + b * yi)
        .collect();
    ParamVector::new(values)
}

/// Central finite differences: `(f(w + h e_i) - f(w - h e_i)) / 2h` per
/// coordinate. Independent of any analytic backward pass; this is the
/// reference every gradient implementation is checked against.
pub fn finite_diff_gradient<F>(f: F, at: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidInput(format!("step size must be > 0, got {h}")));
    }
    let mut grad = Vec::with_capacity(at.len());
    let mut probe = at.as_slice().to_vec();
    for i in 0..at.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&ParamVector(probe.clone()));
        probe[i] = orig - h;
        let fm = f(&ParamVector(probe.clone()));
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::OracleFailure {
                coordinate: i,
                message: format!("f evaluated to non-finite value ({fp}, {fm})"),
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    ParamVector::new(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_logits() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for &pi in p.as_slice() {
            assert_relative_eq!(pi, 0.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_known_ratio() {
        // exp(0) : exp(ln 3) = 1 : 3
        let p = softmax(&[0.0, 3.0_f64.ln()]).unwrap();
        assert_relative_eq!(p.as_slice()[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(p.as_slice()[1], 0.75, max_relative = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[1.0]).is_err());
    }

    #[test]
    fn axpy_basic() {
        let x = ParamVector::new(vec![2.0, 4.0]).unwrap();
        let y = ParamVector::new(vec![4.0, 8.0]).unwrap();
        let r = axpy_combine(0.5, &x, 0.5, &y).unwrap();
        assert_eq!(r.as_slice(), &[3.0, 6.0]);

        // a=1, b=0 returns x bit-exactly
        let r = axpy_combine(1.0, &x, 0.0, &y).unwrap();
        assert_eq!(r, x);

        // x - x is exactly zero
        let r = axpy_combine(1.0, &x, -1.0, &x).unwrap();
        assert_eq!(r.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn axpy_length_mismatch() {
        let x = ParamVector::zeros(2);
        let y = ParamVector::zeros(3);
        assert!(matches!(
            axpy_combine(1.0, &x, 1.0, &y),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let at = ParamVector::new(vec![1.0, -2.0, 3.0]).unwrap();
        let g = finite_diff_gradient(|_| 7.0, &at, 1e-5).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_half_norm_sq() {
        let at = ParamVector::new(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|w| 0.5 * w.norm_sq(), &at, 1e-5).unwrap();
        assert_relative_eq!(g.as_slice()[0], 1.0, max_relative = 1e-8);
        assert_relative_eq!(g.as_slice()[1], 2.0, max_relative = 1e-8);
    }

    #[test]
    fn finite_diff_quadratic_matches_analytic() {
        // f(w) = 0.5 w^T A w with well-conditioned A => grad = A w
        let a = [[2.0, 0.5, 0.0], [0.5, 3.0, 0.2], [0.0, 0.2, 1.5]];
        let at = ParamVector::new(vec![0.3, -1.1, 0.7]).unwrap();
        let f = |w: &ParamVector| {
            let s = w.as_slice();
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += 0.5 * s[i] * a[i][j] * s[j];
                }
            }
            acc
        };
        let g = finite_diff_gradient(f, &at, 1e-5).unwrap();
        for i in 0..3 {
            let exact: f64 = (0..3).map(|j| a[i][j] * at[j]).sum();
            assert_relative_eq!(g[i], exact, max_relative = 1e-6);
        }
    }

    #[test]
    fn finite_diff_reports_failing_coordinate() {
        let at = ParamVector::new(vec![0.0, 1.0]).unwrap();
        let r = finite_diff_gradient(|w| (w[1] - 1.0).ln(), &at, 1e-5);
        match r {
            Err(Error::OracleFailure { coordinate, .. }) => assert_eq!(coordinate, 0),
            other => panic!("expected oracle failure, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn softmax_is_valid_distribution(
            logits in proptest::collection::vec(-1e6..1e6f64, 2..16)
        ) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(p.as_slice().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-50.0..50.0f64, 2..8),
            shift in -100.0..100.0f64
        ) {
            let p1 = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let p2 = softmax(&shifted).unwrap();
            for (a, b) in p1.as_slice().iter().zip(p2.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
