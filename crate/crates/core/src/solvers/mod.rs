//! Logistic regression solvers: Newton/IRLS with offsets and weights, and an
//! L1-penalized path with cross-validated penalty selection.

mod irls;
mod lasso;

pub use irls::{fit_logistic, GlmFit, IrlsOptions};
pub use lasso::{fit_lasso_logistic, kkt_max_violation, LassoOptions, LassoPath};

use nalgebra::{DMatrix, DVector};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` wherever a
/// fitted mean is evaluated.
pub const PROB_CLIP: f64 = 1e-6;

#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Clipped `expit`.
#[inline]
pub fn mean_from_logit(eta: f64) -> f64 {
    clip_prob(expit(eta))
}

/// Weighted Bernoulli negative log-likelihood of one observation.
#[inline]
pub(crate) fn bernoulli_nll(y: f64, p: f64) -> f64 {
    if y == 1.0 {
        -p.ln()
    } else if y == 0.0 {
        -(1.0 - p).ln()
    } else {
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }
}

/// `Xᵀ diag(w) X`.
/// Dot product with four independent accumulators so it vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut g = DMatrix::zeros(p, p);
    let mut wx = vec![0.0; x.nrows()];
    for j in 0..p {
        let cj = x.column(j);
        for (o, (a, b)) in wx.iter_mut().zip(cj.iter().zip(w)) {
            *o = a * b;
        }
        for k in j..p {
            let ck = x.column(k);
            let v = dot(&wx, ck.as_slice());
            g[(j, k)] = v;
            g[(k, j)] = v;
        }
    }
    g
}

/// `Xᵀ v`.
pub(crate) fn xt_vec(x: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    x.tr_mul(&DVector::from_column_slice(v))
}

pub(crate) fn linear_predictor(x: &DMatrix<f64>, beta: &[f64], offset: &[f64]) -> Vec<f64> {
    let eta = x * DVector::from_column_slice(beta);
    eta.iter().zip(offset).map(|(e, o)| e + o).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_is_stable_and_inverts_logit() {
        assert_eq!(expit(0.0), 0.5);
        assert!(expit(-800.0) >= 0.0 && expit(800.0) <= 1.0);
        for p in [0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((expit(logit(p)) - p).abs() < 1e-14);
        }
    }

    #[test]
    fn clipping_bounds() {
        assert_eq!(mean_from_logit(-50.0), PROB_CLIP);
        assert_eq!(mean_from_logit(50.0), 1.0 - PROB_CLIP);
    }
}
