//! Masked per-predictor regression loss and its analytic gradient.
//!
//! Every predictor contributes a squared-error existence term plus, when the
//! ground truth contains an antinode (`p = 1`), squared errors on position,
//! size, orientation and ring count. The orientation term is weighted by the
//! ground-truth `(a - b)²` so that near-circular antinodes pay almost nothing
//! for a wrong angle. When `p = 0` the bracketed term is masked out entirely:
//! a background predictor has no meaningful position or size targets.
//!
//! Note the existence term is a *positive* squared error. A subtracted
//! existence penalty would make the loss unbounded below and unusable as a
//! minimization objective, so the existence error is added like every other
//! term. A clamped cross-entropy existence term is available as an
//! alternative; it performs about the same.

use crate::gridcodec::{GridSpec, GridTensor};

/// Clamp bound that keeps the cross-entropy existence term finite.
pub const CROSS_ENTROPY_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExistenceMode {
    SquaredError,
    CrossEntropy,
}

/// Per-term scale factors. The defaults of 1.0 keep the terms comparable for
/// normalized targets; all weights must be nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_center: f64,
    pub lambda_size: f64,
    pub lambda_angle: f64,
    pub lambda_r: f64,
    pub existence_mode: ExistenceMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_center: 1.0,
            lambda_size: 1.0,
            lambda_angle: 1.0,
            lambda_r: 1.0,
            existence_mode: ExistenceMode::SquaredError,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    ShapeError { expected: usize, got: usize },
}

impl std::fmt::Display for LossError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossError::ShapeError { expected, got } => {
                write!(f, "tensor length {got}, expected {expected}")
            }
        }
    }
}

impl std::error::Error for LossError {}

/// Loss contribution of a single predictor.
///
/// `truth` and `pred` are 8-value blocks in `(p, x, y, a, b, c, s, r)` order;
/// the ground-truth `p` must be 0 or 1.
pub fn loss_per_predictor(truth: &[f64; 8], pred: &[f64; 8], w: &LossWeights) -> f64 {
    let p = truth[0];
    let existence = match w.existence_mode {
        ExistenceMode::SquaredError => {
            let d = pred[0] - p;
            w.lambda_p * d * d
        }
        ExistenceMode::CrossEntropy => {
            let q = pred[0].clamp(CROSS_ENTROPY_EPS, 1.0 - CROSS_ENTROPY_EPS);
            -w.lambda_p * (p * q.ln() + (1.0 - p) * (1.0 - q).ln())
        }
    };
    if p == 0.0 {
        return existence;
    }

    let d = |i: usize| pred[i] - truth[i];
    let center = d(1) * d(1) + d(2) * d(2);
    let size = d(3) * d(3) + d(4) * d(4);
    // angle weight from ground-truth normalized axes
    let ab = truth[3] - truth[4];
    let angle = ab * ab * (d(5) * d(5) + d(6) * d(6));
    let rings = d(7) * d(7);

    existence
        + p * (w.lambda_center * center
            + w.lambda_size * size
            + w.lambda_angle * angle
            + w.lambda_r * rings)
}

/// Mean of [`loss_per_predictor`] over all predictors in the grid.
pub fn total_loss(
    truth: &GridTensor,
    pred: &GridTensor,
    spec: &GridSpec,
    w: &LossWeights,
) -> Result<f64, LossError> {
    check_shapes(truth, pred, spec)?;
    let n = spec.n_predictors();
    let mut sum = 0.0;
    for (t, q) in truth
        .values
        .chunks_exact(8)
        .zip(pred.values.chunks_exact(8))
    {
        sum += loss_per_predictor(t.try_into().unwrap(), q.try_into().unwrap(), w);
    }
    Ok(sum / n as f64)
}

/// Per-term breakdown of the total loss, each already divided by the
/// predictor count. Useful for training logs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub existence: f64,
    pub center: f64,
    pub size: f64,
    pub angle: f64,
    pub rings: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.existence + self.center + self.size + self.angle + self.rings
    }
}

pub fn loss_components(
    truth: &GridTensor,
    pred: &GridTensor,
    spec: &GridSpec,
    w: &LossWeights,
) -> Result<LossComponents, LossError> {
    check_shapes(truth, pred, spec)?;
    let n = spec.n_predictors() as f64;
    let mut out = LossComponents::default();
    for (t, q) in truth
        .values
        .chunks_exact(8)
        .zip(pred.values.chunks_exact(8))
    {
        let p = t[0];
        out.existence += match w.existence_mode {
            ExistenceMode::SquaredError => {
                let d = q[0] - p;
                w.lambda_p * d * d
            }
            ExistenceMode::CrossEntropy => {
                let c = q[0].clamp(CROSS_ENTROPY_EPS, 1.0 - CROSS_ENTROPY_EPS);
                -w.lambda_p * (p * c.ln() + (1.0 - p) * (1.0 - c).ln())
            }
        };
        if p == 0.0 {
            continue;
        }
        let d = |i: usize| q[i] - t[i];
        out.center += p * w.lambda_center * (d(1) * d(1) + d(2) * d(2));
        out.size += p * w.lambda_size * (d(3) * d(3) + d(4) * d(4));
        let ab = t[3] - t[4];
        out.angle += p * w.lambda_angle * ab * ab * (d(5) * d(5) + d(6) * d(6));
        out.rings += p * w.lambda_r * d(7) * d(7);
    }
    out.existence /= n;
    out.center /= n;
    out.size /= n;
    out.angle /= n;
    out.rings /= n;
    Ok(out)
}

/// Analytic gradient of [`total_loss`] with respect to the prediction tensor.
pub fn loss_gradient(
    truth: &GridTensor,
    pred: &GridTensor,
    spec: &GridSpec,
    w: &LossWeights,
) -> Result<Vec<f64>, LossError> {
    check_shapes(truth, pred, spec)?;
    let n = spec.n_predictors() as f64;
    let mut grad = vec![0.0; pred.values.len()];
    for ((t, q), g) in truth
        .values
        .chunks_exact(8)
        .zip(pred.values.chunks_exact(8))
        .zip(grad.chunks_exact_mut(8))
    {
        let p = t[0];
        g[0] = match w.existence_mode {
            ExistenceMode::SquaredError => 2.0 * w.lambda_p * (q[0] - p) / n,
            ExistenceMode::CrossEntropy => {
                if (CROSS_ENTROPY_EPS..=1.0 - CROSS_ENTROPY_EPS).contains(&q[0]) {
                    -w.lambda_p * (p / q[0] - (1.0 - p) / (1.0 - q[0])) / n
                } else {
                    0.0 // clamped region is flat
                }
            }
        };
        if p == 0.0 {
            continue;
        }
        g[1] = 2.0 * p * w.lambda_center * (q[1] - t[1]) / n;
        g[2] = 2.0 * p * w.lambda_center * (q[2] - t[2]) / n;
        g[3] = 2.0 * p * w.lambda_size * (q[3] - t[3]) / n;
        g[4] = 2.0 * p * w.lambda_size * (q[4] - t[4]) / n;
        let ab = t[3] - t[4];
        g[5] = 2.0 * p * w.lambda_angle * ab * ab * (q[5] - t[5]) / n;
        g[6] = 2.0 * p * w.lambda_angle * ab * ab * (q[6] - t[6]) / n;
        g[7] = 2.0 * p * w.lambda_r * (q[7] - t[7]) / n;
    }
    Ok(grad)
}

fn check_shapes(truth: &GridTensor, pred: &GridTensor, spec: &GridSpec) -> Result<(), LossError> {
    let expected = spec.total_len();
    for t in [truth, pred] {
        if t.values.len() != expected {
            return Err(LossError::ShapeError { expected, got: t.values.len() });
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite differences, shared by the loss and model gradient tests.

    /// Central difference of `f` at `x` along coordinate `i`.
    pub fn central<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    /// True when `a` and `b` agree to `rel` relative error, with an absolute
    /// floor of `abs` covering the finite-difference noise floor near zero.
    pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        let diff = (a - b).abs();
        diff <= abs || diff <= rel * a.abs().max(b.abs())
    }
}
