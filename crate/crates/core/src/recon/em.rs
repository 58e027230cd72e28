//! Per-frame EM and one-step-late updates and the prior gradients they use.
//!
//! The forward model of frame `m` is `E[y_m] = scale_m * A x_m + r_m`, with
//! `scale_m` taken from [`SinogramSeries::frame_scale`](crate::domain::SinogramSeries::frame_scale).

use rayon::prelude::*;

use crate::domain::DynamicImage;
use crate::error::{check_len, Error, Result};
use crate::fitting::{huber, neighbors4};
use crate::projector::SystemMatrix;

/// Data for one frame of the forward model.
#[derive(Clone, Copy, Debug)]
pub struct FrameData<'a> {
    pub counts: &'a [f64],
    pub background: &'a [f64],
    pub scale: f64,
}

/// Poisson log-likelihood `sum_i y_i ln(yhat_i) - yhat_i`, dropping the
/// `ln(y_i!)` constant.
pub fn poisson_log_likelihood(counts: &[f64], expected: &[f64]) -> f64 {
    counts
        .iter()
        .zip(expected)
        .map(|(&y, &e)| if y > 0.0 { y * e.ln() - e } else { -e })
        .sum()
}

pub(crate) fn expected_counts(a: &SystemMatrix, x: &[f64], data: &FrameData) -> Result<Vec<f64>> {
    let mut e = a.forward(x)?;
    for (v, r) in e.iter_mut().zip(data.background) {
        *v = data.scale * *v + r;
    }
    Ok(e)
}

/// Log-likelihood of one frame image against its data.
pub fn frame_log_likelihood(a: &SystemMatrix, x: &[f64], data: &FrameData) -> Result<f64> {
    Ok(poisson_log_likelihood(data.counts, &expected_counts(a, x, data)?))
}

/// `scale * A^T (y / (scale A x + r))`, the EM numerator.
fn em_backprojection(a: &SystemMatrix, x: &[f64], data: &FrameData) -> Result<Vec<f64>> {
    check_len("frame counts", a.n_rows(), data.counts.len())?;
    check_len("frame background", a.n_rows(), data.background.len())?;
    let expected = expected_counts(a, x, data)?;
    let mut ratio = vec![0.0; expected.len()];
    for (i, ((q, &y), &e)) in ratio.iter_mut().zip(data.counts).zip(&expected).enumerate() {
        if e > 0.0 {
            *q = y / e;
        } else if y > 0.0 {
            return Err(Error::Inconsistent(format!("bin {i} has {y} counts but zero expected counts")));
        }
    }
    let mut bp = a.back(&ratio)?;
    for v in &mut bp {
        *v *= data.scale;
    }
    Ok(bp)
}

/// One MLEM step `x' = x / (scale s) * scale A^T(y / (scale A x + r))`.
/// Voxels with zero sensitivity are left unchanged.
pub fn mlem_update(x: &[f64], a: &SystemMatrix, data: &FrameData) -> Result<Vec<f64>> {
    let bp = em_backprojection(a, x, data)?;
    Ok(x.iter()
        .zip(&bp)
        .zip(a.sensitivity())
        .map(|((&xj, &b), &s)| {
            let den = data.scale * s;
            if den > 0.0 {
                xj * b / den
            } else {
                xj
            }
        })
        .collect())
}

/// Result of a one-step-late update.
#[derive(Clone, Debug)]
pub struct OslStep {
    pub image: Vec<f64>,
    /// Voxels (with nonzero sensitivity) whose denominator hit the floor.
    pub floored: usize,
}

/// One-step-late MAP update
/// `x' = x * scale A^T(y / (scale A x + r)) / max(scale s - beta grad, floor)`
/// where `grad` is the log-prior gradient at the current `x` and
/// `floor = floor_rel * max_j(scale s_j)`. With `beta == 0` this is exactly
/// [`mlem_update`].
pub fn osl_penalized_update(
    x: &[f64],
    a: &SystemMatrix,
    data: &FrameData,
    prior_grad: &[f64],
    beta: f64,
    floor_rel: f64,
) -> Result<OslStep> {
    if beta == 0.0 {
        return Ok(OslStep {
            image: mlem_update(x, a, data)?,
            floored: 0,
        });
    }
    check_len("prior gradient", x.len(), prior_grad.len())?;
    let bp = em_backprojection(a, x, data)?;
    let s_max = a.sensitivity().iter().fold(0.0f64, |m, &s| m.max(s));
    let floor = floor_rel * data.scale * s_max;
    let mut floored = 0;
    let image = x
        .iter()
        .zip(&bp)
        .zip(a.sensitivity())
        .zip(prior_grad)
        .map(|(((&xj, &b), &s), &g)| {
            if s == 0.0 {
                return xj;
            }
            let mut den = data.scale * s - beta * g;
            if den < floor {
                den = floor;
                floored += 1;
            }
            xj * b / den
        })
        .collect();
    Ok(OslStep { image, floored })
}

/// Gradient of the kinetic log-prior `-(1/(2 sigma^2)) sum (x - f)^2`:
/// `-(x_jm - f_jm) / sigma^2`, frame-major like the images.
pub fn kinetic_prior_gradient(x: &DynamicImage, model_values: &DynamicImage, sigma: f64) -> Result<Vec<f64>> {
    check_len("kinetic prior shapes", x.values().len(), model_values.values().len())?;
    let inv = 1.0 / (sigma * sigma);
    Ok(x.values()
        .par_iter()
        .zip(model_values.values())
        .map(|(&xv, &f)| -(xv - f) * inv)
        .collect())
}

/// Gradient of the spatial log-prior `-sum_{pairs} H(x_j - x_k)` over the
/// 4-neighbourhood: `-sum_{k in N(j)} H'(x_j - x_k)`.
pub fn spatial_prior_gradient(frame: &[f64], width: usize, height: usize, delta: f64) -> Result<Vec<f64>> {
    check_len("spatial prior frame", width * height, frame.len())?;
    Ok((0..frame.len())
        .map(|j| -neighbors4(width, height, j).map(|k| huber(frame[j] - frame[k], delta).1).sum::<f64>())
        .collect())
}
