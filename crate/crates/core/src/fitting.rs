//! Voxel-wise kinetic fitting: box-constrained Levenberg-Marquardt and its
//! spatially penalised variant with a Huber Markov random field on each
//! parameter map.

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DynamicImage, ParametricMaps, N_PARAMS};
use crate::error::{check_len, Error, Result};
use crate::kinetics::{KineticModel, KineticParams};

/// Huber potential settings. `delta` is measured in units of each
/// parameter's box range, so one value serves all four maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HuberSpec {
    pub delta: f64,
    pub gamma: f64,
}

impl Default for HuberSpec {
    fn default() -> Self {
        HuberSpec { delta: 0.1, gamma: 0.02 }
    }
}

impl HuberSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::invalid("huber", format!("delta = {} must be > 0", self.delta)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid("huber", format!("gamma = {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// Huber potential and its derivative:
/// `d^2/2` for `|d| <= delta`, `delta (|d| - delta/2)` beyond.
pub fn huber(d: f64, delta: f64) -> (f64, f64) {
    if d.abs() <= delta {
        (0.5 * d * d, d)
    } else {
        (delta * (d.abs() - 0.5 * delta), delta * d.signum())
    }
}

/// Curvature weight `H'(d)/d` used as a quadratic majoriser of the Huber
/// potential.
fn huber_weight(d: f64, delta: f64) -> f64 {
    if d.abs() <= delta {
        1.0
    } else {
        delta / d.abs()
    }
}

/// Admissible parameter box, `[K1, k2, k3, fv]` order, rates in 1/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamBox {
    pub lower: [f64; N_PARAMS],
    pub upper: [f64; N_PARAMS],
}

impl Default for ParamBox {
    fn default() -> Self {
        ParamBox {
            lower: [0.0; N_PARAMS],
            upper: [0.005, 0.005, 0.003, 1.0],
        }
    }
}

impl ParamBox {
    pub fn validate(&self) -> Result<()> {
        for p in 0..N_PARAMS {
            let (lo, hi) = (self.lower[p], self.upper[p]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::invalid("parameter box", format!("parameter {p}: [{lo}, {hi}] is empty")));
            }
        }
        if self.lower[..3].iter().any(|&v| v < 0.0) || self.lower[3] < 0.0 || self.upper[3] > 1.0 {
            return Err(Error::invalid("parameter box", "box must lie within the admissible region"));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; N_PARAMS] {
        std::array::from_fn(|p| 0.5 * (self.lower[p] + self.upper[p]))
    }

    pub fn range(&self) -> [f64; N_PARAMS] {
        std::array::from_fn(|p| self.upper[p] - self.lower[p])
    }

    pub fn project(&self, theta: [f64; N_PARAMS]) -> [f64; N_PARAMS] {
        std::array::from_fn(|p| theta[p].clamp(self.lower[p], self.upper[p]))
    }
}

/// Levenberg-Marquardt settings. Damping is multiplicative: `lambda_up` on a
/// rejected step, `lambda_down` on an accepted one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LMOptions {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub bounds: ParamBox,
}

impl Default for LMOptions {
    fn default() -> Self {
        LMOptions {
            max_iters: 100,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            rel_tol: 1e-10,
            bounds: ParamBox::default(),
        }
    }
}

impl LMOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_init > 0.0) {
            return Err(Error::invalid("LM options", "lambda_init must be > 0"));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::invalid("LM options", "need lambda_up > 1 > lambda_down > 0"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::invalid("LM options", "rel_tol must be >= 0"));
        }
        self.bounds.validate()
    }
}

/// Outcome of one voxel fit.
#[derive(Clone, Debug, PartialEq)]
pub struct LmFit {
    pub theta: KineticParams,
    pub cost: f64,
    /// Number of Jacobian evaluations.
    pub iterations: usize,
    /// Cost at the start followed by the cost after each accepted step.
    pub trace: Vec<f64>,
}

/// Local quadratic model of an objective at a point.
struct Linearization {
    cost: f64,
    grad: Vector4<f64>,
    hess: Matrix4<f64>,
}

trait Objective {
    fn cost(&self, theta: &[f64; N_PARAMS]) -> f64;
    fn linearize(&self, theta: &[f64; N_PARAMS]) -> Linearization;
}

/// Sum of squared residuals, optionally weighted by `1/(2 sigma^2)` and
/// penalised by Huber differences to frozen neighbours.
struct TacObjective<'a> {
    model: &'a KineticModel,
    tac: &'a [f64],
    data_weight: f64,
    prior: Option<Prior<'a>>,
}

struct Prior<'a> {
    neighbors: &'a [[f64; N_PARAMS]],
    gamma: f64,
    delta: f64,
    inv_range: [f64; N_PARAMS],
}

impl Prior<'_> {
    fn value(&self, theta: &[f64; N_PARAMS]) -> f64 {
        let mut v = 0.0;
        for nb in self.neighbors {
            for p in 0..N_PARAMS {
                v += huber((theta[p] - nb[p]) * self.inv_range[p], self.delta).0;
            }
        }
        self.gamma * v
    }
}

impl Objective for TacObjective<'_> {
    fn cost(&self, theta: &[f64; N_PARAMS]) -> f64 {
        let mut f = [0.0; 64];
        let mut heap;
        let f: &mut [f64] = if self.tac.len() <= f.len() {
            &mut f[..self.tac.len()]
        } else {
            heap = vec![0.0; self.tac.len()];
            &mut heap
        };
        self.model.frame_values_into(&KineticParams::from_array(*theta), f);
        let ss: f64 = self.tac.iter().zip(f.iter()).map(|(y, m)| (y - m) * (y - m)).sum();
        self.data_weight * ss + self.prior.as_ref().map_or(0.0, |p| p.value(theta))
    }

    fn linearize(&self, theta: &[f64; N_PARAMS]) -> Linearization {
        let m = self.tac.len();
        let mut f = vec![0.0; m];
        let mut jac = vec![[0.0; N_PARAMS]; m];
        self.model.frame_values_and_jacobian(&KineticParams::from_array(*theta), &mut f, &mut jac);
        let mut ss = 0.0;
        let mut grad = Vector4::zeros();
        let mut hess = Matrix4::zeros();
        for k in 0..m {
            let r = self.tac[k] - f[k];
            ss += r * r;
            let row = Vector4::from(jac[k]);
            grad -= row * r;
            hess += row * row.transpose();
        }
        // d/dθ of w * sum r^2 is -2 w J^T r; Gauss-Newton Hessian is 2 w J^T J.
        let w2 = 2.0 * self.data_weight;
        grad *= w2;
        hess *= w2;
        let mut cost = self.data_weight * ss;
        if let Some(prior) = &self.prior {
            cost += prior.value(theta);
            for nb in prior.neighbors {
                for p in 0..N_PARAMS {
                    let u = (theta[p] - nb[p]) * prior.inv_range[p];
                    let (_, d) = huber(u, prior.delta);
                    grad[p] += prior.gamma * d * prior.inv_range[p];
                    hess[(p, p)] += prior.gamma * huber_weight(u, prior.delta) * prior.inv_range[p] * prior.inv_range[p];
                }
            }
        }
        Linearization { cost, grad, hess }
    }
}

fn minimize(obj: &dyn Objective, init: [f64; N_PARAMS], opts: &LMOptions) -> ([f64; N_PARAMS], f64, usize, Vec<f64>) {
    let bounds = &opts.bounds;
    let mut theta = bounds.project(init);
    let mut lin = obj.linearize(&theta);
    let mut trace = vec![lin.cost];
    let mut lambda = opts.lambda_init;
    let mut iterations = 0;
    if lin.cost == 0.0 {
        return (theta, lin.cost, iterations, trace);
    }
    while iterations < opts.max_iters {
        iterations += 1;
        let max_diag = (0..N_PARAMS).map(|p| lin.hess[(p, p)]).fold(0.0, f64::max);
        if !(max_diag > 0.0) {
            break;
        }
        let mut accepted = None;
        while lambda < 1e16 {
            let mut a = lin.hess;
            for p in 0..N_PARAMS {
                a[(p, p)] += lambda * lin.hess[(p, p)].max(1e-12 * max_diag);
            }
            let step = a.cholesky().map(|c| c.solve(&(-lin.grad)));
            if let Some(step) = step {
                let trial = bounds.project(std::array::from_fn(|p| theta[p] + step[p]));
                if trial == theta {
                    // Projected step vanished: stationary on the box.
                    lambda = f64::INFINITY;
                    break;
                }
                let c = obj.cost(&trial);
                if c < lin.cost {
                    lambda = (lambda * opts.lambda_down).max(1e-12);
                    accepted = Some((trial, c));
                    break;
                }
            }
            lambda *= opts.lambda_up;
        }
        let Some((trial, c)) = accepted else { break };
        let rel = (lin.cost - c) / lin.cost;
        theta = trial;
        trace.push(c);
        if c == 0.0 || rel < opts.rel_tol || iterations == opts.max_iters {
            lin.cost = c;
            break;
        }
        lin = obj.linearize(&theta);
    }
    (theta, lin.cost, iterations, trace)
}

fn check_tac(tac: &[f64], model: &KineticModel) -> Result<()> {
    check_len("TAC length", model.n_frames(), tac.len())?;
    if tac.len() < N_PARAMS {
        return Err(Error::invalid("TAC", format!("{} frames cannot identify {N_PARAMS} parameters", tac.len())));
    }
    if let Some(v) = tac.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid("TAC", format!("non-finite entry {v}")));
    }
    Ok(())
}

fn is_degenerate(tac: &[f64]) -> bool {
    tac.iter().all(|&v| v == 0.0)
}

fn zero_fit() -> LmFit {
    LmFit {
        theta: KineticParams::from_array([0.0; N_PARAMS]),
        cost: 0.0,
        iterations: 0,
        trace: vec![0.0],
    }
}

/// Least-squares fit of one TAC: minimises `sum_m (tac_m - f_m(theta))^2`
/// over the parameter box. All-zero TACs are not fitted and yield zeros.
pub fn lm_fit(tac: &[f64], model: &KineticModel, init: &KineticParams, opts: &LMOptions) -> Result<LmFit> {
    check_tac(tac, model)?;
    if is_degenerate(tac) {
        return Ok(zero_fit());
    }
    let obj = TacObjective {
        model,
        tac,
        data_weight: 1.0,
        prior: None,
    };
    let (theta, cost, iterations, trace) = minimize(&obj, init.to_array(), opts);
    Ok(LmFit {
        theta: KineticParams::from_array(theta),
        cost,
        iterations,
        trace,
    })
}

/// Per-voxel diagnostics from a map fit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitDiagnostics {
    pub iterations: Vec<usize>,
    pub cost: Vec<f64>,
}

pub(crate) fn neighbors4(width: usize, height: usize, j: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (j / width, j % width);
    let up = (r > 0).then(|| j - width);
    let down = (r + 1 < height).then(|| j + width);
    let left = (c > 0).then(|| j - 1);
    let right = (c + 1 < width).then(|| j + 1);
    [up, down, left, right].into_iter().flatten()
}

/// One sweep of penalised fitting over every voxel.
///
/// Each voxel minimises `(1/(2 sigma^2)) sum_m (x_jm - f_m(theta_j))^2 +
/// gamma sum_{k in N4(j)} sum_p H((theta_jp - theta_kp) / range_p)` with its
/// neighbours frozen at the input `maps` (starting values are also taken
/// from `maps`). Voxels with all-zero TACs get zero parameters and do not
/// act as neighbours. With `gamma == 0`, or for a voxel without neighbours,
/// this is exactly [`lm_fit`].
pub fn map_lm_fit(
    maps: &ParametricMaps,
    image: &DynamicImage,
    model: &KineticModel,
    prior: &HuberSpec,
    sigma: f64,
    opts: &LMOptions,
) -> Result<(ParametricMaps, FitDiagnostics)> {
    prior.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", format!("{sigma} must be > 0")));
    }
    if maps.width() != image.width() || maps.height() != image.height() {
        return Err(Error::invalid(
            "map fit",
            format!(
                "maps are {}x{} but image is {}x{}",
                maps.width(),
                maps.height(),
                image.width(),
                image.height()
            ),
        ));
    }
    check_len("map fit frames", model.n_frames(), image.n_frames())?;
    let (w, h) = (image.width(), image.height());
    let n = image.n_voxels();
    let m = image.n_frames();
    let mut tacs = vec![0.0; n * m];
    tacs.par_chunks_mut(m).enumerate().for_each(|(j, t)| image.tac_into(j, t));
    for (j, t) in tacs.chunks(m).enumerate() {
        check_tac(t, model).map_err(|e| Error::invalid("map fit", format!("voxel {j}: {e}")))?;
    }
    let active: Vec<bool> = tacs.chunks(m).map(|t| !is_degenerate(t)).collect();
    let inv_range = opts.bounds.range().map(|r| 1.0 / r);
    let snapshot = maps.values();

    let fits: Vec<LmFit> = (0..n)
        .into_par_iter()
        .map(|j| {
            let tac = &tacs[j * m..(j + 1) * m];
            if !active[j] {
                return zero_fit();
            }
            let init = KineticParams::from_array(snapshot[j]);
            let neighbors: Vec<[f64; N_PARAMS]> = neighbors4(w, h, j).filter(|&k| active[k]).map(|k| snapshot[k]).collect();
            if prior.gamma == 0.0 || neighbors.is_empty() {
                return lm_fit(tac, model, &init, opts).expect("TAC validated");
            }
            let obj = TacObjective {
                model,
                tac,
                data_weight: 0.5 / (sigma * sigma),
                prior: Some(Prior {
                    neighbors: &neighbors,
                    gamma: prior.gamma,
                    delta: prior.delta,
                    inv_range,
                }),
            };
            let (theta, cost, iterations, trace) = minimize(&obj, init.to_array(), opts);
            LmFit {
                theta: KineticParams::from_array(theta),
                cost,
                iterations,
                trace,
            }
        })
        .collect();

    let diag = FitDiagnostics {
        iterations: fits.iter().map(|f| f.iterations).collect(),
        cost: fits.iter().map(|f| f.cost).collect(),
    };
    let out = ParametricMaps::new(w, h, fits.into_iter().map(|f| f.theta.to_array()).collect())?;
    Ok((out, diag))
}
