//! Two-tissue irreversible compartment model driven by a plasma input.
//!
//! The tissue response is
//!
//! ```text
//! C_T(t)   = K1/(k2+k3) * [ k3 * (1 (*) Cp)(t) + k2 * (exp(-(k2+k3) t) (*) Cp)(t) ]
//! C_PET(t) = (1 - fv) * C_T(t) + fv * Cp(t)
//! ```
//!
//! Convolutions are accumulated with the trapezoid rule on a fine grid, and frame values are averages of the piecewise-linear interpolant of
//! the grid curve over each frame. The Jacobian is the exact derivative of
//! that discretised model, so it agrees with finite differences of
//! [`KineticModel::frame_values`] to rounding error.

use serde::{Deserialize, Serialize};

use crate::domain::{FrameSchedule, N_PARAMS};
use crate::error::{Error, Result};

/// Default fine-grid step in seconds.
pub const DEFAULT_GRID_STEP: f64 = 0.1;

/// Anything that can be sampled as a plasma input curve `Cp(t)`.
pub trait PlasmaInput: Sync {
    fn value(&self, t: f64) -> f64;

    /// Time before which the curve is identically zero.
    fn onset(&self) -> f64 {
        0.0
    }
}

impl<F: Fn(f64) -> f64 + Sync> PlasmaInput for F {
    fn value(&self, t: f64) -> f64 {
        self(t)
    }
}

/// Feng-style arterial input
/// `Cp(t) = (A1 s - A2 - A3) e^{l1 s} + A2 e^{l2 s} + A3 e^{l3 s}`, `s = t - delay`,
/// zero before the delay. Amplitudes in kBq/mL (A1 in kBq/mL/s), rates in 1/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFunction {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(default)]
    pub delay: f64,
}

impl Default for InputFunction {
    /// FDG input with per-minute coefficients A1 = 851.1, A2 = 21.9,
    /// A3 = 20.8, l1 = -4.1339, l2 = -0.1191, l3 = -0.0104, no delay.
    fn default() -> Self {
        InputFunction::from_per_minute(851.1, 21.9, 20.8, -4.1339, -0.1191, -0.0104, 0.0)
    }
}

impl InputFunction {
    /// Convert coefficients quoted per minute into the per-second form.
    pub fn from_per_minute(a1: f64, a2: f64, a3: f64, l1: f64, l2: f64, l3: f64, delay_s: f64) -> Self {
        InputFunction {
            a1: a1 / 60.0,
            a2,
            a3,
            lambda1: l1 / 60.0,
            lambda2: l2 / 60.0,
            lambda3: l3 / 60.0,
            delay: delay_s,
        }
    }

    /// Check the curve is finite and nonnegative on a 0.1 s grid over
    /// `[0, horizon]`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let fields = [self.a1, self.a2, self.a3, self.lambda1, self.lambda2, self.lambda3, self.delay];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input function", "non-finite coefficient"));
        }
        if self.delay < 0.0 {
            return Err(Error::invalid("input function", "delay must be >= 0"));
        }
        let n = (horizon / 0.1).ceil() as usize;
        for k in 0..=n {
            let t = k as f64 * 0.1;
            let raw = self.closed_form(t - self.delay);
            if t >= self.delay && raw < -1e-9 * (self.a2.abs() + self.a3.abs()).max(1.0) {
                return Err(Error::invalid("input function", format!("Cp({t:.1}) = {raw} is negative")));
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        if t < self.delay {
            return 0.0;
        }
        // The closed form cancels to exactly 0 at onset; rounding can leave -1e-15.
        self.closed_form(t - self.delay).max(0.0)
    }

    fn closed_form(&self, s: f64) -> f64 {
        (self.a1 * s - self.a2 - self.a3) * (self.lambda1 * s).exp()
            + self.a2 * (self.lambda2 * s).exp()
            + self.a3 * (self.lambda3 * s).exp()
    }
}

impl PlasmaInput for InputFunction {
    fn value(&self, t: f64) -> f64 {
        InputFunction::value(self, t)
    }

    fn onset(&self) -> f64 {
        self.delay
    }
}

pub fn input_value(cp: &InputFunction, t: f64) -> f64 {
    cp.value(t)
}

/// Rate constants in 1/s and the blood volume fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticParams {
    #[serde(rename = "K1")]
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub fv: f64,
}

impl KineticParams {
    pub fn new(k1: f64, k2: f64, k3: f64, fv: f64) -> Result<Self> {
        let p = KineticParams { k1, k2, k3, fv };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) || self.k1 < 0.0 || self.k2 < 0.0 || self.k3 < 0.0 {
            return Err(Error::invalid("kinetic parameters", format!("{self:?}: rates must be finite and >= 0")));
        }
        if !(0.0..=1.0).contains(&self.fv) {
            return Err(Error::invalid("kinetic parameters", format!("fv = {} outside [0, 1]", self.fv)));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; N_PARAMS] {
        [self.k1, self.k2, self.k3, self.fv]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        KineticParams {
            k1: a[0],
            k2: a[1],
            k3: a[2],
            fv: a[3],
        }
    }

    /// Net influx rate `K1 k3 / (k2 + k3)`.
    pub fn ki(&self) -> Result<f64> {
        let a = self.k2 + self.k3;
        if !(a > 0.0) {
            return Err(Error::Domain(format!("K_i undefined for k2 + k3 = {a}")));
        }
        Ok(self.k1 * self.k3 / a)
    }
}

pub fn ki(theta: &KineticParams) -> Result<f64> {
    theta.ki()
}

/// Precomputed integration grid for one input curve and frame schedule.
///
/// The default grid is graded: 0.1 s steps for the first two minutes after
/// the input onset, 0.5 s up to ten minutes and 2 s afterwards.
#[derive(Clone, Debug)]
pub struct KineticModel {
    times: Vec<f64>,
    /// `(last node, step)` for runs of equal step, in order.
    runs: Vec<(usize, f64)>,
    cp: Vec<f64>,
    /// Running trapezoid integral of `cp`.
    cp_int: Vec<f64>,
    /// `(node, frame, weight / duration)` sorted by node.
    frame_weights: Vec<(usize, usize, f64)>,
    cp_frame: Vec<f64>,
    cp_int_frame: Vec<f64>,
    n_frames: usize,
}

/// Frame-averaged model pieces that depend on the rates `k2 + k3`.
struct ConvFrames {
    conv: Vec<f64>,
    /// `-d conv / d(k2+k3)`; empty when not requested.
    dconv: Vec<f64>,
}

/// `(segment end, step)` pieces of the default graded grid.
fn graded_segments(onset: f64, end: f64) -> Vec<(f64, f64)> {
    vec![(onset + 120.0, DEFAULT_GRID_STEP), (onset + 600.0, 0.5), (end, 2.0)]
}

impl KineticModel {
    pub fn new(input: &dyn PlasmaInput, schedule: &FrameSchedule) -> Result<Self> {
        let segments = graded_segments(input.onset().max(0.0), schedule.end());
        KineticModel::build(input, schedule, &segments)
    }

    /// Uniform grid with step `dt`.
    pub fn with_step(input: &dyn PlasmaInput, schedule: &FrameSchedule, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("kinetic grid", format!("step {dt} must be positive")));
        }
        KineticModel::build(input, schedule, &[(schedule.end(), dt)])
    }

    fn build(input: &dyn PlasmaInput, schedule: &FrameSchedule, segments: &[(f64, f64)]) -> Result<Self> {
        let end = schedule.end();
        let mut times = vec![0.0];
        let mut runs: Vec<(usize, f64)> = Vec::new();
        for &(seg_end, h) in segments {
            let start = *times.last().expect("nonempty");
            let stop = seg_end.min(end);
            if stop <= start + 1e-9 * h && !(runs.is_empty() && seg_end >= end) {
                continue;
            }
            let n = ((stop - start) / h - 1e-9).ceil().max(1.0) as usize;
            times.extend((1..=n).map(|k| start + k as f64 * h));
            runs.push((times.len() - 1, h));
            if stop >= end {
                break;
            }
        }
        let n_nodes = times.len();
        let cp: Vec<f64> = times.iter().map(|&t| input.value(t)).collect();
        if let Some(v) = cp.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("plasma input", format!("non-finite sample {v}")));
        }
        let mut cp_int = vec![0.0; n_nodes];
        for n in 1..n_nodes {
            cp_int[n] = cp_int[n - 1] + 0.5 * (times[n] - times[n - 1]) * (cp[n - 1] + cp[n]);
        }

        let mut frame_weights = Vec::new();
        for (m, (&s, &d)) in schedule.starts().iter().zip(schedule.durations()).enumerate() {
            for (n, w) in interval_weights(s, s + d, &times) {
                frame_weights.push((n, m, w / d));
            }
        }
        frame_weights.sort_by_key(|&(n, m, _)| (n, m));

        let n_frames = schedule.len();
        let mut model = KineticModel {
            times,
            runs,
            cp,
            cp_int,
            frame_weights,
            cp_frame: Vec::new(),
            cp_int_frame: Vec::new(),
            n_frames,
        };
        model.cp_frame = model.average(&model.cp);
        model.cp_int_frame = model.average(&model.cp_int);
        Ok(model)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Node times of the integration grid.
    pub fn grid_times(&self) -> &[f64] {
        &self.times
    }

    /// Input sampled on the grid.
    pub fn input_on_grid(&self) -> &[f64] {
        &self.cp
    }

    /// Frame averages of the input curve.
    pub fn input_frame_values(&self) -> &[f64] {
        &self.cp_frame
    }

    fn average(&self, curve: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_frames];
        for &(n, m, w) in &self.frame_weights {
            out[m] += w * curve[n];
        }
        out
    }

    /// Walk the trapezoid recursion for `e_n = (exp(-rate t) (*) cp)(t_n)`
    /// and `g_n = -d e_n / d rate`, calling `visit(n, e_n, g_n)` at each node.
    fn convolve(&self, rate: f64, with_derivative: bool, mut visit: impl FnMut(usize, f64, f64)) {
        let (mut e, mut g) = (0.0, 0.0);
        visit(0, 0.0, 0.0);
        let mut n = 0;
        for &(last, h) in &self.runs {
            let q = (-rate * h).exp();
            let half = 0.5 * h;
            while n < last {
                let prev = self.cp[n];
                n += 1;
                if with_derivative {
                    g = q * (g + h * e + half * h * prev);
                }
                e = q * (e + half * prev) + half * self.cp[n];
                visit(n, e, g);
            }
        }
    }

    /// Trapezoid convolution of `cp` with `exp(-rate t)`, frame-averaged,
    /// optionally with its derivative in `rate`.
    fn conv_frames(&self, rate: f64, with_derivative: bool) -> ConvFrames {
        let mut conv = vec![0.0; self.n_frames];
        let mut dconv = if with_derivative { vec![0.0; self.n_frames] } else { Vec::new() };
        let fw = &self.frame_weights;
        let mut k = 0;
        self.convolve(rate, with_derivative, |n, e, g| {
            while k < fw.len() && fw[k].0 == n {
                let (_, m, w) = fw[k];
                conv[m] += w * e;
                if with_derivative {
                    dconv[m] += w * g;
                }
                k += 1;
            }
        });
        ConvFrames { conv, dconv }
    }

    /// `C_PET` on the integration grid.
    pub fn tissue_curve(&self, theta: &KineticParams) -> Vec<f64> {
        let a = theta.k2 + theta.k3;
        let mut out = Vec::with_capacity(self.cp.len());
        self.convolve(a, false, |n, e, _| {
            let ct = tissue_value(theta, a, self.cp_int[n], e);
            out.push((1.0 - theta.fv) * ct + theta.fv * self.cp[n]);
        });
        out
    }

    /// Frame-averaged model prediction `f_m(theta)`.
    pub fn frame_values(&self, theta: &KineticParams) -> Vec<f64> {
        let mut f = vec![0.0; self.n_frames];
        self.frame_values_into(theta, &mut f);
        f
    }

    pub fn frame_values_into(&self, theta: &KineticParams, out: &mut [f64]) {
        if theta.k1 == 0.0 {
            for (o, c) in out.iter_mut().zip(&self.cp_frame) {
                *o = theta.fv * c;
            }
            return;
        }
        let a = theta.k2 + theta.k3;
        let conv = self.conv_frames(a, false).conv;
        for m in 0..self.n_frames {
            let ct = tissue_value(theta, a, self.cp_int_frame[m], conv[m]);
            out[m] = (1.0 - theta.fv) * ct + theta.fv * self.cp_frame[m];
        }
    }

    /// Frame values and the M x 4 Jacobian in `[K1, k2, k3, fv]` order.
    pub fn frame_values_and_jacobian(&self, theta: &KineticParams, f: &mut [f64], jac: &mut [[f64; N_PARAMS]]) {
        let KineticParams { k1, k2, k3, fv } = *theta;
        let a = k2 + k3;
        let span = self.times.last().copied().unwrap_or(0.0);
        let ConvFrames { conv, dconv } = self.conv_frames(a, true);
        let tiny = a * span < 1e-8;
        for m in 0..self.n_frames {
            let (int, e, g) = (self.cp_int_frame[m], conv[m], dconv[m]);
            let ct = tissue_value(theta, a, int, e);
            let (d_k1, d_k2, d_k3) = if tiny {
                // a -> 0 limits; e - int = -a g + O(a^2).
                (int, -k1 * g, 0.0)
            } else {
                (
                    (k3 * int + k2 * e) / a,
                    k1 * (k3 * (e - int) / (a * a) - k2 * g / a),
                    k1 * (k2 * (int - e) / (a * a) - k2 * g / a),
                )
            };
            f[m] = (1.0 - fv) * ct + fv * self.cp_frame[m];
            jac[m] = [(1.0 - fv) * d_k1, (1.0 - fv) * d_k2, (1.0 - fv) * d_k3, self.cp_frame[m] - ct];
        }
    }

    pub fn jacobian(&self, theta: &KineticParams) -> Vec<[f64; N_PARAMS]> {
        let mut f = vec![0.0; self.n_frames];
        let mut jac = vec![[0.0; N_PARAMS]; self.n_frames];
        self.frame_values_and_jacobian(theta, &mut f, &mut jac);
        jac
    }
}

fn tissue_value(theta: &KineticParams, a: f64, int: f64, conv: f64) -> f64 {
    if theta.k1 == 0.0 {
        0.0
    } else if a > 0.0 {
        theta.k1 * (theta.k3 * int + theta.k2 * conv) / a
    } else {
        theta.k1 * int
    }
}

/// Node weights for integrating the piecewise-linear interpolant of grid
/// values over `[a, b]`.
fn interval_weights(a: f64, b: f64, times: &[f64]) -> Vec<(usize, f64)> {
    let mut w: Vec<(usize, f64)> = Vec::new();
    let mut add = |n: usize, v: f64| match w.last_mut() {
        Some(last) if last.0 == n => last.1 += v,
        _ => w.push((n, v)),
    };
    let first = times.partition_point(|&t| t <= a).saturating_sub(1).min(times.len() - 2);
    for n in first..times.len() - 1 {
        let (t0, t1) = (times[n], times[n + 1]);
        if t0 >= b {
            break;
        }
        let (u, v) = (a.max(t0), b.min(t1));
        if v > u {
            // integral of the hat functions of nodes n and n+1 over [u, v]
            let len = v - u;
            let right = (0.5 * (u + v) - t0) / (t1 - t0);
            add(n, len * (1.0 - right));
            add(n + 1, len * right);
        }
    }
    w
}

/// Model curve on the fine grid; see [`KineticModel::tissue_curve`].
pub fn tissue_curve(theta: &KineticParams, model: &KineticModel) -> Vec<f64> {
    model.tissue_curve(theta)
}

pub fn model_frame_values(theta: &KineticParams, model: &KineticModel) -> Vec<f64> {
    model.frame_values(theta)
}

pub fn model_jacobian(theta: &KineticParams, model: &KineticModel) -> Vec<[f64; N_PARAMS]> {
    model.jacobian(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fdg_model() -> KineticModel {
        KineticModel::new(&InputFunction::default(), &FrameSchedule::fdg_40min()).unwrap()
    }

    const GM: KineticParams = KineticParams {
        k1: 0.0017,
        k2: 0.0022,
        k3: 0.0010,
        fv: 0.05,
    };

    #[test]
    fn input_is_zero_before_delay_and_continuous_at_onset() {
        let cp = InputFunction {
            delay: 12.0,
            ..InputFunction::default()
        };
        assert_eq!(cp.value(5.0), 0.0);
        assert_eq!(cp.value(11.999), 0.0);
        assert_eq!(cp.value(12.0), 0.0);
        cp.validate(2400.0).unwrap();
    }

    #[test]
    fn input_matches_high_precision_value() {
        // mpmath at 50 digits, per-second coefficients converted from the
        // per-minute defaults, t = 60 s after onset.
        let expected = 52.976_640_139_775_84;
        let v = InputFunction::default().value(60.0);
        assert!((v - expected).abs() <= 1e-13 * expected, "{v}");
    }

    #[test]
    fn negative_input_rejected() {
        let cp = InputFunction {
            a2: -50.0,
            ..InputFunction::default()
        };
        assert!(cp.validate(2400.0).is_err());
    }

    #[test]
    fn zero_uptake_and_pure_blood() {
        let model = fdg_model();
        let zero = KineticParams::new(0.0, 0.003, 0.001, 0.0).unwrap();
        assert!(model.tissue_curve(&zero).iter().all(|&v| v == 0.0));
        assert!(model.frame_values(&zero).iter().all(|&v| v == 0.0));
        let blood = KineticParams::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(model.tissue_curve(&blood), model.input_on_grid());
        assert_eq!(model.frame_values(&blood), model.input_frame_values());
    }

    #[test]
    fn constant_input_gives_constant_frames() {
        let sched = FrameSchedule::fdg_40min();
        let c = 7.25;
        let model = KineticModel::new(&|_t: f64| c, &sched).unwrap();
        let theta = KineticParams::new(0.0, 0.001, 0.001, 1.0).unwrap();
        for v in model.frame_values(&theta) {
            assert!((v - c).abs() < 1e-12 * c, "{v}");
        }
    }

    /// Classic RK4 on dC/dt = K1 Cp - k2 C with k3 = 0.
    fn rk4_one_tissue(cp: &InputFunction, k1: f64, k2: f64, t_end: f64, h: f64) -> Vec<(f64, f64)> {
        let f = |t: f64, c: f64| k1 * cp.value(t) - k2 * c;
        let mut out = vec![(0.0, 0.0)];
        let (mut t, mut c) = (0.0, 0.0);
        let steps = (t_end / h).round() as usize;
        for _ in 0..steps {
            let s1 = f(t, c);
            let s2 = f(t + h / 2.0, c + h / 2.0 * s1);
            let s3 = f(t + h / 2.0, c + h / 2.0 * s2);
            let s4 = f(t + h, c + h * s3);
            c += h / 6.0 * (s1 + 2.0 * s2 + 2.0 * s3 + s4);
            t += h;
            out.push((t, c));
        }
        out
    }

    #[test]
    fn one_tissue_limit_matches_ode() {
        let cp = InputFunction::default();
        let sched = FrameSchedule::fdg_40min();
        let model = KineticModel::new(&cp, &sched).unwrap();
        let theta = KineticParams::new(0.002, 0.004, 0.0, 0.1).unwrap();
        let curve = model.tissue_curve(&theta);
        let ode = rk4_one_tissue(&cp, theta.k1, theta.k2, 2400.0, 0.01);
        for &t in &[30.0, 60.0, 300.0, 1200.0, 2400.0] {
            let n = node_at(&model, t);
            let k = (t / 0.01).round() as usize;
            let expect = (1.0 - theta.fv) * ode[k].1 + theta.fv * cp.value(t);
            assert!((curve[n] - expect).abs() <= 1e-4 * expect, "t={t}: {} vs {expect}", curve[n]);
        }
    }

    #[test]
    fn frame_average_close_to_midpoint_for_long_frames() {
        let sched = FrameSchedule::fdg_40min();
        let model = fdg_model();
        let f = model.frame_values(&GM);
        let curve = model.tissue_curve(&GM);
        for (m, mid) in sched.frame_mid_times().iter().enumerate() {
            if sched.durations()[m] < 60.0 {
                continue;
            }
            let v = curve[node_at(&model, *mid)];
            assert!((f[m] - v).abs() <= 0.05 * v, "frame {m}: {} vs {v}", f[m]);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let model = fdg_model();
        for theta in [
            GM,
            KineticParams::new(0.0009, 0.0018, 0.0008, 0.03).unwrap(),
            KineticParams::new(0.002, 0.003, 0.0, 0.1).unwrap(),
        ] {
            let jac = model.jacobian(&theta);
            let base = theta.to_array();
            for p in 0..N_PARAMS {
                let h = 1e-5 * base[p].abs().max(1e-4);
                let mut hi = base;
                let mut lo = base;
                hi[p] += h;
                lo[p] -= h;
                let (fh, fl) = (
                    model.frame_values(&KineticParams::from_array(hi)),
                    model.frame_values(&KineticParams::from_array(lo)),
                );
                let scale = jac.iter().map(|r| r[p].abs()).fold(0.0, f64::max);
                for m in 0..model.n_frames() {
                    let fd = (fh[m] - fl[m]) / (2.0 * h);
                    assert!((fd - jac[m][p]).abs() <= 1e-4 * scale, "theta={theta:?} p={p} m={m}: {fd} vs {}", jac[m][p]);
                }
            }
        }
    }

    #[test]
    fn fv_column_is_input_average_without_uptake() {
        let model = fdg_model();
        let theta = KineticParams::new(0.0, 0.002, 0.001, 0.3).unwrap();
        let jac = model.jacobian(&theta);
        for (row, c) in jac.iter().zip(model.input_frame_values()) {
            assert_eq!(row[3], *c);
        }
    }

    #[test]
    fn trapping_limit_is_continuous() {
        let model = fdg_model();
        let trap = model.frame_values(&KineticParams::new(0.002, 0.0, 0.0, 0.0).unwrap());
        let near = model.frame_values(&KineticParams::new(0.002, 0.0, 1e-13, 0.0).unwrap());
        for (a, b) in trap.iter().zip(&near) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn ki_cases() {
        assert_eq!(KineticParams::new(0.1, 0.08, 0.0, 0.0).unwrap().ki().unwrap(), 0.0);
        assert_eq!(KineticParams::new(0.1, 0.0, 0.02, 0.0).unwrap().ki().unwrap(), 0.1);
        let v = KineticParams::new(0.1, 0.08, 0.02, 0.0).unwrap().ki().unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        assert!(KineticParams::new(0.1, 0.0, 0.0, 0.0).unwrap().ki().is_err());
    }

    #[test]
    fn tissue_curve_nonnegative_and_trapping_monotone() {
        let model = fdg_model();
        let curve = model.tissue_curve(&GM);
        assert!(curve.iter().all(|&v| v >= 0.0));
        // Trapped compartment K1 k3/(k2+k3) * int Cp never decreases.
        assert!(model.cp_int.windows(2).all(|w| w[1] >= w[0]));
    }

    fn node_at(model: &KineticModel, t: f64) -> usize {
        let times = model.grid_times();
        let n = times.partition_point(|&s| s < t - 1e-6);
        assert!((times[n] - t).abs() < 1e-6, "no node at {t}");
        n
    }

    #[test]
    fn grid_convergence_at_default_step() {
        let sched = FrameSchedule::fdg_40min();
        let cp = InputFunction::default();
        let fine = KineticModel::with_step(&cp, &sched, 0.05).unwrap();
        for theta in [GM, KineticParams::new(0.005, 0.005, 0.003, 0.0).unwrap()] {
            let want = fine.frame_values(&theta);
            for model in [KineticModel::with_step(&cp, &sched, 0.1).unwrap(), fdg_model()] {
                for (c, f) in model.frame_values(&theta).iter().zip(&want) {
                    assert!((c - f).abs() <= 1e-4 * f.abs(), "{c} vs {f}");
                }
            }
        }
    }

    #[test]
    fn graded_grid_is_coarse_late_and_follows_delay() {
        let sched = FrameSchedule::fdg_40min();
        let model = fdg_model();
        assert!(model.grid_times().len() < 4000);
        assert_eq!(*model.grid_times().last().unwrap(), 2400.0);
        let delayed = InputFunction { delay: 30.0, ..InputFunction::default() };
        let m2 = KineticModel::new(&delayed, &sched).unwrap();
        let t = m2.grid_times();
        let n = t.partition_point(|&s| s < 149.0);
        assert!((t[n + 1] - t[n] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn unaligned_frames_integrate_interpolant() {
        let sched = FrameSchedule::from_durations(0.05, &[1.23, 2.5]).unwrap();
        let model = KineticModel::with_step(&|t: f64| 2.0 * t + 1.0, &sched, 0.1).unwrap();
        let theta = KineticParams::new(0.0, 0.0, 0.0, 1.0).unwrap();
        let f = model.frame_values(&theta);
        // mean of a linear function is its value at the frame midpoint
        assert!((f[0] - (2.0 * (0.05 + 0.615) + 1.0)).abs() < 1e-12);
        assert!((f[1] - (2.0 * (1.28 + 1.25) + 1.0)).abs() < 1e-12);
    }
}
