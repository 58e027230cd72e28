//! Image reconstruction: MLEM, spatial MAP-OSL, PGM-PET (alternating kinetic
//! fit and kinetic-prior image update), the ICM-EM direct baseline and the
//! single-step PGD driver.

mod em;

pub use em::{
    frame_log_likelihood, kinetic_prior_gradient, mlem_update, osl_penalized_update, poisson_log_likelihood,
    spatial_prior_gradient, FrameData, OslStep,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{DynamicImage, ParametricMaps, SinogramSeries};
use crate::error::{check_len, Error, Result};
use crate::fitting::{map_lm_fit, HuberSpec, LMOptions};
use crate::kinetics::{KineticModel, KineticParams};
use crate::metrics::{bias_db, volume_noise, RoiMask, Snapshot};
use crate::projector::SystemMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Mlem,
    MapOsl,
    PgmPet,
    IcmEm,
    Pgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Mlem, Algorithm::MapOsl, Algorithm::PgmPet, Algorithm::IcmEm, Algorithm::Pgd];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mlem => "mlem",
            Algorithm::MapOsl => "map-osl",
            Algorithm::PgmPet => "pgm-pet",
            Algorithm::IcmEm => "icm-em",
            Algorithm::Pgd => "pgd",
        }
    }

    /// Whether the algorithm estimates parameter maps inside the loop.
    pub fn is_direct(self) -> bool {
        matches!(self, Algorithm::PgmPet | Algorithm::IcmEm | Algorithm::Pgd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::invalid(
                "algorithm",
                format!("unknown algorithm '{s}', expected one of mlem, map-osl, pgm-pet, icm-em, pgd"),
            )
        })
    }
}

/// Reconstruction settings.
///
/// `beta` and `sigma` enter the kinetic prior only through `beta / sigma^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub algorithm: Algorithm,
    pub n_outer_iters: usize,
    pub n_inner_image_updates: usize,
    pub beta: f64,
    pub sigma: f64,
    pub map_prior: HuberSpec,
    pub spatial_beta: f64,
    pub spatial_delta: f64,
    /// Relative OSL denominator floor (times `max_j scale s_j`).
    pub denominator_floor: f64,
    /// Kinetic fit options per cycle; `max_iters` caps LM iterations per cycle.
    pub lm: LMOptions,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            algorithm: Algorithm::PgmPet,
            n_outer_iters: 100,
            n_inner_image_updates: 1,
            beta: 0.0,
            sigma: 200.0,
            map_prior: HuberSpec::default(),
            spatial_beta: 0.05,
            spatial_delta: 1.0,
            denominator_floor: 1e-6,
            lm: LMOptions {
                max_iters: 5,
                rel_tol: 1e-8,
                ..LMOptions::default()
            },
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64, need: &str| Error::invalid("recon", format!("{what} = {v} must be {need}"));
        if self.n_outer_iters == 0 {
            return Err(Error::invalid("recon", "n_outer_iters must be >= 1"));
        }
        if self.n_inner_image_updates == 0 {
            return Err(Error::invalid("recon", "n_inner_image_updates must be >= 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(bad("beta", self.beta, ">= 0"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(bad("sigma", self.sigma, "> 0"));
        }
        if !(self.spatial_beta >= 0.0 && self.spatial_beta.is_finite()) {
            return Err(bad("spatial_beta", self.spatial_beta, ">= 0"));
        }
        if !(self.spatial_delta > 0.0) {
            return Err(bad("spatial_delta", self.spatial_delta, "> 0"));
        }
        if !(self.denominator_floor > 0.0) {
            return Err(bad("denominator_floor", self.denominator_floor, "> 0"));
        }
        self.map_prior.validate()?;
        self.lm.validate()
    }
}

/// Measured data and operators shared by every driver.
#[derive(Clone, Copy)]
pub struct ReconProblem<'a> {
    pub data: &'a SinogramSeries,
    pub system: &'a SystemMatrix,
    pub model: &'a KineticModel,
    pub width: usize,
    pub height: usize,
}

impl ReconProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        check_len("image grid vs system matrix", self.system.n_cols(), self.width * self.height)?;
        check_len("sinogram bins vs system matrix", self.system.n_rows(), self.data.n_bins())?;
        check_len("sinogram frames vs schedule", self.model.n_frames(), self.data.n_frames())
    }

    fn frame(&self, m: usize) -> FrameData<'_> {
        FrameData {
            counts: self.data.counts_frame(m),
            background: self.data.background_frame(m),
            scale: self.data.frame_scale()[m],
        }
    }

    fn n_frames(&self) -> usize {
        self.data.n_frames()
    }
}

/// Ground truth used only for history diagnostics.
#[derive(Clone, Copy)]
pub struct Reference<'a> {
    pub image: &'a DynamicImage,
    pub roi: &'a RoiMask,
}

/// Per-run options that are not algorithm settings.
#[derive(Clone, Default)]
pub struct RunOptions<'a> {
    /// Cycles (1-based) at which to keep a snapshot.
    pub checkpoints: Vec<usize>,
    pub init_image: Option<DynamicImage>,
    pub init_maps: Option<ParametricMaps>,
    pub reference: Option<Reference<'a>>,
}

/// Diagnostics of one outer cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub log_likelihood: f64,
    /// `sum (x - f(theta))^2` after the cycle, for direct algorithms.
    pub km_residual: Option<f64>,
    pub bias_db: Option<f64>,
    pub roi_noise: Option<f64>,
    pub floored_fraction: f64,
    pub lm_iterations: usize,
    pub image_updates: usize,
}

#[derive(Clone, Debug)]
pub struct ReconOutput {
    pub image: DynamicImage,
    pub maps: Option<ParametricMaps>,
    pub history: Vec<CycleRecord>,
    pub snapshots: Vec<Snapshot>,
}

/// Uniform start: frame `m` gets `max(sum y - sum r, tiny) / (scale_m sum_j s_j)`
/// so its expected true counts match the data; zero where `s_j = 0`.
pub fn initial_image(problem: &ReconProblem) -> Result<DynamicImage> {
    problem.validate()?;
    let s = problem.system.sensitivity();
    let s_total: f64 = s.iter().sum();
    if !(s_total > 0.0) {
        return Err(Error::Domain("system matrix has zero sensitivity".into()));
    }
    let n = problem.width * problem.height;
    let mut values = vec![0.0; n * problem.n_frames()];
    for (m, frame) in values.chunks_exact_mut(n).enumerate() {
        let d = problem.frame(m);
        let net = (d.counts.iter().sum::<f64>() - d.background.iter().sum::<f64>()).max(1e-12);
        let v = if d.scale > 0.0 { net / (d.scale * s_total) } else { 1e-12 };
        for (x, &sj) in frame.iter_mut().zip(s) {
            if sj > 0.0 {
                *x = v;
            }
        }
    }
    DynamicImage::new(problem.width, problem.height, problem.n_frames(), values)
}

/// Model frame values for every voxel, frame-major.
pub fn model_image(maps: &ParametricMaps, model: &KineticModel) -> DynamicImage {
    let n = maps.n_voxels();
    let m = model.n_frames();
    let mut values = vec![0.0; n * m];
    let mut f = vec![0.0; m];
    for (j, &theta) in maps.values().iter().enumerate() {
        model.frame_values_into(&KineticParams::from_array(theta), &mut f);
        for (k, v) in f.iter().enumerate() {
            values[k * n + j] = *v;
        }
    }
    DynamicImage::new(maps.width(), maps.height(), m, values).expect("model values are nonnegative")
}

/// Total Poisson log-likelihood over frames.
pub fn total_log_likelihood(problem: &ReconProblem, image: &DynamicImage) -> Result<f64> {
    let mut total = 0.0;
    for m in 0..problem.n_frames() {
        total += frame_log_likelihood(problem.system, image.frame(m), &problem.frame(m))?;
    }
    Ok(total)
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Run the configured algorithm.
pub fn reconstruct(problem: &ReconProblem, config: &ReconConfig, opts: &RunOptions) -> Result<ReconOutput> {
    config.validate()?;
    problem.validate()?;
    let mut image = match &opts.init_image {
        Some(x) => {
            check_len("initial image", problem.width * problem.height * problem.n_frames(), x.values().len())?;
            x.clone()
        }
        None => initial_image(problem)?,
    };
    let mut maps = match &opts.init_maps {
        Some(p) => {
            check_len("initial maps", problem.width * problem.height, p.n_voxels())?;
            p.clone()
        }
        None => ParametricMaps::filled(problem.width, problem.height, config.lm.bounds.center())?,
    };
    let algorithm = config.algorithm;
    let n = problem.width * problem.height;
    let n_sensitive = problem.system.sensitivity().iter().filter(|&&s| s > 0.0).count().max(1);
    let mut history = Vec::with_capacity(config.n_outer_iters);
    let mut snapshots = Vec::new();
    let mut model_values: Option<DynamicImage> = None;

    for cycle in 1..=config.n_outer_iters {
        let mut floored = 0usize;
        let mut updates = 0usize;
        let mut lm_iterations = 0usize;
        let mut fit = |maps: &ParametricMaps, image: &DynamicImage, lm: &LMOptions| -> Result<ParametricMaps> {
            let (next, diag) = map_lm_fit(maps, image, problem.model, &config.map_prior, config.sigma, lm)?;
            lm_iterations += diag.iterations.iter().sum::<usize>();
            Ok(next)
        };

        match algorithm {
            Algorithm::Mlem => {
                for _ in 0..config.n_inner_image_updates {
                    image = image_step(problem, &image, |_, _| Ok(None), 0.0, config, &mut floored)?;
                    updates += problem.n_frames();
                }
            }
            Algorithm::MapOsl => {
                for _ in 0..config.n_inner_image_updates {
                    image = image_step(
                        problem,
                        &image,
                        |_, x| spatial_prior_gradient(x, problem.width, problem.height, config.spatial_delta).map(Some),
                        config.spatial_beta,
                        config,
                        &mut floored,
                    )?;
                    updates += problem.n_frames();
                }
            }
            Algorithm::PgmPet | Algorithm::Pgd => {
                let (lm, inner) = if algorithm == Algorithm::Pgd {
                    (LMOptions { max_iters: 1, ..config.lm }, 1)
                } else {
                    (config.lm, config.n_inner_image_updates)
                };
                maps = fit(&maps, &image, &lm)?;
                let f = model_image(&maps, problem.model);
                for _ in 0..inner {
                    let grad = kinetic_prior_gradient(&image, &f, config.sigma)?;
                    image = image_step(problem, &image, |m, _| Ok(Some(grad[m * n..(m + 1) * n].to_vec())), config.beta, config, &mut floored)?;
                    updates += problem.n_frames();
                }
                model_values = Some(f);
            }
            Algorithm::IcmEm => {
                let em = image_step(problem, &image, |_, _| Ok(None), 0.0, config, &mut floored)?;
                updates += problem.n_frames();
                maps = fit(&maps, &em, &config.lm)?;
                image = model_image(&maps, problem.model);
                model_values = Some(image.clone());
            }
        }

        let (bias, noise) = match &opts.reference {
            Some(r) => (Some(bias_db(image.values(), r.image.values())?), Some(volume_noise(&image, r.roi)?)),
            None => (None, None),
        };
        history.push(CycleRecord {
            cycle,
            log_likelihood: total_log_likelihood(problem, &image)?,
            km_residual: model_values.as_ref().map(|f| sq_distance(image.values(), f.values())),
            bias_db: bias,
            roi_noise: noise,
            floored_fraction: floored as f64 / (n_sensitive * updates.max(1)) as f64,
            lm_iterations,
            image_updates: updates,
        });
        if opts.checkpoints.contains(&cycle) {
            snapshots.push(Snapshot {
                iteration: cycle,
                image: image.clone(),
                maps: algorithm.is_direct().then(|| maps.clone()),
            });
        }
    }

    Ok(ReconOutput {
        image,
        maps: algorithm.is_direct().then_some(maps),
        history,
        snapshots,
    })
}

/// One image update of every frame. `grad(m, x_m)` supplies the log-prior
/// gradient of frame `m`, or `None` for plain MLEM.
fn image_step(
    problem: &ReconProblem,
    image: &DynamicImage,
    grad: impl Fn(usize, &[f64]) -> Result<Option<Vec<f64>>>,
    beta: f64,
    config: &ReconConfig,
    floored: &mut usize,
) -> Result<DynamicImage> {
    let mut values = Vec::with_capacity(image.values().len());
    for m in 0..problem.n_frames() {
        let x = image.frame(m);
        let data = problem.frame(m);
        match grad(m, x)? {
            Some(g) => {
                let step = osl_penalized_update(x, problem.system, &data, &g, beta, config.denominator_floor)?;
                *floored += step.floored;
                values.extend(step.image);
            }
            None => values.extend(mlem_update(x, problem.system, &data)?),
        }
    }
    DynamicImage::new(image.width(), image.height(), image.n_frames(), values)
}

pub fn mlem_reconstruct(problem: &ReconProblem, config: &ReconConfig, opts: &RunOptions) -> Result<ReconOutput> {
    reconstruct(problem, &ReconConfig { algorithm: Algorithm::Mlem, ..config.clone() }, opts)
}

pub fn map_osl_reconstruct(problem: &ReconProblem, config: &ReconConfig, opts: &RunOptions) -> Result<ReconOutput> {
    reconstruct(problem, &ReconConfig { algorithm: Algorithm::MapOsl, ..config.clone() }, opts)
}

pub fn pgm_pet_reconstruct(problem: &ReconProblem, config: &ReconConfig, opts: &RunOptions) -> Result<ReconOutput> {
    reconstruct(problem, &ReconConfig { algorithm: Algorithm::PgmPet, ..config.clone() }, opts)
}

pub fn icm_em_reconstruct(problem: &ReconProblem, config: &ReconConfig, opts: &RunOptions) -> Result<ReconOutput> {
    reconstruct(problem, &ReconConfig { algorithm: Algorithm::IcmEm, ..config.clone() }, opts)
}

pub fn pgd_reconstruct(problem: &ReconProblem, config: &ReconConfig, opts: &RunOptions) -> Result<ReconOutput> {
    reconstruct(problem, &ReconConfig { algorithm: Algorithm::Pgd, ..config.clone() }, opts)
}

/// Indirect maps for snapshots that lack them, fitted in iteration order
/// with each fit warm-started from the previous one.
pub fn fit_snapshot_maps(
    snapshots: &mut [Snapshot],
    model: &KineticModel,
    prior: &HuberSpec,
    sigma: f64,
    lm: &LMOptions,
) -> Result<()> {
    let mut prev: Option<ParametricMaps> = None;
    for snap in snapshots.iter_mut() {
        if snap.maps.is_some() {
            continue;
        }
        let init = match prev.take() {
            Some(p) => p,
            None => ParametricMaps::filled(snap.image.width(), snap.image.height(), lm.bounds.center())?,
        };
        let (maps, _) = map_lm_fit(&init, &snap.image, model, prior, sigma, lm)?;
        prev = Some(maps.clone());
        snap.maps = Some(maps);
    }
    Ok(())
}

pub fn write_history(path: &Path, history: &[CycleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<CycleRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests;
