//! Geometric phantom, noise-free dynamic images and seeded Poisson sinograms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DynamicImage, FrameSchedule, ParametricMaps, SinogramSeries, N_PARAMS};
use crate::error::{check_len, Error, Result};
use crate::kinetics::{KineticModel, KineticParams};
use crate::projector::SystemMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    GrayMatter = 1,
    WhiteMatter = 2,
    Tumor = 3,
    Blood = 4,
}

impl Region {
    pub const TISSUES: [Region; 4] = [Region::GrayMatter, Region::WhiteMatter, Region::Tumor, Region::Blood];

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "background",
            Region::GrayMatter => "gm",
            Region::WhiteMatter => "wm",
            Region::Tumor => "tumor",
            Region::Blood => "blood",
        }
    }
}

/// Kinetic parameters per phantom region. Every region must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionParams {
    pub gm: Option<KineticParams>,
    pub wm: Option<KineticParams>,
    pub tumor: Option<KineticParams>,
    pub blood: Option<KineticParams>,
}

impl Default for RegionParams {
    /// FDG-like values in 1/s; the blood region is pure input (fv = 1).
    fn default() -> Self {
        RegionParams {
            gm: Some(KineticParams { k1: 0.0017, k2: 0.0022, k3: 0.0010, fv: 0.05 }),
            wm: Some(KineticParams { k1: 0.0009, k2: 0.0018, k3: 0.0008, fv: 0.03 }),
            tumor: Some(KineticParams { k1: 0.0025, k2: 0.0020, k3: 0.0015, fv: 0.05 }),
            blood: Some(KineticParams { k1: 0.0, k2: 0.0, k3: 0.0, fv: 1.0 }),
        }
    }
}

impl RegionParams {
    pub fn get(&self, region: Region) -> Option<KineticParams> {
        match region {
            Region::Background => Some(KineticParams::from_array([0.0; N_PARAMS])),
            Region::GrayMatter => self.gm,
            Region::WhiteMatter => self.wm,
            Region::Tumor => self.tumor,
            Region::Blood => self.blood,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in Region::TISSUES {
            let p = self.get(r).ok_or_else(|| Error::invalid("region parameters", format!("missing parameters for region `{}`", r.name())))?;
            p.validate()
                .map_err(|e| Error::invalid("region parameters", format!("region `{}`: {e}", r.name())))?;
        }
        Ok(())
    }
}

/// Label image plus the kinetic parameters of each region.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    width: usize,
    height: usize,
    labels: Vec<Region>,
    params: RegionParams,
}

impl Phantom {
    pub fn from_labels(width: usize, height: usize, labels: Vec<Region>, params: &RegionParams) -> Result<Self> {
        check_len("phantom labels", width * height, labels.len())?;
        params.validate()?;
        Ok(Phantom {
            width,
            height,
            labels,
            params: params.clone(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[Region] {
        &self.labels
    }

    pub fn params(&self, region: Region) -> KineticParams {
        self.params.get(region).expect("validated at construction")
    }

    pub fn mask(&self, region: Region) -> Vec<bool> {
        self.labels.iter().map(|&l| l == region).collect()
    }

    /// Every non-background voxel.
    pub fn tissue_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != Region::Background).collect()
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&l| l == region).count()
    }

    /// Region mask eroded by one voxel (4-neighbourhood); voxels on the
    /// grid border are dropped.
    pub fn eroded_mask(&self, region: Region) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        (0..w * h)
            .map(|j| {
                let (r, c) = (j / w, j % w);
                self.labels[j] == region
                    && r > 0
                    && c > 0
                    && r + 1 < h
                    && c + 1 < w
                    && [j - w, j + w, j - 1, j + 1].iter().all(|&k| self.labels[k] == region)
            })
            .collect()
    }

    /// Ground-truth parameter maps (zeros in the background).
    pub fn true_maps(&self) -> ParametricMaps {
        let values = self.labels.iter().map(|&l| self.params(l).to_array()).collect();
        ParametricMaps::new(self.width, self.height, values).expect("validated params")
    }

    /// Write the label image as a binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.labels.iter().map(|&l| l as u8 * 60));
        out
    }
}

/// Deterministic layout in grid-relative units (`R = min(w, h) / 2`):
/// gray-matter ellipse, white-matter core, a tumour disc inside the white
/// matter and a small blood disc in the gray-matter band, painted in that
/// order.
pub fn build_phantom(width: usize, height: usize, params: &RegionParams) -> Result<Phantom> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("phantom", "grid must be non-empty"));
    }
    params.validate()?;
    let r = width.min(height) as f64 / 2.0;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let in_ellipse = |x: f64, y: f64, ox: f64, oy: f64, ax: f64, ay: f64| {
        ((x - ox) / ax).powi(2) + ((y - oy) / ay).powi(2) <= 1.0
    };
    let labels = (0..width * height)
        .map(|j| {
            let (x, y) = ((j % width) as f64 + 0.5, (j / width) as f64 + 0.5);
            let mut label = Region::Background;
            if in_ellipse(x, y, cx, cy, 0.85 * r, 0.70 * r) {
                label = Region::GrayMatter;
            }
            if in_ellipse(x, y, cx, cy, 0.55 * r, 0.42 * r) {
                label = Region::WhiteMatter;
            }
            if in_ellipse(x, y, cx + 0.2 * r, cy, 0.14 * r, 0.14 * r) {
                label = Region::Tumor;
            }
            if in_ellipse(x, y, cx - 0.7 * r, cy, 0.09 * r, 0.09 * r) {
                label = Region::Blood;
            }
            label
        })
        .collect();
    Ok(Phantom {
        width,
        height,
        labels,
        params: params.clone(),
    })
}

/// Noise-free dynamic image: each voxel carries its region's frame-averaged
/// model curve.
pub fn synthesize_dynamic_image(phantom: &Phantom, model: &KineticModel) -> DynamicImage {
    let tacs: Vec<Vec<f64>> = [Region::Background]
        .into_iter()
        .chain(Region::TISSUES)
        .map(|r| model.frame_values(&phantom.params(r)))
        .collect();
    let n = phantom.labels.len();
    let m = model.n_frames();
    let mut values = vec![0.0; n * m];
    for (j, &l) in phantom.labels.iter().enumerate() {
        for (k, v) in tacs[l as usize].iter().enumerate() {
            values[k * n + j] = *v;
        }
    }
    DynamicImage::new(phantom.width, phantom.height, m, values).expect("model values are nonnegative")
}

/// Expected data for a dynamic image: `E[y_im] = alpha dt_m (A x_m)_i + r_im`.
///
/// `alpha` is chosen so the expected total equals `target_total_counts`, of
/// which `background_fraction` is a background spread uniformly over bins
/// and in proportion to frame duration over frames. The returned series
/// holds the (non-integral) expectations as its counts.
pub fn expected_sinograms(
    x_true: &DynamicImage,
    a: &SystemMatrix,
    schedule: &FrameSchedule,
    target_total_counts: f64,
    background_fraction: f64,
) -> Result<SinogramSeries> {
    if !(target_total_counts > 0.0) || !target_total_counts.is_finite() {
        return Err(Error::invalid("simulation", "target_total_counts must be > 0"));
    }
    if !(0.0..1.0).contains(&background_fraction) {
        return Err(Error::invalid("simulation", "background_fraction must lie in [0, 1)"));
    }
    check_len("simulation frames", schedule.len(), x_true.n_frames())?;
    check_len("simulation voxels", a.n_cols(), x_true.n_voxels())?;
    let (i_bins, m_frames) = (a.n_rows(), schedule.len());
    let durations = schedule.durations();

    let proj: Vec<Vec<f64>> = (0..m_frames)
        .into_par_iter()
        .map(|m| a.forward(x_true.frame(m)).expect("dimensions checked"))
        .collect();
    let trues: f64 = proj.iter().zip(durations).map(|(p, d)| d * p.iter().sum::<f64>()).sum();
    let alpha = if trues > 0.0 {
        target_total_counts * (1.0 - background_fraction) / trues
    } else if background_fraction == 0.0 {
        // Nothing to scale; the expected data is identically zero.
        1.0
    } else {
        return Err(Error::invalid("simulation", "activity projects to zero but a nonzero target was requested"));
    };

    let total_time = schedule.total_scan_time();
    let bg_total = target_total_counts * background_fraction;
    let frame_scale: Vec<f64> = durations.iter().map(|d| alpha * d).collect();
    let mut mean = Vec::with_capacity(i_bins * m_frames);
    let mut background = Vec::with_capacity(i_bins * m_frames);
    for m in 0..m_frames {
        let r = if trues > 0.0 { bg_total * durations[m] / total_time / i_bins as f64 } else { 0.0 };
        for &p in &proj[m] {
            mean.push(frame_scale[m] * p + r);
            background.push(r);
        }
    }
    SinogramSeries::new(i_bins, m_frames, mean, background, frame_scale)
}

/// Seeded Poisson realisation of [`expected_sinograms`]. Frame `m` draws
/// from its own ChaCha stream `(seed, m)`, so results do not depend on
/// scheduling.
pub fn simulate_sinograms(
    x_true: &DynamicImage,
    a: &SystemMatrix,
    schedule: &FrameSchedule,
    target_total_counts: f64,
    background_fraction: f64,
    seed: u64,
) -> Result<SinogramSeries> {
    let expected = expected_sinograms(x_true, a, schedule, target_total_counts, background_fraction)?;
    Ok(sample_poisson(&expected, seed))
}

/// Replace the counts of `expected` by Poisson draws with those means.
pub fn sample_poisson(expected: &SinogramSeries, seed: u64) -> SinogramSeries {
    let i_bins = expected.n_bins();
    let counts: Vec<f64> = (0..expected.n_frames())
        .into_par_iter()
        .flat_map_iter(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            expected
                .counts_frame(m)
                .iter()
                .map(|&lam| if lam > 0.0 { Poisson::new(lam).expect("positive mean").sample(&mut rng) } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect();
    debug_assert_eq!(counts.len(), i_bins * expected.n_frames());
    SinogramSeries::new(
        i_bins,
        expected.n_frames(),
        counts,
        expected.background().to_vec(),
        expected.frame_scale().to_vec(),
    )
    .expect("Poisson draws are nonnegative")
}
