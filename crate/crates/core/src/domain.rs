//! Shared containers: frame schedules, dynamic images, sinogram series and
//! parametric maps.
//!
//! Activity is in kBq/mL and time in seconds everywhere. Per-frame arrays are
//! stored frame-major: all voxels (or bins) of frame `m` are contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Number of kinetic parameters per voxel.
pub const N_PARAMS: usize = 4;

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; N_PARAMS] = ["K1", "k2", "k3", "fv"];

/// Contiguous acquisition frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct FrameSchedule {
    starts: Vec<f64>,
    durations: Vec<f64>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    starts: Vec<f64>,
    durations: Vec<f64>,
}

impl TryFrom<RawSchedule> for FrameSchedule {
    type Error = Error;
    fn try_from(raw: RawSchedule) -> Result<Self> {
        FrameSchedule::new(raw.starts, raw.durations)
    }
}

impl From<FrameSchedule> for RawSchedule {
    fn from(s: FrameSchedule) -> Self {
        RawSchedule {
            starts: s.starts,
            durations: s.durations,
        }
    }
}

impl FrameSchedule {
    pub fn new(starts: Vec<f64>, durations: Vec<f64>) -> Result<Self> {
        if starts.is_empty() {
            return Err(Error::invalid("frame schedule", "at least one frame is required"));
        }
        check_len("frame schedule durations", starts.len(), durations.len())?;
        if !(starts[0] >= 0.0) {
            return Err(Error::invalid("frame schedule", "first frame starts before t = 0"));
        }
        for (m, &d) in durations.iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid(
                    "frame schedule",
                    format!("frame {m} has non-positive duration {d}"),
                ));
            }
        }
        for m in 0..starts.len() - 1 {
            let end = starts[m] + durations[m];
            if (end - starts[m + 1]).abs() > 1e-9 * end.abs().max(1.0) {
                return Err(Error::invalid(
                    "frame schedule",
                    format!("frame {} ends at {end} but frame {} starts at {}", m, m + 1, starts[m + 1]),
                ));
            }
        }
        Ok(FrameSchedule { starts, durations })
    }

    /// Contiguous frames starting at `t0` with the given durations.
    pub fn from_durations(t0: f64, durations: &[f64]) -> Result<Self> {
        let mut starts = Vec::with_capacity(durations.len());
        let mut t = t0;
        for &d in durations {
            starts.push(t);
            t += d;
        }
        FrameSchedule::new(starts, durations.to_vec())
    }

    /// Frames given as `(count, duration)` runs, e.g. `[(12, 10.0), (2, 30.0)]`.
    pub fn from_runs(runs: &[(usize, f64)]) -> Result<Self> {
        let durations: Vec<f64> = runs
            .iter()
            .flat_map(|&(n, d)| std::iter::repeat_n(d, n))
            .collect();
        FrameSchedule::from_durations(0.0, &durations)
    }

    /// The 24-frame, 40-minute FDG protocol:
    /// 12x10s, 2x30s, 3x60s, 2x120s, 4x300s, 1x600s.
    pub fn fdg_40min() -> Self {
        FrameSchedule::from_runs(&[(12, 10.0), (2, 30.0), (3, 60.0), (2, 120.0), (4, 300.0), (1, 600.0)])
            .expect("static schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn end(&self) -> f64 {
        let last = self.len() - 1;
        self.starts[last] + self.durations[last]
    }

    pub fn frame_mid_times(&self) -> Vec<f64> {
        self.starts
            .iter()
            .zip(&self.durations)
            .map(|(s, d)| s + d / 2.0)
            .collect()
    }

    pub fn total_scan_time(&self) -> f64 {
        self.end() - self.starts[0]
    }
}

/// Free-function form of [`FrameSchedule::frame_mid_times`].
pub fn frame_mid_times(schedule: &FrameSchedule) -> Vec<f64> {
    schedule.frame_mid_times()
}

/// Free-function form of [`FrameSchedule::total_scan_time`].
pub fn total_scan_time(schedule: &FrameSchedule) -> f64 {
    schedule.total_scan_time()
}

fn check_nonneg(what: &'static str, values: &[f64]) -> Result<()> {
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(what, format!("entry {i} is {v}, expected a finite value >= 0")));
    }
    Ok(())
}

/// J-voxel by M-frame activity, frame-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicImage {
    width: usize,
    height: usize,
    n_frames: usize,
    values: Vec<f64>,
}

impl DynamicImage {
    pub fn new(width: usize, height: usize, n_frames: usize, values: Vec<f64>) -> Result<Self> {
        check_len("dynamic image values", width * height * n_frames, values.len())?;
        check_nonneg("dynamic image", &values)?;
        Ok(DynamicImage {
            width,
            height,
            n_frames,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, n_frames: usize) -> Self {
        DynamicImage {
            width,
            height,
            n_frames,
            values: vec![0.0; width * height * n_frames],
        }
    }

    /// Build from per-voxel TACs (`tacs[j][m]`).
    pub fn from_tacs(width: usize, height: usize, n_frames: usize, tacs: &[Vec<f64>]) -> Result<Self> {
        check_len("voxel TACs", width * height, tacs.len())?;
        let n_vox = width * height;
        let mut values = vec![0.0; n_vox * n_frames];
        for (j, tac) in tacs.iter().enumerate() {
            check_len("voxel TAC length", n_frames, tac.len())?;
            for (m, &v) in tac.iter().enumerate() {
                values[m * n_vox + j] = v;
            }
        }
        DynamicImage::new(width, height, n_frames, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_voxels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, m: usize) -> &[f64] {
        let j = self.n_voxels();
        &self.values[m * j..(m + 1) * j]
    }

    pub fn tac(&self, j: usize) -> Vec<f64> {
        let n = self.n_voxels();
        (0..self.n_frames).map(|m| self.values[m * n + j]).collect()
    }

    pub(crate) fn tac_into(&self, j: usize, out: &mut [f64]) {
        let n = self.n_voxels();
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.values[m * n + j];
        }
    }
}

/// I-bin by M-frame measured counts with the additive background used in the
/// forward model.
///
/// `frame_scale[m]` converts frame-`m` activity (kBq/mL) into expected counts
/// per unit of system-matrix weight, so that
/// `E[y_im] = frame_scale[m] * (A x_m)_i + background_im`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinogramSeries {
    n_bins: usize,
    n_frames: usize,
    counts: Vec<f64>,
    background: Vec<f64>,
    frame_scale: Vec<f64>,
}

impl SinogramSeries {
    pub fn new(
        n_bins: usize,
        n_frames: usize,
        counts: Vec<f64>,
        background: Vec<f64>,
        frame_scale: Vec<f64>,
    ) -> Result<Self> {
        check_len("sinogram counts", n_bins * n_frames, counts.len())?;
        check_len("sinogram background", n_bins * n_frames, background.len())?;
        check_len("sinogram frame scale", n_frames, frame_scale.len())?;
        check_nonneg("sinogram counts", &counts)?;
        check_nonneg("sinogram background", &background)?;
        check_nonneg("sinogram frame scale", &frame_scale)?;
        Ok(SinogramSeries {
            n_bins,
            n_frames,
            counts,
            background,
            frame_scale,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn frame_scale(&self) -> &[f64] {
        &self.frame_scale
    }

    pub fn counts_frame(&self, m: usize) -> &[f64] {
        &self.counts[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn background_frame(&self, m: usize) -> &[f64] {
        &self.background[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn total_counts(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Whether every count is a whole number, as for measured or
    /// Poisson-sampled data. Noise-free expected data is not integral.
    pub fn is_integral(&self) -> bool {
        self.counts.iter().all(|c| c.fract() == 0.0)
    }
}

/// Per-voxel kinetic parameters `[K1, k2, k3, fv]`, voxel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricMaps {
    width: usize,
    height: usize,
    values: Vec<[f64; N_PARAMS]>,
}

impl ParametricMaps {
    pub fn new(width: usize, height: usize, values: Vec<[f64; N_PARAMS]>) -> Result<Self> {
        check_len("parametric maps", width * height, values.len())?;
        for (j, p) in values.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) || p[0] < 0.0 || p[1] < 0.0 || p[2] < 0.0 || !(0.0..=1.0).contains(&p[3])
            {
                return Err(Error::invalid("parametric maps", format!("voxel {j} has inadmissible parameters {p:?}")));
            }
        }
        Ok(ParametricMaps { width, height, values })
    }

    pub fn filled(width: usize, height: usize, theta: [f64; N_PARAMS]) -> Result<Self> {
        ParametricMaps::new(width, height, vec![theta; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_voxels(&self) -> usize {
        self.values.len()
    }

    pub fn n_params(&self) -> usize {
        N_PARAMS
    }

    pub fn values(&self) -> &[[f64; N_PARAMS]] {
        &self.values
    }

    pub fn voxel(&self, j: usize) -> [f64; N_PARAMS] {
        self.values[j]
    }

    /// One parameter across all voxels.
    pub fn map(&self, p: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[p]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_frame_midpoint() {
        let s = FrameSchedule::new(vec![0.0], vec![10.0]).unwrap();
        assert_eq!(s.frame_mid_times(), vec![5.0]);
        assert_eq!(s.total_scan_time(), 10.0);
    }

    #[test]
    fn two_frame_midpoints() {
        let s = FrameSchedule::new(vec![0.0, 10.0], vec![10.0, 30.0]).unwrap();
        assert_eq!(s.frame_mid_times(), vec![5.0, 25.0]);
        assert_eq!(s.total_scan_time(), 40.0);
    }

    #[test]
    fn fdg_protocol() {
        let s = FrameSchedule::fdg_40min();
        assert_eq!(s.len(), 24);
        assert_eq!(*s.frame_mid_times().last().unwrap(), 2100.0);
        assert_eq!(s.total_scan_time(), 2400.0);
    }

    #[test]
    fn rejects_gaps_and_bad_durations() {
        assert!(FrameSchedule::new(vec![0.0, 11.0], vec![10.0, 10.0]).is_err());
        assert!(FrameSchedule::new(vec![0.0], vec![0.0]).is_err());
        assert!(FrameSchedule::new(vec![-1.0], vec![1.0]).is_err());
        assert!(FrameSchedule::new(vec![], vec![]).is_err());
    }

    #[test]
    fn schedule_deserialization_validates() {
        let bad = r#"{"starts":[0.0,5.0],"durations":[10.0,10.0]}"#;
        assert!(serde_json::from_str::<FrameSchedule>(bad).is_err());
    }

    #[test]
    fn image_frame_major_layout() {
        let img = DynamicImage::from_tacs(2, 1, 3, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(img.values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(img.frame(1), &[2.0, 5.0]);
        assert_eq!(img.tac(1), vec![4.0, 5.0, 6.0]);
        assert!(DynamicImage::new(1, 1, 1, vec![-1.0]).is_err());
    }

    #[test]
    fn maps_reject_inadmissible() {
        assert!(ParametricMaps::new(1, 1, vec![[0.1, 0.1, 0.1, 1.5]]).is_err());
        assert!(ParametricMaps::new(1, 1, vec![[-0.1, 0.1, 0.1, 0.5]]).is_err());
        assert!(ParametricMaps::new(1, 1, vec![[0.1, 0.1, 0.1, 0.5]]).is_ok());
    }

    fn arb_schedule() -> impl Strategy<Value = FrameSchedule> {
        (0.0..100.0f64, prop::collection::vec(1e-3..500.0f64, 1..30))
            .prop_map(|(t0, d)| FrameSchedule::from_durations(t0, &d).unwrap())
    }

    proptest! {
        #[test]
        fn mid_times_strictly_increase(s in arb_schedule()) {
            let mid = s.frame_mid_times();
            prop_assert!(mid.windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn containers_roundtrip_bit_identical(
            s in arb_schedule(),
            vals in prop::collection::vec(0.0..1e6f64, 6),
            theta in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..=1.0f64), 2),
        ) {
            let s2: FrameSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            prop_assert_eq!(&s, &s2);

            let img = DynamicImage::new(1, 2, 3, vals.clone()).unwrap();
            let img2: DynamicImage = serde_json::from_str(&serde_json::to_string(&img).unwrap()).unwrap();
            prop_assert!(img.values().iter().zip(img2.values()).all(|(a, b)| a.to_bits() == b.to_bits()));

            let sino = SinogramSeries::new(3, 2, vals.iter().map(|v| v.floor()).collect(), vals.clone(), vec![0.5, 2.0]).unwrap();
            let sino2: SinogramSeries = serde_json::from_str(&serde_json::to_string(&sino).unwrap()).unwrap();
            prop_assert!(sino.background().iter().zip(sino2.background()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(&sino, &sino2);

            let maps = ParametricMaps::new(2, 1, theta.iter().map(|t| [t.0, t.1, t.2, t.3]).collect()).unwrap();
            let maps2: ParametricMaps = serde_json::from_str(&serde_json::to_string(&maps).unwrap()).unwrap();
            prop_assert!(maps.values().iter().flatten().zip(maps2.values().iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
