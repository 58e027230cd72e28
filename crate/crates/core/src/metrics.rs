//! Bias (dB), ROI noise and bias/noise trade-off tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DynamicImage, ParametricMaps, N_PARAMS};
use crate::error::{check_len, Error, Result};
use crate::kinetics::KineticParams;

/// Reported in place of `-inf` when an estimate is exact.
pub const BIAS_FLOOR_DB: f64 = -300.0;

/// Names of the five reported maps, `K_i` last.
pub const MAP_NAMES: [&str; 5] = ["K1", "k2", "k3", "fv", "Ki"];

#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    mask: Vec<bool>,
    count: usize,
}

impl RoiMask {
    pub fn new(mask: Vec<bool>) -> Result<Self> {
        let count = mask.iter().filter(|&&b| b).count();
        if count < 2 {
            return Err(Error::invalid("ROI", format!("{count} voxels selected, need at least 2")));
        }
        Ok(RoiMask { mask, count })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// `10 log10(||est - truth|| / ||truth||)`.
pub fn bias_db(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("bias inputs", truth.len(), estimate.len())?;
    let tn: f64 = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    if !(tn > 0.0) {
        return Err(Error::Domain("bias of a zero-norm ground truth".into()));
    }
    let en: f64 = estimate.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum::<f64>().sqrt();
    if en == 0.0 {
        return Ok(BIAS_FLOOR_DB);
    }
    Ok(10.0 * (en / tn).log10())
}

/// Bias restricted to the voxels where `mask` is set.
pub fn masked_bias_db(estimate: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    check_len("bias mask", truth.len(), mask.len())?;
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect() };
    bias_db(&pick(estimate), &pick(truth))
}

/// Population variance over the ROI.
pub fn roi_noise(frame: &[f64], roi: &RoiMask) -> Result<f64> {
    check_len("ROI noise input", roi.mask.len(), frame.len())?;
    let n = roi.count as f64;
    let mean = frame.iter().zip(&roi.mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / n;
    Ok(frame
        .iter()
        .zip(&roi.mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| (v - mean) * (v - mean))
        .sum::<f64>()
        / n)
}

/// Mean of the per-frame ROI noise.
pub fn volume_noise(image: &DynamicImage, roi: &RoiMask) -> Result<f64> {
    let mut total = 0.0;
    for m in 0..image.n_frames() {
        total += roi_noise(image.frame(m), roi)?;
    }
    Ok(total / image.n_frames() as f64)
}

/// `K_i` per voxel, 0 where `k2 + k3 == 0`.
pub fn ki_map(maps: &ParametricMaps) -> Vec<f64> {
    maps.values()
        .iter()
        .map(|&p| KineticParams::from_array(p).ki().unwrap_or(0.0))
        .collect()
}

/// The four parameter maps followed by `K_i`.
pub fn all_maps(maps: &ParametricMaps) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..N_PARAMS).map(|p| maps.map(p)).collect();
    out.push(ki_map(maps));
    out
}

/// One line of a trade-off table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub algorithm: String,
    pub beta: f64,
    pub iteration: usize,
    /// Frame index, `volume`, or a map name.
    pub target: String,
    pub bias_db: f64,
    pub noise: f64,
}

/// Reference data for scoring reconstructions.
pub struct GroundTruth<'a> {
    pub image: &'a DynamicImage,
    pub maps: &'a ParametricMaps,
    pub roi: &'a RoiMask,
    /// Voxels included in map bias (background excluded).
    pub tissue: &'a [bool],
}

/// Reconstruction state captured at one iteration.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: usize,
    pub image: DynamicImage,
    pub maps: Option<ParametricMaps>,
}

/// All snapshots of one run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub algorithm: String,
    pub beta: f64,
    pub snapshots: Vec<Snapshot>,
}

/// Score every snapshot of every run: one row per frame, one for the whole
/// volume and one per map (when the snapshot carries maps). Rows are ordered
/// by algorithm, then beta, then iteration.
pub fn tradeoff_table(runs: &[RunRecord], truth: &GroundTruth) -> Result<Vec<MetricRow>> {
    let true_maps = all_maps(truth.maps);
    let mut rows = Vec::new();
    for run in runs {
        for snap in &run.snapshots {
            let row = |target: String, bias_db: f64, noise: f64| MetricRow {
                algorithm: run.algorithm.clone(),
                beta: run.beta,
                iteration: snap.iteration,
                target,
                bias_db,
                noise,
            };
            check_len("snapshot frames", truth.image.n_frames(), snap.image.n_frames())?;
            for m in 0..snap.image.n_frames() {
                let b = bias_db(snap.image.frame(m), truth.image.frame(m))?;
                rows.push(row(m.to_string(), b, roi_noise(snap.image.frame(m), truth.roi)?));
            }
            let vb = bias_db(snap.image.values(), truth.image.values())?;
            rows.push(row("volume".into(), vb, volume_noise(&snap.image, truth.roi)?));
            if let Some(maps) = &snap.maps {
                for (k, est) in all_maps(maps).iter().enumerate() {
                    let b = masked_bias_db(est, &true_maps[k], truth.tissue)?;
                    rows.push(row(MAP_NAMES[k].into(), b, roi_noise(est, truth.roi)?));
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        a.algorithm
            .cmp(&b.algorithm)
            .then(a.beta.total_cmp(&b.beta))
            .then(a.iteration.cmp(&b.iteration))
    });
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bias_identities() {
        let t = vec![3.0, 4.0];
        assert_eq!(bias_db(&t, &t).unwrap(), BIAS_FLOOR_DB);
        assert_eq!(bias_db(&[6.0, 8.0], &t).unwrap(), 0.0);
        // ||e|| = 0.5, ||t|| = 5
        assert_eq!(bias_db(&[3.0, 4.5], &t).unwrap(), -10.0);
        assert!(bias_db(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn map_names_extend_param_names() {
        assert_eq!(&MAP_NAMES[..N_PARAMS], &crate::domain::PARAM_NAMES);
    }

    #[test]
    fn noise_identities() {
        let roi = RoiMask::new(vec![true, true, false]).unwrap();
        assert_eq!(roi_noise(&[0.0, 2.0, 100.0], &roi).unwrap(), 1.0);
        assert_eq!(roi_noise(&[5.0, 5.0, 1.0], &roi).unwrap(), 0.0);
        assert!(RoiMask::new(vec![true, false]).is_err());
    }

    proptest! {
        #[test]
        fn bias_scales_by_ten_db_per_decade(
            truth in prop::collection::vec(0.1..10.0f64, 2..20),
            err in prop::collection::vec(-1.0..1.0f64, 20),
        ) {
            prop_assume!(err.iter().take(truth.len()).any(|e| e.abs() > 1e-3));
            let e1: Vec<f64> = truth.iter().zip(&err).map(|(t, e)| t + e).collect();
            let e10: Vec<f64> = truth.iter().zip(&err).map(|(t, e)| t + 10.0 * e).collect();
            let d = bias_db(&e10, &truth).unwrap() - bias_db(&e1, &truth).unwrap();
            prop_assert!((d - 10.0).abs() < 1e-9, "{}", d);
        }

        #[test]
        fn noise_shift_invariant_and_nonnegative(v in prop::collection::vec(-5.0..5.0f64, 3..30), c in -100.0..100.0f64) {
            let roi = RoiMask::new(vec![true; v.len()]).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let (a, b) = (roi_noise(&v, &roi).unwrap(), roi_noise(&shifted, &roi).unwrap());
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }

    fn tiny_truth() -> (DynamicImage, ParametricMaps) {
        let img = DynamicImage::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let maps = ParametricMaps::filled(2, 2, [0.002, 0.002, 0.001, 0.05]).unwrap();
        (img, maps)
    }

    #[test]
    fn table_cardinality_and_order() {
        let (img, maps) = tiny_truth();
        let roi = RoiMask::new(vec![true, true, true, false]).unwrap();
        let tissue = vec![true; 4];
        let truth = GroundTruth {
            image: &img,
            maps: &maps,
            roi: &roi,
            tissue: &tissue,
        };
        let snaps = |its: &[usize], with_maps: bool| {
            its.iter()
                .map(|&i| Snapshot {
                    iteration: i,
                    image: img.clone(),
                    maps: with_maps.then(|| maps.clone()),
                })
                .collect::<Vec<_>>()
        };
        let run = RunRecord {
            algorithm: "mlem".into(),
            beta: 0.0,
            snapshots: snaps(&[1, 2, 3], false),
        };
        let rows = tradeoff_table(&[run], &truth).unwrap();
        let volume: Vec<_> = rows.iter().filter(|r| r.target == "volume").collect();
        assert_eq!(volume.len(), 3);
        assert_eq!(rows.len(), 3 * 3);

        let betas = [250.0, 20.0, 150.0, 50.0, 200.0, 100.0];
        let runs: Vec<_> = betas
            .iter()
            .map(|&b| RunRecord {
                algorithm: "pgm-pet".into(),
                beta: b,
                snapshots: snaps(&[100], true),
            })
            .collect();
        let rows = tradeoff_table(&runs, &truth).unwrap();
        let at: Vec<f64> = rows.iter().filter(|r| r.target == "Ki" && r.iteration == 100).map(|r| r.beta).collect();
        assert_eq!(at, vec![20.0, 50.0, 100.0, 150.0, 200.0, 250.0]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_rows(&path, &rows).unwrap();
        let back = read_rows(&path).unwrap();
        assert_eq!(back, rows);
    }
}
