//! File formats: `.dpt` binary arrays and CSV exports.
//!
//! A `.dpt` file is one UTF-8 JSON header line terminated by `\n`, followed
//! by little-endian `f32` values. Images are stored frame-major, sinograms
//! as all counts followed by all background, maps parameter-major.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DynamicImage, FrameSchedule, ParametricMaps, SinogramSeries, N_PARAMS, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::fitting::FitDiagnostics;
use crate::metrics::ki_map;

pub const DPT_FORMAT: &str = "dpt";
pub const DPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DptKind {
    Image,
    Sinogram,
    Maps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DptHeader {
    pub format: String,
    pub version: u32,
    pub kind: DptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_bins: Option<usize>,
    pub n_frames: usize,
    /// Planes stored back to back (1 for images, 2 for sinograms, 4 for maps).
    pub channels: usize,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<FrameSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_scale: Option<Vec<f64>>,
}

impl DptHeader {
    fn n_values(&self) -> Result<usize> {
        let plane = match self.kind {
            DptKind::Image => self.grid()? * self.n_frames,
            DptKind::Maps => self.grid()?,
            DptKind::Sinogram => self.n_bins.ok_or_else(|| self.missing("n_bins"))? * self.n_frames,
        };
        Ok(plane * self.channels)
    }

    fn grid(&self) -> Result<usize> {
        Ok(self.width.ok_or_else(|| self.missing("width"))? * self.height.ok_or_else(|| self.missing("height"))?)
    }

    fn missing(&self, field: &str) -> Error {
        Error::Format {
            path: Default::default(),
            message: format!("{:?} header lacks '{field}'", self.kind),
        }
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_dpt(path: &Path, header: &DptHeader, values: &[f64]) -> Result<()> {
    let expected = header.n_values().map_err(|e| format_err(path, e.to_string()))?;
    if expected != values.len() {
        return Err(format_err(path, format!("header describes {expected} values, got {}", values.len())));
    }
    let mut buf = serde_json::to_vec(header)?;
    buf.push(b'\n');
    buf.reserve(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_dpt(path: &Path) -> Result<(DptHeader, Vec<f64>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    if line.last() != Some(&b'\n') {
        return Err(format_err(path, "missing header line"));
    }
    let header: DptHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.format != DPT_FORMAT || header.version != DPT_VERSION {
        return Err(format_err(path, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let n = header.n_values().map_err(|e| format_err(path, e.to_string()))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != 4 * n {
        return Err(format_err(path, format!("expected {} payload bytes, found {}", 4 * n, raw.len())));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((header, values))
}

fn expect_kind(path: &Path, header: &DptHeader, kind: DptKind) -> Result<()> {
    if header.kind != kind {
        return Err(format_err(path, format!("expected a {kind:?} file, found {:?}", header.kind)));
    }
    Ok(())
}

fn header(kind: DptKind, n_frames: usize, channels: usize, units: &str) -> DptHeader {
    DptHeader {
        format: DPT_FORMAT.into(),
        version: DPT_VERSION,
        kind,
        width: None,
        height: None,
        n_bins: None,
        n_frames,
        channels,
        units: units.into(),
        schedule: None,
        frame_scale: None,
    }
}

pub fn write_image(path: &Path, image: &DynamicImage, schedule: Option<&FrameSchedule>) -> Result<()> {
    let mut h = header(DptKind::Image, image.n_frames(), 1, "kBq/mL");
    h.width = Some(image.width());
    h.height = Some(image.height());
    h.schedule = schedule.cloned();
    write_dpt(path, &h, image.values())
}

pub fn read_image(path: &Path) -> Result<(DynamicImage, Option<FrameSchedule>)> {
    let (h, values) = read_dpt(path)?;
    expect_kind(path, &h, DptKind::Image)?;
    let image = DynamicImage::new(h.width.unwrap_or(0), h.height.unwrap_or(0), h.n_frames, values)?;
    Ok((image, h.schedule))
}

pub fn write_sinograms(path: &Path, data: &SinogramSeries, schedule: Option<&FrameSchedule>) -> Result<()> {
    let mut h = header(DptKind::Sinogram, data.n_frames(), 2, "counts");
    h.n_bins = Some(data.n_bins());
    h.schedule = schedule.cloned();
    h.frame_scale = Some(data.frame_scale().to_vec());
    let mut values = data.counts().to_vec();
    values.extend_from_slice(data.background());
    write_dpt(path, &h, &values)
}

pub fn read_sinograms(path: &Path) -> Result<(SinogramSeries, Option<FrameSchedule>)> {
    let (h, mut values) = read_dpt(path)?;
    expect_kind(path, &h, DptKind::Sinogram)?;
    if h.channels != 2 {
        return Err(format_err(path, "sinogram files carry counts and background"));
    }
    let scale = h.frame_scale.clone().ok_or_else(|| format_err(path, "sinogram header lacks 'frame_scale'"))?;
    let background = values.split_off(values.len() / 2);
    let data = SinogramSeries::new(h.n_bins.unwrap_or(0), h.n_frames, values, background, scale)?;
    Ok((data, h.schedule))
}

pub fn write_maps(path: &Path, maps: &ParametricMaps) -> Result<()> {
    let mut h = header(DptKind::Maps, 1, N_PARAMS, "1/s; fv dimensionless");
    h.width = Some(maps.width());
    h.height = Some(maps.height());
    let values: Vec<f64> = (0..N_PARAMS).flat_map(|p| maps.map(p)).collect();
    write_dpt(path, &h, &values)
}

pub fn read_maps(path: &Path) -> Result<ParametricMaps> {
    let (h, values) = read_dpt(path)?;
    expect_kind(path, &h, DptKind::Maps)?;
    if h.channels != N_PARAMS {
        return Err(format_err(path, format!("maps need {N_PARAMS} channels, found {}", h.channels)));
    }
    let n = values.len() / N_PARAMS;
    let voxels = (0..n).map(|j| std::array::from_fn(|p| values[p * n + j])).collect();
    ParametricMaps::new(h.width.unwrap_or(0), h.height.unwrap_or(0), voxels)
}

/// One long-format CSV per map (`row,col,<name>`), named `<stem>_<name>.csv`,
/// for the four parameters and `Ki`. Returns the written paths.
pub fn write_map_csvs(dir: &Path, stem: &str, maps: &ParametricMaps) -> Result<Vec<std::path::PathBuf>> {
    let mut planes: Vec<(&str, Vec<f64>)> = PARAM_NAMES.iter().enumerate().map(|(p, &n)| (n, maps.map(p))).collect();
    planes.push(("Ki", ki_map(maps)));
    let mut paths = Vec::new();
    for (name, plane) in planes {
        let path = dir.join(format!("{stem}_{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["row", "col", name])?;
        for (j, v) in plane.iter().enumerate() {
            w.write_record([(j / maps.width()).to_string(), (j % maps.width()).to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Region TACs: one row per frame with timing columns and one column per curve.
pub fn write_tac_csv(path: &Path, schedule: &FrameSchedule, curves: &[(&str, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["frame".to_string(), "start_s".into(), "duration_s".into(), "mid_s".into()];
    head.extend(curves.iter().map(|(n, _)| n.to_string()));
    w.write_record(&head)?;
    let mids = schedule.frame_mid_times();
    for m in 0..schedule.len() {
        let mut rec = vec![
            m.to_string(),
            schedule.starts()[m].to_string(),
            schedule.durations()[m].to_string(),
            mids[m].to_string(),
        ];
        for (name, c) in curves {
            let v = c.get(m).ok_or_else(|| Error::invalid("TAC export", format!("curve '{name}' is too short")))?;
            rec.push(v.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_fit_diagnostics(path: &Path, diag: &FitDiagnostics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["voxel", "iterations", "cost"])?;
    for (j, (it, c)) in diag.iterations.iter().zip(&diag.cost).enumerate() {
        w.write_record([j.to_string(), it.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// 8-bit binary PGM scaled so the frame maximum maps to 255.
pub fn frame_to_pgm(frame: &[f64], width: usize, height: usize) -> Vec<u8> {
    let max = frame.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(frame.iter().take(width * height).map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_keeps_f32_values_and_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dpt");
        let vals: Vec<f64> = (0..12).map(|k| (k as f32 * 0.37) as f64).collect();
        let img = DynamicImage::new(3, 2, 2, vals).unwrap();
        let sched = FrameSchedule::from_durations(0.0, &[10.0, 20.0]).unwrap();
        write_image(&path, &img, Some(&sched)).unwrap();
        let (back, s) = read_image(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(s.unwrap(), sched);
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 12 * 4);
        assert!(std::str::from_utf8(&bytes[..nl]).unwrap().contains("\"kind\":\"image\""));
    }

    #[test]
    fn sinogram_and_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = SinogramSeries::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.5; 6], vec![0.25, 1.5]).unwrap();
        let p = dir.path().join("y.dpt");
        write_sinograms(&p, &data, None).unwrap();
        assert_eq!(read_sinograms(&p).unwrap().0, data);

        let maps = ParametricMaps::filled(2, 2, [0.5, 0.25, 0.125, 1.0]).unwrap();
        let q = dir.path().join("m.dpt");
        write_maps(&q, &maps).unwrap();
        assert_eq!(read_maps(&q).unwrap(), maps);
        assert!(read_image(&q).is_err());
        let files = write_map_csvs(dir.path(), "fit", &maps).unwrap();
        assert_eq!(files.len(), 5);
        let ki = fs::read_to_string(&files[4]).unwrap();
        assert!(ki.starts_with("row,col,Ki\n0,0,"));
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dpt");
        write_image(&p, &DynamicImage::zeros(2, 2, 1), None).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format { .. })));
        fs::write(&p, b"{\"format\":\"nope\"}\n").unwrap();
        assert!(read_image(&p).unwrap_err().is_validation());
    }

    #[test]
    fn pgm_scaling() {
        let pgm = frame_to_pgm(&[0.0, 1.0, 2.0, 4.0], 2, 2);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 64, 128, 255]);
    }
}
