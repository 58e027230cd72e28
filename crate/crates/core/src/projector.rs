//! 2D parallel-beam system matrix and its forward/back projection.
//!
//! Coefficients are exact ray/voxel intersection lengths (mm) found by a
//! Siddon-style traversal of the pixel grid. Attenuation and normalisation
//! factors are taken as 1.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};

/// Image grid and detector sampling for a parallel-beam scanner.
///
/// Voxel `j = row * width + col`, row 0 at the top. Projection angles are
/// `a * pi / n_angles`; at angle 0 rays run along +x and the radial
/// coordinate runs along +y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry2D {
    pub width: usize,
    pub height: usize,
    /// mm
    pub voxel_size: f64,
    pub n_angles: usize,
    pub n_radial_bins: usize,
    /// mm
    pub bin_width: f64,
}

impl Default for Geometry2D {
    fn default() -> Self {
        Geometry2D {
            width: 64,
            height: 64,
            voxel_size: 2.0,
            n_angles: 90,
            n_radial_bins: 96,
            bin_width: 2.0,
        }
    }
}

impl Geometry2D {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("geometry", reason.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image must have at least one voxel");
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return bad("voxel_size must be positive");
        }
        if self.n_angles == 0 || self.n_radial_bins == 0 {
            return bad("need at least one angle and one radial bin");
        }
        if !(self.bin_width > 0.0) || !self.bin_width.is_finite() {
            return bad("bin_width must be positive");
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_bins(&self) -> usize {
        self.n_angles * self.n_radial_bins
    }

    pub fn voxel_center(&self, j: usize) -> (f64, f64) {
        let (row, col) = (j / self.width, j % self.width);
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) * self.voxel_size;
        let y = (self.height as f64 / 2.0 - row as f64 - 0.5) * self.voxel_size;
        (x, y)
    }

    /// Radius of the circle swept by the detector bins, in mm.
    pub fn fov_radius(&self) -> f64 {
        self.n_radial_bins as f64 * self.bin_width / 2.0
    }

    /// Whether voxel `j` lies entirely inside the inscribed field of view:
    /// the largest centred disc contained in both the image and the
    /// detector's radial coverage.
    pub fn in_fov(&self, j: usize) -> bool {
        let (x, y) = self.voxel_center(j);
        let half = self.voxel_size / 2.0;
        let image_r = self.width.min(self.height) as f64 * half;
        let r = image_r.min(self.fov_radius());
        let corner = ((x.abs() + half).powi(2) + (y.abs() + half).powi(2)).sqrt();
        corner <= r
    }

    /// Short stable key used to name cached matrices.
    pub fn hash_key(&self) -> String {
        let json = serde_json::to_string(self).expect("geometry serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Intersections of ray `i` with the pixel grid as `(voxel, length)`,
    /// sorted by voxel.
    fn trace_ray(&self, i: usize) -> Vec<(u32, f64)> {
        let (a, r) = (i / self.n_radial_bins, i % self.n_radial_bins);
        let phi = a as f64 * std::f64::consts::PI / self.n_angles as f64;
        let s = (r as f64 + 0.5 - self.n_radial_bins as f64 / 2.0) * self.bin_width;
        let (sin, cos) = phi.sin_cos();
        let dir = (cos, sin);
        let origin = (-s * sin, s * cos);

        let vs = self.voxel_size;
        let (xmin, xmax) = (-(self.width as f64) * vs / 2.0, self.width as f64 * vs / 2.0);
        let (ymin, ymax) = (-(self.height as f64) * vs / 2.0, self.height as f64 * vs / 2.0);

        // Slab clipping against the image box.
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (o, d, lo, hi) in [(origin.0, dir.0, xmin, xmax), (origin.1, dir.1, ymin, ymax)] {
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return Vec::new();
                }
            } else {
                let (ta, tb) = ((lo - o) / d, (hi - o) / d);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if !(t1 > t0) {
            return Vec::new();
        }

        let mut ts = vec![t0, t1];
        for (o, d, lo, n) in [(origin.0, dir.0, xmin, self.width), (origin.1, dir.1, ymin, self.height)] {
            if d.abs() < 1e-15 {
                continue;
            }
            for k in 0..=n {
                let t = (lo + k as f64 * vs - o) / d;
                if t > t0 && t < t1 {
                    ts.push(t);
                }
            }
        }
        ts.sort_by(|p, q| p.partial_cmp(q).expect("finite"));

        let min_len = 1e-9 * vs;
        let mut hits: Vec<(u32, f64)> = Vec::with_capacity(ts.len());
        for w in ts.windows(2) {
            let len = w[1] - w[0];
            if len <= min_len {
                continue;
            }
            let tm = 0.5 * (w[0] + w[1]);
            let (x, y) = (origin.0 + tm * dir.0, origin.1 + tm * dir.1);
            let col = ((x - xmin) / vs).floor();
            let row = ((ymax - y) / vs).floor();
            if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
                continue;
            }
            let j = row as usize * self.width + col as usize;
            hits.push((j as u32, len));
        }
        hits.sort_by_key(|h| h.0);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(hits.len());
        for (j, len) in hits {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += len,
                _ => merged.push((j, len)),
            }
        }
        merged
    }
}

/// Sparse nonnegative I x J projection operator with its column sums.
///
/// Rows are stored compressed (for forward projection) and a transposed copy
/// is kept for back projection, so each output element of either product is
/// produced by exactly one worker.
#[derive(Clone, Debug)]
pub struct SystemMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    t_values: Vec<f64>,
    sensitivity: Vec<f64>,
}

impl SystemMatrix {
    /// Assemble from per-row `(column, value)` lists (sorted by column).
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let n_rows = rows.len();
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for (i, row) in rows.into_iter().enumerate() {
            let mut prev: Option<u32> = None;
            for (j, v) in row {
                if j as usize >= n_cols {
                    return Err(Error::invalid("system matrix", format!("row {i} references column {j} >= {n_cols}")));
                }
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::invalid("system matrix", format!("entry ({i}, {j}) = {v} is not >= 0")));
                }
                if prev.is_some_and(|p| p >= j) {
                    return Err(Error::invalid("system matrix", format!("row {i} columns are not strictly increasing")));
                }
                prev = Some(j);
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self::finish(n_rows, n_cols, row_ptr, col_idx, values))
    }

    /// Dense row-major matrix, zeros dropped.
    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Result<Self> {
        check_len("dense system matrix", n_rows * n_cols, dense.len())?;
        let rows = (0..n_rows)
            .map(|i| {
                (0..n_cols)
                    .filter(|&j| dense[i * n_cols + j] != 0.0)
                    .map(|j| (j as u32, dense[i * n_cols + j]))
                    .collect()
            })
            .collect();
        SystemMatrix::from_rows(n_cols, rows)
    }

    fn finish(n_rows: usize, n_cols: usize, row_ptr: Vec<usize>, col_idx: Vec<u32>, values: Vec<f64>) -> Self {
        // Transpose by counting sort; within a column, rows stay ascending.
        let mut col_ptr = vec![0usize; n_cols + 1];
        for &j in &col_idx {
            col_ptr[j as usize + 1] += 1;
        }
        for j in 0..n_cols {
            col_ptr[j + 1] += col_ptr[j];
        }
        let mut next = col_ptr.clone();
        let mut row_idx = vec![0u32; values.len()];
        let mut t_values = vec![0.0; values.len()];
        for i in 0..n_rows {
            for k in row_ptr[i]..row_ptr[i + 1] {
                let j = col_idx[k] as usize;
                row_idx[next[j]] = i as u32;
                t_values[next[j]] = values[k];
                next[j] += 1;
            }
        }
        let sensitivity = (0..n_cols)
            .map(|j| t_values[col_ptr[j]..col_ptr[j + 1]].iter().sum())
            .collect();
        SystemMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
            col_ptr,
            row_idx,
            t_values,
            sensitivity,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column sums `s_j = sum_i p_ij`.
    pub fn sensitivity(&self) -> &[f64] {
        &self.sensitivity
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().map(|&j| j as usize).zip(self.values[r].iter().copied())
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_len("forward projection input", self.n_cols, x.len())?;
        check_len("forward projection output", self.n_rows, out.len())?;
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            *o = self.col_idx[r.clone()]
                .iter()
                .zip(&self.values[r])
                .map(|(&j, &p)| p * x[j as usize])
                .sum();
        });
        Ok(())
    }

    pub fn back_into(&self, q: &[f64], out: &mut [f64]) -> Result<()> {
        check_len("back projection input", self.n_rows, q.len())?;
        check_len("back projection output", self.n_cols, out.len())?;
        out.par_iter_mut().enumerate().for_each(|(j, o)| {
            let c = self.col_ptr[j]..self.col_ptr[j + 1];
            *o = self.row_idx[c.clone()]
                .iter()
                .zip(&self.t_values[c])
                .map(|(&i, &p)| p * q[i as usize])
                .sum();
        });
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_rows];
        self.forward_into(x, &mut out)?;
        Ok(out)
    }

    pub fn back(&self, q: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_cols];
        self.back_into(q, &mut out)?;
        Ok(out)
    }

    pub fn build(geom: &Geometry2D) -> Result<Self> {
        geom.validate()?;
        let rows: Vec<Vec<(u32, f64)>> = (0..geom.n_bins()).into_par_iter().map(|i| geom.trace_ray(i)).collect();
        SystemMatrix::from_rows(geom.n_voxels(), rows)
    }

    /// Write the `.sysm` cache format: one JSON header line, then `row_ptr`
    /// as u64, `col_idx` as u32 and `values` as f64, all little-endian.
    pub fn save(&self, geom: &Geometry2D, path: &Path) -> Result<()> {
        let header = SysmHeader {
            format: "sysm".into(),
            version: 1,
            geometry: geom.clone(),
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            nnz: self.nnz(),
        };
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for &p in &self.row_ptr {
            w.write_all(&(p as u64).to_le_bytes()).map_err(io)?;
        }
        for &j in &self.col_idx {
            w.write_all(&j.to_le_bytes()).map_err(io)?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Read a `.sysm` file, returning the geometry recorded in its header.
    pub fn load(path: &Path) -> Result<(Geometry2D, Self)> {
        let io = |e| Error::io(path, e);
        let fmt = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        let header: SysmHeader = serde_json::from_str(line.trim_end()).map_err(|e| fmt(e.to_string()))?;
        if header.format != "sysm" || header.version != 1 {
            return Err(fmt(format!("unsupported header {}/{}", header.format, header.version)));
        }
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(io)?;
        let need = (header.n_rows + 1) * 8 + header.nnz * 12;
        if buf.len() != need {
            return Err(fmt(format!("payload is {} bytes, expected {need}", buf.len())));
        }
        let (ptr_bytes, rest) = buf.split_at((header.n_rows + 1) * 8);
        let (idx_bytes, val_bytes) = rest.split_at(header.nnz * 4);
        let row_ptr: Vec<usize> = ptr_bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let col_idx: Vec<u32> = idx_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let values: Vec<f64> = val_bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if row_ptr.first() != Some(&0)
            || row_ptr.last() != Some(&header.nnz)
            || row_ptr.windows(2).any(|w| w[1] < w[0])
            || col_idx.iter().any(|&j| j as usize >= header.n_cols)
        {
            return Err(fmt("corrupt CSR arrays".into()));
        }
        let m = SystemMatrix::finish(header.n_rows, header.n_cols, row_ptr, col_idx, values);
        Ok((header.geometry, m))
    }

    /// Load `<dir>/system-<hash>.sysm` if present and matching, otherwise
    /// build it and write the cache.
    pub fn load_or_build(geom: &Geometry2D, dir: &Path) -> Result<Self> {
        let path = cache_path(geom, dir);
        if path.exists() {
            if let Ok((g, m)) = SystemMatrix::load(&path) {
                if &g == geom {
                    return Ok(m);
                }
            }
        }
        let m = SystemMatrix::build(geom)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        m.save(geom, &path)?;
        Ok(m)
    }
}

pub fn cache_path(geom: &Geometry2D, dir: &Path) -> PathBuf {
    dir.join(format!("system-{}.sysm", geom.hash_key()))
}

#[derive(Serialize, Deserialize)]
struct SysmHeader {
    format: String,
    version: u32,
    geometry: Geometry2D,
    n_rows: usize,
    n_cols: usize,
    nnz: usize,
}

pub fn build_system_matrix(geom: &Geometry2D) -> Result<SystemMatrix> {
    SystemMatrix::build(geom)
}

pub fn forward_project(a: &SystemMatrix, image_frame: &[f64]) -> Result<Vec<f64>> {
    a.forward(image_frame)
}

pub fn back_project(a: &SystemMatrix, sino_frame: &[f64]) -> Result<Vec<f64>> {
    a.back(sino_frame)
}
