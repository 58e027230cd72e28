//! Build the desk system matrix, check the adjoint identity and cache it.

use dynpet::projector::{cache_path, Geometry2D, SystemMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dynpet::error::Result<()> {
    let geom = Geometry2D::default();
    let t = std::time::Instant::now();
    let a = SystemMatrix::build(&geom)?;
    println!(
        "{}x{} matrix, {} nonzeros, built in {:.2?}",
        a.n_rows(),
        a.n_cols(),
        a.nnz(),
        t.elapsed()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..a.n_cols()).map(|_| rng.gen::<f64>()).collect();
    let q: Vec<f64> = (0..a.n_rows()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let lhs: f64 = a.forward(&x)?.iter().zip(&q).map(|(u, v)| u * v).sum();
    let rhs: f64 = x.iter().zip(&a.back(&q)?).map(|(u, v)| u * v).sum();
    println!("<Ax,q> = {lhs:.12e}, <x,A^T q> = {rhs:.12e}, rel diff {:.1e}", (lhs - rhs).abs() / lhs.abs());

    let s = a.sensitivity();
    let in_fov = (0..geom.n_voxels()).filter(|&j| geom.in_fov(j)).count();
    println!("{in_fov} voxels in the field of view, sensitivity range {:.1}..{:.1}",
        s.iter().cloned().fold(f64::INFINITY, f64::min),
        s.iter().cloned().fold(0.0, f64::max));

    let dir = std::env::temp_dir().join("dynpet-example");
    std::fs::create_dir_all(&dir).map_err(|e| dynpet::error::Error::Io { path: dir.clone(), source: e })?;
    let cached = SystemMatrix::load_or_build(&geom, &dir)?;
    println!("cached at {} ({} nonzeros)", cache_path(&geom, &dir).display(), cached.nnz());
    Ok(())
}
