use std::fs;
use std::path::{Path, PathBuf};

use dynpet::cli::{run, Manifest, MANIFEST_NAME};

const SMALL: &str = r#"
checkpoints = [10, 50, 100]

[geometry]
width = 16
height = 16
voxel_size = 8.0
n_angles = 24
n_radial_bins = 24
bin_width = 8.0

[schedule]
runs = [[4, 30.0], [2, 120.0], [2, 600.0]]

[simulation]
target_counts = 2e5
seed = 5

[recon]
n_outer_iters = 100
beta = 20.0
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    let text = format!("out_dir = {:?}\n{SMALL}{extra}", out.display().to_string());
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn dynpet(args: &[&str]) -> i32 {
    run(std::iter::once("dynpet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_artifacts_deterministically() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("out");
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg)]), 0);
    for name in ["truth.dpt", "sinograms.dpt", "phantom.pgm", "tacs.csv", "truth_maps.dpt", MANIFEST_NAME] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let first = fs::read(out.join("sinograms.dpt")).unwrap();
    let other = dir.path().join("again");
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg), "--out", s(&other)]), 0);
    assert_eq!(first, fs::read(other.join("sinograms.dpt")).unwrap());

    let reseeded = dir.path().join("seed6");
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg), "--out", s(&reseeded), "--seed", "6"]), 0);
    assert_ne!(first, fs::read(reseeded.join("sinograms.dpt")).unwrap());

    let pgm = fs::read(out.join("phantom.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
}

#[test]
fn simulate_without_seed_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[simulation]\ntarget_counts = 1e6\n").unwrap();
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg)]), 1);
    fs::write(&cfg, "[recon]\nbetta = 3.0\n").unwrap();
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg)]), 1);
}

#[test]
fn recon_checkpoints_history_and_manifest_rerun() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("out");
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg)]), 0);
    assert_eq!(dynpet(&["recon", "--config", s(&cfg), "--algorithm", "pgm-pet", "--threads", "1"]), 0);
    let run_dir = out.join("pgm-pet-beta20");
    for it in ["010", "050", "100"] {
        assert!(run_dir.join(format!("image_iter{it}.dpt")).is_file());
        assert!(run_dir.join(format!("maps_iter{it}.dpt")).is_file());
    }
    let snaps = fs::read_dir(&run_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("image_iter"))
        .count();
    assert_eq!(snaps, 3);
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 101);
    for p in ["K1", "k2", "k3", "fv", "Ki"] {
        assert!(run_dir.join(format!("maps_final_{p}.csv")).is_file(), "{p}");
    }

    // A manifest is a valid config and reproduces the run byte for byte.
    let manifest = Manifest::read(&run_dir).unwrap();
    assert_eq!(manifest.command, "recon");
    let rerun = dir.path().join("rerun");
    let manifest_path = run_dir.join(MANIFEST_NAME);
    assert_eq!(dynpet(&["recon", "--config", s(&manifest_path), "--out", s(&rerun)]), 0);
    assert_eq!(
        fs::read(run_dir.join("image_final.dpt")).unwrap(),
        fs::read(rerun.join("pgm-pet-beta20").join("image_final.dpt")).unwrap()
    );

    assert_eq!(dynpet(&["fit", "--config", s(&cfg), "--gamma", "0"]), 0);
    assert!(out.join("fit").join("maps.dpt").is_file());
    assert_eq!(dynpet(&["metrics", "--config", s(&cfg)]), 0);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1);
}

#[test]
fn beta_zero_pgm_pet_files_match_mlem() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("out");
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg)]), 0);
    let common = ["--config", s(&cfg), "--beta", "0", "--checkpoints", "10"];
    assert_eq!(dynpet(&[&["recon", "--algorithm", "pgm-pet"][..], &common].concat()), 0);
    assert_eq!(dynpet(&[&["recon", "--algorithm", "mlem"][..], &common].concat()), 0);
    for name in ["image_final.dpt", "image_iter010.dpt"] {
        let a = fs::read(out.join("pgm-pet-beta0").join(name)).unwrap();
        let b = fs::read(out.join("mlem-beta0").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn fit_rejects_schedule_mismatch() {
    let (dir, cfg) = setup("");
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg)]), 0);
    let truth = dir.path().join("out").join("truth.dpt");
    let other = dir.path().join("other.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("[[4, 30.0], [2, 120.0], [2, 600.0]]", "[[3, 30.0], [2, 120.0], [2, 600.0]]");
    fs::write(&other, text).unwrap();
    assert_eq!(dynpet(&["fit", "--config", s(&other), "--image", s(&truth)]), 1);
    assert_eq!(dynpet(&["fit", "--config", s(&cfg), "--image", s(&dir.path().join("missing.dpt"))]), 2);
}

#[test]
fn sweep_beta_validates_list_and_writes_tradeoff() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("out");
    assert_eq!(dynpet(&["simulate", "--config", s(&cfg)]), 0);
    assert_eq!(dynpet(&["sweep-beta", "--config", s(&cfg), "--beta", "20,50,20"]), 1);
    assert_eq!(dynpet(&["sweep-beta", "--config", s(&cfg), "--beta=-1"]), 1);
    assert_eq!(dynpet(&["sweep-beta", "--config", s(&cfg), "--beta", "20,250", "--checkpoints", "5,10"]), 0);
    let table = fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.contains("beta") && header.contains("iteration"), "{header}");
    // 2 betas x 2 checkpoints, each with 8 frame rows, a volume row and 5 map rows.
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 14);
}
