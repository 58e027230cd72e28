//! Command-line front end: `simulate`, `recon`, `fit`, `sweep-beta` and
//! `metrics`. Every command writes a `run-manifest.json` next to its outputs.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::domain::{DynamicImage, FrameSchedule, ParametricMaps};
use crate::error::{Error, Result};
use crate::fitting::{map_lm_fit, HuberSpec, LMOptions};
use crate::io;
use crate::kinetics::KineticModel;
use crate::metrics::{tradeoff_table, write_rows, GroundTruth, RoiMask, RunRecord, Snapshot};
use crate::projector::SystemMatrix;
use crate::recon::{self, Algorithm, ReconOutput, ReconProblem, Reference, RunOptions};
use crate::simulate::{build_phantom, simulate_sinograms, synthesize_dynamic_image, Phantom, Region};

pub const MANIFEST_NAME: &str = "run-manifest.json";

#[derive(Parser, Debug)]
#[command(name = "dynpet", version, about = "Dynamic PET simulation, reconstruction and kinetic mapping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config, or a run-manifest.json from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the phantom and write ground truth and noisy sinograms.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct the sinograms with one algorithm.
    Recon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        /// Comma-separated cycle numbers.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
    },
    /// Fit kinetic maps to a reconstructed (or true) dynamic image.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dynamic image to fit (default: the ground truth in the output directory).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Map-prior weight; 0 gives independent voxel fits.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Run PGM-PET for each beta and merge the results into tradeoff.csv.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        /// Comma-separated beta values.
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
    },
    /// Score every reconstruction under the output directory into metrics.csv.
    Metrics {
        #[command(flatten)]
        common: Common,
    },
}

/// Contents of `run-manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            algorithm: None,
            beta: None,
            config: config.clone(),
            outputs: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Everything derived from a config that commands share.
pub struct Workspace {
    pub config: RunConfig,
    pub schedule: FrameSchedule,
    pub model: KineticModel,
    pub phantom: Phantom,
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let model = KineticModel::new(&config.input, &schedule)?;
        let phantom = build_phantom(config.geometry.width, config.geometry.height, &config.phantom)?;
        Ok(Workspace {
            config,
            schedule,
            model,
            phantom,
        })
    }

    pub fn system_matrix(&self) -> Result<SystemMatrix> {
        let dir = self.config.matrix_dir();
        create_dir(dir)?;
        SystemMatrix::load_or_build(&self.config.geometry, dir)
    }

    /// Gray-matter ROI eroded by one voxel.
    pub fn roi(&self) -> Result<RoiMask> {
        RoiMask::new(self.phantom.eroded_mask(Region::GrayMatter))
    }

    fn check_schedule(&self, other: Option<&FrameSchedule>, n_frames: usize, what: &Path) -> Result<()> {
        let mismatch = |detail: String| Error::invalid("schedule", format!("{} does not match the config: {detail}", what.display()));
        if n_frames != self.schedule.len() {
            return Err(mismatch(format!("{n_frames} frames vs {}", self.schedule.len())));
        }
        match other {
            Some(s) if s != &self.schedule => Err(mismatch("frame timing differs".into())),
            _ => Ok(()),
        }
    }

    fn load_truth(&self) -> Result<Option<DynamicImage>> {
        let path = self.config.truth_path();
        if !path.exists() {
            return Ok(None);
        }
        let (img, sched) = io::read_image(&path)?;
        self.check_schedule(sched.as_ref(), img.n_frames(), &path)?;
        Ok(Some(img))
    }
}

/// Write truth, sinograms, phantom preview, region TACs and the manifest.
pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let ws = Workspace::new(config.clone())?;
    let sim = config
        .simulation
        .clone()
        .ok_or_else(|| Error::invalid("simulation", "the config has no [simulation] section"))?;
    let out = &config.out_dir;
    create_dir(out)?;
    let a = ws.system_matrix()?;
    let truth = synthesize_dynamic_image(&ws.phantom, &ws.model);
    let data = simulate_sinograms(&truth, &a, &ws.schedule, sim.target_counts, sim.background_fraction, sim.seed)?;

    let truth_path = out.join("truth.dpt");
    io::write_image(&truth_path, &truth, Some(&ws.schedule))?;
    let sino_path = out.join("sinograms.dpt");
    io::write_sinograms(&sino_path, &data, Some(&ws.schedule))?;
    let pgm_path = out.join("phantom.pgm");
    io::write_bytes(&pgm_path, &ws.phantom.to_pgm())?;
    let tac_path = out.join("tacs.csv");
    let curves: Vec<(&str, Vec<f64>)> = Region::TISSUES
        .iter()
        .map(|&r| (r.name(), ws.model.frame_values(&ws.phantom.params(r))))
        .collect();
    io::write_tac_csv(&tac_path, &ws.schedule, &curves)?;
    let maps_path = out.join("truth_maps.dpt");
    io::write_maps(&maps_path, &ws.phantom.true_maps())?;

    let files = vec![truth_path, sino_path, pgm_path, tac_path, maps_path];
    let mut manifest = Manifest::new("simulate", config);
    manifest.outputs = files.iter().map(|p| file_name(p)).collect();
    manifest.extra = serde_json::json!({ "total_counts": data.total_counts() });
    let mut all = files;
    all.push(manifest.write(out)?);
    Ok(all)
}

/// Name of the directory a recon run writes into.
fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn run_dir_name(algorithm: Algorithm, beta: f64) -> String {
    format!("{}-beta{}", algorithm.name(), beta)
}

/// Result of one reconstruction run on disk.
pub struct ReconRun {
    pub dir: PathBuf,
    pub output: ReconOutput,
}

/// Reconstruct with `config.recon`, writing snapshots, final image, maps,
/// `history.csv` and the manifest into `<out_dir>/<algorithm>-beta<beta>/`.
pub fn cmd_recon(config: &RunConfig) -> Result<ReconRun> {
    let ws = Workspace::new(config.clone())?;
    let sino_path = config.sinogram_path();
    let (data, sched) = io::read_sinograms(&sino_path)?;
    ws.check_schedule(sched.as_ref(), data.n_frames(), &sino_path)?;
    let a = ws.system_matrix()?;
    let truth = ws.load_truth()?;
    let roi = ws.roi()?;
    let g = &config.geometry;
    let problem = ReconProblem {
        data: &data,
        system: &a,
        model: &ws.model,
        width: g.width,
        height: g.height,
    };
    let opts = RunOptions {
        checkpoints: config.checkpoints.clone(),
        reference: truth.as_ref().map(|image| Reference { image, roi: &roi }),
        ..RunOptions::default()
    };
    let output = recon::reconstruct(&problem, &config.recon, &opts)?;

    let alg = config.recon.algorithm;
    let dir = config.out_dir.join(run_dir_name(alg, config.recon.beta));
    create_dir(&dir)?;
    let mut files = Vec::new();
    for snap in &output.snapshots {
        let p = dir.join(format!("image_iter{:03}.dpt", snap.iteration));
        io::write_image(&p, &snap.image, Some(&ws.schedule))?;
        files.push(p);
        if let Some(m) = &snap.maps {
            let p = dir.join(format!("maps_iter{:03}.dpt", snap.iteration));
            io::write_maps(&p, m)?;
            files.push(p);
        }
    }
    let p = dir.join("image_final.dpt");
    io::write_image(&p, &output.image, Some(&ws.schedule))?;
    files.push(p);
    if let Some(m) = &output.maps {
        let p = dir.join("maps_final.dpt");
        io::write_maps(&p, m)?;
        files.push(p);
        files.extend(io::write_map_csvs(&dir, "maps_final", m)?);
    }
    let p = dir.join("history.csv");
    recon::write_history(&p, &output.history)?;
    files.push(p);

    let mut recorded = config.clone();
    recorded.inputs.sinograms = Some(absolute(&sino_path));
    if truth.is_some() {
        recorded.inputs.truth = Some(absolute(&config.truth_path()));
    }
    let mut manifest = Manifest::new("recon", &recorded);
    manifest.algorithm = Some(alg);
    manifest.beta = Some(config.recon.beta);
    manifest.outputs = files.iter().map(|p| file_name(p)).collect();
    manifest.write(&dir)?;
    Ok(ReconRun { dir, output })
}

/// Options used for stand-alone (indirect) map fitting.
pub fn indirect_fit_options(config: &RunConfig) -> LMOptions {
    LMOptions {
        bounds: config.recon.lm.bounds,
        ..LMOptions::default()
    }
}

/// Fit maps to a dynamic image; writes `maps.dpt` and five map CSVs into
/// `<out_dir>/fit/`.
pub fn cmd_fit(config: &RunConfig, image_path: &Path, gamma: Option<f64>) -> Result<(PathBuf, ParametricMaps)> {
    let ws = Workspace::new(config.clone())?;
    let (image, sched) = io::read_image(image_path)?;
    ws.check_schedule(sched.as_ref(), image.n_frames(), image_path)?;
    let prior = HuberSpec {
        gamma: gamma.unwrap_or(config.recon.map_prior.gamma),
        ..config.recon.map_prior
    };
    let opts = indirect_fit_options(config);
    let init = ParametricMaps::filled(image.width(), image.height(), opts.bounds.center())?;
    let (maps, diag) = map_lm_fit(&init, &image, &ws.model, &prior, config.recon.sigma, &opts)?;
    let dir = config.out_dir.join("fit");
    create_dir(&dir)?;
    let mut files = vec![dir.join("maps.dpt")];
    io::write_maps(&files[0], &maps)?;
    files.extend(io::write_map_csvs(&dir, "map", &maps)?);
    if config.verbose {
        let p = dir.join("fit_diagnostics.csv");
        io::write_fit_diagnostics(&p, &diag)?;
        files.push(p);
    }
    let mut manifest = Manifest::new("fit", config);
    manifest.outputs = files.iter().map(|p| file_name(p)).collect();
    manifest.extra = serde_json::json!({ "image": image_path });
    manifest.write(&dir)?;
    Ok((dir, maps))
}

fn check_betas(betas: &[f64]) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::invalid("beta list", "is empty"));
    }
    for (i, b) in betas.iter().enumerate() {
        if !(*b >= 0.0 && b.is_finite()) {
            return Err(Error::invalid("beta list", format!("{b} must be >= 0")));
        }
        if betas[..i].contains(b) {
            return Err(Error::invalid("beta list", format!("duplicate value {b}")));
        }
    }
    Ok(())
}

fn ground_truth_parts(ws: &Workspace) -> Result<(DynamicImage, ParametricMaps, RoiMask, Vec<bool>)> {
    let truth = ws.load_truth()?.ok_or_else(|| {
        Error::invalid("ground truth", format!("{} not found; run simulate first", ws.config.truth_path().display()))
    })?;
    Ok((truth, ws.phantom.true_maps(), ws.roi()?, ws.phantom.tissue_mask()))
}

/// PGM-PET once per beta; merged trade-off rows go to `tradeoff.csv`.
pub fn cmd_sweep_beta(config: &RunConfig, betas: &[f64]) -> Result<PathBuf> {
    check_betas(betas)?;
    let ws = Workspace::new(config.clone())?;
    let (truth, maps, roi, tissue) = ground_truth_parts(&ws)?;
    let mut runs = Vec::new();
    for &beta in betas {
        let mut cfg = config.clone();
        cfg.recon.algorithm = Algorithm::PgmPet;
        cfg.recon.beta = beta;
        let run = cmd_recon(&cfg)?;
        runs.push(RunRecord {
            algorithm: Algorithm::PgmPet.name().into(),
            beta,
            snapshots: run.output.snapshots,
        });
    }
    let gt = GroundTruth {
        image: &truth,
        maps: &maps,
        roi: &roi,
        tissue: &tissue,
    };
    let rows = tradeoff_table(&runs, &gt)?;
    let path = config.out_dir.join("tradeoff.csv");
    write_rows(&path, &rows)?;
    let mut manifest = Manifest::new("sweep-beta", config);
    manifest.outputs = vec![file_name(&path)];
    manifest.extra = serde_json::json!({ "betas": betas });
    let dir = config.out_dir.join("sweep");
    create_dir(&dir)?;
    manifest.write(&dir)?;
    Ok(path)
}

fn load_snapshots(dir: &Path, schedule_check: &Workspace) -> Result<Vec<Snapshot>> {
    let mut snaps = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        let name = file_name(&p);
        let Some(it) = name.strip_prefix("image_iter").and_then(|s| s.strip_suffix(".dpt")) else {
            continue;
        };
        let iteration: usize = it.parse().map_err(|_| Error::Format {
            path: p.clone(),
            message: "bad snapshot name".into(),
        })?;
        let (image, sched) = io::read_image(&p)?;
        schedule_check.check_schedule(sched.as_ref(), image.n_frames(), &p)?;
        let maps_path = dir.join(format!("maps_iter{it}.dpt"));
        let maps = if maps_path.exists() { Some(io::read_maps(&maps_path)?) } else { None };
        snaps.push(Snapshot { iteration, image, maps });
    }
    snaps.sort_by_key(|s| s.iteration);
    Ok(snaps)
}

/// Score all recon runs found under the output directory into `metrics.csv`.
/// Snapshots without maps are fitted indirectly first.
pub fn cmd_metrics(config: &RunConfig) -> Result<PathBuf> {
    let ws = Workspace::new(config.clone())?;
    let (truth, maps, roi, tissue) = ground_truth_parts(&ws)?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&config.out_dir)
        .map_err(|e| Error::io(&config.out_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).exists())
        .collect();
    dirs.sort();
    let mut runs = Vec::new();
    for dir in dirs {
        let manifest = Manifest::read(&dir)?;
        let (Some(alg), Some(beta)) = (manifest.algorithm, manifest.beta) else {
            continue;
        };
        let mut snapshots = load_snapshots(&dir, &ws)?;
        recon::fit_snapshot_maps(
            &mut snapshots,
            &ws.model,
            &config.recon.map_prior,
            config.recon.sigma,
            &indirect_fit_options(config),
        )?;
        runs.push(RunRecord {
            algorithm: alg.name().into(),
            beta,
            snapshots,
        });
    }
    if runs.is_empty() {
        return Err(Error::invalid("metrics", format!("no recon runs under {}", config.out_dir.display())));
    }
    let gt = GroundTruth {
        image: &truth,
        maps: &maps,
        roi: &roi,
        tissue: &tissue,
    };
    let rows = tradeoff_table(&runs, &gt)?;
    let path = config.out_dir.join("metrics.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::invalid("--threads", "must be >= 1"));
        }
        // Fails only if the global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

/// Execute a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, seed } => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = seed {
                match cfg.simulation.as_mut() {
                    Some(sim) => sim.seed = seed,
                    None => return Err(Error::invalid("simulation", "the config has no [simulation] section")),
                }
            }
            for p in cmd_simulate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Recon {
            common,
            algorithm,
            beta,
            checkpoints,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(a) = algorithm {
                cfg.recon.algorithm = a.parse()?;
            }
            if let Some(b) = beta {
                cfg.recon.beta = b;
            }
            if let Some(c) = checkpoints {
                cfg.checkpoints = c;
            }
            cfg.validate()?;
            let run = cmd_recon(&cfg)?;
            println!("{}", run.dir.display());
        }
        Command::Fit { common, image, gamma } => {
            let cfg = resolve(&common)?;
            let image = image
                .or_else(|| cfg.inputs.image.clone())
                .unwrap_or_else(|| cfg.truth_path());
            let (dir, _) = cmd_fit(&cfg, &image, gamma)?;
            println!("{}", dir.display());
        }
        Command::SweepBeta {
            common,
            beta,
            checkpoints,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(c) = checkpoints {
                cfg.checkpoints = c;
            }
            let betas = beta.unwrap_or_else(|| cfg.betas.clone());
            println!("{}", cmd_sweep_beta(&cfg, &betas)?.display());
        }
        Command::Metrics { common } => {
            let cfg = resolve(&common)?;
            println!("{}", cmd_metrics(&cfg)?.display());
        }
    }
    Ok(())
}

/// Parse arguments, run, report errors on stderr and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_lists_validated() {
        assert!(check_betas(&[]).is_err());
        assert!(check_betas(&[20.0, 50.0, 20.0]).is_err());
        assert!(check_betas(&[-1.0]).is_err());
        check_betas(&[20.0, 50.0, 100.0, 150.0, 200.0, 250.0]).unwrap();
    }

    #[test]
    fn parse_errors_are_validation_exits() {
        assert_eq!(run(["dynpet", "frobnicate"]), 1);
        assert_eq!(run(["dynpet", "recon"]), 1);
        assert_eq!(run(["dynpet", "--help"]), 0);
        assert_eq!(run(["dynpet", "recon", "--config", "/nonexistent/c.toml"]), 2);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "dynpet", "recon", "--config", "c.toml", "--algorithm", "icm-em", "--beta", "20", "--checkpoints", "10,50,100", "--threads", "2",
        ])
        .unwrap();
        match cli.command {
            Command::Recon { checkpoints, beta, .. } => {
                assert_eq!(checkpoints.unwrap(), vec![10, 50, 100]);
                assert_eq!(beta, Some(20.0));
            }
            _ => panic!("wrong subcommand"),
        }
        let cli = Cli::try_parse_from(["dynpet", "sweep-beta", "--config", "c.toml", "--beta", "20,250"]).unwrap();
        assert!(matches!(cli.command, Command::SweepBeta { beta: Some(ref b), .. } if b == &vec![20.0, 250.0]));
    }
}
