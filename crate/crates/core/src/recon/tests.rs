use super::*;
use crate::domain::FrameSchedule;
use crate::kinetics::InputFunction;
use crate::projector::Geometry2D;
use crate::simulate::{build_phantom, expected_sinograms, simulate_sinograms, synthesize_dynamic_image, RegionParams};

struct Setup {
    a: SystemMatrix,
    model: KineticModel,
    truth: DynamicImage,
    maps: ParametricMaps,
    noisy: SinogramSeries,
    roi: RoiMask,
}

fn setup() -> Setup {
    let geom = Geometry2D {
        width: 16,
        height: 16,
        voxel_size: 2.0,
        n_angles: 24,
        n_radial_bins: 24,
        bin_width: 2.0,
    };
    let a = SystemMatrix::build(&geom).unwrap();
    let schedule = FrameSchedule::from_runs(&[(2, 30.0), (2, 120.0), (2, 600.0)]).unwrap();
    let model = KineticModel::new(&InputFunction::default(), &schedule).unwrap();
    let phantom = build_phantom(16, 16, &RegionParams::default()).unwrap();
    let truth = synthesize_dynamic_image(&phantom, &model);
    let noisy = simulate_sinograms(&truth, &a, &schedule, 2e5, 0.2, 7).unwrap();
    let roi = RoiMask::new(phantom.mask(crate::simulate::Region::GrayMatter)).unwrap();
    Setup {
        a,
        model,
        truth,
        maps: phantom.true_maps(),
        noisy,
        roi,
    }
}

fn problem<'a>(s: &'a Setup, data: &'a SinogramSeries) -> ReconProblem<'a> {
    ReconProblem {
        data,
        system: &s.a,
        model: &s.model,
        width: 16,
        height: 16,
    }
}

fn short(algorithm: Algorithm, beta: f64, cycles: usize) -> ReconConfig {
    ReconConfig {
        algorithm,
        beta,
        n_outer_iters: cycles,
        ..ReconConfig::default()
    }
}

#[test]
fn algorithm_names_round_trip() {
    for a in Algorithm::ALL {
        assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
    }
    assert!("osem".parse::<Algorithm>().is_err());
}

#[test]
fn config_validation() {
    assert!(ReconConfig::default().validate().is_ok());
    assert!(ReconConfig { beta: -1.0, ..ReconConfig::default() }.validate().is_err());
    assert!(ReconConfig { sigma: 0.0, ..ReconConfig::default() }.validate().is_err());
    assert!(ReconConfig { n_inner_image_updates: 0, ..ReconConfig::default() }.validate().is_err());
    assert!(ReconConfig { denominator_floor: 0.0, ..ReconConfig::default() }.validate().is_err());
    let toml = "algorithm = \"icm-em\"\nbeta = 20.0\nbogus = 1\n";
    assert!(toml::from_str::<ReconConfig>(toml).is_err());
}

#[test]
fn initial_image_matches_counts() {
    let s = setup();
    let p = problem(&s, &s.noisy);
    let x0 = initial_image(&p).unwrap();
    for m in 0..p.n_frames() {
        let d = p.frame(m);
        let proj: f64 = s.a.forward(x0.frame(m)).unwrap().iter().sum::<f64>() * d.scale;
        let net = d.counts.iter().sum::<f64>() - d.background.iter().sum::<f64>();
        assert!((proj - net).abs() <= 1e-9 * net, "frame {m}");
    }
}

#[test]
fn mlem_likelihood_monotone_and_nonnegative() {
    let s = setup();
    let p = problem(&s, &s.noisy);
    let out = mlem_reconstruct(&p, &short(Algorithm::Mlem, 0.0, 30), &RunOptions::default()).unwrap();
    for w in out.history.windows(2) {
        assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-9);
    }
    assert!(out.image.values().iter().all(|&v| v >= 0.0));
    assert!(out.maps.is_none());
}

#[test]
fn pgm_pet_beta_zero_is_mlem() {
    let s = setup();
    let p = problem(&s, &s.noisy);
    let cfg = ReconConfig {
        n_inner_image_updates: 2,
        ..short(Algorithm::PgmPet, 0.0, 3)
    };
    let direct = reconstruct(&p, &cfg, &RunOptions::default()).unwrap();
    let plain = mlem_reconstruct(&p, &ReconConfig { n_inner_image_updates: 1, n_outer_iters: 6, ..cfg.clone() }, &RunOptions::default()).unwrap();
    assert!(direct.image.values().iter().zip(plain.image.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(direct.maps.is_some());
    let pgd = pgd_reconstruct(&p, &ReconConfig { n_outer_iters: 6, ..cfg }, &RunOptions::default()).unwrap();
    assert!(pgd.image.values().iter().zip(plain.image.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn pgm_pet_fixed_point() {
    let s = setup();
    let bg: Vec<f64> = vec![0.5; s.noisy.n_bins() * s.noisy.n_frames()];
    let scale = s.model_schedule_durations();
    let mut counts = Vec::new();
    for m in 0..s.truth.n_frames() {
        let ax = s.a.forward(s.truth.frame(m)).unwrap();
        counts.extend(ax.iter().map(|v| scale[m] * v + 0.5));
    }
    let data = SinogramSeries::new(s.noisy.n_bins(), s.noisy.n_frames(), counts, bg, scale).unwrap();
    let p = problem(&s, &data);
    let opts = RunOptions {
        init_image: Some(s.truth.clone()),
        init_maps: Some(s.maps.clone()),
        ..RunOptions::default()
    };
    let mut cfg = short(Algorithm::PgmPet, 100.0, 1);
    cfg.map_prior.gamma = 0.0;
    let out = pgm_pet_reconstruct(&p, &cfg, &opts).unwrap();
    for (a, b) in out.image.values().iter().zip(s.truth.values()) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300), "{a} vs {b}");
    }
    let maps = out.maps.unwrap();
    for (a, b) in maps.values().iter().zip(s.maps.values()) {
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() <= 1e-10 * b[k].abs(), "{a:?} vs {b:?}");
        }
    }
    assert_eq!(out.history[0].floored_fraction, 0.0);
}

#[test]
fn icm_em_stays_on_model_manifold() {
    let s = setup();
    let p = problem(&s, &s.noisy);
    let out = icm_em_reconstruct(&p, &short(Algorithm::IcmEm, 0.0, 2), &RunOptions::default()).unwrap();
    let f = model_image(out.maps.as_ref().unwrap(), &s.model);
    assert_eq!(f.values(), out.image.values());
    assert_eq!(out.history[1].km_residual, Some(0.0));
}

#[test]
fn pgd_and_single_step_icm_do_equal_work() {
    let s = setup();
    let p = problem(&s, &s.noisy);
    let mut cfg = short(Algorithm::PgmPet, 50.0, 2);
    cfg.lm.max_iters = 1;
    let icm = reconstruct(&p, &cfg, &RunOptions::default()).unwrap();
    let pgd = pgd_reconstruct(&p, &cfg, &RunOptions::default()).unwrap();
    for (a, b) in icm.history.iter().zip(&pgd.history) {
        assert_eq!(a.image_updates, b.image_updates);
        assert_eq!(a.lm_iterations, b.lm_iterations);
    }
}

#[test]
fn checkpoints_reference_and_history_csv() {
    let s = setup();
    let p = problem(&s, &s.noisy);
    let opts = RunOptions {
        checkpoints: vec![1, 3, 99],
        reference: Some(Reference { image: &s.truth, roi: &s.roi }),
        ..RunOptions::default()
    };
    let out = map_osl_reconstruct(&p, &short(Algorithm::MapOsl, 0.0, 4), &opts).unwrap();
    assert_eq!(out.snapshots.iter().map(|s| s.iteration).collect::<Vec<_>>(), vec![1, 3]);
    assert!(out.history.iter().all(|h| h.bias_db.is_some() && h.roi_noise.is_some() && h.km_residual.is_none()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history(&path, &out.history).unwrap();
    assert_eq!(read_history(&path).unwrap(), out.history);

    let mut snaps = out.snapshots;
    fit_snapshot_maps(&mut snaps, &s.model, &HuberSpec::default(), 1.0, &ReconConfig::default().lm).unwrap();
    assert!(snaps.iter().all(|s| s.maps.is_some()));
}

#[test]
fn mismatched_problem_rejected() {
    let s = setup();
    let short_data = expected_sinograms(&s.truth, &s.a, &FrameSchedule::from_runs(&[(6, 60.0)]).unwrap(), 1e4, 0.1).unwrap();
    let p = ReconProblem { width: 8, ..problem(&s, &short_data) };
    assert!(reconstruct(&p, &ReconConfig::default(), &RunOptions::default()).is_err());
}

impl Setup {
    fn model_schedule_durations(&self) -> Vec<f64> {
        vec![30.0, 30.0, 120.0, 120.0, 600.0, 600.0]
    }
}
