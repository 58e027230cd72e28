//! End-to-end run through the command-line layer with a TOML config:
//! simulate, reconstruct two ways, fit, and score.

use dynpet::cli;

const CONFIG: &str = r#"
checkpoints = [5, 15]

[geometry]
width = 24
height = 24
n_angles = 36
n_radial_bins = 36

[simulation]
target_counts = 1e6
seed = 7

[recon]
n_outer_iters = 15
"#;

fn main() {
    let dir = std::env::temp_dir().join("dynpet-cli-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let config = dir.join("run.toml");
    std::fs::write(&config, CONFIG).expect("write config");
    let out = dir.join("out");
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());

    let steps: [&[&str]; 5] = [
        &["simulate", "--config", c, "--out", o],
        &["recon", "--config", c, "--out", o, "--algorithm", "mlem"],
        &["recon", "--config", c, "--out", o, "--algorithm", "pgm-pet", "--beta", "250"],
        &["fit", "--config", c, "--out", o],
        &["metrics", "--config", c, "--out", o],
    ];
    for args in steps {
        let code = cli::run(std::iter::once("dynpet").chain(args.iter().copied()));
        println!("dynpet {} -> exit {code}", args[0]);
        if code != 0 {
            std::process::exit(code);
        }
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).expect("metrics written");
    for line in metrics.lines().filter(|l| l.contains(",volume,") || l.starts_with("algorithm")) {
        println!("{line}");
    }
}
