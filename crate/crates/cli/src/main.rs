//! `leo-ta` command-line driver: each subcommand runs one study and writes
//! its CSV tables plus `manifest.txt` into the output directory.

use std::error::Error;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use leo_ta::harness::config::load_config;
use leo_ta::harness::{
    calibrate, empirical_cdf, run_format_comparison, run_precomp_study, Design, PrecompMode, Runner, ScenarioConfig,
    TrialMetrics,
};
use leo_ta::interference::{
    empirical_partial_pdp, interference_to_peak_ratio, m2_bound, m3_bound, prob_fixed, prob_flexible, WindowSpec,
};
use leo_ta::io::{
    manifest_text, write_cdf_csv, write_comparison_csv, write_detection_csv, write_precomp_csv, write_table,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "leo-ta", version, about = "Timing-advance estimation studies for LEO random access")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (key = value); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Apply one of the preamble designs A..H on top of the config.
    #[arg(long)]
    design: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Detection thresholds from noise-only slots.
    Calibrate(Common),
    /// Pre-compensation error CDFs, with the downlink-copy benchmark.
    Precomp(Common),
    /// One detection scenario, per-UE outcomes.
    Detect(Common),
    /// Designs against each other over an SNR grid.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated design labels.
        #[arg(long, value_delimiter = ',', default_value = "A,B,C,D,E,F,G,H")]
        designs: Vec<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "-6")]
        snr: Vec<f64>,
    },
    /// Interference bounds against empirical partial correlations, and
    /// boundary-event probabilities.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Random instances per window length.
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// SNR sweep of the configured design.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "-16,-12,-8,-4,0")]
        snr: Vec<f64>,
    },
}

fn parse_design(label: &str) -> CliResult<Design> {
    Design::parse(label).ok_or_else(|| format!("unknown design '{label}', expected A..H").into())
}

fn scenario(c: &Common) -> CliResult<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(p) => load_config(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(d) = &c.design {
        cfg = parse_design(d)?.apply(&cfg);
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn finish(dir: &Path, command: &str, cfg: &ScenarioConfig, outputs: &[&str]) -> CliResult<()> {
    fs::write(dir.join("manifest.txt"), manifest_text(command, cfg, outputs))?;
    for o in outputs {
        println!("wrote {}", dir.join(o).display());
    }
    Ok(())
}

fn metrics_row(label: String, snr_db: f64, m: &TrialMetrics) -> Vec<String> {
    vec![
        label,
        snr_db.to_string(),
        m.trials.to_string(),
        m.attempts.to_string(),
        m.misses.to_string(),
        m.missed_detection_rate.to_string(),
        m.kf_error_rate.to_string(),
        m.ki_error_rate.to_string(),
        m.false_alarm_rate.to_string(),
    ]
}

const METRICS_HEADER: [&str; 9] = [
    "label",
    "snr_db",
    "trials",
    "attempts",
    "misses",
    "missed_detection_rate",
    "kf_error_rate",
    "ki_error_rate",
    "false_alarm_rate",
];

fn run_calibrate(c: &Common) -> CliResult<()> {
    let cfg = scenario(c)?;
    fs::create_dir_all(&c.out)?;
    let t = calibrate(&cfg)?;
    let rows = vec![vec![
        cfg.snr_db.to_string(),
        cfg.false_alarm_target.to_string(),
        cfg.calibration_trials.to_string(),
        t.module_one.to_string(),
        t.module_two.to_string(),
    ]];
    write_table(
        create(&c.out, "thresholds.csv")?,
        &["snr_db", "false_alarm_target", "calibration_trials", "module_one", "module_two"],
        &rows,
    )?;
    finish(&c.out, "calibrate", &cfg, &["thresholds.csv"])
}

fn run_precomp(c: &Common) -> CliResult<()> {
    let mut cfg = scenario(c)?;
    if cfg.precomp_mode == PrecompMode::None {
        cfg.precomp_mode = PrecompMode::Solver;
    }
    fs::create_dir_all(&c.out)?;
    let full = run_precomp_study(&cfg)?;
    let copy = run_precomp_study(&ScenarioConfig { precomp_mode: PrecompMode::DownlinkCopy, ..cfg.clone() })?;
    write_precomp_csv(create(&c.out, "precomp_samples.csv")?, &full)?;
    let col = |s: &[leo_ta::harness::PrecompSample], f: fn(&leo_ta::harness::PrecompSample) -> f64| {
        empirical_cdf(&s.iter().map(f).collect::<Vec<_>>())
    };
    write_cdf_csv(
        create(&c.out, "precomp_cdf.csv")?,
        &[
            ("ta_error_s", col(&full, |s| s.ta_error)),
            ("cfo_error_hz", col(&full, |s| s.cfo_error)),
            ("abs_cfo_error_hz", col(&full, |s| s.cfo_error.abs())),
            ("position_error_m", col(&full, |s| s.position_error)),
            ("downlink_copy_cfo_error_hz", col(&copy, |s| s.cfo_error)),
        ],
    )?;
    let share = |p: &dyn Fn(&leo_ta::harness::PrecompSample) -> bool| {
        full.iter().filter(|s| p(s)).count() as f64 / full.len().max(1) as f64
    };
    println!(
        "TA error within 0.1 ms: {:.2}%, |CFO error| < 3.7 kHz: {:.2}%",
        100.0 * share(&|s| s.ta_error.abs() <= 0.1e-3),
        100.0 * share(&|s| s.cfo_error.abs() < 3.7e3)
    );
    finish(&c.out, "precomp", &cfg, &["precomp_samples.csv", "precomp_cdf.csv"])
}

fn run_detect(c: &Common) -> CliResult<()> {
    let cfg = scenario(c)?;
    fs::create_dir_all(&c.out)?;
    let runner = Runner::new(&cfg)?;
    let records = runner.run_range(0, cfg.trials)?;
    let m = TrialMetrics::from_records(&records);
    write_detection_csv(create(&c.out, "detection.csv")?, &records, cfg.numerology.t_s())?;
    let label = c.design.clone().unwrap_or_else(|| "config".into());
    write_table(create(&c.out, "summary.csv")?, &METRICS_HEADER, &[metrics_row(label, cfg.snr_db, &m)])?;
    println!(
        "missed detection {}/{} ({:.2}%), false alarms {}/{}",
        m.misses,
        m.attempts,
        100.0 * m.missed_detection_rate,
        m.false_alarms,
        m.trials
    );
    finish(&c.out, "detect", &cfg, &["detection.csv", "summary.csv"])
}

fn run_compare(c: &Common, designs: &[String], snr: &[f64]) -> CliResult<()> {
    let cfg = scenario(c)?;
    let designs = designs.iter().map(|d| parse_design(d)).collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(&c.out)?;
    let rows = run_format_comparison(&cfg, &designs, snr)?;
    write_comparison_csv(create(&c.out, "comparison.csv")?, &rows)?;
    for r in &rows {
        println!(
            "{} at {} dB: missed {:.2}%, K_f error {:.2}%",
            r.design.label(),
            r.snr_db,
            100.0 * r.metrics.missed_detection_rate,
            100.0 * r.metrics.kf_error_rate
        );
    }
    finish(&c.out, "compare", &cfg, &["comparison.csv"])
}

fn run_bounds(c: &Common, samples: usize) -> CliResult<()> {
    let cfg = scenario(c)?;
    fs::create_dir_all(&c.out)?;
    let n = cfg.numerology.n_zc;
    let k = cfg.format.amplitude_ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let betas: Vec<usize> = std::iter::once(1).chain((50..n).step_by(50)).chain(std::iter::once(n)).collect();
    let mut rows = Vec::new();
    for &beta in &betas {
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let probe = rng.random_range(1..n);
            let ri = loop {
                let r = rng.random_range(1..n);
                if r != probe {
                    break r;
                }
            };
            let alpha = rng.random_range(0..=n - beta);
            let p = empirical_partial_pdp(WindowSpec { alpha, beta }, ri, probe, 1.0, rng.random_range(0..n), n)?;
            worst = worst.max(p.peak_value);
        }
        rows.push(vec![
            beta.to_string(),
            worst.to_string(),
            m2_bound(beta, 1.0, n).to_string(),
            m3_bound(beta, 1.0, 1.0, n).to_string(),
            interference_to_peak_ratio(k, beta, 1.0, 1.0, n).to_string(),
        ]);
    }
    write_table(
        create(&c.out, "bounds.csv")?,
        &["beta", "empirical_max", "m2_bound", "m3_bound", "ratio_bound_k"],
        &rows,
    )?;
    let (g, z) = (cfg.g_l(), cfg.format.z_l);
    let fixed = prob_fixed(g, z, z)?;
    let flexible = prob_flexible(g, z)?;
    let prob_rows: Vec<Vec<String>> =
        (1..=z + g).map(|j| vec![j.to_string(), fixed.at(j).to_string(), flexible.at(j).to_string()]).collect();
    write_table(create(&c.out, "probabilities.csv")?, &["j", "fixed", "flexible"], &prob_rows)?;
    finish(&c.out, "bounds", &cfg, &["bounds.csv", "probabilities.csv"])
}

fn run_montecarlo(c: &Common, snr: &[f64]) -> CliResult<()> {
    let cfg = scenario(c)?;
    fs::create_dir_all(&c.out)?;
    let label = c.design.clone().unwrap_or_else(|| "config".into());
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &snr_db in snr {
        let point = ScenarioConfig { snr_db, ..cfg.clone() };
        let runner = Runner::new(&point)?;
        let m = TrialMetrics::from_records(&runner.run_range(0, point.trials)?);
        println!("{snr_db} dB: missed {:.2}%", 100.0 * m.missed_detection_rate);
        let errs: Vec<f64> = m.ta_errors.iter().map(|e| *e as f64).collect();
        series.push((format!("ta_error_samples_{snr_db}dB"), empirical_cdf(&errs)));
        rows.push(metrics_row(label.clone(), snr_db, &m));
    }
    write_table(create(&c.out, "montecarlo.csv")?, &METRICS_HEADER, &rows)?;
    let named: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
    write_cdf_csv(create(&c.out, "ta_error_cdf.csv")?, &named)?;
    finish(&c.out, "montecarlo", &cfg, &["montecarlo.csv", "ta_error_cdf.csv"])
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calibrate(c) => run_calibrate(c),
        Command::Precomp(c) => run_precomp(c),
        Command::Detect(c) => run_detect(c),
        Command::Compare { common, designs, snr } => run_compare(common, designs, snr),
        Command::Bounds { common, samples } => run_bounds(common, *samples),
        Command::Montecarlo { common, snr } => run_montecarlo(common, snr),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
