//! Monte Carlo driver: scenario configuration, end-to-end trials, metrics.
//!
//! Every trial draws from ChaCha8 streams keyed by (seed, trial, lane), so a
//! trial's outcome does not depend on which other trials run or in what
//! order. Lane 0 carries root draws, lanes 1..=U the per-UE channel draws,
//! `B_LANE | ue` the flexible b_u draws, [`NOISE_LANE`] the receiver noise
//! and [`FA_LANE`] the noise-only false-alarm slot.

pub mod config;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::detector::{
    calibrate_ki_threshold, calibrate_threshold, DetectionResult, Detector, DetectorConfig, DetectorError,
    SubsequenceSearch, CP_SAMPLES,
};
use crate::geometry::{
    generate_constellation, propagation_ta, visible_satellites, ConstellationConfig, GeometryError, UePosition,
};
use crate::precomp::{
    precompensate, select_measurement_triple, synthesize_measurements, EstimateVector, Initialization, PrecompError,
    SolverConfig,
};
use crate::waveform::{
    add_noise, cfo_phasor, symbol_sequence, FormatOption, Modem, Numerology, PreambleFormat, SymbolKind,
    TimeDomainSignal, WaveformError,
};

pub use config::{emit_config, load_config, parse_config, ConfigError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Precomp(#[from] PrecompError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecompMode {
    None,
    /// Uplink pre-compensated with the measured downlink CFO, no TA.
    DownlinkCopy,
    Solver,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UplinkCfo {
    /// Same residual CFO (Hz) for every UE.
    Fixed(f64),
    /// Per-UE residual drawn from a pre-compensation run.
    FromPrecomp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cascading {
    /// Every UE uses `format.b_u`.
    Fixed,
    /// b_u uniform per UE over [`ScenarioConfig::b_range`].
    Flexible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSetting {
    /// Calibrated from noise-only slots at the false-alarm target.
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub constellation: ConstellationConfig,
    pub numerology: Numerology,
    pub format: PreambleFormat,
    pub cascading: Cascading,
    pub ue_count: usize,
    /// Per-sample power of the unit-amplitude ZC symbols over the noise.
    pub snr_db: f64,
    /// Arrival offsets are uniform on [0, max_arrival_spread] seconds.
    pub max_arrival_spread: f64,
    pub uplink_cfo: UplinkCfo,
    /// Admissible elevation of the serving satellite, rad.
    pub elevation_range: (f64, f64),
    /// f_lo as a fraction of the carrier.
    pub lo_offset_fraction_range: (f64, f64),
    /// Downlink CFO measurement errors are uniform on ±this, Hz.
    pub dl_measurement_error: f64,
    /// Radius of the beam whose centre seeds the position fit, m.
    pub beam_radius: f64,
    pub trials: usize,
    pub seed: u64,
    pub precomp_mode: PrecompMode,
    pub search: SubsequenceSearch,
    pub false_alarm_target: f64,
    pub calibration_trials: usize,
    pub threshold: ThresholdSetting,
    pub ki_threshold: ThresholdSetting,
    pub max_candidates: usize,
}

impl Default for ScenarioConfig {
    /// Proposed format (design H) at the headline operating point.
    fn default() -> Self {
        Design::H.apply(&Self::baseline())
    }
}

impl ScenarioConfig {
    /// Shared settings of the format studies before a design is applied.
    pub fn baseline() -> Self {
        Self {
            constellation: ConstellationConfig::default(),
            numerology: Numerology::default(),
            format: PreambleFormat::default(),
            cascading: Cascading::Fixed,
            ue_count: 64,
            snr_db: -6.0,
            max_arrival_spread: 0.2e-3,
            uplink_cfo: UplinkCfo::Fixed(3000.0),
            elevation_range: (20f64.to_radians(), 70f64.to_radians()),
            lo_offset_fraction_range: (0.0, 5e-7),
            dl_measurement_error: 1200.0,
            beam_radius: 85_000.0,
            trials: 500,
            seed: 1,
            precomp_mode: PrecompMode::None,
            search: SubsequenceSearch::Window,
            false_alarm_target: 0.01,
            calibration_trials: 2000,
            threshold: ThresholdSetting::Auto,
            ki_threshold: ThresholdSetting::Auto,
            max_candidates: 256,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        self.constellation.validate()?;
        self.numerology.validate()?;
        self.format.validate(&self.numerology)?;
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.ue_count == 0 {
            return bad("ue_count must be at least 1");
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite");
        }
        if !(self.max_arrival_spread >= 0.0) || self.max_arrival_spread > self.format.t_gt {
            return bad("max_arrival_spread must lie in [0, t_gt]");
        }
        let (lo, hi) = self.elevation_range;
        if !(0.0 <= lo && lo < hi && hi <= std::f64::consts::FRAC_PI_2) {
            return bad("elevation range must satisfy 0 <= min < max <= 90 deg");
        }
        let (a, b) = self.lo_offset_fraction_range;
        if !(0.0 <= a && a <= b) {
            return bad("lo offset range must satisfy 0 <= min <= max");
        }
        if !(self.dl_measurement_error >= 0.0) || !(self.beam_radius >= 0.0) {
            return bad("measurement error and beam radius must be non-negative");
        }
        if let UplinkCfo::Fixed(f) = self.uplink_cfo {
            if !f.is_finite() {
                return bad("uplink cfo must be finite");
            }
        }
        if self.uplink_cfo == UplinkCfo::FromPrecomp && self.precomp_mode == PrecompMode::None {
            return bad("uplink_cfo = from-precomp needs a precomp mode");
        }
        if !(self.false_alarm_target > 0.0 && self.false_alarm_target <= 1.0) {
            return bad("false alarm target must lie in (0, 1]");
        }
        if self.calibration_trials == 0 || self.max_candidates == 0 {
            return bad("calibration_trials and max_candidates must be at least 1");
        }
        let (b_lo, b_hi) = self.b_range();
        if b_lo > b_hi {
            return bad("empty b_u range");
        }
        let pool = self.numerology.n_zc - 2;
        let needed = match self.format.option {
            FormatOption::Opt2 => 0,
            _ => self.ue_count,
        };
        if needed > pool || (self.format.option == FormatOption::Opt2 && self.ue_count > 511) {
            return bad("more UEs than distinct root pairs or scrambling seeds");
        }
        Ok(())
    }

    /// G_l = ⌈max_arrival_spread / t_zc⌉ (at least 1).
    pub fn g_l(&self) -> usize {
        self.numerology.symbols_ceil(self.max_arrival_spread).max(1)
    }

    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }

    /// Admissible b_u: the configured value when fixed, otherwise [1, z_l]
    /// or [2, z_l − 1] with a zero guard.
    pub fn b_range(&self) -> (usize, usize) {
        match (self.cascading, self.format.zero_guard) {
            (Cascading::Fixed, _) => (self.format.b_u, self.format.b_u),
            (Cascading::Flexible, false) => (1, self.format.z_l),
            (Cascading::Flexible, true) => (2, self.format.z_l.saturating_sub(1)),
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let mut d = DetectorConfig::new(self.numerology, self.format, self.g_l());
        d.search = self.search;
        d.false_alarm_target = self.false_alarm_target;
        d.max_candidates = self.max_candidates;
        if let ThresholdSetting::Value(v) = self.threshold {
            d.threshold = v;
        }
        if let ThresholdSetting::Value(v) = self.ki_threshold {
            d.ki_threshold = v;
        }
        d
    }
}

/// Preamble designs of the format comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Design {
    /// Opt3, k = 1, r_b last.
    A,
    /// Opt3, k = 2, zero guard, r_b second to last.
    B,
    /// Opt3, k = 1, flexible b_u.
    C,
    /// Opt1, k = 1.
    D,
    /// Opt1, k = 2.
    E,
    /// Opt2, k = 1, scrambled symbol last.
    F,
    /// Opt2, k = 2, zero guard, flexible b_u.
    G,
    /// Opt3, k = 2, zero guard, flexible b_u (proposed).
    H,
}

impl Design {
    pub const ALL: [Design; 8] =
        [Design::A, Design::B, Design::C, Design::D, Design::E, Design::F, Design::G, Design::H];

    pub fn label(&self) -> &'static str {
        match self {
            Design::A => "A",
            Design::B => "B",
            Design::C => "C",
            Design::D => "D",
            Design::E => "E",
            Design::F => "F",
            Design::G => "G",
            Design::H => "H",
        }
    }

    pub fn parse(s: &str) -> Option<Design> {
        Design::ALL.iter().copied().find(|d| d.label().eq_ignore_ascii_case(s.trim()))
    }

    /// `base` with this design's format and cascading.
    pub fn apply(&self, base: &ScenarioConfig) -> ScenarioConfig {
        let z = base.format.z_l;
        let (option, k, guard, b_u, cascading) = match self {
            Design::A => (FormatOption::Opt3, 1.0, false, z, Cascading::Fixed),
            Design::B => (FormatOption::Opt3, 2.0, true, z - 1, Cascading::Fixed),
            Design::C => (FormatOption::Opt3, 1.0, false, z, Cascading::Flexible),
            Design::D => (FormatOption::Opt1, 1.0, false, 1, Cascading::Fixed),
            Design::E => (FormatOption::Opt1, 2.0, false, 1, Cascading::Fixed),
            Design::F => (FormatOption::Opt2, 1.0, false, z, Cascading::Fixed),
            Design::G => (FormatOption::Opt2, 2.0, true, z - 1, Cascading::Flexible),
            Design::H => (FormatOption::Opt3, 2.0, true, z - 1, Cascading::Flexible),
        };
        let mut cfg = base.clone();
        cfg.format = PreambleFormat { option, amplitude_ratio: k, zero_guard: guard, b_u, ..base.format };
        cfg.cascading = cascading;
        // Flexible positions are searched over every subsequence, fixed ones
        // only over the G_l + 1 reachable positions.
        cfg.search = match cascading {
            Cascading::Fixed => SubsequenceSearch::Window,
            Cascading::Flexible => SubsequenceSearch::All,
        };
        cfg
    }
}

/// Lane of the noise-only false-alarm slot.
pub const FA_LANE: u64 = 0xFFFF;
/// Lane of the receiver noise.
pub const NOISE_LANE: u64 = 0xFFFE;
const B_LANE: u64 = 0x4000;
const CALIBRATION_KEY: u64 = 0x9E37_79B9_7F4A_7C15;

/// ChaCha8 stream for (seed, trial, lane).
pub fn trial_rng(seed: u64, trial: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((trial << 16) | (lane & 0xFFFF));
    rng
}

/// Per-UE outcome of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct UeRecord {
    pub trial: usize,
    pub ue: usize,
    pub root_a: usize,
    pub root_b: usize,
    pub b_u: usize,
    pub scramble_seed: u32,
    pub offset_samples: i64,
    pub cfo_hz: f64,
    pub result: DetectionResult,
    pub kf_error: bool,
    pub ki_error: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub ues: Vec<UeRecord>,
    /// Module 1 declared a preamble in the noise-only slot.
    pub false_alarm: bool,
}

/// Order statistics of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Some(Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p05: q(0.05),
            p50: q(0.5),
            p95: q(0.95),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub trials: usize,
    pub attempts: usize,
    pub misses: usize,
    pub kf_errors: usize,
    pub ki_errors: usize,
    pub false_alarms: usize,
    pub missed_detection_rate: f64,
    /// Fraction of noise-only slots (one per trial) with a declaration.
    pub false_alarm_rate: f64,
    pub kf_error_rate: f64,
    pub ki_error_rate: f64,
    /// Signed TA errors of the correctly detected UEs, samples.
    pub ta_errors: Vec<i64>,
    pub ta_error_samples: Option<Summary>,
    pub precomp_error_stats: Option<Summary>,
}

impl TrialMetrics {
    /// Exact counts over `records`, in trial order.
    pub fn from_records(records: &[TrialRecord]) -> TrialMetrics {
        let mut sorted: Vec<&TrialRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.trial);
        let ues = sorted.iter().flat_map(|r| r.ues.iter());
        let (mut attempts, mut misses, mut kf, mut ki) = (0, 0, 0, 0);
        let mut ta_errors = Vec::new();
        let mut cfo_abs = Vec::new();
        for u in ues {
            attempts += 1;
            misses += u.result.is_miss() as usize;
            kf += u.kf_error as usize;
            ki += u.ki_error as usize;
            if !u.result.is_miss() {
                ta_errors.push(u.result.err_samples.unwrap_or(0));
            }
            cfo_abs.push(u.cfo_hz.abs());
        }
        let false_alarms = sorted.iter().filter(|r| r.false_alarm).count();
        let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let ta_f: Vec<f64> = ta_errors.iter().map(|e| *e as f64).collect();
        TrialMetrics {
            trials: sorted.len(),
            attempts,
            misses,
            kf_errors: kf,
            ki_errors: ki,
            false_alarms,
            missed_detection_rate: rate(misses, attempts),
            false_alarm_rate: rate(false_alarms, sorted.len()),
            kf_error_rate: rate(kf, attempts),
            ki_error_rate: rate(ki, attempts),
            ta_error_samples: Summary::of(&ta_f),
            ta_errors,
            precomp_error_stats: Summary::of(&cfo_abs),
        }
    }
}

/// Detection thresholds in normalised PDP units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub module_one: f64,
    pub module_two: f64,
}

/// Resolves `Auto` thresholds from noise-only slots on a dedicated stream.
pub fn calibrate(cfg: &ScenarioConfig) -> Result<Thresholds, HarnessError> {
    cfg.validate()?;
    let det = cfg.detector_config();
    let var = cfg.noise_variance();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CALIBRATION_KEY);
    let module_one = match cfg.threshold {
        ThresholdSetting::Value(v) => v,
        ThresholdSetting::Auto => calibrate_threshold(&det, var, cfg.calibration_trials, &mut rng)?,
    };
    let module_two = match cfg.ki_threshold {
        ThresholdSetting::Value(v) => v,
        ThresholdSetting::Auto => calibrate_ki_threshold(&det, var, cfg.calibration_trials, &mut rng)?,
    };
    Ok(Thresholds { module_one, module_two })
}

/// One residual pre-compensation outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecompSample {
    /// Estimated minus true round-trip delay, s.
    pub ta_error: f64,
    /// Pre-compensated minus true uplink CFO, Hz.
    pub cfo_error: f64,
    /// |p̂ − p|, m (NaN when no position is estimated).
    pub position_error: f64,
    pub elevation: f64,
    pub converged: bool,
}

/// A UE scene: position, serving satellite and companions.
fn draw_scene<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<(UePosition, Vec<crate::geometry::SatelliteState>, f64), HarnessError> {
    let period = std::f64::consts::TAU * cfg.constellation.orbit_radius() / cfg.constellation.orbital_speed();
    let (el_lo, el_hi) = cfg.elevation_range;
    let lat_max = cfg.constellation.inclination.min(50f64.to_radians());
    for _ in 0..10_000 {
        let sats = generate_constellation(&cfg.constellation, rng.random_range(0.0..period));
        let ue = UePosition::new(
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.random_range(-lat_max..lat_max),
        );
        let vis = visible_satellites(&ue, &sats, el_lo);
        if vis.len() < 3 {
            continue;
        }
        let el = crate::geometry::elevation(&ue.to_ecef(), &vis[0].position);
        if el <= el_hi {
            return Ok((ue, vis, el));
        }
    }
    Err(HarnessError::Invalid("no admissible scene found in 10000 draws".into()))
}

/// Draws one scene and runs pre-compensation in `cfg.precomp_mode`.
pub fn precomp_trial<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<PrecompSample, HarnessError> {
    let (ue, vis, elevation) = draw_scene(cfg, rng)?;
    let fc = cfg.constellation.carrier_frequency;
    let (lo_a, lo_b) = cfg.lo_offset_fraction_range;
    let f_lo = if lo_b > lo_a { rng.random_range(lo_a..lo_b) } else { lo_a } * fc;
    let truth = EstimateVector { theta: ue.theta, phi: ue.phi, f_lo };
    let e = cfg.dl_measurement_error;
    let target = vis[0];
    let t_true = propagation_ta(&target.position, &ue.to_ecef())?;

    // Beam centre: truth displaced uniformly within the beam disk.
    let r = cfg.beam_radius * rng.random::<f64>().sqrt();
    let psi = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = cfg.constellation.earth_radius;
    let centre = EstimateVector {
        theta: ue.theta + r * psi.cos() / (radius * ue.phi.cos()),
        phi: ue.phi + r * psi.sin() / radius,
        f_lo: 0.0,
    };
    let triple = select_measurement_triple(&target, &vis, &centre);
    let errors: Vec<f64> = (0..triple.len()).map(|_| if e > 0.0 { rng.random_range(-e..e) } else { 0.0 }).collect();
    let meas = synthesize_measurements(&truth, &triple, &errors, e)?;
    let f_up_true = meas[0].measured_cfo - 2.0 * f_lo;

    Ok(match cfg.precomp_mode {
        PrecompMode::None => PrecompSample {
            ta_error: -t_true,
            cfo_error: -f_up_true,
            position_error: f64::NAN,
            elevation,
            converged: true,
        },
        PrecompMode::DownlinkCopy => PrecompSample {
            ta_error: -t_true,
            cfo_error: meas[0].measured_cfo - f_up_true,
            position_error: f64::NAN,
            elevation,
            converged: true,
        },
        PrecompMode::Solver => {
            let solver = SolverConfig {
                initialization: Initialization::Angles { theta: centre.theta, phi: centre.phi },
                ..SolverConfig::default()
            };
            match precompensate(&meas, &target, &solver) {
                Ok(res) => PrecompSample {
                    ta_error: res.t_pre - t_true,
                    cfo_error: res.f_up - f_up_true,
                    position_error: (res.position.to_ecef() - ue.to_ecef()).norm(),
                    elevation,
                    converged: res.converged,
                },
                Err(_) => PrecompSample {
                    ta_error: f64::INFINITY,
                    cfo_error: f64::INFINITY,
                    position_error: f64::INFINITY,
                    elevation,
                    converged: false,
                },
            }
        }
    })
}

/// Pre-compensation error samples for `cfg.trials` scenes.
pub fn run_precomp_study(cfg: &ScenarioConfig) -> Result<Vec<PrecompSample>, HarnessError> {
    cfg.validate()?;
    (0..cfg.trials).map(|t| precomp_trial(cfg, &mut trial_rng(cfg.seed, t as u64, 1))).collect()
}

/// Empirical CDF (sorted value, cumulative fraction) of `values`.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

/// A scenario ready to run: validated config, thresholds and detector.
pub struct Runner {
    pub cfg: ScenarioConfig,
    pub thresholds: Thresholds,
    detector: Detector,
    modem: Modem,
}

impl Runner {
    pub fn new(cfg: &ScenarioConfig) -> Result<Runner, HarnessError> {
        let thresholds = calibrate(cfg)?;
        Runner::with_thresholds(cfg, thresholds)
    }

    pub fn with_thresholds(cfg: &ScenarioConfig, thresholds: Thresholds) -> Result<Runner, HarnessError> {
        cfg.validate()?;
        let mut d = cfg.detector_config();
        d.threshold = thresholds.module_one;
        d.ki_threshold = thresholds.module_two;
        Ok(Runner { cfg: cfg.clone(), thresholds, detector: Detector::new(d)?, modem: Modem::new(cfg.numerology)? })
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    /// Roots, b_u and seeds for every UE of `trial`.
    pub fn assign_formats(&self, trial: usize) -> Vec<PreambleFormat> {
        let cfg = &self.cfg;
        let n = cfg.numerology.n_zc;
        let mut rng = trial_rng(cfg.seed, trial as u64, 0);
        let u = cfg.ue_count;
        let base = cfg.format;
        let (b_lo, b_hi) = cfg.b_range();
        let b_draws: Vec<usize> = (1..=u)
            .map(|ue| {
                let mut r = trial_rng(cfg.seed, trial as u64, B_LANE | ue as u64);
                if b_lo == b_hi {
                    b_lo
                } else {
                    r.random_range(b_lo..=b_hi)
                }
            })
            .collect();
        match base.option {
            FormatOption::Opt1 => sample(&mut rng, n - 1, u)
                .into_iter()
                .zip(b_draws)
                .map(|(r, _)| PreambleFormat { root_a: r + 1, root_b: if r + 1 == 1 { 2 } else { 1 }, b_u: 1, ..base })
                .collect(),
            FormatOption::Opt2 => {
                let root_a = rng.random_range(1..n);
                sample(&mut rng, 511, u)
                    .into_iter()
                    .zip(b_draws)
                    .map(|(s, b)| PreambleFormat {
                        root_a,
                        root_b: if root_a == 1 { 2 } else { 1 },
                        scramble_seed: s as u32,
                        b_u: b,
                        ..base
                    })
                    .collect()
            }
            FormatOption::Opt3 => {
                let root_a = rng.random_range(1..n);
                sample(&mut rng, n - 2, u)
                    .into_iter()
                    .zip(b_draws)
                    .map(|(r, b)| {
                        let rb = r + 1;
                        let root_b = if rb >= root_a { rb + 1 } else { rb };
                        PreambleFormat { root_a, root_b, b_u: b, ..base }
                    })
                    .collect()
            }
        }
    }

    /// Arrival offset (samples) and residual CFO (Hz) of every UE.
    pub fn draw_channels(&self, trial: usize) -> Result<Vec<(usize, f64)>, HarnessError> {
        let cfg = &self.cfg;
        let spread = (cfg.max_arrival_spread / cfg.numerology.t_s()).floor() as usize;
        (1..=cfg.ue_count)
            .map(|ue| {
                let mut r = trial_rng(cfg.seed, trial as u64, ue as u64);
                let offset = r.random_range(0..=spread);
                let cfo = match cfg.uplink_cfo {
                    UplinkCfo::Fixed(f) => f,
                    UplinkCfo::FromPrecomp => precomp_trial(cfg, &mut r)?.cfo_error,
                };
                Ok((offset, cfo))
            })
            .collect()
    }

    /// Received slot: superposed UE preambles, CFO and noise.
    pub fn synthesize(
        &self,
        formats: &[PreambleFormat],
        channels: &[(usize, f64)],
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<TimeDomainSignal, HarnessError> {
        let num = self.cfg.numerology;
        let n = num.n_idft;
        let slot = self.cfg.format.slot_len(&num);
        let mut rx = vec![Complex64::new(0.0, 0.0); slot];
        // UEs sharing a CFO are summed first and rotated once.
        let mut groups: Vec<(f64, Vec<Complex64>)> = Vec::new();
        let mut root_a_cache: Vec<(usize, Vec<Complex64>)> = Vec::new();
        for (fmt, &(offset, cfo)) in formats.iter().zip(channels) {
            let gi = match groups.iter().position(|(f, _)| f.to_bits() == cfo.to_bits()) {
                Some(i) => i,
                None => {
                    groups.push((cfo, vec![Complex64::new(0.0, 0.0); slot]));
                    groups.len() - 1
                }
            };
            let ra = match root_a_cache.iter().position(|(r, _)| *r == fmt.root_a) {
                Some(i) => i,
                None => {
                    let seq = symbol_sequence(SymbolKind::RootA(1.0), fmt, num.n_zc)?.expect("root symbol");
                    root_a_cache.push((fmt.root_a, self.modem.modulate(&seq, 1.0)?));
                    root_a_cache.len() - 1
                }
            };
            let mut special: Option<Vec<Complex64>> = None;
            let buf = &mut groups[gi].1;
            for (i, kind) in fmt.symbol_plan().into_iter().enumerate() {
                let (wave, amp): (&[Complex64], f64) = match kind {
                    SymbolKind::Zero => continue,
                    SymbolKind::RootA(a) => (&root_a_cache[ra].1, a),
                    SymbolKind::RootB(a) | SymbolKind::ScrambledA(a) => {
                        if special.is_none() {
                            let seq = symbol_sequence(kind, fmt, num.n_zc)?.expect("non-zero symbol");
                            special = Some(self.modem.modulate(&seq, 1.0)?);
                        }
                        (special.as_deref().expect("just set"), a)
                    }
                };
                let start = offset + i * n;
                if start >= slot {
                    break;
                }
                for (o, v) in buf[start..(start + n).min(slot)].iter_mut().zip(wave) {
                    *o += v * amp;
                }
            }
        }
        for (cfo, buf) in groups {
            let eps = cfo / num.scs;
            for (l, (o, v)) in rx.iter_mut().zip(buf).enumerate() {
                *o += if eps == 0.0 { v } else { v * cfo_phasor(eps, l, n) };
            }
        }
        add_noise(&mut rx, self.cfg.noise_variance(), noise_rng);
        Ok(TimeDomainSignal { samples: rx, t_s: num.t_s(), origin: 0 })
    }

    /// Whether module 1 declares a preamble in a noise-only slot.
    pub fn false_alarm_slot(&self, trial: usize, root_a: usize) -> Result<bool, HarnessError> {
        let num = self.cfg.numerology;
        let mut rx = vec![Complex64::new(0.0, 0.0); self.cfg.format.slot_len(&num)];
        add_noise(&mut rx, self.cfg.noise_variance(), &mut trial_rng(self.cfg.seed, trial as u64, FA_LANE));
        let sig = TimeDomainSignal { samples: rx, t_s: num.t_s(), origin: 0 };
        let profile = self.detector.module_one_profile(&sig, root_a)?;
        Ok(!self.detector.kf_candidates(&profile).is_empty())
    }

    pub fn run_trial(&self, trial: usize) -> Result<TrialRecord, HarnessError> {
        let formats = self.assign_formats(trial);
        let channels = self.draw_channels(trial)?;
        let mut noise_rng = trial_rng(self.cfg.seed, trial as u64, NOISE_LANE);
        let rx = self.synthesize(&formats, &channels, &mut noise_rng)?;
        let results = self.detector.detect_many(&rx, &formats)?;
        let num = self.cfg.numerology;
        let n = num.n_idft as i64;
        let bin = num.n_idft as f64 / num.n_zc as f64;
        let ues = formats
            .iter()
            .zip(&channels)
            .zip(results)
            .enumerate()
            .map(|(i, ((f, &(offset, cfo)), mut result))| {
                result.score(offset as i64, num.t_s(), CP_SAMPLES);
                let kf_ok = result.detected && {
                    let d = (result.ta_hat_samples - offset as i64).rem_euclid(n);
                    (d.min(n - d) as f64) <= bin
                };
                let ki_error = kf_ok && result.err_samples.is_some_and(|e| e.abs() > n / 2);
                UeRecord {
                    trial,
                    ue: i,
                    root_a: f.root_a,
                    root_b: f.root_b,
                    b_u: f.effective_b(),
                    scramble_seed: f.scramble_seed,
                    offset_samples: offset as i64,
                    cfo_hz: cfo,
                    result,
                    kf_error: !kf_ok,
                    ki_error,
                }
            })
            .collect();
        let false_alarm = self.false_alarm_slot(trial, formats[0].root_a)?;
        Ok(TrialRecord { trial, ues, false_alarm })
    }

    /// Trials `first..first + count`.
    pub fn run_range(&self, first: usize, count: usize) -> Result<Vec<TrialRecord>, HarnessError> {
        (first..first + count).map(|t| self.run_trial(t)).collect()
    }
}

/// All `cfg.trials` trials with calibrated thresholds.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<(TrialMetrics, Vec<TrialRecord>), HarnessError> {
    let runner = Runner::new(cfg)?;
    let records = runner.run_range(0, cfg.trials)?;
    Ok((TrialMetrics::from_records(&records), records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub design: Design,
    pub snr_db: f64,
    pub thresholds: Thresholds,
    pub metrics: TrialMetrics,
}

/// Every design at every SNR, all sharing `base`'s seed and trial count.
pub fn run_format_comparison(
    base: &ScenarioConfig,
    designs: &[Design],
    snrs_db: &[f64],
) -> Result<Vec<ComparisonRow>, HarnessError> {
    let mut rows = Vec::new();
    for &snr_db in snrs_db {
        for &design in designs {
            let cfg = ScenarioConfig { snr_db, ..design.apply(base) };
            let runner = Runner::new(&cfg)?;
            let records = runner.run_range(0, cfg.trials)?;
            rows.push(ComparisonRow {
                design,
                snr_db,
                thresholds: runner.thresholds,
                metrics: TrialMetrics::from_records(&records),
            });
        }
    }
    Ok(rows)
}
