//! Flat `key = value` scenario files.
//!
//! `#` starts a comment. Keys are unique and case-sensitive; anything not in
//! [`KEYS`] is rejected. Keys in [`REQUIRED`] must be present, the rest
//! default to [`ScenarioConfig::baseline`].

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use super::{Cascading, PrecompMode, ScenarioConfig, ThresholdSetting, UplinkCfo};
use crate::detector::SubsequenceSearch;
use crate::waveform::FormatOption;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Every accepted key, in emission order.
pub const KEYS: &[&str] = &[
    "orbit_count",
    "satellites_per_orbit",
    "altitude_km",
    "inclination_deg",
    "earth_radius_km",
    "earth_rotation_rad_s",
    "phase_factor",
    "carrier_frequency_hz",
    "scs_hz",
    "n_zc",
    "n_idft",
    "format_option",
    "z_l",
    "root_a",
    "root_b",
    "b_u",
    "amplitude_ratio",
    "zero_guard",
    "t_cp_s",
    "t_gt_s",
    "scramble_seed",
    "cascading",
    "ue_count",
    "snr_db",
    "max_arrival_spread_s",
    "uplink_cfo_hz",
    "elevation_min_deg",
    "elevation_max_deg",
    "lo_offset_fraction_min",
    "lo_offset_fraction_max",
    "dl_measurement_error_hz",
    "beam_radius_km",
    "trials",
    "seed",
    "precomp_mode",
    "subsequence_search",
    "false_alarm_target",
    "calibration_trials",
    "threshold",
    "ki_threshold",
    "max_candidates",
];

pub const REQUIRED: &[&str] = &["ue_count", "snr_db", "max_arrival_spread_s", "trials", "seed"];

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("`{v}` is not a valid number"))
}

fn finite(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn threshold(v: &str) -> Result<ThresholdSetting, String> {
    if v == "auto" {
        Ok(ThresholdSetting::Auto)
    } else {
        finite(v).map(ThresholdSetting::Value)
    }
}

fn set(cfg: &mut ScenarioConfig, key: &str, v: &str) -> Result<(), String> {
    let c = &mut cfg.constellation;
    let f = &mut cfg.format;
    match key {
        "orbit_count" => c.orbit_count = num(v)?,
        "satellites_per_orbit" => c.satellites_per_orbit = num(v)?,
        "altitude_km" => c.altitude = finite(v)? * 1e3,
        "inclination_deg" => c.inclination = finite(v)?.to_radians(),
        "earth_radius_km" => c.earth_radius = finite(v)? * 1e3,
        "earth_rotation_rad_s" => c.earth_rotation = finite(v)?,
        "phase_factor" => c.phase_factor = num(v)?,
        "carrier_frequency_hz" => c.carrier_frequency = finite(v)?,
        "scs_hz" => cfg.numerology.scs = finite(v)?,
        "n_zc" => cfg.numerology.n_zc = num(v)?,
        "n_idft" => cfg.numerology.n_idft = num(v)?,
        "format_option" => {
            f.option = match v {
                "opt1" => FormatOption::Opt1,
                "opt2" => FormatOption::Opt2,
                "opt3" => FormatOption::Opt3,
                _ => return Err(format!("`{v}` is not opt1, opt2 or opt3")),
            }
        }
        "z_l" => f.z_l = num(v)?,
        "root_a" => f.root_a = num(v)?,
        "root_b" => f.root_b = num(v)?,
        "b_u" => f.b_u = num(v)?,
        "amplitude_ratio" => f.amplitude_ratio = finite(v)?,
        "zero_guard" => f.zero_guard = boolean(v)?,
        "t_cp_s" => f.t_cp = finite(v)?,
        "t_gt_s" => f.t_gt = finite(v)?,
        "scramble_seed" => f.scramble_seed = num(v)?,
        "cascading" => {
            cfg.cascading = match v {
                "fixed" => Cascading::Fixed,
                "flexible" => Cascading::Flexible,
                _ => return Err(format!("`{v}` is not fixed or flexible")),
            }
        }
        "ue_count" => cfg.ue_count = num(v)?,
        "snr_db" => cfg.snr_db = finite(v)?,
        "max_arrival_spread_s" => cfg.max_arrival_spread = finite(v)?,
        "uplink_cfo_hz" => {
            cfg.uplink_cfo = if v == "from-precomp" { UplinkCfo::FromPrecomp } else { UplinkCfo::Fixed(finite(v)?) }
        }
        "elevation_min_deg" => cfg.elevation_range.0 = finite(v)?.to_radians(),
        "elevation_max_deg" => cfg.elevation_range.1 = finite(v)?.to_radians(),
        "lo_offset_fraction_min" => cfg.lo_offset_fraction_range.0 = finite(v)?,
        "lo_offset_fraction_max" => cfg.lo_offset_fraction_range.1 = finite(v)?,
        "dl_measurement_error_hz" => cfg.dl_measurement_error = finite(v)?,
        "beam_radius_km" => cfg.beam_radius = finite(v)? * 1e3,
        "trials" => cfg.trials = num(v)?,
        "seed" => cfg.seed = num(v)?,
        "precomp_mode" => {
            cfg.precomp_mode = match v {
                "none" => PrecompMode::None,
                "downlink_copy" => PrecompMode::DownlinkCopy,
                "solver" => PrecompMode::Solver,
                _ => return Err(format!("`{v}` is not none, downlink_copy or solver")),
            }
        }
        "subsequence_search" => {
            cfg.search = match v {
                "all" => SubsequenceSearch::All,
                "window" => SubsequenceSearch::Window,
                _ => return Err(format!("`{v}` is not all or window")),
            }
        }
        "false_alarm_target" => cfg.false_alarm_target = finite(v)?,
        "calibration_trials" => cfg.calibration_trials = num(v)?,
        "threshold" => cfg.threshold = threshold(v)?,
        "ki_threshold" => cfg.ki_threshold = threshold(v)?,
        "max_candidates" => cfg.max_candidates = num(v)?,
        _ => unreachable!("key list and setter out of sync: {key}"),
    }
    Ok(())
}

/// Parses scenario text. Values are checked for syntax only; call
/// [`ScenarioConfig::validate`] for cross-field rules.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = ScenarioConfig::baseline();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError::Syntax { line, message: format!("expected `key = value`, got `{content}`") });
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax { line, message: "empty key or value".into() });
        }
        let Some(&known) = KEYS.iter().find(|k| **k == key) else {
            return Err(ConfigError::UnknownKey { line, key: key.into() });
        };
        if !seen.insert(known) {
            return Err(ConfigError::DuplicateKey { line, key: key.into() });
        }
        set(&mut cfg, known, value).map_err(|message| ConfigError::Value { line, key: key.into(), message })?;
    }
    if let Some(missing) = REQUIRED.iter().find(|k| !seen.contains(*k)) {
        return Err(ConfigError::MissingKey(missing));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

/// Text `t` of `to_file(x)` such that `from_file(t) == x` exactly, searching a
/// few ulps around the direct conversion.
fn exact_text(x: f64, to_file: fn(f64) -> f64, from_file: fn(f64) -> f64) -> String {
    let d = to_file(x);
    let exact = (0..=16u64)
        .flat_map(|k| [d.to_bits().wrapping_add(k), d.to_bits().wrapping_sub(k)])
        .map(f64::from_bits)
        .find(|c| from_file(*c) == x);
    exact.unwrap_or(d).to_string()
}

fn degrees_text(rad: f64) -> String {
    exact_text(rad, f64::to_degrees, f64::to_radians)
}

fn km_text(m: f64) -> String {
    exact_text(m, |v| v / 1e3, |v| v * 1e3)
}

fn threshold_text(t: ThresholdSetting) -> String {
    match t {
        ThresholdSetting::Auto => "auto".into(),
        ThresholdSetting::Value(v) => v.to_string(),
    }
}

/// Every key in [`KEYS`] order, one per line.
pub fn emit_config(cfg: &ScenarioConfig) -> String {
    let c = &cfg.constellation;
    let f = &cfg.format;
    let value = |key: &str| -> String {
        match key {
            "orbit_count" => c.orbit_count.to_string(),
            "satellites_per_orbit" => c.satellites_per_orbit.to_string(),
            "altitude_km" => km_text(c.altitude),
            "inclination_deg" => degrees_text(c.inclination),
            "earth_radius_km" => km_text(c.earth_radius),
            "earth_rotation_rad_s" => c.earth_rotation.to_string(),
            "phase_factor" => c.phase_factor.to_string(),
            "carrier_frequency_hz" => c.carrier_frequency.to_string(),
            "scs_hz" => cfg.numerology.scs.to_string(),
            "n_zc" => cfg.numerology.n_zc.to_string(),
            "n_idft" => cfg.numerology.n_idft.to_string(),
            "format_option" => match f.option {
                FormatOption::Opt1 => "opt1",
                FormatOption::Opt2 => "opt2",
                FormatOption::Opt3 => "opt3",
            }
            .into(),
            "z_l" => f.z_l.to_string(),
            "root_a" => f.root_a.to_string(),
            "root_b" => f.root_b.to_string(),
            "b_u" => f.b_u.to_string(),
            "amplitude_ratio" => f.amplitude_ratio.to_string(),
            "zero_guard" => f.zero_guard.to_string(),
            "t_cp_s" => f.t_cp.to_string(),
            "t_gt_s" => f.t_gt.to_string(),
            "scramble_seed" => f.scramble_seed.to_string(),
            "cascading" => match cfg.cascading {
                Cascading::Fixed => "fixed",
                Cascading::Flexible => "flexible",
            }
            .into(),
            "ue_count" => cfg.ue_count.to_string(),
            "snr_db" => cfg.snr_db.to_string(),
            "max_arrival_spread_s" => cfg.max_arrival_spread.to_string(),
            "uplink_cfo_hz" => match cfg.uplink_cfo {
                UplinkCfo::Fixed(v) => v.to_string(),
                UplinkCfo::FromPrecomp => "from-precomp".into(),
            },
            "elevation_min_deg" => degrees_text(cfg.elevation_range.0),
            "elevation_max_deg" => degrees_text(cfg.elevation_range.1),
            "lo_offset_fraction_min" => cfg.lo_offset_fraction_range.0.to_string(),
            "lo_offset_fraction_max" => cfg.lo_offset_fraction_range.1.to_string(),
            "dl_measurement_error_hz" => cfg.dl_measurement_error.to_string(),
            "beam_radius_km" => km_text(cfg.beam_radius),
            "trials" => cfg.trials.to_string(),
            "seed" => cfg.seed.to_string(),
            "precomp_mode" => match cfg.precomp_mode {
                PrecompMode::None => "none",
                PrecompMode::DownlinkCopy => "downlink_copy",
                PrecompMode::Solver => "solver",
            }
            .into(),
            "subsequence_search" => match cfg.search {
                SubsequenceSearch::All => "all",
                SubsequenceSearch::Window => "window",
            }
            .into(),
            "false_alarm_target" => cfg.false_alarm_target.to_string(),
            "calibration_trials" => cfg.calibration_trials.to_string(),
            "threshold" => threshold_text(cfg.threshold),
            "ki_threshold" => threshold_text(cfg.ki_threshold),
            "max_candidates" => cfg.max_candidates.to_string(),
            _ => unreachable!("key list and emitter out of sync: {key}"),
        }
    };
    KEYS.iter().map(|k| format!("{k} = {}\n", value(k))).collect()
}
