//! File formats: ephemeris CSV, raw signal dumps, result tables, manifests.
//!
//! A signal dump is a pair of files: `<stem>.bin` holds interleaved
//! little-endian f64 (re, im) samples and `<stem>.hdr` is a sidecar of
//! `key = value` lines giving `n_samples`, `t_s` and `origin`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{EcefVector, SatelliteState, EARTH_RADIUS};
use crate::harness::{emit_config, ComparisonRow, PrecompSample, ScenarioConfig, TrialRecord};
use crate::waveform::TimeDomainSignal;

/// Bumped whenever a CSV layout below changes.
pub const CSV_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("ephemeris row {row}: {message}")]
    Ephemeris { row: usize, message: String },
    #[error("signal header line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("signal dump: {0}")]
    Signal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct EphemerisRow {
    id: u32,
    x_m: f64,
    y_m: f64,
    z_m: f64,
    vx_m_s: f64,
    vy_m_s: f64,
    vz_m_s: f64,
    carrier_hz: f64,
}

/// Satellites from CSV with header `id,x_m,y_m,z_m,vx_m_s,vy_m_s,vz_m_s,carrier_hz`.
/// Rows must describe satellites above the Earth's surface; ids are unique.
pub fn read_ephemeris<R: Read>(reader: R) -> Result<Vec<SatelliteState>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<SatelliteState> = Vec::new();
    for (i, row) in rdr.deserialize::<EphemerisRow>().enumerate() {
        let row_no = i + 1;
        let r = row.map_err(|e| IoError::Ephemeris { row: row_no, message: e.to_string() })?;
        let sat = SatelliteState {
            id: r.id,
            position: EcefVector::new(r.x_m, r.y_m, r.z_m),
            velocity: EcefVector::new(r.vx_m_s, r.vy_m_s, r.vz_m_s),
            carrier_frequency: r.carrier_hz,
        };
        sat.validate(EARTH_RADIUS).map_err(|e| IoError::Ephemeris { row: row_no, message: e.to_string() })?;
        if out.iter().any(|s| s.id == sat.id) {
            return Err(IoError::Ephemeris { row: row_no, message: format!("duplicate satellite id {}", sat.id) });
        }
        out.push(sat);
    }
    Ok(out)
}

pub fn write_ephemeris<W: Write>(writer: W, sats: &[SatelliteState]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in sats {
        w.serialize(EphemerisRow {
            id: s.id,
            x_m: s.position.x,
            y_m: s.position.y,
            z_m: s.position.z,
            vx_m_s: s.velocity.x,
            vy_m_s: s.velocity.y,
            vz_m_s: s.velocity.z,
            carrier_hz: s.carrier_frequency,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalHeader {
    pub n_samples: usize,
    pub t_s: f64,
    pub origin: usize,
}

/// Largest dump accepted, in samples (1 GiB of payload).
pub const MAX_SIGNAL_SAMPLES: usize = 1 << 26;

pub fn parse_signal_header(text: &str) -> Result<SignalHeader, IoError> {
    let (mut n, mut t_s, mut origin) = (None, None, None);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| IoError::Header { line, message };
        let (k, v) = content.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let slot = match k {
            "n_samples" => &mut n,
            "origin" => &mut origin,
            "t_s" => {
                if t_s.is_some() {
                    return Err(err("duplicate key `t_s`".into()));
                }
                let x: f64 = v.parse().map_err(|_| err(format!("bad t_s `{v}`")))?;
                if !(x.is_finite() && x > 0.0) {
                    return Err(err("t_s must be positive".into()));
                }
                t_s = Some(x);
                continue;
            }
            _ => return Err(err(format!("unknown key `{k}`"))),
        };
        if slot.is_some() {
            return Err(err(format!("duplicate key `{k}`")));
        }
        *slot = Some(v.parse::<usize>().map_err(|_| err(format!("bad integer `{v}` for `{k}`")))?);
    }
    let missing = |k: &str| IoError::Header { line: 0, message: format!("missing key `{k}`") };
    let h = SignalHeader {
        n_samples: n.ok_or_else(|| missing("n_samples"))?,
        t_s: t_s.ok_or_else(|| missing("t_s"))?,
        origin: origin.ok_or_else(|| missing("origin"))?,
    };
    if h.n_samples > MAX_SIGNAL_SAMPLES {
        return Err(IoError::Signal(format!("{} samples exceeds the {} limit", h.n_samples, MAX_SIGNAL_SAMPLES)));
    }
    if h.origin > h.n_samples {
        return Err(IoError::Signal(format!("origin {} past the end ({} samples)", h.origin, h.n_samples)));
    }
    Ok(h)
}

pub fn emit_signal_header(h: &SignalHeader) -> String {
    format!("n_samples = {}\nt_s = {}\norigin = {}\n", h.n_samples, h.t_s, h.origin)
}

pub fn decode_signal(header: &SignalHeader, bytes: &[u8]) -> Result<TimeDomainSignal, IoError> {
    let expected = header.n_samples * 16;
    if bytes.len() != expected {
        return Err(IoError::Signal(format!("payload has {} bytes, header implies {expected}", bytes.len())));
    }
    let samples = bytes
        .chunks_exact(16)
        .enumerate()
        .map(|(i, c)| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            if re.is_finite() && im.is_finite() {
                Ok(Complex64::new(re, im))
            } else {
                Err(IoError::Signal(format!("sample {i} is not finite")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TimeDomainSignal { samples, t_s: header.t_s, origin: header.origin })
}

pub fn encode_signal(sig: &TimeDomainSignal) -> (SignalHeader, Vec<u8>) {
    let mut bytes = Vec::with_capacity(sig.samples.len() * 16);
    for s in &sig.samples {
        bytes.extend_from_slice(&s.re.to_le_bytes());
        bytes.extend_from_slice(&s.im.to_le_bytes());
    }
    (SignalHeader { n_samples: sig.samples.len(), t_s: sig.t_s, origin: sig.origin }, bytes)
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

/// Writes `path` (payload) and its `.hdr` sidecar.
pub fn write_signal(path: &Path, sig: &TimeDomainSignal) -> Result<(), IoError> {
    let (h, bytes) = encode_signal(sig);
    std::fs::write(path, bytes)?;
    std::fs::write(sidecar(path), emit_signal_header(&h))?;
    Ok(())
}

pub fn read_signal(path: &Path) -> Result<TimeDomainSignal, IoError> {
    let h = parse_signal_header(&std::fs::read_to_string(sidecar(path))?)?;
    decode_signal(&h, &std::fs::read(path)?)
}

/// Per-UE detection outcomes.
pub fn write_detection_csv<W: Write>(writer: W, records: &[TrialRecord], t_s: f64) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "trial",
        "ue_id",
        "detected",
        "k_f_s",
        "k_i",
        "j_star",
        "ta_true_s",
        "ta_hat_s",
        "err_samples",
        "miss_reason",
    ])?;
    for r in records {
        for u in &r.ues {
            let d = &u.result;
            w.write_record([
                r.trial.to_string(),
                u.ue.to_string(),
                d.detected.to_string(),
                d.k_f_hat.to_string(),
                d.k_i_hat.to_string(),
                d.j_star.to_string(),
                (u.offset_samples as f64 * t_s).to_string(),
                d.ta_hat.to_string(),
                d.err_samples.map_or(String::new(), |e| e.to_string()),
                d.miss_reason.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per (design, SNR).
pub fn write_comparison_csv<W: Write>(writer: W, rows: &[ComparisonRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "design",
        "snr_db",
        "trials",
        "attempts",
        "missed_detection_rate",
        "kf_error_rate",
        "ki_error_rate",
        "false_alarm_rate",
        "module_one_threshold",
        "module_two_threshold",
    ])?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.design.label().to_string(),
            r.snr_db.to_string(),
            m.trials.to_string(),
            m.attempts.to_string(),
            m.missed_detection_rate.to_string(),
            m.kf_error_rate.to_string(),
            m.ki_error_rate.to_string(),
            m.false_alarm_rate.to_string(),
            r.thresholds.module_one.to_string(),
            r.thresholds.module_two.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_precomp_csv<W: Write>(writer: W, samples: &[PrecompSample]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["trial", "ta_error_s", "cfo_error_hz", "position_error_m", "elevation_deg", "converged"])?;
    for (i, s) in samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.ta_error.to_string(),
            s.cfo_error.to_string(),
            s.position_error.to_string(),
            s.elevation.to_degrees().to_string(),
            s.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format CDF table: `metric,value,cdf`.
pub fn write_cdf_csv<W: Write>(writer: W, series: &[(&str, Vec<(f64, f64)>)]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "value", "cdf"])?;
    for (name, points) in series {
        for (v, c) in points {
            w.write_record([name.to_string(), v.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Header plus rows of already formatted cells.
pub fn write_table<W: Write>(writer: W, header: &[&str], rows: &[Vec<String>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    Sha256::digest(emit_config(cfg).as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Run manifest: command, seed, config hash, CSV version and the full config.
pub fn manifest_text(command: &str, cfg: &ScenarioConfig, outputs: &[&str]) -> String {
    let mut s = format!(
        "command = {command}\nseed = {}\nconfig_sha256 = {}\ncsv_version = {CSV_VERSION}\noutputs = {}\n\n# config\n",
        cfg.seed,
        config_hash(cfg),
        outputs.join(","),
    );
    s.push_str(&emit_config(cfg));
    s
}
