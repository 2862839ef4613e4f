//! Partial-period cross-correlation bounds between ZC preambles, the
//! per-subsequence partial-overlap probabilities for fixed and flexible
//! symbol ordering, and brute-force oracles for both.
//!
//! All PDP quantities are normalised so that the autocorrelation peak of a
//! unit-amplitude ZC sequence equals 1.

use rand::Rng;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::detector::{pdp_values, PdpProfile};
use crate::waveform::{zc_sequence, Modem, Numerology, WaveformError, ZcSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterferenceError {
    #[error("window [{alpha}, {alpha}+{beta}) exceeds sequence length {n_zc}")]
    Window { alpha: usize, beta: usize, n_zc: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

/// Rectangular window keeping elements α..α+β of a sequence.
///
/// β = N_zc (the whole sequence) is allowed so that Case-1 interference is a
/// special case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub alpha: usize,
    pub beta: usize,
}

impl WindowSpec {
    pub fn validate(&self, n_zc: usize) -> Result<(), InterferenceError> {
        if self.alpha + self.beta > n_zc {
            return Err(InterferenceError::Window { alpha: self.alpha, beta: self.beta, n_zc });
        }
        Ok(())
    }

    pub fn contains(&self, n: usize) -> bool {
        n >= self.alpha && n < self.alpha + self.beta
    }
}

/// Per-subsequence probabilities, index 0 is j = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbProfile {
    pub g_l: usize,
    pub z_l: usize,
    pub b_u: Option<usize>,
    pub values: Vec<f64>,
}

impl ProbProfile {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Maximum over the 1-based indices in `range`.
    pub fn max_over(&self, range: std::ops::RangeInclusive<usize>) -> f64 {
        range.map(|j| self.at(j)).fold(0.0, f64::max)
    }

    /// Probability at 1-based subsequence index `j`.
    pub fn at(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.values.get(j - 1).copied().unwrap_or(0.0)
        }
    }
}

/// Q = −(N/π) ln sin(π/2N).
pub fn q_constant(n_zc: usize) -> f64 {
    let n = n_zc as f64;
    -(n / std::f64::consts::PI) * (std::f64::consts::PI / (2.0 * n)).sin().ln()
}

/// Case-2 bound min{(kβ/N)², k²(β + 2Q)²/N³}.
pub fn m2_bound(beta: usize, k: f64, n_zc: usize) -> f64 {
    let n = n_zc as f64;
    let b = beta as f64;
    let quad = (k * b / n).powi(2);
    let q = k * k * (b + 2.0 * q_constant(n_zc)).powi(2) / (n * n * n);
    quad.min(q)
}

/// Case-3 bound [√M2(β, k1) + √M2(N − β, k2)]².
pub fn m3_bound(beta: usize, k1: f64, k2: f64, n_zc: usize) -> f64 {
    let rest = n_zc.saturating_sub(beta);
    (m2_bound(beta, k1, n_zc).sqrt() + m2_bound(rest, k2, n_zc).sqrt()).powi(2)
}

/// [Σ √M3]² over interfering UEs given as (β, k1, k2).
pub fn multi_ue_bound(contributions: &[(usize, f64, f64)], n_zc: usize) -> f64 {
    contributions.iter().map(|&(b, k1, k2)| m3_bound(b, k1, k2, n_zc).sqrt()).sum::<f64>().powi(2)
}

/// Interference-to-peak ratio [√M2(β, k1) + √M2(N − β, k2)/k]² when the
/// wanted peak is raised k-fold.
pub fn interference_to_peak_ratio(k: f64, beta: usize, k1: f64, k2: f64, n_zc: usize) -> f64 {
    let rest = n_zc.saturating_sub(beta);
    (m2_bound(beta, k1, n_zc).sqrt() + m2_bound(rest, k2, n_zc).sqrt() / k).powi(2)
}

/// Probability that subsequence j overlaps an interferer's symbol boundary
/// when the distinguished symbol sits at a fixed position `b_u`.
///
/// Where the case ranges overlap the 2/G_l case wins.
pub fn prob_fixed(g_l: usize, z_l: usize, b_u: usize) -> Result<ProbProfile, InterferenceError> {
    if g_l == 0 || b_u == 0 || b_u > z_l {
        return Err(InterferenceError::Precondition(format!(
            "need g_l >= 1 and 1 <= b_u <= z_l, got g_l {g_l}, z_l {z_l}, b_u {b_u}"
        )));
    }
    let g = g_l as f64;
    let values = (1..=z_l + g_l)
        .map(|j| {
            if j > b_u && j < b_u + g_l {
                2.0 / g
            } else if j <= g_l || j == b_u || j == b_u + g_l {
                1.0 / g
            } else {
                0.0
            }
        })
        .collect();
    Ok(ProbProfile { g_l, z_l, b_u: Some(b_u), values })
}

/// Same probability when b_u is drawn uniformly from 1..=z_l per UE.
pub fn prob_flexible(g_l: usize, z_l: usize) -> Result<ProbProfile, InterferenceError> {
    if !(z_l > g_l && g_l >= 1) {
        return Err(InterferenceError::Precondition(format!("need z_l > g_l >= 1, got z_l {z_l}, g_l {g_l}")));
    }
    let (g, z) = (g_l as f64, z_l as f64);
    let values = (1..=z_l + g_l)
        .map(|j| {
            let jf = j as f64;
            if j == 1 || j == z_l + g_l {
                1.0 / g
            } else if j <= g_l {
                1.0 / g + 2.0 * (jf - 1.0) / (g * z)
            } else if j <= z_l {
                2.0 / z
            } else {
                1.0 / g + 2.0 * (g + z - jf) / (g * z)
            }
        })
        .collect();
    Ok(ProbProfile { g_l, z_l, b_u: None, values })
}

/// Subsequences (1-based) cut by an interferer's symbol boundaries.
///
/// The interferer starts `lead` symbols (a fraction in [0, g_l)) after the
/// first window; the boundaries are its preamble start, both edges of its
/// distinguished symbol at `b` and its preamble end.
pub fn partial_windows(lead: f64, b: usize, z_l: usize) -> Vec<usize> {
    let k = lead.floor() as usize;
    let mut w = vec![k + 1, k + b, k + b + 1, k + z_l + 1];
    w.sort_unstable();
    w.dedup();
    w
}

/// Monte Carlo frequencies of [`partial_windows`] per subsequence.
///
/// `b` is `Some(b_u)` for fixed ordering or `None` to draw it uniformly from
/// 1..=z_l each time. Leads that land exactly on a symbol boundary are
/// redrawn.
pub fn simulate_partial_events<R: Rng + ?Sized>(
    g_l: usize,
    z_l: usize,
    b: Option<usize>,
    samples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut counts = vec![0usize; z_l + g_l];
    for _ in 0..samples {
        let lead = loop {
            let x: f64 = rng.random_range(0.0..g_l as f64);
            if x.fract() != 0.0 {
                break x;
            }
        };
        let bu = b.unwrap_or_else(|| rng.random_range(1..=z_l));
        for j in partial_windows(lead, bu, z_l) {
            if j <= counts.len() {
                counts[j - 1] += 1;
            }
        }
    }
    counts.into_iter().map(|c| c as f64 / samples as f64).collect()
}

/// PDP of a windowed interferer k·x(n + shift, r_i)·ρ(n) against `probe_root`.
pub fn empirical_partial_pdp(
    window: WindowSpec,
    interferer_root: usize,
    probe_root: usize,
    k: f64,
    shift: usize,
    n_zc: usize,
) -> Result<PdpProfile, InterferenceError> {
    window.validate(n_zc)?;
    if interferer_root == probe_root {
        return Err(InterferenceError::Precondition("roots must differ".into()));
    }
    let x = zc_sequence(ZcSpec { root: interferer_root, n_zc })?;
    let seq: Vec<Complex64> = (0..n_zc)
        .map(|n| if window.contains(n) { x[(n + shift) % n_zc] * k } else { Complex64::new(0.0, 0.0) })
        .collect();
    let modem = partial_modem(n_zc)?;
    let probe = zc_sequence(ZcSpec { root: probe_root, n_zc })?;
    Ok(PdpProfile::from_values(pdp_values(&modem, &modem.zc_dft(&seq), &modem.zc_dft(&probe)), probe_root))
}

/// Two complementary windowed interferers: x1 on [0, β) and x2 on [β, N).
pub fn empirical_case3_pdp(
    beta: usize,
    roots: (usize, usize),
    amps: (f64, f64),
    shifts: (usize, usize),
    probe_root: usize,
    n_zc: usize,
) -> Result<PdpProfile, InterferenceError> {
    if beta > n_zc || roots.0 == probe_root || roots.1 == probe_root {
        return Err(InterferenceError::Precondition("invalid case-3 instance".into()));
    }
    let x1 = zc_sequence(ZcSpec { root: roots.0, n_zc })?;
    let x2 = zc_sequence(ZcSpec { root: roots.1, n_zc })?;
    let seq: Vec<Complex64> = (0..n_zc)
        .map(|n| if n < beta { x1[(n + shifts.0) % n_zc] * amps.0 } else { x2[(n + shifts.1) % n_zc] * amps.1 })
        .collect();
    let modem = partial_modem(n_zc)?;
    let probe = zc_sequence(ZcSpec { root: probe_root, n_zc })?;
    Ok(PdpProfile::from_values(pdp_values(&modem, &modem.zc_dft(&seq), &modem.zc_dft(&probe)), probe_root))
}

/// The n_idft size is irrelevant here; only the n_zc transforms are used.
fn partial_modem(n_zc: usize) -> Result<Modem, InterferenceError> {
    Ok(Modem::new(Numerology { scs: 30e3, n_zc, n_idft: n_zc.next_power_of_two() * 2 })?)
}

/// Module-2 PDP count of flexible ordering (all subsequences) relative to
/// the fixed-ordering search window.
pub fn detection_complexity_ratio(z_l: usize, g_l: usize) -> Result<f64, InterferenceError> {
    if g_l == 0 {
        return Err(InterferenceError::Precondition("g_l must be at least 1".into()));
    }
    Ok(z_l as f64 / g_l as f64)
}
