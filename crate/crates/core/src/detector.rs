//! Two-module timing-advance detector.
//!
//! Module 1 sums all J received subsequences, correlates the sum with root
//! r_a and reads the fractional part K_f off the PDP peak. Module 2 drops the
//! first ⌈K_f/T_s⌉ samples, splits the rest into subsequences and finds the
//! one, j*, whose PDP against the UE's distinguished reference peaks at (or
//! within a few bins of) lag zero; the integer part is K_i = j* − b_u.
//!
//! With many UEs on the same r_a the module-1 profile carries one peak per
//! distinct fractional offset. Every sufficiently strong local maximum is
//! kept as a candidate and module 2 decides which one belongs to a UE.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::waveform::{
    mseq_scramble, zc_sequence, FormatOption, Modem, Numerology, PreambleFormat, TimeDomainSignal, WaveformError,
    ZcSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("need {needed} samples after offset {offset}, signal has {available}")]
    InsufficientSamples { needed: usize, offset: usize, available: usize },
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

/// One n_idft-sample slice of the received signal, `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsequence {
    pub index: usize,
    pub samples: Vec<Complex64>,
}

/// Consecutive non-overlapping n_idft windows starting at `start_offset`.
pub fn split_subsequences(
    rx: &TimeDomainSignal,
    start_offset: usize,
    num: &Numerology,
    count: usize,
) -> Result<Vec<Subsequence>, DetectorError> {
    let needed = count * num.n_idft;
    let available = rx.samples.len().saturating_sub(rx.origin);
    if start_offset + needed > available {
        return Err(DetectorError::InsufficientSamples { needed, offset: start_offset, available });
    }
    let base = rx.origin + start_offset;
    Ok((0..count)
        .map(|j| Subsequence {
            index: j + 1,
            samples: rx.samples[base + j * num.n_idft..base + (j + 1) * num.n_idft].to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdpProfile {
    /// |Σ_n y(n) x*(n − m)/N|² for m = 0..N−1.
    pub values: Vec<f64>,
    pub root_used: usize,
    pub peak_index: usize,
    pub peak_value: f64,
    /// Mean of the values below the median.
    pub noise_floor: f64,
}

impl PdpProfile {
    pub fn from_values(values: Vec<f64>, root_used: usize) -> Self {
        let (peak_index, peak_value) = values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        let noise_floor = noise_floor(&values);
        Self { values, root_used, peak_index, peak_value: peak_value.max(0.0), noise_floor }
    }
}

/// Mean of the values strictly below the median (0 for an empty slice).
pub fn noise_floor(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let below: Vec<f64> = sorted.into_iter().take_while(|v| *v < median).collect();
    if below.is_empty() {
        0.0
    } else {
        below.iter().sum::<f64>() / below.len() as f64
    }
}

/// PDP from the unitary spectra of the received sequence and the probe.
pub(crate) fn pdp_values(modem: &Modem, y_spec: &[Complex64], probe_spec: &[Complex64]) -> Vec<f64> {
    let n = modem.num.n_zc as f64;
    let mut buf: Vec<Complex64> = y_spec.iter().zip(probe_spec).map(|(y, p)| y * p.conj()).collect();
    modem.zc_inverse_raw(&mut buf);
    buf.iter().map(|c| (c / n).norm_sqr()).collect()
}

/// PDP of a length-N sequence against a ZC probe, all lags.
pub fn pdp(seq: &[Complex64], probe: ZcSpec) -> Result<PdpProfile, DetectorError> {
    if seq.len() != probe.n_zc {
        return Err(WaveformError::LengthMismatch { expected: probe.n_zc, got: seq.len() }.into());
    }
    let modem = Modem::new(Numerology { scs: 1.0, n_zc: probe.n_zc, n_idft: 2 * probe.n_zc.next_power_of_two() })?;
    let x = zc_sequence(probe)?;
    Ok(PdpProfile::from_values(pdp_values(&modem, &modem.zc_dft(seq), &modem.zc_dft(&x)), probe.root))
}

/// Which subsequences module 2 examines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsequenceSearch {
    /// Every subsequence 1..=J.
    All,
    /// b_u..=b_u + g_l, the only positions reachable for arrivals within the
    /// configured spread.
    Window,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub numerology: Numerology,
    /// Preamble layout; roots and b_u are overridden per UE when probing.
    pub format: PreambleFormat,
    /// Module-1 peak threshold in normalised PDP units.
    pub threshold: f64,
    /// Module-2 peak threshold in normalised PDP units.
    pub ki_threshold: f64,
    pub false_alarm_target: f64,
    /// Symbols spanned by the maximal arrival-time difference.
    pub g_l: usize,
    /// Half-width (in PDP bins) of the module-2 lag window around zero.
    pub lag_tolerance: usize,
    /// Peaks must also exceed this multiple of the profile noise floor.
    pub noise_floor_factor: f64,
    pub search: SubsequenceSearch,
    /// Cap on module-1 candidates kept for module 2, strongest first.
    pub max_candidates: usize,
}

impl DetectorConfig {
    pub fn new(numerology: Numerology, format: PreambleFormat, g_l: usize) -> Self {
        Self {
            numerology,
            format,
            threshold: 0.0,
            ki_threshold: 0.0,
            false_alarm_target: 0.01,
            g_l,
            lag_tolerance: 3,
            noise_floor_factor: 4.0,
            search: SubsequenceSearch::All,
            max_candidates: 256,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.numerology.validate()?;
        self.format.validate(&self.numerology)?;
        if !(self.false_alarm_target > 0.0 && self.false_alarm_target <= 1.0) {
            return Err(DetectorError::Config("false alarm target must lie in (0, 1]".into()));
        }
        if self.g_l == 0 {
            return Err(DetectorError::Config("g_l must be at least 1".into()));
        }
        if 2 * self.lag_tolerance + 1 > self.numerology.n_zc {
            return Err(DetectorError::Config("lag window wider than the sequence".into()));
        }
        if self.max_candidates == 0 {
            return Err(DetectorError::Config("max_candidates must be at least 1".into()));
        }
        Ok(())
    }

    /// J = z_l + ⌈t_gt/t_zc⌉.
    pub fn subsequence_count(&self) -> usize {
        self.format.subsequence_count(&self.numerology)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissReason {
    None,
    NotDetected,
    TaErrorExceedsCp,
}

impl MissReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            MissReason::None => "none",
            MissReason::NotDetected => "not_detected",
            MissReason::TaErrorExceedsCp => "ta_error_exceeds_cp",
        }
    }
}

/// PUSCH cyclic-prefix length at 30 kHz / 4096 points, the miss tolerance.
pub const CP_SAMPLES: i64 = 288;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub detected: bool,
    /// Fractional part of the estimate, in [0, t_zc).
    pub k_f_hat: f64,
    pub k_i_hat: i64,
    pub j_star: usize,
    /// Estimated arrival offset in samples (K_i·n_idft + K_f/T_s).
    pub ta_hat_samples: i64,
    /// Estimated arrival offset in seconds.
    pub ta_hat: f64,
    /// Module-1 peak index that produced the estimate.
    pub m_star: usize,
    /// Signed estimate minus truth, seconds, once scored.
    pub ta_error: Option<f64>,
    pub err_samples: Option<i64>,
    pub miss_reason: MissReason,
}

impl DetectionResult {
    pub fn missed() -> Self {
        Self {
            detected: false,
            k_f_hat: 0.0,
            k_i_hat: 0,
            j_star: 0,
            ta_hat_samples: 0,
            ta_hat: 0.0,
            m_star: 0,
            ta_error: None,
            err_samples: None,
            miss_reason: MissReason::NotDetected,
        }
    }

    /// Compares against the true arrival offset; a miss is no detection or
    /// an error beyond `cp_samples`.
    pub fn score(&mut self, true_offset_samples: i64, t_s: f64, cp_samples: i64) {
        if !self.detected {
            self.miss_reason = MissReason::NotDetected;
            return;
        }
        let err = self.ta_hat_samples - true_offset_samples;
        self.err_samples = Some(err);
        self.ta_error = Some(err as f64 * t_s);
        self.miss_reason = if err.abs() > cp_samples { MissReason::TaErrorExceedsCp } else { MissReason::None };
    }

    pub fn is_miss(&self) -> bool {
        self.miss_reason != MissReason::None
    }
}

/// Module-1 peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfEstimate {
    pub m_star: usize,
    /// ⌈m*·n_idft/n_zc⌉.
    pub k_f_samples: usize,
    pub k_f: f64,
}

/// Module-2 winner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KiEstimate {
    pub j_star: usize,
    /// j* − b_u.
    pub k_i: i64,
    /// Lag (bins) of the winning peak relative to the window start.
    pub lag: i64,
    pub peak: f64,
}

/// Module-2 reference for one UE.
#[derive(Debug, Clone)]
pub struct Probe {
    pub b_u: usize,
    /// Pick the earliest comparable subsequence rather than the strongest.
    pub first_arrival: bool,
    /// Unitary spectrum of the reference sequence.
    pub spectrum: Vec<Complex64>,
    /// conj(P(g)) e^{j2πgℓ/N}/N for ℓ = −W..=W.
    taps: Vec<Vec<Complex64>>,
}

/// Demapped spectra of the subsequences following one candidate offset.
#[derive(Debug, Clone)]
pub struct WindowBank {
    /// Module-1 peak index of the candidate (None when built from an offset).
    pub m_c: Option<usize>,
    pub offset: usize,
    /// Index 0 is subsequence j = 1.
    pub spectra: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    modem: Modem,
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        let modem = Modem::new(cfg.numerology)?;
        Ok(Self { cfg, modem })
    }

    pub fn modem(&self) -> &Modem {
        &self.modem
    }

    /// DFT, demap and unitary IDFT of one subsequence.
    pub fn demodulate(&self, sub: &Subsequence) -> Result<Vec<Complex64>, DetectorError> {
        Ok(self.modem.demodulate(&sub.samples)?)
    }

    /// PDP against an arbitrary root, through the detector's FFT plans.
    pub fn pdp(&self, seq: &[Complex64], root: usize) -> Result<PdpProfile, DetectorError> {
        let x = zc_sequence(ZcSpec { root, n_zc: self.cfg.numerology.n_zc })?;
        Ok(PdpProfile::from_values(pdp_values(&self.modem, &self.modem.zc_dft(seq), &self.modem.zc_dft(&x)), root))
    }

    /// Sum of the J subsequences starting at the slot origin (zero-padded).
    pub fn accumulate(&self, rx: &TimeDomainSignal) -> Vec<Complex64> {
        let n = self.cfg.numerology.n_idft;
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let data = &rx.samples[rx.origin.min(rx.samples.len())..];
        for chunk in data.chunks(n).take(self.cfg.subsequence_count()) {
            for (a, v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        acc
    }

    /// Module-1 profile of the accumulated signal against `probe_root`.
    pub fn module_one_profile(&self, rx: &TimeDomainSignal, probe_root: usize) -> Result<PdpProfile, DetectorError> {
        let spec = self.modem.demap(&self.accumulate(rx));
        let x = zc_sequence(ZcSpec { root: probe_root, n_zc: self.cfg.numerology.n_zc })?;
        Ok(PdpProfile::from_values(pdp_values(&self.modem, &spec, &self.modem.zc_dft(&x)), probe_root))
    }

    fn detection_level(&self, threshold: f64, profile: &PdpProfile) -> f64 {
        threshold.max(self.cfg.noise_floor_factor * profile.noise_floor)
    }

    fn kf_from_peak(&self, m: usize) -> KfEstimate {
        let num = &self.cfg.numerology;
        let k_f_samples = ceil_div((m * num.n_idft) as i64, num.n_zc as i64) as usize;
        KfEstimate { m_star: m, k_f_samples, k_f: k_f_samples as f64 * num.t_s() }
    }

    /// Module 1: strongest PDP peak above the detection level.
    pub fn estimate_kf(
        &self,
        rx: &TimeDomainSignal,
        probe_root: usize,
    ) -> Result<(Option<KfEstimate>, PdpProfile), DetectorError> {
        let profile = self.module_one_profile(rx, probe_root)?;
        let level = self.detection_level(self.cfg.threshold, &profile);
        let est = (profile.peak_value > level).then(|| self.kf_from_peak(profile.peak_index));
        Ok((est, profile))
    }

    /// Local maxima of the module-1 profile above the detection level,
    /// strongest first.
    pub fn kf_candidates(&self, profile: &PdpProfile) -> Vec<usize> {
        let level = self.detection_level(self.cfg.threshold, profile);
        let v = &profile.values;
        let n = v.len();
        let mut c: Vec<usize> =
            (0..n).filter(|&m| v[m] > level && v[m] >= v[(m + n - 1) % n] && v[m] >= v[(m + 1) % n]).collect();
        c.sort_by(|a, b| v[*b].total_cmp(&v[*a]).then(a.cmp(b)));
        c.truncate(self.cfg.max_candidates);
        c
    }

    /// Module-2 reference for a UE with format `fmt`.
    pub fn probe(&self, fmt: &PreambleFormat) -> Result<Probe, DetectorError> {
        let n_zc = self.cfg.numerology.n_zc;
        let reference = match fmt.option {
            FormatOption::Opt1 => zc_sequence(ZcSpec { root: fmt.root_a, n_zc })?,
            FormatOption::Opt2 => mseq_scramble(&zc_sequence(ZcSpec { root: fmt.root_a, n_zc })?, fmt.scramble_seed),
            FormatOption::Opt3 => zc_sequence(ZcSpec { root: fmt.root_b, n_zc })?,
        };
        let spectrum = self.modem.zc_dft(&reference);
        let w = self.cfg.lag_tolerance as i64;
        let n = n_zc as f64;
        let taps = (-w..=w)
            .map(|l| {
                spectrum
                    .iter()
                    .enumerate()
                    .map(|(g, p)| {
                        let ph = std::f64::consts::TAU * ((g as i64 * l).rem_euclid(n_zc as i64)) as f64 / n;
                        p.conj() * Complex64::from_polar(1.0 / n, ph)
                    })
                    .collect()
            })
            .collect();
        Ok(Probe { b_u: fmt.effective_b(), first_arrival: fmt.option == FormatOption::Opt1, spectrum, taps })
    }

    /// Demapped subsequences after dropping `offset` samples.
    pub fn window_bank(&self, rx: &TimeDomainSignal, offset: usize, m_c: Option<usize>) -> WindowBank {
        let n = self.cfg.numerology.n_idft;
        let data = &rx.samples[rx.origin.min(rx.samples.len())..];
        let avail = data.len().saturating_sub(offset) / n;
        let count = avail.min(self.cfg.subsequence_count());
        let spectra = (0..count).map(|j| self.modem.demap(&data[offset + j * n..offset + (j + 1) * n])).collect();
        WindowBank { m_c, offset, spectra }
    }

    fn search_range(&self, b_u: usize, available: usize) -> std::ops::RangeInclusive<usize> {
        match self.cfg.search {
            SubsequenceSearch::All => 1..=available,
            SubsequenceSearch::Window => b_u.max(1)..=(b_u + self.cfg.g_l).min(available),
        }
    }

    /// Strongest lag-window peak per (bank, subsequence) above the module-2
    /// threshold, unordered.
    fn ranked_hits(&self, banks: &[&WindowBank], probe: &Probe) -> Vec<Hit> {
        let w = self.cfg.lag_tolerance as i64;
        let mut hits = Vec::new();
        for (bi, bank) in banks.iter().enumerate() {
            for j in self.search_range(probe.b_u, bank.spectra.len()) {
                let spec = &bank.spectra[j - 1];
                let mut best = (0i64, f64::NEG_INFINITY);
                for (ti, taps) in probe.taps.iter().enumerate() {
                    let v = dot(spec, taps).norm_sqr();
                    if v > best.1 {
                        best = (ti as i64 - w, v);
                    }
                }
                if best.1 > self.cfg.ki_threshold {
                    hits.push((bi, j, best.0, best.1));
                }
            }
        }
        hits
    }

    /// [`Self::ranked_hits`] for many probes at once, as three real matrix
    /// products over (windows × bins) and (bins × lags·probes).
    fn batch_hits(&self, banks: &[&WindowBank], probes: &[Probe]) -> Vec<Vec<Hit>> {
        let n = self.cfg.numerology.n_zc;
        let nl = 2 * self.cfg.lag_tolerance + 1;
        let w = self.cfg.lag_tolerance as i64;
        let mut rows = Vec::new();
        for (bi, bank) in banks.iter().enumerate() {
            let mut used = vec![false; bank.spectra.len() + 1];
            for p in probes {
                for j in self.search_range(p.b_u, bank.spectra.len()) {
                    used[j] = true;
                }
            }
            rows.extend((1..used.len()).filter(|&j| used[j]).map(|j| (bi, j)));
        }
        if rows.is_empty() {
            return vec![Vec::new(); probes.len()];
        }
        let ar = DMatrix::from_fn(rows.len(), n, |r, g| banks[rows[r].0].spectra[rows[r].1 - 1][g].re);
        let ai = DMatrix::from_fn(rows.len(), n, |r, g| banks[rows[r].0].spectra[rows[r].1 - 1][g].im);
        let tr = DMatrix::from_fn(n, nl * probes.len(), |g, c| probes[c / nl].taps[c % nl][g].re);
        let ti = DMatrix::from_fn(n, nl * probes.len(), |g, c| probes[c / nl].taps[c % nl][g].im);
        let p1 = &ar * &tr;
        let p2 = &ai * &ti;
        let p3 = (ar + ai) * (tr + ti);
        probes
            .iter()
            .enumerate()
            .map(|(u, p)| {
                let mut hits = Vec::new();
                for (r, &(bi, j)) in rows.iter().enumerate() {
                    if !self.search_range(p.b_u, banks[bi].spectra.len()).contains(&j) {
                        continue;
                    }
                    let mut best = (0i64, f64::NEG_INFINITY);
                    for t in 0..nl {
                        let c = u * nl + t;
                        let (x, y) = (p1[(r, c)], p2[(r, c)]);
                        let (re, im) = (x - y, p3[(r, c)] - x - y);
                        let v = re * re + im * im;
                        if v > best.1 {
                            best = (t as i64 - w, v);
                        }
                    }
                    if best.1 > self.cfg.ki_threshold {
                        hits.push((bi, j, best.0, best.1));
                    }
                }
                hits
            })
            .collect()
    }

    fn verified(&self, banks: &[&WindowBank], probe: &Probe, hit: Hit) -> Option<(usize, KiEstimate)> {
        let n = self.cfg.numerology.n_zc;
        let w = self.cfg.lag_tolerance;
        let (bi, j, lag, value) = hit;
        let profile = PdpProfile::from_values(pdp_values(&self.modem, &banks[bi].spectra[j - 1], &probe.spectrum), 0);
        let inside = profile.peak_index <= w || profile.peak_index >= n - w;
        let ki = KiEstimate { j_star: j, k_i: j as i64 - probe.b_u as i64, lag, peak: value };
        // Arrivals are never early; a total below what the lag window can
        // explain is a lock onto some other preamble.
        let plausible = self.raw_total(banks[bi], &ki) >= -self.lag_slack();
        (inside && plausible && value >= self.detection_level(self.cfg.ki_threshold, &profile)).then_some((bi, ki))
    }

    fn raw_total(&self, bank: &WindowBank, ki: &KiEstimate) -> i64 {
        let num = &self.cfg.numerology;
        let (n_idft, n_zc) = (num.n_idft as i64, num.n_zc as i64);
        let frac = match bank.m_c {
            Some(m) => ceil_div((m as i64 + ki.lag) * n_idft, n_zc),
            None => bank.offset as i64 + ceil_div(ki.lag * n_idft, n_zc),
        };
        ki.k_i * n_idft + frac
    }

    /// Samples spanned by the lag window plus one bin.
    fn lag_slack(&self) -> i64 {
        let num = &self.cfg.numerology;
        ceil_div((self.cfg.lag_tolerance as i64 + 1) * num.n_idft as i64, num.n_zc as i64)
    }

    /// Module 2 over candidate banks: the best subsequence whose full PDP
    /// peaks inside the lag window above the detection level.
    ///
    /// Single-root preambles repeat the same symbol, so there the earliest
    /// comparable subsequence of the strongest candidate wins instead.
    pub fn best_subsequence(&self, banks: &[&WindowBank], probe: &Probe) -> Option<(usize, KiEstimate)> {
        self.select(banks, probe, self.ranked_hits(banks, probe))
    }

    fn select(&self, banks: &[&WindowBank], probe: &Probe, mut hits: Vec<Hit>) -> Option<(usize, KiEstimate)> {
        hits.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        if !probe.first_arrival {
            return hits.into_iter().take(VERIFY_LIMIT).find_map(|h| self.verified(banks, probe, h));
        }
        let top = *hits.first()?;
        let mut early: Vec<_> =
            hits.into_iter().filter(|h| h.0 == top.0 && h.3 >= FIRST_ARRIVAL_FRACTION * top.3).collect();
        early.sort_by_key(|h| h.1);
        early.into_iter().find_map(|h| self.verified(banks, probe, h))
    }

    /// Module 2 after dropping `k_f_samples`: (K_i, j*) from the best window.
    pub fn estimate_ki(
        &self,
        rx: &TimeDomainSignal,
        k_f_samples: usize,
        fmt: &PreambleFormat,
    ) -> Result<Option<KiEstimate>, DetectorError> {
        let probe = self.probe(fmt)?;
        let bank = self.window_bank(rx, k_f_samples, None);
        Ok(self.best_subsequence(&[&bank], &probe).map(|(_, e)| e))
    }

    /// Candidate banks for every module-1 peak of `profile`.
    pub fn candidate_banks(&self, rx: &TimeDomainSignal, profile: &PdpProfile) -> Vec<WindowBank> {
        self.kf_candidates(profile)
            .into_iter()
            .map(|m| self.window_bank(rx, self.kf_from_peak(m).k_f_samples, Some(m)))
            .collect()
    }

    /// Turns a module-2 winner into an arrival estimate, refining K_f by the lag.
    pub fn assemble(&self, bank: &WindowBank, ki: &KiEstimate) -> DetectionResult {
        let num = &self.cfg.numerology;
        let n_idft = num.n_idft as i64;
        let total = self.raw_total(bank, ki).max(0);
        let k_i = total.div_euclid(n_idft);
        let k_f_samples = total.rem_euclid(n_idft);
        let k_f = k_f_samples as f64 * num.t_s();
        DetectionResult {
            detected: true,
            k_f_hat: k_f,
            k_i_hat: k_i,
            j_star: ki.j_star,
            ta_hat_samples: total,
            ta_hat: assemble_ta(0.0, k_i, k_f, num),
            m_star: bank.m_c.unwrap_or(0),
            ta_error: None,
            err_samples: None,
            miss_reason: MissReason::None,
        }
    }

    /// Per-UE detection over one received slot. Module 1 runs once per
    /// distinct r_a among `formats` and module 2 scores all UEs sharing a root
    /// in one batch.
    pub fn detect_many(
        &self,
        rx: &TimeDomainSignal,
        formats: &[PreambleFormat],
    ) -> Result<Vec<DetectionResult>, DetectorError> {
        let n_zc = self.cfg.numerology.n_zc;
        let acc = self.modem.demap(&self.accumulate(rx));
        let mut roots: Vec<usize> = formats.iter().map(|f| f.root_a).collect();
        roots.sort_unstable();
        roots.dedup();
        let mut out = vec![DetectionResult::missed(); formats.len()];
        for root in roots {
            let x = zc_sequence(ZcSpec { root, n_zc })?;
            let profile = PdpProfile::from_values(pdp_values(&self.modem, &acc, &self.modem.zc_dft(&x)), root);
            let banks: Vec<WindowBank> = self.candidate_banks(rx, &profile);
            let refs: Vec<&WindowBank> = banks.iter().collect();
            let members: Vec<usize> = (0..formats.len()).filter(|&i| formats[i].root_a == root).collect();
            let probes = members.iter().map(|&i| self.probe(&formats[i])).collect::<Result<Vec<_>, _>>()?;
            let hits = self.batch_hits(&refs, &probes);
            for ((&i, probe), h) in members.iter().zip(&probes).zip(hits) {
                if let Some((bi, ki)) = self.select(&refs, probe, h) {
                    out[i] = self.assemble(refs[bi], &ki);
                }
            }
        }
        Ok(out)
    }

    /// Single-UE detection with the UE's own roots.
    pub fn detect(&self, rx: &TimeDomainSignal, fmt: &PreambleFormat) -> Result<DetectionResult, DetectorError> {
        Ok(self.detect_many(rx, std::slice::from_ref(fmt))?.remove(0))
    }

    /// Module-1 statistic of one noise-only slot: the profile peak if it
    /// clears the noise-floor rule, otherwise 0.
    ///
    /// The J-fold sum of white noise demaps to i.i.d. complex Gaussian bins of
    /// variance J·σ²·n_zc/n_idft, which is drawn directly.
    pub fn module_one_noise_statistic<R: Rng + ?Sized>(&self, noise_variance: f64, rng: &mut R) -> f64 {
        let num = &self.cfg.numerology;
        let var = self.cfg.subsequence_count() as f64 * noise_variance * num.n_zc as f64 / num.n_idft as f64;
        let bins = gaussian_bins(num.n_zc, var, rng);
        let x = zc_sequence(ZcSpec { root: self.cfg.format.root_a, n_zc: num.n_zc }).expect("validated root");
        let profile =
            PdpProfile::from_values(pdp_values(&self.modem, &bins, &self.modem.zc_dft(&x)), self.cfg.format.root_a);
        if profile.peak_value > self.cfg.noise_floor_factor * profile.noise_floor {
            profile.peak_value
        } else {
            0.0
        }
    }

    /// Module-2 statistic of one noise-only slot: the best lag-window peak
    /// over the searched subsequences among windows whose global maximum
    /// lies inside the lag window.
    pub fn module_two_noise_statistic<R: Rng + ?Sized>(&self, noise_variance: f64, rng: &mut R) -> f64 {
        let num = &self.cfg.numerology;
        let var = noise_variance * num.n_zc as f64 / num.n_idft as f64;
        let probe = self.probe(&self.cfg.format).expect("validated format");
        let j = self.subsequence_count_searched(probe.b_u);
        let (n, w) = (num.n_zc, self.cfg.lag_tolerance);
        let mut best: f64 = 0.0;
        for _ in 0..j {
            let bins = gaussian_bins(n, var, rng);
            let p = PdpProfile::from_values(pdp_values(&self.modem, &bins, &probe.spectrum), 0);
            let inside = p.peak_index <= w || p.peak_index >= n - w;
            if inside && p.peak_value > self.cfg.noise_floor_factor * p.noise_floor {
                best = best.max(p.peak_value);
            }
        }
        best
    }

    fn subsequence_count_searched(&self, b_u: usize) -> usize {
        let j = self.cfg.subsequence_count();
        match self.cfg.search {
            SubsequenceSearch::All => j,
            SubsequenceSearch::Window => self.search_range(b_u, j).count(),
        }
    }
}

/// (bank, subsequence, lag, value).
type Hit = (usize, usize, i64, f64);

/// Hits verified with a full PDP before module 2 gives up on a UE.
const VERIFY_LIMIT: usize = 16;

/// Fraction of the strongest peak a single-root subsequence needs to count
/// as the first arrival.
const FIRST_ARRIVAL_FRACTION: f64 = 0.25;

/// Σ a·b with independent lanes so the loop vectorises.
fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    const L: usize = 4;
    let (mut re, mut im) = ([0.0f64; L], [0.0f64; L]);
    let (ac, bc) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..L {
            re[k] += x[k].re * y[k].re - x[k].im * y[k].im;
            im[k] += x[k].re * y[k].im + x[k].im * y[k].re;
        }
    }
    let mut sum = Complex64::new(re.iter().sum(), im.iter().sum());
    for (x, y) in ar.iter().zip(br) {
        sum += x * y;
    }
    sum
}

fn gaussian_bins<R: Rng + ?Sized>(n: usize, variance: f64, rng: &mut R) -> Vec<Complex64> {
    let s = (variance / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * s, im * s)
        })
        .collect()
}

/// T = t_pre + K_i·T_zc + K_f.
pub fn assemble_ta(t_pre: f64, k_i: i64, k_f: f64, num: &Numerology) -> f64 {
    t_pre + k_i as f64 * num.t_zc() + k_f
}

/// Empirical (1 − target) quantile of noise-only statistics: a fraction
/// `target` of the samples lies strictly above the returned level.
pub fn quantile_threshold(mut stats: Vec<f64>, false_alarm_target: f64) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.sort_by(f64::total_cmp);
    let n = stats.len();
    let keep_above = (false_alarm_target * n as f64).round() as usize;
    if keep_above >= n {
        return stats[0];
    }
    stats[n - 1 - keep_above]
}

/// Module-1 threshold at the configured false-alarm target.
pub fn calibrate_threshold<R: Rng + ?Sized>(
    cfg: &DetectorConfig,
    noise_variance: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64, DetectorError> {
    let det = Detector::new(cfg.clone())?;
    let stats = (0..trials).map(|_| det.module_one_noise_statistic(noise_variance, rng)).collect();
    Ok(quantile_threshold(stats, cfg.false_alarm_target))
}

/// Module-2 threshold at the configured false-alarm target.
pub fn calibrate_ki_threshold<R: Rng + ?Sized>(
    cfg: &DetectorConfig,
    noise_variance: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64, DetectorError> {
    let det = Detector::new(cfg.clone())?;
    let stats = (0..trials).map(|_| det.module_two_noise_statistic(noise_variance, rng)).collect();
    Ok(quantile_threshold(stats, cfg.false_alarm_target))
}
