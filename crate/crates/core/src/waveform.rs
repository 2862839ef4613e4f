//! Zadoff-Chu preambles: sequence generation, OFDM-style modulation, format
//! assembly and the AWGN/CFO/delay channel.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("invalid numerology: {0}")]
    Numerology(String),
    #[error("root {root} is not in [1, {}]", .n_zc - 1)]
    InvalidRoot { root: usize, n_zc: usize },
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid preamble format: {0}")]
    Format(String),
    #[error("arrival offset {offset} does not fit a slot of {slot} samples")]
    OffsetTooLarge { offset: usize, slot: usize },
    #[error("signals are not aligned: {0}")]
    Misaligned(String),
}

/// PRACH numerology. The n_zc DFT bins are mapped to subcarriers 1..=n_zc
/// of the n_idft-point grid (DC unused) on both transmit and receive sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Numerology {
    pub scs: f64,
    pub n_zc: usize,
    pub n_idft: usize,
}

impl Default for Numerology {
    fn default() -> Self {
        Self { scs: 30e3, n_zc: 571, n_idft: 4096 }
    }
}

impl Numerology {
    pub fn t_s(&self) -> f64 {
        1.0 / (self.scs * self.n_idft as f64)
    }

    pub fn t_zc(&self) -> f64 {
        1.0 / self.scs
    }

    pub fn validate(&self) -> Result<(), WaveformError> {
        if !(self.scs > 0.0) {
            return Err(WaveformError::Numerology("scs must be positive".into()));
        }
        if !is_prime(self.n_zc) {
            return Err(WaveformError::Numerology(format!("n_zc = {} is not prime", self.n_zc)));
        }
        if self.n_idft <= self.n_zc {
            return Err(WaveformError::Numerology("n_idft must exceed n_zc".into()));
        }
        Ok(())
    }

    /// Whole symbols covering `duration`, rounded up.
    ///
    /// Durations are usually quoted to three significant figures
    /// (0.267 ms for 8 symbols at 30 kHz), so values within 2% of a symbol
    /// boundary snap to it.
    pub fn symbols_ceil(&self, duration: f64) -> usize {
        let x = duration * self.scs;
        let r = x.round();
        if (x - r).abs() < SYMBOL_SNAP {
            r as usize
        } else {
            x.ceil() as usize
        }
    }

    /// Whole symbols fitting in `duration`, rounded down, with the same snapping.
    pub fn symbols_floor(&self, duration: f64) -> usize {
        let x = duration * self.scs;
        let r = x.round();
        if (x - r).abs() < SYMBOL_SNAP {
            r as usize
        } else {
            x.floor() as usize
        }
    }
}

const SYMBOL_SNAP: f64 = 0.02;

pub fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ZcSpec {
    pub root: usize,
    pub n_zc: usize,
}

/// x(n, r) = exp(−jπ r n(n+1)/N).
pub fn zc_sequence(spec: ZcSpec) -> Result<Vec<Complex64>, WaveformError> {
    let n_zc = spec.n_zc;
    if spec.root == 0 || spec.root >= n_zc || !is_prime(n_zc) {
        return Err(WaveformError::InvalidRoot { root: spec.root, n_zc });
    }
    // Reduce r n(n+1) modulo 2N in integers so the phase stays exact.
    let m = 2 * n_zc as u64;
    Ok((0..n_zc as u64)
        .map(|n| {
            let e = (spec.root as u64 % m) * ((n * (n + 1)) % m) % m;
            Complex64::from_polar(1.0, -std::f64::consts::PI * e as f64 / n_zc as f64)
        })
        .collect())
}

/// ±1 maximal-length sequence from x⁹ + x⁵ + 1, cyclically extended to `len`.
///
/// The register starts at all-ones XOR the low nine bits of `seed`; an
/// all-zero start is replaced by a single set bit.
pub fn mseq(len: usize, seed: u32) -> Vec<f64> {
    let mut reg = (0x1FF ^ (seed & 0x1FF)) as u16;
    if reg == 0 {
        reg = 1;
    }
    // a[n + 9] = a[n + 5] ^ a[n]
    let mut a: Vec<u8> = (0..9).map(|i| ((reg >> i) & 1) as u8).collect();
    while a.len() < 511 {
        let k = a.len() - 9;
        a.push(a[k + 5] ^ a[k]);
    }
    (0..len).map(|i| if a[i % 511] == 0 { 1.0 } else { -1.0 }).collect()
}

/// Element-wise multiply by the ±1 M-sequence; an involution.
pub fn mseq_scramble(seq: &[Complex64], seed: u32) -> Vec<Complex64> {
    seq.iter().zip(mseq(seq.len(), seed)).map(|(x, m)| x * m).collect()
}

/// Cached FFT plans for one numerology.
#[derive(Clone)]
pub struct Modem {
    pub num: Numerology,
    zc_fwd: Arc<dyn Fft<f64>>,
    zc_inv: Arc<dyn Fft<f64>>,
    idft_fwd: Arc<dyn Fft<f64>>,
    idft_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Modem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Modem").field("num", &self.num).finish()
    }
}

impl Modem {
    pub fn new(num: Numerology) -> Result<Self, WaveformError> {
        num.validate()?;
        let mut p = FftPlanner::new();
        Ok(Self {
            num,
            zc_fwd: p.plan_fft_forward(num.n_zc),
            zc_inv: p.plan_fft_inverse(num.n_zc),
            idft_fwd: p.plan_fft_forward(num.n_idft),
            idft_inv: p.plan_fft_inverse(num.n_idft),
        })
    }

    /// Unitary n_zc-point DFT.
    pub fn zc_dft(&self, seq: &[Complex64]) -> Vec<Complex64> {
        let mut buf = seq.to_vec();
        self.zc_fwd.process(&mut buf);
        let s = 1.0 / (self.num.n_zc as f64).sqrt();
        buf.iter_mut().for_each(|v| *v *= s);
        buf
    }

    /// Unitary n_zc-point inverse DFT.
    pub fn zc_idft(&self, spec: &[Complex64]) -> Vec<Complex64> {
        let mut buf = spec.to_vec();
        self.zc_inv.process(&mut buf);
        let s = 1.0 / (self.num.n_zc as f64).sqrt();
        buf.iter_mut().for_each(|v| *v *= s);
        buf
    }

    /// Unnormalised inverse n_zc-point DFT in place (Σ_g X(g) e^{+j2πgn/N}).
    pub(crate) fn zc_inverse_raw(&self, buf: &mut [Complex64]) {
        self.zc_inv.process(buf);
    }

    /// Modulates a length-n_zc sequence into one n_idft-sample symbol.
    ///
    /// A unit-modulus input yields unit mean power per sample at amplitude 1.
    pub fn modulate(&self, seq: &[Complex64], amplitude: f64) -> Result<Vec<Complex64>, WaveformError> {
        let n_zc = self.num.n_zc;
        if seq.len() != n_zc {
            return Err(WaveformError::LengthMismatch { expected: n_zc, got: seq.len() });
        }
        let x = self.zc_dft(seq);
        self.modulate_spectrum(&x, amplitude)
    }

    /// Modulates an already-transformed (unitary DFT) sequence.
    pub fn modulate_spectrum(&self, spec: &[Complex64], amplitude: f64) -> Result<Vec<Complex64>, WaveformError> {
        let (n_zc, n_idft) = (self.num.n_zc, self.num.n_idft);
        if spec.len() != n_zc {
            return Err(WaveformError::LengthMismatch { expected: n_zc, got: spec.len() });
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); n_idft];
        buf[1..=n_zc].copy_from_slice(spec);
        self.idft_inv.process(&mut buf);
        let s = amplitude / (n_zc as f64).sqrt();
        buf.iter_mut().for_each(|v| *v *= s);
        Ok(buf)
    }

    /// The n_zc mapped bins of one received symbol, scaled so that
    /// `demap(modulate(x))` is the unitary DFT of x.
    pub fn demap(&self, samples: &[Complex64]) -> Vec<Complex64> {
        let mut buf = samples.to_vec();
        self.idft_fwd.process(&mut buf);
        let s = (self.num.n_zc as f64).sqrt() / self.num.n_idft as f64;
        buf[1..=self.num.n_zc].iter().map(|v| v * s).collect()
    }

    /// DFT, demap, unitary n_zc-point IDFT.
    pub fn demodulate(&self, samples: &[Complex64]) -> Result<Vec<Complex64>, WaveformError> {
        if samples.len() != self.num.n_idft {
            return Err(WaveformError::LengthMismatch { expected: self.num.n_idft, got: samples.len() });
        }
        Ok(self.zc_idft(&self.demap(samples)))
    }
}

/// One-shot modulation; builds FFT plans on every call.
pub fn ofdm_modulate(seq: &[Complex64], num: &Numerology, amplitude: f64) -> Result<Vec<Complex64>, WaveformError> {
    Modem::new(*num)?.modulate(seq, amplitude)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormatOption {
    /// One root repeated; the first symbol carries the amplitude boost.
    Opt1,
    /// Root r_a with the position-b_u symbol scrambled by an M-sequence.
    Opt2,
    /// Root r_a with root r_b at position b_u.
    Opt3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreambleFormat {
    pub option: FormatOption,
    pub z_l: usize,
    pub root_a: usize,
    pub root_b: usize,
    /// 1-based position of the distinguished symbol.
    pub b_u: usize,
    pub amplitude_ratio: f64,
    pub zero_guard: bool,
    pub t_cp: f64,
    pub t_gt: f64,
    pub scramble_seed: u32,
}

impl Default for PreambleFormat {
    /// Opt3, 22 symbols, distinguished symbol last, 0.267 ms guard.
    fn default() -> Self {
        Self {
            option: FormatOption::Opt3,
            z_l: 22,
            root_a: 1,
            root_b: 2,
            b_u: 22,
            amplitude_ratio: 1.0,
            zero_guard: false,
            t_cp: 0.0,
            t_gt: 0.267e-3,
            scramble_seed: 1,
        }
    }
}

/// Content of one symbol slot of a preamble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymbolKind {
    Zero,
    RootA(f64),
    RootB(f64),
    ScrambledA(f64),
}

impl PreambleFormat {
    /// Distinguished-symbol position as seen by the detector (1 for Opt1).
    pub fn effective_b(&self) -> usize {
        match self.option {
            FormatOption::Opt1 => 1,
            _ => self.b_u,
        }
    }

    pub fn validate(&self, num: &Numerology) -> Result<(), WaveformError> {
        let bad = |m: String| Err(WaveformError::Format(m));
        if self.z_l == 0 {
            return bad("z_l must be at least 1".into());
        }
        if self.t_cp != 0.0 {
            return bad("cyclic prefix must be zero".into());
        }
        let t_p = self.z_l as f64 * num.t_zc();
        if !(self.t_gt >= 0.0 && self.t_gt < t_p) {
            return bad(format!("guard time {} must lie in [0, {t_p})", self.t_gt));
        }
        if !(self.amplitude_ratio >= 1.0) {
            return bad("amplitude ratio must be at least 1".into());
        }
        for r in [self.root_a, self.root_b] {
            if r == 0 || r >= num.n_zc {
                return Err(WaveformError::InvalidRoot { root: r, n_zc: num.n_zc });
            }
        }
        let b = self.effective_b();
        if b == 0 || b > self.z_l {
            return bad(format!("b_u = {b} outside [1, {}]", self.z_l));
        }
        if self.zero_guard && !(b >= 2 && b < self.z_l) {
            return bad(format!("zero guard needs 2 <= b_u <= z_l - 1, got {b}"));
        }
        if self.option == FormatOption::Opt3 && self.root_a == self.root_b {
            return bad("Opt3 needs distinct roots".into());
        }
        Ok(())
    }

    /// Per-position symbol content, index 0 is position 1.
    pub fn symbol_plan(&self) -> Vec<SymbolKind> {
        let b = self.effective_b();
        let k = self.amplitude_ratio;
        (1..=self.z_l)
            .map(|i| {
                if i == b {
                    match self.option {
                        FormatOption::Opt1 => SymbolKind::RootA(k),
                        FormatOption::Opt2 => SymbolKind::ScrambledA(k),
                        FormatOption::Opt3 => SymbolKind::RootB(k),
                    }
                } else if self.zero_guard && (i + 1 == b || i == b + 1) {
                    SymbolKind::Zero
                } else {
                    SymbolKind::RootA(1.0)
                }
            })
            .collect()
    }

    /// Subsequence count J = z_l + ⌈t_gt/t_zc⌉.
    pub fn subsequence_count(&self, num: &Numerology) -> usize {
        self.z_l + num.symbols_ceil(self.t_gt)
    }

    /// Slot length in samples, (z_l·t_zc + t_gt) rounded up to whole symbols.
    pub fn slot_len(&self, num: &Numerology) -> usize {
        self.subsequence_count(num) * num.n_idft
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeDomainSignal {
    pub samples: Vec<Complex64>,
    pub t_s: f64,
    /// Sample index of the nominal slot start.
    pub origin: usize,
}

impl TimeDomainSignal {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.t_s
    }
}

/// Reference sequence carried by a symbol, before modulation.
pub fn symbol_sequence(
    kind: SymbolKind,
    fmt: &PreambleFormat,
    n_zc: usize,
) -> Result<Option<Vec<Complex64>>, WaveformError> {
    Ok(match kind {
        SymbolKind::Zero => None,
        SymbolKind::RootA(_) => Some(zc_sequence(ZcSpec { root: fmt.root_a, n_zc })?),
        SymbolKind::RootB(_) => Some(zc_sequence(ZcSpec { root: fmt.root_b, n_zc })?),
        SymbolKind::ScrambledA(_) => {
            Some(mseq_scramble(&zc_sequence(ZcSpec { root: fmt.root_a, n_zc })?, fmt.scramble_seed))
        }
    })
}

/// Concatenates the z_l modulated symbols (no cyclic prefix).
pub fn assemble_preamble(fmt: &PreambleFormat, modem: &Modem) -> Result<TimeDomainSignal, WaveformError> {
    let num = modem.num;
    fmt.validate(&num)?;
    let mut samples = Vec::with_capacity(fmt.z_l * num.n_idft);
    let mut cache: Vec<(SymbolKindTag, Vec<Complex64>)> = Vec::new();
    for kind in fmt.symbol_plan() {
        match kind {
            SymbolKind::Zero => samples.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), num.n_idft)),
            SymbolKind::RootA(a) | SymbolKind::RootB(a) | SymbolKind::ScrambledA(a) => {
                let tag = SymbolKindTag::of(kind);
                let unit = match cache.iter().find(|(t, _)| *t == tag) {
                    Some((_, s)) => s.clone(),
                    None => {
                        let seq = symbol_sequence(kind, fmt, num.n_zc)?.expect("non-zero symbol");
                        let s = modem.modulate(&seq, 1.0)?;
                        cache.push((tag, s.clone()));
                        s
                    }
                };
                samples.extend(unit.iter().map(|v| v * a));
            }
        }
    }
    Ok(TimeDomainSignal { samples, t_s: num.t_s(), origin: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SymbolKindTag {
    A,
    B,
    S,
}

impl SymbolKindTag {
    fn of(k: SymbolKind) -> Self {
        match k {
            SymbolKind::RootB(_) => Self::B,
            SymbolKind::ScrambledA(_) => Self::S,
            _ => Self::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    /// Linear amplitude gain.
    pub amplitude: f64,
    /// CFO in multiples of the subcarrier spacing.
    pub normalized_cfo: f64,
    /// Arrival offset in samples.
    pub arrival_offset: usize,
    /// Complex noise variance per sample.
    pub noise_variance: f64,
}

/// CFO rotation exp(j2π f l / n_idft) at absolute sample index `l`.
pub fn cfo_phasor(normalized_cfo: f64, l: usize, n_idft: usize) -> Complex64 {
    // Wrap f·l before scaling so large l keeps full phase precision.
    let cycles = (normalized_cfo * l as f64 / n_idft as f64).rem_euclid(1.0);
    Complex64::from_polar(1.0, std::f64::consts::TAU * cycles)
}

/// Adds circular complex Gaussian noise of variance `variance` per sample.
pub fn add_noise<R: Rng + ?Sized>(samples: &mut [Complex64], variance: f64, rng: &mut R) {
    if variance <= 0.0 {
        return;
    }
    let s = (variance / 2.0).sqrt();
    for v in samples.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(re * s, im * s);
    }
}

/// Delays, scales, rotates and adds noise; output is `slot_len` samples.
pub fn apply_channel<R: Rng + ?Sized>(
    sig: &TimeDomainSignal,
    ch: &ChannelParams,
    num: &Numerology,
    slot_len: usize,
    rng: &mut R,
) -> Result<TimeDomainSignal, WaveformError> {
    if ch.arrival_offset > slot_len {
        return Err(WaveformError::OffsetTooLarge { offset: ch.arrival_offset, slot: slot_len });
    }
    let mut out = vec![Complex64::new(0.0, 0.0); slot_len];
    let end = (ch.arrival_offset + sig.samples.len()).min(slot_len);
    for (l, (o, s)) in out[ch.arrival_offset..end].iter_mut().zip(&sig.samples).enumerate() {
        *o = *s * ch.amplitude;
        if ch.normalized_cfo != 0.0 {
            *o *= cfo_phasor(ch.normalized_cfo, l + ch.arrival_offset, num.n_idft);
        }
    }
    add_noise(&mut out, ch.noise_variance, rng);
    Ok(TimeDomainSignal { samples: out, t_s: sig.t_s, origin: sig.origin })
}

/// Element-wise sum of aligned signals.
pub fn superpose(signals: &[TimeDomainSignal]) -> Result<TimeDomainSignal, WaveformError> {
    let first = signals.first().ok_or_else(|| WaveformError::Misaligned("no signals".into()))?;
    let mut out = first.clone();
    for s in &signals[1..] {
        if s.t_s != first.t_s || s.origin != first.origin || s.samples.len() != first.samples.len() {
            return Err(WaveformError::Misaligned(format!(
                "expected {} samples at t_s {} origin {}, got {} at {} origin {}",
                first.samples.len(),
                first.t_s,
                first.origin,
                s.samples.len(),
                s.t_s,
                s.origin
            )));
        }
        for (o, v) in out.samples.iter_mut().zip(&s.samples) {
            *o += v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn fmt3(z_l: usize, b_u: usize, k: f64, guard: bool) -> PreambleFormat {
        PreambleFormat {
            option: FormatOption::Opt3,
            z_l,
            root_a: 25,
            root_b: 34,
            b_u,
            amplitude_ratio: k,
            zero_guard: guard,
            t_cp: 0.0,
            t_gt: 0.0,
            scramble_seed: 0,
        }
    }

    fn energy(s: &[Complex64]) -> f64 {
        s.iter().map(|v| v.norm_sqr()).sum()
    }

    #[test]
    fn zc_examples() {
        let x = zc_sequence(ZcSpec { root: 1, n_zc: 571 }).unwrap();
        assert_eq!(x[0], c(1.0, 0.0));
        assert!(x.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        let expect = Complex64::from_polar(1.0, -std::f64::consts::TAU / 571.0);
        assert!((x[1] - expect).norm() < 1e-14);
        assert!(zc_sequence(ZcSpec { root: 0, n_zc: 571 }).is_err());
        assert!(zc_sequence(ZcSpec { root: 571, n_zc: 571 }).is_err());
        assert!(zc_sequence(ZcSpec { root: 3, n_zc: 570 }).is_err());
    }

    #[test]
    fn zc_against_float_formula() {
        let n = 139.0;
        let x = zc_sequence(ZcSpec { root: 17, n_zc: 139 }).unwrap();
        for (i, v) in x.iter().enumerate() {
            let k = i as f64;
            let e = Complex64::from_polar(1.0, -std::f64::consts::PI * 17.0 * k * (k + 1.0) / n);
            assert!((v - e).norm() < 1e-10);
        }
    }

    #[test]
    fn modulation_round_trip_and_power() {
        let m = Modem::new(Numerology::default()).unwrap();
        let x = zc_sequence(ZcSpec { root: 129, n_zc: 571 }).unwrap();
        let s = m.modulate(&x, 1.0).unwrap();
        assert_eq!(s.len(), 4096);
        assert!((energy(&s) / 4096.0 - 1.0).abs() < 1e-9);
        let y = m.demodulate(&s).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");

        let z = m.modulate(&vec![c(0.0, 0.0); 571], 1.0).unwrap();
        assert!(z.iter().all(|v| *v == c(0.0, 0.0)));
        let s2 = m.modulate(&x, 2.0).unwrap();
        assert!(s.iter().zip(&s2).all(|(a, b)| (a * 2.0 - b).norm() < 1e-12));
        assert!(matches!(m.modulate(&x[..100], 1.0), Err(WaveformError::LengthMismatch { .. })));
        assert!(m.demodulate(&vec![c(0.0, 0.0); 4096]).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    /// Modulation against a direct evaluation of the mapped-subcarrier sum.
    #[test]
    fn modulation_matches_direct_sum() {
        let num = Numerology { scs: 30e3, n_zc: 31, n_idft: 64 };
        let m = Modem::new(num).unwrap();
        let x = zc_sequence(ZcSpec { root: 3, n_zc: 31 }).unwrap();
        let s = m.modulate(&x, 1.5).unwrap();
        for (l, got) in s.iter().enumerate() {
            let mut acc = c(0.0, 0.0);
            for g in 0..31 {
                let mut xg = c(0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    xg += v * Complex64::from_polar(1.0, -std::f64::consts::TAU * (g * n) as f64 / 31.0);
                }
                xg /= 31f64.sqrt();
                acc += xg * Complex64::from_polar(1.0, std::f64::consts::TAU * ((g + 1) * l) as f64 / 64.0);
            }
            acc *= 1.5 / 31f64.sqrt();
            assert!((acc - got).norm() < 1e-9);
        }
    }

    #[test]
    fn mseq_is_maximal_length() {
        let m = mseq(511, 0);
        let ones = m.iter().filter(|v| **v < 0.0).count();
        assert_eq!(ones, 256);
        // Distinct cyclic shifts: period exactly 511.
        for p in [1usize, 7, 73, 255] {
            assert!((0..511).any(|i| m[i] != m[(i + p) % 511]));
        }
        // Two-valued periodic autocorrelation.
        for lag in 1..511 {
            let r: f64 = (0..511).map(|i| m[i] * m[(i + lag) % 511]).sum();
            assert_eq!(r, -1.0);
        }
        let ext = mseq(571, 3);
        assert_eq!(&ext[511..], &ext[..60]);
    }

    #[test]
    fn scramble_suppresses_full_period_correlation() {
        let n = 571;
        let x = zc_sequence(ZcSpec { root: 25, n_zc: n }).unwrap();
        for seed in [0u32, 1, 77, 300] {
            let s = mseq_scramble(&x, seed);
            assert_eq!(mseq_scramble(&s, seed), x);
            assert!(s.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
            let mut peak: f64 = 0.0;
            for lag in 0..n {
                let acc: Complex64 = (0..n).map(|i| s[i] * x[(i + n - lag) % n].conj()).sum();
                peak = peak.max(acc.norm() / n as f64);
            }
            assert!(peak < 3.0 / (n as f64).sqrt(), "seed {seed}: {peak}");
        }
    }

    #[test]
    fn assemble_power_profile() {
        let m = Modem::new(Numerology::default()).unwrap();
        let sig = assemble_preamble(&fmt3(5, 3, 2.0, true), &m).unwrap();
        assert_eq!(sig.samples.len(), 5 * 4096);
        let rms: Vec<f64> = sig.samples.chunks(4096).map(|s| (energy(s) / 4096.0).sqrt()).collect();
        let want = [1.0, 0.0, 2.0, 0.0, 1.0];
        for (r, w) in rms.iter().zip(want) {
            assert!((r - w).abs() < 1e-9, "{rms:?}");
        }
        let plain = assemble_preamble(&fmt3(7, 4, 1.0, false), &m).unwrap();
        assert!((energy(&plain.samples) - 7.0 * 4096.0).abs() < 1e-6);
        assert!((plain.duration() - 7.0 / 30e3).abs() < 1e-15);
    }

    #[test]
    fn assemble_options() {
        let m = Modem::new(Numerology::default()).unwrap();
        let mut f = fmt3(4, 3, 2.0, false);
        f.option = FormatOption::Opt1;
        let s = assemble_preamble(&f, &m).unwrap();
        let rms: Vec<f64> = s.samples.chunks(4096).map(|s| (energy(s) / 4096.0).sqrt()).collect();
        assert!((rms[0] - 2.0).abs() < 1e-9 && (rms[2] - 1.0).abs() < 1e-9);
        let a = m.modulate(&zc_sequence(ZcSpec { root: 25, n_zc: 571 }).unwrap(), 1.0).unwrap();
        assert!(s.samples[4096..8192].iter().zip(&a).all(|(p, q)| (p - q).norm() < 1e-12));

        f.option = FormatOption::Opt2;
        f.scramble_seed = 9;
        let s = assemble_preamble(&f, &m).unwrap();
        let scr = mseq_scramble(&zc_sequence(ZcSpec { root: 25, n_zc: 571 }).unwrap(), 9);
        let want = m.modulate(&scr, 2.0).unwrap();
        assert!(s.samples[2 * 4096..3 * 4096].iter().zip(&want).all(|(p, q)| (p - q).norm() < 1e-12));
    }

    #[test]
    fn format_validation() {
        let num = Numerology::default();
        assert!(fmt3(22, 1, 2.0, true).validate(&num).is_err());
        assert!(fmt3(22, 22, 2.0, true).validate(&num).is_err());
        assert!(fmt3(22, 21, 2.0, true).validate(&num).is_ok());
        assert!(fmt3(22, 23, 1.0, false).validate(&num).is_err());
        assert!(fmt3(22, 3, 0.5, false).validate(&num).is_err());
        let mut f = fmt3(22, 3, 1.0, false);
        f.t_cp = 1e-6;
        assert!(f.validate(&num).is_err());
        f.t_cp = 0.0;
        f.t_gt = 1.0;
        assert!(f.validate(&num).is_err());
        f.t_gt = 0.267e-3;
        assert_eq!(f.subsequence_count(&num), 30);
        assert_eq!(num.symbols_floor(0.733e-3), 22);
        assert_eq!(num.symbols_floor(0.72e-3), 21);
        assert_eq!(num.symbols_floor(22.0 / 30e3), 22);
    }

    #[test]
    fn table_numerology() {
        let num = Numerology::default();
        assert!((num.n_idft as f64 / num.n_zc as f64 - 7.173).abs() < 1e-3);
        assert!((num.t_s() - 8.138e-9).abs() < 1e-12);
        assert_eq!(num.symbols_ceil(0.267e-3), 8);
    }

    #[test]
    fn channel_identity_and_shift() {
        let m = Modem::new(Numerology::default()).unwrap();
        let sig = assemble_preamble(&fmt3(2, 2, 1.0, false), &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = ChannelParams { amplitude: 1.0, normalized_cfo: 0.0, arrival_offset: 0, noise_variance: 0.0 };
        let out = apply_channel(&sig, &id, &m.num, sig.samples.len(), &mut rng).unwrap();
        assert_eq!(out.samples, sig.samples);
        let shifted = ChannelParams { arrival_offset: 100, ..id };
        let out = apply_channel(&sig, &shifted, &m.num, sig.samples.len() + 100, &mut rng).unwrap();
        assert!(out.samples[..100].iter().all(|v| v.norm() == 0.0));
        assert_eq!(&out.samples[100..], &sig.samples[..]);
        let too_far = ChannelParams { arrival_offset: 10_000, ..id };
        assert!(apply_channel(&sig, &too_far, &m.num, 9000, &mut rng).is_err());
    }

    #[test]
    fn channel_noise_power() {
        let m = Modem::new(Numerology::default()).unwrap();
        let sig = assemble_preamble(&fmt3(25, 2, 1.0, false), &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = ChannelParams { amplitude: 1.0, normalized_cfo: 0.3, arrival_offset: 0, noise_variance: 0.5 };
        let out = apply_channel(&sig, &ch, &m.num, 100_000, &mut rng).unwrap();
        let p = energy(&out.samples) / 100_000.0;
        assert!((p - 1.5).abs() / 1.5 < 0.01, "{p}");
    }

    /// A CFO of ±0.5 subcarrier moves energy symmetrically to the neighbours.
    #[test]
    fn cfo_sign_symmetry() {
        let m = Modem::new(Numerology::default()).unwrap();
        let x = zc_sequence(ZcSpec { root: 1, n_zc: 571 }).unwrap();
        let sym = TimeDomainSignal { samples: m.modulate(&x, 1.0).unwrap(), t_s: m.num.t_s(), origin: 0 };
        let bins = |f: f64| {
            let ch = ChannelParams { amplitude: 1.0, normalized_cfo: f, arrival_offset: 0, noise_variance: 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = apply_channel(&sym, &ch, &m.num, 4096, &mut rng).unwrap();
            let mut buf = out.samples.clone();
            FftPlanner::new().plan_fft_forward(4096).process(&mut buf);
            buf.iter().map(|v| v.norm_sqr()).collect::<Vec<f64>>()
        };
        let up = bins(0.5);
        let down = bins(-0.5);
        // Energy leaked above bin 571 with +0.5 mirrors energy leaked below bin 1 with −0.5.
        let above: f64 = up[572..600].iter().sum();
        let below: f64 = down[4068..4096].iter().sum::<f64>() + down[0];
        assert!(above > 0.0 && (above - below).abs() / above < 0.05, "{above} {below}");
        // Energy-weighted mean bin over a window wider than the occupied band.
        let centroid = |b: &[f64]| {
            let (mut num, mut den) = (0.0, 0.0);
            for k in -300i64..=871 {
                let v = b[k.rem_euclid(4096) as usize];
                num += k as f64 * v;
                den += v;
            }
            num / den
        };
        let c0 = centroid(&bins(0.0));
        let (cu, cd) = (centroid(&up) - c0, centroid(&down) - c0);
        assert!(cu > 0.0 && cd < 0.0, "{cu} {cd}");
        assert!((cu + cd).abs() < 0.02 * cu.abs(), "{cu} {cd}");
    }

    #[test]
    fn superpose_rules() {
        let a = TimeDomainSignal { samples: vec![c(1.0, 2.0), c(3.0, -1.0)], t_s: 1.0, origin: 0 };
        assert_eq!(superpose(std::slice::from_ref(&a)).unwrap(), a);
        let neg = TimeDomainSignal { samples: a.samples.iter().map(|v| -v).collect(), ..a.clone() };
        assert!(superpose(&[a.clone(), neg]).unwrap().samples.iter().all(|v| v.norm() == 0.0));
        let other = TimeDomainSignal { origin: 1, ..a.clone() };
        assert!(superpose(&[a.clone(), other]).is_err());
        assert!(superpose(&[]).is_err());
    }

    #[test]
    fn superposed_power_adds() {
        let m = Modem::new(Numerology::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sigs = Vec::new();
        for u in 0..64 {
            let mut f = fmt3(8, 1 + u % 8, 1.0, false);
            f.root_a = 1 + u;
            f.root_b = 300 + u;
            let s = assemble_preamble(&f, &m).unwrap();
            let ch = ChannelParams {
                amplitude: 1.0,
                normalized_cfo: rand::Rng::random_range(&mut rng, -0.2..0.2),
                arrival_offset: rand::Rng::random_range(&mut rng, 0..4096),
                noise_variance: 0.0,
            };
            sigs.push(apply_channel(&s, &ch, &m.num, 12 * 4096, &mut rng).unwrap());
        }
        let tot = superpose(&sigs).unwrap();
        let window = 4096..8 * 4096;
        let p: f64 = energy(&tot.samples[window.clone()]) / window.len() as f64;
        assert!((p - 64.0).abs() / 64.0 < 0.05, "{p}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn modulation_is_linear(
            re1 in prop::collection::vec(-1.0f64..1.0, 31),
            im1 in prop::collection::vec(-1.0f64..1.0, 31),
            re2 in prop::collection::vec(-1.0f64..1.0, 31),
            a in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let m = Modem::new(Numerology { scs: 15e3, n_zc: 31, n_idft: 128 }).unwrap();
            let s1: Vec<Complex64> = re1.iter().zip(&im1).map(|(r, i)| c(*r, *i)).collect();
            let s2: Vec<Complex64> = re2.iter().map(|r| c(*r, -r)).collect();
            let mix: Vec<Complex64> = s1.iter().zip(&s2).map(|(x, y)| x * a + y * b).collect();
            let lhs = m.modulate(&mix, 1.0).unwrap();
            let r1 = m.modulate(&s1, 1.0).unwrap();
            let r2 = m.modulate(&s2, 1.0).unwrap();
            for i in 0..128 {
                prop_assert!((lhs[i] - (r1[i] * a + r2[i] * b)).norm() < 1e-12);
            }
        }

        #[test]
        fn scramble_is_involution(seed in any::<u32>(), root in 1usize..571) {
            let x = zc_sequence(ZcSpec { root, n_zc: 571 }).unwrap();
            prop_assert_eq!(mseq_scramble(&mseq_scramble(&x, seed), seed), x);
        }
    }
}
