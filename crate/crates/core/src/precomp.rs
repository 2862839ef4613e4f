//! UE-side time/frequency pre-compensation from downlink CFO measurements.
//!
//! The UE observes the downlink CFO of several satellites, each the sum of
//! the Doppler shift at its (unknown) position and its own oscillator offset
//! f_lo. A Gauss-Newton fit of (θ, φ, f_lo) to those measurements yields the
//! position, from which the round-trip delay to the serving satellite and the
//! uplink CFO f_down − 2 f̂_lo follow.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::geometry::{
    doppler_shift, propagation_ta, EcefVector, GeometryError, SatelliteState, UePosition, EARTH_RADIUS, SPEED_OF_LIGHT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrecompError {
    #[error("need at least 3 measurements from distinct satellites, got {0}")]
    TooFewMeasurements(usize),
    #[error("normal matrix is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("target satellite {0} is not among the measurements")]
    UnknownTarget(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownlinkMeasurement {
    pub satellite: SatelliteState,
    /// Measured downlink CFO (Doppler plus oscillator offset plus error), Hz.
    pub measured_cfo: f64,
    /// Half-width of the measurement error, Hz.
    pub error_bound: f64,
}

/// Unknowns of the positioning problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateVector {
    pub theta: f64,
    pub phi: f64,
    pub f_lo: f64,
}

impl EstimateVector {
    pub fn position(&self) -> UePosition {
        UePosition::new(self.theta, self.phi)
    }

    fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.theta, self.phi, self.f_lo)
    }

    fn from_vector(v: &Vector3<f64>) -> Self {
        Self { theta: v[0], phi: v[1], f_lo: v[2] }
    }
}

/// How the solver seeds (θ̂, φ̂). f̂_lo always starts at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Initialization {
    /// Sub-satellite point of the first (strongest) measurement.
    SubSatellite,
    /// Caller-supplied angles, e.g. the serving beam centre.
    Angles { theta: f64, phi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Threshold on the step norm with (rad, rad, kHz) scaling.
    pub step_threshold: f64,
    pub initialization: Initialization,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iterations: 50, step_threshold: 1e-9, initialization: Initialization::SubSatellite }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOutcome {
    pub estimate: EstimateVector,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared CFO residuals at the estimate, Hz^2.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecompResult {
    pub position: UePosition,
    /// Time pre-compensation (round trip to the target satellite), s.
    pub t_pre: f64,
    /// Estimated uplink CFO, Hz.
    pub f_up: f64,
    pub f_lo_hat: f64,
    pub iterations: usize,
    pub converged: bool,
}

const CONDITION_LIMIT: f64 = 1e12;

/// Model CFO f_s γ¹/(c γ²) + f̂_lo at the estimated position.
pub fn predicted_downlink_cfo(est: &EstimateVector, sat: &SatelliteState) -> Result<f64, PrecompError> {
    let pu = est.position().to_ecef();
    Ok(doppler_shift(sat, &pu)? + est.f_lo)
}

/// S×3 Jacobian of the model CFOs with respect to (θ, φ, f_lo).
pub fn jacobian(est: &EstimateVector, sats: &[SatelliteState]) -> Result<DMatrix<f64>, PrecompError> {
    let r = EARTH_RADIUS;
    let (st, ct) = est.theta.sin_cos();
    let (sp, cp) = est.phi.sin_cos();
    let (xu, yu) = (r * ct * cp, r * st * cp);
    let pu = EcefVector::new(xu, yu, r * sp);
    let (a1, a2, a3) = (r * ct * sp, r * st * sp, r * cp);

    let mut j = DMatrix::zeros(sats.len(), 3);
    for (row, s) in sats.iter().enumerate() {
        let (p, v) = (&s.position, &s.velocity);
        let d = p - pu;
        let g2 = d.norm();
        if g2 < 1.0 {
            return Err(GeometryError::Degenerate { distance: g2 }.into());
        }
        let g1 = v.dot(&d);
        let k = s.carrier_frequency / SPEED_OF_LIGHT;
        let g2_3 = g2 * g2 * g2;
        j[(row, 0)] = k * (v.x * yu - v.y * xu) / g2 - k * (p.x * yu - p.y * xu) * g1 / g2_3;
        j[(row, 1)] = k * (v.x * a1 + v.y * a2 - v.z * a3) / g2 - k * (p.x * a1 + p.y * a2 - p.z * a3) * g1 / g2_3;
        j[(row, 2)] = 1.0;
    }
    Ok(j)
}

fn residuals(est: &EstimateVector, meas: &[DownlinkMeasurement]) -> Result<DVector<f64>, PrecompError> {
    let mut r = DVector::zeros(meas.len());
    for (i, m) in meas.iter().enumerate() {
        r[i] = m.measured_cfo - predicted_downlink_cfo(est, &m.satellite)?;
    }
    Ok(r)
}

fn scaled_norm(step: &Vector3<f64>) -> f64 {
    (step[0] * step[0] + step[1] * step[1] + (step[2] * 1e-3).powi(2)).sqrt()
}

fn condition_number(a: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*a).eigenvalues;
    let max = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, e| m.min(e.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn initial_estimate(meas: &[DownlinkMeasurement], init: Initialization) -> EstimateVector {
    match init {
        Initialization::SubSatellite => {
            let sub = UePosition::from_ecef(&meas[0].satellite.position);
            EstimateVector { theta: sub.theta, phi: sub.phi, f_lo: 0.0 }
        }
        Initialization::Angles { theta, phi } => EstimateVector { theta, phi, f_lo: 0.0 },
    }
}

fn check_measurements(meas: &[DownlinkMeasurement]) -> Result<(), PrecompError> {
    let mut ids: Vec<u32> = meas.iter().map(|m| m.satellite.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 3 || ids.len() != meas.len() {
        return Err(PrecompError::TooFewMeasurements(ids.len()));
    }
    Ok(())
}

/// Gauss-Newton fit of (θ, φ, f_lo) to the measured downlink CFOs.
///
/// Each step solves the column-equilibrated normal equations. A step that
/// raises the objective is retried with Marquardt damping `A + λ diag(A)`,
/// starting at λ = 1e-6 and growing tenfold. An equilibrated normal matrix
/// with condition number above 1e12 is a solver failure.
pub fn solve_position(meas: &[DownlinkMeasurement], cfg: &SolverConfig) -> Result<SolveOutcome, PrecompError> {
    check_measurements(meas)?;
    let mut est = initial_estimate(meas, cfg.initialization);
    let mut r = residuals(&est, meas)?;
    let mut cost = r.norm_squared();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations.max(1) {
        iterations += 1;
        let j = jacobian(&est, &meas.iter().map(|m| m.satellite).collect::<Vec<_>>())?;
        let jt = j.transpose();
        let a: Matrix3<f64> = (&jt * &j).fixed_view::<3, 3>(0, 0).into_owned();
        let g: Vector3<f64> = (&jt * &r).fixed_rows::<3>(0).into_owned();
        // Equilibrate columns (Hz/rad against Hz/Hz) before judging conditioning.
        let d = Vector3::from_fn(|i, _| 1.0 / a[(i, i)].sqrt().max(f64::MIN_POSITIVE));
        let scaled = Matrix3::from_fn(|i, k| a[(i, k)] * d[i] * d[k]);
        let cond = condition_number(&scaled);
        if !(cond <= CONDITION_LIMIT) {
            return Err(PrecompError::IllConditioned(cond));
        }
        let gs = g.component_mul(&d);

        let mut lambda = 0.0;
        let mut accepted = None;
        for _ in 0..16 {
            let damped = scaled + Matrix3::identity() * lambda;
            let Some(z) = damped.lu().solve(&gs) else { break };
            let step = z.component_mul(&d);
            let trial = EstimateVector::from_vector(&(est.as_vector() + step));
            let tr = residuals(&trial, meas)?;
            let tc = tr.norm_squared();
            if tc <= cost || scaled_norm(&step) <= cfg.step_threshold {
                accepted = Some((step, trial, tr, tc));
                break;
            }
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
        }
        let Some((step, trial, tr, tc)) = accepted else { break };
        est = trial;
        r = tr;
        cost = tc;
        if scaled_norm(&step) <= cfg.step_threshold {
            converged = true;
            break;
        }
    }
    Ok(SolveOutcome { estimate: est, iterations, converged, objective: cost })
}

/// Full pre-compensation: position fit, then delay to `target` and the
/// uplink CFO f_down(target) − 2 f̂_lo.
pub fn precompensate(
    meas: &[DownlinkMeasurement],
    target: &SatelliteState,
    cfg: &SolverConfig,
) -> Result<PrecompResult, PrecompError> {
    let f_down =
        meas.iter().find(|m| m.satellite.id == target.id).ok_or(PrecompError::UnknownTarget(target.id))?.measured_cfo;
    let sol = solve_position(meas, cfg)?;
    let position = sol.estimate.position();
    let t_pre = propagation_ta(&target.position, &position.to_ecef())?;
    Ok(PrecompResult {
        position,
        t_pre,
        f_up: uplink_cfo(f_down, sol.estimate.f_lo),
        f_lo_hat: sol.estimate.f_lo,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// f_up = f_down − 2 f̂_lo.
pub fn uplink_cfo(f_down: f64, f_lo_hat: f64) -> f64 {
    f_down - 2.0 * f_lo_hat
}

/// First-order Doppler error Δf_s = f_s^u − f̂_s^u caused by a position error.
///
/// `pos_error` is p̂_u − p_u, `d` the true UE-satellite distance, `ta_error`
/// the round-trip delay error T_e and `doppler` the true Doppler f_s^u.
pub fn cfo_error_prediction(pos_error: &EcefVector, sat: &SatelliteState, d: f64, ta_error: f64, doppler: f64) -> f64 {
    let first =
        sat.carrier_frequency * sat.velocity.dot(pos_error) / (SPEED_OF_LIGHT * (d + SPEED_OF_LIGHT * ta_error / 2.0));
    let second = if ta_error == 0.0 { 0.0 } else { doppler / (1.0 + 2.0 * d / (SPEED_OF_LIGHT * ta_error)) };
    first + second
}

/// Noiseless measurements of a synthetic scene.
pub fn synthesize_measurements(
    truth: &EstimateVector,
    sats: &[SatelliteState],
    errors: &[f64],
    error_bound: f64,
) -> Result<Vec<DownlinkMeasurement>, PrecompError> {
    sats.iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(DownlinkMeasurement {
                satellite: *s,
                measured_cfo: predicted_downlink_cfo(truth, s)? + errors.get(i).copied().unwrap_or(0.0),
                error_bound,
            })
        })
        .collect()
}

/// Picks the two companions of `target` among `candidates` that minimise the
/// worst-case uplink CFO error coefficient Σ|2 (J⁻¹)₃ᵢ| at `seed`.
///
/// Returns the target first. Falls back to the first three when no triple
/// yields an invertible Jacobian.
pub fn select_measurement_triple(
    target: &SatelliteState,
    candidates: &[SatelliteState],
    seed: &EstimateVector,
) -> Vec<SatelliteState> {
    let others: Vec<SatelliteState> = candidates.iter().filter(|s| s.id != target.id).copied().collect();
    let mut best: Option<(f64, [SatelliteState; 3])> = None;
    for i in 0..others.len() {
        for k in i + 1..others.len() {
            let triple = [*target, others[i], others[k]];
            let Ok(j) = jacobian(seed, &triple) else { continue };
            let Some(inv) = j.try_inverse() else { continue };
            let coef: f64 = (0..3).map(|c| (2.0 * inv[(2, c)]).abs()).sum();
            if coef.is_finite() && best.is_none_or(|(b, _)| coef < b) {
                best = Some((coef, triple));
            }
        }
    }
    match best {
        Some((_, t)) => t.to_vec(),
        None => std::iter::once(*target).chain(others.into_iter().take(2)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_constellation, visible_satellites, ConstellationConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64) -> (EstimateVector, Vec<SatelliteState>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ConstellationConfig::default();
        loop {
            let sats = generate_constellation(&cfg, rng.random_range(0.0..7000.0));
            let truth = EstimateVector {
                theta: rng.random_range(-3.1..3.1),
                phi: rng.random_range(-0.8..0.8),
                f_lo: rng.random_range(0.0..5e-7) * 27e9,
            };
            let vis = visible_satellites(&truth.position(), &sats, 20f64.to_radians());
            if vis.len() >= 3 {
                return (truth, vis);
            }
        }
    }

    fn fd_column(est: &EstimateVector, s: &SatelliteState, col: usize, h: f64) -> f64 {
        let mut p = *est;
        let mut m = *est;
        if col == 0 {
            p.theta += h;
            m.theta -= h;
        } else {
            p.phi += h;
            m.phi -= h;
        }
        (predicted_downlink_cfo(&p, s).unwrap() - predicted_downlink_cfo(&m, s).unwrap()) / (2.0 * h)
    }

    #[test]
    fn prediction_matches_geometry() {
        let (truth, sats) = scene(3);
        for s in &sats {
            let direct = doppler_shift(s, &truth.position().to_ecef()).unwrap() + truth.f_lo;
            assert_eq!(predicted_downlink_cfo(&truth, s).unwrap(), direct);
        }
        let s = SatelliteState {
            id: 0,
            position: EcefVector::new(EARTH_RADIUS + 1e6, 0.0, 0.0),
            velocity: EcefVector::new(0.0, 7000.0, 0.0),
            carrier_frequency: 27e9,
        };
        let est = EstimateVector { theta: 0.0, phi: 0.0, f_lo: 0.0 };
        assert_eq!(predicted_downlink_cfo(&est, &s).unwrap(), 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..20 {
            let (truth, sats) = scene(seed);
            let j = jacobian(&truth, &sats).unwrap();
            for (row, s) in sats.iter().enumerate() {
                for col in 0..2 {
                    let fd = fd_column(&truth, s, col, 1e-7);
                    let rel = (j[(row, col)] - fd).abs() / fd.abs().max(1.0);
                    assert!(rel < 1e-4, "seed {seed} row {row} col {col}: {} vs {fd}", j[(row, col)]);
                }
                assert_eq!(j[(row, 2)], 1.0);
            }
            let j3 = jacobian(&truth, &sats[..3]).unwrap();
            assert_eq!(j3.shape(), (3, 3));
            assert_eq!(j3.rank(1e-9 * j3.norm()), 3);
        }
    }

    #[test]
    fn fixed_point_at_truth() {
        let (truth, sats) = scene(11);
        let meas = synthesize_measurements(&truth, &sats[..3], &[], 0.0).unwrap();
        let cfg = SolverConfig {
            initialization: Initialization::Angles { theta: truth.theta, phi: truth.phi },
            ..Default::default()
        };
        // f_lo still starts at zero, so one step recovers it exactly.
        let out = solve_position(&meas, &cfg).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 3, "{}", out.iterations);
        assert!(out.objective < 1e-12);
    }

    #[test]
    fn recovers_from_perturbed_start() {
        for seed in 0..10 {
            let (truth, sats) = scene(100 + seed);
            let meas = synthesize_measurements(&truth, &sats[..3], &[], 0.0).unwrap();
            let cfg = SolverConfig {
                initialization: Initialization::Angles { theta: truth.theta + 0.01, phi: truth.phi - 0.01 },
                ..Default::default()
            };
            let out = solve_position(&meas, &cfg).unwrap();
            assert!(out.converged, "seed {seed}");
            assert!((out.estimate.theta - truth.theta).abs() < 1e-6);
            assert!((out.estimate.phi - truth.phi).abs() < 1e-6);
            assert!((out.estimate.f_lo - truth.f_lo).abs() < 1.0);
        }
    }

    #[test]
    fn objective_never_increases_on_noiseless_data() {
        let (truth, sats) = scene(21);
        let meas = synthesize_measurements(&truth, &sats[..3], &[], 0.0).unwrap();
        let start = Initialization::Angles { theta: truth.theta + 0.02, phi: truth.phi + 0.015 };
        let mut last = f64::INFINITY;
        for k in 1..8 {
            let cfg = SolverConfig { max_iterations: k, step_threshold: 1e-30, initialization: start };
            let out = solve_position(&meas, &cfg).unwrap();
            assert!(out.objective <= last * (1.0 + 1e-12) + 1e-18, "iteration {k}");
            last = out.objective;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (truth, sats) = scene(5);
        let meas = synthesize_measurements(&truth, &sats[..2], &[], 0.0).unwrap();
        assert!(matches!(solve_position(&meas, &SolverConfig::default()), Err(PrecompError::TooFewMeasurements(2))));
        let dup = vec![meas[0], meas[0], meas[1]];
        assert!(solve_position(&dup, &SolverConfig::default()).is_err());
        // Three copies of the same orbit point at different ids: rank deficient.
        let s = sats[0];
        let clones: Vec<DownlinkMeasurement> = (0..3)
            .map(|i| DownlinkMeasurement {
                satellite: SatelliteState { id: i, ..s },
                measured_cfo: 1000.0,
                error_bound: 0.0,
            })
            .collect();
        assert!(matches!(solve_position(&clones, &SolverConfig::default()), Err(PrecompError::IllConditioned(_))));
    }

    #[test]
    fn uplink_cfo_arithmetic() {
        assert_eq!(uplink_cfo(10e3, 2e3), 6e3);
        assert_eq!(uplink_cfo(1234.5, 0.0), 1234.5);
    }

    #[test]
    fn precompensate_reports_target_delay() {
        let (truth, sats) = scene(8);
        let meas = synthesize_measurements(&truth, &sats[..3], &[], 0.0).unwrap();
        let cfg = SolverConfig {
            initialization: Initialization::Angles { theta: truth.theta + 0.005, phi: truth.phi },
            ..Default::default()
        };
        let res = precompensate(&meas, &sats[0], &cfg).unwrap();
        let t_true = propagation_ta(&sats[0].position, &truth.position().to_ecef()).unwrap();
        assert!((res.t_pre - t_true).abs() < 1e-12);
        assert!((res.f_up - (meas[0].measured_cfo - 2.0 * truth.f_lo)).abs() < 1e-3);
        let stranger = SatelliteState { id: 999, ..sats[0] };
        assert!(matches!(precompensate(&meas, &stranger, &cfg), Err(PrecompError::UnknownTarget(999))));
    }

    #[test]
    fn cfo_error_prediction_examples() {
        let (truth, sats) = scene(9);
        let s = sats[0];
        assert_eq!(cfo_error_prediction(&EcefVector::zeros(), &s, 1.2e6, 0.0, 5e5), 0.0);
        // Tiny T_e: the second term vanishes next to the first.
        let pe = EcefVector::new(300.0, -200.0, 100.0);
        let full = cfo_error_prediction(&pe, &s, 1.2e6, 1e-12, 5e5);
        let first = cfo_error_prediction(&pe, &s, 1.2e6, 0.0, 5e5);
        assert!((full - first).abs() < 1e-3 * first.abs().max(1.0));

        let pu = truth.position().to_ecef();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let dp =
                EcefVector::new(rng.random_range(-2e3..2e3), rng.random_range(-2e3..2e3), rng.random_range(-2e3..2e3));
            let p_hat = pu + dp;
            let d = (s.position - pu).norm();
            let te = 2.0 * ((s.position - p_hat).norm() - d) / SPEED_OF_LIGHT;
            let f_true = doppler_shift(&s, &pu).unwrap();
            let exact = f_true - doppler_shift(&s, &p_hat).unwrap();
            let pred = cfo_error_prediction(&dp, &s, d, te, f_true);
            assert!((pred - exact).abs() <= 0.05 * exact.abs() + 1e-6, "{pred} vs {exact}");
        }
    }

    #[test]
    fn triple_selection_keeps_target_first() {
        let (truth, sats) = scene(12);
        let t = select_measurement_triple(&sats[0], &sats, &truth);
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].id, sats[0].id);
        assert_ne!(t[1].id, t[2].id);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn uplink_error_is_twice_lo_error(seed in 0u64..1000, err in prop::array::uniform3(-1200.0f64..1200.0)) {
            let (truth, sats) = scene(seed);
            let meas = synthesize_measurements(&truth, &sats[..3], &err, 1200.0).unwrap();
            let cfg = SolverConfig {
                initialization: Initialization::Angles { theta: truth.theta, phi: truth.phi },
                ..Default::default()
            };
            // Noisy exactly-determined fits can wander into singular geometry.
            let res = precompensate(&meas, &sats[0], &cfg);
            prop_assume!(res.is_ok());
            let res = res.unwrap();
            let f_up_true = meas[0].measured_cfo - 2.0 * truth.f_lo;
            let lhs = res.f_up - f_up_true;
            let rhs = 2.0 * (truth.f_lo - res.f_lo_hat);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        }

        #[test]
        fn noiseless_scenes_are_identifiable(seed in 0u64..1000) {
            let (truth, sats) = scene(seed);
            let meas = synthesize_measurements(&truth, &sats, &[], 0.0).unwrap();
            let cfg = SolverConfig {
                initialization: Initialization::Angles { theta: truth.theta + 0.003, phi: truth.phi - 0.002 },
                ..Default::default()
            };
            let out = solve_position(&meas, &cfg).unwrap();
            prop_assert!((out.estimate.theta - truth.theta).abs() < 1e-7);
            prop_assert!((out.estimate.phi - truth.phi).abs() < 1e-7);
        }
    }
}
