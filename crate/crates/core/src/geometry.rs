//! Spherical-Earth geometry: Walker-delta constellations, UE coordinates,
//! Doppler shift and round-trip propagation delay.

use nalgebra::{Rotation3, Vector3};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Mean Earth radius used for the spherical Earth model, m.
pub const EARTH_RADIUS: f64 = 6_371_000.0;
/// Standard gravitational parameter of the Earth, m^3/s^2.
pub const EARTH_MU: f64 = 3.986_004_418e14;
/// Sidereal rotation rate of the Earth, rad/s.
pub const EARTH_ROTATION_RATE: f64 = 7.292_115e-5;

/// Position (m) or velocity (m/s) in the Earth-centred Earth-fixed frame.
pub type EcefVector = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: satellite and UE are {distance:.3e} m apart")]
    Degenerate { distance: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid satellite state {id}: {reason}")]
    InvalidSatellite { id: u32, reason: String },
}

/// Minimum separation below which Doppler and delay are undefined.
const MIN_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteState {
    pub id: u32,
    pub position: EcefVector,
    pub velocity: EcefVector,
    /// Carrier frequency f_s in Hz.
    pub carrier_frequency: f64,
}

impl SatelliteState {
    pub fn validate(&self, earth_radius: f64) -> Result<(), GeometryError> {
        let bad = |reason: &str| Err(GeometryError::InvalidSatellite { id: self.id, reason: reason.to_string() });
        if !(self.position.iter().all(|c| c.is_finite()) && self.velocity.iter().all(|c| c.is_finite())) {
            return bad("non-finite state");
        }
        if self.position.norm() <= earth_radius {
            return bad("position inside the Earth");
        }
        if self.velocity.norm() >= 1.0e4 {
            return bad("speed above 10 km/s");
        }
        if !(self.carrier_frequency > 0.0) {
            return bad("carrier frequency must be positive");
        }
        Ok(())
    }
}

/// UE on the sphere of radius `radius`, given by polar angle θ (longitude-like,
/// measured in the equatorial plane) and azimuth angle φ (latitude-like).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UePosition {
    pub radius: f64,
    pub theta: f64,
    pub phi: f64,
}

impl UePosition {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { radius: EARTH_RADIUS, theta, phi }
    }

    pub fn to_ecef(&self) -> EcefVector {
        spherical_to_ecef(self)
    }

    /// Inverse of [`spherical_to_ecef`]; the radius is taken from the vector norm.
    pub fn from_ecef(v: &EcefVector) -> Self {
        let r = v.norm();
        Self { radius: r, theta: v.y.atan2(v.x), phi: (v.z / r).clamp(-1.0, 1.0).asin() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstellationConfig {
    pub orbit_count: usize,
    pub satellites_per_orbit: usize,
    /// Orbit altitude above the spherical Earth, m.
    pub altitude: f64,
    /// Orbit inclination, rad.
    pub inclination: f64,
    pub earth_radius: f64,
    /// Earth rotation rate applied when converting to the Earth-fixed frame, rad/s.
    pub earth_rotation: f64,
    /// Walker phasing factor F (inter-plane offset 2πF/T).
    pub phase_factor: usize,
    pub carrier_frequency: f64,
}

impl Default for ConstellationConfig {
    fn default() -> Self {
        Self {
            orbit_count: 20,
            satellites_per_orbit: 15,
            altitude: 1_000_000.0,
            inclination: 53f64.to_radians(),
            earth_radius: EARTH_RADIUS,
            earth_rotation: 0.0,
            phase_factor: 1,
            carrier_frequency: 27.0e9,
        }
    }
}

impl ConstellationConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.orbit_count == 0 || self.satellites_per_orbit == 0 {
            return Err(GeometryError::Precondition("constellation needs at least one satellite".into()));
        }
        if !(self.altitude > 0.0) || !(self.earth_radius > 0.0) {
            return Err(GeometryError::Precondition("altitude and radius must be positive".into()));
        }
        if !(self.carrier_frequency > 0.0) {
            return Err(GeometryError::Precondition("carrier frequency must be positive".into()));
        }
        Ok(())
    }

    pub fn orbit_radius(&self) -> f64 {
        self.earth_radius + self.altitude
    }

    /// Circular orbital speed sqrt(μ/a).
    pub fn orbital_speed(&self) -> f64 {
        (EARTH_MU / self.orbit_radius()).sqrt()
    }
}

/// (R cosθ cosφ, R sinθ cosφ, R sinφ).
pub fn spherical_to_ecef(pos: &UePosition) -> EcefVector {
    let (st, ct) = pos.theta.sin_cos();
    let (sp, cp) = pos.phi.sin_cos();
    EcefVector::new(pos.radius * ct * cp, pos.radius * st * cp, pos.radius * sp)
}

/// Doppler shift f_s · v·(p_s − p_u) / (c |p_s − p_u|).
///
/// Positive when the satellite velocity points away from the UE.
pub fn doppler_shift(sat: &SatelliteState, ue: &EcefVector) -> Result<f64, GeometryError> {
    let d = sat.position - ue;
    let dist = d.norm();
    if dist < MIN_DISTANCE {
        return Err(GeometryError::Degenerate { distance: dist });
    }
    Ok(sat.carrier_frequency * sat.velocity.dot(&d) / (SPEED_OF_LIGHT * dist))
}

/// Round-trip delay 2|p_s − p_u|/c.
pub fn propagation_ta(sat_pos: &EcefVector, ue_pos: &EcefVector) -> Result<f64, GeometryError> {
    let dist = (sat_pos - ue_pos).norm();
    if dist < MIN_DISTANCE {
        return Err(GeometryError::Degenerate { distance: dist });
    }
    Ok(2.0 * dist / SPEED_OF_LIGHT)
}

/// Maximal differential TA 2(t_max − t_min) from one-way delays.
pub fn differential_ta(t_max: f64, t_min: f64) -> Result<f64, GeometryError> {
    if !(t_max >= t_min && t_min >= 0.0) {
        return Err(GeometryError::Precondition(format!(
            "differential TA needs t_max >= t_min >= 0, got {t_max} and {t_min}"
        )));
    }
    Ok(2.0 * (t_max - t_min))
}

/// Walker-delta constellation with circular two-body orbits at `epoch` seconds.
///
/// Satellite `s` of plane `p` has argument of latitude
/// u = 2πs/S + 2πFp/(PS) + n·t and the plane RAAN is 2πp/P.
pub fn generate_constellation(cfg: &ConstellationConfig, epoch: f64) -> Vec<SatelliteState> {
    let a = cfg.orbit_radius();
    let n = (EARTH_MU / (a * a * a)).sqrt();
    let planes = cfg.orbit_count as f64;
    let per = cfg.satellites_per_orbit as f64;
    let tau = std::f64::consts::TAU;
    let earth = Rotation3::from_axis_angle(&Vector3::z_axis(), -cfg.earth_rotation * epoch);
    let omega = Vector3::new(0.0, 0.0, cfg.earth_rotation);

    let mut out = Vec::with_capacity(cfg.orbit_count * cfg.satellites_per_orbit);
    for p in 0..cfg.orbit_count {
        let raan = tau * p as f64 / planes;
        let plane = Rotation3::from_axis_angle(&Vector3::z_axis(), raan)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), cfg.inclination);
        for s in 0..cfg.satellites_per_orbit {
            let u = tau * s as f64 / per + tau * (cfg.phase_factor * p) as f64 / (planes * per) + n * epoch;
            let (su, cu) = u.sin_cos();
            let r_inertial = plane * Vector3::new(a * cu, a * su, 0.0);
            let v_inertial = plane * Vector3::new(-a * n * su, a * n * cu, 0.0);
            let position = earth * r_inertial;
            let velocity = earth * (v_inertial - omega.cross(&r_inertial));
            out.push(SatelliteState {
                id: (p * cfg.satellites_per_orbit + s) as u32,
                position,
                velocity,
                carrier_frequency: cfg.carrier_frequency,
            });
        }
    }
    out
}

/// Elevation of `sat_pos` above the local horizon at `ue`, rad.
pub fn elevation(ue: &EcefVector, sat_pos: &EcefVector) -> f64 {
    let d = sat_pos - ue;
    (d.dot(ue) / (d.norm() * ue.norm())).clamp(-1.0, 1.0).asin()
}

/// Satellites above `min_elevation`, highest first.
pub fn visible_satellites(ue: &UePosition, sats: &[SatelliteState], min_elevation: f64) -> Vec<SatelliteState> {
    let p = ue.to_ecef();
    let mut vis: Vec<(f64, SatelliteState)> =
        sats.iter().map(|s| (elevation(&p, &s.position), *s)).filter(|(e, _)| *e > min_elevation).collect();
    vis.sort_by(|a, b| b.0.total_cmp(&a.0));
    vis.into_iter().map(|(_, s)| s).collect()
}
