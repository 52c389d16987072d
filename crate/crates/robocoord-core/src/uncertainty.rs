//! Propagation of the learned time-deviation posterior into speed and
//! position deviation moments, and bounded confidence intervals around all
//! three trajectories.
//!
//! A Gaussian time deviation `e` at a position enters the cubic trajectory
//! as a polynomial perturbation: the speed deviation is quadratic in `e` and
//! the position deviation cubic in `e`. Both are summarized by their first
//! two moments, computed in closed form from the normal moments of `e`. The
//! intervals use the exact normal quantile for `e`, Chebyshev's inequality
//! for the position deviation, and the Vysochanskii-Petunin inequality for
//! the unimodal speed deviation.

use alloc::vec::Vec;
use core::fmt;

use crate::gp::GpModel;
use crate::math;
use crate::trajectory::{time_at_position, BoundaryConditions, PolyCoefficients, TrajectoryError};

pub use crate::math::inverse_erf;

#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyError {
    /// Confidence level must lie strictly inside (0, 1).
    LevelOutOfRange(f64),
    /// The Vysochanskii-Petunin bound only holds for `z > sqrt(8/3)`,
    /// i.e. levels above 5/6.
    VysochanskiiPetuninRegime { level: f64 },
    /// Standard deviation must be nonnegative and finite.
    InvalidSigma(f64),
    /// Tube construction needs a positive grid step.
    InvalidGridStep(f64),
    /// Tube nodes must be nonempty, ordered, and have ordered bounds.
    MalformedTube,
    /// Propagated from the time-trajectory inversion.
    Trajectory(TrajectoryError),
}

impl fmt::Display for UncertaintyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LevelOutOfRange(p) => write!(f, "confidence level {p} outside (0, 1)"),
            Self::VysochanskiiPetuninRegime { level } => {
                write!(
                    f,
                    "level {level} below the Vysochanskii-Petunin regime (> 5/6)"
                )
            }
            Self::InvalidSigma(s) => write!(f, "invalid standard deviation {s}"),
            Self::InvalidGridStep(s) => write!(f, "invalid grid step {s}"),
            Self::MalformedTube => write!(f, "malformed tube nodes"),
            Self::Trajectory(e) => write!(f, "trajectory error: {e}"),
        }
    }
}

impl core::error::Error for UncertaintyError {}

impl From<TrajectoryError> for UncertaintyError {
    fn from(e: TrajectoryError) -> Self {
        Self::Trajectory(e)
    }
}

/// GP posterior of the time deviation at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDeviationMoments {
    /// Position the posterior was queried at, m.
    pub p: f64,
    /// Posterior mean, s.
    pub mu_e: f64,
    /// Posterior standard deviation, s.
    pub sigma_e: f64,
}

/// First two moments of the speed deviation, (m/s) and (m/s)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedDeviationMoments {
    pub mu_g: f64,
    pub sigma_g2: f64,
}

/// First two moments of the position deviation, m and m^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionDeviationMoments {
    pub mu_f: f64,
    pub sigma_f2: f64,
}

/// Mean and variance of `a1*e + a2*e^2` for `e ~ N(mu, sigma^2)`.
pub fn quadratic_normal_moments(a1: f64, a2: f64, mu: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let mean = a1 * mu + a2 * (mu * mu + s2);
    let var = s2 * (a1 * a1 + 4.0 * mu * (a1 * a2 + a2 * a2 * mu) + 2.0 * a2 * a2 * s2);
    (mean, var.max(0.0))
}

/// Mean and variance of `a1*e + a2*e^2 + a3*e^3` for `e ~ N(mu, sigma^2)`.
pub fn cubic_normal_moments(a1: f64, a2: f64, a3: f64, mu: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let mu2 = mu * mu;
    let mean = a1 * mu + a3 * (mu2 * mu + 3.0 * mu * s2) + a2 * (mu2 + s2);
    let var = s2
        * (a1 * a1
            + 4.0 * a1 * a2 * mu
            + 6.0 * a1 * a3 * mu2
            + 6.0 * a1 * a3 * s2
            + 4.0 * a2 * a2 * mu2
            + 2.0 * a2 * a2 * s2
            + 12.0 * a2 * a3 * mu2 * mu
            + 24.0 * a2 * a3 * mu * s2
            + 9.0 * a3 * a3 * mu2 * mu2
            + 36.0 * a3 * a3 * mu2 * s2
            + 15.0 * a3 * a3 * s2 * s2);
    (mean, var.max(0.0))
}

/// Speed-deviation coefficients of the cubic at nominal time `t`:
/// `g = a1'*e + a2'*e^2` with `a1' = -2*phi2 - 6*phi3*t`, `a2' = -3*phi3`.
pub fn speed_deviation_coefficients(phi: &PolyCoefficients, t_nominal: f64) -> (f64, f64) {
    (
        -2.0 * phi.phi2 - 6.0 * phi.phi3 * t_nominal,
        -3.0 * phi.phi3,
    )
}

/// Position-deviation coefficients of the cubic at nominal time `t`:
/// `f = a1*e + a2*e^2 + a3*e^3` with `a1 = -v(t)`, `a2 = -3*phi3*t - phi2`,
/// `a3 = -phi3`.
pub fn position_deviation_coefficients(phi: &PolyCoefficients, t_nominal: f64) -> (f64, f64, f64) {
    (
        -(3.0 * phi.phi3 * t_nominal * t_nominal + 2.0 * phi.phi2 * t_nominal + phi.phi1),
        -(3.0 * phi.phi3 * t_nominal + phi.phi2),
        -phi.phi3,
    )
}

/// Posterior mean and variance of the speed deviation at the nominal time.
pub fn speed_deviation_moments(
    phi: &PolyCoefficients,
    t_nominal: f64,
    e: &TimeDeviationMoments,
) -> SpeedDeviationMoments {
    let (a1, a2) = speed_deviation_coefficients(phi, t_nominal);
    let (mu_g, sigma_g2) = quadratic_normal_moments(a1, a2, e.mu_e, e.sigma_e);
    SpeedDeviationMoments { mu_g, sigma_g2 }
}

/// Posterior mean and variance of the position deviation at the nominal time.
pub fn position_deviation_moments(
    phi: &PolyCoefficients,
    t_nominal: f64,
    e: &TimeDeviationMoments,
) -> PositionDeviationMoments {
    let (a1, a2, a3) = position_deviation_coefficients(phi, t_nominal);
    let (mu_f, sigma_f2) = cubic_normal_moments(a1, a2, a3, e.mu_e, e.sigma_e);
    PositionDeviationMoments { mu_f, sigma_f2 }
}

/// The concentration bound a confidence interval was built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalFamily {
    ExactNormal,
    Chebyshev,
    VysochanskiiPetunin,
}

/// A symmetric bounded confidence interval `[mu - z*sigma, mu + z*sigma]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub family: IntervalFamily,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

fn check_level(level: f64) -> Result<(), UncertaintyError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(UncertaintyError::LevelOutOfRange(level))
    }
}

fn check_sigma(sigma: f64) -> Result<(), UncertaintyError> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(UncertaintyError::InvalidSigma(sigma))
    }
}

/// Exact-normal interval for the Gaussian time deviation:
/// `z = sqrt(2) * erfinv(P)`.
pub fn interval_time(
    mu_e: f64,
    sigma_e: f64,
    p_e: f64,
) -> Result<ConfidenceInterval, UncertaintyError> {
    check_level(p_e)?;
    check_sigma(sigma_e)?;
    let z = core::f64::consts::SQRT_2
        * math::inverse_erf(p_e).map_err(|_| UncertaintyError::LevelOutOfRange(p_e))?;
    Ok(ConfidenceInterval {
        lo: mu_e - z * sigma_e,
        hi: mu_e + z * sigma_e,
        level: p_e,
        family: IntervalFamily::ExactNormal,
    })
}

/// Chebyshev interval for the position deviation: `z = 1/sqrt(1 - P)`,
/// guaranteeing coverage at least `P` for any distribution with these
/// moments.
pub fn interval_position(
    mu_f: f64,
    sigma_f: f64,
    p_f: f64,
) -> Result<ConfidenceInterval, UncertaintyError> {
    check_level(p_f)?;
    check_sigma(sigma_f)?;
    let z = 1.0 / libm::sqrt(1.0 - p_f);
    Ok(ConfidenceInterval {
        lo: mu_f - z * sigma_f,
        hi: mu_f + z * sigma_f,
        level: p_f,
        family: IntervalFamily::Chebyshev,
    })
}

/// Vysochanskii-Petunin interval for the unimodal speed deviation:
/// `z = sqrt(4 / (9*(1 - P)))`, valid only where `z > sqrt(8/3)`,
/// i.e. `P > 5/6`.
pub fn interval_speed(
    mu_g: f64,
    sigma_g: f64,
    p_g: f64,
) -> Result<ConfidenceInterval, UncertaintyError> {
    check_level(p_g)?;
    check_sigma(sigma_g)?;
    let z = libm::sqrt(4.0 / (9.0 * (1.0 - p_g)));
    if z * z <= 8.0 / 3.0 {
        return Err(UncertaintyError::VysochanskiiPetuninRegime { level: p_g });
    }
    Ok(ConfidenceInterval {
        lo: mu_g - z * sigma_g,
        hi: mu_g + z * sigma_g,
        level: p_g,
        family: IntervalFamily::VysochanskiiPetunin,
    })
}

/// Confidence levels for the time (E), position (F), and speed (G) tubes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceLevels {
    pub p_e: f64,
    pub p_f: f64,
    pub p_g: f64,
}

impl ConfidenceLevels {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        check_level(self.p_e)?;
        check_level(self.p_f)?;
        check_level(self.p_g)?;
        if self.p_g <= 5.0 / 6.0 {
            return Err(UncertaintyError::VysochanskiiPetuninRegime { level: self.p_g });
        }
        Ok(())
    }
}

/// One grid node of a confidence tube. Positions are absolute along the
/// path; `t_nom` is the nominal arrival time there, which indexes the F and
/// G bounds for constraint evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubePoint {
    pub p: f64,
    pub t_nom: f64,
    pub e_lo: f64,
    pub e_hi: f64,
    pub f_lo: f64,
    pub f_hi: f64,
    pub g_lo: f64,
    pub g_hi: f64,
}

/// Per-position bounded intervals for the time (E), position (F), and speed
/// (G) deviations of one plan. Queries between grid nodes interpolate
/// linearly and clamp beyond the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTube {
    points: Vec<TubePoint>,
    levels: ConfidenceLevels,
}

impl ConfidenceTube {
    /// Rebuilds a tube from raw grid nodes (e.g. parsed back from a file).
    /// Nodes must be strictly increasing in both position and nominal time,
    /// with ordered bounds.
    pub fn from_points(
        points: Vec<TubePoint>,
        levels: ConfidenceLevels,
    ) -> Result<Self, UncertaintyError> {
        levels.validate()?;
        if points.is_empty() {
            return Err(UncertaintyError::MalformedTube);
        }
        let ordered = points.windows(2).all(|w| w[0].p < w[1].p && w[0].t_nom < w[1].t_nom)
            && points
                .iter()
                .all(|pt| pt.e_lo <= pt.e_hi && pt.f_lo <= pt.f_hi && pt.g_lo <= pt.g_hi);
        if !ordered {
            return Err(UncertaintyError::MalformedTube);
        }
        Ok(Self { points, levels })
    }

    pub fn points(&self) -> &[TubePoint] {
        &self.points
    }

    pub fn levels(&self) -> ConfidenceLevels {
        self.levels
    }

    fn interp(
        &self,
        key: impl Fn(&TubePoint) -> f64,
        x: f64,
        lo: impl Fn(&TubePoint) -> f64,
        hi: impl Fn(&TubePoint) -> f64,
    ) -> (f64, f64) {
        let pts = &self.points;
        if x <= key(&pts[0]) {
            return (lo(&pts[0]), hi(&pts[0]));
        }
        let last = pts.last().unwrap();
        if x >= key(last) {
            return (lo(last), hi(last));
        }
        let idx = match pts.binary_search_by(|pt| key(pt).total_cmp(&x)) {
            Ok(i) => return (lo(&pts[i]), hi(&pts[i])),
            Err(i) => i.clamp(1, pts.len() - 1),
        };
        let (a, b) = (&pts[idx - 1], &pts[idx]);
        let span = key(b) - key(a);
        let w = if span > 0.0 { (x - key(a)) / span } else { 0.0 };
        (lo(a) + w * (lo(b) - lo(a)), hi(a) + w * (hi(b) - hi(a)))
    }

    /// E bounds at an absolute position.
    pub fn e_at_position(&self, p: f64) -> (f64, f64) {
        self.interp(|pt| pt.p, p, |pt| pt.e_lo, |pt| pt.e_hi)
    }

    /// F bounds at a nominal time.
    pub fn f_at_time(&self, t: f64) -> (f64, f64) {
        self.interp(|pt| pt.t_nom, t, |pt| pt.f_lo, |pt| pt.f_hi)
    }

    /// G bounds at a nominal time.
    pub fn g_at_time(&self, t: f64) -> (f64, f64) {
        self.interp(|pt| pt.t_nom, t, |pt| pt.g_lo, |pt| pt.g_hi)
    }
}

/// Builds the confidence tube of one plan on a position grid.
///
/// The grid covers the plan's segment `[0, pf]` (local coordinates) at the
/// given step, plus any `extra` absolute positions that fall inside the
/// segment (conflict points need exact nodes). `p_offset` is the absolute
/// position of the segment origin: the GP posterior is queried at absolute
/// positions while the trajectory inversion runs in segment coordinates.
pub fn build_tube(
    model: &GpModel,
    phi: &PolyCoefficients,
    bc: &BoundaryConditions,
    p_offset: f64,
    grid_step: f64,
    extra: &[f64],
    levels: ConfidenceLevels,
) -> Result<ConfidenceTube, UncertaintyError> {
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return Err(UncertaintyError::InvalidGridStep(grid_step));
    }
    levels.validate()?;

    let mut locals: Vec<f64> = Vec::new();
    let mut p = 0.0;
    while p < bc.pf {
        locals.push(p);
        p += grid_step;
    }
    locals.push(bc.pf);
    for &abs in extra {
        let local = abs - p_offset;
        if local > 0.0 && local < bc.pf {
            locals.push(local);
        }
    }
    locals.sort_by(|a, b| a.total_cmp(b));
    locals.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    let mut points = Vec::with_capacity(locals.len());
    for local in locals {
        let p_abs = p_offset + local;
        let (mu_e, var_e) = model.posterior_at(p_abs);
        let sigma_e = libm::sqrt(var_e.max(0.0));
        let t_nom = time_at_position(phi, bc, local)?;
        let e = TimeDeviationMoments {
            p: p_abs,
            mu_e,
            sigma_e,
        };
        let interval_e = interval_time(mu_e, sigma_e, levels.p_e)?;
        let fm = position_deviation_moments(phi, t_nom, &e);
        let interval_f = interval_position(fm.mu_f, libm::sqrt(fm.sigma_f2), levels.p_f)?;
        let gm = speed_deviation_moments(phi, t_nom, &e);
        let interval_g = interval_speed(gm.mu_g, libm::sqrt(gm.sigma_g2), levels.p_g)?;
        points.push(TubePoint {
            p: p_abs,
            t_nom,
            e_lo: interval_e.lo,
            e_hi: interval_e.hi,
            f_lo: interval_f.lo,
            f_hi: interval_f.hi,
            g_lo: interval_g.lo,
            g_hi: interval_g.hi,
        });
    }
    Ok(ConfidenceTube { points, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{GpModel, Hyperparameters, ObservationSet};
    use crate::trajectory::solve_coefficients;

    #[test]
    fn moments_vanish_without_uncertainty() {
        let bc = BoundaryConditions::new(0.0, 10.0, 4.0, 30.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        let e = TimeDeviationMoments {
            p: 10.0,
            mu_e: 0.0,
            sigma_e: 0.0,
        };
        let g = speed_deviation_moments(&phi, 2.0, &e);
        let f = position_deviation_moments(&phi, 2.0, &e);
        assert_eq!((g.mu_g, g.sigma_g2), (0.0, 0.0));
        assert_eq!((f.mu_f, f.sigma_f2), (0.0, 0.0));
    }

    #[test]
    fn quadratic_standard_normal_example() {
        let (mean, var) = quadratic_normal_moments(1.0, 1.0, 0.0, 1.0);
        assert!((mean - 1.0).abs() < 1e-14);
        assert!((var - 3.0).abs() < 1e-14);
    }

    #[test]
    fn cubic_standard_normal_example() {
        let (mean, var) = cubic_normal_moments(1.0, 0.0, 1.0, 0.0, 1.0);
        assert!(mean.abs() < 1e-14);
        assert!((var - 22.0).abs() < 1e-14);
    }

    #[test]
    fn interval_time_example_level() {
        let iv = interval_time(0.0, 1.0, 0.95).unwrap();
        assert!((iv.hi - 1.959964).abs() < 1e-5);
        assert!((iv.lo + iv.hi).abs() < 1e-12);
    }

    #[test]
    fn interval_position_levels() {
        let iv95 = interval_position(0.0, 1.0, 0.95).unwrap();
        assert!((iv95.hi - 20.0_f64.sqrt()).abs() < 1e-12);
        let iv75 = interval_position(0.0, 1.0, 0.75).unwrap();
        assert!((iv75.hi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interval_speed_level_and_regime() {
        let iv = interval_speed(0.0, 1.0, 0.95).unwrap();
        assert!((iv.hi - (80.0_f64 / 9.0).sqrt()).abs() < 1e-12);
        assert!(matches!(
            interval_speed(0.0, 1.0, 0.8),
            Err(UncertaintyError::VysochanskiiPetuninRegime { .. })
        ));
    }

    #[test]
    fn vp_tighter_than_chebyshev() {
        let vp = interval_speed(0.3, 2.0, 0.95).unwrap();
        let ch = interval_position(0.3, 2.0, 0.95).unwrap();
        assert!(vp.width() < ch.width());
        assert!(vp.lo > ch.lo && vp.hi < ch.hi);
    }

    #[test]
    fn degenerate_sigma_collapses_interval() {
        for build in [interval_time, interval_position, interval_speed] {
            let iv = build(1.25, 0.0, 0.95).unwrap();
            assert_eq!((iv.lo, iv.hi), (1.25, 1.25));
        }
    }

    #[test]
    fn interval_width_grows_with_level() {
        let mut last = 0.0;
        for k in 1..40 {
            let level = 0.9 + 0.0025 * k as f64;
            let width = interval_time(0.0, 1.0, level).unwrap().width();
            assert!(width > last);
            last = width;
        }
    }

    #[test]
    fn interval_widths_scale_linearly_in_sigma() {
        let base = interval_position(0.0, 1.0, 0.95).unwrap().width();
        for &s in &[0.1, 0.5, 2.0, 7.5] {
            let w = interval_position(0.0, s, 0.95).unwrap().width();
            assert!((w - base * s).abs() < 1e-9 * (1.0 + w));
        }
    }

    #[test]
    fn rejects_bad_levels() {
        assert!(interval_time(0.0, 1.0, 0.0).is_err());
        assert!(interval_time(0.0, 1.0, 1.0).is_err());
        assert!(interval_position(0.0, 1.0, 1.2).is_err());
    }

    fn levels_95() -> ConfidenceLevels {
        ConfidenceLevels {
            p_e: 0.95,
            p_f: 0.95,
            p_g: 0.95,
        }
    }

    #[test]
    fn tube_degenerates_with_a_silent_model() {
        let theta = Hyperparameters {
            sigma_s2: 1e-14,
            sigma_n2: 0.0,
            ell_s: 10.0,
        };
        let pairs: Vec<(f64, f64)> = (1..=10).map(|k| (k as f64, 0.0)).collect();
        let obs = ObservationSet::new(&pairs).unwrap();
        let model = GpModel::build(&obs, theta).unwrap();
        let bc = BoundaryConditions::new(0.0, 10.0, 4.0, 30.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        let tube = build_tube(&model, &phi, &bc, 0.0, 1.0, &[], levels_95()).unwrap();
        for pt in tube.points() {
            assert!(pt.e_hi - pt.e_lo < 1e-6);
            assert!(pt.f_hi - pt.f_lo < 1e-5);
            assert!(pt.g_hi - pt.g_lo < 1e-5);
            assert!(pt.e_lo.abs() < 1e-6 && pt.e_hi.abs() < 1e-6);
        }
    }

    #[test]
    fn tube_e_width_grows_past_training_data() {
        let theta = Hyperparameters {
            sigma_s2: 0.01,
            sigma_n2: 1e-6,
            ell_s: 20.0,
        };
        let pairs: Vec<(f64, f64)> = (1..=50)
            .map(|k| {
                let p = k as f64;
                (p, 0.012 * (1.0 + p).ln().powf(1.5))
            })
            .collect();
        let obs = ObservationSet::new(&pairs).unwrap();
        let model = GpModel::build(&obs, theta).unwrap();
        let bc = BoundaryConditions::new(0.0, 13.0, 31.0, 400.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        let tube = build_tube(&model, &phi, &bc, 0.0, 1.0, &[], levels_95()).unwrap();
        let mut last_width = 0.0;
        for pt in tube.points().iter().filter(|pt| pt.p >= 50.0) {
            let width = pt.e_hi - pt.e_lo;
            assert!(width >= last_width - 1e-12, "width shrank at p = {}", pt.p);
            last_width = width;
        }
    }

    #[test]
    fn tube_includes_requested_extra_positions() {
        let theta = Hyperparameters {
            sigma_s2: 0.01,
            sigma_n2: 1e-6,
            ell_s: 20.0,
        };
        let obs = ObservationSet::new(&[(1.0, 0.01), (2.0, 0.02)]).unwrap();
        let model = GpModel::build(&obs, theta).unwrap();
        let bc = BoundaryConditions::new(5.0, 13.0, 36.0, 350.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        let tube =
            build_tube(&model, &phi, &bc, 50.0, 1.0, &[198.25, 10.0], levels_95()).unwrap();
        assert!(tube.points().iter().any(|pt| (pt.p - 198.25).abs() < 1e-9));
        // 10.0 lies behind the segment origin and must be skipped.
        assert!(tube.points().iter().all(|pt| pt.p >= 50.0 - 1e-9));
        // Grid nodes are monotone in both position and nominal time.
        for w in tube.points().windows(2) {
            assert!(w[0].p < w[1].p);
            assert!(w[0].t_nom < w[1].t_nom);
        }
    }

    #[test]
    fn tube_interpolation_clamps_and_interpolates() {
        let theta = Hyperparameters {
            sigma_s2: 0.02,
            sigma_n2: 1e-5,
            ell_s: 15.0,
        };
        let pairs: Vec<(f64, f64)> =
            (1..=20).map(|k| (k as f64 * 2.0, 0.001 * k as f64)).collect();
        let obs = ObservationSet::new(&pairs).unwrap();
        let model = GpModel::build(&obs, theta).unwrap();
        let bc = BoundaryConditions::new(0.0, 10.0, 9.0, 80.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        let tube = build_tube(&model, &phi, &bc, 0.0, 1.0, &[], levels_95()).unwrap();
        let first = tube.points().first().unwrap();
        let last = tube.points().last().unwrap();
        assert_eq!(tube.e_at_position(-5.0), (first.e_lo, first.e_hi));
        assert_eq!(tube.e_at_position(500.0), (last.e_lo, last.e_hi));
        // Interpolated bounds sit between neighbours.
        let (lo, hi) = tube.e_at_position(10.5);
        let (alo, ahi) = tube.e_at_position(10.0);
        let (blo, bhi) = tube.e_at_position(11.0);
        assert!(lo >= alo.min(blo) - 1e-12 && lo <= alo.max(blo) + 1e-12);
        assert!(hi >= ahi.min(bhi) - 1e-12 && hi <= ahi.max(bhi) + 1e-12);
        // Time-indexed queries agree with the node values.
        let mid = &tube.points()[3];
        assert_eq!(tube.f_at_time(mid.t_nom), (mid.f_lo, mid.f_hi));
        assert_eq!(tube.g_at_time(mid.t_nom), (mid.g_lo, mid.g_hi));
    }
}
