//! Cubic nominal-trajectory algebra.
//!
//! A vehicle's nominal motion inside the control zone is the cubic
//! `p(t) = phi3*t^3 + phi2*t^2 + phi1*t + phi0`, pinned down by four
//! boundary conditions: initial position (zero at the segment origin),
//! initial speed, final position, and zero control at the exit. This module
//! solves for the coefficients, evaluates position/speed/control, inverts
//! position to time (Cardano fast path with a monotone-bisection fallback),
//! and computes the attained speed/control ranges and the feasible
//! exit-time window under box limits on speed and control.

use core::fmt;

/// Coefficients below this magnitude are treated as zero when deciding
/// whether the cubic degenerates to a constant-speed segment.
pub const EPS_PHI: f64 = 1e-12;

/// Tolerance on the position residual of the time-trajectory inversion.
pub const INVERSION_TOL: f64 = 1e-9;

/// Bisection tolerance for the feasible exit-time window, in seconds.
pub const WINDOW_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryError {
    /// Boundary conditions violate `tf > t0 >= 0`, `pf > 0`, `v0 > 0`, or finiteness.
    InvalidBoundary,
    /// Queried position lies outside `[0, pf]`.
    PositionOutOfRange { p: f64, pf: f64 },
    /// Motion limits violate `u_min < 0 < u_max` or `0 < v_min < v_max`.
    InvalidLimits,
    /// Initial speed lies outside `[v_min, v_max]`.
    SpeedOutsideLimits { v0: f64 },
    /// No exit time satisfies the speed and control limits.
    EmptyWindow,
}

impl fmt::Display for TrajectoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidBoundary => write!(f, "invalid boundary conditions"),
            Self::PositionOutOfRange { p, pf } => {
                write!(f, "position {p} outside [0, {pf}]")
            }
            Self::InvalidLimits => write!(f, "invalid motion limits"),
            Self::SpeedOutsideLimits { v0 } => {
                write!(f, "initial speed {v0} outside speed limits")
            }
            Self::EmptyWindow => write!(f, "empty feasible exit-time window"),
        }
    }
}

impl core::error::Error for TrajectoryError {}

/// Boundary conditions of one planning segment.
///
/// Position is measured from the segment origin, so the initial position is
/// zero by convention and `pf` is the distance still to cover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryConditions {
    /// Segment start time, s.
    pub t0: f64,
    /// Speed at `t0`, m/s.
    pub v0: f64,
    /// Exit time, s.
    pub tf: f64,
    /// Exit position, m.
    pub pf: f64,
}

impl BoundaryConditions {
    pub fn new(t0: f64, v0: f64, tf: f64, pf: f64) -> Result<Self, TrajectoryError> {
        let bc = Self { t0, v0, tf, pf };
        bc.validate()?;
        Ok(bc)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let finite = self.t0.is_finite()
            && self.v0.is_finite()
            && self.tf.is_finite()
            && self.pf.is_finite();
        if !finite || self.t0 < 0.0 || self.tf <= self.t0 || self.pf <= 0.0 || self.v0 <= 0.0 {
            return Err(TrajectoryError::InvalidBoundary);
        }
        Ok(())
    }

    /// Segment duration `tf - t0`.
    pub fn duration(&self) -> f64 {
        self.tf - self.t0
    }
}

/// The four cubic coefficients defining one nominal motion, in absolute time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyCoefficients {
    pub phi3: f64,
    pub phi2: f64,
    pub phi1: f64,
    pub phi0: f64,
    degenerate: bool,
}

impl PolyCoefficients {
    /// Builds coefficients directly; the degenerate flag is derived from `phi3`.
    pub fn new(phi3: f64, phi2: f64, phi1: f64, phi0: f64) -> Self {
        Self {
            phi3,
            phi2,
            phi1,
            phi0,
            degenerate: phi3.abs() < EPS_PHI,
        }
    }

    /// True when the cubic collapsed to the constant-speed solution; the
    /// Cardano inversion must not be used in that case.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn position(&self, t: f64) -> f64 {
        ((self.phi3 * t + self.phi2) * t + self.phi1) * t + self.phi0
    }

    pub fn speed(&self, t: f64) -> f64 {
        (3.0 * self.phi3 * t + 2.0 * self.phi2) * t + self.phi1
    }

    pub fn control(&self, t: f64) -> f64 {
        6.0 * self.phi3 * t + 2.0 * self.phi2
    }
}

/// Position, speed, and control at one instant.
pub fn eval_state(phi: &PolyCoefficients, t: f64) -> (f64, f64, f64) {
    (phi.position(t), phi.speed(t), phi.control(t))
}

/// Box limits on control input and speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionLimits {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl MotionLimits {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let ok = self.u_min < 0.0
            && self.u_max > 0.0
            && self.v_min > 0.0
            && self.v_min < self.v_max
            && self.u_min.is_finite()
            && self.u_max.is_finite()
            && self.v_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TrajectoryError::InvalidLimits)
        }
    }
}

/// Solves the boundary-value problem for the cubic coefficients.
///
/// With the duration `T = tf - t0` and time shifted to the segment start,
/// the unique solution of `p(t0) = 0`, `v(t0) = v0`, `p(tf) = pf`,
/// `u(tf) = 0` is `phi3 = (v0*T - pf) / (2*T^3)`, `phi2 = -3*phi3*T`,
/// `phi1 = v0`, `phi0 = 0`; the returned coefficients are shifted back to
/// absolute time. When `pf = v0*T` the motion is constant-speed and the
/// degenerate flag is set.
pub fn solve_coefficients(bc: &BoundaryConditions) -> Result<PolyCoefficients, TrajectoryError> {
    bc.validate()?;
    let t0 = bc.t0;
    let duration = bc.duration();
    let phi3_local = (bc.v0 * duration - bc.pf) / (2.0 * duration * duration * duration);

    if phi3_local.abs() < EPS_PHI {
        let mut phi = PolyCoefficients::new(0.0, 0.0, bc.v0, -bc.v0 * t0);
        phi.degenerate = true;
        return Ok(phi);
    }

    let phi2_local = -3.0 * phi3_local * duration;
    // Shift p(s) = phi3*s^3 + phi2*s^2 + v0*s by s = t - t0.
    let phi3 = phi3_local;
    let phi2 = phi2_local - 3.0 * phi3_local * t0;
    let phi1 = bc.v0 - 2.0 * phi2_local * t0 + 3.0 * phi3_local * t0 * t0;
    let phi0 = -bc.v0 * t0 + phi2_local * t0 * t0 - phi3_local * t0 * t0 * t0;
    Ok(PolyCoefficients::new(phi3, phi2, phi1, phi0))
}

/// Reduced-cubic coefficients of the time trajectory.
///
/// Substituting `t = s - phi2/(3*phi3)` into `p(t) = p` yields the depressed
/// cubic `s^3 + omega0*s + (omega1 + omega2*p) = 0`, whose closed-form root
/// plus the back-shift `omega3` is the Cardano time trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardanoContext {
    pub omega0: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
}

impl CardanoContext {
    /// None when the cubic is degenerate (`phi3 ~ 0`).
    pub fn from_coefficients(phi: &PolyCoefficients) -> Option<Self> {
        if phi.is_degenerate() {
            return None;
        }
        let b = phi.phi2 / phi.phi3;
        let c = phi.phi1 / phi.phi3;
        let omega0 = c - b * b / 3.0;
        let omega1 = (2.0 * b * b * b - 9.0 * b * c) / 27.0 + phi.phi0 / phi.phi3;
        let omega2 = -1.0 / phi.phi3;
        let omega3 = -b / 3.0;
        Some(Self {
            omega0,
            omega1,
            omega2,
            omega3,
        })
    }

    /// Discriminant of the depressed cubic at position `p`; the closed-form
    /// single-root formula is valid only when this is strictly positive.
    pub fn discriminant(&self, p: f64) -> f64 {
        let q = self.omega1 + self.omega2 * p;
        0.25 * q * q + self.omega0 * self.omega0 * self.omega0 / 27.0
    }

    /// Closed-form root when the discriminant is positive.
    ///
    /// The two cube roots are combined through their product identity
    /// `A*B = -omega0/3` to avoid the cancellation that the textbook form
    /// suffers when the discriminant barely exceeds `(q/2)^2`.
    pub fn time_at(&self, p: f64) -> Option<f64> {
        let q = self.omega1 + self.omega2 * p;
        let disc = 0.25 * q * q + self.omega0 * self.omega0 * self.omega0 / 27.0;
        if disc <= 0.0 {
            return None;
        }
        let sqrt_disc = libm::sqrt(disc);
        let s = if q <= 0.0 {
            let a = libm::cbrt(-0.5 * q + sqrt_disc);
            let b = if a != 0.0 {
                -self.omega0 / (3.0 * a)
            } else {
                libm::cbrt(-0.5 * q - sqrt_disc)
            };
            a + b
        } else {
            let b = libm::cbrt(-0.5 * q - sqrt_disc);
            let a = if b != 0.0 {
                -self.omega0 / (3.0 * b)
            } else {
                libm::cbrt(-0.5 * q + sqrt_disc)
            };
            a + b
        };
        Some(s + self.omega3)
    }
}

/// Inverts the position trajectory: the unique `t` in `[t0, tf]` with
/// `p(t) = p`, to a position residual of at most [`INVERSION_TOL`].
///
/// Fast path: the Cardano closed form when its discriminant condition holds,
/// polished by two Newton steps. Degenerate coefficients are inverted
/// analytically; everything else falls back to bisection on the monotone
/// cubic (speed stays positive on the segment, so the root is unique).
pub fn time_at_position(
    phi: &PolyCoefficients,
    bc: &BoundaryConditions,
    p: f64,
) -> Result<f64, TrajectoryError> {
    if !p.is_finite() || p < -INVERSION_TOL || p > bc.pf + INVERSION_TOL {
        return Err(TrajectoryError::PositionOutOfRange { p, pf: bc.pf });
    }
    let p = p.clamp(0.0, bc.pf);
    let p_abs = p + phi.position(bc.t0);

    if phi.is_degenerate() {
        if phi.phi2.abs() < EPS_PHI {
            // Constant speed.
            return Ok(bc.t0 + p / phi.phi1);
        }
        // Constant acceleration: solve the quadratic, keeping the root on
        // the increasing branch that contains [t0, tf].
        let a = phi.phi2;
        let b = phi.phi1;
        let c = phi.phi0 - p_abs;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = libm::sqrt(disc);
            let r1 = (-b + sq) / (2.0 * a);
            let r2 = (-b - sq) / (2.0 * a);
            for r in [r1, r2] {
                if r >= bc.t0 - 1e-9 && r <= bc.tf + 1e-9 {
                    return Ok(r.clamp(bc.t0, bc.tf));
                }
            }
        }
        return Ok(bisect_time(phi, bc, p_abs));
    }

    if let Some(ctx) = CardanoContext::from_coefficients(phi) {
        if let Some(mut t) = ctx.time_at(p_abs) {
            // Two Newton polish steps recover the digits the surd form loses.
            for _ in 0..2 {
                let v = phi.speed(t);
                if v.abs() < 1e-12 {
                    break;
                }
                t -= (phi.position(t) - p_abs) / v;
            }
            if t >= bc.t0 - 1e-6
                && t <= bc.tf + 1e-6
                && (phi.position(t) - p_abs).abs() <= INVERSION_TOL
            {
                return Ok(t.clamp(bc.t0, bc.tf));
            }
        }
    }

    Ok(bisect_time(phi, bc, p_abs))
}

/// Safeguarded bisection for `position(t) = p_abs` on `[t0, tf]`.
fn bisect_time(phi: &PolyCoefficients, bc: &BoundaryConditions, p_abs: f64) -> f64 {
    let (mut lo, mut hi) = (bc.t0, bc.tf);
    let increasing = phi.position(hi) >= phi.position(lo);
    for _ in 0..200 {
        if hi - lo <= 5e-14 * hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let below = phi.position(mid) < p_abs;
        if below == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..2 {
        let v = phi.speed(t);
        if v.abs() < 1e-12 {
            break;
        }
        t = (t - (phi.position(t) - p_abs) / v).clamp(bc.t0, bc.tf);
    }
    t
}

/// Exact minimum and maximum of the quadratic speed over `[t0, tf]`:
/// endpoints plus the interior stationary point `-phi2/(3*phi3)` when it
/// exists.
pub fn speed_range(phi: &PolyCoefficients, t0: f64, tf: f64) -> (f64, f64) {
    let mut lo = phi.speed(t0).min(phi.speed(tf));
    let mut hi = phi.speed(t0).max(phi.speed(tf));
    if phi.phi3.abs() >= EPS_PHI {
        let t_star = -phi.phi2 / (3.0 * phi.phi3);
        if t_star > t0 && t_star < tf {
            let v = phi.speed(t_star);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// Control is linear in time, so its range over `[t0, tf]` is spanned by the
/// endpoints.
pub fn control_range(phi: &PolyCoefficients, t0: f64, tf: f64) -> (f64, f64) {
    let a = phi.control(t0);
    let b = phi.control(tf);
    (a.min(b), a.max(b))
}

/// True when the plan's speed and control stay within the limits over
/// `[t0, tf]`, with a 1e-9 slack for boundary-exact plans.
pub fn within_limits(phi: &PolyCoefficients, t0: f64, tf: f64, limits: &MotionLimits) -> bool {
    let tol = 1e-9;
    let (v_lo, v_hi) = speed_range(phi, t0, tf);
    let (u_lo, u_hi) = control_range(phi, t0, tf);
    v_lo >= limits.v_min - tol
        && v_hi <= limits.v_max + tol
        && u_lo >= limits.u_min - tol
        && u_hi <= limits.u_max + tol
}

/// Computes the window `[tf_lo, tf_hi]` of exit times whose solved cubic
/// respects the speed and control limits.
///
/// The constant-speed exit `t0 + pf/v0` is always feasible, and constraint
/// violation is monotone as `tf` moves away from it, so each boundary is
/// located by bisection inside the bracket `[t0 + pf/v_max, t0 + pf/v_min]`
/// to [`WINDOW_TOL`].
pub fn feasible_exit_window(
    t0: f64,
    v0: f64,
    pf: f64,
    limits: &MotionLimits,
) -> Result<(f64, f64), TrajectoryError> {
    limits.validate()?;
    if !(v0 >= limits.v_min && v0 <= limits.v_max) {
        return Err(TrajectoryError::SpeedOutsideLimits { v0 });
    }
    if !(pf > 0.0) || !pf.is_finite() || !(t0 >= 0.0) || !t0.is_finite() {
        return Err(TrajectoryError::InvalidBoundary);
    }

    let feasible = |tf: f64| -> bool {
        match solve_coefficients(&BoundaryConditions { t0, v0, tf, pf }) {
            Ok(phi) => within_limits(&phi, t0, tf, limits),
            Err(_) => false,
        }
    };

    let t_cruise = t0 + pf / v0;
    if !feasible(t_cruise) {
        return Err(TrajectoryError::EmptyWindow);
    }

    let bracket_lo = t0 + pf / limits.v_max;
    let tf_lo = if feasible(bracket_lo) {
        bracket_lo
    } else {
        let (mut bad, mut good) = (bracket_lo, t_cruise);
        while good - bad > WINDOW_TOL {
            let mid = 0.5 * (bad + good);
            if feasible(mid) {
                good = mid;
            } else {
                bad = mid;
            }
        }
        good
    };

    let bracket_hi = t0 + pf / limits.v_min;
    let tf_hi = if feasible(bracket_hi) {
        bracket_hi
    } else {
        let (mut good, mut bad) = (t_cruise, bracket_hi);
        while bad - good > WINDOW_TOL {
            let mid = 0.5 * (good + bad);
            if feasible(mid) {
                good = mid;
            } else {
                bad = mid;
            }
        }
        good
    };

    Ok((tf_lo, tf_hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_bc() -> BoundaryConditions {
        BoundaryConditions::new(0.0, 10.0, 4.0, 30.0).unwrap()
    }

    fn example_phi() -> PolyCoefficients {
        solve_coefficients(&example_bc()).unwrap()
    }

    #[test]
    fn solve_matches_hand_computed_coefficients() {
        let phi = example_phi();
        assert!((phi.phi3 - 0.078125).abs() < 1e-15);
        assert!((phi.phi2 - (-0.9375)).abs() < 1e-15);
        assert!((phi.phi1 - 10.0).abs() < 1e-15);
        assert!(phi.phi0.abs() < 1e-15);
        assert!(!phi.is_degenerate());
    }

    #[test]
    fn constant_speed_case_is_degenerate() {
        let bc = BoundaryConditions::new(0.0, 10.0, 2.0, 20.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        assert!(phi.is_degenerate());
        assert_eq!(
            (phi.phi3, phi.phi2, phi.phi1, phi.phi0),
            (0.0, 0.0, 10.0, 0.0)
        );
        assert_eq!(phi.control(1.3), 0.0);
    }

    #[test]
    fn boundary_residuals_vanish() {
        let bc = example_bc();
        let phi = example_phi();
        assert!((phi.position(bc.t0)).abs() <= 1e-9);
        assert!((phi.speed(bc.t0) - bc.v0).abs() <= 1e-9);
        assert!((phi.position(bc.tf) - bc.pf).abs() <= 1e-9);
        assert!((phi.control(bc.tf)).abs() <= 1e-9);
    }

    #[test]
    fn boundary_residuals_with_time_shift() {
        let bc = BoundaryConditions::new(17.25, 13.4, 51.0, 400.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        assert!((phi.position(bc.t0)).abs() <= 1e-9);
        assert!((phi.speed(bc.t0) - bc.v0).abs() <= 1e-9);
        assert!((phi.position(bc.tf) - bc.pf).abs() <= 1e-9);
        assert!((phi.control(bc.tf)).abs() <= 1e-9);
    }

    #[test]
    fn eval_state_example() {
        let phi = example_phi();
        let (p, v, u) = eval_state(&phi, 4.0);
        assert!((p - 30.0).abs() < 1e-12);
        assert!((v - 6.25).abs() < 1e-12);
        assert!(u.abs() < 1e-12);
        // At t = 0 the state reads off the low-order coefficients.
        let (p0, v0, u0) = eval_state(&phi, 0.0);
        assert_eq!(p0, phi.phi0);
        assert_eq!(v0, phi.phi1);
        assert_eq!(u0, 2.0 * phi.phi2);
    }

    #[test]
    fn time_at_position_boundary_identities() {
        let bc = example_bc();
        let phi = example_phi();
        assert!(time_at_position(&phi, &bc, 0.0).unwrap().abs() <= 1e-9);
        assert!((time_at_position(&phi, &bc, 30.0).unwrap() - 4.0).abs() <= 1e-9);
    }

    #[test]
    fn time_at_position_round_trip() {
        let bc = example_bc();
        let phi = example_phi();
        for k in 0..=100 {
            let p = bc.pf * (k as f64) / 100.0;
            let t = time_at_position(&phi, &bc, p).unwrap();
            assert!((phi.position(t) - p).abs() <= 1e-9, "p = {p}");
        }
    }

    #[test]
    fn cardano_matches_bisection_midpoint() {
        let bc = example_bc();
        let phi = example_phi();
        let t = time_at_position(&phi, &bc, 15.0).unwrap();
        let t_bis = bisect_time(&phi, &bc, 15.0);
        assert!((t - t_bis).abs() <= 1e-9);
        assert!(t > 0.0 && t < 4.0);
    }

    #[test]
    fn rejects_position_outside_range() {
        let bc = example_bc();
        let phi = example_phi();
        assert!(matches!(
            time_at_position(&phi, &bc, -1.0),
            Err(TrajectoryError::PositionOutOfRange { .. })
        ));
        assert!(matches!(
            time_at_position(&phi, &bc, 31.0),
            Err(TrajectoryError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn speed_range_example() {
        let phi = example_phi();
        let (lo, hi) = speed_range(&phi, 0.0, 4.0);
        assert!((lo - 6.25).abs() < 1e-12);
        assert!((hi - 10.0).abs() < 1e-12);
    }

    #[test]
    fn speed_range_degenerate() {
        let bc = BoundaryConditions::new(0.0, 10.0, 2.0, 20.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        let (lo, hi) = speed_range(&phi, 0.0, 2.0);
        assert_eq!((lo, hi), (10.0, 10.0));
    }

    #[test]
    fn ranges_match_dense_grid() {
        let bc = BoundaryConditions::new(1.0, 9.0, 6.5, 33.0).unwrap();
        let phi = solve_coefficients(&bc).unwrap();
        let (v_lo, v_hi) = speed_range(&phi, bc.t0, bc.tf);
        let (u_lo, u_hi) = control_range(&phi, bc.t0, bc.tf);
        let mut gv = (f64::INFINITY, f64::NEG_INFINITY);
        let mut gu = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..=10_000 {
            let t = bc.t0 + (bc.tf - bc.t0) * (k as f64) / 10_000.0;
            gv = (gv.0.min(phi.speed(t)), gv.1.max(phi.speed(t)));
            gu = (gu.0.min(phi.control(t)), gu.1.max(phi.control(t)));
        }
        assert!((v_lo - gv.0).abs() < 1e-6 && (v_hi - gv.1).abs() < 1e-6);
        assert!((u_lo - gu.0).abs() < 1e-6 && (u_hi - gu.1).abs() < 1e-6);
    }

    #[test]
    fn control_range_example() {
        let phi = example_phi();
        let (lo, hi) = control_range(&phi, 0.0, 4.0);
        assert!((lo - (-1.875)).abs() < 1e-12);
        assert!(hi.abs() < 1e-12);
    }

    fn section_limits() -> MotionLimits {
        MotionLimits {
            u_min: -2.0,
            u_max: 2.0,
            v_min: 0.25,
            v_max: 30.0,
        }
    }

    #[test]
    fn window_contains_cruise_time() {
        let limits = section_limits();
        let (lo, hi) = feasible_exit_window(0.0, 13.0, 400.0, &limits).unwrap();
        let cruise = 400.0 / 13.0;
        assert!(lo <= cruise && cruise <= hi);
    }

    #[test]
    fn window_endpoints_sit_on_the_feasibility_boundary() {
        let limits = section_limits();
        let (lo, hi) = feasible_exit_window(0.0, 13.0, 400.0, &limits).unwrap();
        let check = |tf: f64| {
            let bc = BoundaryConditions::new(0.0, 13.0, tf, 400.0).unwrap();
            let phi = solve_coefficients(&bc).unwrap();
            within_limits(&phi, bc.t0, bc.tf, &limits)
        };
        assert!(check(lo) && check(hi));
        assert!(!check(lo - 0.01));
        assert!(!check(hi + 0.01));
    }

    #[test]
    fn window_rejects_speed_outside_limits() {
        let limits = section_limits();
        assert!(matches!(
            feasible_exit_window(0.0, 31.0, 400.0, &limits),
            Err(TrajectoryError::SpeedOutsideLimits { .. })
        ));
    }
}
