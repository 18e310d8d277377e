//! dVOC control law, its phase/magnitude decomposition, the polar (droop)
//! form, and a conventional droop controller used as a baseline.
//!
//! Everything here is a pure function of its arguments. Voltages are peak
//! amplitudes of the αβ vector; powers follow `p = vᵀ i`, `q = vᵀ J i`.

use std::f64::consts::FRAC_PI_2;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A vector in the stationary αβ frame (volts or amperes by context).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlphaBetaVec {
    pub a: f64,
    pub b: f64,
}

impl AlphaBetaVec {
    pub const ZERO: Self = Self { a: 0.0, b: 0.0 };

    pub const fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn from_polar(magnitude: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(magnitude * c, magnitude * s)
    }

    pub fn dot(self, other: Self) -> f64 {
        self.a * other.a + self.b * other.b
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn angle(self) -> f64 {
        self.b.atan2(self.a)
    }

    /// `J v`, a quarter turn counter-clockwise.
    pub fn perp(self) -> Self {
        Self::new(-self.b, self.a)
    }

    pub fn is_finite(self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }
}

impl Add for AlphaBetaVec {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.a + rhs.a, self.b + rhs.b)
    }
}

impl AddAssign for AlphaBetaVec {
    fn add_assign(&mut self, rhs: Self) {
        self.a += rhs.a;
        self.b += rhs.b;
    }
}

impl Sub for AlphaBetaVec {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.a - rhs.a, self.b - rhs.b)
    }
}

impl Neg for AlphaBetaVec {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.a, -self.b)
    }
}

impl Mul<AlphaBetaVec> for f64 {
    type Output = AlphaBetaVec;
    fn mul(self, rhs: AlphaBetaVec) -> AlphaBetaVec {
        AlphaBetaVec::new(self * rhs.a, self * rhs.b)
    }
}

/// Row-major 2×2 real matrix acting on [`AlphaBetaVec`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Self = Self([[1.0, 0.0], [0.0, 1.0]]);
    pub const ZERO: Self = Self([[0.0, 0.0], [0.0, 0.0]]);

    /// The matrix `x·I + y·J`, i.e. the real form of the complex number `x + jy`.
    pub const fn conformal(x: f64, y: f64) -> Self {
        Self([[x, -y], [y, x]])
    }

    pub fn apply(&self, v: AlphaBetaVec) -> AlphaBetaVec {
        let m = &self.0;
        AlphaBetaVec::new(m[0][0] * v.a + m[0][1] * v.b, m[1][0] * v.a + m[1][1] * v.b)
    }

    pub fn matmul(&self, rhs: &Mat2) -> Mat2 {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        let m = &self.0;
        Mat2([[s * m[0][0], s * m[0][1]], [s * m[1][0], s * m[1][1]]])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn transpose(&self) -> Mat2 {
        let m = &self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// Solves `self · x = rhs`; `None` when singular.
    pub fn solve(&self, rhs: AlphaBetaVec) -> Option<AlphaBetaVec> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let m = &self.0;
        Some(AlphaBetaVec::new(
            (m[1][1] * rhs.a - m[0][1] * rhs.b) / det,
            (m[0][0] * rhs.b - m[1][0] * rhs.a) / det,
        ))
    }
}

/// `J = R(π/2)`.
pub const J: Mat2 = Mat2([[0.0, -1.0], [1.0, 0.0]]);

/// Planar rotation by `kappa` radians.
pub fn rotation(kappa: f64) -> Mat2 {
    let (s, c) = kappa.sin_cos();
    Mat2([[c, -s], [s, c]])
}

/// Constants of one dVOC inverter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvocParams {
    /// Synchronization gain (Ω·rad/s).
    pub eta: f64,
    /// Voltage-magnitude gain (℧).
    pub alpha: f64,
    /// Controller rotation angle, `0 ≤ κ ≤ π`.
    pub kappa: f64,
    pub p_star: f64,
    pub q_star: f64,
    /// Peak amplitude set-point of the αβ vector.
    pub v_star: f64,
    /// Nominal frequency (rad/s).
    pub omega0: f64,
}

impl DvocParams {
    pub fn new(
        eta: f64,
        alpha: f64,
        kappa: f64,
        p_star: f64,
        q_star: f64,
        v_star: f64,
        omega0: f64,
    ) -> Result<Self> {
        let params = Self {
            eta,
            alpha,
            kappa,
            p_star,
            q_star,
            v_star,
            omega0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.kappa) {
            problems.push(format!("kappa must lie in [0, pi], got {}", self.kappa));
        }
        if !(self.v_star > 0.0 && self.v_star.is_finite()) {
            problems.push(format!("v_star must be > 0, got {}", self.v_star));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            problems.push(format!("omega0 must be > 0, got {}", self.omega0));
        }
        if !self.p_star.is_finite() || !self.q_star.is_finite() {
            problems.push("power set-points must be finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(problems.join("; ")))
        }
    }
}

/// Controller voltage state `v`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DvocState {
    pub v: AlphaBetaVec,
}

/// Voltage in polar coordinates; `theta` is kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolarState {
    pub magnitude: f64,
    pub theta: f64,
}

impl PolarState {
    pub fn to_rect(self) -> AlphaBetaVec {
        AlphaBetaVec::from_polar(self.magnitude, self.theta)
    }
}

/// Time derivative of a [`PolarState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarRate {
    pub d_magnitude: f64,
    pub d_theta: f64,
}

/// Conventional droop controller constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopParams {
    /// Frequency droop (rad/s per W).
    pub kp: f64,
    /// Voltage droop (V per var).
    pub kq: f64,
    pub omega0: f64,
    pub v_star: f64,
    pub p_star: f64,
    pub q_star: f64,
}

impl DroopParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.kp, self.kq, self.omega0, self.v_star, self.p_star, self.q_star]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParams("droop parameters must be finite".into()));
        }
        if self.v_star <= 0.0 || self.omega0 <= 0.0 {
            return Err(Error::InvalidParams(
                "droop v_star and omega0 must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// `K = (1/v*²) R(κ) [[p*, q*], [−q*, p*]]`.
pub fn gain_matrix_k(params: &DvocParams) -> Mat2 {
    let setpoints = Mat2([[params.p_star, params.q_star], [-params.q_star, params.p_star]]);
    rotation(params.kappa)
        .matmul(&setpoints)
        .scale(1.0 / (params.v_star * params.v_star))
}

/// Normalized magnitude error `φ(v) = (v*² − ‖v‖²)/v*²`.
pub fn magnitude_error_phi(v: AlphaBetaVec, v_star: f64) -> f64 {
    let vs2 = v_star * v_star;
    (vs2 - v.norm_sq()) / vs2
}

/// Phase error `e_θ = K v − R(κ) i_o`.
pub fn phase_error(v: AlphaBetaVec, i_o: AlphaBetaVec, params: &DvocParams) -> AlphaBetaVec {
    gain_matrix_k(params).apply(v) - rotation(params.kappa).apply(i_o)
}

/// Magnitude error `e_v = φ(v) v`.
pub fn magnitude_error(v: AlphaBetaVec, v_star: f64) -> AlphaBetaVec {
    magnitude_error_phi(v, v_star) * v
}

/// dVOC vector field `dv/dt = ω₀ J v + η e_θ + η α e_v`.
pub fn dvoc_rhs(state: DvocState, i_o: AlphaBetaVec, params: &DvocParams) -> AlphaBetaVec {
    let v = state.v;
    params.omega0 * v.perp()
        + params.eta * phase_error(v, i_o, params)
        + (params.eta * params.alpha) * magnitude_error(v, params.v_star)
}

/// dVOC dynamics in polar coordinates given the measured powers.
///
/// Undefined at the origin, where the polar chart is singular.
pub fn dvoc_rhs_polar(state: PolarState, p: f64, q: f64, params: &DvocParams) -> Result<PolarRate> {
    let r = state.magnitude;
    if !(r > 0.0) {
        return Err(Error::PolarSingular);
    }
    let vs2 = params.v_star * params.v_star;
    let r2 = r * r;
    let p_err = params.p_star / vs2 - p / r2;
    let q_err = params.q_star / vs2 - q / r2;
    let (s, c) = params.kappa.sin_cos();
    // R(κ) applied to (p_err, −q_err)
    let radial = c * p_err + s * q_err;
    let angular = s * p_err - c * q_err;
    Ok(PolarRate {
        d_magnitude: params.eta * r * radial
            + params.eta * params.alpha / vs2 * (vs2 - r2) * r,
        d_theta: params.eta * angular + params.omega0,
    })
}

/// Linearized frequency droop `ω ≈ ω₀ + (η/v*²)(p* − p)`.
pub fn droop_approx_freq(p: f64, params: &DvocParams) -> f64 {
    params.omega0 + params.eta / (params.v_star * params.v_star) * (params.p_star - p)
}

/// Linearized steady-state magnitude `‖v‖ ≈ v* + (q* − q)/(α v*)`.
///
/// This is the first-order form as commonly quoted. Expanding the exact
/// magnitude equation around `v*` gives half that slope; see
/// [`droop_linearized_vmag_ss`].
pub fn droop_approx_vmag_ss(q: f64, params: &DvocParams) -> f64 {
    params.v_star + (params.q_star - q) / (params.alpha * params.v_star)
}

/// First-order Taylor expansion of the exact stationary magnitude around `v*`
/// (κ = π/2): `‖v‖ ≈ v* + (q* − q)/(2 α v*)`.
pub fn droop_linearized_vmag_ss(q: f64, params: &DvocParams) -> f64 {
    params.v_star + (params.q_star - q) / (2.0 * params.alpha * params.v_star)
}

/// Conventional droop: `θ̇ = ω₀ + k_p (p* − p)`, `‖v‖̇ = −‖v‖ + v* + k_q (q* − q)`.
pub fn droop_rhs(state: PolarState, p: f64, q: f64, params: &DroopParams) -> PolarRate {
    PolarRate {
        d_magnitude: -state.magnitude + params.v_star + params.kq * (params.q_star - q),
        d_theta: params.omega0 + params.kp * (params.p_star - p),
    }
}

/// Controller angle matched to a line's `ωL/R` ratio, in `[0, π/2]`.
pub fn kappa_from_line(omega0: f64, inductance: f64, resistance: f64) -> Result<f64> {
    if resistance < 0.0 || inductance < 0.0 {
        return Err(Error::InvalidParams(
            "line resistance and inductance must be non-negative".into(),
        ));
    }
    if resistance == 0.0 && inductance == 0.0 {
        return Err(Error::InvalidParams(
            "line resistance and inductance cannot both be zero".into(),
        ));
    }
    let kappa = (omega0 * inductance).atan2(resistance);
    Ok(kappa.clamp(0.0, FRAC_PI_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, PI, TAU};

    fn fig2() -> DvocParams {
        DvocParams::new(43.43, 0.9722, FRAC_PI_2, 0.5, 0.0, 1.0, TAU * 60.0).unwrap()
    }

    fn mat_close(a: Mat2, b: Mat2, tol: f64) {
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.0[i][j] - b.0[i][j]).abs() <= tol, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn rotation_examples() {
        mat_close(rotation(0.0), Mat2::IDENTITY, 0.0);
        mat_close(rotation(FRAC_PI_2), J, 1e-16);
        mat_close(rotation(PI), Mat2::IDENTITY.scale(-1.0), 1e-15);
        let r = rotation(0.7);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-15);
        mat_close(r.matmul(&r.transpose()), Mat2::IDENTITY, 1e-15);
    }

    #[test]
    fn gain_matrix_examples() {
        let mut p = DvocParams::new(1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0).unwrap();
        mat_close(gain_matrix_k(&p), Mat2::IDENTITY, 0.0);

        p.p_star = 0.5;
        p.kappa = FRAC_PI_2;
        mat_close(gain_matrix_k(&p), Mat2([[0.0, -0.5], [0.5, 0.0]]), 1e-16);

        p.p_star = 0.0;
        p.q_star = 0.0;
        mat_close(gain_matrix_k(&p), Mat2::ZERO, 0.0);
    }

    #[test]
    fn gain_matrix_matches_setpoint_form() {
        // (1/v*²) R(κ) (p* I − q* J)
        let p = DvocParams::new(2.0, 1.0, 0.4, 3.0, -1.5, 2.0, 10.0).unwrap();
        let inner = Mat2::IDENTITY.scale(p.p_star);
        let qj = J.scale(-p.q_star);
        let sum = Mat2([
            [inner.0[0][0] + qj.0[0][0], inner.0[0][1] + qj.0[0][1]],
            [inner.0[1][0] + qj.0[1][0], inner.0[1][1] + qj.0[1][1]],
        ]);
        let expected = rotation(p.kappa).matmul(&sum).scale(0.25);
        mat_close(gain_matrix_k(&p), expected, 1e-15);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(magnitude_error_phi(AlphaBetaVec::new(0.6, 0.8), 1.0), 0.0);
        assert_eq!(magnitude_error_phi(AlphaBetaVec::ZERO, 3.0), 1.0);
        assert_eq!(magnitude_error_phi(AlphaBetaVec::new(1.0, 1.0), 1.0), -1.0);
    }

    #[test]
    fn phase_error_examples() {
        let p = DvocParams::new(5.0, 1.0, 0.3, 2.0, 0.7, 1.5, 100.0).unwrap();
        let v = AlphaBetaVec::new(p.v_star, 0.0);
        let i_o = AlphaBetaVec::new(p.p_star / p.v_star, -p.q_star / p.v_star);
        let e = phase_error(v, i_o, &p);
        assert!(e.norm() < 1e-15, "{e:?}");

        let e = phase_error(AlphaBetaVec::new(1.0, 0.0), AlphaBetaVec::ZERO, &fig2());
        assert!(e.a.abs() < 1e-16);
        assert_relative_eq!(e.b, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn phase_error_nonzero_off_magnitude() {
        // v = (2, 0), v* = 1, i_o with vᵀi = p*, vᵀJi = q*.
        let p = DvocParams::new(5.0, 1.0, 0.3, 0.8, 0.2, 1.0, 100.0).unwrap();
        let v = AlphaBetaVec::new(2.0, 0.0);
        // i = (p* v − q* J v)/‖v‖²
        let i_o = (1.0 / v.norm_sq()) * (p.p_star * v - p.q_star * v.perp());
        let (pm, qm) = (v.dot(i_o), v.dot(J.apply(i_o)));
        assert_relative_eq!(pm, p.p_star, epsilon = 1e-15);
        assert_relative_eq!(qm, p.q_star, epsilon = 1e-15);
        // Symbolic reduction: R(κ)(p* v − q* J v)(1/v*² − 1/‖v‖²).
        let factor = 1.0 / (p.v_star * p.v_star) - 1.0 / v.norm_sq();
        let expected = rotation(p.kappa).apply(factor * (p.p_star * v - p.q_star * v.perp()));
        let e = phase_error(v, i_o, &p);
        assert_relative_eq!(e.a, expected.a, epsilon = 1e-14);
        assert_relative_eq!(e.b, expected.b, epsilon = 1e-14);
        assert!(e.norm() > 0.1);
    }

    #[test]
    fn rhs_at_operating_point_is_pure_rotation() {
        let p = DvocParams::new(21.71, 0.9722, FRAC_PI_2, 500.0, -125.0, 169.7, TAU * 60.0)
            .unwrap();
        let v = AlphaBetaVec::new(p.v_star, 0.0);
        let i_o = AlphaBetaVec::new(p.p_star / p.v_star, -p.q_star / p.v_star);
        let d = dvoc_rhs(DvocState { v }, i_o, &p);
        assert!(d.a.abs() < 1e-9, "{d:?}");
        assert_relative_eq!(d.b, p.omega0 * p.v_star, max_relative = 1e-14);

        let d = dvoc_rhs(DvocState::default(), AlphaBetaVec::ZERO, &p);
        assert_eq!(d, AlphaBetaVec::ZERO);
    }

    #[test]
    fn rhs_golden_fig2() {
        // Term-by-term scalar evaluation of ω₀Jv + η(Kv − R(κ)i + αφv) for
        // κ = π/2, v = (1.1, 0), i = (0.4, 0.1), p* = 0.5, q* = 0, v* = 1:
        //   ω₀ J v        = (0, 1.1 ω₀)
        //   K v           = (0, 0.55)           K = [[0, −0.5], [0.5, 0]]
        //   R(π/2) i      = (−0.1, 0.4)
        //   φ             = 1 − 1.21 = −0.21,  α φ v = (−0.21·0.9722·1.1, 0)
        let w0 = TAU * 60.0;
        let eta = 43.43;
        let alpha = 0.9722;
        let expected_a = eta * (0.0 - (-0.1) + alpha * (-0.21) * 1.1);
        let expected_b = 1.1 * w0 + eta * (0.55 - 0.4);
        let d = dvoc_rhs(
            DvocState {
                v: AlphaBetaVec::new(1.1, 0.0),
            },
            AlphaBetaVec::new(0.4, 0.1),
            &fig2(),
        );
        assert_relative_eq!(d.a, expected_a, max_relative = 1e-13);
        assert_relative_eq!(d.b, expected_b, max_relative = 1e-13);
        // Frozen values of the hand evaluation above.
        assert_relative_eq!(d.a, -5.410431226, max_relative = 1e-10);
        assert_relative_eq!(d.b, 421.2047302738527, max_relative = 1e-10);
    }

    #[test]
    fn polar_examples() {
        let p = fig2();
        let at = PolarState {
            magnitude: p.v_star,
            theta: 0.3,
        };
        let r = dvoc_rhs_polar(at, p.p_star, p.q_star, &p).unwrap();
        assert!(r.d_magnitude.abs() < 1e-14);
        assert_relative_eq!(r.d_theta, p.omega0, max_relative = 1e-15);

        let r = dvoc_rhs_polar(at, 0.3, p.q_star, &p).unwrap();
        assert_relative_eq!(
            r.d_theta,
            p.omega0 + p.eta / (p.v_star * p.v_star) * (p.p_star - 0.3),
            max_relative = 1e-14
        );

        let zero = PolarState {
            magnitude: 0.0,
            theta: 0.0,
        };
        assert!(matches!(
            dvoc_rhs_polar(zero, 0.0, 0.0, &p),
            Err(Error::PolarSingular)
        ));
    }

    #[test]
    fn polar_reduces_to_resistive_droop_at_kappa_zero() {
        // κ = 0: ‖v‖̇ couples to p, θ̇ couples to −(q*/v*² − q/‖v‖²).
        let mut p = fig2();
        p.kappa = 0.0;
        p.q_star = 0.2;
        for &(r, pp, qq) in &[(0.9, 0.4, 0.1), (1.2, 0.7, -0.3), (0.5, 0.0, 0.0)] {
            let st = PolarState {
                magnitude: r,
                theta: 0.0,
            };
            let rate = dvoc_rhs_polar(st, pp, qq, &p).unwrap();
            let vs2 = p.v_star * p.v_star;
            let d_mag = p.eta * r * (p.p_star / vs2 - pp / (r * r))
                + p.eta * p.alpha / vs2 * (vs2 - r * r) * r;
            let d_theta = p.omega0 - p.eta * (p.q_star / vs2 - qq / (r * r));
            assert_relative_eq!(rate.d_magnitude, d_mag, max_relative = 1e-12);
            assert_relative_eq!(rate.d_theta, d_theta, max_relative = 1e-12);
        }
    }

    #[test]
    fn polar_reduces_to_final_droop_at_kappa_half_pi() {
        let mut p = fig2();
        p.q_star = -0.1;
        for &(r, pp, qq) in &[(0.9, 0.4, 0.1), (1.2, 0.7, -0.3)] {
            let st = PolarState {
                magnitude: r,
                theta: 1.0,
            };
            let rate = dvoc_rhs_polar(st, pp, qq, &p).unwrap();
            let vs2 = p.v_star * p.v_star;
            let d_theta = p.omega0 + p.eta * (p.p_star / vs2 - pp / (r * r));
            let d_mag = p.eta * (p.q_star / vs2 - qq / (r * r)) * r
                + p.eta * p.alpha / vs2 * (vs2 - r * r) * r;
            assert_relative_eq!(rate.d_magnitude, d_mag, max_relative = 1e-12);
            assert_relative_eq!(rate.d_theta, d_theta, max_relative = 1e-12);
        }
    }

    #[test]
    fn droop_approx_examples() {
        let p = fig2();
        assert_eq!(droop_approx_freq(p.p_star, &p), p.omega0);
        assert_relative_eq!(
            droop_approx_freq(p.p_star - 0.1, &p) - p.omega0,
            4.343,
            max_relative = 1e-12
        );
        let intercept = p.p_star + p.v_star * p.v_star * p.omega0 / p.eta;
        assert!(droop_approx_freq(intercept, &p).abs() < 1e-12);

        assert_eq!(droop_approx_vmag_ss(p.q_star, &p), p.v_star);
        assert_relative_eq!(droop_approx_vmag_ss(0.1, &p), 1.0 - 0.1 / 0.9722, epsilon = 1e-15);
        assert!((droop_approx_vmag_ss(0.1, &p) - 0.8971).abs() < 1e-4);
        let mut stiff = p;
        stiff.alpha = 1e9;
        assert!((droop_approx_vmag_ss(0.1, &stiff) - stiff.v_star).abs() < 1e-9);
    }

    #[test]
    fn conventional_droop_examples() {
        let d = DroopParams {
            kp: 1e-3,
            kq: 0.05,
            omega0: 377.0,
            v_star: 1.0,
            p_star: 0.5,
            q_star: 0.0,
        };
        let r = droop_rhs(
            PolarState {
                magnitude: 1.0,
                theta: 0.0,
            },
            0.5,
            0.0,
            &d,
        );
        assert_eq!((r.d_magnitude, r.d_theta), (0.0, 377.0));

        let r = droop_rhs(
            PolarState {
                magnitude: 1.0,
                theta: 0.0,
            },
            0.5,
            -2.0,
            &d,
        );
        assert_relative_eq!(r.d_magnitude, 0.1, epsilon = 1e-15);

        // k_p = η/v*² reproduces the linearized dVOC frequency law.
        let dv = fig2();
        let d = DroopParams {
            kp: dv.eta / (dv.v_star * dv.v_star),
            kq: 0.0,
            omega0: dv.omega0,
            v_star: dv.v_star,
            p_star: dv.p_star,
            q_star: dv.q_star,
        };
        for pp in [0.2, 0.5, 0.8] {
            let r = droop_rhs(
                PolarState {
                    magnitude: 1.0,
                    theta: 0.0,
                },
                pp,
                0.0,
                &d,
            );
            assert_relative_eq!(r.d_theta, droop_approx_freq(pp, &dv), max_relative = 1e-15);
        }
    }

    #[test]
    fn kappa_from_line_examples() {
        assert_relative_eq!(kappa_from_line(377.0, 1e-3, 0.0).unwrap(), FRAC_PI_2);
        assert_eq!(kappa_from_line(377.0, 0.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(kappa_from_line(100.0, 0.01, 1.0).unwrap(), FRAC_PI_4);
        assert!(kappa_from_line(377.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn params_rejected() {
        assert!(DvocParams::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(DvocParams::new(1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(DvocParams::new(1.0, 1.0, 3.2, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(DvocParams::new(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    fn arb_params() -> impl Strategy<Value = DvocParams> {
        (
            0.1f64..100.0,
            0.1f64..5.0,
            0.0f64..=PI,
            -2.0f64..2.0,
            -2.0f64..2.0,
            0.5f64..3.0,
        )
            .prop_map(|(eta, alpha, kappa, p_star, q_star, v_star)| DvocParams {
                eta,
                alpha,
                kappa,
                p_star,
                q_star,
                v_star,
                omega0: TAU * 60.0,
            })
    }

    fn arb_vec(scale: f64) -> impl Strategy<Value = AlphaBetaVec> {
        (-scale..scale, -scale..scale).prop_map(|(a, b)| AlphaBetaVec::new(a, b))
    }

    proptest! {
        #[test]
        fn decomposition_identity(p in arb_params(), v in arb_vec(3.0), i in arb_vec(3.0)) {
            let direct = dvoc_rhs(DvocState { v }, i, &p);
            let parts = p.omega0 * v.perp()
                + p.eta * phase_error(v, i, &p)
                + (p.eta * p.alpha * magnitude_error_phi(v, p.v_star)) * v;
            let scale = direct.norm().max(1e-300);
            prop_assert!((direct - parts).norm() / scale <= 1e-12);
        }

        #[test]
        fn rotation_invariance(p in arb_params(), v in arb_vec(3.0), i in arb_vec(3.0), psi in -PI..PI) {
            let rot = rotation(psi);
            let lhs = dvoc_rhs(DvocState { v: rot.apply(v) }, rot.apply(i), &p);
            let rhs = rot.apply(dvoc_rhs(DvocState { v }, i, &p));
            prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
        }

        #[test]
        fn equilibrium_characterization(p in arb_params(), theta in -PI..PI, scale in 0.5f64..1.5) {
            let v = AlphaBetaVec::from_polar(p.v_star * scale, theta);
            // Current realizing (p*, q*) exactly at this voltage.
            let i = (1.0 / v.norm_sq()) * (p.p_star * v - p.q_star * v.perp());
            let e_theta = phase_error(v, i, &p).norm();
            let e_v = magnitude_error(v, p.v_star).norm();
            let tol = 1e-12 * (1.0 + p.p_star.abs() + p.q_star.abs());
            let at_setpoint = (scale - 1.0).abs() < 1e-12;
            if at_setpoint {
                prop_assert!(e_theta < tol && e_v < tol);
            } else if (scale - 1.0).abs() > 1e-3 {
                prop_assert!(e_v > 1e-6);
            }
        }

        #[test]
        fn equilibrium_at_exact_setpoint(p in arb_params(), theta in -PI..PI) {
            let v = AlphaBetaVec::from_polar(p.v_star, theta);
            let i = (1.0 / v.norm_sq()) * (p.p_star * v - p.q_star * v.perp());
            let tol = 1e-12 * (1.0 + p.p_star.abs() + p.q_star.abs());
            prop_assert!(phase_error(v, i, &p).norm() < tol);
            prop_assert!(magnitude_error(v, p.v_star).norm() < 1e-12 * p.v_star);
        }

        #[test]
        fn zero_errors_imply_setpoints(p in arb_params(), v in arb_vec(3.0), i in arb_vec(3.0)) {
            // Reverse direction: construct i from zero phase error and check
            // the measured powers reproduce the set-points when ‖v‖ = v*.
            prop_assume!(v.norm() > 0.1);
            let v = (p.v_star / v.norm()) * v;
            let r_inv = rotation(-p.kappa);
            let i_zero = r_inv.apply(gain_matrix_k(&p).apply(v));
            prop_assert!(phase_error(v, i_zero, &p).norm() < 1e-12 * (1.0 + i.norm()));
            let pm = v.dot(i_zero);
            let qm = v.dot(J.apply(i_zero));
            prop_assert!((pm - p.p_star).abs() < 1e-9 * (1.0 + p.p_star.abs()));
            prop_assert!((qm - p.q_star).abs() < 1e-9 * (1.0 + p.q_star.abs()));
        }
    }
}
