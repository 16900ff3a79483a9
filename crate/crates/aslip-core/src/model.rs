//! Actuated SLIP model: a point-mass body on a massless leg in which a rigid
//! position actuator (set point `r0`, commanded by its acceleration `u`) sits
//! in series with a damped linear spring (deflection `rp`).
//!
//! All quantities are nondimensional: lengths in units of the maximum leg
//! length `l0`, mass in units of the body mass, time in units of
//! `sqrt(l0 / g)`, so the default gravity is 1.
//!
//! The canonical state ordering used by every array-facing API is
//! `[x, y, xdot, ydot, r0, r0dot, rp]`. Stance states are expressed in the
//! contact frame whose origin is the foot contact point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of continuous states.
pub const STATE_DIM: usize = 7;

/// Leg radius below which stance geometry is treated as singular.
pub const SINGULAR_RADIUS: f64 = 1e-9;

/// Errors raised by model-level evaluations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("singular stance geometry (leg radius {r:.3e})")]
    SingularState { r: f64 },
    #[error("foot is {gap:.3e} from the ground at touchdown (tolerance {tol:.1e})")]
    InconsistentTouchdown { gap: f64, tol: f64 },
}

/// Physical parameters of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Params {
    /// Body mass `m`.
    pub mass: f64,
    /// Maximum leg set-point length `l0` (also the length unit).
    pub leg_length: f64,
    /// Gravitational acceleration `g`.
    pub gravity: f64,
    /// Series spring stiffness `k`.
    pub stiffness: f64,
    /// Series damper coefficient `b`.
    pub damping: f64,
    /// Set-point acceleration limit `a_max` (|u| <= a_max).
    pub max_accel: f64,
    /// Minimum set-point length, fixed at `l0 / 2`.
    pub min_setpoint: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            mass: 1.0,
            leg_length: 1.0,
            gravity: 1.0,
            stiffness: 20.0,
            damping: 0.89,
            max_accel: 5.0,
            min_setpoint: 0.5,
        }
    }
}

impl Params {
    /// Checks positivity and the fixed relation `min_setpoint = l0 / 2`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("mass", self.mass),
            ("leg_length", self.leg_length),
            ("gravity", self.gravity),
            ("stiffness", self.stiffness),
            ("damping", self.damping),
            ("max_accel", self.max_accel),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ModelError::InvalidParams(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if (self.min_setpoint - 0.5 * self.leg_length).abs() > 1e-12 * self.leg_length {
            return Err(ModelError::InvalidParams(format!(
                "min_setpoint must equal leg_length / 2, got {}",
                self.min_setpoint
            )));
        }
        Ok(())
    }

    /// Box bounds `[l0/2, l0]` on the set-point length.
    pub fn setpoint_bounds(&self) -> (f64, f64) {
        (self.min_setpoint, self.leg_length)
    }
}

/// Continuous state of the model. See the module docs for the frame
/// conventions; `rp` is the passive spring deflection (negative in
/// compression).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub xdot: f64,
    pub ydot: f64,
    pub r0: f64,
    pub r0dot: f64,
    pub rp: f64,
}

impl State {
    pub fn as_array(&self) -> [f64; STATE_DIM] {
        [
            self.x, self.y, self.xdot, self.ydot, self.r0, self.r0dot, self.rp,
        ]
    }

    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        State {
            x: a[0],
            y: a[1],
            xdot: a[2],
            ydot: a[3],
            r0: a[4],
            r0dot: a[5],
            rp: a[6],
        }
    }

    /// Distance from the frame origin to the body.
    pub fn leg_radius(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Radial geometry used by the stance expressions.
    pub(crate) fn polar(&self) -> Result<Polar, ModelError> {
        let r = self.leg_radius();
        if r < SINGULAR_RADIUS {
            return Err(ModelError::SingularState { r });
        }
        let nx = self.x / r;
        let ny = self.y / r;
        let rdot = nx * self.xdot + ny * self.ydot;
        Ok(Polar { r, rdot, nx, ny })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Polar {
    pub r: f64,
    pub rdot: f64,
    pub nx: f64,
    pub ny: f64,
}

/// Time derivative of each [`State`] field, in the same ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deriv {
    pub xdot: f64,
    pub ydot: f64,
    pub xddot: f64,
    pub yddot: f64,
    pub r0dot: f64,
    pub r0ddot: f64,
    pub rpdot: f64,
}

impl Deriv {
    pub fn as_array(&self) -> [f64; STATE_DIM] {
        [
            self.xdot,
            self.ydot,
            self.xddot,
            self.yddot,
            self.r0dot,
            self.r0ddot,
            self.rpdot,
        ]
    }
}

/// Hybrid mode of the half gait cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    FlightDescent,
    Stance,
    FlightAscent,
}

impl Mode {
    pub fn is_flight(&self) -> bool {
        matches!(self, Mode::FlightDescent | Mode::FlightAscent)
    }
}

/// Flight dynamics: ballistic body, double-integrator set point, and
/// first-order spring unloading `rp' = -(k/b) rp` from the series
/// spring-damper with no ground force.
pub fn flight_deriv(s: &State, u: f64, p: &Params) -> Result<Deriv, ModelError> {
    if !(p.damping > 0.0) {
        return Err(ModelError::InvalidParams(
            "flight spring unloading requires positive damping".into(),
        ));
    }
    Ok(Deriv {
        xdot: s.xdot,
        ydot: s.ydot,
        xddot: 0.0,
        yddot: -p.gravity,
        r0dot: s.r0dot,
        r0ddot: u,
        rpdot: -(p.stiffness / p.damping) * s.rp,
    })
}

/// Axial leg force in stance: `F = k (r0 - r) + b (r0' - r')`, positive in
/// compression (pushing the body away from the contact point).
pub fn leg_force(s: &State, p: &Params) -> Result<f64, ModelError> {
    let polar = s.polar()?;
    Ok(p.stiffness * (s.r0 - polar.r) + p.damping * (s.r0dot - polar.rdot))
}

/// Stance dynamics in the contact frame: the leg force acts along the leg
/// direction, the set point is a double integrator, and the spring deflection
/// follows the dependent relation `rp = r - r0` (so `rp' = r' - r0'`).
pub fn stance_deriv(s: &State, u: f64, p: &Params) -> Result<Deriv, ModelError> {
    let polar = s.polar()?;
    let force = p.stiffness * (s.r0 - polar.r) + p.damping * (s.r0dot - polar.rdot);
    let accel = force / (p.mass * polar.r);
    Ok(Deriv {
        xdot: s.xdot,
        ydot: s.ydot,
        xddot: s.x * accel,
        yddot: s.y * accel - p.gravity,
        r0dot: s.r0dot,
        r0ddot: u,
        rpdot: polar.rdot - s.r0dot,
    })
}

/// Touchdown guard in the prospective contact frame: distance from the
/// contact point to the body minus the natural leg length `r0 + rp`.
/// Touchdown is the crossing from positive to non-positive.
pub fn touchdown_guard(s: &State) -> f64 {
    s.leg_radius() - (s.r0 + s.rp)
}

/// Liftoff guard: the axial leg force. Liftoff is the crossing from positive
/// to non-positive.
pub fn liftoff_guard(s: &State, p: &Params) -> Result<f64, ModelError> {
    leg_force(s, p)
}

/// Maps a world-frame touchdown state into the contact frame of the foot
/// placed at leg angle `phi` (measured from vertical, positive forward).
///
/// Velocities and leg states are continuous; only the position origin moves
/// to the contact point, so the body lands at `(-L sin phi, L cos phi)` with
/// `L = r0 + rp`. The foot must lie on the ground within `tol`.
pub fn touchdown_reset(
    s: &State,
    phi: f64,
    ground_y: f64,
    tol: f64,
) -> Result<(State, [f64; 2]), ModelError> {
    let leg = s.r0 + s.rp;
    let foot = [s.x + leg * phi.sin(), s.y - leg * phi.cos()];
    let gap = foot[1] - ground_y;
    if gap.abs() > tol {
        return Err(ModelError::InconsistentTouchdown { gap, tol });
    }
    let contact = [foot[0], ground_y];
    Ok((
        State {
            x: -leg * phi.sin(),
            y: s.y - ground_y,
            ..*s
        },
        contact,
    ))
}

/// Maps a contact-frame liftoff state back to the world frame by restoring
/// the contact point offset. Velocities and leg states are continuous.
pub fn liftoff_reset(s: &State, contact: [f64; 2]) -> State {
    State {
        x: s.x + contact[0],
        y: s.y + contact[1],
        ..*s
    }
}

/// Mode-dispatched dynamics.
pub fn mode_deriv(mode: Mode, s: &State, u: f64, p: &Params) -> Result<Deriv, ModelError> {
    match mode {
        Mode::FlightDescent | Mode::FlightAscent => flight_deriv(s, u, p),
        Mode::Stance => stance_deriv(s, u, p),
    }
}

/// State and input Jacobians `(A, B)` of the mode dynamics, with
/// `A[i][j] = d f_i / d state_j` in the canonical ordering and `B = df/du`.
pub fn mode_jacobian(
    mode: Mode,
    s: &State,
    p: &Params,
) -> Result<([[f64; STATE_DIM]; STATE_DIM], [f64; STATE_DIM]), ModelError> {
    let mut a = [[0.0; STATE_DIM]; STATE_DIM];
    let mut b = [0.0; STATE_DIM];
    b[5] = 1.0;
    a[0][2] = 1.0;
    a[1][3] = 1.0;
    a[4][5] = 1.0;
    match mode {
        Mode::FlightDescent | Mode::FlightAscent => {
            if !(p.damping > 0.0) {
                return Err(ModelError::InvalidParams(
                    "flight spring unloading requires positive damping".into(),
                ));
            }
            a[6][6] = -(p.stiffness / p.damping);
        }
        Mode::Stance => {
            let polar = s.polar()?;
            let Polar { r, rdot, nx, ny } = polar;
            let force = p.stiffness * (s.r0 - r) + p.damping * (s.r0dot - rdot);
            // Partials of rdot = (x xdot + y ydot) / r.
            let rd_x = (s.xdot - rdot * nx) / r;
            let rd_y = (s.ydot - rdot * ny) / r;
            // Partials of the axial force.
            let f_x = -p.stiffness * nx - p.damping * rd_x;
            let f_y = -p.stiffness * ny - p.damping * rd_y;
            let f_xd = -p.damping * nx;
            let f_yd = -p.damping * ny;
            let f_r0 = p.stiffness;
            let f_r0d = p.damping;
            // a_x = x F / (m r), a_y = y F / (m r) - g.
            let mr = p.mass * r;
            let ax_geom = force / mr;
            for (row, pos) in [(2usize, s.x), (3usize, s.y)] {
                a[row][0] = pos * f_x / mr - pos * force * nx / (mr * r);
                a[row][1] = pos * f_y / mr - pos * force * ny / (mr * r);
                a[row][2] = pos * f_xd / mr;
                a[row][3] = pos * f_yd / mr;
                a[row][4] = pos * f_r0 / mr;
                a[row][5] = pos * f_r0d / mr;
            }
            a[2][0] += ax_geom;
            a[3][1] += ax_geom;
            // rpdot = rdot - r0dot.
            a[6][0] = rd_x;
            a[6][1] = rd_y;
            a[6][2] = nx;
            a[6][3] = ny;
            a[6][5] = -1.0;
        }
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p() -> Params {
        Params::default()
    }

    fn zero_state() -> State {
        State {
            x: 0.0,
            y: 0.0,
            xdot: 0.0,
            ydot: 0.0,
            r0: 0.0,
            r0dot: 0.0,
            rp: 0.0,
        }
    }

    #[test]
    fn default_params_are_valid() {
        p().validate().unwrap();
        assert_eq!(p().setpoint_bounds(), (0.5, 1.0));
    }

    #[test]
    fn rejects_bad_params() {
        let mut bad = p();
        bad.stiffness = 0.0;
        assert!(matches!(bad.validate(), Err(ModelError::InvalidParams(_))));
        let mut bad = p();
        bad.min_setpoint = 0.4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flight_deriv_matches_hand_values() {
        // Oracle: ballistic body, rp' = -(k/b) rp evaluated by hand.
        let s = State {
            y: 1.2,
            xdot: 0.8,
            ydot: -0.1,
            r0: 0.9,
            r0dot: 0.05,
            rp: 0.01,
            ..zero_state()
        };
        let d = flight_deriv(&s, 0.3, &p()).unwrap();
        assert_eq!(d.xdot, 0.8);
        assert_eq!(d.ydot, -0.1);
        assert_eq!(d.xddot, 0.0);
        assert_eq!(d.yddot, -1.0);
        assert_eq!(d.r0dot, 0.05);
        assert_eq!(d.r0ddot, 0.3);
        assert_relative_eq!(d.rpdot, -0.224_719_101_123_595_5, max_relative = 1e-12);
    }

    #[test]
    fn flight_deriv_requires_damping() {
        let mut bad = p();
        bad.damping = 0.0;
        assert!(flight_deriv(&zero_state(), 0.0, &bad).is_err());
    }

    #[test]
    fn leg_force_matches_hand_values() {
        // Pure spring: k (1 - 0.95) = 1.
        let s = State {
            y: 0.95,
            r0: 1.0,
            ..zero_state()
        };
        assert_relative_eq!(leg_force(&s, &p()).unwrap(), 1.0, max_relative = 1e-12);
        // Pure damper: b (0 - (-0.5)) = 0.445.
        let s = State {
            y: 1.0,
            ydot: -0.5,
            r0: 1.0,
            ..zero_state()
        };
        assert_relative_eq!(leg_force(&s, &p()).unwrap(), 0.445, max_relative = 1e-12);
    }

    #[test]
    fn stance_deriv_vertical_equilibrium_of_forces() {
        // Directly under the foot with F = 1: vertical acceleration cancels g.
        let s = State {
            y: 0.95,
            r0: 1.0,
            ..zero_state()
        };
        let d = stance_deriv(&s, 0.0, &p()).unwrap();
        assert_relative_eq!(d.xddot, 0.0, epsilon = 1e-15);
        // F = k (1 - 0.95) = 1 = m g, aligned with the leg, so yddot = 0.
        assert_relative_eq!(d.yddot, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn stance_deriv_matches_hand_values() {
        // Oracle: r = sqrt(0.85), F = k (1 - r), xddot = 0.2 F / r evaluated
        // from the closed forms.
        let s = State {
            x: 0.2,
            y: 0.9,
            r0: 1.0,
            ..zero_state()
        };
        let r = 0.85_f64.sqrt();
        let force = 20.0 * (1.0 - r);
        let d = stance_deriv(&s, 0.0, &p()).unwrap();
        assert_relative_eq!(d.xddot, 0.2 * force / r, max_relative = 1e-12);
        assert_relative_eq!(d.yddot, 0.9 * force / r - 1.0, max_relative = 1e-12);
        assert_relative_eq!(d.rpdot, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn stance_deriv_rejects_singular_geometry() {
        let s = State {
            r0: 1.0,
            ..zero_state()
        };
        assert!(matches!(
            stance_deriv(&s, 0.0, &p()),
            Err(ModelError::SingularState { .. })
        ));
    }

    #[test]
    fn touchdown_guard_matches_hand_values() {
        let s = State {
            x: 0.2,
            y: 0.9,
            r0: 0.95,
            ..zero_state()
        };
        assert_relative_eq!(
            touchdown_guard(&s),
            0.85_f64.sqrt() - 0.95,
            max_relative = 1e-12
        );
    }

    #[test]
    fn liftoff_guard_matches_hand_values() {
        // k (0.99 - 1) + b (0 - (-0.5)) = -0.2 + 0.445 = 0.245.
        let s = State {
            y: 1.0,
            ydot: -0.5,
            r0: 0.99,
            ..zero_state()
        };
        assert_relative_eq!(
            liftoff_guard(&s, &p()).unwrap(),
            0.245,
            max_relative = 1e-12
        );
    }

    #[test]
    fn touchdown_reset_matches_hand_values() {
        // Body descending at height 0.90758 with the foot on the ground at
        // angle 0.3 and natural length 0.95.
        let phi = 0.3_f64;
        let leg = 0.95;
        let s = State {
            x: 2.0,
            y: leg * phi.cos(),
            xdot: 0.8,
            ydot: -0.6,
            r0: 0.95,
            ..zero_state()
        };
        let (reset, contact) = touchdown_reset(&s, phi, 0.0, 1e-9).unwrap();
        assert_relative_eq!(reset.x, -leg * phi.sin(), max_relative = 1e-12);
        assert_relative_eq!(reset.x, -0.280_744_196_328_272_6, max_relative = 1e-12);
        assert_relative_eq!(reset.y, 0.907_569_664_669_325_7, max_relative = 1e-12);
        assert_eq!(reset.xdot, 0.8);
        assert_eq!(reset.ydot, -0.6);
        assert_relative_eq!(contact[0], 2.0 + leg * phi.sin(), max_relative = 1e-12);
        assert_eq!(contact[1], 0.0);
        // Radial touchdown guard holds exactly in the contact frame.
        assert_relative_eq!(touchdown_guard(&reset), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn touchdown_reset_rejects_foot_off_ground() {
        let s = State {
            y: 1.2,
            r0: 0.95,
            ..zero_state()
        };
        assert!(matches!(
            touchdown_reset(&s, 0.0, 0.0, 1e-9),
            Err(ModelError::InconsistentTouchdown { .. })
        ));
    }

    #[test]
    fn liftoff_reset_restores_world_frame() {
        let s = State {
            x: 0.2,
            y: 0.97,
            xdot: 0.7,
            ydot: 0.5,
            r0: 0.99,
            r0dot: 0.1,
            rp: -0.02,
            ..zero_state()
        };
        let w = liftoff_reset(&s, [1.5, 0.1]);
        assert_eq!(w.x, 1.7);
        assert_relative_eq!(w.y, 1.07, max_relative = 1e-12);
        assert_eq!(w.xdot, s.xdot);
        assert_eq!(w.rp, s.rp);
    }

    /// Central-difference Jacobian of the mode dynamics, used as the
    /// independent oracle for the analytic `mode_jacobian`.
    fn fd_jacobian(
        mode: Mode,
        s: &State,
        u: f64,
        p: &Params,
    ) -> ([[f64; STATE_DIM]; STATE_DIM], [f64; STATE_DIM]) {
        let h = 1e-6;
        let mut a = [[0.0; STATE_DIM]; STATE_DIM];
        let base = s.as_array();
        for j in 0..STATE_DIM {
            let mut plus = base;
            let mut minus = base;
            plus[j] += h;
            minus[j] -= h;
            let dp = mode_deriv(mode, &State::from_array(&plus), u, p)
                .unwrap()
                .as_array();
            let dm = mode_deriv(mode, &State::from_array(&minus), u, p)
                .unwrap()
                .as_array();
            for i in 0..STATE_DIM {
                a[i][j] = (dp[i] - dm[i]) / (2.0 * h);
            }
        }
        let dp = mode_deriv(mode, s, u + h, p).unwrap().as_array();
        let dm = mode_deriv(mode, s, u - h, p).unwrap().as_array();
        let mut b = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            b[i] = (dp[i] - dm[i]) / (2.0 * h);
        }
        (a, b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// The force is affine in (r0, r0dot) with slopes (k, b).
        #[test]
        fn leg_force_linear_in_setpoint(
            x in -0.5f64..0.5,
            y in 0.4f64..1.2,
            xdot in -1.5f64..1.5,
            ydot in -1.5f64..1.5,
            r0 in 0.5f64..1.0,
            r0dot in -1.0f64..1.0,
            dr0 in -0.3f64..0.3,
            dr0d in -0.5f64..0.5,
        ) {
            let params = p();
            let s = State { x, y, xdot, ydot, r0, r0dot, rp: 0.0 };
            let base = leg_force(&s, &params).unwrap();
            let shifted = leg_force(
                &State { r0: r0 + dr0, r0dot: r0dot + dr0d, ..s },
                &params,
            ).unwrap();
            let predicted = base + params.stiffness * dr0 + params.damping * dr0d;
            prop_assert!((shifted - predicted).abs() < 1e-9);
        }

        /// Flight body motion is decoupled from the leg states bit-for-bit.
        #[test]
        fn flight_body_decoupled_from_leg(
            y in 0.5f64..2.0,
            xdot in -2.0f64..2.0,
            ydot in -2.0f64..2.0,
            r0 in 0.5f64..1.0,
            r0dot in -1.0f64..1.0,
            rp in -0.2f64..0.2,
            u in -5.0f64..5.0,
        ) {
            let params = p();
            let s = State { x: 0.0, y, xdot, ydot, r0: 0.75, r0dot: 0.0, rp: 0.0 };
            let t = State { r0, r0dot, rp, ..s };
            let ds = flight_deriv(&s, 0.0, &params).unwrap();
            let dt = flight_deriv(&t, u, &params).unwrap();
            prop_assert_eq!(ds.xdot, dt.xdot);
            prop_assert_eq!(ds.ydot, dt.ydot);
            prop_assert_eq!(ds.xddot, dt.xddot);
            prop_assert_eq!(ds.yddot, dt.yddot);
        }

        /// Stance acceleration plus gravity is parallel to the leg direction.
        #[test]
        fn stance_force_acts_along_leg(
            x in -0.5f64..0.5,
            y in 0.4f64..1.2,
            xdot in -1.5f64..1.5,
            ydot in -1.5f64..1.5,
            r0 in 0.5f64..1.0,
            r0dot in -1.0f64..1.0,
        ) {
            let params = p();
            let s = State { x, y, xdot, ydot, r0, r0dot, rp: 0.0 };
            let d = stance_deriv(&s, 0.0, &params).unwrap();
            let cross = d.xddot * s.y - (d.yddot + params.gravity) * s.x;
            prop_assert!(cross.abs() < 1e-12);
        }

        /// With rp = 0 and the body exactly at distance r0, the touchdown
        /// guard vanishes.
        #[test]
        fn touchdown_guard_zero_on_surface(
            phi in -0.8f64..0.8,
            r0 in 0.5f64..1.0,
        ) {
            let s = State {
                x: -r0 * phi.sin(),
                y: r0 * phi.cos(),
                xdot: 0.0,
                ydot: 0.0,
                r0,
                r0dot: 0.0,
                rp: 0.0,
            };
            prop_assert!(touchdown_guard(&s).abs() < 1e-14);
        }

        /// Analytic mode Jacobians agree with central differences.
        #[test]
        fn mode_jacobian_matches_finite_differences(
            x in -0.4f64..0.4,
            y in 0.5f64..1.1,
            xdot in -1.5f64..1.5,
            ydot in -1.5f64..1.5,
            r0 in 0.55f64..0.95,
            r0dot in -1.0f64..1.0,
            rp in -0.1f64..0.1,
            u in -5.0f64..5.0,
        ) {
            let params = p();
            let s = State { x, y, xdot, ydot, r0, r0dot, rp };
            for mode in [Mode::FlightDescent, Mode::Stance, Mode::FlightAscent] {
                let (a, b) = mode_jacobian(mode, &s, &params).unwrap();
                let (fa, fb) = fd_jacobian(mode, &s, u, &params);
                for i in 0..STATE_DIM {
                    for j in 0..STATE_DIM {
                        let scale = 1.0_f64.max(fa[i][j].abs());
                        prop_assert!(
                            (a[i][j] - fa[i][j]).abs() < 1e-6 * scale,
                            "A[{}][{}] mode {:?}: {} vs {}", i, j, mode, a[i][j], fa[i][j]
                        );
                    }
                    prop_assert!((b[i] - fb[i]).abs() < 1e-8);
                }
            }
        }
    }
}
