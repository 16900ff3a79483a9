//! Event-driven simulation of one apex-to-apex step under a motion plan.
//!
//! The set point `(r0, r0dot)` is injected from the plan's closed-form
//! profile rather than integrated, so the simulation tests the plan exactly
//! as commanded. Flight phases integrate `[x, y, xdot, ydot, rp]` in the
//! world frame; stance integrates `[x, y, xdot, ydot]` in the contact frame
//! where the spring deflection is recovered algebraically as `r - r0(t)`.

use crate::model::{
    self, liftoff_reset, touchdown_reset, Mode, Params, State, SINGULAR_RADIUS,
};
use crate::ode::{integrate_with_events, DenseStep, OdeError, OdeOptions};
use crate::plan::{MotionPlan, SetpointProfile, TouchdownPolicy};
use std::cell::Cell;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("bad start state: {0}")]
    BadStart(String),
}

/// Simulation controls. `ground_y` is the world height of the ground for
/// this step (the disturbance when sweeping).
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub ground_y: f64,
    pub max_time: f64,
    pub ode: OdeOptions,
    /// Record the trajectory on a uniform grid with this spacing.
    pub sample_dt: Option<f64>,
    /// Allowed gap between the commanded foot and the ground at touchdown.
    pub touchdown_tol: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ground_y: 0.0,
            max_time: 20.0,
            ode: OdeOptions::default(),
            sample_dt: None,
            touchdown_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimStatus {
    /// Completed touchdown, liftoff, and the following apex.
    ApexReached,
    /// Body height reached the ground during stance.
    FellInStance,
    /// Body height reached the ground in flight, or the foot struck the
    /// ground again after liftoff.
    FellInFlight,
    /// Liftoff with non-positive vertical velocity.
    NegativeLiftoff,
    /// No terminal event before `max_time`.
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Touchdown,
    Liftoff,
    Apex,
}

/// A mode transition, with the world-frame state at the event time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub kind: EventKind,
    pub t: f64,
    pub state: State,
}

/// Non-fatal anomalies observed while simulating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoteKind {
    /// The plan was evaluated past its horizon.
    ControlExtrapolated,
    /// The commanded set point left the actuator range.
    SetpointOutOfRange,
    /// The swung leg reached the ground during ascent.
    FootRecontact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimNote {
    pub kind: NoteKind,
    pub t: f64,
}

/// World-frame apex of the flight phase after liftoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApexSummary {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub xdot: f64,
}

/// Sampled world-frame trajectory.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub modes: Vec<Mode>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub status: SimStatus,
    pub apex: Option<ApexSummary>,
    pub events: Vec<SimEvent>,
    pub notes: Vec<SimNote>,
    pub trajectory: Option<Trajectory>,
}

/// Leg angle from vertical commanded by the policy during flight.
pub fn leg_angle(policy: &TouchdownPolicy, x: f64, y: f64, ground_y: f64, t: f64) -> f64 {
    match policy {
        TouchdownPolicy::FixedTarget { target_x } => (target_x - x).atan2(y - ground_y),
        TouchdownPolicy::AngleSchedule { .. } => policy
            .schedule_angle(t)
            .expect("schedule_angle is total for schedules"),
    }
}

/// Bookkeeping shared across phases: notes (deduplicated by kind) and the
/// optional sample grid.
struct Accum {
    notes: Vec<SimNote>,
    seen: [bool; 3],
    sample_dt: Option<f64>,
    next_sample: usize,
    traj: Trajectory,
}

impl Accum {
    fn new(sample_dt: Option<f64>) -> Self {
        Accum {
            notes: Vec::new(),
            seen: [false; 3],
            sample_dt,
            next_sample: 0,
            traj: Trajectory::default(),
        }
    }

    fn note(&mut self, kind: NoteKind, t: f64) {
        let idx = kind as usize;
        if !self.seen[idx] {
            self.seen[idx] = true;
            self.notes.push(SimNote { kind, t });
        }
    }

    fn check_control(&mut self, t: f64, profile: &SetpointProfile, p: &Params) {
        if profile.extrapolates(t) {
            self.note(NoteKind::ControlExtrapolated, t);
        }
        let (r0, _) = profile.eval(t);
        let (lo, hi) = p.setpoint_bounds();
        if r0 < lo - crate::plan::SETPOINT_MARGIN || r0 > hi + crate::plan::SETPOINT_MARGIN {
            self.note(NoteKind::SetpointOutOfRange, t);
        }
    }

    fn push_sample(&mut self, t: f64, state: State, mode: Mode) {
        self.traj.times.push(t);
        self.traj.states.push(state);
        self.traj.modes.push(mode);
    }

    /// Samples the grid points falling in `(a, b]` of an accepted step.
    fn sample_segment(
        &mut self,
        a: f64,
        b: f64,
        step: &DenseStep,
        mode: Mode,
        assemble: &dyn Fn(f64, &[f64]) -> State,
    ) {
        let Some(dt) = self.sample_dt else { return };
        let mut y = vec![0.0; 5];
        loop {
            let ts = self.next_sample as f64 * dt;
            if ts > b + 1e-12 {
                break;
            }
            if ts > a {
                let dim = if mode == Mode::Stance { 4 } else { 5 };
                step.eval_into(ts, &mut y[..dim]);
                self.push_sample(ts, assemble(ts, &y[..dim]), mode);
            }
            self.next_sample += 1;
        }
    }
}

/// Simulates one apex-to-apex step of `plan` from the world-frame state
/// `start` (normally an apex: `ydot = 0`).
pub fn simulate_step(plan: &MotionPlan, start: &State, cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    let p = plan.params;
    p.validate()?;
    if !start.as_array().iter().all(|v| v.is_finite()) {
        return Err(SimError::BadStart("non-finite start state".into()));
    }
    if start.y <= cfg.ground_y {
        return Err(SimError::BadStart(format!(
            "start height {} at or below ground {}",
            start.y, cfg.ground_y
        )));
    }
    let profile = plan.profile();
    let ground = cfg.ground_y;
    let policy = &plan.policy;
    let mut acc = Accum::new(cfg.sample_dt);
    let mut events: Vec<SimEvent> = Vec::new();

    let flight_state = |t: f64, y: &[f64]| -> State {
        let (r0, r0dot) = profile.eval(t);
        State {
            x: y[0],
            y: y[1],
            xdot: y[2],
            ydot: y[3],
            r0,
            r0dot,
            rp: y[4],
        }
    };

    let done = |status: SimStatus, apex: Option<ApexSummary>, events: Vec<SimEvent>, acc: Accum| {
        Ok(SimOutcome {
            status,
            apex,
            events,
            notes: acc.notes,
            trajectory: cfg.sample_dt.map(|_| acc.traj),
        })
    };

    // --- Descent -----------------------------------------------------------
    let y0 = [start.x, start.y, start.xdot, start.ydot, start.rp];
    if cfg.sample_dt.is_some() {
        acc.push_sample(0.0, flight_state(0.0, &y0), Mode::FlightDescent);
        acc.next_sample = 1;
    }
    let mut flight_deriv = {
        let (g, kb) = (p.gravity, p.stiffness / p.damping);
        move |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), String> {
            dy[0] = y[2];
            dy[1] = y[3];
            dy[2] = 0.0;
            dy[3] = -g;
            dy[4] = -kb * y[4];
            Ok(())
        }
    };
    let res = {
        let mut guards: Vec<Box<dyn FnMut(f64, &[f64]) -> f64>> = vec![
            Box::new(move |_t: f64, y: &[f64]| y[1] - ground),
            Box::new(|t: f64, y: &[f64]| {
                let (r0, _) = profile.eval(t);
                let phi = leg_angle(policy, y[0], y[1], ground, t);
                y[1] - ground - (r0 + y[4]) * phi.cos()
            }),
        ];
        integrate_with_events(
            &mut flight_deriv,
            &mut guards,
            0.0,
            &y0,
            cfg.max_time,
            &cfg.ode,
            |a, b, step| {
                acc.check_control(b, &profile, &p);
                acc.sample_segment(a, b, step, Mode::FlightDescent, &flight_state);
            },
        )?
    };
    let (t_td, touchdown_world) = match res.event {
        None => return done(SimStatus::Timeout, None, events, acc),
        Some(0) => return done(SimStatus::FellInFlight, None, events, acc),
        Some(_) => (res.t, flight_state(res.t, &res.y)),
    };
    events.push(SimEvent {
        kind: EventKind::Touchdown,
        t: t_td,
        state: touchdown_world,
    });
    let phi_td = leg_angle(policy, touchdown_world.x, touchdown_world.y, ground, t_td);
    let (stance_start, contact) =
        touchdown_reset(&touchdown_world, phi_td, ground, cfg.touchdown_tol)?;

    // --- Stance ------------------------------------------------------------
    let stance_state = |t: f64, y: &[f64]| -> State {
        let (r0, r0dot) = profile.eval(t);
        let r = y[0].hypot(y[1]);
        State {
            x: y[0] + contact[0],
            y: y[1] + contact[1],
            xdot: y[2],
            ydot: y[3],
            r0,
            r0dot,
            rp: r - r0,
        }
    };
    let force_at = |t: f64, y: &[f64]| -> Result<f64, String> {
        let (r0, r0dot) = profile.eval(t);
        let r = y[0].hypot(y[1]);
        if r < SINGULAR_RADIUS {
            return Err(format!("singular stance radius {r}"));
        }
        let rdot = (y[0] * y[2] + y[1] * y[3]) / r;
        Ok(p.stiffness * (r0 - r) + p.damping * (r0dot - rdot))
    };
    let y0 = [
        stance_start.x,
        stance_start.y,
        stance_start.xdot,
        stance_start.ydot,
    ];
    let res = {
        let stance_deriv = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), String> {
            let f = force_at(t, y)?;
            let r = y[0].hypot(y[1]);
            dy[0] = y[2];
            dy[1] = y[3];
            dy[2] = y[0] * f / (p.mass * r);
            dy[3] = y[1] * f / (p.mass * r) - p.gravity;
            Ok(())
        };
        let mut guards: Vec<Box<dyn FnMut(f64, &[f64]) -> f64>> = vec![
            Box::new(|_t: f64, y: &[f64]| y[1]),
            Box::new(|t: f64, y: &[f64]| force_at(t, y).unwrap_or(-1.0)),
        ];
        integrate_with_events(
            stance_deriv,
            &mut guards,
            t_td,
            &y0,
            cfg.max_time,
            &cfg.ode,
            |a, b, step| {
                acc.check_control(b, &profile, &p);
                acc.sample_segment(a, b, step, Mode::Stance, &stance_state);
            },
        )?
    };
    let (t_lo, liftoff_contact) = match res.event {
        None => return done(SimStatus::Timeout, None, events, acc),
        Some(0) => return done(SimStatus::FellInStance, None, events, acc),
        Some(_) => (res.t, stance_state(res.t, &res.y)),
    };
    // stance_state already restored the world offset; rebuild the
    // contact-frame state for the reset.
    let liftoff_local = State {
        x: liftoff_contact.x - contact[0],
        y: liftoff_contact.y - contact[1],
        ..liftoff_contact
    };
    let liftoff_world = liftoff_reset(&liftoff_local, contact);
    events.push(SimEvent {
        kind: EventKind::Liftoff,
        t: t_lo,
        state: liftoff_world,
    });
    if liftoff_world.ydot <= 0.0 {
        return done(SimStatus::NegativeLiftoff, None, events, acc);
    }

    // --- Ascent ------------------------------------------------------------
    let y0 = [
        liftoff_world.x,
        liftoff_world.y,
        liftoff_world.xdot,
        liftoff_world.ydot,
        liftoff_world.rp,
    ];
    let res = {
        // The swung foot starts at the old contact point, so its clearance
        // guard only arms once the foot has actually left the ground.
        let armed = Cell::new(false);
        let mut guards: Vec<Box<dyn FnMut(f64, &[f64]) -> f64>> = vec![
            Box::new(move |_t: f64, y: &[f64]| y[1] - ground),
            Box::new(|t: f64, y: &[f64]| {
                let (r0, _) = profile.eval(t);
                let phi = leg_angle(policy, y[0], y[1], ground, t);
                let clearance = y[1] - ground - (r0 + y[4]) * phi.cos();
                if !armed.get() {
                    if clearance > 1e-6 {
                        armed.set(true);
                    }
                    return 1.0;
                }
                clearance
            }),
            Box::new(|_t: f64, y: &[f64]| y[3]),
        ];
        integrate_with_events(
            &mut flight_deriv,
            &mut guards,
            t_lo,
            &y0,
            cfg.max_time,
            &cfg.ode,
            |a, b, step| {
                acc.check_control(b, &profile, &p);
                acc.sample_segment(a, b, step, Mode::FlightAscent, &flight_state);
            },
        )?
    };
    match res.event {
        None => done(SimStatus::Timeout, None, events, acc),
        Some(0) => done(SimStatus::FellInFlight, None, events, acc),
        Some(1) => {
            acc.note(NoteKind::FootRecontact, res.t);
            done(SimStatus::FellInFlight, None, events, acc)
        }
        Some(_) => {
            let apex_state = flight_state(res.t, &res.y);
            events.push(SimEvent {
                kind: EventKind::Apex,
                t: res.t,
                state: apex_state,
            });
            let apex = ApexSummary {
                t: res.t,
                x: apex_state.x,
                y: apex_state.y,
                xdot: apex_state.xdot,
            };
            done(SimStatus::ApexReached, Some(apex), events, acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn apex_start(y: f64, xdot: f64, plan: &MotionPlan) -> State {
        State {
            x: 0.0,
            y,
            xdot,
            ydot: 0.0,
            r0: plan.r0_init,
            r0dot: plan.r0dot_init,
            rp: 0.0,
        }
    }

    fn passive_plan(policy: TouchdownPolicy) -> MotionPlan {
        MotionPlan {
            times: vec![0.0, 1.0, 2.0],
            accels: vec![0.0, 0.0, 0.0],
            r0_init: 1.0,
            r0dot_init: 0.0,
            policy,
            horizon: 2.0,
            params: Params::default(),
        }
    }

    #[test]
    fn leg_angle_matches_hand_values() {
        let policy = TouchdownPolicy::FixedTarget { target_x: 0.3 };
        // atan2(0.3, 0.9)
        assert_relative_eq!(
            leg_angle(&policy, 0.0, 0.9, 0.0, 0.0),
            0.321_750_554_396_642_2,
            max_relative = 1e-15
        );
        let sched = TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.1), (1.0, 0.3)],
        };
        assert_relative_eq!(leg_angle(&sched, 9.0, 9.0, 0.0, 0.5), 0.2);
    }

    #[test]
    fn falls_when_leg_points_backward_up() {
        // cos(phi) < 0 puts the commanded foot above the body, so the body
        // hits the ground first.
        let plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 1.8)],
        });
        let out = simulate_step(&plan, &apex_start(1.2, 0.5, &plan), &SimConfig::default()).unwrap();
        assert_eq!(out.status, SimStatus::FellInFlight);
        assert!(out.events.is_empty());
        assert!(out.apex.is_none());
    }

    #[test]
    fn passive_bounce_orders_events() {
        let plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.25)],
        });
        let out = simulate_step(&plan, &apex_start(1.2, 0.8, &plan), &SimConfig::default()).unwrap();
        assert_eq!(out.status, SimStatus::ApexReached, "notes: {:?}", out.notes);
        let kinds: Vec<EventKind> = out.events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![EventKind::Touchdown, EventKind::Liftoff, EventKind::Apex]
        );
        for w in out.events.windows(2) {
            assert!(w[0].t < w[1].t);
        }
        let apex_event = *out.events.last().unwrap();
        assert!(apex_event.state.ydot.abs() < 1e-8);
        let apex = out.apex.unwrap();
        assert!(apex.y > 0.5 && apex.y < 1.3);
    }

    #[test]
    fn negative_liftoff_reported() {
        // Retracting the set point fast at touchdown kills the leg force, so
        // stance ends immediately while still descending.
        let plan = MotionPlan {
            r0dot_init: -2.0,
            ..passive_plan(TouchdownPolicy::AngleSchedule {
                points: vec![(0.0, 0.0)],
            })
        };
        let start = State {
            y: 1.0, // foot exactly on the ground at t = 0
            ydot: -0.5,
            ..apex_start(1.0, 0.0, &plan)
        };
        let out = simulate_step(&plan, &start, &SimConfig::default()).unwrap();
        assert_eq!(out.status, SimStatus::NegativeLiftoff);
        let kinds: Vec<EventKind> = out.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EventKind::Touchdown, EventKind::Liftoff]);
    }

    #[test]
    fn hard_impact_falls_in_stance() {
        // A soft spring cannot absorb the impact energy before the body
        // reaches the ground.
        let mut plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.1)],
        });
        plan.params.stiffness = 2.0;
        let start = State {
            ydot: -3.0,
            ..apex_start(1.05, 0.05, &plan)
        };
        let out = simulate_step(&plan, &start, &SimConfig::default()).unwrap();
        assert_eq!(out.status, SimStatus::FellInStance);
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].kind, EventKind::Touchdown);
    }

    #[test]
    fn timeout_without_events() {
        let plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.25)],
        });
        let cfg = SimConfig {
            max_time: 0.01,
            ..SimConfig::default()
        };
        let out = simulate_step(&plan, &apex_start(1.2, 0.8, &plan), &cfg).unwrap();
        assert_eq!(out.status, SimStatus::Timeout);
    }

    #[test]
    fn extrapolation_past_horizon_is_noted() {
        let mut plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.25)],
        });
        plan.times = vec![0.0, 0.05, 0.1];
        plan.horizon = 0.1;
        let out = simulate_step(&plan, &apex_start(1.2, 0.8, &plan), &SimConfig::default()).unwrap();
        assert!(out
            .notes
            .iter()
            .any(|n| n.kind == NoteKind::ControlExtrapolated));
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.25)],
        });
        let cfg = SimConfig {
            sample_dt: Some(0.01),
            ..SimConfig::default()
        };
        let a = simulate_step(&plan, &apex_start(1.2, 0.8, &plan), &cfg).unwrap();
        let b = simulate_step(&plan, &apex_start(1.2, 0.8, &plan), &cfg).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.events, b.events);
        let (ta, tb) = (a.trajectory.unwrap(), b.trajectory.unwrap());
        assert_eq!(ta.times, tb.times);
        assert_eq!(ta.states, tb.states);
    }

    #[test]
    fn ground_shift_covariance() {
        let plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.25)],
        });
        let base = simulate_step(&plan, &apex_start(1.2, 0.8, &plan), &SimConfig::default()).unwrap();
        let d = 0.07;
        let shifted_start = State {
            y: 1.2 + d,
            ..apex_start(1.2, 0.8, &plan)
        };
        let cfg = SimConfig {
            ground_y: d,
            ..SimConfig::default()
        };
        let shifted = simulate_step(&plan, &shifted_start, &cfg).unwrap();
        assert_eq!(base.status, SimStatus::ApexReached);
        assert_eq!(shifted.status, SimStatus::ApexReached);
        let (a, b) = (base.apex.unwrap(), shifted.apex.unwrap());
        assert_relative_eq!(a.y + d, b.y, epsilon = 1e-8);
        assert_relative_eq!(a.x, b.x, epsilon = 1e-8);
        assert_relative_eq!(a.xdot, b.xdot, epsilon = 1e-8);
        assert_relative_eq!(a.t, b.t, epsilon = 1e-8);
    }

    #[test]
    fn sampled_trajectory_is_monotone_and_consistent() {
        let plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.25)],
        });
        let cfg = SimConfig {
            sample_dt: Some(0.02),
            ..SimConfig::default()
        };
        let out = simulate_step(&plan, &apex_start(1.2, 0.8, &plan), &cfg).unwrap();
        let traj = out.trajectory.unwrap();
        assert!(!traj.times.is_empty());
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }
        // In stance, rp must equal r - r0 relative to the contact point; in
        // flight the sampled r0 must match the plan profile.
        let profile = plan.profile();
        for (i, s) in traj.states.iter().enumerate() {
            let (r0, r0dot) = profile.eval(traj.times[i]);
            assert_relative_eq!(s.r0, r0, epsilon = 1e-12);
            assert_relative_eq!(s.r0dot, r0dot, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_start_below_ground() {
        let plan = passive_plan(TouchdownPolicy::AngleSchedule {
            points: vec![(0.0, 0.25)],
        });
        let start = State {
            y: -0.5,
            ..apex_start(1.0, 0.0, &plan)
        };
        assert!(matches!(
            simulate_step(&plan, &start, &SimConfig::default()),
            Err(SimError::BadStart(_))
        ));
    }
}
