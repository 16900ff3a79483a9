//! Motion plans: the set-point acceleration signal, its closed-form double
//! integral, the touchdown policy, and the versioned JSON wire format.

use crate::model::Params;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Current plan file format version.
pub const PLAN_FORMAT_VERSION: u32 = 1;

/// Slack allowed when checking that the implied set-point trajectory stays
/// inside the box `[l0/2, l0]`; covers the between-node overshoot of the
/// cubic relative to a box-feasible node sequence.
pub const SETPOINT_MARGIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan needs at least two control times, got {0}")]
    TooFewPoints(usize),
    #[error("control times and accelerations have different lengths ({times} vs {accels})")]
    LengthMismatch { times: usize, accels: usize },
    #[error("control times must start at 0, got {0}")]
    NonzeroOrigin(f64),
    #[error("control times must be strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("last control time {last} does not match the horizon {horizon}")]
    HorizonMismatch { last: f64, horizon: f64 },
    #[error("acceleration {value} at index {index} exceeds the limit {limit}")]
    AccelerationLimit { index: usize, value: f64, limit: f64 },
    #[error("set point reaches {value:.6} at t = {t:.6}, outside [{lo:.3}, {hi:.3}] (margin {margin:.0e})")]
    SetpointOutOfRange { t: f64, value: f64, lo: f64, hi: f64, margin: f64 },
    #[error("initial set point {0} outside bounds")]
    BadInitialSetpoint(f64),
    #[error("angle schedule times must be non-decreasing at index {0}")]
    ScheduleNotSorted(usize),
    #[error("angle schedule is empty")]
    EmptySchedule,
    #[error("non-finite plan field: {0}")]
    NonFinite(&'static str),
    #[error("invalid parameters: {0}")]
    Params(#[from] crate::model::ModelError),
    #[error("unsupported plan format version {0}")]
    UnsupportedVersion(u32),
    #[error("plan i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("plan parse failed: {0}")]
    Parse(#[from] serde_json::Error),
}

/// How the touchdown leg angle (from vertical, positive forward) is chosen
/// during descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TouchdownPolicy {
    /// Aim the leg at a fixed ground target: `phi = atan2(target_x - x, y - ground_y)`.
    FixedTarget { target_x: f64 },
    /// Angle as a function of time: `(time, angle)` pairs interpolated
    /// linearly with constant extrapolation beyond the schedule.
    AngleSchedule { points: Vec<(f64, f64)> },
}

impl TouchdownPolicy {
    /// Scheduled angle at `t` (schedules only).
    pub fn schedule_angle(&self, t: f64) -> Option<f64> {
        match self {
            TouchdownPolicy::FixedTarget { .. } => None,
            TouchdownPolicy::AngleSchedule { points } => {
                let first = points.first()?;
                let last = points.last()?;
                if points.len() == 1 || t <= first.0 {
                    return Some(first.1);
                }
                if t >= last.0 {
                    return Some(last.1);
                }
                let i = points.partition_point(|p| p.0 < t) - 1;
                let (t0, a0) = points[i];
                let (t1, a1) = points[i + 1];
                if t1 == t0 {
                    return Some(a1);
                }
                Some(a0 + (a1 - a0) * (t - t0) / (t1 - t0))
            }
        }
    }

    fn validate(&self) -> Result<(), PlanError> {
        match self {
            TouchdownPolicy::FixedTarget { target_x } => {
                if !target_x.is_finite() {
                    return Err(PlanError::NonFinite("target_x"));
                }
            }
            TouchdownPolicy::AngleSchedule { points } => {
                if points.is_empty() {
                    return Err(PlanError::EmptySchedule);
                }
                for (i, (t, a)) in points.iter().enumerate() {
                    if !t.is_finite() || !a.is_finite() {
                        return Err(PlanError::NonFinite("angle schedule"));
                    }
                    if i > 0 && *t < points[i - 1].0 {
                        return Err(PlanError::ScheduleNotSorted(i));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A set-point motion plan for one half gait cycle (apex to apex).
///
/// `times`/`accels` define the piecewise-linear set-point acceleration;
/// integrating twice from `(r0_init, r0dot_init)` gives the commanded leg
/// set point. The model parameters travel with the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPlan {
    pub times: Vec<f64>,
    pub accels: Vec<f64>,
    pub r0_init: f64,
    pub r0dot_init: f64,
    pub policy: TouchdownPolicy,
    pub horizon: f64,
    pub params: Params,
}

/// Versioned wire format wrapped around [`MotionPlan`].
#[derive(Debug, Serialize, Deserialize)]
struct PlanFile {
    version: u32,
    times: Vec<f64>,
    accels: Vec<f64>,
    r0_init: f64,
    r0dot_init: f64,
    policy: TouchdownPolicy,
    horizon: f64,
    params: Params,
}

impl MotionPlan {
    /// Validates grid shape, limits, and the implied set-point range.
    pub fn validate(&self) -> Result<(), PlanError> {
        self.params.validate()?;
        if self.times.len() < 2 {
            return Err(PlanError::TooFewPoints(self.times.len()));
        }
        if self.times.len() != self.accels.len() {
            return Err(PlanError::LengthMismatch {
                times: self.times.len(),
                accels: self.accels.len(),
            });
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(PlanError::NonFinite("horizon"));
        }
        if self.times[0].abs() > 1e-12 {
            return Err(PlanError::NonzeroOrigin(self.times[0]));
        }
        for i in 1..self.times.len() {
            if self.times[i] <= self.times[i - 1] {
                return Err(PlanError::NotIncreasing(i));
            }
        }
        let last = *self.times.last().unwrap();
        if (last - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(PlanError::HorizonMismatch {
                last,
                horizon: self.horizon,
            });
        }
        let limit = self.params.max_accel + 1e-9;
        for (i, &a) in self.accels.iter().enumerate() {
            if !a.is_finite() || a.abs() > limit {
                return Err(PlanError::AccelerationLimit {
                    index: i,
                    value: a,
                    limit: self.params.max_accel,
                });
            }
        }
        let (lo, hi) = self.params.setpoint_bounds();
        if !(self.r0_init >= lo - 1e-9 && self.r0_init <= hi + 1e-9) {
            return Err(PlanError::BadInitialSetpoint(self.r0_init));
        }
        if !self.r0dot_init.is_finite() {
            return Err(PlanError::NonFinite("r0dot_init"));
        }
        self.policy.validate()?;
        // Range check at segment endpoints and interior extrema of the cubic.
        let profile = self.profile();
        for (t, value) in profile.extrema(self.horizon) {
            if value < lo - SETPOINT_MARGIN || value > hi + SETPOINT_MARGIN {
                return Err(PlanError::SetpointOutOfRange {
                    t,
                    value,
                    lo,
                    hi,
                    margin: SETPOINT_MARGIN,
                });
            }
        }
        Ok(())
    }

    /// Precomputed closed-form set-point trajectory.
    pub fn profile(&self) -> SetpointProfile {
        SetpointProfile::new(&self.times, &self.accels, self.r0_init, self.r0dot_init)
    }

    /// Set point and set-point velocity at `t` (convenience, see
    /// [`SetpointProfile`] for repeated queries).
    pub fn setpoint_at(&self, t: f64) -> (f64, f64) {
        self.profile().eval(t)
    }

    pub fn to_json(&self) -> Result<String, PlanError> {
        let file = PlanFile {
            version: PLAN_FORMAT_VERSION,
            times: self.times.clone(),
            accels: self.accels.clone(),
            r0_init: self.r0_init,
            r0dot_init: self.r0dot_init,
            policy: self.policy.clone(),
            horizon: self.horizon,
            params: self.params,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let file: PlanFile = serde_json::from_str(text)?;
        if file.version != PLAN_FORMAT_VERSION {
            return Err(PlanError::UnsupportedVersion(file.version));
        }
        let plan = MotionPlan {
            times: file.times,
            accels: file.accels,
            r0_init: file.r0_init,
            r0dot_init: file.r0dot_init,
            policy: file.policy,
            horizon: file.horizon,
            params: file.params,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlanError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PlanError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Closed-form double integral of a piecewise-linear acceleration: velocity
/// is piecewise quadratic and position piecewise cubic, accumulated exactly
/// at the knots. Queries outside the grid extrapolate the boundary segment.
#[derive(Debug, Clone)]
pub struct SetpointProfile {
    times: Vec<f64>,
    accels: Vec<f64>,
    /// Set point at each knot.
    pos: Vec<f64>,
    /// Set-point velocity at each knot.
    vel: Vec<f64>,
}

impl SetpointProfile {
    pub fn new(times: &[f64], accels: &[f64], r0_init: f64, r0dot_init: f64) -> Self {
        assert_eq!(times.len(), accels.len());
        assert!(times.len() >= 2);
        let n = times.len();
        let mut pos = Vec::with_capacity(n);
        let mut vel = Vec::with_capacity(n);
        pos.push(r0_init);
        vel.push(r0dot_init);
        for j in 0..n - 1 {
            let h = times[j + 1] - times[j];
            let (a0, a1) = (accels[j], accels[j + 1]);
            let v = vel[j] + 0.5 * (a0 + a1) * h;
            let p = pos[j] + vel[j] * h + (2.0 * a0 + a1) * h * h / 6.0;
            vel.push(v);
            pos.push(p);
        }
        SetpointProfile {
            times: times.to_vec(),
            accels: accels.to_vec(),
            pos,
            vel,
        }
    }

    fn segment(&self, t: f64) -> usize {
        let below = self.times.partition_point(|&x| x < t);
        below.saturating_sub(1).min(self.times.len() - 2)
    }

    /// `(r0, r0dot)` at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let s = self.segment(t);
        let h = self.times[s + 1] - self.times[s];
        let slope = (self.accels[s + 1] - self.accels[s]) / h;
        let tau = t - self.times[s];
        let a0 = self.accels[s];
        let v = self.vel[s] + a0 * tau + 0.5 * slope * tau * tau;
        let p = self.pos[s] + self.vel[s] * tau + 0.5 * a0 * tau * tau + slope * tau.powi(3) / 6.0;
        (p, v)
    }

    /// Whether `t` lies outside the grid (the evaluation extrapolates).
    pub fn extrapolates(&self, t: f64) -> bool {
        t < self.times[0] - 1e-12 || t > *self.times.last().unwrap() + 1e-12
    }

    /// Candidate extremum samples of the set point on `[0, end]`: all knots
    /// plus interior roots of the (quadratic) velocity on each segment.
    fn extrema(&self, end: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (j, &t) in self.times.iter().enumerate() {
            if t <= end + 1e-12 {
                out.push((t, self.pos[j]));
            }
        }
        out.push((end, self.eval(end).0));
        for s in 0..self.times.len() - 1 {
            let h = self.times[s + 1] - self.times[s];
            let slope = (self.accels[s + 1] - self.accels[s]) / h;
            // v(tau) = vel[s] + a0 tau + slope tau^2 / 2 = 0.
            let (a, b, c) = (0.5 * slope, self.accels[s], self.vel[s]);
            let mut roots = Vec::new();
            if a.abs() < 1e-14 {
                if b.abs() > 1e-14 {
                    roots.push(-c / b);
                }
            } else {
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    roots.push((-b + sq) / (2.0 * a));
                    roots.push((-b - sq) / (2.0 * a));
                }
            }
            for tau in roots {
                if tau > 0.0 && tau < h {
                    let t = self.times[s] + tau;
                    if t <= end {
                        out.push((t, self.eval(t).0));
                    }
                }
            }
        }
        out
    }
}

/// Set point and set-point velocity commanded by `plan` at time `t`.
pub fn eval_setpoint(plan: &MotionPlan, t: f64) -> (f64, f64) {
    plan.setpoint_at(t)
}
