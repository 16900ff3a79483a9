//! Direct collocation of one apex-to-apex running step.
//!
//! The step is transcribed as three phases — flight descent, stance, flight
//! ascent — on per-phase uniform grids with free durations. All phases are
//! expressed in the contact frame of the (single) stance foot: the foot sits
//! at the origin, the ground is `y = 0`, and world heights are recovered by
//! adding the case's ground offset. In this frame the touchdown and liftoff
//! resets are identities, so phase joins reduce to plain state continuity
//! plus one guard equation each:
//!
//! * touchdown: the body sits exactly one natural leg length
//!   `r0 + rp` from the contact point,
//! * liftoff: the axial leg force vanishes.
//!
//! Dynamics enter through trapezoidal defects, except for the set-point
//! chain `(r0, r0')`: with inputs piecewise linear in time, that double
//! integrator has an exact discrete map, and using it keeps the transcribed
//! set-point trajectory identical to the profile a [`MotionPlan`]
//! reconstructs from the same knots.
//!
//! Decision variables per case are laid out as
//! `[states node-major x 7][inputs][tau0 tau1 tau2]`, giving
//! `8 N + 3` variables and `7 N + 2` constraints for `N` total nodes.

use crate::model::{self, Mode, Params, State, STATE_DIM};
use crate::nlp::{self, EvalError, NlpProblem, SolveResult, SolveStatus, SolverOptions, SparsityPattern};
use crate::plan::{MotionPlan, PlanError, TouchdownPolicy};
use crate::solver;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default per-phase node counts `[descent, stance, ascent]`.
pub const DEFAULT_NODES: [usize; 3] = [15, 25, 15];

/// Smallest admissible node spacing; phase durations are bounded below by
/// `(n_p - 1)` times this.
pub const MIN_NODE_SPACING: f64 = 1e-3;

/// Lower bound on body height (in leg lengths) at stance nodes.
pub const STANCE_CLEARANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TranscriptionError {
    #[error("phase {phase} needs at least 2 nodes, got {nodes}")]
    TooFewNodes { phase: usize, nodes: usize },
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("boundary conditions: {0}")]
    BadBoundary(String),
    #[error(transparent)]
    Pattern(#[from] nlp::PatternError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Backend(#[from] solver::BackendError),
    #[error("solve ended {status:?} (violation {violation:.3e}): {message}")]
    Solve {
        status: SolveStatus,
        violation: f64,
        message: String,
    },
    #[error("solution rejected: {0}")]
    BadSolution(String),
}

/// Apex boundary conditions for one step, measured in the world frame
/// relative to the nominal ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub start_height: f64,
    pub start_speed: f64,
    pub end_height: f64,
    pub end_speed: f64,
}

impl BoundaryConditions {
    /// Symmetric conditions: leave and return to the same apex state.
    pub fn level(height: f64, speed: f64) -> Self {
        BoundaryConditions {
            start_height: height,
            start_speed: speed,
            end_height: height,
            end_speed: speed,
        }
    }

    pub(crate) fn validate(&self, p: &Params, ground_offset: f64) -> Result<(), TranscriptionError> {
        for (name, v) in [
            ("start_height", self.start_height),
            ("start_speed", self.start_speed),
            ("end_height", self.end_height),
            ("end_speed", self.end_speed),
        ] {
            if !v.is_finite() {
                return Err(TranscriptionError::BadBoundary(format!(
                    "{name} must be finite, got {v}"
                )));
            }
        }
        let min_apex = p.min_setpoint + ground_offset;
        if self.start_height <= min_apex || self.end_height <= min_apex {
            return Err(TranscriptionError::BadBoundary(format!(
                "apex heights must clear the shortest leg over ground at {ground_offset}"
            )));
        }
        Ok(())
    }
}

/// Index arithmetic for the per-case decision vector and constraint rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepLayout {
    pub nodes: [usize; 3],
}

impl StepLayout {
    pub fn new(nodes: [usize; 3]) -> Result<Self, TranscriptionError> {
        for (phase, &n) in nodes.iter().enumerate() {
            if n < 2 {
                return Err(TranscriptionError::TooFewNodes { phase, nodes: n });
            }
        }
        Ok(StepLayout { nodes })
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes.iter().sum()
    }

    /// `8 N + 3`: seven states and one input per node, three durations.
    pub fn num_vars(&self) -> usize {
        8 * self.total_nodes() + 3
    }

    /// `7 N + 2`: `7 (N - 3)` defects, `14` continuity rows, two guard
    /// rows, and seven boundary rows.
    pub fn num_cons(&self) -> usize {
        7 * self.total_nodes() + 2
    }

    pub fn phase_mode(phase: usize) -> Mode {
        match phase {
            0 => Mode::FlightDescent,
            1 => Mode::Stance,
            _ => Mode::FlightAscent,
        }
    }

    fn node_id(&self, phase: usize, node: usize) -> usize {
        debug_assert!(node < self.nodes[phase]);
        self.nodes[..phase].iter().sum::<usize>() + node
    }

    pub fn state_index(&self, phase: usize, node: usize, comp: usize) -> usize {
        STATE_DIM * self.node_id(phase, node) + comp
    }

    pub fn input_index(&self, phase: usize, node: usize) -> usize {
        STATE_DIM * self.total_nodes() + self.node_id(phase, node)
    }

    pub fn duration_index(&self, phase: usize) -> usize {
        8 * self.total_nodes() + phase
    }

    fn intervals_before(&self, phase: usize) -> usize {
        self.nodes[..phase].iter().map(|n| n - 1).sum()
    }

    pub fn defect_row(&self, phase: usize, interval: usize, comp: usize) -> usize {
        STATE_DIM * (self.intervals_before(phase) + interval) + comp
    }

    pub fn continuity_row(&self, join: usize, comp: usize) -> usize {
        STATE_DIM * (self.total_nodes() - 3) + STATE_DIM * join + comp
    }

    pub fn touchdown_row(&self) -> usize {
        STATE_DIM * (self.total_nodes() - 3) + 14
    }

    pub fn liftoff_row(&self) -> usize {
        self.touchdown_row() + 1
    }

    pub fn boundary_row(&self, k: usize) -> usize {
        debug_assert!(k < 7);
        self.liftoff_row() + 1 + k
    }

    /// Time of a node measured from the start of the step.
    pub fn node_time(&self, phase: usize, node: usize, taus: &[f64; 3]) -> f64 {
        let before: f64 = taus[..phase].iter().sum();
        before + node as f64 * taus[phase] / (self.nodes[phase] - 1) as f64
    }

    fn state_at(&self, vars: &[f64], phase: usize, node: usize) -> State {
        let base = self.state_index(phase, node, 0);
        let mut a = [0.0; STATE_DIM];
        a.copy_from_slice(&vars[base..base + STATE_DIM]);
        State::from_array(&a)
    }

    fn taus(&self, vars: &[f64]) -> [f64; 3] {
        let base = self.duration_index(0);
        [vars[base], vars[base + 1], vars[base + 2]]
    }
}

// Columns of the left/right state blocks entering each trapezoidal defect
// row (identity column included). Row 4 is the exact set-point map and is
// handled separately.
const FLIGHT_ROW_COLS: [&[usize]; STATE_DIM] =
    [&[0, 2], &[1, 3], &[2], &[3], &[], &[5], &[6]];
const STANCE_ROW_COLS: [&[usize]; STATE_DIM] = [
    &[0, 2],
    &[1, 3],
    &[0, 1, 2, 3, 4, 5],
    &[0, 1, 2, 3, 4, 5],
    &[],
    &[5],
    &[0, 1, 2, 3, 5, 6],
];
// Defect rows with a nonzero duration partial. Flight row 2 integrates
// zero horizontal acceleration, so its defect does not see the duration.
const FLIGHT_TAU_ROWS: [bool; STATE_DIM] = [true, true, false, true, true, true, true];
const STANCE_TAU_ROWS: [bool; STATE_DIM] = [true; STATE_DIM];

fn row_cols(mode: Mode, comp: usize) -> &'static [usize] {
    if mode.is_flight() {
        FLIGHT_ROW_COLS[comp]
    } else {
        STANCE_ROW_COLS[comp]
    }
}

fn tau_row(mode: Mode, comp: usize) -> bool {
    if mode.is_flight() {
        FLIGHT_TAU_ROWS[comp]
    } else {
        STANCE_TAU_ROWS[comp]
    }
}

/// Sparsity rows of one case block, with variable columns shifted by
/// `var_base`. Row order matches [`fill_case_constraints`].
pub(crate) fn case_pattern_rows(layout: &StepLayout, var_base: usize) -> Vec<Vec<usize>> {
    let mut rows = Vec::with_capacity(layout.num_cons());
    for phase in 0..3 {
        let mode = StepLayout::phase_mode(phase);
        for interval in 0..layout.nodes[phase] - 1 {
            for comp in 0..STATE_DIM {
                let mut cols = Vec::new();
                if comp == 4 {
                    cols.push(layout.state_index(phase, interval, 4));
                    cols.push(layout.state_index(phase, interval, 5));
                    cols.push(layout.state_index(phase, interval + 1, 4));
                    cols.push(layout.input_index(phase, interval));
                    cols.push(layout.input_index(phase, interval + 1));
                    cols.push(layout.duration_index(phase));
                } else {
                    for &j in row_cols(mode, comp) {
                        cols.push(layout.state_index(phase, interval, j));
                    }
                    for &j in row_cols(mode, comp) {
                        cols.push(layout.state_index(phase, interval + 1, j));
                    }
                    if comp == 5 {
                        cols.push(layout.input_index(phase, interval));
                        cols.push(layout.input_index(phase, interval + 1));
                    }
                    if tau_row(mode, comp) {
                        cols.push(layout.duration_index(phase));
                    }
                }
                rows.push(cols);
            }
        }
    }
    for join in 0..2 {
        for comp in 0..STATE_DIM {
            rows.push(vec![
                layout.state_index(join, layout.nodes[join] - 1, comp),
                layout.state_index(join + 1, 0, comp),
            ]);
        }
    }
    // Touchdown guard at the first stance node: radius minus natural length.
    rows.push(vec![
        layout.state_index(1, 0, 0),
        layout.state_index(1, 0, 1),
        layout.state_index(1, 0, 4),
        layout.state_index(1, 0, 6),
    ]);
    // Liftoff guard at the last stance node: axial force.
    let lo = layout.nodes[1] - 1;
    rows.push((0..6).map(|c| layout.state_index(1, lo, c)).collect());
    // Boundary rows are single variables.
    let last = layout.nodes[2] - 1;
    for idx in [
        layout.state_index(0, 0, 1),
        layout.state_index(0, 0, 2),
        layout.state_index(0, 0, 3),
        layout.state_index(0, 0, 6),
        layout.state_index(2, last, 1),
        layout.state_index(2, last, 2),
        layout.state_index(2, last, 3),
    ] {
        rows.push(vec![idx]);
    }
    for row in &mut rows {
        for c in row.iter_mut() {
            *c += var_base;
        }
    }
    rows
}

/// Constraint values of one case block. `vars` is the case's slice of the
/// decision vector; results land in `out[0..layout.num_cons()]`.
pub(crate) fn fill_case_constraints(
    layout: &StepLayout,
    params: &Params,
    vars: &[f64],
    out: &mut [f64],
) -> Result<(), EvalError> {
    let taus = layout.taus(vars);
    let mut row = 0;
    for phase in 0..3 {
        let mode = StepLayout::phase_mode(phase);
        let h = taus[phase] / (layout.nodes[phase] - 1) as f64;
        for interval in 0..layout.nodes[phase] - 1 {
            let s0 = layout.state_at(vars, phase, interval);
            let s1 = layout.state_at(vars, phase, interval + 1);
            let u0 = vars[layout.input_index(phase, interval)];
            let u1 = vars[layout.input_index(phase, interval + 1)];
            let f0 = model::mode_deriv(mode, &s0, u0, params)
                .map_err(|e| EvalError(e.to_string()))?
                .as_array();
            let f1 = model::mode_deriv(mode, &s1, u1, params)
                .map_err(|e| EvalError(e.to_string()))?
                .as_array();
            let a0 = s0.as_array();
            let a1 = s1.as_array();
            for comp in 0..STATE_DIM {
                out[row] = if comp == 4 {
                    a1[4] - a0[4] - h * a0[5] - h * h * (2.0 * u0 + u1) / 6.0
                } else {
                    a1[comp] - a0[comp] - 0.5 * h * (f0[comp] + f1[comp])
                };
                row += 1;
            }
        }
    }
    for join in 0..2 {
        let prev = layout.state_at(vars, join, layout.nodes[join] - 1).as_array();
        let next = layout.state_at(vars, join + 1, 0).as_array();
        for comp in 0..STATE_DIM {
            out[row] = next[comp] - prev[comp];
            row += 1;
        }
    }
    let td = layout.state_at(vars, 1, 0);
    out[row] = model::touchdown_guard(&td);
    row += 1;
    let lo = layout.state_at(vars, 1, layout.nodes[1] - 1);
    out[row] = model::leg_force(&lo, params).map_err(|e| EvalError(e.to_string()))?;
    row += 1;
    let last = layout.nodes[2] - 1;
    for idx in [
        layout.state_index(0, 0, 1),
        layout.state_index(0, 0, 2),
        layout.state_index(0, 0, 3),
        layout.state_index(0, 0, 6),
        layout.state_index(2, last, 1),
        layout.state_index(2, last, 2),
        layout.state_index(2, last, 3),
    ] {
        out[row] = vars[idx];
        row += 1;
    }
    debug_assert_eq!(row, layout.num_cons());
    Ok(())
}

/// Writes one value into a pattern row (columns already global).
fn put(pattern: &SparsityPattern, vals: &mut [f64], row: usize, col: usize, v: f64) {
    let slot = pattern
        .find(row, col)
        .unwrap_or_else(|| panic!("pattern missing entry ({row}, {col})"));
    vals[slot] = v;
}

/// Jacobian values of one case block, written into the global values array
/// through the pattern. `row_base`/`var_base` place the case in the full
/// problem.
pub(crate) fn fill_case_jacobian(
    layout: &StepLayout,
    params: &Params,
    vars: &[f64],
    pattern: &SparsityPattern,
    row_base: usize,
    var_base: usize,
    vals: &mut [f64],
) -> Result<(), EvalError> {
    let taus = layout.taus(vars);
    let mut row = row_base;
    for phase in 0..3 {
        let mode = StepLayout::phase_mode(phase);
        let np1 = (layout.nodes[phase] - 1) as f64;
        let h = taus[phase] / np1;
        let tau_col = var_base + layout.duration_index(phase);
        for interval in 0..layout.nodes[phase] - 1 {
            let s0 = layout.state_at(vars, phase, interval);
            let s1 = layout.state_at(vars, phase, interval + 1);
            let u0 = vars[layout.input_index(phase, interval)];
            let u1 = vars[layout.input_index(phase, interval + 1)];
            let u0_col = var_base + layout.input_index(phase, interval);
            let u1_col = var_base + layout.input_index(phase, interval + 1);
            let s0_base = var_base + layout.state_index(phase, interval, 0);
            let s1_base = var_base + layout.state_index(phase, interval + 1, 0);
            let f0 = model::mode_deriv(mode, &s0, u0, params)
                .map_err(|e| EvalError(e.to_string()))?
                .as_array();
            let f1 = model::mode_deriv(mode, &s1, u1, params)
                .map_err(|e| EvalError(e.to_string()))?
                .as_array();
            let (ja0, _) =
                model::mode_jacobian(mode, &s0, params).map_err(|e| EvalError(e.to_string()))?;
            let (ja1, _) =
                model::mode_jacobian(mode, &s1, params).map_err(|e| EvalError(e.to_string()))?;
            for comp in 0..STATE_DIM {
                if comp == 4 {
                    put(pattern, vals, row, s0_base + 4, -1.0);
                    put(pattern, vals, row, s0_base + 5, -h);
                    put(pattern, vals, row, s1_base + 4, 1.0);
                    put(pattern, vals, row, u0_col, -h * h / 3.0);
                    put(pattern, vals, row, u1_col, -h * h / 6.0);
                    let dd_dh = -s0.r0dot - h * (2.0 * u0 + u1) / 3.0;
                    put(pattern, vals, row, tau_col, dd_dh / np1);
                } else {
                    for &j in row_cols(mode, comp) {
                        let id = if j == comp { 1.0 } else { 0.0 };
                        put(
                            pattern,
                            vals,
                            row,
                            s0_base + j,
                            -id - 0.5 * h * ja0[comp][j],
                        );
                        put(pattern, vals, row, s1_base + j, id - 0.5 * h * ja1[comp][j]);
                    }
                    if comp == 5 {
                        put(pattern, vals, row, u0_col, -0.5 * h);
                        put(pattern, vals, row, u1_col, -0.5 * h);
                    }
                    if tau_row(mode, comp) {
                        let v = -(f0[comp] + f1[comp]) / (2.0 * np1);
                        put(pattern, vals, row, tau_col, v);
                    }
                }
                row += 1;
            }
        }
    }
    for join in 0..2 {
        for comp in 0..STATE_DIM {
            let prev = var_base + layout.state_index(join, layout.nodes[join] - 1, comp);
            let next = var_base + layout.state_index(join + 1, 0, comp);
            put(pattern, vals, row, prev, -1.0);
            put(pattern, vals, row, next, 1.0);
            row += 1;
        }
    }
    // Touchdown guard: d/dx = x/r, d/dy = y/r, d/dr0 = d/drp = -1.
    let td = layout.state_at(vars, 1, 0);
    let r = td.leg_radius();
    if r < model::SINGULAR_RADIUS {
        return Err(EvalError("touchdown node at singular radius".into()));
    }
    let base = var_base + layout.state_index(1, 0, 0);
    put(pattern, vals, row, base, td.x / r);
    put(pattern, vals, row, base + 1, td.y / r);
    put(pattern, vals, row, base + 4, -1.0);
    put(pattern, vals, row, base + 6, -1.0);
    row += 1;
    // Liftoff guard: partials of F = k (r0 - r) + b (r0' - r').
    let lo = layout.state_at(vars, 1, layout.nodes[1] - 1);
    let r = lo.leg_radius();
    if r < model::SINGULAR_RADIUS {
        return Err(EvalError("liftoff node at singular radius".into()));
    }
    let (nx, ny) = (lo.x / r, lo.y / r);
    let rdot = nx * lo.xdot + ny * lo.ydot;
    let base = var_base + layout.state_index(1, layout.nodes[1] - 1, 0);
    put(
        pattern,
        vals,
        row,
        base,
        -params.stiffness * nx - params.damping * (lo.xdot - rdot * nx) / r,
    );
    put(
        pattern,
        vals,
        row,
        base + 1,
        -params.stiffness * ny - params.damping * (lo.ydot - rdot * ny) / r,
    );
    put(pattern, vals, row, base + 2, -params.damping * nx);
    put(pattern, vals, row, base + 3, -params.damping * ny);
    put(pattern, vals, row, base + 4, params.stiffness);
    put(pattern, vals, row, base + 5, params.damping);
    row += 1;
    let last = layout.nodes[2] - 1;
    for idx in [
        layout.state_index(0, 0, 1),
        layout.state_index(0, 0, 2),
        layout.state_index(0, 0, 3),
        layout.state_index(0, 0, 6),
        layout.state_index(2, last, 1),
        layout.state_index(2, last, 2),
        layout.state_index(2, last, 3),
    ] {
        put(pattern, vals, row, var_base + idx, 1.0);
        row += 1;
    }
    debug_assert_eq!(row, row_base + layout.num_cons());
    Ok(())
}

/// Variable bounds of one case block.
pub(crate) fn fill_case_var_bounds(
    layout: &StepLayout,
    params: &Params,
    xl: &mut [f64],
    xu: &mut [f64],
) {
    xl[..layout.num_vars()].fill(f64::NEG_INFINITY);
    xu[..layout.num_vars()].fill(f64::INFINITY);
    let (r0_lo, r0_hi) = params.setpoint_bounds();
    for phase in 0..3 {
        for node in 0..layout.nodes[phase] {
            let r0 = layout.state_index(phase, node, 4);
            xl[r0] = r0_lo;
            xu[r0] = r0_hi;
            if phase == 1 {
                xl[layout.state_index(phase, node, 1)] = STANCE_CLEARANCE * params.leg_length;
            }
            let u = layout.input_index(phase, node);
            xl[u] = -params.max_accel;
            xu[u] = params.max_accel;
        }
        let tau = layout.duration_index(phase);
        xl[tau] = MIN_NODE_SPACING * (layout.nodes[phase] - 1) as f64;
    }
}

/// Constraint bounds of one case block: defects, continuity, and guards are
/// homogeneous equalities; boundary rows pin raw variables to their apex
/// targets in the contact frame (world height minus the ground offset).
pub(crate) fn fill_case_con_bounds(
    layout: &StepLayout,
    bc: &BoundaryConditions,
    ground_offset: f64,
    cl: &mut [f64],
    cu: &mut [f64],
) {
    cl[..layout.num_cons()].fill(0.0);
    cu[..layout.num_cons()].fill(0.0);
    let targets = [
        bc.start_height - ground_offset,
        bc.start_speed,
        0.0,
        0.0,
        bc.end_height - ground_offset,
        bc.end_speed,
        0.0,
    ];
    for (k, t) in targets.into_iter().enumerate() {
        cl[layout.boundary_row(k)] = t;
        cu[layout.boundary_row(k)] = t;
    }
}

/// Ballistic-descent / spring-bounce / ballistic-ascent seed trajectory.
pub(crate) fn ballistic_guess(
    layout: &StepLayout,
    params: &Params,
    bc: &BoundaryConditions,
    ground_offset: f64,
) -> Vec<f64> {
    let mut x = vec![0.0; layout.num_vars()];
    let l0 = params.leg_length;
    let g = params.gravity;
    let y_apex = bc.start_height - ground_offset;
    let y_end = bc.end_height - ground_offset;
    let tau2 = std::f64::consts::PI * (params.mass / params.stiffness).sqrt();
    // The leg sweeps through stance while the body travels roughly
    // v_mean * tau2.  A speed change needs net horizontal impulse, which
    // tilts the sweep: braking plants the foot further ahead (larger entry
    // angle), accelerating leaves it behind (larger exit angle).
    let v_mean = 0.5 * (bc.start_speed + bc.end_speed);
    let base = (v_mean * tau2 / (2.0 * l0)).clamp(0.0, 0.6).asin();
    let bias = 0.5 * (bc.start_speed - bc.end_speed);
    let phi_in = (base + bias).clamp(-0.45, 1.1);
    let y_td = l0 * phi_in.cos();
    let tau1 = (2.0 * (y_apex - y_td).max(0.02) / g).sqrt();
    let omega = (params.stiffness / params.mass).sqrt();
    let amp = g * tau1 / omega + g * params.mass / params.stiffness;
    let x_td = -l0 * phi_in.sin();
    let x_apex = x_td - bc.start_speed * tau1;

    let set = |x: &mut [f64], layout: &StepLayout, phase: usize, node: usize, s: &State, u: f64| {
        let base = layout.state_index(phase, node, 0);
        x[base..base + STATE_DIM].copy_from_slice(&s.as_array());
        x[layout.input_index(phase, node)] = u;
    };

    for node in 0..layout.nodes[0] {
        let t = tau1 * node as f64 / (layout.nodes[0] - 1) as f64;
        let s = State {
            x: x_apex + bc.start_speed * t,
            y: y_apex - 0.5 * g * t * t,
            xdot: bc.start_speed,
            ydot: -g * t,
            r0: l0,
            r0dot: 0.0,
            rp: 0.0,
        };
        set(&mut x, layout, 0, node, &s, 0.0);
    }
    let mut liftoff = State {
        x: 0.0,
        y: 0.0,
        xdot: bc.end_speed,
        ydot: 0.0,
        r0: l0,
        r0dot: 0.0,
        rp: 0.0,
    };
    // Horizontal motion ramps linearly between the apex speeds so the
    // guessed velocities join the flight phases continuously; height
    // follows from the leg-compression profile.
    let accel = (bc.end_speed - bc.start_speed) / tau2;
    for node in 0..layout.nodes[1] {
        let t = tau2 * node as f64 / (layout.nodes[1] - 1) as f64;
        let r = l0 - amp * (std::f64::consts::PI * t / tau2).sin();
        let rdot =
            -amp * (std::f64::consts::PI / tau2) * (std::f64::consts::PI * t / tau2).cos();
        let sx = x_td + bc.start_speed * t + 0.5 * accel * t * t;
        let sxdot = bc.start_speed + accel * t;
        let sy = (r * r - sx * sx).max(0.01).sqrt();
        let s = State {
            x: sx,
            y: sy,
            xdot: sxdot,
            ydot: (r * rdot - sx * sxdot) / sy,
            r0: l0,
            r0dot: 0.0,
            rp: r - l0,
        };
        if node == layout.nodes[1] - 1 {
            liftoff = s;
        }
        set(&mut x, layout, 1, node, &s, 0.0);
    }
    let tau3 = if liftoff.ydot > 0.01 {
        liftoff.ydot / g
    } else {
        (2.0 * (y_end - liftoff.y).max(0.02) / g).sqrt()
    };
    for node in 0..layout.nodes[2] {
        let frac = node as f64 / (layout.nodes[2] - 1) as f64;
        let t = tau3 * frac;
        // Blend the horizontal speed toward the target apex speed so the
        // final boundary row starts nearly satisfied.
        let xdot = liftoff.xdot + (bc.end_speed - liftoff.xdot) * frac;
        let s = State {
            x: liftoff.x + 0.5 * (liftoff.xdot + xdot) * t,
            y: liftoff.y + liftoff.ydot * t - 0.5 * g * t * t,
            xdot,
            ydot: liftoff.ydot - g * t,
            r0: l0,
            r0dot: 0.0,
            rp: liftoff.rp * (-(params.stiffness / params.damping) * t).exp(),
        };
        set(&mut x, layout, 2, node, &s, 0.0);
    }
    x[layout.duration_index(0)] = tau1.max(MIN_NODE_SPACING * layout.nodes[0] as f64);
    x[layout.duration_index(1)] = tau2;
    x[layout.duration_index(2)] = tau3.max(MIN_NODE_SPACING * layout.nodes[2] as f64);
    x
}

/// Trapezoid weights: `1/2` at phase endpoints, `1` inside.
fn quad_weight(n: usize, i: usize) -> f64 {
    if i == 0 || i == n - 1 {
        0.5
    } else {
        1.0
    }
}

/// The single-case minimum-effort NLP.
pub struct StepNlp {
    layout: StepLayout,
    params: Params,
    bc: BoundaryConditions,
    ground_offset: f64,
    pattern: SparsityPattern,
    xl: Vec<f64>,
    xu: Vec<f64>,
    cl: Vec<f64>,
    cu: Vec<f64>,
    guess: Vec<f64>,
}

impl StepNlp {
    pub fn layout(&self) -> &StepLayout {
        &self.layout
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Builds the minimum-effort step problem on the nominal ground.
    pub fn build(
        params: &Params,
        bc: &BoundaryConditions,
        nodes: [usize; 3],
    ) -> Result<Self, TranscriptionError> {
        Self::build_offset(params, bc, nodes, 0.0)
    }

    pub(crate) fn build_offset(
        params: &Params,
        bc: &BoundaryConditions,
        nodes: [usize; 3],
        ground_offset: f64,
    ) -> Result<Self, TranscriptionError> {
        params.validate()?;
        bc.validate(params, ground_offset)?;
        let layout = StepLayout::new(nodes)?;
        let nv = layout.num_vars();
        let nc = layout.num_cons();
        let pattern = SparsityPattern::from_rows(nv, &case_pattern_rows(&layout, 0))?;
        let mut xl = vec![0.0; nv];
        let mut xu = vec![0.0; nv];
        fill_case_var_bounds(&layout, params, &mut xl, &mut xu);
        let mut cl = vec![0.0; nc];
        let mut cu = vec![0.0; nc];
        fill_case_con_bounds(&layout, bc, ground_offset, &mut cl, &mut cu);
        let guess = ballistic_guess(&layout, params, bc, ground_offset);
        Ok(StepNlp {
            layout,
            params: *params,
            bc: *bc,
            ground_offset,
            pattern,
            xl,
            xu,
            cl,
            cu,
            guess,
        })
    }

    /// Builds a [`MotionPlan`] from a solved decision vector. Join nodes
    /// share a knot time, so their two inputs are merged by averaging; the
    /// touchdown policy aims at the fixed contact point, expressed in a
    /// world frame whose origin sits under the initial apex.
    pub fn extract_plan(&self, x: &[f64]) -> Result<MotionPlan, TranscriptionError> {
        let layout = &self.layout;
        let taus = layout.taus(x);
        for (phase, tau) in taus.iter().enumerate() {
            if !(tau > &0.0) {
                return Err(TranscriptionError::BadSolution(format!(
                    "phase {phase} duration {tau} is not positive"
                )));
            }
        }
        let mut times = Vec::with_capacity(layout.total_nodes() - 2);
        let mut accels = Vec::with_capacity(layout.total_nodes() - 2);
        for phase in 0..3 {
            for node in 0..layout.nodes[phase] {
                let u = x[layout.input_index(phase, node)];
                if phase > 0 && node == 0 {
                    let merged = 0.5 * (*accels.last().unwrap() + u);
                    *accels.last_mut().unwrap() = merged;
                    continue;
                }
                times.push(layout.node_time(phase, node, &taus));
                accels.push(u);
            }
        }
        let horizon = taus.iter().sum();
        *times.last_mut().unwrap() = horizon;
        let plan = MotionPlan {
            times,
            accels,
            r0_init: x[layout.state_index(0, 0, 4)],
            r0dot_init: x[layout.state_index(0, 0, 5)],
            policy: TouchdownPolicy::FixedTarget {
                target_x: -x[layout.state_index(0, 0, 0)],
            },
            horizon,
            params: self.params,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn boundary_conditions(&self) -> &BoundaryConditions {
        &self.bc
    }

    pub fn ground_offset(&self) -> f64 {
        self.ground_offset
    }
}

impl NlpProblem for StepNlp {
    fn num_vars(&self) -> usize {
        self.layout.num_vars()
    }

    fn num_cons(&self) -> usize {
        self.layout.num_cons()
    }

    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.xl.clone(), self.xu.clone())
    }

    fn con_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.cl.clone(), self.cu.clone())
    }

    fn jacobian_pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    fn initial_guess(&self) -> Vec<f64> {
        self.guess.clone()
    }

    fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        let layout = &self.layout;
        let taus = layout.taus(x);
        let mut total = 0.0;
        for phase in 0..3 {
            let n = layout.nodes[phase];
            let h = taus[phase] / (n - 1) as f64;
            let mut sum = 0.0;
            for node in 0..n {
                let u = x[layout.input_index(phase, node)];
                sum += quad_weight(n, node) * u * u;
            }
            total += h * sum;
        }
        Ok(total)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        grad.fill(0.0);
        let layout = &self.layout;
        let taus = layout.taus(x);
        for phase in 0..3 {
            let n = layout.nodes[phase];
            let np1 = (n - 1) as f64;
            let h = taus[phase] / np1;
            let mut sum = 0.0;
            for node in 0..n {
                let u = x[layout.input_index(phase, node)];
                let w = quad_weight(n, node);
                grad[layout.input_index(phase, node)] = 2.0 * h * w * u;
                sum += w * u * u;
            }
            grad[layout.duration_index(phase)] = sum / np1;
        }
        Ok(())
    }

    fn constraints(&self, x: &[f64], c: &mut [f64]) -> Result<(), EvalError> {
        fill_case_constraints(&self.layout, &self.params, x, c)
    }

    fn jacobian_values(&self, x: &[f64], vals: &mut [f64]) -> Result<(), EvalError> {
        vals.fill(0.0);
        fill_case_jacobian(&self.layout, &self.params, x, &self.pattern, 0, 0, vals)
    }
}

/// A solved minimum-effort step.
pub struct StepSolution {
    pub plan: MotionPlan,
    pub result: SolveResult,
}

/// Wraps a problem with some variables pinned to fixed values through the
/// box bounds.  Used to warm-start hard solves: holding the phase durations
/// at the guess first makes the states dynamically consistent and avoids the
/// spurious basin where every duration collapses to its floor.
pub(crate) struct PinnedVars<'a, P: NlpProblem> {
    pub inner: &'a P,
    pub pins: Vec<(usize, f64)>,
}

impl<P: NlpProblem> NlpProblem for PinnedVars<'_, P> {
    fn num_vars(&self) -> usize {
        self.inner.num_vars()
    }
    fn num_cons(&self) -> usize {
        self.inner.num_cons()
    }
    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = self.inner.var_bounds();
        for &(idx, val) in &self.pins {
            lo[idx] = val;
            hi[idx] = val;
        }
        (lo, hi)
    }
    fn con_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.con_bounds()
    }
    fn jacobian_pattern(&self) -> &SparsityPattern {
        self.inner.jacobian_pattern()
    }
    fn initial_guess(&self) -> Vec<f64> {
        let mut g = self.inner.initial_guess();
        for &(idx, val) in &self.pins {
            g[idx] = val;
        }
        g
    }
    fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.inner.objective(x)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        self.inner.gradient(x, grad)
    }
    fn constraints(&self, x: &[f64], c: &mut [f64]) -> Result<(), EvalError> {
        self.inner.constraints(x, c)
    }
    fn jacobian_values(&self, x: &[f64], vals: &mut [f64]) -> Result<(), EvalError> {
        self.inner.jacobian_values(x, vals)
    }
}

/// Transcribes, solves, and extracts a plan for one minimum-effort step.
///
/// If the direct solve stalls, a second attempt first holds the phase
/// durations at the guess to settle the states, then frees them again.
pub fn solve_min_effort(
    params: &Params,
    bc: &BoundaryConditions,
    nodes: [usize; 3],
    opts: &SolverOptions,
) -> Result<StepSolution, TranscriptionError> {
    let mut nlp = StepNlp::build(params, bc, nodes)?;
    let mut result = solver::solve_with_env_backend(&nlp, opts)?;
    if !matches!(result.status, SolveStatus::Optimal | SolveStatus::Feasible) {
        let nv = nlp.layout().num_vars();
        let pins = (nv - 3..nv).map(|i| (i, nlp.initial_guess()[i])).collect();
        let staged = PinnedVars { inner: &nlp, pins };
        let stage_opts = SolverOptions {
            tol_con: opts.tol_con.max(1e-6),
            max_outer: 30,
            ..opts.clone()
        };
        let stage = solver::solve_with_env_backend(&staged, &stage_opts)?;
        if stage.x.iter().all(|v| v.is_finite()) {
            nlp.guess = stage.x;
            result = solver::solve_with_env_backend(&nlp, opts)?;
        }
    }
    match result.status {
        SolveStatus::Optimal | SolveStatus::Feasible => {
            let plan = nlp.extract_plan(&result.x)?;
            Ok(StepSolution { plan, result })
        }
        status => Err(TranscriptionError::Solve {
            status,
            violation: result.max_violation,
            message: result.message,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::check_jacobian;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_nodes() -> [usize; 3] {
        [3, 4, 3]
    }

    fn default_bc() -> BoundaryConditions {
        BoundaryConditions::level(1.15, 0.8)
    }

    #[test]
    fn layout_counts_match_hand_tallies() {
        // (3, 4, 3): N = 10 nodes -> 8 N + 3 = 83 variables. Constraints:
        // 7 defects x 7 intervals = 49, 14 continuity, 2 guards, 7 boundary
        // rows = 72 = 7 N + 2.
        let layout = StepLayout::new(small_nodes()).unwrap();
        assert_eq!(layout.num_vars(), 83);
        assert_eq!(layout.num_cons(), 72);
        let layout = StepLayout::new(DEFAULT_NODES).unwrap();
        assert_eq!(layout.num_vars(), 443);
        assert_eq!(layout.num_cons(), 387);
    }

    #[test]
    fn layout_indices_tile_without_overlap() {
        let layout = StepLayout::new(small_nodes()).unwrap();
        let mut seen = vec![false; layout.num_vars()];
        for phase in 0..3 {
            for node in 0..layout.nodes[phase] {
                for comp in 0..STATE_DIM {
                    let i = layout.state_index(phase, node, comp);
                    assert!(!seen[i]);
                    seen[i] = true;
                }
                let i = layout.input_index(phase, node);
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        for phase in 0..3 {
            let i = layout.duration_index(phase);
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn ballistic_arc_gives_zero_flight_defects() {
        // Trapezoidal integration is exact for ballistic flight (the
        // integrands are at most linear in time), so a sampled free-fall
        // arc must satisfy the descent-phase defects exactly.
        let nlp = StepNlp::build(&Params::default(), &default_bc(), small_nodes()).unwrap();
        let layout = *nlp.layout();
        let mut x = nlp.initial_guess();
        let mut c = vec![0.0; layout.num_cons()];
        nlp.constraints(&x, &mut c).unwrap();
        for interval in 0..layout.nodes[0] - 1 {
            for comp in 0..STATE_DIM {
                let d = c[layout.defect_row(0, interval, comp)];
                assert!(
                    d.abs() < 1e-14,
                    "descent defect ({interval}, {comp}) = {d:e}"
                );
            }
        }
        // Perturbing a state must show up in the corresponding defect.
        x[layout.state_index(0, 1, 1)] += 0.01;
        nlp.constraints(&x, &mut c).unwrap();
        assert!(c[layout.defect_row(0, 0, 1)].abs() > 1e-3);
    }

    #[test]
    fn effort_objective_matches_constant_input_integral() {
        // With u = 2 everywhere the effort is the exact integral of u^2
        // over the step: 4 * (tau0 + tau1 + tau2).
        let nlp = StepNlp::build(&Params::default(), &default_bc(), small_nodes()).unwrap();
        let layout = *nlp.layout();
        let mut x = nlp.initial_guess();
        for phase in 0..3 {
            for node in 0..layout.nodes[phase] {
                x[layout.input_index(phase, node)] = 2.0;
            }
            x[layout.duration_index(phase)] = 0.5;
        }
        assert_relative_eq!(nlp.objective(&x).unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_and_gradient_match_finite_differences() {
        let nlp = StepNlp::build(&Params::default(), &default_bc(), small_nodes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = nlp.initial_guess();
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
        let check = check_jacobian(&nlp, &x).unwrap();
        assert!(
            check.passes(1e-6),
            "max rel err {:e} at {:?}, grad err {:e}, missing {:?}",
            check.max_rel_error,
            check.worst_entry,
            check.grad_max_rel_error,
            check.missing
        );
    }

    #[test]
    fn guess_extracts_to_a_valid_plan() {
        let nlp = StepNlp::build(&Params::default(), &default_bc(), DEFAULT_NODES).unwrap();
        let x = nlp.initial_guess();
        let plan = nlp.extract_plan(&x).unwrap();
        assert_eq!(plan.times.len(), nlp.layout().total_nodes() - 2);
        let taus = [
            x[nlp.layout().duration_index(0)],
            x[nlp.layout().duration_index(1)],
            x[nlp.layout().duration_index(2)],
        ];
        assert_relative_eq!(plan.horizon, taus.iter().sum::<f64>());
        match plan.policy {
            TouchdownPolicy::FixedTarget { target_x } => {
                assert_relative_eq!(target_x, -x[nlp.layout().state_index(0, 0, 0)]);
            }
            _ => panic!("expected fixed-target policy"),
        }
    }

    #[test]
    fn small_min_effort_step_solves() {
        let opts = SolverOptions::default();
        let sol = solve_min_effort(&Params::default(), &default_bc(), [9, 15, 9], &opts).unwrap();
        assert!(
            sol.result.max_violation <= 1e-8,
            "violation {:e}",
            sol.result.max_violation
        );
        // The plan should descend, bounce, and ascend over a plausible
        // horizon for these apex conditions.
        assert!(sol.plan.horizon > 0.5 && sol.plan.horizon < 3.0);
    }
}
