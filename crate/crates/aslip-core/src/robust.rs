//! Disturbance-stacked robust step optimization.
//!
//! The robust problem replicates the three-phase collocation block of
//! [`crate::collocation`] once per ground-height case and funnels every case
//! to the same world-frame final apex. Each case sees the ground shifted by
//! its offset `d_c`, so its apex boundary rows target `y - d_c` in the
//! contact frame while the world-frame start and goal are identical across
//! cases. What makes the cases one *plan* rather than five is input linking:
//! a single control signal, sampled on `m` evenly spaced points over a shared
//! horizon variable, must reproduce every node input of every case at that
//! node's cumulative time. The solved control grid plays back verbatim as
//! the plan's acceleration tape, and the per-case touchdown times and angles
//! become the leg retraction schedule.
//!
//! Problem size for `K` cases, `N` nodes per case, and `m` control points:
//!
//! * variables: `K (8 N + 3) + m + 1` — per-case states, inputs, and
//!   durations, plus the control values and the shared horizon;
//! * constraints: `K (7 N + 2) + K N + 2 (K - 1) + K` — per-case collocation
//!   blocks, one linking row per node per case, shared initial set-point
//!   position and rate, and one horizon cover `T_h ≥ Σ τ` per case.
//!
//! The objective is zero — this is a constraint satisfaction problem — with
//! an optional `ε Σ u²` regularizer for conditioning studies, off by
//! default.

use crate::collocation::{
    case_pattern_rows, fill_case_con_bounds, fill_case_constraints, fill_case_jacobian,
    fill_case_var_bounds, solve_min_effort, BoundaryConditions, PinnedVars, StepLayout,
    StepSolution, TranscriptionError,
};
use crate::interp::{interp_segment, lin_interp};
use crate::model::Params;
use crate::nlp::{EvalError, NlpProblem, SolveResult, SolveStatus, SolverOptions, SparsityPattern};
use crate::plan::{MotionPlan, TouchdownPolicy};
use crate::solver;
use serde::{Deserialize, Serialize};

/// Ground-height offsets used by the robust problem when none are given.
pub const DEFAULT_DISTURBANCES: [f64; 5] = [0.10, 0.05, 0.0, -0.05, -0.10];

/// Default number of shared control points.
pub const DEFAULT_GRID_POINTS: usize = 30;

/// Validated set of ground-height offsets: finite, pairwise distinct, and
/// containing the nominal case `0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DisturbanceSet {
    offsets: Vec<f64>,
}

impl DisturbanceSet {
    pub fn new(offsets: Vec<f64>) -> Result<Self, TranscriptionError> {
        if offsets.is_empty() {
            return Err(TranscriptionError::BadBoundary(
                "disturbance set is empty".into(),
            ));
        }
        for (i, d) in offsets.iter().enumerate() {
            if !d.is_finite() {
                return Err(TranscriptionError::BadBoundary(format!(
                    "disturbance {i} is not finite"
                )));
            }
            if offsets[..i].contains(d) {
                return Err(TranscriptionError::BadBoundary(format!(
                    "duplicate disturbance {d}"
                )));
            }
        }
        if !offsets.contains(&0.0) {
            return Err(TranscriptionError::BadBoundary(
                "disturbance set must include the nominal case 0".into(),
            ));
        }
        Ok(DisturbanceSet { offsets })
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

impl Default for DisturbanceSet {
    fn default() -> Self {
        DisturbanceSet {
            offsets: DEFAULT_DISTURBANCES.to_vec(),
        }
    }
}

impl TryFrom<Vec<f64>> for DisturbanceSet {
    type Error = String;
    fn try_from(v: Vec<f64>) -> Result<Self, String> {
        DisturbanceSet::new(v).map_err(|e| e.to_string())
    }
}

impl From<DisturbanceSet> for Vec<f64> {
    fn from(s: DisturbanceSet) -> Vec<f64> {
        s.offsets
    }
}

/// One robust planning task: boundary conditions, disturbance cases, and the
/// transcription resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustTask {
    pub bc: BoundaryConditions,
    #[serde(default)]
    pub disturbances: DisturbanceSet,
    #[serde(default = "default_nodes")]
    pub nodes: [usize; 3],
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_nodes() -> [usize; 3] {
    crate::collocation::DEFAULT_NODES
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

impl RobustTask {
    pub fn new(bc: BoundaryConditions) -> Self {
        RobustTask {
            bc,
            disturbances: DisturbanceSet::default(),
            nodes: default_nodes(),
            grid_points: default_grid_points(),
        }
    }
}

/// Index arithmetic for the stacked decision vector and constraint rows.
///
/// Variables: `K` case blocks (each laid out as in [`StepLayout`]), then the
/// `m` control values, then the shared horizon. Constraints: `K` case
/// blocks, the `2 (K - 1)` sharing rows, the `K N` linking rows in case-major
/// node order, then the `K` horizon covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RobustLayout {
    pub step: StepLayout,
    pub cases: usize,
    pub grid_points: usize,
}

impl RobustLayout {
    pub fn new(
        nodes: [usize; 3],
        cases: usize,
        grid_points: usize,
    ) -> Result<Self, TranscriptionError> {
        let step = StepLayout::new(nodes)?;
        if cases == 0 {
            return Err(TranscriptionError::BadBoundary(
                "robust problem needs at least one case".into(),
            ));
        }
        if grid_points < 2 {
            return Err(TranscriptionError::BadBoundary(format!(
                "control grid needs at least 2 points, got {grid_points}"
            )));
        }
        Ok(RobustLayout {
            step,
            cases,
            grid_points,
        })
    }

    pub fn case_var_base(&self, case: usize) -> usize {
        case * self.step.num_vars()
    }

    pub fn grid_value_index(&self, j: usize) -> usize {
        self.cases * self.step.num_vars() + j
    }

    pub fn horizon_index(&self) -> usize {
        self.cases * self.step.num_vars() + self.grid_points
    }

    pub fn num_vars(&self) -> usize {
        self.cases * self.step.num_vars() + self.grid_points + 1
    }

    pub fn case_row_base(&self, case: usize) -> usize {
        case * self.step.num_cons()
    }

    /// Sharing rows pin case `c`'s initial `(r0, r0dot)` to case 0's;
    /// `k = 2 (c - 1)` is the position row, `k + 1` the rate row.
    pub fn sharing_row(&self, k: usize) -> usize {
        debug_assert!(k < 2 * (self.cases - 1));
        self.cases * self.step.num_cons() + k
    }

    pub fn linking_row(&self, case: usize, node_id: usize) -> usize {
        debug_assert!(node_id < self.step.total_nodes());
        self.cases * self.step.num_cons()
            + 2 * (self.cases - 1)
            + case * self.step.total_nodes()
            + node_id
    }

    pub fn horizon_row(&self, case: usize) -> usize {
        self.cases * self.step.num_cons()
            + 2 * (self.cases - 1)
            + self.cases * self.step.total_nodes()
            + case
    }

    pub fn num_cons(&self) -> usize {
        self.horizon_row(self.cases - 1) + 1
    }

    /// Evenly spaced control knot times over `[0, horizon]`.
    fn grid_times(&self, horizon: f64) -> Vec<f64> {
        let m = self.grid_points;
        (0..m)
            .map(|j| j as f64 * horizon / (m - 1) as f64)
            .collect()
    }
}

/// The stacked disturbance-aware NLP.
pub struct RobustNlp {
    layout: RobustLayout,
    params: Params,
    task: RobustTask,
    /// Strength of the optional `ε Σ u²` regularizer; zero disables it.
    epsilon: f64,
    pattern: SparsityPattern,
    xl: Vec<f64>,
    xu: Vec<f64>,
    cl: Vec<f64>,
    cu: Vec<f64>,
    guess: Vec<f64>,
}

impl RobustNlp {
    pub fn build(params: &Params, task: &RobustTask) -> Result<Self, TranscriptionError> {
        params.validate()?;
        for &d in task.disturbances.offsets() {
            task.bc.validate(params, d)?;
        }
        let layout = RobustLayout::new(task.nodes, task.disturbances.len(), task.grid_points)?;
        let step = layout.step;
        let (v1, c1) = (step.num_vars(), step.num_cons());
        let cases = layout.cases;

        let mut rows: Vec<Vec<usize>> = Vec::with_capacity(layout.num_cons());
        for c in 0..cases {
            rows.extend(case_pattern_rows(&step, layout.case_var_base(c)));
        }
        for c in 1..cases {
            for comp in [4, 5] {
                rows.push(vec![
                    layout.case_var_base(0) + step.state_index(0, 0, comp),
                    layout.case_var_base(c) + step.state_index(0, 0, comp),
                ]);
            }
        }
        for c in 0..cases {
            let base = layout.case_var_base(c);
            for phase in 0..3 {
                for node in 0..step.nodes[phase] {
                    let mut cols = vec![base + step.input_index(phase, node)];
                    for q in 0..3 {
                        cols.push(base + step.duration_index(q));
                    }
                    for j in 0..layout.grid_points {
                        cols.push(layout.grid_value_index(j));
                    }
                    cols.push(layout.horizon_index());
                    rows.push(cols);
                }
            }
        }
        for c in 0..cases {
            let base = layout.case_var_base(c);
            let mut cols: Vec<usize> = (0..3).map(|q| base + step.duration_index(q)).collect();
            cols.push(layout.horizon_index());
            rows.push(cols);
        }
        let pattern = SparsityPattern::from_rows(layout.num_vars(), &rows)?;

        let mut xl = vec![f64::NEG_INFINITY; layout.num_vars()];
        let mut xu = vec![f64::INFINITY; layout.num_vars()];
        for c in 0..cases {
            let base = layout.case_var_base(c);
            fill_case_var_bounds(&step, params, &mut xl[base..], &mut xu[base..]);
        }
        for j in 0..layout.grid_points {
            xl[layout.grid_value_index(j)] = -params.max_accel;
            xu[layout.grid_value_index(j)] = params.max_accel;
        }
        xl[layout.horizon_index()] = 0.0;

        let mut cl = vec![0.0; layout.num_cons()];
        let mut cu = vec![0.0; layout.num_cons()];
        for (c, &d) in task.disturbances.offsets().iter().enumerate() {
            let base = layout.case_row_base(c);
            fill_case_con_bounds(&step, &task.bc, d, &mut cl[base..], &mut cu[base..]);
        }
        for c in 0..cases {
            cu[layout.horizon_row(c)] = f64::INFINITY;
        }

        let guess = cold_guess(&layout, params, task);
        Ok(RobustNlp {
            layout,
            params: *params,
            task: task.clone(),
            epsilon: 0.0,
            pattern,
            xl,
            xu,
            cl,
            cu,
            guess,
        })
    }

    pub fn layout(&self) -> &RobustLayout {
        &self.layout
    }

    pub fn task(&self) -> &RobustTask {
        &self.task
    }

    /// Enables the `ε Σ u²` regularizer over all case node inputs.
    pub fn with_regularization(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Replaces the cold guess with one built around a solved nominal step:
    /// each case re-times its descent ballistically to its shifted ground,
    /// keeps the nominal stance geometry, reads the set point from the
    /// nominal tape at its own clock, and the control grid samples the
    /// nominal acceleration signal, so every linking row starts at zero.
    pub fn warm_start(&mut self, nominal: &StepSolution) -> Result<(), TranscriptionError> {
        let layout = self.layout;
        let step = layout.step;
        let v1 = step.num_vars();
        if nominal.result.x.len() != v1 {
            return Err(TranscriptionError::BadSolution(format!(
                "nominal solution has {} variables, case needs {v1}",
                nominal.result.x.len()
            )));
        }
        let xn = &nominal.result.x;
        let profile = nominal.plan.profile();
        let g = self.params.gravity;
        let bc = &self.task.bc;
        let taus_n = [
            xn[step.duration_index(0)],
            xn[step.duration_index(1)],
            xn[step.duration_index(2)],
        ];
        let y_td = xn[step.state_index(1, 0, 1)];
        let x_td = xn[step.state_index(1, 0, 0)];

        let offsets = self.task.disturbances.offsets().to_vec();
        let tau0: Vec<f64> = offsets
            .iter()
            .map(|&d| (2.0 * (bc.start_height - d - y_td).max(0.01) / g).sqrt())
            .collect();
        let horizon = tau0
            .iter()
            .map(|t0| t0 + taus_n[1] + taus_n[2])
            .fold(0.0_f64, f64::max);
        let grid_times = layout.grid_times(horizon);
        let grid: Vec<f64> = grid_times
            .iter()
            .map(|&t| {
                lin_interp(&nominal.plan.times, &nominal.plan.accels, t)
                    .map(|u| u.clamp(-self.params.max_accel, self.params.max_accel))
            })
            .collect::<Result<_, _>>()
            .map_err(|e| TranscriptionError::BadSolution(e.to_string()))?;

        let mut x = vec![0.0; layout.num_vars()];
        for (c, &d) in offsets.iter().enumerate() {
            let base = layout.case_var_base(c);
            let cx = &mut x[base..base + v1];
            cx.copy_from_slice(xn);
            cx[step.duration_index(0)] = tau0[c];
            let taus_c = [tau0[c], taus_n[1], taus_n[2]];
            let shift = tau0[c] - taus_n[0];
            for node in 0..step.nodes[0] {
                let t = tau0[c] * node as f64 / (step.nodes[0] - 1) as f64;
                let idx = step.state_index(0, node, 0);
                cx[idx] = x_td - bc.start_speed * (tau0[c] - t);
                cx[idx + 1] = (bc.start_height - d) - 0.5 * g * t * t;
                cx[idx + 2] = bc.start_speed;
                cx[idx + 3] = -g * t;
                let (r0, r0dot) = profile.eval(t);
                cx[idx + 4] = r0;
                cx[idx + 5] = r0dot;
                cx[idx + 6] = 0.0;
            }
            for phase in 1..3 {
                for node in 0..step.nodes[phase] {
                    let idx = step.state_index(phase, node, 0);
                    let t = step.node_time(phase, node, &taus_c);
                    let _ = shift;
                    let (r0, r0dot) = profile.eval(t);
                    cx[idx + 4] = r0;
                    cx[idx + 5] = r0dot;
                    if phase == 1 {
                        cx[idx + 6] = cx[idx].hypot(cx[idx + 1]) - r0;
                    } else {
                        // Morph the ascent toward this case's apex target.
                        let frac = node as f64 / (step.nodes[2] - 1) as f64;
                        cx[idx + 1] -= d * frac;
                    }
                }
            }
            for phase in 0..3 {
                for node in 0..step.nodes[phase] {
                    let t = step.node_time(phase, node, &taus_c);
                    cx[step.input_index(phase, node)] = lin_interp(&grid_times, &grid, t)
                        .map_err(|e| TranscriptionError::BadSolution(e.to_string()))?;
                }
            }
        }
        for (j, &u) in grid.iter().enumerate() {
            x[layout.grid_value_index(j)] = u;
        }
        x[layout.horizon_index()] = horizon;
        self.guess = x;
        Ok(())
    }

    /// Builds the shared plan from a solved decision vector: the control
    /// grid becomes the acceleration tape and the per-case touchdowns become
    /// the time-indexed leg angle schedule.
    pub fn extract_plan(&self, x: &[f64]) -> Result<MotionPlan, TranscriptionError> {
        let layout = &self.layout;
        let step = layout.step;
        let horizon = x[layout.horizon_index()];
        if !(horizon > 0.0) {
            return Err(TranscriptionError::BadSolution(format!(
                "control horizon {horizon} is not positive"
            )));
        }
        let mut points: Vec<(f64, f64)> = (0..layout.cases)
            .map(|c| {
                let base = layout.case_var_base(c);
                let t_td = x[base + step.duration_index(0)];
                let xtd = x[base + step.state_index(1, 0, 0)];
                let ytd = x[base + step.state_index(1, 0, 1)];
                (t_td, (-xtd).atan2(ytd))
            })
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in points.windows(2) {
            if w[1].0 - w[0].0 < 1e-7 && (w[1].1 - w[0].1).abs() > 1e-6 {
                return Err(TranscriptionError::BadSolution(format!(
                    "inconsistent retraction: touchdowns at t = {:.6} and {:.6} \
                     disagree on the leg angle ({:.6} vs {:.6})",
                    w[0].0, w[1].0, w[0].1, w[1].1
                )));
            }
        }
        let plan = MotionPlan {
            times: layout.grid_times(horizon),
            accels: (0..layout.grid_points)
                .map(|j| x[layout.grid_value_index(j)])
                .collect(),
            r0_init: x[layout.case_var_base(0) + step.state_index(0, 0, 4)],
            r0dot_init: x[layout.case_var_base(0) + step.state_index(0, 0, 5)],
            policy: TouchdownPolicy::AngleSchedule { points },
            horizon,
            params: self.params,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Node times of one case, read from its duration variables.
    fn case_taus(&self, x: &[f64], case: usize) -> [f64; 3] {
        let base = self.layout.case_var_base(case);
        let step = &self.layout.step;
        [
            x[base + step.duration_index(0)],
            x[base + step.duration_index(1)],
            x[base + step.duration_index(2)],
        ]
    }
}

/// Per-case ballistic seed with a silent control grid; used when no nominal
/// solution is available (pattern checks, gradient tests).
fn cold_guess(layout: &RobustLayout, params: &Params, task: &RobustTask) -> Vec<f64> {
    let step = layout.step;
    let mut x = vec![0.0; layout.num_vars()];
    let mut horizon = 0.0_f64;
    for (c, &d) in task.disturbances.offsets().iter().enumerate() {
        let base = layout.case_var_base(c);
        let guess = crate::collocation::ballistic_guess(&step, params, &task.bc, d);
        let total: f64 = (0..3).map(|p| guess[step.duration_index(p)]).sum();
        horizon = horizon.max(total);
        x[base..base + step.num_vars()].copy_from_slice(&guess);
    }
    x[layout.horizon_index()] = horizon;
    x
}

impl NlpProblem for RobustNlp {
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
        if self.epsilon == 0.0 {
            return Ok(0.0);
        }
        let layout = &self.layout;
        let step = &layout.step;
        let mut sum = 0.0;
        for c in 0..layout.cases {
            let base = layout.case_var_base(c);
            for phase in 0..3 {
                for node in 0..step.nodes[phase] {
                    let u = x[base + step.input_index(phase, node)];
                    sum += u * u;
                }
            }
        }
        Ok(self.epsilon * sum)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        grad.fill(0.0);
        if self.epsilon == 0.0 {
            return Ok(());
        }
        let layout = &self.layout;
        let step = &layout.step;
        for c in 0..layout.cases {
            let base = layout.case_var_base(c);
            for phase in 0..3 {
                for node in 0..step.nodes[phase] {
                    let i = base + step.input_index(phase, node);
                    grad[i] = 2.0 * self.epsilon * x[i];
                }
            }
        }
        Ok(())
    }

    fn constraints(&self, x: &[f64], c: &mut [f64]) -> Result<(), EvalError> {
        let layout = &self.layout;
        let step = layout.step;
        let v1 = step.num_vars();
        for case in 0..layout.cases {
            let vb = layout.case_var_base(case);
            let rb = layout.case_row_base(case);
            fill_case_constraints(&step, &self.params, &x[vb..vb + v1], &mut c[rb..])?;
        }
        for case in 1..layout.cases {
            for (k, comp) in [4, 5].into_iter().enumerate() {
                let own = x[layout.case_var_base(case) + step.state_index(0, 0, comp)];
                let shared = x[layout.case_var_base(0) + step.state_index(0, 0, comp)];
                c[layout.sharing_row(2 * (case - 1) + k)] = own - shared;
            }
        }
        let horizon = x[layout.horizon_index()];
        if !(horizon > 1e-12) {
            return Err(EvalError(format!(
                "control horizon {horizon} too small to interpolate"
            )));
        }
        let grid_times = layout.grid_times(horizon);
        let grid: Vec<f64> = (0..layout.grid_points)
            .map(|j| x[layout.grid_value_index(j)])
            .collect();
        for case in 0..layout.cases {
            let taus = self.case_taus(x, case);
            let base = layout.case_var_base(case);
            let mut node_id = 0;
            for phase in 0..3 {
                for node in 0..step.nodes[phase] {
                    let t = step.node_time(phase, node, &taus);
                    let u = x[base + step.input_index(phase, node)];
                    let li = lin_interp(&grid_times, &grid, t)
                        .map_err(|e| EvalError(e.to_string()))?;
                    c[layout.linking_row(case, node_id)] = u - li;
                    node_id += 1;
                }
            }
            c[layout.horizon_row(case)] = horizon - taus.iter().sum::<f64>();
        }
        Ok(())
    }

    fn jacobian_values(&self, x: &[f64], vals: &mut [f64]) -> Result<(), EvalError> {
        vals.fill(0.0);
        let layout = &self.layout;
        let step = layout.step;
        let v1 = step.num_vars();
        let pattern = &self.pattern;
        for case in 0..layout.cases {
            let vb = layout.case_var_base(case);
            fill_case_jacobian(
                &step,
                &self.params,
                &x[vb..vb + v1],
                pattern,
                layout.case_row_base(case),
                vb,
                vals,
            )?;
        }
        for case in 1..layout.cases {
            for (k, comp) in [4, 5].into_iter().enumerate() {
                let row = layout.sharing_row(2 * (case - 1) + k);
                put(pattern, vals, row, layout.case_var_base(0) + step.state_index(0, 0, comp), -1.0);
                put(pattern, vals, row, layout.case_var_base(case) + step.state_index(0, 0, comp), 1.0);
            }
        }
        let horizon = x[layout.horizon_index()];
        if !(horizon > 1e-12) {
            return Err(EvalError(format!(
                "control horizon {horizon} too small to interpolate"
            )));
        }
        let grid_times = layout.grid_times(horizon);
        let grid: Vec<f64> = (0..layout.grid_points)
            .map(|j| x[layout.grid_value_index(j)])
            .collect();
        let th_col = layout.horizon_index();
        for case in 0..layout.cases {
            let taus = self.case_taus(x, case);
            let base = layout.case_var_base(case);
            let mut node_id = 0;
            for phase in 0..3 {
                let np1 = (step.nodes[phase] - 1) as f64;
                for node in 0..step.nodes[phase] {
                    let t = step.node_time(phase, node, &taus);
                    let row = layout.linking_row(case, node_id);
                    let (seg, theta, slope) =
                        interp_segment(&grid_times, &grid, t).map_err(|e| EvalError(e.to_string()))?;
                    put(pattern, vals, row, base + step.input_index(phase, node), 1.0);
                    for q in 0..3 {
                        // Node time depends on earlier full durations and a
                        // fraction of its own phase's.
                        let dt_dq = if q < phase {
                            1.0
                        } else if q == phase {
                            node as f64 / np1
                        } else {
                            0.0
                        };
                        put(
                            pattern,
                            vals,
                            row,
                            base + step.duration_index(q),
                            -slope * dt_dq,
                        );
                    }
                    put(pattern, vals, row, layout.grid_value_index(seg), -(1.0 - theta));
                    put(pattern, vals, row, layout.grid_value_index(seg + 1), -theta);
                    // Knot times scale with the horizon, so the interpolant
                    // slides under the fixed query: d g / d T_h = s t / T_h.
                    put(pattern, vals, row, th_col, slope * t / horizon);
                    node_id += 1;
                }
            }
            let row = layout.horizon_row(case);
            for q in 0..3 {
                put(pattern, vals, row, base + step.duration_index(q), -1.0);
            }
            put(pattern, vals, row, th_col, 1.0);
        }
        Ok(())
    }
}

/// Writes one value into a pattern row (mirrors the collocation helper).
fn put(pattern: &SparsityPattern, vals: &mut [f64], row: usize, col: usize, v: f64) {
    let slot = pattern
        .find(row, col)
        .unwrap_or_else(|| panic!("pattern missing entry ({row}, {col})"));
    vals[slot] = v;
}

/// A solved robust step: the shared plan plus the per-case problem report
/// and the nominal warm-start solution.
pub struct RobustSolution {
    pub plan: MotionPlan,
    pub result: SolveResult,
    pub nominal: StepSolution,
}

/// Solves the nominal minimum-effort step, warm-starts the stacked problem
/// from it, and extracts the shared plan. A stalled solve gets one retry
/// with the durations and horizon held at the warm start first.
pub fn solve_robust(
    params: &Params,
    task: &RobustTask,
    opts: &SolverOptions,
) -> Result<RobustSolution, TranscriptionError> {
    let nominal = solve_min_effort(params, &task.bc, task.nodes, opts)?;
    let mut nlp = RobustNlp::build(params, task)?;
    nlp.warm_start(&nominal)?;
    let mut result = solver::solve_with_env_backend(&nlp, opts)?;
    if !matches!(result.status, SolveStatus::Optimal | SolveStatus::Feasible) {
        let layout = *nlp.layout();
        let guess = nlp.initial_guess();
        let mut pins: Vec<(usize, f64)> = (0..layout.cases)
            .flat_map(|c| (0..3).map(move |q| layout.case_var_base(c) + layout.step.duration_index(q)))
            .map(|i| (i, guess[i]))
            .collect();
        pins.push((layout.horizon_index(), guess[layout.horizon_index()]));
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
            Ok(RobustSolution {
                plan,
                result,
                nominal,
            })
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
    use crate::model::State;
    use crate::nlp::check_jacobian;
    use crate::sim::{simulate_step, SimConfig, SimStatus};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_task(bc: BoundaryConditions) -> RobustTask {
        RobustTask {
            bc,
            disturbances: DisturbanceSet::new(vec![0.0, 0.05, -0.05]).unwrap(),
            nodes: [3, 4, 3],
            grid_points: 6,
        }
    }

    #[test]
    fn disturbance_sets_are_validated() {
        assert!(DisturbanceSet::new(vec![]).is_err());
        assert!(DisturbanceSet::new(vec![0.05, -0.05]).is_err());
        assert!(DisturbanceSet::new(vec![0.0, 0.05, 0.05]).is_err());
        assert!(DisturbanceSet::new(vec![0.0, f64::NAN]).is_err());
        let set = DisturbanceSet::default();
        assert_eq!(set.len(), 5);
        assert!(set.offsets().contains(&0.0));
    }

    #[test]
    fn layout_counts_match_the_documented_formula() {
        // K = 3 cases, N = 10 nodes, m = 6: V = 3 (8 10 + 3) + 6 + 1,
        // C = 3 (7 10 + 2) + 3 10 + 2 2 + 3.
        let layout = RobustLayout::new([3, 4, 3], 3, 6).unwrap();
        assert_eq!(layout.num_vars(), 3 * 83 + 6 + 1);
        assert_eq!(layout.num_cons(), 3 * 72 + 30 + 4 + 3);

        // The paper's 5-case setup is at least five times the single case.
        let five = RobustLayout::new([15, 25, 15], 5, DEFAULT_GRID_POINTS).unwrap();
        let single = StepLayout::new([15, 25, 15]).unwrap();
        assert_eq!(five.num_vars(), 5 * single.num_vars() + 30 + 1);
        assert_eq!(
            five.num_cons(),
            5 * single.num_cons() + 5 * single.total_nodes() + 8 + 5
        );
        assert!(five.num_vars() >= 5 * single.num_vars());
        assert!(five.num_cons() >= 5 * single.num_cons());
    }

    #[test]
    fn stacked_rows_tile_without_overlap() {
        let layout = RobustLayout::new([3, 4, 3], 3, 6).unwrap();
        let mut seen = vec![false; layout.num_cons()];
        let mut mark = |r: usize| {
            assert!(!seen[r], "row {r} assigned twice");
            seen[r] = true;
        };
        for c in 0..layout.cases {
            for k in 0..layout.step.num_cons() {
                mark(layout.case_row_base(c) + k);
            }
        }
        for k in 0..2 * (layout.cases - 1) {
            mark(layout.sharing_row(k));
        }
        for c in 0..layout.cases {
            for n in 0..layout.step.total_nodes() {
                mark(layout.linking_row(c, n));
            }
        }
        for c in 0..layout.cases {
            mark(layout.horizon_row(c));
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let params = Params::default();
        let task = small_task(BoundaryConditions::level(1.15, 0.7));
        let nlp = RobustNlp::build(&params, &task).unwrap().with_regularization(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = nlp.initial_guess();
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
        // Keep the horizon clear of the case durations so node times stay
        // off the control knots.
        x[nlp.layout().horizon_index()] += 0.13;
        let check = check_jacobian(&nlp, &x).unwrap();
        assert!(
            check.passes(1e-6),
            "jacobian mismatch: {:?} missing {:?} grad {:.3e}",
            check.worst_entry,
            check.missing,
            check.grad_max_rel_error,
        );
    }

    #[test]
    fn warm_start_zeroes_linking_and_sharing_rows() {
        let params = Params::default();
        let opts = SolverOptions::default();
        let bc = BoundaryConditions::level(1.15, 0.8);
        let nominal = solve_min_effort(&params, &bc, [9, 15, 9], &opts).unwrap();
        let mut task = small_task(bc);
        task.nodes = [9, 15, 9];
        let mut nlp = RobustNlp::build(&params, &task).unwrap();
        nlp.warm_start(&nominal).unwrap();
        let x = nlp.initial_guess();
        let mut c = vec![0.0; nlp.num_cons()];
        nlp.constraints(&x, &mut c).unwrap();
        let layout = nlp.layout();
        for k in 0..2 * (layout.cases - 1) {
            assert!(c[layout.sharing_row(k)].abs() < 1e-12);
        }
        for case in 0..layout.cases {
            for n in 0..layout.step.total_nodes() {
                assert!(
                    c[layout.linking_row(case, n)].abs() < 1e-9,
                    "case {case} node {n}: residual {}",
                    c[layout.linking_row(case, n)]
                );
            }
            assert!(c[layout.horizon_row(case)] >= -1e-12);
        }
        // The nominal case block reproduces the solved residuals.
        let nominal_case = task
            .disturbances
            .offsets()
            .iter()
            .position(|&d| d == 0.0)
            .unwrap();
        let base = layout.case_row_base(nominal_case);
        for k in 0..layout.step.num_cons() - 7 {
            assert!(
                c[base + k].abs() < 1e-6,
                "nominal case row {k}: residual {}",
                c[base + k]
            );
        }
    }

    #[test]
    fn single_case_robust_matches_min_effort_classification() {
        let params = Params::default();
        let opts = SolverOptions::default();
        let bc = BoundaryConditions::level(1.15, 0.8);
        let nodes = [9, 15, 9];
        let task = RobustTask {
            bc,
            disturbances: DisturbanceSet::new(vec![0.0]).unwrap(),
            nodes,
            grid_points: 12,
        };
        let robust = solve_robust(&params, &task, &opts).unwrap();
        assert!(robust.result.max_violation <= 1e-8);

        let start = State {
            x: 0.0,
            y: bc.start_height,
            xdot: bc.start_speed,
            ydot: 0.0,
            r0: robust.plan.r0_init,
            r0dot: robust.plan.r0dot_init,
            rp: 0.0,
        };
        let cfg = SimConfig::default();
        let run = simulate_step(&robust.plan, &start, &cfg).unwrap();
        assert_eq!(run.status, SimStatus::ApexReached);

        let nominal_start = State {
            r0: robust.nominal.plan.r0_init,
            r0dot: robust.nominal.plan.r0dot_init,
            ..start
        };
        let nominal_run = simulate_step(&robust.nominal.plan, &nominal_start, &cfg).unwrap();
        assert_eq!(nominal_run.status, SimStatus::ApexReached);
    }

    #[test]
    fn five_case_robust_solves_and_funnels() {
        let params = Params::default();
        let opts = SolverOptions::default();
        let bc = BoundaryConditions::level(1.15, 0.8);
        let task = RobustTask {
            bc,
            disturbances: DisturbanceSet::default(),
            nodes: [9, 15, 9],
            grid_points: 20,
        };
        let robust = solve_robust(&params, &task, &opts).unwrap();
        assert!(robust.result.max_violation <= 1e-8);

        // Shared-input property: the solved control signal reproduces every
        // node input at that node's time.
        let nlp = {
            let mut nlp = RobustNlp::build(&params, &task).unwrap();
            nlp.warm_start(&robust.nominal).unwrap();
            nlp
        };
        let mut c = vec![0.0; nlp.num_cons()];
        nlp.constraints(&robust.result.x, &mut c).unwrap();
        let layout = nlp.layout();
        for case in 0..layout.cases {
            for n in 0..layout.step.total_nodes() {
                assert!(c[layout.linking_row(case, n)].abs() <= 1e-7);
            }
        }

        // The touchdown schedule has one entry per case, with strictly
        // increasing times and steeper angles for later touchdowns.
        let TouchdownPolicy::AngleSchedule { points } = &robust.plan.policy else {
            panic!("robust plan should carry an angle schedule");
        };
        assert_eq!(points.len(), task.disturbances.len());
        for w in points.windows(2) {
            assert!(w[1].0 > w[0].0, "touchdown times out of order: {points:?}");
            assert!(
                w[1].1 > w[0].1 - 1e-9,
                "later touchdown should not be flatter: {points:?}"
            );
        }

        // Funnel check: simulate at each optimized disturbance.
        for &d in task.disturbances.offsets() {
            let start = State {
                x: 0.0,
                y: bc.start_height,
                xdot: bc.start_speed,
                ydot: 0.0,
                r0: robust.plan.r0_init,
                r0dot: robust.plan.r0dot_init,
                rp: 0.0,
            };
            let cfg = SimConfig {
                ground_y: d,
                ..SimConfig::default()
            };
            let run = simulate_step(&robust.plan, &start, &cfg).unwrap();
            assert_eq!(run.status, SimStatus::ApexReached, "d = {d}");
            let apex = run.apex.unwrap();
            assert!(
                (apex.y - bc.end_height).abs() < 2e-3,
                "d = {d}: apex height {} vs {}",
                apex.y,
                bc.end_height
            );
            assert!(
                (apex.xdot - bc.end_speed).abs() < 2e-3,
                "d = {d}: apex speed {} vs {}",
                apex.xdot,
                bc.end_speed
            );
        }
    }
}
