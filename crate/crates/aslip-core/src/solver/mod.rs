//! Built-in bound-constrained augmented-Lagrangian NLP solver.
//!
//! Outer loop: classic safeguarded multiplier iteration on the
//! Powell–Hestenes–Rockafellar function for two-sided constraints
//! `cl <= c(x) <= cu`. Inner loop: projected, damped Gauss–Newton steps on
//! the merit function, each step obtained from the symmetric quasidefinite
//! system
//!
//! ```text
//!   [ sigma I   J~' ] [d]   [ -grad ]
//!   [   J~   -I/rho ] [w] = [   0   ]
//! ```
//!
//! factorized by the sparse LDL^T in [`ldlt`]. `J~` keeps only rows whose
//! penalty term is active and columns of variables not pinned at a bound.
//! The KKT matrix is permuted once per problem with reverse Cuthill–McKee,
//! after pulling high-degree "hub" columns (shared controls, horizon) to a
//! dense tail, so collocation problems factor as a narrow band plus a small
//! dense block.

pub mod ldlt;

use crate::nlp::{EvalError, NlpProblem, SolveResult, SolveStatus, SolverOptions, SparsityPattern};
use ldlt::{Ldlt, LdltError, SymCsc};
use thiserror::Error;

/// Environment variable naming the NLP backend to use.
pub const BACKEND_ENV: &str = "ASLIP_NLP_BACKEND";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown NLP backend {0:?} (supported: \"builtin\")")]
    Unknown(String),
}

/// Solves with the backend named by `ASLIP_NLP_BACKEND` (default
/// `builtin`).
pub fn solve_with_env_backend(
    p: &dyn NlpProblem,
    opts: &SolverOptions,
) -> Result<SolveResult, BackendError> {
    match std::env::var(BACKEND_ENV).as_deref() {
        Err(_) | Ok("") | Ok("builtin") => Ok(solve(p, opts)),
        Ok(other) => Err(BackendError::Unknown(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// KKT ordering and assembly
// ---------------------------------------------------------------------------

/// Reverse Cuthill–McKee over the non-hub nodes, hubs appended at the end.
/// Nodes `0..n` are variables, `n..n+m` constraint rows.
fn kkt_ordering(pattern: &SparsityPattern, n: usize, m: usize) -> Vec<usize> {
    let nn = n + m;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nn];
    for i in 0..pattern.num_rows() {
        for &j in pattern.row(i) {
            adj[j].push(n + i);
            adj[n + i].push(j);
        }
    }
    let total_deg: usize = adj.iter().map(|a| a.len()).sum();
    let mean = total_deg as f64 / nn.max(1) as f64;
    let threshold = (4.0 * mean).max(24.0);
    let hub: Vec<bool> = adj.iter().map(|a| a.len() as f64 > threshold).collect();
    let deg_nh = |v: usize, adj: &[Vec<usize>]| adj[v].iter().filter(|&&u| !hub[u]).count();

    let mut visited = vec![false; nn];
    let mut order = Vec::with_capacity(nn);
    let mut queue = std::collections::VecDeque::new();
    let mut level = Vec::new();

    let bfs = |start: usize,
               visited: &mut Vec<bool>,
               queue: &mut std::collections::VecDeque<usize>,
               out: &mut Vec<usize>,
               adj: &Vec<Vec<usize>>| {
        queue.clear();
        queue.push_back(start);
        visited[start] = true;
        out.clear();
        while let Some(v) = queue.pop_front() {
            out.push(v);
            let mut nbrs: Vec<usize> = adj[v]
                .iter()
                .copied()
                .filter(|&u| !hub[u] && !visited[u])
                .collect();
            nbrs.sort_by_key(|&u| (deg_nh(u, adj), u));
            for u in nbrs {
                if !visited[u] {
                    visited[u] = true;
                    queue.push_back(u);
                }
            }
        }
    };

    loop {
        let Some(seed) = (0..nn)
            .filter(|&v| !hub[v] && !visited[v])
            .min_by_key(|&v| (deg_nh(v, &adj), v))
        else {
            break;
        };
        // One BFS to approximate a peripheral start, then the real pass.
        bfs(seed, &mut visited, &mut queue, &mut level, &adj);
        let start = *level.last().unwrap();
        for &v in &level {
            visited[v] = false;
        }
        bfs(start, &mut visited, &mut queue, &mut level, &adj);
        order.extend_from_slice(&level);
    }
    order.reverse();
    for v in 0..nn {
        if hub[v] {
            order.push(v);
        }
    }
    debug_assert_eq!(order.len(), nn);
    order
}

/// Permuted KKT pattern with slot maps from problem data into the CSC
/// values array. Built once; refilled numerically every iteration.
struct KktSystem {
    n: usize,
    m: usize,
    pos: Vec<usize>,
    mat: SymCsc,
    var_diag_slot: Vec<usize>,
    row_diag_slot: Vec<usize>,
    /// For each Jacobian nonzero (pattern storage order), its values slot.
    j_slot: Vec<usize>,
    factor: Ldlt,
    // scratch vectors sized n + m
    rhs: Vec<f64>,
    sol: Vec<f64>,
    resid: Vec<f64>,
}

impl KktSystem {
    fn new(pattern: &SparsityPattern, n: usize, m: usize) -> Result<Self, LdltError> {
        let nn = n + m;
        let order = kkt_ordering(pattern, n, m);
        let mut pos = vec![0usize; nn];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }

        // Collect entries per permuted column: (row, source) with source
        // tags: 0..n var diag, n..nn row diag, nn.. Jacobian nonzeros.
        let mut cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nn];
        for v in 0..nn {
            cols[pos[v]].push((pos[v], v));
        }
        let mut k = 0;
        for i in 0..pattern.num_rows() {
            for &j in pattern.row(i) {
                let (a, b) = (pos[j], pos[n + i]);
                let (r, c) = if a < b { (a, b) } else { (b, a) };
                cols[c].push((r, nn + k));
                k += 1;
            }
        }
        let mut col_ptr = vec![0usize; nn + 1];
        let mut row_idx = Vec::with_capacity(nn + k);
        let mut var_diag_slot = vec![0usize; n];
        let mut row_diag_slot = vec![0usize; m];
        let mut j_slot = vec![0usize; k];
        for (c, col) in cols.iter_mut().enumerate() {
            col.sort_unstable_by_key(|e| e.0);
            for &(r, src) in col.iter() {
                let slot = row_idx.len();
                row_idx.push(r);
                if src < n {
                    var_diag_slot[src] = slot;
                } else if src < nn {
                    row_diag_slot[src - n] = slot;
                } else {
                    j_slot[src - nn] = slot;
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        let nnz = row_idx.len();
        let mat = SymCsc {
            n: nn,
            col_ptr,
            row_idx,
            vals: vec![0.0; nnz],
        };
        let factor = Ldlt::analyze(&mat)?;
        Ok(KktSystem {
            n,
            m,
            pos,
            mat,
            var_diag_slot,
            row_diag_slot,
            j_slot,
            factor,
            rhs: vec![0.0; nn],
            sol: vec![0.0; nn],
            resid: vec![0.0; nn],
        })
    }

    /// Fills values and factorizes. Pinned variables get an identity
    /// row/column; inactive penalty rows keep only their `-1/rho` diagonal.
    fn factorize(
        &mut self,
        jvals: &[f64],
        pattern: &SparsityPattern,
        sigma: f64,
        rho: f64,
        pinned: &[bool],
        active: &[bool],
    ) -> Result<(), LdltError> {
        let vals = &mut self.mat.vals;
        for j in 0..self.n {
            vals[self.var_diag_slot[j]] = if pinned[j] { 1.0 } else { sigma };
        }
        for i in 0..self.m {
            vals[self.row_diag_slot[i]] = -1.0 / rho;
        }
        let mut k = 0;
        for i in 0..pattern.num_rows() {
            let keep_row = active[i];
            for &j in pattern.row(i) {
                vals[self.j_slot[k]] = if keep_row && !pinned[j] { jvals[k] } else { 0.0 };
                k += 1;
            }
        }
        self.factor.factor(&self.mat)
    }

    /// Solves for the primal step `d` given `-grad_phi` (already negated),
    /// with one round of iterative refinement when warranted.
    fn solve_step(&mut self, neg_grad: &[f64], pinned: &[bool], d: &mut [f64]) {
        let nn = self.n + self.m;
        self.rhs.fill(0.0);
        for j in 0..self.n {
            self.rhs[self.pos[j]] = if pinned[j] { 0.0 } else { neg_grad[j] };
        }
        self.sol.copy_from_slice(&self.rhs);
        self.factor.solve_in_place(&mut self.sol);

        // One refinement round keeps the step accurate at large rho.
        self.mat.mul_sym(&self.sol, &mut self.resid);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for i in 0..nn {
            self.resid[i] = self.rhs[i] - self.resid[i];
            worst = worst.max(self.resid[i].abs());
            scale = scale.max(self.rhs[i].abs());
        }
        if worst > 1e-13 * scale {
            self.factor.solve_in_place(&mut self.resid);
            for i in 0..nn {
                self.sol[i] += self.resid[i];
            }
        }
        for j in 0..self.n {
            d[j] = self.sol[self.pos[j]];
        }
    }
}

// ---------------------------------------------------------------------------
// Augmented Lagrangian outer/inner iteration
// ---------------------------------------------------------------------------

struct Work {
    c: Vec<f64>,
    e: Vec<f64>,
    active: Vec<bool>,
    grad: Vec<f64>,
    grad_phi: Vec<f64>,
    jvals: Vec<f64>,
    pinned: Vec<bool>,
    d: Vec<f64>,
    x_trial: Vec<f64>,
    c_trial: Vec<f64>,
}

/// PHR residual: distance of `c + mu/rho` outside `[cl, cu]`. A row is
/// active when its penalty curvature is nonzero there; equality rows are
/// quadratic in `c` everywhere and stay active even at `e = 0`.
fn phr_residual(
    c: &[f64],
    mu: &[f64],
    rho: f64,
    cl: &[f64],
    cu: &[f64],
    e: &mut [f64],
    active: &mut [bool],
) {
    for i in 0..c.len() {
        let s = c[i] + mu[i] / rho;
        if s > cu[i] {
            e[i] = s - cu[i];
            active[i] = true;
        } else if s < cl[i] {
            e[i] = s - cl[i];
            active[i] = true;
        } else {
            e[i] = 0.0;
            active[i] = cl[i] == cu[i];
        }
    }
}

fn max_violation(c: &[f64], cl: &[f64], cu: &[f64]) -> f64 {
    let mut v: f64 = 0.0;
    for i in 0..c.len() {
        v = v.max(c[i] - cu[i]).max(cl[i] - c[i]);
    }
    v
}

fn clamp_to_bounds(x: &mut [f64], xl: &[f64], xu: &[f64]) {
    for j in 0..x.len() {
        x[j] = x[j].clamp(xl[j], xu[j]);
    }
}

/// A variable is pinned when it sits at a finite bound and the merit
/// gradient pushes it further outside.
fn pin_flag(x: f64, xl: f64, xu: f64, g: f64) -> bool {
    let at_lo = xl.is_finite() && x - xl <= 1e-10 * (1.0 + xl.abs());
    let at_hi = xu.is_finite() && xu - x <= 1e-10 * (1.0 + xu.abs());
    (at_lo && g > 0.0) || (at_hi && g < 0.0)
}

/// Merit value at a trial point; `None` when evaluation fails (treated as
/// infinitely bad by the line search).
fn merit(
    p: &dyn NlpProblem,
    x: &[f64],
    mu: &[f64],
    rho: f64,
    cl: &[f64],
    cu: &[f64],
    c_buf: &mut [f64],
) -> Option<f64> {
    let f = p.objective(x).ok()?;
    if !f.is_finite() {
        return None;
    }
    p.constraints(x, c_buf).ok()?;
    let mut quad = 0.0;
    for i in 0..c_buf.len() {
        if !c_buf[i].is_finite() {
            return None;
        }
        let s = c_buf[i] + mu[i] / rho;
        let e = if s > cu[i] {
            s - cu[i]
        } else if s < cl[i] {
            s - cl[i]
        } else {
            0.0
        };
        quad += e * e;
    }
    Some(f + 0.5 * rho * quad)
}

struct InnerOutcome {
    proj_grad_norm: f64,
    iterations: usize,
    stalled: bool,
}

#[allow(clippy::too_many_arguments)]
fn inner_minimize(
    p: &dyn NlpProblem,
    kkt: &mut KktSystem,
    w: &mut Work,
    x: &mut [f64],
    mu: &[f64],
    rho: f64,
    omega: f64,
    xl: &[f64],
    xu: &[f64],
    cl: &[f64],
    cu: &[f64],
    opts: &SolverOptions,
) -> Result<InnerOutcome, EvalError> {
    let n = x.len();
    let pattern = p.jacobian_pattern();
    let mut delta = opts.delta_init;
    let mut iterations = 0;
    let mut tiny_steps = 0;

    let mut phi = merit(p, x, mu, rho, cl, cu, &mut w.c)
        .ok_or_else(|| EvalError("merit not evaluable at inner start".into()))?;

    loop {
        // Derivatives at the current point.
        p.gradient(x, &mut w.grad)?;
        p.constraints(x, &mut w.c)?;
        p.jacobian_values(x, &mut w.jvals)?;
        phr_residual(&w.c, mu, rho, cl, cu, &mut w.e, &mut w.active);

        // grad_phi = grad + rho J' e
        w.grad_phi.copy_from_slice(&w.grad);
        let mut k = 0;
        for i in 0..pattern.num_rows() {
            let re = rho * w.e[i];
            for &j in pattern.row(i) {
                if re != 0.0 {
                    w.grad_phi[j] += re * w.jvals[k];
                }
                k += 1;
            }
        }

        // Pin variables held at a bound by the gradient.
        let mut proj_grad_norm: f64 = 0.0;
        for j in 0..n {
            w.pinned[j] = pin_flag(x[j], xl[j], xu[j], w.grad_phi[j]);
            if !w.pinned[j] {
                proj_grad_norm = proj_grad_norm.max(w.grad_phi[j].abs());
            }
        }
        if proj_grad_norm <= omega {
            return Ok(InnerOutcome {
                proj_grad_norm,
                iterations,
                stalled: false,
            });
        }
        if iterations >= opts.max_inner {
            return Ok(InnerOutcome {
                proj_grad_norm,
                iterations,
                stalled: false,
            });
        }
        iterations += 1;

        // Try steps with increasing damping until the line search accepts.
        let mut accepted = false;
        while !accepted {
            let sigma = opts.sigma_base + delta;
            let factor_ok = kkt
                .factorize(&w.jvals, pattern, sigma, rho, &w.pinned, &w.active)
                .is_ok();
            if !factor_ok {
                delta *= 10.0;
                if delta > opts.delta_max {
                    return Ok(InnerOutcome {
                        proj_grad_norm,
                        iterations,
                        stalled: true,
                    });
                }
                continue;
            }
            for j in 0..n {
                w.d[j] = -w.grad_phi[j];
            }
            let neg_grad: Vec<f64> = w.d.clone();
            kkt.solve_step(&neg_grad, &w.pinned, &mut w.d);

            let m_slope: f64 = (0..n).map(|j| w.grad_phi[j] * w.d[j]).sum();
            if !(m_slope < 0.0) || !m_slope.is_finite() {
                delta *= 10.0;
                if delta > opts.delta_max {
                    return Ok(InnerOutcome {
                        proj_grad_norm,
                        iterations,
                        stalled: true,
                    });
                }
                continue;
            }

            let mut alpha = 1.0;
            for _ in 0..40 {
                for j in 0..n {
                    w.x_trial[j] = (x[j] + alpha * w.d[j]).clamp(xl[j], xu[j]);
                }
                if let Some(phi_t) = merit(p, &w.x_trial, mu, rho, cl, cu, &mut w.c_trial) {
                    if phi_t <= phi + 1e-4 * alpha * m_slope
                        || phi_t <= phi - 1e-14 * (1.0 + phi.abs())
                    {
                        let step: f64 = (0..n)
                            .map(|j| (w.x_trial[j] - x[j]).abs())
                            .fold(0.0, f64::max);
                        x.copy_from_slice(&w.x_trial);
                        if phi - phi_t <= 1e-15 * (1.0 + phi.abs()) && step <= 1e-12 {
                            tiny_steps += 1;
                        } else {
                            tiny_steps = 0;
                        }
                        phi = phi_t;
                        // Full steps mean the model curvature is adequate;
                        // heavy backtracking means it is missing curvature,
                        // so raise the damping for the next iteration.
                        if alpha >= 0.9 {
                            delta = (delta * 0.3).max(opts.delta_min);
                        } else if alpha < 0.125 {
                            delta = (delta * 4.0).min(opts.delta_max);
                        }
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                delta *= 10.0;
                if delta > opts.delta_max {
                    return Ok(InnerOutcome {
                        proj_grad_norm,
                        iterations,
                        stalled: true,
                    });
                }
            }
        }
        if tiny_steps >= 3 {
            return Ok(InnerOutcome {
                proj_grad_norm: {
                    // Recompute at the final point for an honest report.
                    p.gradient(x, &mut w.grad)?;
                    p.constraints(x, &mut w.c)?;
                    p.jacobian_values(x, &mut w.jvals)?;
                    phr_residual(&w.c, mu, rho, cl, cu, &mut w.e, &mut w.active);
                    w.grad_phi.copy_from_slice(&w.grad);
                    let mut k = 0;
                    for i in 0..pattern.num_rows() {
                        let re = rho * w.e[i];
                        for &j in pattern.row(i) {
                            if re != 0.0 {
                                w.grad_phi[j] += re * w.jvals[k];
                            }
                            k += 1;
                        }
                    }
                    let mut pg: f64 = 0.0;
                    for j in 0..n {
                        if !pin_flag(x[j], xl[j], xu[j], w.grad_phi[j]) {
                            pg = pg.max(w.grad_phi[j].abs());
                        }
                    }
                    pg
                },
                iterations,
                stalled: true,
            });
        }
    }
}

/// Solves `p` with the built-in augmented-Lagrangian method.
pub fn solve(p: &dyn NlpProblem, opts: &SolverOptions) -> SolveResult {
    let n = p.num_vars();
    let m = p.num_cons();
    let (xl, xu) = p.var_bounds();
    let (cl, cu) = p.con_bounds();
    let pattern = p.jacobian_pattern();
    assert_eq!(pattern.num_rows(), m);
    assert_eq!(pattern.num_vars(), n);

    let fail = |message: String, x: Vec<f64>| SolveResult {
        status: SolveStatus::Error,
        x,
        objective: f64::NAN,
        max_violation: f64::NAN,
        outer_iterations: 0,
        inner_iterations: 0,
        message,
    };

    let mut x = p.initial_guess();
    assert_eq!(x.len(), n);
    clamp_to_bounds(&mut x, &xl, &xu);

    let mut kkt = match KktSystem::new(pattern, n, m) {
        Ok(k) => k,
        Err(e) => return fail(format!("KKT setup failed: {e}"), x),
    };
    let mut w = Work {
        c: vec![0.0; m],
        e: vec![0.0; m],
        active: vec![false; m],
        grad: vec![0.0; n],
        grad_phi: vec![0.0; n],
        jvals: vec![0.0; pattern.nnz()],
        pinned: vec![false; n],
        d: vec![0.0; n],
        x_trial: vec![0.0; n],
        c_trial: vec![0.0; m],
    };

    let mut mu = vec![0.0; m];
    let mut rho = opts.rho_init;
    let mut omega = opts.omega_init;
    let mut eta = opts.eta_init;
    let mut inner_total = 0;
    let mut best_feas = f64::INFINITY;
    let mut capped_stalls = 0;
    let mut last_pg = f64::INFINITY;
    let mut message = String::new();
    let mut status = SolveStatus::IterationLimit;
    let mut outer_done = 0;

    for outer in 0..opts.max_outer {
        outer_done = outer + 1;
        let inner = match inner_minimize(
            p, &mut kkt, &mut w, &mut x, &mu, rho, omega, &xl, &xu, &cl, &cu, opts,
        ) {
            Ok(r) => r,
            Err(e) => return fail(format!("evaluation failed in inner loop: {e}"), x),
        };
        inner_total += inner.iterations;
        last_pg = inner.proj_grad_norm;

        if p.constraints(&x, &mut w.c).is_err() {
            return fail("constraints not evaluable at inner solution".into(), x);
        }
        let feas = max_violation(&w.c, &cl, &cu);
        if opts.verbose {
            eprintln!(
                "outer {outer:3}: rho {rho:9.1e}  feas {feas:10.3e}  pg {:9.2e}  \
                 inner {:3}{}  eta {eta:8.1e}  omega {omega:8.1e}",
                inner.proj_grad_norm,
                inner.iterations,
                if inner.stalled { "*" } else { " " },
            );
        }

        if feas <= opts.tol_con && last_pg <= opts.tol_grad {
            status = SolveStatus::Optimal;
            message = format!("converged after {} outer iterations", outer + 1);
            break;
        }

        if feas <= eta.max(opts.tol_con) {
            // Multiplier update; e was computed with the old mu.
            phr_residual(&w.c, &mu, rho, &cl, &cu, &mut w.e, &mut w.active);
            for i in 0..m {
                mu[i] = (rho * w.e[i]).clamp(-1e10, 1e10);
            }
            eta = (eta * 0.2).max(opts.tol_con * 0.1);
            omega = (omega * 0.2).max(opts.tol_grad * 0.05);
        } else {
            if rho >= opts.rho_max {
                if feas > 0.9 * best_feas && (inner.stalled || inner.iterations == 0) {
                    capped_stalls += 1;
                }
                if capped_stalls >= 3 {
                    status = SolveStatus::Infeasible;
                    message = format!(
                        "penalty capped at {rho:.1e} with violation {feas:.3e} not improving"
                    );
                    break;
                }
            }
            rho = (rho * 10.0).min(opts.rho_max);
        }
        best_feas = best_feas.min(feas);
    }

    // Independent recheck of the returned point.
    let objective = match p.objective(&x) {
        Ok(f) => f,
        Err(e) => return fail(format!("objective not evaluable at solution: {e}"), x),
    };
    let viol = match p.constraints(&x, &mut w.c) {
        Ok(()) => max_violation(&w.c, &cl, &cu),
        Err(e) => return fail(format!("constraints not evaluable at solution: {e}"), x),
    };
    if status != SolveStatus::Optimal && status != SolveStatus::Infeasible {
        if viol <= opts.tol_con {
            status = SolveStatus::Feasible;
            message = format!(
                "feasible (violation {viol:.3e}) but projected gradient {last_pg:.3e} above tolerance"
            );
        } else {
            message = format!(
                "iteration limit: violation {viol:.3e}, projected gradient {last_pg:.3e}"
            );
        }
    }
    SolveResult {
        status,
        x,
        objective,
        max_violation: viol,
        outer_iterations: outer_done,
        inner_iterations: inner_total,
        message,
    }
}
