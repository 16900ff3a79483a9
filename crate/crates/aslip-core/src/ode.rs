//! Adaptive Dormand–Prince 5(4) integration with dense output and event
//! location by bisection on the dense interpolant.
//!
//! Guards are scalar functions of `(t, y)`; an event fires when a guard
//! crosses from positive to nonpositive within an accepted step. The located
//! event state is always on the nonpositive side of the guard surface so a
//! caller can apply a reset without re-triggering the same event.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("derivative evaluation failed at t = {t}: {message}")]
    Deriv { t: f64, message: String },
    #[error("step size underflow at t = {t} (h = {h:.3e}): {context}")]
    StepSizeUnderflow { t: f64, h: f64, context: String },
    #[error("exceeded {0} integration steps")]
    TooManySteps(usize),
    #[error("bad integration interval [{t0}, {t1}]")]
    BadInterval { t0: f64, t1: f64 },
}

/// Integrator tolerances and limits.
#[derive(Debug, Clone)]
pub struct OdeOptions {
    pub atol: f64,
    pub rtol: f64,
    /// Cap on the step size; keeps guard sampling dense enough that a
    /// crossing cannot be stepped over unnoticed.
    pub max_step: f64,
    pub max_steps: usize,
    /// Guard magnitude at which bisection stops.
    pub guard_tol: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            atol: 1e-10,
            rtol: 1e-8,
            max_step: 0.02,
            max_steps: 2_000_000,
            guard_tol: 1e-10,
        }
    }
}

// Dormand–Prince 5(4) tableau (Hairer, Nørsett, Wanner ordering; FSAL).
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights (equal to the last `A` row; FSAL).
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const BHAT: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
/// Dense-output weights for the quartic interpolant.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Dense interpolant over one accepted step `[t0, t0 + h]`.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    cont: [Vec<f64>; 5],
}

impl DenseStep {
    fn build(t0: f64, h: f64, y0: &[f64], y1: &[f64], k: &[Vec<f64>; 7]) -> Self {
        let n = y0.len();
        let mut cont: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let delta = y1[i] - y0[i];
            cont[0][i] = y0[i];
            cont[1][i] = delta;
            cont[2][i] = h * k[0][i] - delta;
            cont[3][i] = delta - h * k[6][i] - cont[2][i];
            let mut acc = 0.0;
            for (j, d) in D.iter().enumerate() {
                acc += d * k[j][i];
            }
            cont[4][i] = h * acc;
        }
        DenseStep { t0, h, cont }
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t0) / self.h;
        let c = &self.cont;
        for i in 0..out.len() {
            out[i] = c[0][i]
                + theta
                    * (c[1][i]
                        + (1.0 - theta) * (c[2][i] + theta * (c[3][i] + (1.0 - theta) * c[4][i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.cont[0].len()];
        self.eval_into(t, &mut out);
        out
    }
}

/// Result of [`integrate_with_events`].
#[derive(Debug, Clone)]
pub struct Integration {
    pub t: f64,
    pub y: Vec<f64>,
    /// Index of the guard that fired, if any.
    pub event: Option<usize>,
    pub steps: usize,
}

/// Bisects a positive-to-nonpositive guard crossing bracketed by
/// `[t_pos, t_neg]` inside `step`. Returns the nonpositive-side time and
/// interpolated state.
pub fn locate_event<G>(guard: &mut G, step: &DenseStep, t_pos: f64, t_neg: f64, tol: f64) -> (f64, Vec<f64>)
where
    G: FnMut(f64, &[f64]) -> f64,
{
    let (mut lo, mut hi) = (t_pos, t_neg);
    let mut y = vec![0.0; step.cont[0].len()];
    for _ in 0..200 {
        if (hi - lo).abs() < 1e-15 * hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        step.eval_into(mid, &mut y);
        let g = guard(mid, &y);
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            if g.abs() <= tol {
                break;
            }
        }
    }
    step.eval_into(hi, &mut y);
    (hi, y)
}

/// Integrates `y' = f(t, y)` from `(t0, y0)` until `t_end` or the first
/// guard crossing. `on_segment(a, b, step)` is invoked for every accepted
/// step with `[a, b]` the portion actually traversed (shortened when an
/// event fires mid-step).
pub fn integrate_with_events<F, G, S>(
    mut f: F,
    guards: &mut [G],
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
    mut on_segment: S,
) -> Result<Integration, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), String>,
    G: FnMut(f64, &[f64]) -> f64,
    S: FnMut(f64, f64, &DenseStep),
{
    let n = y0.len();
    if !(t_end >= t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(OdeError::BadInterval { t0, t1: t_end });
    }
    let mut t = t0;
    let mut y = y0.to_vec();

    let mut g_prev: Vec<f64> = guards.iter_mut().map(|g| g(t, &y)).collect();
    if let Some(idx) = g_prev.iter().position(|&g| g <= 0.0) {
        return Ok(Integration {
            t,
            y,
            event: Some(idx),
            steps: 0,
        });
    }
    if t_end == t0 {
        return Ok(Integration {
            t,
            y,
            event: None,
            steps: 0,
        });
    }

    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut ytmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    f(t, &y, &mut k[0]).map_err(|message| OdeError::Deriv { t, message })?;

    // Initial step from derivative magnitude; the controller refines it.
    let scale = |yi: f64, yj: f64| opts.atol + opts.rtol * yi.abs().max(yj.abs());
    let mut h = {
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..n {
            let sc = scale(y[i], y[i]);
            d0 += (y[i] / sc).powi(2);
            d1 += (k[0][i] / sc).powi(2);
        }
        let (d0, d1) = ((d0 / n as f64).sqrt(), (d1 / n as f64).sqrt());
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h0.min(opts.max_step).min(t_end - t0)
    };

    let mut steps = 0usize;
    let mut last_deriv_err: Option<String> = None;
    loop {
        if t >= t_end - 1e-14 * t_end.abs().max(1.0) {
            return Ok(Integration {
                t,
                y,
                event: None,
                steps,
            });
        }
        if steps >= opts.max_steps {
            return Err(OdeError::TooManySteps(opts.max_steps));
        }
        steps += 1;
        h = h.min(opts.max_step).min(t_end - t);
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(OdeError::StepSizeUnderflow {
                t,
                h,
                context: last_deriv_err.unwrap_or_else(|| "error control stalled".into()),
            });
        }

        // Stages 2..7; the last A row equals the fifth-order weights, so the
        // stage-7 argument is y1 itself (FSAL).
        let mut stage_failed = None;
        for s in 0..6 {
            for i in 0..n {
                let mut acc = 0.0;
                for (l, a) in A[s].iter().enumerate().take(s + 1) {
                    acc += a * k[l][i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            if s == 5 {
                y1.copy_from_slice(&ytmp);
            }
            if let Err(message) = f(t + C[s] * h, &ytmp, &mut k[s + 1]) {
                stage_failed = Some(message);
                break;
            }
        }
        if let Some(message) = stage_failed {
            last_deriv_err = Some(message);
            h *= 0.25;
            continue;
        }

        // Embedded error estimate.
        let mut err_acc = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for j in 0..7 {
                e += (B[j] - BHAT[j]) * k[j][i];
            }
            e *= h;
            let sc = scale(y[i], y1[i]);
            err_acc += (e / sc).powi(2);
        }
        let err = (err_acc / n as f64).sqrt();
        if !err.is_finite() || y1.iter().any(|v| !v.is_finite()) {
            last_deriv_err = Some("non-finite trial step".into());
            h *= 0.25;
            continue;
        }

        if err <= 1.0 {
            let step = DenseStep::build(t, h, &y, &y1, &k);
            let t1 = t + h;

            // Detect and locate guard crossings (earliest wins, ties by
            // guard order).
            let mut hit: Option<(usize, f64, Vec<f64>)> = None;
            for (idx, guard) in guards.iter_mut().enumerate() {
                let g_new = guard(t1, &y1);
                if g_prev[idx] > 0.0 && g_new <= 0.0 {
                    let (tc, yc) = locate_event(guard, &step, t, t1, opts.guard_tol);
                    if hit.as_ref().map_or(true, |(_, tbest, _)| tc < *tbest) {
                        hit = Some((idx, tc, yc));
                    }
                } else {
                    g_prev[idx] = g_new;
                }
            }
            if let Some((idx, tc, yc)) = hit {
                on_segment(t, tc, &step);
                return Ok(Integration {
                    t: tc,
                    y: yc,
                    event: Some(idx),
                    steps,
                });
            }

            on_segment(t, t1, &step);
            t = t1;
            std::mem::swap(&mut y, &mut y1);
            let (head, tail) = k.split_at_mut(1);
            head[0].copy_from_slice(&tail[5]);
            last_deriv_err = None;
            let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
            h *= factor;
        } else {
            let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 0.9);
            h *= factor;
        }
    }
}

/// Event-free convenience wrapper around [`integrate_with_events`].
pub fn integrate<F, S>(
    f: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
    on_segment: S,
) -> Result<Integration, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), String>,
    S: FnMut(f64, f64, &DenseStep),
{
    let mut no_guards: [fn(f64, &[f64]) -> f64; 0] = [];
    integrate_with_events(f, &mut no_guards, t0, y0, t_end, opts, on_segment)
}
