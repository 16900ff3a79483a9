//! Piecewise-linear interpolation, its zero-order-hold companion for segment
//! slopes, and the linking constraint that ties collocation node inputs to a
//! shared control grid.
//!
//! Both interpolants extrapolate: queries left of the grid use the first
//! segment, queries right of it use the last. Queries that land exactly on an
//! interior knot take the left segment, which fixes the (one-sided) slope
//! convention used by the linking gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by grid construction and interpolation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GridError {
    #[error("interpolation needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("breakpoints must be strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("breakpoints and values have different lengths ({xs} vs {vs})")]
    LengthMismatch { xs: usize, vs: usize },
    #[error("control grid horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

fn check_grid(xs: &[f64], vs: &[f64]) -> Result<(), GridError> {
    if xs.len() < 2 {
        return Err(GridError::TooFewPoints(xs.len()));
    }
    if xs.len() != vs.len() {
        return Err(GridError::LengthMismatch {
            xs: xs.len(),
            vs: vs.len(),
        });
    }
    for i in 0..xs.len() {
        if !xs[i].is_finite() || !vs[i].is_finite() {
            return Err(GridError::NonFinite(i));
        }
        if i > 0 && xs[i] <= xs[i - 1] {
            return Err(GridError::NotIncreasing(i));
        }
    }
    Ok(())
}

/// Index of the segment `[xs[s], xs[s+1]]` used for a query, with the left
/// convention at interior knots and clamping outside the grid.
fn segment_index(xs: &[f64], xq: f64) -> usize {
    let below = xs.partition_point(|&x| x < xq);
    below.saturating_sub(1).min(xs.len() - 2)
}

/// Piecewise-linear interpolation with linear extrapolation beyond the grid.
pub fn lin_interp(xs: &[f64], vs: &[f64], xq: f64) -> Result<f64, GridError> {
    check_grid(xs, vs)?;
    let s = segment_index(xs, xq);
    let slope = (vs[s + 1] - vs[s]) / (xs[s + 1] - xs[s]);
    Ok(vs[s] + slope * (xq - xs[s]))
}

/// Zero-order hold: the value of the segment containing the query, with
/// intervals closed on the right, `vs[0]` below the grid and `vs[n-1]` above.
pub fn zoh(xs: &[f64], vs: &[f64], xq: f64) -> Result<f64, GridError> {
    check_grid(xs, vs)?;
    let below = xs.partition_point(|&x| x < xq);
    Ok(vs[below.saturating_sub(1).min(vs.len() - 1)])
}

/// Shared control grid: `values` sampled at evenly spaced knots on
/// `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub horizon: f64,
    pub values: Vec<f64>,
}

impl ControlGrid {
    pub fn new(horizon: f64, values: Vec<f64>) -> Result<Self, GridError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(GridError::BadHorizon(horizon));
        }
        if values.len() < 2 {
            return Err(GridError::TooFewPoints(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(ControlGrid { horizon, values })
    }

    /// Knot times `j * horizon / (m - 1)`.
    pub fn times(&self) -> Vec<f64> {
        let m = self.values.len();
        (0..m)
            .map(|j| j as f64 * self.horizon / (m - 1) as f64)
            .collect()
    }

    /// Interpolated control value at `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        lin_interp(&self.times(), &self.values, t).expect("validated at construction")
    }
}

/// Slope and interpolation weights of the segment containing `xq`.
///
/// Returns `(segment, theta, slope)` where `theta` is the barycentric
/// coordinate within the segment (outside `[0, 1]` when extrapolating).
pub fn interp_segment(xs: &[f64], vs: &[f64], xq: f64) -> Result<(usize, f64, f64), GridError> {
    check_grid(xs, vs)?;
    let s = segment_index(xs, xq);
    let width = xs[s + 1] - xs[s];
    let theta = (xq - xs[s]) / width;
    let slope = (vs[s + 1] - vs[s]) / width;
    Ok((s, theta, slope))
}

/// Residual of the linking constraint `g = u_k - interp(times, values, t_k)`
/// that pins a collocation node input to the shared control signal.
pub fn linking_constraint(
    u_k: f64,
    t_k: f64,
    times: &[f64],
    values: &[f64],
) -> Result<f64, GridError> {
    Ok(u_k - lin_interp(times, values, t_k)?)
}

/// Directional derivative of the linking residual along a direction in
/// decision space with sensitivities `du = d u_k`, `dt = d t_k`,
/// `d_times[j] = d times[j]`, and `d_values[j] = d values[j]`:
///
/// `dg = du - s * dt + s * interp(times, d_times, t_k)
///       - interp(times, d_values, t_k)`
///
/// where `s` is the left-convention slope of the segment containing `t_k`
/// (the zero-order hold over segment slopes). Knot motion enters through the
/// interpolated time sensitivity; value motion through the interpolated value
/// sensitivity.
pub fn linking_gradient(
    t_k: f64,
    times: &[f64],
    values: &[f64],
    du: f64,
    dt: f64,
    d_times: &[f64],
    d_values: &[f64],
) -> Result<f64, GridError> {
    let (s, theta, slope) = interp_segment(times, values, t_k)?;
    if d_times.len() != times.len() {
        return Err(GridError::LengthMismatch {
            xs: times.len(),
            vs: d_times.len(),
        });
    }
    if d_values.len() != values.len() {
        return Err(GridError::LengthMismatch {
            xs: times.len(),
            vs: d_values.len(),
        });
    }
    let dt_interp = (1.0 - theta) * d_times[s] + theta * d_times[s + 1];
    let dv_interp = (1.0 - theta) * d_values[s] + theta * d_values[s + 1];
    Ok(du - slope * dt + slope * dt_interp - dv_interp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn lin_interp_matches_hand_values() {
        let xs = [0.0, 1.0, 2.0];
        let vs = [0.0, 2.0, 4.0];
        assert_relative_eq!(lin_interp(&xs, &vs, 0.5).unwrap(), 1.0);
        assert_relative_eq!(lin_interp(&xs, &vs, 2.5).unwrap(), 5.0);
        assert_relative_eq!(lin_interp(&xs, &vs, -0.5).unwrap(), -1.0);
    }

    #[test]
    fn zoh_matches_hand_values() {
        let xs = [0.0, 1.0, 2.0];
        let vs = [3.0, 5.0, 7.0];
        assert_eq!(zoh(&xs, &vs, 0.5).unwrap(), 3.0);
        assert_eq!(zoh(&xs, &vs, 2.5).unwrap(), 7.0);
        // Right-closed intervals: exact knots take the left value.
        assert_eq!(zoh(&xs, &vs, 1.0).unwrap(), 3.0);
        assert_eq!(zoh(&xs, &vs, 1.5).unwrap(), 5.0);
        assert_eq!(zoh(&xs, &vs, 2.0).unwrap(), 5.0);
        assert_eq!(zoh(&xs, &vs, -1.0).unwrap(), 3.0);
    }

    #[test]
    fn rejects_malformed_grids() {
        assert!(matches!(
            lin_interp(&[0.0], &[1.0], 0.5),
            Err(GridError::TooFewPoints(1))
        ));
        assert!(matches!(
            lin_interp(&[0.0, 0.0], &[1.0, 2.0], 0.5),
            Err(GridError::NotIncreasing(1))
        ));
        assert!(matches!(
            lin_interp(&[0.0, 1.0], &[1.0], 0.5),
            Err(GridError::LengthMismatch { .. })
        ));
        assert!(ControlGrid::new(0.0, vec![0.0, 1.0]).is_err());
        assert!(ControlGrid::new(1.0, vec![0.0]).is_err());
    }

    #[test]
    fn control_grid_times_are_even() {
        let grid = ControlGrid::new(2.0, vec![0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let times = grid.times();
        assert_eq!(times.len(), 5);
        assert_relative_eq!(times[1], 0.5);
        assert_relative_eq!(times[4], 2.0);
        assert_relative_eq!(grid.value_at(0.25), 0.5);
    }

    #[test]
    fn linking_residual_matches_hand_values() {
        // Unit-slope signal on [0, 1]: interp(0.25) = 0.25.
        let times = [0.0, 1.0];
        let values = [0.0, 1.0];
        let g = linking_constraint(0.0, 0.25, &times, &values).unwrap();
        assert_relative_eq!(g, -0.25);
        // d g / d t_k = -slope = -1.
        let dg = linking_gradient(0.25, &times, &values, 0.0, 1.0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(dg, -1.0);
        // d g / d u_k = 1.
        let dg = linking_gradient(0.25, &times, &values, 1.0, 0.0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(dg, 1.0);
    }

    #[test]
    fn knot_queries_use_left_segment_slope() {
        let times = [0.0, 1.0, 2.0];
        let values = [0.0, 1.0, 3.0];
        // At the interior knot the value is exact and the slope is the left
        // segment's.
        assert_relative_eq!(lin_interp(&times, &values, 1.0).unwrap(), 1.0);
        let dg = linking_gradient(1.0, &times, &values, 0.0, 1.0, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_relative_eq!(dg, -1.0);
    }

    /// Strictly increasing times and matching values for property tests.
    fn grid_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..7).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.05f64..1.0, n),
                proptest::collection::vec(-3.0f64..3.0, n),
            )
                .prop_map(|(gaps, vs)| {
                    let mut xs = Vec::with_capacity(gaps.len());
                    let mut acc = 0.0;
                    for g in gaps {
                        xs.push(acc);
                        acc += g;
                    }
                    // gaps yielded n values; xs currently holds n knots built
                    // from cumulative sums starting at 0.
                    (xs, vs)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// Interpolation reproduces the data at every knot.
        #[test]
        fn exact_at_knots((xs, vs) in grid_strategy()) {
            for j in 0..xs.len() {
                let v = lin_interp(&xs, &vs, xs[j]).unwrap();
                prop_assert!((v - vs[j]).abs() < 1e-12, "knot {}: {} vs {}", j, v, vs[j]);
            }
        }

        /// Affine data is reproduced exactly, including extrapolation.
        #[test]
        fn affine_exactness(
            (xs, _) in grid_strategy(),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            xq in -1.0f64..3.0,
        ) {
            let vs: Vec<f64> = xs.iter().map(|&x| a * x + b).collect();
            let v = lin_interp(&xs, &vs, xq).unwrap();
            prop_assert!((v - (a * xq + b)).abs() < 1e-10);
        }

        /// The slope hold equals the interpolant's derivative inside segments.
        #[test]
        fn zoh_slope_matches_interp_derivative(
            (xs, vs) in grid_strategy(),
            frac in 0.1f64..0.9,
            seg_sel in 0usize..6,
        ) {
            prop_assume!(xs.len() >= 3);
            let seg = seg_sel % (xs.len() - 1);
            let xq = xs[seg] + frac * (xs[seg + 1] - xs[seg]);
            let slopes: Vec<f64> = (0..xs.len() - 1)
                .map(|i| (vs[i + 1] - vs[i]) / (xs[i + 1] - xs[i]))
                .collect();
            let held = zoh(&xs[..xs.len() - 1], &slopes, xq).unwrap();
            let h = 1e-7 * (xs[seg + 1] - xs[seg]);
            let fd = (lin_interp(&xs, &vs, xq + h).unwrap()
                - lin_interp(&xs, &vs, xq - h).unwrap()) / (2.0 * h);
            prop_assert!((held - fd).abs() < 1e-6 * (1.0 + held.abs()));
        }

        /// Shifting the signal and the node input together leaves the
        /// residual unchanged.
        #[test]
        fn linking_invariant_under_constant_shift(
            (xs, vs) in grid_strategy(),
            u in -2.0f64..2.0,
            t in -0.5f64..3.0,
            c in -5.0f64..5.0,
        ) {
            let g0 = linking_constraint(u, t, &xs, &vs).unwrap();
            let shifted: Vec<f64> = vs.iter().map(|v| v + c).collect();
            let g1 = linking_constraint(u + c, t, &xs, &shifted).unwrap();
            prop_assert!((g0 - g1).abs() < 1e-10);
        }

        /// The linking gradient agrees with a finite difference through a
        /// one-parameter family of grids, node times, and inputs.
        #[test]
        fn linking_gradient_matches_finite_differences(
            (xs, vs, d_times, d_values) in grid_strategy().prop_flat_map(|(xs, vs)| {
                let n = xs.len();
                (
                    Just(xs),
                    Just(vs),
                    proptest::collection::vec(-1.0f64..1.0, n),
                    proptest::collection::vec(-1.0f64..1.0, n),
                )
            }),
            du in -1.0f64..1.0,
            dt in -1.0f64..1.0,
            frac in 0.15f64..0.85,
            seg_sel in 0usize..6,
            u in -1.0f64..1.0,
        ) {
            let seg = seg_sel % (xs.len() - 1);
            let t = xs[seg] + frac * (xs[seg + 1] - xs[seg]);
            let analytic =
                linking_gradient(t, &xs, &vs, du, dt, &d_times, &d_values).unwrap();
            let h = 1e-7;
            let eval = |e: f64| {
                let times: Vec<f64> =
                    xs.iter().zip(&d_times).map(|(x, d)| x + e * d).collect();
                let values: Vec<f64> =
                    vs.iter().zip(&d_values).map(|(v, d)| v + e * d).collect();
                linking_constraint(u + e * du, t + e * dt, &times, &values).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            prop_assert!(
                (analytic - fd).abs() < 1e-5 * (1.0 + analytic.abs()),
                "analytic {} vs fd {}", analytic, fd
            );
        }
    }
}
