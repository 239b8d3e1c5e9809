//! Continuous piecewise linear approximation of activation functions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of grid points; 4096 intervals keeps the grid on exact
/// binary fractions for power-of-two ranges.
pub const DEFAULT_GRID: usize = 4097;

/// Maximum number of candidate breakpoints the fitter considers.
const MAX_CANDIDATES: usize = 257;

/// A function sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

pub fn sample_uniform(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> Samples {
    let last = points.saturating_sub(1).max(1) as f64;
    let xs: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / last)
        .collect();
    let ys = xs.iter().map(|&x| f(x)).collect();
    Samples { xs, ys }
}

/// Continuous PWL stored as breakpoints and the values at them. Segments are
/// evaluated as `(1 - t) * y0 + t * y1`, which hits the shared breakpoint
/// value exactly from both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    /// Max absolute error over the fitting grid.
    pub max_error: f64,
}

impl PwlFunction {
    pub fn segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    fn segment_of(&self, x: f64) -> usize {
        let k = self.segments();
        // first breakpoint strictly greater than x, clamped to the boundary segments
        let upper = self.breakpoints.partition_point(|&b| b <= x);
        upper.clamp(1, k) - 1
    }

    pub fn slope(&self, segment: usize) -> f64 {
        let (x0, x1) = (self.breakpoints[segment], self.breakpoints[segment + 1]);
        (self.values[segment + 1] - self.values[segment]) / (x1 - x0)
    }

    pub fn intercept(&self, segment: usize) -> f64 {
        self.values[segment] - self.slope(segment) * self.breakpoints[segment]
    }

    /// Evaluate one segment (extended linearly outside its interval).
    pub fn eval_segment(&self, segment: usize, x: f64) -> f64 {
        let (x0, x1) = (self.breakpoints[segment], self.breakpoints[segment + 1]);
        let (y0, y1) = (self.values[segment], self.values[segment + 1]);
        let t = (x - x0) / (x1 - x0);
        (1.0 - t) * y0 + t * y1
    }

    /// Derivative used by backpropagation through the head activation.
    pub fn derivative(&self, x: f64) -> f64 {
        self.slope(self.segment_of(x))
    }

    /// Export as `breakpoint,slope,intercept`: one row per segment keyed by its
    /// left breakpoint, plus a closing row for the right end carrying the
    /// extension of the last segment.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["breakpoint", "slope", "intercept"])?;
        let k = self.segments();
        for s in 0..k {
            w.write_record(&[
                self.breakpoints[s].to_string(),
                self.slope(s).to_string(),
                self.intercept(s).to_string(),
            ])?;
        }
        w.write_record(&[
            self.breakpoints[k].to_string(),
            self.slope(k - 1).to_string(),
            self.intercept(k - 1).to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Exact segment evaluation; inputs outside the fitted range use the boundary
/// segment extended.
pub fn eval_pwl(pwl: &PwlFunction, x: f64) -> f64 {
    pwl.eval_segment(pwl.segment_of(x), x)
}

/// Fit a continuous PWL with at most `budget` segments minimizing the max
/// absolute error over the sample grid. Breakpoints are restricted to (a
/// uniform subset of at most 257) grid points; segments interpolate the
/// samples at their ends. Dynamic programming over candidate breakpoints
/// gives the minimax solution for that candidate set, and because fewer
/// segments are always allowed the error is non-increasing in `budget`.
pub fn fit_pwl(samples: &Samples, budget: usize) -> Result<PwlFunction> {
    if budget < 1 {
        return Err(Error::InvalidArgument("segment budget must be at least 1".into()));
    }
    let n = samples.xs.len();
    if n != samples.ys.len() || n < budget + 1 || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {budget} segments, got {n}",
            budget + 1
        )));
    }
    let stride = (n - 1).div_ceil(MAX_CANDIDATES - 1).max(1);
    let mut cand: Vec<usize> = (0..n).step_by(stride).collect();
    if *cand.last().unwrap() != n - 1 {
        cand.push(n - 1);
    }
    let c = cand.len();

    // cost[a][b]: max chord error between candidates a < b
    let mut cost = vec![f64::INFINITY; c * c];
    for a in 0..c {
        for b in a + 1..c {
            let (i0, i1) = (cand[a], cand[b]);
            let (x0, x1) = (samples.xs[i0], samples.xs[i1]);
            let (y0, y1) = (samples.ys[i0], samples.ys[i1]);
            let mut worst = 0.0f64;
            for i in i0..=i1 {
                let t = (samples.xs[i] - x0) / (x1 - x0);
                let approx = (1.0 - t) * y0 + t * y1;
                worst = worst.max((approx - samples.ys[i]).abs());
            }
            cost[a * c + b] = worst;
        }
    }

    let segs = budget.min(c - 1);
    // best[s][j]: minimax error covering candidates 0..=j with exactly s segments
    let mut best = vec![vec![f64::INFINITY; c]; segs + 1];
    let mut from = vec![vec![usize::MAX; c]; segs + 1];
    best[0][0] = 0.0;
    for s in 1..=segs {
        for j in 1..c {
            for i in 0..j {
                let prev = best[s - 1][i];
                if !prev.is_finite() {
                    continue;
                }
                let e = prev.max(cost[i * c + j]);
                if e < best[s][j] {
                    best[s][j] = e;
                    from[s][j] = i;
                }
            }
        }
    }
    let mut chosen = 1;
    for s in 1..=segs {
        if best[s][c - 1] < best[chosen][c - 1] {
            chosen = s;
        }
    }
    let mut idx = vec![c - 1];
    let mut j = c - 1;
    for s in (1..=chosen).rev() {
        j = from[s][j];
        idx.push(j);
    }
    idx.reverse();

    let breakpoints: Vec<f64> = idx.iter().map(|&k| samples.xs[cand[k]]).collect();
    let values: Vec<f64> = idx.iter().map(|&k| samples.ys[cand[k]]).collect();
    let mut pwl = PwlFunction {
        breakpoints,
        values,
        max_error: 0.0,
    };
    pwl.max_error = samples
        .xs
        .iter()
        .zip(&samples.ys)
        .map(|(&x, &y)| (eval_pwl(&pwl, x) - y).abs())
        .fold(0.0, f64::max);
    Ok(pwl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn relu_two_segments_exact() {
        let s = sample_uniform(|x| x.max(0.0), -4.0, 4.0, DEFAULT_GRID);
        let pwl = fit_pwl(&s, 2).unwrap();
        assert_eq!(pwl.max_error, 0.0);
        assert_eq!(eval_pwl(&pwl, -1.0), 0.0);
        assert_eq!(eval_pwl(&pwl, 2.0), 2.0);
    }

    #[test]
    fn identity_one_segment_exact() {
        let s = sample_uniform(|x| x, -3.0, 5.0, 101);
        let pwl = fit_pwl(&s, 1).unwrap();
        assert_eq!(pwl.segments(), 1);
        assert!(pwl.max_error < 1e-12);
    }

    #[test]
    fn sigmoid_sixteen_segments_within_one_percent() {
        let s = sample_uniform(sigmoid, -8.0, 8.0, DEFAULT_GRID);
        let pwl = fit_pwl(&s, 16).unwrap();
        assert!(pwl.segments() <= 16);
        // independent dense check, off the fitting grid
        let dense = sample_uniform(sigmoid, -8.0, 8.0, 100_003);
        let worst = dense
            .xs
            .iter()
            .zip(&dense.ys)
            .map(|(&x, &y)| (eval_pwl(&pwl, x) - y).abs())
            .fold(0.0, f64::max);
        assert!(pwl.max_error <= 0.01 && worst <= 0.01, "{} {worst}", pwl.max_error);
    }

    #[test]
    fn continuous_at_breakpoints() {
        let s = sample_uniform(f64::tanh, -3.0, 3.0, 1025);
        let pwl = fit_pwl(&s, 6).unwrap();
        for k in 1..pwl.segments() {
            let x = pwl.breakpoints[k];
            assert_eq!(pwl.eval_segment(k - 1, x), pwl.eval_segment(k, x));
        }
    }

    #[test]
    fn outside_range_extends_boundary_segments() {
        let s = sample_uniform(|x| x.max(0.0), -4.0, 4.0, DEFAULT_GRID);
        let pwl = fit_pwl(&s, 2).unwrap();
        assert_eq!(eval_pwl(&pwl, -10.0), 0.0);
        assert_eq!(eval_pwl(&pwl, 10.0), 10.0);
    }

    #[test]
    fn error_non_increasing_in_budget() {
        let s = sample_uniform(sigmoid, -8.0, 8.0, 1025);
        let errors: Vec<f64> = (1..=10).map(|k| fit_pwl(&s, k).unwrap().max_error).collect();
        for w in errors.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn zero_budget_rejected() {
        let s = sample_uniform(|x| x, 0.0, 1.0, 10);
        assert!(fit_pwl(&s, 0).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = sample_uniform(|x| x.max(0.0), -4.0, 4.0, DEFAULT_GRID);
        let pwl = fit_pwl(&s, 2).unwrap();
        let mut buf = Vec::new();
        pwl.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "breakpoint,slope,intercept");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "-4,0,0");
        assert_eq!(lines[2], "0,1,0");
    }
}
