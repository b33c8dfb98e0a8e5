//! Adaptive Runge-Kutta-Fehlberg 4(5) integration with Hermite dense output,
//! piecewise (rescaled) solutions, and global adaptive Simpson quadrature.
//!
//! Solutions store knots in ascending time order regardless of the direction
//! in which they were integrated, so evaluation does not care how a solution
//! was produced.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-size control parameters. Step bounds are fractions of the interval
/// length so one config serves intervals of any scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_step_fraction: f64,
    pub min_step_fraction: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-9,
            max_step_fraction: 1.0 / 16.0,
            min_step_fraction: 1e-12,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.min_step_fraction > 0.0 && self.min_step_fraction < self.max_step_fraction) {
            return Err(Error::InvalidArgument(
                "min step must be positive and below max step".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Knots of an integrated trajectory with cubic Hermite dense output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSolution {
    dim: usize,
    times: Vec<f64>,
    values: Vec<f64>,
    derivs: Vec<f64>,
    direction: Direction,
}

impl OdeSolution {
    /// Builds a solution from raw knots. Times must be strictly increasing.
    pub fn from_knots(
        dim: usize,
        times: Vec<f64>,
        values: Vec<f64>,
        derivs: Vec<f64>,
        direction: Direction,
    ) -> Result<Self> {
        if times.is_empty() || values.len() != times.len() * dim || derivs.len() != values.len() {
            return Err(Error::InvalidArgument("knot arrays have inconsistent lengths".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("knot times must be strictly increasing".into()));
        }
        Ok(Self {
            dim,
            times,
            values,
            derivs,
            direction,
        })
    }

    /// A solution that is constant over `[t0, t1]`.
    pub fn constant(t0: f64, t1: f64, value: &[f64]) -> Self {
        let (a, b) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        let dim = value.len();
        let mut values = value.to_vec();
        values.extend_from_slice(value);
        Self {
            dim,
            times: vec![a, b],
            values,
            derivs: vec![0.0; 2 * dim],
            direction: Direction::Forward,
        }
    }

    /// Straight line from `y0` at `t0` to `y1` at `t1` (`t0 < t1`).
    pub fn linear(t0: f64, t1: f64, y0: &[f64], y1: &[f64]) -> Self {
        let dim = y0.len();
        let slope: Vec<f64> = y0.iter().zip(y1).map(|(a, b)| (b - a) / (t1 - t0)).collect();
        let mut values = y0.to_vec();
        values.extend_from_slice(y1);
        let mut derivs = slope.clone();
        derivs.extend_from_slice(&slope);
        Self {
            dim,
            times: vec![t0, t1],
            values,
            derivs,
            direction: Direction::Forward,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn num_knots(&self) -> usize {
        self.times.len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn knot_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn knot_deriv(&self, k: usize) -> &[f64] {
        &self.derivs[k * self.dim..(k + 1) * self.dim]
    }

    /// Value at the initial condition of the integration (last knot for a
    /// backward solution).
    pub fn initial_value(&self) -> &[f64] {
        match self.direction {
            Direction::Forward => self.knot_value(0),
            Direction::Backward => self.knot_value(self.num_knots() - 1),
        }
    }

    /// Value where integration stopped.
    pub fn final_value(&self) -> &[f64] {
        match self.direction {
            Direction::Forward => self.knot_value(self.num_knots() - 1),
            Direction::Backward => self.knot_value(0),
        }
    }

    fn span_check(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * (1.0 + (self.end() - self.start()).abs());
        if t < self.start() - slack || t > self.end() + slack || t.is_nan() {
            return Err(Error::OutsideSpan {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        Ok(())
    }

    /// Interpolated state at `t`.
    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        self.span_check(t)?;
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        Ok(out)
    }

    /// Interpolated derivative at `t`.
    pub fn evaluate_derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.span_check(t)?;
        let mut out = vec![0.0; self.dim];
        self.deriv_into(t, &mut out);
        Ok(out)
    }

    fn bracket(&self, t: f64) -> usize {
        let n = self.times.len();
        if n == 1 {
            return 0;
        }
        let k = self.times.partition_point(|&s| s <= t);
        k.clamp(1, n - 1) - 1
    }

    /// Unchecked evaluation; `t` outside the span is clamped.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        if n == 1 {
            out.copy_from_slice(self.knot_value(0));
            return;
        }
        let t = t.clamp(self.start(), self.end());
        let k = self.bracket(t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        if t == t0 {
            out.copy_from_slice(self.knot_value(k));
            return;
        }
        if t == t1 {
            out.copy_from_slice(self.knot_value(k + 1));
            return;
        }
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (y0, y1) = (self.knot_value(k), self.knot_value(k + 1));
        let (f0, f1) = (self.knot_deriv(k), self.knot_deriv(k + 1));
        for d in 0..self.dim {
            out[d] = h00 * y0[d] + h10 * h * f0[d] + h01 * y1[d] + h11 * h * f1[d];
        }
    }

    /// Unchecked derivative of the Hermite interpolant.
    pub fn deriv_into(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        if n == 1 {
            out.copy_from_slice(self.knot_deriv(0));
            return;
        }
        let t = t.clamp(self.start(), self.end());
        let k = self.bracket(t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        let (y0, y1) = (self.knot_value(k), self.knot_value(k + 1));
        let (f0, f1) = (self.knot_deriv(k), self.knot_deriv(k + 1));
        for d in 0..self.dim {
            out[d] = d00 * y0[d] + d10 * f0[d] + d01 * y1[d] + d11 * f1[d];
        }
    }

    /// Multiplies every stored value and derivative by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut s = self.clone();
        s.values.iter_mut().for_each(|v| *v *= c);
        s.derivs.iter_mut().for_each(|v| *v *= c);
        s
    }
}

// Fehlberg 4(5) tableau.
const C: [f64; 6] = [0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5];
const A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];
const B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// Integrates `dy/dt = rhs(t, y)` from `t_start` to `t_end` (either order).
pub fn integrate<F>(
    rhs: F,
    t_start: f64,
    t_end: f64,
    y0: &[f64],
    config: &IntegratorConfig,
) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    integrate_until(rhs, t_start, t_end, y0, config, |_| false).map(|(sol, _)| sol)
}

/// Like [`integrate`], but stops early after the first accepted step whose
/// state satisfies `stop`. Returns the (possibly partial) solution and
/// whether it stopped early.
pub fn integrate_until<F, S>(
    mut rhs: F,
    t_start: f64,
    t_end: f64,
    y0: &[f64],
    config: &IntegratorConfig,
    mut stop: S,
) -> Result<(OdeSolution, bool)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    S: FnMut(&[f64]) -> bool,
{
    config.validate()?;
    let span = t_end - t_start;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::InvalidArgument("integration interval must be non-empty".into()));
    }
    let dim = y0.len();
    let sign = span.signum();
    let length = span.abs();
    let max_step = config.max_step_fraction * length;
    let min_step = config.min_step_fraction * length;
    let direction = if sign > 0.0 {
        Direction::Forward
    } else {
        Direction::Backward
    };

    let mut t = t_start;
    let mut y = y0.to_vec();
    let mut f = vec![0.0; dim];
    rhs(t, &y, &mut f);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t });
    }

    let mut times = vec![t];
    let mut values = y.clone();
    let mut derivs = f.clone();

    let mut k = vec![vec![0.0; dim]; 6];
    let mut stage = vec![0.0; dim];
    let mut y5 = vec![0.0; dim];
    let mut f_new = vec![0.0; dim];

    let mut h = (0.01 * length).min(max_step);
    let mut steps = 0usize;
    let mut stopped = false;

    loop {
        let remaining = (t_end - t) * sign;
        if remaining <= 0.0 {
            break;
        }
        let mut last = false;
        if h >= remaining {
            h = remaining;
            last = true;
        } else if h > 0.5 * remaining && h < remaining {
            // avoid leaving a sliver at the end
            h = 0.5 * remaining;
        }
        steps += 1;
        if steps > config.max_steps {
            return Err(Error::TooManySteps {
                t,
                steps: config.max_steps,
            });
        }

        let hs = h * sign;
        k[0].copy_from_slice(&f);
        for s in 1..6 {
            for d in 0..dim {
                let mut acc = y[d];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += hs * A[s][j] * kj[d];
                }
                stage[d] = acc;
            }
            let (done, rest) = k.split_at_mut(s);
            let _ = done;
            rhs(t + C[s] * hs, &stage, &mut rest[0]);
        }

        let mut err = 0.0f64;
        let mut finite = true;
        for d in 0..dim {
            let mut inc5 = 0.0;
            let mut inc4 = 0.0;
            for s in 0..6 {
                inc5 += B5[s] * k[s][d];
                inc4 += B4[s] * k[s][d];
            }
            y5[d] = y[d] + hs * inc5;
            if !y5[d].is_finite() {
                finite = false;
            }
            let scale = config.atol + config.rtol * y[d].abs().max(y5[d].abs());
            err = err.max((hs * (inc5 - inc4)).abs() / scale);
        }
        if !finite || !err.is_finite() {
            // shrink hard and retry; a genuinely divergent rhs ends in underflow
            h *= MIN_FACTOR;
            if h < min_step {
                return Err(Error::NonFinite { t });
            }
            continue;
        }

        if err <= 1.0 {
            let t_new = if last { t_end } else { t + hs };
            rhs(t_new, &y5, &mut f_new);
            if f_new.iter().any(|v| !v.is_finite()) {
                h *= MIN_FACTOR;
                if h < min_step {
                    return Err(Error::NonFinite { t: t_new });
                }
                continue;
            }
            t = t_new;
            y.copy_from_slice(&y5);
            f.copy_from_slice(&f_new);
            times.push(t);
            values.extend_from_slice(&y);
            derivs.extend_from_slice(&f);
            if last {
                break;
            }
            if stop(&y) {
                stopped = true;
                break;
            }
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h = (h * factor).min(max_step);
        } else {
            let factor = (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
            h *= factor;
            if h < min_step {
                return Err(Error::StepUnderflow { t, step: h });
            }
        }
    }

    if direction == Direction::Backward {
        reverse_knots(&mut times, &mut values, &mut derivs, dim);
    }
    Ok((
        OdeSolution {
            dim,
            times,
            values,
            derivs,
            direction,
        },
        stopped,
    ))
}

fn reverse_knots(times: &mut [f64], values: &mut Vec<f64>, derivs: &mut Vec<f64>, dim: usize) {
    times.reverse();
    let rev = |v: &Vec<f64>| -> Vec<f64> { v.chunks(dim).rev().flatten().copied().collect() };
    *values = rev(values);
    *derivs = rev(derivs);
}

/// A sequence of contiguous solutions, each carrying a log-scale: the true
/// value on piece `k` is `stored * exp(log_scales[k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSolution {
    pieces: Vec<OdeSolution>,
    log_scales: Vec<f64>,
}

impl PiecewiseSolution {
    pub fn new(pieces: Vec<OdeSolution>, log_scales: Vec<f64>) -> Result<Self> {
        if pieces.is_empty() || pieces.len() != log_scales.len() {
            return Err(Error::InvalidArgument("piecewise solution needs matching pieces".into()));
        }
        let dim = pieces[0].dim();
        for w in pieces.windows(2) {
            if w[1].dim() != dim {
                return Err(Error::InvalidArgument("pieces differ in dimension".into()));
            }
            let gap = (w[1].start() - w[0].end()).abs();
            if gap > 1e-12 * (1.0 + w[0].end().abs()) {
                return Err(Error::InvalidArgument("pieces are not contiguous".into()));
            }
        }
        Ok(Self { pieces, log_scales })
    }

    pub fn single(sol: OdeSolution) -> Self {
        Self {
            pieces: vec![sol],
            log_scales: vec![0.0],
        }
    }

    /// Assembles pieces produced in descending time order (backward sweeps).
    pub fn from_descending(mut pieces: Vec<OdeSolution>, mut log_scales: Vec<f64>) -> Self {
        pieces.reverse();
        log_scales.reverse();
        Self { pieces, log_scales }
    }

    pub fn dim(&self) -> usize {
        self.pieces[0].dim()
    }

    pub fn start(&self) -> f64 {
        self.pieces[0].start()
    }

    pub fn end(&self) -> f64 {
        self.pieces.last().unwrap().end()
    }

    pub fn pieces(&self) -> &[OdeSolution] {
        &self.pieces
    }

    pub fn log_scales(&self) -> &[f64] {
        &self.log_scales
    }

    /// Index of the piece containing `t`; ties at a boundary go to the later
    /// piece (right-continuous).
    pub fn piece_index(&self, t: f64) -> usize {
        let n = self.pieces.len();
        let k = self.pieces.partition_point(|p| p.start() <= t);
        k.clamp(1, n) - 1
    }

    /// Stored (unscaled) value at `t` and the log-scale of its piece.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> f64 {
        let k = self.piece_index(t);
        self.pieces[k].eval_into(t, out);
        self.log_scales[k]
    }

    /// Stored value evaluated on an explicit piece.
    pub fn eval_piece_into(&self, piece: usize, t: f64, out: &mut [f64]) -> f64 {
        self.pieces[piece].eval_into(t, out);
        self.log_scales[piece]
    }

    /// Like [`eval_into`](Self::eval_into) but at a boundary between pieces
    /// picks the piece on the same side as `probe`, so that one-sided limits
    /// are available at discontinuities.
    pub fn eval_near(&self, t: f64, probe: f64, out: &mut [f64]) -> f64 {
        let mut k = self.piece_index(t);
        if k > 0 && self.pieces[k].start() > probe {
            k -= 1;
        } else if k + 1 < self.pieces.len() && self.pieces[k + 1].start() <= probe {
            k += 1;
        }
        self.eval_piece_into(k, t, out)
    }

    pub fn deriv_into(&self, t: f64, out: &mut [f64]) -> f64 {
        let k = self.piece_index(t);
        self.pieces[k].deriv_into(t, out);
        self.log_scales[k]
    }

    /// Value at `t` with the log-scale applied.
    pub fn evaluate_scaled(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let ls = self.eval_into(t, &mut out);
        let c = ls.exp();
        out.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// All knot times across pieces, ascending, deduplicated.
    pub fn knot_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.pieces.iter().flat_map(|p| p.times().iter().copied()).collect();
        ts.dedup();
        ts
    }

    /// Interior piece boundaries.
    pub fn boundaries(&self) -> Vec<f64> {
        self.pieces.iter().skip(1).map(|p| p.start()).collect()
    }

    pub fn total_knots(&self) -> usize {
        self.pieces.iter().map(|p| p.num_knots()).sum()
    }

    /// Adds `delta` to every log-scale.
    pub fn with_log_offset(mut self, delta: f64) -> Self {
        self.log_scales.iter_mut().for_each(|l| *l += delta);
        self
    }

    /// Multiplies every stored value by `c` (log-scales untouched).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            pieces: self.pieces.iter().map(|p| p.scaled(c)).collect(),
            log_scales: self.log_scales.clone(),
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Integrates a linear-in-scale system, rescaling the state to unit max-norm
/// whenever it leaves `[1/threshold, threshold]`. Pieces are appended in
/// integration order with their log-scales; returns the stored final value
/// and its log-scale. The initial value is normalized first.
#[allow(clippy::too_many_arguments)]
pub fn integrate_renormalized<F>(
    mut rhs: F,
    t_start: f64,
    t_end: f64,
    y0: &[f64],
    log0: f64,
    threshold: f64,
    config: &IntegratorConfig,
    pieces: &mut Vec<OdeSolution>,
    log_scales: &mut Vec<f64>,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let m0 = max_abs(y0);
    if !(m0 > 0.0 && m0.is_finite()) {
        return Err(Error::NonFinite { t: t_start });
    }
    let mut v: Vec<f64> = y0.iter().map(|x| x / m0).collect();
    let mut log = log0 + m0.ln();
    let mut t = t_start;
    let backward = t_end < t_start;
    loop {
        let (sol, stopped) = integrate_until(&mut rhs, t, t_end, &v, config, |y| {
            let m = max_abs(y);
            m > threshold || m < 1.0 / threshold
        })?;
        v = sol.final_value().to_vec();
        t = if backward { sol.start() } else { sol.end() };
        pieces.push(sol);
        log_scales.push(log);
        if !stopped || t == t_end {
            break;
        }
        let m = max_abs(&v);
        if m == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= m);
        log += m.ln();
    }
    Ok((v, log))
}

/// Adaptive Simpson integration of a scalar function with combined
/// absolute/relative tolerance.
pub fn quadrature<G>(mut g: G, t0: f64, t1: f64, tol: f64) -> Result<f64>
where
    G: FnMut(f64) -> f64,
{
    let q = quadrature_vec(|t, out: &mut [f64]| out[0] = g(t), 1, &[t0, t1], tol)?;
    Ok(q.values[0])
}

/// Result of a vector-valued quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub values: Vec<f64>,
    pub error: f64,
    pub evaluations: usize,
}

const MAX_DEPTH: u32 = 60;
const MAX_PANELS: usize = 200_000;

struct Panel {
    a: f64,
    b: f64,
    depth: u32,
    // g at a, a+h/4, a+h/2, a+3h/4, b
    f: [Vec<f64>; 5],
    estimate: Vec<f64>,
    err: f64,
}

impl Panel {
    fn new(a: f64, b: f64, depth: u32, f: [Vec<f64>; 5]) -> Self {
        let h = b - a;
        let n = f[0].len();
        let mut estimate = vec![0.0; n];
        let mut err = 0.0f64;
        for d in 0..n {
            let whole = h / 6.0 * (f[0][d] + 4.0 * f[2][d] + f[4][d]);
            let halves = h / 12.0 * (f[0][d] + 4.0 * f[1][d] + 2.0 * f[2][d] + 4.0 * f[3][d] + f[4][d]);
            let diff = halves - whole;
            estimate[d] = halves + diff / 15.0;
            err = err.max(diff.abs() / 15.0);
        }
        if !err.is_finite() {
            err = f64::INFINITY;
        }
        Self {
            a,
            b,
            depth,
            f,
            estimate,
            err,
        }
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive Simpson quadrature of a vector-valued integrand over
/// `[breaks[0], breaks[last]]`, starting from the panels delimited by
/// `breaks`. Converges when the summed error estimate falls below
/// `tol * max(1, max_d |I_d|)`.
pub fn quadrature_vec<G>(mut g: G, dim: usize, breaks: &[f64], tol: f64) -> Result<Quadrature>
where
    G: FnMut(f64, &mut [f64]),
{
    if breaks.len() < 2 {
        return Err(Error::InvalidArgument("quadrature needs at least two breakpoints".into()));
    }
    if breaks.windows(2).any(|w| w[1] < w[0]) || breaks.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidArgument("breakpoints must be finite and ascending".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("quadrature tolerance must be positive".into()));
    }
    let mut evaluations = 0usize;
    let mut eval = |t: f64, evals: &mut usize| {
        let mut out = vec![0.0; dim];
        g(t, &mut out);
        *evals += 1;
        out
    };

    let mut heap = BinaryHeap::new();
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let h = b - a;
        let f = [
            eval(a, &mut evaluations),
            eval(a + 0.25 * h, &mut evaluations),
            eval(a + 0.5 * h, &mut evaluations),
            eval(a + 0.75 * h, &mut evaluations),
            eval(b, &mut evaluations),
        ];
        heap.push(Panel::new(a, b, 0, f));
    }

    let resum = |heap: &BinaryHeap<Panel>| {
        let mut total = vec![0.0; dim];
        let mut err = 0.0;
        for p in heap.iter() {
            for d in 0..dim {
                total[d] += p.estimate[d];
            }
            err += p.err;
        }
        (total, err)
    };
    let goal = |total: &[f64]| tol * total.iter().fold(1.0f64, |m, v| m.max(v.abs()));

    let (mut total, mut err) = resum(&heap);
    let mut splits = 0usize;
    while err > goal(&total) {
        let Some(worst) = heap.pop() else { break };
        if worst.depth >= MAX_DEPTH || heap.len() >= MAX_PANELS {
            return Err(Error::QuadratureFailure {
                a: worst.a,
                b: worst.b,
                err: worst.err,
            });
        }
        let m = 0.5 * (worst.a + worst.b);
        let hq = 0.25 * (worst.b - worst.a);
        let l1 = eval(worst.a + 0.5 * hq, &mut evaluations);
        let l3 = eval(worst.a + 1.5 * hq, &mut evaluations);
        let r1 = eval(m + 0.5 * hq, &mut evaluations);
        let r3 = eval(m + 1.5 * hq, &mut evaluations);
        let [f0, f1, f2, f3, f4] = worst.f;
        let left = Panel::new(worst.a, m, worst.depth + 1, [f0, l1, f1, l3, f2.clone()]);
        let right = Panel::new(m, worst.b, worst.depth + 1, [f2, r1, f3, r3, f4]);
        for d in 0..dim {
            total[d] += left.estimate[d] + right.estimate[d] - worst.estimate[d];
        }
        err += left.err + right.err - worst.err;
        heap.push(left);
        heap.push(right);
        splits += 1;
        // running sums drift; refresh them now and then
        if splits % 512 == 0 || !err.is_finite() {
            (total, err) = resum(&heap);
        }
    }
    let (values, error) = resum(&heap);
    Ok(Quadrature {
        values,
        error,
        evaluations,
    })
}
