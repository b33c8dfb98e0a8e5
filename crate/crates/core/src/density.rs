//! Factored marginal density sets.
//!
//! Each latent component keeps its marginal `mu` (forward solution) and its
//! backward function `rho` (with a log-scale ledger). Transition densities are
//! never stored: `gamma_{x,y} = mu_x * q~_{x,y} * rho_y / rho_x`, where `q~`
//! comes from the rates the density was computed against (its
//! [`RateSource`]). Fully observed components are plain paths.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CtbnModel, Evidence, StartCondition, StatePath};
use crate::ode::{quadrature_vec, PiecewiseSolution};
use crate::stats::{FamilyStats, ModelStats};

/// `rho` values at or below this are treated as zero.
pub const RHO_FLOOR: f64 = 1e-300;
/// `mu` values at or below this count as unoccupied.
pub const MU_FLOOR: f64 = 1e-10;

/// Extends mixed-radix instantiation weights by one more parent (the new
/// parent becomes the least significant digit).
pub fn push_weights(w: &mut Vec<f64>, marginal: &[f64]) {
    let prev = w.len();
    let c = marginal.len();
    w.resize(prev * c, 0.0);
    for u in (0..prev).rev() {
        let base = w[u];
        for s in (0..c).rev() {
            w[u * c + s] = base * marginal[s];
        }
    }
}

/// Product weights `prod_k m_k[u_k]` over all parent instantiations.
pub fn instantiation_weights(marginals: &[&[f64]]) -> Vec<f64> {
    let mut w = vec![1.0];
    for m in marginals {
        push_weights(&mut w, m);
    }
    w
}

fn rates_from_weights(model: &CtbnModel, i: usize, w: &[f64], qbar: &mut Vec<f64>, lnq: &mut Vec<f64>) {
    let c = model.card(i);
    let cc = c * c;
    qbar.clear();
    qbar.resize(cc, 0.0);
    lnq.clear();
    lnq.resize(cc, 0.0);
    let tables = model.cim(i).tables();
    let ln = model.ln_table(i);
    for (u, &wu) in w.iter().enumerate() {
        if wu <= 0.0 {
            continue;
        }
        let q = &tables[u * cc..(u + 1) * cc];
        let l = &ln[u * cc..(u + 1) * cc];
        for k in 0..cc {
            qbar[k] += wu * q[k];
            if k / c != k % c {
                lnq[k] += wu * l[k];
            }
        }
    }
}

fn check_parent_marginals(model: &CtbnModel, i: usize, marginals: &[&[f64]]) -> Result<()> {
    let cim = model.cim(i);
    if marginals.len() != cim.parents().len() {
        return Err(Error::InvalidArgument(format!(
            "component {i} has {} parents, got {} marginals",
            cim.parents().len(),
            marginals.len()
        )));
    }
    for (m, &c) in marginals.iter().zip(cim.parent_cards()) {
        if m.len() != c {
            return Err(Error::InvalidArgument("parent marginal has wrong length".into()));
        }
    }
    Ok(())
}

/// Rates of component `i` averaged over independent parent marginals:
/// `sum_u q_{x,y|u} prod_j mu^j_{u_j}` (row-major, diagonal included).
pub fn avg_rates(model: &CtbnModel, i: usize, parent_marginals: &[&[f64]]) -> Result<Vec<f64>> {
    check_parent_marginals(model, i, parent_marginals)?;
    let w = instantiation_weights(parent_marginals);
    let (mut qbar, mut lnq) = (Vec::new(), Vec::new());
    rates_from_weights(model, i, &w, &mut qbar, &mut lnq);
    Ok(qbar)
}

/// Geometrically averaged rates `exp(sum_u ln q_{x,y|u} prod_j mu^j_{u_j})`
/// off the diagonal; the diagonal holds the negative row sum. A zero rate
/// with positive weight gives a zero entry.
pub fn geo_rates(model: &CtbnModel, i: usize, parent_marginals: &[&[f64]]) -> Result<Vec<f64>> {
    check_parent_marginals(model, i, parent_marginals)?;
    let w = instantiation_weights(parent_marginals);
    let (mut qbar, mut lnq) = (Vec::new(), Vec::new());
    rates_from_weights(model, i, &w, &mut qbar, &mut lnq);
    let c = model.card(i);
    let mut out: Vec<f64> = lnq.iter().map(|l| l.exp()).collect();
    for x in 0..c {
        out[x * c + x] = 0.0;
        let s: f64 = out[x * c..(x + 1) * c].iter().sum();
        out[x * c + x] = -s;
    }
    Ok(out)
}

/// Time-dependent marginal of one component.
#[derive(Debug, Clone)]
pub enum Marginal {
    Smooth(Arc<PiecewiseSolution>),
    Path { path: Arc<StatePath>, card: usize },
}

impl Marginal {
    pub fn card(&self) -> usize {
        match self {
            Marginal::Smooth(s) => s.dim(),
            Marginal::Path { card, .. } => *card,
        }
    }

    /// Value at `t`; `probe` selects the side at discontinuities.
    pub fn eval_into(&self, t: f64, probe: f64, out: &mut [f64]) {
        match self {
            Marginal::Smooth(s) => {
                s.eval_near(t, probe, out);
            }
            Marginal::Path { path, .. } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[path.state_at(probe)] = 1.0;
            }
        }
    }
}

/// The rates a density was computed against.
#[derive(Debug, Clone)]
pub enum RateSource {
    /// A fixed rate matrix (row-major).
    Fixed(Vec<f64>),
    /// Snapshot of the parents' marginals, in parent order.
    Parents(Vec<Marginal>),
}

/// Scratch space for averaged rates.
#[derive(Debug, Default, Clone)]
pub(crate) struct RateEval {
    buf: Vec<f64>,
    pub w: Vec<f64>,
    pub qbar: Vec<f64>,
    pub lnq: Vec<f64>,
}

impl RateEval {
    /// Rates of `k` under the marginals held in `factors`, optionally with
    /// parent `fix.0` pinned to state `fix.1`.
    pub fn current(
        &mut self,
        model: &CtbnModel,
        factors: &[FactorDensity],
        k: usize,
        t: f64,
        probe: f64,
        fix: Option<(usize, usize)>,
    ) {
        self.w.clear();
        self.w.push(1.0);
        for &p in model.parents(k) {
            let c = model.card(p);
            self.buf.resize(c, 0.0);
            match fix {
                Some((fp, s)) if fp == p => {
                    self.buf.iter_mut().for_each(|v| *v = 0.0);
                    self.buf[s] = 1.0;
                }
                _ => factors[p].eval_mu(t, probe, &mut self.buf),
            }
            push_weights(&mut self.w, &self.buf);
        }
        rates_from_weights(model, k, &self.w, &mut self.qbar, &mut self.lnq);
    }

    pub fn from_source(&mut self, model: &CtbnModel, k: usize, source: &RateSource, t: f64, probe: f64) {
        match source {
            RateSource::Fixed(q) => {
                let c = model.card(k);
                self.qbar.clear();
                self.qbar.extend_from_slice(q);
                self.lnq.clear();
                self.lnq.extend(q.iter().enumerate().map(|(idx, &r)| {
                    if idx / c == idx % c {
                        0.0
                    } else if r > 0.0 {
                        r.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }));
            }
            RateSource::Parents(ms) => {
                self.w.clear();
                self.w.push(1.0);
                for m in ms {
                    self.buf.resize(m.card(), 0.0);
                    m.eval_into(t, probe, &mut self.buf);
                    push_weights(&mut self.w, &self.buf);
                }
                rates_from_weights(model, k, &self.w, &mut self.qbar, &mut self.lnq);
            }
        }
    }
}

/// Marginal density of one latent component over `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct ComponentDensity {
    pub component: usize,
    pub horizon: f64,
    pub mu: Arc<PiecewiseSolution>,
    /// Stored `rho` with its log-scale ledger.
    pub rho: Arc<PiecewiseSolution>,
    pub source: RateSource,
    /// Where the smooth part of `mu` ends when it was clamped to an observed
    /// end state (a linear piece covers the rest).
    pub clamp_start: Option<f64>,
    /// `max_x |mu_x(clamp_start) - end indicator_x|`.
    pub pre_clamp_gap: f64,
}

impl ComponentDensity {
    pub fn card(&self) -> usize {
        self.mu.dim()
    }

    /// End of the interval on which `mu` solves the forward equation.
    pub fn smooth_end(&self) -> f64 {
        self.clamp_start.unwrap_or(self.horizon)
    }

    /// Same density with the stored `rho` multiplied by `c`.
    pub fn with_rho_scaled(&self, c: f64) -> Self {
        Self {
            rho: Arc::new(self.rho.scaled(c)),
            ..self.clone()
        }
    }

    pub fn mu_at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.card()];
        self.mu.eval_into(t, &mut out);
        out
    }

    /// `rho(t)` with the ledger scale applied.
    pub fn rho_at(&self, t: f64) -> Vec<f64> {
        self.rho.evaluate_scaled(t)
    }

    /// `ln(rho_1(t) / rho_0(t))`-style log ratio between two states.
    pub fn log_rho_ratio(&self, t: f64, x: usize, y: usize) -> f64 {
        let mut r = vec![0.0; self.card()];
        self.rho.eval_into(t, &mut r);
        r[x].ln() - r[y].ln()
    }
}

/// Buffers for reconstructing `gamma` of one component.
#[derive(Debug, Default, Clone)]
pub(crate) struct GammaEval {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub gamma: Vec<f64>,
    pub rates: RateEval,
}

impl GammaEval {
    /// Fills `mu`, `rho` (stored), `rates.lnq` (frozen rates) and `gamma`.
    /// Rows of states with vanishing `rho` are zero; returns the first such
    /// state that still carries probability mass.
    pub fn eval(&mut self, model: &CtbnModel, cd: &ComponentDensity, t: f64, probe: f64) -> Option<usize> {
        let c = cd.card();
        self.mu.resize(c, 0.0);
        self.rho.resize(c, 0.0);
        self.gamma.clear();
        self.gamma.resize(c * c, 0.0);
        cd.mu.eval_near(t, probe, &mut self.mu);
        cd.rho.eval_near(t, probe, &mut self.rho);
        self.rates.from_source(model, cd.component, &cd.source, t, probe);
        let mut degenerate = None;
        for x in 0..c {
            let mx = self.mu[x].max(0.0);
            if self.rho[x] <= RHO_FLOOR {
                if mx > MU_FLOOR && degenerate.is_none() {
                    degenerate = Some(x);
                }
                continue;
            }
            if mx == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for y in 0..c {
                if y == x || self.rho[y] <= 0.0 {
                    continue;
                }
                let g = mx * self.rates.lnq[x * c + y].exp() * self.rho[y] / self.rho[x];
                self.gamma[x * c + y] = g;
                row += g;
            }
            self.gamma[x * c + x] = -row;
        }
        degenerate
    }
}

/// The factor of one component in a factored density set.
#[derive(Debug, Clone)]
pub enum FactorDensity {
    Latent(ComponentDensity),
    Observed { path: Arc<StatePath>, card: usize },
}

impl FactorDensity {
    pub fn card(&self) -> usize {
        match self {
            FactorDensity::Latent(cd) => cd.card(),
            FactorDensity::Observed { card, .. } => *card,
        }
    }

    pub fn marginal(&self) -> Marginal {
        match self {
            FactorDensity::Latent(cd) => Marginal::Smooth(cd.mu.clone()),
            FactorDensity::Observed { path, card } => Marginal::Path {
                path: path.clone(),
                card: *card,
            },
        }
    }

    pub fn eval_mu(&self, t: f64, probe: f64, out: &mut [f64]) {
        match self {
            FactorDensity::Latent(cd) => {
                cd.mu.eval_near(t, probe, out);
            }
            FactorDensity::Observed { path, .. } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[path.state_at(probe)] = 1.0;
            }
        }
    }

    pub fn latent(&self) -> Option<&ComponentDensity> {
        match self {
            FactorDensity::Latent(cd) => Some(cd),
            FactorDensity::Observed { .. } => None,
        }
    }
}

/// Segment boundaries induced by observed trajectories: `0`, every observed
/// jump time, `horizon`.
pub fn evidence_breaks(evidence: &Evidence) -> Vec<f64> {
    let mut b = vec![0.0];
    for ev in &evidence.components {
        if let Some(p) = &ev.trajectory {
            b.extend(p.jumps().map(|j| j.0));
        }
    }
    b.push(evidence.horizon);
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}

/// Segments of `breaks` clipped to `[0, upto]`.
pub(crate) fn segments(breaks: &[f64], upto: f64) -> Vec<(f64, f64)> {
    breaks
        .windows(2)
        .filter(|w| w[0] < upto)
        .map(|w| (w[0], w[1].min(upto)))
        .filter(|(a, b)| b > a)
        .collect()
}

/// Midpoint of the segment containing `t` (right-continuous; the final
/// endpoint belongs to the last segment).
pub(crate) fn probe_for(breaks: &[f64], t: f64) -> f64 {
    let n = breaks.len();
    let k = breaks.partition_point(|&b| b <= t).clamp(1, n - 1);
    0.5 * (breaks[k - 1] + breaks[k])
}

/// Everything needed to evaluate one interval's functionals: the model, the
/// factors living on `[0, horizon]` and the segment boundaries.
#[derive(Clone, Copy)]
pub struct Frame<'a> {
    pub model: &'a CtbnModel,
    pub factors: &'a [FactorDensity],
    pub horizon: f64,
    pub breaks: &'a [f64],
}

/// Free-energy contribution of one component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTerm {
    pub energy: f64,
    pub entropy: f64,
    pub error: f64,
}

impl ComponentTerm {
    pub fn total(&self) -> f64 {
        self.energy + self.entropy
    }
}

fn xlogy_ratio(p: &[f64], prior: &[f64]) -> (f64, f64) {
    // (sum p ln prior, -sum p ln p) with 0 ln 0 = 0
    let mut e = 0.0;
    let mut h = 0.0;
    for (&a, &b) in p.iter().zip(prior) {
        if a > 0.0 {
            e += a * b.max(1e-300).ln();
            h -= a * a.ln();
        }
    }
    (e, h)
}

/// Most initial quadrature panels seeded from solver knots.
const MAX_SEED_PANELS: usize = 256;

/// Initial quadrature panels on `[a, b]`: the solver knots of component `i`
/// and of its parents, thinned to at most [`MAX_SEED_PANELS`] panels. The
/// knots follow the features of the integrand, which a single Simpson panel
/// can miss entirely.
fn knot_cuts(frame: &Frame, i: usize, a: f64, b: f64) -> Vec<f64> {
    let mut knots = Vec::new();
    let mut add = |f: &FactorDensity| {
        if let FactorDensity::Latent(cd) = f {
            for sol in [&cd.mu, &cd.rho] {
                for p in sol.pieces() {
                    knots.extend(p.times().iter().copied().filter(|&t| t > a && t < b));
                }
            }
        }
    };
    add(&frame.factors[i]);
    for &p in frame.model.parents(i) {
        add(&frame.factors[p]);
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let stride = knots.len().div_ceil(MAX_SEED_PANELS).max(1);
    let mut cuts = vec![a];
    cuts.extend(knots.into_iter().step_by(stride));
    cuts.push(b);
    cuts
}

/// Free-energy integrand of a latent component at `t`: `[energy, entropy]`.
fn latent_integrand(frame: &Frame, i: usize, cd: &ComponentDensity, t: f64, probe: f64, ge: &mut GammaEval, cur: &mut RateEval, out: &mut [f64]) {
    let model = frame.model;
    let c = cd.card();
    ge.eval(model, cd, t, probe);
    cur.current(model, frame.factors, i, t, probe, None);
    let mut energy = 0.0;
    let mut entropy = 0.0;
    for x in 0..c {
        energy += ge.mu[x] * cur.qbar[x * c + x];
        for y in 0..c {
            let g = ge.gamma[x * c + y];
            if y == x || g <= 0.0 {
                continue;
            }
            energy += g * cur.lnq[x * c + y];
            entropy += g * (1.0 - ge.rates.lnq[x * c + y] - ge.rho[y].ln() + ge.rho[x].ln());
        }
    }
    out[0] = energy;
    out[1] = entropy;
}

fn observed_integrand(frame: &Frame, i: usize, path: &StatePath, t: f64, probe: f64, cur: &mut RateEval) -> f64 {
    let c = frame.model.card(i);
    cur.current(frame.model, frame.factors, i, t, probe, None);
    let s = path.state_at(probe);
    cur.qbar[s * c + s]
}

/// Free-energy term of component `i`. `prior` adds the initial-distribution
/// term `sum_x mu_x(0) ln(prior_x / mu_x(0))`.
pub fn component_term(frame: &Frame, i: usize, prior: Option<&[f64]>, tol: f64) -> Result<ComponentTerm> {
    let mut term = ComponentTerm::default();
    match &frame.factors[i] {
        FactorDensity::Latent(cd) => {
            let mut ge = GammaEval::default();
            let mut cur = RateEval::default();
            for (a, b) in segments(frame.breaks, cd.smooth_end()) {
                let probe = 0.5 * (a + b);
                let cuts = knot_cuts(frame, i, a, b);
                let q = quadrature_vec(
                    |t, out| latent_integrand(frame, i, cd, t, probe, &mut ge, &mut cur, out),
                    2,
                    &cuts,
                    tol,
                )?;
                term.energy += q.values[0];
                term.entropy += q.values[1];
                term.error += q.error;
            }
            if let Some(clamp) = cd.clamp_start {
                // the clamped tail is not part of the smooth density; bound it
                term.error += (frame.horizon - clamp) * frame.model.max_rate(i);
            }
            if let Some(p) = prior {
                let mu0 = cd.mu_at(0.0);
                let (e, h) = xlogy_ratio(&mu0, p);
                term.energy += e;
                term.entropy += h;
            }
        }
        FactorDensity::Observed { path, .. } => {
            let mut cur = RateEval::default();
            for (a, b) in segments(frame.breaks, frame.horizon) {
                let probe = 0.5 * (a + b);
                let q = quadrature_vec(
                    |t, out| out[0] = observed_integrand(frame, i, path, t, probe, &mut cur),
                    1,
                    &knot_cuts(frame, i, a, b),
                    tol,
                )?;
                term.energy += q.values[0];
                term.error += q.error;
            }
            term.energy += observed_jump_energy(frame, i, path, &mut cur);
        }
    }
    Ok(term)
}

fn observed_jump_energy(frame: &Frame, i: usize, path: &StatePath, cur: &mut RateEval) -> f64 {
    let c = frame.model.card(i);
    let mut e = 0.0;
    for (t, a, b) in path.jumps() {
        cur.current(frame.model, frame.factors, i, t, t, None);
        e += cur.lnq[a * c + b];
    }
    e
}

/// Left Riemann sum of component `i`'s free-energy integrand on `K` cells.
pub fn component_term_discretized(frame: &Frame, i: usize, prior: Option<&[f64]>, k: usize) -> ComponentTerm {
    let dt = frame.horizon / k as f64;
    let mut term = ComponentTerm::default();
    let mut out = [0.0; 2];
    match &frame.factors[i] {
        FactorDensity::Latent(cd) => {
            let mut ge = GammaEval::default();
            let mut cur = RateEval::default();
            for step in 0..k {
                let t = step as f64 * dt;
                if t > cd.smooth_end() {
                    break;
                }
                latent_integrand(frame, i, cd, t, t, &mut ge, &mut cur, &mut out);
                term.energy += dt * out[0];
                term.entropy += dt * out[1];
            }
            if let Some(p) = prior {
                let (e, h) = xlogy_ratio(&cd.mu_at(0.0), p);
                term.energy += e;
                term.entropy += h;
            }
        }
        FactorDensity::Observed { path, .. } => {
            let mut cur = RateEval::default();
            for step in 0..k {
                let t = step as f64 * dt;
                term.energy += dt * observed_integrand(frame, i, path, t, t, &mut cur);
            }
            term.energy += observed_jump_energy(frame, i, path, &mut cur);
        }
    }
    term
}

/// Family statistics of component `i`: time in `x` and `x -> y` transitions
/// weighted by the product of the parents' marginals.
pub fn component_stats(frame: &Frame, i: usize, tol: f64) -> Result<FamilyStats> {
    let model = frame.model;
    let c = model.card(i);
    let n_inst = model.cim(i).num_instantiations();
    let mut fs = FamilyStats::zeros(c, n_inst);
    let dim = c * n_inst + c * c * n_inst;
    let mut cur = RateEval::default();
    match &frame.factors[i] {
        FactorDensity::Latent(cd) => {
            let mut ge = GammaEval::default();
            let mut cuts_all = frame.breaks.to_vec();
            if let Some(s) = cd.clamp_start {
                cuts_all.push(s);
                cuts_all.sort_by(f64::total_cmp);
                cuts_all.dedup();
            }
            let smooth_end = cd.smooth_end();
            for (a, b) in segments(&cuts_all, frame.horizon) {
                let probe = 0.5 * (a + b);
                let smooth = b <= smooth_end;
                let q = quadrature_vec(
                    |t, out| {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        cur.current(model, frame.factors, i, t, probe, None);
                        if smooth {
                            ge.eval(model, cd, t, probe);
                        } else {
                            ge.mu.resize(c, 0.0);
                            cd.mu.eval_near(t, probe, &mut ge.mu);
                            ge.gamma.clear();
                            ge.gamma.resize(c * c, 0.0);
                        }
                        for (u, &wu) in cur.w.iter().enumerate() {
                            for x in 0..c {
                                out[u * c + x] = ge.mu[x] * wu;
                                for y in 0..c {
                                    if y != x {
                                        out[c * n_inst + (u * c + x) * c + y] = ge.gamma[x * c + y] * wu;
                                    }
                                }
                            }
                        }
                    },
                    dim,
                    &knot_cuts(frame, i, a, b),
                    tol,
                )?;
                for (k, v) in q.values.iter().enumerate() {
                    if k < c * n_inst {
                        fs.time[k] += v;
                    } else {
                        fs.transitions[k - c * n_inst] += v;
                    }
                }
            }
        }
        FactorDensity::Observed { path, .. } => {
            for (a, b) in segments(frame.breaks, frame.horizon) {
                let probe = 0.5 * (a + b);
                let s = path.state_at(probe);
                let q = quadrature_vec(
                    |t, out| {
                        cur.current(model, frame.factors, i, t, probe, None);
                        out.copy_from_slice(&cur.w);
                    },
                    n_inst,
                    &knot_cuts(frame, i, a, b),
                    tol,
                )?;
                for (u, v) in q.values.iter().enumerate() {
                    fs.time[u * c + s] += v;
                }
            }
            for (t, a, b) in path.jumps() {
                cur.current(model, frame.factors, i, t, t, None);
                for (u, &wu) in cur.w.iter().enumerate() {
                    fs.transitions[(u * c + a) * c + b] += wu;
                }
            }
        }
    }
    Ok(fs)
}

/// A failed check found by [`consistency_check`] or the tree vertex audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityViolation {
    pub component: usize,
    pub t: f64,
    pub message: String,
}

impl std::fmt::Display for DensityViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "component {} at t = {}: {}", self.component, self.t, self.message)
    }
}

/// Boundary conditions a latent density is audited against.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    /// Exact `mu(0)` when known.
    pub start: Option<Vec<f64>>,
    /// Observed end state.
    pub end: Option<usize>,
}

/// Audits one latent component of a frame on `grid` uniform points plus all
/// solver knots.
pub fn audit_component(frame: &Frame, i: usize, boundary: &BoundarySpec, grid: usize) -> Vec<DensityViolation> {
    let mut out = Vec::new();
    let Some(cd) = frame.factors[i].latent() else { return out };
    let model = frame.model;
    let c = cd.card();
    let horizon = frame.horizon;
    let max_rate = model.max_rate(i).max(1e-300);
    let smooth_end = cd.smooth_end();
    let mut breaks = frame.breaks.to_vec();
    breaks.retain(|&b| b < smooth_end);
    breaks.push(smooth_end);

    let mut times: Vec<f64> = (0..=grid).map(|k| horizon * k as f64 / grid as f64).collect();
    times.extend(cd.mu.knot_times());
    times.extend(cd.rho.knot_times());
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut push = |t: f64, message: String| {
        out.push(DensityViolation { component: i, t, message });
    };
    let mut ge = GammaEval::default();
    let mut dmu = vec![0.0; c];
    let mut rho = vec![0.0; c];
    for &t in &times {
        let mu = cd.mu_at(t);
        if let Some(x) = (0..c).find(|&x| mu[x] < -1e-6) {
            push(t, format!("mu[{x}] = {} is negative", mu[x]));
        }
        let s: f64 = mu.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            push(t, format!("mu sums to {s}"));
        }
        let ls = cd.rho.eval_into(t, &mut rho);
        let rmax = rho.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(x) = (0..c).find(|&x| rho[x] < -1e-9 * rmax) {
            push(t, format!("rho[{x}] = {} is negative", rho[x] * ls.exp()));
        }
        // at the clamp point gamma is a 0/0 ratio of solver noise; the
        // boundary checks below cover it
        if t > smooth_end || (t == smooth_end && boundary.end.is_some()) {
            continue;
        }
        let probe = probe_for(&breaks, t);
        if let Some(x) = ge.eval(model, cd, t, probe) {
            push(t, format!("degenerate density in state {x}"));
            continue;
        }
        if let Some(k) = (0..c * c).find(|&k| k / c != k % c && ge.gamma[k] < 0.0) {
            push(t, format!("gamma[{}][{}] is negative", k / c, k % c));
        }
        let piece = {
            let mut k = cd.mu.piece_index(t);
            if k > 0 && cd.mu.pieces()[k].start() > probe {
                k -= 1;
            }
            k
        };
        cd.mu.pieces()[piece].deriv_into(t, &mut dmu);
        for x in 0..c {
            let flow: f64 = (0..c).filter(|&y| y != x).map(|y| ge.gamma[y * c + x] - ge.gamma[x * c + y]).sum();
            let r = (dmu[x] - flow).abs();
            if r > 1e-3 * max_rate {
                push(t, format!("master-equation residual {r:e} in state {x}"));
                break;
            }
        }
    }

    if let Some(start) = &boundary.start {
        let mu0 = cd.mu_at(0.0);
        let d = mu0.iter().zip(start).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if d > 1e-12 {
            push(0.0, format!("mu(0) differs from the start condition by {d:e}"));
        }
    }
    let rho_end = cd.rho_at(horizon);
    match boundary.end {
        Some(e) => {
            let mu_t = cd.mu_at(horizon);
            let d = (0..c).fold(0.0f64, |m, x| m.max((mu_t[x] - if x == e { 1.0 } else { 0.0 }).abs()));
            if d > 1e-4 {
                push(horizon, format!("mu(T) misses the observed end by {d:e}"));
            }
            if cd.pre_clamp_gap > 1e-3 {
                push(horizon, format!("pre-clamp gap {:e} exceeds 1e-3", cd.pre_clamp_gap));
            }
            if (0..c).any(|x| (x == e) != (rho_end[x] > 0.0)) {
                push(horizon, "rho(T) is not the end indicator".into());
            }
        }
        None => {}
    }
    out
}

/// Free-energy summary of a density set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub total: f64,
    pub energy: f64,
    pub entropy: f64,
    pub component_energy: Vec<f64>,
    pub component_entropy: Vec<f64>,
    pub error_estimate: f64,
}

impl FreeEnergyReport {
    pub fn from_terms(terms: &[ComponentTerm]) -> Self {
        let energy: f64 = terms.iter().map(|t| t.energy).sum();
        let entropy: f64 = terms.iter().map(|t| t.entropy).sum();
        Self {
            total: energy + entropy,
            energy,
            entropy,
            component_energy: terms.iter().map(|t| t.energy).collect(),
            component_entropy: terms.iter().map(|t| t.entropy).collect(),
            error_estimate: terms.iter().map(|t| t.error).sum(),
        }
    }
}

/// Product density `eta^1 x ... x eta^D` approximating a posterior on
/// `[0, T]`.
#[derive(Debug, Clone)]
pub struct FactoredDensitySet {
    model: Arc<CtbnModel>,
    evidence: Evidence,
    breaks: Vec<f64>,
    factors: Vec<FactorDensity>,
}

impl FactoredDensitySet {
    pub fn new(model: Arc<CtbnModel>, evidence: Evidence, factors: Vec<FactorDensity>) -> Result<Self> {
        evidence.validate(&model)?;
        if factors.len() != model.num_components() {
            return Err(Error::InvalidArgument("one factor per component required".into()));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.card() != model.card(i) {
                return Err(Error::InvalidArgument(format!("factor {i} has the wrong cardinality")));
            }
            if let FactorDensity::Latent(cd) = f {
                if cd.component != i || (cd.horizon - evidence.horizon).abs() > 1e-12 * evidence.horizon {
                    return Err(Error::InvalidArgument(format!("factor {i} does not match the evidence horizon")));
                }
            }
        }
        let breaks = evidence_breaks(&evidence);
        Ok(Self {
            model,
            evidence,
            breaks,
            factors,
        })
    }

    pub fn model(&self) -> &CtbnModel {
        &self.model
    }

    pub fn model_arc(&self) -> &Arc<CtbnModel> {
        &self.model
    }

    pub fn evidence(&self) -> &Evidence {
        &self.evidence
    }

    pub fn horizon(&self) -> f64 {
        self.evidence.horizon
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn factors(&self) -> &[FactorDensity] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &FactorDensity {
        &self.factors[i]
    }

    pub fn component(&self, i: usize) -> Option<&ComponentDensity> {
        self.factors[i].latent()
    }

    pub(crate) fn set_factor(&mut self, i: usize, f: FactorDensity) {
        self.factors[i] = f;
    }

    pub fn frame(&self) -> Frame<'_> {
        Frame {
            model: &self.model,
            factors: &self.factors,
            horizon: self.evidence.horizon,
            breaks: &self.breaks,
        }
    }

    /// Initial distribution prescribed for component `i` when it is a prior.
    pub fn prior(&self, i: usize) -> Option<&[f64]> {
        match &self.evidence.components[i].start {
            StartCondition::Prior(p) => Some(p),
            StartCondition::State(_) => None,
        }
    }

    pub fn component_term(&self, i: usize, tol: f64) -> Result<ComponentTerm> {
        component_term(&self.frame(), i, self.prior(i), tol)
    }

    /// `gamma^i(t)` as a row-major matrix.
    pub fn gamma_at(&self, i: usize, t: f64) -> Result<Vec<f64>> {
        let horizon = self.horizon();
        if !(t >= 0.0 && t <= horizon) {
            return Err(Error::OutsideSpan { t, start: 0.0, end: horizon });
        }
        let cd = self.component(i).ok_or_else(|| {
            Error::InvalidArgument(format!("component {i} is fully observed; its transition density is singular"))
        })?;
        let mut ge = GammaEval::default();
        let probe = probe_for(&self.breaks, t);
        if let Some(x) = ge.eval(&self.model, cd, t, probe) {
            return Err(Error::DegenerateDensity { component: i, state: x, t });
        }
        Ok(ge.gamma)
    }

    pub fn consistency_check(&self, grid: usize) -> Vec<DensityViolation> {
        let frame = self.frame();
        let mut out = Vec::new();
        for i in 0..self.factors.len() {
            let ev = &self.evidence.components[i];
            let boundary = BoundarySpec {
                start: match &ev.start {
                    StartCondition::State(s) => Some(crate::model::indicator(self.model.card(i), *s)),
                    StartCondition::Prior(_) => None,
                },
                end: ev.end,
            };
            out.extend(audit_component(&frame, i, &boundary, grid));
        }
        out
    }
}

/// `F = E + H` of a density set.
pub fn free_energy(set: &FactoredDensitySet, tol: f64) -> Result<FreeEnergyReport> {
    let terms = (0..set.factors.len())
        .map(|i| set.component_term(i, tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(FreeEnergyReport::from_terms(&terms))
}

/// Left Riemann approximation `F_K` on the grid `t_k = kT/K`.
pub fn discretized_free_energy(set: &FactoredDensitySet, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument("K must be at least 2".into()));
    }
    let frame = set.frame();
    Ok((0..set.factors.len())
        .map(|i| component_term_discretized(&frame, i, set.prior(i), k).total())
        .sum())
}

/// Expected family statistics under the density set.
pub fn expected_stats(set: &FactoredDensitySet, tol: f64) -> Result<ModelStats> {
    let frame = set.frame();
    Ok(ModelStats {
        families: (0..set.factors.len())
            .map(|i| component_stats(&frame, i, tol))
            .collect::<Result<Vec<_>>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_ising_chain;

    #[test]
    fn weights_follow_mixed_radix() {
        let w = instantiation_weights(&[&[0.2, 0.8], &[0.5, 0.25, 0.25]]);
        assert_eq!(w.len(), 6);
        assert!((w[0] - 0.1).abs() < 1e-15);
        assert!((w[3] - 0.4).abs() < 1e-15);
        assert!((w[5] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn averaged_rates_two_term() {
        let (beta, tau) = (1.0f64, 1.0f64);
        let m = build_ising_chain(2, beta, tau).unwrap();
        let half = [0.5, 0.5];
        let qbar = avg_rates(&m, 0, &[&half]).unwrap();
        let qt = geo_rates(&m, 0, &[&half]).unwrap();
        let expect_bar = 0.5 * (tau / (1.0 + (2.0 * beta).exp()) + tau / (1.0 + (-2.0 * beta).exp()));
        let expect_geo = tau / ((1.0 + (2.0 * beta).exp()) * (1.0 + (-2.0 * beta).exp())).sqrt();
        assert!((qbar[1] - expect_bar).abs() < 1e-14);
        assert!((qt[1] - expect_geo).abs() < 1e-14);
        assert!(qt[1] <= qbar[1]);
    }

    #[test]
    fn point_mass_parents_reproduce_conditional() {
        let m = build_ising_chain(3, 0.7, 1.3).unwrap();
        let a = [0.0, 1.0];
        let b = [1.0, 0.0];
        let qbar = avg_rates(&m, 1, &[&a, &b]).unwrap();
        let qt = geo_rates(&m, 1, &[&a, &b]).unwrap();
        let u = m.cim(1).instantiation_index(&[1, 0]);
        for k in 0..4 {
            assert!((qbar[k] - m.cim(1).matrix(u)[k]).abs() < 1e-14);
            assert!((qt[k] - m.cim(1).matrix(u)[k]).abs() < 1e-14);
        }
        assert!(avg_rates(&m, 1, &[&a]).is_err());
    }

    #[test]
    fn beta_zero_rates_are_constant() {
        let m = build_ising_chain(3, 0.0, 3.0).unwrap();
        let p = [0.3, 0.7];
        let qbar = avg_rates(&m, 1, &[&p, &p]).unwrap();
        assert!((qbar[1] - 1.5).abs() < 1e-14 && (qbar[2] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn probes_and_segments() {
        let b = [0.0, 0.3, 1.0];
        assert_eq!(probe_for(&b, 0.3), 0.65);
        assert_eq!(probe_for(&b, 0.1), 0.15);
        assert_eq!(probe_for(&b, 1.0), 0.65);
        assert_eq!(segments(&b, 0.5), vec![(0.0, 0.3), (0.3, 0.5)]);
    }
}
