//! Mean-field optimization on an interval.
//!
//! Each component update integrates `rho` backward against the averaged rates
//! of its parents and the feedback `psi` from its children, then integrates
//! `mu` forward with transition rates `q~_{x,y} rho_y / rho_x`. Components are
//! updated round-robin in index order until the free energy stops changing.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{
    component_term, probe_for, segments, ComponentDensity, ComponentTerm, FactorDensity, FactoredDensitySet, Frame,
    FreeEnergyReport, GammaEval, RateEval, RateSource, RHO_FLOOR,
};
use crate::error::{Error, Result};
use crate::model::{indicator, CtbnModel, Evidence};
use crate::ode::{integrate, integrate_renormalized, IntegratorConfig, OdeSolution, PiecewiseSolution};

/// How the initial marginal of an unobserved start is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RootMode {
    /// `mu(0)` is the prior.
    #[default]
    Paper,
    /// `mu(0)` is proportional to `prior * rho(0)`.
    Reweighted,
}

impl std::str::FromStr for RootMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(RootMode::Paper),
            "reweighted" => Ok(RootMode::Reweighted),
            _ => Err(Error::InvalidArgument(format!("unknown root mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldConfig {
    /// Relative free-energy change over one sweep that counts as converged.
    pub tol: f64,
    pub max_sweeps: usize,
    pub integrator: IntegratorConfig,
    pub seed: u64,
    /// Forward integration of a clamped component stops at `T (1 - eps_end)`.
    pub eps_end: f64,
    pub renorm_threshold: f64,
    pub root_mode: RootMode,
    pub quad_tol: f64,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 100,
            integrator: IntegratorConfig::default(),
            seed: 0,
            eps_end: 1e-9,
            renorm_threshold: 1e100,
            root_mode: RootMode::Paper,
            quad_tol: 1e-8,
        }
    }
}

impl MeanFieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.integrator.validate()?;
        let positive = [self.tol, self.eps_end, self.renorm_threshold, self.quad_tol];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_sweeps == 0 || self.eps_end >= 1.0 || self.renorm_threshold <= 1.0 {
            return Err(Error::InvalidArgument("mean-field configuration out of range".into()));
        }
        Ok(())
    }

    /// Allowed free-energy decrease per update.
    pub fn slack(f: f64) -> f64 {
        1e-7 * (1.0 + f.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub sweep: usize,
    pub component: usize,
    pub free_energy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `(component, gap)` for every clamped forward integration.
    pub pre_clamp_gaps: Vec<(usize, f64)>,
    /// Components whose conditional rates contain zeros.
    pub zero_rate_components: Vec<usize>,
    /// `(sweep, component, decrease)` for updates that lowered the free
    /// energy by more than the slack.
    pub slack_violations: Vec<(usize, usize, f64)>,
}

impl Diagnostics {
    pub fn max_pre_clamp_gap(&self) -> f64 {
        self.pre_clamp_gaps.iter().fold(0.0f64, |m, g| m.max(g.1))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldTrace {
    /// Free energy right after initialization.
    pub initial: f64,
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
    pub sweeps: usize,
    pub diagnostics: Diagnostics,
}

impl MeanFieldTrace {
    /// Largest decrease between consecutive free-energy values, relative to
    /// the slack; `<= 1` means monotone within slack.
    pub fn worst_slack_ratio(&self) -> f64 {
        let mut prev = self.initial;
        let mut worst = 0.0f64;
        for e in &self.entries {
            worst = worst.max((prev - e.free_energy) / MeanFieldConfig::slack(prev));
            prev = e.free_energy;
        }
        worst
    }

    pub fn is_monotone(&self) -> bool {
        self.worst_slack_ratio() <= 1.0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sweep,component,free_energy\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:.16e}\n", e.sweep, e.component, e.free_energy));
        }
        s
    }
}

/// Rates driving one component's sweep.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    /// A fixed rate matrix; no coupling to other components.
    Fixed(&'a [f64]),
    /// Averaged rates of the current parents plus feedback from children.
    Coupled,
}

struct Local<'a> {
    frame: Frame<'a>,
    i: usize,
    coupled: bool,
    own: RateEval,
    child_rates: RateEval,
    child: GammaEval,
    psi: Vec<f64>,
    buf: Vec<f64>,
}

impl<'a> Local<'a> {
    fn new(frame: Frame<'a>, i: usize, dynamics: Dynamics<'a>) -> Self {
        let c = frame.model.card(i);
        let mut own = RateEval::default();
        let coupled = match dynamics {
            Dynamics::Fixed(q) => {
                own.from_source(frame.model, i, &RateSource::Fixed(q.to_vec()), 0.0, 0.0);
                false
            }
            Dynamics::Coupled => true,
        };
        Self {
            frame,
            i,
            coupled,
            own,
            child_rates: RateEval::default(),
            child: GammaEval::default(),
            psi: vec![0.0; c],
            buf: Vec::new(),
        }
    }

    fn rates(&mut self, t: f64, probe: f64) {
        if self.coupled {
            self.own.current(self.frame.model, self.frame.factors, self.i, t, probe, None);
        }
    }

    fn psi(&mut self, t: f64, probe: f64) {
        self.psi.iter_mut().for_each(|v| *v = 0.0);
        if !self.coupled {
            return;
        }
        let model = self.frame.model;
        let ci = model.card(self.i);
        for &j in model.children(self.i) {
            let cj = model.card(j);
            match &self.frame.factors[j] {
                FactorDensity::Latent(cd) => {
                    self.child.eval(model, cd, t, probe);
                }
                FactorDensity::Observed { path, .. } => {
                    self.child.mu.clear();
                    self.child.mu.resize(cj, 0.0);
                    self.child.mu[path.state_at(probe)] = 1.0;
                    self.child.gamma.clear();
                    self.child.gamma.resize(cj * cj, 0.0);
                }
            }
            for x in 0..ci {
                self.child_rates
                    .current(model, self.frame.factors, j, t, probe, Some((self.i, x)));
                let mut s = 0.0;
                for a in 0..cj {
                    s += self.child.mu[a] * self.child_rates.qbar[a * cj + a];
                    for b in 0..cj {
                        let g = self.child.gamma[a * cj + b];
                        if b != a && g > 0.0 {
                            s += g * self.child_rates.lnq[a * cj + b];
                        }
                    }
                }
                self.psi[x] += s;
            }
        }
    }

    /// Multipliers applied to `rho` when crossing an observed child jump at
    /// `t` backward in time.
    fn jump_factors(&mut self, t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 1.0);
        if !self.coupled {
            return;
        }
        let model = self.frame.model;
        for &j in model.children(self.i) {
            let FactorDensity::Observed { path, .. } = &self.frame.factors[j] else { continue };
            let Some((_, a, b)) = path.jumps().find(|jump| jump.0 == t) else { continue };
            let cj = model.card(j);
            for (x, o) in out.iter_mut().enumerate() {
                self.child_rates
                    .current(model, self.frame.factors, j, t, t, Some((self.i, x)));
                *o *= self.child_rates.lnq[a * cj + b].exp();
            }
        }
    }

    fn rho_rhs(&mut self, t: f64, probe: f64, y: &[f64], dy: &mut [f64]) {
        self.rates(t, probe);
        self.psi(t, probe);
        let c = y.len();
        for x in 0..c {
            let mut d = -y[x] * (self.own.qbar[x * c + x] + self.psi[x]);
            for z in 0..c {
                if z != x {
                    d -= self.own.lnq[x * c + z].exp() * y[z];
                }
            }
            dy[x] = d;
        }
    }

    fn mu_rhs(&mut self, rho: &PiecewiseSolution, t: f64, probe: f64, m: &[f64], dm: &mut [f64]) {
        self.rates(t, probe);
        let c = m.len();
        self.buf.resize(c, 0.0);
        rho.eval_near(t, probe, &mut self.buf);
        dm.iter_mut().for_each(|v| *v = 0.0);
        for x in 0..c {
            let rx = self.buf[x];
            if rx <= RHO_FLOOR {
                continue;
            }
            for y in 0..c {
                if y == x {
                    continue;
                }
                let flow = m[x] * self.own.lnq[x * c + y].exp() * self.buf[y] / rx;
                dm[x] -= flow;
                dm[y] += flow;
            }
        }
    }
}

/// Backward function of component `i` on the frame's interval, from
/// `terminal` at the end of the interval.
pub fn backward_rho(frame: &Frame, i: usize, dynamics: Dynamics, terminal: &[f64], cfg: &MeanFieldConfig) -> Result<PiecewiseSolution> {
    if terminal.len() != frame.model.card(i) {
        return Err(Error::InvalidArgument("terminal value has the wrong length".into()));
    }
    let mut local = Local::new(*frame, i, dynamics);
    let mut pieces = Vec::new();
    let mut scales = Vec::new();
    let mut v = terminal.to_vec();
    let mut log = 0.0;
    let mut mult = vec![1.0; v.len()];
    let segs = segments(frame.breaks, frame.horizon);
    for (k, &(a, b)) in segs.iter().enumerate().rev() {
        let probe = 0.5 * (a + b);
        let (vf, lf) = integrate_renormalized(
            |t, y, dy| local.rho_rhs(t, probe, y, dy),
            b,
            a,
            &v,
            log,
            cfg.renorm_threshold,
            &cfg.integrator,
            &mut pieces,
            &mut scales,
        )?;
        v = vf;
        log = lf;
        if k > 0 {
            local.jump_factors(a, &mut mult);
            v.iter_mut().zip(&mult).for_each(|(x, m)| *x *= m);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { t: a });
        }
        if v.iter().all(|&x| x <= 0.0) {
            return Err(Error::ZeroLikelihood);
        }
    }
    Ok(PiecewiseSolution::from_descending(pieces, scales))
}

/// Result of a forward sweep.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub mu: PiecewiseSolution,
    pub clamp_start: Option<f64>,
    pub pre_clamp_gap: f64,
}

/// Forward marginal of component `i` from `mu0`. With `clamp_end` the
/// integration stops at `T (1 - eps_end)` and a linear piece joins the
/// pre-clamp value to the end indicator.
pub fn forward_mu(
    frame: &Frame,
    i: usize,
    dynamics: Dynamics,
    rho: &PiecewiseSolution,
    mu0: &[f64],
    clamp_end: Option<usize>,
    cfg: &MeanFieldConfig,
) -> Result<ForwardSolution> {
    let c = frame.model.card(i);
    if mu0.len() != c {
        return Err(Error::InvalidArgument("initial value has the wrong length".into()));
    }
    let horizon = frame.horizon;
    let smooth_end = if clamp_end.is_some() { horizon * (1.0 - cfg.eps_end) } else { horizon };
    let mut local = Local::new(*frame, i, dynamics);
    let mut pieces = Vec::new();
    let mut v = mu0.to_vec();
    for (a, b) in segments(frame.breaks, smooth_end) {
        let probe = 0.5 * (a + b);
        let sol = integrate(|t, m, dm| local.mu_rhs(rho, t, probe, m, dm), a, b, &v, &cfg.integrator)?;
        v = sol.final_value().to_vec();
        pieces.push(sol);
    }
    let mut gap = 0.0;
    let mut clamp_start = None;
    if let Some(e) = clamp_end {
        let target = indicator(c, e);
        gap = v.iter().zip(&target).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        pieces.push(OdeSolution::linear(smooth_end, horizon, &v, &target));
        clamp_start = Some(smooth_end);
    }
    let n = pieces.len();
    Ok(ForwardSolution {
        mu: PiecewiseSolution::new(pieces, vec![0.0; n])?,
        clamp_start,
        pre_clamp_gap: gap,
    })
}

/// `psi^i(t)`: feedback from the children of `i`.
pub fn psi(frame: &Frame, i: usize, t: f64) -> Vec<f64> {
    let mut local = Local::new(*frame, i, Dynamics::Coupled);
    let probe = probe_for(frame.breaks, t);
    local.psi(t, probe);
    local.psi
}

/// Initial `mu` for a start distribution under the configured root mode.
pub(crate) fn initial_mu(start: &[f64], rho: &PiecewiseSolution, mode: RootMode) -> Vec<f64> {
    match mode {
        RootMode::Paper => start.to_vec(),
        RootMode::Reweighted => {
            let mut r = vec![0.0; start.len()];
            rho.eval_near(rho.start(), rho.start(), &mut r);
            let mut m: Vec<f64> = start.iter().zip(&r).map(|(p, r)| p * r.max(0.0)).collect();
            let s: f64 = m.iter().sum();
            if s > 0.0 {
                m.iter_mut().for_each(|v| *v /= s);
                m
            } else {
                start.to_vec()
            }
        }
    }
}

/// One backward-forward pass of component `i` on a frame, returning the new
/// density. `terminal` and `start` are the boundary values.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_component(
    frame: &Frame,
    i: usize,
    dynamics: Dynamics,
    terminal: &[f64],
    start: &[f64],
    start_is_prior: bool,
    clamp_end: Option<usize>,
    cfg: &MeanFieldConfig,
) -> Result<ComponentDensity> {
    let rho = backward_rho(frame, i, dynamics, terminal, cfg)?;
    let mu0 = if start_is_prior {
        initial_mu(start, &rho, cfg.root_mode)
    } else {
        start.to_vec()
    };
    let fwd = forward_mu(frame, i, dynamics, &rho, &mu0, clamp_end, cfg)?;
    let source = match dynamics {
        Dynamics::Fixed(q) => RateSource::Fixed(q.to_vec()),
        Dynamics::Coupled => RateSource::Parents(frame.model.parents(i).iter().map(|&p| frame.factors[p].marginal()).collect()),
    };
    Ok(ComponentDensity {
        component: i,
        horizon: frame.horizon,
        mu: Arc::new(fwd.mu),
        rho: Arc::new(rho),
        source,
        clamp_start: fwd.clamp_start,
        pre_clamp_gap: fwd.pre_clamp_gap,
    })
}

/// Draws one parent instantiation per component (in index order) from the
/// seeded generator and returns the corresponding conditional rate matrices.
pub fn fictional_rates(model: &CtbnModel, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..model.num_components())
        .map(|i| {
            let cim = model.cim(i);
            let u = rng.gen_range(0..cim.num_instantiations());
            cim.matrix(u).to_vec()
        })
        .collect()
}

fn boundary(model: &CtbnModel, evidence: &Evidence, i: usize) -> (Vec<f64>, Vec<f64>, bool, Option<usize>) {
    let c = model.card(i);
    let ev = &evidence.components[i];
    let start = ev.start.distribution(c);
    let is_prior = matches!(ev.start, crate::model::StartCondition::Prior(_));
    let terminal = match ev.end {
        Some(e) => indicator(c, e),
        None => vec![1.0; c],
    };
    (start, terminal, is_prior, ev.end)
}

/// Density set where every latent component is the exact posterior of a
/// single chain driven by one randomly chosen conditional rate matrix.
pub fn initialize(model: Arc<CtbnModel>, evidence: &Evidence, cfg: &MeanFieldConfig) -> Result<FactoredDensitySet> {
    cfg.validate()?;
    evidence.validate(&model)?;
    let fictional = fictional_rates(&model, cfg.seed);
    let breaks = crate::density::evidence_breaks(evidence);
    let frame = Frame {
        model: &model,
        factors: &[],
        horizon: evidence.horizon,
        breaks: &breaks,
    };
    let mut factors = Vec::with_capacity(model.num_components());
    for i in 0..model.num_components() {
        if let Some(path) = &evidence.components[i].trajectory {
            factors.push(FactorDensity::Observed {
                path: Arc::new(path.clone()),
                card: model.card(i),
            });
            continue;
        }
        let (start, terminal, is_prior, end) = boundary(&model, evidence, i);
        let cd = solve_component(&frame, i, Dynamics::Fixed(&fictional[i]), &terminal, &start, is_prior, end, cfg)?;
        factors.push(FactorDensity::Latent(cd));
    }
    FactoredDensitySet::new(model, evidence.clone(), factors)
}

/// Optimizer state: the density set plus cached per-component free-energy
/// terms.
#[derive(Debug, Clone)]
pub struct MeanFieldState {
    set: FactoredDensitySet,
    terms: Vec<ComponentTerm>,
    config: MeanFieldConfig,
}

impl MeanFieldState {
    pub fn new(set: FactoredDensitySet, config: MeanFieldConfig) -> Result<Self> {
        config.validate()?;
        let terms = (0..set.factors().len())
            .map(|i| set.component_term(i, config.quad_tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { set, terms, config })
    }

    pub fn set(&self) -> &FactoredDensitySet {
        &self.set
    }

    pub fn into_set(self) -> FactoredDensitySet {
        self.set
    }

    pub fn free_energy(&self) -> f64 {
        self.terms.iter().map(|t| t.total()).sum()
    }

    pub fn report(&self) -> FreeEnergyReport {
        FreeEnergyReport::from_terms(&self.terms)
    }

    /// Backward-forward pass for component `i` against the current others;
    /// returns the new total free energy. Observed components are left
    /// unchanged.
    pub fn update_component(&mut self, i: usize) -> Result<f64> {
        if self.set.component(i).is_none() {
            return Ok(self.free_energy());
        }
        let model = self.set.model_arc().clone();
        let (start, terminal, is_prior, end) = boundary(&model, self.set.evidence(), i);
        let cd = solve_component(&self.set.frame(), i, Dynamics::Coupled, &terminal, &start, is_prior, end, &self.config)?;
        self.set.set_factor(i, FactorDensity::Latent(cd));
        let frame = self.set.frame();
        self.terms[i] = component_term(&frame, i, self.set.prior(i), self.config.quad_tol)?;
        for &j in model.children(i) {
            self.terms[j] = component_term(&frame, j, self.set.prior(j), self.config.quad_tol)?;
        }
        Ok(self.free_energy())
    }
}

/// Output of [`run_mean_field`].
#[derive(Debug, Clone)]
pub struct MeanFieldResult {
    pub density: FactoredDensitySet,
    pub report: FreeEnergyReport,
    pub trace: MeanFieldTrace,
}

/// Runs round-robin sweeps until `|dF| <= tol * max(1, |F|)` over a sweep or
/// `max_sweeps` is reached.
pub fn run_mean_field(model: &CtbnModel, evidence: &Evidence, cfg: &MeanFieldConfig) -> Result<MeanFieldResult> {
    let model = Arc::new(model.clone());
    let set = initialize(model.clone(), evidence, cfg)?;
    let mut state = MeanFieldState::new(set, *cfg)?;
    let mut trace = MeanFieldTrace {
        initial: state.free_energy(),
        ..Default::default()
    };
    trace.diagnostics.zero_rate_components = (0..model.num_components())
        .filter(|&i| {
            let c = model.card(i);
            model.cim(i).tables().iter().enumerate().any(|(k, &q)| (k % (c * c)) / c != k % c && q == 0.0)
        })
        .collect();
    let mut f = trace.initial;
    for sweep in 1..=cfg.max_sweeps {
        let f_start = f;
        for i in 0..model.num_components() {
            if state.set().component(i).is_none() {
                continue;
            }
            let f_new = state.update_component(i)?;
            if f_new < f - MeanFieldConfig::slack(f) {
                trace.diagnostics.slack_violations.push((sweep, i, f - f_new));
            }
            trace.entries.push(TraceEntry {
                sweep,
                component: i,
                free_energy: f_new,
            });
            f = f_new;
        }
        trace.sweeps = sweep;
        if (f - f_start).abs() <= cfg.tol * f.abs().max(1.0) {
            trace.converged = true;
            break;
        }
    }
    for (i, fac) in state.set().factors().iter().enumerate() {
        if let Some(cd) = fac.latent() {
            if cd.clamp_start.is_some() {
                trace.diagnostics.pre_clamp_gaps.push((i, cd.pre_clamp_gap));
            }
        }
    }
    let report = state.report();
    Ok(MeanFieldResult {
        density: state.into_set(),
        report,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{discretized_free_energy, expected_stats, free_energy};
    use crate::model::{build_ising_chain, StateSpace};
    use crate::oracle::{exact_posterior_for, OracleConfig};

    fn two_state(a: f64, b: f64) -> CtbnModel {
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        CtbnModel::new(space, vec![vec![]], vec![vec![-a, a, b, -b]]).unwrap()
    }

    #[test]
    fn single_component_is_exact() {
        let m = two_state(1.0, 2.0);
        let ev = Evidence::endpoints(1.0, &[0], &[1]);
        let cfg = MeanFieldConfig {
            integrator: IntegratorConfig::with_tolerances(1e-8, 1e-12),
            ..Default::default()
        };
        let res = run_mean_field(&m, &ev, &cfg).unwrap();
        let (_, post) = exact_posterior_for(&m, &ev, &OracleConfig::default()).unwrap();
        assert!((res.report.total - post.log_likelihood()).abs() < 1e-5, "{} vs {}", res.report.total, post.log_likelihood());
        let cd = res.density.component(0).unwrap();
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let p = post.posterior_at(t).unwrap();
            let mu = cd.mu_at(t);
            assert!((mu[0] - p[0]).abs() < 1e-5, "t={t}: {mu:?} vs {p:?}");
        }
        assert!(res.trace.converged);
    }

    #[test]
    fn frozen_process_energy() {
        // state 0 absorbing: nothing moves, H = 0, E = T q_00
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        let m = CtbnModel::new(space, vec![vec![]], vec![vec![0.0, 0.0, 1.0, -1.0]]).unwrap();
        let ev = Evidence {
            horizon: 2.0,
            components: vec![crate::model::ComponentEvidence {
                start: crate::model::StartCondition::State(0),
                end: None,
                trajectory: None,
            }],
        };
        let res = run_mean_field(&m, &ev, &MeanFieldConfig::default()).unwrap();
        assert!(res.report.entropy.abs() < 1e-14);
        assert!(res.report.energy.abs() < 1e-14);
        let stats = expected_stats(&res.density, 1e-10).unwrap();
        assert!(stats.families[0].transitions.iter().all(|&v| v == 0.0));
        assert!((discretized_free_energy(&res.density, 2).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn rho_scale_invariance() {
        let m = build_ising_chain(2, 1.0, 2.0).unwrap();
        let ev = Evidence::endpoints(1.0, &[0, 1], &[1, 0]);
        let res = run_mean_field(&m, &ev, &MeanFieldConfig::default()).unwrap();
        let base = free_energy(&res.density, 1e-8).unwrap().total;
        let g = res.density.gamma_at(0, 0.4).unwrap();
        let mut factors = res.density.factors().to_vec();
        if let FactorDensity::Latent(cd) = &factors[0] {
            factors[0] = FactorDensity::Latent(cd.with_rho_scaled(1e7));
        }
        let scaled = FactoredDensitySet::new(res.density.model_arc().clone(), ev, factors).unwrap();
        let f2 = free_energy(&scaled, 1e-8).unwrap().total;
        let g2 = scaled.gamma_at(0, 0.4).unwrap();
        assert!((base - f2).abs() < 1e-10);
        for (a, b) in g.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn no_children_means_zero_psi() {
        let m = two_state(1.0, 1.0);
        let ev = Evidence::endpoints(1.0, &[0], &[0]);
        let res = run_mean_field(&m, &ev, &MeanFieldConfig::default()).unwrap();
        assert_eq!(psi(&res.density.frame(), 0, 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn seed_determinism() {
        let m = build_ising_chain(3, 1.0, 1.0).unwrap();
        let ev = Evidence::endpoints(1.0, &[0, 1, 0], &[1, 0, 1]);
        let cfg = MeanFieldConfig { seed: 7, ..Default::default() };
        let a = run_mean_field(&m, &ev, &cfg).unwrap();
        let b = run_mean_field(&m, &ev, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
    }
}
