//! Mean-field inference for processes branching along a rooted tree.
//!
//! Every branch carries its own density on the branch-local interval
//! `[0, length]`. Backward functions are multiplied at internal vertices
//! (`rho(b_in, end) = prod_k rho(b_k, 0)`) and forward marginals are copied
//! (`mu(b_k, 0) = mu(b_in, end)`). The free energy is the sum of the branch
//! functionals plus the initial-distribution term at the root.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::{
    audit_component, component_stats, component_term, BoundarySpec, ComponentDensity, ComponentTerm, DensityViolation,
    FactorDensity, Frame, FreeEnergyReport,
};
use crate::error::{Error, Result};
use crate::meanfield::{
    backward_rho, fictional_rates, forward_mu, Dynamics, MeanFieldConfig, MeanFieldTrace, RootMode, TraceEntry,
};
use crate::model::{check_prior, indicator, CtbnModel, JointRateMatrix, StartCondition};
use crate::ode::PiecewiseSolution;
use crate::oracle::{posterior_from_messages, propagate, ExactPosterior, OracleConfig};
use crate::stats::ModelStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub length: f64,
}

/// Rooted tree with branch lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTopology {
    names: Vec<String>,
    branches: Vec<Branch>,
    root: usize,
    incoming: Vec<Option<usize>>,
    outgoing: Vec<Vec<usize>>,
    preorder: Vec<usize>,
}

impl TreeTopology {
    pub fn new(names: Vec<String>, branches: Vec<Branch>, root: usize) -> Result<Self> {
        let n = names.len();
        if root >= n {
            return Err(Error::InvalidTree("root index out of range".into()));
        }
        if branches.is_empty() {
            return Err(Error::InvalidTree("a tree needs at least one branch".into()));
        }
        let mut incoming = vec![None; n];
        let mut outgoing = vec![Vec::new(); n];
        for (b, br) in branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::InvalidTree(format!("branch {b} references a missing vertex")));
            }
            if !(br.length > 0.0 && br.length.is_finite()) {
                return Err(Error::InvalidTree(format!("branch {b} has non-positive length")));
            }
            if br.to == root {
                return Err(Error::InvalidTree("the root cannot have an incoming branch".into()));
            }
            if incoming[br.to].replace(b).is_some() {
                return Err(Error::InvalidTree(format!("vertex {} has two incoming branches", names[br.to])));
            }
            outgoing[br.from].push(b);
        }
        let mut preorder = Vec::with_capacity(branches.len());
        let mut stack: Vec<usize> = outgoing[root].iter().rev().copied().collect();
        while let Some(b) = stack.pop() {
            preorder.push(b);
            stack.extend(outgoing[branches[b].to].iter().rev().copied());
        }
        if preorder.len() != branches.len() || (0..n).any(|v| v != root && incoming[v].is_none()) {
            return Err(Error::InvalidTree("tree is not connected from the root".into()));
        }
        Ok(Self {
            names,
            branches,
            root,
            incoming,
            outgoing,
            preorder,
        })
    }

    /// Chain `v0 -> v1 -> ... -> vm` with the given branch lengths.
    pub fn path(lengths: &[f64]) -> Result<Self> {
        let names = (0..=lengths.len()).map(|k| format!("v{k}")).collect();
        let branches = lengths
            .iter()
            .enumerate()
            .map(|(k, &length)| Branch {
                from: k,
                to: k + 1,
                length,
            })
            .collect();
        Self::new(names, branches, 0)
    }

    pub fn num_vertices(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vertex_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, b: usize) -> &Branch {
        &self.branches[b]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn incoming(&self, v: usize) -> Option<usize> {
        self.incoming[v]
    }

    pub fn outgoing(&self, v: usize) -> &[usize] {
        &self.outgoing[v]
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.outgoing[v].is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&v| self.is_leaf(v)).collect()
    }

    /// Branches in pre-order (every branch after its parent branch).
    pub fn preorder(&self) -> &[usize] {
        &self.preorder
    }

    pub fn postorder(&self) -> Vec<usize> {
        self.preorder.iter().rev().copied().collect()
    }

    /// Time elapsed from the root to vertex `v`.
    pub fn depth(&self, v: usize) -> f64 {
        self.path_to(v).iter().map(|&b| self.branches[b].length).sum()
    }

    /// Branches from the root down to `v`.
    pub fn path_to(&self, mut v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(b) = self.incoming[v] {
            out.push(b);
            v = self.branches[b].from;
        }
        out.reverse();
        out
    }
}

/// Evidence on a tree: a start condition per component at the root and
/// optional observed states at any other vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEvidence {
    pub root: Vec<StartCondition>,
    /// `vertices[v][i]`: observed state of component `i` at vertex `v`.
    pub vertices: Vec<Vec<Option<usize>>>,
}

impl TreeEvidence {
    pub fn validate(&self, model: &CtbnModel, tree: &TreeTopology) -> Result<()> {
        let d = model.num_components();
        if self.root.len() != d || self.vertices.len() != tree.num_vertices() {
            return Err(Error::InvalidEvidence("tree evidence has the wrong shape".into()));
        }
        for (i, s) in self.root.iter().enumerate() {
            match s {
                StartCondition::State(x) if *x >= model.card(i) => {
                    return Err(Error::InvalidEvidence(format!("root state of component {i} out of range")))
                }
                StartCondition::Prior(p) => check_prior(p, model.card(i), i)?,
                _ => {}
            }
        }
        for (v, obs) in self.vertices.iter().enumerate() {
            if obs.len() != d {
                return Err(Error::InvalidEvidence(format!("vertex {v} needs one entry per component")));
            }
            if v == tree.root() && obs.iter().any(Option::is_some) {
                return Err(Error::InvalidEvidence("root observations belong in the root start condition".into()));
            }
            for (i, o) in obs.iter().enumerate() {
                if matches!(o, Some(x) if *x >= model.card(i)) {
                    return Err(Error::InvalidEvidence(format!("state of component {i} at vertex {v} out of range")));
                }
            }
        }
        Ok(())
    }

    fn vertex_weight(&self, v: usize, i: usize, card: usize) -> Vec<f64> {
        match self.vertices[v][i] {
            Some(x) => indicator(card, x),
            None => vec![1.0; card],
        }
    }
}

/// Per-branch densities of every component.
#[derive(Debug, Clone)]
pub struct TreeDensitySet {
    model: Arc<CtbnModel>,
    tree: TreeTopology,
    evidence: TreeEvidence,
    breaks: Vec<[f64; 2]>,
    branches: Vec<Vec<FactorDensity>>,
}

impl TreeDensitySet {
    pub fn model(&self) -> &CtbnModel {
        &self.model
    }

    pub fn tree(&self) -> &TreeTopology {
        &self.tree
    }

    pub fn evidence(&self) -> &TreeEvidence {
        &self.evidence
    }

    pub fn branch_factors(&self, b: usize) -> &[FactorDensity] {
        &self.branches[b]
    }

    pub fn density(&self, b: usize, i: usize) -> &ComponentDensity {
        self.branches[b][i].latent().expect("tree densities are latent")
    }

    pub fn frame(&self, b: usize) -> Frame<'_> {
        Frame {
            model: &self.model,
            factors: &self.branches[b],
            horizon: self.tree.branches[b].length,
            breaks: &self.breaks[b],
        }
    }

    /// Marginal of component `i` at the root.
    pub fn root_mu(&self, i: usize) -> Vec<f64> {
        let b = self.tree.outgoing(self.tree.root())[0];
        self.density(b, i).mu_at(0.0)
    }

    fn root_prior(&self, i: usize) -> Option<&[f64]> {
        match &self.evidence.root[i] {
            StartCondition::Prior(p) => Some(p),
            StartCondition::State(_) => None,
        }
    }

    fn root_term(&self, i: usize) -> ComponentTerm {
        let mut term = ComponentTerm::default();
        if let Some(p) = self.root_prior(i) {
            for (m, q) in self.root_mu(i).iter().zip(p) {
                if *m > 0.0 {
                    term.energy += m * q.max(1e-300).ln();
                    term.entropy -= m * m.ln();
                }
            }
        }
        term
    }

    /// Free-energy terms of component `i` summed over branches, including the
    /// root term.
    pub fn component_term(&self, i: usize, tol: f64) -> Result<ComponentTerm> {
        let mut total = self.root_term(i);
        for b in 0..self.branches.len() {
            let t = component_term(&self.frame(b), i, None, tol)?;
            total.energy += t.energy;
            total.entropy += t.entropy;
            total.error += t.error;
        }
        Ok(total)
    }

    /// Expected family statistics on each branch.
    pub fn branch_stats(&self, b: usize, tol: f64) -> Result<ModelStats> {
        let frame = self.frame(b);
        Ok(ModelStats {
            families: (0..self.model.num_components())
                .map(|i| component_stats(&frame, i, tol))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Continuity of `mu` and the product rule of `rho` at every vertex,
    /// plus the per-branch density audit.
    pub fn vertex_consistency(&self, tol: f64) -> Vec<DensityViolation> {
        let mut out = Vec::new();
        let tree = &self.tree;
        let d = self.model.num_components();
        for v in 0..tree.num_vertices() {
            let outs = tree.outgoing(v);
            for i in 0..d {
                let c = self.model.card(i);
                let (mu_in, rho_in) = match tree.incoming(v) {
                    Some(b) => {
                        let cd = self.density(b, i);
                        (Some(cd.mu_at(cd.horizon)), Some(cd.rho_at(cd.horizon)))
                    }
                    None => (Some(self.root_mu(i)), None),
                };
                if let Some(mu_in) = &mu_in {
                    for &k in outs {
                        let m0 = self.density(k, i).mu_at(0.0);
                        let diff = mu_in.iter().zip(&m0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                        if diff > tol {
                            out.push(DensityViolation {
                                component: i,
                                t: 0.0,
                                message: format!("mu jumps by {diff:e} at vertex {}", tree.names[v]),
                            });
                        }
                    }
                }
                if let Some(rho_in) = rho_in {
                    let mut prod = self.evidence.vertex_weight(v, i, c);
                    for &k in outs {
                        let r = self.density(k, i).rho_at(0.0);
                        prod.iter_mut().zip(&r).for_each(|(p, r)| *p *= r);
                    }
                    let a = normalize_max(&rho_in);
                    let b = normalize_max(&prod);
                    let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                    if diff > tol {
                        out.push(DensityViolation {
                            component: i,
                            t: 0.0,
                            message: format!("rho product rule off by {diff:e} at vertex {}", tree.names[v]),
                        });
                    }
                }
            }
        }
        for b in 0..self.branches.len() {
            let to = tree.branch(b).to;
            let from = tree.branch(b).from;
            for i in 0..d {
                let start = if from == tree.root() {
                    match (&self.evidence.root[i], self.root_prior(i)) {
                        (StartCondition::State(s), _) => Some(indicator(self.model.card(i), *s)),
                        _ => None,
                    }
                } else {
                    None
                };
                let boundary = BoundarySpec {
                    start,
                    end: self.evidence.vertices[to][i],
                };
                out.extend(audit_component(&self.frame(b), i, &boundary, 128));
            }
        }
        out
    }

    /// Same set with branch `b`, component `i` replaced (for corruption
    /// tests and external tooling).
    pub fn with_density(&self, b: usize, i: usize, cd: ComponentDensity) -> Self {
        let mut out = self.clone();
        out.branches[b][i] = FactorDensity::Latent(cd);
        out
    }
}

/// Per-branch backward functions of component `i`, by pruning from the
/// leaves. `frames[b]` supplies the other components on branch `b`.
pub fn backward_sweep_tree(
    frames: &[Frame],
    tree: &TreeTopology,
    evidence: &TreeEvidence,
    i: usize,
    dynamics: Dynamics,
    cfg: &MeanFieldConfig,
) -> Result<Vec<PiecewiseSolution>> {
    let model = frames[0].model;
    let c = model.card(i);
    let mut rho: Vec<Option<PiecewiseSolution>> = vec![None; tree.branches.len()];
    let mut r0 = vec![0.0; c];
    for b in tree.postorder() {
        let v = tree.branch(b).to;
        let mut terminal = evidence.vertex_weight(v, i, c);
        for &k in tree.outgoing(v) {
            let rk = rho[k].as_ref().expect("post-order visits children first");
            rk.eval_into(0.0, &mut r0);
            terminal.iter_mut().zip(&r0).for_each(|(t, r)| *t *= r);
        }
        let terminal = normalize_max(&terminal);
        if terminal.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroLikelihood);
        }
        rho[b] = Some(backward_rho(&frames[b], i, dynamics, &terminal, cfg)?);
    }
    Ok(rho.into_iter().map(|r| r.unwrap()).collect())
}

/// Per-branch forward marginals of component `i` given its backward
/// functions.
pub fn forward_sweep_tree(
    frames: &[Frame],
    tree: &TreeTopology,
    evidence: &TreeEvidence,
    i: usize,
    dynamics: Dynamics,
    rho: Vec<PiecewiseSolution>,
    cfg: &MeanFieldConfig,
) -> Result<Vec<ComponentDensity>> {
    let model = frames[0].model;
    let c = model.card(i);
    let root = tree.root();
    let mut root_mu = evidence.root[i].distribution(c);
    if matches!(evidence.root[i], StartCondition::Prior(_)) && cfg.root_mode == RootMode::Reweighted {
        let mut r0 = vec![0.0; c];
        for &b in tree.outgoing(root) {
            rho[b].eval_into(0.0, &mut r0);
            root_mu.iter_mut().zip(&r0).for_each(|(m, r)| *m *= r.max(0.0));
        }
        let s: f64 = root_mu.iter().sum();
        if s > 0.0 {
            root_mu.iter_mut().for_each(|m| *m /= s);
        } else {
            root_mu = evidence.root[i].distribution(c);
        }
    }
    let mut end_mu: Vec<Option<Vec<f64>>> = vec![None; tree.branches.len()];
    let mut out: Vec<Option<ComponentDensity>> = vec![None; tree.branches.len()];
    let rho: Vec<Arc<PiecewiseSolution>> = rho.into_iter().map(Arc::new).collect();
    for &b in tree.preorder() {
        let br = tree.branch(b);
        let mu0 = match tree.incoming(br.from) {
            None => root_mu.clone(),
            Some(bin) => end_mu[bin].clone().expect("pre-order visits parents first"),
        };
        let clamp = evidence.vertices[br.to][i];
        // the endpoint guard is measured in time since the root, as on an interval
        let branch_cfg = MeanFieldConfig {
            eps_end: (cfg.eps_end * tree.depth(br.to) / br.length).min(0.5),
            ..*cfg
        };
        let fwd = forward_mu(&frames[b], i, dynamics, &rho[b], &mu0, clamp, &branch_cfg)?;
        let mut mu_end = vec![0.0; c];
        fwd.mu.eval_into(br.length, &mut mu_end);
        end_mu[b] = Some(mu_end);
        let source = match dynamics {
            Dynamics::Fixed(q) => crate::density::RateSource::Fixed(q.to_vec()),
            Dynamics::Coupled => {
                crate::density::RateSource::Parents(model.parents(i).iter().map(|&p| frames[b].factors[p].marginal()).collect())
            }
        };
        out[b] = Some(ComponentDensity {
            component: i,
            horizon: br.length,
            mu: Arc::new(fwd.mu),
            rho: rho[b].clone(),
            source,
            clamp_start: fwd.clamp_start,
            pre_clamp_gap: fwd.pre_clamp_gap,
        });
    }
    Ok(out.into_iter().map(|d| d.unwrap()).collect())
}

fn normalize_max(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m > 0.0 {
        v.iter().map(|x| x / m).collect()
    } else {
        v.to_vec()
    }
}

fn branch_breaks(tree: &TreeTopology) -> Vec<[f64; 2]> {
    tree.branches.iter().map(|b| [0.0, b.length]).collect()
}

/// Initial tree density: each component follows one randomly chosen
/// conditional rate matrix (same draw as the interval initialization).
pub fn initialize_tree(
    model: Arc<CtbnModel>,
    tree: &TreeTopology,
    evidence: &TreeEvidence,
    cfg: &MeanFieldConfig,
) -> Result<TreeDensitySet> {
    cfg.validate()?;
    evidence.validate(&model, tree)?;
    let fictional = fictional_rates(&model, cfg.seed);
    let breaks = branch_breaks(tree);
    let frames: Vec<Frame> = tree
        .branches
        .iter()
        .zip(&breaks)
        .map(|(b, br)| Frame {
            model: &model,
            factors: &[],
            horizon: b.length,
            breaks: br,
        })
        .collect();
    let mut per_component = Vec::with_capacity(model.num_components());
    for (i, q) in fictional.iter().enumerate() {
        let rho = backward_sweep_tree(&frames, tree, evidence, i, Dynamics::Fixed(q), cfg)?;
        per_component.push(forward_sweep_tree(&frames, tree, evidence, i, Dynamics::Fixed(q), rho, cfg)?);
    }
    let nb = tree.branches.len();
    let mut branches: Vec<Vec<FactorDensity>> = vec![Vec::new(); nb];
    for comp in per_component {
        for (b, cd) in comp.into_iter().enumerate() {
            branches[b].push(FactorDensity::Latent(cd));
        }
    }
    drop(frames);
    Ok(TreeDensitySet {
        model,
        tree: tree.clone(),
        evidence: evidence.clone(),
        breaks,
        branches,
    })
}

/// Tree optimizer state with cached free-energy terms.
#[derive(Debug, Clone)]
pub struct TreeMeanFieldState {
    set: TreeDensitySet,
    terms: Vec<ComponentTerm>,
    config: MeanFieldConfig,
}

impl TreeMeanFieldState {
    pub fn new(set: TreeDensitySet, config: MeanFieldConfig) -> Result<Self> {
        let terms = (0..set.model.num_components())
            .map(|i| set.component_term(i, config.quad_tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { set, terms, config })
    }

    pub fn set(&self) -> &TreeDensitySet {
        &self.set
    }

    pub fn free_energy(&self) -> f64 {
        self.terms.iter().map(|t| t.total()).sum()
    }

    pub fn report(&self) -> FreeEnergyReport {
        FreeEnergyReport::from_terms(&self.terms)
    }

    pub fn update_component(&mut self, i: usize) -> Result<f64> {
        let new = {
            let frames: Vec<Frame> = (0..self.set.branches.len()).map(|b| self.set.frame(b)).collect();
            let rho = backward_sweep_tree(&frames, &self.set.tree, &self.set.evidence, i, Dynamics::Coupled, &self.config)?;
            forward_sweep_tree(&frames, &self.set.tree, &self.set.evidence, i, Dynamics::Coupled, rho, &self.config)?
        };
        for (b, cd) in new.into_iter().enumerate() {
            self.set.branches[b][i] = FactorDensity::Latent(cd);
        }
        self.terms[i] = self.set.component_term(i, self.config.quad_tol)?;
        for &j in self.set.model.children(i) {
            self.terms[j] = self.set.component_term(j, self.config.quad_tol)?;
        }
        Ok(self.free_energy())
    }
}

#[derive(Debug, Clone)]
pub struct TreeMeanFieldResult {
    pub density: TreeDensitySet,
    pub report: FreeEnergyReport,
    pub trace: MeanFieldTrace,
}

/// Round-robin optimization on a tree; same stopping rule as on intervals.
pub fn run_mean_field_tree(
    model: &CtbnModel,
    tree: &TreeTopology,
    evidence: &TreeEvidence,
    cfg: &MeanFieldConfig,
) -> Result<TreeMeanFieldResult> {
    let model = Arc::new(model.clone());
    let set = initialize_tree(model.clone(), tree, evidence, cfg)?;
    let mut state = TreeMeanFieldState::new(set, *cfg)?;
    let mut trace = MeanFieldTrace {
        initial: state.free_energy(),
        ..Default::default()
    };
    let mut f = trace.initial;
    for sweep in 1..=cfg.max_sweeps {
        let f_start = f;
        for i in 0..model.num_components() {
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
    for b in 0..state.set.branches.len() {
        for i in 0..model.num_components() {
            let cd = state.set.density(b, i);
            if cd.clamp_start.is_some() {
                trace.diagnostics.pre_clamp_gaps.push((i, cd.pre_clamp_gap));
            }
        }
    }
    let report = state.report();
    Ok(TreeMeanFieldResult {
        density: state.set,
        report,
        trace,
    })
}

/// Exact smoothing on a tree for the joint chain.
#[derive(Debug, Clone)]
pub struct TreeOracle {
    pub log_likelihood: f64,
    /// Posterior on each branch in branch-local time.
    pub branches: Vec<ExactPosterior>,
}

/// Pruning on the joint chain: backward messages are multiplied at vertices,
/// forward messages combine the parent branch with sibling messages.
/// `vertex_weights[v]` multiplies the messages at vertex `v` (observations).
pub fn exact_tree_oracle(
    q: &JointRateMatrix,
    tree: &TreeTopology,
    root_prior: &[f64],
    vertex_weights: &[Option<Vec<f64>>],
    cfg: &OracleConfig,
) -> Result<TreeOracle> {
    let n = q.size();
    if root_prior.len() != n || vertex_weights.len() != tree.num_vertices() {
        return Err(Error::InvalidArgument("oracle inputs do not match the joint chain".into()));
    }
    let nb = tree.branches.len();
    let weight = |v: usize| vertex_weights[v].clone().unwrap_or_else(|| vec![1.0; n]);
    // backward
    let mut beta: Vec<Option<PiecewiseSolution>> = vec![None; nb];
    let mut beta0: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 0.0); nb];
    for b in tree.postorder() {
        let br = tree.branch(b);
        let mut w = weight(br.to);
        let mut log = 0.0;
        for &k in tree.outgoing(br.to) {
            w.iter_mut().zip(&beta0[k].0).for_each(|(a, r)| *a *= r);
            log += beta0[k].1;
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroLikelihood);
        }
        let (sol, v, l) = propagate(q, 0.0, br.length, &w, log, true, cfg)?;
        beta[b] = Some(sol);
        beta0[b] = (v, l);
    }
    // likelihood at the root
    let root = tree.root();
    let mut start = root_prior.to_vec();
    let start_log = 0.0;
    let mut z = start.clone();
    let mut z_log = 0.0;
    for &k in tree.outgoing(root) {
        z.iter_mut().zip(&beta0[k].0).for_each(|(a, r)| *a *= r);
        z_log += beta0[k].1;
    }
    let total: f64 = z.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroLikelihood);
    }
    let log_likelihood = total.ln() + z_log;
    // forward
    let mut alpha_end: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 0.0); nb];
    let mut out: Vec<Option<ExactPosterior>> = vec![None; nb];
    for &b in tree.preorder() {
        let br = tree.branch(b);
        let (mut a0, mut log) = match tree.incoming(br.from) {
            None => {
                let v = std::mem::take(&mut start);
                start = v.clone();
                (v, start_log)
            }
            Some(bin) => {
                let mut v = alpha_end[bin].0.clone();
                v.iter_mut().zip(weight(br.from)).for_each(|(a, w)| *a *= w);
                (v, alpha_end[bin].1)
            }
        };
        for &s in tree.outgoing(br.from) {
            if s != b {
                a0.iter_mut().zip(&beta0[s].0).for_each(|(a, r)| *a *= r);
                log += beta0[s].1;
            }
        }
        let (alpha, v, l) = propagate(q, 0.0, br.length, &a0, log, false, cfg)?;
        alpha_end[b] = (v, l);
        out[b] = Some(posterior_from_messages(br.length, log_likelihood, alpha, beta[b].take().unwrap()));
    }
    Ok(TreeOracle {
        log_likelihood,
        branches: out.into_iter().map(|p| p.unwrap()).collect(),
    })
}

/// Joint-chain oracle for a CTBN on a tree with component-wise evidence.
pub fn exact_tree_oracle_for(
    model: &CtbnModel,
    tree: &TreeTopology,
    evidence: &TreeEvidence,
    cfg: &OracleConfig,
) -> Result<(JointRateMatrix, TreeOracle)> {
    evidence.validate(model, tree)?;
    let q = model.amalgamate(cfg.joint_cap)?;
    let space = model.space();
    let n = q.size();
    let d = model.num_components();
    let dists: Vec<Vec<f64>> = (0..d).map(|i| evidence.root[i].distribution(model.card(i))).collect();
    let mut prior = vec![1.0; n];
    let mut weights: Vec<Option<Vec<f64>>> = vec![None; tree.num_vertices()];
    for (x, p) in prior.iter_mut().enumerate() {
        let xs = space.decode(x);
        *p = (0..d).map(|i| dists[i][xs[i]]).product();
    }
    for (v, w) in weights.iter_mut().enumerate() {
        if evidence.vertices[v].iter().all(Option::is_none) {
            continue;
        }
        *w = Some(
            (0..n)
                .map(|x| {
                    let xs = space.decode(x);
                    let ok = (0..d).all(|i| evidence.vertices[v][i].map_or(true, |s| s == xs[i]));
                    if ok {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
    }
    let oracle = exact_tree_oracle(&q, tree, &prior, &weights, cfg)?;
    Ok((q, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Evidence, StateSpace};
    use crate::oracle::{exact_posterior_for, OracleConfig};

    fn star() -> TreeTopology {
        let names = ["r", "a", "b"].iter().map(|s| s.to_string()).collect();
        TreeTopology::new(
            names,
            vec![
                Branch { from: 0, to: 1, length: 0.7 },
                Branch { from: 0, to: 2, length: 1.3 },
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn topology_checks() {
        let t = star();
        assert_eq!(t.leaves(), vec![1, 2]);
        assert_eq!(t.path_to(2), vec![1]);
        let names: Vec<String> = ["r", "a"].iter().map(|s| s.to_string()).collect();
        assert!(TreeTopology::new(names.clone(), vec![Branch { from: 0, to: 1, length: 0.0 }], 0).is_err());
        assert!(TreeTopology::new(names, vec![Branch { from: 1, to: 0, length: 1.0 }], 0).is_err());
    }

    #[test]
    fn path_tree_oracle_matches_interval() {
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into(), "2".into()]]).unwrap();
        let m = CtbnModel::new(space, vec![vec![]], vec![vec![-1.0, 0.6, 0.4, 0.3, -0.5, 0.2, 1.0, 1.0, -2.0]]).unwrap();
        let tree = TreeTopology::path(&[0.4, 0.6]).unwrap();
        let ev = TreeEvidence {
            root: vec![StartCondition::State(0)],
            vertices: vec![vec![None], vec![None], vec![Some(2)]],
        };
        let cfg = OracleConfig::default();
        let (_, tor) = exact_tree_oracle_for(&m, &tree, &ev, &cfg).unwrap();
        let (_, post) = exact_posterior_for(&m, &Evidence::endpoints(1.0, &[0], &[2]), &cfg).unwrap();
        assert!((tor.log_likelihood - post.log_likelihood()).abs() < 1e-9);
        let p_tree = tor.branches[1].posterior_at(0.3).unwrap();
        let p_int = post.posterior_at(0.7).unwrap();
        for (a, b) in p_tree.iter().zip(&p_int) {
            assert!((a - b).abs() < 1e-8);
        }
        for b in &tor.branches {
            for &t in &[0.0, 0.2, 0.4] {
                assert!((b.log_normalizer_at(t) - tor.log_likelihood).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn star_with_one_observed_leaf_matches_path() {
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        let m = CtbnModel::new(space, vec![vec![]], vec![vec![-1.0, 1.0, 2.0, -2.0]]).unwrap();
        let ev = TreeEvidence {
            root: vec![StartCondition::State(0)],
            vertices: vec![vec![None], vec![Some(1)], vec![None]],
        };
        let cfg = OracleConfig::default();
        let (_, tor) = exact_tree_oracle_for(&m, &star(), &ev, &cfg).unwrap();
        let (_, post) = exact_posterior_for(&m, &Evidence::endpoints(0.7, &[0], &[1]), &cfg).unwrap();
        assert!((tor.log_likelihood - post.log_likelihood()).abs() < 1e-9);
    }

    #[test]
    fn single_component_star_is_exact() {
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        let m = CtbnModel::new(space, vec![vec![]], vec![vec![-1.0, 1.0, 2.0, -2.0]]).unwrap();
        let ev = TreeEvidence {
            root: vec![StartCondition::Prior(vec![0.3, 0.7])],
            vertices: vec![vec![None], vec![Some(1)], vec![Some(0)]],
        };
        let cfg = MeanFieldConfig {
            root_mode: RootMode::Reweighted,
            integrator: crate::ode::IntegratorConfig::with_tolerances(1e-9, 1e-13),
            ..Default::default()
        };
        let res = run_mean_field_tree(&m, &star(), &ev, &cfg).unwrap();
        let (_, tor) = exact_tree_oracle_for(&m, &star(), &ev, &OracleConfig::default()).unwrap();
        assert!((res.report.total - tor.log_likelihood).abs() < 1e-5, "{} vs {}", res.report.total, tor.log_likelihood);
        for b in 0..2 {
            let cd = res.density.density(b, 0);
            for k in 0..=10 {
                let t = cd.horizon * k as f64 / 10.0;
                let p = tor.branches[b].posterior_at(t).unwrap();
                assert!((cd.mu_at(t)[0] - p[0]).abs() < 1e-4);
            }
        }
        assert!(res.density.vertex_consistency(1e-6).is_empty(), "{:?}", res.density.vertex_consistency(1e-6));
    }
}
