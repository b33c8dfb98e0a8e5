//! Exact inference on the amalgamated joint process for small models.
//!
//! The forward quantity `alpha(t)` solves `d alpha/dt = alpha Q` from the start
//! distribution and the backward quantity `beta(t)` solves
//! `d beta/dt = -Q beta` from the end weights. Both are renormalized whenever
//! they leave `[1/threshold, threshold]`, with the log-scale kept alongside.
//! Fully observed components split the horizon into segments on which the
//! chain is restricted to states agreeing with the observed path; observed
//! jumps multiply by the corresponding rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{indicator, CtbnModel, Evidence, JointRateMatrix};
use crate::ode::{integrate_renormalized, quadrature_vec, IntegratorConfig, OdeSolution, PiecewiseSolution};
use crate::stats::ModelStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub integrator: IntegratorConfig,
    pub quad_tol: f64,
    pub renorm_threshold: f64,
    pub joint_cap: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig::with_tolerances(1e-10, 1e-15),
            quad_tol: 1e-8,
            renorm_threshold: 1e100,
            joint_cap: crate::model::DEFAULT_JOINT_CAP,
        }
    }
}

/// A jump of an observed component, in joint-state terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedJump {
    pub time: f64,
    pub component: usize,
    pub from: usize,
    pub to: usize,
}

/// Evidence lifted to the joint state space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEvidence {
    pub horizon: f64,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Segment boundaries `0 = b_0 < ... < b_m = horizon`.
    pub breaks: Vec<f64>,
    /// Allowed joint states per segment (`None` = all).
    pub masks: Vec<Option<Vec<bool>>>,
    /// Jumps at `breaks[1..m]`, one per interior boundary.
    pub jumps: Vec<ObservedJump>,
    /// Strides of the joint encoding, needed to apply jumps.
    pub strides: Vec<usize>,
}

impl JointEvidence {
    /// Start at `e0`, end at `eT`, nothing in between.
    pub fn endpoints(n: usize, e0: usize, e_t: usize, horizon: f64) -> Self {
        Self {
            horizon,
            start: indicator(n, e0),
            end: indicator(n, e_t),
            breaks: vec![0.0, horizon],
            masks: vec![None],
            jumps: Vec::new(),
            strides: Vec::new(),
        }
    }

    pub fn from_evidence(model: &CtbnModel, evidence: &Evidence, cap: usize) -> Result<Self> {
        evidence.validate(model)?;
        let space = model.space();
        let n = space.joint_size(cap)?;
        let d = model.num_components();
        let mut start = vec![1.0; n];
        let mut end = vec![1.0; n];
        for x in 0..n {
            let xs = space.decode(x);
            for (i, ev) in evidence.components.iter().enumerate() {
                start[x] *= ev.start.distribution(model.card(i))[xs[i]];
                let end_state = ev.trajectory.as_ref().map(|p| p.final_state()).or(ev.end);
                if let Some(e) = end_state {
                    if xs[i] != e {
                        end[x] = 0.0;
                    }
                }
            }
        }

        let mut jumps: Vec<ObservedJump> = Vec::new();
        for (i, ev) in evidence.components.iter().enumerate() {
            if let Some(path) = &ev.trajectory {
                for (t, from, to) in path.jumps() {
                    jumps.push(ObservedJump {
                        time: t,
                        component: i,
                        from,
                        to,
                    });
                }
            }
        }
        jumps.sort_by(|a, b| a.time.total_cmp(&b.time));
        if jumps.windows(2).any(|w| w[0].time == w[1].time) {
            return Err(Error::InvalidEvidence("simultaneous observed jumps".into()));
        }
        let mut breaks = vec![0.0];
        breaks.extend(jumps.iter().map(|j| j.time));
        breaks.push(evidence.horizon);

        let observed: Vec<usize> = (0..d).filter(|&i| evidence.components[i].trajectory.is_some()).collect();
        let masks = breaks
            .windows(2)
            .map(|w| {
                if observed.is_empty() {
                    return None;
                }
                let mid = 0.5 * (w[0] + w[1]);
                let states: Vec<(usize, usize)> = observed
                    .iter()
                    .map(|&i| (i, evidence.components[i].trajectory.as_ref().unwrap().state_at(mid)))
                    .collect();
                Some(
                    (0..n)
                        .map(|x| {
                            let xs = space.decode(x);
                            states.iter().all(|&(i, s)| xs[i] == s)
                        })
                        .collect(),
                )
            })
            .collect();
        Ok(Self {
            horizon: evidence.horizon,
            start,
            end,
            breaks,
            masks,
            jumps,
            strides: space.strides(),
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Sweep {
    Forward,
    Backward,
}

/// Integrates the (masked) master equation over one segment with
/// renormalization, appending pieces in integration order.
#[allow(clippy::too_many_arguments)]
fn propagate_segment(
    q: &JointRateMatrix,
    mask: Option<&[bool]>,
    t0: f64,
    t1: f64,
    v0: &[f64],
    log0: f64,
    sweep: Sweep,
    cfg: &OracleConfig,
    pieces: &mut Vec<OdeSolution>,
    scales: &mut Vec<f64>,
) -> Result<(Vec<f64>, f64)> {
    let mut v = v0.to_vec();
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, &ok)| {
            if !ok {
                *x = 0.0
            }
        });
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroLikelihood);
    }
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        match sweep {
            Sweep::Forward => q.left_mul(y, dy),
            Sweep::Backward => {
                q.right_mul(y, dy);
                dy.iter_mut().for_each(|x| *x = -*x);
            }
        }
        if let Some(m) = mask {
            dy.iter_mut().zip(m).for_each(|(x, &ok)| {
                if !ok {
                    *x = 0.0
                }
            });
        }
    };
    let (v, log) = integrate_renormalized(rhs, t0, t1, &v, log0, cfg.renorm_threshold, &cfg.integrator, pieces, scales)?;
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroLikelihood);
    }
    Ok((v, log))
}

/// Applies an observed jump to a forward vector: mass at `x` (component in
/// `from`) moves to `y` (component in `to`) weighted by `q_{x,y}`.
fn jump_forward(q: &JointRateMatrix, jump: &ObservedJump, strides: &[usize], card: usize, v: &[f64]) -> Vec<f64> {
    let stride = strides[jump.component];
    let mut out = vec![0.0; v.len()];
    for (x, &vx) in v.iter().enumerate() {
        if vx == 0.0 || (x / stride) % card != jump.from {
            continue;
        }
        let y = x - jump.from * stride + jump.to * stride;
        out[y] = vx * q.get(x, y);
    }
    out
}

fn jump_backward(q: &JointRateMatrix, jump: &ObservedJump, strides: &[usize], card: usize, v: &[f64]) -> Vec<f64> {
    let stride = strides[jump.component];
    let mut out = vec![0.0; v.len()];
    for (x, o) in out.iter_mut().enumerate() {
        if (x / stride) % card != jump.from {
            continue;
        }
        let y = x - jump.from * stride + jump.to * stride;
        *o = q.get(x, y) * v[y];
    }
    out
}

/// Smoothing solution for one evidence set on the joint chain.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    horizon: f64,
    log_likelihood: f64,
    alpha: PiecewiseSolution,
    beta: PiecewiseSolution,
    breaks: Vec<f64>,
    masks: Vec<Option<Vec<bool>>>,
    jumps: Vec<ObservedJump>,
    jump_cards: Vec<usize>,
    strides: Vec<usize>,
}

impl ExactPosterior {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn alpha(&self) -> &PiecewiseSolution {
        &self.alpha
    }

    pub fn beta(&self) -> &PiecewiseSolution {
        &self.beta
    }

    /// `ln sum_x alpha_x(t) beta_x(t)` including log-scales; equals the
    /// log-likelihood for every `t`.
    pub fn log_normalizer_at(&self, t: f64) -> f64 {
        let n = self.alpha.dim();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let la = self.alpha.eval_into(t, &mut a);
        let lb = self.beta.eval_into(t, &mut b);
        let s: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        s.ln() + la + lb
    }

    fn posterior_into(&self, t: f64, a: &mut [f64], b: &mut [f64], out: &mut [f64]) {
        self.alpha.eval_into(t, a);
        self.beta.eval_into(t, b);
        let mut s = 0.0;
        for x in 0..out.len() {
            out[x] = (a[x] * b[x]).max(0.0);
            s += out[x];
        }
        out.iter_mut().for_each(|v| *v /= s);
    }

    /// `Pr(X(t) = x | evidence)` for every joint state.
    pub fn posterior_at(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= -1e-12 && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::OutsideSpan {
                t,
                start: 0.0,
                end: self.horizon,
            });
        }
        let n = self.alpha.dim();
        let (mut a, mut b, mut out) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        self.posterior_into(t.clamp(0.0, self.horizon), &mut a, &mut b, &mut out);
        Ok(out)
    }

    /// Expected occupancy times and transition counts over the horizon.
    pub fn sufficient_stats(&self, q: &JointRateMatrix, tol: f64) -> Result<SufficientStats> {
        let n = q.size();
        let mut edges: Vec<(usize, usize, f64)> = Vec::new();
        for x in 0..n {
            for (y, r) in q.row(x) {
                edges.push((x, y, r));
            }
        }
        let dim = n + edges.len();
        let mut time = vec![0.0; n];
        let mut trans = vec![0.0; edges.len()];
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for (seg, w) in self.breaks.windows(2).enumerate() {
            let mask = self.masks[seg].as_deref();
            let mid = 0.5 * (w[0] + w[1]);
            let ap = self.alpha.piece_index(mid);
            let bp = self.beta.piece_index(mid);
            // split at every renormalization boundary inside the segment
            let mut cuts: Vec<f64> = vec![w[0], w[1]];
            cuts.extend(self.alpha.boundaries().into_iter().filter(|&s| s > w[0] && s < w[1]));
            cuts.extend(self.beta.boundaries().into_iter().filter(|&s| s > w[0] && s < w[1]));
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            let _ = (ap, bp);
            let quad = quadrature_vec(
                |t, out| {
                    self.alpha.eval_into(t, &mut a);
                    self.beta.eval_into(t, &mut b);
                    let z: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    for x in 0..n {
                        out[x] = a[x] * b[x] / z;
                    }
                    for (k, &(x, y, r)) in edges.iter().enumerate() {
                        let allowed = mask.map(|m| m[x] && m[y]).unwrap_or(true);
                        out[n + k] = if allowed { a[x] * r * b[y] / z } else { 0.0 };
                    }
                },
                dim,
                &cuts,
                tol,
            )?;
            for x in 0..n {
                time[x] += quad.values[x];
            }
            for k in 0..edges.len() {
                trans[k] += quad.values[n + k];
            }
        }
        // observed jumps contribute one transition each, split by the
        // posterior over the joint state just before the jump
        for jump in &self.jumps {
            let s = jump.time;
            let kb = self.beta.piece_index(s);
            let ka = self.alpha.piece_index(s).saturating_sub(0);
            // left limit of alpha: the piece that ends at s
            let ka_left = if self.alpha.pieces()[ka].start() == s && ka > 0 { ka - 1 } else { ka };
            self.alpha.eval_piece_into(ka_left, s, &mut a);
            self.beta.eval_piece_into(kb, s, &mut b);
            let stride = self.strides[jump.component];
            let card = self.jump_cards[jump.component];
            let mut w = Vec::new();
            let mut z = 0.0;
            for (k, &(x, y, r)) in edges.iter().enumerate() {
                if (x / stride) % card == jump.from && y == x - jump.from * stride + jump.to * stride {
                    let v = a[x] * r * b[y];
                    z += v;
                    w.push((k, v));
                }
            }
            for (k, v) in w {
                trans[k] += v / z;
            }
        }
        Ok(SufficientStats {
            horizon: self.horizon,
            time,
            transitions: edges.iter().zip(trans).map(|(&(x, y, _), m)| (x, y, m)).collect(),
        })
    }
}

/// Joint-state expected sufficient statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub horizon: f64,
    /// `E[T_x]` per joint state.
    pub time: Vec<f64>,
    /// `E[M_{x,y}]` for every nonzero-rate transition.
    pub transitions: Vec<(usize, usize, f64)>,
}

impl SufficientStats {
    pub fn transition(&self, x: usize, y: usize) -> f64 {
        self.transitions
            .iter()
            .find(|&&(a, b, _)| a == x && b == y)
            .map(|t| t.2)
            .unwrap_or(0.0)
    }

    /// Projects joint statistics onto each component's family statistics.
    pub fn project(&self, model: &CtbnModel) -> ModelStats {
        let space = model.space();
        let mut out = ModelStats::zeros(model);
        let d = model.num_components();
        let mut pstates = Vec::new();
        let family_index = |xs: &[usize], i: usize, pstates: &mut Vec<usize>| {
            let cim = model.cim(i);
            pstates.clear();
            pstates.extend(cim.parents().iter().map(|&p| xs[p]));
            cim.instantiation_index(pstates)
        };
        for (x, &tx) in self.time.iter().enumerate() {
            let xs = space.decode(x);
            for i in 0..d {
                let u = family_index(&xs, i, &mut pstates);
                let c = model.card(i);
                out.families[i].time[u * c + xs[i]] += tx;
            }
        }
        for &(x, y, m) in &self.transitions {
            let xs = space.decode(x);
            let ys = space.decode(y);
            let Some(i) = (0..d).find(|&i| xs[i] != ys[i]) else { continue };
            let u = family_index(&xs, i, &mut pstates);
            let c = model.card(i);
            out.families[i].transitions[(u * c + xs[i]) * c + ys[i]] += m;
        }
        out
    }
}

/// Smoothing on the joint chain for general (lifted) evidence.
pub fn exact_posterior(q: &JointRateMatrix, ev: &JointEvidence, cfg: &OracleConfig) -> Result<ExactPosterior> {
    exact_posterior_with_cards(q, ev, &[], cfg)
}

fn exact_posterior_with_cards(
    q: &JointRateMatrix,
    ev: &JointEvidence,
    cards: &[usize],
    cfg: &OracleConfig,
) -> Result<ExactPosterior> {
    let n = q.size();
    if ev.start.len() != n || ev.end.len() != n {
        return Err(Error::InvalidArgument("evidence vectors must match the joint size".into()));
    }
    if !(ev.horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let m = ev.breaks.len() - 1;
    if !ev.jumps.is_empty() && cards.is_empty() {
        return Err(Error::InvalidArgument("observed jumps need component cardinalities".into()));
    }

    // forward
    let mut a_pieces = Vec::new();
    let mut a_scales = Vec::new();
    let mut v = ev.start.clone();
    let mut log = 0.0;
    for seg in 0..m {
        let (t0, t1) = (ev.breaks[seg], ev.breaks[seg + 1]);
        let (vf, lf) = propagate_segment(
            q,
            ev.masks[seg].as_deref(),
            t0,
            t1,
            &v,
            log,
            Sweep::Forward,
            cfg,
            &mut a_pieces,
            &mut a_scales,
        )?;
        v = vf;
        log = lf;
        if seg + 1 < m {
            let jump = &ev.jumps[seg];
            v = jump_forward(q, jump, &ev.strides, cards[jump.component], &v);
        }
    }
    let final_mass: f64 = v.iter().zip(&ev.end).map(|(a, e)| a * e).sum();
    if !(final_mass > 0.0) {
        return Err(Error::ZeroLikelihood);
    }
    let log_likelihood = final_mass.ln() + log;

    // backward
    let mut b_pieces = Vec::new();
    let mut b_scales = Vec::new();
    let mut v = ev.end.clone();
    let mut log = 0.0;
    for seg in (0..m).rev() {
        let (t0, t1) = (ev.breaks[seg], ev.breaks[seg + 1]);
        let (vb, lb) = propagate_segment(
            q,
            ev.masks[seg].as_deref(),
            t1,
            t0,
            &v,
            log,
            Sweep::Backward,
            cfg,
            &mut b_pieces,
            &mut b_scales,
        )?;
        v = vb;
        log = lb;
        if seg > 0 {
            let jump = &ev.jumps[seg - 1];
            v = jump_backward(q, jump, &ev.strides, cards[jump.component], &v);
        }
    }

    Ok(ExactPosterior {
        horizon: ev.horizon,
        log_likelihood,
        alpha: PiecewiseSolution::new(a_pieces, a_scales)?,
        beta: PiecewiseSolution::from_descending(b_pieces, b_scales),
        breaks: ev.breaks.clone(),
        masks: ev.masks.clone(),
        jumps: ev.jumps.clone(),
        jump_cards: cards.to_vec(),
        strides: ev.strides.clone(),
    })
}

/// Exact posterior of a CTBN under component-wise evidence.
pub fn exact_posterior_for(model: &CtbnModel, evidence: &Evidence, cfg: &OracleConfig) -> Result<(JointRateMatrix, ExactPosterior)> {
    let q = model.amalgamate(cfg.joint_cap)?;
    let ev = JointEvidence::from_evidence(model, evidence, cfg.joint_cap)?;
    let cards = model.space().cards();
    let post = exact_posterior_with_cards(&q, &ev, &cards, cfg)?;
    Ok((q, post))
}

/// `ln [exp(T Q)]_{e0, eT}`.
pub fn exact_log_likelihood(q: &JointRateMatrix, e0: usize, e_t: usize, horizon: f64, cfg: &OracleConfig) -> Result<f64> {
    if e0 >= q.size() || e_t >= q.size() {
        return Err(Error::OutOfRange("joint state".into()));
    }
    let ev = JointEvidence::endpoints(q.size(), e0, e_t, horizon);
    Ok(exact_posterior(q, &ev, cfg)?.log_likelihood())
}

/// Posterior joint distributions at the requested times.
pub fn exact_posterior_marginals(
    q: &JointRateMatrix,
    e0: usize,
    e_t: usize,
    horizon: f64,
    times: &[f64],
    cfg: &OracleConfig,
) -> Result<Vec<Vec<f64>>> {
    let ev = JointEvidence::endpoints(q.size(), e0, e_t, horizon);
    let post = exact_posterior(q, &ev, cfg)?;
    times.iter().map(|&t| post.posterior_at(t)).collect()
}

/// Expected sufficient statistics under endpoint evidence.
pub fn exact_sufficient_stats(
    q: &JointRateMatrix,
    e0: usize,
    e_t: usize,
    horizon: f64,
    cfg: &OracleConfig,
) -> Result<SufficientStats> {
    let ev = JointEvidence::endpoints(q.size(), e0, e_t, horizon);
    exact_posterior(q, &ev, cfg)?.sufficient_stats(q, cfg.quad_tol)
}

/// Marginal distribution of component `i` from a joint distribution.
pub fn project_component_marginal(model: &CtbnModel, joint: &[f64], i: usize) -> Vec<f64> {
    model.space().project_marginal(joint, i)
}

/// Unmasked propagation over `[t0, t1]` starting from `v0 * exp(log0)`
/// (at `t1` when `backward`).
pub(crate) fn propagate(
    q: &JointRateMatrix,
    t0: f64,
    t1: f64,
    v0: &[f64],
    log0: f64,
    backward: bool,
    cfg: &OracleConfig,
) -> Result<(PiecewiseSolution, Vec<f64>, f64)> {
    let mut pieces = Vec::new();
    let mut scales = Vec::new();
    let sweep = if backward { Sweep::Backward } else { Sweep::Forward };
    let (v, log) = if backward {
        propagate_segment(q, None, t1, t0, v0, log0, sweep, cfg, &mut pieces, &mut scales)?
    } else {
        propagate_segment(q, None, t0, t1, v0, log0, sweep, cfg, &mut pieces, &mut scales)?
    };
    let sol = if backward {
        PiecewiseSolution::from_descending(pieces, scales)
    } else {
        PiecewiseSolution::new(pieces, scales)?
    };
    Ok((sol, v, log))
}

/// Builds an [`ExactPosterior`] from already-propagated messages on one
/// interval (tree branches).
pub(crate) fn posterior_from_messages(
    horizon: f64,
    log_likelihood: f64,
    alpha: PiecewiseSolution,
    beta: PiecewiseSolution,
) -> ExactPosterior {
    ExactPosterior {
        horizon,
        log_likelihood,
        alpha,
        beta,
        breaks: vec![0.0, horizon],
        masks: vec![None],
        jumps: Vec::new(),
        jump_cards: Vec::new(),
        strides: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ising_chain, ComponentEvidence, StartCondition, StateSpace, StatePath};

    fn sym2() -> JointRateMatrix {
        JointRateMatrix::from_dense(2, &[-1.0, 1.0, 1.0, -1.0]).unwrap()
    }

    #[test]
    fn two_state_log_likelihood() {
        let l = exact_log_likelihood(&sym2(), 0, 0, 1.0, &OracleConfig::default()).unwrap();
        let expect = ((1.0 + (-2.0f64).exp()) / 2.0).ln();
        assert!((l - expect).abs() < 1e-9, "{l} vs {expect}");
    }

    #[test]
    fn tiny_horizon_is_certain() {
        let l = exact_log_likelihood(&sym2(), 1, 1, 1e-8, &OracleConfig::default()).unwrap();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn boundary_posteriors_are_indicators() {
        let m = build_ising_chain(2, 1.0, 1.0).unwrap();
        let q = m.amalgamate(4096).unwrap();
        let e0 = m.space().encode(&[0, 1]);
        let e_t = m.space().encode(&[1, 0]);
        let p = exact_posterior_marginals(&q, e0, e_t, 1.0, &[0.0, 1.0], &OracleConfig::default()).unwrap();
        assert!((p[0][e0] - 1.0).abs() < 1e-12);
        assert!((p[1][e_t] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn antisymmetric_ising_midpoint_is_half() {
        let m = build_ising_chain(2, 1.0, 1.0).unwrap();
        let q = m.amalgamate(4096).unwrap();
        let e0 = m.space().encode(&[0, 1]);
        let e_t = m.space().encode(&[1, 0]);
        let p = exact_posterior_marginals(&q, e0, e_t, 1.0, &[0.5], &OracleConfig::default()).unwrap();
        let m0 = project_component_marginal(&m, &p[0], 0);
        assert!((m0[1] - 0.5).abs() < 1e-8, "{m0:?}");
    }

    #[test]
    fn symmetric_chain_midpoint() {
        // alpha(0.5) = beta(0.5) for e0 = eT = 0, so posterior = a^2 / sum a^2
        let p = exact_posterior_marginals(&sym2(), 0, 0, 1.0, &[0.5], &OracleConfig::default()).unwrap();
        let e = (-1.0f64).exp();
        let (a0, a1) = ((1.0 + e) / 2.0, (1.0 - e) / 2.0);
        let expect = a0 * a0 / (a0 * a0 + a1 * a1);
        assert!((p[0][0] - expect).abs() < 1e-8, "{} vs {expect}", p[0][0]);
    }

    #[test]
    fn stats_conserve_time_and_reverse_symmetry() {
        let cfg = OracleConfig::default();
        let s = exact_sufficient_stats(&sym2(), 0, 0, 1.0, &cfg).unwrap();
        assert!((s.time.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!((s.transition(0, 1) - s.transition(1, 0)).abs() < 1e-8);
    }

    #[test]
    fn likelihood_is_time_invariant() {
        let m = build_ising_chain(3, 1.0, 2.0).unwrap();
        let q = m.amalgamate(4096).unwrap();
        let ev = JointEvidence::endpoints(8, 1, 6, 0.8);
        let post = exact_posterior(&q, &ev, &OracleConfig::default()).unwrap();
        for &t in &[0.0, 0.1, 0.4, 0.79, 0.8] {
            let l = post.log_normalizer_at(t);
            assert!((l - post.log_likelihood()).abs() < 1e-6 * post.log_likelihood().abs().max(1.0));
        }
    }

    #[test]
    fn prior_and_free_end() {
        // unobserved end: likelihood 1
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        let m = CtbnModel::new(space, vec![vec![]], vec![vec![-1.0, 1.0, 2.0, -2.0]]).unwrap();
        let ev = Evidence {
            horizon: 1.0,
            components: vec![ComponentEvidence {
                start: StartCondition::Prior(vec![0.25, 0.75]),
                end: None,
                trajectory: None,
            }],
        };
        let (_, post) = exact_posterior_for(&m, &ev, &OracleConfig::default()).unwrap();
        assert!(post.log_likelihood().abs() < 1e-9);
    }

    #[test]
    fn fully_observed_single_component_density() {
        // a fully observed 2-state path has density prod q * exp(int q_xx)
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        let m = CtbnModel::new(space, vec![vec![]], vec![vec![-1.0, 1.0, 2.0, -2.0]]).unwrap();
        let path = StatePath::new(vec![0.0, 0.3, 0.7], vec![0, 1, 0]).unwrap();
        let ev = Evidence {
            horizon: 1.0,
            components: vec![ComponentEvidence {
                start: StartCondition::State(0),
                end: Some(0),
                trajectory: Some(path),
            }],
        };
        let (q, post) = exact_posterior_for(&m, &ev, &OracleConfig::default()).unwrap();
        let expect = 1.0f64.ln() + 2.0f64.ln() - 1.0 * 0.3 - 2.0 * 0.4 - 1.0 * 0.3;
        assert!((post.log_likelihood() - expect).abs() < 1e-9);
        let stats = post.sufficient_stats(&q, 1e-10).unwrap();
        assert!((stats.time[0] - 0.6).abs() < 1e-8);
        assert!((stats.transition(0, 1) - 1.0).abs() < 1e-12);
        assert!((stats.transition(1, 0) - 1.0).abs() < 1e-12);
    }
}
