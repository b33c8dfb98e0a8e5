//! CTBN representation: state spaces, conditional rate matrices, evidence,
//! validation and amalgamation into the joint rate matrix.
//!
//! Joint states are enumerated in mixed radix with component 0 most
//! significant. Parent instantiations use the same convention over the
//! ascending parent list.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of joint states the exact machinery accepts.
pub const DEFAULT_JOINT_CAP: usize = 4096;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    names: Vec<String>,
    labels: Vec<Vec<String>>,
}

impl StateSpace {
    pub fn new(names: Vec<String>, labels: Vec<Vec<String>>) -> Result<Self> {
        if names.len() != labels.len() {
            return Err(Error::InvalidModel("one label list per component required".into()));
        }
        if names.is_empty() {
            return Err(Error::InvalidModel("model has no components".into()));
        }
        Ok(Self { names, labels })
    }

    pub fn num_components(&self) -> usize {
        self.names.len()
    }

    pub fn card(&self, i: usize) -> usize {
        self.labels[i].len()
    }

    pub fn cards(&self) -> Vec<usize> {
        self.labels.iter().map(Vec::len).collect()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn labels(&self, i: usize) -> &[String] {
        &self.labels[i]
    }

    pub fn component_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn state_index(&self, i: usize, label: &str) -> Option<usize> {
        self.labels[i].iter().position(|l| l == label)
    }

    /// Number of joint states, computed without overflow.
    pub fn joint_size_u128(&self) -> u128 {
        self.labels
            .iter()
            .try_fold(1u128, |acc, l| acc.checked_mul(l.len() as u128))
            .unwrap_or(u128::MAX)
    }

    /// Number of joint states, or an error if it exceeds `cap`.
    pub fn joint_size(&self, cap: usize) -> Result<usize> {
        let n = self.joint_size_u128();
        if n > cap as u128 {
            return Err(Error::StateSpaceTooLarge { states: n, cap });
        }
        Ok(n as usize)
    }

    /// Mixed-radix strides, component 0 most significant.
    pub fn strides(&self) -> Vec<usize> {
        let d = self.num_components();
        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1].saturating_mul(self.card(i + 1));
        }
        strides
    }

    pub fn encode(&self, states: &[usize]) -> usize {
        let strides = self.strides();
        states.iter().zip(&strides).map(|(s, st)| s * st).sum()
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let d = self.num_components();
        let mut out = vec![0; d];
        for i in (0..d).rev() {
            let c = self.card(i);
            out[i] = index % c;
            index /= c;
        }
        out
    }

    /// Sums a normalized joint vector over all states agreeing on component
    /// `i`.
    pub fn project_marginal(&self, joint: &[f64], i: usize) -> Vec<f64> {
        let strides = self.strides();
        let card = self.card(i);
        let mut out = vec![0.0; card];
        for (x, p) in joint.iter().enumerate() {
            out[(x / strides[i]) % card] += p;
        }
        out
    }
}

/// Rate matrices of one component, one per parent instantiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRates {
    component: usize,
    card: usize,
    parents: Vec<usize>,
    parent_cards: Vec<usize>,
    /// Row-major `card x card` blocks, one per instantiation.
    tables: Vec<f64>,
}

impl ConditionalRates {
    pub fn component(&self) -> usize {
        self.component
    }

    pub fn card(&self) -> usize {
        self.card
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn parent_cards(&self) -> &[usize] {
        &self.parent_cards
    }

    pub fn num_instantiations(&self) -> usize {
        self.parent_cards.iter().product()
    }

    pub fn matrix(&self, u: usize) -> &[f64] {
        let n = self.card * self.card;
        &self.tables[u * n..(u + 1) * n]
    }

    pub fn tables(&self) -> &[f64] {
        &self.tables
    }

    #[inline]
    pub fn rate(&self, x: usize, y: usize, u: usize) -> f64 {
        self.tables[(u * self.card + x) * self.card + y]
    }

    /// Instantiation index for parent states listed in ascending parent order.
    pub fn instantiation_index(&self, parent_states: &[usize]) -> usize {
        parent_states
            .iter()
            .zip(&self.parent_cards)
            .fold(0, |acc, (s, c)| acc * c + s)
    }

    pub fn decode_instantiation(&self, mut u: usize) -> Vec<usize> {
        let mut out = vec![0; self.parents.len()];
        for k in (0..self.parents.len()).rev() {
            out[k] = u % self.parent_cards[k];
            u /= self.parent_cards[k];
        }
        out
    }
}

/// One invariant violation found by [`CtbnModel::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub component: usize,
    pub instantiation: Option<usize>,
    pub entry: Option<(usize, usize)>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "component {}", self.component)?;
        if let Some(u) = self.instantiation {
            write!(f, ", parent instantiation {u}")?;
        }
        if let Some((x, y)) = self.entry {
            write!(f, ", entry ({x},{y})")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtbnModel {
    space: StateSpace,
    cims: Vec<ConditionalRates>,
    children: Vec<Vec<usize>>,
    ln_tables: Vec<Vec<f64>>,
}

impl CtbnModel {
    /// Assembles a model. `parents[i]` is sorted and deduplicated; `tables[i]`
    /// holds one row-major matrix per instantiation of the sorted parent set.
    /// Rate-level invariants are not enforced here; see [`Self::validate`].
    pub fn new(space: StateSpace, parents: Vec<Vec<usize>>, tables: Vec<Vec<f64>>) -> Result<Self> {
        let d = space.num_components();
        if parents.len() != d || tables.len() != d {
            return Err(Error::InvalidModel("parents and tables must cover every component".into()));
        }
        let mut cims = Vec::with_capacity(d);
        for (i, (mut pa, table)) in parents.into_iter().zip(tables).enumerate() {
            pa.sort_unstable();
            pa.dedup();
            if let Some(&p) = pa.iter().find(|&&p| p >= d) {
                return Err(Error::OutOfRange(format!("parent {p} of component {i}")));
            }
            let parent_cards: Vec<usize> = pa.iter().map(|&p| space.card(p)).collect();
            let n_inst = parent_cards
                .iter()
                .try_fold(1usize, |acc, &c| acc.checked_mul(c))
                .ok_or_else(|| Error::InvalidModel(format!("component {i}: too many parent states")))?;
            let card = space.card(i);
            if table.len() != n_inst * card * card {
                return Err(Error::InvalidModel(format!(
                    "component {i}: expected {} rate entries, found {}",
                    n_inst * card * card,
                    table.len()
                )));
            }
            cims.push(ConditionalRates {
                component: i,
                card,
                parents: pa,
                parent_cards,
                tables: table,
            });
        }
        let mut children = vec![Vec::new(); d];
        for cim in &cims {
            for &p in &cim.parents {
                if p != cim.component {
                    children[p].push(cim.component);
                }
            }
        }
        let ln_tables = cims
            .iter()
            .map(|c| c.tables.iter().map(|&q| if q > 0.0 { q.ln() } else { f64::NEG_INFINITY }).collect())
            .collect();
        Ok(Self {
            space,
            cims,
            children,
            ln_tables,
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn num_components(&self) -> usize {
        self.space.num_components()
    }

    pub fn card(&self, i: usize) -> usize {
        self.space.card(i)
    }

    pub fn cim(&self, i: usize) -> &ConditionalRates {
        &self.cims[i]
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.cims[i].parents
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// Natural log of every stored rate (`-inf` for zero rates).
    pub(crate) fn ln_table(&self, i: usize) -> &[f64] {
        &self.ln_tables[i]
    }

    /// Largest absolute rate in component `i`'s tables.
    pub fn max_rate(&self, i: usize) -> f64 {
        self.cims[i].tables.iter().fold(0.0f64, |m, q| m.max(q.abs()))
    }

    /// Rate of component `i` moving from `x` to `y` under parent states `u`
    /// (ascending parent order). The diagonal is the negative off-diagonal
    /// row sum.
    pub fn conditional_rate(&self, i: usize, x: usize, y: usize, u: &[usize]) -> Result<f64> {
        let d = self.num_components();
        if i >= d {
            return Err(Error::OutOfRange(format!("component {i} of {d}")));
        }
        let cim = &self.cims[i];
        if x >= cim.card || y >= cim.card {
            return Err(Error::OutOfRange(format!("state ({x},{y}) of component {i}")));
        }
        if u.len() != cim.parents.len() {
            return Err(Error::InvalidArgument(format!(
                "component {i} has {} parents, got instantiation of arity {}",
                cim.parents.len(),
                u.len()
            )));
        }
        if let Some((k, _)) = u.iter().zip(&cim.parent_cards).enumerate().find(|(_, (s, c))| s >= c) {
            return Err(Error::OutOfRange(format!("parent state at position {k}")));
        }
        let ui = cim.instantiation_index(u);
        if x == y {
            Ok(-(0..cim.card).filter(|&z| z != x).map(|z| cim.rate(x, z, ui)).sum::<f64>())
        } else {
            Ok(cim.rate(x, y, ui))
        }
    }

    /// Checks every structural and rate invariant. Empty iff valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let at = |component, instantiation, entry, message: String| Violation {
            component,
            instantiation,
            entry,
            message,
        };
        for (i, cim) in self.cims.iter().enumerate() {
            if cim.card < 2 {
                out.push(at(i, None, None, format!("cardinality {} below 2", cim.card)));
            }
            if cim.parents.contains(&i) {
                out.push(at(i, None, None, "component is its own parent".into()));
            }
            for u in 0..cim.num_instantiations() {
                for x in 0..cim.card {
                    let mut row = 0.0;
                    let mut finite = true;
                    for y in 0..cim.card {
                        let q = cim.rate(x, y, u);
                        if !q.is_finite() {
                            finite = false;
                            out.push(at(i, Some(u), Some((x, y)), "missing or non-finite rate".into()));
                            continue;
                        }
                        if x != y && q < 0.0 {
                            out.push(at(i, Some(u), Some((x, y)), format!("negative off-diagonal {q}")));
                        }
                        row += q;
                    }
                    if finite && row.abs() > ROW_SUM_TOL {
                        out.push(at(i, Some(u), Some((x, x)), format!("row {x} sums to {row}")));
                    }
                }
            }
        }
        if self.space.joint_size_u128() == u128::MAX {
            out.push(at(0, None, None, "joint state count overflows".into()));
        }
        out
    }

    /// Joint rate matrix by amalgamation of the conditional rate matrices.
    pub fn amalgamate(&self, cap: usize) -> Result<JointRateMatrix> {
        let n = self.space.joint_size(cap)?;
        let d = self.num_components();
        let strides = self.space.strides();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut diag = vec![0.0; n];
        let mut parent_states = Vec::new();
        row_ptr.push(0);
        for (x, dx) in diag.iter_mut().enumerate() {
            let xs = self.space.decode(x);
            let mut entries: Vec<(usize, f64)> = Vec::new();
            for i in 0..d {
                let cim = &self.cims[i];
                parent_states.clear();
                parent_states.extend(cim.parents.iter().map(|&p| xs[p]));
                let u = cim.instantiation_index(&parent_states);
                let xi = xs[i];
                *dx += cim.rate(xi, xi, u);
                for yi in 0..cim.card {
                    if yi == xi {
                        continue;
                    }
                    let q = cim.rate(xi, yi, u);
                    if q != 0.0 {
                        let y = x - xi * strides[i] + yi * strides[i];
                        entries.push((y, q));
                    }
                }
            }
            entries.sort_by_key(|e| e.0);
            for (y, q) in entries {
                cols.push(y);
                vals.push(q);
            }
            row_ptr.push(cols.len());
        }
        Ok(JointRateMatrix {
            n,
            row_ptr,
            cols,
            vals,
            diag,
        })
    }
}

/// Sparse joint rate matrix: off-diagonal entries in CSR form plus the
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRateMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl JointRateMatrix {
    /// Builds from a dense row-major matrix (off-diagonal zeros dropped).
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(Error::InvalidArgument("dense matrix has wrong size".into()));
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut diag = vec![0.0; n];
        for x in 0..n {
            for y in 0..n {
                let q = dense[x * n + y];
                if x == y {
                    diag[x] = q;
                } else if q != 0.0 {
                    cols.push(y);
                    vals.push(q);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            vals,
            diag,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn diag(&self, x: usize) -> f64 {
        self.diag[x]
    }

    /// Off-diagonal entries of row `x` as `(column, rate)`.
    pub fn row(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[x]..self.row_ptr[x + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        if x == y {
            return self.diag[x];
        }
        self.row(x).find(|&(c, _)| c == y).map(|(_, q)| q).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for x in 0..self.n {
            out[x * self.n + x] = self.diag[x];
            for (y, q) in self.row(x) {
                out[x * self.n + y] = q;
            }
        }
        out
    }

    /// `out = p Q` (row vector times matrix).
    pub fn left_mul(&self, p: &[f64], out: &mut [f64]) {
        for (o, (pv, dq)) in out.iter_mut().zip(p.iter().zip(&self.diag)) {
            *o = pv * dq;
        }
        for (x, &px) in p.iter().enumerate() {
            if px == 0.0 {
                continue;
            }
            for (y, q) in self.row(x) {
                out[y] += px * q;
            }
        }
    }

    /// `out = Q v`.
    pub fn right_mul(&self, v: &[f64], out: &mut [f64]) {
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = self.diag[x] * v[x];
            for (y, q) in self.row(x) {
                acc += q * v[y];
            }
            *o = acc;
        }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|x| (self.diag[x] + self.row(x).map(|(_, q)| q).sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }
}

/// Ising spin of a binary state index: 0 -> -1, 1 -> +1.
#[inline]
pub fn spin(state: usize) -> f64 {
    if state == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Binary chain `X0 <-> X1 <-> ... <-> X{D-1}` where each component prefers
/// to agree with its neighbours. Rate into `y` is
/// `tau / (1 + exp(-2 y beta sum_j x_j))` over the neighbour spins.
pub fn build_ising_chain(d: usize, beta: f64, tau: f64) -> Result<CtbnModel> {
    if d == 0 {
        return Err(Error::InvalidArgument("Ising chain needs at least one component".into()));
    }
    if !(tau > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument("Ising chain needs tau > 0 and finite beta".into()));
    }
    let names = (0..d).map(|i| format!("X{i}")).collect();
    let labels = vec![vec!["-1".to_string(), "+1".to_string()]; d];
    let space = StateSpace::new(names, labels)?;
    let mut parents = Vec::with_capacity(d);
    let mut tables = Vec::with_capacity(d);
    for i in 0..d {
        let pa: Vec<usize> = [i.checked_sub(1), (i + 1 < d).then_some(i + 1)]
            .into_iter()
            .flatten()
            .collect();
        let n_inst = 1usize << pa.len();
        let mut table = Vec::with_capacity(n_inst * 4);
        for u in 0..n_inst {
            // ascending parent order, first parent most significant
            let field: f64 = (0..pa.len()).map(|k| spin((u >> (pa.len() - 1 - k)) & 1)).sum();
            let up = tau / (1.0 + (-2.0 * beta * field).exp());
            let down = tau / (1.0 + (2.0 * beta * field).exp());
            // from -1: rate into +1; from +1: rate into -1
            table.extend_from_slice(&[-up, up, down, -down]);
        }
        parents.push(pa);
        tables.push(table);
    }
    CtbnModel::new(space, parents, tables)
}

/// Initial condition of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StartCondition {
    State(usize),
    Prior(Vec<f64>),
}

impl StartCondition {
    pub fn distribution(&self, card: usize) -> Vec<f64> {
        match self {
            StartCondition::State(s) => indicator(card, *s),
            StartCondition::Prior(p) => p.clone(),
        }
    }
}

/// Right-continuous piecewise-constant path of one component:
/// `states[k]` holds on `[times[k], times[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    times: Vec<f64>,
    states: Vec<usize>,
}

impl StatePath {
    pub fn new(times: Vec<f64>, states: Vec<usize>) -> Result<Self> {
        if times.is_empty() || times.len() != states.len() {
            return Err(Error::InvalidEvidence("trajectory needs matching times and states".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidEvidence("trajectory must start at t = 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidEvidence("trajectory times must increase".into()));
        }
        if states.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidEvidence("consecutive trajectory states must differ".into()));
        }
        Ok(Self { times, states })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn state_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        self.states[k.max(1) - 1]
    }

    /// Transitions `(time, from, to)`.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        (1..self.times.len()).map(|k| (self.times[k], self.states[k - 1], self.states[k]))
    }

    pub fn final_state(&self) -> usize {
        *self.states.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEvidence {
    pub start: StartCondition,
    pub end: Option<usize>,
    pub trajectory: Option<StatePath>,
}

impl ComponentEvidence {
    pub fn endpoints(start: usize, end: usize) -> Self {
        Self {
            start: StartCondition::State(start),
            end: Some(end),
            trajectory: None,
        }
    }
}

/// Evidence over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub horizon: f64,
    pub components: Vec<ComponentEvidence>,
}

impl Evidence {
    /// Observed start and end states for every component.
    pub fn endpoints(horizon: f64, start: &[usize], end: &[usize]) -> Self {
        Self {
            horizon,
            components: start
                .iter()
                .zip(end)
                .map(|(&s, &e)| ComponentEvidence::endpoints(s, e))
                .collect(),
        }
    }

    pub fn validate(&self, model: &CtbnModel) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidEvidence("horizon must be positive".into()));
        }
        if self.components.len() != model.num_components() {
            return Err(Error::InvalidEvidence(format!(
                "evidence covers {} components, model has {}",
                self.components.len(),
                model.num_components()
            )));
        }
        for (i, ev) in self.components.iter().enumerate() {
            let card = model.card(i);
            match &ev.start {
                StartCondition::State(s) if *s >= card => {
                    return Err(Error::InvalidEvidence(format!("component {i}: start state {s}")))
                }
                StartCondition::Prior(p) => check_prior(p, card, i)?,
                _ => {}
            }
            if matches!(ev.end, Some(e) if e >= card) {
                return Err(Error::InvalidEvidence(format!("component {i}: end state out of range")));
            }
            if let Some(path) = &ev.trajectory {
                if path.states().iter().any(|&s| s >= card) {
                    return Err(Error::InvalidEvidence(format!("component {i}: trajectory state")));
                }
                if path.times().last().is_some_and(|&t| t >= self.horizon) {
                    return Err(Error::InvalidEvidence(format!(
                        "component {i}: trajectory jumps at or after the horizon"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_prior(p: &[f64], card: usize, i: usize) -> Result<()> {
    if p.len() != card || p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidEvidence(format!(
            "component {i}: prior must be {card} nonnegative entries summing to 1"
        )));
    }
    Ok(())
}

pub fn indicator(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(rows: &[f64]) -> CtbnModel {
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        CtbnModel::new(space, vec![vec![]], vec![rows.to_vec()]).unwrap()
    }

    #[test]
    fn valid_two_state_cim() {
        assert!(single(&[-1.0, 1.0, 2.0, -2.0]).validate().is_empty());
    }

    #[test]
    fn bad_row_sum_reported() {
        let v = single(&[-1.0, 0.5, 2.0, -2.0]).validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "row 0 sums to -0.5");
        assert_eq!(v[0].instantiation, Some(0));
    }

    #[test]
    fn negative_off_diagonal_reported() {
        let v = single(&[0.1, -0.1, 2.0, -2.0]).validate();
        assert!(v.iter().any(|v| v.message.starts_with("negative off-diagonal")));
    }

    #[test]
    fn self_parent_reported() {
        let space = StateSpace::new(vec!["A".into()], vec![vec!["0".into(), "1".into()]]).unwrap();
        let m = CtbnModel::new(space, vec![vec![0]], vec![vec![-1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0]])
            .unwrap();
        assert!(m.validate().iter().any(|v| v.message.contains("own parent")));
    }

    #[test]
    fn single_component_amalgamation_is_identity() {
        let m = single(&[-1.0, 1.0, 2.0, -2.0]);
        let q = m.amalgamate(DEFAULT_JOINT_CAP).unwrap();
        assert_eq!(q.to_dense(), vec![-1.0, 1.0, 2.0, -2.0]);
    }

    #[test]
    fn ising_two_component_entry() {
        let m = build_ising_chain(2, 1.0, 1.0).unwrap();
        let q = m.amalgamate(DEFAULT_JOINT_CAP).unwrap();
        // (-1,+1) -> (+1,+1): component 0 flips up with parent at +1
        let x = m.space().encode(&[0, 1]);
        let y = m.space().encode(&[1, 1]);
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((q.get(x, y) - expect).abs() < 1e-15);
        // two components differ -> zero
        assert_eq!(q.get(m.space().encode(&[0, 0]), m.space().encode(&[1, 1])), 0.0);
        assert!(q.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn ising_rates() {
        let m = build_ising_chain(3, 0.0, 3.0).unwrap();
        for i in 0..3 {
            let cim = m.cim(i);
            for u in 0..cim.num_instantiations() {
                assert_eq!(cim.rate(0, 1, u), 1.5);
                assert_eq!(cim.rate(1, 0, u), 1.5);
            }
        }
        let beta = 0.7;
        let m = build_ising_chain(3, beta, 1.0).unwrap();
        // component 0 has one neighbour; neighbour at -1, target +1
        let r = m.conditional_rate(0, 0, 1, &[0]).unwrap();
        assert!((r - 1.0 / (1.0 + (2.0 * beta).exp())).abs() < 1e-15);
        // middle component, both neighbours +1, target +1
        let r = m.conditional_rate(1, 0, 1, &[1, 1]).unwrap();
        assert!((r - 1.0 / (1.0 + (-4.0 * beta).exp())).abs() < 1e-15);
    }

    #[test]
    fn conditional_rate_accessor() {
        let m = build_ising_chain(2, 0.0, 2.0).unwrap();
        assert_eq!(m.conditional_rate(0, 0, 1, &[1]).unwrap(), 1.0);
        assert_eq!(m.conditional_rate(0, 0, 0, &[1]).unwrap(), -1.0);
        assert!(matches!(m.conditional_rate(0, 0, 1, &[1, 0]), Err(Error::InvalidArgument(_))));
        assert!(matches!(m.conditional_rate(5, 0, 1, &[1]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn joint_cap_enforced() {
        let m = build_ising_chain(13, 1.0, 1.0).unwrap();
        assert!(matches!(m.amalgamate(DEFAULT_JOINT_CAP), Err(Error::StateSpaceTooLarge { .. })));
        assert!(m.amalgamate(1 << 13).is_ok());
    }

    #[test]
    fn children_transpose_parents() {
        let m = build_ising_chain(5, 1.0, 1.0).unwrap();
        for i in 0..5 {
            for &c in m.children(i) {
                assert!(m.parents(c).contains(&i));
            }
            for &p in m.parents(i) {
                assert!(m.children(p).contains(&i));
            }
        }
    }

    #[test]
    fn projection() {
        let space = StateSpace::new(
            vec!["A".into(), "B".into()],
            vec![vec!["0".into(), "1".into()], vec!["0".into(), "1".into(), "2".into()]],
        )
        .unwrap();
        let p1 = [0.3, 0.7];
        let p2 = [0.2, 0.5, 0.3];
        let joint: Vec<f64> = (0..6).map(|x| {
            let s = space.decode(x);
            p1[s[0]] * p2[s[1]]
        }).collect();
        let m0 = space.project_marginal(&joint, 0);
        let m1 = space.project_marginal(&joint, 1);
        for (a, b) in m0.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in m1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-15);
        }
        let ind = indicator(6, space.encode(&[1, 2]));
        assert_eq!(space.project_marginal(&ind, 1), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn path_lookup() {
        let p = StatePath::new(vec![0.0, 0.5], vec![0, 1]).unwrap();
        assert_eq!(p.state_at(0.2), 0);
        assert_eq!(p.state_at(0.5), 1);
        assert!(StatePath::new(vec![0.0, 0.5], vec![1, 1]).is_err());
    }
}
