//! File formats: models, evidence, trees and density knots.
//!
//! Numbers are written with 17 significant digits so every value reads back
//! bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::FactoredDensitySet;
use crate::error::{Error, Result};
use crate::model::{ComponentEvidence, CtbnModel, Evidence, StartCondition, StatePath, StateSpace};
use crate::tree::{Branch, TreeEvidence, TreeTopology};

pub const SCHEMA_VERSION: u32 = 1;

struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value == 0.0 {
            writer.write_all(if value.is_sign_negative() { b"-0.0" } else { b"0.0" })
        } else if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }
}

/// Compact JSON with 17-significant-digit floats.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Formats a float for CSV output with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn parse_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("cannot parse {what}: {e}"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

/// A state given either by label or by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateRef {
    Index(usize),
    Label(String),
}

impl StateRef {
    fn resolve(&self, space: &StateSpace, i: usize) -> Result<usize> {
        match self {
            StateRef::Index(k) if *k < space.card(i) => Ok(*k),
            StateRef::Index(k) => Err(Error::InvalidEvidence(format!("state {k} of component {i} out of range"))),
            StateRef::Label(l) => space
                .state_index(i, l)
                .ok_or_else(|| Error::InvalidEvidence(format!("unknown state {l:?} of component {}", space.name(i)))),
        }
    }

    fn label(space: &StateSpace, i: usize, k: usize) -> Self {
        StateRef::Label(space.labels(i)[k].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    pub states: Vec<String>,
    #[serde(default)]
    pub parents: Vec<String>,
    /// Keyed by the parents' state labels joined with `,` in the order of
    /// `parents` (the empty string when there are no parents).
    pub rates: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub components: Vec<ComponentSpec>,
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

/// Missing parent instantiations become NaN rates, which
/// [`CtbnModel::validate`] reports.
pub fn model_from_file(file: &ModelFile) -> Result<CtbnModel> {
    let names: Vec<String> = file.components.iter().map(|c| c.name.clone()).collect();
    let labels: Vec<Vec<String>> = file.components.iter().map(|c| c.states.clone()).collect();
    for (k, n) in names.iter().enumerate() {
        if names[..k].contains(n) {
            return Err(Error::InvalidModel(format!("duplicate component name {n:?}")));
        }
    }
    let space = StateSpace::new(names, labels)?;
    let mut parents = Vec::with_capacity(file.components.len());
    let mut tables = Vec::with_capacity(file.components.len());
    for (i, spec) in file.components.iter().enumerate() {
        let listed: Vec<usize> = spec
            .parents
            .iter()
            .map(|p| {
                space
                    .component_index(p)
                    .ok_or_else(|| Error::InvalidModel(format!("component {}: unknown parent {p:?}", spec.name)))
            })
            .collect::<Result<_>>()?;
        let mut sorted = listed.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != listed.len() {
            return Err(Error::InvalidModel(format!("component {}: repeated parent", spec.name)));
        }
        let card = space.card(i);
        let n_inst: usize = sorted.iter().map(|&p| space.card(p)).product();
        let mut table = vec![f64::NAN; n_inst * card * card];
        for (key, rows) in &spec.rates {
            let parts: Vec<&str> = if key.is_empty() { Vec::new() } else { key.split(',').map(str::trim).collect() };
            if parts.len() != listed.len() {
                return Err(Error::InvalidModel(format!("component {}: bad instantiation key {key:?}", spec.name)));
            }
            let mut states = vec![0; sorted.len()];
            for (part, &p) in parts.iter().zip(&listed) {
                let s = space.state_index(p, part).ok_or_else(|| {
                    Error::InvalidModel(format!("component {}: unknown parent state {part:?} in key {key:?}", spec.name))
                })?;
                states[sorted.iter().position(|&q| q == p).unwrap()] = s;
            }
            let u = states.iter().zip(&sorted).fold(0, |acc, (&s, &p)| acc * space.card(p) + s);
            if rows.len() != card || rows.iter().any(|r| r.len() != card) {
                return Err(Error::InvalidModel(format!(
                    "component {}: rate matrix for key {key:?} must be {card}x{card}",
                    spec.name
                )));
            }
            for (x, row) in rows.iter().enumerate() {
                table[(u * card + x) * card..(u * card + x + 1) * card].copy_from_slice(row);
            }
        }
        parents.push(sorted);
        tables.push(table);
    }
    CtbnModel::new(space, parents, tables)
}

pub fn model_to_file(model: &CtbnModel) -> ModelFile {
    let space = model.space();
    let components = (0..model.num_components())
        .map(|i| {
            let cim = model.cim(i);
            let card = cim.card();
            let mut rates = BTreeMap::new();
            for u in 0..cim.num_instantiations() {
                let states = cim.decode_instantiation(u);
                let key = states
                    .iter()
                    .zip(cim.parents())
                    .map(|(&s, &p)| space.labels(p)[s].as_str())
                    .collect::<Vec<_>>()
                    .join(",");
                let m = cim.matrix(u);
                rates.insert(key, m.chunks(card).map(<[f64]>::to_vec).collect());
            }
            ComponentSpec {
                name: space.name(i).to_string(),
                states: space.labels(i).to_vec(),
                parents: cim.parents().iter().map(|&p| space.name(p).to_string()).collect(),
                rates,
            }
        })
        .collect();
    ModelFile {
        schema_version: SCHEMA_VERSION,
        components,
    }
}

pub fn parse_model_file(text: &str) -> Result<ModelFile> {
    serde_json::from_str(text).map_err(|e| parse_err("model", e))
}

pub fn read_model(path: &Path) -> Result<CtbnModel> {
    model_from_file(&parse_model_file(&read_text(path)?)?)
}

pub fn write_model(path: &Path, model: &CtbnModel) -> Result<()> {
    write_text(path, &to_json(&model_to_file(model))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartSpec {
    State(StateRef),
    Prior { prior: Vec<f64> },
}

impl StartSpec {
    fn resolve(&self, space: &StateSpace, i: usize) -> Result<StartCondition> {
        Ok(match self {
            StartSpec::State(s) => StartCondition::State(s.resolve(space, i)?),
            StartSpec::Prior { prior } => StartCondition::Prior(prior.clone()),
        })
    }

    fn from_condition(space: &StateSpace, i: usize, c: &StartCondition) -> Self {
        match c {
            StartCondition::State(s) => StartSpec::State(StateRef::label(space, i, *s)),
            StartCondition::Prior(p) => StartSpec::Prior { prior: p.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEvidenceSpec {
    pub start: StartSpec,
    #[serde(default)]
    pub end: Option<StateRef>,
    #[serde(default)]
    pub trajectory: Option<Vec<(f64, StateRef)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceFile {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub components: Vec<ComponentEvidenceSpec>,
}

pub fn evidence_from_file(file: &EvidenceFile, model: &CtbnModel) -> Result<Evidence> {
    let space = model.space();
    if file.components.len() != model.num_components() {
        return Err(Error::InvalidEvidence(format!(
            "evidence lists {} components, model has {}",
            file.components.len(),
            model.num_components()
        )));
    }
    let components = file
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let trajectory = match &c.trajectory {
                Some(points) => {
                    let times = points.iter().map(|p| p.0).collect();
                    let states = points.iter().map(|p| p.1.resolve(space, i)).collect::<Result<_>>()?;
                    Some(StatePath::new(times, states)?)
                }
                None => None,
            };
            Ok(ComponentEvidence {
                start: c.start.resolve(space, i)?,
                end: c.end.as_ref().map(|s| s.resolve(space, i)).transpose()?,
                trajectory,
            })
        })
        .collect::<Result<_>>()?;
    let ev = Evidence {
        horizon: file.horizon,
        components,
    };
    ev.validate(model)?;
    Ok(ev)
}

pub fn evidence_to_file(ev: &Evidence, model: &CtbnModel) -> EvidenceFile {
    let space = model.space();
    EvidenceFile {
        schema_version: SCHEMA_VERSION,
        horizon: ev.horizon,
        components: ev
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| ComponentEvidenceSpec {
                start: StartSpec::from_condition(space, i, &c.start),
                end: c.end.map(|s| StateRef::label(space, i, s)),
                trajectory: c.trajectory.as_ref().map(|p| {
                    p.times()
                        .iter()
                        .zip(p.states())
                        .map(|(&t, &s)| (t, StateRef::label(space, i, s)))
                        .collect()
                }),
            })
            .collect(),
    }
}

pub fn parse_evidence_file(text: &str) -> Result<EvidenceFile> {
    serde_json::from_str(text).map_err(|e| parse_err("evidence", e))
}

pub fn read_evidence(path: &Path, model: &CtbnModel) -> Result<Evidence> {
    evidence_from_file(&parse_evidence_file(&read_text(path)?)?, model)
}

pub fn write_evidence(path: &Path, ev: &Evidence, model: &CtbnModel) -> Result<()> {
    write_text(path, &to_json(&evidence_to_file(ev, model))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub from: String,
    pub to: String,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEvidenceSpec {
    /// Start condition per component at the root.
    pub root: Vec<StartSpec>,
    /// Observed states per vertex name, one entry per component.
    #[serde(default)]
    pub observations: BTreeMap<String, Vec<Option<StateRef>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub vertices: Vec<String>,
    pub root: String,
    pub branches: Vec<BranchSpec>,
    pub evidence: TreeEvidenceSpec,
}

pub fn tree_from_file(file: &TreeFile, model: &CtbnModel) -> Result<(TreeTopology, TreeEvidence)> {
    let index = |name: &str| {
        file.vertices
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::InvalidTree(format!("unknown vertex {name:?}")))
    };
    let branches = file
        .branches
        .iter()
        .map(|b| {
            Ok(Branch {
                from: index(&b.from)?,
                to: index(&b.to)?,
                length: b.length,
            })
        })
        .collect::<Result<_>>()?;
    let tree = TreeTopology::new(file.vertices.clone(), branches, index(&file.root)?)?;
    let space = model.space();
    let d = model.num_components();
    if file.evidence.root.len() != d {
        return Err(Error::InvalidEvidence("root evidence needs one entry per component".into()));
    }
    let root = file
        .evidence
        .root
        .iter()
        .enumerate()
        .map(|(i, s)| s.resolve(space, i))
        .collect::<Result<_>>()?;
    let mut vertices = vec![vec![None; d]; tree.num_vertices()];
    for (name, obs) in &file.evidence.observations {
        let v = index(name)?;
        if obs.len() != d {
            return Err(Error::InvalidEvidence(format!("vertex {name:?} needs one entry per component")));
        }
        for (i, o) in obs.iter().enumerate() {
            vertices[v][i] = o.as_ref().map(|s| s.resolve(space, i)).transpose()?;
        }
    }
    let ev = TreeEvidence { root, vertices };
    ev.validate(model, &tree)?;
    Ok((tree, ev))
}

pub fn tree_to_file(tree: &TreeTopology, ev: &TreeEvidence, model: &CtbnModel) -> TreeFile {
    let space = model.space();
    let names = tree.names();
    let observations = ev
        .vertices
        .iter()
        .enumerate()
        .filter(|(_, obs)| obs.iter().any(Option::is_some))
        .map(|(v, obs)| {
            let states = obs
                .iter()
                .enumerate()
                .map(|(i, o)| o.map(|s| StateRef::label(space, i, s)))
                .collect();
            (names[v].clone(), states)
        })
        .collect();
    TreeFile {
        schema_version: SCHEMA_VERSION,
        vertices: names.to_vec(),
        root: names[tree.root()].clone(),
        branches: tree
            .branches()
            .iter()
            .map(|b| BranchSpec {
                from: names[b.from].clone(),
                to: names[b.to].clone(),
                length: b.length,
            })
            .collect(),
        evidence: TreeEvidenceSpec {
            root: ev
                .root
                .iter()
                .enumerate()
                .map(|(i, c)| StartSpec::from_condition(space, i, c))
                .collect(),
            observations,
        },
    }
}

pub fn parse_tree_file(text: &str) -> Result<TreeFile> {
    serde_json::from_str(text).map_err(|e| parse_err("tree", e))
}

pub fn read_tree(path: &Path, model: &CtbnModel) -> Result<(TreeTopology, TreeEvidence)> {
    tree_from_file(&parse_tree_file(&read_text(path)?)?, model)
}

/// Density values at one solver knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub mu: Vec<f64>,
    /// `ln rho` including the ledger scale (`null` where `rho` vanishes).
    pub log_rho: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentKnots {
    pub name: String,
    pub states: Vec<String>,
    pub observed: bool,
    pub knots: Vec<Knot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityKnots {
    pub schema_version: u32,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub components: Vec<ComponentKnots>,
}

/// Values of `mu` and `ln rho` at the union of both solvers' knots.
pub fn density_knots(set: &FactoredDensitySet) -> DensityKnots {
    let model = set.model();
    let space = model.space();
    let components = (0..model.num_components())
        .map(|i| {
            let card = model.card(i);
            let knots = match set.component(i) {
                Some(cd) => {
                    let mut times = cd.mu.knot_times();
                    times.extend(cd.rho.knot_times());
                    times.sort_by(f64::total_cmp);
                    times.dedup();
                    let mut r = vec![0.0; card];
                    times
                        .into_iter()
                        .map(|t| {
                            let log = cd.rho.eval_into(t, &mut r);
                            Knot {
                                t,
                                mu: cd.mu_at(t),
                                log_rho: r.iter().map(|&v| (v > 0.0).then(|| v.ln() + log)).collect(),
                            }
                        })
                        .collect()
                }
                None => {
                    let f = set.factor(i);
                    let path = match f {
                        crate::density::FactorDensity::Observed { path, .. } => path,
                        _ => unreachable!("non-latent factors are observed paths"),
                    };
                    let mut times = path.times().to_vec();
                    times.push(set.horizon());
                    times
                        .into_iter()
                        .map(|t| Knot {
                            t,
                            mu: crate::model::indicator(card, path.state_at(t)),
                            log_rho: vec![None; card],
                        })
                        .collect()
                }
            };
            ComponentKnots {
                name: space.name(i).to_string(),
                states: space.labels(i).to_vec(),
                observed: set.component(i).is_none(),
                knots,
            }
        })
        .collect();
    DensityKnots {
        schema_version: SCHEMA_VERSION,
        horizon: set.horizon(),
        components,
    }
}

pub fn parse_density_knots(text: &str) -> Result<DensityKnots> {
    serde_json::from_str(text).map_err(|e| parse_err("density knots", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_ising_chain;

    #[test]
    fn floats_keep_all_digits() {
        let v = vec![0.1, 1.0 / 3.0, -2.5e-300, 0.0, 6.02214076e23];
        let s = to_json(&v).unwrap();
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert!(s.contains("3.3333333333333331e-1"));
    }

    #[test]
    fn model_round_trip() {
        let m = build_ising_chain(3, 0.7, 1.3).unwrap();
        let text = to_json(&model_to_file(&m)).unwrap();
        let back = model_from_file(&parse_model_file(&text).unwrap()).unwrap();
        assert_eq!(m, back);
        assert_eq!(to_json(&model_to_file(&back)).unwrap(), text);
    }

    #[test]
    fn parent_order_in_keys_follows_listing() {
        let text = r#"{"components":[
            {"name":"A","states":["a0","a1"],"rates":{"":[[-1,1],[1,-1]]}},
            {"name":"B","states":["b0","b1"],"rates":{"":[[-1,1],[1,-1]]}},
            {"name":"C","states":["c0","c1"],"parents":["B","A"],"rates":{
                "b0,a0":[[-1,1],[1,-1]],"b0,a1":[[-2,2],[1,-1]],
                "b1,a0":[[-3,3],[1,-1]],"b1,a1":[[-4,4],[1,-1]]}}]}"#;
        let m = model_from_file(&parse_model_file(text).unwrap()).unwrap();
        assert!(m.validate().is_empty());
        // ascending parents (A, B): A=a1, B=b0 is "b0,a1"
        assert_eq!(m.conditional_rate(2, 0, 1, &[1, 0]).unwrap(), 2.0);
        assert_eq!(m.conditional_rate(2, 0, 1, &[0, 1]).unwrap(), 3.0);
    }

    #[test]
    fn missing_instantiation_is_a_violation() {
        let text = r#"{"components":[
            {"name":"A","states":["0","1"],"rates":{"":[[-1,1],[1,-1]]}},
            {"name":"B","states":["0","1"],"parents":["A"],"rates":{"0":[[-1,1],[1,-1]]}}]}"#;
        let m = model_from_file(&parse_model_file(text).unwrap()).unwrap();
        let v = m.validate();
        assert!(!v.is_empty());
        assert!(v.iter().all(|x| x.component == 1 && x.instantiation == Some(1)));
    }

    #[test]
    fn evidence_round_trip() {
        let m = build_ising_chain(2, 1.0, 1.0).unwrap();
        let ev = Evidence {
            horizon: 0.64,
            components: vec![
                ComponentEvidence {
                    start: StartCondition::Prior(vec![0.25, 0.75]),
                    end: None,
                    trajectory: None,
                },
                ComponentEvidence {
                    start: StartCondition::State(1),
                    end: Some(0),
                    trajectory: Some(StatePath::new(vec![0.0, 0.1, 0.3], vec![1, 0, 1]).unwrap()),
                },
            ],
        };
        let text = to_json(&evidence_to_file(&ev, &m)).unwrap();
        let back = evidence_from_file(&parse_evidence_file(&text).unwrap(), &m).unwrap();
        assert_eq!(ev, back);
        let by_index = r#"{"T":1,"components":[{"start":0,"end":1},{"start":{"prior":[0.5,0.5]},"end":null}]}"#;
        let ev = evidence_from_file(&parse_evidence_file(by_index).unwrap(), &m).unwrap();
        assert_eq!(ev.components[0].end, Some(1));
    }

    #[test]
    fn tree_round_trip() {
        let m = build_ising_chain(2, 1.0, 1.0).unwrap();
        let text = r#"{"vertices":["r","a","L1","L2"],"root":"r",
            "branches":[{"from":"r","to":"a","length":0.3},{"from":"a","to":"L1","length":0.2},{"from":"a","to":"L2","length":0.4}],
            "evidence":{"root":["+1",{"prior":[0.5,0.5]}],"observations":{"L1":["-1",null],"L2":["+1","+1"]}}}"#;
        let (tree, ev) = tree_from_file(&parse_tree_file(text).unwrap(), &m).unwrap();
        assert_eq!(tree.leaves(), vec![2, 3]);
        assert_eq!(ev.vertices[2], vec![Some(0), None]);
        let again = to_json(&tree_to_file(&tree, &ev, &m)).unwrap();
        let (t2, e2) = tree_from_file(&parse_tree_file(&again).unwrap(), &m).unwrap();
        assert_eq!(tree, t2);
        assert_eq!(ev, e2);
    }
}
