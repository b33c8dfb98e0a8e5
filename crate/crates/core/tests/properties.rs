use std::sync::Arc;

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctbn_meanfield::density::{avg_rates, expected_stats, geo_rates, FactoredDensitySet};
use ctbn_meanfield::meanfield::{run_mean_field, MeanFieldConfig, MeanFieldState};
use ctbn_meanfield::model::{build_ising_chain, CtbnModel, Evidence, JointRateMatrix, StateSpace, DEFAULT_JOINT_CAP};
use ctbn_meanfield::ode::IntegratorConfig;
use ctbn_meanfield::oracle::{exact_log_likelihood, exact_posterior_for, OracleConfig};

/// Random CTBN with 2-3 components of 2-3 states and arbitrary (possibly
/// cyclic) parent sets.
fn random_model(seed: u64) -> CtbnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=3);
    let cards: Vec<usize> = (0..d).map(|_| rng.gen_range(2..=3)).collect();
    let names = (0..d).map(|i| format!("C{i}")).collect();
    let labels = cards.iter().map(|&c| (0..c).map(|s| s.to_string()).collect()).collect();
    let space = StateSpace::new(names, labels).unwrap();
    let parents: Vec<Vec<usize>> = (0..d)
        .map(|i| (0..d).filter(|&j| j != i && rng.gen_bool(0.6)).collect())
        .collect();
    let tables = (0..d)
        .map(|i| {
            let c = cards[i];
            let n_inst: usize = parents[i].iter().map(|&p| cards[p]).product();
            let mut t = vec![0.0; n_inst * c * c];
            for u in 0..n_inst {
                for x in 0..c {
                    let mut row = 0.0;
                    for y in (0..c).filter(|&y| y != x) {
                        let q = rng.gen_range(0.1..2.5);
                        t[(u * c + x) * c + y] = q;
                        row += q;
                    }
                    t[(u * c + x) * c + x] = -row;
                }
            }
            t
        })
        .collect();
    CtbnModel::new(space, parents, tables).unwrap()
}

/// The same process with components listed in the order `perm`
/// (new component `k` is old component `perm[k]`).
fn permuted(m: &CtbnModel, perm: &[usize]) -> CtbnModel {
    let d = perm.len();
    let mut inv = vec![0; d];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    let sp = m.space();
    let space = StateSpace::new(
        perm.iter().map(|&p| sp.name(p).to_string()).collect(),
        perm.iter().map(|&p| sp.labels(p).to_vec()).collect(),
    )
    .unwrap();
    let mut parents = Vec::new();
    let mut tables = Vec::new();
    for &old in perm {
        let mut pa: Vec<usize> = m.parents(old).iter().map(|&p| inv[p]).collect();
        pa.sort_unstable();
        let c = m.card(old);
        let pcards: Vec<usize> = pa.iter().map(|&p| m.card(perm[p])).collect();
        let n_inst: usize = pcards.iter().product();
        let mut t = vec![0.0; n_inst * c * c];
        for u in 0..n_inst {
            // decode in the new ascending order, then reorder for the old model
            let mut rest = u;
            let mut new_states = vec![0; pa.len()];
            for k in (0..pa.len()).rev() {
                new_states[k] = rest % pcards[k];
                rest /= pcards[k];
            }
            let mut old_pairs: Vec<(usize, usize)> = pa.iter().zip(&new_states).map(|(&p, &s)| (perm[p], s)).collect();
            old_pairs.sort_unstable();
            let old_u = m.cim(old).instantiation_index(&old_pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            for x in 0..c {
                for y in 0..c {
                    t[(u * c + x) * c + y] = m.cim(old).rate(x, y, old_u);
                }
            }
        }
        parents.push(pa);
        tables.push(t);
    }
    CtbnModel::new(space, parents, tables).unwrap()
}

fn random_marginal(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn expm_entry(q: &JointRateMatrix, t: f64, a: usize, b: usize) -> f64 {
    let n = q.size();
    let m = DMatrix::from_row_slice(n, n, &q.to_dense()) * t;
    m.exp()[(a, b)]
}

fn tight() -> MeanFieldConfig {
    MeanFieldConfig {
        integrator: IntegratorConfig::with_tolerances(1e-8, 1e-12),
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn amalgamation_is_a_rate_matrix_with_single_flip_support(seed in any::<u64>()) {
        let m = random_model(seed);
        let q = m.amalgamate(DEFAULT_JOINT_CAP).unwrap();
        prop_assert!(q.max_row_sum_error() <= 1e-12);
        let sp = m.space();
        for x in 0..q.size() {
            let xs = sp.decode(x);
            for y in (0..q.size()).filter(|&y| y != x) {
                let ys = sp.decode(y);
                let diff: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] != ys[i]).collect();
                let v = q.get(x, y);
                prop_assert!(v >= 0.0);
                if diff.len() == 1 {
                    let i = diff[0];
                    let u: Vec<usize> = m.parents(i).iter().map(|&p| xs[p]).collect();
                    prop_assert_eq!(v, m.conditional_rate(i, xs[i], ys[i], &u).unwrap());
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn amalgamation_is_permutation_equivariant(seed in any::<u64>(), shift in 1usize..3) {
        let m = random_model(seed);
        let d = m.num_components();
        let perm: Vec<usize> = (0..d).map(|k| (k + shift) % d).collect();
        let p = permuted(&m, &perm);
        let (q, qp) = (m.amalgamate(DEFAULT_JOINT_CAP).unwrap(), p.amalgamate(DEFAULT_JOINT_CAP).unwrap());
        let map = |x: usize| {
            let xs = m.space().decode(x);
            p.space().encode(&perm.iter().map(|&o| xs[o]).collect::<Vec<_>>())
        };
        for x in 0..q.size() {
            for y in 0..q.size() {
                // diagonals are sums taken in a different order
                prop_assert!((q.get(x, y) - qp.get(map(x), map(y))).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uncoupled_ising_is_a_kronecker_sum(d in 1usize..5, tau in 0.1f64..5.0) {
        let q = build_ising_chain(d, 0.0, tau).unwrap().amalgamate(DEFAULT_JOINT_CAP).unwrap();
        let single = DMatrix::from_row_slice(2, 2, &[-tau / 2.0, tau / 2.0, tau / 2.0, -tau / 2.0]);
        let n = 1 << d;
        let mut sum = DMatrix::<f64>::zeros(n, n);
        for i in 0..d {
            let left = DMatrix::<f64>::identity(1 << i, 1 << i);
            let right = DMatrix::<f64>::identity(1 << (d - 1 - i), 1 << (d - 1 - i));
            sum += left.kronecker(&single).kronecker(&right);
        }
        for x in 0..n {
            for y in 0..n {
                prop_assert!((q.get(x, y) - sum[(x, y)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn geometric_rates_never_exceed_arithmetic(seed in any::<u64>()) {
        let m = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for i in 0..m.num_components() {
            let marg: Vec<Vec<f64>> = m.parents(i).iter().map(|&p| random_marginal(&mut rng, m.card(p))).collect();
            let refs: Vec<&[f64]> = marg.iter().map(Vec::as_slice).collect();
            let (avg, geo) = (avg_rates(&m, i, &refs).unwrap(), geo_rates(&m, i, &refs).unwrap());
            let c = m.card(i);
            for x in 0..c {
                for y in (0..c).filter(|&y| y != x) {
                    prop_assert!(geo[x * c + y] <= avg[x * c + y] * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn log_likelihood_matches_dense_exponential(seed in any::<u64>(), t in 0.05f64..2.0) {
        let m = random_model(seed);
        let q = m.amalgamate(DEFAULT_JOINT_CAP).unwrap();
        let (a, b) = ((seed % q.size() as u64) as usize, ((seed >> 8) % q.size() as u64) as usize);
        let ll = exact_log_likelihood(&q, a, b, t, &OracleConfig::default()).unwrap();
        let p = expm_entry(&q, t, a, b);
        assert_relative_eq!(ll.exp(), p, max_relative = 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mean_field_bounds_likelihood_and_is_consistent(seed in any::<u64>()) {
        let m = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = m.num_components();
        let start: Vec<usize> = (0..d).map(|i| rng.gen_range(0..m.card(i))).collect();
        let end: Vec<usize> = (0..d).map(|i| rng.gen_range(0..m.card(i))).collect();
        let ev = Evidence::endpoints(0.8, &start, &end);
        let res = run_mean_field(&m, &ev, &tight()).unwrap();
        let (_, post) = exact_posterior_for(&m, &ev, &OracleConfig::default()).unwrap();
        prop_assert!(res.report.total <= post.log_likelihood() + 1e-6);
        prop_assert!(res.trace.is_monotone());
        let v = res.density.consistency_check(128);
        prop_assert!(v.is_empty(), "{:?}", v.first());
        let stats = expected_stats(&res.density, 1e-8).unwrap();
        for f in &stats.families {
            let total: f64 = f.marginal_time().iter().sum();
            prop_assert!((total - 0.8).abs() <= 1e-6);
        }
    }
}

#[test]
fn repeated_update_is_a_fixed_point() {
    let m = build_ising_chain(3, 1.0, 2.0).unwrap();
    let ev = Evidence::endpoints(0.64, &[1, 1, 0], &[0, 1, 1]);
    let cfg = tight();
    let res = run_mean_field(&m, &ev, &cfg).unwrap();
    let set = FactoredDensitySet::new(Arc::new(m), ev, res.density.factors().to_vec()).unwrap();
    let mut state = MeanFieldState::new(set, cfg).unwrap();
    state.update_component(1).unwrap();
    let f = state.free_energy();
    state.update_component(1).unwrap();
    assert!((state.free_energy() - f).abs() <= MeanFieldConfig::slack(f));
}

#[test]
fn first_update_improves_random_start() {
    let m = build_ising_chain(4, 1.0, 2.0).unwrap();
    let ev = Evidence::endpoints(0.64, &[1, 1, 0, 0], &[0, 1, 1, 0]);
    let improved = (0..20u64)
        .filter(|&seed| {
            let cfg = MeanFieldConfig { seed, ..tight() };
            let set = ctbn_meanfield::meanfield::initialize(Arc::new(m.clone()), &ev, &cfg).unwrap();
            let mut state = MeanFieldState::new(set, cfg).unwrap();
            let before = state.free_energy();
            state.update_component(0).unwrap();
            state.free_energy() > before
        })
        .count();
    assert!(improved >= 19, "{improved} of 20");
}
