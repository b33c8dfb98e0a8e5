use ctbn_meanfield::meanfield::{run_mean_field, MeanFieldConfig};
use ctbn_meanfield::model::{build_ising_chain, Evidence, StartCondition};
use ctbn_meanfield::ode::IntegratorConfig;
use ctbn_meanfield::tree::{run_mean_field_tree, TreeEvidence, TreeTopology};

// fixed sweep count so both runs perform the same sequence of updates
fn tight() -> MeanFieldConfig {
    MeanFieldConfig {
        integrator: IntegratorConfig::with_tolerances(1e-10, 1e-14),
        tol: 1e-300,
        max_sweeps: 8,
        quad_tol: 1e-11,
        ..Default::default()
    }
}

fn path_vs_interval(lengths: &[f64]) -> (f64, f64) {
    let m = build_ising_chain(3, 1.0, 2.0).unwrap();
    let t: f64 = lengths.iter().sum();
    let ev = Evidence::endpoints(t, &[1, 1, 0], &[0, 1, 1]);
    let cfg = tight();
    let int = run_mean_field(&m, &ev, &cfg).unwrap();
    let tree = TreeTopology::path(lengths).unwrap();
    let mut vertices = vec![vec![None; 3]; lengths.len() + 1];
    vertices[lengths.len()] = vec![Some(0), Some(1), Some(1)];
    let tev = TreeEvidence {
        root: vec![StartCondition::State(1), StartCondition::State(1), StartCondition::State(0)],
        vertices,
    };
    let tr = run_mean_field_tree(&m, &tree, &tev, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut offset = 0.0;
    for (b, &len) in lengths.iter().enumerate() {
        for k in 0..=20 {
            let s = len * k as f64 / 20.0;
            for i in 0..3 {
                let a = tr.density.density(b, i).mu_at(s);
                let c = int.density.component(i).unwrap().mu_at(offset + s);
                worst = worst.max((a[0] - c[0]).abs());
            }
        }
        offset += len;
    }
    ((tr.report.total - int.report.total).abs(), worst)
}

#[test]
fn single_branch_tree_matches_interval() {
    let (df, dmu) = path_vs_interval(&[0.64]);
    assert!(df < 1e-8 && dmu < 1e-8, "{df:e} {dmu:e}");
}

#[test]
fn path_tree_matches_interval() {
    for lengths in [vec![0.32, 0.32], vec![0.5, 0.14], vec![0.2, 0.2, 0.24]] {
        let (df, dmu) = path_vs_interval(&lengths);
        assert!(df < 1e-8 && dmu < 1e-8, "{lengths:?}: {df:e} {dmu:e}");
    }
}
