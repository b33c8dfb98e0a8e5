//! Family-level expected sufficient statistics and the relative-error metric
//! used to compare approximate and exact statistics.

use serde::{Deserialize, Serialize};

use crate::model::CtbnModel;

/// Expected sufficient statistics of one component given its parents:
/// time spent in `x` under parent instantiation `u` and the number of
/// `x -> y` transitions under `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyStats {
    pub card: usize,
    pub num_instantiations: usize,
    /// Indexed `u * card + x`.
    pub time: Vec<f64>,
    /// Indexed `(u * card + x) * card + y`; diagonal entries stay zero.
    pub transitions: Vec<f64>,
}

impl FamilyStats {
    pub fn zeros(card: usize, num_instantiations: usize) -> Self {
        Self {
            card,
            num_instantiations,
            time: vec![0.0; card * num_instantiations],
            transitions: vec![0.0; card * card * num_instantiations],
        }
    }

    pub fn time_at(&self, x: usize, u: usize) -> f64 {
        self.time[u * self.card + x]
    }

    pub fn transitions_at(&self, x: usize, y: usize, u: usize) -> f64 {
        self.transitions[(u * self.card + x) * self.card + y]
    }

    /// Time in each state, summed over parent instantiations.
    pub fn marginal_time(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.card];
        for u in 0..self.num_instantiations {
            for (x, o) in out.iter_mut().enumerate() {
                *o += self.time_at(x, u);
            }
        }
        out
    }

    /// Transition counts summed over parent instantiations, row-major.
    pub fn marginal_transitions(&self) -> Vec<f64> {
        let c = self.card;
        let mut out = vec![0.0; c * c];
        for u in 0..self.num_instantiations {
            for x in 0..c {
                for y in 0..c {
                    out[x * c + y] += self.transitions_at(x, y, u);
                }
            }
        }
        out
    }

    /// Every statistic as a flat list: times first, then off-diagonal
    /// transition counts.
    pub fn flatten(&self) -> Vec<f64> {
        let c = self.card;
        let mut out = self.time.clone();
        for (k, v) in self.transitions.iter().enumerate() {
            let x = (k / c) % c;
            let y = k % c;
            if x != y {
                out.push(*v);
            }
        }
        out
    }

    pub fn add(&mut self, other: &FamilyStats) {
        for (a, b) in self.time.iter_mut().zip(&other.time) {
            *a += b;
        }
        for (a, b) in self.transitions.iter_mut().zip(&other.transitions) {
            *a += b;
        }
    }
}

/// Statistics for every component of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub families: Vec<FamilyStats>,
}

impl ModelStats {
    pub fn zeros(model: &CtbnModel) -> Self {
        Self {
            families: (0..model.num_components())
                .map(|i| FamilyStats::zeros(model.card(i), model.cim(i).num_instantiations()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.families.iter().flat_map(FamilyStats::flatten).collect()
    }

    pub fn add(&mut self, other: &ModelStats) {
        for (a, b) in self.families.iter_mut().zip(&other.families) {
            a.add(b);
        }
    }
}

/// Denominators below this are excluded from the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeError {
    /// `sum_j |approx_j - exact_j| / exact_j` over included statistics.
    pub sum: f64,
    /// `sum / included`.
    pub mean: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Relative error of `approx` against `exact`, skipping statistics whose
/// exact value is below [`RELATIVE_ERROR_FLOOR`].
pub fn relative_error(approx: &[f64], exact: &[f64]) -> RelativeError {
    let mut sum = 0.0;
    let mut included = 0;
    let mut excluded = 0;
    for (a, e) in approx.iter().zip(exact) {
        if *e < RELATIVE_ERROR_FLOOR {
            excluded += 1;
            continue;
        }
        sum += (a - e).abs() / e;
        included += 1;
    }
    RelativeError {
        sum,
        mean: if included > 0 { sum / included as f64 } else { 0.0 },
        included,
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_skips_tiny_denominators() {
        let r = relative_error(&[1.1, 0.5, 2.0], &[1.0, 1e-12, 2.0]);
        assert_eq!(r.included, 2);
        assert_eq!(r.excluded, 1);
        assert!((r.sum - 0.1).abs() < 1e-12);
        assert!((r.mean - 0.05).abs() < 1e-12);
    }

    #[test]
    fn flatten_drops_diagonal() {
        let mut f = FamilyStats::zeros(2, 1);
        f.time = vec![0.4, 0.6];
        f.transitions = vec![0.0, 1.5, 2.5, 0.0];
        assert_eq!(f.flatten(), vec![0.4, 0.6, 1.5, 2.5]);
    }
}
