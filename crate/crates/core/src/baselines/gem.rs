use serde::{Deserialize, Serialize};

use rand::seq::index::sample as sample_indices;

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng;

const DUAL_TOLERANCE: f64 = 1e-8;
const MAX_SWEEPS: usize = 20_000;
/// Largest accepted `-<v, g_k> / (|g| |g_k|)` at termination.
const FEASIBILITY_TOLERANCE: f64 = 1e-10;

/// Projects `g` onto `{v : <v, g_k> >= 0 for all k}` in the Euclidean norm.
///
/// The dual `min_{l >= 0} 1/2 l'Ql + c'l` with `Q = G G'` and `c = G g` is
/// solved by cyclic projected coordinate descent, and `v = g + G'l`.
pub fn gem_project(g: &[f64], constraints: &[Vec<f64>]) -> Result<Vec<f64>> {
    if g.is_empty() {
        return Err(Error::contract("gem_project on an empty gradient"));
    }
    if let Some(bad) = constraints.iter().find(|c| c.len() != g.len()) {
        return Err(Error::Dimension {
            op: "gem_project",
            left: (1, g.len()),
            right: (1, bad.len()),
        });
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let c: Vec<f64> = constraints.iter().map(|gk| dot(gk, g)).collect();
    if c.iter().all(|&v| v >= 0.0) {
        return Ok(g.to_vec());
    }
    let k = constraints.len();
    let mut q = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = dot(&constraints[i], &constraints[j]);
            q[i * k + j] = v;
            q[j * k + i] = v;
        }
    }
    let norms: Vec<f64> = constraints.iter().map(|gk| dot(gk, gk).sqrt()).collect();
    let g_norm = dot(g, g).sqrt();
    let mut lambda = vec![0.0; k];
    // primal iterate v = g + G'l, kept in step with the dual
    let mut v = g.to_vec();
    for _ in 0..MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for i in 0..k {
            let qii = q[i * k + i];
            if qii <= 0.0 {
                continue;
            }
            let grad = dot(&constraints[i], &v);
            let next = (lambda[i] - grad / qii).max(0.0);
            let step = next - lambda[i];
            if step != 0.0 {
                for (vi, gi) in v.iter_mut().zip(&constraints[i]) {
                    *vi += step * gi;
                }
                lambda[i] = next;
            }
            change = change.max(step.abs() * qii.sqrt());
        }
        // small steps alone can stall on rank-deficient Q, so also demand
        // near-feasibility before stopping
        let worst = constraints
            .iter()
            .zip(&norms)
            .map(|(gk, n)| -dot(gk, &v) / (n * g_norm).max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max);
        if change < DUAL_TOLERANCE * g_norm.max(1.0) && worst <= FEASIBILITY_TOLERANCE {
            break;
        }
    }
    let worst = |x: &[f64]| {
        constraints
            .iter()
            .zip(&norms)
            .map(|(gk, n)| -dot(gk, x) / (n * g_norm).max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    if worst(&v) <= FEASIBILITY_TOLERANCE {
        return Ok(v);
    }
    // Coordinate descent crawls when Q is singular (more active constraints
    // than dimensions); finish with an exact active-set solve of the same dual.
    let lambda = nnls_gram(&q, &c, k);
    let mut exact = g.to_vec();
    for (l, gk) in lambda.iter().zip(constraints) {
        exact.iter_mut().zip(gk).for_each(|(vi, gi)| *vi += l * gi);
    }
    Ok(if worst(&exact) < worst(&v) { exact } else { v })
}

/// Lawson-Hanson active-set solve of `min_{l >= 0} 1/2 l'Ql + c'l` for a
/// symmetric positive semidefinite `k x k` matrix `q`.
fn nnls_gram(q: &[f64], c: &[f64], k: usize) -> Vec<f64> {
    let diag = (0..k).map(|i| q[i * k + i]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-13 * diag.max(c.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let grad = |l: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| -(c[i] + (0..k).map(|j| q[i * k + j] * l[j]).sum::<f64>()))
            .collect()
    };
    let mut lambda = vec![0.0; k];
    let mut passive = vec![false; k];
    let mut rejected = vec![false; k];
    for _ in 0..10 * k + 10 {
        let w = grad(&lambda);
        let Some(j) = (0..k)
            .filter(|&i| !passive[i] && !rejected[i] && w[i] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]))
        else {
            break;
        };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let Some(sol) = solve_sub(q, c, k, &idx) else {
                // j is dependent on the passive set
                passive[j] = false;
                rejected[j] = true;
                break;
            };
            let mut s = vec![0.0; k];
            for (&i, &x) in idx.iter().zip(&sol) {
                s[i] = x;
            }
            if idx.iter().all(|&i| s[i] > 0.0) {
                lambda = s;
                rejected.iter_mut().for_each(|r| *r = false);
                break;
            }
            let alpha = idx
                .iter()
                .filter(|&&i| s[i] <= 0.0)
                .map(|&i| lambda[i] / (lambda[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            for i in 0..k {
                lambda[i] += alpha * (s[i] - lambda[i]);
                if passive[i] && lambda[i] <= 0.0 {
                    passive[i] = false;
                    lambda[i] = 0.0;
                }
            }
        }
    }
    lambda
}

/// Solves `Q_PP x = -c_P` by Gaussian elimination with partial pivoting;
/// `None` when the block is numerically singular.
fn solve_sub(q: &[f64], c: &[f64], k: usize, idx: &[usize]) -> Option<Vec<f64>> {
    let n = idx.len();
    let scale = idx.iter().map(|&i| q[i * k + i]).fold(0.0, f64::max);
    let mut a: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let mut row: Vec<f64> = idx.iter().map(|&j| q[i * k + j]).collect();
            row.push(-c[i]);
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() <= 1e-10 * scale {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for cc in col..=n {
                a[r][cc] -= f * a[col][cc];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|cc| a[r][cc] * x[cc]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Some(x)
}

/// Per-task episodic memories of `m` samples each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GemMemory {
    pub per_task: Vec<Vec<Sample>>,
}

impl GemMemory {
    /// Stores `m` samples drawn uniformly without replacement.
    pub fn add_task(&mut self, train: &[Sample], m: usize, rng: &mut Rng) {
        let mut idx = sample_indices(rng, train.len(), m.min(train.len())).into_vec();
        idx.sort_unstable();
        self.per_task.push(idx.into_iter().map(|i| train[i].clone()).collect());
    }

    pub fn total(&self) -> usize {
        self.per_task.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn satisfied_is_identity() {
        let g = vec![1.0, 2.0];
        assert_eq!(gem_project(&g, &[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap(), g);
        assert_eq!(gem_project(&g, &[]).unwrap(), g);
    }

    #[test]
    fn single_violation_closed_form() {
        let v = gem_project(&[1.0, -1.0], &[vec![0.0, 1.0]]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn empty_gradient() {
        assert!(matches!(gem_project(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn episodic_growth() {
        let s: Vec<Sample> = (0..300)
            .map(|i| Sample {
                tokens: vec![i],
                group: crate::corpus::GroupId(0),
                ideology: crate::corpus::IdeologyId(0),
            })
            .collect();
        let mut m = GemMemory::default();
        let mut rng = crate::rng::rng_for(1, &[]);
        for _ in 0..15 {
            m.add_task(&s, 100, &mut rng);
        }
        assert_eq!(m.total(), 1500);
    }

    proptest! {
        #[test]
        fn feasible_and_idempotent(
            g in prop::collection::vec(-1.0..1.0f64, 6),
            cs in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 6), 1..6),
        ) {
            let v = gem_project(&g, &cs).unwrap();
            let nv = dot(&v, &v).sqrt();
            for c in &cs {
                prop_assert!(dot(&v, c) >= -1e-6 * nv * dot(c, c).sqrt());
            }
            let again = gem_project(&v, &cs).unwrap();
            for (a, b) in again.iter().zip(&v) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn more_constraints_than_dims(
            g in prop::collection::vec(-2.0..2.0f64, 3),
            cs in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 4..16),
        ) {
            let v = gem_project(&g, &cs).unwrap();
            let ng = dot(&g, &g).sqrt();
            for c in &cs {
                prop_assert!(dot(&v, c) >= -1e-9 * ng * dot(c, c).sqrt());
            }
            // optimality: v is no farther from g than any feasible scaling of it
            let d = |x: &[f64]| x.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            prop_assert!(d(&v) <= dot(&g, &g) * (1.0 + 1e-6));
        }
    }
}
