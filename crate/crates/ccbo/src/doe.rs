//! Latin hypercube sampling and maximin improvement for designs of
//! experiments and candidate sets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::problems::ProblemDefinition;
use crate::seed::SeedTree;

/// Plain LHS over a box: one stratified sample per point and dimension.
pub fn lhs(bounds: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeedTree::new(seed).rng();
    let dim = bounds.len();
    let mut cols: Vec<Vec<usize>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        cols.push(perm);
    }
    let mut pts = vec![vec![0.0; dim]; n];
    for (k, &(lo, hi)) in bounds.iter().enumerate() {
        for i in 0..n {
            let cell = cols[k][i] as f64;
            let frac = (cell + rng.random_range(0.0..1.0)) / n as f64;
            pts[i][k] = lo + (hi - lo) * frac;
        }
    }
    pts
}

fn min_pairwise_dist2(pts: &[Vec<f64>], bounds: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let mut d = 0.0;
            for (k, &(lo, hi)) in bounds.iter().enumerate() {
                let span = (hi - lo).max(1e-300);
                let dd = (pts[i][k] - pts[j][k]) / span;
                d += dd * dd;
            }
            best = best.min(d);
        }
    }
    best
}

/// LHS improved towards a maximin design by random coordinate swaps that keep
/// the Latin structure.
pub fn maximin_lhs(bounds: &[(f64, f64)], n: usize, seed: u64, n_trials: usize) -> Vec<Vec<f64>> {
    let mut pts = lhs(bounds, n, seed);
    if n < 2 || bounds.is_empty() {
        return pts;
    }
    let mut rng = SeedTree::new(seed).child("maximin").rng();
    let mut best = min_pairwise_dist2(&pts, bounds);
    for _ in 0..n_trials {
        let k = rng.random_range(0..bounds.len());
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let tmp = pts[i][k];
        pts[i][k] = pts[j][k];
        pts[j][k] = tmp;
        let cand = min_pairwise_dist2(&pts, bounds);
        if cand > best {
            best = cand;
        } else {
            let tmp = pts[i][k];
            pts[i][k] = pts[j][k];
            pts[j][k] = tmp;
        }
    }
    pts
}

/// Initial design of experiments: x-coordinates from a maximin-improved LHS
/// over the joint box, u-coordinates resampled from the uncertainty
/// distribution. The same (x, u) set serves the objective and every
/// constraint at start-up.
pub fn init_doe(
    problem: &ProblemDefinition,
    t_init: usize,
    seed: u64,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let tree = SeedTree::new(seed);
    let joint: Vec<(f64, f64)> = problem
        .x_bounds
        .iter()
        .chain(problem.u_bounds.iter())
        .copied()
        .collect();
    let pts = maximin_lhs(&joint, t_init, tree.child("lhs").seed(), 200 * t_init);
    let mut rng = tree.child("u").rng();
    pts.into_iter()
        .map(|p| {
            let x = p[..problem.d()].to_vec();
            let u = problem.sample_u(&mut rng);
            (x, u)
        })
        .collect()
}
