//! Benchmark problem definitions with true-function oracles.

use std::sync::Arc;

use rand::Rng;

use crate::error::{CcboError, Result};
use crate::point::InputSpace;
use crate::seed::SeedTree;

type EvalFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// A chance-constrained problem: minimize E_U[f(x,U)] subject to
/// P(g_p(x,U) <= 0 for all p) >= 1 - alpha, with U uniform over its box.
#[derive(Clone)]
pub struct ProblemDefinition {
    pub name: String,
    pub x_bounds: Vec<(f64, f64)>,
    pub u_bounds: Vec<(f64, f64)>,
    pub alpha: f64,
    objective: EvalFn,
    constraints: Vec<EvalFn>,
}

impl std::fmt::Debug for ProblemDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemDefinition")
            .field("name", &self.name)
            .field("d", &self.d())
            .field("m", &self.m())
            .field("l", &self.l())
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl ProblemDefinition {
    pub fn new(
        name: impl Into<String>,
        x_bounds: Vec<(f64, f64)>,
        u_bounds: Vec<(f64, f64)>,
        alpha: f64,
        objective: EvalFn,
        constraints: Vec<EvalFn>,
    ) -> Self {
        Self {
            name: name.into(),
            x_bounds,
            u_bounds,
            alpha,
            objective,
            constraints,
        }
    }

    pub fn d(&self) -> usize {
        self.x_bounds.len()
    }

    pub fn m(&self) -> usize {
        self.u_bounds.len()
    }

    pub fn l(&self) -> usize {
        self.constraints.len()
    }

    pub fn objective_space(&self) -> InputSpace {
        InputSpace::scalar(self.x_bounds.clone(), self.u_bounds.clone())
    }

    pub fn constraint_space_coupled(&self) -> InputSpace {
        InputSpace::new(self.x_bounds.clone(), self.u_bounds.clone(), self.l())
    }

    fn check_point(&self, x: &[f64], u: &[f64]) -> Result<()> {
        let tol = 1e-9;
        let ok = x.len() == self.d()
            && u.len() == self.m()
            && x.iter()
                .zip(&self.x_bounds)
                .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
            && u.iter()
                .zip(&self.u_bounds)
                .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol);
        if ok {
            Ok(())
        } else {
            Err(CcboError::EvaluationFailed(format!(
                "point x={x:?} u={u:?} outside the box of {}",
                self.name
            )))
        }
    }

    pub fn eval_objective(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        self.check_point(x, u)?;
        let v = (self.objective)(x, u);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CcboError::EvaluationFailed(format!(
                "objective of {} returned {v} at x={x:?} u={u:?}",
                self.name
            )))
        }
    }

    pub fn eval_constraint(&self, p: usize, x: &[f64], u: &[f64]) -> Result<f64> {
        self.check_point(x, u)?;
        let v = (self.constraints[p])(x, u);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CcboError::EvaluationFailed(format!(
                "constraint {p} of {} returned {v} at x={x:?} u={u:?}",
                self.name
            )))
        }
    }

    /// Unchecked evaluation for oracle-side sweeps.
    pub fn constraint_raw(&self, p: usize, x: &[f64], u: &[f64]) -> f64 {
        (self.constraints[p])(x, u)
    }

    pub fn objective_raw(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.objective)(x, u)
    }

    pub fn sample_u<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.u_bounds
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..=hi))
            .collect()
    }

    pub fn sample_u_set(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeedTree::new(seed).rng();
        (0..n).map(|_| self.sample_u(&mut rng)).collect()
    }
}

/// 1 design variable, 1 uniform random variable, 2 anticorrelated constraints.
pub fn problem_2d() -> ProblemDefinition {
    ProblemDefinition::new(
        "analytic-2d",
        vec![(13.0, 100.0)],
        vec![(0.0, 100.0)],
        0.05,
        Arc::new(|x, u| (x[0] - 10.0).powi(3) + (u[0] - 20.0).powi(3)),
        vec![
            Arc::new(|x, u| -(x[0] - 5.0).powi(2) - (u[0] - 5.0).powi(2) + 500.0),
            Arc::new(|x, u| (x[0] - 6.0).powi(2) + (u[0] - 5.0).powi(2) - 9000.0),
        ],
    )
}

/// 2 design variables, 2 uniform random variables, 2 linked constraints
/// (the second is a transformation of the first).
pub fn problem_4d() -> ProblemDefinition {
    let g1 = |x: &[f64], u: &[f64]| -x[0] * x[0] + 5.0 * x[1] - u[0] + u[1] * u[1] - 1.0;
    ProblemDefinition::new(
        "analytic-4d",
        vec![(-5.0, 5.0), (-5.0, 5.0)],
        vec![(-5.0, 5.0), (-5.0, 5.0)],
        0.05,
        Arc::new(|x, u| {
            5.0 * (x[0] * x[0] + x[1] * x[1]) - (u[0] * u[0] + u[1] * u[1])
                + x[0] * (u[1] - u[0] + 5.0)
                + x[1] * (u[0] - u[1] + 3.0)
        }),
        vec![
            Arc::new(g1),
            Arc::new(move |x, u| g1(x, u) * (x[0] + 5.0) / 5.0 - u[0] - 1.0),
        ],
    )
}

pub fn by_name(name: &str) -> Result<ProblemDefinition> {
    match name {
        "analytic-2d" => Ok(problem_2d()),
        "analytic-4d" => Ok(problem_4d()),
        other => Err(CcboError::InvalidConfig(format!(
            "unknown problem '{other}' (available: analytic-2d, analytic-4d)"
        ))),
    }
}

/// Monte-Carlo estimate of E_U[f(x, U)] on a fixed u sample.
pub fn true_mean_objective(problem: &ProblemDefinition, x: &[f64], u_samples: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for u in u_samples {
        acc += problem.objective_raw(x, u);
    }
    acc / u_samples.len() as f64
}

/// Monte-Carlo estimate of P(all g_p(x, U) <= 0) on a fixed u sample.
pub fn true_pof(problem: &ProblemDefinition, x: &[f64], u_samples: &[Vec<f64>]) -> f64 {
    let mut count = 0usize;
    'outer: for u in u_samples {
        for p in 0..problem.l() {
            if problem.constraint_raw(p, x, u) > 0.0 {
                continue 'outer;
            }
        }
        count += 1;
    }
    count as f64 / u_samples.len() as f64
}

/// Best feasible point of the true problem over an exhaustive candidate sweep.
#[derive(Debug, Clone)]
pub struct ReferenceOptimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub pof: f64,
    pub n_grid: usize,
    pub n_mc: usize,
    pub seed: u64,
}

/// Exhaustive enumeration: an LHS sweep of the design box scored by
/// fixed-sample Monte Carlo of the true functions.
pub fn reference_optimum(
    problem: &ProblemDefinition,
    n_grid: usize,
    n_mc: usize,
    seed: u64,
) -> Result<ReferenceOptimum> {
    if n_mc < 1_000 {
        return Err(CcboError::InvalidConfig("n_mc must be >= 1000".into()));
    }
    let tree = SeedTree::new(seed);
    let grid = crate::doe::lhs(&problem.x_bounds, n_grid, tree.child("grid").seed());
    let us = problem.sample_u_set(n_mc, tree.child("mc").seed());

    let means: Vec<f64> = grid
        .iter()
        .map(|x| true_mean_objective(problem, x, &us))
        .collect();
    let mut order: Vec<usize> = (0..n_grid).collect();
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap().then(a.cmp(&b)));
    for &i in &order {
        let pof = true_pof(problem, &grid[i], &us);
        if pof >= 1.0 - problem.alpha {
            return Ok(ReferenceOptimum {
                x: grid[i].clone(),
                value: means[i],
                pof,
                n_grid,
                n_mc,
                seed,
            });
        }
    }
    Err(CcboError::EvaluationFailed(format!(
        "no feasible point found for {} over {n_grid} candidates",
        problem.name
    )))
}
