//! Integration rules over the uncertain domain.

use rand::Rng;

use crate::error::{CcboError, Result};
use crate::seed::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureScheme {
    /// Fixed seeded Monte-Carlo node set, equal weights.
    MonteCarlo,
    /// Tensorized Gauss-Legendre rule (small m only).
    Tensor,
}

/// Nodes and probability weights approximating integrals against the
/// uncertainty distribution (independent uniform over the u box here).
#[derive(Debug, Clone)]
pub struct UncertaintyQuadrature {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub scheme: QuadratureScheme,
}

impl UncertaintyQuadrature {
    pub fn monte_carlo(u_bounds: &[(f64, f64)], n_nodes: usize, seed: u64) -> Self {
        let mut rng = SeedTree::new(seed).rng();
        let nodes = (0..n_nodes)
            .map(|_| {
                u_bounds
                    .iter()
                    .map(|&(lo, hi)| rng.random_range(lo..=hi))
                    .collect()
            })
            .collect();
        Self {
            nodes,
            weights: vec![1.0 / n_nodes as f64; n_nodes],
            scheme: QuadratureScheme::MonteCarlo,
        }
    }

    pub fn tensor(u_bounds: &[(f64, f64)], nodes_per_dim: usize) -> Result<Self> {
        let m = u_bounds.len();
        if m > 2 {
            return Err(CcboError::InvalidConfig(format!(
                "tensor quadrature supports m <= 2, got {m}"
            )));
        }
        if nodes_per_dim == 0 {
            return Err(CcboError::InvalidConfig("need at least one node".into()));
        }
        let (gx, gw) = gauss_legendre(nodes_per_dim);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        if m == 0 {
            nodes.push(Vec::new());
            weights.push(1.0);
        } else if m == 1 {
            let (lo, hi) = u_bounds[0];
            for (x, w) in gx.iter().zip(&gw) {
                nodes.push(vec![lo + (hi - lo) * 0.5 * (x + 1.0)]);
                weights.push(w * 0.5);
            }
        } else {
            for (x0, w0) in gx.iter().zip(&gw) {
                for (x1, w1) in gx.iter().zip(&gw) {
                    let (lo0, hi0) = u_bounds[0];
                    let (lo1, hi1) = u_bounds[1];
                    nodes.push(vec![
                        lo0 + (hi0 - lo0) * 0.5 * (x0 + 1.0),
                        lo1 + (hi1 - lo1) * 0.5 * (x1 + 1.0),
                    ]);
                    weights.push(w0 * w1 * 0.25);
                }
            }
        }
        Ok(Self {
            nodes,
            weights,
            scheme: QuadratureScheme::Tensor,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self, u_bounds: &[(f64, f64)]) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CcboError::InvalidConfig(format!(
                "quadrature weights sum to {sum}"
            )));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(CcboError::InvalidConfig("negative quadrature weight".into()));
        }
        for n in &self.nodes {
            if n.len() != u_bounds.len()
                || n.iter()
                    .zip(u_bounds)
                    .any(|(v, (lo, hi))| *v < lo - 1e-12 || *v > hi + 1e-12)
            {
                return Err(CcboError::InvalidConfig("quadrature node outside bounds".into()));
            }
        }
        Ok(())
    }
}

/// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            // Legendre polynomial and derivative by recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                let mut p0 = 1.0;
                let mut p1 = x;
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                xs[i] = -x;
                xs[n - 1 - i] = x;
                ws[i] = 2.0 / ((1.0 - x * x) * dp * dp);
                ws[n - 1 - i] = ws[i];
                break;
            }
        }
    }
    if n % 2 == 1 {
        xs[n / 2] = 0.0;
    }
    (xs, ws)
}
