use crate::error::{CcboError, Result};

/// A point in the joint design/uncertainty space, optionally tagged with the
/// index of the output (constraint) it refers to. Scalar models use output 0.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPoint {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub output: usize,
}

impl JointPoint {
    pub fn new(x: Vec<f64>, u: Vec<f64>) -> Self {
        Self { x, u, output: 0 }
    }

    pub fn with_output(x: Vec<f64>, u: Vec<f64>, output: usize) -> Self {
        Self { x, u, output }
    }

    /// Continuous coordinates, design part first.
    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        self.x.iter().chain(self.u.iter()).copied()
    }
}

/// Box bounds of the joint space plus the number of model outputs.
///
/// Continuous inputs are affinely mapped to [0, 1] per dimension before any
/// kernel evaluation; lengthscales are expressed in these normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpace {
    pub x_bounds: Vec<(f64, f64)>,
    pub u_bounds: Vec<(f64, f64)>,
    pub n_outputs: usize,
}

impl InputSpace {
    pub fn new(x_bounds: Vec<(f64, f64)>, u_bounds: Vec<(f64, f64)>, n_outputs: usize) -> Self {
        Self {
            x_bounds,
            u_bounds,
            n_outputs,
        }
    }

    pub fn scalar(x_bounds: Vec<(f64, f64)>, u_bounds: Vec<(f64, f64)>) -> Self {
        Self::new(x_bounds, u_bounds, 1)
    }

    pub fn dim(&self) -> usize {
        self.x_bounds.len() + self.u_bounds.len()
    }

    pub fn d(&self) -> usize {
        self.x_bounds.len()
    }

    pub fn m(&self) -> usize {
        self.u_bounds.len()
    }

    fn bound(&self, k: usize) -> (f64, f64) {
        if k < self.x_bounds.len() {
            self.x_bounds[k]
        } else {
            self.u_bounds[k - self.x_bounds.len()]
        }
    }

    /// Maps one continuous coordinate to [0, 1]. Degenerate bounds map to 0.
    pub fn normalize_coord(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = self.bound(k);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn check(&self, p: &JointPoint) -> Result<()> {
        if p.x.len() != self.x_bounds.len() || p.u.len() != self.u_bounds.len() {
            return Err(CcboError::ShapeMismatch(format!(
                "point has ({}, {}) coords, space expects ({}, {})",
                p.x.len(),
                p.u.len(),
                self.x_bounds.len(),
                self.u_bounds.len()
            )));
        }
        if p.output >= self.n_outputs {
            return Err(CcboError::ShapeMismatch(format!(
                "output index {} out of range for {} outputs",
                p.output, self.n_outputs
            )));
        }
        Ok(())
    }

    /// Normalized continuous features of a point (no bounds check).
    pub fn features(&self, p: &JointPoint) -> Vec<f64> {
        p.coords()
            .enumerate()
            .map(|(k, v)| self.normalize_coord(k, v))
            .collect()
    }

    pub fn contains(&self, p: &JointPoint) -> bool {
        let tol = 1e-9;
        p.x.iter()
            .zip(&self.x_bounds)
            .chain(p.u.iter().zip(&self.u_bounds))
            .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }
}
