use nalgebra::DMatrix;

use crate::error::{CcboError, Result};
use crate::point::JointPoint;

/// Output-correlation part of an output-as-input kernel: an l×l PSD matrix
/// parameterized by hypersphere angles.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteKernel {
    /// Free angles packed row-wise: theta_{2,1}, theta_{3,1}, theta_{3,2}, ...
    /// Exactly l(l-1)/2 entries, each in [-pi, pi].
    pub angles: Vec<f64>,
    pub n_levels: usize,
    /// Common diagonal value of the level covariance matrix.
    pub sigma2: f64,
}

impl DiscreteKernel {
    pub fn new(angles: Vec<f64>, n_levels: usize, sigma2: f64) -> Result<Self> {
        if angles.len() != n_levels * (n_levels - 1) / 2 {
            return Err(CcboError::ShapeMismatch(format!(
                "{} angles given, {} levels need {}",
                angles.len(),
                n_levels,
                n_levels * (n_levels - 1) / 2
            )));
        }
        let k = Self {
            angles,
            n_levels,
            sigma2,
        };
        k.level_matrix()?;
        Ok(k)
    }

    /// The l×l covariance matrix between output levels.
    pub fn level_matrix(&self) -> Result<DMatrix<f64>> {
        hypersphere_matrix(&self.angles, self.n_levels, self.sigma2)
    }
}

pub fn n_free_angles(n_levels: usize) -> usize {
    n_levels * (n_levels - 1) / 2
}

/// Maps each output level onto a point of the unit hypersphere and returns the
/// Gram matrix of the mapped points scaled to a common diagonal `sigma2`.
///
/// Level m (1-based) uses the m-1 angles theta_{m,1..m-1}; the remaining
/// coordinates are structurally zero, which removes rotation indeterminacy.
pub fn hypersphere_matrix(angles: &[f64], n_levels: usize, sigma2: f64) -> Result<DMatrix<f64>> {
    if n_levels == 0 {
        return Err(CcboError::ParameterDomain("need at least one level".into()));
    }
    if sigma2 <= 0.0 {
        return Err(CcboError::ParameterDomain(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    if angles.len() != n_free_angles(n_levels) {
        return Err(CcboError::ShapeMismatch(format!(
            "{} angles given, {} levels need {}",
            angles.len(),
            n_levels,
            n_free_angles(n_levels)
        )));
    }
    for &a in angles {
        if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&a) {
            return Err(CcboError::ParameterDomain(format!(
                "angle {a} outside [-pi, pi]"
            )));
        }
    }

    let l = n_levels;
    // Row m: [cos t1, sin t1 cos t2, ..., sin t1..sin t_{m-2} cos t_{m-1}, sin t1..sin t_{m-1}, 0...]
    let mut b = DMatrix::<f64>::zeros(l, l);
    b[(0, 0)] = 1.0;
    let mut offset = 0;
    for m in 1..l {
        let row_angles = &angles[offset..offset + m];
        offset += m;
        let mut sin_prod = 1.0;
        for (d, &theta) in row_angles.iter().enumerate() {
            b[(m, d)] = theta.cos() * sin_prod;
            sin_prod *= theta.sin();
        }
        b[(m, m)] = sin_prod;
    }
    let mut t = &b * b.transpose();
    t.scale_mut(sigma2);
    // Row norms are exactly 1 analytically; pin the diagonal against roundoff.
    for i in 0..l {
        t[(i, i)] = sigma2;
    }
    Ok(t)
}

/// Kernel of a scalar GP over the joint space, optionally extended with a
/// nominal output index (output-as-input encoding).
///
/// The continuous part is an anisotropic squared-exponential on normalized
/// coordinates; the full kernel is the product of the continuous part and the
/// level covariance when a discrete part is present.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    /// Process variance of the continuous part (standardized output units).
    pub variance: f64,
    /// One positive lengthscale per continuous input dimension.
    pub lengthscales: Vec<f64>,
    pub discrete: Option<DiscreteKernel>,
    /// Constant prior mean (standardized output units).
    pub prior_mean: f64,
}

impl KernelSpec {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let spec = Self {
            variance,
            lengthscales,
            discrete: None,
            prior_mean: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_discrete(mut self, discrete: DiscreteKernel) -> Self {
        self.discrete = Some(discrete);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.variance <= 0.0 || !self.variance.is_finite() {
            return Err(CcboError::ParameterDomain(format!(
                "variance must be positive, got {}",
                self.variance
            )));
        }
        if self.lengthscales.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(CcboError::ParameterDomain(
                "lengthscales must be strictly positive".into(),
            ));
        }
        if let Some(d) = &self.discrete {
            d.level_matrix()?;
        }
        Ok(())
    }

    pub fn n_outputs(&self) -> usize {
        self.discrete.as_ref().map_or(1, |d| d.n_levels)
    }

    /// Squared-exponential factor between two continuous feature vectors.
    pub fn continuous(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.lengthscales.len());
        debug_assert_eq!(b.len(), self.lengthscales.len());
        let mut s = 0.0;
        for ((&ai, &bi), &l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (ai - bi) / l;
            s += d * d;
        }
        (-0.5 * s).exp()
    }

    /// Full covariance between two feature vectors tagged with output levels.
    pub fn eval_features(&self, a: &[f64], pa: usize, b: &[f64], pb: usize) -> f64 {
        let k = self.variance * self.continuous(a, b);
        match &self.discrete {
            Some(d) => {
                let t = d
                    .level_matrix()
                    .expect("validated discrete kernel");
                k * t[(pa, pb)]
            }
            None => k,
        }
    }
}

/// Covariance between two joint points, interpreting their raw coordinates in
/// the units the lengthscales are expressed in.
pub fn kernel_eval(spec: &KernelSpec, a: &JointPoint, b: &JointPoint) -> Result<f64> {
    let fa: Vec<f64> = a.coords().collect();
    let fb: Vec<f64> = b.coords().collect();
    if fa.len() != spec.lengthscales.len() || fb.len() != spec.lengthscales.len() {
        return Err(CcboError::ShapeMismatch(format!(
            "points have {}/{} coords, kernel has {} lengthscales",
            fa.len(),
            fb.len(),
            spec.lengthscales.len()
        )));
    }
    let l = spec.n_outputs();
    if a.output >= l || b.output >= l {
        return Err(CcboError::ShapeMismatch(format!(
            "output index ({}, {}) out of range for {} outputs",
            a.output, b.output, l
        )));
    }
    Ok(spec.eval_features(&fa, a.output, &fb, b.output))
}
