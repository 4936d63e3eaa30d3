//! Maximum-likelihood hyperparameter estimation with a derivative-free local
//! search restarted from random points.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dfo::{minimize_unit_box, DfoOptions};
use crate::error::{CcboError, Result};
use crate::gp::{condition, ChannelStats, GpModel};
use crate::kernel::{hypersphere_matrix, n_free_angles, DiscreteKernel, KernelSpec};
use crate::point::{InputSpace, JointPoint};
use crate::seed::SeedTree;

const LS_LOG_BOUNDS: (f64, f64) = (-4.605170185988091, 2.302585092994046); // [1e-2, 1e1]
const VAR_LOG_BOUNDS: (f64, f64) = (-13.815510557964274, 4.605170185988092); // [1e-6, 1e2]
const MEAN_BOUNDS: (f64, f64) = (-2.0, 2.0);
const ANGLE_BOUNDS: (f64, f64) = (-std::f64::consts::PI, std::f64::consts::PI);

const PENALTY: f64 = 1e12;

/// Knobs for the likelihood search; the defaults follow the library-wide
/// protocol (20 restarts).
#[derive(Debug, Clone, Copy)]
pub struct TrainControl {
    pub n_restarts: usize,
    pub maxfun: usize,
    pub rhoend: f64,
}

impl Default for TrainControl {
    fn default() -> Self {
        Self {
            n_restarts: 20,
            maxfun: 250,
            rhoend: 1e-3,
        }
    }
}

struct ParamLayout {
    dim: usize,
    n_angles: usize,
    n_levels: usize,
}

impl ParamLayout {
    fn len(&self) -> usize {
        self.dim + 2 + self.n_angles
    }

    fn bounds(&self, k: usize) -> (f64, f64) {
        if k < self.dim {
            LS_LOG_BOUNDS
        } else if k == self.dim {
            VAR_LOG_BOUNDS
        } else if k == self.dim + 1 {
            MEAN_BOUNDS
        } else {
            ANGLE_BOUNDS
        }
    }

    fn to_unit(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(k, &v)| {
                let (lo, hi) = self.bounds(k);
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            })
            .collect()
    }

    fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .enumerate()
            .map(|(k, &v)| {
                let (lo, hi) = self.bounds(k);
                lo + (hi - lo) * v.clamp(0.0, 1.0)
            })
            .collect()
    }

    fn spec(&self, raw: &[f64], template: &KernelSpec) -> KernelSpec {
        let ls: Vec<f64> = raw[..self.dim].iter().map(|v| v.exp()).collect();
        let variance = raw[self.dim].exp();
        let prior_mean = raw[self.dim + 1];
        let discrete = if self.n_angles > 0 || template.discrete.is_some() {
            let sigma2 = template.discrete.as_ref().map_or(1.0, |d| d.sigma2);
            Some(DiscreteKernel {
                angles: raw[self.dim + 2..].to_vec(),
                n_levels: self.n_levels,
                sigma2,
            })
        } else {
            None
        };
        KernelSpec {
            variance,
            lengthscales: ls,
            discrete,
            prior_mean,
        }
    }

    fn pack(&self, spec: &KernelSpec) -> Vec<f64> {
        let mut raw = Vec::with_capacity(self.len());
        for &l in &spec.lengthscales {
            raw.push(l.max(1e-12).ln());
        }
        raw.push(spec.variance.max(1e-300).ln());
        raw.push(spec.prior_mean);
        if let Some(d) = &spec.discrete {
            raw.extend_from_slice(&d.angles);
        }
        raw
    }
}

/// Negative log marginal likelihood as a reusable evaluator over packed
/// hyperparameters. Squared coordinate differences are precomputed once.
struct LikelihoodEval {
    layout: ParamLayout,
    half_sq: Vec<DMatrix<f64>>,
    out_idx: Vec<usize>,
    y_std: DVector<f64>,
    sigma2: f64,
    n: usize,
}

impl LikelihoodEval {
    fn new(
        space: &InputSpace,
        points: &[JointPoint],
        outputs: &[f64],
        stats: &[ChannelStats],
        template: &KernelSpec,
    ) -> Self {
        let n = points.len();
        let dim = space.dim();
        let feats: Vec<Vec<f64>> = points.iter().map(|p| space.features(p)).collect();
        let half_sq = (0..dim)
            .map(|k| {
                DMatrix::from_fn(n, n, |i, j| {
                    let d = feats[i][k] - feats[j][k];
                    0.5 * d * d
                })
            })
            .collect();
        let out_idx: Vec<usize> = points.iter().map(|p| p.output).collect();
        let y_std = DVector::from_fn(n, |i, _| {
            (outputs[i] - stats[out_idx[i]].mean) / stats[out_idx[i]].std
        });
        let n_levels = space.n_outputs;
        let layout = ParamLayout {
            dim,
            n_angles: if n_levels > 1 { n_free_angles(n_levels) } else { 0 },
            n_levels,
        };
        let sigma2 = template.discrete.as_ref().map_or(1.0, |d| d.sigma2);
        Self {
            layout,
            half_sq,
            out_idx,
            y_std,
            sigma2,
            n,
        }
    }

    fn neg_ll(&self, raw: &[f64]) -> f64 {
        let n = self.n;
        let dim = self.layout.dim;
        let inv_l2: Vec<f64> = raw[..dim].iter().map(|v| (-2.0 * v).exp()).collect();
        let variance = raw[dim].exp();
        let mean = raw[dim + 1];
        let t = if self.layout.n_levels > 1 {
            match hypersphere_matrix(&raw[dim + 2..], self.layout.n_levels, self.sigma2) {
                Ok(t) => t,
                Err(_) => return PENALTY,
            }
        } else {
            DMatrix::from_element(1, 1, 1.0)
        };

        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for (d, hs) in self.half_sq.iter().enumerate() {
                    s += hs[(i, j)] * inv_l2[d];
                }
                let v = variance * (-s).exp() * t[(self.out_idx[i], self.out_idx[j])];
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        // Same jitter ladder as conditioning so the final model agrees.
        let mut jitter = 1e-10 * variance;
        let chol = loop {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            match nalgebra::Cholesky::new(kj) {
                Some(c) => break Some(c),
                None => {
                    jitter *= 10.0;
                    if jitter > 1e-4 * variance {
                        break None;
                    }
                }
            }
        };
        let Some(chol) = chol else { return PENALTY };
        let l = chol.l_dirty();
        let mut r = DVector::from_fn(n, |i, _| self.y_std[i] - mean);
        l.solve_lower_triangular_mut(&mut r);
        let quad = r.dot(&r);
        let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let ll = -0.5 * quad - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        if ll.is_finite() {
            -ll
        } else {
            PENALTY
        }
    }
}

/// Maximizes the log marginal likelihood over lengthscales, variance, prior
/// mean and discrete angles. The template provides the warm start; restarts
/// draw uniformly within the hyperparameter bounds.
pub fn train(
    template: &KernelSpec,
    space: &InputSpace,
    points: &[JointPoint],
    outputs: &[f64],
    n_restarts: usize,
    seed: u64,
) -> Result<(KernelSpec, f64)> {
    train_with(
        template,
        space,
        points,
        outputs,
        TrainControl {
            n_restarts,
            ..TrainControl::default()
        },
        seed,
    )
}

pub fn train_with(
    template: &KernelSpec,
    space: &InputSpace,
    points: &[JointPoint],
    outputs: &[f64],
    control: TrainControl,
    seed: u64,
) -> Result<(KernelSpec, f64)> {
    if points.len() < 2 {
        return Err(CcboError::TrainingFailed(format!(
            "need at least 2 data points, got {}",
            points.len()
        )));
    }
    if control.n_restarts == 0 {
        return Err(CcboError::TrainingFailed("need at least one restart".into()));
    }
    // Standardization statistics are fixed once per training call so the
    // objective is a pure function of the hyperparameters.
    let probe = condition(template, space, points, outputs)?;
    let stats = probe.channel_stats().to_vec();
    drop(probe);

    let eval = LikelihoodEval::new(space, points, outputs, &stats, template);
    let layout = &eval.layout;

    let mut starts: Vec<Vec<f64>> = vec![layout.to_unit(&layout.pack(template))];
    let mut rng = SeedTree::new(seed).child("train-starts").rng();
    for _ in 0..control.n_restarts {
        starts.push((0..layout.len()).map(|_| rng.random_range(0.0..1.0)).collect());
    }

    let opts = DfoOptions {
        maxfun: control.maxfun,
        rhoend: control.rhoend,
        ..DfoOptions::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &starts {
        let res = minimize_unit_box(|u| eval.neg_ll(&layout.from_unit(u)), s, opts);
        if best.as_ref().is_none_or(|(v, _)| res.value < *v) {
            best = Some((res.value, res.x));
        }
    }
    let (neg_ll, unit) = best.unwrap();
    if neg_ll >= PENALTY {
        return Err(CcboError::TrainingFailed(
            "every restart failed factorization".into(),
        ));
    }
    let spec = layout.spec(&layout.from_unit(&unit), template);
    Ok((spec, -neg_ll))
}

/// Convenience: train and condition in one step.
pub fn train_model(
    template: &KernelSpec,
    space: &InputSpace,
    points: &[JointPoint],
    outputs: &[f64],
    control: TrainControl,
    seed: u64,
) -> Result<GpModel> {
    let (spec, _) = train_with(template, space, points, outputs, control, seed)?;
    condition(&spec, space, points, outputs)
}

/// A neutral starting template for a given space.
pub fn default_template(space: &InputSpace) -> KernelSpec {
    let discrete = if space.n_outputs > 1 {
        Some(DiscreteKernel {
            angles: vec![std::f64::consts::FRAC_PI_2; n_free_angles(space.n_outputs)],
            n_levels: space.n_outputs,
            sigma2: 1.0,
        })
    } else {
        None
    };
    KernelSpec {
        variance: 1.0,
        lengthscales: vec![0.3; space.dim()],
        discrete,
        prior_mean: 0.0,
    }
}
