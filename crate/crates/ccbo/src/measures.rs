//! Quantities defined by integration over the uncertainty distribution: the
//! averaged objective process, the feasibility process, the probability of
//! feasibility and the incumbent feasible minimum.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CcboError, Result};
use crate::gp::{psd_cholesky, GpModel, SliceCache};
use crate::mvn::{bvn_cdf, mvn_cdf, normal_cdf};
use crate::point::JointPoint;
use crate::quadrature::UncertaintyQuadrature;
use crate::seed::SeedTree;

/// The constraint surrogate: either one scalar GP per constraint trained on
/// its own data, or a single multi-output GP over (x, u, p).
#[derive(Debug, Clone)]
pub enum ConstraintModel {
    Independent(Vec<GpModel>),
    Coupled(GpModel),
}

impl ConstraintModel {
    pub fn n_constraints(&self) -> usize {
        match self {
            ConstraintModel::Independent(ms) => ms.len(),
            ConstraintModel::Coupled(m) => m.space().n_outputs,
        }
    }
}

/// Monte-Carlo feasibility estimate at one design point.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityEstimate {
    pub pof: f64,
    pub expected_c: f64,
    pub n_traj: usize,
    pub n_u: usize,
}

/// Mean and covariance of the u-averaged objective process at the queried
/// design points.
pub fn z_process(
    objective: &GpModel,
    quad: &UncertaintyQuadrature,
    xs: &[Vec<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if objective.space().n_outputs != 1 {
        return Err(CcboError::ShapeMismatch(
            "z_process expects a scalar objective model".into(),
        ));
    }
    let m = quad.len();
    let mut queries = Vec::with_capacity(xs.len() * m);
    for x in xs {
        for u in &quad.nodes {
            queries.push(JointPoint::new(x.clone(), u.clone()));
        }
    }
    let (mean, cov) = objective.predict(&queries)?;
    let nx = xs.len();
    let mut mz = DVector::zeros(nx);
    let mut kz = DMatrix::zeros(nx, nx);
    for a in 0..nx {
        for (j, w) in quad.weights.iter().enumerate() {
            mz[a] += w * mean[a * m + j];
        }
        for b in 0..nx {
            let mut s = 0.0;
            for (j, wj) in quad.weights.iter().enumerate() {
                for (j2, wj2) in quad.weights.iter().enumerate() {
                    s += wj * wj2 * cov[(a * m + j, b * m + j2)];
                }
            }
            kz[(a, b)] = s;
        }
    }
    Ok((mz, kz))
}

/// Shared machinery for trajectory-based PoF estimation: per-model slice
/// caches plus one standard-normal draw reused across candidate designs
/// (common random numbers).
pub struct PofContext<'a> {
    caches: Vec<SliceCache<'a>>,
    z: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    pub n_traj: usize,
    pub alpha: f64,
}

impl<'a> PofContext<'a> {
    pub fn new(
        constraints: &'a ConstraintModel,
        quad: &UncertaintyQuadrature,
        n_traj: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_traj == 0 {
            return Err(CcboError::ParameterDomain("n_traj must be >= 1".into()));
        }
        let tree = SeedTree::new(seed);
        let (caches, z) = match constraints {
            ConstraintModel::Coupled(m) => {
                let cache = SliceCache::new(m, &quad.nodes);
                let nq = quad.len() * m.space().n_outputs;
                let z = standard_normal_matrix(n_traj, nq, tree.child("traj").seed());
                (vec![cache], vec![z])
            }
            ConstraintModel::Independent(ms) => {
                let mut caches = Vec::with_capacity(ms.len());
                let mut zs = Vec::with_capacity(ms.len());
                for (p, m) in ms.iter().enumerate() {
                    caches.push(SliceCache::new(m, &quad.nodes));
                    zs.push(standard_normal_matrix(
                        n_traj,
                        quad.len(),
                        tree.child_idx("traj", p as u64).seed(),
                    ));
                }
                (caches, zs)
            }
        };
        Ok(Self {
            caches,
            z,
            weights: quad.weights.clone(),
            n_traj,
            alpha,
        })
    }

    /// Trajectory-counting PoF at one design point.
    pub fn pof_at(&self, x: &[f64]) -> Result<f64> {
        let m = self.weights.len();
        // feasible[k*m + j]: trajectory k satisfies every constraint at node j.
        let mut feasible = vec![true; self.n_traj * m];
        for (cache, z) in self.caches.iter().zip(&self.z) {
            let a = cache.a_vec(x);
            let (mean, cov) = cache.posterior_full(&a);
            let scale = cov.diagonal().iter().cloned().fold(0.0f64, f64::max).max(1e-300);
            let lo = psd_cholesky(&cov, 1e-12 * scale, 1e-5 * scale);
            let traj = z * lo.transpose();
            let lq = cache.n_out;
            for k in 0..self.n_traj {
                for j in 0..m {
                    for p in 0..lq {
                        if traj[(k, j * lq + p)] + mean[j * lq + p] > 0.0 {
                            feasible[k * m + j] = false;
                        }
                    }
                }
            }
        }
        let mut count = 0usize;
        for k in 0..self.n_traj {
            let mut frac = 0.0;
            for j in 0..m {
                if feasible[k * m + j] {
                    frac += self.weights[j];
                }
            }
            if frac >= 1.0 - self.alpha - 1e-12 {
                count += 1;
            }
        }
        Ok(count as f64 / self.n_traj as f64)
    }
}

fn standard_normal_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut z: DMatrix<f64> = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            z[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    z
}

/// Node-wise expected feasibility machinery (the E[C] integrand).
pub struct EcContext<'a> {
    caches: Vec<SliceCache<'a>>,
    weights: Vec<f64>,
    pub alpha: f64,
    seed: SeedTree,
    coupled: bool,
}

impl<'a> EcContext<'a> {
    pub fn new(
        constraints: &'a ConstraintModel,
        quad: &UncertaintyQuadrature,
        alpha: f64,
        seed: u64,
    ) -> Self {
        let (caches, coupled) = match constraints {
            ConstraintModel::Coupled(m) => (vec![SliceCache::new(m, &quad.nodes)], true),
            ConstraintModel::Independent(ms) => (
                ms.iter().map(|m| SliceCache::new(m, &quad.nodes)).collect(),
                false,
            ),
        };
        Self {
            caches,
            weights: quad.weights.clone(),
            alpha,
            seed: SeedTree::new(seed),
            coupled,
        }
    }

    /// Integrated probability that all constraints hold at x.
    pub fn integrated_cdf_at(&self, x: &[f64]) -> Result<f64> {
        let m = self.weights.len();
        let mut probs = vec![1.0f64; m];
        if self.coupled {
            let cache = &self.caches[0];
            let l = cache.n_out;
            let a = cache.a_vec(x);
            let (means, blocks) = cache.posterior_nodewise(&a);
            for j in 0..m {
                let mj: Vec<f64> = (0..l).map(|p| means[j * l + p]).collect();
                probs[j] = if l == 1 {
                    gaussian_below(mj[0], blocks[j][(0, 0)].max(0.0).sqrt())
                } else if l == 2 {
                    bvn_block(&mj, &blocks[j])
                } else {
                    mvn_cdf(
                        &mj,
                        &blocks[j],
                        &vec![0.0; l],
                        self.seed.child_idx("mvn", j as u64).seed(),
                    )?
                    .p
                };
            }
        } else {
            for cache in &self.caches {
                let a = cache.a_vec(x);
                let (means, blocks) = cache.posterior_nodewise(&a);
                for j in 0..m {
                    let sd = blocks[j][(0, 0)].max(0.0).sqrt();
                    probs[j] *= gaussian_below(means[j], sd);
                }
            }
        }
        Ok(self.weights.iter().zip(&probs).map(|(w, p)| w * p).sum())
    }

    pub fn ec_at(&self, x: &[f64]) -> Result<f64> {
        Ok(1.0 - self.alpha - self.integrated_cdf_at(x)?)
    }
}

#[inline]
pub(crate) fn gaussian_below(mean: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        normal_cdf(-mean / sd)
    } else if mean <= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// (P(Y <= 0), P(Y > 0)) for Y ~ N(mean, sd^2), each tail computed directly
/// so deep-tail magnitudes survive instead of rounding to 0 or 1.
#[inline]
pub(crate) fn feas_tails(mean: f64, sd: f64) -> (f64, f64) {
    if sd > 0.0 {
        (normal_cdf(-mean / sd), normal_cdf(mean / sd))
    } else if mean <= 0.0 {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    }
}

/// Bernoulli variance p(1-p) for the all-feasible indicator of independent
/// Gaussians, assembled from the per-constraint tails without cancellation:
/// 1 - prod(1 - q_i) accumulated as s <- s + q - s q.
#[inline]
pub(crate) fn bernoulli_var_indep(tails: &[(f64, f64)]) -> f64 {
    let mut p_all = 1.0;
    let mut q_all = 0.0;
    for &(p, q) in tails {
        p_all *= p;
        q_all = q_all + q - q_all * q;
    }
    (p_all * q_all).max(0.0)
}

/// Bernoulli variance of the joint indicator {Y1 <= 0, Y2 <= 0} for a
/// bivariate Gaussian block, with the complement by inclusion-exclusion:
/// 1 - p = q1 + q2 - P(Y1 > 0, Y2 > 0).
#[inline]
pub(crate) fn bernoulli_var_bvn(mean: &[f64], block: &DMatrix<f64>) -> f64 {
    let s0 = block[(0, 0)].max(0.0).sqrt();
    let s1 = block[(1, 1)].max(0.0).sqrt();
    if s0 == 0.0 || s1 == 0.0 {
        let t0 = feas_tails(mean[0], s0);
        let t1 = feas_tails(mean[1], s1);
        return bernoulli_var_indep(&[t0, t1]);
    }
    let rho = (block[(0, 1)] / (s0 * s1)).clamp(-1.0, 1.0);
    let a = -mean[0] / s0;
    let b = -mean[1] / s1;
    let p = bvn_cdf(a, b, rho);
    let q = (normal_cdf(-a) + normal_cdf(-b) - crate::mvn::bvn_upper(a, b, rho)).max(0.0);
    (p * q).max(0.0)
}

#[inline]
pub(crate) fn bvn_block(mean: &[f64], block: &DMatrix<f64>) -> f64 {
    let s0 = block[(0, 0)].max(0.0).sqrt();
    let s1 = block[(1, 1)].max(0.0).sqrt();
    if s0 == 0.0 || s1 == 0.0 {
        return gaussian_below(mean[0], s0) * gaussian_below(mean[1], s1);
    }
    let rho = (block[(0, 1)] / (s0 * s1)).clamp(-1.0, 1.0);
    bvn_cdf(-mean[0] / s0, -mean[1] / s1, rho)
}

/// Trajectory-based probability of feasibility plus the expected feasibility
/// margin at one design point.
pub fn pof_trajectories(
    constraints: &ConstraintModel,
    x: &[f64],
    quad: &UncertaintyQuadrature,
    n_traj: usize,
    alpha: f64,
    seed: u64,
) -> Result<FeasibilityEstimate> {
    let ctx = PofContext::new(constraints, quad, n_traj, alpha, seed)?;
    let pof = ctx.pof_at(x)?;
    let ec = EcContext::new(constraints, quad, alpha, SeedTree::new(seed).child("ec").seed())
        .ec_at(x)?;
    Ok(FeasibilityEstimate {
        pof,
        expected_c: ec,
        n_traj,
        n_u: quad.len(),
    })
}

/// Expected value of the feasibility process C at x.
pub fn expected_c(
    constraints: &ConstraintModel,
    x: &[f64],
    quad: &UncertaintyQuadrature,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    EcContext::new(constraints, quad, alpha, seed).ec_at(x)
}

/// The incumbent feasible minimum over a candidate set.
#[derive(Debug, Clone)]
pub struct Incumbent {
    pub z_min_feas: f64,
    pub x: Vec<f64>,
    pub index: usize,
    /// Set when no candidate satisfies E[C] <= 0; the candidate with the
    /// largest integrated feasibility probability is taken instead.
    pub fallback: bool,
}

pub fn incumbent_feasible_min(
    objective: &GpModel,
    constraints: &ConstraintModel,
    candidates: &[Vec<f64>],
    quad: &UncertaintyQuadrature,
    alpha: f64,
    seed: u64,
) -> Result<Incumbent> {
    if candidates.is_empty() {
        return Err(CcboError::ParameterDomain("empty candidate set".into()));
    }
    let zc = SliceCache::new(objective, &quad.nodes).with_weights(&quad.weights);
    let mz: Vec<f64> = candidates.iter().map(|x| zc.mean_z(&zc.a_vec(x))).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| mz[a].partial_cmp(&mz[b]).unwrap().then(a.cmp(&b)));

    let ec = EcContext::new(constraints, quad, alpha, seed);
    let mut best_fallback: Option<(f64, usize)> = None;
    for &i in &order {
        let c = ec.ec_at(&candidates[i])?;
        if c <= 0.0 {
            return Ok(Incumbent {
                z_min_feas: mz[i],
                x: candidates[i].clone(),
                index: i,
                fallback: false,
            });
        }
        let better = match best_fallback {
            None => true,
            Some((bc, bi)) => c < bc || (c == bc && i < bi),
        };
        if better {
            best_fallback = Some((c, i));
        }
    }
    let (_, i) = best_fallback.unwrap();
    Ok(Incumbent {
        z_min_feas: mz[i],
        x: candidates[i].clone(),
        index: i,
        fallback: true,
    })
}

/// One repetition of the PoF modeling-error comparison between independent
/// and coupled constraint models.
#[derive(Debug, Clone)]
pub struct PofErrorRep {
    pub test_points: Vec<Vec<f64>>,
    pub err_independent: Vec<f64>,
    pub err_multioutput: Vec<f64>,
    pub mean_err_independent: f64,
    pub mean_err_multioutput: f64,
}

/// Trains both constraint surrogates on one design of experiments and
/// measures |PoF_model - PoF_true| over test designs, with the PoF of a model
/// evaluated as the u-averaged posterior probability of joint feasibility and
/// the true PoF as a Monte-Carlo count on the same u sample.
pub fn pof_error_study(
    problem: &crate::problems::ProblemDefinition,
    n_train: usize,
    n_test: usize,
    n_mc: usize,
    restarts: usize,
    seed: u64,
) -> Result<PofErrorRep> {
    use crate::train::{default_template, train_with, TrainControl};

    let tree = SeedTree::new(seed);
    let doe = crate::doe::init_doe(problem, n_train, tree.child("doe").seed());
    let l = problem.l();

    // Independent scalar models, one per constraint.
    let space1 = problem.objective_space();
    let control = TrainControl {
        n_restarts: restarts,
        ..TrainControl::default()
    };
    let mut indep = Vec::with_capacity(l);
    for p in 0..l {
        let pts: Vec<JointPoint> = doe
            .iter()
            .map(|(x, u)| JointPoint::new(x.clone(), u.clone()))
            .collect();
        let ys: Result<Vec<f64>> = doe
            .iter()
            .map(|(x, u)| problem.eval_constraint(p, x, u))
            .collect();
        let ys = ys?;
        let (spec, _) = train_with(
            &default_template(&space1),
            &space1,
            &pts,
            &ys,
            control,
            tree.child_idx("train-indep", p as u64).seed(),
        )?;
        indep.push(crate::gp::condition(&spec, &space1, &pts, &ys)?);
    }
    let indep = ConstraintModel::Independent(indep);

    // Coupled model on the stacked data.
    let space_l = problem.constraint_space_coupled();
    let mut pts2 = Vec::with_capacity(doe.len() * l);
    let mut ys2 = Vec::with_capacity(doe.len() * l);
    for (x, u) in &doe {
        for p in 0..l {
            pts2.push(JointPoint::with_output(x.clone(), u.clone(), p));
            ys2.push(problem.eval_constraint(p, x, u)?);
        }
    }
    let (spec2, _) = train_with(
        &default_template(&space_l),
        &space_l,
        &pts2,
        &ys2,
        control,
        tree.child("train-coupled").seed(),
    )?;
    let coupled = ConstraintModel::Coupled(crate::gp::condition(&spec2, &space_l, &pts2, &ys2)?);

    // Shared test designs and u sample.
    let test_points = crate::doe::lhs(&problem.x_bounds, n_test, tree.child("test-x").seed());
    let us = problem.sample_u_set(n_mc, tree.child("test-u").seed());
    let quad = UncertaintyQuadrature {
        nodes: us.clone(),
        weights: vec![1.0 / n_mc as f64; n_mc],
        scheme: crate::quadrature::QuadratureScheme::MonteCarlo,
    };
    let ec_indep = EcContext::new(&indep, &quad, 0.0, tree.child("mvn-i").seed());
    let ec_coupled = EcContext::new(&coupled, &quad, 0.0, tree.child("mvn-c").seed());

    let mut err_independent = Vec::with_capacity(n_test);
    let mut err_multioutput = Vec::with_capacity(n_test);
    for x in &test_points {
        let truth = crate::problems::true_pof(problem, x, &us);
        err_independent.push((ec_indep.integrated_cdf_at(x)? - truth).abs());
        err_multioutput.push((ec_coupled.integrated_cdf_at(x)? - truth).abs());
    }
    let mean_err_independent = err_independent.iter().sum::<f64>() / n_test as f64;
    let mean_err_multioutput = err_multioutput.iter().sum::<f64>() / n_test as f64;
    Ok(PofErrorRep {
        test_points,
        err_independent,
        err_multioutput,
        mean_err_independent,
        mean_err_multioutput,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::condition;
    use crate::kernel::KernelSpec;
    use crate::point::InputSpace;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn space_xu() -> InputSpace {
        InputSpace::scalar(vec![(0.0, 1.0)], vec![(0.0, 1.0)])
    }

    fn offset_model(offset: f64, var: f64) -> GpModel {
        // A scalar GP whose posterior is near-constant at `offset`.
        let spec = KernelSpec {
            variance: var,
            lengthscales: vec![10.0, 10.0],
            discrete: None,
            prior_mean: 0.0,
        };
        let pts = vec![
            JointPoint::new(vec![0.2], vec![0.2]),
            JointPoint::new(vec![0.8], vec![0.7]),
        ];
        // Offsets differ slightly so standardization keeps a nonzero scale.
        condition(&spec, &space_xu(), &pts, &[offset, offset + 1e-6]).unwrap()
    }

    #[test]
    fn certain_feasibility_gives_pof_one() {
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 16, 1);
        let cm = ConstraintModel::Independent(vec![offset_model(-1e6, 1e-6)]);
        let est = pof_trajectories(&cm, &[0.5], &quad, 64, 0.05, 7).unwrap();
        assert_relative_eq!(est.pof, 1.0);
        assert_relative_eq!(est.expected_c, -0.05, epsilon = 1e-9);
    }

    #[test]
    fn certain_infeasibility_gives_pof_zero() {
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 16, 1);
        let cm = ConstraintModel::Independent(vec![offset_model(1e6, 1e-6)]);
        let est = pof_trajectories(&cm, &[0.5], &quad, 64, 0.05, 7).unwrap();
        assert_relative_eq!(est.pof, 0.0);
        assert_relative_eq!(est.expected_c, 0.95, epsilon = 1e-9);
    }

    #[test]
    fn expected_c_stays_in_range() {
        let mut rng = SeedTree::new(5).rng();
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 24, 3);
        for _ in 0..10 {
            let spec = KernelSpec::new(1.0, vec![0.4, 0.4]).unwrap();
            let pts = vec![
                JointPoint::new(vec![rng.random_range(0.0..1.0)], vec![rng.random_range(0.0..1.0)]),
                JointPoint::new(vec![rng.random_range(0.0..1.0)], vec![rng.random_range(0.0..1.0)]),
                JointPoint::new(vec![rng.random_range(0.0..1.0)], vec![rng.random_range(0.0..1.0)]),
            ];
            let ys = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let m = match condition(&spec, &space_xu(), &pts, &ys) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let cm = ConstraintModel::Independent(vec![m]);
            let alpha = 0.05;
            let c = expected_c(&cm, &[0.3], &quad, alpha, 1).unwrap();
            assert!(c >= -alpha - 1e-12 && c <= 1.0 - alpha + 1e-12, "c = {c}");
        }
    }

    // Oracle: diagonal multi-output covariance must reduce to the product of
    // univariate Gaussian terms.
    #[test]
    fn diagonal_coupled_matches_independent_formula() {
        use crate::kernel::DiscreteKernel;
        let space2 = InputSpace::new(vec![(0.0, 1.0)], vec![(0.0, 1.0)], 2);
        let spec = KernelSpec::new(1.0, vec![0.4, 0.4])
            .unwrap()
            .with_discrete(DiscreteKernel::new(vec![std::f64::consts::FRAC_PI_2], 2, 1.0).unwrap());
        let mut pts = Vec::new();
        let mut ys = Vec::new();
        let mut rng = SeedTree::new(8).rng();
        for _ in 0..5 {
            let x: f64 = rng.random_range(0.0..1.0);
            let u: f64 = rng.random_range(0.0..1.0);
            for p in 0..2usize {
                pts.push(JointPoint::with_output(vec![x], vec![u], p));
                ys.push(rng.random_range(-1.0..1.0) + p as f64);
            }
        }
        let coupled = condition(&spec, &space2, &pts, &ys).unwrap();

        // Independent models conditioned on the same per-channel data.
        let mut indep = Vec::new();
        for p in 0..2usize {
            let pts_p: Vec<JointPoint> = pts
                .iter()
                .filter(|q| q.output == p)
                .map(|q| JointPoint::new(q.x.clone(), q.u.clone()))
                .collect();
            let ys_p: Vec<f64> = pts
                .iter()
                .zip(&ys)
                .filter(|(q, _)| q.output == p)
                .map(|(_, y)| *y)
                .collect();
            let spec1 = KernelSpec {
                variance: spec.variance,
                lengthscales: spec.lengthscales.clone(),
                discrete: None,
                prior_mean: spec.prior_mean,
            };
            indep.push(condition(&spec1, &space_xu(), &pts_p, &ys_p).unwrap());
        }
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 32, 4);
        let alpha = 0.05;
        let c_coupled =
            expected_c(&ConstraintModel::Coupled(coupled), &[0.45], &quad, alpha, 2).unwrap();
        let c_indep = expected_c(
            &ConstraintModel::Independent(indep),
            &[0.45],
            &quad,
            alpha,
            2,
        )
        .unwrap();
        assert!((c_coupled - c_indep).abs() < 1e-6, "{c_coupled} vs {c_indep}");
    }

    #[test]
    fn incumbent_prefers_feasible_argmin() {
        // Objective increases with x; constraint certainly feasible.
        let spec = KernelSpec::new(1.0, vec![0.4, 0.4]).unwrap();
        let pts = vec![
            JointPoint::new(vec![0.0], vec![0.5]),
            JointPoint::new(vec![1.0], vec![0.5]),
        ];
        let obj = condition(&spec, &space_xu(), &pts, &[0.0, 10.0]).unwrap();
        let cm = ConstraintModel::Independent(vec![offset_model(-1e6, 1e-6)]);
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 16, 1);
        let cands = vec![vec![0.9], vec![0.1], vec![0.5]];
        let inc = incumbent_feasible_min(&obj, &cm, &cands, &quad, 0.05, 3).unwrap();
        assert_eq!(inc.index, 1);
        assert!(!inc.fallback);
    }

    #[test]
    fn incumbent_falls_back_to_largest_feasibility() {
        let spec = KernelSpec::new(1.0, vec![0.4, 0.4]).unwrap();
        let pts = vec![
            JointPoint::new(vec![0.0], vec![0.5]),
            JointPoint::new(vec![1.0], vec![0.5]),
        ];
        let obj = condition(&spec, &space_xu(), &pts, &[0.0, 10.0]).unwrap();
        // Constraint mean rises with x: infeasible everywhere, but "least
        // infeasible" at small x.
        let cspec = KernelSpec::new(1.0, vec![0.4, 10.0]).unwrap();
        let cpts = vec![
            JointPoint::new(vec![0.0], vec![0.5]),
            JointPoint::new(vec![1.0], vec![0.5]),
        ];
        let con = condition(&cspec, &space_xu(), &cpts, &[2.0, 50.0]).unwrap();
        let cm = ConstraintModel::Independent(vec![con]);
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 16, 1);
        let cands = vec![vec![0.8], vec![0.3]];
        let inc = incumbent_feasible_min(&obj, &cm, &cands, &quad, 0.05, 3).unwrap();
        assert!(inc.fallback);
        assert_eq!(inc.index, 1);
    }

    #[test]
    fn single_feasible_candidate_wins_regardless_of_mean() {
        let spec = KernelSpec::new(1.0, vec![0.4, 0.4]).unwrap();
        let pts = vec![
            JointPoint::new(vec![0.0], vec![0.5]),
            JointPoint::new(vec![1.0], vec![0.5]),
        ];
        let obj = condition(&spec, &space_xu(), &pts, &[0.0, 10.0]).unwrap();
        // Constraint strongly negative only near x = 0.9.
        let cspec = KernelSpec::new(4.0, vec![0.12, 10.0]).unwrap();
        let cpts = vec![
            JointPoint::new(vec![0.1], vec![0.4]),
            JointPoint::new(vec![0.5], vec![0.5]),
            JointPoint::new(vec![0.9], vec![0.6]),
        ];
        let con = condition(&cspec, &space_xu(), &cpts, &[30.0, 30.0, -30.0]).unwrap();
        let cm = ConstraintModel::Independent(vec![con]);
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 16, 1);
        let cands = vec![vec![0.1], vec![0.5], vec![0.9]];
        let inc = incumbent_feasible_min(&obj, &cm, &cands, &quad, 0.05, 3).unwrap();
        assert_eq!(inc.index, 2);
        assert!(!inc.fallback);
    }

    #[test]
    fn z_process_constant_in_u_collapses_to_marginal() {
        // Huge u-lengthscale: the posterior is constant in u, so Z == F.
        let spec = KernelSpec::new(1.0, vec![0.3, 50.0]).unwrap();
        let pts = vec![
            JointPoint::new(vec![0.2], vec![0.3]),
            JointPoint::new(vec![0.7], vec![0.7]),
        ];
        let ys = [1.0, -1.0];
        let model = condition(&spec, &space_xu(), &pts, &ys).unwrap();
        let quad = UncertaintyQuadrature::tensor(&[(0.0, 1.0)], 12).unwrap();
        let (mz, kz) = z_process(&model, &quad, &[vec![0.2], vec![0.45]]).unwrap();
        let (mf, cf) = model
            .predict(&[JointPoint::new(vec![0.2], vec![0.5])])
            .unwrap();
        assert_relative_eq!(mz[0], mf[0], epsilon = 1e-4);
        assert_relative_eq!(kz[(0, 0)], cf[(0, 0)], epsilon = 1e-3);
        // Symmetry and PSD of the 2x2 z covariance.
        assert_relative_eq!(kz[(0, 1)], kz[(1, 0)], epsilon = 1e-10);
        let eig = kz.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-8 * kz.trace()));
    }

    #[test]
    fn z_process_empty_model_returns_prior_mean() {
        let spec = KernelSpec::new(1.0, vec![0.3, 0.3]).unwrap();
        let model = condition(&spec, &space_xu(), &[], &[]).unwrap();
        let quad = UncertaintyQuadrature::monte_carlo(&[(0.0, 1.0)], 8, 2);
        let (mz, _) = z_process(&model, &quad, &[vec![0.5]]).unwrap();
        assert_relative_eq!(mz[0], 0.0);
    }

    #[test]
    fn pof_error_study_zero_for_oracle_like_models() {
        // Tight surrogates of smooth constraints: error well below the
        // trivially achievable 0.5, and identical across reruns.
        let p = crate::problems::problem_4d();
        let rep = pof_error_study(&p, 25, 12, 400, 2, 77).unwrap();
        let rep2 = pof_error_study(&p, 25, 12, 400, 2, 77).unwrap();
        assert_eq!(rep.err_independent, rep2.err_independent);
        assert_eq!(rep.err_multioutput, rep2.err_multioutput);
        assert!(rep.mean_err_independent < 0.30, "{}", rep.mean_err_independent);
        assert!(rep.mean_err_multioutput < 0.30, "{}", rep.mean_err_multioutput);
        assert!(rep
            .err_independent
            .iter()
            .chain(&rep.err_multioutput)
            .all(|e| (0.0..=1.0).contains(e)));
    }

    // Oracle: plain Monte Carlo of the posterior-mean and covariance
    // integrals against the quadrature evaluation.
    #[test]
    fn z_process_matches_monte_carlo_oracle() {
        let spec = KernelSpec::new(1.3, vec![0.25, 0.3]).unwrap();
        let mut rng = SeedTree::new(17).rng();
        let pts: Vec<JointPoint> = (0..7)
            .map(|_| {
                JointPoint::new(
                    vec![rng.random_range(0.0..1.0)],
                    vec![rng.random_range(0.0..1.0)],
                )
            })
            .collect();
        let ys: Vec<f64> = (0..7).map(|_| rng.random_range(-1.5..1.5)).collect();
        let model = condition(&spec, &space_xu(), &pts, &ys).unwrap();
        let quad = UncertaintyQuadrature::tensor(&[(0.0, 1.0)], 64).unwrap();
        let x = vec![0.4];
        let (mz, kz) = z_process(&model, &quad, &[x.clone()]).unwrap();

        // MC oracle on m_F with 2*10^5 u draws, k_F with independent pairs.
        let n_mc = 200_000;
        let us: Vec<Vec<f64>> = (0..n_mc).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let mut mean_acc = 0.0;
        for chunk in us.chunks(1000) {
            let qs: Vec<JointPoint> = chunk
                .iter()
                .map(|u| JointPoint::new(x.clone(), u.clone()))
                .collect();
            let m = model.predict_mean(&qs).unwrap();
            mean_acc += m.iter().sum::<f64>();
        }
        let m_oracle = mean_acc / n_mc as f64;
        assert!((mz[0] - m_oracle).abs() < 0.01, "{} vs {m_oracle}", mz[0]);

        let n_pairs = 4000;
        let mut cov_acc = 0.0;
        for i in 0..n_pairs {
            let qa = JointPoint::new(x.clone(), us[2 * i].clone());
            let qb = JointPoint::new(x.clone(), us[2 * i + 1].clone());
            let (_, c) = model.predict(&[qa, qb]).unwrap();
            cov_acc += c[(0, 1)];
        }
        let k_oracle = cov_acc / n_pairs as f64;
        let se = 3.0 * (spec.variance / (n_pairs as f64).sqrt());
        assert!(
            (kz[(0, 0)] - k_oracle).abs() < se.max(0.02),
            "{} vs {k_oracle}",
            kz[(0, 0)]
        );
    }
}
