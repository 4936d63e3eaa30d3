//! Gaussian process conditioning, prediction and posterior sampling for both
//! scalar and output-as-input multi-output models.
//!
//! Continuous inputs are normalized to the unit box of the `InputSpace` and
//! outputs are standardized per channel before any kernel arithmetic; every
//! public result is mapped back to raw units. Interpolation is noise-free with
//! an adaptive diagonal jitter.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CcboError, Result};
use crate::kernel::KernelSpec;
use crate::point::{InputSpace, JointPoint};

/// Hard cap on conditioning rows; the coupled constraint model grows as
/// l*t_init + evaluations and a dense Cholesky beyond this is a desk-scale
/// memory/time hazard.
pub const DEFAULT_ROW_CAP: usize = 3000;

const JITTER_START_REL: f64 = 1e-10;
const JITTER_MAX_REL: f64 = 1e-4;

/// Mean/standard deviation used to standardize one output channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// A trained/conditioned Gaussian process. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GpModel {
    spec: KernelSpec,
    space: InputSpace,
    points: Vec<JointPoint>,
    feats: DMatrix<f64>,
    out_idx: Vec<usize>,
    y_raw: DVector<f64>,
    stats: Vec<ChannelStats>,
    level_mat: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

/// Conditions a GP on noise-free observations.
pub fn condition(
    spec: &KernelSpec,
    space: &InputSpace,
    points: &[JointPoint],
    outputs: &[f64],
) -> Result<GpModel> {
    condition_with_stats(spec, space, points, outputs, None)
}

/// Same as [`condition`] with externally fixed standardization statistics,
/// which keeps the effective prior identical across reconditionings.
pub fn condition_with_stats(
    spec: &KernelSpec,
    space: &InputSpace,
    points: &[JointPoint],
    outputs: &[f64],
    stats: Option<Vec<ChannelStats>>,
) -> Result<GpModel> {
    spec.validate()?;
    if points.len() != outputs.len() {
        return Err(CcboError::ShapeMismatch(format!(
            "{} inputs vs {} outputs",
            points.len(),
            outputs.len()
        )));
    }
    if spec.lengthscales.len() != space.dim() {
        return Err(CcboError::ShapeMismatch(format!(
            "kernel has {} lengthscales, space has {} dims",
            spec.lengthscales.len(),
            space.dim()
        )));
    }
    if spec.n_outputs() != space.n_outputs {
        return Err(CcboError::ShapeMismatch(format!(
            "kernel has {} outputs, space has {}",
            spec.n_outputs(),
            space.n_outputs
        )));
    }
    if points.len() > DEFAULT_ROW_CAP {
        return Err(CcboError::DataCap {
            rows: points.len(),
            cap: DEFAULT_ROW_CAP,
        });
    }
    for p in points {
        space.check(p)?;
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i] == points[j] {
                return Err(CcboError::DuplicateInput { first: i, second: j });
            }
        }
    }

    let n = points.len();
    let dim = space.dim();
    let l = space.n_outputs;
    let stats = match stats {
        Some(s) => {
            if s.len() != l {
                return Err(CcboError::ShapeMismatch(format!(
                    "{} channel stats for {} outputs",
                    s.len(),
                    l
                )));
            }
            s
        }
        None => channel_stats(points, outputs, l),
    };

    let feats = DMatrix::from_fn(n, dim, |i, k| {
        space.normalize_coord(k, points[i].coords().nth(k).unwrap())
    });
    let out_idx: Vec<usize> = points.iter().map(|p| p.output).collect();
    let y_raw = DVector::from_column_slice(outputs);
    let level_mat = match &spec.discrete {
        Some(d) => d.level_matrix()?,
        None => DMatrix::from_element(1, 1, 1.0),
    };

    let (chol_l, alpha, jitter) = if n == 0 {
        (DMatrix::zeros(0, 0), DVector::zeros(0), 0.0)
    } else {
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = kernel_rows(spec, &level_mat, &feats, &out_idx, i, j);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let resid = DVector::from_fn(n, |i, _| {
            (outputs[i] - stats[out_idx[i]].mean) / stats[out_idx[i]].std - spec.prior_mean
        });
        let (chol_l, jitter) = jittered_cholesky(
            &k,
            JITTER_START_REL * spec.variance,
            JITTER_MAX_REL * spec.variance,
        )?;
        let mut alpha = resid;
        solve_in_place(&chol_l, &mut alpha);
        (chol_l, alpha, jitter)
    };

    Ok(GpModel {
        spec: spec.clone(),
        space: space.clone(),
        points: points.to_vec(),
        feats,
        out_idx,
        y_raw,
        stats,
        level_mat,
        chol_l,
        alpha,
        jitter,
    })
}

fn channel_stats(points: &[JointPoint], outputs: &[f64], l: usize) -> Vec<ChannelStats> {
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); l];
    for (p, &y) in points.iter().zip(outputs) {
        let e = &mut sums[p.output];
        e.0 += y;
        e.1 += y * y;
        e.2 += 1;
    }
    sums.into_iter()
        .map(|(s, ss, c)| {
            if c == 0 {
                return ChannelStats { mean: 0.0, std: 1.0 };
            }
            let mean = s / c as f64;
            let var = (ss / c as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            ChannelStats {
                mean,
                std: if std > 1e-300 { std } else { 1.0 },
            }
        })
        .collect()
}

#[inline]
fn kernel_rows(
    spec: &KernelSpec,
    level_mat: &DMatrix<f64>,
    feats: &DMatrix<f64>,
    out_idx: &[usize],
    i: usize,
    j: usize,
) -> f64 {
    let dim = feats.ncols();
    let mut s = 0.0;
    for k in 0..dim {
        let d = (feats[(i, k)] - feats[(j, k)]) / spec.lengthscales[k];
        s += d * d;
    }
    spec.variance * (-0.5 * s).exp() * level_mat[(out_idx[i], out_idx[j])]
}

/// Lower-triangular Cholesky factor of `k + jitter*I`, escalating the jitter
/// tenfold from `start` until success or `max` is exceeded.
pub(crate) fn jittered_cholesky(
    k: &DMatrix<f64>,
    start: f64,
    max: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let mut jitter = start;
    loop {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = nalgebra::Cholesky::new(kj) {
            return Ok((ch.unpack(), jitter));
        }
        jitter *= 10.0;
        if jitter > max {
            return Err(CcboError::IllConditioned { max_jitter: max });
        }
    }
}

/// Factorization for posterior covariance blocks assembled as
/// prior - V^T V: the cancellation inherits O(eps * cond(K)) error from the
/// conditioning solves, so after the jitter ladder the matrix is projected
/// onto the PSD cone instead of failing.
pub(crate) fn psd_cholesky(k: &DMatrix<f64>, start: f64, max: f64) -> DMatrix<f64> {
    if let Ok((l, _)) = jittered_cholesky(k, start, max) {
        return l;
    }
    let eig = nalgebra::SymmetricEigen::new(k.clone());
    let floor = start.max(1e-300);
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    jittered_cholesky(&rebuilt, floor, f64::INFINITY)
        .expect("eigen-clipped matrix is positive definite")
        .0
}

/// Solves (L L^T) x = b in place.
fn solve_in_place(chol_l: &DMatrix<f64>, b: &mut DVector<f64>) {
    chol_l.solve_lower_triangular_mut(b);
    chol_l.tr_solve_lower_triangular_mut(b);
}

impl GpModel {
    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn space(&self) -> &InputSpace {
        &self.space
    }

    pub fn n_data(&self) -> usize {
        self.points.len()
    }

    pub fn data_inputs(&self) -> &[JointPoint] {
        &self.points
    }

    pub fn data_outputs(&self) -> &DVector<f64> {
        &self.y_raw
    }

    pub fn channel_stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub(crate) fn feats(&self) -> &DMatrix<f64> {
        &self.feats
    }

    pub(crate) fn out_idx(&self) -> &[usize] {
        &self.out_idx
    }

    pub(crate) fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub(crate) fn level_mat(&self) -> &DMatrix<f64> {
        &self.level_mat
    }

    pub(crate) fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    fn query_features(&self, queries: &[JointPoint]) -> Result<(DMatrix<f64>, Vec<usize>)> {
        for q in queries {
            self.space.check(q)?;
        }
        let dim = self.space.dim();
        let feats = DMatrix::from_fn(queries.len(), dim, |i, k| {
            self.space
                .normalize_coord(k, queries[i].coords().nth(k).unwrap())
        });
        Ok((feats, queries.iter().map(|q| q.output).collect()))
    }

    /// Covariance vector k(D, q) in standardized units.
    fn kvec(&self, qf: &DMatrix<f64>, qi: usize, qout: usize) -> DVector<f64> {
        let n = self.points.len();
        let dim = self.space.dim();
        DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for k in 0..dim {
                let d = (self.feats[(i, k)] - qf[(qi, k)]) / self.spec.lengthscales[k];
                s += d * d;
            }
            self.spec.variance * (-0.5 * s).exp() * self.level_mat[(self.out_idx[i], qout)]
        })
    }

    fn prior_cov(&self, qf: &DMatrix<f64>, qo: &[usize], a: usize, b: usize) -> f64 {
        let dim = self.space.dim();
        let mut s = 0.0;
        for k in 0..dim {
            let d = (qf[(a, k)] - qf[(b, k)]) / self.spec.lengthscales[k];
            s += d * d;
        }
        self.spec.variance * (-0.5 * s).exp() * self.level_mat[(qo[a], qo[b])]
    }

    /// Posterior mean and covariance over the queries, in raw output units.
    pub fn predict(&self, queries: &[JointPoint]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (qf, qo) = self.query_features(queries)?;
        let nq = queries.len();
        let n = self.points.len();

        let mut mean_std = DVector::from_element(nq, self.spec.prior_mean);
        let mut cov_std = DMatrix::from_fn(nq, nq, |a, b| self.prior_cov(&qf, &qo, a, b));

        if n > 0 {
            let mut kqd = DMatrix::zeros(n, nq);
            for q in 0..nq {
                kqd.set_column(q, &self.kvec(&qf, q, qo[q]));
            }
            for q in 0..nq {
                mean_std[q] += kqd.column(q).dot(&self.alpha);
            }
            let mut v = kqd;
            self.chol_l.solve_lower_triangular_mut(&mut v);
            cov_std -= v.transpose() * &v;
        }

        let mut mean = DVector::zeros(nq);
        let mut cov = DMatrix::zeros(nq, nq);
        for a in 0..nq {
            let sa = self.stats[qo[a]];
            mean[a] = sa.mean + sa.std * mean_std[a];
            for b in 0..nq {
                cov[(a, b)] = sa.std * self.stats[qo[b]].std * cov_std[(a, b)];
            }
        }
        Ok((mean, cov))
    }

    /// Posterior mean only (raw units).
    pub fn predict_mean(&self, queries: &[JointPoint]) -> Result<DVector<f64>> {
        let (qf, qo) = self.query_features(queries)?;
        let nq = queries.len();
        let mut mean = DVector::zeros(nq);
        for q in 0..nq {
            let mut m = self.spec.prior_mean;
            if self.points.len() > 0 {
                m += self.kvec(&qf, q, qo[q]).dot(&self.alpha);
            }
            let s = self.stats[qo[q]];
            mean[q] = s.mean + s.std * m;
        }
        Ok(mean)
    }

    /// Draws joint posterior trajectories over the queries; one row per
    /// trajectory, raw units, reproducible under a fixed seed.
    pub fn sample_trajectories(
        &self,
        queries: &[JointPoint],
        n_traj: usize,
        seed: u64,
    ) -> Result<DMatrix<f64>> {
        if n_traj == 0 {
            return Err(CcboError::ParameterDomain("n_traj must be >= 1".into()));
        }
        let (mean, cov) = self.predict(queries)?;
        let scale = cov.diagonal().iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        let (l, _) = jittered_cholesky(&cov, 1e-12 * scale, 1e-5 * scale)?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let nq = queries.len();
        let mut z: DMatrix<f64> = DMatrix::zeros(n_traj, nq);
        for i in 0..n_traj {
            for j in 0..nq {
                z[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
        let mut y: DMatrix<f64> = z * l.transpose();
        for i in 0..n_traj {
            for j in 0..nq {
                y[(i, j)] += mean[j];
            }
        }
        Ok(y)
    }

    /// One-step-ahead posterior covariance over the queries after pending
    /// points are nominally observed (Kriging Believer: the mean would not
    /// change, only the covariance shrinks).
    pub fn one_step_update_cov(
        &self,
        pending: &[JointPoint],
        queries: &[JointPoint],
    ) -> Result<DMatrix<f64>> {
        if pending.is_empty() {
            return Err(CcboError::ParameterDomain("pending must be non-empty".into()));
        }
        let all: Vec<JointPoint> = queries.iter().chain(pending.iter()).cloned().collect();
        let (_, cov) = self.predict(&all)?;
        let nq = queries.len();
        let np = pending.len();
        let kqq = cov.view((0, 0), (nq, nq)).into_owned();
        let kqp = cov.view((0, nq), (nq, np)).into_owned();
        let kpp = cov.view((nq, nq), (np, np)).into_owned();
        let scale = kpp.diagonal().iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        let (lp, _) = jittered_cholesky(&kpp, 1e-12 * scale, 1e-5 * scale)?;
        let mut w = kqp.transpose();
        lp.solve_lower_triangular_mut(&mut w);
        Ok(kqq - w.transpose() * w)
    }

    /// Gaussian log marginal likelihood of the conditioning data
    /// (standardized units), from the stored factorization.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.points.len();
        if n == 0 {
            return 0.0;
        }
        let resid = DVector::from_fn(n, |i, _| {
            (self.y_raw[i] - self.stats[self.out_idx[i]].mean) / self.stats[self.out_idx[i]].std
                - self.spec.prior_mean
        });
        let mut half = resid.clone();
        self.chol_l.solve_lower_triangular_mut(&mut half);
        let quad = half.dot(&half);
        let logdet: f64 = (0..n).map(|i| self.chol_l[(i, i)].ln()).sum::<f64>() * 2.0;
        -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Versioned plain-text dump of hyperparameters and data, for debugging.
    pub fn dump_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "ccbo-gp-dump v1").unwrap();
        writeln!(s, "variance {}", self.spec.variance).unwrap();
        writeln!(
            s,
            "lengthscales {}",
            self.spec
                .lengthscales
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )
        .unwrap();
        writeln!(s, "prior_mean {}", self.spec.prior_mean).unwrap();
        if let Some(d) = &self.spec.discrete {
            writeln!(
                s,
                "angles {}",
                d.angles.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
            )
            .unwrap();
            writeln!(s, "levels {} sigma2 {}", d.n_levels, d.sigma2).unwrap();
        }
        writeln!(s, "jitter {}", self.jitter).unwrap();
        writeln!(s, "n {}", self.points.len()).unwrap();
        for (p, y) in self.points.iter().zip(self.y_raw.iter()) {
            let xs = p.x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            let us = p.u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            writeln!(s, "row x[{xs}] u[{us}] p{} y {}", p.output, y).unwrap();
        }
        s
    }
}

/// Precomputed structures for repeated posterior evaluation at query sets of
/// the form {(x, u_j, p)} where the u_j are fixed and only x varies.
///
/// For the product kernel the data-to-query covariance factorizes as
/// a_i(x) * c_i(u_j, p), so per candidate x only the factor `a` and one
/// triangular solve are needed.
pub struct SliceCache<'a> {
    pub model: &'a GpModel,
    pub n_nodes: usize,
    pub n_out: usize,
    node_u_feats: DMatrix<f64>,
    c: DMatrix<f64>,
    prior: DMatrix<f64>,
    q_scale: Vec<f64>,
    q_off: Vec<f64>,
    // Optional quadrature weights over nodes (scalar models only).
    w: Option<DVector<f64>>,
    cw: Option<DVector<f64>>,
    w_prior_w: f64,
}

impl<'a> SliceCache<'a> {
    /// Builds the cache for queries at every output level of the model.
    pub fn new(model: &'a GpModel, u_nodes: &[Vec<f64>]) -> SliceCache<'a> {
        let space = model.space();
        let d = space.d();
        let m = space.m();
        let l = space.n_outputs;
        let nm = u_nodes.len();
        let node_u_feats = DMatrix::from_fn(nm, m, |j, k| {
            space.normalize_coord(d + k, u_nodes[j][k])
        });
        let n = model.n_data();
        let spec = model.spec();
        let t = model.level_mat();

        // b[i, j]: u-part kernel factor between data row i and node j.
        let mut b = DMatrix::zeros(n, nm);
        for i in 0..n {
            for j in 0..nm {
                let mut s = 0.0;
                for k in 0..m {
                    let dd = (model.feats()[(i, d + k)] - node_u_feats[(j, k)])
                        / spec.lengthscales[d + k];
                    s += dd * dd;
                }
                b[(i, j)] = spec.variance * (-0.5 * s).exp();
            }
        }
        let nq = nm * l;
        let mut c = DMatrix::zeros(n, nq);
        for i in 0..n {
            for j in 0..nm {
                for p in 0..l {
                    c[(i, j * l + p)] = b[(i, j)] * t[(p, model.out_idx()[i])];
                }
            }
        }
        // Prior block between queries: x parts coincide, so only u and level.
        let mut prior = DMatrix::zeros(nq, nq);
        for j in 0..nm {
            for j2 in 0..nm {
                let mut s = 0.0;
                for k in 0..m {
                    let dd = (node_u_feats[(j, k)] - node_u_feats[(j2, k)])
                        / spec.lengthscales[d + k];
                    s += dd * dd;
                }
                let bu = spec.variance * (-0.5 * s).exp();
                for p in 0..l {
                    for p2 in 0..l {
                        prior[(j * l + p, j2 * l + p2)] = bu * t[(p, p2)];
                    }
                }
            }
        }
        let mut q_scale = vec![0.0; nq];
        let mut q_off = vec![0.0; nq];
        for j in 0..nm {
            for p in 0..l {
                q_scale[j * l + p] = model.channel_stats()[p].std;
                q_off[j * l + p] = model.channel_stats()[p].mean;
            }
        }
        SliceCache {
            model,
            n_nodes: nm,
            n_out: l,
            node_u_feats,
            c,
            prior,
            q_scale,
            q_off,
            w: None,
            cw: None,
            w_prior_w: 0.0,
        }
    }

    /// Attaches quadrature weights (scalar models), enabling the O(n^2)
    /// mean/variance path for the u-averaged process.
    pub fn with_weights(mut self, w: &[f64]) -> Self {
        assert_eq!(self.n_out, 1, "weights path applies to scalar models");
        let w = DVector::from_column_slice(w);
        self.cw = Some(&self.c * &w);
        self.w_prior_w = (&self.prior * &w).dot(&w);
        self.w = Some(w);
        self
    }

    /// Data-row factors a_i(x) = continuous kernel between x and the x-part
    /// of data row i (normalized coordinates).
    pub fn a_vec(&self, x_raw: &[f64]) -> DVector<f64> {
        let space = self.model.space();
        let d = space.d();
        let spec = self.model.spec();
        let n = self.model.n_data();
        let xf: Vec<f64> = (0..d).map(|k| space.normalize_coord(k, x_raw[k])).collect();
        DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for k in 0..d {
                let dd = (self.model.feats()[(i, k)] - xf[k]) / spec.lengthscales[k];
                s += dd * dd;
            }
            (-0.5 * s).exp()
        })
    }

    /// Posterior mean (raw units) of the u-averaged objective at x.
    pub fn mean_z(&self, a: &DVector<f64>) -> f64 {
        let cw = self.cw.as_ref().expect("weights attached");
        let mut m = self.model.spec().prior_mean;
        if self.model.n_data() > 0 {
            let aw = a.component_mul(cw);
            m += aw.dot(self.model.alpha());
        }
        self.q_off[0] + self.q_scale[0] * m
    }

    /// L^{-1}(a .* (C w)): the projection vector behind `var_z`, needed by
    /// one-step-ahead covariance integrals.
    pub fn weighted_projection(&self, a: &DVector<f64>) -> DVector<f64> {
        let cw = self.cw.as_ref().expect("weights attached");
        let mut aw = a.component_mul(cw);
        if self.model.n_data() > 0 {
            self.model.chol_lower().solve_lower_triangular_mut(&mut aw);
        }
        aw
    }

    /// Posterior variance (raw units) of the u-averaged objective at x.
    pub fn var_z(&self, a: &DVector<f64>) -> f64 {
        let cw = self.cw.as_ref().expect("weights attached");
        let mut v = self.w_prior_w;
        if self.model.n_data() > 0 {
            let mut aw = a.component_mul(cw);
            self.model.chol_lower().solve_lower_triangular_mut(&mut aw);
            v -= aw.dot(&aw);
        }
        (self.q_scale[0] * self.q_scale[0] * v).max(0.0)
    }

    /// Posterior means (raw units) for every (node, output) query at x,
    /// ordered node-major.
    pub fn means(&self, a: &DVector<f64>) -> DVector<f64> {
        let nq = self.n_nodes * self.n_out;
        let pm = self.model.spec().prior_mean;
        let mut out = DVector::zeros(nq);
        if self.model.n_data() == 0 {
            for q in 0..nq {
                out[q] = self.q_off[q] + self.q_scale[q] * pm;
            }
            return out;
        }
        // means = C^T (a .* alpha) + prior_mean
        let aa = a.component_mul(self.model.alpha());
        let proj = self.c.tr_mul(&aa);
        for q in 0..nq {
            out[q] = self.q_off[q] + self.q_scale[q] * (pm + proj[q]);
        }
        out
    }

    /// V = L^{-1} (a .* C): the workhorse triangular solve, standardized units.
    pub fn v_matrix(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let n = self.model.n_data();
        let nq = self.n_nodes * self.n_out;
        let mut kq = DMatrix::zeros(n, nq);
        for i in 0..n {
            let ai = a[i];
            for q in 0..nq {
                kq[(i, q)] = ai * self.c[(i, q)];
            }
        }
        self.model.chol_lower().solve_lower_triangular_mut(&mut kq);
        kq
    }

    /// Full posterior (means raw, covariance raw) over all queries at x.
    pub fn posterior_full(&self, a: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let nq = self.n_nodes * self.n_out;
        let means = self.means(a);
        let mut cov = self.prior.clone();
        if self.model.n_data() > 0 {
            let v = self.v_matrix(a);
            cov -= v.tr_mul(&v);
        }
        for q in 0..nq {
            for q2 in 0..nq {
                cov[(q, q2)] *= self.q_scale[q] * self.q_scale[q2];
            }
        }
        (means, cov)
    }

    /// Posterior means plus the l×l covariance block of every node at x
    /// (raw units), skipping the cross-node covariance.
    pub fn posterior_nodewise(&self, a: &DVector<f64>) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        let l = self.n_out;
        let means = self.means(a);
        let v = if self.model.n_data() > 0 {
            Some(self.v_matrix(a))
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(self.n_nodes);
        for j in 0..self.n_nodes {
            let mut blk = DMatrix::zeros(l, l);
            for p in 0..l {
                for p2 in 0..=p {
                    let q = j * l + p;
                    let q2 = j * l + p2;
                    let mut val = self.prior[(q, q2)];
                    if let Some(v) = &v {
                        val -= v.column(q).dot(&v.column(q2));
                    }
                    val *= self.q_scale[q] * self.q_scale[q2];
                    blk[(p, p2)] = val;
                    blk[(p2, p)] = val;
                }
            }
            blocks.push(blk);
        }
        (means, blocks)
    }

    /// Prior covariance factor between node u_j and an arbitrary u (both at
    /// the same x), standardized units, for output pair (p, p').
    pub fn prior_node_to(&self, j: usize, u_feats: &[f64], p: usize, p2: usize) -> f64 {
        let space = self.model.space();
        let d = space.d();
        let spec = self.model.spec();
        let mut s = 0.0;
        for k in 0..space.m() {
            let dd = (self.node_u_feats[(j, k)] - u_feats[k]) / spec.lengthscales[d + k];
            s += dd * dd;
        }
        spec.variance * (-0.5 * s).exp() * self.model.level_mat()[(p, p2)]
    }

    pub fn scale(&self, q: usize) -> f64 {
        self.q_scale[q]
    }

    pub fn prior_block(&self) -> &DMatrix<f64> {
        &self.prior
    }
}
