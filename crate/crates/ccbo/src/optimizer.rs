//! The four end-to-end optimization loops: REF, SMCS, MMCU and MMCS.

use std::time::Instant;

use crate::acquisition::{select_u, select_x_targ, AcquisitionContext, SelectedU, UMode};
use crate::doe::{init_doe, lhs};
use crate::error::{CcboError, Result};
use crate::gp::{condition, GpModel};
use crate::kernel::KernelSpec;
use crate::measures::{incumbent_feasible_min, ConstraintModel, Incumbent};
use crate::point::JointPoint;
use crate::problems::{true_mean_objective, true_pof, ProblemDefinition};
use crate::quadrature::UncertaintyQuadrature;
use crate::seed::SeedTree;
use crate::train::{default_template, train_with, TrainControl};

/// Algorithm variant: constraint model (separate/multi-output) crossed with
/// the uncertain-sample policy (common u / constraint selection).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Ref,
    Smcs,
    Mmcu,
    Mmcs,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::Ref, Variant::Smcs, Variant::Mmcu, Variant::Mmcs]
    }

    /// Multi-output (coupled) constraint model?
    pub fn coupled(&self) -> bool {
        matches!(self, Variant::Mmcu | Variant::Mmcs)
    }

    /// Evaluates a single selected constraint per iteration?
    pub fn selects_constraint(&self) -> bool {
        matches!(self, Variant::Smcs | Variant::Mmcs)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ref => "REF",
            Variant::Smcs => "SMCS",
            Variant::Mmcu => "MMCU",
            Variant::Mmcs => "MMCS",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_uppercase().as_str() {
            "REF" => Ok(Variant::Ref),
            "SMCS" => Ok(Variant::Smcs),
            "MMCU" => Ok(Variant::Mmcu),
            "MMCS" => Ok(Variant::Mmcs),
            other => Err(CcboError::InvalidConfig(format!(
                "unknown variant '{other}' (REF, SMCS, MMCU, MMCS)"
            ))),
        }
    }
}

/// Per-run configuration. `seed` is the repetition seed: the initial design
/// and candidate sets depend only on it, not on the variant, so variants
/// compare on identical starting information.
#[derive(Debug, Clone)]
pub struct AlgorithmConfig {
    pub variant: Variant,
    pub t_init: usize,
    /// Total constraint-function evaluations allowed after the initial design.
    pub budget: usize,
    /// Reliability margin; defaults to the problem's.
    pub alpha: Option<f64>,
    /// Quadrature nodes per iteration (M).
    pub n_u_nodes: usize,
    /// Posterior trajectories for the PoF factor (N).
    pub n_traj: usize,
    /// Draws of the one-step-ahead mean inside S_f (K).
    pub k_samples: usize,
    /// Candidate-set size factor: points = factor * dimension.
    pub cand_factor: usize,
    /// Random restarts of the likelihood search.
    pub restarts: usize,
    pub train_maxfun: usize,
    /// Monte-Carlo sample size for true-metric reporting.
    pub report_mc: usize,
    pub seed: u64,
}

impl AlgorithmConfig {
    pub fn new(variant: Variant, t_init: usize, budget: usize, seed: u64) -> Self {
        Self {
            variant,
            t_init,
            budget,
            alpha: None,
            n_u_nodes: 100,
            n_traj: 200,
            k_samples: 500,
            cand_factor: 500,
            restarts: 20,
            train_maxfun: 250,
            report_mc: 10_000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_init < 2 {
            return Err(CcboError::InvalidConfig("t_init must be >= 2".into()));
        }
        if self.n_u_nodes == 0 || self.n_traj == 0 || self.k_samples == 0 {
            return Err(CcboError::InvalidConfig("MC sizes must be positive".into()));
        }
        if self.cand_factor == 0 {
            return Err(CcboError::InvalidConfig("cand_factor must be positive".into()));
        }
        Ok(())
    }
}

/// The evaluations and selections of one iteration.
#[derive(Debug, Clone)]
pub struct SelectionInfo {
    pub x_targ: Vec<f64>,
    pub efi: f64,
    pub efi_fallback: bool,
    pub u_f: Vec<f64>,
    pub u_g: Vec<f64>,
    /// Selected constraint (0-based); None when all constraints were
    /// evaluated at the common u.
    pub p: Option<usize>,
    pub f_value: f64,
    /// (constraint index, value) pairs actually evaluated.
    pub g_values: Vec<(usize, f64)>,
}

/// One training event: the incumbent given the data so far, plus the
/// selections made from that state (absent on the final row).
#[derive(Debug, Clone)]
pub struct IterationRow {
    pub step: usize,
    pub n_f_data: usize,
    pub n_g_data: Vec<usize>,
    pub cum_obj_evals: usize,
    pub cum_cons_evals: usize,
    pub incumbent_x: Vec<f64>,
    pub z_min_feas: f64,
    pub incumbent_fallback: bool,
    pub true_mean_obj: f64,
    pub true_pof: f64,
    pub selection: Option<SelectionInfo>,
}

/// Full trace of one optimization run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub problem: String,
    pub variant: Variant,
    pub seed: u64,
    pub t_init: usize,
    pub budget: usize,
    pub alpha: f64,
    pub rows: Vec<IterationRow>,
    pub final_x: Vec<f64>,
    pub final_z: f64,
    pub final_fallback: bool,
    pub final_true_mean: f64,
    pub final_true_pof: f64,
    /// Constraint evaluations during the iterations, per constraint.
    pub constraint_eval_counts: Vec<usize>,
    pub wall_secs: f64,
    pub error: Option<String>,
}

struct Datasets {
    f_pts: Vec<JointPoint>,
    f_vals: Vec<f64>,
    g_pts: Vec<Vec<JointPoint>>,
    g_vals: Vec<Vec<f64>>,
}

fn train_objective(
    problem: &ProblemDefinition,
    data: &Datasets,
    warm: &Option<KernelSpec>,
    control: TrainControl,
    seed: u64,
) -> Result<(GpModel, KernelSpec)> {
    let space = problem.objective_space();
    let template = warm.clone().unwrap_or_else(|| default_template(&space));
    let (spec, _) = train_with(&template, &space, &data.f_pts, &data.f_vals, control, seed)?;
    let model = condition(&spec, &space, &data.f_pts, &data.f_vals)?;
    Ok((model, spec))
}

fn train_constraints(
    problem: &ProblemDefinition,
    data: &Datasets,
    coupled: bool,
    warm: &mut Vec<Option<KernelSpec>>,
    control: TrainControl,
    seed: SeedTree,
) -> Result<ConstraintModel> {
    let l = problem.l();
    if coupled {
        let space = problem.constraint_space_coupled();
        let mut pts = Vec::new();
        let mut ys = Vec::new();
        for p in 0..l {
            for (pt, y) in data.g_pts[p].iter().zip(&data.g_vals[p]) {
                let mut q = pt.clone();
                q.output = p;
                pts.push(q);
                ys.push(*y);
            }
        }
        let template = warm[0].clone().unwrap_or_else(|| default_template(&space));
        let (spec, _) = train_with(&template, &space, &pts, &ys, control, seed.seed())?;
        warm[0] = Some(spec.clone());
        Ok(ConstraintModel::Coupled(condition(&spec, &space, &pts, &ys)?))
    } else {
        let space = problem.objective_space();
        let mut models = Vec::with_capacity(l);
        for p in 0..l {
            let template = warm[p].clone().unwrap_or_else(|| default_template(&space));
            let (spec, _) = train_with(
                &template,
                &space,
                &data.g_pts[p],
                &data.g_vals[p],
                control,
                seed.child_idx("g", p as u64).seed(),
            )?;
            warm[p] = Some(spec.clone());
            models.push(condition(&spec, &space, &data.g_pts[p], &data.g_vals[p])?);
        }
        Ok(ConstraintModel::Independent(models))
    }
}

fn train_with_retry<T>(
    mut attempt: impl FnMut(u64) -> Result<T>,
    seed: SeedTree,
) -> Result<T> {
    match attempt(seed.seed()) {
        Ok(v) => Ok(v),
        Err(CcboError::TrainingFailed(_)) => attempt(seed.child("retry").seed()),
        Err(e) => Err(e),
    }
}

/// Runs one optimization to its evaluation budget and reports the trace.
pub fn run(problem: &ProblemDefinition, config: &AlgorithmConfig) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let tree = SeedTree::new(config.seed);
    let l = problem.l();
    let alpha = config.alpha.unwrap_or(problem.alpha);
    let control = TrainControl {
        n_restarts: config.restarts,
        maxfun: config.train_maxfun,
        ..TrainControl::default()
    };

    // Repetition-scoped inputs (variant-independent).
    let doe = init_doe(problem, config.t_init, tree.child("doe").seed());
    let candidate_x = lhs(
        &problem.x_bounds,
        config.cand_factor * problem.d(),
        tree.child("cand-x").seed(),
    );
    let candidate_u = lhs(
        &problem.u_bounds,
        config.cand_factor * problem.m().max(1),
        tree.child("cand-u").seed(),
    );
    let report_u = problem.sample_u_set(config.report_mc, tree.child("report-u").seed());

    // Initial data: identical (x, u) sets for the objective and every
    // constraint.
    let mut data = Datasets {
        f_pts: Vec::new(),
        f_vals: Vec::new(),
        g_pts: vec![Vec::new(); l],
        g_vals: vec![Vec::new(); l],
    };
    for (x, u) in &doe {
        data.f_pts.push(JointPoint::new(x.clone(), u.clone()));
        data.f_vals.push(problem.eval_objective(x, u)?);
        for p in 0..l {
            data.g_pts[p].push(JointPoint::new(x.clone(), u.clone()));
            data.g_vals[p].push(problem.eval_constraint(p, x, u)?);
        }
    }

    let mut record = RunRecord {
        problem: problem.name.clone(),
        variant: config.variant,
        seed: config.seed,
        t_init: config.t_init,
        budget: config.budget,
        alpha,
        rows: Vec::new(),
        final_x: Vec::new(),
        final_z: f64::NAN,
        final_fallback: false,
        final_true_mean: f64::NAN,
        final_true_pof: f64::NAN,
        constraint_eval_counts: vec![0; l],
        wall_secs: 0.0,
        error: None,
    };

    let mut warm_f: Option<KernelSpec> = None;
    let mut warm_g: Vec<Option<KernelSpec>> = vec![None; if config.variant.coupled() { 1 } else { l }];
    let mut cum_obj = 0usize;
    let mut cum_cons = 0usize;
    let per_iter_cons = if config.variant.selects_constraint() { 1 } else { l };
    let mut step = 0usize;

    loop {
        let iter_tree = tree.child_idx("iter", step as u64);
        let trained: Result<(GpModel, ConstraintModel)> = (|| {
            let (objective, f_spec) = train_with_retry(
                |s| train_objective(problem, &data, &warm_f, control, s),
                iter_tree.child("train-f"),
            )?;
            warm_f = Some(f_spec);
            let constraints = train_with_retry(
                |s| {
                    train_constraints(
                        problem,
                        &data,
                        config.variant.coupled(),
                        &mut warm_g,
                        control,
                        SeedTree::new(s),
                    )
                },
                iter_tree.child("train-g"),
            )?;
            Ok((objective, constraints))
        })();
        let (objective, constraints) = match trained {
            Ok(v) => v,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        };

        let quad = UncertaintyQuadrature::monte_carlo(
            &problem.u_bounds,
            config.n_u_nodes,
            iter_tree.child("quad").seed(),
        );
        let incumbent: Incumbent = match incumbent_feasible_min(
            &objective,
            &constraints,
            &candidate_x,
            &quad,
            alpha,
            iter_tree.child("mvn-inc").seed(),
        ) {
            Ok(v) => v,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        };
        let mut row = IterationRow {
            step,
            n_f_data: data.f_pts.len(),
            n_g_data: data.g_pts.iter().map(|v| v.len()).collect(),
            cum_obj_evals: cum_obj,
            cum_cons_evals: cum_cons,
            incumbent_x: incumbent.x.clone(),
            z_min_feas: incumbent.z_min_feas,
            incumbent_fallback: incumbent.fallback,
            true_mean_obj: true_mean_objective(problem, &incumbent.x, &report_u),
            true_pof: true_pof(problem, &incumbent.x, &report_u),
            selection: None,
        };

        if cum_cons + per_iter_cons > config.budget {
            record.rows.push(row);
            record.final_x = incumbent.x;
            record.final_z = incumbent.z_min_feas;
            record.final_fallback = incumbent.fallback;
            break;
        }

        let ctx = AcquisitionContext {
            objective: &objective,
            constraints: &constraints,
            quad: &quad,
            alpha,
            z_min_feas: incumbent.z_min_feas,
            candidate_x: &candidate_x,
            candidate_u: &candidate_u,
            n_traj: config.n_traj,
            k_samples: config.k_samples,
            seed: iter_tree.child("acq").seed(),
        };
        let stepped: Result<SelectionInfo> = (|| {
            let xsel = select_x_targ(&ctx)?;
            let mode = if config.variant.selects_constraint() {
                UMode::Split
            } else {
                UMode::Common
            };
            let usel = select_u(&ctx, &xsel.x, mode)?;
            let (u_f, u_g, p) = match usel {
                SelectedU::Common { u, .. } => (u.clone(), u, None),
                SelectedU::Split { u_f, u_g, p, .. } => (u_f, u_g, Some(p)),
            };
            let f_value = problem.eval_objective(&xsel.x, &u_f)?;
            let mut g_values = Vec::new();
            match p {
                Some(p) => {
                    g_values.push((p, problem.eval_constraint(p, &xsel.x, &u_g)?));
                }
                None => {
                    for p in 0..l {
                        g_values.push((p, problem.eval_constraint(p, &xsel.x, &u_g)?));
                    }
                }
            }
            Ok(SelectionInfo {
                x_targ: xsel.x,
                efi: xsel.efi,
                efi_fallback: xsel.exploration_fallback,
                u_f,
                u_g,
                p,
                f_value,
                g_values,
            })
        })();
        let sel = match stepped {
            Ok(v) => v,
            Err(e) => {
                record.error = Some(e.to_string());
                record.rows.push(row);
                break;
            }
        };

        // Repeated evaluations consume budget (deterministic simulators
        // return the same value) but must not duplicate conditioning rows.
        let f_new = JointPoint::new(sel.x_targ.clone(), sel.u_f.clone());
        if !data.f_pts.contains(&f_new) {
            data.f_pts.push(f_new);
            data.f_vals.push(sel.f_value);
        }
        for (p, v) in &sel.g_values {
            let g_new = JointPoint::new(sel.x_targ.clone(), sel.u_g.clone());
            if !data.g_pts[*p].contains(&g_new) {
                data.g_pts[*p].push(g_new);
                data.g_vals[*p].push(*v);
            }
            record.constraint_eval_counts[*p] += 1;
        }
        cum_obj += 1;
        cum_cons += per_iter_cons;
        row.selection = Some(sel);
        record.rows.push(row);
        step += 1;
    }

    if record.final_x.is_empty() {
        if let Some(last) = record.rows.last() {
            record.final_x = last.incumbent_x.clone();
            record.final_z = last.z_min_feas;
            record.final_fallback = last.incumbent_fallback;
        }
    }
    if !record.final_x.is_empty() {
        record.final_true_mean = true_mean_objective(problem, &record.final_x, &report_u);
        record.final_true_pof = true_pof(problem, &record.final_x, &report_u);
    }
    record.wall_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

/// The reported solution given trained models: identical definition to the
/// incumbent feasible minimum.
pub fn final_solution(
    objective: &GpModel,
    constraints: &ConstraintModel,
    candidates: &[Vec<f64>],
    quad: &UncertaintyQuadrature,
    alpha: f64,
    seed: u64,
) -> Result<Incumbent> {
    incumbent_feasible_min(objective, constraints, candidates, quad, alpha, seed)
}
