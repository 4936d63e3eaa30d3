//! Command-line harness: configure and launch repeated optimization studies,
//! reproduce the modeling-error comparison, and rebuild report tables from
//! stored run CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ccbo::acquisition::{acquisition_surfaces, select_x_targ, AcquisitionContext};
use ccbo::measures::pof_error_study;
use ccbo::optimizer::Variant;
use ccbo::problems::by_name;
use ccbo::quadrature::UncertaintyQuadrature;
use ccbo::seed::SeedTree;
use ccbo::study::{report_constraint_usage, report_convergence, run_study, StudyConfig};

#[derive(Parser)]
#[command(name = "ccbo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a study: repetitions x variants of the optimization loop.
    Run(RunArgs),
    /// Rebuild convergence tables from a study directory.
    ReportConvergence {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Per-constraint evaluation counts and shares from a study directory.
    ReportUsage {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Probability-of-feasibility modeling-error comparison between
    /// independent and multi-output constraint models.
    PofStudy(PofArgs),
    /// Dump acquisition surfaces over the candidate sets for one snapshot.
    Surface(SurfaceArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Declarative config file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// Repeatable; defaults to all four variants.
    #[arg(long = "variant")]
    variants: Vec<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long = "t-init")]
    t_init: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Posterior trajectories for the PoF estimator (N).
    #[arg(long = "mc-traj")]
    mc_traj: Option<usize>,
    /// Quadrature nodes over the uncertain domain (M).
    #[arg(long = "mc-u")]
    mc_u: Option<usize>,
    /// One-step-ahead mean draws inside S_f (K).
    #[arg(long = "k-samples")]
    k_samples: Option<usize>,
    /// Candidate points per dimension for the auxiliary optimizations.
    #[arg(long = "cand-factor")]
    cand_factor: Option<usize>,
    /// Random restarts of every likelihood search.
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long = "train-maxfun")]
    train_maxfun: Option<usize>,
    /// Monte-Carlo sample for true-metric reporting.
    #[arg(long = "report-mc")]
    report_mc: Option<usize>,
    /// Worker pool size.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long = "refopt-grid")]
    refopt_grid: Option<usize>,
    #[arg(long = "refopt-mc")]
    refopt_mc: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    problem: Option<String>,
    variants: Option<Vec<String>>,
    reps: Option<usize>,
    budget: Option<usize>,
    t_init: Option<usize>,
    alpha: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mc_traj: Option<usize>,
    mc_u: Option<usize>,
    k_samples: Option<usize>,
    cand_factor: Option<usize>,
    restarts: Option<usize>,
    train_maxfun: Option<usize>,
    report_mc: Option<usize>,
    jobs: Option<usize>,
    refopt_grid: Option<usize>,
    refopt_mc: Option<usize>,
}

#[derive(Args)]
struct PofArgs {
    #[arg(long, default_value = "analytic-4d")]
    problem: String,
    #[arg(long = "n-train", default_value_t = 30)]
    n_train: usize,
    #[arg(long = "n-test", default_value_t = 400)]
    n_test: usize,
    #[arg(long = "n-mc", default_value_t = 1000)]
    n_mc: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long, default_value = "analytic-2d")]
    problem: String,
    #[arg(long = "t-init", default_value_t = 6)]
    t_init: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    mc_u: usize,
    #[arg(long = "mc-traj", default_value_t = 200)]
    mc_traj: usize,
    #[arg(long = "cand-factor", default_value_t = 500)]
    cand_factor: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long)]
    out: PathBuf,
}

fn build_study_config(args: &RunArgs) -> anyhow::Result<StudyConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let problem = args
        .problem
        .clone()
        .or(file.problem)
        .context("--problem (or config key 'problem') is required")?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .context("--out (or config key 'out') is required")?;
    let mut cfg = StudyConfig::new(problem, out);
    let variant_names = if !args.variants.is_empty() {
        Some(args.variants.clone())
    } else {
        file.variants
    };
    if let Some(names) = variant_names {
        cfg.variants = names
            .iter()
            .map(|s| Variant::parse(s))
            .collect::<ccbo::Result<Vec<_>>>()?;
    }
    macro_rules! opt {
        ($field:ident, $arg:expr, $file:expr) => {
            if let Some(v) = $arg.or($file) {
                cfg.$field = v;
            }
        };
    }
    opt!(reps, args.reps, file.reps);
    opt!(budget, args.budget, file.budget);
    opt!(t_init, args.t_init, file.t_init);
    opt!(seed, args.seed, file.seed);
    opt!(n_traj, args.mc_traj, file.mc_traj);
    opt!(n_u_nodes, args.mc_u, file.mc_u);
    opt!(k_samples, args.k_samples, file.k_samples);
    opt!(cand_factor, args.cand_factor, file.cand_factor);
    opt!(restarts, args.restarts, file.restarts);
    opt!(train_maxfun, args.train_maxfun, file.train_maxfun);
    opt!(report_mc, args.report_mc, file.report_mc);
    opt!(jobs, args.jobs, file.jobs);
    opt!(refopt_grid, args.refopt_grid, file.refopt_grid);
    opt!(refopt_mc, args.refopt_mc, file.refopt_mc);
    cfg.alpha = args.alpha.or(file.alpha);
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<u8> {
    let cfg = build_study_config(args)?;
    let summary = run_study(&cfg)?;
    println!(
        "reference optimum: x={:?} value={} pof={}",
        summary.refopt.x, summary.refopt.value, summary.refopt.pof
    );
    for vs in &summary.per_variant {
        let stats = vs
            .final_stats
            .map(|s| format!("median={} q25={} q75={}", s[2], s[1], s[3]))
            .unwrap_or_else(|| "no feasible final values".to_string());
        println!(
            "{}: {} (n={}), g-shares {:?}",
            vs.variant.name(),
            stats,
            vs.n_final_values,
            vs.mean_shares
        );
    }
    println!(
        "{} runs completed, {} failed; artifacts in {}",
        summary.completed,
        summary.failed,
        cfg.out_dir.display()
    );
    Ok(if summary.failed > 0 { 2 } else { 0 })
}

fn cmd_report_convergence(dir: &PathBuf) -> anyhow::Result<u8> {
    let summary = report_convergence(dir)?;
    for vs in &summary.per_variant {
        println!("# {}", vs.variant.name());
        println!("plot_iter,cum_cons,n,best_median,best_q25,best_q75,dist_median");
        for r in &vs.convergence {
            println!(
                "{},{},{},{},{},{},{}",
                r.plot_iter,
                r.cum_cons_evals,
                r.n_with_feasible,
                r.best_median,
                r.best_q25,
                r.best_q75,
                r.dist_median
            );
        }
    }
    Ok(0)
}

fn cmd_report_usage(dir: &PathBuf) -> anyhow::Result<u8> {
    let usage = report_constraint_usage(dir)?;
    println!("variant,rep,counts,shares");
    for (variant, per_rep, mean_shares) in usage {
        for (rep, counts) in per_rep.iter().enumerate() {
            let total: usize = counts.iter().sum();
            let shares: Vec<String> = counts
                .iter()
                .map(|&c| {
                    if total > 0 {
                        format!("{:.4}", c as f64 / total as f64)
                    } else {
                        "0".into()
                    }
                })
                .collect();
            println!(
                "{},{},{:?},{}",
                variant.name(),
                rep,
                counts,
                shares.join(";")
            );
        }
        println!("{},mean,,{:?}", variant.name(), mean_shares);
    }
    Ok(0)
}

fn cmd_pof_study(args: &PofArgs) -> anyhow::Result<u8> {
    let problem = by_name(&args.problem)?;
    fs::create_dir_all(&args.out)?;
    let tree = SeedTree::new(args.seed);
    let mut points_csv = String::from("rep,x,err_independent,err_multioutput\n");
    let mut summary_csv = String::from("rep,mean_err_independent,mean_err_multioutput\n");
    let mut wins = 0usize;
    for rep in 0..args.reps {
        let r = pof_error_study(
            &problem,
            args.n_train,
            args.n_test,
            args.n_mc,
            args.restarts,
            tree.child_idx("rep", rep as u64).seed(),
        )?;
        for (i, x) in r.test_points.iter().enumerate() {
            writeln!(
                points_csv,
                "{},{},{},{}",
                rep,
                x.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                r.err_independent[i],
                r.err_multioutput[i]
            )
            .unwrap();
        }
        writeln!(
            summary_csv,
            "{},{},{}",
            rep, r.mean_err_independent, r.mean_err_multioutput
        )
        .unwrap();
        if r.mean_err_multioutput < r.mean_err_independent {
            wins += 1;
        }
        println!(
            "rep {rep}: mean error independent {:.5}, multi-output {:.5}",
            r.mean_err_independent, r.mean_err_multioutput
        );
    }
    fs::write(args.out.join("pof_points.csv"), points_csv)?;
    fs::write(args.out.join("pof_summary.csv"), summary_csv)?;
    println!(
        "multi-output model more accurate in {wins}/{} repetitions",
        args.reps
    );
    Ok(0)
}

fn cmd_surface(args: &SurfaceArgs) -> anyhow::Result<u8> {
    use ccbo::doe::{init_doe, lhs};
    use ccbo::gp::condition;
    use ccbo::measures::{incumbent_feasible_min, ConstraintModel};
    use ccbo::point::JointPoint;
    use ccbo::train::{default_template, train_with, TrainControl};

    let problem = by_name(&args.problem)?;
    fs::create_dir_all(&args.out)?;
    let tree = SeedTree::new(args.seed);
    let doe = init_doe(&problem, args.t_init, tree.child("doe").seed());
    let control = TrainControl {
        n_restarts: args.restarts,
        ..TrainControl::default()
    };

    let space = problem.objective_space();
    let pts: Vec<JointPoint> = doe
        .iter()
        .map(|(x, u)| JointPoint::new(x.clone(), u.clone()))
        .collect();
    let f_vals = doe
        .iter()
        .map(|(x, u)| problem.eval_objective(x, u))
        .collect::<ccbo::Result<Vec<_>>>()?;
    let (f_spec, _) = train_with(
        &default_template(&space),
        &space,
        &pts,
        &f_vals,
        control,
        tree.child("train-f").seed(),
    )?;
    let objective = condition(&f_spec, &space, &pts, &f_vals)?;

    let mut models = Vec::new();
    for p in 0..problem.l() {
        let ys = doe
            .iter()
            .map(|(x, u)| problem.eval_constraint(p, x, u))
            .collect::<ccbo::Result<Vec<_>>>()?;
        let (spec, _) = train_with(
            &default_template(&space),
            &space,
            &pts,
            &ys,
            control,
            tree.child_idx("train-g", p as u64).seed(),
        )?;
        models.push(condition(&spec, &space, &pts, &ys)?);
    }
    let constraints = ConstraintModel::Independent(models);

    let quad = UncertaintyQuadrature::monte_carlo(&problem.u_bounds, args.mc_u, tree.child("quad").seed());
    let candidate_x = lhs(
        &problem.x_bounds,
        args.cand_factor * problem.d(),
        tree.child("cand-x").seed(),
    );
    let candidate_u = lhs(
        &problem.u_bounds,
        args.cand_factor * problem.m().max(1),
        tree.child("cand-u").seed(),
    );
    let incumbent = incumbent_feasible_min(
        &objective,
        &constraints,
        &candidate_x,
        &quad,
        problem.alpha,
        tree.child("mvn").seed(),
    )?;
    let ctx = AcquisitionContext {
        objective: &objective,
        constraints: &constraints,
        quad: &quad,
        alpha: problem.alpha,
        z_min_feas: incumbent.z_min_feas,
        candidate_x: &candidate_x,
        candidate_u: &candidate_u,
        n_traj: args.mc_traj,
        k_samples: 500,
        seed: tree.child("acq").seed(),
    };
    let xsel = select_x_targ(&ctx)?;
    let dump = acquisition_surfaces(&ctx, &xsel.x)?;

    let mut xs = String::from("x,ei,pof,efi\n");
    for (x, ei, pof, efi) in &dump.x_rows {
        writeln!(
            xs,
            "{},{},{},{}",
            x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
            ei,
            pof,
            efi
        )
        .unwrap();
    }
    fs::write(args.out.join("surface_x.csv"), xs)?;
    let mut us = String::from("u,sf,sg,s\n");
    for (u, sf, sg, s) in &dump.u_rows {
        writeln!(
            us,
            "{},{},{},{}",
            u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
            sf,
            sg,
            s
        )
        .unwrap();
    }
    fs::write(args.out.join("surface_u.csv"), us)?;
    println!(
        "surfaces at x_targ={:?} written to {}",
        xsel.x,
        args.out.display()
    );
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::ReportConvergence { dir } => cmd_report_convergence(dir),
        Command::ReportUsage { dir } => cmd_report_usage(dir),
        Command::PofStudy(args) => cmd_pof_study(args),
        Command::Surface(args) => cmd_surface(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parses_and_flags_override() {
        let dir = std::env::temp_dir().join("ccbo-cli-test-cfg");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("study.toml");
        fs::write(
            &path,
            "problem = \"analytic-2d\"\nout = \"/tmp/x\"\nreps = 3\nbudget = 12\nvariants = [\"REF\", \"MMCS\"]\nmc-u = 32\n",
        )
        .unwrap();
        let args = RunArgs {
            config: Some(path),
            problem: None,
            variants: vec![],
            reps: Some(5),
            budget: None,
            t_init: None,
            alpha: None,
            seed: None,
            out: None,
            mc_traj: None,
            mc_u: None,
            k_samples: None,
            cand_factor: None,
            restarts: None,
            train_maxfun: None,
            report_mc: None,
            jobs: None,
            refopt_grid: None,
            refopt_mc: None,
        };
        let cfg = build_study_config(&args).unwrap();
        assert_eq!(cfg.problem, "analytic-2d");
        assert_eq!(cfg.reps, 5, "flag overrides file");
        assert_eq!(cfg.budget, 12);
        assert_eq!(cfg.n_u_nodes, 32);
        assert_eq!(cfg.variants.len(), 2);
    }

    #[test]
    fn missing_problem_is_a_config_error() {
        let args = RunArgs {
            config: None,
            problem: None,
            variants: vec![],
            reps: None,
            budget: None,
            t_init: None,
            alpha: None,
            seed: None,
            out: Some(PathBuf::from("/tmp/y")),
            mc_traj: None,
            mc_u: None,
            k_samples: None,
            cand_factor: None,
            restarts: None,
            train_maxfun: None,
            report_mc: None,
            jobs: None,
            refopt_grid: None,
            refopt_mc: None,
        };
        assert!(build_study_config(&args).is_err());
    }
}
