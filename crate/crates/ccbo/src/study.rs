//! Study harness: repeated runs across variants with shared per-repetition
//! inputs, CSV artifacts, and the comparison reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{CcboError, Result};
use crate::optimizer::{run, AlgorithmConfig, IterationRow, RunRecord, SelectionInfo, Variant};
use crate::problems::{by_name, reference_optimum, ReferenceOptimum};
use crate::seed::SeedTree;

pub const RUN_CSV_SCHEMA: &str = "ccbo-run-csv v1";

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub problem: String,
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub budget: usize,
    pub t_init: usize,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub n_u_nodes: usize,
    pub n_traj: usize,
    pub k_samples: usize,
    pub cand_factor: usize,
    pub restarts: usize,
    pub train_maxfun: usize,
    pub report_mc: usize,
    pub jobs: usize,
    pub refopt_grid: usize,
    pub refopt_mc: usize,
}

impl StudyConfig {
    pub fn new(problem: impl Into<String>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            problem: problem.into(),
            variants: Variant::all().to_vec(),
            reps: 10,
            budget: 40,
            t_init: 6,
            alpha: None,
            seed: 0,
            out_dir: out_dir.into(),
            n_u_nodes: 100,
            n_traj: 200,
            k_samples: 500,
            cand_factor: 500,
            restarts: 20,
            train_maxfun: 250,
            report_mc: 10_000,
            jobs: 2,
            refopt_grid: 10_000,
            refopt_mc: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(CcboError::InvalidConfig("reps must be >= 1".into()));
        }
        if self.variants.is_empty() {
            return Err(CcboError::InvalidConfig("no variants selected".into()));
        }
        if self.jobs == 0 {
            return Err(CcboError::InvalidConfig("jobs must be >= 1".into()));
        }
        by_name(&self.problem)?;
        Ok(())
    }
}

/// One row of the convergence table, aligned on plot iterations (one plot
/// iteration = l constraint evaluations).
#[derive(Debug, Clone)]
pub struct ConvRow {
    pub plot_iter: usize,
    pub cum_cons_evals: usize,
    pub n_with_feasible: usize,
    pub best_median: f64,
    pub best_q25: f64,
    pub best_q75: f64,
    pub dist_median: f64,
    pub dist_q25: f64,
    pub dist_q75: f64,
}

#[derive(Debug, Clone)]
pub struct VariantSummary {
    pub variant: Variant,
    /// min, q25, median, q75, max over repetitions of the final
    /// best-feasible true mean objective (feasible-reaching reps only).
    pub final_stats: Option<[f64; 5]>,
    pub n_final_values: usize,
    /// Per-constraint evaluation counts, per repetition.
    pub per_rep_counts: Vec<Vec<usize>>,
    /// Per-constraint shares averaged over repetitions.
    pub mean_shares: Vec<f64>,
    pub convergence: Vec<ConvRow>,
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub refopt: ReferenceOptimum,
    pub per_variant: Vec<VariantSummary>,
    pub completed: usize,
    pub failed: usize,
}

/// Interpolated quantile of unsorted data (linear between order statistics).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

fn join_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn parse_vec(s: &str) -> Vec<f64> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(';').map(|t| t.parse().unwrap_or(f64::NAN)).collect()
    }
}

/// Serializes one run as CSV (schema `ccbo-run-csv v1`).
pub fn run_record_csv(rec: &RunRecord) -> String {
    let mut s = String::new();
    writeln!(s, "# {RUN_CSV_SCHEMA}").unwrap();
    writeln!(
        s,
        "step,n_f_data,n_g_data,cum_obj_evals,cum_cons_evals,incumbent_x,z_min_feas,incumbent_fallback,true_mean_obj,true_pof,x_targ,u_f,u_g,p_sel,efi,efi_fallback,f_value,g_values"
    )
    .unwrap();
    for row in &rec.rows {
        let (x_targ, u_f, u_g, p_sel, efi, efi_fb, f_value, g_values) = match &row.selection {
            Some(sel) => (
                join_vec(&sel.x_targ),
                join_vec(&sel.u_f),
                join_vec(&sel.u_g),
                sel.p.map_or("all".to_string(), |p| (p + 1).to_string()),
                sel.efi.to_string(),
                sel.efi_fallback.to_string(),
                sel.f_value.to_string(),
                sel.g_values
                    .iter()
                    .map(|(p, v)| format!("{}:{}", p + 1, v))
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            None => Default::default(),
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.step,
            row.n_f_data,
            row.n_g_data
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            row.cum_obj_evals,
            row.cum_cons_evals,
            join_vec(&row.incumbent_x),
            row.z_min_feas,
            row.incumbent_fallback,
            row.true_mean_obj,
            row.true_pof,
            x_targ,
            u_f,
            u_g,
            p_sel,
            efi,
            efi_fb,
            f_value,
            g_values
        )
        .unwrap();
    }
    s
}

/// A run as read back from its CSV: the fields the reports need.
#[derive(Debug, Clone)]
pub struct RunCsv {
    pub variant: Variant,
    pub rep: usize,
    pub rows: Vec<IterationRow>,
}

pub fn parse_run_csv(content: &str, variant: Variant, rep: usize) -> Result<RunCsv> {
    let mut lines = content.lines();
    let schema = lines
        .next()
        .ok_or_else(|| CcboError::InvalidConfig("empty run CSV".into()))?;
    if schema != format!("# {RUN_CSV_SCHEMA}") {
        return Err(CcboError::InvalidConfig(format!(
            "unexpected run CSV schema line: {schema}"
        )));
    }
    let _header = lines.next();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 18 {
            return Err(CcboError::InvalidConfig(format!(
                "run CSV row has {} fields",
                f.len()
            )));
        }
        let selection = if f[10].is_empty() {
            None
        } else {
            let p = if f[13] == "all" {
                None
            } else {
                Some(f[13].parse::<usize>().map_err(|_| {
                    CcboError::InvalidConfig("bad p_sel".into())
                })? - 1)
            };
            let g_values = if f[17].is_empty() {
                Vec::new()
            } else {
                f[17]
                    .split(';')
                    .map(|t| {
                        let (pi, v) = t.split_once(':').unwrap_or(("1", "nan"));
                        (
                            pi.parse::<usize>().unwrap_or(1) - 1,
                            v.parse::<f64>().unwrap_or(f64::NAN),
                        )
                    })
                    .collect()
            };
            Some(SelectionInfo {
                x_targ: parse_vec(f[10]),
                efi: f[14].parse().unwrap_or(f64::NAN),
                efi_fallback: f[15] == "true",
                u_f: parse_vec(f[11]),
                u_g: parse_vec(f[12]),
                p,
                f_value: f[16].parse().unwrap_or(f64::NAN),
                g_values,
            })
        };
        rows.push(IterationRow {
            step: f[0].parse().unwrap_or(0),
            n_f_data: f[1].parse().unwrap_or(0),
            n_g_data: f[2]
                .split(';')
                .map(|t| t.parse().unwrap_or(0))
                .collect(),
            cum_obj_evals: f[3].parse().unwrap_or(0),
            cum_cons_evals: f[4].parse().unwrap_or(0),
            incumbent_x: parse_vec(f[5]),
            z_min_feas: f[6].parse().unwrap_or(f64::NAN),
            incumbent_fallback: f[7] == "true",
            true_mean_obj: f[8].parse().unwrap_or(f64::NAN),
            true_pof: f[9].parse().unwrap_or(f64::NAN),
            selection,
        });
    }
    Ok(RunCsv { variant, rep, rows })
}

/// Best-feasible-so-far trace of one run over plot iterations 0..=n_iters:
/// (true value, incumbent location) or None while no feasible incumbent has
/// been seen, judged at reliability 1 - alpha under the reporting MC.
fn best_so_far(
    rows: &[IterationRow],
    alpha: f64,
    l: usize,
    n_iters: usize,
) -> Vec<Option<(f64, Vec<f64>)>> {
    let mut out = Vec::with_capacity(n_iters + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut row_idx = 0usize;
    for k in 0..=n_iters {
        let cons_allowed = k * l;
        while row_idx < rows.len() && rows[row_idx].cum_cons_evals <= cons_allowed {
            let r = &rows[row_idx];
            if r.true_pof >= 1.0 - alpha
                && best.as_ref().is_none_or(|(b, _)| r.true_mean_obj < *b)
            {
                best = Some((r.true_mean_obj, r.incumbent_x.clone()));
            }
            row_idx += 1;
        }
        out.push(best.clone());
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Aggregates runs of one variant into convergence rows and final statistics.
fn summarize_variant(
    variant: Variant,
    runs: &[&RunCsv],
    alpha: f64,
    l: usize,
    budget: usize,
    refopt: &ReferenceOptimum,
) -> VariantSummary {
    let n_iters = budget / l;
    let traces: Vec<Vec<Option<(f64, Vec<f64>)>>> = runs
        .iter()
        .map(|r| best_so_far(&r.rows, alpha, l, n_iters))
        .collect();
    let mut convergence = Vec::with_capacity(n_iters + 1);
    for k in 0..=n_iters {
        let vals: Vec<f64> = traces
            .iter()
            .filter_map(|t| t[k].as_ref().map(|(v, _)| *v))
            .collect();
        let dists: Vec<f64> = traces
            .iter()
            .filter_map(|t| t[k].as_ref().map(|(_, x)| dist(x, &refopt.x)))
            .collect();
        let stat = |v: &[f64], q: f64| {
            if v.is_empty() {
                f64::NAN
            } else {
                quantile(v, q)
            }
        };
        convergence.push(ConvRow {
            plot_iter: k,
            cum_cons_evals: k * l,
            n_with_feasible: vals.len(),
            best_median: stat(&vals, 0.5),
            best_q25: stat(&vals, 0.25),
            best_q75: stat(&vals, 0.75),
            dist_median: stat(&dists, 0.5),
            dist_q25: stat(&dists, 0.25),
            dist_q75: stat(&dists, 0.75),
        });
    }

    let finals: Vec<f64> = traces
        .iter()
        .filter_map(|t| t.last().and_then(|o| o.as_ref().map(|(v, _)| *v)))
        .collect();
    let final_stats = if finals.is_empty() {
        None
    } else {
        Some([
            quantile(&finals, 0.0),
            quantile(&finals, 0.25),
            quantile(&finals, 0.5),
            quantile(&finals, 0.75),
            quantile(&finals, 1.0),
        ])
    };

    let per_rep_counts: Vec<Vec<usize>> = runs
        .iter()
        .map(|r| {
            let mut counts = vec![0usize; l];
            for row in &r.rows {
                if let Some(sel) = &row.selection {
                    for (p, _) in &sel.g_values {
                        counts[*p] += 1;
                    }
                }
            }
            counts
        })
        .collect();
    let mut mean_shares = vec![0.0; l];
    let mut n_with_evals = 0usize;
    for counts in &per_rep_counts {
        let total: usize = counts.iter().sum();
        if total > 0 {
            n_with_evals += 1;
            for (p, c) in counts.iter().enumerate() {
                mean_shares[p] += *c as f64 / total as f64;
            }
        }
    }
    if n_with_evals > 0 {
        for s in &mut mean_shares {
            *s /= n_with_evals as f64;
        }
    }

    VariantSummary {
        variant,
        final_stats,
        n_final_values: finals.len(),
        per_rep_counts,
        mean_shares,
        convergence,
    }
}

fn run_file_name(variant: Variant, rep: usize) -> String {
    format!("{}_rep{:02}.csv", variant.name().to_ascii_lowercase(), rep)
}

/// Launches reps x variants runs with derived seeds and writes every
/// artifact under the output directory. Within a repetition the initial
/// design and candidate sets are shared across variants.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    config.validate()?;
    let problem = by_name(&config.problem)?;
    let l = problem.l();
    let tree = SeedTree::new(config.seed);

    let out = &config.out_dir;
    fs::create_dir_all(out.join("runs"))?;

    let refopt = reference_optimum(
        &problem,
        config.refopt_grid,
        config.refopt_mc,
        tree.child("refopt").seed(),
    )?;

    // One descriptor per (rep, variant); repetition seeds shared across
    // variants.
    let mut jobs: Vec<(usize, Variant, AlgorithmConfig)> = Vec::new();
    for rep in 0..config.reps {
        let rep_seed = tree.child_idx("rep", rep as u64).seed();
        for &variant in &config.variants {
            let mut cfg = AlgorithmConfig::new(variant, config.t_init, config.budget, rep_seed);
            cfg.alpha = config.alpha;
            cfg.n_u_nodes = config.n_u_nodes;
            cfg.n_traj = config.n_traj;
            cfg.k_samples = config.k_samples;
            cfg.cand_factor = config.cand_factor;
            cfg.restarts = config.restarts;
            cfg.train_maxfun = config.train_maxfun;
            cfg.report_mc = config.report_mc;
            jobs.push((rep, variant, cfg));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| CcboError::InvalidConfig(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|(_, _, cfg)| run(&problem, cfg))
            .collect()
    });

    // Artifact emission is single-threaded and ordered.
    let mut records: Vec<(usize, Variant, RunRecord)> = Vec::new();
    let mut failed = 0usize;
    let mut summary_csv = String::from(
        "variant,rep,seed,final_x,final_z,final_fallback,final_true_mean,final_true_pof,g_counts,wall_secs,error\n",
    );
    for ((rep, variant, _), res) in jobs.iter().zip(results) {
        match res {
            Ok(rec) => {
                if rec.error.is_some() {
                    failed += 1;
                }
                fs::write(
                    out.join("runs").join(run_file_name(*variant, *rep)),
                    run_record_csv(&rec),
                )?;
                writeln!(
                    summary_csv,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    variant.name(),
                    rep,
                    rec.seed,
                    join_vec(&rec.final_x),
                    rec.final_z,
                    rec.final_fallback,
                    rec.final_true_mean,
                    rec.final_true_pof,
                    rec.constraint_eval_counts
                        .iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                    rec.wall_secs,
                    rec.error.clone().unwrap_or_default()
                )
                .unwrap();
                records.push((*rep, *variant, rec));
            }
            Err(e) => {
                failed += 1;
                writeln!(
                    summary_csv,
                    "{},{},,,,,,,,,{}",
                    variant.name(),
                    rep,
                    e
                )
                .unwrap();
            }
        }
    }
    fs::write(out.join("summary.csv"), &summary_csv)?;

    // Study manifest for the report commands.
    let alpha = config.alpha.unwrap_or(problem.alpha);
    let mut manifest = String::new();
    writeln!(manifest, "schema=ccbo-study v1").unwrap();
    writeln!(manifest, "problem={}", config.problem).unwrap();
    writeln!(manifest, "l={l}").unwrap();
    writeln!(manifest, "alpha={alpha}").unwrap();
    writeln!(manifest, "budget={}", config.budget).unwrap();
    writeln!(manifest, "t_init={}", config.t_init).unwrap();
    writeln!(manifest, "reps={}", config.reps).unwrap();
    writeln!(manifest, "seed={}", config.seed).unwrap();
    writeln!(
        manifest,
        "variants={}",
        config
            .variants
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(";")
    )
    .unwrap();
    writeln!(manifest, "refopt_x={}", join_vec(&refopt.x)).unwrap();
    writeln!(manifest, "refopt_value={}", refopt.value).unwrap();
    writeln!(manifest, "refopt_pof={}", refopt.pof).unwrap();
    writeln!(manifest, "refopt_grid={}", refopt.n_grid).unwrap();
    writeln!(manifest, "refopt_mc={}", refopt.n_mc).unwrap();
    fs::write(out.join("study.txt"), &manifest)?;

    let summary = summarize_study(config, &records, &refopt, failed)?;
    write_reports(out, &summary, l)?;
    write_plot_stub(out, &summary)?;
    Ok(summary)
}

fn summarize_study(
    config: &StudyConfig,
    records: &[(usize, Variant, RunRecord)],
    refopt: &ReferenceOptimum,
    failed: usize,
) -> Result<StudySummary> {
    let problem = by_name(&config.problem)?;
    let alpha = config.alpha.unwrap_or(problem.alpha);
    let l = problem.l();
    let csvs: Vec<RunCsv> = records
        .iter()
        .map(|(rep, variant, rec)| RunCsv {
            variant: *variant,
            rep: *rep,
            rows: rec.rows.clone(),
        })
        .collect();
    let per_variant = config
        .variants
        .iter()
        .map(|&variant| {
            let runs: Vec<&RunCsv> = csvs.iter().filter(|r| r.variant == variant).collect();
            summarize_variant(variant, &runs, alpha, l, config.budget, refopt)
        })
        .collect();
    Ok(StudySummary {
        refopt: refopt.clone(),
        per_variant,
        completed: records.len() - failed.min(records.len()),
        failed,
    })
}

fn write_reports(out: &Path, summary: &StudySummary, l: usize) -> Result<()> {
    for vs in &summary.per_variant {
        let mut s = String::from(
            "plot_iter,cum_cons_evals,n_with_feasible,best_median,best_q25,best_q75,dist_median,dist_q25,dist_q75\n",
        );
        for r in &vs.convergence {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.plot_iter,
                r.cum_cons_evals,
                r.n_with_feasible,
                r.best_median,
                r.best_q25,
                r.best_q75,
                r.dist_median,
                r.dist_q25,
                r.dist_q75
            )
            .unwrap();
        }
        fs::write(
            out.join(format!(
                "convergence_{}.csv",
                vs.variant.name().to_ascii_lowercase()
            )),
            s,
        )?;
    }

    let mut usage = String::from("variant,rep,counts,shares\n");
    for vs in &summary.per_variant {
        for (rep, counts) in vs.per_rep_counts.iter().enumerate() {
            let total: usize = counts.iter().sum();
            let shares: Vec<String> = counts
                .iter()
                .map(|&c| {
                    if total > 0 {
                        (c as f64 / total as f64).to_string()
                    } else {
                        "0".to_string()
                    }
                })
                .collect();
            writeln!(
                usage,
                "{},{},{},{}",
                vs.variant.name(),
                rep,
                counts
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                shares.join(";")
            )
            .unwrap();
        }
        writeln!(
            usage,
            "{},mean,,{}",
            vs.variant.name(),
            vs.mean_shares
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";")
        )
        .unwrap();
    }
    let _ = l;
    fs::write(out.join("usage.csv"), usage)?;

    let mut finals = String::from("variant,n,min,q25,median,q75,max\n");
    for vs in &summary.per_variant {
        match vs.final_stats {
            Some([mn, q25, med, q75, mx]) => writeln!(
                finals,
                "{},{},{mn},{q25},{med},{q75},{mx}",
                vs.variant.name(),
                vs.n_final_values
            )
            .unwrap(),
            None => writeln!(finals, "{},0,,,,,", vs.variant.name()).unwrap(),
        }
    }
    fs::write(out.join("final_stats.csv"), finals)?;
    Ok(())
}

fn write_plot_stub(out: &Path, summary: &StudySummary) -> Result<()> {
    let mut s = String::from(
        "# gnuplot stub: convergence medians with quartile bands\nset datafile separator ','\nset key top right\nset xlabel 'iteration'\nset ylabel 'best feasible objective'\nplot \\\n",
    );
    let mut parts = Vec::new();
    for vs in &summary.per_variant {
        let f = format!("convergence_{}.csv", vs.variant.name().to_ascii_lowercase());
        parts.push(format!(
            "  '{f}' every ::1 using 1:4 with lines title '{}'",
            vs.variant.name()
        ));
    }
    s.push_str(&parts.join(", \\\n"));
    s.push('\n');
    fs::write(out.join("plots.gnuplot"), s)?;
    Ok(())
}

/// Rebuilds the convergence tables from the per-run CSVs in a study
/// directory.
pub fn report_convergence(run_dir: &Path) -> Result<StudySummary> {
    let (config, refopt) = read_manifest(run_dir)?;
    let csvs = read_all_runs(run_dir, &config)?;
    if csvs.is_empty() {
        return Err(CcboError::InvalidConfig(format!(
            "no completed runs under {}",
            run_dir.display()
        )));
    }
    let records: Vec<(usize, Variant, RunRecord)> = Vec::new();
    let _ = records;
    let problem = by_name(&config.problem)?;
    let alpha = config.alpha.unwrap_or(problem.alpha);
    let l = problem.l();
    let per_variant = config
        .variants
        .iter()
        .map(|&variant| {
            let runs: Vec<&RunCsv> = csvs.iter().filter(|r| r.variant == variant).collect();
            summarize_variant(variant, &runs, alpha, l, config.budget, &refopt)
        })
        .collect();
    Ok(StudySummary {
        refopt,
        per_variant,
        completed: csvs.len(),
        failed: 0,
    })
}

/// Per-constraint call counts and shares per repetition and averaged.
pub fn report_constraint_usage(run_dir: &Path) -> Result<Vec<(Variant, Vec<Vec<usize>>, Vec<f64>)>> {
    let summary = report_convergence(run_dir)?;
    Ok(summary
        .per_variant
        .iter()
        .map(|vs| (vs.variant, vs.per_rep_counts.clone(), vs.mean_shares.clone()))
        .collect())
}

fn read_manifest(run_dir: &Path) -> Result<(StudyConfig, ReferenceOptimum)> {
    let text = fs::read_to_string(run_dir.join("study.txt"))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| CcboError::InvalidConfig(format!("manifest missing '{k}'")))
    };
    let mut config = StudyConfig::new(get("problem")?, run_dir);
    config.budget = get("budget")?.parse().unwrap_or(0);
    config.t_init = get("t_init")?.parse().unwrap_or(2);
    config.reps = get("reps")?.parse().unwrap_or(1);
    config.seed = get("seed")?.parse().unwrap_or(0);
    config.alpha = Some(get("alpha")?.parse().unwrap_or(0.05));
    config.variants = get("variants")?
        .split(';')
        .map(Variant::parse)
        .collect::<Result<Vec<_>>>()?;
    let refopt = ReferenceOptimum {
        x: parse_vec(&get("refopt_x")?),
        value: get("refopt_value")?.parse().unwrap_or(f64::NAN),
        pof: get("refopt_pof")?.parse().unwrap_or(f64::NAN),
        n_grid: get("refopt_grid")?.parse().unwrap_or(0),
        n_mc: get("refopt_mc")?.parse().unwrap_or(0),
        seed: config.seed,
    };
    Ok((config, refopt))
}

fn read_all_runs(run_dir: &Path, config: &StudyConfig) -> Result<Vec<RunCsv>> {
    let mut out = Vec::new();
    for &variant in &config.variants {
        for rep in 0..config.reps {
            let path = run_dir.join("runs").join(run_file_name(variant, rep));
            if path.exists() {
                let content = fs::read_to_string(&path)?;
                out.push(parse_run_csv(&content, variant, rep)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_study(dir: &Path, seed: u64) -> StudyConfig {
        let mut c = StudyConfig::new("analytic-2d", dir);
        c.reps = 2;
        c.budget = 4;
        c.t_init = 4;
        c.seed = seed;
        c.n_u_nodes = 16;
        c.n_traj = 32;
        c.k_samples = 32;
        c.cand_factor = 20;
        c.restarts = 1;
        c.train_maxfun = 60;
        c.report_mc = 400;
        c.jobs = 2;
        c.refopt_grid = 300;
        c.refopt_mc = 2_000;
        c
    }

    #[test]
    fn quantiles_are_ordered_and_permutation_invariant() {
        let v = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let mut w = v.to_vec();
        w.reverse();
        for q in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert_eq!(quantile(&v, q), quantile(&w, q));
        }
        assert!(quantile(&v, 0.25) <= quantile(&v, 0.5));
        assert!(quantile(&v, 0.5) <= quantile(&v, 0.75));
        assert_eq!(quantile(&[5.0], 0.5), 5.0);
    }

    #[test]
    fn study_artifacts_and_determinism() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let s1 = run_study(&tiny_study(dir1.path(), 7)).unwrap();
        let s2 = run_study(&tiny_study(dir2.path(), 7)).unwrap();
        assert_eq!(s1.failed, 0);

        // Byte-identical artifacts under the same master seed; the run
        // summary carries wall time, which is masked for the comparison.
        for name in ["study.txt", "usage.csv", "final_stats.csv"] {
            let a = fs::read(dir1.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        let strip_wall = |text: String| -> String {
            text.lines()
                .map(|l| {
                    let mut f: Vec<&str> = l.split(',').collect();
                    if f.len() == 11 {
                        f[9] = "-";
                    }
                    f.join(",")
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let a = strip_wall(fs::read_to_string(dir1.path().join("summary.csv")).unwrap());
        let b = strip_wall(fs::read_to_string(dir2.path().join("summary.csv")).unwrap());
        assert_eq!(a, b, "summary.csv differs beyond wall time");
        for variant in Variant::all() {
            for rep in 0..2 {
                let f = Path::new("runs").join(run_file_name(variant, rep));
                let a = fs::read(dir1.path().join(&f)).unwrap();
                let b = fs::read(dir2.path().join(&f)).unwrap();
                assert_eq!(a, b, "{} differs", f.display());
            }
        }

        // Quartile ordering and share normalization.
        for vs in &s1.per_variant {
            if let Some([mn, q25, med, q75, mx]) = vs.final_stats {
                assert!(mn <= q25 && q25 <= med && med <= q75 && q75 <= mx);
            }
            let share_sum: f64 = vs.mean_shares.iter().sum();
            if vs.per_rep_counts.iter().any(|c| c.iter().sum::<usize>() > 0) {
                assert!((share_sum - 1.0).abs() < 1e-12, "shares {share_sum}");
            }
            // Common-u variants split evaluations evenly by construction.
            if !vs.variant.selects_constraint() {
                for counts in &vs.per_rep_counts {
                    assert_eq!(counts[0], counts[1]);
                }
            }
            // Counts sum to the budget.
            for counts in &vs.per_rep_counts {
                assert_eq!(counts.iter().sum::<usize>(), 4);
            }
        }
    }

    #[test]
    fn reports_recompute_from_csvs_alone() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_study(&tiny_study(dir.path(), 13)).unwrap();
        let reread = report_convergence(dir.path()).unwrap();
        for (a, b) in s.per_variant.iter().zip(&reread.per_variant) {
            assert_eq!(a.variant, b.variant);
            assert_eq!(a.convergence.len(), b.convergence.len());
            for (ra, rb) in a.convergence.iter().zip(&b.convergence) {
                assert_eq!(ra.n_with_feasible, rb.n_with_feasible);
                assert!(
                    (ra.best_median == rb.best_median)
                        || (ra.best_median.is_nan() && rb.best_median.is_nan())
                );
                assert!(
                    (ra.dist_median == rb.dist_median)
                        || (ra.dist_median.is_nan() && rb.dist_median.is_nan())
                );
            }
            assert_eq!(a.per_rep_counts, b.per_rep_counts);
        }
        let usage = report_constraint_usage(dir.path()).unwrap();
        assert_eq!(usage.len(), 4);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report_convergence(dir.path()).is_err());
    }

    #[test]
    fn run_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        run_study(&tiny_study(dir.path(), 3)).unwrap();
        let path = dir.path().join("runs").join(run_file_name(Variant::Smcs, 0));
        let content = fs::read_to_string(&path).unwrap();
        let parsed = parse_run_csv(&content, Variant::Smcs, 0).unwrap();
        assert!(!parsed.rows.is_empty());
        let re = run_record_csv(&RunRecord {
            problem: "analytic-2d".into(),
            variant: Variant::Smcs,
            seed: 0,
            t_init: 4,
            budget: 4,
            alpha: 0.05,
            rows: parsed.rows.clone(),
            final_x: vec![],
            final_z: f64::NAN,
            final_fallback: false,
            final_true_mean: f64::NAN,
            final_true_pof: f64::NAN,
            constraint_eval_counts: vec![],
            wall_secs: 0.0,
            error: None,
        });
        assert_eq!(re, content);
    }
}
