use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use batsel::data::{Dataset, LabeledExample, Split};
use batsel::harness::{self, ExperimentReport};
use batsel::influence::{build_curvature, collect_gradients, CurvatureMode};
use batsel::model::{mean_loss, ModelParameters};
use batsel::oracle::{
    check_prop2, estimate_rho, fit_convex, geometric_grid, ExactZOptions, ExactZOracle, OracleCurvature, OracleData, RhoMethod, RhoTask,
    SMatrix,
};
use batsel::selection::{plain_adaptation, run_albat_with_validation, split_validation, write_score_report, SelectionManifest};
use batsel::stats::spearman;
use batsel::{Error, Result, ScoreMode, ScoringContext, SelectionResult};
use serde_json::json;

use crate::config::Resolved;

/// Failure that should also print the subcommand usage.
#[derive(Debug)]
pub struct UsageError(pub Error);

pub type CmdResult = std::result::Result<(), CmdError>;

#[derive(Debug)]
pub enum CmdError {
    Run(Error),
    Usage(UsageError),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Run(e)
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

pub fn write_echo(r: &Resolved) -> Result<()> {
    let text = toml::to_string(&r.echo()).map_err(|e| Error::config(format!("cannot serialize config echo: {e}")))?;
    std::fs::write(r.out.join("config.toml"), text)?;
    Ok(())
}

struct Splits {
    adaptation: Vec<LabeledExample>,
    pool: Vec<LabeledExample>,
    validation: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
    dim: usize,
}

fn dataset_path(r: &Resolved) -> std::result::Result<PathBuf, CmdError> {
    let path = r
        .dataset
        .clone()
        .ok_or_else(|| CmdError::Usage(UsageError(Error::config("no dataset given (--dataset PATH or `dataset` key)"))))?;
    if !path.is_file() {
        return Err(CmdError::Usage(UsageError(Error::config(format!(
            "dataset {} does not exist",
            path.display()
        )))));
    }
    Ok(path)
}

fn load_splits(path: &Path) -> Result<Splits> {
    let ds = Dataset::read_jsonl(path)?;
    let s = Splits {
        adaptation: ds.split(Split::Adaptation),
        pool: ds.split(Split::Backbone),
        validation: ds.split(Split::Validation),
        test: ds.split(Split::Test),
        dim: ds.dim().unwrap_or(0),
    };
    if s.adaptation.is_empty() || s.pool.is_empty() {
        return Err(Error::input(format!(
            "{} needs both adaptation and backbone rows ({} and {} found)",
            path.display(),
            s.adaptation.len(),
            s.pool.len()
        )));
    }
    Ok(s)
}

fn run_selection(r: &Resolved, s: &Splits) -> Result<(SelectionResult, batsel::ModelSpec, batsel::LossSpec)> {
    let spec = r.model_for(s.dim)?;
    let loss = r.loss();
    let validation = (!s.validation.is_empty()).then_some(s.validation.as_slice());
    let res = run_albat_with_validation(&s.adaptation, &s.pool, validation, &spec, &loss, &r.selection)?;
    let mut w = create(&r.out, "scores.csv")?;
    write_score_report(&mut w, &res, &r.selection)?;
    w.flush()?;
    let mut w = create(&r.out, "manifest.json")?;
    serde_json::to_writer_pretty(&mut w, &SelectionManifest::new(&res, &spec, &loss, &r.selection))?;
    w.write_all(b"\n")?;
    w.flush()?;
    for n in &res.notices {
        eprintln!("notice: {n}");
    }
    println!(
        "selected {} of {} scored candidates (quota {}, eta {:.6e})",
        res.selected_ids.len(),
        res.score_records.len(),
        res.quota,
        res.eta
    );
    Ok((res, spec, loss))
}

pub fn select(r: &Resolved) -> CmdResult {
    let s = load_splits(&dataset_path(r)?)?;
    run_selection(r, &s)?;
    write_echo(r)?;
    Ok(())
}

pub fn run(r: &Resolved) -> CmdResult {
    if r.dataset.is_none() {
        let report = harness::run_comparison(&r.task, &r.selection, &r.seeds)?;
        write_report(r, &report, false)?;
        return Ok(());
    }
    let s = load_splits(&dataset_path(r)?)?;
    let (res, spec, loss) = run_selection(r, &s)?;
    let mut eval = json!({
        "quota": res.quota,
        "selected": res.selected_ids.len(),
        "test_rows": s.test.len(),
    });
    if s.test.is_empty() {
        eprintln!("notice: no test rows in the dataset; skipping held-out evaluation");
    } else {
        let base = plain_adaptation(&s.adaptation, &spec, &loss, &r.selection)?;
        let bat_loss = mean_loss(&spec, &res.adapter_params, &s.test, loss.kind)?;
        let base_loss = mean_loss(&spec, &base.params, &s.test, loss.kind)?;
        println!("held-out loss: bat {bat_loss:.6}, adaptation only {base_loss:.6}");
        eval["bat_heldout_loss"] = json!(bat_loss);
        eval["baseline_heldout_loss"] = json!(base_loss);
    }
    let mut w = create(&r.out, "evaluation.json")?;
    serde_json::to_writer_pretty(&mut w, &eval).map_err(Error::from)?;
    w.write_all(b"\n").map_err(Error::from)?;
    write_echo(r)?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum Sweep {
    Gamma,
    Ratio,
    Surrogate,
}

pub fn sweep(r: &Resolved, which: Sweep) -> CmdResult {
    let report = match which {
        Sweep::Gamma => harness::sweep_gamma(&r.task, &r.selection, &r.gammas, &r.seeds)?,
        Sweep::Ratio => harness::sweep_sample_ratio(&r.task, &r.selection, &r.ratios, &r.seeds)?,
        Sweep::Surrogate => harness::compare_surrogates(&r.task, &r.selection, &r.fractions, &r.seeds)?,
    };
    write_report(r, &report, true)?;
    Ok(())
}

fn write_report(r: &Resolved, report: &ExperimentReport, plot: bool) -> Result<()> {
    let mut w = create(&r.out, "report.csv")?;
    harness::write_report_csv(&mut w, report)?;
    w.flush()?;
    let mut w = create(&r.out, "summary.json")?;
    harness::write_summary_json(&mut w, report)?;
    w.flush()?;
    if plot {
        let mut w = create(&r.out, "plot.csv")?;
        harness::write_plot_data(&mut w, report)?;
        w.flush()?;
    }
    write_echo(r)?;

    println!(
        "{:<7} {:>6} {:>6} {:>6} {:>7} {:>9} {:>9} {:>10} {:>10}",
        "arm", "gamma", "ratio", "surr", "quota", "mean", "stderr", "p(random)", "p(none)"
    );
    for s in &report.summary {
        let p = |t: Option<batsel::stats::SignTest>| t.map_or("-".to_string(), |t| format!("{:.4}", t.p_value));
        println!(
            "{:<7} {:>6.3} {:>6.3} {:>6.3} {:>7.1} {:>9.4} {:>9.4} {:>10} {:>10}",
            s.arm.name(),
            s.gamma,
            s.sample_ratio,
            s.surrogate_fraction,
            s.quota_mean,
            s.mean,
            s.stderr,
            p(s.vs_random),
            p(s.vs_none)
        );
    }
    if let Some(t) = report.trend_spearman {
        println!("trend spearman: {t:.3}");
    }
    if let Some(p) = report.interior_peak {
        println!("interior peak: {p}");
    }
    let failed: usize = report.summary.iter().map(|s| s.failed).sum();
    if failed > 0 {
        eprintln!("notice: {failed} cells failed; see the error column of report.csv");
    }
    Ok(())
}

pub fn gen_task(r: &Resolved) -> CmdResult {
    let data = harness::generate_task(&r.task, r.selection.seed)?;
    let name = format!("{}.jsonl", r.task.name);
    let mut w = create(&r.out, &name)?;
    Dataset::new(data.all())?.write_jsonl(&mut w)?;
    w.flush().map_err(Error::from)?;
    write_echo(r)?;
    println!(
        "wrote {}: {} adaptation, {} backbone, {} test rows",
        r.out.join(name).display(),
        data.adaptation.len(),
        data.pool.len(),
        data.test.len()
    );
    Ok(())
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-300)
}

/// Single-row bundles from task gradients at 100 random parameter points.
fn check_rank_one(r: &Resolved, data: &harness::TaskData) -> Result<Check> {
    let spec = r.task.model_spec()?;
    let ls = r.task.loss_spec().data_only();
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let params = ModelParameters::init(&spec, case);
        let ex = &data.adaptation[case as usize % data.adaptation.len()];
        let other = &data.pool[case as usize % data.pool.len()];
        let b = collect_gradients(&spec, &params, std::slice::from_ref(ex), &ls, 1, 0)?;
        let v = collect_gradients(&spec, &params, std::slice::from_ref(other), &ls, 1, 0)?;
        let lambdas = vec![0.01 * (1 + case % 10) as f64; spec.num_layers()];
        let imp = build_curvature(&b, &lambdas, CurvatureMode::SmImplicit)?;
        let dense = build_curvature(&b, &lambdas, CurvatureMode::ExactDense)?;
        for l in 0..spec.num_layers() {
            let vl = v.row(l, 0);
            worst = worst.max(rel_err(&imp.apply_inverse(l, &vl)?, &dense.apply_inverse(l, &vl)?));
        }
    }
    Ok(Check {
        name: "sm-rank-one",
        pass: worst < 1e-10,
        detail: format!("worst relative error {worst:.2e} over 100 cases"),
    })
}

/// Labeled rows behind the rank-agreement check (200 train, 50 validation at the default split).
const RANK_ROWS: usize = 250;

fn check_rank_agreement(r: &Resolved, data: &harness::TaskData) -> Result<(Check, serde_json::Value)> {
    let spec = r.task.model_spec()?;
    if !spec.is_single_layer() {
        return Err(Error::config("oracle-check needs a single-layer (convex) task"));
    }
    let ls = r.task.loss_spec();
    let seed = r.selection.seed;
    let delta = r.selection.delta;
    // the fast score's rank error shrinks with n; 48 training rows is too few to judge it
    let owned;
    let adaptation = if data.adaptation.len() >= RANK_ROWS {
        &data.adaptation
    } else {
        let task = harness::TaskSpec {
            n_adaptation: RANK_ROWS,
            ..r.task.clone()
        };
        owned = harness::generate_task(&task, seed)?.adaptation;
        &owned
    };
    let (train, val) = split_validation(adaptation, r.selection.validation_fraction)?;
    let sur = fit_convex(&spec, &train, &ls.with_l2(ls.l2_lambda.max(1e-3)), None)?;
    let pool = &data.pool[..data.pool.len().min(100)];
    let ctx = ScoringContext::build(&spec, &sur, &train, &val, &ls, ScoreMode::Fast, &r.selection.damping, delta, seed)?;
    let fast = ctx
        .score_pool(&spec, &sur, pool, &ls, delta, seed)
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let oracle = |curvature| -> Result<Vec<f64>> {
        let o = ExactZOracle::new(
            &spec,
            &sur,
            OracleData {
                train: &train,
                validation: &val,
            },
            &ls,
            ExactZOptions {
                curvature,
                lambdas: ctx.lambdas.clone(),
                delta,
                seed,
            },
        )?;
        pool.iter().map(|c| o.z(&spec, &sur, c, &ls)).collect()
    };
    let dense = spearman(&fast, &oracle(OracleCurvature::Bartlett)?);
    let hessian = spearman(&fast, &oracle(OracleCurvature::Hessian)?);
    Ok((
        Check {
            name: "z-rank-agreement",
            pass: dense >= 0.9,
            detail: format!(
                "spearman {dense:.3} vs dense oracle on {} candidates ({} training rows); {hessian:.3} vs full-Hessian oracle (not gated)",
                pool.len(),
                train.len()
            ),
        },
        json!({ "spearman_dense": dense, "spearman_hessian": hessian, "candidates": pool.len(), "train_rows": train.len() }),
    ))
}

fn check_prop2_identity(r: &Resolved, data: &harness::TaskData) -> Result<(Check, serde_json::Value)> {
    let spec = r.task.model_spec()?;
    let ls = r.task.loss_spec();
    let res = run_albat_with_validation(&data.adaptation, &data.pool, None, &spec, &ls, &r.selection)?;
    let chosen: Vec<LabeledExample> = data.pool.iter().filter(|e| res.selected_ids.contains(&e.id)).cloned().collect();
    let at = res.surrogate_params.clone().unwrap_or(res.adapter_params.clone());
    let rep = check_prop2(&spec, &data.adaptation, &chosen, &at, r.selection.gamma, &ls, 0.0)?;
    Ok((
        Check {
            name: "prop2-identity",
            pass: rep.decomposition_residual < 1e-8,
            detail: format!(
                "Hessian decomposition residual {:.2e}; condition holds at the surrogate: {} (slack {:.3e}, not gated)",
                rep.decomposition_residual, rep.holds, rep.slack
            ),
        },
        serde_json::to_value(&rep).map_err(Error::from)?,
    ))
}

fn check_rho(r: &Resolved) -> Result<(Check, serde_json::Value)> {
    if r.rho_kmax < 512 {
        return Err(Error::config("rho_kmax must be at least 512"));
    }
    let task = RhoTask::default();
    let grid = geometric_grid(256, r.rho_kmax, 2);
    let seeds: Vec<u64> = (1..=r.rho_seeds as u64).collect();
    let plain = estimate_rho(&task, RhoMethod::Plain, &grid, &seeds, SMatrix::Identity)?;
    let bat = estimate_rho(&task, RhoMethod::Bat, &grid, &seeds, SMatrix::Identity)?;
    let pass = bat.rho_hat <= plain.rho_hat && plain.plateau_slope.abs() < 0.1 && bat.plateau_slope.abs() < 0.1;
    Ok((
        Check {
            name: "rho-consistency",
            pass,
            detail: format!(
                "rho bat {:.2} <= plain {:.2} at k = {}; last-octave slopes {:.3} / {:.3}",
                bat.rho_hat, plain.rho_hat, r.rho_kmax, bat.plateau_slope, plain.plateau_slope
            ),
        },
        json!({ "task": task, "plain": plain, "bat": bat }),
    ))
}

/// Runs the oracle suites; `Ok(false)` when a hard gate failed.
pub fn oracle_check(r: &Resolved) -> std::result::Result<bool, CmdError> {
    let data = harness::generate_task(&r.task, r.selection.seed)?;
    let mut checks = vec![check_rank_one(r, &data)?];
    let (c, rank) = check_rank_agreement(r, &data)?;
    checks.push(c);
    let (c, prop2) = check_prop2_identity(r, &data)?;
    checks.push(c);
    let (c, rho) = check_rho(r)?;
    checks.push(c);

    for c in &checks {
        println!("{} {:<17} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let all = checks.iter().all(|c| c.pass);
    let dump = json!({
        "task": r.task,
        "config": r.echo(),
        "checks": checks.iter().map(|c| json!({ "name": c.name, "pass": c.pass, "detail": c.detail })).collect::<Vec<_>>(),
        "rank_agreement": rank,
        "prop2": prop2,
        "rho": rho,
    });
    let mut w = create(&r.out, "oracle.json")?;
    serde_json::to_writer_pretty(&mut w, &dump).map_err(Error::from)?;
    w.write_all(b"\n").map_err(Error::from)?;
    write_echo(r)?;
    Ok(all)
}
