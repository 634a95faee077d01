//! Synthetic tasks and the comparison protocols: BAT against random
//! selection and no augmentation, plus sample-ratio, γ and surrogate
//! strength sweeps.
//!
//! Every cell `(setting, arm, seed)` draws its data from the seed, and all
//! arms of one seed share that data and the adapter initialization; only the
//! composition of the training set differs.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledExample, Split};
use crate::error::{Error, Result};
use crate::model::{mean_loss, Activation, Head, LossSpec, ModelSpec};
use crate::rng::stage_rng;
use crate::selection::{csv_field, plain_adaptation, round_half_up, run_albat, subsample_pool, train_augmented, SelectionConfig};
use crate::stats::{mean, sign_test_negative, spearman, stderr, SignTest};

/// Two-class Gaussian task with a shifted backbone pool.
///
/// Adaptation and test points: `y ~ Bernoulli(½)`, `x | y ~ N(±μ, s²I)` with
/// `μ = separation · e₁`. Pool points come from the same distribution with
/// probability `helpful_fraction`; the rest have their class means pushed
/// outward by `shift` along `e₁`, i.e. `x | y ~ N(±(separation + shift) e₁, s²I)`:
/// the same decision boundary with overconfident class conditionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub dim: usize,
    pub separation: f64,
    pub feature_sd: f64,
    pub shift: f64,
    pub helpful_fraction: f64,
    pub n_adaptation: usize,
    pub pool_size: usize,
    pub n_test: usize,
    /// Hidden layer widths; empty means logistic regression.
    pub hidden: Vec<usize>,
    pub noise_sigma: f64,
    pub l2_lambda: f64,
}

impl TaskSpec {
    pub fn s1() -> Self {
        TaskSpec {
            name: "S1".into(),
            dim: 10,
            separation: 1.0,
            feature_sd: 1.0,
            shift: 1.5,
            helpful_fraction: 0.1,
            n_adaptation: 60,
            pool_size: 600,
            n_test: 2000,
            hidden: Vec::new(),
            noise_sigma: 0.1,
            l2_lambda: 0.0,
        }
    }

    /// S1 with an unshifted pool: nothing for selection to exploit.
    pub fn null_task() -> Self {
        TaskSpec {
            name: "null".into(),
            shift: 0.0,
            ..TaskSpec::s1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("task dim must be positive"));
        }
        if !(self.feature_sd > 0.0) || !self.feature_sd.is_finite() {
            return Err(Error::config("degenerate feature covariance: feature_sd must be positive"));
        }
        if !self.separation.is_finite() || !self.shift.is_finite() {
            return Err(Error::config("task means must be finite"));
        }
        if !(0.0..=1.0).contains(&self.helpful_fraction) {
            return Err(Error::config("helpful_fraction outside [0, 1]"));
        }
        if self.n_adaptation < 4 {
            return Err(Error::config("n_adaptation must be at least 4 so the validation split survives"));
        }
        if self.n_test == 0 {
            return Err(Error::config("n_test must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.l2_lambda >= 0.0) {
            return Err(Error::config("noise_sigma and l2_lambda must be non-negative"));
        }
        self.model_spec().map(|_| ())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        if self.hidden.is_empty() {
            Ok(ModelSpec::logistic(self.dim))
        } else {
            ModelSpec::mlp(self.dim, &self.hidden, 1, Activation::Tanh, Head::LogisticBinary)
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec::log_loss().with_noise(self.noise_sigma).with_l2(self.l2_lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub adaptation: Vec<LabeledExample>,
    pub pool: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl TaskData {
    /// All three splits in one list, each row tagged with its split.
    pub fn all(&self) -> Vec<LabeledExample> {
        self.adaptation.iter().chain(&self.pool).chain(&self.test).cloned().collect()
    }
}

fn draw(task: &TaskSpec, rng: &mut impl Rng, id: String, offset: f64, split: Split) -> LabeledExample {
    let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
    let sign = if y == 1.0 { 1.0 } else { -1.0 };
    let x = (0..task.dim)
        .map(|j| {
            let e: f64 = StandardNormal.sample(&mut *rng);
            let m = if j == 0 { sign * (task.separation + offset) } else { 0.0 };
            m + task.feature_sd * e
        })
        .collect();
    LabeledExample::new(id, x, y, split)
}

/// Adaptation set, backbone pool and held-out test set for one seed.
pub fn generate_task(task: &TaskSpec, seed: u64) -> Result<TaskData> {
    task.validate()?;
    let mut rng = stage_rng(seed, "task-adaptation");
    let adaptation = (0..task.n_adaptation)
        .map(|i| draw(task, &mut rng, format!("a{i:05}"), 0.0, Split::Adaptation))
        .collect();
    let mut rng = stage_rng(seed, "task-pool");
    let pool = (0..task.pool_size)
        .map(|i| {
            let helpful = rng.random::<f64>() < task.helpful_fraction;
            let offset = if helpful { 0.0 } else { task.shift };
            draw(task, &mut rng, format!("b{i:05}"), offset, Split::Backbone)
        })
        .collect();
    let mut rng = stage_rng(seed, "task-test");
    let test = (0..task.n_test)
        .map(|i| draw(task, &mut rng, format!("t{i:05}"), 0.0, Split::Test))
        .collect();
    Ok(TaskData { adaptation, pool, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    None,
    Random,
    Bat,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::Random => "random",
            Arm::Bat => "bat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub arm: Arm,
    pub gamma: f64,
    pub sample_ratio: f64,
    pub surrogate_fraction: f64,
    pub seed: u64,
    /// `None` when the cell failed; see `error`.
    pub heldout_logloss: Option<f64>,
    pub quota: usize,
    pub runtime_ms: u128,
    pub error: Option<String>,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Comparison,
    SampleRatio,
    Gamma,
    Surrogate,
}

/// One (arm, setting) aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub gamma: f64,
    pub sample_ratio: f64,
    pub surrogate_fraction: f64,
    pub quota_mean: f64,
    pub mean: f64,
    pub stderr: f64,
    pub completed: usize,
    pub failed: usize,
    /// Paired against the random arm of the same setting (BAT rows only).
    pub vs_random: Option<SignTest>,
    /// Paired against the unaugmented baseline.
    pub vs_none: Option<SignTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ReportKind,
    pub task: TaskSpec,
    pub config: SelectionConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<ArmSummary>,
    /// Spearman correlation between the swept value and mean BAT loss.
    pub trend_spearman: Option<f64>,
    /// γ sweeps: whether the best γ lies strictly inside the grid.
    pub interior_peak: Option<bool>,
}

impl ExperimentReport {
    pub fn arm_summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    pub fn rows_for(&self, arm: Arm) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.arm == arm)
    }
}

/// One run setting: the selection config plus the surrogate fraction that
/// produced it (for the report columns).
#[derive(Debug, Clone)]
struct Setting {
    config: SelectionConfig,
    surrogate_fraction: f64,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (Result<T>, u128) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_millis())
}

fn cell(task: &TaskSpec, setting: &Setting, arm: Arm, seed: u64, data: &TaskData) -> ReportRow {
    let spec = task.model_spec().expect("validated");
    let ls = task.loss_spec();
    let config = SelectionConfig {
        seed,
        ..setting.config.clone()
    };
    let quota = config.quota(data.adaptation.len()).unwrap_or(0);
    let mut notices = Vec::new();
    let (res, ms) = timed(|| {
        let params = match arm {
            Arm::None => plain_adaptation(&data.adaptation, &spec, &ls, &config)?.params,
            Arm::Random => {
                if quota == 0 {
                    plain_adaptation(&data.adaptation, &spec, &ls, &config)?.params
                } else {
                    let candidates = subsample_pool(&data.pool, config.sample_ratio, config.seed)?;
                    let take = quota.min(candidates.len());
                    if take < quota {
                        notices.push(format!("quota {quota} exceeds the {} candidates; clamped", candidates.len()));
                    }
                    let mut idx = sample(&mut stage_rng(seed, "random-arm"), candidates.len(), take).into_vec();
                    idx.sort_unstable();
                    let picked: Vec<&LabeledExample> = idx.iter().map(|&i| &candidates[i]).collect();
                    train_augmented(&data.adaptation, &picked, &spec, &ls, &config)?.params
                }
            }
            Arm::Bat => {
                let r = run_albat(&data.adaptation, &data.pool, &spec, &ls, &config)?;
                notices.extend(r.notices);
                r.adapter_params
            }
        };
        mean_loss(&spec, &params, &data.test, ls.kind)
    });
    let (loss, error) = match res {
        Ok(l) => (Some(l), None),
        Err(e) => (None, Some(e.to_string())),
    };
    ReportRow {
        task: task.name.clone(),
        arm,
        gamma: config.gamma,
        sample_ratio: config.sample_ratio,
        surrogate_fraction: setting.surrogate_fraction,
        seed,
        heldout_logloss: loss,
        quota,
        runtime_ms: ms,
        error,
        notices,
    }
}

fn run_cells(task: &TaskSpec, cells: &[(Setting, Arm)], seeds: &[u64]) -> Result<Vec<ReportRow>> {
    task.validate()?;
    if seeds.len() < 2 {
        return Err(Error::config("experiments need at least two seeds"));
    }
    for (s, _) in cells {
        s.config.validate()?;
    }
    let per_seed: Vec<Vec<ReportRow>> = seeds
        .par_iter()
        .map(|&seed| match generate_task(task, seed) {
            Ok(data) => cells.iter().map(|(s, arm)| cell(task, s, *arm, seed, &data)).collect(),
            Err(e) => cells
                .iter()
                .map(|(s, arm)| ReportRow {
                    task: task.name.clone(),
                    arm: *arm,
                    gamma: s.config.gamma,
                    sample_ratio: s.config.sample_ratio,
                    surrogate_fraction: s.surrogate_fraction,
                    seed,
                    heldout_logloss: None,
                    quota: 0,
                    runtime_ms: 0,
                    error: Some(e.to_string()),
                    notices: Vec::new(),
                })
                .collect(),
        })
        .collect();
    // setting-major, then seed order
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for c in 0..cells.len() {
        for seed_rows in &per_seed {
            rows.push(seed_rows[c].clone());
        }
    }
    Ok(rows)
}

fn same_setting(a: &ReportRow, b: &ReportRow) -> bool {
    a.gamma == b.gamma && a.sample_ratio == b.sample_ratio && a.surrogate_fraction == b.surrogate_fraction
}

fn paired(rows: &[ReportRow], target: &ReportRow, other: Arm, match_setting: bool) -> Option<f64> {
    let o = rows
        .iter()
        .find(|r| r.arm == other && r.seed == target.seed && (!match_setting || same_setting(r, target)))?;
    Some(target.heldout_logloss? - o.heldout_logloss?)
}

fn summarize(rows: &[ReportRow]) -> Vec<ArmSummary> {
    let mut groups: Vec<&ReportRow> = Vec::new();
    for r in rows {
        if !groups.iter().any(|g| g.arm == r.arm && same_setting(g, r)) {
            groups.push(r);
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let members: Vec<&ReportRow> = rows.iter().filter(|r| r.arm == g.arm && same_setting(r, g)).collect();
            let losses: Vec<f64> = members.iter().filter_map(|r| r.heldout_logloss).collect();
            let diffs = |other: Arm, matched: bool| -> Option<SignTest> {
                if g.arm == other || !rows.iter().any(|r| r.arm == other) {
                    return None;
                }
                let d: Vec<f64> = members.iter().filter_map(|r| paired(rows, r, other, matched)).collect();
                Some(sign_test_negative(&d))
            };
            ArmSummary {
                arm: g.arm,
                gamma: g.gamma,
                sample_ratio: g.sample_ratio,
                surrogate_fraction: g.surrogate_fraction,
                quota_mean: members.iter().map(|r| r.quota as f64).sum::<f64>() / members.len() as f64,
                mean: mean(&losses),
                stderr: stderr(&losses),
                completed: losses.len(),
                failed: members.len() - losses.len(),
                vs_random: if g.arm == Arm::Bat { diffs(Arm::Random, true) } else { None },
                vs_none: diffs(Arm::None, false),
            }
        })
        .collect()
}

fn report(kind: ReportKind, task: &TaskSpec, config: &SelectionConfig, seeds: &[u64], rows: Vec<ReportRow>) -> ExperimentReport {
    let summary = summarize(&rows);
    let bat: Vec<&ArmSummary> = summary.iter().filter(|s| s.arm == Arm::Bat).collect();
    let xs: Vec<f64> = bat
        .iter()
        .map(|s| match kind {
            ReportKind::SampleRatio => s.sample_ratio,
            ReportKind::Gamma => s.gamma,
            _ => s.surrogate_fraction,
        })
        .collect();
    let ys: Vec<f64> = bat.iter().map(|s| s.mean).collect();
    let trend_spearman = match kind {
        ReportKind::Comparison => None,
        _ if bat.len() >= 2 => Some(spearman(&xs, &ys)),
        _ => None,
    };
    let interior_peak = match kind {
        ReportKind::Gamma if bat.len() >= 3 => {
            let best = (0..ys.len()).min_by(|&a, &b| ys[a].total_cmp(&ys[b]));
            best.map(|i| i > 0 && i + 1 < ys.len())
        }
        _ => None,
    };
    ExperimentReport {
        kind,
        task: task.clone(),
        config: config.clone(),
        seeds: seeds.to_vec(),
        rows,
        summary,
        trend_spearman,
        interior_peak,
    }
}

fn plain(config: &SelectionConfig) -> Setting {
    Setting {
        config: config.clone(),
        surrogate_fraction: 1.0,
    }
}

/// BAT against random selection and no augmentation.
pub fn run_comparison(task: &TaskSpec, config: &SelectionConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    let s = plain(config);
    let cells = [(s.clone(), Arm::None), (s.clone(), Arm::Random), (s, Arm::Bat)];
    let rows = run_cells(task, &cells, seeds)?;
    Ok(report(ReportKind::Comparison, task, config, seeds, rows))
}

/// BAT at several pool sample ratios with the quota held fixed.
pub fn sweep_sample_ratio(task: &TaskSpec, config: &SelectionConfig, ratios: &[f64], seeds: &[u64]) -> Result<ExperimentReport> {
    if ratios.is_empty() {
        return Err(Error::config("empty sample-ratio grid"));
    }
    let quota = config.quota(task.n_adaptation)?;
    let cells: Vec<(Setting, Arm)> = ratios
        .iter()
        .map(|&r| {
            let c = SelectionConfig {
                sample_ratio: r,
                quota_override: Some(quota),
                ..config.clone()
            };
            (plain(&c), Arm::Bat)
        })
        .collect();
    let rows = run_cells(task, &cells, seeds)?;
    Ok(report(ReportKind::SampleRatio, task, config, seeds, rows))
}

/// BAT and random selection across augmentation ratios, plus the baseline.
pub fn sweep_gamma(task: &TaskSpec, config: &SelectionConfig, gammas: &[f64], seeds: &[u64]) -> Result<ExperimentReport> {
    if gammas.is_empty() {
        return Err(Error::config("empty gamma grid"));
    }
    let base = SelectionConfig {
        quota_override: None,
        ..config.clone()
    };
    let mut cells = vec![(plain(&base), Arm::None)];
    for &g in gammas {
        let c = SelectionConfig { gamma: g, ..base.clone() };
        cells.push((plain(&c), Arm::Bat));
    }
    let rows = run_cells(task, &cells, seeds)?;
    Ok(report(ReportKind::Gamma, task, &base, seeds, rows))
}

/// BAT with surrogates trained for a fraction of the full step budget.
pub fn compare_surrogates(task: &TaskSpec, config: &SelectionConfig, fractions: &[f64], seeds: &[u64]) -> Result<ExperimentReport> {
    if fractions.is_empty() {
        return Err(Error::config("empty surrogate fraction grid"));
    }
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cells = vec![(plain(config), Arm::None)];
    for f in sorted {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(format!("surrogate fraction {f} outside (0, 1]")));
        }
        let steps = round_half_up(f * config.surrogate_steps as f64);
        if steps == 0 {
            return Err(Error::config(format!(
                "surrogate fraction {f} rounds to zero steps; the surrogate must train at least one step"
            )));
        }
        let c = SelectionConfig {
            surrogate_steps: steps,
            ..config.clone()
        };
        cells.push((
            Setting {
                config: c,
                surrogate_fraction: f,
            },
            Arm::Bat,
        ));
    }
    let rows = run_cells(task, &cells, seeds)?;
    Ok(report(ReportKind::Surrogate, task, config, seeds, rows))
}

pub fn write_report_csv<W: Write>(mut w: W, report: &ExperimentReport) -> Result<()> {
    writeln!(
        w,
        "task,arm,gamma,sample_ratio,surrogate_fraction,seed,heldout_logloss,quota,runtime_ms"
    )?;
    for r in &report.rows {
        let loss = match (r.heldout_logloss, &r.error) {
            (Some(l), _) => l.to_string(),
            (None, Some(e)) => csv_field(&format!("ERROR: {e}")),
            (None, None) => String::new(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&r.task),
            r.arm.name(),
            r.gamma,
            r.sample_ratio,
            r.surrogate_fraction,
            r.seed,
            loss,
            r.quota,
            r.runtime_ms
        )?;
    }
    Ok(())
}

/// Summary JSON: the report minus per-seed rows.
pub fn write_summary_json<W: Write>(w: W, report: &ExperimentReport) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        kind: ReportKind,
        task: &'a TaskSpec,
        config: &'a SelectionConfig,
        seeds: &'a [u64],
        summary: &'a [ArmSummary],
        trend_spearman: Option<f64>,
        interior_peak: Option<bool>,
    }
    serde_json::to_writer_pretty(
        w,
        &Summary {
            kind: report.kind,
            task: &report.task,
            config: &report.config,
            seeds: &report.seeds,
            summary: &report.summary,
            trend_spearman: report.trend_spearman,
            interior_peak: report.interior_peak,
        },
    )?;
    Ok(())
}

/// `x,mean,stderr` per BAT setting; for comparisons `x` is the arm name.
pub fn write_plot_data<W: Write>(mut w: W, report: &ExperimentReport) -> Result<()> {
    writeln!(w, "x,mean,stderr")?;
    for s in &report.summary {
        let x = match report.kind {
            ReportKind::Comparison => s.arm.name().to_string(),
            _ if s.arm != Arm::Bat => continue,
            ReportKind::SampleRatio => s.sample_ratio.to_string(),
            ReportKind::Gamma => s.gamma.to_string(),
            ReportKind::Surrogate => s.surrogate_fraction.to_string(),
        };
        writeln!(w, "{x},{},{}", s.mean, s.stderr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TaskSpec {
        TaskSpec {
            dim: 3,
            n_adaptation: 12,
            pool_size: 40,
            n_test: 50,
            ..TaskSpec::s1()
        }
    }

    fn quick() -> SelectionConfig {
        SelectionConfig {
            surrogate_steps: 20,
            adapter_steps: 20,
            ..SelectionConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t = tiny();
        assert_eq!(generate_task(&t, 3).unwrap(), generate_task(&t, 3).unwrap());
        assert_ne!(generate_task(&t, 3).unwrap(), generate_task(&t, 4).unwrap());
        let d = generate_task(&t, 3).unwrap();
        assert_eq!((d.adaptation.len(), d.pool.len(), d.test.len()), (12, 40, 50));
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let t = TaskSpec { feature_sd: 0.0, ..tiny() };
        assert!(matches!(generate_task(&t, 1), Err(Error::Config(_))));
        let t = TaskSpec { n_adaptation: 3, ..tiny() };
        assert!(generate_task(&t, 1).is_err());
    }

    #[test]
    fn zero_shift_pool_matches_adaptation_law() {
        // with shift 0 every pool point is drawn exactly like an adaptation point
        let t = TaskSpec {
            shift: 0.0,
            helpful_fraction: 0.0,
            pool_size: 4000,
            ..tiny()
        };
        let d = generate_task(&t, 2).unwrap();
        let m: f64 = d.pool.iter().map(|e| if e.y == 1.0 { e.x[0] } else { -e.x[0] }).sum::<f64>() / 4000.0;
        assert!((m - t.separation).abs() < 0.1);
    }

    #[test]
    fn quota_zero_arms_coincide() {
        let c = SelectionConfig { gamma: 0.99, ..quick() };
        let r = run_comparison(&tiny(), &c, &[1, 2]).unwrap();
        for seed in [1, 2] {
            let l: Vec<f64> = r
                .rows
                .iter()
                .filter(|x| x.seed == seed)
                .map(|x| x.heldout_logloss.unwrap())
                .collect();
            assert_eq!(l[0], l[1]);
            assert_eq!(l[0], l[2]);
        }
        let bat = r.arm_summary(Arm::Bat).unwrap();
        assert_eq!(bat.vs_none.unwrap().ties, 2);
    }

    #[test]
    fn surrogate_fraction_rounding_to_zero_rejected() {
        let c = SelectionConfig {
            surrogate_steps: 3,
            ..quick()
        };
        assert!(matches!(compare_surrogates(&tiny(), &c, &[0.1], &[1, 2]), Err(Error::Config(_))));
    }

    #[test]
    fn one_seed_rejected() {
        assert!(run_comparison(&tiny(), &quick(), &[1]).is_err());
    }

    #[test]
    fn writers_emit_headers() {
        let r = sweep_sample_ratio(&tiny(), &quick(), &[0.5, 1.0], &[1, 2]).unwrap();
        let mut csv = Vec::new();
        write_report_csv(&mut csv, &r).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("task,arm,gamma,sample_ratio,surrogate_fraction,seed,heldout_logloss,quota,runtime_ms\n"));
        assert_eq!(csv.lines().count(), 5);
        let mut plot = Vec::new();
        write_plot_data(&mut plot, &r).unwrap();
        assert_eq!(String::from_utf8(plot).unwrap().lines().count(), 3);
        let mut js = Vec::new();
        write_summary_json(&mut js, &r).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&js).unwrap();
        assert!(v["summary"].is_array());
    }
}
