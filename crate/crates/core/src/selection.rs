//! Thresholded backbone selection and the end-to-end augmentation pipeline.
//!
//! The backbone quota follows the augmentation ratio `γ = n / k`: with `n`
//! adaptation examples, `m = round(n (1 − γ) / γ)` backbone examples are
//! added. The score threshold `η` is the quota quantile of the scores.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{check_disjoint, LabeledExample};
use crate::error::{Error, Result};
use crate::influence::{DampingPolicy, ScoreMode, ScoringContext};
use crate::model::{LossSpec, ModelParameters, ModelSpec};
use crate::rng::{derive_seed, hash_str, stage_rng};
use crate::train::{train, TrainConfig, TrainOutcome};

/// `floor(x + ½)`, tolerant to representation error just below a half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub gamma: f64,
    pub sample_ratio: f64,
    pub delta: usize,
    pub damping: DampingPolicy,
    pub surrogate_steps: usize,
    pub adapter_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Replaces the γ-derived quota when set.
    pub quota_override: Option<usize>,
    pub validation_fraction: f64,
    pub score_mode: ScoreMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            gamma: 0.9,
            sample_ratio: 1.0,
            delta: 3,
            damping: DampingPolicy::default(),
            surrogate_steps: 400,
            adapter_steps: 400,
            learning_rate: 0.2,
            batch_size: 16,
            seed: 0,
            quota_override: None,
            validation_fraction: 0.2,
            score_mode: ScoreMode::Fast,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::config(format!("sample_ratio {} outside (0, 1]", self.sample_ratio)));
        }
        if self.delta == 0 {
            return Err(Error::config("delta must be at least 1"));
        }
        if self.surrogate_steps == 0 {
            return Err(Error::config("surrogate must train at least one step"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction outside (0, 1)"));
        }
        self.adapter_train_config().validate()
    }

    pub fn surrogate_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.surrogate_steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed, "surrogate"),
        }
    }

    /// Adapter training: fresh initialization from the derived seed.
    pub fn adapter_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.adapter_steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed, "adapter"),
        }
    }

    pub fn quota(&self, n_adaptation: usize) -> Result<usize> {
        match self.quota_override {
            Some(q) => Ok(q),
            None => backbone_quota(self.gamma, n_adaptation),
        }
    }
}

/// Number of backbone examples matching augmentation ratio `gamma`.
pub fn backbone_quota(gamma: f64, n_adaptation: usize) -> Result<usize> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config(format!("gamma {gamma} outside (0, 1)")));
    }
    if n_adaptation == 0 {
        return Err(Error::config("adaptation set is empty"));
    }
    Ok(round_half_up(n_adaptation as f64 * (1.0 - gamma) / gamma))
}

/// Uniform sample without replacement of `round(ratio · |pool|)` candidates
/// (at least one), returned in pool order.
pub fn subsample_pool(pool: &[LabeledExample], sample_ratio: f64, seed: u64) -> Result<Vec<LabeledExample>> {
    if !(sample_ratio > 0.0 && sample_ratio <= 1.0) {
        return Err(Error::config(format!("sample_ratio {sample_ratio} outside (0, 1]")));
    }
    if pool.is_empty() || sample_ratio == 1.0 {
        return Ok(pool.to_vec());
    }
    let size = round_half_up(sample_ratio * pool.len() as f64).clamp(1, pool.len());
    let mut rng = stage_rng(seed, "subsample");
    let mut idx = sample(&mut rng, pool.len(), size).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

/// A candidate score; `NaN` marks a failed evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub id: String,
    pub z: f64,
}

impl ScoreInput {
    pub fn new(id: impl Into<String>, z: f64) -> Self {
        ScoreInput { id: id.into(), z }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub eta: f64,
    /// Effective quota after clamping to the number of finite scores.
    pub quota: usize,
    /// Candidates with `z == eta` admitted, in ascending id order.
    pub ties_admitted: usize,
    pub clamped: bool,
}

impl Threshold {
    /// Pure `z > eta` rule, no tie admission.
    pub fn strict(eta: f64) -> Self {
        Threshold {
            eta,
            quota: 0,
            ties_admitted: 0,
            clamped: false,
        }
    }
}

/// Rank order: score descending, then id ascending. Failed scores last.
fn ranked(scores: &[ScoreInput]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (za, zb) = (scores[a].z, scores[b].z);
        match (za.is_nan(), zb.is_nan()) {
            (false, false) => zb.total_cmp(&za),
            (a_nan, b_nan) => a_nan.cmp(&b_nan),
        }
        .then_with(|| scores[a].id.cmp(&scores[b].id))
    });
    order
}

/// Picks `η` so that exactly `quota` candidates are selected.
pub fn choose_eta(scores: &[ScoreInput], quota: usize) -> Threshold {
    let order = ranked(scores);
    let finite: Vec<f64> = order.iter().map(|&i| scores[i].z).filter(|z| !z.is_nan()).collect();
    let m = quota.min(finite.len());
    let clamped = m < quota;
    if finite.is_empty() {
        return Threshold {
            eta: 0.0,
            quota: 0,
            ties_admitted: 0,
            clamped,
        };
    }
    let eps = |z: f64| z.abs().max(1.0) * 1e-9;
    let eta = if m == 0 {
        finite[0] + eps(finite[0])
    } else if m == finite.len() {
        finite[m - 1] - eps(finite[m - 1])
    } else {
        0.5 * (finite[m - 1] + finite[m])
    };
    let above = finite.iter().filter(|&&z| z > eta).count();
    Threshold {
        eta,
        quota: m,
        ties_admitted: m.saturating_sub(above),
        clamped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub candidate_id: String,
    pub z: f64,
    pub selected: bool,
    /// 1-based position in (score descending, id ascending) order.
    pub rank: usize,
    pub note: Option<String>,
}

/// Applies the threshold; records keep input order.
pub fn select(scores: &[ScoreInput], threshold: &Threshold) -> Vec<ScoreRecord> {
    let order = ranked(scores);
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    let mut tie_ids: Vec<&str> = scores.iter().filter(|s| s.z == threshold.eta).map(|s| s.id.as_str()).collect();
    tie_ids.sort_unstable();
    let admitted: HashSet<&str> = tie_ids.into_iter().take(threshold.ties_admitted).collect();
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tie = s.z == threshold.eta;
            ScoreRecord {
                candidate_id: s.id.clone(),
                z: s.z,
                selected: s.z > threshold.eta || (tie && admitted.contains(s.id.as_str())),
                rank: rank[i],
                note: if tie {
                    Some("score equals eta; resolved by ascending id".into())
                } else {
                    None
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub eta: f64,
    pub quota: usize,
    /// Adaptation ids in input order, then selected backbone ids in pool order.
    pub bat_dataset: Vec<String>,
    pub selected_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    /// One record per scored candidate, in subsampled-pool order.
    pub score_records: Vec<ScoreRecord>,
    pub lambdas: Vec<f64>,
    pub surrogate_params: Option<ModelParameters>,
    pub adapter_params: ModelParameters,
    pub adapter_loss_trace: Vec<f64>,
    pub notices: Vec<String>,
}

/// Deterministic validation holdout: the `fraction` of ids with the smallest
/// hash. Returns `(train, validation)`, both in input order.
pub fn split_validation(adaptation: &[LabeledExample], fraction: f64) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let n = adaptation.len();
    if n < 2 {
        return Err(Error::config("adaptation set needs at least two examples to hold out validation"));
    }
    let nv = round_half_up(fraction * n as f64).clamp(1, n - 1);
    let mut by_hash: Vec<usize> = (0..n).collect();
    by_hash.sort_by_key(|&i| (hash_str(&adaptation[i].id), adaptation[i].id.clone()));
    let held: HashSet<usize> = by_hash[..nv].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, ex) in adaptation.iter().enumerate() {
        if held.contains(&i) {
            va.push(ex.clone());
        } else {
            tr.push(ex.clone());
        }
    }
    Ok((tr, va))
}

/// Adapter trained on the adaptation set alone, with the pipeline's adapter seed.
pub fn plain_adaptation(
    adaptation: &[LabeledExample],
    spec: &ModelSpec,
    loss_spec: &LossSpec,
    config: &SelectionConfig,
) -> Result<TrainOutcome> {
    let view: Vec<&LabeledExample> = adaptation.iter().collect();
    train(spec, &view, loss_spec, &config.adapter_train_config())
}

/// Trains on `adaptation ∪ extra` with the adapter seed.
pub fn train_augmented(
    adaptation: &[LabeledExample],
    extra: &[&LabeledExample],
    spec: &ModelSpec,
    loss_spec: &LossSpec,
    config: &SelectionConfig,
) -> Result<TrainOutcome> {
    let view: Vec<&LabeledExample> = adaptation.iter().chain(extra.iter().copied()).collect();
    train(spec, &view, loss_spec, &config.adapter_train_config())
}

/// Surrogate training, scoring, thresholding and final augmented training.
pub fn run_albat(
    adaptation: &[LabeledExample],
    pool: &[LabeledExample],
    spec: &ModelSpec,
    loss_spec: &LossSpec,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    run_albat_with_validation(adaptation, pool, None, spec, loss_spec, config)
}

/// As [`run_albat`]; an explicit validation set replaces the holdout split,
/// in which case the surrogate trains on the whole adaptation set.
pub fn run_albat_with_validation(
    adaptation: &[LabeledExample],
    pool: &[LabeledExample],
    validation: Option<&[LabeledExample]>,
    spec: &ModelSpec,
    loss_spec: &LossSpec,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    spec.validate()?;
    loss_spec.validate(spec)?;
    if adaptation.is_empty() {
        return Err(Error::config("adaptation set is empty"));
    }
    crate::data::validate(adaptation)?;
    crate::data::validate(pool)?;
    check_disjoint(adaptation, pool)?;

    let mut notices = Vec::new();
    let quota = config.quota(adaptation.len())?;
    if quota == 0 {
        notices.push("quota is 0: no backbone data added, adapter trained on the adaptation set only".to_string());
        let out = plain_adaptation(adaptation, spec, loss_spec, config).map_err(|e| e.at_stage("adapter"))?;
        return Ok(SelectionResult {
            eta: 0.0,
            quota: 0,
            bat_dataset: adaptation.iter().map(|e| e.id.clone()).collect(),
            selected_ids: Vec::new(),
            validation_ids: Vec::new(),
            score_records: Vec::new(),
            lambdas: Vec::new(),
            surrogate_params: None,
            adapter_params: out.params,
            adapter_loss_trace: out.loss_trace,
            notices,
        });
    }

    let (surrogate_train, holdout) = match validation {
        Some(v) if !v.is_empty() => (adaptation.to_vec(), v.to_vec()),
        _ => split_validation(adaptation, config.validation_fraction).map_err(|e| e.at_stage("validation-split"))?,
    };

    let view: Vec<&LabeledExample> = surrogate_train.iter().collect();
    let surrogate = train(spec, &view, loss_spec, &config.surrogate_train_config())
        .map_err(|e| e.at_stage("surrogate"))?
        .params;

    let candidates = subsample_pool(pool, config.sample_ratio, config.seed).map_err(|e| e.at_stage("subsample"))?;

    let ctx = ScoringContext::build(
        spec,
        &surrogate,
        &surrogate_train,
        &holdout,
        loss_spec,
        config.score_mode,
        &config.damping,
        config.delta,
        derive_seed(config.seed, "score"),
    )
    .map_err(|e| e.at_stage("curvature"))?;
    let raw = ctx.score_pool(
        spec,
        &surrogate,
        &candidates,
        loss_spec,
        config.delta,
        derive_seed(config.seed, "score"),
    );

    let mut failures = Vec::new();
    let inputs: Vec<ScoreInput> = candidates
        .iter()
        .zip(raw)
        .map(|(c, r)| match r {
            Ok(z) => ScoreInput::new(&c.id, z),
            Err(e) => {
                failures.push((c.id.clone(), e.to_string()));
                ScoreInput::new(&c.id, f64::NAN)
            }
        })
        .collect();

    let threshold = choose_eta(&inputs, quota);
    if threshold.clamped {
        notices.push(format!(
            "quota {quota} exceeds the {} scorable candidates; clamped",
            threshold.quota
        ));
    }
    let mut records = select(&inputs, &threshold);
    for (id, msg) in failures {
        if let Some(r) = records.iter_mut().find(|r| r.candidate_id == id) {
            r.note = Some(format!("score failed: {msg}"));
        }
    }

    let selected: Vec<&LabeledExample> = candidates
        .iter()
        .zip(&records)
        .filter(|(_, r)| r.selected)
        .map(|(c, _)| c)
        .collect();
    let out = train_augmented(adaptation, &selected, spec, loss_spec, config).map_err(|e| e.at_stage("adapter"))?;

    Ok(SelectionResult {
        eta: threshold.eta,
        quota: threshold.quota,
        bat_dataset: adaptation.iter().chain(selected.iter().copied()).map(|e| e.id.clone()).collect(),
        selected_ids: selected.iter().map(|e| e.id.clone()).collect(),
        validation_ids: holdout.iter().map(|e| e.id.clone()).collect(),
        score_records: records,
        lambdas: ctx.lambdas,
        surrogate_params: Some(surrogate),
        adapter_params: out.params,
        adapter_loss_trace: out.loss_trace,
        notices,
    })
}

/// CSV score report, rows in rank order.
pub fn write_score_report<W: Write>(mut w: W, result: &SelectionResult, config: &SelectionConfig) -> Result<()> {
    writeln!(w, "candidate_id,z,rank,selected,eta,gamma,sample_ratio,seed")?;
    let mut rows: Vec<&ScoreRecord> = result.score_records.iter().collect();
    rows.sort_by_key(|r| r.rank);
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.candidate_id),
            r.z,
            r.rank,
            r.selected,
            result.eta,
            config.gamma,
            config.sample_ratio,
            config.seed
        )?;
    }
    Ok(())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// JSON manifest: the composed training set plus everything needed to rerun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub bat_dataset: Vec<String>,
    pub selected: Vec<String>,
    pub validation: Vec<String>,
    pub quota: usize,
    pub eta: f64,
    pub lambdas: Vec<f64>,
    pub notices: Vec<String>,
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub config: SelectionConfig,
}

impl SelectionManifest {
    pub fn new(result: &SelectionResult, spec: &ModelSpec, loss: &LossSpec, config: &SelectionConfig) -> Self {
        SelectionManifest {
            bat_dataset: result.bat_dataset.clone(),
            selected: result.selected_ids.clone(),
            validation: result.validation_ids.clone(),
            quota: result.quota,
            eta: result.eta,
            lambdas: result.lambdas.clone(),
            notices: result.notices.clone(),
            model: spec.clone(),
            loss: *loss,
            config: config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use proptest::prelude::*;

    fn inputs(zs: &[f64]) -> Vec<ScoreInput> {
        zs.iter()
            .enumerate()
            .map(|(i, &z)| ScoreInput::new(format!("c{i:03}"), z))
            .collect()
    }

    #[test]
    fn quota_worked_examples() {
        assert_eq!(backbone_quota(0.95, 57).unwrap(), 3);
        assert_eq!(backbone_quota(0.5, 10).unwrap(), 10);
        assert_eq!(backbone_quota(0.99, 10).unwrap(), 0);
        assert_eq!(backbone_quota(0.8, 10).unwrap(), 3); // 2.5 rounds up
        assert!(backbone_quota(1.0, 10).is_err());
        assert!(backbone_quota(0.0, 10).is_err());
    }

    #[test]
    fn subsample_sizes_and_identity() {
        let pool: Vec<LabeledExample> = (0..2981)
            .map(|i| LabeledExample::new(format!("b{i}"), vec![i as f64], 0.0, Split::Backbone))
            .collect();
        assert_eq!(subsample_pool(&pool, 1.0, 3).unwrap(), pool);
        let half = subsample_pool(&pool, 0.5, 3).unwrap();
        assert_eq!(half.len(), 1491);
        assert_eq!(half, subsample_pool(&pool, 0.5, 3).unwrap());
        assert_ne!(half, subsample_pool(&pool, 0.5, 4).unwrap());
        assert_eq!(subsample_pool(&pool[..3], 0.01, 1).unwrap().len(), 1);
        assert!(subsample_pool(&pool, 0.0, 1).is_err());
    }

    #[test]
    fn eta_between_quota_scores() {
        let s = inputs(&[3.0, 2.0, 1.0]);
        let t = choose_eta(&s, 1);
        assert!(t.eta > 2.0 && t.eta < 3.0);
        let r = select(&s, &t);
        assert_eq!(r.iter().filter(|r| r.selected).count(), 1);
        assert!(r[0].selected);
        let all = choose_eta(&s, 3);
        assert!(select(&s, &all).iter().all(|r| r.selected));
        let none = choose_eta(&s, 0);
        assert!(select(&s, &none).iter().all(|r| !r.selected));
    }

    #[test]
    fn clamped_quota_selects_everything() {
        let s = inputs(&[1.0, 2.0]);
        let t = choose_eta(&s, 5);
        assert!(t.clamped);
        assert_eq!(t.quota, 2);
        assert!(select(&s, &t).iter().all(|r| r.selected));
    }

    #[test]
    fn ties_resolved_by_ascending_id() {
        // every permutation of tied boundary scores selects exactly the quota
        let base = [5.0, 2.0, 2.0, 2.0, 1.0];
        let perms: [[usize; 5]; 4] = [[0, 1, 2, 3, 4], [4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 3, 0, 4, 2]];
        for p in perms {
            let s: Vec<ScoreInput> = p.iter().map(|&i| ScoreInput::new(format!("c{i}"), base[i])).collect();
            for quota in 0..=5 {
                let t = choose_eta(&s, quota);
                let recs = select(&s, &t);
                let chosen: Vec<&str> = recs.iter().filter(|r| r.selected).map(|r| r.candidate_id.as_str()).collect();
                assert_eq!(chosen.len(), quota);
                for r in &recs {
                    assert_eq!(r.selected, r.rank <= quota);
                }
                if quota == 2 {
                    let mut c = chosen.clone();
                    c.sort();
                    assert_eq!(c, vec!["c0", "c1"]);
                }
            }
        }
    }

    #[test]
    fn all_below_eta_selects_none() {
        let s = inputs(&[0.1, 0.2]);
        assert!(select(&s, &Threshold::strict(1.0)).iter().all(|r| !r.selected));
    }

    #[test]
    fn failed_scores_rank_last() {
        let s = inputs(&[f64::NAN, 1.0, 2.0]);
        let t = choose_eta(&s, 3);
        assert_eq!(t.quota, 2);
        let r = select(&s, &t);
        assert_eq!(r[0].rank, 3);
        assert!(!r[0].selected);
        assert!(r[1].selected && r[2].selected);
    }

    #[test]
    fn validation_split_is_deterministic() {
        let a: Vec<LabeledExample> = (0..57)
            .map(|i| LabeledExample::new(format!("a{i}"), vec![0.0], 0.0, Split::Adaptation))
            .collect();
        let (tr, va) = split_validation(&a, 0.2).unwrap();
        assert_eq!(va.len(), 11);
        assert_eq!(tr.len(), 46);
        assert_eq!(split_validation(&a, 0.2).unwrap().1, va);
        assert!(split_validation(&a[..1], 0.2).is_err());
        let (tr, va) = split_validation(&a[..4], 0.2).unwrap();
        assert_eq!((tr.len(), va.len()), (3, 1));
    }

    proptest! {
        #[test]
        fn quota_count_is_exact(zs in proptest::collection::vec(-1e3f64..1e3, 1..120), q in 0usize..130) {
            let s = inputs(&zs);
            let t = choose_eta(&s, q);
            let recs = select(&s, &t);
            let n = recs.iter().filter(|r| r.selected).count();
            prop_assert_eq!(n, q.min(zs.len()));
            let mut ranks: Vec<usize> = recs.iter().map(|r| r.rank).collect();
            ranks.sort_unstable();
            prop_assert_eq!(ranks, (1..=zs.len()).collect::<Vec<_>>());
            for r in &recs {
                prop_assert_eq!(r.selected, r.rank <= t.quota);
            }
        }

        #[test]
        fn raising_eta_never_adds(zs in proptest::collection::vec(-10f64..10.0, 1..60), lo in -12f64..12.0, bump in 0f64..5.0) {
            let s = inputs(&zs);
            let a = select(&s, &Threshold::strict(lo));
            let b = select(&s, &Threshold::strict(lo + bump));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!y.selected || x.selected);
            }
        }

        #[test]
        fn quota_law_on_gamma_grid(k in 1usize..50, n in 1usize..200) {
            let gamma = k as f64 / 51.0;
            let q = backbone_quota(gamma, n).unwrap();
            let exact = n as f64 * (1.0 - gamma) / gamma;
            prop_assert!((q as f64 - exact).abs() <= 0.5 + 1e-6);
        }
    }
}
