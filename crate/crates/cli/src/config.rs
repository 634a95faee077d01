//! Flat key-value configuration: file, then `--set` pairs, then named flags.

use std::path::{Path, PathBuf};

use batsel::harness::TaskSpec;
use batsel::model::{Activation, Head, LossSpec, ModelSpec};
use batsel::{DampingPolicy, Error, Result, ScoreMode, SelectionConfig};
use serde::{Deserialize, Serialize};

/// Every key the config file accepts. Unset keys take the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub sample_ratio: Option<f64>,
    pub delta: Option<usize>,
    pub quota: Option<usize>,
    pub damping_factor: Option<f64>,
    pub surrogate_steps: Option<usize>,
    pub adapter_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub score_mode: Option<ScoreMode>,

    pub head: Option<Head>,
    pub classes: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub noise_sigma: Option<f64>,
    pub l2_lambda: Option<f64>,

    pub task: Option<String>,
    pub dim: Option<usize>,
    pub separation: Option<f64>,
    pub feature_sd: Option<f64>,
    pub shift: Option<f64>,
    pub helpful_fraction: Option<f64>,
    pub n_adaptation: Option<usize>,
    pub pool_size: Option<usize>,
    pub n_test: Option<usize>,

    pub seeds: Option<Vec<u64>>,
    pub gammas: Option<Vec<f64>>,
    pub ratios: Option<Vec<f64>>,
    pub fractions: Option<Vec<f64>>,
    pub rho_kmax: Option<usize>,
    pub rho_seeds: Option<usize>,
}

/// Reads the config file (if any) and applies overrides in order.
pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<CliConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    CliConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::config(e.to_string()))
}

/// Parses `key=value`; the value is read as TOML, falling back to a string.
pub fn parse_set(pair: &str) -> std::result::Result<(String, toml::Value), String> {
    let (k, v) = pair.split_once('=').ok_or_else(|| format!("expected key=value, got `{pair}`"))?;
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// `1,2,5` or an inclusive range `1-20`.
pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|e| format!("{e}"))?,
            b.trim().parse().map_err(|e| format!("{e}"))?,
        );
        if a > b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse::<u64>().map_err(|e| format!("{e}"))).collect()
}

pub fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{e}"))).collect()
}

/// Defaults filled in; what the commands actually consume.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub selection: SelectionConfig,
    pub task: TaskSpec,
    pub head: Head,
    pub classes: usize,
    pub seeds: Vec<u64>,
    pub gammas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub fractions: Vec<f64>,
    pub rho_kmax: usize,
    pub rho_seeds: usize,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
}

impl CliConfig {
    pub fn resolve(&self) -> Result<Resolved> {
        let d = SelectionConfig::default();
        let damping = match self.damping_factor {
            Some(factor) => DampingPolicy::GradScaled { factor },
            None => d.damping.clone(),
        };
        let selection = SelectionConfig {
            gamma: self.gamma.unwrap_or(d.gamma),
            sample_ratio: self.sample_ratio.unwrap_or(d.sample_ratio),
            delta: self.delta.unwrap_or(d.delta),
            damping,
            surrogate_steps: self.surrogate_steps.unwrap_or(d.surrogate_steps),
            adapter_steps: self.adapter_steps.unwrap_or(d.adapter_steps),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            quota_override: self.quota.or(d.quota_override),
            validation_fraction: self.validation_fraction.unwrap_or(d.validation_fraction),
            score_mode: self.score_mode.unwrap_or(d.score_mode),
        };
        selection.validate()?;
        let t = TaskSpec::s1();
        let task = TaskSpec {
            name: self.task.clone().unwrap_or(t.name),
            dim: self.dim.unwrap_or(t.dim),
            separation: self.separation.unwrap_or(t.separation),
            feature_sd: self.feature_sd.unwrap_or(t.feature_sd),
            shift: self.shift.unwrap_or(t.shift),
            helpful_fraction: self.helpful_fraction.unwrap_or(t.helpful_fraction),
            n_adaptation: self.n_adaptation.unwrap_or(t.n_adaptation),
            pool_size: self.pool_size.unwrap_or(t.pool_size),
            n_test: self.n_test.unwrap_or(t.n_test),
            hidden: self.hidden.clone().unwrap_or(t.hidden),
            noise_sigma: self.noise_sigma.unwrap_or(t.noise_sigma),
            l2_lambda: self.l2_lambda.unwrap_or(t.l2_lambda),
        };
        Ok(Resolved {
            selection,
            task,
            head: self.head.unwrap_or(Head::LogisticBinary),
            classes: self.classes.unwrap_or(2),
            seeds: self.seeds.clone().unwrap_or_else(|| (1..=20).collect()),
            gammas: self.gammas.clone().unwrap_or_else(|| vec![0.5, 0.7, 0.9, 0.95, 0.99]),
            ratios: self.ratios.clone().unwrap_or_else(|| vec![0.25, 0.5, 0.75, 1.0]),
            fractions: self.fractions.clone().unwrap_or_else(|| vec![0.25, 0.5, 1.0]),
            rho_kmax: self.rho_kmax.unwrap_or(16384),
            rho_seeds: self.rho_seeds.unwrap_or(20),
            dataset: self.dataset.clone(),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("batsel-out")),
        })
    }
}

impl Resolved {
    /// The fully populated config, suitable for `--config` on a rerun.
    pub fn echo(&self) -> CliConfig {
        let s = &self.selection;
        let t = &self.task;
        let damping_factor = match s.damping {
            DampingPolicy::GradScaled { factor } => Some(factor),
            _ => None,
        };
        CliConfig {
            dataset: self.dataset.clone(),
            out: Some(self.out.clone()),
            seed: Some(s.seed),
            gamma: Some(s.gamma),
            sample_ratio: Some(s.sample_ratio),
            delta: Some(s.delta),
            quota: s.quota_override,
            damping_factor,
            surrogate_steps: Some(s.surrogate_steps),
            adapter_steps: Some(s.adapter_steps),
            learning_rate: Some(s.learning_rate),
            batch_size: Some(s.batch_size),
            validation_fraction: Some(s.validation_fraction),
            score_mode: Some(s.score_mode),
            head: Some(self.head),
            classes: Some(self.classes),
            hidden: Some(t.hidden.clone()),
            noise_sigma: Some(t.noise_sigma),
            l2_lambda: Some(t.l2_lambda),
            task: Some(t.name.clone()),
            dim: Some(t.dim),
            separation: Some(t.separation),
            feature_sd: Some(t.feature_sd),
            shift: Some(t.shift),
            helpful_fraction: Some(t.helpful_fraction),
            n_adaptation: Some(t.n_adaptation),
            pool_size: Some(t.pool_size),
            n_test: Some(t.n_test),
            seeds: Some(self.seeds.clone()),
            gammas: Some(self.gammas.clone()),
            ratios: Some(self.ratios.clone()),
            fractions: Some(self.fractions.clone()),
            rho_kmax: Some(self.rho_kmax),
            rho_seeds: Some(self.rho_seeds),
        }
    }

    /// Model for a dataset of feature dimension `dim`.
    pub fn model_for(&self, dim: usize) -> Result<ModelSpec> {
        let out = match self.head {
            Head::Softmax => self.classes,
            _ => 1,
        };
        if self.task.hidden.is_empty() {
            ModelSpec::new(vec![(dim, out)], Activation::Identity, self.head)
        } else {
            ModelSpec::mlp(dim, &self.task.hidden, out, Activation::Tanh, self.head)
        }
    }

    pub fn loss(&self) -> LossSpec {
        let base = match self.head {
            Head::Linear => LossSpec::squared_error(),
            _ => LossSpec::log_loss(),
        };
        base.with_noise(self.task.noise_sigma).with_l2(self.task.l2_lambda)
    }
}
