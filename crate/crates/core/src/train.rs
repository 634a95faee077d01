//! Minibatch SGD with a fixed learning rate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, LossSpec, ModelParameters, ModelSpec};
use crate::rng::{derive_seed, stage_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn with_steps(self, steps: usize) -> Self {
        TrainConfig { steps, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        TrainConfig { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    /// Mean minibatch loss before each update.
    pub loss_trace: Vec<f64>,
}

/// Trains from the seeded initialization of `config.seed`.
///
/// Batches walk through a fresh shuffle each epoch; a batch never spans
/// two epochs. Noise draws use `delta = 1`.
pub fn train(spec: &ModelSpec, data: &[&LabeledExample], loss_spec: &LossSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    let init = ModelParameters::init(spec, derive_seed(config.seed, "init"));
    train_from(spec, init, data, loss_spec, config)
}

pub fn train_from(
    spec: &ModelSpec,
    init: ModelParameters,
    data: &[&LabeledExample],
    loss_spec: &LossSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    spec.validate()?;
    config.validate()?;
    loss_spec.validate(spec)?;
    init.check(spec)?;
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let mut params = init;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = stage_rng(config.seed, "shuffle");
    let mut noise_rng = stage_rng(config.seed, "train-noise");
    let batch = config.batch_size.min(data.len());
    let mut cursor = data.len();
    let mut trace = Vec::with_capacity(config.steps);
    let mut grad_acc: Vec<Vec<f64>> = params.layers.iter().map(|l| vec![0.0; l.len()]).collect();

    for step in 0..config.steps {
        if cursor + batch > data.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        for g in grad_acc.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut batch_loss = 0.0;
        for &i in &order[cursor..cursor + batch] {
            let (l, g) = loss_and_grad(spec, &params, data[i], loss_spec, 1, &mut noise_rng).map_err(|e| match e {
                Error::Numerical { msg, id } => Error::Training {
                    step,
                    msg: format!("{msg} on `{id}`"),
                },
                other => other,
            })?;
            batch_loss += l;
            for (acc, gl) in grad_acc.iter_mut().zip(g) {
                for (a, v) in acc.iter_mut().zip(gl) {
                    *a += v;
                }
            }
        }
        cursor += batch;
        let scale = config.learning_rate / batch as f64;
        for (layer, acc) in params.layers.iter_mut().zip(&grad_acc) {
            for (t, g) in layer.iter_mut().zip(acc) {
                *t -= scale * g;
            }
        }
        let mean = batch_loss / batch as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Training {
                step,
                msg: "non-finite loss or parameters".into(),
            });
        }
        trace.push(mean);
    }
    Ok(TrainOutcome { params, loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::{mean_loss, LossKind};

    fn separable() -> Vec<LabeledExample> {
        (0..40)
            .map(|i| {
                let y = (i % 2) as f64;
                let s = if y == 1.0 { 1.0 } else { -1.0 };
                let t = i as f64 / 40.0;
                LabeledExample::new(format!("s{i}"), vec![s * (1.0 + t), 0.5 - t], y, Split::Adaptation)
            })
            .collect()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            learning_rate: 0.5,
            batch_size: 8,
            seed: 11,
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let spec = ModelSpec::logistic(2);
        let data = separable();
        let view: Vec<&LabeledExample> = data.iter().collect();
        let out = train(&spec, &view, &LossSpec::log_loss(), &cfg(0)).unwrap();
        assert_eq!(out.params, ModelParameters::init(&spec, derive_seed(11, "init")));
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn separable_data_is_fit() {
        let spec = ModelSpec::logistic(2);
        let data = separable();
        let view: Vec<&LabeledExample> = data.iter().collect();
        let out = train(&spec, &view, &LossSpec::log_loss(), &cfg(600)).unwrap();
        let l = mean_loss(&spec, &out.params, &data, LossKind::LogLoss).unwrap();
        assert!(l < 0.1, "training log-loss {l}");
    }

    #[test]
    fn bit_identical_reruns() {
        let spec = ModelSpec::mlp(2, &[4], 1, crate::model::Activation::Tanh, crate::model::Head::LogisticBinary).unwrap();
        let data = separable();
        let view: Vec<&LabeledExample> = data.iter().collect();
        let ls = LossSpec::log_loss().with_noise(0.2);
        let a = train(&spec, &view, &ls, &cfg(50)).unwrap();
        let b = train(&spec, &view, &ls, &cfg(50)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_reports_step() {
        let spec = ModelSpec::linear(1);
        let data: Vec<LabeledExample> = (0..4)
            .map(|i| LabeledExample::new(format!("d{i}"), vec![1e3 * (i + 1) as f64], 1.0, Split::Adaptation))
            .collect();
        let view: Vec<&LabeledExample> = data.iter().collect();
        let c = TrainConfig {
            steps: 200,
            learning_rate: 10.0,
            batch_size: 4,
            seed: 0,
        };
        match train(&spec, &view, &LossSpec::squared_error(), &c) {
            Err(Error::Training { step, .. }) => assert!(step < 200),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_data_rejected() {
        let spec = ModelSpec::logistic(2);
        assert!(train(&spec, &[], &LossSpec::log_loss(), &cfg(1)).is_err());
    }
}
