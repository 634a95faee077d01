//! Shared fixtures for the criterion benches.

use batsel::data::{LabeledExample, Split};
use batsel::model::{LossSpec, ModelParameters, ModelSpec};
use batsel::rng::rng_from;
use rand_distr::{Distribution, StandardNormal};

pub struct ScoringFixture {
    pub spec: ModelSpec,
    pub params: ModelParameters,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub pool: Vec<LabeledExample>,
    pub loss: LossSpec,
}

fn rows(prefix: &str, n: usize, d: usize, rng: &mut batsel::rng::StageRng, split: Split) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let y = if x[0] + 0.3 * x[d - 1] > 0.0 { 1.0 } else { 0.0 };
            LabeledExample::new(format!("{prefix}{i}"), x, y, split)
        })
        .collect()
}

/// Logistic model with `dim − 1` features, so `D = dim`.
pub fn logistic_fixture(dim: usize, n_train: usize, n_pool: usize, seed: u64) -> ScoringFixture {
    let d = dim - 1;
    let spec = ModelSpec::logistic(d);
    let mut rng = rng_from(seed);
    ScoringFixture {
        params: ModelParameters::init(&spec, seed),
        train: rows("t", n_train, d, &mut rng, Split::Adaptation),
        validation: rows("v", n_train / 4, d, &mut rng, Split::Validation),
        pool: rows("b", n_pool, d, &mut rng, Split::Backbone),
        spec,
        loss: LossSpec::log_loss(),
    }
}
