use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{backprop, head_hessian, head_loss, trace_forward, LossSpec, ModelParameters, ModelSpec};

/// Parameter count above which dense `D × D` paths refuse to run.
pub const DENSE_DIM_CAP: usize = 500;

/// Central-difference step for Hessians of multi-layer models.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianSource {
    Analytic,
    FiniteDifference,
}

impl HessianSource {
    /// Analytic where available (single-layer models), finite differences otherwise.
    pub fn preferred(spec: &ModelSpec) -> Self {
        if spec.is_single_layer() {
            HessianSource::Analytic
        } else {
            HessianSource::FiniteDifference
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactHessian {
    pub matrix: DMatrix<f64>,
    pub source: HessianSource,
}

impl ExactHessian {
    /// Diagonal block of layer `layer`.
    pub fn layer_block(&self, spec: &ModelSpec, layer: usize) -> DMatrix<f64> {
        layer_block(&self.matrix, spec, layer)
    }
}

pub fn layer_block(m: &DMatrix<f64>, spec: &ModelSpec, layer: usize) -> DMatrix<f64> {
    let dims = spec.layer_param_dims();
    let off: usize = dims[..layer].iter().sum();
    m.view((off, off), (dims[layer], dims[layer])).into_owned()
}

pub(crate) fn check_cap(spec: &ModelSpec) -> Result<()> {
    let dim = spec.total_dim();
    if dim > DENSE_DIM_CAP {
        return Err(Error::Size { dim, cap: DENSE_DIM_CAP });
    }
    Ok(())
}

/// Hessian of the mean loss `(1/n) Σ ℓ_i + λ ½‖θ‖²` over `examples`.
///
/// Noise injection is ignored: the Hessian is taken of the deterministic
/// loss. The output is symmetrized.
pub fn exact_hessian(
    spec: &ModelSpec,
    params: &ModelParameters,
    examples: &[LabeledExample],
    loss_spec: &LossSpec,
    source: HessianSource,
) -> Result<ExactHessian> {
    if examples.is_empty() {
        return Err(Error::input("Hessian of an empty set"));
    }
    let mut m = hessian_sum(spec, params, examples, loss_spec, source)?;
    m /= examples.len() as f64;
    Ok(ExactHessian { matrix: m, source })
}

/// Hessian of `Σ_i (ℓ_i + λ ½‖θ‖²)`: additive over disjoint sets.
pub fn hessian_sum(
    spec: &ModelSpec,
    params: &ModelParameters,
    examples: &[LabeledExample],
    loss_spec: &LossSpec,
    source: HessianSource,
) -> Result<DMatrix<f64>> {
    check_cap(spec)?;
    loss_spec.validate(spec)?;
    params.check(spec)?;
    let dim = spec.total_dim();
    let mut m = DMatrix::zeros(dim, dim);
    for ex in examples {
        match source {
            HessianSource::Analytic => add_analytic(spec, params, ex, &mut m)?,
            HessianSource::FiniteDifference => add_finite_difference(spec, params, ex, &mut m)?,
        }
    }
    if loss_spec.l2_lambda > 0.0 {
        let r = loss_spec.l2_lambda * examples.len() as f64;
        for i in 0..dim {
            m[(i, i)] += r;
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("<set>", "non-finite Hessian"));
    }
    Ok(sym)
}

fn add_analytic(spec: &ModelSpec, params: &ModelParameters, ex: &LabeledExample, m: &mut DMatrix<f64>) -> Result<()> {
    if !spec.is_single_layer() {
        return Err(Error::config("analytic Hessian is only available for single-layer models"));
    }
    let (din, dout) = spec.layer_dims[0];
    let trace = trace_forward(spec, params, &ex.x)?;
    let h = head_hessian(spec.head, trace.logits());
    // ∂z_o/∂θ is x̃ = [x, 1] on the entries of output o and zero elsewhere.
    let idx = |o: usize, i: usize| if i < din { o * din + i } else { din * dout + o };
    let xt = |i: usize| if i < din { ex.x[i] } else { 1.0 };
    for o in 0..dout {
        for o2 in 0..dout {
            let hoo = h[o * dout + o2];
            if hoo == 0.0 {
                continue;
            }
            // column-major storage: walk rows innermost
            for j in 0..=din {
                let b = hoo * xt(j);
                let col = idx(o2, j);
                for i in 0..=din {
                    m[(idx(o, i), col)] += xt(i) * b;
                }
            }
        }
    }
    Ok(())
}

fn data_grad_flat(spec: &ModelSpec, params: &ModelParameters, ex: &LabeledExample) -> Result<Vec<f64>> {
    let trace = trace_forward(spec, params, &ex.x)?;
    let (_, dz) = head_loss(spec.head, trace.logits(), ex.y);
    Ok(backprop(spec, params, &trace, dz).into_iter().flatten().collect())
}

fn add_finite_difference(spec: &ModelSpec, params: &ModelParameters, ex: &LabeledExample, m: &mut DMatrix<f64>) -> Result<()> {
    let mut flat = params.flatten();
    let dim = flat.len();
    for j in 0..dim {
        let orig = flat[j];
        flat[j] = orig + FD_STEP;
        let gp = data_grad_flat(spec, &ModelParameters::from_flat(spec, &flat)?, ex)?;
        flat[j] = orig - FD_STEP;
        let gm = data_grad_flat(spec, &ModelParameters::from_flat(spec, &flat)?, ex)?;
        flat[j] = orig;
        for i in 0..dim {
            m[(i, j)] += (gp[i] - gm[i]) / (2.0 * FD_STEP);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::{Activation, Head};
    use crate::rng::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn rows(n: usize, d: usize, seed: u64, logistic: bool) -> Vec<LabeledExample> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let y = if logistic {
                    (i % 2) as f64
                } else {
                    StandardNormal.sample(&mut rng)
                };
                LabeledExample::new(format!("r{i}"), x, y, Split::Adaptation)
            })
            .collect()
    }

    #[test]
    fn least_squares_closed_form() {
        let d = 4;
        let spec = ModelSpec::linear(d);
        let data = rows(25, d, 3, false);
        let params = ModelParameters::init(&spec, 1);
        let lam = 0.3;
        let h = exact_hessian(
            &spec,
            &params,
            &data,
            &LossSpec::squared_error().with_l2(lam),
            HessianSource::Analytic,
        )
        .unwrap();
        // (1/n) X̃ᵀX̃ + λI with the bias column last
        let n = data.len();
        let xt = DMatrix::from_fn(n, d + 1, |r, c| if c < d { data[r].x[c] } else { 1.0 });
        let expect = xt.transpose() * &xt / n as f64 + DMatrix::identity(d + 1, d + 1) * lam;
        assert!((h.matrix - expect).amax() < 1e-12);
    }

    #[test]
    fn logistic_closed_form() {
        let d = 3;
        let spec = ModelSpec::logistic(d);
        let data = rows(30, d, 5, true);
        let params = ModelParameters::init(&spec, 2);
        let h = exact_hessian(&spec, &params, &data, &LossSpec::log_loss(), HessianSource::Analytic).unwrap();
        let mut expect = DMatrix::zeros(d + 1, d + 1);
        for ex in &data {
            let xt: Vec<f64> = ex.x.iter().copied().chain([1.0]).collect();
            let z: f64 = xt.iter().zip(&params.layers[0]).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for i in 0..=d {
                for j in 0..=d {
                    expect[(i, j)] += p * (1.0 - p) * xt[i] * xt[j];
                }
            }
        }
        expect /= data.len() as f64;
        assert!((h.matrix - expect).amax() < 1e-14);
    }

    #[test]
    fn analytic_matches_finite_difference_softmax() {
        let spec = ModelSpec::new(vec![(3, 3)], Activation::Identity, Head::Softmax).unwrap();
        let data: Vec<LabeledExample> = rows(10, 3, 9, false)
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| {
                e.y = (i % 3) as f64;
                e
            })
            .collect();
        let params = ModelParameters::init(&spec, 4);
        let a = exact_hessian(&spec, &params, &data, &LossSpec::log_loss(), HessianSource::Analytic).unwrap();
        let f = exact_hessian(&spec, &params, &data, &LossSpec::log_loss(), HessianSource::FiniteDifference).unwrap();
        assert!((a.matrix - f.matrix).amax() < 1e-7);
    }

    #[test]
    fn mlp_finite_difference_is_symmetric() {
        let spec = ModelSpec::mlp(30, &[4], 1, Activation::Tanh, Head::LogisticBinary).unwrap();
        let data = rows(5, 30, 1, true);
        let params = ModelParameters::init(&spec, 8);
        // raw (pre-symmetrization) asymmetry is what the audit measures
        let mut raw = DMatrix::zeros(spec.total_dim(), spec.total_dim());
        for ex in &data {
            add_finite_difference(&spec, &params, ex, &mut raw).unwrap();
        }
        raw /= data.len() as f64;
        assert!((&raw - raw.transpose()).amax() < 1e-6);
        let h = exact_hessian(&spec, &params, &data, &LossSpec::log_loss(), HessianSource::FiniteDifference).unwrap();
        assert!((&h.matrix - h.matrix.transpose()).amax() == 0.0);
    }

    #[test]
    fn analytic_rejects_mlp_and_cap_enforced() {
        let spec = ModelSpec::mlp(3, &[2], 1, Activation::Tanh, Head::Linear).unwrap();
        let data = rows(2, 3, 1, false);
        let p = ModelParameters::init(&spec, 1);
        assert!(exact_hessian(&spec, &p, &data, &LossSpec::squared_error(), HessianSource::Analytic).is_err());
        let big = ModelSpec::linear(600);
        let data = rows(1, 600, 1, false);
        let p = ModelParameters::zeros(&big);
        assert!(matches!(
            exact_hessian(&big, &p, &data, &LossSpec::squared_error(), HessianSource::Analytic),
            Err(Error::Size { .. })
        ));
    }
}
