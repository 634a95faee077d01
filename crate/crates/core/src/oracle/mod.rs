//! Brute-force references for every fast path.
//!
//! Everything here materializes dense `D × D` matrices over all model
//! parameters (no block-diagonal shortcut) and is capped at
//! [`hessian::DENSE_DIM_CAP`] parameters.

pub mod hessian;
pub mod rho;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::influence::example_seed;
use crate::model::{grad_per_layer, LossSpec, ModelParameters, ModelSpec};
use crate::rng::{derive_seed, rng_from};

pub use hessian::{exact_hessian, hessian_sum, ExactHessian, HessianSource, DENSE_DIM_CAP};
pub use rho::{estimate_rho, geometric_grid, plateau_slope, RhoEstimate, RhoKind, RhoMethod, RhoTask, SMatrix};

/// Curvature used by [`exact_z`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleCurvature {
    /// `H ← G`, `H(x) ← G(x)`, `Q` = validation gradient Gram.
    Bartlett,
    /// True Hessians of the training risk, the candidate loss and the summed
    /// validation loss.
    Hessian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactZOptions {
    pub curvature: OracleCurvature,
    /// Per-layer damping added to both `G` and `H`.
    pub lambdas: Vec<f64>,
    pub delta: usize,
    /// Same seed convention as the fast path: training gradients use
    /// `derive_seed(seed, "gram")`, candidates `derive_seed(seed, "candidates")`.
    pub seed: u64,
}

/// Training and validation sets the surrogate operators are built on.
#[derive(Debug, Clone, Copy)]
pub struct OracleData<'a> {
    pub train: &'a [LabeledExample],
    pub validation: &'a [LabeledExample],
}

fn flat_grad(
    spec: &ModelSpec,
    params: &ModelParameters,
    ex: &LabeledExample,
    ls: &LossSpec,
    delta: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    let mut rng = rng_from(example_seed(seed, &ex.id));
    let g = grad_per_layer(spec, params, ex, ls, delta, &mut rng)?;
    Ok(DVector::from_iterator(spec.total_dim(), g.into_iter().flatten()))
}

fn damping_diag(spec: &ModelSpec, lambdas: &[f64]) -> Result<DMatrix<f64>> {
    let dims = spec.layer_param_dims();
    if lambdas.len() != dims.len() || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::config("oracle needs one positive damping value per layer"));
    }
    let diag = dims.iter().zip(lambdas).flat_map(|(&d, &l)| std::iter::repeat_n(l, d));
    Ok(DMatrix::from_diagonal(&DVector::from_iterator(spec.total_dim(), diag)))
}

/// Precomputed dense operators for [`exact_z`] over a whole pool.
#[derive(Debug, Clone)]
pub struct ExactZOracle {
    options: ExactZOptions,
    g: DMatrix<f64>,
    h_inv: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl ExactZOracle {
    pub fn new(
        spec: &ModelSpec,
        surrogate: &ModelParameters,
        data: OracleData<'_>,
        loss_spec: &LossSpec,
        options: ExactZOptions,
    ) -> Result<Self> {
        hessian::check_cap(spec)?;
        if data.train.is_empty() || data.validation.is_empty() {
            return Err(Error::config("oracle needs nonempty train and validation sets"));
        }
        let dim = spec.total_dim();
        let data_loss = LossSpec {
            l2_lambda: 0.0,
            ..*loss_spec
        };
        let lam = damping_diag(spec, &options.lambdas)?;
        let gseed = derive_seed(options.seed, "gram");
        let mut g = DMatrix::zeros(dim, dim);
        for ex in data.train {
            let v = flat_grad(spec, surrogate, ex, &data_loss, options.delta, gseed)?;
            g += &v * v.transpose();
        }
        g /= data.train.len() as f64;
        g += &lam;
        let (h, q) = match options.curvature {
            OracleCurvature::Bartlett => {
                let mut q = DMatrix::zeros(dim, dim);
                for ex in data.validation {
                    let v = flat_grad(spec, surrogate, ex, &data_loss.data_only(), 1, 0)?;
                    q += &v * v.transpose();
                }
                (g.clone(), q)
            }
            OracleCurvature::Hessian => {
                let src = HessianSource::preferred(spec);
                let h = exact_hessian(spec, surrogate, data.train, &loss_spec.with_noise(0.0), src)?.matrix + &lam;
                let q = hessian_sum(spec, surrogate, data.validation, &data_loss.data_only(), src)?;
                (h, q)
            }
        };
        let h_inv = h
            .try_inverse()
            .ok_or_else(|| Error::numerical("<oracle>", "damped Hessian is singular"))?;
        Ok(ExactZOracle { options, g, h_inv, q })
    }

    /// Both traces of the score, evaluated literally with dense products.
    pub fn z_parts(
        &self,
        spec: &ModelSpec,
        surrogate: &ModelParameters,
        candidate: &LabeledExample,
        loss_spec: &LossSpec,
    ) -> Result<(f64, f64)> {
        let data_loss = LossSpec {
            l2_lambda: 0.0,
            ..*loss_spec
        };
        let g = flat_grad(
            spec,
            surrogate,
            candidate,
            &data_loss,
            self.options.delta,
            derive_seed(self.options.seed, "candidates"),
        )?;
        let gx = &g * g.transpose();
        let hx = match self.options.curvature {
            OracleCurvature::Bartlett => gx.clone(),
            OracleCurvature::Hessian => {
                exact_hessian(
                    spec,
                    surrogate,
                    std::slice::from_ref(candidate),
                    &data_loss.data_only(),
                    HessianSource::preferred(spec),
                )?
                .matrix
            }
        };
        let hqh = &self.h_inv * &self.q * &self.h_inv;
        let first = -(gx * &hqh).trace();
        let second = 2.0 * (hx * &hqh * &self.g * &self.h_inv).trace();
        if !(first + second).is_finite() {
            return Err(Error::numerical(&candidate.id, "non-finite exact score"));
        }
        Ok((first, second))
    }

    pub fn z(&self, spec: &ModelSpec, surrogate: &ModelParameters, candidate: &LabeledExample, loss_spec: &LossSpec) -> Result<f64> {
        let (a, b) = self.z_parts(spec, surrogate, candidate, loss_spec)?;
        Ok(a + b)
    }
}

/// Exact two-trace score of one candidate with dense inverses.
pub fn exact_z(
    candidate: &LabeledExample,
    spec: &ModelSpec,
    surrogate: &ModelParameters,
    data: OracleData<'_>,
    loss_spec: &LossSpec,
    options: ExactZOptions,
) -> Result<f64> {
    ExactZOracle::new(spec, surrogate, data, loss_spec, options)?.z(spec, surrogate, candidate, loss_spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    /// `γ ‖(H^{bat|A})⁻¹ Σ_{D^bat} ∇L‖`
    pub lhs: f64,
    /// `‖(H^{bat|A} − H^bat)⁻¹ Σ_{D^A} ∇L‖`
    pub rhs: f64,
    pub holds: bool,
    /// `lhs − rhs`; reported only, never used to flip `holds`.
    pub slack: f64,
    pub gamma: f64,
    /// `‖H^{bat|A} − H^bat − H^A‖_F / ‖H^A‖_F`.
    pub decomposition_residual: f64,
}

/// Checks the BAT benefit condition at one parameter point.
///
/// Hessians are summed over their defining sets (so that
/// `H^{bat|A} = H^bat + H^A` holds exactly); `damping` is added to every
/// matrix before inversion.
pub fn check_prop2(
    spec: &ModelSpec,
    adaptation: &[LabeledExample],
    selected: &[LabeledExample],
    surrogate: &ModelParameters,
    gamma: f64,
    loss_spec: &LossSpec,
    damping: f64,
) -> Result<Prop2Report> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config("gamma must lie in (0, 1)"));
    }
    if adaptation.is_empty() {
        return Err(Error::config("adaptation set is empty"));
    }
    if !(damping >= 0.0) {
        return Err(Error::config("damping must be non-negative"));
    }
    let dim = spec.total_dim();
    let ls = loss_spec.with_noise(0.0);
    let src = HessianSource::preferred(spec);
    let bat: Vec<LabeledExample> = adaptation.iter().chain(selected).cloned().collect();
    let h_bat_a = hessian_sum(spec, surrogate, &bat, &ls, src)?;
    let h_bat = if selected.is_empty() {
        DMatrix::zeros(dim, dim)
    } else {
        hessian_sum(spec, surrogate, selected, &ls, src)?
    };
    let h_a = hessian_sum(spec, surrogate, adaptation, &ls, src)?;
    let residual = (&h_bat_a - &h_bat - &h_a).norm() / h_a.norm().max(f64::MIN_POSITIVE);

    let sum_grad = |set: &[LabeledExample]| -> Result<DVector<f64>> {
        let mut s = DVector::zeros(dim);
        for ex in set {
            s += flat_grad(spec, surrogate, ex, &ls, 1, 0)?;
        }
        Ok(s)
    };
    let eye = DMatrix::identity(dim, dim) * damping;
    let solve = |m: DMatrix<f64>, v: &DVector<f64>, what: &str| -> Result<DVector<f64>> {
        (m + &eye)
            .lu()
            .solve(v)
            .ok_or_else(|| Error::numerical("<prop2>", format!("{what} is singular after damping")))
    };
    let lhs = gamma * solve(h_bat_a.clone(), &sum_grad(&bat)?, "H^{bat|A}")?.norm();
    let rhs = solve(h_bat_a - h_bat, &sum_grad(adaptation)?, "H^A")?.norm();
    Ok(Prop2Report {
        lhs,
        rhs,
        holds: lhs <= rhs,
        slack: lhs - rhs,
        gamma,
        decomposition_residual: residual,
    })
}

/// Newton's method on the regularized mean risk of a single-layer model.
pub fn fit_convex(
    spec: &ModelSpec,
    data: &[LabeledExample],
    loss_spec: &LossSpec,
    init: Option<ModelParameters>,
) -> Result<ModelParameters> {
    if !spec.is_single_layer() {
        return Err(Error::config("exact fitting needs a convex (single-layer) model"));
    }
    if data.is_empty() {
        return Err(Error::input("cannot fit an empty set"));
    }
    let ls = loss_spec.with_noise(0.0);
    let mut params = init.unwrap_or_else(|| ModelParameters::zeros(spec));
    let dim = spec.total_dim();
    for _ in 0..100 {
        let h = exact_hessian(spec, &params, data, &ls, HessianSource::Analytic)?.matrix;
        let mut g = DVector::zeros(dim);
        for ex in data {
            g += flat_grad(spec, &params, ex, &ls, 1, 0)?;
        }
        g /= data.len() as f64;
        let step = h
            .cholesky()
            .map(|c| c.solve(&g))
            .ok_or_else(|| Error::numerical("<fit>", "risk Hessian not positive definite"))?;
        let flat: Vec<f64> = params.flatten().iter().zip(step.iter()).map(|(t, s)| t - s).collect();
        params = ModelParameters::from_flat(spec, &flat)?;
        if !params.is_finite() {
            return Err(Error::numerical("<fit>", "Newton iterate diverged"));
        }
        if step.norm() < 1e-12 * (1.0 + DVector::from_vec(flat).norm()) {
            break;
        }
    }
    Ok(params)
}
