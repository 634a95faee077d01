//! Curvature operators and the selection score `Z(x)`.
//!
//! For a candidate with per-example gradient `g`, per layer `l`:
//!
//! ```text
//! Z_l(x) = −Tr(G(x) H⁻¹ Q H⁻¹) + 2 Tr(H(x) H⁻¹ Q H⁻¹ G H⁻¹)
//! ```
//!
//! with `G(x) = g gᵀ`. All operators are block-diagonal across layers, so
//! `Z = Σ_l Z_l`. The fast path substitutes `H ← G` and `H(x) ← G(x)`
//! (log-losses) and inverts the damped Gram
//! `(1/n) Σ g_i g_iᵀ + λ_l I` with the swapped-sum Sherman–Morrison form
//!
//! ```text
//! G⁻¹ v ≈ 1/(n λ_l) Σ_i (v − g_i (g_iᵀ v) / (λ_l + g_iᵀ g_i))
//! ```
//!
//! which costs `O(n D_l)` per application and is exact when `n = 1`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{grad_per_layer, LossSpec, ModelParameters, ModelSpec};
use crate::oracle::hessian::{exact_hessian, hessian_sum, layer_block, HessianSource};
use crate::rng::{derive_seed, rng_from};

/// Per-example, per-layer loss gradients. `grads[l]` is `n × D_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub example_ids: Vec<String>,
    pub grads: Vec<DMatrix<f64>>,
    pub delta_used: usize,
}

impl GradientBundle {
    pub fn from_rows(example_ids: Vec<String>, rows: Vec<Vec<Vec<f64>>>, layer_dims: &[usize], delta_used: usize) -> Result<Self> {
        if rows.len() != example_ids.len() {
            return Err(Error::input("row count does not match id count"));
        }
        let n = rows.len();
        let mut grads = Vec::with_capacity(layer_dims.len());
        for (l, &d) in layer_dims.iter().enumerate() {
            let mut m = DMatrix::zeros(n, d);
            for (i, r) in rows.iter().enumerate() {
                if r.len() != layer_dims.len() || r[l].len() != d {
                    return Err(Error::input(format!("gradient of `{}` has wrong layer shape", example_ids[i])));
                }
                for (j, &v) in r[l].iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::numerical(&example_ids[i], "non-finite gradient"));
                    }
                    m[(i, j)] = v;
                }
            }
            grads.push(m);
        }
        Ok(GradientBundle {
            example_ids,
            grads,
            delta_used,
        })
    }

    pub fn len(&self) -> usize {
        self.example_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.grads.len()
    }

    pub fn layer_dim(&self, layer: usize) -> usize {
        self.grads[layer].ncols()
    }

    pub fn row(&self, layer: usize, i: usize) -> Vec<f64> {
        self.grads[layer].row(i).iter().copied().collect()
    }

    /// Rows reordered so that row `k` is old row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        GradientBundle {
            example_ids: perm.iter().map(|&i| self.example_ids[i].clone()).collect(),
            grads: self.grads.iter().map(|m| m.select_rows(perm)).collect(),
            delta_used: self.delta_used,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        GradientBundle {
            example_ids: self.example_ids.clone(),
            grads: self.grads.iter().map(|m| m * c).collect(),
            delta_used: self.delta_used,
        }
    }

    /// Mean of `‖g_i‖²` over rows for one layer.
    pub fn mean_sq_norm(&self, layer: usize) -> f64 {
        let m = &self.grads[layer];
        if m.nrows() == 0 {
            return 0.0;
        }
        m.iter().map(|v| v * v).sum::<f64>() / m.nrows() as f64
    }
}

/// Noise seed of one example's gradient: a function of the run seed and the id only.
pub fn example_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, id)
}

/// Per-example gradients of the δ-averaged loss, rows in input order.
pub fn collect_gradients(
    spec: &ModelSpec,
    params: &ModelParameters,
    examples: &[LabeledExample],
    loss_spec: &LossSpec,
    delta: usize,
    seed: u64,
) -> Result<GradientBundle> {
    if examples.is_empty() {
        return Err(Error::input("cannot collect gradients of an empty set"));
    }
    let rows = examples
        .par_iter()
        .map(|ex| {
            let mut rng = rng_from(example_seed(seed, &ex.id));
            grad_per_layer(spec, params, ex, loss_spec, delta, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    GradientBundle::from_rows(
        examples.iter().map(|e| e.id.clone()).collect(),
        rows,
        &spec.layer_param_dims(),
        delta,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMode {
    ExactDense,
    SmImplicit,
}

/// Rule producing the per-layer damping `λ_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DampingPolicy {
    /// `λ_l = factor · mean_i ‖g_i‖² / D_l`.
    GradScaled {
        factor: f64,
    },
    Uniform {
        lambda: f64,
    },
    PerLayer {
        lambdas: Vec<f64>,
    },
}

impl Default for DampingPolicy {
    fn default() -> Self {
        DampingPolicy::GradScaled { factor: 0.1 }
    }
}

/// Floor applied when a gradient-scaled damping would vanish.
pub const MIN_DAMPING: f64 = 1e-8;

impl DampingPolicy {
    pub fn resolve(&self, bundle: &GradientBundle) -> Result<Vec<f64>> {
        let lambdas = match self {
            DampingPolicy::GradScaled { factor } => {
                if !(*factor > 0.0) {
                    return Err(Error::config("damping factor must be positive"));
                }
                (0..bundle.num_layers())
                    .map(|l| (factor * bundle.mean_sq_norm(l) / bundle.layer_dim(l) as f64).max(MIN_DAMPING))
                    .collect()
            }
            DampingPolicy::Uniform { lambda } => vec![*lambda; bundle.num_layers()],
            DampingPolicy::PerLayer { lambdas } => lambdas.clone(),
        };
        check_lambdas(&lambdas, bundle.num_layers())?;
        Ok(lambdas)
    }
}

fn check_lambdas(lambdas: &[f64], layers: usize) -> Result<()> {
    if lambdas.len() != layers {
        return Err(Error::config(format!("{} damping values for {layers} layers", lambdas.len())));
    }
    if lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::config("damping must be positive and finite on every layer"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum LayerCurvature {
    Dense {
        matrix: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
    Implicit {
        /// `D_l × n`, one column per example.
        cols: DMatrix<f64>,
        /// `1 / (λ + ‖g_i‖²)`.
        inv_denoms: DVector<f64>,
    },
}

/// Block-diagonal damped curvature, immutable after construction.
#[derive(Debug, Clone)]
pub struct CurvatureOperator {
    mode: CurvatureMode,
    lambdas: Vec<f64>,
    n: usize,
    layers: Vec<LayerCurvature>,
}

/// Builds `(1/n) Σ g_i g_iᵀ + λ_l I` per layer, dense or implicit.
pub fn build_curvature(bundle: &GradientBundle, lambdas: &[f64], mode: CurvatureMode) -> Result<CurvatureOperator> {
    check_lambdas(lambdas, bundle.num_layers())?;
    if bundle.is_empty() {
        return Err(Error::config("curvature needs at least one gradient row"));
    }
    let n = bundle.len();
    let layers = bundle
        .grads
        .iter()
        .zip(lambdas)
        .map(|(g, &lam)| match mode {
            CurvatureMode::ExactDense => {
                let mut m = g.transpose() * g / n as f64;
                for i in 0..m.nrows() {
                    m[(i, i)] += lam;
                }
                dense_layer(m)
            }
            CurvatureMode::SmImplicit => {
                let cols = g.transpose();
                let inv_denoms = DVector::from_iterator(n, cols.column_iter().map(|c| 1.0 / (lam + c.norm_squared())));
                Ok(LayerCurvature::Implicit { cols, inv_denoms })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CurvatureOperator {
        mode,
        lambdas: lambdas.to_vec(),
        n,
        layers,
    })
}

fn dense_layer(mut m: DMatrix<f64>) -> Result<LayerCurvature> {
    // exact symmetry; accumulations can leave rounding-level asymmetry
    let t = m.transpose();
    m = (m + t) * 0.5;
    let chol = Cholesky::new(m.clone()).ok_or_else(|| Error::numerical("<operator>", "damped curvature is not positive definite"))?;
    Ok(LayerCurvature::Dense { matrix: m, chol })
}

impl CurvatureOperator {
    /// Dense operator from undamped per-layer blocks; adds `λ_l I`.
    pub fn from_dense_blocks(blocks: Vec<DMatrix<f64>>, lambdas: &[f64]) -> Result<Self> {
        check_lambdas(lambdas, blocks.len())?;
        let layers = blocks
            .into_iter()
            .zip(lambdas)
            .map(|(mut m, &lam)| {
                if m.nrows() != m.ncols() {
                    return Err(Error::input("curvature block must be square"));
                }
                for i in 0..m.nrows() {
                    m[(i, i)] += lam;
                }
                dense_layer(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CurvatureOperator {
            mode: CurvatureMode::ExactDense,
            lambdas: lambdas.to_vec(),
            n: 0,
            layers,
        })
    }

    pub fn mode(&self) -> CurvatureMode {
        self.mode
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_dim(&self, layer: usize) -> usize {
        match &self.layers[layer] {
            LayerCurvature::Dense { matrix, .. } => matrix.nrows(),
            LayerCurvature::Implicit { cols, .. } => cols.nrows(),
        }
    }

    /// The materialized damped matrix of a dense operator.
    pub fn dense_matrix(&self, layer: usize) -> Option<&DMatrix<f64>> {
        match &self.layers[layer] {
            LayerCurvature::Dense { matrix, .. } => Some(matrix),
            LayerCurvature::Implicit { .. } => None,
        }
    }

    fn check_layer(&self, layer: usize, len: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::input(format!("layer {layer} out of range")));
        }
        if len != self.layer_dim(layer) {
            return Err(Error::input(format!(
                "vector has dimension {len}, layer {layer} has {}",
                self.layer_dim(layer)
            )));
        }
        Ok(())
    }

    /// Solves against the damped curvature of one layer.
    pub fn apply_inverse(&self, layer: usize, v: &[f64]) -> Result<Vec<f64>> {
        self.check_layer(layer, v.len())?;
        let m = DMatrix::from_column_slice(v.len(), 1, v);
        Ok(self.inverse_columns(layer, &m).column(0).iter().copied().collect())
    }

    /// Multiplies by the damped curvature of one layer.
    pub fn apply(&self, layer: usize, v: &[f64]) -> Result<Vec<f64>> {
        self.check_layer(layer, v.len())?;
        let m = DMatrix::from_column_slice(v.len(), 1, v);
        Ok(self.forward_columns(layer, &m).column(0).iter().copied().collect())
    }

    pub(crate) fn inverse_columns(&self, layer: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
        let lam = self.lambdas[layer];
        match &self.layers[layer] {
            LayerCurvature::Dense { chol, .. } => chol.solve(v),
            LayerCurvature::Implicit { cols, inv_denoms } => {
                // v/λ − 1/(nλ) Σ_i g_i (g_iᵀ v)/(λ + ‖g_i‖²)
                let mut c = cols.transpose() * v;
                for (mut row, s) in c.row_iter_mut().zip(inv_denoms.iter()) {
                    row *= *s;
                }
                let corr = cols * c;
                (v - corr / self.n as f64) / lam
            }
        }
    }

    pub(crate) fn forward_columns(&self, layer: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.layers[layer] {
            LayerCurvature::Dense { matrix, .. } => matrix * v,
            LayerCurvature::Implicit { cols, .. } => {
                let c = cols.transpose() * v;
                cols * c / self.n as f64 + v * self.lambdas[layer]
            }
        }
    }
}

/// Validation curvature `Q`, per layer.
#[derive(Debug, Clone)]
pub struct ValidationCurvature {
    mode: CurvatureMode,
    layers: Vec<QLayer>,
}

#[derive(Debug, Clone)]
enum QLayer {
    /// `Q = Σ_v q_v q_vᵀ`, columns `q_v`.
    Gram(DMatrix<f64>),
    Dense(DMatrix<f64>),
}

impl ValidationCurvature {
    pub fn mode(&self) -> CurvatureMode {
        self.mode
    }

    /// Materializes layer `layer` as a dense matrix.
    pub fn dense(&self, layer: usize) -> DMatrix<f64> {
        match &self.layers[layer] {
            QLayer::Gram(c) => c * c.transpose(),
            QLayer::Dense(m) => m.clone(),
        }
    }

    pub fn from_gram_columns(cols: Vec<DMatrix<f64>>) -> Self {
        ValidationCurvature {
            mode: CurvatureMode::SmImplicit,
            layers: cols.into_iter().map(QLayer::Gram).collect(),
        }
    }

    pub fn from_dense(blocks: Vec<DMatrix<f64>>) -> Self {
        ValidationCurvature {
            mode: CurvatureMode::ExactDense,
            layers: blocks.into_iter().map(QLayer::Dense).collect(),
        }
    }
}

/// Curvature of the summed validation loss.
///
/// `ExactDense` takes the true Hessian (per-layer blocks); `SmImplicit`
/// keeps the validation gradients so that `Q = Σ_v q_v q_vᵀ`. Both use the
/// deterministic data loss: noise and the regularizer are dropped.
pub fn estimate_q(
    spec: &ModelSpec,
    params: &ModelParameters,
    validation: &[LabeledExample],
    loss_spec: &LossSpec,
    mode: CurvatureMode,
) -> Result<ValidationCurvature> {
    if validation.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let data_loss = loss_spec.data_only();
    match mode {
        CurvatureMode::SmImplicit => {
            let bundle = collect_gradients(spec, params, validation, &data_loss, 1, 0)?;
            Ok(ValidationCurvature::from_gram_columns(
                bundle.grads.iter().map(|g| g.transpose()).collect(),
            ))
        }
        CurvatureMode::ExactDense => {
            let h = hessian_sum(spec, params, validation, &data_loss, HessianSource::preferred(spec))?;
            Ok(ValidationCurvature::from_dense(
                (0..spec.num_layers()).map(|l| layer_block(&h, spec, l)).collect(),
            ))
        }
    }
}

#[derive(Debug, Clone)]
enum LayerScore {
    /// Columns `a_v = H⁻¹ q_v` and `b_v = H⁻¹ G a_v`.
    Gram { a: DMatrix<f64>, b: DMatrix<f64> },
    /// `M1 = H⁻¹ Q H⁻¹` and `M2ᵀ` for `M2 = M1 G H⁻¹`; the transpose makes
    /// `Tr(H(x) M2)` an elementwise sum.
    Dense { m1: DMatrix<f64>, m2t: DMatrix<f64> },
}

/// Precomputed per-operator quantities shared by every candidate.
#[derive(Debug, Clone)]
pub struct ZScorer {
    layers: Vec<LayerScore>,
    bartlett: bool,
}

impl ZScorer {
    /// `bartlett = true` scores with `H(x) ← g gᵀ`; otherwise the candidate's
    /// own Hessian blocks must be supplied to [`ZScorer::z_from_parts`].
    pub fn new(g_op: &CurvatureOperator, h_op: &CurvatureOperator, q: &ValidationCurvature, bartlett: bool) -> Result<Self> {
        let nl = g_op.num_layers();
        if h_op.num_layers() != nl || q.layers.len() != nl {
            return Err(Error::input("operators disagree on layer count"));
        }
        let layers = (0..nl)
            .map(|l| {
                if h_op.layer_dim(l) != g_op.layer_dim(l) {
                    return Err(Error::input(format!("operators disagree on layer {l} dimension")));
                }
                Ok(match &q.layers[l] {
                    QLayer::Gram(cols) => {
                        let a = h_op.inverse_columns(l, cols);
                        let b = h_op.inverse_columns(l, &g_op.forward_columns(l, &a));
                        LayerScore::Gram { a, b }
                    }
                    QLayer::Dense(qm) => {
                        let left = h_op.inverse_columns(l, qm);
                        let m1 = h_op.inverse_columns(l, &left.transpose()).transpose();
                        let ghinv = h_op
                            .inverse_columns(l, &g_op.forward_columns(l, &DMatrix::identity(qm.nrows(), qm.nrows())).transpose())
                            .transpose();
                        let m2t = (&m1 * ghinv).transpose();
                        LayerScore::Dense { m1, m2t }
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ZScorer { layers, bartlett })
    }

    pub fn is_bartlett(&self) -> bool {
        self.bartlett
    }

    /// Returns the two traces `(−Tr(G(x)…), 2 Tr(H(x)…))` summed over layers.
    pub fn z_from_parts(&self, grad: &[Vec<f64>], hessian_blocks: Option<&[DMatrix<f64>]>) -> Result<(f64, f64)> {
        if grad.len() != self.layers.len() {
            return Err(Error::input("gradient has wrong number of layers"));
        }
        if !self.bartlett && hessian_blocks.is_none_or(|h| h.len() != self.layers.len()) {
            return Err(Error::input("non-Bartlett scoring needs the candidate Hessian blocks"));
        }
        let mut first = 0.0;
        let mut second = 0.0;
        for (l, (ls, g)) in self.layers.iter().zip(grad).enumerate() {
            let g = DVector::from_column_slice(g);
            match ls {
                LayerScore::Gram { a, b } => {
                    if g.len() != a.nrows() {
                        return Err(Error::input(format!("gradient layer {l} has wrong dimension")));
                    }
                    let ga = a.tr_mul(&g);
                    first -= ga.norm_squared();
                    if self.bartlett {
                        second += 2.0 * ga.dot(&b.tr_mul(&g));
                    } else {
                        let hx = &hessian_blocks.expect("checked")[l];
                        // Σ_v b_vᵀ H(x) a_v
                        second += 2.0 * (b.transpose() * hx * a).trace();
                    }
                }
                LayerScore::Dense { m1, m2t } => {
                    if g.len() != m1.nrows() {
                        return Err(Error::input(format!("gradient layer {l} has wrong dimension")));
                    }
                    first -= g.dot(&(m1 * &g));
                    if self.bartlett {
                        second += 2.0 * g.dot(&(m2t * &g));
                    } else {
                        let hx = &hessian_blocks.expect("checked")[l];
                        second += 2.0 * hx.iter().zip(m2t.iter()).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        Ok((first, second))
    }

    pub fn z_from_gradient(&self, grad: &[Vec<f64>], hessian_blocks: Option<&[DMatrix<f64>]>) -> Result<f64> {
        let (a, b) = self.z_from_parts(grad, hessian_blocks)?;
        Ok(a + b)
    }
}

/// Scores one candidate: δ-averaged data-loss gradient at the surrogate,
/// with the noise stream seeded by `(seed, candidate id)`.
pub fn score_z(
    candidate: &LabeledExample,
    spec: &ModelSpec,
    surrogate: &ModelParameters,
    scorer: &ZScorer,
    loss_spec: &LossSpec,
    delta: usize,
    seed: u64,
) -> Result<f64> {
    let data_loss = LossSpec {
        l2_lambda: 0.0,
        ..*loss_spec
    };
    let mut rng = rng_from(example_seed(seed, &candidate.id));
    let g = grad_per_layer(spec, surrogate, candidate, &data_loss, delta, &mut rng)?;
    let hx = if scorer.is_bartlett() {
        None
    } else {
        let h = exact_hessian(
            spec,
            surrogate,
            std::slice::from_ref(candidate),
            &data_loss.data_only(),
            HessianSource::preferred(spec),
        )?;
        if spec.num_layers() == 1 {
            Some(vec![h.matrix])
        } else {
            Some((0..spec.num_layers()).map(|l| h.layer_block(spec, l)).collect::<Vec<_>>())
        }
    };
    let z = scorer.z_from_gradient(&g, hx.as_deref())?;
    if !z.is_finite() {
        return Err(Error::numerical(&candidate.id, "non-finite score"));
    }
    Ok(z)
}

/// How the scoring operators are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Bartlett substitution, Sherman–Morrison inverse, validation Gram.
    Fast,
    /// Bartlett substitution with dense damped Gram and dense solves.
    DenseBartlett,
    /// Exact training Hessian (damped), exact validation Hessian, exact
    /// per-candidate Hessians.
    Exact,
}

/// Everything needed to score a pool against one surrogate.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    pub mode: ScoreMode,
    pub lambdas: Vec<f64>,
    pub scorer: ZScorer,
}

impl ScoringContext {
    /// Builds `G`/`H` from `train` and `Q` from `validation` at `params`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        spec: &ModelSpec,
        params: &ModelParameters,
        train: &[LabeledExample],
        validation: &[LabeledExample],
        loss_spec: &LossSpec,
        mode: ScoreMode,
        damping: &DampingPolicy,
        delta: usize,
        seed: u64,
    ) -> Result<Self> {
        let data_loss = LossSpec {
            l2_lambda: 0.0,
            ..*loss_spec
        };
        let bundle = collect_gradients(spec, params, train, &data_loss, delta, derive_seed(seed, "gram"))?;
        let lambdas = damping.resolve(&bundle)?;
        let (g_op, h_op, q) = match mode {
            ScoreMode::Fast => {
                let g = build_curvature(&bundle, &lambdas, CurvatureMode::SmImplicit)?;
                let q = estimate_q(spec, params, validation, loss_spec, CurvatureMode::SmImplicit)?;
                (g.clone(), g, q)
            }
            ScoreMode::DenseBartlett => {
                let g = build_curvature(&bundle, &lambdas, CurvatureMode::ExactDense)?;
                let q = estimate_q(spec, params, validation, loss_spec, CurvatureMode::SmImplicit)?;
                (g.clone(), g, q)
            }
            ScoreMode::Exact => {
                let g = build_curvature(&bundle, &lambdas, CurvatureMode::ExactDense)?;
                let h = exact_hessian(spec, params, train, &loss_spec.with_noise(0.0), HessianSource::preferred(spec))?;
                let blocks = (0..spec.num_layers()).map(|l| h.layer_block(spec, l)).collect();
                let h_op = CurvatureOperator::from_dense_blocks(blocks, &lambdas)?;
                let q = estimate_q(spec, params, validation, loss_spec, CurvatureMode::ExactDense)?;
                (g, h_op, q)
            }
        };
        let scorer = ZScorer::new(&g_op, &h_op, &q, mode != ScoreMode::Exact)?;
        Ok(ScoringContext { mode, lambdas, scorer })
    }

    /// Scores every candidate in parallel; results keep pool order.
    pub fn score_pool(
        &self,
        spec: &ModelSpec,
        params: &ModelParameters,
        pool: &[LabeledExample],
        loss_spec: &LossSpec,
        delta: usize,
        seed: u64,
    ) -> Vec<Result<f64>> {
        let seed = derive_seed(seed, "candidates");
        pool.par_iter()
            .map(|c| score_z(c, spec, params, &self.scorer, loss_spec, delta, seed))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use rand_distr::{Distribution, StandardNormal};

    fn bundle(n: usize, dims: &[usize], seed: u64) -> GradientBundle {
        let mut rng = rng_from(seed);
        let rows = (0..n)
            .map(|_| {
                dims.iter()
                    .map(|&d| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        GradientBundle::from_rows((0..n).map(|i| format!("g{i}")).collect(), rows, dims, 1).unwrap()
    }

    fn rand_vec(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn single_row_dense_is_outer_plus_lambda() {
        let b = bundle(1, &[3], 1);
        let op = build_curvature(&b, &[0.7], CurvatureMode::ExactDense).unwrap();
        let g = b.row(0, 0);
        let m = op.dense_matrix(0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = g[i] * g[j] + if i == j { 0.7 } else { 0.0 };
                assert!((m[(i, j)] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_gradients_give_lambda_identity() {
        let b = GradientBundle::from_rows(vec!["a".into(), "b".into()], vec![vec![vec![0.0; 4]]; 2], &[4], 1).unwrap();
        let op = build_curvature(&b, &[0.25], CurvatureMode::ExactDense).unwrap();
        assert_eq!(op.dense_matrix(0).unwrap(), &(DMatrix::identity(4, 4) * 0.25));
        let imp = build_curvature(&b, &[0.25], CurvatureMode::SmImplicit).unwrap();
        let v = [1.0, -2.0, 0.5, 4.0];
        let r = imp.apply_inverse(0, &v).unwrap();
        for (a, b) in r.iter().zip(v) {
            assert!((a - b / 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_build_matches_naive_accumulation() {
        let b = bundle(20, &[5], 3);
        let op = build_curvature(&b, &[0.1], CurvatureMode::ExactDense).unwrap();
        let mut naive = [[0.0f64; 5]; 5];
        for i in 0..20 {
            let g = b.row(0, i);
            for r in 0..5 {
                for c in 0..5 {
                    naive[r][c] += g[r] * g[c] / 20.0;
                }
            }
        }
        let m = op.dense_matrix(0).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let e = naive[r][c] + if r == c { 0.1 } else { 0.0 };
                assert!((m[(r, c)] - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn invalid_damping_rejected() {
        let b = bundle(2, &[3], 1);
        assert!(matches!(
            build_curvature(&b, &[0.0], CurvatureMode::SmImplicit),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_curvature(&b, &[-1.0], CurvatureMode::ExactDense),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_curvature(&b, &[1.0, 1.0], CurvatureMode::ExactDense),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rank_one_inverse_is_exact() {
        for seed in 0..20 {
            let b = bundle(1, &[6, 3], seed);
            let lam = [0.3, 1.7];
            let imp = build_curvature(&b, &lam, CurvatureMode::SmImplicit).unwrap();
            let den = build_curvature(&b, &lam, CurvatureMode::ExactDense).unwrap();
            for l in 0..2 {
                let v = rand_vec(b.layer_dim(l), seed + 100);
                let a = imp.apply_inverse(l, &v).unwrap();
                let e = den.apply_inverse(l, &v).unwrap();
                let num: f64 = a.iter().zip(&e).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let den_n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(num / den_n < 1e-10);
            }
        }
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let b = bundle(4, &[5], 2);
        let imp = build_curvature(&b, &[0.5], CurvatureMode::SmImplicit).unwrap();
        assert_eq!(imp.apply_inverse(0, &[0.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(matches!(imp.apply_inverse(0, &[0.0; 4]), Err(Error::Input(_))));
    }

    #[test]
    fn implicit_forward_matches_dense() {
        let b = bundle(7, &[4], 5);
        let imp = build_curvature(&b, &[0.2], CurvatureMode::SmImplicit).unwrap();
        let den = build_curvature(&b, &[0.2], CurvatureMode::ExactDense).unwrap();
        let v = rand_vec(4, 9);
        let a = imp.apply(0, &v).unwrap();
        let e = den.apply(0, &v).unwrap();
        for (x, y) in a.iter().zip(e) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_validation_gram_is_outer() {
        let spec = ModelSpec::logistic(2);
        let params = ModelParameters::init(&spec, 3);
        let v = LabeledExample::new("v", vec![0.5, -1.0], 1.0, Split::Validation);
        let q = estimate_q(
            &spec,
            &params,
            std::slice::from_ref(&v),
            &LossSpec::log_loss(),
            CurvatureMode::SmImplicit,
        )
        .unwrap();
        let g = grad_per_layer(&spec, &params, &v, &LossSpec::log_loss(), 1, &mut rng_from(0)).unwrap();
        let qd = q.dense(0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((qd[(i, j)] - g[0][i] * g[0][j]).abs() < 1e-15);
            }
        }
        assert!(matches!(
            estimate_q(&spec, &params, &[], &LossSpec::log_loss(), CurvatureMode::SmImplicit),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_gradient_candidate_scores_zero() {
        let b = bundle(6, &[3], 4);
        let g = build_curvature(&b, &[0.4], CurvatureMode::SmImplicit).unwrap();
        let q = ValidationCurvature::from_gram_columns(vec![bundle(3, &[3], 5).grads[0].transpose()]);
        let s = ZScorer::new(&g, &g, &q, true).unwrap();
        assert_eq!(s.z_from_gradient(&[vec![0.0; 3]], None).unwrap(), 0.0);
        let s = ZScorer::new(&g, &g, &q, false).unwrap();
        let hx = [DMatrix::zeros(3, 3)];
        assert_eq!(s.z_from_gradient(&[vec![0.0; 3]], Some(&hx)).unwrap(), 0.0);
    }

    #[test]
    fn bartlett_dense_reduces_to_squared_projections() {
        // With H = G dense: Z = Σ_v (gᵀ G⁻¹ q_v)²
        let b = bundle(12, &[5], 8);
        let g_op = build_curvature(&b, &[0.3], CurvatureMode::ExactDense).unwrap();
        let qcols = bundle(4, &[5], 9).grads[0].transpose();
        let q = ValidationCurvature::from_gram_columns(vec![qcols.clone()]);
        let s = ZScorer::new(&g_op, &g_op, &q, true).unwrap();
        let g = rand_vec(5, 10);
        let z = s.z_from_gradient(std::slice::from_ref(&g), None).unwrap();
        let ginv_g = g_op.apply_inverse(0, &g).unwrap();
        let expect: f64 = qcols
            .column_iter()
            .map(|c| c.iter().zip(&ginv_g).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum();
        assert!((z - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn gram_and_dense_q_agree() {
        let b = bundle(9, &[4, 2], 11);
        let g_op = build_curvature(&b, &[0.5, 0.2], CurvatureMode::SmImplicit).unwrap();
        let qb = bundle(3, &[4, 2], 12);
        let qg = ValidationCurvature::from_gram_columns(qb.grads.iter().map(|m| m.transpose()).collect());
        let qd = ValidationCurvature::from_dense((0..2).map(|l| qg.dense(l)).collect());
        let s1 = ZScorer::new(&g_op, &g_op, &qg, true).unwrap();
        let s2 = ZScorer::new(&g_op, &g_op, &qd, true).unwrap();
        let g = vec![rand_vec(4, 1), rand_vec(2, 2)];
        let a = s1.z_from_gradient(&g, None).unwrap();
        let c = s2.z_from_gradient(&g, None).unwrap();
        assert!((a - c).abs() < 1e-10 * a.abs().max(1.0));
        // non-Bartlett path: both Q representations agree too
        let hx = vec![DMatrix::identity(4, 4) * 0.3, DMatrix::identity(2, 2)];
        let s1 = ZScorer::new(&g_op, &g_op, &qg, false).unwrap();
        let s2 = ZScorer::new(&g_op, &g_op, &qd, false).unwrap();
        let a = s1.z_from_gradient(&g, Some(&hx)).unwrap();
        let c = s2.z_from_gradient(&g, Some(&hx)).unwrap();
        assert!((a - c).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn collect_preserves_order_and_duplicates() {
        let spec = ModelSpec::logistic(2);
        let params = ModelParameters::init(&spec, 1);
        let e = LabeledExample::new("dup", vec![1.0, 2.0], 1.0, Split::Backbone);
        let b = collect_gradients(&spec, &params, &[e.clone(), e.clone()], &LossSpec::log_loss().with_noise(0.2), 3, 5).unwrap();
        assert_eq!(b.row(0, 0), b.row(0, 1));
        let single = collect_gradients(
            &spec,
            &params,
            std::slice::from_ref(&e),
            &LossSpec::log_loss().with_noise(0.2),
            3,
            5,
        )
        .unwrap();
        assert_eq!(single.len(), 1);
        let mut rng = rng_from(example_seed(5, "dup"));
        let direct = grad_per_layer(&spec, &params, &e, &LossSpec::log_loss().with_noise(0.2), 3, &mut rng).unwrap();
        assert_eq!(single.row(0, 0), direct[0]);
    }
}
