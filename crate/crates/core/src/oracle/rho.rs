//! Empirical asymptotic error coefficient `ρ̂ = k · E‖θ̂_k − θ*‖²_S`.
//!
//! Tasks are well specified, so the population minimizer `θ*` is the
//! generating parameter vector. Each seed draws one nested stream of
//! adaptation examples and one of pool candidates; the estimate at `k` uses
//! their prefixes, which keeps neighbouring grid points correlated and the
//! curve smooth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hessian::{exact_hessian, HessianSource};
use super::{check_prop2, fit_convex};
use crate::data::{LabeledExample, Split};
use crate::error::{Error, Result};
use crate::influence::{DampingPolicy, ScoreMode, ScoringContext};
use crate::model::{sigmoid, LossSpec, ModelParameters, ModelSpec};
use crate::rng::{derive_seed, stage_rng, StageRng};
use crate::selection::{choose_eta, round_half_up, select, split_validation, ScoreInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoKind {
    /// Linear model, squared error, Gaussian label noise.
    Quadratic,
    /// Logistic regression with Bernoulli labels.
    Logistic,
    /// One hidden tanh layer. Not convex: estimation is refused.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoMethod {
    /// Fit on `k` adaptation examples.
    Plain,
    /// Fit on `round(γk)` adaptation examples plus the `k − round(γk)`
    /// top-scored pool candidates.
    Bat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SMatrix {
    Identity,
    /// Population risk Hessian at `θ*`.
    RiskHessian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoTask {
    pub kind: RhoKind,
    pub dim: usize,
    /// Label noise standard deviation (quadratic only).
    pub noise_sd: f64,
    pub gamma: f64,
    /// Pool size as a multiple of the backbone quota at each `k`.
    pub pool_factor: usize,
    /// Feature scale of pool examples relative to the adaptation distribution.
    pub pool_scale: f64,
    /// Fraction of the pool with corrupted labels.
    pub harmful_fraction: f64,
    /// Label offset of corrupted quadratic examples, in noise units.
    pub harmful_shift: f64,
    /// Label noise of pool examples (quadratic only).
    pub pool_noise_sd: f64,
    /// Fixes `θ*`; per-run data comes from the run seeds.
    pub seed: u64,
}

impl Default for RhoTask {
    fn default() -> Self {
        RhoTask {
            kind: RhoKind::Quadratic,
            dim: 50,
            noise_sd: 1.0,
            gamma: 0.9,
            pool_factor: 4,
            pool_scale: 2.0,
            harmful_fraction: 0.5,
            harmful_shift: 3.0,
            pool_noise_sd: 0.3,
            seed: 0,
        }
    }
}

impl RhoTask {
    pub fn validate(&self) -> Result<()> {
        if let RhoKind::Mlp { .. } = self.kind {
            return Err(Error::config("rho is only defined for convex tasks (quadratic or logistic)"));
        }
        if self.dim == 0 {
            return Err(Error::config("rho task needs dim >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma must lie in (0, 1)"));
        }
        if self.pool_factor == 0 || !(self.pool_scale > 0.0) || !(0.0..=1.0).contains(&self.harmful_fraction) {
            return Err(Error::config("invalid pool parameters"));
        }
        if !(self.noise_sd >= 0.0) || !(self.pool_noise_sd >= 0.0) {
            return Err(Error::config("noise_sd must be non-negative"));
        }
        Ok(())
    }

    pub fn spec(&self) -> ModelSpec {
        match self.kind {
            RhoKind::Logistic => ModelSpec::logistic(self.dim),
            _ => ModelSpec::linear(self.dim),
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.kind {
            RhoKind::Logistic => LossSpec::log_loss(),
            _ => LossSpec::squared_error(),
        }
    }

    /// Per-coordinate variance of adaptation features, spread over `[0.5, 2]`.
    pub fn feature_variances(&self) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|j| if d == 1 { 1.0 } else { 0.5 + 1.5 * j as f64 / (d - 1) as f64 })
            .collect()
    }

    /// Generating parameters: weights `N(0, 1/d)` then bias `0.1`.
    pub fn theta_star(&self) -> Vec<f64> {
        let mut rng = stage_rng(self.seed, "theta-star");
        let s = 1.0 / (self.dim as f64).sqrt();
        let mut t: Vec<f64> = (0..self.dim)
            .map(|_| s * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        t.push(0.1);
        t
    }

    fn features(&self, rng: &mut StageRng, scale: f64) -> Vec<f64> {
        self.feature_variances()
            .iter()
            .map(|v| scale * v.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
            .collect()
    }

    fn label(&self, theta: &[f64], x: &[f64], rng: &mut StageRng, corrupt: bool, noise_sd: f64) -> f64 {
        let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + theta[self.dim];
        match self.kind {
            RhoKind::Logistic => {
                let y = if rng.random::<f64>() < sigmoid(z) { 1.0 } else { 0.0 };
                if corrupt {
                    1.0 - y
                } else {
                    y
                }
            }
            _ => {
                let e: f64 = StandardNormal.sample(&mut *rng);
                let shift = if corrupt { self.harmful_shift * self.noise_sd } else { 0.0 };
                z + noise_sd * e + shift
            }
        }
    }

    /// `count` adaptation examples, a prefix-stable stream for `seed`.
    pub fn draw_adaptation(&self, theta: &[f64], seed: u64, count: usize) -> Vec<LabeledExample> {
        let mut rng = stage_rng(seed, "rho-adaptation");
        (0..count)
            .map(|i| {
                let x = self.features(&mut rng, 1.0);
                let y = self.label(theta, &x, &mut rng, false, self.noise_sd);
                LabeledExample::new(format!("a{i:06}"), x, y, Split::Adaptation)
            })
            .collect()
    }

    /// `count` pool candidates; a `harmful_fraction` share carries corrupted labels.
    pub fn draw_pool(&self, theta: &[f64], seed: u64, count: usize) -> Vec<LabeledExample> {
        let mut rng = stage_rng(seed, "rho-pool");
        (0..count)
            .map(|i| {
                let corrupt = rng.random::<f64>() < self.harmful_fraction;
                let x = self.features(&mut rng, self.pool_scale);
                let y = self.label(theta, &x, &mut rng, corrupt, self.pool_noise_sd);
                LabeledExample::new(format!("b{i:06}"), x, y, Split::Backbone)
            })
            .collect()
    }

    /// Weighting matrix for the error norm.
    pub fn s_matrix(&self, which: SMatrix) -> Result<DMatrix<f64>> {
        let dd = self.dim + 1;
        match which {
            SMatrix::Identity => Ok(DMatrix::identity(dd, dd)),
            SMatrix::RiskHessian => match self.kind {
                // E[x̃ x̃ᵀ] for zero-mean independent features
                RhoKind::Quadratic => {
                    let mut v = self.feature_variances();
                    v.push(1.0);
                    Ok(DMatrix::from_diagonal(&DVector::from_vec(v)))
                }
                _ => {
                    let theta = self.theta_star();
                    let sample = self.draw_adaptation(&theta, derive_seed(self.seed, "population"), 20_000);
                    let spec = self.spec();
                    let p = ModelParameters::from_flat(&spec, &theta)?;
                    Ok(exact_hessian(&spec, &p, &sample, &self.loss_spec(), HessianSource::Analytic)?.matrix)
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub method: RhoMethod,
    pub s_matrix: SMatrix,
    pub k_grid: Vec<usize>,
    /// Mean of `k ‖θ̂_k − θ*‖²_S` over seeds, per grid point.
    pub curve: Vec<f64>,
    pub curve_stderr: Vec<f64>,
    /// Curve value at the largest `k`.
    pub rho_hat: f64,
    /// Least-squares log-log slope over grid points in `[k_max / 2, k_max]`.
    pub plateau_slope: f64,
    pub seeds: usize,
    /// Bat only: share of (seed, k) runs whose selection satisfies the
    /// benefit condition at `θ*`.
    pub prop2_holds_fraction: Option<f64>,
}

fn sq_norm_s(err: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    err.dot(&(s * err))
}

/// Log-log least-squares slope over the last octave of the grid.
pub fn plateau_slope(k_grid: &[usize], curve: &[f64]) -> f64 {
    let kmax = *k_grid.iter().max().unwrap_or(&1) as f64;
    let pts: Vec<(f64, f64)> = k_grid
        .iter()
        .zip(curve)
        .filter(|(&k, &c)| k as f64 >= kmax / 2.0 && c > 0.0)
        .map(|(&k, &c)| ((k as f64).ln(), c.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

struct SeedRun {
    values: Vec<f64>,
    prop2: Vec<bool>,
}

fn bat_selection(
    task: &RhoTask,
    spec: &ModelSpec,
    adaptation: &[LabeledExample],
    pool: &[LabeledExample],
    quota: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let ls = task.loss_spec();
    let (train, validation) = split_validation(adaptation, 0.2)?;
    let surrogate = fit_convex(spec, &train, &ls, None)?;
    let ctx = ScoringContext::build(
        spec,
        &surrogate,
        &train,
        &validation,
        &ls,
        ScoreMode::Exact,
        &DampingPolicy::default(),
        1,
        seed,
    )?;
    let scores: Vec<ScoreInput> = ctx
        .score_pool(spec, &surrogate, pool, &ls, 1, seed)
        .into_iter()
        .zip(pool)
        .map(|(z, c)| ScoreInput::new(&c.id, z.unwrap_or(f64::NAN)))
        .collect();
    let threshold = choose_eta(&scores, quota);
    Ok(select(&scores, &threshold)
        .iter()
        .zip(pool)
        .filter(|(r, _)| r.selected)
        .map(|(_, c)| c.clone())
        .collect())
}

fn run_seed(task: &RhoTask, method: RhoMethod, k_grid: &[usize], seed: u64, s: &DMatrix<f64>, theta: &[f64]) -> Result<SeedRun> {
    let spec = task.spec();
    let ls = task.loss_spec();
    let kmax = *k_grid.iter().max().unwrap_or(&0);
    let star = DVector::from_column_slice(theta);
    let theta_params = ModelParameters::from_flat(&spec, theta)?;
    let n_of = |k: usize| round_half_up(task.gamma * k as f64).clamp(2, k);
    let adaptation = match method {
        RhoMethod::Plain => task.draw_adaptation(theta, seed, kmax),
        RhoMethod::Bat => task.draw_adaptation(theta, seed, n_of(kmax)),
    };
    let pool = match method {
        RhoMethod::Plain => Vec::new(),
        RhoMethod::Bat => task.draw_pool(theta, seed, task.pool_factor * (kmax - n_of(kmax)).max(1)),
    };
    let mut values = Vec::with_capacity(k_grid.len());
    let mut prop2 = Vec::new();
    for &k in k_grid {
        let set = match method {
            RhoMethod::Plain => adaptation[..k].to_vec(),
            RhoMethod::Bat => {
                let n = n_of(k);
                let m = k - n;
                let a = &adaptation[..n];
                let p = &pool[..(task.pool_factor * m).clamp(1, pool.len())];
                let chosen = if m == 0 {
                    Vec::new()
                } else {
                    bat_selection(task, &spec, a, p, m, derive_seed(seed, "rho-score"))?
                };
                prop2.push(check_prop2(&spec, a, &chosen, &theta_params, task.gamma, &ls, 0.0)?.holds);
                a.iter().chain(&chosen).cloned().collect()
            }
        };
        let fit = fit_convex(&spec, &set, &ls, None)?;
        let err = DVector::from_vec(fit.flatten()) - &star;
        values.push(set.len() as f64 * sq_norm_s(&err, s));
    }
    Ok(SeedRun { values, prop2 })
}

/// Averages `k ‖θ̂_k − θ*‖²_S` over `seeds` for every `k` in the grid.
pub fn estimate_rho(task: &RhoTask, method: RhoMethod, k_grid: &[usize], seeds: &[u64], s_matrix: SMatrix) -> Result<RhoEstimate> {
    task.validate()?;
    if k_grid.is_empty() || seeds.is_empty() {
        return Err(Error::config("rho estimation needs a nonempty k grid and seed list"));
    }
    let min_k = task.dim + 2;
    if let Some(k) = k_grid.iter().find(|&&k| k < min_k) {
        return Err(Error::config(format!("k = {k} is below the identifiable minimum {min_k}")));
    }
    let s = task.s_matrix(s_matrix)?;
    let theta = task.theta_star();
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&seed| run_seed(task, method, k_grid, seed, &s, &theta))
        .collect::<Result<_>>()?;
    let ns = runs.len() as f64;
    let mut curve = Vec::with_capacity(k_grid.len());
    let mut stderr = Vec::with_capacity(k_grid.len());
    for j in 0..k_grid.len() {
        let mean = runs.iter().map(|r| r.values[j]).sum::<f64>() / ns;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r.values[j] - mean).powi(2)).sum::<f64>() / (ns - 1.0)
        } else {
            0.0
        };
        curve.push(mean);
        stderr.push((var / ns).sqrt());
    }
    let kmax_idx = (0..k_grid.len()).max_by_key(|&i| k_grid[i]).unwrap_or(0);
    let prop2_holds_fraction = match method {
        RhoMethod::Plain => None,
        RhoMethod::Bat => {
            let all: Vec<bool> = runs.iter().flat_map(|r| r.prop2.iter().copied()).collect();
            Some(all.iter().filter(|&&h| h).count() as f64 / all.len().max(1) as f64)
        }
    };
    Ok(RhoEstimate {
        method,
        s_matrix,
        k_grid: k_grid.to_vec(),
        rho_hat: curve[kmax_idx],
        plateau_slope: plateau_slope(k_grid, &curve),
        curve,
        curve_stderr: stderr,
        seeds: seeds.len(),
        prop2_holds_fraction,
    })
}

/// Geometric grid from `lo` to `hi` with `per_octave` points per doubling.
pub fn geometric_grid(lo: usize, hi: usize, per_octave: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let steps = ((hi as f64 / lo as f64).log2() * per_octave as f64).round() as i64;
    for i in 0..=steps.max(0) {
        let k = (lo as f64 * 2f64.powf(i as f64 / per_octave as f64)).round() as usize;
        if out.last() != Some(&k) {
            out.push(k);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RhoTask {
        RhoTask {
            dim: 4,
            ..RhoTask::default()
        }
    }

    #[test]
    fn non_convex_rejected() {
        let t = RhoTask {
            kind: RhoKind::Mlp { hidden: 3 },
            ..small()
        };
        assert!(matches!(
            estimate_rho(&t, RhoMethod::Plain, &[32], &[1], SMatrix::Identity),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_endpoints() {
        let g = geometric_grid(256, 4096, 2);
        assert_eq!(g.first(), Some(&256));
        assert_eq!(g.last(), Some(&4096));
        assert_eq!(g.len(), 9);
    }

    #[test]
    fn slope_of_power_law() {
        let k = [100, 141, 200];
        let c: Vec<f64> = k.iter().map(|&k| (k as f64).powf(-0.5)).collect();
        assert!((plateau_slope(&k, &c) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn streams_are_prefix_stable() {
        let t = small();
        let th = t.theta_star();
        let a = t.draw_adaptation(&th, 5, 40);
        let b = t.draw_adaptation(&th, 5, 20);
        assert_eq!(&a[..20], &b[..]);
    }

    #[test]
    fn curves_are_nonnegative_and_deterministic() {
        let t = small();
        let grid = [32, 64];
        let a = estimate_rho(&t, RhoMethod::Bat, &grid, &[1, 2], SMatrix::RiskHessian).unwrap();
        let b = estimate_rho(&t, RhoMethod::Bat, &grid, &[1, 2], SMatrix::RiskHessian).unwrap();
        assert_eq!(a, b);
        assert!(a.curve.iter().all(|v| *v >= 0.0));
        assert!(a.prop2_holds_fraction.is_some());
    }
}
