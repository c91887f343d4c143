//! Subset loss estimation from the gradient cache.
//!
//! For a subset `S` the linearized training objective in projected
//! coordinates `x` is
//!
//! ```text
//! L(x) = 1/n_S * sum_{s in D_S} log(1 + exp(b_s - y_s g_s . x)) + lambda/2 |x|^2
//! ```
//!
//! which is convex. Its minimizer is lifted back to `theta_star + P x` and
//! scored on the target validation set with a true forward pass.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linearize::GradientCache;
use crate::model::{sigmoid, softplus, ModelConfig, ParamVector, Sample};
use crate::project::Projector;
use crate::trainer::eval_loss;
use crate::{GradexError, Result, TaskId, TaskSet, TARGET_TASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    DampedNewton,
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub ridge_lambda: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub method: SolveMethod,
    /// Add the target training samples to every subset's data.
    pub include_target: bool,
    /// When nonempty, [`Estimator::estimate`] walks these ridge strengths
    /// from strongest to weakest (warm-started, `x = 0` included) and keeps
    /// the point with the lowest target validation loss, mirroring early
    /// stopping in the fine-tuning oracle. `ridge_lambda` is then unused.
    #[serde(default)]
    pub ridge_path: Vec<f64>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            ridge_lambda: 1e-4,
            max_iters: 100,
            grad_tol: 1e-8,
            method: SolveMethod::DampedNewton,
            include_target: true,
            ridge_path: default_ridge_path(),
        }
    }
}

/// Half-decade grid from `10` down to `1e-5`.
pub fn default_ridge_path() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(1.0 - 0.5 * i as f64)).collect()
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(GradexError::InvalidConfig("grad_tol must be positive".into()));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(GradexError::InvalidConfig("ridge_lambda must be non-negative".into()));
        }
        if self.ridge_path.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(GradexError::InvalidConfig("ridge_path entries must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rows of one subset's regression: `a_s = y_s g_s` and `b_s`.
#[derive(Debug, Clone)]
pub struct SubsetData {
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// Cache entries read while gathering.
    pub consulted: usize,
    /// Task ids whose entries were read.
    pub tasks_read: BTreeSet<TaskId>,
}

impl SubsetData {
    pub fn gather(cache: &GradientCache, subset: &TaskSet, include_target: bool) -> Result<SubsetData> {
        if let Some(&bad) = subset.iter().find(|&&t| t == TARGET_TASK || !cache.has_task(t)) {
            return Err(GradexError::UnknownTask(bad));
        }
        let mut tasks: Vec<TaskId> = subset.iter().copied().collect();
        if include_target && cache.has_task(TARGET_TASK) {
            tasks.insert(0, TARGET_TASK);
        }
        let indices: Vec<usize> = tasks.iter().flat_map(|&t| cache.task_indices(t).iter().copied()).collect();
        if indices.is_empty() {
            return Err(GradexError::EmptyData("subset samples"));
        }
        let d = cache.d();
        let entries = cache.entries();
        let a = DMatrix::from_fn(indices.len(), d, |r, c| {
            let e = &entries[indices[r]];
            e.y_sign as f64 * e.g_proj[c]
        });
        let b = DVector::from_iterator(indices.len(), indices.iter().map(|&i| entries[i].b));
        Ok(SubsetData {
            a,
            b,
            consulted: indices.len(),
            tasks_read: indices.iter().map(|&i| entries[i].task_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * x
    }

    fn value_at(&self, x: &DVector<f64>, lambda: f64) -> f64 {
        let u = self.residuals(x);
        u.iter().map(|&v| softplus(v)).sum::<f64>() / self.len() as f64 + 0.5 * lambda * x.norm_squared()
    }

    fn value_and_gradient(&self, x: &DVector<f64>, lambda: f64) -> (f64, DVector<f64>) {
        let u = self.residuals(x);
        let n = self.len() as f64;
        let value = u.iter().map(|&v| softplus(v)).sum::<f64>() / n + 0.5 * lambda * x.norm_squared();
        let weights = u.map(|v| -sigmoid(v) / n);
        let grad = self.a.tr_mul(&weights) + x * lambda;
        (value, grad)
    }

    fn hessian(&self, x: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
        let u = self.residuals(x);
        let n = self.len() as f64;
        let root_w = u.map(|v| {
            let s = sigmoid(v);
            (s * (1.0 - s) / n).sqrt()
        });
        let mut scaled = self.a.clone();
        for mut col in scaled.column_iter_mut() {
            col.component_mul_assign(&root_w);
        }
        let mut h = scaled.tr_mul(&scaled);
        for i in 0..h.nrows() {
            h[(i, i)] += lambda;
        }
        h
    }

    /// `L(x)` and its gradient.
    pub fn objective(&self, x: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
        crate::model::check_len("projected coordinates", self.d(), x.len())?;
        let (v, g) = self.value_and_gradient(&DVector::from_column_slice(x), lambda);
        Ok((v, g.iter().copied().collect()))
    }
}

/// Value and gradient of the ridge-regularized linearized objective of `subset`.
pub fn subset_objective(
    cache: &GradientCache,
    subset: &TaskSet,
    x: &[f64],
    lambda: f64,
    include_target: bool,
) -> Result<(f64, Vec<f64>)> {
    SubsetData::gather(cache, subset, include_target)?.objective(x, lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iters: usize,
    /// `false` when `max_iters` ran out (or the line search stalled) before
    /// the gradient norm reached `grad_tol`.
    pub converged: bool,
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;
const LBFGS_MEMORY: usize = 10;
/// Consecutive non-improving ridge strengths tolerated along a path.
const PATH_PATIENCE: usize = 2;

/// Backtracking line search; `None` when no step satisfies Armijo.
fn armijo(data: &SubsetData, lambda: f64, x: &DVector<f64>, f: f64, g: &DVector<f64>, dir: &DVector<f64>, mut t: f64) -> Option<(DVector<f64>, f64)> {
    let slope = g.dot(dir);
    if slope >= 0.0 {
        return None;
    }
    while t >= MIN_STEP {
        let cand = x + dir * t;
        let fc = data.value_at(&cand, lambda);
        if fc <= f + ARMIJO_C * t * slope {
            return Some((cand, fc));
        }
        t *= 0.5;
    }
    None
}

fn solve_from(data: &SubsetData, cfg: &SolveConfig, x0: DVector<f64>) -> SolveOutcome {
    let lambda = cfg.ridge_lambda;
    let mut x = x0;
    let (mut f, mut g) = data.value_and_gradient(&x, lambda);
    let mut iters = 0;
    let mut history: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    while g.norm() > cfg.grad_tol && iters < cfg.max_iters {
        iters += 1;
        let (dir, t0) = match cfg.method {
            SolveMethod::DampedNewton => {
                let h = data.hessian(&x, lambda);
                let dir = match h.cholesky() {
                    Some(c) => -c.solve(&g),
                    None => -g.clone(),
                };
                (dir, 1.0)
            }
            SolveMethod::Lbfgs => {
                let mut q = g.clone();
                let mut alphas = Vec::with_capacity(history.len());
                for (s, y) in history.iter().rev() {
                    let rho = 1.0 / y.dot(s);
                    let alpha = rho * s.dot(&q);
                    q -= y * alpha;
                    alphas.push((rho, alpha));
                }
                let gamma = history
                    .last()
                    .map(|(s, y)| s.dot(y) / y.dot(y))
                    .unwrap_or(1.0 / g.norm().max(1.0));
                let mut r = q * gamma;
                for ((s, y), (rho, alpha)) in history.iter().zip(alphas.iter().rev()) {
                    let beta = rho * y.dot(&r);
                    r += s * (alpha - beta);
                }
                (-r, 1.0)
            }
        };
        let step = armijo(data, lambda, &x, f, &g, &dir, t0).or_else(|| {
            // Fall back to steepest descent when the model direction fails.
            history.clear();
            let sd = -g.clone();
            armijo(data, lambda, &x, f, &g, &sd, 1.0)
        });
        let Some((x_new, _)) = step else {
            break;
        };
        let (f_new, g_new) = data.value_and_gradient(&x_new, lambda);
        if cfg.method == SolveMethod::Lbfgs {
            let s = &x_new - &x;
            let y = &g_new - &g;
            if s.dot(&y) > 1e-16 {
                if history.len() == LBFGS_MEMORY {
                    history.remove(0);
                }
                history.push((s, y));
            }
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    let grad_norm = g.norm();
    SolveOutcome {
        x: x.iter().copied().collect(),
        value: f,
        grad_norm,
        iters,
        converged: grad_norm <= cfg.grad_tol,
    }
}

/// Minimizes the subset objective starting from `x = 0`.
pub fn solve_subset(data: &SubsetData, cfg: &SolveConfig) -> Result<SolveOutcome> {
    cfg.validate()?;
    Ok(solve_from(data, cfg, DVector::zeros(data.d())))
}

/// Minimizes the subset objective from an arbitrary start point.
pub fn solve_subset_from(data: &SubsetData, cfg: &SolveConfig, x0: &[f64]) -> Result<SolveOutcome> {
    cfg.validate()?;
    crate::model::check_len("projected coordinates", data.d(), x0.len())?;
    Ok(solve_from(data, cfg, DVector::from_column_slice(x0)))
}

/// `f_hat`: target validation loss of `theta_star + P x` under a true forward pass.
pub fn estimate_f(
    model: &ModelConfig,
    theta_star: &ParamVector,
    projector: &Projector,
    x_hat: &[f64],
    target_val: &[Sample],
) -> Result<f64> {
    crate::model::check_len("projector rows", theta_star.len(), projector.p())?;
    let theta_hat = theta_star.add_scaled(1.0, &projector.lift(x_hat)?)?;
    eval_loss(model, &theta_hat, target_val)
}

/// Linearized target validation loss: mean `log(1 + exp(b - y g . x))` over
/// the cached target validation entries.
pub fn estimate_f_linearized(cache: &GradientCache, x_hat: &[f64]) -> Result<f64> {
    let val = cache.val_entries();
    if val.is_empty() {
        return Err(GradexError::EmptyData("cached target validation entries"));
    }
    crate::model::check_len("projected coordinates", cache.d(), x_hat.len())?;
    let total: f64 = val
        .iter()
        .map(|e| softplus(e.b - e.y_sign as f64 * crate::model::dot(&e.g_proj, x_hat)))
        .sum();
    Ok(total / val.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub subset: TaskSet,
    pub x_hat_d: Vec<f64>,
    pub f_hat: f64,
    pub solver_iters: usize,
    pub solve_seconds: f64,
    pub converged: bool,
    pub grad_norm: f64,
    pub samples_used: usize,
    /// Ridge strength of the returned point; infinite when `x = 0` won.
    pub ridge_lambda: f64,
    /// Forward passes over the target validation set spent on scoring.
    pub val_evaluations: usize,
}

/// Everything needed to score subsets without fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct Estimator<'a> {
    model: &'a ModelConfig,
    theta_star: &'a ParamVector,
    projector: &'a Projector,
    cache: &'a GradientCache,
    target_val: &'a [Sample],
    cfg: &'a SolveConfig,
}

impl<'a> Estimator<'a> {
    pub fn new(
        model: &'a ModelConfig,
        theta_star: &'a ParamVector,
        projector: &'a Projector,
        cache: &'a GradientCache,
        target_val: &'a [Sample],
        cfg: &'a SolveConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if theta_star.digest() != cache.theta_star_digest() {
            return Err(GradexError::DigestMismatch(
                "gradient cache was built from different parameters".into(),
            ));
        }
        if projector.id() != cache.projector_id() {
            return Err(GradexError::DigestMismatch(
                "projector does not match the one used to build the cache".into(),
            ));
        }
        crate::model::check_len("parameter vector", model.param_count(), theta_star.len())?;
        if target_val.is_empty() {
            return Err(GradexError::EmptyData("target validation set"));
        }
        Ok(Estimator {
            model,
            theta_star,
            projector,
            cache,
            target_val,
            cfg,
        })
    }

    pub fn cache(&self) -> &GradientCache {
        self.cache
    }

    pub fn target_val_len(&self) -> usize {
        self.target_val.len()
    }

    pub fn with_cache(&self, cache: &'a GradientCache) -> Estimator<'a> {
        Estimator { cache, ..*self }
    }

    pub fn gather(&self, subset: &TaskSet) -> Result<SubsetData> {
        SubsetData::gather(self.cache, subset, self.cfg.include_target)
    }

    pub fn estimate(&self, subset: &TaskSet) -> Result<EstimateResult> {
        let start = Instant::now();
        let data = self.gather(subset)?;
        let score = |x: &[f64]| estimate_f(self.model, self.theta_star, self.projector, x, self.target_val);
        if self.cfg.ridge_path.is_empty() {
            let sol = solve_subset(&data, self.cfg)?;
            let f_hat = score(&sol.x)?;
            return Ok(EstimateResult {
                subset: subset.clone(),
                x_hat_d: sol.x,
                f_hat,
                solver_iters: sol.iters,
                solve_seconds: start.elapsed().as_secs_f64(),
                converged: sol.converged,
                grad_norm: sol.grad_norm,
                samples_used: data.consulted,
                ridge_lambda: self.cfg.ridge_lambda,
                val_evaluations: 1,
            });
        }
        let mut path = self.cfg.ridge_path.clone();
        path.sort_by(|a, b| b.total_cmp(a));
        let zero = vec![0.0; data.d()];
        let mut best = EstimateResult {
            subset: subset.clone(),
            f_hat: score(&zero)?,
            x_hat_d: zero,
            solver_iters: 0,
            solve_seconds: 0.0,
            converged: true,
            grad_norm: 0.0,
            samples_used: data.consulted,
            ridge_lambda: f64::INFINITY,
            val_evaluations: 1,
        };
        let mut x = DVector::zeros(data.d());
        let mut iters = 0;
        let mut stale = 0;
        for lambda in path {
            let cfg = SolveConfig {
                ridge_lambda: lambda,
                ..self.cfg.clone()
            };
            let sol = solve_from(&data, &cfg, x);
            iters += sol.iters;
            let f = score(&sol.x)?;
            best.val_evaluations += 1;
            x = DVector::from_column_slice(&sol.x);
            if f < best.f_hat {
                best.f_hat = f;
                best.x_hat_d = sol.x;
                best.converged = sol.converged;
                best.grad_norm = sol.grad_norm;
                best.ridge_lambda = lambda;
                stale = 0;
            } else {
                stale += 1;
                if stale >= PATH_PATIENCE {
                    break;
                }
            }
        }
        best.solver_iters = iters;
        best.solve_seconds = start.elapsed().as_secs_f64();
        Ok(best)
    }

    /// Independent solves over a read-only cache.
    pub fn estimate_many(&self, subsets: &[TaskSet]) -> Result<Vec<EstimateResult>> {
        subsets.par_iter().map(|s| self.estimate(s)).collect()
    }
}

pub fn format_subset(subset: &TaskSet) -> String {
    subset.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";")
}

pub const ESTIMATE_CSV_HEADER: &str = "subset,f_hat,solver_iters,seconds,flags";

/// CSV ledger rows: sorted ids joined by `;`, `f_hat`, iterations, seconds, flags.
pub fn write_estimates_csv(mut w: impl Write, results: &[EstimateResult], header: bool) -> Result<()> {
    if header {
        writeln!(w, "{ESTIMATE_CSV_HEADER}")?;
    }
    for r in results {
        let flags = if r.converged { "ok" } else { "max_iters" };
        writeln!(
            w,
            "{},{},{},{:.6},{}",
            format_subset(&r.subset),
            r.f_hat,
            r.solver_iters,
            r.solve_seconds,
            flags
        )?;
    }
    Ok(())
}
