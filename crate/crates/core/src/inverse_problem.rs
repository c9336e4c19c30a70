//! Measurement-consistent sampling for linear inverse problems, plus the
//! exact Bayesian posterior used as its oracle.
//!
//! Given `y = A x + n` with Gaussian noise and a mixture prior, each step
//! first forms the guided denoised estimate like a plain sampler step, then
//! pulls it toward data consistency before renoising:
//!
//! ```text
//! loss      l(xhat) = || A xhat - y ||^2
//! dps:      grad = J^T 2 A^T (A xhat - y)     J = d(xhat)/d(x_t)
//! dds:      grad = 2 A^T (A xhat - y)         (gradient taken at xhat)
//! update    x_prev = sqrt(a_prev) (xhat - gamma grad) + sqrt(1 - a_prev) eps_ren
//! ```
//!
//! `dps` differentiates the loss through the posterior-mean map using the
//! closed-form mixture Jacobian (a symmetric matrix, so transposition is
//! free); `dds` takes the gradient at the denoised point directly. The
//! denoised estimate, renoising prediction, and Jacobian combination all
//! follow the active guidance mode exactly as in the plain solver step.
//!
//! Because the prior is a Gaussian mixture and the likelihood is linear
//! Gaussian, the true posterior is available in closed form: per component,
//!
//! ```text
//! Sigma_post   = (I / s^2 + A^T A / sy^2)^{-1}
//! mu_k_post    = Sigma_post (mu_k / s^2 + A^T y / sy^2)
//! weight_k  ∝  w_k N(y; A mu_k, s^2 A A^T + sy^2 I)
//! ```
//!
//! which the reconstruction tests compare against.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::guidance::{EvalPoint, GuidanceMode, StepScale};
use crate::rng::{slot, RunKey};
use crate::schedule::{GridDirection, NoiseSchedule, TimestepGrid};
use crate::score::{Condition, GaussianMixture};
use crate::solver::StepRecord;
use crate::vecn;

/// A linear measurement operator on model states.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearOperator {
    /// Full observation: `A = I`.
    Identity,
    /// Keeps the coordinates flagged `true`, in order.
    Mask(Vec<bool>),
    /// Dense `m x d` matrix with full row rank, `m <= d`.
    Matrix(Vec<Vec<f64>>),
}

impl LinearOperator {
    /// Builds a mask operator; at least one coordinate must be observed.
    pub fn mask(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|b| *b) {
            return Err(Error::Parameter(
                "mask operator must observe at least one coordinate".into(),
            ));
        }
        Ok(LinearOperator::Mask(bits))
    }

    /// Builds a dense operator, checking shape and full row rank.
    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Parameter("matrix operator has no rows".into()));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Parameter(
                "matrix operator rows must be nonempty and equally long".into(),
            ));
        }
        if rows.len() > d {
            return Err(Error::Parameter(format!(
                "matrix operator must have at most as many rows as columns, got {}x{d}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("matrix operator row {i} is not finite")));
            }
        }
        let m = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied());
        let rank = m.clone().svd(false, false).rank(1e-10 * matrix_scale(&m));
        if rank < rows.len() {
            return Err(Error::Parameter(format!(
                "matrix operator has rank {rank} < {} rows (rows must be independent)",
                rows.len()
            )));
        }
        Ok(LinearOperator::Matrix(rows))
    }

    /// Checks compatibility with a state dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            LinearOperator::Identity => Ok(()),
            LinearOperator::Mask(bits) => {
                if bits.len() != dim {
                    return Err(Error::Parameter(format!(
                        "mask has {} entries but states have dimension {dim}",
                        bits.len()
                    )));
                }
                Ok(())
            }
            LinearOperator::Matrix(rows) => {
                if rows[0].len() != dim {
                    return Err(Error::Parameter(format!(
                        "matrix operator has {} columns but states have dimension {dim}",
                        rows[0].len()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Output dimension for a given input dimension.
    pub fn out_dim(&self, dim: usize) -> usize {
        match self {
            LinearOperator::Identity => dim,
            LinearOperator::Mask(bits) => bits.iter().filter(|b| **b).count(),
            LinearOperator::Matrix(rows) => rows.len(),
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            LinearOperator::Identity => x.to_vec(),
            LinearOperator::Mask(bits) => x
                .iter()
                .zip(bits)
                .filter_map(|(v, keep)| keep.then_some(*v))
                .collect(),
            LinearOperator::Matrix(rows) => rows.iter().map(|r| vecn::dot(r, x)).collect(),
        }
    }

    /// `A^T y` scattered back into state space.
    pub fn apply_transpose(&self, y: &[f64], dim: usize) -> Vec<f64> {
        match self {
            LinearOperator::Identity => y.to_vec(),
            LinearOperator::Mask(bits) => {
                let mut out = vec![0.0; dim];
                let mut it = y.iter();
                for (o, keep) in out.iter_mut().zip(bits) {
                    if *keep {
                        *o = *it.next().expect("measurement length was validated");
                    }
                }
                out
            }
            LinearOperator::Matrix(rows) => {
                let mut out = vec![0.0; dim];
                for (row, yi) in rows.iter().zip(y) {
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * yi;
                    }
                }
                out
            }
        }
    }

    /// Dense form, for the posterior oracle.
    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        match self {
            LinearOperator::Identity => DMatrix::identity(dim, dim),
            LinearOperator::Mask(bits) => {
                let m = self.out_dim(dim);
                let mut a = DMatrix::zeros(m, dim);
                let mut row = 0;
                for (j, keep) in bits.iter().enumerate() {
                    if *keep {
                        a[(row, j)] = 1.0;
                        row += 1;
                    }
                }
                a
            }
            LinearOperator::Matrix(rows) => {
                DMatrix::from_row_iterator(rows.len(), dim, rows.iter().flatten().copied())
            }
        }
    }
}

fn matrix_scale(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()))
}

impl std::str::FromStr for LinearOperator {
    type Err = Error;

    /// `identity` or `mask:1,0,...` (1/true = observed).
    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(LinearOperator::Identity);
        }
        if let Some(spec) = s.strip_prefix("mask:") {
            let bits = spec
                .split(',')
                .map(|tok| match tok.trim() {
                    "1" | "true" => Ok(true),
                    "0" | "false" => Ok(false),
                    other => Err(Error::Config(format!(
                        "mask entries must be 0/1/true/false, got {other:?}"
                    ))),
                })
                .collect::<Result<Vec<bool>>>()?;
            return LinearOperator::mask(bits);
        }
        Err(Error::Config(format!(
            "unknown operator {s:?} (expected \"identity\" or \"mask:bits\")"
        )))
    }
}

impl std::fmt::Display for LinearOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LinearOperator::Identity => write!(f, "identity"),
            LinearOperator::Mask(bits) => {
                write!(f, "mask:")?;
                for (i, b) in bits.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{}", if *b { 1 } else { 0 })?;
                }
                Ok(())
            }
            LinearOperator::Matrix(rows) => write!(f, "matrix[{}x{}]", rows.len(), rows[0].len()),
        }
    }
}

/// A measurement `y = A x + n`.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub y: Vec<f64>,
    pub noise_std: f64,
    pub operator: LinearOperator,
}

impl Measurement {
    pub fn new(y: Vec<f64>, noise_std: f64, operator: LinearOperator, dim: usize) -> Result<Self> {
        operator.validate(dim)?;
        vecn::check_finite(&y, "measurement")?;
        if y.len() != operator.out_dim(dim) {
            return Err(Error::Parameter(format!(
                "measurement has {} entries but the operator outputs {}",
                y.len(),
                operator.out_dim(dim)
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::Parameter(format!(
                "measurement noise std must be finite and nonnegative, got {noise_std}"
            )));
        }
        Ok(Measurement {
            y,
            noise_std,
            operator,
        })
    }

    /// Synthesizes a measurement from a known state, drawing noise from the
    /// given stream when `noise_std > 0`.
    pub fn synthesize(
        x_true: &[f64],
        noise_std: f64,
        operator: LinearOperator,
        key: RunKey,
    ) -> Result<Self> {
        operator.validate(x_true.len())?;
        let mut y = operator.apply(x_true);
        if noise_std > 0.0 {
            let noise = key.stream(slot::MEASUREMENT).normal_vec(y.len());
            for (yi, n) in y.iter_mut().zip(&noise) {
                *yi += noise_std * n;
            }
        }
        Measurement::new(y, noise_std, operator, x_true.len())
    }
}

/// Where the data-consistency gradient is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyMode {
    /// Through the posterior-mean map (needs the Jacobian).
    Dps,
    /// At the denoised point directly.
    Dds,
}

impl std::str::FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dps" => Ok(ConsistencyMode::Dps),
            "dds" => Ok(ConsistencyMode::Dds),
            other => Err(Error::Config(format!(
                "unknown consistency mode {other:?} (expected \"dps\" or \"dds\")"
            ))),
        }
    }
}

impl std::fmt::Display for ConsistencyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConsistencyMode::Dps => write!(f, "dps"),
            ConsistencyMode::Dds => write!(f, "dds"),
        }
    }
}

/// Step-size rule for the data-consistency pull.
#[derive(Clone, Debug, PartialEq)]
pub enum GammaSpec {
    Constant(f64),
    /// `gamma_t = gamma0 * (1 - alpha_bar_t)`: weak pull near the data end.
    AlphaRamp(f64),
    /// One value per grid interval.
    PerStep(Vec<f64>),
}

impl GammaSpec {
    pub fn validate(&self, nfe: usize) -> Result<()> {
        let check = |g: f64| -> Result<()> {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Parameter(format!(
                    "step size must be finite and nonnegative, got {g}"
                )));
            }
            Ok(())
        };
        match self {
            GammaSpec::Constant(g) | GammaSpec::AlphaRamp(g) => check(*g),
            GammaSpec::PerStep(gs) => {
                if gs.len() != nfe {
                    return Err(Error::Parameter(format!(
                        "per-step sizes have {} entries for {nfe} intervals",
                        gs.len()
                    )));
                }
                gs.iter().try_for_each(|g| check(*g))
            }
        }
    }

    pub fn value(&self, schedule: &NoiseSchedule, t: usize, step: usize) -> Result<f64> {
        match self {
            GammaSpec::Constant(g) => Ok(*g),
            GammaSpec::AlphaRamp(g) => Ok(g * (1.0 - schedule.alpha_bar(t)?)),
            GammaSpec::PerStep(gs) => gs.get(step).copied().ok_or_else(|| {
                Error::Index(format!("step {step} outside the per-step size table"))
            }),
        }
    }
}

/// Full parameter set for one measurement-consistent run.
#[derive(Clone, Debug)]
pub struct InverseParams {
    pub gamma: GammaSpec,
    pub mode: ConsistencyMode,
    pub guidance: GuidanceMode,
}

/// The data-consistency gradient at an evaluated point: `2 A^T (A xhat - y)`
/// pulled back through the posterior-mean Jacobian for `dps`, taken directly
/// for `dds`.
pub fn consistency_gradient(
    model: &GaussianMixture,
    point: &EvalPoint,
    measurement: &Measurement,
    mode: ConsistencyMode,
    condition: &Condition,
) -> Result<Vec<f64>> {
    let dim = point.x.len();
    let xhat = point.xhat_anchor();
    let r = vecn::sub(&measurement.operator.apply(xhat), &measurement.y);
    let grad_data = vecn::scale(&measurement.operator.apply_transpose(&r, dim), 2.0);
    match mode {
        ConsistencyMode::Dds => Ok(grad_data),
        ConsistencyMode::Dps => {
            // The guided estimate interpolates the two posterior means, so
            // its Jacobian interpolates the two (symmetric) Jacobians.
            let jvp_null =
                model.posterior_mean_jvp_at(point.alpha_bar, &point.x, &Condition::Null, &grad_data)?;
            match point.scale.value() {
                0.0 => Ok(jvp_null),
                s => {
                    let jvp_cond =
                        model.posterior_mean_jvp_at(point.alpha_bar, &point.x, condition, &grad_data)?;
                    Ok(jvp_null
                        .iter()
                        .zip(&jvp_cond)
                        .map(|(n, c)| (1.0 - s) * n + s * c)
                        .collect())
                }
            }
        }
    }
}

/// One measurement-consistent step from `t` to `t_prev`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_step(
    model: &GaussianMixture,
    point: &EvalPoint,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    measurement: &Measurement,
    params: &InverseParams,
    gamma: f64,
    condition: &Condition,
) -> Result<Vec<f64>> {
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "consistency step must not increase time ({t} -> {t_prev})"
        )));
    }
    let a = schedule.alpha_bar(t)?;
    if point.alpha_bar != a {
        return Err(Error::Parameter(format!(
            "evaluation point was built at signal level {} but time {t} has {a}",
            point.alpha_bar
        )));
    }
    let grad = consistency_gradient(model, point, measurement, params.mode, condition)?;
    let a_prev = schedule.alpha_bar(t_prev)?;
    let root_a = a_prev.sqrt();
    let root_1ma = (1.0 - a_prev).sqrt();
    Ok(point
        .xhat_anchor()
        .iter()
        .zip(grad.iter().zip(point.eps_renoise()))
        .map(|(xh, (g, er))| root_a * (xh - gamma * g) + root_1ma * er)
        .collect())
}

/// Report for one measurement-consistent run.
#[derive(Clone, Debug)]
pub struct InverseReport {
    pub final_state: Vec<f64>,
    /// `|| y - A x_0 ||` at the end of the run.
    pub final_residual: f64,
    /// `|| x_0 - x_true ||` when ground truth is known.
    pub truth_error: Option<f64>,
    /// `|| y - A xhat ||` at every step.
    pub per_step_residuals: Vec<f64>,
}

/// Records plus report for one run.
#[derive(Clone, Debug)]
pub struct InverseSolveResult {
    pub records: Vec<StepRecord>,
    pub report: InverseReport,
}

/// Full measurement-consistent sampling loop over a descending grid.
#[allow(clippy::too_many_arguments)]
pub fn solve_inverse(
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    measurement: &Measurement,
    params: &InverseParams,
    condition: &Condition,
    key: RunKey,
    x_true: Option<&[f64]>,
) -> Result<InverseSolveResult> {
    if grid.direction() != GridDirection::Sampling {
        return Err(Error::Parameter(
            "measurement-consistent sampling requires a sampling grid".into(),
        ));
    }
    params.guidance.validate()?;
    params.gamma.validate(grid.nfe())?;
    model.active_mask(condition)?;
    let dim = model.dim();
    measurement.operator.validate(dim)?;
    if measurement.y.len() != measurement.operator.out_dim(dim) {
        return Err(Error::Parameter(
            "measurement length does not match the operator output".into(),
        ));
    }

    let nfe = grid.nfe();
    let mut x = key.stream(slot::INIT).normal_vec(dim);
    let mut records = Vec::with_capacity(nfe + 1);
    let mut residuals = Vec::with_capacity(nfe);
    let mut last_scale = StepScale::Uncond;

    for (i, (t, t_prev)) in grid.pairs().enumerate() {
        let a = schedule.alpha_bar(t)?;
        let eps_null = model.eps_at(a, &x, &Condition::Null)?;
        let eps_cond = if *condition == Condition::Null {
            eps_null.clone()
        } else {
            model.eps_at(a, &x, condition)?
        };
        let scale = params.guidance.step_scale(i, nfe)?;
        last_scale = scale;
        let point = EvalPoint::from_eps(&x, a, eps_null, eps_cond, scale)?;
        residuals.push(vecn::dist(
            &measurement.operator.apply(point.xhat_anchor()),
            &measurement.y,
        ));
        records.push(step_record(&point, i, t));
        let gamma = params.gamma.value(schedule, t, i)?;
        x = consistency_step(
            model,
            &point,
            schedule,
            t,
            t_prev,
            measurement,
            params,
            gamma,
            condition,
        )?;
    }

    let t_final = *grid.indices().last().unwrap();
    let a_final = schedule.alpha_bar(t_final)?;
    let eps_null = model.eps_at(a_final, &x, &Condition::Null)?;
    let eps_cond = if *condition == Condition::Null {
        eps_null.clone()
    } else {
        model.eps_at(a_final, &x, condition)?
    };
    let point = EvalPoint::from_eps(&x, a_final, eps_null, eps_cond, last_scale)?;
    records.push(step_record(&point, nfe, t_final));

    let final_residual = vecn::dist(&measurement.operator.apply(&x), &measurement.y);
    let truth_error = x_true.map(|xt| vecn::dist(&x, xt));
    Ok(InverseSolveResult {
        report: InverseReport {
            final_state: x,
            final_residual,
            truth_error,
            per_step_residuals: residuals,
        },
        records,
    })
}

fn step_record(point: &EvalPoint, step: usize, t: usize) -> StepRecord {
    StepRecord {
        step,
        t,
        alpha_bar: point.alpha_bar,
        x: point.x.clone(),
        eps_null: point.eps_null.clone(),
        eps_cond: point.eps_cond.clone(),
        eps_guided: point.eps_guided.clone(),
        xhat_null: point.xhat_null.clone(),
        xhat_cond: point.xhat_cond.clone(),
        xhat_guided: point.xhat_guided.clone(),
        scale: point.scale,
    }
}

/// Exact posterior of the mixture prior given a linear-Gaussian measurement,
/// restricted to the condition's active components.
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    /// Posterior component weights (sum to one over active components).
    pub weights: Vec<f64>,
    /// Posterior component means.
    pub component_means: Vec<Vec<f64>>,
    /// Shared within-component posterior covariance.
    pub within_cov: Vec<Vec<f64>>,
    /// Overall posterior mean.
    pub mean: Vec<f64>,
    /// Per-coordinate total posterior variance (within + between).
    pub marginal_var: Vec<f64>,
}

/// Closed-form posterior for `y = A x + n`, `n ~ N(0, sy^2 I)`, prior the
/// model's mixture restricted by `condition`. Requires `sy > 0`.
pub fn exact_posterior(
    model: &GaussianMixture,
    measurement: &Measurement,
    condition: &Condition,
) -> Result<PosteriorSummary> {
    let dim = model.dim();
    measurement.operator.validate(dim)?;
    let sy = measurement.noise_std;
    if !(sy.is_finite() && sy > 0.0) {
        return Err(Error::Singularity(
            "the exact posterior needs a positive finite measurement noise std".into(),
        ));
    }
    let mask = model.active_mask(condition)?;
    let s2 = model.component_std() * model.component_std();
    let a = measurement.operator.to_dense(dim);
    let m = a.nrows();
    let y = DVector::from_column_slice(&measurement.y);

    // Within-component posterior covariance and the data pull, shared by all
    // components because they share the prior covariance s^2 I.
    let precision = DMatrix::identity(dim, dim) / s2 + a.transpose() * &a / (sy * sy);
    let chol_prec = Cholesky::new(precision).ok_or_else(|| {
        Error::Singularity("posterior precision matrix is not positive definite".into())
    })?;
    let sigma_post = chol_prec.inverse();
    let data_pull = a.transpose() * &y / (sy * sy);

    // Marginal likelihood covariance S = s^2 A A^T + sy^2 I.
    let s_mat = &a * a.transpose() * s2 + DMatrix::identity(m, m) * (sy * sy);
    let chol_s = Cholesky::new(s_mat).ok_or_else(|| {
        Error::Singularity("marginal measurement covariance is not positive definite".into())
    })?;
    let log_det_s: f64 = chol_s.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();

    let mut log_w = Vec::new();
    let mut post_means = Vec::new();
    for (k, active) in mask.iter().enumerate() {
        if !active {
            continue;
        }
        let mu = DVector::from_column_slice(&model.means()[k]);
        let resid = &y - &a * &mu;
        let maha = resid.dot(&chol_s.solve(&resid));
        log_w.push(
            model.weights()[k].ln()
                - 0.5 * (maha + log_det_s + m as f64 * (2.0 * std::f64::consts::PI).ln()),
        );
        let mean_k = &sigma_post * (&mu / s2 + &data_pull);
        post_means.push(mean_k.iter().copied().collect::<Vec<f64>>());
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }

    let mut mean = vec![0.0; dim];
    for (w, mk) in weights.iter().zip(&post_means) {
        for (m_i, v) in mean.iter_mut().zip(mk) {
            *m_i += w * v;
        }
    }
    let mut marginal_var = vec![0.0; dim];
    for i in 0..dim {
        let within = sigma_post[(i, i)];
        let between: f64 = weights
            .iter()
            .zip(&post_means)
            .map(|(w, mk)| w * (mk[i] - mean[i]) * (mk[i] - mean[i]))
            .sum();
        marginal_var[i] = within + between;
    }
    let within_cov = (0..dim)
        .map(|i| (0..dim).map(|j| sigma_post[(i, j)]).collect())
        .collect();

    Ok(PosteriorSummary {
        weights,
        component_means: post_means,
        within_cov,
        mean,
        marginal_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{ddim_step, sample, SolverKind, SolverSpec};

    fn model() -> GaussianMixture {
        GaussianMixture::default_ring8()
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default_vp_linear()
    }

    fn eval(
        m: &GaussianMixture,
        s: &NoiseSchedule,
        x: &[f64],
        t: usize,
        cond: &Condition,
        scale: StepScale,
    ) -> EvalPoint {
        let a = s.alpha_bar(t).unwrap();
        let eps_null = m.eps_at(a, x, &Condition::Null).unwrap();
        let eps_cond = m.eps_at(a, x, cond).unwrap();
        EvalPoint::from_eps(x, a, eps_null, eps_cond, scale).unwrap()
    }

    fn loss(op: &LinearOperator, xhat: &[f64], y: &[f64]) -> f64 {
        let r = vecn::sub(&op.apply(xhat), y);
        vecn::dot(&r, &r)
    }

    #[test]
    fn operator_shapes_and_adjoint() {
        let dim = 3;
        let ops = [
            LinearOperator::Identity,
            LinearOperator::mask(vec![true, false, true]).unwrap(),
            LinearOperator::matrix(vec![vec![1.0, 2.0, 0.0], vec![0.0, 1.0, -1.0]]).unwrap(),
        ];
        let x = vec![0.5, -1.0, 2.0];
        for op in &ops {
            op.validate(dim).unwrap();
            let y = op.apply(&x);
            assert_eq!(y.len(), op.out_dim(dim));
            // <A x, y> == <x, A^T y> for a basis of y's.
            for i in 0..y.len() {
                let mut e = vec![0.0; y.len()];
                e[i] = 1.0;
                let at_e = op.apply_transpose(&e, dim);
                assert!(
                    (y[i] - vecn::dot(&x, &at_e)).abs() < 1e-12,
                    "{op} adjoint mismatch at row {i}"
                );
            }
            // Dense form agrees with apply.
            let dense = op.to_dense(dim);
            for (i, yi) in y.iter().enumerate() {
                let row: Vec<f64> = (0..dim).map(|j| dense[(i, j)]).collect();
                assert!((yi - vecn::dot(&row, &x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operator_construction_rejects_bad_inputs() {
        assert!(LinearOperator::mask(vec![false, false]).is_err());
        // Dependent rows.
        assert!(LinearOperator::matrix(vec![vec![1.0, 2.0], vec![2.0, 4.0]]).is_err());
        // More rows than columns.
        assert!(LinearOperator::matrix(vec![vec![1.0], vec![2.0]]).is_err());
        // Dimension mismatch at validation.
        assert!(LinearOperator::mask(vec![true]).unwrap().validate(2).is_err());
        // Measurement length mismatch.
        let op = LinearOperator::mask(vec![true, false]).unwrap();
        assert!(Measurement::new(vec![0.0, 0.0], 0.1, op, 2).is_err());
    }

    #[test]
    fn operator_strings_round_trip() {
        for text in ["identity", "mask:1,0,1"] {
            let op: LinearOperator = text.parse().unwrap();
            assert_eq!(op.to_string(), text);
        }
        assert!("mask:2,0".parse::<LinearOperator>().is_err());
        assert!("mask:0,0".parse::<LinearOperator>().is_err());
        assert!("blur".parse::<LinearOperator>().is_err());
    }

    #[test]
    fn zero_gradient_reduces_both_modes_to_plain_step() {
        // A = I and y placed exactly at the denoised estimate: the pull
        // vanishes and both modes reproduce the plain update bit for bit.
        let m = model();
        let s = schedule();
        let x = vec![0.4, -0.9];
        let (t, t_prev) = (640, 600);
        let cond = Condition::Class(2);
        let point = eval(&m, &s, &x, t, &cond, StepScale::CfgPp(0.6));
        let y = point.xhat_anchor().to_vec();
        let meas = Measurement::new(y, 0.0, LinearOperator::Identity, 2).unwrap();
        let plain = ddim_step(&point, &s, t, t_prev).unwrap();
        for mode in [ConsistencyMode::Dps, ConsistencyMode::Dds] {
            let params = InverseParams {
                gamma: GammaSpec::Constant(0.7),
                mode,
                guidance: GuidanceMode::CfgPp(0.6),
            };
            let out =
                consistency_step(&m, &point, &s, t, t_prev, &meas, &params, 0.7, &cond).unwrap();
            for (a, b) in out.iter().zip(&plain) {
                assert_eq!(a.to_bits(), b.to_bits(), "{mode}");
            }
        }
    }

    #[test]
    fn single_gaussian_dps_is_dds_with_rescaled_step() {
        // K = 1: the posterior-mean Jacobian is (sqrt(a) s^2 / v) I, so the
        // dps pull equals the dds pull scaled by that constant.
        let sd = 0.8;
        let m = GaussianMixture::new(vec![vec![0.3, -0.2]], None, sd).unwrap();
        let s = schedule();
        let x = vec![1.1, 0.7];
        let (t, t_prev) = (500, 450);
        let point = eval(&m, &s, &x, t, &Condition::Null, StepScale::Uncond);
        let a = s.alpha_bar(t).unwrap();
        let v = a * sd * sd + (1.0 - a);
        let j_scalar = a.sqrt() * sd * sd / v;
        let meas = Measurement::new(vec![0.9, -0.1], 0.0, LinearOperator::Identity, 2).unwrap();
        let gamma = 0.31;
        let dps = InverseParams {
            gamma: GammaSpec::Constant(gamma),
            mode: ConsistencyMode::Dps,
            guidance: GuidanceMode::Uncond,
        };
        let dds = InverseParams {
            gamma: GammaSpec::Constant(gamma * j_scalar),
            mode: ConsistencyMode::Dds,
            guidance: GuidanceMode::Uncond,
        };
        let out_dps = consistency_step(
            &m, &point, &s, t, t_prev, &meas, &dps, gamma, &Condition::Null,
        )
        .unwrap();
        let out_dds = consistency_step(
            &m,
            &point,
            &s,
            t,
            t_prev,
            &meas,
            &dds,
            gamma * j_scalar,
            &Condition::Null,
        )
        .unwrap();
        assert!(
            vecn::dist(&out_dps, &out_dds) <= 1e-10 * (1.0 + vecn::norm(&out_dps)),
            "{out_dps:?} vs {out_dds:?}"
        );
    }

    #[test]
    fn dps_gradient_matches_finite_differences_of_the_loss() {
        // l(x_t) = || A xhat(x_t) - y ||^2 differentiated through the
        // posterior-mean map, against central differences in x_t.
        let m = model();
        let s = schedule();
        let x = vec![0.25, -0.45];
        let t = 520;
        let cond = Condition::Class(4);
        let scale = StepScale::CfgPp(0.8);
        let op = LinearOperator::matrix(vec![vec![0.8, 0.4]]).unwrap();
        let meas = Measurement::new(vec![0.3], 0.0, op.clone(), 2).unwrap();
        let point = eval(&m, &s, &x, t, &cond, scale);
        let grad =
            consistency_gradient(&m, &point, &meas, ConsistencyMode::Dps, &cond).unwrap();
        let h = 1e-6;
        for d in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[d] += h;
            xm[d] -= h;
            let lp = loss(&op, &eval(&m, &s, &xp, t, &cond, scale).xhat_guided, &meas.y);
            let lm = loss(&op, &eval(&m, &s, &xm, t, &cond, scale).xhat_guided, &meas.y);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grad[d] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "coord {d}: analytic {} vs fd {fd}",
                grad[d]
            );
        }
    }

    #[test]
    fn dds_gradient_matches_finite_differences_at_the_denoised_point() {
        let m = model();
        let s = schedule();
        let x = vec![0.9, 0.15];
        let t = 700;
        let cond = Condition::Class(1);
        let point = eval(&m, &s, &x, t, &cond, StepScale::Cfg(3.0));
        let op = LinearOperator::mask(vec![true, false]).unwrap();
        let meas = Measurement::new(vec![-0.2], 0.0, op.clone(), 2).unwrap();
        let grad =
            consistency_gradient(&m, &point, &meas, ConsistencyMode::Dds, &cond).unwrap();
        let xhat = point.xhat_anchor();
        let h = 1e-7;
        for d in 0..2 {
            let mut xp = xhat.to_vec();
            let mut xm = xhat.to_vec();
            xp[d] += h;
            xm[d] -= h;
            let fd = (loss(&op, &xp, &meas.y) - loss(&op, &xm, &meas.y)) / (2.0 * h);
            assert!(
                (grad[d] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coord {d}: analytic {} vs fd {fd}",
                grad[d]
            );
        }
    }

    #[test]
    fn zero_step_size_reproduces_plain_sampling() {
        let m = model();
        let s = schedule();
        let grid = TimestepGrid::uniform(1000, 25, GridDirection::Sampling).unwrap();
        let cond = Condition::Class(3);
        let key = RunKey::new(7, 1);
        let meas = Measurement::new(vec![0.5, 0.5], 0.0, LinearOperator::Identity, 2).unwrap();
        let params = InverseParams {
            gamma: GammaSpec::Constant(0.0),
            mode: ConsistencyMode::Dds,
            guidance: GuidanceMode::CfgPp(0.6),
        };
        let solved = solve_inverse(&m, &s, &grid, &meas, &params, &cond, key, None).unwrap();
        let traj = sample(
            &m,
            &s,
            &grid,
            &GuidanceMode::CfgPp(0.6),
            &SolverSpec::new(SolverKind::Ddim),
            &cond,
            key,
            None,
        )
        .unwrap();
        for (a, b) in solved.report.final_state.iter().zip(traj.final_state()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn identity_recovery_and_residual_floor() {
        // Noiseless full observation of a prior sample: the run should land
        // on the truth and the residual trend should decrease.
        let m = model();
        let s = schedule();
        let grid = TimestepGrid::uniform(1000, 100, GridDirection::Sampling).unwrap();
        let key = RunKey::new(42, 0);
        let x_true = m
            .sample_prior(&Condition::Null, &mut key.stream(slot::PRIOR))
            .unwrap();
        let meas =
            Measurement::synthesize(&x_true, 0.0, LinearOperator::Identity, key).unwrap();
        // gamma = 0.5 would replace the estimate by y outright; 0.45 leaves a
        // genuine geometric contraction that still converges well below 1e-2.
        let params = InverseParams {
            gamma: GammaSpec::Constant(0.45),
            mode: ConsistencyMode::Dds,
            guidance: GuidanceMode::Uncond,
        };
        let solved =
            solve_inverse(&m, &s, &grid, &meas, &params, &Condition::Null, key, Some(&x_true))
                .unwrap();
        assert!(
            solved.report.truth_error.unwrap() < 1e-2,
            "error {}",
            solved.report.truth_error.unwrap()
        );
        // At gamma = 0.5 the identity pull is exact and the residual reaches
        // the noiseless floor.
        let tuned = InverseParams {
            gamma: GammaSpec::Constant(0.5),
            ..params.clone()
        };
        let exact =
            solve_inverse(&m, &s, &grid, &meas, &tuned, &Condition::Null, key, None).unwrap();
        assert!(
            exact.report.final_residual <= 1e-3,
            "residual {}",
            exact.report.final_residual
        );
        let res = &solved.report.per_step_residuals;
        let median = |w: &[f64]| {
            let mut v = w.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(median(&res[res.len() - 10..]) <= median(&res[..10]));
    }

    #[test]
    fn solve_is_deterministic_in_the_key() {
        let m = model();
        let s = schedule();
        let grid = TimestepGrid::uniform(1000, 20, GridDirection::Sampling).unwrap();
        let key = RunKey::new(13, 2);
        let meas = Measurement::new(vec![0.4], 0.05, LinearOperator::mask(vec![true, false]).unwrap(), 2)
            .unwrap();
        let params = InverseParams {
            gamma: GammaSpec::AlphaRamp(0.5),
            mode: ConsistencyMode::Dps,
            guidance: GuidanceMode::CfgPp(1.0),
        };
        let a = solve_inverse(&m, &s, &grid, &meas, &params, &Condition::Class(1), key, None)
            .unwrap();
        let b = solve_inverse(&m, &s, &grid, &meas, &params, &Condition::Class(1), key, None)
            .unwrap();
        assert_eq!(a.report.final_state, b.report.final_state);
        assert_eq!(a.report.per_step_residuals, b.report.per_step_residuals);
    }

    #[test]
    fn exact_posterior_single_gaussian_matches_ridge_formula() {
        // K = 1, A = I: posterior mean = (y/sy^2 + mu/s^2) / (1/sy^2 + 1/s^2)
        // per coordinate, variance = 1 / (1/sy^2 + 1/s^2).
        let sd = 0.5;
        let sy = 0.2;
        let mu = vec![1.0, -2.0];
        let m = GaussianMixture::new(vec![mu.clone()], None, sd).unwrap();
        let y = vec![0.6, -1.5];
        let meas = Measurement::new(y.clone(), sy, LinearOperator::Identity, 2).unwrap();
        let post = exact_posterior(&m, &meas, &Condition::Null).unwrap();
        let prec = 1.0 / (sy * sy) + 1.0 / (sd * sd);
        for d in 0..2 {
            let expected = (y[d] / (sy * sy) + mu[d] / (sd * sd)) / prec;
            assert!((post.mean[d] - expected).abs() < 1e-12);
            assert!((post.marginal_var[d] - 1.0 / prec).abs() < 1e-12);
        }
        assert_eq!(post.weights, vec![1.0]);
    }

    #[test]
    fn exact_posterior_weights_favor_nearby_components() {
        let m = model();
        // Observe only the x-coordinate near +1: components around angle 0
        // should dominate.
        let meas = Measurement::new(
            vec![1.0],
            0.1,
            LinearOperator::mask(vec![true, false]).unwrap(),
            2,
        )
        .unwrap();
        let post = exact_posterior(&m, &meas, &Condition::Null).unwrap();
        let total: f64 = post.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let best = post
            .weights
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        // Component 0 sits at angle 0 = (1, 0) in the ring preset.
        assert_eq!(best, 0);
    }

    #[test]
    fn masked_coordinate_lands_in_the_posterior_band() {
        // Observe coordinate 0 of a sample from component 2 (mean near
        // (0, 1)); the hidden coordinate of the conditional reconstruction
        // must land within 3 posterior standard deviations of the exact
        // conditional posterior mean. Scale-1 plain guidance is the
        // calibrated reference here: it runs the conditional model exactly,
        // so the deterministic sampler reproduces the conditional prior on
        // the unobserved coordinate. (Stronger settings sharpen past the
        // component: scale-1 guided denoising lands coordinate 1 near 1.55
        // on this model, far outside the band.)
        let m = model();
        let s = schedule();
        let grid = TimestepGrid::uniform(1000, 100, GridDirection::Sampling).unwrap();
        let key = RunKey::new(19, 0);
        let cond = Condition::Class(2);
        let x_true = m.sample_prior(&cond, &mut key.stream(slot::PRIOR)).unwrap();
        let op = LinearOperator::mask(vec![true, false]).unwrap();
        let meas = Measurement::synthesize(&x_true, 0.05, op, key).unwrap();
        let params = InverseParams {
            gamma: GammaSpec::Constant(0.5),
            mode: ConsistencyMode::Dds,
            guidance: GuidanceMode::Cfg(1.0),
        };
        let solved = solve_inverse(&m, &s, &grid, &meas, &params, &cond, key, Some(&x_true))
            .unwrap();
        let post = exact_posterior(&m, &meas, &cond).unwrap();
        let hidden = 1;
        let dev = (solved.report.final_state[hidden] - post.mean[hidden]).abs();
        let band = 3.0 * post.marginal_var[hidden].sqrt();
        assert!(dev <= band, "deviation {dev} exceeds band {band}");
    }

    #[test]
    fn conditional_guidance_helps_ambiguous_masked_recovery() {
        // Observing only the x-coordinate of a sample from component 2
        // (mean near (0, 1)) leaves component 6 (mean near (0, -1)) equally
        // consistent; unconditional runs split between the two while guided
        // runs pick the right one, so the mean truth error must drop.
        let m = model();
        let s = schedule();
        let grid = TimestepGrid::uniform(1000, 50, GridDirection::Sampling).unwrap();
        let cond = Condition::Class(2);
        let op = LinearOperator::mask(vec![true, false]).unwrap();
        let trials = 30;
        let mut err_uncond = 0.0;
        let mut err_guided = 0.0;
        for run in 0..trials {
            let key = RunKey::new(500 + run, 0);
            let x_true = m.sample_prior(&cond, &mut key.stream(slot::PRIOR)).unwrap();
            let meas = Measurement::synthesize(&x_true, 0.05, op.clone(), key).unwrap();
            for (guidance, acc) in [
                (GuidanceMode::Uncond, &mut err_uncond),
                (GuidanceMode::CfgPp(0.6), &mut err_guided),
            ] {
                let params = InverseParams {
                    gamma: GammaSpec::Constant(0.5),
                    mode: ConsistencyMode::Dds,
                    guidance,
                };
                let solved =
                    solve_inverse(&m, &s, &grid, &meas, &params, &cond, key, Some(&x_true))
                        .unwrap();
                *acc += solved.report.truth_error.unwrap() / trials as f64;
            }
        }
        assert!(
            err_guided < err_uncond,
            "guided mean error {err_guided} vs unconditional {err_uncond}"
        );
    }

    #[test]
    fn gamma_spec_validation_and_values() {
        let s = schedule();
        assert!(GammaSpec::Constant(-0.1).validate(10).is_err());
        assert!(GammaSpec::PerStep(vec![0.1; 9]).validate(10).is_err());
        assert!(GammaSpec::PerStep(vec![0.1; 10]).validate(10).is_ok());
        let ramp = GammaSpec::AlphaRamp(2.0);
        let v = ramp.value(&s, 1000, 0).unwrap();
        assert!((v - 2.0 * (1.0 - s.alpha_bar(1000).unwrap())).abs() < 1e-15);
        assert!(ramp.value(&s, 0, 0).unwrap() == 0.0);
    }
}
