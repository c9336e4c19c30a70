//! Solver steps and the sampling loop.
//!
//! All solvers advance the same probability-flow dynamics and are written
//! against the variance-exploding (VE) change of variables
//! `z = x / sqrt(alpha_bar)`, `sigma = sqrt(1 - alpha_bar) / sqrt(alpha_bar)`,
//! in which the denoised estimate is the same vector as in the
//! variance-preserving view (`xhat = z - sigma * eps`). Updates from noise
//! scale `sigma_t` to `sigma_next`:
//!
//! ```text
//! ddim (VP form):   x_prev = sqrt(a_prev) xhat_anchor + sqrt(1 - a_prev) eps_renoise
//! euler:            z_next = xhat_anchor + (sigma_next / sigma_t) (z - xhat_dir)
//! euler-ancestral:  z_next = xhat_anchor + (sigma_d / sigma_t) (z - xhat_dir) + c * noise
//!                   c = sigma_t                      ("paper" policy)
//!                   c = sigma_d sqrt(sigma_t^2 - sigma_d^2) / sigma_t   ("sigma-up")
//! dpmpp-2m:         on tau = -ln sigma, h_i = tau_i - tau_{i-1}, r_i = h_{i-1}/h_i:
//!                   z_i = xhat_anchor - e^{-h} xhat_dir
//!                         + (1 - e^{-h})/(2 r_i) (xhat_dir - xhat_dir_prev) + e^{-h} z
//!                   (first step: z_i = xhat_anchor + e^{-h}(z - xhat_dir))
//! dpmpp-2s:         u = e^{-r h} z + (1 - e^{-r h}) xhat_dir,  r = (tau_mid - tau_t)/h
//!                   z_next = xhat_dir - e^{-h} xhat_dir
//!                            + (1 - e^{-h})/(2 r) (xhat_mid - xhat_dir) + e^{-h} z
//! ```
//!
//! The anchor is always the guided denoised estimate; the direction estimate
//! (`xhat_dir`) and the renoising prediction follow the guidance style: the
//! guided one for plain guidance, the unconditional one for guided denoising
//! and unconditional runs. DDIM and Euler are algebraically identical maps;
//! both DPM variants fall back to first order on the terminal step where
//! `sigma = 0` makes the log-SNR time infinite.
//!
//! Deterministic kinds never touch the random streams; the ancestral kind
//! draws exactly one noise vector per step from the stream keyed by
//! `(seed, run, step)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::guidance::{EvalPoint, GuidanceMode, StepScale};
use crate::rng::{slot, RunKey};
use crate::schedule::{GridDirection, NoiseSchedule, TimestepGrid};
use crate::score::{Condition, GaussianMixture};
use crate::vecn;

/// Solver family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Ddim,
    Euler,
    EulerAncestral,
    Dpmpp2m,
    Dpmpp2s,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolverKind::Ddim => "ddim",
            SolverKind::Euler => "euler",
            SolverKind::EulerAncestral => "euler-ancestral",
            SolverKind::Dpmpp2m => "dpmpp-2m",
            SolverKind::Dpmpp2s => "dpmpp-2s",
        };
        write!(f, "{s}")
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SolverKind::Ddim),
            "euler" => Ok(SolverKind::Euler),
            "euler-ancestral" => Ok(SolverKind::EulerAncestral),
            "dpmpp-2m" => Ok(SolverKind::Dpmpp2m),
            "dpmpp-2s" => Ok(SolverKind::Dpmpp2s),
            other => Err(Error::Config(format!(
                "unknown solver {other:?} (expected ddim, euler, euler-ancestral, dpmpp-2m, or dpmpp-2s)"
            ))),
        }
    }
}

/// Noise-scale policy of the ancestral solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AncestralNoise {
    /// Token `paper`: the added noise keeps the full current scale
    /// `sigma_t`, as in the update rule printed above.
    #[default]
    FullSigma,
    /// Token `sigma-up`: the conventional reduced scale
    /// `sqrt(sigma_d^2 (sigma_t^2 - sigma_d^2)) / sigma_t`.
    SigmaUp,
}

impl fmt::Display for AncestralNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AncestralNoise::FullSigma => write!(f, "paper"),
            AncestralNoise::SigmaUp => write!(f, "sigma-up"),
        }
    }
}

impl FromStr for AncestralNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(AncestralNoise::FullSigma),
            "sigma-up" | "sigma_up" => Ok(AncestralNoise::SigmaUp),
            other => Err(Error::Config(format!(
                "unknown ancestral noise policy {other:?} (expected \"paper\" or \"sigma-up\")"
            ))),
        }
    }
}

/// Full solver selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub ancestral_noise: AncestralNoise,
}

impl SolverSpec {
    pub fn new(kind: SolverKind) -> Self {
        SolverSpec {
            kind,
            ancestral_noise: AncestralNoise::default(),
        }
    }
}

/// One recorded grid point of a trajectory: the state, the prediction pair,
/// and the derived denoised estimates.
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Position in the grid (0-based).
    pub step: usize,
    /// Schedule time.
    pub t: usize,
    pub alpha_bar: f64,
    pub x: Vec<f64>,
    pub eps_null: Vec<f64>,
    pub eps_cond: Vec<f64>,
    pub eps_guided: Vec<f64>,
    pub xhat_null: Vec<f64>,
    pub xhat_cond: Vec<f64>,
    pub xhat_guided: Vec<f64>,
    /// Scale in force on the step leaving this point (the final record keeps
    /// the last step's scale).
    pub scale: StepScale,
}

/// A complete sampling run: one record per grid point, ending at `t = 0`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub solver: SolverKind,
    pub guidance: GuidanceMode,
    pub condition: Condition,
    pub seed: u64,
    pub run: u64,
}

impl Trajectory {
    /// The state at `t = 0`.
    pub fn final_state(&self) -> &[f64] {
        &self.records.last().expect("trajectories are never empty").x
    }
}

fn check_point_level(point: &EvalPoint, schedule: &NoiseSchedule, t: usize) -> Result<()> {
    let a = schedule.alpha_bar(t)?;
    if point.alpha_bar != a {
        return Err(Error::Parameter(format!(
            "evaluation point was built at signal level {} but time {t} has {a}",
            point.alpha_bar
        )));
    }
    Ok(())
}

/// One DDIM step from `t` to `t_prev <= t`.
pub fn ddim_step(
    point: &EvalPoint,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
) -> Result<Vec<f64>> {
    check_point_level(point, schedule, t)?;
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "ddim step must not increase time ({t} -> {t_prev})"
        )));
    }
    let a_prev = schedule.alpha_bar(t_prev)?;
    let root_a = a_prev.sqrt();
    let root_1ma = (1.0 - a_prev).sqrt();
    Ok(point
        .xhat_anchor()
        .iter()
        .zip(point.eps_renoise())
        .map(|(xh, er)| root_a * xh + root_1ma * er)
        .collect())
}

/// Euler update in VE coordinates from `sigma_t > 0` to `sigma_next`.
pub fn euler_core(
    z: &[f64],
    sigma_t: f64,
    sigma_next: f64,
    xhat_anchor: &[f64],
    xhat_dir: &[f64],
) -> Result<Vec<f64>> {
    if !(sigma_t.is_finite() && sigma_t > 0.0) {
        return Err(Error::Singularity(format!(
            "euler step needs a positive finite starting noise scale, got {sigma_t}"
        )));
    }
    if !(sigma_next >= 0.0 && sigma_next <= sigma_t) {
        return Err(Error::Parameter(format!(
            "target noise scale {sigma_next} outside [0, {sigma_t}]"
        )));
    }
    let ratio = sigma_next / sigma_t;
    Ok(xhat_anchor
        .iter()
        .zip(z.iter().zip(xhat_dir))
        .map(|(a, (zi, d))| a + ratio * (zi - d))
        .collect())
}

/// One Euler step from `t` to `t_prev <= t` on the schedule.
pub fn euler_step(
    point: &EvalPoint,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
) -> Result<Vec<f64>> {
    check_point_level(point, schedule, t)?;
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "euler step must not increase time ({t} -> {t_prev})"
        )));
    }
    let sigma_t = schedule.sigma_ve(t)?;
    let sigma_next = schedule.sigma_ve(t_prev)?;
    let root_a_t = point.alpha_bar.sqrt();
    let z: Vec<f64> = point.x.iter().map(|v| v / root_a_t).collect();
    let out_ve = euler_core(&z, sigma_t, sigma_next, point.xhat_anchor(), point.xhat_renoise_base())?;
    let root_a_prev = schedule.alpha_bar(t_prev)?.sqrt();
    Ok(vecn::scale(&out_ve, root_a_prev))
}

/// One ancestral step: deterministic Euler sub-step to `t_d`, then a noise
/// draw scaled by the policy, landing at `t_prev`. `noise` is the standard
/// normal vector drawn by the caller (one per step).
pub fn euler_ancestral_step(
    point: &EvalPoint,
    schedule: &NoiseSchedule,
    t: usize,
    t_d: usize,
    t_prev: usize,
    policy: AncestralNoise,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_point_level(point, schedule, t)?;
    if !(t > t_prev && t >= t_d && t_d >= t_prev) {
        return Err(Error::Parameter(format!(
            "ancestral step needs t > t_prev and t >= t_d >= t_prev, got {t} -> {t_d} -> {t_prev}"
        )));
    }
    vecn::check_same_len(noise, &point.x, "ancestral noise draw")?;
    let sigma_t = schedule.sigma_ve(t)?;
    let sigma_d = schedule.sigma_ve(t_d)?;
    let root_a_t = point.alpha_bar.sqrt();
    let z: Vec<f64> = point.x.iter().map(|v| v / root_a_t).collect();
    let mut out_ve = euler_core(&z, sigma_t, sigma_d, point.xhat_anchor(), point.xhat_renoise_base())?;
    let coeff = match policy {
        AncestralNoise::FullSigma => sigma_t,
        AncestralNoise::SigmaUp => {
            (sigma_d * sigma_d * (sigma_t * sigma_t - sigma_d * sigma_d)).sqrt() / sigma_t
        }
    };
    for (o, n) in out_ve.iter_mut().zip(noise) {
        *o += coeff * n;
    }
    let root_a_prev = schedule.alpha_bar(t_prev)?.sqrt();
    Ok(vecn::scale(&out_ve, root_a_prev))
}

/// Multistep state carried between 2M steps: the previous grid point's
/// direction estimate and the previous interval width on the log-SNR time.
#[derive(Clone, Debug)]
pub struct Dpm2mState {
    pub xhat_dir_prev: Vec<f64>,
    pub h_prev: f64,
}

/// 2M update in VE coordinates. `h` is the current interval on the log-SNR
/// time; `prev` is absent on the first step.
pub fn dpmpp2m_core(
    z: &[f64],
    h: f64,
    xhat_anchor: &[f64],
    xhat_dir: &[f64],
    prev: Option<(&[f64], f64)>,
) -> Result<Vec<f64>> {
    if !(h.is_finite() && h >= 0.0) {
        return Err(Error::Parameter(format!(
            "log-SNR interval must be finite and nonnegative, got {h}"
        )));
    }
    let decay = (-h).exp();
    match prev {
        None => Ok(xhat_anchor
            .iter()
            .zip(z.iter().zip(xhat_dir))
            .map(|(a, (zi, d))| a + decay * (zi - d))
            .collect()),
        Some((xhat_dir_prev, h_prev)) => {
            if !(h_prev.is_finite() && h_prev > 0.0) {
                return Err(Error::Parameter(format!(
                    "previous log-SNR interval must be positive and finite, got {h_prev}"
                )));
            }
            // (1 - e^{-h}) / (2 r) with r = h_prev / h, written so h -> 0
            // degenerates to zero instead of inf * 0.
            let coeff = (1.0 - decay) * h / (2.0 * h_prev);
            Ok(xhat_anchor
                .iter()
                .zip(xhat_dir.iter().zip(xhat_dir_prev))
                .zip(z)
                .map(|((a, (d, dp)), zi)| a - decay * d + coeff * (d - dp) + decay * zi)
                .collect())
        }
    }
}

/// One 2M step from `t` to `t_prev` on the schedule. Returns the new state
/// and the multistep memory to pass into the next step. The terminal step to
/// `sigma = 0` (infinite `h`) falls back to first order: the output is the
/// guided denoised estimate.
pub fn dpmpp2m_step(
    point: &EvalPoint,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    state: Option<&Dpm2mState>,
) -> Result<(Vec<f64>, Dpm2mState)> {
    check_point_level(point, schedule, t)?;
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "2m step must not increase time ({t} -> {t_prev})"
        )));
    }
    let sigma_t = schedule.sigma_ve(t)?;
    if !(sigma_t.is_finite() && sigma_t > 0.0) {
        return Err(Error::Singularity(
            "2m step needs a positive finite starting noise scale".into(),
        ));
    }
    let root_a_t = point.alpha_bar.sqrt();
    let z: Vec<f64> = point.x.iter().map(|v| v / root_a_t).collect();
    let dir = point.xhat_renoise_base();
    let sigma_next = schedule.sigma_ve(t_prev)?;
    if sigma_next == 0.0 {
        // Infinite interval on the log-SNR time: first-order terminal step.
        let out = point.xhat_anchor().to_vec();
        let memory = Dpm2mState {
            xhat_dir_prev: dir.to_vec(),
            h_prev: f64::INFINITY,
        };
        let root_a_prev = schedule.alpha_bar(t_prev)?.sqrt();
        return Ok((vecn::scale(&out, root_a_prev), memory));
    }
    let h = schedule.solver_time(t_prev)? - schedule.solver_time(t)?;
    let prev = state.map(|s| (s.xhat_dir_prev.as_slice(), s.h_prev));
    let out_ve = dpmpp2m_core(&z, h, point.xhat_anchor(), dir, prev)?;
    let memory = Dpm2mState {
        xhat_dir_prev: dir.to_vec(),
        h_prev: h,
    };
    let root_a_prev = schedule.alpha_bar(t_prev)?.sqrt();
    Ok((vecn::scale(&out_ve, root_a_prev), memory))
}

/// 2S update in VE coordinates between positive noise scales, with the
/// midpoint estimate supplied by `eval_mid(u, sigma_mid)`. The callback
/// receives the intermediate state and must return the mode-appropriate
/// denoised estimate there.
pub fn dpmpp2s_core<F>(
    z: &[f64],
    sigma_t: f64,
    sigma_mid: f64,
    sigma_next: f64,
    xhat_dir: &[f64],
    eval_mid: F,
) -> Result<Vec<f64>>
where
    F: FnOnce(&[f64], f64) -> Result<Vec<f64>>,
{
    if !(sigma_t > 0.0 && sigma_next > 0.0) {
        return Err(Error::Singularity(format!(
            "2s step needs positive noise scales, got {sigma_t} -> {sigma_next}"
        )));
    }
    if !(sigma_next < sigma_mid && sigma_mid < sigma_t) {
        return Err(Error::Parameter(format!(
            "midpoint noise scale {sigma_mid} outside ({sigma_next}, {sigma_t})"
        )));
    }
    let tau_t = -sigma_t.ln();
    let tau_mid = -sigma_mid.ln();
    let tau_next = -sigma_next.ln();
    let h = tau_next - tau_t;
    let r = (tau_mid - tau_t) / h;
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Parameter(format!("midpoint ratio {r} outside (0, 1)")));
    }
    let decay_mid = (-r * h).exp();
    let u: Vec<f64> = z
        .iter()
        .zip(xhat_dir)
        .map(|(zi, d)| decay_mid * zi + (1.0 - decay_mid) * d)
        .collect();
    let xhat_mid = eval_mid(&u, sigma_mid)?;
    vecn::check_same_len(&xhat_mid, z, "midpoint estimate")?;
    let decay = (-h).exp();
    let coeff = (1.0 - decay) / (2.0 * r);
    Ok(xhat_dir
        .iter()
        .zip(xhat_mid.iter().zip(z))
        .map(|(d, (m, zi))| d - decay * d + coeff * (m - d) + decay * zi)
        .collect())
}

/// One 2S step from `t` through the interior midpoint `s_mid` to
/// `t_prev >= 1`. The midpoint evaluation follows the step's guidance style:
/// the combined prediction (plain or guided-denoising scale) or the
/// unconditional one. Terminal steps to `t = 0` are first order and taken by
/// the sampling loop directly, not by this function.
pub fn dpmpp2s_step(
    model: &GaussianMixture,
    point: &EvalPoint,
    schedule: &NoiseSchedule,
    t: usize,
    s_mid: usize,
    t_prev: usize,
    condition: &Condition,
) -> Result<Vec<f64>> {
    check_point_level(point, schedule, t)?;
    if !(t > s_mid && s_mid > t_prev) {
        return Err(Error::Parameter(format!(
            "2s step needs t > s_mid > t_prev, got {t} -> {s_mid} -> {t_prev}"
        )));
    }
    let sigma_t = schedule.sigma_ve(t)?;
    let sigma_mid = schedule.sigma_ve(s_mid)?;
    let sigma_next = schedule.sigma_ve(t_prev)?;
    let a_mid = schedule.alpha_bar(s_mid)?;
    let root_a_t = point.alpha_bar.sqrt();
    let z: Vec<f64> = point.x.iter().map(|v| v / root_a_t).collect();
    let scale = point.scale;
    let out_ve = dpmpp2s_core(
        &z,
        sigma_t,
        sigma_mid,
        sigma_next,
        point.xhat_renoise_base(),
        |u, _| {
            // The model evaluates on the VP state u * sqrt(a_mid); the
            // denoised estimate is the same vector in both parameterizations.
            let u_vp = vecn::scale(u, a_mid.sqrt());
            let eps_null = model.eps_at(a_mid, &u_vp, &Condition::Null)?;
            let eps_cond = model.eps_at(a_mid, &u_vp, condition)?;
            let mid = EvalPoint::from_eps(&u_vp, a_mid, eps_null, eps_cond, scale)?;
            Ok(mid.xhat_guided)
        },
    )?;
    let root_a_prev = schedule.alpha_bar(t_prev)?.sqrt();
    Ok(vecn::scale(&out_ve, root_a_prev))
}

/// The interior time whose log-SNR coordinate is closest to the interval
/// midpoint; errors when the gap has no interior integer.
pub fn midpoint_time(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<usize> {
    if t <= t_prev + 1 {
        return Err(Error::DegenerateStep {
            index: t,
            message: format!("interval {t} -> {t_prev} has no interior midpoint time"),
        });
    }
    if t_prev == 0 {
        return Err(Error::Parameter(
            "terminal intervals have no finite log-SNR midpoint".into(),
        ));
    }
    let target = 0.5 * (schedule.solver_time(t)? + schedule.solver_time(t_prev)?);
    let mut best = t_prev + 1;
    let mut best_err = f64::INFINITY;
    for s in (t_prev + 1)..t {
        let err = (schedule.solver_time(s)? - target).abs();
        if err < best_err {
            best = s;
            best_err = err;
        }
    }
    Ok(best)
}

/// Ancestral sub-step target: the integer midpoint of the interval, clamped
/// to the target time for unit gaps.
fn ancestral_mid(t: usize, t_prev: usize) -> usize {
    (t + t_prev) / 2
}

/// Runs a full sampling trajectory over a sampling grid.
///
/// The initial state comes from `x_init` when given, otherwise from the
/// run's init stream. Each grid point is evaluated once (unconditional and
/// conditional predictions); the 2S solver additionally evaluates its own
/// midpoints. Only the ancestral solver draws step noise.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    guidance: &GuidanceMode,
    spec: &SolverSpec,
    condition: &Condition,
    key: RunKey,
    x_init: Option<Vec<f64>>,
) -> Result<Trajectory> {
    if grid.direction() != GridDirection::Sampling {
        return Err(Error::Parameter("sampling requires a sampling grid".into()));
    }
    if grid.indices()[0] > schedule.train_steps() {
        return Err(Error::Index(format!(
            "grid starts at {} but the schedule has {} steps",
            grid.indices()[0],
            schedule.train_steps()
        )));
    }
    guidance.validate()?;
    model.active_mask(condition)?;
    let nfe = grid.nfe();
    let dim = model.dim();
    let mut x = match x_init {
        Some(x0) => {
            if x0.len() != dim {
                return Err(Error::Parameter(format!(
                    "initial state has dimension {} but the model has {dim}",
                    x0.len()
                )));
            }
            x0
        }
        None => key.stream(slot::INIT).normal_vec(dim),
    };
    let mut records = Vec::with_capacity(nfe + 1);
    let mut dpm_state: Option<Dpm2mState> = None;
    let mut last_scale = StepScale::Uncond;

    for (i, (t, t_prev)) in grid.pairs().enumerate() {
        let a_t = schedule.alpha_bar(t)?;
        let eps_null = model.eps_at(a_t, &x, &Condition::Null)?;
        let eps_cond = if *condition == Condition::Null {
            eps_null.clone()
        } else {
            model.eps_at(a_t, &x, condition)?
        };
        let scale = guidance.step_scale(i, nfe)?;
        last_scale = scale;
        let point = EvalPoint::from_eps(&x, a_t, eps_null, eps_cond, scale)?;
        records.push(record_from(&point, i, t));

        x = match spec.kind {
            SolverKind::Ddim => ddim_step(&point, schedule, t, t_prev)?,
            SolverKind::Euler => euler_step(&point, schedule, t, t_prev)?,
            SolverKind::EulerAncestral => {
                let t_d = ancestral_mid(t, t_prev);
                let noise = key.stream(slot::ancestral(i)).normal_vec(dim);
                euler_ancestral_step(&point, schedule, t, t_d, t_prev, spec.ancestral_noise, &noise)?
            }
            SolverKind::Dpmpp2m => {
                let (next, memory) = dpmpp2m_step(&point, schedule, t, t_prev, dpm_state.as_ref())?;
                dpm_state = Some(memory);
                next
            }
            SolverKind::Dpmpp2s => {
                if schedule.sigma_ve(t_prev)? == 0.0 {
                    // First-order terminal step, as for 2M.
                    vecn::scale(
                        point.xhat_anchor(),
                        schedule.alpha_bar(t_prev)?.sqrt(),
                    )
                } else {
                    let s_mid = midpoint_time(schedule, t, t_prev)?;
                    dpmpp2s_step(model, &point, schedule, t, s_mid, t_prev, condition)?
                }
            }
        };
    }

    // Terminal record at t = 0.
    let t_final = *grid.indices().last().unwrap();
    let a_final = schedule.alpha_bar(t_final)?;
    let eps_null = model.eps_at(a_final, &x, &Condition::Null)?;
    let eps_cond = if *condition == Condition::Null {
        eps_null.clone()
    } else {
        model.eps_at(a_final, &x, condition)?
    };
    let point = EvalPoint::from_eps(&x, a_final, eps_null, eps_cond, last_scale)?;
    records.push(record_from(&point, nfe, t_final));

    Ok(Trajectory {
        records,
        solver: spec.kind,
        guidance: guidance.clone(),
        condition: condition.clone(),
        seed: key.seed,
        run: key.run,
    })
}

fn record_from(point: &EvalPoint, step: usize, t: usize) -> StepRecord {
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
