//! Guidance modes, combination rules, and the scale-equivalence map.
//!
//! Two ways of applying a conditional/unconditional prediction pair to one
//! solver step:
//!
//! ```text
//! combined prediction:  eps^w = eps_null + w (eps_cond - eps_null)
//!
//! plain guidance   (Cfg):   denoise with eps^w, renoise with eps^w
//! guided denoising (CfgPp): denoise with eps^l, renoise with eps_null
//! ```
//!
//! The guided denoised estimate always satisfies the interpolation identity
//! `xhat^s = (1 - s) xhat_null + s xhat_cond`, which makes per-step behavior
//! of every solver checkable without reference values.
//!
//! For the plain-DDIM update written in its linear form
//! `x_prev = (sqrt(a_prev)/sqrt(a)) x + xi eps` with
//! `gamma = sqrt(a_prev) sqrt(1-a)/sqrt(a)` and `xi = sqrt(1-a_prev) - gamma`,
//! a renoise-with-null run at scale `l` equals a plain guided run whose scale
//! varies per step as `w_t = -l gamma_t / xi_t`. [`equivalent_omega_schedule`]
//! computes that schedule; `xi_t` is strictly negative on every valid
//! sampling interval, so the ratio is positive.

use crate::error::{Error, Result};
use crate::schedule::{GridDirection, NoiseSchedule, TimestepGrid};
use crate::vecn;

/// Matched scale pairs `(lambda, omega)` at which the two guidance styles
/// were calibrated to comparable output quality at 50 steps on a large
/// pretrained image model. Stored as reference metadata for sweep defaults;
/// no claim is made that the analytic models here reproduce that calibration.
pub const MATCHED_SCALE_PAIRS: [(f64, f64); 5] = [
    (0.2, 2.0),
    (0.4, 5.0),
    (0.6, 7.5),
    (0.8, 9.0),
    (1.0, 12.5),
];

/// How a run applies guidance.
#[derive(Clone, Debug, PartialEq)]
pub enum GuidanceMode {
    /// Unconditional: the conditional prediction is ignored.
    Uncond,
    /// Plain guidance at a fixed scale; the combined prediction is used for
    /// both denoising and renoising.
    Cfg(f64),
    /// Guided denoising at a fixed scale; renoising uses the unconditional
    /// prediction.
    CfgPp(f64),
    /// Plain guidance with one scale per grid interval.
    ScheduledCfg(Vec<f64>),
}

impl GuidanceMode {
    /// Validates scales. Returns advisory warnings (currently: guided
    /// denoising scales in `(1, 2]`, which extrapolate past the interpolation
    /// range but remain well-defined).
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        match self {
            GuidanceMode::Uncond => {}
            GuidanceMode::Cfg(w) => {
                if !(w.is_finite() && *w >= 0.0) {
                    return Err(Error::Parameter(format!(
                        "plain guidance scale must be finite and >= 0, got {w}"
                    )));
                }
            }
            GuidanceMode::CfgPp(l) => {
                if !(l.is_finite() && *l >= 0.0 && *l <= 2.0) {
                    return Err(Error::Parameter(format!(
                        "guided-denoising scale must lie in [0, 2], got {l}"
                    )));
                }
                if *l > 1.0 {
                    warnings.push(format!(
                        "guided-denoising scale {l} exceeds 1: the denoised estimate \
                         extrapolates beyond the conditional estimate"
                    ));
                }
            }
            GuidanceMode::ScheduledCfg(ws) => {
                if ws.is_empty() {
                    return Err(Error::Parameter("scheduled scales must be nonempty".into()));
                }
                for (i, w) in ws.iter().enumerate() {
                    if !(w.is_finite() && *w >= 0.0) {
                        return Err(Error::Parameter(format!(
                            "scheduled scale at step {i} must be finite and >= 0, got {w}"
                        )));
                    }
                }
            }
        }
        Ok(warnings)
    }

    /// Resolves the scale effective on grid interval `step` of `nfe` total.
    pub fn step_scale(&self, step: usize, nfe: usize) -> Result<StepScale> {
        match self {
            GuidanceMode::Uncond => Ok(StepScale::Uncond),
            GuidanceMode::Cfg(w) => Ok(StepScale::Cfg(*w)),
            GuidanceMode::CfgPp(l) => Ok(StepScale::CfgPp(*l)),
            GuidanceMode::ScheduledCfg(ws) => {
                if ws.len() != nfe {
                    return Err(Error::Parameter(format!(
                        "scheduled scales have length {} but the grid has {nfe} intervals",
                        ws.len()
                    )));
                }
                if step >= nfe {
                    return Err(Error::Index(format!("step {step} out of {nfe} intervals")));
                }
                Ok(StepScale::Cfg(ws[step]))
            }
        }
    }

    /// Short form used in artifact columns: `uncond`, `cfg`, `cfgpp`,
    /// `scheduled`.
    pub fn label(&self) -> &'static str {
        match self {
            GuidanceMode::Uncond => "uncond",
            GuidanceMode::Cfg(_) => "cfg",
            GuidanceMode::CfgPp(_) => "cfgpp",
            GuidanceMode::ScheduledCfg(_) => "scheduled",
        }
    }

    /// Nominal scale recorded in artifacts (0 for unconditional; for
    /// scheduled runs the per-step scales live in the equivalence report).
    pub fn nominal_scale(&self) -> f64 {
        match self {
            GuidanceMode::Uncond => 0.0,
            GuidanceMode::Cfg(w) => *w,
            GuidanceMode::CfgPp(l) => *l,
            GuidanceMode::ScheduledCfg(_) => f64::NAN,
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuidanceMode::Uncond => write!(f, "uncond"),
            GuidanceMode::Cfg(w) => write!(f, "cfg:{w}"),
            GuidanceMode::CfgPp(l) => write!(f, "cfgpp:{l}"),
            GuidanceMode::ScheduledCfg(ws) => write!(f, "scheduled[{}]", ws.len()),
        }
    }
}

/// The scale in force on a single step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepScale {
    Uncond,
    Cfg(f64),
    CfgPp(f64),
}

impl StepScale {
    /// Numeric interpolation weight of the guided denoised estimate.
    pub fn value(&self) -> f64 {
        match self {
            StepScale::Uncond => 0.0,
            StepScale::Cfg(w) => *w,
            StepScale::CfgPp(l) => *l,
        }
    }

    /// Combined prediction for this scale. Scale zero and `Uncond` return
    /// the unconditional prediction unchanged (same bits), so unconditional
    /// runs and zero-scale runs are indistinguishable downstream.
    pub fn combined(&self, eps_null: &[f64], eps_cond: &[f64]) -> Result<Vec<f64>> {
        match self {
            StepScale::Uncond => Ok(eps_null.to_vec()),
            StepScale::Cfg(s) | StepScale::CfgPp(s) if *s == 0.0 => Ok(eps_null.to_vec()),
            StepScale::Cfg(s) | StepScale::CfgPp(s) => combine_eps(eps_null, eps_cond, *s),
        }
    }
}

/// `eps_null + scale (eps_cond - eps_null)`.
pub fn combine_eps(eps_null: &[f64], eps_cond: &[f64], scale: f64) -> Result<Vec<f64>> {
    vecn::check_same_len(eps_null, eps_cond, "prediction pair")?;
    if !scale.is_finite() {
        return Err(Error::Parameter(format!("guidance scale must be finite, got {scale}")));
    }
    Ok(eps_null
        .iter()
        .zip(eps_cond)
        .map(|(n, c)| n + scale * (c - n))
        .collect())
}

/// Denoised estimate `(x - sqrt(1 - a) eps) / sqrt(a)`.
pub fn tweedie(x: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    vecn::check_same_len(x, eps, "denoised estimate")?;
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::Singularity(format!(
            "signal level must lie in (0, 1] to denoise, got {alpha_bar}"
        )));
    }
    let root_a = alpha_bar.sqrt();
    let root_1ma = (1.0 - alpha_bar).sqrt();
    Ok(x.iter()
        .zip(eps)
        .map(|(xi, ei)| (xi - root_1ma * ei) / root_a)
        .collect())
}

/// Everything the solvers need about one evaluation point: the prediction
/// pair, the combined prediction, and the three denoised estimates.
#[derive(Clone, Debug)]
pub struct EvalPoint {
    pub x: Vec<f64>,
    pub alpha_bar: f64,
    pub scale: StepScale,
    pub eps_null: Vec<f64>,
    pub eps_cond: Vec<f64>,
    pub eps_guided: Vec<f64>,
    pub xhat_null: Vec<f64>,
    pub xhat_cond: Vec<f64>,
    pub xhat_guided: Vec<f64>,
}

impl EvalPoint {
    /// Builds the derived quantities from a prediction pair.
    pub fn from_eps(
        x: &[f64],
        alpha_bar: f64,
        eps_null: Vec<f64>,
        eps_cond: Vec<f64>,
        scale: StepScale,
    ) -> Result<Self> {
        vecn::check_same_len(&eps_null, &eps_cond, "prediction pair")?;
        vecn::check_same_len(x, &eps_null, "state/prediction")?;
        let eps_guided = scale.combined(&eps_null, &eps_cond)?;
        let xhat_null = tweedie(x, &eps_null, alpha_bar)?;
        let xhat_cond = tweedie(x, &eps_cond, alpha_bar)?;
        let xhat_guided = tweedie(x, &eps_guided, alpha_bar)?;
        Ok(EvalPoint {
            x: x.to_vec(),
            alpha_bar,
            scale,
            eps_null,
            eps_cond,
            eps_guided,
            xhat_null,
            xhat_cond,
            xhat_guided,
        })
    }

    /// The denoised estimate used as the step's anchor (the guided one).
    pub fn xhat_anchor(&self) -> &[f64] {
        &self.xhat_guided
    }

    /// The denoised estimate whose residual direction drives renoising:
    /// the guided one for plain guidance, the unconditional one for guided
    /// denoising and unconditional runs.
    pub fn xhat_renoise_base(&self) -> &[f64] {
        match self.scale {
            StepScale::Cfg(_) => &self.xhat_guided,
            StepScale::Uncond | StepScale::CfgPp(_) => &self.xhat_null,
        }
    }

    /// The prediction used to renoise in noise-prediction form.
    pub fn eps_renoise(&self) -> &[f64] {
        match self.scale {
            StepScale::Cfg(_) => &self.eps_guided,
            StepScale::Uncond | StepScale::CfgPp(_) => &self.eps_null,
        }
    }

    /// The interpolation `(1 - s) xhat_null + s xhat_cond`, computed from the
    /// two plain estimates; equals `xhat_guided` up to round-off.
    pub fn xhat_interpolated(&self) -> Vec<f64> {
        let s = self.scale.value();
        self.xhat_null
            .iter()
            .zip(&self.xhat_cond)
            .map(|(n, c)| (1.0 - s) * n + s * c)
            .collect()
    }

    /// Conditional shift of the prediction pair, `eps_cond - eps_null`.
    pub fn eps_shift(&self) -> Vec<f64> {
        vecn::sub(&self.eps_cond, &self.eps_null)
    }
}

/// Guided denoised estimate straight from a prediction pair.
pub fn guided_tweedie(
    x: &[f64],
    eps_null: &[f64],
    eps_cond: &[f64],
    scale: f64,
    alpha_bar: f64,
) -> Result<Vec<f64>> {
    let combined = combine_eps(eps_null, eps_cond, scale)?;
    tweedie(x, &combined, alpha_bar)
}

/// Per-interval coefficients relating the two guidance styles on one grid.
#[derive(Clone, Debug)]
pub struct ScheduleEquivalence {
    /// The guided-denoising scale the schedule reproduces.
    pub lambda: f64,
    /// `gamma_i = sqrt(a_lo) sqrt(1 - a_hi) / sqrt(a_hi)` per interval.
    pub gamma: Vec<f64>,
    /// `xi_i = sqrt(1 - a_lo) - gamma_i` per interval (strictly negative).
    pub xi: Vec<f64>,
    /// `omega_i = -lambda gamma_i / xi_i` per interval.
    pub omega: Vec<f64>,
}

impl ScheduleEquivalence {
    /// The scheduled guidance mode carrying these per-step scales.
    pub fn mode(&self) -> GuidanceMode {
        GuidanceMode::ScheduledCfg(self.omega.clone())
    }
}

/// Computes the per-interval plain-guidance scales that make a plain guided
/// run reproduce a guided-denoising run at scale `lambda` on the given
/// sampling grid.
///
/// # Errors
///
/// Degenerate-step errors if some interval's `xi` is not strictly negative
/// (impossible on a valid variance-preserving schedule, checked anyway) or
/// vanishes to round-off.
pub fn equivalent_omega_schedule(
    lambda: f64,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
) -> Result<ScheduleEquivalence> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Parameter(format!(
            "guided-denoising scale must be finite and >= 0, got {lambda}"
        )));
    }
    if grid.direction() != GridDirection::Sampling {
        return Err(Error::Parameter(
            "the equivalence map is defined on sampling grids".into(),
        ));
    }
    let mut gamma = Vec::with_capacity(grid.nfe());
    let mut xi = Vec::with_capacity(grid.nfe());
    let mut omega = Vec::with_capacity(grid.nfe());
    for (i, (t_hi, t_lo)) in grid.pairs().enumerate() {
        let a_hi = schedule.alpha_bar(t_hi)?;
        let a_lo = schedule.alpha_bar(t_lo)?;
        let g = a_lo.sqrt() * (1.0 - a_hi).sqrt() / a_hi.sqrt();
        let x = (1.0 - a_lo).sqrt() - g;
        if x >= 0.0 {
            return Err(Error::DegenerateStep {
                index: i,
                message: format!(
                    "renoise-coefficient difference xi = {x} is not negative for times \
                     {t_hi} -> {t_lo}; the equivalence scale is undefined"
                ),
            });
        }
        if x.abs() < 1e-14 {
            return Err(Error::DegenerateStep {
                index: i,
                message: format!("xi = {x} vanishes for times {t_hi} -> {t_lo}"),
            });
        }
        gamma.push(g);
        xi.push(x);
        omega.push(-lambda * g / x);
    }
    Ok(ScheduleEquivalence {
        lambda,
        gamma,
        xi,
        omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{GridDirection, NoiseSchedule, TimestepGrid};

    #[test]
    fn combine_endpoint_scales() {
        let n = vec![0.1, -0.4];
        let c = vec![0.3, 0.5];
        let zero = combine_eps(&n, &c, 0.0).unwrap();
        assert_eq!(zero, n);
        let one = combine_eps(&n, &c, 1.0).unwrap();
        for (a, b) in one.iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
        // Scale 7.5 with a unit shift moves by exactly 7.5.
        let shifted = combine_eps(&[0.0], &[1.0], 7.5).unwrap();
        assert_eq!(shifted, vec![7.5]);
    }

    #[test]
    fn combine_same_inputs_is_identity_at_any_scale() {
        let e = vec![0.25, -1.5, 3.0];
        for scale in [0.0, 0.3, 1.0, 7.5, 12.5] {
            assert_eq!(combine_eps(&e, &e, scale).unwrap(), e);
        }
    }

    #[test]
    fn step_scale_zero_is_bitwise_null() {
        let n = vec![0.1, -0.0, 2.5e-300];
        let c = vec![9.0, 3.0, -1.0];
        for scale in [StepScale::Uncond, StepScale::Cfg(0.0), StepScale::CfgPp(0.0)] {
            let out = scale.combined(&n, &c).unwrap();
            for (a, b) in out.iter().zip(&n) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn guided_estimate_interpolates() {
        let x = vec![0.9, -0.3];
        let eps_null = vec![0.2, 0.1];
        let eps_cond = vec![-0.5, 0.7];
        let a = 0.37;
        let xhat_null = tweedie(&x, &eps_null, a).unwrap();
        let xhat_cond = tweedie(&x, &eps_cond, a).unwrap();
        for s in [0.0, 0.6, 1.0, 7.5] {
            let guided = guided_tweedie(&x, &eps_null, &eps_cond, s, a).unwrap();
            let interp: Vec<f64> = xhat_null
                .iter()
                .zip(&xhat_cond)
                .map(|(n, c)| (1.0 - s) * n + s * c)
                .collect();
            let tol = 1e-12 * (1.0 + crate::vecn::norm(&guided));
            assert!(
                crate::vecn::dist(&guided, &interp) <= tol,
                "scale {s}: {guided:?} vs {interp:?}"
            );
        }
    }

    #[test]
    fn eval_point_selectors() {
        let x = vec![1.0, 2.0];
        let point = EvalPoint::from_eps(
            &x,
            0.5,
            vec![0.1, 0.2],
            vec![0.3, 0.4],
            StepScale::CfgPp(0.6),
        )
        .unwrap();
        assert_eq!(point.eps_renoise(), point.eps_null.as_slice());
        assert_eq!(point.xhat_renoise_base(), point.xhat_null.as_slice());
        assert_eq!(point.xhat_anchor(), point.xhat_guided.as_slice());

        let plain = EvalPoint::from_eps(
            &x,
            0.5,
            vec![0.1, 0.2],
            vec![0.3, 0.4],
            StepScale::Cfg(3.0),
        )
        .unwrap();
        assert_eq!(plain.eps_renoise(), plain.eps_guided.as_slice());
        assert_eq!(plain.xhat_renoise_base(), plain.xhat_guided.as_slice());
    }

    /// Schedule with alpha_bar = [1, 0.64, 0.25]: the hand-worked example.
    fn two_step_schedule() -> NoiseSchedule {
        let s = NoiseSchedule::vp_linear(2, 0.36, 0.609375).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.64).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.25).abs() < 1e-15);
        s
    }

    #[test]
    fn equivalence_coefficients_hand_example() {
        // Interval from a_hi = 0.25 to a_lo = 0.64:
        //   gamma = 0.8 * sqrt(0.75) / 0.5 = 1.3856406460551018
        //   xi    = 0.6 - gamma          = -0.7856406460551018
        //   omega(lambda=1) = gamma / |xi| = 1.7637377689484216
        let schedule = two_step_schedule();
        let grid = TimestepGrid::new(vec![2, 1, 0], GridDirection::Sampling).unwrap();
        let eq = equivalent_omega_schedule(1.0, &schedule, &grid).unwrap();
        assert!((eq.gamma[0] - 1.3856406460551018).abs() < 1e-15);
        assert!((eq.xi[0] + 0.7856406460551018).abs() < 1e-15);
        assert!((eq.omega[0] - 1.3856406460551018 / 0.7856406460551018).abs() < 1e-14);

        // Terminal interval to t = 0: xi = -gamma exactly, so omega = lambda.
        assert!((eq.omega[1] - 1.0).abs() < 1e-15);

        // Scaling lambda scales every omega.
        let eq2 = equivalent_omega_schedule(0.5, &schedule, &grid).unwrap();
        for (a, b) in eq2.omega.iter().zip(&eq.omega) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }

        // lambda = 0 gives the all-zero schedule.
        let eq0 = equivalent_omega_schedule(0.0, &schedule, &grid).unwrap();
        assert!(eq0.omega.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn equivalence_requires_sampling_grid() {
        let schedule = two_step_schedule();
        let grid = TimestepGrid::new(vec![0, 1, 2], GridDirection::Inversion).unwrap();
        assert!(equivalent_omega_schedule(1.0, &schedule, &grid).is_err());
    }

    #[test]
    fn xi_is_negative_on_default_grid() {
        let schedule = NoiseSchedule::default_vp_linear();
        let grid = TimestepGrid::uniform(1000, 50, GridDirection::Sampling).unwrap();
        let eq = equivalent_omega_schedule(0.6, &schedule, &grid).unwrap();
        assert!(eq.xi.iter().all(|x| *x < 0.0));
        assert!(eq.omega.iter().all(|w| *w > 0.0));
        assert_eq!(eq.omega.len(), 50);
    }

    #[test]
    fn validation_rules() {
        assert!(GuidanceMode::Cfg(7.5).validate().unwrap().is_empty());
        assert!(GuidanceMode::CfgPp(0.6).validate().unwrap().is_empty());
        assert_eq!(GuidanceMode::CfgPp(1.5).validate().unwrap().len(), 1);
        assert!(GuidanceMode::CfgPp(2.5).validate().is_err());
        assert!(GuidanceMode::CfgPp(-0.1).validate().is_err());
        assert!(GuidanceMode::Cfg(-1.0).validate().is_err());
        assert!(GuidanceMode::Cfg(f64::NAN).validate().is_err());
        assert!(GuidanceMode::ScheduledCfg(vec![]).validate().is_err());
        assert!(GuidanceMode::ScheduledCfg(vec![1.0, -2.0]).validate().is_err());
    }

    #[test]
    fn scheduled_scale_resolution() {
        let mode = GuidanceMode::ScheduledCfg(vec![1.0, 2.0, 3.0]);
        assert_eq!(mode.step_scale(1, 3).unwrap(), StepScale::Cfg(2.0));
        assert!(mode.step_scale(0, 2).is_err());
        assert!(mode.step_scale(3, 3).is_err());
    }

    #[test]
    fn matched_pairs_table() {
        assert_eq!(MATCHED_SCALE_PAIRS.len(), 5);
        assert_eq!(MATCHED_SCALE_PAIRS[2], (0.6, 7.5));
        for (l, w) in MATCHED_SCALE_PAIRS {
            assert!(l < w, "guided-denoising scales sit far below plain scales");
        }
    }
}
