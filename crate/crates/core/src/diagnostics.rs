//! Quantitative probes over recorded trajectories: conditional
//! score-matching loss, the exact per-step drift decomposition of the
//! denoised estimate, an off-distribution proxy, and mode-coverage
//! statistics.
//!
//! The drift decomposition is an exact rearrangement of the deterministic
//! update. Write `rho = sqrt(1 - a) / sqrt(a)` at the arrival time and
//! `dshift = eps_cond - eps_null`. Stepping from the noisier state `x_u` to
//! `x_w`:
//!
//! ```text
//! plain guidance (scale w):
//!   xhat^w(x_w) - xhat^w(x_u)
//!     = rho_w (eps_null(x_u) - eps_null(x_w))          [uncond shift]
//!     + w rho_w (dshift(x_u) - dshift(x_w))            [cond shift]
//!
//! guided denoising (scale l):
//!   xhat^l(x_w) - xhat^l(x_u)
//!     = rho_w (eps_null(x_u) - eps_null(x_w))          [uncond shift]
//!     + l (xhat_cond(x_w) - xhat_null(x_w))            [cond shift]
//! ```
//!
//! Both follow by substituting the update rule into the Tweedie formula at
//! the arrival state, so the residual vanishes to round-off. The forms of
//! the conditional term differ qualitatively: the plain-guidance term is a
//! difference of shifts between two states and oscillates in sign, while
//! the guided-denoising term always points from the unconditional toward
//! the conditional denoised estimate (its inner product with that direction
//! is `l` times a squared norm, hence nonnegative).

use crate::error::{Error, Result};
use crate::guidance::GuidanceMode;
use crate::schedule::NoiseSchedule;
use crate::score::{Condition, GaussianMixture};
use crate::solver::{SolverKind, Trajectory};
use crate::vecn;

/// One step of the drift decomposition, indexed by the arrival time.
#[derive(Clone, Debug)]
pub struct DriftRecord {
    /// Arrival time of the step.
    pub t: usize,
    /// Guided denoised estimate at the arrival state minus at the departure
    /// state.
    pub d_xhat_direct: Vec<f64>,
    pub uncond_shift: Vec<f64>,
    pub cond_shift: Vec<f64>,
    /// `|| direct - (uncond + cond) ||`, zero to round-off.
    pub residual_norm: f64,
}

/// Per-step conditional score-matching loss along a trajectory.
#[derive(Clone, Debug)]
pub struct LossTrace {
    /// `(t, value)` pairs in trajectory order.
    pub points: Vec<(usize, f64)>,
}

/// Nearest-component histogram over a set of samples.
#[derive(Clone, Debug)]
pub struct ModeCoverage {
    pub frequencies: Vec<f64>,
    /// Shannon entropy of the frequencies, in nats.
    pub entropy: f64,
}

/// Conditional score-matching loss at a clean state: noise `x` to time `t`
/// with the given `eps`, ask the model for the noise back, and measure the
/// squared error
/// `|| eps_hat_c(sqrt(a) x + sqrt(1-a) eps) - eps ||^2`.
///
/// The normalized form `(1 - a) / a * loss` equals
/// `|| x - xhat_c(x_t) ||^2` identically.
pub fn sds_loss(
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    x: &[f64],
    condition: &Condition,
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    if t == 0 || t > schedule.train_steps() {
        return Err(Error::Index(format!(
            "loss is evaluated at noised times 1..={}, got {t}",
            schedule.train_steps()
        )));
    }
    vecn::check_same_len(x, eps, "loss noise vector")?;
    vecn::check_finite(x, "loss state")?;
    vecn::check_finite(eps, "loss noise")?;
    let a = schedule.alpha_bar(t)?;
    let root_a = a.sqrt();
    let root_1ma = (1.0 - a).sqrt();
    let x_t: Vec<f64> = x
        .iter()
        .zip(eps)
        .map(|(xi, ei)| root_a * xi + root_1ma * ei)
        .collect();
    let eps_hat = model.eps_at(a, &x_t, condition)?;
    let d = vecn::sub(&eps_hat, eps);
    Ok(vecn::dot(&d, &d))
}

/// Normalized loss trace along a recorded trajectory: at each recorded
/// state, `|| x_final - xhat_c(x_t) ||^2` with the conditional denoised
/// estimate recomputed under `condition`. This is the normalized
/// score-matching loss of the run's final state against its own path (at
/// `t = 0` the estimate is the state itself, so the trace ends at zero).
pub fn track_loss(
    trajectory: &Trajectory,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    condition: &Condition,
) -> Result<LossTrace> {
    let x_final = trajectory.final_state().to_vec();
    let mut points = Vec::with_capacity(trajectory.records.len());
    for r in &trajectory.records {
        let a = schedule.alpha_bar(r.t)?;
        let xhat_c = model.posterior_mean_at(a, &r.x, condition)?;
        let d = vecn::sub(&x_final, &xhat_c);
        points.push((r.t, vecn::dot(&d, &d)));
    }
    Ok(LossTrace { points })
}

fn scale_of(mode: &GuidanceMode) -> Result<f64> {
    match mode {
        GuidanceMode::Uncond => Ok(0.0),
        GuidanceMode::Cfg(w) => Ok(*w),
        GuidanceMode::CfgPp(l) => Ok(*l),
        GuidanceMode::ScheduledCfg(_) => Err(Error::Parameter(
            "drift decomposition requires a fixed guidance scale".into(),
        )),
    }
}

/// Exact decomposition of the guided denoised estimate's motion along a
/// deterministic trajectory, per the formulas in the module header. The
/// trajectory must come from the plain deterministic solver under exactly
/// the stated mode.
pub fn drift_decomposition(
    trajectory: &Trajectory,
    schedule: &NoiseSchedule,
    condition: &Condition,
    mode: &GuidanceMode,
) -> Result<Vec<DriftRecord>> {
    if trajectory.solver != SolverKind::Ddim {
        return Err(Error::Parameter(format!(
            "drift decomposition is defined for ddim trajectories, got {}",
            trajectory.solver
        )));
    }
    if trajectory.guidance != *mode {
        return Err(Error::Parameter(format!(
            "trajectory was sampled under {} but the decomposition asked for {}",
            trajectory.guidance, mode
        )));
    }
    if trajectory.condition != *condition {
        return Err(Error::Parameter(format!(
            "trajectory was sampled under condition {} but the decomposition asked for {}",
            trajectory.condition, condition
        )));
    }
    let s = scale_of(mode)?;
    let guided_denoising = matches!(mode, GuidanceMode::CfgPp(_));

    let mut out = Vec::with_capacity(trajectory.records.len().saturating_sub(1));
    for pair in trajectory.records.windows(2) {
        let (u, w) = (&pair[0], &pair[1]);
        let a_w = schedule.alpha_bar(w.t)?;
        let rho_w = (1.0 - a_w).sqrt() / a_w.sqrt();
        let d_xhat_direct = vecn::sub(&w.xhat_guided, &u.xhat_guided);
        let uncond_shift: Vec<f64> = u
            .eps_null
            .iter()
            .zip(&w.eps_null)
            .map(|(eu, ew)| rho_w * (eu - ew))
            .collect();
        let cond_shift: Vec<f64> = if guided_denoising {
            w.xhat_cond
                .iter()
                .zip(&w.xhat_null)
                .map(|(c, n)| s * (c - n))
                .collect()
        } else {
            (0..u.x.len())
                .map(|d| {
                    let shift_u = u.eps_cond[d] - u.eps_null[d];
                    let shift_w = w.eps_cond[d] - w.eps_null[d];
                    s * rho_w * (shift_u - shift_w)
                })
                .collect()
        };
        let recon = vecn::add(&uncond_shift, &cond_shift);
        let residual_norm = vecn::dist(&d_xhat_direct, &recon);
        out.push(DriftRecord {
            t: w.t,
            d_xhat_direct,
            uncond_shift,
            cond_shift,
            residual_norm,
        });
    }
    Ok(out)
}

/// Distance from the nearest component mean in units of the component
/// standard deviation: `min_k || x - mu_k || / s`. Zero on a mean, around
/// one at typical prior samples, large off the prior's support.
pub fn manifold_proxy(x: &[f64], model: &GaussianMixture) -> Result<f64> {
    vecn::check_finite(x, "proxy state")?;
    if x.len() != model.dim() {
        return Err(Error::Parameter(format!(
            "state has dimension {} but the model has {}",
            x.len(),
            model.dim()
        )));
    }
    let best = model
        .means()
        .iter()
        .map(|mu| vecn::dist(x, mu))
        .fold(f64::INFINITY, f64::min);
    Ok(best / model.component_std())
}

/// Index of the component mean nearest to `x`.
pub fn nearest_component(x: &[f64], model: &GaussianMixture) -> Result<usize> {
    if x.len() != model.dim() {
        return Err(Error::Parameter(format!(
            "state has dimension {} but the model has {}",
            x.len(),
            model.dim()
        )));
    }
    Ok(model
        .means()
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            vecn::dist(a, x)
                .partial_cmp(&vecn::dist(b, x))
                .expect("distances are finite")
        })
        .map(|(k, _)| k)
        .expect("mixtures have at least one component"))
}

/// Nearest-component histogram and its Shannon entropy over a batch of
/// samples.
pub fn mode_coverage(samples: &[Vec<f64>], model: &GaussianMixture) -> Result<ModeCoverage> {
    if samples.is_empty() {
        return Err(Error::Parameter("mode coverage needs at least one sample".into()));
    }
    let mut counts = vec![0usize; model.num_components()];
    for x in samples {
        counts[nearest_component(x, model)?] += 1;
    }
    let n = samples.len() as f64;
    let frequencies: Vec<f64> = counts.iter().map(|c| *c as f64 / n).collect();
    let entropy = -frequencies
        .iter()
        .filter(|f| **f > 0.0)
        .map(|f| f * f.ln())
        .sum::<f64>();
    Ok(ModeCoverage {
        frequencies,
        entropy,
    })
}

/// Entropy of the model's own component weights, the reference value for
/// well-calibrated unconditional coverage.
pub fn weight_entropy(model: &GaussianMixture) -> f64 {
    -model
        .weights()
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RunKey, StreamRng};
    use crate::schedule::{GridDirection, TimestepGrid};
    use crate::solver::{sample, SolverSpec};

    fn model() -> GaussianMixture {
        GaussianMixture::default_ring8()
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default_vp_linear()
    }

    fn run(guidance: GuidanceMode, cond: Condition, seed: u64, nfe: usize) -> Trajectory {
        sample(
            &model(),
            &schedule(),
            &TimestepGrid::uniform(1000, nfe, GridDirection::Sampling).unwrap(),
            &guidance,
            &SolverSpec::new(SolverKind::Ddim),
            &cond,
            RunKey::new(seed, 0),
            None,
        )
        .unwrap()
    }

    #[test]
    fn loss_normalization_identity_on_random_inputs() {
        // (1 - a)/a * loss must equal || x - xhat_c(x_t) ||^2 exactly.
        let m = model();
        let s = schedule();
        let mut rng = StreamRng::from_key(31, 0, 0);
        for trial in 0..20 {
            let t = 1 + (rng.next_u64() % 1000) as usize;
            let x: Vec<f64> = (0..2).map(|_| 3.0 * (rng.next_uniform() - 0.5)).collect();
            let eps = rng.normal_vec(2);
            let cond = Condition::Class((rng.next_u64() % 8) as usize);
            let loss = sds_loss(&m, &s, &x, &cond, t, &eps).unwrap();
            let a = s.alpha_bar(t).unwrap();
            let x_t: Vec<f64> = x
                .iter()
                .zip(&eps)
                .map(|(xi, ei)| a.sqrt() * xi + (1.0 - a).sqrt() * ei)
                .collect();
            let xhat = m.posterior_mean_at(a, &x_t, &cond).unwrap();
            let d = vecn::sub(&x, &xhat);
            let rhs = vecn::dot(&d, &d);
            let lhs = (1.0 - a) / a * loss;
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (1.0 + rhs),
                "trial {trial}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn loss_vanishes_at_the_noise_fixed_point() {
        // For a single Gaussian the prediction has a fixed point in eps:
        // eps = sqrt(1-a) (x - mu) / (sqrt(a) s^2) makes the model return
        // exactly the noise that was used.
        let sd = 0.6;
        let mu = vec![0.5, -0.25];
        let m = GaussianMixture::new(vec![mu.clone()], None, sd).unwrap();
        let s = schedule();
        let t = 400;
        let a = s.alpha_bar(t).unwrap();
        let x = vec![1.2, 0.3];
        let eps: Vec<f64> = x
            .iter()
            .zip(&mu)
            .map(|(xi, mi)| (1.0 - a).sqrt() * (xi - mi) / (a.sqrt() * sd * sd))
            .collect();
        let loss = sds_loss(&m, &s, &x, &Condition::Null, t, &eps).unwrap();
        assert!(loss <= 1e-20, "loss {loss}");
    }

    #[test]
    fn loss_on_tight_component_matches_closed_form() {
        // x = mu_k with a narrow conditional component: the residual error is
        // exactly (a s^2 / v)^2 ||eps||^2.
        let m = GaussianMixture::ring(8, 1.0, 1e-3).unwrap();
        let s = schedule();
        let k = 3;
        let t = 250;
        let a = s.alpha_bar(t).unwrap();
        let eps = vec![0.7, -1.1];
        let loss = sds_loss(&m, &s, &m.means()[k].clone(), &Condition::Class(k), t, &eps).unwrap();
        let sd = 1e-3;
        let v = a * sd * sd + (1.0 - a);
        let factor = a * sd * sd / v;
        let expected = factor * factor * vecn::dot(&eps, &eps);
        assert!(
            (loss - expected).abs() <= 1e-10 * (1.0 + expected),
            "{loss} vs {expected}"
        );
        assert!(loss < 1e-10);
    }

    #[test]
    fn loss_rejects_time_zero_and_shape_mismatch() {
        let m = model();
        let s = schedule();
        assert!(sds_loss(&m, &s, &[0.0, 0.0], &Condition::Null, 0, &[0.0, 0.0]).is_err());
        assert!(sds_loss(&m, &s, &[0.0, 0.0], &Condition::Null, 1001, &[0.0, 0.0]).is_err());
        assert!(sds_loss(&m, &s, &[0.0, 0.0], &Condition::Null, 5, &[0.0]).is_err());
    }

    #[test]
    fn single_gaussian_trace_decreases_toward_the_end() {
        let m = GaussianMixture::new(vec![vec![0.3, 0.3]], None, 0.5).unwrap();
        let s = schedule();
        let traj = sample(
            &m,
            &s,
            &TimestepGrid::uniform(1000, 50, GridDirection::Sampling).unwrap(),
            &GuidanceMode::Uncond,
            &SolverSpec::new(SolverKind::Ddim),
            &Condition::Null,
            RunKey::new(8, 0),
            None,
        )
        .unwrap();
        let trace = track_loss(&traj, &m, &s, &Condition::Null).unwrap();
        assert_eq!(trace.points.len(), 51);
        assert!(trace.points.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
        // Final fifth of the trace: strictly decreasing to zero at t = 0.
        let tail = &trace.points[40..];
        for pair in tail.windows(2) {
            assert!(pair[1].1 < pair[0].1 || pair[0].1 == 0.0, "{tail:?}");
        }
        assert_eq!(trace.points.last().unwrap().1, 0.0);
    }

    #[test]
    fn zero_scale_traces_are_identical() {
        let cond = Condition::Class(4);
        let a = run(GuidanceMode::Cfg(0.0), cond.clone(), 11, 25);
        let b = run(GuidanceMode::CfgPp(0.0), cond.clone(), 11, 25);
        let m = model();
        let s = schedule();
        let ta = track_loss(&a, &m, &s, &cond).unwrap();
        let tb = track_loss(&b, &m, &s, &cond).unwrap();
        for ((t1, v1), (t2, v2)) in ta.points.iter().zip(&tb.points) {
            assert_eq!(t1, t2);
            assert_eq!(v1.to_bits(), v2.to_bits());
        }
    }

    #[test]
    fn drift_residual_vanishes_for_both_styles_and_uncond() {
        let s = schedule();
        let cases = [
            (GuidanceMode::Uncond, Condition::Null),
            (GuidanceMode::Cfg(7.5), Condition::Class(1)),
            (GuidanceMode::CfgPp(0.6), Condition::Class(1)),
            (GuidanceMode::Cfg(12.5), Condition::Class(6)),
            (GuidanceMode::CfgPp(1.0), Condition::Class(6)),
        ];
        for (mode, cond) in cases {
            let traj = run(mode.clone(), cond.clone(), 17, 50);
            let recs = drift_decomposition(&traj, &s, &cond, &mode).unwrap();
            assert_eq!(recs.len(), 50);
            for r in &recs {
                let bound = 1e-9 * (1.0 + vecn::norm(&r.d_xhat_direct));
                assert!(
                    r.residual_norm <= bound,
                    "{mode} t={}: residual {} vs bound {bound}",
                    r.t,
                    r.residual_norm
                );
            }
        }
    }

    #[test]
    fn zero_scale_drift_has_no_conditional_term() {
        let s = schedule();
        let cond = Condition::Class(2);
        let mode = GuidanceMode::Cfg(0.0);
        let traj = run(mode.clone(), cond.clone(), 23, 25);
        for r in drift_decomposition(&traj, &s, &cond, &mode).unwrap() {
            assert!(r.cond_shift.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn conditional_term_oscillates_for_plain_but_not_guided_denoising() {
        let s = schedule();
        let cond = Condition::Class(3);

        let plain = run(GuidanceMode::Cfg(7.5), cond.clone(), 29, 50);
        let recs = drift_decomposition(&plain, &s, &cond, &GuidanceMode::Cfg(7.5)).unwrap();
        let mut sign_change = false;
        for d in 0..2 {
            let signs: Vec<f64> = recs
                .iter()
                .map(|r| r.cond_shift[d])
                .filter(|v| v.abs() > 1e-12)
                .collect();
            if signs.windows(2).any(|w| w[0] * w[1] < 0.0) {
                sign_change = true;
            }
        }
        assert!(sign_change, "plain-guidance conditional term never changed sign");

        let guided = run(GuidanceMode::CfgPp(0.6), cond.clone(), 29, 50);
        let grecs = drift_decomposition(&guided, &s, &cond, &GuidanceMode::CfgPp(0.6)).unwrap();
        let mut positive = 0;
        for (r, w) in grecs.iter().zip(&guided.records[1..]) {
            // cond_shift = l (xhat_cond - xhat_null) at the arrival state, so
            // its inner product with that direction is l ||.||^2 >= 0.
            let delta = vecn::sub(&w.xhat_cond, &w.xhat_null);
            let ip = vecn::dot(&r.cond_shift, &delta);
            assert!(ip >= 0.0, "t={}: inner product {ip}", r.t);
            let expected = 0.6 * vecn::dot(&delta, &delta);
            assert!((ip - expected).abs() <= 1e-12 * (1.0 + expected));
            if ip > 0.0 {
                positive += 1;
            }
        }
        assert!(positive > 0);
    }

    #[test]
    fn drift_rejects_mismatches() {
        let s = schedule();
        let cond = Condition::Class(0);
        let traj = run(GuidanceMode::Cfg(5.0), cond.clone(), 3, 10);
        // Wrong mode.
        assert!(drift_decomposition(&traj, &s, &cond, &GuidanceMode::Cfg(4.0)).is_err());
        // Wrong condition.
        assert!(drift_decomposition(&traj, &s, &Condition::Class(1), &GuidanceMode::Cfg(5.0)).is_err());
        // Wrong solver.
        let euler = sample(
            &model(),
            &s,
            &TimestepGrid::uniform(1000, 10, GridDirection::Sampling).unwrap(),
            &GuidanceMode::Cfg(5.0),
            &SolverSpec::new(SolverKind::Euler),
            &cond,
            RunKey::new(3, 0),
            None,
        )
        .unwrap();
        assert!(drift_decomposition(&euler, &s, &cond, &GuidanceMode::Cfg(5.0)).is_err());
        // Per-step schedules have no single decomposition scale.
        let sched = GuidanceMode::ScheduledCfg(vec![1.0; 10]);
        let straj = sample(
            &model(),
            &s,
            &TimestepGrid::uniform(1000, 10, GridDirection::Sampling).unwrap(),
            &sched,
            &SolverSpec::new(SolverKind::Ddim),
            &cond,
            RunKey::new(3, 0),
            None,
        )
        .unwrap();
        assert!(drift_decomposition(&straj, &s, &cond, &sched).is_err());
    }

    #[test]
    fn proxy_hand_values() {
        let m = model();
        let k = 5;
        let mu = m.means()[k].clone();
        assert_eq!(manifold_proxy(&mu, &m).unwrap(), 0.0);
        let off: Vec<f64> = vec![mu[0] + m.component_std(), mu[1]];
        assert!((manifold_proxy(&off, &m).unwrap() - 1.0).abs() < 1e-12);
        // The origin is one ring radius from every component: 1 / 0.1 = 10.
        assert!((manifold_proxy(&[0.0, 0.0], &m).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_hand_cases() {
        let m = model();
        let at_zero = vec![m.means()[0].clone(); 5];
        let cov = mode_coverage(&at_zero, &m).unwrap();
        assert_eq!(cov.frequencies[0], 1.0);
        assert_eq!(cov.entropy, 0.0);

        let balanced: Vec<Vec<f64>> = m.means().to_vec();
        let cov = mode_coverage(&balanced, &m).unwrap();
        assert!(cov.frequencies.iter().all(|f| (f - 0.125).abs() < 1e-15));
        assert!((cov.entropy - (8.0_f64).ln()).abs() < 1e-12);
        assert!((weight_entropy(&m) - (8.0_f64).ln()).abs() < 1e-12);

        assert!(mode_coverage(&[], &m).is_err());
    }

    #[test]
    fn unconditional_coverage_entropy_is_calibrated() {
        // Deterministic unconditional runs from 10^4 seeds approximate the
        // prior's component assignment.
        let m = model();
        let s = schedule();
        let grid = TimestepGrid::uniform(1000, 20, GridDirection::Sampling).unwrap();
        let spec = SolverSpec::new(SolverKind::Ddim);
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|run| {
                sample(
                    &m,
                    &s,
                    &grid,
                    &GuidanceMode::Uncond,
                    &spec,
                    &Condition::Null,
                    RunKey::new(1234, run),
                    None,
                )
                .unwrap()
                .final_state()
                .to_vec()
            })
            .collect();
        let cov = mode_coverage(&samples, &m).unwrap();
        assert!(
            (cov.entropy - weight_entropy(&m)).abs() < 0.05,
            "entropy {} vs weight entropy {}",
            cov.entropy,
            weight_entropy(&m)
        );
    }
}
