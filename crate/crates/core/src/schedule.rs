//! Noise schedules and timestep grids.
//!
//! A schedule stores the cumulative signal level `alpha_bar[t]` for
//! `t = 0..=train_steps`, with `alpha_bar[0] = 1` (clean data) and strictly
//! decreasing values thereafter. Two constructions are provided:
//!
//! ```text
//! vp-linear:  beta_t linearly spaced on [beta_min, beta_max],
//!             alpha_bar_t = prod_{s<=t} (1 - beta_s)
//! vp-cosine:  alpha_bar_t = f(t)/f(0),  f(t) = cos^2((t/T + 0.008)/1.008 * pi/2),
//!             tail tapered geometrically so alpha_bar_T = 1e-5 exactly while
//!             staying strictly decreasing
//! ```
//!
//! The variance-exploding reparameterization used by the Euler-family solvers
//! is `sigma_ve(t) = sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t)`, zero at `t=0`
//! and strictly increasing; the exponential-integrator solvers work on the
//! time variable `solver_time(t) = -ln sigma_ve(t)` (infinite at `t=0`, which
//! the terminal step handles explicitly).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Floor applied to the cosine schedule's signal level.
const COSINE_ALPHA_FLOOR: f64 = 1e-5;

/// Schedule family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    VpLinear,
    VpCosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::VpLinear => write!(f, "vp-linear"),
            ScheduleKind::VpCosine => write!(f, "vp-cosine"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vp-linear" => Ok(ScheduleKind::VpLinear),
            "vp-cosine" => Ok(ScheduleKind::VpCosine),
            other => Err(Error::Config(format!(
                "unknown schedule kind {other:?} (expected \"vp-linear\" or \"vp-cosine\")"
            ))),
        }
    }
}

/// A discrete noise schedule over `t = 0..=train_steps`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule. `beta_range` is required for `VpLinear` and ignored
    /// by `VpCosine`.
    pub fn build(
        kind: ScheduleKind,
        train_steps: usize,
        beta_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::Parameter(
                "train_steps must be at least 1".to_string(),
            ));
        }
        let alpha_bar = match kind {
            ScheduleKind::VpLinear => {
                let (beta_min, beta_max) = beta_range.ok_or_else(|| {
                    Error::Parameter("vp-linear requires a beta range".to_string())
                })?;
                if !(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max) {
                    return Err(Error::Parameter(format!(
                        "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
                    )));
                }
                linear_alpha_bar(train_steps, beta_min, beta_max)
            }
            ScheduleKind::VpCosine => cosine_alpha_bar(train_steps),
        };
        let schedule = NoiseSchedule { kind, alpha_bar };
        schedule.check_invariants()?;
        Ok(schedule)
    }

    /// Linear-beta schedule.
    pub fn vp_linear(train_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::build(ScheduleKind::VpLinear, train_steps, Some((beta_min, beta_max)))
    }

    /// Cosine signal-level schedule.
    pub fn vp_cosine(train_steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::VpCosine, train_steps, None)
    }

    /// The stock configuration: vp-linear, 1000 steps, beta in [1e-4, 0.02].
    pub fn default_vp_linear() -> Self {
        Self::vp_linear(1000, 1e-4, 0.02).expect("default schedule parameters are valid")
    }

    fn check_invariants(&self) -> Result<()> {
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::Invariant(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                self.alpha_bar[0]
            )));
        }
        for t in 1..self.alpha_bar.len() {
            let a = self.alpha_bar[t];
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Invariant(format!(
                    "alpha_bar[{t}] = {a} outside (0, 1]"
                )));
            }
            if a >= self.alpha_bar[t - 1] {
                return Err(Error::Invariant(format!(
                    "alpha_bar must decrease strictly; alpha_bar[{t}] = {a} >= alpha_bar[{}] = {}",
                    t - 1,
                    self.alpha_bar[t - 1]
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of training steps `T`; valid times are `0..=T`.
    pub fn train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t >= self.alpha_bar.len() {
            return Err(Error::Index(format!(
                "time {t} exceeds train_steps {}",
                self.train_steps()
            )));
        }
        Ok(())
    }

    /// Cumulative signal level at time `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.alpha_bar[t])
    }

    /// Variance-exploding noise scale `sqrt(1 - alpha_bar) / sqrt(alpha_bar)`.
    pub fn sigma_ve(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(((1.0 - a) / a).sqrt())
    }

    /// Exponential-integrator time `-ln sigma_ve(t)`; positive infinity at
    /// `t = 0` where the noise scale vanishes.
    pub fn solver_time(&self, t: usize) -> Result<f64> {
        let sigma = self.sigma_ve(t)?;
        Ok(-sigma.ln())
    }
}

fn linear_alpha_bar(train_steps: usize, beta_min: f64, beta_max: f64) -> Vec<f64> {
    let mut alpha_bar = Vec::with_capacity(train_steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for i in 0..train_steps {
        let frac = if train_steps == 1 {
            0.0
        } else {
            i as f64 / (train_steps - 1) as f64
        };
        let beta = beta_min + (beta_max - beta_min) * frac;
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    alpha_bar
}

fn cosine_alpha_bar(train_steps: usize) -> Vec<f64> {
    let t_total = train_steps as f64;
    let f = |t: f64| {
        let arg = (t / t_total + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut alpha_bar = vec![1.0];
    for t in 1..=train_steps {
        alpha_bar.push(f(t as f64) / f0);
    }
    // The raw curve dives far below the floor near t = T. A hard clamp would
    // flatten the tail and break strict monotonicity, so once the raw value
    // reaches the floor the remaining steps decay geometrically, landing on
    // the floor exactly at t = T.
    if let Some(t_star) = (1..=train_steps).find(|&t| alpha_bar[t] <= COSINE_ALPHA_FLOOR) {
        let a = alpha_bar[t_star - 1];
        let span = (train_steps - t_star + 1) as f64;
        let ratio = COSINE_ALPHA_FLOOR / a;
        for (k, item) in alpha_bar[t_star..].iter_mut().enumerate() {
            *item = a * ratio.powf((k + 1) as f64 / span);
        }
        alpha_bar[train_steps] = COSINE_ALPHA_FLOOR;
    }
    alpha_bar
}

/// Direction of a timestep grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridDirection {
    /// Noise to data: times decrease and end at 0.
    Sampling,
    /// Data to noise: times increase and start at 0.
    Inversion,
}

/// A strictly monotone sequence of schedule times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepGrid {
    indices: Vec<usize>,
    direction: GridDirection,
}

impl TimestepGrid {
    /// Validates and wraps an explicit index sequence. Sampling grids must
    /// decrease strictly and end at 0; inversion grids must increase strictly
    /// and start at 0.
    pub fn new(indices: Vec<usize>, direction: GridDirection) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::Parameter(
                "a grid needs at least two timesteps".to_string(),
            ));
        }
        match direction {
            GridDirection::Sampling => {
                if *indices.last().unwrap() != 0 {
                    return Err(Error::Parameter("sampling grids must end at t = 0".to_string()));
                }
                for w in indices.windows(2) {
                    if w[1] >= w[0] {
                        return Err(Error::Parameter(format!(
                            "sampling grid times must decrease strictly, got {} then {}",
                            w[0], w[1]
                        )));
                    }
                }
            }
            GridDirection::Inversion => {
                if indices[0] != 0 {
                    return Err(Error::Parameter(
                        "inversion grids must start at t = 0".to_string(),
                    ));
                }
                for w in indices.windows(2) {
                    if w[1] <= w[0] {
                        return Err(Error::Parameter(format!(
                            "inversion grid times must increase strictly, got {} then {}",
                            w[0], w[1]
                        )));
                    }
                }
            }
        }
        Ok(TimestepGrid { indices, direction })
    }

    /// Uniform grid with `nfe` intervals over `[0, train_steps]`, the `k`-th
    /// index being `round(train_steps * k / nfe)`.
    pub fn uniform(train_steps: usize, nfe: usize, direction: GridDirection) -> Result<Self> {
        if nfe == 0 {
            return Err(Error::Parameter("nfe must be at least 1".to_string()));
        }
        if nfe > train_steps {
            return Err(Error::Parameter(format!(
                "nfe {nfe} exceeds train_steps {train_steps}; grid indices would repeat"
            )));
        }
        let mut indices: Vec<usize> = (0..=nfe)
            .map(|k| ((train_steps as f64) * (k as f64) / (nfe as f64)).round() as usize)
            .collect();
        if direction == GridDirection::Sampling {
            indices.reverse();
        }
        Self::new(indices, direction)
    }

    pub fn direction(&self) -> GridDirection {
        self.direction
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of solver steps (intervals).
    pub fn nfe(&self) -> usize {
        self.indices.len() - 1
    }

    /// Consecutive `(from, to)` time pairs in traversal order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices.windows(2).map(|w| (w[0], w[1]))
    }

    /// The same grid traversed in the opposite direction.
    pub fn reversed(&self) -> TimestepGrid {
        let mut indices = self.indices.clone();
        indices.reverse();
        let direction = match self.direction {
            GridDirection::Sampling => GridDirection::Inversion,
            GridDirection::Inversion => GridDirection::Sampling,
        };
        TimestepGrid { indices, direction }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_linear_schedule() {
        // T = 1, beta = 0.1 everywhere: alpha_bar_1 = 1 - 0.1 = 0.9.
        let s = NoiseSchedule::vp_linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.train_steps(), 1);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn default_linear_matches_log_accumulation_oracle() {
        // Independent oracle: accumulate ln(1 - beta) and exponentiate, which
        // never multiplies small numbers directly.
        let s = NoiseSchedule::default_vp_linear();
        let t_total = 1000;
        let mut log_acc = 0.0;
        for i in 0..t_total {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / ((t_total - 1) as f64);
            log_acc += (1.0 - beta).ln();
            let direct = s.alpha_bar(i + 1).unwrap();
            let via_logs = log_acc.exp();
            assert!(
                (direct - via_logs).abs() <= 1e-12 * via_logs.max(1e-300),
                "t={} direct={} logs={}",
                i + 1,
                direct,
                via_logs
            );
        }
        let terminal = s.alpha_bar(1000).unwrap();
        assert!(terminal < 1e-3, "terminal signal level {terminal}");
        assert!(terminal > 0.0);
    }

    #[test]
    fn cosine_schedule_monotone_with_exact_floor() {
        let s = NoiseSchedule::vp_cosine(1000).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 1..=1000 {
            let a = s.alpha_bar(t).unwrap();
            assert!(a < s.alpha_bar(t - 1).unwrap());
            assert!(a >= COSINE_ALPHA_FLOOR);
        }
        assert_eq!(s.alpha_bar(1000).unwrap(), COSINE_ALPHA_FLOOR);
        assert!(s.alpha_bar(1000).unwrap() < 1e-3);
    }

    #[test]
    fn cosine_schedule_taper_only_touches_the_tail() {
        // The raw curve reaches cos^2(pi/2) ~ 0 at t = T for every T, so the
        // taper always rewrites the tail; interior values must match the raw
        // cosine expression exactly and the terminal value is the floor.
        let s = NoiseSchedule::vp_cosine(4).unwrap();
        let f = |t: f64| {
            let arg = (t / 4.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        for t in 1..=3 {
            let expected = f(t as f64) / f(0.0);
            assert!(expected > COSINE_ALPHA_FLOOR);
            assert!((s.alpha_bar(t).unwrap() - expected).abs() < 1e-15);
        }
        assert_eq!(s.alpha_bar(4).unwrap(), COSINE_ALPHA_FLOOR);
    }

    #[test]
    fn sigma_examples() {
        // alpha_bar = 1 -> sigma 0; 0.5 -> 1; 0.25 -> sqrt(3).
        let half = NoiseSchedule::vp_linear(1, 0.5, 0.5).unwrap();
        assert_eq!(half.sigma_ve(0).unwrap(), 0.0);
        assert!((half.sigma_ve(1).unwrap() - 1.0).abs() < 1e-15);
        let quarter = NoiseSchedule::vp_linear(1, 0.75, 0.75).unwrap();
        assert!((quarter.sigma_ve(1).unwrap() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sigma_strictly_increasing_and_alpha_recoverable() {
        for s in [
            NoiseSchedule::default_vp_linear(),
            NoiseSchedule::vp_cosine(500).unwrap(),
        ] {
            let mut prev = -1.0;
            for t in 0..=s.train_steps() {
                let sigma = s.sigma_ve(t).unwrap();
                assert!(sigma > prev, "sigma not increasing at t={t}");
                prev = sigma;
                // alpha_bar = 1 / (1 + sigma^2) inverts the reparameterization.
                let a = s.alpha_bar(t).unwrap();
                let back = 1.0 / (1.0 + sigma * sigma);
                assert!((a - back).abs() <= 1e-12 * a.max(1e-300), "t={t}: {a} vs {back}");
            }
        }
    }

    #[test]
    fn solver_time_is_negative_log_sigma() {
        let s = NoiseSchedule::default_vp_linear();
        assert_eq!(s.solver_time(0).unwrap(), f64::INFINITY);
        for t in [1usize, 10, 500, 1000] {
            let tau = s.solver_time(t).unwrap();
            assert!((tau.exp() - 1.0 / s.sigma_ve(t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_parameter_errors() {
        assert!(NoiseSchedule::vp_linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::vp_linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::vp_linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::vp_linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::VpLinear, 10, None).is_err());
        assert!(NoiseSchedule::vp_cosine(0).is_err());
    }

    #[test]
    fn uniform_grid_examples() {
        // T = 1000, nfe = 50: multiples of 20.
        let g = TimestepGrid::uniform(1000, 50, GridDirection::Inversion).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g.indices()[0], 0);
        assert_eq!(g.indices()[1], 20);
        assert_eq!(*g.indices().last().unwrap(), 1000);

        let s = TimestepGrid::uniform(1000, 50, GridDirection::Sampling).unwrap();
        assert_eq!(s.indices()[0], 1000);
        assert_eq!(*s.indices().last().unwrap(), 0);

        // Rounding case: T = 10, nfe = 3 -> 0, 3, 7, 10.
        let r = TimestepGrid::uniform(10, 3, GridDirection::Inversion).unwrap();
        assert_eq!(r.indices(), &[0, 3, 7, 10]);

        // nfe = 1: the two endpoints.
        let one = TimestepGrid::uniform(1000, 1, GridDirection::Sampling).unwrap();
        assert_eq!(one.indices(), &[1000, 0]);

        // nfe = T: every integer time.
        let full = TimestepGrid::uniform(100, 100, GridDirection::Inversion).unwrap();
        assert_eq!(full.len(), 101);
    }

    #[test]
    fn uniform_grid_errors() {
        assert!(TimestepGrid::uniform(1000, 0, GridDirection::Sampling).is_err());
        assert!(TimestepGrid::uniform(10, 11, GridDirection::Sampling).is_err());
    }

    #[test]
    fn grid_direction_rules() {
        assert!(TimestepGrid::new(vec![10, 5, 0], GridDirection::Sampling).is_ok());
        assert!(TimestepGrid::new(vec![10, 5, 1], GridDirection::Sampling).is_err());
        assert!(TimestepGrid::new(vec![10, 10, 0], GridDirection::Sampling).is_err());
        assert!(TimestepGrid::new(vec![0, 5, 10], GridDirection::Inversion).is_ok());
        assert!(TimestepGrid::new(vec![1, 5, 10], GridDirection::Inversion).is_err());
        assert!(TimestepGrid::new(vec![5], GridDirection::Sampling).is_err());
    }

    #[test]
    fn reversed_grid_mirrors() {
        let g = TimestepGrid::uniform(1000, 50, GridDirection::Inversion).unwrap();
        let r = g.reversed();
        assert_eq!(r.direction(), GridDirection::Sampling);
        assert_eq!(r.indices()[0], 1000);
        assert_eq!(*r.indices().last().unwrap(), 0);
        assert_eq!(r.reversed(), g);
        // Mirror property: the reversed inversion grid is the uniform sampling grid.
        let s = TimestepGrid::uniform(1000, 50, GridDirection::Sampling).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn out_of_range_time_errors() {
        let s = NoiseSchedule::vp_linear(10, 0.1, 0.2).unwrap();
        assert!(s.alpha_bar(11).is_err());
        assert!(s.sigma_ve(11).is_err());
    }
}
