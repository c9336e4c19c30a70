//! Isotropic Gaussian-mixture score models with closed-form predictions.
//!
//! The data distribution is `p_0(x) = sum_k w_k N(x; mu_k, s^2 I)`. Under the
//! variance-preserving forward process the marginal at signal level
//! `a = alpha_bar_t` stays a mixture:
//!
//! ```text
//! p_t(x) = sum_k w_k N(x; sqrt(a) mu_k, v I),     v = a s^2 + (1 - a)
//! ```
//!
//! so score, noise prediction, posterior mean, and their Jacobians are exact:
//!
//! ```text
//! grad log p_t(x) = (m_bar(x) - x) / v,       m_bar = sum_k r_k(x) sqrt(a) mu_k
//! eps_hat(x)      = -sqrt(1 - a) grad log p_t(x)
//! E[x_0 | x_t]    = sum_k r_k(x) [ mu_k + (sqrt(a) s^2 / v)(x - sqrt(a) mu_k) ]
//! ```
//!
//! with `r_k(x)` the component responsibilities at level `a`. Conditioning
//! restricts the mixture to a component (`Class`) or a subset of components
//! (`Subset`) with renormalized weights; `Null` is the full mixture and shares
//! the subset code path bit for bit.
//!
//! Every prediction is checkable against `finite_diff_eps`, a central
//! finite-difference of the log density that never touches the analytic
//! formulas above.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::schedule::NoiseSchedule;
use crate::vecn;

/// Conditioning information for a prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Condition {
    /// The full mixture (unconditional).
    Null,
    /// A single component.
    Class(usize),
    /// An arbitrary nonempty subset of components.
    Subset(Vec<bool>),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Null => write!(f, "null"),
            Condition::Class(k) => write!(f, "class:{k}"),
            Condition::Subset(mask) => {
                let active: Vec<String> = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| **m)
                    .map(|(i, _)| i.to_string())
                    .collect();
                write!(f, "subset:{}", active.join(","))
            }
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// Parses `"null"`, `"class:K"`, or `"subset:i,j,..."`. The subset form
    /// lists active component indices; the mask length is fixed when the
    /// condition is validated against a model.
    fn from_str(s: &str) -> Result<Self> {
        if s == "null" {
            return Ok(Condition::Null);
        }
        if let Some(k) = s.strip_prefix("class:") {
            let k = k
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad class index in condition {s:?}")))?;
            return Ok(Condition::Class(k));
        }
        if let Some(list) = s.strip_prefix("subset:") {
            let mut indices = Vec::new();
            for part in list.split(',') {
                let i = part.trim().parse::<usize>().map_err(|_| {
                    Error::Config(format!("bad component index {part:?} in condition {s:?}"))
                })?;
                indices.push(i);
            }
            if indices.is_empty() {
                return Err(Error::Config("subset condition lists no components".into()));
            }
            let len = indices.iter().max().unwrap() + 1;
            let mut mask = vec![false; len];
            for i in indices {
                mask[i] = true;
            }
            return Ok(Condition::Subset(mask));
        }
        Err(Error::Config(format!(
            "unknown condition {s:?} (expected \"null\", \"class:K\", or \"subset:i,j,...\")"
        )))
    }
}

/// A noise prediction together with the inputs that produced it.
#[derive(Clone, Debug)]
pub struct EpsPrediction {
    pub eps: Vec<f64>,
    pub t: usize,
    pub condition: Condition,
}

/// Isotropic Gaussian mixture prior.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    weights: Vec<f64>,
    std: f64,
}

impl GaussianMixture {
    /// Validates and builds a mixture. `weights = None` means uniform.
    pub fn new(means: Vec<Vec<f64>>, weights: Option<Vec<f64>>, std: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Parameter("mixture needs at least one component".into()));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Parameter("component means must have dimension >= 1".into()));
        }
        for (k, m) in means.iter().enumerate() {
            if m.len() != dim {
                return Err(Error::Parameter(format!(
                    "component {k} has dimension {} but component 0 has {dim}",
                    m.len()
                )));
            }
            vecn::check_finite(m, "component mean")?;
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != means.len() {
                    return Err(Error::Parameter(format!(
                        "{} weights for {} components",
                        w.len(),
                        means.len()
                    )));
                }
                if !w.iter().all(|x| x.is_finite() && *x > 0.0) {
                    return Err(Error::Parameter(
                        "weights must be finite and strictly positive".into(),
                    ));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Parameter(format!(
                        "weights must sum to 1 within 1e-12, got {total}"
                    )));
                }
                w
            }
            None => vec![1.0 / means.len() as f64; means.len()],
        };
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Parameter(format!(
                "component std must be positive and finite, got {std}"
            )));
        }
        Ok(GaussianMixture { means, weights, std })
    }

    /// `count` components on a circle of the given radius in 2-D, uniform
    /// weights, component `k` at angle `2 pi k / count` from the positive
    /// x-axis.
    pub fn ring(count: usize, radius: f64, std: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Parameter("ring needs at least one component".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Parameter(
                "ring radius must be positive and finite".into(),
            ));
        }
        let means = (0..count)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        Self::new(means, None, std)
    }

    /// The stock model: eight components on the unit circle, std 0.1.
    pub fn default_ring8() -> Self {
        Self::ring(8, 1.0, 0.1).expect("default ring parameters are valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_std(&self) -> f64 {
        self.std
    }

    /// Active-component mask for a condition. `Null` activates every
    /// component and is processed identically to `Subset(all true)`.
    pub fn active_mask(&self, condition: &Condition) -> Result<Vec<bool>> {
        let k_total = self.num_components();
        match condition {
            Condition::Null => Ok(vec![true; k_total]),
            Condition::Class(k) => {
                if *k >= k_total {
                    return Err(Error::Index(format!(
                        "class {k} out of range for {k_total} components"
                    )));
                }
                let mut mask = vec![false; k_total];
                mask[*k] = true;
                Ok(mask)
            }
            Condition::Subset(mask) => {
                if mask.len() != k_total {
                    return Err(Error::Parameter(format!(
                        "subset mask has length {} for {k_total} components",
                        mask.len()
                    )));
                }
                if !mask.iter().any(|m| *m) {
                    return Err(Error::Parameter("subset mask activates no components".into()));
                }
                Ok(mask.clone())
            }
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Parameter(format!(
                "state has dimension {} but the model has {}",
                x.len(),
                self.dim()
            )));
        }
        vecn::check_finite(x, "state")?;
        Ok(())
    }

    fn check_level(alpha_bar: f64) -> Result<()> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::Parameter(format!(
                "signal level must lie in (0, 1], got {alpha_bar}"
            )));
        }
        Ok(())
    }

    /// Marginal variance `v = a s^2 + (1 - a)` at signal level `a`.
    fn marginal_var(&self, alpha_bar: f64) -> f64 {
        alpha_bar * self.std * self.std + (1.0 - alpha_bar)
    }

    /// Per-component log densities `ln w'_k + ln N(x; sqrt(a) mu_k, v I)` for
    /// active components (inactive slots hold NaN), plus the log of the
    /// active-weight sum used for renormalization.
    fn component_log_terms(
        &self,
        alpha_bar: f64,
        x: &[f64],
        mask: &[bool],
    ) -> (Vec<f64>, f64) {
        let v = self.marginal_var(alpha_bar);
        let root_a = alpha_bar.sqrt();
        let d = self.dim() as f64;
        let log_norm = -0.5 * d * (2.0 * std::f64::consts::PI * v).ln();
        let active_weight: f64 = self
            .weights
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(w, _)| w)
            .sum();
        let log_active = active_weight.ln();
        let terms = (0..self.num_components())
            .map(|k| {
                if !mask[k] {
                    return f64::NAN;
                }
                let sq: f64 = x
                    .iter()
                    .zip(&self.means[k])
                    .map(|(xi, mi)| {
                        let d = xi - root_a * mi;
                        d * d
                    })
                    .sum();
                self.weights[k].ln() - log_active + log_norm - sq / (2.0 * v)
            })
            .collect();
        (terms, log_active)
    }

    /// Log marginal density at an explicit signal level.
    pub fn log_density_at(&self, alpha_bar: f64, x: &[f64], condition: &Condition) -> Result<f64> {
        Self::check_level(alpha_bar)?;
        self.check_point(x)?;
        let mask = self.active_mask(condition)?;
        let (terms, _) = self.component_log_terms(alpha_bar, x, &mask);
        let max = terms
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let sum: f64 = terms
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| (t - max).exp())
            .sum();
        Ok(max + sum.ln())
    }

    /// Log marginal density at schedule time `t`.
    pub fn log_density(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: &Condition,
    ) -> Result<f64> {
        self.log_density_at(schedule.alpha_bar(t)?, x, condition)
    }

    /// Component responsibilities at an explicit signal level. Inactive
    /// components get exactly zero. If every component underflows, the
    /// nearest active component (by distance to its noised mean) takes
    /// responsibility one, the correct limit of the softmax.
    pub fn responsibilities_at(
        &self,
        alpha_bar: f64,
        x: &[f64],
        condition: &Condition,
    ) -> Result<Vec<f64>> {
        Self::check_level(alpha_bar)?;
        self.check_point(x)?;
        let mask = self.active_mask(condition)?;
        let (terms, _) = self.component_log_terms(alpha_bar, x, &mask);
        let max = terms
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut r = vec![0.0; self.num_components()];
        if max == f64::NEG_INFINITY {
            let root_a = alpha_bar.sqrt();
            let nearest = (0..self.num_components())
                .filter(|k| mask[*k])
                .min_by(|&a, &b| {
                    let da = dist_to_scaled_mean(x, &self.means[a], root_a);
                    let db = dist_to_scaled_mean(x, &self.means[b], root_a);
                    da.partial_cmp(&db).unwrap()
                })
                .expect("mask has at least one active component");
            r[nearest] = 1.0;
            return Ok(r);
        }
        let mut total = 0.0;
        for k in 0..self.num_components() {
            if mask[k] {
                let e = (terms[k] - max).exp();
                r[k] = e;
                total += e;
            }
        }
        for rk in &mut r {
            *rk /= total;
        }
        Ok(r)
    }

    /// Exact noise prediction `-sqrt(1 - a) grad log p_t(x)` at an explicit
    /// signal level.
    pub fn eps_at(&self, alpha_bar: f64, x: &[f64], condition: &Condition) -> Result<Vec<f64>> {
        let r = self.responsibilities_at(alpha_bar, x, condition)?;
        let v = self.marginal_var(alpha_bar);
        let root_a = alpha_bar.sqrt();
        let root_1ma = (1.0 - alpha_bar).sqrt();
        let mut m_bar = vec![0.0; self.dim()];
        for (k, rk) in r.iter().enumerate() {
            if *rk > 0.0 {
                for (mb, mu) in m_bar.iter_mut().zip(&self.means[k]) {
                    *mb += rk * root_a * mu;
                }
            }
        }
        Ok(x.iter()
            .zip(&m_bar)
            .map(|(xi, mb)| root_1ma * (xi - mb) / v)
            .collect())
    }

    /// Exact noise prediction at schedule time `t`.
    pub fn eps_pred(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: &Condition,
    ) -> Result<EpsPrediction> {
        let eps = self.eps_at(schedule.alpha_bar(t)?, x, condition)?;
        Ok(EpsPrediction {
            eps,
            t,
            condition: condition.clone(),
        })
    }

    /// Exact posterior mean `E[x_0 | x_t]` by direct conjugate algebra (the
    /// responsibility-weighted per-component posterior means). The same
    /// quantity is reachable through the noise prediction, and the two routes
    /// must agree to double-precision round-off.
    pub fn posterior_mean_at(
        &self,
        alpha_bar: f64,
        x: &[f64],
        condition: &Condition,
    ) -> Result<Vec<f64>> {
        let r = self.responsibilities_at(alpha_bar, x, condition)?;
        let v = self.marginal_var(alpha_bar);
        let root_a = alpha_bar.sqrt();
        let shrink = root_a * self.std * self.std / v;
        let mut out = vec![0.0; self.dim()];
        for (k, rk) in r.iter().enumerate() {
            if *rk > 0.0 {
                for (o, (xi, mu)) in out.iter_mut().zip(x.iter().zip(&self.means[k])) {
                    *o += rk * (mu + shrink * (xi - root_a * mu));
                }
            }
        }
        Ok(out)
    }

    /// Posterior mean at schedule time `t`.
    pub fn posterior_mean(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: &Condition,
    ) -> Result<Vec<f64>> {
        self.posterior_mean_at(schedule.alpha_bar(t)?, x, condition)
    }

    /// Jacobian-vector product of the posterior-mean map at an explicit
    /// signal level:
    ///
    /// ```text
    /// J v = (sqrt(a) s^2 / v) u + (sqrt(a)(1-a) / v^2) sum_k r_k (mu_k - mu_bar) <mu_k - mu_bar, u>
    /// ```
    ///
    /// The Jacobian is symmetric, so this also serves as the transposed
    /// product needed by gradient chains.
    pub fn posterior_mean_jvp_at(
        &self,
        alpha_bar: f64,
        x: &[f64],
        condition: &Condition,
        u: &[f64],
    ) -> Result<Vec<f64>> {
        vecn::check_same_len(x, u, "jacobian-vector product")?;
        let r = self.responsibilities_at(alpha_bar, x, condition)?;
        let v = self.marginal_var(alpha_bar);
        let root_a = alpha_bar.sqrt();
        let mut mu_bar = vec![0.0; self.dim()];
        for (k, rk) in r.iter().enumerate() {
            if *rk > 0.0 {
                for (mb, mu) in mu_bar.iter_mut().zip(&self.means[k]) {
                    *mb += rk * mu;
                }
            }
        }
        let mut out = vecn::scale(u, root_a * self.std * self.std / v);
        let coeff = root_a * (1.0 - alpha_bar) / (v * v);
        for (k, rk) in r.iter().enumerate() {
            if *rk > 0.0 {
                let centered = vecn::sub(&self.means[k], &mu_bar);
                let proj = vecn::dot(&centered, u);
                for (o, c) in out.iter_mut().zip(&centered) {
                    *o += coeff * rk * proj * c;
                }
            }
        }
        Ok(out)
    }

    /// Jacobian-vector product at schedule time `t`.
    pub fn posterior_mean_jvp(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: &Condition,
        u: &[f64],
    ) -> Result<Vec<f64>> {
        self.posterior_mean_jvp_at(schedule.alpha_bar(t)?, x, condition, u)
    }

    /// Reference noise prediction by central finite differences of the log
    /// density. Shares no code with `eps_pred` beyond the density itself.
    pub fn finite_diff_eps(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: usize,
        condition: &Condition,
        h: f64,
    ) -> Result<Vec<f64>> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Parameter(format!("step size must be positive, got {h}")));
        }
        let alpha_bar = schedule.alpha_bar(t)?;
        self.check_point(x)?;
        let root_1ma = (1.0 - alpha_bar).sqrt();
        let mut eps = vec![0.0; self.dim()];
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for i in 0..self.dim() {
            xp[i] = x[i] + h;
            xm[i] = x[i] - h;
            let lp = self.log_density_at(alpha_bar, &xp, condition)?;
            let lm = self.log_density_at(alpha_bar, &xm, condition)?;
            eps[i] = -root_1ma * (lp - lm) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        Ok(eps)
    }

    /// Draws a sample from the (conditioned) prior: a component by its
    /// renormalized weight, then `mu_k + s * z`.
    pub fn sample_prior(&self, condition: &Condition, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let mask = self.active_mask(condition)?;
        let total: f64 = self
            .weights
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(w, _)| w)
            .sum();
        let u = rng.next_uniform() * total;
        let mut acc = 0.0;
        let mut chosen = mask.iter().rposition(|m| *m).unwrap();
        for (k, (active, weight)) in mask.iter().zip(&self.weights).enumerate() {
            if *active {
                acc += weight;
                if u < acc {
                    chosen = k;
                    break;
                }
            }
        }
        let z = rng.normal_vec(self.dim());
        Ok(vecn::add_scaled(&self.means[chosen], self.std, &z))
    }
}

fn dist_to_scaled_mean(x: &[f64], mu: &[f64], root_a: f64) -> f64 {
    x.iter()
        .zip(mu)
        .map(|(xi, mi)| {
            let d = xi - root_a * mi;
            d * d
        })
        .sum()
}
