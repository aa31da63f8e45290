//! Point estimators: method of moments, the maximum-likelihood fixed-point
//! iteration, and posterior modes under the MDI and Jeffreys priors.
//!
//! All log posteriors drop their additive constant. Only differences of log
//! posteriors are ever consumed (gradient ascent, Metropolis–Hastings).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_core::{CompositionMatrix, DirichletParams};
use crate::special_fns::raw;

/// Lower bound applied to every parameter during gradient ascent.
pub const MIN_PARAM: f64 = 1e-8;

/// Concentration above which the ML iteration is treated as diverging.
pub const K0_OVERFLOW: f64 = 1e12;

/// Column sums and means of log x_ij; the only data-dependent part of the
/// likelihood.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficientStats {
    n: usize,
    mean_log: Vec<f64>,
    sum_log: Vec<f64>,
}

impl SufficientStats {
    pub fn from_data(data: &CompositionMatrix) -> Self {
        let p = data.dim();
        let mut sum_log = vec![0.0; p];
        for row in data.rows() {
            for (s, x) in sum_log.iter_mut().zip(row) {
                *s += x.ln();
            }
        }
        let n = data.n();
        let mean_log = sum_log.iter().map(|s| s / n as f64).collect();
        SufficientStats { n, mean_log, sum_log }
    }

    /// Statistics of an empty sample; posteriors built on it reduce to priors.
    pub fn empty(p: usize) -> Self {
        SufficientStats { n: 0, mean_log: vec![0.0; p], sum_log: vec![0.0; p] }
    }

    /// Builds statistics from a count and per-component mean logs.
    pub fn from_mean_log(n: usize, mean_log: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("use SufficientStats::empty for n = 0"));
        }
        if let Some(v) = mean_log.iter().find(|v| !(v.is_finite() && **v < 0.0)) {
            return Err(Error::domain(format!("mean log {v} must be finite and negative")));
        }
        let sum_log = mean_log.iter().map(|m| m * n as f64).collect();
        Ok(SufficientStats { n, mean_log, sum_log })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.mean_log.len()
    }

    pub fn mean_log(&self) -> &[f64] {
        &self.mean_log
    }

    pub fn sum_log(&self) -> &[f64] {
        &self.sum_log
    }

    pub fn log_likelihood(&self, params: &DirichletParams) -> f64 {
        log_likelihood_raw(params.k(), self)
    }
}

/// Which criterion a fit maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Ml,
    MdiMode,
    JeffreysMode,
}

/// Objective prior on the Dirichlet parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prior {
    Mdi,
    Jeffreys,
}

impl Objective {
    pub fn prior(self) -> Option<Prior> {
        match self {
            Objective::Ml => None,
            Objective::MdiMode => Some(Prior::Mdi),
            Objective::JeffreysMode => Some(Prior::Jeffreys),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSettings {
    pub max_iterations: usize,
    /// Sup-norm threshold: on the gradient for modes, on the parameter change
    /// for the ML fixed point.
    pub tolerance: f64,
    /// Initial ascent step; `None` means 1e-3 / n.
    pub step_size: Option<f64>,
    pub objective: Objective,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings { max_iterations: 100_000, tolerance: 1e-8, step_size: None, objective: Objective::Ml }
    }
}

impl FitSettings {
    pub fn with_objective(objective: Objective) -> Self {
        FitSettings { objective, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::domain("fit settings need tolerance > 0 and max_iterations ≥ 1"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::domain(format!("step size {s} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub estimate: DirichletParams,
    pub objective: Objective,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

fn log_normalizer(k: &[f64], k0: f64) -> f64 {
    raw::log_gamma(k0) - k.iter().map(|&v| raw::log_gamma(v)).sum::<f64>()
}

/// Rounding noise of the objective at `k`: the result is a small difference
/// of log-gamma terms that can be several orders of magnitude larger.
fn objective_noise(k: &[f64], stats: &SufficientStats) -> f64 {
    let k0: f64 = k.iter().sum();
    let gammas = raw::log_gamma(k0).abs() + k.iter().map(|&v| raw::log_gamma(v).abs()).sum::<f64>();
    let kernel: f64 = k.iter().zip(&stats.sum_log).map(|(k, s)| ((k - 1.0) * s).abs()).sum();
    256.0 * f64::EPSILON * ((stats.n as f64 + 1.0) * gammas + kernel + 1.0)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn log_likelihood_raw(k: &[f64], stats: &SufficientStats) -> f64 {
    let k0: f64 = k.iter().sum();
    let kernel: f64 = k.iter().zip(&stats.sum_log).map(|(k, s)| (k - 1.0) * s).sum();
    stats.n as f64 * log_normalizer(k, k0) + kernel
}

fn log_likelihood_gradient_raw(k: &[f64], stats: &SufficientStats) -> Vec<f64> {
    let n = stats.n as f64;
    let psi0 = raw::digamma(k.iter().sum());
    k.iter().zip(&stats.sum_log).map(|(&k, s)| n * (psi0 - raw::digamma(k)) + s).collect()
}

/// Gradient of the Type I log-likelihood.
pub fn log_likelihood_gradient(params: &DirichletParams, stats: &SufficientStats) -> Vec<f64> {
    log_likelihood_gradient_raw(params.k(), stats)
}

/// log of the MDI prior: the expected log density,
/// log Γ(k₀) − Σ log Γ(k_j) + Σ (k_j − 1)(ψ(k_j) − ψ(k₀)).
pub fn mdi_log_prior(params: &DirichletParams) -> f64 {
    mdi_log_posterior_raw(params.k(), &SufficientStats::empty(params.dim()))
}

pub(crate) fn mdi_log_posterior_raw(k: &[f64], stats: &SufficientStats) -> f64 {
    let k0: f64 = k.iter().sum();
    let psi0 = raw::digamma(k0);
    let kernel: f64 = k
        .iter()
        .zip(&stats.sum_log)
        .map(|(&k, s)| (k - 1.0) * (raw::digamma(k) - psi0 + s))
        .sum();
    (stats.n as f64 + 1.0) * log_normalizer(k, k0) + kernel
}

pub fn mdi_log_posterior(params: &DirichletParams, stats: &SufficientStats) -> f64 {
    mdi_log_posterior_raw(params.k(), stats)
}

pub(crate) fn mdi_gradient_raw(k: &[f64], stats: &SufficientStats) -> Vec<f64> {
    let p = k.len() as f64;
    let k0: f64 = k.iter().sum();
    let n = stats.n as f64;
    let (psi0, tri0) = (raw::digamma(k0), raw::trigamma(k0));
    k.iter()
        .zip(&stats.sum_log)
        .map(|(&k, s)| n * (psi0 - raw::digamma(k)) + s + (k - 1.0) * raw::trigamma(k) - tri0 * (k0 - p))
        .collect()
}

pub fn mdi_gradient(params: &DirichletParams, stats: &SufficientStats) -> Vec<f64> {
    mdi_gradient_raw(params.k(), stats)
}

/// 1 − ψ′(k₀) Σ 1/ψ′(k_l); the determinant of the information matrix divided
/// by Π ψ′(k_l).
fn jeffreys_bracket(k: &[f64]) -> (f64, f64) {
    let k0: f64 = k.iter().sum();
    let inv_sum: f64 = k.iter().map(|&v| 1.0 / raw::trigamma(v)).sum();
    (1.0 - raw::trigamma(k0) * inv_sum, inv_sum)
}

/// Log Jeffreys prior, or −∞ outside the numerically positive-definite region.
pub(crate) fn jeffreys_log_prior_raw(k: &[f64]) -> f64 {
    let (bracket, _) = jeffreys_bracket(k);
    if !(bracket > 0.0) {
        return f64::NEG_INFINITY;
    }
    0.5 * k.iter().map(|&v| raw::trigamma(v).ln()).sum::<f64>() + 0.5 * bracket.ln()
}

/// 0.5 Σ log ψ′(k_j) + 0.5 log[1 − ψ′(k₀) Σ 1/ψ′(k_j)].
pub fn jeffreys_log_prior(params: &DirichletParams) -> Result<f64> {
    let v = jeffreys_log_prior_raw(params.k());
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::domain(format!(
            "Jeffreys determinant is not positive at k0 = {} (floating-point limit)",
            params.k0()
        )))
    }
}

pub(crate) fn jeffreys_log_posterior_raw(k: &[f64], stats: &SufficientStats) -> f64 {
    jeffreys_log_prior_raw(k) + log_likelihood_raw(k, stats)
}

pub fn jeffreys_log_posterior(params: &DirichletParams, stats: &SufficientStats) -> Result<f64> {
    Ok(jeffreys_log_prior(params)? + stats.log_likelihood(params))
}

pub(crate) fn jeffreys_gradient_raw(k: &[f64], stats: &SufficientStats) -> Option<Vec<f64>> {
    let k0: f64 = k.iter().sum();
    let (bracket, inv_sum) = jeffreys_bracket(k);
    if !(bracket > 0.0) {
        return None;
    }
    let (tri0, tetra0) = (raw::trigamma(k0), raw::tetragamma(k0));
    let mut grad = log_likelihood_gradient_raw(k, stats);
    for (g, &kj) in grad.iter_mut().zip(k) {
        let (tri, tetra) = (raw::trigamma(kj), raw::tetragamma(kj));
        *g += 0.5 * tetra / tri - 0.5 * (tetra0 * inv_sum - tri0 * tetra / (tri * tri)) / bracket;
    }
    Some(grad)
}

pub fn jeffreys_gradient(params: &DirichletParams, stats: &SufficientStats) -> Result<Vec<f64>> {
    jeffreys_gradient_raw(params.k(), stats).ok_or_else(|| {
        Error::domain(format!("Jeffreys determinant is not positive at k0 = {}", params.k0()))
    })
}

/// Log posterior (or log-likelihood for `None`) on a raw parameter slice.
/// Non-positive or infeasible parameters give −∞.
pub fn log_target(prior: Option<Prior>, k: &[f64], stats: &SufficientStats) -> f64 {
    if k.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return f64::NEG_INFINITY;
    }
    let v = match prior {
        None => log_likelihood_raw(k, stats),
        Some(Prior::Mdi) => mdi_log_posterior_raw(k, stats),
        Some(Prior::Jeffreys) => jeffreys_log_posterior_raw(k, stats),
    };
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

fn target_gradient(prior: Option<Prior>, k: &[f64], stats: &SufficientStats) -> Option<Vec<f64>> {
    match prior {
        None => Some(log_likelihood_gradient_raw(k, stats)),
        Some(Prior::Mdi) => Some(mdi_gradient_raw(k, stats)),
        Some(Prior::Jeffreys) => jeffreys_gradient_raw(k, stats),
    }
}

/// Method-of-moments estimate k_j = m_j (m₁ − q₁)/(q₁ − m₁²), where m_j is
/// the column mean and q₁ the mean square of column 1.
///
/// Component 1 alone fixes k₀, so the estimate is not permutation-symmetric.
pub fn method_of_moments(data: &CompositionMatrix) -> Result<DirichletParams> {
    let n = data.n();
    if n < 2 {
        return Err(Error::estimation("method of moments needs at least 2 observations"));
    }
    let p = data.dim();
    let mut means = vec![0.0; p];
    for row in data.rows() {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let m1 = means[0];
    // q₁ − m₁², computed centered
    let var = data.rows().map(|r| (r[0] - m1).powi(2)).sum::<f64>() / n as f64;
    if !(var > 1e-15 * m1 * m1) {
        return Err(Error::estimation("first component has zero sample variance"));
    }
    // m₁ − q₁ = m₁(1 − m₁) − var
    let k0 = (m1 * (1.0 - m1) - var) / var;
    if !(k0 > 0.0 && k0.is_finite()) {
        return Err(Error::estimation(format!(
            "moment equations give a non-positive concentration ({k0}); data are over-dispersed"
        )));
    }
    DirichletParams::new(means.iter().map(|m| m * k0).collect())
        .map_err(|e| Error::estimation(format!("moment estimate is invalid: {e}")))
}

/// Fixed-point iteration k_j ← ψ⁻¹(ψ(k₀) + mean_log_j), all j at once.
pub fn mle_fixed_point(stats: &SufficientStats, init: &DirichletParams, settings: &FitSettings) -> Result<FitReport> {
    settings.validate()?;
    if stats.n == 0 {
        return Err(Error::estimation("maximum likelihood needs at least one observation"));
    }
    if stats.dim() != init.dim() {
        return Err(Error::Dimension { expected: stats.dim(), found: init.dim() });
    }
    let mut k = init.k().to_vec();
    let mut next = vec![0.0; k.len()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        iterations += 1;
        let psi0 = raw::digamma(k.iter().sum());
        for (nk, m) in next.iter_mut().zip(&stats.mean_log) {
            *nk = raw::inv_digamma(psi0 + m);
        }
        let k0: f64 = next.iter().sum();
        if !(k0 < K0_OVERFLOW) {
            return Err(Error::estimation(format!(
                "fixed-point iteration diverged (k0 = {k0:e}); the data are close to degenerate"
            )));
        }
        let change = k.iter().zip(&next).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut k, &mut next);
        if change <= settings.tolerance {
            converged = true;
            break;
        }
    }
    let gradient_norm = sup_norm(&log_likelihood_gradient_raw(&k, stats));
    let estimate = DirichletParams::new(k)?;
    Ok(FitReport {
        objective_value: stats.log_likelihood(&estimate),
        estimate,
        objective: Objective::Ml,
        iterations,
        converged,
        gradient_norm,
    })
}

/// Gradient ascent on a log posterior (or on the bare likelihood when
/// `settings.objective` is [`Objective::Ml`]).
///
/// Steps are projected onto k_j ≥ [`MIN_PARAM`]. A step that lowers the
/// objective or leaves the feasible region is halved and retried; an accepted
/// step grows the step size by 10%. Stops once the gradient sup-norm is at
/// most `settings.tolerance`.
pub fn posterior_mode(stats: &SufficientStats, settings: &FitSettings, init: &DirichletParams) -> Result<FitReport> {
    settings.validate()?;
    if stats.dim() != init.dim() {
        return Err(Error::Dimension { expected: stats.dim(), found: init.dim() });
    }
    let prior = settings.objective.prior();
    let mut k = init.k().to_vec();
    let mut value = log_target(prior, &k, stats);
    if !value.is_finite() {
        return Err(Error::domain(format!("initial parameters {k:?} are outside the posterior support")));
    }
    let mut step = settings.step_size.unwrap_or(1e-3 / stats.n.max(1) as f64);
    let mut candidate = vec![0.0; k.len()];
    let mut grad = target_gradient(prior, &k, stats).expect("finite objective implies a gradient");
    let mut gradient_norm = sup_norm(&grad);
    let mut converged = gradient_norm <= settings.tolerance;
    let mut iterations = 0;
    while !converged && iterations < settings.max_iterations {
        iterations += 1;
        let mut accepted = false;
        while step > 0.0 {
            for ((c, &kj), g) in candidate.iter_mut().zip(&k).zip(&grad) {
                *c = (kj + step * g).max(MIN_PARAM);
            }
            if candidate == k {
                break;
            }
            let cand_value = log_target(prior, &candidate, stats);
            if cand_value.is_finite() && cand_value >= value - objective_noise(&k, stats) {
                let g = target_gradient(prior, &candidate, stats);
                // Within rounding noise of the objective, a non-negative slope
                // at the candidate still certifies ascent for a concave target.
                let ascending = g.as_ref().is_some_and(|g| {
                    cand_value >= value
                        || g.iter().zip(&candidate).zip(&k).map(|((g, c), k)| g * (c - k)).sum::<f64>() >= 0.0
                });
                if let (true, Some(g)) = (ascending, g) {
                    std::mem::swap(&mut k, &mut candidate);
                    value = cand_value;
                    grad = g;
                    step *= 1.1;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        gradient_norm = sup_norm(&grad);
        converged = gradient_norm <= settings.tolerance;
        if !accepted {
            // No representable step improves the objective.
            break;
        }
    }
    Ok(FitReport {
        estimate: DirichletParams::new(k)?,
        objective: settings.objective,
        objective_value: value,
        iterations,
        converged,
        gradient_norm,
    })
}

/// Fits `data` with the requested objective, starting from the method of
/// moments.
pub fn fit(data: &CompositionMatrix, settings: &FitSettings) -> Result<FitReport> {
    let init = method_of_moments(data)?;
    let stats = SufficientStats::from_data(data);
    match settings.objective {
        Objective::Ml => mle_fixed_point(&stats, &init, settings),
        _ => posterior_mode(&stats, settings, &init),
    }
}
