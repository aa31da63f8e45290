//! Random-walk Metropolis–Hastings for the MDI and Jeffreys posteriors.
//!
//! Proposals are independent normal jumps per component, with scales set by
//! scanning the log posterior along each axis from the mode until it has
//! dropped by 0.5 (the one-standard-deviation point of a matched normal).

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{self, FitSettings, Objective, Prior, SufficientStats};
use crate::model_core::{CompositionMatrix, DirichletParams};
use crate::special_fns::RngStream;

/// Acceptance band outside of which a warning is logged.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.15, 0.6);

const SCAN_START: f64 = 1e-3;
const SCAN_FACTOR: f64 = 1.2;
const SCAN_LIMIT: f64 = 1e6;
const LOG_DROP: f64 = 0.5;

/// Unnormalized log density over raw parameter vectors. Must return −∞ for
/// points outside the support.
pub trait LogTarget {
    fn log_density(&self, k: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> LogTarget for F {
    fn log_density(&self, k: &[f64]) -> f64 {
        self(k)
    }
}

/// Posterior of the Dirichlet parameters under an objective prior.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub prior: Prior,
    pub stats: SufficientStats,
}

impl Posterior {
    pub fn new(prior: Prior, stats: SufficientStats) -> Self {
        Posterior { prior, stats }
    }

    pub fn objective(&self) -> Objective {
        match self.prior {
            Prior::Mdi => Objective::MdiMode,
            Prior::Jeffreys => Objective::JeffreysMode,
        }
    }
}

impl LogTarget for Posterior {
    fn log_density(&self, k: &[f64]) -> f64 {
        estimation::log_target(Some(self.prior), k, &self.stats)
    }
}

/// Standard deviations of the normal jump, one per component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalScales {
    sd: Vec<f64>,
}

impl ProposalScales {
    pub fn new(sd: Vec<f64>) -> Result<Self> {
        if sd.is_empty() || sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::domain(format!("proposal scales must be positive and finite, got {sd:?}")));
        }
        Ok(ProposalScales { sd })
    }

    pub fn sd(&self) -> &[f64] {
        &self.sd
    }
}

/// Retained draws of a single chain, row-major T × P.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorDraws {
    p: usize,
    draws: Vec<f64>,
    pub accepted: usize,
    pub proposals: usize,
    pub acceptance_rate: f64,
    pub burn_in: usize,
    pub prior: Option<Prior>,
}

impl PosteriorDraws {
    /// Wraps externally produced draws (e.g. a fixed parameter repeated).
    pub fn from_rows(rows: Vec<Vec<f64>>, prior: Option<Prior>) -> Result<Self> {
        let p = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || p < 2 {
            return Err(Error::domain("posterior draws need at least one row of 2+ components"));
        }
        let mut draws = Vec::with_capacity(rows.len() * p);
        for row in &rows {
            if row.len() != p {
                return Err(Error::Dimension { expected: p, found: row.len() });
            }
            if row.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::domain("posterior draws must be positive"));
            }
            draws.extend_from_slice(row);
        }
        Ok(PosteriorDraws { p, draws, accepted: 0, proposals: 0, acceptance_rate: 0.0, burn_in: 0, prior })
    }

    pub fn len(&self) -> usize {
        self.draws.len() / self.p
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.draws[t * self.p..(t + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.p)
    }

    /// Componentwise means of the first and second halves of the chain.
    pub fn split_half_means(&self) -> (Vec<f64>, Vec<f64>) {
        let half = self.len() / 2;
        let mean = |rows: &[f64]| -> Vec<f64> {
            let n = (rows.len() / self.p).max(1) as f64;
            (0..self.p).map(|j| rows.chunks_exact(self.p).map(|r| r[j]).sum::<f64>() / n).collect()
        };
        (mean(&self.draws[..half * self.p]), mean(&self.draws[half * self.p..]))
    }
}

/// Distance from `mode` along one axis at which the target has dropped by
/// [`LOG_DROP`], interpolated linearly between geometric scan points.
fn scan_crossing(target: &dyn LogTarget, mode: &[f64], j: usize, direction: f64, peak: f64) -> Result<f64> {
    let base = mode[j];
    let mut point = mode.to_vec();
    let (mut prev_offset, mut prev_drop) = (0.0, 0.0);
    let mut offset = SCAN_START * base;
    while offset <= SCAN_LIMIT * base {
        point[j] = base + direction * offset;
        let drop = peak - target.log_density(&point);
        if drop >= LOG_DROP {
            if !drop.is_finite() {
                // Hit the edge of the support; it bounds the crossing.
                return Ok(if direction < 0.0 { offset.min(base) } else { offset });
            }
            return Ok(prev_offset + (LOG_DROP - prev_drop) / (drop - prev_drop) * (offset - prev_offset));
        }
        // Do not interpolate from a point above the peak.
        (prev_offset, prev_drop) = (offset, drop.max(0.0));
        offset *= SCAN_FACTOR;
    }
    Err(Error::Calibration(format!(
        "log posterior did not drop by {LOG_DROP} within {SCAN_LIMIT:e}·k along component {}",
        j + 1
    )))
}

/// Per-dimension proposal scales matched to the curvature at `mode`: sd_j is
/// half the distance between the two points where the log target is 0.5 below
/// its peak along axis j.
pub fn calibrate_proposal(target: &dyn LogTarget, mode: &DirichletParams) -> Result<ProposalScales> {
    let k = mode.k();
    let peak = target.log_density(k);
    if !peak.is_finite() {
        return Err(Error::Calibration(format!("target is not finite at the mode {k:?}")));
    }
    let mut sd = Vec::with_capacity(k.len());
    for j in 0..k.len() {
        let up = scan_crossing(target, k, j, 1.0, peak)?;
        let down = scan_crossing(target, k, j, -1.0, peak)?;
        sd.push(0.5 * (up + down));
    }
    ProposalScales::new(sd)
}

/// Random-walk Metropolis–Hastings. Runs `burn_in + draws` iterations and
/// keeps the last `draws` states. A candidate is accepted iff
/// log π(k_c) − log π(k_i) > log u with u ~ Uniform(0, 1]; candidates with a
/// non-positive component are rejected without evaluating the target.
pub fn mh_sample(
    target: &dyn LogTarget,
    init: &DirichletParams,
    scales: &ProposalScales,
    draws: usize,
    burn_in: usize,
    rng: &mut RngStream,
) -> Result<PosteriorDraws> {
    let p = init.dim();
    if draws == 0 {
        return Err(Error::domain("at least one retained draw is required"));
    }
    if scales.sd().len() != p {
        return Err(Error::Dimension { expected: p, found: scales.sd().len() });
    }
    let mut current = init.k().to_vec();
    let mut current_lp = target.log_density(&current);
    if !current_lp.is_finite() {
        return Err(Error::domain(format!("chain start {current:?} has zero posterior density")));
    }
    let mut candidate = vec![0.0; p];
    let mut kept = Vec::with_capacity(draws * p);
    let mut accepted = 0;
    let total = burn_in + draws;
    for i in 0..total {
        for ((c, k), s) in candidate.iter_mut().zip(&current).zip(scales.sd()) {
            *c = k + s * rng.standard_normal();
        }
        let lp = if candidate.iter().all(|&c| c > 0.0) {
            target.log_density(&candidate)
        } else {
            f64::NEG_INFINITY
        };
        let log_u = rng.uniform_open().ln();
        if lp - current_lp > log_u {
            std::mem::swap(&mut current, &mut candidate);
            current_lp = lp;
            accepted += 1;
        }
        if i >= burn_in {
            kept.extend_from_slice(&current);
        }
    }
    Ok(PosteriorDraws {
        p,
        draws: kept,
        accepted,
        proposals: total,
        acceptance_rate: accepted as f64 / total as f64,
        burn_in,
        prior: None,
    })
}

/// Componentwise mean of the retained draws.
pub fn posterior_mean(draws: &PosteriorDraws) -> Result<DirichletParams> {
    if draws.is_empty() {
        return Err(Error::domain("no posterior draws to average"));
    }
    let n = draws.len() as f64;
    let mean = (0..draws.dim()).map(|j| draws.rows().map(|r| r[j]).sum::<f64>() / n).collect();
    DirichletParams::new(mean)
}

/// Chain length controls.
#[derive(Debug, Clone, Serialize)]
pub struct ChainSettings {
    pub draws: usize,
    /// `None` means `draws / 10`.
    pub burn_in: Option<usize>,
}

impl ChainSettings {
    pub fn new(draws: usize) -> Self {
        ChainSettings { draws, burn_in: None }
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.draws / 10)
    }
}

impl Default for ChainSettings {
    fn default() -> Self {
        ChainSettings::new(20_000)
    }
}

/// Mode, calibrated scales and a chain started at the mode.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorRun {
    pub mode: estimation::FitReport,
    pub scales: ProposalScales,
    pub draws: PosteriorDraws,
}

/// Finds the posterior mode from `init`, calibrates the proposal there and
/// runs one chain from the mode.
pub fn run_posterior_from(
    posterior: &Posterior,
    init: &DirichletParams,
    fit: &FitSettings,
    chain: &ChainSettings,
    rng: &mut RngStream,
) -> Result<PosteriorRun> {
    let settings = FitSettings { objective: posterior.objective(), ..fit.clone() };
    let mode = estimation::posterior_mode(&posterior.stats, &settings, init)?;
    let scales = calibrate_proposal(posterior, &mode.estimate)?;
    let mut draws = mh_sample(posterior, &mode.estimate, &scales, chain.draws, chain.burn_in(), rng)?;
    draws.prior = Some(posterior.prior);
    let (lo, hi) = ACCEPTANCE_BAND;
    if !(lo..=hi).contains(&draws.acceptance_rate) {
        warn!(
            "Metropolis-Hastings acceptance rate {:.3} is outside [{lo}, {hi}]",
            draws.acceptance_rate
        );
    }
    Ok(PosteriorRun { mode, scales, draws })
}

/// [`run_posterior_from`] with the method-of-moments estimate as start.
pub fn run_posterior(
    data: &CompositionMatrix,
    prior: Prior,
    fit: &FitSettings,
    chain: &ChainSettings,
    rng: &mut RngStream,
) -> Result<PosteriorRun> {
    let init = estimation::method_of_moments(data)?;
    let posterior = Posterior::new(prior, SufficientStats::from_data(data));
    run_posterior_from(&posterior, &init, fit, chain, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: &[f64]) -> DirichletParams {
        DirichletParams::new(k.to_vec()).unwrap()
    }

    #[test]
    fn normal_target_scales_recovered() {
        let sigma = [0.7, 3.0];
        let center = [10.0, 40.0];
        let target = move |k: &[f64]| -> f64 {
            -0.5 * k.iter().zip(&center).zip(&sigma).map(|((k, c), s)| ((k - c) / s).powi(2)).sum::<f64>()
        };
        let scales = calibrate_proposal(&target, &params(&center)).unwrap();
        for (got, want) in scales.sd().iter().zip(sigma) {
            assert!(((got - want) / want).abs() < 0.05, "{got} vs {want}");
        }
    }

    #[test]
    fn symmetric_target_gives_equal_scales() {
        let target = |k: &[f64]| -> f64 { -(k[0] - 5.0).powi(2) - (k[1] - 5.0).powi(2) };
        let s = calibrate_proposal(&target, &params(&[5.0, 5.0])).unwrap();
        assert!((s.sd()[0] - s.sd()[1]).abs() < 1e-12);
    }

    #[test]
    fn flat_target_fails_calibration() {
        let target = |_: &[f64]| 0.0;
        assert!(matches!(calibrate_proposal(&target, &params(&[1.0, 1.0])), Err(Error::Calibration(_))));
    }

    #[test]
    fn flat_target_accepts_nearly_everything() {
        let target = |k: &[f64]| if k.iter().all(|v| *v > 0.0) { 0.0 } else { f64::NEG_INFINITY };
        let scales = ProposalScales::new(vec![0.01, 0.01]).unwrap();
        let mut rng = RngStream::new(4);
        let d = mh_sample(&target, &params(&[5.0, 5.0]), &scales, 2000, 0, &mut rng).unwrap();
        assert_eq!(d.accepted, d.proposals);
        assert_eq!(d.len(), 2000);
    }

    #[test]
    fn uphill_candidates_always_accepted() {
        // Replay the proposal stream and check every uphill candidate was taken.
        let target = |k: &[f64]| k[0] + 2.0 * k[1];
        let scales = ProposalScales::new(vec![0.1, 0.1]).unwrap();
        let d = mh_sample(&target, &params(&[1.0, 1.0]), &scales, 3000, 0, &mut RngStream::new(8)).unwrap();
        let mut replay = RngStream::new(8);
        let mut current = vec![1.0, 1.0];
        let mut uphill = 0;
        for row in d.rows() {
            let cand: Vec<f64> = current.iter().map(|k| k + 0.1 * replay.standard_normal()).collect();
            replay.uniform_open();
            if cand.iter().all(|c| *c > 0.0) && target(&cand) > target(&current) {
                assert_eq!(row, cand.as_slice());
                uphill += 1;
            }
            current = row.to_vec();
        }
        assert!(uphill > 1000);
    }

    #[test]
    fn reproducible_with_seed() {
        let target = |k: &[f64]| -(k[0] - 2.0).powi(2) - (k[1] - 3.0).powi(2);
        let scales = ProposalScales::new(vec![0.5, 0.5]).unwrap();
        let run = |seed| mh_sample(&target, &params(&[2.0, 3.0]), &scales, 500, 50, &mut RngStream::new(seed)).unwrap();
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn posterior_mean_examples() {
        let one = PosteriorDraws::from_rows(vec![vec![2.0, 5.0]], None).unwrap();
        assert_eq!(posterior_mean(&one).unwrap().k(), &[2.0, 5.0]);
        let two = PosteriorDraws::from_rows(vec![vec![2.0, 2.0], vec![4.0, 4.0]], None).unwrap();
        assert_eq!(posterior_mean(&two).unwrap().k(), &[3.0, 3.0]);
        assert!(PosteriorDraws::from_rows(vec![], None).is_err());
    }
}
