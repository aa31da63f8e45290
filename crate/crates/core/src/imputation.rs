//! Multiple imputation of missing components by chained predictive
//! conditional draws.
//!
//! Each chain fits the complete rows, draws every missing value from its
//! predictive posterior conditional, then alternates refitting on the
//! completed data with redrawing the missing values.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::conditional_predict::{conditional, Scale};
use crate::error::{Error, Result};
use crate::estimation::{self, FitSettings, Objective, Prior, SufficientStats};
use crate::mcmc::{self, ChainSettings, Posterior};
use crate::model_core::{to_type1, CompositionMatrix, DirichletParams, Type2Matrix, ROW_SUM_TOLERANCE};
use crate::special_fns::RngStream;

/// Data grid with missing entries, in the input layout of `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteMatrix {
    scale: Scale,
    width: usize,
    values: Vec<Option<f64>>,
}

impl IncompleteMatrix {
    /// Validates observed entries and rejects rows with nothing observed.
    /// With `zeros_as_missing`, exact zeros become missing entries.
    pub fn from_rows(rows: Vec<Vec<Option<f64>>>, scale: Scale, zeros_as_missing: bool) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() {
            return Err(Error::domain("data has no rows"));
        }
        let p = match scale {
            Scale::Type1 => width,
            Scale::Type2 { .. } => width + 1,
        };
        if p < 2 || width == 0 {
            return Err(Error::domain("rows need at least two components"));
        }
        if let Scale::Type2 { ref_component } = scale {
            if ref_component >= p {
                return Err(Error::domain(format!("reference component {} out of range", ref_component + 1)));
            }
        }
        let mut values = Vec::with_capacity(rows.len() * width);
        let mut any_complete = false;
        for (i, row) in rows.into_iter().enumerate() {
            let row_no = i + 1;
            if row.len() != width {
                return Err(Error::Ingest {
                    row: row_no,
                    column: None,
                    message: format!("expected {width} values, found {}", row.len()),
                });
            }
            let mut row: Vec<Option<f64>> =
                row.into_iter().map(|v| v.filter(|&v| !(zeros_as_missing && v == 0.0))).collect();
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    let ok = v.is_finite() && v > 0.0 && (scale != Scale::Type1 || v < 1.0);
                    if !ok {
                        return Err(Error::Ingest {
                            row: row_no,
                            column: Some(j + 1),
                            message: format!("observed value {v} is outside the support"),
                        });
                    }
                }
            }
            let observed = row.iter().flatten().count();
            if observed == 0 {
                return Err(Error::Ingest {
                    row: row_no,
                    column: None,
                    message: "every value is missing".into(),
                });
            }
            if scale == Scale::Type1 {
                let sum: f64 = row.iter().flatten().sum();
                if observed == width {
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::Ingest { row: row_no, column: None, message: format!("row sums to {sum}, not 1") });
                    }
                    row.iter_mut().flatten().for_each(|v| *v /= sum);
                } else if sum >= 1.0 {
                    return Err(Error::Ingest {
                        row: row_no,
                        column: None,
                        message: format!("observed values sum to {sum}, leaving nothing for the missing ones"),
                    });
                }
            }
            any_complete |= observed == width;
            values.extend(row);
        }
        if !any_complete {
            return Err(Error::domain("imputation needs at least one fully observed row"));
        }
        Ok(IncompleteMatrix { scale, width, values })
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.width
    }

    /// Number of Dirichlet components.
    pub fn dim(&self) -> usize {
        match self.scale {
            Scale::Type1 => self.width,
            Scale::Type2 { .. } => self.width + 1,
        }
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Option<f64>]> {
        self.values.chunks_exact(self.width)
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Fully observed rows as compositions.
    pub fn complete_rows(&self) -> Result<CompositionMatrix> {
        let rows: Vec<Vec<f64>> = self
            .rows()
            .filter(|r| r.iter().all(Option::is_some))
            .map(|r| r.iter().flatten().copied().collect())
            .collect();
        to_composition(&rows, self.scale)
    }
}

fn to_composition(rows: &[Vec<f64>], scale: Scale) -> Result<CompositionMatrix> {
    match scale {
        Scale::Type1 => CompositionMatrix::from_rows(rows.to_vec()),
        Scale::Type2 { ref_component } => to_type1(&Type2Matrix::from_rows(rows.to_vec(), ref_component)?),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ImputeSettings {
    /// Number of independent chains M.
    pub chains: usize,
    /// Refit/redraw cycles after the complete-case start.
    pub inner_iters: usize,
    pub fit: FitSettings,
    /// Prior of the posterior the missing values are drawn from; `None`
    /// follows the fit objective, falling back to MDI for maximum likelihood.
    pub prior: Option<Prior>,
    /// Posterior chain run at every outer iteration.
    pub chain: ChainSettings,
}

impl Default for ImputeSettings {
    fn default() -> Self {
        ImputeSettings {
            chains: 5,
            inner_iters: 10,
            fit: FitSettings::with_objective(Objective::MdiMode),
            prior: None,
            chain: ChainSettings { draws: 2000, burn_in: Some(200) },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ImputationResult {
    /// Completed data per chain, in the input layout.
    pub completed: Vec<Vec<Vec<f64>>>,
    pub estimates: Vec<DirichletParams>,
    /// Per chain, the estimate after each fit (complete-case fit first).
    pub traces: Vec<Vec<Vec<f64>>>,
    /// Per chain, whether the trace passed the stability heuristic.
    pub stable: Vec<bool>,
}

/// Second-half stability check: the means of the two quarters of the
/// trace's second half differ by less than half the between-iteration
/// standard deviation of that half, for every parameter.
pub fn trace_is_stable(trace: &[Vec<f64>]) -> bool {
    let tail = &trace[trace.len() / 2..];
    if tail.len() < 4 {
        return false;
    }
    let half = tail.len() / 2;
    let mean = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
    (0..tail[0].len()).all(|j| {
        let m = mean(tail, j);
        let sd = (tail.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (tail.len() - 1) as f64).sqrt();
        let shift = (mean(&tail[..half], j) - mean(&tail[half..], j)).abs();
        shift < 0.5 * sd || shift == 0.0
    })
}

struct ChainOutput {
    completed: Vec<Vec<f64>>,
    estimate: DirichletParams,
    trace: Vec<Vec<f64>>,
}

fn run_chain(data: &IncompleteMatrix, settings: &ImputeSettings, rng: &mut RngStream) -> Result<ChainOutput> {
    let p = data.dim();
    let columns = data.scale.component_indices(p);
    let mut completed: Vec<Vec<f64>> =
        data.rows().map(|r| r.iter().map(|v| v.unwrap_or(f64::NAN)).collect()).collect();
    let incomplete: Vec<(usize, BTreeMap<usize, f64>)> = data
        .rows()
        .enumerate()
        .filter(|(_, r)| r.iter().any(Option::is_none))
        .map(|(i, r)| (i, columns.iter().zip(r).filter_map(|(&j, v)| v.map(|v| (j, v))).collect()))
        .collect();
    let column_of: BTreeMap<usize, usize> = columns.iter().enumerate().map(|(c, &j)| (j, c)).collect();
    let prior = settings.prior.or(settings.fit.objective.prior()).unwrap_or(Prior::Mdi);

    // Fit, draw, then refit and redraw `inner_iters` times.
    let mut current = data.complete_rows()?;
    let mut trace = Vec::with_capacity(settings.inner_iters + 1);
    let mut estimate;
    let mut iteration = 0;
    loop {
        estimate = estimation::fit(&current, &settings.fit)?.estimate;
        trace.push(estimate.k().to_vec());
        if incomplete.is_empty() || iteration == settings.inner_iters {
            break;
        }
        let posterior = Posterior::new(prior, SufficientStats::from_data(&current));
        let run = mcmc::run_posterior_from(&posterior, &estimate, &settings.fit, &settings.chain, rng)?;
        for (i, known) in &incomplete {
            let k = DirichletParams::new(run.draws.row(rng.index(run.draws.len())).to_vec())?;
            let spec = conditional(&k, data.scale, known)?;
            for (j, v) in spec.unknown.iter().zip(spec.sample(rng)) {
                completed[*i][column_of[j]] = v;
            }
        }
        current = to_composition(&completed, data.scale)?;
        iteration += 1;
    }
    Ok(ChainOutput { completed, estimate, trace })
}

/// Runs `settings.chains` independent chains on substreams of `rng`.
pub fn multiple_impute(data: &IncompleteMatrix, settings: &ImputeSettings, rng: &RngStream) -> Result<ImputationResult> {
    if settings.chains == 0 || settings.inner_iters == 0 {
        return Err(Error::domain("imputation needs at least one chain and one inner iteration"));
    }
    let outputs: Vec<ChainOutput> = (0..settings.chains)
        .into_par_iter()
        .map(|m| {
            let mut stream = rng.substream(m as u64);
            run_chain(data, settings, &mut stream).map_err(|e| Error::Chain { chain: m + 1, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let mut result = ImputationResult { completed: vec![], estimates: vec![], traces: vec![], stable: vec![] };
    for (m, out) in outputs.into_iter().enumerate() {
        let stable = trace_is_stable(&out.trace);
        if !stable && data.missing_count() > 0 {
            warn!("imputation chain {}: parameter trace has not settled; consider more inner iterations", m + 1);
        }
        result.completed.push(out.completed);
        result.estimates.push(out.estimate);
        result.traces.push(out.trace);
        result.stable.push(stable);
    }
    Ok(result)
}

/// Between-chain summary of the estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledEstimate {
    pub mean: DirichletParams,
    /// Componentwise sample standard deviation across chains (0 for M = 1).
    pub spread: Vec<f64>,
}

pub fn pool_estimates(estimates: &[DirichletParams]) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m == 0 {
        return Err(Error::domain("no estimates to pool"));
    }
    let p = estimates[0].dim();
    if let Some(e) = estimates.iter().find(|e| e.dim() != p) {
        return Err(Error::Dimension { expected: p, found: e.dim() });
    }
    let mean: Vec<f64> = (0..p).map(|j| estimates.iter().map(|e| e.k()[j]).sum::<f64>() / m as f64).collect();
    let spread = (0..p)
        .map(|j| {
            if m == 1 {
                return 0.0;
            }
            let ss: f64 = estimates.iter().map(|e| (e.k()[j] - mean[j]).powi(2)).sum();
            (ss / (m - 1) as f64).sqrt()
        })
        .collect();
    Ok(PooledEstimate { mean: DirichletParams::new(mean)?, spread })
}
