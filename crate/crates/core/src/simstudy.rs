//! Monte Carlo comparison of the estimators by root mean square percentage
//! error over (n, k) cells.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{self, FitSettings, Objective, Prior, SufficientStats};
use crate::mcmc::{self, ChainSettings, Posterior};
use crate::model_core::{sample_dirichlet, DirichletParams};
use crate::special_fns::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mom,
    Ml,
    MdiMode,
    MdiMean,
    JeffreysMode,
    JeffreysMean,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::JeffreysMode, Method::Ml, Method::JeffreysMean, Method::MdiMode, Method::MdiMean, Method::Mom];

    /// Point-estimate methods that need no MCMC.
    pub const FAST: [Method; 4] = [Method::JeffreysMode, Method::Ml, Method::MdiMode, Method::Mom];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mom => "mom",
            Method::Ml => "ml",
            Method::MdiMode => "mdi-mode",
            Method::MdiMean => "mdi-mean",
            Method::JeffreysMode => "jeffreys-mode",
            Method::JeffreysMean => "jeffreys-mean",
        }
    }

    pub fn is_posterior_mean(self) -> bool {
        matches!(self, Method::MdiMean | Method::JeffreysMean)
    }

    fn stream_index(self) -> u64 {
        1 + self as u64
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown method '{s}'")))
    }
}

/// Estimates `k` from `data` with `method`. Non-converged fits are errors.
pub fn estimate(
    method: Method,
    data: &crate::model_core::CompositionMatrix,
    fit: &FitSettings,
    chain: &ChainSettings,
    rng: &mut RngStream,
) -> Result<DirichletParams> {
    let mom = estimation::method_of_moments(data)?;
    let mode = |objective: Objective| -> Result<DirichletParams> {
        let settings = FitSettings { objective, ..fit.clone() };
        let stats = SufficientStats::from_data(data);
        let report = match objective {
            Objective::Ml => estimation::mle_fixed_point(&stats, &mom, &settings)?,
            _ => estimation::posterior_mode(&stats, &settings, &mom)?,
        };
        if !report.converged {
            return Err(Error::estimation(format!(
                "{objective:?} fit did not converge in {} iterations",
                report.iterations
            )));
        }
        Ok(report.estimate)
    };
    let mean = |prior: Prior, rng: &mut RngStream| -> Result<DirichletParams> {
        let posterior = Posterior::new(prior, SufficientStats::from_data(data));
        let run = mcmc::run_posterior_from(&posterior, &mom, fit, chain, rng)?;
        mcmc::posterior_mean(&run.draws)
    };
    match method {
        Method::Mom => Ok(mom.clone()),
        Method::Ml => mode(Objective::Ml),
        Method::MdiMode => mode(Objective::MdiMode),
        Method::JeffreysMode => mode(Objective::JeffreysMode),
        Method::MdiMean => mean(Prior::Mdi, rng),
        Method::JeffreysMean => mean(Prior::Jeffreys, rng),
    }
}

/// 100·sqrt of the mean, over estimates and components, of the squared
/// relative error.
pub fn rmspe(estimates: &[DirichletParams], truth: &DirichletParams) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::domain("no estimates"));
    }
    let mut total = 0.0;
    for e in estimates {
        if e.dim() != truth.dim() {
            return Err(Error::Dimension { expected: truth.dim(), found: e.dim() });
        }
        total += squared_relative_error(e.k(), truth.k());
    }
    Ok(100.0 * (total / (estimates.len() * truth.dim()) as f64).sqrt())
}

fn squared_relative_error(estimate: &[f64], truth: &[f64]) -> f64 {
    estimate.iter().zip(truth).map(|(e, t)| ((e - t) / t).powi(2)).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyCell {
    pub n: usize,
    pub k_true: DirichletParams,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub fit: FitSettings,
    /// Chain used by the posterior-mean methods.
    pub chain: ChainSettings,
}

impl StudyCell {
    pub fn new(n: usize, k_true: DirichletParams, replications: usize, methods: Vec<Method>, seed: u64) -> Self {
        StudyCell {
            n,
            k_true,
            replications,
            methods,
            seed,
            fit: FitSettings::default(),
            chain: ChainSettings { draws: 20_000, burn_in: Some(2_000) },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 || self.n < 2 || self.methods.is_empty() {
            return Err(Error::domain("a study cell needs n ≥ 2, at least one replication and one method"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: Method,
    /// `None` when every replication failed.
    pub rmspe: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub n: usize,
    pub k_true: Vec<f64>,
    pub replications: usize,
    pub methods: Vec<MethodResult>,
}

impl CellResult {
    pub fn rmspe(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|r| r.method == method).and_then(|r| r.rmspe)
    }
}

/// Simulates `cell.replications` samples and scores every method. Each
/// replication draws from its own substream, so results do not depend on
/// scheduling.
pub fn run_cell(cell: &StudyCell) -> Result<CellResult> {
    cell.validate()?;
    let base = RngStream::new(cell.seed);
    let per_rep: Vec<Vec<Option<f64>>> = (0..cell.replications)
        .into_par_iter()
        .map(|r| {
            let rep = base.substream(r as u64);
            let data = sample_dirichlet(&cell.k_true, cell.n, &mut rep.substream(0));
            cell.methods
                .iter()
                .map(|&m| {
                    let data = data.as_ref().ok()?;
                    let mut rng = rep.substream(m.stream_index());
                    let est = estimate(m, data, &cell.fit, &cell.chain, &mut rng).ok()?;
                    Some(squared_relative_error(est.k(), cell.k_true.k()))
                })
                .collect()
        })
        .collect();
    let p = cell.k_true.dim() as f64;
    let methods = cell
        .methods
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let ok: Vec<f64> = per_rep.iter().filter_map(|r| r[i]).collect();
            let failures = cell.replications - ok.len();
            let rmspe = (!ok.is_empty()).then(|| 100.0 * (ok.iter().sum::<f64>() / (ok.len() as f64 * p)).sqrt());
            MethodResult { method, rmspe, failures }
        })
        .collect();
    Ok(CellResult { n: cell.n, k_true: cell.k_true.k().to_vec(), replications: cell.replications, methods })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    n: usize,
    k_true: String,
    method: &'a str,
    replications: usize,
    rmspe_percent: Option<f64>,
    failures: usize,
}

/// One CSV row per (cell, method).
pub fn write_csv<W: Write>(results: &[CellResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for cell in results {
        let k_true = cell.k_true.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";");
        for r in &cell.methods {
            w.serialize(CsvRow {
                n: cell.n,
                k_true: k_true.clone(),
                method: r.method.name(),
                replications: cell.replications,
                rmspe_percent: r.rmspe,
                failures: r.failures,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: &[f64]) -> DirichletParams {
        DirichletParams::new(k.to_vec()).unwrap()
    }

    #[test]
    fn rmspe_examples() {
        let truth = params(&[3.0, 3.0, 3.0]);
        assert_eq!(rmspe(&[truth.clone(), truth.clone()], &truth).unwrap(), 0.0);
        let one = rmspe(&[params(&[3.3, 3.0, 3.0])], &truth).unwrap();
        assert!((one - 100.0 * (0.01f64 / 3.0).sqrt()).abs() < 1e-9);
        let two = rmspe(&[params(&[3.6, 3.0, 3.0])], &truth).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-9);
        assert!(rmspe(&[], &truth).is_err());
        assert!(rmspe(&[params(&[3.0, 3.0])], &truth).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn cell_is_reproducible_and_sane() {
        let cell = StudyCell::new(25, params(&[3.0, 3.0, 3.0]), 40, Method::FAST.to_vec(), 9);
        let a = run_cell(&cell).unwrap();
        let b = run_cell(&cell).unwrap();
        assert_eq!(a, b);
        for r in &a.methods {
            assert!(r.rmspe.unwrap() > 0.0 && r.failures <= cell.replications);
        }
        // A method's score does not depend on which other methods run.
        let solo = run_cell(&StudyCell { methods: vec![Method::Ml], ..cell.clone() }).unwrap();
        assert_eq!(solo.rmspe(Method::Ml), a.rmspe(Method::Ml));
    }

    #[test]
    fn csv_layout() {
        let result = CellResult {
            n: 25,
            k_true: vec![3.0, 3.0, 3.0],
            replications: 10,
            methods: vec![MethodResult { method: Method::Ml, rmspe: Some(25.0), failures: 1 }],
        };
        let mut buf = Vec::new();
        write_csv(&[result], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "n,k_true,method,replications,rmspe_percent,failures\n25,3;3;3,ml,10,25.0,1\n");
    }

    #[test]
    fn invalid_cell_rejected() {
        assert!(run_cell(&StudyCell::new(25, params(&[3.0, 3.0]), 0, vec![Method::Ml], 1)).is_err());
        assert!(run_cell(&StudyCell::new(25, params(&[3.0, 3.0]), 5, vec![], 1)).is_err());
    }
}
