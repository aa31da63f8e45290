//! Command-line front end: CSV ingest, command dispatch and report output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde::Serialize;

use crate::conditional_predict::{predictive_conditional, summarize_prediction, PredictionRequest, Scale};
use crate::error::{Error, Result};
use crate::estimation::{self, FitSettings, Objective, Prior};
use crate::imputation::{multiple_impute, pool_estimates, ImputeSettings, IncompleteMatrix};
use crate::mcmc::{self, ChainSettings};
use crate::model_core::{
    replicate_check, sample_dirichlet, sample_type2, to_type1, CompositionMatrix, DirichletParams, GoodnessReport,
    Type2Matrix,
};
use crate::simstudy::{self, Method, StudyCell};
use crate::special_fns::RngStream;

/// Version of every JSON document written by the CLI.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "dirichlet", version, about = "Fit, sample, predict and impute with Dirichlet Type I and Type II models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the parameters of a data set.
    Fit(FitArgs),
    /// Draw random observations from given parameters.
    Sample(SampleArgs),
    /// Predict missing components of one observation from the posterior predictive conditional.
    Predict(PredictArgs),
    /// Multiply impute missing values.
    Impute(ImputeArgs),
    /// Compare estimators by RMSPE on simulated data.
    Simstudy(SimstudyArgs),
    /// Replicate-based goodness-of-fit data (correlations and QQ pairs).
    Gof(GofArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    /// Rows are compositions summing to one.
    Type1,
    /// Rows are ratios to a reference component that is not in the file.
    Type2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    Mdi,
    Jeffreys,
}

impl From<PriorArg> for Prior {
    fn from(p: PriorArg) -> Prior {
        match p {
            PriorArg::Mdi => Prior::Mdi,
            PriorArg::Jeffreys => Prior::Jeffreys,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// CSV file; a non-numeric first row is treated as a header.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "type1")]
    pub scale: ScaleArg,
    /// For type2 input, the 1-based position of the reference component among
    /// all P components (default P). A good choice is the component with the
    /// largest minimum.
    #[arg(long)]
    pub ref_component: Option<usize>,
    /// Token marking a missing value.
    #[arg(long, default_value = "NA")]
    pub missing_token: String,
}

#[derive(Debug, Clone, Args)]
pub struct ChainArgs {
    /// Retained posterior draws.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Discarded initial iterations (default: a tenth of the draws).
    #[arg(long)]
    pub burn_in: Option<usize>,
}

impl ChainArgs {
    fn settings(&self, default_draws: usize, default_burn_in: Option<usize>) -> ChainSettings {
        ChainSettings { draws: self.draws.unwrap_or(default_draws), burn_in: self.burn_in.or(default_burn_in) }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// mom, ml, mdi-mode, jeffreys-mode, mdi-mean or jeffreys-mean.
    #[arg(long, default_value = "mdi-mode")]
    pub method: Method,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// JSON report path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Comma-separated parameters, e.g. 3,3,3.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<f64>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "type1")]
    pub scale: ScaleArg,
    /// For type2 output, the 1-based reference component (default P).
    #[arg(long)]
    pub ref_component: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// CSV path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Known values of the new observation as 1-based column=value pairs,
    /// e.g. 1=6,2=3. The other columns are predicted.
    #[arg(long)]
    pub known: String,
    #[arg(long, value_enum, default_value = "mdi")]
    pub prior: PriorArg,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Quantile levels for the summary.
    #[arg(long, value_delimiter = ',', default_value = "0.025,0.5,0.975")]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// JSON summary path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// CSV of the individual predictive draws.
    #[arg(long)]
    pub draws_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Treat exact zeros as missing values.
    #[arg(long)]
    pub zeros_as_missing: bool,
    /// Number of imputed data sets.
    #[arg(long, default_value_t = 5)]
    pub chains: usize,
    /// Refit and redraw cycles per chain.
    #[arg(long, default_value_t = 10)]
    pub inner_iters: usize,
    /// Estimator used between draws: ml, mdi-mode or jeffreys-mode.
    #[arg(long, default_value = "mdi-mode")]
    pub method: Method,
    /// Posterior for the draws (default: the method's prior, MDI for ml).
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory receiving imputed_<m>.csv and pooled.json.
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimstudyArgs {
    /// Cell as n=<size>,k=<k1;k2;...>; repeatable.
    #[arg(long, required = true)]
    pub cell: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "jeffreys-mode,ml,mdi-mode,mom")]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// CSV path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GofArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Point estimator for the fitted parameters.
    #[arg(long, default_value = "mdi-mode")]
    pub method: Method,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Histogram bins per component.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// JSON report path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Process exit code for an error: 2 ingest, 3 convergence, 4 domain.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Ingest { .. } | Error::Csv(_) | Error::Io(_) => 2,
        Error::Estimation(_) | Error::Calibration(_) => 3,
        Error::Domain(_) | Error::Dimension { .. } | Error::Json(_) => 4,
        Error::Chain { source, .. } => exit_code(source),
    }
}

/// Parsed CSV: optional header plus cells, `None` for the missing token.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    /// Cells as numbers, rejecting missing entries.
    pub fn complete(&self) -> Result<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v.ok_or_else(|| Error::Ingest {
                            row: i + 1,
                            column: Some(j + 1),
                            message: "missing value; use the impute command for incomplete data".into(),
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// Reads a comma-separated numeric table. Row numbers in errors count data
/// rows from 1, excluding the header.
pub fn parse_table(text: &str, missing_token: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut records = Vec::new();
    for record in reader.records() {
        records.push(record?);
    }
    let is_cell = |s: &str| s.trim() == missing_token || s.trim().parse::<f64>().is_ok();
    let header = match records.first() {
        Some(first) if !first.iter().all(is_cell) => {
            Some(records.remove(0).iter().map(|s| s.trim().to_string()).collect::<Vec<_>>())
        }
        _ => None,
    };
    if records.is_empty() {
        return Err(Error::Ingest { row: 1, column: None, message: "no data rows".into() });
    }
    let width = header.as_ref().map(Vec::len).unwrap_or(records[0].len());
    let mut rows = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        if record.len() != width {
            return Err(Error::Ingest {
                row: i + 1,
                column: None,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, field)| {
                let field = field.trim();
                if field == missing_token {
                    return Ok(None);
                }
                field.parse::<f64>().map(Some).map_err(|_| Error::Ingest {
                    row: i + 1,
                    column: Some(j + 1),
                    message: format!("'{field}' is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

pub fn read_table(path: &Path, missing_token: &str) -> Result<Table> {
    parse_table(&fs::read_to_string(path)?, missing_token)
}

/// Writes `bytes` to `path` via a temporary file in the same directory and
/// a rename, or to stdout when no path is given.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
        Some(path) => {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(bytes)?;
            tmp.persist(path).map_err(|e| e.error)?;
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn rows_to_csv(header: &[String], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn scale_of(scale: ScaleArg, ref_component: Option<usize>, p: usize) -> Result<Scale> {
    match scale {
        ScaleArg::Type1 => {
            if ref_component.is_some() {
                return Err(Error::domain("--ref-component applies to type2 data only"));
            }
            Ok(Scale::Type1)
        }
        ScaleArg::Type2 => {
            let r = ref_component.unwrap_or(p);
            if r == 0 || r > p {
                return Err(Error::domain(format!("--ref-component must be between 1 and {p}, got {r}")));
            }
            Ok(Scale::Type2 { ref_component: r - 1 })
        }
    }
}

/// Loaded input with its scale and column layout.
struct Loaded {
    table: Table,
    scale: Scale,
    p: usize,
}

fn load(args: &InputArgs) -> Result<Loaded> {
    let table = read_table(&args.input, &args.missing_token)?;
    let width = table.rows[0].len();
    let p = match args.scale {
        ScaleArg::Type1 => width,
        ScaleArg::Type2 => width + 1,
    };
    let scale = scale_of(args.scale, args.ref_component, p)?;
    Ok(Loaded { table, scale, p })
}

fn compositions(loaded: &Loaded) -> Result<CompositionMatrix> {
    let rows = loaded.table.complete()?;
    match loaded.scale {
        Scale::Type1 => CompositionMatrix::from_rows(rows),
        Scale::Type2 { ref_component } => to_type1(&Type2Matrix::from_rows(rows, ref_component)?),
    }
}

fn column_names(loaded: &Loaded) -> Vec<String> {
    loaded.table.header.clone().unwrap_or_else(|| default_names(loaded.scale, loaded.p))
}

fn default_names(scale: Scale, p: usize) -> Vec<String> {
    let prefix = if scale == Scale::Type1 { "x" } else { "y" };
    scale.component_indices(p).iter().map(|j| format!("{prefix}{}", j + 1)).collect()
}

#[derive(Serialize)]
struct InputSummary {
    path: String,
    rows: usize,
    components: usize,
    scale: &'static str,
    /// 1-based; present for type2 input.
    ref_component: Option<usize>,
}

impl InputSummary {
    fn new(args: &InputArgs, loaded: &Loaded) -> Self {
        InputSummary {
            path: args.input.display().to_string(),
            rows: loaded.table.rows.len(),
            components: loaded.p,
            scale: match loaded.scale {
                Scale::Type1 => "type1",
                Scale::Type2 { .. } => "type2",
            },
            ref_component: match loaded.scale {
                Scale::Type1 => None,
                Scale::Type2 { ref_component } => Some(ref_component + 1),
            },
        }
    }
}

#[derive(Serialize)]
struct PosteriorSummary {
    prior: Prior,
    draws: usize,
    burn_in: usize,
    acceptance_rate: f64,
    proposal_sd: Vec<f64>,
}

impl PosteriorSummary {
    fn new(run: &mcmc::PosteriorRun, prior: Prior) -> Self {
        PosteriorSummary {
            prior,
            draws: run.draws.len(),
            burn_in: run.draws.burn_in,
            acceptance_rate: run.draws.acceptance_rate,
            proposal_sd: run.scales.sd().to_vec(),
        }
    }
}

#[derive(Serialize)]
struct FitOutput {
    schema_version: u32,
    command: &'static str,
    method: Method,
    estimate: Vec<f64>,
    concentration: f64,
    converged: bool,
    iterations: Option<usize>,
    objective_value: Option<f64>,
    gradient_norm: Option<f64>,
    posterior: Option<PosteriorSummary>,
    input: InputSummary,
}

struct Estimate {
    params: DirichletParams,
    converged: bool,
    iterations: Option<usize>,
    objective_value: Option<f64>,
    gradient_norm: Option<f64>,
    posterior: Option<PosteriorSummary>,
}

fn estimate_with(method: Method, data: &CompositionMatrix, chain: &ChainSettings, seed: u64) -> Result<Estimate> {
    let objective = match method {
        Method::Mom => {
            let params = estimation::method_of_moments(data)?;
            return Ok(Estimate {
                params,
                converged: true,
                iterations: None,
                objective_value: None,
                gradient_norm: None,
                posterior: None,
            });
        }
        Method::MdiMean | Method::JeffreysMean => {
            let prior = if method == Method::MdiMean { Prior::Mdi } else { Prior::Jeffreys };
            let run = mcmc::run_posterior(data, prior, &FitSettings::default(), chain, &mut RngStream::new(seed))?;
            return Ok(Estimate {
                params: mcmc::posterior_mean(&run.draws)?,
                converged: run.mode.converged,
                iterations: Some(run.mode.iterations),
                objective_value: None,
                gradient_norm: Some(run.mode.gradient_norm),
                posterior: Some(PosteriorSummary::new(&run, prior)),
            });
        }
        Method::Ml => Objective::Ml,
        Method::MdiMode => Objective::MdiMode,
        Method::JeffreysMode => Objective::JeffreysMode,
    };
    let report = estimation::fit(data, &FitSettings::with_objective(objective))?;
    Ok(Estimate {
        params: report.estimate,
        converged: report.converged,
        iterations: Some(report.iterations),
        objective_value: Some(report.objective_value),
        gradient_norm: Some(report.gradient_norm),
        posterior: None,
    })
}

fn warn_small(params: &DirichletParams) {
    if params.has_small_components() {
        warn!("estimate has components below 1; the density is unbounded at the simplex boundary");
    }
}

fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let loaded = load(&args.input)?;
    let data = compositions(&loaded)?;
    let est = estimate_with(args.method, &data, &args.chain.settings(20_000, None), args.seed)?;
    warn_small(&est.params);
    let output = FitOutput {
        schema_version: SCHEMA_VERSION,
        command: "fit",
        method: args.method,
        concentration: est.params.k0(),
        estimate: est.params.into_vec(),
        converged: est.converged,
        iterations: est.iterations,
        objective_value: est.objective_value,
        gradient_norm: est.gradient_norm,
        posterior: est.posterior,
        input: InputSummary::new(&args.input, &loaded),
    };
    write_output(args.output.as_deref(), &to_json(&output)?)?;
    if !output.converged {
        eprintln!("error: {} did not converge", args.method);
        return Ok(3);
    }
    Ok(0)
}

fn cmd_sample(args: &SampleArgs) -> Result<i32> {
    let params = DirichletParams::new(args.k.clone())?;
    let p = params.dim();
    let scale = scale_of(args.scale, args.ref_component, p)?;
    let mut rng = RngStream::new(args.seed);
    let rows = match scale {
        Scale::Type1 => sample_dirichlet(&params, args.n, &mut rng)?.to_rows(),
        Scale::Type2 { ref_component } => {
            // Sample with the reference last, then reorder the ratios.
            let mut order: Vec<usize> = (0..p).filter(|&j| j != ref_component).collect();
            order.push(ref_component);
            let permuted = DirichletParams::new(order.iter().map(|&j| params.k()[j]).collect())?;
            sample_type2(&permuted, args.n, &mut rng)?.to_rows()
        }
    };
    write_output(args.output.as_deref(), &rows_to_csv(&default_names(scale, p), &rows)?)?;
    Ok(0)
}

/// Parses `1=6,2=3` into 1-based column numbers and values.
pub fn parse_known(spec: &str) -> Result<BTreeMap<usize, f64>> {
    let mut known = BTreeMap::new();
    for pair in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (col, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::domain(format!("expected column=value, got '{pair}'")))?;
        let col: usize = col.trim().parse().map_err(|_| Error::domain(format!("bad column number '{col}'")))?;
        let value: f64 = value.trim().parse().map_err(|_| Error::domain(format!("bad value '{value}'")))?;
        if col == 0 || known.insert(col, value).is_some() {
            return Err(Error::domain(format!("column {col} is invalid or repeated")));
        }
    }
    Ok(known)
}

#[derive(Serialize)]
struct PredictOutput {
    schema_version: u32,
    command: &'static str,
    /// Known values keyed by column name.
    known: BTreeMap<String, f64>,
    /// Predicted columns, in output order.
    columns: Vec<String>,
    mean: Vec<f64>,
    levels: Vec<f64>,
    /// quantiles[l][c]: level l of column c.
    quantiles: Vec<Vec<f64>>,
    posterior: PosteriorSummary,
    input: InputSummary,
}

fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    let loaded = load(&args.input)?;
    let data = compositions(&loaded)?;
    let names = column_names(&loaded);
    let width = names.len();
    let known = parse_known(&args.known)?;
    if let Some(&col) = known.keys().find(|&&c| c > width) {
        return Err(Error::domain(format!("column {col} is out of range for {width} columns")));
    }
    let observed: Vec<Option<f64>> = (1..=width).map(|c| known.get(&c).copied()).collect();
    let request = PredictionRequest::new(observed, loaded.scale);
    let prior = Prior::from(args.prior);
    let root = RngStream::new(args.seed);
    let run = mcmc::run_posterior(
        &data,
        prior,
        &FitSettings::default(),
        &args.chain.settings(9999, None),
        &mut root.substream(0),
    )?;
    let predictive = predictive_conditional(&run.draws, &request, &mut root.substream(1))?;
    let summary = summarize_prediction(&predictive, &args.levels)?;
    let indices = loaded.scale.component_indices(loaded.p);
    let column_of = |j: usize| indices.iter().position(|&i| i == j).expect("predicted component is a column");
    let columns: Vec<String> = summary.components.iter().map(|&j| names[column_of(j)].clone()).collect();
    if let Some(path) = &args.draws_output {
        let rows: Vec<Vec<f64>> = predictive.rows().map(<[f64]>::to_vec).collect();
        write_output(Some(path), &rows_to_csv(&columns, &rows)?)?;
    }
    let output = PredictOutput {
        schema_version: SCHEMA_VERSION,
        command: "predict",
        known: known.iter().map(|(c, v)| (names[c - 1].clone(), *v)).collect(),
        columns,
        mean: summary.mean,
        levels: summary.levels,
        quantiles: summary.quantiles,
        posterior: PosteriorSummary::new(&run, prior),
        input: InputSummary::new(&args.input, &loaded),
    };
    write_output(args.output.as_deref(), &to_json(&output)?)?;
    Ok(0)
}

#[derive(Serialize)]
struct ImputeOutput {
    schema_version: u32,
    command: &'static str,
    chains: usize,
    inner_iters: usize,
    missing_values: usize,
    pooled: Vec<f64>,
    spread: Vec<f64>,
    estimates: Vec<Vec<f64>>,
    stable: Vec<bool>,
    files: Vec<String>,
    input: InputSummary,
}

fn cmd_impute(args: &ImputeArgs) -> Result<i32> {
    let loaded = load(&args.input)?;
    let objective = match args.method {
        Method::Ml => Objective::Ml,
        Method::MdiMode => Objective::MdiMode,
        Method::JeffreysMode => Objective::JeffreysMode,
        other => return Err(Error::domain(format!("impute supports ml, mdi-mode and jeffreys-mode, not {other}"))),
    };
    let data = IncompleteMatrix::from_rows(loaded.table.rows.clone(), loaded.scale, args.zeros_as_missing)?;
    let settings = ImputeSettings {
        chains: args.chains,
        inner_iters: args.inner_iters,
        fit: FitSettings::with_objective(objective),
        prior: args.prior.map(Prior::from),
        chain: args.chain.settings(2000, Some(200)),
    };
    let result = multiple_impute(&data, &settings, &RngStream::new(args.seed))?;
    let pooled = pool_estimates(&result.estimates)?;
    fs::create_dir_all(&args.output_dir)?;
    let names = column_names(&loaded);
    let mut files = Vec::new();
    for (m, completed) in result.completed.iter().enumerate() {
        let path = args.output_dir.join(format!("imputed_{}.csv", m + 1));
        write_output(Some(&path), &rows_to_csv(&names, completed)?)?;
        files.push(path.display().to_string());
    }
    let output = ImputeOutput {
        schema_version: SCHEMA_VERSION,
        command: "impute",
        chains: settings.chains,
        inner_iters: settings.inner_iters,
        missing_values: data.missing_count(),
        pooled: pooled.mean.into_vec(),
        spread: pooled.spread,
        estimates: result.estimates.into_iter().map(DirichletParams::into_vec).collect(),
        stable: result.stable,
        files,
        input: InputSummary::new(&args.input, &loaded),
    };
    write_output(Some(&args.output_dir.join("pooled.json")), &to_json(&output)?)?;
    Ok(0)
}

/// Parses `n=25,k=3;3;3`.
pub fn parse_cell(spec: &str) -> Result<(usize, DirichletParams)> {
    let (mut n, mut k) = (None, None);
    for part in spec.split(',').map(str::trim) {
        match part.split_once('=') {
            Some(("n", v)) => n = Some(v.trim().parse().map_err(|_| Error::domain(format!("bad sample size '{v}'")))?),
            Some(("k", v)) => {
                let values = v
                    .split(';')
                    .map(|x| x.trim().parse::<f64>().map_err(|_| Error::domain(format!("bad parameter '{x}'"))))
                    .collect::<Result<Vec<_>>>()?;
                k = Some(DirichletParams::new(values)?);
            }
            _ => return Err(Error::domain(format!("expected n=<size> or k=<k1;k2;...>, got '{part}'"))),
        }
    }
    match (n, k) {
        (Some(n), Some(k)) => Ok((n, k)),
        _ => Err(Error::domain(format!("cell '{spec}' needs both n and k"))),
    }
}

fn cmd_simstudy(args: &SimstudyArgs) -> Result<i32> {
    let chain = args.chain.settings(20_000, Some(2_000));
    let mut results = Vec::with_capacity(args.cell.len());
    for spec in &args.cell {
        let (n, k) = parse_cell(spec)?;
        let cell = StudyCell { chain: chain.clone(), ..StudyCell::new(n, k, args.reps, args.methods.clone(), args.seed) };
        results.push(simstudy::run_cell(&cell)?);
    }
    let mut buf = Vec::new();
    simstudy::write_csv(&results, &mut buf)?;
    write_output(args.output.as_deref(), &buf)?;
    Ok(0)
}

#[derive(Serialize)]
struct GofOutput {
    schema_version: u32,
    command: &'static str,
    method: Method,
    estimate: Vec<f64>,
    report: GoodnessReport,
    histograms: Vec<Histogram>,
    input: InputSummary,
}

/// Binned counts of observed and replicate values over shared edges.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub observed: Vec<usize>,
    pub replicate: Vec<usize>,
}

pub fn histogram(observed: &[f64], replicate: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 || observed.is_empty() {
        return Err(Error::domain("a histogram needs at least one bin and one value"));
    }
    let all = || observed.iter().chain(replicate);
    let lo = all().copied().fold(f64::INFINITY, f64::min);
    let hi = all().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let count = |values: &[f64]| {
        let mut counts = vec![0; bins];
        for &v in values {
            // The top edge belongs to the last bin.
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        counts
    };
    Ok(Histogram { edges, observed: count(observed), replicate: count(replicate) })
}

fn cmd_gof(args: &GofArgs) -> Result<i32> {
    let loaded = load(&args.input)?;
    let data = compositions(&loaded)?;
    let root = RngStream::new(args.seed);
    let est = estimate_with(args.method, &data, &args.chain.settings(20_000, None), args.seed)?;
    let report = replicate_check(&est.params, &data, &mut root.substream(1))?;
    let histograms = (0..data.dim())
        .map(|j| {
            let replicate: Vec<f64> = report.replicate.iter().map(|r| r[j]).collect();
            histogram(&data.column(j), &replicate, args.bins)
        })
        .collect::<Result<Vec<_>>>()?;
    let output = GofOutput {
        schema_version: SCHEMA_VERSION,
        command: "gof",
        method: args.method,
        estimate: est.params.into_vec(),
        report,
        histograms,
        input: InputSummary::new(&args.input, &loaded),
    };
    write_output(args.output.as_deref(), &to_json(&output)?)?;
    Ok(if est.converged { 0 } else { 3 })
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Simstudy(a) => cmd_simstudy(a),
        Command::Gof(a) => cmd_gof(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value() {
        let h = histogram(&[0.0, 0.5, 1.0], &[0.25, 0.75], 2).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.observed, vec![1, 2]);
        assert_eq!(h.replicate, vec![1, 1]);
        let flat = histogram(&[0.3, 0.3], &[0.3], 4).unwrap();
        assert_eq!(flat.observed.iter().sum::<usize>(), 2);
        assert!(histogram(&[], &[], 3).is_err());
    }

    #[test]
    fn header_is_detected() {
        let t = parse_table("a,b\n0.2,0.8\n0.5,NA\n", "NA").unwrap();
        assert_eq!(t.header, Some(vec!["a".to_string(), "b".to_string()]));
        assert_eq!(t.rows, vec![vec![Some(0.2), Some(0.8)], vec![Some(0.5), None]]);
        let t = parse_table("0.2,0.8\n", "NA").unwrap();
        assert!(t.header.is_none());
    }

    #[test]
    fn malformed_rows_name_row_and_column() {
        match parse_table("a,b\n0.2,0.8\n0.5,x\n", "NA") {
            Err(Error::Ingest { row: 2, column: Some(2), .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_table("0.2,0.8\n0.5\n", "NA") {
            Err(Error::Ingest { row: 2, column: None, .. }) => {}
            other => panic!("{other:?}"),
        }
        let t = parse_table("0.5,NA\n", "NA").unwrap();
        assert!(matches!(t.complete(), Err(Error::Ingest { row: 1, column: Some(2), .. })));
    }

    #[test]
    fn known_and_cell_parsing() {
        let k = parse_known("1=6, 2=3").unwrap();
        assert_eq!(k, [(1, 6.0), (2, 3.0)].into_iter().collect());
        assert!(parse_known("0=1").is_err());
        assert!(parse_known("1=2,1=3").is_err());
        let (n, k) = parse_cell("n=25,k=3;3;3").unwrap();
        assert_eq!(n, 25);
        assert_eq!(k.k(), &[3.0, 3.0, 3.0]);
        assert!(parse_cell("n=25").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Ingest { row: 1, column: None, message: String::new() }), 2);
        assert_eq!(exit_code(&Error::Estimation(String::new())), 3);
        assert_eq!(exit_code(&Error::Domain(String::new())), 4);
        let chained = Error::Chain { chain: 2, source: Box::new(Error::Calibration(String::new())) };
        assert_eq!(exit_code(&chained), 3);
    }

    #[test]
    fn reference_position_is_validated() {
        assert_eq!(scale_of(ScaleArg::Type2, None, 5).unwrap(), Scale::Type2 { ref_component: 4 });
        assert_eq!(scale_of(ScaleArg::Type2, Some(1), 5).unwrap(), Scale::Type2 { ref_component: 0 });
        assert!(scale_of(ScaleArg::Type2, Some(6), 5).is_err());
        assert!(scale_of(ScaleArg::Type1, Some(1), 5).is_err());
    }
}
