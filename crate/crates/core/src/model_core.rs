//! Dirichlet Type I and Type II models: parameter and data containers,
//! densities, the Type I ↔ Type II transforms, aggregation, sampling and the
//! replicate-based goodness-of-fit report.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::SufficientStats;
use crate::special_fns::{raw, RngStream};

/// Rows whose sum is within this distance of one are renormalized on ingest.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Parameter vector k₁..k_P of a Dirichlet distribution, with k₀ = Σ k_j.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirichletParams {
    k: Vec<f64>,
    k0: f64,
}

impl DirichletParams {
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if k.len() < 2 {
            return Err(Error::domain(format!(
                "a Dirichlet needs at least 2 components, got {}",
                k.len()
            )));
        }
        if let Some((j, v)) = k.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::domain(format!("parameter k[{j}] = {v} is not a positive finite value")));
        }
        let k0 = k.iter().sum();
        Ok(DirichletParams { k, k0 })
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    /// Number of components P.
    pub fn dim(&self) -> usize {
        self.k.len()
    }

    /// E(X_j) = k_j / k₀.
    pub fn mean(&self) -> Vec<f64> {
        self.k.iter().map(|k| k / self.k0).collect()
    }

    /// True when some k_j < 1, the regime where the density is unbounded at
    /// the simplex boundary and the estimators are least reliable.
    pub fn has_small_components(&self) -> bool {
        self.k.iter().any(|&k| k < 1.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.k
    }

    /// log Γ(k₀) − Σ log Γ(k_j).
    pub(crate) fn log_normalizer(&self) -> f64 {
        raw::log_gamma(self.k0) - self.k.iter().map(|&k| raw::log_gamma(k)).sum::<f64>()
    }
}

/// n × P matrix of Type I observations, every row strictly inside the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
}

impl CompositionMatrix {
    /// Validates rows for ingest. Rows summing to within
    /// [`ROW_SUM_TOLERANCE`] of one are renormalized; zeros are rejected.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() {
            return Err(Error::domain("composition data has no rows"));
        }
        if p < 2 {
            return Err(Error::domain(format!("compositions need at least 2 components, got {p}")));
        }
        let mut values = Vec::with_capacity(rows.len() * p);
        for (i, row) in rows.iter().enumerate() {
            let row_no = i + 1;
            if row.len() != p {
                return Err(Error::Ingest {
                    row: row_no,
                    column: None,
                    message: format!("expected {p} values, found {}", row.len()),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                let column = Some(j + 1);
                if !v.is_finite() {
                    return Err(Error::Ingest { row: row_no, column, message: format!("non-finite value {v}") });
                }
                if v == 0.0 {
                    return Err(Error::Ingest {
                        row: row_no,
                        column,
                        message: "zero component; treat zeros as missing and use the imputation workflow".into(),
                    });
                }
                if v < 0.0 {
                    return Err(Error::Ingest { row: row_no, column, message: format!("negative value {v}") });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Ingest {
                    row: row_no,
                    column: None,
                    message: format!("row sums to {sum}, not 1"),
                });
            }
            values.extend(row.iter().map(|v| v / sum));
        }
        Ok(CompositionMatrix { n: rows.len(), p, values })
    }

    /// Rows already known to be interior (sampler output, transforms).
    pub(crate) fn from_raw(n: usize, p: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n * p);
        CompositionMatrix { n, p, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Same data with columns reordered so that column `j` of the result is
    /// column `perm[j]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.p)?;
        let values = self.rows().flat_map(|r| perm.iter().map(move |&j| r[j])).collect();
        Ok(CompositionMatrix { n: self.n, p: self.p, values })
    }
}

fn check_permutation(perm: &[usize], p: usize) -> Result<()> {
    let mut seen = vec![false; p];
    if perm.len() != p {
        return Err(Error::Dimension { expected: p, found: perm.len() });
    }
    for &j in perm {
        if j >= p || std::mem::replace(&mut seen[j], true) {
            return Err(Error::domain(format!("{perm:?} is not a permutation of 0..{p}")));
        }
    }
    Ok(())
}

/// n × (P−1) matrix of Type II observations. `ref_component` is the position
/// (0-based, in 0..P) of the reference component whose ratio is identically 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Type2Matrix {
    n: usize,
    width: usize,
    ref_component: usize,
    values: Vec<f64>,
}

impl Type2Matrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, ref_component: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::domain("Type II data has no rows"));
        }
        let width = rows[0].len();
        if width == 0 {
            return Err(Error::domain("Type II rows need at least one value"));
        }
        if ref_component > width {
            return Err(Error::domain(format!(
                "reference component {ref_component} out of range for {} components",
                width + 1
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Ingest {
                    row: i + 1,
                    column: None,
                    message: format!("expected {width} values, found {}", row.len()),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Ingest {
                        row: i + 1,
                        column: Some(j + 1),
                        message: format!("Type II values must be positive and finite, got {v}"),
                    });
                }
            }
            values.extend_from_slice(row);
        }
        Ok(Type2Matrix { n: rows.len(), width, ref_component, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of ratio columns, P − 1.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of Dirichlet components, P.
    pub fn dim(&self) -> usize {
        self.width + 1
    }

    pub fn ref_component(&self) -> usize {
        self.ref_component
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Indices into the P-vector of parameters for each ratio column.
    pub fn component_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| j != self.ref_component).collect()
    }
}

/// Replicate-simulation goodness-of-fit summary.
#[derive(Debug, Clone, Serialize)]
pub struct GoodnessReport {
    pub observed_correlation: Vec<Vec<f64>>,
    pub replicate_correlation: Vec<Vec<f64>>,
    /// Per component: sorted observed values paired with Beta(k_j, k₀ − k_j)
    /// quantiles at plotting positions (i − 0.5)/n.
    pub marginal_quantile_pairs: Vec<Vec<QuantilePair>>,
    /// The simulated replicate sample, row-major.
    pub replicate: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuantilePair {
    pub observed: f64,
    pub theoretical: f64,
}

fn check_len(params: &DirichletParams, len: usize) -> Result<()> {
    if params.dim() != len {
        return Err(Error::Dimension { expected: params.dim(), found: len });
    }
    Ok(())
}

/// log f(x) for a Type I observation x on the open simplex.
pub fn log_density_type1(params: &DirichletParams, x: &[f64]) -> Result<f64> {
    check_len(params, x.len())?;
    if let Some(v) = x.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!("composition value {v} is not in (0, 1)")));
    }
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::domain(format!("composition sums to {sum}, not 1")));
    }
    let kernel: f64 = params.k().iter().zip(x).map(|(k, x)| (k - 1.0) * x.ln()).sum();
    Ok(params.log_normalizer() + kernel)
}

/// log f(y) for a Type II observation with the reference component last.
pub fn log_density_type2(params: &DirichletParams, y: &[f64]) -> Result<f64> {
    log_density_type2_with_ref(params, y, params.dim() - 1)
}

fn log_density_type2_with_ref(params: &DirichletParams, y: &[f64], ref_component: usize) -> Result<f64> {
    check_len(params, y.len() + 1)?;
    if let Some(v) = y.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!("Type II value {v} is not positive")));
    }
    let k = params.k();
    let others = (0..params.dim()).filter(|&j| j != ref_component);
    let kernel: f64 = others.zip(y).map(|(j, y)| (k[j] - 1.0) * y.ln()).sum();
    let total: f64 = y.iter().sum();
    Ok(params.log_normalizer() + kernel - params.k0() * total.ln_1p())
}

/// Type I log-likelihood, evaluated through the sufficient statistics.
pub fn log_likelihood_type1(params: &DirichletParams, data: &CompositionMatrix) -> Result<f64> {
    check_len(params, data.dim())?;
    Ok(SufficientStats::from_data(data).log_likelihood(params))
}

pub fn log_likelihood_type2(params: &DirichletParams, data: &Type2Matrix) -> Result<f64> {
    check_len(params, data.dim())?;
    let mut total = 0.0;
    for row in data.rows() {
        total += log_density_type2_with_ref(params, row, data.ref_component())?;
    }
    Ok(total)
}

/// y_ij = x_ij / x_i,ref for the non-reference columns, order preserved.
pub fn to_type2(data: &CompositionMatrix, ref_component: usize) -> Result<Type2Matrix> {
    let p = data.dim();
    if ref_component >= p {
        return Err(Error::domain(format!("reference component {ref_component} out of range for {p} components")));
    }
    let width = p - 1;
    let mut values = Vec::with_capacity(data.n() * width);
    for (i, row) in data.rows().enumerate() {
        let denom = row[ref_component];
        if !(denom > 0.0) {
            return Err(Error::Ingest {
                row: i + 1,
                column: Some(ref_component + 1),
                message: format!("reference value {denom} must be positive"),
            });
        }
        values.extend(row.iter().enumerate().filter(|(j, _)| *j != ref_component).map(|(_, x)| x / denom));
    }
    Ok(Type2Matrix { n: data.n(), width, ref_component, values })
}

/// x_ij = y_ij / (1 + Σ_l y_il), with the reference component reinstated at
/// its original position as 1 / (1 + Σ_l y_il).
pub fn to_type1(data: &Type2Matrix) -> Result<CompositionMatrix> {
    let p = data.dim();
    let mut values = Vec::with_capacity(data.n() * p);
    for (i, row) in data.rows().enumerate() {
        let denom = 1.0 + row.iter().sum::<f64>();
        if !denom.is_finite() {
            return Err(Error::domain(format!("row {} has a non-finite sum", i + 1)));
        }
        let mut ys = row.iter();
        for j in 0..p {
            if j == data.ref_component() {
                values.push(1.0 / denom);
            } else {
                values.push(ys.next().copied().unwrap_or_default() / denom);
            }
        }
    }
    Ok(CompositionMatrix::from_raw(data.n(), p, values))
}

/// Merges the listed components into one whose parameter is their sum. The
/// merged component takes the position of the smallest merged index.
pub fn aggregate(params: &DirichletParams, merge: &[usize]) -> Result<DirichletParams> {
    let p = params.dim();
    let mut idx = merge.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if idx.len() != merge.len() || idx.len() < 2 {
        return Err(Error::domain("aggregation needs at least two distinct components"));
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= p) {
        return Err(Error::domain(format!("component {bad} out of range for {p} components")));
    }
    let merged: f64 = idx.iter().map(|&j| params.k()[j]).sum();
    let first = idx[0];
    let k = (0..p)
        .filter_map(|j| {
            if j == first {
                Some(merged)
            } else if idx.contains(&j) {
                None
            } else {
                Some(params.k()[j])
            }
        })
        .collect();
    DirichletParams::new(k)
}

/// Marginal law of component j: Beta(k_j, k₀ − k_j).
pub fn marginal_beta(params: &DirichletParams, j: usize) -> Result<(f64, f64)> {
    let kj = *params
        .k()
        .get(j)
        .ok_or_else(|| Error::domain(format!("component {j} out of range for {} components", params.dim())))?;
    Ok((kj, params.k0() - kj))
}

/// Fills `out` with one Dirichlet draw as normalized Gamma(k_j, 1) variates.
pub(crate) fn draw_dirichlet_into(k: &[f64], rng: &mut RngStream, out: &mut [f64]) {
    if k.iter().all(|&a| a >= 1.0) {
        let mut sum = 0.0;
        for (o, &a) in out.iter_mut().zip(k) {
            *o = raw::gamma_variate(a, rng);
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
    } else {
        // Normalize in log space so that tiny shapes do not underflow.
        for (o, &a) in out.iter_mut().zip(k) {
            *o = raw::log_gamma_variate(a, rng);
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = out.iter().map(|l| (l - max).exp()).sum();
        out.iter_mut().for_each(|l| *l = (*l - max).exp() / sum);
    }
}

/// n i.i.d. rows g / Σ g with g_j ~ Gamma(k_j, 1).
pub fn sample_dirichlet(params: &DirichletParams, n: usize, rng: &mut RngStream) -> Result<CompositionMatrix> {
    if n == 0 {
        return Err(Error::domain("sample size must be at least 1"));
    }
    let p = params.dim();
    let mut values = vec![0.0; n * p];
    for row in values.chunks_exact_mut(p) {
        draw_dirichlet_into(params.k(), rng, row);
    }
    Ok(CompositionMatrix::from_raw(n, p, values))
}

/// n Type II rows as ratios G_j / G_P of independent Gamma(k_j, 1) draws;
/// the last component is the reference.
pub fn sample_type2(params: &DirichletParams, n: usize, rng: &mut RngStream) -> Result<Type2Matrix> {
    if n == 0 {
        return Err(Error::domain("sample size must be at least 1"));
    }
    let p = params.dim();
    let width = p - 1;
    let mut values = Vec::with_capacity(n * width);
    let mut logs = vec![0.0; p];
    for _ in 0..n {
        for (l, &a) in logs.iter_mut().zip(params.k()) {
            *l = raw::log_gamma_variate(a, rng);
        }
        let reference = logs[width];
        values.extend(logs[..width].iter().map(|l| (l - reference).exp()));
    }
    Ok(Type2Matrix { n, width, ref_component: width, values })
}

/// Pearson correlation matrix of the columns of `rows`.
pub fn correlation_matrix(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let p = rows.first().map(|r| r.len()).unwrap_or(0);
    let means: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; p]; p];
    for r in rows {
        for a in 0..p {
            for b in a..p {
                cov[a][b] += (r[a] - means[a]) * (r[b] - means[b]);
            }
        }
    }
    let mut corr = vec![vec![0.0; p]; p];
    for a in 0..p {
        corr[a][a] = 1.0;
        for b in a + 1..p {
            let c = cov[a][b] / (cov[a][a] * cov[b][b]).sqrt();
            corr[a][b] = c;
            corr[b][a] = c;
        }
    }
    corr
}

/// Simulates a replicate of the same size as `data` from `params` and
/// collects correlation matrices and marginal QQ pairs.
pub fn replicate_check(params: &DirichletParams, data: &CompositionMatrix, rng: &mut RngStream) -> Result<GoodnessReport> {
    check_len(params, data.dim())?;
    let replicate = sample_dirichlet(params, data.n(), rng)?;
    let observed_rows: Vec<&[f64]> = data.rows().collect();
    let replicate_rows: Vec<&[f64]> = replicate.rows().collect();
    let n = data.n() as f64;
    let mut marginal_quantile_pairs = Vec::with_capacity(data.dim());
    for j in 0..data.dim() {
        let (a, b) = marginal_beta(params, j)?;
        let mut col = data.column(j);
        col.sort_by(f64::total_cmp);
        let pairs = col
            .into_iter()
            .enumerate()
            .map(|(i, observed)| {
                let position = (i as f64 + 0.5) / n;
                crate::special_fns::beta_quantile(position, a, b).map(|theoretical| QuantilePair { observed, theoretical })
            })
            .collect::<Result<Vec<_>>>()?;
        marginal_quantile_pairs.push(pairs);
    }
    Ok(GoodnessReport {
        observed_correlation: correlation_matrix(&observed_rows),
        replicate_correlation: correlation_matrix(&replicate_rows),
        marginal_quantile_pairs,
        replicate: replicate.to_rows(),
    })
}
