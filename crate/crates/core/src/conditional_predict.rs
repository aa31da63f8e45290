//! Conditional Dirichlet laws and posterior-predictive conditional simulation.
//!
//! Type I: given known components x_K, the unknowns divided by 1 − Σ x_K are
//! Dirichlet on the unknown parameters. Type II: given known ratios y_K, the
//! unknown ratios divided by β = 1 + Σ y_K are Type II with the known and
//! reference parameters merged into one tail parameter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::PosteriorDraws;
use crate::model_core::{draw_dirichlet_into, DirichletParams};
use crate::special_fns::{raw, RngStream};

/// Measurement scale of a data row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scale")]
pub enum Scale {
    /// Rows are length-P compositions on the open simplex.
    Type1,
    /// Rows are length P − 1 ratios; `ref_component` (0-based, in 0..P) is
    /// the denominator component whose own ratio is omitted.
    Type2 { ref_component: usize },
}

impl Scale {
    /// Number of values per row for `p` components.
    pub fn width(self, p: usize) -> usize {
        match self {
            Scale::Type1 => p,
            Scale::Type2 { .. } => p - 1,
        }
    }

    /// Parameter index of each column of a row.
    pub fn component_indices(self, p: usize) -> Vec<usize> {
        match self {
            Scale::Type1 => (0..p).collect(),
            Scale::Type2 { ref_component } => (0..p).filter(|&j| j != ref_component).collect(),
        }
    }
}

/// Law of the unknown components given the known ones. Indices are
/// parameter indices (0..P).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalSpec {
    pub scale_type: Scale,
    /// Type I: k of the unknowns. Type II: k of the unknowns followed by the
    /// merged tail parameter.
    pub reduced: Vec<f64>,
    /// 1 − Σ known (Type I) or 1 + Σ known (Type II).
    pub scale: f64,
    pub known: BTreeMap<usize, f64>,
    pub unknown: Vec<usize>,
}

impl ConditionalSpec {
    /// Number of unknown components.
    pub fn len(&self) -> usize {
        self.unknown.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unknown.is_empty()
    }

    /// One joint draw of the unknowns in original units, aligned with
    /// `self.unknown`.
    pub fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        match self.scale_type {
            Scale::Type1 => {
                if self.reduced.len() == 1 {
                    out[0] = self.scale;
                    return;
                }
                draw_dirichlet_into(&self.reduced, rng, out);
                out.iter_mut().for_each(|w| *w *= self.scale);
            }
            Scale::Type2 { .. } => {
                let q = self.unknown.len();
                for (o, &a) in out.iter_mut().zip(&self.reduced[..q]) {
                    *o = raw::log_gamma_variate(a, rng);
                }
                let tail = raw::log_gamma_variate(self.reduced[q], rng);
                out.iter_mut().for_each(|l| *l = self.scale * (*l - tail).exp());
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.sample_into(rng, &mut out);
        out
    }

    /// Conditional means of the unknowns. Type II components whose mean does
    /// not exist (tail ≤ 1) report +∞.
    pub fn mean(&self) -> Vec<f64> {
        match self.scale_type {
            Scale::Type1 => {
                let total: f64 = self.reduced.iter().sum();
                self.reduced.iter().map(|a| self.scale * a / total).collect()
            }
            Scale::Type2 { .. } => {
                let (k, tail) = self.split_tail();
                k.iter()
                    .map(|a| if tail > 1.0 { self.scale * a / (tail - 1.0) } else { f64::INFINITY })
                    .collect()
            }
        }
    }

    /// Conditional variances; +∞ where a Type II variance does not exist.
    pub fn variance(&self) -> Vec<f64> {
        let s2 = self.scale * self.scale;
        match self.scale_type {
            Scale::Type1 => {
                let total: f64 = self.reduced.iter().sum();
                self.reduced
                    .iter()
                    .map(|a| s2 * a * (total - a) / (total * total * (total + 1.0)))
                    .collect()
            }
            Scale::Type2 { .. } => {
                let (k, tail) = self.split_tail();
                k.iter()
                    .map(|a| {
                        if tail > 2.0 {
                            s2 * a * (a + tail - 1.0) / ((tail - 1.0).powi(2) * (tail - 2.0))
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect()
            }
        }
    }

    fn split_tail(&self) -> (&[f64], f64) {
        let q = self.unknown.len();
        (&self.reduced[..q], self.reduced[q])
    }
}

fn check_indices(known: &BTreeMap<usize, f64>, p: usize, skip: Option<usize>) -> Result<()> {
    if known.is_empty() {
        return Err(Error::domain("conditioning needs at least one known component"));
    }
    for &j in known.keys() {
        if j >= p || Some(j) == skip {
            return Err(Error::domain(format!("known component index {} is not a free component", j + 1)));
        }
    }
    Ok(())
}

/// Conditional law of the unknown components of a Type I vector.
pub fn conditional_type1(params: &DirichletParams, known: &BTreeMap<usize, f64>) -> Result<ConditionalSpec> {
    let p = params.dim();
    check_indices(known, p, None)?;
    if let Some((j, v)) = known.iter().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::domain(format!("known component {} must lie in (0, 1), got {v}", j + 1)));
    }
    let total: f64 = known.values().sum();
    if total >= 1.0 {
        return Err(Error::domain(format!("known components sum to {total}, which is not below 1")));
    }
    let unknown: Vec<usize> = (0..p).filter(|j| !known.contains_key(j)).collect();
    if unknown.is_empty() {
        return Err(Error::domain("every component is known; nothing to condition"));
    }
    Ok(ConditionalSpec {
        scale_type: Scale::Type1,
        reduced: unknown.iter().map(|&j| params.k()[j]).collect(),
        scale: 1.0 - total,
        known: known.clone(),
        unknown,
    })
}

/// Conditional law of the unknown ratios of a Type II vector whose
/// denominator is component `ref_component`.
pub fn conditional_type2(
    params: &DirichletParams,
    ref_component: usize,
    known: &BTreeMap<usize, f64>,
) -> Result<ConditionalSpec> {
    let p = params.dim();
    if ref_component >= p {
        return Err(Error::domain(format!("reference component {} out of range", ref_component + 1)));
    }
    check_indices(known, p, Some(ref_component))?;
    if let Some((j, v)) = known.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!("known ratio {} must be positive, got {v}", j + 1)));
    }
    let unknown: Vec<usize> = (0..p).filter(|&j| j != ref_component && !known.contains_key(&j)).collect();
    if unknown.is_empty() {
        return Err(Error::domain("every ratio is known; nothing to condition"));
    }
    let k = params.k();
    let tail = k[ref_component] + known.keys().map(|&j| k[j]).sum::<f64>();
    let mut reduced: Vec<f64> = unknown.iter().map(|&j| k[j]).collect();
    reduced.push(tail);
    Ok(ConditionalSpec {
        scale_type: Scale::Type2 { ref_component },
        reduced,
        scale: 1.0 + known.values().sum::<f64>(),
        known: known.clone(),
        unknown,
    })
}

/// Dispatches on the scale.
pub fn conditional(params: &DirichletParams, scale: Scale, known: &BTreeMap<usize, f64>) -> Result<ConditionalSpec> {
    match scale {
        Scale::Type1 => conditional_type1(params, known),
        Scale::Type2 { ref_component } => conditional_type2(params, ref_component, known),
    }
}

/// A partially observed row in its input layout (P values for Type I,
/// P − 1 ratios for Type II); `None` marks a value to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub observed: Vec<Option<f64>>,
    pub scale: Scale,
}

impl PredictionRequest {
    pub fn new(observed: Vec<Option<f64>>, scale: Scale) -> Self {
        PredictionRequest { observed, scale }
    }

    /// Known values keyed by parameter index, after checking the layout.
    pub fn known(&self, p: usize) -> Result<BTreeMap<usize, f64>> {
        if let Scale::Type2 { ref_component } = self.scale {
            if ref_component >= p {
                return Err(Error::domain(format!("reference component {} out of range", ref_component + 1)));
            }
        }
        let width = self.scale.width(p);
        if self.observed.len() != width {
            return Err(Error::Dimension { expected: width, found: self.observed.len() });
        }
        let known: BTreeMap<usize, f64> = self
            .scale
            .component_indices(p)
            .into_iter()
            .zip(&self.observed)
            .filter_map(|(j, v)| v.map(|v| (j, v)))
            .collect();
        let missing = width - known.len();
        if missing == 0 || known.is_empty() {
            return Err(Error::domain(format!(
                "a prediction needs between 1 and {} missing values, got {missing}",
                width - 1
            )));
        }
        Ok(known)
    }
}

/// T × Q predictive draws; column q is parameter index `components[q]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictiveDraws {
    pub components: Vec<usize>,
    values: Vec<f64>,
}

impl PredictiveDraws {
    pub fn from_rows(components: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        let q = components.len();
        if q == 0 {
            return Err(Error::domain("predictive draws need at least one component"));
        }
        let mut values = Vec::with_capacity(rows.len() * q);
        for row in rows {
            if row.len() != q {
                return Err(Error::Dimension { expected: q, found: row.len() });
            }
            values.extend_from_slice(row);
        }
        Ok(PredictiveDraws { components, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.components.len())
    }

    pub fn column(&self, q: usize) -> Vec<f64> {
        self.rows().map(|r| r[q]).collect()
    }
}

/// One conditional draw per posterior draw.
pub fn predictive_conditional(
    draws: &PosteriorDraws,
    request: &PredictionRequest,
    rng: &mut RngStream,
) -> Result<PredictiveDraws> {
    if draws.is_empty() {
        return Err(Error::domain("no posterior draws"));
    }
    let known = request.known(draws.dim())?;
    let mut components = Vec::new();
    let mut values = Vec::new();
    for k in draws.rows() {
        let params = DirichletParams::new(k.to_vec())?;
        let spec = conditional(&params, request.scale, &known)?;
        if components.is_empty() {
            components = spec.unknown.clone();
            values.reserve(draws.len() * components.len());
        }
        let start = values.len();
        values.resize(start + components.len(), 0.0);
        spec.sample_into(rng, &mut values[start..]);
    }
    Ok(PredictiveDraws { components, values })
}

/// Means and quantiles of each predicted component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSummary {
    pub components: Vec<usize>,
    pub mean: Vec<f64>,
    pub levels: Vec<f64>,
    /// `quantiles[l][q]` is the `levels[l]` quantile of component q.
    pub quantiles: Vec<Vec<f64>>,
}

/// Quantile with linear interpolation between order statistics at
/// position (n − 1)·level of the sorted sample.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_prediction(predictive: &PredictiveDraws, levels: &[f64]) -> Result<PredictionSummary> {
    if predictive.len() < 2 {
        return Err(Error::domain("at least two predictive draws are needed for a summary"));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::domain(format!("quantile level {l} is outside [0, 1]")));
    }
    let q = predictive.components.len();
    let n = predictive.len() as f64;
    let mut mean = Vec::with_capacity(q);
    let mut quantiles = vec![Vec::with_capacity(q); levels.len()];
    for c in 0..q {
        let mut col = predictive.column(c);
        mean.push(col.iter().sum::<f64>() / n);
        col.sort_by(f64::total_cmp);
        for (l, &level) in levels.iter().enumerate() {
            quantiles[l].push(quantile_sorted(&col, level));
        }
    }
    Ok(PredictionSummary { components: predictive.components.clone(), mean, levels: levels.to_vec(), quantiles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_core::{sample_dirichlet, sample_type2};

    fn params(k: &[f64]) -> DirichletParams {
        DirichletParams::new(k.to_vec()).unwrap()
    }

    fn known(pairs: &[(usize, f64)]) -> BTreeMap<usize, f64> {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn type1_reduces_and_rescales() {
        let spec = conditional_type1(&params(&[2.0, 3.0, 4.0]), &known(&[(2, 0.5)])).unwrap();
        assert_eq!(spec.reduced, vec![2.0, 3.0]);
        assert_eq!(spec.scale, 0.5);
        assert!((spec.mean()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn type1_mean_matches_rejection_sampling() {
        let k = params(&[2.0, 3.0, 4.0]);
        let mut rng = RngStream::new(17);
        let sample = sample_dirichlet(&k, 400_000, &mut rng).unwrap();
        let kept: Vec<f64> = sample.rows().filter(|r| (r[2] - 0.5).abs() < 0.01).map(|r| r[0]).collect();
        let m = kept.iter().sum::<f64>() / kept.len() as f64;
        let sd = (kept.iter().map(|x| (x - m).powi(2)).sum::<f64>() / kept.len() as f64).sqrt();
        assert!((m - 0.2).abs() < 4.0 * sd / (kept.len() as f64).sqrt(), "{m} from {} draws", kept.len());
    }

    #[test]
    fn single_unknown_is_deterministic() {
        let spec = conditional_type1(&params(&[2.0, 5.0]), &known(&[(1, 0.3)])).unwrap();
        let mut rng = RngStream::new(1);
        for _ in 0..5 {
            assert_eq!(spec.sample(&mut rng), vec![0.7]);
        }
    }

    #[test]
    fn rejects_bad_conditioning() {
        let k = params(&[2.0, 3.0, 4.0]);
        assert!(conditional_type1(&k, &BTreeMap::new()).is_err());
        assert!(conditional_type1(&k, &known(&[(0, 0.6), (1, 0.5)])).is_err());
        assert!(conditional_type1(&k, &known(&[(0, 0.2), (1, 0.3), (2, 0.5)])).is_err());
        assert!(conditional_type2(&k, 2, &known(&[(0, -1.0)])).is_err());
        assert!(conditional_type2(&k, 2, &known(&[(2, 1.0)])).is_err());
        assert!(conditional_type2(&k, 2, &BTreeMap::new()).is_err());
    }

    #[test]
    fn type2_merges_tail() {
        let spec = conditional_type2(&params(&[2.0, 3.0, 4.0]), 2, &known(&[(1, 1.5)])).unwrap();
        assert_eq!(spec.unknown, vec![0]);
        assert_eq!(spec.reduced, vec![2.0, 7.0]);
        assert_eq!(spec.scale, 2.5);
        assert!((spec.mean()[0] - 2.5 * 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn type2_mean_matches_rejection_sampling() {
        let k = params(&[2.0, 3.0, 4.0]);
        let y2 = 0.7;
        let mut rng = RngStream::new(5);
        let sample = sample_type2(&k, 400_000, &mut rng).unwrap();
        let kept: Vec<f64> = sample.rows().filter(|r| (r[1] - y2).abs() < 0.01).map(|r| r[0]).collect();
        let n = kept.len() as f64;
        let m = kept.iter().sum::<f64>() / n;
        let sd = (kept.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        let spec = conditional_type2(&k, 2, &known(&[(1, y2)])).unwrap();
        assert!((m - spec.mean()[0]).abs() < 4.0 * sd / n.sqrt(), "{m} vs {}", spec.mean()[0]);
    }

    #[test]
    fn type2_agrees_with_type1_after_mapping() {
        // Condition a Type II vector on y₂ and compare U = V/(1 + ΣV) with the
        // Type I conditional of the aggregated vector (X₁, X₂ + X₃).
        let k = params(&[2.0, 3.0, 4.0]);
        let spec2 = conditional_type2(&k, 2, &known(&[(1, 0.8)])).unwrap();
        let merged = params(&spec2.reduced);
        let mut rng = RngStream::new(9);
        let draws = 200_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let v = spec2.sample(&mut rng)[0] / spec2.scale;
            sum += v / (1.0 + v);
        }
        let u_mean = sum / draws as f64;
        let expected = merged.mean()[0];
        assert!((u_mean - expected).abs() < 2e-3, "{u_mean} vs {expected}");
    }

    #[test]
    fn request_layout_is_checked() {
        let req = PredictionRequest::new(vec![Some(6.0), Some(3.0), None, None], Scale::Type2 { ref_component: 4 });
        assert_eq!(req.known(5).unwrap(), known(&[(0, 6.0), (1, 3.0)]));
        assert!(req.known(4).is_err());
        let none_missing = PredictionRequest::new(vec![Some(0.5), Some(0.5)], Scale::Type1);
        assert!(none_missing.known(2).is_err());
        let all_missing = PredictionRequest::new(vec![None, None], Scale::Type1);
        assert!(all_missing.known(2).is_err());
    }

    #[test]
    fn degenerate_posterior_matches_plain_conditional() {
        let k = vec![2.0, 3.0, 4.0, 5.0];
        let draws = PosteriorDraws::from_rows(vec![k.clone(); 20_000], None).unwrap();
        let req = PredictionRequest::new(vec![None, Some(0.2), None, None], Scale::Type1);
        let pred = predictive_conditional(&draws, &req, &mut RngStream::new(3)).unwrap();
        let spec = conditional_type1(&params(&k), &known(&[(1, 0.2)])).unwrap();
        let summary = summarize_prediction(&pred, &[0.5]).unwrap();
        for (q, (m, v)) in summary.mean.iter().zip(spec.variance()).enumerate() {
            let se = (v / pred.len() as f64).sqrt();
            assert!((m - spec.mean()[q]).abs() < 4.0 * se);
        }
        for row in pred.rows() {
            assert!((row.iter().sum::<f64>() + 0.2 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_of_constant_and_grid() {
        let rows: Vec<Vec<f64>> = (1..=100).map(|i| vec![0.25, i as f64 / 101.0]).collect();
        let pred = PredictiveDraws::from_rows(vec![0, 1], &rows).unwrap();
        let s = summarize_prediction(&pred, &[0.025, 0.5, 0.975]).unwrap();
        assert_eq!(s.mean[0], 0.25);
        assert!(s.quantiles.iter().all(|q| q[0] == 0.25));
        assert!((s.quantiles[1][1] - 0.5).abs() <= 1.0 / 101.0);
        assert!(summarize_prediction(&PredictiveDraws::from_rows(vec![0], &[vec![1.0]]).unwrap(), &[0.5]).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&x, 0.0), 1.0);
        assert_eq!(quantile_sorted(&x, 1.0), 4.0);
        assert!((quantile_sorted(&x, 0.5) - 2.5).abs() < 1e-15);
    }
}
