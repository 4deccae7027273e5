//! Ridge-penalized logistic regression fit by Newton / IRLS steps.
//!
//! This is the outcome model behind the standardized counterfactual rates.
//! Numeric covariates are z-scored and categorical ones one-hot encoded
//! (first vocabulary level dropped) by a [`DesignSpec`] that is frozen at fit
//! time, so the same columns can be rebuilt for any other set of records.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::{CovariateDecl, CovariateKind, CovariateValue, PredictionRecord};
use crate::error::{AuditError, Result};
use crate::stats::{logit, sigmoid};

/// Clip applied to constant models fit on a single-class stratum with
/// covariates present.
pub const DEGENERATE_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    /// Ridge strength per training row: λ = lambda_per_row · n.
    #[serde(default = "LearnerConfig::default_lambda_per_row")]
    pub lambda_per_row: f64,
    /// Convergence tolerance on the row-averaged gradient norm.
    #[serde(default = "LearnerConfig::default_tol")]
    pub tol: f64,
    #[serde(default = "LearnerConfig::default_max_iter")]
    pub max_iter: usize,
}

impl LearnerConfig {
    fn default_lambda_per_row() -> f64 {
        1e-6
    }
    fn default_tol() -> f64 {
        1e-8
    }
    fn default_max_iter() -> usize {
        100
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_per_row >= 0.0 && self.lambda_per_row.is_finite()) {
            return Err(AuditError::config("learner.lambda_per_row must be a finite value ≥ 0"));
        }
        if !(self.tol > 0.0) {
            return Err(AuditError::config("learner.tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(AuditError::config("learner.max_iter must be ≥ 1"));
        }
        Ok(())
    }

    pub fn options_for(&self, n_rows: usize) -> FitOptions {
        FitOptions {
            lambda: self.lambda_per_row * n_rows as f64,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            lambda_per_row: Self::default_lambda_per_row(),
            tol: Self::default_tol(),
            max_iter: Self::default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda: 0.0,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnEncoding {
    /// Column index in the record's covariate list, and the z-score moments.
    ZScore { covariate: usize, mean: f64, sd: f64 },
    /// Indicator for one non-reference level.
    Indicator { covariate: usize, level: String },
}

/// Frozen design-matrix layout: intercept first, then one column per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub names: Vec<String>,
    pub columns: Vec<ColumnEncoding>,
    /// Full level list (reference first) of each categorical covariate.
    pub vocabularies: Vec<(usize, Vec<String>)>,
}

impl DesignSpec {
    /// Freezes the encoding of `covariates` using `records` for the z-score
    /// moments. Category levels come from the declared vocabulary.
    pub fn fit<'a>(covariates: &[CovariateDecl], records: impl IntoIterator<Item = &'a PredictionRecord>) -> Result<Self> {
        let records: Vec<&PredictionRecord> = records.into_iter().collect();
        let mut names = vec!["(intercept)".to_string()];
        let mut columns = Vec::new();
        let mut vocabularies = Vec::new();
        for (j, decl) in covariates.iter().enumerate() {
            match decl.kind {
                CovariateKind::Numeric => {
                    let values = records
                        .iter()
                        .map(|r| match r.covariates.get(j) {
                            Some(CovariateValue::Numeric(v)) => Ok(*v),
                            _ => Err(AuditError::validation(format!("covariate `{}` missing or not numeric", decl.name))),
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    let n = values.len().max(1) as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                    names.push(decl.name.clone());
                    columns.push(ColumnEncoding::ZScore { covariate: j, mean, sd });
                }
                CovariateKind::Categorical => {
                    vocabularies.push((j, decl.categories.clone()));
                    for level in decl.categories.iter().skip(1) {
                        names.push(format!("{}={}", decl.name, level));
                        columns.push(ColumnEncoding::Indicator {
                            covariate: j,
                            level: level.clone(),
                        });
                    }
                }
            }
        }
        Ok(DesignSpec {
            names,
            columns,
            vocabularies,
        })
    }

    /// Intercept-only layout.
    pub fn intercept_only() -> Self {
        DesignSpec {
            names: vec!["(intercept)".to_string()],
            columns: Vec::new(),
            vocabularies: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    /// Category values not in the frozen vocabulary (encoded as reference).
    pub unseen_categories: usize,
}

pub fn build_design<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>, spec: &DesignSpec) -> Result<DesignMatrix> {
    let records: Vec<&PredictionRecord> = records.into_iter().collect();
    let mut m = DMatrix::zeros(records.len(), spec.width());
    let mut unseen = 0usize;
    for (i, rec) in records.iter().enumerate() {
        m[(i, 0)] = 1.0;
        for (c, enc) in spec.columns.iter().enumerate() {
            match enc {
                ColumnEncoding::ZScore { covariate, mean, sd } => match rec.covariates.get(*covariate) {
                    Some(CovariateValue::Numeric(v)) if v.is_finite() => m[(i, c + 1)] = (v - mean) / sd,
                    _ => {
                        return Err(AuditError::validation(format!(
                            "record `{}`: covariate `{}` missing or not numeric",
                            rec.id,
                            spec.names[c + 1]
                        )))
                    }
                },
                ColumnEncoding::Indicator { covariate, level } => match rec.covariates.get(*covariate) {
                    Some(CovariateValue::Category(v)) => {
                        if v == level {
                            m[(i, c + 1)] = 1.0;
                        }
                    }
                    _ => {
                        return Err(AuditError::validation(format!(
                            "record `{}`: covariate for `{}` missing or not categorical",
                            rec.id,
                            spec.names[c + 1]
                        )))
                    }
                },
            }
        }
        for (covariate, vocabulary) in &spec.vocabularies {
            if let Some(CovariateValue::Category(v)) = rec.covariates.get(*covariate) {
                if !vocabulary.contains(v) {
                    unseen += 1;
                }
            }
        }
    }
    Ok(DesignMatrix {
        matrix: m,
        unseen_categories: unseen,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerModel {
    pub coefficients: DVector<f64>,
    /// Set for models that predict one probability for every row.
    pub constant: Option<f64>,
    pub lambda: f64,
    pub diagnostics: FitDiagnostics,
}

impl LearnerModel {
    pub fn constant_probability(&self) -> Option<f64> {
        self.constant
    }
}

/// Penalized negative log-likelihood; the intercept (column 0) is not
/// penalized.
pub fn penalized_objective(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, lambda: f64) -> f64 {
    let eta = x * beta;
    let nll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| softplus(e) - yi * e)
        .sum();
    let penalty: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    nll + 0.5 * lambda * penalty
}

pub fn penalized_gradient(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let eta = x * beta;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, &yi)| sigmoid(e) - yi));
    let mut g = x.tr_mul(&resid);
    for j in 1..g.len() {
        g[j] += lambda * beta[j];
    }
    g
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

/// Fits the ridge logistic model.
///
/// Newton steps with step-halving; stops once the row-averaged gradient norm
/// is ≤ `tol` or after `max_iter` iterations (returned with
/// `converged = false`).
pub fn fit_logistic(x: &DMatrix<f64>, y: &[bool], options: FitOptions) -> Result<LearnerModel> {
    let (n, p) = x.shape();
    if n == 0 || n != y.len() {
        return Err(AuditError::validation(format!("fit_logistic: {n} design rows for {} labels", y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::validation("fit_logistic: design matrix has non-finite values"));
    }
    if !(options.lambda >= 0.0) {
        return Err(AuditError::config("fit_logistic: lambda must be ≥ 0"));
    }
    let positives = y.iter().filter(|&&v| v).count();
    let mean = positives as f64 / n as f64;
    let intercept_only = p == 1 && x.column(0).iter().all(|&v| v == 1.0);
    let constant_model = |prob: f64| {
        let mut coefficients = DVector::zeros(p);
        coefficients[0] = logit(prob.clamp(DEGENERATE_CLIP, 1.0 - DEGENERATE_CLIP));
        LearnerModel {
            coefficients,
            constant: Some(prob),
            lambda: options.lambda,
            diagnostics: FitDiagnostics {
                iterations: 0,
                gradient_norm: 0.0,
                converged: true,
            },
        }
    };
    if intercept_only {
        // Closed-form MLE: the fitted probability is the sample mean.
        let mut model = constant_model(mean);
        if positives != 0 && positives != n {
            model.coefficients[0] = logit(mean);
        }
        return Ok(model);
    }
    if positives == 0 || positives == n {
        return Ok(constant_model(mean.clamp(DEGENERATE_CLIP, 1.0 - DEGENERATE_CLIP)));
    }

    let yf: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut beta = DVector::zeros(p);
    beta[0] = logit(mean);
    let mut objective = penalized_objective(x, &yf, &beta, options.lambda);
    let mut grad = penalized_gradient(x, &yf, &beta, options.lambda);
    let mut gnorm = grad.norm() / n as f64;
    let mut iterations = 0;
    while gnorm > options.tol && iterations < options.max_iter {
        iterations += 1;
        let eta = x * &beta;
        let w: Vec<f64> = eta
            .iter()
            .map(|&e| {
                let mu = sigmoid(e);
                (mu * (1.0 - mu)).max(1e-12)
            })
            .collect();
        let mut xw = x.clone();
        for (i, wi) in w.iter().enumerate() {
            xw.row_mut(i).scale_mut(*wi);
        }
        let mut hessian = x.tr_mul(&xw);
        for j in 1..p {
            hessian[(j, j)] += options.lambda;
        }
        let step = solve_spd(hessian, &grad)
            .ok_or_else(|| AuditError::Numeric("fit_logistic: Newton system is singular".into()))?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &beta - &step * scale;
            let cand_obj = penalized_objective(x, &yf, &candidate, options.lambda);
            // Differences at rounding level count as ties, so Newton steps
            // near the optimum are not halved away.
            if cand_obj <= objective + 8.0 * f64::EPSILON * objective.abs() {
                beta = candidate;
                objective = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        grad = penalized_gradient(x, &yf, &beta, options.lambda);
        gnorm = grad.norm() / n as f64;
        if !accepted {
            break;
        }
    }
    Ok(LearnerModel {
        coefficients: beta,
        constant: None,
        lambda: options.lambda,
        diagnostics: FitDiagnostics {
            iterations,
            gradient_norm: gnorm,
            converged: gnorm <= options.tol,
        },
    })
}

/// Solves `h · d = g` for a symmetric positive (semi)definite `h`, adding a
/// small diagonal jitter when the plain Cholesky factorization fails.
fn solve_spd(h: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().amax().max(1.0);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut hj = h.clone();
        for j in 0..hj.nrows() {
            hj[(j, j)] += jitter;
        }
        if let Some(chol) = hj.cholesky() {
            return Some(chol.solve(g));
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    None
}

pub fn predict_prob(model: &LearnerModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.coefficients.len() {
        return Err(AuditError::validation(format!(
            "predict_prob: design has {} columns, model expects {}",
            x.ncols(),
            model.coefficients.len()
        )));
    }
    if let Some(p) = model.constant {
        return Ok(vec![p; x.nrows()]);
    }
    Ok((x * &model.coefficients).iter().map(|&e| sigmoid(e)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_record(v: f64) -> PredictionRecord {
        PredictionRecord {
            id: v.to_string(),
            y_true: false,
            y_score: Some(0.5),
            y_pred: None,
            attributes: vec![],
            covariates: vec![CovariateValue::Numeric(v)],
        }
    }

    fn numeric_decl() -> Vec<CovariateDecl> {
        vec![CovariateDecl {
            name: "z".into(),
            kind: CovariateKind::Numeric,
            categories: vec![],
        }]
    }

    #[test]
    fn zscore_design() {
        let recs: Vec<_> = [1.0, 2.0, 3.0].iter().map(|&v| numeric_record(v)).collect();
        let spec = DesignSpec::fit(&numeric_decl(), &recs).unwrap();
        let d = build_design(&recs, &spec).unwrap().matrix;
        assert_eq!(d.ncols(), 2);
        assert!((d[(0, 1)] + 1.224744871391589).abs() < 1e-12);
        assert_eq!(d[(1, 1)], 0.0);
        assert!((d[(2, 1)] - 1.224744871391589).abs() < 1e-12);
        assert!(d.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn categorical_design_drops_reference() {
        let decl = vec![CovariateDecl {
            name: "site".into(),
            kind: CovariateKind::Categorical,
            categories: vec!["a".into(), "b".into(), "c".into()],
        }];
        let rec = |c: &str| PredictionRecord {
            covariates: vec![CovariateValue::Category(c.into())],
            ..numeric_record(0.0)
        };
        let recs = vec![rec("a"), rec("b"), rec("c"), rec("zzz")];
        let spec = DesignSpec::fit(&decl, &recs[..3]).unwrap();
        assert_eq!(spec.width(), 3);
        let d = build_design(&recs, &spec).unwrap();
        assert_eq!(d.matrix.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        assert_eq!(d.matrix.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
        assert_eq!(d.matrix.row(3).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        assert_eq!(d.unseen_categories, 1);
    }

    #[test]
    fn no_covariates_is_intercept_only() {
        let spec = DesignSpec::fit(&[], &[numeric_record(1.0)]).unwrap();
        assert_eq!(spec.width(), 1);
    }

    #[test]
    fn missing_covariate_is_an_error() {
        let spec = DesignSpec::fit(&numeric_decl(), &[numeric_record(1.0)]).unwrap();
        let mut r = numeric_record(1.0);
        r.covariates.clear();
        assert!(build_design(&[r], &spec).is_err());
    }

    #[test]
    fn intercept_only_fits() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let m = fit_logistic(&x, &[true, false, true, false], FitOptions::default()).unwrap();
        assert_eq!(m.coefficients[0], 0.0);
        let m = fit_logistic(&x, &[true, true, true, false], FitOptions::default()).unwrap();
        assert!((m.coefficients[0] - 3f64.ln()).abs() < 1e-12);
        assert_eq!(predict_prob(&m, &x).unwrap(), vec![0.75; 4]);
    }

    #[test]
    fn separable_data_with_ridge_converges() {
        let x = DMatrix::from_row_slice(6, 2, &[1.0, -2.0, 1.0, -1.5, 1.0, -1.0, 1.0, 1.0, 1.0, 1.5, 1.0, 2.0]);
        let y = [false, false, false, true, true, true];
        let m = fit_logistic(&x, &y, FitOptions { lambda: 0.1, ..FitOptions::default() }).unwrap();
        assert!(m.diagnostics.converged);
        assert!(m.coefficients.iter().all(|c| c.is_finite()));
        let p = predict_prob(&m, &x).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p[5] > p[0]);
    }

    #[test]
    fn single_class_with_covariates_is_clipped_constant() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 1.0, 0.2, 1.0, 0.3]);
        let m = fit_logistic(&x, &[false, false, false], FitOptions::default()).unwrap();
        assert_eq!(m.constant, Some(DEGENERATE_CLIP));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 1.0, 0.0]);
        assert!(fit_logistic(&x, &[true, false], FitOptions::default()).is_err());
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(fit_logistic(&x, &[true], FitOptions::default()).is_err());
        let m = fit_logistic(&x, &[true, false], FitOptions::default()).unwrap();
        assert!(predict_prob(&m, &DMatrix::from_element(2, 2, 1.0)).is_err());
    }

    #[test]
    fn zero_and_fixed_coefficients_predict() {
        let m = LearnerModel {
            coefficients: DVector::zeros(2),
            constant: None,
            lambda: 0.0,
            diagnostics: FitDiagnostics {
                iterations: 0,
                gradient_norm: 0.0,
                converged: true,
            },
        };
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 1.0, -1.0]);
        assert_eq!(predict_prob(&m, &x).unwrap(), vec![0.5, 0.5]);
        let m = LearnerModel {
            coefficients: DVector::from_vec(vec![logit(0.9)]),
            ..m
        };
        let p = predict_prob(&m, &DMatrix::from_element(3, 1, 1.0)).unwrap();
        assert!(p.iter().all(|v| (v - 0.9).abs() < 1e-15));
    }
}
