//! Regularized least squares on a precomputed kernel.
//!
//! With `m` training samples the estimator minimizes
//! `(1/m) sum (f(x_i) - y_i)^2 + lambda ||f||_K^2`, whose coefficients solve
//! `(K + m lambda I) c = y`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::GramMatrix;

/// `1 - H_ii` below this is treated as a degenerate leave-one-out sample.
const LEVERAGE_EPS: f64 = 1e-12;

/// Labeled samples addressed by position in a Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    sample_ids: Vec<usize>,
    labels: Vec<f64>,
}

impl TrainingSet {
    pub fn new(sample_ids: Vec<usize>, labels: Vec<f64>) -> Result<Self> {
        if sample_ids.len() != labels.len() {
            return Err(Error::LengthMismatch(sample_ids.len(), labels.len()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidParameter(format!(
                "duplicate sample id {dup}"
            )));
        }
        if let Some(y) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::InvalidParameter(format!("label {y} outside [0, 1]")));
        }
        Ok(TrainingSet { sample_ids, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Samples at the given positions of this set.
    pub fn subset(&self, positions: &[usize]) -> TrainingSet {
        TrainingSet {
            sample_ids: positions.iter().map(|&p| self.sample_ids[p]).collect(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsModel {
    /// Gram positions of the training samples, aligned with `coefficients`.
    pub sample_ids: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub fingerprint: String,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "lambda must be positive, got {lambda}"
        )))
    }
}

/// Solves `(K + ridge I) c = y` by Cholesky, falling back to SVD when the
/// factorization fails numerically.
pub fn solve_ridge(kernel: &DMatrix<f64>, labels: &[f64], ridge: f64) -> Result<DVector<f64>> {
    let m = labels.len();
    if kernel.nrows() != m || kernel.ncols() != m {
        return Err(Error::LengthMismatch(kernel.nrows(), m));
    }
    let mut a = kernel.clone();
    for i in 0..m {
        a[(i, i)] += ridge;
    }
    let y = DVector::from_column_slice(labels);
    let c = match Cholesky::new(a.clone()) {
        Some(ch) => ch.solve(&y),
        None => {
            log::warn!("Cholesky failed on {m}x{m} system; using SVD");
            a.clone()
                .svd(true, true)
                .solve(&y, 1e-300)
                .map_err(|e| Error::Numeric(e.to_string()))?
        }
    };
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite RLS coefficients".into()));
    }
    let residual = (&a * &c - &y).norm();
    let scale = a.norm() * c.norm() + y.norm();
    if scale > 0.0 && residual > 1e-8 * scale {
        return Err(Error::Numeric(format!(
            "RLS residual {residual:e} exceeds tolerance"
        )));
    }
    Ok(c)
}

/// RLS coefficients for kernel `K` over `m = labels.len()` samples.
pub fn solve_rls(kernel: &DMatrix<f64>, labels: &[f64], lambda: f64) -> Result<DVector<f64>> {
    check_lambda(lambda)?;
    solve_ridge(kernel, labels, labels.len() as f64 * lambda)
}

/// Fits RLS on the training rows of `gram`.
pub fn fit(gram: &GramMatrix, train: &TrainingSet, lambda: f64) -> Result<RlsModel> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if let Some(id) = train.sample_ids().iter().find(|&&i| i >= gram.len()) {
        return Err(Error::UnknownId(format!("sample {id}")));
    }
    let k = gram.submatrix(train.sample_ids(), train.sample_ids());
    let c = solve_rls(&k, train.labels(), lambda)?;
    Ok(RlsModel {
        sample_ids: train.sample_ids().to_vec(),
        coefficients: c.iter().copied().collect(),
        lambda,
        fingerprint: gram.fingerprint().to_string(),
    })
}

impl RlsModel {
    /// `rows[q][i] = K(x_i, query_q)`, one column per training sample.
    pub fn predict_rows(&self, rows: &DMatrix<f64>) -> Result<Vec<f64>> {
        if rows.ncols() != self.coefficients.len() {
            return Err(Error::LengthMismatch(rows.ncols(), self.coefficients.len()));
        }
        let c = DVector::from_column_slice(&self.coefficients);
        Ok((rows * c).iter().copied().collect())
    }

    /// Predictions at Gram positions `queries`.
    pub fn predict_in(&self, gram: &GramMatrix, queries: &[usize]) -> Result<Vec<f64>> {
        if let Some(q) = queries.iter().find(|&&q| q >= gram.len()) {
            return Err(Error::UnknownId(format!("sample {q}")));
        }
        self.predict_rows(&gram.submatrix(queries, &self.sample_ids))
    }

    /// `(1/m) sum (f(x_i) - y_i)^2 + lambda c^T K c` at the given coefficients.
    pub fn objective(
        kernel: &DMatrix<f64>,
        labels: &[f64],
        coefficients: &[f64],
        lambda: f64,
    ) -> f64 {
        let c = DVector::from_column_slice(coefficients);
        let kc = kernel * &c;
        let m = labels.len() as f64;
        let loss: f64 = kc
            .iter()
            .zip(labels)
            .map(|(f, y)| (f - y) * (f - y))
            .sum::<f64>()
            / m;
        loss + lambda * c.dot(&kc)
    }
}

/// Free-function form of [`RlsModel::predict_rows`].
pub fn predict(model: &RlsModel, gram_rows: &DMatrix<f64>) -> Result<Vec<f64>> {
    model.predict_rows(gram_rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooResiduals {
    /// `y_i - f^(-i)(x_i)`; `NaN` at skipped samples.
    pub residuals: Vec<f64>,
    /// Samples whose leverage was numerically one.
    pub skipped: Vec<usize>,
}

impl LooResiduals {
    /// Root mean square over the non-skipped residuals.
    pub fn rmse(&self) -> f64 {
        let kept: Vec<f64> = self
            .residuals
            .iter()
            .copied()
            .filter(|r| !r.is_nan())
            .collect();
        if kept.is_empty() {
            return f64::NAN;
        }
        (kept.iter().map(|r| r * r).sum::<f64>() / kept.len() as f64).sqrt()
    }

    /// Leave-one-out predictions `y_i - r_i`.
    pub fn predictions(&self, labels: &[f64]) -> Vec<f64> {
        labels
            .iter()
            .zip(&self.residuals)
            .map(|(y, r)| y - r)
            .collect()
    }
}

/// Closed-form leave-one-out residuals for every `lambda` from a single
/// eigendecomposition of the training kernel.
///
/// Each held-out model is the RLS estimator on the remaining `m - 1`
/// samples, i.e. with ridge `(m - 1) lambda`. With `H = K (K + (m-1) lambda I)^-1`
/// the residual is `(y_i - (Hy)_i) / (1 - H_ii)`.
#[derive(Debug, Clone)]
pub struct LooSolver {
    vectors: DMatrix<f64>,
    squared: DMatrix<f64>,
    values: DVector<f64>,
    projected: DVector<f64>,
    labels: Vec<f64>,
}

impl LooSolver {
    pub fn new(kernel: DMatrix<f64>, labels: &[f64]) -> Result<Self> {
        let m = labels.len();
        if kernel.nrows() != m || kernel.ncols() != m {
            return Err(Error::LengthMismatch(kernel.nrows(), m));
        }
        if m < 2 {
            return Err(Error::InvalidParameter(
                "leave-one-out needs at least 2 samples".into(),
            ));
        }
        let eig = SymmetricEigen::new(kernel);
        // The kernel is PSD; rounding can leave tiny negative eigenvalues.
        let values = eig.eigenvalues.map(|v| v.max(0.0));
        let vectors = eig.eigenvectors;
        let squared = vectors.component_mul(&vectors);
        let projected = vectors.tr_mul(&DVector::from_column_slice(labels));
        Ok(LooSolver {
            vectors,
            squared,
            values,
            projected,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn residuals(&self, lambda: f64) -> Result<LooResiduals> {
        check_lambda(lambda)?;
        let m = self.len();
        let ridge = (m - 1) as f64 * lambda;
        let shrink = self.values.map(|v| v / (v + ridge));
        let fitted = &self.vectors * self.projected.component_mul(&shrink);
        let leverage = &self.squared * &shrink;
        let mut residuals = Vec::with_capacity(m);
        let mut skipped = Vec::new();
        for i in 0..m {
            let denom = 1.0 - leverage[i];
            if denom <= LEVERAGE_EPS {
                log::warn!(
                    "leave-one-out sample {i} has leverage {}; skipped",
                    leverage[i]
                );
                skipped.push(i);
                residuals.push(f64::NAN);
            } else {
                residuals.push((self.labels[i] - fitted[i]) / denom);
            }
        }
        Ok(LooResiduals { residuals, skipped })
    }
}

/// Leave-one-out residuals of RLS on `train`.
pub fn loo_residuals(gram: &GramMatrix, train: &TrainingSet, lambda: f64) -> Result<LooResiduals> {
    check_lambda(lambda)?;
    let k = gram.submatrix(train.sample_ids(), train.sample_ids());
    LooSolver::new(k, train.labels())?.residuals(lambda)
}

/// Cross-validated predictions on a square kernel over all samples: each
/// fold is predicted by the model trained on the other folds.
pub fn kfold_predict_values(
    kernel: &DMatrix<f64>,
    labels: &[f64],
    folds: &[u32],
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let m = labels.len();
    if folds.len() != m {
        return Err(Error::LengthMismatch(folds.len(), m));
    }
    let mut fold_ids: Vec<u32> = folds.to_vec();
    fold_ids.sort_unstable();
    fold_ids.dedup();
    if fold_ids.len() < 2 {
        return Err(Error::InvalidParameter(
            "cross validation needs at least 2 folds".into(),
        ));
    }
    let mut out = vec![f64::NAN; m];
    for fold in fold_ids {
        let test: Vec<usize> = (0..m).filter(|&i| folds[i] == fold).collect();
        let train: Vec<usize> = (0..m).filter(|&i| folds[i] != fold).collect();
        let k = DMatrix::from_fn(train.len(), train.len(), |i, j| {
            kernel[(train[i], train[j])]
        });
        let y: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
        let c = solve_rls(&k, &y, lambda)?;
        for &t in &test {
            out[t] = train
                .iter()
                .zip(c.iter())
                .map(|(&i, ci)| ci * kernel[(t, i)])
                .sum();
        }
    }
    Ok(out)
}

/// [`kfold_predict_values`] over the rows of `gram` named by `data`.
///
/// `folds[i]` labels sample `i` of `data`; every label present forms one
/// fold.
pub fn kfold_predict(
    gram: &GramMatrix,
    data: &TrainingSet,
    folds: &[u32],
    lambda: f64,
) -> Result<Vec<f64>> {
    let k = gram.submatrix(data.sample_ids(), data.sample_ids());
    kfold_predict_values(&k, data.labels(), folds, lambda)
}

/// A sequence of candidate parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamSeq {
    /// `count` values from `start` to `end` with a constant ratio.
    Geometric {
        start: f64,
        end: f64,
        count: usize,
    },
    List {
        values: Vec<f64>,
    },
}

impl ParamSeq {
    pub fn geometric(start: f64, end: f64, count: usize) -> Self {
        ParamSeq::Geometric { start, end, count }
    }

    pub fn list(values: Vec<f64>) -> Self {
        ParamSeq::List { values }
    }

    pub fn single(value: f64) -> Self {
        ParamSeq::List {
            values: vec![value],
        }
    }

    /// Values in ascending order.
    pub fn values(&self) -> Result<Vec<f64>> {
        let mut v = match self {
            ParamSeq::Geometric { start, end, count } => {
                if *count == 0 {
                    return Err(Error::InvalidParameter("empty geometric sequence".into()));
                }
                if *count == 1 {
                    vec![*start]
                } else {
                    let ratio = (end.ln() - start.ln()) / (*count - 1) as f64;
                    (0..*count)
                        .map(|i| {
                            if i + 1 == *count {
                                *end
                            } else {
                                (start.ln() + ratio * i as f64).exp()
                            }
                        })
                        .collect()
                }
            }
            ParamSeq::List { values } => values.clone(),
        };
        if v.is_empty() {
            return Err(Error::InvalidParameter("empty parameter list".into()));
        }
        if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "grid values must be positive, got {x}"
            )));
        }
        v.sort_by(f64::total_cmp);
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub betas: ParamSeq,
    pub lambdas: ParamSeq,
}

impl GridSpec {
    /// Fixed-allele defaults: 30 geometric betas in `[0.001, 10]`,
    /// 15 geometric lambdas in `[e^-17, e^-3]`.
    pub fn fixed_allele_default() -> Self {
        GridSpec {
            betas: ParamSeq::geometric(0.001, 10.0, 30),
            lambdas: ParamSeq::geometric((-17f64).exp(), (-3f64).exp(), 15),
        }
    }

    /// Pan-allele defaults: allele betas `0.02 n` for `n = 1..=8`, lambdas
    /// `e^n` for `n = -17..=-9`.
    pub fn pan_allele_default() -> Self {
        GridSpec {
            betas: ParamSeq::list((1..=8).map(|n| 0.02 * n as f64).collect()),
            lambdas: ParamSeq::list((-17..=-9).map(|n| (n as f64).exp()).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub beta: f64,
    pub lambda: f64,
    pub loo_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub beta: f64,
    pub lambda: f64,
    pub loo_rmse: f64,
    pub table: Vec<GridCell>,
}

impl GridResult {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("beta\tlambda\tloo_rmse\n");
        for c in &self.table {
            out.push_str(&format!(
                "{:.6e}\t{:.6e}\t{:.10}\n",
                c.beta, c.lambda, c.loo_rmse
            ));
        }
        out
    }
}

/// Grid search over `(beta, lambda)` on training kernels produced by
/// `train_kernel(beta)`, scored by leave-one-out RMSE.
///
/// Ties go to the smaller beta, then the smaller lambda.
pub fn grid_search_kernels<F>(
    train_kernel: F,
    labels: &[f64],
    grid: &GridSpec,
) -> Result<GridResult>
where
    F: Fn(f64) -> Result<DMatrix<f64>> + Sync,
{
    let betas = grid.betas.values()?;
    let lambdas = grid.lambdas.values()?;
    let rows: Vec<Vec<GridCell>> = betas
        .par_iter()
        .map(|&beta| {
            let solver = LooSolver::new(train_kernel(beta)?, labels)?;
            lambdas
                .iter()
                .map(|&lambda| {
                    Ok(GridCell {
                        beta,
                        lambda,
                        loo_rmse: solver.residuals(lambda)?.rmse(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let table: Vec<GridCell> = rows.into_iter().flatten().collect();
    let best = table
        .iter()
        .filter(|c| c.loo_rmse.is_finite())
        .fold(None::<&GridCell>, |best, c| match best {
            Some(b) if b.loo_rmse <= c.loo_rmse => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| Error::Numeric("no grid cell produced a finite LOO score".into()))?;
    Ok(GridResult {
        beta: best.beta,
        lambda: best.lambda,
        loo_rmse: best.loo_rmse,
        table,
    })
}

/// Grid search where `build(beta)` yields a Gram matrix indexed like
/// `train.sample_ids()`.
pub fn grid_search<F>(build: F, train: &TrainingSet, grid: &GridSpec) -> Result<GridResult>
where
    F: Fn(f64) -> Result<Arc<GramMatrix>> + Sync,
{
    grid_search_kernels(
        |beta| {
            let gram = build(beta)?;
            Ok(gram.submatrix(train.sample_ids(), train.sample_ids()))
        },
        train.labels(),
        grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_from(values: DMatrix<f64>) -> GramMatrix {
        let ids = (0..values.nrows()).map(|i| i.to_string()).collect();
        GramMatrix::new(ids, values, "t".into()).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, n + 3, |_, _| rng.random::<f64>());
        let k = &x * x.transpose();
        let d: Vec<f64> = (0..n).map(|i| k[(i, i)].sqrt()).collect();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                k[(i, j)] / (d[i] * d[j])
            }
        })
    }

    #[test]
    fn single_sample_closed_form() {
        let g = gram_from(DMatrix::identity(1, 1));
        let t = TrainingSet::new(vec![0], vec![0.7]).unwrap();
        let m = fit(&g, &t, 0.25).unwrap();
        assert!((m.coefficients[0] - 0.7 / 1.25).abs() < 1e-12);
        let p = m.predict_in(&g, &[0]).unwrap();
        assert!((p[0] - 0.7 / 1.25).abs() < 1e-12);
    }

    #[test]
    fn zero_labels_zero_coefficients() {
        let g = gram_from(random_spd(6, 1));
        let t = TrainingSet::new((0..6).collect(), vec![0.0; 6]).unwrap();
        let m = fit(&g, &t, 0.01).unwrap();
        assert!(m.coefficients.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn zero_row_predicts_zero() {
        let g = gram_from(random_spd(4, 2));
        let t = TrainingSet::new((0..4).collect(), vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        let m = fit(&g, &t, 0.1).unwrap();
        assert_eq!(m.predict_rows(&DMatrix::zeros(1, 4)).unwrap(), vec![0.0]);
        assert!(m.predict_rows(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn rejects_bad_lambda_and_sets() {
        let g = gram_from(random_spd(3, 3));
        let t = TrainingSet::new(vec![0, 1], vec![0.1, 0.2]).unwrap();
        assert!(fit(&g, &t, 0.0).is_err());
        assert!(fit(&g, &t, -1.0).is_err());
        assert!(TrainingSet::new(vec![0, 0], vec![0.1, 0.2]).is_err());
        assert!(TrainingSet::new(vec![0], vec![1.5]).is_err());
        assert!(TrainingSet::new(vec![0, 1], vec![0.1]).is_err());
    }

    #[test]
    fn identical_samples_have_equal_residuals() {
        let k = DMatrix::from_element(2, 2, 1.0);
        let r = LooSolver::new(k, &[0.4, 0.4])
            .unwrap()
            .residuals(0.1)
            .unwrap();
        assert!(r.residuals.iter().all(|v| v.is_finite()));
        assert!((r.residuals[0] - r.residuals[1]).abs() < 1e-12);
    }

    #[test]
    fn huge_lambda_residuals_approach_labels() {
        let g = gram_from(random_spd(8, 4));
        let y = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let t = TrainingSet::new((0..8).collect(), y.clone()).unwrap();
        let r = loo_residuals(&g, &t, 1e9).unwrap();
        for (ri, yi) in r.residuals.iter().zip(&y) {
            assert!((ri - yi).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_leverage_is_skipped() {
        // Duplicated sample with tiny lambda: removing one copy leaves its
        // twin, so leverage is not 1; a single isolated point with zero
        // kernel row is fine too. Force leverage 1 via a huge kernel value.
        let mut k = DMatrix::identity(3, 3);
        k[(0, 0)] = 1e30;
        let r = LooSolver::new(k, &[0.5, 0.2, 0.3])
            .unwrap()
            .residuals(1e-12)
            .unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert!(r.residuals[0].is_nan());
        assert!(r.rmse().is_finite());
    }

    #[test]
    fn single_fold_rejected() {
        let k = random_spd(4, 5);
        assert!(kfold_predict_values(&k, &[0.1; 4], &[1, 1, 1, 1], 0.1).is_err());
    }

    #[test]
    fn param_seq_values() {
        let g = ParamSeq::geometric(0.001, 10.0, 30).values().unwrap();
        assert_eq!(g.len(), 30);
        assert!((g[0] - 0.001).abs() < 1e-15);
        assert_eq!(g[29], 10.0);
        let ratio = g[1] / g[0];
        assert!((g[15] / g[14] - ratio).abs() < 1e-9);
        assert_eq!(ParamSeq::single(0.5).values().unwrap(), vec![0.5]);
        assert!(ParamSeq::geometric(1.0, 2.0, 0).values().is_err());
        assert!(ParamSeq::list(vec![0.1, -1.0]).values().is_err());
        let pan = GridSpec::pan_allele_default();
        assert_eq!(pan.betas.values().unwrap().len(), 8);
        assert_eq!(pan.lambdas.values().unwrap().len(), 9);
    }

    #[test]
    fn one_cell_grid_returns_that_cell() {
        let k = random_spd(6, 6);
        let grid = GridSpec {
            betas: ParamSeq::single(0.3),
            lambdas: ParamSeq::single(0.01),
        };
        let y = [0.1, 0.4, 0.2, 0.9, 0.5, 0.6];
        let r = grid_search_kernels(|_| Ok(k.clone()), &y, &grid).unwrap();
        assert_eq!((r.beta, r.lambda), (0.3, 0.01));
        assert_eq!(r.table.len(), 1);
    }

    #[test]
    fn ties_prefer_smaller_parameters() {
        let k = random_spd(5, 7);
        let grid = GridSpec {
            betas: ParamSeq::list(vec![0.5, 0.2, 0.9]),
            lambdas: ParamSeq::list(vec![0.1]),
        };
        let y = [0.1, 0.4, 0.2, 0.9, 0.5];
        // Same kernel for every beta, so every cell ties.
        let r = grid_search_kernels(|_| Ok(k.clone()), &y, &grid).unwrap();
        assert_eq!(r.beta, 0.2);
    }
}
