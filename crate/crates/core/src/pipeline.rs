//! Binding-affinity pipelines: IC50 normalization, metrics, benchmark TSV
//! ingestion, and the fixed-allele and pan-allele cross-validation runs.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::AminoChain;
use crate::error::{Error, Result};
use crate::gram::pan_values;
use crate::kernel::{KernelParams, StringKernel};
use crate::regression::{solve_rls, GridSpec, LooSolver};

pub const MIN_PEPTIDE_LEN: usize = 9;

/// IC50 (nM) taken as the binder cutoff before normalization.
pub const BINDER_IC50: f64 = 500.0;

/// `psi_b`: 1 below 1 nM, 0 above `b`, `1 - log_b x` in between.
pub fn normalize_ic50(x: f64, base: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "IC50 must be positive, got {x}"
        )));
    }
    if base.is_nan() || base <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "base must exceed 1, got {base}"
        )));
    }
    Ok(if x > base {
        0.0
    } else if x < 1.0 {
        1.0
    } else {
        1.0 - x.ln() / base.ln()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub base: f64,
}

impl NormalizationSpec {
    pub fn new(base: f64) -> Result<Self> {
        if !base.is_finite() || base <= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "base must exceed 1, got {base}"
            )));
        }
        Ok(NormalizationSpec { base })
    }

    pub fn fixed_allele() -> Self {
        NormalizationSpec { base: 50_000.0 }
    }

    pub fn pan_allele() -> Self {
        NormalizationSpec { base: 15_000.0 }
    }

    pub fn normalize(&self, ic50: f64) -> Result<f64> {
        normalize_ic50(ic50, self.base)
    }

    /// Binder threshold `psi_b(500)`.
    pub fn theta(&self) -> f64 {
        1.0 - BINDER_IC50.ln() / self.base.ln()
    }
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(Error::LengthMismatch(pred.len(), obs.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("rmse of no samples".into()));
    }
    let ss: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Fraction of (binder, non-binder) pairs ranked strictly correctly.
/// Binders have `obs > theta`; tied predictions score 0.
pub fn auc(pred: &[f64], obs: &[f64], theta: f64) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(Error::LengthMismatch(pred.len(), obs.len()));
    }
    if pred.iter().any(|p| p.is_nan()) {
        return Err(Error::Numeric("NaN prediction in AUC input".into()));
    }
    let mut non: Vec<f64> = Vec::new();
    let mut bind: Vec<f64> = Vec::new();
    for (&p, &o) in pred.iter().zip(obs) {
        if o > theta {
            bind.push(p);
        } else {
            non.push(p);
        }
    }
    if bind.is_empty() || non.is_empty() {
        return Err(Error::UndefinedAuc(format!(
            "{} binders and {} non-binders at threshold {theta}",
            bind.len(),
            non.len()
        )));
    }
    non.sort_by(f64::total_cmp);
    let hits: u64 = bind
        .iter()
        .map(|&b| non.partition_point(|&n| n < b) as u64)
        .sum();
    Ok(hits as f64 / (bind.len() as f64 * non.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BindingRecord {
    pub allele: String,
    pub peptide: AminoChain,
    /// Normalized affinity in `[0, 1]`.
    pub affinity: f64,
    pub fold: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    #[default]
    Ic50,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub value_kind: ValueKind,
    pub normalization: NormalizationSpec,
    /// Drop alleles whose records are all binders or all non-binders.
    pub drop_single_class: bool,
}

impl IngestOptions {
    pub fn new(value_kind: ValueKind, normalization: NormalizationSpec) -> Self {
        IngestOptions {
            value_kind,
            normalization,
            drop_single_class: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BindingDataset {
    pub records: Vec<BindingRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestSummary {
    pub rows: usize,
    pub exact_duplicates: usize,
    /// Pairs dropped for carrying different affinities.
    pub conflicting_pairs: usize,
    pub short_peptides: usize,
    pub invalid_peptides: usize,
    pub dropped_alleles: Vec<String>,
}

impl BindingDataset {
    pub fn new(records: Vec<BindingRecord>) -> Result<Self> {
        for r in &records {
            if !(0.0..=1.0).contains(&r.affinity) {
                return Err(Error::InvalidParameter(format!(
                    "affinity {} outside [0, 1]",
                    r.affinity
                )));
            }
        }
        Ok(BindingDataset { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Allele names in order of first appearance.
    pub fn alleles(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.allele.as_str()))
            .map(|r| r.allele.clone())
            .collect()
    }

    /// Records of one allele, in dataset order.
    pub fn for_allele(&self, allele: &str) -> Vec<&BindingRecord> {
        self.records.iter().filter(|r| r.allele == allele).collect()
    }

    pub fn restrict_alleles(&self, keep: &[&str]) -> BindingDataset {
        BindingDataset {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.allele.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Fill in missing folds with a seeded random `k`-way split per allele.
    pub fn assign_missing_folds<R: Rng + ?Sized>(&mut self, k: u32, rng: &mut R) {
        for allele in self.alleles() {
            let mut idx: Vec<usize> = (0..self.records.len())
                .filter(|&i| self.records[i].allele == allele && self.records[i].fold.is_none())
                .collect();
            idx.shuffle(rng);
            for (n, i) in idx.into_iter().enumerate() {
                self.records[i].fold = Some(1 + (n as u32 % k));
            }
        }
    }
}

/// Reads `allele_name  peptide_sequence  value  [fold]` rows and applies
/// the cleaning rules: exact duplicates keep one copy, pairs with
/// conflicting values are dropped, peptides shorter than 9 are dropped, and
/// (optionally) alleles whose data cannot define an AUC are dropped.
///
/// A header row is recognized by a non-numeric value column. Lines starting
/// with `#` are comments.
pub fn ingest_binding_tsv<R: BufRead>(
    reader: R,
    options: &IngestOptions,
) -> Result<(BindingDataset, IngestSummary)> {
    let mut summary = IngestSummary::default();
    // (allele, peptide) -> (first record, conflicting)
    let mut pairs: Vec<(BindingRecord, bool)> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    let mut seen_data = false;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if trimmed.contains('\t') {
            trimmed.split('\t').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        if cols.len() < 3 || cols.len() > 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 or 4 columns, found {}", cols.len()),
            });
        }
        let raw: f64 = match cols[2].parse() {
            Ok(v) => v,
            Err(_) if !seen_data => {
                seen_data = true;
                continue;
            }
            Err(_) => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("value {:?} is not a number", cols[2]),
                })
            }
        };
        seen_data = true;
        summary.rows += 1;
        let affinity = match options.value_kind {
            ValueKind::Ic50 => options
                .normalization
                .normalize(raw)
                .map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?,
            ValueKind::Normalized if (0.0..=1.0).contains(&raw) => raw,
            ValueKind::Normalized => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("normalized value {raw} outside [0, 1]"),
                })
            }
        };
        let fold = match cols.get(3) {
            Some(f) => Some(f.parse::<u32>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("fold {f:?} is not a non-negative integer"),
            })?),
            None => None,
        };
        let peptide = match AminoChain::parse(cols[1]) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("line {lineno}: peptide dropped: {e}");
                summary.invalid_peptides += 1;
                continue;
            }
        };
        if peptide.len() < MIN_PEPTIDE_LEN {
            log::warn!("line {lineno}: peptide {peptide} shorter than {MIN_PEPTIDE_LEN}; dropped");
            summary.short_peptides += 1;
            continue;
        }
        let key = (cols[0].to_string(), peptide.as_str().to_string());
        match index.get(&key) {
            Some(&i) => {
                if pairs[i].0.affinity == affinity {
                    summary.exact_duplicates += 1;
                } else {
                    pairs[i].1 = true;
                }
            }
            None => {
                index.insert(key, pairs.len());
                pairs.push((
                    BindingRecord {
                        allele: cols[0].to_string(),
                        peptide,
                        affinity,
                        fold,
                    },
                    false,
                ));
            }
        }
    }

    summary.conflicting_pairs = pairs.iter().filter(|(_, c)| *c).count();
    let mut dataset = BindingDataset {
        records: pairs
            .into_iter()
            .filter(|(_, c)| !c)
            .map(|(r, _)| r)
            .collect(),
    };
    if options.drop_single_class {
        let theta = options.normalization.theta();
        let mut keep = Vec::new();
        for allele in dataset.alleles() {
            let recs = dataset.for_allele(&allele);
            let binders = recs.iter().filter(|r| r.affinity > theta).count();
            if binders == 0 || binders == recs.len() {
                log::warn!("allele {allele}: single-class data cannot define AUC; dropped");
                summary.dropped_alleles.push(allele);
            } else {
                keep.push(allele);
            }
        }
        let keep: Vec<&str> = keep.iter().map(String::as_str).collect();
        dataset = dataset.restrict_alleles(&keep);
    }
    Ok((dataset, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub allele: String,
    pub n: usize,
    pub rmse: f64,
    /// `None` when the allele's observations are single-class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// One row per allele (first-appearance order) from per-sample
    /// predictions.
    pub fn from_predictions(predictions: &[PredictionRow], theta: f64) -> Result<Self> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: HashMap<&str, (Vec<f64>, Vec<f64>)> = HashMap::new();
        for p in predictions {
            let e = groups.entry(p.allele.as_str()).or_insert_with(|| {
                order.push(p.allele.as_str());
                (Vec::new(), Vec::new())
            });
            e.0.push(p.predicted);
            e.1.push(p.observed);
        }
        let rows = order
            .into_iter()
            .map(|a| {
                let (pred, obs) = &groups[a];
                let auc = match auc(pred, obs, theta) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedAuc(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(MetricsRow {
                    allele: a.to_string(),
                    n: pred.len(),
                    rmse: rmse(pred, obs)?,
                    auc,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsReport { rows })
    }

    pub fn average_rmse(&self) -> f64 {
        mean(self.rows.iter().map(|r| (r.rmse, 1.0)))
    }

    pub fn weighted_rmse(&self) -> f64 {
        mean(self.rows.iter().map(|r| (r.rmse, r.n as f64)))
    }

    pub fn average_auc(&self) -> f64 {
        mean(self.rows.iter().filter_map(|r| r.auc.map(|a| (a, 1.0))))
    }

    /// Peptide-count weighted AUC over rows where AUC is defined.
    pub fn weighted_auc(&self) -> f64 {
        mean(
            self.rows
                .iter()
                .filter_map(|r| r.auc.map(|a| (a, r.n as f64))),
        )
    }

    pub fn row(&self, allele: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.allele == allele)
    }

    pub fn to_tsv(&self) -> String {
        let fmt_auc = |a: Option<f64>| a.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("allele\tn_peptides\trmse\tauc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\n",
                r.allele,
                r.n,
                r.rmse,
                fmt_auc(r.auc)
            ));
        }
        let total: usize = self.rows.iter().map(|r| r.n).sum();
        out.push_str(&format!(
            "average\t{}\t{:.6}\t{}\n",
            total,
            self.average_rmse(),
            fmt_auc(Some(self.average_auc()))
        ));
        out.push_str(&format!(
            "weighted_average\t{}\t{:.6}\t{}\n",
            total,
            self.weighted_rmse(),
            fmt_auc(Some(self.weighted_auc()))
        ));
        out
    }
}

fn mean(items: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (num, den) = items.fold((0.0, 0.0), |(n, d), (v, w)| (n + v * w, d + w));
    num / den
}

/// One held-out prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub allele: String,
    pub peptide: String,
    pub fold: u32,
    pub observed: f64,
    pub predicted: f64,
    pub beta: f64,
    pub lambda: f64,
}

pub fn predictions_tsv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("allele\tpeptide\tfold\tobserved\tpredicted\tbeta\tlambda\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:e}\t{:e}\n",
            r.allele, r.peptide, r.fold, r.observed, r.predicted, r.beta, r.lambda
        ));
    }
    out
}

/// Parameters chosen on the training part of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldChoice {
    /// Allele name, or `*` for a pan-allele fold.
    pub allele: String,
    pub fold: u32,
    pub beta: f64,
    pub lambda: f64,
    pub loo_rmse: f64,
    pub n_train: usize,
}

pub fn choices_tsv(choices: &[FoldChoice]) -> String {
    let mut out = String::from("allele\tfold\tbeta\tlambda\tloo_rmse\tn_train\n");
    for c in choices {
        out.push_str(&format!(
            "{}\t{}\t{:e}\t{:e}\t{:.10}\t{}\n",
            c.allele, c.fold, c.beta, c.lambda, c.loo_rmse, c.n_train
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRow>,
    pub choices: Vec<FoldChoice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedAlleleOptions {
    pub grid: GridSpec,
    pub k_max: Option<usize>,
    pub theta: f64,
}

impl FixedAlleleOptions {
    pub fn new(grid: GridSpec) -> Self {
        FixedAlleleOptions {
            grid,
            k_max: None,
            theta: NormalizationSpec::fixed_allele().theta(),
        }
    }
}

struct CvOutcome {
    predictions: Vec<f64>,
    choices: Vec<(u32, f64, f64, f64, usize)>,
}

/// For each fold: leave-one-out grid search over `(beta, lambda)` on the
/// other folds, refit at the winner, predict the fold. `kernel_at(beta)`
/// returns the full sample kernel.
fn cross_validate<F>(
    labels: &[f64],
    folds: &[u32],
    grid: &GridSpec,
    kernel_at: F,
) -> Result<CvOutcome>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    let betas = grid.betas.values()?;
    let lambdas = grid.lambdas.values()?;
    let mut fold_ids = folds.to_vec();
    fold_ids.sort_unstable();
    fold_ids.dedup();
    if fold_ids.len() < 2 {
        return Err(Error::InvalidParameter(
            "cross validation needs at least 2 folds".into(),
        ));
    }
    let m = labels.len();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = fold_ids
        .iter()
        .map(|&f| {
            (
                (0..m).filter(|&i| folds[i] != f).collect(),
                (0..m).filter(|&i| folds[i] == f).collect(),
            )
        })
        .collect();

    struct Best {
        beta: f64,
        lambda: f64,
        rmse: f64,
        preds: Vec<f64>,
    }
    let mut best: Vec<Option<Best>> = (0..splits.len()).map(|_| None).collect();

    for &beta in &betas {
        let k = kernel_at(beta)?;
        let updates: Vec<Option<Best>> = splits
            .par_iter()
            .zip(best.par_iter())
            .map(|((train, test), current)| {
                let kt = DMatrix::from_fn(train.len(), train.len(), |i, j| k[(train[i], train[j])]);
                let y: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
                let solver = LooSolver::new(kt.clone(), &y)?;
                let mut cell: Option<(f64, f64)> = None;
                for &lambda in &lambdas {
                    let r = solver.residuals(lambda)?.rmse();
                    if r.is_finite() && cell.is_none_or(|(_, b)| r < b) {
                        cell = Some((lambda, r));
                    }
                }
                let Some((lambda, r)) = cell else {
                    return Ok(None);
                };
                if current.as_ref().is_some_and(|c| c.rmse <= r) {
                    return Ok(None);
                }
                let c = solve_rls(&kt, &y, lambda)?;
                let preds = test
                    .iter()
                    .map(|&t| {
                        train
                            .iter()
                            .zip(c.iter())
                            .map(|(&i, ci)| ci * k[(t, i)])
                            .sum()
                    })
                    .collect();
                Ok(Some(Best {
                    beta,
                    lambda,
                    rmse: r,
                    preds,
                }))
            })
            .collect::<Result<_>>()?;
        for (slot, u) in best.iter_mut().zip(updates) {
            if u.is_some() {
                *slot = u;
            }
        }
    }

    let mut predictions = vec![f64::NAN; m];
    let mut choices = Vec::new();
    for ((fold, (train, test)), b) in fold_ids.iter().zip(&splits).zip(best) {
        let b = b.ok_or_else(|| Error::Numeric(format!("fold {fold}: no finite LOO score")))?;
        for (&t, p) in test.iter().zip(&b.preds) {
            predictions[t] = *p;
        }
        choices.push((*fold, b.beta, b.lambda, b.rmse, train.len()));
    }
    Ok(CvOutcome {
        predictions,
        choices,
    })
}

fn require_folds(records: &[&BindingRecord]) -> Result<Vec<u32>> {
    records
        .iter()
        .map(|r| {
            r.fold.ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "record {}/{} has no fold label",
                    r.allele, r.peptide
                ))
            })
        })
        .collect()
}

/// Per-allele cross-validated RLS with the peptide string kernel.
pub fn run_fixed_allele(
    dataset: &BindingDataset,
    options: &FixedAlleleOptions,
) -> Result<PipelineRun> {
    if dataset.is_empty() {
        return Err(Error::Empty("binding dataset".into()));
    }
    let mut predictions = Vec::new();
    let mut choices = Vec::new();
    for allele in dataset.alleles() {
        let recs = dataset.for_allele(&allele);
        let folds = require_folds(&recs)?;
        let labels: Vec<f64> = recs.iter().map(|r| r.affinity).collect();
        let chains: Vec<AminoChain> = recs.iter().map(|r| r.peptide.clone()).collect();
        log::info!("allele {allele}: {} peptides", chains.len());
        let out = cross_validate(&labels, &folds, &options.grid, |beta| {
            let params = KernelParams::new(beta)?.with_k_max(options.k_max)?;
            Ok(StringKernel::blosum(params)?.gram_values(&chains))
        })
        .map_err(|e| annotate(e, &allele))?;
        collect(&allele, &recs, &folds, out, &mut predictions, &mut choices);
    }
    let report = MetricsReport::from_predictions(&predictions, options.theta)?;
    Ok(PipelineRun {
        report,
        predictions,
        choices,
    })
}

fn annotate(e: Error, allele: &str) -> Error {
    match e {
        Error::InvalidParameter(m) => Error::InvalidParameter(format!("allele {allele}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("allele {allele}: {m}")),
        other => other,
    }
}

fn collect(
    label: &str,
    recs: &[&BindingRecord],
    folds: &[u32],
    out: CvOutcome,
    predictions: &mut Vec<PredictionRow>,
    choices: &mut Vec<FoldChoice>,
) {
    let chosen: HashMap<u32, (f64, f64)> = out.choices.iter().map(|c| (c.0, (c.1, c.2))).collect();
    for ((r, &fold), &p) in recs.iter().zip(folds).zip(&out.predictions) {
        let (beta, lambda) = chosen[&fold];
        predictions.push(PredictionRow {
            allele: r.allele.clone(),
            peptide: r.peptide.to_string(),
            fold,
            observed: r.affinity,
            predicted: p,
            beta,
            lambda,
        });
    }
    choices.extend(
        out.choices
            .into_iter()
            .map(|(fold, beta, lambda, loo_rmse, n_train)| FoldChoice {
                allele: label.to_string(),
                fold,
                beta,
                lambda,
                loo_rmse,
                n_train,
            }),
    );
}

/// Peptide-count weighted mean of the per-allele fold-averaged betas.
/// Each item is `(fold betas, peptide count)`.
pub fn aggregate_beta(per_allele: &[(Vec<f64>, usize)]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (betas, n) in per_allele {
        if betas.is_empty() {
            return Err(Error::Empty("allele without fold betas".into()));
        }
        let m = betas.iter().sum::<f64>() / betas.len() as f64;
        num += *n as f64 * m;
        den += *n as f64;
    }
    if den == 0.0 {
        return Err(Error::Empty("no peptides to weight betas".into()));
    }
    Ok(num / den)
}

impl PipelineRun {
    /// [`aggregate_beta`] over this run's per-fold choices.
    pub fn aggregate_beta(&self) -> Result<f64> {
        let items: Vec<(Vec<f64>, usize)> = self
            .report
            .rows
            .iter()
            .map(|row| {
                let betas = self
                    .choices
                    .iter()
                    .filter(|c| c.allele == row.allele)
                    .map(|c| c.beta)
                    .collect();
                (betas, row.n)
            })
            .collect();
        aggregate_beta(&items)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanAlleleOptions {
    pub beta_peptide: f64,
    /// Grid over `(beta_allele, lambda)`.
    pub grid: GridSpec,
    pub k_max: Option<usize>,
    pub theta: f64,
}

impl PanAlleleOptions {
    pub fn new(grid: GridSpec) -> Self {
        PanAlleleOptions {
            beta_peptide: 0.11387,
            grid,
            k_max: None,
            theta: NormalizationSpec::pan_allele().theta(),
        }
    }
}

/// Pan-allele cross validation with the product kernel over
/// (allele, peptide) pairs. `alleles` maps every allele name in the dataset
/// to its sequence.
pub fn run_pan_allele(
    dataset: &BindingDataset,
    alleles: &BTreeMap<String, AminoChain>,
    options: &PanAlleleOptions,
) -> Result<PipelineRun> {
    if dataset.is_empty() {
        return Err(Error::Empty("binding dataset".into()));
    }
    let allele_names = dataset.alleles();
    let allele_chains: Vec<AminoChain> = allele_names
        .iter()
        .map(|a| {
            alleles
                .get(a)
                .cloned()
                .ok_or_else(|| Error::UnknownId(format!("allele {a} has no sequence")))
        })
        .collect::<Result<_>>()?;
    let allele_pos: HashMap<&str, usize> = allele_names
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();

    let mut peptides: Vec<AminoChain> = Vec::new();
    let mut peptide_pos: HashMap<&str, usize> = HashMap::new();
    for r in &dataset.records {
        if !peptide_pos.contains_key(r.peptide.as_str()) {
            peptide_pos.insert(r.peptide.as_str(), peptides.len());
            peptides.push(r.peptide.clone());
        }
    }
    let recs: Vec<&BindingRecord> = dataset.records.iter().collect();
    let folds = require_folds(&recs)?;
    let labels: Vec<f64> = recs.iter().map(|r| r.affinity).collect();
    let pairs: Vec<(usize, usize)> = recs
        .iter()
        .map(|r| {
            (
                allele_pos[r.allele.as_str()],
                peptide_pos[r.peptide.as_str()],
            )
        })
        .collect();

    let peptide_params = KernelParams::new(options.beta_peptide)?.with_k_max(options.k_max)?;
    let peptide_gram = StringKernel::blosum(peptide_params)?.gram_values(&peptides);
    let out = cross_validate(&labels, &folds, &options.grid, |beta_allele| {
        let params = KernelParams::new(beta_allele)?.with_k_max(options.k_max)?;
        let allele_gram = StringKernel::blosum(params)?.gram_values(&allele_chains);
        Ok(pan_values(&pairs, &allele_gram, &peptide_gram))
    })?;
    let mut predictions = Vec::new();
    let mut choices = Vec::new();
    collect("*", &recs, &folds, out, &mut predictions, &mut choices);
    let report = MetricsReport::from_predictions(&predictions, options.theta)?;
    Ok(PipelineRun {
        report,
        predictions,
        choices,
    })
}

/// `max |y_p - y_q| / d(p, q)` over pairs, from a distance table.
pub fn modulus_from_distances(preds: &[f64], dist: &DMatrix<f64>) -> Result<f64> {
    let n = preds.len();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "modulus needs at least 2 points".into(),
        ));
    }
    if dist.nrows() != n || dist.ncols() != n {
        return Err(Error::LengthMismatch(dist.nrows(), n));
    }
    let mut best = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist[(i, j)];
            if d.is_nan() || d <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "points {i} and {j} are at zero distance"
                )));
            }
            best = best.max((preds[i] - preds[j]).abs() / d);
        }
    }
    Ok(best)
}

/// Modulus of continuity of predictions over peptides in the RKHS metric.
pub fn modulus_of_continuity(
    preds: &[f64],
    peptides: &[AminoChain],
    kernel: &StringKernel,
) -> Result<f64> {
    if preds.len() != peptides.len() {
        return Err(Error::LengthMismatch(preds.len(), peptides.len()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(p) = peptides.iter().find(|p| !seen.insert(p.as_str())) {
        return Err(Error::InvalidParameter(format!("duplicate peptide {p}")));
    }
    let g = kernel.gram_values(peptides);
    let dist = g.map(|k| (2.0 - 2.0 * k).max(0.0).sqrt());
    modulus_from_distances(preds, &dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_constants() {
        assert!((normalize_ic50(500.0, 50_000.0).unwrap() - 0.4256).abs() < 5e-5);
        assert!((normalize_ic50(500.0, 15_000.0).unwrap() - 0.3537).abs() < 5e-5);
        assert_eq!(normalize_ic50(0.5, 50_000.0).unwrap(), 1.0);
        assert_eq!(normalize_ic50(50_001.0, 50_000.0).unwrap(), 0.0);
        assert!(normalize_ic50(0.0, 50_000.0).is_err());
        assert!(normalize_ic50(-3.0, 50_000.0).is_err());
        assert_eq!(
            NormalizationSpec::fixed_allele().theta(),
            normalize_ic50(500.0, 50_000.0).unwrap()
        );
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[0.2, 0.3], &[0.2, 0.3]).unwrap(), 0.0);
        let obs = [0.1, 0.5, 0.9];
        let pred: Vec<f64> = obs.iter().map(|o| o + 0.1).collect();
        assert!((rmse(&pred, &obs).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0], 0.5).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.7, 0.8], &[1.0, 1.0, 0.0], 0.5).unwrap(), 0.5);
        // Ties score zero.
        assert_eq!(auc(&[0.5, 0.5], &[1.0, 0.0], 0.5).unwrap(), 0.0);
        assert!(matches!(
            auc(&[0.1, 0.2], &[0.9, 0.8], 0.5),
            Err(Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        assert!(
            (aggregate_beta(&[(vec![0.1; 5], 10), (vec![0.1; 5], 7)]).unwrap() - 0.1).abs() < 1e-15
        );
        let v = aggregate_beta(&[(vec![0.1; 5], 100), (vec![0.2; 5], 300)]).unwrap();
        assert!((v - 0.175).abs() < 1e-12);
    }

    #[test]
    fn modulus_hand_example() {
        let d = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 1.0, 0.5, 0.0, 0.25, 1.0, 0.25, 0.0]);
        // |0.2-0.4|/0.5 = 0.4, |0.2-0.9|/1 = 0.7, |0.4-0.9|/0.25 = 2.0
        assert!((modulus_from_distances(&[0.2, 0.4, 0.9], &d).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(modulus_from_distances(&[0.3, 0.3, 0.3], &d).unwrap(), 0.0);
        let k = StringKernel::blosum(KernelParams::new(0.11387).unwrap()).unwrap();
        let p = AminoChain::parse("AAAAAAAAA").unwrap();
        assert!(modulus_of_continuity(&[0.1, 0.2], &[p.clone(), p], &k).is_err());
    }

    const TSV: &str = "allele_name\tpeptide_sequence\tvalue\tfold
DRB1*0101\tAAAAAAAAAK\t100\t1
DRB1*0101\tAAAAAAAAAK\t100\t1
DRB1*0101\tCCCCCCCCCK\t40000\t2
DRB1*0101\tCCCCCCCCCK\t30000\t2
DRB1*0101\tDDDDDDDDDK\t30000\t2
DRB1*0101\tEEEEEEEE\t10\t1
DRB1*0401\tAAAAAAAAAK\t10\t1
DRB1*0401\tGGGGGGGGGK\t20\t2
";

    #[test]
    fn ingest_cleaning_rules() {
        let opts = IngestOptions::new(ValueKind::Ic50, NormalizationSpec::fixed_allele());
        let (data, summary) = ingest_binding_tsv(TSV.as_bytes(), &opts).unwrap();
        assert_eq!(summary.rows, 8);
        assert_eq!(summary.exact_duplicates, 1);
        assert_eq!(summary.conflicting_pairs, 1);
        assert_eq!(summary.short_peptides, 1);
        assert_eq!(summary.dropped_alleles, vec!["DRB1*0401".to_string()]);
        let peps: Vec<&str> = data.records.iter().map(|r| r.peptide.as_str()).collect();
        assert_eq!(peps, ["AAAAAAAAAK", "DDDDDDDDDK"]);
    }

    #[test]
    fn ingest_reports_line_numbers() {
        let opts = IngestOptions::new(ValueKind::Ic50, NormalizationSpec::fixed_allele());
        let bad = "DRB1*0101\tAAAAAAAAAK\t100\nDRB1*0101\tAAAAAAAAAC\tabc\n";
        assert!(matches!(
            ingest_binding_tsv(bad.as_bytes(), &opts),
            Err(Error::Parse { line: 2, .. })
        ));
        let neg = "DRB1*0101\tAAAAAAAAAK\t-4\n";
        assert!(matches!(
            ingest_binding_tsv(neg.as_bytes(), &opts),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn single_fold_rejected() {
        let recs = (0..6)
            .map(|i| BindingRecord {
                allele: "A".into(),
                peptide: AminoChain::parse(&format!(
                    "AAAAAAAA{}",
                    ["C", "D", "E", "F", "G", "H"][i]
                ))
                .unwrap(),
                affinity: i as f64 / 6.0,
                fold: Some(1),
            })
            .collect();
        let data = BindingDataset::new(recs).unwrap();
        let grid = GridSpec {
            betas: crate::regression::ParamSeq::single(0.1),
            lambdas: crate::regression::ParamSeq::single(0.01),
        };
        assert!(matches!(
            run_fixed_allele(&data, &FixedAlleleOptions::new(grid)),
            Err(Error::InvalidParameter(_))
        ));
    }
}
