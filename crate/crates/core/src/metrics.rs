//! Forecast verification: contingency tables, the Gandin-Murphy-Gerrity
//! score and its scoring matrix, Brier skill score and true skill
//! statistic on the >= M binarization, and the per-cell GMGS influence
//! decomposition. Everything here is fp64 regardless of model precision.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classes::{FlareClass, NUM_CLASSES};
use crate::error::MetricsError;

/// I x I counts of (observed, predicted) class pairs. Rows are observed,
/// columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_pairs(
        observed: &[usize],
        predicted: &[usize],
        n_classes: usize,
    ) -> Result<Self, MetricsError> {
        if observed.len() != predicted.len() {
            return Err(MetricsError::Undefined(
                "observed/predicted length mismatch".into(),
            ));
        }
        let mut t = Self::new(n_classes);
        for (&o, &p) in observed.iter().zip(predicted) {
            if o >= n_classes || p >= n_classes {
                return Err(MetricsError::Undefined(format!(
                    "class index out of range: ({o},{p})"
                )));
            }
            t.add(o, p);
        }
        Ok(t)
    }

    pub fn add(&mut self, observed: usize, predicted: usize) {
        self.counts[observed * self.n_classes + predicted] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, observed: usize, predicted: usize) -> u64 {
        self.counts[observed * self.n_classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Relative frequencies p_ij = counts_ij / N.
    pub fn relative(&self) -> Result<Vec<f64>, MetricsError> {
        let n = self.total();
        if n == 0 {
            return Err(MetricsError::Undefined("empty contingency table".into()));
        }
        Ok(self.counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    /// Observed marginals p_i = sum_j p_ij.
    pub fn observed_marginals(&self) -> Result<Vec<f64>, MetricsError> {
        let p = self.relative()?;
        Ok((0..self.n_classes)
            .map(|i| p[i * self.n_classes..(i + 1) * self.n_classes].iter().sum())
            .collect())
    }
}

/// Symmetric Gerrity scoring matrix with its odds ratios a_i.
#[derive(Debug, Clone)]
pub struct ScoringMatrix {
    pub n_classes: usize,
    pub s: Vec<f64>, // I x I, row-major
    pub a: Vec<f64>, // I entries; the last is zero by construction
}

impl ScoringMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n_classes + j]
    }
}

/// Build the scoring matrix from observed marginals.
///
/// With cumulative sums C_i, a_i = (1 - C_i)/C_i; for i <= j,
/// s_ij = [sum_{k<i} 1/a_k - (j - i) + sum_{k>=j, k<I-1} a_k] / (I-1),
/// filled symmetrically. Rejects any cumulative sum that hits 0 or 1
/// before the last class, which would divide by zero.
pub fn scoring_matrix(marginals: &[f64]) -> Result<ScoringMatrix, MetricsError> {
    let n = marginals.len();
    if n < 2 {
        return Err(MetricsError::DegenerateMarginals(
            "scoring matrix wants at least two classes".into(),
        ));
    }
    let total: f64 = marginals.iter().sum();
    if (total - 1.0).abs() > 1e-9 || marginals.iter().any(|&p| p < 0.0) {
        return Err(MetricsError::DegenerateMarginals(format!(
            "marginals must be non-negative and sum to 1, got sum {total}"
        )));
    }
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &p in marginals {
        acc += p;
        cum.push(acc);
    }
    for (i, &c) in cum.iter().enumerate().take(n - 1) {
        if c <= 0.0 || c >= 1.0 {
            return Err(MetricsError::DegenerateMarginals(format!(
                "cumulative sum {c} at class {i} leaves a_i undefined"
            )));
        }
    }
    let a: Vec<f64> = cum.iter().map(|&c| (1.0 - c) / c).collect();
    let inv = 1.0 / (n as f64 - 1.0);
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let recips: f64 = a[..i].iter().map(|&x| 1.0 / x).sum();
            let tail: f64 = a[j..n - 1].iter().sum();
            let val = inv * (recips - (j - i) as f64 + tail);
            s[i * n + j] = val;
            s[j * n + i] = val;
        }
    }
    Ok(ScoringMatrix { n_classes: n, s, a })
}

/// GMGS = tr(S^T . P) with S built from the table's observed marginals.
pub fn gmgs_score(table: &ContingencyTable) -> Result<f64, MetricsError> {
    let s = scoring_matrix(&table.observed_marginals()?)?;
    let p = table.relative()?;
    Ok(gmgs_with_matrix(&p, &s))
}

/// GMGS for a fixed scoring matrix and relative-frequency table.
pub fn gmgs_with_matrix(relative: &[f64], s: &ScoringMatrix) -> f64 {
    relative.iter().zip(&s.s).map(|(p, sv)| p * sv).sum()
}

/// Reduce 4-class labels and probabilities to the >= M binary task:
/// positive class {X, M}, positive probability p_X + p_M.
pub fn binarize_geq_m(labels: &[FlareClass], probs: &[[f64; NUM_CLASSES]]) -> (Vec<bool>, Vec<f64>) {
    let bin_labels = labels.iter().map(|l| l.is_geq_m()).collect();
    let bin_probs = probs.iter().map(|p| p[0] + p[1]).collect();
    (bin_labels, bin_probs)
}

/// Brier skill score of binary probabilities against climatology.
/// BS sums the squared error over both class indicators; f is the
/// positive-class frequency of the evaluated labels.
pub fn bss_geq_m(probs: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(MetricsError::Undefined(
            "BSS wants equal-length, non-empty inputs".into(),
        ));
    }
    if probs.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(MetricsError::Undefined("BSS probabilities outside [0,1]".into()));
    }
    let f = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
    let mut bs = 0.0;
    let mut bs_c = 0.0;
    for (&q, &y) in probs.iter().zip(labels) {
        let (yp, yn) = if y { (1.0, 0.0) } else { (0.0, 1.0) };
        bs += (q - yp).powi(2) + ((1.0 - q) - yn).powi(2);
        bs_c += (f - yp).powi(2) + ((1.0 - f) - yn).powi(2);
    }
    if bs_c == 0.0 {
        return Err(MetricsError::Undefined(
            "BSS undefined: all labels identical (BS_c = 0)".into(),
        ));
    }
    Ok((bs - bs_c) / (0.0 - bs_c))
}

/// True skill statistic from binary predictions and labels.
pub fn tss_geq_m(preds: &[bool], labels: &[bool]) -> Result<f64, MetricsError> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(MetricsError::Undefined(
            "TSS wants equal-length, non-empty inputs".into(),
        ));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &y) in preds.iter().zip(labels) {
        match (y, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    tss_from_counts(tp, fn_, fp, tn)
}

/// TSS = TP/(TP+FN) - FP/(FP+TN); undefined when either denominator is 0.
pub fn tss_from_counts(tp: u64, fn_: u64, fp: u64, tn: u64) -> Result<f64, MetricsError> {
    if tp + fn_ == 0 || fp + tn == 0 {
        return Err(MetricsError::Undefined(
            "TSS undefined: a confusion denominator is zero".into(),
        ));
    }
    Ok(tp as f64 / (tp + fn_) as f64 - fp as f64 / (fp + tn) as f64)
}

/// Influence of each confusion cell on the GMGS:
/// influence_ij = c_ij (s_ii - s_ij) / N; zero on the diagonal.
pub fn gmgs_influence(table: &ContingencyTable, s: &ScoringMatrix) -> Vec<f64> {
    let n = table.n_classes();
    let total = table.total() as f64;
    let mut out = vec![0.0; n * n];
    if total == 0.0 {
        return out;
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            out[i * n + j] = table.count(i, j) as f64 * (s.get(i, i) - s.get(i, j)) / total;
        }
    }
    out
}

/// Deterministic argmax with ties broken toward the lowest index.
pub fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Prediction files and the full report
// ---------------------------------------------------------------------------

/// One evaluated sample: timestamp, 4-class probabilities, observed label.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub timestamp: i64,
    pub probs: [f64; NUM_CLASSES],
    pub label: FlareClass,
}

/// Write records as `timestamp, p_X, p_M, p_C, p_O, label` CSV lines.
pub fn write_prediction_file(
    path: &Path,
    records: &[PredictionRecord],
) -> Result<(), MetricsError> {
    let file = std::fs::File::create(path)
        .map_err(|e| MetricsError::PredictionFile(format!("create {path:?}: {e}")))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.timestamp, r.probs[0], r.probs[1], r.probs[2], r.probs[3],
            r.label.letter()
        )
        .map_err(|e| MetricsError::PredictionFile(format!("write: {e}")))?;
    }
    w.flush()
        .map_err(|e| MetricsError::PredictionFile(format!("flush: {e}")))?;
    Ok(())
}

pub fn read_prediction_file(path: &Path) -> Result<Vec<PredictionRecord>, MetricsError> {
    let file = std::fs::File::open(path)
        .map_err(|e| MetricsError::PredictionFile(format!("open {path:?}: {e}")))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MetricsError::PredictionFile(format!("read: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(MetricsError::PredictionFile(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64, MetricsError> {
            s.parse::<f64>().map_err(|_| {
                MetricsError::PredictionFile(format!("line {}: bad {what} `{s}`", lineno + 1))
            })
        };
        let timestamp = fields[0].parse::<i64>().map_err(|_| {
            MetricsError::PredictionFile(format!("line {}: bad timestamp", lineno + 1))
        })?;
        let probs = [
            parse(fields[1], "p_X")?,
            parse(fields[2], "p_M")?,
            parse(fields[3], "p_C")?,
            parse(fields[4], "p_O")?,
        ];
        let label = fields[5]
            .chars()
            .next()
            .and_then(FlareClass::from_letter)
            .ok_or_else(|| {
                MetricsError::PredictionFile(format!(
                    "line {}: bad label `{}`",
                    lineno + 1,
                    fields[5]
                ))
            })?;
        out.push(PredictionRecord {
            timestamp,
            probs,
            label,
        });
    }
    Ok(out)
}

/// Full verification report for one evaluated split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub gmgs: f64,
    pub bss_geq_m: f64,
    pub tss_geq_m: f64,
    /// Row-major I x I confusion counts, rows observed.
    pub confusion: Vec<u64>,
    /// Row-major I x I GMGS influence values.
    pub gmgs_influence: Vec<f64>,
}

/// Compute every metric from prediction records. Hard classes come from
/// the probability argmax (ties to the lowest index).
pub fn evaluate_predictions(records: &[PredictionRecord]) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Undefined("no predictions to evaluate".into()));
    }
    let observed: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    let predicted: Vec<usize> = records.iter().map(|r| argmax_tie_low(&r.probs)).collect();
    let table = ContingencyTable::from_pairs(&observed, &predicted, NUM_CLASSES)?;
    let s = scoring_matrix(&table.observed_marginals()?)?;
    let gmgs = gmgs_with_matrix(&table.relative()?, &s);
    let labels: Vec<FlareClass> = records.iter().map(|r| r.label).collect();
    let probs: Vec<[f64; NUM_CLASSES]> = records.iter().map(|r| r.probs).collect();
    let (bin_labels, bin_probs) = binarize_geq_m(&labels, &probs);
    let bin_preds: Vec<bool> = predicted
        .iter()
        .map(|&j| FlareClass::from_index(j).unwrap().is_geq_m())
        .collect();
    Ok(MetricsReport {
        n: table.total(),
        gmgs,
        bss_geq_m: bss_geq_m(&bin_probs, &bin_labels)?,
        tss_geq_m: tss_geq_m(&bin_preds, &bin_labels)?,
        confusion: table.counts().to_vec(),
        gmgs_influence: gmgs_influence(&table, &s),
    })
}
