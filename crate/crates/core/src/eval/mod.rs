//! Metrics, breakdown analyses, cross-validation and analysis exports.
//!
//! All counting is exact-match: a predicted pair scores a true positive iff
//! it equals a gold pair of the same document; clause extraction counts the
//! same way per clause index. Zero-denominator metrics are 0, never NaN.

mod crossval;
mod ttest;

pub use crossval::{crossval, CrossvalOptions, CrossvalReport, FoldScores, Prf, RepeatScores};
pub use ttest::ttest_two_tailed;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{derive_clause_labels, ClauseLabels, Document};
use crate::encoder::ClauseReps;
use crate::trainer::{extract, Checkpoint, Extraction};
use crate::{Error, Result};

/// Exact-match counts with the usual derived scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn from_sets<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Metrics {
        let tp = pred.intersection(gold).count();
        Metrics {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn accumulate(&mut self, other: Metrics) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-document prediction bundle the metrics consume.
#[derive(Debug, Clone, Default)]
pub struct DocPrediction {
    pub pairs: BTreeSet<(usize, usize)>,
    pub emo_clauses: BTreeSet<usize>,
    pub cause_clauses: BTreeSet<usize>,
}

impl From<&Extraction> for DocPrediction {
    fn from(e: &Extraction) -> Self {
        DocPrediction {
            pairs: e.pairs.clone(),
            emo_clauses: e.emo_clauses.clone(),
            cause_clauses: e.cause_clauses.clone(),
        }
    }
}

/// Pair-extraction precision/recall/F1 over a keyed corpus. The prediction
/// and gold maps must cover exactly the same doc_ids; gold pairs outside any
/// candidate window still count in the recall denominator.
pub fn pair_prf(
    preds: &BTreeMap<String, BTreeSet<(usize, usize)>>,
    golds: &BTreeMap<String, BTreeSet<(usize, usize)>>,
) -> Result<Metrics> {
    check_same_keys(preds.keys(), golds.keys())?;
    let mut total = Metrics::default();
    for (doc_id, pred) in preds {
        total.accumulate(Metrics::from_sets(pred, &golds[doc_id]));
    }
    Ok(total)
}

fn check_same_keys<'a>(
    a: impl Iterator<Item = &'a String>,
    b: impl Iterator<Item = &'a String>,
) -> Result<()> {
    let a: BTreeSet<&String> = a.collect();
    let b: BTreeSet<&String> = b.collect();
    if let Some(missing) = a.symmetric_difference(&b).next() {
        return Err(Error::Config(format!(
            "prediction/gold doc_id sets differ (e.g. `{missing}`)"
        )));
    }
    Ok(())
}

/// Where clause predictions come from: the dedicated clause heads, or
/// derived from the extracted pairs by the membership rule (clause i is an
/// emotion clause iff some extracted pair (i, j) exists).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClauseEvalMode {
    #[default]
    Heads,
    FromPairs,
}

impl std::str::FromStr for ClauseEvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(ClauseEvalMode::Heads),
            "from-pairs" => Ok(ClauseEvalMode::FromPairs),
            other => Err(Error::Config(format!(
                "unknown clause evaluation mode `{other}` (heads|from-pairs)"
            ))),
        }
    }
}

/// Emotion-clause and cause-clause extraction metrics.
pub fn clause_prf(
    preds: &BTreeMap<String, DocPrediction>,
    golds: &BTreeMap<String, ClauseLabels>,
    mode: ClauseEvalMode,
) -> Result<(Metrics, Metrics)> {
    check_same_keys(preds.keys(), golds.keys())?;
    let mut ee = Metrics::default();
    let mut ce = Metrics::default();
    for (doc_id, pred) in preds {
        let labels = &golds[doc_id];
        let gold_emo: BTreeSet<usize> = label_set(&labels.y_emo);
        let gold_cause: BTreeSet<usize> = label_set(&labels.y_cause);
        let (pred_emo, pred_cause) = match mode {
            ClauseEvalMode::Heads => (pred.emo_clauses.clone(), pred.cause_clauses.clone()),
            ClauseEvalMode::FromPairs => (
                pred.pairs.iter().map(|&(e, _)| e).collect(),
                pred.pairs.iter().map(|&(_, c)| c).collect(),
            ),
        };
        ee.accumulate(Metrics::from_sets(&pred_emo, &gold_emo));
        ce.accumulate(Metrics::from_sets(&pred_cause, &gold_cause));
    }
    Ok((ee, ce))
}

fn label_set(labels: &[bool]) -> BTreeSet<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i + 1)
        .collect()
}

/// How to partition a breakdown report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakdownMode {
    /// Documents bucketed by gold-pair count.
    PairsPerDoc,
    /// Pairs bucketed by their own |i - j|.
    RelPos,
    /// Documents bucketed by clause count.
    DocLen,
}

impl BreakdownMode {
    /// Default bucket boundary, mirroring the reference analyses: pair
    /// counts split at 2, relative position at 2, document length at the
    /// corpus median of 14 clauses.
    pub fn default_thresholds(self) -> Vec<usize> {
        match self {
            BreakdownMode::PairsPerDoc => vec![2],
            BreakdownMode::RelPos => vec![2],
            BreakdownMode::DocLen => vec![14],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BreakdownMode::PairsPerDoc => "pairs-per-doc",
            BreakdownMode::RelPos => "relpos",
            BreakdownMode::DocLen => "doclen",
        }
    }
}

impl std::str::FromStr for BreakdownMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs-per-doc" => Ok(BreakdownMode::PairsPerDoc),
            "relpos" => Ok(BreakdownMode::RelPos),
            "doclen" => Ok(BreakdownMode::DocLen),
            other => Err(Error::Config(format!(
                "unknown breakdown mode `{other}` (pairs-per-doc|relpos|doclen)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BreakdownBucket {
    pub label: String,
    /// Half-open value range [lo, hi) the bucket covers.
    pub lo: usize,
    pub hi: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct BreakdownReport {
    pub mode: BreakdownMode,
    pub buckets: Vec<BreakdownBucket>,
}

/// Bucketed pair-extraction metrics. `thresholds` are strictly increasing
/// bucket boundaries; values below the first boundary form the first bucket,
/// values at or above the last form the final one.
pub fn breakdown(
    docs: &[Document],
    preds: &BTreeMap<String, DocPrediction>,
    mode: BreakdownMode,
    thresholds: &[usize],
) -> Result<BreakdownReport> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bucket thresholds must be strictly increasing, got {thresholds:?}"
        )));
    }
    let by_id: BTreeMap<&String, &Document> = docs.iter().map(|d| (&d.doc_id, d)).collect();
    check_same_keys(preds.keys(), by_id.keys().copied())?;

    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut lo = 0usize;
    for &t in thresholds {
        bounds.push((lo, t));
        lo = t;
    }
    bounds.push((lo, usize::MAX));
    let bucket_of = |v: usize| bounds.iter().position(|&(lo, hi)| v >= lo && v < hi).unwrap();

    let mut metrics = vec![Metrics::default(); bounds.len()];
    match mode {
        BreakdownMode::PairsPerDoc | BreakdownMode::DocLen => {
            for doc in docs {
                let key = match mode {
                    BreakdownMode::PairsPerDoc => doc.gold_pairs.len(),
                    BreakdownMode::DocLen => doc.n_clauses(),
                    BreakdownMode::RelPos => unreachable!(),
                };
                let pred = &preds[&doc.doc_id].pairs;
                metrics[bucket_of(key)].accumulate(Metrics::from_sets(pred, &doc.gold_pairs));
            }
        }
        BreakdownMode::RelPos => {
            for doc in docs {
                let pred = &preds[&doc.doc_id].pairs;
                for &(e, c) in &doc.gold_pairs {
                    let b = bucket_of(e.abs_diff(c));
                    if pred.contains(&(e, c)) {
                        metrics[b].tp += 1;
                    } else {
                        metrics[b].fn_ += 1;
                    }
                }
                for &(e, c) in pred {
                    if !doc.gold_pairs.contains(&(e, c)) {
                        metrics[bucket_of(e.abs_diff(c))].fp += 1;
                    }
                }
            }
        }
    }

    let buckets = bounds
        .iter()
        .zip(metrics)
        .map(|(&(lo, hi), m)| BreakdownBucket {
            label: if hi == usize::MAX {
                format!(">={lo}")
            } else if hi == lo + 1 {
                format!("{lo}")
            } else {
                format!("{lo}..{}", hi - 1)
            },
            lo,
            hi,
            metrics: m,
        })
        .collect();
    Ok(BreakdownReport { mode, buckets })
}

/// Gold maps straight from a corpus slice.
pub fn gold_maps(
    docs: &[Document],
) -> (
    BTreeMap<String, BTreeSet<(usize, usize)>>,
    BTreeMap<String, ClauseLabels>,
) {
    let pairs = docs
        .iter()
        .map(|d| (d.doc_id.clone(), d.gold_pairs.clone()))
        .collect();
    let labels = docs
        .iter()
        .map(|d| (d.doc_id.clone(), derive_clause_labels(d)))
        .collect();
    (pairs, labels)
}

/// Scores of one checkpoint over one document set, for the main task and
/// both clause sub-tasks.
#[derive(Debug, Clone)]
pub struct EvalScores {
    pub ecpe: Metrics,
    pub ee: Metrics,
    pub ce: Metrics,
    pub predictions: BTreeMap<String, DocPrediction>,
}

impl EvalScores {
    pub fn task(&self, name: &str) -> Metrics {
        match name {
            "ecpe" => self.ecpe,
            "ee" => self.ee,
            "ce" => self.ce,
            other => panic!("unknown task {other}"),
        }
    }
}

/// Run extraction over every document and score all three tasks.
pub fn evaluate_docs(
    docs: &[Document],
    checkpoint: &Checkpoint,
    precomputed: Option<&BTreeMap<String, ClauseReps>>,
    mode: ClauseEvalMode,
) -> Result<EvalScores> {
    let mut predictions = BTreeMap::new();
    for doc in docs {
        let extraction = extract(doc, checkpoint, precomputed)?;
        predictions.insert(doc.doc_id.clone(), DocPrediction::from(&extraction));
    }
    let (gold_pairs, gold_labels) = gold_maps(docs);
    let pred_pairs: BTreeMap<String, BTreeSet<(usize, usize)>> = predictions
        .iter()
        .map(|(k, v)| (k.clone(), v.pairs.clone()))
        .collect();
    let ecpe = pair_prf(&pred_pairs, &gold_pairs)?;
    let (ee, ce) = clause_prf(&predictions, &gold_labels, mode)?;
    Ok(EvalScores {
        ecpe,
        ee,
        ce,
        predictions,
    })
}

/// Aligned three-task table (ECPE / EE / CE columns), one row per approach.
pub fn three_task_table(title: &str, rows: &[(String, [Metrics; 3])]) -> String {
    let label_width = rows.iter().map(|(l, _)| l.len()).chain([8]).max().unwrap();
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<label_width$} {:>24} {:>24} {:>24}",
        "", "ECPE (P/R/F1)", "EE (P/R/F1)", "CE (P/R/F1)"
    );
    for (label, tasks) in rows {
        let cell = |m: &Metrics| format!("{:.4}/{:.4}/{:.4}", m.precision(), m.recall(), m.f1());
        let _ = writeln!(
            out,
            "{label:<label_width$} {:>24} {:>24} {:>24}",
            cell(&tasks[0]),
            cell(&tasks[1]),
            cell(&tasks[2])
        );
    }
    out
}

/// CSV of per-candidate confidences: header `emo_idx,cause_idx,confidence`,
/// one row per instantiated candidate sorted by (emo_idx, cause_idx).
pub fn export_confidence_matrix(extraction: &Extraction, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = confidence_matrix_csv(extraction);
    std::fs::write(path, csv).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn confidence_matrix_csv(extraction: &Extraction) -> String {
    let mut rows: Vec<(usize, usize, f64)> = extraction
        .confidences
        .iter()
        .map(|(p, conf)| (p.emo_idx, p.cause_idx, *conf))
        .collect();
    rows.sort_by_key(|&(e, c, _)| (e, c));
    let mut out = String::from("emo_idx,cause_idx,confidence\n");
    for (e, c, conf) in rows {
        let _ = writeln!(out, "{e},{c},{conf:.6}");
    }
    out
}

/// Aligned plain-text table for labeled metrics rows.
pub fn metrics_table(title: &str, rows: &[(String, Metrics)]) -> String {
    let label_width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain([5])
        .max()
        .unwrap();
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<label_width$} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}",
        "", "P", "R", "F1", "tp", "fp", "fn"
    );
    for (label, m) in rows {
        let _ = writeln!(
            out,
            "{label:<label_width$} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6}",
            m.precision(),
            m.recall(),
            m.f1(),
            m.tp,
            m.fp,
            m.fn_
        );
    }
    out
}

/// Machine-readable rows: `task,bucket,precision,recall,f1,tp,fp,fn`.
pub fn metrics_csv(rows: &[(String, String, Metrics)]) -> String {
    let mut out = String::from("task,bucket,precision,recall,f1,tp,fp,fn\n");
    for (task, bucket, m) in rows {
        let _ = writeln!(
            out,
            "{task},{bucket},{:.6},{:.6},{:.6},{},{},{}",
            m.precision(),
            m.recall(),
            m.f1(),
            m.tp,
            m.fp,
            m.fn_
        );
    }
    out
}
