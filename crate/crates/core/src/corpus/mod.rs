//! Corpus data model: documents of clauses with gold emotion-cause pairs,
//! JSONL ingestion, clause-label derivation, fold splitting and corpus
//! statistics. The synth submodule adds a synthetic-corpus generator whose documents a
//! rule-based oracle solves perfectly.
//!
//! Clause and pair indices are 1-based everywhere in this module and in the
//! corpus file format; anything that indexes an array converts at the
//! boundary.

mod synth;

pub use synth::{rule_oracle, synth_generate, SynthConfig};

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{Error, Result};

/// One clause: a 1-based position and its tokens (never empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clause {
    pub index: usize,
    pub tokens: Vec<String>,
}

/// A document: ordered clauses plus the gold set of
/// (emotion index, cause index) pairs, both 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub clauses: Vec<Clause>,
    pub gold_pairs: BTreeSet<(usize, usize)>,
}

/// Wire form of a document: one JSON object per corpus line, keys emitted in
/// this order.
#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    doc_id: String,
    clauses: Vec<Vec<String>>,
    pairs: Vec<(usize, usize)>,
}

impl Document {
    /// Build and validate a document from raw parts.
    pub fn new(
        doc_id: impl Into<String>,
        clauses: Vec<Vec<String>>,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        let n = clauses.len();
        if n == 0 {
            return Err(Error::Validation {
                doc_id,
                message: "document has no clauses".into(),
            });
        }
        for (i, tokens) in clauses.iter().enumerate() {
            if tokens.is_empty() {
                return Err(Error::Validation {
                    doc_id,
                    message: format!("clause {} has no tokens", i + 1),
                });
            }
        }
        let mut gold_pairs = BTreeSet::new();
        for &(e, c) in &pairs {
            if e < 1 || e > n || c < 1 || c > n {
                return Err(Error::Validation {
                    doc_id,
                    message: format!("pair ({e},{c}) out of range for {n} clauses"),
                });
            }
            if !gold_pairs.insert((e, c)) {
                return Err(Error::Validation {
                    doc_id,
                    message: format!("duplicate gold pair ({e},{c})"),
                });
            }
        }
        let clauses = clauses
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Clause {
                index: i + 1,
                tokens,
            })
            .collect();
        Ok(Document {
            doc_id,
            clauses,
            gold_pairs,
        })
    }

    pub fn n_clauses(&self) -> usize {
        self.clauses.len()
    }

    fn to_record(&self) -> DocumentRecord {
        DocumentRecord {
            doc_id: self.doc_id.clone(),
            clauses: self.clauses.iter().map(|c| c.tokens.clone()).collect(),
            pairs: self.gold_pairs.iter().copied().collect(),
        }
    }
}

/// Per-clause binary labels derived from the gold pairs: clause i is an
/// emotion clause iff some pair (i, j) exists, a cause clause iff some
/// pair (j, i) exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClauseLabels {
    pub y_emo: Vec<bool>,
    pub y_cause: Vec<bool>,
}

pub fn derive_clause_labels(doc: &Document) -> ClauseLabels {
    let n = doc.n_clauses();
    let mut y_emo = vec![false; n];
    let mut y_cause = vec![false; n];
    for &(e, c) in &doc.gold_pairs {
        y_emo[e - 1] = true;
        y_cause[c - 1] = true;
    }
    ClauseLabels { y_emo, y_cause }
}

/// Parse a JSONL corpus file: one document object per line.
pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_corpus_reader(BufReader::new(file))
}

pub fn parse_corpus_reader(reader: impl BufRead) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if !seen_ids.insert(record.doc_id.clone()) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("duplicate doc_id `{}`", record.doc_id),
            });
        }
        docs.push(Document::new(record.doc_id, record.clauses, record.pairs)?);
    }
    Ok(docs)
}

/// Write documents as JSONL, one object per line with keys in
/// doc_id/clauses/pairs order and pairs sorted.
pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut w, &doc.to_record())
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        writeln!(w).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Split document indices into k folds whose sizes differ by at most one.
/// Deterministic in the seed; the folds partition 0..docs.len().
pub fn split_folds(doc_count: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    if k > doc_count {
        return Err(Error::Config(format!(
            "cannot split {doc_count} documents into {k} folds"
        )));
    }
    let mut indices: Vec<usize> = (0..doc_count).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut indices);
    let base = doc_count / k;
    let extra = doc_count % k;
    let mut folds = Vec::with_capacity(k);
    let mut offset = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold: Vec<usize> = indices[offset..offset + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        offset += size;
    }
    Ok(folds)
}

/// Corpus summary: document counts bucketed by gold-pair count, pair counts
/// bucketed by unsigned relative position |i-j|, and clause-count stats.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub doc_count: usize,
    /// Documents with 0 / 1 / 2 / >=3 gold pairs.
    pub docs_by_pairs: [usize; 4],
    pub pair_count: usize,
    /// Pairs with relative position 0 / 1 / 2 / >=3.
    pub pairs_by_relpos: [usize; 4],
    pub mean_clauses: f64,
    pub max_clauses: usize,
}

impl StatsReport {
    pub fn docs_by_pairs_pct(&self) -> [f64; 4] {
        self.docs_by_pairs.map(|c| pct(c, self.doc_count))
    }

    pub fn pairs_by_relpos_pct(&self) -> [f64; 4] {
        self.pairs_by_relpos.map(|c| pct(c, self.pair_count))
    }
}

fn pct(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dp = self.docs_by_pairs_pct();
        let rp = self.pairs_by_relpos_pct();
        writeln!(f, "{:<34} {:>8} {:>10}", "Item", "Quantity", "Pct(%)")?;
        writeln!(f, "{:<34} {:>8} {:>10.2}", "# of documents", self.doc_count, 100.0)?;
        if self.docs_by_pairs[0] > 0 {
            writeln!(f, "{:<34} {:>8} {:>10.2}", "- w/ 0 pairs", self.docs_by_pairs[0], dp[0])?;
        }
        writeln!(f, "{:<34} {:>8} {:>10.2}", "- w/ 1 pair", self.docs_by_pairs[1], dp[1])?;
        writeln!(f, "{:<34} {:>8} {:>10.2}", "- w/ 2 pairs", self.docs_by_pairs[2], dp[2])?;
        writeln!(f, "{:<34} {:>8} {:>10.2}", "- w/ >=3 pairs", self.docs_by_pairs[3], dp[3])?;
        writeln!(f, "{:<34} {:>8} {:>10.2}", "# of pairs", self.pair_count, 100.0)?;
        for (i, label) in [
            "- w/ 0 relative position",
            "- w/ 1 relative position",
            "- w/ 2 relative position",
            "- w/ >=3 relative position",
        ]
        .iter()
        .enumerate()
        {
            writeln!(f, "{:<34} {:>8} {:>10.2}", label, self.pairs_by_relpos[i], rp[i])?;
        }
        writeln!(f, "{:<34} {:>8.2}", "Avg. # of clauses per document", self.mean_clauses)?;
        writeln!(f, "{:<34} {:>8}", "Max. # of clauses per document", self.max_clauses)
    }
}

/// Bucketed corpus statistics; relative position of a pair (i, j) is |i-j|.
pub fn corpus_stats(docs: &[Document]) -> Result<StatsReport> {
    if docs.is_empty() {
        return Err(Error::Config("corpus_stats on an empty corpus".into()));
    }
    let mut docs_by_pairs = [0usize; 4];
    let mut pairs_by_relpos = [0usize; 4];
    let mut pair_count = 0;
    let mut clause_total = 0usize;
    let mut max_clauses = 0usize;
    for doc in docs {
        let np = doc.gold_pairs.len();
        docs_by_pairs[np.min(3)] += 1;
        pair_count += np;
        for &(e, c) in &doc.gold_pairs {
            let rel = e.abs_diff(c);
            pairs_by_relpos[rel.min(3)] += 1;
        }
        clause_total += doc.n_clauses();
        max_clauses = max_clauses.max(doc.n_clauses());
    }
    Ok(StatsReport {
        doc_count: docs.len(),
        docs_by_pairs,
        pair_count,
        pairs_by_relpos,
        mean_clauses: clause_total as f64 / docs.len() as f64,
        max_clauses,
    })
}
