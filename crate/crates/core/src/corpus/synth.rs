//! Synthetic corpus generator and its rule-based oracle.
//!
//! Documents are built from a partitioned vocabulary: plain filler tokens
//! (`tok*`), emotion keywords (`emokw*`), cause keywords (`causekw*`) and cue
//! tokens (`cue*`). A planted pair (i, j) puts an emotion keyword in clause i,
//! a cause keyword in clause j, and the same cue token in both clauses; the
//! cue is unique to that pair within its document. Distractor clauses may
//! carry keywords but never cues, so recovering the pairs takes cross-clause
//! matching rather than keyword spotting.
//!
//! Within a document no clause plays the emotion role in one pair and the
//! cause role in a different pair (a same-clause pair (i, i) counts as both
//! roles at once). Under that constraint [`rule_oracle`] recovers exactly the
//! planted pairs, which is what makes it usable as ground truth.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::Document;
use crate::numerics::Rng;
use crate::{Error, Result};

const EMO_PREFIX: &str = "emokw";
const CAUSE_PREFIX: &str = "causekw";
const CUE_PREFIX: &str = "cue";

/// Knobs for [`synth_generate`]. Ranges are inclusive; the distributions
/// need not be normalized.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub doc_count: usize,
    /// Total vocabulary size including the reserved keyword and cue pools.
    pub vocab_size: usize,
    pub clause_len_range: (usize, usize),
    pub doc_len_range: (usize, usize),
    /// Gold pairs per document: count -> weight.
    pub pair_count_dist: BTreeMap<usize, f64>,
    /// Unsigned relative position |i-j| of a pair: distance -> weight.
    pub offset_dist: BTreeMap<usize, f64>,
    pub lambda: usize,
    pub emotion_keyword_count: usize,
    pub cause_keyword_count: usize,
    pub cue_count: usize,
    /// Probability that a clause not in any pair carries a keyword anyway.
    pub distractor_keyword_prob: f64,
    /// Permit offset_dist entries beyond lambda (pairs the window can never
    /// recover); off by default.
    pub allow_out_of_window: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            doc_count: 100,
            vocab_size: 200,
            clause_len_range: (3, 6),
            doc_len_range: (6, 12),
            pair_count_dist: BTreeMap::from([(1, 0.8977), (2, 0.0910), (3, 0.0113)]),
            offset_dist: BTreeMap::from([
                (0, 0.2358),
                (1, 0.6193),
                (2, 0.1034),
                (3, 0.0415),
            ]),
            lambda: 3,
            emotion_keyword_count: 12,
            cause_keyword_count: 12,
            cue_count: 16,
            distractor_keyword_prob: 0.15,
            allow_out_of_window: false,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let reserved = self.emotion_keyword_count + self.cause_keyword_count + self.cue_count;
        if self.vocab_size <= reserved {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no plain tokens beyond the {reserved} reserved ones",
                self.vocab_size
            )));
        }
        if self.doc_count == 0 {
            return Err(Error::Config("doc_count must be positive".into()));
        }
        if self.clause_len_range.0 < 1 || self.clause_len_range.0 > self.clause_len_range.1 {
            return Err(Error::Config(format!(
                "bad clause_len_range {:?}",
                self.clause_len_range
            )));
        }
        if self.doc_len_range.0 < 1 || self.doc_len_range.0 > self.doc_len_range.1 {
            return Err(Error::Config(format!(
                "bad doc_len_range {:?}",
                self.doc_len_range
            )));
        }
        if self.emotion_keyword_count == 0 || self.cause_keyword_count == 0 || self.cue_count == 0
        {
            return Err(Error::Config("keyword and cue pools must be non-empty".into()));
        }
        let max_pairs = self.pair_count_dist.keys().max().copied().unwrap_or(0);
        if max_pairs > self.cue_count {
            return Err(Error::Config(format!(
                "pair_count_dist allows {max_pairs} pairs per document but only {} cues exist",
                self.cue_count
            )));
        }
        if self.pair_count_dist.is_empty()
            || self.pair_count_dist.values().any(|&w| w < 0.0)
            || self.pair_count_dist.values().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("bad pair_count_dist".into()));
        }
        if self.offset_dist.is_empty()
            || self.offset_dist.values().any(|&w| w < 0.0)
            || self.offset_dist.values().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("bad offset_dist".into()));
        }
        if !self.allow_out_of_window {
            if let Some((&d, _)) = self
                .offset_dist
                .iter()
                .find(|&(&d, &w)| w > 0.0 && d > self.lambda)
            {
                return Err(Error::Config(format!(
                    "offset_dist places weight on distance {d} beyond lambda {} \
                     (set allow_out_of_window to permit this)",
                    self.lambda
                )));
            }
        }
        Ok(())
    }
}

/// Generate a deterministic synthetic corpus. Every emitted gold pair is
/// valid for its document; infeasible draws (offset longer than the document,
/// role collisions) are resampled rather than emitted.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<Document>> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let offset_entries: Vec<(usize, f64)> =
        cfg.offset_dist.iter().map(|(&k, &v)| (k, v)).collect();
    let pair_count_entries: Vec<(usize, f64)> =
        cfg.pair_count_dist.iter().map(|(&k, &v)| (k, v)).collect();
    let plain_count = cfg.vocab_size
        - cfg.emotion_keyword_count
        - cfg.cause_keyword_count
        - cfg.cue_count;

    let mut docs = Vec::with_capacity(cfg.doc_count);
    for doc_idx in 0..cfg.doc_count {
        let n = rng.range_inclusive(cfg.doc_len_range.0, cfg.doc_len_range.1);
        let want_pairs = rng.weighted(&pair_count_entries);
        let pairs = place_pairs(n, want_pairs, &offset_entries, &mut rng);

        let mut cues: Vec<usize> = (0..cfg.cue_count).collect();
        rng.shuffle(&mut cues);

        // Extra tokens per clause: keywords and cues for pair members,
        // possibly a lone keyword for distractors.
        let mut extras: Vec<Vec<String>> = vec![Vec::new(); n];
        let mut in_pair = vec![false; n];
        for (t, &(e, c)) in pairs.iter().enumerate() {
            let cue = format!("{CUE_PREFIX}{}", cues[t]);
            extras[e - 1].push(format!(
                "{EMO_PREFIX}{}",
                rng.below(cfg.emotion_keyword_count)
            ));
            extras[c - 1].push(format!(
                "{CAUSE_PREFIX}{}",
                rng.below(cfg.cause_keyword_count)
            ));
            extras[e - 1].push(cue.clone());
            if e != c {
                extras[c - 1].push(cue);
            }
            in_pair[e - 1] = true;
            in_pair[c - 1] = true;
        }
        for (slot, taken) in in_pair.iter().enumerate() {
            if !taken && rng.bernoulli(cfg.distractor_keyword_prob) {
                let kw = if rng.bernoulli(0.5) {
                    format!("{EMO_PREFIX}{}", rng.below(cfg.emotion_keyword_count))
                } else {
                    format!("{CAUSE_PREFIX}{}", rng.below(cfg.cause_keyword_count))
                };
                extras[slot].push(kw);
            }
        }

        let mut clauses = Vec::with_capacity(n);
        for extra in extras {
            let len = rng.range_inclusive(cfg.clause_len_range.0, cfg.clause_len_range.1);
            let mut tokens: Vec<String> =
                (0..len).map(|_| format!("tok{}", rng.below(plain_count))).collect();
            tokens.extend(extra);
            rng.shuffle(&mut tokens);
            clauses.push(tokens);
        }

        docs.push(Document::new(
            format!("synth-{doc_idx:05}"),
            clauses,
            pairs,
        )?);
    }
    Ok(docs)
}

/// Draw up to `want` pairs for an n-clause document, resampling draws that
/// don't fit or that would let a clause cross roles. Returns fewer pairs when
/// the document can't host all of them.
fn place_pairs(
    n: usize,
    want: usize,
    offset_entries: &[(usize, f64)],
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut emo_roles: BTreeSet<usize> = BTreeSet::new();
    let mut cause_roles: BTreeSet<usize> = BTreeSet::new();
    'outer: for _ in 0..want {
        for _attempt in 0..200 {
            let dist = rng.weighted(offset_entries);
            if dist >= n {
                continue;
            }
            let low = rng.range_inclusive(1, n - dist);
            let (e, c) = if dist == 0 {
                (low, low)
            } else if rng.bernoulli(0.5) {
                (low + dist, low)
            } else {
                (low, low + dist)
            };
            if pairs.contains(&(e, c)) {
                continue;
            }
            // No clause may act as emotion in one pair and cause in another;
            // (i, i) occupies both roles, so its clause joins no other pair.
            if cause_roles.contains(&e) || emo_roles.contains(&c) {
                continue;
            }
            if e == c && (emo_roles.contains(&e) || cause_roles.contains(&e)) {
                continue;
            }
            emo_roles.insert(e);
            cause_roles.insert(c);
            if e == c {
                cause_roles.insert(e);
                emo_roles.insert(c);
            }
            pairs.push((e, c));
            continue 'outer;
        }
        break;
    }
    pairs
}

/// Recover pairs from a synthetic document by the cue rule alone: (a, b) is
/// predicted iff clause a holds an emotion keyword, clause b a cause keyword,
/// and both hold the same cue token — for a == b the cue must appear in no
/// other clause.
pub fn rule_oracle(doc: &Document) -> BTreeSet<(usize, usize)> {
    let n = doc.n_clauses();
    let mut has_emo = vec![false; n];
    let mut has_cause = vec![false; n];
    let mut cue_sites: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for clause in &doc.clauses {
        for token in &clause.tokens {
            if token.starts_with(EMO_PREFIX) {
                has_emo[clause.index - 1] = true;
            } else if token.starts_with(CAUSE_PREFIX) {
                has_cause[clause.index - 1] = true;
            } else if token.starts_with(CUE_PREFIX) {
                let sites = cue_sites.entry(token.as_str()).or_default();
                if !sites.contains(&clause.index) {
                    sites.push(clause.index);
                }
            }
        }
    }
    let mut predicted = BTreeSet::new();
    for sites in cue_sites.values() {
        if sites.len() == 1 {
            let a = sites[0];
            if has_emo[a - 1] && has_cause[a - 1] {
                predicted.insert((a, a));
            }
        } else {
            for &a in sites {
                for &b in sites {
                    if a != b && has_emo[a - 1] && has_cause[b - 1] {
                        predicted.insert((a, b));
                    }
                }
            }
        }
    }
    predicted
}
