//! Per-clause representations: either a trainable toy encoder (mean-pooled
//! token embeddings) or precomputed contextual embeddings loaded from disk,
//! plus the document-node initialization.
//!
//! The toy encoder stands in for a large pre-trained encoder at desk scale;
//! the loader serves whatever a real encoder produced, verbatim and frozen.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::Document;
use crate::numerics::{Rng, TensorId};
use crate::{Error, Result, Tape, Tensor};

/// Clause representation matrix, one row per clause.
pub type ClauseReps = Tensor;

const MAGIC: &[u8; 8] = b"PBJEEMB1";
const VERSION: u32 = 1;

/// Token-to-row mapping for the toy encoder. Row 0 is the reserved unknown
/// row; known tokens occupy rows 1.. in sorted order, so a vocabulary built
/// from the same corpus is always identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    pub fn from_corpus(docs: &[Document]) -> Self {
        let unique: BTreeSet<&str> = docs
            .iter()
            .flat_map(|d| d.clauses.iter())
            .flat_map(|c| c.tokens.iter())
            .map(String::as_str)
            .collect();
        let mut tokens = Vec::with_capacity(unique.len() + 1);
        tokens.push(UNK_TOKEN.to_string());
        tokens.extend(unique.into_iter().map(str::to_string));
        Self::from_tokens(tokens)
    }

    /// Rebuild from a saved token list (row order preserved).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Row for a token; unknown tokens map to the reserved row 0.
    pub fn row(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }
}

/// Trainable toy-encoder weights: one embedding table.
#[derive(Debug, Clone)]
pub struct ToyEncoderParams {
    pub table: Tensor,
}

impl ToyEncoderParams {
    /// Fresh table [vocab x dim], rows drawn zero-mean with scale 0.02.
    pub fn init(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let data: Vec<f64> = (0..vocab_size * dim).map(|_| rng.normal(0.0, 0.02)).collect();
        ToyEncoderParams {
            table: Tensor::from_vec(vec![vocab_size, dim], data).unwrap(),
        }
    }
}

/// Mean-pool each clause's token embeddings into one row. `table` must
/// already live on the tape (as a parameter when training the encoder).
pub fn toy_encode(
    tape: &mut Tape,
    doc: &Document,
    table: TensorId,
    vocab: &Vocab,
) -> Result<TensorId> {
    let mut clause_rows = Vec::with_capacity(doc.n_clauses());
    for clause in &doc.clauses {
        let ids: Vec<usize> = clause.tokens.iter().map(|t| vocab.row(t)).collect();
        let rows = tape.embedding_lookup(table, ids)?;
        clause_rows.push(tape.mean_rows(rows)?);
    }
    tape.concat_rows(&clause_rows)
}

/// Document-node initialization: the column-wise mean of the clause rows.
pub fn doc_init(tape: &mut Tape, h: TensorId) -> Result<TensorId> {
    tape.mean_rows(h)
}

/// Write precomputed clause representations. Payload is 32-bit reals; the
/// map's f64 values are narrowed on write and widened again on load.
pub fn write_precomputed(
    path: impl AsRef<Path>,
    dim: usize,
    reps: &BTreeMap<String, ClauseReps>,
) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&display, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(reps.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (doc_id, h) in reps {
        if h.cols() != dim {
            return Err(Error::format(
                &display,
                format!("doc `{doc_id}` has width {}, expected {dim}", h.cols()),
            ));
        }
        let id_bytes = doc_id.as_bytes();
        w.write_all(&(id_bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(id_bytes).map_err(io_err)?;
        w.write_all(&(h.rows() as u32).to_le_bytes()).map_err(io_err)?;
        for &v in h.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Load precomputed clause representations, widening values to 64-bit.
/// When `expected_dim` is given, a file with any other width is rejected.
/// Returns the file's width alongside the per-document matrices.
pub fn load_precomputed(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<(usize, BTreeMap<String, ClauseReps>)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, &display, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(&display, "bad magic (not an embedding file)"));
    }
    let version = read_u32(&mut r, &display, "version")?;
    if version != VERSION {
        return Err(Error::format(&display, format!("unsupported version {version}")));
    }
    let dim = read_u32(&mut r, &display, "dim")? as usize;
    if let Some(want) = expected_dim {
        if dim != want {
            return Err(Error::format(
                &display,
                format!("embedding width {dim} does not match configured width {want}"),
            ));
        }
    }
    let doc_count = read_u32(&mut r, &display, "doc_count")? as usize;
    let mut reps = BTreeMap::new();
    for _ in 0..doc_count {
        let mut len_buf = [0u8; 2];
        read_exact(&mut r, &mut len_buf, &display, "doc id length")?;
        let id_len = u16::from_le_bytes(len_buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(&mut r, &mut id_bytes, &display, "doc id")?;
        let doc_id = String::from_utf8(id_bytes)
            .map_err(|_| Error::format(&display, "doc id is not UTF-8"))?;
        let clause_count = read_u32(&mut r, &display, &format!("clause count of `{doc_id}`"))?
            as usize;
        if clause_count == 0 {
            return Err(Error::format(&display, format!("doc `{doc_id}` has no clauses")));
        }
        let mut data = Vec::with_capacity(clause_count * dim);
        let mut f32buf = [0u8; 4];
        for _ in 0..clause_count * dim {
            read_exact(&mut r, &mut f32buf, &display, &format!("payload of `{doc_id}`"))?;
            data.push(f32::from_le_bytes(f32buf) as f64);
        }
        reps.insert(doc_id, Tensor::from_vec(vec![clause_count, dim], data)?);
    }
    Ok((dim, reps))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(clauses: &[&[&str]]) -> Document {
        Document::new(
            "d",
            clauses
                .iter()
                .map(|c| c.iter().map(|t| t.to_string()).collect())
                .collect(),
            vec![],
        )
        .unwrap()
    }

    fn table_and_vocab(docs: &[Document], dim: usize, seed: u64) -> (ToyEncoderParams, Vocab) {
        let vocab = Vocab::from_corpus(docs);
        let mut rng = Rng::new(seed);
        (ToyEncoderParams::init(vocab.len(), dim, &mut rng), vocab)
    }

    #[test]
    fn single_token_clause_is_its_embedding_row() {
        let d = doc(&[&["alpha"]]);
        let (params, vocab) = table_and_vocab(std::slice::from_ref(&d), 4, 1);
        let mut tape = Tape::new();
        let table = tape.param(params.table.clone());
        let h = toy_encode(&mut tape, &d, table, &vocab).unwrap();
        let row = vocab.row("alpha");
        assert_eq!(tape.value(h).row(0), params.table.row(row));
    }

    #[test]
    fn repeated_token_same_as_single() {
        let d1 = doc(&[&["alpha", "alpha"]]);
        let d2 = doc(&[&["alpha"]]);
        let (params, vocab) = table_and_vocab(&[d1.clone(), d2.clone()], 4, 2);
        let mut tape = Tape::new();
        let table = tape.constant(params.table.clone());
        let h1 = toy_encode(&mut tape, &d1, table, &vocab).unwrap();
        let h2 = toy_encode(&mut tape, &d2, table, &vocab).unwrap();
        assert_eq!(tape.value(h1).data(), tape.value(h2).data());
    }

    #[test]
    fn three_token_clause_matches_hand_mean() {
        let d = doc(&[&["a", "b", "c"]]);
        let (params, vocab) = table_and_vocab(std::slice::from_ref(&d), 5, 3);
        let mut tape = Tape::new();
        let table = tape.constant(params.table.clone());
        let h = toy_encode(&mut tape, &d, table, &vocab).unwrap();
        for c in 0..5 {
            let want: f64 = ["a", "b", "c"]
                .iter()
                .map(|t| params.table.at(vocab.row(t), c))
                .sum::<f64>()
                / 3.0;
            assert!((tape.value(h).at(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn token_order_does_not_matter() {
        let d1 = doc(&[&["a", "b", "c", "d"]]);
        let d2 = doc(&[&["d", "b", "a", "c"]]);
        let (params, vocab) = table_and_vocab(std::slice::from_ref(&d1), 3, 4);
        let mut tape = Tape::new();
        let table = tape.constant(params.table.clone());
        let h1 = toy_encode(&mut tape, &d1, table, &vocab).unwrap();
        let h2 = toy_encode(&mut tape, &d2, table, &vocab).unwrap();
        for (a, b) in tape.value(h1).data().iter().zip(tape.value(h2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_tokens_use_the_reserved_row() {
        let d_known = doc(&[&["a"]]);
        let (params, vocab) = table_and_vocab(&[d_known], 4, 5);
        let d_unknown = doc(&[&["zzz-never-seen"]]);
        let mut tape = Tape::new();
        let table = tape.constant(params.table.clone());
        let h = toy_encode(&mut tape, &d_unknown, table, &vocab).unwrap();
        assert_eq!(tape.value(h).row(0), params.table.row(0));
        assert_eq!(vocab.row("zzz-never-seen"), 0);
        assert_eq!(vocab.tokens()[0], UNK_TOKEN);
    }

    #[test]
    fn doc_init_single_clause_is_identity() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_vec(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let d = doc_init(&mut tape, h).unwrap();
        assert_eq!(tape.value(d).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn doc_init_of_opposite_rows_is_zero() {
        let mut tape = Tape::new();
        let h = tape.constant(
            Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 3.0, -1.0, 2.0, -3.0]).unwrap(),
        );
        let d = doc_init(&mut tape, h).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doc_init_matches_hand_computed_mean() {
        let mut rng = Rng::new(77);
        let data: Vec<f64> = (0..5 * 4).map(|_| rng.normal(0.0, 1.0)).collect();
        let t = Tensor::from_vec(vec![5, 4], data).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(t.clone());
        let d = doc_init(&mut tape, h).unwrap();
        for c in 0..4 {
            let want: f64 = (0..5).map(|r| t.at(r, c)).sum::<f64>() / 5.0;
            assert!((tape.value(d).at(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn doc_init_stays_within_coordinate_bounds() {
        let mut rng = Rng::new(8);
        let data: Vec<f64> = (0..5 * 4).map(|_| rng.normal(0.0, 1.0)).collect();
        let t = Tensor::from_vec(vec![5, 4], data).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(t.clone());
        let d = doc_init(&mut tape, h).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..5).map(|r| t.at(r, c)).collect();
            let v = tape.value(d).at(0, c);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn precomputed_roundtrip_is_bit_identical() {
        let mut rng = Rng::new(12);
        let mut reps = BTreeMap::new();
        for i in 0..3 {
            // Values generated at f32 precision so the narrow-on-write is exact.
            let data: Vec<f64> = (0..4 * 6).map(|_| rng.normal(0.0, 1.0) as f32 as f64).collect();
            reps.insert(format!("doc{i}"), Tensor::from_vec(vec![4, 6], data).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embs.bin");
        write_precomputed(&path, 6, &reps).unwrap();
        let (dim, back) = load_precomputed(&path, Some(6)).unwrap();
        assert_eq!(dim, 6);
        assert_eq!(back.len(), reps.len());
        for (id, h) in &reps {
            let b = &back[id];
            assert_eq!(b.shape(), h.shape());
            for (x, y) in b.data().iter().zip(h.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Writing what was loaded reproduces the file byte for byte.
        let path2 = dir.path().join("embs2.bin");
        write_precomputed(&path2, 6, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn known_payload_decodes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut reps = BTreeMap::new();
        reps.insert(
            "d0".to_string(),
            Tensor::from_vec(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap(),
        );
        write_precomputed(&path, 4, &reps).unwrap();
        let (_, back) = load_precomputed(&path, None).unwrap();
        assert_eq!(back["d0"].data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn dim_mismatch_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let mut reps = BTreeMap::new();
        reps.insert("d".to_string(), Tensor::zeros(vec![1, 4]));
        write_precomputed(&path, 4, &reps).unwrap();
        let err = load_precomputed(&path, Some(8)).unwrap_err();
        assert!(err.to_string().contains("width 4"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_are_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"NOTMAGIC____").unwrap();
        assert!(load_precomputed(&bad, None).unwrap_err().to_string().contains("magic"));

        let path = dir.path().join("trunc.bin");
        let mut reps = BTreeMap::new();
        reps.insert("d".to_string(), Tensor::zeros(vec![2, 3]));
        write_precomputed(&path, 3, &reps).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_precomputed(&path, None).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
