//! Mini-batch training, inference-time pair extraction, and checkpointing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_clause_labels, Document};
use crate::encoder::{load_precomputed, toy_encode, ClauseReps, ToyEncoderParams, Vocab};
use crate::graph::{build_graph, enumerate_pairs, AblationMode, PairCandidate};
use crate::model::{
    forward, joint_loss, BoundParams, DropoutConfig, GraphLayout, Mode, ModelConfig, ModelParams,
    Predictions,
};
use crate::numerics::{read_tensor_chunk, write_tensor_chunk, Rng};
use crate::{AdamW, Error, Result, Tape, Tensor};

const MODEL_MAGIC: &[u8; 8] = b"PBJEMDL1";
const ENCODER_TABLE: &str = "encoder.embedding";

/// Every training knob, with the reference defaults. A config file carries
/// the same field names as a single JSON object; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: usize,
    pub theta: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// None picks the encoder-mode default: 2e-5 for precomputed
    /// embeddings (a fine-tuning rate), 1e-3 for the from-scratch toy
    /// encoder, which stalls at 2e-5.
    pub learning_rate: Option<f64>,
    pub dropout: f64,
    pub dropout_on_encoder: bool,
    pub dropout_between_layers: bool,
    pub dropout_on_pairs: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: AblationMode,
    pub threshold: f64,
    pub fallback_argmax: bool,
    /// Embedding width; None means 32 for the toy encoder and the file's
    /// width for precomputed embeddings.
    pub dim: Option<usize>,
    pub shared_self_transform: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 3,
            theta: 1,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            learning_rate: None,
            dropout: 0.2,
            dropout_on_encoder: true,
            dropout_between_layers: true,
            dropout_on_pairs: false,
            batch_size: 4,
            epochs: 35,
            seed: 0,
            ablation: AblationMode::None,
            threshold: 0.5,
            fallback_argmax: false,
            dim: None,
            shared_self_transform: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta < 1 {
            return Err(Error::Config("theta must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("bad learning rate {lr}")));
            }
        }
        if let Some(d) = self.dim {
            if d == 0 {
                return Err(Error::Config("dim must be positive".into()));
            }
        }
        Ok(())
    }

    /// Parse a JSON config file; missing keys take the defaults above.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dropout_config(&self) -> DropoutConfig {
        DropoutConfig {
            rate: self.dropout,
            on_encoder_output: self.dropout_on_encoder,
            between_layers: self.dropout_between_layers,
            on_pair_reps: self.dropout_on_pairs,
        }
    }

    fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            lambda: self.lambda,
            theta: self.theta,
            ablation: self.ablation,
            shared_self_transform: self.shared_self_transform,
        }
    }
}

/// Which clause representations feed the model.
#[derive(Debug, Clone)]
pub enum EncoderSpec {
    Toy,
    Precomputed(PathBuf),
}

/// Trained (or loaded) encoder state carried by a checkpoint.
#[derive(Debug, Clone)]
pub enum EncoderState {
    Toy { table: Tensor, vocab: Vocab },
    Precomputed { dim: usize },
}

/// A complete snapshot: weights, encoder state, the effective configuration,
/// the last epoch index and its mean loss.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub encoder: EncoderState,
    pub config: TrainConfig,
    pub epoch: usize,
    pub loss: f64,
}

/// Training result: the final checkpoint plus the mean per-document loss of
/// every epoch.
#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

/// Graphs depend only on the clause count once lambda and ablation are
/// fixed, so they are built once per distinct length.
pub struct GraphCache {
    lambda: usize,
    ablation: AblationMode,
    cache: BTreeMap<usize, Arc<GraphLayout>>,
}

impl GraphCache {
    pub fn new(lambda: usize, ablation: AblationMode) -> Self {
        GraphCache {
            lambda,
            ablation,
            cache: BTreeMap::new(),
        }
    }

    pub fn layout(&mut self, n: usize) -> Arc<GraphLayout> {
        let (lambda, ablation) = (self.lambda, self.ablation);
        Arc::clone(self.cache.entry(n).or_insert_with(|| {
            let pairs = enumerate_pairs(n, lambda);
            Arc::new(GraphLayout::new(build_graph(n, &pairs, ablation)))
        }))
    }
}

fn resolved_lr(cfg: &TrainConfig, encoder: &EncoderSpec) -> f64 {
    cfg.learning_rate.unwrap_or(match encoder {
        EncoderSpec::Toy => 1e-3,
        EncoderSpec::Precomputed(_) => 2e-5,
    })
}

/// Train on a corpus. Each epoch shuffles the documents with the seeded
/// generator and walks them in batches; the batch loss is the mean of the
/// per-document joint losses and one optimizer step follows per batch.
pub fn train(corpus: &[Document], encoder: EncoderSpec, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }

    // Resolve encoder mode, width, learning rate.
    let precomputed = match &encoder {
        EncoderSpec::Toy => None,
        EncoderSpec::Precomputed(path) => {
            let (dim, reps) = load_precomputed(path, cfg.dim)?;
            for doc in corpus {
                if !reps.contains_key(&doc.doc_id) {
                    return Err(Error::Config(format!(
                        "precomputed embeddings are missing document `{}`",
                        doc.doc_id
                    )));
                }
            }
            Some((dim, reps))
        }
    };
    let dim = match &precomputed {
        Some((dim, _)) => *dim,
        None => cfg.dim.unwrap_or(32),
    };
    let lr = resolved_lr(cfg, &encoder);
    let mut effective = cfg.clone();
    effective.dim = Some(dim);
    effective.learning_rate = Some(lr);

    let mut rng = Rng::new(cfg.seed);
    let mut toy = match &encoder {
        EncoderSpec::Toy => {
            let vocab = Vocab::from_corpus(corpus);
            let params = ToyEncoderParams::init(vocab.len(), dim, &mut rng);
            Some((params, vocab))
        }
        EncoderSpec::Precomputed(_) => None,
    };
    let model_cfg = effective.model_config(dim);
    let mut params = ModelParams::init(model_cfg.clone(), &mut rng);
    let mut opt = AdamW::with_lr(lr);
    let mut graphs = GraphCache::new(cfg.lambda, cfg.ablation);
    let dropout = cfg.dropout_config();

    let labels: Vec<_> = corpus.iter().map(derive_clause_labels).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss_total = 0.0;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let table_id = toy
                .as_ref()
                .map(|(enc, _)| tape.param(enc.table.clone()));

            let mut doc_losses = Vec::with_capacity(batch.len());
            for &di in batch {
                let doc = &corpus[di];
                let h = match (&precomputed, &toy) {
                    (Some((_, reps)), _) => tape.constant(reps[&doc.doc_id].clone()),
                    (None, Some((_, vocab))) => {
                        toy_encode(&mut tape, doc, table_id.unwrap(), vocab)?
                    }
                    (None, None) => unreachable!("one encoder mode is always set"),
                };
                let layout = graphs.layout(doc.n_clauses());
                let out = forward(
                    &mut tape, h, &layout, &bound, &model_cfg, &dropout, Mode::Train, &mut rng,
                )?;
                let loss = joint_loss(
                    &mut tape,
                    &out,
                    &layout.graph.pairs,
                    &labels[di],
                    &doc.gold_pairs,
                    cfg.alpha,
                    cfg.beta,
                    cfg.gamma,
                )?;
                epoch_loss_total += tape.value(loss).data()[0];
                doc_losses.push(loss);
            }

            let mut batch_sum = doc_losses[0];
            for &l in &doc_losses[1..] {
                batch_sum = tape.add(batch_sum, l)?;
            }
            let batch_loss = tape.scale(batch_sum, 1.0 / batch.len() as f64);
            let batch_loss_value = tape.value(batch_loss).data()[0];
            if !batch_loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("epoch {epoch}, batch {batch_idx}"),
                });
            }

            let grads = tape.backward(batch_loss)?;
            for (name, id) in bound.ids() {
                let grad = grads.or_zeros(id, tape.value(id).numel());
                let tensor = params
                    .tensors_mut()
                    .find(|(n, _)| *n == name)
                    .expect("bound name exists")
                    .1;
                opt.step(name, tensor.data_mut(), &grad)?;
            }
            if let (Some((enc, _)), Some(table_id)) = (&mut toy, table_id) {
                let grad = grads.or_zeros(table_id, enc.table.numel());
                opt.step(ENCODER_TABLE, enc.table.data_mut(), &grad)?;
            }
        }
        epoch_losses.push(epoch_loss_total / corpus.len() as f64);
    }

    let encoder_state = match (toy, &precomputed) {
        (Some((enc, vocab)), _) => EncoderState::Toy {
            table: enc.table,
            vocab,
        },
        (None, Some((dim, _))) => EncoderState::Precomputed { dim: *dim },
        (None, None) => unreachable!(),
    };
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            params,
            encoder: encoder_state,
            config: effective,
            epoch: cfg.epochs,
            loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        },
        epoch_losses,
    })
}

/// Everything `extract` reads off one document.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub pairs: BTreeSet<(usize, usize)>,
    pub emo_clauses: BTreeSet<usize>,
    pub cause_clauses: BTreeSet<usize>,
    /// Confidence per instantiated candidate, in candidate order.
    pub confidences: Vec<(PairCandidate, f64)>,
    pub emo_probs: Vec<f64>,
    pub cause_probs: Vec<f64>,
}

/// Evaluation-mode forward pass plus thresholding: a candidate is extracted
/// when its probability is at least `threshold` (inclusive); with
/// `fallback_argmax`, an empty set falls back to the single most confident
/// candidate. Clause sets come from the head probabilities.
pub fn extract(
    doc: &Document,
    checkpoint: &Checkpoint,
    precomputed: Option<&BTreeMap<String, ClauseReps>>,
) -> Result<Extraction> {
    let cfg = &checkpoint.config;
    let dim = cfg.dim.expect("checkpoint config carries the resolved dim");
    let model_cfg = cfg.model_config(dim);
    let pairs = enumerate_pairs(doc.n_clauses(), cfg.lambda);
    let layout = GraphLayout::new(build_graph(doc.n_clauses(), &pairs, cfg.ablation));

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &checkpoint.params);
    let h = match &checkpoint.encoder {
        EncoderState::Toy { table, vocab } => {
            let table_id = tape.constant(table.clone());
            toy_encode(&mut tape, doc, table_id, vocab)?
        }
        EncoderState::Precomputed { dim } => {
            let reps = precomputed.ok_or_else(|| {
                Error::Config("checkpoint needs precomputed embeddings for extraction".into())
            })?;
            let rep = reps.get(&doc.doc_id).ok_or_else(|| {
                Error::Config(format!("no precomputed embeddings for doc `{}`", doc.doc_id))
            })?;
            if rep.cols() != *dim {
                return Err(Error::Config(format!(
                    "embeddings for `{}` have width {}, model expects {dim}",
                    doc.doc_id,
                    rep.cols()
                )));
            }
            tape.constant(rep.clone())
        }
    };
    let mut rng = Rng::new(0);
    let out = forward(
        &mut tape,
        h,
        &layout,
        &bound,
        &model_cfg,
        &cfg.dropout_config(),
        Mode::Eval,
        &mut rng,
    )?;
    let preds = Predictions::from_tape(&tape, &out, &pairs);

    let confidences: Vec<(PairCandidate, f64)> = pairs
        .iter()
        .enumerate()
        .map(|(k, &p)| (p, preds.pair_prob(k)))
        .collect();
    let mut extracted: BTreeSet<(usize, usize)> = confidences
        .iter()
        .filter(|(_, prob)| *prob >= cfg.threshold)
        .map(|(p, _)| (p.emo_idx, p.cause_idx))
        .collect();
    if extracted.is_empty() && cfg.fallback_argmax {
        if let Some((best, _)) = confidences
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite probabilities"))
        {
            extracted.insert((best.emo_idx, best.cause_idx));
        }
    }
    let emo_probs: Vec<f64> = (0..doc.n_clauses()).map(|i| preds.emo_prob(i)).collect();
    let cause_probs: Vec<f64> = (0..doc.n_clauses()).map(|i| preds.cause_prob(i)).collect();
    let emo_clauses = emo_probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= cfg.threshold)
        .map(|(i, _)| i + 1)
        .collect();
    let cause_clauses = cause_probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= cfg.threshold)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(Extraction {
        pairs: extracted,
        emo_clauses,
        cause_clauses,
        confidences,
        emo_probs,
        cause_probs,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    encoder_mode: String,
    vocab: Option<Vec<String>>,
    vocab_size: usize,
    epoch: usize,
    loss: f64,
}

/// Write a checkpoint: magic, tensor count, named tensor chunks (encoder
/// table first in toy mode, then the model tensors in canonical order), then
/// a length-prefixed UTF-8 JSON blob with the effective configuration.
pub fn save_checkpoint(path: impl AsRef<Path>, cp: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&display, e);

    w.write_all(MODEL_MAGIC).map_err(io_err)?;
    let toy_table = match &cp.encoder {
        EncoderState::Toy { table, .. } => Some(table),
        EncoderState::Precomputed { .. } => None,
    };
    let count = cp.params.len() + usize::from(toy_table.is_some());
    w.write_all(&(count as u32).to_le_bytes()).map_err(io_err)?;
    if let Some(table) = toy_table {
        write_tensor_chunk(&mut w, ENCODER_TABLE, table).map_err(io_err)?;
    }
    for (name, t) in cp.params.tensors() {
        write_tensor_chunk(&mut w, name, t).map_err(io_err)?;
    }

    let meta = match &cp.encoder {
        EncoderState::Toy { vocab, .. } => CheckpointMeta {
            config: cp.config.clone(),
            encoder_mode: "toy".into(),
            vocab: Some(vocab.tokens().to_vec()),
            vocab_size: vocab.len(),
            epoch: cp.epoch,
            loss: cp.loss,
        },
        EncoderState::Precomputed { dim } => CheckpointMeta {
            config: cp.config.clone(),
            encoder_mode: "precomputed".into(),
            vocab: None,
            vocab_size: *dim,
            epoch: cp.epoch,
            loss: cp.loss,
        },
    };
    let blob = serde_json::to_vec(&meta)
        .map_err(|e| Error::io(&display, std::io::Error::other(e)))?;
    w.write_all(&(blob.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&blob).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&display, "truncated magic"))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(&display, "bad magic (not a model file)"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::format(&display, "truncated tensor count"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor_chunk(&mut r, &display)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(&display, format!("duplicate tensor `{name}`")));
        }
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::format(&display, "truncated config length"))?;
    let blob_len = u32::from_le_bytes(u32buf) as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)
        .map_err(|_| Error::format(&display, "truncated config blob"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&blob)
        .map_err(|e| Error::format(&display, format!("bad config blob: {e}")))?;

    let dim = meta
        .config
        .dim
        .ok_or_else(|| Error::format(&display, "config blob lacks the resolved dim"))?;
    let encoder = match meta.encoder_mode.as_str() {
        "toy" => {
            let table = tensors.remove(ENCODER_TABLE).ok_or_else(|| {
                Error::format(&display, format!("missing tensor `{ENCODER_TABLE}`"))
            })?;
            let vocab = Vocab::from_tokens(meta.vocab.ok_or_else(|| {
                Error::format(&display, "toy checkpoint lacks a vocabulary")
            })?);
            if table.rows() != vocab.len() || table.cols() != dim {
                return Err(Error::format(&display, "encoder table shape mismatch"));
            }
            EncoderState::Toy { table, vocab }
        }
        "precomputed" => EncoderState::Precomputed { dim },
        other => {
            return Err(Error::format(&display, format!("unknown encoder mode `{other}`")))
        }
    };
    let params = ModelParams::from_tensors(meta.config.model_config(dim), tensors)?;
    Ok(Checkpoint {
        params,
        encoder,
        config: meta.config,
        epoch: meta.epoch,
        loss: meta.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthConfig};

    fn tiny_corpus(docs: usize, seed: u64) -> Vec<Document> {
        synth_generate(
            &SynthConfig {
                doc_count: docs,
                vocab_size: 60,
                doc_len_range: (4, 7),
                emotion_keyword_count: 4,
                cause_keyword_count: 4,
                cue_count: 6,
                ..SynthConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            dim: Some(8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_at_init() {
        let corpus = tiny_corpus(1, 1);
        let mut cfg = quick_cfg(1, 3);
        cfg.learning_rate = Some(0.0);
        let once = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
        assert_eq!(once.epoch_losses.len(), 1);
        let mut cfg2 = cfg.clone();
        cfg2.epochs = 3;
        let thrice = train(&corpus, EncoderSpec::Toy, &cfg2).unwrap();
        for ((n1, t1), (n2, t2)) in once
            .checkpoint
            .params
            .tensors()
            .zip(thrice.checkpoint.params.tensors())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1} moved under lr=0");
        }
    }

    #[test]
    fn same_seed_same_loss_log() {
        // 12 docs / batch 4 / 4 epochs = 12 optimizer steps compared bitwise.
        let corpus = tiny_corpus(12, 5);
        let cfg = quick_cfg(4, 11);
        let a = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
        let b = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
        assert_eq!(a.epoch_losses.len(), b.epoch_losses.len());
        for (x, y) in a.epoch_losses.iter().zip(&b.epoch_losses) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = train(
            &corpus,
            EncoderSpec::Toy,
            &TrainConfig {
                seed: 12,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(
            a.epoch_losses[0].to_bits(),
            c.epoch_losses[0].to_bits(),
            "different seeds should differ"
        );
    }

    #[test]
    fn loss_decreases_on_a_learnable_corpus() {
        let corpus = synth_generate(
            &SynthConfig {
                doc_count: 200,
                ..SynthConfig::default()
            },
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 1,
            dim: Some(32),
            ..TrainConfig::default()
        };
        let out = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
        for w in out.epoch_losses.windows(2) {
            assert!(
                w[1] < w[0],
                "epoch-mean loss did not decrease: {:?}",
                out.epoch_losses
            );
        }
    }

    #[test]
    fn precomputed_mode_trains_and_extracts() {
        let corpus = tiny_corpus(8, 71);
        let mut rng = crate::numerics::Rng::new(1);
        let mut reps = BTreeMap::new();
        for doc in &corpus {
            let data: Vec<f64> = (0..doc.n_clauses() * 8).map(|_| rng.normal(0.0, 0.5)).collect();
            reps.insert(
                doc.doc_id.clone(),
                Tensor::from_vec(vec![doc.n_clauses(), 8], data).unwrap(),
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embs.bin");
        crate::encoder::write_precomputed(&path, 8, &reps).unwrap();

        let cfg = TrainConfig {
            dim: None, // taken from the file
            ..quick_cfg(2, 3)
        };
        let out = train(&corpus, EncoderSpec::Precomputed(path), &cfg).unwrap();
        assert_eq!(out.checkpoint.config.dim, Some(8));
        assert_eq!(
            out.checkpoint.config.learning_rate,
            Some(2e-5),
            "precomputed mode defaults to the fine-tuning rate"
        );
        assert!(matches!(out.checkpoint.encoder, EncoderState::Precomputed { dim: 8 }));
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()));

        // Reload and extract; embeddings must be supplied at inference.
        let model_path = dir.path().join("m.bin");
        save_checkpoint(&model_path, &out.checkpoint).unwrap();
        let loaded = load_checkpoint(&model_path).unwrap();
        assert!(extract(&corpus[0], &loaded, None).is_err());
        let ext = extract(&corpus[0], &loaded, Some(&reps)).unwrap();
        assert!(!ext.confidences.is_empty());
    }

    #[test]
    fn precomputed_mode_requires_full_coverage() {
        let corpus = tiny_corpus(3, 9);
        let mut reps = BTreeMap::new();
        // Only two of three documents get embeddings.
        for doc in &corpus[..2] {
            reps.insert(
                doc.doc_id.clone(),
                Tensor::zeros(vec![doc.n_clauses(), 8]),
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embs.bin");
        crate::encoder::write_precomputed(&path, 8, &reps).unwrap();
        let cfg = quick_cfg(1, 1);
        let err = train(&corpus, EncoderSpec::Precomputed(path), &cfg).unwrap_err();
        assert!(err.to_string().contains(&corpus[2].doc_id), "{err}");
    }

    #[test]
    fn extract_with_zero_heads_takes_every_candidate() {
        let corpus = tiny_corpus(1, 21);
        let mut cfg = quick_cfg(1, 2);
        cfg.learning_rate = Some(0.0);
        let mut out = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
        for (name, t) in out.checkpoint.params.tensors_mut() {
            if name.starts_with("head.") {
                t.data_mut().fill(0.0);
            }
        }
        let ext = extract(&corpus[0], &out.checkpoint, None).unwrap();
        let n = corpus[0].n_clauses();
        let expected = enumerate_pairs(n, cfg.lambda).len();
        assert_eq!(ext.pairs.len(), expected, "inclusive threshold at 0.5");
        assert_eq!(ext.emo_clauses.len(), n);
        for (_, conf) in &ext.confidences {
            assert_eq!(*conf, 0.5);
        }
    }

    #[test]
    fn impossible_threshold_falls_back_to_argmax() {
        let corpus = tiny_corpus(1, 22);
        let mut cfg = quick_cfg(1, 2);
        cfg.threshold = 1.1;
        cfg.fallback_argmax = true;
        let out = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
        let ext = extract(&corpus[0], &out.checkpoint, None).unwrap();
        assert_eq!(ext.pairs.len(), 1);
        let best = ext
            .confidences
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert!(ext.pairs.contains(&(best.0.emo_idx, best.0.cause_idx)));

        let mut no_fallback = out.checkpoint.clone();
        no_fallback.config.fallback_argmax = false;
        let ext2 = extract(&corpus[0], &no_fallback, None).unwrap();
        assert!(ext2.pairs.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_extractions_bitwise() {
        let corpus = tiny_corpus(24, 31);
        let cfg = quick_cfg(2, 13);
        let out = train(&corpus[..4], EncoderSpec::Toy, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&path, &out.checkpoint).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, out.checkpoint.epoch);
        for doc in &corpus[4..24] {
            let a = extract(doc, &out.checkpoint, None).unwrap();
            let b = extract(doc, &loaded, None).unwrap();
            assert_eq!(a.pairs, b.pairs);
            for ((pa, ca), (pb, cb)) in a.confidences.iter().zip(&b.confidences) {
                assert_eq!(pa, pb);
                assert_eq!(ca.to_bits(), cb.to_bits());
            }
        }
    }

    #[test]
    fn saved_files_are_byte_identical_across_runs() {
        let corpus = tiny_corpus(8, 41);
        let cfg = quick_cfg(2, 17);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        save_checkpoint(&pa, &train(&corpus, EncoderSpec::Toy, &cfg).unwrap().checkpoint).unwrap();
        save_checkpoint(&pb, &train(&corpus, EncoderSpec::Toy, &cfg).unwrap().checkpoint).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"epochs": 3, "learning_rate": 0.01}"#).unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.learning_rate, Some(0.01));
        assert_eq!(cfg.lambda, 3);

        std::fs::write(&path, r#"{"epochz": 3}"#).unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
    }

    #[test]
    fn epoch_means_average_exactly_one_pass_per_document() {
        // With lr = 0 the model never moves, so the per-document losses are
        // the same in every epoch; the epoch means must then be identical
        // regardless of shuffle order, which only holds if each epoch is a
        // permutation of the corpus (dropout off to keep passes identical).
        let corpus = tiny_corpus(7, 51);
        let cfg = TrainConfig {
            batch_size: 3,
            learning_rate: Some(0.0),
            dropout: 0.0,
            ..quick_cfg(4, 19)
        };
        let out = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
        assert_eq!(out.epoch_losses.len(), 4);
        for l in &out.epoch_losses[1..] {
            // Shuffle order reassociates the sum, so allow rounding slack; a
            // missed or doubled document would shift the mean by whole units.
            assert!((l - out.epoch_losses[0]).abs() < 1e-9, "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn ablation_modes_all_train() {
        let corpus = tiny_corpus(6, 61);
        for ablation in AblationMode::ALL {
            let cfg = TrainConfig {
                ablation,
                ..quick_cfg(1, 23)
            };
            let out = train(&corpus, EncoderSpec::Toy, &cfg).unwrap();
            assert!(out.epoch_losses[0].is_finite(), "{ablation}");
            let ext = extract(&corpus[0], &out.checkpoint, None).unwrap();
            assert!(!ext.confidences.is_empty(), "{ablation}");
        }
    }
}
