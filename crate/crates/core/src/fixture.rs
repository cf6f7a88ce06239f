//! A small seeded end-to-end setup (5 clauses, width 4, window 3, one
//! convolution layer) plus the full-model finite-difference gradient check
//! run by the test suites and the `gradcheck` CLI command.

use std::collections::BTreeMap;

use crate::corpus::{derive_clause_labels, ClauseLabels, Document};
use crate::encoder::{toy_encode, ToyEncoderParams, Vocab};
use crate::graph::{build_graph, enumerate_pairs, AblationMode};
use crate::model::{
    forward, joint_loss, BoundParams, DropoutConfig, GraphLayout, Mode, ModelConfig, ModelParams,
};
use crate::numerics::gradcheck::{central_difference, relative_error};
use crate::numerics::Rng;
use crate::{Result, Tape, Tensor};

pub const FIXTURE_CLAUSES: usize = 5;
pub const FIXTURE_DIM: usize = 4;
pub const FIXTURE_LAMBDA: usize = 3;
pub const FIXTURE_THETA: usize = 1;

/// Everything needed to run the standard fixture end to end.
pub struct Fixture {
    pub doc: Document,
    pub labels: ClauseLabels,
    pub vocab: Vocab,
    pub encoder: ToyEncoderParams,
    pub params: ModelParams,
    pub config: ModelConfig,
    pub layout: GraphLayout,
}

/// Build the fixture with weights seeded from `seed`. The document has five
/// clauses and three gold pairs, one of them outside the window so the
/// out-of-window exclusion is always on the tested path.
pub fn standard_fixture(seed: u64) -> Fixture {
    let doc = Document::new(
        "fixture-0",
        vec![
            vec!["the".into(), "debt".into(), "weighed".into()],
            vec!["she".into(), "wept".into(), "openly".into()],
            vec!["neighbors".into(), "celebrated".into()],
            vec!["his".into(), "failure".into(), "galled".into(), "him".into()],
            vec!["rage".into(), "followed".into()],
        ],
        vec![(2, 1), (4, 4), (5, 1)],
    )
    .unwrap();
    let labels = derive_clause_labels(&doc);
    let vocab = Vocab::from_corpus(std::slice::from_ref(&doc));
    let mut rng = Rng::new(seed);
    let encoder = ToyEncoderParams::init(vocab.len(), FIXTURE_DIM, &mut rng);
    let config = ModelConfig::new(
        FIXTURE_DIM,
        FIXTURE_LAMBDA,
        FIXTURE_THETA,
        AblationMode::None,
    );
    let params = ModelParams::init(config.clone(), &mut rng);
    let pairs = enumerate_pairs(doc.n_clauses(), FIXTURE_LAMBDA);
    let layout = GraphLayout::new(build_graph(doc.n_clauses(), &pairs, AblationMode::None));
    Fixture {
        doc,
        labels,
        vocab,
        encoder,
        params,
        config,
        layout,
    }
}

/// Outcome of [`model_gradcheck`]: worst relative disagreement between the
/// tape gradient and central finite differences over every parameter entry,
/// encoder table included.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub entries_checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn fixture_loss(fix: &Fixture, encoder_table: &Tensor, params: &ModelParams) -> (Tape, f64) {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let table = tape.param(encoder_table.clone());
    let h = toy_encode(&mut tape, &fix.doc, table, &fix.vocab).expect("encode");
    let mut rng = Rng::new(0);
    let no_dropout = DropoutConfig {
        rate: 0.0,
        on_encoder_output: false,
        between_layers: false,
        on_pair_reps: false,
    };
    let out = forward(
        &mut tape,
        h,
        &fix.layout,
        &bound,
        &fix.config,
        &no_dropout,
        Mode::Eval,
        &mut rng,
    )
    .expect("forward");
    let loss = joint_loss(
        &mut tape,
        &out,
        &fix.layout.graph.pairs,
        &fix.labels,
        &fix.doc.gold_pairs,
        1.0,
        1.0,
        1.0,
    )
    .expect("loss");
    let value = tape.value(loss).data()[0];
    (tape, value)
}

/// Check every parameter gradient of the fixture's joint loss against
/// central finite differences with step `h = 1e-5`.
pub fn model_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let fix = standard_fixture(seed);

    // Flat layout: encoder table first, then model tensors in canonical order.
    let mut names: Vec<String> = vec!["encoder.embedding".into()];
    let mut flat: Vec<f64> = fix.encoder.table.data().to_vec();
    let mut spans: Vec<(usize, usize)> = vec![(0, flat.len())];
    for (name, t) in fix.params.tensors() {
        names.push(name.to_string());
        let start = flat.len();
        flat.extend_from_slice(t.data());
        spans.push((start, flat.len()));
    }

    let rebuild = |x: &[f64]| -> (Tensor, ModelParams) {
        let table = Tensor::from_vec(
            fix.encoder.table.shape().to_vec(),
            x[spans[0].0..spans[0].1].to_vec(),
        )
        .unwrap();
        let mut params = fix.params.clone();
        for ((_, t), &(start, end)) in params.tensors_mut().zip(&spans[1..]) {
            t.data_mut().copy_from_slice(&x[start..end]);
        }
        (table, params)
    };

    // Analytic gradients from one backward pass.
    let mut analytic = vec![0.0; flat.len()];
    {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &fix.params);
        let table = tape.param(fix.encoder.table.clone());
        let h = toy_encode(&mut tape, &fix.doc, table, &fix.vocab)?;
        let mut rng = Rng::new(0);
        let no_dropout = DropoutConfig {
            rate: 0.0,
            on_encoder_output: false,
            between_layers: false,
            on_pair_reps: false,
        };
        let out = forward(
            &mut tape,
            h,
            &fix.layout,
            &bound,
            &fix.config,
            &no_dropout,
            Mode::Eval,
            &mut rng,
        )?;
        let loss = joint_loss(
            &mut tape,
            &out,
            &fix.layout.graph.pairs,
            &fix.labels,
            &fix.doc.gold_pairs,
            1.0,
            1.0,
            1.0,
        )?;
        let grads = tape.backward(loss)?;
        analytic[spans[0].0..spans[0].1]
            .copy_from_slice(&grads.or_zeros(table, fix.encoder.table.numel()));
        let span_of: BTreeMap<&str, (usize, usize)> = names[1..]
            .iter()
            .map(String::as_str)
            .zip(spans[1..].iter().copied())
            .collect();
        for (name, id) in bound.ids() {
            let (start, end) = span_of[name];
            analytic[start..end].copy_from_slice(&grads.or_zeros(id, end - start));
        }
    }

    let mut f = |x: &[f64]| -> f64 {
        let (table, params) = rebuild(x);
        fixture_loss(&fix, &table, &params).1
    };
    let numeric = central_difference(&mut f, &flat, 1e-5);

    let mut max_rel_error = 0.0;
    let mut worst_param = String::new();
    for (name, &(start, end)) in names.iter().zip(&spans) {
        for i in start..end {
            let err = relative_error(analytic[i], numeric[i], 1e-6);
            if err > max_rel_error {
                max_rel_error = err;
                worst_param = format!("{name}[{}]", i - start);
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_error,
        worst_param,
        entries_checked: flat.len(),
    })
}
