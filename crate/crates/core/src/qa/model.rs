use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_sketch_stream, gate_backward, gated_linear_sketch, linear_attention,
    linear_attention_backward, softmax_attention, softmax_attention_backward, GateParams,
    HiddenStates,
};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{axpy_slice, gemv_acc, gemv_t_acc, softmax_in_place, Matrix, Vector};
use crate::rnn::{Encoder, EncoderOutput};

use super::data::{ClozeExample, Vocabulary};
use super::{AttentionMode, TrainConfig};

/// Parameters of one cloze model. The same struct, zeroed, holds gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mode: AttentionMode,
    pub doc: Encoder,
    pub query: Encoder,
    /// Present only in gated mode.
    pub gate: Option<GateParams>,
    /// `entities x 2k`, applied to `[R; q]`.
    pub head_w: Matrix,
    pub head_b: Vector,
}

impl ModelParams {
    pub fn random<R: Rng + ?Sized>(
        mode: AttentionMode,
        vocab_size: usize,
        entities: usize,
        d: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let doc = Encoder::random(vocab_size, d, k, rng);
        let query = Encoder::random(vocab_size, d, k, rng);
        let gate = (mode == AttentionMode::Gated).then(|| GateParams::random(k, rng));
        let head_w = Matrix::random_uniform(entities, 2 * k, 1.0 / ((2 * k) as f64).sqrt(), rng);
        ModelParams {
            mode,
            doc,
            query,
            gate,
            head_w,
            head_b: Vector::zeros(entities),
        }
    }

    pub fn k(&self) -> usize {
        self.query.hidden_dim()
    }

    pub fn entity_count(&self) -> usize {
        self.head_b.dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every trainable tensor, in a fixed order shared with [`Self::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.doc.embedding.e.as_slice()];
        out.extend(self.doc.gru.tensors());
        out.push(self.query.embedding.e.as_slice());
        out.extend(self.query.gru.tensors());
        if let Some(g) = &self.gate {
            out.push(g.w.as_slice());
            out.push(g.b.as_slice());
        }
        out.push(self.head_w.as_slice());
        out.push(self.head_b.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.doc.embedding.e.as_mut_slice()];
        out.extend(self.doc.gru.tensors_mut());
        out.push(self.query.embedding.e.as_mut_slice());
        out.extend(self.query.gru.tensors_mut());
        if let Some(g) = &mut self.gate {
            out.push(g.w.as_mut_slice());
            out.push(g.b.as_mut_slice());
        }
        out.push(self.head_w.as_mut_slice());
        out.push(self.head_b.as_mut_slice());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check(&self) -> Result<()> {
        let k = self.k();
        ensure_dim("model", k, self.doc.hidden_dim())?;
        ensure_dim("model", 2 * k, self.head_w.cols())?;
        ensure_dim("model", self.head_w.rows(), self.head_b.dim())?;
        match (&self.gate, self.mode) {
            (Some(g), AttentionMode::Gated) => ensure_dim("model gate", k, g.k()),
            (None, AttentionMode::Gated) => Err(Error::Contract("gated mode needs gate parameters".into())),
            (Some(_), _) => Err(Error::Contract(format!("mode {} takes no gate parameters", self.mode))),
            (None, _) => Ok(()),
        }
    }
}

/// `−log softmax(logits)[answer]`, computed with log-sum-exp.
pub fn cross_entropy_loss(logits: &Vector, answer: usize) -> Result<f64> {
    if answer >= logits.dim() {
        return Err(Error::Contract(format!(
            "answer slot {answer} outside {} logits",
            logits.dim()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[answer])
}

/// Document-side state shared by all queries on that document.
enum DocRepr {
    Empty,
    Softmax(HiddenStates),
    Linear(HiddenStates, crate::attention::Sketch),
    Gated(crate::attention::StepTape, HiddenStates),
}

struct DocPass {
    encoded: Option<EncoderOutput>,
    repr: DocRepr,
}

fn encode_document(params: &ModelParams, tokens: &[usize]) -> Result<DocPass> {
    if params.mode == AttentionMode::None {
        return Ok(DocPass {
            encoded: None,
            repr: DocRepr::Empty,
        });
    }
    let out = params.doc.encode_document(tokens)?;
    if tokens.is_empty() {
        return Ok(DocPass {
            encoded: Some(out),
            repr: DocRepr::Empty,
        });
    }
    let h = HiddenStates::new(out.states.clone())?;
    let repr = match params.mode {
        AttentionMode::None => unreachable!(),
        AttentionMode::Softmax => DocRepr::Softmax(h),
        AttentionMode::Linear => {
            let c = build_sketch_stream(h.k(), out.states.row_iter())?;
            DocRepr::Linear(h, c)
        }
        AttentionMode::Gated => {
            let gp = params.gate.as_ref().expect("checked");
            let tape = gated_linear_sketch(&h, gp)?;
            let f_rows: Vec<&[f64]> = tape.steps.iter().map(|s| s.f.as_slice()).collect();
            let f = HiddenStates::from_rows(&f_rows)?;
            DocRepr::Gated(tape, f)
        }
    };
    Ok(DocPass {
        encoded: Some(out),
        repr,
    })
}

fn attend(repr: &DocRepr, q: &Vector) -> Result<Vector> {
    match repr {
        DocRepr::Empty => Ok(Vector::zeros(q.dim())),
        DocRepr::Softmax(h) => softmax_attention(h, q),
        DocRepr::Linear(_, c) => linear_attention(c, q),
        DocRepr::Gated(tape, _) => linear_attention(&tape.sketch, q),
    }
}

fn head(params: &ModelParams, features: &[f64]) -> Vector {
    let mut logits = params.head_b.as_slice().to_vec();
    gemv_acc(&mut logits, &params.head_w, features);
    Vector::new(logits)
}

fn features(params: &ModelParams, repr: &DocRepr, q: &Vector) -> Result<Vector> {
    Ok(match params.mode {
        AttentionMode::None => q.concat(q),
        _ => attend(repr, q)?.concat(q),
    })
}

/// Entity logits for one example.
pub fn model_forward(params: &ModelParams, example: &ClozeExample) -> Result<Vector> {
    params.check()?;
    let doc = encode_document(params, &example.doc_tokens)?;
    let (q, _) = params.query.encode_query(&example.query_tokens)?;
    Ok(head(params, features(params, &doc.repr, &q)?.as_slice()))
}

/// Logits for several queries on one document, encoding the document once.
pub fn document_logits(params: &ModelParams, doc_tokens: &[usize], queries: &[&[usize]]) -> Result<Vec<Vector>> {
    params.check()?;
    let doc = encode_document(params, doc_tokens)?;
    queries
        .iter()
        .map(|tokens| {
            let (q, _) = params.query.encode_query(tokens)?;
            Ok(head(params, features(params, &doc.repr, &q)?.as_slice()))
        })
        .collect()
}

/// Summary of a loss/gradient evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub examples: usize,
}

/// Loss over all queries of one document (`examples` must share the
/// document), adding `weight * ∂loss/∂θ` into `grads`.
pub fn accumulate_document_gradients(
    params: &ModelParams,
    vocab: &Vocabulary,
    examples: &[ClozeExample],
    weight: f64,
    grads: &mut ModelParams,
) -> Result<BatchStats> {
    params.check()?;
    let Some(first) = examples.first() else {
        return Ok(BatchStats::default());
    };
    if examples.iter().any(|e| e.doc_id != first.doc_id) {
        return Err(Error::Contract("examples span several documents".into()));
    }
    let k = params.k();
    let doc = encode_document(params, &first.doc_tokens)?;
    let n = first.doc_tokens.len();
    // gradient on the document-side rows: H for softmax/linear, F for gated
    let mut d_rows = Matrix::zeros(n, k);
    let mut stats = BatchStats::default();

        for ex in examples {
            let slot = vocab.entity_slot(ex.answer).ok_or_else(|| {
                Error::Contract(format!("answer id {} is not an entity", ex.answer))
            })?;
            let (q, qout) = params.query.encode_query(&ex.query_tokens)?;
            let x = features(params, &doc.repr, &q)?;
            let logits = head(params, x.as_slice());

            let mut p = logits.clone().into_inner();
            softmax_in_place(&mut p);
            let loss = -p[slot].ln();
            let loss = if loss.is_finite() { loss } else { cross_entropy_loss(&logits, slot)? };
            stats.loss_sum += loss;
            stats.examples += 1;
            if argmax(logits.as_slice()) == slot {
                stats.correct += 1;
            }

            let mut d_logits = p;
            d_logits[slot] -= 1.0;
            d_logits.iter_mut().for_each(|v| *v *= weight);
            grads.head_w.add_outer(1.0, &d_logits, x.as_slice())?;
            axpy_slice(1.0, &d_logits, grads.head_b.as_mut_slice());
            let mut dx = vec![0.0; 2 * k];
            gemv_t_acc(&mut dx, &params.head_w, &d_logits);
            let (d_r, d_q_head) = dx.split_at(k);
            let mut dq = Vector::from(d_q_head);
            let d_r = Vector::from(d_r);

            match &doc.repr {
                _ if params.mode == AttentionMode::None => dq.add_scaled(1.0, &d_r)?,
                DocRepr::Empty => {}
                DocRepr::Softmax(h) => {
                    let g = softmax_attention_backward(h, &q, &d_r)?;
                    d_rows.add_scaled(1.0, &g.dh)?;
                    dq.add_scaled(1.0, &g.dq)?;
                }
                DocRepr::Linear(h, _) => {
                    let g = linear_attention_backward(h, &q, &d_r)?;
                    d_rows.add_scaled(1.0, &g.dh)?;
                    dq.add_scaled(1.0, &g.dq)?;
                }
                DocRepr::Gated(_, f) => {
                    let g = linear_attention_backward(f, &q, &d_r)?;
                    d_rows.add_scaled(1.0, &g.dh)?;
                    dq.add_scaled(1.0, &g.dq)?;
                }
            }

            let mut d_states = Matrix::zeros(ex.query_tokens.len(), k);
            d_states.row_mut(ex.query_tokens.len() - 1).copy_from_slice(dq.as_slice());
            params.query.backward(&ex.query_tokens, &qout, &d_states, &mut grads.query)?;
        }

    if let Some(encoded) = &doc.encoded {
        let d_states = match &doc.repr {
            DocRepr::Gated(tape, _) => {
                let gp = params.gate.as_ref().expect("checked");
                let (dh, gate_grads) = gate_backward(tape, &d_rows, gp)?;
                let g = grads.gate.as_mut().expect("grads mirror params");
                g.w.add_scaled(1.0, &gate_grads.dw)?;
                g.b.add_scaled(1.0, &gate_grads.db)?;
                dh
            }
            DocRepr::Empty => return Ok(stats),
            _ => d_rows,
        };
        params.doc.backward(&first.doc_tokens, encoded, &d_states, &mut grads.doc)?;
    }
    Ok(stats)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trained model plus everything needed to reuse it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut ck: Checkpoint = serde_json::from_str(&text)?;
        ck.vocab.rebuild_index();
        ck.params.check()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: AttentionMode, seed: u64) -> (ModelParams, Vocabulary, Vec<ClozeExample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::new(["a", "b", "c"], ["x", "y", "z", "u"]).unwrap();
        let params = ModelParams::random(mode, vocab.len(), vocab.entity_count(), 3, 3, &mut rng);
        let ids = |s: &str| vocab.encode(s);
        let examples = vec![
            ClozeExample {
                doc_id: 0,
                doc_tokens: ids("x a y b"),
                query_tokens: ids("x a @blank"),
                answer: vocab.id("y").unwrap(),
            },
            ClozeExample {
                doc_id: 0,
                doc_tokens: ids("x a y b"),
                query_tokens: ids("c @blank"),
                answer: vocab.id("x").unwrap(),
            },
        ];
        (params, vocab, examples)
    }

    fn total_loss(params: &ModelParams, vocab: &Vocabulary, examples: &[ClozeExample]) -> f64 {
        examples
            .iter()
            .map(|e| {
                let logits = model_forward(params, e).unwrap();
                cross_entropy_loss(&logits, vocab.entity_slot(e.answer).unwrap()).unwrap()
            })
            .sum()
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for mode in AttentionMode::ALL {
            let (params, vocab, examples) = crate::selftest::model_gradient_instance(mode, 11);
            let mut grads = params.zeros_like();
            let stats = accumulate_document_gradients(&params, &vocab, &examples, 1.0, &mut grads).unwrap();
            assert!((stats.loss_sum - total_loss(&params, &vocab, &examples)).abs() < 1e-12);
            let err = crate::selftest::model_gradient_error(&params, &vocab, &examples).unwrap();
            assert!(err < 1e-4, "mode {mode}: {err}");
        }
    }

    #[test]
    fn spec_sized_instance_gradients() {
        // doc of 4 tokens, k = d = 3: compare only entries the oracle resolves
        for mode in AttentionMode::ALL {
            let (params, vocab, examples) = setup(mode, 11);
            let mut grads = params.zeros_like();
            accumulate_document_gradients(&params, &vocab, &examples, 1.0, &mut grads).unwrap();
            for (idx, g) in grads.tensors().iter().enumerate() {
                let base = params.tensors()[idx].to_vec();
                let num = central_difference(&base, 1e-5, |x| {
                    let mut p = params.clone();
                    p.tensors_mut()[idx].copy_from_slice(x);
                    total_loss(&p, &vocab, &examples)
                });
                for (a, b) in g.iter().zip(&num) {
                    assert!((a - b).abs() < 1e-9 + 1e-4 * a.abs(), "mode {mode} tensor {idx}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_entity_count() {
        let l = cross_entropy_loss(&Vector::filled(20, 0.7), 3).unwrap();
        assert!((l - 20f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(&Vector::zeros(3), 3).is_err());
    }

    #[test]
    fn logits_cover_entities() {
        for mode in AttentionMode::ALL {
            let (params, _, examples) = setup(mode, 1);
            assert_eq!(model_forward(&params, &examples[0]).unwrap().dim(), 4);
        }
    }

    #[test]
    fn no_attention_ignores_the_document() {
        let (params, _, examples) = setup(AttentionMode::None, 2);
        let mut shuffled = examples[0].clone();
        shuffled.doc_tokens.reverse();
        shuffled.doc_tokens.push(0);
        assert_eq!(
            model_forward(&params, &examples[0]).unwrap(),
            model_forward(&params, &shuffled).unwrap()
        );
    }

    #[test]
    fn open_gate_matches_linear() {
        let (mut linear, _, examples) = setup(AttentionMode::Linear, 3);
        linear.mode = AttentionMode::Linear;
        let mut gated = linear.clone();
        gated.mode = AttentionMode::Gated;
        gated.gate = Some(GateParams::new(Matrix::zeros(3, 3), Vector::filled(3, 30.0)).unwrap());
        let a = model_forward(&linear, &examples[0]).unwrap();
        let b = model_forward(&gated, &examples[0]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mode_and_gate_must_agree() {
        let (mut params, _, examples) = setup(AttentionMode::Gated, 4);
        params.gate = None;
        assert!(model_forward(&params, &examples[0]).is_err());
    }
}
