//! Randomized correctness suites shared by the `selftest` command and the
//! test targets: kernel equivalence, finite-difference gradient checks and
//! reverse-chain reconstruction.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_sketch_batch, build_sketch_stream, gated_linear_backward, gated_linear_forward, gated_update,
    linear_attention, linear_attention_backward, GateParams, HiddenStates, ReversibleSketch, Sketch,
    DEFAULT_ALPHA_MIN,
};
use crate::error::Result;
use crate::gradcheck::{central_difference, max_relative_error};
use crate::linalg::{matmul, transpose, Matrix, Vector};
use crate::qa::model::accumulate_document_gradients;
use crate::qa::{cross_entropy_loss, model_forward, AttentionMode, ClozeExample, ModelParams, Vocabulary};
use crate::rnn::{gru_backward, gru_step, GruParams};

/// Finite-difference step used by every gradient suite.
pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    /// Largest error seen; compared against `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<32} {:>4} instances  worst {:.3e}  (tol {:.0e})  {:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed<F: FnOnce() -> Result<f64>>(name: &str, instances: usize, tolerance: f64, run: F) -> Result<SuiteResult> {
    let start = Instant::now();
    let worst = run()?;
    Ok(SuiteResult {
        name: name.to_string(),
        instances,
        worst,
        tolerance,
        elapsed: start.elapsed(),
    })
}

fn random_states(n: usize, k: usize, rng: &mut ChaCha8Rng) -> HiddenStates {
    HiddenStates::new(Matrix::random_uniform(n, k, 1.0, rng)).expect("n, k >= 1")
}

fn unflatten(flat: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, flat.to_vec()).expect("shape")
}

/// Kernel equivalence on random `(H, q)` with `n ≤ 64`, `k ≤ 32`.
///
/// `worst` is the larger of the lookup's norm-wise relative error against
/// `Hᵀ(Hq)` scaled to the 1e-10 budget and the stream-vs-batch entry gap
/// scaled to the 1e-12 budget, so the suite passes when `worst < 1`.
pub fn kernel_equivalence(instances: usize, seed: u64) -> Result<SuiteResult> {
    timed("kernel equivalence", instances, 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let n = rng.gen_range(1..=64);
            let k = rng.gen_range(1..=32);
            let h = random_states(n, k, &mut rng);
            let q = Vector::random_uniform(k, 1.0, &mut rng);

            let batch = build_sketch_batch(&h);
            let r = linear_attention(&batch, &q)?;
            let oracle = h.matrix().matvec_t(&h.matrix().matvec(&q)?)?;
            let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            let lookup_err = r.iter().zip(oracle.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;

            let stream = build_sketch_stream(k, h.rows())?;
            let gram = matmul(&transpose(h.matrix()), h.matrix())?;
            let stream_err = stream.matrix().max_abs_diff(batch.matrix())?;
            let gram_err = batch.matrix().max_abs_diff(&gram)? / gram.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));

            worst = worst.max(lookup_err / 1e-10).max(stream_err / 1e-12).max(gram_err / 1e-10);
        }
        Ok(worst)
    })
}

/// `L = gᵀ C q` with `C = HᵀH`; checks `∂L/∂H` and `∂L/∂q`.
pub fn linear_backward_gradients(instances: usize, seed: u64) -> Result<SuiteResult> {
    timed("linear_attention_backward", instances, GRADIENT_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (n, k) = (rng.gen_range(1..=8), rng.gen_range(1..=6));
            let h = random_states(n, k, &mut rng);
            let q = Vector::random_uniform(k, 1.0, &mut rng);
            let g = Vector::random_uniform(k, 1.0, &mut rng);
            let grads = linear_attention_backward(&h, &q, &g)?;
            let loss = |h: &HiddenStates, q: &Vector| linear_attention(&build_sketch_batch(h), q).unwrap().dot(&g).unwrap();

            let num_h = central_difference(h.matrix().as_slice(), FD_STEP, |x| {
                loss(&HiddenStates::new(unflatten(x, n, k)).unwrap(), &q)
            });
            let num_q = central_difference(q.as_slice(), FD_STEP, |x| loss(&h, &Vector::from(x)));
            worst = worst
                .max(max_relative_error(grads.dh.as_slice(), &num_h))
                .max(max_relative_error(grads.dq.as_slice(), &num_q));
        }
        Ok(worst)
    })
}

/// `L = gᵀ R` through the sigmoid-gated sketch; checks `H`, `q`, `W`, `b`.
pub fn gated_backward_gradients(instances: usize, seed: u64) -> Result<SuiteResult> {
    timed("gated_linear_backward", instances, GRADIENT_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (n, k) = (rng.gen_range(1..=8), rng.gen_range(1..=6));
            let h = random_states(n, k, &mut rng);
            let q = Vector::random_uniform(k, 1.0, &mut rng);
            let g = Vector::random_uniform(k, 1.0, &mut rng);
            let gp = GateParams::new(
                Matrix::random_uniform(k, k, 1.0, &mut rng),
                Vector::random_uniform(k, 1.0, &mut rng),
            )?;
            let (_, tape) = gated_linear_forward(&h, &gp, &q)?;
            let grads = gated_linear_backward(&tape, &q, &g, &gp)?;
            let gate_grads = grads.gate.expect("gated backward returns gate gradients");
            let loss = |h: &HiddenStates, gp: &GateParams, q: &Vector| gated_linear_forward(h, gp, q).unwrap().0.dot(&g).unwrap();

            let num_h = central_difference(h.matrix().as_slice(), FD_STEP, |x| {
                loss(&HiddenStates::new(unflatten(x, n, k)).unwrap(), &gp, &q)
            });
            let num_q = central_difference(q.as_slice(), FD_STEP, |x| loss(&h, &gp, &Vector::from(x)));
            let num_w = central_difference(gp.w.as_slice(), FD_STEP, |x| {
                loss(&h, &GateParams::new(unflatten(x, k, k), gp.b.clone()).unwrap(), &q)
            });
            let num_b = central_difference(gp.b.as_slice(), FD_STEP, |x| {
                loss(&h, &GateParams::new(gp.w.clone(), Vector::from(x)).unwrap(), &q)
            });
            worst = worst
                .max(max_relative_error(grads.dh.as_slice(), &num_h))
                .max(max_relative_error(grads.dq.as_slice(), &num_q))
                .max(max_relative_error(gate_grads.dw.as_slice(), &num_w))
                .max(max_relative_error(gate_grads.db.as_slice(), &num_b));
        }
        Ok(worst)
    })
}

fn gru_loss(xs: &Matrix, h0: &Vector, p: &GruParams, weights: &Matrix) -> f64 {
    let mut h = h0.clone();
    let mut loss = 0.0;
    for t in 0..xs.rows() {
        h = gru_step(&Vector::from(xs.row(t)), &h, p).unwrap().0;
        loss += h.iter().zip(weights.row(t)).map(|(a, b)| a * b).sum::<f64>();
    }
    loss
}

/// `L = Σ_t ⟨w_t, h_t⟩` over a short GRU chain; checks inputs, `h0` and all weights.
pub fn gru_backward_gradients(instances: usize, seed: u64) -> Result<SuiteResult> {
    timed("gru_backward", instances, GRADIENT_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (d, k, steps) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=5));
            let p = GruParams::random(d, k, &mut rng);
            let xs = Matrix::random_uniform(steps, d, 1.0, &mut rng);
            let h0 = Vector::random_uniform(k, 0.5, &mut rng);
            let weights = Matrix::random_uniform(steps, k, 1.0, &mut rng);

            let mut caches = Vec::with_capacity(steps);
            let mut h = h0.clone();
            for t in 0..steps {
                let (next, cache) = gru_step(&Vector::from(xs.row(t)), &h, &p)?;
                caches.push(cache);
                h = next;
            }
            let grads = gru_backward(&caches, &weights, &p)?;

            let num_x = central_difference(xs.as_slice(), FD_STEP, |x| {
                gru_loss(&unflatten(x, steps, d), &h0, &p, &weights)
            });
            let num_h0 = central_difference(h0.as_slice(), FD_STEP, |x| gru_loss(&xs, &Vector::from(x), &p, &weights));
            worst = worst
                .max(max_relative_error(grads.dx.as_slice(), &num_x))
                .max(max_relative_error(grads.dh0.as_slice(), &num_h0));
            for (i, analytic) in grads.params.tensors().iter().enumerate() {
                let num = central_difference(p.tensors()[i], FD_STEP, |x| {
                    let mut q = p.clone();
                    q.tensors_mut()[i].copy_from_slice(x);
                    gru_loss(&xs, &h0, &q, &weights)
                });
                worst = worst.max(max_relative_error(analytic, &num));
            }
        }
        Ok(worst)
    })
}

/// A tiny cloze instance for end-to-end gradient checks: `k = d = 3`, four
/// entities, a six-token document and two four-token queries.
///
/// Parameters are drawn at twice the default initialization scale. At the
/// default scale some gradient entries fall near 1e-8, where a central
/// difference of an O(1) loss at step 1e-5 carries about 1e-11 of rounding
/// noise, which is more than the tolerance allows.
pub fn model_gradient_instance(mode: AttentionMode, seed: u64) -> (ModelParams, Vocabulary, Vec<ClozeExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::new(["a", "b", "c"], ["x", "y", "z", "u"]).expect("static vocabulary");
    let mut params = ModelParams::random(mode, vocab.len(), vocab.entity_count(), 3, 3, &mut rng);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 2.0);
    }
    let doc: Vec<usize> = (0..6).map(|_| rng.gen_range(1..vocab.len())).collect();
    let examples = (0..2)
        .map(|_| {
            let mut query: Vec<usize> = (0..3).map(|_| rng.gen_range(1..vocab.len())).collect();
            query.push(vocab.placeholder());
            ClozeExample {
                doc_id: 0,
                doc_tokens: doc.clone(),
                query_tokens: query,
                answer: vocab.entities()[rng.gen_range(0..vocab.entity_count())],
            }
        })
        .collect();
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

/// Worst relative error of the summed query loss gradient for one instance.
pub fn model_gradient_error(params: &ModelParams, vocab: &Vocabulary, examples: &[ClozeExample]) -> Result<f64> {
    let mut grads = params.zeros_like();
    accumulate_document_gradients(params, vocab, examples, 1.0, &mut grads)?;
    let analytic = grads.tensors().concat();
    let base = params.tensors().concat();
    let num = central_difference(&base, FD_STEP, |x| {
        let mut p = params.clone();
        let mut offset = 0;
        for t in p.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&x[offset..offset + len]);
            offset += len;
        }
        total_loss(&p, vocab, examples)
    });
    Ok(max_relative_error(&analytic, &num))
}

/// End-to-end loss gradient for one attention mode.
pub fn model_gradients(mode: AttentionMode, instances: usize, seed: u64) -> Result<SuiteResult> {
    timed(&format!("end-to-end loss ({mode})"), instances, GRADIENT_TOLERANCE, || {
        let mut worst: f64 = 0.0;
        for i in 0..instances as u64 {
            let (params, vocab, examples) = model_gradient_instance(mode, seed.wrapping_mul(1_000_003).wrapping_add(i));
            worst = worst.max(model_gradient_error(&params, &vocab, &examples)?);
        }
        Ok(worst)
    })
}

/// Runs a `steps`-long gated chain with `α ∈ [0.5, 1]`, `β ∈ [0, 1]` and
/// `‖f‖ ≤ 1`, storing every plain-precision state, then undoes the chain
/// with the reverse update and compares each reconstructed `C_(t)`
/// (down to `C_(0) = 0`) with the stored one.
pub fn reversibility(steps: usize, k: usize, seed: u64) -> Result<SuiteResult> {
    timed("reverse chain reconstruction", steps, 1e-8, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = vec![Sketch::zeros(k)];
        let mut exact = ReversibleSketch::zeros(k);
        let mut tape = Vec::with_capacity(steps);
        for _ in 0..steps {
            let alpha = rng.gen_range(0.5..=1.0);
            let beta = rng.gen_range(0.0..=1.0);
            let dir = Vector::random_uniform(k, 1.0, &mut rng);
            let radius: f64 = rng.gen_range(0.0..=1.0);
            let f = dir.scale(radius / dir.norm().max(f64::MIN_POSITIVE));
            let next = gated_update(states.last().expect("non-empty"), alpha, beta, &f)?;
            exact.gated_update(alpha, beta, &f, DEFAULT_ALPHA_MIN)?;
            states.push(next);
            tape.push((alpha, beta, f));
        }
        let mut worst = exact.to_sketch(steps).matrix().max_abs_diff(states[steps].matrix())?;
        for (t, (alpha, beta, f)) in tape.iter().enumerate().rev() {
            exact.reverse_update(*alpha, *beta, f, DEFAULT_ALPHA_MIN)?;
            worst = worst.max(exact.to_sketch(t).matrix().max_abs_diff(states[t].matrix())?);
        }
        Ok(worst)
    })
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = vec![
        kernel_equivalence(200, seed)?,
        linear_backward_gradients(50, seed)?,
        gated_backward_gradients(50, seed)?,
        gru_backward_gradients(50, seed)?,
    ];
    for mode in AttentionMode::ALL {
        out.push(model_gradients(mode, 50, seed)?);
    }
    out.push(reversibility(256, 16, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in [
            kernel_equivalence(20, 3).unwrap(),
            linear_backward_gradients(5, 3).unwrap(),
            gated_backward_gradients(5, 3).unwrap(),
            gru_backward_gradients(5, 3).unwrap(),
            model_gradients(AttentionMode::Gated, 3, 3).unwrap(),
            reversibility(64, 4, 3).unwrap(),
        ] {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn display_marks_failures() {
        let r = SuiteResult {
            name: "x".into(),
            instances: 1,
            worst: 2.0,
            tolerance: 1.0,
            elapsed: Duration::ZERO,
        };
        assert!(r.to_string().starts_with("FAIL"));
    }
}
