//! Token embeddings and single-layer GRU encoders with manual backward passes.
//!
//! Gate equations (Cho et al. formulation):
//!
//! ```text
//! z = σ(W_z x + U_z h' + b_z)
//! r = σ(W_r x + U_r h' + b_r)
//! ĥ = tanh(W_h x + U_h (r ⊙ h') + b_h)
//! h = (1 − z) ⊙ h' + z ⊙ ĥ
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{axpy_slice, gemv_acc, gemv_t_acc, sigmoid_scalar, Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub e: Matrix,
}

impl EmbeddingTable {
    pub fn new(e: Matrix) -> Self {
        EmbeddingTable { e }
    }

    /// Uniform in `±1/√d`.
    pub fn random<R: Rng + ?Sized>(vocab: usize, d: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            e: Matrix::random_uniform(vocab, d, 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.e.rows()
    }

    pub fn dim(&self) -> usize {
        self.e.cols()
    }
}

/// Row `t` of the result is the embedding of `tokens[t]`.
pub fn embed(tokens: &[usize], table: &EmbeddingTable) -> Result<Matrix> {
    let d = table.dim();
    let mut out = Matrix::zeros(tokens.len(), d);
    for (t, &id) in tokens.iter().enumerate() {
        if id >= table.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: table.vocab_size(),
            });
        }
        out.row_mut(t).copy_from_slice(table.e.row(id));
    }
    Ok(out)
}

/// Weights of one GRU layer. Input-to-hidden matrices are `k x d`,
/// hidden-to-hidden `k x k`. The same struct holds gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Vector,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Vector,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Vector,
}

impl GruParams {
    pub fn zeros(d: usize, k: usize) -> Self {
        GruParams {
            w_z: Matrix::zeros(k, d),
            u_z: Matrix::zeros(k, k),
            b_z: Vector::zeros(k),
            w_r: Matrix::zeros(k, d),
            u_r: Matrix::zeros(k, k),
            b_r: Vector::zeros(k),
            w_h: Matrix::zeros(k, d),
            u_h: Matrix::zeros(k, k),
            b_h: Vector::zeros(k),
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn random<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Self {
        let sw = 1.0 / (d as f64).sqrt();
        let su = 1.0 / (k as f64).sqrt();
        GruParams {
            w_z: Matrix::random_uniform(k, d, sw, rng),
            u_z: Matrix::random_uniform(k, k, su, rng),
            b_z: Vector::zeros(k),
            w_r: Matrix::random_uniform(k, d, sw, rng),
            u_r: Matrix::random_uniform(k, k, su, rng),
            b_r: Vector::zeros(k),
            w_h: Matrix::random_uniform(k, d, sw, rng),
            u_h: Matrix::random_uniform(k, k, su, rng),
            b_h: Vector::zeros(k),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_z.dim()
    }

    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            self.w_z.as_slice(),
            self.u_z.as_slice(),
            self.b_z.as_slice(),
            self.w_r.as_slice(),
            self.u_r.as_slice(),
            self.b_r.as_slice(),
            self.w_h.as_slice(),
            self.u_h.as_slice(),
            self.b_h.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_z.as_mut_slice(),
            self.u_z.as_mut_slice(),
            self.b_z.as_mut_slice(),
            self.w_r.as_mut_slice(),
            self.u_r.as_mut_slice(),
            self.b_r.as_mut_slice(),
            self.w_h.as_mut_slice(),
            self.u_h.as_mut_slice(),
            self.b_h.as_mut_slice(),
        ]
    }

    fn check(&self, d: usize, k: usize) -> Result<()> {
        for m in [&self.w_z, &self.w_r, &self.w_h] {
            ensure_dim("gru params", k, m.rows())?;
            ensure_dim("gru params", d, m.cols())?;
        }
        for m in [&self.u_z, &self.u_r, &self.u_h] {
            ensure_dim("gru params", k, m.rows())?;
            ensure_dim("gru params", k, m.cols())?;
        }
        for b in [&self.b_z, &self.b_r, &self.b_h] {
            ensure_dim("gru params", k, b.dim())?;
        }
        Ok(())
    }
}

/// Activations of one GRU step kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_cand: Vec<f64>,
}

fn gate_pre(w: &Matrix, u: &Matrix, b: &Vector, x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut a = b.as_slice().to_vec();
    gemv_acc(&mut a, w, x);
    gemv_acc(&mut a, u, h);
    a
}

fn step_unchecked(x: &[f64], h_prev: &[f64], p: &GruParams) -> (Vec<f64>, GruCache) {
    let mut z = gate_pre(&p.w_z, &p.u_z, &p.b_z, x, h_prev);
    z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    let mut r = gate_pre(&p.w_r, &p.u_r, &p.b_r, x, h_prev);
    r.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    let mut h_cand = gate_pre(&p.w_h, &p.u_h, &p.b_h, x, &rh);
    h_cand.iter_mut().for_each(|v| *v = v.tanh());
    let h = (0..h_prev.len())
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * h_cand[i])
        .collect();
    let cache = GruCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        h_cand,
    };
    (h, cache)
}

pub fn gru_step(x: &Vector, h_prev: &Vector, p: &GruParams) -> Result<(Vector, GruCache)> {
    p.check(x.dim(), h_prev.dim())?;
    let (h, cache) = step_unchecked(x.as_slice(), h_prev.as_slice(), p);
    Ok((Vector::new(h), cache))
}

/// Backward through one step. Accumulates parameter gradients into `grads`
/// and input gradients into `dx`; returns `∂L/∂h_prev`.
fn step_backward(cache: &GruCache, dh: &[f64], p: &GruParams, grads: &mut GruParams, dx: &mut [f64]) -> Vec<f64> {
    let k = dh.len();
    let GruCache {
        x,
        h_prev,
        z,
        r,
        h_cand,
    } = cache;

    let mut dh_prev: Vec<f64> = (0..k).map(|i| dh[i] * (1.0 - z[i])).collect();
    let a_h: Vec<f64> = (0..k)
        .map(|i| dh[i] * z[i] * (1.0 - h_cand[i] * h_cand[i]))
        .collect();
    let a_z: Vec<f64> = (0..k)
        .map(|i| dh[i] * (h_cand[i] - h_prev[i]) * z[i] * (1.0 - z[i]))
        .collect();

    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    grads.w_h.add_outer(1.0, &a_h, x).expect("grad shape");
    grads.u_h.add_outer(1.0, &a_h, &rh).expect("grad shape");
    axpy_slice(1.0, &a_h, grads.b_h.as_mut_slice());
    gemv_t_acc(dx, &p.w_h, &a_h);
    let mut d_rh = vec![0.0; k];
    gemv_t_acc(&mut d_rh, &p.u_h, &a_h);

    let a_r: Vec<f64> = (0..k)
        .map(|i| d_rh[i] * h_prev[i] * r[i] * (1.0 - r[i]))
        .collect();
    for i in 0..k {
        dh_prev[i] += d_rh[i] * r[i];
    }

    grads.w_z.add_outer(1.0, &a_z, x).expect("grad shape");
    grads.u_z.add_outer(1.0, &a_z, h_prev).expect("grad shape");
    axpy_slice(1.0, &a_z, grads.b_z.as_mut_slice());
    gemv_t_acc(dx, &p.w_z, &a_z);
    gemv_t_acc(&mut dh_prev, &p.u_z, &a_z);

    grads.w_r.add_outer(1.0, &a_r, x).expect("grad shape");
    grads.u_r.add_outer(1.0, &a_r, h_prev).expect("grad shape");
    axpy_slice(1.0, &a_r, grads.b_r.as_mut_slice());
    gemv_t_acc(dx, &p.w_r, &a_r);
    gemv_t_acc(&mut dh_prev, &p.u_r, &a_r);

    dh_prev
}

/// Result of [`gru_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct GruGrads {
    /// `∂L/∂x_t`, one row per step.
    pub dx: Matrix,
    pub params: GruParams,
    pub dh0: Vector,
}

/// Backpropagates `d_states` (row `t` = `∂L/∂h_t` from outside the
/// recurrence) through a chain of cached steps.
pub fn gru_backward(caches: &[GruCache], d_states: &Matrix, p: &GruParams) -> Result<GruGrads> {
    let (d, k) = (p.input_dim(), p.hidden_dim());
    ensure_dim("gru_backward", caches.len(), d_states.rows())?;
    ensure_dim("gru_backward", k, d_states.cols())?;
    let mut params = GruParams::zeros(d, k);
    let mut dx = Matrix::zeros(caches.len(), d);
    let mut carry = vec![0.0; k];
    for (t, cache) in caches.iter().enumerate().rev() {
        if cache.x.len() != d || cache.h_prev.len() != k {
            return Err(Error::Contract(format!("GRU cache {t} does not match parameters")));
        }
        let mut dh = d_states.row(t).to_vec();
        axpy_slice(1.0, &carry, &mut dh);
        carry = step_backward(cache, &dh, p, &mut params, dx.row_mut(t));
    }
    Ok(GruGrads {
        dx,
        params,
        dh0: Vector::new(carry),
    })
}

/// Embedding table plus GRU: one encoder network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub embedding: EmbeddingTable,
    pub gru: GruParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `n x k`, row `t` is `h_(t)`; `h_(0) = 0` is not included.
    pub states: Matrix,
    pub caches: Vec<GruCache>,
}

impl EncoderOutput {
    pub fn last(&self) -> Option<Vector> {
        self.states
            .rows()
            .checked_sub(1)
            .map(|t| Vector::from(self.states.row(t)))
    }
}

impl Encoder {
    pub fn random<R: Rng + ?Sized>(vocab: usize, d: usize, k: usize, rng: &mut R) -> Self {
        let embedding = EmbeddingTable::random(vocab, d, rng);
        let gru = GruParams::random(d, k, rng);
        Encoder { embedding, gru }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    /// Zeroed encoder of the same shape, used to accumulate gradients.
    pub fn zero_grads(&self) -> Encoder {
        Encoder {
            embedding: EmbeddingTable::new(Matrix::zeros(self.embedding.vocab_size(), self.embedding.dim())),
            gru: GruParams::zeros(self.gru.input_dim(), self.gru.hidden_dim()),
        }
    }

    /// Runs the GRU over `tokens` from `h_(0) = 0`. An empty document
    /// gives a `0 x k` state matrix.
    pub fn encode_document(&self, tokens: &[usize]) -> Result<EncoderOutput> {
        let x = embed(tokens, &self.embedding)?;
        let k = self.hidden_dim();
        self.gru.check(self.embedding.dim(), k)?;
        let mut states = Matrix::zeros(tokens.len(), k);
        let mut caches = Vec::with_capacity(tokens.len());
        let mut h = vec![0.0; k];
        for t in 0..tokens.len() {
            let (next, cache) = step_unchecked(x.row(t), &h, &self.gru);
            states.row_mut(t).copy_from_slice(&next);
            caches.push(cache);
            h = next;
        }
        Ok(EncoderOutput { states, caches })
    }

    /// Streams hidden states to `sink` without keeping them or any caches.
    pub fn for_each_state<F>(&self, tokens: &[usize], mut sink: F) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<()>,
    {
        let k = self.hidden_dim();
        self.gru.check(self.embedding.dim(), k)?;
        let mut h = vec![0.0; k];
        for &id in tokens {
            if id >= self.vocab_size() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size(),
                });
            }
            let (next, _) = step_unchecked(self.embedding.e.row(id), &h, &self.gru);
            sink(&next)?;
            h = next;
        }
        Ok(())
    }

    /// Last hidden state of a nonempty token sequence.
    pub fn encode_query(&self, tokens: &[usize]) -> Result<(Vector, EncoderOutput)> {
        if tokens.is_empty() {
            return Err(Error::Contract("query must contain at least one token".into()));
        }
        let out = self.encode_document(tokens)?;
        let q = out.last().expect("nonempty");
        Ok((q, out))
    }

    /// Accumulates gradients of the loss into `grads`, given `∂L/∂h_t`
    /// for every state of `output`.
    pub fn backward(
        &self,
        tokens: &[usize],
        output: &EncoderOutput,
        d_states: &Matrix,
        grads: &mut Encoder,
    ) -> Result<()> {
        ensure_dim("encoder backward", tokens.len(), output.caches.len())?;
        let g = gru_backward(&output.caches, d_states, &self.gru)?;
        for (t, &id) in tokens.iter().enumerate() {
            axpy_slice(1.0, g.dx.row(t), grads.embedding.e.row_mut(id));
        }
        for (acc, part) in grads.gru.tensors_mut().into_iter().zip(g.params.tensors()) {
            axpy_slice(1.0, part, acc);
        }
        Ok(())
    }
}
