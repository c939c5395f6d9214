use crate::error::{ensure_dim, Result};
use crate::linalg::{axpy_slice, dot, Matrix, Vector};

use super::{AttentionGrads, HiddenStates, Sketch};

/// Streaming builder for `C = Σ_t h_t h_tᵀ` with `O(k²)` working memory.
///
/// Only the upper triangle is accumulated; [`SketchBuilder::finish`]
/// mirrors it, so the result is exactly symmetric.
#[derive(Clone, Debug)]
pub struct SketchBuilder {
    k: usize,
    c: Matrix,
    steps: usize,
}

impl SketchBuilder {
    pub fn new(k: usize) -> Self {
        SketchBuilder {
            k,
            c: Matrix::zeros(k, k),
            steps: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `C_(t+1) = C_(t) + h hᵀ`
    pub fn push(&mut self, h: &[f64]) -> Result<()> {
        ensure_dim("build_sketch_stream", self.k, h.len())?;
        for i in 0..self.k {
            let hi = h[i];
            let row = &mut self.c.row_mut(i)[i..];
            for (c, &hj) in row.iter_mut().zip(&h[i..]) {
                *c += hi * hj;
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Sketch {
        for i in 0..self.k {
            for j in 0..i {
                let v = self.c.get(j, i);
                self.c.set(i, j, v);
            }
        }
        Sketch::from_parts(self.c, self.steps)
    }
}

/// `C = HᵀH`.
pub fn build_sketch_batch(h: &HiddenStates) -> Sketch {
    let mut b = SketchBuilder::new(h.k());
    for row in h.rows() {
        b.push(row).expect("rows of a hidden-state matrix share its width");
    }
    b.finish()
}

/// Builds the sketch from a stream of hidden states without materializing `H`.
/// An empty stream yields the zero sketch `C_(0)`.
pub fn build_sketch_stream<I, V>(k: usize, hs: I) -> Result<Sketch>
where
    I: IntoIterator<Item = V>,
    V: AsRef<[f64]>,
{
    let mut b = SketchBuilder::new(k);
    for h in hs {
        b.push(h.as_ref())?;
    }
    Ok(b.finish())
}

/// `R = C q`, independent of the document length.
pub fn linear_attention(c: &Sketch, q: &Vector) -> Result<Vector> {
    c.matrix().matvec(q)
}

/// Backward pass of `R = (Σ_t h_t h_tᵀ) q`.
///
/// Each `c_(t) = h_t h_tᵀ q` receives the full upstream gradient, so
/// `∂L/∂h_t = q (h_tᵀ g) + g (h_tᵀ q)` and `∂L/∂q = C g = Σ_t h_t (h_tᵀ g)`.
/// Works one row at a time with no `k x k` intermediate.
pub fn linear_attention_backward(
    h: &HiddenStates,
    q: &Vector,
    grad_r: &Vector,
) -> Result<AttentionGrads> {
    ensure_dim("linear_attention_backward", h.k(), q.dim())?;
    ensure_dim("linear_attention_backward", h.k(), grad_r.dim())?;
    let (q, g) = (q.as_slice(), grad_r.as_slice());
    let mut dh = Matrix::zeros(h.n(), h.k());
    let mut dq = Vector::zeros(h.k());
    for (t, row) in h.rows().enumerate() {
        let hg = dot(row, g);
        let hq = dot(row, q);
        let out = dh.row_mut(t);
        axpy_slice(hg, q, out);
        axpy_slice(hq, g, out);
        axpy_slice(hg, row, dq.as_mut_slice());
    }
    Ok(AttentionGrads { dh, dq, gate: None })
}
