//! Attention mechanisms over a document's hidden states.
//!
//! * [`softmax`]: `R = Hᵀ softmax(H q)`, `O(nk)` per lookup, keeps all of `H`.
//! * [`linear`]: `R = C q` with `C = HᵀH`, `O(k²)` per lookup, keeps only `C`.
//! * [`gated`]: `C ← αC + βffᵀ` with learned `f`, reversible backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{Matrix, Vector};

pub mod gated;
pub mod linear;
pub mod reversible;
pub mod softmax;

pub use gated::{
    gate_backward, gate_features, gated_linear_backward, gated_linear_sketch, gated_linear_forward, gated_update,
    gated_update_with_floor, general_gated_backward, general_gated_forward, reverse_update,
    reverse_update_with_floor, GateInputGrads, GateParams, GateParamsGrads, GateStep,
    GateStepGrad, GeneralGrads, NoveltyGate, NoveltyGateGrads, SigmoidGate, SketchGate, StepTape,
    TapeStep,
};
pub use linear::{
    build_sketch_batch, build_sketch_stream, linear_attention, linear_attention_backward,
    SketchBuilder,
};
pub use reversible::ReversibleSketch;
pub use softmax::{softmax_attention, softmax_attention_backward, softmax_attention_weights};

/// Lower bound on the decay factor α of a gated update.
pub const DEFAULT_ALPHA_MIN: f64 = 1e-3;

/// The `n x k` matrix of a document's encoder states, row `t` is `h_(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates(Matrix);

impl HiddenStates {
    pub fn new(h: Matrix) -> Result<Self> {
        if h.rows() == 0 || h.cols() == 0 {
            return Err(Error::Contract(format!(
                "hidden states need n >= 1 and k >= 1, got {}x{}",
                h.rows(),
                h.cols()
            )));
        }
        Ok(HiddenStates(h))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn k(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.0.row_iter()
    }
}

/// Fixed-size `k x k` document representation `C = Σ_t f_t f_tᵀ`.
///
/// `steps` counts the updates absorbed so far (the source length `n` for the
/// basic linear sketch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    c: Matrix,
    steps: usize,
}

impl Sketch {
    pub fn zeros(k: usize) -> Self {
        Sketch {
            c: Matrix::zeros(k, k),
            steps: 0,
        }
    }

    /// Wraps a square matrix. Symmetry is not enforced here so that loaded
    /// files round-trip bitwise; the builders always produce symmetric output.
    pub fn from_matrix(c: Matrix, steps: usize) -> Result<Self> {
        ensure_dim("sketch", c.rows(), c.cols())?;
        Ok(Sketch { c, steps })
    }

    pub(crate) fn from_parts(c: Matrix, steps: usize) -> Self {
        debug_assert_eq!(c.rows(), c.cols());
        Sketch { c, steps }
    }

    pub fn k(&self) -> usize {
        self.c.rows()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn into_matrix(self) -> Matrix {
        self.c
    }

    pub fn is_symmetric(&self) -> bool {
        let k = self.k();
        (0..k).all(|i| (i + 1..k).all(|j| self.c.get(i, j).to_bits() == self.c.get(j, i).to_bits()))
    }

    /// `vᵀ C v`
    pub fn quadratic_form(&self, v: &Vector) -> Result<f64> {
        self.c.matvec(v)?.dot(v)
    }
}

/// Gradients of a scalar loss with respect to an attention block's inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    /// One row per timestep, `∂L/∂h_(t)`.
    pub dh: Matrix,
    pub dq: Vector,
    /// Gate parameter gradients, gated variants only.
    pub gate: Option<GateParamsGrads>,
}

pub(crate) fn check_alpha(alpha: f64, alpha_min: f64) -> Result<()> {
    if alpha.is_nan() || alpha < alpha_min {
        Err(Error::AlphaBelowFloor { alpha, alpha_min })
    } else {
        Ok(())
    }
}
