//! Gated sketch updates `C_(t+1) = α_t C_(t) + β_t f_t f_tᵀ`.
//!
//! The forward pass records `(h, f, α, β)` per step. Backward passes that
//! need the intermediate sketches rebuild them from the final one by
//! undoing the updates in reverse order instead of storing them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{axpy_slice, dot, gemv_acc, gemv_t_acc, sigmoid_scalar, Matrix, Vector};

use super::linear::SketchBuilder;
use super::{check_alpha, AttentionGrads, HiddenStates, ReversibleSketch, Sketch, DEFAULT_ALPHA_MIN};

/// Weights of the sigmoid gate `f = σ(W h + b) ⊙ h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w: Matrix,
    pub b: Vector,
}

impl GateParams {
    pub fn new(w: Matrix, b: Vector) -> Result<Self> {
        ensure_dim("gate params", w.rows(), w.cols())?;
        ensure_dim("gate params", w.rows(), b.dim())?;
        Ok(GateParams { w, b })
    }

    pub fn zeros(k: usize) -> Self {
        GateParams {
            w: Matrix::zeros(k, k),
            b: Vector::zeros(k),
        }
    }

    /// `W` uniform in `±1/√k`, zero bias.
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        GateParams {
            w: Matrix::random_uniform(k, k, 1.0 / (k as f64).sqrt(), rng),
            b: Vector::zeros(k),
        }
    }

    pub fn k(&self) -> usize {
        self.b.dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParamsGrads {
    pub dw: Matrix,
    pub db: Vector,
}

impl GateParamsGrads {
    pub fn zeros(k: usize) -> Self {
        GateParamsGrads {
            dw: Matrix::zeros(k, k),
            db: Vector::zeros(k),
        }
    }
}

fn gate_activation(h: &[f64], gp: &GateParams) -> Vec<f64> {
    let mut z = gp.b.as_slice().to_vec();
    gemv_acc(&mut z, &gp.w, h);
    z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    z
}

/// `f = σ(W h + b) ⊙ h`
pub fn gate_features(h: &Vector, gp: &GateParams) -> Result<Vector> {
    ensure_dim("gate_features", gp.k(), h.dim())?;
    let s = gate_activation(h.as_slice(), gp);
    Ok(Vector::new(s.iter().zip(h.iter()).map(|(s, h)| s * h).collect()))
}

/// Chains `df` through `f = σ(Wh+b) ⊙ h`; accumulates into `grads`, returns `dh`.
fn gate_features_backward(h: &[f64], gp: &GateParams, df: &[f64], grads: &mut GateParamsGrads) -> Vec<f64> {
    let s = gate_activation(h, gp);
    let mut dh: Vec<f64> = df.iter().zip(&s).map(|(d, s)| d * s).collect();
    let dz: Vec<f64> = (0..h.len())
        .map(|i| df[i] * h[i] * s[i] * (1.0 - s[i]))
        .collect();
    gemv_t_acc(&mut dh, &gp.w, &dz);
    grads.dw.add_outer(1.0, &dz, h).expect("gate grads match gate params");
    axpy_slice(1.0, &dz, grads.db.as_mut_slice());
    dh
}

/// `α C + β f fᵀ`, rejecting `α < alpha_min`.
pub fn gated_update_with_floor(c: &Sketch, alpha: f64, beta: f64, f: &Vector, alpha_min: f64) -> Result<Sketch> {
    check_alpha(alpha, alpha_min)?;
    ensure_dim("gated_update", c.k(), f.dim())?;
    let k = c.k();
    let src = c.matrix();
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = alpha * src.get(i, j) + beta * (f[i] * f[j]);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(Sketch::from_parts(out, c.steps() + 1))
}

/// [`gated_update_with_floor`] with [`DEFAULT_ALPHA_MIN`].
pub fn gated_update(c: &Sketch, alpha: f64, beta: f64, f: &Vector) -> Result<Sketch> {
    gated_update_with_floor(c, alpha, beta, f, DEFAULT_ALPHA_MIN)
}

/// `(C_next − β f fᵀ) / α`, the algebraic inverse of [`gated_update`].
///
/// In `f64` each application multiplies existing rounding error by `1/α`;
/// chains of more than a few dozen contracting steps should go through
/// [`ReversibleSketch`] instead.
pub fn reverse_update_with_floor(c_next: &Sketch, alpha: f64, beta: f64, f: &Vector, alpha_min: f64) -> Result<Sketch> {
    check_alpha(alpha, alpha_min)?;
    ensure_dim("reverse_update", c_next.k(), f.dim())?;
    let k = c_next.k();
    let src = c_next.matrix();
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = (src.get(i, j) - beta * (f[i] * f[j])) / alpha;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(Sketch::from_parts(out, c_next.steps().saturating_sub(1)))
}

pub fn reverse_update(c_next: &Sketch, alpha: f64, beta: f64, f: &Vector) -> Result<Sketch> {
    reverse_update_with_floor(c_next, alpha, beta, f, DEFAULT_ALPHA_MIN)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapeStep {
    pub h: Vector,
    pub f: Vector,
    pub alpha: f64,
    pub beta: f64,
}

/// Per-step record of a gated forward pass plus its final sketch.
#[derive(Clone, Debug)]
pub struct StepTape {
    pub steps: Vec<TapeStep>,
    pub sketch: Sketch,
    pub alpha_min: f64,
    /// Extended-precision final state, present for the general gated path.
    pub exact: Option<ReversibleSketch>,
}

impl StepTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn k(&self) -> usize {
        self.sketch.k()
    }
}

/// Builds the gated-linear sketch `C = Σ_t f_t f_tᵀ` with
/// `f_t = σ(W h_t + b) ⊙ h_t`, recording the tape.
pub fn gated_linear_sketch(h: &HiddenStates, gp: &GateParams) -> Result<StepTape> {
    ensure_dim("gated_linear_forward", h.k(), gp.k())?;
    let mut builder = SketchBuilder::new(h.k());
    let mut steps = Vec::with_capacity(h.n());
    for row in h.rows() {
        let hv = Vector::from(row);
        let f = gate_features(&hv, gp)?;
        builder.push(f.as_slice())?;
        steps.push(TapeStep {
            h: hv,
            f,
            alpha: 1.0,
            beta: 1.0,
        });
    }
    Ok(StepTape {
        steps,
        sketch: builder.finish(),
        alpha_min: DEFAULT_ALPHA_MIN,
        exact: None,
    })
}

/// Gated linear attention: `α = β = 1`, `f_t = σ(W h_t + b) ⊙ h_t`, `R = C q`.
pub fn gated_linear_forward(h: &HiddenStates, gp: &GateParams, q: &Vector) -> Result<(Vector, StepTape)> {
    ensure_dim("gated_linear_forward", h.k(), q.dim())?;
    let tape = gated_linear_sketch(h, gp)?;
    let r = tape.sketch.matrix().matvec(q)?;
    Ok((r, tape))
}

/// Chains per-step feature gradients `df` (row `t` = `∂L/∂f_t`) through the
/// gate, returning `∂L/∂h` rows and the gate parameter gradients.
pub fn gate_backward(tape: &StepTape, df: &Matrix, gp: &GateParams) -> Result<(Matrix, GateParamsGrads)> {
    let k = tape.k();
    ensure_dim("gate_backward", k, gp.k())?;
    ensure_dim("gate_backward", tape.len(), df.rows())?;
    ensure_dim("gate_backward", k, df.cols())?;
    let mut dh = Matrix::zeros(tape.len(), k);
    let mut grads = GateParamsGrads::zeros(k);
    for (t, step) in tape.steps.iter().enumerate() {
        ensure_dim("gate_backward", k, step.h.dim())?;
        let d = gate_features_backward(step.h.as_slice(), gp, df.row(t), &mut grads);
        dh.row_mut(t).copy_from_slice(&d);
    }
    Ok((dh, grads))
}

/// Backward pass of [`gated_linear_forward`].
///
/// With `α = β = 1` the sketch gradient `g qᵀ` is the same at every step,
/// so no intermediate sketch is needed: `df_t = q (f_tᵀ g) + g (f_tᵀ q)`,
/// chained through the gate.
pub fn gated_linear_backward(tape: &StepTape, q: &Vector, grad_r: &Vector, gp: &GateParams) -> Result<AttentionGrads> {
    let k = tape.k();
    ensure_dim("gated_linear_backward", k, q.dim())?;
    ensure_dim("gated_linear_backward", k, grad_r.dim())?;
    if tape.steps.iter().any(|s| s.alpha != 1.0 || s.beta != 1.0) {
        return Err(Error::Contract(
            "gated_linear_backward needs a tape with alpha = beta = 1".into(),
        ));
    }
    let (qs, g) = (q.as_slice(), grad_r.as_slice());
    let mut df = Matrix::zeros(tape.len(), k);
    for (t, step) in tape.steps.iter().enumerate() {
        ensure_dim("gated_linear_backward", k, step.f.dim())?;
        let f = step.f.as_slice();
        let out = df.row_mut(t);
        axpy_slice(dot(f, g), qs, out);
        axpy_slice(dot(f, qs), g, out);
    }
    let (dh, grads) = gate_backward(tape, &df, gp)?;
    let dq = tape.sketch.matrix().matvec(grad_r)?;
    Ok(AttentionGrads {
        dh,
        dq,
        gate: Some(grads),
    })
}

/// Output of one gate evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStep {
    pub alpha: f64,
    pub beta: f64,
    pub f: Vector,
}

/// Upstream gradient on a [`GateStep`].
#[derive(Clone, Debug, PartialEq)]
pub struct GateStepGrad {
    pub alpha: f64,
    pub beta: f64,
    pub f: Vector,
}

/// Gradients a gate hands back for its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GateInputGrads {
    pub h: Vector,
    pub direction: Vector,
    pub probe: Vector,
}

/// A gate in the general update family.
///
/// Each step the gate proposes a direction `u = direction(h)`, is shown the
/// probe `p = C_(t) u` (how much of `u` the sketch already holds), and
/// returns `(α, β, f)`.
pub trait SketchGate {
    type Grads;

    fn k(&self) -> usize;
    fn zero_grads(&self) -> Self::Grads;
    fn direction(&self, h: &Vector) -> Vector;
    fn step(&self, h: &Vector, direction: &Vector, probe: &Vector) -> GateStep;
    /// Returns `∂L/∂h` through the direction map, accumulating parameter grads.
    fn direction_backward(&self, h: &Vector, d_direction: &Vector, grads: &mut Self::Grads) -> Vector;
    fn step_backward(
        &self,
        h: &Vector,
        direction: &Vector,
        probe: &Vector,
        step: &GateStep,
        upstream: &GateStepGrad,
        grads: &mut Self::Grads,
    ) -> GateInputGrads;
}

/// The gated-linear instance as a [`SketchGate`]: `α = β = 1`, probe ignored.
#[derive(Clone, Copy, Debug)]
pub struct SigmoidGate<'a>(pub &'a GateParams);

impl SketchGate for SigmoidGate<'_> {
    type Grads = GateParamsGrads;

    fn k(&self) -> usize {
        self.0.k()
    }

    fn zero_grads(&self) -> GateParamsGrads {
        GateParamsGrads::zeros(self.k())
    }

    fn direction(&self, h: &Vector) -> Vector {
        gate_features(h, self.0).expect("gate width checked by caller")
    }

    fn step(&self, _h: &Vector, direction: &Vector, _probe: &Vector) -> GateStep {
        GateStep {
            alpha: 1.0,
            beta: 1.0,
            f: direction.clone(),
        }
    }

    fn direction_backward(&self, h: &Vector, d_direction: &Vector, grads: &mut GateParamsGrads) -> Vector {
        Vector::new(gate_features_backward(h.as_slice(), self.0, d_direction.as_slice(), grads))
    }

    fn step_backward(
        &self,
        _h: &Vector,
        _direction: &Vector,
        _probe: &Vector,
        _step: &GateStep,
        upstream: &GateStepGrad,
        _grads: &mut GateParamsGrads,
    ) -> GateInputGrads {
        let k = self.k();
        GateInputGrads {
            h: Vector::zeros(k),
            direction: upstream.f.clone(),
            probe: Vector::zeros(k),
        }
    }
}

/// A gate that uses the probe: it writes `u = σ(Wh+b) ⊙ h` with strength
/// `β = σ(c_β − uᵀ C u)`, so directions the sketch already holds are added
/// less, and decays the sketch by `α = α_min + (1 − α_min) σ(vᵀh + c_α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoveltyGate {
    pub features: GateParams,
    pub decay_w: Vector,
    pub decay_b: f64,
    pub novelty_b: f64,
    pub alpha_min: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoveltyGateGrads {
    pub features: GateParamsGrads,
    pub decay_w: Vector,
    pub decay_b: f64,
    pub novelty_b: f64,
}

impl NoveltyGate {
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        NoveltyGate {
            features: GateParams::random(k, rng),
            decay_w: Vector::random_uniform(k, 1.0 / (k as f64).sqrt(), rng),
            decay_b: rng.gen_range(0.0..2.0),
            novelty_b: rng.gen_range(-1.0..1.0),
            alpha_min: DEFAULT_ALPHA_MIN,
        }
    }

    fn decay_activation(&self, h: &Vector) -> f64 {
        sigmoid_scalar(dot(self.decay_w.as_slice(), h.as_slice()) + self.decay_b)
    }
}

impl SketchGate for NoveltyGate {
    type Grads = NoveltyGateGrads;

    fn k(&self) -> usize {
        self.features.k()
    }

    fn zero_grads(&self) -> NoveltyGateGrads {
        let k = self.k();
        NoveltyGateGrads {
            features: GateParamsGrads::zeros(k),
            decay_w: Vector::zeros(k),
            decay_b: 0.0,
            novelty_b: 0.0,
        }
    }

    fn direction(&self, h: &Vector) -> Vector {
        gate_features(h, &self.features).expect("gate width checked by caller")
    }

    fn step(&self, h: &Vector, direction: &Vector, probe: &Vector) -> GateStep {
        let alpha = self.alpha_min + (1.0 - self.alpha_min) * self.decay_activation(h);
        let beta = sigmoid_scalar(self.novelty_b - dot(direction.as_slice(), probe.as_slice()));
        GateStep {
            alpha,
            beta,
            f: direction.clone(),
        }
    }

    fn direction_backward(&self, h: &Vector, d_direction: &Vector, grads: &mut NoveltyGateGrads) -> Vector {
        Vector::new(gate_features_backward(
            h.as_slice(),
            &self.features,
            d_direction.as_slice(),
            &mut grads.features,
        ))
    }

    fn step_backward(
        &self,
        h: &Vector,
        direction: &Vector,
        probe: &Vector,
        step: &GateStep,
        upstream: &GateStepGrad,
        grads: &mut NoveltyGateGrads,
    ) -> GateInputGrads {
        let sa = self.decay_activation(h);
        let dza = upstream.alpha * (1.0 - self.alpha_min) * sa * (1.0 - sa);
        let dh = self.decay_w.scale(dza);
        axpy_slice(dza, h.as_slice(), grads.decay_w.as_mut_slice());
        grads.decay_b += dza;

        let dzb = upstream.beta * step.beta * (1.0 - step.beta);
        grads.novelty_b += dzb;
        let mut d_direction = upstream.f.clone();
        axpy_slice(-dzb, probe.as_slice(), d_direction.as_mut_slice());
        GateInputGrads {
            h: dh,
            direction: d_direction,
            probe: direction.scale(-dzb),
        }
    }
}

/// Gradients of the general gated path.
#[derive(Clone, Debug)]
pub struct GeneralGrads<G> {
    pub dh: Matrix,
    pub dq: Vector,
    pub gate: G,
}

/// General gated attention: `C_(t+1) = α_t C_(t) + β_t f_t f_tᵀ` with
/// `(α_t, β_t, f_t)` produced by `gate`, then `R = C q`.
pub fn general_gated_forward<G: SketchGate>(
    h: &HiddenStates,
    gate: &G,
    q: &Vector,
    alpha_min: f64,
) -> Result<(Vector, StepTape)> {
    let k = h.k();
    ensure_dim("general_gated_forward", k, gate.k())?;
    ensure_dim("general_gated_forward", k, q.dim())?;
    let mut c = ReversibleSketch::zeros(k);
    let mut current = Sketch::zeros(k);
    let mut steps = Vec::with_capacity(h.n());
    for (t, row) in h.rows().enumerate() {
        let hv = Vector::from(row);
        let u = gate.direction(&hv);
        let p = current.matrix().matvec(&u)?;
        let GateStep { alpha, beta, f } = gate.step(&hv, &u, &p);
        c.gated_update(alpha, beta, &f, alpha_min)?;
        current = c.to_sketch(t + 1);
        steps.push(TapeStep { h: hv, f, alpha, beta });
    }
    let r = current.matrix().matvec(q)?;
    Ok((
        r,
        StepTape {
            steps,
            sketch: current,
            alpha_min,
            exact: Some(c),
        },
    ))
}

/// Backward pass of [`general_gated_forward`].
///
/// Walks the tape backwards, recovering each `C_(t)` from `C_(t+1)` with
/// the reverse update, so only the current sketch and its gradient
/// (`O(k²)`) are live at any time.
pub fn general_gated_backward<G: SketchGate>(
    tape: &StepTape,
    gate: &G,
    q: &Vector,
    grad_r: &Vector,
) -> Result<GeneralGrads<G::Grads>> {
    let k = tape.k();
    ensure_dim("general_gated_backward", k, gate.k())?;
    ensure_dim("general_gated_backward", k, q.dim())?;
    ensure_dim("general_gated_backward", k, grad_r.dim())?;
    let mut c = tape.exact.clone().ok_or_else(|| {
        Error::Contract("general_gated_backward needs a tape from general_gated_forward".into())
    })?;

    let mut grads = gate.zero_grads();
    let mut dh = Matrix::zeros(tape.len(), k);
    let dq = tape.sketch.matrix().matvec(grad_r)?;

    // ∂L/∂C for R = C q is g qᵀ; it is not symmetric in general
    let mut d_c = Matrix::zeros(k, k);
    d_c.add_outer(1.0, grad_r.as_slice(), q.as_slice())?;

    for (t, step) in tape.steps.iter().enumerate().rev() {
        c.reverse_update(step.alpha, step.beta, &step.f, tape.alpha_min)?;
        let c_t = c.to_sketch(t);
        let c_t = c_t.matrix();
        let f = step.f.as_slice();

        let d_alpha = d_c.frobenius_dot(c_t)?;
        let d_c_f = d_c.matvec(&step.f)?;
        let d_beta = dot(f, d_c_f.as_slice());
        let mut d_f = d_c.matvec_t(&step.f)?;
        axpy_slice(1.0, d_c_f.as_slice(), d_f.as_mut_slice());
        let d_f = d_f.scale(step.beta);

        d_c.as_mut_slice().iter_mut().for_each(|v| *v *= step.alpha);

        let u = gate.direction(&step.h);
        let p = c_t.matvec(&u)?;
        let gate_step = GateStep {
            alpha: step.alpha,
            beta: step.beta,
            f: step.f.clone(),
        };
        let upstream = GateStepGrad {
            alpha: d_alpha,
            beta: d_beta,
            f: d_f,
        };
        let inputs = gate.step_backward(&step.h, &u, &p, &gate_step, &upstream, &mut grads);

        // p = C_(t) u
        d_c.add_outer(1.0, inputs.probe.as_slice(), u.as_slice())?;
        let mut d_u = inputs.direction;
        d_u.add_scaled(1.0, &c_t.matvec_t(&inputs.probe)?)?;

        let mut d_h = gate.direction_backward(&step.h, &d_u, &mut grads);
        d_h.add_scaled(1.0, &inputs.h)?;
        dh.row_mut(t).copy_from_slice(d_h.as_slice());
    }
    Ok(GeneralGrads { dh, dq, gate: grads })
}
