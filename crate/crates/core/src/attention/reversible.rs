//! Extended-precision sketch accumulator for long reverse chains.
//!
//! Undoing `C ← αC + βffᵀ` divides by α, so every reverse step multiplies
//! the accumulated rounding error by `1/α`. Over a few hundred steps with
//! α around 0.75 that factor exceeds 1e30, far beyond what an `f64` sketch
//! can absorb. Each entry here is an unevaluated sum of four
//! non-overlapping `f64` components (about 200 significant bits), built
//! with error-free transformations, so the recomputed intermediate sketches
//! stay accurate to well below `f64` resolution after rounding.

use crate::error::{ensure_dim, Result};
use crate::linalg::{Matrix, Vector};

use super::{check_alpha, Sketch};

const PARTS: usize = 4;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Shewchuk's compression of an increasing non-overlapping expansion, in
/// place. Afterwards each component is within an ulp of the sum of itself
/// and everything below it, so the top components carry full precision.
/// Returns the new length.
fn compress(e: &mut [f64]) -> usize {
    let m = e.len();
    if m == 0 {
        return 0;
    }
    let mut g = [0.0f64; 24];
    let mut bottom = m - 1;
    let mut q = e[m - 1];
    for i in (0..m - 1).rev() {
        let (s, lo) = fast_two_sum(q, e[i]);
        if lo != 0.0 {
            g[bottom] = s;
            bottom -= 1;
            q = lo;
        } else {
            q = s;
        }
    }
    g[bottom] = q;
    let mut top = 0;
    for &gi in &g[bottom + 1..m] {
        let (s, lo) = fast_two_sum(gi, q);
        if lo != 0.0 {
            e[top] = lo;
            top += 1;
        }
        q = s;
    }
    e[top] = q;
    top + 1
}

/// A real number stored as up to four non-overlapping `f64` components,
/// ordered by increasing magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Expansion([f64; PARTS]);

impl Expansion {
    pub const ZERO: Expansion = Expansion([0.0; PARTS]);

    pub fn from_f64(x: f64) -> Self {
        Expansion([0.0, 0.0, 0.0, x])
    }

    /// Exactly sums `terms`, then keeps the four largest components.
    /// The dropped tail is below `2^-52` of the smallest kept component.
    fn from_terms(terms: &[f64]) -> Self {
        // grow-expansion with zero elimination; `buf` is increasing and
        // non-overlapping after every insertion
        let mut buf = [0.0f64; 24];
        let mut len = 0usize;
        for &t in terms {
            if t == 0.0 {
                continue;
            }
            let mut q = t;
            let mut out = 0usize;
            for i in 0..len {
                let (s, e) = two_sum(q, buf[i]);
                q = s;
                if e != 0.0 {
                    buf[out] = e;
                    out += 1;
                }
            }
            if q != 0.0 {
                buf[out] = q;
                out += 1;
            }
            len = out;
        }
        let len = compress(&mut buf[..len]);
        let mut parts = [0.0; PARTS];
        let keep = len.min(PARTS);
        parts[PARTS - keep..].copy_from_slice(&buf[len - keep..len]);
        Expansion(parts)
    }

    fn top(&self) -> f64 {
        self.0[PARTS - 1]
    }

    /// Nearest-ish `f64` of the represented value (smallest parts first).
    pub fn to_f64(&self) -> f64 {
        self.0.iter().sum()
    }

    /// `a * self + extra` where `extra` is an exact sum of f64 terms.
    fn scale_add(&self, a: f64, extra: &[f64]) -> Self {
        let mut terms = [0.0; 2 * PARTS + 4];
        let mut n = 0;
        for &c in &self.0 {
            let (p, e) = two_prod(a, c);
            terms[n] = e;
            terms[n + 1] = p;
            n += 2;
        }
        for &x in extra {
            terms[n] = x;
            n += 1;
        }
        Self::from_terms(&terms[..n])
    }

    /// `(self + extra) / a`
    fn add_div(&self, extra: &[f64], a: f64) -> Self {
        let mut terms = [0.0; PARTS + 4];
        terms[..PARTS].copy_from_slice(&self.0);
        terms[PARTS..PARTS + extra.len()].copy_from_slice(extra);
        let mut rem = Self::from_terms(&terms[..PARTS + extra.len()]);
        // long division: peel off one f64 quotient digit per round
        let mut quotient = [0.0; PARTS + 1];
        for q in quotient.iter_mut() {
            let digit = rem.top() / a;
            if digit == 0.0 {
                break;
            }
            *q = digit;
            let (p, e) = two_prod(digit, a);
            let mut t = [0.0; PARTS + 2];
            t[..PARTS].copy_from_slice(&rem.0);
            t[PARTS] = -e;
            t[PARTS + 1] = -p;
            rem = Self::from_terms(&t);
        }
        quotient.reverse();
        Self::from_terms(&quotient)
    }
}

/// Exact expansion of `β u v` as four f64 terms.
fn triple_product(beta: f64, u: f64, v: f64) -> [f64; 4] {
    let (p, e) = two_prod(u, v);
    let (p1, e1) = two_prod(beta, p);
    let (p2, e2) = two_prod(beta, e);
    [e2, p2, e1, p1]
}

/// Symmetric `k x k` sketch in extended precision. Only the upper triangle
/// is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ReversibleSketch {
    k: usize,
    upper: Vec<Expansion>,
}

impl ReversibleSketch {
    pub fn zeros(k: usize) -> Self {
        ReversibleSketch {
            k,
            upper: vec![Expansion::ZERO; k * (k + 1) / 2],
        }
    }

    /// Lifts an `f64` sketch; the upper triangle is taken as authoritative.
    pub fn from_sketch(c: &Sketch) -> Self {
        let k = c.k();
        let mut upper = Vec::with_capacity(k * (k + 1) / 2);
        for i in 0..k {
            for j in i..k {
                upper.push(Expansion::from_f64(c.matrix().get(i, j)));
            }
        }
        ReversibleSketch { k, upper }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `C ← α C + β f fᵀ`
    pub fn gated_update(&mut self, alpha: f64, beta: f64, f: &Vector, alpha_min: f64) -> Result<()> {
        check_alpha(alpha, alpha_min)?;
        ensure_dim("gated_update", self.k, f.dim())?;
        let mut idx = 0;
        for i in 0..self.k {
            for j in i..self.k {
                let extra = triple_product(beta, f[i], f[j]);
                self.upper[idx] = self.upper[idx].scale_add(alpha, &extra);
                idx += 1;
            }
        }
        Ok(())
    }

    /// `C ← (C − β f fᵀ) / α`, the inverse of [`Self::gated_update`].
    pub fn reverse_update(&mut self, alpha: f64, beta: f64, f: &Vector, alpha_min: f64) -> Result<()> {
        check_alpha(alpha, alpha_min)?;
        ensure_dim("reverse_update", self.k, f.dim())?;
        let mut idx = 0;
        for i in 0..self.k {
            for j in i..self.k {
                let extra = triple_product(-beta, f[i], f[j]);
                self.upper[idx] = self.upper[idx].add_div(&extra, alpha);
                idx += 1;
            }
        }
        Ok(())
    }

    /// Rounds to an exactly symmetric `f64` sketch.
    pub fn to_sketch(&self, steps: usize) -> Sketch {
        let k = self.k;
        let mut m = Matrix::zeros(k, k);
        let mut idx = 0;
        for i in 0..k {
            for j in i..k {
                let v = self.upper[idx].to_f64();
                m.set(i, j, v);
                m.set(j, i, v);
                idx += 1;
            }
        }
        Sketch::from_parts(m, steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expansion_keeps_bits_a_double_would_lose() {
        let x = Expansion::from_terms(&[1.0, 1e-30, -1.0]);
        assert_eq!(x.to_f64(), 1e-30);
        let y = Expansion::from_f64(1.0).scale_add(1.0, &[1e-40]);
        let back = y.add_div(&[-1.0], 1.0);
        assert_eq!(back.to_f64(), 1e-40);
    }

    #[test]
    fn division_round_trips_through_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(0.5..1.0);
            let x = Expansion::from_terms(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1e-20..1e-20)]);
            let y = x.scale_add(a, &[]).add_div(&[], a);
            let diff = Expansion::from_terms(&[x.0[0], x.0[1], x.0[2], x.0[3], -y.0[0], -y.0[1], -y.0[2], -y.0[3]]);
            assert!(diff.to_f64().abs() < 1e-55, "{:?}", diff);
        }
    }

    #[test]
    fn long_contracting_chain_reverses_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 6;
        let mut c = ReversibleSketch::zeros(k);
        let mut tape = Vec::new();
        for _ in 0..400 {
            let alpha = rng.gen_range(0.5..=1.0);
            let beta = rng.gen_range(0.0..=1.0);
            let f = Vector::random_uniform(k, 0.4, &mut rng);
            c.gated_update(alpha, beta, &f, 1e-3).unwrap();
            tape.push((alpha, beta, f));
        }
        for (alpha, beta, f) in tape.iter().rev() {
            c.reverse_update(*alpha, *beta, f, 1e-3).unwrap();
        }
        let max = c
            .to_sketch(0)
            .matrix()
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-8, "residual {max}");
    }
}
