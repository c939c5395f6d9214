use crate::error::{ensure_dim, Result};
use crate::linalg::{axpy_slice, dot, softmax_in_place, Matrix, Vector};

use super::{AttentionGrads, HiddenStates};

/// Attention weights `softmax(H q)`.
pub fn softmax_attention_weights(h: &HiddenStates, q: &Vector) -> Result<Vector> {
    ensure_dim("softmax_attention", h.k(), q.dim())?;
    let mut scores: Vec<f64> = h.rows().map(|row| dot(row, q.as_slice())).collect();
    softmax_in_place(&mut scores);
    Ok(Vector::new(scores))
}

/// `R = Hᵀ softmax(H q)`
pub fn softmax_attention(h: &HiddenStates, q: &Vector) -> Result<Vector> {
    let p = softmax_attention_weights(h, q)?;
    h.matrix().matvec_t(&p)
}

/// Backward pass of [`softmax_attention`] for upstream gradient `grad_r = ∂L/∂R`.
pub fn softmax_attention_backward(
    h: &HiddenStates,
    q: &Vector,
    grad_r: &Vector,
) -> Result<AttentionGrads> {
    ensure_dim("softmax_attention_backward", h.k(), grad_r.dim())?;
    let p = softmax_attention_weights(h, q)?;
    let dp: Vec<f64> = h.rows().map(|row| dot(row, grad_r.as_slice())).collect();
    let mean = dot(p.as_slice(), &dp);

    let mut dh = Matrix::zeros(h.n(), h.k());
    let mut dq = Vector::zeros(h.k());
    for (t, row) in h.rows().enumerate() {
        let ds = p[t] * (dp[t] - mean);
        let out = dh.row_mut(t);
        axpy_slice(p[t], grad_r.as_slice(), out);
        axpy_slice(ds, q.as_slice(), out);
        axpy_slice(ds, row, dq.as_mut_slice());
    }
    Ok(AttentionGrads { dh, dq, gate: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_row_returns_that_row() {
        let h = HiddenStates::from_rows(&[[0.3, -1.5, 2.0]]).unwrap();
        let r = softmax_attention(&h, &Vector::from(vec![4.0, 1.0, -2.0])).unwrap();
        assert_eq!(r.as_slice(), h.row(0));
    }

    #[test]
    fn identical_rows_return_the_row() {
        let row = [0.25, -0.75, 0.5, 1.25];
        let h = HiddenStates::from_rows(&[row; 7]).unwrap();
        let r = softmax_attention(&h, &Vector::from(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        for (a, b) in r.iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_basis_rows() {
        // scores [1, 0] -> weights [e/(e+1), 1/(e+1)] -> R = weights
        let h = HiddenStates::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let r = softmax_attention(&h, &Vector::from(vec![1.0, 0.0])).unwrap();
        let e = std::f64::consts::E;
        assert!((r[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((r[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let h = HiddenStates::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(softmax_attention(&h, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (n, k) = (5, 3);
            let h = Matrix::random_uniform(n, k, 1.0, &mut rng);
            let q = Vector::random_uniform(k, 1.0, &mut rng);
            let g = Vector::random_uniform(k, 1.0, &mut rng);
            let hs = HiddenStates::new(h.clone()).unwrap();
            let grads = softmax_attention_backward(&hs, &q, &g).unwrap();

            let loss = |hm: &[f64], qv: &[f64]| {
                let hs = HiddenStates::new(Matrix::from_vec(n, k, hm.to_vec()).unwrap()).unwrap();
                softmax_attention(&hs, &Vector::from(qv)).unwrap().dot(&g).unwrap()
            };
            let num_h = central_difference(h.as_slice(), 1e-5, |x| loss(x, q.as_slice()));
            let num_q = central_difference(q.as_slice(), 1e-5, |x| loss(h.as_slice(), x));
            assert!(max_relative_error(grads.dh.as_slice(), &num_h) < 1e-6);
            assert!(max_relative_error(grads.dq.as_slice(), &num_q) < 1e-6);
        }
    }
}
