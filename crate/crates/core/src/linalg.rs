//! Small dense linear algebra over `f64`.
//!
//! Every reduction runs left to right in a single thread, so results are
//! bitwise reproducible across runs and platforms with IEEE-754 doubles.

use std::ops::{Index, IndexMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Dense column vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    /// Standard basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub fn random_uniform<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        Vector((0..dim).map(|_| rng.gen_range(-scale..=scale)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        ensure_dim("dot", self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|x| s * x).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        ensure_dim("add", self.dim(), other.dim())?;
        Ok(Vector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Vector) -> Result<()> {
        ensure_dim("add_scaled", self.dim(), other.dim())?;
        axpy_slice(s, &other.0, &mut self.0);
        Ok(())
    }

    /// Concatenates `self` and `other` into one vector.
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut data = Vec::with_capacity(self.dim() + other.dim());
        data.extend_from_slice(&self.0);
        data.extend_from_slice(&other.0);
        Vector(data)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Vector(data.to_vec())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Dense row-major matrix.
///
/// Zero-row matrices are allowed so that an empty token sequence embeds to
/// a `0 x d` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Contract(format!(
                "matrix data has {} entries, shape {rows}x{cols} needs {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice gives `0 x 0`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_dim("from_rows", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, and a 0-column matrix has no data anyway
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// `M v`
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        ensure_dim("matvec", self.cols, v.dim())?;
        let mut out = vec![0.0; self.rows];
        gemv_acc(&mut out, self, v.as_slice());
        Ok(Vector(out))
    }

    /// `Mᵀ v` without materializing the transpose.
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        ensure_dim("matvec_t", self.rows, v.dim())?;
        let mut out = vec![0.0; self.cols];
        gemv_t_acc(&mut out, self, v.as_slice());
        Ok(Vector(out))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure_dim("matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for p in 0..self.cols {
                    acc += self.data[i * self.cols + p] * other.data[p * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| s * x).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        ensure_same_shape("add_scaled", self, other)?;
        axpy_slice(s, &other.data, &mut self.data);
        Ok(())
    }

    /// `self += s * u vᵀ`
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) -> Result<()> {
        ensure_dim("add_outer", self.rows, u.len())?;
        ensure_dim("add_outer", self.cols, v.len())?;
        for (i, &ui) in u.iter().enumerate() {
            let su = s * ui;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += su * vj;
            }
        }
        Ok(())
    }

    /// Frobenius inner product `Σ_ij A_ij B_ij`.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        ensure_same_shape("frobenius_dot", self, other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        ensure_same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn ensure_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    ensure_dim(op, a.rows, b.rows)?;
    ensure_dim(op, a.cols, b.cols)
}

pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    m.matvec(v)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn transpose(m: &Matrix) -> Matrix {
    m.transpose()
}

/// `u vᵀ`. When `u` and `v` are the same vector the result is exactly
/// symmetric, since `u[i]*u[j]` and `u[j]*u[i]` round identically.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut m = Matrix::zeros(u.dim(), v.dim());
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            m.data[i * v.dim() + j] = ui * vj;
        }
    }
    m
}

/// `s X + Y`
pub fn axpy(s: f64, x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let mut out = y.clone();
    out.add_scaled(s, x)?;
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &Vector) -> Result<Vector> {
    if x.dim() == 0 {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    let mut out = x.0.clone();
    softmax_in_place(&mut out);
    Ok(Vector(out))
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(x: &Vector) -> Vector {
    Vector(x.0.iter().map(|&v| sigmoid_scalar(v)).collect())
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise_mul(u: &Vector, v: &Vector) -> Result<Vector> {
    ensure_dim("elementwise_mul", u.dim(), v.dim())?;
    Ok(Vector(u.0.iter().zip(&v.0).map(|(a, b)| a * b).collect()))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy_slice(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// `out += M v`, shapes unchecked beyond debug asserts.
#[inline]
pub(crate) fn gemv_acc(out: &mut [f64], m: &Matrix, v: &[f64]) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    for (o, row) in out.iter_mut().zip(m.row_iter()) {
        *o += dot(row, v);
    }
}

/// `out += Mᵀ v`, shapes unchecked beyond debug asserts.
#[inline]
pub(crate) fn gemv_t_acc(out: &mut [f64], m: &Matrix, v: &[f64]) {
    debug_assert_eq!(m.rows, v.len());
    debug_assert_eq!(m.cols, out.len());
    for (&vi, row) in v.iter().zip(m.row_iter()) {
        axpy_slice(vi, row, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from(x)
    }

    #[test]
    fn matvec_examples() {
        assert_eq!(
            Matrix::identity(3).matvec(&v(&[1., 2., 3.])).unwrap(),
            v(&[1., 2., 3.])
        );
        assert_eq!(
            Matrix::zeros(2, 2).matvec(&v(&[5., 7.])).unwrap(),
            v(&[0., 0.])
        );
        let m = Matrix::from_rows(&[[1., 2.], [3., 4.]]).unwrap();
        assert_eq!(m.matvec(&v(&[1., 1.])).unwrap(), v(&[3., 7.]));
        assert!(matches!(
            m.matvec(&v(&[1.])),
            Err(Error::Dimension { op: "matvec", .. })
        ));
    }

    #[test]
    fn outer_examples() {
        let e = outer(&v(&[1., 0.]), &v(&[1., 0.]));
        assert_eq!(e, Matrix::from_rows(&[[1., 0.], [0., 0.]]).unwrap());
        let z = outer(&v(&[0., 0.]), &v(&[3., -2., 1.]));
        assert_eq!(z, Matrix::zeros(2, 3));
        let m = outer(&v(&[1., 2.]), &v(&[3., 4.]));
        assert_eq!(m, Matrix::from_rows(&[[3., 4.], [6., 8.]]).unwrap());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&v(&[-1234.5])).unwrap(), v(&[1.0]));
        assert_eq!(softmax(&v(&[0., 0.])).unwrap(), v(&[0.5, 0.5]));
        // e^{x-3} / Σ, evaluated at 30 significant digits with mpmath
        let expected = [
            0.090030573170380457998,
            0.24472847105479765247,
            0.66524095577482188953,
        ];
        let got = softmax(&v(&[1., 2., 3.])).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }
        assert!(matches!(softmax(&Vector::zeros(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_does_not_overflow() {
        let out = softmax(&v(&[1000., 1000., -1000.])).unwrap();
        assert!(out.is_finite());
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(sigmoid(&v(&[0.])), v(&[0.5]));
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) == 1.0);
        assert_eq!(
            elementwise_mul(&v(&[1., 2.]), &v(&[0., 5.])).unwrap(),
            v(&[0., 10.])
        );
        let m = Matrix::from_rows(&[[1.5, -2.0, 3.25], [0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
        assert_eq!(
            axpy(2.0, &Matrix::identity(2), &Matrix::identity(2)).unwrap(),
            Matrix::identity(2).scale(3.0)
        );
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matvec_is_associative_with_matmul(
            (a, b, x) in (1usize..=64, 1usize..=64, 1usize..=64)
                .prop_flat_map(|(r, m, c)| (
                    mat(r, m),
                    mat(m, c),
                    proptest::collection::vec(-10.0f64..10.0, c),
                ))
        ) {
            let x = Vector::new(x);
            let lhs = a.matmul(&b).unwrap().matvec(&x).unwrap();
            let rhs = a.matvec(&b.matvec(&x).unwrap()).unwrap();
            // per-entry tolerance relative to the magnitude of the summands
            let scale = {
                let abs_a = Matrix::from_vec(a.rows(), a.cols(), a.as_slice().iter().map(|v| v.abs()).collect()).unwrap();
                let abs_b = Matrix::from_vec(b.rows(), b.cols(), b.as_slice().iter().map(|v| v.abs()).collect()).unwrap();
                let abs_x = Vector::new(x.iter().map(|v| v.abs()).collect());
                abs_a.matvec(&abs_b.matvec(&abs_x).unwrap()).unwrap()
            };
            for i in 0..lhs.dim() {
                prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-10 * scale[i].max(1e-300));
            }
        }

        #[test]
        fn transpose_is_an_involution(m in (1usize..=16, 1usize..=16).prop_flat_map(|(r, c)| mat(r, c))) {
            prop_assert_eq!(m.transpose().transpose(), m);
        }

        #[test]
        fn softmax_is_a_distribution(x in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
            let p = softmax(&Vector::new(x)).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&w| w > 0.0 && w <= 1.0));
        }

        #[test]
        fn outer_self_is_symmetric(u in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let u = Vector::new(u);
            let m = outer(&u, &u);
            prop_assert_eq!(m.transpose(), m);
        }
    }
}
