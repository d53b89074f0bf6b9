//! Dense row-major `f64` tensors and the handful of kernels the model needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {bad} in tensor")));
        }
        Ok(Self { shape, data })
    }

    /// Construction without the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Row width when viewed as a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }
}

/// Raw GEMM: `C = op(A) · op(B) (+ C when accumulate)`. Operands are matrices
/// given by (rows, cols) after the optional transpose.
pub(crate) fn gemm(
    a: &Tensor,
    a_t: bool,
    b: &Tensor,
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if b_t { (1, bc as isize) } else { (bc as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides and extents were derived from the operand shapes above
    // and the output slice length was checked against m × n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, n) = (a.shape[0], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(a, false, b, false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a` (m×k) and `b` (n×k): the layout used by projection weights.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by transpose of {:?}",
            a.shape, b.shape
        )));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = vec![0.0; m * n];
    gemm(a, false, b, true, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Numerically stable softmax of one row.
pub fn softmax_row(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Dimension("softmax of an empty row".into()));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn annihilating_product() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_mat = || {
            let v: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::matrix(3, 3, v).unwrap()
        };
        let (a, b) = (rand_mat(), rand_mat());
        let fast = matmul(&a, &b).unwrap();
        for (x, y) in fast.data().iter().zip(naive(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = b.transpose();
        let via_t = matmul_t(&a, &bt).unwrap();
        for (x, y) in via_t.data().iter().zip(fast.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax_row(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (got, v) in softmax_row(&x).unwrap().iter().zip(x) {
            assert!((got - v.exp() / z).abs() < 1e-15);
        }
        assert!(softmax_row(&[]).is_err());
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu(0.0), 0.0);
        assert!(((gelu(10.0) - 10.0) / 10.0).abs() < 1e-6);
        let x = 1.0f64;
        let direct = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu(1.0) - direct).abs() < 1e-15);
        for &x in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_probability_vector(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let s = softmax_row(&v).unwrap();
            let sum: f64 = s.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(s.iter().all(|p| *p >= 0.0));
        }
    }
}
