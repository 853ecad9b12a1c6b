//! Dense row-major `f64` tensors and the raw matrix routines the tape
//! records and replays.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Error raised by tensor construction and arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Shapes do not compose for the requested operation; carries both shapes.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize>, op: &'static str },
    /// Element count does not match the product of the dimensions.
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { left, right, op } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "expected {expected} elements, got {got}")
            }
        }
    }
}

/// Dense multi-dimensional array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch { expected, got: values.len() });
        }
        Ok(Tensor { shape, values })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), values: vec![v] }
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            values.extend_from_slice(row);
        }
        Tensor { shape: vec![r, c], values }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1, "item() on non-scalar");
        self.values[0]
    }

    /// Number of rows when viewed as a matrix (rank 2).
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix (rank 2).
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Immutable view of matrix row `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Human-readable shape, e.g. `2x3`.
    pub fn shape_string(&self) -> String {
        if self.shape.is_empty() {
            return String::from("scalar");
        }
        let parts: Vec<String> = self.shape.iter().map(|d| format!("{d}")).collect();
        parts.join("x")
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(TensorError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
            op: "matmul",
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.values[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b.values[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.cols() {
        return Err(TensorError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
            op: "matmul_nt",
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.values[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.values[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: [m×k]`, `b: [m×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.rows() != b.rows() {
        return Err(TensorError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
            op: "matmul_tn",
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.values[i * k..(i + 1) * k];
        let brow = &b.values[i * n..(i + 1) * n];
        for l in 0..k {
            let av = arow[l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert_eq!(err, TensorError::LengthMismatch { expected: 4, got: 3 });
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = matmul(&Tensor::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]"), "both shapes should appear: {msg}");
    }

    // Independent triple-loop product used as the oracle for the fused kernels.
    fn naive_product(a: &Tensor, b_t: bool, b: &Tensor) -> Tensor {
        let (m, k) = (a.rows(), a.cols());
        let n = if b_t { b.rows() } else { b.cols() };
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    let bv = if b_t { b.values()[j * k + l] } else { b.values()[l * n + j] };
                    acc += a.values()[i * k + l] * bv;
                }
                out.values_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::substream(7, &[99]);
        let a = crate::rng::gaussian_tensor(&mut rng, vec![5, 4], 1.0);
        let b = crate::rng::gaussian_tensor(&mut rng, vec![4, 3], 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = naive_product(&a, false, &b);
        for (g, w) in got.values().iter().zip(want.values()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_nt_tn_match_oracle() {
        let mut rng = crate::rng::substream(8, &[100]);
        let a = crate::rng::gaussian_tensor(&mut rng, vec![3, 6], 1.0);
        let b = crate::rng::gaussian_tensor(&mut rng, vec![5, 6], 1.0);
        let got = matmul_nt(&a, &b).unwrap();
        let want = naive_product(&a, true, &b);
        for (g, w) in got.values().iter().zip(want.values()) {
            assert!((g - w).abs() < 1e-12);
        }

        let c = crate::rng::gaussian_tensor(&mut rng, vec![6, 3], 1.0);
        let d = crate::rng::gaussian_tensor(&mut rng, vec![6, 4], 1.0);
        let got = matmul_tn(&c, &d).unwrap();
        // aᵀ·b via explicit transpose then the oracle.
        let mut ct = Tensor::zeros(vec![3, 6]);
        for i in 0..6 {
            for j in 0..3 {
                ct.values_mut()[j * 6 + i] = c.values()[i * 3 + j];
            }
        }
        let want = naive_product(&ct, false, &d);
        for (g, w) in got.values().iter().zip(want.values()) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
