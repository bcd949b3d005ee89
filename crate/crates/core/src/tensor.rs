//! Dense row-major multi-dimensional arrays and the raw kernels behind the
//! differentiable operations.
//!
//! Shapes are lists of positive dimension sizes; the element count always
//! equals the product of the shape. Scalars are represented as shape `[1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Clone> Array<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("element count {} does not match shape product", data.len()),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "shape must be non-empty and positive");
        Array { shape, data: vec![value; numel] }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        assert!(!data.is_empty());
        Array { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Number of rows when viewed as a matrix of shape `[rows, numel/rows]`.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row width when the first axis is interpreted as rows.
    pub fn row_width(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[E] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Array::new(shape, self.data.clone())
    }

    /// Strides (in elements) for each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }
}

impl<T: Scalar> Array<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Array::filled(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Array { shape: vec![1], data: vec![v] }
    }

    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        for x in &mut self.data {
            *x = v;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Array<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: T) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    /// Squared Euclidean norm of all elements, accumulated at f64.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }
}

/// General matrix product with optional transposes.
///
/// `c = op(a) · op(b)` where `op` transposes when the corresponding flag is
/// set. Loop orders keep the innermost access contiguous for the common
/// layouts used by the forward and backward passes.
pub fn gemm<T: Scalar>(a: &Array<T>, ta: bool, b: &Array<T>, tb: bool) -> Result<Array<T>> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, ka) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (kb, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = ka;
    let mut c = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    match (ta, tb) {
        (false, false) => {
            // c[i,j] += a[i,p] * b[p,j]
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            // c[i,j] = dot(a_row_i, b_row_j)
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    crow[j] = acc;
                }
            }
        }
        (true, false) => {
            // c[i,j] += a[p,i] * b[p,j]; a stored as (k, m)
            for p in 0..k {
                let arow = &ad[p * m..(p + 1) * m];
                let brow = &bd[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            // rare path; c[i,j] = sum_p a[p,i] * b[j,p]
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += ad[p * m + i] * bd[j * k + p];
                    }
                    c[i * n + j] = acc;
                }
            }
        }
    }
    Array::new(vec![m, n], c)
}

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    gemm(a, false, b, false)
}

/// Iterate lanes along `axis`: yields the base offset and stride of each lane.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> Vec<(usize, usize)> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let axis_stride = strides[axis];
    let axis_len = shape[axis];
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel / axis_len);
    // Enumerate all positions with axis index 0.
    let mut idx = vec![0usize; shape.len()];
    loop {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push((offset, axis_stride));
        // advance multi-index, skipping `axis`
        let mut d = shape.len();
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            if d == axis {
                continue;
            }
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Numerically stable softmax along `axis` with an optional boolean mask of
/// identical shape. Masked positions become exactly zero; a fully masked
/// lane is an error.
pub fn softmax<T: Scalar>(
    x: &Array<T>,
    axis: usize,
    mask: Option<&Array<bool>>,
) -> Result<Array<T>> {
    if axis >= x.ndim() {
        return Err(Error::Contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "softmax mask",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    let n = x.shape()[axis];
    let mut out = Array::zeros(x.shape().to_vec());
    for (lane_no, (base, stride)) in lanes(x.shape(), axis).into_iter().enumerate() {
        let unmasked = |i: usize| mask.is_none_or(|m| m.data()[base + i * stride]);
        let mut max = T::neg_infinity();
        for i in 0..n {
            if unmasked(i) {
                let v = x.data[base + i * stride];
                if v > max {
                    max = v;
                }
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::DegenerateSoftmax { axis, lane: lane_no });
        }
        let mut denom = T::zero();
        for i in 0..n {
            if unmasked(i) {
                let e = (x.data[base + i * stride] - max).exp();
                out.data[base + i * stride] = e;
                denom += e;
            }
        }
        for i in 0..n {
            if unmasked(i) {
                out.data[base + i * stride] /= denom;
            }
        }
    }
    Ok(out)
}

/// GELU with the tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Array::new(vec![2, 3], vec![0.0f64; 5]).is_err());
        assert!(Array::new(vec![2, 0], vec![0.0f64; 0]).is_err());
        assert!(Array::<f64>::new(vec![], vec![]).is_err());
        assert!(Array::new(vec![2, 2], vec![1.0f64; 4]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_row_selection() {
        let sel = Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let v = Array::new(vec![2, 1], vec![7.5, -3.0]).unwrap();
        let out = matmul(&sel, &v).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[7.5]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Array::new(vec![2, 3], vec![0.0f64; 6]).unwrap();
        let b = Array::new(vec![2, 2], vec![0.0f64; 4]).unwrap();
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn gemm_transposes_agree_with_explicit() {
        let a = Array::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Array::new(vec![2, 3], vec![1.0f64, 0.5, -1.0, 2.0, 1.0, 0.0]).unwrap();
        // a * b^T
        let c = gemm(&a, false, &b, true).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert!((c.data()[0] - (1.0 + 1.0 - 3.0)).abs() < 1e-12);
        // a^T * a
        let g = gemm(&a, true, &a, false).unwrap();
        assert_eq!(g.shape(), &[3, 3]);
        assert!((g.data()[0] - (1.0 + 16.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_single() {
        let x = Array::from_vec(vec![0.0f64, 0.0]);
        let y = softmax(&x, 0, None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let one = Array::from_vec(vec![42.0f64]);
        assert_eq!(softmax(&one, 0, None).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_reference_values() {
        let x = Array::from_vec(vec![1.0f64, 2.0, 3.0]);
        let y = softmax(&x, 0, None).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_masked_positions_are_exact_zero() {
        let x = Array::new(vec![2, 3], vec![5.0f64, 1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = Array::new(vec![2, 3], vec![false, true, true, true, true, true]).unwrap();
        let y = softmax(&x, 1, Some(&mask)).unwrap();
        assert_eq!(y.data()[0], 0.0);
        let s: f64 = y.data()[..3].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_is_error() {
        let x = Array::from_vec(vec![1.0f64, 2.0]);
        let mask = Array::new(vec![2], vec![false, false]).unwrap();
        assert!(matches!(
            softmax(&x, 0, Some(&mask)),
            Err(Error::DegenerateSoftmax { .. })
        ));
    }

    #[test]
    fn softmax_axis_zero_of_matrix() {
        let x = Array::new(vec![2, 2], vec![0.0f64, 1.0, 0.0, 3.0]).unwrap();
        let y = softmax(&x, 0, None).unwrap();
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-12);
        assert_eq!(y.data()[0], 0.5);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
