//! Dense row-major tensors of `f64` and the kernels shared by the tape.
//!
//! [`Tensor`] is a plain value type. Differentiation lives in
//! [`crate::tape`], which records calls to the kernels in this module and
//! replays their adjoints.

mod io;
pub mod sparse;

pub use io::{read_ftt, write_ftt, Dtype};
pub use sparse::SparseMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat index in row-major order.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient has {} values, tensor {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("tensor has shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, n)| i >= n) {
            return Err(Error::shape(
                "get",
                format!("index {:?} out of bounds for {:?}", index, self.shape),
            ));
        }
        let st = strides(&self.shape);
        Ok(self.data[index.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {:?} are not a permutation of rank {}", axes, rank),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let moved: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&moved).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor::new(out_shape, data)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        match (self.shape.as_slice(), rhs.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                gemm(&self.data, &rhs.data, &mut out, m, k, n);
                Tensor::new(vec![m, n], out)
            }
            _ => Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            )),
        }
    }

    /// Batched matrix product over a shared leading axis.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        match (self.shape.as_slice(), rhs.shape.as_slice()) {
            (&[g, m, k], &[g2, k2, n]) if g == g2 && k == k2 => {
                let mut out = vec![0.0; g * m * n];
                for b in 0..g {
                    gemm(
                        &self.data[b * m * k..(b + 1) * m * k],
                        &rhs.data[b * k * n..(b + 1) * k * n],
                        &mut out[b * m * n..(b + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::new(vec![g, m, n], out)
            }
            _ => Err(Error::shape("bmm", format!("{:?} x {:?}", self.shape, rhs.shape))),
        }
    }

    /// Transpose of the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last", format!("rank {}", r)));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(out[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (out[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors given"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {} for rank {}", axis, rank)));
        }
        for p in parts {
            let compatible = p.rank() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", p.shape, first.shape, axis),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_split(&self.shape, axis, "slice")?;
        if start + len > n {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} exceeds extent {}", start, start + len, n),
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_split(&self.shape, axis, "sum_axis")?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &self.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(shape, data)
    }
}

/// Splits a shape into (product before axis, extent of axis, product after axis).
pub(crate) fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {} for shape {:?}", axis, shape)));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// `out += a · b` for row-major matrices described by element strides.
#[allow(clippy::too_many_arguments)]
fn dgemm_acc(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(out.len() >= m * n);
    // SAFETY: the strides address only elements inside `a`, `b` and `out`,
    // whose lengths the callers check against m, k and n.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, out.as_mut_ptr(), n as isize, 1);
    }
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    dgemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    dgemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    dgemm_acc(m, k, n, a, (1, m as isize), b, (n as isize, 1), out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i = Tensor::eye(2);
        assert_eq!(i.matmul(&i).unwrap(), i);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let u = Tensor::zeros(&[3]).softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap().softmax(0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        let s = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().softmax(0).unwrap();
        for (v, e) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.37).sin());
        let s = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|j| s.get(&[o, j, i]).unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::ones(&[1, 2]);
        let b = Tensor::zeros(&[1, 2]);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(Tensor::concat(&[&a], 0).unwrap(), a);
        assert!(Tensor::concat(&[&a, &Tensor::zeros(&[1, 3])], 0).is_err());
    }

    #[test]
    fn permute_round_trip_is_exact() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sqrt() * 1.1);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]).unwrap(), x.get(&[1, 2, 3]).unwrap());
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), x);
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn slice_and_sum_axis() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(x.slice(1, 1, 2).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(x.sum_axis(0).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[3.0, 12.0]);
        assert!(x.slice(1, 2, 2).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert_eq!(Tensor::new(vec![0, 4], vec![]).unwrap().numel(), 0);
    }

    #[test]
    fn gradient_buffer_accumulates() {
        let mut t = Tensor::zeros(&[2]).with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
