//! Dense row-major tensors for the reference interpreters.
//!
//! Values are held as `f64` and rounded to the element kind by the caller
//! after every op, which gives f32 results without a second code path and
//! lets the finite-difference checks run unrounded.

use rand::Rng;

use super::{ElemKind, Monoid, TensorType};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("data length {got} does not match type {ty} ({want} elements)")]
    Length { ty: String, want: usize, got: usize },
    #[error("{0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub ty: TensorType,
    pub data: Vec<f64>,
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

fn unravel(mut lin: usize, dims: &[usize], out: &mut [usize]) {
    for i in (0..dims.len()).rev() {
        out[i] = lin % dims[i];
        lin /= dims[i];
    }
}

fn round_to(elem: ElemKind, x: f64) -> f64 {
    match elem {
        ElemKind::F32 => x as f32 as f64,
        ElemKind::I32 => {
            if x.is_finite() {
                (x.trunc() as i64) as i32 as f64
            } else {
                0.0
            }
        }
    }
}

impl Tensor {
    pub fn new(ty: TensorType, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != ty.num_elements() {
            return Err(TensorError::Length {
                ty: ty.to_string(),
                want: ty.num_elements(),
                got: data.len(),
            });
        }
        Ok(Self { ty, data })
    }

    pub fn splat(ty: TensorType, v: f64) -> Self {
        let n = ty.num_elements();
        Self {
            ty,
            data: vec![v; n],
        }
    }

    pub fn zeros(ty: TensorType) -> Self {
        Self::splat(ty, 0.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self::splat(TensorType::f32(vec![]), v)
    }

    /// Uniform values in [-1, 1) for f32, integers in [-3, 3] for i32.
    pub fn random(ty: TensorType, rng: &mut impl Rng) -> Self {
        let n = ty.num_elements();
        let data = match ty.elem {
            ElemKind::F32 => (0..n).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect(),
            ElemKind::I32 => (0..n).map(|_| rng.gen_range(-3i32..=3) as f64).collect(),
        };
        Self { ty, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.ty.dims
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let s = strides(self.dims());
        self.data[idx.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    /// Rounds every element to the representable set of its element kind.
    pub fn rounded(mut self) -> Self {
        let e = self.ty.elem;
        for x in &mut self.data {
            *x = round_to(e, *x);
        }
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            ty: self.ty.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.dims() != other.dims() {
            return Err(TensorError::Shape(format!(
                "elementwise operands {} and {} differ",
                self.ty, other.ty
            )));
        }
        Ok(Self {
            ty: self.ty.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self, TensorError> {
        let (a, b) = (self.dims(), rhs.dims());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::Shape(format!(
                "matmul of {} and {}",
                self.ty, rhs.ty
            )));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = self.data[i * k + p];
                let row = &rhs.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &y) in dst.iter_mut().zip(row) {
                    *d += x * y;
                }
            }
        }
        Ok(Self {
            ty: self.ty.with_dims(vec![m, n]),
            data: out,
        })
    }

    /// Result dim `i` is operand dim `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Self {
        let src = self.dims();
        let out_dims: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let s = strides(src);
        let mut idx = vec![0; out_dims.len()];
        let mut data = Vec::with_capacity(self.data.len());
        for lin in 0..self.data.len() {
            unravel(lin, &out_dims, &mut idx);
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * s[p]).sum();
            data.push(self.data[off]);
        }
        Self {
            ty: self.ty.with_dims(out_dims),
            data,
        }
    }

    /// Folds `dims` away, visiting input elements in row-major order.
    pub fn reduce(&self, dims: &[usize], monoid: Monoid) -> Self {
        let src = self.dims();
        let out_dims: Vec<usize> = (0..src.len())
            .filter(|d| !dims.contains(d))
            .map(|d| src[d])
            .collect();
        let os = strides(&out_dims);
        let mut out = vec![monoid.identity(); out_dims.iter().product()];
        let mut idx = vec![0; src.len()];
        for (lin, &x) in self.data.iter().enumerate() {
            unravel(lin, src, &mut idx);
            let mut off = 0;
            let mut j = 0;
            for (d, &i) in idx.iter().enumerate() {
                if !dims.contains(&d) {
                    off += i * os[j];
                    j += 1;
                }
            }
            out[off] = monoid.combine(out[off], x);
        }
        Self {
            ty: self.ty.with_dims(out_dims),
            data: out,
        }
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape(format!(
                "reshape of {} to {:?}",
                self.ty, dims
            )));
        }
        Ok(Self {
            ty: self.ty.with_dims(dims),
            data: self.data.clone(),
        })
    }

    /// Operand dim `i` goes to result dim `map[i]`; the rest of `out_dims` is
    /// replicated.
    pub fn broadcast(&self, map: &[usize], out_dims: Vec<usize>) -> Self {
        let s = strides(self.dims());
        let mut idx = vec![0; out_dims.len()];
        let n: usize = out_dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for lin in 0..n {
            unravel(lin, &out_dims, &mut idx);
            let off: usize = map.iter().zip(&s).map(|(&d, &st)| idx[d] * st).sum();
            data.push(self.data[off]);
        }
        Self {
            ty: self.ty.with_dims(out_dims),
            data,
        }
    }

    /// The `index`-th of `parts` contiguous chunks along `dim`.
    pub fn chunk(&self, dim: usize, parts: usize, index: usize) -> Self {
        let src = self.dims();
        let len = src[dim] / parts;
        let outer: usize = src[..dim].iter().product();
        let inner: usize = src[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src[dim] * inner + index * len * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = src.to_vec();
        dims[dim] = len;
        Self {
            ty: self.ty.with_dims(dims),
            data,
        }
    }

    /// Concatenates equal-shaped parts along `dim` in order.
    pub fn concat(dim: usize, parts: &[Tensor]) -> Self {
        let first = &parts[0];
        let src = first.dims();
        let outer: usize = src[..dim].iter().product();
        let block: usize = src[dim..].iter().product();
        let mut data = Vec::with_capacity(block * outer * parts.len());
        for o in 0..outer {
            for p in parts {
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut dims = src.to_vec();
        dims[dim] *= parts.len();
        Self {
            ty: first.ty.with_dims(dims),
            data,
        }
    }

    /// Normwise relative error `max|a-b| / max|b|` against `reference`.
    /// Falls back to absolute error when the reference is all zeros.
    pub fn rel_err(&self, reference: &Tensor) -> f64 {
        if self.dims() != reference.dims() {
            return f64::INFINITY;
        }
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (&a, &b) in self.data.iter().zip(&reference.data) {
            if a.is_nan() != b.is_nan() {
                return f64::INFINITY;
            }
            diff = diff.max((a - b).abs());
            scale = scale.max(b.abs());
        }
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(TensorType::f32(dims.to_vec()), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 1], &[1., 0., -1.]);
        assert_eq!(a.matmul(&b).unwrap().data, vec![-2., -2.]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn transpose_and_reduce() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let at = a.transpose(&[1, 0]);
        assert_eq!(at.dims(), &[3, 2]);
        assert_eq!(at.data, vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(a.reduce(&[0], Monoid::Sum).data, vec![5., 7., 9.]);
        assert_eq!(a.reduce(&[1], Monoid::Max).data, vec![3., 6.]);
        assert_eq!(a.reduce(&[0, 1], Monoid::Sum).data, vec![21.]);
    }

    #[test]
    fn chunk_concat_inverse() {
        let a = t(&[4, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        for dim in 0..2 {
            let n = a.dims()[dim];
            let parts: Vec<_> = (0..n).map(|i| a.chunk(dim, n, i)).collect();
            assert_eq!(Tensor::concat(dim, &parts), a);
        }
        assert_eq!(a.chunk(0, 2, 1).data, vec![4., 5., 6., 7.]);
        assert_eq!(a.chunk(1, 2, 1).data, vec![1., 3., 5., 7.]);
    }

    #[test]
    fn broadcast_row() {
        let b = t(&[3], &[1., 2., 3.]);
        let r = b.broadcast(&[1], vec![2, 3]);
        assert_eq!(r.data, vec![1., 2., 3., 1., 2., 3.]);
        let c = b.broadcast(&[0], vec![3, 2]);
        assert_eq!(c.data, vec![1., 1., 2., 2., 3., 3.]);
    }

    #[test]
    fn i32_wraps() {
        let x = Tensor::splat(TensorType::new(vec![1], ElemKind::I32), 2147483648.0);
        assert_eq!(x.rounded().data, vec![-2147483648.0]);
    }
}
