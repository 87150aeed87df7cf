//! Dense row-major 64-bit float tensors and the numeric kernels the graph
//! evaluator dispatches to.
//!
//! Shapes follow numpy conventions: a scalar has rank 0 (`shape == []`),
//! images are NHWC, convolution kernels are `[kh, kw, c_in, c_out]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Row of a rank-N tensor as a flat slice over the trailing axes,
    /// e.g. `row(i)` of an `[n, d]` matrix or of an `[n, h, w, c]` batch.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Right-aligned numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
    }
    Ok(out)
}

/// Whether `from` can be reduced to `to` by summing broadcast axes.
pub fn reducible_to(from: &[usize], to: &[usize]) -> bool {
    if to.len() > from.len() {
        return false;
    }
    let offset = from.len() - to.len();
    from.iter()
        .enumerate()
        .all(|(i, &df)| i < offset || to[i - offset] == df || to[i - offset] == 1)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` embedded in broadcast space `out_shape` (0 on stretched axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nat = strides_for(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { nat[i] };
    }
    s
}

pub fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    // Fast paths cover the hot loops in training: same shape, and scalar rhs/lhs.
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.numel() == 1 {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if a.numel() == 1 {
        let x = a.data[0];
        return Ok(b.map(|y| f(x, y)));
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..n {
        data.push(f(a.data[off_a], b.data[off_b]));
        // odometer increment
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

impl Tensor {
    /// Sum over broadcast axes so the result has shape `target`
    /// (inverse of `broadcast_to`). Summation order is row-major, fixed.
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if !reducible_to(&self.shape, target) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reduce {:?} to {:?}",
                self.shape, target
            )));
        }
        let mut out = Tensor::zeros(target);
        let st = broadcast_strides(target, &self.shape);
        let n = self.numel();
        let mut idx = vec![0usize; self.shape.len()];
        let mut off_t = 0usize;
        for i in 0..n {
            out.data[off_t] += self.data[i];
            for ax in (0..self.shape.len()).rev() {
                idx[ax] += 1;
                off_t += st[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
                off_t -= st[ax] * self.shape[ax];
            }
        }
        Ok(out)
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if !reducible_to(target, &self.shape) {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape, target
            )));
        }
        let ss = broadcast_strides(&self.shape, target);
        let n: usize = target.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; target.len()];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(self.data[off]);
            for ax in (0..target.len()).rev() {
                idx[ax] += 1;
                off += ss[ax];
                if idx[ax] < target[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= ss[ax] * target[ax];
            }
        }
        Ok(Tensor {
            shape: target.to_vec(),
            data,
        })
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose expects rank 2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Row-wise maximum of an `[n, k]` matrix, result `[n, 1]`.
    pub fn row_max(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row_max expects rank 2, got {:?}",
                self.shape
            )));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.data[i * k..(i + 1) * k];
            data.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        Ok(Tensor {
            shape: vec![n, 1],
            data,
        })
    }

    /// `out[i] = self[i, labels[i]]` for an `[n, k]` matrix.
    pub fn select_class(&self, labels: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 || self.shape[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "select_class on {:?} with {} labels",
                self.shape,
                labels.len()
            )));
        }
        let k = self.shape[1];
        let mut data = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            data.push(self.data[i * k + y]);
        }
        Ok(Tensor {
            shape: vec![labels.len()],
            data,
        })
    }

    /// Inverse of `select_class`: scatter an `[n]` vector into `[n, k]` zeros.
    pub fn scatter_class(&self, labels: &[usize], classes: usize) -> Result<Tensor> {
        if self.shape.len() != 1 || self.shape[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "scatter_class on {:?} with {} labels",
                self.shape,
                labels.len()
            )));
        }
        let n = labels.len();
        let mut data = vec![0.0; n * classes];
        for (i, &y) in labels.iter().enumerate() {
            data[i * classes + y] = self.data[i];
        }
        Ok(Tensor {
            shape: vec![n, classes],
            data,
        })
    }

    /// Gather coordinates of a 1-D tensor.
    pub fn gather_coords(&self, coords: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "gather_coords expects rank 1, got {:?}",
                self.shape
            )));
        }
        let d = self.shape[0];
        let mut data = Vec::with_capacity(coords.len());
        for &c in coords {
            if c >= d {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {c} out of range for dim {d}"
                )));
            }
            data.push(self.data[c]);
        }
        Ok(Tensor {
            shape: vec![coords.len()],
            data,
        })
    }

    /// Inverse of `gather_coords`: scatter into a 1-D zero tensor of size `dim`.
    pub fn scatter_coords(&self, coords: &[usize], dim: usize) -> Result<Tensor> {
        if self.shape.len() != 1 || self.shape[0] != coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "scatter_coords on {:?} with {} coords",
                self.shape,
                coords.len()
            )));
        }
        let mut data = vec![0.0; dim];
        for (i, &c) in coords.iter().enumerate() {
            data[c] += self.data[i];
        }
        Ok(Tensor {
            shape: vec![dim],
            data,
        })
    }

    /// Valid 2-D convolution (correlation), stride 1.
    /// `self` is `[n, h, w, c_in]`, `kernel` is `[kh, kw, c_in, c_out]`.
    pub fn conv2d_valid(&self, kernel: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 4 || kernel.shape.len() != 4 || self.shape[3] != kernel.shape[2] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d {:?} * {:?}",
                self.shape, kernel.shape
            )));
        }
        let (n, h, w, cin) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (kh, kw, _, cout) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        if kh > h || kw > w {
            return Err(Error::ShapeMismatch(format!(
                "kernel {:?} larger than input {:?}",
                kernel.shape, self.shape
            )));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; n * oh * ow * cout];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let obase = ((b * oh + i) * ow + j) * cout;
                    for p in 0..kh {
                        for q in 0..kw {
                            let xbase = ((b * h + i + p) * w + j + q) * cin;
                            let kbase = (p * kw + q) * cin;
                            for ci in 0..cin {
                                let xv = self.data[xbase + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let krow = &kernel.data
                                    [(kbase + ci) * cout..(kbase + ci + 1) * cout];
                                let orow = &mut out[obase..obase + cout];
                                for (o, &kv) in orow.iter_mut().zip(krow) {
                                    *o += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, oh, ow, cout],
            data: out,
        })
    }

    /// Zero-pad the two spatial axes of an NHWC tensor: `[top, bottom, left, right]`.
    pub fn pad2d(&self, pad: [usize; 4]) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "pad2d expects rank 4, got {:?}",
                self.shape
            )));
        }
        let (n, h, w, c) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (nh, nw) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
        let mut out = vec![0.0; n * nh * nw * c];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let src = ((b * h + i) * w + j) * c;
                    let dst = ((b * nh + i + pad[0]) * nw + j + pad[2]) * c;
                    out[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, nh, nw, c],
            data: out,
        })
    }

    /// Inverse of `pad2d`: drop `[top, bottom, left, right]` from the spatial axes.
    pub fn crop2d(&self, crop: [usize; 4]) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "crop2d expects rank 4, got {:?}",
                self.shape
            )));
        }
        let (n, h, w, c) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if crop[0] + crop[1] >= h || crop[2] + crop[3] >= w {
            return Err(Error::ShapeMismatch(format!(
                "crop {crop:?} exceeds spatial dims of {:?}",
                self.shape
            )));
        }
        let (nh, nw) = (h - crop[0] - crop[1], w - crop[2] - crop[3]);
        let mut out = vec![0.0; n * nh * nw * c];
        for b in 0..n {
            for i in 0..nh {
                for j in 0..nw {
                    let src = ((b * h + i + crop[0]) * w + j + crop[2]) * c;
                    let dst = ((b * nh + i) * nw + j) * c;
                    out[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, nh, nw, c],
            data: out,
        })
    }

    /// Permute the axes of a rank-4 tensor.
    pub fn permute4(&self, axes: [usize; 4]) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "permute4 expects rank 4, got {:?}",
                self.shape
            )));
        }
        let mut seen = [false; 4];
        for &a in &axes {
            if a > 3 || seen[a] {
                return Err(Error::InvalidArgument(format!("bad permutation {axes:?}")));
            }
            seen[a] = true;
        }
        let s = &self.shape;
        let out_shape = vec![s[axes[0]], s[axes[1]], s[axes[2]], s[axes[3]]];
        let in_strides = strides_for(s);
        let mut out = vec![0.0; self.numel()];
        let mut oi = 0usize;
        for a0 in 0..out_shape[0] {
            for a1 in 0..out_shape[1] {
                for a2 in 0..out_shape[2] {
                    for a3 in 0..out_shape[3] {
                        let coords = [a0, a1, a2, a3];
                        let mut src = 0usize;
                        for (k, &ax) in axes.iter().enumerate() {
                            src += coords[k] * in_strides[ax];
                        }
                        out[oi] = self.data[src];
                        oi += 1;
                    }
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Reverse the first two axes of a rank-4 tensor (kernel spatial flip).
    pub fn flip_hw(&self) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "flip_hw expects rank 4, got {:?}",
                self.shape
            )));
        }
        let (h, w, a, b) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let inner = a * b;
        let mut out = vec![0.0; self.numel()];
        for i in 0..h {
            for j in 0..w {
                let src = (i * w + j) * inner;
                let dst = ((h - 1 - i) * w + (w - 1 - j)) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_bias() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![10., 20., 30.]);
        let c = binary_broadcast(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn broadcast_column() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![10., 100.]).unwrap();
        let c = binary_broadcast(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.data(), &[10., 20., 30., 400., 500., 600.]);
    }

    #[test]
    fn sum_to_reduces_batch() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = a.sum_to(&[3]).unwrap();
        assert_eq!(s.data(), &[5., 7., 9.]);
        let s2 = a.sum_to(&[2, 1]).unwrap();
        assert_eq!(s2.data(), &[6., 15.]);
        let s3 = a.sum_to(&[]).unwrap();
        assert_eq!(s3.scalar_value(), 21.0);
    }

    #[test]
    fn sum_to_inverts_broadcast_shapes() {
        let b = Tensor::from_vec(vec![1., 2., 3.]);
        let big = b.broadcast_to(&[4, 3]).unwrap();
        assert_eq!(big.sum_to(&[3]).unwrap().data(), &[4., 8., 12.]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5., 6., 7., 8.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.]).unwrap();
        let y = x.conv2d_valid(&k).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_sum_kernel() {
        let x = Tensor::new(vec![1, 3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![2, 2, 1, 1], vec![1., 1., 1., 1.]).unwrap();
        let y = x.conv2d_valid(&k).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let p = x.pad2d([1, 1, 1, 1]).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4, 1]);
        assert_eq!(p.crop2d([1, 1, 1, 1]).unwrap(), x);
    }

    #[test]
    fn permute_and_flip() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let p = x.permute4([3, 1, 2, 0]).unwrap();
        assert_eq!(p.shape(), &[2, 1, 1, 2]);
        assert_eq!(p.data(), &[1., 3., 2., 4.]);

        let k = Tensor::new(vec![2, 2, 1, 1], vec![1., 2., 3., 4.]).unwrap();
        let f = k.flip_hw().unwrap();
        assert_eq!(f.data(), &[4., 3., 2., 1.]);
    }
}
