//! Dense row-major `f64` tensors and the reference kernels used by the tape.
//!
//! All reductions accumulate left to right starting from `0.0`, so a naive
//! loop written in the same order reproduces every result bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(contract(format!("shape {shape:?} must be non-empty and positive")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Standard matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self.shape(), rhs.shape())?;
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Valid cross-correlation of `[c_in, n]` (or a batch `[b, c_in, n]`)
    /// with kernels `[c_out, c_in, w]`, plus an optional per-channel bias.
    pub fn conv1d(&self, kernels: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        let geom = ConvGeometry::new(self.shape(), kernels.shape(), stride)?;
        if let Some(b) = bias {
            if b.len() != geom.c_out {
                return Err(Error::Shape {
                    op: "conv1d bias",
                    lhs: kernels.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
        }
        let mut out = geom.forward(&self.data, &kernels.data);
        if let Some(b) = bias {
            let per = geom.out_len;
            for (i, chunk) in out.chunks_mut(per).enumerate() {
                let bc = b.data[i % geom.c_out];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        Tensor::new(geom.out_shape(self.rank() == 3), out)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// `out += a[m,k] * b[k,n]`; each output element sums over `k` in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub width: usize,
    pub stride: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        let (batch, c_in, len) = match *x {
            [c, n] => (1, c, n),
            [b, c, n] => (b, c, n),
            _ => {
                return Err(Error::Shape {
                    op: "conv1d",
                    lhs: x.to_vec(),
                    rhs: k.to_vec(),
                })
            }
        };
        let [c_out, kc, width] = *k else {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        };
        if kc != c_in {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        if stride == 0 {
            return Err(contract("conv1d stride must be at least 1"));
        }
        if len < width {
            return Err(Error::Window { width, len });
        }
        Ok(Self {
            batch,
            c_in,
            len,
            c_out,
            width,
            stride,
            out_len: (len - width) / stride + 1,
        })
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.out_len]
        } else {
            vec![self.c_out, self.out_len]
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.c_out * self.out_len];
        for b in 0..self.batch {
            let xb = &x[b * self.c_in * self.len..(b + 1) * self.c_in * self.len];
            for o in 0..self.c_out {
                let orow = &mut out[(b * self.c_out + o) * self.out_len..][..self.out_len];
                for (j, slot) in orow.iter_mut().enumerate() {
                    let start = j * self.stride;
                    let mut acc = 0.0;
                    for c in 0..self.c_in {
                        let xs = &xb[c * self.len + start..][..self.width];
                        let ks = &k[(o * self.c_in + c) * self.width..][..self.width];
                        for (&xv, &kv) in xs.iter().zip(ks) {
                            acc += kv * xv;
                        }
                    }
                    *slot = acc;
                }
            }
        }
        out
    }

    /// Accumulates input and kernel gradients for upstream gradient `g`.
    pub fn backward(&self, x: &[f64], k: &[f64], g: &[f64], dx: Option<&mut [f64]>, dk: Option<&mut [f64]>) {
        if let Some(dk) = dk {
            for b in 0..self.batch {
                let xb = &x[b * self.c_in * self.len..];
                for o in 0..self.c_out {
                    let grow = &g[(b * self.c_out + o) * self.out_len..][..self.out_len];
                    for c in 0..self.c_in {
                        let dks = &mut dk[(o * self.c_in + c) * self.width..][..self.width];
                        let xc = &xb[c * self.len..][..self.len];
                        for (j, &gv) in grow.iter().enumerate() {
                            let xs = &xc[j * self.stride..][..self.width];
                            for (d, &xv) in dks.iter_mut().zip(xs) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            for b in 0..self.batch {
                let dxb = &mut dx[b * self.c_in * self.len..][..self.c_in * self.len];
                for o in 0..self.c_out {
                    let grow = &g[(b * self.c_out + o) * self.out_len..][..self.out_len];
                    for c in 0..self.c_in {
                        let ks = &k[(o * self.c_in + c) * self.width..][..self.width];
                        let dxc = &mut dxb[c * self.len..][..self.len];
                        for (j, &gv) in grow.iter().enumerate() {
                            let ds = &mut dxc[j * self.stride..][..self.width];
                            for (d, &kv) in ds.iter_mut().zip(ks) {
                                *d += gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape into `(outer, channels, inner)` for per-channel ops:
/// `[C]`, `[B, C]` and `[B, C, N]` are supported.
pub(crate) fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c] => Ok((1, c, 1)),
        [b, c] => Ok((b, c, 1)),
        [b, c, n] => Ok((b, c, n)),
        _ => Err(contract(format!("per-channel op on unsupported shape {shape:?}"))),
    }
}
