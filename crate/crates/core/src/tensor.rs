//! Dense row-major f64 tensors and the raw kernels behind the tape ops.
//!
//! Tensors are plain values: shape plus a flat buffer. All layout is
//! row-major; images and feature maps are [H, W, C] so the channel vector at
//! a pixel is contiguous.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Value of a rank-0/size-1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index for [H, W, C] layout.
    pub fn at3(&self, h: usize, w: usize, c: usize) -> f64 {
        let (hh, ww, cc) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(h < hh && w < ww && c < cc);
        self.data[(h * ww + w) * cc + c]
    }

    /// Flat index for [M, N] layout.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let n = self.shape[1];
        self.data[r * n + c]
    }
}

pub fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

// ── Raw kernels ──────────────────────────────────────────────────────
//
// These operate on flat slices with explicit dims. The tape calls them in
// its forward pass; they are also usable where no gradient is needed.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Spatial cross-correlation with same padding, channels-last.
///
/// x: [H, W, Ci], w: [k, k, Ci, Co], stride in {1, 2}; output
/// [ceil(H/s), ceil(W/s), Co]. Only k in {1, 3} is supported.
pub fn conv2d(
    x: &[f64],
    h: usize,
    w_dim: usize,
    ci: usize,
    wgt: &[f64],
    k: usize,
    co: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    assert!(k == 1 || k == 3);
    assert!(stride == 1 || stride == 2);
    let pad = k / 2;
    let oh = h.div_ceil(stride);
    let ow = w_dim.div_ceil(stride);
    let mut out = vec![0.0; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * co;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w_dim as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w_dim + ix as usize) * ci;
                    let wbase = (ky * k + kx) * ci * co;
                    for c_in in 0..ci {
                        let xv = x[ibase + c_in];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wgt[wbase + c_in * co..wbase + (c_in + 1) * co];
                        for c_out in 0..co {
                            out[obase + c_out] += xv * wrow[c_out];
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Gradient of [`conv2d`] w.r.t. input and weights, same loop nest as forward.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    h: usize,
    w_dim: usize,
    ci: usize,
    wgt: &[f64],
    k: usize,
    co: usize,
    stride: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let oh = h.div_ceil(stride);
    let ow = w_dim.div_ceil(stride);
    let mut dx = vec![0.0; h * w_dim * ci];
    let mut dw = vec![0.0; k * k * ci * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * co;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w_dim as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w_dim + ix as usize) * ci;
                    let wbase = (ky * k + kx) * ci * co;
                    for c_in in 0..ci {
                        let xv = x[ibase + c_in];
                        let wrow = &wgt[wbase + c_in * co..wbase + (c_in + 1) * co];
                        let mut acc = 0.0;
                        for c_out in 0..co {
                            let g = grad_out[obase + c_out];
                            acc += g * wrow[c_out];
                            dw[wbase + c_in * co + c_out] += g * xv;
                        }
                        dx[ibase + c_in] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Row-stabilized softmax over the trailing axis.
pub fn softmax_last(x: &[f64], row_len: usize) -> Vec<f64> {
    assert!(row_len > 0 && x.len() % row_len == 0);
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(row_len).zip(x.chunks(row_len)) {
        let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    out
}

/// Row-stabilized log-softmax over the trailing axis.
pub fn log_softmax_last(x: &[f64], row_len: usize) -> Vec<f64> {
    assert!(row_len > 0 && x.len() % row_len == 0);
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(row_len).zip(x.chunks(row_len)) {
        let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = xrow.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v - m - log_sum;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
