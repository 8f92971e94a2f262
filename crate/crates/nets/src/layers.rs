//! Convolution, batch normalisation and dense kernels with hand-written
//! backward passes. Convolutions lower each example to a column matrix
//! (im2col) and hand the product to the shared GEMM.

use dcr_core::matrix::gemm_slices;
use dcr_core::{Matrix, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        if k == 0 || stride == 0 || in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(NetError::Config(format!(
                "kernel {k} (stride {stride}, pad {pad}) does not fit a {in_h}x{in_w} input"
            )));
        }
        Ok(Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    /// Rows of the column matrix, `in_c * k * k`.
    pub fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch()
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, pad) = (self.stride as isize, self.pad as isize);
        let off = kx as isize - pad;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = self.in_w as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.out_w as isize) };
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Lowers one `in_c x in_h x in_w` example into a `patch x out_plane` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ow, oh, s) = (g.out_w, g.out_h, g.stride);
    let plane = g.in_h * g.in_w;
    for ci in 0..g.in_c {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    for ox in lo..hi {
                        dst[ox] = src[ox * s + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `dx`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ow, oh, s) = (g.out_w, g.out_h, g.stride);
    let plane = g.in_h * g.in_w;
    for ci in 0..g.in_c {
        let dxc = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut dxc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in lo..hi {
                        dst[ox * s + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `out = conv(x; w) + b`, overwriting `out`.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, w: &[T], b: &[T], x: &Tensor<T>, out: &mut Tensor<T>) {
    let p = g.out_plane();
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    for n in 0..x.batch() {
        let xi = x.item(n);
        let src: &[T] = if g.pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols
        };
        let yi = out.item_mut(n);
        for (c, &bc) in b.iter().enumerate() {
            yi[c * p..(c + 1) * p].fill(bc);
        }
        gemm_slices(T::one(), w, (g.out_c, g.patch()), false, src, (g.patch(), p), false, T::one(), yi);
    }
}

/// Accumulates weight/bias gradients and the input gradient, each when requested.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    w: &[T],
    x: &Tensor<T>,
    dy: &Tensor<T>,
    mut param_grads: Option<(&mut [T], &mut [T])>,
    mut dx: Option<&mut Tensor<T>>,
) {
    let p = g.out_plane();
    let mut cols = if g.pointwise() || param_grads.is_none() { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    let mut dcols = if dx.is_some() && !g.pointwise() { vec![T::zero(); g.patch() * p] } else { Vec::new() };
    for n in 0..x.batch() {
        let dyi = dy.item(n);
        if let Some((dw, db)) = param_grads.as_mut() {
            for (c, dbc) in db.iter_mut().enumerate() {
                *dbc += dyi[c * p..(c + 1) * p].iter().copied().sum::<T>();
            }
            let xi = x.item(n);
            let src: &[T] = if g.pointwise() {
                xi
            } else {
                im2col(g, xi, &mut cols);
                &cols
            };
            gemm_slices(T::one(), dyi, (g.out_c, p), false, src, (g.patch(), p), true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            if g.pointwise() {
                gemm_slices(
                    T::one(),
                    w,
                    (g.out_c, g.patch()),
                    true,
                    dyi,
                    (g.out_c, p),
                    false,
                    T::one(),
                    dx.item_mut(n),
                );
            } else {
                gemm_slices(T::one(), w, (g.out_c, g.patch()), true, dyi, (g.out_c, p), false, T::zero(), &mut dcols);
                col2im(g, &dcols, dx.item_mut(n));
            }
        }
    }
}

/// Per-channel statistics used by one batch-norm evaluation.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Biased variance of the batch, or the running variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Whether the statistics came from the batch itself.
    pub from_batch: bool,
}

/// Normalises each channel over batch and space.
pub fn bn_forward_batch<T: Scalar>(x: &Tensor<T>, gamma: Option<&[T]>, beta: Option<&[T]>) -> (Tensor<T>, BnStats<T>) {
    let (n, c, p) = (x.batch(), x.channels(), x.plane());
    let count = T::from_usize_lossy(n * p);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        let xi = x.item(i);
        for ch in 0..c {
            mean[ch] += xi[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for i in 0..n {
        let xi = x.item(i);
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += xi[ch * p..(ch + 1) * p].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let stats = stats_from(mean, var, true);
    (normalise(x, &stats, gamma, beta), stats)
}

/// Normalises with stored running statistics.
pub fn bn_forward_running<T: Scalar>(
    x: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
) -> (Tensor<T>, BnStats<T>) {
    let stats = stats_from(running_mean.to_vec(), running_var.to_vec(), false);
    (normalise(x, &stats, gamma, beta), stats)
}

fn stats_from<T: Scalar>(mean: Vec<T>, var: Vec<T>, from_batch: bool) -> BnStats<T> {
    let eps = T::lit(BN_EPS);
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    BnStats { mean, var, inv_std, from_batch }
}

fn normalise<T: Scalar>(x: &Tensor<T>, s: &BnStats<T>, gamma: Option<&[T]>, beta: Option<&[T]>) -> Tensor<T> {
    let (c, p) = (x.channels(), x.plane());
    let mut y = x.clone();
    for i in 0..x.batch() {
        let yi = y.item_mut(i);
        for ch in 0..c {
            let g = gamma.map_or(T::one(), |g| g[ch]);
            let b = beta.map_or(T::zero(), |b| b[ch]);
            let (mu, is) = (s.mean[ch], s.inv_std[ch]);
            yi[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = g * (*v - mu) * is + b);
        }
    }
    y
}

/// Gradient of batch norm with respect to its input `x`; accumulates affine gradients.
pub fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    s: &BnStats<T>,
    gamma: Option<&[T]>,
    dy: &Tensor<T>,
    mut affine_grads: Option<(&mut [T], &mut [T])>,
) -> Tensor<T> {
    let (n, c, p) = (x.batch(), x.channels(), x.plane());
    let count = T::from_usize_lossy(n * p);
    let mut dx = Tensor::zeros(x.shape());
    for ch in 0..c {
        let (mu, is) = (s.mean[ch], s.inv_std[ch]);
        let g = gamma.map_or(T::one(), |g| g[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let xs = &x.item(i)[ch * p..(ch + 1) * p];
            let ds = &dy.item(i)[ch * p..(ch + 1) * p];
            for (&xv, &d) in xs.iter().zip(ds) {
                sum_dy += d;
                sum_dy_xhat += d * (xv - mu) * is;
            }
        }
        if let Some((dg, db)) = affine_grads.as_mut() {
            dg[ch] += sum_dy_xhat;
            db[ch] += sum_dy;
        }
        let scale = g * is;
        for i in 0..n {
            let xs = &x.item(i)[ch * p..(ch + 1) * p];
            let ds = &dy.item(i)[ch * p..(ch + 1) * p];
            let out = &mut dx.item_mut(i)[ch * p..(ch + 1) * p];
            if s.from_batch {
                let (mean_dy, mean_dy_xhat) = (sum_dy / count, sum_dy_xhat / count);
                for ((o, &xv), &d) in out.iter_mut().zip(xs).zip(ds) {
                    *o = scale * (d - mean_dy - (xv - mu) * is * mean_dy_xhat);
                }
            } else {
                for (o, &d) in out.iter_mut().zip(ds) {
                    *o = scale * d;
                }
            }
        }
    }
    dx
}

/// `y = x W^T + b` for `W` stored `out x in`.
pub fn linear_forward<T: Scalar>(w: &[T], b: &[T], x: &Matrix<T>) -> Matrix<T> {
    let (n, inp, out) = (x.rows(), x.cols(), b.len());
    let mut y = Matrix::from_fn(n, out, |_, j| b[j]);
    gemm_slices(T::one(), x.as_slice(), (n, inp), false, w, (out, inp), true, T::one(), y.as_mut_slice());
    y
}

/// Accumulates `dW`, `db`; returns `dx`.
pub fn linear_backward<T: Scalar>(w: &[T], x: &Matrix<T>, dy: &Matrix<T>, dw: &mut [T], db: &mut [T]) -> Matrix<T> {
    let (n, inp, out) = (x.rows(), x.cols(), dy.cols());
    gemm_slices(T::one(), dy.as_slice(), (n, out), true, x.as_slice(), (n, inp), false, T::one(), dw);
    for i in 0..n {
        db.iter_mut().zip(dy.row(i)).for_each(|(a, &g)| *a += g);
    }
    let mut dx = Matrix::zeros(n, inp);
    gemm_slices(T::one(), dy.as_slice(), (n, out), false, w, (out, inp), false, T::zero(), dx.as_mut_slice());
    dx
}
