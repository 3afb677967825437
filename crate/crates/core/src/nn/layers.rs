//! Network building blocks with explicit forward/backward passes.
//!
//! Parameters live in a flat `ParamSet`; layers hold indices into it, so one
//! parameter tensor can back any number of forward branches (the shared
//! encoder and shared regression head rely on this). Gradients accumulate in
//! a parallel `Grads` store, summed in fixed sample order for bit
//! reproducibility.

use rayon::prelude::*;

use super::tensor::{matmul_abt_acc, matmul_acc, matmul_atb_acc, Mat, Tensor4};
use crate::scalar::Real;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamTensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    pub tensors: Vec<ParamTensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape,
            data,
        });
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.tensors[id].data
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Gradient store parallel to a `ParamSet`.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub by_param: Vec<Vec<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(params: &ParamSet<F>) -> Self {
        Self {
            by_param: params.tensors.iter().map(|t| vec![F::zero(); t.data.len()]).collect(),
        }
    }
}

/// Per-sample gradient buffers larger than this are accumulated serially
/// instead of being materialized for every sample in a batch.
const PER_SAMPLE_GRAD_LIMIT: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Lower one sample into the [K × out_h·out_w] patch matrix.
    fn im2col<F: Real>(&self, x: &[F], h: usize, w: usize, oh: usize, ow: usize, col: &mut [F]) {
        let k = self.kernel;
        let s = self.stride as i64;
        let p = self.pad as i64;
        let n_cols = oh * ow;
        for ci in 0..self.in_ch {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row_idx = (ci * k + ky) * k + kx;
                    let dst = &mut col[row_idx * n_cols..(row_idx + 1) * n_cols];
                    let off_y = ky as i64 - p;
                    let off_x = kx as i64 - p;
                    for oy in 0..oh {
                        let iy = oy as i64 * s + off_y;
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as i64 {
                            for v in dst_row.iter_mut() {
                                *v = F::zero();
                            }
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in dst_row.iter_mut().enumerate() {
                            let ix = ox as i64 * s + off_x;
                            *v = if ix < 0 || ix >= w as i64 {
                                F::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Inverse of `im2col`: scatter-add patch-matrix gradients back to the
    /// input layout.
    fn col2im<F: Real>(&self, col: &[F], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [F]) {
        let k = self.kernel;
        let s = self.stride as i64;
        let p = self.pad as i64;
        let n_cols = oh * ow;
        for ci in 0..self.in_ch {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row_idx = (ci * k + ky) * k + kx;
                    let src = &col[row_idx * n_cols..(row_idx + 1) * n_cols];
                    let off_y = ky as i64 - p;
                    let off_x = kx as i64 - p;
                    for oy in 0..oh {
                        let iy = oy as i64 * s + off_y;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &src[oy * ow..(oy + 1) * ow];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = ox as i64 * s + off_x;
                            if ix >= 0 && ix < w as i64 {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Real>(
        &self,
        x: &Tensor4<F>,
        params: &ParamSet<F>,
        keep_cols: bool,
    ) -> Result<(Tensor4<F>, Option<ConvCache<F>>), super::NetworkError> {
        assert_eq!(x.c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = match (self.out_dim(x.h), self.out_dim(x.w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(super::NetworkError::SpatialTooSmall {
                    height: x.h,
                    width: x.w,
                })
            }
        };
        let k_rows = self.col_rows();
        let n_cols = oh * ow;
        let weight = params.get(self.w);
        let bias = params.get(self.b);

        let mut y = Tensor4::zeros(x.n, self.out_ch, oh, ow);
        let mut cols = vec![F::zero(); x.n * k_rows * n_cols];

        let y_samples: Vec<&mut [F]> = y.data.chunks_mut(self.out_ch * n_cols).collect();
        let col_samples: Vec<&mut [F]> = cols.chunks_mut(k_rows * n_cols).collect();
        y_samples
            .into_par_iter()
            .zip(col_samples)
            .enumerate()
            .for_each(|(i, (y_i, col_i))| {
                self.im2col(x.sample(i), x.h, x.w, oh, ow, col_i);
                matmul_acc(y_i, weight, col_i, self.out_ch, k_rows, n_cols);
                for (co, &b) in bias.iter().enumerate() {
                    for v in &mut y_i[co * n_cols..(co + 1) * n_cols] {
                        *v += b;
                    }
                }
            });

        let cache = keep_cols.then(|| ConvCache {
            cols,
            in_h: x.h,
            in_w: x.w,
            out_h: oh,
            out_w: ow,
        });
        Ok((y, cache))
    }

    /// Backward pass; returns dX unless `needs_dx` is false (first layer).
    pub fn backward<F: Real>(
        &self,
        dy: &Tensor4<F>,
        cache: &ConvCache<F>,
        params: &ParamSet<F>,
        grads: &mut Grads<F>,
        needs_dx: bool,
    ) -> Option<Tensor4<F>> {
        let k_rows = self.col_rows();
        let n_cols = cache.out_h * cache.out_w;
        let weight = params.get(self.w);
        let n = dy.n;

        // Parameter gradients: per-sample contributions summed in sample
        // order. Chunked so huge models do not blow up memory.
        let buf_len = self.out_ch * k_rows + self.out_ch;
        let chunk = (PER_SAMPLE_GRAD_LIMIT / buf_len.max(1)).max(1);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let partials: Vec<Vec<F>> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let mut buf = vec![F::zero(); buf_len];
                    let dy_i = dy.sample(i);
                    let col_i = &cache.cols[i * k_rows * n_cols..(i + 1) * k_rows * n_cols];
                    let (dw, db) = buf.split_at_mut(self.out_ch * k_rows);
                    matmul_abt_acc(dw, dy_i, col_i, self.out_ch, n_cols, k_rows);
                    for (co, dbv) in db.iter_mut().enumerate() {
                        let mut acc = F::zero();
                        for &v in &dy_i[co * n_cols..(co + 1) * n_cols] {
                            acc += v;
                        }
                        *dbv = acc;
                    }
                    buf
                })
                .collect();
            let (dw_store, db_store) = {
                let (a, b) = (self.w, self.b);
                debug_assert_ne!(a, b);
                if a < b {
                    let (lo, hi) = grads.by_param.split_at_mut(b);
                    (&mut lo[a], &mut hi[0])
                } else {
                    let (lo, hi) = grads.by_param.split_at_mut(a);
                    (&mut hi[0], &mut lo[b])
                }
            };
            for buf in partials {
                let (dw, db) = buf.split_at(self.out_ch * k_rows);
                for (dst, &v) in dw_store.iter_mut().zip(dw) {
                    *dst += v;
                }
                for (dst, &v) in db_store.iter_mut().zip(db) {
                    *dst += v;
                }
            }
        }

        if !needs_dx {
            return None;
        }
        let mut dx = Tensor4::zeros(n, self.in_ch, cache.in_h, cache.in_w);
        let dx_samples: Vec<&mut [F]> = dx.data.chunks_mut(self.in_ch * cache.in_h * cache.in_w).collect();
        dx_samples.into_par_iter().enumerate().for_each(|(i, dx_i)| {
            let dy_i = dy.sample(i);
            let mut dcol = vec![F::zero(); k_rows * n_cols];
            matmul_atb_acc(&mut dcol, weight, dy_i, self.out_ch, k_rows, n_cols);
            self.col2im(&dcol, cache.in_h, cache.in_w, cache.out_h, cache.out_w, dx_i);
        });
        Some(dx)
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    cols: Vec<F>,
    in_h: usize,
    in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// ReLU; the forward output doubles as the backward mask.
pub fn relu_forward<F: Real>(x: &mut Tensor4<F>) {
    for v in &mut x.data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

pub fn relu_backward<F: Real>(dy: &mut Tensor4<F>, y: &Tensor4<F>) {
    for (dv, &yv) in dy.data.iter_mut().zip(&y.data) {
        if yv <= F::zero() {
            *dv = F::zero();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    /// Flat input plane index of the max per output element, per sample and
    /// channel.
    argmax: Vec<u32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl MaxPool {
    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn forward<F: Real>(
        &self,
        x: &Tensor4<F>,
        keep_argmax: bool,
    ) -> Result<(Tensor4<F>, Option<PoolCache>), super::NetworkError> {
        let (oh, ow) = match (self.out_dim(x.h), self.out_dim(x.w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(super::NetworkError::SpatialTooSmall {
                    height: x.h,
                    width: x.w,
                })
            }
        };
        let mut y = Tensor4::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0u32; if keep_argmax { x.n * x.c * oh * ow } else { 0 }];
        let plane = x.h * x.w;
        let out_plane = oh * ow;
        let s = self.stride as i64;
        let p = self.pad as i64;
        let k = self.kernel as i64;

        for i in 0..x.n {
            let xs = x.sample(i);
            let ys = y.sample_mut(i);
            for c in 0..x.c {
                let src = &xs[c * plane..(c + 1) * plane];
                let dst = &mut ys[c * out_plane..(c + 1) * out_plane];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let y0 = oy as i64 * s - p;
                        let x0 = ox as i64 * s - p;
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0u32;
                        for ky in 0..k {
                            let iy = y0 + ky;
                            if iy < 0 || iy >= x.h as i64 {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = x0 + kx;
                                if ix < 0 || ix >= x.w as i64 {
                                    continue;
                                }
                                let idx = iy as usize * x.w + ix as usize;
                                let v = src[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        dst[oy * ow + ox] = best;
                        if keep_argmax {
                            argmax[(i * x.c + c) * out_plane + oy * ow + ox] = best_idx;
                        }
                    }
                }
            }
        }
        let cache = keep_argmax.then_some(PoolCache {
            argmax,
            in_h: x.h,
            in_w: x.w,
            out_h: oh,
            out_w: ow,
        });
        Ok((y, cache))
    }

    pub fn backward<F: Real>(&self, dy: &Tensor4<F>, cache: &PoolCache) -> Tensor4<F> {
        let mut dx = Tensor4::zeros(dy.n, dy.c, cache.in_h, cache.in_w);
        let plane = cache.in_h * cache.in_w;
        let out_plane = cache.out_h * cache.out_w;
        for i in 0..dy.n {
            for c in 0..dy.c {
                let base = (i * dy.c + c) * out_plane;
                let dst = &mut dx.data[(i * dy.c + c) * plane..(i * dy.c + c + 1) * plane];
                let src = &dy.data[base..base + out_plane];
                for (o, &g) in src.iter().enumerate() {
                    dst[cache.argmax[base + o] as usize] += g;
                }
            }
        }
        dx
    }
}

/// Global average pooling: [n, c, h, w] -> [n, c].
pub fn gap_forward<F: Real>(x: &Tensor4<F>) -> Mat<F> {
    let mut out = Mat::zeros(x.n, x.c);
    let plane = x.h * x.w;
    let scale = F::from_f64(1.0 / plane as f64);
    for i in 0..x.n {
        let xs = x.sample(i);
        let row = out.row_mut(i);
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = F::zero();
            for &v in &xs[c * plane..(c + 1) * plane] {
                acc += v;
            }
            *slot = acc * scale;
        }
    }
    out
}

pub fn gap_backward<F: Real>(dy: &Mat<F>, c: usize, h: usize, w: usize) -> Tensor4<F> {
    let mut dx = Tensor4::zeros(dy.rows, c, h, w);
    let plane = h * w;
    let scale = F::from_f64(1.0 / plane as f64);
    for i in 0..dy.rows {
        let row = dy.row(i);
        let xs = dx.sample_mut(i);
        for (ci, &g) in row.iter().enumerate() {
            let v = g * scale;
            for slot in &mut xs[ci * plane..(ci + 1) * plane] {
                *slot = v;
            }
        }
    }
    dx
}

/// Fully connected layer, y = x·Wᵀ + b with W [out × in].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<F: Real>(&self, x: &Mat<F>, params: &ParamSet<F>) -> Mat<F> {
        assert_eq!(x.cols, self.in_dim, "linear input width mismatch");
        let mut y = Mat::zeros(x.rows, self.out_dim);
        matmul_abt_acc(
            &mut y.data,
            &x.data,
            params.get(self.w),
            x.rows,
            self.in_dim,
            self.out_dim,
        );
        let bias = params.get(self.b);
        for r in 0..y.rows {
            for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates dW/db into `grads` and returns dX.
    pub fn backward<F: Real>(
        &self,
        dy: &Mat<F>,
        x: &Mat<F>,
        params: &ParamSet<F>,
        grads: &mut Grads<F>,
    ) -> Mat<F> {
        let n = dy.rows;
        {
            let dw = &mut grads.by_param[self.w];
            matmul_atb_acc(dw, &dy.data, &x.data, n, self.out_dim, self.in_dim);
        }
        {
            let db = &mut grads.by_param[self.b];
            for r in 0..n {
                for (slot, &g) in db.iter_mut().zip(dy.row(r)) {
                    *slot += g;
                }
            }
        }
        let mut dx = Mat::zeros(n, self.in_dim);
        matmul_acc(
            &mut dx.data,
            &dy.data,
            params.get(self.w),
            n,
            self.out_dim,
            self.in_dim,
        );
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of conv gradients on a small case.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut params = ParamSet::default();
        let conv = Conv2d {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
            w: 0,
            b: 0,
        };
        let w = params.add("w", vec![3, 2 * 9], randn_vec(&mut rng, 3 * 2 * 9));
        let b = params.add("b", vec![3], randn_vec(&mut rng, 3));
        let conv = Conv2d { w, b, ..conv };

        let x = Tensor4::from_vec(2, 2, 5, 5, randn_vec(&mut rng, 2 * 2 * 25));
        // Loss = sum of squared outputs / 2 so dy = y.
        let loss = |params: &ParamSet<f64>, x: &Tensor4<f64>| -> f64 {
            let (y, _) = conv.forward(x, params, false).unwrap();
            y.data.iter().map(|v| v * v).sum::<f64>() / 2.0
        };

        let (y, cache) = conv.forward(&x, &params, true).unwrap();
        let mut grads = Grads::zeros_like(&params);
        let dx = conv
            .backward(&y, cache.as_ref().unwrap(), &params, &mut grads, true)
            .unwrap();

        let eps = 1e-5;
        // Weight gradients.
        for &idx in &[0usize, 7, 20, 53] {
            let mut p2 = params.clone();
            p2.tensors[w].data[idx] += eps;
            let lp = loss(&p2, &x);
            p2.tensors[w].data[idx] -= 2.0 * eps;
            let lm = loss(&p2, &x);
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.by_param[w][idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "w[{idx}] fd={fd} an={an}");
        }
        // Input gradients.
        for &idx in &[0usize, 13, 49, 99] {
            let mut x2 = x.clone();
            x2.data[idx] += eps;
            let lp = loss(&params, &x2);
            x2.data[idx] -= 2.0 * eps;
            let lm = loss(&params, &x2);
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx.data[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "x[{idx}] fd={fd} an={an}");
        }
    }

    #[test]
    fn maxpool_forward_and_backward_route_to_argmax() {
        let x = Tensor4::from_vec(
            1,
            1,
            4,
            4,
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 1.0, //
                0.0, 1.0, 2.0, 0.0, //
                4.0, 0.0, 0.0, 3.0,
            ],
        );
        let pool = MaxPool {
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        let (y, cache) = pool.forward(&x, true).unwrap();
        assert_eq!(y.data, vec![3.0, 5.0, 4.0, 3.0]);
        let dy = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dx = pool.backward(&dy, cache.as_ref().unwrap());
        assert_eq!(dx.data[4], 1.0); // 3.0 at (1,0)
        assert_eq!(dx.data[2], 2.0); // 5.0 at (0,2)
        assert_eq!(dx.data[12], 3.0); // 4.0 at (3,0)
        assert_eq!(dx.data[15], 4.0); // 3.0 at (3,3)
        assert_eq!(dx.data.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn gap_is_channel_mean() {
        let x = Tensor4::from_vec(1, 2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let y = gap_forward(&x);
        assert_eq!(y.data, vec![2.5, 10.0]);
        let dy = Mat::from_vec(1, 2, vec![4.0, 8.0]);
        let dx = gap_backward(&dy, 2, 2, 2);
        assert_eq!(dx.data, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut params = ParamSet::default();
        let w = params.add("w", vec![3, 4], randn_vec(&mut rng, 12));
        let b = params.add("b", vec![3], randn_vec(&mut rng, 3));
        let lin = Linear {
            in_dim: 4,
            out_dim: 3,
            w,
            b,
        };
        let x = Mat::from_vec(2, 4, randn_vec(&mut rng, 8));
        let loss = |params: &ParamSet<f64>, x: &Mat<f64>| {
            let y = lin.forward(x, params);
            y.data.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let y = lin.forward(&x, &params);
        let mut grads = Grads::zeros_like(&params);
        let dx = lin.backward(&y, &x, &params, &mut grads);
        let eps = 1e-6;
        for idx in 0..12 {
            let mut p2 = params.clone();
            p2.tensors[w].data[idx] += eps;
            let lp = loss(&p2, &x);
            p2.tensors[w].data[idx] -= 2.0 * eps;
            let lm = loss(&p2, &x);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - grads.by_param[w][idx]).abs() < 1e-6);
        }
        for idx in 0..8 {
            let mut x2 = x.clone();
            x2.data[idx] += eps;
            let lp = loss(&params, &x2);
            x2.data[idx] -= 2.0 * eps;
            let lm = loss(&params, &x2);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - dx.data[idx]).abs() < 1e-6);
        }
    }
}
