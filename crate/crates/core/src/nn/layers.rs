//! Forward and backward kernels for the individual layer types.

use super::params::{ParamGrads, ParamSet};
use super::spec::conv_out;
use super::tensor::gemm;
use super::{Real, Tensor4};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub(crate) struct ConvOp {
    pub weight: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvCache<T> {
    cols: Vec<T>,
    in_dims: [usize; 4],
    out_dims: [usize; 4],
}

impl ConvOp {
    fn out_dims(&self, in_dims: [usize; 4]) -> [usize; 4] {
        let [n, t, f, _] = in_dims;
        [
            n,
            conv_out(t, self.kernel[0], self.stride[0]).expect("validated"),
            conv_out(f, self.kernel[1], self.stride[1]).expect("validated"),
            self.cout,
        ]
    }

    fn patch_len(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.cin
    }

    /// Visits, for every output position and kernel row, the run of patch
    /// slots whose input lies inside the padded frame as
    /// `(patch offset, input offset, length)`. Runs are contiguous in both.
    fn for_each_run(&self, in_dims: [usize; 4], mut visit: impl FnMut(usize, usize, usize)) {
        let [n, t, f, c] = in_dims;
        let [_, to, fo, _] = self.out_dims(in_dims);
        let [kt, kf] = self.kernel;
        let (pt, pf) = (kt / 2, kf / 2);
        let k = self.patch_len();
        for b in 0..n {
            for i in 0..to {
                for dt in 0..kt {
                    let ti = i * self.stride[0] + dt;
                    if ti < pt || ti - pt >= t {
                        continue;
                    }
                    let in_row = (b * t + ti - pt) * f;
                    for j in 0..fo {
                        let lo = j * self.stride[1];
                        // kernel columns df with pf <= lo + df < f + pf
                        let df0 = pf.saturating_sub(lo);
                        let df1 = kf.min(f + pf - lo);
                        if df0 >= df1 {
                            continue;
                        }
                        let row = ((b * to + i) * fo + j) * k + (dt * kf + df0) * c;
                        let src = (in_row + lo + df0 - pf) * c;
                        visit(row, src, (df1 - df0) * c);
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &Tensor4<T>) -> (Tensor4<T>, ConvCache<T>) {
        let in_dims = x.dims();
        let out_dims = self.out_dims(in_dims);
        let rows = out_dims[0] * out_dims[1] * out_dims[2];
        let k = self.patch_len();
        let mut cols = vec![T::zero(); rows * k];
        let xd = x.data();
        self.for_each_run(in_dims, |dst, src, len| {
            for (d, v) in cols[dst..dst + len].iter_mut().zip(&xd[src..src + len]) {
                *d = *v;
            }
        });
        let mut out = vec![T::zero(); rows * self.cout];
        gemm(
            &cols,
            (rows, k),
            false,
            params.data(self.weight),
            (k, self.cout),
            false,
            T::zero(),
            &mut out,
            (rows, self.cout),
        );
        (
            Tensor4::from_vec(out_dims, out),
            ConvCache { cols, in_dims, out_dims },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &ConvCache<T>,
        dy: &Tensor4<T>,
        grads: &mut ParamGrads<T>,
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        let rows = cache.out_dims[0] * cache.out_dims[1] * cache.out_dims[2];
        let k = self.patch_len();
        gemm(
            &cache.cols,
            (rows, k),
            true,
            dy.data(),
            (rows, self.cout),
            false,
            T::one(),
            &mut grads.grads[self.weight],
            (k, self.cout),
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * k];
        gemm(
            dy.data(),
            (rows, self.cout),
            false,
            params.data(self.weight),
            (k, self.cout),
            true,
            T::zero(),
            &mut dcols,
            (rows, k),
        );
        let mut dx = Tensor4::zeros(cache.in_dims);
        let dxd = dx.data_mut();
        self.for_each_run(cache.in_dims, |col, src, len| {
            for (d, v) in dxd[src..src + len].iter_mut().zip(&dcols[col..col + len]) {
                *d += *v;
            }
        });
        Some(dx)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BnOp {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Per-channel batch statistics to fold into the running averages.
#[derive(Debug, Clone)]
pub(crate) struct BnUpdate {
    pub running_mean: usize,
    pub running_var: usize,
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

impl BnOp {
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor4<T>,
        batch_stats: bool,
    ) -> (Tensor4<T>, BnCache<T>, Option<BnUpdate>) {
        let c = self.channels;
        let xd = x.data();
        let m = xd.len() / c;
        let (mean, var, update) = if batch_stats {
            let mut mean = vec![0.0f64; c];
            for row in xd.chunks_exact(c) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v.f64();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0f64; c];
            for row in xd.chunks_exact(c) {
                for q in 0..c {
                    let d = row[q].f64() - mean[q];
                    var[q] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let correction = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let update = BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean: mean.clone(),
                unbiased_var: var.iter().map(|v| v * correction).collect(),
            };
            (mean, var, Some(update))
        } else {
            let mean = params.data(self.running_mean).iter().map(|v| v.f64()).collect();
            let var = params.data(self.running_var).iter().map(|v| v.f64()).collect();
            (mean, var, None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = params.data(self.gamma);
        let beta = params.data(self.beta);
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let inv_t: Vec<T> = inv_std.iter().map(|&v| T::of(v)).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for ((row, hrow), yrow) in xd.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
            for q in 0..c {
                let h = (row[q] - mean_t[q]) * inv_t[q];
                hrow[q] = h;
                yrow[q] = gamma[q] * h + beta[q];
            }
        }
        (
            Tensor4::from_vec(x.dims(), y),
            BnCache { xhat, inv_std, batch_stats },
            update,
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &BnCache<T>,
        dy: &Tensor4<T>,
        grads: &mut ParamGrads<T>,
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        let c = self.channels;
        let dyd = dy.data();
        let m = dyd.len() / c;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (drow, hrow) in dyd.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for q in 0..c {
                let d = drow[q].f64();
                sum_dy[q] += d;
                sum_dy_xhat[q] += d * hrow[q].f64();
            }
        }
        for q in 0..c {
            grads.grads[self.gamma][q] += T::of(sum_dy_xhat[q]);
            grads.grads[self.beta][q] += T::of(sum_dy[q]);
        }
        if !need_dx {
            return None;
        }
        let gamma = params.data(self.gamma);
        let mut dx = vec![T::zero(); dyd.len()];
        if cache.batch_stats {
            // dx = g/sqrt(v) * (dy - mean(dy) - xhat * mean(dy * xhat))
            let mf = m as f64;
            let scale: Vec<T> = (0..c).map(|q| T::of(gamma[q].f64() * cache.inv_std[q])).collect();
            let mean_dy: Vec<T> = sum_dy.iter().map(|&v| T::of(v / mf)).collect();
            let mean_dyh: Vec<T> = sum_dy_xhat.iter().map(|&v| T::of(v / mf)).collect();
            for ((drow, hrow), xrow) in dyd.chunks_exact(c).zip(cache.xhat.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                for q in 0..c {
                    xrow[q] = scale[q] * (drow[q] - mean_dy[q] - hrow[q] * mean_dyh[q]);
                }
            }
        } else {
            let scale: Vec<T> = (0..c).map(|q| T::of(gamma[q].f64() * cache.inv_std[q])).collect();
            for (drow, xrow) in dyd.chunks_exact(c).zip(dx.chunks_exact_mut(c)) {
                for q in 0..c {
                    xrow[q] = drow[q] * scale[q];
                }
            }
        }
        Some(Tensor4::from_vec(dy.dims(), dx))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ActCache<T> {
    input: Vec<T>,
}

pub(crate) fn leaky_relu_forward<T: Real>(x: &Tensor4<T>, slope: f64) -> (Tensor4<T>, ActCache<T>) {
    let s = T::of(slope);
    let y = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { v * s })
        .collect();
    (
        Tensor4::from_vec(x.dims(), y),
        ActCache { input: x.data().to_vec() },
    )
}

pub(crate) fn leaky_relu_backward<T: Real>(cache: &ActCache<T>, dy: &Tensor4<T>, slope: f64) -> Tensor4<T> {
    let s = T::of(slope);
    let dx = dy
        .data()
        .iter()
        .zip(&cache.input)
        .map(|(&d, &x)| if x > T::zero() { d } else { d * s })
        .collect();
    Tensor4::from_vec(dy.dims(), dx)
}

impl<T: Real> ActCache<T> {
    pub fn hash_pattern(&self, h: &mut impl std::hash::Hasher) {
        for chunk in self.input.chunks(64) {
            let mut bits = 0u64;
            for (i, v) in chunk.iter().enumerate() {
                if *v > T::zero() {
                    bits |= 1 << i;
                }
            }
            h.write_u64(bits);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
pub(crate) struct PoolCache {
    in_dims: [usize; 4],
    /// Spatial argmax per (item, channel), present when a max pool runs.
    argmax: Vec<usize>,
}

impl PoolCache {
    pub fn hash_pattern(&self, h: &mut impl std::hash::Hasher) {
        for &a in &self.argmax {
            h.write_usize(a);
        }
    }
}

pub(crate) fn pool_forward<T: Real>(x: &Tensor4<T>, kinds: &[PoolKind]) -> (Tensor4<T>, PoolCache) {
    let [n, t, f, c] = x.dims();
    let spatial = t * f;
    let width = c * kinds.len();
    let mut out = vec![T::zero(); n * width];
    let mut argmax = Vec::new();
    for b in 0..n {
        let item = x.item(b);
        for (slot, kind) in kinds.iter().enumerate() {
            let base = b * width + slot * c;
            match kind {
                PoolKind::Max => {
                    for q in 0..c {
                        let mut best = 0;
                        let mut best_v = item[q];
                        for p in 1..spatial {
                            let v = item[p * c + q];
                            if v > best_v {
                                best_v = v;
                                best = p;
                            }
                        }
                        argmax.push(best);
                        out[base + q] = best_v;
                    }
                }
                PoolKind::Avg => {
                    let mut acc = vec![0.0f64; c];
                    for row in item.chunks_exact(c) {
                        for q in 0..c {
                            acc[q] += row[q].f64();
                        }
                    }
                    for q in 0..c {
                        out[base + q] = T::of(acc[q] / spatial as f64);
                    }
                }
            }
        }
    }
    (
        Tensor4::from_vec([n, 1, 1, width], out),
        PoolCache { in_dims: x.dims(), argmax },
    )
}

pub(crate) fn pool_backward<T: Real>(cache: &PoolCache, dy: &Tensor4<T>, kinds: &[PoolKind]) -> Tensor4<T> {
    let [n, t, f, c] = cache.in_dims;
    let spatial = t * f;
    let width = c * kinds.len();
    let inv = T::of(1.0 / spatial as f64);
    let mut dx = Tensor4::zeros(cache.in_dims);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let mut arg = cache.argmax.iter();
    for b in 0..n {
        let item = &mut dxd[b * spatial * c..(b + 1) * spatial * c];
        for (slot, kind) in kinds.iter().enumerate() {
            let base = b * width + slot * c;
            match kind {
                PoolKind::Max => {
                    for q in 0..c {
                        let p = *arg.next().expect("argmax per channel");
                        item[p * c + q] += dyd[base + q];
                    }
                }
                PoolKind::Avg => {
                    for row in item.chunks_exact_mut(c) {
                        for q in 0..c {
                            row[q] += dyd[base + q] * inv;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct DenseOp {
    pub weight: usize,
    pub bias: usize,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseCache<T> {
    input: Vec<T>,
    batch: usize,
}

impl DenseOp {
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &Tensor4<T>) -> (Tensor4<T>, DenseCache<T>) {
        let n = x.batch();
        let bias = params.data(self.bias);
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            x.data(),
            (n, self.n_in),
            false,
            params.data(self.weight),
            (self.n_in, self.n_out),
            false,
            T::one(),
            &mut out,
            (n, self.n_out),
        );
        (
            Tensor4::from_vec([n, 1, 1, self.n_out], out),
            DenseCache { input: x.data().to_vec(), batch: n },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &DenseCache<T>,
        dy: &Tensor4<T>,
        grads: &mut ParamGrads<T>,
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        let n = cache.batch;
        gemm(
            &cache.input,
            (n, self.n_in),
            true,
            dy.data(),
            (n, self.n_out),
            false,
            T::one(),
            &mut grads.grads[self.weight],
            (self.n_in, self.n_out),
        );
        for row in dy.data().chunks_exact(self.n_out) {
            for (g, d) in grads.grads[self.bias].iter_mut().zip(row) {
                *g += *d;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); n * self.n_in];
        gemm(
            dy.data(),
            (n, self.n_out),
            false,
            params.data(self.weight),
            (self.n_in, self.n_out),
            true,
            T::zero(),
            &mut dx,
            (n, self.n_in),
        );
        Some(Tensor4::from_vec([n, 1, 1, self.n_in], dx))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResOp {
    pub bn_a: BnOp,
    pub conv_a: ConvOp,
    pub bn_b: BnOp,
    pub conv_b: ConvOp,
    pub proj: Option<ConvOp>,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ResCache<T> {
    bn_a: BnCache<T>,
    act_a: ActCache<T>,
    conv_a: ConvCache<T>,
    bn_b: BnCache<T>,
    act_b: ActCache<T>,
    conv_b: ConvCache<T>,
    proj: Option<ConvCache<T>>,
}

impl<T: Real> ResCache<T> {
    pub fn hash_pattern(&self, h: &mut impl std::hash::Hasher) {
        self.act_a.hash_pattern(h);
        self.act_b.hash_pattern(h);
    }
}

impl ResOp {
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor4<T>,
        batch_stats: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> (Tensor4<T>, ResCache<T>) {
        let (h1, bn_a, u1) = self.bn_a.forward(params, x, batch_stats);
        let (a1, act_a) = leaky_relu_forward(&h1, self.slope);
        drop(h1);
        let (c1, conv_a) = self.conv_a.forward(params, &a1);
        drop(a1);
        let (h2, bn_b, u2) = self.bn_b.forward(params, &c1, batch_stats);
        drop(c1);
        let (a2, act_b) = leaky_relu_forward(&h2, self.slope);
        drop(h2);
        let (mut y, conv_b) = self.conv_b.forward(params, &a2);
        let proj = match &self.proj {
            Some(p) => {
                let (s, cache) = p.forward(params, x);
                for (o, v) in y.data_mut().iter_mut().zip(s.data()) {
                    *o += *v;
                }
                Some(cache)
            }
            None => {
                for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o += *v;
                }
                None
            }
        };
        updates.extend(u1);
        updates.extend(u2);
        (
            y,
            ResCache { bn_a, act_a, conv_a, bn_b, act_b, conv_b, proj },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &ResCache<T>,
        dy: &Tensor4<T>,
        grads: &mut ParamGrads<T>,
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        let da2 = self.conv_b.backward(params, &cache.conv_b, dy, grads, true).expect("dx");
        let dh2 = leaky_relu_backward(&cache.act_b, &da2, self.slope);
        let dc1 = self.bn_b.backward(params, &cache.bn_b, &dh2, grads, true).expect("dx");
        let da1 = self.conv_a.backward(params, &cache.conv_a, &dc1, grads, true).expect("dx");
        let dh1 = leaky_relu_backward(&cache.act_a, &da1, self.slope);
        let main = self.bn_a.backward(params, &cache.bn_a, &dh1, grads, need_dx);
        let skip = match (&self.proj, &cache.proj) {
            (Some(p), Some(pc)) => p.backward(params, pc, dy, grads, need_dx),
            _ => need_dx.then(|| dy.clone()),
        };
        match (main, skip) {
            (Some(mut dx), Some(ds)) => {
                for (o, v) in dx.data_mut().iter_mut().zip(ds.data()) {
                    *o += *v;
                }
                Some(dx)
            }
            _ => None,
        }
    }
}
