//! Layer primitives: 3D convolution, group normalization, SiLU, linear,
//! multi-head self-attention over flattened voxels, nearest upsampling.
//!
//! Every layer exposes `forward` returning an output plus a cache, and
//! `backward` consuming the cache and accumulating parameter gradients.

use rand::Rng;

use super::{kaiming_uniform, Feat, Grads, ParamId, ParamStore};
use crate::tensor::Real;

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

/// 3D convolution, kernel 3 (padding 1) or kernel 1 (padding 0), with an
/// optional stride per axis.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: (usize, usize, usize),
}

pub struct Conv3dCache<T> {
    x: Feat<T>,
}

impl Conv3d {
    pub fn init<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: (usize, usize, usize),
        zero_init: bool,
    ) -> Self {
        assert!(k == 1 || k == 3, "kernel must be 1 or 3");
        let n = c_out * c_in * k * k * k;
        let fan_in = c_in * k * k * k;
        let wdata = if zero_init { vec![T::zero(); n] } else { kaiming_uniform(rng, n, fan_in) };
        let weight = ps.add(format!("{name}.weight"), vec![c_out, c_in, k, k, k], wdata);
        let bias = ps.add(format!("{name}.bias"), vec![c_out], vec![T::zero(); c_out]);
        Conv3d { weight, bias, c_in, c_out, k, stride }
    }

    pub fn out_dims(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let p = self.k / 2;
        (
            (d + 2 * p - self.k) / self.stride.0 + 1,
            (h + 2 * p - self.k) / self.stride.1 + 1,
            (w + 2 * p - self.k) / self.stride.2 + 1,
        )
    }

    fn pad_channel<T: Real>(&self, x: &Feat<T>, c: usize, buf: &mut [T]) -> (usize, usize, usize) {
        let p = self.k / 2;
        let (pd, ph, pw) = (x.d + 2 * p, x.h + 2 * p, x.w + 2 * p);
        for v in buf.iter_mut() {
            *v = T::zero();
        }
        let ch = x.channel(c);
        for z in 0..x.d {
            for y in 0..x.h {
                let src = &ch[(z * x.h + y) * x.w..(z * x.h + y) * x.w + x.w];
                let dst_off = ((z + p) * ph + y + p) * pw + p;
                buf[dst_off..dst_off + x.w].copy_from_slice(src);
            }
        }
        (pd, ph, pw)
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Feat<T>) -> (Feat<T>, Conv3dCache<T>) {
        assert_eq!(x.c, self.c_in, "conv input channels");
        let (od, oh, ow) = self.out_dims(x.d, x.h, x.w);
        let mut out = Feat::zeros(self.c_out, od, oh, ow);
        let weight = &ps.get(self.weight).data;
        let bias = &ps.get(self.bias).data;
        let p = self.k / 2;
        let (pd, ph, pw) = (x.d + 2 * p, x.h + 2 * p, x.w + 2 * p);
        let mut padded = vec![T::zero(); pd * ph * pw];
        let (sz, sy, sx) = self.stride;
        let kvol = self.k * self.k * self.k;

        for ci in 0..self.c_in {
            self.pad_channel(x, ci, &mut padded);
            for co in 0..self.c_out {
                let wbase = (co * self.c_in + ci) * kvol;
                let och = out.channel_mut(co);
                for kz in 0..self.k {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let wgt = weight[wbase + (kz * self.k + ky) * self.k + kx];
                            if wgt == T::zero() {
                                continue;
                            }
                            for z in 0..od {
                                let src_z = z * sz + kz;
                                for y in 0..oh {
                                    let src_row = (src_z * ph + y * sy + ky) * pw + kx;
                                    let dst_row = (z * oh + y) * ow;
                                    if sx == 1 {
                                        let src = &padded[src_row..src_row + ow];
                                        let dst = &mut och[dst_row..dst_row + ow];
                                        for (o, s) in dst.iter_mut().zip(src) {
                                            *o += wgt * *s;
                                        }
                                    } else {
                                        for xo in 0..ow {
                                            och[dst_row + xo] += wgt * padded[src_row + xo * sx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for co in 0..self.c_out {
            let b = bias[co];
            for v in out.channel_mut(co) {
                *v += b;
            }
        }
        (out, Conv3dCache { x: x.clone() })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &Conv3dCache<T>,
        dy: &Feat<T>,
        grads: &mut Grads<T>,
    ) -> Feat<T> {
        let x = &cache.x;
        let (od, oh, ow) = (dy.d, dy.h, dy.w);
        let p = self.k / 2;
        let (pd, ph, pw) = (x.d + 2 * p, x.h + 2 * p, x.w + 2 * p);
        let (sz, sy, sx) = self.stride;
        let kvol = self.k * self.k * self.k;
        let weight = ps.get(self.weight).data.clone();

        // bias gradient
        {
            let gb = grads.get_mut(self.bias);
            for co in 0..self.c_out {
                let mut acc = T::zero();
                for v in dy.channel(co) {
                    acc += *v;
                }
                gb[co] += acc;
            }
        }

        let mut padded = vec![T::zero(); pd * ph * pw];
        let mut dpadded = vec![T::zero(); pd * ph * pw];
        let mut dx = Feat::zeros(x.c, x.d, x.h, x.w);

        for ci in 0..self.c_in {
            self.pad_channel(x, ci, &mut padded);
            for v in dpadded.iter_mut() {
                *v = T::zero();
            }
            for co in 0..self.c_out {
                let wbase = (co * self.c_in + ci) * kvol;
                let dch = dy.channel(co);
                for kz in 0..self.k {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let widx = wbase + (kz * self.k + ky) * self.k + kx;
                            let wgt = weight[widx];
                            let mut wacc = T::zero();
                            for z in 0..od {
                                let src_z = z * sz + kz;
                                for y in 0..oh {
                                    let src_row = (src_z * ph + y * sy + ky) * pw + kx;
                                    let dst_row = (z * oh + y) * ow;
                                    if sx == 1 {
                                        let src = &padded[src_row..src_row + ow];
                                        let dst = &mut dpadded[src_row..src_row + ow];
                                        let drow = &dch[dst_row..dst_row + ow];
                                        for i in 0..ow {
                                            wacc += drow[i] * src[i];
                                            dst[i] += wgt * drow[i];
                                        }
                                    } else {
                                        for xo in 0..ow {
                                            let g = dch[dst_row + xo];
                                            wacc += g * padded[src_row + xo * sx];
                                            dpadded[src_row + xo * sx] += wgt * g;
                                        }
                                    }
                                }
                            }
                            grads.get_mut(self.weight)[widx] += wacc;
                        }
                    }
                }
            }
            // crop padding back into dx
            let dxch = dx.channel_mut(ci);
            for z in 0..x.d {
                for y in 0..x.h {
                    let src = ((z + p) * ph + y + p) * pw + p;
                    let dst = (z * x.h + y) * x.w;
                    for i in 0..x.w {
                        dxch[dst + i] += dpadded[src + i];
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

pub struct GroupNormCache<T> {
    x: Feat<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn init<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        groups: usize,
        channels: usize,
    ) -> Self {
        assert!(channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        let gamma = ps.add(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        let beta = ps.add(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
        GroupNorm { gamma, beta, groups, channels, eps: 1e-5 }
    }

    /// Group count clamped so it divides `channels`.
    pub fn groups_for(channels: usize, requested: usize) -> usize {
        let mut g = requested.min(channels);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Feat<T>) -> (Feat<T>, GroupNormCache<T>) {
        assert_eq!(x.c, self.channels);
        let per = self.channels / self.groups;
        let n_vox = x.voxels();
        let mut out = x.clone();
        let mut mean = vec![T::zero(); self.groups];
        let mut inv_std = vec![T::zero(); self.groups];
        let gamma = &ps.get(self.gamma).data;
        let beta = &ps.get(self.beta).data;
        for g in 0..self.groups {
            let lo = g * per * n_vox;
            let hi = (g + 1) * per * n_vox;
            let n = T::of((hi - lo) as f64);
            let mut mu = T::zero();
            for v in &x.data[lo..hi] {
                mu += *v;
            }
            mu /= n;
            let mut var = T::zero();
            for v in &x.data[lo..hi] {
                let dvv = *v - mu;
                var += dvv * dvv;
            }
            var /= n;
            let istd = T::one() / (var + T::of(self.eps)).sqrt();
            mean[g] = mu;
            inv_std[g] = istd;
            for c in g * per..(g + 1) * per {
                let ga = gamma[c];
                let be = beta[c];
                for v in out.channel_mut(c) {
                    *v = (*v - mu) * istd * ga + be;
                }
            }
        }
        (out, GroupNormCache { x: x.clone(), mean, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &GroupNormCache<T>,
        dy: &Feat<T>,
        grads: &mut Grads<T>,
    ) -> Feat<T> {
        let per = self.channels / self.groups;
        let n_vox = cache.x.voxels();
        let gamma = ps.get(self.gamma).data.clone();
        let mut dx = Feat::zeros(cache.x.c, cache.x.d, cache.x.h, cache.x.w);
        for g in 0..self.groups {
            let mu = cache.mean[g];
            let istd = cache.inv_std[g];
            let n = T::of((per * n_vox) as f64);
            // channel-wise gamma/beta grads plus group reductions
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c in g * per..(g + 1) * per {
                let xc = cache.x.channel(c);
                let dyc = dy.channel(c);
                let mut dgamma = T::zero();
                let mut dbeta = T::zero();
                for i in 0..n_vox {
                    let xhat = (xc[i] - mu) * istd;
                    let dxhat = dyc[i] * gamma[c];
                    dgamma += dyc[i] * xhat;
                    dbeta += dyc[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                grads.get_mut(self.gamma)[c] += dgamma;
                grads.get_mut(self.beta)[c] += dbeta;
            }
            for c in g * per..(g + 1) * per {
                let xc = cache.x.channel(c);
                let dyc = dy.channel(c);
                let dxc = dx.channel_mut(c);
                for i in 0..n_vox {
                    let xhat = (xc[i] - mu) * istd;
                    let dxhat = dyc[i] * gamma[c];
                    dxc[i] = istd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

pub fn silu<T: Real>(x: &Feat<T>) -> Feat<T> {
    let mut out = x.clone();
    for v in &mut out.data {
        let s = T::one() / (T::one() + (-*v).exp());
        *v = *v * s;
    }
    out
}

pub fn silu_backward<T: Real>(x: &Feat<T>, dy: &Feat<T>) -> Feat<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let s = T::one() / (T::one() + (-v).exp());
        *d = *d * (s * (T::one() + v * (T::one() - s)));
    }
    dx
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| {
            let s = T::one() / (T::one() + (-v).exp());
            v * s
        })
        .collect()
}

pub fn silu_vec_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = T::one() / (T::one() + (-v).exp());
            d * (s * (T::one() + v * (T::one() - s)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn init<T: Real>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
        zero_init: bool,
    ) -> Self {
        let wdata = if zero_init {
            vec![T::zero(); n_in * n_out]
        } else {
            kaiming_uniform(rng, n_in * n_out, n_in)
        };
        let weight = ps.add(format!("{name}.weight"), vec![n_out, n_in], wdata);
        let bias = ps.add(format!("{name}.bias"), vec![n_out], vec![T::zero(); n_out]);
        Linear { weight, bias, n_in, n_out }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = &ps.get(self.weight).data;
        let b = &ps.get(self.bias).data;
        (0..self.n_out)
            .map(|o| {
                let mut acc = b[o];
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (wi, xi) in row.iter().zip(x) {
                    acc += *wi * *xi;
                }
                acc
            })
            .collect()
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let w = ps.get(self.weight).data.clone();
        {
            let gw = grads.get_mut(self.weight);
            for o in 0..self.n_out {
                for i in 0..self.n_in {
                    gw[o * self.n_in + i] += dy[o] * x[i];
                }
            }
        }
        {
            let gb = grads.get_mut(self.bias);
            for o in 0..self.n_out {
                gb[o] += dy[o];
            }
        }
        (0..self.n_in)
            .map(|i| {
                let mut acc = T::zero();
                for o in 0..self.n_out {
                    acc += w[o * self.n_in + i] * dy[o];
                }
                acc
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over flattened voxels
// ---------------------------------------------------------------------------

/// Attention core: consumes a (3c, n) qkv map, emits (c, n).
#[derive(Debug, Clone)]
pub struct AttnCore {
    pub channels: usize,
    pub heads: usize,
}

pub struct AttnCache<T> {
    qkv: Vec<T>,
    /// Softmax attention matrices, one n*n block per head.
    attn: Vec<T>,
    n: usize,
}

impl AttnCore {
    pub fn new(channels: usize, heads: usize) -> Self {
        assert!(channels % heads == 0, "channels {channels} not divisible by heads {heads}");
        AttnCore { channels, heads }
    }

    /// `qkv` layout: channel-major (3c rows of n tokens).
    pub fn forward<T: Real>(&self, qkv: &[T], n: usize) -> (Vec<T>, AttnCache<T>) {
        let c = self.channels;
        let dh = c / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); c * n];
        let mut attn = vec![T::zero(); self.heads * n * n];
        for hd in 0..self.heads {
            let q0 = hd * dh;
            let k0 = c + hd * dh;
            let v0 = 2 * c + hd * dh;
            let a = &mut attn[hd * n * n..(hd + 1) * n * n];
            // scores
            for i in 0..n {
                for j in 0..n {
                    let mut s = T::zero();
                    for dd in 0..dh {
                        s += qkv[(q0 + dd) * n + i] * qkv[(k0 + dd) * n + j];
                    }
                    a[i * n + j] = s * scale;
                }
            }
            // row softmax
            for i in 0..n {
                let row = &mut a[i * n..(i + 1) * n];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            // weighted values
            for dd in 0..dh {
                for i in 0..n {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += a[i * n + j] * qkv[(v0 + dd) * n + j];
                    }
                    out[(q0 + dd) * n + i] = acc;
                }
            }
        }
        (out, AttnCache { qkv: qkv.to_vec(), attn, n })
    }

    pub fn backward<T: Real>(&self, cache: &AttnCache<T>, dy: &[T]) -> Vec<T> {
        let c = self.channels;
        let n = cache.n;
        let dh = c / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dqkv = vec![T::zero(); 3 * c * n];
        for hd in 0..self.heads {
            let q0 = hd * dh;
            let k0 = c + hd * dh;
            let v0 = 2 * c + hd * dh;
            let a = &cache.attn[hd * n * n..(hd + 1) * n * n];
            // dV and dA
            let mut da = vec![T::zero(); n * n];
            for dd in 0..dh {
                for i in 0..n {
                    let g = dy[(q0 + dd) * n + i];
                    if g == T::zero() {
                        continue;
                    }
                    for j in 0..n {
                        dqkv[(v0 + dd) * n + j] += a[i * n + j] * g;
                        da[i * n + j] += cache.qkv[(v0 + dd) * n + j] * g;
                    }
                }
            }
            // softmax backward (rows)
            for i in 0..n {
                let arow = &a[i * n..(i + 1) * n];
                let darow = &mut da[i * n..(i + 1) * n];
                let mut dot = T::zero();
                for j in 0..n {
                    dot += arow[j] * darow[j];
                }
                for j in 0..n {
                    darow[j] = arow[j] * (darow[j] - dot);
                }
            }
            // dQ, dK through the scaled dot product
            for dd in 0..dh {
                for i in 0..n {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += da[i * n + j] * cache.qkv[(k0 + dd) * n + j];
                    }
                    dqkv[(q0 + dd) * n + i] += acc * scale;
                }
                for j in 0..n {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += da[i * n + j] * cache.qkv[(q0 + dd) * n + i];
                    }
                    dqkv[(k0 + dd) * n + j] += acc * scale;
                }
            }
        }
        dqkv
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsampling
// ---------------------------------------------------------------------------

pub fn upsample_nearest<T: Real>(x: &Feat<T>, f: (usize, usize, usize)) -> Feat<T> {
    let (fz, fy, fx) = f;
    let mut out = Feat::zeros(x.c, x.d * fz, x.h * fy, x.w * fx);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        let (oh, ow) = (x.h * fy, x.w * fx);
        for z in 0..x.d * fz {
            for y in 0..oh {
                let srow = ((z / fz) * x.h + y / fy) * x.w;
                let drow = (z * oh + y) * ow;
                for xx in 0..ow {
                    dst[drow + xx] = src[srow + xx / fx];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(
    dy: &Feat<T>,
    in_dims: (usize, usize, usize),
    f: (usize, usize, usize),
) -> Feat<T> {
    let (fz, fy, fx) = f;
    let (d, h, w) = in_dims;
    let mut dx = Feat::zeros(dy.c, d, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        let (oh, ow) = (h * fy, w * fx);
        for z in 0..d * fz {
            for y in 0..oh {
                let srow = (z * oh + y) * ow;
                let drow = ((z / fz) * h + y / fy) * w;
                for xx in 0..ow {
                    dst[drow + xx / fx] += src[srow + xx];
                }
            }
        }
    }
    dx
}
