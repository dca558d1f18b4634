//! Minimal reverse-mode differentiation over `(N, C, H, W)` f64 tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in order;
//! [`Graph::backward`] walks the record in reverse and returns gradients for
//! every leaf. Only the operations the generator needs are provided:
//! stride-1 "same" convolutions (optionally grouped), batch normalization,
//! SiLU, sigmoid, 2x2 max pooling, 2x bilinear upsampling, channel concat,
//! addition, per-channel scaling and global average pooling.
//!
//! Kernels split work across rayon tasks by output plane only, so every
//! value is accumulated in a fixed order and results are bitwise
//! reproducible regardless of thread count.

use ndarray::{s, Array4, Axis};
use rayon::prelude::*;

pub type Tensor = Array4<f64>;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Silu(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    ChannelScale {
        input: Var,
        scale: Var,
    },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn contiguous(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn dims(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: contiguous(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice().expect("contiguous")
    }

    /// Stride-1 convolution with `k / 2` zero padding (odd square kernels).
    ///
    /// `weight` is `(C_out, C_in / groups, k, k)`, `bias` is `(1, C_out, 1, 1)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, groups: usize) -> Var {
        let (n, cin, h, w) = dims(self.value(input));
        let (cout, cin_g, k, k2) = dims(self.value(weight));
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(k % 2, 1, "odd kernels only");
        assert_eq!(cin % groups, 0);
        assert_eq!(cout % groups, 0);
        assert_eq!(cin / groups, cin_g, "weight input channels");
        let cout_g = cout / groups;
        let x = self.data(input);
        let wt = self.data(weight);
        let b = bias.map(|b| self.data(b));
        let plane = h * w;
        let mut out = vec![0.0; n * cout * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(i, o)| {
            let (ni, oc) = (i / cout, i % cout);
            if let Some(b) = b {
                o.fill(b[oc]);
            }
            let g = oc / cout_g;
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let xin = &x[(ni * cin + ic) * plane..][..plane];
                let wk = &wt[(oc * cin_g + icl) * k * k..][..k * k];
                conv_plane_acc(o, xin, wk, h, w, k);
            }
        });
        let value = Tensor::from_shape_vec((n, cout, h, w), out).unwrap();
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                groups,
            },
        )
    }

    /// Batch norm using the batch's own statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let x = self.value(input);
        let (n, c, h, w) = dims(x);
        let m = n * h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let mu = ch.sum() / m as f64;
            mean[ci] = mu;
            var[ci] = ch.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.batch_norm_with(input, gamma, beta, &mean, inv_std, true);
        (v, BatchStats { mean, var, count: m })
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_with(input, gamma, beta, mean, inv_std, false)
    }

    fn batch_norm_with(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let x = self.value(input);
        let mut normalized = x.clone();
        for (ci, mut ch) in normalized.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, is) = (mean[ci], inv_std[ci]);
            ch.mapv_inplace(|v| (v - mu) * is);
        }
        let gm = self.data(gamma);
        let bt = self.data(beta);
        let mut out = normalized.clone();
        for (ci, mut ch) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (gm[ci], bt[ci]);
            ch.mapv_inplace(|v| v * g + b);
        }
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// 2x2 max pooling, stride 2. Height and width must be even.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let (n, c, h, w) = dims(self.value(input));
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::from_shape_vec((n, c, oh, ow), out).unwrap();
        self.push(value, Op::MaxPool2 { input, argmax })
    }

    /// 2x bilinear upsampling, half-pixel centers (no corner alignment).
    pub fn upsample2(&mut self, input: Var) -> Var {
        let (n, c, h, w) = dims(self.value(input));
        let (oh, ow) = (2 * h, 2 * w);
        let ys = bilinear_taps(h, oh);
        let xs = bilinear_taps(w, ow);
        let x = self.data(input);
        let mut out = vec![0.0; n * c * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, o)| {
            let src = &x[p * h * w..][..h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    o[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        });
        let value = Tensor::from_shape_vec((n, c, oh, ow), out).unwrap();
        self.push(value, Op::Upsample2(input))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (n, ca, h, w) = dims(va);
        let (nb, cb, hb, wb) = dims(vb);
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let mut out = Tensor::zeros((n, ca + cb, h, w));
        out.slice_mut(s![.., ..ca, .., ..]).assign(va);
        out.slice_mut(s![.., ca.., .., ..]).assign(vb);
        self.push(out, Op::Concat(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `input * scale` with `scale` shaped `(N, C, 1, 1)`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Var {
        let sc = self.value(scale);
        let (n, c, _, _) = dims(self.value(input));
        assert_eq!(sc.shape(), &[n, c, 1, 1]);
        let out = self.value(input) * sc;
        self.push(out, Op::ChannelScale { input, scale })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = dims(x);
        let hw = (h * w) as f64;
        let out = Tensor::from_shape_fn((n, c, 1, 1), |(ni, ci, _, _)| {
            x.slice(s![ni, ci, .., ..]).sum() / hw
        });
        self.push(out, Op::GlobalAvgPool(input))
    }

    /// Back-propagates `seed` (dL/d`output`) and returns the gradients of all
    /// leaves that `output` depends on.
    pub fn backward(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(contiguous(seed));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    groups,
                } => {
                    let (gi, gw, gb) = self.conv2d_backward(*input, *weight, bias.is_some(), *groups, &g);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *weight, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = dims(&g);
                    let m = (n * h * w) as f64;
                    let gm = self.data(*gamma);
                    let mut dgamma = Tensor::zeros((1, c, 1, 1));
                    let mut dbeta = Tensor::zeros((1, c, 1, 1));
                    let mut dx = Tensor::zeros((n, c, h, w));
                    for ci in 0..c {
                        let gc = g.index_axis(Axis(1), ci);
                        let xh = normalized.index_axis(Axis(1), ci);
                        let sum_g = gc.sum();
                        let sum_gx = (&gc * &xh).sum();
                        dgamma[[0, ci, 0, 0]] = sum_gx;
                        dbeta[[0, ci, 0, 0]] = sum_g;
                        let scale = gm[ci] * inv_std[ci];
                        let mut dc = dx.index_axis_mut(Axis(1), ci);
                        if *batch_stats {
                            // d/dx of gamma * (x - mean) / std with batch mean and std
                            ndarray::Zip::from(&mut dc).and(&gc).and(&xh).for_each(|d, &gv, &xv| {
                                *d = scale * (gv - sum_g / m - xv * sum_gx / m);
                            });
                        } else {
                            ndarray::Zip::from(&mut dc).and(&gc).for_each(|d, &gv| *d = scale * gv);
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(xv).for_each(|d, &v| {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *x, d);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut d = Tensor::zeros(self.value(*input).raw_dim());
                    let ds = d.as_slice_mut().unwrap();
                    for (gv, &idx) in g.iter().zip(argmax) {
                        ds[idx] += gv;
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::Upsample2(input) => {
                    let (n, c, h, w) = dims(self.value(*input));
                    let (oh, ow) = (2 * h, 2 * w);
                    let ys = bilinear_taps(h, oh);
                    let xs = bilinear_taps(w, ow);
                    let gs = g.as_slice().unwrap();
                    let mut d = vec![0.0; n * c * h * w];
                    d.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
                        let go = &gs[p * oh * ow..][..oh * ow];
                        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                                let v = go[oy * ow + ox];
                                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                                dst[y1 * w + x1] += v * ly * lx;
                            }
                        }
                    });
                    accumulate(&mut grads, *input, Tensor::from_shape_vec((n, c, h, w), d).unwrap());
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).shape()[1];
                    accumulate(&mut grads, *a, g.slice(s![.., ..ca, .., ..]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., ca.., .., ..]).to_owned());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::ChannelScale { input, scale } => {
                    let x = self.value(*input);
                    let sc = self.value(*scale);
                    let (n, c, _, _) = dims(x);
                    let dscale = Tensor::from_shape_fn((n, c, 1, 1), |(ni, ci, _, _)| {
                        (&g.slice(s![ni, ci, .., ..]) * &x.slice(s![ni, ci, .., ..])).sum()
                    });
                    accumulate(&mut grads, *input, &g * sc);
                    accumulate(&mut grads, *scale, dscale);
                }
                Op::GlobalAvgPool(input) => {
                    let shape = self.value(*input).raw_dim();
                    let hw = (shape[2] * shape[3]) as f64;
                    let d = Tensor::from_shape_fn(shape, |(ni, ci, _, _)| g[[ni, ci, 0, 0]] / hw);
                    accumulate(&mut grads, *input, d);
                }
            }
        }
        Gradients { grads }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        has_bias: bool,
        groups: usize,
        g: &Tensor,
    ) -> (Tensor, Tensor, Option<Tensor>) {
        let (n, cin, h, w) = dims(self.value(input));
        let (cout, cin_g, k, _) = dims(self.value(weight));
        let cout_g = cout / groups;
        let plane = h * w;
        let x = self.data(input);
        let wt = self.data(weight);
        let gs = g.as_slice().unwrap();

        let mut gin = vec![0.0; n * cin * plane];
        gin.par_chunks_mut(plane).enumerate().for_each(|(i, dst)| {
            let (ni, ic) = (i / cin, i % cin);
            let grp = ic / cin_g;
            let icl = ic % cin_g;
            for oc in grp * cout_g..(grp + 1) * cout_g {
                let go = &gs[(ni * cout + oc) * plane..][..plane];
                let wk = &wt[(oc * cin_g + icl) * k * k..][..k * k];
                conv_plane_transpose_acc(dst, go, wk, h, w, k);
            }
        });

        let mut gw = vec![0.0; cout * cin_g * k * k];
        gw.par_chunks_mut(cin_g * k * k).enumerate().for_each(|(oc, dst)| {
            let grp = oc / cout_g;
            for ni in 0..n {
                let go = &gs[(ni * cout + oc) * plane..][..plane];
                for icl in 0..cin_g {
                    let ic = grp * cin_g + icl;
                    let xin = &x[(ni * cin + ic) * plane..][..plane];
                    conv_plane_weight_acc(&mut dst[icl * k * k..][..k * k], go, xin, h, w, k);
                }
            }
        });

        let gb = has_bias.then(|| {
            Tensor::from_shape_fn((1, cout, 1, 1), |(_, oc, _, _)| {
                (0..n)
                    .map(|ni| gs[(ni * cout + oc) * plane..][..plane].iter().sum::<f64>())
                    .sum()
            })
        });
        (
            Tensor::from_shape_vec((n, cin, h, w), gin).unwrap(),
            Tensor::from_shape_vec((cout, cin_g, k, k), gw).unwrap(),
            gb,
        )
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(contiguous(g)),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Output rows `[lo, hi)` whose input row `o + d` lies inside `[0, n)`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// `out += x (*) kernel` for one plane pair (cross-correlation, zero padding).
fn conv_plane_acc(out: &mut [f64], x: &[f64], kernel: &[f64], h: usize, w: usize, k: usize) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - p;
        let (y_lo, y_hi) = valid_range(h, dy);
        for kx in 0..k {
            let wv = kernel[ky * k + kx];
            if wv == 0.0 {
                continue;
            }
            let dx = kx as isize - p;
            let (x_lo, x_hi) = valid_range(w, dx);
            for oy in y_lo..y_hi {
                let iy = (oy as isize + dy) as usize;
                let orow = &mut out[oy * w + x_lo..oy * w + x_hi];
                let irow = &x[iy * w + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                for (o, &i) in orow.iter_mut().zip(irow) {
                    *o += wv * i;
                }
            }
        }
    }
}

fn conv_plane_transpose_acc(dst: &mut [f64], g: &[f64], kernel: &[f64], h: usize, w: usize, k: usize) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - p;
        let (y_lo, y_hi) = valid_range(h, dy);
        for kx in 0..k {
            let wv = kernel[ky * k + kx];
            if wv == 0.0 {
                continue;
            }
            let dx = kx as isize - p;
            let (x_lo, x_hi) = valid_range(w, dx);
            for oy in y_lo..y_hi {
                let iy = (oy as isize + dy) as usize;
                let grow = &g[oy * w + x_lo..oy * w + x_hi];
                let drow = &mut dst[iy * w + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d += wv * gv;
                }
            }
        }
    }
}

fn conv_plane_weight_acc(dst: &mut [f64], g: &[f64], x: &[f64], h: usize, w: usize, k: usize) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - p;
        let (y_lo, y_hi) = valid_range(h, dy);
        for kx in 0..k {
            let dx = kx as isize - p;
            let (x_lo, x_hi) = valid_range(w, dx);
            let mut acc = 0.0;
            for oy in y_lo..y_hi {
                let iy = (oy as isize + dy) as usize;
                let grow = &g[oy * w + x_lo..oy * w + x_hi];
                let irow = &x[iy * w + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
            }
            dst[ky * k + kx] += acc;
        }
    }
}

/// Source taps `(i0, i1, frac)` for each output index of a 2x upsample.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar objective: sum(output * probe). Gradient seed is the probe.
    fn check_op(
        shapes: &[(usize, usize, usize, usize)],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor> = shapes.iter().map(|&s| random(s, &mut rng)).collect();
        let eval = |inputs: &[Tensor]| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let probe = random(g.value(out).dim(), &mut rng);
        let objective = |inputs: &[Tensor]| {
            let (g, _, out) = eval(inputs);
            (g.value(out) * &probe).sum()
        };
        let grads = g.backward(out, probe.clone());
        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("leaf gradient");
            for flat in 0..inputs[vi].len() {
                let mut plus = inputs.to_vec();
                plus[vi].as_slice_mut().unwrap()[flat] += h;
                let mut minus = inputs.to_vec();
                minus[vi].as_slice_mut().unwrap()[flat] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[flat];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {vi} elem {flat}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        check_op(&[(2, 3, 5, 4), (4, 3, 3, 3), (1, 4, 1, 1)], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1));
        check_op(&[(1, 4, 4, 5), (4, 1, 3, 3)], |g, v| g.conv2d(v[0], v[1], None, 4));
        check_op(&[(2, 3, 3, 3), (2, 3, 1, 1)], |g, v| g.conv2d(v[0], v[1], None, 1));
    }

    #[test]
    fn batch_norm_gradients() {
        check_op(&[(2, 3, 3, 2), (1, 3, 1, 1), (1, 3, 1, 1)], |g, v| {
            g.batch_norm_train(v[0], v[1], v[2], 1e-5).0
        });
        check_op(&[(2, 2, 3, 2), (1, 2, 1, 1), (1, 2, 1, 1)], |g, v| {
            g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
        });
    }

    #[test]
    fn pointwise_and_pooling_gradients() {
        check_op(&[(1, 2, 3, 3)], |g, v| g.silu(v[0]));
        check_op(&[(1, 2, 3, 3)], |g, v| g.sigmoid(v[0]));
        check_op(&[(2, 2, 4, 6)], |g, v| g.max_pool2(v[0]));
        check_op(&[(1, 2, 3, 2)], |g, v| g.upsample2(v[0]));
        check_op(&[(1, 2, 3, 3)], |g, v| g.global_avg_pool(v[0]));
    }

    #[test]
    fn combination_gradients() {
        check_op(&[(1, 2, 2, 3), (1, 1, 2, 3)], |g, v| g.concat(v[0], v[1]));
        check_op(&[(1, 2, 2, 3), (1, 2, 2, 3)], |g, v| g.add(v[0], v[1]));
        check_op(&[(2, 3, 2, 2), (2, 3, 1, 1)], |g, v| g.channel_scale(v[0], v[1]));
        // shared input used twice
        check_op(&[(1, 1, 2, 2)], |g, v| g.add(v[0], v[0]));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random((1, 2, 4, 5), &mut rng);
        let w = random((3, 2, 3, 3), &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
        let out = g.conv2d(xv, wv, None, 1);
        for oc in 0..3 {
            for oy in 0..4i64 {
                for ox in 0..5i64 {
                    let mut acc = 0.0;
                    for ic in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w[[oc, ic, ky as usize, kx as usize]]
                                        * x[[0, ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    let got = g.value(out)[[0, oc, oy as usize, ox as usize]];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_constant_and_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_elem((1, 1, 3, 2), 0.25));
        let y = g.upsample2(x);
        assert_eq!(g.value(y).shape(), &[1, 1, 6, 4]);
        assert!(g.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
