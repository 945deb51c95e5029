//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] then walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a leaf created
//! with `requires_grad = true`. Nodes that do not need gradients are skipped
//! entirely, which keeps frozen sub-networks cheap.

use std::sync::Arc;

use super::real::{gemm, Real};
use super::rng::Rng;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(F, F)> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(F, F)> },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    Dropout { x: Var, mask: Vec<F> },
    Upsample2x(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    TransposeLast2(Var),
    AddChannelBias { x: Var, bias: Var },
    TimestepLinear { x: Var, w: Var, b: Var },
    TemporalAgg { x: Var, w: Var, b: Var },
    BroadcastBatch(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Vec<F> },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub const NORM_EPS: f64 = 1e-5;

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sqrt_2_over_pi<F: Real>() -> F {
    F::of((2.0 / std::f64::consts::PI).sqrt())
}

const GELU_C: f64 = 0.044715;

fn gelu<F: Real>(x: F) -> F {
    let u = sqrt_2_over_pi::<F>() * (x + F::of(GELU_C) * x * x * x);
    F::of(0.5) * x * (F::ONE + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let k = sqrt_2_over_pi::<F>();
    let u = k * (x + F::of(GELU_C) * x * x * x);
    let t = u.tanh();
    F::of(0.5) * (F::ONE + t) + F::of(0.5) * x * (F::ONE - t * t) * k * (F::ONE + F::of(3.0 * GELU_C) * x * x)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

fn conv_out(extent: usize, k: usize, stride: usize) -> usize {
    (extent + 2 * (k / 2) - k) / stride + 1
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in `[0, w)`.
fn valid_cols(w: usize, wo: usize, kx: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `[c, h, w]` image into `[c*k*k, ho*wo]` columns (zero padding `k/2`).
fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, cols: &mut [F]) {
    let pad = k / 2;
    let (ho, wo) = (conv_out(h, k, stride), conv_out(w, k, stride));
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let (lo, hi) = valid_cols(w, wo, kx, pad, stride);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(F::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(F::ZERO);
                    line[hi..].fill(F::ZERO);
                    if stride == 1 {
                        let off = lo + kx - pad;
                        line[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            line[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Real>(cols: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, dx: &mut [F]) {
    let pad = k / 2;
    let (ho, wo) = (conv_out(h, k, stride), conv_out(w, k, stride));
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let (lo, hi) = valid_cols(w, wo, kx, pad, stride);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let off = lo + kx - pad;
                        line[off..off + hi - lo].iter_mut().zip(&s[lo..hi]).for_each(|(d, &v)| *d += v);
                    } else {
                        for ox in lo..hi {
                            line[ox * stride + kx - pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node sharing `value` with its owner (no copy).
    pub fn leaf(&mut self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("checked");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("checked");
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("checked");
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `x[..., in] · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear: weight must be 2-D");
        let (d_out, d_in) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), d_in, "linear: input width {xs:?} vs weight {ws:?}");
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![F::ZERO; rows * d_out];
        gemm(rows, d_in, d_out, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[d_out], "linear: bias");
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bias).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`; `ta`/`tb` mean the
    /// stored operand is the transpose of its logical value.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: {sa:?} x {sb:?}");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm: inner extents {sa:?} x {sb:?}");
        let batch = sa[0];
        let mut out = vec![F::ZERO; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                ta,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(Tensor::from_parts(vec![batch, m, n], out), Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// Square-kernel convolution over `[B, C, H, W]` with zero padding `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d: {xs:?} * {ws:?}");
        let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert!(ws[1] == ci && ws[3] == k && k % 2 == 1, "conv2d: kernel {ws:?} for input {xs:?}");
        assert!(stride >= 1);
        let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
        let ckk = ci * k * k;
        let direct = k == 1 && stride == 1;
        let mut cols = if direct { Vec::new() } else { vec![F::ZERO; ckk * ho * wo] };
        let mut out = vec![F::ZERO; batch * co * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..batch {
            let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let src: &[F] = if direct {
                xb
            } else {
                im2col(xb, ci, h, wd, k, stride, &mut cols);
                &cols
            };
            let ob = &mut out[bi * co * ho * wo..(bi + 1) * co * ho * wo];
            gemm(co, ckk, ho * wo, wv, false, src, false, ob, false);
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (c, plane) in ob.chunks_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_parts(vec![batch, co, ho, wo], out), Op::Conv2d { x, w, b, stride }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2, "group_norm: {xs:?}");
        let (batch, c) = (xs[0], xs[1]);
        assert!(c % groups == 0, "group_norm: {c} channels into {groups} groups");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let spatial: usize = xs[2..].iter().product();
        let cg = c / groups;
        let n = cg * spatial;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::ZERO; xv.len()];
        let mut stats = Vec::with_capacity(batch * groups);
        for b in 0..batch {
            for g in 0..groups {
                let off = (b * c + g * cg) * spatial;
                let chunk = &xv[off..off + n];
                let mean = chunk.iter().copied().sum::<F>() / F::of(n as f64);
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / F::of(n as f64);
                let rstd = F::ONE / (var + F::of(NORM_EPS)).sqrt();
                stats.push((mean, rstd));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let o = off + cc * spatial;
                    for i in 0..spatial {
                        out[o + i] = (xv[o + i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
            }
        }
        self.push(Tensor::from_parts(xs, out), Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    /// Normalizes over the last axis. A constant row normalizes to zero, so
    /// the output is the shift parameter.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let h = *xs.last().unwrap();
        assert_eq!(self.shape(gamma), &[h]);
        assert_eq!(self.shape(beta), &[h]);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::ZERO; xv.len()];
        let mut stats = Vec::with_capacity(xv.len() / h);
        for (row, orow) in xv.chunks(h).zip(out.chunks_mut(h)) {
            let mean = row.iter().copied().sum::<F>() / F::of(h as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / F::of(h as f64);
            let rstd = F::ONE / (var + F::of(NORM_EPS)).sqrt();
            stats.push((mean, rstd));
            for i in 0..h {
                orow[i] = (row[i] - mean) * rstd * gv[i] + bv[i];
            }
        }
        self.push(Tensor::from_parts(xs, out), Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), |a, b| a.max(b));
            let mut s = F::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        self.push(Tensor::from_parts(xs, out), Op::Softmax(x), &[x])
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate {p}");
        if p == 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).numel()).map(|_| if rng.uniform() < p { F::ZERO } else { keep }).collect();
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Nearest-neighbour 2× up-sampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![F::ZERO; bc * 4 * h * w];
        for p in 0..bc {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for (y, row) in dst.chunks_mut(2 * w).enumerate() {
                let s = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (pair, &v) in row.chunks_mut(2).zip(s) {
                    pair[0] = v;
                    pair[1] = v;
                }
            }
        }
        self.push(Tensor::from_parts(vec![xs[0], xs[1], 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len());
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat: {s:?} vs {first:?} on axis {axis}"
            );
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = (*self.nodes[x.0].value).clone().reshape(shape).expect("reshape extent");
        self.push(t, Op::Reshape(x), &[x])
    }

    /// `[B, m, n] → [B, n, m]`.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let out = transpose3(self.value(x).data(), xs[0], xs[1], xs[2]);
        self.push(Tensor::from_parts(vec![xs[0], xs[2], xs[1]], out), Op::TransposeLast2(x), &[x])
    }

    /// Adds a per-(item, channel) value to every spatial position of `[B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(bias), &xs[..2], "add_channel_bias");
        let spatial: usize = xs[2..].iter().product();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (plane, &b) in out.chunks_mut(spatial).zip(&bv) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        self.push(Tensor::from_parts(xs, out), Op::AddChannelBias { x, bias }, &[x, bias])
    }

    /// Applies a distinct affine map to every time sample:
    /// `x: [B, T, in]`, `w: [T, out, in]`, `b: [T, out]`.
    pub fn timestep_linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 3 && ws.len() == 3 && ws[0] == xs[1] && ws[2] == xs[2], "timestep_linear: {xs:?} {ws:?}");
        assert_eq!(self.shape(b), &ws[..2]);
        let (batch, t, d_in, d_out) = (xs[0], xs[1], xs[2], ws[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![F::ZERO; batch * t * d_out];
        let mut xin = vec![F::ZERO; batch * d_in];
        let mut yout = vec![F::ZERO; batch * d_out];
        for tau in 0..t {
            for bi in 0..batch {
                xin[bi * d_in..(bi + 1) * d_in].copy_from_slice(&xv[(bi * t + tau) * d_in..(bi * t + tau + 1) * d_in]);
            }
            gemm(
                batch,
                d_in,
                d_out,
                &xin,
                false,
                &wv[tau * d_out * d_in..(tau + 1) * d_out * d_in],
                true,
                &mut yout,
                false,
            );
            for bi in 0..batch {
                let dst = &mut out[(bi * t + tau) * d_out..(bi * t + tau + 1) * d_out];
                for j in 0..d_out {
                    dst[j] = yout[bi * d_out + j] + bv[tau * d_out + j];
                }
            }
        }
        self.push(Tensor::from_parts(vec![batch, t, d_out], out), Op::TimestepLinear { x, w, b }, &[x, w, b])
    }

    /// Merges the time axis with one weight per sample shared across
    /// channels: `x: [B, T, H]`, `w: [T]`, `b: [1]` → `[B, H]`.
    pub fn temporal_agg(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (batch, t, h) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.shape(w), &[t], "temporal_agg: weights");
        assert_eq!(self.shape(b), &[1], "temporal_agg: bias");
        let (xv, wv, b0) = (self.value(x).data(), self.value(w).data(), self.value(b).data()[0]);
        let mut out = vec![b0; batch * h];
        for bi in 0..batch {
            for tau in 0..t {
                let src = &xv[(bi * t + tau) * h..(bi * t + tau + 1) * h];
                let dst = &mut out[bi * h..(bi + 1) * h];
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o += wv[tau] * v);
            }
        }
        self.push(Tensor::from_parts(vec![batch, h], out), Op::TemporalAgg { x, w, b }, &[x, w, b])
    }

    /// Repeats `x` along a new leading axis of length `batch`.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend(xs);
        self.push(Tensor::from_parts(shape, out), Op::BroadcastBatch(x), &[x])
    }

    /// Mean squared error, reduced to a `[1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mse");
        let n = self.value(a).numel();
        let s: F = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / F::of(n as f64)), Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `Σ x ⊙ weights` for a constant weight pattern.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<F>) -> Var {
        assert_eq!(weights.len(), self.value(x).numel(), "weighted_sum");
        let s = self.value(x).data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), F::ONE));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        let out_val = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_with(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
                self.accum_with(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
            }
            Op::Sub(a, b) => {
                self.accum_with(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
                self.accum_with(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                self.accum_with(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum_with(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * *s));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (d_out, d_in) = (ws[0], ws[1]);
                let rows = gd.len() / d_out;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accum_with(grads, *x, |d| gemm(rows, d_out, d_in, gd, false, wv, false, d, true));
                self.accum_with(grads, *w, |d| gemm(d_out, rows, d_in, gd, true, xv, false, d, true));
                if let Some(b) = b {
                    self.accum_with(grads, *b, |d| {
                        for row in gd.chunks(d_out) {
                            d.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                        }
                    });
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum_with(grads, *a, |d| {
                    for i in 0..batch {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let bs = &bv[i * k * n..(i + 1) * k * n];
                        let da = &mut d[i * m * k..(i + 1) * m * k];
                        if !ta {
                            gemm(m, n, k, dc, false, bs, !tb, da, true);
                        } else {
                            gemm(k, n, m, bs, tb, dc, true, da, true);
                        }
                    }
                });
                self.accum_with(grads, *b, |d| {
                    for i in 0..batch {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let as_ = &av[i * m * k..(i + 1) * m * k];
                        let db = &mut d[i * k * n..(i + 1) * k * n];
                        if !tb {
                            gemm(k, m, n, as_, !ta, dc, false, db, true);
                        } else {
                            gemm(n, m, k, dc, true, as_, ta, db, true);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride } => {
                let stride = *stride;
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
                let ckk = ci * k * k;
                let hw = ho * wo;
                let direct = k == 1 && stride == 1;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(b) = b {
                    self.accum_with(grads, *b, |d| {
                        for bi in 0..batch {
                            for c in 0..co {
                                let off = (bi * co + c) * hw;
                                d[c] += gd[off..off + hw].iter().copied().sum::<F>();
                            }
                        }
                    });
                }
                if self.wants(*w) {
                    let mut cols = if direct { Vec::new() } else { vec![F::ZERO; ckk * hw] };
                    self.accum_with(grads, *w, |d| {
                        for bi in 0..batch {
                            let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                            let src: &[F] = if direct {
                                xb
                            } else {
                                im2col(xb, ci, h, wd, k, stride, &mut cols);
                                &cols
                            };
                            gemm(co, hw, ckk, &gd[bi * co * hw..(bi + 1) * co * hw], false, src, true, d, true);
                        }
                    });
                }
                if self.wants(*x) {
                    let mut dcols = vec![F::ZERO; ckk * hw];
                    self.accum_with(grads, *x, |d| {
                        for bi in 0..batch {
                            let dx = &mut d[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                            let go = &gd[bi * co * hw..(bi + 1) * co * hw];
                            if direct {
                                gemm(ckk, co, hw, wv, true, go, false, dx, true);
                            } else {
                                gemm(ckk, co, hw, wv, true, go, false, &mut dcols, false);
                                col2im_add(&dcols, ci, h, wd, k, stride, dx);
                            }
                        }
                    });
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xs = self.shape(*x);
                let (batch, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let cg = c / groups;
                let n = cg * spatial;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let xhat = |o: usize, (mean, rstd): (F, F)| (xv[o] - mean) * rstd;
                self.accum_with(grads, *beta, |d| {
                    for (plane, i) in gd.chunks(spatial).zip(0..) {
                        d[i % c] += plane.iter().copied().sum::<F>();
                    }
                });
                self.accum_with(grads, *gamma, |d| {
                    for b in 0..batch {
                        for ch in 0..c {
                            let st = stats[b * groups + ch / cg];
                            let off = (b * c + ch) * spatial;
                            d[ch] += (0..spatial).map(|i| gd[off + i] * xhat(off + i, st)).sum::<F>();
                        }
                    }
                });
                self.accum_with(grads, *x, |d| {
                    for b in 0..batch {
                        for g in 0..*groups {
                            let st = stats[b * groups + g];
                            let off = (b * c + g * cg) * spatial;
                            let mut s1 = F::ZERO;
                            let mut s2 = F::ZERO;
                            for i in 0..n {
                                let dxh = gd[off + i] * gv[g * cg + i / spatial];
                                s1 += dxh;
                                s2 += dxh * xhat(off + i, st);
                            }
                            let inv_n = F::ONE / F::of(n as f64);
                            for i in 0..n {
                                let dxh = gd[off + i] * gv[g * cg + i / spatial];
                                d[off + i] += st.1 * (dxh - inv_n * s1 - xhat(off + i, st) * inv_n * s2);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let h = *self.shape(*x).last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                self.accum_with(grads, *beta, |d| {
                    for row in gd.chunks(h) {
                        d.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                });
                self.accum_with(grads, *gamma, |d| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for i in 0..h {
                            d[i] += gd[r * h + i] * (xv[r * h + i] - mean) * rstd;
                        }
                    }
                });
                self.accum_with(grads, *x, |d| {
                    let inv_h = F::ONE / F::of(h as f64);
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let o = r * h;
                        let mut s1 = F::ZERO;
                        let mut s2 = F::ZERO;
                        for i in 0..h {
                            let dxh = gd[o + i] * gv[i];
                            s1 += dxh;
                            s2 += dxh * (xv[o + i] - mean) * rstd;
                        }
                        for i in 0..h {
                            let dxh = gd[o + i] * gv[i];
                            let xh = (xv[o + i] - mean) * rstd;
                            d[o + i] += rstd * (dxh - inv_h * s1 - xh * inv_h * s2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accum_with(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accum_with(grads, *x, |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(xv[i]);
                        d[i] += gd[i] * s * (F::ONE + xv[i] * (F::ONE - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *out_val.shape().last().unwrap();
                let y = out_val.data();
                self.accum_with(grads, *x, |d| {
                    for ((yr, gr), dr) in y.chunks(n).zip(gd.chunks(n)).zip(d.chunks_mut(n)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..n {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accum_with(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * mask[i];
                    }
                });
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                self.accum_with(grads, *x, |d| {
                    for p in 0..bc {
                        let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut d[p * h * w..(p + 1) * h * w];
                        for (y, row) in src.chunks(2 * w).enumerate() {
                            let d = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
                            for (o, pair) in d.iter_mut().zip(row.chunks(2)) {
                                *o += pair[0] + pair[1];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = out_val.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    self.accum_with(grads, p, |d| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + len];
                            d[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                self.accum_with(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
            }
            Op::TransposeLast2(x) => {
                let s = out_val.shape();
                let back = transpose3(gd, s[0], s[1], s[2]);
                self.accum_with(grads, *x, |d| d.iter_mut().zip(&back).for_each(|(o, &v)| *o += v));
            }
            Op::AddChannelBias { x, bias } => {
                let spatial: usize = out_val.shape()[2..].iter().product();
                self.accum_with(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v));
                self.accum_with(grads, *bias, |d| {
                    for (o, plane) in d.iter_mut().zip(gd.chunks(spatial)) {
                        *o += plane.iter().copied().sum::<F>();
                    }
                });
            }
            Op::TimestepLinear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, t, d_in) = (xs[0], xs[1], xs[2]);
                let d_out = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gather = |src: &[F], width: usize, tau: usize| {
                    let mut buf = vec![F::ZERO; batch * width];
                    for bi in 0..batch {
                        buf[bi * width..(bi + 1) * width]
                            .copy_from_slice(&src[(bi * t + tau) * width..(bi * t + tau + 1) * width]);
                    }
                    buf
                };
                self.accum_with(grads, *b, |d| {
                    for bi in 0..batch {
                        for tau in 0..t {
                            let src = &gd[(bi * t + tau) * d_out..(bi * t + tau + 1) * d_out];
                            d[tau * d_out..(tau + 1) * d_out].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                        }
                    }
                });
                self.accum_with(grads, *w, |d| {
                    for tau in 0..t {
                        let go = gather(gd, d_out, tau);
                        let xi = gather(xv, d_in, tau);
                        gemm(
                            d_out,
                            batch,
                            d_in,
                            &go,
                            true,
                            &xi,
                            false,
                            &mut d[tau * d_out * d_in..(tau + 1) * d_out * d_in],
                            true,
                        );
                    }
                });
                self.accum_with(grads, *x, |d| {
                    let mut dx = vec![F::ZERO; batch * d_in];
                    for tau in 0..t {
                        let go = gather(gd, d_out, tau);
                        gemm(
                            batch,
                            d_out,
                            d_in,
                            &go,
                            false,
                            &wv[tau * d_out * d_in..(tau + 1) * d_out * d_in],
                            false,
                            &mut dx,
                            false,
                        );
                        for bi in 0..batch {
                            let dst = &mut d[(bi * t + tau) * d_in..(bi * t + tau + 1) * d_in];
                            dst.iter_mut().zip(&dx[bi * d_in..(bi + 1) * d_in]).for_each(|(o, &v)| *o += v);
                        }
                    }
                });
            }
            Op::TemporalAgg { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, t, h) = (xs[0], xs[1], xs[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accum_with(grads, *b, |d| d[0] += gd.iter().copied().sum::<F>());
                self.accum_with(grads, *w, |d| {
                    for bi in 0..batch {
                        for tau in 0..t {
                            let src = &xv[(bi * t + tau) * h..(bi * t + tau + 1) * h];
                            d[tau] += src.iter().zip(&gd[bi * h..(bi + 1) * h]).map(|(&a, &g)| a * g).sum::<F>();
                        }
                    }
                });
                self.accum_with(grads, *x, |d| {
                    for bi in 0..batch {
                        for tau in 0..t {
                            let dst = &mut d[(bi * t + tau) * h..(bi * t + tau + 1) * h];
                            dst.iter_mut().zip(&gd[bi * h..(bi + 1) * h]).for_each(|(o, &g)| *o += wv[tau] * g);
                        }
                    }
                });
            }
            Op::BroadcastBatch(x) => {
                self.accum_with(grads, *x, |d| {
                    for chunk in gd.chunks(d.len()) {
                        d.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] * F::of(2.0 / av.len() as f64);
                self.accum_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += k * (av[i] - bv[i]);
                    }
                });
                self.accum_with(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= k * (av[i] - bv[i]);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accum_with(grads, *x, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(x) => {
                let g0 = gd[0] / F::of(self.value(*x).numel() as f64);
                self.accum_with(grads, *x, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            Op::WeightedSum { x, weights } => {
                let g0 = gd[0];
                self.accum_with(grads, *x, |d| d.iter_mut().zip(weights).for_each(|(o, &w)| *o += g0 * w));
            }
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }
}

fn transpose3<F: Real>(src: &[F], batch: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; src.len()];
    for b in 0..batch {
        let s = &src[b * m * n..(b + 1) * m * n];
        let d = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Arc<Tensor<f64>> {
        Arc::new(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn linear_forward_and_grads() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let w = g.leaf(t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]), true);
        let y = g.linear(x, w, None);
        assert_eq!(g.value(y).data(), &[1.0, 3.0]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 1.0]);
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, -5.0, 0.0, 40.0]).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn frozen_branches_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), false);
        let b = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let c = g.mul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let y = g.conv2d(x, w, None, 1);
        assert_eq!(g.value(y).data(), g.value(x).data());
        let y2 = g.conv2d(x, w, None, 2);
        assert_eq!(g.value(y2).data(), &[0.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f32>::full(&[2, 3, 4, 4], 1.0));
        let b = g.constant(Tensor::<f32>::full(&[2, 5, 4, 4], 2.0));
        let c = g.concat(&[a, b], 1);
        assert_eq!(g.shape(c), &[2, 8, 4, 4]);
        let u = g.upsample2x(c);
        assert_eq!(g.shape(u), &[2, 8, 8, 8]);
        assert_eq!(g.value(c).data()[3 * 16], 2.0);
    }
}
