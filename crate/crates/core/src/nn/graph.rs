//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is added, and [`Graph::backward`] walks the tape in reverse to
//! accumulate vector-Jacobian products. Parameters enter the tape through
//! [`Graph::param`] and their gradients are collected into a
//! [`Gradients`] aligned with the originating [`ParamStore`].

use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{structural, Result};

/// Node handle on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Add(Var, Var),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    ToTokens(Var),
    FromTokens(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SoftmaxLast(Var),
    Scale(Var, T),
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward pass: one optional gradient per tape node.
#[derive(Debug)]
pub struct GradTape<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> GradTape<T> {
    /// Gradient flowing into `v`, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Collects parameter gradients; parameters absent from the tape get zeros.
    pub fn into_gradients(mut self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(store);
        for (id, var) in self.params {
            if let Some(g) = self.grads[var.0].take() {
                *out.get_mut(id) = g;
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Spatial layout helper for convolution.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        let hw_out = ho * wo;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *out = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        let hw_out = ho * wo;
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &col[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Takes ownership of a node's value, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 {
            return Err(structural!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(structural!("conv bias must have shape [{o}]"));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(structural!("conv kernel {k} larger than padded input {h}x{wd}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = c * k * k;
        let hw_out = ho * wo;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); ckk * hw_out]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let od = out.data_mut();
            for s in 0..n {
                let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let cols: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    geom.im2col(xs, &mut col);
                    &col
                };
                let dst = &mut od[s * o * hw_out..(s + 1) * o * hw_out];
                if let Some(bv) = bv {
                    for (oc, chunk) in dst.chunks_mut(hw_out).enumerate() {
                        chunk.fill(bv[oc]);
                    }
                }
                let beta = if bv.is_some() { T::one() } else { T::zero() };
                T::gemm(
                    o,
                    ckk,
                    hw_out,
                    T::one(),
                    wv,
                    ckk as isize,
                    1,
                    cols,
                    hw_out as isize,
                    1,
                    beta,
                    dst,
                    hw_out as isize,
                    1,
                );
            }
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// `y = x W^T + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let fin = *xs.last().ok_or_else(|| structural!("linear on a scalar"))?;
        if ws.len() != 2 || ws[1] != fin {
            return Err(structural!("linear weight {ws:?} incompatible with input {xs:?}"));
        }
        let fout = ws[0];
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return Err(structural!("linear bias must have shape [{fout}]"));
            }
        }
        let m = self.value(x).numel() / fin;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = fout;
        let mut out = Tensor::zeros(&out_shape);
        let beta = if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(
            m,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            beta,
            out.data_mut(),
            fout as isize,
            1,
        );
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Group normalization over `[N, C, ...]`, statistics per (sample, group).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(structural!("group norm needs [N, C, ...], got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(structural!("{c} channels not divisible into {groups} groups"));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(structural!("group norm affine params must have shape [{c}]"));
        }
        let spatial: usize = shape[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(&shape);
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let od = out.data_mut();
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * cpg) * spatial;
                let seg = &xv[start..start + m];
                let mean = seg.iter().copied().sum::<T>() / T::lit(m as f64);
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
                    / T::lit(m as f64);
                let rstd = T::one() / (var + T::lit(EPS)).sqrt();
                for cl in 0..cpg {
                    let ch = g * cpg + cl;
                    let off = start + cl * spatial;
                    for i in 0..spatial {
                        od[off + i] = (xv[off + i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a per-(sample, channel) vector `[N, C]` to `[N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || self.value(bias).shape() != &shape[..2] {
            return Err(structural!(
                "channel bias {:?} incompatible with {:?}",
                self.value(bias).shape(),
                shape
            ));
        }
        let spatial: usize = shape[2..].iter().product();
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for (chunk, &b) in out.data_mut().chunks_mut(spatial).zip(bv) {
            for v in chunk {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddChannelBias { x, bias }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(structural!(
                "cannot concat {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(self.value(a).item(s));
            data.extend_from_slice(self.value(b).item(s));
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b)))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let xv = self.value(x).data();
        let od = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x(x)))
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = transpose_last2(self.value(x).data(), n, c, h * w);
        let out = Tensor::new(&[n, h * w, c], out)?;
        Ok(self.push(out, Op::ToTokens(x)))
    }

    /// `[N, H*W, C] -> [N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(structural!("cannot fold tokens {shape:?} into {h}x{w}"));
        }
        let (n, c) = (shape[0], shape[2]);
        let out = transpose_last2(self.value(x).data(), n, h * w, c);
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::FromTokens(x)))
    }

    /// Batched matmul `[B, M, K] x [B, K, P]`, or `[B, M, K] x [B, P, K]^T`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(structural!("bmm shapes {sa:?} x {sb:?}"));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(structural!("bmm inner dims {sa:?} x {sb:?}"));
        }
        let mut out = Tensor::zeros(&[bs, m, p]);
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (p as isize, 1) };
        for i in 0..bs {
            T::gemm(
                m,
                k,
                p,
                T::one(),
                self.value(a).item(i),
                k as isize,
                1,
                self.value(b).item(i),
                rsb,
                csb,
                T::zero(),
                &mut out.data_mut()[i * m * p..(i + 1) * m * p],
                p as isize,
                1,
            );
        }
        Ok(self.push(out, Op::Bmm { a, b, trans_b }))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxLast(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Mean squared error against a constant target; returns a 1-element node.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(structural!(
                "mse shapes {:?} vs {:?}",
                self.value(pred).shape(),
                target.shape()
            ));
        }
        let n = T::lit(target.numel() as f64);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::full(&[1], loss), Op::Mse { pred, target }))
    }

    /// Row lookup into `table: [V, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.value(table).shape().to_vec();
        if shape.len() != 2 {
            return Err(structural!("embedding table must be 2-d, got {shape:?}"));
        }
        let (v, d) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(structural!("embedding index {i} out of range {v}"));
            }
            data.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[indices.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::full(&[1], s), Op::Sum(x))
    }

    /// Backward pass from a scalar node with unit seed.
    pub fn backward(&self, out: Var) -> Result<GradTape<T>> {
        let v = self.value(out);
        if v.numel() != 1 {
            return Err(structural!(
                "backward needs a scalar output, got shape {:?}",
                v.shape()
            ));
        }
        self.backward_with(out, Tensor::full(v.shape(), T::one()))
    }

    /// Backward pass with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<GradTape<T>> {
        if seed.shape() != self.value(out).shape() {
            return Err(structural!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(out).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(GradTape { grads, params })
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4().expect("checked in forward");
                let (o, _, k, _) = wv.dims4().expect("checked in forward");
                let (_, _, ho, wo) = y.dims4().expect("4-d output");
                let geom = ConvGeom {
                    c,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *pad,
                    ho,
                    wo,
                };
                let ckk = c * k * k;
                let hw_out = ho * wo;
                let mut dw = Tensor::zeros(wv.shape());
                let mut dx = Tensor::zeros(xv.shape());
                let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * hw_out }];
                let mut dcol = vec![T::zero(); ckk * hw_out];
                for s in 0..n {
                    let gys = &gy.data()[s * o * hw_out..(s + 1) * o * hw_out];
                    let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
                    let cols: &[T] = if geom.is_pointwise() {
                        xs
                    } else {
                        geom.im2col(xs, &mut col);
                        &col
                    };
                    // dW += dY * col^T
                    T::gemm(
                        o,
                        hw_out,
                        ckk,
                        T::one(),
                        gys,
                        hw_out as isize,
                        1,
                        cols,
                        1,
                        hw_out as isize,
                        T::one(),
                        dw.data_mut(),
                        ckk as isize,
                        1,
                    );
                    // dcol = W^T * dY
                    T::gemm(
                        ckk,
                        o,
                        hw_out,
                        T::one(),
                        wv.data(),
                        1,
                        ckk as isize,
                        gys,
                        hw_out as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        hw_out as isize,
                        1,
                    );
                    let dxs = &mut dx.data_mut()[s * c * h * wd..(s + 1) * c * h * wd];
                    if geom.is_pointwise() {
                        dxs.copy_from_slice(&dcol);
                    } else {
                        geom.col2im(&dcol, dxs);
                    }
                }
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[o]);
                    for s in 0..n {
                        for oc in 0..o {
                            let off = (s * o + oc) * hw_out;
                            db.data_mut()[oc] +=
                                gy.data()[off..off + hw_out].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, *b, db);
                }
                accumulate(grads, *w, dw);
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (fout, fin) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / fin;
                let mut dx = Tensor::zeros(xv.shape());
                T::gemm(
                    m,
                    fout,
                    fin,
                    T::one(),
                    gy.data(),
                    fout as isize,
                    1,
                    wv.data(),
                    fin as isize,
                    1,
                    T::zero(),
                    dx.data_mut(),
                    fin as isize,
                    1,
                );
                let mut dw = Tensor::zeros(wv.shape());
                T::gemm(
                    fout,
                    m,
                    fin,
                    T::one(),
                    gy.data(),
                    1,
                    fout as isize,
                    xv.data(),
                    fin as isize,
                    1,
                    T::zero(),
                    dw.data_mut(),
                    fin as isize,
                    1,
                );
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[fout]);
                    for row in gy.data().chunks(fout) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
                accumulate(grads, *w, dw);
                accumulate(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let shape = xv.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let cpg = c / groups;
                let m = T::lit((cpg * spatial) as f64);
                let mut dx = Tensor::zeros(shape);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for s in 0..n {
                    for g in 0..*groups {
                        let gi = s * groups + g;
                        let (mu, rs) = (mean[gi], rstd[gi]);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let off = (s * c + ch) * spatial;
                            for i in off..off + spatial {
                                let xhat = (xv.data()[i] - mu) * rs;
                                let dyv = gy.data()[i];
                                dgamma.data_mut()[ch] += dyv * xhat;
                                dbeta.data_mut()[ch] += dyv;
                                let dxhat = dyv * gv[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let mean_dxhat = sum_dxhat / m;
                        let mean_dxhat_xhat = sum_dxhat_xhat / m;
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let off = (s * c + ch) * spatial;
                            for i in off..off + spatial {
                                let xhat = (xv.data()[i] - mu) * rs;
                                let dxhat = gy.data()[i] * gv[ch];
                                dx.data_mut()[i] =
                                    rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
                accumulate(grads, *x, dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dx = xv
                    .zip_map(gy, |v, g| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .expect("same shape");
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::AddChannelBias { x, bias } => {
                let shape = gy.shape();
                let spatial: usize = shape[2..].iter().product();
                let mut db = Tensor::zeros(&shape[..2]);
                for (d, chunk) in db.data_mut().iter_mut().zip(gy.data().chunks(spatial)) {
                    *d = chunk.iter().copied().sum::<T>();
                }
                accumulate(grads, *bias, db);
                accumulate(grads, *x, gy.clone());
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("4-d");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let item = gy.item(s);
                    da.extend_from_slice(&item[..ca * hw]);
                    db.extend_from_slice(&item[ca * hw..]);
                }
                accumulate(grads, *a, Tensor::new(&[n, ca, h, w], da).expect("sized"));
                accumulate(grads, *b, Tensor::new(&[n, cb, h, w], db).expect("sized"));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-d");
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                for p in 0..n * c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dd[p * h * w + (yy / 2) * w + xx / 2] +=
                                gy.data()[p * 4 * h * w + yy * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ToTokens(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-d");
                let d = transpose_last2(gy.data(), n, h * w, c);
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], d).expect("sized"));
            }
            Op::FromTokens(x) => {
                let shape = self.value(*x).shape().to_vec();
                let d = transpose_last2(gy.data(), shape[0], shape[2], shape[1]);
                accumulate(grads, *x, Tensor::new(&shape, d).expect("sized"));
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let p = gy.shape()[2];
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for i in 0..bs {
                    let g = &gy.data()[i * m * p..(i + 1) * m * p];
                    // dA = dY * B^T  ([M,P] x [P,K])
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, p as isize) };
                    T::gemm(
                        m,
                        p,
                        k,
                        T::one(),
                        g,
                        p as isize,
                        1,
                        bv.item(i),
                        rsb,
                        csb,
                        T::zero(),
                        &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                    );
                    let dbi = &mut db.data_mut()[i * k * p..(i + 1) * k * p];
                    if *trans_b {
                        // dB' = dY^T * A  ([P,M] x [M,K])
                        T::gemm(
                            p,
                            m,
                            k,
                            T::one(),
                            g,
                            1,
                            p as isize,
                            av.item(i),
                            k as isize,
                            1,
                            T::zero(),
                            dbi,
                            k as isize,
                            1,
                        );
                    } else {
                        // dB = A^T * dY  ([K,M] x [M,P])
                        T::gemm(
                            k,
                            m,
                            p,
                            T::one(),
                            av.item(i),
                            1,
                            k as isize,
                            g,
                            p as isize,
                            1,
                            T::zero(),
                            dbi,
                            p as isize,
                            1,
                        );
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SoftmaxLast(x) => {
                let d = *y.shape().last().unwrap_or(&1);
                let mut dx = Tensor::zeros(y.shape());
                for ((dxr, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(gy.data().chunks(d))
                {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, gy.map(|g| g * s));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let k = gy.data()[0] * T::lit(2.0) / T::lit(target.numel() as f64);
                let dp = pv.zip_map(target, |p, t| k * (p - t)).expect("same shape");
                accumulate(grads, *pred, dp);
            }
            Op::Embedding { table, indices } => {
                let shape = self.value(*table).shape();
                let d = shape[1];
                let mut dt = Tensor::zeros(shape);
                for (row, &i) in gy.data().chunks(d).zip(indices) {
                    for (o, &g) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *o += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
        }
    }
}

/// Per-batch transpose of `[N, R, C]` into `[N, C, R]`.
fn transpose_last2<T: Scalar>(src: &[T], n: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        let base = s * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = src[base + r * cols + c];
            }
        }
    }
    out
}
