//! Tensor-level reverse-mode differentiation.
//!
//! Operations append a node holding their output value (and whatever the
//! backward pass needs) to a [`Tape`]. [`Tape::backward`] walks the nodes
//! in reverse, accumulating vector-Jacobian products.
//!
//! Activations use a channel-first `(C, T, H, W)` layout. Every kernel
//! keeps its innermost loop over a contiguous run of memory.

use crate::tensor::{Real, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Param(usize),
    /// Same-padded convolution with odd kernel `(kt, kh, kw)`.
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// Per-position channel mixing, `w` is `(C_out, C_in)`.
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// Normalization over the channel axis at every position.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        x: NodeId,
        scale: T,
    },
    /// Multi-head self-attention along T, independently per spatial site.
    TemporalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        /// `(heads, T, T, S)` post-softmax weights.
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Copy>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "activation must be (C,T,H,W), got {s:?}");
    (s[0], s[1], s[2], s[3])
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + alpha * x;
    }
}

/// Eight interleaved partial sums so the reduction vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Valid output range along one axis for tap offset `off`.
#[inline]
fn span(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// A leaf whose gradient is reported under parameter index `index`.
    pub fn param(&mut self, index: usize, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param(index))
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, tn, hn, wn) = dims4(xv);
        let ws = wv.shape();
        assert_eq!(ws.len(), 5, "conv weight must be (Co,Ci,kt,kh,kw)");
        assert_eq!(ws[1], ci, "conv input channels");
        let co = ws[0];
        let k = [ws[2], ws[3], ws[4]];
        let mut out = vec![T::zero(); co * tn * hn * wn];
        let bias = self.value(b).data();
        let plane = hn * wn;
        let vol = tn * plane;
        for o in 0..co {
            let out_o = &mut out[o * vol..(o + 1) * vol];
            out_o.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..ci {
                let x_i = &xv.data()[i * vol..(i + 1) * vol];
                for_each_tap(k, tn, hn, wn, |tap, t, ts, h, hs, (lo, hi), off| {
                    let wval = wv.data()[(o * ci + i) * k[0] * k[1] * k[2] + tap];
                    let orow = &mut out_o[t * plane + h * wn + lo..t * plane + h * wn + hi];
                    let base = ts * plane + hs * wn;
                    let xrow = &x_i
                        [(base as isize + lo as isize + off) as usize..(base as isize + hi as isize + off) as usize];
                    axpy(wval, xrow, orow);
                });
            }
        }
        let value = Tensor::from_vec(&[co, tn, hn, wn], out).unwrap();
        self.push(value, Op::Conv { x, w, b })
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let (ci, tn, hn, wn) = dims4(xv);
        let wv = self.value(w);
        assert_eq!(wv.shape()[1], ci, "linear input channels");
        let co = wv.shape()[0];
        let p = tn * hn * wn;
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); co * p];
        for o in 0..co {
            let row = &mut out[o * p..(o + 1) * p];
            if let Some(bias) = bias {
                row.iter_mut().for_each(|v| *v = bias[o]);
            }
            for i in 0..ci {
                axpy(wv.data()[o * ci + i], &xv.data()[i * p..(i + 1) * p], row);
            }
        }
        let value = Tensor::from_vec(&[co, tn, hn, wn], out).unwrap();
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, tn, hn, wn) = dims4(xv);
        let p = tn * hn * wn;
        let inv_c = T::lit(1.0 / c as f64);
        let mut mean = vec![T::zero(); p];
        for ch in 0..c {
            axpy(T::one(), &xv.data()[ch * p..(ch + 1) * p], &mut mean);
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_c);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            for ((v, &x), &m) in var.iter_mut().zip(&xv.data()[ch * p..(ch + 1) * p]).zip(&mean) {
                let d = x - m;
                *v = *v + d * d;
            }
        }
        let eps = T::lit(LN_EPS);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v * inv_c + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); c * p];
        let mut out = vec![T::zero(); c * p];
        for ch in 0..c {
            let src = &xv.data()[ch * p..(ch + 1) * p];
            let xh = &mut xhat[ch * p..(ch + 1) * p];
            let o = &mut out[ch * p..(ch + 1) * p];
            for j in 0..p {
                xh[j] = (src[j] - mean[j]) * rstd[j];
                o[j] = g[ch] * xh[j] + bt[ch];
            }
        }
        let value = Tensor::from_vec(&[c, tn, hn, wn], out).unwrap();
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        self.push(value, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add operands");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(value, Op::Add { a, b })
    }

    /// `scale · x + shift` with constant scalars.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn temporal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (c, tn, hn, wn) = dims4(qv);
        assert!(
            heads > 0 && c % heads == 0,
            "channels {c} not divisible by heads {heads}"
        );
        let s = hn * wn;
        let d = c / heads;
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let row = |c_idx: usize, t: usize| (c_idx * tn + t) * s;
        let mut probs = vec![T::zero(); heads * tn * tn * s];
        let mut out = vec![T::zero(); c * tn * s];
        for h in 0..heads {
            for t1 in 0..tn {
                for t2 in 0..tn {
                    let sc = &mut probs[((h * tn + t1) * tn + t2) * s..][..s];
                    for j in 0..d {
                        let ch = h * d + j;
                        let qr = &qv.data()[row(ch, t1)..row(ch, t1) + s];
                        let kr = &kv.data()[row(ch, t2)..row(ch, t2) + s];
                        for ((o, &a), &b) in sc.iter_mut().zip(qr).zip(kr) {
                            *o = *o + a * b;
                        }
                    }
                    sc.iter_mut().for_each(|x| *x = *x * scale);
                }
                // softmax over t2 at every site
                let block = &mut probs[(h * tn + t1) * tn * s..(h * tn + t1 + 1) * tn * s];
                let mut mx = block[..s].to_vec();
                for t2 in 1..tn {
                    for (m, &x) in mx.iter_mut().zip(&block[t2 * s..(t2 + 1) * s]) {
                        *m = m.max(x);
                    }
                }
                let mut sum = vec![T::zero(); s];
                for t2 in 0..tn {
                    for ((x, &m), acc) in block[t2 * s..(t2 + 1) * s].iter_mut().zip(&mx).zip(sum.iter_mut()) {
                        *x = (*x - m).exp();
                        *acc = *acc + *x;
                    }
                }
                for t2 in 0..tn {
                    for (x, &z) in block[t2 * s..(t2 + 1) * s].iter_mut().zip(&sum) {
                        *x = *x / z;
                    }
                }
            }
            for t1 in 0..tn {
                for t2 in 0..tn {
                    let p = &probs[((h * tn + t1) * tn + t2) * s..][..s];
                    for j in 0..d {
                        let ch = h * d + j;
                        let vr = &vv.data()[row(ch, t2)..row(ch, t2) + s];
                        let o = &mut out[row(ch, t1)..row(ch, t1) + s];
                        for ((o, &pp), &x) in o.iter_mut().zip(p).zip(vr) {
                            *o = *o + pp * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[c, tn, hn, wn], out).unwrap();
        self.push(value, Op::TemporalAttention { q, k, v, heads, probs })
    }

    /// Post-softmax attention weights of an attention node, `(heads, T, T, S)`.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id].op {
            Op::TemporalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Propagate `seed = ∂L/∂root` back through the tape. Returns
    /// `(parameter index, gradient)` for every parameter leaf reached.
    pub fn backward(&self, root: NodeId, seed: Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed gradient shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(seed);
        let mut out = Vec::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(idx) => out.push((*idx, g)),
                Op::Conv { x, w, b } => {
                    let (gx, gw, gb) = self.conv_backward(*x, *w, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = self.linear_backward(*x, *w, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (gx, gg, gb) = self.layer_norm_backward(*gamma, xhat, rstd, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| gy * gelu_parts(v).1)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[id].value;
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gy)| gy * s * (T::one() - s))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(y.shape(), data).unwrap());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Affine { x, scale } => {
                    let mut gx = g;
                    gx.scale(*scale);
                    accumulate(&mut grads, *x, gx);
                }
                Op::TemporalAttention { q, k, v, heads, probs } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *heads, probs, &g);
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
            }
        }
        out.reverse();
        out
    }

    fn conv_backward(&self, x: NodeId, w: NodeId, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, tn, hn, wn) = dims4(xv);
        let ws = wv.shape();
        let co = ws[0];
        let k = [ws[2], ws[3], ws[4]];
        let ktaps = k[0] * k[1] * k[2];
        let plane = hn * wn;
        let vol = tn * plane;
        let mut gx = vec![T::zero(); ci * vol];
        let mut gw = vec![T::zero(); wv.len()];
        let gb: Vec<T> = (0..co)
            .map(|o| g.data()[o * vol..(o + 1) * vol].iter().copied().sum())
            .collect();
        for o in 0..co {
            let g_o = &g.data()[o * vol..(o + 1) * vol];
            for i in 0..ci {
                let x_i = &xv.data()[i * vol..(i + 1) * vol];
                let gx_i = &mut gx[i * vol..(i + 1) * vol];
                let wbase = (o * ci + i) * ktaps;
                for_each_tap(k, tn, hn, wn, |tap, t, ts, h, hs, (lo, hi), off| {
                    let wval = wv.data()[wbase + tap];
                    let grow = &g_o[t * plane + h * wn + lo..t * plane + h * wn + hi];
                    let base = (ts * plane + hs * wn) as isize;
                    let r = (base + lo as isize + off) as usize..(base + hi as isize + off) as usize;
                    gw[wbase + tap] = gw[wbase + tap] + dot(grow, &x_i[r.clone()]);
                    axpy(wval, grow, &mut gx_i[r]);
                });
            }
        }
        (
            Tensor::from_vec(xv.shape(), gx).unwrap(),
            Tensor::from_vec(ws, gw).unwrap(),
            Tensor::from_vec(&[co], gb).unwrap(),
        )
    }

    fn linear_backward(&self, x: NodeId, w: NodeId, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, tn, hn, wn) = dims4(xv);
        let co = wv.shape()[0];
        let p = tn * hn * wn;
        let mut gx = vec![T::zero(); ci * p];
        let mut gw = vec![T::zero(); co * ci];
        let mut gb = vec![T::zero(); co];
        for o in 0..co {
            let g_o = &g.data()[o * p..(o + 1) * p];
            gb[o] = g_o.iter().copied().sum();
            for i in 0..ci {
                let x_i = &xv.data()[i * p..(i + 1) * p];
                gw[o * ci + i] = dot(g_o, x_i);
                axpy(wv.data()[o * ci + i], g_o, &mut gx[i * p..(i + 1) * p]);
            }
        }
        (
            Tensor::from_vec(xv.shape(), gx).unwrap(),
            Tensor::from_vec(wv.shape(), gw).unwrap(),
            Tensor::from_vec(&[co], gb).unwrap(),
        )
    }

    fn layer_norm_backward(
        &self,
        gamma: NodeId,
        xhat: &[T],
        rstd: &[T],
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (c, tn, hn, wn) = dims4(g);
        let p = tn * hn * wn;
        let gv = self.value(gamma).data();
        let inv_c = T::lit(1.0 / c as f64);
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        // per-position means of dxhat and dxhat·xhat
        let mut m1 = vec![T::zero(); p];
        let mut m2 = vec![T::zero(); p];
        for ch in 0..c {
            let gy = &g.data()[ch * p..(ch + 1) * p];
            let xh = &xhat[ch * p..(ch + 1) * p];
            ggamma[ch] = dot(gy, xh);
            gbeta[ch] = gy.iter().copied().sum();
            for j in 0..p {
                let dxh = gy[j] * gv[ch];
                m1[j] = m1[j] + dxh;
                m2[j] = m2[j] + dxh * xh[j];
            }
        }
        let mut gx = vec![T::zero(); c * p];
        for ch in 0..c {
            let gy = &g.data()[ch * p..(ch + 1) * p];
            let xh = &xhat[ch * p..(ch + 1) * p];
            let out = &mut gx[ch * p..(ch + 1) * p];
            for j in 0..p {
                let dxh = gy[j] * gv[ch];
                out[j] = rstd[j] * (dxh - m1[j] * inv_c - xh[j] * m2[j] * inv_c);
            }
        }
        (
            Tensor::from_vec(g.shape(), gx).unwrap(),
            Tensor::from_vec(&[c], ggamma).unwrap(),
            Tensor::from_vec(&[c], gbeta).unwrap(),
        )
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (c, tn, hn, wn) = dims4(qv);
        let s = hn * wn;
        let d = c / heads;
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let row = |c_idx: usize, t: usize| (c_idx * tn + t) * s;
        let mut gq = vec![T::zero(); c * tn * s];
        let mut gk = vec![T::zero(); c * tn * s];
        let mut gv = vec![T::zero(); c * tn * s];
        let mut dscore = vec![T::zero(); tn * tn * s];
        for h in 0..heads {
            let ph = &probs[h * tn * tn * s..(h + 1) * tn * tn * s];
            // dP and gV
            dscore.iter_mut().for_each(|x| *x = T::zero());
            for t1 in 0..tn {
                for t2 in 0..tn {
                    let p = &ph[(t1 * tn + t2) * s..][..s];
                    let dp = &mut dscore[(t1 * tn + t2) * s..][..s];
                    for j in 0..d {
                        let ch = h * d + j;
                        let go = &g.data()[row(ch, t1)..row(ch, t1) + s];
                        let vr = &vv.data()[row(ch, t2)..row(ch, t2) + s];
                        for ((acc, &a), &b) in dp.iter_mut().zip(go).zip(vr) {
                            *acc = *acc + a * b;
                        }
                        let gvr = &mut gv[row(ch, t2)..row(ch, t2) + s];
                        for ((acc, &pp), &a) in gvr.iter_mut().zip(p).zip(go) {
                            *acc = *acc + pp * a;
                        }
                    }
                }
            }
            // softmax backward, in place: dS = P ⊙ (dP − Σ P·dP)
            for t1 in 0..tn {
                let mut inner = vec![T::zero(); s];
                for t2 in 0..tn {
                    let p = &ph[(t1 * tn + t2) * s..][..s];
                    let dp = &dscore[(t1 * tn + t2) * s..][..s];
                    for ((acc, &a), &b) in inner.iter_mut().zip(p).zip(dp) {
                        *acc = *acc + a * b;
                    }
                }
                for t2 in 0..tn {
                    let p = &ph[(t1 * tn + t2) * s..][..s];
                    let dp = &mut dscore[(t1 * tn + t2) * s..][..s];
                    for ((x, &pp), &m) in dp.iter_mut().zip(p).zip(&inner) {
                        *x = pp * (*x - m) * scale;
                    }
                }
            }
            for t1 in 0..tn {
                for t2 in 0..tn {
                    let ds = &dscore[(t1 * tn + t2) * s..][..s];
                    for j in 0..d {
                        let ch = h * d + j;
                        let kr = &kv.data()[row(ch, t2)..row(ch, t2) + s];
                        let gqr = &mut gq[row(ch, t1)..row(ch, t1) + s];
                        for ((acc, &a), &b) in gqr.iter_mut().zip(ds).zip(kr) {
                            *acc = *acc + a * b;
                        }
                        let qr = &qv.data()[row(ch, t1)..row(ch, t1) + s];
                        let gkr = &mut gk[row(ch, t2)..row(ch, t2) + s];
                        for ((acc, &a), &b) in gkr.iter_mut().zip(ds).zip(qr) {
                            *acc = *acc + a * b;
                        }
                    }
                }
            }
        }
        let shape = qv.shape();
        (
            Tensor::from_vec(shape, gq).unwrap(),
            Tensor::from_vec(shape, gk).unwrap(),
            Tensor::from_vec(shape, gv).unwrap(),
        )
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Visit every `(tap, t, t_src, h, h_src, w-range, w-offset)` of a
/// same-padded convolution.
#[inline]
fn for_each_tap(
    k: [usize; 3],
    tn: usize,
    hn: usize,
    wn: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), isize),
) {
    let (pt, ph, pw) = ((k[0] / 2) as isize, (k[1] / 2) as isize, (k[2] / 2) as isize);
    for dt in 0..k[0] {
        let ot = dt as isize - pt;
        let (t_lo, t_hi) = span(tn, ot);
        for dh in 0..k[1] {
            let oh = dh as isize - ph;
            let (h_lo, h_hi) = span(hn, oh);
            for dw in 0..k[2] {
                let ow = dw as isize - pw;
                let wr = span(wn, ow);
                if wr.0 >= wr.1 {
                    continue;
                }
                let tap = (dt * k[1] + dh) * k[2] + dw;
                for t in t_lo..t_hi {
                    let ts = (t as isize + ot) as usize;
                    for h in h_lo..h_hi {
                        let hs = (h as isize + oh) as usize;
                        f(tap, t, ts, h, hs, wr, ow);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = derive_stream(seed, "tape-test");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| s.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    /// Weighted-sum loss and its gradient, so every output element matters.
    fn probe(out: &Tensor<f64>, seed: u64) -> (f64, Tensor<f64>) {
        let r = rand_tensor(out.shape(), seed);
        let loss = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        (loss, r)
    }

    /// Check every input of `build` against central differences.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId) {
        let eval = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = vals.iter().enumerate().map(|(i, v)| tape.param(i, v.clone())).collect();
            let root = build(&mut tape, &ids);
            (tape, root)
        };
        let (tape, root) = eval(&inputs);
        let (_, seed) = probe(tape.value(root), 99);
        let grads = tape.backward(root, seed);
        let h = 1e-6;
        for (idx, g) in grads {
            for e in 0..inputs[idx].len() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[e] -= h;
                let (tp, rp) = eval(&plus);
                let (tm, rm) = eval(&minus);
                let fd = (probe(tp.value(rp), 99).0 - probe(tm.value(rm), 99).0) / (2.0 * h);
                let an = g.data()[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "input {idx} elem {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        check(
            vec![
                rand_tensor(&[2, 3, 4, 5], 1),
                rand_tensor(&[3, 2, 3, 3, 3], 2),
                rand_tensor(&[3], 3),
            ],
            |t, ids| t.conv(ids[0], ids[1], ids[2]),
        );
        check(
            vec![
                rand_tensor(&[2, 2, 3, 3], 4),
                rand_tensor(&[2, 2, 1, 3, 3], 5),
                rand_tensor(&[2], 6),
            ],
            |t, ids| t.conv(ids[0], ids[1], ids[2]),
        );
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor(&[2, 3, 4, 4], 7);
        let w = rand_tensor(&[3, 2, 3, 3, 3], 8);
        let b = rand_tensor(&[3], 9);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
        let out = tape.conv(xi, wi, bi);
        let got = tape.value(out);
        for o in 0..3 {
            for t in 0..3 {
                for h in 0..4 {
                    for ww in 0..4 {
                        let mut acc = b.data()[o];
                        for i in 0..2 {
                            for dt in 0..3 {
                                for dh in 0..3 {
                                    for dw in 0..3 {
                                        let (ts, hs, ws) = (t + dt, h + dh, ww + dw);
                                        if ts < 1 || hs < 1 || ws < 1 || ts > 3 || hs > 4 || ws > 4 {
                                            continue;
                                        }
                                        let xv = x.data()[((i * 3 + ts - 1) * 4 + hs - 1) * 4 + ws - 1];
                                        let wv = w.data()[(((o * 2 + i) * 3 + dt) * 3 + dh) * 3 + dw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        let v = got.data()[((o * 3 + t) * 4 + h) * 4 + ww];
                        assert!((v - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_and_norm_gradients() {
        check(
            vec![
                rand_tensor(&[3, 2, 2, 2], 10),
                rand_tensor(&[4, 3], 11),
                rand_tensor(&[4], 12),
            ],
            |t, ids| t.linear(ids[0], ids[1], Some(ids[2])),
        );
        check(
            vec![
                rand_tensor(&[4, 2, 2, 3], 13),
                rand_tensor(&[4], 14),
                rand_tensor(&[4], 15),
            ],
            |t, ids| t.layer_norm(ids[0], ids[1], ids[2]),
        );
    }

    #[test]
    fn pointwise_gradients() {
        check(vec![rand_tensor(&[2, 2, 2, 2], 16)], |t, ids| t.gelu(ids[0]));
        check(vec![rand_tensor(&[2, 2, 2, 2], 17)], |t, ids| t.sigmoid(ids[0]));
        check(vec![rand_tensor(&[2, 2, 2, 2], 18)], |t, ids| {
            t.affine(ids[0], 3.0, 1.0)
        });
        check(
            vec![rand_tensor(&[2, 1, 2, 2], 19), rand_tensor(&[2, 1, 2, 2], 20)],
            |t, ids| {
                let s = t.add(ids[0], ids[1]);
                t.add(s, ids[0])
            },
        );
    }

    #[test]
    fn attention_gradients() {
        check(
            vec![
                rand_tensor(&[4, 3, 2, 2], 21),
                rand_tensor(&[4, 3, 2, 2], 22),
                rand_tensor(&[4, 3, 2, 2], 23),
            ],
            |t, ids| t.temporal_attention(ids[0], ids[1], ids[2], 2),
        );
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let mk = |seed| rand_tensor(&[4, 5, 3, 3], seed).cast::<f32>();
        let (q, k, v) = (tape.input(mk(1)), tape.input(mk(2)), tape.input(mk(3)));
        let a = tape.temporal_attention(q, k, v, 2);
        let p = tape.attention_weights(a).unwrap();
        let (heads, t, s) = (2, 5, 9);
        for h in 0..heads {
            for t1 in 0..t {
                for site in 0..s {
                    let sum: f32 = (0..t).map(|t2| p[((h * t + t1) * t + t2) * s + site]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_frame_attention_passes_values_through() {
        let mut tape = Tape::<f64>::new();
        let v = rand_tensor(&[4, 1, 2, 2], 30);
        let (q, k, vi) = (
            tape.input(rand_tensor(&[4, 1, 2, 2], 31)),
            tape.input(rand_tensor(&[4, 1, 2, 2], 32)),
            tape.input(v.clone()),
        );
        let a = tape.temporal_attention(q, k, vi, 2);
        assert_eq!(tape.value(a), &v);
    }

    #[test]
    fn one_by_one_linear_hand_gradient() {
        // y = w·x + b on a 2×2 map, L = Σ y  ⇒  ∂L/∂w = Σ x, ∂L/∂b = 4, ∂L/∂x = w
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let xi = tape.param(0, x);
        let wi = tape.param(1, Tensor::from_vec(&[1, 1], vec![0.5]).unwrap());
        let bi = tape.param(2, Tensor::from_vec(&[1], vec![0.1]).unwrap());
        let y = tape.linear(xi, wi, Some(bi));
        let grads = tape.backward(y, Tensor::filled(&[1, 1, 2, 2], 1.0));
        assert_eq!(grads[0].1.data(), &[0.5; 4]);
        assert_eq!(grads[1].1.data(), &[10.0]);
        assert_eq!(grads[2].1.data(), &[4.0]);
    }
}
