//! Minimal reverse-mode tape over f64 tensors.
//!
//! The network builds a fresh graph per forward pass from ~20 primitive ops;
//! `backward` walks the tape once and returns cotangents for every parameter
//! leaf. Kernels parallelize only over disjoint output slices with a fixed
//! per-element summation order, so results are bitwise identical with and
//! without rayon.

use std::sync::Arc;

use crate::par;

/// Dense f64 tensor value (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorVal {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorVal {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// a + alpha * b
    AddScaled(NodeId, NodeId, f64),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    /// x [R, C] + bias [C] broadcast over rows.
    AddBias(NodeId, NodeId),
    /// [M,K] x [K,N]
    Matmul(NodeId, NodeId),
    /// [G,M,K] x [G,K,N]
    BmmNN(NodeId, NodeId),
    /// [G,M,K] x [G,N,K]^T -> [G,M,N]
    BmmNT(NodeId, NodeId),
    SoftmaxLast(NodeId),
    /// scores [G,T,T] + mask [nw,T,T]; window = (g / heads) % nw.
    AddMask { x: NodeId, mask: Arc<TensorVal>, heads: usize },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvT2d { x: NodeId, w: NodeId, stride: usize, pad: usize, outpad: usize },
    /// 3x3 depthwise, pad 1; w [3,3,C].
    DwConv { x: NodeId, w: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, invstd: Vec<f64> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    GeluErf(NodeId),
    /// y[i] = x[map[i]]; bijective index map.
    Permute { x: NodeId, map: Arc<Vec<u32>> },
    ConcatLast(Vec<NodeId>),
    /// [B,H,W,C] -> [B,C]
    AvgPool(NodeId),
    /// x [B,H,W,C] * s [B,C]
    MulChannel(NodeId, NodeId),
    /// Bilinear feature resize, pixel-center convention.
    Interp(NodeId),
    Reshape(NodeId),
}

struct Node {
    val: TensorVal,
    op: Op,
    needs_grad: bool,
}

/// Wengert-list computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Take the cotangent for `id`, if it participated in the backward pass.
    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }
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

    pub fn value(&self, id: NodeId) -> &TensorVal {
        &self.nodes[id.0].val
    }

    fn push(&mut self, val: TensorVal, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { val, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf (inputs, no gradient).
    pub fn input(&mut self, val: TensorVal) -> NodeId {
        self.push(val, Op::Leaf, false)
    }

    /// Parameter leaf (receives a gradient).
    pub fn param(&mut self, val: TensorVal) -> NodeId {
        self.push(val, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_scaled(a, b, 1.0)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + alpha * y).collect();
        let val = TensorVal::new(va.shape.clone(), data);
        let needs = self.needs(a) || self.needs(b);
        let op = if alpha == 1.0 { Op::Add(a, b) } else { Op::AddScaled(a, b, alpha) };
        self.push(val, op, needs)
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let va = self.value(a);
        let val = TensorVal::new(va.shape.clone(), va.data.iter().map(|x| alpha * x).collect());
        let needs = self.needs(a);
        self.push(val, Op::Scale(a, alpha), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let val = TensorVal::new(va.shape.clone(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(val, Op::Mul(a, b), needs)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = *vx.shape.last().expect("add_bias needs rank >= 1");
        assert_eq!(vb.shape, vec![c], "bias shape");
        let mut data = vx.data.clone();
        for row in data.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&vb.data) {
                *o += bv;
            }
        }
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x) || self.needs(bias);
        self.push(val, Op::AddBias(x, bias), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape.len(), 2);
        assert_eq!(vb.shape.len(), 2);
        let (m, k) = (va.shape[0], va.shape[1]);
        let (k2, n) = (vb.shape[0], vb.shape[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let data = matmul_nn(&va.data, &vb.data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(TensorVal::new(vec![m, n], data), Op::Matmul(a, b), needs)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape.len(), 3);
        assert_eq!(vb.shape.len(), 3);
        let (g, m, k) = (va.shape[0], va.shape[1], va.shape[2]);
        assert_eq!(vb.shape[0], g, "bmm batch");
        let (out_n, op, needs) = if transpose_b {
            assert_eq!(vb.shape[2], k, "bmm NT inner");
            (vb.shape[1], Op::BmmNT(a, b), self.needs(a) || self.needs(b))
        } else {
            assert_eq!(vb.shape[1], k, "bmm NN inner");
            (vb.shape[2], Op::BmmNN(a, b), self.needs(a) || self.needs(b))
        };
        let mut out = vec![0.0; g * m * out_n];
        {
            let (a_d, b_d) = (&va.data, &vb.data);
            let bn = vb.shape[1] * vb.shape[2];
            par::for_each_chunk_mut(&mut out, m * out_n, |gi, chunk| {
                let a_g = &a_d[gi * m * k..(gi + 1) * m * k];
                let b_g = &b_d[gi * bn..(gi + 1) * bn];
                if transpose_b {
                    matmul_nt_into(a_g, b_g, m, k, out_n, chunk);
                } else {
                    matmul_nn_into(a_g, b_g, m, k, out_n, chunk);
                }
            });
        }
        self.push(TensorVal::new(vec![g, m, out_n], out), op, needs)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let d = *vx.shape.last().expect("softmax rank");
        let mut data = vx.data.clone();
        par::for_each_chunk_mut(&mut data, d, |_, row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        });
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        self.push(val, Op::SoftmaxLast(x), needs)
    }

    /// Add the shifted-window attention mask to scores [G,T,T]; `G` iterates
    /// batch-major over (batch, window, head).
    pub fn add_window_mask(&mut self, x: NodeId, mask: Arc<TensorVal>, heads: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape.len(), 3);
        let (g, t) = (vx.shape[0], vx.shape[1]);
        assert_eq!(vx.shape[2], t);
        assert_eq!(mask.shape[1..], [t, t]);
        let nw = mask.shape[0];
        assert_eq!(g % (nw * heads), 0, "mask grouping");
        let mut data = vx.data.clone();
        let tt = t * t;
        for (gi, chunk) in data.chunks_mut(tt).enumerate() {
            let wi = (gi / heads) % nw;
            for (o, &mv) in chunk.iter_mut().zip(&mask.data[wi * tt..(wi + 1) * tt]) {
                *o += mv;
            }
        }
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        self.push(val, Op::AddMask { x, mask, heads }, needs)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let [b, h, wd, ci] = dims4(&vx.shape);
        let [kh, kw, wci, co] = dims4(&vw.shape);
        assert_eq!(ci, wci, "conv channels");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let data = conv2d_fwd(&vx.data, b, h, wd, ci, &vw.data, kh, kw, co, stride, pad, ho, wo);
        let needs = self.needs(x) || self.needs(w);
        self.push(
            TensorVal::new(vec![b, ho, wo, co], data),
            Op::Conv2d { x, w, stride, pad },
            needs,
        )
    }

    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        outpad: usize,
    ) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let [b, h, wd, ci] = dims4(&vx.shape);
        let [kh, kw, wci, co] = dims4(&vw.shape);
        assert_eq!(ci, wci, "tconv channels");
        let ho = (h - 1) * stride + kh + outpad - 2 * pad;
        let wo = (wd - 1) * stride + kw + outpad - 2 * pad;
        let data = tconv2d_fwd(&vx.data, b, h, wd, ci, &vw.data, kh, kw, co, stride, pad, ho, wo);
        let needs = self.needs(x) || self.needs(w);
        self.push(
            TensorVal::new(vec![b, ho, wo, co], data),
            Op::ConvT2d { x, w, stride, pad, outpad },
            needs,
        )
    }

    pub fn dwconv3x3(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let [b, h, wd, c] = dims4(&vx.shape);
        assert_eq!(vw.shape, vec![3, 3, c], "dwconv weight");
        let data = dwconv_fwd(&vx.data, b, h, wd, c, &vw.data);
        let needs = self.needs(x) || self.needs(w);
        self.push(TensorVal::new(vec![b, h, wd, c], data), Op::DwConv { x, w }, needs)
    }

    const LN_EPS: f64 = 1e-5;

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape.last().expect("layer_norm rank");
        assert_eq!(vg.shape, vec![d]);
        assert_eq!(vb.shape, vec![d]);
        let rows = vx.numel() / d;
        let mut mean = vec![0.0; rows];
        let mut invstd = vec![0.0; rows];
        let mut data = vec![0.0; vx.numel()];
        {
            let xd = &vx.data;
            let (gd, bd) = (&vg.data, &vb.data);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let m = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + Self::LN_EPS).sqrt();
                mean[r] = m;
                invstd[r] = inv;
                for i in 0..d {
                    data[r * d + i] = gd[i] * (row[i] - m) * inv + bd[i];
                }
            }
        }
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(val, Op::LayerNorm { x, gamma, beta, mean, invstd }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| v.max(0.0)).collect();
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        self.push(val, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        self.push(val, Op::Sigmoid(x), needs)
    }

    pub fn tanh_act(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| v.tanh()).collect();
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        self.push(val, Op::Tanh(x), needs)
    }

    /// GELU in the exact CDF form: x * Phi(x) with Phi from erf.
    pub fn gelu_erf(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| v * normal_cdf(v)).collect();
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x);
        self.push(val, Op::GeluErf(x), needs)
    }

    /// Bijective gather: `y[i] = x[map[i]]` with an explicit output shape.
    pub fn permute(&mut self, x: NodeId, map: Arc<Vec<u32>>, shape: Vec<usize>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(map.len(), vx.numel(), "permute map length");
        assert_eq!(shape.iter().product::<usize>(), vx.numel());
        let xd = &vx.data;
        let mut data = vec![0.0; map.len()];
        par::for_each_indexed_mut(&mut data, |i, o| *o = xd[map[i] as usize]);
        let needs = self.needs(x);
        self.push(TensorVal::new(shape, data), Op::Permute { x, map }, needs)
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let lead = {
            let s = &self.value(parts[0]).shape;
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> =
            parts.iter().map(|&p| *self.value(p).shape.last().unwrap()).collect();
        for &p in parts {
            let s = &self.value(p).shape;
            assert_eq!(s[..s.len() - 1], lead[..], "concat leading dims");
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].val.data;
            for r in 0..rows {
                data[r * total + offset..r * total + offset + wd]
                    .copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(TensorVal::new(shape, data), Op::ConcatLast(parts.to_vec()), needs)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let [b, h, w, c] = dims4(&vx.shape);
        let hw = (h * w) as f64;
        let mut data = vec![0.0; b * c];
        for bi in 0..b {
            for p in 0..h * w {
                let row = &vx.data[(bi * h * w + p) * c..(bi * h * w + p + 1) * c];
                for (o, &v) in data[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in &mut data {
            *v /= hw;
        }
        let needs = self.needs(x);
        self.push(TensorVal::new(vec![b, c], data), Op::AvgPool(x), needs)
    }

    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (self.value(x), self.value(s));
        let [b, h, w, c] = dims4(&vx.shape);
        assert_eq!(vs.shape, vec![b, c], "mul_channel scale shape");
        let mut data = vx.data.clone();
        for bi in 0..b {
            let sc = &vs.data[bi * c..(bi + 1) * c];
            for p in 0..h * w {
                let row = &mut data[(bi * h * w + p) * c..(bi * h * w + p + 1) * c];
                for (o, &sv) in row.iter_mut().zip(sc) {
                    *o *= sv;
                }
            }
        }
        let val = TensorVal::new(vx.shape.clone(), data);
        let needs = self.needs(x) || self.needs(s);
        self.push(val, Op::MulChannel(x, s), needs)
    }

    /// Bilinear resize of a feature map to `out_h` x `out_w`.
    pub fn interp_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let vx = self.value(x);
        let [b, h, w, c] = dims4(&vx.shape);
        if out_h == h && out_w == w {
            return self.reshape(x, vx.shape.clone());
        }
        let data = interp_fwd(&vx.data, b, h, w, c, out_h, out_w);
        let needs = self.needs(x);
        self.push(TensorVal::new(vec![b, out_h, out_w, c], data), Op::Interp(x), needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), vx.numel(), "reshape numel");
        let val = TensorVal::new(shape, vx.data.clone());
        let needs = self.needs(x);
        self.push(val, Op::Reshape(x), needs)
    }

    /// Reverse pass from `root` seeded with `seed` (dL/droot).
    pub fn backward(&self, root: NodeId, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.value(root).numel(), "seed length");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                // Leaves keep their cotangent for the caller; interior nodes
                // without grad-requiring parents are dead ends.
                if matches!(node.op, Op::Leaf) {
                    grads[id] = Some(dy);
                }
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &dy, 1.0);
                    self.accum(&mut grads, *b, &dy, 1.0);
                }
                Op::AddScaled(a, b, alpha) => {
                    self.accum(&mut grads, *a, &dy, 1.0);
                    self.accum(&mut grads, *b, &dy, *alpha);
                }
                Op::Scale(a, alpha) => self.accum(&mut grads, *a, &dy, *alpha),
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let vb = &self.value(*b).data;
                        let da: Vec<f64> = dy.iter().zip(vb).map(|(g, v)| g * v).collect();
                        self.accum_owned(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let va = &self.value(*a).data;
                        let db: Vec<f64> = dy.iter().zip(va).map(|(g, v)| g * v).collect();
                        self.accum_owned(&mut grads, *b, db);
                    }
                }
                Op::AddBias(x, bias) => {
                    let c = self.value(*bias).numel();
                    if self.needs(*x) {
                        self.accum(&mut grads, *x, &dy, 1.0);
                    }
                    if self.needs(*bias) {
                        let mut db = vec![0.0; c];
                        for row in dy.chunks(c) {
                            for (o, &g) in db.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        self.accum_owned(&mut grads, *bias, db);
                    }
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = (va.shape[0], va.shape[1]);
                    let n = vb.shape[1];
                    if self.needs(*a) {
                        let da = matmul_nt(&dy, &vb.data, m, n, k);
                        self.accum_owned(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = matmul_tn(&va.data, &dy, m, k, n);
                        self.accum_owned(&mut grads, *b, db);
                    }
                }
                Op::BmmNN(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (_g, m, k) = (va.shape[0], va.shape[1], va.shape[2]);
                    let n = vb.shape[2];
                    if self.needs(*a) {
                        let mut da = vec![0.0; va.numel()];
                        let (dyd, bd) = (&dy, &vb.data);
                        par::for_each_chunk_mut(&mut da, m * k, |gi, chunk| {
                            matmul_nt_into(
                                &dyd[gi * m * n..(gi + 1) * m * n],
                                &bd[gi * k * n..(gi + 1) * k * n],
                                m,
                                n,
                                k,
                                chunk,
                            );
                        });
                        self.accum_owned(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; vb.numel()];
                        let (ad, dyd) = (&va.data, &dy);
                        par::for_each_chunk_mut(&mut db, k * n, |gi, chunk| {
                            matmul_tn_into(
                                &ad[gi * m * k..(gi + 1) * m * k],
                                &dyd[gi * m * n..(gi + 1) * m * n],
                                m,
                                k,
                                n,
                                chunk,
                            );
                        });
                        self.accum_owned(&mut grads, *b, db);
                    }
                }
                Op::BmmNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (_g, m, k) = (va.shape[0], va.shape[1], va.shape[2]);
                    let n = vb.shape[1];
                    if self.needs(*a) {
                        // da = dy [G,M,N] @ b [G,N,K]
                        let mut da = vec![0.0; va.numel()];
                        let (dyd, bd) = (&dy, &vb.data);
                        par::for_each_chunk_mut(&mut da, m * k, |gi, chunk| {
                            matmul_nn_into(
                                &dyd[gi * m * n..(gi + 1) * m * n],
                                &bd[gi * n * k..(gi + 1) * n * k],
                                m,
                                n,
                                k,
                                chunk,
                            );
                        });
                        self.accum_owned(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        // db = dy^T [G,N,M] @ a [G,M,K]
                        let mut db = vec![0.0; vb.numel()];
                        let (ad, dyd) = (&va.data, &dy);
                        par::for_each_chunk_mut(&mut db, n * k, |gi, chunk| {
                            matmul_tn_into(
                                &dyd[gi * m * n..(gi + 1) * m * n],
                                &ad[gi * m * k..(gi + 1) * m * k],
                                m,
                                n,
                                k,
                                chunk,
                            );
                        });
                        self.accum_owned(&mut grads, *b, db);
                    }
                }
                Op::SoftmaxLast(x) => {
                    let y = &node.val;
                    let d = *y.shape.last().unwrap();
                    let mut dx = vec![0.0; y.numel()];
                    for r in 0..y.numel() / d {
                        let yr = &y.data[r * d..(r + 1) * d];
                        let gr = &dy[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            dx[r * d + i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::AddMask { x, .. } => self.accum(&mut grads, *x, &dy, 1.0),
                Op::Conv2d { x, w, stride, pad } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let [b, h, wd, ci] = dims4(&vx.shape);
                    let [kh, kw, _, co] = dims4(&vw.shape);
                    let [_, ho, wo, _] = dims4(&node.val.shape);
                    if self.needs(*x) {
                        let dx = conv2d_bwd_x(
                            &dy, b, ho, wo, co, &vw.data, kh, kw, ci, *stride, *pad, h, wd,
                        );
                        self.accum_owned(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let dw = conv2d_bwd_w(
                            &vx.data, b, h, wd, ci, &dy, ho, wo, co, kh, kw, *stride, *pad,
                        );
                        self.accum_owned(&mut grads, *w, dw);
                    }
                }
                Op::ConvT2d { x, w, stride, pad, .. } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let [b, h, wd, ci] = dims4(&vx.shape);
                    let [kh, kw, _, co] = dims4(&vw.shape);
                    let [_, ho, wo, _] = dims4(&node.val.shape);
                    if self.needs(*x) {
                        let dx = tconv2d_bwd_x(
                            &dy, b, ho, wo, co, &vw.data, kh, kw, ci, *stride, *pad, h, wd,
                        );
                        self.accum_owned(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let dw = tconv2d_bwd_w(
                            &vx.data, b, h, wd, ci, &dy, ho, wo, co, kh, kw, *stride, *pad,
                        );
                        self.accum_owned(&mut grads, *w, dw);
                    }
                }
                Op::DwConv { x, w } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let [b, h, wd, c] = dims4(&vx.shape);
                    if self.needs(*x) {
                        let dx = dwconv_bwd_x(&dy, b, h, wd, c, &vw.data);
                        self.accum_owned(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let dw = dwconv_bwd_w(&vx.data, &dy, b, h, wd, c);
                        self.accum_owned(&mut grads, *w, dw);
                    }
                }
                Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                    let (vx, vg) = (self.value(*x), self.value(*gamma));
                    let d = vg.numel();
                    let rows = vx.numel() / d;
                    let mut dx = vec![0.0; vx.numel()];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        let xr = &vx.data[r * d..(r + 1) * d];
                        let gr = &dy[r * d..(r + 1) * d];
                        let (m, inv) = (mean[r], invstd[r]);
                        let mut sum1 = 0.0;
                        let mut sum2 = 0.0;
                        for i in 0..d {
                            let xhat = (xr[i] - m) * inv;
                            let dxhat = gr[i] * vg.data[i];
                            sum1 += dxhat;
                            sum2 += dxhat * xhat;
                            dg[i] += gr[i] * xhat;
                            db[i] += gr[i];
                        }
                        let (c1, c2) = (sum1 / d as f64, sum2 / d as f64);
                        for i in 0..d {
                            let xhat = (xr[i] - m) * inv;
                            dx[r * d + i] = (gr[i] * vg.data[i] - c1 - xhat * c2) * inv;
                        }
                    }
                    if self.needs(*x) {
                        self.accum_owned(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        self.accum_owned(&mut grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        self.accum_owned(&mut grads, *beta, db);
                    }
                }
                Op::Relu(x) => {
                    let vx = &self.value(*x).data;
                    let dx: Vec<f64> =
                        dy.iter().zip(vx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.val.data;
                    let dx: Vec<f64> = dy.iter().zip(y).map(|(g, &v)| g * v * (1.0 - v)).collect();
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = &node.val.data;
                    let dx: Vec<f64> = dy.iter().zip(y).map(|(g, &v)| g * (1.0 - v * v)).collect();
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::GeluErf(x) => {
                    let vx = &self.value(*x).data;
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(vx)
                        .map(|(g, &v)| g * (normal_cdf(v) + v * normal_pdf(v)))
                        .collect();
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::Permute { x, map } => {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (i, &src) in map.iter().enumerate() {
                        dx[src as usize] += dy[i];
                    }
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::ConcatLast(parts) => {
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| *self.value(p).shape.last().unwrap()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = dy.len() / total;
                    let mut offset = 0;
                    for (&p, &wd) in parts.iter().zip(&widths) {
                        if self.needs(p) {
                            let mut dp = vec![0.0; rows * wd];
                            for r in 0..rows {
                                dp[r * wd..(r + 1) * wd].copy_from_slice(
                                    &dy[r * total + offset..r * total + offset + wd],
                                );
                            }
                            self.accum_owned(&mut grads, p, dp);
                        }
                        offset += wd;
                    }
                }
                Op::AvgPool(x) => {
                    let vx = self.value(*x);
                    let [b, h, w, c] = dims4(&vx.shape);
                    let hw = (h * w) as f64;
                    let mut dx = vec![0.0; vx.numel()];
                    for bi in 0..b {
                        let dyb = &dy[bi * c..(bi + 1) * c];
                        for p in 0..h * w {
                            let row = &mut dx[(bi * h * w + p) * c..(bi * h * w + p + 1) * c];
                            for (o, &g) in row.iter_mut().zip(dyb) {
                                *o = g / hw;
                            }
                        }
                    }
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::MulChannel(x, s) => {
                    let (vx, vs) = (self.value(*x), self.value(*s));
                    let [b, h, w, c] = dims4(&vx.shape);
                    if self.needs(*x) {
                        let mut dx = vec![0.0; vx.numel()];
                        for bi in 0..b {
                            let sc = &vs.data[bi * c..(bi + 1) * c];
                            for p in 0..h * w {
                                let base = (bi * h * w + p) * c;
                                for i in 0..c {
                                    dx[base + i] = dy[base + i] * sc[i];
                                }
                            }
                        }
                        self.accum_owned(&mut grads, *x, dx);
                    }
                    if self.needs(*s) {
                        let mut ds = vec![0.0; vs.numel()];
                        for bi in 0..b {
                            for p in 0..h * w {
                                let base = (bi * h * w + p) * c;
                                for i in 0..c {
                                    ds[bi * c + i] += dy[base + i] * vx.data[base + i];
                                }
                            }
                        }
                        self.accum_owned(&mut grads, *s, ds);
                    }
                }
                Op::Interp(x) => {
                    let vx = self.value(*x);
                    let [b, h, w, c] = dims4(&vx.shape);
                    let [_, ho, wo, _] = dims4(&node.val.shape);
                    let dx = interp_bwd(&dy, b, h, w, c, ho, wo);
                    self.accum_owned(&mut grads, *x, dx);
                }
                Op::Reshape(x) => self.accum(&mut grads, *x, &dy, 1.0),
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, dy: &[f64], alpha: f64) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (o, &v) in g.iter_mut().zip(dy) {
                    *o += alpha * v;
                }
            }
            slot => {
                *slot = Some(if alpha == 1.0 {
                    dy.to_vec()
                } else {
                    dy.iter().map(|&v| alpha * v).collect()
                });
            }
        }
    }

    fn accum_owned(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, dx: Vec<f64>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (o, v) in g.iter_mut().zip(dx) {
                    *o += v;
                }
            }
            slot => *slot = Some(dx),
        }
    }
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected rank-4 tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn block_rows(n: usize) -> usize {
    (16384 / n.max(1)).max(1)
}

/// C[M,N] = A[M,K] B[K,N]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let rows = block_rows(n);
    par::for_each_chunk_mut(&mut out, rows * n, |blk, chunk| {
        let row0 = blk * rows;
        matmul_nn_into(&a[row0 * k..(row0 * k + chunk.len() / n * k)], b, chunk.len() / n, k, n, chunk);
    });
    out
}

fn matmul_nn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for mi in 0..m {
        let orow = &mut out[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = a[mi * k + ki];
            let brow = &b[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C[M,N] = A[M,K] B[N,K]^T (rows of B are dotted with rows of A).
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let rows = block_rows(n);
    par::for_each_chunk_mut(&mut out, rows * n, |blk, chunk| {
        let row0 = blk * rows;
        matmul_nt_into(&a[row0 * k..(row0 * k + chunk.len() / n * k)], b, chunk.len() / n, k, n, chunk);
    });
    out
}

fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for mi in 0..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let orow = &mut out[mi * n..(mi + 1) * n];
        for (ni, o) in orow.iter_mut().enumerate() {
            let brow = &b[ni * k..(ni + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// C[K,N] = A[M,K]^T B[M,N]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let rows = block_rows(n);
    par::for_each_chunk_mut(&mut out, rows * n, |blk, chunk| {
        let k0 = blk * rows;
        let kk = chunk.len() / n;
        for mi in 0..m {
            let brow = &b[mi * n..(mi + 1) * n];
            for dk in 0..kk {
                let av = a[mi * k + k0 + dk];
                let orow = &mut chunk[dk * n..(dk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for mi in 0..m {
        let brow = &b[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = a[mi * k + ki];
            let orow = &mut out[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    wt: &[f64],
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * ho * wo * co];
    par::for_each_chunk_mut(&mut out, wo * co, |row_idx, orow| {
        let (bi, yo) = (row_idx / ho, row_idx % ho);
        for ky in 0..kh {
            let yi = (yo * stride + ky) as isize - pad as isize;
            if yi < 0 || yi >= h as isize {
                continue;
            }
            let yi = yi as usize;
            for kx in 0..kw {
                let wtap = &wt[(ky * kw + kx) * ci * co..(ky * kw + kx + 1) * ci * co];
                for xo in 0..wo {
                    let xi = (xo * stride + kx) as isize - pad as isize;
                    if xi < 0 || xi >= w as isize {
                        continue;
                    }
                    let xi = xi as usize;
                    let xrow = &x[((bi * h + yi) * w + xi) * ci..((bi * h + yi) * w + xi + 1) * ci];
                    let ovec = &mut orow[xo * co..(xo + 1) * co];
                    for (cix, &xv) in xrow.iter().enumerate() {
                        let wrow = &wtap[cix * co..(cix + 1) * co];
                        for (o, &wv) in ovec.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_x(
    dy: &[f64],
    b: usize,
    ho: usize,
    wo: usize,
    co: usize,
    wt: &[f64],
    kh: usize,
    kw: usize,
    ci: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; b * h * w * ci];
    par::for_each_chunk_mut(&mut dx, w * ci, |row_idx, xrow| {
        let (bi, yi) = (row_idx / h, row_idx % h);
        for ky in 0..kh {
            let t = yi + pad;
            if t < ky || (t - ky) % stride != 0 {
                continue;
            }
            let yo = (t - ky) / stride;
            if yo >= ho {
                continue;
            }
            for kx in 0..kw {
                let wtap = &wt[(ky * kw + kx) * ci * co..(ky * kw + kx + 1) * ci * co];
                for xi in 0..w {
                    let u = xi + pad;
                    if u < kx || (u - kx) % stride != 0 {
                        continue;
                    }
                    let xo = (u - kx) / stride;
                    if xo >= wo {
                        continue;
                    }
                    let dyrow =
                        &dy[((bi * ho + yo) * wo + xo) * co..((bi * ho + yo) * wo + xo + 1) * co];
                    let xvec = &mut xrow[xi * ci..(xi + 1) * ci];
                    for (cix, o) in xvec.iter_mut().enumerate() {
                        let wrow = &wtap[cix * co..(cix + 1) * co];
                        let mut acc = 0.0;
                        for (wv, gv) in wrow.iter().zip(dyrow) {
                            acc += wv * gv;
                        }
                        *o += acc;
                    }
                }
            }
        }
    });
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_w(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    dy: &[f64],
    ho: usize,
    wo: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; kh * kw * ci * co];
    par::for_each_chunk_mut(&mut dw, ci * co, |tap, chunk| {
        let (ky, kx) = (tap / kw, tap % kw);
        for bi in 0..b {
            for yo in 0..ho {
                let yi = (yo * stride + ky) as isize - pad as isize;
                if yi < 0 || yi >= h as isize {
                    continue;
                }
                let yi = yi as usize;
                for xo in 0..wo {
                    let xi = (xo * stride + kx) as isize - pad as isize;
                    if xi < 0 || xi >= w as isize {
                        continue;
                    }
                    let xi = xi as usize;
                    let xrow = &x[((bi * h + yi) * w + xi) * ci..((bi * h + yi) * w + xi + 1) * ci];
                    let dyrow =
                        &dy[((bi * ho + yo) * wo + xo) * co..((bi * ho + yo) * wo + xo + 1) * co];
                    for (cix, &xv) in xrow.iter().enumerate() {
                        let orow = &mut chunk[cix * co..(cix + 1) * co];
                        for (o, &gv) in orow.iter_mut().zip(dyrow) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
    });
    dw
}

#[allow(clippy::too_many_arguments)]
fn tconv2d_fwd(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    wt: &[f64],
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * ho * wo * co];
    par::for_each_chunk_mut(&mut out, wo * co, |row_idx, orow| {
        let (bi, yo) = (row_idx / ho, row_idx % ho);
        for ky in 0..kh {
            let t = yo + pad;
            if t < ky || (t - ky) % stride != 0 {
                continue;
            }
            let yi = (t - ky) / stride;
            if yi >= h {
                continue;
            }
            for kx in 0..kw {
                let wtap = &wt[(ky * kw + kx) * ci * co..(ky * kw + kx + 1) * ci * co];
                for xo in 0..wo {
                    let u = xo + pad;
                    if u < kx || (u - kx) % stride != 0 {
                        continue;
                    }
                    let xi = (u - kx) / stride;
                    if xi >= w {
                        continue;
                    }
                    let xrow = &x[((bi * h + yi) * w + xi) * ci..((bi * h + yi) * w + xi + 1) * ci];
                    let ovec = &mut orow[xo * co..(xo + 1) * co];
                    for (cix, &xv) in xrow.iter().enumerate() {
                        let wrow = &wtap[cix * co..(cix + 1) * co];
                        for (o, &wv) in ovec.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn tconv2d_bwd_x(
    dy: &[f64],
    b: usize,
    ho: usize,
    wo: usize,
    co: usize,
    wt: &[f64],
    kh: usize,
    kw: usize,
    ci: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; b * h * w * ci];
    par::for_each_chunk_mut(&mut dx, w * ci, |row_idx, xrow| {
        let (bi, yi) = (row_idx / h, row_idx % h);
        for ky in 0..kh {
            let yo = (yi * stride + ky) as isize - pad as isize;
            if yo < 0 || yo >= ho as isize {
                continue;
            }
            let yo = yo as usize;
            for kx in 0..kw {
                let wtap = &wt[(ky * kw + kx) * ci * co..(ky * kw + kx + 1) * ci * co];
                for xi in 0..w {
                    let xo = (xi * stride + kx) as isize - pad as isize;
                    if xo < 0 || xo >= wo as isize {
                        continue;
                    }
                    let xo = xo as usize;
                    let dyrow =
                        &dy[((bi * ho + yo) * wo + xo) * co..((bi * ho + yo) * wo + xo + 1) * co];
                    let xvec = &mut xrow[xi * ci..(xi + 1) * ci];
                    for (cix, o) in xvec.iter_mut().enumerate() {
                        let wrow = &wtap[cix * co..(cix + 1) * co];
                        let mut acc = 0.0;
                        for (wv, gv) in wrow.iter().zip(dyrow) {
                            acc += wv * gv;
                        }
                        *o += acc;
                    }
                }
            }
        }
    });
    dx
}

#[allow(clippy::too_many_arguments)]
fn tconv2d_bwd_w(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    dy: &[f64],
    ho: usize,
    wo: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; kh * kw * ci * co];
    par::for_each_chunk_mut(&mut dw, ci * co, |tap, chunk| {
        let (ky, kx) = (tap / kw, tap % kw);
        for bi in 0..b {
            for yi in 0..h {
                let yo = (yi * stride + ky) as isize - pad as isize;
                if yo < 0 || yo >= ho as isize {
                    continue;
                }
                let yo = yo as usize;
                for xi in 0..w {
                    let xo = (xi * stride + kx) as isize - pad as isize;
                    if xo < 0 || xo >= wo as isize {
                        continue;
                    }
                    let xo = xo as usize;
                    let xrow = &x[((bi * h + yi) * w + xi) * ci..((bi * h + yi) * w + xi + 1) * ci];
                    let dyrow =
                        &dy[((bi * ho + yo) * wo + xo) * co..((bi * ho + yo) * wo + xo + 1) * co];
                    for (cix, &xv) in xrow.iter().enumerate() {
                        let orow = &mut chunk[cix * co..(cix + 1) * co];
                        for (o, &gv) in orow.iter_mut().zip(dyrow) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
    });
    dw
}

fn dwconv_fwd(x: &[f64], b: usize, h: usize, w: usize, c: usize, wt: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b * h * w * c];
    par::for_each_chunk_mut(&mut out, w * c, |row_idx, orow| {
        let (bi, y) = (row_idx / h, row_idx % h);
        for ky in 0..3usize {
            let yi = y as isize + ky as isize - 1;
            if yi < 0 || yi >= h as isize {
                continue;
            }
            let yi = yi as usize;
            for kx in 0..3usize {
                let wtap = &wt[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                for xo in 0..w {
                    let xi = xo as isize + kx as isize - 1;
                    if xi < 0 || xi >= w as isize {
                        continue;
                    }
                    let xi = xi as usize;
                    let xrow = &x[((bi * h + yi) * w + xi) * c..((bi * h + yi) * w + xi + 1) * c];
                    let ovec = &mut orow[xo * c..(xo + 1) * c];
                    for i in 0..c {
                        ovec[i] += xrow[i] * wtap[i];
                    }
                }
            }
        }
    });
    out
}

fn dwconv_bwd_x(dy: &[f64], b: usize, h: usize, w: usize, c: usize, wt: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; b * h * w * c];
    par::for_each_chunk_mut(&mut dx, w * c, |row_idx, xrow| {
        let (bi, yi) = (row_idx / h, row_idx % h);
        for ky in 0..3usize {
            let yo = yi as isize - (ky as isize - 1);
            if yo < 0 || yo >= h as isize {
                continue;
            }
            let yo = yo as usize;
            for kx in 0..3usize {
                let wtap = &wt[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                for xi in 0..w {
                    let xo = xi as isize - (kx as isize - 1);
                    if xo < 0 || xo >= w as isize {
                        continue;
                    }
                    let xo = xo as usize;
                    let dyrow = &dy[((bi * h + yo) * w + xo) * c..((bi * h + yo) * w + xo + 1) * c];
                    let xvec = &mut xrow[xi * c..(xi + 1) * c];
                    for i in 0..c {
                        xvec[i] += dyrow[i] * wtap[i];
                    }
                }
            }
        }
    });
    dx
}

fn dwconv_bwd_w(x: &[f64], dy: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut dw = vec![0.0; 9 * c];
    par::for_each_chunk_mut(&mut dw, c, |tap, chunk| {
        let (ky, kx) = (tap / 3, tap % 3);
        for bi in 0..b {
            for y in 0..h {
                let yi = y as isize + ky as isize - 1;
                if yi < 0 || yi >= h as isize {
                    continue;
                }
                let yi = yi as usize;
                for xo in 0..w {
                    let xi = xo as isize + kx as isize - 1;
                    if xi < 0 || xi >= w as isize {
                        continue;
                    }
                    let xi = xi as usize;
                    let xrow = &x[((bi * h + yi) * w + xi) * c..((bi * h + yi) * w + xi + 1) * c];
                    let dyrow = &dy[((bi * h + y) * w + xo) * c..((bi * h + y) * w + xo + 1) * c];
                    for i in 0..c {
                        chunk[i] += xrow[i] * dyrow[i];
                    }
                }
            }
        }
    });
    dw
}

fn interp_weights(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn interp_fwd(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ys = interp_weights(ho, h);
    let xs = interp_weights(wo, w);
    let mut out = vec![0.0; b * ho * wo * c];
    par::for_each_chunk_mut(&mut out, wo * c, |row_idx, orow| {
        let (bi, yo) = (row_idx / ho, row_idx % ho);
        let (y0, y1, fy) = ys[yo];
        for xo in 0..wo {
            let (x0, x1, fx) = xs[xo];
            for ch in 0..c {
                let v = |yy: usize, xx: usize| x[((bi * h + yy) * w + xx) * c + ch];
                orow[xo * c + ch] = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                    + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
            }
        }
    });
    out
}

fn interp_bwd(
    dy: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ys = interp_weights(ho, h);
    let xs = interp_weights(wo, w);
    let mut dx = vec![0.0; b * h * w * c];
    // Scatter-add: sequential for determinism (used only on skip mismatch).
    for bi in 0..b {
        for yo in 0..ho {
            let (y0, y1, fy) = ys[yo];
            for xo in 0..wo {
                let (x0, x1, fx) = xs[xo];
                for ch in 0..c {
                    let g = dy[((bi * ho + yo) * wo + xo) * c + ch];
                    dx[((bi * h + y0) * w + x0) * c + ch] += (1.0 - fy) * (1.0 - fx) * g;
                    dx[((bi * h + y0) * w + x1) * c + ch] += (1.0 - fy) * fx * g;
                    dx[((bi * h + y1) * w + x0) * c + ch] += fy * (1.0 - fx) * g;
                    dx[((bi * h + y1) * w + x1) * c + ch] += fy * fx * g;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use rand::Rng;

    fn rand_val(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> TensorVal {
        let n = shape.iter().product();
        TensorVal::new(
            shape.to_vec(),
            (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    /// Finite-difference check: build the op over parameter leaves, reduce the
    /// output with fixed random weights, and compare the tape gradient of
    /// every input against central differences.
    fn grad_check(
        seed: u64,
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) {
        let mut r = rng(seed);
        let vals: Vec<TensorVal> = shapes.iter().map(|s| rand_val(&mut r, s)).collect();
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &ids);
        let w: Vec<f64> = (0..g.value(out).numel()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let mut grads = g.backward(out, w.clone());

        let scalar = |vals: &[TensorVal]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
            let out = build(&mut g, &ids);
            g.value(out).data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };

        let step = 1e-5;
        for (pi, id) in ids.iter().enumerate() {
            let analytic = grads.take(*id).expect("gradient present");
            for ei in 0..vals[pi].numel() {
                let mut plus = vals.to_vec();
                plus[pi].data[ei] += step;
                let mut minus = vals.to_vec();
                minus[pi].data[ei] -= step;
                let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * step);
                let denom = analytic[ei].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (analytic[ei] - fd).abs() / denom < 1e-5,
                    "input {pi} elem {ei}: analytic {} vs fd {fd}",
                    analytic[ei]
                );
            }
        }
    }

    #[test]
    fn grad_add_scale_mul_bias() {
        grad_check(1, &[&[3, 4], &[3, 4]], |g, ids| {
            let s = g.add_scaled(ids[0], ids[1], 0.3);
            let m = g.mul(s, ids[1]);
            g.scale(m, 1.7)
        });
        grad_check(2, &[&[5, 3], &[3]], |g, ids| g.add_bias(ids[0], ids[1]));
    }

    #[test]
    fn grad_matmul_and_bmm() {
        grad_check(3, &[&[3, 4], &[4, 5]], |g, ids| g.matmul(ids[0], ids[1]));
        grad_check(4, &[&[2, 3, 4], &[2, 4, 5]], |g, ids| g.bmm(ids[0], ids[1], false));
        grad_check(5, &[&[2, 3, 4], &[2, 5, 4]], |g, ids| g.bmm(ids[0], ids[1], true));
    }

    #[test]
    fn grad_softmax_and_activations() {
        grad_check(6, &[&[4, 5]], |g, ids| g.softmax_last(ids[0]));
        grad_check(7, &[&[3, 7]], |g, ids| g.sigmoid(ids[0]));
        grad_check(8, &[&[3, 7]], |g, ids| g.tanh_act(ids[0]));
        grad_check(9, &[&[3, 7]], |g, ids| g.gelu_erf(ids[0]));
        grad_check(10, &[&[3, 7]], |g, ids| g.relu(ids[0]));
    }

    #[test]
    fn grad_conv2d_stride1_and_stride2() {
        grad_check(11, &[&[1, 5, 6, 2], &[3, 3, 2, 3]], |g, ids| {
            g.conv2d(ids[0], ids[1], 1, 1)
        });
        grad_check(12, &[&[2, 6, 6, 2], &[3, 3, 2, 4]], |g, ids| {
            g.conv2d(ids[0], ids[1], 2, 1)
        });
        grad_check(13, &[&[1, 4, 4, 3], &[1, 1, 3, 2]], |g, ids| {
            g.conv2d(ids[0], ids[1], 1, 0)
        });
    }

    #[test]
    fn grad_conv2d_transpose() {
        grad_check(14, &[&[1, 3, 4, 3], &[3, 3, 3, 2]], |g, ids| {
            g.conv2d_transpose(ids[0], ids[1], 2, 1, 1)
        });
    }

    #[test]
    fn tconv_doubles_resolution() {
        let mut r = rng(15);
        let x = rand_val(&mut r, &[1, 5, 7, 2]);
        let w = rand_val(&mut r, &[3, 3, 2, 4]);
        let mut g = Graph::new();
        let xi = g.input(x);
        let wi = g.input(w);
        let y = g.conv2d_transpose(xi, wi, 2, 1, 1);
        assert_eq!(g.value(y).shape, vec![1, 10, 14, 4]);
    }

    #[test]
    fn grad_dwconv_layernorm() {
        grad_check(16, &[&[1, 4, 5, 3], &[3, 3, 3]], |g, ids| g.dwconv3x3(ids[0], ids[1]));
        grad_check(17, &[&[6, 5], &[5], &[5]], |g, ids| {
            g.layer_norm(ids[0], ids[1], ids[2])
        });
    }

    #[test]
    fn grad_pool_mulchannel_concat_permute_interp() {
        grad_check(18, &[&[2, 3, 4, 5]], |g, ids| g.global_avg_pool(ids[0]));
        grad_check(19, &[&[2, 3, 3, 4], &[2, 4]], |g, ids| g.mul_channel(ids[0], ids[1]));
        grad_check(20, &[&[2, 3, 2], &[2, 3, 3]], |g, ids| g.concat_last(ids));
        grad_check(21, &[&[2, 3, 4, 2]], |g, ids| g.interp_bilinear(ids[0], 5, 6));
        grad_check(22, &[&[10]], |g, ids| {
            let map = Arc::new((0..10u32).rev().collect::<Vec<_>>());
            g.permute(ids[0], map, vec![10])
        });
    }

    #[test]
    fn grad_window_mask_passthrough() {
        let mask = Arc::new(TensorVal::new(
            vec![2, 2, 2],
            vec![0.0, -5.0, -5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ));
        grad_check(23, &[&[4, 2, 2]], |g, ids| {
            let masked = g.add_window_mask(ids[0], mask.clone(), 1);
            g.softmax_last(masked)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(24);
        let x = rand_val(&mut r, &[7, 9]);
        let mut g = Graph::new();
        let xi = g.input(x);
        let y = g.softmax_last(xi);
        for row in g.value(y).data.chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut r = rng(25);
        let a = rand_val(&mut r, &[7, 5]);
        let b = rand_val(&mut r, &[5, 6]);
        let mut g = Graph::new();
        let ai = g.input(a.clone());
        let bi = g.input(b.clone());
        let c = g.matmul(ai, bi);
        for m in 0..7 {
            for n in 0..6 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.data[m * 5 + k] * b.data[k * 6 + n];
                }
                assert!((g.value(c).data[m * 6 + n] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_graphs_match_bitwise() {
        let build = || {
            let mut r = rng(26);
            let x = rand_val(&mut r, &[2, 8, 8, 4]);
            let w = rand_val(&mut r, &[3, 3, 4, 8]);
            let mut g = Graph::new();
            let xi = g.input(x);
            let wi = g.input(w);
            let c = g.conv2d(xi, wi, 2, 1);
            let t = g.tanh_act(c);
            g.value(t).data.clone()
        };
        crate::par::set_sequential(true);
        let seq = build();
        crate::par::set_sequential(false);
        let parl = build();
        assert_eq!(seq, parl);
    }
}
