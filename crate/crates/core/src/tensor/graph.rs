use crate::error::{Error, Result};
use crate::geometry::Box;

use super::interp::bilinear_taps;
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One region to pool: the image it belongs to and a box in feature-grid
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSpec {
    pub batch_index: usize,
    pub rect: Box,
}

/// Per-channel statistics of a training-mode batch-norm forward, used by the
/// caller to update running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    RoiAlign {
        input: Var,
        taps: Vec<(usize, Vec<(usize, f64)>)>,
    },
    GlobalAvgPool {
        input: Var,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    SumSquares {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of operations in creation order, which is also a topological order,
/// so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Floor on the norm in [`Graph::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf treated as data; gradient never flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {xs:?}, weight {ws:?}, stride {stride}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let g = ConvGeom {
            n,
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        };
        let cols = im2col(x.data(), &g);
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let mut out = vec![0.0; n * f * hw];
        for b in 0..n {
            gemm(
                f,
                ckk,
                hw,
                (w.data(), ckk, 1),
                (&cols[b * ckk * hw..(b + 1) * ckk * hw], hw, 1),
                0.0,
                (&mut out[b * f * hw..(b + 1) * f * hw], hw, 1),
            );
        }
        let rg = self.rg(input) || self.rg(weight);
        let value = Tensor::new(&[n, f, ho, wo], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                cols,
            },
        ))
    }

    /// `input [N, in] · weightᵀ [in, out] + bias [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        gemm(
            n,
            din,
            dout,
            (x.data(), din, 1),
            (w.data(), 1, din),
            0.0,
            (&mut out, dout, 1),
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} for output {dout}",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, dout], out)?;
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(value, rg, Op::Relu { input })
    }

    /// Training-mode batch norm over every axis but the channel axis (1).
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let (n, c, inner) = bn_dims(x.shape())?;
        let m = n * inner;
        if m < 2 {
            return Err(Error::BatchTooSmall(m));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * inner;
                s += x.data()[base..base + inner].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * inner;
                ss += x.data()[base..base + inner]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
        };
        let out = self.bn_apply(input, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(input, gamma, beta, running_mean, &inv_std, false)
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, inner) = bn_dims(x.shape())?;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        if gv.len() != c || bv.len() != c || mean.len() != c || inv_std.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: {c} channels but gamma {} beta {} stats {}",
                gv.len(),
                bv.len(),
                mean.len()
            )));
        }
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
            },
        ))
    }

    /// 1×1 RoIAlign: one output row per region, averaging
    /// `sampling_ratio²` bilinear samples on a regular grid inside the box.
    /// Gradient flows into the features only.
    pub fn roi_align_1x1(&mut self, features: Var, rois: &[RoiSpec], sampling_ratio: usize) -> Result<Var> {
        let x = self.value(features);
        let xs = x.shape();
        if xs.len() != 4 || sampling_ratio == 0 {
            return Err(Error::Shape(format!(
                "roi_align: features {xs:?}, sampling ratio {sampling_ratio}"
            )));
        }
        let (n, c, fh, fw) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = fh * fw;
        let s = sampling_ratio;
        let norm = 1.0 / (s * s) as f64;
        let mut taps = Vec::with_capacity(rois.len());
        let mut out = vec![0.0; rois.len() * c];
        for (r, roi) in rois.iter().enumerate() {
            if roi.batch_index >= n {
                return Err(Error::RoiBatchIndex {
                    index: roi.batch_index,
                    batch: n,
                });
            }
            let b = roi.rect;
            let grid = Box {
                x: 0.0,
                y: 0.0,
                w: fw as f64,
                h: fh as f64,
            };
            if !b.is_valid() || !grid.contains(&b) {
                return Err(Error::Shape(format!(
                    "roi_align: box {b:?} outside feature grid {fw}x{fh}"
                )));
            }
            let mut t = Vec::with_capacity(4 * s * s);
            for iy in 0..s {
                let py = b.y + (iy as f64 + 0.5) * b.h / s as f64;
                for ix in 0..s {
                    let px = b.x + (ix as f64 + 0.5) * b.w / s as f64;
                    for (idx, w) in bilinear_taps(px, py, fw, fh) {
                        t.push((idx, w * norm));
                    }
                }
            }
            let base = roi.batch_index * c * plane;
            for ch in 0..c {
                let p = &x.data()[base + ch * plane..base + (ch + 1) * plane];
                out[r * c + ch] = t.iter().map(|&(i, w)| p[i] * w).sum();
            }
            taps.push((roi.batch_index, t));
        }
        let value = Tensor::new(&[rois.len(), c], out)?;
        let rg = self.rg(features);
        Ok(self.push(value, rg, Op::RoiAlign { input: features, taps }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool: input {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let out: Vec<f64> = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    /// Divides each last-axis vector by `max(‖v‖₂, L2_EPS)`.
    pub fn l2_normalize(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let d = *x.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = nrm.max(L2_EPS);
            for (oi, vi) in o.iter_mut().zip(row) {
                *oi = vi / den;
            }
            norms.push(nrm);
        }
        let value = Tensor::new(x.shape(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(value, rg, Op::L2Normalize { input, norms })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(value, rg, Op::Scale { input, factor })
    }

    /// Scalar sum of squared entries.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), rg, Op::SumSquares { input })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let xs = x.shape();
        if xs.len() != 2 || xs[0] != labels.len() || xs[0] == 0 {
            return Err(Error::Shape(format!(
                "cross entropy: logits {xs:?}, {} labels",
                labels.len()
            )));
        }
        let k = xs[1];
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for ((row, p), &y) in x.data().chunks(k).zip(probs.chunks_mut(k)).zip(labels) {
            if y >= k {
                return Err(Error::Shape(format!("label {y} out of range for {k} classes")));
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, v) in p.iter_mut().zip(row) {
                *pi = (v - mx).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
        }
        let n = labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate on every node
    /// that requires them; previous gradients are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&dv) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                cols,
            } => {
                let xs = self.value(*input).shape();
                let w = self.value(*weight);
                let ws = w.shape();
                let os = node.value.shape();
                let geom = ConvGeom {
                    n: xs[0],
                    c: xs[1],
                    h: xs[2],
                    w: xs[3],
                    kh: ws[2],
                    kw: ws[3],
                    ho: os[2],
                    wo: os[3],
                    stride: *stride,
                    padding: *padding,
                };
                let f = ws[0];
                let ckk = geom.c * geom.kh * geom.kw;
                let hw = geom.ho * geom.wo;
                if self.rg(*weight) {
                    let mut dw = vec![0.0; w.len()];
                    for b in 0..geom.n {
                        gemm(
                            f,
                            hw,
                            ckk,
                            (&g[b * f * hw..(b + 1) * f * hw], hw, 1),
                            (&cols[b * ckk * hw..(b + 1) * ckk * hw], 1, hw),
                            1.0,
                            (&mut dw, ckk, 1),
                        );
                    }
                    out.push((*weight, dw));
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; geom.n * ckk * hw];
                    for b in 0..geom.n {
                        gemm(
                            ckk,
                            f,
                            hw,
                            (w.data(), 1, ckk),
                            (&g[b * f * hw..(b + 1) * f * hw], hw, 1),
                            0.0,
                            (&mut dcols[b * ckk * hw..(b + 1) * ckk * hw], hw, 1),
                        );
                    }
                    out.push((*input, col2im(&dcols, &geom)));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, din) = (x.shape()[0], x.shape()[1]);
                let dout = w.shape()[0];
                if self.rg(*input) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, (g, dout, 1), (w.data(), din, 1), 0.0, (&mut dx, din, 1));
                    out.push((*input, dx));
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, (g, 1, dout), (x.data(), din, 1), 0.0, (&mut dw, din, 1));
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks(dout) {
                            for (d, gi) in db.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| if *v > 0.0 { *gi } else { 0.0 })
                    .collect();
                out.push((*input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, inner) = bn_dims(node.value.shape()).expect("checked in forward");
                let m = (n * inner) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for k in base..base + inner {
                                dx[k] = if *train {
                                    gv[ch] * inv_std[ch] / m
                                        * (m * g[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                } else {
                                    gv[ch] * inv_std[ch] * g[k]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::RoiAlign { input, taps } => {
                let xs = self.value(*input).shape();
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let mut dx = vec![0.0; self.value(*input).len()];
                for (r, (bi, t)) in taps.iter().enumerate() {
                    let base = bi * c * plane;
                    for ch in 0..c {
                        let gr = g[r * c + ch];
                        let p = &mut dx[base + ch * plane..base + (ch + 1) * plane];
                        for &(idx, w) in t {
                            p[idx] += w * gr;
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.value(*input).shape();
                let plane = xs[2] * xs[3];
                let mut dx = vec![0.0; self.value(*input).len()];
                for (p, gi) in dx.chunks_mut(plane).zip(g) {
                    p.fill(gi / plane as f64);
                }
                out.push((*input, dx));
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for (r, nrm) in norms.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    if *nrm > L2_EPS {
                        let dot: f64 = y[rows.clone()].iter().zip(&g[rows.clone()]).map(|(a, b)| a * b).sum();
                        for k in rows {
                            dx[k] = (g[k] - y[k] * dot) / nrm;
                        }
                    } else {
                        for k in rows {
                            dx[k] = g[k] / L2_EPS;
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|v| v * factor).collect()));
            }
            Op::SumSquares { input } => {
                let x = self.value(*input).data();
                out.push((*input, x.iter().map(|v| 2.0 * v * g[0]).collect()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &y) in dx.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g[0] / n;
                    }
                }
                out.push((*logits, dx));
            }
        }
        out
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(batch, channels, elements per channel per item)` for `[N, C]` or `[N, C, H, W]`.
fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::Shape(format!("batch_norm: unsupported shape {shape:?}"))),
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

/// Per-item column matrices `[C·kh·kw, Ho·Wo]`, stacked over the batch.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ckk = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.n * ckk * hw];
    for b in 0..g.n {
        for ci in 0..g.c {
            let plane = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (ci * g.kh + i) * g.kw + j;
                    let dst = &mut cols[b * ckk * hw + row * hw..b * ckk * hw + (row + 1) * hw];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ckk = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for b in 0..g.n {
        for ci in 0..g.c {
            let base = (b * g.c + ci) * g.h * g.w;
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (ci * g.kh + i) * g.kw + j;
                    let src = &cols[b * ckk * hw + row * hw..b * ckk * hw + (row + 1) * hw];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[base + iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `C = A·B + beta·C` with `(slice, row stride, column stride)` operands.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: A too short");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: B too short");
    assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: C too short");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop cross-correlation.
    fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * ho * wo];
        for b in 0..n {
            for o in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((b * f + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let y = g.conv2d(xv, wv, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_counts_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
            let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, stride, pad).unwrap();
            let oracle = conv_oracle(&x, &w, stride, pad);
            let diff = g.value(y).data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "stride {stride} pad {pad}: {diff}");
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, 1, 0), Err(Error::Shape(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
        assert!(matches!(g.conv2d(x, w, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[5, 7], &mut rng);
        let w = rand_tensor(&[3, 7], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        for i in 0..5 {
            for o in 0..3 {
                let mut s = b.data()[o];
                for k in 0..7 {
                    s += x.data()[i * 7 + k] * w.data()[o * 7 + k];
                }
                assert!((g.value(y).data()[i * 3 + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn batch_norm_on_normalized_batch_is_identity() {
        let x = Tensor::new(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batch_norm_train(xv, gamma, beta, 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.var[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_single_value() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[1, 3]));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            g.batch_norm_train(xv, gamma, beta, 1e-5),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn roi_align_constant_and_hand_oracle() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[1, 2, 3, 4], 0.7));
        let rois = [RoiSpec { batch_index: 0, rect: Box { x: 0.2, y: 1.1, w: 2.3, h: 0.4 } }];
        let p = g.roi_align_1x1(f, &rois, 2).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let f = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let rois = [RoiSpec { batch_index: 0, rect: Box { x: 0.0, y: 0.0, w: 2.0, h: 2.0 } }];
        let p = g.roi_align_1x1(f, &rois, 1).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
    }

    #[test]
    fn roi_align_bad_batch_index() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let rois = [RoiSpec { batch_index: 1, rect: Box { x: 0.0, y: 0.0, w: 1.0, h: 1.0 } }];
        assert!(matches!(g.roi_align_1x1(f, &rois, 2), Err(Error::RoiBatchIndex { .. })));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 2], vec![3.0, 4.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.l2_normalize(x);
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..4], &[1.0, 0.0]);
        assert_eq!(&v[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn backward_on_constants_leaves_no_grad() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let p = g.param(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
        let d = g.sub(p, x).unwrap();
        let s = g.sum_squares(d);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(p).unwrap(), &[-1.0, -3.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 4]));
        let l = g.softmax_cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        let gr = g.grad(x).unwrap();
        assert!((gr[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((gr[1] - 0.125).abs() < 1e-12);
    }
}
