//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns the values of a single forward pass. Ops append nodes in
//! topological order (an input id always precedes its consumer), and
//! [`Tape::backward`] consumes the tape, walking the nodes in reverse and
//! accumulating gradients for every node that participates in the graph of a
//! `requires_grad` leaf.
//!
//! Convolutions run as im2col + GEMM; the backward pass reuses the saved
//! column matrix, so each conv costs three GEMM calls total.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node<T: Element> {
    value: Tensor<T>,
    /// True when a gradient must flow to or through this node.
    needs_grad: bool,
    op: Op<T>,
}

enum Op<T: Element> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Matmul(NodeId, NodeId),
    AddRowBias {
        x: NodeId,
        bias: NodeId,
    },
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        /// im2col matrix of x, `[B*H*W, C*kh*kw]`.
        cols: Vec<T>,
    },
    MaxPool2d {
        x: NodeId,
        /// Flat input index of the window maximum, per output element.
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: NodeId,
        /// Per-element factor: 0 for dropped, 1/(1-rate) for survivors.
        mask: Vec<T>,
    },
    ConcatFeatures {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Softmax(NodeId),
    CrossEntropyMean {
        probs: NodeId,
        labels: Vec<usize>,
    },
}

/// Gradients produced by [`Tape::backward`], indexed per node.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. the given node, if one was computed.
    ///
    /// Every `requires_grad` leaf is present (zeros when no path reaches the
    /// loss); interior nodes are present only when they carried gradient.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Probability floor used by cross-entropy to avoid `ln(0)`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Recorded forward pass: values plus the information needed to run the
/// backward sweep.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Records an input tensor. Gradients are collected for it when
    /// `requires_grad` is true.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Value produced at a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Element-wise addition of same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "add operands {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<T> = va.iter().zip(vb.iter()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::Add(a, b)))
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "mul operands {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<T> = va.iter().zip(vb.iter()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::Mul(a, b)))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, needs, Op::Scale(x, c))
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let out = Tensor::from_vec(vec![1], vec![total]).expect("scalar");
        let needs = self.needs(x);
        self.push(out, needs, Op::Sum(x))
    }

    /// Same data viewed under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, self.needs(x), Op::Reshape(x)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu(x))
    }

    /// `a[m,k] @ b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul operands {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        mm(m, k, n, va.data(), vb.data(), &mut c);
        let out = Tensor::from_vec(vec![m, n], c)?;
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::Matmul(a, b)))
    }

    /// Adds `bias[n]` to every row of `x[b,n]`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (sx, sb) = (vx.shape(), vb.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape(format!("row bias {sb:?} against {sx:?}")));
        }
        let n = sx[1];
        let data: Vec<T> = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb.iter()).map(|(&v, &b)| v + b))
            .collect();
        let out = Tensor::from_vec(sx.to_vec(), data)?;
        Ok(self.push(out, self.needs(x) || self.needs(bias), Op::AddRowBias { x, bias }))
    }

    /// Same-padded stride-1 cross-correlation.
    ///
    /// `x[B,C,H,W] * w[F,C,kh,kw] + bias[F] -> [B,F,H,W]`; kernel sides odd.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(format!("conv2d expects 4-d x and w, got {sx:?}, {sw:?}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, wc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {wc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel sides must be odd, got {kh}x{kw}")));
        }
        if sb != [f] {
            return Err(Error::shape(format!("conv2d bias {sb:?} for {f} filters")));
        }

        let ckk = c * kh * kw;
        let cols = im2col(self.value(x).data(), b, c, h, w, kh, kw);
        // out_rows[r, f] over rows r = ((b*H + i)*W + j)
        let mut out_rows = vec![T::zero(); b * h * w * f];
        mm_nt(b * h * w, ckk, f, &cols, self.value(weight).data(), &mut out_rows);

        let vb = self.value(bias).data().to_vec();
        let mut out = vec![T::zero(); b * f * h * w];
        for bi in 0..b {
            for fi in 0..f {
                let bias_f = vb[fi];
                for p in 0..h * w {
                    out[(bi * f + fi) * h * w + p] = out_rows[(bi * h * w + p) * f + fi] + bias_f;
                }
            }
        }
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        let out = Tensor::from_vec(vec![b, f, h, w], out)?;
        Ok(self.push(out, needs, Op::Conv2d { x, weight, bias, cols }))
    }

    /// Non-overlapping max pooling with the given window (stride = window).
    /// Ties go to the first element in row-major window order.
    pub fn maxpool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("maxpool2d expects 4-d input, got {sx:?}")));
        }
        if window == 0 {
            return Err(Error::parameter("maxpool2d window must be >= 1"));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h % window != 0 || w % window != 0 {
            return Err(Error::shape(format!(
                "maxpool2d spatial dims {h}x{w} not divisible by window {window}"
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..b * c {
            let base = bc * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best_idx = base + (oi * window) * w + oj * window;
                    let mut best = data[best_idx];
                    for u in 0..window {
                        for v in 0..window {
                            let idx = base + (oi * window + u) * w + (oj * window + v);
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = bc * oh * ow + oi * ow + oj;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let needs = self.needs(x);
        let out = Tensor::from_vec(vec![b, c, oh, ow], out)?;
        Ok(self.push(out, needs, Op::MaxPool2d { x, argmax }))
    }

    /// Batch normalization in training mode: normalizes per channel over
    /// batch and spatial dims with the biased variance, then applies the
    /// gamma/beta affine. Returns the node plus the batch mean and (biased)
    /// variance so the caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Tensor<T>, Tensor<T>)> {
        let (channels, spatial) = batchnorm_dims(self.value(x).shape())?;
        check_channel_param(self.value(gamma).shape(), channels, "gamma")?;
        check_channel_param(self.value(beta).shape(), channels, "beta")?;
        let shape = self.value(x).shape().to_vec();
        let batch = shape[0];
        let n = batch * spatial;
        let data = self.value(x).data();

        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for c in 0..channels {
            let mut acc = T::zero();
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    acc = acc + data[base + s];
                }
            }
            mean[c] = acc / T::from_f64(n as f64);
        }
        for c in 0..channels {
            let mut acc = T::zero();
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    let d = data[base + s] - mean[c];
                    acc = acc + d * d;
                }
            }
            var[c] = acc / T::from_f64(n as f64);
        }

        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();

        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut x_hat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    let xh = (data[base + s] - mean[c]) * inv_std[c];
                    x_hat[base + s] = xh;
                    out[base + s] = g[c] * xh + bt[c];
                }
            }
        }

        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::from_vec(shape, out)?;
        let id = self.push(
            out,
            needs,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        );
        let mean = Tensor::from_vec(vec![channels], mean)?;
        let var = Tensor::from_vec(vec![channels], var)?;
        Ok((id, mean, var))
    }

    /// Batch normalization in evaluation mode, using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<NodeId> {
        let (channels, spatial) = batchnorm_dims(self.value(x).shape())?;
        check_channel_param(self.value(gamma).shape(), channels, "gamma")?;
        check_channel_param(self.value(beta).shape(), channels, "beta")?;
        check_channel_param(running_mean.shape(), channels, "running mean")?;
        check_channel_param(running_var.shape(), channels, "running var")?;
        let shape = self.value(x).shape().to_vec();
        let batch = shape[0];
        let data = self.value(x).data();

        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let rm = running_mean.data();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();

        let mut x_hat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    let xh = (data[base + s] - rm[c]) * inv_std[c];
                    x_hat[base + s] = xh;
                    out[base + s] = g[c] * xh + bt[c];
                }
            }
        }

        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(
            out,
            needs,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)`. The mask is drawn from `rng`, so the
    /// result is deterministic per (seed, shape, call order).
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::parameter(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            // Identity; no mask, no RNG consumption beyond the contract.
            let out = self.value(x).clone();
            let needs = self.needs(x);
            let mask = vec![T::one(); out.len()];
            return Ok(self.push(out, needs, Op::Dropout { x, mask }));
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let data = self.value(x).data();
        let mut mask = Vec::with_capacity(data.len());
        for _ in 0..data.len() {
            if rng.next_f64() < rate {
                mask.push(T::zero());
            } else {
                mask.push(keep_scale);
            }
        }
        let out: Vec<T> = data.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, needs, Op::Dropout { x, mask }))
    }

    /// Concatenates `[B, p_i]` feature matrices along the feature axis.
    pub fn concat_features(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat requires at least one source"));
        }
        let batch = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 {
                return Err(Error::shape(format!("concat source must be 2-d, got {s:?}")));
            }
            if s[0] != batch {
                return Err(Error::shape(format!(
                    "concat batch mismatch: {batch} vs {}",
                    s[0]
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); batch * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.value(p).data().to_vec();
            for b in 0..batch {
                out[b * total + offset..b * total + offset + w]
                    .copy_from_slice(&src[b * w..(b + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::from_vec(vec![batch, total], out)?;
        Ok(self.push(
            out,
            needs,
            Op::ConcatFeatures {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Per-channel spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool expects 4-d input, got {sx:?}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let spatial = h * w;
        let inv = T::from_f64(1.0 / spatial as f64);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for (bc, slot) in out.iter_mut().enumerate() {
            let base = bc * spatial;
            let mut acc = T::zero();
            for s in 0..spatial {
                acc = acc + data[base + s];
            }
            *slot = acc * inv;
        }
        let needs = self.needs(x);
        let out = Tensor::from_vec(vec![b, c], out)?;
        Ok(self.push(out, needs, Op::GlobalAvgPool(x)))
    }

    /// Row-wise max-shifted softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let k = *sx.last().expect("non-empty shape");
        if k < 2 {
            return Err(Error::shape(format!("softmax needs >= 2 classes, got {k}")));
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); data.len()];
        for (row, orow) in data.chunks(k).zip(out.chunks_mut(k)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut denom = T::zero();
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                let e = (v - max).exp();
                *o = e;
                denom = denom + e;
            }
            for o in orow.iter_mut() {
                *o = *o / denom;
            }
        }
        let needs = self.needs(x);
        let out = Tensor::from_vec(sx, out)?;
        Ok(self.push(out, needs, Op::Softmax(x)))
    }

    /// Mean negative log-likelihood of `labels` under `probs[B,K]`, with the
    /// probability floored at [`PROB_FLOOR`].
    pub fn cross_entropy_mean(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sp = self.value(probs).shape().to_vec();
        if sp.len() != 2 {
            return Err(Error::shape(format!("cross_entropy expects [B,K] probs, got {sp:?}")));
        }
        let (b, k) = (sp[0], sp[1]);
        if k < 2 {
            return Err(Error::shape(format!("cross_entropy needs >= 2 classes, got {k}")));
        }
        if labels.len() != b {
            return Err(Error::shape(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::index(format!("label {bad} out of range for {k} classes")));
        }
        let data = self.value(probs).data();
        let floor = T::from_f64(PROB_FLOOR);
        let mut acc = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let p = data[i * k + label];
            let p = if p > floor { p } else { floor };
            acc = acc - p.ln();
        }
        let loss = acc / T::from_f64(b as f64);
        let out = Tensor::from_vec(vec![1], vec![loss])?;
        let needs = self.needs(probs);
        Ok(self.push(
            out,
            needs,
            Op::CrossEntropyMean {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Runs the backward pass from a scalar loss node, consuming the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            let slot = match grads[i].take() {
                Some(buf) => Some(Tensor::from_vec(node.value.shape().to_vec(), buf)?),
                // A requires_grad leaf with no path to the loss still gets a
                // (zero) gradient of matching shape.
                None if matches!(node.op, Op::Leaf) && node.needs_grad => {
                    Some(Tensor::zeros(node.value.shape())?)
                }
                None => None,
            };
            out.push(slot);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |acc| add_assign(acc, gy));
                self.accumulate(*b, grads, |acc| add_assign(acc, gy));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(*a, grads, |acc| {
                    for ((g, &y), &bv) in acc.iter_mut().zip(gy).zip(vb) {
                        *g = *g + y * bv;
                    }
                });
                self.accumulate(*b, grads, |acc| {
                    for ((g, &y), &av) in acc.iter_mut().zip(gy).zip(va) {
                        *g = *g + y * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(*x, grads, |acc| {
                    for (g, &y) in acc.iter_mut().zip(gy) {
                        *g = *g + y * c;
                    }
                });
            }
            Op::Sum(x) => {
                let y = gy[0];
                self.accumulate(*x, grads, |acc| {
                    for g in acc.iter_mut() {
                        *g = *g + y;
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(*x, grads, |acc| add_assign(acc, gy));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(*x, grads, |acc| {
                    for ((g, &y), &v) in acc.iter_mut().zip(gy).zip(vx) {
                        if v > T::zero() {
                            *g = *g + y;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    // dA = gY @ B^T
                    let mut da = vec![T::zero(); m * k];
                    mm_nt(m, n, k, gy, vb.data(), &mut da);
                    self.accumulate(*a, grads, |acc| add_assign(acc, &da));
                }
                if self.needs(*b) {
                    // dB = A^T @ gY
                    let mut db = vec![T::zero(); k * n];
                    mm_tn(k, m, n, va.data(), gy, &mut db);
                    self.accumulate(*b, grads, |acc| add_assign(acc, &db));
                }
            }
            Op::AddRowBias { x, bias } => {
                let n = self.value(*bias).len();
                self.accumulate(*x, grads, |acc| add_assign(acc, gy));
                self.accumulate(*bias, grads, |acc| {
                    for row in gy.chunks(n) {
                        for (g, &y) in acc.iter_mut().zip(row) {
                            *g = *g + y;
                        }
                    }
                });
            }
            Op::Conv2d { x, weight, bias, cols } => {
                let sx = self.value(*x).shape();
                let sw = self.value(*weight).shape();
                let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (f, kh, kw) = (sw[0], sw[2], sw[3]);
                let ckk = c * kh * kw;
                let rows = b * h * w;
                // gy arrives as [B,F,H,W]; regroup to [B*H*W, F] rows.
                let mut gy_rows = vec![T::zero(); rows * f];
                for bi in 0..b {
                    for fi in 0..f {
                        for p in 0..h * w {
                            gy_rows[(bi * h * w + p) * f + fi] = gy[(bi * f + fi) * h * w + p];
                        }
                    }
                }
                self.accumulate(*bias, grads, |acc| {
                    for row in gy_rows.chunks(f) {
                        for (g, &y) in acc.iter_mut().zip(row) {
                            *g = *g + y;
                        }
                    }
                });
                if self.needs(*weight) {
                    // dW[f, ckk] = gy_rows^T @ cols
                    let mut dw = vec![T::zero(); f * ckk];
                    mm_tn(f, rows, ckk, &gy_rows, cols, &mut dw);
                    self.accumulate(*weight, grads, |acc| add_assign(acc, &dw));
                }
                if self.needs(*x) {
                    // dcols = gy_rows @ W[f, ckk]
                    let mut dcols = vec![T::zero(); rows * ckk];
                    mm(rows, f, ckk, &gy_rows, self.value(*weight).data(), &mut dcols);
                    let dx = col2im(&dcols, b, c, h, w, kh, kw);
                    self.accumulate(*x, grads, |acc| add_assign(acc, &dx));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                self.accumulate(*x, grads, |acc| {
                    for (&idx, &y) in argmax.iter().zip(gy) {
                        acc[idx] = acc[idx] + y;
                    }
                });
            }
            Op::BatchNormTrain { x, gamma, beta, x_hat, inv_std } => {
                let shape = self.value(*x).shape();
                let channels = inv_std.len();
                let batch = shape[0];
                let spatial: usize = shape[2..].iter().product::<usize>().max(1);
                let n = batch * spatial;
                let g = self.value(*gamma).data();

                // Per-channel reductions of gy and gy * x_hat.
                let mut sum_gy = vec![T::zero(); channels];
                let mut sum_gy_xhat = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for s in 0..spatial {
                            sum_gy[c] = sum_gy[c] + gy[base + s];
                            sum_gy_xhat[c] = sum_gy_xhat[c] + gy[base + s] * x_hat[base + s];
                        }
                    }
                }
                self.accumulate(*beta, grads, |acc| add_assign(acc, &sum_gy));
                self.accumulate(*gamma, grads, |acc| add_assign(acc, &sum_gy_xhat));
                if self.needs(*x) {
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let mut dx = vec![T::zero(); gy.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            let scale = g[c] * inv_std[c] * inv_n;
                            for s in 0..spatial {
                                let idx = base + s;
                                let nf = T::from_f64(n as f64);
                                dx[idx] = scale
                                    * (nf * gy[idx] - sum_gy[c] - x_hat[idx] * sum_gy_xhat[c]);
                            }
                        }
                    }
                    self.accumulate(*x, grads, |acc| add_assign(acc, &dx));
                }
            }
            Op::BatchNormEval { x, gamma, beta, x_hat, inv_std } => {
                let shape = self.value(*x).shape();
                let channels = inv_std.len();
                let batch = shape[0];
                let spatial: usize = shape[2..].iter().product::<usize>().max(1);
                let g = self.value(*gamma).data();

                let mut sum_gy = vec![T::zero(); channels];
                let mut sum_gy_xhat = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for s in 0..spatial {
                            sum_gy[c] = sum_gy[c] + gy[base + s];
                            sum_gy_xhat[c] = sum_gy_xhat[c] + gy[base + s] * x_hat[base + s];
                        }
                    }
                }
                self.accumulate(*beta, grads, |acc| add_assign(acc, &sum_gy));
                self.accumulate(*gamma, grads, |acc| add_assign(acc, &sum_gy_xhat));
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            let scale = g[c] * inv_std[c];
                            for s in 0..spatial {
                                dx[base + s] = gy[base + s] * scale;
                            }
                        }
                    }
                    self.accumulate(*x, grads, |acc| add_assign(acc, &dx));
                }
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, grads, |acc| {
                    for ((g, &y), &m) in acc.iter_mut().zip(gy).zip(mask) {
                        *g = *g + y * m;
                    }
                });
            }
            Op::ConcatFeatures { parts, widths } => {
                let total: usize = widths.iter().sum();
                let batch = self.value(parts[0]).shape()[0];
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths.iter()) {
                    self.accumulate(p, grads, |acc| {
                        for b in 0..batch {
                            for j in 0..w {
                                acc[b * w + j] = acc[b * w + j] + gy[b * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.value(*x).shape();
                let spatial = sx[2] * sx[3];
                let inv = T::from_f64(1.0 / spatial as f64);
                self.accumulate(*x, grads, |acc| {
                    for (bc, &y) in gy.iter().enumerate() {
                        let contribution = y * inv;
                        let base = bc * spatial;
                        for s in 0..spatial {
                            acc[base + s] = acc[base + s] + contribution;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let k = *self.value(*x).shape().last().expect("non-empty");
                let probs = self.nodes[i].value.data();
                self.accumulate(*x, grads, |acc| {
                    for ((arow, grow), prow) in
                        acc.chunks_mut(k).zip(gy.chunks(k)).zip(probs.chunks(k))
                    {
                        let dot = grow
                            .iter()
                            .zip(prow.iter())
                            .fold(T::zero(), |s, (&g, &p)| s + g * p);
                        for ((a, &g), &p) in arow.iter_mut().zip(grow).zip(prow) {
                            *a = *a + p * (g - dot);
                        }
                    }
                });
            }
            Op::CrossEntropyMean { probs, labels } => {
                let k = self.value(*probs).shape()[1];
                let b = labels.len();
                let data = self.value(*probs).data();
                let floor = T::from_f64(PROB_FLOOR);
                let y = gy[0];
                self.accumulate(*probs, grads, |acc| {
                    for (row, &label) in labels.iter().enumerate() {
                        let p = data[row * k + label];
                        // Below the floor the clamped loss is constant.
                        if p > floor {
                            let idx = row * k + label;
                            acc[idx] = acc[idx] - y / (T::from_f64(b as f64) * p);
                        }
                    }
                });
            }
        }
    }

    /// Applies `update` to the gradient accumulator of `target`, allocating a
    /// zero buffer on first touch. Skips nodes that do not need gradients.
    fn accumulate(&self, target: NodeId, grads: &mut [Option<Vec<T>>], update: impl FnOnce(&mut Vec<T>)) {
        if !self.needs(target) {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[target.0].value.len()]);
        }
        update(slot.as_mut().expect("just filled"));
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<T: Element>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}

/// Plain row-major `c += a[m,k] @ b[k,n]` (c must start zeroed).
fn mm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    unsafe {
        T::gemm_strided(
            m, k, n,
            T::one(),
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            T::zero(),
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a @ b^T` where `a` is `[m,k]` and `b` is `[n,k]`.
fn mm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    unsafe {
        T::gemm_strided(
            m, k, n,
            T::one(),
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            T::zero(),
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a^T @ b` where `a` is `[k,m]` and `b` is `[k,n]`.
fn mm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    unsafe {
        T::gemm_strided(
            m, k, n,
            T::one(),
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            T::zero(),
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unpacks same-padded convolution windows: output row `((b*H+i)*W+j)`,
/// column `(c*kh+u)*kw+v` holds `x[b,c,i+u-ph,j+v-pw]` (zero outside).
fn im2col<T: Element>(x: &[T], b: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let ckk = c * kh * kw;
    let mut cols = vec![T::zero(); b * h * w * ckk];
    for bi in 0..b {
        for ci in 0..c {
            let x_base = (bi * c + ci) * h * w;
            for u in 0..kh {
                for v in 0..kw {
                    let col = (ci * kh + u) * kw + v;
                    for i in 0..h {
                        let si = i + u;
                        if si < ph || si >= h + ph {
                            continue;
                        }
                        let si = si - ph;
                        let row_base = (bi * h + i) * w;
                        for j in 0..w {
                            let sj = j + v;
                            if sj < pw || sj >= w + pw {
                                continue;
                            }
                            cols[(row_base + j) * ckk + col] = x[x_base + si * w + sj - pw];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Element>(dcols: &[T], b: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let ckk = c * kh * kw;
    let mut dx = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let x_base = (bi * c + ci) * h * w;
            for u in 0..kh {
                for v in 0..kw {
                    let col = (ci * kh + u) * kw + v;
                    for i in 0..h {
                        let si = i + u;
                        if si < ph || si >= h + ph {
                            continue;
                        }
                        let si = si - ph;
                        let row_base = (bi * h + i) * w;
                        for j in 0..w {
                            let sj = j + v;
                            if sj < pw || sj >= w + pw {
                                continue;
                            }
                            let idx = x_base + si * w + sj - pw;
                            dx[idx] = dx[idx] + dcols[(row_base + j) * ckk + col];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn batchnorm_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        2 => Ok((shape[1], 1)),
        4 => Ok((shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape(format!(
            "batchnorm expects [B,C] or [B,C,H,W], got {shape:?}"
        ))),
    }
}

fn check_channel_param(shape: &[usize], channels: usize, name: &str) -> Result<()> {
    if shape != [channels] {
        return Err(Error::shape(format!(
            "{name} shape {shape:?} does not match {channels} channels"
        )));
    }
    Ok(())
}
