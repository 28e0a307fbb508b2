//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward sweep. Node ids are handed out in creation order,
//! which is a topological order, so backward is a single reverse scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvGeometry, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layer behaviour switch for dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel statistics of one batch-norm forward pass in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// `running ← momentum·running + (1 − momentum)·batch`
    pub fn update_running(&self, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = momentum * *r + keep * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = momentum * *r + keep * b;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        filters: NodeId,
        geom: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        rows: usize,
    },
    Softmax {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        stats: Option<BatchStats<T>>,
    },
    Dropout {
        input: NodeId,
        mask: Option<Vec<T>>,
    },
    Reshape {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MeanSquaredError {
        pred: NodeId,
        targets: Vec<T>,
    },
    HingeLogit {
        logits: NodeId,
        target: usize,
        runner_up: usize,
        active: bool,
    },
    TanhBox {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Sum {
        input: NodeId,
    },
    L2Norm {
        input: NodeId,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the backward seed with respect to every leaf that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// A recorded computation. One graph per forward pass; graphs are cheap to
/// create and are not reused after `backward`.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        None => *slot = Some(contribution),
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or attack variable).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.node(id)?.value)
    }

    /// Statistics recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats<T>> {
        match &self.nodes.get(id.0)?.op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// 2-D convolution without bias. Input is `H×W×C` or `N×H×W×C`,
    /// filters are `K×K×C×F`.
    pub fn conv2d(&mut self, input: NodeId, filters: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let w = &self.node(filters)?.value;
        let (batched, xs) = match x.shape() {
            [h, w, c] => (false, [1, *h, *w, *c]),
            [n, h, w, c] => (true, [*n, *h, *w, *c]),
            _ => return Err(Error::shape("conv2d", x.shape(), w.shape())),
        };
        let [k, k2, c, f] = match w.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => return Err(Error::shape("conv2d", x.shape(), w.shape())),
        };
        if k != k2 || c != xs[3] {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let (out_h, out_w) = match (
            conv::conv_output_dim(xs[1], k, stride, padding),
            conv::conv_output_dim(xs[2], k, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::shape("conv2d", x.shape(), w.shape())),
        };
        let geom = ConvGeometry {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            in_c: c,
            kernel: k,
            filters: f,
            stride,
            out_h,
            out_w,
            pad_top: conv::leading_pad(xs[1], k, stride, padding),
            pad_left: conv::leading_pad(xs[2], k, stride, padding),
        };
        let (out, cols) = conv::conv_forward(&geom, x.data(), w.data());
        let shape = if batched {
            vec![geom.batch, out_h, out_w, f]
        } else {
            vec![out_h, out_w, f]
        };
        let keep_cols = self.needs(filters);
        let requires = keep_cols || self.needs(input);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                filters,
                geom,
                cols: keep_cols.then_some(cols),
            },
            requires,
        ))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let b = &self.node(bias)?.value;
        let c = *x.shape().last().unwrap_or(&0);
        if b.rank() != 1 || b.len() != c {
            return Err(Error::shape("bias_add", x.shape(), b.shape()));
        }
        let bd = b.data();
        let out: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let shape = x.shape().to_vec();
        let requires = self.needs(input) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BiasAdd { input, bias }, requires))
    }

    /// 2×2 max pooling with stride 2; ties go to the lowest flat index.
    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let (batched, [n, h, w, c]) = match x.shape() {
            [h, w, c] => (false, [1, *h, *w, *c]),
            [n, h, w, c] => (true, [*n, *h, *w, *c]),
            other => {
                return Err(Error::invalid(
                    "maxpool2x2",
                    format!("expected HxWxC or NxHxWxC input, got {other:?}"),
                ))
            }
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "maxpool2x2",
                format!("spatial dimensions must be even, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xd[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx as u32);
                    }
                }
            }
        }
        let shape = if batched {
            vec![n, oh, ow, c]
        } else {
            vec![oh, ow, c]
        };
        let requires = self.needs(input);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool { input, argmax }, requires))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        let requires = self.needs(input);
        Ok(self.push(out, Op::Relu { input }, requires))
    }

    /// Affine map `x·W + b`. Input is `n` or `N×n`, weights `n×m`, bias `m`.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let w = &self.node(weights)?.value;
        let b = &self.node(bias)?.value;
        let (rows, inner, batched) = match x.shape() {
            [n] => (1, *n, false),
            [r, n] => (*r, *n, true),
            _ => return Err(Error::shape("dense", x.shape(), w.shape())),
        };
        let m = match w.shape() {
            [n, m] if *n == inner => *m,
            _ => return Err(Error::shape("dense", x.shape(), w.shape())),
        };
        if b.shape() != [m] {
            return Err(Error::shape("dense", w.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(b.data());
        }
        T::gemm(rows, inner, m, x.data(), false, w.data(), false, &mut out, true);
        let shape = if batched { vec![rows, m] } else { vec![m] };
        let requires = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Dense {
                input,
                weights,
                bias,
                rows,
            },
            requires,
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let m = *x.shape().last().unwrap_or(&0);
        if m < 2 {
            return Err(Error::invalid("softmax", format!("needs at least 2 classes, got {m}")));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let shape = x.shape().to_vec();
        let requires = self.needs(input);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input }, requires))
    }

    /// Batch normalization over every axis but the last.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
        eps: T,
    ) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let c = *x.shape().last().unwrap_or(&0);
        for stat in [
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
            running_mean,
            running_var,
        ] {
            if stat.shape() != [c] {
                return Err(Error::shape("batch_norm", x.shape(), stat.shape()));
            }
        }
        let count = x.len() / c.max(1);
        let xd = x.data();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if count == 0 {
                    return Err(Error::invalid("batch_norm", "empty batch in train mode"));
                }
                let mut mean = vec![0f64; c];
                for (i, &v) in xd.iter().enumerate() {
                    mean[i % c] += v.as_f64();
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0f64; c];
                for (i, &v) in xd.iter().enumerate() {
                    let d = v.as_f64() - mean[i % c];
                    var[i % c] += d * d;
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();
                let var: Vec<T> = var.into_iter().map(T::from_f64_lossy).collect();
                (
                    mean.clone(),
                    var.clone(),
                    Some(BatchStats { mean, var }),
                )
            }
            Mode::Infer => (running_mean.data().to_vec(), running_var.data().to_vec(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let ch = i % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        let shape = x.shape().to_vec();
        let requires = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
            requires,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1 − fraction)` so that
    /// infer mode is the identity.
    pub fn dropout(&mut self, input: NodeId, fraction: f64, mode: Mode, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(
                "dropout",
                format!("fraction must lie in [0, 1), got {fraction}"),
            ));
        }
        let x = &self.node(input)?.value;
        let requires = self.needs(input);
        if mode == Mode::Infer || fraction == 0.0 {
            let out = x.clone();
            return Ok(self.push(out, Op::Dropout { input, mask: None }, requires));
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - fraction));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < fraction {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Dropout {
                input,
                mask: Some(mask),
            },
            requires,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.node(input)?.value.reshape(shape)?;
        let requires = self.needs(input);
        Ok(self.push(out, Op::Reshape { input }, requires))
    }

    /// Collapses everything after the leading (batch) axis.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.node(input)?.value.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("flatten", format!("needs a batch axis, got {shape:?}")));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(input, &[shape[0], rest])
    }

    /// Mean cross-entropy of integer labels against logits, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = &self.node(logits)?.value;
        let (rows, k) = match z.shape() {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            other => {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("logits must be K or NxK, got {other:?}"),
                ))
            }
        };
        if labels.len() != rows || labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("{} labels for {rows} rows of {k} classes", labels.len()),
            ));
        }
        let mut probs = z.data().to_vec();
        let mut total = 0f64;
        for (row, (p, &label)) in z.data().chunks(k).zip(probs.chunks_mut(k).zip(labels)) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += (lse - row[label]).as_f64();
            softmax_in_place(p);
        }
        let value = Tensor::scalar(T::from_f64_lossy(total / rows as f64));
        let requires = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            requires,
        ))
    }

    /// Mean of squared residuals between predictions and targets.
    pub fn mean_squared_error(&mut self, pred: NodeId, targets: &[T]) -> Result<NodeId> {
        let p = &self.node(pred)?.value;
        if p.len() != targets.len() {
            return Err(Error::invalid(
                "mean_squared_error",
                format!("{} predictions for {} targets", p.len(), targets.len()),
            ));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::from_f64_lossy(total / targets.len() as f64));
        let requires = self.needs(pred);
        Ok(self.push(
            value,
            Op::MeanSquaredError {
                pred,
                targets: targets.to_vec(),
            },
            requires,
        ))
    }

    /// `(max_{j≠t} z_j − z_t)⁺` for a single logit vector.
    pub fn hinge_logit(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let z = &self.node(logits)?.value;
        let k = match z.shape() {
            [k] | [1, k] => *k,
            other => {
                return Err(Error::invalid(
                    "hinge_logit",
                    format!("expects one logit vector, got {other:?}"),
                ))
            }
        };
        if target >= k || k < 2 {
            return Err(Error::invalid(
                "hinge_logit",
                format!("target {target} invalid for {k} classes"),
            ));
        }
        let zd = z.data();
        let mut runner_up = usize::MAX;
        for j in (0..k).filter(|&j| j != target) {
            if runner_up == usize::MAX || zd[j] > zd[runner_up] {
                runner_up = j;
            }
        }
        let s = zd[runner_up] - zd[target];
        let active = s > T::zero();
        let value = Tensor::scalar(if active { s } else { T::zero() });
        let requires = self.needs(logits);
        Ok(self.push(
            value,
            Op::HingeLogit {
                logits,
                target,
                runner_up,
                active,
            },
            requires,
        ))
    }

    /// `(tanh(w) + 1) / 2`, mapping the real line onto `(0, 1)`.
    pub fn tanh_box(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.node(input)?.value.map(|v| (v.tanh() + T::one()) / (T::one() + T::one()));
        let requires = self.needs(input);
        Ok(self.push(out, Op::TanhBox { input }, requires))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.node(a)?.value.add(&self.node(b)?.value)?;
        let requires = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, requires))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.node(a)?.value.sub(&self.node(b)?.value)?;
        let requires = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, requires))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId> {
        let out = self.node(input)?.value.map(|v| v * factor);
        let requires = self.needs(input);
        Ok(self.push(out, Op::Scale { input, factor }, requires))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total: T = self.node(input)?.value.data().iter().copied().sum();
        let requires = self.needs(input);
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, requires))
    }

    /// Euclidean norm; its gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, input: NodeId) -> Result<NodeId> {
        let norm = self.node(input)?.value.l2_norm();
        let requires = self.needs(input);
        Ok(self.push(Tensor::scalar(norm), Op::L2Norm { input }, requires))
    }

    /// Reverse sweep from `output`. `seed` defaults to ones of the output shape.
    pub fn backward(&self, output: NodeId, seed: Option<&Tensor<T>>) -> Result<Gradients<T>> {
        let out_node = self.node(output)?;
        let seed = match seed {
            Some(s) if s.shape() != out_node.value.shape() => {
                return Err(Error::shape("backward", out_node.value.shape(), s.shape()))
            }
            Some(s) => s.data().to_vec(),
            None => vec![T::one(); out_node.value.len()],
        };
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !out_node.requires_grad {
            return Ok(Gradients { grads: result });
        }
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                result[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { grads: result })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let two = T::one() + T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                filters,
                geom,
                cols,
            } => {
                if self.needs(*filters) {
                    if let Some(cols) = cols {
                        accumulate(&mut grads[filters.0], conv::conv_grad_filters(geom, cols, g));
                    }
                }
                if self.needs(*input) {
                    let w = self.nodes[filters.0].value.data();
                    accumulate(&mut grads[input.0], conv::conv_grad_input(geom, w, g));
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.needs(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let mut gb = vec![T::zero(); c];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
                if self.needs(*input) {
                    accumulate(&mut grads[input.0], g.to_vec());
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.needs(*input) {
                    let mut gi = vec![T::zero(); self.nodes[input.0].value.len()];
                    for (&src, &v) in argmax.iter().zip(g) {
                        gi[src as usize] += v;
                    }
                    accumulate(&mut grads[input.0], gi);
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.nodes[input.0].value.data();
                    let gi = x
                        .iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[input.0], gi);
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
                rows,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weights.0].value;
                let (n, m) = (w.shape()[0], w.shape()[1]);
                if self.needs(*weights) {
                    let mut gw = vec![T::zero(); n * m];
                    T::gemm(n, *rows, m, x.data(), true, g, false, &mut gw, false);
                    accumulate(&mut grads[weights.0], gw);
                }
                if self.needs(*bias) {
                    let mut gb = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
                if self.needs(*input) {
                    let mut gx = vec![T::zero(); rows * n];
                    T::gemm(*rows, m, n, g, false, w.data(), true, &mut gx, false);
                    accumulate(&mut grads[input.0], gx);
                }
            }
            Op::Softmax { input } => {
                if self.needs(*input) {
                    let y = node.value.data();
                    let m = *node.value.shape().last().unwrap();
                    let mut gi = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(m).zip(g.chunks(m)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        gi.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                    }
                    accumulate(&mut grads[input.0], gi);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let c = inv_std.len();
                let gam = self.nodes[gamma.0].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                    sum_g[i % c] += d;
                    sum_gx[i % c] += d * h;
                }
                if self.needs(*input) {
                    let gi = if stats.is_some() {
                        let count = T::from_usize(g.len() / c).unwrap();
                        g.iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(i, (&d, &h))| {
                                let ch = i % c;
                                gam[ch] * inv_std[ch] / count * (count * d - sum_g[ch] - h * sum_gx[ch])
                            })
                            .collect()
                    } else {
                        g.iter()
                            .enumerate()
                            .map(|(i, &d)| d * gam[i % c] * inv_std[i % c])
                            .collect()
                    };
                    accumulate(&mut grads[input.0], gi);
                }
                if self.needs(*gamma) {
                    accumulate(&mut grads[gamma.0], sum_gx);
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], sum_g);
                }
            }
            Op::Dropout { input, mask } => {
                if self.needs(*input) {
                    let gi = match mask {
                        Some(mask) => g.iter().zip(mask).map(|(&d, &m)| d * m).collect(),
                        None => g.to_vec(),
                    };
                    accumulate(&mut grads[input.0], gi);
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    accumulate(&mut grads[input.0], g.to_vec());
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let mut gi: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        gi[r * k + l] -= scale;
                    }
                    accumulate(&mut grads[logits.0], gi);
                }
            }
            Op::MeanSquaredError { pred, targets } => {
                if self.needs(*pred) {
                    let p = self.nodes[pred.0].value.data();
                    let scale = two * g[0] / T::from_usize(targets.len()).unwrap();
                    let gi = p.iter().zip(targets).map(|(&a, &b)| (a - b) * scale).collect();
                    accumulate(&mut grads[pred.0], gi);
                }
            }
            Op::HingeLogit {
                logits,
                target,
                runner_up,
                active,
            } => {
                if self.needs(*logits) {
                    let mut gi = vec![T::zero(); self.nodes[logits.0].value.len()];
                    if *active {
                        gi[*runner_up] = g[0];
                        gi[*target] = -g[0];
                    }
                    accumulate(&mut grads[logits.0], gi);
                }
            }
            Op::TanhBox { input } => {
                if self.needs(*input) {
                    // y = (t + 1)/2  ⇒  dy/dw = (1 − t²)/2 = 2y(1 − y)
                    let gi = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &d)| d * two * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads[input.0], gi);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    accumulate(&mut grads[input.0], g.iter().map(|&v| v * *factor).collect());
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let n = self.nodes[input.0].value.len();
                    accumulate(&mut grads[input.0], vec![g[0]; n]);
                }
            }
            Op::L2Norm { input } => {
                if self.needs(*input) {
                    let x = self.nodes[input.0].value.data();
                    let norm = node.value.item();
                    let gi = if norm > T::zero() {
                        x.iter().map(|&v| v / norm * g[0]).collect()
                    } else {
                        vec![T::zero(); x.len()]
                    };
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
