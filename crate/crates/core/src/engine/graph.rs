//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output and whatever forward values its
//! adjoint needs. `backward` walks the nodes in exact reverse insertion order,
//! which is a topological order by construction.

use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{Result, SfcError};

pub const NORM_EPS: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    L2Normalize,
    PairwiseCosine,
    GlobalAvgPool,
    ChannelsLast,
    Reshape,
    SliceRows,
    MaskedMean,
    Add,
    Scale,
    RowDotMean,
    InfoNce,
    WeightedSum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::PairwiseCosine => "pairwise_cosine",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::ChannelsLast => "channels_last",
            OpKind::Reshape => "reshape",
            OpKind::SliceRows => "slice_rows",
            OpKind::MaskedMean => "masked_mean",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::RowDotMean => "row_dot_mean",
            OpKind::InfoNce => "info_nce",
            OpKind::WeightedSum => "weighted_sum",
        }
    }
}

/// Batch-norm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch mean and biased variance from a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        geom: ConvGeom,
        has_bias: bool,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        n: usize,
        c: usize,
        hw: usize,
    },
    Relu,
    L2Normalize {
        norms: Vec<T>,
        d: usize,
    },
    PairwiseCosine {
        a_hat: Vec<T>,
        b_hat: Vec<T>,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
        m: usize,
        k: usize,
        d: usize,
    },
    GlobalAvgPool {
        hw: usize,
    },
    ChannelsLast {
        n: usize,
        c: usize,
        hw: usize,
    },
    Reshape,
    SliceRows {
        start: usize,
        row_len: usize,
    },
    MaskedMean {
        mask: Vec<T>,
        total: T,
    },
    Add,
    Scale(T),
    RowDotMean {
        rows: usize,
    },
    InfoNce {
        probs: Vec<T>,
        queue: Vec<T>,
        k: usize,
        d: usize,
        tau: T,
    },
    WeightedSum {
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu => OpKind::Relu,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::PairwiseCosine { .. } => OpKind::PairwiseCosine,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::ChannelsLast { .. } => OpKind::ChannelsLast,
            Op::Reshape => OpKind::Reshape,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::MaskedMean { .. } => OpKind::MaskedMean,
            Op::Add => OpKind::Add,
            Op::Scale(_) => OpKind::Scale,
            Op::RowDotMean { .. } => OpKind::RowDotMean,
            Op::InfoNce { .. } => OpKind::InfoNce,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// A single forward pass and its adjoint.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn normalize_rows<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::c(NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / d.max(1));
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let n = (src.iter().fold(T::zero(), |a, &v| a + v * v) + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = v / n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Adjoint of row normalization: `da = (du - u <u, du>) / n`.
fn normalize_rows_adjoint<T: Scalar>(u: &[T], norms: &[T], du: &[T], d: usize) -> Vec<T> {
    let mut da = vec![T::zero(); u.len()];
    for (r, &n) in norms.iter().enumerate() {
        let (ur, gr) = (&u[r * d..(r + 1) * d], &du[r * d..(r + 1) * d]);
        let dot = ur.iter().zip(gr).fold(T::zero(), |a, (&x, &y)| a + x * y);
        for ((o, &x), &y) in da[r * d..(r + 1) * d].iter_mut().zip(ur).zip(gr) {
            *o = (y - x * dot) / n;
        }
    }
    da
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` for nodes that
    /// do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Test hook: perturb the adjoint of every `kind` node by 1%.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> Result<Var> {
        if let Some(i) = value.first_non_finite() {
            return Err(SfcError::NonFinite {
                op: format!("{} (forward, element {i})", op.kind().name()),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(SfcError::shape(
                "conv2d",
                format!("input {xs:?} and kernel {ks:?} must both be rank 4"),
            ));
        }
        if xs[1] != ks[1] {
            return Err(SfcError::shape(
                "conv2d",
                format!("input channels {} != kernel channels {}", xs[1], ks[1]),
            ));
        }
        if stride == 0 {
            return Err(SfcError::Config("conv2d stride must be >= 1".into()));
        }
        if ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding {
            return Err(SfcError::shape(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    ks[2],
                    ks[3],
                    xs[2] + 2 * padding,
                    xs[3] + 2 * padding
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(SfcError::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ks[0]),
                ));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.n, geom.o, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x.0, kernel.0];
        inputs.extend(bias.map(|b| b.0));
        self.push(
            Op::Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
            inputs,
            value,
        )
    }

    /// Batch normalization over `[N,C,H,W]` or `[N,C]`.
    ///
    /// Returns the batch statistics in train mode so the caller can update
    /// its running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(SfcError::shape(
                "batch_norm",
                format!("input {xs:?} must be [N,C] or [N,C,H,W]"),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(SfcError::shape(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::c(BN_EPS);
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                if n * hw < 2 {
                    return Err(SfcError::DegenerateBatch(n * hw));
                }
                let (m, v) = kernels::channel_stats(self.value(x).data(), n, c, hw);
                let stats = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                };
                (m, v, Some(stats), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(SfcError::shape(
                        "batch_norm",
                        format!("running stats of length {} for {c} channels", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let v = self.push(
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
                n,
                c,
                hw,
            },
            vec![x.0, gamma.0, beta.0],
            value,
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, vec![x.0], value)
    }

    /// Normalize along the last axis by `sqrt(sum sq + 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| SfcError::shape("l2_normalize", "rank-0 input"))?;
        if d == 0 {
            return Err(SfcError::shape("l2_normalize", "empty last axis"));
        }
        let (u, norms) = normalize_rows(self.value(x).data(), d);
        let value = Tensor::new(shape, u)?;
        self.push(Op::L2Normalize { norms, d }, vec![x.0], value)
    }

    /// `S[i,j] = cos(a_i, b_j)` for `a: [M,D]`, `b: [K,D]`.
    pub fn pairwise_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] || as_[1] == 0 {
            return Err(SfcError::shape(
                "pairwise_cosine",
                format!("expected [M,D] and [K,D] with D >= 1, got {as_:?} and {bs:?}"),
            ));
        }
        let (m, k, d) = (as_[0], bs[0], as_[1]);
        let (a_hat, a_norm) = normalize_rows(self.value(a).data(), d);
        let (b_hat, b_norm) = normalize_rows(self.value(b).data(), d);
        let mut s = vec![T::zero(); m * k];
        T::gemm(
            m, d, k, T::one(), &a_hat, d as isize, 1, &b_hat, 1, d as isize, T::zero(), &mut s,
            k as isize, 1,
        );
        let value = Tensor::new(vec![m, k], s)?;
        self.push(
            Op::PairwiseCosine {
                a_hat,
                b_hat,
                a_norm,
                b_norm,
                m,
                k,
                d,
            },
            vec![a.0, b.0],
            value,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(SfcError::shape(
                "global_avg_pool",
                format!("expected non-empty [N,C,H,W], got {xs:?}"),
            ));
        }
        let hw = xs[2] * xs[3];
        let scale = T::one() / T::from_usize(hw).expect("hw");
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * scale)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        self.push(Op::GlobalAvgPool { hw }, vec![x.0], value)
    }

    /// `[N,C,H,W] -> [N,H,W,C]`.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(SfcError::shape("channels_last", format!("{xs:?} is not rank 4")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(vec![n, xs[2], xs[3], c], out)?;
        self.push(Op::ChannelsLast { n, c, hw }, vec![x.0], value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape, vec![x.0], value)
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start > end || end > xs[0] {
            return Err(SfcError::shape(
                "slice_rows",
                format!("rows {start}..{end} of {xs:?}"),
            ));
        }
        let row_len: usize = xs[1..].iter().product();
        let data = self.value(x).data()[start * row_len..end * row_len].to_vec();
        let mut shape = xs.clone();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        self.push(Op::SliceRows { start, row_len }, vec![x.0], value)
    }

    /// `sum(S ⊙ M) / sum(M)` with a constant mask.
    pub fn masked_mean(&mut self, s: Var, mask: &[T]) -> Result<Var> {
        let sd = self.value(s).data();
        if sd.len() != mask.len() {
            return Err(SfcError::shape(
                "masked_mean",
                format!("{} values vs mask of {}", sd.len(), mask.len()),
            ));
        }
        let total = mask.iter().fold(T::zero(), |a, &v| a + v);
        if total <= T::zero() {
            return Err(SfcError::EmptyMask);
        }
        let sum = sd
            .iter()
            .zip(mask)
            .fold(T::zero(), |a, (&x, &m)| a + x * m);
        let value = Tensor::scalar(sum / total);
        self.push(
            Op::MaskedMean {
                mask: mask.to_vec(),
                total,
            },
            vec![s.0],
            value,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() {
            return Err(SfcError::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Add, vec![a.0, b.0], value)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![x.0], value)
    }

    /// Mean over rows of the row-wise dot product of two `[N,D]` tensors.
    pub fn row_dot_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || as_ != bs || as_[0] == 0 {
            return Err(SfcError::shape(
                "row_dot_mean",
                format!("{as_:?} vs {bs:?}"),
            ));
        }
        let rows = as_[0];
        let sum = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |s, (&x, &y)| s + x * y);
        let value = Tensor::scalar(sum / T::from_usize(rows).expect("rows"));
        self.push(Op::RowDotMean { rows }, vec![a.0, b.0], value)
    }

    /// Batch-mean InfoNCE with constant negatives `queue: [K,D]`.
    pub fn info_nce(&mut self, z1: Var, z2: Var, queue: &Tensor<T>, tau: T) -> Result<Var> {
        if tau <= T::zero() {
            return Err(SfcError::Config(format!("InfoNCE temperature must be > 0, got {tau}")));
        }
        let (s1, s2) = (self.shape(z1).to_vec(), self.shape(z2).to_vec());
        if s1.len() != 2 || s1 != s2 || s1[0] == 0 {
            return Err(SfcError::shape("info_nce", format!("{s1:?} vs {s2:?}")));
        }
        let (n, d) = (s1[0], s1[1]);
        if queue.rank() != 2 || queue.shape()[1] != d {
            return Err(SfcError::shape(
                "info_nce",
                format!("queue {:?} for dim {d}", queue.shape()),
            ));
        }
        let k = queue.shape()[0];
        if k == 0 {
            return Err(SfcError::Config("InfoNCE queue is empty".into()));
        }
        let (a, b, q) = (self.value(z1).data(), self.value(z2).data(), queue.data());
        let dot = |x: &[T], y: &[T]| x.iter().zip(y).fold(T::zero(), |s, (&u, &v)| s + u * v);
        let mut probs = vec![T::zero(); n * (k + 1)];
        let mut total = T::zero();
        for i in 0..n {
            let ai = &a[i * d..(i + 1) * d];
            let row = &mut probs[i * (k + 1)..(i + 1) * (k + 1)];
            row[0] = dot(ai, &b[i * d..(i + 1) * d]) / tau;
            for j in 0..k {
                row[j + 1] = dot(ai, &q[j * d..(j + 1) * d]) / tau;
            }
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            // -log p_0 = -(l_0 - mx) + log z
            total = total - row[0].ln() + z.ln();
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let value = Tensor::scalar(total / T::from_usize(n).expect("n"));
        self.push(
            Op::InfoNce {
                probs,
                queue: q.to_vec(),
                k,
                d,
                tau,
            },
            vec![z1.0, z2.0],
            value,
        )
    }

    /// `sum_i w_i x_i` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xd = self.value(x).data();
        if xd.len() != weights.len() {
            return Err(SfcError::shape(
                "weighted_sum",
                format!("{} values vs {} weights", xd.len(), weights.len()),
            ));
        }
        let s = xd.iter().zip(weights).fold(T::zero(), |a, (&x, &w)| a + x * w);
        let value = Tensor::scalar(s);
        self.push(
            Op::WeightedSum {
                weights: weights.to_vec(),
            },
            vec![x.0],
            value,
        )
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(SfcError::BackwardTwice);
        }
        if self.value(output).numel() != 1 {
            return Err(SfcError::shape(
                "backward",
                format!("output {:?} is not a scalar", self.shape(output)),
            ));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let kind = node.op.kind();
            let mut input_grads = self.adjoint(idx, &g);
            if self.fault == Some(kind) {
                let f = T::c(1.01);
                for ig in input_grads.iter_mut().flatten() {
                    ig.iter_mut().for_each(|v| *v = *v * f);
                }
            }
            // keep the upstream gradient readable for inspection
            self.grads[idx] = Some(g);
            let inputs = self.nodes[idx].inputs.clone();
            for (slot, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[slot].requires_grad {
                    continue;
                }
                if let Some(i) = ig.iter().position(|v| !v.is_finite()) {
                    return Err(SfcError::NonFinite {
                        op: format!("{} (backward, element {i})", kind.name()),
                    });
                }
                match &mut self.grads[slot] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&ig)
                        .for_each(|(a, &b)| *a = *a + b),
                    empty @ None => {
                        *empty = Some(Tensor::new(self.nodes[slot].value.shape().to_vec(), ig)?)
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, idx: usize, slot: usize) -> bool {
        self.nodes[self.nodes[idx].inputs[slot]].requires_grad
    }

    fn input_value(&self, idx: usize, slot: usize) -> &Tensor<T> {
        &self.nodes[self.nodes[idx].inputs[slot]].value
    }

    fn adjoint(&self, idx: usize, g: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { geom, has_bias } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.input_value(idx, 0).data(),
                    self.input_value(idx, 1).data(),
                    gd,
                    self.wants(idx, 0),
                    self.wants(idx, 1),
                );
                let mut out = vec![dx, dw];
                if *has_bias {
                    out.push(Some(db));
                }
                out
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
                n,
                c,
                hw,
            } => {
                let gamma = self.input_value(idx, 1).data();
                let (n, c, hw) = (*n, *c, *hw);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                if *train {
                    let m = T::from_usize(n * hw).expect("count");
                    for ch in 0..c {
                        let k = gamma[ch] * inv_std[ch] / m;
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = k * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                } else {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = gd[i] * gamma[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Relu => {
                let x = self.input_value(idx, 0).data();
                let dx = x
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(dx)]
            }
            Op::L2Normalize { norms, d } => {
                vec![Some(normalize_rows_adjoint(
                    node.value.data(),
                    norms,
                    gd,
                    *d,
                ))]
            }
            Op::PairwiseCosine {
                a_hat,
                b_hat,
                a_norm,
                b_norm,
                m,
                k,
                d,
            } => {
                let (m, k, d) = (*m, *k, *d);
                let da = self.wants(idx, 0).then(|| {
                    let mut dah = vec![T::zero(); m * d];
                    T::gemm(
                        m, k, d, T::one(), gd, k as isize, 1, b_hat, d as isize, 1, T::zero(),
                        &mut dah, d as isize, 1,
                    );
                    normalize_rows_adjoint(a_hat, a_norm, &dah, d)
                });
                let db = self.wants(idx, 1).then(|| {
                    let mut dbh = vec![T::zero(); k * d];
                    T::gemm(
                        k, m, d, T::one(), gd, 1, k as isize, a_hat, d as isize, 1, T::zero(),
                        &mut dbh, d as isize, 1,
                    );
                    normalize_rows_adjoint(b_hat, b_norm, &dbh, d)
                });
                vec![da, db]
            }
            Op::GlobalAvgPool { hw } => {
                let scale = T::one() / T::from_usize(*hw).expect("hw");
                let dx = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, *hw))
                    .collect();
                vec![Some(dx)]
            }
            Op::ChannelsLast { n, c, hw } => {
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..*n {
                    for ch in 0..*c {
                        for p in 0..*hw {
                            dx[(b * c + ch) * hw + p] = gd[(b * hw + p) * c + ch];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(gd.to_vec())],
            Op::SliceRows { start, row_len } => {
                let mut dx = vec![T::zero(); self.input_value(idx, 0).numel()];
                dx[start * row_len..start * row_len + gd.len()].copy_from_slice(gd);
                vec![Some(dx)]
            }
            Op::MaskedMean { mask, total } => {
                let s = gd[0] / *total;
                vec![Some(mask.iter().map(|&m| m * s).collect())]
            }
            Op::Add => vec![Some(gd.to_vec()), Some(gd.to_vec())],
            Op::Scale(f) => vec![Some(gd.iter().map(|&v| v * *f).collect())],
            Op::RowDotMean { rows } => {
                let s = gd[0] / T::from_usize(*rows).expect("rows");
                let a = self.input_value(idx, 0).data();
                let b = self.input_value(idx, 1).data();
                vec![
                    Some(b.iter().map(|&v| v * s).collect()),
                    Some(a.iter().map(|&v| v * s).collect()),
                ]
            }
            Op::InfoNce {
                probs,
                queue,
                k,
                d,
                tau,
            } => {
                let (k, d) = (*k, *d);
                let a = self.input_value(idx, 0).data();
                let b = self.input_value(idx, 1).data();
                let n = a.len() / d;
                let s = gd[0] / (T::from_usize(n).expect("n") * *tau);
                let mut da = vec![T::zero(); a.len()];
                let mut db = vec![T::zero(); b.len()];
                for i in 0..n {
                    let p = &probs[i * (k + 1)..(i + 1) * (k + 1)];
                    let w0 = (p[0] - T::one()) * s;
                    for t in 0..d {
                        let mut acc = w0 * b[i * d + t];
                        for j in 0..k {
                            acc = acc + p[j + 1] * s * queue[j * d + t];
                        }
                        da[i * d + t] = acc;
                        db[i * d + t] = w0 * a[i * d + t];
                    }
                }
                vec![Some(da), Some(db)]
            }
            Op::WeightedSum { weights } => {
                vec![Some(weights.iter().map(|&w| w * gd[0]).collect())]
            }
        }
    }
}
