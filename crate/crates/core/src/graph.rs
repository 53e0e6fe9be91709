//! Eager tape-based reverse-mode autodiff.
//!
//! A `Graph` records one training step's operations over tensors; values are
//! computed at push time, so batch statistics and loss reports are available
//! while the tape is still being built. `backward` walks the tape in reverse
//! push order (which is a valid reverse-topological order because inputs
//! always precede their consumers) and accumulates gradients keyed by
//! parameter identifier.
//!
//! Parameters live outside the graph in a `ParamStore`; a graph borrows the
//! store immutably, so optimizer updates happen strictly between graphs.
//! Frozen parameters participate in forward values and pass gradients
//! through to their inputs, but never receive gradient entries themselves.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
struct Param<F: Scalar> {
    name: String,
    value: Tensor<F>,
    trainable: bool,
}

/// Named parameter storage shared by every network in a run (SNN, teacher,
/// connectors). Names are unique; iteration orders are deterministic.
#[derive(Debug, Default)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// All ids in insertion order (stable across runs with the same build
    /// sequence, which the determinism guarantees rely on).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Trainable element count; frozen tensors are excluded by definition.
    pub fn count_trainable(&self, ids: &[ParamId]) -> usize {
        ids.iter()
            .filter(|&&id| self.is_trainable(id))
            .map(|&id| self.value(id).numel())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Const,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        // Lowered input columns, retained for the backward pass. These are
        // the dominant per-step allocation, which is exactly why BPTT memory
        // grows with T while the rate pass builds them once.
        cols: Tensor<F>,
        dims: ConvDims,
    },
    AddChanBias {
        x: NodeId,
        b: NodeId,
        c: usize,
        hw: usize,
    },
    // Normalization with externally supplied statistics: mean/var enter as
    // constants, so backward differentiates only through the numerator.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<F>,
        var: Tensor<F>,
        eps: F,
        c: usize,
        hw: usize,
    },
    AvgPool {
        x: NodeId,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    },
    Reshape(NodeId),
    Softmax {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    LogSoftmax {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    NllMean {
        logp: NodeId,
        labels: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    KlTeacherMean {
        student: NodeId,
        teacher: Tensor<F>,
        rows: usize,
        eps: F,
    },
    MeanAll(NodeId),
    // Forward emits a fixed value; backward multiplies the incoming gradient
    // elementwise. With value == input this is the plain custom-gradient
    // node; with an override it is the straight-through rate node.
    StraightThrough {
        x: NodeId,
        multiplier: Tensor<F>,
    },
    // Heaviside step at a threshold; backward uses the caller-evaluated
    // surrogate derivative.
    Threshold {
        u: NodeId,
        surrogate: Tensor<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Graph<'s, F: Scalar> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Backward output: per-parameter gradients plus any explicitly kept
/// node gradients (used by tests probing gradients at interior nodes).
#[derive(Debug, Default)]
pub struct Grads<F: Scalar> {
    pub by_param: HashMap<ParamId, Tensor<F>>,
    pub kept: HashMap<usize, Tensor<F>>,
}

impl<'s, F: Scalar> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Inference graph: every node is grad-free, backward is unavailable.
    pub fn params(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn new_inference(store: &'s ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, false, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.value(id).clone();
        let trainable = self.store.is_trainable(id);
        self.push(value, trainable, Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let value = self.nodes[x.0].value.scale(c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.maxs(F::ZERO));
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Relu(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul on {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::mm_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::Matmul { a, b, m, k, n }))
    }

    /// Cross-correlation of NCHW input with OCKK weights.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d on {xs:?} with {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv2d channels: input has {}, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        let (n, c, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * pad || kw > w_dim + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w_dim + 2 * pad
            )));
        }
        let dims = ConvDims {
            n,
            c,
            h,
            w: w_dim,
            o,
            kh,
            kw,
            stride,
            pad,
        };
        let (y, cols) = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            n,
            c,
            h,
            w_dim,
            o,
            kh,
            kw,
            stride,
            pad,
        );
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(w_dim, kw, stride, pad);
        let value = Tensor::from_vec(vec![n, o, oh, ow], y)?;
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        // Columns are only needed when a backward pass can happen.
        let cols = if rg {
            Tensor::from_vec(vec![cols.len()], cols)?
        } else {
            Tensor::zeros(&[1])
        };
        Ok(self.push(value, rg, Op::Conv2d { x, w, cols, dims }))
    }

    /// y[n,c,*] = x[n,c,*] + b[c]; also covers row-vector bias on [N,F]
    /// activations (hw = 1).
    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[b.0].value.shape().to_vec();
        let (c, hw) = match xs.len() {
            2 => (xs[1], 1),
            4 => (xs[1], xs[2] * xs[3]),
            _ => return Err(Error::Shape(format!("bias add on rank-{} tensor", xs.len()))),
        };
        if bs != [c] {
            return Err(Error::Shape(format!("bias shape {bs:?} for {c} channels")));
        }
        let n = xs[0];
        let mut value = self.nodes[x.0].value.clone();
        {
            let data = value.data_mut();
            let bias = self.nodes[b.0].value.data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let bv = bias[ci];
                    for v in &mut data[base..base + hw] {
                        *v += bv;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::AddChanBias { x, b, c, hw }))
    }

    /// Batch norm with externally supplied per-channel statistics. The stats
    /// are constants of the op: backward is dx = g * gamma / sqrt(var + eps).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (c, hw) = match xs.len() {
            2 => (xs[1], 1),
            4 => (xs[1], xs[2] * xs[3]),
            _ => return Err(Error::Shape(format!("batch norm on rank-{}", xs.len()))),
        };
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!(
                "batch norm stats for {} channels on {c}-channel input",
                mean.len()
            )));
        }
        if self.nodes[gamma.0].value.numel() != c || self.nodes[beta.0].value.numel() != c {
            return Err(Error::Shape("batch norm affine size mismatch".into()));
        }
        let n = xs[0];
        let mut value = self.nodes[x.0].value.clone();
        kernels::bn_normalize_nchw(
            value.data_mut(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            mean,
            var,
            eps,
            n,
            c,
            hw,
        );
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let mean_t = Tensor::from_vec(vec![c], mean.to_vec())?;
        let var_t = Tensor::from_vec(vec![c], var.to_vec())?;
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean_t,
                var: var_t,
                eps,
                c,
                hw,
            },
        ))
    }

    pub fn avg_pool(&mut self, x: NodeId, kh: usize, kw: usize, stride: usize) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("avg pool on rank-{}", xs.len())));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if kh > h || kw > w {
            return Err(Error::Shape(format!("pool window {kh}x{kw} on {h}x{w}")));
        }
        let y = kernels::avg_pool2d_forward(self.nodes[x.0].value.data(), n, c, h, w, kh, kw, stride);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let value = Tensor::from_vec(vec![n, c, oh, ow], y)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::AvgPool {
                x,
                n,
                c,
                h,
                w,
                kh,
                kw,
                stride,
            },
        ))
    }

    /// Global average pool to [N, C].
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global pool on rank-{}", xs.len())));
        }
        let pooled = self.avg_pool(x, xs[2], xs[3], 1)?;
        self.reshape(pooled, &[xs[0], xs[1]])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("softmax on rank-{}", xs.len())));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let y = kernels::softmax_rows(self.nodes[x.0].value.data(), rows, cols);
        let value = Tensor::from_vec(xs, y)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Softmax { x, rows, cols }))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("log softmax on rank-{}", xs.len())));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let y = kernels::log_softmax_rows(self.nodes[x.0].value.data(), rows, cols);
        let value = Tensor::from_vec(xs, y)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::LogSoftmax { x, rows, cols }))
    }

    /// Mean negative log-likelihood of the labeled entries of a log-prob
    /// matrix. Composed with log_softmax this is the cross-entropy loss.
    pub fn nll_mean(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xs = self.nodes[logp.0].value.shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::Shape(format!(
                "nll on {xs:?} with {} labels",
                labels.len()
            )));
        }
        let (rows, cols) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let data = self.nodes[logp.0].value.data();
        let mut acc = F::ZERO;
        for (r, &l) in labels.iter().enumerate() {
            acc += data[r * cols + l];
        }
        let value = Tensor::scalar(-acc / F::from_usize(rows));
        let rg = self.nodes[logp.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::NllMean {
                logp,
                labels: labels.to_vec(),
                rows,
                cols,
            },
        ))
    }

    /// Batch-mean KL(teacher || student) over probability rows, teacher as
    /// the target. Student probabilities below `eps` are clamped (the
    /// documented 1e-9 guard); zero teacher entries contribute nothing.
    pub fn kl_teacher_mean(
        &mut self,
        student: NodeId,
        teacher: &Tensor<F>,
        eps: F,
    ) -> Result<NodeId> {
        let xs = self.nodes[student.0].value.shape().to_vec();
        if xs.len() != 2 || teacher.shape() != xs.as_slice() {
            return Err(Error::Shape(format!(
                "kl on student {xs:?} vs teacher {:?}",
                teacher.shape()
            )));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let tol = F::from_f64(1e-4);
        for (name, probs) in [("student", self.nodes[student.0].value.data()), ("teacher", teacher.data())] {
            for r in 0..rows {
                let s: F = probs[r * cols..(r + 1) * cols].iter().copied().sum();
                if (s - F::ONE).abs() > tol {
                    return Err(Error::Contract(format!(
                        "{name} row {r} is not a probability vector (sum {})",
                        s.to_f64()
                    )));
                }
            }
        }
        let sdata = self.nodes[student.0].value.data();
        let tdata = teacher.data();
        let mut acc = F::ZERO;
        for i in 0..rows * cols {
            let t = tdata[i];
            if t > F::ZERO {
                let s = sdata[i].maxs(eps);
                acc += t * (t.ln() - s.ln());
            }
        }
        let value = Tensor::scalar(acc / F::from_usize(rows));
        let rg = self.nodes[student.0].requires_grad;
        let teacher = teacher.clone();
        Ok(self.push(
            value,
            rg,
            Op::KlTeacherMean {
                student,
                teacher,
                rows,
                eps,
            },
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].value.data();
        let m = data.iter().copied().sum::<F>() / F::from_usize(data.len());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(m), rg, Op::MeanAll(x))
    }

    /// Custom-gradient node: forward returns `value` unchanged; backward
    /// multiplies the incoming gradient elementwise by `multiplier`.
    pub fn custom_node(&mut self, x: NodeId, multiplier: &Tensor<F>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.clone();
        self.straight_through(x, value, multiplier)
    }

    /// Straight-through node: forward emits `value` (independent of the
    /// input's value); backward passes g * multiplier to the input. The rate
    /// pass uses this with value = recorded rate, multiplier = g_T.
    pub fn straight_through(
        &mut self,
        x: NodeId,
        value: Tensor<F>,
        multiplier: &Tensor<F>,
    ) -> Result<NodeId> {
        if value.shape() != self.nodes[x.0].value.shape() {
            return Err(Error::Shape(format!(
                "straight-through value {:?} vs input {:?}",
                value.shape(),
                self.nodes[x.0].value.shape()
            )));
        }
        if multiplier.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "straight-through multiplier {:?} vs value {:?}",
                multiplier.shape(),
                value.shape()
            )));
        }
        let rg = self.nodes[x.0].requires_grad;
        let multiplier = multiplier.clone();
        Ok(self.push(value, rg, Op::StraightThrough { x, multiplier }))
    }

    /// Heaviside spike at threshold `v_th` with a caller-evaluated surrogate
    /// derivative carried for the backward pass.
    pub fn threshold(&mut self, u: NodeId, v_th: F, surrogate: &Tensor<F>) -> Result<NodeId> {
        if surrogate.shape() != self.nodes[u.0].value.shape() {
            return Err(Error::Shape(format!(
                "surrogate {:?} vs membrane {:?}",
                surrogate.shape(),
                self.nodes[u.0].value.shape()
            )));
        }
        let value = self.nodes[u.0]
            .value
            .map(|v| if v >= v_th { F::ONE } else { F::ZERO });
        let rg = self.nodes[u.0].requires_grad;
        let surrogate = surrogate.clone();
        Ok(self.push(value, rg, Op::Threshold { u, surrogate }))
    }

    /// Reverse-mode pass from a scalar loss. Returns parameter gradients and
    /// the gradients of any nodes listed in `keep`.
    pub fn backward(&self, loss: NodeId, keep: &[NodeId]) -> Result<Grads<F>> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::ONE));

        let mut by_param: HashMap<ParamId, Tensor<F>> = HashMap::new();
        let keep_set: Vec<usize> = keep.iter().map(|k| k.0).collect();
        let mut kept: HashMap<usize, Tensor<F>> = HashMap::new();

        // Reverse push order is reverse-topological: each node is finalized
        // exactly once, before any of its inputs.
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if keep_set.contains(&i) {
                kept.insert(i, g.clone());
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => {
                    if self.store.is_trainable(*pid) {
                        match by_param.get_mut(pid) {
                            Some(acc) => acc.add_scaled(&g, F::ONE)?,
                            None => {
                                by_param.insert(*pid, g.clone());
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &g, F::ONE)?;
                    self.accum(&mut grads, *b, &g, F::ONE)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, &g, F::ONE)?;
                    self.accum(&mut grads, *b, &g, -F::ONE)?;
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = g.zip_map(&self.nodes[b.0].value, |gv, bv| gv * bv)?;
                        self.accum(&mut grads, *a, &ga, F::ONE)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = g.zip_map(&self.nodes[a.0].value, |gv, av| gv * av)?;
                        self.accum(&mut grads, *b, &gb, F::ONE)?;
                    }
                }
                Op::Scale(x, c) => {
                    self.accum(&mut grads, *x, &g, *c)?;
                }
                Op::Relu(x) => {
                    if self.nodes[x.0].requires_grad {
                        let gx = g.zip_map(&self.nodes[x.0].value, |gv, xv| {
                            if xv > F::ZERO {
                                gv
                            } else {
                                F::ZERO
                            }
                        })?;
                        self.accum(&mut grads, *x, &gx, F::ONE)?;
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    if self.nodes[a.0].requires_grad {
                        let mut da = Tensor::zeros(&[*m, *k]);
                        kernels::mm_nt(
                            g.data(),
                            self.nodes[b.0].value.data(),
                            da.data_mut(),
                            *m,
                            *n,
                            *k,
                        );
                        self.accum(&mut grads, *a, &da, F::ONE)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = Tensor::zeros(&[*k, *n]);
                        kernels::mm_tn(
                            self.nodes[a.0].value.data(),
                            g.data(),
                            db.data_mut(),
                            *m,
                            *k,
                            *n,
                        );
                        self.accum(&mut grads, *b, &db, F::ONE)?;
                    }
                }
                Op::Conv2d { x, w, cols, dims } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let need_dw = self.nodes[w.0].requires_grad;
                    let (dx, dw) = kernels::conv2d_backward(
                        g.data(),
                        self.nodes[w.0].value.data(),
                        cols.data(),
                        dims.n,
                        dims.c,
                        dims.h,
                        dims.w,
                        dims.o,
                        dims.kh,
                        dims.kw,
                        dims.stride,
                        dims.pad,
                        need_dx,
                    );
                    if let Some(dx) = dx {
                        let dx = Tensor::from_vec(vec![dims.n, dims.c, dims.h, dims.w], dx)?;
                        self.accum(&mut grads, *x, &dx, F::ONE)?;
                    }
                    if need_dw {
                        let dw =
                            Tensor::from_vec(vec![dims.o, dims.c, dims.kh, dims.kw], dw)?;
                        self.accum(&mut grads, *w, &dw, F::ONE)?;
                    }
                }
                Op::AddChanBias { x, b, c, hw } => {
                    self.accum(&mut grads, *x, &g, F::ONE)?;
                    if self.nodes[b.0].requires_grad {
                        let n = g.numel() / (c * hw);
                        let mut db = Tensor::zeros(&[*c]);
                        let dbd = db.data_mut();
                        let gd = g.data();
                        for ni in 0..n {
                            for ci in 0..*c {
                                let base = (ni * c + ci) * hw;
                                let mut s = F::ZERO;
                                for &v in &gd[base..base + hw] {
                                    s += v;
                                }
                                dbd[ci] += s;
                            }
                        }
                        self.accum(&mut grads, *b, &db, F::ONE)?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    c,
                    hw,
                } => {
                    let n = g.numel() / (c * hw);
                    let gd = g.data();
                    let xd = self.nodes[x.0].value.data();
                    let gam = self.nodes[gamma.0].value.data();
                    if self.nodes[x.0].requires_grad {
                        let mut dx = Tensor::zeros(self.nodes[x.0].value.shape());
                        let dxd = dx.data_mut();
                        for ci in 0..*c {
                            let s = gam[ci] / (var.data()[ci] + *eps).sqrt();
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for j in base..base + hw {
                                    dxd[j] = gd[j] * s;
                                }
                            }
                        }
                        self.accum(&mut grads, *x, &dx, F::ONE)?;
                    }
                    if self.nodes[gamma.0].requires_grad {
                        let mut dg = Tensor::zeros(&[*c]);
                        let dgd = dg.data_mut();
                        for ci in 0..*c {
                            let inv = F::ONE / (var.data()[ci] + *eps).sqrt();
                            let mu = mean.data()[ci];
                            let mut s = F::ZERO;
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for j in base..base + hw {
                                    s += gd[j] * (xd[j] - mu) * inv;
                                }
                            }
                            dgd[ci] = s;
                        }
                        self.accum(&mut grads, *gamma, &dg, F::ONE)?;
                    }
                    if self.nodes[beta.0].requires_grad {
                        let mut db = Tensor::zeros(&[*c]);
                        let dbd = db.data_mut();
                        for ci in 0..*c {
                            let mut s = F::ZERO;
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for &v in &gd[base..base + hw] {
                                    s += v;
                                }
                            }
                            dbd[ci] = s;
                        }
                        self.accum(&mut grads, *beta, &db, F::ONE)?;
                    }
                }
                Op::AvgPool {
                    x,
                    n,
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                } => {
                    let dx = kernels::avg_pool2d_backward(g.data(), *n, *c, *h, *w, *kh, *kw, *stride);
                    let dx = Tensor::from_vec(vec![*n, *c, *h, *w], dx)?;
                    self.accum(&mut grads, *x, &dx, F::ONE)?;
                }
                Op::Reshape(x) => {
                    let dx = g.reshaped(self.nodes[x.0].value.shape())?;
                    self.accum(&mut grads, *x, &dx, F::ONE)?;
                }
                Op::Softmax { x, rows, cols } => {
                    if self.nodes[x.0].requires_grad {
                        let y = self.nodes[i].value.data();
                        let gd = g.data();
                        let mut dx = Tensor::zeros(self.nodes[x.0].value.shape());
                        let dxd = dx.data_mut();
                        for r in 0..*rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &gd[r * cols..(r + 1) * cols];
                            let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for cidx in 0..*cols {
                                dxd[r * cols + cidx] = yr[cidx] * (gr[cidx] - dot);
                            }
                        }
                        self.accum(&mut grads, *x, &dx, F::ONE)?;
                    }
                }
                Op::LogSoftmax { x, rows, cols } => {
                    if self.nodes[x.0].requires_grad {
                        let logp = self.nodes[i].value.data();
                        let gd = g.data();
                        let mut dx = Tensor::zeros(self.nodes[x.0].value.shape());
                        let dxd = dx.data_mut();
                        for r in 0..*rows {
                            let lr = &logp[r * cols..(r + 1) * cols];
                            let gr = &gd[r * cols..(r + 1) * cols];
                            let gsum: F = gr.iter().copied().sum();
                            for cidx in 0..*cols {
                                dxd[r * cols + cidx] = gr[cidx] - lr[cidx].exp() * gsum;
                            }
                        }
                        self.accum(&mut grads, *x, &dx, F::ONE)?;
                    }
                }
                Op::NllMean {
                    logp,
                    labels,
                    rows,
                    cols,
                } => {
                    if self.nodes[logp.0].requires_grad {
                        let gs = g.item()?;
                        let mut dx = Tensor::zeros(self.nodes[logp.0].value.shape());
                        let dxd = dx.data_mut();
                        let scale = -gs / F::from_usize(*rows);
                        for (r, &l) in labels.iter().enumerate() {
                            dxd[r * cols + l] = scale;
                        }
                        self.accum(&mut grads, *logp, &dx, F::ONE)?;
                    }
                }
                Op::KlTeacherMean {
                    student,
                    teacher,
                    rows,
                    eps,
                } => {
                    if self.nodes[student.0].requires_grad {
                        let gs = g.item()?;
                        let sdata = self.nodes[student.0].value.data();
                        let mut dx = Tensor::zeros(self.nodes[student.0].value.shape());
                        let dxd = dx.data_mut();
                        let scale = gs / F::from_usize(*rows);
                        for (j, (&t, &s)) in teacher.data().iter().zip(sdata).enumerate() {
                            // d/ds of -t*ln(max(s, eps)) is -t/s above the
                            // clamp and 0 inside it.
                            if t > F::ZERO && s > *eps {
                                dxd[j] = -scale * t / s;
                            }
                        }
                        self.accum(&mut grads, *student, &dx, F::ONE)?;
                    }
                }
                Op::MeanAll(x) => {
                    if self.nodes[x.0].requires_grad {
                        let gs = g.item()?;
                        let numel = self.nodes[x.0].value.numel();
                        let dx = Tensor::full(
                            self.nodes[x.0].value.shape(),
                            gs / F::from_usize(numel),
                        );
                        self.accum(&mut grads, *x, &dx, F::ONE)?;
                    }
                }
                Op::StraightThrough { x, multiplier } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = g.zip_map(multiplier, |gv, mv| gv * mv)?;
                        self.accum(&mut grads, *x, &dx, F::ONE)?;
                    }
                }
                Op::Threshold { u, surrogate } => {
                    if self.nodes[u.0].requires_grad {
                        let du = g.zip_map(surrogate, |gv, sv| gv * sv)?;
                        self.accum(&mut grads, *u, &du, F::ONE)?;
                    }
                }
            }
        }
        Ok(Grads { by_param, kept })
    }

    fn accum(
        &self,
        grads: &mut [Option<Tensor<F>>],
        target: NodeId,
        g: &Tensor<F>,
        scale: F,
    ) -> Result<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_scaled(g, scale)?,
            slot @ None => {
                *slot = Some(if scale == F::ONE {
                    g.clone()
                } else {
                    g.scale(scale)
                });
            }
        }
        Ok(())
    }
}
