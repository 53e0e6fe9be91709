//! Walkers that run a network's piece tree in every phase the engine needs:
//! differentiable graph execution (teacher training, the rate pass, unrolled
//! per-step training) and raw tensor execution (the T-step spike phase,
//! where no graph may be retained so memory stays flat in T).
//!
//! Both walkers visit pieces in the same order and share the low-level
//! kernels, so a block range run by either produces identical arithmetic.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::kernels;
use crate::models::{BnSite, Connector, Network, Piece};
use crate::scalar::Scalar;
use crate::spiking::{lif_step, LifConfig, LifState, RateStats};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Pending writes to batch-norm running buffers. Graphs borrow the parameter
/// store immutably, so running statistics cannot be written while a graph is
/// alive; updates accumulate here and land after the graph is dropped.
/// Repeated updates to one site compose sequentially within a batch.
#[derive(Debug, Default)]
pub struct RunningUpdates<F: Scalar> {
    pending: HashMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> RunningUpdates<F> {
    pub fn new() -> Self {
        RunningUpdates {
            pending: HashMap::new(),
        }
    }

    fn current<'a>(&'a self, store: &'a ParamStore<F>, id: ParamId) -> &'a Tensor<F> {
        self.pending.get(&id).unwrap_or_else(|| store.value(id))
    }

    /// new = (1 - momentum) * old + momentum * batch_value
    pub fn push(&mut self, store: &ParamStore<F>, id: ParamId, batch_value: &[F]) -> Result<()> {
        let momentum = F::from_f64(BN_MOMENTUM);
        let keep = F::ONE - momentum;
        let old = self.current(store, id);
        if old.numel() != batch_value.len() {
            return Err(Error::Shape(format!(
                "running buffer {} vs batch stat {}",
                old.numel(),
                batch_value.len()
            )));
        }
        let data: Vec<F> = old
            .data()
            .iter()
            .zip(batch_value)
            .map(|(&o, &b)| o * keep + b * momentum)
            .collect();
        let shape = old.shape().to_vec();
        self.pending.insert(id, Tensor::from_vec(shape, data)?);
        Ok(())
    }

    pub fn apply(self, store: &mut ParamStore<F>) {
        for (id, value) in self.pending {
            *store.value_mut(id) = value;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Streaming per-channel statistics over the concatenation of all spike-phase
/// steps. A single merged batch is returned bitwise-unchanged, so at T=1 the
/// recorded statistics equal that step's batch statistics exactly; further
/// batches fold in through pairwise mean/M2 combination.
#[derive(Debug, Clone)]
pub struct BnAccum<F: Scalar> {
    batches: usize,
    count: usize,
    mean: Vec<F>,
    /// With one batch merged this holds that batch's biased variance;
    /// afterwards it holds M2 (the summed squared deviation from the mean).
    second: Vec<F>,
}

impl<F: Scalar> BnAccum<F> {
    pub fn new() -> Self {
        BnAccum {
            batches: 0,
            count: 0,
            mean: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn merge(&mut self, count: usize, mean: &[F], var: &[F]) -> Result<()> {
        if count == 0 {
            return Err(Error::Contract("merging empty batch statistics".into()));
        }
        if mean.len() != var.len() {
            return Err(Error::Shape("mean/var length mismatch".into()));
        }
        if self.batches == 0 {
            self.batches = 1;
            self.count = count;
            self.mean = mean.to_vec();
            self.second = var.to_vec();
            return Ok(());
        }
        if mean.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "merging {}-channel stats into {}-channel accumulator",
                mean.len(),
                self.mean.len()
            )));
        }
        if self.batches == 1 {
            let n = F::from_usize(self.count);
            for m2 in self.second.iter_mut() {
                *m2 = *m2 * n;
            }
        }
        let na = F::from_usize(self.count);
        let nb = F::from_usize(count);
        let nab = F::from_usize(self.count + count);
        for ci in 0..self.mean.len() {
            let delta = mean[ci] - self.mean[ci];
            self.mean[ci] = self.mean[ci] + delta * (nb / nab);
            self.second[ci] = self.second[ci] + var[ci] * nb + delta * delta * (na * nb / nab);
        }
        self.count += count;
        self.batches += 1;
        Ok(())
    }

    /// (mean, biased variance) over everything merged so far.
    pub fn finalize(&self) -> Result<(Vec<F>, Vec<F>)> {
        match self.batches {
            0 => Err(Error::Contract("finalizing empty statistics accumulator".into())),
            1 => Ok((self.mean.clone(), self.second.clone())),
            _ => {
                let inv = F::ONE / F::from_usize(self.count);
                let var: Vec<F> = self.second.iter().map(|&m2| (m2 * inv).maxs(F::ZERO)).collect();
                Ok((self.mean.clone(), var))
            }
        }
    }
}

impl<F: Scalar> Default for BnAccum<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Recorded activation-site summary from a finished spike phase: the firing
/// rate (forward value of the site in the rate pass) and the accumulated
/// surrogate gain (its backward multiplier).
#[derive(Debug, Clone)]
pub struct ActRecord<F: Scalar> {
    pub rate: Tensor<F>,
    pub gain: Tensor<F>,
    pub mean_input: Tensor<F>,
}

/// How activation sites execute inside a differentiable graph.
pub enum ActPlan<'a, F: Scalar> {
    /// ANN semantics.
    Relu,
    /// Rate-pass semantics: the site becomes a straight-through node whose
    /// forward value is the recorded rate and whose backward multiplier is
    /// the recorded gain. `acts` is indexed by activation-site id.
    Rate { acts: &'a [Option<ActRecord<F>>] },
    /// Unrolled per-step semantics: the site advances a membrane recurrence
    /// in graph nodes and emits a surrogate-backed spike node. `states`
    /// persists across walker calls, one call per time step.
    Bptt {
        cfg: &'a LifConfig<F>,
        states: &'a mut Vec<Option<BpttState>>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct BpttState {
    pub u: NodeId,
    pub s: NodeId,
}

/// How normalization sites obtain their statistics inside a graph.
pub enum BnPlan<'a, F: Scalar> {
    /// Statistics of the current batch; optionally queue running updates.
    Batch {
        updates: Option<&'a mut RunningUpdates<F>>,
    },
    /// Frozen running statistics (evaluation, frozen tails, teacher use).
    Running,
    /// Externally recorded statistics indexed by normalization-site id
    /// (the rate pass replays the spike phase's concatenated statistics).
    Fixed {
        stats: &'a [Option<(Vec<F>, Vec<F>)>],
    },
}

fn norm_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        r => Err(Error::Shape(format!("normalization on rank-{r} tensor"))),
    }
}

/// Apply one normalization site inside a graph under the given plan.
pub fn bn_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    site: &BnSite,
    x: NodeId,
    plan: &mut BnPlan<'_, F>,
) -> Result<NodeId> {
    let (mean, var): (Vec<F>, Vec<F>) = match plan {
        BnPlan::Batch { updates } => {
            let (n, c, hw) = norm_dims(g.value(x).shape())?;
            let (m, v) = kernels::nchw_channel_moments(g.value(x).data(), n, c, hw);
            if let Some(upd) = updates.as_deref_mut() {
                upd.push(g.params(), site.running_mean, &m)?;
                upd.push(g.params(), site.running_var, &v)?;
            }
            (m, v)
        }
        BnPlan::Running => (
            g.params().value(site.running_mean).data().to_vec(),
            g.params().value(site.running_var).data().to_vec(),
        ),
        BnPlan::Fixed { stats } => {
            let entry = stats
                .get(site.id)
                .and_then(Option::as_ref)
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "no recorded statistics for normalization site {}",
                        site.id
                    ))
                })?;
            (entry.0.clone(), entry.1.clone())
        }
    };
    let gamma = g.param(site.gamma);
    let beta = g.param(site.beta);
    g.batch_norm(x, gamma, beta, &mean, &var, F::from_f64(BN_EPS))
}

fn act_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    id: usize,
    x: NodeId,
    plan: &mut ActPlan<'_, F>,
) -> Result<NodeId> {
    match plan {
        ActPlan::Relu => Ok(g.relu(x)),
        ActPlan::Rate { acts } => {
            let rec = acts.get(id).and_then(Option::as_ref).ok_or_else(|| {
                Error::Contract(format!("no recorded rate for activation site {id}"))
            })?;
            g.straight_through(x, rec.rate.clone(), &rec.gain)
        }
        ActPlan::Bptt { cfg, states } => {
            if states.len() <= id {
                states.resize(id + 1, None);
            }
            // Membrane: u_t = lambda * (u_{t-1} - v_th * s_{t-1}) + I_t, with
            // u_0 = s_0 = 0 so the first step reduces to the input current.
            let u = match states[id] {
                None => x,
                Some(BpttState { u, s }) => {
                    let sv = g.scale(s, cfg.v_th);
                    let d = g.sub(u, sv)?;
                    let ld = g.scale(d, cfg.lambda);
                    g.add(ld, x)?
                }
            };
            let sg = cfg.surrogate_derivative(g.value(u));
            let s = g.threshold(u, cfg.v_th, &sg)?;
            states[id] = Some(BpttState { u, s });
            Ok(s)
        }
    }
}

fn run_pieces_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    pieces: &[Piece],
    mut x: NodeId,
    act: &mut ActPlan<'_, F>,
    bn: &mut BnPlan<'_, F>,
) -> Result<NodeId> {
    for piece in pieces {
        x = match piece {
            Piece::Conv { w, stride, pad } => {
                let wn = g.param(*w);
                g.conv2d(x, wn, *stride, *pad)?
            }
            Piece::Bn(site) => bn_graph(g, site, x, bn)?,
            Piece::Act { id } => act_graph(g, *id, x, act)?,
            Piece::Residual { main, shortcut } => {
                let m = run_pieces_graph(g, main, x, act, bn)?;
                let s = if shortcut.is_empty() {
                    x
                } else {
                    run_pieces_graph(g, shortcut, x, act, bn)?
                };
                g.add(m, s)?
            }
            Piece::GlobalPool => g.global_avg_pool(x)?,
            Piece::Linear { w, b } => {
                let wn = g.param(*w);
                let y = g.matmul(x, wn)?;
                let bb = g.param(*b);
                g.add_chan_bias(y, bb)?
            }
        };
    }
    Ok(x)
}

/// Execute a contiguous block range in a graph. Returns the final output
/// node and the output node of every block in the range (tap points).
pub fn forward_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    net: &Network,
    blocks: Range<usize>,
    input: NodeId,
    act: &mut ActPlan<'_, F>,
    bn: &mut BnPlan<'_, F>,
) -> Result<(NodeId, Vec<NodeId>)> {
    if blocks.end > net.blocks.len() || blocks.start >= blocks.end {
        return Err(Error::Contract(format!(
            "block range {blocks:?} on a {}-block network",
            net.blocks.len()
        )));
    }
    let mut x = input;
    let mut outs = Vec::with_capacity(blocks.len());
    for bi in blocks {
        x = run_pieces_graph(g, &net.blocks[bi].pieces, x, act, bn)?;
        outs.push(x);
    }
    Ok((x, outs))
}

/// Connector applied in a graph: 1x1 conv -> norm -> ReLU -> 1x1 conv + bias.
pub fn connector_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    conn: &Connector,
    x: NodeId,
    bn: &mut BnPlan<'_, F>,
) -> Result<NodeId> {
    let w1 = g.param(conn.conv1);
    let y = g.conv2d(x, w1, 1, 0)?;
    let y = bn_graph(g, &conn.bn, y, bn)?;
    let y = g.relu(y);
    let w2 = g.param(conn.conv2);
    let y = g.conv2d(y, w2, 1, 0)?;
    let b = g.param(conn.bias2);
    g.add_chan_bias(y, b)
}

/// How activation sites execute in the raw (graph-free) walker.
pub enum RawActPlan<'a, F: Scalar> {
    Relu,
    /// One spike-phase step: advance per-site membrane state and streaming
    /// rate statistics. Call the walker once per time step.
    Lif {
        cfg: &'a LifConfig<F>,
        states: &'a mut Vec<Option<LifState<F>>>,
        stats: &'a mut Vec<Option<RateStats<F>>>,
        total_steps: usize,
    },
}

/// How normalization sites obtain statistics in the raw walker.
pub enum RawBnPlan<'a, F: Scalar> {
    /// Batch statistics of the current step, streamed into per-site
    /// accumulators for the rate pass to replay.
    Batch {
        accum: &'a mut Vec<Option<BnAccum<F>>>,
    },
    Running,
}

fn bn_raw<F: Scalar>(
    store: &ParamStore<F>,
    site: &BnSite,
    mut x: Tensor<F>,
    plan: &mut RawBnPlan<'_, F>,
) -> Result<Tensor<F>> {
    let (n, c, hw) = norm_dims(x.shape())?;
    let (mean, var): (Vec<F>, Vec<F>) = match plan {
        RawBnPlan::Batch { accum } => {
            let (m, v) = kernels::nchw_channel_moments(x.data(), n, c, hw);
            if accum.len() <= site.id {
                accum.resize(site.id + 1, None);
            }
            accum[site.id]
                .get_or_insert_with(BnAccum::new)
                .merge(n * hw, &m, &v)?;
            (m, v)
        }
        RawBnPlan::Running => (
            store.value(site.running_mean).data().to_vec(),
            store.value(site.running_var).data().to_vec(),
        ),
    };
    kernels::bn_normalize_nchw(
        x.data_mut(),
        store.value(site.gamma).data(),
        store.value(site.beta).data(),
        &mean,
        &var,
        F::from_f64(BN_EPS),
        n,
        c,
        hw,
    );
    Ok(x)
}

fn act_raw<F: Scalar>(id: usize, x: Tensor<F>, plan: &mut RawActPlan<'_, F>) -> Result<Tensor<F>> {
    match plan {
        RawActPlan::Relu => Ok(x.map(|v| v.maxs(F::ZERO))),
        RawActPlan::Lif {
            cfg,
            states,
            stats,
            total_steps,
        } => {
            if states.len() <= id {
                states.resize_with(id + 1, || None);
            }
            if stats.len() <= id {
                stats.resize_with(id + 1, || None);
            }
            let state = match states[id].take() {
                Some(s) => s,
                None => LifState::zeros(x.shape()),
            };
            if stats[id].is_none() {
                stats[id] = Some(RateStats::new(x.shape(), *total_steps)?);
            }
            let u_prev = state.u.clone();
            let next = lif_step(state, &x, cfg)?;
            stats[id]
                .as_mut()
                .expect("just initialized")
                .update(&u_prev, &next.u, &next.s, &x, cfg)?;
            let out = next.s.clone();
            states[id] = Some(next);
            Ok(out)
        }
    }
}

fn run_pieces_raw<F: Scalar>(
    store: &ParamStore<F>,
    pieces: &[Piece],
    mut x: Tensor<F>,
    act: &mut RawActPlan<'_, F>,
    bn: &mut RawBnPlan<'_, F>,
) -> Result<Tensor<F>> {
    for piece in pieces {
        x = match piece {
            Piece::Conv { w, stride, pad } => {
                let ws = store.value(*w);
                let xs = x.shape().to_vec();
                if xs.len() != 4 || ws.shape().len() != 4 || xs[1] != ws.shape()[1] {
                    return Err(Error::Shape(format!(
                        "conv on {:?} with weight {:?}",
                        xs,
                        ws.shape()
                    )));
                }
                let (n, c, h, w_) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws.shape()[0], ws.shape()[2], ws.shape()[3]);
                let (y, _cols) = kernels::conv2d_forward(
                    x.data(),
                    ws.data(),
                    n,
                    c,
                    h,
                    w_,
                    o,
                    kh,
                    kw,
                    *stride,
                    *pad,
                );
                let oh = kernels::conv_out_dim(h, kh, *stride, *pad);
                let ow = kernels::conv_out_dim(w_, kw, *stride, *pad);
                Tensor::from_vec(vec![n, o, oh, ow], y)?
            }
            Piece::Bn(site) => bn_raw(store, site, x, bn)?,
            Piece::Act { id } => act_raw(*id, x, act)?,
            Piece::Residual { main, shortcut } => {
                let m = run_pieces_raw(store, main, x.clone(), act, bn)?;
                let s = if shortcut.is_empty() {
                    x
                } else {
                    run_pieces_raw(store, shortcut, x, act, bn)?
                };
                m.zip_map(&s, |a, b| a + b)?
            }
            Piece::GlobalPool => {
                let xs = x.shape().to_vec();
                if xs.len() != 4 {
                    return Err(Error::Shape(format!("global pool on {xs:?}")));
                }
                let (n, c, h, w_) = (xs[0], xs[1], xs[2], xs[3]);
                let y = kernels::avg_pool2d_forward(x.data(), n, c, h, w_, h, w_, 1);
                Tensor::from_vec(vec![n, c], y)?
            }
            Piece::Linear { w, b } => {
                let ws = store.value(*w);
                let xs = x.shape().to_vec();
                if xs.len() != 2 || ws.shape().len() != 2 || xs[1] != ws.shape()[0] {
                    return Err(Error::Shape(format!(
                        "linear on {:?} with weight {:?}",
                        xs,
                        ws.shape()
                    )));
                }
                let (m, k, n) = (xs[0], xs[1], ws.shape()[1]);
                let mut y = Tensor::zeros(&[m, n]);
                kernels::mm_nn(x.data(), ws.data(), y.data_mut(), m, k, n);
                let bias = store.value(*b).data();
                {
                    let yd = y.data_mut();
                    for r in 0..m {
                        for j in 0..n {
                            yd[r * n + j] += bias[j];
                        }
                    }
                }
                y
            }
        };
    }
    Ok(x)
}

/// Execute a contiguous block range without building a graph. Returns the
/// final output and, when `collect_taps` is set, each block's output.
pub fn forward_raw<F: Scalar>(
    store: &ParamStore<F>,
    net: &Network,
    blocks: Range<usize>,
    input: Tensor<F>,
    act: &mut RawActPlan<'_, F>,
    bn: &mut RawBnPlan<'_, F>,
    collect_taps: bool,
) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
    if blocks.end > net.blocks.len() || blocks.start >= blocks.end {
        return Err(Error::Contract(format!(
            "block range {blocks:?} on a {}-block network",
            net.blocks.len()
        )));
    }
    let mut x = input;
    let mut outs = Vec::new();
    for bi in blocks {
        x = run_pieces_raw(store, &net.blocks[bi].pieces, x, act, bn)?;
        if collect_taps {
            outs.push(x.clone());
        }
    }
    Ok((x, outs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_connector, build_network, ArchSpec};
    use crate::rng;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            name: "tiny".into(),
            in_channels: 1,
            image_hw: (8, 8),
            num_classes: 3,
            stem_channels: 4,
            stem_stride: 1,
            stages: vec![
                crate::models::StageSpec { channels: 4, blocks: 1, stride: 1 },
                crate::models::StageSpec { channels: 8, blocks: 1, stride: 2 },
            ],
            block_kind: crate::models::BlockKind::Residual,
        }
    }

    fn input(n: usize) -> Tensor<f64> {
        let mut r = rng::stream(9, "data");
        Tensor::from_vec(vec![n, 1, 8, 8], rng::normal_vec(&mut r, n * 64, 1.0)).unwrap()
    }

    #[test]
    fn graph_and_raw_walkers_agree_bitwise_in_eval_mode() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(10, "ann");
        let net = build_network(&mut store, &small_arch(), "m", &mut r).unwrap();
        let x = input(2);

        let (raw_out, raw_taps) = forward_raw(
            &store,
            &net,
            0..net.blocks.len(),
            x.clone(),
            &mut RawActPlan::Relu,
            &mut RawBnPlan::Running,
            true,
        )
        .unwrap();

        let mut g = Graph::new_inference(&store);
        let xin = g.constant(x);
        let (gout, gtaps) = forward_graph(
            &mut g,
            &net,
            0..net.blocks.len(),
            xin,
            &mut ActPlan::Relu,
            &mut BnPlan::Running,
        )
        .unwrap();
        assert_eq!(g.value(gout).data(), raw_out.data());
        for (tn, rn) in gtaps.iter().zip(&raw_taps) {
            assert_eq!(g.value(*tn).data(), rn.data());
        }
    }

    #[test]
    fn partition_identity_block_chain_equals_single_range() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(11, "ann");
        let net = build_network(&mut store, &small_arch(), "m", &mut r).unwrap();
        let x = input(2);
        let nb = net.blocks.len();

        let (whole, _) = forward_raw(
            &store,
            &net,
            0..nb,
            x.clone(),
            &mut RawActPlan::Relu,
            &mut RawBnPlan::Running,
            false,
        )
        .unwrap();

        // Same blocks one at a time, feeding each output forward.
        let mut y = x;
        for bi in 0..nb {
            let (out, _) = forward_raw(
                &store,
                &net,
                bi..bi + 1,
                y,
                &mut RawActPlan::Relu,
                &mut RawBnPlan::Running,
                false,
            )
            .unwrap();
            y = out;
        }
        assert_eq!(whole.data(), y.data());
        assert_eq!(whole.shape(), y.shape());
    }

    #[test]
    fn accumulator_single_batch_is_bitwise_and_two_batches_match_concat() {
        // Single merge returns the inputs untouched.
        let mut a = BnAccum::<f64>::new();
        a.merge(4, &[0.25, -1.5], &[0.125, 2.0]).unwrap();
        let (m, v) = a.finalize().unwrap();
        assert_eq!(m, vec![0.25, -1.5]);
        assert_eq!(v, vec![0.125, 2.0]);

        // Two merges reproduce moments of the concatenated sample.
        let xs1 = [1.0, 2.0, 3.0];
        let xs2 = [10.0, 20.0, 30.0, 40.0];
        let stats = |xs: &[f64]| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            (m, v)
        };
        let (m1, v1) = stats(&xs1);
        let (m2, v2) = stats(&xs2);
        let mut acc = BnAccum::<f64>::new();
        acc.merge(xs1.len(), &[m1], &[v1]).unwrap();
        acc.merge(xs2.len(), &[m2], &[v2]).unwrap();
        let (mc, vc) = acc.finalize().unwrap();
        let all: Vec<f64> = xs1.iter().chain(&xs2).copied().collect();
        let (me, ve) = stats(&all);
        assert!((mc[0] - me).abs() < 1e-12);
        assert!((vc[0] - ve).abs() < 1e-12);

        assert!(BnAccum::<f64>::new().finalize().is_err());
    }

    #[test]
    fn running_updates_compose_sequentially() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("bn.running_mean", Tensor::from_vec(vec![1], vec![0.0]).unwrap(), false)
            .unwrap();
        let mut upd = RunningUpdates::new();
        upd.push(&store, id, &[1.0]).unwrap(); // 0.9*0 + 0.1*1 = 0.1
        upd.push(&store, id, &[1.0]).unwrap(); // 0.9*0.1 + 0.1*1 = 0.19
        upd.apply(&mut store);
        let got = store.value(id).data()[0];
        assert!((got - 0.19).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn bptt_sites_reproduce_raw_membrane_trajectory_bitwise() {
        let cfg = LifConfig::<f64>::default_rectangular();
        let shape = vec![2, 3];
        let mut r = rng::stream(12, "data");
        let inputs: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_vec(shape.clone(), rng::uniform_vec(&mut r, 6, 0.0, 2.0)).unwrap())
            .collect();

        // Raw trajectory.
        let mut state = LifState::zeros(&shape);
        let mut raw_spikes = Vec::new();
        for x in &inputs {
            state = lif_step(state, x, &cfg).unwrap();
            raw_spikes.push(state.s.clone());
        }

        // Graph trajectory through the activation-site plan.
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new_inference(&store);
        let mut states: Vec<Option<BpttState>> = Vec::new();
        let mut plan = ActPlan::Bptt {
            cfg: &cfg,
            states: &mut states,
        };
        for (t, x) in inputs.iter().enumerate() {
            let xn = g.constant(x.clone());
            let s = act_graph(&mut g, 0, xn, &mut plan).unwrap();
            assert_eq!(g.value(s).data(), raw_spikes[t].data(), "step {t}");
        }
    }

    #[test]
    fn rate_plan_overrides_forward_value_with_recorded_rate() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new_inference(&store);
        let x = g.constant(Tensor::from_vec(vec![1, 2], vec![5.0, -3.0]).unwrap());
        let acts = vec![Some(ActRecord {
            rate: Tensor::from_vec(vec![1, 2], vec![0.25, 0.75]).unwrap(),
            gain: Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            mean_input: Tensor::zeros(&[1, 2]),
        })];
        let mut plan = ActPlan::Rate { acts: &acts };
        let y = act_graph(&mut g, 0, x, &mut plan).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.75]);
        // A site without a record is a contract violation.
        let mut plan = ActPlan::Rate { acts: &acts };
        assert!(act_graph(&mut g, 1, x, &mut plan).is_err());
    }

    #[test]
    fn identity_connector_passes_rates_through_running_norm() {
        // Fresh running stats are (0, 1); with identity convs and zero bias
        // the connector is x / sqrt(1 + eps), within 1e-4 of the input.
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(13, "connectors");
        let conn = build_connector(&mut store, "c", 1, 3, 3, &mut r).unwrap();
        let mut rx = rng::stream(14, "data");
        let x = Tensor::from_vec(vec![2, 3, 2, 2], rng::uniform_vec(&mut rx, 24, 0.0, 1.0)).unwrap();
        let mut g = Graph::new_inference(&store);
        let xn = g.constant(x.clone());
        let y = connector_graph(&mut g, &conn, xn, &mut BnPlan::Running).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_connector_with_batch_stats_standardizes_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(15, "connectors");
        let conn = build_connector(&mut store, "c", 1, 2, 2, &mut r).unwrap();
        let mut rx = rng::stream(16, "data");
        let x = Tensor::from_vec(vec![4, 2, 3, 3], rng::normal_vec(&mut rx, 72, 3.0)).unwrap();
        let mut g = Graph::new_inference(&store);
        let xn = g.constant(x);
        let mut plan = BnPlan::Batch { updates: None };
        let y = connector_graph(&mut g, &conn, xn, &mut plan).unwrap();
        // Negative standardized values are clipped by the interior ReLU, so
        // check moments of the pre-ReLU signal via the positive half only:
        // output equals relu(standardized(x)), whose per-channel max stays
        // well below the raw scale of x (std 3).
        let (m, v) = kernels::nchw_channel_moments(g.value(y).data(), 4, 2, 9);
        for c in 0..2 {
            assert!(m[c] >= 0.0 && m[c] < 1.0, "mean {}", m[c]);
            assert!(v[c] < 1.0, "var {}", v[c]);
        }
    }

    #[test]
    fn walker_rejects_bad_block_ranges() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(17, "ann");
        let net = build_network(&mut store, &small_arch(), "m", &mut r).unwrap();
        let x = input(1);
        let res = forward_raw(
            &store,
            &net,
            0..net.blocks.len() + 1,
            x,
            &mut RawActPlan::Relu,
            &mut RawBnPlan::Running,
            false,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
