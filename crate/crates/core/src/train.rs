//! The two-phase training loop and its reference baseline.
//!
//! Rate mode runs T spike passes with no gradient state (raw walker), records
//! per-site firing rates, surrogate gains, and concatenated normalization
//! statistics, then builds one differentiable pass over those rates. BPTT
//! mode unrolls all T steps into a single graph. At T=1 the two modes are
//! arithmetically identical by construction, which the tests pin down.

use crate::error::{Error, Result};
use crate::exec::{
    forward_graph, forward_raw, ActPlan, ActRecord, BnPlan, BpttState, RawActPlan, RawBnPlan,
    RunningUpdates,
};
use crate::graph::{Grads, Graph, NodeId, ParamStore};
use crate::kernels;
use crate::loss::{ce_from_logits, total_loss, LossReport, LossWeights};
use crate::models::{BnSite, Connector, Network, Piece};
use crate::optim::Sgd;
use crate::scalar::Scalar;
use crate::spiking::{LifConfig, LifState, RateStats};
use crate::tensor::Tensor;

/// Per-step network input over the spike phase.
#[derive(Debug, Clone)]
pub enum Encoded<F: Scalar> {
    /// Same current every step (direct coding).
    Constant(Tensor<F>),
    /// One tensor per step (stochastic rate coding).
    PerStep(Vec<Tensor<F>>),
}

impl<F: Scalar> Encoded<F> {
    pub fn at(&self, t: usize) -> &Tensor<F> {
        match self {
            Encoded::Constant(x) => x,
            Encoded::PerStep(xs) => &xs[t],
        }
    }

    pub fn check_steps(&self, t_steps: usize) -> Result<()> {
        match self {
            Encoded::Constant(_) => Ok(()),
            Encoded::PerStep(xs) if xs.len() == t_steps => Ok(()),
            Encoded::PerStep(xs) => Err(Error::Contract(format!(
                "{} encoded steps for a {}-step phase",
                xs.len(),
                t_steps
            ))),
        }
    }

    /// Mean input over the phase; for constant coding this is the input
    /// itself, bitwise.
    pub fn mean(&self, t_steps: usize) -> Result<Tensor<F>> {
        match self {
            Encoded::Constant(x) => Ok(x.clone()),
            Encoded::PerStep(xs) => {
                self.check_steps(t_steps)?;
                let mut acc = xs[0].clone();
                for x in &xs[1..] {
                    acc.add_scaled(x, F::ONE)?;
                }
                Ok(acc.scale(F::ONE / F::from_usize(t_steps)))
            }
        }
    }
}

/// Everything the rate pass needs from a finished spike phase.
#[derive(Debug, Clone)]
pub struct SpikeOutcome<F: Scalar> {
    /// Per activation site: rate, gain, mean input current.
    pub acts: Vec<Option<ActRecord<F>>>,
    /// Per normalization site: statistics over the concatenated steps.
    /// Empty when the phase ran with frozen (running) statistics.
    pub bn_stats: Vec<Option<(Vec<F>, Vec<F>)>>,
    /// Mean encoded input across steps; the rate pass consumes this.
    pub mean_input: Tensor<F>,
}

/// T gradient-free forward passes. `train_stats` selects per-step batch
/// normalization with streaming concatenated statistics (training) versus
/// frozen running statistics (evaluation). State is created fresh inside the
/// call, so stale state from a previous batch cannot leak in.
pub fn spike_phase<F: Scalar>(
    store: &ParamStore<F>,
    net: &Network,
    encoded: &Encoded<F>,
    t_steps: usize,
    cfg: &LifConfig<F>,
    train_stats: bool,
) -> Result<SpikeOutcome<F>> {
    if t_steps == 0 {
        return Err(Error::Contract("spike phase over zero steps".into()));
    }
    encoded.check_steps(t_steps)?;
    let body = 0..net.blocks.len() - 1;
    let mut states: Vec<Option<LifState<F>>> = Vec::new();
    let mut stats: Vec<Option<RateStats<F>>> = Vec::new();
    let mut accum: Vec<Option<crate::exec::BnAccum<F>>> = Vec::new();
    for t in 0..t_steps {
        let x = encoded.at(t).clone();
        let mut act = RawActPlan::Lif {
            cfg,
            states: &mut states,
            stats: &mut stats,
            total_steps: t_steps,
        };
        if train_stats {
            let mut bn = RawBnPlan::Batch { accum: &mut accum };
            forward_raw(store, net, body.clone(), x, &mut act, &mut bn, false)?;
        } else {
            let mut bn = RawBnPlan::Running;
            forward_raw(store, net, body.clone(), x, &mut act, &mut bn, false)?;
        }
    }
    let mut acts = Vec::with_capacity(stats.len());
    for s in &stats {
        acts.push(match s {
            None => None,
            Some(st) => {
                let (rate, gain, mean_input) = st.finalize()?;
                Some(ActRecord {
                    rate,
                    gain,
                    mean_input,
                })
            }
        });
    }
    let mut bn_stats = Vec::with_capacity(accum.len());
    for a in &accum {
        bn_stats.push(match a {
            None => None,
            Some(acc) => Some(acc.finalize()?),
        });
    }
    Ok(SpikeOutcome {
        acts,
        bn_stats,
        mean_input: encoded.mean(t_steps)?,
    })
}

fn bn_sites_of(pieces: &[Piece], out: &mut Vec<BnSite>) {
    for p in pieces {
        match p {
            Piece::Bn(site) => out.push(*site),
            Piece::Residual { main, shortcut } => {
                bn_sites_of(main, out);
                bn_sites_of(shortcut, out);
            }
            _ => {}
        }
    }
}

/// All normalization sites of a network, in execution order.
pub fn bn_sites(net: &Network) -> Vec<BnSite> {
    let mut out = Vec::new();
    for b in &net.blocks {
        bn_sites_of(&b.pieces, &mut out);
    }
    out
}

/// Fold a spike phase's concatenated statistics into the network's running
/// buffers (one momentum update per site per batch).
pub fn apply_spike_bn_updates<F: Scalar>(
    store: &mut ParamStore<F>,
    net: &Network,
    outcome: &SpikeOutcome<F>,
) -> Result<()> {
    let mut upd = RunningUpdates::new();
    for site in bn_sites(net) {
        if let Some(Some((mean, var))) = outcome.bn_stats.get(site.id) {
            upd.push(store, site.running_mean, mean)?;
            upd.push(store, site.running_var, var)?;
        }
    }
    upd.apply(store);
    Ok(())
}

/// The differentiable rate pass: block outputs (tap features) plus logits.
pub struct RatePass {
    pub logits: NodeId,
    /// Output node of every non-head block; index = tap position.
    pub taps: Vec<NodeId>,
}

/// Build the single differentiable pass over recorded rates. `train_stats`
/// replays the spike phase's concatenated statistics; otherwise running
/// statistics are used (evaluation).
pub fn rate_phase<F: Scalar>(
    g: &mut Graph<'_, F>,
    net: &Network,
    outcome: &SpikeOutcome<F>,
    train_stats: bool,
) -> Result<RatePass> {
    let input = g.constant(outcome.mean_input.clone());
    let nb = net.blocks.len();
    let mut act = ActPlan::Rate {
        acts: &outcome.acts,
    };
    let (logits, outs) = if train_stats {
        let mut bn = BnPlan::Fixed {
            stats: &outcome.bn_stats,
        };
        forward_graph(g, net, 0..nb, input, &mut act, &mut bn)?
    } else {
        let mut bn = BnPlan::Running;
        forward_graph(g, net, 0..nb, input, &mut act, &mut bn)?
    };
    let taps = outs[..nb - 1].to_vec();
    Ok(RatePass { logits, taps })
}

/// Hybrid model forward: connector on an SNN tap feature, then the frozen
/// teacher tail (blocks k+1..n and the head), then softmax.
/// Returns (logits, probabilities).
pub fn hybrid_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    teacher: &Network,
    conn: &Connector,
    tap_feature: NodeId,
    conn_bn: &mut BnPlan<'_, F>,
) -> Result<(NodeId, NodeId)> {
    if conn.tap + 1 >= teacher.blocks.len() {
        return Err(Error::Config(format!(
            "tap {} leaves no teacher tail to attach",
            conn.tap
        )));
    }
    let mapped = crate::exec::connector_graph(g, conn, tap_feature, conn_bn)?;
    let (logits, _) = forward_graph(
        g,
        teacher,
        conn.tap + 1..teacher.blocks.len(),
        mapped,
        &mut ActPlan::Relu,
        &mut BnPlan::Running,
    )?;
    let probs = g.softmax(logits)?;
    Ok((logits, probs))
}

/// Teacher probabilities on a batch in inference mode, detached.
pub fn teacher_probs<F: Scalar>(
    store: &ParamStore<F>,
    teacher: &Network,
    images: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new_inference(store);
    let x = g.constant(images.clone());
    let (logits, _) = forward_graph(
        &mut g,
        teacher,
        0..teacher.blocks.len(),
        x,
        &mut ActPlan::Relu,
        &mut BnPlan::Running,
    )?;
    let lv = g.value(logits);
    let shape = lv.shape().to_vec();
    let probs = kernels::softmax_rows(lv.data(), shape[0], shape[1]);
    Tensor::from_vec(shape, probs)
}

/// One ANN-guided distillation step (Algorithm order: teacher forward, spike
/// phase, rate pass, hybrid forwards, total loss, backward, optimizer step
/// over SNN and connector parameters).
#[allow(clippy::too_many_arguments)]
pub fn distill_train_step<F: Scalar>(
    store: &mut ParamStore<F>,
    snn: &Network,
    teacher: &Network,
    connectors: &[Connector],
    weights: &LossWeights<F>,
    cfg: &LifConfig<F>,
    opt: &mut Sgd<F>,
    lr: F,
    images: &Tensor<F>,
    encoded: &Encoded<F>,
    labels: &[usize],
    t_steps: usize,
) -> Result<LossReport<F>> {
    if connectors.len() != weights.betas.len() {
        return Err(Error::Config(format!(
            "{} connectors for {} block weights",
            connectors.len(),
            weights.betas.len()
        )));
    }
    let y_a = teacher_probs(store, teacher, images)?;
    let outcome = spike_phase(store, snn, encoded, t_steps, cfg, true)?;

    let mut conn_updates = RunningUpdates::new();
    let (grads, report) = {
        let mut g = Graph::new(store);
        let rate = rate_phase(&mut g, snn, &outcome, true)?;
        let mut hybrids = Vec::with_capacity(connectors.len());
        for conn in connectors {
            let tap = *rate.taps.get(conn.tap).ok_or_else(|| {
                Error::Config(format!(
                    "connector tap {} outside the {} rate taps",
                    conn.tap,
                    rate.taps.len()
                ))
            })?;
            let mut conn_bn = BnPlan::Batch {
                updates: Some(&mut conn_updates),
            };
            hybrids.push(hybrid_forward(&mut g, teacher, conn, tap, &mut conn_bn)?);
        }
        let tl = total_loss(&mut g, rate.logits, labels, &y_a, &hybrids, weights)?;
        let report = tl.report(&g)?;
        let grads = g.backward(tl.total, &[])?;
        (grads, report)
    };
    apply_spike_bn_updates(store, snn, &outcome)?;
    conn_updates.apply(store);
    opt.step(store, &grads, lr)?;
    Ok(report)
}

/// One plain rate-mode training step (cross-entropy only, no teacher).
pub fn rate_train_step<F: Scalar>(
    store: &mut ParamStore<F>,
    snn: &Network,
    cfg: &LifConfig<F>,
    opt: &mut Sgd<F>,
    lr: F,
    encoded: &Encoded<F>,
    labels: &[usize],
    t_steps: usize,
) -> Result<F> {
    let outcome = spike_phase(store, snn, encoded, t_steps, cfg, true)?;
    let (grads, loss) = {
        let mut g = Graph::new(store);
        let rate = rate_phase(&mut g, snn, &outcome, true)?;
        let ce = ce_from_logits(&mut g, rate.logits, labels)?;
        let loss = g.value(ce).item()?;
        (g.backward(ce, &[])?, loss)
    };
    apply_spike_bn_updates(store, snn, &outcome)?;
    opt.step(store, &grads, lr)?;
    Ok(loss)
}

/// One unrolled-backpropagation training step over all T time steps. The
/// readout is the mean over steps of the classifier on each step's spikes.
pub fn bptt_train_step<F: Scalar>(
    store: &mut ParamStore<F>,
    snn: &Network,
    cfg: &LifConfig<F>,
    opt: &mut Sgd<F>,
    lr: F,
    encoded: &Encoded<F>,
    labels: &[usize],
    t_steps: usize,
) -> Result<F> {
    let (grads, loss, upd) = bptt_grads(store, snn, cfg, encoded, labels, t_steps)?;
    upd.apply(store);
    opt.step(store, &grads, lr)?;
    Ok(loss)
}

/// Gradients and loss of one BPTT pass without applying updates; the
/// equivalence tests consume this directly.
pub fn bptt_grads<F: Scalar>(
    store: &ParamStore<F>,
    snn: &Network,
    cfg: &LifConfig<F>,
    encoded: &Encoded<F>,
    labels: &[usize],
    t_steps: usize,
) -> Result<(Grads<F>, F, RunningUpdates<F>)> {
    if t_steps == 0 {
        return Err(Error::Contract("unrolled pass over zero steps".into()));
    }
    encoded.check_steps(t_steps)?;
    let nb = snn.blocks.len();
    let mut upd = RunningUpdates::new();
    let mut g = Graph::new(store);
    let mut states: Vec<Option<BpttState>> = Vec::new();
    let mut acc: Option<NodeId> = None;
    for t in 0..t_steps {
        let x = g.constant(encoded.at(t).clone());
        let mut act = ActPlan::Bptt {
            cfg,
            states: &mut states,
        };
        let mut bn = BnPlan::Batch {
            updates: Some(&mut upd),
        };
        let (logits_t, _) = forward_graph(&mut g, snn, 0..nb, x, &mut act, &mut bn)?;
        acc = Some(match acc {
            None => logits_t,
            Some(a) => g.add(a, logits_t)?,
        });
    }
    let logits = g.scale(acc.expect("t_steps >= 1"), F::ONE / F::from_usize(t_steps));
    let ce = ce_from_logits(&mut g, logits, labels)?;
    let loss = g.value(ce).item()?;
    let grads = g.backward(ce, &[])?;
    Ok((grads, loss, upd))
}

/// One supervised step on the ANN teacher.
pub fn ann_train_step<F: Scalar>(
    store: &mut ParamStore<F>,
    ann: &Network,
    opt: &mut Sgd<F>,
    lr: F,
    images: &Tensor<F>,
    labels: &[usize],
) -> Result<F> {
    let mut upd = RunningUpdates::new();
    let (grads, loss) = {
        let mut g = Graph::new(store);
        let x = g.constant(images.clone());
        let (logits, _) = forward_graph(
            &mut g,
            ann,
            0..ann.blocks.len(),
            x,
            &mut ActPlan::Relu,
            &mut BnPlan::Batch {
                updates: Some(&mut upd),
            },
        )?;
        let ce = ce_from_logits(&mut g, logits, labels)?;
        let loss = g.value(ce).item()?;
        (g.backward(ce, &[])?, loss)
    };
    upd.apply(store);
    opt.step(store, &grads, lr)?;
    Ok(loss)
}

/// SNN inference logits: evaluation spike phase plus a rate readout under
/// running statistics.
pub fn snn_eval_logits<F: Scalar>(
    store: &ParamStore<F>,
    snn: &Network,
    cfg: &LifConfig<F>,
    encoded: &Encoded<F>,
    t_steps: usize,
) -> Result<Tensor<F>> {
    let outcome = spike_phase(store, snn, encoded, t_steps, cfg, false)?;
    let mut g = Graph::new_inference(store);
    let rate = rate_phase(&mut g, snn, &outcome, false)?;
    Ok(g.value(rate.logits).clone())
}
