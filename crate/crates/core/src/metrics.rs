//! Diagnostics: feature cosine similarity, top-1 accuracy for plain, spiking,
//! and hybrid models, and wall-time/peak-memory overhead profiles.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{forward_graph, connector_graph, ActPlan, BnPlan};
use crate::graph::{Graph, ParamStore};
use crate::mem;
use crate::models::{build_network, ArchSpec, Connector, Network};
use crate::optim::Sgd;
use crate::rng;
use crate::scalar::Scalar;
use crate::spiking::LifConfig;
use crate::tensor::Tensor;
use crate::train::{
    bptt_train_step, rate_phase, rate_train_step, snn_eval_logits, spike_phase, Encoded,
};

/// ⟨a,b⟩ / (‖a‖‖b‖) over the flattened tensors.
pub fn cosine_similarity<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    cosine_flat(a.data(), b.data())
}

fn cosine_flat<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = F::ZERO;
    let mut na = F::ZERO;
    let mut nb = F::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == F::ZERO || nb == F::ZERO {
        return Err(Error::Contract("cosine of a zero-norm vector".into()));
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    // Rounding can push the quotient epsilon past the bound.
    if c > F::ONE {
        Ok(F::ONE)
    } else if c < -F::ONE {
        Ok(-F::ONE)
    } else {
        Ok(c)
    }
}

/// Mean per-sample cosine over dim 0. Tensors must agree in shape; samples
/// are the leading dimension.
pub fn batch_cosine_similarity<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "batch cosine of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("batch cosine of an empty batch".into()));
    }
    let per = a.data().len() / n;
    let mut acc = F::ZERO;
    for i in 0..n {
        acc = acc + cosine_flat(&a.data()[i * per..(i + 1) * per], &b.data()[i * per..(i + 1) * per])?;
    }
    Ok(acc / F::from_usize(n))
}

/// Mean per-sample Euclidean distance over dim 0.
pub fn batch_l2_distance<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "distance of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("distance of an empty batch".into()));
    }
    let per = a.data().len() / n;
    let mut acc = F::ZERO;
    for i in 0..n {
        let mut s = F::ZERO;
        for (&x, &y) in a.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&b.data()[i * per..(i + 1) * per])
        {
            let d = x - y;
            s = s + d * d;
        }
        acc = acc + s.sqrt();
    }
    Ok(acc / F::from_usize(n))
}

/// Batch-averaged (cosine, distance) of a mapped feature against its
/// reference. Self-comparison gives (1, 0) up to rounding in the cosine.
pub fn probe_pair<F: Scalar>(mapped: &Tensor<F>, reference: &Tensor<F>) -> Result<(F, F)> {
    Ok((
        batch_cosine_similarity(mapped, reference)?,
        batch_l2_distance(mapped, reference)?,
    ))
}

/// Fraction of rows whose argmax equals the label. Ties resolve to the
/// lowest class index.
pub fn accuracy_from_logits<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logit rows {:?} against {} labels",
            s,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("accuracy over an empty batch".into()));
    }
    let classes = s[1];
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn slice_rows<F: Scalar>(images: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let mut shape = images.shape().to_vec();
    let per: usize = shape[1..].iter().product();
    shape[0] = len;
    Tensor::from_vec(shape, images.data()[start * per..(start + len) * per].to_vec())
}

fn check_eval_inputs<F: Scalar>(images: &Tensor<F>, labels: &[usize], batch: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Contract("evaluation over an empty dataset".into()));
    }
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::Shape(format!(
            "{} labels for image tensor {:?}",
            labels.len(),
            images.shape()
        )));
    }
    if batch == 0 {
        return Err(Error::Config("zero evaluation batch size".into()));
    }
    Ok(())
}

/// Top-1 accuracy of a conventional network under running statistics.
pub fn eval_ann<F: Scalar>(
    store: &ParamStore<F>,
    net: &Network,
    images: &Tensor<F>,
    labels: &[usize],
    batch: usize,
) -> Result<f64> {
    check_eval_inputs(images, labels, batch)?;
    let n = labels.len();
    let mut hits = 0.0;
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let x = slice_rows(images, start, len)?;
        let mut g = Graph::new_inference(store);
        let xn = g.constant(x);
        let (logits, _) = forward_graph(
            &mut g,
            net,
            0..net.blocks.len(),
            xn,
            &mut ActPlan::Relu,
            &mut BnPlan::Running,
        )?;
        hits += accuracy_from_logits(g.value(logits), &labels[start..start + len])? * len as f64;
        start += len;
    }
    Ok(hits / n as f64)
}

/// Top-1 accuracy of a spiking network: evaluation spike phase on
/// constant-current input, rate readout.
pub fn eval_snn<F: Scalar>(
    store: &ParamStore<F>,
    net: &Network,
    cfg: &LifConfig<F>,
    images: &Tensor<F>,
    labels: &[usize],
    t_steps: usize,
    batch: usize,
) -> Result<f64> {
    check_eval_inputs(images, labels, batch)?;
    let n = labels.len();
    let mut hits = 0.0;
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let enc = Encoded::Constant(slice_rows(images, start, len)?);
        let logits = snn_eval_logits(store, net, cfg, &enc, t_steps)?;
        hits += accuracy_from_logits(&logits, &labels[start..start + len])? * len as f64;
        start += len;
    }
    Ok(hits / n as f64)
}

/// Top-1 accuracy of the hybrid: spiking front end up to the connector's
/// tap, mapped feature, frozen tail of the reference network.
pub fn eval_hybrid<F: Scalar>(
    store: &ParamStore<F>,
    snn: &Network,
    teacher: &Network,
    connector: &Connector,
    cfg: &LifConfig<F>,
    images: &Tensor<F>,
    labels: &[usize],
    t_steps: usize,
    batch: usize,
) -> Result<f64> {
    check_eval_inputs(images, labels, batch)?;
    let n = labels.len();
    let mut hits = 0.0;
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let enc = Encoded::Constant(slice_rows(images, start, len)?);
        let outcome = spike_phase(store, snn, &enc, t_steps, cfg, false)?;
        let mut g = Graph::new_inference(store);
        let rate = rate_phase(&mut g, snn, &outcome, false)?;
        let tap = *rate.taps.get(connector.tap).ok_or_else(|| {
            Error::Config(format!(
                "hybrid tap {} outside the {} rate taps",
                connector.tap,
                rate.taps.len()
            ))
        })?;
        let (logits, _) =
            crate::train::hybrid_forward(&mut g, teacher, connector, tap, &mut BnPlan::Running)?;
        hits += accuracy_from_logits(g.value(logits), &labels[start..start + len])? * len as f64;
        start += len;
    }
    Ok(hits / n as f64)
}

/// One probe row: batch-averaged alignment of the mapped spiking feature at
/// a tap against the reference network's feature there.
#[derive(Debug, Clone, Serialize)]
pub struct TapProbe {
    pub tap: usize,
    pub cosine: f64,
    pub conversion_error: f64,
}

/// Compare mapped spiking features with reference features at every
/// connector tap over one probe batch, both nets in evaluation mode.
pub fn feature_probe<F: Scalar>(
    store: &ParamStore<F>,
    snn: &Network,
    teacher: &Network,
    connectors: &[Connector],
    cfg: &LifConfig<F>,
    probe_images: &Tensor<F>,
    t_steps: usize,
) -> Result<Vec<TapProbe>> {
    if probe_images.shape().first() == Some(&0) {
        return Err(Error::Contract("feature probe on an empty batch".into()));
    }
    let enc = Encoded::Constant(probe_images.clone());
    let outcome = spike_phase(store, snn, &enc, t_steps, cfg, false)?;
    let mut g = Graph::new_inference(store);
    let rate = rate_phase(&mut g, snn, &outcome, false)?;
    let xa = g.constant(probe_images.clone());
    let (_, teacher_outs) = forward_graph(
        &mut g,
        teacher,
        0..teacher.blocks.len(),
        xa,
        &mut ActPlan::Relu,
        &mut BnPlan::Running,
    )?;
    let mut rows = Vec::with_capacity(connectors.len());
    for conn in connectors {
        let tap = *rate.taps.get(conn.tap).ok_or_else(|| {
            Error::Config(format!(
                "probe tap {} outside the {} rate taps",
                conn.tap,
                rate.taps.len()
            ))
        })?;
        let mapped = connector_graph(&mut g, conn, tap, &mut BnPlan::Running)?;
        let reference = teacher_outs[conn.tap];
        let (cosine, err) = probe_pair(g.value(mapped), g.value(reference))?;
        rows.push(TapProbe {
            tap: conn.tap,
            cosine: cosine.to_f64(),
            conversion_error: err.to_f64(),
        });
    }
    Ok(rows)
}

/// Spiking-trainer flavor being exercised or profiled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnnMode {
    Rate,
    Bptt,
}

impl SnnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SnnMode::Rate => "rate",
            SnnMode::Bptt => "bptt",
        }
    }
}

impl fmt::Display for SnnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SnnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" => Ok(SnnMode::Rate),
            "bptt" => Ok(SnnMode::Bptt),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (rate | bptt)"
            ))),
        }
    }
}

/// One overhead-table cell: training cost of a (mode, T) combination.
#[derive(Debug, Clone, Serialize)]
pub struct OverheadCell {
    pub mode: String,
    pub timesteps: usize,
    pub ms_per_batch: f64,
    pub peak_bytes: u64,
}

pub const OVERHEAD_CSV_HEADER: &str = "mode,timesteps,ms_per_batch,peak_bytes";

impl OverheadCell {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{}",
            self.mode, self.timesteps, self.ms_per_batch, self.peak_bytes
        )
    }
}

/// Measure training wall time and peak live tensor memory per (mode, T)
/// cell. Each cell rebuilds the same seeded network so cells are
/// independent and memory figures are reproducible; warm-up steps are
/// excluded from both measurements.
pub fn profile_overhead<F: Scalar>(
    arch: &ArchSpec,
    cfg: &LifConfig<F>,
    modes: &[SnnMode],
    t_list: &[usize],
    batch: usize,
    warmup: usize,
    measured: usize,
    seed: u64,
) -> Result<Vec<OverheadCell>> {
    if measured == 0 || batch == 0 {
        return Err(Error::Config("profiling needs batch and step counts".into()));
    }
    if modes.is_empty() || t_list.is_empty() {
        return Err(Error::Config("profiling needs modes and step lists".into()));
    }
    let (c, h, w) = (arch.in_channels, arch.image_hw.0, arch.image_hw.1);
    let mut cells = Vec::with_capacity(modes.len() * t_list.len());
    for &mode in modes {
        for &t_steps in t_list {
            let mut store = ParamStore::new();
            let net = build_network(&mut store, arch, "snn", &mut rng::stream(seed, "snn"))?;
            let mut opt = Sgd::new(F::from_f64(0.9), F::ZERO);
            let mut data_rng = rng::stream(seed, "profile");
            let images = Tensor::from_vec(
                vec![batch, c, h, w],
                rng::uniform_vec(&mut data_rng, batch * c * h * w, 0.0, 1.0),
            )?;
            let labels: Vec<usize> = (0..batch).map(|i| i % arch.num_classes).collect();
            let enc = Encoded::Constant(images);
            let lr = F::from_f64(0.01);
            let mut run = |store: &mut ParamStore<F>| -> Result<()> {
                match mode {
                    SnnMode::Rate => {
                        rate_train_step(store, &net, cfg, &mut opt, lr, &enc, &labels, t_steps)?;
                    }
                    SnnMode::Bptt => {
                        bptt_train_step(store, &net, cfg, &mut opt, lr, &enc, &labels, t_steps)?;
                    }
                }
                Ok(())
            };
            for _ in 0..warmup {
                run(&mut store)?;
            }
            mem::reset_peak();
            let start = Instant::now();
            for _ in 0..measured {
                run(&mut store)?;
            }
            let elapsed = start.elapsed().as_secs_f64() * 1000.0;
            cells.push(OverheadCell {
                mode: mode.as_str().to_string(),
                timesteps: t_steps,
                ms_per_batch: elapsed / measured as f64,
                peak_bytes: mem::peak_bytes() as u64,
            });
        }
    }
    Ok(cells)
}
