//! Command implementations behind the CLI verbs. Everything here is
//! deterministic under a fixed seed and runs at f32 precision.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{apply_params, read_checkpoint, save_checkpoint, LoadedCheckpoint};
use crate::config::{hex, DatasetKind, Encoding, RunConfig};
use crate::data::{
    augment, encode_rate_poisson, epoch_batches, gather, load_cifar10_bin, load_mnist_idx,
    normalize, Dataset,
};
use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamStore};
use crate::loss::LossWeights;
use crate::metrics::{
    eval_ann, eval_hybrid, eval_snn, feature_probe, profile_overhead, OverheadCell, SnnMode,
};
use crate::models::{build_connector, build_network, freeze_network, Connector, Network};
use crate::optim::{lr_at, Sgd};
use crate::rng;
use crate::runlog::{self, read_metrics, write_overhead_csv, RunLog};
use crate::scalar::Scalar;
use crate::spiking::LifConfig;
use crate::tensor::Tensor;
use crate::train::{
    ann_train_step, bptt_train_step, distill_train_step, rate_train_step, Encoded,
};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const METRIC_LOSS: &str = "loss_total";

/// Probe subset size for per-epoch similarity and hybrid-accuracy tracking.
const PROBE_SAMPLES: usize = 512;

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_accuracy: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub run_id: String,
    pub checkpoint: PathBuf,
    pub accuracy: f64,
    pub timesteps: usize,
    pub hybrid_tap: Option<usize>,
    pub checkpoint_epoch: u64,
}

/// Load the train/test splits named by the config, applying sample limits.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let dir = Path::new(&cfg.data_dir);
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => (
            load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?,
            load_mnist_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?,
        ),
        DatasetKind::Cifar10 => {
            let batches: Vec<PathBuf> =
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                load_cifar10_bin(&batches)?,
                load_cifar10_bin(&[dir.join("test_batch.bin")])?,
            )
        }
    };
    Ok((train.take(cfg.train_limit)?, test.take(cfg.eval_limit)?))
}

fn norm_constants(cfg: &RunConfig) -> (Vec<f32>, Vec<f32>) {
    let (m, s) = cfg.dataset.normalization();
    (
        m.into_iter().map(|v| v as f32).collect(),
        s.into_iter().map(|v| v as f32).collect(),
    )
}

/// Normalized eval images plus labels (never augmented).
fn eval_set(cfg: &RunConfig, ds: &Dataset<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (mean, std) = norm_constants(cfg);
    Ok((normalize(&ds.images, &mean, &std)?, ds.labels.clone()))
}

struct PreparedBatch {
    /// Normalized images (teacher input; equals the per-step mean under
    /// direct coding).
    images: Tensor<f32>,
    encoded: Encoded<f32>,
    labels: Vec<usize>,
}

/// Shared train-batch pipeline. Every trainer consumes batches through this
/// exact path so ablation runs stay step-for-step comparable.
struct Pipeline<'a> {
    cfg: &'a RunConfig,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        let (mean, std) = norm_constants(cfg);
        Pipeline { cfg, mean, std }
    }

    fn prepare(
        &self,
        ds: &Dataset<f32>,
        epoch: usize,
        batch_idx: usize,
        indices: &[usize],
    ) -> Result<PreparedBatch> {
        let (raw, labels) = gather(ds, indices)?;
        let step_tag = epoch as u64 * 1_000_000 + batch_idx as u64;
        let mut aug_rng = rng::substream(self.cfg.seed, "augment", step_tag);
        let raw = augment(&raw, self.cfg.augment, &mut aug_rng)?;
        let images = normalize(&raw, &self.mean, &self.std)?;
        let encoded = match self.cfg.encoding {
            Encoding::Direct => Encoded::Constant(images.clone()),
            Encoding::Poisson => {
                // Distinct deterministic stream per batch.
                let enc_seed = self
                    .cfg
                    .seed
                    .wrapping_add((step_tag + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                encode_rate_poisson(&raw, self.cfg.timesteps, enc_seed)?
            }
        };
        Ok(PreparedBatch { images, encoded, labels })
    }
}

fn run_id_for(cfg: &RunConfig) -> (String, [u8; 32]) {
    let fp = cfg.fingerprint();
    (runlog::run_id(&fp, cfg.seed), fp)
}

/// Train the conventional reference network with cross-entropy and save it
/// as the teacher checkpoint.
pub fn cmd_train_ann(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let arch = cfg.arch();
    arch.validate()?;
    let mut store = ParamStore::new();
    let net = build_network(&mut store, &arch, "ann", &mut rng::stream(cfg.seed, "ann"))?;
    let mut opt = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
    opt.register_decay(&net.decay_ids());

    let (run_id, fp) = run_id_for(cfg);
    let out = PathBuf::from(&cfg.out_dir);
    let mut log = RunLog::create(&out, &run_id)?;
    let (eval_x, eval_y) = eval_set(cfg, &test_ds)?;
    let pipe = Pipeline::new(cfg);
    let ckpt = out.join(TEACHER_CKPT);

    let mut global = 0usize;
    let mut last_loss = 0.0f64;
    let mut last_acc = 0.0f64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr_schedule, cfg.lr, epoch, cfg.epochs)? as f32;
        for (bi, idxs) in epoch_batches(cfg.seed, epoch, train_ds.len(), cfg.batch_size)?
            .iter()
            .enumerate()
        {
            let pb = pipe.prepare(&train_ds, epoch, bi, idxs)?;
            let loss = ann_train_step(&mut store, &net, &mut opt, lr, &pb.images, &pb.labels)?;
            global += 1;
            last_loss = loss as f64;
            log.emit(epoch, global, "train", METRIC_LOSS, last_loss, 0, "ann")?;
        }
        last_acc = eval_ann(&store, &net, &eval_x, &eval_y, cfg.batch_size)?;
        log.emit(epoch, 0, "val", "acc", last_acc, 0, "ann")?;
        save_checkpoint(&ckpt, &store, Some(&opt), (epoch + 1) as u64, &fp)?;
    }
    log.flush()?;
    Ok(TrainSummary {
        run_id,
        epochs: cfg.epochs,
        final_train_loss: last_loss,
        final_val_accuracy: last_acc,
        checkpoint: ckpt,
    })
}

/// Train the spiking network directly (no teacher), in rate or unrolled
/// mode per the config.
pub fn cmd_train_snn(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let arch = cfg.arch();
    arch.validate()?;
    let lif: LifConfig<f32> = cfg.lif()?;
    let mut store = ParamStore::new();
    let net = build_network(&mut store, &arch, "snn", &mut rng::stream(cfg.seed, "snn"))?;
    let mut opt = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
    opt.register_decay(&net.decay_ids());

    let (run_id, fp) = run_id_for(cfg);
    let out = PathBuf::from(&cfg.out_dir);
    let mut log = RunLog::create(&out, &run_id)?;
    let (eval_x, eval_y) = eval_set(cfg, &test_ds)?;
    let pipe = Pipeline::new(cfg);
    let ckpt = out.join(MODEL_CKPT);
    let mode = cfg.mode.as_str();
    let t = cfg.timesteps;

    let mut global = 0usize;
    let mut last_loss = 0.0f64;
    let mut last_acc = 0.0f64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr_schedule, cfg.lr, epoch, cfg.epochs)? as f32;
        for (bi, idxs) in epoch_batches(cfg.seed, epoch, train_ds.len(), cfg.batch_size)?
            .iter()
            .enumerate()
        {
            let pb = pipe.prepare(&train_ds, epoch, bi, idxs)?;
            let loss = match cfg.mode {
                SnnMode::Rate => rate_train_step(
                    &mut store, &net, &lif, &mut opt, lr, &pb.encoded, &pb.labels, t,
                )?,
                SnnMode::Bptt => bptt_train_step(
                    &mut store, &net, &lif, &mut opt, lr, &pb.encoded, &pb.labels, t,
                )?,
            };
            global += 1;
            last_loss = loss as f64;
            log.emit(epoch, global, "train", METRIC_LOSS, last_loss, t, mode)?;
        }
        last_acc = eval_snn(&store, &net, &lif, &eval_x, &eval_y, t, cfg.batch_size)?;
        log.emit(epoch, 0, "val", "acc", last_acc, t, mode)?;
        save_checkpoint(&ckpt, &store, Some(&opt), (epoch + 1) as u64, &fp)?;
    }
    log.flush()?;
    Ok(TrainSummary {
        run_id,
        epochs: cfg.epochs,
        final_train_loss: last_loss,
        final_val_accuracy: last_acc,
        checkpoint: ckpt,
    })
}

fn teacher_error(path: &str, e: Error) -> Error {
    Error::Config(format!("teacher checkpoint {path}: {e}"))
}

/// Build the connectors named by the config against the two networks.
fn build_connectors(
    store: &mut ParamStore<f32>,
    cfg: &RunConfig,
    snn: &Network,
    teacher: &Network,
) -> Result<Vec<Connector>> {
    let arch = cfg.arch();
    let taps = cfg.tap_list(&arch);
    let mut conn_rng = rng::stream(cfg.seed, "connectors");
    let mut conns = Vec::with_capacity(taps.len());
    for &k in &taps {
        let (c_in, _, _) = snn.tap_shape(k)?;
        let (c_out, _, _) = teacher.tap_shape(k)?;
        conns.push(build_connector(store, "conn", k, c_in, c_out, &mut conn_rng)?);
    }
    Ok(conns)
}

/// Distillation: frozen teacher, spiking student, per-tap connectors, mixed
/// backbone and block losses.
pub fn cmd_distill(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    if cfg.teacher.is_empty() {
        return Err(Error::Config(
            "distillation needs distill.teacher = <checkpoint path>".into(),
        ));
    }
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let arch = cfg.arch();
    arch.validate()?;
    let lif: LifConfig<f32> = cfg.lif()?;

    let mut store = ParamStore::new();
    let snn = build_network(&mut store, &arch, "snn", &mut rng::stream(cfg.seed, "snn"))?;
    let teacher = build_network(&mut store, &arch, "ann", &mut rng::stream(cfg.seed, "ann"))?;
    let loaded = read_checkpoint::<f32>(Path::new(&cfg.teacher))
        .map_err(|e| teacher_error(&cfg.teacher, e))?;
    apply_params(&loaded, &mut store, &teacher.param_ids())
        .map_err(|e| teacher_error(&cfg.teacher, e))?;
    freeze_network(&mut store, &teacher);

    let conns = build_connectors(&mut store, cfg, &snn, &teacher)?;
    let taps = cfg.tap_list(&arch);
    let betas: Vec<f32> = cfg
        .beta
        .weights(&taps, arch.stages.len())
        .into_iter()
        .map(|b| b as f32)
        .collect();

    let mut opt = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
    let mut decay = snn.decay_ids();
    for c in &conns {
        decay.extend(c.decay_ids());
    }
    opt.register_decay(&decay);

    let (run_id, fp) = run_id_for(cfg);
    let out = PathBuf::from(&cfg.out_dir);
    let mut log = RunLog::create(&out, &run_id)?;
    std::fs::write(
        out.join("teacher.fingerprint"),
        format!("{}\n", hex(&loaded.meta.fingerprint)),
    )?;

    let (eval_x, eval_y) = eval_set(cfg, &test_ds)?;
    // Fixed, seeded probe subset of the eval split for similarity and
    // hybrid-accuracy tracking.
    let mut probe_rng = rng::stream(cfg.seed, "probe");
    let probe_idx: Vec<usize> = rng::shuffled_indices(&mut probe_rng, test_ds.len())
        .into_iter()
        .take(PROBE_SAMPLES)
        .collect();
    let (probe_raw, probe_labels) = gather(&test_ds, &probe_idx)?;
    let (mean, std) = norm_constants(cfg);
    let probe_x = normalize(&probe_raw, &mean, &std)?;

    let pipe = Pipeline::new(cfg);
    let ckpt = out.join(MODEL_CKPT);
    let t = cfg.timesteps;

    let mut global = 0usize;
    let mut last_loss = 0.0f64;
    let mut last_acc = 0.0f64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr_schedule, cfg.lr, epoch, cfg.epochs)? as f32;
        let alpha = cfg.alpha_schedule.at(cfg.alpha, epoch, cfg.epochs) as f32;
        let weights = LossWeights::new(alpha, betas.clone())?;
        for (bi, idxs) in epoch_batches(cfg.seed, epoch, train_ds.len(), cfg.batch_size)?
            .iter()
            .enumerate()
        {
            let pb = pipe.prepare(&train_ds, epoch, bi, idxs)?;
            let report = distill_train_step(
                &mut store, &snn, &teacher, &conns, &weights, &lif, &mut opt, lr, &pb.images,
                &pb.encoded, &pb.labels, t,
            )?;
            global += 1;
            last_loss = report.total.to_f64();
            log.emit(epoch, global, "train", METRIC_LOSS, last_loss, t, "distill")?;
            log.emit(
                epoch, global, "train", "loss_ce", report.ce_backbone.to_f64(), t, "distill",
            )?;
            log.emit(
                epoch, global, "train", "loss_kd", report.kd_backbone.to_f64(), t, "distill",
            )?;
        }
        last_acc = eval_snn(&store, &snn, &lif, &eval_x, &eval_y, t, cfg.batch_size)?;
        log.emit(epoch, 0, "val", "acc", last_acc, t, "distill")?;
        for conn in &conns {
            let acc = eval_hybrid(
                &store, &snn, &teacher, conn, &lif, &probe_x, &probe_labels, t, cfg.batch_size,
            )?;
            log.emit(
                epoch, 0, "val", &format!("acc_hybrid_tap{}", conn.tap), acc, t, "distill",
            )?;
        }
        for row in feature_probe(&store, &snn, &teacher, &conns, &lif, &probe_x, t)? {
            log.emit(
                epoch, 0, "val", &format!("cosine_tap{}", row.tap), row.cosine, t, "distill",
            )?;
            log.emit(
                epoch, 0, "val", &format!("err_tap{}", row.tap), row.conversion_error, t,
                "distill",
            )?;
        }
        save_checkpoint(&ckpt, &store, Some(&opt), (epoch + 1) as u64, &fp)?;
    }
    log.flush()?;
    Ok(TrainSummary {
        run_id,
        epochs: cfg.epochs,
        final_train_loss: last_loss,
        final_val_accuracy: last_acc,
        checkpoint: ckpt,
    })
}

/// Taps of the connectors stored in a checkpoint, in ascending order.
fn checkpoint_taps(loaded: &LoadedCheckpoint<f32>) -> Vec<usize> {
    let mut taps: Vec<usize> = loaded
        .params
        .keys()
        .filter_map(|n| {
            n.strip_prefix("conn.tap")
                .and_then(|rest| rest.split('.').next())
                .and_then(|d| d.parse().ok())
        })
        .collect();
    taps.sort_unstable();
    taps.dedup();
    taps
}

/// Evaluate a checkpoint on the config's test split: plain network, spiking
/// network, or (with `hybrid`) a spiking front end through connector `k`
/// into the frozen tail.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, hybrid: Option<usize>) -> Result<EvalSummary> {
    cfg.validate()?;
    let loaded = read_checkpoint::<f32>(checkpoint)?;
    let (_, test_ds) = load_datasets(cfg)?;
    let (eval_x, eval_y) = eval_set(cfg, &test_ds)?;
    let arch = cfg.arch();
    arch.validate()?;
    let lif: LifConfig<f32> = cfg.lif()?;

    let has_snn = loaded.params.keys().any(|n| n.starts_with("snn."));
    let has_ann = loaded.params.keys().any(|n| n.starts_with("ann."));
    let taps = checkpoint_taps(&loaded);

    let mut store = ParamStore::new();
    let snn = if has_snn {
        Some(build_network(&mut store, &arch, "snn", &mut rng::stream(cfg.seed, "snn"))?)
    } else {
        None
    };
    let teacher = if has_ann {
        Some(build_network(&mut store, &arch, "ann", &mut rng::stream(cfg.seed, "ann"))?)
    } else {
        None
    };
    let mut conns = Vec::new();
    if !taps.is_empty() {
        let (s, a) = match (&snn, &teacher) {
            (Some(s), Some(a)) => (s, a),
            _ => {
                return Err(Error::Format(
                    "checkpoint has connectors but lacks one of the two networks".into(),
                ))
            }
        };
        let mut conn_rng = rng::stream(cfg.seed, "connectors");
        for &k in &taps {
            let (c_in, _, _) = s.tap_shape(k)?;
            let (c_out, _, _) = a.tap_shape(k)?;
            conns.push(build_connector(&mut store, "conn", k, c_in, c_out, &mut conn_rng)?);
        }
    }
    let mut ids: Vec<ParamId> = Vec::new();
    if let Some(n) = &snn {
        ids.extend(n.param_ids());
    }
    if let Some(n) = &teacher {
        ids.extend(n.param_ids());
    }
    for c in &conns {
        ids.extend(c.param_ids());
    }
    if ids.is_empty() {
        return Err(Error::Format(
            "checkpoint contains no recognizable model parameters".into(),
        ));
    }
    apply_params(&loaded, &mut store, &ids)?;

    let t = cfg.timesteps;
    let (accuracy, mode) = match hybrid {
        Some(k) => {
            let conn = conns.iter().find(|c| c.tap == k).ok_or_else(|| {
                Error::Config(format!(
                    "no connector for tap {k} in {} (taps: {taps:?})",
                    checkpoint.display()
                ))
            })?;
            let (s, a) = (snn.as_ref().expect("taps imply snn"), teacher.as_ref().expect("taps imply ann"));
            (
                eval_hybrid(&store, s, a, conn, &lif, &eval_x, &eval_y, t, cfg.batch_size)?,
                "hybrid",
            )
        }
        None => match (&snn, &teacher) {
            (Some(s), _) => (
                eval_snn(&store, s, &lif, &eval_x, &eval_y, t, cfg.batch_size)?,
                "snn",
            ),
            (None, Some(a)) => (eval_ann(&store, a, &eval_x, &eval_y, cfg.batch_size)?, "ann"),
            (None, None) => unreachable!("ids nonempty implies a network"),
        },
    };

    let (run_id, _) = run_id_for(cfg);
    let out = PathBuf::from(&cfg.out_dir);
    let mut log = RunLog::create(&out, &run_id)?;
    let metric = match hybrid {
        Some(k) => format!("acc_eval_hybrid_tap{k}"),
        None => "acc_eval".to_string(),
    };
    log.emit(loaded.meta.epoch as usize, 0, "val", &metric, accuracy, t, mode)?;
    log.flush()?;
    Ok(EvalSummary {
        run_id,
        checkpoint: checkpoint.to_path_buf(),
        accuracy,
        timesteps: t,
        hybrid_tap: hybrid,
        checkpoint_epoch: loaded.meta.epoch,
    })
}

/// Profile training overhead per (mode, T) and write the CSV table.
pub fn cmd_profile(
    cfg: &RunConfig,
    t_list: &[usize],
    modes: &[SnnMode],
    warmup: usize,
    measured: usize,
) -> Result<Vec<OverheadCell>> {
    cfg.validate()?;
    let arch = cfg.arch();
    arch.validate()?;
    let lif: LifConfig<f32> = cfg.lif()?;
    let cells = profile_overhead(
        &arch, &lif, modes, t_list, cfg.batch_size, warmup, measured, cfg.seed,
    )?;
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    write_overhead_csv(&out.join("overhead.csv"), &cells)?;
    Ok(cells)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeRow {
    pub kind: String,
    pub key: String,
    pub first: f64,
    pub last: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub run_dir: PathBuf,
    pub rows: Vec<AnalyzeRow>,
}

impl AnalyzeSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,key,first,last\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.kind, r.key, r.first, r.last));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:<22} {:>12} {:>12}\n", "kind", "key", "first", "last");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:<22} {:>12.5} {:>12.5}\n",
                r.kind, r.key, r.first, r.last
            ));
        }
        s
    }
}

/// Summarize a run directory: similarity trajectories, accuracy curves, and
/// conversion errors from its metrics stream, exported as CSV.
pub fn cmd_analyze(run_dir: &Path) -> Result<AnalyzeSummary> {
    let recs = read_metrics(&run_dir.join("metrics.jsonl"))?;
    if recs.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no metrics records",
            run_dir.display()
        )));
    }
    // First/last value per (split=val) metric, ordered by epoch then
    // position in the file.
    let mut rows: Vec<AnalyzeRow> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for r in &recs {
        if r.split == "val" && !names.contains(&r.metric) {
            names.push(r.metric.clone());
        }
    }
    for name in names {
        let series: Vec<&crate::runlog::MetricRecord> =
            recs.iter().filter(|r| r.split == "val" && r.metric == name).collect();
        let first = series.iter().min_by_key(|r| r.epoch).expect("nonempty series");
        let last = series.iter().max_by_key(|r| r.epoch).expect("nonempty series");
        let kind = if name.starts_with("cosine_") {
            "similarity"
        } else if name.starts_with("err_") {
            "conversion"
        } else {
            "accuracy"
        };
        rows.push(AnalyzeRow {
            kind: kind.into(),
            key: name,
            first: first.value,
            last: last.value,
        });
    }
    let summary = AnalyzeSummary {
        run_dir: run_dir.to_path_buf(),
        rows,
    };
    std::fs::write(run_dir.join("analysis.csv"), summary.to_csv())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::io::Write;

    /// Synthetic 28x28 IDX pair so the mnist loader path is exercised
    /// end to end.
    fn write_idx(dir: &Path, prefix: &str, n: usize, seed: u64) {
        let mut r = rng::stream(seed, "synth");
        let mut ib: Vec<u8> = Vec::new();
        ib.extend(2051u32.to_be_bytes());
        ib.extend((n as u32).to_be_bytes());
        ib.extend(28u32.to_be_bytes());
        ib.extend(28u32.to_be_bytes());
        let pix = rng::uniform_vec::<f64>(&mut r, n * 28 * 28, 0.0, 256.0);
        ib.extend(pix.iter().map(|&v| v as u8));
        let (img, lbl) = match prefix {
            "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            _ => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        };
        fs::File::create(dir.join(img)).unwrap().write_all(&ib).unwrap();
        let mut lb: Vec<u8> = Vec::new();
        lb.extend(2049u32.to_be_bytes());
        lb.extend((n as u32).to_be_bytes());
        lb.extend((0..n).map(|i| (i % 10) as u8));
        fs::File::create(dir.join(lbl)).unwrap().write_all(&lb).unwrap();
    }

    fn tiny_cfg(data_dir: &Path, out_dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.arch_preset = crate::config::ArchPreset::Convnet3;
        cfg.stem_stride = 2;
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.timesteps = 2;
        cfg.train_limit = 8;
        cfg.eval_limit = 8;
        cfg.lr = 0.05;
        cfg.data_dir = data_dir.to_string_lossy().into_owned();
        cfg.out_dir = out_dir.to_string_lossy().into_owned();
        cfg.seed = 5;
        cfg
    }

    fn synth_data() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), "train", 8, 1);
        write_idx(dir.path(), "test", 8, 2);
        dir
    }

    #[test]
    fn train_ann_writes_checkpoint_metrics_and_is_seed_deterministic() {
        let data = synth_data();
        let out1 = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(data.path(), out1.path());
        let s1 = cmd_train_ann(&cfg).unwrap();
        assert!(s1.checkpoint.exists());
        assert!((0.0..=1.0).contains(&s1.final_val_accuracy));
        let recs = read_metrics(&out1.path().join("metrics.jsonl")).unwrap();
        let vals: Vec<_> = recs.iter().filter(|r| r.split == "val").collect();
        assert_eq!(vals.len(), cfg.epochs, "one val record per epoch");
        assert!(recs.iter().all(|r| r.mode == "ann"));

        let out2 = tempfile::tempdir().unwrap();
        let mut cfg2 = tiny_cfg(data.path(), out2.path());
        cfg2.out_dir = out2.path().to_string_lossy().into_owned();
        let s2 = cmd_train_ann(&cfg2).unwrap();
        assert_eq!(
            s1.final_train_loss.to_bits(),
            s2.final_train_loss.to_bits(),
            "same seed must reproduce the final loss"
        );
        assert_eq!(s1.final_val_accuracy.to_bits(), s2.final_val_accuracy.to_bits());
    }

    #[test]
    fn eval_of_a_teacher_checkpoint_reproduces_training_val_accuracy() {
        let data = synth_data();
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(data.path(), out.path());
        let s = cmd_train_ann(&cfg).unwrap();
        let e = cmd_eval(&cfg, &s.checkpoint, None).unwrap();
        assert_eq!(e.accuracy.to_bits(), s.final_val_accuracy.to_bits());
        assert_eq!(e.checkpoint_epoch, cfg.epochs as u64);
    }

    #[test]
    fn distill_ablation_matches_plain_rate_training_step_for_step() {
        let data = synth_data();
        let out_t = tempfile::tempdir().unwrap();
        let mut tcfg = tiny_cfg(data.path(), out_t.path());
        tcfg.epochs = 1;
        let teacher = cmd_train_ann(&tcfg).unwrap();

        let out_r = tempfile::tempdir().unwrap();
        let mut rcfg = tiny_cfg(data.path(), out_r.path());
        rcfg.mode = SnnMode::Rate;
        let rate = cmd_train_snn(&rcfg).unwrap();

        let out_d = tempfile::tempdir().unwrap();
        let mut dcfg = tiny_cfg(data.path(), out_d.path());
        dcfg.alpha = 0.0;
        dcfg.beta = crate::config::BetaScheme::Zero;
        dcfg.teacher = teacher.checkpoint.to_string_lossy().into_owned();
        let dist = cmd_distill(&dcfg).unwrap();

        let rl: Vec<f64> = read_metrics(&out_r.path().join("metrics.jsonl"))
            .unwrap()
            .into_iter()
            .filter(|r| r.metric == METRIC_LOSS)
            .map(|r| r.value)
            .collect();
        let dl: Vec<f64> = read_metrics(&out_d.path().join("metrics.jsonl"))
            .unwrap()
            .into_iter()
            .filter(|r| r.metric == METRIC_LOSS)
            .map(|r| r.value)
            .collect();
        assert_eq!(rl.len(), dl.len());
        assert!(!rl.is_empty());
        for (a, b) in rl.iter().zip(&dl) {
            assert_eq!(a.to_bits(), b.to_bits(), "ablation must be exact");
        }
        assert_eq!(
            rate.final_val_accuracy.to_bits(),
            dist.final_val_accuracy.to_bits()
        );
        assert!(out_d.path().join("teacher.fingerprint").exists());
    }

    #[test]
    fn distill_emits_similarity_and_hybrid_rows_and_eval_loads_hybrids() {
        let data = synth_data();
        let out_t = tempfile::tempdir().unwrap();
        let tcfg = tiny_cfg(data.path(), out_t.path());
        let teacher = cmd_train_ann(&tcfg).unwrap();

        let out_d = tempfile::tempdir().unwrap();
        let mut dcfg = tiny_cfg(data.path(), out_d.path());
        dcfg.teacher = teacher.checkpoint.to_string_lossy().into_owned();
        let dist = cmd_distill(&dcfg).unwrap();

        let recs = read_metrics(&out_d.path().join("metrics.jsonl")).unwrap();
        let arch = dcfg.arch();
        for tap in arch.interior_taps() {
            for metric in [
                format!("cosine_tap{tap}"),
                format!("err_tap{tap}"),
                format!("acc_hybrid_tap{tap}"),
            ] {
                assert!(
                    recs.iter().any(|r| r.metric == metric),
                    "missing metric {metric}"
                );
            }
        }
        // Hybrid eval through the saved checkpoint.
        let tap = arch.interior_taps()[0];
        let e = cmd_eval(&dcfg, &dist.checkpoint, Some(tap)).unwrap();
        assert!((0.0..=1.0).contains(&e.accuracy));
        // Unknown tap is a user error.
        let bad = cmd_eval(&dcfg, &dist.checkpoint, Some(99)).unwrap_err();
        assert!(matches!(bad, Error::Config(_)), "{bad}");
        // Plain SNN eval of the distill checkpoint also works.
        let s = cmd_eval(&dcfg, &dist.checkpoint, None).unwrap();
        assert_eq!(s.accuracy.to_bits(), dist.final_val_accuracy.to_bits());
    }

    #[test]
    fn profile_writes_csv_and_analyze_summarizes_runs() {
        let data = synth_data();
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(data.path(), out.path());
        cfg.batch_size = 2;
        let cells = cmd_profile(&cfg, &[1, 2], &[SnnMode::Rate], 0, 1).unwrap();
        assert_eq!(cells.len(), 2);
        let csv = fs::read_to_string(out.path().join("overhead.csv")).unwrap();
        assert!(csv.starts_with("mode,timesteps,ms_per_batch,peak_bytes\n"));
        assert_eq!(csv.lines().count(), 3);

        // Analyze over a synthetic run directory.
        let run = tempfile::tempdir().unwrap();
        {
            let mut log = RunLog::create(run.path(), "test-s1").unwrap();
            log.emit(0, 0, "val", "acc", 0.4, 2, "distill").unwrap();
            log.emit(1, 0, "val", "acc", 0.6, 2, "distill").unwrap();
            log.emit(0, 0, "val", "cosine_tap1", 0.1, 2, "distill").unwrap();
            log.emit(1, 0, "val", "cosine_tap1", 0.5, 2, "distill").unwrap();
            log.emit(0, 1, "train", METRIC_LOSS, 2.0, 2, "distill").unwrap();
        }
        let summary = cmd_analyze(run.path()).unwrap();
        assert!(run.path().join("analysis.csv").exists());
        let acc = summary.rows.iter().find(|r| r.key == "acc").unwrap();
        assert_eq!((acc.first, acc.last), (0.4, 0.6));
        assert_eq!(acc.kind, "accuracy");
        let cos = summary.rows.iter().find(|r| r.key == "cosine_tap1").unwrap();
        assert_eq!((cos.first, cos.last), (0.1, 0.5));
        assert_eq!(cos.kind, "similarity");
        assert!(summary.to_table().contains("cosine_tap1"));
    }

    #[test]
    fn missing_teacher_checkpoint_is_a_config_error() {
        let data = synth_data();
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(data.path(), out.path());
        cfg.teacher = String::new();
        assert!(matches!(cmd_distill(&cfg), Err(Error::Config(_))));
        cfg.teacher = "/nonexistent/teacher.ckpt".into();
        let e = cmd_distill(&cfg).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert!(e.to_string().contains("teacher checkpoint"), "{e}");
    }
}
