//! Network construction: a shared architecture description compiles to a
//! block-partitioned piece tree that the ANN, the SNN, and the hybrid tails
//! all execute. The ANN and SNN differ only in how activation sites are
//! interpreted at execution time (ReLU vs LIF/rate nodes), so their
//! topologies and tap shapes agree by construction.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamStore};
use crate::kernels::conv_out_dim;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockKind {
    /// Two 3x3 convs with identity (or projected) shortcut per block.
    Residual,
    /// Single conv-norm-act per block.
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    pub image_hw: (usize, usize),
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub block_kind: BlockKind,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("architecture needs at least one stage".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.stem_channels == 0
            || self.in_channels == 0
            || self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0 || s.stride == 0)
        {
            return Err(Error::Config("zero channel/block/stride in architecture".into()));
        }
        // Every stage must leave a computable, nonempty feature map.
        let mut hw = self.image_hw;
        hw = conv_shape(hw, 3, self.stem_stride, 1);
        for (i, s) in self.stages.iter().enumerate() {
            hw = conv_shape(hw, 3, s.stride, 1);
            if hw.0 == 0 || hw.1 == 0 {
                return Err(Error::Config(format!(
                    "stage {} reduces the feature map to zero ({}x{})",
                    i + 1,
                    hw.0,
                    hw.1
                )));
            }
        }
        Ok(())
    }

    /// Miniature 4-stage residual net for desk-scale runs.
    pub fn resnet_mini(in_channels: usize, image_hw: (usize, usize), classes: usize, stem_stride: usize) -> Self {
        ArchSpec {
            name: "resnet-mini".into(),
            in_channels,
            image_hw,
            num_classes: classes,
            stem_channels: 16,
            stem_stride,
            stages: vec![
                StageSpec { channels: 16, blocks: 1, stride: 1 },
                StageSpec { channels: 32, blocks: 1, stride: 2 },
                StageSpec { channels: 64, blocks: 1, stride: 2 },
                StageSpec { channels: 128, blocks: 1, stride: 2 },
            ],
            block_kind: BlockKind::Residual,
        }
    }

    /// Plain three-conv network (one conv per stage).
    pub fn convnet3(in_channels: usize, image_hw: (usize, usize), classes: usize) -> Self {
        ArchSpec {
            name: "convnet-3".into(),
            in_channels,
            image_hw,
            num_classes: classes,
            stem_channels: 16,
            stem_stride: 1,
            stages: vec![
                StageSpec { channels: 32, blocks: 1, stride: 2 },
                StageSpec { channels: 64, blocks: 1, stride: 2 },
                StageSpec { channels: 128, blocks: 1, stride: 2 },
            ],
            block_kind: BlockKind::Plain,
        }
    }

    /// Full-scale profile with the standard 64/128/256/512 channel ramp.
    /// Ships as a config target; not expected to train at desk scale.
    pub fn resnet18(in_channels: usize, image_hw: (usize, usize), classes: usize) -> Self {
        ArchSpec {
            name: "resnet-18".into(),
            in_channels,
            image_hw,
            num_classes: classes,
            stem_channels: 64,
            stem_stride: 1,
            stages: vec![
                StageSpec { channels: 64, blocks: 2, stride: 1 },
                StageSpec { channels: 128, blocks: 2, stride: 2 },
                StageSpec { channels: 256, blocks: 2, stride: 2 },
                StageSpec { channels: 512, blocks: 2, stride: 2 },
            ],
            block_kind: BlockKind::Residual,
        }
    }

    /// Tap positions usable for hybrid construction: 0 = after the stem,
    /// i = after stage i, n = after the final stage (pre-classifier).
    pub fn tap_positions(&self) -> usize {
        self.stages.len() + 1
    }

    /// Default tap policy: interior stages only, excluding the post-stem and
    /// pre-classifier boundaries. Empty for single-stage networks.
    pub fn interior_taps(&self) -> Vec<usize> {
        (1..self.stages.len()).collect()
    }
}

fn conv_shape(hw: (usize, usize), k: usize, stride: usize, pad: usize) -> (usize, usize) {
    if hw.0 + 2 * pad < k || hw.1 + 2 * pad < k {
        return (0, 0);
    }
    (conv_out_dim(hw.0, k, stride, pad), conv_out_dim(hw.1, k, stride, pad))
}

/// Normalization site: affine parameters plus running statistics buffers.
/// The buffers are registered as non-trainable parameters so checkpoints
/// carry them and freezing cannot touch them by accident.
#[derive(Debug, Clone, Copy)]
pub struct BnSite {
    pub id: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub enum Piece {
    Conv {
        w: ParamId,
        stride: usize,
        pad: usize,
    },
    Bn(BnSite),
    /// Activation site: ReLU in the ANN, an LIF neuron layer in the SNN,
    /// a straight-through rate node in the rate pass. `id` indexes the
    /// per-site state/statistics arrays.
    Act {
        id: usize,
    },
    Residual {
        main: Vec<Piece>,
        shortcut: Vec<Piece>,
    },
    GlobalPool,
    Linear {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct NetBlock {
    pub name: String,
    pub pieces: Vec<Piece>,
    /// (channels, h, w) leaving this block.
    pub out_shape: (usize, usize, usize),
}

/// A block-partitioned network. Blocks: [stem, stage 1, ..., stage n, head].
/// Running blocks sequentially IS the monolithic network (a single walker
/// executes a contiguous block range), so partition identity holds by
/// construction and is additionally asserted in tests.
#[derive(Debug, Clone)]
pub struct Network {
    pub prefix: String,
    pub arch: ArchSpec,
    pub blocks: Vec<NetBlock>,
    pub act_sites: usize,
    pub bn_sites: usize,
}

impl Network {
    /// Number of non-head blocks (stem + stages); tap i is the output of
    /// block i for i in 0..=n_stages.
    pub fn tap_blocks(&self) -> usize {
        self.blocks.len() - 1
    }

    /// Feature shape at tap position `tap` (0 = post-stem).
    pub fn tap_shape(&self, tap: usize) -> Result<(usize, usize, usize)> {
        if tap >= self.tap_blocks() {
            return Err(Error::Config(format!(
                "tap {tap} out of range (network has {} tap positions)",
                self.tap_blocks()
            )));
        }
        Ok(self.blocks[tap].out_shape)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            collect_ids(&b.pieces, &mut ids);
        }
        ids
    }

    /// Parameters subject to weight decay: convolution and linear weights.
    /// Normalization affine parameters and biases are exempt.
    pub fn decay_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            collect_decay_ids(&b.pieces, &mut ids);
        }
        ids
    }
}

fn collect_decay_ids(pieces: &[Piece], out: &mut Vec<ParamId>) {
    for p in pieces {
        match p {
            Piece::Conv { w, .. } => out.push(*w),
            Piece::Linear { w, .. } => out.push(*w),
            Piece::Residual { main, shortcut } => {
                collect_decay_ids(main, out);
                collect_decay_ids(shortcut, out);
            }
            Piece::Bn(_) | Piece::Act { .. } | Piece::GlobalPool => {}
        }
    }
}

fn collect_ids(pieces: &[Piece], out: &mut Vec<ParamId>) {
    for p in pieces {
        match p {
            Piece::Conv { w, .. } => out.push(*w),
            Piece::Bn(site) => {
                out.push(site.gamma);
                out.push(site.beta);
                out.push(site.running_mean);
                out.push(site.running_var);
            }
            Piece::Act { .. } | Piece::GlobalPool => {}
            Piece::Residual { main, shortcut } => {
                collect_ids(main, out);
                collect_ids(shortcut, out);
            }
            Piece::Linear { w, b } => {
                out.push(*w);
                out.push(*b);
            }
        }
    }
}

struct Builder<'a, F: Scalar> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    act_sites: usize,
    bn_sites: usize,
}

impl<'a, F: Scalar> Builder<'a, F> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Piece> {
        let fan_in = c_in * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = rng::normal_vec(self.rng, c_out * c_in * k * k, std);
        let w = self.store.add(
            &format!("{}.{name}.w", self.prefix),
            Tensor::from_vec(vec![c_out, c_in, k, k], data)?,
            true,
        )?;
        Ok(Piece::Conv {
            w,
            stride,
            pad: k / 2,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Piece> {
        let p = &self.prefix;
        let gamma = self
            .store
            .add(&format!("{p}.{name}.gamma"), Tensor::full(&[c], F::ONE), true)?;
        let beta = self
            .store
            .add(&format!("{p}.{name}.beta"), Tensor::zeros(&[c]), true)?;
        let running_mean =
            self.store
                .add(&format!("{p}.{name}.running_mean"), Tensor::zeros(&[c]), false)?;
        let running_var = self.store.add(
            &format!("{p}.{name}.running_var"),
            Tensor::full(&[c], F::ONE),
            false,
        )?;
        let site = BnSite {
            id: self.bn_sites,
            gamma,
            beta,
            running_mean,
            running_var,
        };
        self.bn_sites += 1;
        Ok(Piece::Bn(site))
    }

    fn act(&mut self) -> Piece {
        let id = self.act_sites;
        self.act_sites += 1;
        Piece::Act { id }
    }

    fn linear(&mut self, name: &str, f_in: usize, f_out: usize) -> Result<Piece> {
        let std = 1.0 / (f_in as f64).sqrt();
        let data = rng::normal_vec(self.rng, f_in * f_out, std);
        let w = self.store.add(
            &format!("{}.{name}.w", self.prefix),
            Tensor::from_vec(vec![f_in, f_out], data)?,
            true,
        )?;
        let b = self
            .store
            .add(&format!("{}.{name}.b", self.prefix), Tensor::zeros(&[f_out]), true)?;
        Ok(Piece::Linear { w, b })
    }
}

/// Construct a network under `prefix` with freshly initialized parameters.
/// The same function builds the ANN and the SNN; the activation semantics
/// are chosen by the executor, not the builder.
pub fn build_network<F: Scalar>(
    store: &mut ParamStore<F>,
    arch: &ArchSpec,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    arch.validate()?;
    let mut b = Builder {
        store,
        rng,
        prefix: prefix.to_string(),
        act_sites: 0,
        bn_sites: 0,
    };
    let mut blocks = Vec::new();
    let mut hw = arch.image_hw;

    // Stem: conv3x3 -> norm -> act.
    hw = conv_shape(hw, 3, arch.stem_stride, 1);
    let stem = vec![
        b.conv("stem.conv", arch.in_channels, arch.stem_channels, 3, arch.stem_stride)?,
        b.bn("stem.bn", arch.stem_channels)?,
        b.act(),
    ];
    blocks.push(NetBlock {
        name: "stem".into(),
        pieces: stem,
        out_shape: (arch.stem_channels, hw.0, hw.1),
    });

    let mut c_in = arch.stem_channels;
    for (si, stage) in arch.stages.iter().enumerate() {
        let mut pieces = Vec::new();
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            let name = format!("stage{}.block{}", si + 1, bi);
            match arch.block_kind {
                BlockKind::Plain => {
                    pieces.push(b.conv(&format!("{name}.conv"), c_in, stage.channels, 3, stride)?);
                    pieces.push(b.bn(&format!("{name}.bn"), stage.channels)?);
                    pieces.push(b.act());
                }
                BlockKind::Residual => {
                    let main = vec![
                        b.conv(&format!("{name}.conv1"), c_in, stage.channels, 3, stride)?,
                        b.bn(&format!("{name}.bn1"), stage.channels)?,
                        b.act(),
                        b.conv(&format!("{name}.conv2"), stage.channels, stage.channels, 3, 1)?,
                        b.bn(&format!("{name}.bn2"), stage.channels)?,
                    ];
                    let shortcut = if stride != 1 || c_in != stage.channels {
                        vec![
                            b.conv(&format!("{name}.down.conv"), c_in, stage.channels, 1, stride)?,
                            b.bn(&format!("{name}.down.bn"), stage.channels)?,
                        ]
                    } else {
                        Vec::new()
                    };
                    pieces.push(Piece::Residual { main, shortcut });
                    pieces.push(b.act());
                }
            }
            c_in = stage.channels;
            if bi == 0 {
                hw = conv_shape(hw, 3, stage.stride, 1);
            }
        }
        blocks.push(NetBlock {
            name: format!("stage{}", si + 1),
            pieces,
            out_shape: (stage.channels, hw.0, hw.1),
        });
    }

    // Head: global pool -> classifier.
    let head = vec![Piece::GlobalPool, b.linear("fc", c_in, arch.num_classes)?];
    blocks.push(NetBlock {
        name: "head".into(),
        pieces: head,
        out_shape: (arch.num_classes, 1, 1),
    });

    Ok(Network {
        prefix: prefix.to_string(),
        arch: arch.clone(),
        blocks,
        act_sites: b.act_sites,
        bn_sites: b.bn_sites,
    })
}

/// Learnable connector at a tap: 1x1 conv -> norm -> ReLU -> 1x1 conv(+bias).
/// Spatial dimensions pass through unchanged; channels map from the SNN tap
/// to the ANN tap (equal for same-architecture pairs, where both 1x1 convs
/// initialize to the identity so the initial output is the normalized input).
#[derive(Debug, Clone)]
pub struct Connector {
    pub tap: usize,
    pub conv1: ParamId,
    pub bn: BnSite,
    pub conv2: ParamId,
    pub bias2: ParamId,
}

pub fn build_connector<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    tap: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Connector> {
    let name = format!("{prefix}.tap{tap}");
    let ident = |c_rows: usize, c_cols: usize| -> Vec<F> {
        let mut w = vec![F::ZERO; c_rows * c_cols];
        for i in 0..c_rows.min(c_cols) {
            w[i * c_cols + i] = F::ONE;
        }
        w
    };
    let w1 = if c_in == c_out {
        ident(c_out, c_in)
    } else {
        let std = (2.0 / c_in as f64).sqrt();
        rng::normal_vec(rng, c_out * c_in, std)
    };
    let conv1 = store.add(
        &format!("{name}.conv1.w"),
        Tensor::from_vec(vec![c_out, c_in, 1, 1], w1)?,
        true,
    )?;
    let gamma = store.add(&format!("{name}.bn.gamma"), Tensor::full(&[c_out], F::ONE), true)?;
    let beta = store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[c_out]), true)?;
    let running_mean = store.add(&format!("{name}.bn.running_mean"), Tensor::zeros(&[c_out]), false)?;
    let running_var = store.add(
        &format!("{name}.bn.running_var"),
        Tensor::full(&[c_out], F::ONE),
        false,
    )?;
    let w2 = ident(c_out, c_out);
    let conv2 = store.add(
        &format!("{name}.conv2.w"),
        Tensor::from_vec(vec![c_out, c_out, 1, 1], w2)?,
        true,
    )?;
    let bias2 = store.add(&format!("{name}.conv2.b"), Tensor::zeros(&[c_out]), true)?;
    Ok(Connector {
        tap,
        conv1,
        bn: BnSite {
            // Connector normalization sites live outside the network's BnSite
            // index space; executors treat them standalone.
            id: usize::MAX,
            gamma,
            beta,
            running_mean,
            running_var,
        },
        conv2,
        bias2,
    })
}

impl Connector {
    /// Weight-decayed parameters: the two pointwise convolution weights.
    pub fn decay_ids(&self) -> Vec<ParamId> {
        vec![self.conv1, self.conv2]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.conv1,
            self.bn.gamma,
            self.bn.beta,
            self.bn.running_mean,
            self.bn.running_var,
            self.conv2,
            self.bias2,
        ]
    }
}

/// Exclude every parameter of the network from optimization. Gradients still
/// flow through frozen pieces to their inputs.
pub fn freeze_network<F: Scalar>(store: &mut ParamStore<F>, net: &Network) {
    for id in net.param_ids() {
        store.set_trainable(id, false);
    }
}

/// Exact trainable-parameter count over the given ids.
pub fn count_parameters<F: Scalar>(store: &ParamStore<F>, ids: &[ParamId]) -> usize {
    store.count_trainable(ids)
}
