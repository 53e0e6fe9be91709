//! The distillation objective: cross-entropy, temperature-free KL against
//! frozen teacher probabilities, per-block mixes, and their weighted total.
//!
//! Boundary weights are exact by construction: scaling a loss term by 0.0 or
//! 1.0 reproduces the other operand bitwise (all terms are nonnegative, so
//! `x + 0.0 == x` holds), which is what makes ablations with alpha = 0 and
//! zero betas agree bitwise with plain cross-entropy training.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability clamp inside the KL term; keeps the teacher-zero/student-zero
/// corner finite without measurably altering gradients.
pub const KD_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LossWeights<F: Scalar> {
    pub alpha: F,
    pub betas: Vec<F>,
}

impl<F: Scalar> LossWeights<F> {
    pub fn new(alpha: F, betas: Vec<F>) -> Result<Self> {
        if alpha < F::ZERO || alpha > F::ONE {
            return Err(Error::Contract(format!("alpha {alpha} outside [0,1]")));
        }
        if betas.iter().any(|b| *b < F::ZERO) {
            return Err(Error::Contract("negative block weight".into()));
        }
        Ok(LossWeights { alpha, betas })
    }

    /// Uniform betas 1/n_b over `n_b` blocks (the reported optimum).
    pub fn uniform(alpha: F, n_b: usize) -> Result<Self> {
        let w = if n_b == 0 {
            Vec::new()
        } else {
            vec![F::ONE / F::from_usize(n_b); n_b]
        };
        Self::new(alpha, w)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BlockTerm<F: Scalar> {
    pub ce: F,
    pub kd: F,
    pub blk: F,
}

/// Scalar view of one training step's objective, for logging and tests.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossReport<F: Scalar> {
    pub ce_backbone: F,
    pub kd_backbone: F,
    pub blocks: Vec<BlockTerm<F>>,
    pub total: F,
}

/// Batch-mean cross-entropy from logits.
pub fn ce_from_logits<F: Scalar>(
    g: &mut Graph<'_, F>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let logp = g.log_softmax(logits)?;
    g.nll_mean(logp, labels)
}

/// Batch-mean KL(teacher || student) on probability rows.
pub fn kd_from_probs<F: Scalar>(
    g: &mut Graph<'_, F>,
    student_probs: NodeId,
    teacher_probs: &Tensor<F>,
) -> Result<NodeId> {
    g.kl_teacher_mean(student_probs, teacher_probs, F::from_f64(KD_EPS))
}

/// One block's objective: (1-alpha) * CE + alpha * KD. Returns the three
/// scalar nodes (ce, kd, blk).
pub fn block_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    logits: NodeId,
    probs: NodeId,
    labels: &[usize],
    teacher_probs: &Tensor<F>,
    alpha: F,
) -> Result<(NodeId, NodeId, NodeId)> {
    let ce = ce_from_logits(g, logits, labels)?;
    let kd = kd_from_probs(g, probs, teacher_probs)?;
    let ce_part = g.scale(ce, F::ONE - alpha);
    let kd_part = g.scale(kd, alpha);
    let blk = g.add(ce_part, kd_part)?;
    Ok((ce, kd, blk))
}

/// Scalar nodes of the assembled objective.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: NodeId,
    pub ce_backbone: NodeId,
    pub kd_backbone: NodeId,
    /// Per configured block, in tap order: (ce, kd, blk).
    pub blocks: Vec<(NodeId, NodeId, NodeId)>,
}

/// Assemble the full objective: the backbone mix on the final logits plus
/// beta-weighted block mixes on each hybrid output. `hybrids` pairs each
/// tap's (logits, probs) nodes and must match the beta list in length.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    backbone_logits: NodeId,
    labels: &[usize],
    teacher_probs: &Tensor<F>,
    hybrids: &[(NodeId, NodeId)],
    weights: &LossWeights<F>,
) -> Result<TotalLoss> {
    if hybrids.len() != weights.betas.len() {
        return Err(Error::Contract(format!(
            "{} hybrid outputs for {} block weights",
            hybrids.len(),
            weights.betas.len()
        )));
    }
    let backbone_probs = g.softmax(backbone_logits)?;
    let (ce_b, kd_b, mut total) = block_loss(
        g,
        backbone_logits,
        backbone_probs,
        labels,
        teacher_probs,
        weights.alpha,
    )?;
    let mut blocks = Vec::with_capacity(hybrids.len());
    for (&(logits, probs), &beta) in hybrids.iter().zip(&weights.betas) {
        let (ce, kd, blk) = block_loss(g, logits, probs, labels, teacher_probs, weights.alpha)?;
        let weighted = g.scale(blk, beta);
        total = g.add(total, weighted)?;
        blocks.push((ce, kd, blk));
    }
    Ok(TotalLoss {
        total,
        ce_backbone: ce_b,
        kd_backbone: kd_b,
        blocks,
    })
}

impl TotalLoss {
    pub fn report<F: Scalar>(&self, g: &Graph<'_, F>) -> Result<LossReport<F>> {
        let item = |n: NodeId| g.value(n).item();
        Ok(LossReport {
            ce_backbone: item(self.ce_backbone)?,
            kd_backbone: item(self.kd_backbone)?,
            blocks: self
                .blocks
                .iter()
                .map(|&(ce, kd, blk)| {
                    Ok(BlockTerm {
                        ce: item(ce)?,
                        kd: item(kd)?,
                        blk: item(blk)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            total: item(self.total)?,
        })
    }
}

/// L2 norm of the difference between two equally shaped feature tensors.
/// Diagnostic only; never part of the training objective.
pub fn conversion_error<F: Scalar>(f_s: &Tensor<F>, f_a: &Tensor<F>) -> Result<F> {
    if f_s.shape() != f_a.shape() {
        return Err(Error::Shape(format!(
            "conversion error on {:?} vs {:?}",
            f_s.shape(),
            f_a.shape()
        )));
    }
    let mut acc = F::ZERO;
    for (&a, &b) in f_s.data().iter().zip(f_a.data()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc.sqrt())
}
