//! Composite training loss: pixel-mean BCE, soft IoU, and the weighted
//! orthogonality regularizer summed over every adapter triplet.

use crate::adalora::{orthogonality_regularizer, TripletIds};
use crate::error::{Result, SsomError};
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

pub const CLAMP_FLOOR: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-8;

/// Per-step loss components. `total` is the tape node the backward pass
/// starts from.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub bce: f64,
    pub iou: f64,
    pub ortho: f64,
    pub total: f64,
    pub lambda_reg: f64,
    pub total_id: Id,
}

fn check_target(target: &Tensor) -> Result<()> {
    if target.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(SsomError::Contract("target mask must be binary {0,1}".into()));
    }
    Ok(())
}

fn check_shapes(tape: &Tape, pred: Id, target: Id, op: &'static str) -> Result<()> {
    let (l, r) = (tape.shape(pred), tape.shape(target));
    if l != r {
        return Err(SsomError::ShapeMismatch { op, left: l, right: r });
    }
    Ok(())
}

/// Mean binary cross entropy over all pixels. Predictions are clamped to
/// [1e-7, 1-1e-7] before the logs.
pub fn bce_loss(tape: &Tape, pred_probs: Id, target: Id) -> Result<Id> {
    check_shapes(tape, pred_probs, target, "bce_loss")?;
    check_target(&tape.value(target))?;
    let p = tape.clamp(pred_probs, CLAMP_FLOOR, 1.0 - CLAMP_FLOOR)?;
    let ones = tape.leaf(&ones_like(&tape.shape(p)), false);
    let log_p = tape.log(p)?;
    let one_minus_p = tape.sub(ones, p)?;
    let log_1mp = tape.log(one_minus_p)?;
    let one_minus_y = tape.sub(ones, target)?;
    let pos = tape.mul(target, log_p)?;
    let neg = tape.mul(one_minus_y, log_1mp)?;
    let summed = tape.mean(tape.add(pos, neg)?)?;
    tape.scale(summed, -1.0)
}

/// Soft IoU loss 1 − TP/(TP+FP+FN+ε) with probabilistic counts, so the
/// gradient is nonzero almost everywhere.
pub fn iou_loss(tape: &Tape, pred_probs: Id, target: Id) -> Result<Id> {
    check_shapes(tape, pred_probs, target, "iou_loss")?;
    let tp = tape.sum(tape.mul(target, pred_probs)?)?;
    let ones = tape.leaf(&ones_like(&tape.shape(pred_probs)), false);
    let fp = tape.sum(tape.mul(tape.sub(ones, target)?, pred_probs)?)?;
    let fn_ = tape.sum(tape.mul(target, tape.sub(ones, pred_probs)?)?)?;
    // 1 - tp/(tp+fp+fn+eps), written with primitives: log/exp free form
    // ratio = tp * (tp+fp+fn+eps)^-1 is not a primitive, so use the
    // identity 1 - tp/u = (u - tp)/u and a dedicated reciprocal below.
    let denom = tape.add(tape.add(tp, fp)?, fn_)?;
    let eps = tape.leaf(&Tensor::scalar(IOU_EPS), false);
    let denom = tape.add(denom, eps)?;
    let ratio = tape.div_scalar(tp, denom)?;
    let one = tape.leaf(&Tensor::scalar(1.0), false);
    tape.sub(one, ratio)
}

fn ones_like(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![1.0; n]).expect("ones are finite")
}

/// L = L_BCE + L_IoU + λ · Σ R(P,Q), composed on the tape.
pub fn total_loss(
    tape: &Tape,
    pred_probs: Id,
    target: Id,
    triplets: &[(TripletIds, usize)],
    lambda_reg: f64,
) -> Result<LossBreakdown> {
    let bce = bce_loss(tape, pred_probs, target)?;
    let iou = iou_loss(tape, pred_probs, target)?;
    let mut ortho: Option<Id> = None;
    for (ids, rank) in triplets {
        let r = orthogonality_regularizer(tape, *ids, *rank)?;
        ortho = Some(match ortho {
            None => r,
            Some(acc) => tape.add(acc, r)?,
        });
    }
    let data_term = tape.add(bce, iou)?;
    let (total, ortho_val) = match ortho {
        Some(o) => (tape.add(data_term, tape.scale(o, lambda_reg)?)?, tape.value(o).item()),
        None => (data_term, 0.0),
    };
    Ok(LossBreakdown {
        bce: tape.value(bce).item(),
        iou: tape.value(iou).item(),
        ortho: ortho_val,
        total: tape.value(total).item(),
        lambda_reg,
        total_id: total,
    })
}
