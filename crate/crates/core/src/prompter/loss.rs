use crate::autodiff::Var;
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Additive smoothing in the overlap loss.
pub const DICE_SMOOTH: f64 = 1e-6;

fn gt_tensor<'t>(pred: Var<'t>, gt: &[f64]) -> Result<Var<'t>> {
    if pred.numel() != gt.len() {
        return Err(dim_err!(
            "prediction {:?} against {} labels",
            pred.shape(),
            gt.len()
        ));
    }
    if gt.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(contract_err!("ground-truth labels must be 0 or 1"));
    }
    Ok(pred
        .tape()
        .constant(Tensor::new(pred.shape(), gt.to_vec())?))
}

/// Discounted binary cross entropy over region probabilities:
/// `-mean(y·log p + ω·(1-y)·log(1-p))`, logs clamped.
pub fn bce_loss<'t>(pred: Var<'t>, gt: &[f64], omega: f64) -> Result<Var<'t>> {
    let y = gt_tensor(pred, gt)?;
    let neg: Vec<f64> = gt.iter().map(|v| omega * (1.0 - v)).collect();
    let neg = pred.tape().constant(Tensor::new(pred.shape(), neg)?);
    let pos_term = y.mul(pred.log_clamped()?)?;
    let neg_term = neg.mul(pred.rsub_scalar(1.0)?.log_clamped()?)?;
    pos_term.add(neg_term)?.mean()?.scale(-1.0)
}

/// [`bce_loss`] of `sigmoid(logits)` without rounding the probabilities first.
pub fn bce_loss_logits<'t>(logits: Var<'t>, gt: &[f64], omega: f64) -> Result<Var<'t>> {
    let y = gt_tensor(logits, gt)?;
    let neg: Vec<f64> = gt.iter().map(|v| omega * (1.0 - v)).collect();
    let neg = logits.tape().constant(Tensor::new(logits.shape(), neg)?);
    let pos_term = y.mul(logits.log_sigmoid_clamped()?)?;
    let neg_term = neg.mul(logits.scale(-1.0)?.log_sigmoid_clamped()?)?;
    pos_term.add(neg_term)?.mean()?.scale(-1.0)
}

/// `1 - (2·Σ y·p + s) / (Σ y + Σ p + s)`.
pub fn dice_loss<'t>(pred: Var<'t>, gt: &[f64]) -> Result<Var<'t>> {
    let y = gt_tensor(pred, gt)?;
    let inter = y.mul(pred)?.sum()?.scale(2.0)?.add_scalar(DICE_SMOOTH)?;
    let total = pred
        .sum()?
        .add_scalar(gt.iter().sum::<f64>() + DICE_SMOOTH)?;
    inter.div(total)?.rsub_scalar(1.0)
}

/// Mean of the discounted BCE and the overlap loss.
pub fn fpn_loss<'t>(pred: Var<'t>, gt: &[f64], omega: f64) -> Result<Var<'t>> {
    combine(bce_loss(pred, gt, omega)?, dice_loss(pred, gt)?)
}

pub(crate) fn combine<'t>(bce: Var<'t>, dice: Var<'t>) -> Result<Var<'t>> {
    bce.add(dice)?.scale(0.5)
}
