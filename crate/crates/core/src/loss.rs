//! Training objective: clipped binary cross-entropy plus soft Dice, summed over the three regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;

/// Pixel reduction of the cross-entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BceReduction {
    /// Sum over pixels, as written in the objective.
    #[default]
    Sum,
    /// Sum divided by the pixel count.
    Mean,
}

/// `Σ −[y·max(ln ŷ, −100) + (1−y)·max(ln(1−ŷ), −100)]`.
pub fn bce_clipped<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    tape.bce_clipped(pred, target)
}

/// `1 − (2Σyŷ + ε) / (Σy² + Σŷ² + ε)`.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim("dice_loss", format!("pred {:?} vs target {:?}", tape.shape(pred), target.shape())));
    }
    let y2: f64 = target.data().iter().map(|v| v.wide() * v.wide()).sum();
    let y = tape.constant(target.clone());
    let yp = tape.mul(pred, y)?;
    let inter = tape.sum(yp);
    let num = tape.scale(inter, 2.0);
    let eps = tape.constant(Tensor::scalar(T::lit(DICE_EPS)));
    let num = tape.add(num, eps)?;
    let pp = tape.mul(pred, pred)?;
    let p2 = tape.sum(pp);
    let rest = tape.constant(Tensor::scalar(T::lit(y2 + DICE_EPS)));
    let den = tape.add(p2, rest)?;
    let ratio = tape.div(num, den)?;
    let one = tape.constant(Tensor::scalar(T::one()));
    tape.sub(one, ratio)
}

/// The six loss terms and their total.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bce: [Var; 3],
    pub dice: [Var; 3],
}

/// `Σ_region (BCE + Dice)`, accumulated as `((b₀+d₀) + (b₁+d₁)) + (b₂+d₂)`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[Var; 3],
    targets: &[Tensor<T>; 3],
    reduction: BceReduction,
) -> Result<LossTerms> {
    let mut bce = *preds;
    let mut dice = *preds;
    let mut total: Option<Var> = None;
    for r in 0..3 {
        let mut b = bce_clipped(tape, preds[r], &targets[r])?;
        if reduction == BceReduction::Mean {
            b = tape.scale(b, 1.0 / targets[r].len().max(1) as f64);
        }
        let d = dice_loss(tape, preds[r], &targets[r])?;
        let term = tape.add(b, d)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        bce[r] = b;
        dice[r] = d;
    }
    Ok(LossTerms { total: total.expect("three regions"), bce, dice })
}
