//! Segmentation losses.
//!
//! Training minimizes the equal-weight sum of mean binary cross-entropy and
//! soft Dice loss. Both terms are tape ops (see [`Graph::bce_loss`] and
//! [`Graph::dice_loss`]); this module combines them and reads the pieces
//! back out for logging.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Var};
use crate::Result;

pub const BCE_WEIGHT: f64 = 0.5;
pub const DICE_WEIGHT: f64 = 0.5;

/// Tape handles for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
}

/// The component values of one loss evaluation, as plain numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

impl LossVars {
    pub fn read<T: Scalar>(&self, g: &Graph<T>) -> LossValue {
        LossValue {
            total: g.scalar_value(self.total).to_f64(),
            bce: g.scalar_value(self.bce).to_f64(),
            dice: g.scalar_value(self.dice).to_f64(),
        }
    }
}

/// `0.5 * bce(pred, target) + 0.5 * dice(pred, target)` over a probability
/// map and a 0/1 target of the same dims.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<LossVars> {
    let bce = g.bce_loss(pred, target)?;
    let dice = g.dice_loss(pred, target)?;
    let wb = g.mul_const(bce, T::from_f64(BCE_WEIGHT));
    let wd = g.mul_const(dice, T::from_f64(DICE_WEIGHT));
    let total = g.add(wb, wd)?;
    Ok(LossVars { total, bce, dice })
}
