use crate::data::downsample_mask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing term of the soft Dice half of the segmentation loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// `0.5 · BCE(p, mask) + 0.5 · softDice(p, mask)` on probabilities `p`.
pub fn segmentation_loss<S: Scalar>(tape: &mut Tape<S>, probs: Var, mask: &Tensor<S>) -> Result<Var> {
    let bce = tape.bce(probs, mask, None)?;
    let dice = tape.soft_dice(probs, mask, DICE_SMOOTH)?;
    let sum = tape.add(bce, dice)?;
    tape.scale(sum, S::of(0.5))
}

/// Segmentation loss on `sigmoid(logits)`.
pub fn fine_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, mask: &Tensor<S>) -> Result<Var> {
    if tape.shape(logits) != mask.shape() {
        return Err(Error::shape("fine loss", tape.shape(logits), mask.shape()));
    }
    let p = tape.sigmoid(logits)?;
    segmentation_loss(tape, p, mask)
}

/// Segmentation loss of the coarse probability map against the mask
/// downsampled to its resolution.
pub fn coarse_loss<S: Scalar>(tape: &mut Tape<S>, coarse: Var, mask: &Tensor<f64>) -> Result<Var> {
    let (cs, ms) = (tape.shape(coarse).to_vec(), mask.shape());
    if cs.len() != 3 || ms.len() != 3 || cs[1] == 0 || ms[1] % cs[1] != 0 || ms[1] / cs[1] != ms[2] / cs[2].max(1) {
        return Err(Error::shape("coarse loss", &cs, ms));
    }
    let target = downsample_mask(mask, ms[1] / cs[1])?;
    segmentation_loss(tape, coarse, &target.cast())
}

/// The three loss terms and their weighted sum
/// `total = fine + alpha · cgrl + beta · coarse`.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub fine: Var,
    pub cgrl: Option<Var>,
    pub coarse: Var,
    pub total: Var,
    pub alpha: f64,
    pub beta: f64,
}

/// Detached scalar values of a `LossBundle`; `cgrl` is 0 when absent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub fine: f64,
    pub cgrl: f64,
    pub coarse: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn assemble<S: Scalar>(
        tape: &mut Tape<S>,
        fine: Var,
        cgrl: Option<Var>,
        coarse: Var,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let wc = tape.scale(coarse, S::of(beta))?;
        let mut total = tape.add(fine, wc)?;
        if let Some(c) = cgrl {
            let wa = tape.scale(c, S::of(alpha))?;
            total = tape.add(total, wa)?;
        }
        Ok(Self {
            fine,
            cgrl,
            coarse,
            total,
            alpha,
            beta,
        })
    }

    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> LossValues {
        let v = |x: Var| tape.value(x).item().to_f64_lossy();
        LossValues {
            fine: v(self.fine),
            cgrl: self.cgrl.map_or(0.0, v),
            coarse: v(self.coarse),
            total: v(self.total),
        }
    }
}
