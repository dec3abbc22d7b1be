//! The training objectives: multi-class cross entropy, the pixel-wise
//! adversarial term, the discriminator objective, and their weighted
//! combination for the generator.
//!
//! Every loss is built from tape operations and yields a scalar node, so one
//! `backward` call produces gradients for whatever parameters were registered
//! upstream. The generator objective is `mce + lambda * adv`; with lambda = 0
//! the adversarial term is omitted entirely, so the baseline trajectory is
//! reproduced bit-exactly.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::types::{LabelMap, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Config(format!("unknown reduction '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }

    fn mean(&self) -> bool {
        matches!(self, Reduction::Mean)
    }
}

/// Multi-class cross entropy over non-ignored pixels:
/// -sum log p(pixel, true class), averaged over valid pixels for `Mean`.
pub fn mce_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: &LabelMap,
    reduction: Reduction,
) -> Result<NodeId> {
    let shape = tape.shape(pred);
    if shape.len() != 3
        || shape[0] != target.num_classes()
        || shape[1] != target.height()
        || shape[2] != target.width()
    {
        return Err(Error::ShapeMismatch(format!(
            "prediction {shape:?} does not match labels [{},{},{}]",
            target.num_classes(),
            target.height(),
            target.width()
        )));
    }
    tape.masked_nll(pred, target.classes(), IGNORE, reduction.mean())
}

/// Pixel-wise adversarial term for the generator: binary cross entropy of the
/// confidence map against an all-ones target, -sum log D(y_hat).
pub fn adv_loss(tape: &mut Tape, conf: NodeId, reduction: Reduction) -> Result<NodeId> {
    let shape = tape.shape(conf);
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "confidence map must be [1,H,W], got {shape:?}"
        )));
    }
    Ok(tape.bce_const(conf, true, reduction.mean()))
}

/// Discriminator objective: fake confidences toward 0, real toward 1.
pub fn disc_loss(
    tape: &mut Tape,
    conf_fake: NodeId,
    conf_real: NodeId,
    reduction: Reduction,
) -> Result<NodeId> {
    if tape.shape(conf_fake) != tape.shape(conf_real) {
        return Err(Error::ShapeMismatch(format!(
            "fake {:?} and real {:?} confidence maps differ",
            tape.shape(conf_fake),
            tape.shape(conf_real)
        )));
    }
    let fake_term = tape.bce_const(conf_fake, false, reduction.mean());
    let real_term = tape.bce_const(conf_real, true, reduction.mean());
    tape.add(fake_term, real_term)
}

/// Generator objective: `mce + lambda * adv`. `conf_on_pred` is the
/// discriminator's response to the generator output; it is ignored when
/// lambda is exactly zero so the baseline is recovered without any
/// adversarial influence.
pub fn gen_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: &LabelMap,
    conf_on_pred: Option<NodeId>,
    lambda: f32,
    reduction: Reduction,
) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let mce = mce_loss(tape, pred, target, reduction)?;
    if lambda == 0.0 {
        return Ok(mce);
    }
    let conf = conf_on_pred.ok_or_else(|| {
        Error::Config("gen_loss with lambda > 0 requires a confidence map".into())
    })?;
    let adv = adv_loss(tape, conf, reduction)?;
    let weighted = tape.scale(adv, lambda);
    tape.add(mce, weighted)
}
