//! Training objectives: soft Dice, deep-supervised Dice and the weighted
//! total.

use mmseg_tensor::{Scalar, Tensor, Var};

use crate::blocks::Ctx;
use crate::error::{Error, Result};
use crate::segmentation::SegOutput;
use crate::volume::{class, LabelVolume};

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub gen: f64,
    pub cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dice: 1.0, gen: 0.1, cc: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.dice, self.gen, self.cc].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// `w.dice * l_dice + w.gen * l_gen + w.cc * l_cc`.
pub fn total_loss(l_dice: f64, l_gen: f64, l_cc: f64, w: &LossWeights) -> Result<f64> {
    if ![l_dice, l_gen, l_cc].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("loss components".into()));
    }
    Ok(w.dice * l_dice + w.gen * l_gen + w.cc * l_cc)
}

/// Graph form of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_graph<T: Scalar>(ctx: &mut Ctx<T>, l_dice: Var, l_gen: Option<Var>, l_cc: Option<Var>, w: &LossWeights) -> Var {
    let mut total = ctx.graph.scale(l_dice, w.dice);
    for (term, weight) in [(l_gen, w.gen), (l_cc, w.cc)] {
        if let Some(t) = term {
            let scaled = ctx.graph.scale(t, weight);
            total = ctx.graph.add(total, scaled);
        }
    }
    total
}

/// `[N, 4, D, H, W]` one-hot encoding of a batch of label volumes.
pub fn one_hot<T: Scalar>(labels: &[&LabelVolume]) -> Result<Tensor<T>> {
    let first = labels.first().ok_or_else(|| Error::InvalidArgument("empty label batch".into()))?;
    let shape = first.shape();
    let s: usize = shape.iter().product();
    let mut data = vec![T::zero(); labels.len() * class::COUNT * s];
    for (b, lv) in labels.iter().enumerate() {
        if lv.shape() != shape {
            return Err(Error::Shape("label volumes disagree in shape".into()));
        }
        for (i, &c) in lv.data().iter().enumerate() {
            data[(b * class::COUNT + c as usize) * s + i] = T::one();
        }
    }
    Ok(Tensor::new(&[labels.len(), class::COUNT, shape[0], shape[1], shape[2]], data))
}

/// `1 - mean_c (2 sum(p q) + eps) / (sum(p) + sum(q) + eps)` over the
/// foreground classes, sums running over batch and voxels. A class with no
/// mass in either tensor has no overlap to measure and is left out of the
/// mean; if every foreground class is empty the loss is 0.
pub fn dice_loss<T: Scalar>(ctx: &mut Ctx<T>, probs: Var, target: Var) -> Result<Var> {
    let shape = ctx.shape(probs);
    if shape.len() < 2 || shape[1] != class::COUNT || ctx.graph.shape(target) != shape.as_slice() {
        return Err(Error::Shape(format!("dice operands {shape:?} vs {:?}", ctx.graph.shape(target))));
    }
    let inter = ctx.graph.mul(probs, target);
    let inter = ctx.graph.sum_per_channel(inter);
    let psum = ctx.graph.sum_per_channel(probs);
    let qsum = ctx.graph.sum_per_channel(target);
    let mut weights = vec![T::zero(); class::COUNT];
    let active: Vec<usize> = (1..class::COUNT)
        .filter(|&c| ctx.value(psum).data()[c] + ctx.value(qsum).data()[c] > T::zero())
        .collect();
    for &c in &active {
        weights[c] = T::one() / T::from_usize(active.len()).unwrap();
    }
    let num = ctx.graph.scale(inter, 2.0);
    let num = ctx.graph.add_const(num, DICE_EPS);
    let den = ctx.graph.add(psum, qsum);
    let den = ctx.graph.add_const(den, DICE_EPS);
    let ratio = ctx.graph.div(num, den);
    let w = ctx.input(Tensor::new(&[class::COUNT], weights));
    let weighted = ctx.graph.mul(ratio, w);
    let mean = ctx.graph.sum(weighted);
    if active.is_empty() {
        return Ok(ctx.graph.scale(mean, 0.0));
    }
    let neg = ctx.graph.scale(mean, -1.0);
    Ok(ctx.graph.add_const(neg, 1.0))
}

/// Dice averaged over the final output and every supervision head (each
/// head upsampled to full resolution and passed through its own softmax).
pub fn deep_supervised_dice<T: Scalar>(ctx: &mut Ctx<T>, seg: &SegOutput, target: Var) -> Result<Var> {
    let mut total = dice_loss(ctx, seg.probabilities, target)?;
    let heads = seg.upsampled_heads(ctx);
    for &h in &heads {
        let p = ctx.graph.softmax(h);
        let d = dice_loss(ctx, p, target)?;
        total = ctx.graph.add(total, d);
    }
    Ok(ctx.graph.scale(total, 1.0 / (heads.len() + 1) as f64))
}
