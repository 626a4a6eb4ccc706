//! Conditional multi-encoder generator for the missing modality.
//!
//! The encoders live in [`crate::model::Model`] and are shared with the
//! segmenter; this module holds the decoder and the output head.

use mmseg_tensor::{ConvGeometry, Scalar, Var};

use crate::blocks::{BlockConfig, Conv, Ctx, Decoder, Init};
use crate::error::{Error, Result};

/// Number of encoders feeding the generator.
pub const GENERATOR_INPUTS: usize = 3;

#[derive(Clone, Debug)]
pub struct Generator {
    pub decoder: Decoder,
    pub head: Conv,
}

impl Generator {
    pub fn new(init: &mut Init, name: &str, cfg: &BlockConfig) -> Self {
        let skips: Vec<usize> = (0..cfg.depth - 1).map(|l| GENERATOR_INPUTS * cfg.filters(l)).collect();
        let decoder = Decoder::new(init, &format!("{name}.dec"), GENERATOR_INPUTS * cfg.bottleneck_filters(), &skips, cfg);
        let head = Conv::new(init, &format!("{name}.head"), cfg.filters(0), 1, ConvGeometry::pointwise(), true);
        Self { decoder, head }
    }

    /// Decode from the per-level features of the three available encoders
    /// (condition-index order). Output is `[N, 1, D, H, W]` with identity
    /// activation.
    pub fn decode<T: Scalar>(&self, ctx: &mut Ctx<T>, encoder_features: &[Vec<Var>]) -> Result<Var> {
        if encoder_features.len() != GENERATOR_INPUTS {
            return Err(Error::Modalities(format!(
                "generator needs {GENERATOR_INPUTS} encoders, got {}",
                encoder_features.len()
            )));
        }
        let depth = encoder_features[0].len();
        let level = |ctx: &mut Ctx<T>, l: usize| {
            let parts: Vec<Var> = encoder_features.iter().map(|f| f[l]).collect();
            ctx.graph.concat_channels(&parts)
        };
        let bottleneck = level(ctx, depth - 1);
        let skips: Vec<Var> = (0..depth - 1).map(|l| level(ctx, l)).collect();
        let outs = self.decoder.forward(ctx, bottleneck, &skips)?;
        self.head.forward(ctx, *outs.last().expect("depth >= 2"))
    }
}

/// Mean absolute error between `generated` and `target`.
pub fn generation_loss<T: Scalar>(ctx: &mut Ctx<T>, generated: Var, target: Var) -> Result<Var> {
    if ctx.graph.shape(generated) != ctx.graph.shape(target) {
        return Err(Error::Shape(format!(
            "generated {:?} vs target {:?}",
            ctx.graph.shape(generated),
            ctx.graph.shape(target)
        )));
    }
    let diff = ctx.graph.sub(generated, target);
    let abs = ctx.graph.abs(diff);
    Ok(ctx.graph.mean(abs))
}
