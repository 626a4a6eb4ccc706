//! Multi-encoder segmentation decoder with per-level attention fusion and
//! deep supervision.

use mmseg_tensor::{ConvGeometry, Scalar, Var};

use crate::blocks::{upsample_pow2, AttentionFusion, BlockConfig, Conv, Ctx, Decoder, Init};
use crate::error::{Error, Result};
use crate::volume::class;

/// Initial background logit of every head. Starting from a background
/// probability near 0.97 keeps the foreground-only Dice loss from settling
/// on a tumor class spread thinly over the background.
pub const BACKGROUND_PRIOR_LOGIT: f32 = 4.5;

#[derive(Clone, Debug)]
pub struct SegOutput {
    /// `[N, 4, D, H, W]` averaged logits.
    pub logits: Var,
    /// Per-level logits at native resolution, shallowest first.
    pub aux_logits: Vec<Var>,
    /// Softmax of `logits` over the class axis.
    pub probabilities: Var,
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub fusions: Vec<AttentionFusion>,
    pub decoder: Decoder,
    /// One pointwise class head per level, shallowest first.
    pub heads: Vec<Conv>,
    pub inputs: usize,
}

impl Segmenter {
    pub fn new(init: &mut Init, name: &str, inputs: usize, cfg: &BlockConfig) -> Self {
        let fusions =
            (0..cfg.depth).map(|l| AttentionFusion::new(init, &format!("{name}.fuse{l}"), inputs, cfg.filters(l))).collect();
        let skips: Vec<usize> = (0..cfg.depth - 1).map(|l| cfg.filters(l)).collect();
        let decoder = Decoder::new(init, &format!("{name}.dec"), cfg.bottleneck_filters(), &skips, cfg);
        let heads = (0..cfg.depth)
            .map(|l| {
                let head = Conv::new(init, &format!("{name}.head{l}"), cfg.filters(l), class::COUNT, ConvGeometry::pointwise(), true);
                if let Some(b) = head.b {
                    init.store.get_mut(b).data_mut()[class::BACKGROUND as usize] = BACKGROUND_PRIOR_LOGIT;
                }
                head
            })
            .collect();
        Self { fusions, decoder, heads, inputs }
    }

    /// `levels[i]` holds the per-level features of input `i`. When
    /// `bottleneck` is given it replaces the deepest level of every input
    /// (the correlated representations).
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, levels: &[Vec<Var>], bottleneck: Option<&[Var]>) -> Result<SegOutput> {
        if levels.len() != self.inputs {
            return Err(Error::Modalities(format!("segmenter expects {} inputs, got {}", self.inputs, levels.len())));
        }
        let depth = self.fusions.len();
        if levels.iter().any(|l| l.len() != depth) {
            return Err(Error::Shape("encoder depth does not match the segmenter".into()));
        }
        let mut fused = Vec::with_capacity(depth);
        for (l, fusion) in self.fusions.iter().enumerate() {
            let parts: Vec<Var> = match bottleneck {
                Some(b) if l == depth - 1 => b.to_vec(),
                _ => levels.iter().map(|f| f[l]).collect(),
            };
            fused.push(fusion.forward(ctx, &parts)?);
        }
        let outs = self.decoder.forward(ctx, fused[depth - 1], &fused[..depth - 1])?;
        // decoder outputs are deepest first; level l output sits at index depth-2-l
        let mut aux_logits = Vec::with_capacity(depth);
        for (l, head) in self.heads.iter().enumerate() {
            let src = if l == depth - 1 { fused[depth - 1] } else { outs[depth - 2 - l] };
            aux_logits.push(head.forward(ctx, src)?);
        }
        let mut sum = None;
        for (l, &a) in aux_logits.iter().enumerate() {
            let up = upsample_pow2(ctx, a, l);
            sum = Some(match sum {
                None => up,
                Some(s) => ctx.graph.add(s, up),
            });
        }
        let logits = ctx.graph.scale(sum.expect("depth >= 2"), 1.0 / depth as f64);
        let probabilities = ctx.graph.softmax(logits);
        Ok(SegOutput { logits, aux_logits, probabilities })
    }
}

impl SegOutput {
    /// Every head brought to full resolution, shallowest first.
    pub fn upsampled_heads<T: Scalar>(&self, ctx: &mut Ctx<T>) -> Vec<Var> {
        self.aux_logits.iter().enumerate().map(|(l, &a)| upsample_pow2(ctx, a, l)).collect()
    }
}
