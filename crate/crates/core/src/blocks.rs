//! Network building blocks shared by the generator and the segmenter.
//!
//! Blocks own only [`ParamId`]s; the tensors live in a [`ParamStore`]. The
//! same block can therefore be evaluated against an `f32` store for
//! training and against an `f64` copy of it for finite-difference checks.

use mmseg_tensor::{ConvGeometry, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::Shape3;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub dilation_rates: Vec<usize>,
    pub dropout_rate: f64,
    pub kernel_size: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { base_filters: 8, depth: 3, dilation_rates: vec![2, 4], dropout_rate: 0.1, kernel_size: 3 }
    }
}

impl BlockConfig {
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn bottleneck_filters(&self) -> usize {
        self.filters(self.depth - 1)
    }

    /// Level that receives the condition channel: the second deepest.
    pub fn condition_level(&self) -> usize {
        self.depth - 2
    }

    /// Spatial shape at `level` for an input of shape `input`.
    pub fn level_shape(&self, input: Shape3, level: usize) -> Shape3 {
        input.map(|n| n >> level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.base_filters == 0 {
            return bad("base_filters must be positive".into());
        }
        if self.depth < 2 {
            return bad(format!("depth {} < 2", self.depth));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return bad("dilation_rates must be a nonempty list of positive rates".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Inputs must halve cleanly `depth - 1` times.
    pub fn check_input_shape(&self, shape: Shape3) -> Result<()> {
        let unit = 1usize << (self.depth - 1);
        if shape.iter().any(|&n| n == 0 || n % unit != 0) {
            return Err(Error::Shape(format!("{shape:?} is not divisible by {unit} on every axis")));
        }
        Ok(())
    }
}

/// Parameter factory with a seeded initializer.
pub struct Init {
    pub store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng) as f32);
        self.store.add(name, t)
    }

    /// He-normal for leaky-ReLU networks.
    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        self.normal(name, shape, gain / (fan_in as f64).sqrt())
    }
}

/// One forward pass: the tape, the parameters it reads and the dropout
/// state.
pub struct Ctx<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub store: &'a ParamStore<T>,
    dropout: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Inference mode: dropout disabled.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self { graph: Graph::new(), store, dropout: None }
    }

    /// Training mode with dropout masks drawn from `rng`.
    pub fn train(store: &'a ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Self { graph: Graph::new(), store, dropout: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.graph.shape(v).to_vec()
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout.as_mut() else { return x };
        if rate == 0.0 {
            return x;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(self.graph.shape(x), |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    /// Broadcast a `[N, 1, ...]` or `[N, C, 1, 1, 1]` tensor to `like`'s shape.
    pub fn expand_as(&mut self, x: Var, like: Var) -> Var {
        let shape = self.shape(like);
        if self.graph.shape(x) == shape.as_slice() {
            return x;
        }
        self.graph.expand(x, &shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv {
    pub fn new(init: &mut Init, name: &str, in_ch: usize, out_ch: usize, geom: ConvGeometry, bias: bool) -> Self {
        let k = geom.kernel;
        let w = init.he(&format!("{name}.w"), &[out_ch, in_ch, k, k, k], in_ch * k * k * k);
        let b = bias.then(|| init.zeros(&format!("{name}.b"), &[out_ch]));
        Self { w, b, geom, in_ch, out_ch }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x)[1];
        if c != self.in_ch {
            return Err(Error::Shape(format!("conv expects {} input channels, got {c}", self.in_ch)));
        }
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        Ok(ctx.graph.conv3d(x, w, b, self.geom))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, ch: usize) -> Self {
        Self { gamma: init.ones(&format!("{name}.gamma"), &[ch]), beta: init.zeros(&format!("{name}.beta"), &[ch]) }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.graph.instance_norm(x, g, b)
    }
}

/// Convolution, instance normalization, leaky ReLU. The convolution has no
/// bias because the normalization would cancel it.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBlock {
    pub fn new(init: &mut Init, name: &str, in_ch: usize, filters: usize, cfg: &BlockConfig) -> Self {
        Self::with_geometry(init, name, in_ch, filters, ConvGeometry::same(cfg.kernel_size, 1))
    }

    /// Stride-2 variant used between encoder levels.
    pub fn down(init: &mut Init, name: &str, in_ch: usize, filters: usize, cfg: &BlockConfig) -> Self {
        Self::with_geometry(init, name, in_ch, filters, ConvGeometry::down(cfg.kernel_size))
    }

    fn with_geometry(init: &mut Init, name: &str, in_ch: usize, filters: usize, geom: ConvGeometry) -> Self {
        Self {
            conv: Conv::new(init, &format!("{name}.conv"), in_ch, filters, geom, false),
            norm: Norm::new(init, &format!("{name}.norm"), filters),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y);
        Ok(ctx.graph.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// Residual block of stacked dilated convolutions: `x' + g(x')` where `x'`
/// is `x` or its pointwise projection to `filters` channels.
#[derive(Clone, Debug)]
pub struct ResDilBlock {
    pub proj: Option<Conv>,
    pub convs: Vec<(Conv, Norm)>,
    dropout_rate: f64,
}

impl ResDilBlock {
    pub fn new(init: &mut Init, name: &str, in_ch: usize, filters: usize, cfg: &BlockConfig) -> Self {
        let proj = (in_ch != filters)
            .then(|| Conv::new(init, &format!("{name}.proj"), in_ch, filters, ConvGeometry::pointwise(), true));
        let convs = cfg
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                let geom = ConvGeometry::same(cfg.kernel_size, rate);
                (
                    Conv::new(init, &format!("{name}.dil{i}"), filters, filters, geom, false),
                    Norm::new(init, &format!("{name}.norm{i}"), filters),
                )
            })
            .collect();
        Self { proj, convs, dropout_rate: cfg.dropout_rate }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let x = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let mut h = x;
        for (i, (conv, norm)) in self.convs.iter().enumerate() {
            h = conv.forward(ctx, h)?;
            h = norm.forward(ctx, h);
            if i + 1 < self.convs.len() {
                h = ctx.graph.leaky_relu(h, LEAKY_SLOPE);
                h = ctx.dropout(h, self.dropout_rate);
            }
        }
        Ok(ctx.graph.add(x, h))
    }

    /// Parameters of the residual branch `g` (excluding the projection).
    pub fn branch_params(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|(c, n)| [c.w, n.gamma, n.beta]).collect()
    }
}

/// Learned per-index spatial map: a `4 x E` table, `E = D*H*W` of the level
/// it feeds.
#[derive(Clone, Debug)]
pub struct ConditionEmbedding {
    pub table: ParamId,
    pub shape: Shape3,
}

pub const CONDITION_COUNT: usize = 4;

impl ConditionEmbedding {
    pub fn new(init: &mut Init, name: &str, shape: Shape3) -> Self {
        let e = shape.iter().product();
        Self { table: init.normal(&format!("{name}.table"), &[CONDITION_COUNT, e], 1.0), shape }
    }

    /// `[batch, 1, D, H, W]` map for condition `index`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, index: usize, batch: usize) -> Result<Var> {
        if index >= CONDITION_COUNT {
            return Err(Error::ConditionIndex(index));
        }
        let [d, h, w] = self.shape;
        let t = ctx.p(self.table);
        let row = ctx.graph.select_row(t, index);
        let map = ctx.graph.reshape(row, &[1, 1, d, h, w]);
        Ok(if batch == 1 { map } else { ctx.graph.expand(map, &[batch, 1, d, h, w]) })
    }
}

/// Modality-wise and spatial attention over a list of same-shaped features.
///
/// A shared scorer maps each input's pooled descriptor to one logit; the
/// softmax of those logits weighs the inputs. A pointwise convolution over
/// the concatenated inputs yields a sigmoid spatial gate applied to the
/// weighted sum, followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct AttentionFusion {
    pub scorer: ParamId,
    pub gate: Conv,
    pub proj: Conv,
    pub inputs: usize,
    pub channels: usize,
}

/// Intermediate results of [`AttentionFusion::forward_parts`].
pub struct FusionParts {
    /// `[N, M]` modality weights.
    pub weights: Var,
    /// `[N, 1, D, H, W]` spatial gate.
    pub spatial: Var,
    pub output: Var,
}

impl AttentionFusion {
    pub fn new(init: &mut Init, name: &str, inputs: usize, channels: usize) -> Self {
        Self {
            scorer: init.normal(&format!("{name}.scorer"), &[1, channels], 1.0 / (channels as f64).sqrt()),
            gate: Conv::new(init, &format!("{name}.gate"), inputs * channels, 1, ConvGeometry::pointwise(), true),
            proj: Conv::new(init, &format!("{name}.proj"), channels, channels, ConvGeometry::pointwise(), true),
            inputs,
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, features: &[Var]) -> Result<Var> {
        Ok(self.forward_parts(ctx, features)?.output)
    }

    pub fn forward_parts<T: Scalar>(&self, ctx: &mut Ctx<T>, features: &[Var]) -> Result<FusionParts> {
        if features.len() != self.inputs {
            return Err(Error::Shape(format!("fusion expects {} inputs, got {}", self.inputs, features.len())));
        }
        let shape = ctx.shape(features[0]);
        if features.iter().any(|&f| ctx.graph.shape(f) != shape.as_slice()) {
            return Err(Error::Shape("fusion inputs disagree in shape".into()));
        }
        if shape[1] != self.channels {
            return Err(Error::Shape(format!("fusion expects {} channels, got {}", self.channels, shape[1])));
        }
        let n = shape[0];
        let w = ctx.p(self.scorer);
        // the scorer is shared across inputs, so a bias would cancel in the softmax
        let no_bias = ctx.input(Tensor::zeros(&[1]));
        let scores: Vec<Var> = features
            .iter()
            .map(|&f| {
                let pooled = ctx.graph.spatial_mean(f);
                ctx.graph.linear(pooled, w, no_bias)
            })
            .collect();
        let scores = ctx.graph.concat_channels(&scores);
        let weights = ctx.graph.softmax(scores);
        let mut acc = None;
        for (i, &f) in features.iter().enumerate() {
            let wi = ctx.graph.slice_channels(weights, i, i + 1);
            let wi = ctx.graph.reshape(wi, &[n, 1, 1, 1, 1]);
            let wi = ctx.graph.expand(wi, &shape);
            let term = ctx.graph.mul(wi, f);
            acc = Some(match acc {
                None => term,
                Some(a) => ctx.graph.add(a, term),
            });
        }
        let fused = acc.expect("at least one input");
        let stacked = ctx.graph.concat_channels(features);
        let gate = self.gate.forward(ctx, stacked)?;
        let spatial = ctx.graph.sigmoid(gate);
        let spatial_full = ctx.expand_as(spatial, fused);
        let gated = ctx.graph.mul(fused, spatial_full);
        let output = self.proj.forward(ctx, gated)?;
        Ok(FusionParts { weights, spatial, output })
    }
}

/// Decoder step: upsample, convolve, concatenate the skip, convolve back to
/// `filters`, then a residual dilated block.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub up: ConvBlock,
    pub merge: ConvBlock,
    pub res: ResDilBlock,
}

impl UpBlock {
    pub fn new(init: &mut Init, name: &str, low_ch: usize, skip_ch: usize, filters: usize, cfg: &BlockConfig) -> Self {
        Self {
            up: ConvBlock::new(init, &format!("{name}.up"), low_ch, filters, cfg),
            merge: ConvBlock::new(init, &format!("{name}.merge"), filters + skip_ch, filters, cfg),
            res: ResDilBlock::new(init, &format!("{name}.res"), filters, filters, cfg),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, low: Var, skip: Var) -> Result<Var> {
        let (ls, ss) = (ctx.shape(low), ctx.shape(skip));
        if ls.len() != 5 || ss.len() != 5 || ls[0] != ss[0] || (2..5).any(|a| 2 * ls[a] != ss[a]) {
            return Err(Error::Shape(format!("cannot upsample {ls:?} onto skip {ss:?}")));
        }
        let up = ctx.graph.upsample2(low);
        let up = self.up.forward(ctx, up)?;
        let cat = ctx.graph.concat_channels(&[up, skip]);
        let merged = self.merge.forward(ctx, cat)?;
        self.res.forward(ctx, merged)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub block: ConvBlock,
    pub res: ResDilBlock,
}

/// Single-modality encoder tower. Level 0 keeps the input resolution, each
/// further level halves it with a strided convolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub levels: Vec<EncoderLevel>,
    pub condition: Option<ConditionEmbedding>,
    condition_level: usize,
}

impl Encoder {
    /// `condition_shape` is the input shape; when present the encoder takes
    /// a condition index and concatenates its embedding at the second
    /// deepest level.
    pub fn new(init: &mut Init, name: &str, in_ch: usize, cfg: &BlockConfig, condition_shape: Option<Shape3>) -> Self {
        let cond_level = cfg.condition_level();
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut ch = in_ch;
        for l in 0..cfg.depth {
            let f = cfg.filters(l);
            let block = if l == 0 {
                ConvBlock::new(init, &format!("{name}.l{l}.block"), ch, f, cfg)
            } else {
                ConvBlock::down(init, &format!("{name}.l{l}.block"), ch, f, cfg)
            };
            let extra = usize::from(condition_shape.is_some() && l == cond_level);
            let res = ResDilBlock::new(init, &format!("{name}.l{l}.res"), f + extra, f, cfg);
            levels.push(EncoderLevel { block, res });
            ch = f;
        }
        let condition = condition_shape
            .map(|s| ConditionEmbedding::new(init, &format!("{name}.embed"), cfg.level_shape(s, cond_level)));
        Self { levels, condition, condition_level: cond_level }
    }

    pub fn is_conditioned(&self) -> bool {
        self.condition.is_some()
    }

    /// Features of every level, shallowest first.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, condition: Option<usize>) -> Result<Vec<Var>> {
        match (&self.condition, condition) {
            (Some(_), None) => return Err(Error::InvalidArgument("conditioned encoder needs a condition index".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("encoder was built without a condition input".into())),
            _ => {}
        }
        let mut feats = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for (l, level) in self.levels.iter().enumerate() {
            h = level.block.forward(ctx, h)?;
            if let (Some(embed), Some(idx), true) = (&self.condition, condition, l == self.condition_level) {
                let sh = ctx.shape(h);
                if sh[2..] != embed.shape {
                    return Err(Error::Shape(format!("condition map {:?} does not match level shape {:?}", embed.shape, &sh[2..])));
                }
                let map = embed.forward(ctx, idx, sh[0])?;
                h = ctx.graph.concat_channels(&[h, map]);
            }
            h = level.res.forward(ctx, h)?;
            feats.push(h);
        }
        Ok(feats)
    }
}

/// Decoder path mirroring an encoder of `cfg.depth` levels. `skip_channels`
/// holds the channel count of the skip tensor at each level below the
/// bottleneck.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub ups: Vec<UpBlock>,
}

impl Decoder {
    pub fn new(init: &mut Init, name: &str, bottleneck_ch: usize, skip_channels: &[usize], cfg: &BlockConfig) -> Self {
        assert_eq!(skip_channels.len(), cfg.depth - 1);
        let mut low = bottleneck_ch;
        let mut ups = Vec::new();
        for l in (0..cfg.depth - 1).rev() {
            let f = cfg.filters(l);
            ups.push(UpBlock::new(init, &format!("{name}.up{l}"), low, skip_channels[l], f, cfg));
            low = f;
        }
        Self { ups }
    }

    /// Outputs of every decoder level, deepest first (the bottleneck itself
    /// is not included).
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, bottleneck: Var, skips: &[Var]) -> Result<Vec<Var>> {
        let mut h = bottleneck;
        let mut outs = Vec::with_capacity(self.ups.len());
        for (i, up) in self.ups.iter().enumerate() {
            let level = skips.len() - 1 - i;
            h = up.forward(ctx, h, skips[level])?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Nearest-neighbour upsampling by `2^times`.
pub fn upsample_pow2<T: Scalar>(ctx: &mut Ctx<T>, x: Var, times: usize) -> Var {
    (0..times).fold(x, |h, _| ctx.graph.upsample2(h))
}
