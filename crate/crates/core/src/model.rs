//! Full network for each ablation arm.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use mmseg_tensor::{ParamId, ParamStore, Scalar, Var};

use crate::blocks::{BlockConfig, Ctx, Encoder, Init};
use crate::correlation::CorrelationNet;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::segmentation::{SegOutput, Segmenter};
use crate::volume::{ModalityId, Shape3};

/// Ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Trained on all four modalities; at test time the missing one is
    /// replaced by its most similar contrast.
    Replace,
    /// Segments directly from the three available modalities.
    Direct,
    /// `Direct` plus the correlation constraint.
    DirectCc,
    /// Generator, correlation constraint and four-input segmentation.
    DirectCcCg,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Replace, Mode::Direct, Mode::DirectCc, Mode::DirectCcCg];

    pub fn token(self) -> &'static str {
        match self {
            Mode::Replace => "replace",
            Mode::Direct => "direct",
            Mode::DirectCc => "direct_cc",
            Mode::DirectCcCg => "direct_cc_cg",
        }
    }

    /// Row label for result tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Replace => "Replace",
            Mode::Direct => "Direct",
            Mode::DirectCc => "Direct+CC",
            Mode::DirectCcCg => "Direct+CC+CG",
        }
    }

    pub fn uses_correlation(self) -> bool {
        matches!(self, Mode::DirectCc | Mode::DirectCcCg)
    }

    pub fn uses_generator(self) -> bool {
        self == Mode::DirectCcCg
    }

    /// Number of feature streams reaching the segmenter.
    pub fn segmenter_inputs(self) -> usize {
        match self {
            Mode::Direct | Mode::DirectCc => 3,
            Mode::Replace | Mode::DirectCcCg => 4,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.token() == s).ok_or_else(|| {
            let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.token()).collect();
            Error::InvalidArgument(format!("unknown mode `{s}` (valid: {})", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub block: BlockConfig,
    pub input_shape: Shape3,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// One encoder per real modality. In the generator arm these are the
    /// same parameter sets used by the generator and the segmenter.
    pub encoders: BTreeMap<ModalityId, Encoder>,
    /// Extra encoder for the generated volume.
    pub generated_encoder: Option<Encoder>,
    pub generator: Option<Generator>,
    pub correlation: Option<CorrelationNet>,
    pub segmenter: Segmenter,
}

/// Everything a training step needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub seg: SegOutput,
    pub generated: Option<Var>,
    /// Bottleneck features keyed by modality slot (the generated volume's
    /// features sit in the missing modality's slot).
    pub features: BTreeMap<ModalityId, Var>,
    pub correlated: Option<BTreeMap<ModalityId, Var>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.block.validate()?;
        config.block.check_input_shape(config.input_shape)?;
        let cfg = &config.block;
        let mode = config.mode;
        let mut init = Init::new(seed);
        let cond = mode.uses_generator().then_some(config.input_shape);
        let encoders = ModalityId::ALL
            .into_iter()
            .map(|m| (m, Encoder::new(&mut init, &format!("enc.{}", m.token()), 1, cfg, cond)))
            .collect();
        let (generated_encoder, generator) = if mode.uses_generator() {
            (Some(Encoder::new(&mut init, "enc.generated", 1, cfg, None)), Some(Generator::new(&mut init, "gen", cfg)))
        } else {
            (None, None)
        };
        let correlation = mode
            .uses_correlation()
            .then(|| CorrelationNet::new(&mut init, "cc", cfg.bottleneck_filters(), mode.segmenter_inputs()));
        let segmenter = Segmenter::new(&mut init, "seg", mode.segmenter_inputs(), cfg);
        let model = Self { config, encoders, generated_encoder, generator, correlation, segmenter };
        Ok((model, init.store))
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    fn check_inputs<T: Scalar>(&self, ctx: &Ctx<T>, inputs: &BTreeMap<ModalityId, Var>) -> Result<usize> {
        let [d, h, w] = self.config.input_shape;
        let mut batch = None;
        for (m, &v) in inputs {
            let sh = ctx.graph.shape(v);
            if sh.len() != 5 || sh[1] != 1 || sh[2..] != [d, h, w] {
                return Err(Error::Shape(format!("{m} input {sh:?} does not match [N, 1, {d}, {h}, {w}]")));
            }
            if *batch.get_or_insert(sh[0]) != sh[0] {
                return Err(Error::Shape("inputs disagree in batch size".into()));
            }
        }
        batch.ok_or_else(|| Error::Modalities("no inputs".into()))
    }

    fn check_available(inputs: &BTreeMap<ModalityId, Var>, missing: ModalityId) -> Result<()> {
        if inputs.len() != 3 || inputs.contains_key(&missing) {
            let got: Vec<&str> = inputs.keys().map(|m| m.token()).collect();
            return Err(Error::Modalities(format!("need the 3 modalities other than {missing}, got [{}]", got.join(", "))));
        }
        Ok(())
    }

    fn encode<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        inputs: &BTreeMap<ModalityId, Var>,
        condition: Option<usize>,
    ) -> Result<BTreeMap<ModalityId, Vec<Var>>> {
        let mut out = BTreeMap::new();
        for (&m, &x) in inputs {
            out.insert(m, self.encoders[&m].forward(ctx, x, condition)?);
        }
        Ok(out)
    }

    fn segment_levels<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        levels: &BTreeMap<ModalityId, Vec<Var>>,
        use_correlation: bool,
    ) -> Result<(SegOutput, BTreeMap<ModalityId, Var>, Option<BTreeMap<ModalityId, Var>>)> {
        let features: BTreeMap<ModalityId, Var> =
            levels.iter().map(|(&m, l)| (m, *l.last().expect("depth >= 2"))).collect();
        let correlated = if use_correlation {
            let cc = self
                .correlation
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{} model has no correlation module", self.mode())))?;
            Some(cc.correlated_representations(ctx, &features)?)
        } else {
            None
        };
        let ordered: Vec<Vec<Var>> = levels.values().cloned().collect();
        let bottleneck: Option<Vec<Var>> = correlated.as_ref().map(|c| c.values().copied().collect());
        let seg = self.segmenter.forward(ctx, &ordered, bottleneck.as_deref())?;
        Ok((seg, features, correlated))
    }

    fn require_generator(&self) -> Result<(&Generator, &Encoder)> {
        match (&self.generator, &self.generated_encoder) {
            (Some(g), Some(e)) => Ok((g, e)),
            _ => Err(Error::InvalidArgument(format!("{} model has no generator", self.mode()))),
        }
    }

    /// Synthesize the missing modality from the three available ones.
    pub fn generate<T: Scalar>(&self, ctx: &mut Ctx<T>, available: &BTreeMap<ModalityId, Var>, missing: ModalityId) -> Result<Var> {
        let (generator, _) = self.require_generator()?;
        Self::check_available(available, missing)?;
        self.check_inputs(ctx, available)?;
        let levels = self.encode(ctx, available, Some(missing.condition_index()))?;
        let ordered: Vec<Vec<Var>> = levels.into_values().collect();
        generator.decode(ctx, &ordered)
    }

    /// Segment from three available modalities plus a generated one.
    pub fn segment<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        available: &BTreeMap<ModalityId, Var>,
        generated: Var,
        missing: ModalityId,
        use_correlation: bool,
    ) -> Result<SegOutput> {
        let (_, gen_encoder) = self.require_generator()?;
        Self::check_available(available, missing)?;
        let mut all = available.clone();
        all.insert(missing, generated);
        self.check_inputs(ctx, &all)?;
        let mut levels = self.encode(ctx, available, Some(missing.condition_index()))?;
        levels.insert(missing, gen_encoder.forward(ctx, generated, None)?);
        Ok(self.segment_levels(ctx, &levels, use_correlation)?.0)
    }

    /// Segment from the three available modalities alone.
    pub fn segment_direct<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        available: &BTreeMap<ModalityId, Var>,
        use_correlation: bool,
    ) -> Result<SegOutput> {
        if !matches!(self.mode(), Mode::Direct | Mode::DirectCc) {
            return Err(Error::InvalidArgument(format!("segment_direct needs a direct model, not {}", self.mode())));
        }
        if available.len() != 3 {
            return Err(Error::Modalities(format!("segment_direct needs 3 modalities, got {}", available.len())));
        }
        self.check_inputs(ctx, available)?;
        let levels = self.encode(ctx, available, None)?;
        Ok(self.segment_levels(ctx, &levels, use_correlation)?.0)
    }

    /// Mode-specific forward pass. `inputs` holds all four modalities for
    /// [`Mode::Replace`] and the three available ones otherwise.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, inputs: &BTreeMap<ModalityId, Var>, missing: ModalityId) -> Result<Forward> {
        self.check_inputs(ctx, inputs)?;
        let mode = self.mode();
        match mode {
            Mode::Replace => {
                if inputs.len() != 4 {
                    return Err(Error::Modalities(format!("replace arm needs all 4 modalities, got {}", inputs.len())));
                }
                let levels = self.encode(ctx, inputs, None)?;
                let (seg, features, _) = self.segment_levels(ctx, &levels, false)?;
                Ok(Forward { seg, generated: None, features, correlated: None })
            }
            Mode::Direct | Mode::DirectCc => {
                Self::check_available(inputs, missing)?;
                let levels = self.encode(ctx, inputs, None)?;
                let (seg, features, correlated) = self.segment_levels(ctx, &levels, mode.uses_correlation())?;
                Ok(Forward { seg, generated: None, features, correlated })
            }
            Mode::DirectCcCg => {
                let (generator, gen_encoder) = self.require_generator()?;
                Self::check_available(inputs, missing)?;
                let mut levels = self.encode(ctx, inputs, Some(missing.condition_index()))?;
                let ordered: Vec<Vec<Var>> = levels.values().cloned().collect();
                let generated = generator.decode(ctx, &ordered)?;
                levels.insert(missing, gen_encoder.forward(ctx, generated, None)?);
                let (seg, features, correlated) = self.segment_levels(ctx, &levels, true)?;
                Ok(Forward { seg, generated: Some(generated), features, correlated })
            }
        }
    }

    /// Parameters of the encoder for `m`.
    pub fn encoder_params(&self, m: ModalityId) -> Vec<ParamId> {
        let enc = &self.encoders[&m];
        let mut ids = Vec::new();
        for level in &enc.levels {
            ids.extend(level.block.conv.params());
            ids.extend([level.block.norm.gamma, level.block.norm.beta]);
            if let Some(p) = &level.res.proj {
                ids.extend(p.params());
            }
            ids.extend(level.res.branch_params());
        }
        ids.extend(enc.condition.as_ref().map(|c| c.table));
        ids
    }
}
