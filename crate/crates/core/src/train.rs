//! Training loop, validation, prediction and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use mmseg_tensor::{ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::Ctx;
use crate::config::ExperimentConfig;
use crate::correlation::correlation_loss;
use crate::error::{Error, Result};
use crate::generator::generation_loss;
use crate::losses::{deep_supervised_dice, one_hot, total_loss_graph, LossWeights};
use crate::metrics::{region_metrics, RegionMetrics};
use crate::model::{Mode, Model};
use crate::optim::{EarlyStopping, Nadam, PlateauSchedule};
use crate::volume::{Case, LabelVolume, ModalityId, Volume};

/// Which modality is withheld during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingStrategy {
    Fixed(ModalityId),
    /// Drawn uniformly per batch.
    UniformRandom,
}

impl fmt::Display for MissingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MissingStrategy::Fixed(m) => f.write_str(m.token()),
            MissingStrategy::UniformRandom => f.write_str("random"),
        }
    }
}

impl FromStr for MissingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(MissingStrategy::UniformRandom);
        }
        Ok(MissingStrategy::Fixed(s.parse()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub missing: MissingStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-4,
            lr_factor: 0.5,
            lr_patience: 10,
            early_stop_patience: 20,
            max_epochs: 100,
            batch_size: 2,
            seed: 0,
            loss_weights: LossWeights::default(),
            missing: MissingStrategy::UniformRandom,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor {} outside (0, 1)", self.lr_factor));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be positive".into());
        }
        self.loss_weights.validate()
    }
}

/// Independent deterministic generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `[N, 1, D, H, W]` stack of one modality across cases.
pub fn stack_volumes<T: Scalar>(volumes: &[&Volume]) -> Result<Tensor<T>> {
    let first = volumes.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let [d, h, w] = first.shape();
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.shape() != first.shape() {
            return Err(Error::Shape("batch volumes disagree in shape".into()));
        }
        data.extend(v.data().iter().map(|&x| T::from_f64_lossy(x as f64)));
    }
    Ok(Tensor::new(&[volumes.len(), 1, d, h, w], data))
}

fn modality(case: &Case, m: ModalityId) -> Result<&Volume> {
    case.modality(m).ok_or_else(|| Error::Modalities(format!("case {} lacks {m}", case.case_id)))
}

/// Network inputs for `mode` with `missing` withheld. The replace arm sees
/// all four modalities during training; with `substitute` set the missing
/// one is filled in with its replacement contrast instead.
pub fn model_inputs<T: Scalar>(
    mode: Mode,
    cases: &[&Case],
    missing: ModalityId,
    substitute: bool,
) -> Result<BTreeMap<ModalityId, Tensor<T>>> {
    let mut out = BTreeMap::new();
    for m in ModalityId::ALL {
        let source = match (mode, m == missing) {
            (Mode::Replace, false) => m,
            (Mode::Replace, true) if substitute => missing.replacement(),
            (Mode::Replace, true) => m,
            (_, true) => continue,
            (_, false) => m,
        };
        let vols = cases.iter().map(|c| modality(c, source)).collect::<Result<Vec<_>>>()?;
        out.insert(m, stack_volumes(&vols)?);
    }
    Ok(out)
}

/// Graph handles of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub dice: Var,
    pub gen: Option<Var>,
    pub cc: Option<Var>,
}

/// Record the full objective for `cases` on `ctx`.
pub fn loss_graph<T: Scalar>(
    model: &Model,
    ctx: &mut Ctx<T>,
    cases: &[&Case],
    missing: ModalityId,
    weights: &LossWeights,
) -> Result<LossVars> {
    let inputs = model_inputs::<T>(model.mode(), cases, missing, false)?;
    let vars: BTreeMap<ModalityId, Var> = inputs.into_iter().map(|(m, t)| (m, ctx.input(t))).collect();
    let fwd = model.forward(ctx, &vars, missing)?;
    let labels: Vec<&LabelVolume> = cases.iter().map(|c| c.labels()).collect();
    let target = ctx.input(one_hot(&labels)?);
    let dice = deep_supervised_dice(ctx, &fwd.seg, target)?;
    let gen = match fwd.generated {
        Some(g) => {
            let vols = cases.iter().map(|c| modality(c, missing)).collect::<Result<Vec<_>>>()?;
            let truth = ctx.input(stack_volumes(&vols)?);
            Some(generation_loss(ctx, g, truth)?)
        }
        None => None,
    };
    let cc = match &fwd.correlated {
        Some(corr) => {
            let orig: Vec<Var> = fwd.features.values().copied().collect();
            let cor: Vec<Var> = corr.values().copied().collect();
            Some(correlation_loss(ctx, &orig, &cor)?)
        }
        None => None,
    };
    let total = total_loss_graph(ctx, dice, gen, cc, weights);
    Ok(LossVars { total, dice, gen, cc })
}

/// Scalar values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub dice: f64,
    pub gen: f64,
    pub cc: f64,
}

impl LossValues {
    fn read<T: Scalar>(ctx: &Ctx<T>, v: &LossVars) -> Self {
        let get = |x: Var| ctx.value(x).item().to_f64_lossy();
        Self { total: get(v.total), dice: get(v.dice), gen: v.gen.map_or(0.0, get), cc: v.cc.map_or(0.0, get) }
    }

    fn accumulate(&mut self, o: &Self, w: f64) {
        self.total += w * o.total;
        self.dice += w * o.dice;
        self.gen += w * o.gen;
        self.cc += w * o.cc;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean over the epoch's steps.
    pub train: LossValues,
    pub val_loss: f64,
    pub step_losses: Vec<f64>,
}

/// Owner of every piece of mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optimizer: Nadam,
    pub schedule: PlateauSchedule,
    pub stopper: EarlyStopping,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub best_val: f64,
    pub best_params: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

/// Stream offsets keeping the data-order and validation generators apart.
const EPOCH_STREAM: u64 = 1 << 32;

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = Model::new(config.model_config(), config.train.seed)?;
        let t = &config.train;
        Ok(Self {
            optimizer: Nadam::new(&params),
            schedule: PlateauSchedule::new(t.initial_lr, t.lr_factor, t.lr_patience),
            stopper: EarlyStopping::new(t.early_stop_patience),
            epoch: 0,
            best_val: f64::INFINITY,
            best_params: params.clone(),
            history: Vec::new(),
            stopped: false,
            model,
            params,
            config,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.stopped || self.epoch >= self.config.train.max_epochs
    }

    fn pick_missing(&self, rng: &mut ChaCha8Rng) -> ModalityId {
        match self.config.train.missing {
            MissingStrategy::Fixed(m) => m,
            MissingStrategy::UniformRandom => ModalityId::ALL[rng.random_range(0..4)],
        }
    }

    /// One optimizer step on `cases`; returns the loss values before the
    /// update.
    pub fn step(&mut self, cases: &[&Case], missing: ModalityId, dropout_rng: ChaCha8Rng) -> Result<LossValues> {
        let weights = self.config.train.loss_weights;
        let mut ctx = Ctx::train(&self.params, dropout_rng);
        let vars = loss_graph(&self.model, &mut ctx, cases, missing, &weights)?;
        let values = LossValues::read(&ctx, &vars);
        if !values.total.is_finite() {
            return Err(Error::Divergence { epoch: self.epoch, step: self.optimizer.t as usize, loss: values.total });
        }
        let grads = ctx.graph.backward(vars.total);
        drop(ctx);
        self.optimizer.step(&mut self.params, &grads, self.schedule.lr);
        Ok(values)
    }

    /// Mean objective over `cases` with dropout off. Under random missing
    /// every modality is withheld in turn.
    pub fn validation_loss(&self, cases: &[Case]) -> Result<f64> {
        validation_loss(&self.model, &self.params, cases, self.config.train.missing, &self.config.train.loss_weights)
    }

    /// Train one epoch, validate, update callbacks and the best snapshot.
    pub fn run_epoch(&mut self, train: &[Case], val: &[Case]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument("training needs nonempty train and validation sets".into()));
        }
        let mut rng = stream_rng(self.config.train.seed, EPOCH_STREAM + self.epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let lr = self.schedule.lr;
        let mut mean = LossValues::default();
        let mut step_losses = Vec::new();
        let batches: Vec<Vec<usize>> = order.chunks(self.config.train.batch_size).map(<[usize]>::to_vec).collect();
        for batch in &batches {
            let missing = self.pick_missing(&mut rng);
            let dropout_rng = ChaCha8Rng::from_rng(&mut rng);
            let cases: Vec<&Case> = batch.iter().map(|&i| &train[i]).collect();
            let v = self.step(&cases, missing, dropout_rng)?;
            mean.accumulate(&v, 1.0 / batches.len() as f64);
            step_losses.push(v.total);
        }
        let val_loss = self.validation_loss(val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch: self.epoch, step: self.optimizer.t as usize, loss: val_loss });
        }
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best_params = self.params.clone();
        }
        // early stopping is checked first: an epoch that ends training
        // does not also reduce the rate
        self.stopped = self.stopper.observe(val_loss);
        if !self.stopped {
            self.schedule.observe(val_loss);
        }
        let record = EpochRecord { epoch: self.epoch, lr, train: mean, val_loss, step_losses };
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Run epochs until early stopping or `max_epochs`. `after_epoch` is
    /// called after every epoch (checkpointing, logging).
    pub fn fit(&mut self, train: &[Case], val: &[Case], mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(train, val)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

pub fn validation_loss(
    model: &Model,
    params: &ParamStore<f32>,
    cases: &[Case],
    missing: MissingStrategy,
    weights: &LossWeights,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let settings: Vec<ModalityId> = match missing {
        MissingStrategy::Fixed(m) => vec![m],
        MissingStrategy::UniformRandom => ModalityId::ALL.to_vec(),
    };
    let mut total = 0.0;
    for case in cases {
        for &m in &settings {
            let mut ctx = Ctx::eval(params);
            let vars = loss_graph(model, &mut ctx, &[case], m, weights)?;
            total += ctx.value(vars.total).item() as f64;
        }
    }
    Ok(total / (cases.len() * settings.len()) as f64)
}

/// Output of [`predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: LabelVolume,
    pub generated: Option<Volume>,
    /// Bottleneck features per modality slot, `[C, d, h, w]` flattened.
    pub features: BTreeMap<ModalityId, Tensor<f32>>,
}

/// Segment one case with `missing` withheld (dropout off).
pub fn predict(model: &Model, params: &ParamStore<f32>, case: &Case, missing: ModalityId) -> Result<Prediction> {
    let mut ctx = Ctx::eval(params);
    let inputs = model_inputs::<f32>(model.mode(), &[case], missing, true)?;
    let vars: BTreeMap<ModalityId, Var> = inputs.into_iter().map(|(m, t)| (m, ctx.input(t))).collect();
    let fwd = model.forward(&mut ctx, &vars, missing)?;
    let probs = ctx.value(fwd.seg.probabilities);
    let s = probs.spatial_len();
    let k = probs.shape()[1];
    let p = probs.data();
    let labels = (0..s)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if p[c * s + i] > p[best * s + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let shape = case.shape();
    let generated = match fwd.generated {
        Some(g) => Some(Volume::new(shape, ctx.value(g).data().to_vec())?),
        None => None,
    };
    let features = fwd.features.iter().map(|(&m, &v)| (m, ctx.value(v).clone())).collect();
    Ok(Prediction { labels: LabelVolume::new(shape, labels)?, generated, features })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_case: Vec<(String, RegionMetrics)>,
    pub mean: RegionMetrics,
}

/// Region metrics of every case and their mean.
pub fn evaluate(model: &Model, params: &ParamStore<f32>, cases: &[Case], missing: ModalityId) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty case list".into()));
    }
    let mut per_case = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = predict(model, params, case, missing)?;
        per_case.push((case.case_id.clone(), region_metrics(&pred.labels, case.labels())?));
    }
    let scores: Vec<RegionMetrics> = per_case.iter().map(|(_, m)| *m).collect();
    Ok(Evaluation { mean: RegionMetrics::mean(&scores)?, per_case })
}
