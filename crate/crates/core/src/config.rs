//! Declarative experiment description and its `section.key = value` text
//! form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::BlockConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::phantom::PhantomSpec;
use crate::train::TrainConfig;
use crate::volume::Shape3;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub shape: Shape3,
    pub cases: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { shape: [32, 32, 32], cases: 10, seed: 7, train_fraction: 0.8, noise_std: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub block: BlockConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { mode: Mode::DirectCcCg, block: BlockConfig::default(), data: DataConfig::default(), train: TrainConfig::default() }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("bad value `{value}` for {key}"))
}

fn parse_shape(value: &str) -> std::result::Result<Shape3, String> {
    let dims: Vec<usize> = value
        .split(|c: char| c.is_whitespace() || c == ',' || c == 'x')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad extent `{s}`")))
        .collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [n] => Ok([n, n, n]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("shape `{value}` needs 1 or 3 extents")),
    }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { block: self.block.clone(), input_shape: self.data.shape, mode: self.mode }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let mut spec = PhantomSpec::new(self.data.shape, self.data.cases, self.data.seed);
        spec.noise_std = self.data.noise_std;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.block.check_input_shape(self.data.shape)?;
        self.train.validate()?;
        self.phantom_spec().validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("train_fraction {} outside (0, 1)", self.data.train_fraction)));
        }
        Ok(())
    }

    /// Set one `section.key`. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "model.mode" => self.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "model.base_filters" => self.block.base_filters = parse(key, v)?,
            "model.depth" => self.block.depth = parse(key, v)?,
            "model.kernel_size" => self.block.kernel_size = parse(key, v)?,
            "model.dropout_rate" => self.block.dropout_rate = parse(key, v)?,
            "model.dilation_rates" => {
                self.block.dilation_rates = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "data.shape" => self.data.shape = parse_shape(v)?,
            "data.cases" => self.data.cases = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.train_fraction" => self.data.train_fraction = parse(key, v)?,
            "data.noise_std" => self.data.noise_std = parse(key, v)?,
            "train.initial_lr" => self.train.initial_lr = parse(key, v)?,
            "train.lr_factor" => self.train.lr_factor = parse(key, v)?,
            "train.lr_patience" => self.train.lr_patience = parse(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.missing" => self.train.missing = v.parse().map_err(|e: Error| e.to_string())?,
            "loss.dice" => self.train.loss_weights.dice = parse(key, v)?,
            "loss.gen" => self.train.loss_weights.gen = parse(key, v)?,
            "loss.cc" => self.train.loss_weights.cc = parse(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parse over the defaults. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply the assignments in `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config { line: i + 1, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value).map_err(err)?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let b = &self.block;
        let d = &self.data;
        let t = &self.train;
        let rates: Vec<String> = b.dilation_rates.iter().map(|r| r.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "model.mode = {}", self.mode);
        let _ = writeln!(s, "model.base_filters = {}", b.base_filters);
        let _ = writeln!(s, "model.depth = {}", b.depth);
        let _ = writeln!(s, "model.kernel_size = {}", b.kernel_size);
        let _ = writeln!(s, "model.dropout_rate = {}", b.dropout_rate);
        let _ = writeln!(s, "model.dilation_rates = {}", rates.join(","));
        let _ = writeln!(s, "data.shape = {} {} {}", d.shape[0], d.shape[1], d.shape[2]);
        let _ = writeln!(s, "data.cases = {}", d.cases);
        let _ = writeln!(s, "data.seed = {}", d.seed);
        let _ = writeln!(s, "data.train_fraction = {}", d.train_fraction);
        let _ = writeln!(s, "data.noise_std = {}", d.noise_std);
        let _ = writeln!(s, "train.initial_lr = {}", t.initial_lr);
        let _ = writeln!(s, "train.lr_factor = {}", t.lr_factor);
        let _ = writeln!(s, "train.lr_patience = {}", t.lr_patience);
        let _ = writeln!(s, "train.early_stop_patience = {}", t.early_stop_patience);
        let _ = writeln!(s, "train.max_epochs = {}", t.max_epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.missing = {}", t.missing);
        let _ = writeln!(s, "loss.dice = {}", t.loss_weights.dice);
        let _ = writeln!(s, "loss.gen = {}", t.loss_weights.gen);
        let _ = writeln!(s, "loss.cc = {}", t.loss_weights.cc);
        s
    }
}
