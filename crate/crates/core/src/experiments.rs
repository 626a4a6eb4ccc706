//! The ablation grid: every arm trained and evaluated under every missing
//! modality, reported as tab-separated rows and as a rendered table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{report_rows, ReportRegion, ReportRow};
use crate::model::Mode;
use crate::train::{evaluate, MissingStrategy, Trainer};
use crate::volume::{Case, ModalityId, Region};

/// Column order of the rendered table.
pub const TABLE_MISSING: [ModalityId; 4] = [ModalityId::Flair, ModalityId::T1, ModalityId::T1c, ModalityId::T2];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    /// Shared settings; mode and missing strategy are overridden per run.
    pub base: ExperimentConfig,
    pub arms: Vec<Mode>,
    pub missing: Vec<ModalityId>,
    /// Train the generator arm once under random missing and evaluate that
    /// model on every setting, instead of one fixed-missing run each.
    pub shared_generator: bool,
}

impl AblationPlan {
    pub fn new(base: ExperimentConfig) -> Self {
        Self { base, arms: Mode::ALL.to_vec(), missing: TABLE_MISSING.to_vec(), shared_generator: false }
    }

    /// The training strategy that serves `(arm, missing)`. Cells mapping to
    /// the same strategy share one trained model.
    pub fn strategy(&self, arm: Mode, missing: ModalityId) -> MissingStrategy {
        match arm {
            // trained on all four modalities, so the setting is irrelevant
            Mode::Replace => MissingStrategy::UniformRandom,
            Mode::DirectCcCg if self.shared_generator => MissingStrategy::UniformRandom,
            _ => MissingStrategy::Fixed(missing),
        }
    }

    /// Distinct training runs in execution order.
    pub fn runs(&self) -> Vec<(Mode, MissingStrategy)> {
        let mut out = Vec::new();
        for &arm in &self.arms {
            for &m in &self.missing {
                let key = (arm, self.strategy(arm, m));
                if !out.contains(&key) {
                    out.push(key);
                }
            }
        }
        out
    }

    pub fn run_config(&self, arm: Mode, strategy: MissingStrategy) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.mode = arm;
        cfg.train.missing = strategy;
        cfg
    }
}

/// Checkpoint file name of one training run.
pub fn checkpoint_name(arm: Mode, strategy: MissingStrategy) -> String {
    format!("{}_{}.ckpt", arm.token(), strategy)
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub rows: Vec<ReportRow>,
    /// Epochs trained per run.
    pub epochs: BTreeMap<String, usize>,
}

impl AblationResult {
    /// Mean AVG-DSC of `arm` over its missing settings.
    pub fn mean_avg_dsc(&self, arm: Mode) -> Option<f64> {
        mean_avg_dsc(&self.rows, arm)
    }
}

pub fn mean_avg_dsc(rows: &[ReportRow], arm: Mode) -> Option<f64> {
    let vals: Vec<f64> =
        rows.iter().filter(|r| r.arm == arm.label() && r.region == ReportRegion::Avg).map(|r| r.dsc).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn tagged(arm: Mode, strategy: MissingStrategy) -> impl Fn(Error) -> Error {
    move |e| Error::Arm { arm: arm.label().into(), missing: strategy.to_string(), source: Box::new(e) }
}

/// Train (or resume from `checkpoint_dir`) one run to completion.
fn train_run(
    plan: &AblationPlan,
    arm: Mode,
    strategy: MissingStrategy,
    train: &[Case],
    val: &[Case],
    checkpoint_dir: Option<&Path>,
) -> Result<Trainer> {
    let cfg = plan.run_config(arm, strategy);
    let path: Option<PathBuf> = checkpoint_dir.map(|d| d.join(checkpoint_name(arm, strategy)));
    let mut trainer = match &path {
        Some(p) if p.exists() => {
            let t = checkpoint::load(p)?;
            if t.config != cfg {
                return Err(Error::Checkpoint(format!("{} was written for a different configuration", p.display())));
            }
            t
        }
        _ => Trainer::new(cfg)?,
    };
    trainer.fit(train, val, |t| match &path {
        Some(p) => checkpoint::save(t, p),
        None => Ok(()),
    })?;
    Ok(trainer)
}

/// Run the grid. `log` receives one line per finished run.
pub fn run_ablation(
    plan: &AblationPlan,
    train: &[Case],
    val: &[Case],
    test: &[Case],
    checkpoint_dir: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<AblationResult> {
    if let Some(d) = checkpoint_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut trained = BTreeMap::new();
    let mut epochs = BTreeMap::new();
    for (arm, strategy) in plan.runs() {
        let trainer = train_run(plan, arm, strategy, train, val, checkpoint_dir).map_err(tagged(arm, strategy))?;
        log(&format!(
            "{} / {}: {} epochs, best validation loss {:.5}",
            arm.label(),
            strategy,
            trainer.epoch,
            trainer.best_val
        ));
        epochs.insert(format!("{}/{}", arm.token(), strategy), trainer.epoch);
        trained.insert(format!("{}/{}", arm.token(), strategy), trainer);
    }
    let mut rows = Vec::new();
    for &arm in &plan.arms {
        for &m in &plan.missing {
            let strategy = plan.strategy(arm, m);
            let t = &trained[&format!("{}/{}", arm.token(), strategy)];
            let eval = evaluate(&t.model, &t.best_params, test, m).map_err(tagged(arm, strategy))?;
            rows.extend(report_rows(arm.label(), m.label(), &eval.mean));
        }
    }
    Ok(AblationResult { rows, epochs })
}

/// Human-readable grid: one block of DSC (percent) and HD rows per arm,
/// with WT / TC / ET / AVG columns under each missing modality.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut arms: Vec<&str> = Vec::new();
    let mut missing: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
        if !missing.contains(&r.missing.as_str()) {
            missing.push(&r.missing);
        }
    }
    let lookup = |arm: &str, m: &str, region: ReportRegion| rows.iter().find(|r| r.arm == arm && r.missing == m && r.region == region);
    let regions = [
        ReportRegion::Region(Region::WholeTumor),
        ReportRegion::Region(Region::TumorCore),
        ReportRegion::Region(Region::Enhancing),
        ReportRegion::Avg,
    ];
    let mut out = String::new();
    let _ = write!(out, "{:<16}{:<6}", "", "");
    for m in &missing {
        let _ = write!(out, "| {:<31}", format!("Missing {m}"));
    }
    out.push('\n');
    let _ = write!(out, "{:<16}{:<6}", "Methods", "");
    for _ in &missing {
        let _ = write!(out, "|");
        for r in regions {
            let _ = write!(out, "{:>8}", r.label());
        }
    }
    out.push('\n');
    for arm in &arms {
        for (metric, scale) in [("DSC", 100.0), ("HD", 1.0)] {
            let name = if metric == "DSC" { *arm } else { "" };
            let _ = write!(out, "{name:<16}{metric:<6}");
            for m in &missing {
                let _ = write!(out, "|");
                for region in regions {
                    let cell = lookup(arm, m, region).map_or("-".to_string(), |r| {
                        let v = if metric == "DSC" { r.dsc } else { r.hd };
                        format!("{:.1}", v * scale)
                    });
                    let _ = write!(out, "{cell:>8}");
                }
            }
            out.push('\n');
        }
    }
    out
}
