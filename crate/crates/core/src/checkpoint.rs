//! Trainer snapshots: a text header followed by little-endian `f32`
//! payloads.
//!
//! The header echoes the experiment configuration so the model can be
//! rebuilt, then lists the scalar training state and one line per tensor.
//! Floats are written in shortest round-trip form, so a restored trainer
//! continues bit-for-bit where the saved one stopped.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use mmseg_tensor::{ParamStore, Tensor};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::train::{EpochRecord, LossValues, Trainer};

pub const MAGIC: &str = "MMSEG-CKPT v1";
const PAYLOAD_MARK: &str = "payload";

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

/// Tensor groups stored for every parameter, in file order.
const GROUPS: [&str; 4] = ["param", "best", "adam_m", "adam_v"];

fn group_tensors<'a>(tr: &'a Trainer, group: &str) -> Vec<&'a Tensor<f32>> {
    let from_store = |s: &'a ParamStore<f32>| s.ids().map(|id| s.get(id)).collect();
    match group {
        "param" => from_store(&tr.params),
        "best" => from_store(&tr.best_params),
        "adam_m" => tr.optimizer.m.iter().collect(),
        _ => tr.optimizer.v.iter().collect(),
    }
}

/// Serialize `tr` to bytes.
pub fn encode(tr: &Trainer) -> Vec<u8> {
    let mut h = String::new();
    let _ = writeln!(h, "{MAGIC}");
    for line in tr.config.render().lines() {
        let _ = writeln!(h, "config {line}");
    }
    let _ = writeln!(h, "epoch {}", tr.epoch);
    let _ = writeln!(h, "stopped {}", tr.stopped);
    let _ = writeln!(h, "lr {}", tr.schedule.lr);
    let _ = writeln!(h, "schedule {} {}", tr.schedule.best, tr.schedule.wait);
    let _ = writeln!(h, "stopper {} {}", tr.stopper.best, tr.stopper.wait);
    let _ = writeln!(h, "optimizer {} {}", tr.optimizer.t, tr.optimizer.m_schedule);
    let _ = writeln!(h, "best_val {}", tr.best_val);
    for r in &tr.history {
        let steps: Vec<String> = r.step_losses.iter().map(|v| v.to_string()).collect();
        let t = &r.train;
        let _ = writeln!(
            h,
            "history {} {} {} {} {} {} {} {}",
            r.epoch,
            r.lr,
            t.total,
            t.dice,
            t.gen,
            t.cc,
            r.val_loss,
            if steps.is_empty() { "-".to_string() } else { steps.join(",") }
        );
    }
    for group in GROUPS {
        for (id, t) in tr.params.ids().zip(group_tensors(tr, group)) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(h, "tensor {group}/{} {}", tr.params.name(id), dims.join(" "));
        }
    }
    let _ = writeln!(h, "{PAYLOAD_MARK}");
    let mut out = h.into_bytes();
    for group in GROUPS {
        for t in group_tensors(tr, group) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Write atomically: a sibling temporary file is renamed into place.
pub fn save(tr: &Trainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(tr))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    decode(&fs::read(path)?)
}

fn num<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("bad or missing {what}")))
}

/// Rebuild a trainer from [`encode`] output.
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let mark = format!("\n{PAYLOAD_MARK}\n");
    let split = bytes
        .windows(mark.len())
        .position(|w| w == mark.as_bytes())
        .ok_or_else(|| bad("no payload marker"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let mut payload = &bytes[split + mark.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing `{MAGIC}` magic")));
    }

    let mut config_text = String::new();
    let mut fields: Vec<(&str, &str)> = Vec::new();
    let mut tensors: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut history = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "config" => {
                config_text.push_str(rest);
                config_text.push('\n');
            }
            "tensor" => {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| bad("tensor line without a name"))?;
                let dims = parts.map(|d| num(Some(d), "tensor extent")).collect::<Result<_>>()?;
                tensors.push((name, dims));
            }
            "history" => history.push(parse_history(rest)?),
            _ => fields.push((key, rest)),
        }
    }
    let field = |k: &str| -> Result<Vec<&str>> {
        fields
            .iter()
            .find(|(key, _)| *key == k)
            .map(|(_, v)| v.split_whitespace().collect())
            .ok_or_else(|| bad(format!("missing `{k}`")))
    };

    let config = ExperimentConfig::parse(&config_text)?;
    let mut tr = Trainer::new(config)?;
    tr.epoch = num(field("epoch")?.first().copied(), "epoch")?;
    tr.stopped = num(field("stopped")?.first().copied(), "stopped")?;
    tr.schedule.lr = num(field("lr")?.first().copied(), "lr")?;
    let s = field("schedule")?;
    tr.schedule.best = num(s.first().copied(), "schedule best")?;
    tr.schedule.wait = num(s.get(1).copied(), "schedule wait")?;
    let s = field("stopper")?;
    tr.stopper.best = num(s.first().copied(), "stopper best")?;
    tr.stopper.wait = num(s.get(1).copied(), "stopper wait")?;
    let s = field("optimizer")?;
    tr.optimizer.t = num(s.first().copied(), "optimizer step")?;
    tr.optimizer.m_schedule = num(s.get(1).copied(), "momentum schedule")?;
    tr.best_val = num(field("best_val")?.first().copied(), "best_val")?;
    tr.history = history;

    let n = tr.params.len();
    if tensors.len() != GROUPS.len() * n {
        return Err(bad(format!("expected {} tensors, found {}", GROUPS.len() * n, tensors.len())));
    }
    for (k, (name, dims)) in tensors.iter().enumerate() {
        let (group, pname) = (GROUPS[k / n], tr.params.name(tr.params.ids().nth(k % n).unwrap()).to_string());
        if *name != format!("{group}/{pname}") {
            return Err(bad(format!("tensor {k} is `{name}`, expected `{group}/{pname}`")));
        }
        let count: usize = dims.iter().product();
        if payload.len() < 4 * count {
            return Err(bad(format!("payload truncated in `{name}`")));
        }
        let data: Vec<f32> = payload[..4 * count].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        payload = &payload[4 * count..];
        let id = tr.params.ids().nth(k % n).unwrap();
        let slot = match group {
            "param" => tr.params.get_mut(id),
            "best" => tr.best_params.get_mut(id),
            "adam_m" => &mut tr.optimizer.m[k % n],
            _ => &mut tr.optimizer.v[k % n],
        };
        if slot.shape() != dims.as_slice() {
            return Err(bad(format!("`{name}` has shape {dims:?}, model expects {:?}", slot.shape())));
        }
        *slot = Tensor::new(dims, data);
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing payload bytes", payload.len())));
    }
    Ok(tr)
}

fn parse_history(rest: &str) -> Result<EpochRecord> {
    let p: Vec<&str> = rest.split_whitespace().collect();
    if p.len() != 8 {
        return Err(bad(format!("history line has {} fields", p.len())));
    }
    let f = |i: usize| num::<f64>(Some(p[i]), "history value");
    let step_losses = if p[7] == "-" { Vec::new() } else { p[7].split(',').map(|v| num(Some(v), "step loss")).collect::<Result<_>>()? };
    Ok(EpochRecord {
        epoch: num(Some(p[0]), "history epoch")?,
        lr: f(1)?,
        train: LossValues { total: f(2)?, dice: f(3)?, gen: f(4)?, cc: f(5)? },
        val_loss: f(6)?,
        step_losses,
    })
}
