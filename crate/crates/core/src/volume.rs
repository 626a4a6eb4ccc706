//! Multi-modal volumes, label maps and preprocessing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One MR contrast. Declaration order is the condition-index order, so the
/// derived `Ord` sorts modalities by condition index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityId {
    T2,
    T1c,
    Flair,
    T1,
}

impl ModalityId {
    pub const ALL: [ModalityId; 4] = [ModalityId::T2, ModalityId::T1c, ModalityId::Flair, ModalityId::T1];

    /// Index fed to the generator's condition embedding.
    pub fn condition_index(self) -> usize {
        match self {
            ModalityId::T2 => 0,
            ModalityId::T1c => 1,
            ModalityId::Flair => 2,
            ModalityId::T1 => 3,
        }
    }

    pub fn from_condition_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::ConditionIndex(index))
    }

    pub fn token(self) -> &'static str {
        match self {
            ModalityId::T2 => "t2",
            ModalityId::T1c => "t1c",
            ModalityId::Flair => "flair",
            ModalityId::T1 => "t1",
        }
    }

    /// Display label in the style of result tables ("FLAIR", "T1c", ...).
    pub fn label(self) -> &'static str {
        match self {
            ModalityId::T2 => "T2",
            ModalityId::T1c => "T1c",
            ModalityId::Flair => "FLAIR",
            ModalityId::T1 => "T1",
        }
    }

    /// The modality with the most similar contrast, used to stand in for a
    /// missing one: FLAIR and T2 pair up, as do T1 and T1c.
    pub fn replacement(self) -> Self {
        match self {
            ModalityId::T2 => ModalityId::Flair,
            ModalityId::Flair => ModalityId::T2,
            ModalityId::T1 => ModalityId::T1c,
            ModalityId::T1c => ModalityId::T1,
        }
    }

    /// The three modalities other than `self`, in condition-index order.
    pub fn others(self) -> [ModalityId; 3] {
        let mut out = [ModalityId::T2; 3];
        let mut k = 0;
        for m in Self::ALL {
            if m != self {
                out[k] = m;
                k += 1;
            }
        }
        out
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2" => Ok(ModalityId::T2),
            "t1c" | "t1ce" => Ok(ModalityId::T1c),
            "flair" => Ok(ModalityId::Flair),
            "t1" => Ok(ModalityId::T1),
            _ => Err(Error::UnknownModality(s.to_string())),
        }
    }
}

pub type Shape3 = [usize; 3];

fn voxel_count(shape: Shape3) -> usize {
    shape.iter().product()
}

fn check_shape(shape: Shape3) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("{shape:?} has a zero extent")));
    }
    Ok(())
}

/// Scalar 3D field stored row-major in `(D, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!("{shape:?} needs {} voxels, got {}", voxel_count(shape), data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; voxel_count(shape)])
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for d in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[(d * self.shape[1] + h) * self.shape[2] + w]
    }

    /// Mean and (population) variance, accumulated in f64.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }
}

/// Tumor sub-region classes. Ids are contiguous; [`remap_brats_label`]
/// converts the `{0, 1, 2, 4}` convention used by BraTS releases.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const NECROTIC: u8 = 1;
    pub const EDEMA: u8 = 2;
    pub const ENHANCING: u8 = 3;
    pub const COUNT: usize = 4;
}

/// Map a BraTS label id (`0, 1, 2, 4`) to this crate's contiguous ids.
pub fn remap_brats_label(id: u8) -> Option<u8> {
    match id {
        0 => Some(class::BACKGROUND),
        1 => Some(class::NECROTIC),
        2 => Some(class::EDEMA),
        4 => Some(class::ENHANCING),
        _ => None,
    }
}

/// Nested evaluation regions built as unions of classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    WholeTumor,
    TumorCore,
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::Enhancing];

    pub fn contains(self, class_id: u8) -> bool {
        match self {
            Region::WholeTumor => matches!(class_id, class::NECROTIC | class::EDEMA | class::ENHANCING),
            Region::TumorCore => matches!(class_id, class::NECROTIC | class::ENHANCING),
            Region::Enhancing => class_id == class::ENHANCING,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::Enhancing => "ET",
        }
    }
}

/// Binary volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Shape3,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Shape3, data: Vec<bool>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!("mask {shape:?} with {} voxels", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.data[(d * self.shape[1] + h) * self.shape[2] + w]
    }
}

/// Voxelwise class ids in `0..4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!("labels {shape:?} with {} voxels", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= class::COUNT) {
            return Err(Error::Label(bad));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn region(&self, region: Region) -> Mask {
        Mask { shape: self.shape, data: self.data.iter().map(|&c| region.contains(c)).collect() }
    }

    /// Fraction of voxels belonging to the whole tumor.
    pub fn tumor_fraction(&self) -> f64 {
        self.region(Region::WholeTumor).count() as f64 / self.data.len() as f64
    }
}

/// Co-registered modalities of one subject plus the reference labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    modalities: BTreeMap<ModalityId, Volume>,
    labels: LabelVolume,
}

impl Case {
    pub fn new(case_id: impl Into<String>, modalities: BTreeMap<ModalityId, Volume>, labels: LabelVolume) -> Result<Self> {
        if modalities.is_empty() || modalities.len() > 4 {
            return Err(Error::Modalities(format!("a case holds 1-4 modalities, got {}", modalities.len())));
        }
        for (m, v) in &modalities {
            if v.shape() != labels.shape() {
                return Err(Error::Shape(format!("{m} is {:?} but labels are {:?}", v.shape(), labels.shape())));
            }
        }
        Ok(Self { case_id: case_id.into(), modalities, labels })
    }

    pub fn shape(&self) -> Shape3 {
        self.labels.shape()
    }

    pub fn modalities(&self) -> &BTreeMap<ModalityId, Volume> {
        &self.modalities
    }

    pub fn modality(&self, m: ModalityId) -> Option<&Volume> {
        self.modalities.get(&m)
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    /// Applies `f` to every modality volume, keeping the labels.
    pub fn map_volumes(&self, mut f: impl FnMut(&Volume) -> Result<Volume>) -> Result<Self> {
        let modalities = self.modalities.iter().map(|(&m, v)| Ok((m, f(v)?))).collect::<Result<_>>()?;
        Self::new(self.case_id.clone(), modalities, self.labels.clone())
    }
}

/// Zero-mean, unit-variance rescaling over all voxels. Constant volumes map
/// to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (mean, var) = v.moments();
    let data = if var <= f64::EPSILON * mean.abs().max(1.0) {
        vec![0.0; v.len()]
    } else {
        let inv = 1.0 / var.sqrt();
        v.data.iter().map(|&x| ((x as f64 - mean) * inv) as f32).collect()
    };
    Volume { shape: v.shape, data }
}

/// Placeholder for bias-field correction. Real-data pipelines replace this
/// with an external corrector; synthetic data needs none.
pub fn bias_correct(v: &Volume) -> Volume {
    v.clone()
}

/// Center-crop to the largest box with the target's aspect ratio, then
/// resample trilinearly to `target`.
///
/// Output voxel `i` samples source coordinate `start + (i + 0.5) * scale - 0.5`
/// along each axis, with `scale = min(src / target)` over axes and the crop
/// centered; coordinates are clamped to the volume.
pub fn crop_resize(v: &Volume, target: Shape3) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::InvalidArgument(format!("target shape {target:?} must be positive")));
    }
    let src = v.shape();
    if src == target {
        return Ok(v.clone());
    }
    let scale = (0..3).map(|a| src[a] as f64 / target[a] as f64).fold(f64::INFINITY, f64::min);
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        let start = (src[a] as f64 - target[a] as f64 * scale) / 2.0;
        (0..target[a])
            .map(|i| {
                let c = (start + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src[a] - 1) as f64);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(src[a] - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let (ad, ah, aw) = (axis(0), axis(1), axis(2));
    let mut data = Vec::with_capacity(voxel_count(target));
    for &(d0, d1, fd) in &ad {
        for &(h0, h1, fh) in &ah {
            for &(w0, w1, fw) in &aw {
                let at = |d: usize, h: usize, w: usize| v.get(d, h, w) as f64;
                let c00 = at(d0, h0, w0) * (1.0 - fw) + at(d0, h0, w1) * fw;
                let c01 = at(d0, h1, w0) * (1.0 - fw) + at(d0, h1, w1) * fw;
                let c10 = at(d1, h0, w0) * (1.0 - fw) + at(d1, h0, w1) * fw;
                let c11 = at(d1, h1, w0) * (1.0 - fw) + at(d1, h1, w1) * fw;
                let c0 = c00 * (1.0 - fh) + c01 * fh;
                let c1 = c10 * (1.0 - fh) + c11 * fh;
                data.push((c0 * (1.0 - fd) + c1 * fd) as f32);
            }
        }
    }
    Volume::new(target, data)
}

/// Standard per-modality preprocessing: bias hook, optional resize, then
/// intensity normalization.
pub fn preprocess(case: &Case, target: Option<Shape3>) -> Result<Case> {
    case.map_volumes(|v| {
        let v = bias_correct(v);
        let v = match target {
            Some(t) => crop_resize(&v, t)?,
            None => v,
        };
        Ok(normalize_intensity(&v))
    })
}
