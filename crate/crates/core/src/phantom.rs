//! Synthetic multi-modal tumor phantoms.
//!
//! Each case holds nested ellipsoids (edema around an enhancing rim around
//! a necrotic core). Four tissue indicator maps are mixed linearly into four
//! modalities, so any modality is an exact affine function of the other
//! three when noise is off.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{class, Case, LabelVolume, ModalityId, Shape3, Volume};

/// Tissue order used by the mixing matrix columns.
pub const TISSUES: [&str; 4] = ["background", "edema", "necrotic", "enhancing"];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub n_cases: usize,
    pub seed: u64,
    /// Whole-tumor semi-axis range in voxels.
    pub tumor_radius_range: (f64, f64),
    /// Rows follow [`ModalityId::ALL`], columns follow [`TISSUES`].
    pub modality_mixing: [[f64; 4]; 4],
    pub offset: [f64; 4],
    pub noise_std: f64,
}

impl PhantomSpec {
    /// Default contrast table: edema bright on T2/FLAIR, the enhancing rim
    /// bright on T1c, T1 comparatively flat.
    pub fn new(shape: Shape3, n_cases: usize, seed: u64) -> Self {
        let min_extent = *shape.iter().min().unwrap_or(&1) as f64;
        Self {
            shape,
            n_cases,
            seed,
            tumor_radius_range: (min_extent / 5.0, min_extent / 3.0),
            modality_mixing: [
                [0.2, 2.0, 1.6, 1.2],
                [0.4, 1.6, 0.3, 1.9],
                [0.2, 2.2, 0.9, 1.5],
                [0.8, 0.2, 0.0, 0.5],
            ],
            offset: [0.0, 0.1, -0.1, 0.2],
            noise_std: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tumor_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!("tumor radius range ({lo}, {hi}) is empty")));
        }
        let min_extent = *self.shape.iter().min().unwrap_or(&0) as f64;
        if 2.0 * hi + 2.0 > min_extent {
            return Err(Error::InvalidArgument(format!("tumor radius {hi} does not fit in {:?}", self.shape)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument("noise_std must be a nonnegative number".into()));
        }
        let cond = condition_number_l1(&self.modality_mixing)
            .ok_or_else(|| Error::InvalidArgument("modality mixing matrix is singular".into()))?;
        if cond >= 1e6 {
            return Err(Error::InvalidArgument(format!("modality mixing is ill-conditioned (cond {cond:.3e})")));
        }
        Ok(())
    }
}

/// Inverse of a 4x4 matrix by Gauss-Jordan elimination with partial pivoting.
fn invert4(a: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut m = *a;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let pivot = (col..4).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for k in 0..4 {
            m[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..4 {
            if r != col {
                let f = m[r][col];
                for k in 0..4 {
                    m[r][k] -= f * m[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    Some(inv)
}

fn norm_l1(a: &[[f64; 4]; 4]) -> f64 {
    (0..4).map(|c| (0..4).map(|r| a[r][c].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `||A||_1 * ||A^-1||_1`, or `None` for a singular matrix.
pub fn condition_number_l1(a: &[[f64; 4]; 4]) -> Option<f64> {
    invert4(a).map(|inv| norm_l1(a) * norm_l1(&inv))
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn scaled(&self, s: f64) -> Self {
        Self { center: self.center, radii: self.radii.map(|r| r * s) }
    }
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Deterministic phantom number `index` of `spec`.
pub fn generate_case(spec: &PhantomSpec, index: usize) -> Result<Case> {
    spec.validate()?;
    if index >= spec.n_cases {
        return Err(Error::InvalidArgument(format!("case index {index} >= n_cases {}", spec.n_cases)));
    }
    let mut rng = case_rng(spec.seed, index);
    let (lo, hi) = spec.tumor_radius_range;
    let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi));
    let center: [f64; 3] = std::array::from_fn(|a| {
        let margin = radii[a] + 1.0;
        let upper = spec.shape[a] as f64 - 1.0 - margin;
        if upper > margin {
            rng.random_range(margin..upper)
        } else {
            (spec.shape[a] as f64 - 1.0) / 2.0
        }
    });
    let whole = Ellipsoid { center, radii };
    let core = whole.scaled(rng.random_range(0.55..0.75));
    let necrotic = core.scaled(rng.random_range(0.5..0.7));

    let n = spec.shape.iter().product::<usize>();
    let mut labels = Vec::with_capacity(n);
    for d in 0..spec.shape[0] {
        for h in 0..spec.shape[1] {
            for w in 0..spec.shape[2] {
                let p = [d as f64, h as f64, w as f64];
                labels.push(if necrotic.contains(p) {
                    class::NECROTIC
                } else if core.contains(p) {
                    class::ENHANCING
                } else if whole.contains(p) {
                    class::EDEMA
                } else {
                    class::BACKGROUND
                });
            }
        }
    }
    // tissue column for each class id
    let tissue_of = |c: u8| match c {
        class::BACKGROUND => 0,
        class::EDEMA => 1,
        class::NECROTIC => 2,
        _ => 3,
    };
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut modalities = BTreeMap::new();
    for (row, m) in ModalityId::ALL.into_iter().enumerate() {
        let mix = &spec.modality_mixing[row];
        let data = labels
            .iter()
            .map(|&c| {
                let clean = mix[tissue_of(c)] + spec.offset[row];
                let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (clean + eps) as f32
            })
            .collect();
        modalities.insert(m, Volume::new(spec.shape, data)?);
    }
    Case::new(format!("case_{index:04}"), modalities, LabelVolume::new(spec.shape, labels)?)
}

/// All cases of a spec, in index order.
pub fn generate_dataset(spec: &PhantomSpec) -> Result<Vec<Case>> {
    (0..spec.n_cases).map(|i| generate_case(spec, i)).collect()
}

/// Train / validation / test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

/// Shuffle with `seed`, keep `floor(n * train_frac)` items as the training
/// share and the rest as test, then carve `max(1, floor(0.1 * share))`
/// validation items out of the training share.
pub fn split_dataset<T: Clone>(items: &[T], train_frac: f64, seed: u64) -> Result<Split<T>> {
    split_dataset_with(items, train_frac, DEFAULT_VAL_FRACTION, seed)
}

pub fn split_dataset_with<T: Clone>(items: &[T], train_frac: f64, val_frac: f64, seed: u64) -> Result<Split<T>> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_frac} outside (0, 1)")));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::InvalidArgument(format!("validation fraction {val_frac} outside [0, 1)")));
    }
    let n = items.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 cases to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let share = ((n as f64 * train_frac + 1e-9).floor() as usize).clamp(2, n - 1);
    let val = ((share as f64 * val_frac + 1e-9).floor() as usize).max(1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..share - val]),
        val: pick(&order[share - val..share]),
        test: pick(&order[share..]),
    })
}
