//! PNG renderings: label overlays on axial slices and bottleneck feature
//! mosaics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use mmseg_tensor::Tensor;

use crate::error::{Error, Result};
use crate::volume::{class, LabelVolume, ModalityId, Volume};

/// Overlay color of every tumor class.
pub const LABEL_COLORS: [(u8, [u8; 3]); 3] = [
    (class::NECROTIC, [0, 0, 255]),
    (class::EDEMA, [255, 255, 0]),
    (class::ENHANCING, [255, 0, 0]),
];

pub fn label_color(class_id: u8) -> Option<[u8; 3]> {
    LABEL_COLORS.iter().find(|(c, _)| *c == class_id).map(|(_, rgb)| *rgb)
}

fn gray_levels(v: &Volume) -> Vec<u8> {
    let (lo, hi) = v.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(f32::EPSILON);
    v.data().iter().map(|&x| ((x - lo) / span * 255.0).round() as u8).collect()
}

/// Axial slice `z` of `background` in gray with tumor classes painted over,
/// each voxel drawn as a `scale x scale` block.
pub fn overlay_slice(background: &Volume, labels: &LabelVolume, z: usize, scale: u32) -> Result<RgbImage> {
    let [d, h, w] = background.shape();
    if labels.shape() != background.shape() {
        return Err(Error::Shape(format!("labels {:?} vs background {:?}", labels.shape(), background.shape())));
    }
    if z >= d || scale == 0 {
        return Err(Error::InvalidArgument(format!("slice {z} of depth {d} at scale {scale}")));
    }
    let gray = gray_levels(background);
    let s = scale as usize;
    Ok(RgbImage::from_fn((w * s) as u32, (h * s) as u32, |x, y| {
        let i = (z * h + y as usize / s) * w + x as usize / s;
        let g = gray[i];
        Rgb(label_color(labels.data()[i]).unwrap_or([g, g, g]))
    }))
}

/// Up to `count` distinct slices evenly spread over the depth range that
/// contains tumor (the whole volume if there is none).
pub fn default_slices(labels: &LabelVolume, count: usize) -> Vec<usize> {
    let [d, h, w] = labels.shape();
    let tumor: Vec<usize> = (0..d).filter(|&z| labels.data()[z * h * w..(z + 1) * h * w].iter().any(|&c| c != 0)).collect();
    let (lo, hi) = match (tumor.first(), tumor.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0, d - 1),
    };
    let mut out: Vec<usize> = (0..count)
        .map(|k| if count == 1 { (lo + hi) / 2 } else { lo + (hi - lo) * k / (count - 1) })
        .collect();
    out.dedup();
    out
}

/// Write one overlay per requested slice for the ground truth and for every
/// named prediction; returns the paths in slice-major order.
pub fn write_panels(
    dir: &Path,
    background: &Volume,
    truth: &LabelVolume,
    predictions: &[(String, LabelVolume)],
    slices: &[usize],
    scale: u32,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (k, &z) in slices.iter().enumerate() {
        let panels = std::iter::once(("ground_truth", truth)).chain(predictions.iter().map(|(n, l)| (n.as_str(), l)));
        for (name, labels) in panels {
            let path = dir.join(format!("s{k:02}_z{z:03}_{name}.png"));
            overlay_slice(background, labels, z, scale)?.save(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Middle axial slice of every channel of a `[.., C, d, h, w]` feature
/// tensor, each min-max scaled, tiled on a near-square grid with a one
/// pixel gutter.
pub fn feature_mosaic(features: &Tensor<f32>, scale: u32) -> Result<GrayImage> {
    let shape = features.shape();
    if shape.len() < 4 || scale == 0 {
        return Err(Error::Shape(format!("feature tensor {shape:?}")));
    }
    let [d, h, w] = [shape[shape.len() - 3], shape[shape.len() - 2], shape[shape.len() - 1]];
    let sp = d * h * w;
    let channels = features.numel() / sp;
    let cols = (channels as f64).sqrt().ceil() as usize;
    let rows = channels.div_ceil(cols);
    let s = scale as usize;
    let (tw, th) = (w * s + 1, h * s + 1);
    let mut img = GrayImage::new((cols * tw) as u32, (rows * th) as u32);
    let z = d / 2;
    for c in 0..channels {
        let plane = &features.data()[c * sp + z * h * w..][..h * w];
        let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let span = (hi - lo).max(f32::EPSILON);
        let (ox, oy) = ((c % cols) * tw, (c / cols) * th);
        for y in 0..h * s {
            for x in 0..w * s {
                let v = ((plane[(y / s) * w + x / s] - lo) / span * 255.0).round() as u8;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([v]));
            }
        }
    }
    Ok(img)
}

/// One mosaic per modality slot, named `<prefix>_<modality>.png`.
pub fn write_feature_mosaics(
    dir: &Path,
    prefix: &str,
    features: &BTreeMap<ModalityId, Tensor<f32>>,
    scale: u32,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (m, t) in features {
        let path = dir.join(format!("{prefix}_{}.png", m.token()));
        feature_mosaic(t, scale)?.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
