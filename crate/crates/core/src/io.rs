//! On-disk case format.
//!
//! A case is a directory. Each volume is a pair of files:
//!
//! * `<token>.hdr`: UTF-8 `key: value` lines, `shape: D H W`, `dtype: f32le`
//!   and `modality: <t2|t1c|flair|t1|labels>`;
//! * `<token>.raw`: `D*H*W` little-endian `f32` values in row-major
//!   `(D, H, W)` order.
//!
//! Labels are stored as float-encoded integer class ids. The case id is the
//! directory name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{Case, LabelVolume, ModalityId, Shape3, Volume};

const LABELS_TOKEN: &str = "labels";
const DTYPE: &str = "f32le";

/// Where a volume's data comes from. The native reader handles the format
/// above; other neuroimaging formats can be plugged in by implementing this
/// trait and calling [`read_case_with`].
pub trait VolumeSource {
    /// Returns `(shape, voxels)` for the named volume inside `dir`, or
    /// `None` if the volume is absent.
    fn read(&self, dir: &Path, token: &str) -> Result<Option<(Shape3, Vec<f32>)>>;
}

/// Reader for the native header + raw pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct NativeFormat;

struct Header {
    shape: Shape3,
    token: String,
}

fn header_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Header { path: path.to_path_buf(), reason: reason.into() }
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut shape = None;
    let mut token = None;
    let mut dtype = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once(':').ok_or_else(|| header_error(path, format!("no ':' in `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "shape" => {
                let dims: Vec<usize> = value
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|_| header_error(path, format!("bad extent `{s}`"))))
                    .collect::<Result<_>>()?;
                let dims: Shape3 =
                    dims.try_into().map_err(|_| header_error(path, "shape needs three extents"))?;
                shape = Some(dims);
            }
            "dtype" => dtype = Some(value.to_string()),
            "modality" => token = Some(value.to_string()),
            other => return Err(header_error(path, format!("unknown key `{other}`"))),
        }
    }
    match dtype.as_deref() {
        Some(DTYPE) => {}
        Some(other) => return Err(header_error(path, format!("unsupported dtype `{other}`"))),
        None => return Err(header_error(path, "missing dtype")),
    }
    Ok(Header {
        shape: shape.ok_or_else(|| header_error(path, "missing shape"))?,
        token: token.ok_or_else(|| header_error(path, "missing modality"))?,
    })
}

fn paths(dir: &Path, token: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{token}.hdr")), dir.join(format!("{token}.raw")))
}

impl VolumeSource for NativeFormat {
    fn read(&self, dir: &Path, token: &str) -> Result<Option<(Shape3, Vec<f32>)>> {
        let (hdr_path, raw_path) = paths(dir, token);
        if !hdr_path.exists() {
            return Ok(None);
        }
        let header = parse_header(&hdr_path, &fs::read_to_string(&hdr_path)?)?;
        if header.token != token {
            return Err(header_error(&hdr_path, format!("declares modality `{}`", header.token)));
        }
        let bytes = fs::read(&raw_path)?;
        let expected: usize = header.shape.iter().product();
        if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
            return Err(Error::SizeMismatch { path: raw_path, expected, found: bytes.len() / 4 });
        }
        let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(raw_path.display().to_string()));
        }
        Ok(Some((header.shape, data)))
    }
}

/// Write one volume's header and payload.
pub fn write_volume(dir: &Path, token: &str, shape: Shape3, data: &[f32]) -> Result<()> {
    let (hdr_path, raw_path) = paths(dir, token);
    let header = format!("shape: {} {} {}\ndtype: {DTYPE}\nmodality: {token}\n", shape[0], shape[1], shape[2]);
    fs::write(hdr_path, header)?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(raw_path, bytes)?;
    Ok(())
}

/// Write `case` into `dir` (created if needed).
pub fn write_case(dir: &Path, case: &Case) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (m, v) in case.modalities() {
        write_volume(dir, m.token(), v.shape(), v.data())?;
    }
    let labels: Vec<f32> = case.labels().data().iter().map(|&c| c as f32).collect();
    write_volume(dir, LABELS_TOKEN, case.shape(), &labels)
}

pub fn read_case(dir: &Path) -> Result<Case> {
    read_case_with(dir, &NativeFormat)
}

/// Read a case through any [`VolumeSource`].
pub fn read_case_with(dir: &Path, source: &dyn VolumeSource) -> Result<Case> {
    reject_unknown_headers(dir)?;
    let mut modalities = BTreeMap::new();
    for m in ModalityId::ALL {
        if let Some((shape, data)) = source.read(dir, m.token())? {
            modalities.insert(m, Volume::new(shape, data)?);
        }
    }
    let (shape, raw) = source
        .read(dir, LABELS_TOKEN)?
        .ok_or_else(|| header_error(&dir.join("labels.hdr"), "missing label volume"))?;
    let mut ids = Vec::with_capacity(raw.len());
    for v in raw {
        if v < 0.0 || v.fract() != 0.0 || v > u8::MAX as f32 {
            return Err(Error::InvalidArgument(format!("label value {v} is not a class id")));
        }
        ids.push(v as u8);
    }
    let case_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Case::new(case_id, modalities, LabelVolume::new(shape, ids)?)
}

fn reject_unknown_headers(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "hdr") {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if stem != LABELS_TOKEN {
                stem.parse::<ModalityId>()?;
            }
        }
    }
    Ok(())
}

/// Name of the dataset manifest: one case id per line.
pub const MANIFEST: &str = "manifest.txt";

/// Write every case into its own subdirectory of `dir` plus the manifest.
pub fn write_dataset(dir: &Path, cases: &[Case]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for case in cases {
        write_case(&dir.join(&case.case_id), case)?;
        manifest.push_str(&case.case_id);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Read the cases listed in `dir`'s manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Case>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let ids: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if ids.is_empty() {
        return Err(header_error(&path, "manifest lists no cases"));
    }
    ids.iter().map(|id| read_case(&dir.join(id))).collect()
}
