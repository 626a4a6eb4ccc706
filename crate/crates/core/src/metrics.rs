//! Evaluation metrics on hard masks and the text report format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Mask, Region, Shape3};

/// Dice similarity coefficient `2|A n B| / (|A| + |B|)`; two empty masks
/// score 1.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    same_shape(a, b)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HausdorffMode {
    /// Maximum of the two directed distances.
    #[default]
    Max,
    /// 95th percentile of the pooled directed surface distances.
    Percentile95,
}

/// Length of the volume diagonal, returned when exactly one mask is empty.
pub fn diagonal(shape: Shape3) -> f64 {
    shape.iter().map(|&n| (n * n) as f64).sum::<f64>().sqrt()
}

/// Mask voxels with at least one 6-neighbour outside the mask (the volume
/// edge counts as outside).
pub fn boundary(m: &Mask) -> Mask {
    let [d, h, w] = m.shape();
    let data = m.data();
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !data[idx(z, y, x)] {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d
                    && y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && data[idx(z - 1, y, x)]
                    && data[idx(z + 1, y, x)]
                    && data[idx(z, y - 1, x)]
                    && data[idx(z, y + 1, x)]
                    && data[idx(z, y, x - 1)]
                    && data[idx(z, y, x + 1)];
                out[idx(z, y, x)] = !interior;
            }
        }
    }
    Mask::new(m.shape(), out).expect("same shape")
}

const FAR: f64 = 1e20;

/// One pass of the lower-envelope squared distance transform along a line.
/// Sites at `FAR` are ignored.
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: isize = -1;
    for q in 0..f.len() {
        if f[q] >= FAR {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            let ku = k as usize;
            v[ku] = q;
            z[ku] = s;
            z[ku + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q.abs_diff(v[k]) as f64;
        *o = f[v[k]] + d * d;
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest set
/// voxel of `m` (separable lower-envelope algorithm).
pub fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let [d, h, w] = m.shape();
    let mut g: Vec<f64> = m.data().iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let longest = d.max(h).max(w);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let mut pass = |g: &mut Vec<f64>, len: usize, stride: usize, starts: Vec<usize>| {
        for s in starts {
            for i in 0..len {
                f[i] = g[s + i * stride];
            }
            edt_line(&f[..len], &mut out[..len], &mut v, &mut z);
            for i in 0..len {
                g[s + i * stride] = out[i];
            }
        }
    };
    let along_w: Vec<usize> = (0..d * h).map(|r| r * w).collect();
    pass(&mut g, w, 1, along_w);
    let along_h: Vec<usize> = (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)).collect();
    pass(&mut g, h, w, along_h);
    let along_d: Vec<usize> = (0..h * w).collect();
    pass(&mut g, d, h * w, along_d);
    g
}

fn directed(from: &Mask, to_dt: &[f64]) -> Vec<f64> {
    from.data().iter().zip(to_dt).filter(|(b, _)| **b).map(|(_, &d2)| d2.sqrt()).collect()
}

/// Hausdorff distance between mask boundaries in voxel units.
pub fn hausdorff(a: &Mask, b: &Mask) -> Result<f64> {
    hausdorff_with(a, b, HausdorffMode::Max)
}

pub fn hausdorff_with(a: &Mask, b: &Mask, mode: HausdorffMode) -> Result<f64> {
    same_shape(a, b)?;
    match (a.count(), b.count()) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(diagonal(a.shape())),
        _ => {}
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let ab = directed(&ba, &squared_distance_transform(&bb));
    let ba_d = directed(&bb, &squared_distance_transform(&ba));
    Ok(match mode {
        HausdorffMode::Max => ab.iter().chain(&ba_d).copied().fold(0.0, f64::max),
        HausdorffMode::Percentile95 => {
            let mut all: Vec<f64> = ab.into_iter().chain(ba_d).collect();
            all.sort_by(f64::total_cmp);
            percentile(&all, 95.0)
        }
    })
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionScore {
    pub dsc: f64,
    pub hd: f64,
}

/// Scores for WT, TC and ET plus their average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub regions: [RegionScore; 3],
    pub avg: RegionScore,
}

impl RegionMetrics {
    pub fn get(&self, r: Region) -> RegionScore {
        self.regions[Region::ALL.iter().position(|&x| x == r).expect("known region")]
    }

    fn from_regions(regions: [RegionScore; 3]) -> Self {
        let avg = RegionScore {
            dsc: regions.iter().map(|s| s.dsc).sum::<f64>() / 3.0,
            hd: regions.iter().map(|s| s.hd).sum::<f64>() / 3.0,
        };
        Self { regions, avg }
    }

    /// Region-wise mean over several cases.
    pub fn mean(items: &[RegionMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("cannot average zero metric sets".into()));
        }
        let n = items.len() as f64;
        let regions = std::array::from_fn(|i| RegionScore {
            dsc: items.iter().map(|m| m.regions[i].dsc).sum::<f64>() / n,
            hd: items.iter().map(|m| m.regions[i].hd).sum::<f64>() / n,
        });
        Ok(Self::from_regions(regions))
    }
}

pub fn region_metrics(pred: &LabelVolume, truth: &LabelVolume) -> Result<RegionMetrics> {
    region_metrics_with(pred, truth, HausdorffMode::Max)
}

pub fn region_metrics_with(pred: &LabelVolume, truth: &LabelVolume, mode: HausdorffMode) -> Result<RegionMetrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    let mut regions = [RegionScore { dsc: 0.0, hd: 0.0 }; 3];
    for (slot, r) in regions.iter_mut().zip(Region::ALL) {
        let (p, t) = (pred.region(r), truth.region(r));
        *slot = RegionScore { dsc: dsc(&p, &t)?, hd: hausdorff_with(&p, &t, mode)? };
    }
    Ok(RegionMetrics::from_regions(regions))
}

/// Region column of a report: one of the three regions or their average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReportRegion {
    Region(Region),
    Avg,
}

impl ReportRegion {
    pub const ALL: [ReportRegion; 4] = [
        ReportRegion::Region(Region::WholeTumor),
        ReportRegion::Region(Region::TumorCore),
        ReportRegion::Region(Region::Enhancing),
        ReportRegion::Avg,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ReportRegion::Region(r) => r.label(),
            ReportRegion::Avg => "AVG",
        }
    }
}

impl FromStr for ReportRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReportRegion::ALL
            .into_iter()
            .find(|r| r.label() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown region `{s}`")))
    }
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub arm: String,
    pub missing: String,
    pub region: ReportRegion,
    pub dsc: f64,
    pub hd: f64,
}

pub const REPORT_HEADER: &str = "arm\tmissing_modality\tregion\tdsc\thd";

/// Rows for one (arm, missing) cell, WT/TC/ET then AVG.
pub fn report_rows(arm: &str, missing: &str, m: &RegionMetrics) -> Vec<ReportRow> {
    ReportRegion::ALL
        .into_iter()
        .map(|region| {
            let s = match region {
                ReportRegion::Region(r) => m.get(r),
                ReportRegion::Avg => m.avg,
            };
            ReportRow { arm: arm.into(), missing: missing.into(), region, dsc: s.dsc, hd: s.hd }
        })
        .collect()
}

/// Tab-separated report with a header line.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.6}\t{:.6}", r.arm, r.missing, r.region.label(), r.dsc, r.hd);
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == REPORT_HEADER => {}
        _ => return Err(Error::Config { line: 1, reason: "missing report header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: &str| Error::Config { line: i + 1, reason: reason.into() };
        let cols: Vec<&str> = line.split('\t').collect();
        let [arm, missing, region, d, h] = cols[..] else { return Err(bad("expected 5 columns")) };
        rows.push(ReportRow {
            arm: arm.into(),
            missing: missing.into(),
            region: region.parse()?,
            dsc: d.parse().map_err(|_| bad("bad dsc"))?,
            hd: h.parse().map_err(|_| bad("bad hd"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: Shape3, on: &[[usize; 3]]) -> Mask {
        let mut data = vec![false; shape.iter().product()];
        for p in on {
            data[(p[0] * shape[1] + p[1]) * shape[2] + p[2]] = true;
        }
        Mask::new(shape, data).unwrap()
    }

    #[test]
    fn three_four_five() {
        let a = mask([4, 4, 5], &[[0, 0, 0]]);
        let b = mask([4, 4, 5], &[[0, 3, 4]]);
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn empty_conventions() {
        let e = mask([3, 4, 12], &[]);
        let a = mask([3, 4, 12], &[[1, 1, 1]]);
        assert_eq!(hausdorff(&e, &e).unwrap(), 0.0);
        assert_eq!(hausdorff(&e, &a).unwrap(), 13.0);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&e, &a).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap() {
        let s = [2, 2, 4];
        let a = mask(s, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let b = mask(s, &[[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 0, 1]]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let all = Mask::new([3, 3, 3], vec![true; 27]).unwrap();
        let b = boundary(&all);
        assert_eq!(b.count(), 26);
        assert!(!b.get(1, 1, 1));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn report_round_trip() {
        let m = RegionMetrics::from_regions([
            RegionScore { dsc: 0.9, hd: 1.0 },
            RegionScore { dsc: 0.8, hd: 2.0 },
            RegionScore { dsc: 0.7, hd: 3.0 },
        ]);
        let rows = report_rows("Direct", "FLAIR", &m);
        let parsed = parse_report(&format_report(&rows)).unwrap();
        assert_eq!(parsed.len(), 4);
        assert_eq!(parsed[3].region, ReportRegion::Avg);
        assert!((parsed[3].dsc - 0.8).abs() < 1e-6);
        assert!((parsed[3].hd - 2.0).abs() < 1e-6);
    }
}
