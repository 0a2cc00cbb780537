//! Completion quality metrics: Chamfer distance, F-score, density-aware
//! Chamfer distance and the split Chamfer distance that scores the observed
//! and unobserved parts of a shape separately.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::spatial::SpatialIndex;

pub const DEFAULT_FSCORE_TAU: f64 = 0.01;
pub const DEFAULT_DCD_TEMP: f64 = 1000.0;
pub const DEFAULT_SCD_RADIUS: f64 = 0.01;

/// Normalization of the two Chamfer sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChamferMode {
    /// Each directional sum divided by its cloud size.
    #[default]
    Mean,
    /// Plain sums.
    Sum,
}

fn nonempty(c: &PointCloud) -> Result<()> {
    if c.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(())
    }
}

/// Nearest neighbour of every point of `from` inside `to`.
fn nn(from: &PointCloud, to: &SpatialIndex) -> Vec<(usize, f64)> {
    from.iter()
        .map(|&p| to.nearest(p).expect("index checked non-empty"))
        .collect()
}

fn directional(nn: &[(usize, f64)], mode: ChamferMode) -> f64 {
    let sum: f64 = nn.iter().map(|&(_, d)| d).sum();
    match mode {
        ChamferMode::Mean => sum / nn.len() as f64,
        ChamferMode::Sum => sum,
    }
}

/// Mean-normalized squared Chamfer distance.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_with(a, b, ChamferMode::Mean)
}

pub fn chamfer_with(a: &PointCloud, b: &PointCloud, mode: ChamferMode) -> Result<f64> {
    nonempty(a)?;
    nonempty(b)?;
    let (ia, ib) = (SpatialIndex::build(a), SpatialIndex::build(b));
    Ok(directional(&nn(a, &ib), mode) + directional(&nn(b, &ia), mode))
}

/// Chamfer distance against a prebuilt index of the second cloud.
pub fn chamfer_indexed(a: &PointCloud, b: &SpatialIndex) -> Result<f64> {
    nonempty(a)?;
    nonempty(b.source())?;
    let ia = SpatialIndex::build(a);
    Ok(directional(&nn(a, b), ChamferMode::Mean)
        + directional(&nn(b.source(), &ia), ChamferMode::Mean))
}

fn fscore_from(a_to_b: &[(usize, f64)], b_to_a: &[(usize, f64)], tau: f64) -> f64 {
    let t2 = tau * tau;
    let frac = |v: &[(usize, f64)]| v.iter().filter(|&&(_, d)| d <= t2).count() as f64 / v.len() as f64;
    let (p, r) = (frac(a_to_b), frac(b_to_a));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Harmonic mean of precision (result points within `tau` of the ground
/// truth) and recall (ground-truth points within `tau` of the result).
pub fn fscore(result: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    nonempty(result)?;
    nonempty(gt)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let (ir, ig) = (SpatialIndex::build(result), SpatialIndex::build(gt));
    Ok(fscore_from(&nn(result, &ig), &nn(gt, &ir), tau))
}

fn dcd_term(nn: &[(usize, f64)], target_len: usize, temp: f64) -> f64 {
    let mut hits = vec![0usize; target_len];
    for &(j, _) in nn {
        hits[j] += 1;
    }
    let sum: f64 = nn
        .iter()
        .map(|&(j, d)| 1.0 - (-temp * d).exp() / hits[j] as f64)
        .sum();
    sum / nn.len() as f64
}

/// Density-aware Chamfer distance in `[0, 1]`.
///
/// Each point contributes `1 - exp(-temp * d^2) / n`, where `n` counts how
/// many points of its own cloud picked the same nearest neighbour.
pub fn dcd(a: &PointCloud, b: &PointCloud, temp: f64) -> Result<f64> {
    nonempty(a)?;
    nonempty(b)?;
    if !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!("temp must be positive, got {temp}")));
    }
    let (ia, ib) = (SpatialIndex::build(a), SpatialIndex::build(b));
    Ok(0.5 * (dcd_term(&nn(a, &ib), b.len(), temp) + dcd_term(&nn(b, &ia), a.len(), temp)))
}

/// Partition of the ground truth and of a result into observed (`1`) and
/// unobserved (`2`) parts.
#[derive(Debug, Clone)]
pub struct ScdSplit {
    pub gt1: PointCloud,
    pub gt2: PointCloud,
    pub result1: PointCloud,
    pub result2: PointCloud,
    pub gt1_ids: Vec<usize>,
    pub gt2_ids: Vec<usize>,
    pub result1_ids: Vec<usize>,
    pub result2_ids: Vec<usize>,
    pub radius: f64,
}

/// Ground-truth points within `radius` of the partial scan form `gt1`, the
/// rest `gt2`. A result point goes to `result1` when its nearest point in
/// `partial ∪ gt2` belongs to the partial scan (ties included).
pub fn scd_split(
    result: &PointCloud,
    gt: &PointCloud,
    partial: &PointCloud,
    radius: f64,
) -> Result<ScdSplit> {
    nonempty(partial)?;
    nonempty(gt)?;
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let partial_index = SpatialIndex::build(partial);
    let (gt1_ids, gt2_ids): (Vec<usize>, Vec<usize>) =
        (0..gt.len()).partition(|&i| partial_index.any_within_radius(gt[i], radius));
    let gt2 = gt.select(&gt2_ids);
    let gt2_index = SpatialIndex::build(&gt2);
    let (result1_ids, result2_ids): (Vec<usize>, Vec<usize>) = (0..result.len()).partition(|&i| {
        let q = result[i];
        let (_, dp) = partial_index.nearest(q).expect("partial non-empty");
        match gt2_index.nearest(q) {
            Ok((_, dg)) => dp <= dg,
            Err(_) => true,
        }
    });
    Ok(ScdSplit {
        gt1: gt.select(&gt1_ids),
        gt2,
        result1: result.select(&result1_ids),
        result2: result.select(&result2_ids),
        gt1_ids,
        gt2_ids,
        result1_ids,
        result2_ids,
        radius,
    })
}

/// Split Chamfer values; a side with an empty part reports 0 and sets its flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScdValues {
    pub scd1: f64,
    pub scd2: f64,
    pub scd1_empty: bool,
    pub scd2_empty: bool,
}

pub fn scd(split: &ScdSplit) -> ScdValues {
    let side = |r: &PointCloud, g: &PointCloud| match chamfer(r, g) {
        Ok(v) => (v, false),
        Err(_) => (0.0, true),
    };
    let (scd1, scd1_empty) = side(&split.result1, &split.gt1);
    let (scd2, scd2_empty) = side(&split.result2, &split.gt2);
    ScdValues {
        scd1,
        scd2,
        scd1_empty,
        scd2_empty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tau: f64,
    pub temp: f64,
    pub radius: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_FSCORE_TAU,
            temp: DEFAULT_DCD_TEMP,
            radius: DEFAULT_SCD_RADIUS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointCounts {
    pub result: usize,
    pub gt: usize,
    pub gt1: usize,
    pub gt2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd: f64,
    pub fscore: f64,
    pub dcd: f64,
    pub scd1: f64,
    pub scd2: f64,
    pub scd1_empty: bool,
    pub scd2_empty: bool,
    pub counts: PointCounts,
}

/// Full metric suite for one completed sample.
pub fn evaluate(
    result: &PointCloud,
    gt: &PointCloud,
    partial: &PointCloud,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    nonempty(result)?;
    nonempty(gt)?;
    let (ir, ig) = (SpatialIndex::build(result), SpatialIndex::build(gt));
    let r_to_g = nn(result, &ig);
    let g_to_r = nn(gt, &ir);
    let cd = directional(&r_to_g, ChamferMode::Mean) + directional(&g_to_r, ChamferMode::Mean);
    let f = fscore_from(&r_to_g, &g_to_r, opts.tau);
    let d = 0.5
        * (dcd_term(&r_to_g, gt.len(), opts.temp) + dcd_term(&g_to_r, result.len(), opts.temp));
    let split = scd_split(result, gt, partial, opts.radius)?;
    let s = scd(&split);
    Ok(MetricsReport {
        cd,
        fscore: f,
        dcd: d,
        scd1: s.scd1,
        scd2: s.scd2,
        scd1_empty: s.scd1_empty,
        scd2_empty: s.scd2_empty,
        counts: PointCounts {
            result: result.len(),
            gt: gt.len(),
            gt1: split.gt1.len(),
            gt2: split.gt2.len(),
        },
    })
}

/// One line of the per-sample report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub category: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Means of every metric over a group of samples. SCD means skip samples
/// whose corresponding split side was empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub samples: usize,
    pub cd: f64,
    pub fscore: f64,
    pub dcd: f64,
    pub scd1: f64,
    pub scd2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_category: BTreeMap<String, MeanRow>,
    pub overall: MeanRow,
}

fn mean_row<'a>(reports: impl Iterator<Item = &'a MetricsReport> + Clone) -> MeanRow {
    let n = reports.clone().count();
    let mean = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let vals: Vec<f64> = reports.clone().filter_map(f).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    MeanRow {
        samples: n,
        cd: mean(&|r| Some(r.cd)),
        fscore: mean(&|r| Some(r.fscore)),
        dcd: mean(&|r| Some(r.dcd)),
        scd1: mean(&|r| (!r.scd1_empty).then_some(r.scd1)),
        scd2: mean(&|r| (!r.scd2_empty).then_some(r.scd2)),
    }
}

pub fn aggregate(reports: &[SampleReport]) -> AggregateReport {
    let mut categories: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        categories.entry(&r.category).or_default().push(&r.metrics);
    }
    AggregateReport {
        per_category: categories
            .into_iter()
            .map(|(c, rs)| (c.to_string(), mean_row(rs.into_iter())))
            .collect(),
        overall: mean_row(reports.iter().map(|r| &r.metrics)),
    }
}

impl AggregateReport {
    /// Plain-text table; CD and SCD columns are scaled by 1e4.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>7} {:>9} {:>8} {:>7} {:>9} {:>9}\n",
            "category", "samples", "CD", "F-Score", "DCD", "SCD1", "SCD2"
        );
        let mut line = |name: &str, r: &MeanRow| {
            out.push_str(&format!(
                "{:<12} {:>7} {:>9.3} {:>8.3} {:>7.3} {:>9.3} {:>9.3}\n",
                name,
                r.samples,
                r.cd * 1e4,
                r.fscore,
                r.dcd,
                r.scd1 * 1e4,
                r.scd2 * 1e4
            ));
        };
        for (c, r) in &self.per_category {
            line(c, r);
        }
        line("overall", &self.overall);
        out
    }
}
