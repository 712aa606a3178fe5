//! Restoration and landmark metrics.
//!
//! Restoration error is measured in CIELAB, optionally split into the shadow
//! and non-shadow regions of the occluder mask. Landmark error is the mean
//! point-to-point distance normalised by the outer-eye-corner distance and
//! reported in percent.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_bench::{DatasetManifestRecord, Factor, Severity};
use crate::imaging::{rgb_to_lab, Image, ScalarField};

pub const LANDMARK_COUNT: usize = 68;
/// 0-indexed outer eye corners in the 68-point iBUG layout.
pub const LEFT_EYE_OUTER: usize = 36;
pub const RIGHT_EYE_OUTER: usize = 45;

/// 68 facial landmarks in pixel coordinates, iBUG ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Landmarks(Vec<[f64; 2]>);

impl Landmarks {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::InvalidArgument(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite landmark coordinate".into()));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    /// Interleaved `[x0, y0, x1, y1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        Self::new(flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self(self.0.iter().map(|p| f(*p)).collect())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
            Err(e) => return Err(Error::io(path, e)),
        };
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<Vec<[f64; 2]>> for Landmarks {
    type Error = Error;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        Landmarks::new(v)
    }
}

impl From<Landmarks> for Vec<[f64; 2]> {
    fn from(l: Landmarks) -> Self {
        l.0
    }
}

/// How per-pixel LAB distances are reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Root of the mean squared LAB distance.
    #[default]
    Rms,
    /// Mean LAB distance, as reported under the name RMSE by much of the
    /// shadow-removal literature.
    MaeCompat,
}

fn lab_sq_distances(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::dims(a.dims(), b.dims()));
    }
    let (la, lb) = (rgb_to_lab(a), rgb_to_lab(b));
    Ok(la
        .pixels()
        .iter()
        .zip(lb.pixels())
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
        .collect())
}

fn reduce(sq: impl Iterator<Item = f64>, mode: MetricMode) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for d in sq {
        sum += match mode {
            MetricMode::Rms => d,
            MetricMode::MaeCompat => d.sqrt(),
        };
        n += 1;
    }
    (n > 0).then(|| match mode {
        MetricMode::Rms => (sum / n as f64).sqrt(),
        MetricMode::MaeCompat => sum / n as f64,
    })
}

/// LAB error between two images with an explicit reduction mode. A region
/// mask selects pixels at or above 0.5.
pub fn lab_error(a: &Image, b: &Image, region: Option<&ScalarField>, mode: MetricMode) -> Result<f64> {
    let sq = lab_sq_distances(a, b)?;
    match region {
        None => reduce(sq.into_iter(), mode),
        Some(mask) => {
            mask.ensure_dims(a.dims())?;
            reduce(
                sq.into_iter()
                    .zip(mask.data())
                    .filter(|(_, m)| **m >= 0.5)
                    .map(|(d, _)| d),
                mode,
            )
        }
    }
    .ok_or(Error::EmptyRegion)
}

/// Root-mean-square LAB distance.
pub fn rmse_lab(a: &Image, b: &Image, region: Option<&ScalarField>) -> Result<f64> {
    lab_error(a, b, region, MetricMode::Rms)
}

/// LAB error over the shadow, non-shadow and whole image. Empty regions are
/// `None` rather than zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub rmse_shadow: Option<f64>,
    pub rmse_non_shadow: Option<f64>,
    pub rmse_all: f64,
    pub n_shadow: usize,
    pub n_non_shadow: usize,
    pub n_all: usize,
}

pub fn region_report(clean: &Image, restored: &Image, shadow_mask: &ScalarField) -> Result<RegionReport> {
    region_report_with_mode(clean, restored, shadow_mask, MetricMode::Rms)
}

pub fn region_report_with_mode(
    clean: &Image,
    restored: &Image,
    shadow_mask: &ScalarField,
    mode: MetricMode,
) -> Result<RegionReport> {
    let sq = lab_sq_distances(clean, restored)?;
    shadow_mask.ensure_dims(clean.dims())?;
    let inside = |m: &f64| *m >= 0.5;
    let shadow = sq
        .iter()
        .zip(shadow_mask.data())
        .filter(|(_, m)| inside(m))
        .map(|(d, _)| *d);
    let non_shadow = sq
        .iter()
        .zip(shadow_mask.data())
        .filter(|(_, m)| !inside(m))
        .map(|(d, _)| *d);
    let n_shadow = shadow_mask.data().iter().filter(|m| inside(m)).count();
    Ok(RegionReport {
        rmse_shadow: reduce(shadow, mode),
        rmse_non_shadow: reduce(non_shadow, mode),
        rmse_all: reduce(sq.iter().copied(), mode).ok_or(Error::EmptyRegion)?,
        n_shadow,
        n_non_shadow: sq.len() - n_shadow,
        n_all: sq.len(),
    })
}

/// Normalised mean error in percent of the outer inter-ocular distance.
pub fn nme(pred: &Landmarks, gt: &Landmarks) -> Result<f64> {
    let [lx, ly] = gt.0[LEFT_EYE_OUTER];
    let [rx, ry] = gt.0[RIGHT_EYE_OUTER];
    let iod = (lx - rx).hypot(ly - ry);
    if iod.is_nan() || iod <= 0.0 {
        return Err(Error::DegenerateNormalizer);
    }
    let total: f64 = pred
        .0
        .iter()
        .zip(&gt.0)
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    Ok(100.0 * total / LANDMARK_COUNT as f64 / iod)
}

/// Relative improvement of `value` over `base` in percent.
pub fn relative_gain(base: f64, value: f64) -> f64 {
    100.0 * (base - value) / base
}

/// Metrics of one evaluated record. Absent entries were not measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub rmse_shadow: Option<f64>,
    pub rmse_non_shadow: Option<f64>,
    pub rmse_all: Option<f64>,
    pub nme: Option<f64>,
}

/// Group identity: a (factor, severity) pair or the overall group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub factor: Option<Factor>,
    pub severity: Option<Severity>,
}

impl GroupKey {
    pub const OVERALL: GroupKey = GroupKey {
        factor: None,
        severity: None,
    };

    pub fn label(&self) -> String {
        match (self.factor, self.severity) {
            (Some(f), Some(s)) => format!("{}/{}", f.name(), s),
            _ => "overall".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub count: usize,
    pub rmse_shadow: Option<f64>,
    pub rmse_non_shadow: Option<f64>,
    pub rmse_all: Option<f64>,
    pub nme: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub groups: Vec<GroupSummary>,
    /// Output images of records without metrics.
    pub missing: Vec<String>,
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Means per (factor, severity) and overall.
pub fn aggregate_report(records: &[DatasetManifestRecord], metrics: &[Option<ItemMetrics>]) -> Result<SummaryTable> {
    if records.len() != metrics.len() {
        return Err(Error::InvalidArgument(format!(
            "{} records but {} metric entries",
            records.len(),
            metrics.len()
        )));
    }
    let mut buckets: BTreeMap<GroupKey, Vec<ItemMetrics>> = BTreeMap::new();
    let mut missing = Vec::new();
    for (rec, m) in records.iter().zip(metrics) {
        let Some(m) = m else {
            missing.push(rec.output_image.clone());
            continue;
        };
        buckets.entry(GroupKey::OVERALL).or_default().push(*m);
        for f in Factor::ALL {
            let key = GroupKey {
                factor: Some(f),
                severity: Some(rec.factor_spec.severity(f)),
            };
            buckets.entry(key).or_default().push(*m);
        }
    }
    missing.sort();
    let groups = buckets
        .into_iter()
        .map(|(key, items)| {
            let col = |f: fn(&ItemMetrics) -> Option<f64>| stable_mean(items.iter().filter_map(f).collect());
            GroupSummary {
                key,
                count: items.len(),
                rmse_shadow: col(|m| m.rmse_shadow),
                rmse_non_shadow: col(|m| m.rmse_non_shadow),
                rmse_all: col(|m| m.rmse_all),
                nme: col(|m| m.nme),
            }
        })
        .collect();
    Ok(SummaryTable { groups, missing })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl SummaryTable {
    pub fn group(&self, key: GroupKey) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.key == key)
    }

    /// Aligned-column text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>12} {:>12} {:>12} {:>10}",
            "group", "count", "rmse_shadow", "rmse_nonshd", "rmse_all", "nme"
        );
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>12} {:>12} {:>12} {:>10}",
                g.key.label(),
                g.count,
                fmt_opt(g.rmse_shadow),
                fmt_opt(g.rmse_non_shadow),
                fmt_opt(g.rmse_all),
                fmt_opt(g.nme)
            );
        }
        if !self.missing.is_empty() {
            let _ = writeln!(out, "missing metrics for {} record(s)", self.missing.len());
        }
        out
    }
}

/// Which summary column a comparison reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    RmseShadow,
    RmseNonShadow,
    RmseAll,
    Nme,
}

impl Column {
    pub const ALL: [Column; 4] = [Column::RmseShadow, Column::RmseNonShadow, Column::RmseAll, Column::Nme];

    pub fn name(self) -> &'static str {
        match self {
            Column::RmseShadow => "rmse_shadow",
            Column::RmseNonShadow => "rmse_non_shadow",
            Column::RmseAll => "rmse_all",
            Column::Nme => "nme",
        }
    }

    fn read(self, g: &GroupSummary) -> Option<f64> {
        match self {
            Column::RmseShadow => g.rmse_shadow,
            Column::RmseNonShadow => g.rmse_non_shadow,
            Column::RmseAll => g.rmse_all,
            Column::Nme => g.nme,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub value: Option<f64>,
    /// Relative gain over the baseline in percent; absent for the baseline itself.
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub group: String,
    pub column: Column,
    pub cells: Vec<ComparisonCell>,
}

/// Side-by-side comparison of several summaries against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// Baseline first, then candidates sorted by label.
    pub labels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Differences in record sets between inputs.
    pub warnings: Vec<String>,
}

/// Builds a comparison table. Column order is independent of input order.
pub fn compare_summaries(inputs: &[(String, SummaryTable)], baseline: &str) -> Result<ComparisonTable> {
    let base = inputs
        .iter()
        .find(|(l, _)| l == baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline {baseline} not among inputs")))?;
    let mut others: Vec<&(String, SummaryTable)> = inputs.iter().filter(|(l, _)| l != baseline).collect();
    others.sort_by(|a, b| a.0.cmp(&b.0));
    let ordered: Vec<&(String, SummaryTable)> = std::iter::once(base).chain(others).collect();

    let mut warnings = Vec::new();
    for (label, table) in &ordered[1..] {
        let counts = |t: &SummaryTable| t.group(GroupKey::OVERALL).map(|g| g.count);
        if counts(table) != counts(&base.1) || table.missing != base.1.missing {
            warnings.push(format!("record set of {label} differs from baseline {baseline}"));
        }
    }

    let mut keys: Vec<GroupKey> = ordered
        .iter()
        .flat_map(|(_, t)| t.groups.iter().map(|g| g.key))
        .collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::new();
    for key in keys {
        for column in Column::ALL {
            let values: Vec<Option<f64>> = ordered
                .iter()
                .map(|(_, t)| t.group(key).and_then(|g| column.read(g)))
                .collect();
            if values.iter().all(Option::is_none) {
                continue;
            }
            let base_value = values[0];
            let cells = values
                .iter()
                .enumerate()
                .map(|(i, v)| ComparisonCell {
                    value: *v,
                    gain: match (i, base_value, v) {
                        (0, _, _) => None,
                        (_, Some(b), Some(v)) if b != 0.0 => Some(relative_gain(b, *v)),
                        _ => None,
                    },
                })
                .collect();
            rows.push(ComparisonRow {
                group: key.label(),
                column,
                cells,
            });
        }
    }
    Ok(ComparisonTable {
        labels: ordered.iter().map(|(l, _)| l.clone()).collect(),
        rows,
        warnings,
    })
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<14} {:<16}", "group", "metric");
        for (i, l) in self.labels.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, " {:>12}", l);
            } else {
                let _ = write!(out, " {:>12} {:>9}", l, "gain%");
            }
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<14} {:<16}", row.group, row.column.name());
            for (i, c) in row.cells.iter().enumerate() {
                let _ = write!(out, " {:>12}", fmt_opt(c.value));
                if i > 0 {
                    let gain = c.gain.map_or_else(|| "-".into(), |g| format!("{g:.1}"));
                    let _ = write!(out, " {:>9}", gain);
                }
            }
            out.push('\n');
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_bench::FactorSpec;
    use crate::imaging::FieldRole;

    fn lm(offset: f64) -> Landmarks {
        Landmarks::new(
            (0..68)
                .map(|i| [i as f64 * 1.5 + offset, (i % 7) as f64 * 2.0])
                .collect(),
        )
        .unwrap()
    }

    fn record(name: &str, sev: [u8; 4]) -> DatasetManifestRecord {
        let s = sev.map(|v| Severity::new(v).unwrap());
        DatasetManifestRecord {
            source_image: "a.png".into(),
            output_image: name.into(),
            factor_spec: FactorSpec {
                intensity_severity: s[0],
                size_severity: s[1],
                shape_severity: s[2],
                location_severity: s[3],
                rng_seed: 0,
            },
            alpha: 0.5,
            mask_id: "disk".into(),
            area_fraction: 0.5,
            centroid: (0.0, 0.0),
            complexity: 0.0,
            clip_fraction: 0.0,
            mask_image: None,
            attack: false,
            attack_result: None,
        }
    }

    #[test]
    fn rmse_basics() {
        let a = Image::filled(2, 2, [0.3, 0.6, 0.1]).unwrap();
        assert_eq!(rmse_lab(&a, &a, None).unwrap(), 0.0);
        let black = Image::filled(1, 1, [0.0; 3]).unwrap();
        let white = Image::filled(1, 1, [1.0; 3]).unwrap();
        assert!((rmse_lab(&black, &white, None).unwrap() - 100.0).abs() < 0.05);
        let other = Image::filled(2, 3, [0.0; 3]).unwrap();
        assert!(matches!(
            rmse_lab(&a, &other, None),
            Err(Error::DimensionMismatch { .. })
        ));
        let empty = ScalarField::filled(2, 2, FieldRole::Mask, 0.0).unwrap();
        assert!(matches!(rmse_lab(&a, &a, Some(&empty)), Err(Error::EmptyRegion)));
    }

    #[test]
    fn half_changed_gives_d_over_sqrt2() {
        let a = Image::from_fn(1, 2, |_, _| [0.2, 0.4, 0.6]).unwrap();
        let b = Image::from_fn(1, 2, |_, x| if x == 0 { [0.2, 0.4, 0.6] } else { [0.7, 0.1, 0.3] }).unwrap();
        let pa = crate::imaging::srgb_pixel_to_lab([0.2, 0.4, 0.6]);
        let pb = crate::imaging::srgb_pixel_to_lab([0.7, 0.1, 0.3]);
        let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
        assert!((rmse_lab(&a, &b, None).unwrap() - d / 2f64.sqrt()).abs() < 1e-9);
        assert!((lab_error(&a, &b, None, MetricMode::MaeCompat).unwrap() - d / 2.0).abs() < 1e-9);
    }

    #[test]
    fn region_report_fixture() {
        let clean = Image::filled(2, 2, [0.5; 3]).unwrap();
        let restored = Image::from_fn(2, 2, |y, x| if (y, x) == (0, 0) { [0.0; 3] } else { [0.5; 3] }).unwrap();
        let mask = ScalarField::from_fn(2, 2, FieldRole::Mask, |y, _| if y == 0 { 1.0 } else { 0.0 }).unwrap();
        let r = region_report(&clean, &restored, &mask).unwrap();
        let d = crate::imaging::srgb_pixel_to_lab([0.5; 3])[0];
        assert!((r.rmse_shadow.unwrap() - d / 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(r.rmse_non_shadow, Some(0.0));
        assert!((r.rmse_all - d / 2.0).abs() < 1e-9);
        assert_eq!((r.n_shadow, r.n_non_shadow, r.n_all), (2, 2, 4));

        let same = region_report(&clean, &clean, &mask).unwrap();
        assert_eq!(
            (same.rmse_shadow, same.rmse_non_shadow, same.rmse_all),
            (Some(0.0), Some(0.0), 0.0)
        );

        let full = ScalarField::filled(2, 2, FieldRole::Mask, 1.0).unwrap();
        let r = region_report(&clean, &restored, &full).unwrap();
        assert_eq!(r.rmse_shadow, Some(r.rmse_all));
        assert_eq!(r.rmse_non_shadow, None);
    }

    #[test]
    fn nme_cases() {
        let gt = lm(0.0);
        assert_eq!(nme(&gt, &gt).unwrap(), 0.0);
        let iod = (gt.points()[36][0] - gt.points()[45][0]).hypot(gt.points()[36][1] - gt.points()[45][1]);
        let shifted = gt.map(|[x, y]| [x + 2.5, y]);
        assert!((nme(&shifted, &gt).unwrap() - 100.0 * 2.5 / iod).abs() < 1e-9);
        let scaled_pred = shifted.map(|[x, y]| [3.0 * x, 3.0 * y]);
        let scaled_gt = gt.map(|[x, y]| [3.0 * x, 3.0 * y]);
        assert!((nme(&scaled_pred, &scaled_gt).unwrap() - nme(&shifted, &gt).unwrap()).abs() < 1e-9);

        let degenerate = Landmarks::new(vec![[1.0, 1.0]; 68]).unwrap();
        assert!(matches!(nme(&gt, &degenerate), Err(Error::DegenerateNormalizer)));
        assert!(Landmarks::new(vec![[0.0, 0.0]; 5]).is_err());
        assert!(serde_json::from_str::<Landmarks>("[[1,2]]").is_err());
    }

    #[test]
    fn relative_gain_arithmetic() {
        assert!((relative_gain(5.17, 4.33) - 16.2).abs() < 0.1);
    }

    #[test]
    fn aggregate_groups() {
        let recs = vec![record("a", [1, 1, 1, 1]), record("b", [1, 2, 1, 1])];
        let m = |n| {
            Some(ItemMetrics {
                nme: Some(n),
                rmse_all: Some(n * 2.0),
                ..Default::default()
            })
        };
        let table = aggregate_report(&recs, &[m(4.0), m(6.0)]).unwrap();
        let overall = table.group(GroupKey::OVERALL).unwrap();
        assert_eq!(overall.nme, Some(5.0));
        assert_eq!(overall.count, 2);
        let size1 = table
            .group(GroupKey {
                factor: Some(Factor::Size),
                severity: Some(Severity::new(1).unwrap()),
            })
            .unwrap();
        assert_eq!(size1.nme, Some(4.0));
        assert_eq!(size1.rmse_all, Some(8.0));

        let single = aggregate_report(&recs[..1], &[m(4.0)]).unwrap();
        assert_eq!(single.group(GroupKey::OVERALL).unwrap().nme, Some(4.0));

        let with_missing = aggregate_report(&recs, &[m(4.0), None]).unwrap();
        assert_eq!(with_missing.missing, vec!["b".to_string()]);
    }

    #[test]
    fn comparison_gain_and_order() {
        let recs = vec![record("a", [1, 1, 1, 1])];
        let t = |n| {
            aggregate_report(
                &recs,
                &[Some(ItemMetrics {
                    nme: Some(n),
                    ..Default::default()
                })],
            )
            .unwrap()
        };
        let inputs = vec![("shadow".to_string(), t(5.17)), ("ours".to_string(), t(4.33))];
        let table = compare_summaries(&inputs, "shadow").unwrap();
        let row = table
            .rows
            .iter()
            .find(|r| r.group == "overall" && r.column == Column::Nme)
            .unwrap();
        assert!((row.cells[1].gain.unwrap() - 16.2).abs() < 0.1);
        let swapped: Vec<_> = inputs.iter().rev().cloned().collect();
        assert_eq!(compare_summaries(&swapped, "shadow").unwrap(), table);
        assert!(compare_summaries(&inputs, "nope").is_err());
    }
}
