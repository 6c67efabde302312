//! Trajectory records, their CSV form, and report bundles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::speat::{classify_bias, BiasLabel, EffectSizeReport};

/// Bias of one category at one trajectory point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBias {
    pub category: String,
    pub d: f64,
    pub label: BiasLabel,
    pub p_value: Option<f64>,
    pub d_per_layer: Vec<f64>,
}

impl From<&EffectSizeReport> for CategoryBias {
    fn from(r: &EffectSizeReport) -> Self {
        Self {
            category: r.category.clone(),
            d: r.d_aggregate,
            label: r.label,
            p_value: r.p_value,
            d_per_layer: r.d_per_layer.clone(),
        }
    }
}

/// One point of a trajectory: training step, x-axis value (step, remaining
/// heads or rows, sparsity, student depth), and the bias of every category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub series: String,
    pub step: u64,
    pub point: f64,
    pub sparsity: f64,
    pub loss: Option<f64>,
    pub nonzero_params: usize,
    pub biases: Vec<CategoryBias>,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::NonFinite(format!("{what} in {} record at step {}", self.series, self.step)));
        if !self.point.is_finite() || !self.sparsity.is_finite() {
            return bad("point/sparsity".into());
        }
        if self.loss.is_some_and(|l| !l.is_finite()) {
            return bad("loss".into());
        }
        for b in &self.biases {
            if !b.d.is_finite() || b.d_per_layer.iter().any(|v| !v.is_finite()) {
                return bad(format!("{} effect size", b.category));
            }
            if classify_bias(b.d)?.label() != b.label {
                return Err(Error::InvalidParams(format!(
                    "{} label {:?} disagrees with d = {}",
                    b.category, b.label, b.d
                )));
            }
        }
        Ok(())
    }
}

/// Finite values, consistent labels, and non-decreasing steps within each
/// series.
pub fn validate_records(records: &[TrajectoryRecord]) -> Result<()> {
    let mut last: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records {
        r.validate()?;
        if let Some(&prev) = last.get(r.series.as_str()) {
            if r.step < prev {
                return Err(Error::UnsortedRecords { prev, next: r.step });
            }
        }
        last.insert(&r.series, r.step);
    }
    Ok(())
}

/// Flat CSV row: one record x one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    series: String,
    step: u64,
    point: f64,
    sparsity: f64,
    loss: Option<f64>,
    nonzero_params: usize,
    category: String,
    d: f64,
    label: BiasLabel,
    p_value: Option<f64>,
    /// `;`-separated.
    d_per_layer: String,
}

fn rows(records: &[TrajectoryRecord]) -> impl Iterator<Item = Row> + '_ {
    records.iter().flat_map(|r| {
        r.biases.iter().map(move |b| Row {
            series: r.series.clone(),
            step: r.step,
            point: r.point,
            sparsity: r.sparsity,
            loss: r.loss,
            nonzero_params: r.nonzero_params,
            category: b.category.clone(),
            d: b.d,
            label: b.label,
            p_value: b.p_value,
            d_per_layer: b.d_per_layer.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
        })
    })
}

fn csv_bytes(rows: impl Iterator<Item = Row>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// All records as CSV. Records without biases produce no rows.
pub fn records_to_csv(records: &[TrajectoryRecord]) -> Result<Vec<u8>> {
    csv_bytes(rows(records))
}

/// Inverse of [`records_to_csv`]: consecutive rows with the same series,
/// step and point form one record.
pub fn records_from_csv(bytes: &[u8]) -> Result<Vec<TrajectoryRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row?;
        let d_per_layer = if row.d_per_layer.is_empty() {
            Vec::new()
        } else {
            row.d_per_layer
                .split(';')
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("d_per_layer {s:?}: {e}"))))
                .collect::<Result<_>>()?
        };
        let bias = CategoryBias {
            category: row.category,
            d: row.d,
            label: row.label,
            p_value: row.p_value,
            d_per_layer,
        };
        match out.last_mut() {
            Some(last)
                if last.series == row.series
                    && last.step == row.step
                    && last.point.to_bits() == row.point.to_bits()
                    && !last.biases.iter().any(|b| b.category == bias.category) =>
            {
                last.biases.push(bias)
            }
            _ => out.push(TrajectoryRecord {
                series: row.series,
                step: row.step,
                point: row.point,
                sparsity: row.sparsity,
                loss: row.loss,
                nonzero_params: row.nonzero_params,
                biases: vec![bias],
            }),
        }
    }
    Ok(out)
}

pub fn write_records_csv(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &records_to_csv(records)?)
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    records_from_csv(&crate::io::read_bytes(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub series: String,
    pub category: String,
    pub points: usize,
    pub first_d: f64,
    pub last_d: f64,
    pub min_d: f64,
    pub max_d: f64,
    pub last_label: BiasLabel,
    /// Label of every point, in order.
    pub labels: Vec<BiasLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_records: usize,
    pub series: Vec<SeriesSummary>,
}

pub fn summarize(records: &[TrajectoryRecord]) -> Result<ReportSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("report needs at least one record".into()));
    }
    validate_records(records)?;
    let mut groups: BTreeMap<(String, String), Vec<&CategoryBias>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        for b in &r.biases {
            let key = (r.series.clone(), b.category.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(b);
        }
    }
    let series = order
        .into_iter()
        .map(|key| {
            let bs = &groups[&key];
            let ds: Vec<f64> = bs.iter().map(|b| b.d).collect();
            SeriesSummary {
                series: key.0.clone(),
                category: key.1.clone(),
                points: ds.len(),
                first_d: ds[0],
                last_d: *ds.last().expect("non-empty"),
                min_d: ds.iter().copied().fold(f64::INFINITY, f64::min),
                max_d: ds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                last_label: bs.last().expect("non-empty").label,
                labels: bs.iter().map(|b| b.label).collect(),
            }
        })
        .collect();
    Ok(ReportSummary {
        n_records: records.len(),
        series,
    })
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `summary.json`, `trajectory.csv`, `csv/<category>.csv` and
/// `plot/<series>_<category>.dat` (whitespace columns `point d step`) under
/// `out`. Returns the files written.
pub fn report(records: &[TrajectoryRecord], out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    let summary = summarize(records)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<()> {
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    put(out.join("trajectory.csv"), &records_to_csv(records)?)?;
    let mut categories: Vec<&str> = Vec::new();
    for b in records.iter().flat_map(|r| &r.biases) {
        if !categories.contains(&b.category.as_str()) {
            categories.push(&b.category);
        }
    }
    for cat in categories {
        let only = rows(records).filter(|r| r.category == cat);
        put(out.join("csv").join(format!("{}.csv", file_stem(cat))), &csv_bytes(only)?)?;
    }
    for s in &summary.series {
        let mut dat = format!("# series {} category {}\n# point d step\n", s.series, s.category);
        for r in records.iter().filter(|r| r.series == s.series) {
            if let Some(b) = r.biases.iter().find(|b| b.category == s.category) {
                dat.push_str(&format!("{} {} {}\n", r.point, b.d, r.step));
            }
        }
        let name = format!("{}_{}.dat", file_stem(&s.series), file_stem(&s.category));
        put(out.join("plot").join(name), dat.as_bytes())?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bias(cat: &str, d: f64) -> CategoryBias {
        CategoryBias {
            category: cat.into(),
            d,
            label: classify_bias(d).unwrap().label(),
            p_value: None,
            d_per_layer: vec![d, -d / 3.0],
        }
    }

    fn record(series: &str, step: u64, ds: &[(&str, f64)]) -> TrajectoryRecord {
        TrajectoryRecord {
            series: series.into(),
            step,
            point: step as f64 * 0.1,
            sparsity: 0.0,
            loss: (step > 0).then_some(4.1 / (step as f64 + 0.3)),
            nonzero_params: 1000 - step as usize,
            biases: ds.iter().map(|&(c, d)| bias(c, d)).collect(),
        }
    }

    #[test]
    fn single_large_record() {
        let s = summarize(&[record("pretrain", 0, &[("Gender", 1.21)])]).unwrap();
        assert_eq!(s.series[0].last_label, BiasLabel::Large);
        assert_eq!(s.series[0].last_label.as_str(), "large");
    }

    #[test]
    fn empty_and_unsorted_fail() {
        assert!(matches!(summarize(&[]), Err(Error::EmptyInput(_))));
        let recs = [record("pretrain", 5, &[("Age", 0.1)]), record("pretrain", 2, &[("Age", 0.1)])];
        assert!(matches!(summarize(&recs), Err(Error::UnsortedRecords { prev: 5, next: 2 })));
        // independent series may restart
        let ok = [record("pretrain", 5, &[("Age", 0.1)]), record("head", 0, &[("Age", 0.1)])];
        assert!(summarize(&ok).is_ok());
    }

    #[test]
    fn inconsistent_label_fails() {
        let mut r = record("pretrain", 0, &[("Age", 0.9)]);
        r.biases[0].label = BiasLabel::Small;
        assert!(validate_records(&[r]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut recs = vec![
            record("pretrain", 0, &[("Gender", 0.123456789012345), ("Age", -0.5)]),
            record("pretrain", 3, &[("Gender", 1.0 / 3.0), ("Age", -0.2000000001)]),
            record("head", 0, &[("Gender", 0.81)]),
        ];
        recs[1].biases[0].p_value = Some(0.000999000999000999);
        recs[2].biases[0].d_per_layer.clear();
        let back = records_from_csv(&records_to_csv(&recs).unwrap()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn bundle_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs = [
            record("pretrain", 0, &[("Gender", 0.3), ("Age", 0.1)]),
            record("pretrain", 10, &[("Gender", 0.6), ("Age", -0.4)]),
        ];
        let files = report(&recs, dir.path()).unwrap();
        assert_eq!(files.len(), 2 + 2 + 2);
        let dat = std::fs::read_to_string(dir.path().join("plot/pretrain_gender.dat")).unwrap();
        assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 2);
        let back = read_records_csv(dir.path().join("trajectory.csv")).unwrap();
        assert_eq!(back, recs);
        let gender = std::fs::read_to_string(dir.path().join("csv/gender.csv")).unwrap();
        assert_eq!(gender.lines().count(), 3);
    }
}
