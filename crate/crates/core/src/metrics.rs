//! Position and velocity errors between predicted and ground-truth garment
//! sequences, and their CSV/JSON reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{structural, validation, Error, Result};
use crate::geometry::GarmentMesh;

/// How per-vertex distances collapse to one number per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Max,
}

fn reduce(values: impl Iterator<Item = f64>, how: Reduction) -> f64 {
    match how {
        Reduction::Mean => {
            let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        }
        Reduction::Max => values.fold(0.0, f64::max),
    }
}

/// Mean Euclidean distance between corresponding vertices, in meters.
pub fn position_error(pred: &GarmentMesh, gt: &GarmentMesh) -> Result<f64> {
    position_error_by(pred, gt, Reduction::Mean)
}

pub fn position_error_by(pred: &GarmentMesh, gt: &GarmentMesh, how: Reduction) -> Result<f64> {
    gt.check_same_topology(pred, "prediction")?;
    Ok(reduce(
        pred.vertices.iter().zip(&gt.vertices).map(|(a, b)| (a - b).norm()),
        how,
    ))
}

/// Per-frame values of one quantity for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub label: String,
    pub sequence: String,
    /// Frame index of each value.
    pub frames: Vec<usize>,
    pub values: Vec<f64>,
}

impl ErrorCurve {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.values.len() {
            return Err(structural!("curve {} has {} frames and {} values", self.label, self.frames.len(), self.values.len()));
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(validation!("curve {} holds the value {v}", self.label));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        reduce(self.values.iter().copied(), Reduction::Mean)
    }

    pub fn max(&self) -> f64 {
        reduce(self.values.iter().copied(), Reduction::Max)
    }

    /// Population variance of the values.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        reduce(self.values.iter().map(|v| (v - m) * (v - m)), Reduction::Mean)
    }
}

fn check_sequences(pred: &[GarmentMesh], gt: &[GarmentMesh], min_len: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(structural!("predicted sequence has {} frames, ground truth {}", pred.len(), gt.len()));
    }
    if gt.len() < min_len {
        return Err(validation!("sequences need at least {min_len} frame(s), got {}", gt.len()));
    }
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        g.check_same_topology(p, &format!("frame {k}"))?;
    }
    Ok(())
}

/// Position error of every frame.
pub fn position_curve(
    pred: &[GarmentMesh],
    gt: &[GarmentMesh],
    how: Reduction,
    label: &str,
    sequence: &str,
) -> Result<ErrorCurve> {
    check_sequences(pred, gt, 1)?;
    let values = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| position_error_by(p, g, how))
        .collect::<Result<_>>()?;
    Ok(ErrorCurve {
        label: label.into(),
        sequence: sequence.into(),
        frames: (0..gt.len()).collect(),
        values,
    })
}

/// For frames `n >= 1`: the reduced norm of
/// `(pred[n] - pred[n-1]) - (gt[n] - gt[n-1])` over vertices, in meters per frame.
pub fn velocity_error(pred: &[GarmentMesh], gt: &[GarmentMesh]) -> Result<ErrorCurve> {
    velocity_error_by(pred, gt, Reduction::Mean, "velocity", "")
}

pub fn velocity_error_by(
    pred: &[GarmentMesh],
    gt: &[GarmentMesh],
    how: Reduction,
    label: &str,
    sequence: &str,
) -> Result<ErrorCurve> {
    check_sequences(pred, gt, 2)?;
    let values = (1..gt.len())
        .map(|n| {
            let d = pred[n]
                .vertices
                .iter()
                .zip(&pred[n - 1].vertices)
                .zip(gt[n].vertices.iter().zip(&gt[n - 1].vertices))
                .map(|((p1, p0), (g1, g0))| ((p1 - p0) - (g1 - g0)).norm());
            reduce(d, how)
        })
        .collect();
    Ok(ErrorCurve {
        label: label.into(),
        sequence: sequence.into(),
        frames: (1..gt.len()).collect(),
        values,
    })
}

/// Aggregate of one curve in the summary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub label: String,
    pub sequence: String,
    pub frames: usize,
    pub mean: f64,
    pub max: f64,
}

/// The summary JSON sits next to the CSV with a `.json` extension.
pub fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

const MEAN_ROW: &str = "mean";

/// Writes one CSV column per curve label, one row per frame and a final
/// `mean` row, plus a summary JSON. Existing files are only replaced when
/// `overwrite` is set.
pub fn report(curves: &[ErrorCurve], out_path: &Path, overwrite: bool) -> Result<Vec<CurveSummary>> {
    if curves.is_empty() {
        return Err(validation!("no curves to report"));
    }
    let mut labels = BTreeSet::new();
    for c in curves {
        c.validate()?;
        if c.label.is_empty() || c.label == "frame" || !labels.insert(c.label.as_str()) {
            return Err(validation!("curve label {:?} is empty, reserved or repeated", c.label));
        }
    }
    let json_path = summary_path(out_path);
    if !overwrite {
        for p in [out_path, json_path.as_path()] {
            if p.exists() {
                return Err(validation!("{} exists; pass the overwrite flag to replace it", p.display()));
            }
        }
    }
    let frames: BTreeSet<usize> = curves.iter().flat_map(|c| c.frames.iter().copied()).collect();
    let lookup: Vec<BTreeMap<usize, f64>> = curves
        .iter()
        .map(|c| c.frames.iter().copied().zip(c.values.iter().copied()).collect())
        .collect();
    let write = || -> Result<()> {
        let mut w = csv::Writer::from_path(out_path)?;
        let mut header = vec!["frame".to_string()];
        header.extend(curves.iter().map(|c| c.label.clone()));
        w.write_record(&header)?;
        for f in &frames {
            let mut row = vec![f.to_string()];
            row.extend(lookup.iter().map(|m| m.get(f).map_or(String::new(), |v| v.to_string())));
            w.write_record(&row)?;
        }
        let mut row = vec![MEAN_ROW.to_string()];
        row.extend(curves.iter().map(|c| c.mean().to_string()));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| e.in_file(out_path))?;
    let summary: Vec<CurveSummary> = curves
        .iter()
        .map(|c| CurveSummary {
            label: c.label.clone(),
            sequence: c.sequence.clone(),
            frames: c.values.len(),
            mean: c.mean(),
            max: c.max(),
        })
        .collect();
    std::fs::write(&json_path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::from(e).in_file(&json_path))?;
    Ok(summary)
}

/// Parses a CSV written by [`report`] back into curves (sequence ids are
/// not stored in the CSV and come back empty).
pub fn read_report(path: &Path) -> Result<Vec<ErrorCurve>> {
    let run = || -> Result<Vec<ErrorCurve>> {
        let bad = |msg: String| Error::Format { kind: "metrics csv", msg };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("frame") {
            return Err(bad("first column must be `frame`".into()));
        }
        let mut curves: Vec<ErrorCurve> = header
            .iter()
            .skip(1)
            .map(|l| ErrorCurve {
                label: l.to_string(),
                sequence: String::new(),
                frames: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        for rec in r.records() {
            let rec = rec?;
            let key = rec.get(0).unwrap_or_default();
            if key == MEAN_ROW {
                continue;
            }
            let frame: usize = key.parse().map_err(|_| bad(format!("frame {key:?}")))?;
            for (c, cell) in curves.iter_mut().zip(rec.iter().skip(1)) {
                if !cell.is_empty() {
                    c.frames.push(frame);
                    c.values.push(cell.parse().map_err(|_| bad(format!("value {cell:?}")))?);
                }
            }
        }
        Ok(curves)
    };
    run().map_err(|e| e.in_file(path))
}
