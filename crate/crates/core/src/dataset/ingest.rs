//! Reading externally simulated sequences: `frame_%05d.obj` meshes plus a
//! `conditions.csv` with one row per frame.

use std::path::{Path, PathBuf};

use crate::design::{design_mesh, DesignParams, DesignTemplate};
use crate::diffusion::ConditionVector;
use crate::error::{structural, validation, Error, Result};
use crate::geometry::{obj, BodyModel, GarmentMesh, Pose, ShapeCoefficients};

pub const CONDITIONS_FILE: &str = "conditions.csv";

pub(crate) fn frame_obj_name(frame: usize) -> String {
    format!("frame_{frame:05}.obj")
}

/// One ingested sequence. Design and shape are fixed per sequence.
#[derive(Debug, Clone)]
pub struct IngestedSequence {
    pub design: DesignParams,
    pub shape: ShapeCoefficients,
    /// Source file, pose and posed mesh of every frame in order.
    pub frames: Vec<(PathBuf, Pose, GarmentMesh)>,
}

fn header(shape_dim: usize, joint_count: usize) -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    h.extend((0..shape_dim).map(|k| format!("beta_{k}")));
    h.extend((0..3 * joint_count + 3).map(|k| format!("theta_{k}")));
    h.extend(["length", "sleeve", "cleavage"].map(String::from));
    h
}

/// Writes `frames` in the layout [`read_ingest_dir`] expects.
pub fn write_ingest_dir(dir: &Path, frames: &[(GarmentMesh, ConditionVector)]) -> Result<()> {
    let Some((_, first)) = frames.first() else {
        return Err(validation!("no frames to write"));
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let path = dir.join(CONDITIONS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::from(e).in_file(&path))?;
    w.write_record(header(first.shape.len(), first.pose.joint_count()))?;
    for (k, (mesh, c)) in frames.iter().enumerate() {
        obj::write_garment(&dir.join(frame_obj_name(k)), mesh)?;
        let mut row = vec![k.to_string()];
        row.extend(c.to_vec().iter().map(|x| format!("{x:e}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::from(e).in_file(&path))
}

/// Reads and checks an ingest directory against `body` and `template`.
/// Every bad file is reported; the first failure does not stop the scan.
pub fn read_ingest_dir(dir: &Path, body: &BodyModel, template: &DesignTemplate) -> Result<IngestedSequence> {
    let path = dir.join(CONDITIONS_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::from(e).in_file(&path))?;
    let expected = header(body.shape_dim(), body.joint_count());
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(structural!("columns {found:?}, expected {expected:?}").in_file(&path));
    }

    let mut conditions = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::from(e).in_file(&path))?;
        let values: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| structural!("row {}: {e}", row + 1).in_file(&path))?;
        if values[0] != row as f64 {
            return Err(structural!("row {} is labeled frame {}", row + 1, values[0]).in_file(&path));
        }
        let c = ConditionVector::from_slice(&values[1..], body.shape_dim(), body.joint_count())
            .map_err(|e| e.in_file(&path))?;
        conditions.push(c);
    }
    let Some(first) = conditions.first().cloned() else {
        return Err(validation!("no frames listed").in_file(&path));
    };
    if let Some(k) = conditions.iter().position(|c| c.design != first.design || c.shape != first.shape) {
        return Err(validation!("frame {k} changes the design or shape within the sequence").in_file(&path));
    }

    let reference = design_mesh(template, &first.design)?;
    let mut frames = Vec::with_capacity(conditions.len());
    let mut failures = Vec::new();
    for (k, c) in conditions.into_iter().enumerate() {
        let file = dir.join(frame_obj_name(k));
        let mesh = obj::read_garment(&file).and_then(|m| {
            reference.check_same_topology(&m, "ingested frame")?;
            if m.uv != reference.uv {
                return Err(structural!("uv layout differs from the design template"));
            }
            Ok(m)
        });
        match mesh {
            Ok(m) => frames.push((file, c.pose, m)),
            Err(e) => failures.push((file.display().to_string(), e)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Itemized { failures });
    }
    Ok(IngestedSequence {
        design: first.design,
        shape: first.shape,
        frames,
    })
}
