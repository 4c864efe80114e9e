use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::body::{BodyModel, JointTransforms, Pose, ShapeCoefficients};
use super::mesh::{GarmentMesh, Vec3};
use crate::error::{structural, validation, Error, Result};

/// Blended transforms whose determinant falls below this are rejected by `unpose`.
pub const MIN_BLEND_DET: f64 = 1e-9;

/// Sparse per-vertex skinning weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinningWeights {
    pub per_vertex: Vec<Vec<(usize, f64)>>,
}

/// Length given to bones of leaf joints, which have no child to point at.
const LEAF_BONE_LENGTH: f64 = 0.25;
/// Softness of the distance falloff used by [`SkinningWeights::project`].
const PROJECTION_FALLOFF: f64 = 0.04;
const MIN_KEPT_WEIGHT: f64 = 1e-4;

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

impl SkinningWeights {
    pub fn len(&self) -> usize {
        self.per_vertex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_vertex.is_empty()
    }

    /// Every vertex bound rigidly to one joint.
    pub fn rigid(vertex_count: usize, joint: usize) -> Self {
        SkinningWeights {
            per_vertex: vec![vec![(joint, 1.0)]; vertex_count],
        }
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        for (v, ws) in self.per_vertex.iter().enumerate() {
            if ws.is_empty() {
                return Err(validation!("vertex {v} has no skinning weights"));
            }
            let mut sum = 0.0;
            for &(j, w) in ws {
                if j >= joint_count {
                    return Err(structural!("vertex {v} references joint {j} >= {joint_count}"));
                }
                if !(w >= 0.0) {
                    return Err(validation!("vertex {v} has negative or NaN weight {w}"));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(validation!("vertex {v} weights sum to {sum}"));
            }
        }
        Ok(())
    }

    /// Binds points to the rest skeleton by proximity to bone segments.
    ///
    /// Each joint owns the segment towards the centroid of its children
    /// (leaf joints extend their parent's direction by a fixed length). Weights fall off
    /// as `exp(-(d_j - d_min) / 0.04 m)`, entries below `1e-4` are dropped,
    /// and the rest renormalized.
    pub fn project(points: &[Vec3], body: &BodyModel) -> Result<Self> {
        let joints = body.rest_joints();
        let bones: Vec<(Vec3, Vec3)> = (0..body.joint_count())
            .map(|j| {
                let a = joints[j];
                let children: Vec<usize> = body.children(j).collect();
                let b = match children.len() {
                    0 => match body.parent(j) {
                        Some(p) if (a - joints[p]).norm() > 0.0 => {
                            a + (a - joints[p]).normalize() * LEAF_BONE_LENGTH
                        }
                        _ => a,
                    },
                    k => children.iter().map(|&c| joints[c]).sum::<Vec3>() / k as f64,
                };
                (a, b)
            })
            .collect();
        let per_vertex = points
            .iter()
            .map(|p| {
                let d: Vec<f64> = bones
                    .iter()
                    .map(|(a, b)| point_segment_distance(p, a, b))
                    .collect();
                let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
                let raw: Vec<f64> = d
                    .iter()
                    .map(|&dj| (-(dj - dmin) / PROJECTION_FALLOFF).exp())
                    .collect();
                let total: f64 = raw.iter().sum();
                let kept: Vec<(usize, f64)> = raw
                    .iter()
                    .enumerate()
                    .map(|(j, &w)| (j, w / total))
                    .filter(|&(_, w)| w >= MIN_KEPT_WEIGHT)
                    .collect();
                let kept_total: f64 = kept.iter().map(|&(_, w)| w).sum();
                kept.into_iter().map(|(j, w)| (j, w / kept_total)).collect()
            })
            .collect();
        Ok(SkinningWeights { per_vertex })
    }
}

/// Blended `(K, b)` with `skin(v) = v + K v + b + translation`.
fn blend(ws: &[(usize, f64)], xf: &JointTransforms) -> (Matrix3<f64>, Vec3) {
    let mut k = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for &(j, w) in ws {
        let kj = &xf.rot_minus_identity[j];
        k += kj * w;
        b += (xf.displacement[j] - kj * xf.joints[j]) * w;
    }
    (k, b)
}

pub(crate) fn skin_points(
    points: &[Vec3],
    weights: &SkinningWeights,
    xf: &JointTransforms,
) -> Result<Vec<Vec3>> {
    if weights.len() != points.len() {
        return Err(structural!(
            "{} skinning weight rows for {} vertices",
            weights.len(),
            points.len()
        ));
    }
    weights.validate(xf.joints.len())?;
    Ok(points
        .iter()
        .zip(&weights.per_vertex)
        .map(|(v, ws)| {
            let (k, b) = blend(ws, xf);
            v + (k * v + b + xf.translation)
        })
        .collect())
}

/// Poses a canonical mesh by linear blend skinning over `J(shape)`.
pub fn skin(
    template: &GarmentMesh,
    weights: &SkinningWeights,
    body: &BodyModel,
    shape: &ShapeCoefficients,
    pose: &Pose,
) -> Result<GarmentMesh> {
    let xf = body.joint_transforms(shape, pose)?;
    Ok(GarmentMesh {
        vertices: skin_points(&template.vertices, weights, &xf)?,
        faces: template.faces.clone(),
        uv: template.uv.clone(),
    })
}

/// Inverts [`skin`] vertex by vertex.
///
/// Fails with [`Error::SingularTransform`] on the first vertex whose blended
/// transform has `|det| <= 1e-9`.
pub fn unpose(
    posed: &GarmentMesh,
    weights: &SkinningWeights,
    body: &BodyModel,
    shape: &ShapeCoefficients,
    pose: &Pose,
) -> Result<GarmentMesh> {
    let xf = body.joint_transforms(shape, pose)?;
    if weights.len() != posed.vertices.len() {
        return Err(structural!(
            "{} skinning weight rows for {} vertices",
            weights.len(),
            posed.vertices.len()
        ));
    }
    weights.validate(body.joint_count())?;
    let mut vertices = Vec::with_capacity(posed.vertices.len());
    for (i, (v, ws)) in posed.vertices.iter().zip(&weights.per_vertex).enumerate() {
        let (k, b) = blend(ws, &xf);
        let m = Matrix3::identity() + k;
        let det = m.determinant();
        if !(det.abs() > MIN_BLEND_DET) {
            return Err(Error::SingularTransform { vertex: i, det });
        }
        let inv = m.try_inverse().ok_or(Error::SingularTransform { vertex: i, det })?;
        let u = v - b - xf.translation;
        // u - M^-1 K u == M^-1 u, and stays exact when K == 0.
        vertices.push(u - inv * (k * u));
    }
    Ok(GarmentMesh {
        vertices,
        faces: posed.faces.clone(),
        uv: posed.uv.clone(),
    })
}
