use std::path::Path;

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use super::mesh::{TriangleMesh, Vec3};
use super::obj;
use super::skinning::SkinningWeights;
use crate::error::{structural, validation, Error, Result};

/// Body shape coefficients (the linear shape-space coordinates).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ShapeCoefficients(pub Vec<f64>);

impl ShapeCoefficients {
    pub fn zeros(n: usize) -> Self {
        ShapeCoefficients(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-joint axis-angle rotations plus a root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotations: Vec<Vec3>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Self {
        Pose {
            rotations: vec![Vec3::zeros(); joint_count],
            translation: Vec3::zeros(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// Rotations (3 per joint) followed by the translation.
    pub fn flatten(&self) -> Vec<f64> {
        self.rotations
            .iter()
            .flat_map(|r| r.iter().copied())
            .chain(self.translation.iter().copied())
            .collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() < 3 || values.len() % 3 != 0 {
            return Err(structural!("flattened pose has {} values", values.len()));
        }
        let joints = values.len() / 3 - 1;
        let rotations = (0..joints)
            .map(|j| Vec3::new(values[3 * j], values[3 * j + 1], values[3 * j + 2]))
            .collect();
        let t = &values[3 * joints..];
        Ok(Pose {
            rotations,
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }
}

/// Closed body surface with skinning weights so it can follow the pose.
#[derive(Debug, Clone, PartialEq)]
pub struct BodySurface {
    pub mesh: TriangleMesh,
    pub weights: SkinningWeights,
}

/// Articulated body: joint tree, rest joints and a linear shape basis.
///
/// Joint positions for shape `beta` are `rest_joints + shape_basis * beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    names: Vec<String>,
    rest_joints: Vec<Vec3>,
    parent: Vec<Option<usize>>,
    /// `[joint][coefficient]`
    shape_basis: Vec<Vec<Vec3>>,
    shape_dim: usize,
    /// Joints ordered so parents precede children.
    order: Vec<usize>,
    surface: Option<BodySurface>,
}

/// World-space joint transforms for one (shape, pose).
///
/// Stored in displacement form so the identity pose yields exact zeros:
/// a point `v` bound to joint `j` moves to
/// `v + (R_j - I)(v - J_j) + D_j + translation`.
#[derive(Debug, Clone)]
pub struct JointTransforms {
    /// `R_j - I` for each joint's global rotation.
    pub rot_minus_identity: Vec<Matrix3<f64>>,
    /// Posed-minus-rest joint displacement `D_j`.
    pub displacement: Vec<Vec3>,
    /// Rest joints `J(beta)`.
    pub joints: Vec<Vec3>,
    pub translation: Vec3,
}

fn axis_angle(r: &Vec3) -> Matrix3<f64> {
    if r.iter().all(|&x| x == 0.0) {
        Matrix3::identity()
    } else {
        Rotation3::new(*r).into_inner()
    }
}

impl BodyModel {
    pub fn new(
        names: Vec<String>,
        rest_joints: Vec<Vec3>,
        parent: Vec<Option<usize>>,
        shape_basis: Vec<Vec<Vec3>>,
    ) -> Result<Self> {
        let n = rest_joints.len();
        if n == 0 {
            return Err(validation!("body model needs at least one joint"));
        }
        if names.len() != n || parent.len() != n || shape_basis.len() != n {
            return Err(structural!(
                "joint arrays disagree: {} names, {} rest joints, {} parents, {} basis rows",
                names.len(),
                n,
                parent.len(),
                shape_basis.len()
            ));
        }
        let shape_dim = shape_basis[0].len();
        if shape_basis.iter().any(|row| row.len() != shape_dim) {
            return Err(structural!("shape basis rows have differing coefficient counts"));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parent[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(validation!("joint tree must have exactly one root, found {}", roots.len()));
        }
        if let Some(j) = (0..n).find(|&j| parent[j].is_some_and(|p| p >= n || p == j)) {
            return Err(validation!("joint {j} has an invalid parent"));
        }
        // Breadth-first from the root; anything unreached sits on a cycle.
        let mut order = vec![roots[0]];
        let mut head = 0;
        while head < order.len() {
            let p = order[head];
            head += 1;
            order.extend((0..n).filter(|&c| parent[c] == Some(p)));
        }
        if order.len() != n {
            return Err(validation!("joint parent links contain a cycle"));
        }
        Ok(BodyModel {
            names,
            rest_joints,
            parent,
            shape_basis,
            shape_dim,
            order,
            surface: None,
        })
    }

    /// Attaches a closed surface, binding it to the skeleton by projection.
    pub fn with_surface(mut self, mesh: TriangleMesh) -> Result<Self> {
        mesh.validate_indices()?;
        super::collision::check_closed(&mesh)?;
        let weights = SkinningWeights::project(&mesh.vertices, &self)?;
        self.surface = Some(BodySurface { mesh, weights });
        Ok(self)
    }

    pub fn joint_count(&self) -> usize {
        self.rest_joints.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.joint_count()).filter(move |&c| self.parent[c] == Some(j))
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    pub fn rest_joints(&self) -> &[Vec3] {
        &self.rest_joints
    }

    pub fn surface(&self) -> Option<&BodySurface> {
        self.surface.as_ref()
    }

    pub fn check_shape(&self, shape: &ShapeCoefficients) -> Result<()> {
        if shape.len() != self.shape_dim {
            return Err(structural!(
                "body has {} shape coefficients, got {}",
                self.shape_dim,
                shape.len()
            ));
        }
        Ok(())
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.joint_count() != self.joint_count() {
            return Err(structural!(
                "pose has {} joints, body has {}",
                pose.joint_count(),
                self.joint_count()
            ));
        }
        Ok(())
    }

    /// `J(beta)`.
    pub fn joints(&self, shape: &ShapeCoefficients) -> Result<Vec<Vec3>> {
        self.check_shape(shape)?;
        Ok(self
            .rest_joints
            .iter()
            .zip(&self.shape_basis)
            .map(|(rest, basis)| {
                basis
                    .iter()
                    .zip(&shape.0)
                    .fold(*rest, |acc, (b, &beta)| acc + b * beta)
            })
            .collect())
    }

    /// Forward kinematics over `J(beta)`.
    pub fn joint_transforms(&self, shape: &ShapeCoefficients, pose: &Pose) -> Result<JointTransforms> {
        self.check_pose(pose)?;
        let joints = self.joints(shape)?;
        let n = self.joint_count();
        let mut global = vec![Matrix3::identity(); n];
        let mut rot_minus_identity = vec![Matrix3::zeros(); n];
        let mut displacement = vec![Vec3::zeros(); n];
        for &j in &self.order {
            let local = axis_angle(&pose.rotations[j]);
            match self.parent[j] {
                None => {
                    global[j] = local;
                }
                Some(p) => {
                    global[j] = global[p] * local;
                    displacement[j] =
                        displacement[p] + rot_minus_identity[p] * (joints[j] - joints[p]);
                }
            }
            rot_minus_identity[j] = global[j] - Matrix3::identity();
        }
        Ok(JointTransforms {
            rot_minus_identity,
            displacement,
            joints,
            translation: pose.translation,
        })
    }

    /// The attached surface posed by linear blend skinning.
    pub fn posed_surface(&self, shape: &ShapeCoefficients, pose: &Pose) -> Result<Option<TriangleMesh>> {
        let Some(surface) = &self.surface else {
            return Ok(None);
        };
        let xf = self.joint_transforms(shape, pose)?;
        let vertices = super::skinning::skin_points(&surface.mesh.vertices, &surface.weights, &xf)?;
        Ok(Some(TriangleMesh {
            vertices,
            faces: surface.mesh.faces.clone(),
        }))
    }

    pub fn to_document(&self) -> BodyDocument {
        BodyDocument {
            joints: (0..self.joint_count())
                .map(|j| JointDocument {
                    name: self.names[j].clone(),
                    rest: self.rest_joints[j].into(),
                    parent: self.parent[j],
                    shape_basis: self.shape_basis[j].iter().map(|&v| v.into()).collect(),
                })
                .collect(),
            surface_obj: None,
        }
    }

    pub fn from_document(doc: &BodyDocument, base_dir: Option<&Path>) -> Result<Self> {
        let body = BodyModel::new(
            doc.joints.iter().map(|j| j.name.clone()).collect(),
            doc.joints.iter().map(|j| Vec3::from(j.rest)).collect(),
            doc.joints.iter().map(|j| j.parent).collect(),
            doc.joints
                .iter()
                .map(|j| j.shape_basis.iter().map(|&b| Vec3::from(b)).collect())
                .collect(),
        )?;
        match &doc.surface_obj {
            None => Ok(body),
            Some(rel) => {
                let path = base_dir.map_or_else(|| rel.into(), |d| d.join(rel));
                let mesh = obj::read_triangle_mesh(&path)?;
                body.with_surface(mesh).map_err(|e| e.in_file(path))
            }
        }
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let doc: BodyDocument =
            serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))?;
        BodyModel::from_document(&doc, path.parent())
    }

    /// Writes the JSON document, and the surface as a sibling OBJ if present.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut doc = self.to_document();
        if let Some(surface) = &self.surface {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "body".into());
            let obj_name = format!("{stem}_surface.obj");
            let obj_path = path.with_file_name(&obj_name);
            obj::write_triangle_mesh(&obj_path, &surface.mesh)?;
            doc.surface_obj = Some(obj_name);
        }
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

/// On-disk JSON form of a [`BodyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyDocument {
    pub joints: Vec<JointDocument>,
    /// Surface OBJ, relative to the JSON file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_obj: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDocument {
    pub name: String,
    pub rest: [f64; 3],
    pub parent: Option<usize>,
    #[serde(default)]
    pub shape_basis: Vec<[f64; 3]>,
}
