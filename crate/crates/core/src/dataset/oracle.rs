//! Procedural stand-in for cloth simulation: skinned designs plus smooth
//! pose-, shape- and design-dependent wrinkle bands, pushed out of the body.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{design_mesh, DesignParams, DesignTemplate};
use crate::error::{validation, Result};
use crate::geometry::{
    joints, resolve_collisions, skin, BodyModel, ClosedMesh, GarmentMesh, Pose, ShapeCoefficients, SkinningWeights,
    Vec3,
};

/// Bound on `max_v |m(theta + delta)_v - m(theta)_v| / |delta|` for the
/// desk body and default generator, in meters per unit of the flattened pose
/// (radians, and meters for the root translation).
///
/// Skinning contributes at most the summed lever arms of the joint chain
/// (under 1.5 m for the desk garment); the wrinkle bands add a few
/// centimeters per radian. The constant leaves headroom for the collision
/// push-out.
pub const POSE_LIPSCHITZ: f64 = 3.0;

/// Magnitudes of the procedural deformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WrinkleConfig {
    /// Multiplier on every condition-driven wrinkle band.
    pub amplitude: f64,
    /// Amplitude of the seeded per-sequence band, meters.
    pub perturbation: f64,
    /// Clearance enforced against the posed body surface, meters.
    pub collision_epsilon: f64,
}

impl Default for WrinkleConfig {
    fn default() -> Self {
        WrinkleConfig {
            amplitude: 1.0,
            perturbation: 0.001,
            collision_epsilon: 0.002,
        }
    }
}

impl WrinkleConfig {
    /// No wrinkles at all; the oracle reduces to skinning plus collision handling.
    pub fn flat() -> Self {
        WrinkleConfig {
            amplitude: 0.0,
            perturbation: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("perturbation", self.perturbation),
            ("collision_epsilon", self.collision_epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(validation!("wrinkle {name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Everything about one design that does not change across frames.
#[derive(Debug, Clone)]
pub struct DesignRig {
    pub params: DesignParams,
    pub canonical: GarmentMesh,
    pub weights: SkinningWeights,
    /// Unit vertex normals of the canonical mesh, shared across UV seams.
    pub normals: Vec<Vec3>,
    /// Part index per vertex: 0 torso, 1 left sleeve, 2 right sleeve.
    pub part: Vec<u8>,
}

fn vertex_normals(mesh: &GarmentMesh) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); mesh.vertices.len()];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i]);
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i] += n;
        }
    }
    // Seam columns duplicate positions; pool their normals.
    let mut welded: HashMap<[u64; 3], Vec3> = HashMap::new();
    for (v, n) in mesh.vertices.iter().zip(&acc) {
        *welded.entry(v.map(f64::to_bits).into()).or_insert_with(Vec3::zeros) += n;
    }
    mesh.vertices
        .iter()
        .map(|v| {
            let n = welded[&<[u64; 3]>::from(v.map(f64::to_bits))];
            if n.norm() > 0.0 {
                n.normalize()
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

/// A sinusoid along `direction` in canonical space.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Band {
    direction: Vec3,
    wavelength: f64,
    amplitude: f64,
    phase: f64,
}

impl Band {
    fn at(&self, x: &Vec3) -> f64 {
        self.amplitude * (TAU * self.direction.dot(x) / self.wavelength + self.phase).sin()
    }
}

/// The seeded low-amplitude band shared by all frames of one sequence.
fn perturbation_band(seed: u64, amplitude: f64) -> Band {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = rng.random_range(-1.0..1.0);
    let a: f64 = rng.random_range(0.0..TAU);
    let r = (1.0 - z * z).sqrt();
    Band {
        direction: Vec3::new(r * a.cos(), z, r * a.sin()),
        wavelength: rng.random_range(0.10..0.20),
        amplitude,
        phase: rng.random_range(0.0..TAU),
    }
}

/// The condition-driven bands for each garment part.
fn bands(design: &DesignParams, shape: &ShapeCoefficients, pose: &Pose, scale: f64) -> [Vec<Band>; 3] {
    let rot = |j: usize| pose.rotations.get(j).copied().unwrap_or_else(Vec3::zeros);
    let beta = |k: usize| shape.0.get(k).copied().unwrap_or(0.0);
    let twist = rot(joints::SPINE).y;
    let bend = rot(joints::PELVIS).x;
    let left = rot(joints::LEFT_SHOULDER).z;
    let right = -rot(joints::RIGHT_SHOULDER).z;
    let diag = |sx: f64| Vec3::new(sx, 1.0, 0.0).normalize();
    let torso = vec![
        // Horizontal folds whose depth follows the torso twist.
        Band {
            direction: Vec3::y(),
            wavelength: 0.16 + 0.04 * design.length,
            amplitude: scale * 0.004 * (1.0 + 0.5 * (2.0 * twist).tanh()) * (1.0 + 0.1 * beta(0)),
            phase: 3.0 * twist + 0.5 * beta(0) + PI * bend,
        },
        // Diagonal drag lines pulled by each raised arm.
        Band {
            direction: diag(1.0),
            wavelength: 0.25,
            amplitude: scale * 0.003 * (1.0 + left.tanh()) * (0.75 + 0.25 * design.cleavage),
            phase: 2.0 * left + beta(1),
        },
        Band {
            direction: diag(-1.0),
            wavelength: 0.25,
            amplitude: scale * 0.003 * (1.0 + right.tanh()) * (0.75 + 0.25 * design.cleavage),
            phase: 2.0 * right + beta(1),
        },
    ];
    let sleeve = |arm: f64, side: f64| {
        vec![Band {
            direction: Vec3::x() * side,
            wavelength: 0.09 + 0.03 * design.sleeve,
            amplitude: scale * 0.0025 * (1.0 + 0.5 * arm.sin()),
            phase: 4.0 * arm + beta(0),
        }]
    };
    [torso, sleeve(left, 1.0), sleeve(right, -1.0)]
}

/// Procedural deformation oracle over one body and design template.
#[derive(Debug, Clone)]
pub struct WrinkleOracle {
    pub body: BodyModel,
    pub template: DesignTemplate,
    pub config: WrinkleConfig,
}

impl WrinkleOracle {
    pub fn new(body: BodyModel, template: DesignTemplate, config: WrinkleConfig) -> Result<Self> {
        config.validate()?;
        if body.surface().is_none() {
            return Err(validation!("the oracle needs a body with a surface for collision handling"));
        }
        Ok(WrinkleOracle { body, template, config })
    }

    /// Canonical mesh, body-projected skinning weights and normals for `p`.
    pub fn rig(&self, p: &DesignParams) -> Result<DesignRig> {
        let canonical = design_mesh(&self.template, p)?;
        let weights = SkinningWeights::project(&canonical.vertices, &self.body)?;
        let normals = vertex_normals(&canonical);
        let mut part = vec![0u8; canonical.vertices.len()];
        for (k, range) in self.template.parts().into_iter().enumerate() {
            part[range].fill(k as u8);
        }
        Ok(DesignRig {
            params: *p,
            canonical,
            weights,
            normals,
            part,
        })
    }

    /// Per-vertex canonical-space wrinkle offsets along the vertex normals.
    pub fn wrinkle_offsets(&self, rig: &DesignRig, shape: &ShapeCoefficients, pose: &Pose, seed: u64) -> Vec<Vec3> {
        let parts = bands(&rig.params, shape, pose, self.config.amplitude);
        let noise = perturbation_band(seed, self.config.perturbation);
        rig.canonical
            .vertices
            .iter()
            .zip(&rig.normals)
            .zip(&rig.part)
            .map(|((x, n), &p)| {
                let h: f64 = parts[p as usize].iter().map(|b| b.at(x)).sum::<f64>() + noise.at(x);
                n * h
            })
            .collect()
    }

    /// `skin(design_mesh(p) + wrinkles)` with collisions resolved against
    /// the posed body surface.
    pub fn generate(&self, rig: &DesignRig, shape: &ShapeCoefficients, pose: &Pose, seed: u64) -> Result<GarmentMesh> {
        let mut canonical = rig.canonical.clone();
        for (v, d) in canonical.vertices.iter_mut().zip(self.wrinkle_offsets(rig, shape, pose, seed)) {
            *v += d;
        }
        let posed = skin(&canonical, &rig.weights, &self.body, shape, pose)?;
        let surface = self
            .body
            .posed_surface(shape, pose)?
            .expect("checked in the constructor");
        resolve_collisions(&posed, &ClosedMesh::new(surface)?, self.config.collision_epsilon)
    }
}

/// One-shot form of [`WrinkleOracle::generate`].
pub fn generate_procedural(
    oracle: &WrinkleOracle,
    design: &DesignParams,
    shape: &ShapeCoefficients,
    pose: &Pose,
    wrinkle_seed: u64,
) -> Result<GarmentMesh> {
    oracle.generate(&oracle.rig(design)?, shape, pose, wrinkle_seed)
}

/// Parameters of one procedural motion on the desk skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionParams {
    /// Raise amplitude, frequency (Hz) and phase of each arm.
    pub left_arm: [f64; 3],
    pub right_arm: [f64; 3],
    /// Spine twist about `y`.
    pub twist: [f64; 3],
    /// Pelvis bend about `x`.
    pub bend: [f64; 3],
    /// Vertical bounce of the root.
    pub bounce: [f64; 3],
}

impl MotionParams {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut wave = |amp: (f64, f64)| {
            [
                rng.random_range(amp.0..amp.1),
                rng.random_range(0.3..0.8),
                rng.random_range(0.0..TAU),
            ]
        };
        MotionParams {
            left_arm: wave((0.2, 0.6)),
            right_arm: wave((0.2, 0.6)),
            twist: wave((0.1, 0.4)),
            bend: wave((0.02, 0.1)),
            bounce: wave((0.0, 0.02)),
        }
    }

    /// Pose at time `t` seconds for a body with `joint_count` joints.
    pub fn pose(&self, t: f64, joint_count: usize) -> Pose {
        let wave = |w: [f64; 3]| w[0] * (TAU * w[1] * t + w[2]).sin();
        let mut pose = Pose::identity(joint_count);
        let mut set = |j: usize, r: Vec3| {
            if j < joint_count {
                pose.rotations[j] = r;
            }
        };
        set(joints::PELVIS, Vec3::new(wave(self.bend), 0.0, 0.0));
        set(joints::SPINE, Vec3::new(0.0, wave(self.twist), 0.0));
        set(joints::LEFT_SHOULDER, Vec3::new(0.0, 0.0, wave(self.left_arm)));
        set(joints::RIGHT_SHOULDER, Vec3::new(0.0, 0.0, -wave(self.right_arm)));
        pose.translation = Vec3::new(0.0, wave(self.bounce), 0.0);
        pose
    }
}
