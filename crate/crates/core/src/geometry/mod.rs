//! Articulated body, linear blend skinning, unposing and collision push-out.

mod body;
mod collision;
mod desk;
mod mesh;
pub mod obj;
mod skinning;

pub use body::{BodyDocument, BodyModel, BodySurface, JointDocument, JointTransforms, Pose, ShapeCoefficients};
pub use collision::{check_closed, resolve_collisions, uv_sphere, ClosedMesh, SignedDistance, Sphere, SurfaceQuery};
pub use desk::{desk_body, joints};
pub use mesh::{GarmentMesh, TriangleMesh, Vec2, Vec3};
pub use skinning::{skin, unpose, SkinningWeights, MIN_BLEND_DET};
