use super::body::BodyModel;
use super::collision::uv_sphere;
use super::mesh::{TriangleMesh, Vec3};

/// Joint indices of [`desk_body`].
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const SPINE: usize = 1;
    pub const LEFT_SHOULDER: usize = 2;
    pub const RIGHT_SHOULDER: usize = 3;
}

fn ellipsoid(center: Vec3, radii: Vec3, rings: usize, segments: usize) -> TriangleMesh {
    let mut m = uv_sphere(Vec3::zeros(), 1.0, rings, segments);
    for v in &mut m.vertices {
        *v = center + v.component_mul(&radii);
    }
    m
}

fn merge(parts: Vec<TriangleMesh>) -> TriangleMesh {
    let mut out = TriangleMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
    };
    for p in parts {
        let base = out.vertices.len();
        out.vertices.extend(p.vertices);
        out.faces.extend(p.faces.into_iter().map(|f| f.map(|i| i + base)));
    }
    out
}

/// Four-joint body: pelvis (root), spine, and two shoulders, with a height
/// and a shoulder-breadth shape coefficient. The surface is an ellipsoidal
/// torso plus two ellipsoidal arms held out along `±x` (T-pose).
pub fn desk_body() -> BodyModel {
    let names = ["pelvis", "spine", "left_shoulder", "right_shoulder"].map(String::from).to_vec();
    let rest = vec![
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 1.42, 0.0),
        Vec3::new(0.18, 1.42, 0.0),
        Vec3::new(-0.18, 1.42, 0.0),
    ];
    let parent = vec![None, Some(joints::PELVIS), Some(joints::SPINE), Some(joints::SPINE)];
    let basis = vec![
        vec![Vec3::new(0.0, 0.03, 0.0), Vec3::zeros()],
        vec![Vec3::new(0.0, 0.06, 0.0), Vec3::zeros()],
        vec![Vec3::new(0.0, 0.06, 0.0), Vec3::new(0.03, 0.0, 0.0)],
        vec![Vec3::new(0.0, 0.06, 0.0), Vec3::new(-0.03, 0.0, 0.0)],
    ];
    let surface = merge(vec![
        ellipsoid(Vec3::new(0.0, 1.17, 0.0), Vec3::new(0.14, 0.33, 0.095), 16, 24),
        ellipsoid(Vec3::new(0.45, 1.42, 0.0), Vec3::new(0.25, 0.04, 0.04), 8, 12),
        ellipsoid(Vec3::new(-0.45, 1.42, 0.0), Vec3::new(0.25, 0.04, 0.04), 8, 12),
    ]);
    BodyModel::new(names, rest, parent, basis)
        .and_then(|b| b.with_surface(surface))
        .expect("desk body is well formed")
}
