use std::collections::HashMap;

use super::mesh::{GarmentMesh, TriangleMesh, Vec3};
use crate::error::{validation, Result};

/// Nearest-surface query result. `distance` is negative inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceQuery {
    pub distance: f64,
    pub closest: Vec3,
    /// Outward unit normal at `closest`.
    pub normal: Vec3,
}

/// A closed surface with a signed distance.
pub trait SignedDistance {
    fn query(&self, p: &Vec3) -> SurfaceQuery;
}

/// Analytic sphere; handy as an exact reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl SignedDistance for Sphere {
    fn query(&self, p: &Vec3) -> SurfaceQuery {
        let d = p - self.center;
        let r = d.norm();
        let normal = if r > 0.0 { d / r } else { Vec3::z() };
        SurfaceQuery {
            distance: r - self.radius,
            closest: self.center + normal * self.radius,
            normal,
        }
    }
}

/// Rejects meshes that are not closed and consistently oriented: every
/// directed edge must appear exactly once and its reverse exactly once.
pub fn check_closed(mesh: &TriangleMesh) -> Result<()> {
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for f in &mesh.faces {
        for e in 0..3 {
            *directed.entry((f[e], f[(e + 1) % 3])).or_default() += 1;
        }
    }
    for (&(a, b), &count) in &directed {
        if count != 1 {
            return Err(validation!("body surface edge ({a}, {b}) is used {count} times in one direction"));
        }
        if directed.get(&(b, a)) != Some(&1) {
            return Err(validation!("body surface is open or inconsistently oriented at edge ({a}, {b})"));
        }
    }
    if mesh.faces.is_empty() {
        return Err(validation!("body surface has no faces"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Feature {
    Vertex(usize),
    Edge(usize, usize),
    Face,
}

/// Closed triangle mesh with angle-weighted pseudonormals for robust signs.
#[derive(Debug, Clone)]
pub struct ClosedMesh {
    mesh: TriangleMesh,
    face_normals: Vec<Vec3>,
    vertex_normals: Vec<Vec3>,
    edge_normals: HashMap<(usize, usize), Vec3>,
    /// Per-face bounding spheres (center, radius) for pruning.
    bounds: Vec<(Vec3, f64)>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ClosedMesh {
    pub fn new(mesh: TriangleMesh) -> Result<Self> {
        mesh.validate_indices()?;
        check_closed(&mesh)?;
        let mut face_normals = Vec::with_capacity(mesh.faces.len());
        let mut vertex_normals = vec![Vec3::zeros(); mesh.vertices.len()];
        let mut edge_normals: HashMap<(usize, usize), Vec3> = HashMap::new();
        let mut bounds = Vec::with_capacity(mesh.faces.len());
        for f in &mesh.faces {
            let p = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
            let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let n = if n.norm() > 0.0 { n.normalize() } else { n };
            for k in 0..3 {
                let e1 = p[(k + 1) % 3] - p[k];
                let e2 = p[(k + 2) % 3] - p[k];
                let angle = if e1.norm() > 0.0 && e2.norm() > 0.0 {
                    e1.angle(&e2)
                } else {
                    0.0
                };
                vertex_normals[f[k]] += n * angle;
                *edge_normals.entry(edge_key(f[k], f[(k + 1) % 3])).or_insert_with(Vec3::zeros) += n;
            }
            let c = (p[0] + p[1] + p[2]) / 3.0;
            let r = p.iter().map(|q| (q - c).norm()).fold(0.0, f64::max);
            bounds.push((c, r));
            face_normals.push(n);
        }
        Ok(ClosedMesh {
            mesh,
            face_normals,
            vertex_normals,
            edge_normals,
            bounds,
        })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    fn feature_normal(&self, face: usize, feature: Feature) -> Vec3 {
        match feature {
            Feature::Face => self.face_normals[face],
            Feature::Edge(a, b) => self.edge_normals[&edge_key(a, b)],
            Feature::Vertex(v) => self.vertex_normals[v],
        }
    }
}

/// Closest point on triangle `abc` (Ericson, Real-Time Collision Detection 5.1.5).
fn closest_on_triangle(p: &Vec3, idx: [usize; 3], a: Vec3, b: Vec3, c: Vec3) -> (Vec3, Feature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, Feature::Vertex(idx[0]));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, Feature::Vertex(idx[1]));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Feature::Edge(idx[0], idx[1]));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, Feature::Vertex(idx[2]));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Feature::Edge(idx[0], idx[2]));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Feature::Edge(idx[1], idx[2]));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Feature::Face)
}

impl SignedDistance for ClosedMesh {
    fn query(&self, p: &Vec3) -> SurfaceQuery {
        let mut best = (f64::INFINITY, Vec3::zeros(), 0usize, Feature::Face);
        for (fi, f) in self.mesh.faces.iter().enumerate() {
            let (c, r) = self.bounds[fi];
            let lower = ((p - c).norm() - r).max(0.0);
            if lower * lower > best.0 {
                continue;
            }
            let v = &self.mesh.vertices;
            let (q, feat) = closest_on_triangle(p, *f, v[f[0]], v[f[1]], v[f[2]]);
            let d2 = (p - q).norm_squared();
            if d2 < best.0 {
                best = (d2, q, fi, feat);
            }
        }
        let (d2, closest, face, feature) = best;
        let pseudo = self.feature_normal(face, feature);
        let offset = p - closest;
        let inside = offset.dot(&pseudo) < 0.0;
        let dist = d2.sqrt();
        let normal = if dist > 1e-12 {
            if inside {
                -offset / dist
            } else {
                offset / dist
            }
        } else if pseudo.norm() > 0.0 {
            pseudo.normalize()
        } else {
            self.face_normals[face]
        };
        SurfaceQuery {
            distance: if inside { -dist } else { dist },
            closest,
            normal,
        }
    }
}

/// Maximum push-out passes per vertex; more than one only matters where
/// separate surface components lie within `epsilon` of each other.
const MAX_PUSH_PASSES: usize = 8;

/// Moves every vertex closer than `epsilon` to (or inside) the surface onto
/// `closest + epsilon * normal`. Vertices already at least `epsilon` outside
/// are left bit-identical.
pub fn resolve_collisions(
    garment: &GarmentMesh,
    body: &dyn SignedDistance,
    epsilon: f64,
) -> Result<GarmentMesh> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(validation!("collision epsilon must be a finite non-negative distance, got {epsilon}"));
    }
    let mut out = garment.clone();
    for v in &mut out.vertices {
        for _ in 0..MAX_PUSH_PASSES {
            let q = body.query(v);
            if q.distance >= epsilon {
                break;
            }
            *v = q.closest + q.normal * epsilon;
        }
    }
    Ok(out)
}

/// UV sphere with poles; closed and outward oriented.
pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let mut vertices = vec![center + Vec3::new(0.0, radius, 0.0)];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let theta = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(
                center + Vec3::new(phi.sin() * theta.cos(), phi.cos(), -phi.sin() * theta.sin()) * radius,
            );
        }
    }
    vertices.push(center - Vec3::new(0.0, radius, 0.0));
    let south = vertices.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    TriangleMesh { vertices, faces }
}
