use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{structural, validation, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Garment mesh with one UV coordinate per vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<Vec2>,
}

/// Plain triangle mesh, used for body surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

const MIN_UV_AREA: f64 = 1e-12;
const MAX_UV_OVERLAP_FRACTION: f64 = 1e-9;

pub(crate) fn tri_area_2d(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    0.5 * ((b - a).perp(&(c - a)))
}

impl GarmentMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// True when both meshes have identical faces and UVs.
    pub fn same_topology(&self, other: &GarmentMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces && self.uv == other.uv
    }

    pub fn check_same_topology(&self, other: &GarmentMesh, what: &str) -> Result<()> {
        if self.vertices.len() != other.vertices.len() {
            return Err(structural!(
                "{what}: vertex count {} differs from {}",
                other.vertices.len(),
                self.vertices.len()
            ));
        }
        if self.faces != other.faces {
            return Err(structural!("{what}: face lists differ"));
        }
        Ok(())
    }

    /// Cheap structural checks: index ranges, UV count, UV triangle areas.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.uv.len() != n {
            return Err(structural!("{} uv coordinates for {} vertices", self.uv.len(), n));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(structural!("face {fi} references a vertex >= {n}"));
            }
            let area = tri_area_2d(self.uv[f[0]], self.uv[f[1]], self.uv[f[2]]).abs();
            if area <= MIN_UV_AREA {
                return Err(validation!("uv triangle {fi} is degenerate (area {area:.3e})"));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(validation!("non-finite vertex position"));
        }
        Ok(())
    }

    /// Full validation including the pairwise UV-overlap test.
    pub fn validate_layout(&self) -> Result<()> {
        self.validate()?;
        let chart_area: f64 = self
            .faces
            .iter()
            .map(|f| tri_area_2d(self.uv[f[0]], self.uv[f[1]], self.uv[f[2]]).abs())
            .sum();
        let tris: Vec<[Vec2; 3]> = self
            .faces
            .iter()
            .map(|f| [self.uv[f[0]], self.uv[f[1]], self.uv[f[2]]])
            .collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let min_u = |t: &[Vec2; 3]| t.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_u = |t: &[Vec2; 3]| t.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        order.sort_by(|&a, &b| min_u(&tris[a]).total_cmp(&min_u(&tris[b])));
        for (k, &i) in order.iter().enumerate() {
            let hi = max_u(&tris[i]);
            for &j in &order[k + 1..] {
                if min_u(&tris[j]) >= hi {
                    break;
                }
                let overlap = triangle_overlap_area(&tris[i], &tris[j]);
                if overlap > MAX_UV_OVERLAP_FRACTION * chart_area {
                    return Err(validation!(
                        "uv triangles {i} and {j} overlap (area {overlap:.3e})"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Intersection area of two triangles via Sutherland-Hodgman clipping.
fn triangle_overlap_area(a: &[Vec2; 3], b: &[Vec2; 3]) -> f64 {
    let ccw = |t: &[Vec2; 3]| {
        if tri_area_2d(t[0], t[1], t[2]) < 0.0 {
            [t[0], t[2], t[1]]
        } else {
            *t
        }
    };
    let (a, b) = (ccw(a), ccw(b));
    let mut poly: Vec<Vec2> = a.to_vec();
    for e in 0..3 {
        let (p, q) = (b[e], b[(e + 1) % 3]);
        let inside = |x: &Vec2| (q - p).perp(&(x - p)) >= 0.0;
        let input = std::mem::take(&mut poly);
        for (i, cur) in input.iter().enumerate() {
            let prev = input[(i + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(cur), inside(&prev));
            if ci != pi {
                let d1 = (q - p).perp(&(prev - p));
                let d2 = (q - p).perp(&(cur - p));
                let t = d1 / (d1 - d2);
                poly.push(prev + (cur - prev) * t);
            }
            if ci {
                poly.push(*cur);
            }
        }
        if poly.len() < 3 {
            return 0.0;
        }
    }
    let mut area = 0.0;
    for i in 0..poly.len() {
        area += poly[i].perp(&poly[(i + 1) % poly.len()]);
    }
    0.5 * area.abs()
}

impl TriangleMesh {
    pub fn validate_indices(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(structural!("face {fi} references a vertex >= {n}"));
            }
        }
        Ok(())
    }
}
