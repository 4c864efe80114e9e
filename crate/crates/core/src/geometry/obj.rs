//! Wavefront OBJ subset: `v`, `vt` and `f` records.
//!
//! Garment meshes are written with `f v/vt` corners sharing the same index,
//! since every vertex carries exactly one UV. Reading accepts `v/vt`,
//! `v/vt/vn` and negative (relative) indices; polygons are fan-triangulated.

use std::fmt::Write as _;
use std::path::Path;

use super::mesh::{GarmentMesh, TriangleMesh, Vec2, Vec3};
use crate::error::{Error, Result};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "OBJ",
        msg: msg.into(),
    }
}

struct Corner {
    v: usize,
    vt: Option<usize>,
}

struct RawObj {
    positions: Vec<Vec3>,
    texcoords: Vec<Vec2>,
    polygons: Vec<(usize, Vec<Corner>)>,
}

fn resolve_index(token: &str, count: usize, line: usize) -> Result<usize> {
    let i: i64 = token
        .parse()
        .map_err(|_| format_err(format!("line {line}: bad index {token:?}")))?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        -1
    };
    if idx < 0 || idx as usize >= count {
        return Err(format_err(format!("line {line}: index {i} out of range ({count} defined)")));
    }
    Ok(idx as usize)
}

fn parse_floats<const N: usize>(parts: &mut std::str::SplitWhitespace<'_>, line: usize) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    for slot in &mut out {
        let tok = parts
            .next()
            .ok_or_else(|| format_err(format!("line {line}: expected {N} numbers")))?;
        *slot = tok
            .parse()
            .map_err(|_| format_err(format!("line {line}: bad number {tok:?}")))?;
    }
    Ok(out)
}

fn parse(text: &str) -> Result<RawObj> {
    let mut raw = RawObj {
        positions: Vec::new(),
        texcoords: Vec::new(),
        polygons: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.split('#').next().unwrap_or("");
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => raw.positions.push(Vec3::from(parse_floats::<3>(&mut parts, lineno)?)),
            Some("vt") => raw.texcoords.push(Vec2::from(parse_floats::<2>(&mut parts, lineno)?)),
            Some("f") => {
                let mut corners = Vec::new();
                for tok in parts {
                    let mut fields = tok.split('/');
                    let v = resolve_index(fields.next().unwrap_or(""), raw.positions.len(), lineno)?;
                    let vt = match fields.next() {
                        Some(s) if !s.is_empty() => Some(resolve_index(s, raw.texcoords.len(), lineno)?),
                        _ => None,
                    };
                    corners.push(Corner { v, vt });
                }
                if corners.len() < 3 {
                    return Err(format_err(format!("line {lineno}: face with {} corners", corners.len())));
                }
                raw.polygons.push((lineno, corners));
            }
            _ => {}
        }
    }
    Ok(raw)
}

fn triangulate(raw: &RawObj) -> Vec<[usize; 3]> {
    let mut faces = Vec::new();
    for (_, poly) in &raw.polygons {
        for i in 1..poly.len() - 1 {
            faces.push([poly[0].v, poly[i].v, poly[i + 1].v]);
        }
    }
    faces
}

/// Parses a garment mesh; every face corner must carry a texture index.
pub fn parse_garment(text: &str) -> Result<GarmentMesh> {
    let raw = parse(text)?;
    let mut uv: Vec<Option<Vec2>> = vec![None; raw.positions.len()];
    for (lineno, poly) in &raw.polygons {
        for c in poly {
            let vt = c
                .vt
                .ok_or_else(|| format_err(format!("line {lineno}: face corner without a texture index (need f v/vt)")))?;
            let t = raw.texcoords[vt];
            match uv[c.v] {
                None => uv[c.v] = Some(t),
                Some(prev) if prev == t => {}
                Some(_) => {
                    return Err(format_err(format!(
                        "line {lineno}: vertex {} has more than one uv; split seam vertices",
                        c.v + 1
                    )))
                }
            }
        }
    }
    let uv = uv
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| format_err(format!("vertex {} is not referenced by any face", i + 1))))
        .collect::<Result<Vec<_>>>()?;
    let faces = triangulate(&raw);
    Ok(GarmentMesh {
        vertices: raw.positions,
        faces,
        uv,
    })
}

pub fn parse_triangle_mesh(text: &str) -> Result<TriangleMesh> {
    let raw = parse(text)?;
    let faces = triangulate(&raw);
    Ok(TriangleMesh {
        vertices: raw.positions,
        faces,
    })
}

pub fn format_garment(mesh: &GarmentMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 64);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for t in &mesh.uv {
        let _ = writeln!(s, "vt {} {}", t.x, t.y);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {0}/{0} {1}/{1} {2}/{2}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn format_triangle_mesh(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn read_garment(path: &Path) -> Result<GarmentMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_garment(&text).map_err(|e| e.in_file(path))
}

pub fn write_garment(path: &Path, mesh: &GarmentMesh) -> Result<()> {
    std::fs::write(path, format_garment(mesh)).map_err(|e| Error::from(e).in_file(path))
}

pub fn read_triangle_mesh(path: &Path) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_triangle_mesh(&text).map_err(|e| e.in_file(path))
}

pub fn write_triangle_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    std::fs::write(path, format_triangle_mesh(mesh)).map_err(|e| Error::from(e).in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quad_with_normals_and_negative_indices() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nvn 0 0 1\n\
                    f -4/-4/1 -3/-3/1 -2/-2/1 -1/-1/1\n";
        let m = parse_garment(text).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.uv[2], Vec2::new(1.0, 1.0));
    }

    #[test]
    fn missing_texture_index_is_rejected() {
        let err = parse_garment("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap_err();
        assert!(err.to_string().contains("v/vt"), "{err}");
    }

    #[test]
    fn conflicting_uv_is_rejected() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvt 0.5 0.5\nf 1/1 2/2 3/3\nf 2/2 4/4 3/4\n";
        assert!(parse_garment(text).is_err());
    }

    proptest! {
        #[test]
        fn garment_round_trip(pts in prop::collection::vec((prop::array::uniform3(-10.0..10.0f64), prop::array::uniform2(0.0..1.0f64)), 3..20)) {
            let n = pts.len();
            let mesh = GarmentMesh {
                vertices: pts.iter().map(|(p, _)| Vec3::from(*p)).collect(),
                uv: pts.iter().map(|(_, t)| Vec2::from(*t)).collect(),
                faces: (0..n - 2).map(|i| [0, i + 1, i + 2]).collect(),
            };
            let back = parse_garment(&format_garment(&mesh)).unwrap();
            prop_assert_eq!(back, mesh);
        }
    }
}
