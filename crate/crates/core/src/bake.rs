//! UV displacement textures: baking canonical-space offsets into texels,
//! sampling them back at arbitrary UVs and rebuilding posed garments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::design::{design_mesh, DesignParams, DesignTemplate};
use crate::error::{structural, validation, Error, Result};
use crate::geometry::{skin, unpose, BodyModel, GarmentMesh, Pose, ShapeCoefficients, SkinningWeights, Vec2, Vec3};
use crate::nn::Tensor;

/// Square grid of 3D offsets (meters) with a coverage mask.
///
/// Texel `(i, j)` sits at row `j`, column `i`, with its center at
/// `((i + 0.5) / W, (j + 0.5) / H)` in UV space.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementTexture {
    width: usize,
    height: usize,
    offsets: Vec<Vec3>,
    mask: Vec<bool>,
}

impl DisplacementTexture {
    /// All-zero texture with an empty mask.
    pub fn zeros(resolution: usize) -> Self {
        DisplacementTexture {
            width: resolution,
            height: resolution,
            offsets: vec![Vec3::zeros(); resolution * resolution],
            mask: vec![false; resolution * resolution],
        }
    }

    pub fn new(width: usize, height: usize, offsets: Vec<Vec3>, mask: Vec<bool>) -> Result<Self> {
        let tex = DisplacementTexture {
            width,
            height,
            offsets,
            mask,
        };
        tex.validate()?;
        Ok(tex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width != self.height {
            return Err(validation!("texture must be square and non-empty, got {}x{}", self.width, self.height));
        }
        let n = self.width * self.height;
        if self.offsets.len() != n || self.mask.len() != n {
            return Err(structural!("texture buffers do not match {}x{}", self.width, self.height));
        }
        for (k, (o, &m)) in self.offsets.iter().zip(&self.mask).enumerate() {
            if !o.iter().all(|x| x.is_finite()) {
                return Err(validation!("texel {k} holds a non-finite offset"));
            }
            if !m && *o != Vec3::zeros() {
                return Err(validation!("uncovered texel {k} holds a non-zero offset"));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> usize {
        self.width
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn texel(&self, i: usize, j: usize) -> Vec3 {
        self.offsets[j * self.width + i]
    }

    pub fn covered(&self, i: usize, j: usize) -> bool {
        self.mask[j * self.width + i]
    }

    /// Same mask, new offsets; uncovered texels are forced to zero.
    pub fn with_offsets(&self, offsets: Vec<Vec3>) -> Result<Self> {
        if offsets.len() != self.offsets.len() {
            return Err(structural!("{} offsets for {} texels", offsets.len(), self.offsets.len()));
        }
        let offsets = offsets
            .into_iter()
            .zip(&self.mask)
            .map(|(o, &m)| if m { o } else { Vec3::zeros() })
            .collect();
        DisplacementTexture::new(self.width, self.height, offsets, self.mask.clone())
    }

    /// Channel-major `[3, H, W]` tensor in normalized units; uncovered texels are zero.
    pub fn to_normalized(&self, norm: &NormalizationSpec) -> Tensor<f32> {
        let n = self.width * self.height;
        let mut data = vec![0f32; 3 * n];
        for (k, (o, &m)) in self.offsets.iter().zip(&self.mask).enumerate() {
            if m {
                let y = norm.normalize(o);
                for c in 0..3 {
                    data[c * n + k] = y[c] as f32;
                }
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("sized")
    }

    /// Inverse of [`to_normalized`](Self::to_normalized) under `mask`.
    pub fn from_normalized(t: &Tensor<f32>, mask: &[bool], norm: &NormalizationSpec) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] * shape[2] != mask.len() {
            return Err(structural!("normalized texture shape {shape:?} does not fit a mask of {}", mask.len()));
        }
        let n = mask.len();
        let d = t.data();
        let offsets = (0..n)
            .map(|k| {
                if mask[k] {
                    norm.denormalize(&Vec3::new(d[k] as f64, d[n + k] as f64, d[2 * n + k] as f64))
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
        DisplacementTexture::new(shape[2], shape[1], offsets, mask.to_vec())
    }
}

/// Affine map between meters and the model's value range:
/// `normalized = (offset - offset_center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub scale: f64,
    pub offset_center: [f64; 3],
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            scale: 1.0,
            offset_center: [0.0; 3],
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) || !self.offset_center.iter().all(|c| c.is_finite()) {
            return Err(validation!("normalization scale must be positive and finite, got {}", self.scale));
        }
        Ok(())
    }

    /// Per-channel midrange center and the largest deviation from it as the
    /// scale, over covered texels of every texture. The extreme offset maps to
    /// exactly ±1.
    pub fn fit<'a>(textures: impl IntoIterator<Item = &'a DisplacementTexture>) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut covered = Vec::new();
        for t in textures {
            for (o, &m) in t.offsets.iter().zip(&t.mask) {
                if m {
                    for c in 0..3 {
                        lo[c] = lo[c].min(o[c]);
                        hi[c] = hi[c].max(o[c]);
                    }
                    covered.push(*o);
                }
            }
        }
        if covered.is_empty() {
            return Err(validation!("cannot fit a normalization without covered texels"));
        }
        let center: [f64; 3] = std::array::from_fn(|c| 0.5 * (lo[c] + hi[c]));
        let scale = covered
            .iter()
            .flat_map(|o| (0..3).map(move |c| (o[c] - center[c]).abs()))
            .fold(0.0, f64::max);
        Ok(NormalizationSpec {
            scale: if scale > 0.0 { scale } else { 1.0 },
            offset_center: center,
        })
    }

    pub fn normalize(&self, o: &Vec3) -> Vec3 {
        (o - Vec3::from(self.offset_center)) / self.scale
    }

    pub fn denormalize(&self, y: &Vec3) -> Vec3 {
        y * self.scale + Vec3::from(self.offset_center)
    }
}

fn barycentric(p: Vec2, a: Vec2, b: Vec2, c: Vec2) -> Option<[f64; 3]> {
    let det = (b - a).perp(&(c - a));
    if det == 0.0 {
        return None;
    }
    let l1 = (p - a).perp(&(c - a)) / det;
    let l2 = (b - a).perp(&(p - a)) / det;
    Some([1.0 - l1 - l2, l1, l2])
}

/// Tolerance on barycentric coordinates so texel centers on shared edges are
/// not lost to rounding. Overlap-free layouts make the winner irrelevant
/// because both triangles interpolate the same edge values.
const INSIDE_TOL: f64 = 1e-12;

/// Rasterizes per-vertex values into texels whose centers fall inside UV triangles.
pub fn rasterize(mesh_uv: &[Vec2], faces: &[[usize; 3]], values: &[Vec3], resolution: usize) -> Result<DisplacementTexture> {
    if resolution == 0 {
        return Err(validation!("texture resolution must be positive"));
    }
    if values.len() != mesh_uv.len() {
        return Err(structural!("{} values for {} uv coordinates", values.len(), mesh_uv.len()));
    }
    let r = resolution as f64;
    let mut tex = DisplacementTexture::zeros(resolution);
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().any(|&i| i >= mesh_uv.len()) {
            return Err(structural!("face {fi} indexes past the uv list"));
        }
        let [a, b, c] = f.map(|i| mesh_uv[i]);
        let range = |lo: f64, hi: f64| {
            let first = ((lo * r - 0.5).ceil().max(0.0)) as usize;
            let last = ((hi * r - 0.5).floor().min(r - 1.0)).max(-1.0);
            (first, last)
        };
        let (i0, i1) = range(a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x));
        let (j0, j1) = range(a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
        if i1 < 0.0 || j1 < 0.0 {
            continue;
        }
        for j in j0..=j1 as usize {
            for i in i0..=i1 as usize {
                let k = j * resolution + i;
                if tex.mask[k] {
                    continue;
                }
                let p = Vec2::new((i as f64 + 0.5) / r, (j as f64 + 0.5) / r);
                let Some(l) = barycentric(p, a, b, c) else {
                    continue;
                };
                if l.iter().all(|&x| x >= -INSIDE_TOL) {
                    tex.mask[k] = true;
                    tex.offsets[k] = values[f[0]] * l[0] + values[f[1]] * l[1] + values[f[2]] * l[2];
                }
            }
        }
    }
    Ok(tex)
}

/// Unposes `sim_frame`, takes per-vertex offsets from `template_canonical`
/// and rasterizes them over the shared UV layout.
#[allow(clippy::too_many_arguments)]
pub fn bake(
    sim_frame: &GarmentMesh,
    template_canonical: &GarmentMesh,
    weights: &SkinningWeights,
    body: &BodyModel,
    shape: &ShapeCoefficients,
    pose: &Pose,
    resolution: usize,
) -> Result<DisplacementTexture> {
    template_canonical.check_same_topology(sim_frame, "baked frame")?;
    if sim_frame.uv != template_canonical.uv {
        return Err(structural!("baked frame: uv layout differs from the template"));
    }
    let canonical = unpose(sim_frame, weights, body, shape, pose)?;
    let offsets: Vec<Vec3> = canonical
        .vertices
        .iter()
        .zip(&template_canonical.vertices)
        .map(|(v, t)| v - t)
        .collect();
    rasterize(&template_canonical.uv, &template_canonical.faces, &offsets, resolution)
}

const SNAP: f64 = 1e-9;

fn split(coord: f64, size: usize) -> (isize, f64) {
    let x = coord * size as f64 - 0.5;
    let base = x.floor();
    let mut frac = x - base;
    let mut base = base as isize;
    if frac < SNAP {
        frac = 0.0;
    } else if frac > 1.0 - SNAP {
        frac = 0.0;
        base += 1;
    }
    (base, frac)
}

/// Mask-aware bilinear lookup; uncovered neighbors drop out and the
/// remaining weights are renormalized.
pub fn sample_texture(tex: &DisplacementTexture, uv: Vec2) -> Result<Vec3> {
    if !(0.0..=1.0).contains(&uv.x) || !(0.0..=1.0).contains(&uv.y) {
        return Err(validation!("uv ({}, {}) outside the unit square", uv.x, uv.y));
    }
    let (i0, fx) = split(uv.x, tex.width);
    let (j0, fy) = split(uv.y, tex.height);
    let mut acc = Vec3::zeros();
    let mut total = 0.0;
    for (dj, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wx * wy;
            let (i, j) = (i0 + di, j0 + dj);
            if w == 0.0 || i < 0 || j < 0 || i as usize >= tex.width || j as usize >= tex.height {
                continue;
            }
            if tex.covered(i as usize, j as usize) {
                acc += tex.texel(i as usize, j as usize) * w;
                total += w;
            }
        }
    }
    Ok(if total > 0.0 { acc / total } else { Vec3::zeros() })
}

/// `design_mesh(p) + φ(tex)`, posed by linear blend skinning.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_garment(
    tex: &DisplacementTexture,
    template: &DesignTemplate,
    p: &DesignParams,
    weights: &SkinningWeights,
    body: &BodyModel,
    shape: &ShapeCoefficients,
    pose: &Pose,
) -> Result<GarmentMesh> {
    tex.validate()?;
    let mut canonical = design_mesh(template, p)?;
    for (v, uv) in canonical.vertices.iter_mut().zip(&canonical.uv) {
        *v += sample_texture(tex, *uv)?;
    }
    skin(&canonical, weights, body, shape, pose)
}

/// 8-bit RGB preview: normalized values in `[-1, 1]` map to `[0, 255]`,
/// uncovered texels are black. Rows run top to bottom in increasing `v`.
pub fn preview_rgb(tex: &DisplacementTexture, norm: &NormalizationSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(tex.offsets.len() * 3);
    for (o, &m) in tex.offsets.iter().zip(&tex.mask) {
        if m {
            let y = norm.normalize(o);
            out.extend(y.iter().map(|&c| ((c.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
        } else {
            out.extend([0, 0, 0]);
        }
    }
    out
}

/// Contents of a `.disp` file.
#[derive(Debug, Clone, PartialEq)]
pub struct DispFile {
    pub texture: DisplacementTexture,
    pub normalization: Option<NormalizationSpec>,
    /// Free-form origin record (design, sequence, frame, ...).
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

const DISP_MAGIC: &[u8; 4] = b"DISP";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DispHeader {
    width: usize,
    height: usize,
    normalization: Option<NormalizationSpec>,
    provenance: serde_json::Map<String, serde_json::Value>,
}

/// Writes offsets as float32 in `(row, column, channel)` order followed by
/// the LSB-first packed mask.
pub fn write_disp(path: &Path, file: &DispFile) -> Result<()> {
    let t = &file.texture;
    let header = DispHeader {
        width: t.width,
        height: t.height,
        normalization: file.normalization,
        provenance: file.provenance.clone(),
    };
    let floats: Vec<f32> = t.offsets.iter().flat_map(|o| o.iter().map(|&x| x as f32)).collect();
    container::write_file(path, DISP_MAGIC, &header, &floats, &container::pack_bits(&t.mask))
}

pub fn read_disp(path: &Path) -> Result<DispFile> {
    let c: container::Container<DispHeader> = container::read_file(path, DISP_MAGIC, "disp")?;
    let h = c.header;
    let n = h.width * h.height;
    let bad = |msg: String| Error::Format { kind: "disp", msg }.in_file(path);
    if c.floats.len() != 3 * n {
        return Err(bad(format!("{} floats for {}x{} texels", c.floats.len(), h.width, h.height)));
    }
    let mask = container::unpack_bits(&c.tail, n).ok_or_else(|| bad("mask size mismatch".into()))?;
    let offsets = c
        .floats
        .chunks_exact(3)
        .map(|o| Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64))
        .collect();
    if let Some(norm) = &h.normalization {
        norm.validate().map_err(|e| e.in_file(path))?;
    }
    let texture = DisplacementTexture::new(h.width, h.height, offsets, mask).map_err(|e| e.in_file(path))?;
    Ok(DispFile {
        texture,
        normalization: h.normalization,
        provenance: h.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use proptest::prelude::*;

    /// Unit quad `[0.1, 0.9]^2` split along its diagonal, flat in z = 0.
    fn quad() -> GarmentMesh {
        let uv = vec![
            Vec2::new(0.1, 0.1),
            Vec2::new(0.9, 0.1),
            Vec2::new(0.9, 0.9),
            Vec2::new(0.1, 0.9),
        ];
        GarmentMesh {
            vertices: uv.iter().map(|t| Vec3::new(t.x, t.y, 0.0)).collect(),
            faces: vec![[0, 1, 2], [0, 2, 3]],
            uv,
        }
    }

    fn one_joint() -> BodyModel {
        BodyModel::new(vec!["root".into()], vec![Vec3::zeros()], vec![None], vec![vec![]]).unwrap()
    }

    fn bake_identity(frame: &GarmentMesh, template: &GarmentMesh, res: usize) -> DisplacementTexture {
        let body = one_joint();
        let w = SkinningWeights::rigid(template.vertex_count(), 0);
        bake(frame, template, &w, &body, &ShapeCoefficients::zeros(0), &Pose::identity(1), res).unwrap()
    }

    #[test]
    fn undeformed_bakes_to_zero() {
        let q = quad();
        let tex = bake_identity(&q, &q, 32);
        assert!(tex.offsets.iter().all(|o| *o == Vec3::zeros()));
        // Coverage is exactly the texel centers inside [0.1, 0.9]^2.
        for j in 0..32 {
            for i in 0..32 {
                let c = |k: usize| (k as f64 + 0.5) / 32.0;
                let inside = (0.1..=0.9).contains(&c(i)) && (0.1..=0.9).contains(&c(j));
                assert_eq!(tex.covered(i, j), inside, "texel {i},{j}");
            }
        }
    }

    #[test]
    fn constant_offset_fills_every_texel() {
        let q = quad();
        let d = Vec3::new(0.01, -0.02, 0.003);
        let mut moved = q.clone();
        moved.vertices.iter_mut().for_each(|v| *v += d);
        let tex = bake_identity(&moved, &q, 32);
        for (o, &m) in tex.offsets.iter().zip(&tex.mask) {
            if m {
                assert!((o - d).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn single_vertex_hat_function() {
        let q = quad();
        let mut moved = q.clone();
        moved.vertices[2].z += 1.0;
        let tex = bake_identity(&moved, &q, 64);
        let mut checked = 0;
        for j in 0..64 {
            for i in 0..64 {
                if !tex.covered(i, j) {
                    continue;
                }
                let u = (i as f64 + 0.5) / 64.0;
                let v = (j as f64 + 0.5) / 64.0;
                // Vertex 2 is shared by both triangles; its hat on this split is
                // min(s, t) with s, t the normalized coordinates.
                let s = (u - 0.1) / 0.8;
                let t = (v - 0.1) / 0.8;
                let hat = s.min(t);
                assert!((tex.texel(i, j).z - hat).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn sampling_at_centers_and_midpoints() {
        let mut tex = DisplacementTexture::zeros(8);
        let a = Vec3::new(1.0, 2.0, 3.0);
        let b = Vec3::new(-1.0, 0.5, 0.25);
        tex.mask[3 * 8 + 2] = true;
        tex.offsets[3 * 8 + 2] = a;
        tex.mask[3 * 8 + 3] = true;
        tex.offsets[3 * 8 + 3] = b;
        assert_eq!(sample_texture(&tex, Vec2::new(2.5 / 8.0, 3.5 / 8.0)).unwrap(), a);
        assert_eq!(sample_texture(&tex, Vec2::new(3.5 / 8.0, 3.5 / 8.0)).unwrap(), b);
        let mid = sample_texture(&tex, Vec2::new(3.0 / 8.0, 3.5 / 8.0)).unwrap();
        assert!((mid - (a + b) / 2.0).norm() < 1e-7);
        // Off-row neighbors are uncovered and must not dilute the value.
        let off = sample_texture(&tex, Vec2::new(3.0 / 8.0, 3.8 / 8.0)).unwrap();
        assert!((off - (a + b) / 2.0).norm() < 1e-7);
        assert_eq!(sample_texture(&tex, Vec2::new(0.9, 0.1)).unwrap(), Vec3::zeros());
        assert!(sample_texture(&tex, Vec2::new(1.2, 0.1)).unwrap_err().is_validation());
    }

    #[test]
    fn linear_field_sampling() {
        use rand::{Rng, SeedableRng};
        let q = quad();
        let field = |t: Vec2| Vec3::new(0.3 * t.x - 0.1 * t.y, 0.05 * t.y, 0.2 * t.x + 0.2 * t.y);
        let lipschitz = 0.2f64.hypot(0.2).max(0.3f64.hypot(0.1));
        let mut moved = q.clone();
        for (v, t) in moved.vertices.iter_mut().zip(&q.uv) {
            *v += field(*t);
        }
        let res = 64;
        let tex = bake_identity(&moved, &q, res);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = Vec2::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let err = (sample_texture(&tex, t).unwrap() - field(t)).norm();
            assert!(err < 2.0 * lipschitz / res as f64, "{err}");
        }
    }

    #[test]
    fn reconstruct_with_zero_and_constant_textures() {
        let template = DesignTemplate::default();
        let p = DesignParams::new(0.4, 0.6, 0.3).unwrap();
        let base = design_mesh(&template, &p).unwrap();
        let body = one_joint();
        let w = SkinningWeights::rigid(base.vertex_count(), 0);
        let shape = ShapeCoefficients::zeros(0);
        let pose = Pose {
            rotations: vec![Vec3::new(0.0, 0.4, 0.1)],
            translation: Vec3::new(0.1, 0.0, 0.0),
        };
        let zero = DisplacementTexture::zeros(32);
        let rec = reconstruct_garment(&zero, &template, &p, &w, &body, &shape, &pose).unwrap();
        assert_eq!(rec, skin(&base, &w, &body, &shape, &pose).unwrap());

        let d = Vec3::new(0.004, -0.002, 0.001);
        let covered = rasterize(&base.uv, &base.faces, &vec![d; base.vertex_count()], 32).unwrap();
        let rec = reconstruct_garment(&covered, &template, &p, &w, &body, &shape, &Pose::identity(1)).unwrap();
        for (a, b) in rec.vertices.iter().zip(&base.vertices) {
            assert!((a - b - d).norm() < 1e-12);
        }
    }

    #[test]
    fn normalization_hits_unit_extreme() {
        let mut tex = DisplacementTexture::zeros(4);
        tex.mask[..3].fill(true);
        tex.offsets[0] = Vec3::new(0.01, 0.0, -0.02);
        tex.offsets[1] = Vec3::new(0.03, 0.01, 0.0);
        tex.offsets[2] = Vec3::new(-0.01, 0.005, 0.004);
        let norm = NormalizationSpec::fit([&tex]).unwrap();
        let max = tex.offsets[..3]
            .iter()
            .flat_map(|o| norm.normalize(o).iter().map(|c| c.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        let t = tex.to_normalized(&norm);
        assert_eq!(t.shape(), &[3, 4, 4]);
        let back = DisplacementTexture::from_normalized(&t, tex.mask(), &norm).unwrap();
        for (a, b) in back.offsets.iter().zip(&tex.offsets) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn disp_round_trip() {
        let q = quad();
        let mut moved = q.clone();
        moved.vertices[1].x += 0.25;
        let tex = bake_identity(&moved, &q, 16);
        let mut provenance = serde_json::Map::new();
        provenance.insert("frame".into(), 3.into());
        let file = DispFile {
            texture: tex,
            normalization: Some(NormalizationSpec {
                scale: 0.5,
                offset_center: [0.0, 0.1, 0.0],
            }),
            provenance,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.disp");
        write_disp(&path, &file).unwrap();
        let back = read_disp(&path).unwrap();
        assert_eq!(back.texture.mask, file.texture.mask);
        assert_eq!(back.normalization, file.normalization);
        assert_eq!(back.provenance, file.provenance);
        for (a, b) in back.texture.offsets.iter().zip(&file.texture.offsets) {
            assert!((a - b).norm() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn bake_is_linear_in_offsets(
            a in prop::collection::vec(prop::array::uniform3(-0.05..0.05f64), 4),
            b in prop::collection::vec(prop::array::uniform3(-0.05..0.05f64), 4),
        ) {
            let q = quad();
            let shifted = |d: &dyn Fn(usize) -> Vec3| {
                let mut m = q.clone();
                m.vertices.iter_mut().enumerate().for_each(|(i, v)| *v += d(i));
                bake_identity(&m, &q, 24)
            };
            let ta = shifted(&|i| Vec3::from(a[i]));
            let tb = shifted(&|i| Vec3::from(b[i]));
            let tab = shifted(&|i| Vec3::from(a[i]) + Vec3::from(b[i]));
            for k in 0..ta.offsets.len() {
                prop_assert!((ta.offsets[k] + tb.offsets[k] - tab.offsets[k]).norm() < 1e-6);
            }
        }
    }
}
