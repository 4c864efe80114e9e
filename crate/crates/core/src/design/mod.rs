//! Garment designs: a procedural T-pose generator with a fixed UV layout and
//! a small MLP regressor that learns the same map from samples.

mod regressor;

use std::f64::consts::TAU;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{validation, Error, Result};
use crate::geometry::{GarmentMesh, Vec2, Vec3};

pub use regressor::{fit_design_mlp, DesignFitConfig, DesignRegressor};

/// Design parameters, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignParams {
    pub length: f64,
    pub sleeve: f64,
    pub cleavage: f64,
}

impl DesignParams {
    pub fn new(length: f64, sleeve: f64, cleavage: f64) -> Result<Self> {
        let p = DesignParams {
            length,
            sleeve,
            cleavage,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("length", self.length), ("sleeve", self.sleeve), ("cleavage", self.cleavage)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(validation!("design parameter {name} = {v} is outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.length, self.sleeve, self.cleavage]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [l, s, c] => Self::new(*l, *s, *c),
            _ => Err(validation!("design vector needs 3 values, got {}", v.len())),
        }
    }
}

/// Knobs of the procedural panel model. Lengths are in meters.
///
/// The garment is an elliptic torso tube hanging from `top_height` plus two
/// circular sleeve tubes running along `±x` from the shoulders. `length`
/// moves the hem, `sleeve` the cuffs and `cleavage` lowers the front neckline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub torso_segments: usize,
    pub torso_rows: usize,
    pub sleeve_segments: usize,
    pub sleeve_rows: usize,
    pub top_height: f64,
    pub torso_radius_x: f64,
    pub torso_radius_z: f64,
    /// Relative widening of the hem at full length.
    pub hem_flare: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub shoulder_height: f64,
    pub sleeve_root_x: f64,
    pub sleeve_radius: f64,
    /// Relative narrowing of the cuff.
    pub sleeve_taper: f64,
    pub sleeve_min: f64,
    pub sleeve_max: f64,
    pub cleavage_depth: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            torso_segments: 24,
            torso_rows: 26,
            sleeve_segments: 16,
            sleeve_rows: 12,
            top_height: 1.5,
            torso_radius_x: 0.175,
            torso_radius_z: 0.125,
            hem_flare: 0.2,
            length_min: 0.35,
            length_max: 0.75,
            shoulder_height: 1.42,
            sleeve_root_x: 0.16,
            sleeve_radius: 0.06,
            sleeve_taper: 0.15,
            sleeve_min: 0.04,
            sleeve_max: 0.45,
            cleavage_depth: 0.15,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.torso_segments < 3 || self.sleeve_segments < 3 {
            return Err(validation!("tubes need at least 3 segments"));
        }
        if self.torso_rows < 2 || self.sleeve_rows < 2 {
            return Err(validation!("tubes need at least 2 rows"));
        }
        let positive = [
            ("torso_radius_x", self.torso_radius_x),
            ("torso_radius_z", self.torso_radius_z),
            ("length_min", self.length_min),
            ("sleeve_radius", self.sleeve_radius),
            ("sleeve_min", self.sleeve_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(validation!("generator {name} must be positive, got {v}"));
            }
        }
        if self.length_max < self.length_min || self.sleeve_max < self.sleeve_min {
            return Err(validation!("generator maxima must not be below minima"));
        }
        if !(0.0..1.0).contains(&self.sleeve_taper) || self.hem_flare < 0.0 || self.cleavage_depth < 0.0 {
            return Err(validation!("generator taper, flare or cleavage depth out of range"));
        }
        // The neckline must stay above the row beneath it for every design.
        if self.length_min <= 2.0 * self.cleavage_depth {
            return Err(validation!("cleavage depth folds the neckline"));
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        (self.torso_segments + 1) * self.torso_rows + 2 * (self.sleeve_segments + 1) * self.sleeve_rows
    }
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a * (1.0 - s) + b * s
}

/// Shared topology and UV layout plus the generator that places vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignTemplate {
    generator: GeneratorParams,
    faces: Vec<[usize; 3]>,
    uv: Vec<Vec2>,
}

/// UV rectangle of one chart: `(u0, v0, u1, v1)`.
const TORSO_CHART: (f64, f64, f64, f64) = (0.02, 0.02, 0.98, 0.60);
const LEFT_SLEEVE_CHART: (f64, f64, f64, f64) = (0.02, 0.64, 0.48, 0.98);
const RIGHT_SLEEVE_CHART: (f64, f64, f64, f64) = (0.52, 0.64, 0.98, 0.98);

fn grid(
    first: usize,
    columns: usize,
    rows: usize,
    chart: (f64, f64, f64, f64),
    faces: &mut Vec<[usize; 3]>,
    uv: &mut Vec<Vec2>,
) {
    let (u0, v0, u1, v1) = chart;
    for r in 0..rows {
        for c in 0..columns {
            let s = c as f64 / (columns - 1) as f64;
            let t = r as f64 / (rows - 1) as f64;
            uv.push(Vec2::new(lerp(u0, u1, s), lerp(v0, v1, t)));
        }
    }
    let at = |r: usize, c: usize| first + r * columns + c;
    for r in 0..rows - 1 {
        for c in 0..columns - 1 {
            faces.push([at(r, c), at(r, c + 1), at(r + 1, c + 1)]);
            faces.push([at(r, c), at(r + 1, c + 1), at(r + 1, c)]);
        }
    }
}

impl Default for DesignTemplate {
    fn default() -> Self {
        DesignTemplate::new(GeneratorParams::default()).expect("default generator is valid")
    }
}

impl DesignTemplate {
    pub fn new(generator: GeneratorParams) -> Result<Self> {
        generator.validate()?;
        let mut faces = Vec::new();
        let mut uv = Vec::with_capacity(generator.vertex_count());
        let torso_cols = generator.torso_segments + 1;
        let sleeve_cols = generator.sleeve_segments + 1;
        grid(0, torso_cols, generator.torso_rows, TORSO_CHART, &mut faces, &mut uv);
        let left = uv.len();
        grid(left, sleeve_cols, generator.sleeve_rows, LEFT_SLEEVE_CHART, &mut faces, &mut uv);
        let right = uv.len();
        grid(right, sleeve_cols, generator.sleeve_rows, RIGHT_SLEEVE_CHART, &mut faces, &mut uv);
        Ok(DesignTemplate { generator, faces, uv })
    }

    pub fn generator(&self) -> &GeneratorParams {
        &self.generator
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn uv(&self) -> &[Vec2] {
        &self.uv
    }

    pub fn vertex_count(&self) -> usize {
        self.uv.len()
    }

    /// Vertex index ranges of the torso, left sleeve and right sleeve.
    pub fn parts(&self) -> [Range<usize>; 3] {
        let g = &self.generator;
        let torso = (g.torso_segments + 1) * g.torso_rows;
        let sleeve = (g.sleeve_segments + 1) * g.sleeve_rows;
        [0..torso, torso..torso + sleeve, torso + sleeve..torso + 2 * sleeve]
    }

    /// Canonical-pose vertex positions for design `p`.
    pub fn vertices(&self, p: &DesignParams) -> Result<Vec<Vec3>> {
        p.validate()?;
        let g = &self.generator;
        let mut out = Vec::with_capacity(self.vertex_count());
        let length = lerp(g.length_min, g.length_max, p.length);
        let length_frac = length / g.length_max;
        for r in 0..g.torso_rows {
            let t = r as f64 / (g.torso_rows - 1) as f64;
            let widen = 1.0 + g.hem_flare * length_frac * t * t;
            for c in 0..=g.torso_segments {
                let phi = TAU * (c % g.torso_segments) as f64 / g.torso_segments as f64;
                let front = phi.cos().max(0.0).powi(4);
                let dip = p.cleavage * g.cleavage_depth * front * (1.0 - t) * (1.0 - t);
                out.push(Vec3::new(
                    g.torso_radius_x * widen * phi.sin(),
                    g.top_height - t * length - dip,
                    g.torso_radius_z * widen * phi.cos(),
                ));
            }
        }
        let reach = lerp(g.sleeve_min, g.sleeve_max, p.sleeve);
        for side in [1.0, -1.0] {
            for r in 0..g.sleeve_rows {
                let t = r as f64 / (g.sleeve_rows - 1) as f64;
                let radius = g.sleeve_radius * (1.0 - g.sleeve_taper * t);
                let x = side * (g.sleeve_root_x + t * reach);
                for c in 0..=g.sleeve_segments {
                    let psi = TAU * (c % g.sleeve_segments) as f64 / g.sleeve_segments as f64;
                    out.push(Vec3::new(
                        x,
                        g.shoulder_height + radius * psi.cos(),
                        side * radius * psi.sin(),
                    ));
                }
            }
        }
        Ok(out)
    }
}

/// The canonical T-pose garment for design `p`; faces and UVs never depend on `p`.
pub fn design_mesh(template: &DesignTemplate, p: &DesignParams) -> Result<GarmentMesh> {
    Ok(GarmentMesh {
        vertices: template.vertices(p)?,
        faces: template.faces.clone(),
        uv: template.uv.clone(),
    })
}

const DTPL_MAGIC: &[u8; 4] = b"DTPL";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DtplHeader {
    generator: GeneratorParams,
    regressor: Option<regressor::RegressorHeader>,
}

/// Writes a template and, optionally, a fitted regressor to a `.dtpl` file.
pub fn save_dtpl(path: &Path, template: &DesignTemplate, regressor: Option<&DesignRegressor>) -> Result<()> {
    let (header, floats) = match regressor {
        Some(r) => {
            let (h, f) = r.to_parts();
            (Some(h), f)
        }
        None => (None, Vec::new()),
    };
    let header = DtplHeader {
        generator: template.generator.clone(),
        regressor: header,
    };
    container::write_file(path, DTPL_MAGIC, &header, &floats, &[])
}

pub fn load_dtpl(path: &Path) -> Result<(DesignTemplate, Option<DesignRegressor>)> {
    let c: container::Container<DtplHeader> = container::read_file(path, DTPL_MAGIC, "dtpl")?;
    let template = DesignTemplate::new(c.header.generator).map_err(|e| e.in_file(path))?;
    let regressor = match c.header.regressor {
        Some(h) => Some(DesignRegressor::from_parts(h, &c.floats).map_err(|e| e.in_file(path))?),
        None if !c.floats.is_empty() => {
            return Err(Error::Format {
                kind: "dtpl",
                msg: "weights present without a regressor header".into(),
            }
            .in_file(path))
        }
        None => None,
    };
    Ok((template, regressor))
}
