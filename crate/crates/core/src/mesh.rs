//! Triangle meshes: OBJ-subset I/O, validation, watertightness, surface
//! sampling and articulation-friendly access to faces.
//!
//! Vertex positions are stored as `f32` (matching the checkpoint container);
//! all geometric queries run in `f64`.

pub mod distance;

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Faces with area at or below this are rejected at load/validation time.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriangleMesh {
    /// Vertex positions in meters.
    pub vertices: Vec<[f32; 3]>,
    /// Vertex-index triples, zero-based.
    pub faces: Vec<[u32; 3]>,
    /// True when every edge is shared by exactly two consistently oriented faces.
    pub is_watertight: bool,
}

impl TriangleMesh {
    /// Build a mesh from raw arrays, validating indices, face areas and
    /// computing the watertight flag.
    pub fn new(vertices: Vec<[f32; 3]>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mut mesh = TriangleMesh {
            vertices,
            faces,
            is_watertight: false,
        };
        mesh.validate()?;
        mesh.is_watertight = mesh.check_watertight();
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let nv = self.vertices.len() as u32;
        for (fi, f) in self.faces.iter().enumerate() {
            for &idx in f {
                if idx >= nv {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {idx} out of {nv}"
                    )));
                }
            }
        }
        let degenerate: Vec<usize> = (0..self.faces.len())
            .filter(|&fi| self.face_area(fi) <= MIN_FACE_AREA)
            .collect();
        if !degenerate.is_empty() {
            return Err(Error::DegenerateFaces(degenerate));
        }
        Ok(())
    }

    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        let v = self.vertices[i];
        Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    /// The three corner positions of a face.
    pub fn face_vertices(&self, face: usize) -> [Vector3<f64>; 3] {
        let f = self.faces[face];
        [
            self.vertex(f[0] as usize),
            self.vertex(f[1] as usize),
            self.vertex(f[2] as usize),
        ]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.face_vertices(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_vertices(face);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for i in 0..self.vertices.len() {
            c += self.vertex(i);
        }
        c / self.vertices.len().max(1) as f64
    }

    /// Each undirected edge must appear exactly twice, once per direction.
    fn check_watertight(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 {
                return false;
            }
            if directed.get(&(b, a)) != Some(&1) {
                return false;
            }
        }
        !self.faces.is_empty()
    }

    /// Number of undirected edges (used by Euler-characteristic checks).
    pub fn edge_count(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k].min(f[(k + 1) % 3]);
                let b = f[k].max(f[(k + 1) % 3]);
                edges.insert((a, b));
            }
        }
        edges.len()
    }

    /// Deterministic area-weighted surface point sample.
    pub fn sample_surface(&self, count: usize, rng: &mut impl rand::Rng) -> Vec<Vector3<f64>> {
        let areas: Vec<f64> = (0..self.faces.len()).map(|f| self.face_area(f)).collect();
        let total: f64 = areas.iter().sum();
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a / total;
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let u: f64 = rng.gen();
                let face = cdf.partition_point(|&c| c < u).min(self.faces.len() - 1);
                let [a, b, c] = self.face_vertices(face);
                let mut r1: f64 = rng.gen();
                let mut r2: f64 = rng.gen();
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + (b - a) * r1 + (c - a) * r2
            })
            .collect()
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write;
        let path = path.as_ref();
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
        for f in &self.faces {
            out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Load a triangle mesh from an OBJ-subset file (`v` and `f` records,
/// 1-based indices, triangles only). Quads and larger polygons are rejected
/// with the offending line number.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let reader = std::io::BufReader::new(file);
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f32> = tokens
                    .map(|t| {
                        t.parse::<f32>().map_err(|_| Error::Parse {
                            line: line_no,
                            msg: format!("bad vertex coordinate '{t}'"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() < 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "vertex with fewer than 3 coordinates".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idxs: Vec<u32> = tokens
                    .map(|t| {
                        // "i", "i/j", "i/j/k" and "i//k" all resolve to the
                        // position index before the first slash.
                        let first = t.split('/').next().unwrap_or(t);
                        let v: i64 = first.parse().map_err(|_| Error::Parse {
                            line: line_no,
                            msg: format!("bad face index '{t}'"),
                        })?;
                        if v < 1 {
                            return Err(Error::Parse {
                                line: line_no,
                                msg: format!("face index {v} must be >= 1"),
                            });
                        }
                        Ok((v - 1) as u32)
                    })
                    .collect::<Result<_>>()?;
                if idxs.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("non-triangular face at line {line_no}"),
                    });
                }
                faces.push([idxs[0], idxs[1], idxs[2]]);
            }
            // Normals, texture coords, groups and materials are outside the
            // subset; skip them.
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}
