//! Point-to-mesh distance queries: exact closest point on triangle, unsigned
//! distance, and signed distance with angle-weighted pseudo-normals plus a
//! generalized-winding-number fallback where the pseudo-normal test is
//! ambiguous.

use nalgebra::Vector3;

use super::TriangleMesh;
use crate::{Error, Result};

/// Closest point on triangle (a, b, c) to p, via the Voronoi-region walk.
/// Returns the closest point and its barycentric coordinates (u, v, w)
/// with respect to (a, b, c).
pub fn closest_point_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> (Vector3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Result of a closest-point query against a whole mesh.
#[derive(Debug, Clone, Copy)]
pub struct ClosestPoint {
    pub point: Vector3<f64>,
    pub face: usize,
    pub distance: f64,
    pub barycentric: [f64; 3],
}

/// Exhaustive closest point over all faces. Meshes in this crate are small
/// (hundreds of faces), so a linear scan is the honest baseline.
pub fn closest_point_mesh(mesh: &TriangleMesh, p: &Vector3<f64>) -> ClosestPoint {
    let mut best = ClosestPoint {
        point: Vector3::zeros(),
        face: 0,
        distance: f64::INFINITY,
        barycentric: [0.0; 3],
    };
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.face_vertices(f);
        let (cp, bary) = closest_point_triangle(p, &a, &b, &c);
        let d = (p - cp).norm();
        if d < best.distance {
            best = ClosestPoint {
                point: cp,
                face: f,
                distance: d,
                barycentric: bary,
            };
        }
    }
    best
}

/// Unsigned point-to-mesh distance.
pub fn distance_to_mesh(mesh: &TriangleMesh, p: &Vector3<f64>) -> f64 {
    closest_point_mesh(mesh, p).distance
}

/// Precomputed pseudo-normals for signed-distance queries.
pub struct SignedDistanceMesh<'a> {
    pub mesh: &'a TriangleMesh,
    face_normals: Vec<Vector3<f64>>,
    vertex_normals: Vec<Vector3<f64>>,
    edge_normals: std::collections::HashMap<(u32, u32), Vector3<f64>>,
}

impl<'a> SignedDistanceMesh<'a> {
    /// Errors when the mesh is not watertight; inside/outside would be
    /// undefined.
    pub fn new(mesh: &'a TriangleMesh) -> Result<Self> {
        if !mesh.is_watertight {
            return Err(Error::NotWatertight);
        }
        let face_normals: Vec<Vector3<f64>> =
            (0..mesh.faces.len()).map(|f| mesh.face_normal(f)).collect();

        // Angle-weighted vertex pseudo-normals.
        let mut vertex_normals = vec![Vector3::zeros(); mesh.vertices.len()];
        for (fi, face) in mesh.faces.iter().enumerate() {
            let vs = mesh.face_vertices(fi);
            for k in 0..3 {
                let prev = vs[(k + 2) % 3];
                let cur = vs[k];
                let next = vs[(k + 1) % 3];
                let e0 = (next - cur).normalize();
                let e1 = (prev - cur).normalize();
                let angle = e0.dot(&e1).clamp(-1.0, 1.0).acos();
                vertex_normals[face[k] as usize] += face_normals[fi] * angle;
            }
        }
        for n in &mut vertex_normals {
            if n.norm() > 0.0 {
                *n = n.normalize();
            }
        }

        // Edge pseudo-normals: mean of the two adjacent face normals.
        let mut edge_normals: std::collections::HashMap<(u32, u32), Vector3<f64>> =
            std::collections::HashMap::new();
        for (fi, face) in mesh.faces.iter().enumerate() {
            for k in 0..3 {
                let a = face[k].min(face[(k + 1) % 3]);
                let b = face[k].max(face[(k + 1) % 3]);
                *edge_normals.entry((a, b)).or_insert_with(Vector3::zeros) += face_normals[fi];
            }
        }
        for n in edge_normals.values_mut() {
            if n.norm() > 0.0 {
                *n = n.normalize();
            }
        }

        Ok(SignedDistanceMesh {
            mesh,
            face_normals,
            vertex_normals,
            edge_normals,
        })
    }

    /// Signed distance: negative inside, positive outside. Also returns the
    /// closest surface point (for penetration-depth gradients).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> (f64, ClosestPoint) {
        let cp = closest_point_mesh(self.mesh, p);
        if cp.distance < 1e-12 {
            return (0.0, cp);
        }
        let normal = self.pseudo_normal(&cp);
        let dir = p - cp.point;
        let dot = dir.dot(&normal);
        // Near-perpendicular pseudo-normal: the sign is unreliable; fall back
        // to the generalized winding number.
        let sign = if dot.abs() < 1e-6 * dir.norm() {
            if self.winding_number(p) > 0.5 {
                -1.0
            } else {
                1.0
            }
        } else {
            dot.signum()
        };
        (sign * cp.distance, cp)
    }

    fn pseudo_normal(&self, cp: &ClosestPoint) -> Vector3<f64> {
        const EPS: f64 = 1e-9;
        let bary = cp.barycentric;
        let face = self.mesh.faces[cp.face];
        let zero: Vec<usize> = (0..3).filter(|&i| bary[i] < EPS).collect();
        match zero.len() {
            2 => {
                // Closest to a vertex.
                let k = (0..3).find(|i| !zero.contains(i)).unwrap();
                self.vertex_normals[face[k] as usize]
            }
            1 => {
                // Closest to an edge between the two non-zero corners.
                let ks: Vec<usize> = (0..3).filter(|i| !zero.contains(i)).collect();
                let a = face[ks[0]].min(face[ks[1]]);
                let b = face[ks[0]].max(face[ks[1]]);
                self.edge_normals
                    .get(&(a, b))
                    .copied()
                    .unwrap_or(self.face_normals[cp.face])
            }
            _ => self.face_normals[cp.face],
        }
    }

    /// Generalized winding number (sum of signed solid angles / 4 pi).
    pub fn winding_number(&self, p: &Vector3<f64>) -> f64 {
        let mut total = 0.0;
        for f in 0..self.mesh.faces.len() {
            let [va, vb, vc] = self.mesh.face_vertices(f);
            let a = va - p;
            let b = vb - p;
            let c = vc - p;
            let la = a.norm();
            let lb = b.norm();
            let lc = c.norm();
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }
}
