//! Gaussian kernels anchored on triangle-mesh faces.
//!
//! Each kernel lives on one face, positioned by barycentric weights beta.
//! Its frame is derived from the face geometry: the first rotation axis is
//! the face normal, the second points from the face center toward the first
//! vertex, the third completes the right-handed basis. In-plane standard
//! deviations come from the face size times a trainable scale factor; the
//! normal-direction deviation is a fixed thin-shell thickness so splats hug
//! the surface.

pub mod checkpoint;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::math::project_simplex;
use crate::mesh::TriangleMesh;
use crate::{Error, Result};

/// Standard deviation along the face normal (meters): splats are thin shells.
pub const NORMAL_SHELL_SIGMA: f64 = 1e-4;
/// All face-derived standard deviations are floored here (meters).
pub const MIN_SCALE: f64 = 1e-8;

/// One Gaussian kernel anchored on a mesh face.
///
/// Trainable parameters are stored as `f32`, matching the checkpoint
/// container byte-for-byte; all derived geometry is computed in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGaussian {
    pub face_id: u32,
    /// Barycentric weights; non-negative, summing to 1 within 1e-6.
    pub beta: [f32; 3],
    /// Positive multiplier on the face-derived in-plane scales.
    pub scale_factor: f32,
    /// Spherical-harmonics color coefficients, (degree+1)^2 RGB triples.
    pub sh_coeffs: Vec<[f32; 3]>,
    /// Opacity in (0, 1).
    pub opacity: f32,
}

impl SurfaceGaussian {
    pub fn validate(&self) -> Result<()> {
        let sum: f32 = self.beta.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.beta.iter().any(|&b| b < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta {:?} not on the simplex",
                self.beta
            )));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "opacity {} outside (0,1)",
                self.opacity
            )));
        }
        if self.scale_factor <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "scale_factor {} must be > 0",
                self.scale_factor
            )));
        }
        Ok(())
    }

    pub fn beta_f64(&self) -> [f64; 3] {
        [
            self.beta[0] as f64,
            self.beta[1] as f64,
            self.beta[2] as f64,
        ]
    }
}

/// Derived per-kernel frame: center, orientation, per-axis deviations and
/// the assembled covariance.
///
/// `axis_scales[i]` is the standard deviation along rotation column `i`:
/// index 0 pairs with the face normal (the thin-shell sigma), indices 1 and
/// 2 with the two in-plane axes.
#[derive(Debug, Clone, Copy)]
pub struct GaussianFrame {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub axis_scales: [f64; 3],
    pub covariance: Matrix3<f64>,
}

/// A constant-count collection of kernels over one mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<SurfaceGaussian>,
    pub mesh: TriangleMesh,
    pub kernels_per_face: usize,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.len() != self.kernels_per_face * self.mesh.faces.len() {
            return Err(Error::InvalidParameter(format!(
                "kernel count {} != k {} x faces {}",
                self.gaussians.len(),
                self.kernels_per_face,
                self.mesh.faces.len()
            )));
        }
        for g in &self.gaussians {
            g.validate()?;
            if g.face_id as usize >= self.mesh.faces.len() {
                return Err(Error::InvalidParameter(format!(
                    "face id {} out of range",
                    g.face_id
                )));
            }
            if g.sh_coeffs.len() != (self.sh_degree + 1) * (self.sh_degree + 1) {
                return Err(Error::InvalidParameter("sh coefficient count".into()));
            }
        }
        Ok(())
    }

    /// Frame of kernel `i` under the cloud's current vertex positions.
    pub fn frame(&self, i: usize) -> GaussianFrame {
        let g = &self.gaussians[i];
        let v = self.mesh.face_vertices(g.face_id as usize);
        build_frame(&v, &g.beta_f64(), g.scale_factor as f64).frame
    }
}

/// Fixed barycentric patterns for two kernels per face.
const K2_PATTERNS: [[f64; 3]; 2] = [[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]];

/// Place `k` kernels on every face of the mesh.
///
/// k = 1 uses the centroid; k = 2 the two fixed symmetric triples; further
/// kernels draw seeded random interior points so the layout stays
/// reproducible. Opacity starts at 0.5, scale factor at 1, and the SH DC
/// term at zero (mid-gray after the rendering offset).
pub fn anchor_gaussians(
    mesh: &TriangleMesh,
    k: usize,
    sh_degree: usize,
    seed: u64,
) -> Result<GaussianCloud> {
    use rand::{Rng, SeedableRng};
    if k < 1 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_coeffs = (sh_degree + 1) * (sh_degree + 1);
    let mut gaussians = Vec::with_capacity(k * mesh.faces.len());
    for face_id in 0..mesh.faces.len() {
        for ki in 0..k {
            let beta = if k == 1 {
                [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
            } else if ki < 2 {
                K2_PATTERNS[ki]
            } else {
                // Interior point: rescaled positive draws.
                let raw = [
                    rng.gen_range(0.2..1.0f64),
                    rng.gen_range(0.2..1.0f64),
                    rng.gen_range(0.2..1.0f64),
                ];
                let s: f64 = raw.iter().sum();
                [raw[0] / s, raw[1] / s, raw[2] / s]
            };
            gaussians.push(SurfaceGaussian {
                face_id: face_id as u32,
                beta: [beta[0] as f32, beta[1] as f32, beta[2] as f32],
                scale_factor: 1.0,
                sh_coeffs: vec![[0.0; 3]; n_coeffs],
                opacity: 0.5,
            });
        }
    }
    let cloud = GaussianCloud {
        gaussians,
        mesh: mesh.clone(),
        kernels_per_face: k,
        sh_degree,
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Barycentric kernel center: beta1 v1 + beta2 v2 + beta3 v3.
pub fn gaussian_center(beta: &[f64; 3], v: &[Vector3<f64>; 3]) -> Vector3<f64> {
    v[0] * beta[0] + v[1] * beta[1] + v[2] * beta[2]
}

/// Face rotation frame. Columns: unit normal, unit (v1 - center), and their
/// cross product.
pub fn face_frame(v1: &Vector3<f64>, v2: &Vector3<f64>, v3: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let n = (v2 - v1).cross(&(v3 - v1));
    if n.norm() <= 2.0 * crate::mesh::MIN_FACE_AREA {
        return Err(Error::InvalidMesh("degenerate face in frame".into()));
    }
    let r1 = n.normalize();
    let m = (v1 + v2 + v3) / 3.0;
    let u = v1 - m;
    if u.norm() < 1e-12 {
        return Err(Error::InvalidMesh("face center coincides with vertex".into()));
    }
    let r2 = u.normalize();
    let r3 = r1.cross(&r2);
    Ok(Matrix3::from_columns(&[r1, r2, r3]))
}

/// Face-derived standard deviations (before axis assignment):
/// s1 = s2 = scale_factor * |m - v2|, s3 = scale_factor * |<v2 - m, r3>|,
/// floored at `MIN_SCALE`.
pub fn face_scale(
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
    v3: &Vector3<f64>,
    scale_factor: f64,
) -> Result<[f64; 3]> {
    let frame = face_frame(v1, v2, v3)?;
    let m = (v1 + v2 + v3) / 3.0;
    let s12 = (scale_factor * (m - v2).norm()).max(MIN_SCALE);
    let r3 = frame.column(2);
    let s3 = (scale_factor * (v2 - m).dot(&r3).abs()).max(MIN_SCALE);
    Ok([s12, s12, s3])
}

/// Sigma = R * S * S^T * R^T for per-axis deviations S.
pub fn build_covariance(rotation: &Matrix3<f64>, scales: &[f64; 3]) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&Vector3::new(
        scales[0] * scales[0],
        scales[1] * scales[1],
        scales[2] * scales[2],
    ));
    rotation * d * rotation.transpose()
}

/// Project beta back onto the probability simplex.
pub fn project_beta(beta: [f64; 3]) -> Result<[f64; 3]> {
    project_simplex(beta)
}

/// Forward frame construction with the intermediates the backward pass needs.
pub struct FrameBuild {
    pub frame: GaussianFrame,
    m: Vector3<f64>,
    n_raw: Vector3<f64>,
    u_raw: Vector3<f64>,
    s2_floored: bool,
    s3_floored: bool,
    s3_sign: f64,
}

/// Build the full kernel frame for one face: center from beta, rotation from
/// the face, axis deviations (thin shell, in-plane pair).
pub fn build_frame(v: &[Vector3<f64>; 3], beta: &[f64; 3], scale_factor: f64) -> FrameBuild {
    let center = gaussian_center(beta, v);
    let m = (v[0] + v[1] + v[2]) / 3.0;
    let n_raw = (v[1] - v[0]).cross(&(v[2] - v[0]));
    let r1 = n_raw.normalize();
    let u_raw = v[0] - m;
    let r2 = u_raw.normalize();
    let r3 = r1.cross(&r2);
    let rotation = Matrix3::from_columns(&[r1, r2, r3]);

    let s2_raw = scale_factor * (m - v[1]).norm();
    let dot3 = (v[1] - m).dot(&r3);
    let s3_raw = scale_factor * dot3.abs();
    let s2 = s2_raw.max(MIN_SCALE);
    let s3 = s3_raw.max(MIN_SCALE);
    let axis_scales = [NORMAL_SHELL_SIGMA, s2, s3];
    let covariance = build_covariance(&rotation, &axis_scales);
    FrameBuild {
        frame: GaussianFrame {
            center,
            rotation,
            axis_scales,
            covariance,
        },
        m,
        n_raw,
        u_raw,
        s2_floored: s2_raw < MIN_SCALE,
        s3_floored: s3_raw < MIN_SCALE,
        s3_sign: dot3.signum(),
    }
}

/// Gradients of a frame with respect to its inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameGrads {
    pub vertices: [Vector3<f64>; 3],
    pub beta: [f64; 3],
    pub scale_factor: f64,
}

impl FrameGrads {
    fn add_m(&mut self, g: &Vector3<f64>) {
        for v in &mut self.vertices {
            *v += g / 3.0;
        }
    }
}

/// Reverses the frame construction: given dL/d(center) and dL/d(covariance)
/// (in canonical space), accumulates dL/d(vertices), dL/d(beta) and
/// dL/d(scale_factor).
pub fn frame_vjp(
    v: &[Vector3<f64>; 3],
    beta: &[f64; 3],
    scale_factor: f64,
    fwd: &FrameBuild,
    grad_center: &Vector3<f64>,
    grad_cov: &Matrix3<f64>,
) -> FrameGrads {
    let mut out = FrameGrads::default();
    let rot = fwd.frame.rotation;
    let scales = fwd.frame.axis_scales;

    // Center path: x_c = sum beta_i v_i.
    for i in 0..3 {
        out.beta[i] += grad_center.dot(&v[i]);
        out.vertices[i] += grad_center * beta[i];
    }

    // Covariance path. Sigma = R D R^T with D = diag(s_i^2).
    let gsym = (grad_cov + grad_cov.transpose()) * 0.5;
    let d = Matrix3::from_diagonal(&Vector3::new(
        scales[0] * scales[0],
        scales[1] * scales[1],
        scales[2] * scales[2],
    ));
    let mut grad_rot = 2.0 * gsym * rot * d;
    let rtgr = rot.transpose() * gsym * rot;
    // axis 0 is the fixed shell sigma: no parameter depends on it.
    let grad_s2 = 2.0 * scales[1] * rtgr[(1, 1)];
    let grad_s3 = 2.0 * scales[2] * rtgr[(2, 2)];

    // s2 = sf * |m - v2| (floored).
    if !fwd.s2_floored {
        let diff = fwd.m - v[1];
        let len = diff.norm();
        out.scale_factor += grad_s2 * len;
        let gd = diff / len * (grad_s2 * scale_factor);
        out.add_m(&gd);
        out.vertices[1] -= gd;
    }
    // s3 = sf * |<v2 - m, r3>|; feeds both vertices and the rotation.
    if !fwd.s3_floored {
        let u = v[1] - fwd.m;
        let r3 = rot.column(2).into_owned();
        out.scale_factor += grad_s3 * u.dot(&r3).abs();
        let coeff = grad_s3 * scale_factor * fwd.s3_sign;
        let gu = r3 * coeff;
        out.vertices[1] += gu;
        out.add_m(&(-gu));
        let g_r3 = u * coeff;
        for i in 0..3 {
            grad_rot[(i, 2)] += g_r3[i];
        }
    }

    // Rotation path. Columns r1, r2, r3 = r1 x r2.
    let r1 = rot.column(0).into_owned();
    let r2 = rot.column(1).into_owned();
    let g1_direct = grad_rot.column(0).into_owned();
    let g2_direct = grad_rot.column(1).into_owned();
    let g3 = grad_rot.column(2).into_owned();
    let g1 = g1_direct + r2.cross(&g3);
    let g2 = g2_direct + g3.cross(&r1);

    // r1 = normalize(n), n = (v2 - v1) x (v3 - v1).
    let jn = crate::math::normalize_jacobian(&fwd.n_raw);
    let gn = jn * g1;
    let a = v[1] - v[0];
    let b = v[2] - v[0];
    let ga = b.cross(&gn);
    let gb = gn.cross(&a);
    out.vertices[0] -= ga + gb;
    out.vertices[1] += ga;
    out.vertices[2] += gb;

    // r2 = normalize(u), u = v1 - m = (2 v1 - v2 - v3) / 3.
    let ju = crate::math::normalize_jacobian(&fwd.u_raw);
    let gu = ju * g2;
    out.vertices[0] += gu * (2.0 / 3.0);
    out.vertices[1] -= gu / 3.0;
    out.vertices[2] -= gu / 3.0;

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_face(rng: &mut impl Rng) -> [Vector3<f64>; 3] {
        loop {
            let v = [
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
            ];
            if (v[1] - v[0]).cross(&(v[2] - v[0])).norm() > 0.1 {
                return v;
            }
        }
    }

    #[test]
    fn anchor_counts_and_patterns() {
        let cube = crate::fixtures::unit_cube();
        let cloud = anchor_gaussians(&cube, 2, 2, 0).unwrap();
        assert_eq!(cloud.len(), 24);
        assert_eq!(cloud.gaussians[0].beta, [0.5, 0.25, 0.25]);
        assert_eq!(cloud.gaussians[1].beta, [0.25, 0.5, 0.25]);

        // Single-kernel anchoring uses the centroid.
        let tet = crate::fixtures::tetrahedron();
        let one = anchor_gaussians(&tet, 1, 0, 0).unwrap();
        for g in &one.gaussians {
            for b in g.beta {
                assert_abs_diff_eq!(b, 1.0 / 3.0, epsilon = 1e-7);
            }
        }

        // Any k: every beta sums to 1.
        for k in 1..=5 {
            let c = anchor_gaussians(&tet, k, 0, 7).unwrap();
            assert_eq!(c.len(), k * 4);
            for g in &c.gaussians {
                let s: f32 = g.beta.iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn center_cases() {
        let v = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(3.0, 0.0, 0.0),
            Vector3::new(0.0, 3.0, 0.0),
        ];
        let c = gaussian_center(&[1.0, 0.0, 0.0], &v);
        assert_abs_diff_eq!((c - v[0]).norm(), 0.0, epsilon = 1e-15);
        let c = gaussian_center(&[1.0 / 3.0; 3], &v);
        assert_abs_diff_eq!((c - Vector3::new(1.0, 1.0, 0.0)).norm(), 0.0, epsilon = 1e-12);

        // Independent weighted-sum oracle on random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let v = rand_face(&mut rng);
            let raw: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let s: f64 = raw.iter().sum();
            let beta = [raw[0] / s, raw[1] / s, raw[2] / s];
            let c = gaussian_center(&beta, &v);
            let mut oracle = Vector3::zeros();
            for i in 0..3 {
                oracle += v[i] * beta[i];
            }
            assert_abs_diff_eq!((c - oracle).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn frame_planar_case() {
        let v1 = Vector3::new(0.0, 0.0, 0.0);
        let v2 = Vector3::new(1.0, 0.0, 0.0);
        let v3 = Vector3::new(0.0, 1.0, 0.0);
        let r = face_frame(&v1, &v2, &v3).unwrap();
        assert_abs_diff_eq!(
            (r.column(0) - Vector3::new(0.0, 0.0, 1.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
        let e = 1.0 / (2.0f64).sqrt();
        assert_abs_diff_eq!(
            (r.column(1) - Vector3::new(-e, -e, 0.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
        let r3 = Vector3::new(0.0, 0.0, 1.0).cross(&Vector3::new(-e, -e, 0.0));
        assert_abs_diff_eq!((r.column(2) - r3).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn frame_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..200 {
            let v = rand_face(&mut rng);
            let r = face_frame(&v[0], &v[1], &v[2]).unwrap();
            assert_abs_diff_eq!(
                (r.transpose() * r - Matrix3::identity()).norm(),
                0.0,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn frame_equivariance_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let v = rand_face(&mut rng);
            let q = crate::math::rodrigues(&Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ));
            let t = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let vq = [q * v[0] + t, q * v[1] + t, q * v[2] + t];
            let beta = [0.5, 0.3, 0.2];
            let f0 = build_frame(&v, &beta, 1.3);
            let f1 = build_frame(&vq, &beta, 1.3);
            assert_abs_diff_eq!(
                (f1.frame.center - (q * f0.frame.center + t)).norm(),
                0.0,
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(
                (f1.frame.rotation - q * f0.frame.rotation).norm(),
                0.0,
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(
                (f1.frame.covariance - q * f0.frame.covariance * q.transpose()).norm(),
                0.0,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn scale_equilateral_and_homogeneity() {
        // Equilateral face, side 1: |m - v2| = 1/sqrt(3).
        let v1 = Vector3::new(0.0, 0.0, 0.0);
        let v2 = Vector3::new(1.0, 0.0, 0.0);
        let v3 = Vector3::new(0.5, (3.0f64).sqrt() / 2.0, 0.0);
        let s = face_scale(&v1, &v2, &v3, 1.0).unwrap();
        assert_abs_diff_eq!(s[0], 1.0 / (3.0f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], s[0], epsilon = 1e-15);

        // Doubling all coordinates doubles every scale.
        let s2 = face_scale(&(v1 * 2.0), &(v2 * 2.0), &(v3 * 2.0), 1.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(s2[i], 2.0 * s[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_diag_symmetric_eigen() {
        let sigma = build_covariance(&Matrix3::identity(), &[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(
            (sigma - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0))).norm(),
            0.0,
            epsilon = 1e-15
        );

        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..50 {
            let r = crate::math::rodrigues(&Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ));
            let scales = [
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
            ];
            let sigma = build_covariance(&r, &scales);
            assert_abs_diff_eq!((sigma - sigma.transpose()).norm(), 0.0, epsilon = 1e-12);
            // Eigenvalues equal the squared scales (eigen-solver oracle).
            let mut eig: Vec<f64> = sigma.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut expect: Vec<f64> = scales.iter().map(|s| s * s).collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, x) in eig.iter().zip(&expect) {
                assert_abs_diff_eq!(e, x, epsilon = 1e-9);
            }
            assert!(eig[0] >= -1e-10);
        }
    }

    #[test]
    fn frame_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..30 {
            let v = rand_face(&mut rng);
            let raw: [f64; 3] = [
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.1..1.0),
            ];
            let s: f64 = raw.iter().sum();
            let beta = [raw[0] / s, raw[1] / s, raw[2] / s];
            let sf = rng.gen_range(0.5..2.0);

            let wc = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let wcov = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let loss = |v: &[Vector3<f64>; 3], beta: &[f64; 3], sf: f64| {
                let f = build_frame(v, beta, sf);
                wc.dot(&f.frame.center) + wcov.component_mul(&f.frame.covariance).sum()
            };

            let fwd = build_frame(&v, &beta, sf);
            let grads = frame_vjp(&v, &beta, sf, &fwd, &wc, &wcov);

            let h = 1e-6;
            // Vertices.
            for vi in 0..3 {
                for d in 0..3 {
                    let mut vp = v;
                    let mut vm = v;
                    vp[vi][d] += h;
                    vm[vi][d] -= h;
                    let fd = (loss(&vp, &beta, sf) - loss(&vm, &beta, sf)) / (2.0 * h);
                    assert_abs_diff_eq!(fd, grads.vertices[vi][d], epsilon = 2e-5);
                }
            }
            // Beta.
            for bi in 0..3 {
                let mut bp = beta;
                let mut bm = beta;
                bp[bi] += h;
                bm[bi] -= h;
                let fd = (loss(&v, &bp, sf) - loss(&v, &bm, sf)) / (2.0 * h);
                assert_abs_diff_eq!(fd, grads.beta[bi], epsilon = 2e-5);
            }
            // Scale factor.
            let fd = (loss(&v, &beta, sf + h) - loss(&v, &beta, sf - h)) / (2.0 * h);
            assert_abs_diff_eq!(fd, grads.scale_factor, epsilon = 2e-5);
        }
    }

    #[test]
    fn project_beta_cases() {
        let p = project_beta([0.5, 0.3, 0.2]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        let p = project_beta([2.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, [1.0, 0.0, 0.0]);
        let p = project_beta([0.6, 0.6, 0.6]).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
    }
}
