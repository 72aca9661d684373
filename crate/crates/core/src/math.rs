//! Small fixed-size math utilities shared across the crate: axis-angle
//! rotations and their derivatives, the 3x3 polar decomposition with an
//! analytic vector-Jacobian product, and Euclidean projection onto the
//! probability simplex.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Rodrigues' formula: rotation matrix for an axis-angle vector.
pub fn rodrigues(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta = aa.norm();
    if theta < 1e-12 {
        // First-order expansion keeps the map smooth through zero.
        return Matrix3::identity() + skew(aa);
    }
    let axis = aa / theta;
    let k = skew(&axis);
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Cross-product matrix of a vector.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axial vector of the antisymmetric part of a matrix: skew(axial(m)) = (m - m^T)/2.
pub fn axial(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Partial derivatives of `rodrigues(aa)` with respect to each axis-angle
/// component. Returns [dR/daa_x, dR/daa_y, dR/daa_z].
///
/// Uses the Gallego & Yezzi closed form, with a series fallback near zero.
pub fn rodrigues_jacobian(aa: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = aa.norm();
    let r = rodrigues(aa);
    let mut out = [Matrix3::zeros(); 3];
    if theta < 1e-7 {
        // dR/daa_i -> skew(e_i) at the identity.
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = 1.0;
            out[i] = skew(&e);
        }
        return out;
    }
    let t2 = theta * theta;
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        // dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2
        let term = aa[i] * skew(aa) + skew(&aa.cross(&((Matrix3::identity() - r) * e)));
        out[i] = term * r / t2;
    }
    out
}

/// VJP through `rodrigues`: given dL/dR, returns dL/daa.
pub fn rodrigues_vjp(aa: &Vector3<f64>, grad_r: &Matrix3<f64>) -> Vector3<f64> {
    let jac = rodrigues_jacobian(aa);
    Vector3::new(
        jac[0].component_mul(grad_r).sum(),
        jac[1].component_mul(grad_r).sum(),
        jac[2].component_mul(grad_r).sum(),
    )
}

/// Recover an axis-angle vector from a rotation matrix, with angle in [0, pi].
pub fn rotation_to_axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < 1e-9 {
        return axial(r); // first order
    }
    if theta > std::f64::consts::PI - 1e-6 {
        // Near pi: extract axis from R + I.
        let m = r + Matrix3::identity();
        let col = (0..3)
            .max_by(|&a, &b| {
                m.column(a)
                    .norm()
                    .partial_cmp(&m.column(b).norm())
                    .unwrap()
            })
            .unwrap();
        let axis = m.column(col).normalize();
        return axis * theta;
    }
    axial(r) * (theta / theta.sin())
}

/// Wrap an axis-angle vector so its magnitude is < pi.
pub fn wrap_axis_angle(aa: &Vector3<f64>) -> Vector3<f64> {
    let theta = aa.norm();
    if theta < std::f64::consts::PI {
        return *aa;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let wrapped = theta - (theta / two_pi).round() * two_pi;
    aa * (wrapped / theta)
}

/// Rotation factor of the polar decomposition m = R * H with H symmetric PSD.
///
/// Errors when the matrix is singular (|det| < 1e-9).
pub fn polar_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if m.determinant().abs() < 1e-9 {
        return Err(Error::DegenerateBlend);
    }
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut r = u * vt;
    // Keep a proper rotation; blended bone transforms have positive det.
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    Ok(r)
}

/// VJP through `polar_rotation`: given dL/dR, returns dL/dM.
///
/// With m = R H, dR = R [w]x where ((tr H) I - H) w = axial(R^T dM - dM^T R) * 2 / 2;
/// transposing that linear map gives dL/dM = R [b]x with
/// b = ((tr H) I - H)^{-1} * 2 * axial(asym(R^T dL/dR)).
pub fn polar_rotation_vjp(
    m: &Matrix3<f64>,
    r: &Matrix3<f64>,
    grad_r: &Matrix3<f64>,
) -> Result<Vector3<f64>> {
    let h = r.transpose() * m; // symmetric factor
    let g = Matrix3::identity() * h.trace() - h;
    let a = axial(&(r.transpose() * grad_r));
    let b = g
        .lu()
        .solve(&(2.0 * a))
        .ok_or(Error::DegenerateBlend)?;
    Ok(b)
}

/// Full dL/dM for the polar rotation factor, assembled from `polar_rotation_vjp`.
pub fn polar_rotation_grad_m(
    m: &Matrix3<f64>,
    r: &Matrix3<f64>,
    grad_r: &Matrix3<f64>,
) -> Result<Matrix3<f64>> {
    let b = polar_rotation_vjp(m, r, grad_r)?;
    Ok(r * skew(&b))
}

/// Euclidean projection of a 3-vector onto the probability simplex
/// { x : x_i >= 0, sum x_i = 1 }, by the sort-and-threshold algorithm.
pub fn project_simplex(v: [f64; 3]) -> Result<[f64; 3]> {
    if v.iter().all(|x| x.is_nan()) {
        return Err(Error::InvalidParameter("all-NaN simplex input".into()));
    }
    let v = [
        if v[0].is_finite() { v[0] } else { 0.0 },
        if v[1].is_finite() { v[1] } else { 0.0 },
        if v[2].is_finite() { v[2] } else { 0.0 },
    ];
    let mut u = v;
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cssv = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cssv += ui;
        let t = (cssv - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            rho = i;
            theta = t;
        }
    }
    let _ = rho;
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (v[i] - theta).max(0.0);
    }
    // Renormalize away the last few ulps so the sum is exact to 1e-12.
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        for o in &mut out {
            *o /= s;
        }
    }
    Ok(out)
}

/// Gradient of `normalize(u)` as a matrix: d(u/|u|)/du.
pub fn normalize_jacobian(u: &Vector3<f64>) -> Matrix3<f64> {
    let n = u.norm();
    let d = u / n;
    (Matrix3::identity() - d * d.transpose()) / n
}
