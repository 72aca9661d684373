//! Real spherical harmonics for view-dependent color, degrees 0 through 3,
//! with analytic direction gradients.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: usize = 3;

pub fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at a unit direction, lowest band first.
pub fn basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    assert!(degree <= MAX_DEGREE);
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut out = Vec::with_capacity(num_coeffs(degree));
    out.push(SH_C0);
    if degree >= 1 {
        out.push(-SH_C1 * y);
        out.push(SH_C1 * z);
        out.push(-SH_C1 * x);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(SH_C2[0] * x * y);
        out.push(SH_C2[1] * y * z);
        out.push(SH_C2[2] * (2.0 * zz - xx - yy));
        out.push(SH_C2[3] * x * z);
        out.push(SH_C2[4] * (xx - yy));
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(SH_C3[0] * y * (3.0 * xx - yy));
        out.push(SH_C3[1] * x * y * z);
        out.push(SH_C3[2] * y * (4.0 * zz - xx - yy));
        out.push(SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy));
        out.push(SH_C3[4] * x * (4.0 * zz - xx - yy));
        out.push(SH_C3[5] * z * (xx - yy));
        out.push(SH_C3[6] * x * (xx - 3.0 * yy));
    }
    out
}

/// Per-basis gradient with respect to the (unnormalized treated as free)
/// direction components.
pub fn basis_grad(degree: usize, dir: &Vector3<f64>) -> Vec<Vector3<f64>> {
    assert!(degree <= MAX_DEGREE);
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut out = Vec::with_capacity(num_coeffs(degree));
    out.push(Vector3::zeros());
    if degree >= 1 {
        out.push(Vector3::new(0.0, -SH_C1, 0.0));
        out.push(Vector3::new(0.0, 0.0, SH_C1));
        out.push(Vector3::new(-SH_C1, 0.0, 0.0));
    }
    if degree >= 2 {
        out.push(Vector3::new(SH_C2[0] * y, SH_C2[0] * x, 0.0));
        out.push(Vector3::new(0.0, SH_C2[1] * z, SH_C2[1] * y));
        out.push(Vector3::new(
            -2.0 * SH_C2[2] * x,
            -2.0 * SH_C2[2] * y,
            4.0 * SH_C2[2] * z,
        ));
        out.push(Vector3::new(SH_C2[3] * z, 0.0, SH_C2[3] * x));
        out.push(Vector3::new(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0));
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(Vector3::new(
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ));
        out.push(Vector3::new(SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y));
        out.push(Vector3::new(
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ));
        out.push(Vector3::new(
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ));
        out.push(Vector3::new(
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ));
        out.push(Vector3::new(
            SH_C3[5] * 2.0 * x * z,
            SH_C3[5] * (-2.0 * y * z),
            SH_C3[5] * (xx - yy),
        ));
        out.push(Vector3::new(SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0));
    }
    out
}

/// View-dependent color: SH expansion plus the 0.5 offset, clamped to [0,1].
pub fn sh_to_color(degree: usize, coeffs: &[[f32; 3]], dir: &Vector3<f64>) -> [f64; 3] {
    let b = basis(degree, dir);
    let mut rgb = [0.5; 3];
    for (ci, bi) in coeffs.iter().zip(&b) {
        for ch in 0..3 {
            rgb[ch] += ci[ch] as f64 * bi;
        }
    }
    for ch in &mut rgb {
        *ch = ch.clamp(0.0, 1.0);
    }
    rgb
}

/// Raw (unclamped, no offset) SH evaluation; used by the backward pass to
/// detect clamp saturation.
pub fn sh_raw(degree: usize, coeffs: &[[f32; 3]], dir: &Vector3<f64>) -> [f64; 3] {
    let b = basis(degree, dir);
    let mut rgb = [0.5; 3];
    for (ci, bi) in coeffs.iter().zip(&b) {
        for ch in 0..3 {
            rgb[ch] += ci[ch] as f64 * bi;
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dir(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 0.1 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn degree0_is_view_independent_gray() {
        let coeffs = vec![[0.0f32; 3]];
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let c0 = sh_to_color(0, &coeffs, &rand_dir(&mut rng));
        assert_eq!(c0, [0.5, 0.5, 0.5]);
        for _ in 0..20 {
            let c = sh_to_color(0, &coeffs, &rand_dir(&mut rng));
            assert_eq!(c, c0);
        }
    }

    /// Direct polynomial oracle for degree 2, written independently of the
    /// table-driven basis.
    fn degree2_oracle(coeffs: &[[f32; 3]], d: &Vector3<f64>) -> [f64; 3] {
        let (x, y, z) = (d.x, d.y, d.z);
        let b = [
            0.28209479177387814,
            -0.4886025119029199 * y,
            0.4886025119029199 * z,
            -0.4886025119029199 * x,
            1.0925484305920792 * x * y,
            -1.0925484305920792 * y * z,
            0.31539156525252005 * (2.0 * z * z - x * x - y * y),
            -1.0925484305920792 * x * z,
            0.5462742152960396 * (x * x - y * y),
        ];
        let mut rgb = [0.5; 3];
        for ch in 0..3 {
            for (i, bi) in b.iter().enumerate() {
                rgb[ch] += coeffs[i][ch] as f64 * bi;
            }
            rgb[ch] = rgb[ch].clamp(0.0, 1.0);
        }
        rgb
    }

    #[test]
    fn degree2_matches_polynomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..50 {
            let coeffs: Vec<[f32; 3]> = (0..9)
                .map(|_| {
                    [
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ]
                })
                .collect();
            let d = rand_dir(&mut rng);
            let ours = sh_to_color(2, &coeffs, &d);
            let oracle = degree2_oracle(&coeffs, &d);
            for ch in 0..3 {
                assert_abs_diff_eq!(ours[ch], oracle[ch], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn basis_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let h = 1e-6;
        for degree in 0..=3usize {
            for _ in 0..20 {
                let d = rand_dir(&mut rng);
                let grads = basis_grad(degree, &d);
                for axis in 0..3 {
                    let mut dp = d;
                    let mut dm = d;
                    dp[axis] += h;
                    dm[axis] -= h;
                    let bp = basis(degree, &dp);
                    let bm = basis(degree, &dm);
                    for (i, g) in grads.iter().enumerate() {
                        let fd = (bp[i] - bm[i]) / (2.0 * h);
                        assert_abs_diff_eq!(fd, g[axis], epsilon = 1e-6);
                    }
                }
            }
        }
    }
}
