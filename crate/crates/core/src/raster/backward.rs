//! Analytic backward pass of the tiled rasterizer.
//!
//! Produces world-space gradients per input gaussian (center, covariance,
//! SH coefficients, opacity); the scene layer chains these through the
//! deformation and the mesh-anchored parameterization.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{
    alpha_at, bin_tiles, project_and_sort, projection_jacobian, WorldGaussian, ALPHA_CLAMP,
    TILE_SIZE, TRANSMITTANCE_EPS,
};
use crate::camera::Camera;
use crate::sh::{basis, basis_grad, sh_raw};
use crate::Result;

/// World-space gradients for one gaussian.
#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub sh: Vec<[f64; 3]>,
    pub opacity: f64,
}

impl GaussianGrads {
    fn zeros(n_coeffs: usize) -> Self {
        GaussianGrads {
            center: Vector3::zeros(),
            covariance: Matrix3::zeros(),
            sh: vec![[0.0; 3]; n_coeffs],
            opacity: 0.0,
        }
    }
}

/// Per-splat screen-space accumulator:
/// [d_color_rgb x3, d_alpha_peak, d_mean x2, d_q00, d_q01+q10, d_q11].
type ScreenAccum = [f64; 9];

/// Gradients of the rendered image with respect to every gaussian.
///
/// `grad_rgb` is dL/d(premultiplied rgb), row-major H x W x 3;
/// `grad_alpha` optionally adds dL/d(coverage).
pub fn render_backward(
    gaussians: &[WorldGaussian],
    cam: &Camera,
    grad_rgb: &[f64],
    grad_alpha: Option<&[f64]>,
) -> Result<Vec<GaussianGrads>> {
    cam.validate()?;
    assert_eq!(grad_rgb.len(), cam.width * cam.height * 3);
    if let Some(ga) = grad_alpha {
        assert_eq!(ga.len(), cam.width * cam.height);
    }
    let proj = project_and_sort(gaussians, cam)?;
    let grid = bin_tiles(&proj, cam.width, cam.height);

    // Tile-local screen-space gradients, computed in parallel.
    let tile_results: Vec<Vec<ScreenAccum>> = (0..grid.bins.len())
        .into_par_iter()
        .map(|ti| {
            let bin = &grid.bins[ti];
            let mut acc: Vec<ScreenAccum> = vec![[0.0; 9]; bin.len()];
            let tx = ti % grid.tiles_x;
            let ty = ti / grid.tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(cam.width);
            let y1 = (y0 + TILE_SIZE).min(cam.height);
            let mut contribs: Vec<(usize, f64, f64)> = Vec::with_capacity(bin.len());
            for py in y0..y1 {
                for px in x0..x1 {
                    let gi = py * cam.width + px;
                    let g_rgb = [
                        grad_rgb[gi * 3],
                        grad_rgb[gi * 3 + 1],
                        grad_rgb[gi * 3 + 2],
                    ];
                    let g_a = grad_alpha.map(|ga| ga[gi]).unwrap_or(0.0);
                    if g_rgb == [0.0; 3] && g_a == 0.0 {
                        continue;
                    }
                    // Forward walk, recording (bin index, alpha, T before).
                    contribs.clear();
                    let mut transmittance = 1.0;
                    for (bi, &si) in bin.iter().enumerate() {
                        let alpha = alpha_at(&proj.splats[si], px, py);
                        if alpha == 0.0 {
                            continue;
                        }
                        contribs.push((bi, alpha, transmittance));
                        transmittance *= 1.0 - alpha;
                        if transmittance < TRANSMITTANCE_EPS {
                            break;
                        }
                    }
                    // Reverse walk with suffix sums.
                    let mut suffix = [0.0; 3];
                    let mut suffix_a = 0.0;
                    for &(bi, alpha, t_before) in contribs.iter().rev() {
                        let si = grid.bins[ti][bi];
                        let splat = &proj.splats[si];
                        let w = alpha * t_before;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            // dL/dcolor.
                            acc[bi][ch] += g_rgb[ch] * w;
                            d_alpha += g_rgb[ch]
                                * (splat.color[ch] * t_before - suffix[ch] / (1.0 - alpha));
                        }
                        d_alpha += g_a * (t_before - suffix_a / (1.0 - alpha));
                        for ch in 0..3 {
                            suffix[ch] += splat.color[ch] * w;
                        }
                        suffix_a += w;

                        // alpha = min(peak * exp(-rho/2), clamp); zero
                        // gradient through a clamped alpha.
                        let d = Vector2::new(
                            px as f64 + 0.5 - splat.mean.x,
                            py as f64 + 0.5 - splat.mean.y,
                        );
                        let rho = (splat.conic * d).dot(&d);
                        let gexp = (-0.5 * rho).exp();
                        if splat.alpha_peak * gexp < ALPHA_CLAMP {
                            acc[bi][3] += d_alpha * gexp;
                            let d_rho = d_alpha * (-0.5 * alpha);
                            let qd = splat.conic * d;
                            acc[bi][4] += d_rho * (-2.0 * qd.x);
                            acc[bi][5] += d_rho * (-2.0 * qd.y);
                            acc[bi][6] += d_rho * d.x * d.x;
                            acc[bi][7] += d_rho * 2.0 * d.x * d.y;
                            acc[bi][8] += d_rho * d.y * d.y;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    // Merge per-tile accumulators in tile order (deterministic).
    let mut screen: Vec<ScreenAccum> = vec![[0.0; 9]; proj.splats.len()];
    for (ti, acc) in tile_results.iter().enumerate() {
        for (bi, &si) in grid.bins[ti].iter().enumerate() {
            for k in 0..9 {
                screen[si][k] += acc[bi][k];
            }
        }
    }

    // Screen-space to world-space, one splat at a time.
    let mut out: Vec<GaussianGrads> = gaussians
        .iter()
        .map(|g| GaussianGrads::zeros(g.sh_coeffs.len()))
        .collect();

    let rot = cam.rotation();
    let cam_pos = cam.position();
    for (si, splat) in proj.splats.iter().enumerate() {
        let acc = &screen[si];
        if acc.iter().all(|&v| v == 0.0) {
            continue;
        }
        let id = splat.id;
        let g = &gaussians[id];
        let grads = &mut out[id];

        grads.opacity += acc[3];

        let d_mean2d = Vector2::new(acc[4], acc[5]);
        let d_conic = Matrix2::new(acc[6], acc[7] * 0.5, acc[7] * 0.5, acc[8]);

        // Q = cov2d^{-1}  =>  dL/dcov2d = -Q dL/dQ Q.
        let q = splat.conic;
        let d_cov2d = -(q * d_conic * q);

        // cov2d = J Mc J^T + lowpass, Mc = W Sigma W^T.
        let p_cam = cam.to_camera(&g.center);
        let j = projection_jacobian(cam, &p_cam);
        let cov_cam = rot * g.covariance * rot.transpose();
        let d_mc = j.transpose() * d_cov2d * j;
        grads.covariance += rot.transpose() * d_mc * rot;

        // dL/dJ = 2 * d_cov2d * J * Mc  (both symmetric at the point).
        let d_j = 2.0 * d_cov2d * j * cov_cam;
        let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
        let z2 = z * z;
        let z3 = z2 * z;
        let mut d_pcam = Vector3::zeros();
        // J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]].
        d_pcam.x += d_j[(0, 2)] * (-cam.fx / z2);
        d_pcam.y += d_j[(1, 2)] * (-cam.fy / z2);
        d_pcam.z += d_j[(0, 0)] * (-cam.fx / z2)
            + d_j[(0, 2)] * (2.0 * cam.fx * x / z3)
            + d_j[(1, 1)] * (-cam.fy / z2)
            + d_j[(1, 2)] * (2.0 * cam.fy * y / z3);

        // mean2d = (fx x/z + cx, fy y/z + cy).
        d_pcam.x += d_mean2d.x * cam.fx / z;
        d_pcam.y += d_mean2d.y * cam.fy / z;
        d_pcam.z += d_mean2d.x * (-cam.fx * x / z2) + d_mean2d.y * (-cam.fy * y / z2);

        grads.center += rot.transpose() * d_pcam;

        // Color path: clamped channels stop the gradient.
        let d_color = [acc[0], acc[1], acc[2]];
        if d_color != [0.0; 3] {
            let u = g.center - cam_pos;
            let dir = u.normalize();
            let raw = sh_raw(g.sh_degree, &g.sh_coeffs, &dir);
            let b = basis(g.sh_degree, &dir);
            let bg = basis_grad(g.sh_degree, &dir);
            let mut d_dir = Vector3::zeros();
            for ch in 0..3 {
                if raw[ch] <= 0.0 || raw[ch] >= 1.0 || d_color[ch] == 0.0 {
                    continue;
                }
                for (l, bl) in b.iter().enumerate() {
                    grads.sh[l][ch] += d_color[ch] * bl;
                    d_dir += bg[l] * (d_color[ch] * g.sh_coeffs[l][ch] as f64);
                }
            }
            grads.center += crate::math::normalize_jacobian(&u) * d_dir;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera(width: usize, height: usize) -> Camera {
        Camera::look_at(
            &Vector3::new(0.0, -0.8, 0.25),
            &Vector3::zeros(),
            width as f64 * 1.2,
            width,
            height,
            0.01,
            10.0,
        )
        .unwrap()
    }

    fn scene(rng: &mut impl Rng, n: usize, sh_degree: usize) -> Vec<WorldGaussian> {
        let n_coeffs = crate::sh::num_coeffs(sh_degree);
        (0..n)
            .map(|_| {
                let r = crate::math::rodrigues(&Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ));
                let scales = [
                    rng.gen_range(0.02..0.06),
                    rng.gen_range(0.02..0.06),
                    rng.gen_range(0.005..0.02),
                ];
                WorldGaussian {
                    center: Vector3::new(
                        rng.gen_range(-0.12..0.12),
                        rng.gen_range(-0.12..0.12),
                        rng.gen_range(-0.12..0.12),
                    ),
                    covariance: crate::gauss::build_covariance(&r, &scales),
                    sh_degree,
                    sh_coeffs: (0..n_coeffs)
                        .map(|_| {
                            [
                                rng.gen_range(-0.2..0.2),
                                rng.gen_range(-0.2..0.2),
                                rng.gen_range(-0.2..0.2),
                            ]
                        })
                        .collect(),
                    opacity: rng.gen_range(0.3..0.8),
                }
            })
            .collect()
    }

    /// Weighted-pixel loss for finite differencing.
    fn loss(
        gaussians: &[WorldGaussian],
        cam: &Camera,
        w_rgb: &[f64],
        w_alpha: &[f64],
    ) -> f64 {
        let img = render(gaussians, cam).unwrap();
        img.rgb.iter().zip(w_rgb).map(|(a, b)| a * b).sum::<f64>()
            + img
                .alpha
                .iter()
                .zip(w_alpha)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    fn check(analytic: f64, fd: f64) {
        let denom = analytic.abs().max(fd.abs()).max(1e-5);
        let rel = (analytic - fd).abs() / denom;
        assert!(rel < 1e-3, "analytic {analytic} vs fd {fd} (rel {rel})");
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let gaussians = scene(&mut rng, 5, 1);
        let cam = test_camera(16, 16);
        let grads =
            render_backward(&gaussians, &cam, &vec![0.0; 16 * 16 * 3], None).unwrap();
        for g in grads {
            assert_eq!(g.center, Vector3::zeros());
            assert_eq!(g.opacity, 0.0);
            assert!(g.sh.iter().all(|c| *c == [0.0; 3]));
            assert_eq!(g.covariance, Matrix3::zeros());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let gaussians = scene(&mut rng, 5, 2);
        let cam = test_camera(16, 16);
        let w_rgb: Vec<f64> = (0..16 * 16 * 3)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let w_alpha: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads = render_backward(&gaussians, &cam, &w_rgb, Some(&w_alpha)).unwrap();

        let h = 1e-5;
        for gi in 0..gaussians.len() {
            // Center.
            for d in 0..3 {
                let mut p = gaussians.clone();
                let mut m = gaussians.clone();
                p[gi].center[d] += h;
                m[gi].center[d] -= h;
                let fd = (loss(&p, &cam, &w_rgb, &w_alpha) - loss(&m, &cam, &w_rgb, &w_alpha))
                    / (2.0 * h);
                check(grads[gi].center[d], fd);
            }
            // Covariance entries (independent perturbations).
            for r in 0..3 {
                for c in 0..3 {
                    let mut p = gaussians.clone();
                    let mut m = gaussians.clone();
                    p[gi].covariance[(r, c)] += h * 1e-2;
                    m[gi].covariance[(r, c)] -= h * 1e-2;
                    let fd = (loss(&p, &cam, &w_rgb, &w_alpha)
                        - loss(&m, &cam, &w_rgb, &w_alpha))
                        / (2.0 * h * 1e-2);
                    check(grads[gi].covariance[(r, c)], fd);
                }
            }
            // Opacity.
            {
                let mut p = gaussians.clone();
                let mut m = gaussians.clone();
                p[gi].opacity += h;
                m[gi].opacity -= h;
                let fd = (loss(&p, &cam, &w_rgb, &w_alpha) - loss(&m, &cam, &w_rgb, &w_alpha))
                    / (2.0 * h);
                check(grads[gi].opacity, fd);
            }
            // A few SH coefficients per gaussian.
            for l in [0usize, 3, 7] {
                for ch in 0..3 {
                    let mut p = gaussians.clone();
                    let mut m = gaussians.clone();
                    p[gi].sh_coeffs[l][ch] += h as f32;
                    m[gi].sh_coeffs[l][ch] -= h as f32;
                    let hp = p[gi].sh_coeffs[l][ch] as f64;
                    let hm = m[gi].sh_coeffs[l][ch] as f64;
                    let fd = (loss(&p, &cam, &w_rgb, &w_alpha)
                        - loss(&m, &cam, &w_rgb, &w_alpha))
                        / (hp - hm);
                    check(grads[gi].sh[l][ch], fd);
                }
            }
        }
    }
}
