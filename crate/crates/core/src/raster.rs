//! Differentiable CPU rasterizer for 3D Gaussians: EWA-style perspective
//! projection to screen-space 2D Gaussians, global depth sort, tile-binned
//! front-to-back alpha compositing, and an analytic backward pass.
//!
//! The naive per-pixel renderer (`render_naive`) stays in-tree as the
//! compositing oracle; it shares the per-pixel alpha evaluation with the
//! tiled path, so the two differ only by early termination.

pub mod backward;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::sh::sh_to_color;
use crate::{Error, Result};

pub const TILE_SIZE: usize = 16;
/// Low-pass dilation added to the projected covariance diagonal (pixel^2).
pub const LOWPASS: f64 = 0.3;
/// Per-splat alpha is clamped here for backward-pass stability.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Contributions below this alpha are dropped (shared by both renderers).
pub const ALPHA_SKIP: f64 = 1e-5;
/// Elliptical support: alpha is zero where d^T conic d exceeds this (3 sigma).
pub const SUPPORT_RHO: f64 = 9.0;
/// Front-to-back compositing stops once transmittance falls below this.
/// Keeping it at 1e-7 bounds the truncated tail below the 1e-6 oracle
/// tolerance; see `render_naive`.
pub const TRANSMITTANCE_EPS: f64 = 1e-7;

/// A posed 3D Gaussian in world space, ready for projection.
#[derive(Debug, Clone)]
pub struct WorldGaussian {
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub sh_degree: usize,
    pub sh_coeffs: Vec<[f32; 3]>,
    pub opacity: f64,
}

/// Screen-space 2D Gaussian.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Index of the source gaussian in the input slice.
    pub id: usize,
    pub mean: Vector2<f64>,
    /// Projected covariance including the low-pass dilation.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z in meters.
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha_peak: f64,
    /// Conservative pixel bounds of the 3-sigma ellipse.
    pub bbox: [isize; 4],
}

/// Premultiplied-alpha render target.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major H x W x 3, premultiplied by alpha, in [0, 1].
    pub rgb: Vec<f64>,
    /// Row-major H x W coverage in [0, 1].
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        RenderedImage {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn max_abs_diff(&self, other: &RenderedImage) -> f64 {
        self.rgb
            .iter()
            .zip(&other.rgb)
            .chain(self.alpha.iter().zip(&other.alpha))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// 8-bit RGB PNG of the premultiplied color (black background).
    pub fn save_png8(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([quant8(p[0]), quant8(p[1]), quant8(p[2])]),
                );
            }
        }
        buf.save(path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// 16-bit RGB PNG.
    pub fn save_png16(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([quant16(p[0]), quant16(p[1]), quant16(p[2])]),
                );
            }
        }
        buf.save(path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

fn quant8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quant16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Perspective Jacobian of (u, v) with respect to the camera-space point.
pub(crate) fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z_inv = 1.0 / p.z;
    let z_inv2 = z_inv * z_inv;
    nalgebra::Matrix2x3::new(
        cam.fx * z_inv,
        0.0,
        -cam.fx * p.x * z_inv2,
        0.0,
        cam.fy * z_inv,
        -cam.fy * p.y * z_inv2,
    )
}

/// Project one posed gaussian. Returns `None` when culled (behind the
/// camera, outside the depth range, degenerate, or its 3-sigma footprint
/// misses the frame).
pub fn project_gaussian(g: &WorldGaussian, id: usize, cam: &Camera) -> Option<Splat2D> {
    let rot = cam.rotation();
    let p_cam = cam.to_camera(&g.center);
    if !(p_cam.z > cam.near && p_cam.z < cam.far) {
        return None;
    }
    let mean = Vector2::new(
        cam.fx * p_cam.x / p_cam.z + cam.cx,
        cam.fy * p_cam.y / p_cam.z + cam.cy,
    );
    let j = projection_jacobian(cam, &p_cam);
    let cov_cam = rot * g.covariance * rot.transpose();
    let mut cov2d = j * cov_cam * j.transpose();
    cov2d[(0, 0)] += LOWPASS;
    cov2d[(1, 1)] += LOWPASS;
    let det = cov2d.determinant();
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

    // Exact marginal extents of the 3-sigma ellipse.
    let rx = 3.0 * cov2d[(0, 0)].sqrt();
    let ry = 3.0 * cov2d[(1, 1)].sqrt();
    let bbox = [
        (mean.x - rx).floor() as isize,
        (mean.y - ry).floor() as isize,
        (mean.x + rx).ceil() as isize,
        (mean.y + ry).ceil() as isize,
    ];
    if bbox[2] < 0 || bbox[3] < 0 || bbox[0] >= cam.width as isize || bbox[1] >= cam.height as isize
    {
        return None;
    }

    let dir = (g.center - cam.position()).normalize();
    let color = sh_to_color(g.sh_degree, &g.sh_coeffs, &dir);
    Some(Splat2D {
        id,
        mean,
        cov2d,
        conic,
        depth: p_cam.z,
        color,
        alpha_peak: g.opacity,
        bbox,
    })
}

/// Alpha of a splat at a pixel center, with the shared support and skip
/// rules. Returns 0 outside the 3-sigma ellipse or below the skip level.
pub fn alpha_at(splat: &Splat2D, px: usize, py: usize) -> f64 {
    let d = Vector2::new(
        px as f64 + 0.5 - splat.mean.x,
        py as f64 + 0.5 - splat.mean.y,
    );
    let rho = (splat.conic * d).dot(&d);
    if rho > SUPPORT_RHO {
        return 0.0;
    }
    let alpha = (splat.alpha_peak * (-0.5 * rho).exp()).min(ALPHA_CLAMP);
    if alpha < ALPHA_SKIP {
        return 0.0;
    }
    alpha
}

/// Stable ascending depth order; ties keep splat-id order. NaN depth is an
/// error.
pub fn depth_sort(splats: &[Splat2D]) -> Result<Vec<usize>> {
    for (i, s) in splats.iter().enumerate() {
        if s.depth.is_nan() {
            return Err(Error::NanDepth(s.id.max(i)));
        }
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .partial_cmp(&splats[b].depth)
            .unwrap()
            .then(splats[a].id.cmp(&splats[b].id))
    });
    Ok(order)
}

/// Front-to-back compositing of one pixel over depth-ordered splats.
/// Returns premultiplied RGB and coverage.
pub fn composite_pixel(
    splats: &[Splat2D],
    order: &[usize],
    px: usize,
    py: usize,
) -> ([f64; 3], f64) {
    let mut rgb = [0.0; 3];
    let mut transmittance = 1.0;
    for &si in order {
        let alpha = alpha_at(&splats[si], px, py);
        if alpha == 0.0 {
            continue;
        }
        let w = alpha * transmittance;
        for ch in 0..3 {
            rgb[ch] += splats[si].color[ch] * w;
        }
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_EPS {
            break;
        }
    }
    (rgb, 1.0 - transmittance)
}

pub(crate) struct Projected {
    pub splats: Vec<Splat2D>,
    pub order: Vec<usize>,
}

pub(crate) fn project_and_sort(gaussians: &[WorldGaussian], cam: &Camera) -> Result<Projected> {
    let splats: Vec<Splat2D> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, cam))
        .collect();
    let order = depth_sort(&splats)?;
    Ok(Projected { splats, order })
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    /// Per tile: indices into the splat array, in global depth order.
    pub bins: Vec<Vec<usize>>,
}

pub(crate) fn bin_tiles(proj: &Projected, width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for &si in &proj.order {
        let b = proj.splats[si].bbox;
        if b[2] < 0 || b[3] < 0 {
            continue;
        }
        let tx0 = (b[0].max(0) as usize) / TILE_SIZE;
        let ty0 = (b[1].max(0) as usize) / TILE_SIZE;
        let tx1 = ((b[2].min(width as isize - 1)).max(0) as usize) / TILE_SIZE;
        let ty1 = ((b[3].min(height as isize - 1)).max(0) as usize) / TILE_SIZE;
        for ty in ty0..=ty1.min(tiles_y - 1) {
            for tx in tx0..=tx1.min(tiles_x - 1) {
                bins[ty * tiles_x + tx].push(si);
            }
        }
    }
    TileGrid { tiles_x, bins }
}

/// Tile-parallel forward render. Deterministic: tiles own disjoint pixel
/// rectangles and are blitted in index order.
pub fn render(gaussians: &[WorldGaussian], cam: &Camera) -> Result<RenderedImage> {
    cam.validate()?;
    let proj = project_and_sort(gaussians, cam)?;
    let grid = bin_tiles(&proj, cam.width, cam.height);
    let mut image = RenderedImage::zeros(cam.width, cam.height);

    let tiles: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..grid.bins.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % grid.tiles_x;
            let ty = ti / grid.tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(cam.width);
            let y1 = (y0 + TILE_SIZE).min(cam.height);
            let mut rgb = vec![0.0; (x1 - x0) * (y1 - y0) * 3];
            let mut alpha = vec![0.0; (x1 - x0) * (y1 - y0)];
            for py in y0..y1 {
                for px in x0..x1 {
                    let (c, a) = composite_pixel(&proj.splats, &grid.bins[ti], px, py);
                    let li = (py - y0) * (x1 - x0) + (px - x0);
                    rgb[li * 3..li * 3 + 3].copy_from_slice(&c);
                    alpha[li] = a;
                }
            }
            (ti, rgb, alpha)
        })
        .collect();

    for (ti, rgb, alpha) in tiles {
        let tx = ti % grid.tiles_x;
        let ty = ti / grid.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(cam.width);
        let y1 = (y0 + TILE_SIZE).min(cam.height);
        for py in y0..y1 {
            for px in x0..x1 {
                let li = (py - y0) * (x1 - x0) + (px - x0);
                let gi = py * cam.width + px;
                image.rgb[gi * 3..gi * 3 + 3].copy_from_slice(&rgb[li * 3..li * 3 + 3]);
                image.alpha[gi] = alpha[li];
            }
        }
    }
    Ok(image)
}

/// Naive per-pixel oracle: every splat in global depth order, no tiling, no
/// early exit. Kept in-tree for the equivalence tests.
pub fn render_naive(gaussians: &[WorldGaussian], cam: &Camera) -> Result<RenderedImage> {
    cam.validate()?;
    let proj = project_and_sort(gaussians, cam)?;
    let mut image = RenderedImage::zeros(cam.width, cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut rgb = [0.0; 3];
            let mut transmittance = 1.0;
            for &si in &proj.order {
                let alpha = alpha_at(&proj.splats[si], px, py);
                if alpha == 0.0 {
                    continue;
                }
                let w = alpha * transmittance;
                for ch in 0..3 {
                    rgb[ch] += proj.splats[si].color[ch] * w;
                }
                transmittance *= 1.0 - alpha;
            }
            let gi = py * cam.width + px;
            image.rgb[gi * 3..gi * 3 + 3].copy_from_slice(&rgb);
            image.alpha[gi] = 1.0 - transmittance;
        }
    }
    Ok(image)
}
