//! Training losses: photometric L1, the SSIM term (see [`crate::metrics`]),
//! and the distance regularizer anchoring canonical vertices to their
//! template mesh.

use nalgebra::Vector3;

use crate::mesh::distance::closest_point_mesh;
use crate::mesh::TriangleMesh;
use crate::{Error, Result};

/// Mean absolute per-channel difference.
pub fn loss_l1(rendered: &[f64], target: &[f64]) -> Result<f64> {
    if rendered.len() != target.len() || rendered.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "l1 inputs {} vs {}",
            rendered.len(),
            target.len()
        )));
    }
    Ok(rendered
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / rendered.len() as f64)
}

/// L1 loss and its gradient (sign / N) with respect to the rendered image.
pub fn loss_l1_backward(rendered: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = loss_l1(rendered, target)?;
    let n = rendered.len() as f64;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(a, b)| {
            if a > b {
                1.0 / n
            } else if a < b {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Mean point-to-template distance over the vertices.
pub fn loss_distreg(vertices: &[Vector3<f64>], template: &TriangleMesh) -> Result<f64> {
    if template.faces.is_empty() {
        return Err(Error::InvalidMesh("empty template".into()));
    }
    if vertices.is_empty() {
        return Ok(0.0);
    }
    Ok(vertices
        .iter()
        .map(|v| closest_point_mesh(template, v).distance)
        .sum::<f64>()
        / vertices.len() as f64)
}

/// Distance regularizer and its per-vertex gradient: (v - closest) / dist,
/// scaled by 1/N. Vertices on the template get a zero subgradient.
pub fn loss_distreg_backward(
    vertices: &[Vector3<f64>],
    template: &TriangleMesh,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if template.faces.is_empty() {
        return Err(Error::InvalidMesh("empty template".into()));
    }
    let n = vertices.len() as f64;
    let mut total = 0.0;
    let mut grads = vec![Vector3::zeros(); vertices.len()];
    for (i, v) in vertices.iter().enumerate() {
        let cp = closest_point_mesh(template, v);
        total += cp.distance;
        if cp.distance > 1e-12 {
            grads[i] = (v - cp.point) / (cp.distance * n);
        }
    }
    Ok((total / n, grads))
}

/// The full objective: (1 - w_ssim) L1 + w_ssim L_ssim + w_reg L_reg.
pub fn total_loss(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    vertices: &[Vector3<f64>],
    template: &TriangleMesh,
    weight_ssim: f64,
    weight_reg: f64,
) -> Result<f64> {
    let l1 = loss_l1(rendered, target)?;
    let ls = crate::metrics::loss_ssim(rendered, target, width, height)?;
    let lr = loss_distreg(vertices, template)?;
    Ok((1.0 - weight_ssim) * l1 + weight_ssim * ls + weight_reg * lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_cases() {
        let a = vec![0.0; 30];
        let b = vec![1.0; 30];
        assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_l1(&a, &b).unwrap(), 1.0);
        assert!(loss_l1(&a, &b[..10]).is_err());

        // Elementwise oracle on random pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let x: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let mut oracle = 0.0;
        for i in 0..64 {
            oracle += (x[i] - y[i]).abs();
        }
        oracle /= 64.0;
        assert_abs_diff_eq!(loss_l1(&x, &y).unwrap(), oracle, epsilon = 1e-12);

        // Gradient is sign/N.
        let (_, grad) = loss_l1_backward(&x, &y).unwrap();
        for i in 0..64 {
            assert_eq!(grad[i], (x[i] - y[i]).signum() / 64.0);
        }
    }

    #[test]
    fn distreg_cases() {
        let template = crate::fixtures::unit_cube();
        // Vertices on the template: zero.
        let on: Vec<Vector3<f64>> = (0..template.vertices.len())
            .map(|i| template.vertex(i))
            .collect();
        assert_abs_diff_eq!(loss_distreg(&on, &template).unwrap(), 0.0, epsilon = 1e-12);

        // All vertices displaced by delta along the +z normal of the top face.
        let delta = 0.07;
        let displaced: Vec<Vector3<f64>> = vec![
            Vector3::new(0.3, 0.4, 1.0 + delta),
            Vector3::new(0.6, 0.2, 1.0 + delta),
        ];
        assert_abs_diff_eq!(
            loss_distreg(&displaced, &template).unwrap(),
            delta,
            epsilon = 1e-12
        );

        // Random offsets against the brute-force all-triangles oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.5..1.5),
                    rng.gen_range(-0.5..1.5),
                    rng.gen_range(-0.5..1.5),
                )
            })
            .collect();
        let ours = loss_distreg(&pts, &template).unwrap();
        let mut oracle = 0.0;
        for p in &pts {
            let mut best = f64::INFINITY;
            for f in 0..template.faces.len() {
                let [a, b, c] = template.face_vertices(f);
                let (cp, _) = crate::mesh::distance::closest_point_triangle(p, &a, &b, &c);
                best = best.min((p - cp).norm());
            }
            oracle += best;
        }
        oracle /= pts.len() as f64;
        assert_abs_diff_eq!(ours, oracle, epsilon = 1e-9);

        // Gradient against finite differences.
        let (_, grads) = loss_distreg_backward(&pts, &template).unwrap();
        let h = 1e-6;
        for vi in [0usize, 7, 13] {
            for d in 0..3 {
                let mut pp = pts.clone();
                let mut pm = pts.clone();
                pp[vi][d] += h;
                pm[vi][d] -= h;
                let fd = (loss_distreg(&pp, &template).unwrap()
                    - loss_distreg(&pm, &template).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(fd, grads[vi][d], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_is_exact_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let (w, h) = (16, 16);
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let template = crate::fixtures::unit_cube();
        let verts = vec![Vector3::new(0.5, 0.5, 1.3)];

        // Paper defaults: ssim weight 0.2, regularizer weight 0.5.
        let l1 = loss_l1(&a, &b).unwrap();
        let ls = crate::metrics::loss_ssim(&a, &b, w, h).unwrap();
        let lr = loss_distreg(&verts, &template).unwrap();
        let total = total_loss(&a, &b, w, h, &verts, &template, 0.2, 0.5).unwrap();
        assert_abs_diff_eq!(total, 0.8 * l1 + 0.2 * ls + 0.5 * lr, epsilon = 1e-12);

        // Zero weights reduce to L1.
        let total = total_loss(&a, &b, w, h, &verts, &template, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(total, l1, epsilon = 1e-15);

        // Perfect render on-template: zero.
        let on = vec![template.vertex(0)];
        let total = total_loss(&a, &a, w, h, &on, &template, 0.2, 0.5).unwrap();
        assert_abs_diff_eq!(total, 0.0, epsilon = 1e-12);
    }
}
