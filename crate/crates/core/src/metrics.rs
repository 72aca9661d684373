//! Image quality metrics: PSNR and single-scale SSIM (11x11 Gaussian window,
//! sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1), computed on valid
//! windows only, averaged over channels. The SSIM here also provides the
//! analytic gradient used by the training loss.

use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = (K1 * 1.0) * (K1 * 1.0);
const C2: f64 = (K2 * 1.0) * (K2 * 1.0);

/// PSNR in dB for unit-range images, capped at 99 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "psnr inputs {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter of one channel.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, ki) in k.iter().enumerate() {
                acc += ki * src[y * w + x + i];
            }
            tmp[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, ki) in k.iter().enumerate() {
                acc += ki * tmp[(y + i) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

fn extract_channel(img: &[f64], ch: usize) -> Vec<f64> {
    img.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM over valid windows and channels. Inputs are H x W x 3
/// interleaved, unit range.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check_dims(a, b, width, height)?;
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..3 {
        let x = extract_channel(a, ch);
        let y = extract_channel(b, ch);
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let mu_x = filter_valid(&x, width, height, &k);
        let mu_y = filter_valid(&y, width, height, &k);
        let e_x2 = filter_valid(&x2, width, height, &k);
        let e_y2 = filter_valid(&y2, width, height, &k);
        let e_xy = filter_valid(&xy, width, height, &k);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let sx = e_x2[i] - mu_x[i] * mu_x[i];
            let sy = e_y2[i] - mu_y[i] * mu_y[i];
            let sxy = e_xy[i] - mu_x[i] * mu_y[i];
            let n1 = 2.0 * mu_x[i] * mu_y[i] + C1;
            let n2 = 2.0 * sxy + C2;
            let d1 = mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + C1;
            let d2 = sx + sy + C2;
            acc += (n1 * n2) / (d1 * d2);
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / 3.0)
}

fn check_dims(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<()> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            w: width,
            h: height,
        });
    }
    if a.len() != width * height * 3 || b.len() != a.len() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {} / {} for {}x{}x3",
            a.len(),
            b.len(),
            width,
            height
        )));
    }
    Ok(())
}

/// SSIM loss (1 - mean SSIM).
pub fn loss_ssim(rendered: &[f64], target: &[f64], width: usize, height: usize) -> Result<f64> {
    Ok(1.0 - ssim(rendered, target, width, height)?)
}

/// SSIM loss and its gradient with respect to the rendered image.
pub fn loss_ssim_backward(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
) -> Result<(f64, Vec<f64>)> {
    check_dims(rendered, target, width, height)?;
    let k = gaussian_kernel();
    let vw = width - SSIM_WINDOW + 1;
    let vh = height - SSIM_WINDOW + 1;
    let n_valid = (vw * vh) as f64;
    let mut grad = vec![0.0; rendered.len()];
    let mut total = 0.0;

    for ch in 0..3 {
        let x = extract_channel(rendered, ch);
        let y = extract_channel(target, ch);
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let mu_x = filter_valid(&x, width, height, &k);
        let mu_y = filter_valid(&y, width, height, &k);
        let e_x2 = filter_valid(&x2, width, height, &k);
        let e_y2 = filter_valid(&y2, width, height, &k);
        let e_xy = filter_valid(&xy, width, height, &k);

        // Per-valid-pixel partials with respect to mu_x, E[x^2], E[xy].
        let mut d_mu_x = vec![0.0; mu_x.len()];
        let mut d_ex2 = vec![0.0; mu_x.len()];
        let mut d_exy = vec![0.0; mu_x.len()];
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let sx = e_x2[i] - mu_x[i] * mu_x[i];
            let sy = e_y2[i] - mu_y[i] * mu_y[i];
            let sxy = e_xy[i] - mu_x[i] * mu_y[i];
            let n1 = 2.0 * mu_x[i] * mu_y[i] + C1;
            let n2 = 2.0 * sxy + C2;
            let d1 = mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + C1;
            let d2 = sx + sy + C2;
            let s = (n1 * n2) / (d1 * d2);
            acc += s;

            // Loss = 1 - mean(s): scale by -1 / (n_valid * channels).
            let w = -1.0 / (n_valid * 3.0);
            let ds_dn1 = n2 / (d1 * d2);
            let ds_dn2 = n1 / (d1 * d2);
            let ds_dd1 = -s / d1;
            let ds_dd2 = -s / d2;
            // sigma_x^2 = E[x^2] - mu_x^2 ; sigma_xy = E[xy] - mu_x mu_y.
            d_ex2[i] = w * ds_dd2;
            d_exy[i] = w * ds_dn2 * 2.0;
            d_mu_x[i] = w
                * (ds_dn1 * 2.0 * mu_y[i] + ds_dd1 * 2.0 * mu_x[i]
                    - ds_dd2 * 2.0 * mu_x[i]
                    - ds_dn2 * 2.0 * mu_y[i]);
        }
        total += acc / n_valid;

        // Scatter back through the separable filter (transposed convolution).
        for vy in 0..vh {
            for vx in 0..vw {
                let i = vy * vw + vx;
                let gm = d_mu_x[i];
                let g2 = d_ex2[i];
                let gxy = d_exy[i];
                if gm == 0.0 && g2 == 0.0 && gxy == 0.0 {
                    continue;
                }
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let q = (vy + ky) * width + (vx + kx);
                        let kw = k[ky] * k[kx];
                        grad[q * 3 + ch] += kw * (gm + g2 * 2.0 * x[q] + gxy * y[q]);
                    }
                }
            }
        }
    }
    Ok((1.0 - total / 3.0, grad))
}
