//! PSNR, SSIM and mean absolute error.

use ndarray::Array2;

use crate::error::{Error, Result};

/// `10 log10(peak^2 / mse)`; identical images give `+inf`.
pub fn psnr(x_rec: &Array2<f64>, x_true: &Array2<f64>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::Argument(format!("psnr peak must be > 0, got {peak}")));
    }
    check_same_shape(x_rec, x_true)?;
    let mse = x_rec
        .iter()
        .zip(x_true.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x_rec.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn mae(x_rec: &Array2<f64>, x_true: &Array2<f64>) -> Result<f64> {
    check_same_shape(x_rec, x_true)?;
    Ok(x_rec
        .iter()
        .zip(x_true.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x_rec.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean local SSIM over all fully-contained Gaussian windows with the
/// standard stabilizers `C1 = (k1 peak)^2`, `C2 = (k2 peak)^2`.
pub fn ssim(x_rec: &Array2<f64>, x_true: &Array2<f64>, peak: f64) -> Result<f64> {
    ssim_with(x_rec, x_true, peak, SsimConfig::default())
}

pub fn ssim_with(
    x_rec: &Array2<f64>,
    x_true: &Array2<f64>,
    peak: f64,
    cfg: SsimConfig,
) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::Argument(format!("ssim peak must be > 0, got {peak}")));
    }
    check_same_shape(x_rec, x_true)?;
    let (h, w) = x_rec.dim();
    let win = cfg.window;
    if win == 0 || win % 2 == 0 {
        return Err(Error::Argument("ssim window must be odd".into()));
    }
    if win > h || win > w {
        return Err(Error::Argument(format!(
            "ssim window {win} larger than image {h}x{w}"
        )));
    }

    let kernel = gaussian_kernel(win, cfg.sigma);
    let c1 = (cfg.k1 * peak) * (cfg.k1 * peak);
    let c2 = (cfg.k2 * peak) * (cfg.k2 * peak);

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - win) {
        for ox in 0..=(w - win) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..win {
                for kx in 0..win {
                    let g = kernel[ky * win + kx];
                    let a = x_rec[[oy + ky, ox + kx]];
                    let b = x_true[[oy + ky, ox + kx]];
                    mu_a += g * a;
                    mu_b += g * b;
                    aa += g * a * a;
                    bb += g * b * b;
                    ab += g * a * b;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let half = (win / 2) as f64;
    let mut k = vec![0.0; win * win];
    let mut sum = 0.0;
    for y in 0..win {
        for x in 0..win {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            k[y * win + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| ((y * w + x) as f64) / ((h * w) as f64))
    }

    #[test]
    fn psnr_zero_db_when_mse_equals_peak_squared() {
        let a = Array2::zeros((4, 4));
        let b = Array2::from_elem((4, 4), 2.0);
        // mse = 4 = peak^2 with peak 2
        let v = psnr(&a, &b, 2.0).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn psnr_constant_offset_closed_form() {
        let a = ramp(8, 8);
        let b = &a + 0.1;
        let v = psnr(&b.to_owned(), &a, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn psnr_scale_invariance() {
        let a = ramp(8, 8);
        let b = &a + 0.05;
        let v1 = psnr(&b.to_owned(), &a, 1.0).unwrap();
        let a2 = a.mapv(|v| v * 2.0);
        let b2 = b.mapv(|v| v * 2.0);
        let v2 = psnr(&b2, &a2, 2.0).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn psnr_identical_images_is_infinite() {
        let a = ramp(4, 4);
        assert!(psnr(&a, &a.clone(), 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_rejects_nonpositive_peak() {
        let a = ramp(4, 4);
        assert!(psnr(&a, &a.clone(), 0.0).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = ramp(16, 16);
        let v = ssim(&a, &a.clone(), 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = ramp(16, 16);
        let b = a.mapv(|v| (v * 3.0).sin() * 0.5 + 0.5);
        let v1 = ssim(&a, &b, 1.0).unwrap();
        let v2 = ssim(&b, &a, 1.0).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_half_plane_is_low() {
        let a = Array2::from_shape_fn((16, 16), |(y, _)| if y < 8 { 1.0 } else { 0.0 });
        let inv = a.mapv(|v| 1.0 - v);
        let v = ssim(&a, &inv, 1.0).unwrap();
        assert!(v < 0.1, "{v}");
    }

    #[test]
    fn ssim_window_larger_than_image_is_an_error() {
        let a = ramp(8, 8);
        assert!(matches!(
            ssim(&a, &a.clone(), 1.0),
            Err(Error::Argument(_))
        ));
    }
}
