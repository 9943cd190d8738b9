//! Image quality metrics: windowed SSIM, PSNR, and MSE.
//!
//! SSIM slides an 8×8 window with stride 1 over every channel and averages
//! the per-window scores. Both images run through the same statistics code,
//! so comparing an image with itself gives numerator == denominator bitwise
//! and a score of exactly 1.0.

use crate::error::TensorError;
use crate::img::Image;

type Result<T> = std::result::Result<T, TensorError>;

/// Window side length. Chosen to fit several windows into a 16×16 image;
/// recorded in report metadata by the callers.
pub const SSIM_WINDOW: usize = 8;
/// Stabilizer (0.01)² for the luminance term, pixel range [0, 1].
pub const SSIM_C1: f64 = 0.01 * 0.01;
/// Stabilizer (0.03)² for the contrast term.
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: (a.h, a.w),
            rhs: (b.h, b.w),
        });
    }
    Ok(())
}

/// Mean and population variance of one window, plus covariance with the
/// paired window. Deviations are taken against the means (two-pass), not via
/// E[x²] − μ², for numerical robustness.
fn window_stats(
    a: &Image,
    b: &Image,
    c: usize,
    y0: usize,
    x0: usize,
) -> (f64, f64, f64, f64, f64) {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for y in y0..y0 + SSIM_WINDOW {
        for x in x0..x0 + SSIM_WINDOW {
            sum_a += a.get(y, x, c);
            sum_b += b.get(y, x, c);
        }
    }
    let mu_a = sum_a / n;
    let mu_b = sum_b / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for y in y0..y0 + SSIM_WINDOW {
        for x in x0..x0 + SSIM_WINDOW {
            let da = a.get(y, x, c) - mu_a;
            let db = b.get(y, x, c) - mu_b;
            var_a += da * da;
            var_b += db * db;
            cov += da * db;
        }
    }
    (mu_a, mu_b, var_a / n, var_b / n, cov / n)
}

/// Structural similarity, averaged over all 8×8 windows of all channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(TensorError::invalid(
            "ssim",
            format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..Image::CHANNELS {
        for y0 in 0..=a.h - SSIM_WINDOW {
            for x0 in 0..=a.w - SSIM_WINDOW {
                let (mu_a, mu_b, var_a, var_b, cov) = window_stats(a, b, c, y0, x0);
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for a [0, 1] pixel range; +∞ when the
/// images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * e.log10())
    }
}

// ==== tests ====
