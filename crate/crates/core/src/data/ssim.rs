//! Structural similarity over uniform 8x8 windows at stride 1.

use super::GrayImage;
use crate::error::{ensure, Result};

pub const WINDOW: usize = 8;
/// Dynamic range of the pixel values.
const L: f64 = 1.0;
pub const C1: f64 = (0.01 * L) * (0.01 * L);
pub const C2: f64 = (0.03 * L) * (0.03 * L);

/// Mean SSIM index over every window position. Window statistics use
/// population (1/n) moments.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ensure!(
        a.width() == b.width() && a.height() == b.height(),
        "ssim: {}x{} vs {}x{}",
        a.width(),
        a.height(),
        b.width(),
        b.height()
    );
    ensure!(a.width() >= WINDOW && a.height() >= WINDOW, "ssim: image smaller than the {WINDOW}x{WINDOW} window");
    let n = (WINDOW * WINDOW) as f64;
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - WINDOW {
        for x0 in 0..=w - WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + WINDOW {
                for x in x0..x0 + WINDOW {
                    let (p, q) = (a.get(x, y) as f64, b.get(x, y) as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(seed: u32) -> GrayImage {
        let px = (0..256).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 999.0).collect();
        GrayImage::new(16, 16, px).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let a = pattern(3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_vs_white_closed_form() {
        let s = ssim(&GrayImage::filled(8, 8, 0.0), &GrayImage::filled(8, 8, 1.0)).unwrap();
        assert!((s - C1 / (1.0 + C1)).abs() < 1e-15);
        assert!((s - 1e-4).abs() < 1e-7);
    }

    #[test]
    fn symmetric_and_bounded() {
        let (a, b) = (pattern(1), pattern(99));
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert_eq!(ab, ba);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(ssim(&GrayImage::filled(8, 8, 0.0), &GrayImage::filled(9, 8, 0.0)).is_err());
    }
}
