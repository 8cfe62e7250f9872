//! Plain (non-differentiable) evaluation metrics.

use crate::real::Real;
use crate::trainer::loss::{ssim_window, SSIM_K1, SSIM_K2, SSIM_WINDOW};

/// −10·log₁₀(MSE) for range-1 images; 99 dB when MSE < 1e-10.
pub fn psnr<T: Real>(rendered: &[T], gt: &[T]) -> f64 {
    debug_assert_eq!(rendered.len(), gt.len());
    let mut mse = 0.0f64;
    for (a, b) in rendered.iter().zip(gt) {
        let d = a.as_f64() - b.as_f64();
        mse += d * d;
    }
    mse /= rendered.len() as f64;
    if mse < 1e-10 {
        99.0
    } else {
        -10.0 * mse.log10()
    }
}

/// Mean SSIM, same constants and zero-padded Gaussian window as the loss.
pub fn ssim_metric<T: Real>(x: &[T], y: &[T], height: usize, width: usize, channels: usize) -> f64 {
    let win = ssim_window::<f64>();
    let r = SSIM_WINDOW as i64 / 2;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let at = |buf: &[T], py: i64, px: i64, ch: usize| -> f64 {
        buf[((py as usize) * width + px as usize) * channels + ch].as_f64()
    };
    let mut total = 0.0;
    for py in 0..height as i64 {
        for px in 0..width as i64 {
            for ch in 0..channels {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (py + dy, px + dx);
                        if sy < 0 || sy >= height as i64 || sx < 0 || sx >= width as i64 {
                            continue;
                        }
                        let kv = win[((dy + r) * (2 * r + 1) + dx + r) as usize];
                        let xv = at(x, sy, sx, ch);
                        let yv = at(y, sy, sx, ch);
                        mx += kv * xv;
                        my += kv * yv;
                        mxx += kv * xv * xv;
                        myy += kv * yv * yv;
                        mxy += kv * xv * yv;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * (mxy - mx * my) + c2))
                    / ((mx * mx + my * my + c1) * ((mxx - mx * mx) + (myy - my * my) + c2));
            }
        }
    }
    total / (height * width * channels) as f64
}

/// (mean cosine distance, mean Euclidean distance) between per-pixel feature
/// rows.
pub fn feature_metrics<T: Real>(pred: &[T], gt: &[f32], dim: usize) -> (f64, f64) {
    debug_assert_eq!(pred.len(), gt.len());
    let px = pred.len() / dim;
    let mut cos_total = 0.0;
    let mut l2_total = 0.0;
    for p in 0..px {
        let (mut dot, mut np, mut ng, mut dd) = (0.0f64, 0.0, 0.0, 0.0);
        for i in 0..dim {
            let a = pred[p * dim + i].as_f64();
            let b = gt[p * dim + i] as f64;
            dot += a * b;
            np += a * a;
            ng += b * b;
            dd += (a - b) * (a - b);
        }
        cos_total += 1.0 - dot / (np.sqrt() * ng.sqrt() + 1e-8);
        l2_total += dd.sqrt();
    }
    (cos_total / px as f64, l2_total / px as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_form_and_cap() {
        // MSE = 0.01 → 20 dB.
        let gt = vec![0.0f64; 100];
        let rendered = vec![0.1f64; 100];
        assert!((psnr(&rendered, &gt) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&gt, &gt), 99.0);
    }

    #[test]
    fn identical_maps_have_zero_distance() {
        let v: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let (cos, l2) = feature_metrics(&v, &v32, 8);
        assert!(cos.abs() < 1e-6 && l2 < 1e-6);
    }

    #[test]
    fn feature_metrics_match_flat_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (px, d) = (23, 5);
        let pred: Vec<f64> = (0..px * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gt: Vec<f32> = (0..px * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let (cos, l2) = feature_metrics(&pred, &gt, d);
        let mut cos_want = 0.0;
        let mut l2_want = 0.0;
        for p in 0..px {
            let mut dot = 0.0;
            let mut np = 0.0;
            let mut ng = 0.0;
            let mut dd = 0.0;
            for i in 0..d {
                let a = pred[p * d + i];
                let b = gt[p * d + i] as f64;
                dot += a * b;
                np += a * a;
                ng += b * b;
                dd += (a - b) * (a - b);
            }
            cos_want += 1.0 - dot / (np.sqrt() * ng.sqrt() + 1e-8);
            l2_want += dd.sqrt();
        }
        assert!((cos - cos_want / px as f64).abs() < 1e-12);
        assert!((l2 - l2_want / px as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_metric_self_comparison_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img: Vec<f64> = (0..12 * 12 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!((ssim_metric(&img, &img, 12, 12, 3) - 1.0).abs() < 1e-12);
    }
}
