//! Differentiable loss terms: photometric L1 + SSIM, anchor-scale
//! regularization, and multimodal feature alignment (ℓ2 + cosine).

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::Result;
use crate::real::{rl, Real};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 2-D Gaussian window for SSIM statistics.
pub fn ssim_window<T: Real>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut total = 0.0f64;
    for y in -r..=r {
        for x in -r..=r {
            let v = (-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            total += v;
            w.push(v);
        }
    }
    w.into_iter().map(|v| rl::<T>(v / total)).collect()
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, img: NodeId, gt: NodeId) -> Result<NodeId> {
    let diff = tape.sub(img, gt)?;
    let a = tape.abs(diff);
    Ok(tape.mean_all(a))
}

/// Mean SSIM over pixels and channels, zero-padded windowed statistics,
/// dynamic range 1. Returns the SSIM value (the loss is 1 − SSIM).
pub fn ssim<T: Real>(
    tape: &mut Tape<T>,
    img: NodeId,
    gt: NodeId,
    height: usize,
    width: usize,
) -> Result<NodeId> {
    let kernel = ssim_window::<T>();
    let c1 = rl::<T>(SSIM_K1 * SSIM_K1);
    let c2 = rl::<T>(SSIM_K2 * SSIM_K2);
    let conv = |tape: &mut Tape<T>, x: NodeId| {
        tape.conv2d_same(x, height, width, SSIM_WINDOW, SSIM_WINDOW, kernel.clone())
    };

    let mu_x = conv(tape, img)?;
    let mu_y = conv(tape, gt)?;
    let xx = tape.mul(img, img)?;
    let yy = tape.mul(gt, gt)?;
    let xy = tape.mul(img, gt)?;
    let e_xx = conv(tape, xx)?;
    let e_yy = conv(tape, yy)?;
    let e_xy = conv(tape, xy)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov_xy = tape.sub(e_xy, mu_xy)?;

    let two = rl::<T>(2.0);
    let n1 = tape.mul_scalar(mu_xy, two);
    let n1 = tape.add_scalar(n1, c1);
    let n2 = tape.mul_scalar(cov_xy, two);
    let n2 = tape.add_scalar(n2, c2);
    let num = tape.mul(n1, n2)?;

    let d1 = tape.add(mu_xx, mu_yy)?;
    let d1 = tape.add_scalar(d1, c1);
    let d2 = tape.add(var_x, var_y)?;
    let d2 = tape.add_scalar(d2, c2);
    let den = tape.mul(d1, d2)?;

    let map = tape.div(num, den)?;
    Ok(tape.mean_all(map))
}

/// Mean over visible Gaussians of the product of the three decoded scale
/// axes. `visible` marks Gaussians that survived culling this view.
pub fn scale_loss<T: Real>(
    tape: &mut Tape<T>,
    scales: NodeId,
    visible: &[bool],
) -> Result<NodeId> {
    let sx = tape.slice_cols(scales, 0, 1)?;
    let sy = tape.slice_cols(scales, 1, 2)?;
    let sz = tape.slice_cols(scales, 2, 3)?;
    let xy = tape.mul(sx, sy)?;
    let vol = tape.mul(xy, sz)?;
    let count = visible.iter().filter(|&&v| v).count();
    if count == 0 {
        let s = tape.sum_all(vol);
        return Ok(tape.mul_scalar(s, T::zero()));
    }
    let mask: Vec<T> = visible
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    let mask = tape.constant(Tensor::new(vec![visible.len(), 1], mask)?);
    let masked = tape.mul(vol, mask)?;
    let sum = tape.sum_all(masked);
    Ok(tape.mul_scalar(sum, T::one() / rl::<T>(count as f64)))
}

/// Feature alignment for one model:
/// mean_px ‖f_pred − f_gt‖² + mean_px (1 − cos(f_pred, f_gt)).
pub fn feature_loss<T: Real>(tape: &mut Tape<T>, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    let diff = tape.sub(pred, gt)?;
    let sq = tape.mul(diff, diff)?;
    let per_px = tape.sum_cols(sq);
    let l2_term = tape.mean_all(per_px);

    let dots = {
        let prod = tape.mul(pred, gt)?;
        tape.sum_cols(prod)
    };
    let norm_pred = {
        let sq = tape.mul(pred, pred)?;
        let s = tape.sum_cols(sq);
        tape.sqrt(s)
    };
    let norm_gt = {
        let sq = tape.mul(gt, gt)?;
        let s = tape.sum_cols(sq);
        tape.sqrt(s)
    };
    let denom = tape.mul(norm_pred, norm_gt)?;
    let denom = tape.add_scalar(denom, rl::<T>(1e-8));
    let cos = tape.div(dots, denom)?;
    let mean_cos = tape.mean_all(cos);
    let neg = tape.neg(mean_cos);
    let cos_term = tape.add_scalar(neg, T::one());

    tape.add(l2_term, cos_term)
}
