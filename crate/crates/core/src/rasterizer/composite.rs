//! Front-to-back α-compositing: reference and tiled paths plus the adjoint.
//!
//! Both paths share one per-pixel kernel and the splat footprint rule, so the
//! tiled path is exactly the reference path with a different pixel visit
//! order; per-pixel results are identical. Tiles are independent work units;
//! per-Gaussian statistics and splat gradients are folded in tile order to
//! keep every run bit-reproducible regardless of thread count.

use rayon::prelude::*;

use super::{RenderOptions, RenderOutput, Splat2D};
use crate::math::{Mat2, Vec2};
use crate::real::{rl, Real};

/// Per-splat adjoints from the compositing pass. Mean/cov/alpha are indexed
/// like the splat list; payload gradients are per source Gaussian.
#[derive(Debug, Clone)]
pub struct SplatGrads<T> {
    pub d_mean: Vec<Vec2<T>>,
    pub d_cov: Vec<Mat2<T>>,
    pub d_alpha: Vec<T>,
    pub d_payload: Vec<T>,
}

struct PixelStats<'a, T> {
    contrib: &'a mut [T],
    hits: &'a mut [u32],
}

/// Composite every covering splat into one pixel, front to back.
/// `which` maps local bin order to splat indices (already depth sorted).
#[inline]
fn forward_pixel<T: Real>(
    px: i32,
    py: i32,
    which: &[u32],
    splats: &[Splat2D<T>],
    payload: &[T],
    pdim: usize,
    opts: &RenderOptions<T>,
    out_row: &mut [T],
    stats: &mut PixelStats<'_, T>,
) {
    let ux = rl::<T>(px as f64 + 0.5);
    let uy = rl::<T>(py as f64 + 0.5);
    let mut transmittance = T::one();
    for (local, &si) in which.iter().enumerate() {
        let s = &splats[si as usize];
        if !s.covers(px, py) {
            continue;
        }
        let g = s.gaussian_at(ux, uy);
        let u = s.alpha * g;
        let w = transmittance * u;
        let p = &payload[s.gauss as usize * pdim..(s.gauss as usize + 1) * pdim];
        for (o, &pc) in out_row[..pdim].iter_mut().zip(p) {
            *o += w * pc;
        }
        out_row[pdim] += w;
        stats.contrib[local] += w;
        if u > opts.hit_threshold {
            stats.hits[local] += 1;
        }
        transmittance *= T::one() - u;
        if transmittance < opts.early_stop {
            break;
        }
    }
}

fn empty_output<T: Real>(
    width: usize,
    height: usize,
    pdim: usize,
    gauss_count: usize,
) -> RenderOutput<T> {
    RenderOutput {
        width,
        height,
        channels: vec![T::zero(); width * height * (pdim + 1)],
        payload_dim: pdim,
        contrib: vec![T::zero(); gauss_count],
        hits: vec![0; gauss_count],
        culled: 0,
        singular: 0,
    }
}

/// Reference compositor: per pixel, walk the whole sorted splat list.
pub fn composite_reference<T: Real>(
    splats: &[Splat2D<T>],
    payload: &[T],
    pdim: usize,
    gauss_count: usize,
    width: usize,
    height: usize,
    opts: &RenderOptions<T>,
) -> RenderOutput<T> {
    let mut out = empty_output(width, height, pdim, gauss_count);
    let all: Vec<u32> = (0..splats.len() as u32).collect();
    let mut contrib_local = vec![T::zero(); splats.len()];
    let mut hits_local = vec![0u32; splats.len()];
    let row_w = pdim + 1;
    for py in 0..height as i32 {
        for px in 0..width as i32 {
            let o = (py as usize * width + px as usize) * row_w;
            forward_pixel(
                px,
                py,
                &all,
                splats,
                payload,
                pdim,
                opts,
                &mut out.channels[o..o + row_w],
                &mut PixelStats {
                    contrib: &mut contrib_local,
                    hits: &mut hits_local,
                },
            );
        }
    }
    for (s, (&c, &h)) in splats.iter().zip(contrib_local.iter().zip(&hits_local)) {
        out.contrib[s.gauss as usize] += c;
        out.hits[s.gauss as usize] += h;
    }
    out
}

struct Tiling {
    tiles_x: usize,
    tiles_y: usize,
    tile: usize,
}

impl Tiling {
    fn new(width: usize, height: usize, tile: usize) -> Self {
        Tiling {
            tiles_x: width.div_ceil(tile),
            tiles_y: height.div_ceil(tile),
            tile,
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel rect of tile t: (x0, y0, x1, y1) half-open.
    fn rect(&self, t: usize, width: usize, height: usize) -> (i32, i32, i32, i32) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (
            x0 as i32,
            y0 as i32,
            ((x0 + self.tile).min(width)) as i32,
            ((y0 + self.tile).min(height)) as i32,
        )
    }
}

/// Bin sorted splats into tiles by footprint overlap; bins keep depth order.
fn bin_splats<T: Real>(
    splats: &[Splat2D<T>],
    tiling: &Tiling,
    width: usize,
    height: usize,
) -> Vec<Vec<u32>> {
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiling.count()];
    for (i, s) in splats.iter().enumerate() {
        if s.x_lo > s.x_hi || s.y_lo > s.y_hi {
            continue; // footprint off-screen or empty
        }
        let tx0 = (s.x_lo.max(0) as usize) / tiling.tile;
        let tx1 = ((s.x_hi.min(width as i32 - 1)) as usize) / tiling.tile;
        let ty0 = (s.y_lo.max(0) as usize) / tiling.tile;
        let ty1 = ((s.y_hi.min(height as i32 - 1)) as usize) / tiling.tile;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiling.tiles_x + tx].push(i as u32);
            }
        }
    }
    bins
}

/// Tiled compositor: identical per-pixel semantics to the reference path via
/// footprint binning; deterministic tile-order reduction for the statistics.
pub fn composite_tiled<T: Real>(
    splats: &[Splat2D<T>],
    payload: &[T],
    pdim: usize,
    gauss_count: usize,
    width: usize,
    height: usize,
    opts: &RenderOptions<T>,
) -> RenderOutput<T> {
    let tiling = Tiling::new(width, height, opts.tile_size.max(1));
    let bins = bin_splats(splats, &tiling, width, height);
    let row_w = pdim + 1;

    struct TileOut<T> {
        pixels: Vec<T>,
        contrib: Vec<T>,
        hits: Vec<u32>,
    }

    let tiles: Vec<TileOut<T>> = (0..tiling.count())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tiling.rect(t, width, height);
            let bin = &bins[t];
            let tw = (x1 - x0) as usize;
            let th = (y1 - y0) as usize;
            let mut pixels = vec![T::zero(); tw * th * row_w];
            let mut contrib = vec![T::zero(); bin.len()];
            let mut hits = vec![0u32; bin.len()];
            for py in y0..y1 {
                for px in x0..x1 {
                    let o = (((py - y0) as usize) * tw + (px - x0) as usize) * row_w;
                    forward_pixel(
                        px,
                        py,
                        bin,
                        splats,
                        payload,
                        pdim,
                        opts,
                        &mut pixels[o..o + row_w],
                        &mut PixelStats {
                            contrib: &mut contrib,
                            hits: &mut hits,
                        },
                    );
                }
            }
            TileOut {
                pixels,
                contrib,
                hits,
            }
        })
        .collect();

    let mut out = empty_output(width, height, pdim, gauss_count);
    for (t, tile_out) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tiling.rect(t, width, height);
        let tw = (x1 - x0) as usize;
        for py in y0..y1 {
            let src = (((py - y0) as usize) * tw) * row_w;
            let dst = ((py as usize) * width + x0 as usize) * row_w;
            out.channels[dst..dst + tw * row_w]
                .copy_from_slice(&tile_out.pixels[src..src + tw * row_w]);
        }
        for (local, &si) in bins[t].iter().enumerate() {
            let g = splats[si as usize].gauss as usize;
            out.contrib[g] += tile_out.contrib[local];
            out.hits[g] += tile_out.hits[local];
        }
    }
    out
}

/// Adjoint of the compositing pass (either mode; tiling mirrors forward).
#[allow(clippy::too_many_arguments)]
pub fn composite_backward<T: Real>(
    splats: &[Splat2D<T>],
    payload: &[T],
    pdim: usize,
    gauss_count: usize,
    width: usize,
    height: usize,
    opts: &RenderOptions<T>,
    forward_channels: &[T],
    grad_channels: &[T],
    mode: super::CompositeMode,
) -> SplatGrads<T> {
    let row_w = pdim + 1;
    let zero2 = [T::zero(); 2];
    let zerom = [[T::zero(); 2]; 2];
    let mut grads = SplatGrads {
        d_mean: vec![zero2; splats.len()],
        d_cov: vec![zerom; splats.len()],
        d_alpha: vec![T::zero(); splats.len()],
        d_payload: vec![T::zero(); gauss_count * pdim],
    };

    struct TileGrads<T> {
        d_mean: Vec<Vec2<T>>,
        d_cov: Vec<Mat2<T>>,
        d_alpha: Vec<T>,
        /// bin-local, bin_len × pdim
        d_payload: Vec<T>,
    }

    let run_tile = |bin: &[u32], x0: i32, y0: i32, x1: i32, y1: i32| -> TileGrads<T> {
        let mut tg = TileGrads {
            d_mean: vec![zero2; bin.len()],
            d_cov: vec![zerom; bin.len()],
            d_alpha: vec![T::zero(); bin.len()],
            d_payload: vec![T::zero(); bin.len() * pdim],
        };
        for py in y0..y1 {
            for px in x0..x1 {
                let o = (py as usize * width + px as usize) * row_w;
                backward_pixel(
                    px,
                    py,
                    bin,
                    splats,
                    payload,
                    pdim,
                    opts,
                    &forward_channels[o..o + row_w],
                    &grad_channels[o..o + row_w],
                    &mut tg.d_mean,
                    &mut tg.d_cov,
                    &mut tg.d_alpha,
                    &mut tg.d_payload,
                );
            }
        }
        tg
    };

    let fold = |grads: &mut SplatGrads<T>, bin: &[u32], tg: TileGrads<T>| {
        for (local, &si) in bin.iter().enumerate() {
            let s = si as usize;
            grads.d_mean[s][0] += tg.d_mean[local][0];
            grads.d_mean[s][1] += tg.d_mean[local][1];
            for i in 0..2 {
                for j in 0..2 {
                    grads.d_cov[s][i][j] += tg.d_cov[local][i][j];
                }
            }
            grads.d_alpha[s] += tg.d_alpha[local];
            let base = splats[s].gauss as usize * pdim;
            for c in 0..pdim {
                grads.d_payload[base + c] += tg.d_payload[local * pdim + c];
            }
        }
    };

    match mode {
        super::CompositeMode::Reference => {
            let all: Vec<u32> = (0..splats.len() as u32).collect();
            let tg = run_tile(&all, 0, 0, width as i32, height as i32);
            fold(&mut grads, &all, tg);
        }
        super::CompositeMode::Tiled => {
            let tiling = Tiling::new(width, height, opts.tile_size.max(1));
            let bins = bin_splats(splats, &tiling, width, height);
            let tiles: Vec<TileGrads<T>> = (0..tiling.count())
                .into_par_iter()
                .map(|t| {
                    let (x0, y0, x1, y1) = tiling.rect(t, width, height);
                    run_tile(&bins[t], x0, y0, x1, y1)
                })
                .collect();
            for (t, tg) in tiles.into_iter().enumerate() {
                fold(&mut grads, &bins[t], tg);
            }
        }
    }
    grads
}

/// Adjoint of [`forward_pixel`]. `accum` is the forward output row for this
/// pixel (payload channels + alpha), `g_row` the upstream gradient row.
/// Payload grads land in the bin-local slot array.
#[inline]
#[allow(clippy::too_many_arguments)]
fn backward_pixel<T: Real>(
    px: i32,
    py: i32,
    which: &[u32],
    splats: &[Splat2D<T>],
    payload: &[T],
    pdim: usize,
    opts: &RenderOptions<T>,
    accum: &[T],
    g_row: &[T],
    d_mean: &mut [Vec2<T>],
    d_cov: &mut [Mat2<T>],
    d_alpha: &mut [T],
    d_payload_local: &mut [T],
) {
    let ux = rl::<T>(px as f64 + 0.5);
    let uy = rl::<T>(py as f64 + 0.5);
    let g_alpha = g_row[pdim];
    let half = rl::<T>(0.5);
    let tiny = rl::<T>(1e-12);

    let mut rear: Vec<T> = accum[..pdim].to_vec();
    let mut rear_alpha = accum[pdim];
    let mut transmittance = T::one();

    for (local, &si) in which.iter().enumerate() {
        let s = &splats[si as usize];
        if !s.covers(px, py) {
            continue;
        }
        let dx = ux - s.mean[0];
        let dy = uy - s.mean[1];
        let q0 = s.inv_cov[0][0] * dx + s.inv_cov[0][1] * dy;
        let q1 = s.inv_cov[1][0] * dx + s.inv_cov[1][1] * dy;
        let e = (-(q0 * dx + q1 * dy) * half).exp();
        let u = s.alpha * e;
        let w = transmittance * u;

        let gi = s.gauss as usize;
        let p = &payload[gi * pdim..(gi + 1) * pdim];
        let mut front_dot = g_alpha;
        let mut rear_dot = g_alpha * rear_alpha;
        for c in 0..pdim {
            front_dot += g_row[c] * p[c];
            rear_dot += g_row[c] * rear[c];
            d_payload_local[local * pdim + c] += w * g_row[c];
            rear[c] -= w * p[c];
        }
        rear_alpha -= w;
        rear_dot -= w * front_dot;

        let one_minus_u = T::one() - u;
        let du = if one_minus_u.abs() <= tiny {
            transmittance * front_dot
        } else {
            transmittance * front_dot - rear_dot / one_minus_u
        };

        d_alpha[local] += e * du;
        let dg = s.alpha * du;
        let ge = dg * e;
        d_mean[local][0] += ge * q0;
        d_mean[local][1] += ge * q1;
        let hg = half * ge;
        d_cov[local][0][0] += hg * q0 * q0;
        d_cov[local][0][1] += hg * q0 * q1;
        d_cov[local][1][0] += hg * q1 * q0;
        d_cov[local][1][1] += hg * q1 * q1;

        transmittance *= one_minus_u;
        if transmittance < opts.early_stop {
            break;
        }
    }
}
