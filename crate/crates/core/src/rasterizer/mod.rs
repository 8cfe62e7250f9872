//! Differentiable projection and front-to-back compositing of RGB plus query
//! channels, with contribution statistics for pruning.
//!
//! `project` linearizes the pinhole map at each Gaussian mean and pushes the
//! world covariance through the Jacobian; compositing comes in a reference
//! (per-pixel over all splats) and a tiled flavor with identical semantics.
//! All adjoints here are hand-derived and covered by finite-difference tests.

mod composite;
mod render_op;

pub use composite::{composite_backward, composite_reference, composite_tiled, SplatGrads};
pub use render_op::{render, RenderResult};

use crate::math::{self, Mat2, Mat3, Vec2, Vec3};
use crate::real::{rl, Real};
use crate::scaffold::Camera;

/// A projected Gaussian ready for compositing. The footprint is the inclusive
/// pixel-index box within 3σ of the mean; both compositing paths honor it,
/// which is what makes tile binning exact.
#[derive(Debug, Clone)]
pub struct Splat2D<T> {
    pub mean: Vec2<T>,
    /// Dilated 2×2 screen-space covariance.
    pub cov: Mat2<T>,
    pub inv_cov: Mat2<T>,
    pub depth: T,
    pub alpha: T,
    /// Index of the source Gaussian (anchor-major, then per-anchor slot).
    pub gauss: u32,
    pub x_lo: i32,
    pub x_hi: i32,
    pub y_lo: i32,
    pub y_hi: i32,
}

impl<T: Real> Splat2D<T> {
    #[inline]
    pub fn covers(&self, px: i32, py: i32) -> bool {
        px >= self.x_lo && px <= self.x_hi && py >= self.y_lo && py <= self.y_hi
    }

    /// exp(−½ dᵀ Σ′⁻¹ d) at a pixel center.
    #[inline]
    pub fn gaussian_at(&self, ux: T, uy: T) -> T {
        let dx = ux - self.mean[0];
        let dy = uy - self.mean[1];
        let q = self.inv_cov[0][0] * dx * dx
            + (self.inv_cov[0][1] + self.inv_cov[1][0]) * dx * dy
            + self.inv_cov[1][1] * dy * dy;
        (-q * rl::<T>(0.5)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositeMode {
    Reference,
    Tiled,
}

#[derive(Debug, Clone)]
pub struct RenderOptions<T> {
    pub tile_size: usize,
    pub znear: T,
    /// Pixel-space low-pass dilation added to Σ′ (3DGS convention).
    pub dilation: T,
    /// Stop compositing a pixel once transmittance drops below this.
    pub early_stop: T,
    /// α·G above this counts as a hit for the contribution statistics.
    pub hit_threshold: T,
    pub mode: CompositeMode,
}

impl<T: Real> Default for RenderOptions<T> {
    fn default() -> Self {
        RenderOptions {
            tile_size: 16,
            znear: rl(0.01),
            dilation: rl(0.3),
            early_stop: rl(1e-4),
            hit_threshold: rl(1.0 / 255.0),
            mode: CompositeMode::Tiled,
        }
    }
}

/// Forward image plus per-Gaussian statistics. Channel layout per pixel:
/// payload channels (rgb then query) followed by the alpha column.
#[derive(Debug, Clone)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// H·W × (payload_dim + 1), row-major.
    pub channels: Vec<T>,
    pub payload_dim: usize,
    /// Σ over pixels of T·α·G, per source Gaussian.
    pub contrib: Vec<T>,
    /// #pixels with α·G above the hit threshold, per source Gaussian.
    pub hits: Vec<u32>,
    pub culled: usize,
    pub singular: usize,
}

impl<T: Real> RenderOutput<T> {
    pub fn alpha_at(&self, px: usize) -> T {
        self.channels[px * (self.payload_dim + 1) + self.payload_dim]
    }

    pub fn payload_at(&self, px: usize) -> &[T] {
        let w = self.payload_dim + 1;
        &self.channels[px * w..px * w + self.payload_dim]
    }
}

// ── covariance composition ───────────────────────────────────────────

/// Σ = R · diag(s²) · Rᵀ from a unit quaternion and per-axis scales.
pub fn covariance<T: Real>(scale: Vec3<T>, quat: [T; 4]) -> Mat3<T> {
    let r = math::quat_to_mat3(quat);
    let d = [scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]];
    let rd = math::mat3_mul_diag(&r, d);
    math::mat3_mul(&rd, &math::mat3_transpose(&r))
}

/// Adjoint of [`covariance`]: upstream gradient on Σ (full 3×3) back to the
/// scales and the unit quaternion.
pub fn covariance_backward<T: Real>(
    scale: Vec3<T>,
    quat: [T; 4],
    d_cov: &Mat3<T>,
) -> (Vec3<T>, [T; 4]) {
    let r = math::quat_to_mat3(quat);
    let rt = math::mat3_transpose(&r);
    let d = [scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]];

    // dL/dD = Rᵀ G R, diagonal only; ds_i = 2 s_i (Rᵀ G R)_ii.
    let rtg = math::mat3_mul(&rt, d_cov);
    let rtgr = math::mat3_mul(&rtg, &r);
    let two = rl::<T>(2.0);
    let d_scale = [
        two * scale[0] * rtgr[0][0],
        two * scale[1] * rtgr[1][1],
        two * scale[2] * rtgr[2][2],
    ];

    // dL/dR = (G + Gᵀ) R D.
    let mut gpgt = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gpgt[i][j] = d_cov[i][j] + d_cov[j][i];
        }
    }
    let rd = math::mat3_mul_diag(&r, d);
    let d_r = math::mat3_mul(&gpgt, &rd);
    let d_quat = math::quat_to_mat3_backward(quat, &d_r);
    (d_scale, d_quat)
}

// ── projection ───────────────────────────────────────────────────────

pub enum Projected<T> {
    /// z ≤ znear; excluded from the splat list, not an error.
    Culled,
    /// Σ′ not invertible; skipped and counted.
    Singular,
    Splat(Splat2D<T>),
}

/// Project one Gaussian: camera transform, perspective mean projection,
/// Σ′ = J Σ_cam Jᵀ + dilation·I, depth = camera z.
pub fn project<T: Real>(
    mu: Vec3<T>,
    cov_world: &Mat3<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Projected<T> {
    let p = cam.world_to_cam(mu);
    if p[2] <= opts.znear {
        return Projected::Culled;
    }
    let (x, y, z) = (p[0], p[1], p[2]);
    let zinv = T::one() / z;
    let mean = [cam.fx * x * zinv + cam.cx, cam.fy * y * zinv + cam.cy];

    let j = perspective_jacobian(cam, p);
    let cov_cam = sandwich_3x3(&cam.rotation, cov_world);
    let mut cov2 = sandwich_2x3(&j, &cov_cam);
    cov2[0][0] += opts.dilation;
    cov2[1][1] += opts.dilation;

    let Some((inv_cov, _det)) = math::mat2_inverse(&cov2, rl(1e-12)) else {
        return Projected::Singular;
    };

    // 3σ footprint over pixel centers, clamped to the image.
    let (lmax, _) = math::sym_mat2_eigenvalues(&cov2);
    let r = rl::<T>(3.0) * lmax.max(T::zero()).sqrt();
    let half = rl::<T>(0.5);
    let x_lo = (mean[0] - r - half).ceil().as_f64() as i64;
    let x_hi = (mean[0] + r - half).floor().as_f64() as i64;
    let y_lo = (mean[1] - r - half).ceil().as_f64() as i64;
    let y_hi = (mean[1] + r - half).floor().as_f64() as i64;
    let clamp = |v: i64, hi: usize| -> i32 { v.clamp(-1, hi as i64) as i32 };

    Projected::Splat(Splat2D {
        mean,
        cov: cov2,
        inv_cov,
        depth: z,
        alpha: T::zero(),
        gauss: 0,
        x_lo: clamp(x_lo.max(0), cam.width),
        x_hi: clamp(x_hi, cam.width.saturating_sub(1)),
        y_lo: clamp(y_lo.max(0), cam.height),
        y_hi: clamp(y_hi, cam.height.saturating_sub(1)),
    })
}

/// Adjoint of [`project`]: gradients on the 2-D mean and dilated covariance
/// back to the world-space mean and covariance.
pub fn project_backward<T: Real>(
    mu: Vec3<T>,
    cov_world: &Mat3<T>,
    cam: &Camera<T>,
    d_mean: Vec2<T>,
    d_cov2: &Mat2<T>,
) -> (Vec3<T>, Mat3<T>) {
    let p = cam.world_to_cam(mu);
    let (x, y, z) = (p[0], p[1], p[2]);
    let zinv = T::one() / z;
    let zinv2 = zinv * zinv;
    let j = perspective_jacobian(cam, p);
    let cov_cam = sandwich_3x3(&cam.rotation, cov_world);

    // dΣcam = Jᵀ G J; dΣworld = Rᵀ dΣcam R.
    let mut d_cov_cam = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut s = T::zero();
            for i in 0..2 {
                for k in 0..2 {
                    s += j[i][a] * d_cov2[i][k] * j[k][b];
                }
            }
            d_cov_cam[a][b] = s;
        }
    }
    let rt = math::mat3_transpose(&cam.rotation);
    let d_cov_world = math::mat3_mul(&math::mat3_mul(&rt, &d_cov_cam), &cam.rotation);

    // dJ = (G + Gᵀ) J Σcam.
    let mut gpgt = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            gpgt[i][k] = d_cov2[i][k] + d_cov2[k][i];
        }
    }
    let mut d_j = [[T::zero(); 3]; 3]; // rows 0..2 used
    for i in 0..2 {
        for a in 0..3 {
            let mut s = T::zero();
            for k in 0..2 {
                for b in 0..3 {
                    s += gpgt[i][k] * j[k][b] * cov_cam[b][a];
                }
            }
            d_j[i][a] = s;
        }
    }

    // dp from the projected mean and from J's dependence on p.
    let mut dp = [
        d_mean[0] * cam.fx * zinv,
        d_mean[1] * cam.fy * zinv,
        -(d_mean[0] * cam.fx * x + d_mean[1] * cam.fy * y) * zinv2,
    ];
    let two = rl::<T>(2.0);
    dp[0] += d_j[0][2] * (-cam.fx * zinv2);
    dp[1] += d_j[1][2] * (-cam.fy * zinv2);
    dp[2] += d_j[0][0] * (-cam.fx * zinv2)
        + d_j[0][2] * (two * cam.fx * x * zinv2 * zinv)
        + d_j[1][1] * (-cam.fy * zinv2)
        + d_j[1][2] * (two * cam.fy * y * zinv2 * zinv);

    let d_mu = math::mat3_tmul_vec3(&cam.rotation, dp);
    (d_mu, d_cov_world)
}

#[inline]
fn perspective_jacobian<T: Real>(cam: &Camera<T>, p: Vec3<T>) -> Mat3<T> {
    // 2×3 stored in the top rows of a Mat3 (third row unused).
    let zinv = T::one() / p[2];
    let zinv2 = zinv * zinv;
    [
        [cam.fx * zinv, T::zero(), -cam.fx * p[0] * zinv2],
        [T::zero(), cam.fy * zinv, -cam.fy * p[1] * zinv2],
        [T::zero(), T::zero(), T::zero()],
    ]
}

/// R M Rᵀ for 3×3 symmetric M.
fn sandwich_3x3<T: Real>(r: &Mat3<T>, m: &Mat3<T>) -> Mat3<T> {
    math::mat3_mul(&math::mat3_mul(r, m), &math::mat3_transpose(r))
}

/// J M Jᵀ with J the 2×3 top of a Mat3.
fn sandwich_2x3<T: Real>(j: &Mat3<T>, m: &Mat3<T>) -> Mat2<T> {
    let mut jm = [[T::zero(); 3]; 2];
    for i in 0..2 {
        for b in 0..3 {
            let mut s = T::zero();
            for a in 0..3 {
                s += j[i][a] * m[a][b];
            }
            jm[i][b] = s;
        }
    }
    let mut out = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            let mut s = T::zero();
            for b in 0..3 {
                s += jm[i][b] * j[k][b];
            }
            out[i][k] = s;
        }
    }
    out
}

/// Project a batch of Gaussians and return the splat list sorted by depth
/// (ties by source index), plus cull/singular counts.
#[allow(clippy::too_many_arguments)]
pub fn prepare_splats<T: Real>(
    positions: &[T],   // G×3
    scales: &[T],      // G×3
    quats: &[T],       // G×4, unit rows
    alphas: &[T],      // G
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> (Vec<Splat2D<T>>, usize, usize) {
    let g = alphas.len();
    let mut splats = Vec::with_capacity(g);
    let mut culled = 0usize;
    let mut singular = 0usize;
    for i in 0..g {
        let mu = [positions[i * 3], positions[i * 3 + 1], positions[i * 3 + 2]];
        let sc = [scales[i * 3], scales[i * 3 + 1], scales[i * 3 + 2]];
        let q = [
            quats[i * 4],
            quats[i * 4 + 1],
            quats[i * 4 + 2],
            quats[i * 4 + 3],
        ];
        let cov = covariance(sc, q);
        match project(mu, &cov, cam, opts) {
            Projected::Culled => culled += 1,
            Projected::Singular => singular += 1,
            Projected::Splat(mut s) => {
                s.alpha = alphas[i];
                s.gauss = i as u32;
                splats.push(s);
            }
        }
    }
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.gauss.cmp(&b.gauss))
    });
    (splats, culled, singular)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(f: f64, w: usize, h: usize) -> Camera<f64> {
        Camera {
            id: 0,
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
            width: w,
            height: h,
        }
    }

    fn rand_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    #[test]
    fn covariance_is_psd_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = [
                rng.gen_range(0.01..0.5),
                rng.gen_range(0.01..0.5),
                rng.gen_range(0.01..0.5),
            ];
            let q = rand_unit_quat(&mut rng);
            let c = covariance(s, q);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((c[i][j] - c[j][i]).abs() < 1e-12);
                }
            }
            // xᵀΣx ≥ 0 on random probes.
            for _ in 0..10 {
                let x = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0f64),
                ];
                let mut v = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        v += x[i] * c[i][j] * x[j];
                    }
                }
                assert!(v >= -1e-10);
            }
        }
    }

    #[test]
    fn covariance_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = [
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            ];
            let q = rand_unit_quat(&mut rng);
            let mut g = [[0.0f64; 3]; 3];
            for row in &mut g {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            let loss = |s: [f64; 3], q: [f64; 4]| {
                let c = covariance(s, q);
                let mut l = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        l += g[i][j] * c[i][j];
                    }
                }
                l
            };
            let (ds, dq) = covariance_backward(s, q, &g);
            let eps = 1e-6;
            for c in 0..3 {
                let mut sp = s;
                let mut sm = s;
                sp[c] += eps;
                sm[c] -= eps;
                let fd = (loss(sp, q) - loss(sm, q)) / (2.0 * eps);
                assert!((fd - ds[c]).abs() < 1e-6 * fd.abs().max(1.0), "scale {c}");
            }
            for c in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[c] += eps;
                qm[c] -= eps;
                let fd = (loss(s, qp) - loss(s, qm)) / (2.0 * eps);
                assert!((fd - dq[c]).abs() < 1e-6 * fd.abs().max(1.0), "quat {c}");
            }
        }
    }

    #[test]
    fn axis_aligned_projection_matches_pinhole_scaling() {
        let cam = identity_cam(100.0, 64, 64);
        let opts = RenderOptions::default();
        let (s, z) = (0.05, 2.0);
        let cov = covariance([s, s, s], [1.0, 0.0, 0.0, 0.0]);
        let Projected::Splat(sp) = project([0.0, 0.0, z], &cov, &cam, &opts) else {
            panic!("culled")
        };
        let want = (100.0 * s / z).powi(2) + 0.3;
        assert!((sp.cov[0][0] - want).abs() < 1e-6 * want);
        assert!((sp.cov[1][1] - want).abs() < 1e-6 * want);
        assert!(sp.cov[0][1].abs() < 1e-9);
        assert!((sp.mean[0] - 32.0).abs() < 1e-12 && (sp.mean[1] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = identity_cam(100.0, 64, 64);
        let opts = RenderOptions::default();
        let cov = covariance([0.1, 0.1, 0.1], [1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            project([0.0, 0.0, -1.0], &cov, &cam, &opts),
            Projected::Culled
        ));
        assert!(matches!(
            project([0.0, 0.0, 0.005], &cov, &cam, &opts),
            Projected::Culled
        ));
    }

    #[test]
    fn projected_covariance_matches_monte_carlo() {
        let cam = identity_cam(90.0, 64, 64);
        let mut opts = RenderOptions::default();
        opts.dilation = 0.0; // compare the undilated linearization
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scale = [0.02, 0.035, 0.015];
        let quat = rand_unit_quat(&mut rng);
        let mu = [0.08, -0.05, 1.8];
        let cov = covariance(scale, quat);
        let Projected::Splat(sp) = project(mu, &cov, &cam, &opts) else {
            panic!("culled")
        };

        // Sample world-space points, push through the exact pinhole map, and
        // accumulate the empirical covariance of the projections.
        let r = crate::math::quat_to_mat3(quat);
        let n = 1_000_000usize;
        let mut mean = [0.0f64; 2];
        let mut m2 = [[0.0f64; 2]; 2];
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z = [gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)];
            let local = [scale[0] * z[0], scale[1] * z[1], scale[2] * z[2]];
            let world = [
                mu[0] + r[0][0] * local[0] + r[0][1] * local[1] + r[0][2] * local[2],
                mu[1] + r[1][0] * local[0] + r[1][1] * local[1] + r[1][2] * local[2],
                mu[2] + r[2][0] * local[0] + r[2][1] * local[1] + r[2][2] * local[2],
            ];
            let u = [
                cam.fx * world[0] / world[2] + cam.cx,
                cam.fy * world[1] / world[2] + cam.cy,
            ];
            mean[0] += u[0];
            mean[1] += u[1];
            samples.push(u);
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for u in samples {
            let d = [u[0] - mean[0], u[1] - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    m2[i][j] += d[i] * d[j];
                }
            }
        }
        for row in &mut m2 {
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let err = (m2[i][j] - sp.cov[i][j]).abs();
                let scale = sp.cov[i][j].abs().max(sp.cov[0][0]).max(sp.cov[1][1]);
                assert!(err < 0.05 * scale, "cov[{i}][{j}]: mc {} vs {}", m2[i][j], sp.cov[i][j]);
            }
        }

        fn gauss(rng: &mut ChaCha8Rng) -> f64 {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }

    #[test]
    fn project_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cam = Camera::<f64>::look_at(
            0,
            [0.6, -0.9, 0.4],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            80.0,
            80.0,
            64,
            64,
        );
        let opts = RenderOptions::default();
        for _ in 0..10 {
            let mu = [
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ];
            let scale = [
                rng.gen_range(0.02..0.1),
                rng.gen_range(0.02..0.1),
                rng.gen_range(0.02..0.1),
            ];
            let quat = rand_unit_quat(&mut rng);
            let cov = covariance(scale, quat);
            let dm = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mut dc = [[0.0f64; 2]; 2];
            for row in &mut dc {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            let loss = |mu: [f64; 3], cov: &Mat3<f64>| {
                let Projected::Splat(s) = project(mu, cov, &cam, &opts) else {
                    panic!("culled in fd probe")
                };
                let mut l = dm[0] * s.mean[0] + dm[1] * s.mean[1];
                for i in 0..2 {
                    for j in 0..2 {
                        l += dc[i][j] * s.cov[i][j];
                    }
                }
                l
            };
            let (d_mu, d_cov_world) = project_backward(mu, &cov, &cam, dm, &dc);
            let eps = 1e-6;
            for c in 0..3 {
                let mut p = mu;
                let mut m = mu;
                p[c] += eps;
                m[c] -= eps;
                let fd = (loss(p, &cov) - loss(m, &cov)) / (2.0 * eps);
                assert!(
                    (fd - d_mu[c]).abs() < 1e-5 * fd.abs().max(1.0),
                    "mu[{c}] fd {fd} ad {}",
                    d_mu[c]
                );
            }
            for a in 0..3 {
                for b in 0..3 {
                    let mut p = cov;
                    let mut m = cov;
                    p[a][b] += eps;
                    m[a][b] -= eps;
                    let fd = (loss(mu, &p) - loss(mu, &m)) / (2.0 * eps);
                    assert!(
                        (fd - d_cov_world[a][b]).abs() < 1e-5 * fd.abs().max(1.0),
                        "cov[{a}][{b}]"
                    );
                }
            }
        }
    }
}
