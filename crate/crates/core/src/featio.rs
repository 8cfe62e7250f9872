//! Ground-truth multimodal feature maps: a deterministic synthetic provider
//! for self-contained desk-scale runs, plus a binary ingestion format for
//! externally computed features.
//!
//! The synthetic path renders RGB and per-pixel semantic ids with an analytic
//! ray–ellipsoid tracer that shares nothing with the splatting rasterizer, so
//! it can serve as an independent oracle for end-to-end fits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytesio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::real::{rl, Real};
use crate::scaffold::Camera;

pub const FEATURE_MAGIC: &[u8; 4] = b"CUSF";
pub const FEATURE_VERSION: u32 = 1;

/// Dense H×W×D feature image, row-major, always stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tag: String,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(tag: impl Into<String>, height: usize, width: usize, dim: usize) -> Self {
        FeatureMap {
            tag: tag.into(),
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    /// Nearest-neighbour resample to a new resolution.
    pub fn resample_nearest(&self, height: usize, width: usize) -> FeatureMap {
        let mut out = FeatureMap::new(self.tag.clone(), height, width, self.dim);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.pixel_mut(y, x).copy_from_slice(self.pixel(sy, sx));
            }
        }
        out
    }
}

/// `CUSF`: magic, version u32, tag string, H u32, W u32, D u32, f32 LE data.
pub fn save_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.magic(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.short_string(&map.tag);
    w.u32(map.height as u32);
    w.u32(map.width as u32);
    w.u32(map.dim as u32);
    w.f32s(map.data.iter());
    std::fs::write(path, w.into_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader::new(&bytes, path.display().to_string());
    r.expect_magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(r.error(format!(
            "unsupported feature map version {version} (want {FEATURE_VERSION})"
        )));
    }
    let tag = r.short_string()?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let data = r.f32s(height * width * dim)?;
    if r.remaining() != 0 {
        return Err(r.error(format!("{} trailing bytes after payload", r.remaining())));
    }
    Ok(FeatureMap {
        tag,
        height,
        width,
        dim,
        data,
    })
}

// ── synthetic scenes ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub rgb: [f64; 3],
    pub semantic_id: u32,
}

/// Deterministic ellipsoid arrangement; id 0 is the background.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub background_rgb: [f64; 3],
}

impl SyntheticScene {
    pub fn generate(seed: u64, n_objects: usize) -> Result<Self> {
        if n_objects == 0 {
            return Err(Error::Config("synthetic scene needs at least 1 object".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let mut objects = Vec::with_capacity(n_objects);
        for i in 0..n_objects {
            // Spread centers on a small circle so objects rarely overlap.
            let angle = std::f64::consts::TAU * (i as f64) / (n_objects as f64)
                + rng.gen_range(-0.2..0.2);
            let dist = rng.gen_range(0.08..0.14);
            let center = [
                dist * angle.cos(),
                dist * angle.sin(),
                rng.gen_range(-0.04..0.04),
            ];
            let radii = [
                rng.gen_range(0.05..0.09),
                rng.gen_range(0.05..0.09),
                rng.gen_range(0.05..0.09),
            ];
            // Colors quantized to the 8-bit grid so PNG round trips exactly.
            let rgb = [
                rng.gen_range(60u32..=230) as f64 / 255.0,
                rng.gen_range(60u32..=230) as f64 / 255.0,
                rng.gen_range(60u32..=230) as f64 / 255.0,
            ];
            objects.push(SceneObject {
                center,
                radii,
                rgb,
                semantic_id: (i + 1) as u32,
            });
        }
        Ok(SyntheticScene {
            seed,
            objects,
            background_rgb: [0.0, 0.0, 0.0],
        })
    }

    /// Uniform samples inside the ellipsoids (ball sample scaled by radii),
    /// round-robin across objects.
    pub fn sample_points<T: Real>(&self, count: usize) -> Vec<Vec3<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7031_7e57);
        let mut points = Vec::with_capacity(count);
        for i in 0..count {
            let obj = &self.objects[i % self.objects.len()];
            let u = loop {
                let v = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                if v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= 1.0 {
                    break v;
                }
            };
            points.push([
                rl::<T>(obj.center[0] + obj.radii[0] * u[0]),
                rl::<T>(obj.center[1] + obj.radii[1] * u[1]),
                rl::<T>(obj.center[2] + obj.radii[2] * u[2]),
            ]);
        }
        points
    }

    pub fn contains(&self, obj: &SceneObject, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for d in 0..3 {
            let t = (p[d] - obj.center[d]) / obj.radii[d];
            s += t * t;
        }
        s <= 1.0 + 1e-9
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("scene serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Ring of cameras looking at the origin.
pub fn camera_ring<T: Real>(
    count: usize,
    radius: f64,
    height: f64,
    fov_deg: f64,
    width: usize,
    height_px: usize,
) -> Vec<Camera<T>> {
    let f = width as f64 / (2.0 * (fov_deg.to_radians() / 2.0).tan());
    (0..count)
        .map(|i| {
            let angle = std::f64::consts::TAU * (i as f64) / (count as f64);
            let eye = [
                rl::<T>(radius * angle.cos()),
                rl::<T>(radius * angle.sin()),
                rl::<T>(height),
            ];
            Camera::look_at(
                i as u32,
                eye,
                [T::zero(), T::zero(), T::zero()],
                [T::zero(), T::zero(), T::one()],
                rl::<T>(f),
                rl::<T>(f),
                width,
                height_px,
            )
        })
        .collect()
}

/// Analytic ground-truth render: RGB plus the per-pixel semantic id map.
/// Rays go through pixel centers; nearest ellipsoid hit wins.
pub fn render_reference<T: Real>(
    scene: &SyntheticScene,
    cam: &Camera<T>,
) -> (Vec<T>, Vec<u32>) {
    let (w, h) = (cam.width, cam.height);
    let mut rgb = vec![T::zero(); w * h * 3];
    let mut ids = vec![0u32; w * h];
    let origin = cam.center();
    let o64 = [origin[0].as_f64(), origin[1].as_f64(), origin[2].as_f64()];
    let rot = cam.rotation;
    let (fx, fy) = (cam.fx.as_f64(), cam.fy.as_f64());
    let (cx, cy) = (cam.cx.as_f64(), cam.cy.as_f64());
    for py in 0..h {
        for px in 0..w {
            let dir_cam = [
                (px as f64 + 0.5 - cx) / fx,
                (py as f64 + 0.5 - cy) / fy,
                1.0,
            ];
            // World direction: Rᵀ · dir_cam.
            let dir = math::mat3_tmul_vec3(
                &rot,
                [
                    rl::<T>(dir_cam[0]),
                    rl::<T>(dir_cam[1]),
                    rl::<T>(dir_cam[2]),
                ],
            );
            let d64 = [dir[0].as_f64(), dir[1].as_f64(), dir[2].as_f64()];

            let mut best: Option<(f64, usize)> = None;
            for (oi, obj) in scene.objects.iter().enumerate() {
                if let Some(t) = ray_ellipsoid(o64, d64, obj) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, oi));
                    }
                }
            }
            let i = (py * w + px) * 3;
            match best {
                Some((_, oi)) => {
                    let obj = &scene.objects[oi];
                    rgb[i] = rl::<T>(obj.rgb[0]);
                    rgb[i + 1] = rl::<T>(obj.rgb[1]);
                    rgb[i + 2] = rl::<T>(obj.rgb[2]);
                    ids[py * w + px] = obj.semantic_id;
                }
                None => {
                    rgb[i] = rl::<T>(scene.background_rgb[0]);
                    rgb[i + 1] = rl::<T>(scene.background_rgb[1]);
                    rgb[i + 2] = rl::<T>(scene.background_rgb[2]);
                }
            }
        }
    }
    (rgb, ids)
}

/// Smallest positive ray parameter hitting the ellipsoid, if any.
fn ray_ellipsoid(o: [f64; 3], d: [f64; 3], obj: &SceneObject) -> Option<f64> {
    // Scale to the unit sphere's frame.
    let mut oo = [0.0; 3];
    let mut dd = [0.0; 3];
    for i in 0..3 {
        oo[i] = (o[i] - obj.center[i]) / obj.radii[i];
        dd[i] = d[i] / obj.radii[i];
    }
    let a = dd[0] * dd[0] + dd[1] * dd[1] + dd[2] * dd[2];
    let b = 2.0 * (oo[0] * dd[0] + oo[1] * dd[1] + oo[2] * dd[2]);
    let c = oo[0] * oo[0] + oo[1] * oo[1] + oo[2] * oo[2] - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

// ── synthetic features ───────────────────────────────────────────────

/// Fixed unit vector assigned to a semantic id in one emulated model space.
pub fn semantic_feature_vector(model_seed: u64, semantic_id: u32, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        model_seed ^ (semantic_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let mut v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    // Re-normalize in f32 so stored pixels are unit within f32 precision.
    let mut out: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let n32 = out.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32;
    for x in &mut out {
        *x /= n32;
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-pixel feature map for one view of the synthetic scene: each pixel
/// carries its visible object's fixed unit vector (id 0 = background vector).
/// Visibility comes from the same id map as the RGB reference render.
pub fn synth_features(
    ids: &[u32],
    height: usize,
    width: usize,
    tag: &str,
    dim: usize,
    model_seed: u64,
) -> Result<FeatureMap> {
    if dim < 2 {
        return Err(Error::Config(format!(
            "feature dim must be ≥ 2, got {dim} for model {tag}"
        )));
    }
    let max_id = ids.iter().copied().max().unwrap_or(0);
    let table: Vec<Vec<f32>> = (0..=max_id)
        .map(|id| semantic_feature_vector(model_seed, id, dim))
        .collect();
    let mut map = FeatureMap::new(tag, height, width, dim);
    for (px, &id) in ids.iter().enumerate() {
        map.data[px * dim..(px + 1) * dim].copy_from_slice(&table[id as usize]);
    }
    Ok(map)
}

// ── PNG io ───────────────────────────────────────────────────────────

pub fn save_png_rgb<T: Real>(data: &[T], width: usize, height: usize, path: &Path) -> Result<()> {
    debug_assert_eq!(data.len(), width * height * 3);
    let bytes: Vec<u8> = data
        .iter()
        .map(|v| {
            (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        message: format!("png write: {e}"),
    })
}

pub fn load_png_rgb<T: Real>(path: &Path) -> Result<(Vec<T>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: format!("png read: {e}"),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| rl::<T>(b as f64 / 255.0))
        .collect();
    Ok((data, w, h))
}
