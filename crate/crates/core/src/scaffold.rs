//! Voxel grid, anchor state, cameras, and scene initialization from points.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytesio::{Reader, Writer};
use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::real::{rl, Real};

pub type CellIndex = [i32; 3];

/// Per-anchor bookkeeping that is not a learnable tensor row. The window
/// accumulators feed the feature-aware significance score and reset after
/// every lifecycle event.
#[derive(Debug, Clone)]
pub struct VoxelAnchor<T> {
    pub cell: CellIndex,
    pub contrib_accum: T,
    pub grad_norm_accum: T,
    pub obs_count: u32,
}

impl<T: Real> VoxelAnchor<T> {
    fn new(cell: CellIndex) -> Self {
        VoxelAnchor {
            cell,
            contrib_accum: T::zero(),
            grad_norm_accum: T::zero(),
            obs_count: 0,
        }
    }

    pub fn reset_window(&mut self) {
        self.contrib_accum = T::zero();
        self.grad_norm_accum = T::zero();
        self.obs_count = 0;
    }
}

/// Feature dimensions shared across the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Anchor latent width d_f (also the MLP hidden width).
    pub feat: usize,
    /// Per-camera appearance embedding width d_c.
    pub appear: usize,
    /// Semantic query width d_q.
    pub query: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            feat: 32,
            appear: 32,
            query: 160,
        }
    }
}

/// The voxel scaffold: one anchor per occupied cell, with its learnable rows
/// (latents, offsets, raw scales) held in the parameter store.
#[derive(Debug, Clone)]
pub struct Scaffold<T> {
    pub voxel_size: T,
    /// Gaussians per anchor (N).
    pub per_anchor: usize,
    pub dims: Dims,
    pub anchors: Vec<VoxelAnchor<T>>,
    cell_map: HashMap<CellIndex, usize>,
    /// [V × feat]
    pub latents: ParamId,
    /// [V × N·3]
    pub offsets: ParamId,
    /// [V × 3], decoded positive through softplus
    pub scales: ParamId,
    /// Window-accumulated ‖∇μ‖ per Gaussian, for anchor growing.
    pub pos_grad_accum: Vec<T>,
    pub pos_grad_count: u32,
}

pub fn cell_of<T: Real>(p: Vec3<T>, voxel_size: T) -> CellIndex {
    [
        (p[0] / voxel_size).floor().as_f64() as i32,
        (p[1] / voxel_size).floor().as_f64() as i32,
        (p[2] / voxel_size).floor().as_f64() as i32,
    ]
}

impl<T: Real> Scaffold<T> {
    /// One anchor per distinct occupied cell. Latents start N(0, 0.01²),
    /// offsets U[−0.5, 0.5]³, raw scales at softplus⁻¹(1) so a unit offset
    /// initially spans one offset-scale unit.
    pub fn voxelize(
        store: &mut ParamStore<T>,
        points: &[Vec3<T>],
        voxel_size: T,
        per_anchor: usize,
        dims: Dims,
        seed: u64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("cannot voxelize an empty point set".into()));
        }
        if voxel_size <= T::zero() {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        let mut cell_map = HashMap::new();
        let mut anchors: Vec<VoxelAnchor<T>> = Vec::new();
        for &p in points {
            let cell = cell_of(p, voxel_size);
            cell_map.entry(cell).or_insert_with(|| {
                anchors.push(VoxelAnchor::new(cell));
                anchors.len() - 1
            });
        }

        let v = anchors.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut latents = Vec::with_capacity(v * dims.feat);
        for _ in 0..v * dims.feat {
            latents.push(rl::<T>(0.01 * normal_sample(&mut rng)));
        }
        let mut offsets = Vec::with_capacity(v * per_anchor * 3);
        for _ in 0..v * per_anchor * 3 {
            offsets.push(rl::<T>(rng.gen_range(-0.5..0.5)));
        }
        // softplus(raw) ≈ l: decoded positions start inside their cell.
        let scale_raw = rl::<T>(math::softplus_inverse(voxel_size.as_f64()));
        let scales = vec![scale_raw; v * 3];

        Ok(Scaffold {
            voxel_size,
            per_anchor,
            dims,
            pos_grad_accum: vec![T::zero(); v * per_anchor],
            pos_grad_count: 0,
            anchors,
            cell_map,
            latents: store.add(
                "anchor.latents",
                ParamGroup::AnchorLatent,
                Tensor::new(vec![v, dims.feat], latents)?,
            ),
            offsets: store.add(
                "anchor.offsets",
                ParamGroup::AnchorOffset,
                Tensor::new(vec![v, per_anchor * 3], offsets)?,
            ),
            scales: store.add(
                "anchor.scales",
                ParamGroup::AnchorScale,
                Tensor::new(vec![v, 3], scales)?,
            ),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn gaussian_count(&self) -> usize {
        self.anchors.len() * self.per_anchor
    }

    pub fn anchor_at_cell(&self, cell: CellIndex) -> Option<usize> {
        self.cell_map.get(&cell).copied()
    }

    pub fn cell_occupied(&self, cell: CellIndex) -> bool {
        self.cell_map.contains_key(&cell)
    }

    /// Cell center c_v = (cell + 0.5)·l.
    pub fn center(&self, anchor: usize) -> Vec3<T> {
        let c = self.anchors[anchor].cell;
        let half = rl::<T>(0.5);
        [
            (rl::<T>(c[0] as f64) + half) * self.voxel_size,
            (rl::<T>(c[1] as f64) + half) * self.voxel_size,
            (rl::<T>(c[2] as f64) + half) * self.voxel_size,
        ]
    }

    /// μ_{v,n} = c_v + Δx_{v,n} ⊙ softplus(s_raw), straight from the store
    /// (the differentiable path composes the same thing on the tape).
    pub fn gaussian_positions(&self, store: &ParamStore<T>, anchor: usize) -> Vec<Vec3<T>> {
        let c = self.center(anchor);
        let off = store.value(self.offsets).row(anchor);
        let sraw = store.value(self.scales).row(anchor);
        let s = [
            math::softplus(sraw[0]),
            math::softplus(sraw[1]),
            math::softplus(sraw[2]),
        ];
        (0..self.per_anchor)
            .map(|n| {
                [
                    c[0] + off[n * 3] * s[0],
                    c[1] + off[n * 3 + 1] * s[1],
                    c[2] + off[n * 3 + 2] * s[2],
                ]
            })
            .collect()
    }

    /// Drop the given anchors (sorted ascending); their parameter rows and
    /// cell-map entries go with them.
    pub fn remove_anchors(&mut self, store: &mut ParamStore<T>, sorted: &[usize]) {
        if sorted.is_empty() {
            return;
        }
        store.remove_rows(self.latents, sorted);
        store.remove_rows(self.offsets, sorted);
        store.remove_rows(self.scales, sorted);
        let mut drop_iter = sorted.iter().peekable();
        let mut kept = Vec::with_capacity(self.anchors.len() - sorted.len());
        for (i, a) in self.anchors.drain(..).enumerate() {
            if drop_iter.peek() == Some(&&i) {
                drop_iter.next();
            } else {
                kept.push(a);
            }
        }
        self.anchors = kept;
        self.rebuild_cell_map();
        self.reset_pos_grad_window();
    }

    /// Add one anchor at an unoccupied cell. Returns its index.
    pub fn add_anchor(
        &mut self,
        store: &mut ParamStore<T>,
        cell: CellIndex,
        latent: &[T],
        rng: &mut ChaCha8Rng,
    ) -> usize {
        debug_assert!(!self.cell_occupied(cell));
        debug_assert_eq!(latent.len(), self.dims.feat);
        store.append_rows(self.latents, latent);
        let mut offsets = Vec::with_capacity(self.per_anchor * 3);
        for _ in 0..self.per_anchor * 3 {
            offsets.push(rl::<T>(rng.gen_range(-0.5..0.5)));
        }
        store.append_rows(self.offsets, &offsets);
        let raw = rl::<T>(math::softplus_inverse(self.voxel_size.as_f64()));
        store.append_rows(self.scales, &[raw, raw, raw]);
        self.anchors.push(VoxelAnchor::new(cell));
        let idx = self.anchors.len() - 1;
        self.cell_map.insert(cell, idx);
        self.reset_pos_grad_window();
        idx
    }

    fn rebuild_cell_map(&mut self) {
        self.cell_map = self
            .anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (a.cell, i))
            .collect();
    }

    pub fn reset_pos_grad_window(&mut self) {
        self.pos_grad_accum = vec![T::zero(); self.gaussian_count()];
        self.pos_grad_count = 0;
    }

    pub fn reset_anchor_windows(&mut self) {
        for a in &mut self.anchors {
            a.reset_window();
        }
        self.reset_pos_grad_window();
    }

    /// Checkpoint chunk `ANCH`: u32 count, then per anchor 3×i32 cell,
    /// feat×f32 latent, N·3×f32 offsets, 3×f32 raw scale.
    pub fn encode_anchors(&self, store: &ParamStore<T>, w: &mut Writer) {
        w.u32(self.anchors.len() as u32);
        for (i, a) in self.anchors.iter().enumerate() {
            for c in a.cell {
                w.i32(c);
            }
            for v in store.value(self.latents).row(i) {
                w.f32(v.as_f32());
            }
            for v in store.value(self.offsets).row(i) {
                w.f32(v.as_f32());
            }
            for v in store.value(self.scales).row(i) {
                w.f32(v.as_f32());
            }
        }
    }

    /// Rebuild anchors and parameter rows from an `ANCH` chunk; dims come
    /// from `self` (the caller restores them from the config echo first).
    pub fn decode_anchors(&mut self, store: &mut ParamStore<T>, r: &mut Reader) -> Result<()> {
        let v = r.u32()? as usize;
        let mut anchors = Vec::with_capacity(v);
        let mut latents = Vec::with_capacity(v * self.dims.feat);
        let mut offsets = Vec::with_capacity(v * self.per_anchor * 3);
        let mut scales = Vec::with_capacity(v * 3);
        for _ in 0..v {
            let cell = [r.i32()?, r.i32()?, r.i32()?];
            anchors.push(VoxelAnchor::new(cell));
            for _ in 0..self.dims.feat {
                latents.push(rl::<T>(r.f32()? as f64));
            }
            for _ in 0..self.per_anchor * 3 {
                offsets.push(rl::<T>(r.f32()? as f64));
            }
            for _ in 0..3 {
                scales.push(rl::<T>(r.f32()? as f64));
            }
        }
        self.anchors = anchors;
        self.rebuild_cell_map();
        self.reset_pos_grad_window();
        store.get_mut(self.latents).value = Tensor::new(vec![v, self.dims.feat], latents)?;
        store.get_mut(self.latents).grad = Tensor::zeros(vec![v, self.dims.feat]);
        store.get_mut(self.offsets).value = Tensor::new(vec![v, self.per_anchor * 3], offsets)?;
        store.get_mut(self.offsets).grad = Tensor::zeros(vec![v, self.per_anchor * 3]);
        store.get_mut(self.scales).value = Tensor::new(vec![v, 3], scales)?;
        store.get_mut(self.scales).grad = Tensor::zeros(vec![v, 3]);
        Ok(())
    }
}

/// Unit direction from the camera center to the anchor center.
pub fn viewing_direction<T: Real>(center: Vec3<T>, camera: &Camera<T>) -> Result<Vec3<T>> {
    let cam = camera.center();
    let d = math::sub3(center, cam);
    let n = math::norm3(d);
    if n < rl::<T>(1e-12) {
        return Err(Error::Numeric(
            "viewing direction degenerate: camera coincides with anchor center".into(),
        ));
    }
    Ok(math::scale3(d, T::one() / n))
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps the dependency surface at plain `rand`.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ── cameras ──────────────────────────────────────────────────────────

/// Pinhole camera with a world→camera rigid transform (x right, y down,
/// z forward). The per-camera appearance embedding lives in a parameter
/// table indexed by camera order.
#[derive(Debug, Clone)]
pub struct Camera<T> {
    pub id: u32,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Camera<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: u32,
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        fx: T,
        fy: T,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = math::normalize3(math::sub3(target, eye));
        let right = math::normalize3(math::cross3(forward, up));
        let down = math::cross3(forward, right);
        let rotation = [right, down, forward];
        let translation = math::scale3(math::mat3_mul_vec3(&rotation, eye), -T::one());
        Camera {
            id,
            fx,
            fy,
            cx: rl::<T>(width as f64 / 2.0),
            cy: rl::<T>(height as f64 / 2.0),
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn world_to_cam(&self, p: Vec3<T>) -> Vec3<T> {
        math::add3(math::mat3_mul_vec3(&self.rotation, p), self.translation)
    }

    /// Camera center in world coordinates, −Rᵀt.
    pub fn center(&self) -> Vec3<T> {
        math::scale3(
            math::mat3_tmul_vec3(&self.rotation, self.translation),
            -T::one(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(Error::Config(format!(
                "camera {}: focal lengths must be positive",
                self.id
            )));
        }
        let r = &self.rotation;
        let rt = math::mat3_transpose(r);
        let p = math::mat3_mul(r, &rt);
        let tol = rl::<T>(1e-6);
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { T::one() } else { T::zero() };
                if (v - want).abs() > tol {
                    return Err(Error::Config(format!(
                        "camera {}: rotation is not orthonormal",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraJson {
    id: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major 3×3 world→camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CamerasJson {
    cameras: Vec<CameraJson>,
}

pub fn save_cameras<T: Real>(cams: &[Camera<T>], path: &Path) -> Result<()> {
    let doc = CamerasJson {
        cameras: cams
            .iter()
            .map(|c| CameraJson {
                id: c.id,
                fx: c.fx.as_f64(),
                fy: c.fy.as_f64(),
                cx: c.cx.as_f64(),
                cy: c.cy.as_f64(),
                rotation: c.rotation.map(|row| row.map(|v| v.as_f64())),
                translation: c.translation.map(|v| v.as_f64()),
                width: c.width,
                height: c.height,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("camera serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_cameras<T: Real>(path: &Path) -> Result<Vec<Camera<T>>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let doc: CamerasJson = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cams: Vec<Camera<T>> = doc
        .cameras
        .into_iter()
        .map(|c| Camera {
            id: c.id,
            fx: rl::<T>(c.fx),
            fy: rl::<T>(c.fy),
            cx: rl::<T>(c.cx),
            cy: rl::<T>(c.cy),
            rotation: c.rotation.map(|row| row.map(rl::<T>)),
            translation: c.translation.map(rl::<T>),
            width: c.width,
            height: c.height,
        })
        .collect();
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

// ── PLY (ascii subset) ───────────────────────────────────────────────

/// Read `element vertex` x/y/z from an ASCII PLY; other vertex properties
/// and trailing elements are ignored.
pub fn read_ply_points<T: Real>(path: &Path) -> Result<Vec<Vec3<T>>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pname = path.display().to_string();
    let mut offset = 0u64;
    let mut lines = text.lines().map(move |l| {
        let this = offset;
        offset += l.len() as u64 + 1;
        (this, l.trim_end())
    });

    let mut expect_line = |want: &str, what: &str| -> Result<u64> {
        match lines.next() {
            Some((off, l)) if l.trim() == want => Ok(off),
            Some((off, l)) => Err(Error::format(
                &pname,
                off,
                format!("expected {what} `{want}`, got `{l}`"),
            )),
            None => Err(Error::format(&pname, 0, format!("missing {what}"))),
        }
    };
    expect_line("ply", "header line")?;
    expect_line("format ascii 1.0", "format line")?;

    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let body_lines;
    loop {
        let Some((off, line)) = lines.next() else {
            return Err(Error::format(&pname, 0, "header missing end_header"));
        };
        let line = line.trim();
        if line == "end_header" {
            body_lines = lines;
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse().map_err(|_| {
                    Error::format(&pname, off, format!("bad vertex count `{n}`"))
                })?);
                in_vertex_element = true;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", _ty, name] if in_vertex_element => props.push((*name).to_string()),
            ["property", ..] => {}
            _ => {
                return Err(Error::format(
                    &pname,
                    off,
                    format!("bad header line `{line}`"),
                ));
            }
        }
    }

    let count =
        vertex_count.ok_or_else(|| Error::format(&pname, 0, "header lacks `element vertex`"))?;
    let idx = |name: &str| -> Result<usize> {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::format(&pname, 0, format!("vertex lacks property {name}")))
    };
    let (xi, yi, zi) = (idx("x")?, idx("y")?, idx("z")?);

    let mut points = Vec::with_capacity(count);
    let mut body = body_lines;
    for _ in 0..count {
        let Some((off, line)) = body.next() else {
            return Err(Error::format(
                &pname,
                text.len() as u64,
                format!(
                    "expected {count} vertices, file ended after {}",
                    points.len()
                ),
            ));
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let get = |i: usize| -> Result<T> {
            let s = fields.get(i).ok_or_else(|| {
                Error::format(&pname, off, format!("vertex row too short: `{line}`"))
            })?;
            let v: f64 = s
                .parse()
                .map_err(|_| Error::format(&pname, off, format!("bad float `{s}`")))?;
            Ok(rl::<T>(v))
        };
        points.push([get(xi)?, get(yi)?, get(zi)?]);
    }
    Ok(points)
}

pub fn write_ply_points<T: Real>(points: &[Vec3<T>], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "ply").unwrap();
    writeln!(out, "format ascii 1.0").unwrap();
    writeln!(out, "element vertex {}", points.len()).unwrap();
    writeln!(out, "property float x").unwrap();
    writeln!(out, "property float y").unwrap();
    writeln!(out, "property float z").unwrap();
    writeln!(out, "end_header").unwrap();
    for p in points {
        writeln!(out, "{} {} {}", p[0].as_f32(), p[1].as_f32(), p[2].as_f32()).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
