//! Wires the full per-view computation: decode → rasterize → attend → losses.
//!
//! `SceneData` carries the dataset (cameras, ground-truth images and feature
//! maps); `Engine` bundles every learnable piece plus the frozen memory bank.
//! The same view graph serves training, gradient checking, and evaluation.

use std::path::Path;

use crate::config::{Config, HoldoutEmbed, ModelSpec};
use crate::decoders::{decode_scene, create_gauss_query_table, DecoderBank, QueryGranularity, ViewDecode};
use crate::diffcore::{NodeId, ParamGroup, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::featio::{
    camera_ring, load_feature_map, load_png_rgb, render_reference, save_feature_map,
    save_png_rgb, synth_features, FeatureMap, SyntheticScene,
};
use crate::math::Vec3;
use crate::membank::{attend, create_adapt_layers, AdaptLayer, MemoryBank};
use crate::rasterizer::{render, RenderResult};
use crate::real::{rl, Real};
use crate::scaffold::{load_cameras, read_ply_points, save_cameras, write_ply_points, Camera, Scaffold};
use crate::trainer::loss::{feature_loss, l1_loss, scale_loss, ssim};

/// Ground truth for one scene: cameras, RGB targets, per-model feature maps
/// (at render resolution), and the seed points for voxelization.
pub struct SceneData<T> {
    pub cameras: Vec<Camera<T>>,
    pub points: Vec<Vec3<T>>,
    /// Per camera, H·W×3 in [0,1].
    pub gt_rgb: Vec<Vec<T>>,
    /// gt_features[model][camera], aligned with the config's model list.
    pub gt_features: Vec<Vec<FeatureMap>>,
}

impl<T: Real> SceneData<T> {
    /// Fully synthetic scene: analytic renders, id-keyed features, interior
    /// point samples. Deterministic in the seed.
    pub fn generate(cfg: &Config, seed: u64) -> Result<(SyntheticScene, SceneData<T>)> {
        let scene = SyntheticScene::generate(seed, cfg.synth.objects)?;
        let cameras = camera_ring::<T>(
            cfg.synth.cameras,
            cfg.synth.cam_radius,
            cfg.synth.cam_height,
            cfg.synth.fov_deg,
            cfg.synth.width,
            cfg.synth.height,
        );
        let mut gt_rgb = Vec::with_capacity(cameras.len());
        let mut ids_per_cam = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let (rgb, ids) = render_reference(&scene, cam);
            // Quantize to the 8-bit grid so in-memory targets match PNGs.
            let rgb = rgb
                .into_iter()
                .map(|v| rl::<T>((v.as_f64().clamp(0.0, 1.0) * 255.0).round() / 255.0))
                .collect();
            gt_rgb.push(rgb);
            ids_per_cam.push(ids);
        }
        let mut gt_features = Vec::with_capacity(cfg.synth.models.len());
        for model in &cfg.synth.models {
            let mut per_cam = Vec::with_capacity(cameras.len());
            for ids in &ids_per_cam {
                per_cam.push(synth_features(
                    ids,
                    cfg.synth.height,
                    cfg.synth.width,
                    &model.tag,
                    model.dim,
                    model.seed,
                )?);
            }
            gt_features.push(per_cam);
        }
        let points = scene.sample_points::<T>(cfg.synth.points);
        Ok((
            scene,
            SceneData {
                cameras,
                points,
                gt_rgb,
                gt_features,
            },
        ))
    }

    /// Write the dataset as a scene directory: points.ply, cams.json,
    /// scene.json, gt/view_###.png, features/<tag>/view_###.cusf.
    pub fn write_dir(&self, scene: &SyntheticScene, models: &[ModelSpec], dir: &Path) -> Result<()> {
        let mk = |p: &Path| -> Result<()> {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e))
        };
        mk(dir)?;
        write_ply_points(&self.points, &dir.join("points.ply"))?;
        save_cameras(&self.cameras, &dir.join("cams.json"))?;
        scene.save(&dir.join("scene.json"))?;
        let gt_dir = dir.join("gt");
        mk(&gt_dir)?;
        for (i, cam) in self.cameras.iter().enumerate() {
            save_png_rgb(
                &self.gt_rgb[i],
                cam.width,
                cam.height,
                &gt_dir.join(format!("view_{i:03}.png")),
            )?;
        }
        for (m, model) in models.iter().enumerate() {
            let fdir = dir.join("features").join(&model.tag);
            mk(&fdir)?;
            for (i, map) in self.gt_features[m].iter().enumerate() {
                save_feature_map(map, &fdir.join(format!("view_{i:03}.cusf")))?;
            }
        }
        Ok(())
    }

    /// Load a scene directory; feature maps resample (nearest) to each
    /// camera's render resolution.
    pub fn load(dir: &Path, cfg: &Config) -> Result<SceneData<T>> {
        let cameras: Vec<Camera<T>> = load_cameras(&dir.join("cams.json"))?;
        let points = read_ply_points(&dir.join("points.ply"))?;
        let mut gt_rgb = Vec::with_capacity(cameras.len());
        for (i, cam) in cameras.iter().enumerate() {
            let path = dir.join("gt").join(format!("view_{i:03}.png"));
            let (rgb, w, h) = load_png_rgb::<T>(&path)?;
            if (w, h) != (cam.width, cam.height) {
                return Err(Error::Config(format!(
                    "{}: image is {w}×{h}, camera {} wants {}×{}",
                    path.display(),
                    cam.id,
                    cam.width,
                    cam.height
                )));
            }
            gt_rgb.push(rgb);
        }
        let mut gt_features = Vec::with_capacity(cfg.synth.models.len());
        let mut missing = Vec::new();
        for model in &cfg.synth.models {
            let fdir = dir.join("features").join(&model.tag);
            if !fdir.is_dir() {
                missing.push(model.tag.clone());
                continue;
            }
            let mut per_cam = Vec::with_capacity(cameras.len());
            for (i, cam) in cameras.iter().enumerate() {
                let map = load_feature_map(&fdir.join(format!("view_{i:03}.cusf")))?;
                if map.dim != model.dim {
                    return Err(Error::Config(format!(
                        "feature map for {} has dim {}, config says {}",
                        model.tag, map.dim, model.dim
                    )));
                }
                let map = if (map.height, map.width) != (cam.height, cam.width) {
                    map.resample_nearest(cam.height, cam.width)
                } else {
                    map
                };
                per_cam.push(map);
            }
            gt_features.push(per_cam);
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "scene dir {} lacks feature maps for models: {}",
                dir.display(),
                missing.join(", ")
            )));
        }
        Ok(SceneData {
            cameras,
            points,
            gt_rgb,
            gt_features,
        })
    }

    pub fn train_views(&self, cfg: &Config) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|&i| !cfg.train.holdout_cameras.contains(&self.cameras[i].id))
            .collect()
    }

    pub fn holdout_views(&self, cfg: &Config) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|&i| cfg.train.holdout_cameras.contains(&self.cameras[i].id))
            .collect()
    }
}

/// All learnable state plus the frozen memory bank.
pub struct Engine<T: Real> {
    pub config: Config,
    pub store: ParamStore<T>,
    pub scaffold: Scaffold<T>,
    pub decoders: DecoderBank,
    /// [n_cams × d_c] appearance embeddings, zero-initialized.
    pub embed_table: ParamId,
    pub bank: MemoryBank,
    pub adapt: Vec<AdaptLayer>,
    pub gauss_queries: Option<ParamId>,
    pub iteration: u64,
}

impl<T: Real> Engine<T> {
    /// Fresh engine: voxelize the scene points and initialize every module.
    /// Parameter creation order is fixed; names identify state on disk.
    pub fn initialize(config: Config, scene: &SceneData<T>, bank: MemoryBank) -> Result<Self> {
        config.validate()?;
        for model in &config.synth.models {
            let sub = bank
                .bank(&model.tag)
                .ok_or_else(|| Error::Config(format!("bank lacks model {}", model.tag)))?;
            if sub.dim != model.dim {
                return Err(Error::Config(format!(
                    "bank model {} has dim {}, config says {}",
                    model.tag, sub.dim, model.dim
                )));
            }
        }
        let mut store = ParamStore::new();
        let scaffold = Scaffold::voxelize(
            &mut store,
            &scene.points,
            rl::<T>(config.scene.voxel_size),
            config.scene.gaussians_per_anchor,
            config.scene.dims(),
            config.train.seed,
        )?;
        let decoders = DecoderBank::new(
            &mut store,
            config.scene.dims(),
            config.scene.gaussians_per_anchor,
            config.train.seed,
        );
        let embed_table = store.add(
            "cam.embeds",
            ParamGroup::AppearanceEmbed,
            Tensor::zeros(vec![scene.cameras.len(), config.scene.appear_dim]),
        );
        let adapt = create_adapt_layers(&mut store, &bank, config.scene.query_dim, config.train.seed);
        let gauss_queries = match config.train.query_granularity {
            QueryGranularity::PerAnchor => None,
            QueryGranularity::PerGaussian => Some(create_gauss_query_table(
                &mut store,
                &scaffold,
                config.train.seed,
            )),
        };
        Ok(Engine {
            config,
            store,
            scaffold,
            decoders,
            embed_table,
            bank,
            adapt,
            gauss_queries,
            iteration: 0,
        })
    }

    /// This view's appearance embedding node: its own table row for training
    /// views, the mean of training rows for held-out cameras when configured.
    pub fn embed_node(
        &self,
        tape: &mut Tape<T>,
        scene: &SceneData<T>,
        cam_idx: usize,
        eval_mode: bool,
    ) -> Result<NodeId> {
        let holdout = self
            .config
            .train
            .holdout_cameras
            .contains(&scene.cameras[cam_idx].id);
        if eval_mode && holdout && self.config.train.holdout_embed == HoldoutEmbed::Mean {
            let train_rows = scene.train_views(&self.config);
            let table = self.store.value(self.embed_table);
            let d = self.config.scene.appear_dim;
            let mut mean = vec![T::zero(); d];
            for &r in &train_rows {
                for (m, &v) in mean.iter_mut().zip(table.row(r)) {
                    *m += v;
                }
            }
            let inv = T::one() / rl::<T>(train_rows.len().max(1) as f64);
            for m in &mut mean {
                *m *= inv;
            }
            Ok(tape.constant(Tensor::new(vec![d], mean)?))
        } else {
            let table = tape.param(&self.store, self.embed_table);
            tape.slice_rows(table, cam_idx, cam_idx + 1)
        }
    }

    /// Decode + render one view; returns the decode handles, render result,
    /// and the rgb/query/alpha slices of the image.
    pub fn render_view(
        &self,
        tape: &mut Tape<T>,
        scene: &SceneData<T>,
        cam_idx: usize,
        eval_mode: bool,
    ) -> Result<ViewRender<T>> {
        let cam = &scene.cameras[cam_idx];
        let embed = self.embed_node(tape, scene, cam_idx, eval_mode)?;
        let decode = decode_scene(
            tape,
            &self.store,
            &self.scaffold,
            &self.decoders,
            cam,
            embed,
            self.config.train.query_granularity,
            self.gauss_queries,
        )?;
        let opts = self.config.raster.options::<T>();
        let render = render(
            tape,
            decode.positions,
            decode.scales,
            decode.quats,
            decode.alphas,
            decode.payload,
            cam,
            &opts,
        )?;
        let dq = self.config.scene.query_dim;
        let rgb = tape.slice_cols(render.image, 0, 3)?;
        let qmap_raw = tape.slice_cols(render.image, 3, 3 + dq)?;
        let alpha = tape.slice_cols(render.image, 3 + dq, 4 + dq)?;
        let qmap = if self.config.raster.normalize_qmap {
            // Row-wise divide by (alpha + eps), broadcast via ones.
            let eps = tape.add_scalar(alpha, rl::<T>(1e-6));
            let ones = tape.constant(Tensor::new(vec![1, dq], vec![T::one(); dq])?);
            let denom = tape.matmul(eps, ones)?;
            tape.div(qmap_raw, denom)?
        } else {
            qmap_raw
        };
        Ok(ViewRender {
            decode,
            render,
            rgb,
            qmap,
            alpha,
        })
    }

    /// Full training graph for one view: losses assembled per the config.
    pub fn view_loss(
        &self,
        tape: &mut Tape<T>,
        scene: &SceneData<T>,
        cam_idx: usize,
    ) -> Result<ViewGraph<T>> {
        let vr = self.render_view(tape, scene, cam_idx, false)?;
        let cam = &scene.cameras[cam_idx];
        let gt_rgb = tape.constant(Tensor::new(
            vec![cam.width * cam.height, 3],
            scene.gt_rgb[cam_idx].clone(),
        )?);

        let w = &self.config.train.weights;
        let l1 = l1_loss(tape, vr.rgb, gt_rgb)?;
        let ssim_value = ssim(tape, vr.rgb, gt_rgb, cam.height, cam.width)?;
        let neg = tape.neg(ssim_value);
        let ssim_loss = tape.add_scalar(neg, T::one());
        let scale_reg = scale_loss(tape, vr.decode.scales, &vr.render.visible)?;

        let feat = if w.feature > 0.0 {
            let mut total: Option<NodeId> = None;
            for (m, model) in self.config.synth.models.iter().enumerate() {
                let sub = self.bank.bank(&model.tag).expect("validated at init");
                let att = attend(tape, &self.store, vr.qmap, sub, &self.adapt[m])?;
                let gt = &scene.gt_features[m][cam_idx];
                let gt_node = tape.constant(Tensor::new(
                    vec![cam.width * cam.height, model.dim],
                    gt.data.iter().map(|&v| rl::<T>(v as f64)).collect(),
                )?);
                let fl = feature_loss(tape, att.features, gt_node)?;
                total = Some(match total {
                    None => fl,
                    Some(t) => tape.add(t, fl)?,
                });
            }
            total
        } else {
            None
        };

        let mut total = tape.mul_scalar(l1, rl::<T>(w.l1));
        let s = tape.mul_scalar(ssim_loss, rl::<T>(w.ssim));
        total = tape.add(total, s)?;
        let sc = tape.mul_scalar(scale_reg, rl::<T>(w.scale));
        total = tape.add(total, sc)?;
        if let Some(f) = feat {
            let fw = tape.mul_scalar(f, rl::<T>(w.feature));
            total = tape.add(total, fw)?;
        }

        Ok(ViewGraph {
            view: vr,
            loss_l1: l1,
            loss_ssim: ssim_loss,
            loss_scale: scale_reg,
            loss_feat: feat,
            total,
        })
    }

    /// Forward-only evaluation of one view: PSNR/SSIM against ground truth
    /// plus per-model feature distances from the attended query map.
    pub fn eval_view(&self, scene: &SceneData<T>, cam_idx: usize) -> Result<EvalRow> {
        let mut tape = Tape::new();
        let vr = self.render_view(&mut tape, scene, cam_idx, true)?;
        let cam = &scene.cameras[cam_idx];
        let rendered = tape.value(vr.rgb).data();
        let gt = &scene.gt_rgb[cam_idx];
        let psnr = crate::trainer::metrics::psnr(rendered, gt);
        let ssim = crate::trainer::metrics::ssim_metric(rendered, gt, cam.height, cam.width, 3);
        let mut per_model = Vec::with_capacity(self.config.synth.models.len());
        for (m, model) in self.config.synth.models.iter().enumerate() {
            let sub = self
                .bank
                .bank(&model.tag)
                .ok_or_else(|| Error::Config(format!("bank lacks model {}", model.tag)))?;
            let att = attend(&mut tape, &self.store, vr.qmap, sub, &self.adapt[m])?;
            let (cos, l2) = crate::trainer::metrics::feature_metrics(
                tape.value(att.features).data(),
                &scene.gt_features[m][cam_idx].data,
                model.dim,
            );
            per_model.push(ModelEval {
                tag: model.tag.clone(),
                cosine: cos,
                l2,
            });
        }
        Ok(EvalRow {
            cam: cam.id,
            psnr,
            ssim,
            per_model,
        })
    }

    /// Rendered RGB and query map of one view, for the render command.
    pub fn render_outputs(
        &self,
        scene: &SceneData<T>,
        cam_idx: usize,
    ) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let vr = self.render_view(&mut tape, scene, cam_idx, true)?;
        Ok((
            tape.value(vr.rgb).data().to_vec(),
            tape.value(vr.qmap).data().to_vec(),
            tape.value(vr.alpha).data().to_vec(),
        ))
    }

    /// Closed-form reported parameter count (the model-size accounting):
    /// V·(d_f + 3N + 3) + query state + Σ MLP sizes + cams·d_c
    /// + Σ_j (D_j² + D_j + D_j·d_q). Query state is V·d_q per-anchor and
    /// V·N·d_q per-gaussian, so the two modes differ by exactly V·(N−1)·d_q.
    pub fn reported_param_count(&self, n_cams: usize) -> usize {
        let d = self.config.scene.dims();
        let n = self.config.scene.gaussians_per_anchor;
        let v = self.scaffold.len();
        let query_state = match self.config.train.query_granularity {
            QueryGranularity::PerAnchor => v * d.query,
            QueryGranularity::PerGaussian => v * n * d.query,
        };
        v * (d.feat + 3 * n + 3)
            + query_state
            + DecoderBank::param_count(d, n)
            + n_cams * d.appear
            + crate::membank::adapt_param_count(&self.bank, d.query)
    }

    pub fn param_report(&self, n_cams: usize) -> String {
        let v = self.scaffold.len();
        format!(
            "anchors={} gaussians={} reported_params={} learnable_values={}",
            v,
            self.scaffold.gaussian_count(),
            self.reported_param_count(n_cams),
            self.store.total_values(),
        )
    }
}

pub struct ViewRender<T> {
    pub decode: ViewDecode,
    pub render: RenderResult<T>,
    pub rgb: NodeId,
    pub qmap: NodeId,
    pub alpha: NodeId,
}

pub struct ViewGraph<T> {
    pub view: ViewRender<T>,
    pub loss_l1: NodeId,
    pub loss_ssim: NodeId,
    pub loss_scale: NodeId,
    pub loss_feat: Option<NodeId>,
    pub total: NodeId,
}

#[derive(Debug, Clone)]
pub struct ModelEval {
    pub tag: String,
    pub cosine: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub cam: u32,
    pub psnr: f64,
    pub ssim: f64,
    pub per_model: Vec<ModelEval>,
}

impl EvalRow {
    pub fn mean_cosine(&self) -> f64 {
        self.per_model.iter().map(|m| m.cosine).sum::<f64>() / self.per_model.len().max(1) as f64
    }
}

/// Mean over rows of (psnr, ssim, mean cosine distance).
pub fn summarize(rows: &[EvalRow]) -> (f64, f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.iter().map(|r| r.mean_cosine()).sum::<f64>() / n,
    )
}

/// Build the memory bank from a scene's feature maps: flattened per-pixel
/// vectors in row-major, view-major order per model.
pub fn build_scene_bank<T: Real>(scene: &SceneData<T>, cfg: &Config) -> Result<MemoryBank> {
    let mut banks = Vec::with_capacity(cfg.synth.models.len());
    for (m, model) in cfg.synth.models.iter().enumerate() {
        let maps = &scene.gt_features[m];
        let rows = maps.iter().flat_map(|map| {
            (0..map.height * map.width)
                .map(move |px| map.data[px * map.dim..(px + 1) * map.dim].to_vec())
        });
        banks.push(crate::membank::build_bank(
            &model.tag,
            model.dim,
            rows,
            cfg.bank.gamma as f32,
        )?);
    }
    Ok(MemoryBank { banks })
}

// ── gradient checking ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter group.
    pub per_group: Vec<(ParamGroup, f64)>,
    pub max: f64,
}

/// Build the canonical tiny scene for gradient checking: 4 anchors, two
/// cameras, 8×8 renders, full default dims. Returns the scene plus an engine.
pub fn gradcheck_scene<T: Real>(base: &Config) -> Result<(Config, SceneData<T>, Engine<T>)> {
    let mut cfg = base.clone();
    cfg.synth.width = 8;
    cfg.synth.height = 8;
    cfg.synth.cameras = 2;
    cfg.synth.objects = 1;
    cfg.synth.points = 64;
    cfg.train.holdout_cameras = vec![];
    cfg.lifecycle.enabled = false;
    cfg.validate()?;

    let (_, mut scene) = SceneData::generate(&cfg, cfg.train.seed)?;
    // Keep exactly four points in four distinct cells.
    let mut picked: Vec<crate::math::Vec3<T>> = Vec::new();
    let mut cells = std::collections::HashSet::new();
    for p in &scene.points {
        let c = crate::scaffold::cell_of(*p, rl::<T>(cfg.scene.voxel_size));
        if cells.insert(c) {
            picked.push(*p);
            if picked.len() == 4 {
                break;
            }
        }
    }
    if picked.len() < 4 {
        return Err(Error::Numeric(
            "could not find 4 distinct occupied cells for the gradcheck scene".into(),
        ));
    }
    scene.points = picked;
    let bank = build_scene_bank(&scene, &cfg)?;
    let engine = Engine::initialize(cfg.clone(), &scene, bank)?;
    Ok((cfg, scene, engine))
}

/// Compare tape gradients of the summed per-view training loss against
/// central differences, probing up to `max_coords` coordinates per parameter.
/// Reports the max relative error per parameter group.
///
/// The step should stay near 1e-4: much smaller and the probes start
/// resolving the 3σ footprint cutoffs of individual splats (the compositing
/// weight is discontinuous there by construction), much larger and Taylor
/// truncation dominates.
pub fn gradcheck<T: Real>(
    base: &Config,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (cfg, scene, mut engine) = gradcheck_scene::<T>(base)?;
    let views: Vec<usize> = (0..scene.cameras.len()).collect();

    let loss_of = |engine: &Engine<T>| -> Result<T> {
        let mut total = T::zero();
        for &v in &views {
            let mut tape = Tape::new();
            let g = engine.view_loss(&mut tape, &scene, v)?;
            total += tape.value(g.total).scalar_value();
        }
        Ok(total)
    };

    engine.store.zero_grad();
    for &v in &views {
        let mut tape = Tape::new();
        let g = engine.view_loss(&mut tape, &scene, v)?;
        tape.backward_into(g.total, &mut engine.store)?;
    }

    // finite_diff_check needs the closure to see parameter perturbations; the
    // engine's store is swapped in and out around each probe.
    let mut store = std::mem::take(&mut engine.store);
    let cell = std::cell::RefCell::new(engine);
    let errs = crate::diffcore::finite_diff_check_sampled(
        |probe: &ParamStore<T>| -> Result<T> {
            let mut e = cell.borrow_mut();
            let saved = std::mem::replace(&mut e.store, probe.clone());
            let out = loss_of(&e);
            e.store = saved;
            out
        },
        &mut store,
        rl::<T>(eps),
        max_coords,
        seed,
    )?;
    let mut engine = cell.into_inner();
    engine.store = store;

    let mut per_group: Vec<(ParamGroup, f64)> =
        ParamGroup::ALL.iter().map(|&g| (g, 0.0)).collect();
    for (pid, err) in errs {
        let group = engine.store.get(pid).group;
        for (g, e) in &mut per_group {
            if *g == group {
                *e = e.max(err.as_f64());
            }
        }
    }
    let max = per_group.iter().map(|&(_, e)| e).fold(0.0f64, f64::max);
    let _ = cfg;
    Ok(GradCheckReport { per_group, max })
}
