//! Losses, optimizer, metrics, training schedule, and checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod metrics;

pub use adam::{group_rates, Adam};
pub use checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lifecycle::{self, per_gaussian_contribution, ViewStats};
use crate::pipeline::{Engine, EvalRow, SceneData};
use crate::real::{rl, Real};

/// Everything a finished run produced besides the mutated engine.
pub struct TrainRun {
    /// Per-iteration log: `iter,loss,loss_l1,loss_ssim,loss_scale,loss_feat,psnr,anchors,params`.
    pub metrics_csv: String,
    /// Periodic eval log with one row per (iteration, camera).
    pub eval_csv: String,
    /// Parameter-count report lines (startup + every lifecycle event).
    pub reports: Vec<String>,
    pub final_train: Vec<EvalRow>,
    pub final_holdout: Vec<EvalRow>,
}

fn eval_header(engine: &Engine<impl Real>) -> String {
    let mut h = String::from("iter,split,cam,psnr,ssim");
    for m in &engine.config.synth.models {
        write!(h, ",cos_{},l2_{}", m.tag, m.tag).unwrap();
    }
    h.push('\n');
    h
}

fn eval_rows<T: Real>(
    engine: &Engine<T>,
    scene: &SceneData<T>,
    views: &[usize],
) -> Result<Vec<EvalRow>> {
    views.iter().map(|&v| engine.eval_view(scene, v)).collect()
}

fn append_eval(csv: &mut String, iter: u64, split: &str, rows: &[EvalRow]) {
    for r in rows {
        write!(csv, "{iter},{split},{},{:.4},{:.6}", r.cam, r.psnr, r.ssim).unwrap();
        for m in &r.per_model {
            write!(csv, ",{:.6},{:.6}", m.cosine, m.l2).unwrap();
        }
        csv.push('\n');
    }
}

/// Run the training loop: sample view → decode → rasterize → attend →
/// losses → backward → Adam step → lifecycle events, fully deterministic in
/// the seed. Writes `metrics.csv`, `eval.csv`, and `ckpt.cusg` into
/// `out_dir` when given.
pub fn train<T: Real>(
    engine: &mut Engine<T>,
    opt: &mut Adam<T>,
    scene: &SceneData<T>,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    let cfg = engine.config.clone();
    let train_views = scene.train_views(&cfg);
    if train_views.is_empty() {
        return Err(Error::Config(
            "no training views: every camera is held out".into(),
        ));
    }

    let mut metrics_csv =
        String::from("iter,loss,loss_l1,loss_ssim,loss_scale,loss_feat,psnr,anchors,params\n");
    let mut eval_csv = eval_header(engine);
    let mut reports = vec![format!(
        "iter=0 {}",
        engine.param_report(scene.cameras.len())
    )];

    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = u64::MAX;

    let start = engine.iteration + 1;
    for it in start..=cfg.train.iterations {
        // Fixed permutation per epoch, reseeded from (seed, epoch).
        let epoch = (it - 1) / train_views.len() as u64;
        if epoch != perm_epoch {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.train.seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
            perm = train_views.clone();
            perm.shuffle(&mut rng);
            perm_epoch = epoch;
        }
        let cam_idx = perm[((it - 1) % train_views.len() as u64) as usize];

        engine.store.zero_grad();
        let mut tape = crate::diffcore::Tape::new();
        let graph = engine.view_loss(&mut tape, scene, cam_idx)?;

        let total = tape.value(graph.total).scalar_value();
        let l1 = tape.value(graph.loss_l1).scalar_value();
        let ssim_l = tape.value(graph.loss_ssim).scalar_value();
        let scale_l = tape.value(graph.loss_scale).scalar_value();
        let feat_l = graph
            .loss_feat
            .map(|f| tape.value(f).scalar_value())
            .unwrap_or_else(T::zero);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {it} (view {cam_idx}): \
                 l1={l1:e} ssim={ssim_l:e} scale={scale_l:e} feat={feat_l:e}"
            )));
        }

        tape.backward_into(graph.total, &mut engine.store)?;

        // Window statistics for the lifecycle.
        {
            let n = engine.scaffold.per_anchor;
            let latent_grads = engine.store.grad(engine.scaffold.latents).clone();
            for (a, anchor) in engine.scaffold.anchors.iter_mut().enumerate() {
                let norm = latent_grads
                    .row(a)
                    .iter()
                    .map(|&v| v * v)
                    .fold(T::zero(), |x, y| x + y)
                    .sqrt();
                anchor.grad_norm_accum += norm;
                anchor.obs_count += 1;
            }
            let alphas = tape.value(graph.view.decode.alphas).data();
            let scales = tape.value(graph.view.decode.scales).data();
            let volumes: Vec<T> = (0..alphas.len())
                .map(|g| scales[g * 3] * scales[g * 3 + 1] * scales[g * 3 + 2])
                .collect();
            let vs = ViewStats {
                hits: graph.view.render.hits.clone(),
                alphas: alphas.to_vec(),
                volumes,
            };
            let per_gauss = per_gaussian_contribution(&vs, &cfg.lifecycle);
            for (g, s) in per_gauss.into_iter().enumerate() {
                engine.scaffold.anchors[g / n].contrib_accum += s;
            }
            let pos_grads = tape.grad(graph.view.decode.positions);
            if !pos_grads.is_empty() {
                for g in 0..alphas.len() {
                    let norm = (pos_grads[g * 3] * pos_grads[g * 3]
                        + pos_grads[g * 3 + 1] * pos_grads[g * 3 + 1]
                        + pos_grads[g * 3 + 2] * pos_grads[g * 3 + 2])
                        .sqrt();
                    engine.scaffold.pos_grad_accum[g] += norm;
                }
            }
            engine.scaffold.pos_grad_count += 1;
        }

        let rates = group_rates::<T>(&cfg, it);
        opt.step(&mut engine.store, &rates);

        // Per-view PSNR before the params move is the logged train signal.
        let view_psnr = metrics::psnr(
            tape.value(graph.view.rgb).data(),
            &scene.gt_rgb[cam_idx],
        );
        drop(tape);

        if cfg.lifecycle.event_due(it) {
            let line = lifecycle_event(engine, opt, it)?;
            reports.push(format!(
                "iter={it} {line} {}",
                engine.param_report(scene.cameras.len())
            ));
        }

        engine.iteration = it;

        if it % cfg.train.log_every == 0 || it == cfg.train.iterations {
            writeln!(
                metrics_csv,
                "{it},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{},{}",
                total.as_f64(),
                l1.as_f64(),
                ssim_l.as_f64(),
                scale_l.as_f64(),
                feat_l.as_f64(),
                view_psnr,
                engine.scaffold.len(),
                engine.reported_param_count(scene.cameras.len())
            )
            .unwrap();
        }

        if cfg.train.eval_every > 0 && it % cfg.train.eval_every == 0 && it != cfg.train.iterations
        {
            let tr = eval_rows(engine, scene, &scene.train_views(&cfg))?;
            let ho = eval_rows(engine, scene, &scene.holdout_views(&cfg))?;
            append_eval(&mut eval_csv, it, "train", &tr);
            append_eval(&mut eval_csv, it, "holdout", &ho);
        }

        if cfg.train.checkpoint_every > 0 && it % cfg.train.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                save_checkpoint(engine, opt, &dir.join(format!("ckpt_{it:06}.cusg")))?;
            }
        }
    }

    let final_train = eval_rows(engine, scene, &scene.train_views(&cfg))?;
    let final_holdout = eval_rows(engine, scene, &scene.holdout_views(&cfg))?;
    append_eval(&mut eval_csv, cfg.train.iterations, "train", &final_train);
    append_eval(&mut eval_csv, cfg.train.iterations, "holdout", &final_holdout);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        std::fs::write(dir.join("metrics.csv"), &metrics_csv)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        std::fs::write(dir.join("eval.csv"), &eval_csv)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        save_checkpoint(engine, opt, &dir.join("ckpt.cusg"))?;
    }

    Ok(TrainRun {
        metrics_csv,
        eval_csv,
        reports,
        final_train,
        final_holdout,
    })
}

/// Prune, then grow, then reset the statistics windows; optimizer state rows
/// follow the anchor rows. Returns a short event summary.
pub fn lifecycle_event<T: Real>(
    engine: &mut Engine<T>,
    opt: &mut Adam<T>,
    iteration: u64,
) -> Result<String> {
    let cfg = engine.config.lifecycle.clone();
    let n = engine.scaffold.per_anchor;
    let dims = engine.scaffold.dims;

    let records = lifecycle::significance(&engine.store, &engine.scaffold, &cfg);
    let removed = lifecycle::prune(
        &mut engine.scaffold,
        &mut engine.store,
        &records,
        cfg.prune_ratio,
    )?;
    if !removed.is_empty() {
        opt.remove_rows(engine.scaffold.latents, &removed, dims.feat);
        opt.remove_rows(engine.scaffold.offsets, &removed, n * 3);
        opt.remove_rows(engine.scaffold.scales, &removed, 3);
        if let Some(q) = engine.gauss_queries {
            engine.store.remove_rows(q, &removed);
            opt.remove_rows(q, &removed, n * dims.query);
        }
    }

    let added = lifecycle::grow(
        &mut engine.scaffold,
        &mut engine.store,
        &cfg,
        engine.config.train.seed ^ iteration,
    );
    if added > 0 {
        opt.append_rows(engine.scaffold.latents, added * dims.feat);
        opt.append_rows(engine.scaffold.offsets, added * n * 3);
        opt.append_rows(engine.scaffold.scales, added * 3);
        if let Some(q) = engine.gauss_queries {
            // Fresh per-gaussian queries for grown anchors: small noise.
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(
                engine.config.train.seed ^ iteration ^ 0x715a,
            );
            let rows: Vec<T> = (0..added * n * dims.query)
                .map(|_| rl::<T>(rng.gen_range(-0.01..0.01)))
                .collect();
            engine.store.append_rows(q, &rows);
            opt.append_rows(q, rows.len());
        }
    }

    engine.scaffold.reset_anchor_windows();
    Ok(format!("pruned={} grown={added}", removed.len()))
}
