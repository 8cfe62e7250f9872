//! Feature-aware significance scoring, anchor pruning, and gradient-driven
//! anchor growing.
//!
//! Significance per anchor combines the latent norm, the window-mean latent
//! gradient norm, and a rendering contribution score; anchors in the lowest
//! fraction get removed, and Gaussians with large positional gradients seed
//! new anchors in unoccupied cells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::real::{rl, Real};
use crate::scaffold::{cell_of, Scaffold};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifecycleConfig {
    pub enabled: bool,
    /// Fraction of anchors removed per prune event.
    pub prune_ratio: f64,
    /// Weight on the latent feature norm (λ_{v,n}).
    pub lambda_feat: f64,
    /// Weight on the latent gradient norm (λ_{v,g}).
    pub lambda_grad: f64,
    /// Window-mean positional gradient norm that triggers growing.
    pub grow_grad_threshold: f64,
    /// Iterations between lifecycle events.
    pub interval: u64,
    /// No events before this iteration.
    pub warmup: u64,
    /// No events after this iteration.
    pub stop_iter: u64,
    /// Percentile defining the volume normalizer V₉₀.
    pub volume_percentile: f64,
    /// Exponent on the clamped normalized volume.
    pub volume_beta: f64,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            enabled: true,
            prune_ratio: 0.001,
            lambda_feat: 2.0,
            lambda_grad: 8.0,
            grow_grad_threshold: 2e-4,
            interval: 100,
            warmup: 500,
            stop_iter: 15_000,
            volume_percentile: 0.9,
            volume_beta: 1.0,
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::Config(format!(
                "prune_ratio must be in [0, 1), got {}",
                self.prune_ratio
            )));
        }
        if self.lambda_feat < 0.0 || self.lambda_grad < 0.0 {
            return Err(Error::Config("significance weights must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.volume_percentile) {
            return Err(Error::Config("volume percentile must be in [0, 1]".into()));
        }
        if self.interval == 0 {
            return Err(Error::Config("lifecycle interval must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn event_due(&self, iteration: u64) -> bool {
        self.enabled
            && iteration >= self.warmup
            && iteration <= self.stop_iter
            && iteration % self.interval == 0
    }
}

/// Per-view render statistics feeding the contribution score.
pub struct ViewStats<T> {
    /// Hit counts per Gaussian (pixels with α·G above the hit threshold).
    pub hits: Vec<u32>,
    /// Decoded opacities per Gaussian for this view.
    pub alphas: Vec<T>,
    /// Product of the three decoded scale axes per Gaussian.
    pub volumes: Vec<T>,
}

/// Percentile by nearest-rank over a copy of the values.
fn percentile<T: Real>(values: &[T], p: f64) -> T {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((sorted.len() as f64) * p).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-Gaussian contribution for one view:
/// S_{v,n} = hits · α · clamp(V/V_p, 0, 1)^β with V_p this view's percentile
/// volume.
pub fn per_gaussian_contribution<T: Real>(view: &ViewStats<T>, cfg: &LifecycleConfig) -> Vec<T> {
    let vp = percentile(&view.volumes, cfg.volume_percentile);
    let beta = cfg.volume_beta;
    view.hits
        .iter()
        .zip(view.alphas.iter().zip(&view.volumes))
        .map(|(&h, (&a, &v))| {
            let gamma = if vp <= T::zero() {
                T::one()
            } else {
                let ratio = (v / vp).max(T::zero()).min(T::one());
                rl::<T>(ratio.as_f64().powf(beta))
            };
            rl::<T>(h as f64) * a * gamma
        })
        .collect()
}

/// Anchor-level contribution over a window of rendered views:
/// Σ_views Σ_{n} S_{v,n}.
pub fn contribution_score<T: Real>(
    views: &[ViewStats<T>],
    per_anchor: usize,
    anchor_count: usize,
    cfg: &LifecycleConfig,
) -> Result<Vec<T>> {
    if views.is_empty() {
        return Err(Error::Numeric(
            "contribution score needs at least one rendered view".into(),
        ));
    }
    let mut per_anchor_score = vec![T::zero(); anchor_count];
    for view in views {
        let per_gauss = per_gaussian_contribution(view, cfg);
        for (g, s) in per_gauss.into_iter().enumerate() {
            per_anchor_score[g / per_anchor] += s;
        }
    }
    Ok(per_anchor_score)
}

/// One anchor's significance decomposition:
/// S = λ_{v,n}·‖z‖ + λ_{v,g}·‖∇z‖ + S_contrib.
#[derive(Debug, Clone)]
pub struct SignificanceRecord<T> {
    pub anchor: usize,
    pub feat_norm: T,
    pub grad_norm: T,
    pub contrib: T,
    pub total: T,
}

/// Score every anchor from its latent row and accumulated window statistics.
pub fn significance<T: Real>(
    store: &ParamStore<T>,
    scaffold: &Scaffold<T>,
    cfg: &LifecycleConfig,
) -> Vec<SignificanceRecord<T>> {
    let latents = store.value(scaffold.latents);
    scaffold
        .anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let feat_norm = latents
                .row(i)
                .iter()
                .map(|&v| v * v)
                .fold(T::zero(), |x, y| x + y)
                .sqrt();
            let grad_norm = if a.obs_count == 0 {
                T::zero()
            } else {
                a.grad_norm_accum / rl::<T>(a.obs_count as f64)
            };
            let contrib = a.contrib_accum;
            let total =
                rl::<T>(cfg.lambda_feat) * feat_norm + rl::<T>(cfg.lambda_grad) * grad_norm + contrib;
            SignificanceRecord {
                anchor: i,
                feat_norm,
                grad_norm,
                contrib,
                total,
            }
        })
        .collect()
}

/// Remove the k = ⌊ratio·V⌋ lowest-significance anchors (ties by anchor id
/// ascending). Returns the removed anchor indices, sorted ascending, so the
/// optimizer can drop matching state rows.
pub fn prune<T: Real>(
    scaffold: &mut Scaffold<T>,
    store: &mut ParamStore<T>,
    records: &[SignificanceRecord<T>],
    ratio: f64,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "prune ratio must be in [0, 1), got {ratio}"
        )));
    }
    let v = scaffold.len();
    let mut k = (ratio * v as f64).floor() as usize;
    if ratio > 0.0 && (v as f64) >= 1.0 / ratio {
        k = k.max(1);
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .total
            .partial_cmp(&records[b].total)
            .unwrap()
            .then(records[a].anchor.cmp(&records[b].anchor))
    });
    let mut removed: Vec<usize> = order[..k].iter().map(|&i| records[i].anchor).collect();
    removed.sort_unstable();
    scaffold.remove_anchors(store, &removed);
    Ok(removed)
}

/// Text report, one line per anchor: `id,feat_norm,grad_norm,contrib,S,pruned`.
pub fn prune_report<T: Real>(records: &[SignificanceRecord<T>], pruned: &[usize]) -> String {
    let mut out = String::from("id,feat_norm,grad_norm,contrib,S,pruned\n");
    for r in records {
        let flag = if pruned.binary_search(&r.anchor).is_ok() {
            1
        } else {
            0
        };
        out.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{}\n",
            r.anchor,
            r.feat_norm.as_f64(),
            r.grad_norm.as_f64(),
            r.contrib.as_f64(),
            r.total.as_f64(),
            flag
        ));
    }
    out
}

/// Add anchors where window-mean positional gradients exceed the threshold
/// and the decoded position falls in an unoccupied cell. New latents copy the
/// parent's plus small noise. Returns how many anchors were added.
pub fn grow<T: Real>(
    scaffold: &mut Scaffold<T>,
    store: &mut ParamStore<T>,
    cfg: &LifecycleConfig,
    seed: u64,
) -> usize {
    if scaffold.pos_grad_count == 0 {
        return 0;
    }
    let n = scaffold.per_anchor;
    let denom = rl::<T>(scaffold.pos_grad_count as f64);
    let threshold = rl::<T>(cfg.grow_grad_threshold);
    // Collect candidates first: growth must not read its own output.
    let mut candidates: Vec<(usize, [i32; 3])> = Vec::new();
    for anchor in 0..scaffold.len() {
        let positions = scaffold.gaussian_positions(store, anchor);
        for (slot, pos) in positions.into_iter().enumerate() {
            let g = anchor * n + slot;
            let mean_grad = scaffold.pos_grad_accum[g] / denom;
            if mean_grad <= threshold {
                continue;
            }
            let cell = cell_of(pos, scaffold.voxel_size);
            if !scaffold.cell_occupied(cell) {
                candidates.push((anchor, cell));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6706);
    let mut added = 0;
    for (parent, cell) in candidates {
        if scaffold.cell_occupied(cell) {
            continue; // another candidate claimed it this event
        }
        let mut latent = store.value(scaffold.latents).row(parent).to_vec();
        for v in &mut latent {
            *v += rl::<T>(rng.gen_range(-0.01..0.01));
        }
        scaffold.add_anchor(store, cell, &latent, &mut rng);
        added += 1;
    }
    added
}
