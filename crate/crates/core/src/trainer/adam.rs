//! Adam with per-group learning rates and exponential decay schedules.

use std::collections::HashMap;

use crate::bytesio::{Reader, Writer};
use crate::config::Config;
use crate::diffcore::{ParamGroup, ParamId, ParamStore};
use crate::error::Result;
use crate::real::{rl, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-15;

/// First/second moment state per parameter, sized like its value.
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Adam {
            m: store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect(),
            v: store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect(),
            step: 0,
        }
    }

    /// One update over every parameter using its group's learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>, rates: &HashMap<ParamGroup, T>) {
        self.step += 1;
        let b1 = rl::<T>(BETA1);
        let b2 = rl::<T>(BETA2);
        let eps = rl::<T>(EPS);
        let one = T::one();
        let bias1 = one - rl::<T>(BETA1.powi(self.step as i32));
        let bias2 = one - rl::<T>(BETA2.powi(self.step as i32));

        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let lr = rates[&store.get(id).group];
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            let grads = p.grad.data();
            debug_assert_eq!(m.len(), grads.len());
            for i in 0..grads.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
            }
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                values[i] = values[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Drop moment rows matching a row-structured parameter edit.
    pub fn remove_rows(&mut self, id: ParamId, rows: &[usize], row_width: usize) {
        for buf in [&mut self.m[id.0], &mut self.v[id.0]] {
            let old = std::mem::take(buf);
            let total_rows = old.len() / row_width;
            let mut keep = Vec::with_capacity(old.len() - rows.len() * row_width);
            let mut drop_iter = rows.iter().peekable();
            for r in 0..total_rows {
                if drop_iter.peek() == Some(&&r) {
                    drop_iter.next();
                    continue;
                }
                keep.extend_from_slice(&old[r * row_width..(r + 1) * row_width]);
            }
            *buf = keep;
        }
    }

    /// Append zeroed moments for grown rows.
    pub fn append_rows(&mut self, id: ParamId, added_values: usize) {
        self.m[id.0].extend(std::iter::repeat(T::zero()).take(added_values));
        self.v[id.0].extend(std::iter::repeat(T::zero()).take(added_values));
    }

    /// Checkpoint chunk `OPTS`: u64 step, u32 count, per param name + numel +
    /// m then v as f32.
    pub fn encode(&self, store: &ParamStore<T>, w: &mut Writer) {
        w.u64(self.step);
        w.u32(store.len() as u32);
        for (id, p) in store.iter() {
            w.short_string(&p.name);
            w.u32(p.value.numel() as u32);
            for x in &self.m[id.0] {
                w.f32(x.as_f32());
            }
            for x in &self.v[id.0] {
                w.f32(x.as_f32());
            }
        }
    }

    pub fn decode(&mut self, store: &ParamStore<T>, r: &mut Reader) -> Result<()> {
        self.step = r.u64()?;
        let count = r.u32()? as usize;
        for _ in 0..count {
            let name = r.short_string()?;
            let numel = r.u32()? as usize;
            let m = r.f32s(numel)?;
            let v = r.f32s(numel)?;
            let Some(id) = store.find(&name) else {
                continue; // stale entry for a parameter this run doesn't have
            };
            if store.value(id).numel() != numel {
                return Err(r.error(format!(
                    "optimizer state for {name} has {numel} values, param has {}",
                    store.value(id).numel()
                )));
            }
            self.m[id.0] = m.into_iter().map(|x| rl::<T>(x as f64)).collect();
            self.v[id.0] = v.into_iter().map(|x| rl::<T>(x as f64)).collect();
        }
        Ok(())
    }
}

/// Per-group learning rates at an iteration: offsets and latents decay
/// exponentially to their final values over the horizon, others hold.
pub fn group_rates<T: Real>(cfg: &Config, iteration: u64) -> HashMap<ParamGroup, T> {
    let horizon = cfg.lr_horizon().max(1);
    let t = (iteration.min(horizon) as f64) / horizon as f64;
    let decay = |lr0: f64, lr1: f64| -> T { rl::<T>(lr0 * (lr1 / lr0).powf(t)) };
    let r = &cfg.train.rates;
    HashMap::from([
        (ParamGroup::AnchorOffset, decay(r.offsets, r.offsets_final)),
        (ParamGroup::AnchorLatent, decay(r.latents, r.latents_final)),
        (ParamGroup::AnchorScale, rl::<T>(r.anchor_scale)),
        (ParamGroup::Mlp, rl::<T>(r.mlp)),
        (ParamGroup::AppearanceEmbed, rl::<T>(r.appearance)),
        (ParamGroup::AdaptLayer, rl::<T>(r.adapt)),
    ])
}
