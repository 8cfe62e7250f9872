//! Multimodal memory: per-model sub-banks built by greedy similarity
//! reduction, and dot-product attention retrieval with per-model adaptation.
//!
//! Bank entries are frozen snapshots of provider features; only the query
//! projectors and adaptation layers train.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytesio::{Reader, Writer};
use crate::diffcore::{NodeId, ParamGroup, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::real::{rl, Real};

pub const BANK_MAGIC: &[u8; 4] = b"CUSB";
pub const BANK_VERSION: u32 = 1;

/// One model's memory: K unit-norm entries of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBank {
    pub tag: String,
    pub dim: usize,
    pub gamma: f32,
    /// K×dim row-major, rows unit-norm.
    pub entries: Vec<f32>,
    /// Zero-norm inputs dropped during construction.
    pub skipped: usize,
}

impl SubBank {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.entries.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }
}

/// Greedy sequential reduction: a vector joins the bank iff its cosine
/// similarity to every already-selected entry stays below `gamma`. Input
/// order is part of the contract; the scan is strictly sequential.
pub fn build_bank(
    tag: &str,
    dim: usize,
    raw: impl IntoIterator<Item = Vec<f32>>,
    gamma: f32,
) -> Result<SubBank> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::Config(format!(
            "bank threshold must be in (0, 1), got {gamma}"
        )));
    }
    let mut bank = SubBank {
        tag: tag.to_string(),
        dim,
        gamma,
        entries: Vec::new(),
        skipped: 0,
    };
    for v in raw {
        if v.len() != dim {
            return Err(Error::Dimension(format!(
                "bank {tag}: entry width {} vs dim {dim}",
                v.len()
            )));
        }
        let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            bank.skipped += 1;
            continue;
        }
        let unit: Vec<f32> = v.iter().map(|&x| (x as f64 / norm) as f32).collect();
        let mut max_sim = f32::NEG_INFINITY;
        for k in 0..bank.len() {
            let e = bank.entry(k);
            let sim: f32 = unit.iter().zip(e).map(|(a, b)| a * b).sum();
            max_sim = max_sim.max(sim);
        }
        if bank.is_empty() || max_sim < gamma {
            bank.entries.extend_from_slice(&unit);
        }
    }
    Ok(bank)
}

/// The per-model sub-banks, frozen after construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryBank {
    pub banks: Vec<SubBank>,
}

impl MemoryBank {
    pub fn bank(&self, tag: &str) -> Option<&SubBank> {
        self.banks.iter().find(|b| b.tag == tag)
    }

    /// `CUSB`: magic, version u32, model count u16; per model tag string,
    /// D u32, γ f32, K u32, K×D f32 entries.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = Writer::new();
        w.magic(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.u16(self.banks.len() as u16);
        for b in &self.banks {
            w.short_string(&b.tag);
            w.u32(b.dim as u32);
            w.f32(b.gamma);
            w.u32(b.len() as u32);
            w.f32s(b.entries.iter());
        }
        std::fs::write(path, w.into_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader::new(&bytes, path.display().to_string());
        r.expect_magic(BANK_MAGIC)?;
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(r.error(format!("unsupported bank version {version}")));
        }
        let count = r.u16()? as usize;
        let mut banks = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = r.short_string()?;
            let dim = r.u32()? as usize;
            let gamma = r.f32()?;
            let k = r.u32()? as usize;
            let entries = r.f32s(k * dim)?;
            banks.push(SubBank {
                tag,
                dim,
                gamma,
                entries,
                skipped: 0,
            });
        }
        if r.remaining() != 0 {
            return Err(r.error(format!("{} trailing bytes", r.remaining())));
        }
        Ok(MemoryBank { banks })
    }
}

/// Learnable per-model adaptation: a projector taking the shared query into
/// the model's feature space, then a linear output adaptation.
#[derive(Debug, Clone)]
pub struct AdaptLayer {
    pub tag: String,
    pub dim: usize,
    /// [dim × query_dim]
    pub projector: ParamId,
    /// [dim × dim]
    pub w_adapt: ParamId,
    /// [dim]
    pub bias: ParamId,
}

/// One adapt layer per sub-bank. The projector starts random (it must break
/// symmetry), the adaptation starts at identity.
pub fn create_adapt_layers<T: Real>(
    store: &mut ParamStore<T>,
    bank: &MemoryBank,
    query_dim: usize,
    seed: u64,
) -> Vec<AdaptLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada7);
    bank.banks
        .iter()
        .map(|b| {
            let bound = (6.0 / query_dim as f64).sqrt();
            let proj: Vec<T> = (0..b.dim * query_dim)
                .map(|_| rl::<T>(rng.gen_range(-bound..bound)))
                .collect();
            let mut adapt = vec![T::zero(); b.dim * b.dim];
            for i in 0..b.dim {
                adapt[i * b.dim + i] = T::one();
            }
            AdaptLayer {
                tag: b.tag.clone(),
                dim: b.dim,
                projector: store.add(
                    format!("adapt.{}.proj", b.tag),
                    ParamGroup::AdaptLayer,
                    Tensor::new(vec![b.dim, query_dim], proj).expect("proj init"),
                ),
                w_adapt: store.add(
                    format!("adapt.{}.w", b.tag),
                    ParamGroup::AdaptLayer,
                    Tensor::new(vec![b.dim, b.dim], adapt).expect("adapt init"),
                ),
                bias: store.add(
                    format!("adapt.{}.b", b.tag),
                    ParamGroup::AdaptLayer,
                    Tensor::zeros(vec![b.dim]),
                ),
            }
        })
        .collect()
}

/// Learnable value count of all adapt layers: Σ_j D_j² + D_j + D_j·d_q.
pub fn adapt_param_count(bank: &MemoryBank, query_dim: usize) -> usize {
    bank.banks
        .iter()
        .map(|b| b.dim * b.dim + b.dim + b.dim * query_dim)
        .sum()
}

/// Tape handles for one model's retrieval over a batch of pixel queries.
pub struct Attended {
    /// [px × dim] adapted features f_pred.
    pub features: NodeId,
    /// [px × K] attention weights (softmax rows).
    pub weights: NodeId,
}

/// q̂ = P·q; a = softmax(q̂ᵀ m_k / √D); f̃ = Σ a_k m_k; f = W f̃ + b.
pub fn attend<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    queries: NodeId,
    sub: &SubBank,
    adapt: &AdaptLayer,
) -> Result<Attended> {
    if sub.is_empty() {
        return Err(Error::Numeric(format!(
            "attend: sub-bank {} is empty",
            sub.tag
        )));
    }
    let entries: Vec<T> = sub.entries.iter().map(|&v| rl::<T>(v as f64)).collect();
    let m = tape.constant(Tensor::new(vec![sub.len(), sub.dim], entries)?);

    let p = tape.param(store, adapt.projector);
    let q_hat = tape.matmul_t(queries, p)?;
    let scores = tape.matmul_t(q_hat, m)?;
    let scores = tape.mul_scalar(scores, T::one() / rl::<T>(sub.dim as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let pooled = tape.matmul(weights, m)?;
    let w = tape.param(store, adapt.w_adapt);
    let adapted = tape.matmul_t(pooled, w)?;
    let b = tape.param(store, adapt.bias);
    let features = tape.bias_add(adapted, b)?;
    Ok(Attended { features, weights })
}
