//! Chunked checkpoint container.
//!
//! Layout: magic `CUSG`, version u32, then chunks of tag[4] + u32 length +
//! payload. Unknown chunks are skipped on read. `META` carries the validated
//! config echo and the iteration counter; parameter chunks are f32 LE.

use std::path::Path;

use crate::bytesio::{Reader, Writer};
use crate::config::Config;
use crate::decoders::{DecoderBank, QueryGranularity};
use crate::diffcore::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::membank::{AdaptLayer, MemoryBank};
use crate::pipeline::Engine;
use crate::real::{rl, Real};
use crate::scaffold::Scaffold;
use crate::trainer::adam::Adam;

pub const CKPT_MAGIC: &[u8; 4] = b"CUSG";
pub const CKPT_VERSION: u32 = 1;

fn chunk(out: &mut Writer, tag: &[u8; 4], payload: Writer) {
    out.magic(tag);
    let bytes = payload.into_bytes();
    out.u32(bytes.len() as u32);
    out.bytes(&bytes);
}

pub fn encode_checkpoint<T: Real>(engine: &Engine<T>, adam: &Adam<T>) -> Vec<u8> {
    let mut out = Writer::new();
    out.magic(CKPT_MAGIC);
    out.u32(CKPT_VERSION);

    let mut meta = Writer::new();
    let cfg_json = engine.config.to_json();
    meta.u32(cfg_json.len() as u32);
    meta.bytes(cfg_json.as_bytes());
    meta.u64(engine.iteration);
    chunk(&mut out, b"META", meta);

    let mut anch = Writer::new();
    engine.scaffold.encode_anchors(&engine.store, &mut anch);
    chunk(&mut out, b"ANCH", anch);

    let mut mlps = Writer::new();
    engine.decoders.encode(&engine.store, &mut mlps);
    chunk(&mut out, b"MLPS", mlps);

    let mut adpt = Writer::new();
    adpt.u16(engine.adapt.len() as u16);
    for layer in &engine.adapt {
        adpt.short_string(&layer.tag);
        adpt.u32(layer.dim as u32);
        for id in [layer.projector, layer.w_adapt, layer.bias] {
            for v in engine.store.value(id).data() {
                adpt.f32(v.as_f32());
            }
        }
    }
    chunk(&mut out, b"ADPT", adpt);

    let mut appe = Writer::new();
    let table = engine.store.value(engine.embed_table);
    let (cams, dc) = table.dims2();
    appe.u32(cams as u32);
    appe.u32(dc as u32);
    for v in table.data() {
        appe.f32(v.as_f32());
    }
    chunk(&mut out, b"APPE", appe);

    if let Some(q) = engine.gauss_queries {
        let mut gqry = Writer::new();
        let t = engine.store.value(q);
        let (v, cols) = t.dims2();
        gqry.u32(v as u32);
        gqry.u32(cols as u32);
        for x in t.data() {
            gqry.f32(x.as_f32());
        }
        chunk(&mut out, b"GQRY", gqry);
    }

    let mut opts = Writer::new();
    adam.encode(&engine.store, &mut opts);
    chunk(&mut out, b"OPTS", opts);

    out.into_bytes()
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint<T: Real>(engine: &Engine<T>, adam: &Adam<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(engine, adam);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Rebuild an engine (and its optimizer state) from a checkpoint. The memory
/// bank comes from its own file; pass `None` when retrieval is not needed
/// (e.g. RGB-only rendering).
pub fn load_checkpoint<T: Real>(
    path: &Path,
    bank: Option<MemoryBank>,
) -> Result<(Engine<T>, Adam<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pname = path.display().to_string();
    let mut r = Reader::new(&bytes, pname.clone());
    r.expect_magic(CKPT_MAGIC)?;
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }

    let mut chunks: Vec<([u8; 4], Vec<u8>)> = Vec::new();
    while r.remaining() > 0 {
        let tag: [u8; 4] = r.bytes(4, "chunk tag")?.try_into().unwrap();
        let len = r.u32()? as usize;
        let payload = r.bytes(len, "chunk payload")?.to_vec();
        chunks.push((tag, payload));
    }
    let find = |tag: &[u8; 4]| -> Result<&[u8]> {
        chunks
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| {
                Error::format(
                    &pname,
                    0,
                    format!("missing chunk {}", String::from_utf8_lossy(tag)),
                )
            })
    };

    // META first: the config echo drives every shape below.
    let meta = find(b"META")?;
    let mut mr = Reader::new(meta, format!("{pname}:META"));
    let cfg_len = mr.u32()? as usize;
    let cfg_raw = mr.bytes(cfg_len, "config echo")?;
    let cfg_text = std::str::from_utf8(cfg_raw)
        .map_err(|_| mr.error("config echo is not utf8"))?;
    let config = Config::from_json(cfg_text)?;
    let iteration = mr.u64()?;

    let mut store = ParamStore::new();
    let mut scaffold = Scaffold::voxelize(
        &mut store,
        &[[T::zero(), T::zero(), T::zero()]],
        rl::<T>(config.scene.voxel_size),
        config.scene.gaussians_per_anchor,
        config.scene.dims(),
        config.train.seed,
    )?;
    let mut ar = Reader::new(find(b"ANCH")?, format!("{pname}:ANCH"));
    scaffold.decode_anchors(&mut store, &mut ar)?;

    let decoders = DecoderBank::new(
        &mut store,
        config.scene.dims(),
        config.scene.gaussians_per_anchor,
        config.train.seed,
    );
    let mut dr = Reader::new(find(b"MLPS")?, format!("{pname}:MLPS"));
    decoders.decode(&mut store, &mut dr)?;

    let mut er = Reader::new(find(b"APPE")?, format!("{pname}:APPE"));
    let cams = er.u32()? as usize;
    let dc = er.u32()? as usize;
    if dc != config.scene.appear_dim {
        return Err(er.error(format!(
            "appearance width {dc} vs config {}",
            config.scene.appear_dim
        )));
    }
    let data = er.f32s(cams * dc)?;
    let embed_table = store.add(
        "cam.embeds",
        ParamGroup::AppearanceEmbed,
        Tensor::new(vec![cams, dc], data.into_iter().map(|v| rl::<T>(v as f64)).collect())?,
    );

    // Adapt layers come from the chunk itself so loading works without the
    // bank file; when a bank is supplied the dims must agree.
    let mut adapt = Vec::new();
    let mut xr = Reader::new(find(b"ADPT")?, format!("{pname}:ADPT"));
    let count = xr.u16()? as usize;
    let dq = config.scene.query_dim;
    for _ in 0..count {
        let tag = xr.short_string()?;
        let dim = xr.u32()? as usize;
        let proj = xr.f32s(dim * dq)?;
        let w = xr.f32s(dim * dim)?;
        let b = xr.f32s(dim)?;
        let to_t = |v: Vec<f32>| -> Vec<T> { v.into_iter().map(|x| rl::<T>(x as f64)).collect() };
        adapt.push(AdaptLayer {
            tag: tag.clone(),
            dim,
            projector: store.add(
                format!("adapt.{tag}.proj"),
                ParamGroup::AdaptLayer,
                Tensor::new(vec![dim, dq], to_t(proj))?,
            ),
            w_adapt: store.add(
                format!("adapt.{tag}.w"),
                ParamGroup::AdaptLayer,
                Tensor::new(vec![dim, dim], to_t(w))?,
            ),
            bias: store.add(
                format!("adapt.{tag}.b"),
                ParamGroup::AdaptLayer,
                Tensor::new(vec![dim], to_t(b))?,
            ),
        });
    }
    if let Some(bank) = &bank {
        for layer in &adapt {
            if let Some(sub) = bank.bank(&layer.tag) {
                if sub.dim != layer.dim {
                    return Err(Error::Config(format!(
                        "bank model {} has dim {}, checkpoint says {}",
                        layer.tag, sub.dim, layer.dim
                    )));
                }
            }
        }
    }

    let gauss_queries = match config.train.query_granularity {
        QueryGranularity::PerGaussian => {
            let mut gr = Reader::new(find(b"GQRY")?, format!("{pname}:GQRY"));
            let v = gr.u32()? as usize;
            let cols = gr.u32()? as usize;
            let data = gr.f32s(v * cols)?;
            Some(store.add(
                "anchor.gauss_queries",
                ParamGroup::AnchorLatent,
                Tensor::new(
                    vec![v, cols],
                    data.into_iter().map(|x| rl::<T>(x as f64)).collect(),
                )?,
            ))
        }
        QueryGranularity::PerAnchor => None,
    };

    let mut engine = Engine {
        config,
        store,
        scaffold,
        decoders,
        embed_table,
        bank: bank.unwrap_or_default(),
        adapt,
        gauss_queries,
        iteration,
    };

    let mut adam = Adam::new(&engine.store);
    let mut or = Reader::new(find(b"OPTS")?, format!("{pname}:OPTS"));
    adam.decode(&engine.store, &mut or)?;
    engine.iteration = iteration;
    Ok((engine, adam))
}
