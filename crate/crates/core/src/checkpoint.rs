//! Checkpoint container: a directory with `manifest.json` and `weights.bin`.
//!
//! `weights.bin` holds little-endian row-major arrays, each starting at a
//! 64-byte aligned offset; the gaps are zero bytes. The manifest lists every
//! tensor with its shape, dtype, offset and byte length.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Float, Tensor};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSlot};
use crate::model::{BlockHsm, BlockLora, DecoderWeights, HsmSlot, Linear, ModelConfig, ModelState, PrunedModel};
use crate::sparsify::{BinaryMask, HybridSparsifier, UnifiedMask};

pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub length: usize,
}

/// Run metadata stored next to the tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Completed training steps (the mask schedule position).
    #[serde(default)]
    pub step: usize,
    /// Planned length of the run, when known.
    #[serde(default)]
    pub total_steps: Option<usize>,
    #[serde(default)]
    pub s0: Option<usize>,
    #[serde(default)]
    pub eps_temp: Option<f64>,
    #[serde(default)]
    pub n_target: Option<usize>,
    #[serde(default)]
    pub lora_alpha: Option<f64>,
    /// Snapped mask of a merged model, or the kept channels of a pruned one.
    #[serde(default)]
    pub kept: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub pruned: bool,
    pub dtype: DType,
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes a container. Entries keep the order of `tensors`.
pub fn write_container<T: Float>(
    dir: &Path,
    pruned: bool,
    model: &ModelConfig,
    meta: &CheckpointMeta,
    tensors: &[(String, &Tensor<T>)],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        blob.resize(blob.len().next_multiple_of(ALIGN), 0);
        let offset = blob.len();
        for &x in t.data() {
            x.write_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        pruned,
        dtype: T::DTYPE,
        model: model.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, &blob).map_err(|e| Error::io(&weights, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Checks offsets, lengths and alignment against a blob of `len` bytes.
pub fn validate_entries(entries: &[TensorEntry], len: usize) -> Result<()> {
    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if e.shape.is_empty() || numel == 0 {
            return Err(ckpt_err(format!("{}: empty shape {:?}", e.name, e.shape)));
        }
        if e.length != numel * e.dtype.size() {
            return Err(ckpt_err(format!(
                "{}: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        if e.offset % ALIGN != 0 {
            return Err(ckpt_err(format!("{}: offset {} is not {ALIGN}-byte aligned", e.name, e.offset)));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= len)
            .ok_or_else(|| ckpt_err(format!("{}: extends past the end of {WEIGHTS_FILE}", e.name)))?;
        spans.push((e.offset, end, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ckpt_err(format!("{} overlaps {}", w[0].2, w[1].2)));
        }
    }
    Ok(())
}

fn decode<T: Float>(e: &TensorEntry, bytes: &[u8]) -> Result<Tensor<T>> {
    let raw = &bytes[e.offset..e.offset + e.length];
    let data: Vec<T> = match e.dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64c(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64c(f64::read_le(c))).collect(),
    };
    Ok(Tensor::new(e.shape.clone(), data)?)
}

/// Reads and validates a container; tensors are converted to `T`.
pub fn read_container<T: Float>(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    validate_entries(&manifest.tensors, bytes.len())?;
    let tensors = manifest
        .tensors
        .iter()
        .map(|e| Ok((e.name.clone(), decode(e, &bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, tensors))
}

/// Named tensors, taken out one by one with shape checks.
struct Store<T> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Float> Store<T> {
    fn new(tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut map = HashMap::with_capacity(tensors.len());
        for (n, t) in tensors {
            if map.insert(n.clone(), t).is_some() {
                return Err(ckpt_err(format!("duplicate tensor {n}")));
            }
        }
        Ok(Store { map })
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .map
            .remove(name)
            .ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(ckpt_err(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    fn take_any(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().min() {
            Some(extra) => Err(ckpt_err(format!("unexpected tensor {extra}"))),
            None => Ok(()),
        }
    }
}

/// Every tensor of a trainable model, in a fixed order.
pub fn model_tensors<T: Float>(model: &ModelState<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = model.weights.named();
    out.push(("mask.w_m".to_string(), &model.mask.w_m));
    for (i, b) in model.hsm.iter().enumerate() {
        for (slot, tag) in [(&b.attn, "hsm_attn"), (&b.ffn, "hsm_ffn")] {
            if let HsmSlot::Active(h) = slot {
                out.push((format!("blocks.{i}.{tag}.l0"), &h.l0));
                out.push((format!("blocks.{i}.{tag}.v"), &h.v));
                out.push((format!("blocks.{i}.{tag}.l1"), &h.l1));
            }
        }
    }
    for (i, slots) in model.lora.iter().enumerate() {
        for l in Linear::ALL {
            if let Some(ad) = slots[l as usize].adapter() {
                out.push((format!("blocks.{i}.lora.{}.a", l.name()), &ad.a));
                out.push((format!("blocks.{i}.lora.{}.b", l.name()), &ad.b));
            }
        }
    }
    if let Some(ad) = model.head_lora.adapter() {
        out.push(("lora.lm_head.a".to_string(), &ad.a));
        out.push(("lora.lm_head.b".to_string(), &ad.b));
    }
    out
}

/// Saves a trainable (or merged) model. `total_steps` is informational.
pub fn save_model<T: Float>(dir: &Path, model: &ModelState<T>, total_steps: Option<usize>) -> Result<Manifest> {
    let alpha = model
        .lora
        .iter()
        .flatten()
        .chain([&model.head_lora])
        .find_map(|s| s.adapter().map(|a| a.alpha));
    let meta = CheckpointMeta {
        step: model.mask.step,
        total_steps,
        s0: Some(model.mask.s0),
        eps_temp: Some(model.mask.eps_temp),
        n_target: Some(model.mask.n_target),
        lora_alpha: alpha,
        kept: model.snapped.as_ref().map(|m| m.kept().to_vec()),
    };
    write_container(dir, false, &model.config, &meta, &model_tensors(model))
}

fn required<V>(v: Option<V>, field: &str) -> Result<V> {
    v.ok_or_else(|| ckpt_err(format!("meta.{field} missing")))
}

/// Loads a model saved by [`save_model`]. Adapters and sparsifiers are
/// active exactly when their tensors are present.
pub fn load_model<T: Float>(dir: &Path) -> Result<(ModelState<T>, Manifest)> {
    let (manifest, tensors) = read_container::<T>(dir)?;
    if manifest.pruned {
        return Err(ckpt_err(format!("{} holds a pruned model", dir.display())));
    }
    let config = manifest.model.clone();
    config.validate()?;
    let meta = &manifest.meta;
    let d = config.d_model;
    let mut store = Store::new(tensors)?;
    let weights = DecoderWeights::from_named(&config, d, d, &mut |n, s| store.take(n, s))?;
    let w_m = store.take("mask.w_m", &[d])?;
    let mut mask = UnifiedMask::with_weights(
        w_m,
        required(meta.s0, "s0")?,
        required(meta.eps_temp, "eps_temp")?,
        required(meta.n_target, "n_target")?,
    )?;
    mask.step = meta.step;

    let mut hsm = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut slot = |tag: &str| -> Result<HsmSlot<T>> {
            let p = format!("blocks.{i}.{tag}");
            match store.take_any(&format!("{p}.v")) {
                None => Ok(HsmSlot::Merged),
                Some(v) => {
                    let r = v.numel();
                    let l0 = store.take(&format!("{p}.l0"), &[r, d])?;
                    let l1 = store.take(&format!("{p}.l1"), &[d, r])?;
                    Ok(HsmSlot::Active(HybridSparsifier::from_factors(l0, v, l1)?))
                }
            }
        };
        hsm.push(BlockHsm {
            attn: slot("hsm_attn")?,
            ffn: slot("hsm_ffn")?,
        });
    }

    let mut adapter = |prefix: &str, d_out: usize, d_in: usize| -> Result<LoraSlot<T>> {
        match store.take_any(&format!("{prefix}.a")) {
            None => Ok(LoraSlot::Merged),
            Some(a) => {
                if a.rank() != 2 || a.shape()[1] != d_in {
                    return Err(ckpt_err(format!("{prefix}.a: bad shape {:?}", a.shape())));
                }
                let b = store.take(&format!("{prefix}.b"), &[d_out, a.shape()[0]])?;
                let alpha = required(meta.lora_alpha, "lora_alpha")?;
                Ok(LoraSlot::Active(LoraAdapter::from_factors(a, b, alpha)?))
            }
        }
    };
    let mut lora: Vec<BlockLora<T>> = Vec::with_capacity(config.n_layers);
    for (i, blk) in weights.blocks.iter().enumerate() {
        let mut slots = Vec::with_capacity(7);
        for l in Linear::ALL {
            let s = blk.linear(l).shape();
            slots.push(adapter(&format!("blocks.{i}.lora.{}", l.name()), s[0], s[1])?);
        }
        lora.push(slots.try_into().unwrap_or_else(|_| unreachable!()));
    }
    let head_lora = adapter("lora.lm_head", config.vocab_size, d)?;
    store.finish()?;
    let snapped = meta.kept.clone().map(|k| BinaryMask::new(k, d)).transpose()?;
    let model = ModelState {
        config,
        weights,
        lora,
        head_lora,
        hsm,
        mask,
        snapped,
    };
    Ok((model, manifest))
}

pub fn save_pruned<T: Float>(dir: &Path, model: &PrunedModel<T>) -> Result<Manifest> {
    let meta = CheckpointMeta {
        kept: Some(model.kept.kept().to_vec()),
        ..Default::default()
    };
    write_container(dir, true, &model.source, &meta, &model.weights.named())
}

pub fn load_pruned<T: Float>(dir: &Path) -> Result<(PrunedModel<T>, Manifest)> {
    let (manifest, tensors) = read_container::<T>(dir)?;
    if !manifest.pruned {
        return Err(ckpt_err(format!("{} does not hold a pruned model", dir.display())));
    }
    let source = manifest.model.clone();
    source.validate()?;
    let kept = BinaryMask::new(required(manifest.meta.kept.clone(), "kept")?, source.d_model)?;
    let mut store = Store::new(tensors)?;
    let weights = DecoderWeights::from_named(&source, kept.d_kept(), source.d_model, &mut |n, s| store.take(n, s))?;
    store.finish()?;
    Ok((PrunedModel { source, kept, weights }, manifest))
}
