//! Merge-and-slice: fold adapters and sparsifiers into the base weights, then
//! physically drop the masked hidden channels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm_into, Float, Tensor};
use crate::error::{Error, Result, TensorError};
use crate::lora::merge_lora;
use crate::model::{BlockWeights, DecoderWeights, HsmSlot, Linear, ModelState, PrunedModel};
use crate::sparsify::{BinaryMask, HybridSparsifier};

/// `M_snap ⊙ ((L1·diag(v)·L0 + I)·W)` for an upstream weight `W: [d × k]`.
///
/// Computed as `W + L1·(v ⊙ (L0·W))`, so `D` is never formed.
pub fn merge_hsm<T: Float>(
    w: &Tensor<T>,
    hsm: &HybridSparsifier<T>,
    mask: &BinaryMask,
) -> Result<Tensor<T>> {
    let (d, r) = (hsm.width(), hsm.rank());
    if w.rank() != 2 || w.shape()[0] != d || mask.d() != d {
        return Err(TensorError::dim("merge_hsm", w.shape(), hsm.l1.shape()).into());
    }
    let k = w.shape()[1];
    let mut low = vec![T::zero(); r * k];
    gemm_into(hsm.l0.data(), false, w.data(), false, r, d, k, &mut low, false);
    for (p, row) in low.chunks_mut(k).enumerate() {
        let s = hsm.v.data()[p];
        row.iter_mut().for_each(|x| *x *= s);
    }
    let mut out = w.data().to_vec();
    gemm_into(hsm.l1.data(), false, &low, false, d, r, k, &mut out, true);
    let keep = mask.to_vector::<T>();
    for (i, row) in out.chunks_mut(k).enumerate() {
        if keep[i] == T::zero() {
            row.iter_mut().for_each(|x| *x = T::zero());
        }
    }
    Ok(Tensor::new(vec![d, k], out)?)
}

/// `gain[kept] · sqrt(d / d_kept)`: keeps sliced RMSNorm equal to the full
/// RMSNorm restricted to kept channels, since the mean runs over `d_kept`.
pub fn rescale_norm_gain<T: Float>(gain: &Tensor<T>, mask: &BinaryMask) -> Result<Tensor<T>> {
    if gain.shape() != [mask.d()] {
        return Err(TensorError::dim("rescale_norm_gain", gain.shape(), &[mask.d()]).into());
    }
    let factor = T::from_f64c((mask.d() as f64 / mask.d_kept() as f64).sqrt());
    Ok(Tensor::vector(
        mask.kept().iter().map(|&i| gain.data()[i] * factor).collect(),
    ))
}

/// Merges every LoRA adapter (if still active) and every sparsifier into the
/// base weights, and switches the model's masked mode to the snapped mask.
pub fn merge_all<T: Float>(model: &mut ModelState<T>, mask: &BinaryMask) -> Result<()> {
    if mask.d() != model.d_model() {
        return Err(Error::config(format!(
            "mask width {} does not match d_model {}",
            mask.d(),
            model.d_model()
        )));
    }
    if model.is_hsm_merged() {
        return Err(Error::Lifecycle("sparsifiers already merged".into()));
    }
    merge_all_lora(model)?;
    for (blk, hsm) in model.weights.blocks.iter_mut().zip(model.hsm.iter_mut()) {
        for (slot, which) in [(&mut hsm.attn, Linear::O), (&mut hsm.ffn, Linear::Down)] {
            let HsmSlot::Active(h) = slot else {
                return Err(Error::Lifecycle("sparsifier already merged".into()));
            };
            let merged = merge_hsm(blk.linear(which), h, mask)?;
            *blk.linear_mut(which) = merged;
            *slot = HsmSlot::Merged;
        }
    }
    model.snapped = Some(mask.clone());
    Ok(())
}

/// Merges the adapters that are still active.
pub fn merge_all_lora<T: Float>(model: &mut ModelState<T>) -> Result<()> {
    for (blk, slots) in model.weights.blocks.iter_mut().zip(model.lora.iter_mut()) {
        for l in Linear::ALL {
            let slot = &mut slots[l as usize];
            if slot.adapter().is_some() {
                merge_lora(blk.linear_mut(l), slot)?;
            }
        }
    }
    if model.head_lora.adapter().is_some() {
        merge_lora(&mut model.weights.lm_head, &mut model.head_lora)?;
    }
    Ok(())
}

/// Whether norm gains get the `sqrt(d/d_kept)` correction. Skipping it
/// exists only as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainRescale {
    Apply,
    Skip,
}

fn select_cols<T: Float>(t: &Tensor<T>, kept: &[usize]) -> Tensor<T> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(rows * kept.len());
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        out.extend(kept.iter().map(|&j| row[j]));
    }
    Tensor::from_parts(vec![rows, kept.len()], out)
}

fn select_rows<T: Float>(t: &Tensor<T>, kept: &[usize]) -> Tensor<T> {
    let cols = t.shape()[1];
    let mut out = Vec::with_capacity(kept.len() * cols);
    for &r in kept {
        out.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_parts(vec![kept.len(), cols], out)
}

/// Slices the hidden dimension of plain decoder weights. Attention width,
/// head count and `d_ff` are unchanged.
pub fn slice_weights<T: Float>(
    w: &DecoderWeights<T>,
    mask: &BinaryMask,
    rescale: GainRescale,
) -> Result<DecoderWeights<T>> {
    if w.hidden() != mask.d() {
        return Err(Error::config(format!(
            "mask width {} does not match hidden width {}",
            mask.d(),
            w.hidden()
        )));
    }
    let kept = mask.kept();
    let norm = |g: &Tensor<T>| -> Result<Tensor<T>> {
        match rescale {
            GainRescale::Apply => rescale_norm_gain(g, mask),
            GainRescale::Skip => Ok(Tensor::vector(kept.iter().map(|&i| g.data()[i]).collect())),
        }
    };
    let blocks = w
        .blocks
        .iter()
        .map(|b| {
            Ok(BlockWeights {
                attn_norm: norm(&b.attn_norm)?,
                wq: select_cols(&b.wq, kept),
                wk: select_cols(&b.wk, kept),
                wv: select_cols(&b.wv, kept),
                wo: select_rows(&b.wo, kept),
                ffn_norm: norm(&b.ffn_norm)?,
                w_up: select_cols(&b.w_up, kept),
                w_gate: select_cols(&b.w_gate, kept),
                w_down: select_rows(&b.w_down, kept),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderWeights {
        tok_emb: select_cols(&w.tok_emb, kept),
        pos_emb: select_cols(&w.pos_emb, kept),
        blocks,
        final_norm: norm(&w.final_norm)?,
        lm_head: select_cols(&w.lm_head, kept),
    })
}

/// Parameter count of one named tensor before and after slicing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    pub before: usize,
    pub after: usize,
}

/// Outcome of merge-and-slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub d: usize,
    pub d_kept: usize,
    pub ratio: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub snap_disagreements: usize,
    /// Max |pruned − snapped-masked| logit difference, once verified.
    pub max_residual: Option<f64>,
    #[serde(skip)]
    pub layers: Vec<LayerParams>,
}

/// Slices a fully merged model into a standalone dense decoder.
pub fn slice_model<T: Float>(
    model: &ModelState<T>,
    mask: &BinaryMask,
) -> Result<(PrunedModel<T>, PruneReport)> {
    slice_model_with(model, mask, GainRescale::Apply)
}

pub fn slice_model_with<T: Float>(
    model: &ModelState<T>,
    mask: &BinaryMask,
    rescale: GainRescale,
) -> Result<(PrunedModel<T>, PruneReport)> {
    if !model.is_lora_merged() {
        return Err(Error::Lifecycle("LoRA adapters must be merged before slicing".into()));
    }
    if !model.is_hsm_merged() {
        return Err(Error::Lifecycle("sparsifiers must be merged before slicing".into()));
    }
    let weights = slice_weights(&model.weights, mask, rescale)?;
    let layers: Vec<LayerParams> = model
        .weights
        .named()
        .into_iter()
        .zip(weights.named())
        .map(|((name, a), (_, b))| LayerParams {
            name,
            before: a.numel(),
            after: b.numel(),
        })
        .collect();
    let params_before = model.weights.param_count();
    let params_after = weights.param_count();
    let report = PruneReport {
        d: mask.d(),
        d_kept: mask.d_kept(),
        ratio: 1.0 - params_after as f64 / params_before as f64,
        params_before,
        params_after,
        snap_disagreements: 0,
        max_residual: None,
        layers,
    };
    let pruned = PrunedModel {
        source: model.config.clone(),
        kept: mask.clone(),
        weights,
    };
    Ok((pruned, report))
}
