//! Zero-preservation properties: RMSNorm keeps exactly-zero channels at
//! zero, and a masked forward keeps masked channels at zero everywhere on
//! the residual stream.

use super::{perturbed_model, tiny_config};
use pat_core::model::{ForwardMode, ForwardTrace, ModelState, ParamGroups, PatOptions, TokenBatch};
use pat_core::pruner::merge_all;
use pat_core::sparsify::BinaryMask;
use pat_core::{Float, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type NormInput = (Vec<f32>, Vec<bool>, Vec<f32>, usize);

pub fn norm_inputs() -> impl Strategy<Value = NormInput> {
    (
        prop::collection::vec(-100.0f32..100.0, 1..24),
        prop::collection::vec(any::<bool>(), 24),
        prop::collection::vec(-3.0f32..3.0, 24),
        1usize..4,
    )
}

pub fn rmsnorm_case((x, zero, g, rows): NormInput) -> Result<(), TestCaseError> {
    let d = x.len();
    let data: Vec<f32> = (0..rows * d)
        .map(|i| if zero[i % d] { 0.0 } else { x[i % d] * (1 + i / d) as f32 })
        .collect();
    let mut tape = Tape::<f32>::inference();
    let xv = tape.constant(Tensor::new(vec![rows, d], data).unwrap());
    let gv = tape.constant(Tensor::vector(g[..d].to_vec()));
    let y = tape.rmsnorm(xv, gv, 1e-6).unwrap();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        if zero[i % d] {
            prop_assert!(*v == 0.0, "{}", v);
        }
    }
    Ok(())
}

/// Every residual and normed activation of a masked forward, as rows of `d`.
pub fn traced<T: Float>(m: &ModelState<T>, batch: &TokenBatch) -> Vec<Vec<T>> {
    let mut tape = Tape::inference();
    let bound = m.bind(&mut tape, ParamGroups::NONE);
    let mut trace = ForwardTrace::default();
    m.forward_bound(&mut tape, &bound, batch, ForwardMode::Masked, Some(&mut trace))
        .unwrap();
    assert_eq!(trace.residual.len(), 1 + 2 * m.config.n_layers);
    assert_eq!(trace.normed.len(), 1 + 2 * m.config.n_layers);
    trace
        .residual
        .iter()
        .chain(&trace.normed)
        .flat_map(|&v| tape.value(v).data().chunks(m.config.d_model).map(<[T]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn keep_strategy(d: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), d).prop_filter("keep at least one", |k| k.iter().any(|&b| b))
}

fn check_zero(m: &ModelState<f32>, keep: &[bool], seed: u64) -> Result<(), TestCaseError> {
    let batch = TokenBatch::new((0..10).map(|i| (i * 7 + seed as usize) % 11).collect(), 2, 5).unwrap();
    for row in traced(m, &batch) {
        for (c, v) in row.iter().enumerate() {
            if !keep[c] {
                prop_assert!(*v == 0.0, "channel {} holds {}", c, v);
            }
        }
    }
    Ok(())
}

pub type SnapInput = (Vec<bool>, u64, bool);

pub fn snap_inputs() -> impl Strategy<Value = SnapInput> {
    (keep_strategy(8), 0u64..1_000_000, any::<bool>())
}

/// A snapped binary mask, either applied in masked mode or merged into the
/// upstream weights.
pub fn snapped_case((keep, seed, merge): SnapInput) -> Result<(), TestCaseError> {
    let mut m = perturbed_model::<f32>(&tiny_config(8, 11, 5), &PatOptions::defaults(8, 10), seed);
    let kept: Vec<usize> = (0..8).filter(|&i| keep[i]).collect();
    let mask = BinaryMask::new(kept, 8).unwrap();
    if merge {
        merge_all(&mut m, &mask).unwrap();
    } else {
        m.snapped = Some(mask);
    }
    check_zero(&m, &keep, seed)
}

pub type SaturatedInput = (Vec<bool>, u64, f32);

pub fn saturated_inputs() -> impl Strategy<Value = SaturatedInput> {
    (keep_strategy(8), 0u64..1_000_000, 0.11f32..2.0)
}

/// The trained gate past `s0`, where it is `sigmoid(1000·W)`: for
/// `W <= -0.11` that underflows to exactly 0 in f32.
pub fn saturated_case((keep, seed, mag): SaturatedInput) -> Result<(), TestCaseError> {
    let mut m = perturbed_model::<f32>(&tiny_config(8, 11, 5), &PatOptions::defaults(8, 10), seed);
    m.mask.step = 10;
    for (i, w) in m.mask.w_m.data_mut().iter_mut().enumerate() {
        *w = if keep[i] { mag } else { -mag };
    }
    check_zero(&m, &keep, seed)
}
