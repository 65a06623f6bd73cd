#![allow(dead_code)]

use pat_core::model::{ModelConfig, ModelState, PatOptions};
use pat_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub mod grad_suite;
pub mod zero_props;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst element-wise relative error `|a − n| / max(1e-8, |a|, |n|)` between
/// analytic and central-difference gradients, over all inputs.
///
/// `f` records a scalar on the tape from leaves holding `inputs`.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).numel(), 1, "gradcheck needs a scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs);
        t.value(o).data()[0]
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut num = vec![0.0; a.numel()];
        for (i, n) in num.iter_mut().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(a.data(), &num));
    }
    worst
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let r = uniform(&mut rng(seed), &shape, -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(out, r).unwrap();
    tape.sum(p)
}

pub fn tiny_config(d: usize, vocab: usize, seq: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_seq_len: seq,
        seed: 0,
        rms_eps: 1e-6,
    }
}

/// A model with every trainable part moved away from its init, so adapters,
/// sparsifiers and the mask all affect the output.
pub fn perturbed_model<T: pat_core::Float>(cfg: &ModelConfig, opts: &PatOptions, seed: u64) -> ModelState<T> {
    let mut m = ModelState::<T>::init(cfg, opts, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (_, t) in m.trainable_mut(pat_core::model::ParamGroups::ALL) {
        for x in t.data_mut() {
            *x += T::from_f64c(r.random_range(-0.3..0.3));
        }
    }
    m
}

/// Closed-form parameter count of a decoder whose hidden width is `w`:
/// token and position embeddings, four attention matrices, three FFN
/// matrices, two norms per layer, the final norm and the head. The attention
/// inner width stays at `d_model`.
pub fn closed_form_params(c: &ModelConfig, w: usize) -> usize {
    let attn = 4 * w * c.d_model;
    let ffn = 3 * w * c.d_ff;
    let norms = 2 * w;
    c.vocab_size * w + c.max_seq_len * w + c.n_layers * (attn + ffn + norms) + w + c.vocab_size * w
}
