//! Evaluation and micro-benchmarks: perplexity, synthetic-task accuracy, the
//! masked-vs-pruned equivalence check, and forward-pass timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Float, Tape, Tensor, IGNORE_INDEX};
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{dense_forward, DecoderWeights, ForwardMode, ModelState, PrunedModel, TokenBatch};

/// Maximum logit residual accepted by [`verify_equivalence`] in 32-bit runs.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-4;
pub const MIN_BENCH_REPS: usize = 5;
pub const MIN_BENCH_WARMUP: usize = 2;

/// Anything that maps token ids to next-token logits.
pub trait LanguageModel<T: Float> {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// Logits `[batch·seq × vocab]`.
    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>>;
    /// Bytes of parameters plus every value recorded during one forward.
    fn forward_bytes(&self, batch: &TokenBatch) -> Result<usize>;
    fn param_count(&self) -> usize;
}

impl<T: Float, M: LanguageModel<T> + ?Sized> LanguageModel<T> for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn max_seq_len(&self) -> usize {
        (**self).max_seq_len()
    }

    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        (**self).logits(batch)
    }

    fn forward_bytes(&self, batch: &TokenBatch) -> Result<usize> {
        (**self).forward_bytes(batch)
    }

    fn param_count(&self) -> usize {
        (**self).param_count()
    }
}

/// A trainable model evaluated in one [`ForwardMode`].
pub struct ModeView<'a, T> {
    pub model: &'a ModelState<T>,
    pub mode: ForwardMode,
}

impl<'a, T: Float> ModeView<'a, T> {
    pub fn masked(model: &'a ModelState<T>) -> Self {
        ModeView {
            model,
            mode: ForwardMode::Masked,
        }
    }

    pub fn plain(model: &'a ModelState<T>) -> Self {
        ModeView {
            model,
            mode: ForwardMode::Plain,
        }
    }
}

impl<T: Float> LanguageModel<T> for ModeView<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.model.config.max_seq_len
    }

    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let out = self.model.forward(batch, self.mode)?;
        Ok(out.reshaped(&[batch.len(), self.vocab_size()])?)
    }

    fn forward_bytes(&self, batch: &TokenBatch) -> Result<usize> {
        let mut tape = Tape::inference();
        let bound = self.model.bind(&mut tape, crate::model::ParamGroups::NONE);
        self.model.forward_bound(&mut tape, &bound, batch, self.mode, None)?;
        Ok(tape.allocated_bytes())
    }

    fn param_count(&self) -> usize {
        self.model.base_param_count() + self.model.trainable_param_count()
    }
}

impl<T: Float> LanguageModel<T> for PrunedModel<T> {
    fn vocab_size(&self) -> usize {
        self.source.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.source.max_seq_len
    }

    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let y = self.forward_on(&mut tape, batch)?;
        Ok(tape.value(y).clone())
    }

    fn forward_bytes(&self, batch: &TokenBatch) -> Result<usize> {
        let mut tape = Tape::inference();
        self.forward_on(&mut tape, batch)?;
        Ok(tape.allocated_bytes())
    }

    fn param_count(&self) -> usize {
        self.weights.param_count()
    }
}

/// Plain dense weights with the attention settings needed to run them.
pub struct DenseView<'a, T> {
    pub weights: &'a DecoderWeights<T>,
    pub n_heads: usize,
    pub rms_eps: f64,
}

impl<T: Float> LanguageModel<T> for DenseView<'_, T> {
    fn vocab_size(&self) -> usize {
        self.weights.vocab_size()
    }

    fn max_seq_len(&self) -> usize {
        self.weights.max_seq_len()
    }

    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        dense_forward(self.weights, self.n_heads, self.rms_eps, batch)
    }

    fn forward_bytes(&self, batch: &TokenBatch) -> Result<usize> {
        // dense_forward drops its tape; count the logits and parameters only
        let logits = self.logits(batch)?;
        Ok(self.weights.bytes() + logits.bytes())
    }

    fn param_count(&self) -> usize {
        self.weights.param_count()
    }
}

fn eval_batches<T: Float>(
    model: &dyn LanguageModel<T>,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    batch_size: usize,
    mut visit: impl FnMut(&[T], usize),
) -> Result<()> {
    if seq_len > model.max_seq_len() {
        return Err(Error::config(format!(
            "seq_len {seq_len} exceeds max_seq_len {}",
            model.max_seq_len()
        )));
    }
    let windows = corpus.windows(split, seq_len);
    if windows.is_empty() {
        return Err(Error::Input(format!("no evaluation window of {} tokens", seq_len + 1)));
    }
    let v = model.vocab_size();
    for starts in windows.chunks(batch_size.max(1)) {
        let batch = corpus.batch(starts, seq_len)?;
        let logits = model.logits(&batch.input)?;
        for (row, &t) in logits.data().chunks(v).zip(&batch.targets) {
            if t != IGNORE_INDEX {
                visit(row, t);
            }
        }
    }
    Ok(())
}

/// `exp` of the mean next-token cross-entropy over the scored targets of
/// every window in `split`.
pub fn perplexity<T: Float>(
    model: &dyn LanguageModel<T>,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    batch_size: usize,
) -> Result<f64> {
    let (mut nll, mut n) = (0.0f64, 0usize);
    eval_batches(model, corpus, split, seq_len, batch_size, |row, t| {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64c()));
        let z: f64 = row.iter().map(|x| (x.to_f64c() - max).exp()).sum();
        nll += max + z.ln() - row[t].to_f64c();
        n += 1;
    })?;
    if n == 0 {
        return Err(Error::Input("corpus has no scored targets".into()));
    }
    Ok((nll / n as f64).exp())
}

/// Fraction of scored targets predicted exactly by the arg-max logit. For
/// `mod_add` the scored targets are exactly the answers.
pub fn accuracy<T: Float>(
    model: &dyn LanguageModel<T>,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    batch_size: usize,
) -> Result<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    eval_batches(model, corpus, split, seq_len, batch_size, |row, t| {
        let best = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |b, (j, &x)| if x > b.1 { (j, x) } else { b })
            .0;
        hits += usize::from(best == t);
        n += 1;
    })?;
    if n == 0 {
        return Err(Error::Input("corpus has no scored targets".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Max L∞ logit difference between two models over `n_inputs` uniformly
/// random sequences of `seq_len` tokens.
pub fn verify_equivalence<T: Float>(
    a: &dyn LanguageModel<T>,
    b: &dyn LanguageModel<T>,
    n_inputs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<f64> {
    if a.vocab_size() != b.vocab_size() {
        return Err(Error::config(format!(
            "vocabulary mismatch: {} vs {}",
            a.vocab_size(),
            b.vocab_size()
        )));
    }
    if seq_len == 0 || seq_len > a.max_seq_len().min(b.max_seq_len()) {
        return Err(Error::config(format!(
            "seq_len {seq_len} outside 1..={}",
            a.max_seq_len().min(b.max_seq_len())
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = a.vocab_size();
    let mut worst = 0.0f64;
    for _ in 0..n_inputs {
        let tokens = (0..seq_len).map(|_| rng.random_range(0..v)).collect();
        let batch = TokenBatch::new(tokens, 1, seq_len)?;
        let (la, lb) = (a.logits(&batch)?, b.logits(&batch)?);
        for (x, y) in la.data().iter().zip(lb.data()) {
            worst = worst.max((x.to_f64c() - y.to_f64c()).abs());
        }
    }
    Ok(worst)
}

/// Timing of one forward configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub model_id: String,
    pub d: usize,
    pub d_kept: usize,
    pub batch: usize,
    pub seq: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub params: usize,
    pub alloc_bytes: usize,
    #[serde(skip)]
    pub median_ms: f64,
    #[serde(skip)]
    pub reps: usize,
}

/// Identifies a benchmarked model in the CSV.
#[derive(Debug, Clone)]
pub struct BenchTarget {
    pub model_id: String,
    pub d: usize,
    pub d_kept: usize,
}

/// Times `reps` forwards after `warmup` untimed ones, for each batch size.
pub fn bench_forward<T: Float>(
    model: &dyn LanguageModel<T>,
    target: &BenchTarget,
    batch_sizes: &[usize],
    seq: usize,
    reps: usize,
    warmup: usize,
) -> Result<Vec<BenchResult>> {
    if reps < MIN_BENCH_REPS {
        return Err(Error::config(format!("bench needs at least {MIN_BENCH_REPS} repetitions")));
    }
    let warmup = warmup.max(MIN_BENCH_WARMUP);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let tokens = (0..b * seq).map(|_| rng.random_range(0..model.vocab_size())).collect();
        let batch = TokenBatch::new(tokens, b, seq)?;
        for _ in 0..warmup {
            model.logits(&batch)?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(model.logits(&batch)?);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / reps as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        times.sort_by(f64::total_cmp);
        let median = if reps % 2 == 1 {
            times[reps / 2]
        } else {
            0.5 * (times[reps / 2 - 1] + times[reps / 2])
        };
        out.push(BenchResult {
            model_id: target.model_id.clone(),
            d: target.d,
            d_kept: target.d_kept,
            batch: b,
            seq,
            mean_ms: mean,
            std_ms: var.sqrt(),
            params: model.param_count(),
            alloc_bytes: model.forward_bytes(&batch)?,
            median_ms: median,
            reps,
        });
    }
    Ok(out)
}

/// `t_base / t_pruned` on medians.
pub fn speedup(base: &BenchResult, pruned: &BenchResult) -> f64 {
    base.median_ms / pruned.median_ms
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Task;
    use crate::model::{ModelConfig, PatOptions};

    /// Constant-logit model over `v` tokens.
    struct Uniform(usize);

    impl LanguageModel<f64> for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn max_seq_len(&self) -> usize {
            64
        }
        fn logits(&self, batch: &TokenBatch) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(&[batch.len(), self.0]))
        }
        fn forward_bytes(&self, _: &TokenBatch) -> Result<usize> {
            Ok(0)
        }
        fn param_count(&self) -> usize {
            0
        }
    }

    /// Predicts `(t + 1) mod v` with near-certainty.
    struct Cycle(usize);

    impl LanguageModel<f64> for Cycle {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn max_seq_len(&self) -> usize {
            64
        }
        fn logits(&self, batch: &TokenBatch) -> Result<Tensor<f64>> {
            let mut out = vec![0.0; batch.len() * self.0];
            for (i, &t) in batch.tokens.iter().enumerate() {
                out[i * self.0 + (t + 1) % self.0] = 50.0;
            }
            Ok(Tensor::new(vec![batch.len(), self.0], out)?)
        }
        fn forward_bytes(&self, _: &TokenBatch) -> Result<usize> {
            Ok(0)
        }
        fn param_count(&self) -> usize {
            0
        }
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let corpus = Corpus::new((0..500).map(|i| (i * 7) % 13).collect(), 13, Task::Text).unwrap();
        let p = perplexity(&Uniform(13), &corpus, Split::HeldOut, 8, 4).unwrap();
        assert!((p - 13.0).abs() < 1e-9);
    }

    #[test]
    fn memorised_cycle_has_perplexity_one() {
        let corpus = Corpus::new((0..500).map(|i| i % 5).collect(), 5, Task::Text).unwrap();
        let p = perplexity(&Cycle(5), &corpus, Split::HeldOut, 8, 4).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        assert_eq!(accuracy(&Cycle(5), &corpus, Split::Train, 8, 4).unwrap(), 1.0);
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        let corpus = Corpus::new(vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0], 5, Task::Text).unwrap();
        assert!(matches!(
            perplexity(&Uniform(5), &corpus, Split::HeldOut, 8, 4),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn random_init_is_near_uniform() {
        let cfg = ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 64,
            max_seq_len: 32,
            seed: 0,
            rms_eps: 1e-6,
        };
        let m = ModelState::<f32>::init(&cfg, &PatOptions::defaults(32, 10), 0).unwrap();
        let corpus = Corpus::new((0..3000).map(|i| (i * 31 + i / 7) % 64).collect(), 64, Task::Text).unwrap();
        let p = perplexity(&ModeView::plain(&m), &corpus, Split::HeldOut, 31, 8).unwrap();
        assert!((55.0..=75.0).contains(&p), "{p}");
    }

    #[test]
    fn verifier_checks_vocab_and_is_deterministic() {
        assert!(matches!(
            verify_equivalence(&Uniform(5), &Uniform(6), 2, 4, 0),
            Err(Error::Config(_))
        ));
        assert_eq!(verify_equivalence(&Uniform(5), &Uniform(5), 4, 8, 1).unwrap(), 0.0);
        let a = verify_equivalence(&Uniform(5), &Cycle(5), 4, 8, 3).unwrap();
        assert_eq!(a, verify_equivalence(&Uniform(5), &Cycle(5), 4, 8, 3).unwrap());
        assert_eq!(a, 50.0);
    }

    #[test]
    fn bench_requires_enough_reps() {
        let t = BenchTarget {
            model_id: "u".into(),
            d: 1,
            d_kept: 1,
        };
        assert!(bench_forward(&Uniform(5), &t, &[1], 4, 4, 2).is_err());
        let r = bench_forward(&Uniform(5), &t, &[1, 2], 4, 5, 2).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].batch, 2);
        assert!(r[0].std_ms >= 0.0 && r[0].median_ms >= 0.0);
    }
}
