//! Pruning-aware fine-tuning: composite loss, Adam with a cosine schedule,
//! and the step counter that drives the mask schedule.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::data::{Corpus, LmBatch};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ForwardMode, ModelState, ParamGroups};
use crate::sparsify::{active_loss, identity_loss};

/// Peak learning rate for fine-tuning billion-parameter models.
/// Desk-scale runs default to [`DEFAULT_LR_MAX`] instead.
pub const LARGE_MODEL_LR_MAX: f64 = 5e-5;
pub const DEFAULT_LR_MAX: f64 = 3e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// What a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Mask, sparsifiers and LoRA under the composite loss.
    #[default]
    Pat,
    /// LoRA only, plain forward, instruction loss only. The unpruned baseline.
    Lora,
    /// Dense base weights, plain forward, instruction loss only. Produces a
    /// pretrained toy base for the other two modes.
    Full,
}

fn default_batch_size() -> usize {
    16
}
fn default_seq_len() -> usize {
    64
}
fn default_lr_max() -> f64 {
    DEFAULT_LR_MAX
}
fn default_grad_clip() -> f64 {
    1.0
}

/// Training hyper-parameters. The published recipe used batch 128, sequence
/// length 256 and three epochs; the defaults here are sized for a CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    /// Step at which the temperature saturates; `floor(T/3)` when absent.
    #[serde(default)]
    pub s0: Option<usize>,
    /// Fraction ρ of hidden channels to remove. Set from the sparsify
    /// section of a run config, so it is not part of this section's JSON.
    #[serde(skip)]
    pub target_prune_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn new(total_steps: usize) -> Self {
        TrainConfig {
            total_steps,
            batch_size: default_batch_size(),
            seq_len: default_seq_len(),
            lr_max: DEFAULT_LR_MAX,
            s0: None,
            target_prune_ratio: 0.0,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: default_grad_clip(),
            mode: TrainMode::Pat,
        }
    }

    pub fn s0(&self) -> usize {
        self.s0.unwrap_or(self.total_steps / 3)
    }

    /// `round((1 − ρ)·d)`.
    pub fn n_target(&self, d: usize) -> usize {
        ((1.0 - self.target_prune_ratio) * d as f64).round() as usize
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("train.total_steps: must be at least 1"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("train.batch_size and train.seq_len must be at least 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config("train.lr_max: must be positive"));
        }
        if !(0.0..1.0).contains(&self.target_prune_ratio) {
            return Err(Error::config("sparsify.target_prune_ratio: must lie in [0, 1)"));
        }
        if self.mode == TrainMode::Pat && self.s0() < 2 {
            return Err(Error::config(format!(
                "train.s0: must be at least 2, got {} (total_steps {})",
                self.s0(),
                self.total_steps
            )));
        }
        if self.n_target(d) == 0 {
            return Err(Error::config("sparsify.target_prune_ratio: leaves no channel"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("train.grad_clip: must be non-negative"));
        }
        Ok(())
    }
}

/// `lr_max · ½(1 + cos(π t/T))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64) -> f64 {
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Adam without weight decay. Moments are kept per parameter slot in the
/// order the parameters are passed to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Float> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl<T: Float> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Input(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::from_f64c(ADAM_BETA1), T::from_f64c(ADAM_BETA2));
        let c1 = T::from_f64c(1.0 - ADAM_BETA1.powi(self.t));
        let c2 = T::from_f64c(1.0 - ADAM_BETA2.powi(self.t));
        let (lr, eps, one) = (T::from_f64c(lr), T::from_f64c(ADAM_EPS), T::one());
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.numel() {
                return Err(Error::Input(format!("parameter slot {i} changed shape")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.to_f64c().powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64c(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Scalar values of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub instruct: f64,
    pub active: f64,
    pub identity: f64,
}

impl LossValues {
    /// Name of the first non-finite term, checked in forward order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("loss_instruct", self.instruct),
            ("loss_active", self.active),
            ("loss_identity", self.identity),
            ("loss_total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `L_instruct + L_active + L_identity` on a masked-mode forward at the
/// model's current step.
pub fn composite_loss<T: Float>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    bound: &BoundModel<T>,
    batch: &LmBatch,
) -> Result<(Var, LossValues)> {
    if batch.input.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let logits = model.forward_bound(tape, bound, &batch.input, ForwardMode::Masked, None)?;
    let instruct = tape.cross_entropy(logits, &batch.targets)?;
    let tau = model.mask.schedule(model.mask.step).tau;
    let active = active_loss(tape, bound.w_m(), model.mask.n_target, tau)?;
    let identity = identity_loss(tape, &bound.hsm_vars())?;
    let reg = tape.add(active, identity)?;
    let total = tape.add(instruct, reg)?;
    let val = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].to_f64c();
    let values = LossValues {
        total: val(tape, total),
        instruct: val(tape, instruct),
        active: val(tape, active),
        identity: val(tape, identity),
    };
    Ok((total, values))
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_instruct: f64,
    pub loss_active: f64,
    pub loss_identity: f64,
    pub tau: f64,
    pub beta: f64,
    pub active_count: usize,
    pub wall_ms: f64,
}

impl StepMetrics {
    /// Equality on everything except wall time.
    pub fn same_numbers(&self, other: &StepMetrics) -> bool {
        let bits = |m: &StepMetrics| {
            [
                m.lr,
                m.loss_total,
                m.loss_instruct,
                m.loss_active,
                m.loss_identity,
                m.tau,
                m.beta,
            ]
            .map(f64::to_bits)
        };
        self.step == other.step && self.active_count == other.active_count && bits(self) == bits(other)
    }
}

/// Callbacks invoked by [`train`]. Both default to doing nothing.
pub trait TrainObserver<T: Float> {
    /// Called after every optimizer step with the updated model.
    fn on_step(&mut self, _metrics: &StepMetrics, _model: &ModelState<T>) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps; `step` counts completed steps.
    fn on_checkpoint(&mut self, _step: usize, _model: &ModelState<T>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl<T: Float> TrainObserver<T> for Silent {}

/// Runs `T` optimizer steps starting at step 0 and leaves the mask at step
/// `T`. Base weights change only in [`TrainMode::Full`].
pub fn train<T: Float>(
    model: &mut ModelState<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<Vec<StepMetrics>> {
    let d = model.d_model();
    cfg.validate(d)?;
    if corpus.vocab > model.config.vocab_size {
        return Err(Error::config(format!(
            "data vocabulary {} exceeds model.vocab_size {}",
            corpus.vocab, model.config.vocab_size
        )));
    }
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::config(format!(
            "train.seq_len {} exceeds model.max_seq_len {}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    if cfg.mode == TrainMode::Pat {
        model.mask.s0 = cfg.s0();
        model.mask.n_target = cfg.n_target(d);
    }
    let groups = match cfg.mode {
        TrainMode::Pat => ParamGroups::ALL,
        TrainMode::Lora => ParamGroups::LORA_ONLY,
        TrainMode::Full => ParamGroups::BASE_ONLY,
    };
    let mut sampler = corpus.sampler(cfg.seq_len, cfg.batch_size, cfg.seed)?;
    let mut adam = Adam::<T>::new();
    let mut log = Vec::with_capacity(cfg.total_steps);

    for s in 0..cfg.total_steps {
        let started = Instant::now();
        model.mask.step = s;
        let batch = sampler.next_batch()?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, groups);
        let (loss, values) = match cfg.mode {
            TrainMode::Pat => composite_loss(&mut tape, model, &bound, &batch)?,
            TrainMode::Lora | TrainMode::Full => {
                let logits = model.forward_bound(&mut tape, &bound, &batch.input, ForwardMode::Plain, None)?;
                let l = tape.cross_entropy(logits, &batch.targets)?;
                let v = tape.value(l).data()[0].to_f64c();
                let values = LossValues {
                    total: v,
                    instruct: v,
                    active: 0.0,
                    identity: 0.0,
                };
                (l, values)
            }
        };
        if let Some(component) = values.first_non_finite() {
            return Err(Error::NonFinite {
                step: s,
                component: component.to_string(),
            });
        }
        tape.backward(loss)?;
        let mut grads = Vec::with_capacity(bound.trainable.len());
        for (name, v) in &bound.trainable {
            let g = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: s,
                    component: format!("gradient of {name}"),
                });
            }
            grads.push(g);
        }
        drop(tape);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = cosine_lr(s, cfg.total_steps, cfg.lr_max);
        {
            let mut params: Vec<&mut Tensor<T>> = model.trainable_mut(groups).into_iter().map(|(_, p)| p).collect();
            adam.step(&mut params, &grads, lr)?;
        }
        let sched = model.mask.schedule(s);
        let metrics = StepMetrics {
            step: s,
            lr,
            loss_total: values.total,
            loss_instruct: values.instruct,
            loss_active: values.active,
            loss_identity: values.identity,
            tau: sched.tau,
            beta: sched.beta,
            active_count: model.mask.active_count(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        model.mask.step = s + 1;
        observer.on_step(&metrics, model)?;
        if cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(s + 1, model)?;
        }
        log.push(metrics);
    }
    model.mask.step = cfg.total_steps;
    Ok(log)
}
