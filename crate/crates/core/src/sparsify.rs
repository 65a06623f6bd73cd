//! Unified sparsification mask and hybrid sparsification modules.
//!
//! One proxy-weight vector `W_M` drives every module in the network. Its gate
//! `M = sigmoid(tau(s)·W_M) + beta(s)` starts at exactly 1 and is annealed to
//! near-binary values by the milestone step `s0`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Float, Tape, Tensor, Var};
use crate::error::{Error, Result, TensorError};

/// Default terminal inverse temperature is `1 / DEFAULT_EPS_TEMP`.
pub const DEFAULT_EPS_TEMP: f64 = 1e-3;

/// Gate values further than this from their snapped 0/1 value count as
/// disagreements in [`finalize_mask`].
pub const SNAP_TOLERANCE: f64 = 0.01;

/// Inverse temperature of the gate at step `s`.
///
/// Rises as `1/(1 − ln s/ln s0)` until the milestone, then stays at
/// `1/eps_temp`. Step 0 is the limit value 0, so the gate is exactly 1 there.
pub fn temperature(s: usize, s0: usize, eps_temp: f64) -> Result<f64> {
    if s0 <= 1 {
        return Err(Error::config(format!("s0 must be at least 2, got {s0}")));
    }
    if eps_temp <= 0.0 {
        return Err(Error::config(format!("eps_temp must be positive, got {eps_temp}")));
    }
    Ok(if s == 0 {
        0.0
    } else if s < s0 {
        1.0 / (1.0 - (s as f64).ln() / (s0 as f64).ln())
    } else {
        1.0 / eps_temp
    })
}

/// Additive gate offset: decays linearly from 0.5 to 0 over the first half
/// of the warm-up.
pub fn offset(s: usize, s0: usize) -> f64 {
    let (s, s0) = (s as f64, s0 as f64);
    if s < s0 / 2.0 {
        -s / s0 + 0.5
    } else {
        0.0
    }
}

/// Temperature and offset at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub tau: f64,
    pub beta: f64,
}

/// The single trainable mask shared by all sparsifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedMask<T> {
    /// Proxy weights, one per hidden channel.
    pub w_m: Tensor<T>,
    pub s0: usize,
    pub eps_temp: f64,
    pub n_target: usize,
    /// Current training step `s`.
    pub step: usize,
}

impl<T: Float> UnifiedMask<T> {
    /// Zero-initialised proxy weights.
    pub fn new(d: usize, s0: usize, eps_temp: f64, n_target: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("mask width must be at least 1"));
        }
        Self::with_weights(Tensor::zeros(&[d]), s0, eps_temp, n_target)
    }

    pub fn with_weights(w_m: Tensor<T>, s0: usize, eps_temp: f64, n_target: usize) -> Result<Self> {
        if w_m.rank() != 1 {
            return Err(Error::config(format!("proxy weights must be a vector, got {:?}", w_m.shape())));
        }
        let d = w_m.numel();
        if n_target == 0 || n_target > d {
            return Err(Error::config(format!("n_target must be in 1..={d}, got {n_target}")));
        }
        if s0 < 2 {
            return Err(Error::config(format!("s0 must be at least 2, got {s0}")));
        }
        if eps_temp <= 0.0 {
            return Err(Error::config(format!("eps_temp must be positive, got {eps_temp}")));
        }
        Ok(UnifiedMask {
            w_m,
            s0,
            eps_temp,
            n_target,
            step: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.w_m.numel()
    }

    pub fn schedule(&self, s: usize) -> Schedule {
        Schedule {
            tau: temperature(s, self.s0, self.eps_temp).expect("validated at construction"),
            beta: offset(s, self.s0),
        }
    }

    /// Gate values without recording on a tape.
    pub fn gate_values(&self, s: usize) -> Vec<T> {
        let Schedule { tau, beta } = self.schedule(s);
        let (tau, beta) = (T::from_f64c(tau), T::from_f64c(beta));
        self.w_m.data().iter().map(|&w| sigmoid(tau * w) + beta).collect()
    }

    /// Number of strictly positive proxy weights.
    pub fn active_count(&self) -> usize {
        active_count(self.w_m.data())
    }

    pub fn trace_row(&self, s: usize) -> MaskTraceRow {
        let Schedule { tau, beta } = self.schedule(s);
        let gates = self.gate_values(s);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for g in gates {
            lo = lo.min(g.to_f64c());
            hi = hi.max(g.to_f64c());
        }
        MaskTraceRow {
            step: s,
            tau,
            beta,
            min_gate: lo,
            max_gate: hi,
            active_count: self.active_count(),
        }
    }
}

/// One row of the mask-trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskTraceRow {
    pub step: usize,
    pub tau: f64,
    pub beta: f64,
    pub min_gate: f64,
    pub max_gate: f64,
    pub active_count: usize,
}

pub fn active_count<T: Float>(w: &[T]) -> usize {
    w.iter().filter(|&&x| x > T::zero()).count()
}

/// Records `M = sigmoid(tau·W_M) + beta` on the tape. No gradient reaches the
/// schedule constants.
pub fn gate<T: Float>(tape: &mut Tape<T>, w_m: Var, schedule: Schedule) -> Var {
    let z = tape.scale(w_m, T::from_f64c(schedule.tau));
    let s = tape.sigmoid(z);
    tape.add_scalar(s, T::from_f64c(schedule.beta))
}

/// Active-channel regulariser `|N_target − #{i : W_M,i > 0}|`.
///
/// The reported value is the exact indicator count; gradients come from the
/// surrogate `|N_target − Σ sigmoid(tau·W_M,i)|` at the current temperature.
pub fn active_loss<T: Float>(
    tape: &mut Tape<T>,
    w_m: Var,
    n_target: usize,
    tau: f64,
) -> Result<Var, TensorError> {
    let count = active_count(tape.value(w_m).data());
    let z = tape.scale(w_m, T::from_f64c(tau));
    let s = tape.sigmoid(z);
    let total = tape.sum(s);
    let hard = T::from_usize(n_target.abs_diff(count)).unwrap();
    let diff = tape.add_scalar(total, -T::from_usize(n_target).unwrap());
    let soft = tape.abs(diff);
    tape.straight_through(hard, soft)
}

/// Low-rank-plus-identity transform `D = L1·diag(v)·L0 + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridSparsifier<T> {
    /// `[r × d]`
    pub l0: Tensor<T>,
    /// `[r]`
    pub v: Tensor<T>,
    /// `[d × r]`
    pub l1: Tensor<T>,
}

impl<T: Float> HybridSparsifier<T> {
    /// Random orthogonal-ish factors with `v = 0`, so `D = I` exactly.
    /// Requires `1 ≤ r < d/2`.
    pub fn init<R: Rng>(d: usize, r: usize, rng: &mut R) -> Result<Self> {
        if r == 0 || 2 * r >= d {
            return Err(Error::config(format!("HIO rank must satisfy 1 <= r < d/2 (d={d}, r={r})")));
        }
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mut sample = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64c(normal.sample(rng))).collect() };
        let l0 = Tensor::from_parts(vec![r, d], sample(r * d));
        let l1 = Tensor::from_parts(vec![d, r], sample(d * r));
        Ok(HybridSparsifier {
            l0,
            v: Tensor::zeros(&[r]),
            l1,
        })
    }

    /// Builds from explicit factors; only shapes are checked.
    pub fn from_factors(l0: Tensor<T>, v: Tensor<T>, l1: Tensor<T>) -> Result<Self> {
        let (r, d) = match l0.shape() {
            [r, d] => (*r, *d),
            s => return Err(TensorError::shape("hsm", format!("L0 must be [r×d], got {s:?}")).into()),
        };
        if v.shape() != [r] || l1.shape() != [d, r] {
            return Err(TensorError::shape(
                "hsm",
                format!("inconsistent factors L0 {:?}, v {:?}, L1 {:?}", l0.shape(), v.shape(), l1.shape()),
            )
            .into());
        }
        Ok(HybridSparsifier { l0, v, l1 })
    }

    pub fn rank(&self) -> usize {
        self.v.numel()
    }

    pub fn width(&self) -> usize {
        self.l1.shape()[0]
    }

    /// `2·d·r + r`.
    pub fn param_count(&self) -> usize {
        hio_param_count(self.width(), self.rank())
    }

    /// Materialises the dense `d×d` transform. Used for merging checks only.
    pub fn dense(&self) -> Tensor<T> {
        let (d, r) = (self.width(), self.rank());
        let (l0, v, l1) = (self.l0.data(), self.v.data(), self.l1.data());
        let mut out = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = if i == j { T::one() } else { T::zero() };
                for p in 0..r {
                    acc += l1[i * r + p] * v[p] * l0[p * d + j];
                }
                out[i * d + j] = acc;
            }
        }
        Tensor::from_parts(vec![d, d], out)
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> HsmVars {
        HsmVars {
            l0: tape.leaf(self.l0.clone(), trainable),
            v: tape.leaf(self.v.clone(), trainable),
            l1: tape.leaf(self.l1.clone(), trainable),
        }
    }
}

/// Trainable parameters of one HIO-parameterised sparsifier.
pub fn hio_param_count(d: usize, r: usize) -> usize {
    2 * d * r + r
}

/// Tape handles of one sparsifier's factors.
#[derive(Debug, Clone, Copy)]
pub struct HsmVars {
    pub l0: Var,
    pub v: Var,
    pub l1: Var,
}

/// `M ⊙ (L1·(v ⊙ (L0·h)) + h)` row-wise, without forming `D`.
pub fn hsm_forward<T: Float>(
    tape: &mut Tape<T>,
    hsm: HsmVars,
    h: Var,
    mask: Var,
) -> Result<Var, TensorError> {
    let d = tape.shape(hsm.l1)[0];
    if tape.shape(h).last() != Some(&d) || tape.shape(mask) != [d] {
        return Err(TensorError::dim("hsm_forward", tape.shape(h), tape.shape(hsm.l1)));
    }
    let rows = tape.value(h).rows();
    let h2 = if tape.shape(h).len() == 2 {
        h
    } else {
        tape.reshape(h, &[rows, d])?
    };
    let down = tape.matmul_t(h2, hsm.l0)?;
    let scaled = tape.mul(down, hsm.v)?;
    let up = tape.matmul_t(scaled, hsm.l1)?;
    let sum = tape.add(up, h2)?;
    let out = tape.mul(sum, mask)?;
    if tape.shape(h).len() == 2 {
        Ok(out)
    } else {
        let shape = tape.shape(h).to_vec();
        tape.reshape(out, &shape)
    }
}

/// `Σ ‖L0·L0ᵀ − I‖_F + ‖L1ᵀ·L1 − I‖_F` over the given sparsifiers.
pub fn identity_loss<T: Float>(tape: &mut Tape<T>, hsms: &[HsmVars]) -> Result<Var, TensorError> {
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for h in hsms {
        let r = tape.shape(h.v)[0];
        let eye = tape.constant(Tensor::eye(r));
        let g0 = tape.matmul_t(h.l0, h.l0)?;
        let e0 = tape.sub(g0, eye)?;
        let n0 = tape.frobenius(e0);
        let l1t = tape.transpose(h.l1)?;
        let g1 = tape.matmul_t(l1t, l1t)?;
        let e1 = tape.sub(g1, eye)?;
        let n1 = tape.frobenius(e1);
        let both = tape.add(n0, n1)?;
        total = tape.add(total, both)?;
    }
    Ok(total)
}

/// Kept hidden channels after snapping the mask to {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    kept: Vec<usize>,
    d: usize,
}

impl BinaryMask {
    pub fn new(mut kept: Vec<usize>, d: usize) -> Result<Self> {
        kept.sort_unstable();
        kept.dedup();
        if kept.is_empty() {
            return Err(Error::config("binary mask must keep at least one channel"));
        }
        if let Some(&bad) = kept.iter().find(|&&i| i >= d) {
            return Err(TensorError::Index {
                what: "binary mask",
                index: bad,
                bound: d,
            }
            .into());
        }
        Ok(BinaryMask { kept, d })
    }

    pub fn full(d: usize) -> Self {
        BinaryMask {
            kept: (0..d).collect(),
            d,
        }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_kept(&self) -> usize {
        self.kept.len()
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.d
    }

    /// The 0/1 mask vector over the original width.
    pub fn to_vector<T: Float>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.d];
        for &i in &self.kept {
            v[i] = T::one();
        }
        v
    }
}

/// Result of snapping a trained mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalizedMask {
    pub mask: BinaryMask,
    /// Channels whose gate at the final step is more than 0.01 from its snap.
    pub snap_disagreements: usize,
}

/// Keeps the `n_target` channels with the largest proxy weights (ties go to
/// the lower index) and counts gates that disagree with the snap.
pub fn finalize_mask<T: Float>(mask: &UnifiedMask<T>, s: usize) -> FinalizedMask {
    let w = mask.w_m.data();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        w[b].partial_cmp(&w[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let kept = order[..mask.n_target].to_vec();
    let bmask = BinaryMask::new(kept, w.len()).expect("n_target validated in 1..=d");
    let snapped = bmask.to_vector::<f64>();
    let snap_disagreements = mask
        .gate_values(s)
        .iter()
        .zip(&snapped)
        .filter(|(g, t)| (g.to_f64c() - **t).abs() > SNAP_TOLERANCE)
        .count();
    FinalizedMask {
        mask: bmask,
        snap_disagreements,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn temperature_examples() {
        assert_eq!(temperature(0, 100, 1e-3).unwrap(), 0.0);
        assert_eq!(temperature(1, 100, 1e-3).unwrap(), 1.0);
        assert!((temperature(100, 100, 1e-3).unwrap() - 1000.0).abs() < 1e-9);
        assert!((temperature(5000, 100, 1e-3).unwrap() - 1000.0).abs() < 1e-9);
        assert!(matches!(temperature(3, 1, 1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn temperature_increases_before_milestone() {
        let taus: Vec<f64> = (1..100).map(|s| temperature(s, 100, 1e-3).unwrap()).collect();
        assert!(taus.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn offset_examples() {
        assert_eq!(offset(0, 100), 0.5);
        assert_eq!(offset(25, 100), 0.25);
        assert_eq!(offset(50, 100), 0.0);
        assert!(offset(49, 100) > 0.0 && offset(49, 100) <= 0.01 + 1e-12);
        assert_eq!(offset(1000, 100), 0.0);
    }

    #[test]
    fn gate_examples() {
        let w = Tensor::from_f64(&[3], &[0.01, -0.01, 3.0]).unwrap();
        let m = UnifiedMask::<f64>::with_weights(w, 100, 1e-3, 2).unwrap();
        assert_eq!(m.gate_values(0), vec![1.0, 1.0, 1.0]);
        let g = m.gate_values(100);
        // sigmoid(10), sigmoid(-10)
        assert!((g[0] - 0.999_954_602_131_297_6).abs() < 1e-12);
        assert!((g[1] - 4.539_786_870_243_439e-5).abs() < 1e-15);
    }

    #[test]
    fn mask_validation() {
        assert!(UnifiedMask::<f32>::new(4, 10, 1e-3, 0).is_err());
        assert!(UnifiedMask::<f32>::new(4, 10, 1e-3, 5).is_err());
        assert!(UnifiedMask::<f32>::new(4, 1, 1e-3, 2).is_err());
        assert!(UnifiedMask::<f32>::new(4, 10, 0.0, 2).is_err());
        assert!(UnifiedMask::<f32>::new(4, 2, 1e-3, 4).is_ok());
    }

    fn hand_hsm() -> HybridSparsifier<f64> {
        HybridSparsifier::from_factors(
            Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap(),
            Tensor::from_f64(&[1], &[2.0]).unwrap(),
            Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hsm_forward_examples() {
        let hsm = hand_hsm();
        let mut tape = Tape::new();
        let vars = hsm.bind(&mut tape, false);
        let h = tape.constant(Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap());
        let ones = tape.constant(Tensor::ones(&[2]));
        let y = hsm_forward(&mut tape, vars, h, ones).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0, 5.0]);

        let m = tape.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let y = hsm_forward(&mut tape, vars, h, m).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 5.0]);

        let bad = tape.constant(Tensor::ones(&[1, 3]));
        assert!(hsm_forward(&mut tape, vars, bad, ones).is_err());
    }

    #[test]
    fn hsm_with_zero_scaling_is_masked_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hsm = HybridSparsifier::<f64>::init(8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = hsm.bind(&mut tape, false);
        let hv: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 2.0).collect();
        let h = tape.constant(Tensor::from_f64(&[2, 8], &hv).unwrap());
        let mv = [1.0, 0.0, 0.5, 1.0, 1.0, 0.0, 0.25, 1.0];
        let m = tape.constant(Tensor::from_f64(&[8], &mv).unwrap());
        let y = hsm_forward(&mut tape, vars, h, m).unwrap();
        for (i, &out) in tape.value(y).data().iter().enumerate() {
            assert_eq!(out, hv[i] * mv[i % 8]);
        }
        assert_eq!(hsm.dense().data(), Tensor::<f64>::eye(8).data());
    }

    #[test]
    fn hio_rank_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(HybridSparsifier::<f32>::init(8, 4, &mut rng).is_err());
        assert!(HybridSparsifier::<f32>::init(8, 0, &mut rng).is_err());
        assert!(HybridSparsifier::<f32>::init(8, 3, &mut rng).is_ok());
    }

    #[test]
    fn identity_loss_examples() {
        let mut tape = Tape::<f64>::new();
        // orthonormal rows / columns
        let l0 = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let l1 = tape.constant(Tensor::from_f64(&[3, 2], &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::zeros(&[2]));
        let loss = identity_loss(&mut tape, &[HsmVars { l0, v, l1 }]).unwrap();
        assert_eq!(tape.value(loss).data(), &[0.0]);

        let l0 = tape.constant(Tensor::zeros(&[3, 5]));
        let l1 = tape.constant(Tensor::zeros(&[5, 3]));
        let v = tape.constant(Tensor::zeros(&[3]));
        let loss = identity_loss(&mut tape, &[HsmVars { l0, v, l1 }]).unwrap();
        assert!((tape.value(loss).data()[0] - 2.0 * 3f64.sqrt()).abs() < 1e-12);

        let l0 = tape.constant(Tensor::from_f64(&[1, 3], &[2.0, 0.0, 0.0]).unwrap());
        let l1 = tape.constant(Tensor::from_f64(&[3, 1], &[2.0, 0.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::zeros(&[1]));
        let loss = identity_loss(&mut tape, &[HsmVars { l0, v, l1 }]).unwrap();
        assert_eq!(tape.value(loss).data(), &[6.0]);
    }

    #[test]
    fn active_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(&[6]), true);
        let l = active_loss(&mut tape, w, 4, 0.0).unwrap();
        assert_eq!(tape.value(l).data(), &[4.0]);

        let w = tape.leaf(Tensor::from_f64(&[4], &[0.3, -0.1, 0.2, -0.5]).unwrap(), true);
        let l = active_loss(&mut tape, w, 1, 5.0).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
        let l = active_loss(&mut tape, w, 2, 5.0).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    #[test]
    fn active_loss_gradient_is_surrogate() {
        // surrogate Σσ(τw) = 2·σ(0) = 1 < N=2, so every weight is pushed up
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(&[2]), true);
        let l = active_loss(&mut tape, w, 2, 4.0).unwrap();
        tape.backward(l).unwrap();
        // d/dw |2 − Σσ(4w)| = −4·σ'(0) = −1
        assert_eq!(tape.grad(w).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn finalize_mask_examples() {
        let w = Tensor::from_f64(&[4], &[1.0, -1.0, 2.0, -2.0]).unwrap();
        let m = UnifiedMask::<f64>::with_weights(w, 10, 1e-3, 2).unwrap();
        let f = finalize_mask(&m, 10);
        assert_eq!(f.mask.kept(), &[0, 2]);
        assert_eq!(f.snap_disagreements, 0);

        let m = UnifiedMask::<f64>::new(5, 10, 1e-3, 3).unwrap();
        let f = finalize_mask(&m, 10);
        assert_eq!(f.mask.kept(), &[0, 1, 2]);
        // all gates sit at 0.5
        assert_eq!(f.snap_disagreements, 5);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = UnifiedMask::with_weights(Tensor::vector(w), 10, 1e-3, 7).unwrap();
        assert_eq!(finalize_mask(&m, 10).mask.kept(), &[0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn binary_mask_validation() {
        assert!(BinaryMask::new(vec![], 3).is_err());
        assert!(BinaryMask::new(vec![3], 3).is_err());
        let m = BinaryMask::new(vec![2, 0, 2], 3).unwrap();
        assert_eq!(m.kept(), &[0, 2]);
        assert_eq!(m.to_vector::<f32>(), vec![1.0, 0.0, 1.0]);
        assert!(BinaryMask::full(3).is_full());
    }

    #[test]
    fn fresh_trace_row() {
        let m = UnifiedMask::<f32>::new(4, 10, 1e-3, 2).unwrap();
        let row = m.trace_row(0);
        assert_eq!((row.tau, row.beta, row.min_gate, row.max_gate), (0.0, 0.5, 1.0, 1.0));
        assert_eq!(row.active_count, 0);
    }
}
