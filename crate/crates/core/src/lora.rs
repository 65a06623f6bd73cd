//! Low-rank adapters on frozen linear weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{gemm_into, Float, Tape, Tensor, Var};
use crate::error::{Error, Result, TensorError};

/// Trainable `(alpha/r)·B·A` delta for a `[d_out × d_in]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    /// `[r × d_in]`
    pub a: Tensor<T>,
    /// `[d_out × r]`, zero at init.
    pub b: Tensor<T>,
    pub alpha: f64,
}

impl<T: Float> LoraAdapter<T> {
    pub fn init<R: Rng>(d_out: usize, d_in: usize, r: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if r == 0 || r > d_in.min(d_out) {
            return Err(Error::config(format!(
                "LoRA rank must be in 1..={} for a {d_out}x{d_in} weight, got {r}",
                d_in.min(d_out)
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let a = (0..r * d_in).map(|_| T::from_f64c(normal.sample(rng))).collect();
        Ok(LoraAdapter {
            a: Tensor::from_parts(vec![r, d_in], a),
            b: Tensor::zeros(&[d_out, r]),
            alpha,
        })
    }

    pub fn from_factors(a: Tensor<T>, b: Tensor<T>, alpha: f64) -> Result<Self> {
        match (a.shape(), b.shape()) {
            ([r, _], [_, rb]) if r == rb => Ok(LoraAdapter { a, b, alpha }),
            (sa, sb) => Err(TensorError::dim("lora", sa, sb).into()),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// The dense `(alpha/r)·B·A`.
    pub fn delta(&self) -> Tensor<T> {
        let (r, d_in) = (self.a.shape()[0], self.a.shape()[1]);
        let d_out = self.b.shape()[0];
        let mut out = vec![T::zero(); d_out * d_in];
        gemm_into(self.b.data(), false, self.a.data(), false, d_out, r, d_in, &mut out, false);
        let s = T::from_f64c(self.scale());
        out.iter_mut().for_each(|x| *x *= s);
        Tensor::from_parts(vec![d_out, d_in], out)
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LoraVars<T> {
        LoraVars {
            a: tape.leaf(self.a.clone(), trainable),
            b: tape.leaf(self.b.clone(), trainable),
            scale: T::from_f64c(self.scale()),
        }
    }
}

/// Adapter state on one linear layer. Merging consumes the adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum LoraSlot<T> {
    Active(LoraAdapter<T>),
    Merged,
}

impl<T: Float> LoraSlot<T> {
    pub fn adapter(&self) -> Option<&LoraAdapter<T>> {
        match self {
            LoraSlot::Active(a) => Some(a),
            LoraSlot::Merged => None,
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut LoraAdapter<T>> {
        match self {
            LoraSlot::Active(a) => Some(a),
            LoraSlot::Merged => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars<T> {
    pub a: Var,
    pub b: Var,
    pub scale: T,
}

/// `x·Wᵀ + scale·(x·Aᵀ)·Bᵀ` for row-major activations `x: [n × d_in]`.
pub fn lora_forward<T: Float>(
    tape: &mut Tape<T>,
    w: Var,
    adapter: Option<LoraVars<T>>,
    x: Var,
) -> Result<Var, TensorError> {
    let base = tape.matmul_t(x, w)?;
    let Some(ad) = adapter else { return Ok(base) };
    let down = tape.matmul_t(x, ad.a)?;
    let up = tape.matmul_t(down, ad.b)?;
    let up = tape.scale(up, ad.scale);
    tape.add(base, up)
}

/// Folds the adapter into `w` and marks the slot merged.
pub fn merge_lora<T: Float>(w: &mut Tensor<T>, slot: &mut LoraSlot<T>) -> Result<()> {
    let LoraSlot::Active(adapter) = slot else {
        return Err(Error::Lifecycle("LoRA adapter already merged".into()));
    };
    let delta = adapter.delta();
    if delta.shape() != w.shape() {
        return Err(TensorError::dim("merge_lora", w.shape(), delta.shape()).into());
    }
    for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
        *x += *d;
    }
    *slot = LoraSlot::Merged;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(w: &Tensor<f64>, ad: Option<&LoraAdapter<f64>>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let xv = tape.constant(x.clone());
        let lv = ad.map(|a| a.bind(&mut tape, false));
        let y = lora_forward(&mut tape, wv, lv, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_b_is_base_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let ad = LoraAdapter::init(3, 4, 2, 4.0, &mut rng).unwrap();
        assert_eq!(run(&w, Some(&ad), &x), run(&w, None, &x));
    }

    #[test]
    fn full_rank_identity_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let x = rand_tensor(&mut rng, &[5, 3]);
        let ad = LoraAdapter::from_factors(Tensor::eye(3), b.clone(), 3.0).unwrap();
        let mut wb = w.clone();
        wb.data_mut().iter_mut().zip(b.data()).for_each(|(a, b)| *a += b);
        let diff = run(&w, Some(&ad), &x).max_abs_diff(&run(&wb, None, &x)).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn matches_dense_delta_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d_out, d_in, r) = (5, 6, 2);
        let w = rand_tensor(&mut rng, &[d_out, d_in]);
        let a = rand_tensor(&mut rng, &[r, d_in]);
        let b = rand_tensor(&mut rng, &[d_out, r]);
        let x = rand_tensor(&mut rng, &[4, d_in]);
        let alpha = 4.0;
        let ad = LoraAdapter::from_factors(a.clone(), b.clone(), alpha).unwrap();
        // oracle: y = x·(W + α/r·B·A)ᵀ with explicit loops
        let mut expect = vec![0.0; 4 * d_out];
        for n in 0..4 {
            for o in 0..d_out {
                let mut acc = 0.0;
                for i in 0..d_in {
                    let mut wd = w.at2(o, i);
                    for p in 0..r {
                        wd += alpha / r as f64 * b.at2(o, p) * a.at2(p, i);
                    }
                    acc += wd * x.at2(n, i);
                }
                expect[n * d_out + o] = acc;
            }
        }
        let got = run(&w, Some(&ad), &x);
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        let mut merged = w.clone();
        let mut slot = LoraSlot::Active(ad);
        merge_lora(&mut merged, &mut slot).unwrap();
        assert!(run(&merged, None, &x).max_abs_diff(&got).unwrap() < 1e-12);
    }

    #[test]
    fn double_merge_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = rand_tensor(&mut rng, &[3, 4]);
        let before = w.clone();
        let mut slot = LoraSlot::Active(LoraAdapter::init(3, 4, 2, 4.0, &mut rng).unwrap());
        merge_lora(&mut w, &mut slot).unwrap();
        assert_eq!(w, before);
        assert!(matches!(merge_lora(&mut w, &mut slot), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn frozen_base_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ad = LoraAdapter::init(3, 4, 2, 4.0, &mut rng).unwrap();
        ad.b = rand_tensor(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let w = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let x = tape.constant(rand_tensor(&mut rng, &[2, 4]));
        let lv = ad.bind(&mut tape, true);
        let y = lora_forward(&mut tape, w, Some(lv), x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(lv.a).is_some() && tape.grad(lv.b).is_some());
    }
}
