//! Central finite-difference checks of every differentiable operation, in
//! 64-bit arithmetic with step 1e-5. Each group records the worst relative
//! error per checked function.

use super::{gradcheck, perturbed_model, project, rel_err, rng, tiny_config, uniform, FD_STEP};
use pat_core::autodiff::IGNORE_INDEX;
use pat_core::data::LmBatch;
use pat_core::model::{ForwardMode, ModelState, ParamGroups, PatOptions, TokenBatch};
use pat_core::sparsify::{gate, hsm_forward, identity_loss, HsmVars, Schedule, UnifiedMask};
use pat_core::trainer::composite_loss;
use pat_core::{Tape, Tensor, Var};

/// Named worst-case relative errors.
#[derive(Default)]
pub struct Report(pub Vec<(String, f64)>);

impl Report {
    fn check(&mut self, name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        self.0.push((name.to_string(), gradcheck(inputs, f)));
    }

    pub fn worst(&self) -> (&str, f64) {
        self.0
            .iter()
            .fold(("", 0.0), |w, (n, e)| if *e > w.1 { (n.as_str(), *e) } else { w })
    }
}

pub const GROUPS: [(&str, fn(&mut Report)); 9] = [
    ("linear algebra", linear_algebra),
    ("elementwise", elementwise),
    ("reductions", reductions),
    ("straight-through", straight_through),
    ("network ops", network_ops),
    ("causal attention", causal_attention),
    ("gate", gate_over_the_schedule),
    ("sparsifier", hsm_forward_and_identity_loss),
    ("composite loss", composite_loss_against_its_surrogate),
];

pub fn run_all() -> Report {
    let mut r = Report::default();
    for (_, g) in GROUPS {
        g(&mut r);
    }
    r
}

pub fn linear_algebra(c: &mut Report) {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let bt = uniform(&mut r, &[5, 4], -1.0, 1.0);
    c.check("matmul", &[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 10)
    });
    c.check("matmul_t", &[a.clone(), bt], |t, v| {
        let y = t.matmul_t(v[0], v[1]).unwrap();
        project(t, y, 11)
    });
    c.check("transpose", &[a.clone()], |t, v| {
        let y = t.transpose(v[0]).unwrap();
        project(t, y, 12)
    });
    c.check("reshape", &[a], |t, v| {
        let y = t.reshape(v[0], &[2, 6]).unwrap();
        project(t, y, 13)
    });
}

pub fn elementwise(c: &mut Report) {
    let mut r = rng(2);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let row = uniform(&mut r, &[4], -2.0, 2.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let away = uniform(&mut r, &[3, 4], 0.2, 1.5);
    let binary: [(&str, fn(&mut Tape<f64>, Var, Var) -> Var); 3] = [
        ("add", |t, x, y| t.add(x, y).unwrap()),
        ("sub", |t, x, y| t.sub(x, y).unwrap()),
        ("mul", |t, x, y| t.mul(x, y).unwrap()),
    ];
    for (name, op) in binary {
        c.check(name, &[a.clone(), b.clone()], |t, v| {
            let y = op(t, v[0], v[1]);
            project(t, y, 20)
        });
    }
    c.check("add row", &[a.clone(), row.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 21)
    });
    c.check("mul row", &[a.clone(), row], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 22)
    });
    c.check("div", &[a.clone(), pos], |t, v| {
        let y = t.div(v[0], v[1]).unwrap();
        project(t, y, 23)
    });
    c.check("scale", &[a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 24)
    });
    c.check("add_scalar", &[a.clone()], |t, v| {
        let y = t.add_scalar(v[0], 0.3);
        project(t, y, 25)
    });
    c.check("sigmoid", &[a.clone()], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 26)
    });
    c.check("silu", &[a.clone()], |t, v| {
        let y = t.silu(v[0]);
        project(t, y, 27)
    });
    // keep |x| away from the kink
    let signed: Vec<f64> = away.data().iter().enumerate().map(|(i, x)| if i % 2 == 0 { *x } else { -x }).collect();
    c.check("abs", &[Tensor::new(vec![3, 4], signed).unwrap()], |t, v| {
        let y = t.abs(v[0]);
        project(t, y, 28)
    });
}

pub fn reductions(c: &mut Report) {
    let a = uniform(&mut rng(3), &[3, 4], -1.0, 1.0);
    c.check("sum", &[a.clone()], |t, v| {
        let s = t.sum(v[0]);
        t.scale(s, 0.7)
    });
    c.check("mean", &[a.clone()], |t, v| t.mean(v[0]));
    c.check("frobenius", &[a.clone()], |t, v| t.frobenius(v[0]));
    c.check("softmax_rows", &[a], |t, v| {
        let y = t.softmax_rows(v[0]);
        project(t, y, 30)
    });
}

pub fn straight_through(c: &mut Report) {
    let a = uniform(&mut rng(4), &[5], -1.0, 1.0);
    let soft = |t: &mut Tape<f64>, v: &[Var]| {
        let s = t.sigmoid(v[0]);
        let s = t.sum(s);
        t.scale(s, 2.0)
    };
    c.check("straight_through surrogate", std::slice::from_ref(&a), soft);

    let mut t1 = Tape::new();
    let x1 = t1.leaf(a.clone(), true);
    let s1 = soft(&mut t1, &[x1]);
    t1.backward(s1).unwrap();
    let mut t2 = Tape::new();
    let x2 = t2.leaf(a, true);
    let s2 = soft(&mut t2, &[x2]);
    let st = t2.straight_through(42.0, s2).unwrap();
    t2.backward(st).unwrap();
    assert_eq!(t2.value(st).data(), &[42.0]);
    assert_eq!(t1.grad(x1).unwrap(), t2.grad(x2).unwrap());
}

pub fn network_ops(c: &mut Report) {
    let mut r = rng(5);
    let x = uniform(&mut r, &[4, 6], -1.0, 1.0);
    let g = uniform(&mut r, &[6], 0.5, 1.5);
    c.check("rmsnorm", &[x.clone(), g], |t, v| {
        let y = t.rmsnorm(v[0], v[1], 1e-6).unwrap();
        project(t, y, 40)
    });
    let logits = uniform(&mut r, &[5, 7], -2.0, 2.0);
    let targets = [3, IGNORE_INDEX, 0, 6, 6];
    c.check("cross_entropy", &[logits], |t, v| t.cross_entropy(v[0], &targets).unwrap());
    let table = uniform(&mut r, &[7, 3], -1.0, 1.0);
    c.check("embedding", &[table], |t, v| {
        let y = t.embedding(v[0], &[2, 5, 2, 0]).unwrap();
        project(t, y, 41)
    });
    let y = uniform(&mut r, &[4, 2], -1.0, 1.0);
    c.check("concat_last", &[x, y], |t, v| {
        let c = t.concat_last(&[v[0], v[1]]).unwrap();
        project(t, c, 42)
    });
}

pub fn causal_attention(c: &mut Report) {
    let mut r = rng(6);
    // batch 2, seq 3, 2 heads of width 2
    let q = uniform(&mut r, &[6, 4], -1.0, 1.0);
    let k = uniform(&mut r, &[6, 4], -1.0, 1.0);
    let v = uniform(&mut r, &[6, 4], -1.0, 1.0);
    c.check("causal_attention", &[q, k, v], |t, x| {
        let y = t.causal_attention(x[0], x[1], x[2], 2, 3, 2).unwrap();
        project(t, y, 50)
    });
}

pub fn gate_over_the_schedule(c: &mut Report) {
    let s0 = 100;
    let mask = UnifiedMask::<f64>::new(6, s0, 1e-3, 3).unwrap();
    for s in [1, s0 / 4, s0 / 2, s0 - 1, s0] {
        let sched = mask.schedule(s);
        // keep tau·W in the sigmoid's responsive range
        let span = 2.0 / sched.tau.max(1.0);
        let w = uniform(&mut rng(s as u64), &[6], -span, span);
        c.check(&format!("gate at s={s}"), &[w], |t, v| {
            let m = gate(t, v[0], sched);
            project(t, m, 60)
        });
    }
}

pub fn hsm_forward_and_identity_loss(c: &mut Report) {
    let (d, r_) = (8, 3);
    let mut r = rng(7);
    let h = uniform(&mut r, &[5, d], -1.0, 1.0);
    let l0 = uniform(&mut r, &[r_, d], -0.5, 0.5);
    let v = uniform(&mut r, &[r_], -1.0, 1.0);
    let l1 = uniform(&mut r, &[d, r_], -0.5, 0.5);
    let w = uniform(&mut r, &[d], -1.0, 1.0);
    let sched = Schedule { tau: 2.0, beta: 0.1 };
    c.check("hsm_forward", &[h, l0.clone(), v.clone(), l1.clone(), w], |t, x| {
        let m = gate(t, x[4], sched);
        let hv = HsmVars {
            l0: x[1],
            v: x[2],
            l1: x[3],
        };
        let y = hsm_forward(t, hv, x[0], m).unwrap();
        project(t, y, 70)
    });
    let l0b = uniform(&mut r, &[r_, d], -0.5, 0.5);
    let l1b = uniform(&mut r, &[d, r_], -0.5, 0.5);
    c.check("identity_loss", &[l0, v.clone(), l1, l0b, v, l1b], |t, x| {
        let hs = [
            HsmVars {
                l0: x[0],
                v: x[1],
                l1: x[2],
            },
            HsmVars {
                l0: x[3],
                v: x[4],
                l1: x[5],
            },
        ];
        identity_loss(t, &hs).unwrap()
    });
}

/// `L_instruct + |N − Σ sigmoid(τW)| + L_identity`: the differentiable
/// function whose gradient the composite loss reports.
fn soft_composite(model: &ModelState<f64>, batch: &LmBatch) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, ParamGroups::NONE);
    let logits = model
        .forward_bound(&mut tape, &bound, &batch.input, ForwardMode::Masked, None)
        .unwrap();
    let ce = tape.cross_entropy(logits, &batch.targets).unwrap();
    let tau = model.mask.schedule(model.mask.step).tau;
    let z = tape.scale(bound.w_m(), tau);
    let s = tape.sigmoid(z);
    let s = tape.sum(s);
    let diff = tape.add_scalar(s, -(model.mask.n_target as f64));
    let active = tape.abs(diff);
    let id = identity_loss(&mut tape, &bound.hsm_vars()).unwrap();
    let a = tape.add(ce, active).unwrap();
    let total = tape.add(a, id).unwrap();
    tape.value(total).data()[0]
}

pub fn composite_loss_against_its_surrogate(c: &mut Report) {
    let cfg = tiny_config(8, 7, 4);
    let opts = PatOptions {
        r_hio: 3,
        r_lora: 2,
        lora_alpha: 4.0,
        s0: 10,
        eps_temp: 1e-3,
        n_target: 5,
    };
    let mut model = perturbed_model::<f64>(&cfg, &opts, 3);
    model.mask.step = 5;
    let batch = LmBatch {
        input: TokenBatch::new(vec![1, 4, 2, 6, 0, 3, 5, 5], 2, 4).unwrap(),
        targets: vec![4, 2, IGNORE_INDEX, 1, 3, 5, 5, 0],
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, ParamGroups::ALL);
    let (loss, values) = composite_loss(&mut tape, &model, &bound, &batch).unwrap();
    assert_eq!(values.total, values.instruct + values.active + values.identity);
    tape.backward(loss).unwrap();
    let analytic: Vec<(String, Tensor<f64>)> = bound
        .trainable
        .iter()
        .map(|(n, v)| (n.clone(), tape.grad(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v)))))
        .collect();
    drop(tape);

    let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
    assert!(names.iter().any(|n| n == "mask.w_m"));
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut num = vec![0.0; grad.numel()];
        for (i, n) in num.iter_mut().enumerate() {
            let set = |m: &mut ModelState<f64>, x: f64| {
                m.trainable_mut(ParamGroups::ALL)[k].1.data_mut()[i] = x;
            };
            let orig = model.trainable_mut(ParamGroups::ALL)[k].1.data()[i];
            set(&mut model, orig + FD_STEP);
            let up = soft_composite(&model, &batch);
            set(&mut model, orig - FD_STEP);
            let down = soft_composite(&model, &batch);
            set(&mut model, orig);
            *n = (up - down) / (2.0 * FD_STEP);
        }
        c.0.push((format!("composite loss wrt {name}"), rel_err(grad.data(), &num)));
    }
}
