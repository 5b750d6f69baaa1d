//! Independent scalar-loop reference implementations and fixtures shared by
//! the integration tests.
#![allow(dead_code)]

use plgt_core::attention::{head_from_tensors, PlgaHeadVars};
use plgt_core::{SeedStream, Tape, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rand_mat(rng: &mut SeedStream, r: usize, c: usize, scale: f64) -> Mat {
    (0..r)
        .map(|_| (0..c).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect())
        .collect()
}

pub fn rand_vec(rng: &mut SeedStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// `Σ_s q[s][i]·q[s][j]`.
pub fn density(q: &Mat) -> Mat {
    let d = q[0].len();
    let mut out = vec![vec![0.0; d]; d];
    for row in q {
        for i in 0..d {
            for j in 0..d {
                out[i][j] += row[i] * row[j];
            }
        }
    }
    out
}

pub fn dense(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|o| b[o] + (0..row.len()).map(|i| row[i] * w[i][o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct UnitParams {
    pub dense: Vec<(Mat, Vec<f64>)>,
    pub proj: (Mat, Vec<f64>),
    pub ln: (Vec<f64>, Vec<f64>),
}

/// Parameters of one power-law head as plain matrices.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub units: Vec<UnitParams>,
    pub wrap: (Mat, Vec<f64>),
    pub a: Mat,
    pub b_a: Mat,
    pub p: Mat,
}

impl HeadParams {
    pub fn random(rng: &mut SeedStream, dk: usize, a_dff: usize, units: usize, layers: usize) -> Self {
        let units = (0..units)
            .map(|_| UnitParams {
                dense: (0..layers)
                    .map(|j| {
                        let fan_in = if j == 0 { dk } else { a_dff };
                        (rand_mat(rng, fan_in, a_dff, 0.6), rand_vec(rng, a_dff, 0.2))
                    })
                    .collect(),
                proj: (rand_mat(rng, a_dff, dk, 0.6), rand_vec(rng, dk, 0.2)),
                ln: (
                    rand_vec(rng, dk, 0.5).iter().map(|v| 1.0 + v).collect(),
                    rand_vec(rng, dk, 0.2),
                ),
            })
            .collect();
        HeadParams {
            units,
            wrap: (rand_mat(rng, dk, dk, 0.8), rand_vec(rng, dk, 0.3)),
            a: rand_mat(rng, dk, dk, 1.0),
            b_a: rand_mat(rng, dk, dk, 0.3),
            p: rand_mat(rng, dk, dk, 1.0),
        }
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> PlgaHeadVars<'t> {
        let pair = |(w, b): &(Mat, Vec<f64>)| (to_tensor(w), vec_tensor(b));
        let units: Vec<_> = self
            .units
            .iter()
            .map(|u| {
                (
                    u.dense.iter().map(pair).collect::<Vec<_>>(),
                    pair(&u.proj),
                    (vec_tensor(&u.ln.0), vec_tensor(&u.ln.1)),
                )
            })
            .collect();
        head_from_tensors(
            tape,
            &units,
            pair(&self.wrap),
            to_tensor(&self.a),
            to_tensor(&self.b_a),
            to_tensor(&self.p),
        )
    }
}

/// Residual metric network plus positivity wrap.
pub fn metric(d: &Mat, head: &HeadParams) -> Mat {
    let mut a = d.clone();
    for u in &head.units {
        let mut x = a.clone();
        for (w, b) in &u.dense {
            x = relu(&dense(&x, w, b));
        }
        x = dense(&x, &u.proj.0, &u.proj.1);
        a = layer_norm(&add(&a, &x), &u.ln.0, &u.ln.1, 1e-6);
    }
    let wrapped = relu(&dense(&a, &head.wrap.0, &head.wrap.1));
    wrapped
        .iter()
        .map(|r| r.iter().map(|v| v + 1e-9).collect())
        .collect()
}

/// `a·A^P + b_a` elementwise.
pub fn ec(a_lm: &Mat, head: &HeadParams) -> Mat {
    let n = a_lm.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| head.a[i][j] * a_lm[i][j].powf(head.p[i][j]) + head.b_a[i][j])
                .collect()
        })
        .collect()
}

/// Row softmax of `LeakyReLU(q·G·kᵀ/√d) + mask`.
pub fn localized(q: &Mat, k: &Mat, g: &Mat, mask: Option<&Mat>, slope: f64) -> Mat {
    let dk = q[0].len();
    let mut out = Vec::new();
    for i in 0..q.len() {
        let mut row = Vec::new();
        for j in 0..k.len() {
            let mut s = 0.0;
            for m in 0..dk {
                for n in 0..dk {
                    s += q[i][m] * g[m][n] * k[j][n];
                }
            }
            s /= (dk as f64).sqrt();
            let mut e = if s >= 0.0 { s } else { slope * s };
            if let Some(mk) = mask {
                e += mk[i][j];
            }
            row.push(e);
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        out.push(row.iter().map(|v| (v - mx).exp() / z).collect());
    }
    out
}

/// Full single-head chain; returns `(V_LM, E_LM, A_LM, G_LM)`.
pub fn head_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    head: &HeadParams,
    mask: Option<&Mat>,
    slope: f64,
) -> (Mat, Mat, Mat, Mat) {
    let a = metric(&density(q), head);
    let g = ec(&a, head);
    let e = localized(q, k, &g, mask, slope);
    (matmul(&e, v), e, a, g)
}

/// `softmax(q·kᵀ/√d + mask)·v`.
pub fn sdpa(q: &Mat, k: &Mat, v: &Mat, mask: Option<&Mat>) -> Mat {
    let dk = q[0].len();
    let mut e = Vec::new();
    for i in 0..q.len() {
        let mut row: Vec<f64> = (0..k.len())
            .map(|j| {
                let s: f64 = (0..dk).map(|m| q[i][m] * k[j][m]).sum::<f64>() / (dk as f64).sqrt();
                s + mask.map_or(0.0, |mk| mk[i][j])
            })
            .collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - mx).exp() / z);
        e.push(row);
    }
    matmul(&e, v)
}

/// 32 copy-task pairs over ids 4..14, lengths 3 to 6.
pub fn copy_pairs(seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = SeedStream::new(seed);
    (0..32)
        .map(|_| {
            let n = 3 + rng.below(4);
            let s: Vec<u32> = (0..n).map(|_| 4 + rng.below(10) as u32).collect();
            (s.clone(), s)
        })
        .collect()
}

/// Copy-task vocabulary size.
pub const COPY_VOCAB: usize = 14;

/// Worst relative error between a central difference (`h = 1e-6`) and the
/// tape gradient, over every element of every input.
pub fn grad_check_worst<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[plgt_core::Var<'t>]) -> plgt_core::Result<plgt_core::Var<'t>>,
{
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars).unwrap().value().item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    tape.backward(f(&tape, &vars).unwrap()).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let an = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut p = inputs.to_vec();
            p[k].data_mut()[i] += h;
            let mut m = inputs.to_vec();
            m[k].data_mut()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            worst = worst.max(rel_err(an.data()[i], fd));
        }
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn rand_t(rng: &mut SeedStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.uniform())
}

/// Reduces `x` to a scalar with fixed, position-dependent weights so every
/// output element carries a distinct upstream gradient.
fn weighted<'t>(t: &'t Tape, x: plgt_core::Var<'t>) -> plgt_core::Result<plgt_core::Var<'t>> {
    let wt = Tensor::from_fn(&x.shape(), |i| ((i as f64) * 0.77 + 0.3).sin());
    Ok(x.mul(t.constant(wt))?.sum())
}

/// Gradient check of every differentiable primitive on small random
/// inputs. Returns the worst relative error.
pub fn primitive_grad_worst(seed: u64) -> f64 {
    use plgt_core::ndgrad::{concat_last, gather_rows};
    let mut rng = SeedStream::new(seed);
    let mut r = |s: &[usize]| rand_t(&mut rng, s, -1.0, 1.0);
    let (a, b, c) = (r(&[2, 3]), r(&[2, 3]), r(&[3]));
    let (m1, m2, m3) = (r(&[2, 3, 4]), r(&[4, 2]), r(&[3, 8]));
    let (g, bb) = (r(&[8]), r(&[8]));
    let mut rng2 = SeedStream::new(seed + 1);
    let pos = rand_t(&mut rng2, &[2, 3], 0.5, 2.0);
    let mut checks: Vec<f64> = Vec::new();
    checks.push(grad_check_worst(&[a.clone(), c.clone()], |t, v| weighted(t, v[0].add(v[1])?)));
    checks.push(grad_check_worst(&[a.clone(), b.clone()], |t, v| weighted(t, v[0].sub(v[1])?)));
    checks.push(grad_check_worst(&[a.clone(), b.clone()], |t, v| weighted(t, v[0].mul(v[1])?)));
    checks.push(grad_check_worst(&[a.clone(), pos.clone()], |t, v| weighted(t, v[0].div(v[1])?)));
    checks.push(grad_check_worst(&[pos.clone(), a.clone()], |t, v| weighted(t, v[0].elem_pow(v[1])?)));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].scale(1.7).neg().add_scalar(0.3))));
    checks.push(grad_check_worst(&[m1.clone(), m2.clone()], |t, v| weighted(t, v[0].matmul(v[1])?)));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].transpose()?)));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].reshape(&[3, 2])?)));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].exp())));
    checks.push(grad_check_worst(&[pos.clone()], |t, v| weighted(t, v[0].log()?)));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].add_scalar(0.05).relu())));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].add_scalar(0.05).leaky_relu(0.2))));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].softmax_lastdim())));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].log_softmax_lastdim())));
    checks.push(grad_check_worst(&[m3, g, bb], |t, v| weighted(t, v[0].layer_norm(v[1], v[2], 1e-6)?)));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].mask_mul(vec![1.0, 0.0, 2.0, 1.0, 1.0, 0.5])?)));
    checks.push(grad_check_worst(&[a.clone()], |_, v| Ok(v[0].mean())));
    checks.push(grad_check_worst(&[a.clone()], |t, v| weighted(t, v[0].slice_last(1, 2)?)));
    checks.push(grad_check_worst(&[a.clone()], |_, v| v[0].pick(&[1, 2])));
    checks.push(grad_check_worst(&[a.clone(), b.clone()], |t, v| weighted(t, concat_last(&[v[0], v[1]])?)));
    checks.push(grad_check_worst(&[a], |t, v| weighted(t, gather_rows(v[0], &[1, 0, 1], &[3])?)));
    checks.into_iter().fold(0.0, f64::max)
}

/// Finite-difference audit of the full model: forward in training mode
/// with fixed dropout draws, masked cross-entropy, backward. Checks
/// `per_param` indices of every parameter tensor. Returns the worst
/// relative error and the number of scalars checked.
pub fn model_grad_audit(cfg: &plgt_core::model::ModelConfig, per_param: usize) -> (f64, usize) {
    use plgt_core::attention::ForwardCtx;
    use plgt_core::model::{forward, Binder, Params};
    use plgt_core::trainkit::{init_parameters, masked_cross_entropy};
    let src = vec![vec![5, 6, 7, 0], vec![8, 9, 4, 5]];
    let tin = vec![vec![1, 5, 6, 7], vec![1, 8, 9, 0]];
    let tout = vec![vec![5, 6, 7, 2], vec![8, 9, 2, 0]];
    let mask = vec![vec![1.0; 4], vec![1.0, 1.0, 1.0, 0.0]];
    let run = |p: &Params, grads: bool| {
        let tape = Tape::new();
        let b = Binder::new(&tape, p, true);
        let mut rng = SeedStream::new(3);
        let mut ctx = ForwardCtx::training(&mut rng);
        let out = forward(&b, cfg, &src, &tin, &mut ctx).unwrap();
        let l = masked_cross_entropy(out.logits, &tout, &mask).unwrap();
        let v = l.value().item();
        if grads {
            tape.backward(l).unwrap();
            (v, Some(b.gradients()))
        } else {
            (v, None)
        }
    };
    let params = init_parameters(cfg, 5).unwrap();
    let g = run(&params, true).1.unwrap();
    let (mut worst, mut n) = (0.0f64, 0);
    let h = 1e-6;
    for (name, t) in params.iter() {
        let len = t.len();
        let mut idx: Vec<usize> = (0..per_param).map(|k| k * len / per_param).collect();
        idx.push(len - 1);
        idx.dedup();
        for i in idx {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += h;
            let lp = run(&p, false).0;
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let lm = run(&p, false).0;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.get(name).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(an, fd));
            n += 1;
        }
    }
    (worst, n)
}

pub struct OverfitReport {
    pub initial_loss: f64,
    pub loss_at_100: f64,
    pub steps: u64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub seconds: f64,
}

/// Trains on the 32 copy pairs for `steps` full-batch steps, dropout off.
pub fn overfit(kind: plgt_core::model::AttentionKind, steps: u64) -> OverfitReport {
    use plgt_core::decode::{greedy_decode, ModelScorer, MAX_EXTRA};
    use plgt_core::model::{AttentionKind, ModelConfig};
    use plgt_core::textpipe::make_batches_from_ids;
    use plgt_core::trainkit::{TrainOptions, Trainer};
    let start = std::time::Instant::now();
    let pairs = copy_pairs(7);
    let mut cfg = match kind {
        AttentionKind::Plga => ModelConfig::desk(COPY_VOCAB, COPY_VOCAB),
        AttentionKind::Sdpa => ModelConfig::desk_sdpa(COPY_VOCAB, COPY_VOCAB),
    };
    cfg.dropout_outside = 0.0;
    cfg.dropout_res = 0.0;
    cfg.dropout_elm = 0.0;
    cfg.dropout_qk = 0.0;
    let opts = TrainOptions {
        batch_size: 32,
        warmup: 50,
        lr_scale: 0.5,
        seed: 1,
        ..Default::default()
    };
    let mut t = Trainer::new(cfg, opts).unwrap();
    let batch = make_batches_from_ids(&pairs, 32, 64, None).unwrap().batches;
    let mut initial_loss = f64::NAN;
    let mut loss_at_100 = f64::NAN;
    while t.step < steps {
        let s = t.train_step(&batch[0]).unwrap();
        if t.step == 1 {
            initial_loss = s.loss;
        }
        if t.step == 100 {
            loss_at_100 = s.loss;
        }
    }
    let (_, token_accuracy) = t.evaluate(&batch).unwrap();
    let exact = pairs
        .iter()
        .filter(|(s, tgt)| {
            let scorer = ModelScorer::new(&t.model, s).unwrap();
            &greedy_decode(&scorer, s.len(), MAX_EXTRA).unwrap() == tgt
        })
        .count();
    OverfitReport {
        initial_loss,
        loss_at_100,
        steps: t.step,
        token_accuracy,
        exact_match: exact as f64 / pairs.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
    }
}
