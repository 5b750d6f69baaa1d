//! Loss, metrics, optimiser, learning-rate schedule, initialisation,
//! training loop and checkpoints.

mod checkpoint;
mod trainer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use trainer::{train, EpochLog, StepStats, TrainLog, TrainOptions, TrainOutcome, Trainer};

use indexmap::IndexMap;
use rand_distr::{Normal, Uniform};

use crate::error::{Error, Result};
use crate::model::{param_specs, Init, ModelConfig, Params};
use crate::ndgrad::{Tensor, Var};
use crate::rng::SeedStream;

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

fn check_targets(shape: &[usize], tgt_out: &[Vec<u32>], loss_mask: &[Vec<f64>]) -> Result<usize> {
    if shape.len() != 3 {
        return Err(Error::shape("cross_entropy", shape, &[]));
    }
    let (b, t) = (shape[0], shape[1]);
    if tgt_out.len() != b || loss_mask.len() != b {
        return Err(Error::shape("cross_entropy", shape, &[tgt_out.len(), loss_mask.len()]));
    }
    if tgt_out.iter().any(|r| r.len() != t)
        || loss_mask.iter().any(|r| r.len() != t)
    {
        return Err(Error::data("targets and mask must match the logits length"));
    }
    Ok(shape[2])
}

/// Mean over unmasked positions of `-log softmax(logits)[gold]`.
pub fn masked_cross_entropy<'t>(
    logits: Var<'t>,
    tgt_out: &[Vec<u32>],
    loss_mask: &[Vec<f64>],
) -> Result<Var<'t>> {
    let shape = logits.shape();
    let v = check_targets(&shape, tgt_out, loss_mask)?;
    let count: f64 = loss_mask.iter().flatten().filter(|&&m| m != 0.0).count() as f64;
    if count == 0.0 {
        return Err(Error::data("every target position is masked"));
    }
    let mut weights = Tensor::zeros(&shape);
    for (bi, (gold_row, mask_row)) in tgt_out.iter().zip(loss_mask).enumerate() {
        for (ti, (&gold, &m)) in gold_row.iter().zip(mask_row).enumerate() {
            if m == 0.0 {
                continue;
            }
            if gold as usize >= v {
                return Err(Error::data(format!("gold id {gold} outside vocabulary of {v}")));
            }
            weights.data_mut()[(bi * shape[1] + ti) * v + gold as usize] = m / count;
        }
    }
    let w = logits.tape().constant(weights);
    Ok(logits.log_softmax_lastdim().mul(w)?.sum().neg())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of unmasked positions whose argmax equals the gold id.
pub fn token_accuracy(logits: &Tensor, tgt_out: &[Vec<u32>], loss_mask: &[Vec<f64>]) -> Result<f64> {
    let v = check_targets(logits.shape(), tgt_out, loss_mask)?;
    let t = logits.shape()[1];
    let (mut hit, mut total) = (0usize, 0usize);
    for (bi, (gold_row, mask_row)) in tgt_out.iter().zip(loss_mask).enumerate() {
        for (ti, (&gold, &m)) in gold_row.iter().zip(mask_row).enumerate() {
            if m == 0.0 {
                continue;
            }
            let off = (bi * t + ti) * v;
            total += 1;
            hit += (argmax(&logits.data()[off..off + v]) == gold as usize) as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Moments and step counter of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros = || -> IndexMap<String, Tensor> {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// updated as if their gradient were zero.
pub fn adam_step(
    params: &mut Params,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for `{name}`")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let p = params.get_mut(&name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(&name);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn glorot_fans(shape: &[usize]) -> (f64, f64) {
    match shape {
        [fan_in, fan_out] => (*fan_in as f64, *fan_out as f64),
        [n] => (*n as f64, *n as f64),
        _ => {
            let n: usize = shape.iter().product();
            (n as f64, n as f64)
        }
    }
}

/// Samples every parameter. Each tensor draws from its own stream derived
/// from `seed` and the parameter name.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut params = Params::new();
    for spec in param_specs(cfg) {
        let mut rng = SeedStream::derive(seed, &format!("init:{}", spec.name), 0);
        let (fan_in, fan_out) = glorot_fans(&spec.shape);
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::Embedding => {
                let u = Uniform::new(-0.05, 0.05);
                Tensor::from_fn(&spec.shape, |_| rng.sample(&u))
            }
            Init::GlorotUniform => {
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                let u = Uniform::new_inclusive(-limit, limit);
                Tensor::from_fn(&spec.shape, |_| rng.sample(&u))
            }
            Init::GlorotNormal => {
                // Truncated at two standard deviations, rescaled so the
                // truncated distribution keeps the Glorot variance.
                let std = (2.0 / (fan_in + fan_out)).sqrt() / 0.879_625_661_034_239_8;
                let n = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                Tensor::from_fn(&spec.shape, |_| loop {
                    let x: f64 = rng.sample(&n);
                    if x.abs() <= 2.0 * std {
                        break x;
                    }
                })
            }
        };
        params.insert(spec.name, t);
    }
    Ok(params)
}
