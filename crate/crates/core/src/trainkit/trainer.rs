use std::fmt::Write as _;

use indexmap::IndexMap;

use super::{adam_step, init_parameters, lr_schedule, masked_cross_entropy, token_accuracy, AdamState, Checkpoint};
use crate::attention::ForwardCtx;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{forward, Binder, Model, ModelConfig};
use crate::ndgrad::Tape;
use crate::rng::{subseed, SeedStream};
use crate::textpipe::{make_batches_from_ids, Batch};

/// Training-loop settings. Echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: u64,
    pub batch_size: usize,
    pub warmup: u64,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    /// Also keep a checkpoint every `k` epochs.
    pub checkpoint_every: Option<u64>,
    /// Epochs after the minimum validation loss at which a further
    /// checkpoint is kept.
    pub patience: u64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 32,
            warmup: 15000,
            lr_scale: 1.0,
            checkpoint_every: None,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("epochs", self.epochs);
        m.set("batch_size", self.batch_size);
        m.set("warmup", self.warmup);
        m.set("lr_scale", self.lr_scale);
        m.set("checkpoint_every", self.checkpoint_every.unwrap_or(0));
        m.set("patience", self.patience);
        m.set("seed", self.seed);
        m
    }

    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        if let Some(v) = kv.get_parsed("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = kv.get_parsed("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get_parsed("warmup")? {
            self.warmup = v;
        }
        if let Some(v) = kv.get_parsed("lr_scale")? {
            self.lr_scale = v;
        }
        if let Some(v) = kv.get_parsed::<u64>("checkpoint_every")? {
            self.checkpoint_every = (v > 0).then_some(v);
        }
        if let Some(v) = kv.get_parsed("patience")? {
            self.patience = v;
        }
        if let Some(v) = kv.get_parsed("seed")? {
            self.seed = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.warmup == 0 {
            return Err(Error::config("warmup must be positive"));
        }
        if !(self.lr_scale.is_finite() && self.lr_scale > 0.0) {
            return Err(Error::config("lr_scale must be positive"));
        }
        Ok(())
    }
}

/// Result of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub tokens: usize,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

impl TrainLog {
    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRAIN_LOG_HEADER) {
            return Err(Error::data("training log lacks the expected header"));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::data(format!("training log row {} is malformed", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            entries.push(EpochLog {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                val_loss: num(f[3])?,
                val_acc: num(f[4])?,
            });
        }
        Ok(TrainLog { entries })
    }
}

/// Owns the model and optimiser state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub opts: TrainOptions,
    pub epoch: u64,
    pub step: u64,
    pub cursor: u64,
    /// Extra run-config keys (data paths and such) carried into checkpoints.
    pub extra: KvMap,
}

impl Trainer {
    pub fn new(config: ModelConfig, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let params = init_parameters(&config, opts.seed)?;
        let model = Model::new(config, params)?;
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            opts,
            epoch: 0,
            step: 0,
            cursor: 0,
            extra: KvMap::new(),
        })
    }

    /// Restores a run. Options come from the config echo.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let opts = TrainOptions {
            seed: ckpt.seed,
            ..TrainOptions::default()
        }
        .apply_kv(&ckpt.config)?;
        let mut extra = ckpt.config.clone();
        let known: Vec<String> = model
            .config
            .to_kv()
            .iter()
            .chain(opts.to_kv().iter())
            .map(|(k, _)| k.to_string())
            .collect();
        let mut kept = KvMap::new();
        for (k, v) in extra.iter() {
            if !known.iter().any(|n| n == k) {
                kept.set(k, v);
            }
        }
        extra = kept;
        Ok(Trainer {
            model,
            adam: ckpt.adam,
            opts,
            epoch: ckpt.epoch,
            step: ckpt.step,
            cursor: ckpt.cursor,
            extra,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut config = self.extra.clone();
        config.merge(&self.model.config.to_kv());
        config.merge(&self.opts.to_kv());
        Checkpoint {
            config,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            cursor: self.cursor,
            seed: self.opts.seed,
        }
    }

    /// Learning rate used by the next step.
    pub fn next_lr(&self) -> f64 {
        self.opts.lr_scale * lr_schedule(self.step + 1, self.model.config.d_model, self.opts.warmup)
    }

    /// Forward, backward and one Adam update. State is left untouched when
    /// the step fails.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let lr = self.next_lr();
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.model.params, true);
        let mut rng = SeedStream::derive(self.opts.seed, "dropout", self.step);
        let mut ctx = ForwardCtx::training(&mut rng);
        let out = forward(&binder, &self.model.config, &batch.src, &batch.tgt_in, &mut ctx)?;
        let loss = masked_cross_entropy(out.logits, &batch.tgt_out, &batch.loss_mask)?;
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(Error::Training(format!(
                "loss became {loss_value} at step {}",
                self.step + 1
            )));
        }
        let accuracy = token_accuracy(&out.logits.value(), &batch.tgt_out, &batch.loss_mask)?;
        tape.backward(loss)?;
        let grads = binder.gradients();
        drop(binder);
        drop(tape);
        let mut params = self.model.params.clone();
        let mut adam = self.adam.clone();
        adam_step(&mut params, &grads, &mut adam, lr)?;
        self.model.params = params;
        self.adam = adam;
        self.step += 1;
        Ok(StepStats {
            loss: loss_value,
            accuracy,
            lr,
            tokens: batch.tokens(),
        })
    }

    /// Token-weighted loss and accuracy in inference mode.
    pub fn evaluate(&self, batches: &[Batch]) -> Result<(f64, f64)> {
        evaluate(&self.model, batches)
    }

    /// Batches of `pairs` for `epoch`, shuffled by a seed derived from it.
    pub fn epoch_batches(&self, pairs: &[(Vec<u32>, Vec<u32>)], epoch: u64) -> Result<Vec<Batch>> {
        let seed = subseed(self.opts.seed, "shuffle", epoch);
        Ok(make_batches_from_ids(pairs, self.opts.batch_size, self.model.config.max_len, Some(seed))?.batches)
    }

    /// Runs the remainder of the current epoch. Returns token-weighted
    /// training loss and accuracy over the batches it ran.
    pub fn run_epoch(&mut self, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<(f64, f64)> {
        let batches = self.epoch_batches(pairs, self.epoch)?;
        let (mut loss, mut acc, mut tokens) = (0.0, 0.0, 0usize);
        while (self.cursor as usize) < batches.len() {
            let s = self.train_step(&batches[self.cursor as usize])?;
            self.cursor += 1;
            loss += s.loss * s.tokens as f64;
            acc += s.accuracy * s.tokens as f64;
            tokens += s.tokens;
        }
        self.cursor = 0;
        self.epoch += 1;
        let n = tokens.max(1) as f64;
        Ok((loss / n, acc / n))
    }
}

/// Token-weighted loss and accuracy of `model` in inference mode.
pub fn evaluate(model: &Model, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut loss, mut acc, mut tokens) = (0.0, 0.0, 0usize);
    for b in batches {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &model.params, false);
        let mut rng = SeedStream::new(0);
        let mut ctx = ForwardCtx::inference(&mut rng);
        let out = forward(&binder, &model.config, &b.src, &b.tgt_in, &mut ctx)?;
        let l = masked_cross_entropy(out.logits, &b.tgt_out, &b.loss_mask)?.value().item();
        let a = token_accuracy(&out.logits.value(), &b.tgt_out, &b.loss_mask)?;
        let n = b.tokens();
        loss += l * n as f64;
        acc += a * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::data("nothing to evaluate"));
    }
    Ok((loss / tokens as f64, acc / tokens as f64))
}

/// Checkpoints kept by [`train`] and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Keyed by role: `initial`, `min_val_loss`, `min_val_loss_plus_<p>`,
    /// `best_val_acc`, `epoch_<k>`, `last`.
    pub checkpoints: IndexMap<String, Checkpoint>,
    pub log: TrainLog,
    /// Set when training stopped on a non-finite loss or gradient; `last`
    /// then holds the state before the failing step.
    pub diverged: Option<String>,
}

/// Runs `trainer.opts.epochs` epochs. Validation uses `dev` when given,
/// otherwise the training pairs, always in inference mode.
pub fn train(
    mut trainer: Trainer,
    train_pairs: &[(Vec<u32>, Vec<u32>)],
    dev_pairs: Option<&[(Vec<u32>, Vec<u32>)]>,
) -> Result<TrainOutcome> {
    let mut checkpoints = IndexMap::new();
    let mut log = TrainLog::default();
    if trainer.opts.epochs == 0 {
        checkpoints.insert("initial".to_string(), trainer.checkpoint());
        return Ok(TrainOutcome {
            checkpoints,
            log,
            diverged: None,
        });
    }
    let val_pairs = dev_pairs.unwrap_or(train_pairs);
    let val_batches =
        make_batches_from_ids(val_pairs, trainer.opts.batch_size, trainer.model.config.max_len, None)?.batches;
    let mut best_loss = (f64::INFINITY, 0u64);
    let mut best_acc = f64::NEG_INFINITY;
    let mut diverged = None;
    let patience_key = format!("min_val_loss_plus_{}", trainer.opts.patience);
    while trainer.epoch < trainer.opts.epochs {
        let before = trainer.clone();
        let (train_loss, train_acc) = match trainer.run_epoch(train_pairs) {
            Ok(v) => v,
            Err(Error::Training(msg)) => {
                diverged = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let (val_loss, val_acc) = trainer.evaluate(&val_batches)?;
        let epoch = trainer.epoch;
        log.entries.push(EpochLog {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        if !val_loss.is_finite() {
            diverged = Some(format!("validation loss became {val_loss} in epoch {epoch}"));
            trainer = before;
            break;
        }
        let snap = trainer.checkpoint();
        if val_loss < best_loss.0 {
            best_loss = (val_loss, epoch);
            checkpoints.insert("min_val_loss".to_string(), snap.clone());
        }
        if epoch == best_loss.1 + trainer.opts.patience {
            checkpoints.insert(patience_key.clone(), snap.clone());
        }
        if val_acc > best_acc {
            best_acc = val_acc;
            checkpoints.insert("best_val_acc".to_string(), snap.clone());
        }
        if let Some(k) = trainer.opts.checkpoint_every {
            if epoch % k == 0 {
                checkpoints.insert(format!("epoch_{epoch}"), snap.clone());
            }
        }
        checkpoints.insert("last".to_string(), snap);
    }
    if diverged.is_some() || !checkpoints.contains_key("last") {
        checkpoints.insert("last".to_string(), trainer.checkpoint());
    }
    Ok(TrainOutcome {
        checkpoints,
        log,
        diverged,
    })
}
