//! Run configuration: model and training settings plus the vocabulary,
//! normalisation and decoding keys the commands need.

use std::path::{Path, PathBuf};

use plgt_core::decode::DEFAULT_ALPHA;
use plgt_core::kv::KvMap;
use plgt_core::model::{AttentionKind, ModelConfig};
use plgt_core::textpipe::Normalization;
use plgt_core::trainkit::{Checkpoint, TrainOptions};

use crate::fail::{io_ctx, CmdResult, Failure};

pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Keys that are neither model nor training-loop settings.
const RUN_KEYS: &[&str] = &[
    "vocab_cap",
    "min_freq",
    "lowercase",
    "nfc",
    "beam_width",
    "alpha",
    "data",
    "src_vocab_file",
    "tgt_vocab_file",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub vocab_cap: usize,
    pub min_freq: usize,
    pub normalization: Normalization,
    pub beam_width: usize,
    pub alpha: f64,
}

/// Which published row to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableRow {
    Plga(usize),
    Sdpa,
}

impl std::str::FromStr for TableRow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("sdpa") {
            return Ok(TableRow::Sdpa);
        }
        match s.parse::<usize>() {
            Ok(n @ 1..=6) => Ok(TableRow::Plga(n)),
            _ => Err(format!("expected a row number 1-6 or `sdpa`, got {s:?}")),
        }
    }
}

pub fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = ModelConfig::default().to_kv().iter().map(|(k, _)| k.to_string()).collect();
    keys.extend(TrainOptions::default().to_kv().iter().map(|(k, _)| k.to_string()));
    keys.extend(RUN_KEYS.iter().map(|k| k.to_string()));
    keys
}

fn check_keys(kv: &KvMap, origin: &str) -> CmdResult {
    let known = known_keys();
    for (k, _) in kv.iter() {
        if !known.iter().any(|n| n == k) {
            return Err(Failure::usage(format!("unknown config key `{k}` in {origin}")));
        }
    }
    Ok(())
}

pub fn read_config_file(path: &Path) -> CmdResult<KvMap> {
    let text = io_ctx(std::fs::read_to_string(path), "read config", path)?;
    let kv = KvMap::parse(&text)?;
    check_keys(&kv, &path.display().to_string())?;
    Ok(kv)
}

/// Parses repeated `key=value` overrides.
pub fn parse_overrides(items: &[String]) -> CmdResult<KvMap> {
    let mut kv = KvMap::new();
    for item in items {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("expected key=value, got {item:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    check_keys(&kv, "--set")?;
    Ok(kv)
}

impl RunConfig {
    /// Layers, lowest precedence first: desk defaults for the chosen
    /// attention kind, the config file, the table row, then flag overrides.
    pub fn resolve(file: &KvMap, row: Option<TableRow>, flags: &KvMap) -> CmdResult<Self> {
        let kind_of = |kv: &KvMap| kv.get_parsed::<AttentionKind>("attention");
        let mut kind = kind_of(flags)?.or(kind_of(file)?).unwrap_or(AttentionKind::Plga);
        match (row, kind_of(flags)?) {
            (Some(TableRow::Plga(n)), Some(AttentionKind::Sdpa)) => {
                return Err(Failure::usage(format!("table row {n} is a power-law row but attention is sdpa")))
            }
            (Some(TableRow::Sdpa), Some(AttentionKind::Plga)) => {
                return Err(Failure::usage("table row sdpa conflicts with attention plga"))
            }
            (Some(TableRow::Sdpa), _) => kind = AttentionKind::Sdpa,
            (Some(TableRow::Plga(_)), _) => kind = AttentionKind::Plga,
            _ => {}
        }
        // Vocabulary sizes are placeholders until the vocabularies are known.
        let base = match kind {
            AttentionKind::Plga => ModelConfig::desk(8, 8),
            AttentionKind::Sdpa => ModelConfig::desk_sdpa(8, 8),
        };
        let mut file = file.clone();
        file.set("attention", kind);
        let mut model = apply_model(base, &file)?;
        model = match row {
            Some(TableRow::Plga(n)) => model.with_table1(Some(n))?,
            Some(TableRow::Sdpa) => model.with_table1(None)?,
            None => model,
        };
        model = apply_model(model, flags)?;
        let mut merged = file.clone();
        merged.merge(flags);
        let train = TrainOptions::default().apply_kv(&merged)?;
        let mut cfg = RunConfig {
            model,
            train,
            vocab_cap: 8000,
            min_freq: 2,
            normalization: Normalization::default(),
            beam_width: 4,
            alpha: DEFAULT_ALPHA,
        };
        cfg.apply_run_keys(&merged)?;
        Ok(cfg)
    }

    fn apply_run_keys(&mut self, kv: &KvMap) -> CmdResult {
        if let Some(v) = kv.get_parsed("vocab_cap")? {
            self.vocab_cap = v;
        }
        if let Some(v) = kv.get_parsed("min_freq")? {
            self.min_freq = v;
        }
        if let Some(v) = kv.get_parsed("lowercase")? {
            self.normalization.lowercase = v;
        }
        if let Some(v) = kv.get_parsed("nfc")? {
            self.normalization.nfc = v;
        }
        if let Some(v) = kv.get_parsed("beam_width")? {
            self.beam_width = v;
        }
        if let Some(v) = kv.get_parsed("alpha")? {
            self.alpha = v;
        }
        if self.beam_width == 0 {
            return Err(Failure::usage("beam_width must be at least 1"));
        }
        Ok(())
    }

    /// Keys carried next to the model and training settings in checkpoints.
    pub fn run_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("vocab_cap", self.vocab_cap);
        kv.set("min_freq", self.min_freq);
        kv.set("lowercase", self.normalization.lowercase);
        kv.set("nfc", self.normalization.nfc);
        kv.set("beam_width", self.beam_width);
        kv.set("alpha", self.alpha);
        kv
    }

    /// Everything, in the order written to checkpoints.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv.merge(&self.run_kv());
        kv
    }
}

fn apply_model(cfg: ModelConfig, kv: &KvMap) -> CmdResult<ModelConfig> {
    Ok(cfg.apply_kv(kv)?)
}

/// Normalisation and decoding settings echoed in a checkpoint.
pub fn echo_settings(ckpt: &Checkpoint) -> CmdResult<(Normalization, usize, f64)> {
    let mut cfg = RunConfig {
        model: ckpt.model_config()?,
        train: TrainOptions::default(),
        vocab_cap: 0,
        min_freq: 0,
        normalization: Normalization::default(),
        beam_width: 4,
        alpha: DEFAULT_ALPHA,
    };
    cfg.apply_run_keys(&ckpt.config)?;
    Ok((cfg.normalization, cfg.beam_width, cfg.alpha))
}

/// Vocabulary file named by the echo key, relative paths resolved against
/// the checkpoint's directory; falls back to the conventional file name
/// next to the checkpoint.
pub fn vocab_path(ckpt: &Checkpoint, ckpt_path: &Path, key: &str, fallback: &str) -> PathBuf {
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    if let Some(p) = ckpt.config.get(key) {
        let p = Path::new(p);
        let p = if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
        if p.exists() {
            return p;
        }
    }
    dir.join(fallback)
}
