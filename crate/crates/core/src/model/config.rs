use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Attention mechanism used by every stage of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Power-law graph attention.
    Plga,
    /// Scaled dot-product attention baseline.
    Sdpa,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Plga => "plga",
            AttentionKind::Sdpa => "sdpa",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plga" => Ok(AttentionKind::Plga),
            "sdpa" => Ok(AttentionKind::Sdpa),
            other => Err(Error::config(format!("unknown attention kind {other:?}"))),
        }
    }
}

/// Hyperparameters of the encoder-decoder.
///
/// `d_model` plays the role of both the embedding width and the language
/// model width, which are always equal.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub attention: AttentionKind,
    pub num_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub dff: usize,
    /// Width of the dense layers inside each metric residual unit.
    pub a_dff: usize,
    /// Number of stacked residual units in the metric network.
    pub res_units: usize,
    /// Number of `a_dff`-wide ReLU layers inside one residual unit.
    pub res_dense_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub dropout_outside: f64,
    pub dropout_res: f64,
    pub dropout_elm: f64,
    pub dropout_qk: f64,
    pub leaky_slope: f64,
}

/// One row of the published hyperparameter table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Table1Row {
    pub layers: usize,
    pub heads: usize,
    pub a_dff: usize,
    pub res_dense_layers: usize,
    pub res_units: usize,
    pub d_model: usize,
    pub dff: usize,
}

/// Rows #1 to #6 (power-law models).
pub const TABLE1_PLGA: [Table1Row; 6] = [
    Table1Row { layers: 1, heads: 16, a_dff: 128, res_dense_layers: 2, res_units: 10, d_model: 512, dff: 2048 },
    Table1Row { layers: 1, heads: 8, a_dff: 256, res_dense_layers: 2, res_units: 9, d_model: 512, dff: 2048 },
    Table1Row { layers: 1, heads: 8, a_dff: 256, res_dense_layers: 2, res_units: 8, d_model: 512, dff: 2048 },
    Table1Row { layers: 1, heads: 4, a_dff: 512, res_dense_layers: 2, res_units: 5, d_model: 512, dff: 2048 },
    Table1Row { layers: 1, heads: 2, a_dff: 1024, res_dense_layers: 2, res_units: 2, d_model: 512, dff: 2048 },
    Table1Row { layers: 1, heads: 1, a_dff: 2048, res_dense_layers: 2, res_units: 1, d_model: 512, dff: 2048 },
];

/// The scaled dot-product baseline row.
pub const TABLE1_SDPA: Table1Row = Table1Row {
    layers: 4,
    heads: 8,
    a_dff: 0,
    res_dense_layers: 0,
    res_units: 0,
    d_model: 512,
    dff: 2048,
};

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(200, 200)
    }
}

impl ModelConfig {
    /// Small configuration that exercises every code path on a CPU.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            attention: AttentionKind::Plga,
            num_layers: 1,
            heads: 4,
            d_model: 32,
            dff: 64,
            a_dff: 16,
            res_units: 2,
            res_dense_layers: 2,
            src_vocab,
            tgt_vocab,
            max_len: 128,
            dropout_outside: 0.4,
            dropout_res: 0.1,
            dropout_elm: 0.1,
            dropout_qk: 0.0,
            leaky_slope: 0.2,
        }
    }

    /// Desk-scale scaled dot-product baseline (4 layers, 8 heads).
    pub fn desk_sdpa(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            attention: AttentionKind::Sdpa,
            num_layers: 4,
            heads: 8,
            a_dff: 0,
            res_units: 0,
            res_dense_layers: 0,
            dropout_outside: 0.1,
            dropout_res: 0.0,
            ..Self::desk(src_vocab, tgt_vocab)
        }
    }

    /// Applies a published table row to this config. Rows are numbered 1-6;
    /// `None` selects the scaled dot-product baseline.
    pub fn with_table1(mut self, row: Option<usize>) -> Result<Self> {
        let r = match row {
            Some(n @ 1..=6) => TABLE1_PLGA[n - 1],
            Some(n) => return Err(Error::config(format!("table row {n} outside 1..=6"))),
            None => TABLE1_SDPA,
        };
        self.attention = if row.is_some() {
            AttentionKind::Plga
        } else {
            self.dropout_outside = 0.1;
            self.dropout_elm = 0.1;
            self.dropout_res = 0.0;
            AttentionKind::Sdpa
        };
        self.num_layers = r.layers;
        self.heads = r.heads;
        self.a_dff = r.a_dff;
        self.res_dense_layers = r.res_dense_layers;
        self.res_units = r.res_units;
        self.d_model = r.d_model;
        self.dff = r.dff;
        self.validate()?;
        Ok(self)
    }

    /// Per-head width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 {
            return Err(Error::config("heads and d_model must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config(format!("d_model {} must be even", self.d_model)));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return Err(Error::config("vocabulary sizes must be positive"));
        }
        if self.num_layers > 0 && self.dff == 0 {
            return Err(Error::config("dff must be positive"));
        }
        if self.attention == AttentionKind::Plga
            && self.res_units > 0
            && (self.a_dff == 0 || self.res_dense_layers == 0)
        {
            return Err(Error::config(
                "a_dff and res_dense_layers must be positive when residual units are present",
            ));
        }
        for (name, rate) in [
            ("dropout_outside", self.dropout_outside),
            ("dropout_res", self.dropout_res),
            ("dropout_elm", self.dropout_elm),
            ("dropout_qk", self.dropout_qk),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!("{name} = {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("attention", self.attention);
        m.set("num_layers", self.num_layers);
        m.set("heads", self.heads);
        m.set("d_model", self.d_model);
        m.set("dff", self.dff);
        m.set("a_dff", self.a_dff);
        m.set("res_units", self.res_units);
        m.set("res_dense_layers", self.res_dense_layers);
        m.set("src_vocab", self.src_vocab);
        m.set("tgt_vocab", self.tgt_vocab);
        m.set("max_len", self.max_len);
        m.set("dropout_outside", self.dropout_outside);
        m.set("dropout_res", self.dropout_res);
        m.set("dropout_elm", self.dropout_elm);
        m.set("dropout_qk", self.dropout_qk);
        m.set("leaky_slope", self.leaky_slope);
        m
    }

    /// Reads model keys from `kv`, keeping `self` for absent ones. Unknown
    /// keys are ignored so a full run config can be passed in.
    pub fn apply_kv(mut self, kv: &KvMap) -> Result<Self> {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.get_parsed(stringify!($field))? {
                    self.$field = v;
                })*
            };
        }
        take!(
            attention,
            num_layers,
            heads,
            d_model,
            dff,
            a_dff,
            res_units,
            res_dense_layers,
            src_vocab,
            tgt_vocab,
            max_len,
            dropout_outside,
            dropout_res,
            dropout_elm,
            dropout_qk,
            leaky_slope
        );
        self.validate()?;
        Ok(self)
    }
}
