use std::cell::RefCell;
use std::sync::Arc;

use indexmap::IndexMap;

use super::config::{AttentionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    GlorotNormal,
    GlorotUniform,
    Zeros,
    Ones,
    /// Uniform in `[-0.05, 0.05]`.
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn dense(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, init: Init) {
    out.push(ParamSpec::new(format!("{prefix}.w"), &[fan_in, fan_out], init));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[fan_out], Init::Zeros));
}

fn layer_norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gain"), &[d], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros));
}

/// Parameters of one power-law head.
pub(crate) fn plga_head_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let dk = cfg.d_k();
    for u in 0..cfg.res_units {
        let unit = format!("{prefix}.res{u}");
        for j in 0..cfg.res_dense_layers {
            let fan_in = if j == 0 { dk } else { cfg.a_dff };
            dense(out, &format!("{unit}.dense{j}"), fan_in, cfg.a_dff, Init::GlorotUniform);
        }
        dense(out, &format!("{unit}.proj"), cfg.a_dff, dk, Init::GlorotUniform);
        layer_norm(out, &format!("{unit}.ln"), dk);
    }
    dense(out, &format!("{prefix}.wrap"), dk, dk, Init::GlorotUniform);
    out.push(ParamSpec::new(format!("{prefix}.coupling"), &[dk, dk], Init::GlorotUniform));
    out.push(ParamSpec::new(format!("{prefix}.coupling_bias"), &[dk, dk], Init::Zeros));
    out.push(ParamSpec::new(format!("{prefix}.power"), &[dk, dk], Init::GlorotUniform));
}

fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for p in ["q", "k", "v", "o"] {
        dense(out, &format!("{prefix}.{p}"), d, d, Init::GlorotNormal);
    }
    if cfg.attention == AttentionKind::Plga {
        for h in 0..cfg.heads {
            plga_head_specs(out, &format!("{prefix}.h{h}"), cfg);
        }
    }
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    dense(out, &format!("{prefix}.1"), cfg.d_model, cfg.dff, Init::GlorotUniform);
    dense(out, &format!("{prefix}.2"), cfg.dff, cfg.d_model, Init::GlorotUniform);
}

/// Full parameter layout in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    out.push(ParamSpec::new("enc.emb".into(), &[cfg.src_vocab, d], Init::Embedding));
    out.push(ParamSpec::new("dec.emb".into(), &[cfg.tgt_vocab, d], Init::Embedding));
    for l in 0..cfg.num_layers {
        let p = format!("enc.l{l}");
        attention_specs(&mut out, &format!("{p}.att"), cfg);
        layer_norm(&mut out, &format!("{p}.ln1"), d);
        ffn_specs(&mut out, &format!("{p}.ffn"), cfg);
        layer_norm(&mut out, &format!("{p}.ln2"), d);
    }
    for l in 0..cfg.num_layers {
        let p = format!("dec.l{l}");
        attention_specs(&mut out, &format!("{p}.self"), cfg);
        layer_norm(&mut out, &format!("{p}.ln1"), d);
        attention_specs(&mut out, &format!("{p}.cross"), cfg);
        layer_norm(&mut out, &format!("{p}.ln2"), d);
        ffn_specs(&mut out, &format!("{p}.ffn"), cfg);
        layer_norm(&mut out, &format!("{p}.ln3"), d);
    }
    dense(&mut out, "out", d, cfg.tgt_vocab, Init::GlorotUniform);
    out
}

/// Closed-form count of learnable scalars.
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    let (d, dff, h) = (cfg.d_model as u64, cfg.dff as u64, cfg.heads as u64);
    let dk = cfg.d_k() as u64;
    let (f, units, dense_layers) = (cfg.a_dff as u64, cfg.res_units as u64, cfg.res_dense_layers as u64);
    let dense = |i: u64, o: u64| i * o + o;
    let ln = |w: u64| 2 * w;

    let unit = if dense_layers == 0 {
        0
    } else {
        dense(dk, f) + (dense_layers - 1) * dense(f, f) + dense(f, dk) + ln(dk)
    };
    let head = units * unit + dense(dk, dk) + 3 * dk * dk;
    let attention = 4 * dense(d, d)
        + match cfg.attention {
            AttentionKind::Plga => h * head,
            AttentionKind::Sdpa => 0,
        };
    let ffn = dense(d, dff) + dense(dff, d);
    let enc_layer = attention + ln(d) + ffn + ln(d);
    let dec_layer = 2 * attention + 3 * ln(d) + ffn;
    let layers = cfg.num_layers as u64;
    (cfg.src_vocab as u64 + cfg.tgt_vocab as u64) * d
        + layers * (enc_layer + dec_layer)
        + dense(d, cfg.tgt_vocab as u64)
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: IndexMap<String, Arc<Tensor>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    /// Mutable access; clones the tensor if it is still shared with a tape.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn numel(&self) -> u64 {
        self.map.values().map(|t| t.len() as u64).sum()
    }

    /// Checks names and shapes against a layout.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.map.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.map.len()
            )));
        }
        for s in specs {
            let t = self
                .map
                .get(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }
}

/// Registers parameters on a tape on first use.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    params: &'p Params,
    trainable: bool,
    bound: RefCell<IndexMap<String, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    /// `trainable` decides whether bound parameters collect gradients.
    pub fn new(tape: &'t Tape, params: &'p Params, trainable: bool) -> Self {
        Binder {
            tape,
            params,
            trainable,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = Arc::clone(self.params.get(name)?);
        let v = self.tape.leaf_shared(t, self.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Dense layer parameters `(w, b)` under `prefix`.
    pub fn dense(&self, prefix: &str) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.var(&format!("{prefix}.w"))?, self.var(&format!("{prefix}.b"))?))
    }

    pub fn layer_norm(&self, prefix: &str) -> Result<(Var<'t>, Var<'t>)> {
        Ok((
            self.var(&format!("{prefix}.gain"))?,
            self.var(&format!("{prefix}.bias"))?,
        ))
    }

    /// Gradients of every parameter bound so far, after `backward`.
    pub fn gradients(&self) -> IndexMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| self.tape.grad(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}
