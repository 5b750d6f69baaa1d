//! Encoder-decoder assembly.
//!
//! Post-norm layout: every sublayer output goes through dropout, is added to
//! its input and then layer-normalised.

pub mod config;
pub mod params;

pub use config::{AttentionKind, ModelConfig, Table1Row, TABLE1_PLGA, TABLE1_SDPA};
pub use params::{count_parameters, param_specs, Binder, Init, ParamSpec, Params};

use crate::attention::{
    build_masks, linear, multi_head, DeductiveRecord, ForwardCtx, Masks, Stage, StageInputs, LN_EPS,
};
use crate::error::{Error, Result};
use crate::ndgrad::{dropout, gather_rows, Tape, Tensor, Var};
use crate::rng::SeedStream;
use crate::textpipe::PAD;

/// Sinusoidal position table, `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs an even width, got {d}")));
    }
    let mut pe = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.data_mut()[pos * d + 2 * i] = angle.sin();
            pe.data_mut()[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// `table[ids]·√d + PE`, then dropout. `ids` is a padded `[B, S]` batch.
pub fn embed<'t>(
    binder: &Binder<'t, '_>,
    table: &str,
    ids: &[Vec<u32>],
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t>> {
    let b = ids.len();
    let s = ids.first().map_or(0, Vec::len);
    let flat: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
    if flat.len() != b * s || s == 0 {
        return Err(Error::data("embedding input must be a non-empty rectangular batch"));
    }
    let tab = binder.var(table)?;
    let x = gather_rows(tab, &flat, &[b, s])?.scale((cfg.d_model as f64).sqrt());
    let pe = positional_encoding(s.max(1), cfg.d_model)?;
    let x = x.add(binder.tape().constant(pe))?;
    dropout(x, cfg.dropout_outside, ctx.training, ctx.rng)
}

/// `dense(dff, ReLU) → dense(d_model)`.
pub fn ffn<'t>(binder: &Binder<'t, '_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = linear(x, binder.dense(&format!("{prefix}.1"))?)?.relu();
    linear(h, binder.dense(&format!("{prefix}.2"))?)
}

fn add_norm<'t>(
    binder: &Binder<'t, '_>,
    ln: &str,
    residual: Var<'t>,
    sublayer: Var<'t>,
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t>> {
    let s = dropout(sublayer, cfg.dropout_outside, ctx.training, ctx.rng)?;
    let (g, b) = binder.layer_norm(ln)?;
    residual.add(s)?.layer_norm(g, b, LN_EPS)
}

/// Encoder stack; returns `V_SLM` (`[B, S, d]`) and the SLM records.
pub fn encoder_forward<'t>(
    binder: &Binder<'t, '_>,
    cfg: &ModelConfig,
    src: &[Vec<u32>],
    masks: &Masks,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var<'t>, Vec<DeductiveRecord>)> {
    let mut x = embed(binder, "enc.emb", src, cfg, ctx)?;
    let mut records = Vec::new();
    for l in 0..cfg.num_layers {
        let p = format!("enc.l{l}");
        let inputs = StageInputs {
            stage: Stage::Slm,
            layer: l,
            query: x,
            key: x,
            value: x,
            mask: &masks.enc_pad,
            density: &masks.src_density,
        };
        let (att, recs) = multi_head(binder, &format!("{p}.att"), cfg, inputs, ctx)?;
        records.extend(recs);
        x = add_norm(binder, &format!("{p}.ln1"), x, att, cfg, ctx)?;
        let f = ffn(binder, &format!("{p}.ffn"), x)?;
        x = add_norm(binder, &format!("{p}.ln2"), x, f, cfg, ctx)?;
    }
    Ok((x, records))
}

/// Decoder stack over right-shifted target ids; returns the decoder output
/// (`[B, T, d]`) and the TLM/XLM records.
pub fn decoder_forward<'t>(
    binder: &Binder<'t, '_>,
    cfg: &ModelConfig,
    tgt_in: &[Vec<u32>],
    encoded: Var<'t>,
    masks: &Masks,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var<'t>, Vec<DeductiveRecord>)> {
    let mut y = embed(binder, "dec.emb", tgt_in, cfg, ctx)?;
    let mut records = Vec::new();
    for l in 0..cfg.num_layers {
        let p = format!("dec.l{l}");
        let own = StageInputs {
            stage: Stage::Tlm,
            layer: l,
            query: y,
            key: y,
            value: y,
            mask: &masks.dec_causal_pad,
            density: &masks.tgt_density,
        };
        let (att, recs) = multi_head(binder, &format!("{p}.self"), cfg, own, ctx)?;
        records.extend(recs);
        y = add_norm(binder, &format!("{p}.ln1"), y, att, cfg, ctx)?;
        let cross = StageInputs {
            stage: Stage::Xlm,
            layer: l,
            query: y,
            key: encoded,
            value: encoded,
            mask: &masks.xlm_pad,
            // Queries are target positions, so the metric stays causal.
            density: &masks.tgt_density,
        };
        let (att, recs) = multi_head(binder, &format!("{p}.cross"), cfg, cross, ctx)?;
        records.extend(recs);
        y = add_norm(binder, &format!("{p}.ln2"), y, att, cfg, ctx)?;
        let f = ffn(binder, &format!("{p}.ffn"), y)?;
        y = add_norm(binder, &format!("{p}.ln3"), y, f, cfg, ctx)?;
    }
    Ok((y, records))
}

/// Output of a full forward pass.
pub struct Forward<'t> {
    /// Unnormalised scores, `[B, T, V_tgt]`.
    pub logits: Var<'t>,
    pub records: Vec<DeductiveRecord>,
}

/// Encoder, decoder and output projection.
pub fn forward<'t>(
    binder: &Binder<'t, '_>,
    cfg: &ModelConfig,
    src: &[Vec<u32>],
    tgt_in: &[Vec<u32>],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Forward<'t>> {
    let masks = build_masks(src, tgt_in, PAD)?;
    let (encoded, mut records) = encoder_forward(binder, cfg, src, &masks, ctx)?;
    let (decoded, dec_records) = decoder_forward(binder, cfg, tgt_in, encoded, &masks, ctx)?;
    records.extend(dec_records);
    let logits = linear(decoded, binder.dense("out")?)?;
    Ok(Forward { logits, records })
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Encoder output cached for repeated decoder calls.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub src: Vec<Vec<u32>>,
    pub states: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_layout(&param_specs(&config))?;
        Ok(Model { config, params })
    }

    /// Inference-mode logits `[B, T, V_tgt]`.
    pub fn logits(&self, src: &[Vec<u32>], tgt_in: &[Vec<u32>]) -> Result<Tensor> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params, false);
        let mut rng = SeedStream::new(0);
        let mut ctx = ForwardCtx::inference(&mut rng);
        let out = forward(&binder, &self.config, src, tgt_in, &mut ctx)?;
        Ok((*out.logits.value()).clone())
    }

    /// Inference-mode forward that also returns the deductive records.
    pub fn capture(
        &self,
        src: &[Vec<u32>],
        tgt_in: &[Vec<u32>],
    ) -> Result<(Tensor, Vec<DeductiveRecord>)> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params, false);
        let mut rng = SeedStream::new(0);
        let mut ctx = ForwardCtx::inference(&mut rng);
        ctx.capture = true;
        let out = forward(&binder, &self.config, src, tgt_in, &mut ctx)?;
        Ok(((*out.logits.value()).clone(), out.records))
    }

    pub fn encode(&self, src: &[Vec<u32>]) -> Result<EncodedSource> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params, false);
        let mut rng = SeedStream::new(0);
        let mut ctx = ForwardCtx::inference(&mut rng);
        let dummy: Vec<Vec<u32>> = src.iter().map(|_| vec![crate::textpipe::START]).collect();
        let masks = build_masks(src, &dummy, PAD)?;
        let (enc, _) = encoder_forward(&binder, &self.config, src, &masks, &mut ctx)?;
        Ok(EncodedSource {
            src: src.to_vec(),
            states: (*enc.value()).clone(),
        })
    }

    /// Decoder logits for target prefixes against a cached encoding.
    pub fn decode_logits(&self, encoded: &EncodedSource, tgt_in: &[Vec<u32>]) -> Result<Tensor> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params, false);
        let mut rng = SeedStream::new(0);
        let mut ctx = ForwardCtx::inference(&mut rng);
        let (src, states) = if tgt_in.len() == encoded.src.len() {
            (encoded.src.clone(), encoded.states.clone())
        } else if encoded.src.len() == 1 {
            // Broadcast a single sentence over several hypotheses.
            let n = tgt_in.len();
            let one = &encoded.states;
            let mut data = Vec::with_capacity(one.len() * n);
            for _ in 0..n {
                data.extend_from_slice(one.data());
            }
            let mut shape = one.shape().to_vec();
            shape[0] = n;
            (vec![encoded.src[0].clone(); n], Tensor::new(&shape, data)?)
        } else {
            return Err(Error::data("target batch does not match encoded source batch"));
        };
        let masks = build_masks(&src, tgt_in, PAD)?;
        let enc = tape.constant(states);
        let (dec, _) = decoder_forward(&binder, &self.config, tgt_in, enc, &masks, &mut ctx)?;
        let logits = linear(dec, binder.dense("out")?)?;
        Ok((*logits.value()).clone())
    }
}
