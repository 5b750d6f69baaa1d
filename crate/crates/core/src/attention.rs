//! Power-law graph attention and the scaled dot-product baseline.
//!
//! A power-law head runs three stages:
//!
//! 1. **Metric tensor.** The density operator `D = QᵀQ` (a `d_k×d_k`
//!    statistic of the query sequence) goes through a stack of residual units
//!    and a positivity wrap, `A_LM = ReLU(A·W + b_W) + ε`.
//! 2. **Energy-curvature tensor.** `G_LM = a ⊙ A_LM^{⊙P} + b_a`, all
//!    elementwise, with learnable `a`, `b_a` and `P`.
//! 3. **Localized operator.** `E_LM = softmax(mask(LeakyReLU(Q·G_LM·Kᵀ/√d_k)))`
//!    and the head output is `E_LM·V`.
//!
//! Densities only sum over non-padding query rows. On the decoder side each
//! query position `t` gets its own density built from rows `0..=t`, so no
//! position can see later target tokens through the metric tensor.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::config::{AttentionKind, ModelConfig};
use crate::model::params::Binder;
use crate::ndgrad::{concat_last, dropout, Tape, Tensor, Var};
use crate::rng::SeedStream;

/// Floor added after the positivity wrap.
pub const METRIC_EPS: f64 = 1e-9;
/// Additive mask value for ignored keys.
pub const MASK_VALUE: f64 = -1e9;
/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Which attention stage a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Encoder self-attention (source language model).
    Slm,
    /// Decoder self-attention (target language model).
    Tlm,
    /// Decoder cross-attention (cross-language model).
    Xlm,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Slm => "SLM",
            Stage::Tlm => "TLM",
            Stage::Xlm => "XLM",
        })
    }
}

/// Per-pass state shared by all layers.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub rng: &'r mut SeedStream,
    /// Collect [`DeductiveRecord`]s while running.
    pub capture: bool,
}

impl<'r> ForwardCtx<'r> {
    pub fn inference(rng: &'r mut SeedStream) -> Self {
        ForwardCtx {
            training: false,
            rng,
            capture: false,
        }
    }

    pub fn training(rng: &'r mut SeedStream) -> Self {
        ForwardCtx {
            training: true,
            rng,
            capture: false,
        }
    }
}

/// Tensors of one power-law head that are only defined for PLGA.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawSnapshot {
    pub a_lm: Tensor,
    pub g_lm: Tensor,
    pub power: Tensor,
    pub coupling: Tensor,
    pub coupling_bias: Tensor,
}

/// Deductive outputs of one head for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DeductiveRecord {
    pub stage: Stage,
    pub layer: usize,
    pub head: usize,
    pub batch_index: usize,
    /// Attention weights before dropout, `S_q × S_k`.
    pub e_lm: Tensor,
    /// `None` for scaled dot-product heads.
    pub power_law: Option<PowerLawSnapshot>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

/// Parameters of one metric residual unit.
#[derive(Debug, Clone)]
pub struct ResidualUnitVars<'t> {
    pub dense: Vec<(Var<'t>, Var<'t>)>,
    pub proj: (Var<'t>, Var<'t>),
    pub ln: (Var<'t>, Var<'t>),
}

/// Parameters of one power-law head.
#[derive(Debug, Clone)]
pub struct PlgaHeadVars<'t> {
    pub units: Vec<ResidualUnitVars<'t>>,
    /// `(W, b_W)` of the positivity wrap.
    pub wrap: (Var<'t>, Var<'t>),
    /// `a`
    pub coupling: Var<'t>,
    /// `b_a`
    pub coupling_bias: Var<'t>,
    /// `P`
    pub power: Var<'t>,
}

impl<'t> PlgaHeadVars<'t> {
    pub fn bind(binder: &Binder<'t, '_>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let units = (0..cfg.res_units)
            .map(|u| {
                let unit = format!("{prefix}.res{u}");
                Ok(ResidualUnitVars {
                    dense: (0..cfg.res_dense_layers)
                        .map(|j| binder.dense(&format!("{unit}.dense{j}")))
                        .collect::<Result<_>>()?,
                    proj: binder.dense(&format!("{unit}.proj"))?,
                    ln: binder.layer_norm(&format!("{unit}.ln"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PlgaHeadVars {
            units,
            wrap: binder.dense(&format!("{prefix}.wrap"))?,
            coupling: binder.var(&format!("{prefix}.coupling"))?,
            coupling_bias: binder.var(&format!("{prefix}.coupling_bias"))?,
            power: binder.var(&format!("{prefix}.power"))?,
        })
    }
}

/// Dense layer along the trailing axis.
pub fn linear<'t>(x: Var<'t>, (w, b): (Var<'t>, Var<'t>)) -> Result<Var<'t>> {
    x.matmul(w)?.add(b)
}

/// `QᵀQ` over the sequence axis.
pub fn density_operator(q: Var<'_>) -> Result<Var<'_>> {
    if q.shape().len() < 2 {
        return Err(Error::shape("density_operator", &q.shape(), &[]));
    }
    q.transpose()?.matmul(q)
}

/// Weighted densities `D_n = Σ_s w[n,s]·q_s q_sᵀ` for a batch.
///
/// `q` is `[B, S, d]` and `weights` is `[B, N, S]`; the result is
/// `[B, N, d, d]`.
pub fn weighted_density<'t>(q: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let qs = q.shape();
    let ws = weights.shape();
    if qs.len() != 3 || ws.len() != 3 || ws[0] != qs[0] || ws[2] != qs[1] {
        return Err(Error::shape("weighted_density", &qs, ws));
    }
    let (b, s, d) = (qs[0], qs[1], qs[2]);
    let n = ws[1];
    let col = q.reshape(&[b * s, d, 1])?;
    let row = q.reshape(&[b * s, 1, d])?;
    let outer = col.matmul(row)?.reshape(&[b, s, d * d])?;
    let w = q.tape().constant(weights.clone());
    w.matmul(outer)?.reshape(&[b, n, d, d])
}

/// Residual metric network followed by the positivity wrap.
///
/// Each unit runs `dense → ReLU` per configured layer, a linear projection
/// back to `d_k`, dropout, the residual add and layer normalisation. Rows of
/// the density are treated as feature vectors.
pub fn metric_tensor<'t>(
    density: Var<'t>,
    head: &PlgaHeadVars<'t>,
    dropout_res: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t>> {
    let mut a = density;
    for unit in &head.units {
        let mut x = a;
        for &layer in &unit.dense {
            x = linear(x, layer)?.relu();
        }
        x = linear(x, unit.proj)?;
        x = dropout(x, dropout_res, ctx.training, ctx.rng)?;
        a = a.add(x)?.layer_norm(unit.ln.0, unit.ln.1, LN_EPS)?;
    }
    Ok(linear(a, head.wrap)?.relu().add_scalar(METRIC_EPS))
}

/// `a ⊙ A_LM^{⊙P} + b_a`.
pub fn ec_tensor<'t>(
    a_lm: Var<'t>,
    coupling: Var<'t>,
    coupling_bias: Var<'t>,
    power: Var<'t>,
) -> Result<Var<'t>> {
    a_lm.elem_pow(power)?.mul(coupling)?.add(coupling_bias)
}

/// `softmax(mask(LeakyReLU(Q·G·Kᵀ/√d_k)))`.
///
/// `g` is either shared by all queries (`[.., d, d]` with the batch rank of
/// `q`) or per query (`[B, S_q, d, d]` for `q` of shape `[B, S_q, d]`).
pub fn localized_operator<'t>(
    q: Var<'t>,
    k: Var<'t>,
    g: Var<'t>,
    mask: Option<&Tensor>,
    slope: f64,
) -> Result<Var<'t>> {
    let qs = q.shape();
    let dk = *qs.last().unwrap();
    let qg = if g.shape().len() == qs.len() + 1 {
        let mut row_shape = qs.clone();
        row_shape.insert(qs.len() - 1, 1);
        q.reshape(&row_shape)?.matmul(g)?.reshape(&qs)?
    } else {
        q.matmul(g)?
    };
    let scores = qg.matmul(k.transpose()?)?.scale(1.0 / (dk as f64).sqrt());
    let mut e = scores.leaky_relu(slope);
    if let Some(m) = mask {
        e = e.add(q.tape().constant(m.clone()))?;
    }
    Ok(e.softmax_lastdim())
}

/// Values produced by one power-law head.
#[derive(Debug, Clone, Copy)]
pub struct PlgaHeadOutput<'t> {
    pub v_lm: Var<'t>,
    pub e_lm: Var<'t>,
    pub a_lm: Var<'t>,
    pub g_lm: Var<'t>,
}

/// Knobs of a single head, taken from [`ModelConfig`].
#[derive(Debug, Clone, Copy)]
pub struct HeadSettings {
    pub dropout_res: f64,
    pub dropout_elm: f64,
    pub dropout_qk: f64,
    pub leaky_slope: f64,
}

impl From<&ModelConfig> for HeadSettings {
    fn from(c: &ModelConfig) -> Self {
        HeadSettings {
            dropout_res: c.dropout_res,
            dropout_elm: c.dropout_elm,
            dropout_qk: c.dropout_qk,
            leaky_slope: c.leaky_slope,
        }
    }
}

/// One power-law head on already projected `q`, `k`, `v`.
///
/// With `density_weights = None` the density is the plain `QᵀQ` of `q`
/// (any batch rank). Otherwise `q` is `[B, S_q, d_k]` and the weights are
/// `[B, N, S_q]`: `N = 1` gives one shared metric per sentence, `N = S_q`
/// gives one metric per query position.
pub fn plga_head_forward<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    head: &PlgaHeadVars<'t>,
    density_weights: Option<&Tensor>,
    mask: Option<&Tensor>,
    settings: HeadSettings,
    ctx: &mut ForwardCtx<'_>,
) -> Result<PlgaHeadOutput<'t>> {
    let q = dropout(q, settings.dropout_qk, ctx.training, ctx.rng)?;
    let k = dropout(k, settings.dropout_qk, ctx.training, ctx.rng)?;
    let density = match density_weights {
        None => density_operator(q)?,
        Some(w) => {
            let d = weighted_density(q, w)?;
            let ds = d.shape();
            if ds[1] == 1 {
                d.reshape(&[ds[0], ds[2], ds[3]])?
            } else {
                d
            }
        }
    };
    let a_lm = metric_tensor(density, head, settings.dropout_res, ctx)?;
    let g_lm = ec_tensor(a_lm, head.coupling, head.coupling_bias, head.power)?;
    let e_lm = localized_operator(q, k, g_lm, mask, settings.leaky_slope)?;
    let weights = dropout(e_lm, settings.dropout_elm, ctx.training, ctx.rng)?;
    Ok(PlgaHeadOutput {
        v_lm: weights.matmul(v)?,
        e_lm,
        a_lm,
        g_lm,
    })
}

/// `softmax(Q·Kᵀ/√d_k + mask)·V`; returns the output and the weights.
pub fn sdpa_head_forward<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<&Tensor>,
    dropout_rate: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let dk = *q.shape().last().unwrap();
    let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(q.tape().constant(m.clone()))?;
    }
    let weights = scores.softmax_lastdim();
    let dropped = dropout(weights, dropout_rate, ctx.training, ctx.rng)?;
    Ok((dropped.matmul(v)?, weights))
}

/// Where the inputs of one attention stage come from.
pub struct StageInputs<'a, 't> {
    pub stage: Stage,
    pub layer: usize,
    pub query: Var<'t>,
    pub key: Var<'t>,
    pub value: Var<'t>,
    /// Additive mask `[B, S_q, S_k]`.
    pub mask: &'a Tensor,
    /// Density weights `[B, N, S_q]` for power-law heads.
    pub density: &'a Tensor,
}

/// Multi-head attention: project, split into heads, attend, merge, project.
pub fn multi_head<'t>(
    binder: &Binder<'t, '_>,
    prefix: &str,
    cfg: &ModelConfig,
    inputs: StageInputs<'_, 't>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var<'t>, Vec<DeductiveRecord>)> {
    cfg.validate()?;
    let dk = cfg.d_k();
    let q = linear(inputs.query, binder.dense(&format!("{prefix}.q"))?)?;
    let k = linear(inputs.key, binder.dense(&format!("{prefix}.k"))?)?;
    let v = linear(inputs.value, binder.dense(&format!("{prefix}.v"))?)?;
    let settings = HeadSettings::from(cfg);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut records = Vec::new();
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (
            q.slice_last(h * dk, dk)?,
            k.slice_last(h * dk, dk)?,
            v.slice_last(h * dk, dk)?,
        );
        match cfg.attention {
            AttentionKind::Plga => {
                let vars = PlgaHeadVars::bind(binder, &format!("{prefix}.h{h}"), cfg)?;
                let out = plga_head_forward(
                    qh,
                    kh,
                    vh,
                    &vars,
                    Some(inputs.density),
                    Some(inputs.mask),
                    settings,
                    ctx,
                )?;
                if ctx.capture {
                    records.extend(snapshot_records(&inputs, h, &out, &vars));
                }
                heads.push(out.v_lm);
            }
            AttentionKind::Sdpa => {
                let (out, weights) =
                    sdpa_head_forward(qh, kh, vh, Some(inputs.mask), cfg.dropout_elm, ctx)?;
                if ctx.capture {
                    let w = weights.value();
                    for b in 0..w.shape()[0] {
                        records.push(DeductiveRecord {
                            stage: inputs.stage,
                            layer: inputs.layer,
                            head: h,
                            batch_index: b,
                            e_lm: w.index_axis0(b),
                            power_law: None,
                            row_labels: Vec::new(),
                            col_labels: Vec::new(),
                        });
                    }
                }
                heads.push(out);
            }
        }
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        concat_last(&heads)?
    };
    Ok((linear(merged, binder.dense(&format!("{prefix}.o"))?)?, records))
}

fn snapshot_records(
    inputs: &StageInputs<'_, '_>,
    head: usize,
    out: &PlgaHeadOutput<'_>,
    vars: &PlgaHeadVars<'_>,
) -> Vec<DeductiveRecord> {
    let e = out.e_lm.value();
    let (a, g) = (out.a_lm.value(), out.g_lm.value());
    let batch = e.shape()[0];
    // The last per-query density covers every non-padding row of the sentence.
    let pick = |t: &Arc<Tensor>, b: usize| -> Tensor {
        let tb = t.index_axis0(b);
        if tb.rank() == 3 {
            tb.index_axis0(tb.shape()[0] - 1)
        } else {
            tb
        }
    };
    (0..batch)
        .map(|b| DeductiveRecord {
            stage: inputs.stage,
            layer: inputs.layer,
            head,
            batch_index: b,
            e_lm: e.index_axis0(b),
            power_law: Some(PowerLawSnapshot {
                a_lm: pick(&a, b),
                g_lm: pick(&g, b),
                power: (*vars.power.value()).clone(),
                coupling: (*vars.coupling.value()).clone(),
                coupling_bias: (*vars.coupling_bias.value()).clone(),
            }),
            row_labels: Vec::new(),
            col_labels: Vec::new(),
        })
        .collect()
}

/// Additive masks and density weights for one padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    /// Encoder self-attention, `[B, S, S]`: padding key columns.
    pub enc_pad: Tensor,
    /// Decoder self-attention, `[B, T, T]`: future positions and padding keys.
    pub dec_causal_pad: Tensor,
    /// Cross-attention, `[B, T, S]`: source padding columns.
    pub xlm_pad: Tensor,
    /// `[B, 1, S]`: 1 on source tokens, 0 on padding.
    pub src_density: Tensor,
    /// `[B, T, T]`: row `t` weights target rows `0..=t` that are not padding.
    pub tgt_density: Tensor,
}

fn rectangular<T: Copy>(rows: &[Vec<T>], what: &str) -> Result<usize> {
    let first = rows
        .first()
        .ok_or_else(|| Error::data(format!("empty {what} batch")))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::data(format!("empty {what} sequence")));
    }
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::data(format!("{what} rows are not padded to one length")));
    }
    Ok(len)
}

/// Builds every mask for a padded batch of source and right-shifted target ids.
pub fn build_masks(src: &[Vec<u32>], tgt: &[Vec<u32>], pad: u32) -> Result<Masks> {
    let s = rectangular(src, "source")?;
    let t = rectangular(tgt, "target")?;
    if src.len() != tgt.len() {
        return Err(Error::data("source and target batch sizes differ"));
    }
    let b = src.len();
    let mut enc = Tensor::zeros(&[b, s, s]);
    let mut dec = Tensor::zeros(&[b, t, t]);
    let mut xlm = Tensor::zeros(&[b, t, s]);
    let mut src_density = Tensor::zeros(&[b, 1, s]);
    let mut tgt_density = Tensor::zeros(&[b, t, t]);
    for bi in 0..b {
        for (j, &id) in src[bi].iter().enumerate() {
            let masked = id == pad;
            src_density.data_mut()[bi * s + j] = if masked { 0.0 } else { 1.0 };
            if masked {
                for i in 0..s {
                    enc.data_mut()[(bi * s + i) * s + j] = MASK_VALUE;
                }
                for i in 0..t {
                    xlm.data_mut()[(bi * t + i) * s + j] = MASK_VALUE;
                }
            }
        }
        for i in 0..t {
            for j in 0..t {
                let off = (bi * t + i) * t + j;
                let key_pad = tgt[bi][j] == pad;
                if j > i || key_pad {
                    dec.data_mut()[off] = MASK_VALUE;
                }
                if j <= i && !key_pad {
                    tgt_density.data_mut()[off] = 1.0;
                }
            }
        }
    }
    Ok(Masks {
        enc_pad: enc,
        dec_causal_pad: dec,
        xlm_pad: xlm,
        src_density,
        tgt_density,
    })
}

/// Leaves of a stand-alone head, for tests and tools that build heads by hand.
pub fn head_from_tensors<'t>(
    tape: &'t Tape,
    units: &[(Vec<(Tensor, Tensor)>, (Tensor, Tensor), (Tensor, Tensor))],
    wrap: (Tensor, Tensor),
    coupling: Tensor,
    coupling_bias: Tensor,
    power: Tensor,
) -> PlgaHeadVars<'t> {
    let pair = |(w, b): &(Tensor, Tensor)| (tape.leaf(w.clone()), tape.leaf(b.clone()));
    PlgaHeadVars {
        units: units
            .iter()
            .map(|(dense, proj, ln)| ResidualUnitVars {
                dense: dense.iter().map(pair).collect(),
                proj: pair(proj),
                ln: pair(ln),
            })
            .collect(),
        wrap: pair(&wrap),
        coupling: tape.leaf(coupling),
        coupling_bias: tape.leaf(coupling_bias),
        power: tape.leaf(power),
    }
}
