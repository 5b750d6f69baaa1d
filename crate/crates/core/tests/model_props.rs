mod common;

use common::*;
use plgt_core::attention::{ForwardCtx, Stage};
use plgt_core::model::{
    count_parameters, embed, ffn, forward, param_specs, positional_encoding, AttentionKind, Binder,
    Model, ModelConfig, Params, TABLE1_PLGA,
};
use plgt_core::trainkit::init_parameters;
use plgt_core::{Error, SeedStream, Tape, Tensor};

fn model(cfg: ModelConfig, seed: u64) -> Model {
    let params = init_parameters(&cfg, seed).unwrap();
    Model::new(cfg, params).unwrap()
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(6, 8).unwrap();
    for j in 0..8 {
        assert_eq!(pe.at(&[0, j]), if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    for pos in 0..6 {
        assert_eq!(pe.at(&[pos, 0]), (pos as f64).sin());
    }
    let want = (3.0 / 10000f64.powf(4.0 / 8.0)).sin();
    assert!((pe.at(&[3, 4]) - want).abs() < 1e-15);
    assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    assert!(matches!(positional_encoding(4, 7), Err(Error::Config(_))));
}

#[test]
fn embed_examples_and_gradient_scatter() {
    let cfg = ModelConfig { d_model: 8, heads: 2, ..ModelConfig::desk(6, 6) };
    let mut params = init_parameters(&cfg, 1).unwrap();
    *params.get_mut("enc.emb").unwrap() = Tensor::zeros(&[6, 8]);
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params, true);
    let mut rng = SeedStream::new(0);
    let x = embed(&binder, "enc.emb", &[vec![3, 4, 5]], &cfg, &mut ForwardCtx::inference(&mut rng)).unwrap();
    let pe = positional_encoding(3, 8).unwrap();
    assert_eq!(x.value().data(), pe.data());

    let params = init_parameters(&cfg, 2).unwrap();
    let table = params.get("enc.emb").unwrap().clone();
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params, true);
    let x = embed(&binder, "enc.emb", &[vec![4]], &cfg, &mut ForwardCtx::inference(&mut rng)).unwrap();
    for j in 0..8 {
        let want = table.at(&[4, j]) * 8f64.sqrt() + pe.at(&[0, j]);
        assert!((x.value().data()[j] - want).abs() < 1e-15);
    }

    // Gradient: ids [1, 4, 1]; rows 1 and 4 receive √d·dY, others nothing.
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params, true);
    let x = embed(&binder, "enc.emb", &[vec![1, 4, 1]], &cfg, &mut ForwardCtx::inference(&mut rng)).unwrap();
    let w = Tensor::from_fn(&[1, 3, 8], |i| (i as f64 * 0.37).sin());
    tape.backward(x.mul(tape.constant(w.clone())).unwrap().sum()).unwrap();
    let g = binder.gradients()["enc.emb"].clone();
    let s = 8f64.sqrt();
    for r in 0..6 {
        for j in 0..8 {
            let want = match r {
                1 => s * (w.at(&[0, 0, j]) + w.at(&[0, 2, j])),
                4 => s * w.at(&[0, 1, j]),
                _ => 0.0,
            };
            assert!((g.at(&[r, j]) - want).abs() < 1e-12);
        }
    }

    let tape = Tape::new();
    let binder = Binder::new(&tape, &params, true);
    let err = embed(&binder, "enc.emb", &[vec![1, 9]], &cfg, &mut ForwardCtx::inference(&mut rng)).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains('1'), "{err}");
}

#[test]
fn ffn_cases() {
    let cfg = ModelConfig { d_model: 4, heads: 2, dff: 8, ..ModelConfig::desk(5, 5) };
    let mut params = init_parameters(&cfg, 3).unwrap();
    let mut rng = SeedStream::new(4);
    let xm: Mat = rand_mat(&mut rng, 3, 4, 1.0);
    let run = |p: &Params, x: &Mat| {
        let tape = Tape::new();
        let b = Binder::new(&tape, p, false);
        to_mat(&ffn(&b, "enc.l0.ffn", tape.constant(to_tensor(x))).unwrap().value())
    };
    let got = run(&params, &xm);
    let getm = |p: &Params, n: &str| to_mat(p.get(n).unwrap());
    let getv = |p: &Params, n: &str| p.get(n).unwrap().data().to_vec();
    let h = relu(&dense(&xm, &getm(&params, "enc.l0.ffn.1.w"), &getv(&params, "enc.l0.ffn.1.b")));
    let want = dense(&h, &getm(&params, "enc.l0.ffn.2.w"), &getv(&params, "enc.l0.ffn.2.b"));
    assert!(max_abs_diff(&got, &want) < 1e-12);

    // Identity-like: W1 = [I 0], W2 = [I; 0], nonnegative input.
    *params.get_mut("enc.l0.ffn.1.w").unwrap() = Tensor::from_fn(&[4, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    *params.get_mut("enc.l0.ffn.2.w").unwrap() = Tensor::from_fn(&[8, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let pos: Mat = xm.iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
    assert!(max_abs_diff(&run(&params, &pos), &pos) < 1e-15);

    for n in ["enc.l0.ffn.1.w", "enc.l0.ffn.2.w"] {
        let s = params.get(n).unwrap().shape().to_vec();
        *params.get_mut(n).unwrap() = Tensor::zeros(&s);
    }
    assert!(run(&params, &xm).iter().flatten().all(|&v| v == 0.0));
}

struct Oracle<'a> {
    p: &'a Params,
    cfg: &'a ModelConfig,
}

impl Oracle<'_> {
    fn m(&self, n: &str) -> Mat {
        to_mat(self.p.get(n).unwrap())
    }

    fn v(&self, n: &str) -> Vec<f64> {
        self.p.get(n).unwrap().data().to_vec()
    }

    fn lin(&self, x: &Mat, prefix: &str) -> Mat {
        dense(x, &self.m(&format!("{prefix}.w")), &self.v(&format!("{prefix}.b")))
    }

    fn ln(&self, x: &Mat, prefix: &str) -> Mat {
        layer_norm(x, &self.v(&format!("{prefix}.gain")), &self.v(&format!("{prefix}.bias")), 1e-6)
    }

    fn embed(&self, table: &str, ids: &[u32]) -> Mat {
        let d = self.cfg.d_model;
        let t = self.m(table);
        (0..ids.len())
            .map(|pos| {
                (0..d)
                    .map(|j| {
                        let i = (j / 2) as f64;
                        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
                        let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                        t[ids[pos] as usize][j] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    fn head(&self, pre: &str) -> HeadParams {
        HeadParams {
            units: (0..self.cfg.res_units)
                .map(|u| UnitParams {
                    dense: (0..self.cfg.res_dense_layers)
                        .map(|j| {
                            let n = format!("{pre}.res{u}.dense{j}");
                            (self.m(&format!("{n}.w")), self.v(&format!("{n}.b")))
                        })
                        .collect(),
                    proj: (self.m(&format!("{pre}.res{u}.proj.w")), self.v(&format!("{pre}.res{u}.proj.b"))),
                    ln: (self.v(&format!("{pre}.res{u}.ln.gain")), self.v(&format!("{pre}.res{u}.ln.bias"))),
                })
                .collect(),
            wrap: (self.m(&format!("{pre}.wrap.w")), self.v(&format!("{pre}.wrap.b"))),
            a: self.m(&format!("{pre}.coupling")),
            b_a: self.m(&format!("{pre}.coupling_bias")),
            p: self.m(&format!("{pre}.power")),
        }
    }

    /// `causal`: masks future keys and restricts each query's density to
    /// query rows `0..=i`.
    fn attention(&self, prefix: &str, xq: &Mat, xkv: &Mat, causal: bool) -> Mat {
        let dk = self.cfg.d_k();
        let (q, k, v) = (
            self.lin(xq, &format!("{prefix}.q")),
            self.lin(xkv, &format!("{prefix}.k")),
            self.lin(xkv, &format!("{prefix}.v")),
        );
        let sl = |m: &Mat, h: usize| -> Mat { m.iter().map(|r| r[h * dk..(h + 1) * dk].to_vec()).collect() };
        let mask: Mat = (0..q.len())
            .map(|i| (0..k.len()).map(|j| if causal && j > i { -1e9 } else { 0.0 }).collect())
            .collect();
        let mut merged: Mat = vec![Vec::new(); q.len()];
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = (sl(&q, h), sl(&k, h), sl(&v, h));
            let out = match self.cfg.attention {
                AttentionKind::Sdpa => sdpa(&qh, &kh, &vh, Some(&mask)),
                AttentionKind::Plga => {
                    let head = self.head(&format!("{prefix}.h{h}"));
                    let mut e = Vec::new();
                    for i in 0..qh.len() {
                        let rows: Mat = if causal { qh[..=i].to_vec() } else { qh.clone() };
                        let g = ec(&metric(&density(&rows), &head), &head);
                        e.extend(localized(&qh[i..=i].to_vec(), &kh, &g, Some(&mask[i..=i].to_vec()), self.cfg.leaky_slope));
                    }
                    matmul(&e, &vh)
                }
            };
            for (row, o) in merged.iter_mut().zip(out) {
                row.extend(o);
            }
        }
        self.lin(&merged, &format!("{prefix}.o"))
    }

    fn ffn(&self, x: &Mat, prefix: &str) -> Mat {
        self.lin(&relu(&self.lin(x, &format!("{prefix}.1"))), &format!("{prefix}.2"))
    }

    fn logits(&self, src: &[u32], tgt_in: &[u32]) -> Mat {
        let mut x = self.embed("enc.emb", src);
        for l in 0..self.cfg.num_layers {
            let p = format!("enc.l{l}");
            let a = self.attention(&format!("{p}.att"), &x, &x, false);
            x = self.ln(&add(&x, &a), &format!("{p}.ln1"));
            let f = self.ffn(&x, &format!("{p}.ffn"));
            x = self.ln(&add(&x, &f), &format!("{p}.ln2"));
        }
        let mut y = self.embed("dec.emb", tgt_in);
        for l in 0..self.cfg.num_layers {
            let p = format!("dec.l{l}");
            let a = self.attention(&format!("{p}.self"), &y, &y, true);
            y = self.ln(&add(&y, &a), &format!("{p}.ln1"));
            let c = self.attention_cross(&format!("{p}.cross"), &y, &x);
            y = self.ln(&add(&y, &c), &format!("{p}.ln2"));
            let f = self.ffn(&y, &format!("{p}.ffn"));
            y = self.ln(&add(&y, &f), &format!("{p}.ln3"));
        }
        self.lin(&y, "out")
    }

    /// Cross attention: keys are unmasked; the metric of query `i` still
    /// comes from query rows `0..=i`.
    fn attention_cross(&self, prefix: &str, yq: &Mat, enc: &Mat) -> Mat {
        let dk = self.cfg.d_k();
        let (q, k, v) = (
            self.lin(yq, &format!("{prefix}.q")),
            self.lin(enc, &format!("{prefix}.k")),
            self.lin(enc, &format!("{prefix}.v")),
        );
        let sl = |m: &Mat, h: usize| -> Mat { m.iter().map(|r| r[h * dk..(h + 1) * dk].to_vec()).collect() };
        let mut merged: Mat = vec![Vec::new(); q.len()];
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = (sl(&q, h), sl(&k, h), sl(&v, h));
            let out = match self.cfg.attention {
                AttentionKind::Sdpa => sdpa(&qh, &kh, &vh, None),
                AttentionKind::Plga => {
                    let head = self.head(&format!("{prefix}.h{h}"));
                    let mut e = Vec::new();
                    for i in 0..qh.len() {
                        let g = ec(&metric(&density(&qh[..=i].to_vec()), &head), &head);
                        e.extend(localized(&qh[i..=i].to_vec(), &kh, &g, None, self.cfg.leaky_slope));
                    }
                    matmul(&e, &vh)
                }
            };
            for (row, o) in merged.iter_mut().zip(out) {
                row.extend(o);
            }
        }
        self.lin(&merged, &format!("{prefix}.o"))
    }
}

#[test]
fn full_pass_matches_stagewise_replay() {
    let mut plga2 = ModelConfig::desk(12, 11);
    plga2.num_layers = 2;
    for cfg in [ModelConfig::desk(12, 11), ModelConfig::desk_sdpa(12, 11), plga2] {
        let m = model(cfg.clone(), 5);
        let src = vec![4u32, 7, 9, 5, 11];
        let tgt = vec![1u32, 6, 8, 10];
        let got = m.logits(&[src.clone()], &[tgt.clone()]).unwrap();
        let want = Oracle { p: &m.params, cfg: &cfg }.logits(&src, &tgt);
        let diff = max_abs_diff(&to_mat(&got.index_axis0(0)), &want);
        assert!(diff < 1e-9, "{:?} layers {}: {diff}", cfg.attention, cfg.num_layers);
    }
}

#[test]
fn length_one_attention_is_trivial() {
    let m = model(ModelConfig::desk(10, 10), 6);
    let (_, recs) = m.capture(&[vec![5]], &[vec![1]]).unwrap();
    assert_eq!(recs.len(), 12);
    for r in &recs {
        assert_eq!(r.e_lm.data(), &[1.0], "{}", r.stage);
    }
}

#[test]
fn padding_tail_does_not_change_real_positions() {
    for cfg in [ModelConfig::desk(12, 12), ModelConfig::desk_sdpa(12, 12)] {
        let m = model(cfg, 7);
        let alone = m.logits(&[vec![4, 5, 6]], &[vec![1, 7, 8]]).unwrap();
        let padded = m
            .logits(&[vec![4, 5, 6, 0, 0], vec![9, 9, 9, 9, 9]], &[vec![1, 7, 8, 0], vec![1, 4, 4, 4]])
            .unwrap();
        let v = 12;
        for t in 0..3 {
            for j in 0..v {
                let a = alone.at(&[0, t, j]);
                let b = padded.at(&[0, t, j]);
                assert!((a - b).abs() < 1e-12, "t {t}: {a} vs {b}");
            }
        }
        let enc_a = m.encode(&[vec![4, 5, 6]]).unwrap().states;
        let enc_b = m.encode(&[vec![4, 5, 6, 0, 0]]).unwrap().states;
        for t in 0..3 {
            for j in 0..32 {
                assert!((enc_a.at(&[0, t, j]) - enc_b.at(&[0, t, j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn causality_probe_every_layer_count() {
    for layers in [1, 2, 3] {
        for kind in [AttentionKind::Plga, AttentionKind::Sdpa] {
            let cfg = ModelConfig { num_layers: layers, attention: kind, ..ModelConfig::desk(12, 12) };
            let cfg = if kind == AttentionKind::Sdpa {
                ModelConfig { num_layers: layers, ..ModelConfig::desk_sdpa(12, 12) }
            } else {
                cfg
            };
            let m = model(cfg, 8);
            let src = vec![vec![4, 5, 6, 7]];
            let a = m.logits(&src, &[vec![1, 4, 5, 6, 7]]).unwrap();
            let b = m.logits(&src, &[vec![1, 4, 5, 11, 9]]).unwrap();
            let v = 12;
            assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
            assert_ne!(a.data()[3 * v..4 * v], b.data()[3 * v..4 * v]);
        }
    }
}

#[test]
fn zero_output_projection_gives_uniform_scores() {
    let cfg = ModelConfig::desk(10, 9);
    let mut m = model(cfg, 9);
    *m.params.get_mut("out.w").unwrap() = Tensor::zeros(&[32, 9]);
    let l = m.logits(&[vec![4, 5]], &[vec![1, 6, 7]]).unwrap();
    assert!(l.data().iter().all(|&x| x == 0.0));
}

#[test]
fn identical_sentences_and_seeds_give_identical_logits() {
    let cfg = ModelConfig::desk(10, 10);
    let m = model(cfg.clone(), 10);
    let l = m.logits(&[vec![4, 5, 6], vec![4, 5, 6]], &[vec![1, 7], vec![1, 7]]).unwrap();
    let half = l.len() / 2;
    assert_eq!(l.data()[..half], l.data()[half..]);
    let again = model(cfg, 10).logits(&[vec![4, 5, 6], vec![4, 5, 6]], &[vec![1, 7], vec![1, 7]]).unwrap();
    assert_eq!(l, again);
}

#[test]
fn inference_consumes_no_randomness() {
    for cfg in [ModelConfig::desk(10, 10), ModelConfig::desk_sdpa(10, 10)] {
        let params = init_parameters(&cfg, 11).unwrap();
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params, false);
        let mut rng = SeedStream::new(3);
        let mut ctx = ForwardCtx::inference(&mut rng);
        ctx.capture = true;
        forward(&binder, &cfg, &[vec![4, 5, 6]], &[vec![1, 7, 8]], &mut ctx).unwrap();
        assert_eq!(rng.draws(), 0);
        let mut rng = SeedStream::new(3);
        forward(&binder, &cfg, &[vec![4, 5, 6]], &[vec![1, 7, 8]], &mut ForwardCtx::training(&mut rng)).unwrap();
        assert!(rng.draws() > 0);
    }
}

#[test]
fn table1_rows_at_desk_scale_have_logit_shape() {
    for row in (1..=6).map(Some).chain([None]) {
        let mut cfg = ModelConfig::desk(9, 13).with_table1(row).unwrap();
        cfg.d_model = 32;
        cfg.dff = 128;
        cfg.a_dff /= 16;
        cfg.validate().unwrap();
        let m = model(cfg, 12);
        let l = m.logits(&[vec![4, 5, 6], vec![7, 8, 0]], &[vec![1, 4], vec![1, 5]]).unwrap();
        assert_eq!(l.shape(), &[2, 2, 13], "row {row:?}");
        assert!(l.all_finite());
    }
}

#[test]
fn table1_parameter_counts_match_enumeration() {
    for row in (1..=6).map(Some).chain([None]) {
        let cfg = ModelConfig::desk(8000, 8000).with_table1(row).unwrap();
        assert_eq!(cfg.d_model, 512);
        let enumerated: u64 = param_specs(&cfg).iter().map(|s| s.shape.iter().product::<usize>() as u64).sum();
        assert_eq!(enumerated, count_parameters(&cfg), "row {row:?}");
    }
    let r6 = TABLE1_PLGA[5];
    assert_eq!((r6.heads, r6.a_dff, r6.res_units), (1, 2048, 1));
}

#[test]
fn captured_records_cover_every_stage_and_head() {
    let m = model(ModelConfig::desk(10, 10), 13);
    let (_, recs) = m.capture(&[vec![4, 5, 6]], &[vec![1, 7]]).unwrap();
    for stage in [Stage::Slm, Stage::Tlm, Stage::Xlm] {
        let heads: Vec<usize> = recs.iter().filter(|r| r.stage == stage).map(|r| r.head).collect();
        assert_eq!(heads, vec![0, 1, 2, 3]);
    }
    let xlm = recs.iter().find(|r| r.stage == Stage::Xlm).unwrap();
    assert_eq!(xlm.e_lm.shape(), &[2, 3]);
    assert_eq!(xlm.power_law.as_ref().unwrap().a_lm.shape(), &[8, 8]);
}
