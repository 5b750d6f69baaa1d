use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use plgt_core::decode::{corpus_bleu, BleuReport, DecodeOptions, Translator, MAX_EXTRA};
use plgt_core::inspect::{capture, export_records, Colormap, HeatmapStyle};
use plgt_core::kv::KvMap;
use plgt_core::model::count_parameters;
use plgt_core::textpipe::{encode_corpus, Normalization, ParallelCorpus, Side, Split, Vocabulary};
use plgt_core::trainkit::{self, Checkpoint, TrainLog, Trainer};

use crate::fail::{io_ctx, CmdResult, Failure};
use crate::run_config::{
    echo_settings, parse_overrides, read_config_file, vocab_path, RunConfig, SRC_VOCAB_FILE, TGT_VOCAB_FILE,
    TRAIN_LOG_FILE,
};
use crate::{BuildVocabArgs, CompareArgs, EvaluateArgs, InspectArgs, TrainArgs, TranslateArgs};

pub fn build_vocab(a: &BuildVocabArgs) -> CmdResult {
    let side: Side = a.side.parse().map_err(|e: plgt_core::Error| Failure::usage(e.to_string()))?;
    let norm = Normalization {
        lowercase: a.lowercase,
        ..Normalization::default()
    };
    let corpus = ParallelCorpus::load(&a.corpus, Split::Train, norm)?;
    let vocab = Vocabulary::train(&corpus.side(side), a.cap, a.min_freq)?;
    vocab.save(&a.out)?;
    println!("wrote {} entries to {}", vocab.len(), a.out.display());
    Ok(())
}

fn flag_kv(a: &TrainArgs) -> CmdResult<KvMap> {
    let mut kv = KvMap::new();
    if let Some(v) = &a.attention {
        kv.set("attention", v);
    }
    macro_rules! opt {
        ($($f:ident),*) => {
            $(if let Some(v) = a.$f {
                kv.set(stringify!($f), v);
            })*
        };
    }
    opt!(seed, epochs, batch_size, warmup, lr_scale, checkpoint_every);
    kv.merge(&parse_overrides(&a.overrides)?);
    Ok(kv)
}

fn load_vocab(path: &Path) -> CmdResult<Vocabulary> {
    Vocabulary::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let flags = flag_kv(a)?;
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut run = match &resumed {
        Some(ckpt) => {
            let mut echo = ckpt.config.clone();
            if let Some(e) = a.epochs {
                echo.set("epochs", e);
            }
            RunConfig::resolve(&echo, None, &KvMap::new())?
        }
        None => {
            let file = match &a.config {
                Some(p) => read_config_file(p)?,
                None => KvMap::new(),
            };
            RunConfig::resolve(&file, a.table1_row, &flags)?
        }
    };
    if a.dry_run {
        let mut text = String::new();
        for (k, v) in run.to_kv().iter() {
            if k != "src_vocab" && k != "tgt_vocab" {
                let _ = writeln!(text, "{k} = {v}");
            }
        }
        let _ = std::io::stdout().write_all(text.as_bytes());
        return Ok(());
    }

    let train_path = a.data.join("train.tsv");
    if !train_path.is_file() {
        return Err(Failure::data(format!("missing training data {}", train_path.display())));
    }
    let corpus = ParallelCorpus::load(&train_path, Split::Train, run.normalization)?;
    if corpus.is_empty() {
        return Err(Failure::data(format!("{} holds no sentence pairs", train_path.display())));
    }
    let dev_path = a.data.join("dev.tsv");
    let dev = if dev_path.is_file() {
        Some(ParallelCorpus::load(&dev_path, Split::Dev, run.normalization)?)
    } else {
        None
    };

    let (src_vocab, tgt_vocab) = match (&resumed, &a.resume) {
        (Some(ckpt), Some(p)) => (
            load_vocab(&vocab_path(ckpt, p, "src_vocab_file", SRC_VOCAB_FILE))?,
            load_vocab(&vocab_path(ckpt, p, "tgt_vocab_file", TGT_VOCAB_FILE))?,
        ),
        _ => {
            let learn = |given: &Option<PathBuf>, side| -> CmdResult<Vocabulary> {
                match given {
                    Some(p) => load_vocab(p),
                    None => Ok(Vocabulary::train(&corpus.side(side), run.vocab_cap, run.min_freq)?),
                }
            };
            (learn(&a.src_vocab, Side::Source)?, learn(&a.tgt_vocab, Side::Target)?)
        }
    };
    io_ctx(fs::create_dir_all(&a.out), "create", &a.out)?;
    src_vocab.save(&a.out.join(SRC_VOCAB_FILE))?;
    tgt_vocab.save(&a.out.join(TGT_VOCAB_FILE))?;
    run.model.src_vocab = src_vocab.len();
    run.model.tgt_vocab = tgt_vocab.len();
    run.model.validate()?;

    let pairs = encode_corpus(&corpus, &src_vocab, &tgt_vocab);
    let dev_pairs = dev.as_ref().map(|d| encode_corpus(d, &src_vocab, &tgt_vocab));
    let max = run.model.max_len;
    let too_long = pairs.iter().filter(|(s, t)| s.len() > max || t.len() + 1 > max).count();
    if too_long > 0 {
        eprintln!("plgt: skipping {too_long} training pairs longer than {max} tokens");
    }

    let trainer = match resumed {
        Some(ckpt) => {
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.opts.epochs = run.train.epochs;
            t
        }
        None => {
            let mut t = Trainer::new(run.model.clone(), run.train.clone())?;
            t.extra = run.run_kv();
            let data = fs::canonicalize(&a.data).unwrap_or_else(|_| a.data.clone());
            t.extra.set("data", data.display());
            t.extra.set("src_vocab_file", SRC_VOCAB_FILE);
            t.extra.set("tgt_vocab_file", TGT_VOCAB_FILE);
            t
        }
    };
    let start_epoch = trainer.epoch;
    let params = trainer.model.params.numel();
    eprintln!(
        "plgt: training {} model, {params} parameters, {} pairs, epochs {}..{}",
        trainer.model.config.attention,
        pairs.len(),
        start_epoch + 1,
        trainer.opts.epochs
    );
    let outcome = trainkit::train(trainer, &pairs, dev_pairs.as_deref())?;

    for (role, ckpt) in &outcome.checkpoints {
        ckpt.save(&a.out.join(format!("{role}.ckpt")))?;
    }
    let log_path = a.out.join(TRAIN_LOG_FILE);
    let mut log = TrainLog::default();
    if a.resume.is_some() && log_path.is_file() {
        let old = TrainLog::from_csv(&io_ctx(fs::read_to_string(&log_path), "read", &log_path)?)?;
        log.entries.extend(old.entries.into_iter().filter(|e| e.epoch <= start_epoch));
    }
    log.entries.extend(outcome.log.entries.iter().copied());
    io_ctx(fs::write(&log_path, log.to_csv()), "write", &log_path)?;

    println!("epoch  train_loss  train_acc  val_loss  val_acc");
    for e in &outcome.log.entries {
        println!(
            "{:>5}  {:>10.4}  {:>9.4}  {:>8.4}  {:>7.4}",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        );
    }
    let roles: Vec<&str> = outcome.checkpoints.keys().map(String::as_str).collect();
    println!("checkpoints: {}", roles.join(", "));
    match outcome.diverged {
        Some(msg) => Err(Failure::numeric(format!("training diverged: {msg}"))),
        None => Ok(()),
    }
}

struct Loaded {
    translator: Translator,
    beam: usize,
    alpha: f64,
}

fn load_translator(path: &Path) -> CmdResult<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let src = load_vocab(&vocab_path(&ckpt, path, "src_vocab_file", SRC_VOCAB_FILE))?;
    let tgt = load_vocab(&vocab_path(&ckpt, path, "tgt_vocab_file", TGT_VOCAB_FILE))?;
    let (normalization, beam, alpha) = echo_settings(&ckpt)?;
    let mut translator = Translator::new(ckpt.model()?, src, tgt)?;
    translator.normalization = normalization;
    Ok(Loaded {
        translator,
        beam,
        alpha,
    })
}

fn decode_options(l: &Loaded, beam: Option<usize>, alpha: Option<f64>) -> CmdResult<DecodeOptions> {
    let beam_width = beam.unwrap_or(l.beam);
    if beam_width == 0 {
        return Err(Failure::usage("--beam must be at least 1"));
    }
    Ok(DecodeOptions {
        beam_width,
        alpha: alpha.unwrap_or(l.alpha),
        max_extra: MAX_EXTRA,
    })
}

fn translate_lines<S: AsRef<str>>(t: &Translator, lines: &[S], opts: DecodeOptions) -> CmdResult<Vec<String>> {
    lines
        .iter()
        .map(|l| Ok(t.translate(l.as_ref(), opts)?))
        .collect()
}

pub fn translate(a: &TranslateArgs) -> CmdResult {
    let loaded = load_translator(&a.ckpt)?;
    let opts = decode_options(&loaded, a.beam, a.alpha)?;
    let text = io_ctx(fs::read_to_string(&a.input), "read", &a.input)?;
    let lines: Vec<&str> = text.lines().collect();
    let out = translate_lines(&loaded.translator, &lines, opts)?;
    let mut body = String::new();
    for l in out {
        body.push_str(&l);
        body.push('\n');
    }
    match &a.out {
        Some(p) => io_ctx(fs::write(p, body), "write", p)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn bleu_line(r: &BleuReport) -> String {
    format!("BLEU {:.2}", r.bleu)
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let hyp = io_ctx(fs::read_to_string(&a.hyp), "read", &a.hyp)?;
    let refs = io_ctx(fs::read_to_string(&a.reference), "read", &a.reference)?;
    let h: Vec<&str> = hyp.lines().collect();
    let r: Vec<&str> = refs.lines().collect();
    let report = corpus_bleu(&h, &r)?;
    println!("{}", bleu_line(&report));
    let p: Vec<String> = report.precisions.iter().map(|p| format!("{:.2}", 100.0 * p)).collect();
    println!("precisions {}", p.join("/"));
    println!("brevity_penalty {:.6}", report.brevity_penalty);
    println!("hyp_len {} ref_len {}", report.hyp_len, report.ref_len);
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> CmdResult {
    let loaded = load_translator(&a.ckpt)?;
    let colormap: Colormap = a.colormap.parse().map_err(|e: plgt_core::Error| Failure::usage(e.to_string()))?;
    if !(a.cell.is_finite() && a.cell > 0.0) || a.bins == 0 {
        return Err(Failure::usage("--cell and --bins must be positive"));
    }
    let cap = capture(&loaded.translator, &a.sentence)?;
    let style = HeatmapStyle { cell: a.cell, colormap };
    let written = export_records(&cap.records, &a.outdir, style, a.bins)?;
    println!("source: {}", cap.src_tokens.join(" "));
    println!("translation: {}", cap.translation);
    println!("{} records, {} files in {}", cap.records.len(), written.len(), a.outdir.display());
    Ok(())
}

fn read_log(ckpt: &Path) -> Option<TrainLog> {
    let p = ckpt.parent().unwrap_or(Path::new(".")).join(TRAIN_LOG_FILE);
    TrainLog::from_csv(&fs::read_to_string(p).ok()?).ok()
}

pub fn compare(a: &CompareArgs) -> CmdResult {
    let raw = Normalization {
        nfc: false,
        lowercase: false,
    };
    let test = ParallelCorpus::load(&a.testset, Split::Test, raw)?;
    if test.is_empty() {
        return Err(Failure::data(format!("{} holds no sentence pairs", a.testset.display())));
    }
    let refs = test.side(Side::Target);
    let srcs = test.side(Side::Source);
    let mut cols = Vec::new();
    for path in [&a.ckpt_a, &a.ckpt_b] {
        let l = load_translator(path)?;
        let opts = decode_options(&l, a.beam, a.alpha)?;
        let hyps = translate_lines(&l.translator, &srcs, opts)?;
        let report = corpus_bleu(&hyps, &refs)?;
        let cfg = &l.translator.model.config;
        cols.push((path.display().to_string(), cfg.attention, count_parameters(cfg), report, read_log(path)));
    }
    let mut out = String::new();
    let w = cols.iter().map(|c| c.0.len()).max().unwrap_or(0).max(12);
    let _ = writeln!(out, "{:<12}  {:<w$}  {:<w$}", "", "A", "B");
    let _ = writeln!(out, "{:<12}  {:<w$}  {:<w$}", "checkpoint", cols[0].0, cols[1].0);
    let _ = writeln!(out, "{:<12}  {:<w$}  {:<w$}", "attention", cols[0].1.to_string(), cols[1].1.to_string());
    let _ = writeln!(out, "{:<12}  {:<w$}  {:<w$}", "parameters", cols[0].2, cols[1].2);
    let _ = writeln!(
        out,
        "{:<12}  {:<w$}  {:<w$}",
        "BLEU",
        format!("{:.2}", cols[0].3.bleu),
        format!("{:.2}", cols[1].3.bleu)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "epoch  A_train_loss  A_val_loss  B_train_loss  B_val_loss");
    let (la, lb) = (cols[0].4.clone().unwrap_or_default(), cols[1].4.clone().unwrap_or_default());
    let mut epochs: Vec<u64> = la.entries.iter().chain(&lb.entries).map(|e| e.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let cell = |log: &TrainLog, ep: u64| -> (String, String) {
        log.entries
            .iter()
            .find(|e| e.epoch == ep)
            .map(|e| (format!("{:.4}", e.train_loss), format!("{:.4}", e.val_loss)))
            .unwrap_or_else(|| ("-".into(), "-".into()))
    };
    for ep in epochs {
        let (at, av) = cell(&la, ep);
        let (bt, bv) = cell(&lb, ep);
        let _ = writeln!(out, "{ep:>5}  {at:>12}  {av:>10}  {bt:>12}  {bv:>10}");
    }
    print!("{out}");
    Ok(())
}
