//! Capture and export of per-head deductive tensors.
//!
//! Every record expands into named 2-D tensors (`E_LM`, `A_LM`, `G_LM`,
//! `P`, `a`, `b_a`), each written as a CSV and an SVG heatmap named
//! `{stage}_{tensor}_{head}`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::{DeductiveRecord, Stage, METRIC_EPS};
use crate::decode::{greedy_decode, ModelScorer, Translator, MAX_EXTRA};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ndgrad::Tensor;
use crate::textpipe::{Vocabulary, START};

/// Default number of histogram bins.
pub const DEFAULT_BINS: usize = 80;

/// Whether a tensor depends on the input sentence or is a learned
/// parameter shared by the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Instance,
    Dataset,
}

impl Scope {
    fn as_str(self) -> &'static str {
        match self {
            Scope::Instance => "instance",
            Scope::Dataset => "dataset",
        }
    }
}

/// One exportable matrix of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub stage: Stage,
    pub layer: usize,
    pub head: usize,
    pub name: &'static str,
    pub scope: Scope,
    pub tensor: Tensor,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl NamedTensor {
    /// `{stage}_{tensor}_{head}`, with `_l{layer}` appended past layer 0.
    pub fn file_stem(&self) -> String {
        let mut s = format!("{}_{}_{}", self.stage, self.name, self.head);
        if self.layer > 0 {
            let _ = write!(s, "_l{}", self.layer);
        }
        s
    }
}

/// Splits a record into its named tensors; `E_LM` comes first.
pub fn record_tensors(rec: &DeductiveRecord) -> Vec<NamedTensor> {
    let mk = |name, scope, tensor: &Tensor, labeled: bool| NamedTensor {
        stage: rec.stage,
        layer: rec.layer,
        head: rec.head,
        name,
        scope,
        tensor: tensor.clone(),
        row_labels: if labeled { rec.row_labels.clone() } else { Vec::new() },
        col_labels: if labeled { rec.col_labels.clone() } else { Vec::new() },
    };
    let mut out = vec![mk("E_LM", Scope::Instance, &rec.e_lm, true)];
    if let Some(p) = &rec.power_law {
        out.push(mk("A_LM", Scope::Instance, &p.a_lm, false));
        out.push(mk("G_LM", Scope::Instance, &p.g_lm, false));
        out.push(mk("P", Scope::Dataset, &p.power, false));
        out.push(mk("a", Scope::Dataset, &p.coupling, false));
        out.push(mk("b_a", Scope::Dataset, &p.coupling_bias, false));
    }
    out
}

/// Checks the row-stochastic and positivity properties of a record.
pub fn validate_record(rec: &DeductiveRecord) -> Result<()> {
    for (i, row) in rec.e_lm.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "{} head {} E_LM row {i} sums to {s}",
                rec.stage, rec.head
            )));
        }
    }
    if let Some(p) = &rec.power_law {
        if p.a_lm.min() < METRIC_EPS {
            return Err(Error::Contract(format!(
                "{} head {} A_LM has element {} below the floor",
                rec.stage,
                rec.head,
                p.a_lm.min()
            )));
        }
    }
    Ok(())
}

/// Records of one sentence pair plus the tokens behind their axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub src_tokens: Vec<String>,
    /// START followed by the decoded tokens.
    pub tgt_tokens: Vec<String>,
    pub translation: String,
    pub records: Vec<DeductiveRecord>,
}

/// Greedy-decodes `src`, then reruns the full pair in inference mode and
/// keeps every head's records with axis labels attached.
pub fn capture_ids(
    model: &Model,
    src: &[u32],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Capture> {
    let scorer = ModelScorer::new(model, src)?;
    let out = greedy_decode(&scorer, src.len(), MAX_EXTRA)?;
    let mut tgt_in = vec![START];
    tgt_in.extend_from_slice(&out);
    let (_, mut records) = model.capture(&[src.to_vec()], &[tgt_in.clone()])?;
    let src_tokens: Vec<String> = src.iter().map(|&i| src_vocab.token_label(i)).collect();
    let tgt_tokens: Vec<String> = tgt_in.iter().map(|&i| tgt_vocab.token_label(i)).collect();
    for r in &mut records {
        let (rows, cols) = match r.stage {
            Stage::Slm => (&src_tokens, &src_tokens),
            Stage::Tlm => (&tgt_tokens, &tgt_tokens),
            Stage::Xlm => (&tgt_tokens, &src_tokens),
        };
        r.row_labels = rows.clone();
        r.col_labels = cols.clone();
    }
    Ok(Capture {
        translation: tgt_vocab.decode(&out).trim().to_string(),
        src_tokens,
        tgt_tokens,
        records,
    })
}

pub fn capture(translator: &Translator, sentence: &str) -> Result<Capture> {
    let src = translator
        .src_vocab
        .encode(&translator.normalization.apply(sentence));
    if src.is_empty() {
        return Err(Error::data("cannot inspect an empty sentence"));
    }
    capture_ids(&translator.model, &src, &translator.src_vocab, &translator.tgt_vocab)
}

/// Header fields of an exported CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvHeader {
    pub stage: String,
    pub layer: usize,
    pub head: usize,
    pub tensor: String,
    pub shape: (usize, usize),
    pub scope: String,
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        [n] => Ok((1, n)),
        _ => Err(Error::shape("export", t.shape(), &[])),
    }
}

/// One header line, then one line per row. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn to_csv(nt: &NamedTensor) -> Result<String> {
    let (r, c) = matrix_dims(&nt.tensor)?;
    let mut out = format!(
        "stage={},layer={},head={},tensor={},shape={}x{},scope={}\n",
        nt.stage,
        nt.layer,
        nt.head,
        nt.name,
        r,
        c,
        nt.scope.as_str()
    );
    for row in nt.tensor.data().chunks(c) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_csv(text: &str) -> Result<(CsvHeader, Tensor)> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::data("empty CSV"))?;
    let mut fields = std::collections::HashMap::new();
    for part in head.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::data(format!("malformed CSV header field {part:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::data(format!("CSV header lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::data(format!("CSV header field `{k}` is not a number")))
    };
    let (r, c) = get("shape")?
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::data("CSV header shape must look like RxC"))?;
    let header = CsvHeader {
        stage: get("stage")?.to_string(),
        layer: num("layer")?,
        head: num("head")?,
        tensor: get("tensor")?.to_string(),
        shape: (r, c),
        scope: get("scope")?.to_string(),
    };
    let mut data = Vec::with_capacity(r * c);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(format!("CSV row {} has a non-numeric value", i + 1)))?;
        if row.len() != c {
            return Err(Error::data(format!("CSV row {} has {} values, expected {c}", i + 1, row.len())));
        }
        data.extend(row);
    }
    Ok((header, Tensor::new(&[r, c], data)?))
}

/// Bin counts over `[min, max]` of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSpec {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
    /// Bin holding zero, when zero lies inside the range.
    pub zero_bin: Option<usize>,
}

impl HistogramSpec {
    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn bin_of(x: f64, min: f64, max: f64, bins: usize) -> usize {
    if max <= min {
        return 0;
    }
    (((x - min) / (max - min) * bins as f64).floor() as usize).min(bins - 1)
}

/// Equal-width bins spanning the data; the maximum lands in the last bin.
pub fn histogram(t: &Tensor, bins: usize) -> Result<HistogramSpec> {
    if t.is_empty() {
        return Err(Error::data("histogram of an empty tensor"));
    }
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    if !t.all_finite() {
        return Err(Error::data("histogram of a tensor with non-finite values"));
    }
    let (min, max) = (t.min(), t.max());
    let mut counts = vec![0; bins];
    for &x in t.data() {
        counts[bin_of(x, min, max, bins)] += 1;
    }
    Ok(HistogramSpec {
        min,
        max,
        counts,
        zero_bin: (min <= 0.0 && 0.0 <= max).then(|| bin_of(0.0, min, max, bins)),
    })
}

/// Colour ramps for heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// Black at the minimum, white at the maximum.
    #[default]
    Grayscale,
    /// Dark purple through teal to yellow.
    Viridis,
}

impl std::str::FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grayscale" => Ok(Colormap::Grayscale),
            "viridis" => Ok(Colormap::Viridis),
            _ => Err(Error::config(format!("unknown colormap `{s}`"))),
        }
    }
}

impl Colormap {
    /// RGB for `t` in `[0, 1]`.
    pub fn rgb(self, t: f64) -> (u8, u8, u8) {
        let t = t.clamp(0.0, 1.0);
        match self {
            Colormap::Grayscale => {
                let v = (t * 255.0).round() as u8;
                (v, v, v)
            }
            Colormap::Viridis => {
                const STOPS: [(f64, f64, f64); 5] = [
                    (68.0, 1.0, 84.0),
                    (59.0, 82.0, 139.0),
                    (33.0, 145.0, 140.0),
                    (94.0, 201.0, 98.0),
                    (253.0, 231.0, 37.0),
                ];
                let x = t * (STOPS.len() - 1) as f64;
                let i = (x.floor() as usize).min(STOPS.len() - 2);
                let f = x - i as f64;
                let (a, b) = (STOPS[i], STOPS[i + 1]);
                let lerp = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
                (lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
            }
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Heatmap options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapStyle {
    pub cell: f64,
    pub colormap: Colormap,
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        HeatmapStyle {
            cell: 16.0,
            colormap: Colormap::Grayscale,
        }
    }
}

/// Standalone SVG with one `<rect>` per element. Without labels the grid
/// fills the whole canvas.
pub fn render_heatmap_svg(
    t: &Tensor,
    row_labels: &[String],
    col_labels: &[String],
    style: HeatmapStyle,
) -> Result<String> {
    let (r, c) = matrix_dims(t)?;
    let cell = style.cell;
    let left = if row_labels.is_empty() {
        0.0
    } else {
        8.0 + 7.0 * row_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64
    };
    let top = if col_labels.is_empty() {
        0.0
    } else {
        8.0 + 7.0 * col_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64
    };
    let (w, h) = (left + c as f64 * cell, top + r as f64 * cell);
    let (min, max) = (t.min(), t.max());
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    for i in 0..r {
        for j in 0..c {
            let v = t.data()[i * c + j];
            let frac = if max > min { (v - min) / (max - min) } else { 0.0 };
            let (cr, cg, cb) = style.colormap.rgb(frac);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({cr},{cg},{cb})"><title>{v:?}</title></rect>"#,
                left + j as f64 * cell,
                top + i as f64 * cell,
            );
        }
    }
    let font = (cell * 0.75).min(12.0);
    for (i, l) in row_labels.iter().enumerate().take(r) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="{font}" text-anchor="end" font-family="monospace">{}</text>"#,
            left - 4.0,
            top + (i as f64 + 0.75) * cell,
            xml_escape(l)
        );
    }
    for (j, l) in col_labels.iter().enumerate().take(c) {
        let (x, y) = (left + (j as f64 + 0.75) * cell, top - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-size="{font}" font-family="monospace" transform="rotate(-90 {x} {y})">{}</text>"#,
            xml_escape(l)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bar chart of a histogram; the zero position is drawn as a dashed line.
pub fn render_histogram_svg(hist: &HistogramSpec) -> String {
    let (w, h) = (480.0, 240.0);
    let bw = w / hist.counts.len() as f64;
    let peak = *hist.counts.iter().max().unwrap_or(&1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    for (i, &n) in hist.counts.iter().enumerate() {
        let bh = if peak > 0.0 { n as f64 / peak * (h - 10.0) } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{bw}" height="{bh}" fill="steelblue"/>"#,
            i as f64 * bw,
            h - bh
        );
    }
    if hist.zero_bin.is_some() && hist.max > hist.min {
        let x = (0.0 - hist.min) / (hist.max - hist.min) * w;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="0" x2="{x}" y2="{h}" stroke="orange" stroke-dasharray="4 3"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes CSV, heatmap and histogram files for every tensor of every
/// record into `dir`. Returns the written paths.
pub fn export_records(
    records: &[DeductiveRecord],
    dir: &Path,
    style: HeatmapStyle,
    bins: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for rec in records {
        validate_record(rec)?;
        for nt in record_tensors(rec) {
            let stem = nt.file_stem();
            let csv = dir.join(format!("{stem}.csv"));
            std::fs::write(&csv, to_csv(&nt)?)?;
            let svg = dir.join(format!("{stem}.svg"));
            std::fs::write(&svg, render_heatmap_svg(&nt.tensor, &nt.row_labels, &nt.col_labels, style)?)?;
            let hist = dir.join(format!("{stem}_hist.svg"));
            std::fs::write(&hist, render_histogram_svg(&histogram(&nt.tensor, bins)?))?;
            written.extend([csv, svg, hist]);
        }
    }
    Ok(written)
}
