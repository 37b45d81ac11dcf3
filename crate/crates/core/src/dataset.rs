//! Dataset ingestion (UEA `.ts`, long-format CSV), train-split
//! z-normalization, seeded batching and a synthetic generator with
//! planted lagged couplings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled multivariate series: `values[d][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    pub values: Vec<Vec<f64>>,
    pub label: usize,
}

impl TimeSeriesSample {
    pub fn n_dims(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<TimeSeriesSample>,
    pub n_dims: usize,
    pub length: usize,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    /// Per-sample series length before the length policy was applied.
    pub original_lengths: Vec<usize>,
}

/// How series of unequal length are brought to a common length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LengthPolicy {
    /// Repeat the last value up to the longest series.
    #[default]
    Pad,
    /// Cut every series to the shortest one.
    Truncate,
}

/// What to do with `?` / `NaN` entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Linear interpolation inside the dimension; ends copy the nearest
    /// observed value.
    #[default]
    Interp,
    Fail,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParseOptions {
    pub length_policy: LengthPolicy,
    pub missing: MissingPolicy,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            original_lengths: indices.iter().map(|&i| self.original_lengths[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: Vec::new(),
            n_dims: self.n_dims,
            length: self.length,
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
            original_lengths: Vec::new(),
        }
    }

    /// Re-indexes labels so that class names follow `names`.
    pub fn align_labels(&self, names: &[String]) -> Result<Dataset> {
        let map: Vec<usize> = self
            .class_names
            .iter()
            .map(|n| {
                names.iter().position(|m| m == n).ok_or_else(|| {
                    Error::Config(format!("class {n:?} is not among {names:?}"))
                })
            })
            .collect::<Result<_>>()?;
        let mut out = self.clone();
        for s in &mut out.samples {
            s.label = map[s.label];
        }
        out.class_names = names.to_vec();
        out.n_classes = names.len();
        Ok(out)
    }

    /// Brings every sample to `length` by edge padding or truncation.
    pub fn resized(&self, length: usize) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            for row in &mut s.values {
                resize_edge(row, length);
            }
        }
        out.length = length;
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.class_names.iter().find(|n| !seen.insert(*n)) {
            return Err(Error::Config(format!("duplicate class name {dup:?}")));
        }
        if self.class_names.len() != self.n_classes {
            return Err(Error::Config("class name count differs from n_classes".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.n_classes {
                return Err(Error::Record {
                    record: i,
                    msg: format!("label {} >= {}", s.label, self.n_classes),
                });
            }
            if s.values.len() != self.n_dims
                || s.values.iter().any(|r| r.len() != self.length)
            {
                return Err(Error::Record {
                    record: i,
                    msg: "shape differs from dataset header".into(),
                });
            }
            if s.values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Record {
                    record: i,
                    msg: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }
}

fn resize_edge(row: &mut Vec<f64>, length: usize) {
    if row.len() >= length {
        row.truncate(length);
    } else {
        let last = row.last().copied().unwrap_or(0.0);
        row.resize(length, last);
    }
}

fn impute(row: &mut [f64], policy: MissingPolicy) -> std::result::Result<(), String> {
    if row.iter().any(|v| v.is_infinite()) {
        return Err("infinite value".into());
    }
    if !row.iter().any(|v| v.is_nan()) {
        return Ok(());
    }
    if policy == MissingPolicy::Fail {
        return Err("missing value".into());
    }
    let known: Vec<usize> = (0..row.len()).filter(|&i| !row[i].is_nan()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err("dimension has no observed values".into());
    };
    for i in 0..first {
        row[i] = row[first];
    }
    for i in last + 1..row.len() {
        row[i] = row[last];
    }
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in a + 1..b {
            let w = (i - a) as f64 / (b - a) as f64;
            row[i] = row[a] + w * (row[b] - row[a]);
        }
    }
    Ok(())
}

fn parse_value(tok: &str) -> Option<f64> {
    let tok = tok.trim();
    if tok == "?" || tok.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    tok.parse().ok()
}

/// Applies the missing-value and length policies and fills in the header.
fn finish(
    name: String,
    class_names: Vec<String>,
    raw: Vec<(Vec<Vec<f64>>, usize)>,
    n_dims: usize,
    declared_length: Option<usize>,
    opts: &ParseOptions,
) -> Result<Dataset> {
    let original_lengths: Vec<usize> = raw.iter().map(|(v, _)| v[0].len()).collect();
    let length = match opts.length_policy {
        LengthPolicy::Pad => original_lengths.iter().copied().max(),
        LengthPolicy::Truncate => original_lengths.iter().copied().min(),
    }
    .or(declared_length)
    .unwrap_or(0);
    let mut samples = Vec::with_capacity(raw.len());
    for (record, (mut values, label)) in raw.into_iter().enumerate() {
        for row in &mut values {
            impute(row, opts.missing).map_err(|msg| Error::Record { record, msg })?;
            resize_edge(row, length);
        }
        samples.push(TimeSeriesSample { values, label });
    }
    Ok(Dataset {
        name,
        samples,
        n_dims,
        length,
        n_classes: class_names.len(),
        class_names,
        original_lengths,
    })
}

/// Parses UEA `.ts` text with default options.
pub fn parse_ts(text: &str) -> Result<Dataset> {
    parse_ts_with(text, &ParseOptions::default())
}

pub fn parse_ts_with(text: &str, opts: &ParseOptions) -> Result<Dataset> {
    let mut name = String::new();
    let mut dims: Option<usize> = None;
    let mut series_length: Option<usize> = None;
    let mut class_names: Option<Vec<String>> = None;
    let mut in_data = false;
    let mut raw: Vec<(Vec<Vec<f64>>, usize)> = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        if !in_data {
            let Some(rest) = line.strip_prefix('@') else {
                return Err(perr(format!("expected a header line, found {line:?}")));
            };
            let mut parts = rest.split_whitespace();
            let tag = parts.next().unwrap_or("").to_ascii_lowercase();
            let args: Vec<&str> = parts.collect();
            let flag = |args: &[&str]| match args {
                [v] if v.eq_ignore_ascii_case("true") => Ok(true),
                [v] if v.eq_ignore_ascii_case("false") => Ok(false),
                _ => Err(perr(format!("@{tag} expects true or false"))),
            };
            let count = |args: &[&str]| match args {
                [v] => v
                    .parse::<usize>()
                    .map_err(|_| perr(format!("@{tag} expects a count, found {v:?}"))),
                _ => Err(perr(format!("@{tag} expects one value"))),
            };
            match tag.as_str() {
                "problemname" => name = args.join(" "),
                "timestamps" => {
                    if flag(&args)? {
                        return Err(perr("timestamped series are not supported".into()));
                    }
                }
                "missing" | "univariate" | "equallength" => {
                    flag(&args)?;
                }
                "dimensions" => {
                    let d = count(&args)?;
                    if d == 0 {
                        return Err(perr("@dimensions must be at least 1".into()));
                    }
                    dims = Some(d);
                }
                "serieslength" => series_length = Some(count(&args)?),
                "classlabel" => match args.split_first() {
                    Some((f, names)) if f.eq_ignore_ascii_case("true") => {
                        if names.is_empty() {
                            return Err(perr("@classLabel true lists no classes".into()));
                        }
                        let mut seen = std::collections::HashSet::new();
                        if let Some(dup) = names.iter().find(|n| !seen.insert(**n)) {
                            return Err(perr(format!("duplicate class label {dup:?}")));
                        }
                        class_names = Some(names.iter().map(|s| s.to_string()).collect());
                    }
                    Some((f, _)) if f.eq_ignore_ascii_case("false") => {
                        return Err(perr("unlabelled datasets are not supported".into()));
                    }
                    _ => return Err(perr("@classLabel expects true or false".into())),
                },
                "data" => {
                    if !args.is_empty() {
                        return Err(perr("@data takes no arguments".into()));
                    }
                    if class_names.is_none() {
                        return Err(perr("@data before @classLabel".into()));
                    }
                    in_data = true;
                }
                "" => return Err(perr("empty header tag".into())),
                // Other archive tags (e.g. @targetlabel) carry nothing we use.
                _ => {}
            }
            continue;
        }

        let record = raw.len();
        let fields: Vec<&str> = line.split(':').collect();
        let names = class_names.as_ref().expect("checked at @data");
        if fields.len() < 2 {
            return Err(Error::Record {
                record,
                msg: format!("line {lineno}: expected dimensions followed by a label"),
            });
        }
        let (label_tok, series) = fields.split_last().unwrap();
        let label_tok = label_tok.trim();
        let expected = *dims.get_or_insert(series.len());
        if series.len() != expected {
            return Err(Error::Record {
                record,
                msg: format!(
                    "line {lineno}: {} dimensions, header declares {expected}",
                    series.len()
                ),
            });
        }
        let label = names
            .iter()
            .position(|n| n == label_tok)
            .ok_or_else(|| Error::UnknownLabel {
                record,
                label: label_tok.to_string(),
            })?;
        let mut values = Vec::with_capacity(series.len());
        for (d, s) in series.iter().enumerate() {
            let row: Vec<f64> = s
                .split(',')
                .map(|tok| {
                    parse_value(tok).ok_or_else(|| Error::Record {
                        record,
                        msg: format!("line {lineno}: dimension {d}: bad value {:?}", tok.trim()),
                    })
                })
                .collect::<Result<_>>()?;
            if row.is_empty() || s.trim().is_empty() {
                return Err(Error::Record {
                    record,
                    msg: format!("line {lineno}: dimension {d} is empty"),
                });
            }
            values.push(row);
        }
        let len0 = values[0].len();
        if let Some((d, row)) = values.iter().enumerate().find(|(_, r)| r.len() != len0) {
            return Err(Error::Record {
                record,
                msg: format!(
                    "line {lineno}: ragged dimensions (dimension 0 has {len0} values, dimension {d} has {})",
                    row.len()
                ),
            });
        }
        raw.push((values, label));
    }
    let Some(class_names) = class_names else {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            msg: "missing @classLabel / @data header".into(),
        });
    };
    if !in_data {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            msg: "missing @data section".into(),
        });
    }
    finish(name, class_names, raw, dims.unwrap_or(0), series_length, opts)
}

/// Writes `.ts` text that [`parse_ts`] reads back to an equal dataset.
pub fn to_ts(ds: &Dataset) -> String {
    let mut out = String::new();
    let name = if ds.name.is_empty() { "unnamed" } else { &ds.name };
    let _ = writeln!(out, "@problemName {name}");
    out.push_str("@timeStamps false\n@missing false\n");
    let _ = writeln!(out, "@univariate {}", ds.n_dims == 1);
    let _ = writeln!(out, "@dimensions {}", ds.n_dims);
    out.push_str("@equalLength true\n");
    let _ = writeln!(out, "@seriesLength {}", ds.length);
    let _ = writeln!(out, "@classLabel true {}", ds.class_names.join(" "));
    out.push_str("@data\n");
    for s in &ds.samples {
        for row in &s.values {
            for (t, v) in row.iter().enumerate() {
                if t > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:?}");
            }
            out.push(':');
        }
        let _ = writeln!(out, "{}", ds.class_names[s.label]);
    }
    out
}

#[derive(Deserialize)]
struct CsvRow {
    sample_id: String,
    dim: usize,
    t: usize,
    value: String,
    label: String,
}

/// Long-format CSV: header `sample_id,dim,t,value,label`, one row per
/// observation. Samples and classes are ordered by first appearance;
/// absent `(dim, t)` cells count as missing.
pub fn parse_csv(text: &str, opts: &ParseOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let expected = ["sample_id", "dim", "t", "value", "label"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let value = parse_value(&row.value).ok_or_else(|| Error::Parse {
            line,
            msg: format!("bad value {:?}", row.value),
        })?;
        let s = *index.entry(row.sample_id.clone()).or_insert_with(|| {
            order.push(row.sample_id.clone());
            cells.push(Vec::new());
            labels.push(row.label.clone());
            order.len() - 1
        });
        if labels[s] != row.label {
            return Err(Error::Parse {
                line,
                msg: format!("sample {:?} has conflicting labels", row.sample_id),
            });
        }
        if !class_names.contains(&row.label) {
            class_names.push(row.label.clone());
        }
        cells[s].push((row.dim, row.t, value));
    }
    let n_dims = cells
        .iter()
        .flatten()
        .map(|&(d, _, _)| d + 1)
        .max()
        .unwrap_or(0);
    let mut raw = Vec::with_capacity(cells.len());
    for (record, obs) in cells.into_iter().enumerate() {
        let len = obs.iter().map(|&(_, t, _)| t + 1).max().unwrap_or(0);
        let mut values = vec![vec![f64::NAN; len]; n_dims];
        for (d, t, v) in obs {
            values[d][t] = v;
        }
        if values.iter().any(|r| r.iter().all(|v| v.is_nan())) {
            return Err(Error::Record {
                record,
                msg: "a dimension has no observations".into(),
            });
        }
        let label = class_names.iter().position(|n| *n == labels[record]).unwrap();
        raw.push((values, label));
    }
    finish(String::new(), class_names, raw, n_dims, None, opts)
}

/// Reads a `.ts` or `.csv` file, chosen by extension.
pub fn load(path: &Path, opts: &ParseOptions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut ds = if is_csv {
        parse_csv(&text, opts)?
    } else {
        parse_ts_with(&text, opts)?
    };
    if ds.name.is_empty() {
        ds.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(ds)
}

/// Per-dimension mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() || train.length == 0 {
            return Err(Error::InvalidArgument(
                "normalization needs a non-empty training split".into(),
            ));
        }
        let n = (train.len() * train.length) as f64;
        let mut mean = vec![0.0; train.n_dims];
        let mut std = vec![0.0; train.n_dims];
        for d in 0..train.n_dims {
            let values = train.samples.iter().flat_map(|s| s.values[d].iter());
            mean[d] = values.clone().sum::<f64>() / n;
            let var = values.map(|v| (v - mean[d]).powi(2)).sum::<f64>() / n;
            std[d] = var.sqrt();
        }
        Ok(NormalizationStats { mean, std })
    }

    /// Divisor for dimension `d`; zero spread maps to 1.
    pub fn divisor(&self, d: usize) -> f64 {
        if self.std[d] > 0.0 {
            self.std[d]
        } else {
            1.0
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for s in &mut out.samples {
            for (d, row) in s.values.iter_mut().enumerate() {
                let div = self.divisor(d);
                row.iter_mut().for_each(|v| *v = (*v - self.mean[d]) / div);
            }
        }
        out
    }
}

/// Normalizes `train` and every dataset in `others` with statistics from
/// `train` alone.
pub fn znormalize(
    train: &Dataset,
    others: &[Dataset],
) -> Result<(Dataset, Vec<Dataset>, NormalizationStats)> {
    let stats = NormalizationStats::fit(train)?;
    let train_n = stats.apply(train);
    let others_n = others.iter().map(|d| stats.apply(d)).collect();
    Ok((train_n, others_n, stats))
}

/// A seeded permutation of `0..n` cut into consecutive chunks of
/// `batch_size`; the last chunk may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    Ok(batch_indices(dataset.len(), batch_size, seed)?.into_iter())
}

/// Lag-1 coupling `target[t] += beta * source[t - 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub source: usize,
    pub target: usize,
    pub beta: f64,
}

/// A class-specific sinusoidal burst added at a random position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPattern {
    pub dim: usize,
    pub width: usize,
    pub amplitude: f64,
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    #[serde(default)]
    pub couplings: Vec<Coupling>,
    #[serde(default)]
    pub pattern: Option<PlantedPattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dims: usize,
    pub length: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the innovation on coupled targets.
    pub noise: f64,
    pub classes: Vec<SynthClass>,
}

/// Where a planted pattern landed in one generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedWindow {
    pub dim: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Ground-truth couplings, per class.
    pub edges: Vec<Vec<Coupling>>,
    /// Planted window of each sample, if its class has a pattern.
    pub windows: Vec<Option<PlantedWindow>>,
}

impl SynthConfig {
    /// Single class with one planted edge `source -> target`.
    pub fn single_edge(n_dims: usize, length: usize, source: usize, target: usize, beta: f64, noise: f64) -> Self {
        SynthConfig {
            n_dims,
            length,
            samples_per_class: 1,
            noise,
            classes: vec![SynthClass {
                couplings: vec![Coupling { source, target, beta }],
                pattern: None,
            }],
        }
    }

    /// Four classes over six dimensions of length 100. Each class has its
    /// own lag-1 coupling pair and its own periodic burst.
    pub fn planted_four_class(samples_per_class: usize) -> Self {
        let classes = (0..4)
            .map(|c| SynthClass {
                couplings: vec![
                    Coupling { source: c, target: (c + 1) % 6, beta: 0.9 },
                    Coupling { source: (c + 3) % 6, target: (c + 5) % 6, beta: 0.9 },
                ],
                pattern: Some(PlantedPattern {
                    dim: c,
                    width: 16,
                    amplitude: 3.0,
                    period: 4.0 + 2.0 * c as f64,
                }),
            })
            .collect();
        SynthConfig {
            n_dims: 6,
            length: 100,
            samples_per_class,
            noise: 0.1,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dims == 0 || self.length < 2 || self.classes.is_empty() {
            return Err(Error::Config(
                "synth needs n_dims >= 1, length >= 2 and at least one class".into(),
            ));
        }
        for (c, class) in self.classes.iter().enumerate() {
            for e in &class.couplings {
                if e.source >= self.n_dims || e.target >= self.n_dims {
                    return Err(Error::Config(format!(
                        "class {c}: coupling {} -> {} references a dimension >= {}",
                        e.source, e.target, self.n_dims
                    )));
                }
            }
            if let Some(p) = &class.pattern {
                if p.dim >= self.n_dims || p.width == 0 || p.width > self.length {
                    return Err(Error::Config(format!(
                        "class {c}: pattern does not fit a {}x{} sample",
                        self.n_dims, self.length
                    )));
                }
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generates a dataset with planted lagged couplings.
///
/// Uncoupled dimensions are i.i.d. standard normal; a coupled target is
/// `sum(beta * source[t - 1]) + noise * N(0, 1)`. Samples are ordered
/// by class.
pub fn synth_causal(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, l) = (cfg.n_dims, cfg.length);
    let mut samples = Vec::new();
    let mut windows = Vec::new();
    for (label, class) in cfg.classes.iter().enumerate() {
        let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
        for e in &class.couplings {
            incoming[e.target].push((e.source, e.beta));
        }
        for _ in 0..cfg.samples_per_class {
            let mut values = vec![vec![0.0; l]; d];
            for t in 0..l {
                for j in 0..d {
                    let eps: f64 = rng.sample(StandardNormal);
                    values[j][t] = if incoming[j].is_empty() {
                        eps
                    } else {
                        let drive: f64 = if t == 0 {
                            0.0
                        } else {
                            incoming[j].iter().map(|&(i, b)| b * values[i][t - 1]).sum()
                        };
                        drive + cfg.noise * eps
                    };
                }
            }
            let window = class.pattern.map(|p| {
                let start = rng.random_range(0..=l - p.width);
                for k in 0..p.width {
                    let phase = 2.0 * std::f64::consts::PI * k as f64 / p.period;
                    values[p.dim][start + k] += p.amplitude * phase.sin();
                }
                PlantedWindow {
                    dim: p.dim,
                    start,
                    len: p.width,
                }
            });
            samples.push(TimeSeriesSample { values, label });
            windows.push(window);
        }
    }
    let n = samples.len();
    Ok(SynthDataset {
        dataset: Dataset {
            name: "synthetic".into(),
            samples,
            n_dims: d,
            length: l,
            n_classes: cfg.classes.len(),
            class_names: (0..cfg.classes.len()).map(|c| format!("class{c}")).collect(),
            original_lengths: vec![l; n],
        },
        edges: cfg.classes.iter().map(|c| c.couplings.clone()).collect(),
        windows,
    })
}
