//! Transfer entropy between the dimensions of a sample and the
//! thresholded causal matrix / graph built from it.
//!
//! Probabilities are plug-in frequencies over discretized symbols and
//! every entropy is in bits. For a source `Y` and target `X`,
//!
//! ```text
//! TE(Y -> X) = H(X[t+1] | X[t..t-k+1]) - H(X[t+1] | X[t..t-k+1], Y[t..t-l+1])
//! C(X, Y)    = TE(X -> Y) - TE(Y -> X)
//! M[i][j]    = C(T_i, T_j) if C(T_i, T_j) > c else 0
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};

/// Negative TE estimates above this are rounding noise and clamp to 0.
pub const TE_CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BinStrategy {
    EqualWidth,
    #[default]
    EqualFrequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub n_bins: usize,
    pub strategy: BinStrategy,
}

impl Default for BinningSpec {
    fn default() -> Self {
        BinningSpec {
            n_bins: 8,
            strategy: BinStrategy::EqualFrequency,
        }
    }
}

impl BinningSpec {
    pub fn new(n_bins: usize, strategy: BinStrategy) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Config(format!("n_bins must be >= 2, got {n_bins}")));
        }
        Ok(BinningSpec { n_bins, strategy })
    }
}

/// Target (`k`) and source (`l`) history lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryOrder {
    pub k: usize,
    pub l: usize,
}

impl Default for HistoryOrder {
    fn default() -> Self {
        HistoryOrder { k: 1, l: 1 }
    }
}

impl HistoryOrder {
    pub fn new(k: usize, l: usize) -> Result<Self> {
        if k == 0 || l == 0 {
            return Err(Error::Config("history orders k and l must be >= 1".into()));
        }
        Ok(HistoryOrder { k, l })
    }

    /// Shortest series for which a transfer entropy is defined.
    pub fn min_len(&self) -> usize {
        self.k.max(self.l) + 2
    }
}

/// Maps each value to a bin index in `[0, n_bins)`.
///
/// Equal-width bins span `[min, max]` with `max` in the last bin.
/// Equal-frequency bins assign by stable rank (ties keep input order), so
/// every bin holds `len / n_bins` values give or take one. A constant
/// series maps to all zeros.
pub fn discretize(series: &[f64], spec: &BinningSpec) -> Vec<usize> {
    let n = spec.n_bins.max(1);
    let (min, max) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if series.is_empty() || !(max > min) {
        return vec![0; series.len()];
    }
    match spec.strategy {
        BinStrategy::EqualWidth => series
            .iter()
            .map(|&v| (((v - min) / (max - min) * n as f64) as usize).min(n - 1))
            .collect(),
        BinStrategy::EqualFrequency => {
            let mut order: Vec<usize> = (0..series.len()).collect();
            order.sort_by(|&a, &b| series[a].total_cmp(&series[b]));
            let mut out = vec![0; series.len()];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = rank * n / series.len();
            }
            out
        }
    }
}

fn log2_ratio_sum(pairs: &mut [(u64, u64)]) -> f64 {
    // pairs are (condition, outcome); sorted so runs of equal condition
    // and equal (condition, outcome) are contiguous.
    pairs.sort_unstable();
    let total = pairs.len() as f64;
    let mut h = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let cond = pairs[i].0;
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == cond {
            j += 1;
        }
        let c_cond = (j - i) as f64;
        let mut a = i;
        while a < j {
            let mut b = a;
            while b < j && pairs[b].1 == pairs[a].1 {
                b += 1;
            }
            let c_joint = (b - a) as f64;
            h -= c_joint / total * (c_joint / c_cond).log2();
            a = b;
        }
        i = j;
    }
    h
}

/// Plug-in `H(X | Y)` in bits.
pub fn conditional_entropy(x: &[usize], y: &[usize]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "conditional_entropy: lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument(
            "conditional_entropy: empty input".into(),
        ));
    }
    let mut pairs: Vec<(u64, u64)> = y.iter().zip(x).map(|(&b, &a)| (b as u64, a as u64)).collect();
    Ok(log2_ratio_sum(&mut pairs))
}

/// Packs a history window of symbols into one key.
fn pack(symbols: &[usize], base: u64) -> Option<u64> {
    symbols.iter().try_fold(0u64, |acc, &s| {
        acc.checked_mul(base)?.checked_add(s as u64)
    })
}

/// Transfer entropy from already-discretized `source` to `target`.
pub fn transfer_entropy_symbols(
    source: &[usize],
    target: &[usize],
    order: &HistoryOrder,
) -> Result<f64> {
    let len = source.len();
    if target.len() != len {
        return Err(Error::InvalidArgument(format!(
            "transfer_entropy: lengths {} and {} differ",
            len,
            target.len()
        )));
    }
    if order.k == 0 || order.l == 0 {
        return Err(Error::Config("history orders k and l must be >= 1".into()));
    }
    if len < order.min_len() {
        return Err(Error::InvalidArgument(format!(
            "series of length {len} is too short for k={}, l={} (need {})",
            order.k,
            order.l,
            order.min_len()
        )));
    }
    let base = source.iter().chain(target).max().copied().unwrap_or(0) as u64 + 1;
    let overflow = || Error::InvalidArgument("history too long to index".into());
    let first = order.k.max(order.l) - 1;
    let mut own = Vec::with_capacity(len - first - 1);
    let mut both = Vec::with_capacity(len - first - 1);
    let source_span = base.checked_pow(order.l as u32).ok_or_else(overflow)?;
    for t in first..len - 1 {
        let future = target[t + 1] as u64;
        let xp = pack(&target[t + 1 - order.k..=t], base).ok_or_else(overflow)?;
        let yp = pack(&source[t + 1 - order.l..=t], base).ok_or_else(overflow)?;
        own.push((xp, future));
        let joint = xp
            .checked_mul(source_span)
            .and_then(|v| v.checked_add(yp))
            .ok_or_else(overflow)?;
        both.push((joint, future));
    }
    let te = log2_ratio_sum(&mut own) - log2_ratio_sum(&mut both);
    // Conditioning never raises a plug-in entropy, so anything below zero
    // is summation-order rounding.
    debug_assert!(te >= -TE_CLAMP_TOLERANCE, "plug-in TE below zero: {te}");
    Ok(te.max(0.0))
}

/// `TE(source -> target)` in bits after discretizing both series.
pub fn transfer_entropy(
    source: &[f64],
    target: &[f64],
    order: &HistoryOrder,
    spec: &BinningSpec,
) -> Result<f64> {
    if source.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "transfer_entropy: lengths {} and {} differ",
            source.len(),
            target.len()
        )));
    }
    transfer_entropy_symbols(&discretize(source, spec), &discretize(target, spec), order)
}

/// `TE(x -> y) - TE(y -> x)`; positive when `x` drives `y`.
pub fn causal_score(x: &[f64], y: &[f64], order: &HistoryOrder, spec: &BinningSpec) -> Result<f64> {
    let (sx, sy) = (discretize(x, spec), discretize(y, spec));
    Ok(transfer_entropy_symbols(&sx, &sy, order)? - transfer_entropy_symbols(&sy, &sx, order)?)
}

/// Settings for building causal matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalConfig {
    pub binning: BinningSpec,
    pub order: HistoryOrder,
    #[serde(with = "finite_or_string")]
    pub threshold: f64,
    pub scope: GraphScope,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            binning: BinningSpec::default(),
            order: HistoryOrder::default(),
            threshold: 0.0,
            scope: GraphScope::Sample,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<()> {
        BinningSpec::new(self.binning.n_bins, self.binning.strategy)?;
        HistoryOrder::new(self.order.k, self.order.l)?;
        if self.threshold.is_nan() {
            return Err(Error::Config("threshold must not be NaN".into()));
        }
        Ok(())
    }
}

/// One graph per sample, or one shared graph from the mean score matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GraphScope {
    #[default]
    Sample,
    DatasetMean,
}

/// Thresholded `n x n` causal scores, row `i` = cause, column `j` = effect.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalMatrix {
    n: usize,
    scores: Vec<f64>,
    threshold: f64,
}

impl CausalMatrix {
    /// Thresholds a raw antisymmetric score matrix (`raw[i*n + j] = C(T_i, T_j)`).
    pub fn from_scores(n: usize, raw: &[f64], threshold: f64) -> Result<Self> {
        if raw.len() != n * n {
            return Err(Error::shape("causal_matrix", &[n, n], &[raw.len()]));
        }
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let c = raw[i * n + j];
                if i != j && c > threshold {
                    scores[i * n + j] = c;
                }
            }
        }
        Ok(CausalMatrix {
            n,
            scores,
            threshold,
        })
    }

    /// Zero matrix over `n` nodes.
    pub fn empty(n: usize, threshold: f64) -> Self {
        CausalMatrix {
            n,
            scores: vec![0.0; n * n],
            threshold,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.scores.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }

    /// Relabels nodes: node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                scores[perm[i] * n + perm[j]] = self.get(i, j);
            }
        }
        CausalMatrix {
            n,
            scores,
            threshold: self.threshold,
        }
    }

    /// Checks the diagonal, threshold and exclusivity invariants.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::Corrupt(format!("diagonal entry {i} is nonzero")));
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if !v.is_finite() {
                    return Err(Error::Corrupt(format!("entry ({i}, {j}) is not finite")));
                }
                if v != 0.0 && !(v > self.threshold) {
                    return Err(Error::Corrupt(format!(
                        "entry ({i}, {j}) = {v} does not exceed threshold {}",
                        self.threshold
                    )));
                }
                if self.threshold >= 0.0 && v != 0.0 && self.get(j, i) != 0.0 {
                    return Err(Error::Corrupt(format!(
                        "both ({i}, {j}) and ({j}, {i}) are nonzero"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_graph(&self) -> CausalGraph {
        let mut edges = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                let w = self.get(i, j);
                if w != 0.0 {
                    edges.push(CausalEdge {
                        from: i,
                        to: j,
                        weight: w,
                    });
                }
            }
        }
        CausalGraph { n: self.n, edges }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MatrixDocument {
            n: self.n,
            threshold: self.threshold,
            matrix: self.rows(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MatrixDocument =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        if doc.matrix.len() != doc.n || doc.matrix.iter().any(|r| r.len() != doc.n) {
            return Err(Error::Corrupt(format!("matrix is not {0}x{0}", doc.n)));
        }
        let m = CausalMatrix {
            n: doc.n,
            scores: doc.matrix.concat(),
            threshold: doc.threshold,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixDocument {
    n: usize,
    #[serde(with = "finite_or_string")]
    threshold: f64,
    matrix: Vec<Vec<f64>>,
}

/// JSON has no infinities; write them as `"inf"` / `"-inf"`.
mod finite_or_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => other.parse().map_err(serde::de::Error::custom),
            },
        }
    }
}

/// Raw (unthresholded) `C(T_i, T_j)` for every ordered pair.
pub fn score_matrix(
    sample: &TimeSeriesSample,
    order: &HistoryOrder,
    spec: &BinningSpec,
) -> Result<Vec<f64>> {
    let n = sample.n_dims();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "a causal matrix needs at least 2 dimensions, got {n}"
        )));
    }
    let symbols: Vec<Vec<usize>> = sample.values.iter().map(|r| discretize(r, spec)).collect();
    let mut te = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                te[i * n + j] = transfer_entropy_symbols(&symbols[i], &symbols[j], order)?;
            }
        }
    }
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                raw[i * n + j] = te[i * n + j] - te[j * n + i];
            }
        }
    }
    Ok(raw)
}

/// Causal matrix of one sample.
pub fn build_causal_matrix(
    sample: &TimeSeriesSample,
    threshold: f64,
    order: &HistoryOrder,
    spec: &BinningSpec,
) -> Result<CausalMatrix> {
    let raw = score_matrix(sample, order, spec)?;
    CausalMatrix::from_scores(sample.n_dims(), &raw, threshold)
}

/// Runs `f` over `0..n` on up to `threads` scoped workers and returns the
/// results in index order.
pub(crate) fn parallel_map<T: Send>(
    n: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Matrices for every sample of a dataset, honouring `cfg.scope`.
pub fn build_matrices(dataset: &Dataset, cfg: &CausalConfig, threads: usize) -> Result<Vec<CausalMatrix>> {
    cfg.validate()?;
    let n = dataset.n_dims;
    let raws = parallel_map(dataset.len(), threads, |i| {
        score_matrix(&dataset.samples[i], &cfg.order, &cfg.binning)
    })?;
    match cfg.scope {
        GraphScope::Sample => raws
            .iter()
            .map(|r| CausalMatrix::from_scores(n, r, cfg.threshold))
            .collect(),
        GraphScope::DatasetMean => {
            let shared = mean_matrix(n, &raws, cfg.threshold)?;
            Ok(vec![shared; dataset.len()])
        }
    }
}

fn mean_matrix(n: usize, raws: &[Vec<f64>], threshold: f64) -> Result<CausalMatrix> {
    let mut mean = vec![0.0; n * n];
    for r in raws {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    let count = raws.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    CausalMatrix::from_scores(n, &mean, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausalEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Directed weighted view of a [`CausalMatrix`]; nodes are dimension
/// indices and edges are listed in row-major matrix order.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalGraph {
    pub n: usize,
    pub edges: Vec<CausalEdge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(GraphFormat::Dot),
            "json" => Ok(GraphFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown graph format {other:?} (expected dot or json)"
            ))),
        }
    }
}

impl CausalGraph {
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph causal {\n");
        for v in 0..self.n {
            let _ = writeln!(out, "  {v};");
        }
        for e in &self.edges {
            let _ = writeln!(out, "  {} -> {} [label=\"{:.4}\"];", e.from, e.to, e.weight);
        }
        out.push_str("}\n");
        out
    }

    /// Dense matrix form of the graph.
    pub fn to_matrix(&self, threshold: f64) -> CausalMatrix {
        let mut m = CausalMatrix::empty(self.n, threshold);
        for e in &self.edges {
            m.scores[e.from * self.n + e.to] = e.weight;
        }
        m
    }
}

/// Renders a matrix as DOT (graph view) or JSON (full matrix + threshold).
pub fn export(matrix: &CausalMatrix, format: GraphFormat) -> Result<String> {
    match format {
        GraphFormat::Dot => Ok(matrix.to_graph().to_dot()),
        GraphFormat::Json => matrix.to_json(),
    }
}
