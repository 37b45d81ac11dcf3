//! Full classifier: encoder node features, GIN over the causal graph,
//! mean readout and a two-layer head. Training uses cross-entropy and
//! Adam; causal matrices are computed once before the first epoch.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{build_causal_matrix, build_matrices, parallel_map, CausalConfig, CausalMatrix};
use crate::dataset::{batch_indices, Dataset, NormalizationStats, TimeSeriesSample};
use crate::encoder::{Encoder, EncoderConfig, Init};
use crate::error::{Error, Result};
use crate::gnn::{gin_stack, readout, GinConfig, GinLayer};
use crate::tensor::params::SerializedParam;
use crate::tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Architecture of a model, tied to a dataset's shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_dims: usize,
    pub length: usize,
    pub n_classes: usize,
    /// Class names by label index; empty when unknown.
    #[serde(default)]
    pub class_names: Vec<String>,
    pub encoder: EncoderConfig,
    pub gin: GinConfig,
    /// Graph construction used for inputs to this model.
    #[serde(default)]
    pub causal: CausalConfig,
    /// Statistics applied to raw inputs before inference, if any.
    #[serde(default)]
    pub normalization: Option<NormalizationStats>,
}

impl ModelConfig {
    pub fn for_dataset(ds: &Dataset, encoder: &EncoderConfig, gin: &GinConfig) -> Self {
        ModelConfig {
            n_dims: ds.n_dims,
            length: ds.length,
            n_classes: ds.n_classes,
            class_names: ds.class_names.clone(),
            encoder: encoder.resolved(ds.n_dims),
            gin: *gin,
            causal: CausalConfig::default(),
            normalization: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dims == 0 || self.length == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "model needs at least one dimension, timestep and class".into(),
            ));
        }
        self.encoder.validate(self.n_dims)?;
        self.causal.validate()?;
        self.gin.validate()
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.n_dims != self.n_dims || ds.length != self.length || ds.n_classes != self.n_classes {
            return Err(Error::Config(format!(
                "dataset is {}x{} with {} classes, model expects {}x{} with {}",
                ds.n_dims, ds.length, ds.n_classes, self.n_dims, self.length, self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Head {
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

#[derive(Clone, Debug)]
pub struct CaLoNetModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    gin: Vec<GinLayer>,
    head: Head,
}

impl CaLoNetModel {
    /// Fresh model with seeded `±1/sqrt(fan_in)` weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let encoder = Encoder::new(&mut init, &config.encoder, config.n_dims)?;
        let d = encoder.cfg.node_dim;
        let hidden = config.gin.mlp_hidden.unwrap_or(d);
        let gin = (0..config.gin.n_layers)
            .map(|k| GinLayer::new(&mut init, &format!("gin.layer{k}"), d, hidden, config.gin.eps_learnable))
            .collect::<Result<_>>()?;
        let m = config.n_classes;
        let head = Head {
            w0: init.uniform("head.w0", &[d, d], d)?,
            b0: init.uniform("head.b0", &[d], d)?,
            w1: init.uniform("head.w1", &[d, m], d)?,
            b1: init.uniform("head.b1", &[m], d)?,
        };
        let config = ModelConfig {
            encoder: encoder.cfg,
            ..config
        };
        Ok(CaLoNetModel {
            config,
            params,
            encoder,
            gin,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn gin_layers(&self) -> &[GinLayer] {
        &self.gin
    }

    /// Ids of the classifier head parameters `(w0, b0, w1, b1)`.
    pub fn head_params(&self) -> [ParamId; 4] {
        [self.head.w0, self.head.b0, self.head.w1, self.head.b1]
    }

    /// Records the forward pass of one sample `x: [D, L]`; returns logits `[M]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, matrix: &CausalMatrix) -> Result<Var> {
        self.forward_with(tape, &self.params, x, matrix)
    }

    /// As [`forward`](Self::forward), reading parameter values from `store`,
    /// which must be laid out like [`params`](Self::params).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, x: Var, matrix: &CausalMatrix) -> Result<Var> {
        if store.len() != self.params.len() {
            return Err(Error::InvalidArgument("parameter store does not match the model".into()));
        }
        let shape = tape.shape(x).to_vec();
        if shape != [self.config.n_dims, self.config.length] {
            return Err(Error::shape(
                "forward",
                &shape,
                &[self.config.n_dims, self.config.length],
            ));
        }
        let h = self.encoder.forward(tape, store, x)?;
        let h = gin_stack(tape, store, h, matrix, &self.gin, &self.config.gin)?;
        let g = readout(tape, h)?;
        let d = tape.shape(g)[0];
        let g = tape.reshape(g, &[1, d])?;
        let (w0, b0) = (tape.param(store, self.head.w0), tape.param(store, self.head.b0));
        let (w1, b1) = (tape.param(store, self.head.w1), tape.param(store, self.head.b1));
        let z = tape.matmul(g, w0)?;
        let z = tape.add(z, b0)?;
        let z = tape.relu(z)?;
        let z = tape.matmul(z, w1)?;
        let z = tape.add(z, b1)?;
        tape.reshape(z, &[self.config.n_classes])
    }

    /// Applies the stored normalization, if any, to raw data.
    pub fn prepare(&self, raw: &Dataset) -> Dataset {
        match &self.config.normalization {
            Some(stats) => stats.apply(raw),
            None => raw.clone(),
        }
    }

    pub fn set_normalization(&mut self, stats: Option<NormalizationStats>) {
        self.config.normalization = stats;
    }

    /// Causal matrix of one prepared sample under the model's settings.
    pub fn causal_matrix(&self, sample: &TimeSeriesSample) -> Result<CausalMatrix> {
        let c = &self.config.causal;
        build_causal_matrix(sample, c.threshold, &c.order, &c.binning)
    }

    pub fn logits(&self, sample: &TimeSeriesSample, matrix: &CausalMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(sample_tensor(sample)?);
        let z = self.forward(&mut tape, x, matrix)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn predict(&self, sample: &TimeSeriesSample, matrix: &CausalMatrix) -> Result<usize> {
        Ok(argmax(&self.logits(sample, matrix)?))
    }

    /// Writes the versioned JSON model document.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            params: self.params.to_serialized(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Corrupt("missing format_version".into()))?;
        if found != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let doc: ModelDocument =
            serde_json::from_value(value).map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut model = CaLoNetModel::new(doc.config, 0).map_err(|e| Error::Corrupt(e.to_string()))?;
        model.params.assign_serialized(doc.params)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    config: ModelConfig,
    params: Vec<SerializedParam>,
}

/// `[D, L]` tensor of a sample.
pub fn sample_tensor(sample: &TimeSeriesSample) -> Result<Tensor> {
    Tensor::from_rows(&sample.values)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy (natural log) of a logits batch `[N, M]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = tape.cross_entropy(z, labels)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub causal: CausalConfig,
    /// Worker threads for causal precomputation and evaluation.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            causal: CausalConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be a non-negative number".into()));
        }
        self.causal.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// `confusion[true][predicted]` on the test split after the last epoch.
    pub confusion: Vec<Vec<usize>>,
}

impl TrainReport {
    /// `epoch,train_loss,train_acc,test_loss,test_acc`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_loss,test_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                e.epoch, e.train_loss, e.train_acc, e.test_loss, e.test_acc
            ));
        }
        out
    }

    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, mean loss and confusion matrix with precomputed matrices.
pub fn evaluate_with(
    model: &CaLoNetModel,
    dataset: &Dataset,
    matrices: &[CausalMatrix],
    threads: usize,
) -> Result<Evaluation> {
    model.config.check_dataset(dataset)?;
    if matrices.len() != dataset.len() {
        return Err(Error::InvalidArgument(
            "one causal matrix per sample is required".into(),
        ));
    }
    let logits = parallel_map(dataset.len(), threads, |i| {
        model.logits(&dataset.samples[i], &matrices[i])
    })?;
    let m = model.config.n_classes;
    let mut confusion = vec![vec![0; m]; m];
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut correct = 0;
    for (s, z) in dataset.samples.iter().zip(&logits) {
        let p = argmax(z);
        confusion[s.label][p] += 1;
        correct += usize::from(p == s.label);
        predictions.push(p);
    }
    let (accuracy, loss) = if dataset.is_empty() {
        (0.0, f64::NAN)
    } else {
        let batch = Tensor::new(vec![dataset.len(), m], logits.concat())?;
        (
            correct as f64 / dataset.len() as f64,
            cross_entropy(&batch, &dataset.labels())?,
        )
    };
    Ok(Evaluation {
        accuracy,
        loss,
        predictions,
        confusion,
    })
}

/// Evaluates `model` on an already prepared `dataset`, building causal
/// matrices with the model's own causal settings.
pub fn evaluate(model: &CaLoNetModel, dataset: &Dataset, threads: usize) -> Result<Evaluation> {
    model.config.check_dataset(dataset)?;
    let matrices = build_matrices(dataset, &model.config.causal, threads)?;
    evaluate_with(model, dataset, &matrices, threads)
}

/// One optimizer step on `batch` (indices into `dataset`). Returns the
/// batch loss before the step.
pub fn train_step(
    model: &mut CaLoNetModel,
    adam: &mut Adam,
    dataset: &Dataset,
    matrices: &[CausalMatrix],
    batch: &[usize],
) -> Result<f64> {
    let m = model.config.n_classes;
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(batch.len());
    for &i in batch {
        let x = tape.constant(sample_tensor(&dataset.samples[i])?);
        let z = model.forward(&mut tape, x, &matrices[i])?;
        rows.push(tape.reshape(z, &[1, m])?);
    }
    let logits = tape.concat(&rows, 0)?;
    let labels: Vec<usize> = batch.iter().map(|&i| dataset.samples[i].label).collect();
    let loss = tape.cross_entropy(logits, &labels)?;
    model.params.zero_grad();
    tape.backward(loss, &mut model.params)?;
    adam.step(&mut model.params)?;
    Ok(tape.value(loss).data()[0])
}

/// Seed of the batch permutation for `epoch`.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1)
}

/// Trains a fresh model. `train_set` and `test_set` must share shape and
/// classes; the same seed gives an identical report.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    encoder: &EncoderConfig,
    gin: &GinConfig,
    cfg: &TrainConfig,
) -> Result<(CaLoNetModel, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let config = ModelConfig {
        causal: cfg.causal,
        ..ModelConfig::for_dataset(train_set, encoder, gin)
    };
    config.check_dataset(test_set)?;
    let mut model = CaLoNetModel::new(config, cfg.seed)?;

    let train_m = build_matrices(train_set, &cfg.causal, cfg.threads)?;
    let test_m = build_matrices(test_set, &cfg.causal, cfg.threads)?;

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut confusion = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for batch in batch_indices(train_set.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch))? {
            train_step(&mut model, &mut adam, train_set, &train_m, &batch)?;
        }
        let tr = evaluate_with(&model, train_set, &train_m, cfg.threads)?;
        let te = evaluate_with(&model, test_set, &test_m, cfg.threads)?;
        confusion = te.confusion;
        epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            test_loss: te.loss,
            test_acc: te.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, TrainReport { epochs, confusion }))
}

/// Input-gradient attribution `|d logit_pred / d x|`, min-max scaled to
/// `[0, 1]` per dimension. A dimension with no spread maps to zeros.
pub fn saliency(model: &CaLoNetModel, sample: &TimeSeriesSample, matrix: &CausalMatrix) -> Result<Vec<Vec<f64>>> {
    let raw = raw_saliency(model, sample, matrix)?;
    Ok(raw
        .into_iter()
        .map(|row| {
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                row.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect())
}

/// Unnormalized `|d logit_pred / d x|`, shape `[D][L]`.
pub fn raw_saliency(model: &CaLoNetModel, sample: &TimeSeriesSample, matrix: &CausalMatrix) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = tape.input(sample_tensor(sample)?);
    let z = model.forward(&mut tape, x, matrix)?;
    let pred = argmax(tape.value(z).data());
    let picked = tape.slice(z, 0, pred, 1)?;
    let target = tape.sum(picked)?;
    let mut scratch = model.params.clone();
    tape.backward(target, &mut scratch)?;
    let len = sample.len();
    let grad = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; sample.n_dims() * len]);
    Ok(grad
        .chunks(len.max(1))
        .map(|r| r.iter().map(|v| v.abs()).collect())
        .collect())
}
