//! Optimizers and the training loop.
//!
//! Each epoch visits the training set in a seeded order, minimises
//! `L* + L_s + L_c` with SGD or Adam, then records inference-mode validation
//! loss (cross-entropy only) and accuracy, the mean RFAV entropy of every
//! monitored layer on the monitor set, and the filter correlation of those
//! layers. Training always runs the full epoch budget.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{
    build_network, regularization_profile, Architecture, LossNodes, Network, NetworkSpec,
    ProfileName, Size, IMAGES_INPUT, LABELS_INPUT,
};
use crate::autodiff::{Graph, Mode};
use crate::data::{self, Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::export::CorrelationHistogram;
use crate::regularizers::{pearson_filter_correlation, DecorrelationMode, RegProfile};
use crate::sparsity::{batch_entropies, sparsity_heatmap, RfavField, SparsityHeatmap};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Samples per forward pass when evaluating without gradients.
const EVAL_BATCH: usize = 250;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkChoice {
    pub name: Architecture,
    pub size: Size,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub network: NetworkChoice,
    #[serde(default)]
    pub profile: ProfileName,
    #[serde(default)]
    pub decorrelation: DecorrelationMode,
    /// Training-pool samples held out for sparsity metrics.
    #[serde(default = "default_monitor")]
    pub monitor_count: usize,
    /// Heatmaps (monitor sample 0) are recorded at epoch 0, the final epoch
    /// and every `heatmap_interval` epochs when it is nonzero.
    #[serde(default)]
    pub heatmap_interval: usize,
    #[serde(default)]
    pub export_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
}

fn default_lr() -> f64 {
    0.01
}

fn default_batch() -> usize {
    64
}

fn default_monitor() -> usize {
    1000
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is accepted so a run can be made with frozen parameters
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.monitor_count == 0 {
            return Err(Error::invalid("monitor_count must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn network_spec(&self, data: &Dataset) -> NetworkSpec {
        NetworkSpec::new(
            self.network.name,
            self.network.size,
            data.image_shape(),
            data.class_count(),
        )
    }
}

/// Metrics at the end of one epoch (epoch 0 describes the initialization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches, penalties included.
    /// For epoch 0 this is the inference-mode cross-entropy of the train set.
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Cross-entropy only; penalty terms are excluded.
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Aligned with `History::layers`.
    pub mean_entropy: Vec<f64>,
    /// Mean `|c_{d,e}|` over the strict lower triangle, per monitored layer.
    pub mean_abs_correlation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub layers: Vec<String>,
    pub initial: EpochRecord,
    /// One record per completed epoch.
    pub epochs: Vec<EpochRecord>,
    /// Per monitored layer, with rows for epoch 0 and every completed epoch.
    pub histograms: Vec<CorrelationHistogram>,
    pub heatmaps: Vec<SparsityHeatmap>,
}

impl History {
    pub fn layer_index(&self, layer: &str) -> Option<usize> {
        self.layers.iter().position(|l| l == layer)
    }

    /// Highest validation accuracy over all completed epochs.
    pub fn best_val_accuracy(&self) -> f64 {
        self.epochs
            .iter()
            .map(|r| r.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_val_loss(&self) -> f64 {
        self.epochs
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.val_loss).collect()
    }

    /// Mean entropy of `layer` for epochs 0..=n.
    pub fn entropy_series(&self, layer: &str) -> Option<Vec<f64>> {
        let i = self.layer_index(layer)?;
        Some(
            std::iter::once(&self.initial)
                .chain(&self.epochs)
                .map(|r| r.mean_entropy[i])
                .collect(),
        )
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Adam moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: AdamHyper) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

/// Optimizer bound to the parameters of one graph.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        hyper: AdamHyper,
        states: Vec<AdamState>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, graph: &Graph) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                hyper: AdamHyper::default(),
                states: graph
                    .params()
                    .iter()
                    .map(|p| AdamState::new(p.value.len()))
                    .collect(),
            },
        }
    }

    /// Applies the accumulated gradients and clears them. Fails before any
    /// update if a gradient is non-finite.
    pub fn step(&mut self, graph: &mut Graph) -> Result<()> {
        for p in graph.params() {
            if let Some(g) = p.value.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of parameter `{}`", p.name),
                    });
                }
            }
        }
        for (i, p) in graph.params_mut().iter_mut().enumerate() {
            let Some(g) = p.value.take_grad() else {
                continue;
            };
            match self {
                Optimizer::Sgd { lr } => sgd_step(p.value.data_mut(), &g, *lr),
                Optimizer::Adam { lr, hyper, states } => {
                    adam_step(p.value.data_mut(), &g, &mut states[i], *lr, *hyper)
                }
            }
        }
        Ok(())
    }
}

/// How the training loss is attached to a freshly built network.
pub trait Objective {
    fn attach(&self, network: &mut Network) -> Result<LossNodes>;
}

/// `L* + L_s + L_c` for a regularization profile.
#[derive(Clone, Debug)]
pub struct Regularized {
    pub profile: RegProfile,
    pub mode: DecorrelationMode,
}

impl Objective for Regularized {
    fn attach(&self, network: &mut Network) -> Result<LossNodes> {
        network.attach_regularized_loss(&self.profile, self.mode)
    }
}

/// Cross-entropy alone; no regularizer code is reached.
#[derive(Clone, Copy, Debug, Default)]
pub struct Unregularized;

impl Objective for Unregularized {
    fn attach(&self, network: &mut Network) -> Result<LossNodes> {
        Ok(LossNodes {
            base: network.base_loss,
            sparsity: None,
            decorrelation: None,
            total: network.base_loss,
        })
    }
}

/// Train, validation and monitor sets of one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub validation: Dataset,
    pub monitor: Dataset,
}

impl RunData {
    /// Loads the configured source and splits the monitor set off the
    /// training pool.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let tv = config.dataset.load()?;
        let (train, monitor) = data::split_monitor(&tv.train, config.monitor_count, config.seed)?;
        Ok(Self {
            train,
            validation: tv.validation,
            monitor,
        })
    }
}

pub struct TrainOutcome {
    pub history: History,
    pub network: Network,
    pub losses: LossNodes,
}

/// Inference-mode cross-entropy and top-1 accuracy over `data`.
pub fn evaluate(network: &mut Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let eval = network
            .graph
            .evaluate(&[(IMAGES_INPUT, &x), (LABELS_INPUT, &y)], Mode::Inference)?;
        loss_sum += eval.scalar(network.base_loss) * chunk.len() as f64;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
        correct += count_correct(eval.get(network.logits), &labels);
    }
    Ok((
        loss_sum / data.len() as f64,
        correct as f64 / data.len() as f64,
    ))
}

/// Rows of `logits` whose first maximal entry is the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean entropy per tap over the monitor set, plus heatmaps of sample 0
/// when `heatmap_epoch` is given.
fn monitor_metrics(
    network: &mut Network,
    monitor: &Dataset,
    heatmap_epoch: Option<i64>,
) -> Result<(Vec<f64>, Vec<SparsityHeatmap>)> {
    let taps = network.taps.clone();
    let mut sums = vec![0.0; taps.len()];
    let mut counts = vec![0usize; taps.len()];
    let mut heatmaps = Vec::new();
    for chunk in (0..monitor.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let (x, y) = monitor.batch(chunk)?;
        let eval = network
            .graph
            .evaluate(&[(IMAGES_INPUT, &x), (LABELS_INPUT, &y)], Mode::Inference)?;
        for (t, tap) in taps.iter().enumerate() {
            let act = eval.get(tap.activation);
            for sample in batch_entropies(act)? {
                for h in sample {
                    sums[t] += h;
                    counts[t] += 1;
                }
            }
            if let (Some(epoch), 0) = (heatmap_epoch, chunk[0]) {
                let per = act.len() / act.shape()[0];
                let mut shape = act.shape()[1..].to_vec();
                if shape.len() == 1 {
                    shape.extend([1, 1]);
                }
                let first = Tensor::new(shape, act.data()[..per].to_vec())?;
                heatmaps.push(sparsity_heatmap(&RfavField::new(&tap.id, first)?, epoch)?);
            }
        }
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect();
    Ok((means, heatmaps))
}

fn correlation_metrics(
    network: &Network,
    histograms: &mut [CorrelationHistogram],
    epoch: i64,
) -> Result<Vec<f64>> {
    network
        .taps
        .iter()
        .zip(histograms)
        .map(|(tap, hist)| {
            let pid = network
                .graph
                .param_of(tap.weights)
                .expect("tap weights are parameters");
            let corr = pearson_filter_correlation(&network.graph.params()[pid.index()].value)?;
            hist.update(epoch, &corr)?;
            Ok(corr.mean_abs_lower())
        })
        .collect()
}

fn write_progress(out: &mut dyn Write, history: &History, record: &EpochRecord) {
    if record.epoch == 0 {
        let mut header = String::from("epoch\ttrain_loss\tval_loss\tval_accuracy");
        for l in &history.layers {
            header.push_str(&format!("\tentropy_{l}"));
        }
        let _ = writeln!(out, "{header}");
    }
    let mut line = format!(
        "{}\t{:.6}\t{:.6}\t{:.4}",
        record.epoch, record.train_loss, record.val_loss, record.val_accuracy
    );
    for h in &record.mean_entropy {
        line.push_str(&format!("\t{h:.6}"));
    }
    let _ = writeln!(out, "{line}");
}

/// Trains with the objective implied by `config.profile`.
pub fn train(config: &TrainConfig, progress: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let data = RunData::load(config)?;
    let objective = Regularized {
        profile: regularization_profile(config.profile),
        mode: config.decorrelation,
    };
    train_with(config, &data, &objective, progress)
}

pub fn train_with<O: Objective>(
    config: &TrainConfig,
    data: &RunData,
    objective: &O,
    mut progress: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.monitor.is_empty() || data.validation.is_empty() || data.train.is_empty() {
        return Err(Error::invalid(
            "train, validation and monitor sets must be non-empty",
        ));
    }
    let spec = config.network_spec(&data.train);
    let mut network = build_network(&spec, config.seed)?;
    let losses = objective.attach(&mut network)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &network.graph);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);

    let layers: Vec<String> = network.taps.iter().map(|t| t.id.clone()).collect();
    let mut histograms: Vec<CorrelationHistogram> =
        layers.iter().map(CorrelationHistogram::new).collect();
    let heatmap_due = |epoch: usize| {
        epoch == 0
            || epoch == config.epochs
            || (config.heatmap_interval > 0 && epoch % config.heatmap_interval == 0)
    };

    let (train_loss, train_accuracy) = evaluate(&mut network, &data.train)?;
    let (val_loss, val_accuracy) = evaluate(&mut network, &data.validation)?;
    let (mean_entropy, mut heatmaps) = monitor_metrics(&mut network, &data.monitor, Some(0))?;
    let mean_abs_correlation = correlation_metrics(&network, &mut histograms, 0)?;
    let mut history = History {
        layers,
        initial: EpochRecord {
            epoch: 0,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            mean_entropy,
            mean_abs_correlation,
        },
        epochs: Vec::with_capacity(config.epochs),
        histograms: Vec::new(),
        heatmaps: Vec::new(),
    };
    if let Some(out) = progress.as_deref_mut() {
        write_progress(out, &history, &history.initial);
    }

    for epoch in 1..=config.epochs {
        let batches = data::batch_iterator(
            data.train.len(),
            config.batch_size,
            config.seed,
            epoch as u64,
        );
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, indices) in batches.iter().enumerate() {
            let abort = |detail: String| Error::TrainingAborted {
                epoch,
                batch: b,
                detail,
            };
            let (x, y) = data.train.batch(indices)?;
            let eval = network
                .graph
                .evaluate(
                    &[(IMAGES_INPUT, &x), (LABELS_INPUT, &y)],
                    Mode::Training(&mut dropout_rng),
                )
                .map_err(|e| abort(e.to_string()))?;
            let loss = eval.scalar(losses.total);
            if !loss.is_finite() {
                return Err(abort(format!("training loss is {loss}")));
            }
            loss_sum += loss * indices.len() as f64;
            let labels: Vec<usize> = indices.iter().map(|&i| data.train.labels()[i]).collect();
            correct += count_correct(eval.get(network.logits), &labels);
            network.graph.zero_grad();
            network
                .graph
                .backward(&eval, losses.total)
                .map_err(|e| abort(e.to_string()))?;
            optimizer
                .step(&mut network.graph)
                .map_err(|e| abort(e.to_string()))?;
        }
        let (val_loss, val_accuracy) = evaluate(&mut network, &data.validation)?;
        let stamp = heatmap_due(epoch).then_some(epoch as i64);
        let (mean_entropy, maps) = monitor_metrics(&mut network, &data.monitor, stamp)?;
        heatmaps.extend(maps);
        let mean_abs_correlation = correlation_metrics(&network, &mut histograms, epoch as i64)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            train_accuracy: correct as f64 / data.train.len() as f64,
            val_loss,
            val_accuracy,
            mean_entropy,
            mean_abs_correlation,
        };
        if let Some(out) = progress.as_deref_mut() {
            write_progress(out, &history, &record);
        }
        history.epochs.push(record);
    }
    history.histograms = histograms;
    history.heatmaps = heatmaps;
    Ok(TrainOutcome {
        history,
        network,
        losses,
    })
}
