//! Two-hidden-layer dense networks for rain detection and estimation.
//!
//! Both networks share the shape `input -> 6 (ReLU) -> 6 (ReLU) -> 1`; the
//! detector ends in a sigmoid and the estimator in a linear unit. Inputs are
//! standardized with statistics fitted on the training split and stored with
//! the weights.

mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MinuteFeature;
use crate::ingest::Timestamp;

pub use train::{
    detector_threshold_sweep, pos_weight_for, train, EpochRecord, LabeledRow, TrainConfig, TrainOutcome, MAX_POS_WEIGHT,
};

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const HIDDEN_UNITS: usize = 6;
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detector,
    Estimator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sigmoid,
    Linear,
}

impl Task {
    pub fn head(self) -> Head {
        match self {
            Task::Detector => Head::Sigmoid,
            Task::Estimator => Head::Linear,
        }
    }
}

/// Closed-form parameter count for a given input width.
pub fn param_count(input_dim: usize) -> usize {
    (input_dim * HIDDEN_UNITS + HIDDEN_UNITS) + (HIDDEN_UNITS * HIDDEN_UNITS + HIDDEN_UNITS) + (HIDDEN_UNITS + 1)
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[o];
            out.push(z);
        }
    }

    fn len(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Per-feature standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation; constant columns get unit
    /// scale so they standardize to zero.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::EmptyInput("normalization over zero rows"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "row of {} features, expected {dim}",
                    r.len()
                )));
            }
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub schema_version: u32,
    pub task: Task,
    pub head: Head,
    pub input_dim: usize,
    pub norm_stats: NormStats,
    /// Decision threshold on the sigmoid output; unused by the estimator.
    pub threshold: f64,
    pub layers: Vec<Dense>,
}

/// Cached activations of one forward pass, used by backpropagation.
struct Trace {
    pre: [Vec<f64>; 3],
    post: [Vec<f64>; 2],
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    /// Uniform He initialization in `±sqrt(6 / fan_in)`; biases start at zero.
    pub fn init(input_dim: usize, task: Task, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidModel("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [
            (input_dim, HIDDEN_UNITS),
            (HIDDEN_UNITS, HIDDEN_UNITS),
            (HIDDEN_UNITS, 1),
        ];
        let layers = shapes
            .iter()
            .map(|&(inputs, outputs)| {
                let limit = (6.0 / inputs as f64).sqrt();
                let mut layer = Dense::zeros(inputs, outputs);
                layer.weights.iter_mut().for_each(|w| *w = rng.gen_range(-limit..limit));
                layer
            })
            .collect();
        Ok(MlpModel {
            schema_version: MODEL_SCHEMA_VERSION,
            task,
            head: task.head(),
            input_dim,
            norm_stats: NormStats::identity(input_dim),
            threshold: DEFAULT_DETECTION_THRESHOLD,
            layers,
        })
    }

    pub fn zeros(input_dim: usize, task: Task) -> Self {
        MlpModel {
            schema_version: MODEL_SCHEMA_VERSION,
            task,
            head: task.head(),
            input_dim,
            norm_stats: NormStats::identity(input_dim),
            threshold: DEFAULT_DETECTION_THRESHOLD,
            layers: vec![
                Dense::zeros(input_dim, HIDDEN_UNITS),
                Dense::zeros(HIDDEN_UNITS, HIDDEN_UNITS),
                Dense::zeros(HIDDEN_UNITS, 1),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if self.head != self.task.head() {
            return Err(Error::InvalidModel("head does not match task".into()));
        }
        let expected = [
            (self.input_dim, HIDDEN_UNITS),
            (HIDDEN_UNITS, HIDDEN_UNITS),
            (HIDDEN_UNITS, 1),
        ];
        if self.layers.len() != 3 {
            return Err(Error::InvalidModel(format!("{} layers", self.layers.len())));
        }
        for (l, &(i, o)) in self.layers.iter().zip(&expected) {
            if l.inputs != i || l.outputs != o || l.weights.len() != i * o || l.biases.len() != o {
                return Err(Error::InvalidModel(format!("layer shape {}x{}", l.outputs, l.inputs)));
            }
        }
        if self.norm_stats.mean.len() != self.input_dim || self.norm_stats.std.len() != self.input_dim {
            return Err(Error::InvalidModel("normalization width".into()));
        }
        if self.norm_stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidModel("non-positive normalization scale".into()));
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidModel("non-finite weight".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidModel(format!("threshold {}", self.threshold)));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut z1 = Vec::with_capacity(HIDDEN_UNITS);
        self.layers[0].forward(x, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
        let mut z2 = Vec::with_capacity(HIDDEN_UNITS);
        self.layers[1].forward(&a1, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|z| z.max(0.0)).collect();
        let mut z3 = Vec::with_capacity(1);
        self.layers[2].forward(&a2, &mut z3);
        Trace {
            pre: [z1, z2, z3],
            post: [a1, a2],
        }
    }

    /// Output-unit pre-activation for an already standardized row.
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.trace(x).pre[2][0]
    }

    /// Network output for an already standardized row.
    pub fn forward_standardized(&self, x: &[f64]) -> f64 {
        let z = self.logit(x);
        match self.head {
            Head::Sigmoid => sigmoid(z),
            Head::Linear => z,
        }
    }

    /// Standardizes a raw feature row with the stored statistics, then runs
    /// the network.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "row of {} features for a model expecting {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(self.forward_standardized(&self.norm_stats.apply(x)))
    }

    /// Mean loss and its exact gradient over a batch of standardized rows.
    ///
    /// The detector uses binary cross-entropy with positives weighted by
    /// `pos_weight`; the estimator uses mean squared error and ignores it.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[f64], pos_weight: f64) -> (f64, Vec<f64>) {
        let n = xs.len().max(1) as f64;
        let mut grads: Vec<Dense> = self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        let mut loss = 0.0;

        for (x, &y) in xs.iter().zip(ys) {
            let tr = self.trace(x);
            let z = tr.pre[2][0];
            let delta_out = match self.head {
                Head::Sigmoid => {
                    let c = if y > 0.5 { pos_weight } else { 1.0 };
                    loss += c * (softplus(z) - y * z);
                    c * (sigmoid(z) - y) / n
                }
                Head::Linear => {
                    let r = z - y;
                    loss += r * r;
                    2.0 * r / n
                }
            };

            let mut delta = vec![delta_out];
            for li in (0..3).rev() {
                let input: &[f64] = if li == 0 { x } else { &tr.post[li - 1] };
                let layer = &self.layers[li];
                let g = &mut grads[li];
                for (o, d) in delta.iter().enumerate() {
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if li == 0 {
                    break;
                }
                let below = &tr.pre[li - 1];
                delta = (0..layer.inputs)
                    .map(|i| {
                        if below[i] <= 0.0 {
                            return 0.0;
                        }
                        delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| d * layer.weights[o * layer.inputs + i])
                            .sum()
                    })
                    .collect();
            }
        }

        let mut flat = Vec::with_capacity(self.param_count());
        for g in &grads {
            flat.extend_from_slice(&g.weights);
            flat.extend_from_slice(&g.biases);
        }
        (loss / n, flat)
    }

    /// Mean loss alone, for finite-difference checks and validation.
    pub fn loss(&self, xs: &[&[f64]], ys: &[f64], pos_weight: f64) -> f64 {
        let n = xs.len().max(1) as f64;
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| {
                let z = self.logit(x);
                match self.head {
                    Head::Sigmoid => {
                        let c = if y > 0.5 { pos_weight } else { 1.0 };
                        c * (softplus(z) - y * z)
                    }
                    Head::Linear => (z - y) * (z - y),
                }
            })
            .sum::<f64>()
            / n
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: MlpModel = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("model", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinutePrediction {
    pub minute: Timestamp,
    pub p_rain: f64,
    /// Estimator output clamped at zero, mm per minute.
    pub intensity_mm_per_min: f64,
}

/// Runs both networks on one minute row.
pub fn predict_minute(detector: &MlpModel, estimator: &MlpModel, row: &MinuteFeature) -> Result<MinutePrediction> {
    if detector.task != Task::Detector || estimator.task != Task::Estimator {
        return Err(Error::InvalidModel("expected a detector and an estimator".into()));
    }
    let x = row.row();
    Ok(MinutePrediction {
        minute: row.minute,
        p_rain: detector.forward(&x)?,
        intensity_mm_per_min: estimator.forward(&x)?.max(0.0),
    })
}
