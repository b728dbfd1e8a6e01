//! Small feed-forward network trained by backpropagation.
//!
//! One type serves both as the neural spatial mapping function (regression
//! or classification over neighbor features) and as the self-training
//! classifier. Layers are dense; hidden units use ReLU or tanh; the output is
//! softmax (trained with cross-entropy) or identity (trained with MSE).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SurfError;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub hidden: Activation,
    pub output: OutputKind,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn init_layer(inputs: usize, outputs: usize, hidden: Activation, rng: &mut ChaCha8Rng) -> Layer {
    let limit = match hidden {
        Activation::Relu => (6.0 / inputs as f64).sqrt(),
        Activation::Tanh => (6.0 / (inputs + outputs) as f64).sqrt(),
    };
    Layer {
        inputs,
        outputs,
        weights: (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
        biases: vec![0.0; outputs],
    }
}

impl MlpModel {
    /// Seeded random initialization. `layer_sizes` lists input, hidden and
    /// output widths.
    pub fn new(layer_sizes: &[usize], hidden: Activation, output: OutputKind, seed: u64) -> Result<Self, SurfError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(SurfError::InvalidParameter(format!("bad layer sizes {layer_sizes:?}")));
        }
        if output == OutputKind::Softmax && layer_sizes[layer_sizes.len() - 1] < 2 {
            return Err(SurfError::InvalidParameter("softmax output needs at least 2 units".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| init_layer(w[0], w[1], hidden, &mut rng))
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.parameter_count(), "parameter vector length");
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
    }

    /// Replaces the final layer with a fresh seeded initialization.
    pub fn reinit_output_layer(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.layers.last_mut().expect("at least one layer");
        *last = init_layer(last.inputs, last.outputs, self.hidden, &mut rng);
    }

    /// Activations of every layer, input first, final output last.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&acts[i], &mut z);
            if i < last {
                z.iter_mut().for_each(|v| *v = self.hidden.apply(*v));
            } else if self.output == OutputKind::Softmax {
                z = softmax(&z);
            }
            acts.push(z);
        }
        acts
    }

    fn check_input(&self, x: &[f64]) -> Result<(), SurfError> {
        if x.len() != self.input_dim() {
            return Err(SurfError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Network output: class probabilities for softmax models, raw values
    /// otherwise.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, SurfError> {
        self.check_input(x)?;
        Ok(self.trace(x).pop().expect("non-empty trace"))
    }

    /// Activations feeding the final layer.
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>, SurfError> {
        self.check_input(x)?;
        let mut t = self.trace(x);
        t.pop();
        Ok(t.pop().expect("input is always present"))
    }
}

pub fn mlp_predict(model: &MlpModel, features: &[f64]) -> Result<Vec<f64>, SurfError> {
    model.predict(features)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<Vec<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, targets: Targets) -> Result<Self, SurfError> {
        if features.len() != targets.len() {
            return Err(SurfError::DimensionMismatch {
                expected: features.len(),
                got: targets.len(),
            });
        }
        if let Some(first) = features.first() {
            if let Some(bad) = features.iter().find(|f| f.len() != first.len()) {
                return Err(SurfError::DimensionMismatch {
                    expected: first.len(),
                    got: bad.len(),
                });
            }
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            targets: self.targets.subset(idx),
        }
    }
}

/// Per-layer gradient of the mean loss, matching [`MlpModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(model: &MlpModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    /// Flattened in the same order as [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

fn check_targets(model: &MlpModel, targets: &Targets) -> Result<(), SurfError> {
    match (model.output, targets) {
        (OutputKind::Softmax, Targets::Classes(c)) => match c.iter().find(|&&c| c >= model.output_dim()) {
            Some(&bad) => Err(SurfError::InvalidParameter(format!(
                "class index {bad} out of range for {} outputs",
                model.output_dim()
            ))),
            None => Ok(()),
        },
        (OutputKind::Identity, Targets::Values(v)) => match v.iter().find(|t| t.len() != model.output_dim()) {
            Some(bad) => Err(SurfError::DimensionMismatch {
                expected: model.output_dim(),
                got: bad.len(),
            }),
            None => Ok(()),
        },
        _ => Err(SurfError::InvalidParameter("targets do not match the output kind".into())),
    }
}

/// Mean loss and its gradient over `idx`, backpropagating only into layers
/// at or above `first_trainable`.
fn batch_gradient(
    model: &MlpModel,
    data: &Dataset,
    idx: &[usize],
    first_trainable: usize,
    grads: &mut Gradients,
) -> f64 {
    for g in grads.weights.iter_mut().chain(grads.biases.iter_mut()) {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let scale = 1.0 / idx.len() as f64;
    let mut loss = 0.0;
    let last = model.layers.len() - 1;
    for &i in idx {
        let acts = model.trace(&data.features[i]);
        let out = &acts[last + 1];
        // dL/dz for the final affine output
        let mut delta: Vec<f64> = match &data.targets {
            Targets::Classes(c) => {
                let y = c[i];
                loss += -out[y].max(PROB_FLOOR).ln();
                out.iter()
                    .enumerate()
                    .map(|(k, p)| (p - if k == y { 1.0 } else { 0.0 }) * scale)
                    .collect()
            }
            Targets::Values(v) => {
                let y = &v[i];
                let n_out = y.len() as f64;
                loss += out.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n_out;
                out.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / n_out * scale).collect()
            }
        };
        for l in (first_trainable..=last).rev() {
            let layer = &model.layers[l];
            let input = &acts[l];
            let gw = &mut grads.weights[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                grads.biases[l][o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if l == first_trainable {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= model.hidden.derivative(*a);
            }
            delta = prev;
        }
    }
    loss * scale
}

/// Mean loss and full gradient over the whole dataset.
pub fn loss_and_gradient(model: &MlpModel, data: &Dataset) -> Result<(f64, Gradients), SurfError> {
    check_targets(model, &data.targets)?;
    if let Some(f) = data.features.first() {
        model.check_input(f)?;
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut grads = Gradients::zeros(model);
    let loss = batch_gradient(model, data, &idx, 0, &mut grads);
    Ok((loss, grads))
}

/// Mean loss over the dataset.
pub fn loss(model: &MlpModel, data: &Dataset) -> Result<f64, SurfError> {
    Ok(loss_and_gradient(model, data)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch size; 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Full,
    HeadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub trace: Vec<EpochLoss>,
}

/// Gradient descent on `model`, updating only layers `first_trainable..`.
/// Frozen layers are left bitwise untouched. Each epoch shuffles with a
/// generator derived from `cfg.seed` unless training full-batch.
pub fn train_layers(
    mut model: MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    first_trainable: usize,
    stage: Stage,
) -> Result<TrainedModel, SurfError> {
    if first_trainable >= model.layers.len() {
        return Err(SurfError::InvalidParameter("no trainable layers".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(SurfError::InvalidParameter("lr must be positive and momentum in [0, 1)".into()));
    }
    let mut trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainedModel { model, trace });
    }
    if data.is_empty() {
        return Err(SurfError::NoSamples);
    }
    check_targets(&model, &data.targets)?;
    model.check_input(&data.features[0])?;

    let n = data.len();
    let batch = if cfg.batch_size == 0 || cfg.batch_size >= n { n } else { cfg.batch_size };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4e5);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = Gradients::zeros(&model);
    let mut velocity = Gradients::zeros(&model);

    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let l = batch_gradient(&model, data, chunk, first_trainable, &mut grads);
            if !l.is_finite() {
                return Err(SurfError::Diverged { epoch });
            }
            epoch_loss += l * chunk.len() as f64;
            for li in first_trainable..model.layers.len() {
                let layer = &mut model.layers[li];
                let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
                let g = grads.weights[li].iter().chain(&grads.biases[li]);
                let v = velocity.weights[li].iter_mut().chain(velocity.biases[li].iter_mut());
                for ((p, g), v) in params.zip(g).zip(v) {
                    *v = cfg.momentum * *v + g;
                    *p -= cfg.lr * *v;
                }
            }
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || model.parameters().iter().any(|p| !p.is_finite()) {
            return Err(SurfError::Diverged { epoch });
        }
        trace.push(EpochLoss {
            stage,
            epoch,
            loss: mean,
        });
    }
    Ok(TrainedModel { model, trace })
}

/// Trains a freshly initialized network. The output kind follows the
/// targets: class indices train a softmax classifier, real vectors a
/// regressor.
pub fn mlp_train(data: &Dataset, arch: &[usize], hidden: Activation, cfg: &TrainConfig) -> Result<TrainedModel, SurfError> {
    let output = match data.targets {
        Targets::Classes(_) => OutputKind::Softmax,
        Targets::Values(_) => OutputKind::Identity,
    };
    let model = MlpModel::new(arch, hidden, output, cfg.seed)?;
    train_layers(model, data, cfg, 0, Stage::Full)
}
