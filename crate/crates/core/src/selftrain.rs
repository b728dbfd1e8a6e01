//! Semi-automatic labeling by self-training.
//!
//! A classifier is first trained on a small expert-labeled, class-balanced
//! set. It then labels the unlabeled pool; predictions whose top probability
//! reaches the confidence threshold join the labeled set as pseudo labels and
//! the classifier is retrained. Rounds repeat until the round budget is spent
//! or a round accepts nothing.
//!
//! Training follows a two-stage schedule: the output layer alone, with every
//! earlier layer frozen, then all layers.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par_map;
use crate::surf::mlp::{
    argmax, train_layers, Activation, Dataset, MlpModel, OutputKind, Stage, Targets, TrainConfig, TrainedModel,
    PROB_FLOOR,
};
use crate::surf::SurfError;

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum SelfTrainError {
    #[error("class {0} is absent")]
    MissingClass(usize),
    #[error("class {class} has {count} item(s), need at least {required}")]
    TooFewItems { class: usize, count: usize, required: usize },
    #[error("label {0} is not a valid class")]
    InvalidLabel(usize),
    #[error("feature dimension mismatch: expected {expected}, got {got} (item `{id}`)")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("confidence threshold {0} must lie in (0.5, 1]")]
    InvalidThreshold(f64),
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("id `{0}` appears more than once")]
    DuplicateId(String),
    #[error("predictions and labels differ in length ({predictions} vs {labels})")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("metrics need at least one item")]
    Empty,
    #[error("prediction must be a probability distribution over {NUM_CLASSES} classes")]
    InvalidDistribution,
    #[error("dataset {path}: {reason}")]
    Dataset { path: String, reason: String },
    #[error(transparent)]
    Surf(#[from] SurfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "lowercase")]
pub enum Origin {
    Expert,
    Pseudo { round: usize, confidence: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub id: String,
    pub features: Vec<f64>,
    /// 0 = negative (non-soft-story), 1 = positive (soft-story).
    pub label: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledSet {
    items: Vec<LabeledItem>,
}

fn check_dims<'a>(items: impl Iterator<Item = (&'a str, usize)>) -> Result<(), SelfTrainError> {
    let mut expected = None;
    for (id, got) in items {
        match expected {
            None => expected = Some(got),
            Some(e) if e != got => {
                return Err(SelfTrainError::Dimension {
                    id: id.to_string(),
                    expected: e,
                    got,
                })
            }
            _ => {}
        }
    }
    Ok(())
}

impl LabeledSet {
    pub fn new(items: Vec<LabeledItem>) -> Result<Self, SelfTrainError> {
        check_dims(items.iter().map(|i| (i.id.as_str(), i.features.len())))?;
        for it in &items {
            if it.label >= NUM_CLASSES {
                return Err(SelfTrainError::InvalidLabel(it.label));
            }
            if let Origin::Pseudo { confidence, .. } = it.origin {
                if !(0.0..=1.0).contains(&confidence) {
                    return Err(SelfTrainError::InvalidConfidence(confidence));
                }
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for it in &self.items {
            c[it.label] += 1;
        }
        c
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.features.len())
    }

    pub fn to_dataset(&self) -> Result<Dataset, SelfTrainError> {
        Ok(Dataset::new(
            self.items.iter().map(|i| i.features.clone()).collect(),
            Targets::Classes(self.items.iter().map(|i| i.label).collect()),
        )?)
    }

    fn extend(&mut self, more: Vec<LabeledItem>) {
        self.items.extend(more);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledItem {
    pub id: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnlabeledPool {
    items: Vec<UnlabeledItem>,
}

impl UnlabeledPool {
    pub fn new(items: Vec<UnlabeledItem>) -> Result<Self, SelfTrainError> {
        check_dims(items.iter().map(|i| (i.id.as_str(), i.features.len())))?;
        Ok(Self { items })
    }

    pub fn items(&self) -> &[UnlabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Predicted class probabilities `[p_negative, p_positive]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution([f64; NUM_CLASSES]);

impl PredictionDistribution {
    pub fn new(probs: [f64; NUM_CLASSES]) -> Result<Self, SelfTrainError> {
        let valid = probs.iter().all(|p| (0.0..=1.0).contains(p)) && (probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if valid {
            Ok(Self(probs))
        } else {
            Err(SelfTrainError::InvalidDistribution)
        }
    }

    pub fn from_slice(probs: &[f64]) -> Result<Self, SelfTrainError> {
        let arr: [f64; NUM_CLASSES] = probs.try_into().map_err(|_| SelfTrainError::InvalidDistribution)?;
        Self::new(arr)
    }

    pub fn probs(&self) -> [f64; NUM_CLASSES] {
        self.0
    }
}

/// `−Σ_k l_k log p_k` for a one-hot label, i.e. `−log p_label`, with the
/// probability floored at `1e-12`.
pub fn cross_entropy(pred: &PredictionDistribution, label: usize) -> f64 {
    debug_assert!(label < NUM_CLASSES);
    -pred.0[label].max(PROB_FLOOR).ln()
}

/// Seeded random undersampling of the majority class to the minority count.
/// Minority items keep their order; retained majority items keep theirs.
pub fn balance(set: &LabeledSet, seed: u64) -> Result<LabeledSet, SelfTrainError> {
    let counts = set.class_counts();
    if let Some(c) = (0..NUM_CLASSES).find(|&c| counts[c] == 0) {
        return Err(SelfTrainError::MissingClass(c));
    }
    let target = *counts.iter().min().expect("two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; set.len()];
    for class in 0..NUM_CLASSES {
        if counts[class] == target {
            continue;
        }
        let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.items[i].label == class).collect();
        members.shuffle(&mut rng);
        for &i in &members[target..] {
            keep[i] = false;
        }
    }
    Ok(LabeledSet {
        items: set.items.iter().zip(keep).filter(|(_, k)| *k).map(|(i, _)| i.clone()).collect(),
    })
}

/// Classifier architecture and two-stage schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Tanh,
            lr: 0.05,
            stage1_epochs: 20,
            stage2_epochs: 80,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainSettings {
    fn config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs,
            batch_size: self.batch_size,
            seed,
            momentum: self.momentum,
        }
    }
}

/// Stage 1 trains only the output layer; stage 2 trains every layer. The
/// returned trace tags each epoch with its stage.
pub fn two_stage_finetune(
    model: MlpModel,
    data: &Dataset,
    stage1_epochs: usize,
    stage2_epochs: usize,
    settings: &TrainSettings,
) -> Result<TrainedModel, SelfTrainError> {
    let head = model.layers.len() - 1;
    let stage1 = train_layers(model, data, &settings.config(stage1_epochs, settings.seed), head, Stage::HeadOnly)?;
    let stage2 = train_layers(
        stage1.model,
        data,
        &settings.config(stage2_epochs, settings.seed.wrapping_add(1)),
        0,
        Stage::Full,
    )?;
    let mut trace = stage1.trace;
    trace.extend(stage2.trace);
    Ok(TrainedModel {
        model: stage2.model,
        trace,
    })
}

pub fn classifier_arch(dim: usize, settings: &TrainSettings) -> Vec<usize> {
    let mut a = vec![dim];
    a.extend(&settings.hidden);
    a.push(NUM_CLASSES);
    a
}

/// Trains the seed classifier on an expert set with at least two items per
/// class.
pub fn train_seed(set: &LabeledSet, settings: &TrainSettings) -> Result<TrainedModel, SelfTrainError> {
    let counts = set.class_counts();
    for (class, &count) in counts.iter().enumerate() {
        if count < 2 {
            return Err(SelfTrainError::TooFewItems {
                class,
                count,
                required: 2,
            });
        }
    }
    let dim = set.dim().expect("non-empty set");
    let model = MlpModel::new(
        &classifier_arch(dim, settings),
        settings.activation,
        OutputKind::Softmax,
        settings.seed,
    )?;
    two_stage_finetune(model, &set.to_dataset()?, settings.stage1_epochs, settings.stage2_epochs, settings)
}

fn check_tau(tau: f64) -> Result<(), SelfTrainError> {
    if tau > 0.5 && tau <= 1.0 {
        Ok(())
    } else {
        Err(SelfTrainError::InvalidThreshold(tau))
    }
}

/// Accepts every pool item whose top class probability is at least `tau`.
/// Returns the accepted items (label = argmax) and the rest of the pool.
pub fn pseudo_label(
    model: &MlpModel,
    pool: &UnlabeledPool,
    tau: f64,
    round: usize,
) -> Result<(Vec<LabeledItem>, UnlabeledPool), SelfTrainError> {
    check_tau(tau)?;
    let probs = par_map(&pool.items, |it| model.predict(&it.features));
    let mut accepted = Vec::new();
    let mut remaining = Vec::new();
    for (item, p) in pool.items.iter().zip(probs) {
        let p = p?;
        let label = argmax(&p);
        if p[label] >= tau {
            accepted.push(LabeledItem {
                id: item.id.clone(),
                features: item.features.clone(),
                label,
                origin: Origin::Pseudo {
                    round,
                    confidence: p[label],
                },
            });
        } else {
            remaining.push(item.clone());
        }
    }
    Ok((accepted, UnlabeledPool { items: remaining }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    /// Confidence threshold in (0.5, 1].
    pub tau: f64,
    pub max_rounds: usize,
    pub balance: bool,
    pub training: TrainSettings,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            max_rounds: 3,
            balance: true,
            training: TrainSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Items the round's classifier was trained on (after balancing).
    pub trained_on: usize,
    pub accepted: usize,
    /// Mean confidence of accepted items; 0 when nothing was accepted.
    pub mean_confidence: f64,
    /// Labeled-set size after merging this round's pseudo labels.
    pub labeled: usize,
    pub remaining_pool: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainOutcome {
    /// Classifier from the last round.
    pub model: TrainedModel,
    pub labeled: LabeledSet,
    pub remaining: UnlabeledPool,
    pub rounds: Vec<RoundReport>,
}

/// Runs self-training rounds: (optionally) balance, train, pseudo-label,
/// merge. Stops after `max_rounds` or once a round accepts nothing.
pub fn self_train_loop(
    seed: &LabeledSet,
    pool: &UnlabeledPool,
    cfg: &SelfTrainConfig,
    eval: Option<&LabeledSet>,
) -> Result<SelfTrainOutcome, SelfTrainError> {
    check_tau(cfg.tau)?;
    if cfg.max_rounds == 0 {
        return Err(SelfTrainError::NoRounds);
    }
    let mut ids: HashSet<&str> = HashSet::new();
    for id in seed.items.iter().map(|i| &i.id).chain(pool.items.iter().map(|i| &i.id)) {
        if !ids.insert(id) {
            return Err(SelfTrainError::DuplicateId(id.clone()));
        }
    }
    if let (Some(a), Some(b)) = (seed.dim(), pool.items.first().map(|i| i.features.len())) {
        if a != b {
            return Err(SelfTrainError::Dimension {
                id: pool.items[0].id.clone(),
                expected: a,
                got: b,
            });
        }
    }

    let mut labeled = seed.clone();
    let mut remaining = pool.clone();
    let mut rounds = Vec::new();
    let mut last = None;
    for round in 1..=cfg.max_rounds {
        let round_seed = cfg.training.seed.wrapping_add(round as u64 - 1);
        let train_set = if cfg.balance { balance(&labeled, round_seed)? } else { labeled.clone() };
        let settings = TrainSettings {
            seed: round_seed,
            ..cfg.training.clone()
        };
        let trained = train_seed(&train_set, &settings)?;
        let (accepted, rest) = pseudo_label(&trained.model, &remaining, cfg.tau, round)?;
        let eval_metrics = match eval {
            Some(set) => Some(evaluate(&trained.model, set)?),
            None => None,
        };
        let n_acc = accepted.len();
        let mean_confidence = if n_acc == 0 {
            0.0
        } else {
            accepted
                .iter()
                .map(|i| match i.origin {
                    Origin::Pseudo { confidence, .. } => confidence,
                    Origin::Expert => 1.0,
                })
                .sum::<f64>()
                / n_acc as f64
        };
        labeled.extend(accepted);
        remaining = rest;
        log::info!("round {round}: accepted {n_acc}, labeled {}, pool {}", labeled.len(), remaining.len());
        rounds.push(RoundReport {
            round,
            trained_on: train_set.len(),
            accepted: n_acc,
            mean_confidence,
            labeled: labeled.len(),
            remaining_pool: remaining.len(),
            eval: eval_metrics,
        });
        last = Some(trained);
        if n_acc == 0 {
            break;
        }
    }
    Ok(SelfTrainOutcome {
        model: last.expect("at least one round"),
        labeled,
        remaining,
        rounds,
    })
}

/// Argmax predictions of `model` on `set`, scored against its labels.
pub fn evaluate(model: &MlpModel, set: &LabeledSet) -> Result<Metrics, SelfTrainError> {
    let preds = predict_classes(model, set.items.iter().map(|i| i.features.as_slice()))?;
    let labels: Vec<usize> = set.items.iter().map(|i| i.label).collect();
    metrics(&preds, &labels, 1)
}

pub fn predict_classes<'a>(
    model: &MlpModel,
    features: impl Iterator<Item = &'a [f64]>,
) -> Result<Vec<usize>, SelfTrainError> {
    features
        .map(|f| Ok(argmax(&model.predict(f)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

impl Metrics {
    /// Scores a confusion matrix directly.
    pub fn from_confusion(c: Confusion) -> Self {
        let mut zero_division = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                zero_division = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio(c.tp + c.tn, c.total());
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            zero_division = true;
            0.0
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            confusion: c,
            zero_division,
        }
    }
}

/// Binary classification metrics with `positive` as the positive class.
pub fn metrics(predictions: &[usize], labels: &[usize], positive: usize) -> Result<Metrics, SelfTrainError> {
    if predictions.len() != labels.len() {
        return Err(SelfTrainError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(SelfTrainError::Empty);
    }
    let mut c = Confusion::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(Metrics::from_confusion(c))
}

fn dataset_err(path: &str, reason: impl Into<String>) -> SelfTrainError {
    SelfTrainError::Dataset {
        path: path.to_string(),
        reason: reason.into(),
    }
}

struct Table {
    ids: Vec<String>,
    features: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
}

fn read_table(reader: impl Read, name: &str, want_label: bool) -> Result<Table, SelfTrainError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| dataset_err(name, e.to_string()))?.clone();
    let id_col = headers.iter().position(|h| h == "id").ok_or_else(|| dataset_err(name, "missing `id` column"))?;
    let label_col = headers.iter().position(|h| h == "label");
    if want_label && label_col.is_none() {
        return Err(dataset_err(name, "missing `label` column"));
    }
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != id_col && Some(i) != label_col).collect();
    let mut t = Table {
        ids: Vec::new(),
        features: Vec::new(),
        labels: want_label.then(Vec::new),
    };
    for row in rdr.records() {
        let row = row.map_err(|e| dataset_err(name, e.to_string()))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        t.ids.push(row[id_col].to_string());
        let feats = feature_cols
            .iter()
            .map(|&c| {
                row[c]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| dataset_err(name, format!("line {line}: bad feature `{}`", &row[c])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        t.features.push(feats);
        if let (Some(labels), Some(c)) = (t.labels.as_mut(), label_col) {
            let l: usize = row[c]
                .parse()
                .map_err(|_| dataset_err(name, format!("line {line}: bad label `{}`", &row[c])))?;
            labels.push(l);
        }
    }
    Ok(t)
}

/// Reads `id, f1..fd, label` rows as expert labels.
pub fn read_labeled_csv(path: impl AsRef<Path>) -> Result<LabeledSet, SelfTrainError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| dataset_err(&name, e.to_string()))?;
    read_labeled(file, &name)
}

pub fn read_labeled(reader: impl Read, name: &str) -> Result<LabeledSet, SelfTrainError> {
    let t = read_table(reader, name, true)?;
    let labels = t.labels.expect("requested");
    LabeledSet::new(
        t.ids
            .into_iter()
            .zip(t.features)
            .zip(labels)
            .map(|((id, features), label)| LabeledItem {
                id,
                features,
                label,
                origin: Origin::Expert,
            })
            .collect(),
    )
}

/// Reads `id, f1..fd` rows.
pub fn read_unlabeled_csv(path: impl AsRef<Path>) -> Result<UnlabeledPool, SelfTrainError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| dataset_err(&name, e.to_string()))?;
    read_unlabeled(file, &name)
}

pub fn read_unlabeled(reader: impl Read, name: &str) -> Result<UnlabeledPool, SelfTrainError> {
    let t = read_table(reader, name, false)?;
    UnlabeledPool::new(
        t.ids
            .into_iter()
            .zip(t.features)
            .map(|(id, features)| UnlabeledItem { id, features })
            .collect(),
    )
}

/// Writes `id,label,origin,round,confidence` rows.
pub fn write_labels_csv(path: impl AsRef<Path>, set: &LabeledSet) -> Result<(), SelfTrainError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| dataset_err(&name, e.to_string()))?;
    let io = |e: csv::Error| dataset_err(&name, e.to_string());
    w.write_record(["id", "label", "origin", "round", "confidence"]).map_err(io)?;
    for it in &set.items {
        let (origin, round, conf) = match it.origin {
            Origin::Expert => ("expert".to_string(), String::new(), String::new()),
            Origin::Pseudo { round, confidence } => ("pseudo".to_string(), round.to_string(), format!("{confidence:.6}")),
        };
        w.write_record([it.id.as_str(), &it.label.to_string(), &origin, &round, &conf])
            .map_err(io)?;
    }
    w.flush().map_err(|e| dataset_err(&name, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn item(id: &str, f: Vec<f64>, label: usize) -> LabeledItem {
        LabeledItem {
            id: id.into(),
            features: f,
            label,
            origin: Origin::Expert,
        }
    }

    fn blobs(n: usize, neg_share: f64, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.6).unwrap();
        let n_neg = (n as f64 * neg_share) as usize;
        LabeledSet::new(
            (0..n)
                .map(|i| {
                    let label = usize::from(i >= n_neg);
                    let c = if label == 0 { -1.5 } else { 1.5 };
                    item(
                        &format!("x{i}"),
                        vec![c + noise.sample(&mut rng), -c + noise.sample(&mut rng)],
                        label,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let p = |a: f64, b: f64| PredictionDistribution::new([a, b]).unwrap();
        assert_eq!(cross_entropy(&p(1.0, 0.0), 0), 0.0);
        assert!((cross_entropy(&p(0.5, 0.5), 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(&p(0.5, 0.5), 1) - 0.693_147_180_559_945).abs() < 1e-12);
        assert!((cross_entropy(&p(0.9, 0.1), 1) - 2.302_585_092_994_046).abs() < 1e-12);
        // floored, not infinite
        assert!((cross_entropy(&p(1.0, 0.0), 1) - 27.631_021_115_928_547).abs() < 1e-9);
        assert!(PredictionDistribution::new([0.7, 0.7]).is_err());
    }

    #[test]
    fn balance_rules() {
        let even = blobs(200, 0.5, 1);
        assert_eq!(balance(&even, 3).unwrap(), even);

        let skewed = blobs(400, 0.75, 2);
        assert_eq!(skewed.class_counts(), [300, 100]);
        let b = balance(&skewed, 5).unwrap();
        assert_eq!(b.class_counts(), [100, 100]);
        let minority: Vec<_> = skewed.items().iter().filter(|i| i.label == 1).collect();
        let kept: Vec<_> = b.items().iter().filter(|i| i.label == 1).collect();
        assert_eq!(minority, kept);
        assert_eq!(balance(&skewed, 5).unwrap(), b);
        assert_ne!(balance(&skewed, 6).unwrap(), b);

        let one_class = LabeledSet::new(vec![item("a", vec![0.0], 0)]).unwrap();
        assert!(matches!(balance(&one_class, 0), Err(SelfTrainError::MissingClass(1))));
    }

    #[test]
    fn memorizes_duplicated_items() {
        let set = LabeledSet::new(vec![
            item("a1", vec![0.3, -1.0], 0),
            item("a2", vec![0.3, -1.0], 0),
            item("b1", vec![-0.4, 0.8], 1),
            item("b2", vec![-0.4, 0.8], 1),
        ])
        .unwrap();
        let t = train_seed(&set, &TrainSettings::default()).unwrap();
        assert_eq!(evaluate(&t.model, &set).unwrap().accuracy, 1.0);
    }

    #[test]
    fn seed_training_on_blobs() {
        let set = blobs(300, 0.5, 4);
        let t = train_seed(&set, &TrainSettings::default()).unwrap();
        assert!(evaluate(&t.model, &set).unwrap().accuracy >= 0.95);
        let stages: Vec<_> = t.trace.iter().map(|e| e.stage).collect();
        assert_eq!(stages.iter().filter(|s| **s == Stage::HeadOnly).count(), 20);
        assert_eq!(stages.iter().filter(|s| **s == Stage::Full).count(), 80);
    }

    #[test]
    fn too_few_per_class() {
        let set = LabeledSet::new(vec![item("a", vec![0.0], 0), item("b", vec![1.0], 1), item("c", vec![1.0], 1)]).unwrap();
        assert!(matches!(train_seed(&set, &TrainSettings::default()), Err(SelfTrainError::TooFewItems { class: 0, .. })));
    }

    #[test]
    fn stage_one_freezes_body() {
        let data = blobs(60, 0.5, 8).to_dataset().unwrap();
        let settings = TrainSettings::default();
        let init = MlpModel::new(&[2, 5, 4, 2], Activation::Tanh, OutputKind::Softmax, 1).unwrap();
        let after = two_stage_finetune(init.clone(), &data, 15, 0, &settings).unwrap();
        assert_eq!(after.model.layers[..2], init.layers[..2]);

        let plain = train_layers(init.clone(), &data, &settings.config(10, settings.seed.wrapping_add(1)), 0, Stage::Full).unwrap();
        let via = two_stage_finetune(init, &data, 0, 10, &settings).unwrap();
        assert_eq!(plain.model, via.model);
    }

    #[test]
    fn pseudo_label_partition_and_threshold() {
        let set = blobs(200, 0.5, 10);
        let model = train_seed(&set, &TrainSettings::default()).unwrap().model;
        let pool = UnlabeledPool::new(
            blobs(300, 0.5, 11)
                .items()
                .iter()
                .map(|i| UnlabeledItem { id: format!("u{}", i.id), features: i.features.clone() })
                .collect(),
        )
        .unwrap();
        for tau in [0.6, 0.9, 0.99, 1.0] {
            let (acc, rest) = pseudo_label(&model, &pool, tau, 1).unwrap();
            assert_eq!(acc.len() + rest.len(), pool.len());
            let mut ids: Vec<&str> = acc.iter().map(|i| i.id.as_str()).chain(rest.items().iter().map(|i| i.id.as_str())).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), pool.len());
            let brute = pool
                .items()
                .iter()
                .filter(|i| model.predict(&i.features).unwrap().iter().cloned().fold(0.0, f64::max) >= tau)
                .count();
            assert_eq!(acc.len(), brute);
            for a in &acc {
                let Origin::Pseudo { confidence, round } = a.origin else { panic!() };
                assert!(confidence >= tau);
                assert_eq!(round, 1);
            }
        }
        assert!(pseudo_label(&model, &pool, 0.5, 1).is_err());
    }

    #[test]
    fn one_round_equals_seed_plus_one_labeling() {
        let seed = blobs(40, 0.5, 20);
        let pool = UnlabeledPool::new(
            (0..50)
                .map(|i| UnlabeledItem { id: format!("p{i}"), features: vec![(i as f64 - 25.0) / 10.0, 0.3] })
                .collect(),
        )
        .unwrap();
        let cfg = SelfTrainConfig { max_rounds: 1, balance: false, ..SelfTrainConfig::default() };
        let out = self_train_loop(&seed, &pool, &cfg, None).unwrap();
        let direct = train_seed(&seed, &cfg.training).unwrap();
        assert_eq!(out.model, direct);
        let (acc, rest) = pseudo_label(&direct.model, &pool, cfg.tau, 1).unwrap();
        assert_eq!(out.labeled.len(), seed.len() + acc.len());
        assert_eq!(out.remaining, rest);
    }

    #[test]
    fn empty_pool_degenerates_to_seed_training() {
        let seed = blobs(40, 0.5, 21);
        let cfg = SelfTrainConfig { balance: false, ..SelfTrainConfig::default() };
        let out = self_train_loop(&seed, &UnlabeledPool::default(), &cfg, None).unwrap();
        assert_eq!(out.rounds.len(), 1);
        assert_eq!(out.model, train_seed(&seed, &cfg.training).unwrap());
        assert_eq!(out.labeled, seed);
    }

    #[test]
    fn loop_invariants() {
        let seed = blobs(60, 0.6, 30);
        let pool = UnlabeledPool::new(
            blobs(400, 0.5, 31)
                .items()
                .iter()
                .map(|i| UnlabeledItem { id: format!("u{}", i.id), features: i.features.clone() })
                .collect(),
        )
        .unwrap();
        let eval = blobs(100, 0.5, 32);
        let cfg = SelfTrainConfig::default();
        let out = self_train_loop(&seed, &pool, &cfg, Some(&eval)).unwrap();
        let sizes: Vec<usize> = out.rounds.iter().map(|r| r.labeled).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(&out.labeled.items()[..seed.len()], seed.items());
        assert_eq!(out.labeled.len() + out.remaining.len(), seed.len() + pool.len());
        assert!(out.rounds.iter().all(|r| r.eval.is_some()));
        let again = self_train_loop(&seed, &pool, &cfg, Some(&eval)).unwrap();
        assert_eq!(out.model, again.model);
        assert_eq!(out.rounds, again.rounds);
    }

    #[test]
    fn metrics_table() {
        let m = metrics(&[1, 0, 1, 1], &[1, 0, 1, 1], 1).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));

        // 20 hand-built items: 7 TP, 3 FP, 6 TN, 4 FN
        let mut p = Vec::new();
        let mut l = Vec::new();
        for (pp, ll, n) in [(1, 1, 7), (1, 0, 3), (0, 0, 6), (0, 1, 4)] {
            p.extend(std::iter::repeat(pp).take(n));
            l.extend(std::iter::repeat(ll).take(n));
        }
        let m = metrics(&p, &l, 1).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 7, fp: 3, tn: 6, fn_: 4 });
        assert_eq!(m.accuracy, 13.0 / 20.0);
        assert_eq!(m.precision, 0.7);
        assert_eq!(m.recall, 7.0 / 11.0);
        assert!((m.f1 - 2.0 * 0.7 * (7.0 / 11.0) / (0.7 + 7.0 / 11.0)).abs() < 1e-15);

        let none = metrics(&[0, 0], &[0, 0], 1).unwrap();
        assert!(none.zero_division);
        assert_eq!((none.precision, none.recall, none.f1, none.accuracy), (0.0, 0.0, 0.0, 1.0));
        assert!(matches!(metrics(&[1], &[1, 0], 1), Err(SelfTrainError::LengthMismatch { .. })));
    }

    #[test]
    fn dataset_csv() {
        let set = read_labeled("id,f1,f2,label\na,0.5,1,1\nb,-1,2.5,0\n".as_bytes(), "mem").unwrap();
        assert_eq!(set.items()[1].features, vec![-1.0, 2.5]);
        assert_eq!(set.class_counts(), [1, 1]);
        let pool = read_unlabeled("id,f1,f2\nc,1,1\n".as_bytes(), "mem").unwrap();
        assert_eq!(pool.items()[0].id, "c");
        assert!(read_labeled("id,f1\na,1\n".as_bytes(), "mem").is_err());
        assert!(read_labeled("id,f1,label\na,x,1\n".as_bytes(), "mem").is_err());
    }
}
