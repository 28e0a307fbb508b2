//! Mini-batch SGD with classical momentum, clean-performance evaluation and
//! k-fold cross-validation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{kfold_split, Direction, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardOptions, Head, Model, BATCH_NORM_MOMENTUM, NUM_CLASSES};
use crate::tensor::{softmax_in_place, Graph, Tensor};

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
    Mse,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::CrossEntropy => "cross_entropy",
            Loss::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross_entropy" => Some(Loss::CrossEntropy),
            "mse" => Some(Loss::Mse),
            _ => None,
        }
    }

    /// The loss that goes with a model head.
    pub fn for_head(head: Head) -> Self {
        match head {
            Head::Classification => Loss::CrossEntropy,
            Head::Regression => Loss::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Clipped to the dataset size.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 50,
            seed: 0,
            loss: Loss::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train config", format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train config", format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("train config", "batch_size and epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub loss: f64,
    /// Validation accuracy or MSE, when a validation set was supplied.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub head: Head,
    /// Infer-mode accuracy (classification) or MSE (regression) after the
    /// last epoch, on the validation set if one was given, else the training set.
    pub final_metric: f64,
    pub fold: Option<usize>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// `epoch,loss[,val_metric]`
    pub fn to_csv(&self) -> String {
        let with_val = self.epochs.iter().any(|e| e.val_metric.is_some());
        let mut out = String::from(if with_val { "epoch,loss,val_metric\n" } else { "epoch,loss\n" });
        for e in &self.epochs {
            let _ = write!(out, "{},{}", e.epoch, e.loss);
            if with_val {
                let _ = write!(out, ",{}", e.val_metric.map_or("NA".to_string(), |v| v.to_string()));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Stacks sample images (selected by index) into one `N×H×W×3` batch.
pub fn stack_images(samples: &[Sample], indices: &[usize]) -> Result<Tensor<f32>> {
    let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &samples[i].image).collect();
    Tensor::stack(&images)
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        ^ ((epoch as u64) << 32)
        ^ batch as u64
}

/// Trains in place. See [`train_with_validation`].
pub fn train(model: &mut Model<f32>, data: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    train_with_validation(model, data, None, config)
}

/// Runs `config.epochs` epochs of shuffled mini-batch SGD with momentum
/// (`v ← μv − η∇`, `θ ← θ + v`), dropout and batch norm in train mode.
/// When `validation` is given its metric is recorded after every epoch.
pub fn train_with_validation(
    model: &mut Model<f32>,
    data: &[Sample],
    validation: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    if Loss::for_head(model.head()) != config.loss {
        return Err(Error::invalid(
            "train",
            format!("loss {} does not match a {} model", config.loss.name(), model.head().name()),
        ));
    }
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;
    let bn_momentum = BATCH_NORM_MOMENTUM as f32;
    let batch_size = config.batch_size.min(data.len());
    let mut velocity: Vec<Vec<Tensor<f32>>> = model
        .layers()
        .iter()
        .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f64;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let mut g = Graph::new();
            let x = g.constant(stack_images(data, chunk)?);
            let pass = model.record(&mut g, x, ForwardOptions::train(batch_seed(config.seed, epoch, b)))?;
            let loss = match config.loss {
                Loss::CrossEntropy => {
                    let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label.index()).collect();
                    g.softmax_cross_entropy(pass.logits, &labels)?
                }
                Loss::Mse => {
                    let targets: Vec<f32> = chunk.iter().map(|&i| data[i].scaled_angle as f32).collect();
                    g.mean_squared_error(pass.logits, &targets)?
                }
            };
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {}, batch {}", epoch + 1, b + 1),
                });
            }
            total += value * chunk.len() as f64;
            let mut grads = g.backward(loss, None)?;

            let running: Vec<_> = pass
                .batch_norms
                .iter()
                .map(|&(layer, node)| (layer, g.batch_stats(node).cloned()))
                .collect();
            for ((layer, ids), vel) in model.layers_mut().iter_mut().zip(&pass.params).zip(&mut velocity) {
                for ((param, id), v) in layer.params.iter_mut().zip(ids).zip(vel.iter_mut()) {
                    let Some(grad) = grads.take(*id) else { continue };
                    let (p, v) = (param.data_mut(), v.data_mut());
                    for ((p, v), &d) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                        *v = mu * *v - lr * d;
                        *p += *v;
                    }
                }
            }
            for (layer, stats) in running {
                if let Some(stats) = stats {
                    let state = &mut model.layers_mut()[layer].state;
                    let (mean, var) = state.split_at_mut(1);
                    stats.update_running(&mut mean[0], &mut var[0], bn_momentum);
                }
            }
        }
        let val_metric = match validation {
            Some(v) => Some(metric(model, v)?),
            None => None,
        };
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: total / data.len() as f64,
            val_metric,
        });
    }

    let final_metric = match (validation, epochs.last().and_then(|e| e.val_metric)) {
        (Some(_), Some(m)) => m,
        _ => metric(model, data)?,
    };
    Ok(TrainReport {
        epochs,
        head: model.head(),
        final_metric,
        fold: None,
    })
}

/// Accuracy for classifiers, MSE for regressors.
fn metric(model: &Model<f32>, data: &[Sample]) -> Result<f64> {
    Ok(match model.head() {
        Head::Classification => evaluate_classifier(model, data)?.accuracy,
        Head::Regression => evaluate_regressor(model, data)?.mse,
    })
}

fn infer_outputs(model: &Model<f32>, data: &[Sample]) -> Result<Vec<Vec<f32>>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let z = model.logits_batch(&stack_images(data, chunk)?)?;
        let k = z.shape()[1];
        rows.extend(z.data().chunks(k).map(<[f32]>::to_vec));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierEval {
    pub accuracy: f64,
    /// `confusion[true][predicted]`, classes ordered left, straight, right.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Softmax probabilities per sample.
    pub scores: Vec<[f64; NUM_CLASSES]>,
    pub predictions: Vec<Direction>,
}

pub fn evaluate_classifier(model: &Model<f32>, data: &[Sample]) -> Result<ClassifierEval> {
    model.require_head(Head::Classification, "evaluate_classifier")?;
    if data.is_empty() {
        return Err(Error::invalid("evaluate_classifier", "empty dataset"));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut scores = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for (mut z, s) in infer_outputs(model, data)?.into_iter().zip(data) {
        softmax_in_place(&mut z);
        let pred = Direction::from_index(argmax(&z));
        confusion[s.label.index()][pred.index()] += 1;
        correct += usize::from(pred == s.label);
        scores.push([z[0] as f64, z[1] as f64, z[2] as f64]);
        predictions.push(pred);
    }
    Ok(ClassifierEval {
        accuracy: correct as f64 / data.len() as f64,
        confusion,
        scores,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorEval {
    pub mse: f64,
    pub predictions: Vec<f64>,
    /// `(ŷ − y)²` per sample.
    pub squared_residuals: Vec<f64>,
}

pub fn evaluate_regressor(model: &Model<f32>, data: &[Sample]) -> Result<RegressorEval> {
    model.require_head(Head::Regression, "evaluate_regressor")?;
    if data.is_empty() {
        return Err(Error::invalid("evaluate_regressor", "empty dataset"));
    }
    let predictions: Vec<f64> = infer_outputs(model, data)?.into_iter().map(|z| z[0] as f64).collect();
    let squared_residuals: Vec<f64> = predictions
        .iter()
        .zip(data)
        .map(|(p, s)| (p - s.scaled_angle).powi(2))
        .collect();
    Ok(RegressorEval {
        mse: squared_residuals.iter().sum::<f64>() / data.len() as f64,
        predictions,
        squared_residuals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub reports: Vec<TrainReport>,
    /// Mean of the per-fold validation metrics.
    pub mean: f64,
    /// Population standard deviation of the per-fold metrics.
    pub std_dev: f64,
}

/// Trains one fresh model per fold; `build` receives the fold index.
pub fn cross_validate(
    mut build: impl FnMut(usize) -> Result<Model<f32>>,
    data: &[Sample],
    k: usize,
    config: &TrainConfig,
) -> Result<CrossValidation> {
    let folds = kfold_split(data.len(), k, config.seed)?;
    let mut reports = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let train_set: Vec<Sample> = fold.train.iter().map(|&i| data[i].clone()).collect();
        let val_set: Vec<Sample> = fold.validation.iter().map(|&i| data[i].clone()).collect();
        let mut model = build(f)?;
        let mut report = train(&mut model, &train_set, config)?;
        report.final_metric = metric(&model, &val_set)?;
        report.fold = Some(f);
        reports.push(report);
    }
    let metrics: Vec<f64> = reports.iter().map(|r| r.final_metric).collect();
    let mean = metrics.iter().sum::<f64>() / k as f64;
    let var = metrics.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(CrossValidation {
        reports,
        mean,
        std_dev: var.sqrt(),
    })
}
