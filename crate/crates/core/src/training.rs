//! Optimization loop: Xavier initialization, cosine-annealed SGD with
//! momentum, per-epoch CSV metrics, and directory checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment_hflip, augment_rng, ClipSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{softmax_cross_entropy, BnMode, Tensor};

/// Uniform samples on `[-b, b]` with `b = sqrt(6 / (d_in + d_out))`.
pub fn xavier_uniform(shape: &[usize], d_in: usize, d_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt() as f32;
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid init shape")
}

/// Cosine-annealed learning rate with an optional linear warmup:
/// `lr0 * (e+1)/W` during warmup, then `0.5 * lr0 * (1 + cos(pi * e' / E'))`
/// over the remaining span.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f32, warmup_epochs: usize) -> f32 {
    assert!(total_epochs > 0, "schedule needs at least one epoch");
    if epoch < warmup_epochs {
        return (lr0 as f64 * (epoch + 1) as f64 / warmup_epochs as f64) as f32;
    }
    let span = total_epochs.saturating_sub(warmup_epochs).max(1);
    let e = epoch - warmup_epochs;
    (0.5 * lr0 as f64 * (1.0 + (std::f64::consts::PI * e as f64 / span as f64).cos())) as f32
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Random horizontal flip on training clips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_epochs: 0,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("bad momentum {}", self.momentum)));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidArgument(
                "warmup must be shorter than the schedule".into(),
            ));
        }
        Ok(())
    }
}

/// Stacks equal-shape clips into one `[N,3,T,H,W]` batch.
pub fn batch_tensor(clips: &[Tensor]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(clips.len() * first.len());
    for c in clips {
        if c.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!(
                "clip shape {:?} differs from {:?}",
                c.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(c.data());
    }
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_accuracy: f32,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_accuracy: f32,
    pub final_train_accuracy: f32,
}

/// Trains `model` in place. When `out_dir` is given, writes `metrics.csv`
/// plus `checkpoint-best/` (highest validation accuracy, ties broken by
/// lower validation loss) and `checkpoint-final/`.
pub fn fit(
    model: &mut Model,
    train: &[ClipSample],
    val: &[ClipSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::TooFewSamples("no training samples".into()));
    }
    let num_classes = model.config.num_classes;
    for s in train.iter().chain(val) {
        if s.label >= num_classes {
            return Err(Error::LabelOutOfRange { label: s.label, classes: num_classes });
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut velocity: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f32, f32)> = None; // (epoch, acc, val_loss)
    let mut best_state: Option<BTreeMap<String, Tensor>> = None;
    let mut best_buffers: Option<BTreeMap<String, Tensor>> = None;

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr, config.warmup_epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let clips: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        let mut rng = augment_rng(config.seed, epoch, i);
                        augment_hflip(&train[i].tensor, &mut rng)
                    } else {
                        train[i].tensor.clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let batch = batch_tensor(&clips)?;

            let mut tape = Tape::new();
            let input = tape.constant(batch);
            let pass = model.forward_on(&mut tape, input, BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let grads = tape.backward(loss)?;

            let grad_map: BTreeMap<&str, &Tensor> = pass
                .params
                .iter()
                .map(|(path, var)| {
                    (path.as_str(), grads.get(*var).expect("trainable leaf has a gradient"))
                })
                .collect();
            let (lr64, mu, wd) = (lr as f64, config.momentum as f64, config.weight_decay as f64);
            model.visit_params_mut(&mut |path, theta| {
                let g = grad_map[path];
                let v = velocity.entry(path.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
                for ((t, &g), v) in theta.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    let grad = g as f64 + wd * *t as f64;
                    let vel = mu * *v as f64 - lr64 * grad;
                    *v = vel as f32;
                    *t = (*t as f64 + vel) as f32;
                }
            });
            loss_sum += loss_value as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = (loss_sum / seen as f64) as f32;

        let (val_loss, val_acc) = if val.is_empty() {
            (f32::NAN, f32::NAN)
        } else {
            let eval = evaluate(model, val, config.batch_size)?;
            (eval.loss, eval.accuracy)
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} train_loss {train_loss:.6} val_loss {val_loss:.6} val_acc {val_acc:.4}"
        );
        history.push(EpochMetrics { epoch, lr, train_loss, val_loss, val_accuracy: val_acc });

        let improved = match best {
            None => !val.is_empty(),
            Some((_, acc, vloss)) => val_acc > acc || (val_acc == acc && val_loss < vloss),
        };
        if improved {
            best = Some((epoch, val_acc, val_loss));
            best_state = Some(model.params_map());
            best_buffers = Some(model.buffers_map());
        }
    }

    let final_train = evaluate(model, train, config.batch_size)?;
    let (best_epoch, best_val_accuracy) = match best {
        Some((e, a, _)) => (e, a),
        None => (config.epochs - 1, f32::NAN),
    };

    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("metrics.csv"), &history)?;
        save_checkpoint(&dir.join("checkpoint-final"), model, config.epochs - 1)?;
        if let (Some(params), Some(buffers)) = (&best_state, &best_buffers) {
            let mut snapshot = model.clone();
            restore_state(&mut snapshot, params, buffers)?;
            save_checkpoint(&dir.join("checkpoint-best"), &snapshot, best_epoch)?;
        }
    }

    Ok(FitReport {
        history,
        best_epoch,
        best_val_accuracy,
        final_train_accuracy: final_train.accuracy,
    })
}

fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    writeln!(f, "epoch,lr,train_loss,val_loss,val_acc").map_err(io)?;
    for m in history {
        writeln!(
            f,
            "{},{:.8},{:.8},{:.8},{:.6}",
            m.epoch, m.lr, m.train_loss, m.val_loss, m.val_accuracy
        )
        .map_err(io)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f32,
    pub accuracy: f32,
    /// Per-class recall; NaN for classes absent from the sample set.
    pub per_class_accuracy: Vec<f32>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// First index wins argmax ties.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode evaluation: mean cross-entropy, accuracy, per-class
/// recall, and the confusion matrix.
pub fn evaluate(model: &mut Model, samples: &[ClipSample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples("no samples to evaluate".into()));
    }
    let k = model.config.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0f64;
    for chunk in samples.chunks(batch_size.max(1)) {
        let clips: Vec<Tensor> = chunk.iter().map(|s| s.tensor.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        for (s, &l) in chunk.iter().zip(&labels) {
            if l >= k {
                return Err(Error::LabelOutOfRange { label: s.label, classes: k });
            }
        }
        let batch = batch_tensor(&clips)?;
        let logits = model.forward(&batch, BnMode::Infer)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        for (i, &label) in labels.iter().enumerate() {
            let pred = argmax_row(&logits.data()[i * k..(i + 1) * k]);
            confusion[label][pred] += 1;
            predictions.push(pred);
        }
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            if total == 0 {
                f32::NAN
            } else {
                confusion[c][c] as f32 / total as f32
            }
        })
        .collect();
    Ok(Evaluation {
        loss: (loss_sum / samples.len() as f64) as f32,
        accuracy: correct as f32 / samples.len() as f32,
        per_class_accuracy,
        confusion,
        predictions,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    epoch: usize,
    /// Tensor key -> extents, covering trainable parameters and BN
    /// running statistics.
    tensors: BTreeMap<String, Vec<usize>>,
}

fn tensor_file(dir: &Path, key: &str) -> PathBuf {
    dir.join("tensors").join(format!("{}.mera", key.replace('/', "__")))
}

/// Writes `header.json` plus one `tensors/*.mera` file per parameter and
/// BN buffer; keys use the layer paths with `/` mapped to `__`.
pub fn save_checkpoint(dir: &Path, model: &Model, epoch: usize) -> Result<()> {
    let tensors_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensors_dir).map_err(|e| Error::io(&tensors_dir, e))?;
    let mut manifest = BTreeMap::new();
    let mut state = model.params_map();
    state.extend(model.buffers_map());
    for (key, tensor) in &state {
        manifest.insert(key.clone(), tensor.shape().to_vec());
        crate::data::write_tensor(&tensor_file(dir, key), tensor)?;
    }
    let header = CheckpointHeader { version: CHECKPOINT_VERSION, epoch, tensors: manifest };
    let path = dir.join("header.json");
    let text = serde_json::to_string_pretty(&header)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Restores a checkpoint into a model of matching architecture; returns
/// the stored epoch. Fails with distinct errors on version skew, keys the
/// model does not expect (or shape changes), and keys the checkpoint lacks.
pub fn load_checkpoint(dir: &Path, model: &mut Model) -> Result<usize> {
    let path = dir.join("header.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(header.version));
    }

    let mut expected = model.params_map();
    expected.extend(model.buffers_map());
    for (key, shape) in &header.tensors {
        match expected.get(key) {
            None => {
                return Err(Error::ManifestMismatch(format!("unexpected tensor key {key:?}")))
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::ManifestMismatch(format!(
                    "tensor {key:?} has extents {:?}, checkpoint has {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    let mut loaded = BTreeMap::new();
    for key in expected.keys() {
        if !header.tensors.contains_key(key) {
            return Err(Error::MissingKey(key.clone()));
        }
        let tensor = crate::data::read_tensor(&tensor_file(dir, key))?;
        if tensor.shape() != header.tensors[key].as_slice() {
            return Err(Error::ManifestMismatch(format!(
                "tensor file for {key:?} disagrees with the header"
            )));
        }
        loaded.insert(key.clone(), tensor);
    }
    restore_state(model, &loaded, &loaded)?;
    Ok(header.epoch)
}

/// Overwrites the model's parameters and buffers from key -> tensor maps
/// (extra keys are ignored; missing keys error).
fn restore_state(
    model: &mut Model,
    params: &BTreeMap<String, Tensor>,
    buffers: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |path, t| match params.get(path) {
        Some(v) => *t = v.clone(),
        None => missing.push(path.to_string()),
    });
    model.visit_buffers_mut(&mut |path, t| match buffers.get(path) {
        Some(v) => *t = v.clone(),
        None => missing.push(path.to_string()),
    });
    match missing.into_iter().next() {
        Some(key) => Err(Error::MissingKey(key)),
        None => Ok(()),
    }
}
