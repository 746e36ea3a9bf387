//! Training one binary classifier per class from image-level labels.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::evaluator::Counts;
use crate::model::checkpoint::CheckpointMeta;
use crate::model::{data_init, Checkpoint, Classifier, ClassifierParams, FocalLoss, ModelConfig};
use crate::optim::{warmup_lr, Adam, AdamConfig};
use crate::rng::Rng;
use crate::tiler::index_patches;
use crate::types::{ClassName, CoarseLabel, PatchImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Fraction of each label group held out for validation.
    #[serde(default = "d_val")]
    pub val_fraction: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Keep `epoch_{n}.ckpt` for every epoch besides `last` and `best`.
    #[serde(default)]
    pub keep_epoch_checkpoints: bool,
    #[serde(default)]
    pub seed: u64,
    /// Training patches used for data-dependent initialisation; 0 keeps the plain random init.
    #[serde(default = "d_init_samples")]
    pub init_samples: usize,
    /// Target spread of the initial attention logits over those patches; 0 leaves the query as drawn.
    #[serde(default = "d_init_logit_std")]
    pub init_logit_std: f64,
    #[serde(default)]
    pub model: ModelConfig,
}

fn d_init_samples() -> usize {
    16
}
fn d_init_logit_std() -> f64 {
    4.0
}

fn d_epochs() -> usize {
    100
}
fn d_lr() -> f64 {
    5e-4
}
fn d_warmup() -> usize {
    5
}
fn d_batch() -> usize {
    16
}
fn d_val() -> f64 {
    0.1
}
fn d_gamma() -> f64 {
    2.0
}
fn d_alpha() -> f64 {
    0.25
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            lr: d_lr(),
            warmup_epochs: d_warmup(),
            batch_size: d_batch(),
            val_fraction: d_val(),
            gamma: d_gamma(),
            alpha: d_alpha(),
            adam: AdamConfig::default(),
            keep_epoch_checkpoints: false,
            seed: 0,
            init_samples: d_init_samples(),
            init_logit_std: d_init_logit_std(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn focal(&self) -> FocalLoss {
        FocalLoss {
            gamma: self.gamma,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || self.gamma < 0.0 {
            return Err(Error::Config("need gamma >= 0 and alpha in [0,1]".into()));
        }
        if !(self.init_logit_std >= 0.0 && self.init_logit_std.is_finite()) {
            return Err(Error::Config("init_logit_std must be a finite value >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub image: PatchImage,
    pub target: bool,
}

/// Join effective labels of `class_name` with patch images from `patches_dir`.
/// Patches without a label for the class are skipped.
pub fn load_dataset(labels: &[CoarseLabel], patches_dir: &Path, class_name: ClassName) -> Result<Vec<Example>> {
    let index = index_patches(patches_dir)?;
    let by_patch: BTreeMap<_, _> = labels
        .iter()
        .filter(|l| l.class_name == class_name)
        .map(|l| (&l.patch, l.present))
        .collect();
    let mut out = Vec::with_capacity(by_patch.len());
    for (id, present) in by_patch {
        let (path, _) = index
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("labelled patch {id} not in {}", patches_dir.display())))?;
        out.push(Example {
            image: PatchImage::load(id.clone(), path)?,
            target: present,
        });
    }
    let unlabeled = index.len().saturating_sub(out.len());
    if unlabeled > 0 {
        log::warn!("{unlabeled} patches have no {class_name} label and are not used");
    }
    Ok(out)
}

/// Seeded split keeping the label ratio: `(train, validation)` indices.
pub fn stratified_split(targets: &[bool], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Rng::new(seed).fork(11);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [false, true] {
        let mut group: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == label).collect();
        rng.shuffle(&mut group);
        let n_val = (group.len() as f64 * val_fraction).round() as usize;
        let n_val = n_val.min(group.len().saturating_sub(1));
        val.extend_from_slice(&group[..n_val]);
        train.extend_from_slice(&group[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
}

/// Image-level metrics in inference mode; a probability above 0.5 is a positive.
pub fn evaluate_classification(
    classifier: &Classifier,
    examples: &[&Example],
    focal: FocalLoss,
) -> Result<ClassificationMetrics> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let mut counts = Counts::default();
    let mut loss = 0.0;
    let mut rng = Rng::new(0);
    for ex in examples {
        let c = classifier.classify(&ex.image, 0.0, &mut rng, false)?;
        loss += focal.loss(c.probability, ex.target);
        match (c.probability > 0.5, ex.target) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    let m = counts.metrics();
    Ok(ClassificationMetrics {
        loss: loss / examples.len() as f64,
        accuracy: (counts.tp + counts.tn) as f64 / examples.len() as f64,
        precision: m.precision,
        recall: m.recall,
        counts,
    })
}

/// One line of the metrics log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean loss over training steps (with token drop); inference-mode loss at epoch 0.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub metrics_path: PathBuf,
}

fn warn_if_single_class(examples: &[Example], class_name: ClassName) {
    let positives = examples.iter().filter(|e| e.target).count();
    if positives == 0 || positives == examples.len() {
        log::warn!(
            "all {} {class_name} labels are {}; training anyway",
            examples.len(),
            positives > 0
        );
    }
}

/// Train with Adam and linear warm-up. Writes `metrics.jsonl`, `last.ckpt` and
/// `best.ckpt` (lowest validation loss, or training loss without a validation split) to `out_dir`.
pub fn train(examples: &[Example], class_name: ClassName, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    warn_if_single_class(examples, class_name);
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let focal = config.focal();
    let root = Rng::new(config.seed);
    let mut classifier = Classifier::new(config.model.clone(), &mut root.fork(1))?;
    let mut adam = Adam::new(&classifier.params, config.adam);
    let mut order_rng = root.fork(2);
    let mut drop_rng = root.fork(3);

    let targets: Vec<bool> = examples.iter().map(|e| e.target).collect();
    let (train_idx, val_idx) = stratified_split(&targets, config.val_fraction, config.seed);
    let train_set: Vec<&Example> = train_idx.iter().map(|&i| &examples[i]).collect();
    let val_set: Vec<&Example> = val_idx.iter().map(|&i| &examples[i]).collect();
    log::info!("{class_name}: {} training and {} validation patches", train_set.len(), val_set.len());

    let mut pick: Vec<usize> = (0..train_set.len()).collect();
    root.fork(4).shuffle(&mut pick);
    let init_images: Vec<&PatchImage> = pick
        .iter()
        .take(config.init_samples)
        .map(|&i| &train_set[i].image)
        .collect();
    data_init(&mut classifier.params, &classifier.config, &init_images, config.init_logit_std)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path).at(&metrics_path)?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut log_records = Vec::new();
    let mut best: Option<(f64, usize)> = None;

    let save = |classifier: &Classifier, epoch: usize, path: &Path| {
        Checkpoint {
            meta: CheckpointMeta {
                model: classifier.config.clone(),
                focal,
                class_name,
                epoch,
            },
            params: classifier.params.clone(),
        }
        .save(path)
    };

    let initial = evaluate_classification(&classifier, &train_set, focal)?;
    let initial_val = if val_set.is_empty() {
        None
    } else {
        Some(evaluate_classification(&classifier, &val_set, focal)?)
    };
    let mut record = EpochRecord {
        epoch: 0,
        lr: 0.0,
        train_loss: initial.loss,
        train_accuracy: initial.accuracy,
        val_loss: initial_val.map(|m| m.loss),
        val_accuracy: initial_val.map(|m| m.accuracy),
    };

    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..=config.epochs {
        if epoch > 0 {
            order_rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            let mut lr = 0.0;
            for (step, batch) in order.chunks(config.batch_size).enumerate() {
                let progress = (epoch - 1) as f64 + (step + 1) as f64 / steps_per_epoch as f64;
                lr = warmup_lr(config.lr, config.warmup_epochs, progress);
                let mut grads = ClassifierParams::zeros(&classifier.config);
                for &i in batch {
                    let ex = train_set[i];
                    let out = classifier.loss_and_grad(&ex.image, ex.target, focal, &mut drop_rng, &mut grads)?;
                    loss_sum += out.loss;
                    if (out.probability > 0.5) == ex.target {
                        correct += 1;
                    }
                }
                grads.scale(1.0 / batch.len() as f64);
                adam.step(&mut classifier.params, &grads, lr);
                if !classifier.params.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite parameters after epoch {epoch} step {step} (lr {lr})"
                    )));
                }
            }
            let val = if val_set.is_empty() {
                None
            } else {
                Some(evaluate_classification(&classifier, &val_set, focal)?)
            };
            record = EpochRecord {
                epoch,
                lr,
                train_loss: loss_sum / train_set.len() as f64,
                train_accuracy: correct as f64 / train_set.len() as f64,
                val_loss: val.map(|m| m.loss),
                val_accuracy: val.map(|m| m.accuracy),
            };
        }
        serde_json::to_writer(&mut metrics_file, &record)?;
        writeln!(metrics_file).at(&metrics_path)?;
        metrics_file.flush().at(&metrics_path)?;
        log::info!(
            "{class_name} epoch {}: train loss {:.5} acc {:.3}, val loss {:?}",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record.val_loss
        );

        let score = record.val_loss.unwrap_or(record.train_loss);
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, epoch));
            save(&classifier, epoch, &best_path)?;
        }
        save(&classifier, epoch, &last_path)?;
        if config.keep_epoch_checkpoints {
            save(&classifier, epoch, &out_dir.join(format!("epoch_{epoch}.ckpt")))?;
        }
        log_records.push(record.clone());
    }
    Ok(TrainOutcome {
        best_path,
        last_path,
        best_epoch: best.map(|b| b.1).unwrap_or(0),
        log: log_records,
        metrics_path,
    })
}
