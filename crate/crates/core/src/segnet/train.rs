use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::augment::{apply_augment, AugmentConfig, AugmentParams};
use super::folds::Fold;
use super::loss::LabelTargets;
use super::schedule::PlateauSchedule;
use super::unet::SegModel;
use super::{Sample, SegError};
use crate::autodiff::{Mode, Tensor};
use crate::rng::{derive, purpose, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub crop_size: [usize; 3],
    pub max_epochs: usize,
    pub seed: u64,
    /// Flip and affine augmentation; when off, training still uses random crops.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_decay_factor: 0.9,
            lr_patience: 5,
            early_stop_patience: 15,
            crop_size: [32; 3],
            max_epochs: 100,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        let fail = |m: String| Err(SegError::Config(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight decay {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail(format!("lr decay factor {} outside (0, 1)", self.lr_decay_factor));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be positive".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub sample: Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Validation loss of the freshly initialised model.
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// Steps skipped because the augmented crop had no labeled voxel.
    pub skipped_steps: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr
            ));
        }
        s
    }
}

/// Trained-model result bundle.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best_params: Vec<Tensor>,
}

fn lookup<'a>(subjects: &'a [Subject], id: &str) -> Result<&'a Subject, SegError> {
    subjects
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| SegError::UnknownSubject(id.to_string()))
}

/// Mean Dice loss over pre-cropped validation samples in EVAL mode.
pub fn validation_loss(model: &mut SegModel, val: &[(Tensor, LabelTargets)]) -> Result<f64, SegError> {
    let mut total = 0.0;
    for (image, targets) in val {
        total += model.loss(image, targets, Mode::Eval, 0)?;
    }
    Ok(total / val.len() as f64)
}

/// Batch-size-one training: each epoch visits every training subject once in
/// a seeded order, with a fresh augmentation draw and dropout key per step.
/// On return the model holds the parameters of the best validation epoch.
pub fn train(
    model: &mut SegModel,
    subjects: &[Subject],
    fold: &Fold,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, SegError> {
    cfg.validate()?;
    model
        .config
        .check_spatial([cfg.crop_size[2], cfg.crop_size[1], cfg.crop_size[0]])?;
    if fold.train.is_empty() {
        return Err(SegError::EmptySplit("training"));
    }
    if fold.val.is_empty() {
        return Err(SegError::EmptySplit("validation"));
    }
    let classes = model.config.num_classes;
    let train_set: Vec<&Subject> = fold
        .train
        .iter()
        .map(|id| lookup(subjects, id))
        .collect::<Result<_, _>>()?;
    let mut val = Vec::with_capacity(fold.val.len());
    for id in &fold.val {
        let s = lookup(subjects, id)?.sample.center_crop(cfg.crop_size)?;
        let t = LabelTargets::new(&s.labels, s.dims, classes).map_err(|e| match e {
            SegError::NoLabels => {
                SegError::Config(format!("validation subject {id} has no labels in the central crop"))
            }
            e => e,
        })?;
        val.push((s.to_tensor(), t));
    }

    let aug_cfg = AugmentConfig {
        crop: cfg.crop_size,
        ..AugmentConfig::default()
    };
    let mut sched = PlateauSchedule::new(cfg.lr, cfg.lr_decay_factor, cfg.lr_patience, cfg.early_stop_patience);
    let mut state = AdamState::new(model.params());
    let initial_val_loss = validation_loss(model, &val)?;
    let mut best_params = model.params().to_vec();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut skipped = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Stream::new(cfg.seed, purpose::SHUFFLE, epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for (step, &i) in order.iter().enumerate() {
            let tag = ((epoch as u64) << 24) | step as u64;
            let mut rng = Stream::new(cfg.seed, purpose::AUGMENT, tag);
            let sample = &train_set[i].sample;
            let mut params = AugmentParams::draw(&aug_cfg, sample.dims, &mut rng)?;
            if !cfg.augment {
                params = AugmentParams::identity(params.crop_origin);
            }
            let s = apply_augment(sample, &params, cfg.crop_size)?;
            let targets = match LabelTargets::new(&s.labels, s.dims, classes) {
                Ok(t) => t,
                Err(SegError::NoLabels) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let key = derive(cfg.seed, purpose::DROPOUT, tag);
            let (loss, grads) = model.loss_and_grads(&s.to_tensor(), &targets, Mode::Train, key)?;
            adam_step(model.graph_mut().params_mut(), &grads, &mut state, lr, cfg.weight_decay);
            loss_sum += loss;
            steps += 1;
        }
        let val_loss = validation_loss(model, &val)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            val_loss,
            lr,
        });
        let ev = sched.observe(epoch, val_loss);
        if ev.improved {
            best_params = model.params().to_vec();
        }
        if ev.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    model.set_params(&best_params)?;
    Ok(TrainOutcome {
        report: TrainReport {
            epochs,
            initial_val_loss,
            best_epoch: sched.best_epoch(),
            best_val_loss: sched.best(),
            stop_reason,
            skipped_steps: skipped,
        },
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relaxometry::{make_phantom, AcqParams, PhantomSpec};
    use crate::segnet::unet::{build_unet, UNetConfig};

    fn subjects(n: usize) -> Vec<Subject> {
        (0..n)
            .map(|i| {
                let spec = PhantomSpec::thalamus([16, 16, 16], i as u64);
                let ph = make_phantom(&spec, &AcqParams::default(), i as u64).unwrap();
                let scale = ph.mprage.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let ch = ph.mprage.data().iter().map(|v| v / scale).collect();
                Subject {
                    id: format!("s{i}"),
                    sample: Sample::new([16; 3], vec![ch], ph.labels.labels().to_vec()).unwrap(),
                }
            })
            .collect()
    }

    fn fold() -> Fold {
        Fold {
            train: vec!["s0".into(), "s1".into()],
            val: vec!["s2".into()],
            test: vec![],
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            crop_size: [16; 3],
            max_epochs: 6,
            seed: 4,
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_goes_down_and_best_is_restored() {
        let subs = subjects(3);
        let mut m = build_unet(&UNetConfig::new(1, 14, 1, 4, 0.0), 2).unwrap();
        let out = train(&mut m, &subs, &fold(), &cfg()).unwrap();
        let r = &out.report;
        assert_eq!(r.epochs.len(), 6);
        assert_eq!(r.stop_reason, StopReason::MaxEpochs);
        assert!(
            r.best_val_loss < r.initial_val_loss,
            "{} vs {}",
            r.best_val_loss,
            r.initial_val_loss
        );
        assert_eq!(m.params(), &out.best_params[..]);
        let val = subs[2].sample.center_crop([16; 3]).unwrap();
        let t = LabelTargets::new(&val.labels, val.dims, 14).unwrap();
        let again = m.loss(&val.to_tensor(), &t, Mode::Eval, 0).unwrap();
        assert_eq!(again, r.best_val_loss);
        assert_eq!(r.to_csv().lines().count(), 7);
    }

    #[test]
    fn seeded_runs_match() {
        let subs = subjects(3);
        let c = TrainConfig {
            max_epochs: 2,
            augment: true,
            crop_size: [8; 3],
            ..cfg()
        };
        let run = || {
            let mut m = build_unet(&UNetConfig::new(1, 14, 1, 2, 0.1), 2).unwrap();
            train(&mut m, &subs, &fold(), &c).unwrap();
            m.checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bad_splits() {
        let subs = subjects(3);
        let mut m = build_unet(&UNetConfig::new(1, 14, 1, 2, 0.0), 2).unwrap();
        let mut f = fold();
        f.val.clear();
        assert!(matches!(train(&mut m, &subs, &f, &cfg()), Err(SegError::EmptySplit(_))));
        let mut f = fold();
        f.train.push("nobody".into());
        assert!(matches!(
            train(&mut m, &subs, &f, &cfg()),
            Err(SegError::UnknownSubject(_))
        ));
        let c = TrainConfig {
            lr_decay_factor: 1.5,
            ..cfg()
        };
        assert!(matches!(train(&mut m, &subs, &fold(), &c), Err(SegError::Config(_))));
    }
}
