//! Teacher training, the data-free distillation loop, and evaluation.

mod metrics;
mod seed;

pub use metrics::{
    attack_line, metrics_line, timing_line, AttackRow, CsvLog, MetricsRow, RunLogs, ATTACK_HEADER, METRICS_HEADER,
    TIMING_HEADER,
};
pub use seed::mix_seed;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{self, augment_batch, AugLevel, AugmentConfig};
use crate::boundary::{attack_batch, AttackConfig, AttackItem, AttackStats, DeeperConfig, IncludeFlags};
use crate::curate::{Example, KdDataset};
use crate::dataset::{stack_images, LabeledSet};
use crate::error::{contract, Result};
use crate::gradcore::{sgd_step, tempered_softmax, LrSchedule, Mode, Model, OptimState, Tape, Tensor};
use crate::par;

/// Switches for the ablation study; all on except the two "extra
/// example" modes is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_border_attack: bool,
    pub use_deeper_attack: bool,
    pub use_pre_success: bool,
    pub use_filters: bool,
    /// Attack the un-mixed augmented images as well as the mixed ones.
    pub attack_on_normal_and_mixup: bool,
    /// Add the un-attacked mixed and un-mixed images to the loss.
    pub loss_on_all_example_kinds: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_border_attack: true,
            use_deeper_attack: true,
            use_pre_success: true,
            use_filters: true,
            attack_on_normal_and_mixup: false,
            loss_on_all_example_kinds: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Softmax temperature for distillation.
    pub tau: f32,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            tau: 20.0,
            seed: 1,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mixup: bool) -> Result<()> {
        if self.batch_size == 0 || (mixup && self.batch_size < 2) {
            return Err(contract("batch size must be >= 1 (>= 2 with mixup)"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(contract("temperature must be positive"));
        }
        if !(self.lr0 >= 0.0) {
            return Err(contract("learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Augmentation used while training the teacher: a light RandAugment plus
/// flip and padded crop.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherAugment {
    pub rand_n: usize,
    pub rand_m: u32,
    pub pad: usize,
}

impl Default for TeacherAugment {
    fn default() -> Self {
        Self {
            rand_n: 2,
            rand_m: 14,
            pad: 4,
        }
    }
}

/// Fraction of argmax-correct predictions (ties go to the lowest class).
pub fn evaluate(model: &Model, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(contract("cannot evaluate on an empty dataset"));
    }
    if model.mode() != Mode::Eval {
        return Err(contract("evaluate needs a model in eval mode"));
    }
    let mut correct = 0usize;
    for (imgs, labels) in data.images.chunks(256).zip(data.labels.chunks(256)) {
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let preds = model.infer(&stack_images(&refs)?)?.argmax_rows();
        correct += preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn eval_copy(model: &Model) -> Model {
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    m
}

/// Train with cross-entropy and return the epoch with the best validation
/// accuracy (earliest on ties), in eval mode.
pub fn train_teacher<R: Rng + ?Sized>(
    train: &LabeledSet,
    val: &LabeledSet,
    model: Model,
    cfg: &TrainConfig,
    aug: &TeacherAugment,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<Model> {
    if train.is_empty() || val.is_empty() {
        return Err(contract("teacher training needs non-empty train and validation sets"));
    }
    cfg.validate(false)?;
    let mut model = model;
    model.set_mode(Mode::Train);
    let mut best = eval_copy(&model);
    let mut best_acc = f64::NEG_INFINITY;
    if cfg.epochs == 0 {
        return Ok(best);
    }
    let mut opt = OptimState::new(&model, cfg.momentum, cfg.weight_decay);
    let schedule = LrSchedule {
        initial_lr: cfg.lr0,
        total_epochs: cfg.epochs,
    };
    let flip_crop = AugmentConfig {
        level: AugLevel::Minimal,
        pad: aug.pad,
        ..Default::default()
    };
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.shuffle(rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let seed: u64 = rng.gen();
            let images = par::map_range(idx.len(), |k| {
                let mut r = augment::example_rng(seed, k);
                let x = augment::rand_augment(&train.images[idx[k]], aug.rand_n, aug.rand_m, &mut r);
                let ex = Example {
                    image: x,
                    target: 0,
                    provenance: 0,
                    teacher_pred: 0,
                };
                augment::augment_pipeline(&ex, &flip_crop, &mut r).image
            });
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let refs: Vec<&Tensor> = images.iter().collect();
            let mut tape = Tape::new();
            let x = tape.leaf(stack_images(&refs)?, false);
            let pass = model.forward(&mut tape, x, true)?;
            let loss = tape.cross_entropy(pass.logits, &labels)?;
            loss_sum += tape.value(loss).data()[0] as f64;
            batches += 1;
            model.backward(&mut tape, loss, &pass)?;
            model.update_running_stats(&pass);
            sgd_step(&mut model, &mut opt, lr)?;
        }
        let snapshot = eval_copy(&model);
        let acc = evaluate(&snapshot, val)?;
        if acc > best_acc {
            best_acc = acc;
            best = snapshot;
        }
        on_epoch(&MetricsRow {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            eval_accuracy: Some(acc),
            lr,
            attack_success_rate: 0.0,
            wall_seconds: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(best)
}

/// Counters a distillation run reports alongside the student.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillSummary {
    pub batches: usize,
    /// Batches dropped because no image survived the attack filters.
    pub skipped_batches: usize,
    pub final_loss: f64,
}

/// Build the attack inputs for one batch: augment, then mix.
fn prepare_batch<R: Rng + ?Sized>(
    batch: &[Example],
    aug: &AugmentConfig,
    ablation: &Ablation,
    rng: &mut R,
) -> Result<Vec<AttackItem>> {
    let seed: u64 = rng.gen();
    let augmented = augment_batch(batch, aug, seed);
    if !aug.mixup || augmented.len() < 2 {
        return Ok(augmented
            .into_iter()
            .map(|e| AttackItem {
                image: e.image,
                target: e.target,
                pre_mixup: None,
            })
            .collect());
    }
    let mixed = augment::mixup_batch(&augmented, rng)?;
    let mut items: Vec<AttackItem> = mixed
        .into_iter()
        .zip(&augmented)
        .map(|(m, e)| AttackItem {
            image: m.image,
            target: m.target,
            pre_mixup: Some(e.image.clone()),
        })
        .collect();
    if ablation.attack_on_normal_and_mixup {
        items.extend(augmented.into_iter().map(|e| AttackItem {
            image: e.image,
            target: e.target,
            pre_mixup: None,
        }));
    }
    Ok(items)
}

/// Data-free distillation: every batch is augmented, mixed, pushed onto the
/// teacher's decision boundaries, and the student is fit to the teacher's
/// softened outputs on the result. Returns the last-epoch student.
#[allow(clippy::too_many_arguments)]
pub fn distill<R: Rng + ?Sized>(
    teacher: &Model,
    student: Model,
    kd: &KdDataset,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    atk: &AttackConfig,
    deep: &DeeperConfig,
    monitor: Option<&LabeledSet>,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&MetricsRow, &[AttackRow]) -> Result<()>,
) -> Result<(Model, DistillSummary)> {
    if teacher.num_classes() != student.num_classes() {
        return Err(contract(format!(
            "teacher has {} classes, student {}",
            teacher.num_classes(),
            student.num_classes()
        )));
    }
    if teacher.input_shape() != student.input_shape() {
        return Err(contract("teacher and student input shapes differ"));
    }
    if teacher.mode() != Mode::Eval {
        return Err(contract("the teacher must stay in eval mode"));
    }
    cfg.validate(aug.mixup)?;
    aug.validate()?;
    atk.validate()?;
    let mut summary = DistillSummary::default();
    let mut student = student;
    if cfg.epochs == 0 {
        return Ok((student, summary));
    }
    if kd.is_empty() {
        return Err(contract("the KD dataset is empty"));
    }
    student.set_mode(Mode::Train);
    let mut opt = OptimState::new(&student, cfg.momentum, cfg.weight_decay);
    let schedule = LrSchedule {
        initial_lr: cfg.lr0,
        total_epochs: cfg.epochs,
    };
    let ab = cfg.ablation;
    let flags = IncludeFlags {
        border: ab.use_border_attack,
        deeper: ab.use_deeper_attack,
        pre_success: ab.use_pre_success,
        filters: ab.use_filters,
        normal_and_mixup: ab.loss_on_all_example_kinds,
    };
    // The tempered KL shrinks gradients by 1/τ²; scaling it back keeps the
    // step size independent of the temperature.
    let loss_scale = cfg.tau * cfg.tau;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..kd.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.shuffle(rng);
        let mut loss_sum = 0.0f64;
        let mut loss_batches = 0usize;
        let mut epoch_stats = AttackStats::default();
        let mut attack_rows = Vec::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            summary.batches += 1;
            let batch: Vec<Example> = idx.iter().map(|&i| kd.examples[i].clone()).collect();
            let items = prepare_batch(&batch, aug, &ab, rng)?;
            let out = attack_batch(teacher, &items, atk, deep, flags, rng)?;
            let c = out.stats.counts;
            epoch_stats.counts.attempted += c.attempted;
            epoch_stats.counts.skipped += c.skipped;
            epoch_stats.counts.failed += c.failed;
            epoch_stats.counts.kept += c.kept;
            attack_rows.push(AttackRow {
                epoch,
                batch: b,
                stats: out.stats,
            });
            if out.images.is_empty() {
                summary.skipped_batches += 1;
                continue;
            }
            let refs: Vec<&Tensor> = out.images.iter().collect();
            let inputs = stack_images(&refs)?;
            let p_t = tempered_softmax(&teacher.infer(&inputs)?, cfg.tau)?;
            let mut tape = Tape::new();
            let x = tape.leaf(inputs, false);
            let pass = student.forward(&mut tape, x, true)?;
            let p_s = tape.tempered_softmax(pass.logits, cfg.tau)?;
            let pt = tape.leaf(p_t, false);
            let kl = tape.kd_loss(pt, p_s)?;
            let value = tape.value(kl).data()[0];
            if !value.is_finite() {
                return Err(contract(format!("non-finite distillation loss at epoch {epoch}")));
            }
            let scaled = tape.weighted_sum(kl, vec![loss_scale])?;
            student.backward(&mut tape, scaled, &pass)?;
            student.update_running_stats(&pass);
            sgd_step(&mut student, &mut opt, lr)?;
            loss_sum += value as f64;
            loss_batches += 1;
        }
        let train_loss = loss_sum / loss_batches.max(1) as f64;
        summary.final_loss = train_loss;
        let eval_accuracy = match monitor {
            Some(set) => Some(evaluate(&eval_copy(&student), set)?),
            None => None,
        };
        on_epoch(
            &MetricsRow {
                epoch,
                train_loss,
                eval_accuracy,
                lr,
                attack_success_rate: epoch_stats.success_rate(),
                wall_seconds: start.elapsed().as_secs_f64(),
            },
            &attack_rows,
        )?;
    }
    student.set_mode(Mode::Eval);
    Ok((student, summary))
}

/// Sample mean and (n−1)-denominator standard deviation; 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Run `trial` once per seed (after mixing) and summarise the accuracies.
pub fn run_trials<F>(seeds: &[u64], mut trial: F) -> Result<(Vec<f64>, f64, f64)>
where
    F: FnMut(u64) -> Result<f64>,
{
    if seeds.is_empty() {
        return Err(contract("at least one seed is required"));
    }
    let accs = seeds.iter().map(|&s| trial(mix_seed(s))).collect::<Result<Vec<_>>>()?;
    let (m, s) = mean_std(&accs);
    Ok((accs, m, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{small_cnn, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trial_statistics() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        let (_, _, s) = run_trials(&[4, 4, 4], |seed| Ok(seed as f64 % 1000.0)).unwrap();
        assert_eq!(s, 0.0);
        assert!(run_trials(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn constant_model_scores_one_over_r() {
        let mut m = Model::zeroed([3, 2, 2], vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 4 }]).unwrap();
        m.set_mode(Mode::Eval);
        let images = (0..8).map(|_| Tensor::full(vec![3, 2, 2], 0.5)).collect();
        let set = LabeledSet::new(images, (0..8).map(|i| i % 4).collect()).unwrap();
        assert_eq!(evaluate(&m, &set).unwrap(), 0.25);
        assert!(evaluate(&m, &LabeledSet::default()).is_err());
    }

    #[test]
    fn zero_epochs_are_no_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new([3, 8, 8], small_cnn(&[4], 3), &mut rng).unwrap();
        let images: Vec<Tensor> = (0..6).map(|i| Tensor::full(vec![3, 8, 8], i as f32 / 6.0)).collect();
        let set = LabeledSet::new(images.clone(), (0..6).map(|i| i % 3).collect()).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train_teacher(&set, &set, model.clone(), &cfg, &TeacherAugment::default(), &mut rng, &mut |_| Ok(()))
            .unwrap();
        assert_eq!(out.params(), model.params());

        let mut teacher = model.clone();
        teacher.set_mode(Mode::Eval);
        let kd = KdDataset {
            examples: vec![],
            per_class_count: vec![0; 3],
        };
        let (s, _) = distill(
            &teacher,
            model.clone(),
            &kd,
            &cfg,
            &AugmentConfig::default(),
            &AttackConfig::default(),
            &DeeperConfig::default(),
            None,
            &mut rng,
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(s, model);
    }

    #[test]
    fn class_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut teacher = Model::new([3, 8, 8], small_cnn(&[4], 3), &mut rng).unwrap();
        teacher.set_mode(Mode::Eval);
        let student = Model::new([3, 8, 8], small_cnn(&[4], 5), &mut rng).unwrap();
        let kd = KdDataset {
            examples: vec![],
            per_class_count: vec![0; 3],
        };
        let r = distill(
            &teacher,
            student,
            &kd,
            &TrainConfig::default(),
            &AugmentConfig::default(),
            &AttackConfig::default(),
            &DeeperConfig::default(),
            None,
            &mut rng,
            &mut |_, _| Ok(()),
        );
        assert!(r.is_err());
    }
}
