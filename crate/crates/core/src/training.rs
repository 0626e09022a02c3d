//! Optimization: augmentation, SGD with momentum, cosine-annealed learning
//! rate, train/eval loops and metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Label, PartTable, PointCloud, Split};
use crate::error::{Error, Result};
use crate::networks::{Model, Task};
use crate::params::{Forward, Mode, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Running statistics keep this share of their old value per step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub seed: u64,
    pub scale_range: [f64; 2],
    pub translate_range: [f64; 2],
    /// Stop once an epoch's train score (accuracy, or instance mIoU for
    /// segmentation, in percent) reaches this.
    pub early_stop: Option<f64>,
    pub augment: bool,
    /// Batches of clean training clouds used to re-estimate running
    /// statistics after every epoch; 0 keeps the moving averages.
    pub bn_recalibration_batches: usize,
    /// Score the train split in eval mode instead of averaging the
    /// training batches.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr_start: 0.1,
            lr_end: 0.001,
            momentum: 0.9,
            dropout: 0.5,
            seed: 0,
            scale_range: [0.66, 1.5],
            translate_range: [-0.2, 0.2],
            early_stop: None,
            augment: true,
            bn_recalibration_batches: 4,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return bad(format!("need lr_start > lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad(format!("scale range [{s0}, {s1}] must be positive and ordered"));
        }
        let [t0, t1] = self.translate_range;
        if !(t0 <= t1) || !t0.is_finite() || !t1.is_finite() {
            return bad(format!("translate range [{t0}, {t1}] must be ordered"));
        }
        Ok(())
    }
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_epochs == 0 || epoch >= total_epochs {
        return lr_end;
    }
    if epoch == 0 {
        return lr_start;
    }
    let t = epoch as f64 / total_epochs as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64) {
    let (lr, m) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = m * *v + g;
        *p = *p - lr * *v;
    }
}

/// Per-axis scale uniform in `scale`, then per-axis shift uniform in
/// `translate`.
pub fn augment_with(cloud: &PointCloud, scale: [f64; 2], translate: [f64; 2], rng: &mut impl Rng) -> PointCloud {
    let draw = |r: &mut dyn RngCore, [lo, hi]: [f64; 2]| if lo < hi { r.random_range(lo..=hi) } else { lo };
    let s: [f64; 3] = std::array::from_fn(|_| draw(rng, scale));
    let t: [f64; 3] = std::array::from_fn(|_| draw(rng, translate));
    let points = cloud
        .points
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |a| (p[a] as f64 * s[a] + t[a]) as f32))
        .collect();
    PointCloud {
        points,
        label: cloud.label.clone(),
        category: cloud.category,
    }
}

pub fn augment(cloud: &PointCloud, config: &TrainConfig, rng: &mut impl Rng) -> PointCloud {
    augment_with(cloud, config.scale_range, config.translate_range, rng)
}

/// Intersection over union of `part` between two label arrays; 1 when the
/// part is absent from both.
pub fn part_iou(pred: &[u16], truth: &[u16], part: u16) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (a, b) = (p == part, t == part);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One segmented shape for `miou`.
pub struct SegShape<'a> {
    pub pred: &'a [u16],
    pub truth: &'a [u16],
    pub category: u16,
}

/// `(class mIoU, instance mIoU)` in percent. A shape scores the mean IoU of
/// its category's parts; instance mIoU averages shapes, class mIoU averages
/// the per-category means.
pub fn miou(shapes: &[SegShape<'_>], table: &PartTable) -> Result<(f64, f64)> {
    if shapes.is_empty() {
        return Err(Error::Input("no shapes to score".into()));
    }
    let mut per_category = vec![(0.0f64, 0usize); table.categories.len()];
    let mut total = 0.0;
    for s in shapes {
        let parts = table
            .parts_of(s.category)
            .ok_or_else(|| Error::Input(format!("unknown category {}", s.category)))?;
        if s.pred.len() != s.truth.len() {
            return Err(Error::Input("prediction and label lengths differ".into()));
        }
        let score = parts.iter().map(|&p| part_iou(s.pred, s.truth, p)).sum::<f64>() / parts.len() as f64;
        total += score;
        let slot = &mut per_category[s.category as usize];
        slot.0 += score;
        slot.1 += 1;
    }
    let seen: Vec<f64> = per_category
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|(s, n)| s / *n as f64)
        .collect();
    let class = seen.iter().sum::<f64>() / seen.len() as f64;
    Ok((100.0 * class, 100.0 * total / shapes.len() as f64))
}

fn argmax_in<T: Scalar>(row: &[T], allowed: Option<&[u16]>) -> usize {
    let mut best: Option<(usize, T)> = None;
    let mut consider = |i: usize| {
        if best.is_none_or(|(_, b)| row[i] > b) {
            best = Some((i, row[i]));
        }
    };
    match allowed {
        Some(parts) => parts.iter().for_each(|&p| consider(p as usize)),
        None => (0..row.len()).for_each(&mut consider),
    }
    best.map_or(0, |(i, _)| i)
}

/// Predicted class per row of `[B, classes]` logits.
pub fn predict_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .data()
        .chunks_exact(logits.last_dim())
        .map(|r| argmax_in(r, None))
        .collect()
}

/// Per-point parts, each restricted to its shape's category.
pub fn predict_parts<T: Scalar>(logits: &Tensor<T>, clouds: &[&PointCloud], table: &PartTable) -> Vec<Vec<u16>> {
    let k = logits.last_dim();
    let mut rows = logits.data().chunks_exact(k);
    clouds
        .iter()
        .map(|c| {
            let allowed = c.category.and_then(|cat| table.parts_of(cat));
            (0..c.len())
                .map(|_| argmax_in(rows.next().expect("one row per point"), allowed) as u16)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Percent of shapes (classification) or points (segmentation).
    pub accuracy: f64,
    pub class_miou: Option<f64>,
    pub instance_miou: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,accuracy,class_miou,instance_miou";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{},{}",
            self.epoch,
            self.split.name(),
            self.loss,
            self.accuracy,
            opt(self.class_miou),
            opt(self.instance_miou)
        )
    }

    /// The figure of merit: instance mIoU when present, else accuracy.
    pub fn score(&self) -> f64 {
        self.instance_miou.unwrap_or(self.accuracy)
    }
}

impl std::fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {} {}: loss {:.4} accuracy {:.2}%",
            self.epoch,
            self.split.name(),
            self.loss,
            self.accuracy
        )?;
        if let (Some(c), Some(i)) = (self.class_miou, self.instance_miou) {
            write!(f, " class mIoU {c:.2}% instance mIoU {i:.2}%")?;
        }
        Ok(())
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Coordinates `[B·N, 3]` and per-row labels of a batch.
pub fn stack_batch<T: Scalar>(clouds: &[&PointCloud]) -> Result<(Tensor<T>, Vec<usize>)> {
    let n = clouds.first().ok_or_else(|| Error::Input("empty batch".into()))?.len();
    if clouds.iter().any(|c| c.len() != n) {
        return Err(Error::Input("clouds in a batch must share a point count".into()));
    }
    let coords: Vec<T> = clouds
        .iter()
        .flat_map(|c| c.points.iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    let mut labels = Vec::new();
    for c in clouds {
        match &c.label {
            Label::Class(l) => labels.push(*l as usize),
            Label::Parts(p) => labels.extend(p.iter().map(|&l| l as usize)),
        }
    }
    Ok((Tensor::new(vec![clouds.len() * n, 3], coords)?, labels))
}

fn check_task<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    if model.config.task != data.task {
        return Err(Error::Config(format!(
            "{} model cannot run on a {} dataset",
            model.config.task, data.task
        )));
    }
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    Ok(())
}

/// Evaluation-mode metrics over a whole dataset.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
    epoch: usize,
    split: Split,
) -> Result<MetricsRow> {
    check_task(model, data)?;
    let table = data.part_table.as_ref();
    let mut loss_sum = 0.0;
    let (mut correct, mut counted) = (0usize, 0usize);
    let mut preds: Vec<Vec<u16>> = Vec::with_capacity(data.len());
    for chunk in data.clouds.chunks(batch_size.max(1)) {
        let batch: Vec<&PointCloud> = chunk.iter().collect();
        let (coords, labels) = stack_batch::<T>(&batch)?;
        let mut fwd = Forward::new(&model.params, Mode::Eval, false, 0);
        let logits = model.forward(&mut fwd, &coords, batch.len())?;
        let loss = fwd.tape.cross_entropy(logits, &labels)?;
        loss_sum += fwd.tape.value(loss).data()[0].as_f64() * labels.len() as f64;
        let out = fwd.tape.value(logits);
        let predicted: Vec<usize> = match model.config.task {
            Task::Classification => predict_classes(out),
            Task::Segmentation => {
                let table = table.ok_or_else(|| Error::Input("segmentation data without part table".into()))?;
                let parts = predict_parts(out, &batch, table);
                let flat = parts.iter().flatten().map(|&p| p as usize).collect();
                preds.extend(parts);
                flat
            }
        };
        correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        counted += labels.len();
    }
    let (class_miou, instance_miou) = match model.config.task {
        Task::Classification => (None, None),
        Task::Segmentation => {
            let shapes: Vec<SegShape<'_>> = data
                .clouds
                .iter()
                .zip(&preds)
                .map(|(c, p)| SegShape {
                    pred: p,
                    truth: c.parts().expect("segmentation labels"),
                    category: c.category.unwrap_or(0),
                })
                .collect();
            let (c, i) = miou(&shapes, table.expect("checked above"))?;
            (Some(c), Some(i))
        }
    };
    Ok(MetricsRow {
        epoch,
        split,
        loss: loss_sum / counted as f64,
        accuracy: 100.0 * correct as f64 / counted as f64,
        class_miou,
        instance_miou,
    })
}

/// Momentum buffers, one per trainable parameter.
pub struct Sgd<T> {
    velocity: Vec<Option<Vec<T>>>,
    pub momentum: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Model<T>, momentum: f64) -> Self {
        Self {
            velocity: vec![None; model.params.len()],
            momentum,
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: Vec<(ParamId, Vec<T>)>, lr: f64) -> Result<()> {
        for (id, g) in grads {
            let current = model.params.get(id);
            let mut data = current.to_vec();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); data.len()]);
            sgd_momentum_step(&mut data, &g, v, lr, self.momentum);
            let shape = current.shape().to_vec();
            model.params.set(id, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }
}

/// Loss and accuracy of one training step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub counted: usize,
}

/// Forward, backward, parameter and running-statistics update on one batch.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    batch: &[&PointCloud],
    lr: f64,
    dropout_seed: u64,
) -> Result<StepStats> {
    let (coords, labels) = stack_batch::<T>(batch)?;
    let (grads, updates, stats) = {
        let mut fwd = Forward::new(&model.params, Mode::Train, true, dropout_seed);
        let logits = model.forward(&mut fwd, &coords, batch.len())?;
        let loss = fwd.tape.cross_entropy(logits, &labels)?;
        let loss_value = fwd.tape.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        let out = fwd.tape.value(logits);
        let predicted = match model.config.task {
            Task::Classification => predict_classes(out),
            Task::Segmentation => (0..out.rows())
                .map(|r| argmax_in(&out.data()[r * out.last_dim()..(r + 1) * out.last_dim()], None))
                .collect(),
        };
        let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let mut g = fwd.tape.backward(loss)?;
        let grads = fwd.param_grads(&mut g);
        let (_, updates) = fwd.into_parts();
        let stats = StepStats {
            loss: loss_value,
            correct,
            counted: labels.len(),
        };
        (grads, updates, stats)
    };
    opt.step(model, grads, lr)?;
    model.params.apply_bn_updates(&updates, BN_MOMENTUM)?;
    Ok(stats)
}

/// Replaces running statistics by the equal-weight average of batch
/// statistics over `batches` batches of `clouds`, dropout disabled.
pub fn recalibrate_bn<T: Scalar>(
    model: &mut Model<T>,
    clouds: &[PointCloud],
    batch_size: usize,
    batches: usize,
) -> Result<()> {
    let dropout = std::mem::replace(&mut model.config.dropout, 0.0);
    let result = (|| {
        for (i, chunk) in clouds.chunks(batch_size.max(2)).take(batches).enumerate() {
            if chunk.len() < 2 && i > 0 {
                break;
            }
            let refs: Vec<&PointCloud> = chunk.iter().collect();
            let (coords, _) = stack_batch::<T>(&refs)?;
            let mut fwd = Forward::new(&model.params, Mode::Train, false, 0);
            model.forward(&mut fwd, &coords, refs.len())?;
            let (_, updates) = fwd.into_parts();
            model.params.apply_bn_updates(&updates, i as f64 / (i + 1) as f64)?;
        }
        Ok(())
    })();
    model.config.dropout = dropout;
    result
}

/// Metrics of one finished epoch.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Averaged over the epoch's training batches.
    pub train: MetricsRow,
    pub test: Option<MetricsRow>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

/// Runs the schedule. The epoch RNG is seeded with `seed + epoch`; it
/// shuffles, augments and seeds dropout. A trailing batch of one cloud is
/// dropped. `on_epoch` sees each report with the updated model and whether
/// the epoch is the best so far.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Model<T>, bool) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    check_task(model, train_set)?;
    if let Some(t) = test_set {
        check_task(model, t)?;
    }
    model.config.dropout = config.dropout;
    let mut opt = Sgd::new(model, config.momentum);
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut stopped_early = false;
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr_start, config.lr_end);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut counted) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 && train_set.len() > 1 {
                continue;
            }
            let clouds: Vec<PointCloud> = chunk
                .iter()
                .map(|&i| {
                    let c = &train_set.clouds[i];
                    if config.augment {
                        augment(c, config, &mut rng)
                    } else {
                        c.clone()
                    }
                })
                .collect();
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let seed = rng.next_u64();
            let s = train_step(model, &mut opt, &refs, lr, seed)?;
            loss_sum += s.loss * s.counted as f64;
            correct += s.correct;
            counted += s.counted;
        }
        epochs_run = epoch + 1;
        if config.bn_recalibration_batches > 0 {
            recalibrate_bn(model, &train_set.clouds, config.batch_size, config.bn_recalibration_batches)?;
        }
        let train_row = if config.eval_train {
            evaluate(model, train_set, config.batch_size, epoch, Split::Train)?
        } else {
            MetricsRow {
                epoch,
                split: Split::Train,
                loss: loss_sum / counted.max(1) as f64,
                accuracy: 100.0 * correct as f64 / counted.max(1) as f64,
                class_miou: None,
                instance_miou: None,
            }
        };
        let test_row = test_set
            .map(|t| evaluate(model, t, config.batch_size, epoch, Split::Test))
            .transpose()?;
        let score = test_row.as_ref().unwrap_or(&train_row).score();
        let is_best = best.is_none_or(|(_, b)| score > b);
        if is_best {
            best = Some((epoch, score));
        }
        let report = EpochReport {
            epoch,
            lr,
            train: train_row.clone(),
            test: test_row.clone(),
        };
        on_epoch(&report, model, is_best)?;
        rows.push(train_row.clone());
        rows.extend(test_row);
        if config.early_stop.is_some_and(|target| train_row.score() >= target) {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_score) = best.expect("at least one epoch");
    Ok(TrainSummary {
        rows,
        epochs_run,
        best_epoch,
        best_score,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 200, 0.1, 0.001), 0.1);
        assert_eq!(cosine_lr(200, 200, 0.1, 0.001), 0.001);
        assert!((cosine_lr(100, 200, 0.1, 0.001) - 0.0505).abs() < 1e-12);
    }

    #[test]
    fn sgd_two_steps() {
        let (mut p, mut v) = (vec![0.0f64], vec![0.0f64]);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert!((p[0] + 0.1).abs() < 1e-12);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert!((v[0] - 1.9).abs() < 1e-12);
        assert!((p[0] + 0.1 + 0.19).abs() < 1e-12);
    }

    #[test]
    fn empty_part_counts_as_one() {
        assert_eq!(part_iou(&[0, 0], &[0, 0], 1), 1.0);
        assert_eq!(part_iou(&[0, 1], &[1, 1], 1), 0.5);
    }

    #[test]
    fn restricted_argmax() {
        assert_eq!(argmax_in(&[5.0f32, 1.0, 2.0, 0.0], Some(&[2, 3])), 2);
        assert_eq!(argmax_in(&[1.0f32, 3.0, 3.0], None), 1);
    }
}
