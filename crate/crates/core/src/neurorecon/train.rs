use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::model::{argmax, build_ann1_r, plane, ModelState, NetKind, NetworkSpec};
use crate::diffcore::ops::{categorical_ce, pixelwise_bce};
use crate::diffcore::{Adam, AdamConfig, BnMode, Graph, Tensor};
use crate::error::{bail, Error, Result};
use crate::kv::KvMap;
use crate::metrics::{accuracy, mae, ssim, MetricReport};
use crate::opticsim::{Dataset, Sample, Split};
use crate::rng;

const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 15,
            lr: 1e-3,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            bail!(
                Config,
                "batch size must be at least 2 for batch normalization, got {}",
                self.batch_size
            );
        }
        if self.max_epochs == 0 {
            bail!(Config, "max_epochs must be at least 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.insert("batch_size", self.batch_size);
        kv.insert("max_epochs", self.max_epochs);
        kv.insert("lr", self.lr);
        kv.insert("patience", self.patience);
        kv.insert("seed", self.seed);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("max_epochs", &mut self.max_epochs)?;
        kv.apply("lr", &mut self.lr)?;
        kv.apply("patience", &mut self.patience)?;
        kv.apply("seed", &mut self.seed)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean mini-batch loss in train mode.
    pub train_loss: f64,
    /// Eval-mode loss over the validation split.
    pub val_loss: f64,
    pub seconds: f64,
}

/// Held-out quality of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct TestMetrics {
    pub report: MetricReport,
    /// ANN2: mean non-target plane intensity over mean target plane intensity.
    pub off_target_ratio: Option<f64>,
    /// Mean wall-clock seconds per single-image inference.
    pub seconds_per_image: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub net: String,
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub steps: u64,
    pub test: Option<TestMetrics>,
}

impl TrainReport {
    /// Machine-readable report without wall-clock values, so that reruns
    /// with one seed compare byte for byte.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "net={}", self.net);
        let _ = writeln!(s, "epochs_run={}", self.epochs.len());
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "steps={}", self.steps);
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = writeln!(s, "epoch.{}.train_loss={:.9}", i + 1, e.train_loss);
            let _ = writeln!(s, "epoch.{}.val_loss={:.9}", i + 1, e.val_loss);
        }
        if let Some(t) = &self.test {
            s.push_str(&t.report.to_kv("test."));
            if let Some(r) = t.off_target_ratio {
                let _ = writeln!(s, "test.off_target_ratio={r:.6}");
            }
        }
        s
    }

    pub fn timing_kv(&self) -> String {
        let mut s = String::new();
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = writeln!(s, "epoch.{}.seconds={:.3}", i + 1, e.seconds);
        }
        if let Some(t) = &self.test {
            let _ = writeln!(s, "inference.ms_per_image={:.4}", t.seconds_per_image * 1e3);
        }
        s
    }
}

enum Targets {
    Images(Tensor<f32>),
    Labels(Vec<usize>),
}

fn check_sample(spec: &NetworkSpec, s: &Sample) -> Result<()> {
    let e = spec.extent;
    if s.ccm.shape() != [e, e] || s.reference.shape() != [e, e] {
        bail!(
            Mismatch,
            "sample {} has extents {:?}/{:?}; {} expects {e}×{e}",
            s.id,
            s.ccm.shape(),
            s.reference.shape(),
            spec.kind
        );
    }
    Ok(())
}

fn inputs(spec: &NetworkSpec, batch: &[&Sample]) -> Result<Tensor<f32>> {
    let e = spec.extent;
    let mut data = Vec::with_capacity(batch.len() * e * e);
    for s in batch {
        check_sample(spec, s)?;
        data.extend_from_slice(s.ccm.data());
    }
    Tensor::new(&[batch.len(), e, e, 1], data)
}

fn targets(spec: &NetworkSpec, batch: &[&Sample]) -> Result<Targets> {
    let e = spec.extent;
    match spec.kind {
        NetKind::Ann1R => {
            let mut data = Vec::with_capacity(batch.len() * e * e);
            for s in batch {
                data.extend_from_slice(s.reference.data());
            }
            Ok(Targets::Images(Tensor::new(&[batch.len(), e, e, 1], data)?))
        }
        NetKind::Ann2 => {
            let mut data = Vec::with_capacity(batch.len() * e * e * 3);
            for s in batch {
                data.extend_from_slice(s.plane_target()?.data());
            }
            Ok(Targets::Images(Tensor::new(&[batch.len(), e, e, 3], data)?))
        }
        NetKind::Ann1C => Ok(Targets::Labels(
            batch
                .iter()
                .map(|s| s.layer().map(|z| z - 1))
                .collect::<Result<_>>()?,
        )),
    }
}

/// Mean eval-mode loss over `samples`.
pub fn evaluate_loss(model: &ModelState, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        bail!(Argument, "no samples to evaluate");
    }
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let out = model.predict(inputs(&model.spec, chunk)?)?;
        let loss = match targets(&model.spec, chunk)? {
            Targets::Images(t) => pixelwise_bce(&out, &t)? as f64,
            Targets::Labels(l) => {
                let mut acc = 0.0;
                for (probs, &label) in out.data().chunks_exact(3).zip(&l) {
                    acc += categorical_ce(&Tensor::new(&[3], probs.to_vec())?, label)? as f64;
                }
                acc / l.len() as f64
            }
        };
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// One optimizer step on `batch`; returns the mini-batch loss.
pub fn train_step(model: &mut ModelState, adam: &mut Adam, batch: &[&Sample]) -> Result<f64> {
    let x = inputs(&model.spec, batch)?;
    let t = targets(&model.spec, batch)?;
    let mut g = Graph::new();
    let x = g.input(x)?;
    let out = model.forward(&mut g, x, BnMode::Train)?;
    let loss = match &t {
        Targets::Images(t) => g.pixelwise_bce(out, t)?,
        Targets::Labels(l) => g.categorical_ce(out, l)?,
    };
    let value = g.value(loss).item()? as f64;
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params);
    adam.step(&mut model.params);
    model.step += 1;
    Ok(value)
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Mini-batch training with per-epoch validation and early stopping; the
/// best-validation weights are restored at the end.
pub fn train_samples(
    model: &mut ModelState,
    train: &[&Sample],
    validation: &[&Sample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.len() < 2 {
        bail!(
            Argument,
            "training needs at least 2 samples, got {}",
            train.len()
        );
    }
    if validation.is_empty() {
        bail!(Argument, "training needs a validation split");
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut epochs = Vec::new();
    let mut best: Option<(f64, ModelState)> = None;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng::stream(config.seed, "epoch", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < 2 {
                // A single leftover sample cannot be batch-normalized.
                continue;
            }
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            total +=
                train_step(model, &mut adam, &batch).map_err(|e| with_context(e, epoch, bi))?;
            batches += 1;
        }
        let val_loss = evaluate_loss(model, validation)?;
        if !val_loss.is_finite() {
            bail!(Numeric, "epoch {epoch}: validation loss is not finite");
        }
        epochs.push(EpochStats {
            train_loss: total / batches as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let steps = model.step;
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(TrainReport {
        net: model.spec.kind.to_string(),
        epochs,
        best_epoch,
        steps,
        test: None,
    })
}

/// Trains on the train/validation splits of `data` and scores the test split.
pub fn train(model: &mut ModelState, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    if data.merged && model.spec.kind != NetKind::Ann1R {
        bail!(
            Mismatch,
            "merged data only trains a single-plane reconstructor"
        );
    }
    let tr = data.split(Split::Train);
    let va = data.split(Split::Validation);
    let te = data.split(Split::Test);
    let mut report = train_samples(model, &tr, &va, config)?;
    if !te.is_empty() {
        report.test = Some(evaluate(model, &te)?);
    }
    Ok(report)
}

/// Held-out metrics: SSIM/MAE for reconstructors, accuracy for the classifier.
pub fn evaluate(model: &ModelState, samples: &[&Sample]) -> Result<TestMetrics> {
    if samples.is_empty() {
        bail!(Argument, "no samples to evaluate");
    }
    let mut ssims = Vec::new();
    let mut maes = Vec::new();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let (mut on, mut off) = (0.0, 0.0);
    let start = Instant::now();
    for s in samples {
        check_sample(&model.spec, s)?;
        match model.spec.kind {
            NetKind::Ann1R => {
                let out = model.infer_reconstruct(&s.ccm)?;
                ssims.push(ssim(&out, &s.reference)?);
                maes.push(mae(&out, &s.reference)?);
            }
            NetKind::Ann2 => {
                let out = model.infer_reconstruct(&s.ccm)?;
                let z = s.layer()?;
                for p in 0..3 {
                    let img = plane(&out, p)?;
                    if p == z - 1 {
                        on += img.mean() as f64;
                        ssims.push(ssim(&img, &s.reference)?);
                        maes.push(mae(&img, &s.reference)?);
                    } else {
                        off += img.mean() as f64 / 2.0;
                    }
                }
            }
            NetKind::Ann1C => {
                let (layer, probs) = model.infer_classify(&s.ccm)?;
                debug_assert_eq!(layer, argmax(&probs) + 1);
                preds.push(layer);
                labels.push(s.layer()?);
            }
        }
    }
    let seconds_per_image = start.elapsed().as_secs_f64() / samples.len() as f64;
    let mut report = MetricReport::from_samples(ssims, maes);
    if model.spec.kind == NetKind::Ann1C {
        report.n_samples = preds.len();
        report.accuracy = Some(accuracy(&preds, &labels)?);
    }
    Ok(TestMetrics {
        report,
        off_target_ratio: (model.spec.kind == NetKind::Ann2)
            .then(|| off / on.max(f64::MIN_POSITIVE)),
        seconds_per_image,
    })
}

/// Trains a fresh single-plane reconstructor on merged multi-layer data.
pub fn retrain_star(
    merged: &Dataset,
    spec: &NetworkSpec,
    config: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    if !merged.merged {
        bail!(Argument, "retraining expects a merged dataset");
    }
    let mut model = build_ann1_r(spec, config.seed)?;
    let mut report = train(&mut model, merged, config)?;
    report.net = "ann1_r_star".to_string();
    Ok((model, report))
}
