//! Adam optimizer with two learning-rate groups, exponential LR decay,
//! the deterministic epoch loop, and checkpoint/history emission.

use crate::backbone::{build_backbone, forward_features, BackboneConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{flip_horizontal, Dataset};
use crate::error::{Error, Result};
use crate::loss::{training_loss, ClassWeights, LossMode, WeightScheme};
use crate::metrics::{argmax, confusion_matrix, summarize, EvalReport};
use crate::nn::{Binding, FwdCtx, LayerParams, Mode};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters whose names start with this prefix form the second optimizer
/// group, driven by `lr_classifier`.
pub const CLASSIFIER_PREFIX: &str = "classifier.";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub weights_scheme: WeightScheme,
    /// Copied onto the backbone config when the net is built, so one flag
    /// drives the ablation.
    pub cbam_on: bool,
    pub flip_prob: f64,
}

impl TrainConfig {
    /// Small-run defaults; flips are off because the synthetic classes are
    /// position-coded and mirroring would scramble their labels.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_backbone: 1e-4,
            lr_classifier: 5e-4,
            weight_decay: 1e-4,
            gamma: 0.9,
            seed: 1,
            loss_mode: LossMode::Cucn,
            weights_scheme: WeightScheme::InvFreq,
            cbam_on: true,
            flip_prob: 0.0,
        }
    }

    /// Full-scale schedule: 60 epochs at batch 256, mirror augmentation on.
    pub fn full() -> TrainConfig {
        TrainConfig {
            epochs: 60,
            batch_size: 256,
            flip_prob: 0.5,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 for batch norm".into(),
            ));
        }
        for (name, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_classifier", self.lr_classifier),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {lr}"
                )));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability must be in [0,1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

fn dd_mul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let p = a.0 * b.0;
    let e = a.0.mul_add(b.0, -p) + (a.0 * b.1 + a.1 * b.0);
    let s = p + e;
    (s, e - (s - p))
}

/// `base_lr * gamma^epoch`, computed in double-double so the result stays
/// correctly rounded over long schedules; plain `powi` drifts past 1e-15
/// relative by epoch 60.
pub fn lr_at_epoch(base_lr: f64, gamma: f64, epoch: usize) -> f64 {
    let mut result = (1.0f64, 0.0f64);
    let mut base = (gamma, 0.0f64);
    let mut n = epoch;
    while n > 0 {
        if n & 1 == 1 {
            result = dd_mul(result, base);
        }
        base = dd_mul(base, base);
        n >>= 1;
    }
    let p = base_lr * result.0;
    p + (base_lr.mul_add(result.0, -p) + base_lr * result.1)
}

pub struct OptimizerState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: IndexMap<String, Vec<f32>>,
    v: IndexMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new() -> OptimizerState {
        OptimizerState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState::new()
    }
}

/// One Adam step with bias correction over every trainable parameter.
/// Weight decay couples into the gradient (L2 style); a parameter missing
/// from `grads` is treated as having a zero gradient, so decay still
/// applies. `lr_for` maps a parameter name to its group's learning rate.
pub fn adam_step(
    params: &mut LayerParams,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr_for: impl Fn(&str) -> f64,
    weight_decay: f64,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    let eps = state.eps as f32;
    let wd = weight_decay as f32;
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        if let Some(g) = grads.get(name) {
            if !g.all_finite() {
                return Err(Error::Train(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: gradient shape {:?} vs {:?}", g.shape(), p.value.shape()),
                ));
            }
        }
        let lr = (lr_for(name) / bc1) as f32;
        let vdenom = bc2 as f32;
        let n = p.value.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let zero = [];
        let gdata: &[f32] = grads.get(name).map_or(&zero, |g| g.data());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = gdata.get(i).copied().unwrap_or(0.0) + wd * *w;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            *w -= lr * m[i] / ((v[i] / vdenom).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: f64,
    pub eval_min_class_acc: f64,
    pub eval_max_class_acc: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,eval_acc,eval_min_class_acc,eval_max_class_acc";

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch, h.lr, h.train_loss, h.eval_acc, h.eval_min_class_acc, h.eval_max_class_acc
        ));
    }
    out
}

pub struct TrainOutcome {
    pub params: LayerParams,
    pub descriptor: String,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_acc: f64,
    pub final_report: EvalReport,
    pub history_path: PathBuf,
    pub best_path: PathBuf,
    pub final_path: PathBuf,
}

fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        ranges.push((start, end));
        start = end;
    }
    // a trailing single sample cannot pass train-mode batch norm; fold it
    // into the previous batch
    if let [.., prev, last] = ranges.as_mut_slice() {
        if last.1 - last.0 == 1 {
            prev.1 = last.1;
            ranges.pop();
        }
    }
    ranges
}

fn check_class_match(ds: &Dataset, arch: &BackboneConfig, what: &str) -> Result<()> {
    if ds.num_classes() != arch.num_classes {
        return Err(Error::Data(format!(
            "{what} dataset has {} classes, model expects {}",
            ds.num_classes(),
            arch.num_classes
        )));
    }
    Ok(())
}

/// Runs the full training loop and writes `history.csv`, `best.cuck`
/// (highest eval accuracy, earlier epoch wins ties), and `final.cuck` into
/// `out_dir`. Deterministic: config, architecture, and datasets fix every
/// parameter after every step.
pub fn train(
    cfg: &TrainConfig,
    arch: &BackboneConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = BackboneConfig {
        cbam_on: cfg.cbam_on,
        ..arch.clone()
    };
    arch.validate()?;
    check_class_match(train_ds, &arch, "train")?;
    check_class_match(eval_ds, &arch, "eval")?;
    if train_ds.len() < 2 {
        return Err(Error::Train(
            "training needs at least 2 samples for batch norm".into(),
        ));
    }
    if eval_ds.is_empty() {
        return Err(Error::Train("eval dataset is empty".into()));
    }
    let weights = ClassWeights::from_counts(train_ds.class_counts(), &cfg.weights_scheme)?;

    let stream = |k: u64| {
        let mut r = ChaCha12Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let mut init_rng = stream(0);
    let mut shuffle_rng = stream(1);
    let mut augment_rng = stream(2);
    let mut pairing_rng = stream(3);

    let (mut params, descriptor) = build_backbone(&arch, &mut init_rng)?;
    let mut opt = OptimizerState::new();
    let (ch, h, w) = train_ds.image_dims();
    let per_image = ch * h * w;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, LayerParams)> = None;
    let mut last_report = None;

    for epoch in 0..cfg.epochs {
        let lr_b = lr_at_epoch(cfg.lr_backbone, cfg.gamma, epoch);
        let lr_c = lr_at_epoch(cfg.lr_classifier, cfg.gamma, epoch);

        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0f64;
        for (start, end) in batch_ranges(order.len(), cfg.batch_size) {
            let idx = &order[start..end];
            let b = idx.len();
            let mut data = Vec::with_capacity(b * per_image);
            let mut labels = Vec::with_capacity(b);
            for &i in idx {
                let at = data.len();
                data.extend_from_slice(train_ds.image(i));
                if cfg.flip_prob > 0.0 && augment_rng.gen_bool(cfg.flip_prob) {
                    flip_horizontal(&mut data[at..], ch, h, w);
                }
                labels.push(train_ds.labels()[i]);
            }
            let batch = Tensor::new(vec![b, ch, h, w], data)?;

            let mut tape = Tape::<f32>::new();
            let binding = Binding::from_params(&mut tape, &params, true);
            let mut ctx = FwdCtx::new(&mut tape, Mode::Train);
            let x = ctx.tape.leaf(batch, false);
            let step = (|| -> Result<_> {
                let bundle = forward_features(&mut ctx, &binding, &arch, x)?;
                training_loss(
                    &mut ctx,
                    &binding,
                    &bundle,
                    &labels,
                    &weights,
                    cfg.loss_mode,
                    &mut pairing_rng,
                )
            })();
            let bn_updates = std::mem::take(&mut ctx.bn_updates);
            let tl = step.map_err(|e| {
                Error::Train(format!("epoch {epoch}, samples {start}..{end}: {e}"))
            })?;
            loss_sum += f64::from(tape.value(tl.loss).item()) * b as f64;
            tape.backward(tl.loss)?;

            let mut grads: IndexMap<String, Tensor<f32>> = IndexMap::new();
            for (name, p) in params.iter() {
                if p.trainable {
                    if let Some(g) = tape.grad(binding.var(name)?) {
                        grads.insert(name.to_string(), g.clone());
                    }
                }
            }
            adam_step(
                &mut params,
                &grads,
                &mut opt,
                |name| {
                    if name.starts_with(CLASSIFIER_PREFIX) {
                        lr_c
                    } else {
                        lr_b
                    }
                },
                cfg.weight_decay,
            )
            .map_err(|e| Error::Train(format!("epoch {epoch}, samples {start}..{end}: {e}")))?;
            params.apply_bn_updates(&bn_updates)?;
        }

        let report = evaluate_params(&params, &arch, eval_ds, cfg.batch_size)?;
        history.push(EpochStats {
            epoch,
            lr: lr_b,
            train_loss: loss_sum / order.len() as f64,
            eval_acc: report.overall_acc,
            eval_min_class_acc: report.min_class_acc,
            eval_max_class_acc: report.max_class_acc,
        });
        if best
            .as_ref()
            .map_or(true, |(_, acc, _)| report.overall_acc > *acc)
        {
            best = Some((epoch, report.overall_acc, params.clone()));
        }
        last_report = Some(report);
    }

    fs::create_dir_all(out_dir)?;
    let history_path = out_dir.join("history.csv");
    fs::write(&history_path, history_csv(&history))?;
    let (best_epoch, best_acc, best_params) = best.unwrap();
    let best_path = out_dir.join("best.cuck");
    save_checkpoint(&best_path, &best_params, &descriptor)?;
    let final_path = out_dir.join("final.cuck");
    save_checkpoint(&final_path, &params, &descriptor)?;

    Ok(TrainOutcome {
        params,
        descriptor,
        history,
        best_epoch,
        best_acc,
        final_report: last_report.unwrap(),
        history_path,
        best_path,
        final_path,
    })
}

/// Batch-norm in eval mode, no augmentation, deterministic.
pub fn evaluate_params(
    params: &LayerParams,
    arch: &BackboneConfig,
    ds: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    check_class_match(ds, arch, "eval")?;
    if ds.is_empty() {
        return Err(Error::Data("eval dataset is empty".into()));
    }
    let (ch, h, w) = ds.image_dims();
    let per_image = ch * h * w;
    let classes = arch.num_classes;
    let mut preds = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch_size.max(1)).min(ds.len());
        let b = end - start;
        let data = ds.images().data()[start * per_image..end * per_image].to_vec();
        let batch = Tensor::new(vec![b, ch, h, w], data)?;
        let mut tape = Tape::<f32>::new();
        let binding = Binding::from_params(&mut tape, params, false);
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let x = ctx.tape.leaf(batch, false);
        let bundle = forward_features(&mut ctx, &binding, arch, x)?;
        let logits = crate::backbone::classify(&mut ctx, &binding, bundle.features)?;
        let out = tape.value(logits);
        for row in 0..b {
            preds.push(argmax(&out.data()[row * classes..(row + 1) * classes]));
        }
        start = end;
    }
    summarize(&confusion_matrix(&preds, ds.labels(), classes)?)
}

/// Loads a checkpoint and evaluates it; the architecture comes from the
/// stored descriptor.
pub fn evaluate_checkpoint(path: &Path, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let (params, arch, _) = load_checkpoint(path)?;
    evaluate_params(&params, &arch, ds, batch_size)
}
