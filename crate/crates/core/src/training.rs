//! Losses, Adam, the plateau schedule and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::{ForwardOutput, SegNetwork};
use crate::synthetic::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub improvement_threshold: f64,
    pub dice_eps: f64,
    /// Probability of dropping each modality per step; 0 disables the augmentation.
    pub modality_dropout: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            max_epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_factor: 0.5,
            patience: 10,
            improvement_threshold: 1e-6,
            dice_eps: 1e-5,
            modality_dropout: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::arg("training config", m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0,1), got {b}"));
            }
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return fail(format!("lr_factor must lie in (0,1), got {}", self.lr_factor));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.adam_eps > 0.0 && self.dice_eps > 0.0) {
            return fail("adam_eps and dice_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.modality_dropout) {
            return fail(format!("modality_dropout must lie in [0,1), got {}", self.modality_dropout));
        }
        Ok(())
    }
}

fn check_binary<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    match labels.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::NonBinary { what: "labels", value: v.f64() as f32 }),
        None => Ok(()),
    }
}

/// Mean over region channels of `1 - (2 sum(p y) + eps) / (sum p + sum y + eps)`.
pub fn soft_dice_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &Tensor<T>, eps: f64) -> Result<Var> {
    check_binary(labels)?;
    tape.soft_dice(probs, labels, eps)
}

/// Mean over modalities of the mean absolute difference `|F_i - f_i|`.
pub fn correlation_l1_loss<T: Scalar>(tape: &mut Tape<T>, recovered: &[Var; 4], encoded: &[Var; 4]) -> Result<Var> {
    let terms = recovered
        .iter()
        .zip(encoded)
        .map(|(&r, &e)| tape.mean_abs_diff(r, e))
        .collect::<Result<Vec<_>>>()?;
    tape.average(&terms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: f64,
    pub l1: f64,
}

/// Dice on the final probabilities plus, with the correlation block, the
/// latent consistency term. Returns the scalar to differentiate.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    labels: &Tensor<T>,
    dice_eps: f64,
) -> Result<(Var, LossBreakdown)> {
    let dice = soft_dice_loss(tape, out.probs, labels, dice_eps)?;
    let (total, l1) = match &out.cr_features {
        Some(cr) => {
            let l1 = correlation_l1_loss(tape, cr, &out.encoder_features)?;
            (tape.add(dice, l1)?, tape.value(l1).item().f64())
        }
        None => (dice, 0.0),
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).item().f64(),
        dice: tape.value(dice).item().f64(),
        l1,
    };
    Ok((total, breakdown))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect::<Vec<_>>();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn from_config(store: &ParamStore, config: &TrainingConfig) -> Self {
        Self::new(store, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    }

    pub fn first_moment(&self, index: usize) -> &[f32] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f32] {
        &self.v[index]
    }
}

/// One bias-corrected Adam update from the gradients stored on `store`.
/// Parameters without a gradient are treated as having a zero gradient.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(state: &mut OptimizerState, store: &mut ParamStore) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::arg("adam_step", "optimizer state does not match parameter store"));
    }
    for (_, p) in store.iter() {
        if let Some(g) = &p.tensor.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.tensor.grad.take() else { continue };
        for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let mi = b1 * *m as f64 + (1.0 - b1) * g;
            let vi = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mi as f32;
            *v = vi as f32;
            let update = state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            *w = (*w as f64 - update) as f32;
        }
        p.tensor.grad = Some(g);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub best_loss: f64,
    pub epochs_since_improve: usize,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub max_epochs: usize,
}

impl ScheduleState {
    pub fn new(factor: f64, patience: usize, threshold: f64, max_epochs: usize) -> Self {
        Self {
            best_loss: f64::INFINITY,
            epochs_since_improve: 0,
            factor,
            patience,
            threshold,
            max_epochs,
        }
    }

    pub fn from_config(config: &TrainingConfig) -> Self {
        Self::new(config.lr_factor, config.patience, config.improvement_threshold, config.max_epochs)
    }
}

impl Default for ScheduleState {
    fn default() -> Self {
        Self::from_config(&TrainingConfig::default())
    }
}

/// Reduce-on-plateau. Returns `true` when the learning rate was reduced.
pub fn lr_update(schedule: &mut ScheduleState, state: &mut OptimizerState, epoch_loss: f64) -> bool {
    if epoch_loss < schedule.best_loss - schedule.threshold {
        schedule.best_loss = epoch_loss;
        schedule.epochs_since_improve = 0;
        return false;
    }
    schedule.epochs_since_improve += 1;
    if schedule.epochs_since_improve >= schedule.patience {
        state.lr *= schedule.factor;
        schedule.epochs_since_improve = 0;
        return true;
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub dice: f64,
    pub l1: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,dice,l1,lr\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.epoch, r.total, r.dice, r.l1, r.lr).expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Seed of the shuffling and dropout stream.
    pub seed: u64,
    /// Where to keep the checkpoint of the lowest-loss epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Present-modality mask with each modality dropped with probability `p`,
/// keeping at least one.
fn dropout_mask(rng: &mut impl Rng, p: f64) -> [bool; 4] {
    if p == 0.0 {
        return [true; 4];
    }
    let mut mask = [(); 4].map(|_| !rng.gen_bool(p));
    if !mask.iter().any(|&m| m) {
        mask[rng.gen_range(0..4)] = true;
    }
    mask
}

/// One optimizer step on one sample.
pub fn train_step(
    net: &mut SegNetwork,
    opt: &mut OptimizerState,
    sample: &Sample,
    present: [bool; 4],
    dice_eps: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::<f32>::new();
    let out = net.forward_missing(&mut tape, &sample.volumes, present)?;
    let (loss, breakdown) = total_loss(&mut tape, &out, &sample.labels, dice_eps)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, sample: sample.meta.index });
    }
    tape.backward(loss)?;
    let store = net.params_mut();
    store.zero_grads();
    store.accumulate_grads(&tape);
    adam_step(opt, store)?;
    Ok(breakdown)
}

pub fn train(net: &mut SegNetwork, data: &[Sample], config: &TrainingConfig, options: &TrainOptions) -> Result<TrainingLog> {
    train_with(net, data, config, options, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    net: &mut SegNetwork,
    data: &[Sample],
    config: &TrainingConfig,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    config.validate()?;
    let mut opt = OptimizerState::from_config(net.params(), config);
    let mut schedule = ScheduleState::from_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog::default();
    let mut best = f64::INFINITY;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr;
        let mut sum = LossBreakdown::default();
        for &i in &order {
            let present = dropout_mask(&mut rng, config.modality_dropout);
            let b = train_step(net, &mut opt, &data[i], present, config.dice_eps).map_err(|e| match e {
                Error::NonFiniteLoss { sample, .. } => Error::NonFiniteLoss { epoch, sample },
                e => e,
            })?;
            sum.total += b.total;
            sum.dice += b.dice;
            sum.l1 += b.l1;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            total: sum.total / n,
            dice: sum.dice / n,
            l1: sum.l1 / n,
            lr,
        };
        lr_update(&mut schedule, &mut opt, record.total);
        if record.total < best {
            best = record.total;
            log.best_epoch = Some(epoch);
            if let Some(dir) = &options.checkpoint_dir {
                net.save(dir, epoch)?;
            }
        }
        log.records.push(record);
        on_epoch(&record);
    }
    Ok(log)
}
