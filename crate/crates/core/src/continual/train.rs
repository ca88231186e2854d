use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, ContinualModel, HeadInit, MomentMode, NormMode, Stage};
use crate::datagen::TaskDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, Linear, DEFAULT_MOMENTUM, DEFAULT_STAB_EPS};
use crate::tensor::{Precision, Tensor};

/// Task id reserved for the temporary pretext head.
pub const PRETEXT_TASK: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// All parameters from the first epoch, randomly initialized head.
    PlainFt,
    /// Head only, then head and normalization affine, then everything.
    Hierarchical,
    /// Head only on frozen eval-mode features.
    LinearProbeOnly,
    /// A fresh copy of the initial model per task, trained as `PlainFt`.
    Stl,
}

impl ScheduleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::PlainFt => "plain",
            ScheduleMode::Hierarchical => "hierarchical",
            ScheduleMode::LinearProbeOnly => "lp",
            ScheduleMode::Stl => "stl",
        }
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "plain_ft" => Ok(ScheduleMode::PlainFt),
            "hierarchical" => Ok(ScheduleMode::Hierarchical),
            "lp" | "linear_probe_only" => Ok(ScheduleMode::LinearProbeOnly),
            "stl" => Ok(ScheduleMode::Stl),
            other => Err(Error::Config(format!("unknown schedule {other:?} (plain, hierarchical, lp, stl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub total_epochs: usize,
    /// Epoch fractions of the head-only, head-and-norm and full stages.
    pub fractions: [f64; 3],
    pub mode: ScheduleMode,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule { total_epochs: 10, fractions: [0.2, 0.3, 0.5], mode: ScheduleMode::Hierarchical }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        if self.fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Config(format!("stage fractions {:?} must be nonnegative", self.fractions)));
        }
        if (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("stage fractions {:?} must sum to 1", self.fractions)));
        }
        Ok(())
    }

    /// Epochs per stage. The first two stages are floored; the remainder
    /// goes to the full stage.
    pub fn stage_epochs(&self) -> [usize; 3] {
        let total = self.total_epochs;
        match self.mode {
            ScheduleMode::PlainFt | ScheduleMode::Stl => [0, 0, total],
            ScheduleMode::LinearProbeOnly => [total, 0, 0],
            ScheduleMode::Hierarchical => {
                let floor = |f: f64| ((total as f64 * f + 1e-9).floor() as usize).min(total);
                let first = floor(self.fractions[0]);
                let second = floor(self.fractions[1]).min(total - first);
                [first, second, total - first - second]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub norm_mode: NormMode,
    pub schedule: StageSchedule,
    pub momentum: f64,
    pub stab_eps: f64,
    pub eval_moments: MomentMode,
    /// Scale of the uniform head initialization used by plain fine-tuning;
    /// the default `sqrt(6)` is He-uniform.
    pub head_init_scale: f64,
    /// Epochs of pretext pretraining; 0 starts the sequence from random weights.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 32,
            seed: 0,
            precision: Precision::F64,
            norm_mode: NormMode::XconvBn,
            schedule: StageSchedule::default(),
            momentum: DEFAULT_MOMENTUM,
            stab_eps: DEFAULT_STAB_EPS,
            eval_moments: MomentMode::Running,
            head_init_scale: 6f64.sqrt(),
            pretrain_epochs: 10,
            pretrain_lr: 0.05,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("pretrain_lr", self.pretrain_lr)?;
        positive("stab_eps", self.stab_eps)?;
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!("momentum {} outside (0, 1]", self.momentum)));
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale >= 0.0) {
            return Err(Error::Config("head_init_scale must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.architecture.spatial_sizes()?;
        Ok(())
    }

    fn head_init(&self) -> HeadInit {
        match self.schedule.mode {
            ScheduleMode::PlainFt | ScheduleMode::Stl => HeadInit::Uniform(self.head_init_scale),
            ScheduleMode::Hierarchical | ScheduleMode::LinearProbeOnly => HeadInit::Zeros,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: Stage,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub task: usize,
    pub stage_epochs: [usize; 3],
    pub epochs: Vec<EpochLoss>,
}

fn prepared_inputs(x: &Tensor, precision: Precision) -> Tensor {
    let mut x = x.clone();
    x.round_to(precision);
    x
}

fn batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One epoch of minibatch SGD on `stage`'s parameters; returns the mean loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut ContinualModel,
    task: usize,
    x: &Tensor,
    y: &[usize],
    stage: Stage,
    lr: f64,
    batch_size: usize,
    precision: Precision,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in batches(y.len(), batch_size, rng) {
        let xb = x.gather_rows(&idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let (logits, trace) = model.forward_train(task, &xb)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &yb)?;
        let grads = model.backward(task, &trace, &grad, stage)?;
        model.apply(task, &grads, lr, precision)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / y.len() as f64)
}

/// Linear probing on fixed features: only `head` moves.
fn probe_epoch(
    head: &mut Linear,
    features: &Tensor,
    y: &[usize],
    lr: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in batches(y.len(), batch_size, rng) {
        let fb = features.gather_rows(&idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let (loss, grad) = softmax_cross_entropy(&head.forward(&fb)?, &yb)?;
        head.sgd_step(&head.backward(&fb, &grad)?, lr)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / y.len() as f64)
}

/// Learns a new task: creates its head (and records), runs the schedule's
/// stages, then freezes the task and refreshes recovered means.
pub fn train_task(
    model: &mut ContinualModel,
    data: &TaskDataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainLog> {
    if data.train.is_empty() {
        return Err(Error::Data(format!("task {} has no training data", data.id)));
    }
    let task = data.id;
    model.add_task(task, data.classes, cfg.head_init(), rng)?;
    let x = prepared_inputs(&data.train.x, cfg.precision);
    let y = &data.train.y;
    let stage_epochs = cfg.schedule.stage_epochs();
    let mut epochs = Vec::with_capacity(cfg.schedule.total_epochs);
    if cfg.schedule.mode == ScheduleMode::LinearProbeOnly {
        model.recover_all()?;
        let features = model.features_eval(task, &x, MomentMode::Running)?;
        let mut head = model.head(task)?.clone();
        for _ in 0..stage_epochs[0] {
            let loss = probe_epoch(&mut head, &features, y, cfg.lr, cfg.batch_size, rng)?;
            epochs.push(EpochLoss { stage: Stage::HeadOnly, loss });
        }
        head.weight.round_to(cfg.precision);
        head.bias.round_to(cfg.precision);
        model.heads.insert(task, head);
    } else {
        for (stage, &count) in [Stage::HeadOnly, Stage::HeadAndNorm, Stage::All].into_iter().zip(&stage_epochs) {
            for _ in 0..count {
                let loss = run_epoch(model, task, &x, y, stage, cfg.lr, cfg.batch_size, cfg.precision, rng)?;
                epochs.push(EpochLoss { stage, loss });
            }
        }
    }
    model.freeze_task(task)?;
    model.recover_all()?;
    Ok(TrainLog { task, stage_epochs, epochs })
}

/// Trains the whole network on the pretext task through the shared
/// normalization state, then drops the pretext head. The shared state then
/// serves as the template for per-task records.
pub fn pretrain(
    model: &mut ContinualModel,
    pretext: &TaskDataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mode = model.mode;
    model.mode = NormMode::SharedBn;
    let result = (|| {
        model.add_task(PRETEXT_TASK, pretext.classes, HeadInit::Uniform(cfg.head_init_scale), rng)?;
        let x = prepared_inputs(&pretext.train.x, cfg.precision);
        (0..cfg.pretrain_epochs)
            .map(|_| {
                run_epoch(
                    model,
                    PRETEXT_TASK,
                    &x,
                    &pretext.train.y,
                    Stage::All,
                    cfg.pretrain_lr,
                    cfg.batch_size,
                    cfg.precision,
                    rng,
                )
            })
            .collect::<Result<Vec<f64>>>()
    })();
    model.discard_head(PRETEXT_TASK);
    model.mode = mode;
    result
}

/// Multi-head accuracy: argmax over `task`'s own head.
pub fn evaluate(model: &ContinualModel, task: usize, x: &Tensor, y: &[usize], moments: MomentMode) -> Result<f64> {
    model.head(task)?;
    if y.is_empty() {
        return Err(Error::Data(format!("task {task} has an empty test set")));
    }
    let pred = argmax_rows(&model.forward_eval(task, x, moments)?)?;
    if pred.len() != y.len() {
        return Err(Error::Data(format!("{} inputs for {} labels", pred.len(), y.len())));
    }
    Ok(pred.iter().zip(y).filter(|(p, l)| p == l).count() as f64 / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split() {
        let s = StageSchedule { total_epochs: 10, ..StageSchedule::default() };
        assert_eq!(s.stage_epochs(), [2, 3, 5]);
    }

    #[test]
    fn degenerate_schedules() {
        let plain = StageSchedule { total_epochs: 7, mode: ScheduleMode::PlainFt, ..StageSchedule::default() };
        assert_eq!(plain.stage_epochs(), [0, 0, 7]);
        let lp = StageSchedule { total_epochs: 7, mode: ScheduleMode::LinearProbeOnly, ..StageSchedule::default() };
        assert_eq!(lp.stage_epochs(), [7, 0, 0]);
    }

    #[test]
    fn bad_fractions() {
        let s = StageSchedule { fractions: [0.5, 0.5, 0.5], ..StageSchedule::default() };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "nope": true}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.1, "norm_mode": "task_bn"}"#).unwrap();
        assert_eq!(cfg.norm_mode, NormMode::TaskBn);
    }
}
