use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, sgd, BatchNormState, BnCache, Conv2d, Linear, LinearGrads, XconvBnBank, XconvRecord,
};
use crate::tensor::{channel_moments, ConvGrads, ConvSpec, Precision, Tensor};

/// Which normalization statistics the feature stack keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One batch-norm state shared by all tasks.
    SharedBn,
    /// A classic batch-norm state per task.
    TaskBn,
    /// A per-task state whose mean is recovered from pre-convolution means.
    XconvBn,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::SharedBn => "shared",
            NormMode::TaskBn => "task",
            NormMode::XconvBn => "xconv",
        }
    }

    pub fn per_task(self) -> bool {
        self != NormMode::SharedBn
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" | "shared_bn" => Ok(NormMode::SharedBn),
            "task" | "task_bn" => Ok(NormMode::TaskBn),
            "xconv" | "xconv_bn" => Ok(NormMode::XconvBn),
            other => Err(Error::Config(format!("unknown norm mode {other:?} (shared, task, xconv)"))),
        }
    }
}

/// Moments used at evaluation time. Transductive variants substitute the
/// exact moments of the evaluated data for the stored ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    Running,
    TMean,
    TVar,
    TBoth,
}

impl MomentMode {
    fn true_mean(self) -> bool {
        matches!(self, MomentMode::TMean | MomentMode::TBoth)
    }

    fn true_var(self) -> bool {
        matches!(self, MomentMode::TVar | MomentMode::TBoth)
    }
}

impl FromStr for MomentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(MomentMode::Running),
            "t-mean" | "t_mean" => Ok(MomentMode::TMean),
            "t-var" | "t_var" => Ok(MomentMode::TVar),
            "t-both" | "t_both" => Ok(MomentMode::TBoth),
            other => Err(Error::Config(format!("unknown moment mode {other:?} (running, t-mean, t-var, t-both)"))),
        }
    }
}

/// Input geometry plus one conv spec per `Conv -> Norm -> ReLU` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
}

impl Default for Architecture {
    /// Two exact-recovery blocks around a stride-2 downsampling block.
    fn default() -> Self {
        Architecture {
            input: [1, 16, 16],
            convs: vec![ConvSpec::new(6, 1, 3, 1, 2), ConvSpec::new(6, 6, 2, 2, 0), ConvSpec::new(8, 6, 3, 1, 2)],
        }
    }
}

impl Architecture {
    /// Spatial size of every block input followed by the output.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        if self.convs.is_empty() {
            return Err(Error::Config("architecture needs at least one conv block".into()));
        }
        let [c, mut h, mut w] = self.input;
        let mut channels = c;
        let mut sizes = vec![(h, w)];
        for (l, spec) in self.convs.iter().enumerate() {
            spec.validate()?;
            if spec.in_channels != channels {
                return Err(Error::Config(format!(
                    "block {l} expects {} input channels, previous block yields {channels}",
                    spec.in_channels
                )));
            }
            (h, w) = spec.output_hw(h, w)?;
            channels = spec.out_channels;
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let (h, w) = *self.spatial_sizes()?.last().expect("nonempty");
        Ok(self.convs.last().expect("nonempty").out_channels * h * w)
    }
}

/// Normalization after one conv: the shared state (also the template for new
/// task records) and the per-task bank.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub shared: XconvRecord,
    pub bank: XconvBnBank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub conv: Conv2d,
    pub norm: NormLayer,
}

/// How a new head is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadInit {
    Zeros,
    /// Uniform in `±scale / sqrt(fan_in)`.
    Uniform(f64),
}

/// Parameters trained in a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    HeadOnly,
    HeadAndNorm,
    All,
}

/// Saved activations of a train-mode forward.
pub struct Trace {
    inputs: Vec<Tensor>,
    caches: Vec<BnCache>,
    normalized: Vec<Tensor>,
    features: Tensor,
}

impl Trace {
    /// Per block, the normalized pre-activation fed to the rectifier.
    pub fn normalized(&self) -> &[Tensor] {
        &self.normalized
    }

    /// Flattened last-block activations fed to the head.
    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

pub struct Gradients {
    pub head: LinearGrads,
    pub norms: Vec<Option<(Tensor, Tensor)>>,
    pub convs: Vec<Option<ConvGrads>>,
}

/// Shared feature stack, per-task heads and per-task normalization banks.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualModel {
    pub arch: Architecture,
    pub mode: NormMode,
    pub blocks: Vec<Block>,
    pub heads: BTreeMap<usize, Linear>,
    pub frozen_heads: BTreeSet<usize>,
}

impl ContinualModel {
    pub fn new(arch: Architecture, mode: NormMode, momentum: f64, stab_eps: f64, rng: &mut impl Rng) -> Result<Self> {
        let sizes = arch.spatial_sizes()?;
        let mut blocks = Vec::with_capacity(arch.convs.len());
        for (l, spec) in arch.convs.iter().enumerate() {
            let conv = Conv2d::init(*spec, rng)?;
            let bn = BatchNormState::new(spec.out_channels, momentum, stab_eps)?;
            let mut shared = XconvRecord::new(bn, spec.in_channels, spec.stride)?;
            shared.input_spatial = Some(sizes[l]);
            blocks.push(Block { conv, norm: NormLayer { shared, bank: XconvBnBank::new() } });
        }
        Ok(ContinualModel { arch, mode, blocks, heads: BTreeMap::new(), frozen_heads: BTreeSet::new() })
    }

    /// Tasks with a head, in training order.
    pub fn tasks(&self) -> Vec<usize> {
        self.heads.keys().copied().collect()
    }

    /// Creates the head for `task` and, in per-task modes, its normalization
    /// records, cloned from the most recent task (or the shared template for
    /// the first one).
    pub fn add_task(&mut self, task: usize, classes: usize, init: HeadInit, rng: &mut impl Rng) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::DuplicateTask(task));
        }
        if classes < 2 {
            return Err(Error::Data(format!("task {task} has {classes} classes; at least 2 are needed")));
        }
        if self.mode.per_task() {
            for block in &mut self.blocks {
                let template = block.norm.bank.latest().map_or(&block.norm.shared, |(_, r)| r).clone();
                block.norm.bank.insert(task, template)?;
            }
        }
        let dim = self.arch.feature_dim()?;
        let head = match init {
            HeadInit::Zeros => Linear::zeros(dim, classes),
            HeadInit::Uniform(scale) => Linear::uniform(dim, classes, scale, rng),
        };
        self.heads.insert(task, head);
        Ok(())
    }

    /// Ends training of `task`: its head and records become immutable.
    pub fn freeze_task(&mut self, task: usize) -> Result<()> {
        self.head(task)?;
        if self.mode.per_task() {
            for block in &mut self.blocks {
                block.norm.bank.freeze(task)?;
            }
        }
        self.frozen_heads.insert(task);
        Ok(())
    }

    /// Removes an unfrozen task entirely (used for temporary pretext heads).
    pub(crate) fn discard_head(&mut self, task: usize) {
        if !self.frozen_heads.contains(&task) {
            self.heads.remove(&task);
        }
    }

    pub fn head(&self, task: usize) -> Result<&Linear> {
        self.heads.get(&task).ok_or(Error::MissingBank(task))
    }

    pub fn record(&self, layer: usize, task: usize) -> Result<&XconvRecord> {
        let norm = &self.blocks.get(layer).ok_or_else(|| Error::Shape(format!("no layer {layer}")))?.norm;
        if self.mode.per_task() {
            norm.bank.get(task)
        } else {
            Ok(&norm.shared)
        }
    }

    pub fn record_mut(&mut self, layer: usize, task: usize) -> Result<&mut XconvRecord> {
        let per_task = self.mode.per_task();
        let norm = &mut self.blocks.get_mut(layer).ok_or_else(|| Error::Shape(format!("no layer {layer}")))?.norm;
        if per_task {
            norm.bank.get_mut(task)
        } else {
            Ok(&mut norm.shared)
        }
    }

    /// Rebuilds the recovered means of every record against the current
    /// weights; a no-op outside xconv mode.
    pub fn recover_all(&mut self) -> Result<()> {
        if self.mode == NormMode::XconvBn {
            for block in &mut self.blocks {
                block.norm.bank.recover_all(&block.conv)?;
            }
        }
        Ok(())
    }

    /// The mean layer `layer` normalizes `task`'s data with at test time.
    pub fn stored_mean(&self, layer: usize, task: usize) -> Result<Vec<f64>> {
        let block = self.blocks.get(layer).ok_or_else(|| Error::Diagnostic(format!("no layer {layer}")))?;
        match self.mode {
            NormMode::XconvBn => Ok(block.norm.bank.recovered_mean(task, &block.conv)?.data().to_vec()),
            _ => Ok(self.record(layer, task)?.bn.running_mean.data().to_vec()),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.arch.input {
            return Err(Error::Shape(format!(
                "input {:?} does not match architecture {:?}",
                x.shape(),
                self.arch.input
            )));
        }
        Ok(())
    }

    fn flatten(a: Tensor) -> Result<Tensor> {
        let n = a.shape()[0];
        let d = a.len() / n;
        a.reshape(vec![n, d])
    }

    /// Train-mode forward: batch statistics, running statistics (and
    /// pre-convolution means) of `task`'s records updated.
    pub fn forward_train(&mut self, task: usize, x: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        self.head(task)?;
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut normalized = Vec::with_capacity(self.blocks.len());
        let mut a = x.clone();
        for l in 0..self.blocks.len() {
            let z = self.blocks[l].conv.forward(&a)?;
            let record = self.record_mut(l, task)?;
            record.update_pre_means(&a)?;
            let (out, cache) = record.bn.forward_train(&z)?;
            inputs.push(a);
            caches.push(cache);
            a = relu(&out);
            normalized.push(out);
        }
        let features = Self::flatten(a)?;
        let logits = self.head(task)?.forward(&features)?;
        Ok((logits, Trace { inputs, caches, normalized, features }))
    }

    /// Gradients of the parameters trained in `stage`, given the gradient of
    /// the loss with respect to the logits.
    pub fn backward(&self, task: usize, trace: &Trace, grad_logits: &Tensor, stage: Stage) -> Result<Gradients> {
        let head = self.head(task)?.backward(&trace.features, grad_logits)?;
        let n = self.blocks.len();
        let mut norms = vec![None; n];
        let mut convs = vec![None; n];
        if stage != Stage::HeadOnly {
            let last_shape = trace.normalized[n - 1].shape().to_vec();
            let mut grad = head.input.clone().reshape(last_shape)?;
            for l in (0..n).rev() {
                let g = relu_backward(&trace.normalized[l], &grad)?;
                let bn = self.record(l, task)?.bn.backward(&trace.caches[l], &g)?;
                norms[l] = Some((bn.gamma, bn.beta));
                if l == 0 && stage != Stage::All {
                    break;
                }
                let cg = self.blocks[l].conv.backward(&trace.inputs[l], &bn.input, l > 0, stage == Stage::All)?;
                if let Some(gi) = &cg.input {
                    grad = gi.clone();
                }
                convs[l] = Some(cg);
            }
        }
        if stage != Stage::All {
            convs.iter_mut().for_each(|c| *c = None);
        }
        Ok(Gradients { head, norms, convs })
    }

    /// Plain SGD on the parameters present in `grads`.
    pub fn apply(&mut self, task: usize, grads: &Gradients, lr: f64, precision: Precision) -> Result<()> {
        if self.frozen_heads.contains(&task) {
            return Err(Error::BankFrozen(task));
        }
        let head = self.heads.get_mut(&task).ok_or(Error::MissingBank(task))?;
        head.sgd_step(&grads.head, lr)?;
        head.weight.round_to(precision);
        head.bias.round_to(precision);
        for l in 0..self.blocks.len() {
            if let Some((gg, gb)) = &grads.norms[l] {
                let bn = &mut self.record_mut(l, task)?.bn;
                sgd(&mut bn.gamma, gg, lr)?;
                sgd(&mut bn.beta, gb, lr)?;
                bn.gamma.round_to(precision);
                bn.beta.round_to(precision);
            }
            if let Some(cg) = &grads.convs[l] {
                let conv = &mut self.blocks[l].conv;
                conv.sgd_step(cg, lr)?;
                conv.weight.round_to(precision);
                if let Some(b) = conv.bias.as_mut() {
                    b.round_to(precision);
                }
            }
        }
        Ok(())
    }

    /// Eval-mode features of `task` (flattened last-block output).
    pub fn features_eval(&self, task: usize, x: &Tensor, moments: MomentMode) -> Result<Tensor> {
        let mut a = x.clone();
        self.check_input(x)?;
        for l in 0..self.blocks.len() {
            let z = self.blocks[l].conv.forward(&a)?;
            a = relu(&self.normalize_eval(l, task, &z, moments)?);
        }
        Self::flatten(a)
    }

    fn normalize_eval(&self, layer: usize, task: usize, z: &Tensor, moments: MomentMode) -> Result<Tensor> {
        let record = self.record(layer, task)?;
        let stored = self.stored_mean(layer, task)?;
        let (true_mean, true_var) =
            if moments == MomentMode::Running { (Vec::new(), Vec::new()) } else { channel_moments(z)? };
        let mean = if moments.true_mean() { &true_mean } else { &stored };
        let var = if moments.true_var() { &true_var[..] } else { record.bn.running_var.data() };
        record.bn.normalize_with(z, mean, var)
    }

    /// Eval-mode logits of `task`'s own head.
    pub fn forward_eval(&self, task: usize, x: &Tensor, moments: MomentMode) -> Result<Tensor> {
        let features = self.features_eval(task, x, moments)?;
        self.head(task)?.forward(&features)
    }

    /// Exact post-convolution channel moments of every layer for data `x`,
    /// with the network in eval mode under `moments`.
    pub fn post_conv_moments(&self, task: usize, x: &Tensor, moments: MomentMode) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.check_input(x)?;
        let mut a = x.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let z = self.blocks[l].conv.forward(&a)?;
            out.push(channel_moments(&z)?);
            a = relu(&self.normalize_eval(l, task, &z, moments)?);
        }
        Ok(out)
    }

    /// Rounds every parameter and statistic to `precision`.
    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F64 {
            return;
        }
        for block in &mut self.blocks {
            block.conv.weight.round_to(precision);
            if let Some(b) = block.conv.bias.as_mut() {
                b.round_to(precision);
            }
            let bn = &mut block.norm.shared.bn;
            for t in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
                t.round_to(precision);
            }
        }
        for head in self.heads.values_mut() {
            head.weight.round_to(precision);
            head.bias.round_to(precision);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: NormMode) -> (ContinualModel, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch =
            Architecture { input: [1, 4, 4], convs: vec![ConvSpec::new(2, 1, 3, 1, 2), ConvSpec::new(2, 2, 2, 2, 0)] };
        (ContinualModel::new(arch, mode, 0.1, 1e-5, &mut rng).unwrap(), rng)
    }

    fn batch(rng: &mut impl Rng) -> Tensor {
        Tensor::new(vec![3, 1, 4, 4], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn architecture_chain() {
        let arch = Architecture::default();
        assert_eq!(arch.spatial_sizes().unwrap(), vec![(16, 16), (18, 18), (9, 9), (11, 11)]);
        assert_eq!(arch.feature_dim().unwrap(), 8 * 121);
        let bad = Architecture { input: [2, 16, 16], ..Architecture::default() };
        assert!(matches!(bad.spatial_sizes(), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_task_rejected() {
        let (mut m, mut rng) = tiny(NormMode::XconvBn);
        m.add_task(0, 2, HeadInit::Zeros, &mut rng).unwrap();
        assert!(matches!(m.add_task(0, 2, HeadInit::Zeros, &mut rng), Err(Error::DuplicateTask(0))));
    }

    #[test]
    fn head_only_stage_leaves_features() {
        let (mut m, mut rng) = tiny(NormMode::TaskBn);
        m.add_task(0, 2, HeadInit::Uniform(1.0), &mut rng).unwrap();
        let convs: Vec<_> = m.blocks.iter().map(|b| b.conv.clone()).collect();
        let x = batch(&mut rng);
        let (logits, trace) = m.forward_train(0, &x).unwrap();
        let g = m.backward(0, &trace, &logits, Stage::HeadOnly).unwrap();
        assert!(g.norms.iter().all(Option::is_none) && g.convs.iter().all(Option::is_none));
        m.apply(0, &g, 0.1, Precision::F64).unwrap();
        assert!(m.blocks.iter().zip(&convs).all(|(b, c)| &b.conv == c));
    }

    #[test]
    fn xconv_eval_needs_recovery() {
        let (mut m, mut rng) = tiny(NormMode::XconvBn);
        m.add_task(0, 2, HeadInit::Zeros, &mut rng).unwrap();
        let x = batch(&mut rng);
        m.forward_train(0, &x).unwrap();
        assert!(matches!(m.forward_eval(0, &x, MomentMode::Running), Err(Error::StaleRecovery(0))));
        m.recover_all().unwrap();
        assert!(m.forward_eval(0, &x, MomentMode::Running).is_ok());
    }

    #[test]
    fn frozen_task_cannot_train() {
        let (mut m, mut rng) = tiny(NormMode::XconvBn);
        m.add_task(0, 2, HeadInit::Zeros, &mut rng).unwrap();
        m.freeze_task(0).unwrap();
        let x = batch(&mut rng);
        assert!(matches!(m.forward_train(0, &x), Err(Error::BankFrozen(0))));
    }

    #[test]
    fn unknown_task() {
        let (m, mut rng) = tiny(NormMode::TaskBn);
        let x = batch(&mut rng);
        assert!(matches!(m.forward_eval(5, &x, MomentMode::Running), Err(Error::MissingBank(5))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("xconv".parse::<NormMode>().unwrap(), NormMode::XconvBn);
        assert_eq!("t-var".parse::<MomentMode>().unwrap(), MomentMode::TVar);
        assert!("bogus".parse::<NormMode>().is_err());
    }
}
