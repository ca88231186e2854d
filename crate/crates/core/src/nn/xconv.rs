//! Cross-convolution batch normalization.
//!
//! Training is identical to classic batch normalization. Alongside the usual
//! post-convolution statistics, each task's record keeps a momentum-updated
//! mean of the *input* of the preceding convolution (one per polyphase phase
//! for strided convolutions). Before evaluation the post-convolution mean is
//! recomputed by pushing the stored input mean through the current weights,
//! so later weight drift does not invalidate it. The running variance stays
//! post-convolution and task-specific.

use std::collections::{BTreeMap, BTreeSet};

use super::batchnorm::{BatchNormState, BnCache, BnGrads};
use super::layers::Conv2d;
use crate::error::{Error, Result};
use crate::tensor::{avg_pool, conv2d_forward, phase_means, ConvSpec, Tensor};

/// One task's normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct XconvRecord {
    pub bn: BatchNormState,
    /// Stride of the preceding convolution; `stride²` pre-means are kept.
    pub stride: usize,
    /// Phase-major pre-convolution running means, each of length `C_in`.
    pub pre_means: Vec<Tensor>,
    /// Spatial size of the convolution input seen during training.
    pub input_spatial: Option<(usize, usize)>,
}

impl XconvRecord {
    pub fn new(bn: BatchNormState, in_channels: usize, stride: usize) -> Result<Self> {
        if stride == 0 || in_channels == 0 {
            return Err(Error::Shape("pre-mean record needs a positive stride and channel count".into()));
        }
        Ok(XconvRecord {
            bn,
            stride,
            pre_means: vec![Tensor::zeros(&[in_channels]); stride * stride],
            input_spatial: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.pre_means[0].len()
    }

    /// `pre <- pre + momentum * (batch_pre - pre)` for every phase, where
    /// `batch_pre` is the per-phase channel mean of the convolution input.
    pub fn update_pre_means(&mut self, conv_input: &Tensor) -> Result<()> {
        let (_, c, h, w) = conv_input.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!("conv input has {c} channels, record tracks {}", self.in_channels())));
        }
        if let Some(prev) = self.input_spatial {
            if prev != (h, w) {
                return Err(Error::Data(format!(
                    "heterogeneous spatial sizes within one task: {prev:?} then {:?}",
                    (h, w)
                )));
            }
        }
        let batch = phase_means(conv_input, self.stride)?;
        let eta = self.bn.momentum;
        for (stored, fresh) in self.pre_means.iter_mut().zip(&batch) {
            for (r, m) in stored.data_mut().iter_mut().zip(fresh) {
                *r += eta * (m - *r);
            }
        }
        self.input_spatial = Some((h, w));
        Ok(())
    }
}

fn check_conv(record: &XconvRecord, conv: &Conv2d) -> Result<(usize, usize)> {
    let (h, w) = record
        .input_spatial
        .ok_or_else(|| Error::Recovery("record has no input spatial size; was it ever trained?".into()))?;
    if conv.spec.stride != record.stride {
        return Err(Error::Recovery(format!(
            "record tracks {} phases but conv stride is {}",
            record.stride * record.stride,
            conv.spec.stride
        )));
    }
    if conv.spec.in_channels != record.in_channels() {
        return Err(Error::Recovery("conv input channels disagree with stored pre-means".into()));
    }
    Ok((h, w))
}

/// Recovers the post-convolution mean by convolving the broadcast
/// pre-convolution means at the stored input size.
///
/// For stride `m`, phase `(r, s)` contributes a tensor holding its mean at
/// every pixel `≡ (r, s)` (mod `m`) and zero elsewhere; the pooled outputs of
/// the `m²` convolutions are summed and the bias, if any, is added once.
pub fn recover_mean(record: &XconvRecord, conv: &Conv2d) -> Result<Tensor> {
    let (h, w) = check_conv(record, conv)?;
    let m = record.stride;
    let c = record.in_channels();
    let spec = ConvSpec { has_bias: false, ..conv.spec };
    let mut total = vec![0.0; conv.spec.out_channels];
    for r in 0..m {
        for s in 0..m {
            let mean = record.pre_means[r * m + s].data();
            let mut data = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in (r..h).step_by(m) {
                    for x in (s..w).step_by(m) {
                        data[(ci * h + y) * w + x] = mean[ci];
                    }
                }
            }
            let broadcast = Tensor::new(vec![1, c, h, w], data)?;
            let pooled = avg_pool(&conv2d_forward(&broadcast, &spec, &conv.weight, None)?)?;
            for (t, v) in total.iter_mut().zip(pooled.data()) {
                *t += v;
            }
        }
    }
    if let Some(bias) = &conv.bias {
        for (t, b) in total.iter_mut().zip(bias.data()) {
            *t += b;
        }
    }
    Tensor::new(vec![conv.spec.out_channels], total)
}

/// Closed form of [`recover_mean`] for stride 1 and padding `K - 1`:
/// `mean[o] = (H W / (H' W')) * sum_c (sum_ij W[o, c, i, j]) * pre[c]`.
pub fn recover_mean_closed_form(record: &XconvRecord, conv: &Conv2d) -> Result<Tensor> {
    let (h, w) = check_conv(record, conv)?;
    if !conv.spec.exact_recovery() {
        return Err(Error::Recovery(format!(
            "closed form needs stride 1 and padding K-1, got stride {} padding {} kernel {}",
            conv.spec.stride, conv.spec.padding, conv.spec.kernel
        )));
    }
    let (ho, wo) = conv.spec.output_hw(h, w)?;
    let ratio = (h * w) as f64 / (ho * wo) as f64;
    let k2 = conv.spec.kernel * conv.spec.kernel;
    let cin = conv.spec.in_channels;
    let pre = record.pre_means[0].data();
    let mut out = Vec::with_capacity(conv.spec.out_channels);
    for o in 0..conv.spec.out_channels {
        let mut acc = 0.0;
        for (ci, &p) in pre.iter().enumerate() {
            let taps = &conv.weight.data()[(o * cin + ci) * k2..][..k2];
            acc += taps.iter().sum::<f64>() * p;
        }
        let bias = conv.bias.as_ref().map_or(0.0, |b| b.data()[o]);
        out.push(ratio * acc + bias);
    }
    Tensor::new(vec![conv.spec.out_channels], out)
}

/// A recovered mean stamped with the conv weight version it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredMean {
    pub mean: Tensor,
    pub weight_version: u64,
}

/// Per-task records for one normalization layer, plus the recovery cache.
///
/// Records of frozen tasks are never handed out mutably. The recovery cache
/// lives beside the records so rebuilding it does not touch a frozen record.
#[derive(Clone, Debug, Default)]
pub struct XconvBnBank {
    records: BTreeMap<usize, XconvRecord>,
    frozen: BTreeSet<usize>,
    recovered: BTreeMap<usize, RecoveredMean>,
}

/// Equality compares records and frozen sets; the recovery cache is derived
/// state and ignored.
impl PartialEq for XconvBnBank {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.frozen == other.frozen
    }
}

impl XconvBnBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: usize, record: XconvRecord) -> Result<()> {
        if self.records.contains_key(&task) {
            return Err(Error::DuplicateTask(task));
        }
        self.records.insert(task, record);
        Ok(())
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn latest(&self) -> Option<(usize, &XconvRecord)> {
        self.records.iter().next_back().map(|(&t, r)| (t, r))
    }

    pub fn get(&self, task: usize) -> Result<&XconvRecord> {
        self.records.get(&task).ok_or(Error::MissingBank(task))
    }

    pub fn get_mut(&mut self, task: usize) -> Result<&mut XconvRecord> {
        if self.frozen.contains(&task) {
            return Err(Error::BankFrozen(task));
        }
        self.recovered.remove(&task);
        self.records.get_mut(&task).ok_or(Error::MissingBank(task))
    }

    pub fn freeze(&mut self, task: usize) -> Result<()> {
        self.get(task)?;
        self.frozen.insert(task);
        Ok(())
    }

    pub fn is_frozen(&self, task: usize) -> bool {
        self.frozen.contains(&task)
    }

    pub fn frozen_tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter().copied()
    }

    pub fn update_pre_means(&mut self, task: usize, conv_input: &Tensor) -> Result<()> {
        self.get_mut(task)?.update_pre_means(conv_input)
    }

    /// Recovers and caches the post-convolution mean for `task`.
    pub fn recover(&mut self, task: usize, conv: &Conv2d) -> Result<&Tensor> {
        let mean = recover_mean(self.get(task)?, conv)?;
        self.recovered.insert(task, RecoveredMean { mean, weight_version: conv.version() });
        Ok(&self.recovered[&task].mean)
    }

    /// Recovers every record that has seen training data.
    pub fn recover_all(&mut self, conv: &Conv2d) -> Result<()> {
        let tasks: Vec<usize> =
            self.records.iter().filter(|(_, r)| r.input_spatial.is_some()).map(|(&t, _)| t).collect();
        for task in tasks {
            self.recover(task, conv)?;
        }
        Ok(())
    }

    /// The cached recovered mean, provided it matches the conv's current
    /// weights.
    pub fn recovered_mean(&self, task: usize, conv: &Conv2d) -> Result<&Tensor> {
        self.get(task)?;
        match self.recovered.get(&task) {
            Some(r) if r.weight_version == conv.version() => Ok(&r.mean),
            _ => Err(Error::StaleRecovery(task)),
        }
    }

    pub fn invalidate_recovery(&mut self) {
        self.recovered.clear();
    }

    /// Train-mode forward: records the pre-convolution means of
    /// `conv_input`, then normalizes `conv_output` exactly as classic batch
    /// normalization does.
    pub fn forward_train(
        &mut self,
        task: usize,
        conv_input: &Tensor,
        conv_output: &Tensor,
    ) -> Result<(Tensor, BnCache)> {
        let record = self.get_mut(task)?;
        record.update_pre_means(conv_input)?;
        record.bn.forward_train(conv_output)
    }

    /// Eval-mode forward with the recovered mean and the task's running
    /// variance and affine parameters.
    pub fn forward_eval(&self, task: usize, conv_output: &Tensor, conv: &Conv2d) -> Result<Tensor> {
        let mean = self.recovered_mean(task, conv)?;
        let record = self.get(task)?;
        record.bn.normalize_with(conv_output, mean.data(), record.bn.running_var.data())
    }

    pub fn backward(&self, task: usize, cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
        self.get(task)?.bn.backward(cache, grad_out)
    }
}
