use crate::error::{Error, Result};
use crate::tensor::{channel_moments, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_STAB_EPS: f64 = 1e-5;

/// Classic batch normalization over `(B, H, W)` per channel.
///
/// Running moments follow `r <- r + momentum * (batch - r)`; the variance is
/// the biased (population) batch variance in both the normalization and the
/// running update.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub stab_eps: f64,
    generation: u64,
}

impl PartialEq for BatchNormState {
    fn eq(&self, other: &Self) -> bool {
        self.gamma == other.gamma
            && self.beta == other.beta
            && self.running_mean == other.running_mean
            && self.running_var == other.running_var
            && self.momentum.to_bits() == other.momentum.to_bits()
            && self.stab_eps.to_bits() == other.stab_eps.to_bits()
    }
}

/// Saved activations from a train-mode forward, consumed by
/// [`BatchNormState::backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    generation: u64,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, stab_eps: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("batch norm needs at least one channel".into()));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("momentum {momentum} outside (0, 1]")));
        }
        if stab_eps.is_nan() || stab_eps < 0.0 {
            return Err(Error::Config(format!("stab_eps {stab_eps} must be nonnegative")));
        }
        Ok(BatchNormState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum,
            stab_eps,
            generation: 0,
        })
    }

    /// Rebuilds a state from stored tensors (checkpoint loading).
    pub fn from_parts(
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        momentum: f64,
        stab_eps: f64,
    ) -> Result<Self> {
        let c = gamma.len();
        for (name, t) in [("beta", &beta), ("running_mean", &running_mean), ("running_var", &running_var)] {
            if t.shape() != [c] {
                return Err(Error::Shape(format!("{name} has shape {:?}, expected [{c}]", t.shape())));
            }
        }
        if running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Format("negative running variance".into()));
        }
        Ok(BatchNormState { gamma, beta, running_mean, running_var, momentum, stab_eps, generation: 0 })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, a: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let dims = a.dims4()?;
        if dims.1 != self.channels() {
            return Err(Error::Shape(format!("input has {} channels, norm has {}", dims.1, self.channels())));
        }
        Ok(dims)
    }

    /// Normalizes with batch moments and folds them into the running moments.
    pub fn forward_train(&mut self, a: &Tensor) -> Result<(Tensor, BnCache)> {
        let (b, _, h, w) = self.check_input(a)?;
        if b * h * w < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch statistics need at least two values per channel, got B*H*W = {}",
                b * h * w
            )));
        }
        let (mean, var) = channel_moments(a)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.stab_eps).sqrt()).collect();
        let normalized = standardize(a, &mean, &inv_std)?;
        let out = affine(&normalized, &self.gamma, &self.beta)?;

        let eta = self.momentum;
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r += eta * (m - *r);
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r += eta * (v - *r);
        }
        self.generation += 1;
        Ok((out, BnCache { normalized, inv_std, generation: self.generation }))
    }

    /// Test-time normalization with the running moments. Does not mutate.
    pub fn forward_eval(&self, a: &Tensor) -> Result<Tensor> {
        self.normalize_with(a, self.running_mean.data(), self.running_var.data())
    }

    /// Normalizes with externally supplied moments and this layer's affine.
    pub fn normalize_with(&self, a: &Tensor, mean: &[f64], var: &[f64]) -> Result<Tensor> {
        self.check_input(a)?;
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("moments of length {}/{} for {c} channels", mean.len(), var.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.stab_eps).sqrt()).collect();
        affine(&standardize(a, mean, &inv_std)?, &self.gamma, &self.beta)
    }

    /// Exact gradient of the train-mode forward; running moments are treated
    /// as constants.
    pub fn backward(&self, cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
        if cache.generation != self.generation {
            return Err(Error::Usage(format!(
                "batch-norm cache from forward #{} used after forward #{}",
                cache.generation, self.generation
            )));
        }
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::Shape(format!(
                "grad_out shape {:?} differs from forward output {:?}",
                grad_out.shape(),
                cache.normalized.shape()
            )));
        }
        let (b, c, h, w) = grad_out.dims4()?;
        let plane = h * w;
        let n = (b * plane) as f64;
        let g = grad_out.data();
        let xhat = cache.normalized.data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for k in off..off + plane {
                    sum_g[ci] += g[k];
                    sum_gx[ci] += g[k] * xhat[k];
                }
            }
        }
        let mut gin = vec![0.0; g.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let scale = self.gamma.data()[ci] * cache.inv_std[ci] / n;
                for k in off..off + plane {
                    gin[k] = scale * (n * g[k] - sum_g[ci] - xhat[k] * sum_gx[ci]);
                }
            }
        }
        Ok(BnGrads {
            input: Tensor::new(grad_out.shape().to_vec(), gin)?,
            gamma: Tensor::new(vec![c], sum_gx)?,
            beta: Tensor::new(vec![c], sum_g)?,
        })
    }
}

fn standardize(a: &Tensor, mean: &[f64], inv_std: &[f64]) -> Result<Tensor> {
    let (_, c, h, w) = a.dims4()?;
    let plane = h * w;
    let mut out = a.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ci = idx % c;
        let (m, s) = (mean[ci], inv_std[ci]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
    }
    Ok(out)
}

fn affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ci = idx % c;
        let (g, bt) = (gamma.data()[ci], beta.data()[ci]);
        chunk.iter_mut().for_each(|v| *v = g * *v + bt);
    }
    Ok(out)
}
