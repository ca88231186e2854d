use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward_masked, conv2d_forward, ConvGrads, ConvSpec, Tensor};

/// A convolution layer. `version` increases on every parameter update so
/// that cached quantities derived from the weights can detect staleness.
/// Equality compares parameters only.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    version: u64,
}

impl PartialEq for Conv2d {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.weight == other.weight && self.bias == other.bias
    }
}

impl Conv2d {
    pub fn new(spec: ConvSpec, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(Error::Shape(format!("weight {:?} does not match {:?}", weight.shape(), spec)));
        }
        if spec.has_bias != bias.is_some() {
            return Err(Error::Shape("bias presence disagrees with spec".into()));
        }
        Ok(Conv2d { spec, weight, bias, version: 0 })
    }

    /// He-uniform initialization; bias (if any) starts at zero.
    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n: usize = spec.weight_shape().iter().product();
        let weight = Tensor::new(spec.weight_shape().to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())?;
        let bias = spec.has_bias.then(|| Tensor::zeros(&[spec.out_channels]));
        Conv2d::new(spec, weight, bias)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        conv2d_forward(a, &self.spec, &self.weight, self.bias.as_ref())
    }

    pub fn backward(&self, a: &Tensor, grad_out: &Tensor, want_input: bool, want_weight: bool) -> Result<ConvGrads> {
        conv2d_backward_masked(a, &self.spec, &self.weight, grad_out, want_input, want_weight)
    }

    /// In-place `param -= lr * grad`; bumps the version.
    pub fn sgd_step(&mut self, grads: &ConvGrads, lr: f64) -> Result<()> {
        if let Some(gw) = &grads.weight {
            sgd(&mut self.weight, gw, lr)?;
        }
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), grads.bias.as_ref()) {
            sgd(b, gb, lr)?;
        }
        self.version += 1;
        Ok(())
    }

    /// Marks the weights as changed after an out-of-band edit.
    pub fn touch(&mut self) {
        self.version += 1;
    }
}

pub(crate) fn sgd(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", grad.shape(), param.shape())));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its input; the subgradient at 0 is taken as 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_with(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Fully connected layer `y = x W^T + b` with `W` of shape `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear { weight: Tensor::zeros(&[outputs, inputs]), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn uniform(inputs: usize, outputs: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = scale / (inputs as f64).sqrt();
        let weight =
            Tensor::new(vec![outputs, inputs], (0..inputs * outputs).map(|_| rng.gen_range(-bound..=bound)).collect())
                .expect("linear shape");
        Linear { weight, bias: Tensor::zeros(&[outputs]) }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (o, _) = weight.dims2()?;
        if bias.shape() != [o] {
            return Err(Error::Shape(format!("bias {:?} for {o} outputs", bias.shape())));
        }
        Ok(Linear { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        let (o, wd) = self.weight.dims2()?;
        if d != wd {
            return Err(Error::Shape(format!("linear expects {wd} inputs, got {d}")));
        }
        let w = self.weight.data();
        let mut out = Vec::with_capacity(n * o);
        for row in x.data().chunks(d) {
            for k in 0..o {
                let wr = &w[k * d..(k + 1) * d];
                out.push(self.bias.data()[k] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Tensor::new(vec![n, o], out)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
        let (n, d) = x.dims2()?;
        let o = self.outputs();
        if grad_out.shape() != [n, o] {
            return Err(Error::Shape(format!("grad_out {:?}, expected [{n}, {o}]", grad_out.shape())));
        }
        let w = self.weight.data();
        let mut gin = vec![0.0; n * d];
        let mut gw = vec![0.0; o * d];
        let mut gb = vec![0.0; o];
        for r in 0..n {
            let xr = &x.data()[r * d..(r + 1) * d];
            let gi = &mut gin[r * d..(r + 1) * d];
            for k in 0..o {
                let g = grad_out.data()[r * o + k];
                if g == 0.0 {
                    continue;
                }
                gb[k] += g;
                let wr = &w[k * d..(k + 1) * d];
                let gwr = &mut gw[k * d..(k + 1) * d];
                for j in 0..d {
                    gwr[j] += g * xr[j];
                    gi[j] += g * wr[j];
                }
            }
        }
        Ok(LinearGrads {
            input: Tensor::new(vec![n, d], gin)?,
            weight: Tensor::new(vec![o, d], gw)?,
            bias: Tensor::new(vec![o], gb)?,
        })
    }

    pub fn sgd_step(&mut self, grads: &LinearGrads, lr: f64) -> Result<()> {
        sgd(&mut self.weight, &grads.weight, lr)?;
        sgd(&mut self.bias, &grads.bias, lr)
    }
}

/// Row-wise softmax of `(N, K)` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest logit per row (first wins on ties).
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}
