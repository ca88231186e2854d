//! Reference implementations written independently of the library, used as
//! oracles by the integration tests.
#![allow(dead_code)]

use confit::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Zero-pads every spatial border by `pad`.
pub fn pad_input(a: &Tensor, pad: usize) -> Tensor {
    let s = a.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; b * c * hp * wp];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[((n * c + ch) * hp + y + pad) * wp + x + pad] = a.data()[((n * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(vec![b, c, hp, wp], out).unwrap()
}

/// Cross-correlation on an explicitly padded copy, one output at a time.
pub fn conv(a: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let p = pad_input(a, pad);
    let s = p.shape();
    let (b, c, hp, wp) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (co, k) = (ws[0], ws[2]);
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;
    let mut out = Vec::with_capacity(b * co * ho * wo);
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                acc += p.data()[((n * c + ch) * hp + y * stride + i) * wp + x * stride + j]
                                    * weight.data()[((o * c + ch) * k + i) * k + j];
                            }
                        }
                    }
                    out.push(acc + bias.map_or(0.0, |t| t.data()[o]));
                }
            }
        }
    }
    Tensor::new(vec![b, co, ho, wo], out).unwrap()
}

/// Per-channel mean over batch and space.
pub fn channel_mean(a: &Tensor) -> Vec<f64> {
    let s = a.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    (0..c)
        .map(|ch| {
            let mut total = 0.0;
            for n in 0..b {
                for i in 0..hw {
                    total += a.data()[(n * c + ch) * hw + i];
                }
            }
            total / (b * hw) as f64
        })
        .collect()
}

/// Tensor of shape `shape` holding `mean[c]` everywhere in channel `c`.
pub fn broadcast(mean: &[f64], shape: &[usize]) -> Tensor {
    let hw = shape[2] * shape[3];
    let mut out = Vec::new();
    for _ in 0..shape[0] {
        for &m in mean {
            out.extend(std::iter::repeat_n(m, hw));
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

/// Mean of phase `(r, s)` of a stride-`m` grid, per channel.
pub fn phase_mean(a: &Tensor, m: usize, r: usize, s: usize) -> Vec<f64> {
    let sh = a.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    (0..c)
        .map(|ch| {
            let (mut total, mut count) = (0.0, 0usize);
            for n in 0..b {
                for y in (r..h).step_by(m) {
                    for x in (s..w).step_by(m) {
                        total += a.data()[((n * c + ch) * h + y) * w + x];
                        count += 1;
                    }
                }
            }
            total / count as f64
        })
        .collect()
}

/// Train-mode batch normalization with biased variance.
pub fn batchnorm(a: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let s = a.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mean = channel_mean(a);
    let mut out = a.data().to_vec();
    for ch in 0..c {
        let mut var = 0.0;
        for n in 0..b {
            for i in 0..hw {
                var += (a.data()[(n * c + ch) * hw + i] - mean[ch]).powi(2);
            }
        }
        var /= (b * hw) as f64;
        for n in 0..b {
            for i in 0..hw {
                let v = &mut out[(n * c + ch) * hw + i];
                *v = gamma[ch] * (*v - mean[ch]) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Mean softmax cross-entropy of `(n, k)` logits.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (row, &label) in logits.chunks(k).zip(labels) {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
        loss += -(row[label] - top) + z.ln();
    }
    loss / labels.len() as f64
}

/// Central differences with step `h`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Average accuracy and forgetting from a full `T x T` matrix whose entry
/// `(i, j)` is the accuracy on task `i` after training task `j` (`j >= i`).
pub fn acc_fgt(full: &[Vec<f64>]) -> (f64, f64) {
    let t = full.len();
    let acc = full.iter().map(|row| row[t - 1]).sum::<f64>() / t as f64;
    if t < 2 {
        return (acc, 0.0);
    }
    let mut fgt = 0.0;
    for (i, row) in full.iter().enumerate().take(t - 1) {
        let best = (i..t - 1).map(|j| row[j] - row[t - 1]).fold(f64::NEG_INFINITY, f64::max);
        fgt += best.max(0.0);
    }
    (acc, fgt / (t - 1) as f64)
}
