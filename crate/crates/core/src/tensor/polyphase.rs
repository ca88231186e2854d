//! Polyphase decomposition of a stride-`m` convolution into `m²` stride-1
//! convolutions on interleaved sub-grids.
//!
//! Phase `p = r * m + s` holds the samples at rows `≡ r` and columns `≡ s`
//! (mod `m`). The matching sub-kernel keeps the taps at the same residues.

use super::conv::{correlate, output_extent};
use super::Tensor;
use crate::error::{Error, Result};

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Stride("stride must be at least 1".into()));
    }
    if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::Decomposition(format!("spatial extent {h}x{w} is not divisible by stride {m}")));
    }
    Ok(())
}

/// Splits `(B, C, H, W)` into `m²` tensors of shape `(B, C, H/m, W/m)`.
pub fn polyphase_split(a: &Tensor, m: usize) -> Result<Vec<Tensor>> {
    let (b, c, h, w) = a.dims4()?;
    check_divisible(h, w, m)?;
    let (hp, wp) = (h / m, w / m);
    let mut phases = Vec::with_capacity(m * m);
    for r in 0..m {
        for s in 0..m {
            let mut data = Vec::with_capacity(b * c * hp * wp);
            for bc in 0..b * c {
                let plane = &a.data()[bc * h * w..][..h * w];
                for u in 0..hp {
                    let row = &plane[(u * m + r) * w..][..w];
                    data.extend((0..wp).map(|v| row[v * m + s]));
                }
            }
            phases.push(Tensor::new(vec![b, c, hp, wp], data)?);
        }
    }
    Ok(phases)
}

/// Inverse of [`polyphase_split`]: interleaves the `m²` phases.
pub fn polyphase_merge(phases: &[Tensor], m: usize) -> Result<Tensor> {
    if m == 0 || phases.len() != m * m {
        return Err(Error::Decomposition(format!("expected {} phases, got {}", m * m, phases.len())));
    }
    let (b, c, hp, wp) = phases[0].dims4()?;
    if phases.iter().any(|p| p.shape() != phases[0].shape()) {
        return Err(Error::Decomposition("phases have differing shapes".into()));
    }
    let (h, w) = (hp * m, wp * m);
    let mut data = vec![0.0; b * c * h * w];
    for r in 0..m {
        for s in 0..m {
            let phase = phases[r * m + s].data();
            for bc in 0..b * c {
                for u in 0..hp {
                    for v in 0..wp {
                        data[bc * h * w + (u * m + r) * w + v * m + s] = phase[(bc * hp + u) * wp + v];
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], data)
}

/// Splits `(C_out, C_in, K, K)` into `m²` sub-kernels, phase `(r, s)` keeping
/// taps `(i, j)` with `i ≡ r`, `j ≡ s` (mod `m`). A phase with no taps
/// (possible when `K < m`) is `None`.
pub fn polyphase_split_kernel(weight: &Tensor, m: usize) -> Result<Vec<Option<Tensor>>> {
    let (co, ci, kh, kw) = weight.dims4()?;
    if m == 0 {
        return Err(Error::Stride("stride must be at least 1".into()));
    }
    let taps = |k: usize, r: usize| if k > r { (k - r).div_ceil(m) } else { 0 };
    let mut out = Vec::with_capacity(m * m);
    for r in 0..m {
        for s in 0..m {
            let (sh, sw) = (taps(kh, r), taps(kw, s));
            if sh == 0 || sw == 0 {
                out.push(None);
                continue;
            }
            let mut data = Vec::with_capacity(co * ci * sh * sw);
            for oc in 0..co * ci {
                for i in 0..sh {
                    for j in 0..sw {
                        data.push(weight.data()[(oc * kh + i * m + r) * kw + j * m + s]);
                    }
                }
            }
            out.push(Some(Tensor::new(vec![co, ci, sh, sw], data)?));
        }
    }
    Ok(out)
}

/// Evaluates a bias-free, unpadded stride-`m` convolution as the sum of the
/// `m²` stride-1 phase convolutions, each cropped to the strided output grid.
pub fn polyphase_conv_sum(a: &Tensor, weight: &Tensor, m: usize) -> Result<Tensor> {
    let (b, _, h, w) = a.dims4()?;
    let (co, _, kh, kw) = weight.dims4()?;
    let ho = output_extent(h, kh, m, 0)?;
    let wo = output_extent(w, kw, m, 0)?;
    let phases = polyphase_split(a, m)?;
    let kernels = polyphase_split_kernel(weight, m)?;
    let mut out = vec![0.0; b * co * ho * wo];
    for (phase, kernel) in phases.iter().zip(&kernels) {
        let Some(kernel) = kernel else { continue };
        let partial = correlate(phase, kernel, 1, 0)?;
        let (_, _, ph, pw) = partial.dims4()?;
        if ph < ho || pw < wo {
            return Err(Error::Decomposition(format!("phase output {ph}x{pw} smaller than strided output {ho}x{wo}")));
        }
        for bo in 0..b * co {
            for y in 0..ho {
                for x in 0..wo {
                    out[(bo * ho + y) * wo + x] += partial.data()[(bo * ph + y) * pw + x];
                }
            }
        }
    }
    Tensor::new(vec![b, co, ho, wo], out)
}

/// Per-phase channel means: `m²` vectors of length `C`, phase-major.
///
/// Summation order matches [`avg_pool`](super::avg_pool) applied to the
/// output of [`polyphase_split`], so the two agree bit for bit.
#[allow(clippy::needless_range_loop)]
pub fn phase_means(a: &Tensor, m: usize) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = a.dims4()?;
    check_divisible(h, w, m)?;
    let count = (b * (h / m) * (w / m)) as f64;
    let mut means = vec![vec![0.0; c]; m * m];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &a.data()[(bi * c + ci) * h * w..][..h * w];
            for r in 0..m {
                for s in 0..m {
                    let partial: f64 =
                        (r..h).step_by(m).flat_map(|y| plane[y * w..][..w].iter().skip(s).step_by(m)).sum();
                    means[r * m + s][ci] += partial;
                }
            }
        }
    }
    for phase in &mut means {
        phase.iter_mut().for_each(|v| *v /= count);
    }
    Ok(means)
}
