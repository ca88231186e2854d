use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution layer. Weights are `(out, in, K, K)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { out_channels, in_channels, kernel, stride, padding, has_bias: false }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 || self.kernel == 0 {
            return Err(Error::Shape(format!("degenerate conv spec {self:?}")));
        }
        if self.stride == 0 {
            return Err(Error::Stride("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Stride 1 with padding `K - 1`: every input pixel meets every kernel tap,
    /// so the post-convolution mean is a function of the pre-convolution mean.
    pub fn exact_recovery(&self) -> bool {
        self.stride == 1 && self.padding + 1 == self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            output_extent(h, self.kernel, self.stride, self.padding)?,
            output_extent(w, self.kernel, self.stride, self.padding)?,
        ))
    }
}

/// `(len + 2 * pad - k) / stride + 1`, rejecting non-integral results.
pub fn output_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if stride == 0 {
        return Err(Error::Stride("stride must be at least 1".into()));
    }
    if padded < k {
        return Err(Error::Shape(format!("kernel {k} larger than padded extent {padded}")));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::Stride(format!(
            "extent {len} with padding {pad} and kernel {k} is not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output positions `o` in `[0, out_len)` whose input coordinate
/// `o * stride + tap - pad` falls inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > tap { ((in_len + pad - tap - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn geometry(a: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    let (batch, cin, h, w) = a.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::Shape(format!("weight expects {wcin} input channels, input has {cin}")));
    }
    let ho = output_extent(h, kh, stride, pad)?;
    let wo = output_extent(w, kw, stride, pad)?;
    Ok(Geometry { batch, cin, h, w, cout, kh, kw, ho, wo, stride, pad })
}

/// Direct cross-correlation over a zero-padded input. Kernels may be
/// rectangular here; layers only ever use square ones.
pub(crate) fn correlate(a: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = geometry(a, weight, stride, pad)?;
    let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
    let x = a.data();
    let wt = weight.data();
    for b in 0..g.batch {
        for o in 0..g.cout {
            let out_plane = &mut out[(b * g.cout + o) * g.ho * g.wo..][..g.ho * g.wo];
            for c in 0..g.cin {
                let in_plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, g.pad, i);
                    for j in 0..g.kw {
                        let wv = wt[((o * g.cin + c) * g.kh + i) * g.kw + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, g.pad, j);
                        for y in ylo..yhi {
                            let iy = y * g.stride + i - g.pad;
                            let row = &in_plane[iy * g.w..][..g.w];
                            let orow = &mut out_plane[y * g.wo..][..g.wo];
                            for xo in xlo..xhi {
                                orow[xo] += wv * row[xo * g.stride + j - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.cout, g.ho, g.wo], out)
}

fn check_layer(spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    spec.validate()?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "weight shape {:?} does not match spec {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.shape() == [spec.out_channels] => Ok(()),
        (true, Some(b)) => Err(Error::Shape(format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels))),
        (true, None) => Err(Error::Shape("spec declares a bias but none was supplied".into())),
        (false, Some(_)) => Err(Error::Shape("bias supplied to a bias-free conv spec".into())),
        (false, None) => Ok(()),
    }
}

/// Convolution forward pass. Output is `(B, C_out, H', W')` with
/// `H' = (H + 2p - K) / m + 1`.
pub fn conv2d_forward(a: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    check_layer(spec, weight, bias)?;
    let mut out = correlate(a, weight, spec.stride, spec.padding)?;
    if let Some(bias) = bias {
        let (_, c, h, w) = out.dims4()?;
        let plane = h * w;
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = bias.data()[idx % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weight and
/// (when the spec has one) bias.
pub fn conv2d_backward(a: &Tensor, spec: &ConvSpec, weight: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_masked(a, spec, weight, grad_out, true, true)
}

/// As [`conv2d_backward`], skipping the input and/or weight gradient when the
/// caller does not need it.
pub fn conv2d_backward_masked(
    a: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_weight: bool,
) -> Result<ConvGrads> {
    spec.validate()?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!("weight shape {:?} does not match spec", weight.shape())));
    }
    let g = geometry(a, weight, spec.stride, spec.padding)?;
    if grad_out.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.batch, g.cout, g.ho, g.wo]
        )));
    }
    let x = a.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gin = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if want_weight { vec![0.0; wt.len()] } else { Vec::new() };
    for b in 0..g.batch {
        for o in 0..g.cout {
            let go_plane = &go[(b * g.cout + o) * g.ho * g.wo..][..g.ho * g.wo];
            for c in 0..g.cin {
                let in_off = (b * g.cin + c) * g.h * g.w;
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, g.pad, i);
                    for j in 0..g.kw {
                        let widx = ((o * g.cin + c) * g.kh + i) * g.kw + j;
                        let wv = wt[widx];
                        let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, g.pad, j);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let iy = y * g.stride + i - g.pad;
                            let grow = &go_plane[y * g.wo..][..g.wo];
                            let base = in_off + iy * g.w + j;
                            if want_weight {
                                for xo in xlo..xhi {
                                    acc += grow[xo] * x[base + xo * g.stride - g.pad];
                                }
                            }
                            if want_input {
                                for xo in xlo..xhi {
                                    gin[base + xo * g.stride - g.pad] += wv * grow[xo];
                                }
                            }
                        }
                        if want_weight {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    let bias = if spec.has_bias {
        let mut gb = vec![0.0; g.cout];
        for (idx, chunk) in go.chunks(g.ho * g.wo).enumerate() {
            gb[idx % g.cout] += chunk.iter().sum::<f64>();
        }
        Some(Tensor::new(vec![g.cout], gb)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: if want_input { Some(Tensor::new(a.shape().to_vec(), gin)?) } else { None },
        weight: if want_weight { Some(Tensor::new(weight.shape().to_vec(), gw)?) } else { None },
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_kernel_scales_pixels() {
        let a = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let spec = ConvSpec::new(1, 1, 1, 1, 0);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let out = conv2d_forward(&a, &spec, &w, None).unwrap();
        assert_eq!(out.data(), &[2., 4., 6., 8.]);
        let grads = conv2d_backward(&a, &spec, &w, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(grads.input.unwrap().data(), &[2.0; 4]);
        assert_eq!(grads.weight.unwrap().data(), &[10.0]);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let a = Tensor::full(&[2, 3, 4, 4], 1.5);
        let spec = ConvSpec::new(2, 3, 3, 1, 1).with_bias(true);
        let w = Tensor::zeros(&spec.weight_shape());
        let b = Tensor::from_vec(vec![0.5, -1.0]);
        let out = conv2d_forward(&a, &spec, &w, Some(&b)).unwrap();
        assert_eq!(out.shape(), &[2, 2, 4, 4]);
        for (idx, chunk) in out.data().chunks(16).enumerate() {
            let expect = if idx % 2 == 0 { 0.5 } else { -1.0 };
            assert!(chunk.iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let a = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap();
        let spec = ConvSpec::new(2, 2, 2, 1, 1).with_bias(true);
        let w = Tensor::full(&spec.weight_shape(), 0.3);
        let g = conv2d_backward(&a, &spec, &w, &Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.weight.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_and_shape_errors() {
        assert!(matches!(output_extent(5, 2, 2, 0), Err(Error::Stride(_))));
        assert_eq!(output_extent(4, 2, 2, 0).unwrap(), 2);
        assert_eq!(output_extent(2, 2, 1, 1).unwrap(), 3);
        let a = Tensor::zeros(&[1, 3, 4, 4]);
        let spec = ConvSpec::new(1, 2, 1, 1, 0);
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(matches!(conv2d_forward(&a, &spec, &w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn exact_recovery_flag() {
        assert!(ConvSpec::new(1, 1, 3, 1, 2).exact_recovery());
        assert!(ConvSpec::new(1, 1, 1, 1, 0).exact_recovery());
        assert!(!ConvSpec::new(1, 1, 3, 1, 1).exact_recovery());
        assert!(!ConvSpec::new(1, 1, 3, 2, 2).exact_recovery());
    }

    #[test]
    fn valid_range_matches_bounds_check() {
        for stride in 1..4 {
            for pad in 0..4 {
                for tap in 0..5 {
                    for in_len in 1..7 {
                        let out_len = 8;
                        let (lo, hi) = valid_range(out_len, in_len, stride, pad, tap);
                        for o in 0..out_len {
                            let pos = (o * stride + tap) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < in_len;
                            assert_eq!(inside, o >= lo && o < hi, "s={stride} p={pad} t={tap} n={in_len} o={o}");
                        }
                    }
                }
            }
        }
    }
}
