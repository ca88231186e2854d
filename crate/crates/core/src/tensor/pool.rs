use super::Tensor;
use crate::error::Result;

/// Per-channel mean over the batch and spatial axes: `(B, C, H, W) -> (C)`.
pub fn avg_pool(a: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = a.dims4()?;
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ci, acc) in out.iter_mut().enumerate() {
            let start = (bi * c + ci) * plane;
            *acc += a.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    for v in &mut out {
        *v /= count;
    }
    Tensor::new(vec![c], out)
}

/// Dimension-preserving average pooling: the channel means broadcast back to
/// the input's shape.
pub fn avg_pool_dp(a: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = a.dims4()?;
    let means = avg_pool(a)?;
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len());
    for _ in 0..b {
        for &m in means.data() {
            data.extend(std::iter::repeat_n(m, plane));
        }
    }
    Tensor::new(vec![b, c, h, w], data)
}

/// Per-channel mean and biased variance over `(B, H, W)`, two-pass.
pub fn channel_moments(a: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = a.dims4()?;
    let mean = avg_pool(a)?.into_data();
    let plane = h * w;
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let start = (bi * c + ci) * plane;
            let m = mean[ci];
            var[ci] += a.data()[start..start + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let count = (b * plane) as f64;
    for v in &mut var {
        *v /= count;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn avg_pool_of_two_by_two() {
        let a = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(avg_pool(&a).unwrap().data(), &[2.5]);
        assert_eq!(avg_pool_dp(&a).unwrap().data(), &[2.5; 4]);
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let a = Tensor::full(&[2, 3, 4, 5], -1.25);
        assert_eq!(avg_pool(&a).unwrap().data(), &[-1.25; 3]);
    }

    #[test]
    fn rank_checked() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(avg_pool(&a), Err(Error::Shape(_))));
        assert!(matches!(avg_pool_dp(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn dp_is_idempotent() {
        let a = Tensor::new(vec![2, 2, 1, 3], (0..12).map(|v| (v * v) as f64).collect()).unwrap();
        let once = avg_pool_dp(&a).unwrap();
        let twice = avg_pool_dp(&once).unwrap();
        assert_eq!(once, twice);
        assert_eq!(avg_pool(&once).unwrap(), avg_pool(&a).unwrap());
    }
}
