mod common;

use confit::nn::{softmax, BatchNormState, Linear};
use confit::tensor::{
    avg_pool, avg_pool_dp, conv2d_forward, decode_cft, encode_cft, output_extent, phase_means, polyphase_merge,
    polyphase_split, ConvSpec, DType,
};
use confit::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_oracle(seed in any::<u64>(), k in 1usize..4, stride in 1usize..3, c in 1usize..3, co in 1usize..3) {
        let mut r = rng(seed);
        let pad = k - 1;
        let h = stride * 3 + k;
        prop_assume!(output_extent(h, k, stride, pad).is_ok());
        let a = gaussian(&mut r, &[2, c, h, h], 1.0);
        let w = gaussian(&mut r, &[co, c, k, k], 1.0);
        let b = gaussian(&mut r, &[co], 1.0);
        let spec = ConvSpec::new(co, c, k, stride, pad).with_bias(true);
        let lib = conv2d_forward(&a, &spec, &w, Some(&b)).unwrap();
        let oracle = conv(&a, &w, Some(&b), stride, pad);
        prop_assert_eq!(lib.shape(), oracle.shape());
        prop_assert!(relative_error(lib.data(), oracle.data()) < 1e-13);
    }

    #[test]
    fn polyphase_split_merge_round_trip(seed in any::<u64>(), m in 1usize..4, hm in 1usize..4, wm in 1usize..4) {
        let a = gaussian(&mut rng(seed), &[2, 2, m * hm, m * wm], 1.0);
        let phases = polyphase_split(&a, m).unwrap();
        prop_assert_eq!(phases.len(), m * m);
        prop_assert_eq!(polyphase_merge(&phases, m).unwrap(), a);
    }

    #[test]
    fn phase_means_match_oracle(seed in any::<u64>(), m in 1usize..4, hm in 1usize..4) {
        let a = gaussian(&mut rng(seed), &[3, 2, m * hm, m * (hm + 1)], 1.0);
        let means = phase_means(&a, m).unwrap();
        for (p, mean) in means.iter().enumerate() {
            prop_assert!(max_abs_diff(mean, &phase_mean(&a, m, p / m, p % m)) < 1e-12);
        }
    }

    #[test]
    fn broadcast_pool_keeps_channel_means(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let a = gaussian(&mut rng(seed), &[2, 3, h, w], 2.0);
        let dp = avg_pool_dp(&a).unwrap();
        prop_assert_eq!(dp.shape(), a.shape());
        prop_assert!(max_abs_diff(avg_pool(&dp).unwrap().data(), &channel_mean(&a)) < 1e-12);
    }

    #[test]
    fn batchnorm_train_matches_oracle(seed in any::<u64>(), c in 1usize..4, h in 1usize..4) {
        let mut r = rng(seed);
        let a = gaussian(&mut r, &[3, c, h, h + 1], 1.5);
        let mut bn = BatchNormState::new(c, 0.1, 1e-5).unwrap();
        bn.gamma = gaussian(&mut r, &[c], 1.0);
        bn.beta = gaussian(&mut r, &[c], 1.0);
        let (out, _) = bn.forward_train(&a).unwrap();
        let oracle = batchnorm(&a, bn.gamma.data(), bn.beta.data(), 1e-5);
        prop_assert!(max_abs_diff(out.data(), oracle.data()) < 1e-12);
        // r <- r + 0.1 (batch - r) from a zero start.
        let expected: Vec<f64> = channel_mean(&a).iter().map(|m| 0.1 * m).collect();
        prop_assert!(max_abs_diff(bn.running_mean.data(), &expected) < 1e-14);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), n in 1usize..5, k in 1usize..6) {
        let p = softmax(&gaussian(&mut rng(seed), &[n, k], 30.0)).unwrap();
        for row in p.data().chunks(k) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cft_f64_round_trip_is_exact(seed in any::<u64>(), len in 1usize..40) {
        let t = gaussian(&mut rng(seed), &[len], 1e3);
        let (back, dtype) = decode_cft(&encode_cft(&t, DType::F64).unwrap()).unwrap();
        prop_assert_eq!(dtype, DType::F64);
        prop_assert_eq!(back, t);
    }
}

#[test]
fn linear_forward_matches_hand_computation() {
    let layer = Linear::from_parts(
        Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap(),
        Tensor::from_vec(vec![0.25, -1.0]),
    )
    .unwrap();
    let y = layer.forward(&Tensor::new(vec![1, 3], vec![2.0, 4.0, 6.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[-3.75, 5.0]);
}

#[test]
fn tensor_rejects_mismatched_shape() {
    assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
}

#[test]
fn non_integral_output_extent_is_rejected() {
    assert!(output_extent(5, 2, 2, 0).is_err());
    assert_eq!(output_extent(6, 2, 2, 0).unwrap(), 3);
}

#[test]
fn truncated_cft_is_a_format_error() {
    let bytes = encode_cft(&Tensor::from_vec(vec![1.0, 2.0]), DType::F64).unwrap();
    assert!(decode_cft(&bytes[..bytes.len() - 1]).is_err());
}
