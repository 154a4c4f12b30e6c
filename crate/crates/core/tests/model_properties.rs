mod common;

use common::{random_image, tiny_net};
use mcfilter::model::{binary_activation_map, Cnn};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inference_is_deterministic(seed in any::<u64>(), img_seed in any::<u64>(), mask in prop::collection::vec(0.0f64..=1.0, 6)) {
        let net = tiny_net(6, 4, seed);
        let img = random_image(2, 4, img_seed);
        prop_assert_eq!(net.logits(&img).unwrap(), net.logits(&img).unwrap());
        prop_assert_eq!(net.masked_logits(&img, &mask).unwrap(), net.masked_logits(&img, &mask).unwrap());
        let copy: Cnn<f64> = net.clone();
        prop_assert_eq!(net.forward(&img).unwrap().gap, copy.forward(&img).unwrap().gap);
    }

    /// Perturbing the final-layer kernels of masked-out filters leaves the
    /// masked logits bit-identical.
    #[test]
    fn masked_out_filters_do_not_matter(
        seed in any::<u64>(),
        img_seed in any::<u64>(),
        keep in prop::collection::vec(any::<bool>(), 6),
        noise in prop::collection::vec(-2.0f64..2.0, 6 * 2 * 9 + 6),
    ) {
        let net = tiny_net(6, 4, seed);
        let img = random_image(2, 4, img_seed);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let mut convs = net.conv_layers().to_vec();
        let last = convs.last_mut().unwrap();
        for (oc, &k) in keep.iter().enumerate() {
            if !k {
                for j in 0..last.in_channels * 9 {
                    last.weights[oc * last.in_channels * 9 + j] += noise[oc * 18 + j];
                }
                last.bias[oc] += noise[6 * 18 + oc];
            }
        }
        let perturbed = Cnn::from_parts(
            net.architecture().clone(),
            convs,
            net.head_weights().to_vec(),
            net.head_bias().to_vec(),
        )
        .unwrap();
        prop_assert_eq!(net.masked_logits(&img, &mask).unwrap(), perturbed.masked_logits(&img, &mask).unwrap());
    }

    /// Any strictly increasing map that keeps every value on its side of the
    /// sigmoid threshold leaves the binary map unchanged.
    #[test]
    fn activation_map_survives_monotone_rescaling(
        gap in prop::collection::vec(-4.0f64..4.0, 1..40),
        t in 0.05f64..0.95,
        scale in 0.01f64..50.0,
        cube in any::<bool>(),
    ) {
        let pivot = (t / (1.0 - t)).ln();
        let rescaled: Vec<f64> = gap
            .iter()
            .map(|&g| {
                let d = g - pivot;
                pivot + scale * if cube { d * d * d } else { d }
            })
            .collect();
        prop_assert_eq!(
            binary_activation_map(&gap, t).unwrap(),
            binary_activation_map(&rescaled, t).unwrap()
        );
    }

    #[test]
    fn f32_and_f64_agree(seed in any::<u64>(), img_seed in any::<u64>()) {
        let net = tiny_net(6, 4, seed);
        let img = random_image(2, 4, img_seed);
        let net32 = Cnn::<f32>::from_parts(
            net.architecture().clone(),
            net.conv_layers().iter().map(|l| mcfilter::model::ConvLayer {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                pool: l.pool,
                weights: l.weights.iter().map(|&v| v as f32).collect(),
                bias: l.bias.iter().map(|&v| v as f32).collect(),
            }).collect(),
            net.head_weights().iter().map(|&v| v as f32).collect(),
            net.head_bias().iter().map(|&v| v as f32).collect(),
        ).unwrap();
        let l64 = net.logits(&img).unwrap();
        let l32 = net32.logits(&img.cast::<f32>()).unwrap();
        for (a, b) in l64.iter().zip(&l32) {
            prop_assert!((a - *b as f64).abs() < 1e-4 * a.abs().max(1.0));
        }
    }
}

#[test]
fn checkpoints_refuse_the_wrong_precision() {
    let net = tiny_net(3, 2, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    net.save(&path).unwrap();
    assert_eq!(Cnn::<f64>::load(&path).unwrap(), net);
    assert!(Cnn::<f32>::load(&path).is_err());
}
