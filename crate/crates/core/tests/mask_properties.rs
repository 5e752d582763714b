use maskgate::graph::Tape;
use maskgate::mask::{binarize, binarize_ste, split_features, ste_backward, MaskModuleParams};
use maskgate::tensor::Tensor;
use maskgate::SteConvention;
use proptest::prelude::*;

fn z_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], 1..40)
}

proptest! {
    #[test]
    fn masks_partition_channels(z in z_strategy(), tau in -0.5f64..0.5) {
        let pair = binarize(&z, tau);
        prop_assert_eq!(pair.channels(), z.len());
        for (i, &v) in z.iter().enumerate() {
            prop_assert_eq!(pair.mask1()[i] + pair.mask2()[i], 1);
            prop_assert_eq!(pair.mask1()[i] == 1, v > tau);
        }
        let expected = z.iter().filter(|&&v| v > tau).count() as f64 / z.len() as f64;
        prop_assert_eq!(pair.proportion_nonlinear(), expected);
        prop_assert_eq!(pair.nonlinear_indices().len(), z.iter().filter(|&&v| v > tau).count());
    }

    #[test]
    fn split_reconstructs_input(z in z_strategy(), n in 1usize..4, spatial in 1usize..5, seed in any::<u64>()) {
        let c = z.len();
        let pair = binarize(&z, 0.0);
        let len = n * c * spatial;
        let data: Vec<f64> = (0..len).map(|i| ((i as u64 ^ seed) % 1000) as f64 / 7.0 - 60.0).collect();
        let f = Tensor::new(vec![n, c, spatial, 1], data).unwrap();
        let s = split_features(&f, &pair).unwrap();
        for (i, v) in f.data().iter().enumerate() {
            let ch = (i / spatial) % c;
            let (a, b) = (s.nonlinear.data()[i], s.linear.data()[i]);
            prop_assert_eq!(a + b, *v);
            let zeroed = if pair.mask1()[ch] == 1 { b } else { a };
            prop_assert_eq!(zeroed, 0.0);
        }
    }

    #[test]
    fn tape_ste_matches_closed_form(z in z_strategy(), seed in any::<u64>()) {
        let c = z.len();
        let up1: Vec<f64> = (0..c).map(|i| ((seed >> (i % 60)) & 7) as f64 - 3.5).collect();
        let up2: Vec<f64> = (0..c).map(|i| ((seed >> ((i + 3) % 60)) & 5) as f64 - 2.0).collect();
        for conv in [SteConvention::Paper, SteConvention::Chain] {
            let mut tape = Tape::new();
            let zv = tape.leaf(Tensor::new(vec![c], z.clone()).unwrap());
            let m = binarize_ste(&mut tape, zv, 0.0, conv).unwrap();
            let expected = binarize(&z, 0.0).mask1_tensor::<f64>();
            prop_assert_eq!(tape.value(m.mask1).data(), expected.data());
            let a = tape.constant(Tensor::new(vec![c], up1.clone()).unwrap());
            let b = tape.constant(Tensor::new(vec![c], up2.clone()).unwrap());
            let p1 = tape.mul(m.mask1, a).unwrap();
            let p2 = tape.mul(m.mask2, b).unwrap();
            let s = tape.add(p1, p2).unwrap();
            let loss = tape.sum(s);
            tape.backward(loss).unwrap();
            let expected = ste_backward(&up1, &up2, conv);
            prop_assert_eq!(tape.grad(zv).unwrap(), expected.as_slice());
        }
    }

    #[test]
    fn positive_init_gives_all_nonlinear(c in 1usize..64, seed in any::<u64>()) {
        let h = (c / 4).max(4);
        let p = MaskModuleParams::<f64>::init_positive(c, h, seed).unwrap();
        prop_assert!(p.gate_values().unwrap().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(p.masks().unwrap().proportion_nonlinear(), 1.0);
    }
}

#[test]
fn convention_names_round_trip() {
    for conv in [SteConvention::Paper, SteConvention::Chain] {
        assert_eq!(
            SteConvention::from_mask2_weight(conv.mask2_weight()),
            Some(conv)
        );
        assert_eq!(conv.to_string().parse::<SteConvention>().unwrap(), conv);
    }
    assert!("sideways".parse::<SteConvention>().is_err());
}
