use proptest::prelude::*;
use volumix::config::RunConfig;
use volumix::metrics::{dsc, miou, nsd, LabelVolume};
use volumix::rng::Rng;
use volumix::seqmix::{dense_apply, quasiseparable_materialize, quasiseparable_matmul, ssm_scan, QuasiParams, SsmParams};
use volumix::tensor::{Graph, Tensor};

fn masks(dims: [usize; 3], seed: u64, p: f64) -> (LabelVolume, LabelVolume) {
    let mut rng = Rng::new(seed);
    let n = dims.iter().product();
    let mut draw = || (0..n).map(|_| u8::from(rng.uniform(0.0, 1.0) < p)).collect::<Vec<u8>>();
    let (a, b) = (draw(), draw());
    (LabelVolume::unit(dims, a).unwrap(), LabelVolume::unit(dims, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_a_function_of_iou(d in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>(), p in 0.0f64..1.0) {
        let (a, b) = masks([d, h, w], seed, p);
        let iou = miou(&a, &b, 1).unwrap();
        prop_assert!((dsc(&a, &b, 1).unwrap() - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        prop_assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&b, &a, 1).unwrap());
        prop_assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn surface_dice_grows_with_tolerance(seed in any::<u64>(), p in 0.05f64..0.7, t in 0.3f64..3.0) {
        let (a, b) = masks([5, 4, 6], seed, p);
        let lo = nsd(&a, &b, 1, t).unwrap();
        let hi = nsd(&a, &b, 1, t * 1.7).unwrap();
        prop_assert!(lo <= hi);
        prop_assert!((0.0..=1.0).contains(&lo));
    }

    #[test]
    fn shape_transforms_invert_exactly(seed in any::<u64>(), axis in 0usize..3) {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(&[2, 3, 4], rng.uniform_vec(24, -5.0, 5.0)).unwrap();
        let g = Graph::new();
        let v = g.constant(x.clone());
        let f = v.flip(axis).unwrap().flip(axis).unwrap().value();
        prop_assert_eq!(f.data(), x.data());
        let p = v.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap().value();
        prop_assert_eq!(p.data(), x.data());
        let r = v.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap().value();
        prop_assert_eq!(r.data(), x.data());
    }

    #[test]
    fn quasiseparable_mixing_is_linear(seed in any::<u64>(), l in 1usize..20, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = Rng::new(seed);
        let q = QuasiParams::<f64>::random(&mut rng, l, 3, true).unwrap();
        let x = Tensor::new(&[l, 2], rng.uniform_vec(2 * l, -1.0, 1.0)).unwrap();
        let y = Tensor::new(&[l, 2], rng.uniform_vec(2 * l, -1.0, 1.0)).unwrap();
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = quasiseparable_matmul(&Tensor::new(&[l, 2], mix).unwrap(), &q).unwrap();
        let (qx, qy) = (quasiseparable_matmul(&x, &q).unwrap(), quasiseparable_matmul(&y, &q).unwrap());
        for i in 0..2 * l {
            prop_assert!((lhs.data()[i] - (alpha * qx.data()[i] + beta * qy.data()[i])).abs() < 1e-9);
        }
        let m = quasiseparable_materialize(&q).unwrap();
        let dense = dense_apply(l, 2, m.data(), x.data());
        prop_assert!(qx.data().iter().zip(&dense).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn scan_outputs_ignore_future_tokens(seed in any::<u64>(), l in 2usize..24, cut in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let p = SsmParams::<f64>::random(&mut rng, l, 2, 3).unwrap();
        let x = Tensor::new(&[l, 2], rng.uniform_vec(2 * l, -1.0, 1.0)).unwrap();
        let t = 1 + ((l - 1) as f64 * cut) as usize % (l - 1);
        let mut noisy = x.clone();
        for v in &mut noisy.data_mut()[t * 2..] {
            *v += 3.0;
        }
        let (a, b) = (ssm_scan(&x, &p).unwrap(), ssm_scan(&noisy, &p).unwrap());
        prop_assert_eq!(&a.data()[..t * 2], &b.data()[..t * 2]);
    }

    #[test]
    fn config_text_round_trips(epochs in 1usize..500, lr in 1e-6f64..1.0, width in 1usize..64, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", &epochs.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("width", &width.to_string()).unwrap();
        cfg.seed = seed;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }
}
