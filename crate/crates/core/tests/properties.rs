use proptest::prelude::*;
use semimoe::config::TrainConfig;
use semimoe::data::{labeled_count, split, Dihedral, SplitSpec};
use semimoe::evaluation::{dice_score, jaccard_score};
use semimoe::labels::{compute_sdf, extract_boundary, BinaryMask};
use semimoe::losses::{dice_loss, lambda_schedule};
use semimoe_autograd::{Tape, Tensor};

fn mask(max_side: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop::bool::weighted(0.4), h * w)
            .prop_map(move |bits| BinaryMask::new(h, w, bits.into_iter().map(u8::from).collect()).unwrap())
    })
}

fn transformed(m: &BinaryMask, d: Dihedral) -> BinaryMask {
    let (h, w) = d.output_dims(m.height(), m.width());
    BinaryMask::new(h, w, d.apply(m.data(), m.height(), m.width())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sdf_is_bounded_and_signed_by_the_mask(m in mask(16)) {
        let sdf = compute_sdf(&m);
        if m.is_uniform() {
            let fill = if m.count() == 0 { -1.0 } else { 1.0 };
            prop_assert!(sdf.data().iter().all(|&v| v == fill));
            return Ok(());
        }
        let bnd = extract_boundary(&m);
        for (i, &v) in sdf.data().iter().enumerate() {
            prop_assert!((-1.0..=1.0).contains(&v));
            if bnd.mask().data()[i] == 1 {
                prop_assert_eq!(v, 0.0);
            } else if m.data()[i] == 1 {
                prop_assert!(v > 0.0);
            } else {
                prop_assert!(v < 0.0);
            }
        }
    }

    #[test]
    fn boundary_lies_inside_the_mask(m in mask(16)) {
        let bnd = extract_boundary(&m);
        for (b, f) in bnd.mask().data().iter().zip(m.data()) {
            prop_assert!(b <= f);
        }
        prop_assert_eq!(bnd.mask().count() == 0, m.count() == 0);
    }

    #[test]
    fn label_transforms_commute_with_square_symmetries(m in mask(12), d in 0u8..8) {
        let d = Dihedral(d);
        let moved = transformed(&m, d);
        let direct = extract_boundary(&moved);
        let carried = d.apply(extract_boundary(&m).mask().data(), m.height(), m.width());
        prop_assert_eq!(direct.mask().data(), carried.as_slice());
        let direct = compute_sdf(&moved);
        let carried = d.apply(compute_sdf(&m).data(), m.height(), m.width());
        for (a, b) in direct.data().iter().zip(carried) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_flips_sdf_sign_where_both_are_nonzero(m in mask(16)) {
        let a = compute_sdf(&m);
        let b = compute_sdf(&m.complement());
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x != 0.0 && *y != 0.0 {
                prop_assert!(x.signum() != y.signum());
            }
        }
    }

    #[test]
    fn overlap_metrics_agree(pair in (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        let bits = prop::collection::vec(0u8..2, h * w);
        (Just(h), Just(w), bits.clone(), bits)
    })) {
        let (h, w, p, t) = pair;
        let p = BinaryMask::new(h, w, p).unwrap();
        let t = BinaryMask::new(h, w, t).unwrap();
        let d = dice_score(&p, &t).unwrap();
        let j = jaccard_score(&p, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(j <= d + 1e-15);
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        prop_assert_eq!(d, dice_score(&t, &p).unwrap());
    }

    #[test]
    fn dice_loss_stays_in_unit_interval(
        logits in prop::collection::vec(-8.0f64..8.0, 2 * 2 * 4 * 4),
        target in prop::collection::vec(0u8..2, 2 * 4 * 4),
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2, 4, 4], logits));
        let t = Tensor::new(&[2, 1, 4, 4], target.into_iter().map(f64::from).collect());
        let l = dice_loss(x, &t, 1.0).item();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn lambda_ramp_is_monotone_and_capped(max in 0.0f64..10.0, ramp in 0usize..50, e in 0usize..100) {
        let a = lambda_schedule(e, max, ramp);
        let b = lambda_schedule(e + 1, max, ramp);
        prop_assert!(a <= b && b <= max);
        if e >= ramp {
            prop_assert_eq!(a, max);
        }
    }

    #[test]
    fn split_partitions_the_train_pool(
        n in 2usize..200,
        ratio in 0.05f64..1.0,
        fold in 0usize..3,
        seed in any::<u64>(),
    ) {
        let spec = SplitSpec { labeled_ratio: ratio, fold, n_folds: 3, seed };
        match split(n, &spec) {
            Ok(p) => {
                prop_assert_eq!(p.labeled.len(), labeled_count(n, ratio));
                let mut all: Vec<usize> = p.labeled.iter().chain(&p.unlabeled).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(split(n, &spec).unwrap(), p);
            }
            Err(_) => prop_assert_eq!(labeled_count(n, ratio), 0),
        }
    }

    #[test]
    fn config_survives_a_toml_round_trip(lr in 1e-4f64..1.0, gamma in 0.01f64..2.0, seed in any::<u32>()) {
        let cfg = TrainConfig { lr, gamma, seed: seed.into(), ..TrainConfig::default() };
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }
}
