use anchor_edit::attention::{scaled_dot_product, LeakOutcome, Matrix};
use anchor_edit::edit::{derive_mask_set, EditTransform};
use anchor_edit::mask::{Mask, ResamplePolicy};
use anchor_edit::sampler::blend_step;
use anchor_edit::schedule::{fdp, rgp_predict_x0, NoiseSchedule, ScheduleConfig};
use anchor_edit::LatentGrid;
use proptest::prelude::*;

fn mask_strategy(max: usize) -> impl Strategy<Value = Mask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |d| Mask::from_vec(h, w, d).unwrap())
    })
}

fn grid(c: usize, h: usize, w: usize) -> impl Strategy<Value = LatentGrid> {
    prop::collection::vec(-3.0f64..3.0, c * h * w)
        .prop_map(move |d| LatentGrid::from_vec(c, h, w, d).unwrap())
}

proptest! {
    #[test]
    fn rgp_inverts_fdp(z0 in grid(2, 3, 3), eps in grid(2, 3, 3), steps in prop::sample::select(vec![8usize, 16, 50]), pick in 0.0f64..1.0) {
        let sched = NoiseSchedule::build(&ScheduleConfig::with_steps(steps)).unwrap();
        let t = 1 + ((pick * steps as f64) as usize).min(steps - 1);
        let z_t = fdp(&z0, &eps, t, &sched).unwrap();
        let back = rgp_predict_x0(&z_t, &eps, t, &sched).unwrap();
        let err = back.sub(&z0).unwrap().max_abs() / z0.max_abs().max(1e-3);
        prop_assert!(err < 1e-6, "relative error {err} at t={t}/{steps}");
    }

    #[test]
    fn fdp_is_affine(a in grid(1, 2, 2), b in grid(1, 2, 2), eps in grid(1, 2, 2), lam in -2.0f64..2.0) {
        let sched = NoiseSchedule::build(&ScheduleConfig::with_steps(16)).unwrap();
        let ab = sched.alpha_bar(5).unwrap();
        let mix = a.scale(lam).add(&b.scale(1.0 - lam)).unwrap();
        let lhs = fdp(&mix, &eps, 5, &sched).unwrap();
        let rhs = fdp(&a, &eps, 5, &sched).unwrap().scale(lam)
            .add(&fdp(&b, &eps, 5, &sched).unwrap().scale(1.0 - lam)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-9 * (1.0 + ab));
    }

    #[test]
    fn mask_algebra(a in mask_strategy(8), seed in any::<u64>()) {
        let (h, w) = a.dims();
        let b = Mask::from_fn(h, w, |y, x| (seed >> ((y * w + x) % 64)) & 1 == 1);
        prop_assert_eq!(a.union(&b).complement(), a.complement().intersect(&b.complement()));
        prop_assert!(a.minus(&b).is_disjoint(&b));
        prop_assert_eq!(a.minus(&b).union(&a.intersect(&b)), a.clone());
        prop_assert!(a.is_subset_of(&a.dilate(1)));
        prop_assert_eq!(a.union(&b).count() + a.intersect(&b).count(), a.count() + b.count());
    }

    #[test]
    fn shifts_compose(m in mask_strategy(8), dx1 in -3i64..4, dy1 in -3i64..4, dx2 in -3i64..4, dy2 in -3i64..4) {
        // composition agrees wherever nothing left the frame in between
        let two = m.shift(dx1, dy1).shift(dx2, dy2);
        let one = m.shift(dx1 + dx2, dy1 + dy2);
        prop_assert!(two.is_subset_of(&one));
        if m.shift(dx1, dy1).count() == m.count() {
            prop_assert_eq!(two, one);
        }
    }

    #[test]
    fn resample_is_monotone(a in mask_strategy(8), extra in mask_strategy(8), th in 1usize..6, tw in 1usize..6) {
        let (h, w) = a.dims();
        let b = a.union(&extra.resample(h, w, ResamplePolicy::Nearest));
        for policy in [ResamplePolicy::Nearest, ResamplePolicy::AnyOverlap] {
            prop_assert!(a.resample(th, tw, policy).is_subset_of(&b.resample(th, tw, policy)));
        }
        prop_assert!(a.resample(th, tw, ResamplePolicy::Nearest)
            .is_subset_of(&a.resample(th, tw, ResamplePolicy::AnyOverlap)));
    }

    #[test]
    fn region_masks_are_consistent(m in mask_strategy(8), dx in -4i64..5, dy in -4i64..5) {
        prop_assume!(!m.is_empty());
        if let Ok(set) = derive_mask_set(&m, &EditTransform::translate(dx, dy), None) {
            prop_assert!(set.m_ipt.is_subset_of(&set.m_old));
            prop_assert!(set.m_ipt.is_disjoint(&set.m_new));
            prop_assert!(set.m_sim.is_disjoint(&set.object_union()));
            prop_assert_eq!(set.m_new.clone(), m.shift(dx, dy));
        }
    }

    #[test]
    fn hard_blend_keeps_anchor_inside_the_mask(man in grid(2, 4, 4), tgt in grid(2, 4, 4), mh in grid(2, 4, 4), bits in prop::collection::vec(any::<bool>(), 16), t in 3usize..20) {
        let m = Mask::from_vec(4, 4, bits).unwrap();
        let keep = m.complement().to_soft();
        let out = blend_step(&man, &tgt, &mh, &keep, t, 2).unwrap();
        for c in 0..2 {
            for (y, x) in m.iter_set() {
                prop_assert_eq!(out.get(c, y, x).to_bits(), man.get(c, y, x).to_bits());
            }
        }
    }

    #[test]
    fn leak_masked_columns_get_zero_weight(bits in any::<u16>(), s in prop::collection::vec(-4.0f64..4.0, 64)) {
        let q = Matrix::from_vec(4, 4, s[..16].to_vec()).unwrap();
        let k = Matrix::from_vec(16, 4, s[..64].to_vec()).unwrap();
        let v = Matrix::from_fn(16, 2, |r, c| (r * 2 + c) as f64);
        let mask: Vec<bool> = (0..16).map(|i| bits >> i & 1 == 1).collect();
        let f = scaled_dot_product(&q, &k, &v, Some(&mask), 0.95).unwrap();
        if bits == u16::MAX {
            prop_assert!(matches!(f.leak, LeakOutcome::Skipped { .. }), "leak outcome: {:?}", f.leak);
        } else {
            for r in 0..4 {
                let row = f.probs.row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (j, &m) in mask.iter().enumerate() {
                    if m {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }
}
