use hmanet_core::metrics::ConfusionMatrix;
use proptest::prelude::*;

fn labels(k: usize, n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
}

proptest! {
    #[test]
    fn pixel_order_does_not_matter((pred, truth) in labels(5, 64), rot in 0usize..64) {
        let mut a = ConfusionMatrix::new(5);
        a.accumulate(&pred, &truth).unwrap();
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        p2.rotate_left(rot);
        t2.rotate_left(rot);
        p2.reverse();
        t2.reverse();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate(&p2, &t2).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn merging_is_associative_and_matches_one_pass(
        (p1, t1) in labels(4, 30), (p2, t2) in labels(4, 17), (p3, t3) in labels(4, 9),
    ) {
        let cm = |p: &[usize], t: &[usize]| {
            let mut m = ConfusionMatrix::new(4);
            m.accumulate(p, t).unwrap();
            m
        };
        let (a, b, c) = (cm(&p1, &t1), cm(&p2, &t2), cm(&p3, &t3));
        let mut left = a.clone();
        left.merge(&b).unwrap();
        left.merge(&c).unwrap();
        let mut bc = b.clone();
        bc.merge(&c).unwrap();
        let mut right = a.clone();
        right.merge(&bc).unwrap();
        prop_assert_eq!(&left, &right);
        let all = cm(&[p1, p2, p3].concat(), &[t1, t2, t3].concat());
        prop_assert_eq!(left, all);
    }

    #[test]
    fn f1_is_a_function_of_iou((pred, truth) in labels(6, 100)) {
        let mut m = ConfusionMatrix::new(6);
        m.accumulate(&pred, &truth).unwrap();
        for k in 0..6 {
            let (f, i) = (m.f1(k), m.iou(k));
            prop_assert_eq!(f.absent, i.absent);
            if !i.absent {
                prop_assert!((f.value - 2.0 * i.value / (1.0 + i.value)).abs() <= 1e-12);
            }
        }
    }
}
