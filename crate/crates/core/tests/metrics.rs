mod common;

use common::*;
use proptest::prelude::*;
use tumorseg::loss::{bce_clipped, dice_loss, total_loss, BceReduction};
use tumorseg::metrics::{
    dice_coef, hd95, hd95_with, labels_to_regions, score, sensitivity, squared_edt, BinaryMask, ConfusionCounts, Hd95Mode,
};
use tumorseg::{Rng, Tape, Tensor};

fn mask(shape: &[usize], on: &[usize]) -> BinaryMask {
    BinaryMask::from_fn(shape, |i| on.contains(&i))
}

fn random_mask(shape: &[usize], density: f64, rng: &mut Rng) -> BinaryMask {
    BinaryMask::from_fn(shape, |_| rng.uniform() < density)
}

fn coords(m: &BinaryMask) -> Vec<Vec<usize>> {
    let shape = m.shape();
    (0..m.data().len())
        .filter(|&i| m.data()[i])
        .map(|mut i| {
            let mut c = vec![0; shape.len()];
            for d in (0..shape.len()).rev() {
                c[d] = i % shape[d];
                i /= shape[d];
            }
            c
        })
        .collect()
}

/// Every pair of foreground points, then the nearest-rank 95th percentile of each direction.
fn hd95_oracle(a: &BinaryMask, b: &BinaryMask, pooled: bool) -> Option<f64> {
    let (pa, pb) = (coords(a), coords(b));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return Some(0.0),
        (false, false) => {}
        _ => return None,
    }
    let directed = |from: &[Vec<usize>], to: &[Vec<usize>]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| p.iter().zip(q).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let p95 = |mut v: Vec<f64>| {
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = ((95 * v.len()) as f64 / 100.0).ceil() as usize;
        v[rank.max(1) - 1]
    };
    let (ab, ba) = (directed(&pb, &pa), directed(&pa, &pb));
    Some(if pooled { p95([ab, ba].concat()) } else { p95(ab).max(p95(ba)) })
}

fn scalar(tape: &Tape<f64>, v: tumorseg::Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn bce(pred: &[f64], target: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
    let l = bce_clipped(&mut tape, p, &Tensor::new(vec![target.len()], target.to_vec()).unwrap()).unwrap();
    scalar(&tape, l)
}

fn dice(pred: &[f64], target: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
    let l = dice_loss(&mut tape, p, &Tensor::new(vec![target.len()], target.to_vec()).unwrap()).unwrap();
    scalar(&tape, l)
}

#[test]
fn bce_examples() {
    assert_eq!(bce(&[1.0], &[0.0]), 100.0);
    assert_eq!(bce(&[0.0], &[1.0]), 100.0);
    assert_eq!(bce(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]), 0.0);
    assert!((bce(&[(-1.0f64).exp()], &[1.0]) - 1.0).abs() < 1e-15);
    assert!(bce(&[0.0, 1.0, 0.5, 1e-300], &[1.0, 0.0, 1.0, 1.0]).is_finite());
}

#[test]
fn bce_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(bce_clipped(&mut tape, p, &Tensor::zeros(&[4])), Err(tumorseg::Error::Dimension { .. })));
    assert!(matches!(dice_loss(&mut tape, p, &Tensor::zeros(&[2, 3])), Err(tumorseg::Error::Dimension { .. })));
}

#[test]
fn dice_loss_examples() {
    let t = [1.0, 0.0, 1.0, 1.0];
    assert!(dice(&t, &t) < 1e-5);
    assert!(dice(&[0.0, 1.0, 0.0, 0.0], &t) > 1.0 - 1e-5);
    assert!(dice(&[0.0; 4], &[0.0; 4]).abs() < 1e-12);
    let n = 12;
    let half = dice(&vec![0.5; n], &vec![1.0; n]);
    let want = 1.0 - (n as f64 + 1e-6) / (n as f64 * 1.25 + 1e-6);
    assert!((half - want).abs() < 1e-15);
    assert!((half - 0.2).abs() < 1e-6);
}

fn toy() -> ([Tensor<f64>; 3], [Tensor<f64>; 3]) {
    let mut rng = Rng::new(1);
    let preds = [0, 1, 2].map(|_| Tensor::from_fn(&[2, 2], |_| rng.uniform_in(0.05, 0.95)));
    let targets = [0, 1, 2].map(|_| Tensor::from_fn(&[2, 2], |_| (rng.uniform() < 0.5) as u8 as f64));
    (preds, targets)
}

#[test]
fn total_is_the_sum_of_six_terms() {
    let (preds, targets) = toy();
    for reduction in [BceReduction::Sum, BceReduction::Mean] {
        let mut tape = Tape::new();
        let p = preds.clone().map(|t| tape.constant(t));
        let terms = total_loss(&mut tape, &p, &targets, reduction).unwrap();
        let mut sum = 0.0;
        for r in 0..3 {
            let mut b = bce(preds[r].data(), targets[r].data());
            if reduction == BceReduction::Mean {
                b *= 1.0 / 4.0;
            }
            let d = dice(preds[r].data(), targets[r].data());
            assert_eq!(scalar(&tape, terms.bce[r]), b);
            assert_eq!(scalar(&tape, terms.dice[r]), d);
            sum += b + d;
        }
        assert_eq!(scalar(&tape, terms.total), sum);
    }
}

#[test]
fn perfect_predictions_have_near_zero_total() {
    let (_, targets) = toy();
    let mut tape = Tape::new();
    let p = targets.clone().map(|t| tape.constant(t));
    let terms = total_loss(&mut tape, &p, &targets, BceReduction::Sum).unwrap();
    assert!(scalar(&tape, terms.total) < 3e-5);
}

#[test]
fn total_loss_gradient() {
    let (preds, targets) = toy();
    let err = check_gradients(&preds, 1e-6, |tape, v| {
        let terms = total_loss(tape, &[v[0], v[1], v[2]], &targets, BceReduction::Sum).unwrap();
        terms.total
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn dice_and_sensitivity_examples() {
    let s = [2, 2];
    let a = mask(&s, &[0, 3]);
    assert_eq!(dice_coef(&a, &a).unwrap(), 1.0);
    assert_eq!(dice_coef(&BinaryMask::empty(&s), &BinaryMask::empty(&s)).unwrap(), 1.0);
    assert_eq!(dice_coef(&BinaryMask::empty(&s), &a).unwrap(), 0.0);
    assert_eq!(dice_coef(&mask(&s, &[0]), &a).unwrap(), 2.0 / 3.0);

    let t = mask(&[8], &[0, 1, 2, 3]);
    assert_eq!(sensitivity(&mask(&[8], &[0, 1, 2, 5, 6]), &t).unwrap(), 0.75);
    assert_eq!(sensitivity(&mask(&[8], &[0, 1, 2, 3, 7]), &t).unwrap(), 1.0);
    assert_eq!(sensitivity(&t, &BinaryMask::empty(&[8])).unwrap(), 1.0);

    let c = ConfusionCounts::new(&mask(&[8], &[0, 1, 2, 5, 6]), &t).unwrap();
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (3, 2, 2, 1));
    assert_eq!(c.total(), 8);
    assert!(dice_coef(&a, &t).is_err());
}

#[test]
fn thresholding_is_strict() {
    let p = Tensor::new(vec![4], vec![0.5, 0.5000001, 0.9, 0.1]).unwrap();
    assert_eq!(BinaryMask::from_probs(&p).data(), &[false, true, true, false]);
}

#[test]
fn hd95_examples() {
    let s = [5, 5];
    let a = mask(&s, &[0]);
    let b = mask(&s, &[3 * 5 + 4]);
    assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
    assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
    let e = BinaryMask::empty(&s);
    assert_eq!(hd95(&e, &e).unwrap(), Some(0.0));
    assert_eq!(hd95(&e, &a).unwrap(), None);
    assert_eq!(hd95(&a, &e).unwrap(), None);
    let r = score(&e, &a, Hd95Mode::Directed).unwrap();
    assert_eq!((r.dice, r.hd95, r.sensitivity), (0.0, None, 0.0));
}

#[test]
fn edt_matches_brute_force() {
    let mut rng = Rng::new(2);
    for shape in [vec![7, 9], vec![3, 4, 5], vec![1, 6]] {
        let m = random_mask(&shape, 0.15, &mut rng);
        let pts = coords(&m);
        let all = coords(&BinaryMask::from_fn(&shape, |_| true));
        let edt = squared_edt(&m);
        for (i, p) in all.iter().enumerate() {
            let want = pts
                .iter()
                .map(|q| p.iter().zip(q).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(edt[i], want, "{shape:?} at {p:?}");
        }
    }
}

#[test]
fn hd95_matches_all_pairs_oracle_on_100_pairs() {
    let mut rng = Rng::new(3);
    for case in 0..100 {
        let (h, w) = (rng.int_in(1, 33), rng.int_in(1, 33));
        let (da, db) = (rng.uniform_in(0.0, 0.4), rng.uniform_in(0.0, 0.4));
        let a = random_mask(&[h, w], da, &mut rng);
        let b = random_mask(&[h, w], db, &mut rng);
        assert_eq!(hd95(&a, &b).unwrap(), hd95_oracle(&a, &b, false), "case {case}");
        assert_eq!(hd95_with(&a, &b, Hd95Mode::Pooled).unwrap(), hd95_oracle(&a, &b, true), "case {case}");
    }
}

#[test]
fn hd95_volumes_match_oracle() {
    let mut rng = Rng::new(4);
    for _ in 0..10 {
        let a = random_mask(&[3, 8, 8], 0.1, &mut rng);
        let b = random_mask(&[3, 8, 8], 0.1, &mut rng);
        assert_eq!(hd95(&a, &b).unwrap(), hd95_oracle(&a, &b, false));
    }
}

#[test]
fn region_table() {
    let regions = labels_to_regions(&[0, 1, 2, 4], &[4]).unwrap();
    let rows: Vec<[bool; 3]> = (0..4).map(|i| [0, 1, 2].map(|r| regions[r].data()[i])).collect();
    assert_eq!(rows, vec![[false, false, false], [true, true, false], [true, false, false], [true, true, true]]);
    let zeros = labels_to_regions(&[0; 6], &[2, 3]).unwrap();
    assert!(zeros.iter().all(|m| m.is_empty() && m.shape() == [2, 3]));
    let err = labels_to_regions(&[0, 3], &[2]).unwrap_err();
    assert!(matches!(err, tumorseg::Error::Input(_)));
    assert!(err.to_string().contains('3'));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regions_nest(labels in proptest::collection::vec(proptest::sample::select(vec![0u8, 1, 2, 4]), 1..200)) {
        let n = labels.len();
        let [wt, tc, et] = labels_to_regions(&labels, &[n]).unwrap();
        prop_assert!(et.is_subset_of(&tc) && tc.is_subset_of(&wt));
    }

    #[test]
    fn hd95_is_symmetric(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let a = random_mask(&[12, 10], 0.2, &mut rng);
        let b = random_mask(&[12, 10], 0.2, &mut rng);
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }

    #[test]
    fn dice_loss_is_one_minus_dice_on_binary_masks(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let a = random_mask(&[6, 6], 0.4, &mut rng);
        let b = random_mask(&[6, 6], 0.4, &mut rng);
        let loss = dice(a.to_tensor::<f64>().data(), b.to_tensor::<f64>().data());
        prop_assert!((loss - (1.0 - dice_coef(&a, &b).unwrap())).abs() < 1e-5);
    }

    #[test]
    fn bce_is_finite_on_the_closed_interval(p in proptest::collection::vec(0.0f64..=1.0, 8), seed in 0u64..100) {
        let mut rng = Rng::new(seed);
        let y: Vec<f64> = (0..8).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
        let v = bce(&p, &y);
        prop_assert!(v.is_finite() && v >= 0.0);
    }
}
