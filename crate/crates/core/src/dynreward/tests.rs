use proptest::prelude::*;

use super::*;
use crate::gridworld::{render, Cell, Color, Pos, SymbolicState};

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return 0.0;
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        return brute_force(&t);
    }
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

#[test]
fn blur_preserves_constants_and_reproduces_the_kernel() {
    let (w, h) = (9, 7);
    let c = gaussian_blur(&vec![0.3; w * h], w, h, 1.0, 5).unwrap();
    assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
    let mut imp = vec![0.0; w * h];
    imp[3 * w + 4] = 1.0;
    let out = gaussian_blur(&imp, w, h, 1.0, 5).unwrap();
    let k = gaussian_kernel(1.0, 5).unwrap();
    for dy in 0..5 {
        for dx in 0..5 {
            let v = out[(1 + dy) * w + 2 + dx];
            assert!((v - k[dy] * k[dx]).abs() < 1e-15);
        }
    }
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn bad_kernels_are_rejected() {
    assert!(matches!(gaussian_blur(&[0.0; 4], 2, 2, 1.0, 4), Err(Error::BadKernel(_))));
    assert!(matches!(gaussian_blur(&[0.0; 4], 2, 2, 0.0, 5), Err(Error::BadKernel(_))));
}

proptest! {
    #[test]
    fn blur_is_linear(a in prop::collection::vec(0.0f64..1.0, 48), b in prop::collection::vec(0.0f64..1.0, 48)) {
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ba = gaussian_blur(&a, 8, 6, 1.0, 5).unwrap();
        let bb = gaussian_blur(&b, 8, 6, 1.0, 5).unwrap();
        let bs = gaussian_blur(&sum, 8, 6, 1.0, 5).unwrap();
        for i in 0..48 {
            prop_assert!((bs[i] - ba[i] - bb[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_matches_brute_force(n in 0usize..6, m in 0usize..7, seed in any::<u64>(), ints in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| if ints { rng.gen_range(0..4) as f64 } else { rng.gen_range(-1.0..1.0) }).collect())
            .collect();
        let a = hungarian(&cost).unwrap();
        prop_assert_eq!(a.pairs().len(), n.min(m));
        prop_assert_eq!(a.cost, brute_force(&cost));
    }
}

#[test]
fn hungarian_examples() {
    let a = hungarian(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
    assert_eq!(a.pairs(), vec![(0, 1), (1, 0)]);
    assert_eq!(a.cost, 4.0);
    let d: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 0.0 } else { 5.0 }).collect()).collect();
    assert_eq!(hungarian(&d).unwrap().pairs(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    assert!(matches!(hungarian(&[vec![f64::NAN]]), Err(Error::NonFinite(_))));
    // rectangular both ways
    let r = hungarian(&[vec![3.0, 1.0, 2.0]]).unwrap();
    assert_eq!(r.pairs(), vec![(0, 1)]);
    let c = hungarian(&[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
    assert_eq!(c.pairs(), vec![(1, 0)]);
}

#[test]
fn iou_examples() {
    let b = BBox::new(0, 0, 4, 4);
    assert_eq!(iou(&b, &b), 1.0);
    assert_eq!(iou(&b, &BBox::new(4, 0, 8, 4)), 0.0);
    let o = BBox::new(2, 0, 6, 4);
    assert!((iou(&b, &o) - 1.0 / 3.0).abs() < 1e-15);
    // pixel-membership brute force
    let inter = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).filter(|&(y, x)| b.contains(y, x) && o.contains(y, x)).count();
    let uni = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).filter(|&(y, x)| b.contains(y, x) || o.contains(y, x)).count();
    assert_eq!((inter, uni), (8, 24));
}

#[test]
fn nms_examples() {
    let a = BBox::new(0, 0, 4, 4);
    let b = BBox::new(10, 10, 12, 12);
    assert_eq!(nms(&[a, b], 0.5).len(), 2);
    assert_eq!(nms(&[a, a], 0.5), vec![a]);
    let big = BBox::new(0, 0, 10, 10);
    let small = BBox::new(1, 1, 9, 9);
    assert!((iou(&big, &small) - 0.64).abs() < 1e-12);
    assert_eq!(nms(&[small, big], 0.5), vec![big]);
}

fn state_with(blocks: &[(usize, usize, Color)]) -> SymbolicState {
    let mut s = SymbolicState::empty();
    for &(r, c, col) in blocks {
        s.set(Pos::new(r, c), Cell::Block(col));
    }
    s
}

fn changed_pixels(a: &Raster, b: &Raster) -> Vec<(usize, usize)> {
    let mask = change_mask(a, b, &RewardParams::default()).unwrap();
    (0..a.height).flat_map(|y| (0..a.width).map(move |x| (y, x))).filter(|&(y, x)| mask[y * a.width + x]).collect()
}

#[test]
fn identical_frames_have_no_regions() {
    let r = render(&state_with(&[(2, 3, Color::Red)]));
    assert!(detect_regions(&r, &r, &RewardParams::default()).unwrap().is_empty());
}

#[test]
fn distant_move_gives_two_covering_boxes() {
    let a = render(&state_with(&[(1, 1, Color::Blue)]));
    let b = render(&state_with(&[(6, 5, Color::Blue)]));
    let boxes = detect_regions(&a, &b, &RewardParams::default()).unwrap();
    assert_eq!(boxes.len(), 2);
    // each box holds its cell's block pixels
    assert!(boxes[0].x0 <= 9 && boxes[0].y0 <= 9 && boxes[0].x1 >= 15 && boxes[0].y1 >= 15);
    assert!(boxes[1].x0 <= 41 && boxes[1].y0 <= 49 && boxes[1].x1 >= 47 && boxes[1].y1 >= 55);
    for (y, x) in changed_pixels(&a, &b) {
        assert!(boxes.iter().any(|bx| bx.contains(y, x)));
    }
}

#[test]
fn adjacent_move_is_covered() {
    let a = render(&state_with(&[(3, 3, Color::Green)]));
    let b = render(&state_with(&[(3, 4, Color::Green)]));
    let boxes = detect_regions(&a, &b, &RewardParams::default()).unwrap();
    assert!((1..=2).contains(&boxes.len()));
    for (y, x) in changed_pixels(&a, &b) {
        assert!(boxes.iter().any(|bx| bx.contains(y, x)));
    }
}

#[test]
fn perfect_generation_scores_one_and_no_change_scores_zero() {
    let p = RewardParams::default();
    let a = render(&state_with(&[(1, 1, Color::Blue), (4, 4, Color::Red)]));
    let b = render(&state_with(&[(6, 5, Color::Blue), (4, 4, Color::Red)]));
    assert_eq!(dynamic_reward(&a, &b, &b, &p).unwrap(), 1.0);
    assert_eq!(dynamic_reward(&a, &a, &a, &p).unwrap().to_bits(), 0.0f64.to_bits());
}

#[test]
fn one_spurious_region_costs_gamma() {
    let p = RewardParams::default();
    let x_t = render(&state_with(&[(1, 1, Color::Yellow)]));
    let x_real = render(&SymbolicState::empty());
    let x_gen = render(&state_with(&[(6, 6, Color::Purple)]));
    let rep = dynamic_reward_report(&x_t, &x_gen, &x_real, &p).unwrap();
    assert_eq!((rep.label_boxes.len(), rep.gen_boxes.len(), rep.matches.len()), (1, 2, 1));
    assert_eq!(rep.reward, (1.0 - 0.5) / 1.0);
    assert_eq!(combine(&[(1.0, 0.0)], 1, 2, &p), 0.5);
}

#[test]
fn missing_motion_is_penalized_per_region() {
    let p = RewardParams::default();
    let x_t = render(&state_with(&[(1, 1, Color::Yellow)]));
    let x_real = render(&state_with(&[(6, 6, Color::Yellow)]));
    assert_eq!(dynamic_reward(&x_t, &x_t, &x_real, &p).unwrap(), -0.5 * 2.0);
}

proptest! {
    #[test]
    fn combine_is_monotone(
        m in prop::collection::vec((0.3f64..1.0, 0.0f64..0.5), 0..4),
        extra in 0usize..3,
        which in 0usize..4,
        bump in 0.0f64..0.2,
    ) {
        let p = RewardParams::default();
        let (nl, ng) = (m.len() + extra, m.len() + 1);
        let base = combine(&m, nl, ng, &p);
        if !m.is_empty() {
            let i = which % m.len();
            let mut hi = m.clone();
            hi[i].0 = (hi[i].0 + bump).min(1.0);
            prop_assert!(combine(&hi, nl, ng, &p) >= base);
            let mut worse = m.clone();
            worse[i].1 += bump;
            prop_assert!(combine(&worse, nl, ng, &p) <= base);
        }
        // one more unmatched region with the denominator held fixed
        if nl >= ng {
            prop_assert!(combine(&m, nl + 1, ng, &p) <= base);
        }
    }

    #[test]
    fn matched_score_ignores_box_order(seed in any::<u64>()) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut boxes = || -> Vec<BBox> {
            (0..rng.gen_range(1..5)).map(|_| {
                let (x, y) = (rng.gen_range(0..50), rng.gen_range(0..50));
                BBox::new(x, y, x + rng.gen_range(2..14), y + rng.gen_range(2..14))
            }).collect()
        };
        let (a, b) = (boxes(), boxes());
        let score = |a: &[BBox], b: &[BBox]| -> f64 {
            let ious = pairwise_iou(a, b);
            let neg: Vec<Vec<f64>> = ious.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            -hungarian(&neg).unwrap().cost
        };
        let s0 = score(&a, &b);
        let (mut pa, mut pb) = (a.clone(), b.clone());
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        prop_assert!((score(&pa, &pb) - s0).abs() < 1e-12);
    }
}

#[test]
fn compressibility_orders_constant_before_noise() {
    use rand::{Rng, SeedableRng};
    let flat = Raster::filled(64, 64, [20, 20, 20]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let noise = Raster { width: 64, height: 64, data: (0..64 * 64 * 3).map(|_| rng.gen()).collect() };
    assert!(compressibility_reward(&flat, CompressSign::Compress) > compressibility_reward(&noise, CompressSign::Compress));
    assert!(compressibility_reward(&flat, CompressSign::Incompress) < compressibility_reward(&noise, CompressSign::Incompress));
    assert_eq!(compressibility_reward(&noise, CompressSign::Compress), compressibility_reward(&noise, CompressSign::Compress));
}

#[test]
fn mismatched_sizes_are_rejected() {
    let a = Raster::filled(4, 4, [0, 0, 0]);
    let b = Raster::filled(5, 4, [0, 0, 0]);
    assert!(matches!(detect_regions(&a, &b, &RewardParams::default()), Err(Error::DimensionMismatch(_))));
    assert!(matches!(dynamic_reward(&a, &a, &b, &RewardParams::default()), Err(Error::DimensionMismatch(_))));
}
