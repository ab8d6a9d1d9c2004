//! Property tests against brute-force oracles.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use spxtrack::classifiers::PosteriorField;
use spxtrack::features::{box_mean, features_at, FeatureBank, FeatureMatrix, IntegralStack};
use spxtrack::imaging::{Frame, RoiMask};
use spxtrack::matching::{
    match_by_soft_argmax, match_by_vote, match_fwbw, superpixel_posteriors, MatchField, SparseVec,
};
use spxtrack::metrics::{boundary, contour_f_measure, dice, fwbw_consistency};
use spxtrack::multistep::{
    compose_path, count_bounded, count_sequences, enumerate_bounded, enumerate_sequences, prune_and_sample,
    vote_superpixel, FieldMap, MsiStrategy, StepPlan, TimeDirection,
};
use spxtrack::slic::Segmentation;

fn frame_strategy() -> impl Strategy<Value = Frame> {
    (1usize..14, 1usize..14).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), w * h * 3).prop_map(move |data| Frame::new(w, h, data).unwrap())
    })
}

/// Random label map where every label in `0..k` occurs.
fn seg_strategy() -> impl Strategy<Value = Segmentation> {
    (2usize..10, 2usize..10, 1usize..8).prop_flat_map(|(w, h, k)| {
        let k = k.min(w * h);
        proptest::collection::vec(0..k as u32, w * h).prop_map(move |mut labels| {
            for (i, l) in labels.iter_mut().take(k).enumerate() {
                *l = i as u32;
            }
            Segmentation::from_labels(w, h, labels).unwrap()
        })
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (RoiMask, RoiMask)> {
    (1usize..max, 1usize..max).prop_flat_map(|(w, h)| {
        (proptest::collection::vec(any::<bool>(), w * h), proptest::collection::vec(any::<bool>(), w * h))
            .prop_map(move |(a, b)| (RoiMask::new(w, h, a).unwrap(), RoiMask::new(w, h, b).unwrap()))
    })
}

fn step_set() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(1usize..8, 1..4).prop_map(|s| s.into_iter().collect())
}

/// Sparse distribution over `0..classes`, entries sorted, summing to 1.
fn sparse_dist(classes: usize) -> impl Strategy<Value = SparseVec> {
    proptest::collection::btree_map(0..classes as u32, 1u32..100, 1..=classes).prop_map(|m| {
        let total: u32 = m.values().sum();
        m.into_iter().map(|(c, v)| (c, v as f64 / total as f64)).collect()
    })
}

fn plurality_oracle(items: &[u32]) -> u32 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in items {
        *counts.entry(t).or_default() += 1;
    }
    let top = *counts.values().max().unwrap();
    *counts.iter().find(|(_, &c)| c == top).unwrap().0
}

proptest! {
    #[test]
    fn box_mean_matches_nested_loop(
        frame in frame_strategy(),
        cx in -20i64..30,
        cy in -20i64..30,
        half in 0u32..6,
        c in 0usize..3,
    ) {
        let w = 2 * half + 1;
        let stack = IntegralStack::new(&frame);
        let (fw, fh) = (frame.width() as i64, frame.height() as i64);
        let (x, y) = (cx.clamp(0, fw - 1), cy.clamp(0, fh - 1));
        let (mut sum, mut n) = (0u64, 0u64);
        for yy in y - half as i64..=y + half as i64 {
            for xx in x - half as i64..=x + half as i64 {
                if xx >= 0 && yy >= 0 && xx < fw && yy < fh {
                    sum += frame.rgb(xx as usize, yy as usize)[c] as u64;
                    n += 1;
                }
            }
        }
        let got = box_mean(&stack, (cx, cy), w, c);
        prop_assert!((got - sum as f64 / n as f64).abs() < 1e-9);
    }

    #[test]
    fn feature_matrix_agrees_with_single_pixel_features(frame in frame_strategy(), seed in any::<u64>()) {
        let bank = FeatureBank::generate(seed, 9, 4, &[1, 3, 5]).unwrap();
        let matrix = FeatureMatrix::compute(&frame, &bank);
        let stack = IntegralStack::new(&frame);
        for p in 0..frame.pixel_count() {
            let row = features_at(&stack, (p % frame.width(), p / frame.width()), &bank);
            for (m, v) in row.iter().enumerate() {
                prop_assert_eq!(matrix.get(p, m), *v);
            }
        }
    }

    #[test]
    fn count_equals_enumeration(d in 0usize..22, steps in step_set(), max_len in 1usize..9) {
        let all = enumerate_sequences(d, &steps);
        prop_assert_eq!(all.len() as u128, count_sequences(d, &steps));
        let bounded = enumerate_bounded(d, &steps, max_len);
        prop_assert_eq!(bounded.len() as u128, count_bounded(d, &steps, max_len));
        let expected: Vec<_> = all.iter().filter(|s| s.len() <= max_len).cloned().collect();
        prop_assert_eq!(&bounded, &expected);
        // Depth-first with smaller steps first is lexicographic order.
        prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
        for s in &all {
            prop_assert_eq!(s.iter().sum::<usize>(), d);
            prop_assert!(s.iter().all(|a| steps.contains(a)));
        }
    }

    #[test]
    fn sampling_is_distinct_and_sized(
        d in 1usize..40,
        steps in step_set(),
        max_len in 1usize..10,
        budget in 1usize..60,
        seed in any::<u64>(),
    ) {
        let plan = StepPlan { steps: steps.clone(), max_len, budget, seed };
        let sample = prune_and_sample(d, &plan).unwrap();
        let total = count_bounded(d, &steps, max_len);
        prop_assert_eq!(sample.len() as u128, total.min(budget as u128));
        prop_assert!(sample.windows(2).all(|w| w[0] < w[1]), "distinct and in depth-first order");
        for s in &sample {
            prop_assert!(s.len() <= max_len);
            prop_assert_eq!(s.iter().sum::<usize>(), d);
            prop_assert!(s.iter().all(|a| steps.contains(a)));
        }
        prop_assert_eq!(prune_and_sample(d, &plan).unwrap(), sample);
    }

    #[test]
    fn vote_matches_plurality_oracle(seg in seg_strategy(), targets in 1usize..6, seed in any::<u64>()) {
        let mut rng = spxtrack::rng::SplitMix64::new(seed);
        let pixel_map: Vec<u32> = (0..seg.labels().len()).map(|_| rng.index(targets) as u32).collect();
        let field = match_by_vote(&pixel_map, &seg, targets).unwrap();
        for i in 0..seg.count() {
            let items: Vec<u32> = seg.members(i).iter().map(|&p| pixel_map[p as usize]).collect();
            prop_assert_eq!(field.get(i), plurality_oracle(&items) as usize);
        }
    }

    #[test]
    fn soft_argmax_equals_vote_on_one_hot_fields(seg in seg_strategy(), targets in 1usize..6, seed in any::<u64>()) {
        let mut rng = spxtrack::rng::SplitMix64::new(seed);
        let pixel_map: Vec<u32> = (0..seg.labels().len()).map(|_| rng.index(targets) as u32).collect();
        let one_hot = pixel_map.iter().map(|&t| vec![(t, 1.0)]).collect();
        let posterior = PosteriorField::from_pixels(seg.width(), seg.height(), targets, one_hot).unwrap();
        let soft = match_by_soft_argmax(superpixel_posteriors(&posterior, &seg).unwrap(), targets).unwrap();
        let vote = match_by_vote(&pixel_map, &seg, targets).unwrap();
        prop_assert_eq!(soft.map(), vote.map());
    }

    #[test]
    fn superpixel_posteriors_match_naive_loop(
        (seg, pixels) in seg_strategy().prop_flat_map(|seg| {
            let n = seg.labels().len();
            (Just(seg), proptest::collection::vec(sparse_dist(5), n))
        })
    ) {
        let field = PosteriorField::from_pixels(seg.width(), seg.height(), 5, pixels.clone()).unwrap();
        let got = superpixel_posteriors(&field, &seg).unwrap();
        let mut sums = vec![[0.0f64; 5]; seg.count()];
        let mut sizes = vec![0usize; seg.count()];
        for (p, &l) in seg.labels().iter().enumerate() {
            sizes[l as usize] += 1;
            for &(c, v) in &pixels[p] {
                sums[l as usize][c as usize] += v;
            }
        }
        for i in 0..seg.count() {
            let dense: Vec<f64> = (0..5u32)
                .map(|c| got[i].iter().find(|e| e.0 == c).map_or(0.0, |e| e.1))
                .collect();
            for c in 0..5 {
                prop_assert!((dense[c] - sums[i][c] / sizes[i] as f64).abs() < 1e-12);
            }
            let total: f64 = dense.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fwbw_is_invariant_to_power_of_two_scaling(
        (fw, bw) in (1usize..6, 1usize..6).prop_flat_map(|(s, t)| {
            (proptest::collection::vec(sparse_dist(t), s), proptest::collection::vec(sparse_dist(s), t))
        }),
        e1 in -6i32..6,
        e2 in -6i32..6,
    ) {
        let scale = |v: &[SparseVec], k: f64| -> Vec<SparseVec> {
            v.iter().map(|x| x.iter().map(|&(c, p)| (c, p * k)).collect()).collect()
        };
        let base = match_fwbw(&fw, &bw).unwrap();
        let scaled = match_fwbw(&scale(&fw, 2f64.powi(e1)), &scale(&bw, 2f64.powi(e2))).unwrap();
        prop_assert_eq!(base.map(), scaled.map());
        // Oracle: argmax of the dense product, forward argmax when it vanishes everywhere.
        for (i, v) in fw.iter().enumerate() {
            let product: Vec<(u32, f64)> = v
                .iter()
                .map(|&(n, p)| (n, p * bw[n as usize].iter().find(|e| e.0 == i as u32).map_or(0.0, |e| e.1)))
                .collect();
            let pick = |xs: &[(u32, f64)]| {
                let top = xs.iter().map(|e| e.1).fold(f64::MIN, f64::max);
                xs.iter().find(|e| e.1 == top).unwrap().0
            };
            let want = if product.iter().all(|e| e.1 == 0.0) { pick(v) } else { pick(&product) };
            prop_assert_eq!(base.get(i), want as usize);
        }
    }

    #[test]
    fn composition_is_associative(
        sizes in proptest::collection::vec(1usize..6, 6),
        seed in any::<u64>(),
        split in 1usize..4,
    ) {
        let mut rng = spxtrack::rng::SplitMix64::new(seed);
        let mut fields = FieldMap::new();
        for a in 0..6 {
            for b in 0..6 {
                if a != b {
                    let map = (0..sizes[a]).map(|_| rng.index(sizes[b]) as u32).collect();
                    fields.insert((a, b), MatchField::new(a, b, sizes[b], map).unwrap());
                }
            }
        }
        let seq = [1usize, 2, 1, 1];
        let (head, tail) = seq.split_at(split);
        let mid: usize = head.iter().sum();
        for (start, dir) in [(0usize, TimeDirection::Forward), (5, TimeDirection::Backward)] {
            let whole = compose_path(&fields, &seq, start, dir).unwrap();
            let hop = if dir == TimeDirection::Forward { start + mid } else { start - mid };
            let first = compose_path(&fields, head, start, dir).unwrap();
            let second = compose_path(&fields, tail, hop, dir).unwrap();
            let chained: Vec<u32> = first.map().iter().map(|&i| second.map()[i as usize]).collect();
            prop_assert_eq!(whole.map(), &chained[..]);
            prop_assert_eq!(whole.target_frame(), if dir == TimeDirection::Forward { 5 } else { 0 });
        }
    }

    #[test]
    fn mutual_vote_falls_back_iff_restriction_is_empty(
        direct in proptest::collection::vec(0u32..6, 1..12),
        reverse in proptest::collection::vec(0u32..6, 0..12),
    ) {
        let d: BTreeSet<u32> = direct.iter().copied().collect();
        let r: BTreeSet<u32> = reverse.iter().copied().collect();
        let both: Vec<u32> = direct.iter().chain(&reverse).copied().filter(|t| d.contains(t) && r.contains(t)).collect();
        let (t, fell_back) = vote_superpixel(&direct, &reverse, MsiStrategy::Mutual).unwrap();
        prop_assert_eq!(fell_back, both.is_empty());
        let all: Vec<u32> = direct.iter().chain(&reverse).copied().collect();
        prop_assert_eq!(t, plurality_oracle(if fell_back { &all } else { &both }));
        prop_assert_eq!(vote_superpixel(&direct, &reverse, MsiStrategy::Direct).unwrap(), (plurality_oracle(&direct), false));
        prop_assert_eq!(vote_superpixel(&direct, &reverse, MsiStrategy::Reverse).unwrap(), (plurality_oracle(&all), false));
        prop_assert_eq!(vote_superpixel(&[], &reverse, MsiStrategy::Mutual), None);
    }

    #[test]
    fn dice_and_contour_are_symmetric_and_bounded((x, y) in mask_pair(16), r in 0usize..4) {
        let a = dice(&x, &y).unwrap();
        prop_assert_eq!(a, dice(&y, &x).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        let xy = contour_f_measure(&x, &y, r).unwrap();
        let yx = contour_f_measure(&y, &x, r).unwrap();
        prop_assert_eq!(xy.precision, yx.recall);
        prop_assert_eq!(xy.recall, yx.precision);
        prop_assert!((xy.f_measure - yx.f_measure).abs() < 1e-15);
        for v in [xy.precision, xy.recall, xy.f_measure] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let wider = contour_f_measure(&x, &y, r + 1).unwrap();
        prop_assert!(wider.precision >= xy.precision && wider.recall >= xy.recall);
    }

    #[test]
    fn contour_matches_nearest_boundary_oracle((x, y) in mask_pair(14), r in 0usize..4) {
        let (bx, by) = (boundary(&x), boundary(&y));
        let points = |b: &RoiMask| -> Vec<(i64, i64)> {
            (0..b.height())
                .flat_map(|yy| (0..b.width()).map(move |xx| (xx, yy)))
                .filter(|&(xx, yy)| b.get(xx, yy))
                .map(|(xx, yy)| (xx as i64, yy as i64))
                .collect()
        };
        let (px, py) = (points(&bx), points(&by));
        let covered = |from: &[(i64, i64)], to: &[(i64, i64)]| {
            from.iter()
                .filter(|a| to.iter().any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= (r * r) as i64))
                .count()
        };
        let got = contour_f_measure(&x, &y, r).unwrap();
        if px.is_empty() || py.is_empty() {
            let v = if px.is_empty() && py.is_empty() { 1.0 } else { 0.0 };
            prop_assert_eq!((got.precision, got.recall, got.f_measure), (v, v, v));
        } else {
            prop_assert_eq!(got.precision, covered(&px, &py) as f64 / px.len() as f64);
            prop_assert_eq!(got.recall, covered(&py, &px) as f64 / py.len() as f64);
        }
    }

    #[test]
    fn consistency_matches_per_pixel_oracle(
        (seg, roi, fw, bw) in seg_strategy().prop_flat_map(|seg| {
            let n = seg.labels().len();
            let k = seg.count();
            (
                Just(seg),
                proptest::collection::vec(any::<bool>(), n),
                (1usize..6).prop_flat_map(move |t| {
                    (proptest::collection::vec(0..t as u32, k), proptest::collection::vec(0..k as u32, t))
                }),
            )
                .prop_map(|(seg, roi, (fw, bw))| (seg, roi, fw, bw))
        })
    ) {
        let (w, h, k) = (seg.width(), seg.height(), seg.count());
        let targets = bw.len();
        let mask = RoiMask::new(w, h, roi.clone()).unwrap();
        let f = MatchField::new(0, 1, targets, fw.clone()).unwrap();
        let b = MatchField::new(1, 0, k, bw.clone()).unwrap();
        let got = fwbw_consistency(&mask, &seg, &f, &b).unwrap();
        let (mut num, mut den) = (0, 0);
        for (p, &inside) in roi.iter().enumerate() {
            if inside {
                den += 1;
                let s = seg.labels()[p];
                if bw[fw[s as usize] as usize] == s {
                    num += 1;
                }
            }
        }
        let want = if den == 0 { 100.0 } else { 100.0 * num as f64 / den as f64 };
        prop_assert_eq!(got, want);
        prop_assert!((0.0..=100.0).contains(&got));
    }
}
