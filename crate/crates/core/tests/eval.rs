use polite_teacher::data::{BBox, BinaryMask, CategoryMap, ImageRecord, InstanceAnnotation};
use polite_teacher::eval::{average_precision, box_iou, evaluate_predictions, iou_thresholds, mask_iou, Scored};
use polite_teacher::model::InstancePrediction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A fixture: per image, a matrix of prediction × ground-truth IoUs.
#[derive(Clone, Debug)]
struct Fixture {
    gts: Vec<usize>,
    preds: Vec<(usize, f64, Vec<f64>)>,
}

/// Direct enumeration of the precision/recall curve: for every cutoff `k`,
/// greedily match the top-`k` predictions from scratch; interpolated precision
/// at recall `r` is the best precision of any cutoff reaching `r`.
fn brute_force_ap(f: &Fixture, thr: f64) -> f64 {
    let n_gt: usize = f.gts.iter().sum();
    let mut order: Vec<usize> = (0..f.preds.len()).collect();
    order.sort_by(|&a, &b| {
        f.preds[b]
            .1
            .partial_cmp(&f.preds[a].1)
            .unwrap()
            .then(f.preds[a].0.cmp(&f.preds[b].0))
            .then(a.cmp(&b))
    });
    let mut points = Vec::new();
    for k in 1..=order.len() {
        let mut used: Vec<Vec<bool>> = f.gts.iter().map(|&n| vec![false; n]).collect();
        let mut tp = 0;
        for &p in &order[..k] {
            let (img, _, ious) = &f.preds[p];
            let mut best: Option<usize> = None;
            for j in 0..ious.len() {
                if !used[*img][j] && ious[j] >= thr && best.is_none_or(|b| ious[j] > ious[b]) {
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[*img][j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn ap_under_test(f: &Fixture, thr: f64) -> f64 {
    let scored: Vec<Scored<(usize, Vec<f64>)>> = f
        .preds
        .iter()
        .enumerate()
        .map(|(id, (img, s, ious))| Scored {
            image: *img,
            id,
            score: *s,
            item: (id, ious.clone()),
        })
        .collect();
    let gts: Vec<Vec<usize>> = f.gts.iter().map(|&n| (0..n).collect()).collect();
    average_precision(&scored, &gts, thr, |p, g| p.1[*g]).unwrap()
}

fn random_fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let images = rng.random_range(1..=2);
    let mut gts = vec![0; images];
    let total_gt = rng.random_range(1..=3);
    for _ in 0..total_gt {
        gts[rng.random_range(0..images)] += 1;
    }
    let levels = [0.0, 0.3, 0.5, 0.55, 0.7, 0.9, 1.0];
    let scores = [0.9, 0.8, 0.8, 0.7, 0.5, 0.3];
    let n = rng.random_range(0..=5);
    let preds = (0..n)
        .map(|_| {
            let img = rng.random_range(0..images);
            let ious = (0..gts[img]).map(|_| levels[rng.random_range(0..levels.len())]).collect();
            (img, scores[rng.random_range(0..scores.len())], ious)
        })
        .collect();
    Fixture { gts, preds }
}

#[test]
fn ap_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3000 {
        let f = random_fixture(&mut rng);
        for thr in [0.5, 0.75, 0.95] {
            let got = ap_under_test(&f, thr);
            let want = brute_force_ap(&f, thr);
            assert!((got - want).abs() < 1e-12, "{f:?} at {thr}: {got} vs {want}");
        }
    }
}

#[test]
fn ap_two_gts_three_predictions() {
    // the 0.9 and 0.7 predictions match, the 0.8 one does not
    let f = Fixture {
        gts: vec![2],
        preds: vec![
            (0, 0.9, vec![0.8, 0.0]),
            (0, 0.8, vec![0.1, 0.2]),
            (0, 0.7, vec![0.0, 0.9]),
        ],
    };
    let got = ap_under_test(&f, 0.5);
    assert!((got - brute_force_ap(&f, 0.5)).abs() < 1e-12);
    // recall 0.5 at precision 1, recall 1 at precision 2/3
    let hand = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((got - hand).abs() < 1e-12);
}

#[test]
fn ap_trivial_cases() {
    let one = Fixture { gts: vec![1], preds: vec![(0, 1.0, vec![1.0])] };
    assert_eq!(ap_under_test(&one, 0.95), 1.0);
    let none = Fixture { gts: vec![1], preds: vec![] };
    assert_eq!(ap_under_test(&none, 0.5), 0.0);
    let empty: Vec<Scored<()>> = Vec::new();
    assert!(average_precision(&empty, &[Vec::<()>::new()], 0.5, |_, _| 0.0).is_none());
}

#[test]
fn ap_is_invariant_to_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let f = random_fixture(&mut rng);
        let base = ap_under_test(&f, 0.5);
        let mut g = f.clone();
        g.preds.reverse();
        // ids follow input order, so ties may reorder; compare with the oracle instead
        assert!((ap_under_test(&g, 0.5) - brute_force_ap(&g, 0.5)).abs() < 1e-12);
        let distinct: Vec<f64> = f.preds.iter().map(|p| p.1).collect();
        let mut sorted = distinct.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() == distinct.len() {
            assert_eq!(ap_under_test(&g, 0.5), base);
        }
    }
}

#[test]
fn iou_examples() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(box_iou(&a, &a), 1.0);
    assert_eq!(box_iou(&a, &BBox::new(3.0, 3.0, 4.0, 4.0)), 0.0);
    assert!((box_iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);

    let mut m1 = BinaryMask::empty(4, 4);
    let mut m2 = BinaryMask::empty(4, 4);
    for (x, y) in [(0, 0), (1, 0), (2, 0)] {
        m1.set(x, y, true);
    }
    for (x, y) in [(0, 0), (1, 0), (3, 3), (2, 2)] {
        m2.set(x, y, true);
    }
    assert!((mask_iou(&m1, &m2).unwrap() - 0.4).abs() < 1e-12);
    assert_eq!(mask_iou(&m1, &m1).unwrap(), 1.0);
    let e = BinaryMask::empty(4, 4);
    assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
    assert!(mask_iou(&m1, &BinaryMask::empty(3, 4)).is_err());
}

fn rect_mask(w: usize, h: usize, b: &BBox) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h);
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            m.set(x, y, true);
        }
    }
    m
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| {
            let annotations = (0..rng.random_range(1..=3))
                .map(|_| {
                    let x = rng.random_range(0..20) as f32;
                    let y = rng.random_range(0..20) as f32;
                    let b = BBox::new(x, y, x + rng.random_range(3..10) as f32, y + rng.random_range(3..10) as f32);
                    InstanceAnnotation { category_id: rng.random_range(0..2), bbox: b, mask: rect_mask(32, 32, &b) }
                })
                .collect();
            ImageRecord { id: format!("img{i}"), width: 32, height: 32, pixels: vec![0.5; 32 * 32 * 3], annotations }
        })
        .collect()
}

fn as_prediction(a: &InstanceAnnotation, score: f32) -> InstancePrediction {
    InstancePrediction {
        bbox: a.bbox,
        category_id: a.category_id,
        cls_score: score,
        mask_iou_score: 1.0,
        mask_probs: Vec::new(),
        mask: a.mask.clone(),
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let recs = random_records(&mut rng, 6);
    let cats = CategoryMap::sequential(&["a", "b"]);
    let perfect: Vec<Vec<InstancePrediction>> =
        recs.iter().map(|r| r.annotations.iter().map(|a| as_prediction(a, 1.0)).collect()).collect();
    let res = evaluate_predictions(&recs, &perfect, &cats).unwrap();
    assert_eq!(res.map_box, 1.0);
    assert_eq!(res.map_mask, 1.0);
    assert_eq!(res.per_threshold.len(), 10);

    let nothing = vec![Vec::new(); recs.len()];
    let res = evaluate_predictions(&recs, &nothing, &cats).unwrap();
    assert_eq!((res.map_box, res.map_mask), (0.0, 0.0));
    assert!(evaluate_predictions(&[], &[], &cats).is_err());
}

#[test]
fn map_is_mean_of_thresholds_and_mask_ap_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cats = CategoryMap::sequential(&["a", "b"]);
    for trial in 0..20 {
        let recs = random_records(&mut rng, 8);
        let preds: Vec<Vec<InstancePrediction>> = recs
            .iter()
            .map(|r| {
                let mut v: Vec<InstancePrediction> = r
                    .annotations
                    .iter()
                    .map(|a| {
                        // jitter the box and mask so IoUs spread over the thresholds
                        let d = rng.random_range(0..3) as f32;
                        let b = BBox::new(a.bbox.x1 + d, a.bbox.y1, a.bbox.x2 + d, a.bbox.y2);
                        let mut p = as_prediction(a, rng.random_range(0.1..1.0));
                        p.bbox = b;
                        p.mask = rect_mask(32, 32, &b);
                        p
                    })
                    .collect();
                let b = BBox::new(1.0, 1.0, 6.0, 6.0);
                v.push(InstancePrediction { bbox: b, mask: rect_mask(32, 32, &b), ..as_prediction(&r.annotations[0], 0.4) });
                v
            })
            .collect();
        let res = evaluate_predictions(&recs, &preds, &cats).unwrap();
        let mean_box = res.per_threshold.iter().map(|t| t.box_ap).sum::<f64>() / 10.0;
        let mean_mask = res.per_threshold.iter().map(|t| t.mask_ap).sum::<f64>() / 10.0;
        assert!((res.map_box - mean_box).abs() < 1e-12);
        assert!((res.map_mask - mean_mask).abs() < 1e-12);
        for w in res.per_threshold.windows(2) {
            assert!(w[1].mask_ap <= w[0].mask_ap + 1e-15, "trial {trial}: {w:?}");
            assert!(w[1].box_ap <= w[0].box_ap + 1e-15);
        }
        let thr: Vec<f64> = res.per_threshold.iter().map(|t| t.iou_threshold).collect();
        let want: Vec<f64> = iou_thresholds().iter().map(|t| (t * 100.0).round() / 100.0).collect();
        assert_eq!(thr, want);
        assert!(res.per_threshold.iter().all(|t| (0.0..=1.0).contains(&t.mask_ap)));
    }
}
