mod common;

use common::random_tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinformer::boxes::{assign_labels, cell_center, giou, iou, BoundingBox};
use twinformer::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use twinformer::heads::{mlp_head, MlpHead, PredictionMaps, Predictions};
use twinformer::loss::{cls_loss, decode_cell, reg_loss, total_loss, LossWeights};
use twinformer::{Graph, ParamStore, Tensor};

fn heads(input: usize, hidden: usize, seed: u64) -> (ParamStore, MlpHead, MlpHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cls = MlpHead::register(&mut store, &mut rng, "head.cls", input, hidden, 1).unwrap();
    let reg = MlpHead::register(&mut store, &mut rng, "head.reg", input, hidden, 4).unwrap();
    (store, cls, reg)
}

#[test]
fn zero_heads_predict_neutral_maps() {
    let (mut store, cls, reg) = heads(1024, 64, 1);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).tensor.data_mut().fill(0.0);
    }
    let mut g = Graph::inference(&store);
    let f = g.input(random_tensor(&[196, 1024], 2));
    let p = mlp_head(&mut g, f, 14, &cls, &reg).unwrap();
    assert_eq!(g.shape(p.cls), &[196, 1]);
    assert_eq!(g.shape(p.reg), &[196, 4]);
    let maps = PredictionMaps::from_graph(&g, &p);
    assert!(maps.cls.iter().all(|&v| v == 0.0));
    assert!(maps.reg.iter().all(|r| r.iter().all(|&v| v == 0.5)));

    let wrong = g.input(random_tensor(&[195, 1024], 3));
    assert!(mlp_head(&mut g, wrong, 14, &cls, &reg).is_err());
}

#[test]
fn head_gradients_match_finite_differences() {
    let (mut store, cls, reg) = heads(6, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let x = random_tensor(&[4, 6], 6);
    let report = check_params(&mut store, &ids, DEFAULT_STEP, |g| {
        let f = g.input(x.clone());
        let p = mlp_head(g, f, 2, &cls, &reg)?;
        let a = g.sum(p.cls);
        let w = g.constant(random_tensor(&[4, 4], 7));
        let r = g.mul(p.reg, w)?;
        let b = g.sum(r);
        g.add(a, b)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn label_assignment_examples() {
    assert_eq!(assign_labels(&BoundingBox::new(0.5, 0.5, 1.0, 1.0), 14).count(), 196);

    // Exactly the cell at row 3, column 5.
    let cell = BoundingBox::from_corners(5.0 / 14.0, 3.0 / 14.0, 6.0 / 14.0, 4.0 / 14.0);
    let m = assign_labels(&cell, 14);
    assert_eq!(m.indices(), vec![3 * 14 + 5]);

    let m = assign_labels(&BoundingBox::new(0.5, 0.5, 0.5, 0.5), 14);
    let expected: Vec<usize> = (0..196)
        .filter(|&i| {
            let (x, y) = cell_center(i / 14, i % 14, 14);
            (0.25..0.75).contains(&x) && (0.25..0.75).contains(&y)
        })
        .collect();
    assert_eq!(expected.len(), 49);
    assert_eq!(m.indices(), expected);
    assert_eq!(m.indices()[0], 3 * 14 + 3);
}

fn bce(z: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[test]
fn classification_loss_examples() {
    let gt = BoundingBox::new(0.5, 0.5, 0.5, 0.5);
    let mask = assign_labels(&gt, 14);
    let value = |logits: Vec<f64>| {
        let mut g = Graph::new();
        let z = g.input(Tensor::new(vec![196, 1], logits).unwrap());
        let l = cls_loss(&mut g, z, &mask, 1.0).unwrap();
        g.value(l).data()[0]
    };
    assert!((value(vec![0.0; 196]) - std::f64::consts::LN_2).abs() < 1e-12);
    let saturated: Vec<f64> = mask.positive.iter().map(|&p| if p { 40.0 } else { -40.0 }).collect();
    assert!(value(saturated) < 1e-15);

    let z = random_tensor(&[196, 1], 8);
    let reference = z
        .data()
        .iter()
        .zip(mask.targets())
        .map(|(&z, t)| bce(z, t))
        .sum::<f64>()
        / 196.0;
    assert!((value(z.data().to_vec()) - reference).abs() < 1e-12);
}

#[test]
fn giou_hand_cases() {
    let a = BoundingBox::new(0.3, 0.4, 0.2, 0.1);
    assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let u = BoundingBox::from_corners(0.0, 0.0, 1.0, 1.0);
    let v = BoundingBox::from_corners(1.0, 1.0, 2.0, 2.0);
    assert_eq!(iou(&u, &v), 0.0);
    assert!((1.0 - giou(&u, &v).unwrap() - 1.5).abs() < 1e-12);
    let flat = BoundingBox::new(0.0, 0.0, 0.0, 0.0);
    assert!(giou(&flat, &flat).is_err());
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
    )
}

/// IoU and GIoU estimated by rasterizing both boxes and their enclosure.
fn rasterized(a: &BoundingBox, b: &BoundingBox, n: usize) -> (f64, f64) {
    let e = a.enclosing(b);
    let [x0, y0, x1, y1] = e.corners();
    let inside = |bx: &BoundingBox, x: f64, y: f64| {
        let [l, t, r, btm] = bx.corners();
        x >= l && x < r && y >= t && y < btm
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (j as f64 + 0.5) / n as f64 * (x1 - x0);
            let y = y0 + (i as f64 + 0.5) / n as f64 * (y1 - y0);
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    let total = (n * n) as f64;
    let iou = inter as f64 / union as f64;
    (iou, iou - (total - union as f64) / total)
}

#[test]
fn giou_matches_rasterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..25 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (ri, rg) = rasterized(&a, &b, 400);
        assert!((iou(&a, &b) - ri).abs() < 1e-2);
        assert!((giou(&a, &b).unwrap() - rg).abs() < 1e-2);
    }
}

/// Decodes every positive token and scores it with the scalar box functions.
fn reg_reference(reg: &[[f64; 4]], gt: &BoundingBox, grid: usize, offset: f64) -> (f64, f64) {
    let mask = assign_labels(gt, grid);
    let idx = mask.indices();
    let (mut g_sum, mut l_sum) = (0.0, 0.0);
    for &i in &idx {
        let b = decode_cell(reg[i], i / grid, i % grid, grid, offset);
        g_sum += 1.0 - giou(&b, gt).unwrap();
        l_sum += (b.cx - gt.cx).abs() + (b.cy - gt.cy).abs() + (b.w - gt.w).abs() + (b.h - gt.h).abs();
    }
    (g_sum / idx.len() as f64, l_sum / idx.len() as f64)
}

#[test]
fn regression_loss_matches_weighted_reference() {
    let grid = 6;
    let gt = BoundingBox::new(0.45, 0.55, 0.4, 0.3);
    let mask = assign_labels(&gt, grid);
    let reg = random_tensor(&[grid * grid, 4], 10);
    let reg = Tensor::new(vec![grid * grid, 4], reg.data().iter().map(|v| 0.5 + 0.4 * v).collect()).unwrap();
    let rows: Vec<[f64; 4]> = reg.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let weights = LossWeights::default();
    let mut g = Graph::new();
    let r = g.input(reg.clone());
    let loss = reg_loss(&mut g, r, &gt, &mask, 1.0, &weights).unwrap().unwrap();
    let (giou_term, l1_term) = reg_reference(&rows, &gt, grid, 1.0);
    assert!((g.value(loss.giou).data()[0] - giou_term).abs() < 1e-12);
    assert!((g.value(loss.l1).data()[0] - l1_term).abs() < 1e-12);
    let total = g.value(loss.total).data()[0];
    assert!((total - (2.0 * giou_term + 5.0 * l1_term)).abs() < 1e-12);

    let report = check_inputs(&[reg], DEFAULT_STEP, |g, x| {
        Ok(reg_loss(g, x[0], &gt, &mask, 1.0, &weights)?.unwrap().total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn empty_mask_skips_regression() {
    let mut g = Graph::new();
    let r = g.input(Tensor::full(&[16, 4], 0.5));
    let tiny = BoundingBox::new(0.5, 0.5, 0.01, 0.01);
    let mask = assign_labels(&tiny, 4);
    assert_eq!(mask.count(), 0);
    assert!(reg_loss(&mut g, r, &tiny, &mask, 1.0, &LossWeights::default())
        .unwrap()
        .is_none());
}

/// Perfect regression at positive tokens and logits of magnitude `z`.
fn perfect_predictions(gt: &BoundingBox, grid: usize, offset: f64, z: f64) -> (Tensor, Tensor) {
    let mask = assign_labels(gt, grid);
    let s = offset / grid as f64;
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    for i in 0..grid * grid {
        let (cx, cy) = cell_center(i / grid, i % grid, grid);
        cls.push(if mask.positive[i] { z } else { -z });
        reg.extend([0.5 + (gt.cx - cx) / s, 0.5 + (gt.cy - cy) / s, gt.w, gt.h]);
    }
    (
        Tensor::new(vec![grid * grid, 1], cls).unwrap(),
        Tensor::new(vec![grid * grid, 4], reg).unwrap(),
    )
}

#[test]
fn perfect_predictions_have_vanishing_loss() {
    for (gt, offset) in [
        (
            BoundingBox::from_corners(5.0 / 14.0, 3.0 / 14.0, 6.0 / 14.0, 4.0 / 14.0),
            1.0,
        ),
        (BoundingBox::new(0.5, 0.5, 0.2, 0.2), 4.0),
    ] {
        let (cls, reg) = perfect_predictions(&gt, 14, offset, 20.0);
        let mut g = Graph::new();
        let preds = Predictions {
            cls: g.input(cls),
            reg: g.input(reg),
            grid: 14,
        };
        let terms = total_loss(&mut g, &preds, &gt, offset, &LossWeights::default()).unwrap();
        let reg = terms.reg.unwrap();
        assert!(g.value(reg.total).data()[0].abs() < 1e-12);
        let total = g.value(terms.total).data()[0];
        assert!((0.0..1e-6).contains(&total), "{total}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn giou_properties(ax in 0.1f64..0.9, ay in 0.1f64..0.9, aw in 0.01f64..0.5, ah in 0.01f64..0.5,
                       bx in 0.1f64..0.9, by in 0.1f64..0.9, bw in 0.01f64..0.5, bh in 0.01f64..0.5) {
        let a = BoundingBox::new(ax, ay, aw, ah);
        let b = BoundingBox::new(bx, by, bw, bh);
        let gab = giou(&a, &b).unwrap();
        prop_assert!((gab - giou(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(gab <= iou(&a, &b) + 1e-12);
        prop_assert!(gab > -1.0 && gab <= 1.0);
        // A box inside another: the enclosure is the outer box.
        let inner = BoundingBox::new(ax, ay, aw * 0.5, ah * 0.5);
        prop_assert!((giou(&a, &inner).unwrap() - iou(&a, &inner)).abs() < 1e-12);
    }

    #[test]
    fn positives_grow_with_nested_boxes(cx in 0.2f64..0.8, cy in 0.2f64..0.8, w in 0.05f64..0.4, h in 0.05f64..0.4, k in 1.0f64..2.0) {
        let small = BoundingBox::new(cx, cy, w, h);
        let big = BoundingBox::new(cx, cy, w * k, h * k);
        let (ms, mb) = (assign_labels(&small, 14), assign_labels(&big, 14));
        prop_assert!(ms.count() <= mb.count());
        prop_assert!(ms.positive.iter().zip(&mb.positive).all(|(s, b)| !s || *b));
    }
}
