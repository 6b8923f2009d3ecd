use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinformer::gradcheck::{check_inputs, DEFAULT_STEP};
use twinformer::kernels::{GELU_CUBIC, GELU_SQRT_2_OVER_PI};
use twinformer::{Activation, Graph, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity_and_scalar() {
    let a = Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.25, 4.0]).unwrap();
    assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    let two = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
    let three = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
    assert_eq!(two.matmul(&three).unwrap().data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[3, 2]);
    for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn batched_matmul_matches_per_batch_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        let ab = Tensor::new(vec![3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap();
        let bb = Tensor::new(vec![4, 5], b.data()[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
        for (x, y) in c.data()[bi * 15..(bi + 1) * 15].iter().zip(triple_loop(&ab, &bb)) {
            assert!((x - y).abs() < 1e-14);
        }
    }
    let mismatched = random(&[3, 4, 5], &mut rng);
    let err = a.matmul(&mismatched).unwrap_err().to_string();
    assert!(err.contains("[2, 3, 4]") && err.contains("[3, 4, 5]"), "{err}");
}

fn softmax_of(x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let n = g.input(Tensor::new(vec![x.len()], x.to_vec()).unwrap());
    let s = g.softmax(n, 0).unwrap();
    g.value(s).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.0, 0.0]), vec![0.5, 0.5]);
    let direct: Vec<f64> = {
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    for (a, b) in softmax_of(&[1.0, 2.0, 3.0]).iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
    let shifted = softmax_of(&[1.0 + 7.5, 2.0 + 7.5, 3.0 + 7.5]);
    for (a, b) in shifted.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let n = g.input(Tensor::zeros(&[2, 2]));
    assert!(g.softmax(n, 2).is_err());
}

#[test]
fn layer_norm_examples() {
    let norm = |x: Vec<f64>, eps: f64| {
        let d = x.len();
        let mut g = Graph::new();
        let xn = g.input(Tensor::new(vec![1, d], x).unwrap());
        let gm = g.input(Tensor::full(&[d], 1.0));
        let bt = g.input(Tensor::zeros(&[d]));
        let y = g.layer_norm(xn, gm, bt, eps).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(norm(vec![3.0; 5], 1e-5), vec![0.0; 5]);
    assert_eq!(norm(vec![1.0, -1.0], 0.0), vec![1.0, -1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y = norm(x, 0.0);
    let mean = y.iter().sum::<f64>() / 16.0;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-8 && (var - 1.0).abs() < 1e-8);

    let mut g = Graph::new();
    let xn = g.input(Tensor::zeros(&[2, 3]));
    let gm = g.input(Tensor::zeros(&[4]));
    assert!(g.layer_norm(xn, gm, gm, 1e-5).is_err());
}

#[test]
fn linear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 4], &mut rng);
    let b = random(&[4], &mut rng);

    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let eye = g.input(Tensor::eye(4));
    let zero_b = g.input(Tensor::zeros(&[4]));
    let y = g.linear(xn, eye, Some(zero_b)).unwrap();
    assert_eq!(g.value(y), &x);

    let zeros = g.input(Tensor::zeros(&[3, 4]));
    let w = g.input(random(&[4, 4], &mut rng));
    let bn = g.input(b.clone());
    let y = g.linear(zeros, w, Some(bn)).unwrap();
    for r in 0..3 {
        assert_eq!(&g.value(y).data()[r * 4..(r + 1) * 4], b.data());
    }

    // Random case against matmul + explicit bias add.
    let y = g.linear(xn, w, Some(bn)).unwrap();
    let mm = x.matmul(g.value(w)).unwrap();
    for (i, (a, m)) in g.value(y).data().iter().zip(mm.data()).enumerate() {
        assert!((a - (m + b.data()[i % 4])).abs() < 1e-14);
    }

    let bad = g.input(Tensor::zeros(&[5, 2]));
    assert!(g.linear(xn, bad, None).is_err());
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.activation(x, Activation::Relu);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let x = g.input(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let y = g.activation(x, Activation::Gelu);
    assert_eq!(g.value(y).data()[0], 0.0);
    // 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3))) at x = 1.
    let expected = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
    assert!((g.value(y).data()[1] - expected).abs() < 1e-15);
    assert!((GELU_SQRT_2_OVER_PI - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-16);
    assert_eq!(GELU_CUBIC, 0.044715);
}

/// Every differentiable op against central differences.
#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let pos = Tensor::new(vec![2, 3], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let gamma = random(&[3], &mut rng);
    let beta = random(&[3], &mut rng);
    let w = random(&[4], &mut rng);
    let batched = random(&[2, 3, 2], &mut rng);
    let batched_b = random(&[2, 4, 2], &mut rng);

    type Build = Box<dyn Fn(&mut Graph<'static>, &[twinformer::NodeId]) -> twinformer::Result<twinformer::NodeId>>;
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        (
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                let s = g.mul(y, y)?;
                Ok(g.sum(s))
            }),
        ),
        (
            "matmul_nt",
            vec![batched.clone(), batched_b.clone()],
            Box::new(|g, x| {
                let y = g.matmul_nt(x[0], x[1], 0.7)?;
                let s = g.mul(y, y)?;
                Ok(g.sum(s))
            }),
        ),
        (
            "linear",
            vec![a.clone(), b.clone(), w.clone()],
            Box::new(|g, x| {
                let y = g.linear(x[0], x[1], Some(x[2]))?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            }),
        ),
        (
            "softmax",
            vec![a.clone(), a.clone()],
            Box::new(|g, x| {
                let y = g.softmax(x[0], 1)?;
                let z = g.softmax(x[1], 0)?;
                let s = g.mul(y, z)?;
                Ok(g.sum(s))
            }),
        ),
        (
            "layer_norm",
            vec![a.clone(), gamma, beta],
            Box::new(|g, x| {
                let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
                let s = g.mul(y, y)?;
                let t = g.gelu(s);
                Ok(g.sum(t))
            }),
        ),
        (
            "div/min/max/abs",
            vec![a.clone(), pos.clone()],
            Box::new(|g, x| {
                let d = g.div(x[0], x[1])?;
                let m = g.minimum(d, x[0])?;
                let n = g.maximum(m, x[1])?;
                let s = g.sub(n, d)?;
                let ab = g.abs(s);
                Ok(g.mean(ab))
            }),
        ),
        (
            "layout",
            vec![a.clone(), pos],
            Box::new(|g, x| {
                let c = g.concat(&[x[0], x[1]], 0)?;
                let p = g.permute(c, &[1, 0])?;
                let r = g.gather_rows(p, vec![2, 0, 0, 1].into())?;
                let s = g.slice(r, 1, 1, 3)?;
                let m = g.mean_rows(s);
                let q = g.mul(m, m)?;
                let sh = g.add_scalar(q, 0.3);
                let sc = g.scale(sh, 1.7);
                Ok(g.sum(sc))
            }),
        ),
        (
            "broadcast/bce",
            vec![a, b.clone()],
            Box::new(|g, x| {
                let row = g.slice(x[1], 0, 0, 1)?;
                let row = g.reshape(row, &[4])?;
                let row = g.slice(row, 0, 0, 3)?;
                let y = g.add_broadcast(x[0], row)?;
                g.bce_with_logits(y, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 1.3)
            }),
        ),
    ];
    for (name, inputs, build) in cases {
        let report = check_inputs(&inputs, DEFAULT_STEP, |g, x| build(g, x)).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "{name}: rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn composed_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[4, 6], &mut rng);
    let w1 = random(&[6, 8], &mut rng);
    let w2 = random(&[8, 3], &mut rng);
    let report = check_inputs(&[x, w1, w2], DEFAULT_STEP, |g, v| {
        let h = g.linear(v[0], v[1], None)?;
        let h = g.gelu(h);
        let h = g.linear(h, v[2], None)?;
        let p = g.softmax(h, 1)?;
        let r = g.relu(h);
        let s = g.mul(p, r)?;
        Ok(g.sum(s))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn seeded_computation_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random(&[16, 24], &mut rng);
        let b = random(&[24, 8], &mut rng);
        let mut g = Graph::new();
        let (an, bn) = (g.input(a), g.input(b));
        let y = g.matmul(an, bn).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let loss = g.sum(y);
        let out = g.value(y).clone();
        let grads = g.backward(loss).unwrap();
        (out, grads.node(an).unwrap().to_vec())
    };
    let (o1, g1) = run();
    let (o2, g2) = run();
    assert_eq!(o1, o2);
    assert_eq!(g1, g2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        let mut g = Graph::new();
        let n = g.input(Tensor::new(vec![rows, cols], x).unwrap());
        let s = g.softmax(n, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let c = random(&[n, p], &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.data().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
    }
}
