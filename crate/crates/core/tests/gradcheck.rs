mod support;

use geoat_core::tensor::{Tape, Tensor};
use support::{primitive_suite, random_tensor, rng};

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..8 {
        for (name, rep) in primitive_suite(seed) {
            assert!(rep.passed(), "{name} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn backward_is_linear() {
    // grad(a·f + b·g) = a·grad f + b·grad g with f = sum(sigmoid(x)), g = sum(x ⊙ x).
    let mut r = rng(7);
    let x0 = random_tensor(&mut r, &[3, 4], 2.0);
    let (a, b) = (0.7, -2.3);
    let grad = |wf: f64, wg: f64| {
        let mut t = Tape::new();
        let x = t.input(x0.clone()).unwrap();
        let s = t.sigmoid(x).unwrap();
        let f = t.sum(s).unwrap();
        let sq = t.mul(x, x).unwrap();
        let g = t.sum(sq).unwrap();
        let f = t.scale(f, wf).unwrap();
        let g = t.scale(g, wg).unwrap();
        let l = t.add(f, g).unwrap();
        t.backward(l).unwrap().get(x).unwrap().clone()
    };
    let combined = grad(a, b);
    let gf = grad(1.0, 0.0);
    let gg = grad(0.0, 1.0);
    for i in 0..combined.len() {
        let expect = a * gf.data()[i] + b * gg.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_sigmoid_is_open_interval() {
    let mut r = rng(11);
    for _ in 0..50 {
        let x = random_tensor(&mut r, &[4, 7], 30.0);
        let mut t = Tape::new();
        let v = t.constant(x);
        let sm = t.softmax(v).unwrap();
        for row in t.value(sm).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let x = random_tensor(&mut r, &[16], 20.0);
        let v = t.constant(x);
        let sg = t.sigmoid(v).unwrap();
        assert!(t.value(sg).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn bce_matches_naive_formula() {
    let mut r = rng(3);
    for _ in 0..100 {
        let z = random_tensor(&mut r, &[5], 6.0);
        let y = random_tensor(&mut r, &[5], 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let naive: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 5.0;
        let mut t = Tape::new();
        let zv = t.constant(z);
        let l = t.bce_with_logits(zv, &y).unwrap();
        assert!((t.value(l).item().unwrap() - naive).abs() < 1e-12);
    }
}

#[test]
fn matmul_identity_for_random_widths() {
    let mut r = rng(5);
    for k in 1..6 {
        let x = random_tensor(&mut r, &[3, k], 5.0);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let mut t = Tape::new();
        let e = t.constant(eye);
        let xv = t.constant(x.clone());
        let y = t.matmul(e, xv).unwrap();
        assert_eq!(t.value(y), &x);
    }
}
