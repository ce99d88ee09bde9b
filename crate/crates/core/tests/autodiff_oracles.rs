use ftlab_core::autodiff::{gelu, grad_check, log_softmax, softmax, Tape, Var};
use ftlab_core::encoder::LAYER_NORM_EPS;
use ftlab_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 16)] {
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let oracle = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in tape.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn gelu_derivative_matches_finite_difference() {
    // Central differences on the scalar function itself, no tape involved.
    for i in -40..=40 {
        let x = i as f64 / 8.0;
        let numeric = (gelu(x + EPS) - gelu(x - EPS)) / (2.0 * EPS);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(x));
        let y = tape.gelu(v);
        let g = tape.backward(y).unwrap().get(v)[0];
        let denom = g.abs().max(numeric.abs()).max(1e-8);
        assert!((g - numeric).abs() / denom <= TOL, "x={x}: {g} vs {numeric}");
    }
}

/// Direct layer norm of one row, written out from the definition.
fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mu) * r * g + b).collect()
}

#[test]
fn layer_norm_matches_definition_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let g = Tensor::randn(&[6], 1.0, &mut rng);
    let b = Tensor::randn(&[6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(b.clone()));
    let y = tape.layer_norm(vx, vg, vb, LAYER_NORM_EPS).unwrap();
    for r in 0..3 {
        let want = layer_norm_row(&x.data()[r * 6..(r + 1) * 6], g.data(), b.data());
        for (a, w) in tape.value(y).data()[r * 6..(r + 1) * 6].iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }
    let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let err = grad_check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        },
        &[x, g, b],
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let x = Tensor::new(&[1, 2], vec![1000.0, 1000.5]).unwrap();
    let p = softmax(&x, 1).unwrap();
    assert!(p.is_finite());
    let e = (-0.5f64).exp();
    assert!((p.data()[0] - e / (1.0 + e)).abs() < 1e-15);
    assert!((p.data()[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
    let lp = log_softmax(&x, 1).unwrap();
    assert!((lp.data()[1] + (1.0 + e).ln()).abs() < 1e-14);
}

/// Weighted sum with fixed random coefficients, so every output element
/// carries a distinct, non-trivial gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> ftlab_core::Result<Var> {
    let dims = t.dims(y).to_vec();
    let w = Tensor::randn(&dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

#[test]
fn every_op_passes_grad_check() {
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> ftlab_core::Result<Var>>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![4]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_row_bias", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add_row_bias(v[0], v[1]))),
        ("tanh", vec![vec![2, 3]], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("gelu", vec![vec![2, 3]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("softmax", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax0", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 0))),
        ("log_softmax", vec![vec![3, 4]], Box::new(|t, v| t.log_softmax(v[0], 1))),
        ("transpose", vec![vec![2, 5]], Box::new(|t, v| t.transpose(v[0]))),
        ("slice_cols", vec![vec![3, 6]], Box::new(|t, v| t.slice_cols(v[0], 2, 3))),
        ("concat_cols", vec![vec![2, 2], vec![2, 3]], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", vec![vec![1, 3], vec![2, 3]], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("gather_rows", vec![vec![5, 3]], Box::new(|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]))),
        ("row", vec![vec![3, 4]], Box::new(|t, v| t.row(v[0], 1))),
        ("pick", vec![vec![3, 4]], Box::new(|t, v| t.pick(v[0], &[3, 0, 1]))),
        ("mean", vec![vec![3, 4]], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("mask_mul", vec![vec![2, 3]], Box::new(|t, v| t.mask_mul(v[0], vec![0.0, 2.0, 1.0, 0.5, 0.0, 3.0]))),
        (
            "mixout",
            vec![vec![2, 3]],
            Box::new(|t, v| t.mixout(v[0], &Tensor::full(&[2, 3], 0.3), vec![0.0, 2.0, 2.0, 0.0, 2.0, 0.0])),
        ),
        (
            "layer_norm",
            vec![vec![2, 5], vec![5], vec![5]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, (name, shapes, op)) in cases.iter().enumerate() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let err = grad_check(
            |t, v| {
                let y = op(t, v)?;
                project(t, y, 100 + k as u64)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{name}: {err}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::new(&[3, 4], data).unwrap();
        let p = softmax(&x, 1).unwrap();
        for r in 0..3 {
            let row = &p.data()[r * 4..(r + 1) * 4];
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(data in prop::collection::vec(-5.0f64..5.0, 4), c in -100.0f64..100.0) {
        let x = Tensor::new(&[1, 4], data.clone()).unwrap();
        let y = Tensor::new(&[1, 4], data.iter().map(|v| v + c).collect()).unwrap();
        let (px, py) = (softmax(&x, 1).unwrap(), softmax(&y, 1).unwrap());
        for (a, b) in px.data().iter().zip(py.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_composite_grad_check(data in prop::collection::vec(-2.0f64..2.0, 6), w in prop::collection::vec(-2.0f64..2.0, 6)) {
        let x = Tensor::new(&[2, 3], data).unwrap();
        let wt = Tensor::new(&[3, 2], w).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.tanh(y);
                let y = t.log_softmax(y, 1)?;
                let p = t.pick(y, &[0, 1])?;
                Ok(t.sum(p))
            },
            &[x, wt],
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }
}
