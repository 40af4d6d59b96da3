use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{finite_difference, max_relative_error};
use super::*;
use crate::error::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CASES: u64 = 100;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Projects an op output onto fixed random weights so every output entry
/// contributes to the scalar being differentiated.
fn project(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(&rand_tensor(rng, &shape));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Runs the analytic and numerical gradients of `build` against each other.
fn gradcheck(inputs: Vec<(&str, Tensor)>, seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut params = ParamSet::new();
    for (n, x) in inputs {
        params.push(n, x);
    }
    let loss_of = |p: &ParamSet, grads: bool| {
        let mut tape = Tape::new();
        let vars = tape.bind(p, grads);
        let out = build(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = project(&mut tape, out, &mut rng);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = loss_of(&params, true);
    tape.backward(loss).unwrap();
    tape.write_grads(&mut params, &vars);
    let numeric = finite_difference(&params, H, |p| {
        let (tape, _, loss) = loss_of(p, false);
        tape.scalar(loss)
    });
    max_relative_error(&params, &numeric)
}

fn run_cases(name: &str, mut case: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
    for i in 0..CASES {
        let err = case(&mut rng, i);
        assert!(err < TOL, "{name} case {i}: relative error {err:.3e}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(&t(&[2, 2], &[5., 6., 7., 8.]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c), &[5., 6., 7., 8.]);

    let a = tape.constant(&t(&[1, 2], &[1., 2.]));
    let b = tape.constant(&t(&[2, 1], &[3., 4.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(vec![2, 3]));
    let b = tape.constant(&Tensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients() {
    // fixed 3×4 · 4×2 instance plus randomized shapes
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let err = gradcheck(vec![("a", a), ("b", b)], 1, |tp, v| {
        let c = tp.matmul(v[0], v[1]).unwrap();
        tp.sum(c)
    });
    assert!(err < TOL);
    run_cases("matmul", |rng, i| {
        let (m, k, n) = dims(rng);
        let a = rand_tensor(rng, &[m, k]);
        let b = rand_tensor(rng, &[k, n]);
        gradcheck(vec![("a", a), ("b", b)], i, |tp, v| tp.matmul(v[0], v[1]).unwrap())
    });
}

#[test]
fn elementwise_binary_gradients() {
    run_cases("add/sub/mul", |rng, i| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n]);
        let b = rand_tensor(rng, &[m, n]);
        gradcheck(vec![("a", a), ("b", b)], i, |tp, v| {
            let s = tp.add(v[0], v[1]).unwrap();
            let d = tp.sub(v[0], v[1]).unwrap();
            tp.mul(s, d).unwrap()
        })
    });
}

#[test]
fn min_elementwise_values_and_gradients() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[3], &[1., 5., -2.]));
    let b = tape.constant(&t(&[3], &[2., 4., -2.]));
    let m = tape.min_elementwise(a, b).unwrap();
    assert_eq!(tape.value(m), &[1., 4., -2.]);

    run_cases("min", |rng, i| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n]);
        // keep ties further than the FD step away
        let mut b = rand_tensor(rng, &[m, n]);
        for (x, y) in a.data().iter().zip(b.data_mut()) {
            if (*x - *y).abs() < 1e-3 {
                *y += 0.01;
            }
        }
        gradcheck(vec![("a", a), ("b", b)], i, |tp, v| {
            tp.min_elementwise(v[0], v[1]).unwrap()
        })
    });
}

#[test]
fn add_row_and_scale_gradients() {
    run_cases("add_row", |rng, i| {
        let (m, n, _) = dims(rng);
        let x = rand_tensor(rng, &[m, n]);
        let b = rand_tensor(rng, &[n]);
        gradcheck(vec![("x", x), ("b", b)], i, |tp, v| {
            let y = tp.add_row(v[0], v[1]).unwrap();
            tp.scale(y, -1.7)
        })
    });
}

#[test]
fn activation_values() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], &[-1., 2.]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r), &[0., 2.]);
    let z = tape.constant(&t(&[1], &[0.]));
    let g = tape.gelu(z);
    let th = tape.tanh(z);
    assert_eq!(tape.value(g), &[0.]);
    assert_eq!(tape.value(th), &[0.]);
}

#[test]
fn activation_gradients() {
    run_cases("activations", |rng, i| {
        let (m, n, _) = dims(rng);
        let mut x = rand_tensor(rng, &[m, n]);
        // keep relu inputs away from the kink
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let which = i % 3;
        gradcheck(vec![("x", x)], i, move |tp, v| match which {
            0 => tp.gelu(v[0]),
            1 => tp.relu(v[0]),
            _ => tp.tanh(v[0]),
        })
    });
}

#[test]
fn layer_norm_values() {
    let mut tape = Tape::new();
    let gain = tape.constant(&Tensor::filled(vec![2], 1.0));
    let shift = tape.constant(&Tensor::zeros(vec![2]));
    let c = tape.constant(&t(&[1, 2], &[3., 3.]));
    let y = tape.layer_norm(c, gain, shift, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0., 0.]);

    let x = tape.constant(&t(&[1, 2], &[1., -1.]));
    let y = tape.layer_norm(x, gain, shift, 1e-12).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-9);
    assert!((tape.value(y)[1] + 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_gradients() {
    run_cases("layer_norm", |rng, i| {
        let m = rng.random_range(1..4);
        let n = rng.random_range(2..7);
        let x = rand_tensor(rng, &[m, n]);
        let g = rand_tensor(rng, &[n]);
        let s = rand_tensor(rng, &[n]);
        gradcheck(vec![("x", x), ("g", g), ("s", s)], i, |tp, v| {
            tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        })
    });
}

#[test]
fn causal_conv_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[3, 1], &[1., 2., 3.]));
    let k = tape.constant(&t(&[2, 1], &[1., 1.]));
    let b = tape.constant(&t(&[1], &[0.]));
    let y = tape.causal_conv1d(x, k, b, 3).unwrap();
    assert_eq!(tape.value(y), &[1., 3., 5.]);

    let x = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
    let k = tape.constant(&Tensor::filled(vec![1, 2], 1.0));
    let b = tape.constant(&Tensor::zeros(vec![2]));
    let y = tape.causal_conv1d(x, k, b, 2).unwrap();
    assert_eq!(tape.value(y), &[1., 2., 3., 4.]);

    // window wider than the sequence is fine
    let x = tape.constant(&t(&[2, 1], &[1., 2.]));
    let k = tape.constant(&Tensor::filled(vec![5, 1], 1.0));
    let b = tape.constant(&t(&[1], &[0.]));
    let y = tape.causal_conv1d(x, k, b, 2).unwrap();
    assert_eq!(tape.value(y), &[1., 3.]);

    let k0 = tape.constant(&Tensor::zeros(vec![0, 1]));
    assert!(matches!(tape.causal_conv1d(x, k0, b, 2), Err(Error::Config(_))));
}

#[test]
fn causal_conv_is_causal_and_sequence_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let l = rng.random_range(1..8);
        let d = rng.random_range(1..4);
        let w = rng.random_range(1..6);
        let x = rand_tensor(&mut rng, &[2 * l, d]);
        let k = rand_tensor(&mut rng, &[w, d]);
        let b = rand_tensor(&mut rng, &[d]);
        let pos = rng.random_range(0..l);
        let mut x2 = x.clone();
        // perturb every row after `pos` in the first sequence
        for r in pos + 1..l {
            for c in 0..d {
                x2.data_mut()[r * d + c] += 10.0;
            }
        }
        let run = |x: &Tensor| {
            let mut tp = Tape::new();
            let (xv, kv, bv) = (tp.constant(x), tp.constant(&k), tp.constant(&b));
            let y = tp.causal_conv1d(xv, kv, bv, l).unwrap();
            tp.value(y).to_vec()
        };
        let (y1, y2) = (run(&x), run(&x2));
        assert_eq!(y1[..(pos + 1) * d], y2[..(pos + 1) * d]);
        // the second sequence never sees the first
        assert_eq!(y1[l * d..], y2[l * d..]);
    }
}

#[test]
fn causal_conv_gradients() {
    run_cases("causal_conv1d", |rng, i| {
        let l = rng.random_range(1..6);
        let seqs = rng.random_range(1..3);
        let d = rng.random_range(1..4);
        let w = rng.random_range(1..5);
        let x = rand_tensor(rng, &[l * seqs, d]);
        let k = rand_tensor(rng, &[w, d]);
        let b = rand_tensor(rng, &[d]);
        gradcheck(vec![("x", x), ("k", k), ("b", b)], i, move |tp, v| {
            tp.causal_conv1d(v[0], v[1], v[2], l).unwrap()
        })
    });
}

#[test]
fn gather_concat_gradients() {
    run_cases("gather/concat", |rng, i| {
        let (m, n, q) = dims(rng);
        let x = rand_tensor(rng, &[m, n]);
        let y = rand_tensor(rng, &[m, q]);
        let z = rand_tensor(rng, &[m, n]);
        let index: Vec<Option<usize>> = (0..6)
            .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..2 * m)))
            .collect();
        gradcheck(vec![("x", x), ("y", y), ("z", z)], i, move |tp, v| {
            let rows = tp.concat_rows(&[v[0], v[2]]).unwrap();
            let g = tp.gather_rows(rows, index.clone()).unwrap();
            let cols = tp.concat_cols(v[0], v[1]).unwrap();
            let s1 = tp.sum(g);
            let s2 = tp.mean(cols).unwrap();
            tp.add(s1, s2).unwrap()
        })
    });
}

#[test]
fn embedding_lookup_rows() {
    let mut tape = Tape::new();
    let table = tape.constant(&t(&[3, 2], &[0., 1., 2., 3., 4., 5.]));
    let e = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(e), &[4., 5., 0., 1., 4., 5.]);
    assert!(matches!(tape.embedding_lookup(table, &[3]), Err(Error::Index { .. })));
}

#[test]
fn reductions_and_mse() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], &[1., 2.]));
    let z = tape.constant(&Tensor::zeros(vec![2]));
    let e = tape.mse(x, z).unwrap();
    assert_eq!(tape.scalar(e), 2.5);
    let e0 = tape.mse(x, x).unwrap();
    assert_eq!(tape.scalar(e0), 0.0);
    let bad = tape.constant(&Tensor::zeros(vec![3]));
    assert!(matches!(tape.mse(x, bad), Err(Error::Dimension { .. })));
    assert!(matches!(tape.add(x, bad), Err(Error::Dimension { .. })));

    run_cases("mse", |rng, i| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n]);
        let b = rand_tensor(rng, &[m, n]);
        gradcheck(vec![("a", a), ("b", b)], i, |tp, v| tp.mse(v[0], v[1]).unwrap())
    });
}

#[test]
fn backward_sum_gives_ones_and_accumulates() {
    let mut params = ParamSet::new();
    params.push("x", t(&[3], &[0.3, -1., 2.]));
    let mut tape = Tape::new();
    let v = tape.bind(&params, true);
    let s = tape.sum(v[0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v[0]).unwrap(), &[1., 1., 1.]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v[0]).unwrap(), &[2., 2., 2.]);

    tape.write_grads(&mut params, &v);
    assert_eq!(params.get(0).grad().unwrap(), &[2., 2., 2.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![2]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn mse_of_linear_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_tensor(&mut rng, &[5, 5]);
    let x = rand_tensor(&mut rng, &[5, 1]);
    let y = rand_tensor(&mut rng, &[5, 1]);
    let mut params = ParamSet::new();
    params.push("w", w);
    params.push("x", x);
    let loss_of = |p: &ParamSet, grads: bool| {
        let mut tape = Tape::new();
        let v = tape.bind(p, grads);
        let yv = tape.constant(&y);
        let wx = tape.matmul(v[0], v[1]).unwrap();
        let l = tape.mse(wx, yv).unwrap();
        (tape, v, l)
    };
    let (mut tape, v, l) = loss_of(&params, true);
    tape.backward(l).unwrap();
    tape.write_grads(&mut params, &v);
    let num = finite_difference(&params, H, |p| {
        let (tape, _, l) = loss_of(p, false);
        tape.scalar(l)
    });
    assert!(max_relative_error(&params, &num) < TOL);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(&t(&[2], &[1., 2.]));
    let p = tape.leaf(&t(&[2], &[3., 4.]).with_grad());
    let m = tape.mul(c, p).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(p).unwrap(), &[1., 2.]);
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[6, 4]);
    let k = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let w = rand_tensor(&mut rng, &[4, 4]);
    let run = || {
        let mut tp = Tape::new();
        let (xv, kv, bv, wv) = (tp.constant(&x), tp.constant(&k), tp.constant(&b), tp.constant(&w));
        let c = tp.causal_conv1d(xv, kv, bv, 3).unwrap();
        let y = tp.matmul(c, wv).unwrap();
        let y = tp.gelu(y);
        tp.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut params = ParamSet::new();
    params.push("p", t(&[2], &[1.5, -2.0]));
    let mut opt = Adam::new(&params, AdamConfig::with_lr(0.1));
    params.get_mut(0).accumulate_grad(&[0.0, 0.0]);
    opt.step(&mut params);
    assert_eq!(params.get(0).data(), &[1.5, -2.0]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = ParamSet::new();
    params.push("p", t(&[1], &[0.0]));
    let mut opt = Adam::new(&params, AdamConfig::with_lr(0.01));
    params.get_mut(0).accumulate_grad(&[1.0]);
    opt.step(&mut params);
    assert!((params.get(0).data()[0] + 0.01).abs() < 1e-9);
}

#[test]
fn adam_minimizes_quadratic() {
    // f(x) = (x − 1)², optimum x* = 1
    let mut params = ParamSet::new();
    params.push("x", t(&[1], &[0.0]));
    let mut opt = Adam::new(&params, AdamConfig::with_lr(1e-2));
    let mut reached = None;
    for step in 1..=2000 {
        let x = params.get(0).data()[0];
        params.get_mut(0).accumulate_grad(&[2.0 * (x - 1.0)]);
        opt.step(&mut params);
        if (params.get(0).data()[0] - 1.0).abs() < 1e-6 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "x = {}", params.get(0).data()[0]);
}

#[test]
fn clip_grad_norm_rescales() {
    let mut params = ParamSet::new();
    params.push("a", t(&[2], &[0., 0.]));
    params.get_mut(0).accumulate_grad(&[3.0, 4.0]);
    let n = params.clip_grad_norm(1.0);
    assert_eq!(n, 5.0);
    let g = params.get(0).grad().unwrap();
    assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
}

#[test]
fn polyak_blends() {
    let mut online = ParamSet::new();
    online.push("w", t(&[1], &[1.0]));
    let mut target = ParamSet::new();
    target.push("w", t(&[1], &[0.0]));
    target.polyak_from(&online, 0.005);
    assert!((target.get(0).data()[0] - 0.005).abs() < 1e-15);
}

#[test]
fn tensor_json_roundtrip_preserves_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 2]);
    let v = x.to_json();
    let y = Tensor::from_json(&v, &[2, 3, 2]).unwrap();
    assert_eq!(x.data(), y.data());
    let s = serde_json::to_string(&v).unwrap();
    let back: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(Tensor::from_json(&back, &[2, 3, 2]).unwrap().data(), x.data());
}
