use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

type Builder = dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>;

/// Central-difference check of d(sum(f(inputs) * probe))/d(inputs).
fn fd_check(f: &Builder, inputs: &[Tensor], probe_seed: u64) {
    let mut tape = Tape::new();
    let leaves = tape.leaves(inputs);
    let out = f(&mut tape, &leaves).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
    let weighted = tape.mul(&out, &probe).unwrap();
    let loss = tape.sum(&weighted);
    let grads = tape.backward(&loss).unwrap();

    let value = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let out = f(&mut tape, xs).unwrap();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let h = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = input.to_vec();
            d[i] += h;
            plus[k] = Tensor::new(input.shape().to_vec(), d.clone()).unwrap();
            d[i] -= 2.0 * h;
            minus[k] = Tensor::new(input.shape().to_vec(), d).unwrap();
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs();
            let rel = err / a.abs().max(numeric.abs()).max(1e-300);
            assert!(
                err < 1e-7 || rel < 1e-4,
                "input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..4)).collect()
}

const TRIALS: u64 = 100;

#[test]
fn examples_from_the_contract() {
    let mut tape = Tape::new();
    let s = tape.add(&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
    assert_eq!(s.data(), &[4.0, 6.0]);
    let sm = tape.softmax(&t(&[2], &[0.0, 0.0])).unwrap();
    assert_eq!(sm.data(), &[0.5, 0.5]);
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(tape.matmul(&eye, &m).unwrap(), m);
    // constants are never recorded
    assert!(tape.is_empty());
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::new();
    let err = tape.add(&Tensor::zeros([2, 3]), &Tensor::zeros([2])).unwrap_err();
    match err {
        Error::Shape { op, lhs, rhs } => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(tape.matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).is_err());
    assert!(tape.sum_axis(&Tensor::zeros([2]), 1).is_err());
    assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
}

#[test]
fn stop_gradient_freezes_factor() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let frozen = tape.stop_gradient(&x);
    let y = tape.mul(&x, &frozen).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.get(&x).item(), 3.0);

    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(5.0));
    let sq = tape.mul(&x, &x).unwrap();
    let y = tape.stop_gradient(&sq);
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.get(&x).item(), 0.0);

    let v = t(&[3], &[1.0, 2.0, 3.0]);
    assert_eq!(tape.stop_gradient(&v), v);
}

#[test]
fn stop_gradient_is_value_neutral() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    let mut tape = Tape::new();
    let a = tape.softmax(&x).unwrap();
    let xs = tape.stop_gradient(&x);
    let b = tape.softmax(&xs).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::ones([3]));
    let s = tape.sum(&x);
    assert_eq!(tape.backward(&s).unwrap().get(&x).data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(&x, &x).unwrap();
    let m = tape.mean(&sq);
    assert_eq!(tape.backward(&m).unwrap().get(&x).data(), &[1.0, 2.0]);

    assert!(matches!(tape.backward(&sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreached_leaves_get_zeros_and_replay_is_stable() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2], &[1.0, -1.0]));
    let unused = tape.leaf(&Tensor::ones([2, 2]));
    let e = tape.exp(&a);
    let l = tape.sum(&e);
    let g1 = tape.backward(&l).unwrap();
    let g2 = tape.backward(&l).unwrap();
    assert_eq!(g1.get(&unused), Tensor::zeros([2, 2]));
    assert_eq!(g1.get(&a).data(), g2.get(&a).data());
}

#[test]
fn no_grad_records_nothing() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::ones([4]));
    let before = tape.len();
    let out = tape.no_grad(|tp| {
        let e = tp.exp(&a);
        tp.sum(&e)
    });
    assert_eq!(tape.len(), before);
    assert!(!out.requires_grad());
}

#[test]
fn clear_keeps_leaf_identity() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[1], &[2.0]));
    let y = tape.mul(&a, &a).unwrap();
    let y = tape.sum(&y);
    let g1 = tape.backward(&y).unwrap().get(&a);
    tape.clear();
    assert!(tape.is_empty());
    let y = tape.scale(&a, 3.0).unwrap();
    let y = tape.sum(&y);
    let g2 = tape.backward(&y).unwrap().get(&a);
    assert_eq!(g1.data(), &[4.0]);
    assert_eq!(g2.data(), &[3.0]);
}

#[test]
fn slice_concat_layout() {
    let mut tape = Tape::new();
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let s = tape.slice(&x, 1, 1, 2).unwrap();
    assert_eq!(s.data(), &[2.0, 3.0, 5.0, 6.0]);
    let c = tape.concat(&[x.clone(), s], 1).unwrap();
    assert_eq!(c.shape(), &[2, 5]);
    assert_eq!(c.data(), &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
    let r = tape.sum_axis(&x, 0).unwrap();
    assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
}

#[test]
fn softmax_rows_sum_to_one_for_large_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[200, 7], -50.0, 50.0);
    let mut tape = Tape::new();
    let p = tape.softmax(&x).unwrap();
    for row in p.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

// ---- finite-difference checks, one per op kind ----

fn check_many(seed: u64, mut gen: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Builder>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        let (inputs, f) = gen(&mut rng);
        fd_check(f.as_ref(), &inputs, seed * 1000 + trial);
    }
}

#[test]
fn gradcheck_binary_ops() {
    for (k, name) in ["add", "sub", "mul", "div"].into_iter().enumerate() {
        check_many(10 + k as u64, |rng| {
            let rank = rng.random_range(1..4);
            let shape = dims(rng, rank);
            // second operand: full shape, a suffix, or a scalar
            let cut = rng.random_range(0..=shape.len());
            let bshape = shape[cut..].to_vec();
            let a = rand_tensor(rng, &shape, -2.0, 2.0);
            let b = if name == "div" {
                let mag = rand_tensor(rng, &bshape, 0.5, 2.0);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                mag.map(|v| v * sign)
            } else {
                rand_tensor(rng, &bshape, -2.0, 2.0)
            };
            let f: Box<Builder> = Box::new(move |tp, xs| match name {
                "add" => tp.add(&xs[0], &xs[1]),
                "sub" => tp.sub(&xs[0], &xs[1]),
                "mul" => tp.mul(&xs[0], &xs[1]),
                _ => tp.div(&xs[0], &xs[1]),
            });
            (vec![a, b], f)
        });
    }
}

#[test]
fn gradcheck_matmul() {
    check_many(20, |rng| {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = rand_tensor(rng, &[m, k], -2.0, 2.0);
        let b = rand_tensor(rng, &[k, n], -2.0, 2.0);
        (
            vec![a, b],
            Box::new(|tp: &mut Tape, xs: &[Tensor]| tp.matmul(&xs[0], &xs[1])),
        )
    });
}

#[test]
fn gradcheck_conv3x3() {
    check_many(21, |rng| {
        let (b, h, w) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor(rng, &[b, h, w, ci], -2.0, 2.0);
        let k = rand_tensor(rng, &[3, 3, ci, co], -2.0, 2.0);
        (
            vec![x, k],
            Box::new(|tp: &mut Tape, xs: &[Tensor]| tp.conv3x3(&xs[0], &xs[1])),
        )
    });
}

#[test]
fn gradcheck_unary_ops() {
    let ops: [(&str, f64, f64); 6] = [
        ("relu", -2.0, 2.0),
        ("exp", -2.0, 2.0),
        ("log", 0.1, 2.0),
        ("softmax", -2.0, 2.0),
        ("log_softmax", -2.0, 2.0),
        ("max_scalar", -2.0, 2.0),
    ];
    for (k, (name, lo, hi)) in ops.into_iter().enumerate() {
        check_many(30 + k as u64, |rng| {
            let rank = rng.random_range(1..4);
            let shape = dims(rng, rank);
            let x = rand_tensor(rng, &shape, lo, hi);
            let f: Box<Builder> = Box::new(move |tp, xs| match name {
                "relu" => Ok(tp.relu(&xs[0])),
                "exp" => Ok(tp.exp(&xs[0])),
                "log" => Ok(tp.log(&xs[0])),
                "softmax" => tp.softmax(&xs[0]),
                "log_softmax" => tp.log_softmax(&xs[0]),
                _ => Ok(tp.max_scalar(&xs[0], 0.3)),
            });
            (vec![x], f)
        });
    }
}

#[test]
fn gradcheck_reductions_and_layout() {
    let ops = ["sum", "mean", "sum_axis", "reshape", "slice", "concat"];
    for (k, name) in ops.into_iter().enumerate() {
        check_many(40 + k as u64, |rng| {
            let rank = rng.random_range(1..4);
            let shape = dims(rng, rank);
            let axis = rng.random_range(0..rank);
            let x = rand_tensor(rng, &shape, -2.0, 2.0);
            let mut other_shape = shape.clone();
            other_shape[axis] = rng.random_range(1..3);
            let y = rand_tensor(rng, &other_shape, -2.0, 2.0);
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            let flat = vec![x.numel()];
            let f: Box<Builder> = Box::new(move |tp, xs| match name {
                "sum" => Ok(tp.sum(&xs[0])),
                "mean" => Ok(tp.mean(&xs[0])),
                "sum_axis" => tp.sum_axis(&xs[0], axis),
                "reshape" => tp.reshape(&xs[0], &flat),
                "slice" => tp.slice(&xs[0], axis, start, len),
                _ => tp.concat(&xs[..2], axis),
            });
            (vec![x, y], f)
        });
    }
}

#[test]
fn gradcheck_resample() {
    check_many(50, |rng| {
        let (b, h, w, c) = (
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..3),
        );
        let taps = (0..b * h * w)
            .map(|_| {
                let mut tp = [(0u32, 0.0); 4];
                for slot in tp.iter_mut() {
                    *slot = (rng.random_range(0..(h * w) as u32), rng.random_range(0.0..1.0));
                }
                tp
            })
            .collect();
        let map = Arc::new(SparseResample::new(b, h * w, h, w, taps));
        let x = rand_tensor(rng, &[b, h, w, c], -2.0, 2.0);
        (
            vec![x],
            Box::new(move |tp: &mut Tape, xs: &[Tensor]| tp.resample(&xs[0], &map)),
        )
    });
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rand_tensor(&mut rng, &[2, 5, 5, 3], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[3, 3, 3, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let wl = tape.leaf(&w);
        let y = tape.conv3x3(&x, &wl).unwrap();
        let y = tape.log_softmax(&y).unwrap();
        let l = tape.mean(&y);
        (l.item(), tape.backward(&l).unwrap().get(&wl).to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
