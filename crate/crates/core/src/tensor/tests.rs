use std::rc::Rc;

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn positive_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.5..2.0)).collect()
}

#[test]
fn matmul_examples() {
    let t = Tape::new();
    let x = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let i3 = t.constant(eye, &[3, 3]).unwrap();
    assert_eq!(i3.matmul(x).unwrap().to_vec(), x.to_vec());

    let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = t.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.to_vec(), vec![3.0, 7.0]);
    assert!(matches!(a.matmul(x), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_is_ones_times_bt() {
    let t = Tape::new();
    let a = t.variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let bv = vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5];
    let b = t.constant(bv.clone(), &[3, 2]).unwrap();
    t.backward(a.matmul(b).unwrap().sum_all()).unwrap();
    let g = a.grad().unwrap();
    // (ones[2x2] · bᵀ)[i][k] = Σ_j b[k][j]
    for i in 0..2 {
        for k in 0..3 {
            assert_abs_diff_eq!(g[i * 3 + k], bv[k * 2] + bv[k * 2 + 1], epsilon = 1e-12);
        }
    }
}

#[test]
fn pointwise_examples() {
    let t = Tape::new();
    let x = t.constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
    assert_eq!(x.leaky_relu(LEAKY_SLOPE).to_vec(), vec![-0.2, 0.0, 2.0]);
    assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    assert_eq!(t.scalar(0.0).exp().item(), 1.0);

    let t = Tape::new();
    let x = t.variable(vec![4.0], &[1]).unwrap();
    t.backward(x.sqrt().sum_all()).unwrap();
    let g = x.grad().unwrap()[0];
    let h = 1e-5;
    let fd = ((4.0f64 + h).sqrt() - (4.0f64 - h).sqrt()) / (2.0 * h);
    assert_abs_diff_eq!(g, 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(g, fd, epsilon = 1e-6);
}

#[test]
fn checked_division_rejects_non_finite() {
    let t = Tape::checked();
    let a = t.constant(vec![1.0], &[1]).unwrap();
    let z = t.constant(vec![0.0], &[1]).unwrap();
    assert!(matches!(a.div(z), Err(Error::NonFinite(_))));
    let loose = Tape::new();
    let a = loose.constant(vec![1.0], &[1]).unwrap();
    let z = loose.constant(vec![0.0], &[1]).unwrap();
    assert!(a.div(z).unwrap().item().is_infinite());
}

#[test]
fn broadcasting_rules() {
    let t = Tape::new();
    let a = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let col = t.constant(vec![10.0, 20.0], &[2, 1]).unwrap();
    let row = t.constant(vec![1.0, 0.0, -1.0], &[1, 3]).unwrap();
    assert_eq!(a.add(col).unwrap().to_vec(), vec![11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
    assert_eq!(a.mul(row).unwrap().to_vec(), vec![1.0, 0.0, -3.0, 4.0, 0.0, -6.0]);
    assert_eq!(col.mul(row).unwrap().shape(), vec![2, 3]);
    let bad = t.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
    assert!(a.add(bad).is_err());
    let rank1 = t.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    assert!(a.add(rank1).is_err());
}

#[test]
fn reduce_examples() {
    let t = Tape::new();
    let x = t.constant(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    assert_eq!(x.mean(1).unwrap().item(), 2.0);
    assert_eq!(x.sum(1).unwrap().item(), 6.0);
    let c = t.constant(vec![7.0; 5], &[1, 5]).unwrap();
    assert_abs_diff_eq!(c.std(1, 1e-5).unwrap().item(), 1e-5f64.sqrt(), epsilon = 1e-15);
    let pm = t.constant(vec![-1.0, 1.0], &[1, 2]).unwrap();
    assert_abs_diff_eq!(pm.std(1, 1e-5).unwrap().item(), (1.0 + 1e-5f64).sqrt(), epsilon = 1e-15);
    let empty = t.constant(vec![], &[2, 0]).unwrap();
    assert!(empty.mean(1).is_err());
    assert!(x.sum(2).is_err());
}

#[test]
fn mean_gradient_matches_fd() {
    let r = check(
        |_, v| Ok(v[0].mean(1)?.sum_all()),
        &[(vec![0.3, -1.2, 2.2, 0.7, 0.1, 5.0], vec![2, 3])],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
}

#[test]
fn conv1x1_examples() {
    let t = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = rand_vec(&mut rng, 2 * 3 * 4);
    let x = t.constant(xv.clone(), &[2, 3, 4]).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let w = t.constant(eye, &[3, 3]).unwrap();
    let b = t.constant(vec![0.0; 3], &[3]).unwrap();
    assert_eq!(x.conv1x1(w, Some(b)).unwrap().to_vec(), xv);

    // N = 1 is a matrix-vector product plus bias
    let wv = rand_vec(&mut rng, 2 * 3);
    let bv = rand_vec(&mut rng, 2);
    let x1 = t.constant(xv[..3].to_vec(), &[1, 3, 1]).unwrap();
    let w = t.constant(wv.clone(), &[2, 3]).unwrap();
    let b = t.constant(bv.clone(), &[2]).unwrap();
    let out = x1.conv1x1(w, Some(b)).unwrap().to_vec();
    let mv = w
        .matmul(t.constant(xv[..3].to_vec(), &[3, 1]).unwrap())
        .unwrap()
        .to_vec();
    for o in 0..2 {
        assert_abs_diff_eq!(out[o], mv[o] + bv[o], epsilon = 1e-14);
    }
    let bad = t.constant(vec![0.0; 4], &[2, 2]).unwrap();
    assert!(x.conv1x1(bad, None).is_err());
}

#[test]
fn conv1x1_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = check(
        |_, v| Ok(v[0].conv1x1(v[1], Some(v[2]))?.square().sum_all()),
        &[
            (rand_vec(&mut rng, 2 * 3 * 5), vec![2, 3, 5]),
            (rand_vec(&mut rng, 4 * 3), vec![4, 3]),
            (rand_vec(&mut rng, 4), vec![4]),
        ],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
}

#[test]
fn backward_contract() {
    let t = Tape::new();
    let x = t.variable(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let s = x.sum_all();
    t.backward(s).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));

    let t = Tape::new();
    let x = t.variable(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(t.backward(x.square()), Err(Error::NonScalarLoss(_))));
}

#[test]
fn composite_mean_square_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = check(
        |_, v| Ok(v[0].matmul(v[1])?.square().mean_all()),
        &[
            (rand_vec(&mut rng, 4 * 3), vec![4, 3]),
            (rand_vec(&mut rng, 3 * 2), vec![3, 2]),
        ],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
}

#[test]
fn stop_gradient_modes() {
    let t = Tape::new();
    let x = t.variable(vec![1.5, -2.0], &[2]).unwrap();
    let d = x.stop_gradient(false);
    assert_eq!(d.to_vec(), x.to_vec());
    let st = x.stop_gradient(true);
    let loss = d.square().sum_all().add(st.scale(3.0).sum_all()).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);

    let t = Tape::new();
    let x = t.variable(vec![1.5, -2.0], &[2]).unwrap();
    t.backward(x.detach().square().sum_all().add(x.scale(0.0).sum_all()).unwrap())
        .unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn replace_value_passes_gradient() {
    let t = Tape::new();
    let x = t.variable(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.replace_value(vec![10.0, 20.0]).unwrap();
    assert_eq!(y.to_vec(), vec![10.0, 20.0]);
    t.backward(y.square().sum_all()).unwrap();
    // gradient evaluated at the replaced value, passed through unchanged
    assert_eq!(x.grad().unwrap(), vec![20.0, 40.0]);
}

#[test]
fn gather_and_group_max() {
    let t = Tape::new();
    let x = t.variable(vec![1.0, 5.0, 3.0, -1.0, 0.0, 2.0], &[1, 2, 3]).unwrap();
    let idx: Rc<[usize]> = vec![2, 0, 1, 1].into();
    let g = x.gather_last(idx).unwrap();
    assert_eq!(g.shape(), vec![1, 2, 4]);
    assert_eq!(g.to_vec(), vec![3.0, 1.0, 5.0, 5.0, 2.0, -1.0, 0.0, 0.0]);
    let m = g.group_max_last(2).unwrap();
    assert_eq!(m.to_vec(), vec![3.0, 5.0, 2.0, 0.0]);
    t.backward(m.sum_all()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    let t = Tape::new();
    let x = t.constant(vec![1.0; 3], &[3]).unwrap();
    assert!(x.gather_last(vec![3].into()).is_err());
    assert!(x.group_max_last(2).is_err());
}

#[test]
fn concat_axis1() {
    let t = Tape::new();
    let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
    let b = t.constant(vec![5.0, 6.0], &[1, 1, 2]).unwrap();
    let c = concat(&[a, b], 1).unwrap();
    assert_eq!(c.shape(), vec![1, 3, 2]);
    assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let bad = t.constant(vec![5.0, 6.0, 7.0], &[1, 1, 3]).unwrap();
    assert!(concat(&[a, bad], 1).is_err());
}

#[test]
fn deterministic_replay() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tape::new();
        let x = t.variable(rand_vec(&mut rng, 2 * 4 * 6), &[2, 4, 6]).unwrap();
        let w = t.variable(rand_vec(&mut rng, 3 * 4), &[3, 4]).unwrap();
        let h = x.conv1x1(w, None).unwrap().leaky_relu(LEAKY_SLOPE);
        let s = h.std(2, 1e-5).unwrap();
        let loss = h.div(s).unwrap().square().mean_all();
        t.backward(loss).unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (a, b) = run();
    let (c, d) = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        c.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(b, d);
}

/// Every differentiable op passes a finite-difference check for 20 seeds.
#[test]
fn randomized_gradient_suite() {
    type OpFn = for<'t> fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>>;
    // (name, op, input shapes, positive inputs)
    let cases: Vec<(&str, OpFn, Vec<Vec<usize>>, bool)> = vec![
        ("add", |_, v| Ok(v[0].add(v[1])?.square().sum_all()), vec![vec![2, 3], vec![2, 1]], false),
        ("sub", |_, v| Ok(v[0].sub(v[1])?.square().sum_all()), vec![vec![2, 3], vec![1, 3]], false),
        ("mul", |_, v| Ok(v[0].mul(v[1])?.sum_all()), vec![vec![2, 3], vec![2, 1]], false),
        ("div", |_, v| Ok(v[0].div(v[1])?.sum_all()), vec![vec![2, 3], vec![1, 3]], true),
        ("exp", |_, v| Ok(v[0].exp().sum_all()), vec![vec![5]], false),
        ("log", |_, v| Ok(v[0].log().sum_all()), vec![vec![5]], true),
        ("sqrt", |_, v| Ok(v[0].sqrt().sum_all()), vec![vec![5]], true),
        ("recip", |_, v| Ok(v[0].recip_scaled(0.3)?.sum_all()), vec![vec![5]], true),
        ("square", |_, v| Ok(v[0].square().sum_all()), vec![vec![5]], false),
        ("leaky_relu", |_, v| Ok(v[0].leaky_relu(LEAKY_SLOPE).square().sum_all()), vec![vec![7]], false),
        ("relu", |_, v| Ok(v[0].relu().square().sum_all()), vec![vec![7]], false),
        ("sigmoid", |_, v| Ok(v[0].sigmoid().sum_all()), vec![vec![7]], false),
        ("scale_add", |_, v| Ok(v[0].scale(-1.7).add_scalar(0.4).square().sum_all()), vec![vec![4]], false),
        ("sum", |_, v| Ok(v[0].sum(1)?.square().sum_all()), vec![vec![2, 3, 2]], false),
        ("mean", |_, v| Ok(v[0].mean(2)?.square().sum_all()), vec![vec![2, 3, 4]], false),
        ("std", |_, v| Ok(v[0].std(2, 1e-5)?.sum_all()), vec![vec![2, 3, 4]], false),
        ("logsumexp", |_, v| Ok(v[0].logsumexp(0)?.square().sum_all()), vec![vec![3, 4]], false),
        ("matmul", |_, v| Ok(v[0].matmul(v[1])?.square().sum_all()), vec![vec![3, 4], vec![4, 2]], false),
        ("transpose", |_, v| Ok(v[0].transpose()?.matmul(v[1])?.sum_all()), vec![vec![3, 2], vec![3, 2]], false),
        ("conv1x1", |_, v| Ok(v[0].conv1x1(v[1], Some(v[2]))?.square().sum_all()), vec![vec![2, 3, 5], vec![4, 3], vec![4]], false),
        (
            "gather_max",
            |_, v| Ok(v[0].gather_last(vec![1, 0, 3, 2, 2, 1].into())?.group_max_last(3)?.square().sum_all()),
            vec![vec![2, 4]],
            false,
        ),
        ("concat", |_, v| Ok(concat(&[v[0], v[1]], 1)?.square().mean_all()), vec![vec![1, 2, 3], vec![1, 1, 3]], false),
        ("reshape", |_, v| Ok(v[0].reshape(&[3, 2])?.matmul(v[1])?.sum_all()), vec![vec![2, 3], vec![2, 1]], false),
        ("clamp_min", |_, v| Ok(v[0].clamp_min(-0.3).square().sum_all()), vec![vec![6]], false),
        (
            "straight_through",
            |_, v| Ok(v[0].straight_through().mul(v[0])?.sum_all()),
            vec![vec![4]],
            false,
        ),
    ];
    for (name, f, shapes, positive) in cases {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<(Vec<f64>, Vec<usize>)> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    let d = if positive {
                        positive_vec(&mut rng, n)
                    } else {
                        rand_vec(&mut rng, n)
                    };
                    (d, s.clone())
                })
                .collect();
            let r = check(f, &inputs, 1e-5).unwrap();
            worst = worst.max(r.max_rel_error);
        }
        assert!(worst <= 1e-4, "{name}: relative error {worst}");
    }
}

#[test]
fn retained_intermediate_gradient() {
    let tape = Tape::new();
    let x = tape.variable(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.scale(3.0);
    let z = x.scale(5.0);
    tape.retain_grad(y);
    let loss = y.square().sum_all().add(z.sum_all()).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(y.grad().unwrap(), vec![6.0, 12.0]);
    assert_eq!(z.grad(), None);
    assert_eq!(x.grad().unwrap(), vec![23.0, 41.0]);
}
