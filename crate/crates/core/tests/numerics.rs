use num_complex::Complex64;
use pbnet::numerics::{
    build_operator, estimate_sigma_max, LinearOperator, OperatorSpec, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn real(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_real(shape, v).unwrap()
}

/// O(n^2) unitary DFT over every axis, straight from the definition.
fn naive_dft(x: &Tensor, axes: usize) -> Tensor {
    let shape = x.shape().to_vec();
    let nd = shape.len();
    let strides: Vec<usize> = (0..nd).map(|a| shape[a + 1..].iter().product()).collect();
    let unravel = |mut i: usize| -> Vec<usize> {
        strides
            .iter()
            .map(|&s| {
                let q = i / s;
                i %= s;
                q
            })
            .collect()
    };
    let n = x.len();
    let first = nd - axes;
    let scale: f64 = shape[first..].iter().product::<usize>() as f64;
    let mut out = vec![c(0.0, 0.0); n];
    for (k, o) in out.iter_mut().enumerate() {
        let kk = unravel(k);
        for (j, v) in x.data().iter().enumerate() {
            let jj = unravel(j);
            if (0..first).any(|a| kk[a] != jj[a]) {
                continue;
            }
            let phase: f64 = (first..nd)
                .map(|a| (kk[a] * jj[a]) as f64 / shape[a] as f64)
                .sum();
            *o += v * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * phase);
        }
        *o /= scale.sqrt();
    }
    Tensor::new(shape, out).unwrap()
}

/// Dense matrix of an operator, column j = A e_j.
fn dense(op: &LinearOperator) -> Vec<Vec<Complex64>> {
    let n: usize = op.in_shape().iter().product();
    (0..n)
        .map(|j| {
            let mut e = Tensor::zeros(op.in_shape());
            e.data_mut()[j] = c(1.0, 0.0);
            op.apply_forward(&e).unwrap().into_data()
        })
        .collect()
}

/// Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = cs * akp - sn * akq;
                    a[k][q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[test]
fn forward_examples() {
    let id = LinearOperator::identity(&[2]).unwrap();
    assert_eq!(id.apply_forward(&real(&[2], &[1.0, 2.0])).unwrap(), real(&[2], &[1.0, 2.0]));

    let diag = LinearOperator::diagonal(real(&[2], &[2.0, 3.0]));
    assert_eq!(diag.apply_forward(&real(&[2], &[1.0, 1.0])).unwrap(), real(&[2], &[2.0, 3.0]));

    let dft = LinearOperator::dft(&[4]).unwrap();
    let y = dft.apply_forward(&real(&[4], &[1.0, 0.0, 0.0, 0.0])).unwrap();
    for v in y.data() {
        assert!((v - c(0.5, 0.0)).norm() < 1e-15);
    }
}

#[test]
fn adjoint_examples() {
    let id = LinearOperator::identity(&[1]).unwrap();
    assert_eq!(id.apply_adjoint(&real(&[1], &[5.0])).unwrap(), real(&[1], &[5.0]));

    let diag = LinearOperator::diagonal(Tensor::new(vec![1], vec![c(0.0, 2.0)]).unwrap());
    let y = diag.apply_adjoint(&real(&[1], &[1.0])).unwrap();
    assert_eq!(y.data()[0], c(0.0, -2.0));

    let mask = LinearOperator::mask(&[2], vec![0]).unwrap();
    assert_eq!(mask.apply_adjoint(&real(&[1], &[7.0])).unwrap(), real(&[2], &[7.0, 0.0]));
}

#[test]
fn shape_mismatch_is_rejected() {
    let op = LinearOperator::dft(&[4]).unwrap();
    let err = op.apply_forward(&Tensor::zeros(&[3])).unwrap_err();
    assert!(err.to_string().contains("expected [4]"), "{err}");
    assert!(op.apply_adjoint(&Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn dft_matches_naive_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (shape, axes) in [(vec![6], 1), (vec![4, 5], 2), (vec![3, 4, 4], 2), (vec![2, 3, 4], 3)] {
        let x = Tensor::random_uniform(&shape, &mut rng);
        let op = LinearOperator::dft_axes(&shape, axes).unwrap();
        let fast = op.apply_forward(&x).unwrap();
        let slow = naive_dft(&x, axes);
        assert!((&fast - &slow).norm() <= 1e-12 * slow.norm(), "{shape:?}");
        let back = op.apply_adjoint(&fast).unwrap();
        assert!((&back - &x).norm() <= 1e-12 * x.norm());
    }
}

#[test]
fn sigma_max_examples() {
    let diag = LinearOperator::diagonal(real(&[2], &[1.0, 2.0]));
    let est = estimate_sigma_max(&diag, 100, 3).unwrap();
    assert!((est.value - 4.0).abs() < 4e-6);

    let dft = LinearOperator::dft(&[8, 8]).unwrap();
    assert!((estimate_sigma_max(&dft, 20, 3).unwrap().value - 1.0).abs() < 1e-12);

    // Oracle: eigenvalues of the dense 4x4 normal matrix of the kernel [1, 1].
    let conv = LinearOperator::circular_convolution(&[4], real(&[2], &[1.0, 1.0])).unwrap();
    let a = dense(&conv);
    let normal: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            (0..4)
                .map(|j| {
                    let v: Complex64 = (0..4).map(|k| a[i][k].conj() * a[j][k]).sum();
                    assert!(v.im.abs() < 1e-15);
                    v.re
                })
                .collect()
        })
        .collect();
    let oracle = jacobi_eigenvalues(normal).into_iter().fold(f64::MIN, f64::max);
    assert!((oracle - 4.0).abs() < 1e-12);
    let est = estimate_sigma_max(&conv, 200, 11).unwrap();
    assert!((est.value - oracle).abs() < 1e-6 * oracle, "{} vs {oracle}", est.value);
}

#[test]
fn sigma_max_is_monotone_in_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Tensor::random_uniform(&[16], &mut rng);
    let op = LinearOperator::compose(vec![
        LinearOperator::diagonal(w),
        LinearOperator::dft(&[16]).unwrap(),
        LinearOperator::circular_convolution(&[16], real(&[3], &[1.0, -0.5, 0.25])).unwrap(),
    ])
    .unwrap();
    let mut last = 0.0;
    for iters in 1..60 {
        let v = estimate_sigma_max(&op, iters, 9).unwrap().value;
        assert!(v >= last, "iters {iters}: {v} < {last}");
        last = v;
    }
}

#[test]
fn build_operator_examples() {
    let spec: OperatorSpec = serde_json::from_str(
        r#"{"kind":"composition","operators":[
            {"kind":"mask","in_shape":[4],"indices":[0,2]},
            {"kind":"dft","shape":[4]}]}"#,
    )
    .unwrap();
    let op = build_operator(&spec, true).unwrap();
    assert_eq!(op.out_shape(), &[2]);

    let spec = OperatorSpec::WeightedSum {
        coefficients: vec![1.0, 1.0],
        operands: vec![
            OperatorSpec::Identity { shape: vec![3] },
            OperatorSpec::Identity { shape: vec![3] },
        ],
    };
    let op = build_operator(&spec, true).unwrap();
    let x = real(&[3], &[1.0, -2.0, 0.5]);
    assert_eq!(op.apply_forward(&x).unwrap(), x.scale(2.0));

    let sens = vec![real(&[2, 2], &[1.0; 4]), real(&[2, 2], &[0.5; 4])];
    let op = build_operator(&OperatorSpec::CoilStack { sensitivities: sens }, true).unwrap();
    assert_eq!(op.out_shape(), &[2, 2, 2]);
}

#[test]
fn build_operator_rejects_bad_specs() {
    assert!(serde_json::from_str::<OperatorSpec>(r#"{"kind":"wavelet","shape":[4]}"#).is_err());
    assert!(serde_json::from_str::<OperatorSpec>(r#"{"kind":"identity","shape":[4],"x":1}"#).is_err());
    let broken = OperatorSpec::Composition {
        operators: vec![
            OperatorSpec::Identity { shape: vec![3] },
            OperatorSpec::Dft { shape: vec![4], axes: None },
        ],
    };
    let err = build_operator(&broken, true).unwrap_err();
    assert!(err.to_string().contains("chain"), "{err}");
    assert!(LinearOperator::mask(&[4], vec![4]).is_err());
    assert!(LinearOperator::mask(&[4], vec![1, 1]).is_err());
    assert!(LinearOperator::mask(&[4], vec![]).is_err());
}

/// Random operator with input shape `shape`, built from a seeded stream.
fn random_operator(shape: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> LinearOperator {
    let choice = if depth == 0 { rng.random_range(0..6) } else { rng.random_range(0..8) };
    match choice {
        0 => LinearOperator::identity(shape).unwrap(),
        1 => LinearOperator::diagonal(Tensor::random_uniform(shape, rng)),
        2 => {
            let axes = rng.random_range(1..=shape.len());
            LinearOperator::dft_axes(shape, axes).unwrap()
        }
        3 => {
            let n: usize = shape.iter().product();
            let mut idx: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
            if idx.is_empty() {
                idx.push(rng.random_range(0..n));
            }
            // shuffle a little so ordering is exercised
            if idx.len() > 1 {
                let a = rng.random_range(0..idx.len());
                idx.swap(0, a);
            }
            LinearOperator::mask(shape, idx).unwrap()
        }
        4 => {
            let ks: Vec<usize> = shape.iter().map(|&n| rng.random_range(1..=n.min(3))).collect();
            LinearOperator::circular_convolution(shape, Tensor::random_uniform(&ks, rng)).unwrap()
        }
        5 => {
            let coils = rng.random_range(1..4);
            LinearOperator::coil_stack((0..coils).map(|_| Tensor::random_uniform(shape, rng)).collect())
                .unwrap()
        }
        6 => {
            let len = rng.random_range(1..=3);
            let mut ops = vec![random_operator(shape, depth - 1, rng)];
            for _ in 1..len {
                let next = random_operator(ops[0].out_shape(), depth - 1, rng);
                ops.insert(0, next);
            }
            LinearOperator::compose(ops).unwrap()
        }
        _ => {
            // shape-preserving operands so they can be summed
            let len = rng.random_range(1..=3);
            let operands: Vec<_> = (0..len)
                .map(|_| match rng.random_range(0..3) {
                    0 => LinearOperator::diagonal(Tensor::random_uniform(shape, rng)),
                    1 => LinearOperator::dft(shape).unwrap(),
                    _ => LinearOperator::identity(shape).unwrap(),
                })
                .collect();
            let coeffs = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            LinearOperator::weighted_sum(coeffs, operands).unwrap()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn adjoint_consistency(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = if rng.random_bool(0.5) {
            vec![rng.random_range(1..7)]
        } else {
            vec![rng.random_range(1..5), rng.random_range(1..5)]
        };
        let op = random_operator(&shape, 4, &mut rng);
        let u = Tensor::random_uniform(op.in_shape(), &mut rng);
        let v = Tensor::random_uniform(op.out_shape(), &mut rng);
        let au = op.apply_forward(&u).unwrap();
        let ahv = op.apply_adjoint(&v).unwrap();
        let lhs = au.dot(&v);
        let rhs = u.dot(&ahv);
        prop_assert!((lhs - rhs).norm() <= 1e-10 * au.norm() * v.norm() + 1e-300,
            "{:?}: {} vs {}", op.kind(), lhs, rhs);
    }

    #[test]
    fn dft_is_unitary(seed in any::<u64>(), n in 1usize..9, m in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::random_uniform(&[n, m], &mut rng);
        let y = Tensor::random_uniform(&[n, m], &mut rng);
        let f = LinearOperator::dft(&[n, m]).unwrap();
        let fx = f.apply_forward(&x).unwrap();
        let fy = f.apply_forward(&y).unwrap();
        prop_assert!((fx.dot(&fy) - x.dot(&y)).norm() <= 1e-12 * x.norm() * y.norm());
        prop_assert!((fx.norm() - x.norm()).abs() <= 1e-12 * x.norm());
    }

    #[test]
    fn sigma_max_of_diagonal(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::random_uniform(&[n], &mut rng);
        let truth = w.data().iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
        // separate the top weight so 100 iterations are enough at 1e-6
        let mut w = w;
        let top = w.data().iter().enumerate()
            .max_by(|a, b| a.1.norm_sqr().partial_cmp(&b.1.norm_sqr()).unwrap()).unwrap().0;
        let second = w.data().iter().enumerate().filter(|(i, _)| *i != top)
            .map(|(_, v)| v.norm_sqr()).fold(0.0, f64::max);
        if second > 0.9 * truth {
            w.data_mut()[top] *= 1.2;
        }
        let truth = w.data().iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
        let est = estimate_sigma_max(&LinearOperator::diagonal(w), 100, seed).unwrap();
        prop_assert!((est.value - truth).abs() <= 1e-6 * truth, "{} vs {}", est.value, truth);
    }

    #[test]
    fn weighted_sum_matches_explicit_sum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [4, 3];
        let a = LinearOperator::diagonal(Tensor::random_uniform(&shape, &mut rng));
        let b = LinearOperator::dft(&shape).unwrap();
        let d = LinearOperator::circular_convolution(&shape, Tensor::random_uniform(&[2, 2], &mut rng)).unwrap();
        let coeffs = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let x = Tensor::random_uniform(&shape, &mut rng);
        let ws = LinearOperator::weighted_sum(coeffs.clone(), vec![a.clone(), b.clone(), d.clone()]).unwrap();
        let mut explicit = a.apply_forward(&x).unwrap().scale(coeffs[0]);
        explicit = &explicit + &b.apply_forward(&x).unwrap().scale(coeffs[1]);
        explicit = &explicit + &d.apply_forward(&x).unwrap().scale(coeffs[2]);
        prop_assert_eq!(ws.apply_forward(&x).unwrap(), explicit);
    }
}
