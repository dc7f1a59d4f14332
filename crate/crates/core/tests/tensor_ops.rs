use gist_core::tensor::{finite_diff_check, ParamGroup, ParamStore, Tape, Tensor, Var};
use gist_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn trainable(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).with_requires_grad(true)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Direct-summation KL between temperature-softened distributions.
fn kl_oracle(p: &[f64], q: &[f64], t: f64) -> f64 {
    let soft = |z: &[f64]| {
        let e: Vec<f64> = z.iter().map(|x| (x / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (ps, qs) = (soft(p), soft(q));
    ps.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn matmul_identity_zero_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&[3, 3], &mut rng);
    let mut eye = Tensor::<f64>::zeros([3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let mut tape = Tape::new();
    let (e, mv, z) = (tape.leaf(&eye), tape.leaf(&m), tape.leaf(&Tensor::zeros([3, 3])));
    let im = tape.matmul(e, mv).unwrap();
    assert_eq!(tape.value(im), m.data());
    let zm = tape.matmul(z, mv).unwrap();
    assert!(tape.value(zm).iter().all(|&x| x == 0.0));

    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
    let ab = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.shape(ab), &[4, 3]);
    for (x, y) in tape.value(ab).iter().zip(naive_matmul(a.data(), b.data(), 4, 5, 3)) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(&Tensor::zeros([2, 3]));
    let b = tape.leaf(&Tensor::zeros([4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant([1, 4], vec![0.7; 4]).unwrap();
    for t in [0.5, 1.0, 3.0] {
        let p = tape.softmax_t(u, t).unwrap();
        assert!(tape.value(p).iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }
    let z = tape.constant([1, 2], vec![2.0, 0.0]).unwrap();
    let p = tape.softmax_t(z, 1.0).unwrap();
    // exp(2)/(exp(2)+1) evaluated at 30 digits
    assert!((tape.value(p)[0] - 0.880797077977882).abs() < 1e-5);
    assert!((tape.value(p)[1] - 0.119202922022118).abs() < 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = tape.leaf(&random(&[3, 5], &mut rng));
    let soft = tape.softmax_t(x, 3.0).unwrap();
    let scaled = tape.scale(x, 1.0 / 3.0).unwrap();
    let plain = tape.softmax_t(scaled, 1.0).unwrap();
    for (a, b) in tape.value(soft).iter().zip(tape.value(plain)) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_bad_temperature_and_nan() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant([1, 2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(tape.softmax_t(z, 0.0), Err(Error::Parameter(_))));
    assert!(matches!(tape.softmax_t(z, -1.0), Err(Error::Parameter(_))));
    let n = tape.constant([1, 2], vec![f64::NAN, 2.0]).unwrap();
    assert!(matches!(tape.softmax_t(n, 1.0), Err(Error::Numeric(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant([6], vec![1.0; 6]).unwrap();
    let zeros = tape.constant([6], vec![0.0; 6]).unwrap();
    let c = tape.constant([1, 6], vec![4.2; 6]).unwrap();
    let y = tape.layer_norm(c, ones, zeros, 1e-6).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 6], &mut rng);
    let xv = tape.leaf(&x);
    let shifted: Vec<f64> = x.data().iter().map(|v| v + 7.5).collect();
    let sv = tape.constant([1, 6], shifted).unwrap();
    let a = tape.layer_norm(xv, ones, zeros, 1e-6).unwrap();
    let b = tape.layer_norm(sv, ones, zeros, 1e-6).unwrap();
    for (p, q) in tape.value(a).iter().zip(tape.value(b)) {
        assert!((p - q).abs() < 1e-9);
    }

    // mean/variance oracle with a non-trivial affine
    let gamma = random(&[6], &mut rng);
    let beta = random(&[6], &mut rng);
    let (gv, bv) = (tape.leaf(&gamma), tape.leaf(&beta));
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let mean = x.data().iter().sum::<f64>() / 6.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
    for j in 0..6 {
        let expect = gamma.data()[j] * (x.data()[j] - mean) / (var + 1e-5).sqrt() + beta.data()[j];
        assert!((tape.value(y)[j] - expect).abs() < 1e-12);
    }

    let empty = tape.constant([2, 0], vec![]).unwrap();
    let e = tape.constant([0], vec![]).unwrap();
    assert!(matches!(
        tape.layer_norm(empty, e, e, 1e-5),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant([3], vec![0.0, 10.0, 1.0]).unwrap();
    let y = tape.gelu(x).unwrap();
    let v = tape.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-4);
    // 0.5·(1 + erf(1/√2)) at 30 digits
    assert!((v[2] - 0.841344746068543).abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant([2, 5], vec![0.3; 10]).unwrap();
    let l = tape.cross_entropy(u, &[0, 4]).unwrap();
    assert!((tape.scalar(l) - 5f64.ln()).abs() < 1e-12);

    let sat = tape.constant([1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
    let l = tape.cross_entropy(sat, &[1]).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random(&[2, 4], &mut rng);
    let labels = [3, 1];
    let zv = tape.leaf(&z);
    let l = tape.cross_entropy(zv, &labels).unwrap();
    let mut oracle = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &z.data()[b * 4..(b + 1) * 4];
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        oracle += -(row[y].exp() / s).ln();
    }
    assert!((tape.scalar(l) - oracle / 2.0).abs() < 1e-6);

    assert!(matches!(
        tape.cross_entropy(zv, &[0, 4]),
        Err(Error::Index { index: 4, bound: 4 })
    ));
}

#[test]
fn kl_examples() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = tape.leaf(&random(&[3, 6], &mut rng));
    for t in [0.5, 1.0, 3.0, 10.0] {
        let kl = tape.kl_divergence(a, a, t).unwrap();
        assert!(tape.scalar(kl).abs() < 1e-9);
    }
    let p = tape.constant([1, 2], vec![1.0, 0.0]).unwrap();
    let q = tape.constant([1, 2], vec![0.0, 1.0]).unwrap();
    let kl = tape.kl_divergence(p, q, 1.0).unwrap();
    let oracle = kl_oracle(&[1.0, 0.0], &[0.0, 1.0], 1.0);
    assert!((tape.scalar(kl) - oracle).abs() < 1e-8);
    // tanh(1/2), 30-digit evaluation
    assert!((oracle - 0.462117157260010).abs() < 1e-12);
    assert!(matches!(tape.kl_divergence(p, q, 0.0), Err(Error::Parameter(_))));
}

#[test]
fn kl_is_nonnegative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let k = 1 + i % 8;
        let t = [0.5, 1.0, 3.0, 10.0][i % 4];
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(&random(&[2, k], &mut rng));
        let q = tape.leaf(&random(&[2, k], &mut rng));
        let kl = tape.kl_divergence(p, q, t).unwrap();
        assert!(tape.scalar(kl) >= -1e-15);
    }
}

#[test]
fn backward_analytic_examples() {
    let mut store = ParamStore::<f64>::new();
    let w = store
        .insert("w", Tensor::new([2], vec![1.0, 2.0]).unwrap(), ParamGroup::Backbone)
        .unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let s = tape.sum(wv).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(wv).unwrap(), &[1.0, 1.0]);

    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let sq = tape.mul(wv, wv).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward_into(s, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
    assert!(matches!(tape.backward(w), Err(Error::Dimension { .. })));
    let c = tape.constant([1], vec![3.0]).unwrap();
    assert!(matches!(tape.backward(c), Err(Error::Tape(_))));
    let other = {
        let mut t2 = Tape::<f64>::new();
        let x = t2.leaf(&Tensor::new([1], vec![1.0]).unwrap().with_requires_grad(true));
        t2.sum(x).unwrap()
    };
    assert!(matches!(tape.backward(other), Err(Error::Tape(_))));
}

#[test]
fn gradient_accumulation_is_additive_and_skips_frozen() {
    let mut store = ParamStore::<f64>::new();
    let w = store
        .insert("w", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap(), ParamGroup::Head)
        .unwrap();
    let frozen = store
        .insert(
            "f",
            Tensor::new([3], vec![1.0, 1.0, 1.0]).unwrap(),
            ParamGroup::Backbone,
        )
        .unwrap();
    store.set_frozen(frozen, true);
    let step = |store: &mut ParamStore<f64>| {
        let mut tape = Tape::new();
        let (wv, fv) = (tape.param(store, w), tape.param(store, frozen));
        let prod = tape.mul(wv, fv).unwrap();
        let sq = tape.mul(prod, prod).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward_into(s, store).unwrap();
    };
    step(&mut store);
    let once = store.get(w).grad().unwrap().to_vec();
    step(&mut store);
    let twice = store.get(w).grad().unwrap().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
    assert!(store.get(frozen).grad().is_none());
}

#[test]
fn finite_diff_is_exact_for_linear_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = trainable(&[4, 3], &mut rng);
    let w = random(&[4, 3], &mut rng);
    let report = finite_diff_check(
        |tape, v| {
            let c = tape.leaf(&w);
            let p = tape.mul(v[0], c)?;
            tape.sum(p)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{report:?}");
}

/// Scalarizes an op output by a fixed random weighting so every output
/// coordinate carries gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> gist_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = tape.shape(y).to_vec();
    let r = tape.leaf(&random(&shape, &mut rng));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> gist_core::Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1])),
        ("add_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |t, v| {
            t.add_broadcast(v[0], v[1])
        }),
        ("mul_broadcast", vec![vec![3, 4], vec![4]], |t, v| {
            t.mul_broadcast(v[0], v[1])
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], -1.7)),
        ("gelu", vec![vec![3, 4]], |t, v| t.gelu(v[0])),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("softmax_t", vec![vec![3, 4]], |t, v| t.softmax_t(v[0], 3.0)),
        (
            "attention",
            vec![vec![2, 3, 4], vec![2, 3, 4], vec![2, 3, 4]],
            |t, v| t.attention(v[0], v[1], v[2], 2),
        ),
        ("attention_shared_qkv", vec![vec![1, 4, 4]], |t, v| {
            t.attention(v[0], v[0], v[0], 2)
        }),
        ("tile", vec![vec![2, 3]], |t, v| t.tile(v[0], 3)),
        ("concat_seq", vec![vec![2, 1, 3], vec![2, 2, 3]], |t, v| {
            t.concat_seq(&[v[0], v[1]])
        }),
        ("slice_seq", vec![vec![2, 4, 3]], |t, v| t.slice_seq(v[0], 1, 2)),
        ("mean_tokens", vec![vec![2, 4, 3]], |t, v| t.mean_tokens(v[0], 1, 3)),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], [3, 4])),
        ("sum", vec![vec![2, 6]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![2, 6]], |t, v| t.mean(v[0])),
        ("cross_entropy", vec![vec![3, 4]], |t, v| {
            t.cross_entropy(v[0], &[0, 3, 1])
        }),
        ("kl_divergence", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.kl_divergence(v[0], v[1], 3.0)
        }),
        ("mse", vec![vec![3, 4], vec![3, 4]], |t, v| t.mse(v[0], v[1])),
        ("cosine_loss", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.cosine_loss(v[0], v[1])
        }),
    ]
}

#[test]
fn every_op_passes_finite_differences_on_ten_seeds() {
    for (name, shapes, op) in op_cases() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| trainable(s, &mut rng)).collect();
            let report = finite_diff_check(
                |tape, v| {
                    let y = op(tape, v)?;
                    weighted_sum(tape, y, seed)
                },
                &inputs,
                1e-4,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{name} seed {seed}: {report:?}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(-30.0f64..30.0, 12),
        t in 0.1f64..10.0,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant([3, 4], data).unwrap();
        let p = tape.softmax_t(x, t).unwrap();
        for row in tape.value(p).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn f32_softmax_rows_are_distributions(data in proptest::collection::vec(-50.0f32..50.0, 8)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant([2, 4], data).unwrap();
        let p = tape.softmax_t(x, 3.0).unwrap();
        for row in tape.value(p).chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
