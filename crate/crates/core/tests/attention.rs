use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taylorformer::attention::dense::{self, Kernel};
use taylorformer::attention::{
    build_tmsa, taylor_attention_linear, AttentionConfig, FeedForward, GateMode, MsarConfig,
    MsarGate, TMsa,
};
use taylorformer::counter;
use taylorformer::gradcheck::{self, project};
use taylorformer::nn::{Bound, Builder};
use taylorformer::{Tape, Tensor};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn qkv(heads: usize, d: usize, n: usize, seed: u64) -> [Tensor<f64>; 3] {
    let q = dense::normalize_qk(&rand_t(&[heads, d, n], seed), 0.5).unwrap();
    let k = dense::normalize_qk(&rand_t(&[heads, d, n], seed + 1), 0.5).unwrap();
    [q, k, rand_t(&[heads, d, n], seed + 2)]
}

#[test]
fn linear_matches_first_order_quadratic() {
    for n in [1, 2, 7, 64, 256, 1024] {
        for d in [4, 16, 64] {
            let [q, k, v] = qkv(1, d, n, (n * 100 + d) as u64);
            let lin = dense::taylor_linear(&q, &k, &v).unwrap();
            let quad = dense::taylor_quadratic(&q, &k, &v, 1).unwrap();
            let e = lin.rel_err(&quad);
            assert!(e < 1e-10, "N={n} D={d}: {e:e}");
        }
    }
}

#[test]
fn linear_matches_quadratic_at_32_bit() {
    for (n, d) in [(7, 4), (256, 16), (1024, 64)] {
        let [q, k, v] = qkv(2, d, n, 9).map(|t| t.cast::<f32>());
        let lin = dense::taylor_linear(&q, &k, &v).unwrap();
        let quad = dense::taylor_quadratic(&q, &k, &v, 1).unwrap();
        assert!(lin.rel_err(&quad) < 1e-4, "N={n} D={d}");
    }
}

#[test]
fn orthogonal_queries_give_mean_value() {
    // every query orthogonal to every key
    let n = 5;
    let mut q = Tensor::zeros([1, 2, n]);
    let mut k = Tensor::zeros([1, 2, n]);
    for j in 0..n {
        q.data_mut()[j] = 0.5;
        k.data_mut()[n + j] = if j % 2 == 0 { 0.5 } else { -0.5 };
    }
    let v = rand_t(&[1, 2, n], 3);
    let out = dense::taylor_linear(&q, &k, &v).unwrap();
    for c in 0..2 {
        let mean: f64 = v.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64;
        for i in 0..n {
            assert!((out.data()[c * n + i] - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn logits_bounded_and_weights_positive() {
    let [q, k, _] = qkv(2, 8, 50, 4);
    let l = dense::logits(&q, &k).unwrap();
    assert!(l.max_abs() <= 0.25 + 1e-15);
    let w = dense::raw_weights(&l, Kernel::TaylorFirst);
    assert!(w.data().iter().all(|&x| x >= 0.75 - 1e-15));
    let r = dense::row_normalize(&w);
    for row in r.data().chunks(50) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn normalized_ratio_to_softmax_is_bounded() {
    // (1+x)e^{-x} ranges over [lo, 1] on |x| <= 0.25, so after normalising both
    // rows each ratio lies in [lo, 1/lo].
    let lo = 0.75 * 0.25f64.exp();
    for seed in 0..10 {
        let [q, k, _] = qkv(1, 4, 40, 50 + seed);
        let l = dense::logits(&q, &k).unwrap();
        let t = dense::row_normalize(&dense::raw_weights(&l, Kernel::TaylorFirst));
        let s = dense::row_normalize(&dense::raw_weights(&l, Kernel::Softmax));
        for (a, b) in t.data().iter().zip(s.data()) {
            let r = a / b;
            assert!(r >= lo - 1e-12 && r <= 1.0 / lo + 1e-12, "{r}");
        }
    }
}

#[test]
fn second_order_is_closer_to_softmax() {
    for seed in 0..20 {
        let [q, k, _] = qkv(1, 8, 32, 200 + seed);
        let l = dense::logits(&q, &k).unwrap();
        let s = dense::row_normalize(&dense::raw_weights(&l, Kernel::Softmax));
        let e1 =
            dense::row_normalize(&dense::raw_weights(&l, Kernel::TaylorFirst)).max_abs_diff(&s);
        let e2 =
            dense::row_normalize(&dense::raw_weights(&l, Kernel::TaylorSecond)).max_abs_diff(&s);
        assert!(e2 < e1, "seed {seed}: {e2} !< {e1}");
    }
}

#[test]
fn quadratic_paths_single_token_return_value() {
    let [q, k, v] = qkv(1, 3, 1, 8);
    for kernel in [Kernel::TaylorFirst, Kernel::TaylorSecond, Kernel::Softmax] {
        let out = dense::quadratic(&q, &k, &v, kernel).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }
}

#[test]
fn linear_count_is_affine_and_quadratic_is_square() {
    let d = 8;
    let mut counts = Vec::new();
    for n in [16, 32, 64] {
        let [q, k, v] = qkv(2, d, n, 1);
        let (_, lin) = counter::record(|| dense::taylor_linear(&q, &k, &v).unwrap());
        let (_, quad) = counter::record(|| dense::taylor_quadratic(&q, &k, &v, 1).unwrap());
        assert_eq!(lin.total(), (2 * 3 * d * d * n) as u64);
        assert_eq!(quad.total(), (2 * 2 * n * n * d) as u64);
        counts.push(lin.total());
    }
    assert_eq!(counts[2] - counts[1], 2 * (counts[1] - counts[0]));
}

#[test]
fn tmsa_count_matches_closed_form() {
    for (dim, h, w) in [(4, 5, 6), (8, 8, 8), (16, 4, 7)] {
        let mut cfg = AttentionConfig::new(dim, 1);
        cfg.msar = MsarConfig { kernels: vec![3] };
        let (m, store) = build_tmsa::<f64>(&cfg, 0).unwrap();
        let x = rand_t(&[dim, h, w], 2);
        let (_, c) = counter::record(|| {
            let tape = Tape::new();
            let p = Bound::constants(&tape, &store);
            m.forward(&p, tape.constant(x.clone())).unwrap();
        });
        let hw = (h * w) as u64;
        let d = dim as u64;
        let without_dw = c.total() - c.under("qkv_dw");
        assert_eq!(without_dw, 7 * hw * d * d + 18 * hw * d, "D={dim}");
        assert_eq!(c.under("qkv_dw"), 27 * hw * d);
        assert_eq!(m.cost(h, w).without_depthwise(), without_dw);
        assert_eq!(m.cost(h, w).total(), c.total());
    }
}

#[test]
fn tmsa_cost_with_heads_matches_instrumented() {
    let mut cfg = AttentionConfig::new(12, 3);
    cfg.msar = MsarConfig::default();
    let (m, store) = build_tmsa::<f64>(&cfg, 1).unwrap();
    let x = rand_t(&[12, 6, 5], 3);
    let (_, c) = counter::record(|| {
        let tape = Tape::new();
        let p = Bound::constants(&tape, &store);
        m.forward(&p, tape.constant(x.clone())).unwrap();
    });
    let cost = m.cost(6, 5);
    assert_eq!(c.under("core"), cost.core);
    assert_eq!(c.under("gate"), cost.gate);
    assert_eq!(c.total(), cost.total());
}

#[test]
fn gate_zero_weights_is_half() {
    let cfg = AttentionConfig::new(4, 2);
    let mut b = Builder::<f64>::new(0);
    let g = MsarGate::new(&mut b, &cfg).unwrap();
    for t in b.store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let p = Bound::constants(&tape, &b.store);
    let q = tape.constant(rand_t(&[2, 2, 12], 1));
    let k = tape.constant(rand_t(&[2, 2, 12], 2));
    let out = g.forward(&p, q, k, (3, 4)).unwrap();
    assert_eq!(out.shape(), vec![2, 1, 12]);
    assert!(out.value().data().iter().all(|&x| x == 0.5));
    assert!(g.forward(&p, q, k, (4, 4)).is_err());
}

#[test]
fn gate_on_constant_input_is_constant_in_interior() {
    let cfg = AttentionConfig::new(6, 3);
    let mut b = Builder::<f64>::new(3);
    let g = MsarGate::new(&mut b, &cfg).unwrap();
    let tape = Tape::new();
    let p = Bound::constants(&tape, &b.store);
    let (h, w) = (11, 12);
    let col = rand_t(&[3, 2, 1], 5);
    let fill = |c: &Tensor<f64>| Tensor::from_fn([3, 2, h * w], |i| c.data()[i / (h * w)]);
    let q = tape.constant(fill(&col));
    let k = tape.constant(fill(&col.map(|x| -x)));
    let out = g.forward(&p, q, k, (h, w)).unwrap().value();
    for head in 0..3 {
        let r = cfg.msar.kernel_for_head(head) / 2;
        let centre = out.data()[head * h * w + (h / 2) * w + w / 2];
        for y in r..h - r {
            for x in r..w - r {
                let g = out.data()[head * h * w + y * w + x];
                assert!((g - centre).abs() < 1e-14);
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }
}

#[test]
fn zero_projection_is_identity() {
    let cfg = AttentionConfig::new(8, 2);
    let (m, mut store) = build_tmsa::<f64>(&cfg, 4).unwrap();
    store.get_mut(m.proj.weight).data_mut().fill(0.0);
    let tape = Tape::new();
    let p = Bound::constants(&tape, &store);
    let x = rand_t(&[8, 5, 5], 1);
    let y = m.forward(&p, tape.constant(x.clone())).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn identity_gate_is_plain_attention_then_projection() {
    let mut cfg = AttentionConfig::new(4, 1);
    cfg.gate = GateMode::Identity;
    let (m, store) = build_tmsa::<f64>(&cfg, 6).unwrap();
    let (h, w) = (3, 5);
    let x = rand_t(&[4, h, w], 2);
    let tape = Tape::new();
    let p = Bound::constants(&tape, &store);
    let xv = tape.constant(x.clone());
    let y = m.forward(&p, xv).unwrap();

    let xn = m.norm.forward(&p, xv).unwrap();
    let qkv = m
        .qkv_dw
        .forward(&p, m.qkv_pw.forward(&p, xn).unwrap())
        .unwrap();
    let parts = qkv.chunk(3, 0).unwrap();
    let [q, k, v] = [0, 1, 2].map(|i| parts[i].reshape(&[1, 4, h * w]).unwrap());
    let q = q.normalize(1, 0.5).unwrap();
    let k = k.normalize(1, 0.5).unwrap();
    let a = taylor_attention_linear(q, k, v).unwrap();
    let expect = xv
        .add(m.proj.forward(&p, a.reshape(&[4, h, w]).unwrap()).unwrap())
        .unwrap();
    assert_eq!(*y.value(), *expect.value());
}

#[test]
fn gated_output_never_exceeds_ungated() {
    let cfg = AttentionConfig::new(6, 2);
    let mut b = Builder::<f64>::new(8);
    let g = MsarGate::new(&mut b, &cfg).unwrap();
    let tape = Tape::new();
    let p = Bound::constants(&tape, &b.store);
    let [q, k, v] = qkv(2, 3, 20, 11);
    let (q, k, v) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let hv = taylor_attention_linear(q, k, v).unwrap();
    let gv = g.forward(&p, q, k, (4, 5)).unwrap();
    assert!(gv.value().data().iter().all(|&x| x > 0.0 && x < 1.0));
    let gated = hv.mul(gv).unwrap();
    assert!(gated.value().max_abs() <= hv.value().max_abs());
}

fn store_inputs(x: &Tensor<f64>, store: &taylorformer::nn::ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut v = vec![x.clone()];
    v.extend(store.tensors().iter().cloned());
    v
}

#[test]
fn tmsa_gradients_match_finite_differences() {
    let mut cfg = AttentionConfig::new(4, 2);
    cfg.msar = MsarConfig {
        kernels: vec![3, 5],
    };
    let (m, store) = build_tmsa::<f64>(&cfg, 12).unwrap();
    let inputs = store_inputs(&rand_t(&[4, 4, 5], 13), &store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, projected) in [("tmsa sum", false), ("tmsa projected", true)] {
        let r = gradcheck::check(name, &inputs, 24, &mut rng, |tape, vars| {
            let p = Bound::from_vars(tape, vars[1..].to_vec());
            let y = m.forward(&p, vars[0])?;
            if projected {
                project(y, 3)
            } else {
                Ok(y.sum())
            }
        })
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn feedforward_identity_shape_and_gradients() {
    let mut b = Builder::<f64>::new(2);
    let f = FeedForward::new(&mut b, 3).unwrap();
    for (h, w) in [(1, 1), (4, 7)] {
        let tape = Tape::new();
        let p = Bound::constants(&tape, &b.store);
        let y = f.forward(&p, tape.constant(rand_t(&[3, h, w], 1))).unwrap();
        assert_eq!(y.shape(), vec![3, h, w]);
    }
    let mut zeroed = b.store.clone();
    zeroed.get_mut(f.project.weight).data_mut().fill(0.0);
    let tape = Tape::new();
    let p = Bound::constants(&tape, &zeroed);
    let x = rand_t(&[3, 4, 4], 2);
    assert_eq!(*f.forward(&p, tape.constant(x.clone())).unwrap().value(), x);

    let inputs = store_inputs(&rand_t(&[3, 4, 5], 3), &b.store);
    let r = gradcheck::check(
        "ffn",
        &inputs,
        24,
        &mut ChaCha8Rng::seed_from_u64(4),
        |tape, vars| {
            let p = Bound::from_vars(tape, vars[1..].to_vec());
            project(f.forward(&p, vars[0])?, 5)
        },
    )
    .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn tmsa_rejects_wrong_channels() {
    let (m, store) = build_tmsa::<f64>(&AttentionConfig::new(4, 1), 0).unwrap();
    let tape = Tape::new();
    let p = Bound::constants(&tape, &store);
    assert!(m
        .forward(&p, tape.constant(Tensor::zeros([5, 2, 2])))
        .is_err());
    assert!(TMsa::new(&mut Builder::<f64>::new(0), &AttentionConfig::new(6, 4)).is_err());
}

/// Dyadic inputs make every sum exact, so the permuted result must match bit for bit.
fn dyadic_unit(seed: u64, n: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros([1, 4, n]);
    for j in 0..n {
        let kind: u8 = rand::Rng::gen_range(&mut rng, 0..2);
        for c in 0..4 {
            let s = if rand::Rng::gen::<bool>(&mut rng) {
                1.0
            } else {
                -1.0
            };
            let val = if kind == 0 {
                0.25 * s
            } else if c == j % 4 {
                0.5 * s
            } else {
                0.0
            };
            t.data_mut()[c * n + j] = val;
        }
    }
    t
}

fn permute(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let n = perm.len();
    Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i - i % n + perm[i % n]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_equivariance_exact(seed in 0u64..10_000, n in 1usize..24, shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        let q = dyadic_unit(seed, n);
        let k = dyadic_unit(seed + 1, n);
        let v = Tensor::from_fn([1, 4, n], |i| ((i * 7 + seed as usize) % 17) as f64 / 8.0 - 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let out = dense::taylor_linear(&q, &k, &v).unwrap();
        let pout = dense::taylor_linear(&permute(&q, &perm), &permute(&k, &perm), &permute(&v, &perm)).unwrap();
        prop_assert_eq!(pout, permute(&out, &perm));
    }

    #[test]
    fn permutation_equivariance_random(seed in 0u64..10_000, n in 2usize..40) {
        use rand::seq::SliceRandom;
        let [q, k, v] = qkv(2, 5, n, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let out = dense::taylor_linear(&q, &k, &v).unwrap();
        let pout = dense::taylor_linear(&permute(&q, &perm), &permute(&k, &perm), &permute(&v, &perm)).unwrap();
        prop_assert!(pout.max_abs_diff(&permute(&out, &perm)) < 1e-14);
    }

    #[test]
    fn normalized_vectors_have_radius(seed in 0u64..10_000, d in 1usize..9, r in 0.1f64..2.0) {
        let t = dense::normalize_qk(&rand_t(&[1, d, 6], seed), r).unwrap();
        for j in 0..6 {
            let norm = (0..d).map(|c| t.data()[c * 6 + j].powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - r).abs() < 1e-12);
        }
    }
}
