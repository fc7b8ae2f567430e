//! Finite-difference and oracle-equivalence suites shared by the CLI and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::dense::{self, Kernel};
use crate::attention::{
    AttentionConfig, FeedForward, MsarConfig, MsarGate, TMsa, TransformerBlock,
};
use crate::backbone::{MultiBranchBlock, Network, NetworkConfig, Skff};
use crate::embedding::{DsdcnLayer, MultiScaleEmbed, PatchEmbedConfig};
use crate::error::Result;
use crate::gradcheck::{self, project, GradReport};
use crate::nn::{Bound, Builder, ChannelNorm, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn with_params(x: Tensor<f64>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    let mut v = vec![x];
    v.extend(store.tensors().iter().cloned());
    v
}

/// Scale every tensor whose name contains `pat`, e.g. to push offsets off the lattice.
fn scale_named(store: &mut ParamStore<f64>, pat: &str, s: f64) {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).contains(pat))
        .collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v *= s;
        }
    }
}

/// A network small enough to finite-difference on an 8×8 image.
pub fn gradcheck_network_config() -> NetworkConfig {
    NetworkConfig {
        stage_channels: vec![4, 4, 8, 8],
        branch_depths: vec![vec![1, 2]; 4],
        blocks: vec![1; 4],
        heads: vec![1, 2, 2, 4],
        msar: MsarConfig {
            kernels: vec![3, 5],
        },
        zero_init_offsets: false,
        ..NetworkConfig::tiny()
    }
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradReport>>;

fn module_check<M: 'static>(
    name: &'static str,
    module: M,
    store: ParamStore<f64>,
    x: Tensor<f64>,
    per_input: usize,
    f: for<'t> fn(&M, &Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Check {
    let inputs = with_params(x, &store);
    Box::new(move |rng| {
        gradcheck::check(name, &inputs, per_input, rng, |tape, vars| {
            let p = Bound::from_vars(tape, vars[1..].to_vec());
            project(f(&module, &p, vars[0])?, 17)
        })
    })
}

fn op_check(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
) -> Check {
    Box::new(move |rng| gradcheck::check(name, &inputs, 64, rng, |tape, v| project(f(tape, v)?, 5)))
}

fn checks() -> Result<Vec<Check>> {
    let mut out: Vec<Check> = vec![
        op_check("normalize_qk", vec![rand_t(&[2, 3, 5], 1)], |_, v| {
            crate::attention::normalize_qk(v[0], 0.5)
        }),
        op_check(
            "taylor_attention_linear",
            vec![
                rand_t(&[2, 3, 6], 2),
                rand_t(&[2, 3, 6], 3),
                rand_t(&[2, 3, 6], 4),
            ],
            |_, v| {
                let q = crate::attention::normalize_qk(v[0], 0.5)?;
                let k = crate::attention::normalize_qk(v[1], 0.5)?;
                crate::attention::taylor_attention_linear(q, k, v[2])
            },
        ),
        op_check(
            "deform_depthwise",
            vec![
                rand_t(&[2, 5, 6], 5),
                rand_t(&[18, 5, 6], 6).map(|x| 2.5 * x),
                rand_t(&[2, 1, 3, 3], 7),
            ],
            |_, v| v[0].deform_depthwise(v[1], v[2]),
        ),
        op_check(
            "pixel_unshuffle/shuffle",
            vec![rand_t(&[2, 4, 6], 8)],
            |_, v| v[0].pixel_unshuffle(2)?.mul_scalar(1.5).pixel_shuffle(2),
        ),
        op_check(
            "grouped conv2d",
            vec![
                rand_t(&[4, 5, 5], 9),
                rand_t(&[6, 2, 3, 3], 10),
                rand_t(&[6], 11),
            ],
            |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1, 2),
        ),
    ];

    let mut b = Builder::<f64>::new(20);
    let norm = ChannelNorm::new(&mut b, "norm", 3);
    out.push(module_check(
        "channel norm",
        norm,
        b.store,
        rand_t(&[3, 4, 4], 21),
        64,
        |m, p, x| m.forward(p, x),
    ));

    let mut cfg = AttentionConfig::new(4, 2);
    cfg.msar = MsarConfig {
        kernels: vec![3, 5],
    };
    let mut b = Builder::<f64>::new(22);
    let gate = MsarGate::new(&mut b, &cfg)?;
    out.push(module_check(
        "msar gate",
        gate,
        b.store,
        rand_t(&[2, 4, 20], 23),
        32,
        |m, p, x| {
            let (q, k) = (x.narrow(1, 0, 2)?, x.narrow(1, 2, 2)?);
            m.forward(p, q, k, (4, 5))
        },
    ));

    let mut b = Builder::<f64>::new(24);
    let tmsa = TMsa::new(&mut b, &cfg)?;
    out.push(module_check(
        "t-msa block",
        tmsa,
        b.store,
        rand_t(&[4, 4, 5], 25),
        24,
        |m, p, x| m.forward(p, x),
    ));

    let mut b = Builder::<f64>::new(26);
    let ffn = FeedForward::new(&mut b, 3)?;
    out.push(module_check(
        "feedforward",
        ffn,
        b.store,
        rand_t(&[3, 4, 5], 27),
        24,
        |m, p, x| m.forward(p, x),
    ));

    let mut b = Builder::<f64>::new(28);
    let tb = TransformerBlock::new(&mut b, &cfg)?;
    out.push(module_check(
        "transformer block",
        tb,
        b.store,
        rand_t(&[4, 3, 4], 29),
        16,
        |m, p, x| m.forward(p, x),
    ));

    let mut b = Builder::<f64>::new(30);
    let layer = DsdcnLayer::new(&mut b, 2, 3, 3, 3.0, false)?;
    let mut store = b.store;
    scale_named(&mut store, "offset_pw", 4.0);
    out.push(module_check(
        "dsdcn layer",
        layer,
        store,
        rand_t(&[2, 5, 6], 31),
        32,
        |m, p, x| m.forward(p, x),
    ));

    let mut b = Builder::<f64>::new(32);
    let emb = MultiScaleEmbed::new(
        &mut b,
        2,
        &PatchEmbedConfig::new(vec![1, 2], vec![2, 2]),
        false,
    )?;
    out.push(module_check(
        "multi-scale embed",
        emb,
        b.store,
        rand_t(&[2, 5, 5], 33),
        16,
        |m, p, x| {
            let outs = m.forward(p, x)?;
            p.tape().concat(&outs, 0)
        },
    ));

    let mut b = Builder::<f64>::new(34);
    let skff = Skff::new(&mut b, 4, 2, 2)?;
    out.push(module_check(
        "skff",
        skff,
        b.store,
        rand_t(&[8, 3, 3], 35),
        32,
        |m, p, x| {
            let (a, c) = (x.narrow(0, 0, 4)?, x.narrow(0, 4, 4)?);
            m.forward(p, &[a, c])
        },
    ));

    let net_cfg = gradcheck_network_config();
    let mut b = Builder::<f64>::new(36);
    let mbb = MultiBranchBlock::new(&mut b, &net_cfg, 0, 4)?;
    out.push(module_check(
        "multi-branch block",
        mbb,
        b.store,
        rand_t(&[4, 4, 4], 37),
        8,
        |m, p, x| m.forward(p, x),
    ));

    let (net, store) = Network::new::<f64>(&net_cfg, 38)?;
    let image = rand_t(&[3, 8, 8], 39).map(|x| 0.5 + 0.5 * x);
    out.push(module_check(
        "full network",
        net,
        store,
        image,
        3,
        |m, p, x| m.forward(p, x),
    ));
    Ok(out)
}

/// Every finite-difference check, in a fixed order.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    checks()?.iter().map(|c| c(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub n: usize,
    pub d: usize,
    /// Linear vs first-order quadratic at 64 bit.
    pub rel_err_f64: f64,
    /// Same at 32 bit.
    pub rel_err_f32: f64,
    /// Largest |normalised weight − softmax weight| for orders 1 and 2.
    pub softmax_dev_order1: f64,
    pub softmax_dev_order2: f64,
}

pub const EQUIVALENCE_NS: [usize; 6] = [1, 2, 7, 64, 256, 1024];
pub const EQUIVALENCE_DS: [usize; 3] = [4, 16, 64];

/// Oracle comparisons over `ns × ds`. Weight deviations are only computed for `N ≤ 256`.
pub fn equivalence_suite(ns: &[usize], ds: &[usize], seed: u64) -> Result<Vec<EquivalenceRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for &d in ds {
            let s = seed ^ ((n as u64) << 16) ^ d as u64;
            let q = dense::normalize_qk(&rand_t(&[1, d, n], s), 0.5)?;
            let k = dense::normalize_qk(&rand_t(&[1, d, n], s + 1), 0.5)?;
            let v = rand_t(&[1, d, n], s + 2);
            let e64 =
                dense::taylor_linear(&q, &k, &v)?.rel_err(&dense::taylor_quadratic(&q, &k, &v, 1)?);
            let (q32, k32, v32) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
            let e32 = dense::taylor_linear(&q32, &k32, &v32)?
                .rel_err(&dense::taylor_quadratic(&q32, &k32, &v32, 1)?);
            let (mut dev1, mut dev2) = (f64::NAN, f64::NAN);
            if n <= 256 {
                let l = dense::logits(&q, &k)?;
                let sm = dense::row_normalize(&dense::raw_weights(&l, Kernel::Softmax));
                dev1 = dense::row_normalize(&dense::raw_weights(&l, Kernel::TaylorFirst))
                    .max_abs_diff(&sm);
                dev2 = dense::row_normalize(&dense::raw_weights(&l, Kernel::TaylorSecond))
                    .max_abs_diff(&sm);
            }
            rows.push(EquivalenceRow {
                n,
                d,
                rel_err_f64: e64,
                rel_err_f32: e32,
                softmax_dev_order1: dev1,
                softmax_dev_order2: dev2,
            });
        }
    }
    Ok(rows)
}
