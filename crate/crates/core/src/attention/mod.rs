//! Taylor-expanded multi-head self-attention.
//!
//! The attention map `exp(q·k)` is replaced by its first-order Taylor
//! polynomial `1 + q̃·k̃` on vectors rescaled to norm 0.5, which keeps every
//! weight in `[0.75, 1.25]` and lets the sum over keys be factored out:
//!
//! ```text
//! V′ᵢ = (Σⱼ Vⱼ + q̃ᵢᵀ Σⱼ k̃ⱼ Vⱼᵀ) / (N + q̃ᵢᵀ Σⱼ k̃ⱼ)
//! ```
//!
//! [`taylor_attention_linear`] is that factored form and costs O(N·d²) per
//! head. The quadratic reference paths in [`dense`] materialise the N×N
//! weights row by row and serve as oracles and as the scaling baseline.

mod block;
pub mod dense;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::real::Real;
use crate::tensor::Var;

pub use block::{
    build_tmsa, FeedForward, MsarGate, TMsa, TMsaCost, TransformerBlock, FFN_EXPANSION,
};

pub const DEFAULT_NORM_RADIUS: f64 = 0.5;
pub const DEFAULT_MSAR_KERNELS: [usize; 3] = [3, 5, 7];

/// Whether attention outputs are rescaled by the learned MSAR gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Learned,
    /// `G ≡ 1`; no gate parameters exist.
    Identity,
}

/// Per-head gating kernel sizes, cycled when there are more heads than entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsarConfig {
    pub kernels: Vec<usize>,
}

impl Default for MsarConfig {
    fn default() -> Self {
        MsarConfig {
            kernels: DEFAULT_MSAR_KERNELS.to_vec(),
        }
    }
}

impl MsarConfig {
    pub fn kernel_for_head(&self, head: usize) -> usize {
        self.kernels[head % self.kernels.len()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(format!(
                "MSAR kernels must be a non-empty list of odd sizes, got {:?}",
                self.kernels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub norm_radius: f64,
    pub qkv_conv_kernel: usize,
    pub msar: MsarConfig,
    pub gate: GateMode,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        AttentionConfig {
            dim,
            heads,
            norm_radius: DEFAULT_NORM_RADIUS,
            qkv_conv_kernel: 3,
            msar: MsarConfig::default(),
            gate: GateMode::Learned,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if !(self.norm_radius > 0.0) {
            return Err(Error::config(format!(
                "norm_radius must be positive, got {}",
                self.norm_radius
            )));
        }
        if self.qkv_conv_kernel % 2 == 0 {
            return Err(Error::config("qkv_conv_kernel must be odd"));
        }
        self.msar.validate()
    }
}

/// Rescale every token vector of `[heads, d, N]` to norm `radius`.
pub fn normalize_qk<'t, T: Real>(q: Var<'t, T>, radius: T) -> Result<Var<'t, T>> {
    if q.shape().len() != 3 {
        return Err(Error::shape(format!(
            "expected [heads, d, N] queries/keys, got {:?}",
            q.shape()
        )));
    }
    q.normalize(1, radius)
}

/// Linear-cost first-order Taylor attention on `[heads, d, N]` inputs.
///
/// The per-channel denominator is formed as `(1·(Σk̃)ᵀ) q̃`, a d×d product, so
/// the counted cost is exactly `3·d²·N` per head.
pub fn taylor_attention_linear<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = q.shape();
    if shape.len() != 3 || k.shape() != shape || v.shape() != shape {
        return Err(Error::shape(format!(
            "taylor attention needs equal [heads, d, N] shapes, got {:?}, {:?}, {:?}",
            shape,
            k.shape(),
            v.shape()
        )));
    }
    let (heads, d, n) = (shape[0], shape[1], shape[2]);
    let tape = q.tape();
    // Σⱼ k̃ⱼ Vⱼᵀ : [heads, d, d]
    let kv = k.matmul(v.transpose_last2()?)?;
    let ksum = k.sum_axis(2)?; // [heads, d, 1]
    let vsum = v.sum_axis(2)?; // [heads, d, 1]
    let numer = kv.transpose_last2()?.matmul(q)?.add(vsum)?;
    let ones = tape.constant(crate::tensor::Tensor::ones([heads, d, 1]));
    let spread = ones.mul(ksum.transpose_last2()?)?;
    let denom = spread.matmul(q)?.add_scalar(T::from_count(n));
    let min_den = denom
        .value()
        .data()
        .iter()
        .fold(T::infinity(), |m, &x| m.min(x));
    if !(min_den > T::zero()) {
        return Err(Error::Numerical(format!(
            "Taylor attention denominator {min_den} is not positive; are q and k normalised?"
        )));
    }
    numer.div(denom)
}

pub(crate) fn scope(name: &str) -> crate::counter::Scope {
    nn::scope(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn normalize_3_4_to_half() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new([1, 2, 1], vec![3.0, 4.0]).unwrap());
        let n = normalize_qk(q, 0.5).unwrap().value();
        assert!((n.data()[0] - 0.3).abs() < 1e-15);
        assert!((n.data()[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_stays_zero() {
        let tape = Tape::<f64>::new();
        let q = tape.param(Tensor::zeros([1, 3, 2]));
        let n = normalize_qk(q, 0.5).unwrap();
        assert_eq!(n.value().data(), &[0.0; 6]);
        let mut g = tape.backward(n.sum()).unwrap();
        assert_eq!(g.take_or_zeros(&q).data(), &[0.0; 6]);
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(16, 3).validate().is_err());
        let mut c = AttentionConfig::new(16, 4);
        assert!(c.validate().is_ok());
        c.norm_radius = 0.0;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::new(16, 4);
        c.msar.kernels = vec![3, 4];
        assert!(c.validate().is_err());
        assert_eq!(MsarConfig::default().kernel_for_head(4), 5);
    }

    #[test]
    fn single_token_returns_its_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new([1, 2, 1], vec![0.3, 0.4]).unwrap());
        let k = tape.constant(Tensor::new([1, 2, 1], vec![-0.5, 0.0]).unwrap());
        let v = Tensor::new([1, 2, 1], vec![1.7, -2.3]).unwrap();
        let out = taylor_attention_linear(q, k, tape.constant(v.clone())).unwrap();
        assert!(out.value().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn non_positive_denominator_is_reported() {
        let tape = Tape::<f64>::new();
        // norms of 2 make q·k = -4 < -N
        let q = tape.constant(Tensor::new([1, 1, 1], vec![2.0]).unwrap());
        let k = tape.constant(Tensor::new([1, 1, 1], vec![-2.0]).unwrap());
        let v = tape.constant(Tensor::new([1, 1, 1], vec![1.0]).unwrap());
        assert!(matches!(
            taylor_attention_linear(q, k, v),
            Err(Error::Numerical(_))
        ));
    }
}
