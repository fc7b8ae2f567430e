use serde::{Deserialize, Serialize};

use super::{normalize_qk, scope, taylor_attention_linear, AttentionConfig, GateMode};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, ChannelNorm, Conv2d, ParamStore, WeightInit};
use crate::real::Real;
use crate::tensor::Var;

/// Per-head gating convolutions over `[q̃_h; k̃_h]`, one output channel each.
#[derive(Debug, Clone)]
pub struct MsarGate {
    pub convs: Vec<Conv2d>,
    pub head_dim: usize,
}

impl MsarGate {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &AttentionConfig) -> Result<Self> {
        let d = cfg.head_dim();
        let convs = (0..cfg.heads)
            .map(|h| {
                Conv2d::same(
                    b,
                    &format!("gate{h}"),
                    2 * d,
                    1,
                    cfg.msar.kernel_for_head(h),
                    1,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MsarGate { convs, head_dim: d })
    }

    /// `q`, `k`: `[heads, d, N]` with `N = h·w`. Returns `[heads, 1, N]` in (0, 1).
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (h, w) = hw;
        let shape = q.shape();
        if shape.len() != 3 || shape[2] != h * w || k.shape() != shape {
            return Err(Error::shape(format!(
                "gate expects [heads, d, {}] for a {h}x{w} map, got {:?}",
                h * w,
                shape
            )));
        }
        if shape[0] != self.convs.len() || shape[1] != self.head_dim {
            return Err(Error::config(format!(
                "gate built for {} heads of {} channels, got {:?}",
                self.convs.len(),
                self.head_dim,
                shape
            )));
        }
        let tape = p.tape();
        let d = self.head_dim;
        let mut gates = Vec::with_capacity(self.convs.len());
        for (head, conv) in self.convs.iter().enumerate() {
            let qh = q.narrow(0, head, 1)?.reshape(&[d, h, w])?;
            let kh = k.narrow(0, head, 1)?.reshape(&[d, h, w])?;
            let both = tape.concat(&[qh, kh], 0)?;
            gates.push(conv.forward(p, both)?.sigmoid().reshape(&[1, 1, h * w])?);
        }
        tape.concat(&gates, 0)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.convs.iter().map(|c| c.macs(h, w)).sum()
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv2d::num_params).sum()
    }
}

/// Multiply counts of one T-MSA call, split by stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TMsaCost {
    pub qkv_pw: u64,
    pub qkv_dw: u64,
    pub core: u64,
    pub gate: u64,
    pub proj: u64,
}

impl TMsaCost {
    pub fn total(&self) -> u64 {
        self.qkv_pw + self.qkv_dw + self.core + self.gate + self.proj
    }

    /// Everything except the depthwise Q/K/V convolution.
    pub fn without_depthwise(&self) -> u64 {
        self.total() - self.qkv_dw
    }
}

/// Pre-norm Taylor attention with MSAR gating and a residual connection.
#[derive(Debug, Clone)]
pub struct TMsa {
    pub cfg: AttentionConfig,
    pub norm: ChannelNorm,
    pub qkv_pw: Conv2d,
    pub qkv_dw: Conv2d,
    pub gate: Option<MsarGate>,
    pub proj: Conv2d,
}

impl TMsa {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.dim;
        let norm = ChannelNorm::new(b, "norm", dim);
        let qkv_pw = Conv2d::same(b, "qkv_pw", dim, 3 * dim, 1, 1, false)?;
        let kq = cfg.qkv_conv_kernel;
        let qkv_dw = Conv2d::same(b, "qkv_dw", 3 * dim, 3 * dim, kq, 3 * dim, false)?;
        let gate = match cfg.gate {
            GateMode::Learned => Some(MsarGate::new(b, cfg)?),
            GateMode::Identity => None,
        };
        let proj = Conv2d::new(b, "proj", dim, dim, 1, 1, 0, 1, false, WeightInit::Uniform)?;
        Ok(TMsa {
            cfg: cfg.clone(),
            norm,
            qkv_pw,
            qkv_dw,
            gate,
            proj,
        })
    }

    /// `x`: `[D, H, W]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.cfg.dim {
            return Err(Error::config(format!(
                "T-MSA built for {} channels, got input {:?}",
                self.cfg.dim, shape
            )));
        }
        let (hh, ww) = (shape[1], shape[2]);
        let (heads, d, n) = (self.cfg.heads, self.cfg.head_dim(), hh * ww);
        let xn = self.norm.forward(p, x)?;
        let qkv = {
            let _s = scope("qkv_pw");
            self.qkv_pw.forward(p, xn)?
        };
        let qkv = {
            let _s = scope("qkv_dw");
            self.qkv_dw.forward(p, qkv)?
        };
        let parts = qkv.chunk(3, 0)?;
        let radius = T::c(self.cfg.norm_radius);
        let q = normalize_qk(parts[0].reshape(&[heads, d, n])?, radius)?;
        let k = normalize_qk(parts[1].reshape(&[heads, d, n])?, radius)?;
        let v = parts[2].reshape(&[heads, d, n])?;
        let mut out = {
            let _s = scope("core");
            taylor_attention_linear(q, k, v)?
        };
        if let Some(gate) = &self.gate {
            let g = {
                let _s = scope("gate");
                gate.forward(p, q, k, (hh, ww))?
            };
            out = out.mul(g)?;
        }
        let out = out.reshape(&[self.cfg.dim, hh, ww])?;
        let y = {
            let _s = scope("proj");
            self.proj.forward(p, out)?
        };
        x.add(y)
    }

    pub fn cost(&self, h: usize, w: usize) -> TMsaCost {
        let (heads, d, n) = (
            self.cfg.heads as u64,
            self.cfg.head_dim() as u64,
            (h * w) as u64,
        );
        TMsaCost {
            qkv_pw: self.qkv_pw.macs(h, w),
            qkv_dw: self.qkv_dw.macs(h, w),
            core: heads * 3 * d * d * n,
            gate: self.gate.as_ref().map_or(0, |g| g.macs(h, w)),
            proj: self.proj.macs(h, w),
        }
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params()
            + self.qkv_pw.num_params()
            + self.qkv_dw.num_params()
            + self.gate.as_ref().map_or(0, MsarGate::num_params)
            + self.proj.num_params()
    }
}

/// Pre-norm gated depthwise feedforward with a residual connection.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: ChannelNorm,
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub project: Conv2d,
    pub hidden: usize,
}

pub const FFN_EXPANSION: usize = 2;

impl FeedForward {
    pub fn new<T: Real>(b: &mut Builder<T>, dim: usize) -> Result<Self> {
        let hidden = FFN_EXPANSION * dim;
        Ok(FeedForward {
            norm: ChannelNorm::new(b, "norm", dim),
            expand: Conv2d::same(b, "expand", dim, 2 * hidden, 1, 1, false)?,
            dw: Conv2d::same(b, "dw", 2 * hidden, 2 * hidden, 3, 2 * hidden, false)?,
            project: Conv2d::same(b, "project", hidden, dim, 1, 1, false)?,
            hidden,
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let _s = scope("ffn");
        let y = self.norm.forward(p, x)?;
        let y = self.dw.forward(p, self.expand.forward(p, y)?)?;
        let halves = y.chunk(2, 0)?;
        let y = halves[0].gelu().mul(halves[1])?;
        x.add(self.project.forward(p, y)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand.macs(h, w) + self.dw.macs(h, w) + self.project.macs(h, w)
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params()
            + self.expand.num_params()
            + self.dw.num_params()
            + self.project.num_params()
    }
}

/// T-MSA followed by the feedforward.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: TMsa,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &AttentionConfig) -> Result<Self> {
        let attn = b.scoped("attn", |b| TMsa::new(b, cfg))?;
        let ffn = b.scoped("ffn", |b| FeedForward::new(b, cfg.dim))?;
        Ok(TransformerBlock { attn, ffn })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = {
            let _s = scope("tmsa");
            self.attn.forward(p, x)?
        };
        self.ffn.forward(p, y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.attn.cost(h, w).total() + self.ffn.macs(h, w)
    }

    pub fn num_params(&self) -> usize {
        self.attn.num_params() + self.ffn.num_params()
    }
}

/// Standalone T-MSA with its own parameter store, handy for tests and benches.
pub fn build_tmsa<T: Real>(cfg: &AttentionConfig, seed: u64) -> Result<(TMsa, ParamStore<T>)> {
    let mut b = Builder::new(seed);
    let m = TMsa::new(&mut b, cfg)?;
    Ok((m, b.store))
}
