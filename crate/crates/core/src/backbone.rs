//! The multi-branch encoder-decoder network.
//!
//! ```text
//! I ─ shallow 3×3 ─ enc0 ─ down ─ enc1 ─ down ─ enc2 ─ down ─ enc3
//!                    │             │             │             │
//!                    │             │             └─ cat,1×1 ─ dec2 ─ up ┘
//!                    │             └─ cat,1×1 ─ dec1 ─ up ┘
//!                    └─ cat ─ dec0 ─ up ┘
//!                              └─ refine ─ 3×3 ─ R,  I′ = I + R
//! ```
//!
//! Each `enc`/`dec`/`refine` node is a [`MultiBranchBlock`]: a multi-scale
//! patch embedding, one stack of Transformer blocks per branch, and SKFF
//! fusion. Down-sampling is pixel-unshuffle followed by a 1×1 conv, and
//! up-sampling a 1×1 conv followed by pixel-shuffle.

use serde::{Deserialize, Serialize};

use crate::attention::{
    AttentionConfig, GateMode, MsarConfig, TransformerBlock, DEFAULT_NORM_RADIUS,
};
use crate::embedding::{MultiScaleEmbed, PatchEmbedConfig, DEFAULT_OFFSET_BOUND};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Builder, Conv2d, ParamStore, WeightInit};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

pub const SCALE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Channels per encoder stage; the first is the shallow feature width.
    pub stage_channels: Vec<usize>,
    /// Per stage, the DSDCN stack depth of each branch.
    pub branch_depths: Vec<Vec<usize>>,
    /// Transformer blocks per branch, per stage.
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    #[serde(default = "one")]
    pub refinement_blocks: usize,
    #[serde(default = "default_radius")]
    pub norm_radius: f64,
    #[serde(default)]
    pub msar: MsarConfig,
    #[serde(default)]
    pub gate: GateMode,
    #[serde(default = "default_bound")]
    pub offset_bound: f64,
    /// Start every offset predictor at zero.
    #[serde(default = "yes")]
    pub zero_init_offsets: bool,
    #[serde(default = "default_reduction")]
    pub skff_reduction: usize,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_radius() -> f64 {
    DEFAULT_NORM_RADIUS
}
fn default_bound() -> f64 {
    DEFAULT_OFFSET_BOUND
}
fn default_reduction() -> usize {
    8
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl NetworkConfig {
    /// Desk-scale default: channels (16, 32, 64, 128), two branches of
    /// depths (1, 2) per stage, one block per branch, heads (1, 2, 4, 8).
    pub fn tiny() -> Self {
        NetworkConfig {
            stage_channels: vec![16, 32, 64, 128],
            branch_depths: vec![vec![1, 2]; 4],
            blocks: vec![1; 4],
            heads: vec![1, 2, 4, 8],
            refinement_blocks: 1,
            norm_radius: DEFAULT_NORM_RADIUS,
            msar: MsarConfig::default(),
            gate: GateMode::Learned,
            offset_bound: DEFAULT_OFFSET_BOUND,
            zero_init_offsets: true,
            skff_reduction: 8,
        }
    }

    /// Smaller variant (~1.4·10⁵ parameters) used by the toy training runs.
    pub fn toy() -> Self {
        NetworkConfig {
            stage_channels: vec![8, 16, 24, 32],
            ..Self::tiny()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        if self.branch_depths.len() != s || self.blocks.len() != s || self.heads.len() != s {
            return Err(Error::config(format!(
                "{s} stages but {} branch specs, {} block counts, {} head counts",
                self.branch_depths.len(),
                self.blocks.len(),
                self.heads.len()
            )));
        }
        for level in 0..s {
            self.attention(level)?.validate()?;
            self.embed(level).validate()?;
            if self.blocks[level] == 0 {
                return Err(Error::config(format!(
                    "stage {level} needs at least one block"
                )));
            }
        }
        if self.skff_reduction == 0 {
            return Err(Error::config("skff_reduction must be positive"));
        }
        Ok(())
    }

    /// Channel width of the decoder node at `level` (stage 0 keeps the
    /// concatenated width).
    pub fn decoder_channels(&self, level: usize) -> usize {
        if level == 0 && self.stages() > 1 {
            2 * self.stage_channels[0]
        } else {
            self.stage_channels[level]
        }
    }

    fn attention(&self, level: usize) -> Result<AttentionConfig> {
        self.attention_for(level, self.stage_channels[level])
    }

    pub fn attention_for(&self, level: usize, dim: usize) -> Result<AttentionConfig> {
        let mut a = AttentionConfig::new(dim, self.heads[level]);
        a.norm_radius = self.norm_radius;
        a.msar = self.msar.clone();
        a.gate = self.gate;
        a.validate()?;
        Ok(a)
    }

    fn embed(&self, level: usize) -> PatchEmbedConfig {
        self.embed_for(level, self.stage_channels[level])
    }

    pub fn embed_for(&self, level: usize, dim: usize) -> PatchEmbedConfig {
        let depths = self.branch_depths[level].clone();
        let mut e = PatchEmbedConfig::new(depths.clone(), vec![dim; depths.len()]);
        e.offset_bound = self.offset_bound;
        e
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        SCALE.pow(self.stages() as u32 - 1)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| Error::Format {
            what: "network config",
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

/// Selective-kernel fusion of equally shaped branch features.
#[derive(Debug, Clone)]
pub struct Skff {
    pub squeeze: Conv2d,
    pub select: Vec<Conv2d>,
    pub channels: usize,
}

impl Skff {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        channels: usize,
        branches: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = (channels / reduction).max(4);
        let squeeze = Conv2d::same(b, "squeeze", channels, hidden, 1, 1, true)?;
        let select = (0..branches)
            .map(|i| Conv2d::same(b, &format!("select{i}"), hidden, channels, 1, 1, true))
            .collect::<Result<_>>()?;
        Ok(Skff {
            squeeze,
            select,
            channels,
        })
    }

    /// Per-branch selection weights `[C, 1, 1]`, softmax over branches.
    pub fn weights<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        feats: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        if feats.len() != self.select.len() {
            return Err(Error::config(format!(
                "SKFF built for {} branches, got {}",
                self.select.len(),
                feats.len()
            )));
        }
        let shape = feats[0].shape();
        if shape.len() != 3 || shape[0] != self.channels || feats.iter().any(|f| f.shape() != shape)
        {
            return Err(Error::shape(format!(
                "SKFF needs equal [{}, H, W] inputs, got {:?}",
                self.channels,
                feats.iter().map(|f| f.shape()).collect::<Vec<_>>()
            )));
        }
        let tape = p.tape();
        let pooled = tape.sum_all(feats)?.mean_axis(2)?.mean_axis(1)?;
        let z = self.squeeze.forward(p, pooled)?.gelu();
        let exps = self
            .select
            .iter()
            .map(|c| Ok(c.forward(p, z)?.exp()))
            .collect::<Result<Vec<_>>>()?;
        let total = tape.sum_all(&exps)?;
        exps.into_iter().map(|e| e.div(total)).collect()
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        feats: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let _s = nn::scope("skff");
        let w = self.weights(p, feats)?;
        let parts = feats
            .iter()
            .zip(w)
            .map(|(f, w)| f.mul(w))
            .collect::<Result<Vec<_>>>()?;
        p.tape().sum_all(&parts)
    }

    pub fn macs(&self) -> u64 {
        self.squeeze.macs(1, 1) + self.select.iter().map(|c| c.macs(1, 1)).sum::<u64>()
    }

    pub fn num_params(&self) -> usize {
        self.squeeze.num_params() + self.select.iter().map(Conv2d::num_params).sum::<usize>()
    }
}

/// Multi-scale embedding, per-branch Transformer stacks, SKFF fusion.
#[derive(Debug, Clone)]
pub struct MultiBranchBlock {
    pub embed: MultiScaleEmbed,
    pub branches: Vec<Vec<TransformerBlock>>,
    pub skff: Skff,
    pub dim: usize,
}

impl MultiBranchBlock {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        cfg: &NetworkConfig,
        level: usize,
        dim: usize,
    ) -> Result<Self> {
        let ecfg = cfg.embed_for(level, dim);
        let acfg = cfg.attention_for(level, dim)?;
        let embed = b.scoped("embed", |b| {
            MultiScaleEmbed::new(b, dim, &ecfg, cfg.zero_init_offsets)
        })?;
        let branches = (0..ecfg.depths.len())
            .map(|i| {
                b.scoped(format!("branch{i}"), |b| {
                    (0..cfg.blocks[level])
                        .map(|j| b.scoped(format!("block{j}"), |b| TransformerBlock::new(b, &acfg)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let skff = b.scoped("skff", |b| {
            Skff::new(b, dim, ecfg.depths.len(), cfg.skff_reduction)
        })?;
        Ok(MultiBranchBlock {
            embed,
            branches,
            skff,
            dim,
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tokens = self.embed.forward(p, x)?;
        let mut outs = Vec::with_capacity(tokens.len());
        for (i, (t, blocks)) in tokens.into_iter().zip(&self.branches).enumerate() {
            let _s = nn::scope(&format!("branch{i}"));
            let mut y = t;
            for (j, block) in blocks.iter().enumerate() {
                let _b = nn::scope(&format!("block{j}"));
                y = block.forward(p, y)?;
            }
            outs.push(y);
        }
        self.skff.forward(p, &outs)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.embed.macs(h, w)
            + self
                .branches
                .iter()
                .flatten()
                .map(|b| b.macs(h, w))
                .sum::<u64>()
            + self.skff.macs()
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params()
            + self
                .branches
                .iter()
                .flatten()
                .map(TransformerBlock::num_params)
                .sum::<usize>()
            + self.skff.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub shallow: Conv2d,
    pub encoders: Vec<MultiBranchBlock>,
    pub down: Vec<Conv2d>,
    /// `up[s]` takes level `s + 1` to level `s`.
    pub up: Vec<Conv2d>,
    /// `reduce[s]` for levels `1..stages-1`; `None` at level 0.
    pub reduce: Vec<Option<Conv2d>>,
    pub decoders: Vec<MultiBranchBlock>,
    pub refine: Vec<MultiBranchBlock>,
    pub final_conv: Conv2d,
}

impl Network {
    pub fn new<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut b = Builder::new(seed);
        let net = Self::build(&mut b, cfg)?;
        Ok((net, b.store))
    }

    pub fn build<T: Real>(b: &mut Builder<T>, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stages();
        let ch = &cfg.stage_channels;
        let shallow = Conv2d::same(b, "shallow", 3, ch[0], 3, 1, true)?;
        let mut encoders = Vec::with_capacity(s);
        let mut down = Vec::new();
        for level in 0..s {
            encoders.push(b.scoped(format!("enc{level}"), |b| {
                MultiBranchBlock::new(b, cfg, level, ch[level])
            })?);
            if level + 1 < s {
                let name = format!("down{level}");
                down.push(Conv2d::same(
                    b,
                    &name,
                    ch[level] * SCALE * SCALE,
                    ch[level + 1],
                    1,
                    1,
                    false,
                )?);
            }
        }
        let mut up = Vec::new();
        let mut reduce = Vec::new();
        let mut decoders = Vec::new();
        for level in 0..s.saturating_sub(1) {
            let from = cfg.decoder_channels(level + 1);
            let name = format!("up{level}");
            up.push(Conv2d::same(
                b,
                &name,
                from,
                ch[level] * SCALE * SCALE,
                1,
                1,
                false,
            )?);
            reduce.push(if level == 0 {
                None
            } else {
                Some(Conv2d::same(
                    b,
                    &format!("reduce{level}"),
                    2 * ch[level],
                    ch[level],
                    1,
                    1,
                    false,
                )?)
            });
            let dim = cfg.decoder_channels(level);
            decoders.push(b.scoped(format!("dec{level}"), |b| {
                MultiBranchBlock::new(b, cfg, level, dim)
            })?);
        }
        let out_dim = cfg.decoder_channels(0);
        let refine = (0..cfg.refinement_blocks)
            .map(|i| {
                b.scoped(format!("refine{i}"), |b| {
                    MultiBranchBlock::new(b, cfg, 0, out_dim)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_conv = Conv2d::new(
            b,
            "final",
            out_dim,
            3,
            3,
            1,
            1,
            1,
            true,
            WeightInit::Uniform,
        )?;
        Ok(Network {
            cfg: cfg.clone(),
            shallow,
            encoders,
            down,
            up,
            reduce,
            decoders,
            refine,
            final_conv,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.cfg.size_multiple();
        match shape {
            [3, h, w] if h % m == 0 && w % m == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::shape(format!(
                "network input must be 3×H×W with H and W divisible by {m}, got {shape:?}"
            ))),
        }
    }

    /// `I′ = I + R` for one `3×H×W` image.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&image.shape())?;
        let tape = p.tape();
        let s = self.cfg.stages();
        let mut x = {
            let _g = nn::scope("shallow");
            self.shallow.forward(p, image)?
        };
        let mut skips = Vec::with_capacity(s);
        for level in 0..s {
            x = {
                let _g = nn::scope(&format!("enc{level}"));
                self.encoders[level].forward(p, x)?
            };
            if level + 1 < s {
                skips.push(x);
                let _g = nn::scope(&format!("down{level}"));
                x = self.down[level].forward(p, x.pixel_unshuffle(SCALE)?)?;
            }
        }
        for level in (0..s.saturating_sub(1)).rev() {
            x = {
                let _g = nn::scope(&format!("up{level}"));
                self.up[level].forward(p, x)?.pixel_shuffle(SCALE)?
            };
            let skip = skips[level];
            debug_assert_eq!(skip.shape()[1..], x.shape()[1..]);
            x = tape.concat(&[x, skip], 0)?;
            if let Some(r) = &self.reduce[level] {
                let _g = nn::scope(&format!("reduce{level}"));
                x = r.forward(p, x)?;
            }
            let _g = nn::scope(&format!("dec{level}"));
            x = self.decoders[level].forward(p, x)?;
        }
        for (i, r) in self.refine.iter().enumerate() {
            let _g = nn::scope(&format!("refine{i}"));
            x = r.forward(p, x)?;
        }
        let residual = {
            let _g = nn::scope("final");
            self.final_conv.forward(p, x)?
        };
        image.add(residual)
    }

    /// Inference on a plain tensor.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = Bound::constants(&tape, store);
        let out = self.forward(&p, tape.constant(image.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn num_params(&self) -> usize {
        self.shallow.num_params()
            + self
                .encoders
                .iter()
                .map(MultiBranchBlock::num_params)
                .sum::<usize>()
            + self
                .down
                .iter()
                .chain(&self.up)
                .map(Conv2d::num_params)
                .sum::<usize>()
            + self
                .reduce
                .iter()
                .flatten()
                .map(Conv2d::num_params)
                .sum::<usize>()
            + self
                .decoders
                .iter()
                .chain(&self.refine)
                .map(MultiBranchBlock::num_params)
                .sum::<usize>()
            + self.final_conv.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = NetworkConfig::tiny();
        let text = cfg.to_toml();
        assert_eq!(NetworkConfig::from_toml(&text).unwrap(), cfg);
        assert!(NetworkConfig::from_toml("stage_channels = [8]").is_err());
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut cfg = NetworkConfig::tiny();
        cfg.heads = vec![1, 2, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::tiny();
        cfg.heads[1] = 3;
        assert!(cfg.validate().is_err());
        assert_eq!(NetworkConfig::tiny().size_multiple(), 8);
    }

    #[test]
    fn param_count_matches_store() {
        for cfg in [NetworkConfig::tiny(), NetworkConfig::toy()] {
            let (net, store) = Network::new::<f32>(&cfg, 0).unwrap();
            assert_eq!(net.num_params(), store.num_scalars());
        }
    }
}
