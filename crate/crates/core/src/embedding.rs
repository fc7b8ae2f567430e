//! Depthwise-separable deformable convolution and the multi-scale patch
//! embedding built from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound, Builder, Conv2d, ParamId, WeightInit};
use crate::real::Real;
use crate::tensor::Var;

pub const DEFAULT_OFFSET_BOUND: f64 = 3.0;

/// Multiplies and parameter scalars of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: u64,
    pub params: u64,
}

/// Standard deformable conv: `K×K` offset conv to `2K²` channels, `K×K`
/// deformable sampling, bias-free.
pub fn dcn_cost(m: u64, n: u64, k: u64, h: u64, w: u64) -> LayerCost {
    let k2 = k * k;
    LayerCost {
        macs: 2 * m * k2 * k2 * h * w + m * n * k2 * h * w + 4 * m * k2 * h * w,
        params: 2 * m * k2 * k2 + m * n * k2,
    }
}

/// Depthwise-separable deformable conv.
pub fn dsdcn_cost(m: u64, n: u64, k: u64, h: u64, w: u64) -> LayerCost {
    let k2 = k * k;
    LayerCost {
        macs: 8 * m * k2 * h * w + m * n * h * w,
        params: 4 * m * k2 + m * n,
    }
}

/// One DSDCN layer: offsets from a separable conv, clamped, then depthwise
/// deformable sampling and a pointwise mix. Stride 1, same padding, no bias.
#[derive(Debug, Clone)]
pub struct DsdcnLayer {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub offset_bound: f64,
    pub offset_dw: Conv2d,
    pub offset_pw: Conv2d,
    pub weight: ParamId,
    pub pw: Conv2d,
}

impl DsdcnLayer {
    /// `zero_offsets` starts the offset head at zero, i.e. as a plain
    /// separable convolution.
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        offset_bound: f64,
        zero_offsets: bool,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!(
                "DSDCN kernel must be odd, got {kernel}"
            )));
        }
        if !(offset_bound >= 0.0) {
            return Err(Error::config(format!(
                "offset bound must be >= 0, got {offset_bound}"
            )));
        }
        let taps = kernel * kernel;
        let offset_dw = Conv2d::same(b, "offset_dw", cin, cin, kernel, cin, false)?;
        let init = if zero_offsets {
            WeightInit::Zeros
        } else {
            WeightInit::Uniform
        };
        let offset_pw = Conv2d::new(b, "offset_pw", cin, 2 * taps, 1, 1, 0, 1, false, init)?;
        let weight = b.uniform("deform.weight", &[cin, 1, kernel, kernel], taps);
        let pw = Conv2d::same(b, "pw", cin, cout, 1, 1, false)?;
        Ok(DsdcnLayer {
            cin,
            cout,
            kernel,
            offset_bound,
            offset_dw,
            offset_pw,
            weight,
            pw,
        })
    }

    /// Clamped offsets `[2K², H, W]` predicted from `x`.
    pub fn offsets<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let raw = self.offset_pw.forward(p, self.offset_dw.forward(p, x)?)?;
        let b = T::c(self.offset_bound);
        Ok(raw.clamp(-b, b))
    }

    /// Deformable depthwise sampling with given offsets (clamped here too),
    /// then the pointwise mix.
    pub fn sample<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        offsets: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let b = T::c(self.offset_bound);
        let y = x.deform_depthwise(offsets.clamp(-b, b), p.get(self.weight))?;
        self.pw.forward(p, y)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.cin {
            return Err(Error::shape(format!(
                "DSDCN layer expects {} input channels, got {:?}",
                self.cin, shape
            )));
        }
        let off = self.offsets(p, x)?;
        let y = x.deform_depthwise(off, p.get(self.weight))?;
        self.pw.forward(p, y)
    }

    /// The same layer with the offsets forced to zero.
    pub fn separable_forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = x.conv2d(p.get(self.weight), None, 1, self.kernel / 2, self.cin)?;
        self.pw.forward(p, y)
    }

    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        dsdcn_cost(
            self.cin as u64,
            self.cout as u64,
            self.kernel as u64,
            h as u64,
            w as u64,
        )
    }

    pub fn num_params(&self) -> usize {
        self.offset_dw.num_params()
            + self.offset_pw.num_params()
            + self.cin * self.kernel * self.kernel
            + self.pw.num_params()
    }

    /// Largest distance (per axis) from an output pixel to an input pixel it
    /// can depend on.
    pub fn reach(&self) -> usize {
        self.kernel / 2 + self.offset_bound.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    /// Number of stacked DSDCN layers per branch.
    pub depths: Vec<usize>,
    /// Output channels per branch.
    pub channels: Vec<usize>,
    #[serde(default = "default_bound")]
    pub offset_bound: f64,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_bound() -> f64 {
    DEFAULT_OFFSET_BOUND
}

fn default_kernel() -> usize {
    3
}

impl PatchEmbedConfig {
    pub fn new(depths: Vec<usize>, channels: Vec<usize>) -> Self {
        PatchEmbedConfig {
            depths,
            channels,
            offset_bound: DEFAULT_OFFSET_BOUND,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.channels.len() {
            return Err(Error::config(format!(
                "patch embedding needs one channel count per branch, got depths {:?} channels {:?}",
                self.depths, self.channels
            )));
        }
        if self.depths.iter().any(|&d| d == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("branch depths and channels must be positive"));
        }
        Ok(())
    }
}

/// Parallel branches of stacked DSDCN + Hardswish layers.
#[derive(Debug, Clone)]
pub struct MultiScaleEmbed {
    pub branches: Vec<Vec<DsdcnLayer>>,
}

impl MultiScaleEmbed {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        cin: usize,
        cfg: &PatchEmbedConfig,
        zero_offsets: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut branches = Vec::with_capacity(cfg.depths.len());
        for (i, (&depth, &c)) in cfg.depths.iter().zip(&cfg.channels).enumerate() {
            let layers = b.scoped(format!("branch{i}"), |b| {
                (0..depth)
                    .map(|l| {
                        let m = if l == 0 { cin } else { c };
                        b.scoped(format!("layer{l}"), |b| {
                            DsdcnLayer::new(b, m, c, cfg.kernel, cfg.offset_bound, zero_offsets)
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            branches.push(layers);
        }
        Ok(MultiScaleEmbed { branches })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.branches
            .iter()
            .enumerate()
            .map(|(i, layers)| {
                let _s = nn::scope(&format!("branch{i}"));
                let _e = nn::scope("embed");
                layers
                    .iter()
                    .try_fold(x, |y, layer| Ok(layer.forward(p, y)?.hardswish()))
            })
            .collect()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.branches
            .iter()
            .flatten()
            .map(|l| l.cost(h, w).macs)
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.branches
            .iter()
            .flatten()
            .map(DsdcnLayer::num_params)
            .sum()
    }

    /// Per-branch `(lower, upper)` receptive-field side lengths.
    pub fn field_ranges(&self) -> Vec<(usize, usize)> {
        self.branches
            .iter()
            .map(|layers| {
                let reach: usize = layers.iter().map(DsdcnLayer::reach).sum();
                (1, 2 * reach + 1)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_examples() {
        assert_eq!(dsdcn_cost(32, 32, 3, 64, 64).macs, 13_631_488);
        assert_eq!(dsdcn_cost(1, 1, 1, 1, 1).params, 5);
        assert_eq!(dcn_cost(1, 1, 1, 1, 1).params, 3);
    }

    #[test]
    fn layer_params_match_formula() {
        let mut b = Builder::<f64>::new(0);
        let l = DsdcnLayer::new(&mut b, 5, 7, 3, 3.0, true).unwrap();
        assert_eq!(l.num_params() as u64, dsdcn_cost(5, 7, 3, 1, 1).params);
        assert_eq!(b.store.num_scalars(), l.num_params());
        assert!(DsdcnLayer::new(&mut b, 5, 7, 4, 3.0, true).is_err());
    }

    #[test]
    fn field_ranges_nest() {
        let mut b = Builder::<f64>::new(0);
        let e = MultiScaleEmbed::new(
            &mut b,
            3,
            &PatchEmbedConfig::new(vec![1, 2, 3], vec![4, 4, 4]),
            true,
        )
        .unwrap();
        assert_eq!(e.field_ranges(), vec![(1, 9), (1, 17), (1, 25)]);
    }
}
