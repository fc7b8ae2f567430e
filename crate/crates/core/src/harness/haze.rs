//! Procedural clean scenes and atmospheric-scattering haze.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Transmission, either constant or derived from a depth proxy as `exp(−β·d)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Transmission {
    Constant(f64),
    Depth { beta: f64, depth: Tensor<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazeParams {
    pub transmission: Transmission,
    pub airlight: [f64; 3],
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config(format!(
                "airlight {:?} outside [0, 1]",
                self.airlight
            )));
        }
        match &self.transmission {
            Transmission::Constant(t) if !(*t > 0.0 && *t <= 1.0) => {
                Err(Error::config(format!("transmission {t} outside (0, 1]")))
            }
            Transmission::Depth { beta, depth }
                if *beta < 0.0 || depth.data().iter().any(|d| *d < 0.0) =>
            {
                Err(Error::config(
                    "depth haze needs beta >= 0 and non-negative depth",
                ))
            }
            _ => Ok(()),
        }
    }

    fn t_at(&self, p: usize) -> f64 {
        match &self.transmission {
            Transmission::Constant(t) => *t,
            Transmission::Depth { beta, depth } => (-beta * depth.data()[p]).exp(),
        }
    }
}

/// `hazed = clean·t + A·(1 − t)`, clamped to `[0, 1]`.
pub fn apply_haze<T: Real>(clean: &Tensor<T>, params: &HazeParams) -> Result<Tensor<T>> {
    params.validate()?;
    let [3, h, w] = clean.shape()[..] else {
        return Err(Error::shape(format!(
            "haze expects 3×H×W, got {:?}",
            clean.shape()
        )));
    };
    if let Transmission::Depth { depth, .. } = &params.transmission {
        if depth.shape() != [h, w] {
            return Err(Error::shape(format!(
                "depth map {:?} for a {h}×{w} image",
                depth.shape()
            )));
        }
    }
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let t = params.t_at(p);
        let v = clean.data()[i].f64() * t + params.airlight[c] * (1.0 - t);
        T::c(if t == 1.0 {
            clean.data()[i].f64()
        } else {
            v.clamp(0.0, 1.0)
        })
    }))
}

fn colour(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

/// A clean scene: a two-colour gradient background, a few discs and
/// rectangles, and a sinusoidal texture band.
pub fn render_scene(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let (c0, c1) = (colour(rng), colour(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
        let s = ((x - 0.5) * ca + (y - 0.5) * sa + 0.5).clamp(0.0, 1.0);
        c0[c] * (1.0 - s) + c1[c] * s
    });
    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let col = colour(rng);
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.08..0.3) * h.min(w) as f64;
        let disc: bool = rng.gen();
        let (freq, amp) = (rng.gen_range(0.2..1.2), rng.gen_range(0.0..0.15));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx < r * r
                } else {
                    dy.abs() < r && dx.abs() < 0.7 * r
                };
                if inside {
                    let tex = amp * ((x as f64 + y as f64) * freq).sin();
                    for (c, cv) in col.iter().enumerate() {
                        img.data_mut()[c * h * w + y * w + x] = (cv + tex).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

/// A smooth depth proxy in `[0, 1]`: a random tilted plane plus a bump.
pub fn render_depth(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let (gy, gx) = (rng.gen_range(0.3..1.0), rng.gen_range(-0.3..0.3));
    let (by, bx) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    Tensor::from_fn([h, w], |p| {
        let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
        let bump = 0.3 * (-((y - by).powi(2) + (x - bx).powi(2)) * 8.0).exp();
        ((1.0 - y) * gy + x * gx + bump).clamp(0.0, 1.0)
    })
}

/// How haze parameters are drawn for each synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazeRanges {
    pub transmission: (f64, f64),
    pub airlight: (f64, f64),
    /// Probability of depth-dependent instead of constant transmission.
    pub depth_prob: f64,
}

impl Default for HazeRanges {
    fn default() -> Self {
        HazeRanges {
            transmission: (0.3, 0.7),
            airlight: (0.7, 1.0),
            depth_prob: 0.5,
        }
    }
}

impl HazeRanges {
    pub fn sample(&self, h: usize, w: usize, rng: &mut impl Rng) -> HazeParams {
        let (t0, t1) = self.transmission;
        let t = if t1 > t0 { rng.gen_range(t0..=t1) } else { t0 };
        let a = if self.airlight.1 > self.airlight.0 {
            rng.gen_range(self.airlight.0..=self.airlight.1)
        } else {
            self.airlight.0
        };
        let tint: f64 = rng.gen_range(-0.05..0.05);
        let airlight = [(a + tint).clamp(0.0, 1.0), a, (a - tint).clamp(0.0, 1.0)];
        let transmission = if rng.gen_bool(self.depth_prob.clamp(0.0, 1.0)) && t < 1.0 {
            // scale β so the mean transmission matches t
            let depth = render_depth(h, w, rng);
            let mean = depth.data().iter().sum::<f64>() / depth.len() as f64;
            Transmission::Depth {
                beta: -t.ln() / mean.max(1e-3),
                depth,
            }
        } else {
            Transmission::Constant(t)
        };
        HazeParams {
            transmission,
            airlight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair<T> {
    pub clean: Tensor<T>,
    pub hazy: Tensor<T>,
}

/// Deterministic synthetic dataset; pair `i` depends only on `(seed, i)`,
/// so generating in parallel does not change the result.
pub fn synth_pairs<T: Real>(
    n: usize,
    h: usize,
    w: usize,
    ranges: &HazeRanges,
    seed: u64,
) -> Result<Vec<Pair<T>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let clean = render_scene(h, w, &mut rng);
            let params = ranges.sample(h, w, &mut rng);
            let hazy = apply_haze(&clean, &params)?;
            Ok(Pair {
                clean: clean.cast(),
                hazy: hazy.cast(),
            })
        })
        .collect()
}
