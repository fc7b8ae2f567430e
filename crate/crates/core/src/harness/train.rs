//! L1 training with Adam and cosine-annealed learning rate, plus evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::haze::Pair;
use super::image::{crop, flip_horizontal};
use super::metrics::{psnr, ssim};
use crate::backbone::Network;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub iterations: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    pub log_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            iterations: 2000,
            batch: 8,
            crop: 64,
            lr_start: 2e-4,
            lr_end: 1e-6,
            seed: 0,
            flip: true,
            log_every: 100,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.crop == 0 {
            return Err(Error::config("iterations, batch and crop must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 < end <= start, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        Ok(())
    }

    /// Cosine annealing from `lr_start` at the first step to `lr_end` at the last.
    pub fn lr(&self, iter: usize) -> f64 {
        let span = self.iterations.saturating_sub(1).max(1) as f64;
        let frac = (iter as f64 / span).min(1.0);
        self.lr_end
            + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step = T::c(lr * c2.sqrt() / c1);
        let eps = T::c(self.eps * c2.sqrt());
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    /// Mean loss since the previous entry.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub entries: Vec<LogEntry>,
}

/// Mean absolute error of one image pair, with gradients into `store`.
pub fn l1_step<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    hazy: &Tensor<T>,
    clean: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let p = Bound::params(&tape, store);
    let out = net.forward(&p, tape.constant(hazy.clone()))?;
    let loss = out.sub(tape.constant(clean.clone()))?.abs().mean();
    let value = loss.item().f64();
    let mut grads = tape.backward(loss)?;
    Ok((value, p.collect(&mut grads)))
}

fn augment<T: Real>(
    pair: &Pair<T>,
    spec: &TrainSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, h, w] = pair.hazy.shape()[..] else {
        return Err(Error::shape("training images must be 3×H×W"));
    };
    if spec.crop > h || spec.crop > w {
        return Err(Error::config(format!(
            "crop {} larger than {h}×{w} image",
            spec.crop
        )));
    }
    let (y, x) = (
        rng.gen_range(0..=h - spec.crop),
        rng.gen_range(0..=w - spec.crop),
    );
    let mut hz = crop(&pair.hazy, y, x, spec.crop)?;
    let mut cl = crop(&pair.clean, y, x, spec.crop)?;
    if spec.flip && rng.gen::<bool>() {
        hz = flip_horizontal(&hz);
        cl = flip_horizontal(&cl);
    }
    Ok((hz, cl))
}

/// Train in place. `on_log` runs every `log_every` steps and after the last.
pub fn train<T: Real>(
    net: &Network,
    store: &mut ParamStore<T>,
    data: &[Pair<T>],
    spec: &TrainSpec,
    mut on_log: impl FnMut(&LogEntry, &ParamStore<T>) -> Result<()>,
) -> Result<TrainLog> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::config("no training pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut adam = Adam::new(store);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut since = 0.0;
    let mut count = 0;
    for iter in 0..spec.iterations {
        let mut acc: Vec<Tensor<T>> = Vec::new();
        let mut batch_loss = 0.0;
        for _ in 0..spec.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let (hz, cl) = augment(&data[idx], spec, &mut rng)?;
            let (loss, grads) = l1_step(net, store, &hz, &cl)?;
            batch_loss += loss;
            if acc.is_empty() {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        let inv = T::one() / T::from_count(spec.batch);
        for a in &mut acc {
            for x in a.data_mut() {
                *x *= inv;
            }
        }
        let lr = spec.lr(iter);
        adam.step(store, &acc, lr);
        let loss = batch_loss / spec.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became {loss} at step {iter}"
            )));
        }
        log.losses.push(loss);
        since += loss;
        count += 1;
        let last = iter + 1 == spec.iterations;
        if (spec.log_every > 0 && (iter + 1) % spec.log_every == 0) || last {
            let entry = LogEntry {
                iter: iter + 1,
                lr,
                loss: since / count as f64,
            };
            on_log(&entry, store)?;
            log.entries.push(entry);
            since = 0.0;
            count = 0;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub hazy_psnr: f64,
    pub dehazed_psnr: f64,
    pub hazy_ssim: f64,
    pub dehazed_ssim: f64,
}

impl EvalReport {
    pub fn gain_db(&self) -> f64 {
        self.dehazed_psnr - self.hazy_psnr
    }
}

/// Network output clamped to `[0, 1]`.
pub fn dehaze<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    hazy: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(net
        .infer(store, hazy)?
        .map(|v| v.max(T::zero()).min(T::one())))
}

/// Mean PSNR/SSIM of hazy and dehazed images against the clean targets.
pub fn evaluate<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    data: &[Pair<T>],
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::config("no evaluation pairs"));
    }
    let mut r = EvalReport {
        pairs: data.len(),
        hazy_psnr: 0.0,
        dehazed_psnr: 0.0,
        hazy_ssim: 0.0,
        dehazed_ssim: 0.0,
    };
    for pair in data {
        let out = dehaze(net, store, &pair.hazy)?;
        r.hazy_psnr += psnr(&pair.hazy, &pair.clean)?;
        r.dehazed_psnr += psnr(&out, &pair.clean)?;
        r.hazy_ssim += ssim(&pair.hazy, &pair.clean)?;
        r.dehazed_ssim += ssim(&out, &pair.clean)?;
    }
    let n = data.len() as f64;
    r.hazy_psnr /= n;
    r.dehazed_psnr /= n;
    r.hazy_ssim /= n;
    r.dehazed_ssim /= n;
    Ok(r)
}
