//! Tape-free attention paths on plain tensors laid out `[heads, d, N]`.
//!
//! [`taylor_linear`] evaluates the factored form through the tape ops (on a
//! throwaway constant tape). The quadratic paths stream over query rows, so
//! their memory stays O(N·d) while their multiply count is `2·N²·d` per head.

use crate::counter;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor};

/// Similarity used by the quadratic paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `1 + x`
    TaylorFirst,
    /// `1 + x + x²/2`
    TaylorSecond,
    /// `exp(x)`
    Softmax,
}

impl Kernel {
    pub fn taylor(order: u32) -> Result<Self> {
        match order {
            1 => Ok(Kernel::TaylorFirst),
            2 => Ok(Kernel::TaylorSecond),
            o => Err(Error::config(format!(
                "Taylor order must be 1 or 2, got {o}"
            ))),
        }
    }

    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Kernel::TaylorFirst => T::one() + x,
            Kernel::TaylorSecond => T::one() + x + x * x * T::c(0.5),
            Kernel::Softmax => x.exp(),
        }
    }
}

fn dims<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match q.shape() {
        [h, d, n] if k.shape() == q.shape() && v.shape() == q.shape() => Ok((*h, *d, *n)),
        _ => Err(Error::shape(format!(
            "attention needs equal [heads, d, N] shapes, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ))),
    }
}

pub fn normalize_qk<T: Real>(q: &Tensor<T>, radius: T) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = super::normalize_qk(tape.constant(q.clone()), radius)?;
    Ok((*out.value()).clone())
}

/// Factored Taylor attention, linear in N.
pub fn taylor_linear<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = super::taylor_attention_linear(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    )?;
    Ok((*out.value()).clone())
}

/// Row-streamed `Σⱼ f(q̃ᵢ·k̃ⱼ) Vⱼ / Σⱼ f(q̃ᵢ·k̃ⱼ)`, in query blocks against key tiles.
pub fn quadratic<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    kernel: Kernel,
) -> Result<Tensor<T>> {
    let (heads, d, n) = dims(q, k, v)?;
    counter::add((2 * heads * n * n * d) as u64);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); heads * d * n];
    let mut xbuf = vec![T::zero(); TILE.min(n)];
    let mut acc = vec![T::zero(); QBLOCK * d];
    let mut wsum = [T::zero(); QBLOCK];
    // running maxima, only used by softmax
    let mut m = [T::zero(); QBLOCK];
    for h in 0..heads {
        let base = h * d * n;
        let row = |a: usize, j0: usize, t: usize| base + a * n + j0..base + a * n + j0 + t;
        for i0 in (0..n).step_by(QBLOCK) {
            let b = QBLOCK.min(n - i0);
            acc.fill(T::zero());
            wsum.fill(T::zero());
            m.fill(T::neg_infinity());
            for j0 in (0..n).step_by(TILE) {
                let t = TILE.min(n - j0);
                for r in 0..b {
                    let x = &mut xbuf[..t];
                    x.fill(T::zero());
                    for a in 0..d {
                        let qa = qd[base + a * n + i0 + r];
                        for (xj, &kj) in x.iter_mut().zip(&kd[row(a, j0, t)]) {
                            *xj += qa * kj;
                        }
                    }
                    let acc = &mut acc[r * d..(r + 1) * d];
                    match kernel {
                        Kernel::TaylorFirst => x.iter_mut().for_each(|x| *x = T::one() + *x),
                        Kernel::TaylorSecond => x
                            .iter_mut()
                            .for_each(|x| *x = T::one() + *x + *x * *x * T::c(0.5)),
                        Kernel::Softmax => {
                            let tm = x
                                .iter()
                                .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
                            if tm > m[r] {
                                let scale = (m[r] - tm).exp();
                                wsum[r] *= scale;
                                acc.iter_mut().for_each(|a| *a *= scale);
                                m[r] = tm;
                            }
                            let mr = m[r];
                            x.iter_mut().for_each(|x| *x = (*x - mr).exp());
                        }
                    }
                    wsum[r] += sum(x);
                    for (a, acc) in acc.iter_mut().enumerate() {
                        *acc += dot(x, &vd[row(a, j0, t)]);
                    }
                }
            }
            for r in 0..b {
                for a in 0..d {
                    out[base + a * n + i0 + r] = acc[r * d + a] / wsum[r];
                }
            }
        }
    }
    Tensor::new([heads, d, n], out)
}

const QBLOCK: usize = 16;
const TILE: usize = 256;
const LANES: usize = 8;

// Independent partial sums so the reductions vectorise.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |s, &x| s + x)
}

fn sum<T: Real>(a: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let tail = chunks.remainder().iter().fold(T::zero(), |s, &x| s + x);
    for x in chunks {
        for l in 0..LANES {
            lanes[l] += x[l];
        }
    }
    lanes.iter().fold(tail, |s, &x| s + x)
}

pub fn taylor_quadratic<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    order: u32,
) -> Result<Tensor<T>> {
    quadratic(q, k, v, Kernel::taylor(order)?)
}

pub fn softmax_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    quadratic(q, k, v, Kernel::Softmax)
}

/// Logits `q̃ᵢ·k̃ⱼ` as `[heads, N, N]`.
pub fn logits<T: Real>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (heads, d, n) = dims(q, k, q)?;
    if k.shape() != q.shape() {
        return Err(Error::shape("logits need equal query and key shapes"));
    }
    let qt = q.transpose_last2()?;
    let mut out = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let mut x = T::zero();
                for a in 0..d {
                    x += qt.data()[h * n * d + i * d + a] * k.data()[h * d * n + a * n + j];
                }
                out[h * n * n + i * n + j] = x;
            }
        }
    }
    Tensor::new([heads, n, n], out)
}

/// Unnormalised similarity weights `f(logit)`.
pub fn raw_weights<T: Real>(logits: &Tensor<T>, kernel: Kernel) -> Tensor<T> {
    logits.map(|x| kernel.eval(x))
}

/// Row-normalised weights; rows are the last axis.
pub fn row_normalize<T: Real>(w: &Tensor<T>) -> Tensor<T> {
    let n = *w.shape().last().unwrap_or(&1);
    let mut out = w.clone();
    for row in out.data_mut().chunks_mut(n) {
        let s: T = row.iter().copied().sum();
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}
