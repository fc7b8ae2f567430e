//! Differentiable ops on [`Var`]. Each op computes its value eagerly and
//! records a closure that maps the output gradient to input gradients.

use std::rc::Rc;

use super::broadcast;
use super::kernels::{self, ConvGeom, DeformGeom};
use super::{Tape, Tensor, Var};
use crate::counter;
use crate::error::{Error, Result};
use crate::real::Real;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: BinOp) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let f: fn(T, T) -> T = match op {
            BinOp::Add => |x: T, y: T| x + y,
            BinOp::Sub => |x: T, y: T| x - y,
            BinOp::Mul => |x: T, y: T| x * y,
            BinOp::Div => |x: T, y: T| x / y,
        };
        let (data, shape) = broadcast::binary(a.data(), a.shape(), b.data(), b.shape(), f)?;
        let out_shape = shape.clone();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            let (ash, bsh) = (a.shape(), b.shape());
            let ga = needs[0].then(|| {
                let d = match op {
                    BinOp::Add | BinOp::Sub => broadcast::reduce_to(g.data(), &out_shape, ash),
                    BinOp::Mul => broadcast::binary_grad(
                        g.data(),
                        &out_shape,
                        a.data(),
                        ash,
                        b.data(),
                        bsh,
                        ash,
                        |_, y| y,
                    ),
                    BinOp::Div => broadcast::binary_grad(
                        g.data(),
                        &out_shape,
                        a.data(),
                        ash,
                        b.data(),
                        bsh,
                        ash,
                        |_, y| T::one() / y,
                    ),
                };
                Tensor::new(ash.to_vec(), d).expect("grad shape")
            });
            let gb = needs[1].then(|| {
                let d = match op {
                    BinOp::Add => broadcast::reduce_to(g.data(), &out_shape, bsh),
                    BinOp::Sub => broadcast::reduce_to(g.data(), &out_shape, bsh)
                        .into_iter()
                        .map(|v| -v)
                        .collect(),
                    BinOp::Mul => broadcast::binary_grad(
                        g.data(),
                        &out_shape,
                        a.data(),
                        ash,
                        b.data(),
                        bsh,
                        bsh,
                        |x, _| x,
                    ),
                    BinOp::Div => broadcast::binary_grad(
                        g.data(),
                        &out_shape,
                        a.data(),
                        ash,
                        b.data(),
                        bsh,
                        bsh,
                        |x, y| -x / (y * y),
                    ),
                };
                Tensor::new(bsh.to_vec(), d).expect("grad shape")
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Div)
    }

    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_saved = Rc::clone(&y);
        self.tape.record((*y).clone(), &[self], move |g, needs| {
            vec![needs[0].then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y_saved.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                Tensor::new(g.shape().to_vec(), data).expect("grad shape")
            })]
        })
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(self, s: T) -> Var<'t, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.mul_scalar(-T::one())
    }

    /// `x^p`, intended for positive inputs.
    pub fn powf(self, p: T) -> Var<'t, T> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn hardswish(self) -> Var<'t, T> {
        self.unary(hardswish, hardswish_grad)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Hard clamp; the gradient is passed strictly inside the bounds and
    /// zeroed on and outside them.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .record(Tensor::scalar(x.sum()), &[self], move |g, needs| {
                vec![needs[0].then(|| Tensor::full(shape, g.data()[0]))]
            })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_count(self.value().len().max(1));
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let in_shape = x.shape().to_vec();
        Ok(self
            .tape
            .record(Tensor::new(shape, out)?, &[self], move |g, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                                .copy_from_slice(src);
                        }
                    }
                    Tensor::new(in_shape, gx).expect("grad shape")
                })]
            }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range")))?;
        Ok(self
            .sum_axis(axis)?
            .mul_scalar(T::one() / T::from_count(len.max(1))))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = (*x).clone().reshape(shape.to_vec())?;
        Ok(self.tape.record(value, &[self], move |g, needs| {
            vec![needs[0].then(|| g.clone().reshape(old).expect("grad shape"))]
        }))
    }

    pub fn transpose_last2(self) -> Result<Var<'t, T>> {
        let value = self.value().transpose_last2()?;
        Ok(self.tape.record(value, &[self], move |g, needs| {
            vec![needs[0].then(|| g.transpose_last2().expect("grad shape"))]
        }))
    }

    /// Matrix product of `m×k` by `k×n`, or a batched product of
    /// `b×m×k` by `b×k×n`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let dims = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
            ([ba, m, k], [bb, k2, n]) if k == k2 && ba == bb => Some((*ba, *m, *k, *n)),
            _ => None,
        };
        let Some((batch, m, k, n)) = dims else {
            return Err(Error::shape(format!("matmul of {sa:?} by {sb:?}")));
        };
        counter::add((batch * m * k * n) as u64);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            kernels::matmul_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa.clone();
        let nd = shape.len();
        shape[nd - 1] = n;
        Ok(self
            .tape
            .record(Tensor::new(shape, out)?, &[self, other], move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        kernels::matmul_grad_a(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &b.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::new(sa, ga).expect("grad shape")
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        kernels::matmul_grad_b(
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::new(sb, gb).expect("grad shape")
                });
                vec![ga, gb]
            }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, full, inner) = split_axis(x.shape(), axis);
        if start + len > full {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) on axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let in_shape = x.shape().to_vec();
        Ok(self
            .tape
            .record(Tensor::new(shape, out)?, &[self], move |g, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![T::zero(); outer * full * inner];
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        gx[base..base + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    Tensor::new(in_shape, gx).expect("grad shape")
                })]
            }))
    }

    /// Split into `parts` equal chunks along `axis`.
    pub fn chunk(self, parts: usize, axis: usize) -> Result<Vec<Var<'t, T>>> {
        let shape = self.shape();
        check_axis(&shape, axis)?;
        if parts == 0 || shape[axis] % parts != 0 {
            return Err(Error::shape(format!(
                "cannot split axis {axis} of {shape:?} into {parts} chunks"
            )));
        }
        let step = shape[axis] / parts;
        (0..parts)
            .map(|i| self.narrow(axis, i * step, step))
            .collect()
    }

    /// 2-D cross-correlation over a single `C×H×W` image with weights
    /// `Cout × Cin/groups × kh × kw` and optional per-channel bias.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let geom = conv_geom(x.shape(), w.shape(), stride, padding, groups)?;
        let b = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.len() != geom.cout {
                    return Err(Error::shape(format!(
                        "conv bias of {:?} for {} output channels",
                        bv.shape(),
                        geom.cout
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        counter::add(geom.macs());
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); geom.cout * ho * wo];
        if let Some(b) = &b {
            for (oc, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.fill(b.data()[oc]);
            }
        }
        kernels::conv2d_forward(&geom, x.data(), w.data(), &mut out);
        let value = Tensor::new([geom.cout, ho, wo], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(value, &parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gw = needs[1].then(|| vec![T::zero(); w.len()]);
            kernels::conv2d_backward(
                &geom,
                x.data(),
                w.data(),
                g.data(),
                gx.as_deref_mut(),
                gw.as_deref_mut(),
            );
            let mut grads = vec![
                gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("grad shape")),
                gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("grad shape")),
            ];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let sums = g
                        .data()
                        .chunks(ho * wo)
                        .map(|p| p.iter().copied().sum())
                        .collect();
                    Tensor::new([geom.cout], sums).expect("grad shape")
                }));
            }
            grads
        }))
    }

    /// Depthwise deformable convolution, stride 1 with same padding.
    /// `offsets` is `2K² × H × W` (dy, dx per tap); `weight` is `C × 1 × K × K`.
    pub fn deform_depthwise(self, offsets: Var<'t, T>, weight: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, off, w) = (self.value(), offsets.value(), weight.value());
        let geom = match (x.shape(), w.shape()) {
            ([c, h, wd], [c2, 1, k, k2]) if c == c2 && k == k2 && k % 2 == 1 => DeformGeom {
                channels: *c,
                h: *h,
                w: *wd,
                k: *k,
            },
            (xs, ws) => {
                return Err(Error::shape(format!(
                    "deformable depthwise conv of {xs:?} with weights {ws:?}"
                )))
            }
        };
        if off.shape() != [2 * geom.taps(), geom.h, geom.w] {
            return Err(Error::shape(format!(
                "offsets {:?} for {}×{} kernel on {}×{}",
                off.shape(),
                geom.k,
                geom.k,
                geom.h,
                geom.w
            )));
        }
        counter::add(geom.macs());
        if counter::active() {
            counter::observe_offset(off.max_abs().f64());
        }
        let foot = kernels::deform_footprints(&geom, off.data());
        let mut out = vec![T::zero(); x.len()];
        kernels::deform_forward(&geom, x.data(), &foot, w.data(), &mut out);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self
            .tape
            .record(value, &[self, offsets, weight], move |g, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
                let mut goff = needs[1].then(|| vec![T::zero(); off.len()]);
                let mut gw = needs[2].then(|| vec![T::zero(); w.len()]);
                kernels::deform_backward(
                    &geom,
                    x.data(),
                    &foot,
                    w.data(),
                    g.data(),
                    gx.as_deref_mut(),
                    goff.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                vec![
                    gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("grad shape")),
                    goff.map(|d| Tensor::new(off.shape().to_vec(), d).expect("grad shape")),
                    gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("grad shape")),
                ]
            }))
    }

    fn gather(self, map: Vec<usize>, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let in_shape = x.shape().to_vec();
        Ok(self
            .tape
            .record(Tensor::new(shape, data)?, &[self], move |g, needs| {
                vec![needs[0].then(|| {
                    let mut gx = Tensor::zeros(in_shape);
                    let d = gx.data_mut();
                    for (&i, &gv) in map.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                    gx
                })]
            }))
    }

    /// Space-to-depth: `C×H×W → (C·r²)×(H/r)×(W/r)`.
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let [c, h, w] = shape[..] else {
            return Err(Error::shape(format!(
                "pixel_unshuffle expects C×H×W, got {shape:?}"
            )));
        };
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(format!(
                "pixel_unshuffle factor {r} does not divide {h}×{w}"
            )));
        }
        let map = kernels::unshuffle_map(c, h, w, r);
        self.gather(map, vec![c * r * r, h / r, w / r])
    }

    /// Depth-to-space, the inverse of [`Var::pixel_unshuffle`].
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let [cr, h, w] = shape[..] else {
            return Err(Error::shape(format!(
                "pixel_shuffle expects C×H×W, got {shape:?}"
            )));
        };
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::shape(format!(
                "pixel_shuffle factor {r} does not divide {cr} channels"
            )));
        }
        let c = cr / (r * r);
        let fwd = kernels::unshuffle_map(c, h * r, w * r, r);
        let mut inv = vec![0; fwd.len()];
        for (j, &i) in fwd.iter().enumerate() {
            inv[i] = j;
        }
        self.gather(inv, vec![c, h * r, w * r])
    }

    /// Rescale every vector along `axis` to Euclidean norm `radius`; zero
    /// vectors stay zero.
    pub fn normalize(self, axis: usize, radius: T) -> Result<Var<'t, T>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = xd[(o * len + a) * inner + i];
                    norms[o * inner + i] += v * v;
                }
            }
        }
        for n in norms.iter_mut() {
            *n = n.sqrt();
        }
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let n = norms[o * inner + i];
                    let idx = (o * len + a) * inner + i;
                    out[idx] = if n > T::zero() {
                        xd[idx] * (radius / n)
                    } else {
                        T::zero()
                    };
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(value, &[self], move |g, needs| {
            vec![needs[0].then(|| {
                let (xd, gd) = (x.data(), g.data());
                let mut gx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let n = norms[o * inner + i];
                        if n <= T::zero() {
                            continue;
                        }
                        let at = |a: usize| (o * len + a) * inner + i;
                        let mut proj = T::zero();
                        for a in 0..len {
                            proj += xd[at(a)] * gd[at(a)];
                        }
                        let inv = T::one() / n;
                        for a in 0..len {
                            let xh = xd[at(a)] * inv;
                            gx[at(a)] = radius * inv * (gd[at(a)] - xh * proj * inv);
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), gx).expect("grad shape")
            })]
        }))
    }
}

pub(crate) fn conv_geom(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let ([cin, h, w], [cout, cig, kh, kw]) = (xs, ws) else {
        return Err(Error::shape(format!(
            "conv2d expects C×H×W input and 4-D weights, got {xs:?} and {ws:?}"
        )));
    };
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::config(format!(
            "groups {groups} must divide both {cin} input and {cout} output channels"
        )));
    }
    if *cig != cin / groups {
        return Err(Error::shape(format!(
            "weights {ws:?} expect {} input channels per group, input has {}",
            cig,
            cin / groups
        )));
    }
    if stride == 0 || h + 2 * padding < *kh || w + 2 * padding < *kw {
        return Err(Error::shape(format!(
            "kernel {kh}×{kw} (stride {stride}, padding {padding}) does not fit {h}×{w}"
        )));
    }
    Ok(ConvGeom {
        cin: *cin,
        h: *h,
        w: *w,
        cout: *cout,
        kh: *kh,
        kw: *kw,
        stride,
        padding,
        groups,
    })
}

impl<T: Real> Tape<T> {
    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat of zero tensors"));
        };
        let base = first.shape();
        check_axis(&base, axis)?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {base:?} vs {s:?}"
                )));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(
            self.record(Tensor::new(shape, out)?, parts, move |g, needs| {
                let mut grads: Vec<Option<Vec<T>>> = needs
                    .iter()
                    .zip(&lens)
                    .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g.data()[pos..pos + l * inner]);
                        }
                        pos += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(shapes)
                    .map(|(gp, s)| gp.map(|d| Tensor::new(s, d).expect("grad shape")))
                    .collect()
            }),
        )
    }

    /// Elementwise sum of equally shaped variables.
    pub fn sum_all<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let Some((&first, rest)) = parts.split_first() else {
            return Err(Error::shape("sum of zero tensors"));
        };
        rest.iter().try_fold(first, |acc, &p| acc.add(p))
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn hardswish<T: Real>(x: T) -> T {
    let three = T::c(3.0);
    if x <= -three {
        T::zero()
    } else if x >= three {
        x
    } else {
        x * (x + three) / T::c(6.0)
    }
}

#[inline]
fn hardswish_grad<T: Real>(x: T, _y: T) -> T {
    let three = T::c(3.0);
    if x < -three {
        T::zero()
    } else if x > three {
        T::one()
    } else {
        (T::c(2.0) * x + three) / T::c(6.0)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let inner = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let inner = k * (x + T::c(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}
