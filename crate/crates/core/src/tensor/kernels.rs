//! Slice-level compute kernels. None of these touch the multiply counter;
//! counting happens in the tape ops that call them.

use crate::real::Real;

pub fn transpose<T: Real>(src: &[T], dst: &mut [T], batch: usize, rows: usize, cols: usize) {
    let plane = rows * cols;
    for b in 0..batch {
        let s = &src[b * plane..(b + 1) * plane];
        let d = &mut dst[b * plane..(b + 1) * plane];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `ga += g · bᵀ` with `g: m×n`, `b: k×n`, `ga: m×k`.
pub fn matmul_grad_a<T: Real>(g: &[T], b: &[T], ga: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `gb += aᵀ · g` with `a: m×k`, `g: m×n`, `gb: k×n`.
pub fn matmul_grad_b<T: Real>(a: &[T], g: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, grow, &mut gb[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Static description of a 2-D convolution over a single `C×H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Multiplies of the forward pass, padded taps included.
    pub fn macs(&self) -> u64 {
        (self.cout * self.cin_per_group() * self.kh * self.kw * self.out_h() * self.out_w()) as u64
    }

    /// Output columns `ox` for which `ox*stride + kx - padding` lands in `[0, w)`.
    #[inline]
    fn ox_range(&self, kx: usize, wo: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.padding as isize;
        // ox*s + off >= 0  and  ox*s + off <= w-1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (self.w as isize - 1 - off).div_euclid(s) + 1;
        let lo = (lo.max(0) as usize).min(wo);
        let hi = hi.clamp(0, wo as isize) as usize;
        (lo, hi.max(lo))
    }

    #[inline]
    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Cross-correlation forward. `out` must be zeroed (or hold the bias).
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], out: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
    for oc in 0..g.cout {
        let grp = oc / cog;
        let dst = &mut out[oc * plane_out..(oc + 1) * plane_out];
        for icg in 0..cig {
            let ic = grp * cig + icg;
            let src = &x[ic * plane_in..(ic + 1) * plane_in];
            let wbase = (oc * cig + icg) * g.kh * g.kw;
            if pointwise {
                let wv = wt[wbase];
                if wv != T::zero() {
                    axpy(wv, src, dst);
                }
                continue;
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wt[wbase + ky * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = g.ox_range(kx, wo);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let Some(iy) = g.iy(oy, ky) else { continue };
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = lo + kx - g.padding;
                            axpy(wv, &srow[ix0..ix0 + (hi - lo)], &mut drow[lo..hi]);
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.padding;
                                drow[ox] += wv * srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate input and weight gradients of [`conv2d_forward`].
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
    for oc in 0..g.cout {
        let grp = oc / cog;
        let gsrc = &gout[oc * plane_out..(oc + 1) * plane_out];
        for icg in 0..cig {
            let ic = grp * cig + icg;
            let xs = &x[ic * plane_in..(ic + 1) * plane_in];
            let wbase = (oc * cig + icg) * g.kh * g.kw;
            if pointwise {
                if let Some(gx) = gx.as_deref_mut() {
                    let wv = wt[wbase];
                    if wv != T::zero() {
                        axpy(wv, gsrc, &mut gx[ic * plane_in..(ic + 1) * plane_in]);
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[wbase] += dot(gsrc, xs);
                }
                continue;
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wi = wbase + ky * g.kw + kx;
                    let wv = wt[wi];
                    let (lo, hi) = g.ox_range(kx, wo);
                    if lo == hi {
                        continue;
                    }
                    let mut wacc = T::zero();
                    for oy in 0..ho {
                        let Some(iy) = g.iy(oy, ky) else { continue };
                        let grow = &gsrc[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            let ix0 = lo + kx - g.padding;
                            let n = hi - lo;
                            if gw.is_some() {
                                wacc += dot(&grow[lo..hi], &xs[iy * g.w + ix0..iy * g.w + ix0 + n]);
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let base = ic * plane_in + iy * g.w + ix0;
                                axpy(wv, &grow[lo..hi], &mut gx[base..base + n]);
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.padding;
                                if gw.is_some() {
                                    wacc += grow[ox] * xs[iy * g.w + ix];
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[ic * plane_in + iy * g.w + ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[wi] += wacc;
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-1, same-padded depthwise deformable convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl DeformGeom {
    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Four interpolation multiplies plus one weight multiply per channel,
    /// tap and pixel.
    pub fn macs(&self) -> u64 {
        (5 * self.channels * self.taps() * self.h * self.w) as u64
    }
}

/// Bilinear footprint of one sampling point: corner flat indices (`usize::MAX`
/// marks an out-of-image corner, which reads as zero) and weights in the order
/// (y0,x0), (y0,x1), (y1,x0), (y1,x1), plus the fractional parts.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear<T> {
    pub idx: [usize; 4],
    pub wt: [T; 4],
    pub fy: T,
    pub fx: T,
}

const OUTSIDE: usize = usize::MAX;

#[inline]
pub fn bilinear<T: Real>(py: T, px: T, h: usize, w: usize) -> Bilinear<T> {
    let y0f = py.floor();
    let x0f = px.floor();
    let fy = py - y0f;
    let fx = px - x0f;
    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
    let at = |y: isize, x: isize| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            y as usize * w + x as usize
        } else {
            OUTSIDE
        }
    };
    let one = T::one();
    Bilinear {
        idx: [
            at(y0, x0),
            at(y0, x0 + 1),
            at(y0 + 1, x0),
            at(y0 + 1, x0 + 1),
        ],
        wt: [
            (one - fy) * (one - fx),
            (one - fy) * fx,
            fy * (one - fx),
            fy * fx,
        ],
        fy,
        fx,
    }
}

#[inline]
fn corner<T: Real>(plane: &[T], i: usize) -> T {
    if i == OUTSIDE {
        T::zero()
    } else {
        plane[i]
    }
}

#[inline]
fn sample<T: Real>(plane: &[T], b: &Bilinear<T>) -> T {
    b.wt[0] * corner(plane, b.idx[0])
        + b.wt[1] * corner(plane, b.idx[1])
        + b.wt[2] * corner(plane, b.idx[2])
        + b.wt[3] * corner(plane, b.idx[3])
}

/// Sampling footprints for every (tap, pixel), shared by all channels.
/// Offsets are laid out `[2·K², H, W]` with `dy` at `2t` and `dx` at `2t+1`.
pub fn deform_footprints<T: Real>(g: &DeformGeom, offsets: &[T]) -> Vec<Bilinear<T>> {
    let pad = (g.k / 2) as isize;
    let hw = g.h * g.w;
    let mut out = Vec::with_capacity(g.taps() * hw);
    for t in 0..g.taps() {
        let (ky, kx) = ((t / g.k) as isize, (t % g.k) as isize);
        let dy = &offsets[2 * t * hw..(2 * t + 1) * hw];
        let dx = &offsets[(2 * t + 1) * hw..(2 * t + 2) * hw];
        for oy in 0..g.h {
            for ox in 0..g.w {
                let p = oy * g.w + ox;
                let py = T::c((oy as isize + ky - pad) as f64) + dy[p];
                let px = T::c((ox as isize + kx - pad) as f64) + dx[p];
                out.push(bilinear(py, px, g.h, g.w));
            }
        }
    }
    out
}

pub fn deform_forward<T: Real>(
    g: &DeformGeom,
    x: &[T],
    foot: &[Bilinear<T>],
    wt: &[T],
    out: &mut [T],
) {
    let hw = g.h * g.w;
    let taps = g.taps();
    for c in 0..g.channels {
        let plane = &x[c * hw..(c + 1) * hw];
        let dst = &mut out[c * hw..(c + 1) * hw];
        for t in 0..taps {
            let wv = wt[c * taps + t];
            let fp = &foot[t * hw..(t + 1) * hw];
            for (d, b) in dst.iter_mut().zip(fp) {
                *d += wv * sample(plane, b);
            }
        }
    }
}

pub fn deform_backward<T: Real>(
    g: &DeformGeom,
    x: &[T],
    foot: &[Bilinear<T>],
    wt: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut goff: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let taps = g.taps();
    let one = T::one();
    for c in 0..g.channels {
        let plane = &x[c * hw..(c + 1) * hw];
        let gsrc = &gout[c * hw..(c + 1) * hw];
        for t in 0..taps {
            let wv = wt[c * taps + t];
            let fp = &foot[t * hw..(t + 1) * hw];
            let mut wacc = T::zero();
            for p in 0..hw {
                let b = &fp[p];
                let go = gsrc[p];
                if gw.is_some() {
                    wacc += go * sample(plane, b);
                }
                let gv = go * wv;
                if let Some(gx) = gx.as_deref_mut() {
                    let gplane = &mut gx[c * hw..(c + 1) * hw];
                    for k in 0..4 {
                        if b.idx[k] != OUTSIDE {
                            gplane[b.idx[k]] += gv * b.wt[k];
                        }
                    }
                }
                if let Some(goff) = goff.as_deref_mut() {
                    let v00 = corner(plane, b.idx[0]);
                    let v01 = corner(plane, b.idx[1]);
                    let v10 = corner(plane, b.idx[2]);
                    let v11 = corner(plane, b.idx[3]);
                    let dvy = (one - b.fx) * (v10 - v00) + b.fx * (v11 - v01);
                    let dvx = (one - b.fy) * (v01 - v00) + b.fy * (v11 - v10);
                    goff[2 * t * hw + p] += gv * dvy;
                    goff[(2 * t + 1) * hw + p] += gv * dvx;
                }
            }
            if let Some(gw) = gw.as_deref_mut() {
                gw[c * taps + t] += wacc;
            }
        }
    }
}

/// Index map of pixel unshuffle: `out[j] = in[map[j]]`.
pub fn unshuffle_map(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h / r, w / r);
    let mut map = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                for y in 0..ho {
                    for x in 0..wo {
                        map.push(ch * h * w + (y * r + i) * w + (x * r + j));
                    }
                }
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = [0.0; 2];
        matmul_acc(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, [3.0, 7.0]);
    }

    #[test]
    fn ox_range_strided() {
        let g = ConvGeom {
            cin: 1,
            h: 5,
            w: 5,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 1,
            groups: 1,
        };
        assert_eq!(g.out_w(), 3);
        // kx = 0: ix = 2*ox - 1 -> valid for ox >= 1
        assert_eq!(g.ox_range(0, 3), (1, 3));
        assert_eq!(g.ox_range(2, 3), (0, 2));
    }

    #[test]
    fn bilinear_lattice_hit_is_exact() {
        let b = bilinear(2.0f64, 3.0, 5, 5);
        assert_eq!(b.wt, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.idx[0], 2 * 5 + 3);
        let plane: Vec<f64> = (0..25).map(|i| i as f64 * 0.37).collect();
        assert_eq!(sample(&plane, &b), plane[13]);
    }

    #[test]
    fn bilinear_outside_reads_zero() {
        let plane = vec![1.0f64; 9];
        let b = bilinear(-0.5, 0.0, 3, 3);
        assert_eq!(sample(&plane, &b), 0.5);
        let b = bilinear(-3.0, -3.0, 3, 3);
        assert_eq!(sample(&plane, &b), 0.0);
    }
}
