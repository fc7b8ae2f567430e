use crate::error::{Error, Result};
use crate::real::Real;

/// Result shape of broadcasting `a` against `b` under trailing-dimension
/// alignment (numpy rules).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() {
            1
        } else {
            a[i - (n - a.len())]
        };
        let db = if i < n - b.len() {
            1
        } else {
            b[i - (n - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed inside `out` (0 along broadcast axes).
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output element as `(out_index, a_index, b_index)` rows: calls
/// `row(out_start, a_start, a_step, b_start, b_step, len)` once per run along
/// the last axis.
fn for_each_row(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut row: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        row(0, 0, 0, 0, 0, 1);
        return;
    }
    let len = out[nd - 1];
    let rows: usize = out[..nd - 1].iter().product();
    let (step_a, step_b) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    for r in 0..rows {
        row(r * len, ia, step_a, ib, step_b, len);
        // odometer over the leading axes
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn binary<T: Real>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    if ashape == bshape {
        return Ok((
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            ashape.to_vec(),
        ));
    }
    let out = broadcast_shape(ashape, bshape)?;
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let sa = strides_in(ashape, &out);
    let sb = strides_in(bshape, &out);
    for_each_row(&out, &sa, &sb, |o, ia, da, ib, db, len| {
        let dst = &mut data[o..o + len];
        match (da, db) {
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&a[ia..ia + len]).zip(&b[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            (1, 0) => {
                let y = b[ib];
                for (d, &x) in dst.iter_mut().zip(&a[ia..ia + len]) {
                    *d = f(x, y);
                }
            }
            (0, 1) => {
                let x = a[ia];
                for (d, &y) in dst.iter_mut().zip(&b[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = f(a[ia + k * da], b[ib + k * db]);
                }
            }
        }
    });
    Ok((data, out))
}

/// Sum `grad` (shaped `out`) down to `target` by accumulating over broadcast
/// axes.
pub(crate) fn reduce_to<T: Real>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![T::zero(); n];
    let st = strides_in(target, out);
    let zero = vec![0usize; out.len()];
    for_each_row(out, &st, &zero, |o, it, dt, _, _, len| {
        let src = &grad[o..o + len];
        if dt == 1 {
            for (d, &g) in acc[it..it + len].iter_mut().zip(src) {
                *d += g;
            }
        } else {
            let mut s = T::zero();
            for &g in src {
                s += g;
            }
            acc[it] += s;
        }
    });
    acc
}

/// `out[i] = g[i] * h(a[ia], b[ib])` over the broadcast index map, then reduced
/// onto `target` (either `ashape` or `bshape`).
pub(crate) fn binary_grad<T: Real>(
    g: &[T],
    out: &[usize],
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    target: &[usize],
    h: impl Fn(T, T) -> T,
) -> Vec<T> {
    let sa = strides_in(ashape, out);
    let sb = strides_in(bshape, out);
    let mut local = vec![T::zero(); g.len()];
    for_each_row(out, &sa, &sb, |o, ia, da, ib, db, len| {
        for k in 0..len {
            local[o + k] = g[o + k] * h(a[ia + k * da], b[ib + k * db]);
        }
    });
    reduce_to(&local, out, target)
}
