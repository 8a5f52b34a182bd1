//! Dense numeric kernels behind the tape primitives.
//!
//! Every parallel reduction here partitions work into fixed-size chunks and
//! combines the partial results in chunk order, so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;

use crate::grid::Real;

/// Rows per partial sum in order-stable reductions.
const REDUCE_CHUNK: usize = 512;

/// How one operand of a binary primitive maps onto the output.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    Map(Vec<u32>),
}

impl Broadcast {
    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Map(m) => m[i] as usize,
        }
    }
}

/// Numpy-style result shape of broadcasting `a` against `b`.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Index map from every element of `out` to the element of `input` it reads.
pub(crate) fn broadcast_map(input: &[usize], out: &[usize]) -> Broadcast {
    if input == out {
        return Broadcast::Same;
    }
    if input.iter().product::<usize>() == 1 {
        return Broadcast::Scalar;
    }
    let rank = out.len();
    let padded: Vec<usize> = (0..rank)
        .map(|k| {
            if k + input.len() >= rank {
                input[k + input.len() - rank]
            } else {
                1
            }
        })
        .collect();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for k in (0..rank).rev() {
        strides[k] = if padded[k] == 1 { 0 } else { acc };
        acc *= padded[k];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off as u32);
        for k in (0..rank).rev() {
            idx[k] += 1;
            off += strides[k];
            if idx[k] < out[k] {
                break;
            }
            off -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
    Broadcast::Map(map)
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums `chunks` of partial vectors of length `n` in order.
fn ordered_sum<T: Real>(parts: Vec<Vec<T>>, n: usize) -> Vec<T> {
    let mut total = vec![T::zero(); n];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Affine map over the trailing axis.

pub(crate) fn affine_forward<T: Real>(x: &[T], w: &[T], b: &[T], cin: usize, cout: usize) -> Vec<T> {
    let rows = x.len() / cin;
    let mut out = vec![T::zero(); rows * cout];
    out.par_chunks_mut(cout * REDUCE_CHUNK)
        .zip(x.par_chunks(cin * REDUCE_CHUNK))
        .for_each(|(o, xi)| {
            for (orow, xrow) in o.chunks_mut(cout).zip(xi.chunks(cin)) {
                orow.copy_from_slice(b);
                for (ic, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[ic * cout..(ic + 1) * cout];
                    for (acc, &wv) in orow.iter_mut().zip(wrow) {
                        *acc += xv * wv;
                    }
                }
            }
        });
    out
}

/// Returns (grad x, grad w, grad b).
pub(crate) fn affine_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    cin: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cin;
    let mut gx = vec![T::zero(); rows * cin];
    gx.par_chunks_mut(cin * REDUCE_CHUNK)
        .zip(g.par_chunks(cout * REDUCE_CHUNK))
        .for_each(|(gxc, gc)| {
            for (gxrow, grow) in gxc.chunks_mut(cin).zip(gc.chunks(cout)) {
                for (ic, slot) in gxrow.iter_mut().enumerate() {
                    let wrow = &w[ic * cout..(ic + 1) * cout];
                    *slot = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                }
            }
        });
    let parts: Vec<Vec<T>> = x
        .par_chunks(cin * REDUCE_CHUNK)
        .zip(g.par_chunks(cout * REDUCE_CHUNK))
        .map(|(xc, gc)| {
            let mut part = vec![T::zero(); cin * cout + cout];
            let (gw, gb) = part.split_at_mut(cin * cout);
            for (xrow, grow) in xc.chunks(cin).zip(gc.chunks(cout)) {
                for (ic, &xv) in xrow.iter().enumerate() {
                    let gwrow = &mut gw[ic * cout..(ic + 1) * cout];
                    for (acc, &gv) in gwrow.iter_mut().zip(grow) {
                        *acc += xv * gv;
                    }
                }
                for (acc, &gv) in gb.iter_mut().zip(grow) {
                    *acc += gv;
                }
            }
            part
        })
        .collect();
    let mut total = ordered_sum(parts, cin * cout + cout);
    let gb = total.split_off(cin * cout);
    (gx, total, gb)
}

// ---------------------------------------------------------------------------
// 3D convolution, kernel 3, stride 1, zero padding, channels last.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvDims {
    #[inline]
    fn cell(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.d + k
    }
}

#[inline]
fn shifted(i: usize, delta: usize, n: usize) -> Option<usize> {
    // delta in 0..3 maps to offsets -1, 0, +1.
    let s = i + delta;
    if s == 0 || s > n {
        None
    } else {
        Some(s - 1)
    }
}

/// Patch matrix for row `i`: `[w * d, 27 * c]`, zero outside the grid.
/// With `flip` the taps point the other way, which gathers output
/// gradients for the input-gradient pass.
fn im2col<T: Real>(x: &[T], dims: ConvDims, i: usize, c: usize, flip: bool, col: &mut [T]) {
    let ConvDims { h, w: wd, d, .. } = dims;
    let tap = |t: usize| if flip { 2 - t } else { t };
    col.fill(T::zero());
    for j in 0..wd {
        for k in 0..d {
            let row = &mut col[(j * d + k) * 27 * c..][..27 * c];
            for di in 0..3 {
                let Some(si) = shifted(i, tap(di), h) else { continue };
                for dj in 0..3 {
                    let Some(sj) = shifted(j, tap(dj), wd) else { continue };
                    for dk in 0..3 {
                        let Some(sk) = shifted(k, tap(dk), d) else { continue };
                        let off = (di * 3 + dj) * 3 + dk;
                        row[off * c..(off + 1) * c].copy_from_slice(&x[dims.cell(si, sj, sk) * c..][..c]);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3_forward<T: Real>(x: &[T], w: &[T], b: &[T], dims: ConvDims) -> Vec<T> {
    let ConvDims { h, w: wd, d, cin, cout } = dims;
    let cells = wd * d;
    let mut out = vec![T::zero(); h * cells * cout];
    out.par_chunks_mut(cells * cout)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); cells * 27 * cin],
            |col, (i, plane)| {
                im2col(x, dims, i, cin, false, col);
                for acc in plane.chunks_exact_mut(cout) {
                    acc.copy_from_slice(b);
                }
                T::gemm(cells, 27 * cin, cout, col, false, w, T::one(), plane);
            },
        );
    out
}

/// Returns (grad x, grad w, grad b).
pub(crate) fn conv3_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    dims: ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ConvDims { h, w: wd, d, cin, cout } = dims;
    let cells = wd * d;

    // Transposed weights [27][cout][cin] so the input-gradient product runs over cin.
    let mut wt = vec![T::zero(); w.len()];
    for off in 0..27 {
        for ic in 0..cin {
            for oc in 0..cout {
                wt[(off * cout + oc) * cin + ic] = w[(off * cin + ic) * cout + oc];
            }
        }
    }

    let mut gx = vec![T::zero(); h * cells * cin];
    gx.par_chunks_mut(cells * cin)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); cells * 27 * cout],
            |col, (i, plane)| {
                im2col(g, dims, i, cout, true, col);
                T::gemm(cells, 27 * cout, cin, col, false, &wt, T::zero(), plane);
            },
        );

    let nw = 27 * cin * cout;
    let parts: Vec<Vec<T>> = (0..h)
        .into_par_iter()
        .map_init(
            || vec![T::zero(); cells * 27 * cin],
            |col, i| {
                let mut part = vec![T::zero(); nw + cout];
                let (gw, gb) = part.split_at_mut(nw);
                let gplane = &g[i * cells * cout..][..cells * cout];
                for grow in gplane.chunks_exact(cout) {
                    for (a, &gv) in gb.iter_mut().zip(grow) {
                        *a += gv;
                    }
                }
                im2col(x, dims, i, cin, false, col);
                T::gemm(27 * cin, cells, cout, col, true, gplane, T::zero(), gw);
                part
            },
        )
        .collect();
    let mut total = ordered_sum(parts, nw + cout);
    let gb = total.split_off(nw);
    (gx, total, gb)
}

// ---------------------------------------------------------------------------
// Separable 2D filtering over the two leading axes of an [H, W, C] grid,
// zero padded, output the same size as the input.

pub(crate) fn blur2d<T: Real>(x: &[T], h: usize, w: usize, c: usize, kernel: &[T]) -> Vec<T> {
    let r = kernel.len() / 2;
    let mut tmp = vec![T::zero(); x.len()];
    for i in 0..h {
        for j in 0..w {
            let o = &mut tmp[(i * w + j) * c..][..c];
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = j as isize + t as isize - r as isize;
                if jj < 0 || jj >= w as isize {
                    continue;
                }
                let src = &x[(i * w + jj as usize) * c..][..c];
                for (a, &s) in o.iter_mut().zip(src) {
                    *a += kv * s;
                }
            }
        }
    }
    let mut out = vec![T::zero(); x.len()];
    for i in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let ii = i as isize + t as isize - r as isize;
            if ii < 0 || ii >= h as isize {
                continue;
            }
            let src = &tmp[ii as usize * w * c..][..w * c];
            let o = &mut out[i * w * c..][..w * c];
            for (a, &s) in o.iter_mut().zip(src) {
                *a += kv * s;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Linear interpolation taps along one axis, align_corners = false.

#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<AxisTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            AxisTap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}
