//! Forward/backward kernels on raw slices. The graph owns bookkeeping;
//! everything here is shape arithmetic and loops.

use super::Float;

/// Geometry of a square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Output columns `[lo, hi)` whose stride-1 tap `kx` lands inside a row
/// of width `w`.
fn valid_range(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

/// Unfold one image `[cin, h, w]` into `[cin*k*k, ho*wo]`.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npix = ho * wo;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous run with zero margins
                        let (lo, hi) = valid_range(kx, g.pad, g.w, wo);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + kx - g.pad;
                            line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `[cin*k*k, ho*wo]` back onto `[cin, h, w]`, accumulating.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npix = ho * wo;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kx, g.pad, g.w, wo);
                        if hi > lo {
                            let s0 = lo + kx - g.pad;
                            for (d, &v) in line[s0..s0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched convolution. Returns `(output [n, cout, ho, wo], unfolded input)`.
pub fn conv2d_forward<T: Float>(
    x: &[T],
    n: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let kk = g.patch_len();
    let npix = g.out_pixels();
    let mut cols = vec![T::zero(); n * kk * npix];
    let mut out = vec![T::zero(); n * g.cout * npix];
    let in_len = g.cin * g.h * g.w;
    for b in 0..n {
        let col = &mut cols[b * kk * npix..(b + 1) * kk * npix];
        im2col(&x[b * in_len..(b + 1) * in_len], g, col);
        let o = &mut out[b * g.cout * npix..(b + 1) * g.cout * npix];
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                o[c * npix..(c + 1) * npix].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            kk,
            npix,
            T::one(),
            weight,
            kk as isize,
            1,
            col,
            npix as isize,
            1,
            beta,
            o,
            npix as isize,
            1,
        );
    }
    (out, cols)
}

/// Gradients of a batched convolution. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    dy: &[T],
    n: usize,
    weight: &[T],
    cols: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kk = g.patch_len();
    let npix = g.out_pixels();
    let out_len = g.cout * npix;
    if let Some(dw) = dw {
        for b in 0..n {
            T::gemm(
                g.cout,
                npix,
                kk,
                T::one(),
                &dy[b * out_len..(b + 1) * out_len],
                npix as isize,
                1,
                &cols[b * kk * npix..(b + 1) * kk * npix],
                1,
                npix as isize,
                T::one(),
                dw,
                kk as isize,
                1,
            );
        }
    }
    if let Some(db) = db {
        for b in 0..n {
            for c in 0..g.cout {
                let s: T = dy[b * out_len + c * npix..b * out_len + (c + 1) * npix]
                    .iter()
                    .copied()
                    .sum();
                db[c] += s;
            }
        }
    }
    if let Some(dx) = dx {
        let in_len = g.cin * g.h * g.w;
        let mut dcols = vec![T::zero(); kk * npix];
        for b in 0..n {
            T::gemm(
                kk,
                g.cout,
                npix,
                T::one(),
                weight,
                1,
                kk as isize,
                &dy[b * out_len..(b + 1) * out_len],
                npix as isize,
                1,
                T::zero(),
                &mut dcols,
                npix as isize,
                1,
            );
            col2im(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// 2x2 stride-2 max pooling over `[planes, h, w]`. Returns values and the
/// flat input index of each maximum.
pub fn maxpool2_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Source taps for bilinear resampling along one axis (half-pixel centres).
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                dst[oy * wo + ox] = ly0 * (lx0 * src[y0 * w + x0] + lx1 * src[y0 * w + x1])
                    + ly1 * (lx0 * src[y1 * w + x0] + lx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Float>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * ly0 * lx0;
                d[y0 * w + x1] += v * ly0 * lx1;
                d[y1 * w + x0] += v * ly1 * lx0;
                d[y1 * w + x1] += v * ly1 * lx1;
            }
        }
    }
}

/// Per-unit statistics from [`norm_forward`]. A unit is one `(n, c)` plane
/// for instance norm, or channel `c` across the batch for batch norm.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Iterate the flat index ranges belonging to channel `c` of an NCHW tensor.
fn channel_runs(n: usize, c_total: usize, hw: usize, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |b| {
        let start = (b * c_total + c) * hw;
        start..start + hw
    })
}

/// Normalise `x` (NCHW) into `xhat`, per plane (`per_sample`) or per
/// channel across the batch.
pub fn norm_forward<T: Float>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    per_sample: bool,
    eps: f64,
    xhat: &mut [T],
) -> NormStats<T> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let units = if per_sample { n * c } else { c };
    let mut mean = Vec::with_capacity(units);
    let mut var = Vec::with_capacity(units);
    let mut inv_std = Vec::with_capacity(units);
    for u in 0..units {
        let runs: Vec<_> = if per_sample {
            vec![u * hw..(u + 1) * hw]
        } else {
            channel_runs(n, c, hw, u).collect()
        };
        let count = T::of((runs.len() * hw) as f64);
        let m = runs.iter().flat_map(|r| x[r.clone()].iter().copied()).sum::<T>() / count;
        let v = runs
            .iter()
            .flat_map(|r| x[r.clone()].iter().map(move |&a| (a - m) * (a - m)))
            .sum::<T>()
            / count;
        let is = T::one() / (v + T::of(eps)).sqrt();
        for r in &runs {
            for i in r.clone() {
                xhat[i] = (x[i] - m) * is;
            }
        }
        mean.push(m);
        var.push(v);
        inv_std.push(is);
    }
    NormStats { mean, var, inv_std }
}

/// Backward of `y = gamma * xhat + beta` with batch statistics.
/// `dxhat` is `dy * gamma`; written into `dx` (accumulating).
pub fn norm_backward<T: Float>(
    dxhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    dims: (usize, usize, usize, usize),
    per_sample: bool,
    dx: &mut [T],
) {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let units = if per_sample { n * c } else { c };
    for u in 0..units {
        let runs: Vec<_> = if per_sample {
            vec![u * hw..(u + 1) * hw]
        } else {
            channel_runs(n, c, hw, u).collect()
        };
        let count = T::of((runs.len() * hw) as f64);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for r in &runs {
            for i in r.clone() {
                s1 += dxhat[i];
                s2 += dxhat[i] * xhat[i];
            }
        }
        let (m1, m2) = (s1 / count, s2 / count);
        for r in &runs {
            for i in r.clone() {
                dx[i] += inv_std[u] * (dxhat[i] - m1 - xhat[i] * m2);
            }
        }
    }
}
