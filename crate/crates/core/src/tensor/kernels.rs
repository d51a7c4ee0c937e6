//! Forward and backward kernels for the volumetric primitives.
//!
//! Everything here works on raw slices; shape checks live in the tape layer.

use super::Real;

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    /// Range of output positions `o` such that `o * stride + kk - padding` is a
    /// valid input index, together with the first input index.
    #[inline]
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let n_in = self.inp[axis] as isize;
        let n_out = self.out[axis] as isize;
        let s = self.stride as isize;
        let shift = kk as isize - self.padding as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // largest o with o*s + shift <= n_in - 1
        let hi_excl = if n_in - 1 - shift < 0 {
            0
        } else {
            ((n_in - 1 - shift) / s + 1).min(n_out)
        };
        let hi_excl = hi_excl.max(lo);
        (lo as usize, hi_excl as usize)
    }
}

/// Shared loop nest over (co, ci, kd, kh, kw, od, oh) calling `row` with the
/// matching output/input row offsets and the valid width span.
#[inline]
fn for_each_row(g: &ConvGeom, mut row: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let [id_, ih_, iw_] = g.inp;
    let [od_, oh_, ow_] = g.out;
    let k = g.k;
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for kd in 0..k {
                let (d_lo, d_hi) = g.valid(0, kd);
                for kh in 0..k {
                    let (h_lo, h_hi) = g.valid(1, kh);
                    for kw in 0..k {
                        let (w_lo, w_hi) = g.valid(2, kw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let widx = (((co * g.cin + ci) * k + kd) * k + kh) * k + kw;
                        for od in d_lo..d_hi {
                            let id = od * g.stride + kd - g.padding;
                            for oh in h_lo..h_hi {
                                let ih = oh * g.stride + kh - g.padding;
                                let out_row = ((co * od_ + od) * oh_ + oh) * ow_;
                                let in_row = ((ci * id_ + id) * ih_ + ih) * iw_;
                                let iw0 = w_lo * g.stride + kw - g.padding;
                                row(widx, out_row + w_lo, in_row + iw0, w_hi - w_lo, co, ci);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let out_vox = g.out.iter().product::<usize>();
    let mut out = vec![T::zero(); g.cout * out_vox];
    for (co, chunk) in out.chunks_mut(out_vox).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[co]);
    }
    let s = g.stride;
    for_each_row(g, |widx, o, i, n, _, _| {
        let w = weight[widx];
        let dst = &mut out[o..o + n];
        if s == 1 {
            for (d, &x) in dst.iter_mut().zip(&input[i..i + n]) {
                *d += w * x;
            }
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += w * input[i + j * s];
            }
        }
    });
    out
}

pub(crate) fn conv3d_backward_input<T: Real>(g: &ConvGeom, weight: &[T], gout: &[T]) -> Vec<T> {
    let in_vox = g.inp.iter().product::<usize>();
    let mut gin = vec![T::zero(); g.cin * in_vox];
    let s = g.stride;
    for_each_row(g, |widx, o, i, n, _, _| {
        let w = weight[widx];
        if s == 1 {
            for (d, &x) in gin[i..i + n].iter_mut().zip(&gout[o..o + n]) {
                *d += w * x;
            }
        } else {
            for j in 0..n {
                gin[i + j * s] += w * gout[o + j];
            }
        }
    });
    gin
}

pub(crate) fn conv3d_backward_params<T: Real>(
    g: &ConvGeom,
    input: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::zero(); g.cout * g.cin * g.k * g.k * g.k];
    let s = g.stride;
    for_each_row(g, |widx, o, i, n, _, _| {
        let acc: T = if s == 1 {
            gout[o..o + n]
                .iter()
                .zip(&input[i..i + n])
                .map(|(&a, &b)| a * b)
                .sum()
        } else {
            (0..n).map(|j| gout[o + j] * input[i + j * s]).sum()
        };
        gw[widx] += acc;
    });
    let out_vox = g.out.iter().product::<usize>();
    let gb = gout
        .chunks(out_vox)
        .map(|c| c.iter().copied().sum())
        .collect();
    (gw, gb)
}

/// Per-channel normalization. Returns `(y, inv_std)`; `y` doubles as the
/// saved normalized input for the backward pass.
pub(crate) fn instance_norm_forward<T: Real>(x: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = x.len() / channels;
    let nf = T::from_usize(n).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(channels);
    for (xc, yc) in x.chunks(n).zip(y.chunks_mut(n)) {
        let mean = xc.iter().copied().sum::<T>() / nf;
        let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in yc.iter_mut().zip(xc) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (y, inv)
}

pub(crate) fn instance_norm_backward<T: Real>(y: &[T], inv_std: &[T], gy: &[T]) -> Vec<T> {
    let channels = inv_std.len();
    let n = y.len() / channels;
    let nf = T::from_usize(n).unwrap();
    let mut gx = vec![T::zero(); y.len()];
    for c in 0..channels {
        let yc = &y[c * n..(c + 1) * n];
        let gc = &gy[c * n..(c + 1) * n];
        let sum_g: T = gc.iter().copied().sum();
        let sum_gy: T = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
        let scale = inv_std[c] / nf;
        for ((o, &g), &yv) in gx[c * n..(c + 1) * n].iter_mut().zip(gc).zip(yc) {
            *o = scale * (nf * g - sum_g - yv * sum_gy);
        }
    }
    gx
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn cumsum_exclusive_forward<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 1..len {
            let (prev, cur) = (base + (i - 1) * inner, base + i * inner);
            for j in 0..inner {
                y[cur + j] = y[prev + j] + x[prev + j];
            }
        }
    }
    y
}

pub(crate) fn cumsum_exclusive_backward<T: Real>(gy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); gy.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in (0..len.saturating_sub(1)).rev() {
            let (cur, next) = (base + i * inner, base + (i + 1) * inner);
            for j in 0..inner {
                gx[cur + j] = gx[next + j] + gy[next + j];
            }
        }
    }
    gx
}

/// Cell index, fractional offset and in-range flag for a coordinate clamped
/// to `[0, n - 1]`.
#[inline]
fn cell<T: Real>(c: T, n: usize) -> (usize, usize, T, bool) {
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    let hi = T::from_usize(n - 1).unwrap();
    let inside = c >= T::zero() && c <= hi;
    let cc = c.max(T::zero()).min(hi);
    let i0 = cc.floor().to_usize().unwrap().min(n - 2);
    let t = cc - T::from_usize(i0).unwrap();
    (i0, i0 + 1, t, inside)
}

pub(crate) fn trilinear_forward<T: Real>(
    vol: &[T],
    channels: usize,
    vshape: [usize; 3],
    coords: &[T],
    oshape: [usize; 3],
) -> Vec<T> {
    let [d, h, w] = vshape;
    let vvox = d * h * w;
    let ovox = oshape.iter().product::<usize>();
    let mut out = vec![T::zero(); channels * ovox];
    let one = T::one();
    for p in 0..ovox {
        let (z0, z1, tz, _) = cell(coords[p], d);
        let (y0, y1, ty, _) = cell(coords[ovox + p], h);
        let (x0, x1, tx, _) = cell(coords[2 * ovox + p], w);
        let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let corners = [
            (idx(z0, y0, x0), (one - tz) * (one - ty) * (one - tx)),
            (idx(z0, y0, x1), (one - tz) * (one - ty) * tx),
            (idx(z0, y1, x0), (one - tz) * ty * (one - tx)),
            (idx(z0, y1, x1), (one - tz) * ty * tx),
            (idx(z1, y0, x0), tz * (one - ty) * (one - tx)),
            (idx(z1, y0, x1), tz * (one - ty) * tx),
            (idx(z1, y1, x0), tz * ty * (one - tx)),
            (idx(z1, y1, x1), tz * ty * tx),
        ];
        for c in 0..channels {
            let v = &vol[c * vvox..(c + 1) * vvox];
            let mut acc = T::zero();
            for &(i, wgt) in &corners {
                acc += wgt * v[i];
            }
            out[c * ovox + p] = acc;
        }
    }
    out
}

/// Returns `(grad_vol, grad_coords)`; either may be skipped.
pub(crate) fn trilinear_backward<T: Real>(
    vol: &[T],
    channels: usize,
    vshape: [usize; 3],
    coords: &[T],
    oshape: [usize; 3],
    gout: &[T],
    want_vol: bool,
    want_coords: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [d, h, w] = vshape;
    let vvox = d * h * w;
    let ovox = oshape.iter().product::<usize>();
    let mut gvol = want_vol.then(|| vec![T::zero(); vol.len()]);
    let mut gcoord = want_coords.then(|| vec![T::zero(); coords.len()]);
    let one = T::one();
    for p in 0..ovox {
        let (z0, z1, tz, inz) = cell(coords[p], d);
        let (y0, y1, ty, iny) = cell(coords[ovox + p], h);
        let (x0, x1, tx, inx) = cell(coords[2 * ovox + p], w);
        let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let (mut gz, mut gy, mut gx) = (T::zero(), T::zero(), T::zero());
        for c in 0..channels {
            let g = gout[c * ovox + p];
            if g == T::zero() {
                continue;
            }
            let base = c * vvox;
            let v = |z, y, x| vol[base + idx(z, y, x)];
            if let Some(gv) = gvol.as_mut() {
                let corners = [
                    (idx(z0, y0, x0), (one - tz) * (one - ty) * (one - tx)),
                    (idx(z0, y0, x1), (one - tz) * (one - ty) * tx),
                    (idx(z0, y1, x0), (one - tz) * ty * (one - tx)),
                    (idx(z0, y1, x1), (one - tz) * ty * tx),
                    (idx(z1, y0, x0), tz * (one - ty) * (one - tx)),
                    (idx(z1, y0, x1), tz * (one - ty) * tx),
                    (idx(z1, y1, x0), tz * ty * (one - tx)),
                    (idx(z1, y1, x1), tz * ty * tx),
                ];
                for (i, wgt) in corners {
                    gv[base + i] += g * wgt;
                }
            }
            if gcoord.is_some() {
                let (c000, c001, c010, c011) =
                    (v(z0, y0, x0), v(z0, y0, x1), v(z0, y1, x0), v(z0, y1, x1));
                let (c100, c101, c110, c111) =
                    (v(z1, y0, x0), v(z1, y0, x1), v(z1, y1, x0), v(z1, y1, x1));
                // bilinear faces at z0 / z1
                let f0 = (one - ty) * ((one - tx) * c000 + tx * c001)
                    + ty * ((one - tx) * c010 + tx * c011);
                let f1 = (one - ty) * ((one - tx) * c100 + tx * c101)
                    + ty * ((one - tx) * c110 + tx * c111);
                gz += g * (f1 - f0);
                let e0 = (one - tx) * c000 + tx * c001;
                let e1 = (one - tx) * c010 + tx * c011;
                let e2 = (one - tx) * c100 + tx * c101;
                let e3 = (one - tx) * c110 + tx * c111;
                gy += g * ((one - tz) * (e1 - e0) + tz * (e3 - e2));
                let a0 = (one - ty) * c000 + ty * c010;
                let a1 = (one - ty) * c001 + ty * c011;
                let b0 = (one - ty) * c100 + ty * c110;
                let b1 = (one - ty) * c101 + ty * c111;
                gx += g * ((one - tz) * (a1 - a0) + tz * (b1 - b0));
            }
        }
        if let Some(gc) = gcoord.as_mut() {
            if inz {
                gc[p] = gz;
            }
            if iny {
                gc[ovox + p] = gy;
            }
            if inx {
                gc[2 * ovox + p] = gx;
            }
        }
    }
    (gvol, gcoord)
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], channels: usize, s: [usize; 3]) -> Vec<T> {
    let [d, h, w] = s;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); channels * od * oh * ow];
    for c in 0..channels {
        for z in 0..od {
            for y in 0..oh {
                let src = ((c * d + z / 2) * h + y / 2) * w;
                let dst = ((c * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    out[dst + xx] = x[src + xx / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(gy: &[T], channels: usize, s: [usize; 3]) -> Vec<T> {
    let [d, h, w] = s;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut gx = vec![T::zero(); channels * d * h * w];
    for c in 0..channels {
        for z in 0..od {
            for y in 0..oh {
                let dst = ((c * d + z / 2) * h + y / 2) * w;
                let src = ((c * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    gx[dst + xx / 2] += gy[src + xx];
                }
            }
        }
    }
    gx
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_arithmetic() {
        assert_eq!(conv_output_extent(16, 3, 1, 1), Some(16));
        assert_eq!(conv_output_extent(16, 2, 2, 0), Some(8));
        assert_eq!(conv_output_extent(7, 2, 2, 0), Some(3));
        assert_eq!(conv_output_extent(1, 3, 1, 0), None);
    }

    #[test]
    fn cumsum_backward_is_suffix_sum() {
        let gy = [1.0f64, 2.0, 3.0, 4.0];
        let gx = cumsum_exclusive_backward(&gy, &[4], 0);
        assert_eq!(gx, vec![9.0, 7.0, 4.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
