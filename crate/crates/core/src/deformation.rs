//! Spatial-gradient parameterization of deformation fields.
//!
//! The network predicts raw maps that are squashed into positive per-axis
//! increments `g ∈ (0, A_MAX)`. Integrating the increments with an exclusive
//! prefix sum along each axis gives sampling coordinates `phi` (voxel units)
//! whose component `a` is strictly increasing along axis `a`, so the mapping
//! can never fold back on itself along a grid line. `g ≡ 1` is the identity.
//!
//! `phi[a][z, y, x]` is the source coordinate along axis `a` (0 = depth,
//! 1 = height, 2 = width) sampled for target voxel `(z, y, x)`.

use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tape, Tensor, Var};
use crate::volume::{LabelMap, Volume};

/// Upper bound of the increment activation; `g = 1` sits at its midpoint.
pub const A_MAX: f64 = 2.0;

/// `g = A_MAX * sigmoid(raw)`.
pub fn activate_increments<'t, T: Real>(raw: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(raw.sigmoid()?.scale(T::lit(A_MAX))?)
}

/// `phi[a] = cumsum_exclusive(g[a], axis = a)` for each component.
pub fn integrate<'t, T: Real>(g: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = g.shape();
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "increments must be [3, D, H, W], got {shape:?}"
        )));
    }
    let parts = (0..3)
        .map(|a| g.select(a)?.cumsum_exclusive(a))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Var::stack(&parts)?)
}

/// Mean squared deviation of the increments from the identity increment.
pub fn increment_deviation<'t, T: Real>(g: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(g.add_scalar(-T::one())?.square()?.mean()?)
}

pub fn identity_grid<T: Real>(shape: [usize; 3]) -> Tensor<T> {
    Tensor::from_fn(&[3, shape[0], shape[1], shape[2]], |i| {
        T::from_usize(i[1 + i[0]]).unwrap()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpMode {
    Linear,
    Nearest,
}

/// Positive per-axis increments `[3, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField(Tensor<f32>);

impl GradientField {
    pub fn new(g: Tensor<f32>) -> Result<Self> {
        check_field_shape(&g)?;
        Ok(Self(g))
    }

    /// Activates raw network output.
    pub fn from_raw(raw: &Tensor<f32>) -> Result<Self> {
        let tape = Tape::new();
        let g = activate_increments(tape.constant(raw.clone()))?;
        Self::new((*g.value()).clone())
    }

    pub fn increments(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn integrate(&self) -> Result<DeformationField> {
        let tape = Tape::new();
        let phi = integrate(tape.constant(self.0.clone()))?;
        DeformationField::new((*phi.value()).clone())
    }
}

fn check_field_shape<T: Real>(t: &Tensor<T>) -> Result<()> {
    if t.ndim() != 4 || t.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "field must be [3, D, H, W], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Sampling coordinates `[3, D, H, W]` in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField(Tensor<f32>);

impl DeformationField {
    pub fn new(phi: Tensor<f32>) -> Result<Self> {
        check_field_shape(&phi)?;
        Ok(Self(phi))
    }

    pub fn identity(shape: [usize; 3]) -> Self {
        Self(identity_grid(shape))
    }

    pub fn phi(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<f32> {
        self.0
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.0.spatial()
    }

    /// Fraction of neighbouring voxel pairs along axis `a` where component `a`
    /// increases (strictly, or non-strictly when `strict` is false).
    pub fn axis_monotone_fraction(&self, strict: bool) -> f64 {
        let [d, h, w] = self.spatial();
        let strides = [h * w, w, 1];
        let ext = [d, h, w];
        let vox = d * h * w;
        let (mut ok, mut total) = (0usize, 0usize);
        for a in 0..3 {
            let comp = &self.0.data()[a * vox..(a + 1) * vox];
            for i in 0..vox {
                let coord = (i / strides[a]) % ext[a];
                if coord + 1 < ext[a] {
                    let (lo, hi) = (comp[i], comp[i + strides[a]]);
                    total += 1;
                    if hi > lo || (!strict && hi == lo) {
                        ok += 1;
                    }
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            ok as f64 / total as f64
        }
    }

    /// Resamples `v` at `phi`. Nearest mode rounds the coordinates.
    pub fn warp(&self, v: &Volume, mode: WarpMode) -> Result<Volume> {
        if v.spatial() != self.spatial() {
            return Err(Error::Shape(format!(
                "volume {:?} vs field {:?}",
                v.spatial(),
                self.spatial()
            )));
        }
        let data = match mode {
            WarpMode::Linear => tensor::trilinear_sample(&v.data, &self.0)?,
            WarpMode::Nearest => {
                let c = v.channels();
                let vox: usize = v.spatial().iter().product();
                let idx = self.nearest_indices(v.spatial());
                let mut out = Vec::with_capacity(c * vox);
                for ch in 0..c {
                    let src = &v.data.data()[ch * vox..(ch + 1) * vox];
                    out.extend(idx.iter().map(|&i| src[i]));
                }
                Tensor::new(v.data.shape().to_vec(), out)?
            }
        };
        Ok(v.with_data(data))
    }

    /// Nearest-neighbour warp of a label map; the output label set is a
    /// subset of the input's.
    pub fn warp_labels(&self, l: &LabelMap) -> Result<LabelMap> {
        if l.shape() != self.spatial() {
            return Err(Error::Shape(format!(
                "labels {:?} vs field {:?}",
                l.shape(),
                self.spatial()
            )));
        }
        let src = l.labels();
        let out = self
            .nearest_indices(l.shape())
            .iter()
            .map(|&i| src[i])
            .collect();
        l.with_labels(out, l.shape())
    }

    fn nearest_indices(&self, src: [usize; 3]) -> Vec<usize> {
        let vox: usize = self.spatial().iter().product();
        let comp = |a: usize, p: usize| {
            let c = self.0.data()[a * vox + p].round();
            c.clamp(0.0, (src[a] - 1) as f32) as usize
        };
        (0..vox)
            .map(|p| (comp(0, p) * src[1] + comp(1, p)) * src[2] + comp(2, p))
            .collect()
    }

    pub fn jacobian_det(&self) -> Result<Tensor<f64>> {
        jacobian_det(&self.0)
    }
}

/// Per-voxel determinant of `d phi_a / d x_b`, from central differences in
/// the interior and one-sided differences on the border.
pub fn jacobian_det<T: Real>(phi: &Tensor<T>) -> Result<Tensor<f64>> {
    check_field_shape(phi)?;
    let [d, h, w] = phi.spatial();
    let ext = [d, h, w];
    if ext.iter().any(|&n| n < 2) {
        return Err(Error::Shape(format!(
            "jacobian needs extents >= 2, got {ext:?}"
        )));
    }
    let vox = d * h * w;
    let strides = [h * w, w, 1];
    let data = phi.data();
    let val = |a: usize, i: usize| data[a * vox + i].to_f64().unwrap();
    let mut out = Vec::with_capacity(vox);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [z, y, x];
                let i = (z * h + y) * w + x;
                let mut j = [[0.0f64; 3]; 3];
                for b in 0..3 {
                    let (lo, hi, span) = if pos[b] == 0 {
                        (i, i + strides[b], 1.0)
                    } else if pos[b] + 1 == ext[b] {
                        (i - strides[b], i, 1.0)
                    } else {
                        (i - strides[b], i + strides[b], 2.0)
                    };
                    for (a, row) in j.iter_mut().enumerate() {
                        row[b] = (val(a, hi) - val(a, lo)) / span;
                    }
                }
                out.push(det3(&j));
            }
        }
    }
    Ok(Tensor::new(vec![d, h, w], out)?)
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// 2x average pooling of the spatial axes; odd extents are padded by
/// repeating the last slice.
pub fn avg_pool2x(t: &Tensor<f32>) -> Tensor<f32> {
    let c = t.shape()[0];
    let [d, h, w] = t.spatial();
    let o = [d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)];
    let vox = d * h * w;
    let mut out = Vec::with_capacity(c * o.iter().product::<usize>());
    let data = t.data();
    for ch in 0..c {
        let src = &data[ch * vox..(ch + 1) * vox];
        for z in 0..o[0] {
            for y in 0..o[1] {
                for x in 0..o[2] {
                    let mut acc = 0.0f32;
                    for dz in 0..2 {
                        let sz = (2 * z + dz).min(d - 1);
                        for dy in 0..2 {
                            let sy = (2 * y + dy).min(h - 1);
                            for dx in 0..2 {
                                let sx = (2 * x + dx).min(w - 1);
                                acc += src[(sz * h + sy) * w + sx];
                            }
                        }
                    }
                    out.push(acc * 0.125);
                }
            }
        }
    }
    Tensor::new(vec![c, o[0], o[1], o[2]], out).expect("pool shape")
}

/// 2x majority pooling of a label map; ties go to the lowest label.
pub fn majority_pool2x(l: &LabelMap) -> LabelMap {
    let [d, h, w] = l.shape();
    let o = [d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)];
    let src = l.labels();
    let mut out = Vec::with_capacity(o.iter().product());
    let mut counts = vec![0u8; l.num_classes()];
    for z in 0..o[0] {
        for y in 0..o[1] {
            for x in 0..o[2] {
                counts.iter_mut().for_each(|c| *c = 0);
                for dz in 0..2 {
                    let sz = (2 * z + dz).min(d - 1);
                    for dy in 0..2 {
                        let sy = (2 * y + dy).min(h - 1);
                        for dx in 0..2 {
                            let sx = (2 * x + dx).min(w - 1);
                            counts[src[(sz * h + sy) * w + sx] as usize] += 1;
                        }
                    }
                }
                let best = counts
                    .iter()
                    .enumerate()
                    .fold(
                        (0usize, 0u8),
                        |acc, (k, &n)| if n > acc.1 { (k, n) } else { acc },
                    );
                out.push(best.0 as u8);
            }
        }
    }
    let mut pooled = l.with_labels(out, o).expect("pooled labels valid");
    pooled.spacing = [l.spacing[0] * 2.0, l.spacing[1] * 2.0, l.spacing[2] * 2.0];
    pooled
}

/// Images at full resolution and `levels` successive 2x reductions.
pub fn image_pyramid(t: &Tensor<f32>, levels: usize) -> Vec<Tensor<f32>> {
    let mut out = vec![t.clone()];
    for _ in 0..levels {
        let next = avg_pool2x(out.last().unwrap());
        out.push(next);
    }
    out
}

pub fn label_pyramid(l: &LabelMap, levels: usize) -> Vec<LabelMap> {
    let mut out = vec![l.clone()];
    for _ in 0..levels {
        let next = majority_pool2x(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Volume pyramid for deep supervision targets.
pub fn downscale_targets(v: &Volume, levels: usize) -> Vec<Volume> {
    image_pyramid(&v.data, levels)
        .into_iter()
        .enumerate()
        .map(|(l, data)| {
            let f = (1u32 << l) as f64;
            Volume {
                data,
                spacing: [v.spacing[0] * f, v.spacing[1] * f, v.spacing[2] * f],
                modality: v.modality,
            }
        })
        .collect()
}
