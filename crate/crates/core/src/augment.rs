//! Patch extraction and lossless joint augmentation of registration pairs.
//!
//! Every transform here is a pure voxel re-indexing (crops, flips, quarter
//! turns, circular shifts), so labels stay exact and no resampling happens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelMap, Volume};

/// Moving/fixed images with optional segmentations on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_seg: Option<LabelMap>,
    pub fixed_seg: Option<LabelMap>,
}

impl Pair {
    pub fn new(
        moving: Volume,
        fixed: Volume,
        moving_seg: Option<LabelMap>,
        fixed_seg: Option<LabelMap>,
    ) -> Result<Self> {
        let shape = moving.spatial();
        if fixed.spatial() != shape {
            return Err(Error::Shape(format!(
                "moving {:?} vs fixed {:?}",
                shape,
                fixed.spatial()
            )));
        }
        for seg in moving_seg.iter().chain(fixed_seg.iter()) {
            if seg.shape() != shape {
                return Err(Error::Shape(format!(
                    "segmentation {:?} vs image {:?}",
                    seg.shape(),
                    shape
                )));
            }
        }
        Ok(Self {
            moving,
            fixed,
            moving_seg,
            fixed_seg,
        })
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.moving.spatial()
    }

    /// Applies the same voxel re-indexing to all four grids.
    fn remap(&self, out: [usize; 3], src: impl Fn([usize; 3]) -> [usize; 3]) -> Self {
        let img = |v: &Volume| {
            let c = v.channels();
            let data = remap_grid(v.data.data(), c, v.spatial(), out, &src);
            v.with_data(Tensor::new(vec![c, out[0], out[1], out[2]], data).expect("remap shape"))
        };
        let seg = |l: &LabelMap| {
            let data = remap_grid(l.labels(), 1, l.shape(), out, &src);
            l.with_labels(data, out).expect("remap keeps labels valid")
        };
        Self {
            moving: img(&self.moving),
            fixed: img(&self.fixed),
            moving_seg: self.moving_seg.as_ref().map(seg),
            fixed_seg: self.fixed_seg.as_ref().map(seg),
        }
    }
}

fn remap_grid<T: Copy>(
    src: &[T],
    channels: usize,
    inp: [usize; 3],
    out: [usize; 3],
    f: &impl Fn([usize; 3]) -> [usize; 3],
) -> Vec<T> {
    let in_vox = inp.iter().product::<usize>();
    let mut dst = Vec::with_capacity(channels * out.iter().product::<usize>());
    for c in 0..channels {
        let base = c * in_vox;
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let [sz, sy, sx] = f([z, y, x]);
                    dst.push(src[base + (sz * inp[1] + sy) * inp[2] + sx]);
                }
            }
        }
    }
    dst
}

#[derive(Clone, Copy, Debug)]
pub enum PatchOrigin {
    At([usize; 3]),
    Random,
}

/// Crops a `size` patch at the same origin from all grids. Axes shorter than
/// the patch are padded by repeating the border.
pub fn extract_patch(
    pair: &Pair,
    size: [usize; 3],
    origin: PatchOrigin,
    rng: &mut impl Rng,
) -> Pair {
    let shape = pair.spatial();
    let origin = match origin {
        PatchOrigin::At(o) => o,
        PatchOrigin::Random => {
            let mut o = [0; 3];
            for a in 0..3 {
                let slack = shape[a].saturating_sub(size[a]);
                o[a] = rng.random_range(0..=slack);
            }
            o
        }
    };
    pair.remap(size, |p| {
        let mut s = [0; 3];
        for a in 0..3 {
            s[a] = (origin[a] + p[a]).min(shape[a] - 1);
        }
        s
    })
}

pub fn flip(pair: &Pair, axis: usize) -> Pair {
    let shape = pair.spatial();
    pair.remap(shape, |mut p| {
        p[axis] = shape[axis] - 1 - p[axis];
        p
    })
}

/// Quarter turn in the plane of axes `(a, b)`; the plane must be square.
pub fn rot90(pair: &Pair, a: usize, b: usize) -> Result<Pair> {
    let shape = pair.spatial();
    if shape[a] != shape[b] || a == b {
        return Err(Error::Shape(format!(
            "cannot rotate in plane ({a}, {b}) of {shape:?}"
        )));
    }
    let n = shape[a];
    Ok(pair.remap(shape, |p| {
        let mut s = p;
        s[a] = p[b];
        s[b] = n - 1 - p[a];
        s
    }))
}

/// Circular shift: output voxel `i` reads source voxel `i - shift`.
pub fn translate(pair: &Pair, shift: [isize; 3]) -> Pair {
    let shape = pair.spatial();
    pair.remap(shape, |p| {
        let mut s = [0; 3];
        for a in 0..3 {
            let n = shape[a] as isize;
            s[a] = (p[a] as isize - shift[a]).rem_euclid(n) as usize;
        }
        s
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotate: bool,
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            rotate: true,
            max_shift: 2,
        }
    }
}

/// Random joint flip, quarter-turn rotation and integer translation.
pub fn augment_pair(pair: &Pair, cfg: &AugmentConfig, rng: &mut impl Rng) -> Pair {
    let mut out = pair.clone();
    if cfg.flip {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                out = flip(&out, axis);
            }
        }
    }
    if cfg.rotate {
        let planes = [(0, 1), (0, 2), (1, 2)];
        let (a, b) = planes[rng.random_range(0..3)];
        let turns = rng.random_range(0..4);
        for _ in 0..turns {
            if let Ok(r) = rot90(&out, a, b) {
                out = r;
            }
        }
    }
    if cfg.max_shift > 0 {
        let m = cfg.max_shift as i64;
        let mut shift = [0isize; 3];
        for s in &mut shift {
            *s = rng.random_range(-m..=m) as isize;
        }
        out = translate(&out, shift);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_pair(shape: [usize; 3]) -> Pair {
        let img = |off: f32| {
            let t = Tensor::from_fn(&[1, shape[0], shape[1], shape[2]], |i| {
                (i[1] * 100 + i[2] * 10 + i[3]) as f32 + off
            });
            Volume::new(t, [1.0; 3], Modality::Synth).unwrap()
        };
        let n: usize = shape.iter().product();
        let seg = |k: usize| {
            LabelMap::new((0..n).map(|i| ((i / k) % 3) as u8).collect(), shape, 3).unwrap()
        };
        Pair::new(img(0.0), img(0.5), Some(seg(5)), Some(seg(7))).unwrap()
    }

    #[test]
    fn full_crop_at_origin_is_identity() {
        let p = ramp_pair([4, 5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            extract_patch(&p, [4, 5, 6], PatchOrigin::At([0; 3]), &mut rng),
            p
        );
    }

    #[test]
    fn random_crop_is_seed_deterministic() {
        let p = ramp_pair([8, 8, 8]);
        let a = extract_patch(
            &p,
            [4, 4, 4],
            PatchOrigin::Random,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        let b = extract_patch(
            &p,
            [4, 4, 4],
            PatchOrigin::Random,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn crop_keeps_correspondence() {
        let p = ramp_pair([8, 8, 8]);
        let c = extract_patch(
            &p,
            [3, 3, 3],
            PatchOrigin::At([2, 1, 4]),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(c.moving.data.at(&[0, 0, 0, 0]), 214.0);
        assert_eq!(c.fixed.data.at(&[0, 0, 0, 0]), 214.5);
        let src = p.moving_seg.as_ref().unwrap().at(2, 1, 4);
        assert_eq!(c.moving_seg.as_ref().unwrap().at(0, 0, 0), src);
    }

    #[test]
    fn oversized_patch_pads_with_border() {
        let p = ramp_pair([2, 2, 2]);
        let c = extract_patch(
            &p,
            [3, 2, 2],
            PatchOrigin::At([0; 3]),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(
            c.moving.data.at(&[0, 2, 1, 1]),
            c.moving.data.at(&[0, 1, 1, 1])
        );
    }

    #[test]
    fn double_flip_and_inverse_shift_restore() {
        let p = ramp_pair([4, 5, 6]);
        for axis in 0..3 {
            assert_eq!(flip(&flip(&p, axis), axis), p);
        }
        assert_eq!(translate(&translate(&p, [1, 0, 0]), [-1, 0, 0]), p);
        let cube = ramp_pair([4, 4, 4]);
        let mut r = cube.clone();
        for _ in 0..4 {
            r = rot90(&r, 0, 2).unwrap();
        }
        assert_eq!(r, cube);
    }

    #[test]
    fn rotation_of_non_square_plane_rejected() {
        assert!(rot90(&ramp_pair([4, 5, 6]), 0, 1).is_err());
    }
}
