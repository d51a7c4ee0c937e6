//! Synthetic registration pairs with known ground-truth deformations.
//!
//! A case starts from a moving image of soft ellipsoid blobs and its label
//! map. A smooth random increment field `g` with values in
//! `[1 - amplitude, 1 + amplitude]` is integrated into a sampling field
//! `phi`, and the fixed image and labels are the moving ones resampled at
//! `phi`. Warping the moving labels with `phi` therefore reproduces the fixed
//! labels exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deformation::{DeformationField, GradientField, WarpMode, A_MAX};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{Entry, Manifest, MANIFEST_NAME};
use crate::tensor::Tensor;
use crate::volume::{LabelMap, Modality, Volume};

/// Blob edge softness as a fraction of the blob radius.
const EDGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub shape: [usize; 3],
    /// Number of blob structures, each with its own label.
    pub labels: usize,
    /// Increment deviation as a fraction of the available headroom.
    pub amplitude: f64,
    /// Box filter radius in voxels; the filter is applied three times.
    pub smoothing: usize,
    /// Standard deviation of additive Gaussian noise on the fixed image.
    pub noise: f64,
    /// Blob radius range as fractions of each extent.
    pub radius: [f64; 2],
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            labels: 2,
            amplitude: 0.3,
            smoothing: 4,
            noise: 0.02,
            radius: [0.14, 0.22],
            spacing: [1.0; 3],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.amplitude) {
            return Err(Error::Config(format!(
                "amplitude {} outside [0, 1)",
                self.amplitude
            )));
        }
        if self.shape.contains(&0) {
            return Err(Error::Config(format!("empty shape {:?}", self.shape)));
        }
        if self.labels == 0 || self.labels > 255 {
            return Err(Error::Config(format!(
                "labels {} outside 1..=255",
                self.labels
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!(
                "noise {} must be non-negative",
                self.noise
            )));
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return Err(Error::Config(format!(
                "radius range {:?} is invalid",
                self.radius
            )));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// One generated case.
#[derive(Clone, Debug)]
pub struct SynthCase {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_seg: LabelMap,
    pub fixed_seg: LabelMap,
    pub increments: GradientField,
    pub field: DeformationField,
}

/// Per-case seed stream.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Separable box filter with clamped borders along every spatial axis of
/// each channel.
fn box_smooth(t: &mut Tensor<f32>, radius: usize) {
    if radius == 0 {
        return;
    }
    let [d, h, w] = t.spatial();
    let c = t.shape()[0];
    let ext = [d, h, w];
    let strides = [h * w, w, 1];
    let vox = d * h * w;
    let data = t.data_mut();
    let mut line = Vec::new();
    let r = radius as isize;
    for a in 0..3 {
        let n = ext[a];
        let others: Vec<usize> = (0..3).filter(|&b| b != a).collect();
        for ch in 0..c {
            for i in 0..ext[others[0]] {
                for j in 0..ext[others[1]] {
                    let base = ch * vox + i * strides[others[0]] + j * strides[others[1]];
                    line.clear();
                    line.extend((0..n).map(|q| data[base + q * strides[a]] as f64));
                    for q in 0..n as isize {
                        let s: f64 = (q - r..=q + r)
                            .map(|p| line[p.clamp(0, n as isize - 1) as usize])
                            .sum();
                        data[base + q as usize * strides[a]] = (s / (2 * r + 1) as f64) as f32;
                    }
                }
            }
        }
    }
}

/// Smooth random increments and their integrated sampling field. The
/// smoothed noise is scaled to one standard deviation per `amplitude` of
/// headroom and clipped to the band.
pub fn gen_field(
    spec: &SynthSpec,
    rng: &mut impl Rng,
) -> Result<(GradientField, DeformationField)> {
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let n = 3 * d * h * w;
    let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut t = Tensor::new(vec![3, d, h, w], noise)?;
    for _ in 0..3 {
        box_smooth(&mut t, spec.smoothing);
    }
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (t
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let headroom = spec.amplitude * (A_MAX - 1.0);
    let (lo, hi) = ((1.0 - headroom) as f32, (1.0 + headroom) as f32);
    let scale = if std > 0.0 {
        (headroom / std) as f32
    } else {
        0.0
    };
    let g = t.map(|v| (1.0 + scale * v).clamp(lo, hi));
    let g = GradientField::new(g)?;
    let phi = g.integrate()?;
    Ok((g, phi))
}

/// Blob image and labels for the moving side of a case.
fn gen_blobs(spec: &SynthSpec, rng: &mut impl Rng) -> Result<(Volume, LabelMap)> {
    let [d, h, w] = spec.shape;
    let ext = [d as f64, h as f64, w as f64];
    let blobs: Vec<([f64; 3], [f64; 3], f64)> = (0..spec.labels)
        .map(|k| {
            let centre = ext.map(|n| rng.random_range(0.3..=0.7) * n);
            let radius = ext.map(|n| rng.random_range(spec.radius[0]..=spec.radius[1]) * n);
            let intensity = 0.4 + 0.6 * (k + 1) as f64 / spec.labels as f64;
            (centre, radius, intensity)
        })
        .collect();
    let mut img = Vec::with_capacity(d * h * w);
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut value = 0.0;
                let mut best: Option<(f64, usize)> = None;
                for (k, (c, r, a)) in blobs.iter().enumerate() {
                    let rho = (0..3)
                        .map(|i| ((p[i] - c[i]) / r[i]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    value += a / (1.0 + ((rho - 1.0) / EDGE).exp());
                    if rho <= 1.0 && best.is_none_or(|(b, _)| rho < b) {
                        best = Some((rho, k));
                    }
                }
                img.push(value as f32);
                labels.push(best.map_or(0, |(_, k)| k as u8 + 1));
            }
        }
    }
    let vol = Volume::new(
        Tensor::new(vec![1, d, h, w], img)?,
        spec.spacing,
        Modality::Synth,
    )?;
    let seg = LabelMap::with_availability(
        labels,
        spec.shape,
        spec.labels + 1,
        vec![true; spec.labels + 1],
        spec.spacing,
    )?;
    Ok((vol, seg))
}

/// Generates one case from `spec.seed`.
pub fn gen_pair(spec: &SynthSpec) -> Result<SynthCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (moving, moving_seg) = gen_blobs(spec, &mut rng)?;
    let (increments, field) = gen_field(spec, &mut rng)?;
    let mut fixed = field.warp(&moving, WarpMode::Linear)?;
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in fixed.data.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let fixed_seg = field.warp_labels(&moving_seg)?;
    Ok(SynthCase {
        moving,
        fixed,
        moving_seg,
        fixed_seg,
        increments,
        field,
    })
}

/// Writes `n` cases and a manifest into `dir`.
pub fn gen_dataset(spec: &SynthSpec, n: usize, dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut state = spec.seed;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let case_spec = SynthSpec {
            seed: splitmix64(&mut state),
            ..spec.clone()
        };
        let case = gen_pair(&case_spec)?;
        let id = format!("case_{i:03}");
        let name = |suffix: &str| format!("{id}_{suffix}.gvol");
        io::save_volume(&case.moving, dir.join(name("moving")))?;
        io::save_volume(&case.fixed, dir.join(name("fixed")))?;
        io::save_labels(
            &case.moving_seg,
            Modality::Synth,
            dir.join(name("moving_seg")),
        )?;
        io::save_labels(
            &case.fixed_seg,
            Modality::Synth,
            dir.join(name("fixed_seg")),
        )?;
        io::save_field(case.field.phi(), spec.spacing, dir.join(name("phi")))?;
        entries.push(Entry {
            id: id.clone(),
            moving: name("moving"),
            fixed: name("fixed"),
            moving_seg: Some(name("moving_seg")),
            fixed_seg: Some(name("fixed_seg")),
            field: Some(name("phi")),
        });
    }
    let manifest = Manifest::new(dir, entries);
    manifest.write(dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
