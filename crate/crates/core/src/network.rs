//! Shared-encoder registration network with subtraction merge.
//!
//! Both volumes of a pair run through the same encoder. Their feature
//! pyramids are subtracted level by level, and a single decoder turns the
//! difference into raw spatial-gradient maps at several resolutions. Running
//! the decoder on the negated difference yields the reverse direction, so
//! one set of weights predicts both `M -> F` and `F -> M`.
//!
//! Encoder block `l`: instance norm, LeakyReLU, 3x3x3 conv to `channels[l]`,
//! then a stride-2 2x2x2 conv halving the resolution. Decoder stage `l`:
//! nearest 2x upsample, 3x3x3 conv to `channels[l]`, add the merged skip
//! `m_l`, instance norm, LeakyReLU. Gradient heads are 3x3x3 convs to three
//! channels and start at zero, so an untrained network predicts the identity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Channels per encoder block; the number of blocks is the number of 2x
    /// reductions.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    /// Number of gradient heads, full resolution first.
    pub ds_levels: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    pub norm_affine: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 16, 16],
            in_channels: 1,
            ds_levels: 3,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
            norm_affine: true,
        }
    }
}

impl NetConfig {
    /// The 4-block, 64..512 channel layout.
    pub fn full_scale() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            ..Self::default()
        }
    }

    pub fn desk(channels: &[usize]) -> Self {
        Self {
            channels: channels.to_vec(),
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "need at least two positive encoder widths, got {:?}",
                self.channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.ds_levels == 0 || self.ds_levels > self.depth() + 1 {
            return Err(Error::Config(format!(
                "ds_levels must be in 1..={}, got {}",
                self.depth() + 1,
                self.ds_levels
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn check_extents(&self, shape: [usize; 3]) -> Result<()> {
        let div = self.divisor();
        if shape.iter().any(|&n| n == 0 || n % div != 0) {
            return Err(Error::Shape(format!(
                "extents {shape:?} must be divisible by {div}"
            )));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter, in construction order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Option<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, name: String, cout: usize, cin: usize, k: usize| {
            out.push((
                format!("{name}.weight"),
                vec![cout, cin, k, k, k],
                Some(cin * k * k * k),
            ));
            out.push((format!("{name}.bias"), vec![cout], None));
        };
        let norm = |out: &mut Vec<_>, name: String, c: usize| {
            if self.norm_affine {
                out.push((format!("{name}.weight"), vec![c], None));
                out.push((format!("{name}.bias"), vec![c], None));
            }
        };
        let ch = &self.channels;
        for l in 0..ch.len() {
            let cin = if l == 0 { self.in_channels } else { ch[l - 1] };
            norm(&mut out, format!("enc.{l}.norm"), cin);
            conv(&mut out, format!("enc.{l}.conv"), ch[l], cin, 3);
            conv(&mut out, format!("enc.{l}.down"), ch[l], ch[l], 2);
        }
        for l in (0..ch.len() - 1).rev() {
            conv(&mut out, format!("dec.{l}.conv"), ch[l], ch[l + 1], 3);
            norm(&mut out, format!("dec.{l}.norm"), ch[l]);
        }
        for s in 0..self.ds_levels {
            conv(&mut out, format!("head.{s}"), 3, self.head_channels(s), 3);
        }
        out
    }

    /// Feature width entering gradient head `s`.
    fn head_channels(&self, s: usize) -> usize {
        self.channels[s.saturating_sub(1)]
    }
}

/// Named network weights, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for Parameters<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> Parameters<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every tensor on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound<'t, T: Real> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }
}

/// Fan-in scaled uniform weights, zero biases, unit norm scales and
/// zero-initialized gradient heads.
pub fn init_parameters(cfg: &NetConfig, seed: u64) -> Result<Parameters<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::default();
    for (name, shape, fan_in) in cfg.layout() {
        let n: usize = shape.iter().product();
        let data = if name.starts_with("head.") {
            vec![0.0; n]
        } else if let Some(fan_in) = fan_in {
            let bound = (1.0 / fan_in as f64).sqrt() as f32;
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        } else if name.contains(".norm.weight") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

pub struct Network<'c> {
    cfg: &'c NetConfig,
}

/// Outputs of [`Network::symmetric_forward`].
pub struct SymmetricOutput<'t, T: Real> {
    /// Raw gradient maps for `M -> F`, one per supervision level.
    pub forward: Vec<Var<'t, T>>,
    /// Raw gradient maps for `F -> M`.
    pub backward: Vec<Var<'t, T>>,
    /// Decoder inputs `E(M) - E(F)`.
    pub merged_forward: Vec<Var<'t, T>>,
    /// Decoder inputs `E(F) - E(M)`.
    pub merged_backward: Vec<Var<'t, T>>,
}

impl<'c> Network<'c> {
    pub fn new(cfg: &'c NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &NetConfig {
        self.cfg
    }

    fn norm_act<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        name: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut h = x.instance_norm(T::lit(self.cfg.norm_eps))?;
        if self.cfg.norm_affine {
            h = h.channel_affine(
                p.var(&format!("{name}.weight"))?,
                p.var(&format!("{name}.bias"))?,
            )?;
        }
        Ok(h.leaky_relu(T::lit(self.cfg.leaky_slope))?)
    }

    fn conv<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        name: &str,
        x: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let w = p.var(&format!("{name}.weight"))?;
        let b = p.var(&format!("{name}.bias"))?;
        Ok(x.conv3d(w, b, stride, padding)?)
    }

    /// Feature pyramid `[f_1, ..., f_L]`, `f_l` at `1 / 2^l` resolution.
    pub fn encode<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[0] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects [{}, D, H, W], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_extents([shape[1], shape[2], shape[3]])?;
        let mut h = x;
        let mut out = Vec::with_capacity(self.cfg.depth());
        for l in 0..self.cfg.depth() {
            h = self.norm_act(p, &format!("enc.{l}.norm"), h)?;
            h = self.conv(p, &format!("enc.{l}.conv"), h, 1, 1)?;
            h = self.conv(p, &format!("enc.{l}.down"), h, 2, 0)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Raw gradient maps, full resolution first.
    pub fn decode<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        m: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        let depth = self.cfg.depth();
        if m.len() != depth {
            return Err(Error::Shape(format!(
                "decoder expects {depth} levels, got {}",
                m.len()
            )));
        }
        let levels = self.cfg.ds_levels;
        let mut heads: Vec<Option<Var<'t, T>>> = vec![None; levels];
        let mut h = m[depth - 1];
        if levels > depth {
            heads[depth] = Some(self.conv(p, &format!("head.{depth}"), h, 1, 1)?);
        }
        for l in (0..depth - 1).rev() {
            h = self.conv(p, &format!("dec.{l}.conv"), h.upsample2x()?, 1, 1)?;
            h = h.add(m[l])?;
            h = self.norm_act(p, &format!("dec.{l}.norm"), h)?;
            let s = l + 1;
            if s < levels {
                heads[s] = Some(self.conv(p, &format!("head.{s}"), h, 1, 1)?);
            }
        }
        heads[0] = Some(self.conv(p, "head.0", h.upsample2x()?, 1, 1)?);
        Ok(heads
            .into_iter()
            .map(|h| h.expect("every level has a head"))
            .collect())
    }

    pub fn merge<'t, T: Real>(a: &[Var<'t, T>], b: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "pyramids of {} and {} levels",
                a.len(),
                b.len()
            )));
        }
        a.iter().zip(b).map(|(x, y)| Ok(x.sub(*y)?)).collect()
    }

    /// Encodes both volumes once and decodes `E(M) - E(F)` and `E(F) - E(M)`.
    pub fn symmetric_forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        moving: Var<'t, T>,
        fixed: Var<'t, T>,
    ) -> Result<SymmetricOutput<'t, T>> {
        if moving.shape() != fixed.shape() {
            return Err(Error::Shape(format!(
                "moving {:?} vs fixed {:?}",
                moving.shape(),
                fixed.shape()
            )));
        }
        let em = self.encode(p, moving)?;
        let ef = self.encode(p, fixed)?;
        let merged_forward = Self::merge(&em, &ef)?;
        let merged_backward = Self::merge(&ef, &em)?;
        let forward = self.decode(p, &merged_forward)?;
        let backward = self.decode(p, &merged_backward)?;
        Ok(SymmetricOutput {
            forward,
            backward,
            merged_forward,
            merged_backward,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NetConfig {
        NetConfig {
            channels: vec![4, 8],
            ..NetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::desk(&[8]).validate().is_err());
        assert!(NetConfig::desk(&[8, 0]).validate().is_err());
        assert!(NetConfig {
            ds_levels: 4,
            ..NetConfig::desk(&[8, 16])
        }
        .validate()
        .is_err());
        assert!(NetConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn head_widths_follow_the_decoder() {
        let cfg = NetConfig::desk(&[8, 16, 32]);
        let layout = cfg.layout();
        let shape = |n: &str| layout.iter().find(|(k, _, _)| k == n).unwrap().1.clone();
        assert_eq!(shape("head.0.weight"), vec![3, 8, 3, 3, 3]);
        assert_eq!(shape("head.1.weight"), vec![3, 8, 3, 3, 3]);
        assert_eq!(shape("head.2.weight"), vec![3, 16, 3, 3, 3]);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_parameters(&toy(), 5).unwrap();
        let b = init_parameters(&toy(), 5).unwrap();
        let c = init_parameters(&toy(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .get("head.0.weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = toy();
        let params = init_parameters(&cfg, 0).unwrap();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 6, 8, 8]));
        assert!(Network::new(&cfg).unwrap().encode(&p, x).is_err());
    }
}
