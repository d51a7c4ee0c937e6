//! Similarity, Dice and smoothness terms, and the symmetric training
//! objective with deep supervision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::Pair;
use crate::deformation::{
    activate_increments, image_pyramid, increment_deviation, integrate, label_pyramid,
};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const DICE_EPS: f64 = 1e-5;
const NCC_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Mse,
    Ncc,
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Mse => "mse",
            Similarity::Ncc => "ncc",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Similarity::Mse),
            "ncc" => Ok(Similarity::Ncc),
            other => Err(Error::Config(format!("unknown similarity `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// One weight per supervision level, full resolution first.
    pub ds_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.01,
            ds_weights: vec![1.0, 0.5, 0.25],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all
            .iter()
            .chain(&self.ds_weights)
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.alpha <= 0.0 && self.beta <= 0.0 {
            return Err(Error::Config("alpha or beta must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of `(a - b)^2` over all elements.
pub fn mse<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(a.sub(b)?.square()?.mean()?)
}

/// `1 - corr(a, b)` over the whole volume. A constant input has zero
/// correlation.
pub fn ncc<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let da = a.sub(a.mean()?)?;
    let db = b.sub(b.mean()?)?;
    let cov = da.mul(db)?.mean()?;
    let va = da.square()?.mean()?;
    let vb = db.square()?.mean()?;
    let denom = va.mul(vb)?.add_scalar(T::lit(NCC_EPS))?.sqrt()?;
    Ok(cov.div(denom)?.neg()?.add_scalar(T::one())?)
}

pub fn similarity<'t, T: Real>(
    kind: Similarity,
    a: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    match kind {
        Similarity::Mse => mse(a, b),
        Similarity::Ncc => ncc(a, b),
    }
}

/// Per-class soft Dice coefficients of `[K, ...]` tensors.
fn dice_per_class<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() || pred.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "dice inputs {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let eps = T::lit(DICE_EPS);
    let inter = pred
        .mul(target)?
        .sum_per_channel()?
        .scale(T::lit(2.0))?
        .add_scalar(eps)?;
    let denom = pred
        .sum_per_channel()?
        .add(target.sum_per_channel()?)?
        .add_scalar(eps)?;
    Ok(inter.div(denom)?)
}

/// `1 - mean Dice` over the foreground classes `1..K`.
pub fn soft_dice<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let k = pred.shape().first().copied().unwrap_or(0);
    let available = vec![true; k];
    Ok(partial_dice(pred, target, &available)?.loss)
}

/// Dice loss and whether any class contributed.
#[derive(Clone, Copy)]
pub struct PartialDice<'t, T: Real> {
    pub loss: Var<'t, T>,
    /// Set when no foreground class was available; the loss is then zero.
    pub empty: bool,
}

/// Soft Dice restricted to the available foreground classes. Unavailable
/// classes are multiplied by a constant zero, so they receive no gradient.
pub fn partial_dice<'t, T: Real>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    available: &[bool],
) -> Result<PartialDice<'t, T>> {
    let k = pred.shape().first().copied().unwrap_or(0);
    if available.len() != k {
        return Err(Error::Shape(format!(
            "availability for {} classes, prediction has {k}",
            available.len()
        )));
    }
    let dice = dice_per_class(pred, target)?;
    let mask: Vec<T> = (0..k)
        .map(|c| {
            if c > 0 && available[c] {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let n = mask.iter().filter(|m| **m > T::zero()).count();
    let tape = pred.tape();
    if n == 0 {
        return Ok(PartialDice {
            loss: tape.constant(Tensor::scalar(T::zero())),
            empty: true,
        });
    }
    let mask = tape.constant(Tensor::new(vec![k], mask)?);
    let mean = dice.mul(mask)?.sum()?.scale(T::one() / T::lit(n as f64))?;
    Ok(PartialDice {
        loss: mean.neg()?.add_scalar(T::one())?,
        empty: false,
    })
}

/// Mean squared deviation of activated increments from the identity.
pub fn smoothness<'t, T: Real>(g: Var<'t, T>) -> Result<Var<'t, T>> {
    increment_deviation(g)
}

/// Images and one-hot segmentations at one supervision level.
#[derive(Clone, Debug)]
pub struct LevelTargets<T: Real> {
    pub moving: Tensor<T>,
    pub fixed: Tensor<T>,
    pub moving_seg: Option<Tensor<T>>,
    pub fixed_seg: Option<Tensor<T>>,
    /// Classes annotated in both segmentations.
    pub available: Vec<bool>,
}

/// Downscaled training targets for every supervision level.
#[derive(Clone, Debug)]
pub struct PairTargets<T: Real> {
    pub levels: Vec<LevelTargets<T>>,
}

impl<T: Real> PairTargets<T> {
    pub fn from_pair(pair: &Pair, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("need at least one supervision level".into()));
        }
        let depth = levels - 1;
        let mi = image_pyramid(&pair.moving.data, depth);
        let fi = image_pyramid(&pair.fixed.data, depth);
        let segs = match (&pair.moving_seg, &pair.fixed_seg) {
            (Some(m), Some(f)) => {
                if m.num_classes() != f.num_classes() {
                    return Err(Error::Shape(format!(
                        "segmentations with {} and {} classes",
                        m.num_classes(),
                        f.num_classes()
                    )));
                }
                let available: Vec<bool> = m
                    .available()
                    .iter()
                    .zip(f.available())
                    .map(|(a, b)| *a && *b)
                    .collect();
                Some((label_pyramid(m, depth), label_pyramid(f, depth), available))
            }
            _ => None,
        };
        let levels = (0..levels)
            .map(|l| LevelTargets {
                moving: mi[l].cast(),
                fixed: fi[l].cast(),
                moving_seg: segs.as_ref().map(|s| s.0[l].one_hot().cast()),
                fixed_seg: segs.as_ref().map(|s| s.1[l].one_hot().cast()),
                available: segs.as_ref().map(|s| s.2.clone()).unwrap_or_default(),
            })
            .collect();
        Ok(Self { levels })
    }

    /// Exchanges the moving and fixed roles.
    pub fn swapped(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| LevelTargets {
                    moving: l.fixed.clone(),
                    fixed: l.moving.clone(),
                    moving_seg: l.fixed_seg.clone(),
                    fixed_seg: l.moving_seg.clone(),
                    available: l.available.clone(),
                })
                .collect(),
        }
    }
}

/// Weighted terms of one registration direction, summed over levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub sim: f64,
    pub sup: f64,
    pub smo: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub forward: TermReport,
    pub backward: TermReport,
    /// Set when segmentations were given but no foreground class was usable.
    pub no_supervised_class: bool,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn direction<'t, T: Real>(
    tape: &'t Tape<T>,
    targets: &PairTargets<T>,
    raw: &[Var<'t, T>],
    w: &LossWeights,
    kind: Similarity,
    report: &mut TermReport,
    no_class: &mut bool,
) -> Result<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    for (l, (&r, t)) in raw.iter().zip(&targets.levels).enumerate() {
        let g = activate_increments(r)?;
        let phi = integrate(g)?;
        let warped = tape.constant(t.moving.clone()).trilinear_sample(phi)?;
        let sim = similarity(kind, warped, tape.constant(t.fixed.clone()))?;
        let smo = smoothness(g)?;
        let dw = w.ds_weights[l];
        let mut level = sim
            .scale(T::lit(w.alpha))?
            .add(smo.scale(T::lit(w.gamma))?)?;
        report.sim += dw * w.alpha * sim.item().to_f64().unwrap_or(f64::NAN);
        report.smo += dw * w.gamma * smo.item().to_f64().unwrap_or(f64::NAN);
        if let (Some(ms), Some(fs)) = (&t.moving_seg, &t.fixed_seg) {
            let warped_seg = tape.constant(ms.clone()).trilinear_sample(phi)?;
            let sup = partial_dice(warped_seg, tape.constant(fs.clone()), &t.available)?;
            *no_class |= sup.empty;
            level = level.add(sup.loss.scale(T::lit(w.beta))?)?;
            report.sup += dw * w.beta * sup.loss.item().to_f64().unwrap_or(f64::NAN);
        }
        let level = level.scale(T::lit(dw))?;
        acc = Some(match acc {
            Some(a) => a.add(level)?,
            None => level,
        });
    }
    let total = acc.ok_or_else(|| Error::Config("no supervision levels".into()))?;
    report.total = total.item().to_f64().unwrap_or(f64::NAN);
    Ok(total)
}

/// Symmetric objective: the `M -> F` terms on `raw_forward` plus the
/// `F -> M` terms on `raw_backward`, each summed over supervision levels.
pub fn total_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    targets: &PairTargets<T>,
    raw_forward: &[Var<'t, T>],
    raw_backward: &[Var<'t, T>],
    w: &LossWeights,
    kind: Similarity,
) -> Result<(Var<'t, T>, LossReport)> {
    w.validate()?;
    let n = targets.levels.len();
    if raw_forward.len() != n || raw_backward.len() != n || w.ds_weights.len() != n {
        return Err(Error::Config(format!(
            "{} supervision levels, {} and {} predictions, {} ds weights",
            n,
            raw_forward.len(),
            raw_backward.len(),
            w.ds_weights.len()
        )));
    }
    let mut report = LossReport::default();
    let mut no_class = false;
    let fwd = direction(
        tape,
        targets,
        raw_forward,
        w,
        kind,
        &mut report.forward,
        &mut no_class,
    )?;
    let bwd = direction(
        tape,
        &targets.swapped(),
        raw_backward,
        w,
        kind,
        &mut report.backward,
        &mut no_class,
    )?;
    let total = fwd.add(bwd)?;
    report.total = total.item().to_f64().unwrap_or(f64::NAN);
    report.no_supervised_class = no_class;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, f: impl Fn(f64) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, 2, n], |i| f((i[2] * n + i[3]) as f64))
    }

    #[test]
    fn mse_constant_offset() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(ramp(4, |x| x));
        let b = tape.constant(ramp(4, |x| x + 3.0));
        assert!((mse(a, b).unwrap().item() - 9.0).abs() < 1e-12);
        assert_eq!(mse(a, a).unwrap().item(), 0.0);
    }

    #[test]
    fn ncc_affine_and_anticorrelation() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(ramp(5, |x| (x * 0.7).sin()));
        let b = tape.constant(ramp(5, |x| 3.0 * (x * 0.7).sin() + 7.0));
        let c = tape.constant(ramp(5, |x| 2.0 - (x * 0.7).sin()));
        assert!(ncc(a, a).unwrap().item().abs() < 1e-8);
        assert!(ncc(a, b).unwrap().item().abs() < 1e-8);
        assert!((ncc(a, c).unwrap().item() - 2.0).abs() < 1e-8);
        let k = tape.constant(ramp(5, |_| 4.0));
        assert!((ncc(a, k).unwrap().item() - 1.0).abs() < 1e-12);
    }

    fn mask(bits: &[u8]) -> Tensor<f64> {
        let n = bits.len();
        let mut data: Vec<f64> = bits.iter().map(|&b| 1.0 - b as f64).collect();
        data.extend(bits.iter().map(|&b| b as f64));
        Tensor::new(vec![2, 1, 1, n], data).unwrap()
    }

    #[test]
    fn dice_set_counts() {
        // |A| = |B| = 8 with 4 shared voxels
        let mut a = vec![0u8; 16];
        let mut b = vec![0u8; 16];
        a[..8].iter_mut().for_each(|v| *v = 1);
        b[4..12].iter_mut().for_each(|v| *v = 1);
        let tape = Tape::<f64>::new();
        let loss = soft_dice(tape.constant(mask(&a)), tape.constant(mask(&b))).unwrap();
        let expect = 1.0 - (8.0 + DICE_EPS) / (16.0 + DICE_EPS);
        assert!((loss.item() - expect).abs() < 1e-12);
        assert!(
            soft_dice(tape.constant(mask(&a)), tape.constant(mask(&a)))
                .unwrap()
                .item()
                < 1e-12
        );
    }

    #[test]
    fn partial_dice_without_classes_flags() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(mask(&[1, 0]));
        let out = partial_dice(p, p, &[true, false]).unwrap();
        assert!(out.empty);
        assert_eq!(out.loss.item(), 0.0);
    }

    #[test]
    fn smoothness_of_constant_increments() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[3, 2, 2, 2], 1.5));
        assert!((smoothness(g).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn similarity_parses() {
        assert_eq!("NCC".parse::<Similarity>().unwrap(), Similarity::Ncc);
        assert!("ssim".parse::<Similarity>().is_err());
    }

    #[test]
    fn weights_need_a_data_term() {
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
