//! Finite-difference verification of every differentiable operation.
//!
//! Each check reduces an op's output to a scalar with a fixed random
//! projection, then compares the tape gradient of every input element with a
//! central difference. Projections are accumulated in `f64` so that single
//! precision checks measure the kernels rather than the reduction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::deformation::{activate_increments, integrate};
use crate::error::Result;
use crate::losses::{
    mse, ncc, partial_dice, smoothness, soft_dice, total_loss, LevelTargets, LossWeights,
    PairTargets, Similarity,
};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Operations covered by the suite.
pub const OPS: &[&str] = &[
    "conv3d",
    "conv3d_strided",
    "instance_norm",
    "channel_affine",
    "leaky_relu",
    "sigmoid",
    "cumsum_exclusive",
    "upsample2x",
    "trilinear_sample",
    "integrate",
    "mse",
    "ncc",
    "soft_dice",
    "partial_dice",
    "smoothness",
    "total_loss",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rtol: f64,
}

pub const F32_TOL: Tolerance = Tolerance {
    step: 1e-3,
    rtol: 1e-3,
};
pub const F64_TOL: Tolerance = Tolerance {
    step: 1e-5,
    rtol: 1e-6,
};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub op: String,
    pub precision: &'static str,
    pub seed: u64,
    /// Largest `|analytic - numeric| / (1 + |numeric|)`.
    pub worst: f64,
    pub rtol: f64,
    pub elements: usize,
    pub passed: bool,
}

type OpFn<T> = dyn for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>;

fn op_fn<T: Real, F>(f: F) -> F
where
    F: for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    f
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        T::lit(scale * rng.sample::<f64, _>(StandardNormal))
    })
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}

/// `sum(w * f(x))` in `f64`.
fn project<T: Real>(f: &OpFn<T>, inputs: &[Tensor<T>], w: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&vars)?.value();
    Ok(y.data()
        .iter()
        .zip(w)
        .map(|(v, w)| v.to_f64().unwrap() * w)
        .sum())
}

/// Compares tape and finite-difference gradients of the projected output
/// with respect to the inputs flagged in `differentiate`.
pub fn check<T: Real>(
    op: &str,
    precision: &'static str,
    seed: u64,
    tol: Tolerance,
    inputs: &[Tensor<T>],
    differentiate: &[bool],
    f: &OpFn<T>,
    corrupt: bool,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed_f00d);
    let (w, analytic) = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = inputs
            .iter()
            .zip(differentiate)
            .map(|(t, &d)| tape.leaf(t.clone(), d))
            .collect();
        let y = f(&vars)?;
        let w: Vec<f64> = if y.value().numel() == 1 {
            vec![1.0]
        } else {
            (0..y.value().numel())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        };
        let wt = tape.constant(Tensor::new(
            y.shape(),
            w.iter().map(|&v| T::lit(v)).collect(),
        )?);
        let s = y.mul(wt)?.sum()?;
        let grads = tape.backward(s)?;
        let analytic: Vec<Option<Tensor<T>>> = vars
            .iter()
            .zip(differentiate)
            .map(|(v, &d)| {
                d.then(|| {
                    grads
                        .get(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(&v.shape()))
                })
            })
            .collect();
        (w, analytic)
    };
    let mut worst = 0.0f64;
    let mut elements = 0;
    let mut perturbed = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        for k in 0..inputs[i].numel() {
            let x = inputs[i].data()[k];
            let h = T::lit(tol.step);
            perturbed[i].data_mut()[k] = x + h;
            let up = project(f, &perturbed, &w)?;
            perturbed[i].data_mut()[k] = x - h;
            let down = project(f, &perturbed, &w)?;
            perturbed[i].data_mut()[k] = x;
            let dx = ((x + h) - (x - h)).to_f64().unwrap();
            let numeric = (up - down) / dx;
            let mut analytic = a.data()[k].to_f64().unwrap();
            if corrupt && elements == 0 {
                analytic += 0.1 * (1.0 + analytic.abs());
            }
            worst = worst.max((analytic - numeric).abs() / (1.0 + numeric.abs()));
            elements += 1;
        }
    }
    Ok(CheckResult {
        op: op.to_string(),
        precision,
        seed,
        worst,
        rtol: tol.rtol,
        elements,
        passed: worst <= tol.rtol,
    })
}

/// Values kept at least `margin` away from zero.
fn away_from_zero<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(margin..1.5);
        T::lit(if rng.random_bool(0.5) { mag } else { -mag })
    })
}

/// Coordinates inside `[0, n - 1]` at least `margin` from every integer.
fn off_grid_coords<T: Real>(
    rng: &mut ChaCha8Rng,
    out: [usize; 3],
    vol: [usize; 3],
    margin: f64,
) -> Tensor<T> {
    Tensor::from_fn(&[3, out[0], out[1], out[2]], |i| {
        let cell = rng.random_range(0..vol[i[0]] - 1) as f64;
        T::lit(cell + rng.random_range(margin..1.0 - margin))
    })
}

fn soft_labels<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    uniform(rng, shape, 0.05, 0.95)
}

/// Smallest distance of any moving sampling coordinate to a cell boundary.
fn coordinate_margin<T: Real>(raw: &Tensor<T>) -> f64 {
    let tape = Tape::new();
    let phi = activate_increments(tape.constant(raw.clone()))
        .and_then(integrate)
        .expect("valid raw map")
        .value();
    phi.data()
        .iter()
        .map(|v| v.to_f64().unwrap())
        .filter(|&v| v != 0.0)
        .map(|v| (v - v.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Raw maps whose integrated coordinates stay clear of cell boundaries under
/// a perturbation of `step`.
fn kink_free_raw<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 3], step: f64) -> Tensor<T> {
    let dims = [3, shape[0], shape[1], shape[2]];
    loop {
        let raw: Tensor<T> = normal(rng, &dims, 0.5);
        if coordinate_margin(&raw) > step {
            return raw;
        }
    }
}

fn run_op<T: Real>(
    op: &str,
    precision: &'static str,
    seed: u64,
    tol: Tolerance,
    corrupt: bool,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = |n: usize| vec![true; n];
    match op {
        "conv3d" => {
            let inputs = [
                normal::<T>(&mut rng, &[2, 4, 4, 3], 1.0),
                normal(&mut rng, &[3, 2, 3, 3, 3], 0.3),
                normal(&mut rng, &[3], 0.3),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(3),
                &|v| Ok(v[0].conv3d(v[1], v[2], 1, 1)?),
                corrupt,
            )
        }
        "conv3d_strided" => {
            let inputs = [
                normal::<T>(&mut rng, &[2, 4, 4, 4], 1.0),
                normal(&mut rng, &[2, 2, 2, 2, 2], 0.3),
                normal(&mut rng, &[2], 0.3),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(3),
                &|v| Ok(v[0].conv3d(v[1], v[2], 2, 0)?),
                corrupt,
            )
        }
        "instance_norm" => {
            let inputs = [normal::<T>(&mut rng, &[2, 3, 3, 3], 1.0)];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(1),
                &|v| Ok(v[0].instance_norm(T::lit(1e-5))?),
                corrupt,
            )
        }
        "channel_affine" => {
            let inputs = [
                normal::<T>(&mut rng, &[2, 2, 2, 3], 1.0),
                normal(&mut rng, &[2], 1.0),
                normal(&mut rng, &[2], 1.0),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(3),
                &|v| Ok(v[0].channel_affine(v[1], v[2])?),
                corrupt,
            )
        }
        "leaky_relu" => {
            let inputs = [away_from_zero::<T>(&mut rng, &[2, 3, 3, 3], 0.05)];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(1),
                &|v| Ok(v[0].leaky_relu(T::lit(0.2))?),
                corrupt,
            )
        }
        "sigmoid" => {
            let inputs = [normal::<T>(&mut rng, &[2, 3, 3, 3], 2.0)];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(1),
                &|v| Ok(v[0].sigmoid()?),
                corrupt,
            )
        }
        "cumsum_exclusive" => {
            let axis = (seed % 3) as usize;
            let inputs = [normal::<T>(&mut rng, &[2, 3, 4, 5], 1.0)];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(1),
                &move |v| Ok(v[0].cumsum_exclusive(1 + axis)?),
                corrupt,
            )
        }
        "upsample2x" => {
            let inputs = [normal::<T>(&mut rng, &[2, 2, 3, 2], 1.0)];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(1),
                &|v| Ok(v[0].upsample2x()?),
                corrupt,
            )
        }
        "trilinear_sample" => {
            let vol = [4, 3, 5];
            let inputs = [
                normal::<T>(&mut rng, &[2, 4, 3, 5], 1.0),
                off_grid_coords(&mut rng, [2, 3, 2], vol, 0.05),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(2),
                &|v| Ok(v[0].trilinear_sample(v[1])?),
                corrupt,
            )
        }
        "integrate" => {
            let inputs = [normal::<T>(&mut rng, &[3, 3, 4, 2], 1.0)];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(1),
                &|v| Ok(integrate(activate_increments(v[0])?)?),
                corrupt,
            )
        }
        "mse" => {
            let inputs = [
                normal::<T>(&mut rng, &[1, 3, 3, 3], 1.0),
                normal(&mut rng, &[1, 3, 3, 3], 1.0),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(2),
                &|v| mse(v[0], v[1]),
                corrupt,
            )
        }
        "ncc" => {
            let inputs = [
                normal::<T>(&mut rng, &[1, 3, 3, 3], 1.0),
                normal(&mut rng, &[1, 3, 3, 3], 1.0),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(2),
                &|v| ncc(v[0], v[1]),
                corrupt,
            )
        }
        "soft_dice" => {
            let inputs = [
                soft_labels::<T>(&mut rng, &[3, 2, 3, 3]),
                soft_labels(&mut rng, &[3, 2, 3, 3]),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(2),
                &|v| soft_dice(v[0], v[1]),
                corrupt,
            )
        }
        "partial_dice" => {
            let inputs = [
                soft_labels::<T>(&mut rng, &[3, 2, 3, 3]),
                soft_labels(&mut rng, &[3, 2, 3, 3]),
            ];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(2),
                &|v| Ok(partial_dice(v[0], v[1], &[true, true, false])?.loss),
                corrupt,
            )
        }
        "smoothness" => {
            let inputs = [uniform::<T>(&mut rng, &[3, 2, 3, 3], 0.1, 1.9)];
            check(
                op,
                precision,
                seed,
                tol,
                &inputs,
                &all(1),
                &|v| smoothness(v[0]),
                corrupt,
            )
        }
        "total_loss" => {
            let shape = [4, 4, 4];
            let coarse = [2, 2, 2];
            let level = |rng: &mut ChaCha8Rng, s: [usize; 3]| {
                let dims = [1, s[0], s[1], s[2]];
                let seg = [3, s[0], s[1], s[2]];
                LevelTargets::<T> {
                    moving: normal(rng, &dims, 1.0),
                    fixed: normal(rng, &dims, 1.0),
                    moving_seg: Some(soft_labels(rng, &seg)),
                    fixed_seg: Some(soft_labels(rng, &seg)),
                    available: vec![true, true, false],
                }
            };
            let targets = PairTargets {
                levels: vec![level(&mut rng, shape), level(&mut rng, coarse)],
            };
            let kind = if seed % 2 == 0 {
                Similarity::Mse
            } else {
                Similarity::Ncc
            };
            let weights = LossWeights {
                alpha: 1.0,
                beta: 1.0,
                gamma: 0.1,
                ds_weights: vec![1.0, 0.5],
            };
            let inputs = [
                kink_free_raw::<T>(&mut rng, shape, tol.step),
                kink_free_raw(&mut rng, coarse, tol.step),
                kink_free_raw(&mut rng, shape, tol.step),
                kink_free_raw(&mut rng, coarse, tol.step),
            ];
            let f = op_fn(move |v: &[Var<'_, T>]| {
                let tape = v[0].tape();
                Ok(total_loss(tape, &targets, &v[..2], &v[2..], &weights, kind)?.0)
            });
            check(op, precision, seed, tol, &inputs, &all(4), &f, corrupt)
        }
        other => Err(crate::error::Error::Invalid(format!(
            "unknown op `{other}`"
        ))),
    }
}

/// Runs every op in both precisions for `seeds` consecutive seeds starting
/// at `seed`. `corrupt` perturbs the analytic gradient of the named op.
pub fn run_suite(seed: u64, seeds: u64, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &op in OPS {
        let bad = corrupt == Some(op);
        for s in seed..seed + seeds {
            out.push(run_op::<f64>(op, "f64", s, F64_TOL, bad)?);
            out.push(run_op::<f32>(op, "f32", s, F32_TOL, bad)?);
        }
    }
    Ok(out)
}
