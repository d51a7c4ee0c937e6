//! Training loop, periodic evaluation and checkpointing, and inference.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{augment_pair, extract_patch, AugmentConfig, Pair, PatchOrigin};
use crate::checkpoint::{restore, Checkpoint, RestoreReport};
use crate::deformation::{DeformationField, GradientField, WarpMode};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights, PairTargets, Similarity};
use crate::manifest::Manifest;
use crate::metrics::{evaluate_case, EvalReport};
use crate::network::{init_parameters, NetConfig, Network, Parameters};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor};
use crate::volume::{LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    /// Random crop size; whole volumes when unset.
    pub patch: Option<[usize; 3]>,
    pub similarity: Similarity,
    pub loss: LossWeights,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Steps between evaluations; 0 disables them.
    pub eval_every: usize,
    /// Stop once an evaluation reaches this mean Dice.
    pub stop_at_dice: Option<f64>,
    /// Also train on the validation cases.
    pub merge_splits: bool,
    pub pretrain: Option<PathBuf>,
    /// Classes marked unannotated in every training segmentation.
    pub unavailable_labels: Vec<usize>,
    pub net: NetConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 1,
            epochs: 300,
            steps: None,
            patch: None,
            similarity: Similarity::Mse,
            loss: LossWeights::default(),
            augment: false,
            augmentation: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            stop_at_dice: None,
            merge_splits: false,
            pretrain: None,
            unavailable_labels: Vec::new(),
            net: NetConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.net.validate()?;
        self.loss.validate()?;
        if self.loss.ds_weights.len() != self.net.ds_levels {
            return Err(Error::Config(format!(
                "{} ds_weights for {} supervision levels",
                self.loss.ds_weights.len(),
                self.net.ds_levels
            )));
        }
        if let Some(p) = self.patch {
            self.net.check_extents(p)?;
        }
        Ok(())
    }

    pub fn total_steps(&self, cases: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * cases.div_ceil(self.batch_size))
    }
}

/// A named registration pair held in memory.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub pair: Pair,
    pub field: Option<PathBuf>,
}

fn mask_labels(seg: &mut Option<LabelMap>, unavailable: &[usize]) {
    if let Some(s) = seg {
        for &k in unavailable {
            if k > 0 && k < s.num_classes() {
                s.set_available(k, false);
            }
        }
    }
}

/// Loads every case of a manifest, marking `unavailable` classes.
pub fn load_cases(manifest: &Manifest, unavailable: &[usize]) -> Result<Vec<Case>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let mut pair = manifest.load_pair(e)?;
            mask_labels(&mut pair.moving_seg, unavailable);
            mask_labels(&mut pair.fixed_seg, unavailable);
            Ok(Case {
                id: e.id.clone(),
                pair,
                field: e.field.as_ref().map(|f| manifest.resolve(f)),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        wall: f64,
        loss: LossReport,
    },
    Eval {
        step: usize,
        dice: f64,
        dice30: f64,
        baseline_dice: f64,
    },
    Restore {
        path: String,
        report: RestoreReport,
    },
    Checkpoint {
        step: usize,
        path: String,
    },
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Parameters, optimizer state and the sampling stream of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: Parameters<f32>,
    opt: Adam<f32>,
    step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_parameters(&cfg.net, cfg.seed)?;
        Ok(Self::with_params(cfg, params))
    }

    pub fn with_params(cfg: TrainConfig, params: Parameters<f32>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        Self {
            opt: Adam::new(cfg.adam),
            cfg,
            params,
            step: 0,
            rng,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn load_pretrained(&mut self, path: impl AsRef<Path>) -> Result<RestoreReport> {
        let ckpt = Checkpoint::load(path)?;
        Ok(restore(&mut self.params, &ckpt.params))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.step as u64,
            self.cfg.net.clone(),
            Some(&self.cfg),
            self.params.clone(),
        )
    }

    /// Augments and crops a pair as configured.
    pub fn prepare(&mut self, pair: &Pair) -> Pair {
        let mut p = if self.cfg.augment {
            augment_pair(pair, &self.cfg.augmentation, &mut self.rng)
        } else {
            pair.clone()
        };
        if let Some(size) = self.cfg.patch {
            if size != p.spatial() {
                p = extract_patch(&p, size, PatchOrigin::Random, &mut self.rng);
            }
        }
        p
    }

    /// Symmetric loss of one pair and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        pair: &Pair,
    ) -> Result<(LossReport, BTreeMap<String, Tensor<f32>>)> {
        loss_and_grads(&self.cfg, &self.params, pair)
    }

    /// One optimizer update on already prepared pairs; returns the mean
    /// report over the batch.
    pub fn train_step(&mut self, batch: &[Pair]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut report = LossReport::default();
        let inv = 1.0 / batch.len() as f32;
        for pair in batch {
            let (r, grads) = self.loss_and_grads(pair)?;
            for (name, g) in grads {
                let g = g.map(|v| v * inv);
                match sum.get_mut(&name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
            accumulate(&mut report, &r, batch.len());
        }
        self.opt.step(&mut self.params, &sum, self.cfg.lr)?;
        self.step += 1;
        Ok(report)
    }
}

fn accumulate(acc: &mut LossReport, r: &LossReport, n: usize) {
    let w = 1.0 / n as f64;
    acc.total += w * r.total;
    for (a, b) in [
        (&mut acc.forward, &r.forward),
        (&mut acc.backward, &r.backward),
    ] {
        a.sim += w * b.sim;
        a.sup += w * b.sup;
        a.smo += w * b.smo;
        a.total += w * b.total;
    }
    acc.no_supervised_class |= r.no_supervised_class;
}

/// Symmetric loss of `pair` under `params` with gradients by parameter name.
pub fn loss_and_grads(
    cfg: &TrainConfig,
    params: &Parameters<f32>,
    pair: &Pair,
) -> Result<(LossReport, BTreeMap<String, Tensor<f32>>)> {
    let net = Network::new(&cfg.net)?;
    let targets = PairTargets::<f32>::from_pair(pair, cfg.net.ds_levels)?;
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let m = tape.constant(pair.moving.data.clone());
    let f = tape.constant(pair.fixed.data.clone());
    let out = net.symmetric_forward(&bound, m, f)?;
    let (loss, report) = total_loss(
        &tape,
        &targets,
        &out.forward,
        &out.backward,
        &cfg.loss,
        cfg.similarity,
    )?;
    let mut grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, var) in bound.iter() {
        if let Some(g) = grads.take(var.id()) {
            named.insert(name.clone(), g);
        }
    }
    Ok((report, named))
}

/// Where training writes its log, checkpoints and evaluations.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub out_dir: Option<&'a Path>,
    pub eval_cases: &'a [Case],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub losses: Vec<LossReport>,
    /// `(step, mean Dice)` at every evaluation.
    pub evals: Vec<(usize, f64)>,
    pub restore: Option<RestoreReport>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    /// First evaluated step whose mean Dice reaches `threshold`.
    pub fn steps_to_dice(&self, threshold: f64) -> Option<usize> {
        self.evals
            .iter()
            .find(|(_, d)| *d >= threshold)
            .map(|(s, _)| *s)
    }
}

fn emit(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{}", rec.to_json_line()).map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}

/// Mean Dice over `cases` with whole-volume inference.
pub fn evaluate_cases(
    net: &NetConfig,
    params: &Parameters<f32>,
    cases: &[Case],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let (Some(ms), Some(fs)) = (&c.pair.moving_seg, &c.pair.fixed_seg) else {
            continue;
        };
        let reg = register(net, params, &c.pair.moving, &c.pair.fixed, Patching::Auto)?;
        rows.push(evaluate_case(&c.id, ms, fs, &reg.forward)?);
    }
    Ok(EvalReport::new(rows))
}

/// Runs the configured number of steps over `cases`.
pub fn train(cfg: &TrainConfig, cases: &[Case], sinks: TrainSinks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut pool: Vec<&Case> = cases.iter().collect();
    if cfg.merge_splits {
        pool.extend(sinks.eval_cases);
    }
    if pool.is_empty() {
        return Err(Error::Manifest("no training cases".into()));
    }
    if let Some(p) = cfg.patch {
        if let Some(c) = pool
            .iter()
            .find(|c| (0..3).any(|a| p[a] > c.pair.spatial()[a]))
        {
            return Err(Error::Config(format!(
                "patch {p:?} is larger than case `{}` of shape {:?}",
                c.id,
                c.pair.spatial()
            )));
        }
    } else if let Some(c) = pool
        .iter()
        .find(|c| cfg.net.check_extents(c.pair.spatial()).is_err())
    {
        return Err(Error::Config(format!(
            "case `{}` of shape {:?} needs a patch size divisible by {}",
            c.id,
            c.pair.spatial(),
            cfg.net.divisor()
        )));
    }
    let mut log = sinks.log;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut restore_report = None;
    if let Some(path) = &cfg.pretrain {
        let report = trainer.load_pretrained(path)?;
        emit(
            &mut log,
            &LogRecord::Restore {
                path: path.display().to_string(),
                report: report.clone(),
            },
        )?;
        restore_report = Some(report);
    }
    let total = cfg.total_steps(pool.len());
    let per_epoch = pool.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let started = Instant::now();
    let mut evaluate =
        |trainer: &Trainer, log: &mut Option<&mut dyn Write>, step: usize| -> Result<bool> {
            if sinks.eval_cases.is_empty() {
                return Ok(false);
            }
            let r = evaluate_cases(&cfg.net, &trainer.params, sinks.eval_cases)?;
            evals.push((step, r.registered.dice));
            let reached = cfg.stop_at_dice.is_some_and(|t| r.registered.dice >= t);
            emit(
                log,
                &LogRecord::Eval {
                    step,
                    dice: r.registered.dice,
                    dice30: r.registered.dice30,
                    baseline_dice: r.baseline.dice,
                },
            )?;
            Ok(reached)
        };
    let save = |trainer: &Trainer,
                log: &mut Option<&mut dyn Write>,
                name: &str|
     -> Result<Option<PathBuf>> {
        let Some(dir) = sinks.out_dir else {
            return Ok(None);
        };
        let path = dir.join(name);
        trainer.checkpoint().save(&path)?;
        emit(
            log,
            &LogRecord::Checkpoint {
                step: trainer.step_count(),
                path: path.display().to_string(),
            },
        )?;
        Ok(Some(path))
    };
    let mut stop = cfg.eval_every > 0 && evaluate(&trainer, &mut log, 0)?;
    for step in 0..total {
        if stop {
            break;
        }
        if order.len() < cfg.batch_size {
            let mut epoch: Vec<usize> = (0..pool.len()).collect();
            epoch.shuffle(&mut trainer.rng);
            order.extend(epoch);
        }
        let batch: Vec<Pair> = order
            .drain(..cfg.batch_size)
            .map(|i| pool[i].pair.clone())
            .collect::<Vec<_>>()
            .iter()
            .map(|p| trainer.prepare(p))
            .collect();
        let report = trainer.train_step(&batch)?;
        emit(
            &mut log,
            &LogRecord::Step {
                step: step + 1,
                epoch: step / per_epoch,
                lr: cfg.lr,
                wall: started.elapsed().as_secs_f64(),
                loss: report.clone(),
            },
        )?;
        losses.push(report);
        let done = step + 1;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == total) {
            stop = evaluate(&trainer, &mut log, done)?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != total {
            save(&trainer, &mut log, &format!("step_{done:06}.ckpt"))?;
        }
    }
    let checkpoint = save(&trainer, &mut log, "final.ckpt")?;
    Ok(TrainOutcome {
        params: trainer.params,
        losses,
        evals,
        restore: restore_report,
        checkpoint,
    })
}

/// Inference tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Patching {
    Whole,
    /// Overlapping windows whose raw maps are averaged before activation.
    Sliding {
        patch: [usize; 3],
        stride: [usize; 3],
    },
    /// Whole when the extents allow it, otherwise sliding windows.
    Auto,
}

/// Output of [`register`].
#[derive(Clone, Debug)]
pub struct Registration {
    pub forward: DeformationField,
    pub backward: DeformationField,
    pub moving_warped: Volume,
    pub fixed_warped: Volume,
    pub raw_forward: Tensor<f32>,
    pub raw_backward: Tensor<f32>,
}

/// Full-resolution raw maps for both directions of one window.
fn predict_window(
    net: &NetConfig,
    params: &Parameters<f32>,
    m: &Tensor<f32>,
    f: &Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let network = Network::new(net)?;
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let out =
        network.symmetric_forward(&bound, tape.constant(m.clone()), tape.constant(f.clone()))?;
    Ok((
        (*out.forward[0].value()).clone(),
        (*out.backward[0].value()).clone(),
    ))
}

fn window_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    if n <= patch {
        return vec![0];
    }
    let mut s: Vec<usize> = (0..=n - patch).step_by(stride.max(1)).collect();
    if *s.last().unwrap() != n - patch {
        s.push(n - patch);
    }
    s
}

/// Crops `[C, ...]` at `origin` with border repetition past the edges.
fn crop(t: &Tensor<f32>, origin: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let [d, h, w] = t.spatial();
    let c = t.shape()[0];
    Tensor::from_fn(&[c, size[0], size[1], size[2]], |i| {
        t.at(&[
            i[0],
            (origin[0] + i[1]).min(d - 1),
            (origin[1] + i[2]).min(h - 1),
            (origin[2] + i[3]).min(w - 1),
        ])
    })
}

/// Raw maps for the whole volume, tiled with `patch` windows at `stride`
/// and averaged where windows overlap.
pub fn sliding_raw(
    net: &NetConfig,
    params: &Parameters<f32>,
    m: &Tensor<f32>,
    f: &Tensor<f32>,
    patch: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    net.check_extents(patch)?;
    let shape = m.spatial();
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(shape[a], patch[a], stride[a]))
        .collect();
    let vox: usize = shape.iter().product();
    let mut acc_f = vec![0.0f32; 3 * vox];
    let mut acc_b = vec![0.0f32; 3 * vox];
    let mut count = vec![0u32; vox];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let o = [z0, y0, x0];
                let (rf, rb) = predict_window(net, params, &crop(m, o, patch), &crop(f, o, patch))?;
                let pv: usize = patch.iter().product();
                for z in 0..patch[0].min(shape[0] - z0) {
                    for y in 0..patch[1].min(shape[1] - y0) {
                        for x in 0..patch[2].min(shape[2] - x0) {
                            let dst = ((z0 + z) * shape[1] + y0 + y) * shape[2] + x0 + x;
                            let src = (z * patch[1] + y) * patch[2] + x;
                            count[dst] += 1;
                            for c in 0..3 {
                                acc_f[c * vox + dst] += rf.data()[c * pv + src];
                                acc_b[c * vox + dst] += rb.data()[c * pv + src];
                            }
                        }
                    }
                }
            }
        }
    }
    for c in 0..3 {
        for i in 0..vox {
            acc_f[c * vox + i] /= count[i] as f32;
            acc_b[c * vox + i] /= count[i] as f32;
        }
    }
    let dims = vec![3, shape[0], shape[1], shape[2]];
    Ok((Tensor::new(dims.clone(), acc_f)?, Tensor::new(dims, acc_b)?))
}

/// Predicts both deformations and warps each image onto the other.
pub fn register(
    net: &NetConfig,
    params: &Parameters<f32>,
    moving: &Volume,
    fixed: &Volume,
    patching: Patching,
) -> Result<Registration> {
    if moving.data.shape() != fixed.data.shape() {
        return Err(Error::Shape(format!(
            "moving {:?} vs fixed {:?}",
            moving.data.shape(),
            fixed.data.shape()
        )));
    }
    let shape = moving.spatial();
    let div = net.divisor();
    let patching = match patching {
        Patching::Auto if net.check_extents(shape).is_ok() => Patching::Whole,
        Patching::Auto => {
            let patch = shape.map(|n| (n / div).max(1) * div);
            Patching::Sliding {
                patch,
                stride: patch.map(|p| (p / 2).max(div)),
            }
        }
        p => p,
    };
    let (raw_forward, raw_backward) = match patching {
        Patching::Whole => {
            net.check_extents(shape)?;
            predict_window(net, params, &moving.data, &fixed.data)?
        }
        Patching::Sliding { patch, stride } => {
            sliding_raw(net, params, &moving.data, &fixed.data, patch, stride)?
        }
        Patching::Auto => unreachable!("resolved above"),
    };
    let forward = GradientField::from_raw(&raw_forward)?.integrate()?;
    let backward = GradientField::from_raw(&raw_backward)?.integrate()?;
    Ok(Registration {
        moving_warped: forward.warp(moving, WarpMode::Linear)?,
        fixed_warped: backward.warp(fixed, WarpMode::Linear)?,
        forward,
        backward,
        raw_forward,
        raw_backward,
    })
}

/// Resolved configuration as one JSON object.
pub fn config_json(cfg: &TrainConfig) -> String {
    json!({"kind": "config", "train": cfg}).to_string()
}
