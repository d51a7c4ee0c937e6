//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use symreg::augment::Pair;
use symreg::deformation::{identity_grid, DeformationField, GradientField};
use symreg::gradcheck::{run_suite, OPS};
use symreg::losses::{partial_dice, total_loss, LossWeights, PairTargets, Similarity};
use symreg::manifest::Manifest;
use symreg::metrics::{dice30, hd95, percentile_sorted, std_log_jacobian, voxel_distance};
use symreg::network::{init_parameters, NetConfig, Network, Parameters};
use symreg::optim::{Adam, AdamConfig};
use symreg::synth::{gen_pair, SynthSpec};
use symreg::tensor::{Tape, Tensor};
use symreg::trainer::{
    evaluate_cases, load_cases, register, sliding_raw, train, Case, Patching, TrainConfig,
    TrainSinks, Trainer,
};
use symreg::volume::{LabelMap, Modality, Volume};

const GRADCHECK_SEEDS: u64 = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const FOLDING_FIELDS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-6;
const IDENTITY_STEPS: usize = 10;
const IDENTITY_LOSS_MAX: f64 = 1e-6;
const METRIC_PAIRS: usize = 50;
const METRIC_MAX_EXTENT: usize = 12;
const STD_J_TOL: f64 = 1e-6;
const E2E_SEEDS: [u64; 3] = [1, 2, 3];
const E2E_DICE_MIN: f64 = 0.80;
const E2E_GAIN_MIN: f64 = 0.15;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const PRETRAIN_THRESHOLD: f64 = 0.80;
const PRETRAIN_WINS_MIN: usize = 2;
const PARTIAL_GAIN_MIN: f64 = 0.10;
const PARTIAL_STEPS: usize = 150;
const ADAM_STEPS: usize = 200;
const ADAM_LR: f64 = 0.1;
const ADAM_X_MAX: f64 = 1e-3;
const ADAM_STEP1_TOL: f64 = 1e-12;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn desk_net() -> NetConfig {
    NetConfig::desk(&[8, 16, 16])
}

/// Initial parameters with random (non-zero) output heads.
fn random_params(net: &NetConfig, seed: u64, head_scale: f32) -> Parameters<f32> {
    let mut p = init_parameters(net, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let heads: Vec<String> = p
        .names()
        .filter(|n| n.starts_with("head."))
        .cloned()
        .collect();
    for name in heads {
        for v in p.get_mut(&name).unwrap().data_mut() {
            *v = rng.random_range(-head_scale..head_scale);
        }
    }
    p
}

fn random_volume(shape: [usize; 3], rng: &mut impl Rng) -> Volume {
    let t = Tensor::from_fn(&[1, shape[0], shape[1], shape[2]], |_| rng.random::<f32>());
    Volume::new(t, [1.0; 3], Modality::Synth).unwrap()
}

fn gradcheck() -> Verdict {
    let t = Instant::now();
    let results = run_suite(0, GRADCHECK_SEEDS, None).unwrap();
    let elapsed = t.elapsed();
    let mut worst: BTreeMap<(String, &str), f64> = BTreeMap::new();
    for r in &results {
        let e = worst.entry((r.op.clone(), r.precision)).or_default();
        *e = e.max(r.worst / r.rtol);
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}/seed{}", r.op, r.precision, r.seed))
        .collect();
    let complete = results.len() == OPS.len() * 2 * GRADCHECK_SEEDS as usize;
    let (op, ratio) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|((o, p), r)| (format!("{o}/{p}"), *r))
        .unwrap();
    verdict(
        failed.is_empty() && complete && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} ops x f32,f64 x {GRADCHECK_SEEDS} seeds in {:.1}s (budget {}s); worst error/rtol {ratio:.3} ({op}); failures {:?}",
            OPS.len(),
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs(),
            failed
        ),
    )
}

fn folding() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 1.0f64;
    for i in 0..FOLDING_FIELDS {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..14));
        let scale = [0.1f32, 1.0, 5.0, 40.0][i % 4];
        let raw = Tensor::from_fn(&[3, shape[0], shape[1], shape[2]], |_| {
            rng.random_range(-scale..scale)
        });
        let phi = GradientField::from_raw(&raw).unwrap().integrate().unwrap();
        worst = worst.min(phi.axis_monotone_fraction(false));
    }
    let net = desk_net();
    let mut sliding_worst = 1.0f64;
    for s in 0..3 {
        let params = random_params(&net, 100 + s, 3.0);
        let m = random_volume([24, 24, 32], &mut rng);
        let f = random_volume([24, 24, 32], &mut rng);
        let (rf, rb) =
            sliding_raw(&net, &params, &m.data, &f.data, [16, 16, 16], [8, 8, 8]).unwrap();
        for raw in [rf, rb] {
            let phi = GradientField::from_raw(&raw).unwrap().integrate().unwrap();
            sliding_worst = sliding_worst.min(phi.axis_monotone_fraction(false));
        }
    }
    verdict(
        worst == 1.0 && sliding_worst == 1.0,
        format!(
            "non-decreasing fraction: {FOLDING_FIELDS} random fields {worst}, 6 sliding-window averaged maps {sliding_worst}"
        ),
    )
}

fn symmetry() -> Verdict {
    let net = desk_net();
    let params = random_params(&net, 11, 0.5);
    let spec = SynthSpec {
        shape: [16, 16, 16],
        seed: 4,
        ..SynthSpec::default()
    };
    let case = gen_pair(&spec).unwrap();
    let pair = Pair::new(
        case.moving,
        case.fixed,
        Some(case.moving_seg),
        Some(case.fixed_seg),
    )
    .unwrap();
    let w = LossWeights {
        gamma: 0.1,
        ..LossWeights::default()
    };
    let network = Network::new(&net).unwrap();
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let m = tape.constant(pair.moving.data.clone());
    let f = tape.constant(pair.fixed.data.clone());
    let a = network.symmetric_forward(&p, m, f).unwrap();
    let b = network.symmetric_forward(&p, f, m).unwrap();
    let mut diff = 0.0f64;
    for (x, y) in a
        .forward
        .iter()
        .zip(&b.backward)
        .chain(a.backward.iter().zip(&b.forward))
    {
        diff = diff.max(x.value().max_abs_diff(&y.value()) as f64);
    }
    let targets = PairTargets::<f32>::from_pair(&pair, net.ds_levels).unwrap();
    let mut loss_diff = 0.0f64;
    for kind in [Similarity::Mse, Similarity::Ncc] {
        let (la, _) = total_loss(&tape, &targets, &a.forward, &a.backward, &w, kind).unwrap();
        let (lb, _) =
            total_loss(&tape, &targets.swapped(), &b.forward, &b.backward, &w, kind).unwrap();
        loss_diff = loss_diff.max((la.item() as f64 - lb.item() as f64).abs());
    }
    verdict(
        diff <= SYMMETRY_TOL && loss_diff <= SYMMETRY_TOL,
        format!("max |output difference| {diff:.3e}, max |total loss difference| {loss_diff:.3e} (tol {SYMMETRY_TOL:e})"),
    )
}

fn identity() -> Verdict {
    let net = desk_net();
    let params = init_parameters(&net, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_volume([32, 32, 32], &mut rng);
    let f = random_volume([32, 32, 32], &mut rng);
    let reg = register(&net, &params, &m, &f, Patching::Whole).unwrap();
    let id = identity_grid::<f32>([32, 32, 32]);
    let phi_err = reg
        .forward
        .phi()
        .max_abs_diff(&id)
        .max(reg.backward.phi().max_abs_diff(&id));
    let self_pair_loss = |kind: Similarity, seed: u64| {
        let cfg = TrainConfig {
            net: net.clone(),
            similarity: kind,
            lr: 2e-3,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let vol = gen_pair(&SynthSpec {
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
        .moving;
        let pair = Pair::new(vol.clone(), vol, None, None).unwrap();
        (0..IDENTITY_STEPS)
            .map(|_| {
                trainer
                    .train_step(std::slice::from_ref(&pair))
                    .unwrap()
                    .total
            })
            .fold(0.0f64, f64::max)
    };
    let default_kind = TrainConfig::default().similarity;
    let worst = (0..3)
        .map(|s| self_pair_loss(default_kind, s))
        .fold(0.0f64, f64::max);
    let ncc = (0..3)
        .map(|s| self_pair_loss(Similarity::Ncc, s))
        .fold(0.0f64, f64::max);
    verdict(
        phi_err == 0.0 && worst < IDENTITY_LOSS_MAX,
        format!(
            "zero heads give max |phi - identity| = {phi_err}; image self-pairs, {IDENTITY_STEPS} steps x 3 volumes with the default {default_kind} loss: max {worst:.3e} (limit {IDENTITY_LOSS_MAX:e}); for reference NCC reaches {ncc:.1e}"
        ),
    )
}

fn random_mask(shape: [usize; 3], rng: &mut impl Rng) -> LabelMap {
    let n = shape.iter().product();
    let density = rng.random_range(0.05..0.6);
    let labels = (0..n).map(|_| rng.random_bool(density) as u8).collect();
    LabelMap::new(labels, shape, 2).unwrap()
}

fn brute_surface(l: &LabelMap) -> Vec<[usize; 3]> {
    let s = l.shape();
    let mut out = Vec::new();
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                if l.at(z, y, x) != 1 {
                    continue;
                }
                let p = [z as i64, y as i64, x as i64];
                let boundary = (0..3).any(|a| {
                    [-1i64, 1].iter().any(|d| {
                        let mut q = p;
                        q[a] += d;
                        q[a] < 0
                            || q[a] >= s[a] as i64
                            || l.at(q[0] as usize, q[1] as usize, q[2] as usize) != 1
                    })
                });
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_hd95(a: &LabelMap, b: &LabelMap, spacing: [f64; 3]) -> Option<f64> {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| voxel_distance(p, q, spacing))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut d = directed(&sa, &sb);
    d.extend(directed(&sb, &sa));
    d.sort_by(f64::total_cmp);
    Some(percentile_sorted(&d, 0.95))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut hd_mismatch = 0;
    for i in 0..METRIC_PAIRS {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=METRIC_MAX_EXTENT));
        let spacing = if i % 2 == 0 {
            [1.0; 3]
        } else {
            std::array::from_fn(|_| rng.random_range(0.5..2.5))
        };
        let a = random_mask(shape, &mut rng);
        let b = random_mask(shape, &mut rng);
        if hd95(&a, &b, 1, spacing).unwrap() != brute_hd95(&a, &b, spacing) {
            hd_mismatch += 1;
        }
    }
    let mut d30_mismatch = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = ((0.3 * n as f64) - 1e-9).ceil() as usize;
        let oracle = sorted[..k].iter().sum::<f64>() / k as f64;
        if (dice30(&scores).unwrap() - oracle).abs() > 1e-12 {
            d30_mismatch += 1;
        }
    }
    let shape = [10, 11, 12];
    let mut std_worst = std_log_jacobian(&DeformationField::identity(shape)).unwrap();
    for _ in 0..20 {
        let a: [[f32; 3]; 3] = std::array::from_fn(|r| {
            std::array::from_fn(|c| {
                if r == c {
                    rng.random_range(0.5..1.5)
                } else {
                    rng.random_range(-0.3..0.3)
                }
            })
        });
        let t: [f32; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let phi = Tensor::from_fn(&[3, shape[0], shape[1], shape[2]], |i| {
            let x = [i[1] as f32, i[2] as f32, i[3] as f32];
            (0..3).map(|c| a[i[0]][c] * x[c]).sum::<f32>() + t[i[0]]
        });
        std_worst = std_worst.max(std_log_jacobian(&DeformationField::new(phi).unwrap()).unwrap());
    }
    verdict(
        hd_mismatch == 0 && d30_mismatch == 0 && std_worst <= STD_J_TOL,
        format!(
            "hd95 mismatches vs brute force {hd_mismatch}/{METRIC_PAIRS}; dice30 mismatches {d30_mismatch}/200; std log-Jacobian on identity and 20 affine fields max {std_worst:.2e} (tol {STD_J_TOL:e})"
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_symreg"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`symreg {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

/// First evaluated step whose Dice reaches `threshold`, from a training log.
fn steps_to_dice(log: &Path, threshold: f64) -> Option<u64> {
    let text = fs::read_to_string(log).ok()?;
    json_lines(&text)
        .into_iter()
        .filter(|v| v["kind"] == "eval")
        .find(|v| v["dice"].as_f64().unwrap_or(0.0) >= threshold)
        .and_then(|v| v["step"].as_u64())
}

const DESK_CONFIG: &str = r#"
[train]
lr = 0.002
batch_size = 2
steps = 300
eval_every = 25
similarity = "mse"

[train.loss]
alpha = 1.0
beta = 1.0
gamma = 0.1
ds_weights = [1.0, 0.5, 0.25]

[train.net]
channels = [8, 16, 16]
ds_levels = 3
"#;

struct SeedRun {
    seed: u64,
    data: PathBuf,
    run: PathBuf,
    dice: f64,
    baseline: f64,
    scratch_steps: Option<u64>,
}

fn e2e_seed(root: &Path, seed: u64) -> Result<SeedRun, String> {
    let dir = root.join(format!("seed{seed}"));
    let data = dir.join("data");
    let run = dir.join("run");
    let pred = dir.join("pred");
    let cfg = dir.join("desk.toml");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    fs::write(&cfg, DESK_CONFIG).map_err(|e| e.to_string())?;
    let s = seed.to_string();
    let p = |p: &Path| p.to_string_lossy().into_owned();
    let manifest = p(&data.join("manifest.tsv"));
    run_cli(&[
        "gen",
        "--out",
        &p(&data),
        "--n",
        "16",
        "--seed",
        &s,
        "--shape",
        "32,32,32",
        "--amplitude",
        "0.3",
        "--labels",
        "2",
    ])?;
    run_cli(&[
        "train",
        "--config",
        &p(&cfg),
        "--manifest",
        &manifest,
        "--eval-manifest",
        &manifest,
        "--out",
        &p(&run),
        "--seed",
        &s,
    ])?;
    run_cli(&[
        "register",
        "--ckpt",
        &p(&run.join("final.ckpt")),
        "--manifest",
        &manifest,
        "--out",
        &p(&pred),
    ])?;
    let out = run_cli(&["evaluate", "--pred-dir", &p(&pred), "--manifest", &manifest])?;
    let report = json_lines(&out)
        .into_iter()
        .find(|v| v["kind"] == "evaluate")
        .ok_or("evaluate printed no report")?;
    Ok(SeedRun {
        seed,
        dice: report["registered"]["dice"].as_f64().ok_or("no dice")?,
        baseline: report["baseline"]["dice"].as_f64().ok_or("no baseline")?,
        scratch_steps: steps_to_dice(&run.join("train_log.jsonl"), PRETRAIN_THRESHOLD),
        data,
        run,
    })
}

fn end_to_end(root: &Path) -> (Verdict, Vec<SeedRun>) {
    let t = Instant::now();
    let mut runs = Vec::new();
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in E2E_SEEDS {
        match e2e_seed(root, seed) {
            Ok(r) => {
                ok &= r.dice >= E2E_DICE_MIN && r.dice - r.baseline >= E2E_GAIN_MIN;
                parts.push(format!(
                    "seed {seed}: dice {:.3} vs baseline {:.3}",
                    r.dice, r.baseline
                ));
                runs.push(r);
            }
            Err(e) => {
                ok = false;
                parts.push(format!("seed {seed}: {e}"));
            }
        }
    }
    let elapsed = t.elapsed();
    ok &= elapsed < E2E_BUDGET;
    (
        verdict(
            ok,
            format!(
                "{}; need >= {E2E_DICE_MIN} and gain >= {E2E_GAIN_MIN}; {:.0}s total (budget {}s)",
                parts.join("; "),
                elapsed.as_secs_f64(),
                E2E_BUDGET.as_secs()
            ),
        ),
        runs,
    )
}

/// Fine-tunes each seed's data from the checkpoint trained on the next
/// seed's (disjoint) data and compares steps to the Dice threshold.
fn pretraining(root: &Path, runs: &[SeedRun]) -> Verdict {
    if runs.len() != E2E_SEEDS.len() {
        return verdict(false, "end-to-end runs unavailable");
    }
    let mut wins = 0;
    let mut parts = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let donor = &runs[(i + 1) % runs.len()];
        let out = root.join(format!("seed{}/finetune", r.seed));
        let p = |p: &Path| p.to_string_lossy().into_owned();
        let cfg = root.join(format!("seed{}/desk.toml", r.seed));
        let manifest = p(&r.data.join("manifest.tsv"));
        let res = run_cli(&[
            "train",
            "--config",
            &p(&cfg),
            "--manifest",
            &manifest,
            "--eval-manifest",
            &manifest,
            "--out",
            &p(&out),
            "--seed",
            &r.seed.to_string(),
            "--pretrain",
            &p(&donor.run.join("final.ckpt")),
            "--stop-at-dice",
            &PRETRAIN_THRESHOLD.to_string(),
        ]);
        let fine = res
            .ok()
            .and_then(|_| steps_to_dice(&out.join("train_log.jsonl"), PRETRAIN_THRESHOLD));
        let win = match (fine, r.scratch_steps) {
            (Some(f), Some(s)) => 2 * f <= s,
            (Some(_), None) => true,
            _ => false,
        };
        wins += win as usize;
        parts.push(format!(
            "seed {} (pretrained on seed {}): {} vs {} from scratch",
            r.seed,
            donor.seed,
            fine.map_or("never".into(), |s| format!("{s} steps")),
            r.scratch_steps
                .map_or("never".into(), |s| format!("{s} steps"))
        ));
    }
    verdict(
        wins >= PRETRAIN_WINS_MIN,
        format!(
            "{}; {wins}/3 within half (need {PRETRAIN_WINS_MIN})",
            parts.join("; ")
        ),
    )
}

fn masked_gradient() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = [3usize, 5, 6, 7];
    let pred = Tensor::<f64>::from_fn(&shape, |_| rng.random_range(0.05..0.95));
    let target = Tensor::<f64>::from_fn(&shape, |_| rng.random_bool(0.4) as u8 as f64);
    let available = [true, true, false];
    let loss_at = |p: &Tensor<f64>| {
        let tape = Tape::new();
        let v = partial_dice(
            tape.constant(p.clone()),
            tape.constant(target.clone()),
            &available,
        )
        .unwrap();
        v.loss.item()
    };
    let tape = Tape::new();
    let pv = tape.param(pred.clone());
    let loss = partial_dice(pv, tape.constant(target.clone()), &available)
        .unwrap()
        .loss;
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(pv).unwrap();
    let vox = shape[1] * shape[2] * shape[3];
    let masked_nonzero = g.data()[2 * vox..].iter().filter(|v| **v != 0.0).count();
    let h = 1e-5;
    let (mut fd_masked, mut fd_live) = (0.0f64, 0.0f64);
    for i in (0..vox).step_by(17) {
        for (c, acc) in [(2, &mut fd_masked), (1, &mut fd_live)] {
            let mut up = pred.clone();
            up.data_mut()[c * vox + i] += h;
            let mut dn = pred.clone();
            dn.data_mut()[c * vox + i] -= h;
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            let err = if c == 2 {
                fd.abs()
            } else {
                (fd - g.data()[c * vox + i]).abs() / (1.0 + fd.abs())
            };
            *acc = acc.max(err);
        }
    }
    (
        masked_nonzero == 0 && fd_masked == 0.0 && fd_live < 1e-6,
        format!(
            "masked-class gradient non-zeros {masked_nonzero}, max |finite difference| {fd_masked:e}, available-class agreement {fd_live:.1e}"
        ),
    )
}

fn partial_labels(runs: &[SeedRun]) -> Verdict {
    let (grad_ok, grad_detail) = masked_gradient();
    let Some(run) = runs.first() else {
        return verdict(false, format!("{grad_detail}; no synthetic data"));
    };
    let manifest = Manifest::read(run.data.join("manifest.tsv")).unwrap();
    let cases: Vec<Case> = load_cases(&manifest, &[2]).unwrap();
    let cfg = TrainConfig {
        net: desk_net(),
        loss: LossWeights {
            gamma: 0.1,
            ..LossWeights::default()
        },
        lr: 2e-3,
        batch_size: 2,
        steps: Some(PARTIAL_STEPS),
        unavailable_labels: vec![2],
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train(&cfg, &cases, TrainSinks::default()).unwrap();
    let report = evaluate_cases(&cfg.net, &outcome.params, &cases).unwrap();
    let scored: Vec<u8> = report.cases[0].labels.iter().map(|l| l.label).collect();
    let mean = |f: fn(&symreg::metrics::LabelScore) -> f64| {
        let v: Vec<f64> = report
            .cases
            .iter()
            .flat_map(|c| c.labels.iter().map(f))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (after, before) = (mean(|l| l.dice), mean(|l| l.baseline_dice));
    verdict(
        grad_ok && scored == [1] && after - before >= PARTIAL_GAIN_MIN,
        format!(
            "{grad_detail}; label 2 masked, {PARTIAL_STEPS} steps: label-1 Dice {before:.3} -> {after:.3} (need gain >= {PARTIAL_GAIN_MIN})"
        ),
    )
}

fn adam() -> Verdict {
    let run = |steps: usize| {
        let mut params = Parameters::<f64>::default();
        params.insert("x", Tensor::scalar(1.0));
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        for _ in 0..steps {
            let x = params.get("x").unwrap().data()[0];
            let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(2.0 * x))]);
            opt.step(&mut params, &grads, ADAM_LR).unwrap();
        }
        params.get("x").unwrap().data()[0]
    };
    let x_final = run(ADAM_STEPS);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let g = 2.0;
    let m_hat = (1.0 - b1) * g / (1.0 - b1);
    let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
    let expected = 1.0 - ADAM_LR * m_hat / (v_hat.sqrt() + eps);
    let step1_err = (run(1) - expected).abs();
    verdict(
        x_final.abs() < ADAM_X_MAX && step1_err <= ADAM_STEP1_TOL,
        format!(
            "x^2 from 1, lr {ADAM_LR}, {ADAM_STEPS} steps: |x| = {:.2e} (limit {ADAM_X_MAX:e}); step-1 error {step1_err:.1e} (tol {ADAM_STEP1_TOL:e})",
            x_final.abs()
        ),
    )
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temporary directory");
    let mut all = true;
    let mut report = |name: &str, v: Verdict| {
        println!(
            "{} {name}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        all &= v.passed;
    };
    report("gradient check", gradcheck());
    report("folding", folding());
    report("symmetry", symmetry());
    report("identity fixed point", identity());
    report("metric oracles", metric_oracles());
    report("adam", adam());
    let (v, runs) = end_to_end(root.path());
    report("synthetic end-to-end", v);
    report("pretraining", pretraining(root.path(), &runs));
    report("partial labels", partial_labels(&runs));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
