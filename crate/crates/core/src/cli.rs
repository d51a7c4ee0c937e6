//! Command-line front end: `gen`, `train`, `register`, `evaluate` and
//! `gradcheck`.
//!
//! Machine-readable JSON lines go to stdout, human summaries to stderr.
//! Exit codes: 0 success, 1 verification or numerical failure, 2 usage or
//! input error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{EvalOptions, RunConfig};
use crate::deformation::DeformationField;
use crate::error::Error;
use crate::gradcheck::{run_suite, OPS};
use crate::io as gvol;
use crate::losses::Similarity;
use crate::manifest::{Entry, Manifest};
use crate::metrics::{evaluate_case, CaseReport, EvalReport};
use crate::synth::gen_dataset;
use crate::tensor::TensorError;
use crate::trainer::{load_cases, register, train, Patching, Registration, TrainSinks};
use crate::volume::Volume;

#[derive(Debug, Parser)]
#[command(
    name = "symreg",
    version,
    about = "Symmetric deformable 3D registration"
)]
pub struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Worker threads for per-case work; 0 uses every CPU.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth deformations.
    Gen(GenArgs),
    /// Train a registration network.
    Train(TrainArgs),
    /// Register volumes with a trained checkpoint.
    Register(RegisterArgs),
    /// Score predicted deformations against segmentations.
    Evaluate(EvaluateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Run configuration; its `[synth]` section is used.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_triple)]
    pub shape: Option<[usize; 3]>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Checkpoint whose matching weights initialize the network.
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    /// Held-out cases for periodic evaluation.
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub stop_at_dice: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long)]
    pub similarity: Option<Similarity>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Classes treated as unannotated.
    #[arg(long, value_delimiter = ',')]
    pub unavailable: Option<Vec<usize>>,
    /// Train on the evaluation cases as well.
    #[arg(long)]
    pub merge_splits: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Run configuration; its `[eval]` section sets patching and threads.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, requires = "fixed", conflicts_with = "manifest")]
    pub moving: Option<PathBuf>,
    #[arg(long, requires = "moving")]
    pub fixed: Option<PathBuf>,
    /// Moving segmentation to warp alongside the image.
    #[arg(long, requires = "moving")]
    pub moving_seg: Option<PathBuf>,
    /// Register every case of a manifest, writing `<id>_phi.gvol`.
    #[arg(long, required_unless_present = "moving")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_triple)]
    pub patch: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_triple)]
    pub stride: Option<[usize; 3]>,
    /// Write mid-slice images of the inputs, result and deformation grid.
    #[arg(long)]
    pub slices: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run configuration; its `[eval]` section sets threads.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `<id>_phi.gvol` fields.
    #[arg(long, required_unless_present = "ground_truth")]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score the manifest's ground-truth fields instead of predictions.
    #[arg(long)]
    pub ground_truth: bool,
    /// Report path; defaults to `report.tsv` in the prediction directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// Failures mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Input(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteGradient(_) | Error::Tensor(TensorError::NonFinite { .. }) => {
                Failure::Verification(e.to_string())
            }
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn out_line(v: serde_json::Value) {
    println!("{v}");
}

/// Parses `D,H,W`.
fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected 3 comma-separated extents, got {}", v.len()))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))
}

fn cmd_gen(a: &GenArgs) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(a.spec.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.shape {
        s.shape = v;
    }
    if let Some(v) = a.amplitude {
        s.amplitude = v;
    }
    if let Some(v) = a.labels {
        s.labels = v;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    s.validate()?;
    out_line(json!({"kind": "config", "command": "gen", "n": a.n, "synth": s}));
    let m = gen_dataset(s, a.n, &a.out)?;
    out_line(json!({"kind": "gen", "cases": m.len(), "dir": a.out}));
    eprintln!("wrote {} cases to {}", m.len(), a.out.display());
    Ok(())
}

/// Writes every line to both a file and stdout.
struct Tee {
    file: BufWriter<File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        io::stdout().flush()
    }
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let t = &mut cfg.train;
    macro_rules! set {
        ($field:expr, $arg:expr) => {
            if let Some(v) = $arg.clone() {
                $field = v;
            }
        };
    }
    set!(t.lr, a.lr);
    set!(t.batch_size, a.batch_size);
    set!(t.epochs, a.epochs);
    set!(t.seed, a.seed);
    set!(t.similarity, a.similarity);
    set!(t.loss.alpha, a.alpha);
    set!(t.loss.beta, a.beta);
    set!(t.loss.gamma, a.gamma);
    set!(t.eval_every, a.eval_every);
    set!(t.unavailable_labels, a.unavailable);
    if let Some(ch) = &a.channels {
        t.net.channels = ch.clone();
        t.net.ds_levels = t.net.ds_levels.min(ch.len() + 1);
        t.loss.ds_weights.truncate(t.net.ds_levels);
    }
    if a.steps.is_some() {
        t.steps = a.steps;
    }
    if a.stop_at_dice.is_some() {
        t.stop_at_dice = a.stop_at_dice;
    }
    if a.pretrain.is_some() {
        t.pretrain = a.pretrain.clone();
    }
    t.merge_splits |= a.merge_splits;
    t.validate()?;
    if let Some(p) = &t.pretrain {
        if !p.is_file() {
            return Err(Failure::Input(format!(
                "pretrained checkpoint {} not found",
                p.display()
            )));
        }
    }
    let manifest = Manifest::read(&a.manifest)?;
    let cases = load_cases(&manifest, &t.unavailable_labels)?;
    if cases.is_empty() {
        return Err(Failure::Input(format!(
            "{} lists no cases",
            a.manifest.display()
        )));
    }
    let eval_cases = match &a.eval_manifest {
        Some(p) => load_cases(&Manifest::read(p)?, &[])?,
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let file = File::create(&log_path)
        .map_err(|e| Failure::Input(format!("{}: {e}", log_path.display())))?;
    let mut tee = Tee {
        file: BufWriter::new(file),
    };
    writeln!(
        tee,
        "{}",
        json!({"kind": "config", "command": "train", "manifest": a.manifest, "train": t})
    )?;
    let outcome = train(
        t,
        &cases,
        TrainSinks {
            log: Some(&mut tee),
            out_dir: Some(&a.out),
            eval_cases: &eval_cases,
        },
    )?;
    tee.flush()?;
    let first = outcome.losses.first().map_or(f64::NAN, |l| l.total);
    let last = outcome.losses.last().map_or(f64::NAN, |l| l.total);
    eprintln!(
        "trained {} steps: loss {first:.4} -> {last:.4}; checkpoint {}",
        outcome.losses.len(),
        outcome
            .checkpoint
            .as_deref()
            .unwrap_or(Path::new("-"))
            .display()
    );
    if let Some(r) = &outcome.restore {
        eprintln!(
            "restored {} tensors, {} unmatched, {} missing",
            r.restored.len(),
            r.unmatched.len(),
            r.missing.len()
        );
    }
    Ok(())
}

fn patching(a: &RegisterArgs, eval: &EvalOptions) -> Patching {
    match a.patch.or(eval.patch) {
        Some(patch) => Patching::Sliding {
            patch,
            stride: a.stride.or(eval.stride).unwrap_or(patch),
        },
        None => Patching::Auto,
    }
}

/// Min-max scaled 8-bit mid-depth slice of channel 0.
fn slice_pixels(v: &Volume) -> (usize, usize, Vec<u8>) {
    let [d, h, w] = v.spatial();
    let z = d / 2;
    let vals: Vec<f32> = (0..h * w)
        .map(|i| v.data.at(&[0, z, i / w, i % w]))
        .collect();
    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    (
        w,
        h,
        vals.iter()
            .map(|v| ((v - lo) / span * 255.0).round() as u8)
            .collect(),
    )
}

/// Grid lines every 4 voxels of the source space, drawn through the field.
fn grid_pixels(phi: &DeformationField) -> (usize, usize, Vec<u8>) {
    let [d, h, w] = phi.spatial();
    let z = d / 2;
    let near = |c: f32| {
        let r = c / 4.0;
        (r - r.round()).abs() * 4.0 < 0.35
    };
    let px = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (py, pxx) = (phi.phi().at(&[1, z, y, x]), phi.phi().at(&[2, z, y, x]));
            if near(py) || near(pxx) {
                255
            } else {
                0
            }
        })
        .collect();
    (w, h, px)
}

fn write_pgm(path: &Path, (w, h, px): (usize, usize, Vec<u8>)) -> CmdResult {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(px);
    fs::write(path, bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_registration(out: &Path, r: &Registration, spacing: [f64; 3]) -> CmdResult {
    gvol::save_field(r.forward.phi(), spacing, out.join("phi_mf.gvol"))?;
    gvol::save_field(r.backward.phi(), spacing, out.join("phi_fm.gvol"))?;
    gvol::save_volume(&r.moving_warped, out.join("moving_warped.gvol"))?;
    gvol::save_volume(&r.fixed_warped, out.join("fixed_warped.gvol"))?;
    Ok(())
}

fn cmd_register(a: &RegisterArgs, threads: Option<usize>) -> CmdResult {
    let eval = RunConfig::load_or_default(a.config.as_deref())?.eval;
    let threads = resolve_threads(threads.unwrap_or(eval.threads));
    let ckpt = Checkpoint::load(&a.ckpt)?;
    create_dir(&a.out)?;
    let mode = patching(a, &eval);
    out_line(
        json!({"kind": "config", "command": "register", "ckpt": a.ckpt, "net": ckpt.net, "step": ckpt.step}),
    );
    if let (Some(mp), Some(fp)) = (&a.moving, &a.fixed) {
        let moving = gvol::load_volume(mp)?;
        let fixed = gvol::load_volume(fp)?;
        let r = register(&ckpt.net, &ckpt.params, &moving, &fixed, mode)?;
        write_registration(&a.out, &r, fixed.spacing)?;
        if let Some(sp) = &a.moving_seg {
            let seg = gvol::load_labels(sp)?;
            let warped = r.forward.warp_labels(&seg)?;
            gvol::save_labels(
                &warped,
                moving.modality,
                a.out.join("moving_seg_warped.gvol"),
            )?;
        }
        if a.slices {
            write_pgm(&a.out.join("moving.pgm"), slice_pixels(&moving))?;
            write_pgm(&a.out.join("fixed.pgm"), slice_pixels(&fixed))?;
            write_pgm(&a.out.join("deformed.pgm"), slice_pixels(&r.moving_warped))?;
            write_pgm(&a.out.join("grid.pgm"), grid_pixels(&r.forward))?;
        }
        out_line(
            json!({"kind": "register", "out": a.out, "monotone": r.forward.axis_monotone_fraction(true)}),
        );
        eprintln!("registered {} -> {}", mp.display(), fp.display());
        return Ok(());
    }
    let path = a.manifest.as_ref().expect("clap requires a manifest");
    let manifest = Manifest::read(path)?;
    let entries = &manifest.entries;
    let results = parallel_map(entries, threads, |e| -> Result<(), Error> {
        let pair = manifest.load_pair(e)?;
        let r = register(&ckpt.net, &ckpt.params, &pair.moving, &pair.fixed, mode)?;
        gvol::save_field(
            r.forward.phi(),
            pair.fixed.spacing,
            a.out.join(format!("{}_phi.gvol", e.id)),
        )
    });
    for r in results {
        r?;
    }
    out_line(json!({"kind": "register", "cases": entries.len(), "out": a.out}));
    eprintln!(
        "registered {} cases into {}",
        entries.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_threads(n: usize) -> usize {
    match n {
        0 => thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

/// Order-preserving map over `items` on up to `threads` scoped workers.
fn parallel_map<I: Sync, O: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(&I) -> O + Sync,
) -> Vec<O> {
    let threads = threads.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn field_path(a: &EvaluateArgs, manifest: &Manifest, e: &Entry) -> Option<PathBuf> {
    if a.ground_truth {
        e.field.as_ref().map(|f| manifest.resolve(f))
    } else {
        a.pred_dir
            .as_ref()
            .map(|d| d.join(format!("{}_phi.gvol", e.id)))
    }
}

fn cmd_evaluate(a: &EvaluateArgs, threads: Option<usize>) -> CmdResult {
    let eval = RunConfig::load_or_default(a.config.as_deref())?.eval;
    let threads = resolve_threads(threads.unwrap_or(eval.threads));
    let manifest = Manifest::read(&a.manifest)?;
    out_line(
        json!({"kind": "config", "command": "evaluate", "manifest": a.manifest, "pred_dir": a.pred_dir, "ground_truth": a.ground_truth}),
    );
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| field_path(a, &manifest, e).is_none_or(|p| !p.is_file()))
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Failure::Input(format!(
            "missing predictions for: {}",
            missing.join(", ")
        )));
    }
    if manifest.is_empty() {
        return Err(Failure::Input(format!(
            "{} lists no cases",
            a.manifest.display()
        )));
    }
    let rows = parallel_map(
        &manifest.entries,
        threads,
        |e| -> Result<Option<CaseReport>, Error> {
            let (Some(ms), Some(fs)) = (&e.moving_seg, &e.fixed_seg) else {
                return Ok(None);
            };
            let ms = gvol::load_labels(manifest.resolve(ms))?;
            let fs = gvol::load_labels(manifest.resolve(fs))?;
            let phi = DeformationField::new(gvol::load_field(
                field_path(a, &manifest, e).expect("checked above"),
            )?)?;
            Ok(Some(evaluate_case(&e.id, &ms, &fs, &phi)?))
        },
    );
    let mut cases = Vec::new();
    for r in rows {
        cases.extend(r?);
    }
    let report = EvalReport::new(cases);
    let out = a
        .out
        .clone()
        .or_else(|| a.pred_dir.as_ref().map(|d| d.join("report.tsv")))
        .unwrap_or_else(|| PathBuf::from("report.tsv"));
    let mut buf = Vec::new();
    report.write_table(&mut buf)?;
    fs::write(&out, &buf).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
    let text = String::from_utf8_lossy(&buf);
    let summary = text.split("\n\n").nth(1).unwrap_or_default();
    eprint!("{summary}");
    out_line(
        json!({"kind": "evaluate", "report": out, "registered": report.registered, "baseline": report.baseline}),
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    if let Some(op) = &a.corrupt {
        if !OPS.contains(&op.as_str()) {
            return Err(Failure::Input(format!("unknown op `{op}`")));
        }
    }
    out_line(json!({"kind": "config", "command": "gradcheck", "seed": a.seed, "seeds": a.seeds}));
    let results = run_suite(a.seed, a.seeds, a.corrupt.as_deref())?;
    let mut failed: Vec<String> = Vec::new();
    for &op in OPS {
        for precision in ["f32", "f64"] {
            let rs: Vec<_> = results
                .iter()
                .filter(|r| r.op == op && r.precision == precision)
                .collect();
            let worst = rs.iter().map(|r| r.worst).fold(0.0, f64::max);
            let passed = rs.iter().all(|r| r.passed);
            out_line(
                json!({"kind": "gradcheck", "op": op, "precision": precision, "worst": worst, "rtol": rs[0].rtol, "seeds": rs.len(), "passed": passed}),
            );
            if !passed && !failed.iter().any(|f| f == op) {
                failed.push(op.to_string());
            }
        }
    }
    if failed.is_empty() {
        eprintln!("gradcheck passed: {} ops x {} seeds", OPS.len(), a.seeds);
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradcheck failed for: {}",
            failed.join(", ")
        )))
    }
}

/// Parses arguments and runs one command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(dir) = &cli.workdir {
        if let Err(e) = std::env::set_current_dir(dir) {
            eprintln!("error: workdir {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }
    let threads = cli.threads;
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a, threads),
        Command::Evaluate(a) => cmd_evaluate(a, threads),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn triples_parse() {
        assert_eq!(parse_triple("16,8, 4"), Ok([16, 8, 4]));
        assert!(parse_triple("16,8").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(
            parallel_map(&v, 3, |x| x * 2),
            (0..10).map(|x| x * 2).collect::<Vec<_>>()
        );
        assert!(parallel_map(&[] as &[usize], 4, |x| *x).is_empty());
    }

    #[test]
    fn input_errors_map_to_usage_failures() {
        assert!(matches!(
            Failure::from(Error::Config("x".into())),
            Failure::Input(_)
        ));
        assert!(matches!(
            Failure::from(Error::NonFiniteGradient("w".into())),
            Failure::Verification(_)
        ));
    }

    #[test]
    fn modality_of_written_slices() {
        let v = Volume::from_grid(
            crate::tensor::Tensor::from_fn(&[2, 2, 3], |i| i[2] as f32),
            Modality::Synth,
        )
        .unwrap();
        let (w, h, px) = slice_pixels(&v);
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 128, 255, 0, 128, 255]);
    }
}
