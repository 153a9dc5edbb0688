//! `matnet gen|train|infer|eval|check`.
//!
//! Exit status: 0 on success, 1 when inputs or a check suite fail
//! validation, 2 on runtime failures (I/O, non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use matnet::config::RunConfig;
use matnet::grid::Mask;
use matnet::metrics::{default_tolerance, EvalReport};
use matnet::model::MatNet;
use matnet::pnm::{plane_bytes, write_pgm};
use matnet::selfcheck::{self, Check};
use matnet::synthdata::{load_dataset, mask_path, read_dataset_manifest, read_mask, write_dataset, write_mask, Split};
use matnet::tensor::{inject_backward_fault, OpKind};
use matnet::trainer::{train, write_trace, Checkpoint, TrainOptions};
use matnet::Error;

#[derive(Parser)]
#[command(name = "matnet", version, about = "Motion-attentive video object segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split and write a checkpoint plus loss trace.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// CSV loss trace; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Write soft and binary masks for every frame of a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the threshold stored with the checkpoint (0.5).
        #[arg(long)]
        threshold: Option<f64>,
        /// train, eval or all.
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Score predicted masks against the dataset ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file; defaults to <pred>/report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Gradient checks and invariant suites.
    Check {
        #[command(flatten)]
        common: Common,
        /// Scale the backward rule of one op (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::NonFiniteLoss { .. } | Error::NonDeterministic { .. } | Error::TapeConsumed | Error::NonScalarLoss(_) => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Validation(format!("{}: {io}", path.display())),
            e => e.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string()).map_err(Failure::Validation)?;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Option<Split>, Failure> {
    match s {
        "all" => Ok(None),
        _ => Split::parse(s)
            .map(Some)
            .ok_or_else(|| Failure::Validation(format!("unknown split {s:?} (expected train, eval or all)"))),
    }
}

fn require_dataset(dir: &Path) -> CmdResult {
    if !dir.join("manifest.txt").is_file() {
        return Err(Failure::Validation(format!("no dataset manifest under {}", dir.display())));
    }
    Ok(())
}

fn cmd_gen(common: &Common, out: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    let clips = cfg.clips();
    let frames = write_dataset(out, &clips)?;
    let train = clips.iter().filter(|(e, _)| e.split == Split::Train).count();
    println!(
        "wrote {} clips ({train} train, {} eval), {frames} frames to {}",
        clips.len(),
        clips.len() - train,
        out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, out: &Path, trace: Option<&Path>) -> CmdResult {
    let cfg = load_config(common)?;
    require_dataset(data)?;
    let samples: Vec<_> = load_dataset(data, Some(Split::Train))?.into_iter().flat_map(|(_, s)| s).collect();
    if samples.is_empty() {
        return Err(Failure::Validation(format!("{} has no training frames", data.display())));
    }
    let mut model = MatNet::new(cfg.model.clone(), cfg.seed)?;
    let options = TrainOptions {
        checkpoint: Some(out.to_path_buf()),
        config_echo: cfg.render(),
    };
    let total = cfg.train.iterations;
    let every = (total / 10).max(1);
    let start = Instant::now();
    let records = train(&samples, &mut model, &cfg.train, &options, |r| {
        if r.iteration % every == 0 || r.iteration == 1 {
            eprintln!(
                "iter {:>5}/{total}  loss {:.5}  ce {:.5}  boundary {:.5}  {:.1}s",
                r.iteration,
                r.total,
                r.ce,
                r.boundary,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let trace_path = trace.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("csv"));
    write_trace(&trace_path, &records)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!("initial loss {:.6} final loss {:.6}", first.total, last.total);
    }
    println!("checkpoint {} trace {}", out.display(), trace_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(MatNet, RunConfig), Failure> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config)?;
    let mut model = MatNet::new(cfg.model.clone(), cfg.seed)?;
    ck.restore(&mut model.store)?;
    Ok((model, cfg))
}

fn cmd_infer(checkpoint: &Path, data: &Path, out: &Path, threshold: Option<f64>, split: &str) -> CmdResult {
    let split = parse_split(split)?;
    let (model, cfg) = load_model(checkpoint)?;
    let threshold = threshold.unwrap_or(cfg.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::Validation(format!("threshold {threshold} outside [0, 1]")));
    }
    require_dataset(data)?;
    let mut frames = 0;
    let clips = load_dataset(data, split)?;
    for (entry, samples) in &clips {
        let dir = out.join(&entry.name);
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        for (t, s) in samples.iter().enumerate() {
            let (h, w) = (s.height(), s.width());
            let soft = model.predict(&s.frame, &s.flow_image())?;
            write_pgm(&dir.join(format!("soft_{t:03}.pgm")), w, h, &plane_bytes(&soft))?;
            write_mask(&mask_path(&dir, t), &Mask::threshold(&soft, h, w, threshold)?)?;
            frames += 1;
        }
    }
    println!("wrote masks for {} clips, {frames} frames to {} (threshold {threshold})", clips.len(), out.display());
    Ok(())
}

fn cmd_eval(common: &Common, pred: &Path, data: &Path, out: Option<&Path>, split: &str) -> CmdResult {
    let cfg = load_config(common)?;
    let split = parse_split(split)?;
    require_dataset(data)?;
    let entries: Vec<_> = read_dataset_manifest(data)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .collect();
    let mut missing = Vec::new();
    let mut scored = Vec::new();
    for e in &entries {
        let (mut preds, mut gts) = (Vec::new(), Vec::new());
        for t in 0..e.frames {
            gts.push(read_mask(&mask_path(&data.join(&e.name), t))?);
            let p = mask_path(&pred.join(&e.name), t);
            if p.is_file() {
                preds.push(read_mask(&p)?);
            } else {
                missing.push(p.display().to_string());
            }
        }
        scored.push((e.name.clone(), preds, gts));
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing).into());
    }
    let tolerance = match (cfg.tolerance, scored.iter().find_map(|(_, _, g)| g.first())) {
        (Some(t), _) => t,
        (None, Some(g)) => default_tolerance(g.height(), g.width()),
        (None, None) => 1,
    };
    let report = EvalReport::evaluate(scored.iter().map(|(n, p, g)| (n.as_str(), &p[..], &g[..])), tolerance)?;
    let text = report.render();
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| pred.join("report.txt"));
    std::fs::write(&path, &text).map_err(Error::from)?;
    print!("{text}");
    Ok(())
}

fn report(check: &Check) -> bool {
    let ok = check.passed();
    println!(
        "{}  {:<48} {:.3e}  (tolerance {:.0e})",
        if ok { "PASS" } else { "FAIL" },
        check.name,
        check.value,
        check.tolerance
    );
    ok
}

fn cmd_check(common: &Common, corrupt: Option<&str>) -> CmdResult {
    let cfg = load_config(common)?;
    if let Some(name) = corrupt {
        let kind = OpKind::parse(name).ok_or_else(|| Failure::Validation(format!("unknown op {name:?}")))?;
        inject_backward_fault(Some(kind));
        eprintln!("backward rule of {name} corrupted");
    }
    let start = Instant::now();
    let mut ok = true;
    for c in selfcheck::run_all(cfg.seed)? {
        ok &= report(&c);
    }
    ok &= report(&selfcheck::ssa_identity(cfg.seed)?);
    let a = selfcheck::transition_asymmetry(cfg.seed)?;
    let holds = a.holds();
    println!(
        "{}  {:<48} dUm/dVa {:.3e}  dUa/dVm {:.3e}",
        if holds { "PASS" } else { "FAIL" },
        "transition asymmetry",
        a.motion_from_appearance,
        a.appearance_from_motion
    );
    ok &= holds;
    println!("{} in {:.1}s", if ok { "all checks passed" } else { "checks FAILED" }, start.elapsed().as_secs_f64());
    if ok {
        Ok(())
    } else {
        Err(Failure::Validation("one or more checks failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen { common, out } => cmd_gen(common, out),
        Command::Train { common, data, out, trace } => cmd_train(common, data, out, trace.as_deref()),
        Command::Infer {
            checkpoint,
            data,
            out,
            threshold,
            split,
        } => cmd_infer(checkpoint, data, out, *threshold, split),
        Command::Eval {
            common,
            pred,
            data,
            out,
            split,
        } => cmd_eval(common, pred, data, out.as_deref(), split),
        Command::Check { common, corrupt_backward } => cmd_check(common, corrupt_backward.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
