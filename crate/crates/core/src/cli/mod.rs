//! Command-line front end: data generation, training, evaluation, ablation
//! sweeps and report assembly, all driven by one JSON config.

mod ablate;
mod bench;
mod config;
mod run;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use ablate::{run_ablation, AblationMatrix, AblationRow, AblationTable, Axes, Level};
pub use bench::{read_manifest, registry_path, BenchData, GenSummary};
pub use config::{DataConfig, EvalConfig, RunConfig, CODE_VERSION};
pub use run::{evaluate_model, inference_options, test_object_vectors, time_model, train, train_data, Evaluation, VECTOR_REPORT_OBJECTS};

use crate::datagen::FewShotRegistry;
use crate::detector::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{adaptation_curve, export_vectors, write_detections, ClassFilter};
use crate::meta_train::{LogEntry, Strategy, TrainState};

#[derive(Debug, Parser)]
#[command(name = "metarcnn", version = CODE_VERSION, about = "Few-shot detection with class-attentive predictor heads")]
pub struct Cli {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; see each command for its default.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Classes {
    All,
    Base,
    Novel,
}

impl From<Classes> for ClassFilter {
    fn from(c: Classes) -> Self {
        match c {
            Classes::All => ClassFilter::All,
            Classes::Base => ClassFilter::Base,
            Classes::Novel => ClassFilter::Novel,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test sets, split and registries
    /// (written to `--out` or `data.dir`).
    Gen,
    /// Train one strategy (written to `<out>/<strategy>_k<K>_s<seed>`).
    Train {
        #[arg(long, default_value = "meta_rcnn")]
        strategy: String,
        /// Phase-2 shots; defaults to `train.k`.
        #[arg(long)]
        k: Option<usize>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (written to `--out` or the checkpoint's directory).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// K-shot registry for the bank; defaults to `data.dir/registry_k<K>.json`.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Shots per class; defaults to the checkpoint's K.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "all")]
        classes: Classes,
        /// Time inference with and without attention.
        #[arg(long)]
        timing: bool,
        /// Adaptation curve over the periodic checkpoints next to `--checkpoint`.
        #[arg(long)]
        curve: bool,
    },
    /// Run every cell of an ablation matrix (written to `<out>/ablation`).
    Ablate {
        /// Matrix file (JSON).
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Tabulate the evaluation reports found under `--out` (or `out`).
    Report,
    /// Print the JSON Schema of the config file (or of an ablation matrix).
    Schema {
        #[arg(long)]
        ablation: bool,
    },
}

/// Parses the config, applies global overrides, and validates it.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Schema { ablation } = cli.command {
        let schema = if ablation { AblationMatrix::schema() } else { RunConfig::schema() };
        println!("{}", serde_json::to_string_pretty(&schema)?);
        return Ok(());
    }
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, cli.out.as_deref().unwrap_or(&cfg.data.dir)),
        Command::Train { strategy, k, resume } => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.out.clone());
            cmd_train(&cfg, Strategy::parse(strategy)?, *k, resume.as_deref(), &out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            registry,
            k,
            classes,
            timing,
            curve,
        } => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let opts = EvalArgs {
                checkpoint,
                registry: registry.as_deref(),
                k: *k,
                classes: (*classes).into(),
                timing: *timing,
                curve: *curve,
            };
            cmd_eval(&cfg, &opts, &out)
        }
        Command::Ablate { matrix } => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.out.join("ablation"));
            cmd_ablate(&cfg, matrix, &out)
        }
        Command::Report => cmd_report(&cfg, cli.out.as_deref().unwrap_or(&cfg.out)),
        Command::Schema { .. } => unreachable!("handled above"),
    }
}

pub fn cmd_gen(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let bench = BenchData::generate(&cfg.data, cfg.seed)?;
    let s = bench.write(dir, &cfg.provenance())?;
    println!(
        "wrote {}: {} train images ({} objects), {} test images ({} objects), {} classes ({} base, {} novel), registries K={:?}",
        dir.display(),
        s.train_images,
        s.train_objects,
        s.test_images,
        s.test_objects,
        s.class_names.len(),
        s.base_classes.len(),
        s.novel_classes.len(),
        cfg.data.ks,
    );
    println!("train manifest sha256 {}", s.train_manifest_hash);
    Ok(())
}

pub fn run_dir(out: &Path, strategy: Strategy, k: usize, seed: u64) -> PathBuf {
    out.join(format!("{}_k{k}_s{seed}", strategy.name()))
}

/// Checkpoint with the run provenance added to its payload.
fn checkpoint_of(state: &TrainState, cfg: &RunConfig) -> Result<Checkpoint> {
    let mut ck = state.to_checkpoint()?;
    ck.payload["provenance"] = cfg.provenance();
    Ok(ck)
}

/// Trains and returns the run directory.
pub fn cmd_train(cfg: &RunConfig, strategy: Strategy, k: Option<usize>, resume: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let bench = BenchData::load(&cfg.data.dir)?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
            log::info!("resuming {} at iteration {}", s.strategy, s.iter);
            s
        }
        None => {
            let mut tc = cfg.train_config();
            tc.k = k.unwrap_or(tc.k);
            tc.check_data(&bench.train.manifest())?;
            TrainState::new(tc, strategy, bench.split.num_classes())?
        }
    };
    let dir = run_dir(out, state.strategy, state.config.k, state.config.seed);
    let ck_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let mut final_hash = String::new();
    let log = train(&mut state, &bench, None, &mut |s| {
        let path = ck_dir.join(format!("iter_{:06}.ckpt", s.iter));
        final_hash = checkpoint_of(s, cfg)?.save(&path)?;
        Ok(())
    })?;
    let final_path = dir.join("final.ckpt");
    let hash = checkpoint_of(&state, cfg)?.save(&final_path)?;
    debug_assert!(final_hash.is_empty() || final_hash == hash);
    append_log(&dir.join("train_log.jsonl"), &log, cfg, resume.is_none())?;
    let summary = serde_json::json!({
        "strategy": state.strategy,
        "k": state.config.k,
        "seed": state.config.seed,
        "iterations": state.iter,
        "converged": state.converged,
        "final_losses": log.last().map(|l| l.losses),
        "checkpoint": "final.ckpt",
        "checkpoint_sha256": hash,
    });
    bench::write_json(&dir.join("run.json"), &summary, &cfg.provenance())?;
    println!("{} K={} finished at iteration {}; checkpoint {} ({hash})", state.strategy, state.config.k, state.iter, final_path.display());
    Ok(dir)
}

/// JSONL log; a fresh file starts with a provenance header line.
fn append_log(path: &Path, log: &[LogEntry], cfg: &RunConfig, fresh: bool) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{}", serde_json::json!({ "provenance": cfg.provenance() })).map_err(|e| Error::io(path, e))?;
    }
    for e in log {
        writeln!(w, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub registry: Option<&'a Path>,
    pub k: Option<usize>,
    pub classes: ClassFilter,
    pub timing: bool,
    pub curve: bool,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(args.checkpoint)?;
    let ck_hash = ck.hash()?;
    let state = TrainState::from_checkpoint(&ck)?;
    let k = args.k.unwrap_or(state.config.k);
    let mut bench = BenchData::load(&cfg.data.dir)?;
    if state.model.spec.prn {
        let rpath = args.registry.map(Path::to_path_buf).unwrap_or_else(|| registry_path(&cfg.data.dir, k));
        let registry = FewShotRegistry::load(&rpath)?;
        if registry.k != k {
            return Err(Error::Config(format!("registry {} holds K={} but --k is {k}", rpath.display(), registry.k)));
        }
        registry.validate(&bench.train.manifest())?;
        bench.phase2 = [(k, registry)].into();
    }
    let classes_name = serde_json::to_value(args.classes)?;
    let tag = format!("k{k}_{}", classes_name.as_str().unwrap_or("all"));
    let settings = serde_json::json!({
        "strategy": state.strategy,
        "k": k,
        "classes": args.classes,
        "checkpoint_sha256": ck_hash,
        "iteration": state.iter,
        "inference": inference_options(state.strategy, &cfg.eval.inference),
    });
    let prov = cfg.provenance();
    let use_mask = state.config.meta_mask_channel;
    let mut ev = evaluate_model(&state.model, state.strategy, use_mask, &bench, k, args.classes, &cfg.eval.inference, settings)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    bench::write_json(&out.join(format!("report_{tag}.json")), &ev.report, &prov)?;
    write_detections(&ev.detections, &bench.split.class_names, &out.join(format!("detections_{tag}.jsonl")), Some(&prov))?;
    if let Some(bank) = &mut ev.bank {
        bank.checkpoint_hash = Some(ck_hash.clone());
        bench::write_json(&out.join(format!("bank_k{k}.json")), bank, &prov)?;
    }
    if let Some(vr) = &ev.vector_report {
        bench::write_json(&out.join(format!("vector_report_{tag}.json")), vr, &prov)?;
        export_vectors(&ev.vectors, &out.join(format!("vectors_{tag}.json")))?;
    }
    println!(
        "{} K={k}: mAP@0.5 base {:.4} novel {:.4} over {} images",
        state.strategy, ev.report.map_base, ev.report.map_novel, ev.report.num_images
    );
    if let Some(m) = ev.report.mask_ap.as_ref() {
        println!("mask mAP@0.5 {:.4}", m.map);
    }
    if args.timing {
        let Some(bank) = &ev.bank else {
            return Err(Error::Config("--timing compares attended and plain passes of a meta model".into()));
        };
        let opts = inference_options(state.strategy, &cfg.eval.inference);
        let t = time_model(&state.model, bank, &bench, &ev.report.classes, &opts, cfg.eval.timing_images, cfg.eval.timing_repeats)?;
        bench::write_json(&out.join(format!("timing_k{k}.json")), &t, &prov)?;
        println!(
            "inference {:.2} ms/image attended, {:.2} ms/image plain, ratio {:.3}",
            t.attended_ms, t.plain_ms, t.overhead_ratio
        );
    }
    if args.curve {
        let dir = args.checkpoint.parent().unwrap_or(Path::new(".")).join("checkpoints");
        let mut series = Vec::new();
        for (iter, path) in list_checkpoints(&dir)? {
            let s = TrainState::from_checkpoint(&Checkpoint::load(&path)?)?;
            let e = evaluate_model(&s.model, s.strategy, use_mask, &bench, k, args.classes, &cfg.eval.inference, serde_json::Value::Null)?;
            series.push((iter, e.report.box_ap));
        }
        let curve = adaptation_curve(&series, &ev.report.classes)?;
        bench::write_json(&out.join(format!("curve_{tag}.json")), &curve, &prov)?;
        println!("adaptation curve over {} checkpoints", curve.iterations.len());
    }
    Ok(())
}

/// `(iteration, path)` of every `iter_NNNNNN.ckpt` in `dir`, in order.
fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(i) = name.strip_prefix("iter_").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse().ok()) {
            out.push((i, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no periodic checkpoints in {} (set train.checkpoint_every)", dir.display())));
    }
    Ok(out)
}

pub fn cmd_ablate(cfg: &RunConfig, matrix: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(matrix).map_err(|e| Error::io(matrix, e))?;
    let m: AblationMatrix =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", matrix.display())))?;
    let bench = BenchData::load(&cfg.data.dir)?;
    let table = run_ablation(cfg, &m, &bench)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    bench::write_json(&out.join("table.json"), &table, &cfg.provenance())?;
    let text = table.to_text();
    std::fs::write(out.join("table.txt"), &text).map_err(|e| Error::io(out, e))?;
    print!("{text}");
    Ok(())
}

/// One evaluation report found by `report`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReportLine {
    pub path: String,
    pub strategy: String,
    pub k: Option<u64>,
    pub map_base: f64,
    pub map_novel: f64,
    pub mask_map_novel: Option<f64>,
}

pub fn cmd_report(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_reports(dir, &mut files)?;
    files.sort();
    let mut lines = Vec::new();
    for p in files {
        let v: serde_json::Value = bench::read_json(&p)?;
        let settings = &v["settings"];
        lines.push(ReportLine {
            path: p.strip_prefix(dir).unwrap_or(&p).display().to_string(),
            strategy: settings["strategy"].as_str().unwrap_or("?").to_string(),
            k: settings["k"].as_u64(),
            map_base: v["map_base"].as_f64().unwrap_or(f64::NAN),
            map_novel: v["map_novel"].as_f64().unwrap_or(f64::NAN),
            mask_map_novel: v["mask_map_novel"].as_f64(),
        });
    }
    if lines.is_empty() {
        return Err(Error::Data(format!("no report_*.json files under {}", dir.display())));
    }
    let width = lines.iter().map(|l| l.path.len()).max().unwrap_or(4).max(4);
    let mut text = format!("{:width$}  {:14}  {:>3}  {:>8}  {:>9}  {:>9}\n", "file", "strategy", "K", "mAP base", "mAP novel", "mask nov.");
    for l in &lines {
        let k = l.k.map_or("-".into(), |k| k.to_string());
        let mask = l.mask_map_novel.map_or("-".into(), |m| format!("{:.4}", m));
        text.push_str(&format!(
            "{:width$}  {:14}  {:>3}  {:>8.4}  {:>9.4}  {:>9}\n",
            l.path, l.strategy, k, l.map_base, l.map_novel, mask
        ));
    }
    print!("{text}");
    bench::write_json(&dir.join("summary.json"), &serde_json::json!({ "reports": lines }), &cfg.provenance())
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_reports(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        {
            out.push(path);
        }
    }
    Ok(())
}
