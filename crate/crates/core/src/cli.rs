//! Command-line surface.
//!
//! Exit codes: 0 on success, 1 for invalid input or usage, 2 for I/O and
//! other internal failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::assignment::{hungarian, one_to_many, Assignment};
use crate::check::run_checks;
use crate::config::{echo_config, load_config, ReportFormat, RunConfig};
use crate::cost::build_cost_matrix;
use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};
use crate::ingest::{ingest_predictions, write_labels, ImageGroup, Ingested};
use crate::losses::{o2m_losses, o2o_losses, LossBreakdown};
use crate::mining::{filter_fixed, filter_mean_std, filter_topk, mine_cost_based_batch, MiningImage, PseudoLabel};
use crate::report::{emit_report, Cell, Table};
use crate::simulator::{
    eval_assignment_quality, eval_filtering, eval_strategy_ablation, generate, run_assigner, AssignStrategy,
    FilterStrategy,
};
use crate::teacher_student::run_pipeline;

pub const THREADS_ENV: &str = "SSOD_MATCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ssod", version, about = "Label assignment and pseudo-label mining for set-prediction detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the synthetic scenario and write the evaluation reports.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: Option<ReportFormat>,
    },
    /// Filter detector predictions into pseudo labels.
    Mine {
        #[arg(long)]
        predictions: PathBuf,
        /// Proposals matched against in cost-based mining; defaults to the
        /// predictions themselves.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MineStrategy::Gmm)]
        strategy: MineStrategy,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        strict: bool,
    },
    /// Assign predictions to ground-truth boxes and report diagnostics.
    Assign {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = AssignChoice::O2o)]
        strategy: AssignChoice,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: Option<ReportFormat>,
        #[arg(long)]
        strict: bool,
    },
    /// Run the built-in oracle checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MineStrategy {
    Fixed,
    Topk,
    MeanStd,
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AssignChoice {
    O2o,
    O2m,
    MaxIou,
    Atss,
    Simota,
}

impl AssignChoice {
    fn name(&self) -> &'static str {
        match self {
            Self::O2o => "o2o",
            Self::O2m => "o2m",
            Self::MaxIou => "max_iou",
            Self::Atss => "atss",
            Self::Simota => "simota",
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::DegenerateFit(_) => 2,
        _ => 1,
    }
}

fn load(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), load_config)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sizes the global worker pool from the environment.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::param(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a pool that already exists (repeated in-process calls) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn simulate(cfg: &RunConfig, out: &Path, out_log: &mut impl Write) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let ds = generate(&cfg.scenario)?;
    let format = cfg.output.format;
    let embedded: Option<Value> = match format {
        ReportFormat::Json => Some(serde_json::to_value(cfg)?),
        ReportFormat::Csv => None,
    };

    let filtering = eval_filtering(
        &ds,
        &FilterStrategy::standard(cfg.stage.tau_s, cfg.mining.top_k),
        &cfg.mining,
        &cfg.cost,
    )?;
    let quality = eval_assignment_quality(&ds, &cfg.simulate.quality_ks, cfg.stage.tau_s, &cfg.cost, &cfg.match_score)?;
    let ablation = eval_strategy_ablation(&ds, cfg.stage.tau_s, &cfg.assign, &cfg.cost, &cfg.match_score)?;

    let mut tables = vec![Table::filtering(&filtering), Table::quality(&quality), Table::ablation(&ablation)];
    if cfg.simulate.pipeline_steps > 0 {
        tables.push(Table::pipeline(&run_pipeline(&ds, cfg, cfg.simulate.pipeline_steps)?));
    }
    let mut written = Vec::new();
    for t in &tables {
        written.push(emit_report(t, format, out, embedded.as_ref())?);
    }
    let echo = out.join("effective_config.toml");
    write_file(&echo, &echo_config(cfg))?;
    written.push(echo);

    for r in &filtering {
        let _ = writeln!(out_log, "{:<12} precision {:.3}  recall {:.3}", r.strategy, r.precision, r.recall);
    }
    for p in &written {
        let _ = writeln!(out_log, "wrote {}", p.display());
    }
    Ok(written)
}

/// Labels kept by `strategy` for every image group, in input order.
pub fn mine_groups(
    preds: &Ingested,
    proposals: Option<&Ingested>,
    strategy: MineStrategy,
    cfg: &RunConfig,
) -> Result<Vec<Vec<PseudoLabel>>> {
    let nc = preds.num_classes().max(proposals.map_or(1, Ingested::num_classes));
    let dets: Vec<Vec<Detection>> = preds.groups.iter().map(|g| g.detections(nc)).collect::<Result<_>>()?;
    match strategy {
        MineStrategy::Fixed => Ok(dets.iter().map(|d| filter_fixed(d, cfg.stage.tau_s)).collect()),
        MineStrategy::Topk => dets.iter().map(|d| filter_topk(d, cfg.mining.top_k)).collect(),
        MineStrategy::MeanStd => Ok(dets.iter().map(|d| filter_mean_std(d)).collect()),
        MineStrategy::Gmm => {
            let props: Vec<Vec<Detection>> = match proposals {
                Some(p) => preds
                    .groups
                    .iter()
                    .map(|g| p.group(&g.image_id).map_or(Ok(Vec::new()), |pg| pg.detections(nc)))
                    .collect::<Result<_>>()?,
                None => dets.clone(),
            };
            let initial: Vec<Vec<PseudoLabel>> = dets.iter().map(|d| filter_mean_std(d)).collect();
            let mut kept = Vec::with_capacity(initial.len());
            for (init, prop) in initial.chunks(cfg.mining.batch_size).zip(props.chunks(cfg.mining.batch_size)) {
                let batch: Vec<MiningImage<'_>> =
                    init.iter().zip(prop).map(|(i, p)| MiningImage { initial: i, proposals: p }).collect();
                kept.extend(mine_cost_based_batch(&batch, &cfg.cost, &cfg.mining.em)?.kept);
            }
            Ok(kept)
        }
    }
}

fn read_input(path: &Path, strict: bool, log: &mut impl Write) -> Result<Ingested> {
    let ing = ingest_predictions(path, strict)?;
    for e in &ing.skipped {
        let _ = writeln!(log, "{}: skipped {e}", path.display());
    }
    Ok(ing)
}

#[allow(clippy::too_many_arguments)]
pub fn mine(
    predictions: &Path,
    proposals: Option<&Path>,
    strategy: MineStrategy,
    cfg: &RunConfig,
    out: &Path,
    strict: bool,
    log: &mut impl Write,
    err: &mut impl Write,
) -> Result<PathBuf> {
    let preds = read_input(predictions, strict, err)?;
    let props = proposals.map(|p| read_input(p, strict, err)).transpose()?;
    let kept = mine_groups(&preds, props.as_ref(), strategy, cfg)?;

    create_dir(out)?;
    let path = out.join("pseudo_labels.jsonl");
    let mut buf = Vec::new();
    for (g, labels) in preds.groups.iter().zip(&kept) {
        write_labels(&mut buf, &g.image_id, g.width, g.height, labels).map_err(|e| Error::io(&path, e))?;
    }
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let n_kept: usize = kept.iter().map(Vec::len).sum();
    let _ = writeln!(
        log,
        "kept {n_kept}/{} boxes ({} skipped records, {} images)",
        preds.kept(),
        preds.skipped.len(),
        preds.groups.len()
    );
    let _ = writeln!(log, "wrote {}", path.display());
    Ok(path)
}

fn assign_one(choice: AssignChoice, gt: &ImageGroup, dets: &[Detection], cfg: &RunConfig) -> Result<(Assignment, LossBreakdown)> {
    let targets = gt.labels();
    if targets.is_empty() || dets.is_empty() {
        return Err(Error::EmptyProblem { targets: targets.len(), proposals: dets.len() });
    }
    let a = match choice {
        AssignChoice::O2o => hungarian(&build_cost_matrix(&targets, dets, &cfg.cost)?)?,
        AssignChoice::O2m => one_to_many(&targets, dets, &cfg.match_score, cfg.assign.k, true)?,
        AssignChoice::MaxIou => run_assigner(AssignStrategy::MaxIou, &targets, dets, &cfg.assign, &cfg.cost, &cfg.match_score)?,
        AssignChoice::Atss => run_assigner(AssignStrategy::Atss, &targets, dets, &cfg.assign, &cfg.cost, &cfg.match_score)?,
        AssignChoice::Simota => run_assigner(AssignStrategy::SimOta, &targets, dets, &cfg.assign, &cfg.cost, &cfg.match_score)?,
    };
    let losses = match choice {
        AssignChoice::O2o => o2o_losses(&a, dets, &targets, &cfg.cost)?,
        _ => o2m_losses(&a, dets, &targets, &cfg.match_score, &cfg.loss)?,
    };
    Ok((a, losses))
}

/// Per-target and per-image diagnostics tables.
pub fn assign_tables(preds: &Ingested, gt: &Ingested, choice: AssignChoice, cfg: &RunConfig) -> Result<(Table, Table)> {
    let nc = preds.num_classes().max(gt.num_classes());
    let mut targets_t = Table::new(
        "assignment",
        &["image_id", "target", "class_id", "num_positives", "proposals", "best_iou", "mean_iou"],
    );
    let mut losses_t = Table::new(
        "assignment_losses",
        &["image_id", "strategy", "num_targets", "num_proposals", "positives", "cls", "reg_giou", "reg_l1", "total"],
    );
    for g in &gt.groups {
        let dets = preds.group(&g.image_id).map_or(Ok(Vec::new()), |p| p.detections(nc))?;
        let (a, l) = assign_one(choice, g, &dets, cfg)?;
        for (t, props) in a.per_target().iter().enumerate() {
            let ious: Vec<f64> = props.iter().map(|&p| iou(&g.records[t].bbox, dets[p].bbox())).collect();
            let mean = if ious.is_empty() { None } else { Some(ious.iter().sum::<f64>() / ious.len() as f64) };
            let list: Vec<String> = props.iter().map(usize::to_string).collect();
            targets_t.push(vec![
                g.image_id.clone().into(),
                t.into(),
                g.records[t].category_id.into(),
                props.len().into(),
                list.join(" ").into(),
                ious.iter().copied().reduce(f64::max).into(),
                mean.into(),
            ])?;
        }
        losses_t.push(vec![
            g.image_id.clone().into(),
            choice.name().into(),
            g.records.len().into(),
            dets.len().into(),
            a.num_positives().into(),
            Cell::Float(l.cls),
            Cell::Float(l.reg_giou),
            Cell::Float(l.reg_l1),
            Cell::Float(l.total),
        ])?;
    }
    Ok((targets_t, losses_t))
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cmd: Command, out: &mut impl Write, err: &mut impl Write) -> Result<i32> {
    init_threads()?;
    match cmd {
        Command::Simulate { config, seed, out: dir, format } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.scenario.seed = s;
            }
            if let Some(f) = format {
                cfg.output.format = f;
            }
            simulate(&cfg, &dir, out)?;
        }
        Command::Mine { predictions, proposals, strategy, config, out: dir, strict } => {
            let cfg = load(config.as_deref())?;
            mine(&predictions, proposals.as_deref(), strategy, &cfg, &dir, strict, out, err)?;
        }
        Command::Assign { predictions, gt, strategy, config, out: dir, format, strict } => {
            let cfg = load(config.as_deref())?;
            let preds = read_input(&predictions, strict, err)?;
            let truth = read_input(&gt, strict, err)?;
            let (targets, losses) = assign_tables(&preds, &truth, strategy, &cfg)?;
            create_dir(&dir)?;
            let format = format.unwrap_or(cfg.output.format);
            for t in [&targets, &losses] {
                let p = emit_report(t, format, &dir, None)?;
                let _ = writeln!(out, "wrote {}", p.display());
            }
        }
        Command::Check { seed } => {
            let results = run_checks(seed)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.ok() { "PASS" } else { "FAIL" };
                let _ = writeln!(out, "{status} {:<28} {}/{}", r.name, r.passed, r.total);
                failed += usize::from(!r.ok());
            }
            let _ = writeln!(out, "{} of {} checks passed", results.len() - failed, results.len());
            return Ok(if failed == 0 { 0 } else { 1 });
        }
    }
    Ok(0)
}
