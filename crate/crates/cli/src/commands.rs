//! Implementations of the `voxatn` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use voxatn::cloudio::{normalize, PointCloud};
use voxatn::padeval::{
    det_csv, evaluate, parse_det_csv, split_protocol, EvalReport, ProtocolSpec, ReportRow, ReportTable,
    ScoreEntry, ScoreSet,
};
use voxatn::synthface::{generate_dataset, load_manifest, write_dataset};
use voxatn::tengine::gradcheck::{layer_suite, CHECKED_OPS, LAYER_TOLERANCE, NETWORK_TOLERANCE};
use voxatn::tengine::Fault;
use voxatn::voxatnnet::{
    build_model, network_gradcheck, train, FilterVariant, Model, ModelConfig, TrainConfig,
};
use voxatn::voxel::{voxelize, GridSpec, VoxelGrid};

use crate::config::{Overrides, RunConfig};
use crate::svg::det_svg;
use crate::{CliError, Command, Common};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT: &str = "model.vxm";
pub const LOSS_CSV: &str = "loss.csv";
pub const SUMMARY: &str = "summary.txt";
pub const REPORT: &str = "report.txt";
pub const DET_CSV: &str = "det.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const ABLATION: &str = "ablation.txt";
pub const GRADCHECK: &str = "gradcheck.txt";
/// Backward-pass scale used by the hidden fault-injection switch.
const FAULT_SCALE: f64 = 1.5;
const GRADCHECK_RESOLUTION: usize = 16;

/// Resolved settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub deterministic: bool,
}

impl Context {
    /// Loads and resolves the configuration, creates the output directory
    /// and writes the resolved-config echo.
    pub fn prepare(common: &Common) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        cfg.apply(Overrides {
            seed: common.seed,
            resolution: common.resolution,
        });
        cfg.validate()?;
        fs::create_dir_all(&common.out)?;
        fs::write(common.out.join(RESOLVED_CONFIG), cfg.to_toml())?;
        Ok(Self {
            cfg,
            out: common.out.clone(),
            deterministic: common.deterministic,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let threads = if self.deterministic { 1 } else { worker_threads() };
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
    }
}

/// Worker count: `VOXATN_THREADS` capped at the available parallelism.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, usize::from);
    std::env::var("VOXATN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |n| n.min(available))
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { common } => {
            let ctx = Context::prepare(&common)?;
            let n = synth(&ctx)?;
            eprintln!("wrote {n} clouds and manifest.csv to {}", ctx.out.display());
        }
        Command::Train { common, manifest } => {
            let ctx = Context::prepare(&common)?;
            let outcome = train_command(&ctx, &manifest)?;
            eprintln!(
                "trained {} parameters; final loss {:.6}; checkpoint {}",
                outcome.parameter_count,
                outcome.history.last().copied().unwrap_or(f64::NAN),
                ctx.out.join(CHECKPOINT).display()
            );
        }
        Command::Eval {
            common,
            manifest,
            checkpoint,
        } => {
            let ctx = Context::prepare(&common)?;
            let bytes = fs::read(&checkpoint)
                .map_err(|e| CliError::User(format!("cannot read checkpoint {}: {e}", checkpoint.display())))?;
            let text = eval_command(&ctx, &manifest, &bytes)?.text;
            print!("{text}");
        }
        Command::Ablate { common, manifest } => {
            let ctx = Context::prepare(&common)?;
            print!("{}", ablate(&ctx, &manifest)?);
        }
        Command::Gradcheck { common, inject_fault } => {
            let ctx = Context::prepare(&common)?;
            let fault = inject_fault.as_deref().map(parse_fault).transpose()?;
            let outcome = gradcheck(&ctx, fault)?;
            print!("{}", outcome.text);
            if !outcome.passed {
                return Err(CliError::Internal("gradient check failed".into()));
            }
        }
        Command::DetPlot { common, csv, svg } => {
            fs::create_dir_all(&common.out)?;
            let target = svg.unwrap_or_else(|| common.out.join("det.svg"));
            det_plot(&csv, &target)?;
            eprintln!("wrote {}", target.display());
        }
    }
    Ok(())
}

pub fn synth(ctx: &Context) -> Result<usize, CliError> {
    let data = generate_dataset(&ctx.cfg.data)?;
    write_dataset(&ctx.out, &data)?;
    Ok(data.len())
}

/// Normalized clouds split by the configured protocol.
pub fn load_split(cfg: &RunConfig, manifest: &Path) -> Result<(ProtocolSpec, Vec<PointCloud>, Vec<PointCloud>), CliError> {
    let clouds = load_manifest(manifest)?
        .iter()
        .map(|c| {
            normalize(c).map_err(|e| {
                CliError::User(format!("{}: {e}", c.source.as_deref().unwrap_or(&c.identity)))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = cfg.protocol.spec()?;
    let (train, test) = split_protocol(&clouds, &spec, cfg.protocol.seed)?;
    Ok((spec, train, test))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<f64>,
    pub parameter_count: usize,
    pub model: Model,
}

fn fit(model_cfg: &ModelConfig, train_cfg: &TrainConfig, clouds: &[PointCloud], tag: &str) -> Result<(Model, Vec<f64>), CliError> {
    let mut model = build_model(model_cfg)?;
    let started = Instant::now();
    let epochs = train_cfg.epochs;
    let history = train(&mut model, clouds, train_cfg, &mut |s| {
        eprintln!(
            "{tag}epoch {}/{epochs} loss {:.6} ({} samples, {:.0?})",
            s.epoch,
            s.mean_loss,
            s.samples,
            started.elapsed()
        );
    })?;
    Ok((model, history))
}

pub fn train_command(ctx: &Context, manifest: &Path) -> Result<TrainOutcome, CliError> {
    let (spec, train_set, _) = load_split(&ctx.cfg, manifest)?;
    eprintln!("protocol {}: {} training clouds", spec.name(), train_set.len());
    let (model, history) = fit(&ctx.cfg.model, &ctx.cfg.train, &train_set, "")?;
    fs::write(ctx.out.join(CHECKPOINT), model.to_checkpoint()?)?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(loss, "{},{l}", i + 1);
    }
    fs::write(ctx.out.join(LOSS_CSV), loss)?;
    let mut summary = model.summary();
    let _ = writeln!(summary, "protocol: {}", spec.name());
    let _ = writeln!(summary, "training clouds: {}", train_set.len());
    let _ = writeln!(summary, "epochs: {}", history.len());
    fs::write(ctx.out.join(SUMMARY), summary)?;
    Ok(TrainOutcome {
        parameter_count: model.parameter_count(),
        history,
        model,
    })
}

/// Attack scores for `clouds`, computed on the context's worker pool.
pub fn score_clouds(ctx: &Context, model: &Model, clouds: &[PointCloud]) -> Result<Vec<f64>, CliError> {
    let spec = GridSpec::with_resolution(model.config().input_resolution);
    let grids = clouds
        .iter()
        .map(|c| voxelize(c, &spec))
        .collect::<Result<Vec<VoxelGrid>, _>>()?;
    let refs: Vec<&VoxelGrid> = grids.iter().collect();
    let chunks: Vec<Vec<f64>> = ctx.pool()?.install(|| {
        refs.par_chunks(8)
            .map(|chunk| model.predict_scores(chunk))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(chunks.concat())
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub text: String,
}

fn report_text(protocol: &str, test: &[PointCloud], report: &EvalReport) -> String {
    let attacks = test.iter().filter(|c| c.label.is_attack()).count();
    let mut table = ReportTable::default();
    table.push(protocol, report.row());
    let mut text = String::new();
    let _ = writeln!(text, "test samples: {} (bona fide {}, attack {})", test.len(), test.len() - attacks, attacks);
    let _ = writeln!(text, "threshold at D-EER: {}", report.threshold_at_eer);
    text.push_str(&table.to_string());
    text
}

fn score_set(clouds: &[PointCloud], scores: &[f64]) -> Result<ScoreSet, CliError> {
    Ok(ScoreSet::new(
        clouds
            .iter()
            .zip(scores)
            .map(|(c, &score)| ScoreEntry {
                score,
                label: c.label,
                identity: c.identity.clone(),
            })
            .collect(),
    )?)
}

pub fn eval_command(ctx: &Context, manifest: &Path, checkpoint: &[u8]) -> Result<EvalOutcome, CliError> {
    let model = Model::from_checkpoint(&ctx.cfg.model, checkpoint)?;
    let (spec, _, test) = load_split(&ctx.cfg, manifest)?;
    let scores = score_clouds(ctx, &model, &test)?;
    let report = evaluate(&score_set(&test, &scores)?)?;
    let text = report_text(&spec.name(), &test, &report);
    fs::write(ctx.out.join(REPORT), &text)?;
    fs::write(ctx.out.join(DET_CSV), det_csv(&report.det_points))?;
    let mut csv = String::from("path,class,identity,score\n");
    for (c, s) in test.iter().zip(&scores) {
        let _ = writeln!(csv, "{},{},{},{s}", c.source.as_deref().unwrap_or(""), c.label, c.identity);
    }
    fs::write(ctx.out.join(SCORES_CSV), csv)?;
    Ok(EvalOutcome { report, text })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: FilterVariant,
    pub attention: bool,
    pub parameters: usize,
    pub row: ReportRow,
}

impl AblationRow {
    pub fn name(&self) -> String {
        format!("{} attention={}", self.variant, if self.attention { "on" } else { "off" })
    }
}

/// Trains and evaluates one model configuration on fixed splits.
pub fn train_and_evaluate(model_cfg: &ModelConfig, train_cfg: &TrainConfig, train_set: &[PointCloud], test: &[PointCloud], tag: &str) -> Result<(Model, EvalReport), CliError> {
    let (model, _) = fit(model_cfg, train_cfg, train_set, tag)?;
    let spec = GridSpec::with_resolution(model_cfg.input_resolution);
    let grids = test.iter().map(|c| voxelize(c, &spec)).collect::<Result<Vec<_>, _>>()?;
    let scores = model.predict_scores(&grids.iter().collect::<Vec<_>>())?;
    let report = evaluate(&score_set(test, &scores)?)?;
    Ok((model, report))
}

pub fn ablation_rows(ctx: &Context, manifest: &Path) -> Result<Vec<AblationRow>, CliError> {
    let (_, train_set, test) = load_split(&ctx.cfg, manifest)?;
    let variants: Vec<(FilterVariant, bool)> = FilterVariant::ALL
        .iter()
        .flat_map(|&v| [(v, true), (v, false)])
        .collect();
    ctx.pool()?.install(|| {
        variants
            .par_iter()
            .map(|&(variant, attention)| {
                let model_cfg = ModelConfig {
                    filter_variant: variant,
                    attention_enabled: attention,
                    ..ctx.cfg.model.clone()
                };
                let tag = format!("[{variant} attention={}] ", if attention { "on" } else { "off" });
                let (model, report) = train_and_evaluate(&model_cfg, &ctx.cfg.train, &train_set, &test, &tag)?;
                Ok(AblationRow {
                    variant,
                    attention,
                    parameters: model.parameter_count(),
                    row: report.row(),
                })
            })
            .collect()
    })
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<30} | {:>12} | {:>9} | {:>16} | {:>15}\n",
        "variant", "parameters", "D-EER (%)", "BPCER@APCER=10%", "BPCER@APCER=5%"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<30} | {:>12} | {:>9.2} | {:>16.2} | {:>15.2}",
            r.name(),
            r.parameters,
            r.row.d_eer,
            r.row.bpcer_at_apcer_10,
            r.row.bpcer_at_apcer_5
        );
    }
    out
}

pub fn ablate(ctx: &Context, manifest: &Path) -> Result<String, CliError> {
    let text = ablation_table(&ablation_rows(ctx, manifest)?);
    fs::write(ctx.out.join(ABLATION), &text)?;
    Ok(text)
}

pub fn parse_fault(op: &str) -> Result<Fault, CliError> {
    CHECKED_OPS
        .iter()
        .find(|k| k.name() == op)
        .map(|&op| Fault {
            op,
            scale: FAULT_SCALE,
        })
        .ok_or_else(|| {
            let names: Vec<&str> = CHECKED_OPS.iter().map(|k| k.name()).collect();
            CliError::User(format!("unknown op {op:?}; expected one of {}", names.join(", ")))
        })
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub passed: bool,
    pub text: String,
}

pub fn gradcheck(ctx: &Context, fault: Option<Fault>) -> Result<GradcheckOutcome, CliError> {
    let seed = ctx.cfg.train.rng_seed;
    let mut text = String::new();
    let mut passed = true;
    let mut line = |name: &str, err: f64, tol: f64, ok: bool| {
        let _ = writeln!(
            text,
            "{name:<28} max_rel_error={err:.3e} tolerance={tol:.0e} {}",
            if ok { "PASS" } else { "FAIL" }
        );
    };
    for (name, report) in layer_suite(seed, fault)? {
        passed &= report.passed();
        line(&name, report.max_rel_error(), LAYER_TOLERANCE, report.passed());
    }
    let r = ctx.cfg.model.input_resolution.min(GRADCHECK_RESOLUTION);
    let net_cfg = ModelConfig {
        input_resolution: r,
        ..ctx.cfg.model.clone()
    };
    let report = network_gradcheck(&net_cfg, seed, fault)?;
    passed &= report.passed();
    line(&format!("network_{r}^3"), report.max_rel_error(), NETWORK_TOLERANCE, report.passed());
    fs::write(ctx.out.join(GRADCHECK), &text)?;
    Ok(GradcheckOutcome { passed, text })
}

pub fn det_plot(csvs: &[PathBuf], svg_path: &Path) -> Result<(), CliError> {
    let mut curves = Vec::new();
    for path in csvs {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
        let points = parse_det_csv(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        let label = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        curves.push((label, points));
    }
    if let Some(parent) = svg_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(svg_path, det_svg(&curves))?;
    Ok(())
}
