//! Subcommand implementations. Each writes its artifacts under `cfg.out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rmadapter_core::fewshot::{cell_config, AblationRun, AblationTable};
use rmadapter_core::objectives::{gradcheck_objective, objective, ObjectiveInputs};
use rmadapter_core::{
    attach, contrastive_pretrain_with, evaluate, generate_world, parameter_count,
    train_adapters_with, AdaptedModel, DualEncoderModel, EvalReport, FewShotTask, GradCheckOptions,
    LossBreakdown, RecDepth, SharingMode, Tape,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    adapter_checkpoint, backbone_checkpoint, load_adapters, load_backbone, Checkpoint,
    ADAPTER_SECTION,
};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::metrics::{
    now, strip_timestamps, write_json, AblationRecord, MetricsRecord, MetricsWriter, PretrainRecord,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const TABLE_FILE: &str = "table.tsv";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const ADAPTERS_FILE: &str = "adapters.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Adapt,
    Eval,
    Ablate,
    Gradcheck,
    Params,
}

/// Runs `cmd` and returns the lines to print on success.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Vec<String>> {
    match cmd {
        Command::Pretrain => pretrain(cfg),
        Command::Adapt => adapt(cfg),
        Command::Eval => eval(cfg),
        Command::Ablate => ablate(cfg),
        Command::Gradcheck => gradcheck(cfg),
        Command::Params => params(cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started: f64,
    pub finished: f64,
    pub seconds: f64,
}

struct RunDir {
    path: PathBuf,
    started: f64,
    clock: Instant,
}

impl RunDir {
    fn create(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let path = cfg.out.clone();
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        let file = path.join(CONFIG_FILE);
        fs::write(&file, cfg.to_toml()).map_err(|e| CliError::io(&file, e))?;
        let file = path.join(SEED_FILE);
        let text = format!("seed = {seed}\nworld_seed = {}\n", cfg.world_seed);
        fs::write(&file, text).map_err(|e| CliError::io(&file, e))?;
        Ok(Self {
            path,
            started: now(),
            clock: Instant::now(),
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn seconds(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    /// Writes `report` without wall-clock fields, and the timing next to it.
    fn finish<T: Serialize>(&self, report: &T) -> Result<f64> {
        let mut value = serde_json::to_value(report).expect("report serializes");
        strip_timestamps(&mut value);
        write_json(&self.file(REPORT_FILE), &value)?;
        let seconds = self.seconds();
        let timing = Timing {
            started: self.started,
            finished: now(),
            seconds,
        };
        write_json(&self.file(TIMING_FILE), &timing)?;
        Ok(seconds)
    }
}

fn world_task(cfg: &RunConfig) -> Result<FewShotTask> {
    Ok(generate_world(cfg.world_seed, &cfg.world, &cfg.encoder)?.1)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        CliError::Config(format!(
            "no {what} checkpoint given (set {what} = \"<path>\")"
        ))
    })
}

/// Loads the configured backbone and checks it was built for `cfg.encoder`.
fn backbone(cfg: &RunConfig) -> Result<(DualEncoderModel, u64)> {
    let path = required(&cfg.backbone, "backbone")?;
    let (model, header) = load_backbone(path)?;
    if header.encoder != cfg.encoder {
        return Err(CliError::Config(format!(
            "{}: encoder settings differ from the [encoder] section",
            path.display()
        )));
    }
    Ok((model, header.seed))
}

/// The configured backbone, or a freshly initialized frozen one when none is given.
fn backbone_or_fresh(cfg: &RunConfig) -> Result<DualEncoderModel> {
    if cfg.backbone.is_some() {
        return Ok(backbone(cfg)?.0);
    }
    let mut model = DualEncoderModel::new(cfg.encoder.clone(), cfg.pretrain.seed)?;
    model.freeze();
    Ok(model)
}

/// Collects the first I/O error raised inside a training callback.
fn keep_first(slot: &mut Option<CliError>, r: Result<()>) {
    if let Err(e) = r {
        slot.get_or_insert(e);
    }
}

fn summary(what: &str, r: &EvalReport) -> String {
    format!(
        "{what}: base {:.2}% novel {:.2}% HM {:.2}%",
        r.base_accuracy, r.novel_accuracy, r.harmonic_mean
    )
}

fn pretrain(cfg: &RunConfig) -> Result<Vec<String>> {
    let (world, task) = generate_world(cfg.world_seed, &cfg.world, &cfg.encoder)?;
    let dir = RunDir::create(cfg, cfg.pretrain.seed)?;
    let mut model = DualEncoderModel::new(cfg.encoder.clone(), cfg.pretrain.seed)?;
    let pairs = world.pretraining_pairs()?;
    let mut metrics = MetricsWriter::create(&dir.file(METRICS_FILE))?;
    let mut failed = None;
    contrastive_pretrain_with(&mut model, &pairs, &cfg.pretrain, |step, loss, lr| {
        let rec = PretrainRecord {
            step,
            loss,
            lr,
            timestamp: now(),
        };
        keep_first(&mut failed, metrics.write(&rec));
    })?;
    failed.map_or(Ok(()), Err)?;
    metrics.finish()?;
    let ckpt = dir.file(BACKBONE_FILE);
    backbone_checkpoint(&model, cfg.pretrain.seed).write(&ckpt)?;
    let mut report = evaluate(&model, &task)?;
    report.seconds = dir.finish(&report)?;
    Ok(vec![
        summary("frozen zero-shot", &report),
        format!("backbone written to {}", ckpt.display()),
    ])
}

/// Attaches adapters per `cfg.train`, trains them and evaluates, streaming metrics.
fn train_and_evaluate(
    backbone: DualEncoderModel,
    task: &FewShotTask,
    cfg: &rmadapter_core::TrainConfig,
    mut on_step: impl FnMut(MetricsRecord) -> Result<()>,
) -> Result<(AdaptedModel, EvalReport)> {
    let mut model = attach(
        backbone,
        cfg.placement.clone(),
        cfg.mode,
        cfg.depth,
        cfg.seed,
    )?;
    let mut failed = None;
    let trace = train_adapters_with(&mut model, task, cfg, |step, b, lr| {
        keep_first(&mut failed, on_step(MetricsRecord::new(step, b, lr)));
    })?;
    failed.map_or(Ok(()), Err)?;
    let mut report = evaluate(&model, task)?;
    report.trace = trace.losses;
    report.added_parameters = model.added_parameters();
    Ok((model, report))
}

fn adapt(cfg: &RunConfig) -> Result<Vec<String>> {
    let (backbone, _) = backbone(cfg)?;
    let task = world_task(cfg)?;
    let dir = RunDir::create(cfg, cfg.train.seed)?;
    let mut metrics = MetricsWriter::create(&dir.file(METRICS_FILE))?;
    let (model, mut report) =
        train_and_evaluate(backbone, &task, &cfg.train, |r| metrics.write(&r))?;
    metrics.finish()?;
    let ckpt = dir.file(ADAPTERS_FILE);
    adapter_checkpoint(&model, cfg.train.seed).write(&ckpt)?;
    report.seconds = dir.finish(&report)?;
    Ok(vec![
        summary("adapted", &report),
        format!(
            "{} adapter parameters written to {}",
            report.added_parameters,
            ckpt.display()
        ),
    ])
}

fn eval(cfg: &RunConfig) -> Result<Vec<String>> {
    let (backbone, seed) = backbone(cfg)?;
    let task = world_task(cfg)?;
    let dir = RunDir::create(cfg, seed)?;
    MetricsWriter::create(&dir.file(METRICS_FILE))?.finish()?;
    let (what, mut report) = match &cfg.adapters {
        Some(path) => {
            let model = load_adapters(path, backbone)?;
            let mut r = evaluate(&model, &task)?;
            r.added_parameters = model.added_parameters();
            ("adapted", r)
        }
        None => ("frozen zero-shot", evaluate(&backbone, &task)?),
    };
    report.seconds = dir.finish(&report)?;
    Ok(vec![summary(what, &report)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// The backbone without adapters.
    pub frozen: EvalReport,
    pub table: AblationTable,
}

fn ablate(cfg: &RunConfig) -> Result<Vec<String>> {
    let (backbone, _) = backbone(cfg)?;
    let task = world_task(cfg)?;
    let matrix = cfg.ablate.matrix();
    if matrix.is_empty() {
        return Err(CliError::Config("ablation matrix has no runs".into()));
    }
    let dir = RunDir::create(cfg, cfg.train.seed)?;
    let mut metrics = MetricsWriter::create(&dir.file(METRICS_FILE))?;
    let frozen = evaluate(&backbone, &task)?;
    let mut runs = Vec::with_capacity(matrix.len());
    for key in &matrix.cells {
        for &seed in &matrix.seeds {
            let run_cfg = cell_config(&cfg.train, key, seed);
            let clock = Instant::now();
            let (_, mut report) = train_and_evaluate(backbone.clone(), &task, &run_cfg, |m| {
                metrics.write(&AblationRecord {
                    variant: key.variant.as_str().into(),
                    mode: key.mode.as_str().into(),
                    depth: key.depth.get(),
                    seed,
                    metrics: m,
                })
            })?;
            report.seconds = clock.elapsed().as_secs_f64();
            runs.push(AblationRun {
                key: *key,
                seed,
                report,
            });
        }
    }
    metrics.finish()?;
    let table = AblationTable::from_runs(runs);
    let tsv = table_tsv(&frozen, &table);
    let file = dir.file(TABLE_FILE);
    fs::write(&file, &tsv).map_err(|e| CliError::io(&file, e))?;
    dir.finish(&AblationReport { frozen, table })?;
    Ok(tsv.lines().map(String::from).collect())
}

/// Mean ± std per cell, one row each, with the frozen model first.
pub fn table_tsv(frozen: &EvalReport, table: &AblationTable) -> String {
    let mut out = String::from(
        "variant\tmode\tdepth\tbase\tbase_std\tnovel\tnovel_std\thm\thm_std\tparams\n",
    );
    out.push_str(&format!(
        "frozen\t-\t-\t{:.2}\t0.00\t{:.2}\t0.00\t{:.2}\t0.00\t0\n",
        frozen.base_accuracy, frozen.novel_accuracy, frozen.harmonic_mean
    ));
    for s in &table.summary {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\n",
            s.key.variant.as_str(),
            s.key.mode.as_str(),
            s.key.depth.get(),
            s.base.mean,
            s.base.std,
            s.novel.mean,
            s.novel.std,
            s.harmonic_mean.mean,
            s.harmonic_mean.std,
            s.added_parameters
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstEntry {
    pub tensor: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    pub checked: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<WorstEntry>,
}

/// Adapters attached per `cfg.train` to the configured backbone (or a fresh
/// frozen one), checked on a batch of `cfg.gradcheck.batch` training shots.
pub fn gradcheck_report(cfg: &RunConfig) -> Result<GradcheckReport> {
    let task = world_task(cfg)?;
    let t = &cfg.train;
    let mut model = attach(
        backbone_or_fresh(cfg)?,
        t.placement.clone(),
        t.mode,
        t.depth,
        t.seed,
    )?;
    let g = &cfg.gradcheck;
    if g.perturb != 0.0 {
        model.perturb(g.perturb, g.seed);
    }
    if g.batch == 0 || task.train.is_empty() {
        return Err(CliError::Config("gradcheck batch must be >= 1".into()));
    }
    // One shot from each class in turn.
    let stride = task.shots.max(1);
    let picks: Vec<usize> = (0..g.batch)
        .map(|i| (i * stride + i / task.base_classes.len().max(1)) % task.train.len())
        .collect();
    let images: Vec<_> = picks.iter().map(|&i| task.train[i].image.clone()).collect();
    let labels: Vec<usize> = picks
        .iter()
        .map(|&i| {
            task.base_label(task.train[i].class)
                .expect("training shots are base classes")
        })
        .collect();
    let inputs = ObjectiveInputs::prepare(&model, &images, &labels, task.base_prompts.prompts())?;
    let loss = {
        let mut tape = Tape::new();
        let ad = model.bind_adapters(&mut tape, false);
        objective(&mut tape, &model, &ad, &inputs, &t.weights)?.breakdown(&tape)
    };
    let opts = GradCheckOptions {
        step: g.step,
        max_elements: g.max_elements,
        seed: g.seed,
    };
    let report = gradcheck_objective(&model, &inputs, &t.weights, opts)?;
    let names: Vec<String> = model
        .named_adapter_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    Ok(GradcheckReport {
        parameters: model.added_parameters(),
        checked: report.entries.len(),
        batch: g.batch,
        loss,
        max_rel_error: report.max_rel_error,
        tolerance: g.tolerance,
        passed: report.passes(g.tolerance),
        worst: report.worst().map(|e| WorstEntry {
            tensor: names[e.param].clone(),
            element: e.element,
            analytic: e.analytic,
            numeric: e.numeric,
            rel_error: e.rel_error,
        }),
    })
}

fn gradcheck(cfg: &RunConfig) -> Result<Vec<String>> {
    let dir = RunDir::create(cfg, cfg.train.seed)?;
    let report = gradcheck_report(cfg)?;
    let mut metrics = MetricsWriter::create(&dir.file(METRICS_FILE))?;
    metrics.write(&MetricsRecord::new(0, &report.loss, 0.0))?;
    metrics.finish()?;
    dir.finish(&report)?;
    let line = format!(
        "checked {} of {} parameters: max relative error {:.3e} (tolerance {:.0e})",
        report.checked, report.parameters, report.max_rel_error, report.tolerance
    );
    if !report.passed {
        return Err(CliError::Numerical(format!(
            "gradient check failed, {line}"
        )));
    }
    Ok(vec![line])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCell {
    pub mode: SharingMode,
    pub depth: RecDepth,
    pub closed_form: usize,
    pub enumerated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub backbone_parameters: usize,
    pub configured: ParamCell,
    pub tensors: Vec<TensorCount>,
    /// Every sharing mode × depth at the configured placement.
    pub grid: Vec<ParamCell>,
}

/// Counts the scalars in the adapter section of an encoded checkpoint of `model`.
pub fn enumerate_adapter_blobs(model: &AdaptedModel) -> Result<usize> {
    let bytes = adapter_checkpoint(model, 0).encode();
    let ck = Checkpoint::decode(&bytes).map_err(CliError::Numerical)?;
    Ok(ck.section(ADAPTER_SECTION).map_or(0, |s| s.element_count()))
}

fn param_cell(
    backbone: &DualEncoderModel,
    t: &rmadapter_core::TrainConfig,
    mode: SharingMode,
    depth: RecDepth,
) -> Result<(ParamCell, AdaptedModel)> {
    let c = &backbone.config;
    let model = attach(backbone.clone(), t.placement.clone(), mode, depth, t.seed)?;
    let cell = ParamCell {
        mode,
        depth,
        closed_form: parameter_count(&t.placement, mode, depth, c.vision_width, c.text_width),
        enumerated: enumerate_adapter_blobs(&model)?,
    };
    Ok((cell, model))
}

pub fn params_report(cfg: &RunConfig) -> Result<ParamsReport> {
    let backbone = backbone_or_fresh(cfg)?;
    let t = &cfg.train;
    let (configured, model) = param_cell(&backbone, t, t.mode, t.depth)?;
    let tensors = model
        .named_adapter_tensors()
        .into_iter()
        .map(|(name, x)| TensorCount {
            name,
            shape: x.shape().to_vec(),
            count: x.len(),
        })
        .collect();
    let mut grid = Vec::new();
    for mode in SharingMode::ALL {
        for depth in RecDepth::ALL {
            grid.push(param_cell(&backbone, t, mode, depth)?.0);
        }
    }
    Ok(ParamsReport {
        backbone_parameters: backbone.parameter_count(),
        configured,
        tensors,
        grid,
    })
}

fn params(cfg: &RunConfig) -> Result<Vec<String>> {
    let dir = RunDir::create(cfg, cfg.train.seed)?;
    MetricsWriter::create(&dir.file(METRICS_FILE))?.finish()?;
    let report = params_report(cfg)?;
    dir.finish(&report)?;
    let mut lines = vec![format!("backbone (frozen): {}", report.backbone_parameters)];
    for t in &report.tensors {
        lines.push(format!(
            "{:<32} {:>10} {:>8}",
            t.name,
            format!("{:?}", t.shape),
            t.count
        ));
    }
    lines.push(String::from("mode          depth  closed-form  enumerated"));
    for c in &report.grid {
        lines.push(format!(
            "{:<13} {:>5}  {:>11}  {:>10}",
            c.mode.as_str(),
            c.depth.get(),
            c.closed_form,
            c.enumerated
        ));
    }
    let c = &report.configured;
    lines.push(format!(
        "configured {} depth {}: closed-form {} enumerated {}",
        c.mode.as_str(),
        c.depth.get(),
        c.closed_form,
        c.enumerated
    ));
    if report
        .grid
        .iter()
        .chain([c])
        .any(|c| c.closed_form != c.enumerated)
    {
        return Err(CliError::Numerical(
            "closed-form parameter count differs from the checkpoint".into(),
        ));
    }
    Ok(lines)
}
