//! Few-shot adapter training, base/novel evaluation and the ablation matrix.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{attach, AdaptedModel, AdapterPlacement, RecDepth, SharingMode};
use crate::autodiff::Tape;
use crate::encoder::{argmax, zero_shot_logits, ClassPromptSet, DualEncoderModel};
use crate::error::{Error, Result};
use crate::objectives::{objective, FrozenPass, LossBreakdown, LossWeights, ObjectiveInputs};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::tensor::Tensor;
use crate::world::{FewShotTask, Sample};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub placement: AdapterPlacement,
    pub mode: SharingMode,
    pub depth: RecDepth,
    /// Seeds adapter initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 5e-3,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            placement: AdapterPlacement::default(),
            mode: SharingMode::SharedDown,
            depth: RecDepth::TWO,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config(String::from("steps must be > 0")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr {} and weight decay {} must be finite and >= 0",
                self.lr, self.weight_decay
            )));
        }
        self.weights.validate()
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainTrace {
    pub losses: Vec<LossBreakdown>,
    pub learning_rates: Vec<f64>,
    /// World-level class ids of every sample and prompt that reached a gradient step.
    pub seen_classes: BTreeSet<usize>,
}

/// Base/novel accuracy in percent, their harmonic mean, and run bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub harmonic_mean: f64,
    pub trace: Vec<LossBreakdown>,
    pub added_parameters: usize,
    /// Filled in by hosted callers; always 0 here.
    #[cfg_attr(feature = "serde", serde(default))]
    pub seconds: f64,
}

/// `2bn/(b+n)`, or 0 when both are 0.
pub fn harmonic_mean(b: f64, n: f64) -> f64 {
    if b + n > 0.0 {
        2.0 * b * n / (b + n)
    } else {
        0.0
    }
}

/// Mean of per-world harmonic means.
pub fn mean_harmonic_mean(reports: &[EvalReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.harmonic_mean).sum::<f64>() / reports.len() as f64
}

/// Anything that produces image and prompt features.
pub trait FeatureEncoder {
    fn image_features(&self, images: &[Tensor]) -> Result<Tensor>;
    fn text_features(&self, prompts: &[Vec<usize>]) -> Result<Tensor>;
    fn temperature(&self) -> f64;
}

impl FeatureEncoder for DualEncoderModel {
    fn image_features(&self, images: &[Tensor]) -> Result<Tensor> {
        self.encode_images(images)
    }

    fn text_features(&self, prompts: &[Vec<usize>]) -> Result<Tensor> {
        self.encode_texts(prompts)
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }
}

impl FeatureEncoder for AdaptedModel {
    fn image_features(&self, images: &[Tensor]) -> Result<Tensor> {
        self.encode_images(images)
    }

    fn text_features(&self, prompts: &[Vec<usize>]) -> Result<Tensor> {
        self.encode_texts(prompts)
    }

    fn temperature(&self) -> f64 {
        self.backbone.config.temperature
    }
}

/// Percentage of `pool` whose top zero-shot class among `classes` is its own.
pub fn accuracy<E: FeatureEncoder + ?Sized>(
    model: &E,
    pool: &[Sample],
    classes: &[usize],
    prompts: &ClassPromptSet,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Config(String::from("empty evaluation pool")));
    }
    let images: Vec<Tensor> = pool.iter().map(|s| s.image.clone()).collect();
    let x = model.image_features(&images)?;
    let w = model.text_features(prompts.prompts())?;
    let mut correct = 0usize;
    for (i, s) in pool.iter().enumerate() {
        let xi = Tensor::vector(x.row(i).to_vec());
        let logits = zero_shot_logits(&xi, &w, model.temperature())?;
        if classes.get(argmax(logits.data())) == Some(&s.class) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / pool.len() as f64)
}

/// Base pool against base prompts, novel pool against novel prompts.
pub fn evaluate<E: FeatureEncoder + ?Sized>(model: &E, task: &FewShotTask) -> Result<EvalReport> {
    let base = accuracy(
        model,
        &task.base_eval,
        &task.base_classes,
        &task.base_prompts,
    )?;
    let novel = accuracy(
        model,
        &task.novel_eval,
        &task.novel_classes,
        &task.novel_prompts,
    )?;
    Ok(EvalReport {
        base_accuracy: base,
        novel_accuracy: novel,
        harmonic_mean: harmonic_mean(base, novel),
        ..Default::default()
    })
}

/// Frozen zero-shot evaluation that fails unless novel accuracy beats chance.
pub fn validate_world(backbone: &DualEncoderModel, task: &FewShotTask) -> Result<EvalReport> {
    let report = evaluate(backbone, task)?;
    let chance = 100.0 / task.novel_classes.len() as f64;
    if report.novel_accuracy <= chance {
        return Err(Error::Config(format!(
            "frozen novel accuracy {:.2}% is not above chance {:.2}%",
            report.novel_accuracy, chance
        )));
    }
    Ok(report)
}

/// Trains the adapters of `model` on the base-class shots of `task`.
///
/// The backbone is never handed to the optimizer. Layers below the first
/// adapted layer are frozen and pure, so their outputs and the frozen
/// features are computed once per sample up front.
pub fn train_adapters(
    model: &mut AdaptedModel,
    task: &FewShotTask,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    train_adapters_with(model, task, cfg, |_, _, _| {})
}

/// [`train_adapters`], calling `on_step(step, losses, lr)` after every update.
pub fn train_adapters_with(
    model: &mut AdaptedModel,
    task: &FewShotTask,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown, f64),
) -> Result<TrainTrace> {
    cfg.validate()?;
    if !model.backbone.frozen {
        return Err(Error::Config(String::from("backbone must be frozen")));
    }
    if task.train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch size {} exceeds the training pool of {}",
            cfg.batch_size,
            task.train.len()
        )));
    }
    let labels: Vec<usize> = task
        .train
        .iter()
        .map(|s| {
            task.base_label(s.class).ok_or(Error::IndexOutOfRange {
                what: "training class",
                index: s.class,
                limit: task.base_classes.len(),
            })
        })
        .collect::<Result<_>>()?;

    let k = model.placement.first_layer;
    let images: Vec<Tensor> = task.train.iter().map(|s| s.image.clone()).collect();
    let vision = FrozenPass::images(&model.backbone, &images, k)?;
    let prompts = task.base_prompts.prompts().to_vec();
    let text = FrozenPass::texts(&model.backbone, &prompts, k)?;
    let all_classes: Vec<usize> = (0..prompts.len()).collect();
    let text_start = text.stack(&all_classes)?;

    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(
        adam,
        model.named_adapter_tensors().into_iter().map(|(_, t)| t),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = TrainTrace::default();

    for step in 0..cfg.steps {
        let mut idx = sample(&mut rng, task.train.len(), cfg.batch_size).into_vec();
        idx.sort_unstable();
        let inputs = ObjectiveInputs {
            vision_start: vision.stack(&idx)?,
            labels: idx.iter().map(|&i| labels[i]).collect(),
            text_start: text_start.clone(),
            prompts: prompts.clone(),
            frozen_image: vision.feature_rows(&idx)?,
            frozen_text: text.features.clone(),
        };
        trace
            .seen_classes
            .extend(idx.iter().map(|&i| task.train[i].class));
        trace.seen_classes.extend(task.base_classes.iter().copied());

        let (breakdown, grads) = {
            let mut tape = Tape::new();
            let ad = model.bind_adapters(&mut tape, true);
            let o = objective(&mut tape, model, &ad, &inputs, &cfg.weights)?;
            let b = o.breakdown(&tape);
            if let Some(component) = b.non_finite_component() {
                return Err(Error::NonFinite { component, step });
            }
            let g = tape.backward(o.total)?;
            let grads: Vec<Tensor> = ad.flat().iter().map(|v| g.wrt(&tape, *v)).collect();
            (b, grads)
        };
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        opt.step(&mut model.adapter_tensors_mut(), &grads, lr);
        on_step(step, &breakdown, lr);
        trace.losses.push(breakdown);
        trace.learning_rates.push(lr);
    }
    Ok(trace)
}

/// Attaches adapters per `cfg` to a copy of `backbone`, trains them, and evaluates.
pub fn adapt(
    backbone: &DualEncoderModel,
    task: &FewShotTask,
    cfg: &TrainConfig,
) -> Result<(AdaptedModel, TrainTrace, EvalReport)> {
    let mut model = attach(
        backbone.clone(),
        cfg.placement.clone(),
        cfg.mode,
        cfg.depth,
        cfg.seed,
    )?;
    let trace = train_adapters(&mut model, task, cfg)?;
    let mut report = evaluate(&model, task)?;
    report.trace = trace.losses.clone();
    report.added_parameters = model.added_parameters();
    Ok((model, trace, report))
}

/// Loss-term toggles of the branch ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Variant {
    /// Adaptation branch only.
    BaseOnly,
    /// Plus consistency.
    Constraints,
    /// Plus consistency and text reconstruction.
    TextRec,
    /// Plus consistency and vision reconstruction.
    VisionRec,
    /// Every term.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Self::BaseOnly,
        Self::Constraints,
        Self::TextRec,
        Self::VisionRec,
        Self::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BaseOnly => "base-only",
            Self::Constraints => "constraints",
            Self::TextRec => "text-rec",
            Self::VisionRec => "vision-rec",
            Self::Full => "full",
        }
    }

    /// Zeroes the terms this variant switches off.
    pub fn weights(self, full: &LossWeights) -> LossWeights {
        let (rv, rt, con) = match self {
            Self::BaseOnly => (false, false, false),
            Self::Constraints => (false, false, true),
            Self::TextRec => (false, true, true),
            Self::VisionRec => (true, false, true),
            Self::Full => (true, true, true),
        };
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        LossWeights {
            rec_vision: on(rv, full.rec_vision),
            rec_text: on(rt, full.rec_text),
            con_vision: on(con, full.con_vision),
            con_text: on(con, full.con_text),
        }
    }
}

/// One architecture/objective configuration of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellKey {
    pub variant: Variant,
    pub mode: SharingMode,
    pub depth: RecDepth,
}

/// Configurations crossed with seeds.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationMatrix {
    pub cells: Vec<CellKey>,
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    /// Every variant × mode × depth.
    pub fn full_product(seeds: Vec<u64>) -> Self {
        let mut cells = Vec::new();
        for variant in Variant::ALL {
            for mode in SharingMode::ALL {
                for depth in RecDepth::ALL {
                    cells.push(CellKey {
                        variant,
                        mode,
                        depth,
                    });
                }
            }
        }
        Self { cells, seeds }
    }

    /// Every variant at shared-down depth 2, plus the full model swept over
    /// sharing mode and over depth.
    pub fn standard(seeds: Vec<u64>) -> Self {
        let canonical = |variant| CellKey {
            variant,
            mode: SharingMode::SharedDown,
            depth: RecDepth::TWO,
        };
        let mut cells: Vec<CellKey> = Variant::ALL.into_iter().map(canonical).collect();
        for mode in [SharingMode::SharedUp, SharingMode::Independent] {
            cells.push(CellKey {
                mode,
                ..canonical(Variant::Full)
            });
        }
        for depth in [RecDepth::ONE, RecDepth::THREE] {
            cells.push(CellKey {
                depth,
                ..canonical(Variant::Full)
            });
        }
        Self { cells, seeds }
    }

    pub fn len(&self) -> usize {
        self.cells.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationRun {
    pub key: CellKey,
    pub seed: u64,
    pub report: EvalReport,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: libm::sqrt(var),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationSummary {
    pub key: CellKey,
    pub base: MeanStd,
    pub novel: MeanStd,
    pub harmonic_mean: MeanStd,
    pub added_parameters: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationTable {
    /// Sorted by cell key, then seed.
    pub runs: Vec<AblationRun>,
    /// One row per cell key, sorted.
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn from_runs(mut runs: Vec<AblationRun>) -> Self {
        runs.sort_by(|a, b| a.key.cmp(&b.key).then(a.seed.cmp(&b.seed)));
        let mut summary = Vec::new();
        let mut i = 0;
        while i < runs.len() {
            let key = runs[i].key;
            let group: Vec<&AblationRun> = runs[i..].iter().take_while(|r| r.key == key).collect();
            let pick = |f: fn(&EvalReport) -> f64| -> Vec<f64> {
                group.iter().map(|r| f(&r.report)).collect()
            };
            summary.push(AblationSummary {
                key,
                base: MeanStd::of(&pick(|r| r.base_accuracy)),
                novel: MeanStd::of(&pick(|r| r.novel_accuracy)),
                harmonic_mean: MeanStd::of(&pick(|r| r.harmonic_mean)),
                added_parameters: group[0].report.added_parameters,
            });
            i += group.len();
        }
        Self { runs, summary }
    }

    pub fn summary_for(&self, key: &CellKey) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.key == *key)
    }
}

/// The training config of one cell: `base` with the cell's variant, mode, depth and seed.
pub fn cell_config(base: &TrainConfig, key: &CellKey, seed: u64) -> TrainConfig {
    TrainConfig {
        weights: key.variant.weights(&base.weights),
        mode: key.mode,
        depth: key.depth,
        seed,
        ..base.clone()
    }
}

/// Trains and evaluates every cell of `matrix`, one model per cell.
///
/// `on_run` sees each finished run, e.g. to fill in wall-clock time or log progress.
pub fn ablate(
    backbone: &DualEncoderModel,
    task: &FewShotTask,
    base: &TrainConfig,
    matrix: &AblationMatrix,
    mut on_run: impl FnMut(&mut AblationRun),
) -> Result<AblationTable> {
    let mut runs = Vec::with_capacity(matrix.len());
    for key in &matrix.cells {
        for &seed in &matrix.seeds {
            let cfg = cell_config(base, key, seed);
            let (_, _, report) = adapt(backbone, task, &cfg)?;
            let mut run = AblationRun {
                key: *key,
                seed,
                report,
            };
            on_run(&mut run);
            runs.push(run);
        }
    }
    Ok(AblationTable::from_runs(runs))
}

/// Evaluates `model` on the tasks of other worlds without further training.
pub fn cross_world<E: FeatureEncoder + ?Sized>(
    model: &E,
    tasks: &[FewShotTask],
) -> Result<Vec<EvalReport>> {
    tasks.iter().map(|t| evaluate(model, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
        assert_eq!(harmonic_mean(100.0, 100.0), 100.0);
        for x in [1.0, 33.3, 77.7] {
            assert!((harmonic_mean(x, x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_weights() {
        let w = LossWeights::default();
        assert_eq!(Variant::BaseOnly.weights(&w), LossWeights::BASE_ONLY);
        assert_eq!(Variant::Full.weights(&w), w);
        let t = Variant::TextRec.weights(&w);
        assert_eq!((t.rec_vision, t.rec_text), (0.0, w.rec_text));
    }

    #[test]
    fn matrix_sizes() {
        assert_eq!(AblationMatrix::full_product(alloc::vec![0, 1]).len(), 90);
        let p = AblationMatrix::standard(alloc::vec![0, 1, 2, 3, 4]);
        assert_eq!(p.cells.len(), 9);
        assert_eq!(p.len(), 45);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[]), MeanStd::default());
    }

    fn dummy(key: CellKey, seed: u64, hm: f64) -> AblationRun {
        AblationRun {
            key,
            seed,
            report: EvalReport {
                harmonic_mean: hm,
                ..Default::default()
            },
        }
    }

    #[test]
    fn table_sorted_and_grouped() {
        let a = CellKey {
            variant: Variant::Full,
            mode: SharingMode::SharedDown,
            depth: RecDepth::TWO,
        };
        let b = CellKey {
            variant: Variant::BaseOnly,
            ..a
        };
        let t = AblationTable::from_runs(alloc::vec![
            dummy(a, 1, 4.0),
            dummy(b, 0, 1.0),
            dummy(a, 0, 2.0)
        ]);
        assert_eq!(t.runs.len(), 3);
        assert_eq!(t.runs[0].key, b);
        assert_eq!(t.summary.len(), 2);
        assert_eq!(t.summary_for(&a).unwrap().harmonic_mean.mean, 3.0);
    }
}
