//! Pretraining, adapter training and evaluation on a small synthetic world.

use std::sync::OnceLock;

use rmadapter_core::fewshot::{cross_world, mean_harmonic_mean, AblationMatrix, CellKey, MeanStd};
use rmadapter_core::{
    ablate, adapt, attach, contrastive_pretrain, evaluate, generate_world, harmonic_mean,
    train_adapters, validate_world, AdapterPlacement, DualEncoderModel, EncoderConfig, Error,
    FewShotTask, PretrainConfig, RecDepth, SharingMode, SyntheticWorld, Tensor, TrainConfig,
    Variant, WorldConfig,
};

struct Fixture {
    world: SyntheticWorld,
    task: FewShotTask,
    backbone: DualEncoderModel,
    losses: Vec<f64>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let enc = EncoderConfig::default();
        let (world, task) = generate_world(0, &WorldConfig::default(), &enc).unwrap();
        let mut backbone = DualEncoderModel::new(enc, 0).unwrap();
        let cfg = PretrainConfig {
            steps: 150,
            ..Default::default()
        };
        let losses =
            contrastive_pretrain(&mut backbone, &world.pretraining_pairs().unwrap(), &cfg).unwrap();
        Fixture {
            world,
            task,
            backbone,
            losses,
        }
    })
}

fn short(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 40,
        seed,
        ..Default::default()
    }
}

#[test]
fn pretraining_learns_and_beats_chance_on_novel_classes() {
    let f = fixture();
    let head: f64 = f.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = f.losses[f.losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{tail} !< {head}");
    assert!(f.losses.last() < f.losses.first());
    assert!(f.backbone.frozen);
    let report = validate_world(&f.backbone, &f.task).unwrap();
    assert!(report.novel_accuracy > 100.0 / f.task.novel_classes.len() as f64);
}

#[test]
fn pretraining_preconditions() {
    let f = fixture();
    let pairs = f.world.pretraining_pairs().unwrap();
    let mut frozen = f.backbone.clone();
    assert!(matches!(
        contrastive_pretrain(&mut frozen, &pairs, &PretrainConfig::default()),
        Err(Error::Config(_))
    ));
    let mut fresh = DualEncoderModel::new(EncoderConfig::default(), 1).unwrap();
    let tiny = PretrainConfig {
        batch_size: 1,
        ..Default::default()
    };
    assert!(contrastive_pretrain(&mut fresh, &pairs, &tiny).is_err());
}

#[test]
fn adapting_leaves_the_backbone_untouched() {
    let f = fixture();
    let before = f.backbone.fingerprint();
    let (model, _, _) = adapt(&f.backbone, &f.task, &short(0)).unwrap();
    assert_eq!(model.backbone, f.backbone);
    assert_eq!(model.backbone.fingerprint(), before);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let f = fixture();
    let cfg = TrainConfig {
        steps: 3,
        lr: 0.0,
        batch_size: f.task.train.len(),
        ..Default::default()
    };
    let mut model = attach(
        f.backbone.clone(),
        cfg.placement.clone(),
        cfg.mode,
        cfg.depth,
        0,
    )
    .unwrap();
    let start = model.clone();
    let trace = train_adapters(&mut model, &f.task, &cfg).unwrap();
    assert_eq!(model, start);
    assert!(trace.losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn default_training_lowers_the_total_loss() {
    let f = fixture();
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let (_, trace, _) = adapt(&f.backbone, &f.task, &cfg).unwrap();
        let first = trace.losses.first().unwrap().total;
        let last = trace.losses.last().unwrap().total;
        assert!(last < first, "seed {seed}: {last} !< {first}");
        assert_eq!(trace.learning_rates.len(), cfg.steps);
        assert!(trace.learning_rates[0] > *trace.learning_rates.last().unwrap());
    }
}

#[test]
fn training_sees_only_base_classes() {
    let f = fixture();
    let (_, trace, _) = adapt(&f.backbone, &f.task, &short(1)).unwrap();
    assert!(!trace.seen_classes.is_empty());
    for c in &trace.seen_classes {
        assert!(f.task.base_classes.contains(c));
        assert!(!f.task.novel_classes.contains(c));
    }
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let f = fixture();
    let (m1, t1, mut r1) = adapt(&f.backbone, &f.task, &short(2)).unwrap();
    let (m2, t2, mut r2) = adapt(&f.backbone, &f.task, &short(2)).unwrap();
    r1.seconds = 0.0;
    r2.seconds = 0.0;
    assert_eq!(m1, m2);
    assert_eq!(t1, t2);
    assert_eq!(r1, r2);
}

#[test]
fn zero_alpha_matches_the_frozen_baseline() {
    let f = fixture();
    let placement = AdapterPlacement {
        alpha: 0.0,
        ..Default::default()
    };
    let cfg = TrainConfig {
        placement,
        ..short(3)
    };
    let (model, _, report) = adapt(&f.backbone, &f.task, &cfg).unwrap();
    let frozen = evaluate(&f.backbone, &f.task).unwrap();
    assert_eq!(report.base_accuracy, frozen.base_accuracy);
    assert_eq!(report.novel_accuracy, frozen.novel_accuracy);
    assert_eq!(
        evaluate(&model, &f.task).unwrap().harmonic_mean,
        frozen.harmonic_mean
    );
}

#[test]
fn every_logged_step_is_additive() {
    let f = fixture();
    let cfg = short(4);
    let (_, trace, report) = adapt(&f.backbone, &f.task, &cfg).unwrap();
    assert_eq!(report.trace, trace.losses);
    for b in &trace.losses {
        assert!((b.total - b.component_sum(&cfg.weights)).abs() <= 1e-12);
        assert!(b.ce >= 0.0 && b.con >= 0.0 && b.rec_vision >= 0.0 && b.rec_text >= 0.0);
    }
}

#[test]
fn non_finite_loss_names_its_component() {
    let f = fixture();
    let cfg = short(0);
    let mut model = attach(
        f.backbone.clone(),
        cfg.placement.clone(),
        cfg.mode,
        cfg.depth,
        0,
    )
    .unwrap();
    model.vision[0].down_weight = Tensor::full(model.vision[0].down_weight.shape(), f64::NAN);
    match train_adapters(&mut model, &f.task, &cfg) {
        Err(Error::NonFinite { component, step }) => {
            assert_eq!(step, 0);
            assert!(!component.is_empty());
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn bad_train_configs_rejected() {
    let f = fixture();
    for cfg in [
        TrainConfig {
            steps: 0,
            ..short(0)
        },
        TrainConfig {
            batch_size: 1,
            ..short(0)
        },
        TrainConfig {
            lr: f64::NAN,
            ..short(0)
        },
    ] {
        assert!(matches!(
            adapt(&f.backbone, &f.task, &cfg),
            Err(Error::Config(_))
        ));
    }
    let mut empty = f.task.clone();
    empty.novel_eval.clear();
    assert!(evaluate(&f.backbone, &empty).is_err());
}

#[test]
fn ablation_yields_one_report_per_cell_and_seed() {
    let f = fixture();
    let matrix = AblationMatrix {
        cells: vec![
            CellKey {
                variant: Variant::BaseOnly,
                mode: SharingMode::SharedDown,
                depth: RecDepth::TWO,
            },
            CellKey {
                variant: Variant::Full,
                mode: SharingMode::Independent,
                depth: RecDepth::ONE,
            },
        ],
        seeds: vec![0, 1],
    };
    let base = TrainConfig {
        steps: 10,
        ..Default::default()
    };
    let mut seen = 0;
    let table = ablate(&f.backbone, &f.task, &base, &matrix, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(table.runs.len(), 4);
    assert_eq!(table.summary.len(), 2);
    for s in &table.summary {
        let hms: Vec<f64> = table
            .runs
            .iter()
            .filter(|r| r.key == s.key)
            .map(|r| r.report.harmonic_mean)
            .collect();
        assert_eq!(s.harmonic_mean, MeanStd::of(&hms));
    }
    let base_only = table.summary_for(&matrix.cells[0]).unwrap();
    let full = table.summary_for(&matrix.cells[1]).unwrap();
    assert!(full.added_parameters > base_only.added_parameters);
}

#[test]
fn cross_world_evaluation_reports_each_world() {
    let f = fixture();
    let (_, b) = f.world.sibling(11).unwrap();
    let (_, c) = f.world.sibling(12).unwrap();
    let (model, _, _) = adapt(&f.backbone, &f.task, &short(0)).unwrap();
    let reports = cross_world(&model, &[b, c]).unwrap();
    assert_eq!(reports.len(), 2);
    let mean = mean_harmonic_mean(&reports);
    assert!((mean - (reports[0].harmonic_mean + reports[1].harmonic_mean) / 2.0).abs() < 1e-12);
}

#[test]
fn harmonic_mean_reference_rows() {
    assert!((harmonic_mean(95.70, 98.10) - 96.89).abs() <= 0.05);
    assert!((harmonic_mean(77.87, 71.50) - 74.52).abs() <= 0.05);
    assert_eq!(harmonic_mean(100.0, 100.0), 100.0);
    // Averages are means of per-dataset values, not the value of averages.
    assert!((harmonic_mean(84.52, 77.36) - 80.78).abs() < 0.005);
}

#[test]
fn cached_frozen_inputs_match_direct_pass() {
    use rmadapter_core::objectives::{FrozenPass, ObjectiveInputs};
    let f = fixture();
    let model = attach(
        f.backbone.clone(),
        AdapterPlacement::default(),
        SharingMode::SharedDown,
        RecDepth::TWO,
        0,
    )
    .unwrap();
    let k = model.placement.first_layer;
    let images: Vec<Tensor> = f.task.train.iter().map(|s| s.image.clone()).collect();
    let cached = FrozenPass::images(&model.backbone, &images, k).unwrap();
    let prompts = f.task.base_prompts.prompts();
    let idx = [1, 5, 17, 40, 63];
    let subset: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
    let labels = vec![0; idx.len()];
    let direct = ObjectiveInputs::prepare(&model, &subset, &labels, prompts).unwrap();
    assert_eq!(cached.stack(&idx).unwrap(), direct.vision_start);
    assert_eq!(cached.feature_rows(&idx).unwrap(), direct.frozen_image);
}
