use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmadapter_core::encoder::EOS_TOKEN;
use rmadapter_core::objectives::{gradcheck_objective, objective, ObjectiveInputs};
use rmadapter_core::{
    attach, AdaptedModel, AdapterPlacement, DualEncoderModel, EncoderConfig, GradCheckOptions,
    GradReport, LossWeights, RecDepth, SharingMode, Tape, Tensor,
};

fn random_prompt(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Vec<usize> {
    let len = rng.random_range(2..cfg.seq_len);
    let mut p: Vec<usize> = (0..len).map(|_| rng.random_range(2..cfg.vocab)).collect();
    p.push(EOS_TOKEN);
    p.resize(cfg.seq_len, 0);
    p
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        layers: 3,
        vision_width: 16,
        text_width: 16,
        latent_width: 8,
        heads: 2,
        ..Default::default()
    }
}

/// Adapters moved away from the zero-initialized up-projection, where the
/// consistency term sits on the kink of the L1 distance.
fn perturbed(cfg: EncoderConfig, mode: SharingMode, depth: RecDepth, seed: u64) -> AdaptedModel {
    let backbone = DualEncoderModel::new(cfg.clone(), seed).unwrap();
    let placement = AdapterPlacement {
        rank: 4,
        ..AdapterPlacement::top_layers(cfg.layers, 2)
    };
    let mut model = attach(backbone, placement, mode, depth, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in model.adapter_tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    model
}

fn inputs(model: &AdaptedModel, seed: u64) -> ObjectiveInputs {
    let cfg = &model.backbone.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = (0..2)
        .map(|_| {
            let n = cfg.image_size * cfg.image_size * cfg.channels;
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(&[cfg.image_size, cfg.image_size, cfg.channels], data).unwrap()
        })
        .collect();
    let prompts: Vec<Vec<usize>> = (0..3).map(|_| random_prompt(&mut rng, cfg)).collect();
    ObjectiveInputs::prepare(model, &images, &[0, 2], &prompts).unwrap()
}

/// Relative error with an absolute allowance for entries whose finite
/// difference is dominated by rounding of the O(1) loss.
fn assert_close(report: &GradReport) {
    for e in &report.entries {
        let tol = 1e-4 * e.analytic.abs().max(e.numeric.abs()) + 1e-9;
        assert!((e.analytic - e.numeric).abs() <= tol, "{e:?}");
    }
}

#[test]
fn every_mode_and_depth_matches_finite_differences() {
    let opts = GradCheckOptions {
        max_elements: 400,
        ..Default::default()
    };
    for (i, mode) in SharingMode::ALL.into_iter().enumerate() {
        for (j, depth) in RecDepth::ALL.into_iter().enumerate() {
            let seed = (3 * i + j) as u64;
            let model = perturbed(small_config(), mode, depth, seed);
            let inp = inputs(&model, seed + 7);
            let report = gradcheck_objective(&model, &inp, &LossWeights::default(), opts).unwrap();
            assert_close(&report);
        }
    }
}

#[test]
fn single_terms_match_finite_differences() {
    let model = perturbed(small_config(), SharingMode::SharedDown, RecDepth::TWO, 42);
    let inp = inputs(&model, 1);
    let opts = GradCheckOptions {
        max_elements: 400,
        ..Default::default()
    };
    for w in [
        LossWeights::BASE_ONLY,
        LossWeights {
            rec_vision: 1.0,
            rec_text: 0.0,
            con_vision: 0.0,
            con_text: 0.0,
        },
        LossWeights {
            rec_vision: 0.0,
            rec_text: 0.0,
            con_vision: 0.0,
            con_text: 3.0,
        },
    ] {
        assert_close(&gradcheck_objective(&model, &inp, &w, opts).unwrap());
    }
}

#[test]
fn reconstruction_never_reaches_the_base_up_projection_under_shared_down() {
    let model = perturbed(small_config(), SharingMode::SharedDown, RecDepth::TWO, 5);
    let inp = inputs(&model, 2);
    let w = LossWeights {
        rec_vision: 1.0,
        rec_text: 1.0,
        con_vision: 0.0,
        con_text: 0.0,
    };
    let mut tape = Tape::new();
    let ad = model.bind_adapters(&mut tape, true);
    let o = objective(&mut tape, &model, &ad, &inp, &w).unwrap();
    let rec = tape.add(o.rec_vision, o.rec_text).unwrap();
    let g = tape.backward(rec).unwrap();
    for a in ad.vision.iter().chain(&ad.text) {
        for v in [a.base_up.0, a.base_up.1] {
            assert!(g.wrt(&tape, v).data().iter().all(|&x| x == 0.0));
        }
        assert!(g.wrt(&tape, a.down.0).max_abs() > 0.0);
    }
}

#[test]
fn tape_total_equals_logged_components() {
    let w = LossWeights {
        rec_vision: 0.37,
        rec_text: 1.3,
        con_vision: 0.7,
        con_text: 2.0,
    };
    for seed in 0..5 {
        let model = perturbed(
            small_config(),
            SharingMode::Independent,
            RecDepth::THREE,
            seed,
        );
        let inp = inputs(&model, seed);
        let mut tape = Tape::new();
        let ad = model.bind_adapters(&mut tape, false);
        let b = objective(&mut tape, &model, &ad, &inp, &w)
            .unwrap()
            .breakdown(&tape);
        assert_eq!(b.total, b.component_sum(&w));
        assert!(b.ce >= 0.0 && b.con >= 0.0 && b.rec_vision >= 0.0 && b.rec_text >= 0.0);
    }
}

#[test]
fn fresh_adapters_without_extra_terms_give_the_frozen_cross_entropy() {
    let cfg = small_config();
    let backbone = DualEncoderModel::new(cfg.clone(), 4).unwrap();
    let placement = AdapterPlacement {
        rank: 4,
        ..AdapterPlacement::top_layers(cfg.layers, 2)
    };
    let model = attach(
        backbone,
        placement,
        SharingMode::SharedDown,
        RecDepth::TWO,
        4,
    )
    .unwrap();
    let inp = inputs(&model, 5);
    let zero = LossWeights {
        rec_vision: 0.0,
        rec_text: 0.0,
        con_vision: 0.0,
        con_text: 0.0,
    };
    let mut tape = Tape::new();
    let ad = model.bind_adapters(&mut tape, true);
    let b = objective(&mut tape, &model, &ad, &inp, &zero)
        .unwrap()
        .breakdown(&tape);
    let frozen = rmadapter_core::objectives::supervised_loss(
        &inp.frozen_image,
        &inp.frozen_text,
        &inp.labels,
        cfg.temperature,
    )
    .unwrap();
    assert_eq!(b.total, b.ce);
    assert!((b.ce - frozen).abs() <= 1e-12, "{} vs {frozen}", b.ce);
}
