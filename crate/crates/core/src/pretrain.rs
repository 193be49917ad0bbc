//! Symmetric image–text contrastive training of the backbone.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{cosine_logits, run_tower, DualEncoderModel, Tower};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextPair {
    pub image: Tensor,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Mean of image→text and text→image cross-entropy over the batch similarity matrix.
pub fn symmetric_contrastive_loss(
    tape: &mut Tape<'_>,
    image_feats: Var,
    text_feats: Var,
    temperature: f64,
) -> Result<Var> {
    let b = tape.value(image_feats).rows();
    let labels: Vec<usize> = (0..b).collect();
    let s = cosine_logits(tape, image_feats, text_feats, temperature)?;
    let st = tape.transpose(s)?;
    let i2t = tape.cross_entropy(s, &labels)?;
    let t2i = tape.cross_entropy(st, &labels)?;
    let both = tape.add(i2t, t2i)?;
    Ok(tape.scale(both, 0.5))
}

/// Contrastive loss of one batch, with gradients for every backbone tensor.
fn batch_step(model: &DualEncoderModel, batch: &[&ImageTextPair]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let images: Vec<Tensor> = batch.iter().map(|p| p.image.clone()).collect();
    let prompts: Vec<Vec<usize>> = batch.iter().map(|p| p.tokens.clone()).collect();

    let x0 = vars.vision_input(&mut tape, model, &images)?;
    let (hv, _) = run_tower(
        &mut tape,
        &vars.vision_blocks,
        1,
        x0,
        model.geometry(Tower::Vision),
        |_, _, _, o| Ok(o),
    )?;
    let x = vars.image_head(&mut tape, hv, images.len())?;

    let w0 = vars.text_input(&mut tape, &prompts)?;
    let (ht, _) = run_tower(
        &mut tape,
        &vars.text_blocks,
        1,
        w0,
        model.geometry(Tower::Text),
        |_, _, _, o| Ok(o),
    )?;
    let w = vars.text_head(&mut tape, ht, &prompts)?;

    let loss = symmetric_contrastive_loss(&mut tape, x, w, model.config.temperature)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((
        value,
        vars.all.iter().map(|v| grads.wrt(&tape, *v)).collect(),
    ))
}

/// Trains every backbone parameter on `data`, then freezes the model.
///
/// Returns the per-step loss trace.
pub fn contrastive_pretrain(
    model: &mut DualEncoderModel,
    data: &[ImageTextPair],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    contrastive_pretrain_with(model, data, cfg, |_, _, _| {})
}

/// [`contrastive_pretrain`], calling `on_step(step, loss, lr)` after every update.
pub fn contrastive_pretrain_with(
    model: &mut DualEncoderModel,
    data: &[ImageTextPair],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64, f64),
) -> Result<Vec<f64>> {
    if model.frozen {
        return Err(Error::Config(String::from(
            "cannot pretrain a frozen backbone",
        )));
    }
    if cfg.batch_size < 2 || data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "contrastive batch needs >= 2 pairs (batch {}, data {})",
            cfg.batch_size,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(adam, model.named_tensors().into_iter().map(|(_, t)| t));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, data.len(), cfg.batch_size);
        let batch: Vec<&ImageTextPair> = idx.iter().map(|i| &data[i]).collect();
        let (loss, grads) = batch_step(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                component: "contrastive",
                step,
            });
        }
        losses.push(loss);
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        opt.step(&mut model.tensors_mut(), &grads, lr);
        on_step(step, loss, lr);
    }
    normalize_feature_scale(model, data)?;
    model.freeze();
    Ok(losses)
}

const SCALE_PROBE: usize = 256;

fn mean_row_norm(t: &Tensor) -> f64 {
    let c = t.cols();
    let rows = t.rows();
    let total: f64 = (0..rows)
        .map(|r| crate::tensor::norm(&t.data()[r * c..(r + 1) * c]))
        .sum();
    total / rows as f64
}

/// Rescales both projection heads so features have unit mean norm on a data
/// prefix. Cosine logits, and hence every prediction, are unchanged.
pub fn normalize_feature_scale(model: &mut DualEncoderModel, data: &[ImageTextPair]) -> Result<()> {
    let probe = &data[..data.len().min(SCALE_PROBE)];
    let images: Vec<Tensor> = probe.iter().map(|p| p.image.clone()).collect();
    let prompts: Vec<Vec<usize>> = probe.iter().map(|p| p.tokens.clone()).collect();
    let vn = mean_row_norm(&model.encode_images(&images)?);
    let tn = mean_row_norm(&model.encode_texts(&prompts)?);
    if !(vn.is_finite() && tn.is_finite() && vn > 0.0 && tn > 0.0) {
        return Err(Error::NonFinite {
            component: "feature scale",
            step: 0,
        });
    }
    model.image_proj = model.image_proj.map(|v| v / vn);
    model.text_proj = model.text_proj.map(|v| v / tn);
    Ok(())
}
