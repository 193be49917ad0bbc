//! Training losses: supervised classification, consistency to frozen
//! features, layer-local reconstruction, and their weighted total.

use alloc::format;
use alloc::vec::Vec;

use crate::adapter::{AdaptedModel, AdaptedVars};
use crate::autodiff::{Tape, Var};
use crate::encoder::{
    cosine_logits, run_tower, BackboneVars, DualEncoderModel, Tower, ENCODE_CHUNK,
};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradCheckOptions, GradReport};
use crate::tensor::Tensor;

/// Reconstruction (`λ1`, `λ2`) and consistency (`λ3`, `λ4`) weights.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub rec_vision: f64,
    pub rec_text: f64,
    pub con_vision: f64,
    pub con_text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec_vision: 0.1,
            rec_text: 0.1,
            con_vision: 1.0,
            con_text: 1.0,
        }
    }
}

impl LossWeights {
    /// Adaptation branch only: no reconstruction and no consistency terms.
    pub const BASE_ONLY: LossWeights = LossWeights {
        rec_vision: 0.0,
        rec_text: 0.0,
        con_vision: 0.0,
        con_text: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rec_vision,
            self.rec_text,
            self.con_vision,
            self.con_text,
        ];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )))
        }
    }
}

/// One step's loss values. `rec_vision` and `rec_text` are unweighted sums
/// over adapted layers; `con` already carries `λ3`, `λ4`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub ce: f64,
    pub rec_vision: f64,
    pub rec_text: f64,
    pub con: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is computed exactly as the training tape does.
    pub fn new(ce: f64, con: f64, rec_vision: f64, rec_text: f64, w: &LossWeights) -> Self {
        let mut b = Self {
            ce,
            rec_vision,
            rec_text,
            con,
            total: 0.0,
        };
        b.total = b.component_sum(w);
        b
    }

    /// `ce + con + λ1·rec_vision + λ2·rec_text`, in the training tape's order.
    pub fn component_sum(&self, w: &LossWeights) -> f64 {
        self.ce + self.con + w.rec_vision * self.rec_vision + w.rec_text * self.rec_text
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ce,
            self.rec_vision,
            self.rec_text,
            self.con,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite component.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("ce", self.ce),
            ("rec_vision", self.rec_vision),
            ("rec_text", self.rec_text),
            ("con", self.con),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Mean cross-entropy of cosine logits `cos(x^a_b, w^a_c)/τ`.
pub fn supervised_loss_var(
    tape: &mut Tape<'_>,
    image_feats: Var,
    class_feats: Var,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let logits = cosine_logits(tape, image_feats, class_feats, temperature)?;
    tape.cross_entropy(logits, labels)
}

pub fn supervised_loss(
    image_feats: &Tensor,
    class_feats: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(image_feats);
    let w = tape.constant(class_feats);
    let l = supervised_loss_var(&mut tape, x, w, labels, temperature)?;
    Ok(tape.value(l).item())
}

/// `λ3·l1(x^a, x)/B + λ4·l1(w^a, w)/C`; the frozen features are detached.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss_var(
    tape: &mut Tape<'_>,
    adapted_image: Var,
    frozen_image: Var,
    adapted_text: Var,
    frozen_text: Var,
    con_vision: f64,
    con_text: f64,
) -> Result<Var> {
    let b = tape.value(adapted_image).rows().max(1) as f64;
    let c = tape.value(adapted_text).rows().max(1) as f64;
    let xf = tape.detach(frozen_image);
    let wf = tape.detach(frozen_text);
    let lx = tape.l1(adapted_image, xf)?;
    let lx = tape.scale(lx, con_vision / b);
    let lw = tape.l1(adapted_text, wf)?;
    let lw = tape.scale(lw, con_text / c);
    tape.add(lx, lw)
}

pub fn consistency_loss(
    adapted_image: &Tensor,
    frozen_image: &Tensor,
    adapted_text: &Tensor,
    frozen_text: &Tensor,
    con_vision: f64,
    con_text: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xa = tape.constant(adapted_image);
    let x = tape.constant(frozen_image);
    let wa = tape.constant(adapted_text);
    let w = tape.constant(frozen_text);
    let l = consistency_loss_var(&mut tape, xa, x, wa, w, con_vision, con_text)?;
    Ok(tape.value(l).item())
}

/// `λ1·Σ L_rec_V(i) + λ2·Σ L_rec_T(i)`; each list must hold one value per adapted layer.
pub fn reconstruction_total(
    vision: &[f64],
    text: &[f64],
    expected: (usize, usize),
    rec_vision: f64,
    rec_text: f64,
) -> Result<f64> {
    if vision.len() != expected.0 || text.len() != expected.1 {
        return Err(Error::Config(format!(
            "reconstruction losses cover ({}, {}) layers, placement has ({}, {})",
            vision.len(),
            text.len(),
            expected.0,
            expected.1
        )));
    }
    let sv: f64 = vision.iter().sum();
    let st: f64 = text.iter().sum();
    Ok(rec_vision * sv + rec_text * st)
}

fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    match vars.split_first() {
        None => Ok(tape.constant_owned(Tensor::scalar(0.0))),
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &v| tape.add(acc, v)),
    }
}

/// Frozen layer-`start` inputs (one `L×d` tensor per sample) and final features.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenPass {
    pub starts: Vec<Tensor>,
    pub features: Tensor,
}

impl FrozenPass {
    pub fn images(model: &DualEncoderModel, images: &[Tensor], start: usize) -> Result<Self> {
        Self::run(
            model,
            Tower::Vision,
            start,
            images.len(),
            |tape, vars, lo, hi| vars.vision_input(tape, model, &images[lo..hi]),
            |tape, vars, h, lo, hi| vars.image_head(tape, h, hi - lo),
        )
    }

    pub fn texts(model: &DualEncoderModel, prompts: &[Vec<usize>], start: usize) -> Result<Self> {
        Self::run(
            model,
            Tower::Text,
            start,
            prompts.len(),
            |tape, vars, lo, hi| vars.text_input(tape, &prompts[lo..hi]),
            |tape, vars, h, lo, hi| vars.text_head(tape, h, &prompts[lo..hi]),
        )
    }

    fn run<'m, I, H>(
        model: &'m DualEncoderModel,
        tower: Tower,
        start: usize,
        n: usize,
        input: I,
        head: H,
    ) -> Result<Self>
    where
        I: Fn(&mut Tape<'m>, &BackboneVars, usize, usize) -> Result<Var>,
        H: Fn(&mut Tape<'m>, &BackboneVars, Var, usize, usize) -> Result<Var>,
    {
        if start < 1 || start > model.config.layers {
            return Err(Error::IndexOutOfRange {
                what: "start layer",
                index: start,
                limit: model.config.layers + 1,
            });
        }
        let seq = model.geometry(tower).seq_len;
        let mut starts = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * model.config.latent_width);
        let mut lo = 0;
        while lo < n {
            let hi = (lo + ENCODE_CHUNK).min(n);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let x0 = input(&mut tape, &vars, lo, hi)?;
            let geom = model.geometry(tower);
            let (hidden, inputs) =
                run_tower(&mut tape, vars.blocks(tower), 1, x0, geom, |_, _, _, o| {
                    Ok(o)
                })?;
            let f = head(&mut tape, &vars, hidden, lo, hi)?;
            feats.extend_from_slice(tape.value(f).data());
            let s = tape.value(inputs[start - 1]);
            let width = s.cols();
            for chunk in s.data().chunks(seq * width) {
                starts.push(Tensor::new(&[seq, width], chunk.to_vec())?);
            }
            lo = hi;
        }
        Ok(Self {
            starts,
            features: Tensor::new(&[n, model.config.latent_width], feats)?,
        })
    }

    /// Stacks the layer inputs of `idx` into one `(|idx|·L)×d` matrix.
    pub fn stack(&self, idx: &[usize]) -> Result<Tensor> {
        let first = self.starts.first().ok_or(Error::IndexOutOfRange {
            what: "frozen sample",
            index: 0,
            limit: 0,
        })?;
        let (l, d) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(idx.len() * l * d);
        for &i in idx {
            let t = self.starts.get(i).ok_or(Error::IndexOutOfRange {
                what: "frozen sample",
                index: i,
                limit: self.starts.len(),
            })?;
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[idx.len() * l, d], data)
    }

    /// Feature rows of `idx`.
    pub fn feature_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.features.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "frozen sample",
                    index: i,
                    limit: self.features.rows(),
                });
            }
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(&[idx.len(), d], data)
    }
}

/// Everything one training step reads besides the adapter parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveInputs {
    /// Stacked frozen inputs of the first adapted vision layer.
    pub vision_start: Tensor,
    pub labels: Vec<usize>,
    /// Stacked frozen inputs of the first adapted text layer, one sequence per class.
    pub text_start: Tensor,
    pub prompts: Vec<Vec<usize>>,
    pub frozen_image: Tensor,
    pub frozen_text: Tensor,
}

impl ObjectiveInputs {
    /// Runs the frozen model on a batch directly, without caching.
    pub fn prepare(
        model: &AdaptedModel,
        images: &[Tensor],
        labels: &[usize],
        prompts: &[Vec<usize>],
    ) -> Result<Self> {
        let k = model.placement.first_layer;
        let v = FrozenPass::images(&model.backbone, images, k)?;
        let t = FrozenPass::texts(&model.backbone, prompts, k)?;
        let all_img: Vec<usize> = (0..images.len()).collect();
        let all_txt: Vec<usize> = (0..prompts.len()).collect();
        Ok(Self {
            vision_start: v.stack(&all_img)?,
            labels: labels.to_vec(),
            text_start: t.stack(&all_txt)?,
            prompts: prompts.to_vec(),
            frozen_image: v.features,
            frozen_text: t.features,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub ce: Var,
    pub con: Var,
    pub rec_vision: Var,
    pub rec_text: Var,
}

impl ObjectiveVars {
    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        LossBreakdown {
            ce: tape.value(self.ce).item(),
            rec_vision: tape.value(self.rec_vision).item(),
            rec_text: tape.value(self.rec_text).item(),
            con: tape.value(self.con).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Builds the full training objective for one batch on `tape`.
///
/// Layers below the first adapted layer are frozen and already applied in
/// `inputs`; only layers `k..=K` run here.
pub fn objective<'a>(
    tape: &mut Tape<'a>,
    model: &'a AdaptedModel,
    adapters: &AdaptedVars,
    inputs: &'a ObjectiveInputs,
    weights: &LossWeights,
) -> Result<ObjectiveVars> {
    let k = model.placement.first_layer;
    let bb = model.backbone.bind(tape, false);
    let b = inputs.batch_size();

    let xv = tape.constant(&inputs.vision_start);
    let vis = model.tower_pass(tape, &bb, adapters, Tower::Vision, k, xv, true, |t, h| {
        bb.image_head(t, h, b)
    })?;
    let xt = tape.constant(&inputs.text_start);
    let prompts = &inputs.prompts;
    let txt = model.tower_pass(tape, &bb, adapters, Tower::Text, k, xt, true, |t, h| {
        bb.text_head(t, h, prompts)
    })?;

    let temperature = model.backbone.config.temperature;
    let ce = supervised_loss_var(
        tape,
        vis.features,
        txt.features,
        &inputs.labels,
        temperature,
    )?;
    let fx = tape.constant(&inputs.frozen_image);
    let fw = tape.constant(&inputs.frozen_text);
    let con = consistency_loss_var(
        tape,
        vis.features,
        fx,
        txt.features,
        fw,
        weights.con_vision,
        weights.con_text,
    )?;
    let rec_vision = sum_vars(tape, &vis.rec_losses)?;
    let rec_text = sum_vars(tape, &txt.rec_losses)?;

    let total = tape.add(ce, con)?;
    let rv = tape.scale(rec_vision, weights.rec_vision);
    let total = tape.add(total, rv)?;
    let rt = tape.scale(rec_text, weights.rec_text);
    let total = tape.add(total, rt)?;
    Ok(ObjectiveVars {
        total,
        ce,
        con,
        rec_vision,
        rec_text,
    })
}

/// Finite-difference check of the total objective over every adapter tensor.
pub fn gradcheck_objective(
    model: &AdaptedModel,
    inputs: &ObjectiveInputs,
    weights: &LossWeights,
    opts: GradCheckOptions,
) -> Result<GradReport> {
    let params: Vec<Tensor> = model
        .named_adapter_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    gradcheck(
        |tape, vars| {
            let ad = model.vars_from_flat(vars)?;
            Ok(objective(tape, model, &ad, inputs, weights)?.total)
        },
        &params,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identical_class_embeds_give_ln_c() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]).unwrap();
        let w = Tensor::from_rows(&vec![vec![0.3, 0.1, 0.2]; 4]).unwrap();
        let l = supervised_loss(&x, &w, &[0, 3], 0.07).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-12, "{l}");
    }

    #[test]
    fn saturated_supervised_loss() {
        let x = Tensor::from_rows(&[vec![0.0, 2.0, 0.0]]).unwrap();
        let w = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!(supervised_loss(&x, &w, &[1], 0.01).unwrap() < 1e-3);
        assert!(supervised_loss(&x, &w, &[3], 0.01).is_err());
        assert!(supervised_loss(&x, &w, &[1], 0.0).is_err());
    }

    #[test]
    fn consistency_zero_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 2.0], vec![3.0, -4.0]]).unwrap();
        assert_eq!(consistency_loss(&a, &a, &b, &b, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &b, &b, &a, 0.0, 0.0).unwrap(), 0.0);
        // l1(a, b) = 1 + 8 over 2 rows, twice
        assert_eq!(
            consistency_loss(&a, &b, &a, &b, 1.0, 2.0).unwrap(),
            4.5 + 9.0
        );
    }

    #[test]
    fn reconstruction_arithmetic() {
        assert_eq!(
            reconstruction_total(&[0.5, 0.25], &[], (2, 0), 2.0, 0.0).unwrap(),
            1.5
        );
        assert_eq!(
            reconstruction_total(&[0.5, 0.25], &[1.0, 1.0], (2, 2), 0.0, 0.0).unwrap(),
            0.0
        );
        assert_eq!(
            reconstruction_total(&[0.0], &[0.0], (1, 1), 1.0, 1.0).unwrap(),
            0.0
        );
        assert!(reconstruction_total(&[0.5], &[], (2, 0), 1.0, 1.0).is_err());
    }

    #[test]
    fn breakdown_total() {
        let w = LossWeights {
            rec_vision: 1.0,
            rec_text: 1.0,
            ..Default::default()
        };
        let b = LossBreakdown::new(1.0, 0.5, 0.25, 0.0, &w);
        assert_eq!(b.total, 1.75);
        assert!(b.non_finite_component().is_none());
        let bad = LossBreakdown::new(1.0, f64::NAN, 0.0, 0.0, &w);
        assert_eq!(bad.non_finite_component(), Some("con"));
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            con_text: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
