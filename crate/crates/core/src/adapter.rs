//! Dual-branch reconstruction adapters.
//!
//! Each adapted layer of each tower owns one [`AdapterParams`]. The
//! adaptation branch `σ(x·W_down + b_down)·W_up + b_up` is added to the
//! frozen block output with scale `α`. The reconstruction branch maps the
//! bottleneck code back to the layer-input space and is trained by a
//! squared-error loss against the gradient-detached layer input, so its
//! gradient stays inside the layer. Under [`SharingMode::SharedDown`] both
//! branches read the same down-projection.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{affine, block_forward, run_tower, BackboneVars, DualEncoderModel, Tower};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SharingMode {
    /// Both branches read one `W_down`, `b_down`.
    #[default]
    SharedDown,
    /// The reconstruction path has its own down-projection and ends in the
    /// adaptation branch's `W_up`, `b_up`.
    SharedUp,
    /// No storage shared between the branches.
    Independent,
}

impl SharingMode {
    pub const ALL: [SharingMode; 3] = [Self::SharedDown, Self::SharedUp, Self::Independent];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SharedDown => "shared-down",
            Self::SharedUp => "shared-up",
            Self::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    fn rec_owns_down(self) -> bool {
        !matches!(self, Self::SharedDown)
    }

    fn rec_owns_up(self) -> bool {
        !matches!(self, Self::SharedUp)
    }
}

/// Number of projection stages on the reconstruction up-path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "usize", into = "usize"))]
pub struct RecDepth(usize);

impl RecDepth {
    pub const ONE: RecDepth = RecDepth(1);
    pub const TWO: RecDepth = RecDepth(2);
    pub const THREE: RecDepth = RecDepth(3);
    pub const ALL: [RecDepth; 3] = [Self::ONE, Self::TWO, Self::THREE];

    pub fn new(layers: usize) -> Result<Self> {
        if (1..=3).contains(&layers) {
            Ok(Self(layers))
        } else {
            Err(Error::Config(format!(
                "reconstruction depth must be 1, 2 or 3, got {layers}"
            )))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for RecDepth {
    fn default() -> Self {
        Self::TWO
    }
}

impl TryFrom<usize> for RecDepth {
    type Error = Error;
    fn try_from(v: usize) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RecDepth> for usize {
    fn from(d: RecDepth) -> usize {
        d.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Branches {
    Vision,
    Text,
    #[default]
    Both,
}

impl Branches {
    pub fn includes(self, tower: Tower) -> bool {
        matches!(
            (self, tower),
            (Self::Both, _) | (Self::Vision, Tower::Vision) | (Self::Text, Tower::Text)
        )
    }

    pub fn towers(self) -> impl Iterator<Item = Tower> {
        [Tower::Vision, Tower::Text]
            .into_iter()
            .filter(move |t| self.includes(*t))
    }
}

/// Which layers carry adapters and how strongly they act.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdapterPlacement {
    /// First adapted layer, 1-based (k).
    pub first_layer: usize,
    /// Last adapted layer (K).
    pub last_layer: usize,
    pub branches: Branches,
    /// Residual scale of the adaptation branch.
    pub alpha: f64,
    /// Bottleneck width.
    pub rank: usize,
}

impl Default for AdapterPlacement {
    fn default() -> Self {
        Self::top_layers(4, 2)
    }
}

impl AdapterPlacement {
    /// The top `count` layers of a `layers`-deep model, both towers, default α and rank.
    pub fn top_layers(layers: usize, count: usize) -> Self {
        Self {
            first_layer: layers + 1 - count.min(layers),
            last_layer: layers,
            branches: Branches::Both,
            alpha: 0.1,
            rank: 8,
        }
    }

    pub fn adapted_layers(&self) -> core::ops::RangeInclusive<usize> {
        self.first_layer..=self.last_layer
    }

    pub fn layer_count(&self) -> usize {
        self.last_layer + 1 - self.first_layer
    }

    pub fn validate(&self, model_layers: usize, widths: &[usize]) -> Result<()> {
        if self.first_layer < 1 || self.first_layer > self.last_layer {
            return Err(Error::Config(format!(
                "first adapted layer {} must be in 1..={}",
                self.first_layer, self.last_layer
            )));
        }
        if self.last_layer != model_layers {
            return Err(Error::Config(format!(
                "last adapted layer {} must equal model depth {model_layers}",
                self.last_layer
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.rank < 1 {
            return Err(Error::Config(String::from("rank must be >= 1")));
        }
        if let Some(&d) = widths.iter().find(|&&d| self.rank >= d) {
            return Err(Error::Config(format!(
                "rank {} must be below the hidden width {d}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// Learnable tensors of one adapter instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `d × r`.
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    /// `r × d`.
    pub base_up_weight: Tensor,
    pub base_up_bias: Tensor,
    /// Present unless the down-projection is shared.
    pub rec_down: Option<(Tensor, Tensor)>,
    /// `r × r` stages before the final up-projection (depth − 1 of them).
    pub rec_hidden: Vec<(Tensor, Tensor)>,
    /// Final `r × d` stage; absent when shared with the adaptation branch.
    pub rec_up: Option<(Tensor, Tensor)>,
}

impl AdapterParams {
    /// Identity-preserving initialization: the adaptation up-projection starts at zero.
    pub fn init<R: rand::Rng>(
        rng: &mut R,
        width: usize,
        rank: usize,
        mode: SharingMode,
        depth: RecDepth,
    ) -> Self {
        let down_std = 1.0 / libm::sqrt(width as f64);
        let rec_std = 1.0 / libm::sqrt(rank as f64);
        let down_weight = init::normal(rng, &[width, rank], down_std);
        let rec_down = mode.rec_owns_down().then(|| {
            (
                init::normal(rng, &[width, rank], down_std),
                Tensor::zeros(&[rank]),
            )
        });
        let rec_hidden = (1..depth.get())
            .map(|_| {
                (
                    init::normal(rng, &[rank, rank], rec_std),
                    Tensor::zeros(&[rank]),
                )
            })
            .collect();
        let rec_up = mode.rec_owns_up().then(|| {
            (
                init::normal(rng, &[rank, width], rec_std),
                Tensor::zeros(&[width]),
            )
        });
        Self {
            down_weight,
            down_bias: Tensor::zeros(&[rank]),
            base_up_weight: Tensor::zeros(&[rank, width]),
            base_up_bias: Tensor::zeros(&[width]),
            rec_down,
            rec_hidden,
            rec_up,
        }
    }

    pub fn width(&self) -> usize {
        self.down_weight.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.down_weight.shape()[1]
    }

    pub fn depth(&self) -> RecDepth {
        RecDepth(self.rec_hidden.len() + 1)
    }

    pub fn mode(&self) -> SharingMode {
        match (self.rec_down.is_some(), self.rec_up.is_some()) {
            (false, _) => SharingMode::SharedDown,
            (true, false) => SharingMode::SharedUp,
            (true, true) => SharingMode::Independent,
        }
    }

    /// Tensors with local names, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("down.weight".into(), &self.down_weight),
            ("down.bias".into(), &self.down_bias),
            ("base_up.weight".into(), &self.base_up_weight),
            ("base_up.bias".into(), &self.base_up_bias),
        ];
        if let Some((w, b)) = &self.rec_down {
            out.push(("rec_down.weight".into(), w));
            out.push(("rec_down.bias".into(), b));
        }
        for (j, (w, b)) in self.rec_hidden.iter().enumerate() {
            out.push((format!("rec_up{}.weight", j + 1), w));
            out.push((format!("rec_up{}.bias", j + 1), b));
        }
        if let Some((w, b)) = &self.rec_up {
            let j = self.rec_hidden.len() + 1;
            out.push((format!("rec_up{j}.weight"), w));
            out.push((format!("rec_up{j}.bias"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = alloc::vec![
            &mut self.down_weight,
            &mut self.down_bias,
            &mut self.base_up_weight,
            &mut self.base_up_bias,
        ];
        if let Some((w, b)) = &mut self.rec_down {
            out.push(w);
            out.push(b);
        }
        for (w, b) in &mut self.rec_hidden {
            out.push(w);
            out.push(b);
        }
        if let Some((w, b)) = &mut self.rec_up {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Element count by enumerating the stored tensors.
    pub fn element_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> AdapterVars {
        let mut leaf = |t: &'a Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let down = (leaf(&self.down_weight), leaf(&self.down_bias));
        let base_up = (leaf(&self.base_up_weight), leaf(&self.base_up_bias));
        let rec_down = self.rec_down.as_ref().map(|(w, b)| (leaf(w), leaf(b)));
        let rec_hidden = self
            .rec_hidden
            .iter()
            .map(|(w, b)| (leaf(w), leaf(b)))
            .collect();
        let rec_up = self.rec_up.as_ref().map(|(w, b)| (leaf(w), leaf(b)));
        AdapterVars {
            down,
            base_up,
            rec_down,
            rec_hidden,
            rec_up,
        }
    }
}

/// Tape handles of one adapter; reconstruction slots fall back to the shared tensors.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub down: (Var, Var),
    pub base_up: (Var, Var),
    pub rec_down: Option<(Var, Var)>,
    pub rec_hidden: Vec<(Var, Var)>,
    pub rec_up: Option<(Var, Var)>,
}

impl AdapterVars {
    /// Handles in the order of [`AdapterParams::named_tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = alloc::vec![self.down.0, self.down.1, self.base_up.0, self.base_up.1];
        for (w, b) in self
            .rec_down
            .iter()
            .chain(&self.rec_hidden)
            .chain(&self.rec_up)
        {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

fn check_width(tape: &Tape<'_>, x: Var, a: &AdapterVars) -> Result<()> {
    let xs = tape.value(x).shape();
    let w = tape.value(a.down.0).shape();
    if xs.len() != 2 || xs[1] != w[0] {
        return Err(Error::Shape {
            op: "adapter",
            left: xs.to_vec(),
            right: w.to_vec(),
        });
    }
    Ok(())
}

/// Adaptation branch: `σ(x·W_down + b_down)·W_up + b_up`.
pub fn base_branch_var(tape: &mut Tape<'_>, x: Var, a: &AdapterVars) -> Result<Var> {
    check_width(tape, x, a)?;
    let h = affine(tape, x, a.down.0, a.down.1)?;
    let h = tape.gelu(h);
    affine(tape, h, a.base_up.0, a.base_up.1)
}

/// Reconstruction branch: bottleneck code, then `depth − 1` GELU `r×r` stages,
/// then the final up-projection back to `d`.
pub fn rec_branch_var(tape: &mut Tape<'_>, x: Var, a: &AdapterVars) -> Result<Var> {
    check_width(tape, x, a)?;
    let (dw, db) = a.rec_down.unwrap_or(a.down);
    let h = affine(tape, x, dw, db)?;
    let mut h = tape.gelu(h);
    for &(w, b) in &a.rec_hidden {
        let z = affine(tape, h, w, b)?;
        h = tape.gelu(z);
    }
    let (uw, ub) = a.rec_up.unwrap_or(a.base_up);
    affine(tape, h, uw, ub)
}

fn as_matrix(x: &Tensor) -> Result<Tensor> {
    match x.shape().len() {
        1 => x.clone().reshape(&[1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(Error::Rank {
            op: "adapter",
            expected: 2,
            shape: x.shape().to_vec(),
        }),
    }
}

/// Adaptation branch on rows of `x` (`·×d` or a single `d` vector).
pub fn base_branch(x: &Tensor, p: &AdapterParams) -> Result<Tensor> {
    let xm = as_matrix(x)?;
    let mut tape = Tape::new();
    let a = p.bind(&mut tape, false);
    let xv = tape.constant_owned(xm);
    let out = base_branch_var(&mut tape, xv, &a)?;
    tape.value(out).clone().reshape(x.shape())
}

/// Reconstruction branch on rows of `x`; `depth` must match the parameters.
pub fn rec_branch(x: &Tensor, p: &AdapterParams, depth: RecDepth) -> Result<Tensor> {
    if p.depth() != depth {
        return Err(Error::Config(format!(
            "parameters have reconstruction depth {}, asked for {}",
            p.depth().get(),
            depth.get()
        )));
    }
    let xm = as_matrix(x)?;
    let mut tape = Tape::new();
    let a = p.bind(&mut tape, false);
    let xv = tape.constant_owned(xm);
    let out = rec_branch_var(&mut tape, xv, &a)?;
    tape.value(out).clone().reshape(x.shape())
}

/// Output of one adapted layer.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedLayer {
    pub output: Var,
    /// `sq_l2(detach(x_in), rec(detach(x_in)))`, when requested.
    pub rec_loss: Option<Var>,
}

/// `block(x_in) + α·base(x_in)` plus the layer-local reconstruction loss.
///
/// With `α = 0` the adaptation branch is not evaluated, so the output is the
/// frozen block output bit for bit.
pub fn adapted_block_forward(
    tape: &mut Tape<'_>,
    block_out: Var,
    x_in: Var,
    adapter: &AdapterVars,
    alpha: f64,
    with_rec: bool,
) -> Result<AdaptedLayer> {
    let output = if alpha == 0.0 {
        block_out
    } else {
        let b = base_branch_var(tape, x_in, adapter)?;
        let b = tape.scale(b, alpha);
        tape.add(block_out, b)?
    };
    let rec_loss = if with_rec {
        let target = tape.detach(x_in);
        let rec = rec_branch_var(tape, target, adapter)?;
        Some(tape.sq_l2(target, rec)?)
    } else {
        None
    };
    Ok(AdaptedLayer { output, rec_loss })
}

/// Frozen backbone with adapters attached to layers `k..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    pub backbone: DualEncoderModel,
    pub placement: AdapterPlacement,
    pub mode: SharingMode,
    pub depth: RecDepth,
    /// One entry per adapted layer, empty when the tower is not adapted.
    pub vision: Vec<AdapterParams>,
    pub text: Vec<AdapterParams>,
}

/// Tape handles of every adapter of an [`AdaptedModel`].
#[derive(Clone, Debug)]
pub struct AdaptedVars {
    pub vision: Vec<AdapterVars>,
    pub text: Vec<AdapterVars>,
}

impl AdaptedVars {
    pub fn tower(&self, tower: Tower) -> &[AdapterVars] {
        match tower {
            Tower::Vision => &self.vision,
            Tower::Text => &self.text,
        }
    }

    /// Handles in the order of [`AdaptedModel::named_adapter_tensors`].
    pub fn flat(&self) -> Vec<Var> {
        self.vision
            .iter()
            .chain(&self.text)
            .flat_map(AdapterVars::flat)
            .collect()
    }
}

/// Features and per-layer reconstruction losses of one tower pass.
#[derive(Clone, Debug)]
pub struct TowerPass {
    pub features: Var,
    pub rec_losses: Vec<Var>,
    /// Input of each executed layer.
    pub layer_inputs: Vec<Var>,
}

/// Attaches freshly initialized adapters and freezes the backbone.
pub fn attach(
    mut backbone: DualEncoderModel,
    placement: AdapterPlacement,
    mode: SharingMode,
    depth: RecDepth,
    seed: u64,
) -> Result<AdaptedModel> {
    let c = &backbone.config;
    let widths: Vec<usize> = placement
        .branches
        .towers()
        .map(|t| match t {
            Tower::Vision => c.vision_width,
            Tower::Text => c.text_width,
        })
        .collect();
    placement.validate(c.layers, &widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |tower: Tower, width: usize| -> Vec<AdapterParams> {
        if !placement.branches.includes(tower) {
            return Vec::new();
        }
        placement
            .adapted_layers()
            .map(|_| AdapterParams::init(&mut rng, width, placement.rank, mode, depth))
            .collect()
    };
    let vision = make(Tower::Vision, c.vision_width);
    let text = make(Tower::Text, c.text_width);
    backbone.freeze();
    Ok(AdaptedModel {
        backbone,
        placement,
        mode,
        depth,
        vision,
        text,
    })
}

/// Closed-form count of added trainable scalars.
pub fn parameter_count(
    placement: &AdapterPlacement,
    mode: SharingMode,
    depth: RecDepth,
    vision_width: usize,
    text_width: usize,
) -> usize {
    let r = placement.rank;
    let per_instance = |d: usize| {
        let down = d * r + r;
        let base_up = r * d + d;
        let rec_down = if mode.rec_owns_down() { d * r + r } else { 0 };
        let hidden = (depth.get() - 1) * (r * r + r);
        let rec_up = if mode.rec_owns_up() { r * d + d } else { 0 };
        down + base_up + rec_down + hidden + rec_up
    };
    placement
        .branches
        .towers()
        .map(|t| {
            let d = match t {
                Tower::Vision => vision_width,
                Tower::Text => text_width,
            };
            placement.layer_count() * per_instance(d)
        })
        .sum()
}

impl AdaptedModel {
    pub fn adapters(&self, tower: Tower) -> &[AdapterParams] {
        match tower {
            Tower::Vision => &self.vision,
            Tower::Text => &self.text,
        }
    }

    pub fn instance_count(&self) -> usize {
        self.vision.len() + self.text.len()
    }

    /// Adds seeded `N(0, std^2)` noise to every adapter tensor, e.g. to move
    /// off the identity point where the consistency term has a kink.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.adapter_tensors_mut() {
            let noise = init::normal(&mut rng, t.shape(), std);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }

    /// Every adapter tensor with a qualified name, vision layers first.
    pub fn named_adapter_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (tower, list) in [("vision", &self.vision), ("text", &self.text)] {
            for (j, p) in list.iter().enumerate() {
                let layer = self.placement.first_layer + j;
                for (name, t) in p.named_tensors() {
                    out.push((format!("{tower}.layer{layer}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn adapter_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.vision
            .iter_mut()
            .chain(self.text.iter_mut())
            .flat_map(AdapterParams::tensors_mut)
            .collect()
    }

    /// Replaces adapter tensors from `(name, tensor)` pairs in declaration order.
    pub fn load_adapter_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_adapter_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} adapter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got, t)) in expected.iter().zip(&tensors) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "adapter tensor {got} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        for (dst, (_, src)) in self.adapter_tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(())
    }

    pub fn added_parameters(&self) -> usize {
        self.named_adapter_tensors()
            .iter()
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn bind_adapters<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> AdaptedVars {
        AdaptedVars {
            vision: self
                .vision
                .iter()
                .map(|p| p.bind(tape, trainable))
                .collect(),
            text: self.text.iter().map(|p| p.bind(tape, trainable)).collect(),
        }
    }

    /// Rebuilds the per-adapter structure from handles in
    /// [`AdaptedModel::named_adapter_tensors`] order.
    pub fn vars_from_flat(&self, flat: &[Var]) -> Result<AdaptedVars> {
        let mut it = flat.iter().copied();
        let mut pair = || -> Result<(Var, Var)> {
            match (it.next(), it.next()) {
                (Some(w), Some(b)) => Ok((w, b)),
                _ => Err(Error::IndexOutOfRange {
                    what: "adapter handle",
                    index: flat.len(),
                    limit: flat.len(),
                }),
            }
        };
        let mut rebuild = |list: &[AdapterParams]| -> Result<Vec<AdapterVars>> {
            list.iter()
                .map(|p| {
                    let down = pair()?;
                    let base_up = pair()?;
                    let rec_down = p.rec_down.as_ref().map(|_| pair()).transpose()?;
                    let rec_hidden = p.rec_hidden.iter().map(|_| pair()).collect::<Result<_>>()?;
                    let rec_up = p.rec_up.as_ref().map(|_| pair()).transpose()?;
                    Ok(AdapterVars {
                        down,
                        base_up,
                        rec_down,
                        rec_hidden,
                        rec_up,
                    })
                })
                .collect()
        };
        let vision = rebuild(&self.vision)?;
        let text = rebuild(&self.text)?;
        if it.next().is_some() {
            return Err(Error::IndexOutOfRange {
                what: "adapter handle",
                index: flat.len(),
                limit: flat.len(),
            });
        }
        Ok(AdaptedVars { vision, text })
    }

    /// Runs layers `start..=K` of `tower` from `x_start`, with adapters on
    /// every adapted layer, then the tower's projection head.
    ///
    /// `head` maps the final hidden state to features.
    #[allow(clippy::too_many_arguments)]
    pub fn tower_pass<'a>(
        &self,
        tape: &mut Tape<'a>,
        backbone: &BackboneVars,
        adapters: &AdaptedVars,
        tower: Tower,
        start: usize,
        x_start: Var,
        with_rec: bool,
        head: impl FnOnce(&mut Tape<'a>, Var) -> Result<Var>,
    ) -> Result<TowerPass> {
        let first = self.placement.first_layer;
        let alpha = self.placement.alpha;
        let list = adapters.tower(tower);
        let mut rec_losses = Vec::new();
        let geom = self.backbone.geometry(tower);
        let (hidden, layer_inputs) = run_tower(
            tape,
            backbone.blocks(tower),
            start,
            x_start,
            geom,
            |tape, layer, x_in, out| {
                if layer < first || list.is_empty() {
                    return Ok(out);
                }
                let a = &list[layer - first];
                let l = adapted_block_forward(tape, out, x_in, a, alpha, with_rec)?;
                rec_losses.extend(l.rec_loss);
                Ok(l.output)
            },
        )?;
        let features = head(tape, hidden)?;
        Ok(TowerPass {
            features,
            rec_losses,
            layer_inputs,
        })
    }

    /// Adapted image features `x^a`, one row per image.
    pub fn encode_images(&self, images: &[Tensor]) -> Result<Tensor> {
        let l = self.backbone.config.latent_width;
        let mut rows = Vec::with_capacity(images.len() * l);
        for chunk in images.chunks(64) {
            let mut tape = Tape::new();
            let bb = self.backbone.bind(&mut tape, false);
            let ad = self.bind_adapters(&mut tape, false);
            let x0 = bb.vision_input(&mut tape, &self.backbone, chunk)?;
            let pass =
                self.tower_pass(&mut tape, &bb, &ad, Tower::Vision, 1, x0, false, |t, h| {
                    bb.image_head(t, h, chunk.len())
                })?;
            rows.extend_from_slice(tape.value(pass.features).data());
        }
        Tensor::new(&[images.len(), l], rows)
    }

    /// Adapted text features `w^a`, one row per prompt.
    pub fn encode_texts(&self, prompts: &[Vec<usize>]) -> Result<Tensor> {
        let l = self.backbone.config.latent_width;
        let mut rows = Vec::with_capacity(prompts.len() * l);
        for chunk in prompts.chunks(64) {
            let mut tape = Tape::new();
            let bb = self.backbone.bind(&mut tape, false);
            let ad = self.bind_adapters(&mut tape, false);
            let x0 = bb.text_input(&mut tape, chunk)?;
            let pass =
                self.tower_pass(&mut tape, &bb, &ad, Tower::Text, 1, x0, false, |t, h| {
                    bb.text_head(t, h, chunk)
                })?;
            rows.extend_from_slice(tape.value(pass.features).data());
        }
        Tensor::new(&[prompts.len(), l], rows)
    }
}

/// Applies one frozen block to a stacked batch, outside any training tape.
pub fn frozen_block_output(
    model: &DualEncoderModel,
    tower: Tower,
    layer: usize,
    x_in: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bb = model.bind(&mut tape, false);
    let x = tape.constant(x_in);
    let out = block_forward(
        &mut tape,
        &bb.blocks(tower)[layer - 1],
        x,
        model.geometry(tower),
    )?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn placement(k: usize) -> AdapterPlacement {
        AdapterPlacement {
            first_layer: k,
            last_layer: 4,
            branches: Branches::Both,
            alpha: 0.1,
            rank: 4,
        }
    }

    fn tiny_backbone() -> DualEncoderModel {
        let cfg = EncoderConfig {
            vision_width: 16,
            text_width: 16,
            latent_width: 8,
            ..Default::default()
        };
        DualEncoderModel::new(cfg, 11).unwrap()
    }

    #[test]
    fn width_512_rank_16_count() {
        let p = AdapterPlacement {
            first_layer: 1,
            last_layer: 1,
            branches: Branches::Vision,
            alpha: 0.1,
            rank: 16,
        };
        let n = parameter_count(&p, SharingMode::SharedDown, RecDepth::TWO, 512, 512);
        assert_eq!(n, 25_888);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AdapterParams::init(&mut rng, 512, 16, SharingMode::SharedDown, RecDepth::TWO);
        assert_eq!(a.element_count(), 25_888);
    }

    #[test]
    fn independent_adds_one_down_projection_per_instance() {
        let p = placement(3);
        let shared = parameter_count(&p, SharingMode::SharedDown, RecDepth::TWO, 64, 48);
        let indep = parameter_count(&p, SharingMode::Independent, RecDepth::TWO, 64, 48);
        assert_eq!(indep - shared, 2 * (64 * 4 + 4) + 2 * (48 * 4 + 4));
    }

    #[test]
    fn attach_counts_instances() {
        let m = attach(
            tiny_backbone(),
            placement(3),
            SharingMode::SharedDown,
            RecDepth::TWO,
            0,
        )
        .unwrap();
        assert_eq!(m.instance_count(), 4);
        assert!(m.backbone.frozen);
        let vision_only = AdapterPlacement {
            branches: Branches::Vision,
            ..placement(3)
        };
        let m = attach(
            tiny_backbone(),
            vision_only,
            SharingMode::SharedDown,
            RecDepth::TWO,
            0,
        )
        .unwrap();
        assert_eq!((m.vision.len(), m.text.len()), (2, 0));
    }

    #[test]
    fn attach_rejects_bad_placement() {
        for bad in [
            placement(5),
            placement(0),
            AdapterPlacement {
                rank: 16,
                ..placement(3)
            },
            AdapterPlacement {
                alpha: -1.0,
                ..placement(3)
            },
        ] {
            assert!(attach(
                tiny_backbone(),
                bad,
                SharingMode::SharedDown,
                RecDepth::TWO,
                0
            )
            .is_err());
        }
    }

    #[test]
    fn same_seed_same_adapters() {
        let a = attach(
            tiny_backbone(),
            placement(3),
            SharingMode::Independent,
            RecDepth::THREE,
            9,
        )
        .unwrap();
        let b = attach(
            tiny_backbone(),
            placement(3),
            SharingMode::Independent,
            RecDepth::THREE,
            9,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn modes_round_trip_through_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in SharingMode::ALL {
            for depth in RecDepth::ALL {
                let p = AdapterParams::init(&mut rng, 16, 4, mode, depth);
                assert_eq!(p.mode(), mode);
                assert_eq!(p.depth(), depth);
            }
        }
        assert!(RecDepth::new(0).is_err());
        assert!(RecDepth::new(4).is_err());
    }

    #[test]
    fn zero_adapter_is_silent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = AdapterParams::init(&mut rng, 16, 4, SharingMode::SharedDown, RecDepth::TWO);
        let x = init::normal(&mut rng, &[5, 16], 1.0);
        // zero-init up-projection
        assert!(base_branch(&x, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        for t in p.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        assert!(base_branch(&x, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let z = Tensor::zeros(&[3, 16]);
        assert!(rec_branch(&z, &p, RecDepth::TWO)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn branch_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AdapterParams::init(&mut rng, 16, 4, SharingMode::SharedDown, RecDepth::TWO);
        let x = Tensor::zeros(&[2, 15]);
        assert!(matches!(base_branch(&x, &p), Err(Error::Shape { .. })));
        assert!(matches!(
            rec_branch(&x, &p, RecDepth::TWO),
            Err(Error::Shape { .. })
        ));
        assert!(rec_branch(&Tensor::zeros(&[2, 16]), &p, RecDepth::ONE).is_err());
    }
}
