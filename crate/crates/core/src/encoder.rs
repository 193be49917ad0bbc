//! Small CLIP-style dual encoder: a vision transformer over patch embeddings
//! with a CLS token, a causal text transformer over token embeddings, and
//! linear projection heads into a shared latent space.
//!
//! Blocks are pre-norm: `h = x + Attn(LN1(x))`, `out = h + MLP(LN2(h))`.
//! Batches of sequences are stacked row-wise, so a batch of `B` images is a
//! `(B·(M+1)) × d_v` matrix with the CLS token first in each sequence.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{self, fnv1a, Tensor, FNV_OFFSET};

/// Reserved padding token.
pub const PAD_TOKEN: usize = 0;
/// Reserved end-of-sequence token; the text feature is read at its position.
pub const EOS_TOKEN: usize = 1;

/// Images encoded per tape by the batched convenience encoders.
pub(crate) const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    /// Transformer blocks per tower (K).
    pub layers: usize,
    pub vision_width: usize,
    pub text_width: usize,
    /// Shared latent width.
    pub latent_width: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of the tower width.
    pub mlp_ratio: usize,
    /// Square image side length in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vocab: usize,
    /// Text length (N).
    pub seq_len: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            vision_width: 64,
            text_width: 64,
            latent_width: 32,
            heads: 4,
            mlp_ratio: 2,
            image_size: 8,
            patch_size: 2,
            channels: 3,
            vocab: 64,
            seq_len: 8,
            temperature: 0.07,
        }
    }
}

impl EncoderConfig {
    /// Patches per image (M).
    pub fn patch_grid(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Vision sequence length including the CLS token.
    pub fn vision_seq_len(&self) -> usize {
        self.patch_grid() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers < 2 {
            return fail(format!("layers must be >= 2, got {}", self.layers));
        }
        if self.heads == 0
            || !self.vision_width.is_multiple_of(self.heads)
            || !self.text_width.is_multiple_of(self.heads)
        {
            return fail(format!(
                "widths {}/{} must be divisible by heads {}",
                self.vision_width, self.text_width, self.heads
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image size {} is not divisible into {}-pixel patches",
                self.image_size, self.patch_size
            ));
        }
        if self.vocab <= EOS_TOKEN + 1 || self.seq_len < 2 {
            return fail(format!(
                "vocab {} / seq_len {} too small",
                self.vocab, self.seq_len
            ));
        }
        if self.latent_width == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return fail(String::from(
                "latent_width, channels and mlp_ratio must be positive",
            ));
        }
        Ok(())
    }
}

/// Parameter names of one block, in declaration order.
pub const BLOCK_TENSOR_NAMES: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TransformerBlock {
    pub fn init<R: rand::Rng>(rng: &mut R, width: usize, mlp_width: usize, layers: usize) -> Self {
        let std = 1.0 / libm::sqrt(width as f64);
        // residual branches scaled down with depth
        let out_std = std / libm::sqrt(2.0 * layers as f64);
        Self {
            ln1_gamma: Tensor::ones(&[width]),
            ln1_beta: Tensor::zeros(&[width]),
            wq: init::normal(rng, &[width, width], std),
            bq: Tensor::zeros(&[width]),
            wk: init::normal(rng, &[width, width], std),
            bk: Tensor::zeros(&[width]),
            wv: init::normal(rng, &[width, width], std),
            bv: Tensor::zeros(&[width]),
            wo: init::normal(rng, &[width, width], out_std),
            bo: Tensor::zeros(&[width]),
            ln2_gamma: Tensor::ones(&[width]),
            ln2_beta: Tensor::zeros(&[width]),
            w1: init::normal(rng, &[width, mlp_width], std),
            b1: Tensor::zeros(&[mlp_width]),
            w2: init::normal(rng, &[mlp_width, width], out_std / libm::sqrt(2.0)),
            b2: Tensor::zeros(&[width]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            ln1_gamma: v[0],
            ln1_beta: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_gamma: v[10],
            ln2_beta: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
        }
    }
}

/// `x·W + b` with `b` broadcast over rows.
pub fn affine(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_tiled(xw, b)
}

/// One pre-norm transformer block over a stack of sequences.
pub fn block_forward(
    tape: &mut Tape<'_>,
    p: &BlockVars,
    x: Var,
    geom: AttentionGeometry,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta)?;
    let q = affine(tape, h, p.wq, p.bq)?;
    let k = affine(tape, h, p.wk, p.bk)?;
    let v = affine(tape, h, p.wv, p.bv)?;
    let a = tape.attention(q, k, v, geom)?;
    let o = affine(tape, a, p.wo, p.bo)?;
    let x1 = tape.add(x, o)?;
    let h2 = tape.layer_norm(x1, p.ln2_gamma, p.ln2_beta)?;
    let m = affine(tape, h2, p.w1, p.b1)?;
    let m = tape.gelu(m);
    let m = affine(tape, m, p.w2, p.b2)?;
    tape.add(x1, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Tower {
    Vision,
    Text,
}

/// Frozen-or-trainable CLIP-like backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    pub config: EncoderConfig,
    /// `patch_dim × d_v`.
    pub patch_weight: Tensor,
    /// Per-patch-position bias, `M × d_v`.
    pub patch_bias: Tensor,
    /// Initial CLS token `c_0`.
    pub cls: Tensor,
    pub vision_blocks: Vec<TransformerBlock>,
    pub vision_ln_gamma: Tensor,
    pub vision_ln_beta: Tensor,
    /// `d_v × d_l`.
    pub image_proj: Tensor,
    /// `vocab × d_t`.
    pub token_embed: Tensor,
    /// `N × d_t`.
    pub text_pos: Tensor,
    pub text_blocks: Vec<TransformerBlock>,
    pub text_ln_gamma: Tensor,
    pub text_ln_beta: Tensor,
    /// `d_t × d_l`.
    pub text_proj: Tensor,
    pub frozen: bool,
}

impl DualEncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (dv, dt, dl) = (c.vision_width, c.text_width, c.latent_width);
        let patch_weight = init::normal(
            &mut rng,
            &[c.patch_dim(), dv],
            1.0 / libm::sqrt(c.patch_dim() as f64),
        );
        let patch_bias = init::normal(&mut rng, &[c.patch_grid(), dv], 0.02);
        let cls = init::normal(&mut rng, &[dv], 0.02);
        let vision_blocks = (0..c.layers)
            .map(|_| TransformerBlock::init(&mut rng, dv, dv * c.mlp_ratio, c.layers))
            .collect();
        let image_proj = init::normal(&mut rng, &[dv, dl], 1.0 / libm::sqrt(dv as f64));
        let token_embed = init::normal(&mut rng, &[c.vocab, dt], 1.0);
        let text_pos = init::normal(&mut rng, &[c.seq_len, dt], 0.02);
        let text_blocks = (0..c.layers)
            .map(|_| TransformerBlock::init(&mut rng, dt, dt * c.mlp_ratio, c.layers))
            .collect();
        let text_proj = init::normal(&mut rng, &[dt, dl], 1.0 / libm::sqrt(dt as f64));
        Ok(Self {
            patch_weight,
            patch_bias,
            cls,
            vision_blocks,
            vision_ln_gamma: Tensor::ones(&[dv]),
            vision_ln_beta: Tensor::zeros(&[dv]),
            image_proj,
            token_embed,
            text_pos,
            text_blocks,
            text_ln_gamma: Tensor::ones(&[dt]),
            text_ln_beta: Tensor::zeros(&[dt]),
            text_proj,
            frozen: false,
            config,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Every parameter with its name, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("vision.patch_embed.weight".into(), &self.patch_weight),
            ("vision.patch_embed.bias".into(), &self.patch_bias),
            ("vision.cls".into(), &self.cls),
        ];
        for (i, b) in self.vision_blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSOR_NAMES.iter().zip(b.tensors()) {
                out.push((format!("vision.blocks.{i}.{name}"), t));
            }
        }
        out.push(("vision.ln_post.gamma".into(), &self.vision_ln_gamma));
        out.push(("vision.ln_post.beta".into(), &self.vision_ln_beta));
        out.push(("vision.proj".into(), &self.image_proj));
        out.push(("text.token_embed".into(), &self.token_embed));
        out.push(("text.pos".into(), &self.text_pos));
        for (i, b) in self.text_blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSOR_NAMES.iter().zip(b.tensors()) {
                out.push((format!("text.blocks.{i}.{name}"), t));
            }
        }
        out.push(("text.ln_final.gamma".into(), &self.text_ln_gamma));
        out.push(("text.ln_final.beta".into(), &self.text_ln_beta));
        out.push(("text.proj".into(), &self.text_proj));
        out
    }

    /// Mutable parameters in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.cls];
        for b in &mut self.vision_blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.vision_ln_gamma);
        out.push(&mut self.vision_ln_beta);
        out.push(&mut self.image_proj);
        out.push(&mut self.token_embed);
        out.push(&mut self.text_pos);
        for b in &mut self.text_blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.text_ln_gamma);
        out.push(&mut self.text_ln_beta);
        out.push(&mut self.text_proj);
        out
    }

    /// Replaces every parameter from `(name, tensor)` pairs in declaration order.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} backbone tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "backbone tensor {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a digest of every parameter name, shape and bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for (name, t) in self.named_tensors() {
            h = fnv1a(h, name.as_bytes());
            h = t.fingerprint(h);
        }
        h
    }

    /// Flattens an `H×W×ch` image into `M` patch rows of `p·p·ch` values.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = image.shape();
        if s.len() != 3 || s[2] != c.channels {
            return Err(Error::Rank {
                op: "patchify",
                expected: 3,
                shape: s.to_vec(),
            });
        }
        let (h, w, ch) = (s[0], s[1], s[2]);
        let p = c.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible into {p}x{p} patches"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        if gh * gw != c.patch_grid() {
            return Err(Error::Shape {
                op: "patchify",
                left: s.to_vec(),
                right: vec![c.image_size, c.image_size, c.channels],
            });
        }
        let data = image.data();
        let mut out = Vec::with_capacity(h * w * ch);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let y = py * p + dy;
                    let start = (y * w + px * p) * ch;
                    out.extend_from_slice(&data[start..start + p * ch]);
                }
            }
        }
        Tensor::new(&[gh * gw, p * p * ch], out)
    }

    /// `E_0`: each patch flattened and affinely mapped to `d_v`.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let patches = self.patchify(image)?;
        let mut e = tensor::matmul(&patches, &self.patch_weight)?;
        let dv = self.config.vision_width;
        for (r, row) in e.data_mut().chunks_mut(dv).enumerate() {
            for (v, b) in row.iter_mut().zip(self.patch_bias.row(r)) {
                *v += b;
            }
        }
        Ok(e)
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> BackboneVars {
        let all: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let k = self.config.layers;
        let mut i = 0;
        let mut next = |n: usize| {
            let s = &all[i..i + n];
            i += n;
            s.to_vec()
        };
        let head = next(3);
        let vision_blocks = (0..k).map(|_| BlockVars::from_slice(&next(16))).collect();
        let vpost = next(3);
        let temb = next(2);
        let text_blocks = (0..k).map(|_| BlockVars::from_slice(&next(16))).collect();
        let tpost = next(3);
        BackboneVars {
            patch_weight: head[0],
            patch_bias: head[1],
            cls: head[2],
            vision_blocks,
            vision_ln_gamma: vpost[0],
            vision_ln_beta: vpost[1],
            image_proj: vpost[2],
            token_embed: temb[0],
            text_pos: temb[1],
            text_blocks,
            text_ln_gamma: tpost[0],
            text_ln_beta: tpost[1],
            text_proj: tpost[2],
            all,
            config: self.config.clone(),
        }
    }

    pub fn geometry(&self, tower: Tower) -> AttentionGeometry {
        match tower {
            Tower::Vision => AttentionGeometry {
                seq_len: self.config.vision_seq_len(),
                heads: self.config.heads,
                causal: false,
            },
            Tower::Text => AttentionGeometry {
                seq_len: self.config.seq_len,
                heads: self.config.heads,
                causal: true,
            },
        }
    }

    /// Projected CLS feature `x` and the input of every layer, `[c_{i-1}, E_{i-1}]`.
    pub fn vision_forward(&self, image: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x0 = vars.vision_input(&mut tape, self, core::slice::from_ref(image))?;
        let geom = self.geometry(Tower::Vision);
        let (hidden, inputs) = run_tower(
            &mut tape,
            &vars.vision_blocks,
            1,
            x0,
            geom,
            |_, _, _, out| Ok(out),
        )?;
        let x = vars.image_head(&mut tape, hidden, 1)?;
        let x = tape.value(x).clone().reshape(&[self.config.latent_width])?;
        Ok((x, inputs.iter().map(|v| tape.value(*v).clone()).collect()))
    }

    /// Projected EOS feature `w` and the input of every layer, `W_{i-1}`.
    pub fn text_forward(&self, tokens: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let prompts = [tokens.to_vec()];
        let x0 = vars.text_input(&mut tape, &prompts)?;
        let geom = self.geometry(Tower::Text);
        let (hidden, inputs) =
            run_tower(&mut tape, &vars.text_blocks, 1, x0, geom, |_, _, _, out| {
                Ok(out)
            })?;
        let w = vars.text_head(&mut tape, hidden, &prompts)?;
        let w = tape.value(w).clone().reshape(&[self.config.latent_width])?;
        Ok((w, inputs.iter().map(|v| tape.value(*v).clone()).collect()))
    }

    /// Frozen image features, one row per image.
    pub fn encode_images(&self, images: &[Tensor]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(images.len() * self.config.latent_width);
        for chunk in images.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let x0 = vars.vision_input(&mut tape, self, chunk)?;
            let geom = self.geometry(Tower::Vision);
            let (hidden, _) =
                run_tower(&mut tape, &vars.vision_blocks, 1, x0, geom, |_, _, _, o| {
                    Ok(o)
                })?;
            let x = vars.image_head(&mut tape, hidden, chunk.len())?;
            rows.extend_from_slice(tape.value(x).data());
        }
        Tensor::new(&[images.len(), self.config.latent_width], rows)
    }

    /// Frozen text features, one row per prompt.
    pub fn encode_texts(&self, prompts: &[Vec<usize>]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(prompts.len() * self.config.latent_width);
        for chunk in prompts.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let x0 = vars.text_input(&mut tape, chunk)?;
            let geom = self.geometry(Tower::Text);
            let (hidden, _) =
                run_tower(&mut tape, &vars.text_blocks, 1, x0, geom, |_, _, _, o| {
                    Ok(o)
                })?;
            let w = vars.text_head(&mut tape, hidden, chunk)?;
            rows.extend_from_slice(tape.value(w).data());
        }
        Tensor::new(&[prompts.len(), self.config.latent_width], rows)
    }
}

/// Tape handles for a bound backbone.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub cls: Var,
    pub vision_blocks: Vec<BlockVars>,
    pub vision_ln_gamma: Var,
    pub vision_ln_beta: Var,
    pub image_proj: Var,
    pub token_embed: Var,
    pub text_pos: Var,
    pub text_blocks: Vec<BlockVars>,
    pub text_ln_gamma: Var,
    pub text_ln_beta: Var,
    pub text_proj: Var,
    /// Every handle in declaration order.
    pub all: Vec<Var>,
    config: EncoderConfig,
}

impl BackboneVars {
    pub fn blocks(&self, tower: Tower) -> &[BlockVars] {
        match tower {
            Tower::Vision => &self.vision_blocks,
            Tower::Text => &self.text_blocks,
        }
    }

    /// Stacked `[c_0, E_0]` for every image.
    pub fn vision_input(
        &self,
        tape: &mut Tape<'_>,
        model: &DualEncoderModel,
        images: &[Tensor],
    ) -> Result<Var> {
        let m = self.config.patch_grid();
        let pd = self.config.patch_dim();
        let mut patches = Vec::with_capacity(images.len() * m * pd);
        for img in images {
            patches.extend_from_slice(model.patchify(img)?.data());
        }
        let patches = tape.constant_owned(Tensor::new(&[images.len() * m, pd], patches)?);
        let e = tape.matmul(patches, self.patch_weight)?;
        let e = tape.add_tiled(e, self.patch_bias)?;
        let with_cls = tape.concat_rows(&[self.cls, e])?;
        let mut idx = Vec::with_capacity(images.len() * (m + 1));
        for b in 0..images.len() {
            idx.push(0);
            idx.extend((0..m).map(|j| 1 + b * m + j));
        }
        tape.gather_rows(with_cls, &idx)
    }

    /// Stacked `W_0` (token plus positional embeddings) for every prompt.
    pub fn text_input(&self, tape: &mut Tape<'_>, prompts: &[Vec<usize>]) -> Result<Var> {
        let n = self.config.seq_len;
        let mut ids = Vec::with_capacity(prompts.len() * n);
        for p in prompts {
            if p.len() != n {
                return Err(Error::Shape {
                    op: "text_input",
                    left: vec![p.len()],
                    right: vec![n],
                });
            }
            for &t in p {
                if t >= self.config.vocab {
                    return Err(Error::IndexOutOfRange {
                        what: "token",
                        index: t,
                        limit: self.config.vocab,
                    });
                }
            }
            ids.extend_from_slice(p);
        }
        let e = tape.gather_rows(self.token_embed, &ids)?;
        tape.add_tiled(e, self.text_pos)
    }

    /// `ImageProj(c_K)` for each of `batch` stacked sequences.
    pub fn image_head(&self, tape: &mut Tape<'_>, hidden: Var, batch: usize) -> Result<Var> {
        let l = self.config.vision_seq_len();
        let idx: Vec<usize> = (0..batch).map(|b| b * l).collect();
        let cls = tape.gather_rows(hidden, &idx)?;
        let cls = tape.layer_norm(cls, self.vision_ln_gamma, self.vision_ln_beta)?;
        tape.matmul(cls, self.image_proj)
    }

    /// `TextProj(w_K^{eos})` for each prompt.
    pub fn text_head(
        &self,
        tape: &mut Tape<'_>,
        hidden: Var,
        prompts: &[Vec<usize>],
    ) -> Result<Var> {
        let n = self.config.seq_len;
        let idx: Vec<usize> = prompts
            .iter()
            .enumerate()
            .map(|(b, p)| b * n + eos_position(p))
            .collect();
        let eos = tape.gather_rows(hidden, &idx)?;
        let eos = tape.layer_norm(eos, self.text_ln_gamma, self.text_ln_beta)?;
        tape.matmul(eos, self.text_proj)
    }
}

/// Position of the first EOS token, or the last position when there is none.
pub fn eos_position(tokens: &[usize]) -> usize {
    tokens
        .iter()
        .position(|&t| t == EOS_TOKEN)
        .unwrap_or(tokens.len().saturating_sub(1))
}

/// Runs layers `start..=K` (1-based) of a tower.
///
/// `layer(tape, i, x_in, block_out)` returns the layer output, which lets
/// callers add residual adapters. Returns the final hidden state and the
/// input of each executed layer.
pub fn run_tower<'a, F>(
    tape: &mut Tape<'a>,
    blocks: &[BlockVars],
    start: usize,
    x0: Var,
    geom: AttentionGeometry,
    mut layer: F,
) -> Result<(Var, Vec<Var>)>
where
    F: FnMut(&mut Tape<'a>, usize, Var, Var) -> Result<Var>,
{
    let mut x = x0;
    let mut inputs = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate().skip(start.saturating_sub(1)) {
        inputs.push(x);
        let out = block_forward(tape, block, x, geom)?;
        x = layer(tape, i + 1, x, out)?;
    }
    Ok((x, inputs))
}

/// Row-wise cosine logits `cos(x_b, w_c) / τ`, `B×C`.
pub fn cosine_logits(
    tape: &mut Tape<'_>,
    image_feats: Var,
    class_feats: Var,
    temperature: f64,
) -> Result<Var> {
    let xn = tape.normalize_rows(image_feats)?;
    let wn = tape.normalize_rows(class_feats)?;
    let wt = tape.transpose(wn)?;
    let s = tape.matmul(xn, wt)?;
    Ok(tape.scale(s, 1.0 / temperature))
}

/// `logit_k = cos(x, w_k) / τ` for one image feature.
pub fn zero_shot_logits(x: &Tensor, class_embeds: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let d = x.len();
    let mut tape = Tape::new();
    let xv = tape.constant_owned(x.clone().reshape(&[1, d])?);
    let wv = tape.constant(class_embeds);
    let l = cosine_logits(&mut tape, xv, wv, temperature)?;
    let c = class_embeds.rows();
    tape.value(l).clone().reshape(&[c])
}

/// Softmax of [`zero_shot_logits`].
pub fn zero_shot_probabilities(
    x: &Tensor,
    class_embeds: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    Ok(tensor::softmax_rows(&zero_shot_logits(
        x,
        class_embeds,
        temperature,
    )?))
}

/// Index of the largest value; first wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-class prompts: token sequences of length N ending in EOS, padded with PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPromptSet {
    prompts: Vec<Vec<usize>>,
}

impl ClassPromptSet {
    pub fn new(prompts: Vec<Vec<usize>>, config: &EncoderConfig) -> Result<Self> {
        for p in &prompts {
            if p.len() != config.seq_len {
                return Err(Error::Shape {
                    op: "ClassPromptSet",
                    left: vec![p.len()],
                    right: vec![config.seq_len],
                });
            }
            let Some(eos) = p.iter().position(|&t| t == EOS_TOKEN) else {
                return Err(Error::Config(String::from("prompt has no EOS token")));
            };
            if p[eos + 1..].iter().any(|&t| t != PAD_TOKEN) {
                return Err(Error::Config(String::from("prompt has tokens after EOS")));
            }
            if let Some(&t) = p.iter().find(|&&t| t >= config.vocab) {
                return Err(Error::IndexOutOfRange {
                    what: "token",
                    index: t,
                    limit: config.vocab,
                });
            }
        }
        Ok(Self { prompts })
    }

    pub fn prompts(&self) -> &[Vec<usize>] {
        &self.prompts
    }

    pub fn class_count(&self) -> usize {
        self.prompts.len()
    }

    /// Subset in the given order.
    pub fn select(&self, classes: &[usize]) -> Self {
        Self {
            prompts: classes.iter().map(|&c| self.prompts[c].clone()).collect(),
        }
    }
}
