//! Synthetic image–text worlds with compositional classes.
//!
//! A class is a combination of attribute values. Its latent prototype is the
//! sum of per-value Gaussian vectors plus a class-specific deviation, so a
//! model that aligns attribute tokens with image directions can recognise
//! combinations it never saw. Images are a fixed random affine map of a
//! jittered prototype plus pixel noise; captions are template tokens, the
//! attribute tokens and an optional distractor.
//!
//! Pretraining pairs use the world's base renderer and never show a novel
//! class. Few-shot task images go through a perturbed renderer, which gives
//! adaptation something to correct.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ClassPromptSet, EncoderConfig, EOS_TOKEN, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::init;
use crate::pretrain::ImageTextPair;
use crate::tensor::{matmul, Tensor};

/// First template token; token ids below it are reserved.
const TEMPLATE_BASE: usize = 2;
const TEMPLATE_TOKENS: usize = 4;
/// Template of every class prompt, the analogue of "a photo of a".
const CLASS_TEMPLATE: [usize; 2] = [TEMPLATE_BASE, TEMPLATE_BASE + 1];

const STREAM_LATENT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_RENDER: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_SAMPLES: u64 = 4;
const STREAM_PAIRS: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldConfig {
    pub attributes: usize,
    pub values: usize,
    pub latent_dim: usize,
    /// Std of the class-specific prototype deviation.
    pub class_jitter: f64,
    /// Std of the per-sample latent jitter.
    pub sample_noise: f64,
    pub pixel_noise: f64,
    /// Relative strength of the task renderer's perturbation.
    pub domain_shift: f64,
    /// Probability that a pretraining caption carries a distractor token.
    pub distractor_rate: f64,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub samples_per_class: usize,
    pub shots: usize,
    pub pretrain_pairs: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            attributes: 3,
            values: 4,
            latent_dim: 16,
            class_jitter: 1.6,
            sample_noise: 0.5,
            pixel_noise: 0.05,
            domain_shift: 0.5,
            distractor_rate: 0.5,
            base_classes: 8,
            novel_classes: 8,
            samples_per_class: 40,
            shots: 16,
            pretrain_pairs: 4096,
        }
    }
}

impl WorldConfig {
    pub fn combinations(&self) -> usize {
        self.values.pow(self.attributes as u32)
    }

    /// Token id of `value` of attribute `attribute`.
    pub fn attribute_token(&self, attribute: usize, value: usize) -> usize {
        TEMPLATE_BASE + TEMPLATE_TOKENS + attribute * self.values + value
    }

    /// First token id past the attribute block.
    pub fn first_distractor(&self) -> usize {
        TEMPLATE_BASE + TEMPLATE_TOKENS + self.attributes * self.values
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.base_classes < 2 || self.novel_classes < 2 {
            return fail(format!(
                "need at least 2 base and 2 novel classes, got {} and {}",
                self.base_classes, self.novel_classes
            ));
        }
        if self.attributes < 1 || self.values < 2 || self.latent_dim < 1 {
            return fail(format!(
                "degenerate attribute space {}x{} in {} dims",
                self.attributes, self.values, self.latent_dim
            ));
        }
        if self.base_classes + self.novel_classes > self.combinations() {
            return fail(format!(
                "{} classes requested but only {} attribute combinations exist",
                self.base_classes + self.novel_classes,
                self.combinations()
            ));
        }
        if self.shots < 1 || self.samples_per_class <= self.shots {
            return fail(format!(
                "samples_per_class ({}) must exceed shots ({})",
                self.samples_per_class, self.shots
            ));
        }
        if self.first_distractor() + 1 > enc.vocab {
            return fail(format!(
                "vocab {} too small for {} attribute tokens",
                enc.vocab,
                self.attributes * self.values
            ));
        }
        if CLASS_TEMPLATE.len() + self.attributes + 2 > enc.seq_len {
            return fail(format!(
                "seq_len {} too short for {} attributes plus template, distractor and EOS",
                enc.seq_len, self.attributes
            ));
        }
        let finite = [
            self.class_jitter,
            self.sample_noise,
            self.pixel_noise,
            self.domain_shift,
        ];
        if finite.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !(0.0..=1.0).contains(&self.distractor_rate)
        {
            return fail(String::from("noise scales must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One labelled image; `class` is a world-level class id.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
    /// Seed of the attribute vectors and base renderer, shared by siblings.
    pub structure_seed: u64,
    /// `attributes × values` latent vectors.
    attribute_vectors: Vec<Vec<Tensor>>,
    /// Attribute values of each class, in task order: base, novel, then the rest.
    class_attributes: Vec<Vec<usize>>,
    prototypes: Vec<Tensor>,
    /// `latent × pixels` map shared with pretraining.
    renderer: Tensor,
    renderer_bias: Tensor,
    /// Renderer used for task images.
    task_renderer: Tensor,
}

/// Base/novel split with its few-shot training pool and evaluation pools.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotTask {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub shots: usize,
    pub train: Vec<Sample>,
    pub base_eval: Vec<Sample>,
    pub novel_eval: Vec<Sample>,
    pub base_prompts: ClassPromptSet,
    pub novel_prompts: ClassPromptSet,
}

impl FewShotTask {
    /// Index of `class` within the base classes.
    pub fn base_label(&self, class: usize) -> Option<usize> {
        self.base_classes.iter().position(|&c| c == class)
    }

    pub fn novel_label(&self, class: usize) -> Option<usize> {
        self.novel_classes.iter().position(|&c| c == class)
    }
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Builds a world and its task from `seed`.
pub fn generate_world(
    seed: u64,
    config: &WorldConfig,
    encoder: &EncoderConfig,
) -> Result<(SyntheticWorld, FewShotTask)> {
    SyntheticWorld::build(seed, seed, config, encoder)
}

impl SyntheticWorld {
    /// `structure_seed` fixes the attribute vectors and the base renderer;
    /// `seed` fixes everything else.
    fn build(
        structure_seed: u64,
        seed: u64,
        config: &WorldConfig,
        encoder: &EncoderConfig,
    ) -> Result<(Self, FewShotTask)> {
        config.validate(encoder)?;
        encoder.validate()?;
        let a = config.attributes;
        let l = config.latent_dim;
        let pixels = encoder.image_size * encoder.image_size * encoder.channels;

        let mut rng = stream(structure_seed, STREAM_LATENT);
        let attr_std = 1.0 / libm::sqrt(a as f64);
        let attribute_vectors: Vec<Vec<Tensor>> = (0..a)
            .map(|_| {
                (0..config.values)
                    .map(|_| init::normal(&mut rng, &[l], attr_std))
                    .collect()
            })
            .collect();
        let mut rng = stream(structure_seed, STREAM_RENDER);
        let renderer = init::normal(&mut rng, &[l, pixels], 1.0 / libm::sqrt(l as f64));
        let renderer_bias = init::normal(&mut rng, &[pixels], 0.1);

        let mut rng = stream(seed, STREAM_SPLIT);
        let mut combos: Vec<Vec<usize>> = (0..config.combinations())
            .map(|mut i| {
                (0..a)
                    .map(|_| {
                        let v = i % config.values;
                        i /= config.values;
                        v
                    })
                    .collect()
            })
            .collect();
        combos.shuffle(&mut rng);
        let prototypes: Vec<Tensor> = combos
            .iter()
            .map(|attrs| {
                let mut p = init::normal(&mut rng, &[l], config.class_jitter);
                for (ai, &v) in attrs.iter().enumerate() {
                    for (d, s) in p.data_mut().iter_mut().zip(attribute_vectors[ai][v].data()) {
                        *d += s;
                    }
                }
                p
            })
            .collect();

        let mut rng = stream(seed, STREAM_SHIFT);
        let delta = init::normal(&mut rng, &[l, pixels], 1.0 / libm::sqrt(l as f64));
        let task_renderer = Tensor::new(
            &[l, pixels],
            renderer
                .data()
                .iter()
                .zip(delta.data())
                .map(|(r, d)| r + config.domain_shift * d)
                .collect(),
        )?;

        let world = Self {
            config: config.clone(),
            encoder: encoder.clone(),
            seed,
            structure_seed,
            attribute_vectors,
            class_attributes: combos,
            prototypes,
            renderer,
            renderer_bias,
            task_renderer,
        };
        let task = world.make_task()?;
        Ok((world, task))
    }

    /// A world with the same attribute structure and base renderer but a
    /// fresh class split, class deviations and task renderer.
    pub fn sibling(&self, seed: u64) -> Result<(Self, FewShotTask)> {
        Self::build(self.structure_seed, seed, &self.config, &self.encoder)
    }

    pub fn class_count(&self) -> usize {
        self.class_attributes.len()
    }

    pub fn class_attributes(&self, class: usize) -> &[usize] {
        &self.class_attributes[class]
    }

    /// The canonical prompt of `class`: template, attribute tokens, EOS, padding.
    pub fn class_prompt(&self, class: usize) -> Vec<usize> {
        let mut p: Vec<usize> = CLASS_TEMPLATE.to_vec();
        for (ai, &v) in self.class_attributes[class].iter().enumerate() {
            p.push(self.config.attribute_token(ai, v));
        }
        p.push(EOS_TOKEN);
        p.resize(self.encoder.seq_len, PAD_TOKEN);
        p
    }

    pub fn prompts(&self, classes: &[usize]) -> Result<ClassPromptSet> {
        ClassPromptSet::new(
            classes.iter().map(|&c| self.class_prompt(c)).collect(),
            &self.encoder,
        )
    }

    /// A pretraining caption: random template, attribute tokens, maybe a distractor.
    fn caption<R: Rng>(&self, rng: &mut R, class: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..CLASS_TEMPLATE.len())
            .map(|_| TEMPLATE_BASE + rng.random_range(0..TEMPLATE_TOKENS))
            .collect();
        for (ai, &v) in self.class_attributes[class].iter().enumerate() {
            p.push(self.config.attribute_token(ai, v));
        }
        if rng.random_bool(self.config.distractor_rate) {
            let first = self.config.first_distractor();
            let d = rng.random_range(first..self.encoder.vocab);
            let at = rng.random_range(0..=p.len());
            p.insert(at, d);
        }
        p.push(EOS_TOKEN);
        p.resize(self.encoder.seq_len, PAD_TOKEN);
        p
    }

    fn render<R: Rng>(&self, rng: &mut R, class: usize, renderer: &Tensor) -> Result<Tensor> {
        let l = self.config.latent_dim;
        let mut z = init::normal(rng, &[1, l], self.config.sample_noise);
        for (d, p) in z.data_mut().iter_mut().zip(self.prototypes[class].data()) {
            *d += p;
        }
        let mut img = matmul(&z, renderer)?;
        for (px, b) in img.data_mut().iter_mut().zip(self.renderer_bias.data()) {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *px += b + self.config.pixel_noise * n;
        }
        let e = &self.encoder;
        img.reshape(&[e.image_size, e.image_size, e.channels])
    }

    /// Image–caption pairs over every class except the novel ones, base renderer.
    pub fn pretraining_pairs(&self) -> Result<Vec<ImageTextPair>> {
        let mut rng = stream(self.seed, STREAM_PAIRS);
        let novel_start = self.config.base_classes;
        let novel_end = novel_start + self.config.novel_classes;
        let seen: Vec<usize> = (0..self.class_count())
            .filter(|c| !(novel_start..novel_end).contains(c))
            .collect();
        (0..self.config.pretrain_pairs)
            .map(|_| {
                let class = seen[rng.random_range(0..seen.len())];
                Ok(ImageTextPair {
                    image: self.render(&mut rng, class, &self.renderer)?,
                    tokens: self.caption(&mut rng, class),
                })
            })
            .collect()
    }

    fn make_task(&self) -> Result<FewShotTask> {
        let c = &self.config;
        let base: Vec<usize> = (0..c.base_classes).collect();
        let novel: Vec<usize> = (c.base_classes..c.base_classes + c.novel_classes).collect();
        let mut rng = stream(self.seed, STREAM_SAMPLES);
        let mut train = Vec::new();
        let mut base_eval = Vec::new();
        let mut novel_eval = Vec::new();
        for &class in base.iter().chain(&novel) {
            for i in 0..c.samples_per_class {
                let s = Sample {
                    image: self.render(&mut rng, class, &self.task_renderer)?,
                    class,
                };
                if class >= c.base_classes {
                    if i >= c.shots {
                        novel_eval.push(s);
                    }
                } else if i < c.shots {
                    train.push(s);
                } else {
                    base_eval.push(s);
                }
            }
        }
        Ok(FewShotTask {
            base_prompts: self.prompts(&base)?,
            novel_prompts: self.prompts(&novel)?,
            base_classes: base,
            novel_classes: novel,
            shots: c.shots,
            train,
            base_eval,
            novel_eval,
        })
    }
}
