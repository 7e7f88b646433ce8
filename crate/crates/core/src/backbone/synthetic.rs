//! Desk-scale stand-in for a pre-trained dual encoder.
//!
//! The text encoder and class token embeddings are random and frozen. Class
//! prototypes in the image space are the encoder's own outputs for each class
//! under a hidden random context prompt, so the two branches are aligned the
//! way a pre-trained model's are, while the context a learned prompt should
//! recover is not revealed. Image features are noisy, renormalized copies of
//! the prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::TransformerBlock;
use crate::partition::synthesize_labels;
use crate::rng::{normal_vec, stream, tag, Rng};
use crate::tensor::{argmax, dot, Tensor};

use super::{Backbone, BackboneManifest, ClassTokenEmbeddings, EncoderConfig, ImageFeatureTable, TextEncoder};

/// Initialization scale of randomly initialized trainable models.
pub const WEIGHT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub width: usize,
    pub depth: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
    #[serde(default = "defaults::class_tokens")]
    pub class_tokens: usize,
    /// Joint embedding width; defaults to `width`.
    #[serde(default)]
    pub out_dim: Option<usize>,
    pub samples_per_class: usize,
    pub noise: f32,
    pub seed: u64,
    /// Length of the hidden context prompt that defines the prototypes.
    #[serde(default = "defaults::context_len")]
    pub context_len: usize,
    #[serde(default = "defaults::token_std")]
    pub token_std: f32,
    #[serde(default = "defaults::context_std")]
    pub context_std: f32,
    /// Standard deviation of the encoder's weight matrices and positions;
    /// defaults to `1 / sqrt(width)`.
    #[serde(default)]
    pub weight_std: Option<f32>,
}

mod defaults {
    pub fn heads() -> usize {
        2
    }
    pub fn max_len() -> usize {
        16
    }
    pub fn class_tokens() -> usize {
        1
    }
    pub fn context_len() -> usize {
        4
    }
    pub fn token_std() -> f32 {
        1.0
    }
    pub fn context_std() -> f32 {
        1.0
    }
}

impl SyntheticSpec {
    /// A spec with default architecture extras.
    pub fn new(classes: usize, width: usize, depth: usize, seed: u64, samples_per_class: usize, noise: f32) -> Self {
        Self {
            classes,
            width,
            depth,
            heads: defaults::heads(),
            max_len: defaults::max_len(),
            class_tokens: defaults::class_tokens(),
            out_dim: None,
            samples_per_class,
            noise,
            seed,
            context_len: defaults::context_len(),
            token_std: defaults::token_std(),
            context_std: defaults::context_std(),
            weight_std: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim.unwrap_or(self.width)
    }

    pub fn weight_std(&self) -> f32 {
        self.weight_std.unwrap_or(1.0 / (self.width as f32).sqrt())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            width: self.width,
            depth: self.depth,
            heads: self.heads,
            max_len: self.max_len,
            out_dim: self.out_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.width < 4 {
            return Err(Error::config(format!("width must be at least 4, got {}", self.width)));
        }
        if self.depth < 1 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.class_tokens < 1 || self.samples_per_class < 1 {
            return Err(Error::config("class_tokens and samples_per_class must be positive"));
        }
        if self.context_len + self.class_tokens > self.max_len {
            return Err(Error::config(format!(
                "context ({}) plus class tokens ({}) exceed max_len {}",
                self.context_len, self.class_tokens, self.max_len
            )));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("token_std", self.token_std),
            ("context_std", self.context_std),
            ("weight_std", self.weight_std()),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        self.encoder_config().validate()
    }
}

/// What generation learned about its own output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationReport {
    /// Unit-norm class prototypes `[k × d_img]`.
    #[serde(skip)]
    pub prototypes: Tensor,
    /// Training accuracy of the nearest-prototype classifier on the features.
    pub nearest_prototype_accuracy: f64,
    pub parameter_count: u64,
}

/// Encoder with `N(0, std²)` matrices and positions, unit gains, zero biases.
pub(crate) fn random_encoder(cfg: EncoderConfig, std: f32, rng: &mut Rng) -> Result<TextEncoder> {
    let d = cfg.width;
    let positional = Tensor::from_parts(vec![cfg.max_len, d], normal_vec(rng, cfg.max_len * d, std));
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        let params = TransformerBlock::param_shapes(d)
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n = shape.iter().product();
                let data = match i {
                    // layer norm gains
                    0 | 6 => vec![1.0; n],
                    // matrices
                    2 | 4 | 8 | 10 => normal_vec(rng, n, std),
                    // biases and layer norm shifts
                    _ => vec![0.0; n],
                };
                Tensor::from_parts(shape, data)
            })
            .collect();
        blocks.push(TransformerBlock::from_params(params, cfg.heads)?);
    }
    let projection = Tensor::from_parts(vec![d, cfg.out_dim], normal_vec(rng, d * cfg.out_dim, std));
    TextEncoder::new(cfg, positional, blocks, projection)
}

fn normalize(v: &mut [f32]) {
    let n = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// Builds a backbone deterministically from `spec`.
pub fn generate_synthetic_backbone(spec: &SyntheticSpec) -> Result<(Backbone, GenerationReport)> {
    spec.validate()?;
    let k = spec.classes;
    let d = spec.width;
    let e = spec.out_dim();
    let encoder = random_encoder(spec.encoder_config(), spec.weight_std(), &mut stream(spec.seed, &[tag("encoder")]))?;

    let mut rng = stream(spec.seed, &[tag("class-tokens")]);
    let tokens = ClassTokenEmbeddings::new(Tensor::from_parts(
        vec![k, spec.class_tokens, d],
        normal_vec(&mut rng, k * spec.class_tokens * d, spec.token_std),
    ))?;

    let mut rng = stream(spec.seed, &[tag("context")]);
    let context = (spec.context_len > 0).then(|| {
        Tensor::from_parts(vec![spec.context_len, d], normal_vec(&mut rng, spec.context_len * d, spec.context_std))
    });
    let mut protos = Vec::with_capacity(k * e);
    for class in 0..k {
        let (w, _) = encoder.encode(context.as_ref(), &tokens, class)?;
        protos.extend_from_slice(w.data());
    }
    let prototypes = Tensor::from_parts(vec![k, e], protos);

    let labels = synthesize_labels(k, spec.samples_per_class, spec.seed);
    let mut rng = stream(spec.seed, &[tag("image-noise")]);
    let mut features = Vec::with_capacity(labels.len() * e);
    for &label in &labels {
        let mut row = prototypes.row(label as usize).to_vec();
        if spec.noise > 0.0 {
            for (x, n) in row.iter_mut().zip(normal_vec(&mut rng, e, spec.noise)) {
                *x += n;
            }
            normalize(&mut row);
        }
        features.extend_from_slice(&row);
    }
    let features = Tensor::from_parts(vec![labels.len(), e], features);

    let correct = (0..labels.len())
        .filter(|&i| {
            let scores: Vec<f32> = (0..k).map(|j| dot(features.row(i), prototypes.row(j))).collect();
            argmax(&scores) == labels[i] as usize
        })
        .count();
    let images = ImageFeatureTable::new(features, labels.clone(), k)?;

    let parameter_count = (encoder.parameter_count() + tokens.parameter_count()) as u64;
    let manifest = BackboneManifest {
        class_names: (0..k).map(|i| format!("class_{i}")).collect(),
        parameter_count,
        logit_scale: None,
        source: Some(format!("synthetic seed={} noise={}", spec.seed, spec.noise)),
        extra: Default::default(),
    };
    let backbone = Backbone::new(images, encoder, tokens, manifest)?;
    let report = GenerationReport {
        prototypes,
        nearest_prototype_accuracy: correct as f64 / labels.len() as f64,
        parameter_count,
    };
    Ok((backbone, report))
}
