//! The prompt learner: a shared `p × d` block of continuous prompt vectors
//! prepended to every class's token embeddings.
//!
//! Class probabilities are a softmax over cosine similarities between an image
//! feature and each class weight vector `w_j = h([P][K_j])`, divided by a
//! temperature `τ` (1 by default, which is the plain cosine softmax). Training
//! minimizes the mean negative log-likelihood of the true label, and the
//! gradient stops at `P`: the backbone never receives one.

use std::fs;
use std::path::Path;

use crate::backbone::{Backbone, EncodeCache};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream, tag};
use crate::tensor::{matmul_at, matmul_bt, Tensor};

/// Standard deviation of the seeded prompt initialization.
pub const PROMPT_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptVectors {
    values: Tensor,
}

impl PromptVectors {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim(format!("prompt block must be [p×d], got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::Data("prompt block holds a non-finite value".into()));
        }
        Ok(Self { values })
    }

    /// `N(0, 0.02²)` entries drawn from a stream derived from `seed`.
    pub fn init(len: usize, width: usize, seed: u64) -> Result<Self> {
        if len == 0 || width == 0 {
            return Err(Error::config("prompt length and width must be positive"));
        }
        let mut rng = stream(seed, &[tag("prompt-init")]);
        Self::new(Tensor::from_parts(vec![len, width], normal_vec(&mut rng, len * width, PROMPT_INIT_STD)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Prompt length `p`.
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Embedding width `d`.
    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_checkpoint(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_checkpoint(&fs::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPLP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `"FPLP" u32 version u32 p u32 d f32 values[p × d]`, little-endian.
pub fn encode_checkpoint(prompt: &PromptVectors) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * prompt.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, prompt.len() as u32, prompt.width() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in prompt.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PromptVectors> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a prompt checkpoint".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(1) != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", word(1))));
    }
    let (p, d) = (word(2) as usize, word(3) as usize);
    let payload = &bytes[16..];
    if payload.len() != p * d * 4 {
        return Err(Error::Format(format!("checkpoint payload is {} bytes, expected {}", payload.len(), p * d * 4)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    PromptVectors::new(Tensor::new(vec![p, d], data)?)
}

/// Pre-softmax scores `cos / τ`, `[batch × k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Tensor,
    pub temperature: f32,
}

/// Forward and backward passes of the prompt-conditioned classifier.
#[derive(Debug, Clone, Copy)]
pub struct PromptLearner<'a> {
    backbone: &'a Backbone,
    temperature: f32,
}

impl<'a> PromptLearner<'a> {
    pub fn new(backbone: &'a Backbone, temperature: f32) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { backbone, temperature })
    }

    /// Uses the backbone's recorded logit scale (τ = 1/scale) when present, else τ = 1.
    pub fn with_backbone_scale(backbone: &'a Backbone) -> Result<Self> {
        Self::new(backbone, backbone.logit_scale().map_or(1.0, |s| 1.0 / s))
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn backbone(&self) -> &'a Backbone {
        self.backbone
    }

    fn check_prompt(&self, prompt: &PromptVectors) -> Result<()> {
        let d = self.backbone.encoder().config().width;
        if prompt.width() != d {
            return Err(Error::dim(format!("prompt width {} differs from encoder width {d}", prompt.width())));
        }
        Ok(())
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let e = self.backbone.encoder().config().out_dim;
        if features.rank() != 2 || features.cols() != e {
            return Err(Error::dim(format!("features must be [batch×{e}], got {:?}", features.shape())));
        }
        Ok(())
    }

    /// Weight vector for one class.
    pub fn encode_class(&self, prompt: &PromptVectors, class: usize) -> Result<Tensor> {
        self.check_prompt(prompt)?;
        if class >= self.backbone.classes() {
            return Err(Error::dim(format!("class {class} out of {}", self.backbone.classes())));
        }
        let (w, _) = self.backbone.encoder().encode(Some(prompt.tensor()), self.backbone.class_tokens(), class)?;
        Ok(w)
    }

    /// All class weight vectors `[k × d_img]` plus the caches for backprop.
    pub fn class_weights(&self, prompt: &PromptVectors) -> Result<(Tensor, Vec<EncodeCache>)> {
        self.check_prompt(prompt)?;
        let k = self.backbone.classes();
        let e = self.backbone.encoder().config().out_dim;
        let mut data = Vec::with_capacity(k * e);
        let mut caches = Vec::with_capacity(k);
        for class in 0..k {
            let (w, cache) =
                self.backbone.encoder().encode(Some(prompt.tensor()), self.backbone.class_tokens(), class)?;
            data.extend_from_slice(w.data());
            caches.push(cache);
        }
        Ok((Tensor::from_parts(vec![k, e], data), caches))
    }

    pub fn logits(&self, prompt: &PromptVectors, features: &Tensor) -> Result<Logits> {
        self.check_features(features)?;
        let (weights, _) = self.class_weights(prompt)?;
        self.logits_with(&weights, features)
    }

    fn logits_with(&self, weights: &Tensor, features: &Tensor) -> Result<Logits> {
        let values = matmul_bt(features, weights)?.scale(1.0 / self.temperature);
        Ok(Logits { values, temperature: self.temperature })
    }

    /// Class probabilities `[batch × k]`.
    pub fn predict(&self, prompt: &PromptVectors, features: &Tensor) -> Result<Tensor> {
        let logits = self.logits(prompt, features)?;
        crate::tensor::softmax_rows(&logits.values)
    }

    /// Mean cross-entropy over the batch and its gradient with respect to the prompt.
    pub fn loss_and_grad(&self, prompt: &PromptVectors, features: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
        self.check_features(features)?;
        let batch = features.rows();
        if labels.is_empty() {
            return Err(Error::Empty("loss over an empty batch".into()));
        }
        if labels.len() != batch {
            return Err(Error::dim(format!("{} labels for {batch} samples", labels.len())));
        }
        let k = self.backbone.classes();
        if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Data(format!("label {l} out of {k} classes")));
        }
        let (weights, caches) = self.class_weights(prompt)?;
        let logits = self.logits_with(&weights, features)?;
        let (loss, dlogits) = cross_entropy(&logits.values, labels);
        // ∂loss/∂W = dlogitsᵀ · X / τ
        let dweights = matmul_at(&dlogits, features)?.scale(1.0 / self.temperature);
        let encoder = self.backbone.encoder();
        let mut grad = Tensor::zeros(prompt.tensor().shape());
        for (class, cache) in caches.iter().enumerate() {
            let upstream = Tensor::from_parts(vec![weights.cols()], dweights.row(class).to_vec());
            if let Some(g) = encoder.backward(cache, &upstream, None, self.backbone.class_tokens())? {
                grad.add_assign(&g)?;
            }
        }
        Ok((loss, grad))
    }
}

/// Mean negative log-likelihood and its gradient with respect to the logits.
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[u32]) -> (f32, Tensor) {
    let batch = logits.rows();
    let k = logits.cols();
    let mut grad = Tensor::zeros(&[batch, k]);
    let mut total = 0.0f32;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label as usize];
        let g = grad.row_mut(i);
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *gv = (p - if j == label as usize { 1.0 } else { 0.0 }) / batch as f32;
        }
    }
    (total / batch as f32, grad)
}

/// Share of trainable parameters: `prompt / (backbone + prompt)`.
pub fn trainable_parameter_ratio(prompt_params: u64, backbone_params: u64) -> f64 {
    let p = prompt_params as f64;
    p / (backbone_params as f64 + p)
}
