//! What a client trains: the prompt block, or the whole model for the
//! fine-tuning and from-scratch baselines.
//!
//! Federation only sees a flat parameter tensor `θ` and an [`Objective`] that
//! turns `(θ, batch)` into a loss and `∂loss/∂θ`.

use serde::{Deserialize, Serialize};

use crate::backbone::{random_encoder, Backbone, ClassTokenEmbeddings, EncoderGrads, TextEncoder, WEIGHT_STD};
use crate::error::{Error, Result};
use crate::layers::{Layer, Linear};
use crate::prompt::{cross_entropy, PromptLearner, PromptVectors};
use crate::rng::{normal_vec, stream, tag};
use crate::tensor::{matmul_at, matmul_bt, softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    /// Train only the shared prompt block.
    PromptFl,
    /// Train every model parameter starting from the loaded weights.
    Finetune,
    /// Train every model parameter from a random initialization.
    Scratch,
}

impl TrainerKind {
    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::PromptFl => "promptfl",
            TrainerKind::Finetune => "finetune",
            TrainerKind::Scratch => "scratch",
        }
    }
}

pub trait Objective: Sync {
    /// Entries in `θ`.
    fn parameter_count(&self) -> usize;

    /// Tokens per encoder call, used for compute accounting.
    fn sequence_len(&self) -> usize;

    fn loss_and_grad(&self, theta: &Tensor, features: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)>;

    /// Class probabilities `[batch × k]`.
    fn predict(&self, theta: &Tensor, features: &Tensor) -> Result<Tensor>;
}

/// `θ = P`, shape `[p × d]`.
pub struct PromptObjective<'a> {
    learner: PromptLearner<'a>,
    prompt_len: usize,
}

impl<'a> PromptObjective<'a> {
    pub fn new(learner: PromptLearner<'a>, prompt_len: usize) -> Self {
        Self { learner, prompt_len }
    }

    fn prompt(&self, theta: &Tensor) -> Result<PromptVectors> {
        PromptVectors::new(theta.clone())
    }
}

impl Objective for PromptObjective<'_> {
    fn parameter_count(&self) -> usize {
        self.prompt_len * self.learner.backbone().encoder().config().width
    }

    fn sequence_len(&self) -> usize {
        self.prompt_len + self.learner.backbone().class_tokens().tokens_per_class()
    }

    fn loss_and_grad(&self, theta: &Tensor, features: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
        self.learner.loss_and_grad(&self.prompt(theta)?, features, labels)
    }

    fn predict(&self, theta: &Tensor, features: &Tensor) -> Result<Tensor> {
        self.learner.predict(&self.prompt(theta)?, features)
    }
}

/// The complete trainable classifier used by the baselines: the text encoder
/// and class token table produce class weights, a linear head maps image
/// features into the joint space, and logits are cosines over `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullModel {
    pub encoder: TextEncoder,
    pub class_tokens: ClassTokenEmbeddings,
    /// `[d_img × d_img]` image-side head.
    pub head: Linear,
}

impl FullModel {
    /// Loaded weights with an identity head.
    pub fn pretrained(backbone: &Backbone) -> Self {
        let e = backbone.encoder().config().out_dim;
        Self {
            encoder: backbone.encoder().clone(),
            class_tokens: backbone.class_tokens().clone(),
            head: Linear { weight: Tensor::identity(e), bias: Tensor::zeros(&[e]) },
        }
    }

    /// Same shapes as `backbone`, every weight redrawn from `seed`.
    pub fn random(backbone: &Backbone, seed: u64) -> Result<Self> {
        let cfg = *backbone.encoder().config();
        let mut rng = stream(seed, &[tag("scratch-init")]);
        let encoder = random_encoder(cfg, WEIGHT_STD, &mut rng)?;
        let shape = backbone.class_tokens().table().shape().to_vec();
        let n = shape.iter().product();
        let class_tokens = ClassTokenEmbeddings::new(Tensor::from_parts(shape, normal_vec(&mut rng, n, WEIGHT_STD)))?;
        let e = cfg.out_dim;
        let head = Linear {
            weight: Tensor::from_parts(vec![e, e], normal_vec(&mut rng, e * e, WEIGHT_STD)),
            bias: Tensor::zeros(&[e]),
        };
        Ok(Self { encoder, class_tokens, head })
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.params();
        t.push(self.class_tokens.table());
        t.extend(self.head.params());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.params_mut();
        t.push(self.class_tokens.table_mut());
        t.extend(self.head.params_mut());
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Tensor {
        let data: Vec<f32> = self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_parts(vec![n], data)
    }

    /// Overwrites every parameter from a flat vector laid out like [`Self::flatten`].
    pub fn load_flat(&mut self, theta: &Tensor) -> Result<()> {
        if theta.len() != self.parameter_count() {
            return Err(Error::dim(format!("θ has {} entries, model has {}", theta.len(), self.parameter_count())));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&theta.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn class_weights(&self) -> Result<(Tensor, Vec<crate::backbone::EncodeCache>)> {
        let k = self.class_tokens.classes();
        let e = self.encoder.config().out_dim;
        let mut data = Vec::with_capacity(k * e);
        let mut caches = Vec::with_capacity(k);
        for class in 0..k {
            let (w, cache) = self.encoder.encode(None, &self.class_tokens, class)?;
            data.extend_from_slice(w.data());
            caches.push(cache);
        }
        Ok((Tensor::from_parts(vec![k, e], data), caches))
    }

    /// Head output rows normalized to unit length, plus the pre-normalization norms.
    fn embed_images(&self, features: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>)> {
        let (u, cache) = self.head.forward(features)?;
        let mut z = u.clone();
        let mut norms = Vec::with_capacity(u.rows());
        for i in 0..u.rows() {
            let row = z.row_mut(i);
            let n = crate::tensor::dot(row, row).sqrt().max(f32::MIN_POSITIVE);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok((z, cache, norms))
    }
}

/// `θ` = every [`FullModel`] parameter, flattened.
pub struct FullModelObjective {
    template: FullModel,
    temperature: f32,
}

impl FullModelObjective {
    pub fn new(template: FullModel, temperature: f32) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { template, temperature })
    }

    fn model(&self, theta: &Tensor) -> Result<FullModel> {
        let mut m = self.template.clone();
        m.load_flat(theta)?;
        Ok(m)
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let e = self.template.encoder.config().out_dim;
        if features.rank() != 2 || features.cols() != e {
            return Err(Error::dim(format!("features must be [batch×{e}], got {:?}", features.shape())));
        }
        Ok(())
    }
}

impl Objective for FullModelObjective {
    fn parameter_count(&self) -> usize {
        self.template.parameter_count()
    }

    fn sequence_len(&self) -> usize {
        self.template.class_tokens.tokens_per_class()
    }

    fn loss_and_grad(&self, theta: &Tensor, features: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
        self.check_features(features)?;
        if labels.is_empty() {
            return Err(Error::Empty("loss over an empty batch".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::dim("labels and features differ in length"));
        }
        let model = self.model(theta)?;
        let k = model.class_tokens.classes();
        if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Data(format!("label {l} out of {k} classes")));
        }
        let inv_t = 1.0 / self.temperature;
        let (weights, caches) = model.class_weights()?;
        let (z, head_cache, norms) = model.embed_images(features)?;
        let logits = matmul_bt(&z, &weights)?.scale(inv_t);
        let (loss, dlogits) = cross_entropy(&logits, labels);

        let dz = crate::tensor::matmul(&dlogits, &weights)?.scale(inv_t);
        let dweights = matmul_at(&dlogits, &z)?.scale(inv_t);

        // z = u/|u|  ⇒  du = (dz − z (z·dz)) / |u|
        let mut du = dz;
        for (i, &n) in norms.iter().enumerate() {
            let zi = z.row(i).to_vec();
            let row = du.row_mut(i);
            let proj = crate::tensor::dot(&zi, row);
            for (g, zv) in row.iter_mut().zip(&zi) {
                *g = (*g - zv * proj) / n;
            }
        }
        let mut head_grads = model.head.zeros_like();
        model.head.backward(&head_cache, &du, Some(&mut head_grads))?;

        let mut enc_grads: EncoderGrads = model.encoder.zero_grads(&model.class_tokens);
        for (class, cache) in caches.iter().enumerate() {
            let upstream = Tensor::from_parts(vec![weights.cols()], dweights.row(class).to_vec());
            model.encoder.backward(cache, &upstream, Some(&mut enc_grads), &model.class_tokens)?;
        }

        let mut flat = Vec::with_capacity(model.parameter_count());
        flat.extend_from_slice(enc_grads.positional.data());
        for b in &enc_grads.blocks {
            for t in b.params() {
                flat.extend_from_slice(t.data());
            }
        }
        flat.extend_from_slice(enc_grads.projection.data());
        flat.extend_from_slice(enc_grads.class_tokens.data());
        flat.extend_from_slice(head_grads.weight.data());
        flat.extend_from_slice(head_grads.bias.data());
        let n = flat.len();
        Ok((loss, Tensor::from_parts(vec![n], flat)))
    }

    fn predict(&self, theta: &Tensor, features: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        let model = self.model(theta)?;
        let (weights, _) = model.class_weights()?;
        let (z, _, _) = model.embed_images(features)?;
        softmax_rows(&matmul_bt(&z, &weights)?.scale(1.0 / self.temperature))
    }
}

/// An objective together with the starting `θ` for a trainer kind.
pub struct TrainerSetup<'a> {
    pub objective: Box<dyn Objective + 'a>,
    pub initial: Tensor,
}

/// Builds the objective and initial parameters for `kind`.
pub fn build_trainer<'a>(
    kind: TrainerKind,
    backbone: &'a Backbone,
    prompt_len: usize,
    temperature: f32,
    seed: u64,
) -> Result<TrainerSetup<'a>> {
    match kind {
        TrainerKind::PromptFl => {
            let d = backbone.encoder().config().width;
            let learner = PromptLearner::new(backbone, temperature)?;
            let initial = PromptVectors::init(prompt_len, d, seed)?.into_tensor();
            Ok(TrainerSetup { objective: Box::new(PromptObjective::new(learner, prompt_len)), initial })
        }
        TrainerKind::Finetune | TrainerKind::Scratch => {
            let model = if kind == TrainerKind::Finetune {
                FullModel::pretrained(backbone)
            } else {
                FullModel::random(backbone, seed)?
            };
            let initial = model.flatten();
            Ok(TrainerSetup { objective: Box::new(FullModelObjective::new(model, temperature)?), initial })
        }
    }
}
