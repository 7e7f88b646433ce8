use crate::error::{Error, Result};
use crate::layers::{BlockCache, EmbeddingGrads, EmbeddingLookup, Layer, TransformerBlock};
use crate::tensor::{matmul, Tensor};

use super::ClassTokenEmbeddings;

/// Architecture hyperparameters of the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Token embedding width `d`.
    pub width: usize,
    /// Number of transformer blocks `L`.
    pub depth: usize,
    pub heads: usize,
    /// Maximum sequence length `S`.
    pub max_len: usize,
    /// Output (joint embedding) width, equal to the image feature width.
    pub out_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_len == 0 || self.out_dim == 0 {
            return Err(Error::config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!("width {} is not divisible into {} heads", self.width, self.heads)));
        }
        Ok(())
    }

    /// Parameters in one transformer block.
    pub fn block_parameter_count(&self) -> usize {
        TransformerBlock::param_shapes(self.width).iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Positional table + blocks + output projection.
    pub fn parameter_count(&self) -> usize {
        self.max_len * self.width + self.depth * self.block_parameter_count() + self.width * self.out_dim
    }
}

/// The frozen text branch `h(·)`: token sequence → unit vector in the joint space.
///
/// The sequence runs through pre-norm causal transformer blocks; the hidden
/// state at the final position is projected to `out_dim` and L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    config: EncoderConfig,
    positional: Tensor,
    blocks: Vec<TransformerBlock>,
    projection: Tensor,
}

pub struct EncodeCache {
    class: usize,
    prompt_len: usize,
    seq_len: usize,
    blocks: Vec<BlockCache>,
    last_hidden: Tensor,
    output: Tensor,
    norm: f32,
}

impl EncodeCache {
    /// The unit-norm class weight vector produced by the forward pass.
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// Parameter gradients for every encoder tensor plus the class token table.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub positional: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub projection: Tensor,
    pub class_tokens: Tensor,
}

impl TextEncoder {
    pub fn new(
        config: EncoderConfig,
        positional: Tensor,
        blocks: Vec<TransformerBlock>,
        projection: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        if positional.shape() != [config.max_len, config.width] {
            return Err(Error::Data(format!(
                "positional table {:?}, expected [{}, {}]",
                positional.shape(),
                config.max_len,
                config.width
            )));
        }
        if blocks.len() != config.depth {
            return Err(Error::Data(format!("{} blocks for depth {}", blocks.len(), config.depth)));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.width() != config.width || b.attn.heads != config.heads {
                return Err(Error::Data(format!("block {i} does not match encoder width/heads")));
            }
        }
        if projection.shape() != [config.width, config.out_dim] {
            return Err(Error::Data(format!(
                "projection {:?}, expected [{}, {}]",
                projection.shape(),
                config.width,
                config.out_dim
            )));
        }
        let enc = Self { config, positional, blocks, projection };
        if enc.params().iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("non-finite encoder parameter".into()));
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    /// Every parameter tensor in serialization order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.positional];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.push(&self.projection);
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.positional];
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.push(&mut self.projection);
        p
    }

    pub fn zero_grads(&self, class_tokens: &ClassTokenEmbeddings) -> EncoderGrads {
        EncoderGrads {
            positional: Tensor::zeros(self.positional.shape()),
            blocks: self.blocks.iter().map(TransformerBlock::zeros_like).collect(),
            projection: Tensor::zeros(self.projection.shape()),
            class_tokens: Tensor::zeros(class_tokens.table().shape()),
        }
    }

    /// Forward pass for class `class` with an optional prompt block `[p × d]`.
    pub fn encode(
        &self,
        prompt: Option<&Tensor>,
        class_tokens: &ClassTokenEmbeddings,
        class: usize,
    ) -> Result<(Tensor, EncodeCache)> {
        if class_tokens.width() != self.config.width {
            return Err(Error::dim("class token width differs from encoder width"));
        }
        let lookup = EmbeddingLookup { table: class_tokens.table(), class, positional: &self.positional };
        let mut x = lookup.assemble(prompt)?;
        let seq_len = x.rows();
        let prompt_len = prompt.map_or(0, Tensor::rows);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        let last_hidden = x.slice_rows(seq_len - 1, seq_len)?;
        let z = matmul(&last_hidden, &self.projection)?;
        let norm = z.l2_norm().max(f32::MIN_POSITIVE);
        let output = Tensor::from_parts(vec![self.config.out_dim], z.data().iter().map(|v| v / norm).collect());
        let cache =
            EncodeCache { class, prompt_len, seq_len, blocks: caches, last_hidden, output: output.clone(), norm };
        Ok((output, cache))
    }

    /// Backpropagates `grad_output` (∂objective/∂w, length `out_dim`) through
    /// one encode call. Returns the prompt-row gradient when a prompt was used.
    /// Encoder parameters only receive gradients when `grads` is provided.
    pub fn backward(
        &self,
        cache: &EncodeCache,
        grad_output: &Tensor,
        mut grads: Option<&mut EncoderGrads>,
        class_tokens: &ClassTokenEmbeddings,
    ) -> Result<Option<Tensor>> {
        let d = self.config.width;
        let e = self.config.out_dim;
        if grad_output.len() != e {
            return Err(Error::dim(format!("encoder upstream has {} entries, expected {e}", grad_output.len())));
        }
        // w = z/|z|  ⇒  dz = (dw − w (w·dw)) / |z|
        let w = cache.output.data();
        let dw = grad_output.data();
        let wd = crate::tensor::dot(w, dw);
        let dz: Vec<f32> = dw.iter().zip(w).map(|(g, wv)| (g - wv * wd) / cache.norm).collect();
        let dz = Tensor::from_parts(vec![1, e], dz);
        if let Some(g) = grads.as_deref_mut() {
            g.projection.add_assign(&crate::tensor::matmul_at(&cache.last_hidden, &dz)?)?;
        }
        let dlast = crate::tensor::matmul_bt(&dz, &self.projection)?;
        let mut dx = Tensor::zeros(&[cache.seq_len, d]);
        dx.row_mut(cache.seq_len - 1).copy_from_slice(dlast.data());
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let block_grads = grads.as_deref_mut().map(|g| &mut g.blocks[i]);
            dx = block.backward(&cache.blocks[i], &dx, block_grads)?;
        }
        let lookup = EmbeddingLookup { table: class_tokens.table(), class: cache.class, positional: &self.positional };
        match grads {
            Some(g) => {
                let mut emb = EmbeddingGrads {
                    table: std::mem::replace(&mut g.class_tokens, Tensor::zeros(&[1])),
                    positional: std::mem::replace(&mut g.positional, Tensor::zeros(&[1])),
                };
                let out = lookup.backward_sequence(cache.prompt_len, &dx, Some(&mut emb));
                g.class_tokens = emb.table;
                g.positional = emb.positional;
                out
            }
            None => lookup.backward_sequence(cache.prompt_len, &dx, None),
        }
    }
}
