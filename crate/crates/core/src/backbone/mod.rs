//! The frozen dual encoder.
//!
//! The image branch is a precomputed table of unit-norm features `g(x)`; the
//! text branch is a small transformer that maps `[prompt vectors][class tokens]`
//! to a class weight vector. Nothing in here is ever mutated after loading.

mod encoder;
mod io;
mod synthetic;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use encoder::{EncodeCache, EncoderConfig, EncoderGrads, TextEncoder};
pub use io::{load_backbone, manifest_path, save_backbone, FORMAT_VERSION, MAGIC};
pub(crate) use synthetic::random_encoder;
pub use synthetic::{generate_synthetic_backbone, GenerationReport, SyntheticSpec, WEIGHT_STD};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the unit norm of every feature row.
pub const UNIT_NORM_TOLERANCE: f32 = 1e-5;

/// Precomputed image features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureTable {
    features: Tensor,
    labels: Vec<u32>,
    classes: usize,
}

impl ImageFeatureTable {
    pub fn new(features: Tensor, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Data(format!("feature table must be 2-D, got {:?}", features.shape())));
        }
        if labels.len() != features.rows() {
            return Err(Error::Data(format!("{} labels for {} feature rows", labels.len(), features.rows())));
        }
        for i in 0..features.rows() {
            let row = features.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("feature row {i} contains a non-finite value")));
            }
            let norm = crate::tensor::dot(row, row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Data(format!("feature row {i} has norm {norm}, expected 1")));
            }
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::Data(format!("label {l} at row {i} is not below class count {classes}")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Word embeddings of every class name: `[k × c × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTokenEmbeddings {
    table: Tensor,
}

impl ClassTokenEmbeddings {
    pub fn new(table: Tensor) -> Result<Self> {
        let s = table.shape();
        if s.len() != 3 {
            return Err(Error::Data(format!("class token table must be [k×c×d], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {}", s[0])));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Only the baselines' private model copies are ever trained.
    pub(crate) fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn classes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn tokens_per_class(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.table.shape()[2]
    }

    pub fn parameter_count(&self) -> usize {
        self.table.len()
    }
}

/// Sidecar description of a backbone file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub class_names: Vec<String>,
    /// Total parameters of the shipped model, used for cost accounting.
    /// Real exports include the image tower, which is not stored in the file.
    pub parameter_count: u64,
    /// Multiplier applied to cosine logits by the exported model, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Anything else the producer chose to record.
    #[serde(default, flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// A loaded, validated backbone. Immutable; share it by reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    images: ImageFeatureTable,
    encoder: TextEncoder,
    class_tokens: ClassTokenEmbeddings,
    manifest: BackboneManifest,
}

impl Backbone {
    pub fn new(
        images: ImageFeatureTable,
        encoder: TextEncoder,
        class_tokens: ClassTokenEmbeddings,
        manifest: BackboneManifest,
    ) -> Result<Self> {
        let cfg = encoder.config();
        let k = class_tokens.classes();
        if images.classes() != k {
            return Err(Error::Data(format!("feature table has {} classes, tokens {k}", images.classes())));
        }
        if images.dim() != cfg.out_dim {
            return Err(Error::Data(format!(
                "feature width {} differs from encoder output width {}",
                images.dim(),
                cfg.out_dim
            )));
        }
        if class_tokens.width() != cfg.width {
            return Err(Error::Data(format!(
                "class token width {} differs from encoder width {}",
                class_tokens.width(),
                cfg.width
            )));
        }
        if class_tokens.tokens_per_class() > cfg.max_len {
            return Err(Error::Data("class tokens alone exceed the maximum sequence length".into()));
        }
        if manifest.class_names.len() != k {
            return Err(Error::Data(format!(
                "manifest names {} classes, backbone has {k}",
                manifest.class_names.len()
            )));
        }
        let stored = (encoder.parameter_count() + class_tokens.parameter_count()) as u64;
        if manifest.parameter_count < stored {
            return Err(Error::Data(format!(
                "manifest parameter count {} is below the {stored} parameters stored in the file",
                manifest.parameter_count
            )));
        }
        Ok(Self { images, encoder, class_tokens, manifest })
    }

    pub fn images(&self) -> &ImageFeatureTable {
        &self.images
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn class_tokens(&self) -> &ClassTokenEmbeddings {
        &self.class_tokens
    }

    pub fn manifest(&self) -> &BackboneManifest {
        &self.manifest
    }

    pub fn classes(&self) -> usize {
        self.class_tokens.classes()
    }

    /// Parameter count used for cost accounting (from the manifest).
    pub fn parameter_count(&self) -> u64 {
        self.manifest.parameter_count
    }

    /// Logit scale recorded by the producer; `None` means plain cosines.
    pub fn logit_scale(&self) -> Option<f32> {
        self.manifest.logit_scale
    }

    /// SHA-256 over every numeric value the backbone holds.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        feed(self.images.features());
        feed(self.class_tokens.table());
        for p in self.encoder.params() {
            feed(p);
        }
        for l in self.images.labels() {
            h.update(l.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_table_validation() {
        let ok = Tensor::matrix(&[&[1.0, 0.0], &[0.6, 0.8]]).unwrap();
        assert!(ImageFeatureTable::new(ok.clone(), vec![0, 1], 2).is_ok());
        assert!(matches!(ImageFeatureTable::new(ok.clone(), vec![0, 2], 2), Err(Error::Data(_))));
        assert!(ImageFeatureTable::new(ok, vec![0], 2).is_err());
        let bad = Tensor::matrix(&[&[1.0, 0.0], &[0.5, 0.5]]).unwrap();
        let err = ImageFeatureTable::new(bad, vec![0, 1], 2).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn class_tokens_need_two_classes() {
        assert!(ClassTokenEmbeddings::new(Tensor::zeros(&[1, 1, 4])).is_err());
        assert!(ClassTokenEmbeddings::new(Tensor::zeros(&[2, 4])).is_err());
        assert!(ClassTokenEmbeddings::new(Tensor::zeros(&[2, 1, 4])).is_ok());
    }
}
