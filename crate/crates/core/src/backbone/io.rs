//! Little-endian backbone file format.
//!
//! ```text
//! "FPLB" u32 version u32 k u32 c u32 d u32 d_img u32 L u32 H u32 S u64 num_samples
//! f32 features[num_samples × d_img]
//! u32 labels[num_samples]
//! f32 class_tokens[k × c × d]
//! blocks, each "u64 count, f32 values[count]":
//!     positional [S × d]
//!     per layer: ln1.γ ln1.β qkv.W qkv.b out.W out.b ln2.γ ln2.β fc1.W fc1.b fc2.W fc2.b
//!     projection [d × d_img]
//! ```
//!
//! The sidecar manifest (`<file>.json`) carries class names and the total
//! parameter count.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::{TransformerBlock, BLOCK_PARAM_TENSORS};
use crate::tensor::Tensor;

use super::{Backbone, BackboneManifest, ClassTokenEmbeddings, EncoderConfig, ImageFeatureTable, TextEncoder};

pub const MAGIC: &[u8; 4] = b"FPLB";
pub const FORMAT_VERSION: u32 = 1;

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "file truncated at byte {} while reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count.checked_mul(4).ok_or_else(|| Error::Format(format!("{what} too large")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn block(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        let count = self.u64(what)?;
        if count != expected as u64 {
            return Err(Error::Data(format!("{what} holds {count} values, expected {expected}")));
        }
        let data = self.f32s(expected, what)?;
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Data(format!("{what}: {e}")))
    }
}

fn dim(v: u32, name: &str) -> Result<usize> {
    if v == 0 {
        return Err(Error::Data(format!("header field {name} is zero")));
    }
    Ok(v as usize)
}

/// Reads and validates a backbone file plus its sidecar manifest.
///
/// Nothing is returned unless every check passes.
pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a backbone file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let k = dim(r.u32("k")?, "k")?;
    let c = dim(r.u32("c")?, "c")?;
    let d = dim(r.u32("d")?, "d")?;
    let d_img = dim(r.u32("d_img")?, "d_img")?;
    let depth = r.u32("L")? as usize;
    let heads = dim(r.u32("H")?, "H")?;
    let max_len = dim(r.u32("S")?, "S")?;
    let num_samples =
        usize::try_from(r.u64("num_samples")?).map_err(|_| Error::Format("num_samples overflows".into()))?;
    let config = EncoderConfig { width: d, depth, heads, max_len, out_dim: d_img };
    config.validate().map_err(|e| Error::Data(e.to_string()))?;
    if num_samples == 0 {
        return Err(Error::Data("backbone has no image features".into()));
    }

    let overflow = || Error::Format("header dimensions overflow".into());
    let feature_count = num_samples.checked_mul(d_img).ok_or_else(overflow)?;
    let token_count = k.checked_mul(c).and_then(|v| v.checked_mul(d)).ok_or_else(overflow)?;
    let features = r.f32s(feature_count, "image features")?;
    let labels: Vec<u32> = r
        .take(num_samples.checked_mul(4).ok_or_else(overflow)?, "labels")?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let tokens = r.f32s(token_count, "class token embeddings")?;

    let positional = r.block(&[max_len, d], "positional embeddings")?;
    let mut blocks = Vec::with_capacity(depth);
    for layer in 0..depth {
        let mut params = Vec::with_capacity(BLOCK_PARAM_TENSORS);
        for (i, shape) in TransformerBlock::param_shapes(d).iter().enumerate() {
            params.push(r.block(shape, &format!("layer {layer} tensor {i}"))?);
        }
        blocks.push(TransformerBlock::from_params(params, heads)?);
    }
    let projection = r.block(&[d, d_img], "projection")?;
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after projection", buf.len() - r.pos)));
    }

    let images = ImageFeatureTable::new(Tensor::from_parts(vec![num_samples, d_img], features), labels, k)?;
    let class_tokens = ClassTokenEmbeddings::new(
        Tensor::new(vec![k, c, d], tokens).map_err(|e| Error::Data(format!("class token embeddings: {e}")))?,
    )?;
    let encoder = TextEncoder::new(config, positional, blocks, projection)?;

    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?
    } else {
        BackboneManifest {
            class_names: (0..k).map(|i| format!("class_{i}")).collect(),
            parameter_count: (encoder.parameter_count() + class_tokens.parameter_count()) as u64,
            logit_scale: None,
            source: None,
            extra: Default::default(),
        }
    };
    Backbone::new(images, encoder, class_tokens, manifest)
}

/// Writes the binary file and its sidecar manifest.
pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<()> {
    let cfg = backbone.encoder().config();
    let tokens = backbone.class_tokens();
    let images = backbone.images();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        tokens.classes() as u32,
        tokens.tokens_per_class() as u32,
        cfg.width as u32,
        cfg.out_dim as u32,
        cfg.depth as u32,
        cfg.heads as u32,
        cfg.max_len as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(images.len() as u64).to_le_bytes());
    let put = |out: &mut Vec<u8>, t: &Tensor| {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&mut out, images.features());
    for l in images.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    put(&mut out, tokens.table());
    for t in backbone.encoder().params() {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        put(&mut out, t);
    }
    fs::write(path, out)?;
    let mut manifest = serde_json::to_string_pretty(backbone.manifest())?;
    manifest.push('\n');
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}
