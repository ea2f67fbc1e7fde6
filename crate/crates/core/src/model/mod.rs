//! Decoder-only transformer with capture and patch hooks on the residual
//! stream.
//!
//! A block reads the residual states of the previous layer and adds its
//! contribution to every position:
//!
//! ```text
//! h[m][λ] = h[m][λ-1] + f_λ(h[1][λ-1], ..., h[m][λ-1])
//! ```
//!
//! where `f_λ` is pre-norm causal self-attention followed by a pre-norm MLP.
//! Layer `0` is the embedding output (token row plus position row). The final
//! logits at every position are `unembed(final_norm(h[m][Λ]))`.
//!
//! Positions are 0-based throughout the crate: a sequence of length `M` has
//! its last token at `M - 1` and its penultimate token at `M - 2`.

mod forward;
mod io;

pub use forward::{block_contribution, forward, patched_forward, resume_with_patch, LayerTrace, Patch};
pub use io::{load_model, save_model, BLOB_FILE, MANIFEST_FILE};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Identity,
}

fn default_eps() -> f32 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    pub norm: NormKind,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.d_model == 0 {
            return bad("d_model must be positive");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.n_heads == 0 || self.head_dim == 0 {
            return bad("n_heads and head_dim must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive");
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }

    /// Width of the concatenated attention heads.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Vec<f32>,
    /// `d_model × attn_width`
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `attn_width × d_model`
    pub wo: Matrix,
    pub norm2: Vec<f32>,
    /// `d_model × mlp_hidden`
    pub w1: Matrix,
    /// `mlp_hidden × d_model`
    pub w2: Matrix,
}

impl Block {
    fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.d_model;
        let a = spec.attn_width();
        Self {
            norm1: vec![1.0; d],
            wq: Matrix::zeros(d, a),
            wk: Matrix::zeros(d, a),
            wv: Matrix::zeros(d, a),
            wo: Matrix::zeros(a, d),
            norm2: vec![1.0; d],
            w1: Matrix::zeros(d, spec.mlp_hidden),
            w2: Matrix::zeros(spec.mlp_hidden, d),
        }
    }
}

/// Immutable model weights. Construct through [`Model::new`],
/// [`Model::zeros`], [`build_random_model`] or [`load_model`]; every path
/// validates shapes and finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    embed: Matrix,
    pos: Matrix,
    blocks: Vec<Block>,
    final_norm: Vec<f32>,
    unembed: Matrix,
}

/// Name and shape of one stored tensor, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Model {
    pub fn new(
        spec: ModelSpec,
        embed: Matrix,
        pos: Matrix,
        blocks: Vec<Block>,
        final_norm: Vec<f32>,
        unembed: Matrix,
    ) -> Result<Self> {
        spec.validate()?;
        let model = Self {
            spec,
            embed,
            pos,
            blocks,
            final_norm,
            unembed,
        };
        model.check()?;
        Ok(model)
    }

    /// All weights zero, norm gains one.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        Self::new(
            spec.clone(),
            Matrix::zeros(spec.vocab_size, d),
            Matrix::zeros(spec.max_seq_len, d),
            (0..spec.n_layers).map(|_| Block::zeros(&spec)).collect(),
            vec![1.0; d],
            Matrix::zeros(d, spec.vocab_size),
        )
    }

    fn check(&self) -> Result<()> {
        if self.blocks.len() != self.spec.n_layers {
            return Err(Error::ManifestMismatch(format!(
                "{} blocks for n_layers = {}",
                self.blocks.len(),
                self.spec.n_layers
            )));
        }
        for (info, data) in self.tensor_infos().iter().zip(self.tensor_data()) {
            let want: usize = info.shape.iter().product();
            if want != data.len() {
                return Err(Error::ManifestMismatch(format!(
                    "tensor {} has {} values, shape {:?} needs {}",
                    info.name,
                    data.len(),
                    info.shape,
                    want
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "tensor {} has non-finite values",
                    info.name
                )));
            }
        }
        let shapes_ok = self.embed.shape() == (self.spec.vocab_size, self.spec.d_model)
            && self.pos.shape() == (self.spec.max_seq_len, self.spec.d_model)
            && self.unembed.shape() == (self.spec.d_model, self.spec.vocab_size)
            && self.final_norm.len() == self.spec.d_model
            && self.blocks.iter().all(|b| {
                let (d, a, h) = (self.spec.d_model, self.spec.attn_width(), self.spec.mlp_hidden);
                b.norm1.len() == d
                    && b.norm2.len() == d
                    && b.wq.shape() == (d, a)
                    && b.wk.shape() == (d, a)
                    && b.wv.shape() == (d, a)
                    && b.wo.shape() == (a, d)
                    && b.w1.shape() == (d, h)
                    && b.w2.shape() == (h, d)
            });
        if !shapes_ok {
            return Err(Error::ManifestMismatch(
                "tensor shapes disagree with the model spec".into(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn embed(&self) -> &Matrix {
        &self.embed
    }

    pub fn pos(&self) -> &Matrix {
        &self.pos
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn unembed(&self) -> &Matrix {
        &self.unembed
    }

    /// Copy with a modified embedding table (used by language perturbation).
    pub fn with_embed(&self, embed: Matrix) -> Result<Self> {
        let mut m = self.clone();
        m.embed = embed;
        m.check()?;
        Ok(m)
    }

    /// Tensor names and shapes in storage order.
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        tensor_layout(&self.spec)
    }

    /// Tensor contents in the order of [`Model::tensor_infos`].
    pub fn tensor_data(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embed.as_slice(), self.pos.as_slice()];
        for b in &self.blocks {
            out.extend([
                b.wq.as_slice(),
                b.wk.as_slice(),
                b.wv.as_slice(),
                b.wo.as_slice(),
                b.w1.as_slice(),
                b.w2.as_slice(),
                b.norm1.as_slice(),
                b.norm2.as_slice(),
            ]);
        }
        out.push(&self.final_norm);
        out.push(self.unembed.as_slice());
        out
    }

    /// SHA-256 over the spec and every weight bit pattern, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for t in self.tensor_data() {
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn tensor_layout(spec: &ModelSpec) -> Vec<TensorInfo> {
    let (d, a, h, v) = (spec.d_model, spec.attn_width(), spec.mlp_hidden, spec.vocab_size);
    let t = |name: String, shape: Vec<usize>| TensorInfo { name, shape };
    let mut out = vec![
        t("embed".into(), vec![v, d]),
        t("pos".into(), vec![spec.max_seq_len, d]),
    ];
    for i in 0..spec.n_layers {
        out.extend([
            t(format!("block.{i}.attn.q"), vec![d, a]),
            t(format!("block.{i}.attn.k"), vec![d, a]),
            t(format!("block.{i}.attn.v"), vec![d, a]),
            t(format!("block.{i}.attn.o"), vec![a, d]),
            t(format!("block.{i}.mlp.w1"), vec![d, h]),
            t(format!("block.{i}.mlp.w2"), vec![h, d]),
            t(format!("block.{i}.norm1"), vec![d]),
            t(format!("block.{i}.norm2"), vec![d]),
        ]);
    }
    out.push(t("final_norm".into(), vec![d]));
    out.push(t("unembed".into(), vec![d, v]));
    out
}

/// Rebuild a model from tensors listed in [`tensor_layout`] order.
pub(crate) fn from_tensors(spec: ModelSpec, mut tensors: Vec<Vec<f32>>) -> Result<Model> {
    spec.validate()?;
    let layout = tensor_layout(&spec);
    if tensors.len() != layout.len() {
        return Err(Error::ManifestMismatch(format!(
            "expected {} tensors, got {}",
            layout.len(),
            tensors.len()
        )));
    }
    let (d, a, h, v) = (spec.d_model, spec.attn_width(), spec.mlp_hidden, spec.vocab_size);
    let mut it = tensors.drain(..);
    let mut next = || it.next().expect("length checked");
    let mat = |r: usize, c: usize, data: Vec<f32>| Matrix::from_vec(r, c, data);
    let embed = mat(v, d, next())?;
    let pos = mat(spec.max_seq_len, d, next())?;
    let mut blocks = Vec::with_capacity(spec.n_layers);
    for _ in 0..spec.n_layers {
        let wq = mat(d, a, next())?;
        let wk = mat(d, a, next())?;
        let wv = mat(d, a, next())?;
        let wo = mat(a, d, next())?;
        let w1 = mat(d, h, next())?;
        let w2 = mat(h, d, next())?;
        let norm1 = next();
        let norm2 = next();
        blocks.push(Block {
            norm1,
            wq,
            wk,
            wv,
            wo,
            norm2,
            w1,
            w2,
        });
    }
    let final_norm = next();
    let unembed = mat(d, v, next())?;
    Model::new(spec, embed, pos, blocks, final_norm, unembed)
}

/// Random model with i.i.d. Gaussian weights scaled by `1/sqrt(d_model)` and
/// unit norm gains. The same `(spec, seed)` always yields the same bits.
pub fn build_random_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = substream(seed, "model");
    let scale = 1.0 / (spec.d_model as f32).sqrt();
    let tensors = tensor_layout(spec)
        .into_iter()
        .map(|info| {
            let n: usize = info.shape.iter().product();
            if info.name.contains("norm") {
                vec![1.0; n]
            } else {
                (0..n)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            }
        })
        .collect();
    from_tensors(spec.clone(), tensors)
}

/// Mutable access for constructors inside the crate (the demo builder).
pub(crate) struct ModelParts {
    pub spec: ModelSpec,
    pub embed: Matrix,
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
    pub unembed: Matrix,
}

impl ModelParts {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let m = Model::zeros(spec)?;
        Ok(Self {
            spec: m.spec,
            embed: m.embed,
            pos: m.pos,
            blocks: m.blocks,
            final_norm: m.final_norm,
            unembed: m.unembed,
        })
    }

    pub fn finish(self) -> Result<Model> {
        Model::new(
            self.spec,
            self.embed,
            self.pos,
            self.blocks,
            self.final_norm,
            self.unembed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> ModelSpec {
        ModelSpec {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 11,
            max_seq_len: 6,
            mlp_hidden: 12,
            norm: NormKind::Rms,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn random_model_is_deterministic() {
        let spec = small_spec();
        let a = build_random_model(&spec, 1).unwrap();
        let b = build_random_model(&spec, 1).unwrap();
        let c = build_random_model(&spec, 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn zero_layers_is_invalid() {
        let spec = ModelSpec {
            n_layers: 0,
            ..small_spec()
        };
        assert!(matches!(build_random_model(&spec, 1), Err(Error::InvalidSpec(_))));
        let spec = ModelSpec {
            vocab_size: 1,
            ..small_spec()
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn layout_matches_data() {
        let m = build_random_model(&small_spec(), 3).unwrap();
        let infos = m.tensor_infos();
        let data = m.tensor_data();
        assert_eq!(infos.len(), data.len());
        assert_eq!(infos[0].name, "embed");
        assert_eq!(infos.last().unwrap().name, "unembed");
        assert!(infos.iter().any(|i| i.name == "block.1.attn.o"));
    }
}
