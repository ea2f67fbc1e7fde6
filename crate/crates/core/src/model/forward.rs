use std::collections::HashSet;

use super::{Model, NormKind};
use crate::error::{Error, Result};
use crate::numeric::{dot_unchecked, rms_norm_into, softmax_in_place, vec_mat_into, Matrix};

/// Every residual state of one forward pass plus the final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    tokens: Vec<u32>,
    /// `states[λ]` is `M × d`; `λ = 0` is the embedding output.
    states: Vec<Matrix>,
    /// `M × vocab`
    logits: Matrix,
}

impl LayerTrace {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of blocks; the trace holds `n_layers() + 1` states.
    pub fn n_layers(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state(&self, layer: usize) -> Option<&Matrix> {
        self.states.get(layer)
    }

    /// `h[position][layer]`, by value.
    pub fn capture(&self, layer: usize, position: usize) -> Result<Vec<f32>> {
        let states = self
            .states
            .get(layer)
            .ok_or_else(|| Error::IndexOutOfRange(format!("layer {layer} > {}", self.n_layers())))?;
        if position >= self.len() {
            return Err(Error::IndexOutOfRange(format!(
                "position {position} >= sequence length {}",
                self.len()
            )));
        }
        Ok(states.row(position).to_vec())
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn logits_at(&self, position: usize) -> &[f32] {
        self.logits.row(position)
    }

    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.len() - 1)
    }
}

/// Replacement for the residual state at `(layer, position)`, applied right
/// after block `layer` has written it and before block `layer + 1` reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub layer: usize,
    pub position: usize,
    pub value: Vec<f32>,
}

impl Patch {
    pub fn new(layer: usize, position: usize, value: Vec<f32>) -> Self {
        Self {
            layer,
            position,
            value,
        }
    }
}

fn check_tokens(model: &Model, tokens: &[u32]) -> Result<()> {
    let spec = model.spec();
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    if tokens.len() > spec.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: spec.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: spec.vocab_size,
        });
    }
    Ok(())
}

fn check_patches(model: &Model, len: usize, patches: &[Patch]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in patches {
        if p.layer > model.spec().n_layers {
            return Err(Error::IndexOutOfRange(format!(
                "patch layer {} > {}",
                p.layer,
                model.spec().n_layers
            )));
        }
        if p.position >= len {
            return Err(Error::IndexOutOfRange(format!(
                "patch position {} >= sequence length {len}",
                p.position
            )));
        }
        if p.value.len() != model.spec().d_model {
            return Err(Error::DimensionMismatch {
                expected: model.spec().d_model,
                got: p.value.len(),
            });
        }
        if p.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch value"));
        }
        if !seen.insert((p.layer, p.position)) {
            return Err(Error::DuplicatePatchSite {
                layer: p.layer,
                position: p.position,
            });
        }
    }
    Ok(())
}

fn embed(model: &Model, tokens: &[u32]) -> Matrix {
    let d = model.spec().d_model;
    let mut h = Matrix::zeros(tokens.len(), d);
    for (m, &t) in tokens.iter().enumerate() {
        let e = model.embed().row(t as usize);
        let p = model.pos().row(m);
        for ((o, a), b) in h.row_mut(m).iter_mut().zip(e).zip(p) {
            *o = a + b;
        }
    }
    h
}

fn apply_patches(states: &mut Matrix, layer: usize, patches: &[Patch]) {
    for p in patches.iter().filter(|p| p.layer == layer) {
        states.row_mut(p.position).copy_from_slice(&p.value);
    }
}

fn normalize(kind: NormKind, x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    match kind {
        NormKind::Rms => rms_norm_into(x, gain, eps, out),
        NormKind::Identity => out.copy_from_slice(x),
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Contribution `f_λ` of block `layer` (1-based) given the states of layer
/// `layer - 1`. The forward pass adds exactly this matrix to the residual.
pub fn block_contribution(model: &Model, layer: usize, prev: &Matrix) -> Result<Matrix> {
    let spec = model.spec();
    if layer == 0 || layer > spec.n_layers {
        return Err(Error::IndexOutOfRange(format!(
            "block {layer} not in 1..={}",
            spec.n_layers
        )));
    }
    if prev.cols() != spec.d_model {
        return Err(Error::DimensionMismatch {
            expected: spec.d_model,
            got: prev.cols(),
        });
    }
    let out = block_forward(model, layer, prev);
    if !out.is_finite() {
        return Err(Error::NonFinite("block contribution"));
    }
    Ok(out)
}

fn block_forward(model: &Model, layer: usize, prev: &Matrix) -> Matrix {
    let spec = model.spec();
    let block = &model.blocks()[layer - 1];
    let (m_len, d) = (prev.rows(), spec.d_model);
    let (n_heads, head_dim) = (spec.n_heads, spec.head_dim);
    let aw = spec.attn_width();
    let scale = 1.0 / (head_dim as f32).sqrt();

    let mut x = vec![0.0; d];
    let mut q = Matrix::zeros(m_len, aw);
    let mut k = Matrix::zeros(m_len, aw);
    let mut v = Matrix::zeros(m_len, aw);
    for m in 0..m_len {
        normalize(spec.norm, prev.row(m), &block.norm1, spec.norm_eps, &mut x);
        vec_mat_into(&x, &block.wq, q.row_mut(m));
        vec_mat_into(&x, &block.wk, k.row_mut(m));
        vec_mat_into(&x, &block.wv, v.row_mut(m));
    }

    let mut heads = vec![0.0; aw];
    let mut weights = Vec::with_capacity(m_len);
    let mut attn = vec![0.0; d];
    let mut resid = vec![0.0; d];
    let mut hidden = vec![0.0; spec.mlp_hidden];
    let mut mlp = vec![0.0; d];
    let mut out = Matrix::zeros(m_len, d);
    for m in 0..m_len {
        heads.fill(0.0);
        for h in 0..n_heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qm = &q.row(m)[cols.clone()];
            weights.clear();
            weights.extend((0..=m).map(|j| dot_unchecked(qm, &k.row(j)[cols.clone()]) * scale));
            softmax_in_place(&mut weights);
            let dst = &mut heads[cols.clone()];
            for (j, &w) in weights.iter().enumerate() {
                for (o, &vj) in dst.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += w * vj;
                }
            }
        }
        vec_mat_into(&heads, &block.wo, &mut attn);

        for ((r, &h), &a) in resid.iter_mut().zip(prev.row(m)).zip(&attn) {
            *r = h + a;
        }
        normalize(spec.norm, &resid, &block.norm2, spec.norm_eps, &mut x);
        vec_mat_into(&x, &block.w1, &mut hidden);
        hidden.iter_mut().for_each(|z| *z = gelu(*z));
        vec_mat_into(&hidden, &block.w2, &mut mlp);

        for ((o, &a), &f) in out.row_mut(m).iter_mut().zip(&attn).zip(&mlp) {
            *o = a + f;
        }
    }
    out
}

fn add_into(prev: &Matrix, contrib: &Matrix) -> Matrix {
    let data = prev
        .as_slice()
        .iter()
        .zip(contrib.as_slice())
        .map(|(h, f)| h + f)
        .collect();
    Matrix::from_vec(prev.rows(), prev.cols(), data).expect("shapes agree")
}

fn unembed_all(model: &Model, last: &Matrix) -> Matrix {
    let spec = model.spec();
    let mut x = vec![0.0; spec.d_model];
    let mut logits = Matrix::zeros(last.rows(), spec.vocab_size);
    for m in 0..last.rows() {
        normalize(spec.norm, last.row(m), model.final_norm(), spec.norm_eps, &mut x);
        vec_mat_into(&x, model.unembed(), logits.row_mut(m));
    }
    logits
}

fn run_from(model: &Model, tokens: &[u32], mut states: Vec<Matrix>, patches: &[Patch]) -> Result<LayerTrace> {
    let n_layers = model.spec().n_layers;
    for layer in states.len()..=n_layers {
        let prev = states.last().expect("at least the embedding layer");
        let mut next = add_into(prev, &block_forward(model, layer, prev));
        apply_patches(&mut next, layer, patches);
        states.push(next);
    }
    let logits = unembed_all(model, &states[n_layers]);
    if states.iter().any(|s| !s.is_finite()) || !logits.is_finite() {
        return Err(Error::NonFinite("forward pass"));
    }
    Ok(LayerTrace {
        tokens: tokens.to_vec(),
        states,
        logits,
    })
}

/// Plain forward pass recording every residual state.
pub fn forward(model: &Model, tokens: &[u32]) -> Result<LayerTrace> {
    patched_forward(model, tokens, &[])
}

/// Forward pass with residual replacements. At most one patch per
/// `(layer, position)`; positions and layers not patched recompute normally.
pub fn patched_forward(model: &Model, tokens: &[u32], patches: &[Patch]) -> Result<LayerTrace> {
    check_tokens(model, tokens)?;
    check_patches(model, tokens.len(), patches)?;
    let mut h0 = embed(model, tokens);
    apply_patches(&mut h0, 0, patches);
    run_from(model, tokens, vec![h0], patches)
}

/// Same result as `patched_forward(model, base.tokens(), &[patch])`, but
/// reuses the states of `base` below the patched layer. `base` must be an
/// unpatched trace of the same model.
pub fn resume_with_patch(model: &Model, base: &LayerTrace, patch: &Patch) -> Result<LayerTrace> {
    if base.n_layers() != model.spec().n_layers {
        return Err(Error::DimensionMismatch {
            expected: model.spec().n_layers,
            got: base.n_layers(),
        });
    }
    let patches = std::slice::from_ref(patch);
    check_patches(model, base.len(), patches)?;
    let mut states: Vec<Matrix> = base.states[..=patch.layer].to_vec();
    apply_patches(&mut states[patch.layer], patch.layer, patches);
    run_from(model, &base.tokens, states, patches)
}
