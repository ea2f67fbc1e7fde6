//! A hand-built bilingual MCQA transformer.
//!
//! No training: every weight is placed so that four attention blocks carry
//! out a fixed algorithm on the prompt layout produced by
//! [`encode_mcqa`](crate::corpus::encode_mcqa).
//!
//! | block      | reads                       | writes                              |
//! |------------|-----------------------------|-------------------------------------|
//! | `l_bind`   | letter one-hot at `p - 1`   | letter slot of position `p`         |
//! | `l_gather` | premise concepts            | gathered concept `G` (COLON: mean)  |
//! | `l_fetch`  | `G` at `p - 1`              | fetched concept `F` (ANS: COLON's)  |
//! | `l_match`  | option concepts against `F` | letter slot of ANS                  |
//!
//! Every language owns its own concept subspace, so parallel texts share
//! content only through the gathered and fetched slots. Language noise
//! (see [`perturb_language`]) lives in a separate channel that the gather
//! block reads together with the concept subspace and the match block does
//! not, so a noisy premise drags the fetched concept away from the option
//! it should match. Positions after the separator also use the gather block
//! to bind to the premise when their own concept matches it, which is what
//! makes the last token of `premise [SEP] option` informative.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{concept_token, Specials, Tokenizer, ANS, BOS, COLON, ENGLISH, LETTERS, SEP};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParts, ModelSpec, NormKind};
use crate::numeric::Matrix;
use crate::rng::substream;

fn default_languages() -> Vec<String> {
    vec![ENGLISH.to_string(), "fra".to_string()]
}

fn default_noise() -> BTreeMap<String, f32> {
    BTreeMap::from([("fra".to_string(), 1.0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub n_concepts: usize,
    pub concept_dim: usize,
    pub n_opt: usize,
    pub languages: Vec<String>,
    /// Noise scale per language; missing languages are clean.
    pub noise: BTreeMap<String, f32>,
    pub premise_len: usize,
    /// Gather logit on premise positions.
    pub eta: f32,
    /// Match gain on option concepts.
    pub beta: f32,
    pub l_bind: usize,
    pub l_gather: usize,
    pub l_fetch: usize,
    pub l_match: usize,
    pub n_layers: usize,
    pub seed: u64,
    /// Gain of the option-to-premise binding in the gather block.
    pub bind_gain: f32,
    /// Scale of the gathered concept.
    pub value_gain: f32,
    /// Logit used for positional and flag addressing.
    pub address_gain: f32,
    /// Letter unembedding gain.
    pub letter_gain: f32,
    /// Residual width; defaults to the minimum the layout needs.
    pub d_model: Option<usize>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            n_concepts: 64,
            concept_dim: 16,
            n_opt: 2,
            languages: default_languages(),
            noise: default_noise(),
            premise_len: 3,
            eta: 20.0,
            beta: 8.0,
            l_bind: 2,
            l_gather: 3,
            l_fetch: 4,
            l_match: 5,
            n_layers: 6,
            seed: 0,
            bind_gain: 8.0,
            value_gain: 6.0,
            address_gain: 40.0,
            letter_gain: 4.0,
            d_model: None,
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(2..=LETTERS.len()).contains(&self.n_opt) {
            return bad(format!("n_opt must be in 2..={}", LETTERS.len()));
        }
        if self.n_concepts < self.n_opt {
            return bad(format!(
                "{} concepts cannot fill {} options",
                self.n_concepts, self.n_opt
            ));
        }
        if self.concept_dim == 0 || self.premise_len == 0 {
            return bad("concept_dim and premise_len must be positive".into());
        }
        if !self.languages.iter().any(|l| l == ENGLISH) {
            return bad("languages must include eng".into());
        }
        for (i, l) in self.languages.iter().enumerate() {
            if l.is_empty() || l.contains(char::is_whitespace) || l.contains('@') {
                return bad(format!("bad language tag `{l}`"));
            }
            if self.languages[..i].contains(l) {
                return bad(format!("duplicate language `{l}`"));
            }
        }
        for (l, s) in &self.noise {
            if !self.languages.contains(l) {
                return Err(Error::UnknownLanguage(l.clone()));
            }
            if !(s.is_finite() && *s >= 0.0) {
                return bad(format!("noise for {l} must be finite and non-negative"));
            }
            if l == ENGLISH && *s != 0.0 {
                return bad("English is the clean reference and takes no noise".into());
            }
        }
        let roles = [self.l_bind, self.l_gather, self.l_fetch, self.l_match];
        if roles[0] == 0 || roles.windows(2).any(|w| w[0] >= w[1]) {
            return bad("role layers must satisfy 1 <= bind < gather < fetch < match".into());
        }
        if self.l_match > self.n_layers {
            return bad("l_match exceeds n_layers".into());
        }
        let gains = [
            self.eta,
            self.beta,
            self.bind_gain,
            self.value_gain,
            self.address_gain,
            self.letter_gain,
        ];
        if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return bad("gains must be finite and positive".into());
        }
        Ok(())
    }

    /// Length of every MCQA prompt under this config.
    pub fn prompt_len(&self) -> usize {
        1 + self.premise_len + 1 + 2 * self.n_opt + 2
    }

    pub fn noise_for(&self, lang: &str) -> f32 {
        self.noise.get(lang).copied().unwrap_or(0.0)
    }
}

/// Flag slots on the position table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Const = 0,
    Bos,
    Premise,
    /// Any position after the separator.
    Post,
    Option,
    Letter,
    Cue,
    Answer,
}

const N_FLAGS: usize = 8;

/// Offsets of the residual subspaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoLayout {
    pub concept_dim: usize,
    /// Start of each language's concept subspace, in config order.
    pub concepts: Vec<usize>,
    pub noise: usize,
    pub gathered: usize,
    pub fetched: usize,
    pub flags: usize,
    pub letter_tok: usize,
    pub letter_out: usize,
    pub positions: usize,
    pub max_len: usize,
    /// Width the layout needs.
    pub needed: usize,
}

impl DemoLayout {
    fn new(n_langs: usize, dc: usize, max_len: usize) -> Self {
        let noise = n_langs * dc;
        let gathered = noise + dc;
        let fetched = gathered + dc;
        let flags = fetched + dc;
        let letter_tok = flags + N_FLAGS;
        let letter_out = letter_tok + LETTERS.len();
        let positions = letter_out + LETTERS.len();
        Self {
            concept_dim: dc,
            concepts: (0..n_langs).map(|i| i * dc).collect(),
            noise,
            gathered,
            fetched,
            flags,
            letter_tok,
            letter_out,
            positions,
            max_len,
            needed: positions + max_len,
        }
    }

    pub fn flag(&self, f: Flag) -> usize {
        self.flags + f as usize
    }
}

/// Token ids and layout of a demo model.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoVocab {
    tokenizer: Tokenizer,
    languages: Vec<String>,
    n_concepts: usize,
    layout: DemoLayout,
}

const N_SPECIAL: usize = 4;

impl DemoVocab {
    fn new(cfg: &DemoConfig, layout: DemoLayout) -> Self {
        let mut vocab = BTreeMap::new();
        for (i, s) in [BOS, SEP, COLON, ANS].iter().enumerate() {
            vocab.insert(s.to_string(), i as u32);
        }
        for (j, l) in LETTERS.iter().enumerate() {
            vocab.insert(l.to_string(), (N_SPECIAL + j) as u32);
        }
        for (li, lang) in cfg.languages.iter().enumerate() {
            for k in 0..cfg.n_concepts {
                let id = N_SPECIAL + LETTERS.len() + li * cfg.n_concepts + k;
                vocab.insert(concept_token(k, lang), id as u32);
            }
        }
        Self {
            tokenizer: Tokenizer {
                vocab,
                specials: Specials::default(),
                max_len: Some(layout.max_len),
            },
            languages: cfg.languages.clone(),
            n_concepts: cfg.n_concepts,
            layout,
        }
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn layout(&self) -> &DemoLayout {
        &self.layout
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL + LETTERS.len() + self.languages.len() * self.n_concepts
    }

    fn lang_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn concept_id(&self, k: usize, lang: &str) -> Result<u32> {
        let li = self.lang_index(lang)?;
        if k >= self.n_concepts {
            return Err(Error::IndexOutOfRange(format!(
                "concept {k} of {}",
                self.n_concepts
            )));
        }
        Ok((N_SPECIAL + LETTERS.len() + li * self.n_concepts + k) as u32)
    }

    pub fn letter_ids(&self) -> Vec<u32> {
        (0..LETTERS.len()).map(|j| (N_SPECIAL + j) as u32).collect()
    }
}

/// Flags of each prompt position.
fn position_flags(cfg: &DemoConfig, p: usize) -> Vec<Flag> {
    let l = cfg.premise_len;
    let mut flags = vec![Flag::Const];
    if p == 0 {
        flags.push(Flag::Bos);
    }
    if (1..=l).contains(&p) {
        flags.push(Flag::Premise);
    }
    if p >= l + 2 {
        flags.push(Flag::Post);
        let q = p - (l + 2);
        if q < 2 * cfg.n_opt {
            flags.push(if q.is_multiple_of(2) {
                Flag::Letter
            } else {
                Flag::Option
            });
        } else if q == 2 * cfg.n_opt {
            flags.push(Flag::Cue);
        } else if q == 2 * cfg.n_opt + 1 {
            flags.push(Flag::Answer);
        }
    }
    flags
}

fn unit_concepts(cfg: &DemoConfig) -> Vec<Vec<f32>> {
    let mut rng = substream(cfg.seed, "model");
    (0..cfg.n_concepts)
        .map(|_| loop {
            let v: Vec<f32> = (0..cfg.concept_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if n > 1e-3 {
                return v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

/// Previous-position addressing: position `p` attends to `p - 1`.
fn previous_position(wq: &mut Matrix, wk: &mut Matrix, lay: &DemoLayout, gain: f32) {
    for p in 0..lay.max_len {
        wk.set(lay.positions + p, p, 1.0);
        if p > 0 {
            wq.set(lay.positions + p, p - 1, gain);
        }
    }
}

/// Build the clean (noise-free) demo model and its vocabulary.
pub fn build_demo_model(cfg: &DemoConfig) -> Result<(Model, DemoVocab)> {
    cfg.validate()?;
    let max_len = cfg.prompt_len();
    let lay = DemoLayout::new(cfg.languages.len(), cfg.concept_dim, max_len);
    let d = match cfg.d_model {
        Some(d) if d < lay.needed => {
            return Err(Error::SubspaceOverflow {
                needed: lay.needed,
                available: d,
            })
        }
        Some(d) => d,
        None => lay.needed,
    };
    let vocab = DemoVocab::new(cfg, lay.clone());
    let dc = cfg.concept_dim;
    let head_dim = max_len.max(dc + 2);
    let spec = ModelSpec {
        d_model: d,
        n_layers: cfg.n_layers,
        n_heads: 1,
        head_dim,
        vocab_size: vocab.vocab_size(),
        max_seq_len: max_len,
        mlp_hidden: 1,
        norm: NormKind::Identity,
        norm_eps: 1e-5,
    };
    let mut parts = ModelParts::zeros(spec)?;
    // undo the 1/sqrt(head_dim) score scaling
    let qs = (head_dim as f32).sqrt();
    let ag = cfg.address_gain;

    let concepts = unit_concepts(cfg);
    for (li, lang) in cfg.languages.iter().enumerate() {
        for (k, e) in concepts.iter().enumerate() {
            let row = vocab.concept_id(k, lang)? as usize;
            for (i, &x) in e.iter().enumerate() {
                parts.embed.set(row, lay.concepts[li] + i, x);
            }
        }
    }
    for (j, &id) in vocab.letter_ids().iter().enumerate() {
        parts.embed.set(id as usize, lay.letter_tok + j, 1.0);
        parts
            .unembed
            .set(lay.letter_out + j, id as usize, cfg.letter_gain);
    }
    for p in 0..max_len {
        parts.pos.set(p, lay.positions + p, 1.0);
        for f in position_flags(cfg, p) {
            parts.pos.set(p, lay.flag(f), 1.0);
        }
    }

    {
        let b = &mut parts.blocks[cfg.l_bind - 1];
        previous_position(&mut b.wq, &mut b.wk, &lay, ag * qs);
        for j in 0..LETTERS.len() {
            b.wv.set(lay.letter_tok + j, j, 1.0);
            b.wo.set(j, lay.letter_out + j, 1.0);
        }
    }

    {
        // head coords: 0 premise, 1 sink on BOS, 2.. concept binding
        let b = &mut parts.blocks[cfg.l_gather - 1];
        let (eta, bx) = (cfg.eta, cfg.bind_gain);
        let threshold = 3f32.ln() + bx / 2.0;
        b.wq.set(lay.flag(Flag::Post), 0, eta * qs);
        b.wk.set(lay.flag(Flag::Premise), 0, 1.0);
        b.wq.set(lay.flag(Flag::Const), 1, ag * qs);
        b.wq.set(lay.flag(Flag::Post), 1, (eta + threshold - ag) * qs);
        b.wq.set(lay.flag(Flag::Cue), 1, -(eta + threshold) * qs);
        b.wk.set(lay.flag(Flag::Bos), 1, 1.0);
        for i in 0..dc {
            for &a in &lay.concepts {
                b.wq.set(a + i, 2 + i, bx * qs);
                b.wk.set(a + i, 2 + i, 1.0);
                b.wv.set(a + i, i, cfg.value_gain);
            }
            b.wk.set(lay.noise + i, 2 + i, 1.0);
            b.wv.set(lay.noise + i, i, cfg.value_gain);
            b.wo.set(i, lay.gathered + i, 1.0);
        }
    }

    {
        let b = &mut parts.blocks[cfg.l_fetch - 1];
        previous_position(&mut b.wq, &mut b.wk, &lay, ag * qs);
        for i in 0..dc {
            b.wv.set(lay.gathered + i, i, 1.0);
            b.wo.set(i, lay.fetched + i, 1.0);
        }
    }

    {
        // head coords: 0 option bias, 1.. concept match
        let b = &mut parts.blocks[cfg.l_match - 1];
        b.wq.set(lay.flag(Flag::Const), 0, ag * qs);
        b.wk.set(lay.flag(Flag::Option), 0, 1.0);
        for i in 0..dc {
            b.wq.set(lay.fetched + i, 1 + i, cfg.beta / cfg.value_gain * qs);
            for &a in &lay.concepts {
                b.wk.set(a + i, 1 + i, 1.0);
            }
        }
        for j in 0..LETTERS.len() {
            b.wv.set(lay.letter_out + j, j, 1.0);
            b.wo.set(j, lay.letter_out + j, 1.0);
        }
    }

    Ok((parts.finish()?, vocab))
}

/// Add a fixed Gaussian offset of scale `sigma` to the noise channel of every
/// concept token of `lang`. One draw per token, shared by all instances.
pub fn perturb_language(
    model: &Model,
    vocab: &DemoVocab,
    lang: &str,
    sigma: f32,
    seed: u64,
) -> Result<Model> {
    vocab.lang_index(lang)?;
    if lang == ENGLISH {
        return Err(Error::InvalidConfig(
            "English is the clean reference and takes no noise".into(),
        ));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise scale {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(model.clone());
    }
    let lay = vocab.layout();
    let mut embed = model.embed().clone();
    let mut rng = substream(seed, &format!("noise:{lang}"));
    for k in 0..vocab.n_concepts() {
        let row = vocab.concept_id(k, lang)? as usize;
        for i in 0..lay.concept_dim {
            let g: f32 = StandardNormal.sample(&mut rng);
            let col = lay.noise + i;
            embed.set(row, col, embed.get(row, col) + sigma * g);
        }
    }
    model.with_embed(embed)
}

/// [`build_demo_model`] followed by [`perturb_language`] for every language
/// with a non-zero noise scale, all seeded by `cfg.seed`.
pub fn build_noisy_demo_model(cfg: &DemoConfig) -> Result<(Model, DemoVocab)> {
    let (mut model, vocab) = build_demo_model(cfg)?;
    for lang in &cfg.languages {
        let sigma = cfg.noise_for(lang);
        if sigma > 0.0 {
            model = perturb_language(&model, &vocab, lang, sigma, cfg.seed)?;
        }
    }
    Ok((model, vocab))
}
