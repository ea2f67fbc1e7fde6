//! Activation-patching sweeps over layers and the two final prompt positions.
//!
//! For each transfer-failure instance the non-English pass is rerun with one
//! residual state replaced by a donor's state at the same (layer, position).
//! A patch *flips* the instance when the gold letter's logit then strictly
//! exceeds every other letter's logit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_mcqa, ParallelCorpus, PromptEncoding, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::{argmax_with_tie, target_logits};
use crate::model::{forward, resume_with_patch, LayerTrace, Model, Patch};
use crate::rng::{derive_seed, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    /// Donor: the parallel English instance.
    Equivalent,
    /// Donor: an unrelated, correctly answered English instance with the same gold letter.
    Control,
    /// Donor: the recipient pass itself. Only useful as a sanity check.
    #[serde(rename = "self")]
    SelfDonor,
}

impl PatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchMode::Equivalent => "equivalent",
            PatchMode::Control => "control",
            PatchMode::SelfDonor => "self",
        }
    }
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchPosition {
    /// Final prompt token (the answer slot).
    Last,
    /// The token before it (the cue).
    #[serde(rename = "penult")]
    Penultimate,
}

impl PatchPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchPosition::Last => "last",
            PatchPosition::Penultimate => "penult",
        }
    }

    pub fn index(self, enc: &PromptEncoding) -> usize {
        match self {
            PatchPosition::Last => enc.last(),
            PatchPosition::Penultimate => enc.penultimate(),
        }
    }
}

impl fmt::Display for PatchPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchPosition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "last" => Ok(PatchPosition::Last),
            "penult" | "penultimate" => Ok(PatchPosition::Penultimate),
            _ => Err(format!("unknown position `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchExperimentConfig {
    pub modes: Vec<PatchMode>,
    pub positions: Vec<PatchPosition>,
    /// Inclusive layer range; `None` sweeps `0..=Λ`.
    #[serde(default)]
    pub layers: Option<(usize, usize)>,
    pub control_seed: u64,
}

impl Default for PatchExperimentConfig {
    fn default() -> Self {
        Self {
            modes: vec![PatchMode::Equivalent, PatchMode::Control],
            positions: vec![PatchPosition::Last, PatchPosition::Penultimate],
            layers: None,
            control_seed: 0,
        }
    }
}

impl PatchExperimentConfig {
    fn layer_range(&self, n_layers: usize) -> Result<std::ops::RangeInclusive<usize>> {
        if self.modes.is_empty() || self.positions.is_empty() {
            return Err(Error::InvalidConfig(
                "patch modes and positions must be nonempty".into(),
            ));
        }
        let (lo, hi) = self.layers.unwrap_or((0, n_layers));
        if lo > hi || hi > n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer range {lo}..={hi} outside 0..={n_layers}"
            )));
        }
        Ok(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub id: String,
    pub lang: String,
    pub mode: PatchMode,
    pub position: PatchPosition,
    pub layer: usize,
    pub donor: String,
    /// Post-patch target logits in option order.
    pub logits: Vec<f32>,
    pub gold: usize,
    /// Prediction of the unpatched pass.
    pub orig_predicted: usize,
    pub flipped: bool,
    pub entropy: f64,
}

/// Gold logit strictly above every other target logit.
pub fn is_flip(logits: &[f32], gold: usize) -> bool {
    logits
        .iter()
        .enumerate()
        .all(|(i, &v)| i == gold || logits[gold] > v)
}

/// Entropy (nats) of the softmax over the target logits only.
pub fn decision_entropy(logits: &[f32]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::IndexOutOfRange(format!(
            "{} target logits; need at least two",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decision entropy"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let w: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.iter()
        .map(|&x| x / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Seeded uniform choice among `pool` entries with the same gold index and a
/// different id. `pool` holds `(id, gold)` of correctly answered English
/// instances; the draw depends only on the seed, the id and the pool.
pub fn select_control_donor(id: &str, gold: usize, pool: &[(String, usize)], seed: u64) -> Result<String> {
    let eligible: Vec<&String> = pool
        .iter()
        .filter(|(d, g)| *g == gold && d != id)
        .map(|(d, _)| d)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleDonor(id.to_string()));
    }
    let mut rng = substream(derive_seed(seed, "control"), id);
    Ok(eligible[rng.random_range(0..eligible.len())].clone())
}

struct Pass {
    enc: PromptEncoding,
    trace: LayerTrace,
}

fn run(model: &Model, tok: &Tokenizer, corpus: &ParallelCorpus, lang: &str, id: &str) -> Result<Pass> {
    let enc = encode_mcqa(corpus.get(lang, id)?, tok)?;
    let trace = forward(model, &enc.tokens)?;
    Ok(Pass { enc, trace })
}

/// Run every (mode, position, layer) patch for each id in `tf_ids`.
/// `english_pool` lists correctly answered English ids (control donors).
/// Results come back ordered by id, then mode, position and layer.
#[allow(clippy::too_many_arguments)]
pub fn patch_sweep(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    eng: &str,
    l2: &str,
    tf_ids: &[String],
    english_pool: &[String],
    cfg: &PatchExperimentConfig,
) -> Result<Vec<PatchResult>> {
    if tf_ids.is_empty() {
        return Err(Error::EmptySubset);
    }
    let layers = cfg.layer_range(model.spec().n_layers)?;
    let mut modes = cfg.modes.clone();
    modes.sort();
    modes.dedup();
    let mut positions = cfg.positions.clone();
    positions.sort();
    positions.dedup();
    let pool: Vec<(String, usize)> = english_pool
        .iter()
        .map(|id| corpus.get(eng, id).map(|i| (id.clone(), i.gold)))
        .collect::<Result<_>>()?;

    let per_id = tf_ids
        .par_iter()
        .map(|id| {
            let recipient = run(model, tok, corpus, l2, id)?;
            let base_logits = target_logits(recipient.trace.last_logits(), &recipient.enc.targets);
            let (orig_predicted, _) = argmax_with_tie(&base_logits)?;
            let gold = recipient.enc.gold;
            let mut out = Vec::new();
            for &mode in &modes {
                let donor_id = match mode {
                    PatchMode::Equivalent | PatchMode::SelfDonor => id.clone(),
                    PatchMode::Control => select_control_donor(id, gold, &pool, cfg.control_seed)?,
                };
                let donor_pass;
                let donor = match mode {
                    PatchMode::SelfDonor => &recipient,
                    _ => {
                        donor_pass = run(model, tok, corpus, eng, &donor_id)?;
                        &donor_pass
                    }
                };
                if donor.enc.len() != recipient.enc.len() {
                    return Err(Error::LengthMismatch(donor.enc.len(), recipient.enc.len()));
                }
                if donor.enc.targets != recipient.enc.targets {
                    return Err(Error::NonParallel {
                        id: id.clone(),
                        reason: format!("donor `{donor_id}` has different target tokens"),
                    });
                }
                for &position in &positions {
                    let p = position.index(&recipient.enc);
                    for layer in layers.clone() {
                        let patch = Patch::new(layer, p, donor.trace.capture(layer, p)?);
                        let patched = resume_with_patch(model, &recipient.trace, &patch)?;
                        let logits = target_logits(patched.last_logits(), &recipient.enc.targets);
                        out.push(PatchResult {
                            id: id.clone(),
                            lang: l2.to_string(),
                            mode,
                            position,
                            layer,
                            donor: donor_id.clone(),
                            flipped: is_flip(&logits, gold),
                            entropy: decision_entropy(&logits)?,
                            logits,
                            gold,
                            orig_predicted,
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<PatchResult>>>>()?;
    Ok(per_id.into_iter().flatten().collect())
}

/// Aggregate over one (mode, position, layer) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: PatchMode,
    pub lang: String,
    pub position: PatchPosition,
    pub layer: usize,
    pub n: usize,
    pub flips: usize,
    pub flip_rate: f64,
    pub mean_gold_logit: f64,
    /// Mean post-patch logit of the option the unpatched pass predicted.
    pub mean_orig_logit: f64,
    pub mean_entropy_all: f64,
    pub mean_entropy_flipped: Option<f64>,
}

type CellKey = (PatchMode, String, PatchPosition, usize);

fn group(results: &[PatchResult]) -> BTreeMap<CellKey, Vec<&PatchResult>> {
    let mut cells: BTreeMap<CellKey, Vec<&PatchResult>> = BTreeMap::new();
    for r in results {
        cells
            .entry((r.mode, r.lang.clone(), r.position, r.layer))
            .or_default()
            .push(r);
    }
    cells
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-cell summaries sorted by (mode, lang, position, layer). Within a cell
/// the means run over results in input (id) order.
pub fn flip_stats(results: &[PatchResult]) -> Result<Vec<SweepCell>> {
    if results.is_empty() {
        return Err(Error::EmptyCell("no patch results".into()));
    }
    Ok(group(results)
        .into_iter()
        .map(|((mode, lang, position, layer), rs)| {
            let n = rs.len();
            let flips = rs.iter().filter(|r| r.flipped).count();
            SweepCell {
                mode,
                lang,
                position,
                layer,
                n,
                flips,
                flip_rate: flips as f64 / n as f64,
                mean_gold_logit: mean(rs.iter().map(|r| r.logits[r.gold] as f64)).unwrap_or(0.0),
                mean_orig_logit: mean(rs.iter().map(|r| r.logits[r.orig_predicted] as f64)).unwrap_or(0.0),
                mean_entropy_all: mean(rs.iter().map(|r| r.entropy)).unwrap_or(0.0),
                mean_entropy_flipped: mean(rs.iter().filter(|r| r.flipped).map(|r| r.entropy)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCell {
    pub lang: String,
    pub position: PatchPosition,
    pub layer: usize,
    pub delta_flip_rate: f64,
}

/// Equivalent minus control flip rate, cell by cell.
pub fn delta_flip(equivalent: &[SweepCell], control: &[SweepCell]) -> Result<Vec<DeltaCell>> {
    let key = |c: &SweepCell| (c.lang.clone(), c.position, c.layer);
    let ctrl: BTreeMap<_, &SweepCell> = control.iter().map(|c| (key(c), c)).collect();
    if ctrl.len() != equivalent.len() {
        return Err(Error::CellMismatch(format!(
            "{} equivalent cells vs {} control cells",
            equivalent.len(),
            ctrl.len()
        )));
    }
    let mut out: Vec<DeltaCell> = equivalent
        .iter()
        .map(|e| {
            let c = ctrl.get(&key(e)).ok_or_else(|| {
                Error::CellMismatch(format!(
                    "no control cell at {} {} {}",
                    e.lang, e.position, e.layer
                ))
            })?;
            Ok(DeltaCell {
                lang: e.lang.clone(),
                position: e.position,
                layer: e.layer,
                delta_flip_rate: e.flip_rate - c.flip_rate,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| (&a.lang, a.position, a.layer).cmp(&(&b.lang, b.position, b.layer)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCell {
    pub lang: String,
    pub position: PatchPosition,
    pub layer: usize,
    pub n_flipped_equivalent: usize,
    pub mean_entropy_equivalent: Option<f64>,
    pub n_flipped_control: usize,
    pub mean_entropy_control: Option<f64>,
}

/// Mean decision entropy over flipped results, equivalent vs control, per
/// (position, layer). Cells without flips carry `None`.
pub fn entropy_comparison(equivalent: &[PatchResult], control: &[PatchResult]) -> Result<Vec<EntropyCell>> {
    if equivalent.is_empty() || control.is_empty() {
        return Err(Error::EmptyCell(
            "entropy comparison needs both result sets".into(),
        ));
    }
    let strip = |rs: &[PatchResult]| {
        let mut m: BTreeMap<(String, PatchPosition, usize), (usize, Option<f64>)> = BTreeMap::new();
        for ((_, lang, position, layer), cell) in group(rs) {
            let flipped: Vec<f64> = cell.iter().filter(|r| r.flipped).map(|r| r.entropy).collect();
            m.insert(
                (lang, position, layer),
                (flipped.len(), mean(flipped.into_iter())),
            );
        }
        m
    };
    let (e, c) = (strip(equivalent), strip(control));
    if e.keys().ne(c.keys()) {
        return Err(Error::CellMismatch(
            "equivalent and control sweeps cover different cells".into(),
        ));
    }
    Ok(e.into_iter()
        .zip(c.into_values())
        .map(|(((lang, position, layer), (ne, me)), (nc, mc))| EntropyCell {
            lang,
            position,
            layer,
            n_flipped_equivalent: ne,
            mean_entropy_equivalent: me,
            n_flipped_control: nc,
            mean_entropy_control: mc,
        })
        .collect())
}
