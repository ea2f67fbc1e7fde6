//! MCQA scoring and the transfer-success / transfer-failure split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_mcqa, ParallelCorpus, PromptEncoding, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{forward, Model};

/// One scored prompt. `predicted` is the argmax of `logits`; ties go to the
/// lowest index and set `tie`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub lang: String,
    /// Target-letter logits in option order.
    pub logits: Vec<f32>,
    pub predicted: usize,
    pub gold: usize,
    pub correct: bool,
    pub tie: bool,
}

/// Index of the maximum and whether another index shares it.
pub fn argmax_with_tie(values: &[f32]) -> Result<(usize, bool)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("target logits"));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    let tie = values
        .iter()
        .enumerate()
        .any(|(i, &v)| i != best && v == values[best]);
    Ok((best, tie))
}

impl DecisionRecord {
    pub fn from_logits(id: &str, lang: &str, logits: Vec<f32>, gold: usize) -> Result<Self> {
        if gold >= logits.len() {
            return Err(Error::IndexOutOfRange(format!(
                "gold {gold} of {} targets",
                logits.len()
            )));
        }
        let (predicted, tie) = argmax_with_tie(&logits)?;
        Ok(Self {
            id: id.to_string(),
            lang: lang.to_string(),
            logits,
            predicted,
            gold,
            correct: predicted == gold,
            tie,
        })
    }
}

/// Pick the target-letter logits out of a full vocabulary row.
pub fn target_logits(row: &[f32], targets: &[u32]) -> Vec<f32> {
    targets.iter().map(|&t| row[t as usize]).collect()
}

pub fn score_mcqa(model: &Model, id: &str, lang: &str, enc: &PromptEncoding) -> Result<DecisionRecord> {
    let trace = forward(model, &enc.tokens)?;
    DecisionRecord::from_logits(
        id,
        lang,
        target_logits(trace.last_logits(), &enc.targets),
        enc.gold,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferLabel {
    #[serde(rename = "TS")]
    Ts,
    #[serde(rename = "TF")]
    Tf,
    #[serde(rename = "excluded")]
    ExcludedEnglishWrong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub id: String,
    pub label: TransferLabel,
}

pub fn label_transfer(eng: &DecisionRecord, l2: &DecisionRecord) -> Result<TransferOutcome> {
    if eng.id != l2.id {
        return Err(Error::IdMismatch(eng.id.clone(), l2.id.clone()));
    }
    let label = match (eng.correct, l2.correct) {
        (false, _) => TransferLabel::ExcludedEnglishWrong,
        (true, true) => TransferLabel::Ts,
        (true, false) => TransferLabel::Tf,
    };
    Ok(TransferOutcome {
        id: eng.id.clone(),
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangSummary {
    pub lang: String,
    pub n: usize,
    pub n_acc: usize,
    pub accuracy: f64,
    pub ties: usize,
}

impl LangSummary {
    fn of(lang: &str, records: &[DecisionRecord]) -> Self {
        let n_acc = records.iter().filter(|r| r.correct).count();
        Self {
            lang: lang.to_string(),
            n: records.len(),
            n_acc,
            accuracy: if records.is_empty() {
                0.0
            } else {
                n_acc as f64 / records.len() as f64
            },
            ties: records.iter().filter(|r| r.tie).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    pub eng: LangSummary,
    pub l2: LangSummary,
    pub ts_ids: Vec<String>,
    pub tf_ids: Vec<String>,
    pub excluded_ids: Vec<String>,
}

impl EvalReport {
    /// Ids the model answered correctly in English, in id order.
    pub fn english_correct(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.ts_ids.iter().chain(&self.tf_ids).cloned().collect();
        ids.sort();
        ids
    }
}

/// Score every instance of both languages (in parallel) and split the ids.
/// Also returns the per-instance records, English first.
pub fn evaluate_corpus_records(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    eng: &str,
    l2: &str,
) -> Result<(EvalReport, Vec<DecisionRecord>, Vec<DecisionRecord>)> {
    let ids = corpus.ids();
    let score = |lang: &str| -> Result<Vec<DecisionRecord>> {
        ids.par_iter()
            .map(|id| {
                let inst = corpus.get(lang, id)?;
                score_mcqa(model, id, lang, &encode_mcqa(inst, tok)?)
            })
            .collect()
    };
    let e = score(eng)?;
    let f = score(l2)?;
    let (mut ts, mut tf, mut ex) = (Vec::new(), Vec::new(), Vec::new());
    for (a, b) in e.iter().zip(&f) {
        let out = label_transfer(a, b)?;
        match out.label {
            TransferLabel::Ts => ts.push(out.id),
            TransferLabel::Tf => tf.push(out.id),
            TransferLabel::ExcludedEnglishWrong => ex.push(out.id),
        }
    }
    let report = EvalReport {
        meta: None,
        eng: LangSummary::of(eng, &e),
        l2: LangSummary::of(l2, &f),
        ts_ids: ts,
        tf_ids: tf,
        excluded_ids: ex,
    };
    Ok((report, e, f))
}

pub fn evaluate_corpus(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    eng: &str,
    l2: &str,
) -> Result<EvalReport> {
    evaluate_corpus_records(model, tok, corpus, eng, l2).map(|(r, _, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_parallel_corpus, GenConfig, Instance};
    use crate::demo::{build_demo_model, perturb_language, DemoConfig};
    use crate::model::{ModelSpec, NormKind};
    use proptest::prelude::*;

    fn rec(id: &str, logits: Vec<f32>, gold: usize) -> DecisionRecord {
        DecisionRecord::from_logits(id, "x", logits, gold).unwrap()
    }

    #[test]
    fn zero_model_ties_to_first_option() {
        let spec = ModelSpec {
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            head_dim: 4,
            vocab_size: 12,
            max_seq_len: 12,
            mlp_hidden: 2,
            norm: NormKind::Rms,
            norm_eps: 1e-5,
        };
        let m = Model::zeros(spec).unwrap();
        let enc = PromptEncoding {
            tokens: vec![0, 8, 1, 4, 9, 5, 10, 2, 3],
            targets: vec![4, 5],
            gold: 1,
        };
        let r = score_mcqa(&m, "z", "eng", &enc).unwrap();
        assert!(r.tie);
        assert_eq!(r.predicted, 0);
        assert!(!r.correct);
    }

    #[test]
    fn labels() {
        let ok = rec("a", vec![1.0, 0.0], 0);
        let bad = rec("a", vec![0.0, 1.0], 0);
        let t = |a, b| label_transfer(a, b).unwrap().label;
        assert_eq!(t(&ok, &ok), TransferLabel::Ts);
        assert_eq!(t(&ok, &bad), TransferLabel::Tf);
        assert_eq!(t(&bad, &ok), TransferLabel::ExcludedEnglishWrong);
        assert_eq!(t(&bad, &bad), TransferLabel::ExcludedEnglishWrong);
        assert!(matches!(
            label_transfer(&ok, &rec("b", vec![1.0, 0.0], 0)),
            Err(Error::IdMismatch(..))
        ));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let r = rec("a", vec![2.0, 2.0, 1.0], 1);
        assert!(r.tie && !r.correct);
        assert_eq!(r.predicted, 0);
        assert!(rec("a", vec![1.0, 2.0, 2.0], 1).tie);
        assert!(!rec("a", vec![1.0, 3.0, 2.0], 1).tie);
    }

    proptest! {
        #[test]
        fn shift_does_not_change_decision(v in proptest::collection::vec(-5.0f32..5.0, 2..5), c in -100.0f32..100.0) {
            let a = argmax_with_tie(&v).unwrap();
            let shifted: Vec<f32> = v.iter().map(|x| x + c).collect();
            let b = argmax_with_tie(&shifted).unwrap();
            // exact ties can be created or broken by rounding; skip those
            prop_assume!(!a.1 && !b.1);
            let sorted = { let mut s = v.clone(); s.sort_by(|x, y| y.total_cmp(x)); s };
            prop_assume!(sorted[0] - sorted[1] > 1e-3);
            prop_assert_eq!(a.0, b.0);
        }
    }

    fn setup(n: usize) -> (DemoConfig, crate::demo::DemoVocab, Model, ParallelCorpus) {
        let cfg = DemoConfig::default();
        let (m, v) = build_demo_model(&cfg).unwrap();
        let c = generate_parallel_corpus(
            &GenConfig {
                n,
                n_opt: 2,
                languages: cfg.languages.clone(),
                premise_len: 3,
                seed: 11,
            },
            &v,
        )
        .unwrap();
        (cfg, v, m, c)
    }

    #[test]
    fn clean_demo_has_no_failures() {
        let (_, v, m, c) = setup(300);
        let r = evaluate_corpus(&m, v.tokenizer(), &c, "eng", "fra").unwrap();
        assert_eq!(r.eng.accuracy, 1.0);
        assert_eq!(r.l2.accuracy, 1.0);
        assert!(r.tf_ids.is_empty() && r.excluded_ids.is_empty());
    }

    #[test]
    fn noisy_demo_partitions_ids() {
        let (_, v, m, c) = setup(400);
        let m = perturb_language(&m, &v, "fra", 1.0, 0).unwrap();
        let r = evaluate_corpus(&m, v.tokenizer(), &c, "eng", "fra").unwrap();
        assert_eq!(r.ts_ids.len() + r.tf_ids.len() + r.excluded_ids.len(), 400);
        assert!(!r.tf_ids.is_empty());
        let json = serde_json::to_value(&r).unwrap();
        for k in ["eng", "l2", "ts_ids", "tf_ids", "excluded_ids"] {
            assert!(json.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn moving_gold_moves_the_prediction() {
        let (_, v, m, c) = setup(200);
        for inst in c.instances("eng").unwrap() {
            let mut swapped: Instance = inst.clone();
            swapped.options.swap(0, 1);
            swapped.gold = 1 - inst.gold;
            let a = score_mcqa(&m, &inst.id, "eng", &encode_mcqa(inst, v.tokenizer()).unwrap()).unwrap();
            let b = score_mcqa(
                &m,
                &inst.id,
                "eng",
                &encode_mcqa(&swapped, v.tokenizer()).unwrap(),
            )
            .unwrap();
            assert!(a.correct && b.correct);
            assert_ne!(a.predicted, b.predicted);
        }
    }
}
