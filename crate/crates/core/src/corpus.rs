//! Parallel multiple-choice corpora: data model, synthetic generation, JSONL
//! I/O, tokenization, and the two prompt renderings.
//!
//! * The concatenation rendering `premise [SEP] option` feeds the alignment
//!   metrics, which embed the last token of each premise+option text.
//! * The MCQA rendering lays the prompt out as
//!   `[BOS] premise [SEP] A opt_1 B opt_2 ... [COLON] [ANS]`; the answer is
//!   read from the letter-token logits at the final position.
//!
//! Gold indices are 0-based both in files and in memory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demo::DemoVocab;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const BOS: &str = "[BOS]";
pub const SEP: &str = "[SEP]";
pub const COLON: &str = "[COLON]";
pub const ANS: &str = "[ANS]";
pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
pub const ENGLISH: &str = "eng";

/// Name of the concept token `k` in language `lang`.
pub fn concept_token(k: usize, lang: &str) -> String {
    format!("c{k}@{lang}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub lang: String,
    pub premise: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default)]
    pub gold: usize,
}

impl Instance {
    pub fn n_opt(&self) -> usize {
        self.options.len()
    }

    /// Premise with the optional question appended.
    pub fn full_premise(&self) -> String {
        match &self.question {
            Some(q) if !q.trim().is_empty() => format!("{} {}", self.premise, q),
            _ => self.premise.clone(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.premise.split_whitespace().next().is_none() {
            return Err("empty premise".into());
        }
        if self.options.is_empty() {
            // premise-only sentence (generic parallel text)
            return if self.gold == 0 {
                Ok(())
            } else {
                Err("gold set on an instance without options".into())
            };
        }
        if self.options.len() < 2 {
            return Err("fewer than two options".into());
        }
        if self.gold >= self.options.len() {
            return Err(format!(
                "gold index {} out of range for {} options",
                self.gold,
                self.options.len()
            ));
        }
        let distinct: BTreeSet<&str> = self.options.iter().map(|o| o.trim()).collect();
        if distinct.len() != self.options.len() {
            return Err("options are not pairwise distinct".into());
        }
        if self.options.iter().any(|o| o.split_whitespace().next().is_none()) {
            return Err("empty option".into());
        }
        Ok(())
    }
}

/// `premise [SEP] option_i`: the text whose last-token states feed the
/// premise+option alignment metrics.
pub fn render_concat(inst: &Instance, option: usize) -> Result<String> {
    let opt = inst.options.get(option).ok_or_else(|| {
        Error::IndexOutOfRange(format!("option {option} of {} in `{}`", inst.n_opt(), inst.id))
    })?;
    Ok(format!("{} {SEP} {}", inst.full_premise(), opt))
}

/// Language → instances, with identical id sets, option counts and gold
/// indices in every language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    langs: BTreeMap<String, Vec<Instance>>,
    index: BTreeMap<String, HashMap<String, usize>>,
}

impl ParallelCorpus {
    /// Validate and index. Fails on duplicate ids or any parallelism breach.
    pub fn new(langs: BTreeMap<String, Vec<Instance>>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (lang, insts) in &langs {
            let mut ids = HashMap::new();
            for (i, inst) in insts.iter().enumerate() {
                if ids.insert(inst.id.clone(), i).is_some() {
                    return Err(Error::DuplicateId(inst.id.clone()));
                }
            }
            index.insert(lang.clone(), ids);
        }
        let corpus = Self { langs, index };
        validate_parallel(&corpus)?;
        Ok(corpus)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.langs.keys().map(String::as_str)
    }

    pub fn has_language(&self, lang: &str) -> bool {
        self.langs.contains_key(lang)
    }

    pub fn instances(&self, lang: &str) -> Result<&[Instance]> {
        self.langs
            .get(lang)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn get(&self, lang: &str, id: &str) -> Result<&Instance> {
        let idx = self
            .index
            .get(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?
            .get(id)
            .ok_or_else(|| Error::NonParallel {
                id: id.to_string(),
                reason: format!("absent from {lang}"),
            })?;
        Ok(&self.langs[lang][*idx])
    }

    /// All ids in ascending order.
    pub fn ids(&self) -> Vec<String> {
        self.index
            .values()
            .next()
            .map(|m| {
                let mut ids: Vec<String> = m.keys().cloned().collect();
                ids.sort();
                ids
            })
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.index.values().next().map_or(0, HashMap::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn validate_parallel(corpus: &ParallelCorpus) -> Result<()> {
    let mut langs = corpus.langs.iter();
    let Some((ref_lang, ref_insts)) = langs.next() else {
        return Ok(());
    };
    let ref_index = &corpus.index[ref_lang];
    for (lang, insts) in langs {
        let index = &corpus.index[lang];
        for inst in insts {
            let Some(&j) = ref_index.get(&inst.id) else {
                return Err(Error::NonParallel {
                    id: inst.id.clone(),
                    reason: format!("present in {lang}, absent from {ref_lang}"),
                });
            };
            let other = &ref_insts[j];
            if other.n_opt() != inst.n_opt() {
                return Err(Error::NonParallel {
                    id: inst.id.clone(),
                    reason: format!(
                        "{} options in {ref_lang}, {} in {lang}",
                        other.n_opt(),
                        inst.n_opt()
                    ),
                });
            }
            if other.gold != inst.gold {
                return Err(Error::NonParallel {
                    id: inst.id.clone(),
                    reason: format!("gold {} in {ref_lang}, {} in {lang}", other.gold, inst.gold),
                });
            }
        }
        if let Some(missing) = ref_insts.iter().find(|i| !index.contains_key(&i.id)) {
            return Err(Error::NonParallel {
                id: missing.id.clone(),
                reason: format!("present in {ref_lang}, absent from {lang}"),
            });
        }
    }
    Ok(())
}

fn default_premise_len() -> usize {
    3
}

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub n_opt: usize,
    pub languages: Vec<String>,
    #[serde(default = "default_premise_len")]
    pub premise_len: usize,
    pub seed: u64,
}

/// Per instance: a concept `c`, distinct distractor concepts, and a uniformly
/// drawn gold slot. The premise repeats `c`'s token; the same draw is
/// rendered in every language's token set.
pub fn generate_parallel_corpus(gen: &GenConfig, vocab: &DemoVocab) -> Result<ParallelCorpus> {
    let bad = |m: String| Err(Error::InvalidGenConfig(m));
    if gen.n == 0 {
        return bad("n must be at least 1".into());
    }
    if !(2..=LETTERS.len()).contains(&gen.n_opt) {
        return bad(format!("n_opt must be in 2..={}", LETTERS.len()));
    }
    if gen.premise_len == 0 {
        return bad("premise_len must be positive".into());
    }
    if !gen.languages.iter().any(|l| l == ENGLISH) || gen.languages.len() < 2 {
        return bad("languages must contain eng and at least one other".into());
    }
    let langs: BTreeSet<&String> = gen.languages.iter().collect();
    if langs.len() != gen.languages.len() {
        return bad("duplicate language".into());
    }
    for l in &gen.languages {
        if !vocab.languages().iter().any(|v| v == l) {
            return Err(Error::UnknownLanguage(l.clone()));
        }
    }
    let kappa = vocab.n_concepts();
    if kappa < gen.n_opt {
        return bad(format!("{kappa} concepts cannot fill {} options", gen.n_opt));
    }

    let mut rng = substream(gen.seed, "corpus");
    let mut draws = Vec::with_capacity(gen.n);
    for _ in 0..gen.n {
        let concept = rng.random_range(0..kappa);
        let mut slots = vec![concept];
        while slots.len() < gen.n_opt {
            let d = rng.random_range(0..kappa);
            if !slots.contains(&d) {
                slots.push(d);
            }
        }
        let gold = rng.random_range(0..gen.n_opt);
        slots.swap(0, gold);
        draws.push((concept, slots, gold));
    }

    let mut out = BTreeMap::new();
    for lang in &gen.languages {
        let insts = draws
            .iter()
            .enumerate()
            .map(|(i, (concept, slots, gold))| {
                let tok = concept_token(*concept, lang);
                Instance {
                    id: format!("i-{i:06}"),
                    lang: lang.clone(),
                    premise: vec![tok.as_str(); gen.premise_len].join(" "),
                    question: None,
                    options: slots.iter().map(|&k| concept_token(k, lang)).collect(),
                    gold: *gold,
                }
            })
            .collect();
        out.insert(lang.clone(), insts);
    }
    ParallelCorpus::new(out)
}

/// Premise-only parallel sentences (random concept sequences) for the
/// generic-sentence alignment metric. Ids are `g-000000`, ...
pub fn generate_generic_corpus(gen: &GenConfig, vocab: &DemoVocab) -> Result<ParallelCorpus> {
    if gen.n == 0 || gen.premise_len == 0 {
        return Err(Error::InvalidGenConfig(
            "n and premise_len must be positive".into(),
        ));
    }
    for l in &gen.languages {
        if !vocab.languages().iter().any(|v| v == l) {
            return Err(Error::UnknownLanguage(l.clone()));
        }
    }
    let mut rng = substream(gen.seed, "generic");
    let draws: Vec<Vec<usize>> = (0..gen.n)
        .map(|_| {
            (0..gen.premise_len)
                .map(|_| rng.random_range(0..vocab.n_concepts()))
                .collect()
        })
        .collect();
    let mut out = BTreeMap::new();
    for lang in &gen.languages {
        let insts = draws
            .iter()
            .enumerate()
            .map(|(i, ks)| Instance {
                id: format!("g-{i:06}"),
                lang: lang.clone(),
                premise: ks
                    .iter()
                    .map(|&k| concept_token(k, lang))
                    .collect::<Vec<_>>()
                    .join(" "),
                question: None,
                options: Vec::new(),
                gold: 0,
            })
            .collect();
        out.insert(lang.clone(), insts);
    }
    ParallelCorpus::new(out)
}

pub fn corpus_file(dir: &Path, lang: &str) -> PathBuf {
    dir.join(format!("{lang}.jsonl"))
}

/// Write one `{lang}.jsonl` per language. `header`, when given, is written
/// as a leading `#` comment line.
pub fn save_corpus(corpus: &ParallelCorpus, dir: &Path, header: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (lang, insts) in &corpus.langs {
        let mut buf = Vec::new();
        if let Some(h) = header {
            writeln!(buf, "# {h}")?;
        }
        for inst in insts {
            serde_json::to_writer(&mut buf, inst)?;
            buf.push(b'\n');
        }
        fs::write(corpus_file(dir, lang), buf)?;
    }
    Ok(())
}

fn read_language(path: &Path, lang: &str) -> Result<Vec<Instance>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let inst: Instance = serde_json::from_str(trimmed).map_err(|e| malformed(e.to_string()))?;
        if inst.lang != lang {
            return Err(malformed(format!("lang `{}` in a file for `{lang}`", inst.lang)));
        }
        inst.validate().map_err(malformed)?;
        out.push(inst);
    }
    Ok(out)
}

/// Load `{lang}.jsonl` for each requested language and validate parallelism.
pub fn load_corpus(dir: &Path, langs: &[String]) -> Result<ParallelCorpus> {
    let mut out = BTreeMap::new();
    for lang in langs {
        out.insert(lang.clone(), read_language(&corpus_file(dir, lang), lang)?);
    }
    ParallelCorpus::new(out)
}

/// Load every `*.jsonl` file in `dir`, taking the language from the file stem.
pub fn load_corpus_dir(dir: &Path) -> Result<ParallelCorpus> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut langs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                langs.push(stem.to_string());
            }
        }
    }
    langs.sort();
    load_corpus(dir, &langs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: String,
    pub sep: String,
    pub colon: String,
    pub ans: String,
    pub letters: Vec<String>,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            bos: BOS.into(),
            sep: SEP.into(),
            colon: COLON.into(),
            ans: ANS.into(),
            letters: LETTERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Whitespace tokenizer over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab: BTreeMap<String, u32>,
    pub specials: Specials,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

impl Tokenizer {
    pub fn id(&self, token: &str) -> Result<u32> {
        self.vocab
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        match self.max_len {
            Some(max) if len > max => Err(Error::SequenceTooLong { len, max }),
            _ => Ok(()),
        }
    }

    fn push_words(&self, text: &str, out: &mut Vec<u32>) -> Result<()> {
        for w in text.split_whitespace() {
            out.push(self.id(w)?);
        }
        Ok(())
    }

    /// `[BOS]` followed by the whitespace-separated tokens of `text`.
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![self.id(&self.specials.bos)?];
        self.push_words(text, &mut ids)?;
        self.check_len(ids.len())?;
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Token ids of one MCQA prompt plus the answer-letter targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptEncoding {
    pub tokens: Vec<u32>,
    /// Letter token ids in option order.
    pub targets: Vec<u32>,
    pub gold: usize,
}

impl PromptEncoding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of the last token (`[ANS]`).
    pub fn last(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Position of the penultimate token (`[COLON]`).
    pub fn penultimate(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn gold_target(&self) -> u32 {
        self.targets[self.gold]
    }
}

/// `[BOS] premise [SEP] A opt_1 B opt_2 ... [COLON] [ANS]`.
pub fn encode_mcqa(inst: &Instance, tok: &Tokenizer) -> Result<PromptEncoding> {
    let letters = &tok.specials.letters;
    if inst.n_opt() < 2 {
        return Err(Error::IndexOutOfRange(format!(
            "`{}` has {} options; MCQA needs at least two",
            inst.id,
            inst.n_opt()
        )));
    }
    if inst.n_opt() > letters.len() {
        return Err(Error::IndexOutOfRange(format!(
            "`{}` has {} options but only {} letters exist",
            inst.id,
            inst.n_opt(),
            letters.len()
        )));
    }
    let mut tokens = vec![tok.id(&tok.specials.bos)?];
    tok.push_words(&inst.full_premise(), &mut tokens)?;
    tokens.push(tok.id(&tok.specials.sep)?);
    let mut targets = Vec::with_capacity(inst.n_opt());
    for (letter, opt) in letters.iter().zip(&inst.options) {
        let id = tok.id(letter)?;
        targets.push(id);
        tokens.push(id);
        tok.push_words(opt, &mut tokens)?;
    }
    tokens.push(tok.id(&tok.specials.colon)?);
    tokens.push(tok.id(&tok.specials.ans)?);
    tok.check_len(tokens.len())?;
    Ok(PromptEncoding {
        tokens,
        targets,
        gold: inst.gold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{build_demo_model, DemoConfig};

    fn vocab() -> (DemoVocab, Tokenizer) {
        let (_, v) = build_demo_model(&DemoConfig::default()).unwrap();
        let t = v.tokenizer().clone();
        (v, t)
    }

    fn gen(n: usize) -> GenConfig {
        GenConfig {
            n,
            n_opt: 2,
            languages: vec!["eng".into(), "fra".into()],
            premise_len: 3,
            seed: 17,
        }
    }

    fn inst(id: &str, lang: &str, gold: usize) -> Instance {
        Instance {
            id: id.into(),
            lang: lang.into(),
            premise: format!("c3@{lang} c3@{lang} c3@{lang}"),
            question: None,
            options: vec![format!("c3@{lang}"), format!("c5@{lang}")],
            gold,
        }
    }

    #[test]
    fn single_instance_is_parallel() {
        let (v, _) = vocab();
        let c = generate_parallel_corpus(&gen(1), &v).unwrap();
        let e = c.get("eng", "i-000000").unwrap();
        let f = c.get("fra", "i-000000").unwrap();
        assert_eq!(e.gold, f.gold);
    }

    #[test]
    fn generation_is_seeded() {
        let (v, _) = vocab();
        let a = generate_parallel_corpus(&gen(50), &v).unwrap();
        let b = generate_parallel_corpus(&gen(50), &v).unwrap();
        assert_eq!(a, b);
        let c = generate_parallel_corpus(&GenConfig { seed: 18, ..gen(50) }, &v).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gold_letter_is_balanced() {
        let (v, _) = vocab();
        let n = 2000;
        let c = generate_parallel_corpus(&gen(n), &v).unwrap();
        let at_a = c.instances("eng").unwrap().iter().filter(|i| i.gold == 0).count();
        let bound = 3.0 * (n as f64).sqrt() / 2.0;
        assert!(((at_a as f64) - n as f64 / 2.0).abs() <= bound, "{at_a}");
    }

    #[test]
    fn generator_rejects_bad_configs() {
        let (v, _) = vocab();
        for g in [
            GenConfig { n: 0, ..gen(1) },
            GenConfig { n_opt: 1, ..gen(1) },
            GenConfig {
                languages: vec!["eng".into()],
                ..gen(1)
            },
            GenConfig {
                languages: vec!["fra".into(), "deu".into()],
                ..gen(1)
            },
        ] {
            assert!(generate_parallel_corpus(&g, &v).is_err(), "{g:?}");
        }
    }

    #[test]
    fn concat_rendering() {
        let i = inst("x", "eng", 0);
        assert_eq!(render_concat(&i, 0).unwrap(), "c3@eng c3@eng c3@eng [SEP] c3@eng");
        assert_ne!(render_concat(&i, 0).unwrap(), render_concat(&i, 1).unwrap());
        assert!(matches!(render_concat(&i, 2), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn parallel_renderings_differ_only_in_language_tags() {
        let (v, _) = vocab();
        let c = generate_parallel_corpus(&gen(100), &v).unwrap();
        for id in c.ids() {
            let e = c.get("eng", &id).unwrap();
            let f = c.get("fra", &id).unwrap();
            for o in 0..e.n_opt() {
                let re = render_concat(e, o).unwrap();
                let rf = render_concat(f, o).unwrap();
                let we: Vec<&str> = re.split(' ').collect();
                let wf: Vec<&str> = rf.split(' ').collect();
                assert_eq!(we.len(), wf.len());
                for (a, b) in we.iter().zip(&wf) {
                    if a != b {
                        assert_eq!(a.strip_suffix("@eng"), b.strip_suffix("@fra"));
                    }
                }
            }
        }
    }

    #[test]
    fn mcqa_layout() {
        let (_, tok) = vocab();
        let e = encode_mcqa(&inst("x", "eng", 1), &tok).unwrap();
        let f = encode_mcqa(&inst("x", "fra", 1), &tok).unwrap();
        // BOS + 3 premise + SEP + (letter, option) * 2 + COLON + ANS
        assert_eq!(e.len(), 11);
        assert_eq!(e.tokens[e.penultimate()], tok.id(COLON).unwrap());
        assert_eq!(e.tokens[e.last()], tok.id(ANS).unwrap());
        assert_eq!(e.len(), f.len());
        assert_eq!(e.targets, f.targets);
        assert_eq!(e.gold_target(), tok.id("B").unwrap());
    }

    #[test]
    fn mcqa_errors() {
        let (_, tok) = vocab();
        let mut i = inst("x", "eng", 0);
        i.options[1] = "nonsense".into();
        assert!(matches!(encode_mcqa(&i, &tok), Err(Error::UnknownToken(_))));
        let mut long = inst("x", "eng", 0);
        long.premise = vec!["c1@eng"; 20].join(" ");
        assert!(matches!(
            encode_mcqa(&long, &tok),
            Err(Error::SequenceTooLong { .. })
        ));
        let mut bare = inst("x", "eng", 0);
        bare.options.clear();
        assert!(encode_mcqa(&bare, &tok).is_err());
    }

    #[test]
    fn question_is_appended_to_premise() {
        let mut i = inst("x", "eng", 0);
        i.question = Some("c9@eng".into());
        assert_eq!(
            render_concat(&i, 1).unwrap(),
            "c3@eng c3@eng c3@eng c9@eng [SEP] c5@eng"
        );
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let (v, _) = vocab();
        let c = generate_parallel_corpus(&gen(20), &v).unwrap();
        save_corpus(&c, dir.path(), Some("dali-lab test")).unwrap();
        let back = load_corpus(dir.path(), &["eng".into(), "fra".into()]).unwrap();
        assert_eq!(c, back);
        assert_eq!(load_corpus_dir(dir.path()).unwrap(), c);

        let bad_gold = r#"{"id":"a","lang":"eng","premise":"c1@eng","options":["c1@eng","c2@eng"],"gold":2}"#;
        fs::write(corpus_file(dir.path(), "eng"), bad_gold).unwrap();
        assert!(matches!(
            load_corpus(dir.path(), &["eng".into()]),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn parallelism_violations() {
        let mut langs = BTreeMap::new();
        langs.insert("eng".to_string(), vec![inst("a", "eng", 0), inst("b", "eng", 0)]);
        langs.insert("fra".to_string(), vec![inst("a", "fra", 0)]);
        assert!(matches!(
            ParallelCorpus::new(langs.clone()),
            Err(Error::NonParallel { .. })
        ));

        langs.insert("fra".to_string(), vec![inst("a", "fra", 0), inst("b", "fra", 1)]);
        assert!(matches!(
            ParallelCorpus::new(langs.clone()),
            Err(Error::NonParallel { .. })
        ));

        langs.insert("fra".to_string(), vec![inst("a", "fra", 0), inst("a", "fra", 0)]);
        assert!(matches!(ParallelCorpus::new(langs), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn generic_sentences_are_parallel_and_option_free() {
        let (v, tok) = vocab();
        let c = generate_generic_corpus(&gen(30), &v).unwrap();
        assert_eq!(c.len(), 30);
        for inst in c.instances("fra").unwrap() {
            assert!(inst.options.is_empty());
            assert_eq!(tok.encode_text(&inst.premise).unwrap().len(), 4);
        }
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path(), None).unwrap();
        assert_eq!(load_corpus_dir(dir.path()).unwrap(), c);
    }

    #[test]
    fn premise_only_instances_validate() {
        let mut i = inst("s", "eng", 0);
        i.options.clear();
        assert!(i.validate().is_ok());
        i.gold = 1;
        assert!(i.validate().is_err());
    }
}
