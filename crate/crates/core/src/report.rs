//! Pipeline commands behind the `dali-lab` binary and the CSV/JSON emitters.
//!
//! Artifacts live under one output directory:
//!
//! ```text
//! out/corpus/{lang}.jsonl      task corpus
//! out/generic/{lang}.jsonl     premise-only sentences (mexa-f)
//! out/model/                   model.json, model.bin, tokenizer.json
//! out/run_config.json          resolved configuration
//! out/eval_{lang}.json         one per non-English language
//! out/alignment_profile.csv    out/ts_tf_delta.csv
//! out/patch_sweep.csv          out/delta_flip.csv    out/entropy.csv
//! out/report.json
//! ```
//!
//! Every text artifact starts with a metadata line (`#` comment or a `meta`
//! JSON key) carrying the tool version, the master seed and the config hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::align::{alignment_bits, ts_tf_delta, AlignmentProfile, Metric, TsTfDelta};
use crate::corpus::{
    generate_generic_corpus, generate_parallel_corpus, load_corpus, save_corpus, GenConfig, ParallelCorpus,
    Tokenizer, ENGLISH,
};
use crate::demo::{build_demo_model, build_noisy_demo_model, DemoConfig, DemoVocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, EvalReport};
use crate::model::{build_random_model, load_model, save_model, Model, ModelSpec, NormKind};
use crate::patching::{
    delta_flip, entropy_comparison, flip_stats, patch_sweep, DeltaCell, EntropyCell, PatchExperimentConfig,
    PatchMode, PatchPosition, SweepCell,
};
use crate::stats::DEFAULT_ALPHA;

pub const TOOL: &str = "dali-lab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const PROFILE_CSV: &str = "alignment_profile.csv";
pub const DELTA_CSV: &str = "ts_tf_delta.csv";
pub const SWEEP_CSV: &str = "patch_sweep.csv";
pub const DELTA_FLIP_CSV: &str = "delta_flip.csv";
pub const ENTROPY_CSV: &str = "entropy.csv";
pub const REPORT_FILE: &str = "report.json";

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidGenConfig(_)
        | Error::InvalidSpec(_)
        | Error::SubspaceOverflow { .. }
        | Error::UnknownLanguage(_)
        | Error::WouldOverwrite(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::EmptyTfSet | Error::EmptySubset | Error::EmptyGroup(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Demo,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Task instances per language.
    pub n: usize,
    /// Generic premise-only sentences per language.
    pub n_generic: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n: 2000,
            n_generic: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub modes: Vec<PatchMode>,
    pub positions: Vec<PatchPosition>,
    pub layers: Option<(usize, usize)>,
}

impl Default for PatchSection {
    fn default() -> Self {
        let d = PatchExperimentConfig::default();
        Self {
            modes: d.modes,
            positions: d.positions,
            layers: d.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub generic: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

/// Everything a run needs. Every random draw derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model_kind: ModelKind,
    pub demo: DemoConfig,
    /// Shape of the random baseline model; vocabulary and length follow the demo.
    pub random: RandomSection,
    pub corpus: CorpusSection,
    pub metrics: Vec<Metric>,
    pub alpha: f64,
    pub patch: PatchSection,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for RandomSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            mlp_hidden: 128,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_kind: ModelKind::Demo,
            demo: DemoConfig::default(),
            random: RandomSection::default(),
            corpus: CorpusSection::default(),
            metrics: vec![Metric::Dali, Metric::DaliSt, Metric::MexaT, Metric::MexaF],
            alpha: DEFAULT_ALPHA,
            patch: PatchSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Propagate the master seed into the sub-configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.demo.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.demo.validate()?;
        if self.corpus.n == 0 {
            return Err(Error::InvalidConfig("corpus.n must be positive".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidConfig("at least one metric is required".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n: self.corpus.n,
            n_opt: self.demo.n_opt,
            languages: self.demo.languages.clone(),
            premise_len: self.demo.premise_len,
            seed: self.seed,
        }
    }

    pub fn patch_config(&self) -> PatchExperimentConfig {
        PatchExperimentConfig {
            modes: self.patch.modes.clone(),
            positions: self.patch.positions.clone(),
            layers: self.patch.layers,
            control_seed: self.seed,
        }
    }
}

/// Resolved command context.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    /// English first, then the languages compared against it.
    pub langs: Vec<String>,
    pub force: bool,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf, langs: Option<Vec<String>>, force: bool) -> Result<Self> {
        config.validate()?;
        let langs = langs.unwrap_or_else(|| {
            let mut l = vec![ENGLISH.to_string()];
            l.extend(config.demo.languages.iter().filter(|x| *x != ENGLISH).cloned());
            l
        });
        if langs.len() < 2 || langs[0] != ENGLISH {
            return Err(Error::InvalidConfig(
                "--langs must start with eng and name at least one other language".into(),
            ));
        }
        for l in &langs {
            if !config.demo.languages.contains(l) {
                return Err(Error::UnknownLanguage(l.clone()));
            }
        }
        Ok(Self {
            config,
            out,
            langs,
            force,
        })
    }

    pub fn l2s(&self) -> &[String] {
        &self.langs[1..]
    }

    fn resolve(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out.join(default))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.corpus, "corpus")
    }

    pub fn generic_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.generic, "generic")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.model, "model")
    }

    pub fn eval_file(&self, l2: &str) -> PathBuf {
        self.out.join(format!("eval_{l2}.json"))
    }

    pub fn meta(&self) -> Value {
        json!({
            "tool": TOOL,
            "version": VERSION,
            "seed": self.config.seed,
            "config_hash": self.config.hash(),
        })
    }

    pub fn meta_line(&self) -> String {
        format!(
            "{TOOL} {VERSION} seed={} config={}",
            self.config.seed,
            self.config.hash()
        )
    }

    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::WouldOverwrite(path.to_path_buf()));
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(map) = &mut v {
            let mut with_meta = Map::new();
            with_meta.insert("meta".into(), self.meta());
            for (k, x) in std::mem::take(map) {
                if k != "meta" {
                    with_meta.insert(k, x);
                }
            }
            *map = with_meta;
        }
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text)?;
        Ok(())
    }

    fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut buf = format!("# {}\n", self.meta_line()).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header).map_err(csv_err)?;
            for r in rows {
                w.write_record(r).map_err(csv_err)?;
            }
            w.flush()?;
        }
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, buf)?;
        Ok(path)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `printf("%g")`-style formatting with six significant digits.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        strip(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip(mantissa), exp.abs())
    }
}

fn opt_g(x: Option<f64>) -> String {
    x.map(fmt_g).unwrap_or_default()
}

fn load_artifacts(ctx: &Context) -> Result<(Model, Tokenizer)> {
    let dir = ctx.model_dir();
    let model = load_model(&dir)?;
    let tok = Tokenizer::load(&dir.join(TOKENIZER_FILE))?;
    if tok.vocab.len() != model.spec().vocab_size {
        return Err(Error::ManifestMismatch(format!(
            "tokenizer has {} entries, model vocabulary {}",
            tok.vocab.len(),
            model.spec().vocab_size
        )));
    }
    Ok((model, tok))
}

fn load_task_corpus(ctx: &Context) -> Result<ParallelCorpus> {
    load_corpus(&ctx.corpus_dir(), &ctx.langs)
}

fn load_eval(ctx: &Context, l2: &str) -> Result<EvalReport> {
    let path = ctx.eval_file(l2);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    Ok(serde_json::from_slice(&fs::read(&path)?)?)
}

fn demo_vocab(ctx: &Context) -> Result<DemoVocab> {
    build_demo_model(&ctx.config.demo).map(|(_, v)| v)
}

/// Write the task corpus and the generic sentences.
pub fn cmd_gen_corpus(ctx: &Context) -> Result<Vec<PathBuf>> {
    let vocab = demo_vocab(ctx)?;
    let gen = ctx.config.gen_config();
    let task = generate_parallel_corpus(&gen, &vocab)?;
    let generic = generate_generic_corpus(
        &GenConfig {
            n: ctx.config.corpus.n_generic.max(1),
            ..gen
        },
        &vocab,
    )?;
    let mut written = Vec::new();
    for (dir, corpus) in [(ctx.corpus_dir(), &task), (ctx.generic_dir(), &generic)] {
        for lang in corpus.languages() {
            ctx.guard(&crate::corpus::corpus_file(&dir, lang))?;
        }
        save_corpus(corpus, &dir, Some(&ctx.meta_line()))?;
        let langs: Vec<String> = corpus.languages().map(str::to_string).collect();
        if load_corpus(&dir, &langs)? != *corpus {
            return Err(Error::NonParallel {
                id: String::new(),
                reason: format!("{} does not read back identically", dir.display()),
            });
        }
        written.extend(langs.iter().map(|l| crate::corpus::corpus_file(&dir, l)));
    }
    ctx.write_json(&ctx.out.join(RUN_CONFIG_FILE), &json!({ "config": ctx.config }))?;
    Ok(written)
}

pub fn build_model(ctx: &Context, kind: ModelKind) -> Result<(Model, DemoVocab)> {
    let cfg = &ctx.config;
    match kind {
        ModelKind::Demo => build_noisy_demo_model(&cfg.demo),
        ModelKind::Random => {
            let vocab = demo_vocab(ctx)?;
            let r = &cfg.random;
            let spec = ModelSpec {
                d_model: r.d_model,
                n_layers: cfg.demo.n_layers,
                n_heads: r.n_heads,
                head_dim: r.head_dim,
                vocab_size: vocab.vocab_size(),
                max_seq_len: cfg.demo.prompt_len(),
                mlp_hidden: r.mlp_hidden,
                norm: NormKind::Rms,
                norm_eps: 1e-5,
            };
            Ok((build_random_model(&spec, cfg.seed)?, vocab))
        }
    }
}

/// Build the model, write weights and tokenizer, and check the round trip.
pub fn cmd_build_model(ctx: &Context, kind: ModelKind) -> Result<PathBuf> {
    let dir = ctx.model_dir();
    for f in [
        crate::model::MANIFEST_FILE,
        crate::model::BLOB_FILE,
        TOKENIZER_FILE,
    ] {
        ctx.guard(&dir.join(f))?;
    }
    let (model, vocab) = build_model(ctx, kind)?;
    let mut meta = ctx.meta();
    meta["model_kind"] = json!(kind);
    save_model(&model, &dir, Some(meta))?;
    ctx.write_json(&dir.join(TOKENIZER_FILE), vocab.tokenizer())?;
    if load_model(&dir)? != model {
        return Err(Error::ManifestMismatch(
            "saved model does not load back identically".into(),
        ));
    }
    Ok(dir)
}

pub fn cmd_eval(ctx: &Context) -> Result<Vec<EvalReport>> {
    let (model, tok) = load_artifacts(ctx)?;
    let corpus = load_task_corpus(ctx)?;
    ctx.l2s()
        .iter()
        .map(|l2| {
            let report = evaluate_corpus(&model, &tok, &corpus, ENGLISH, l2)?;
            ctx.write_json(&ctx.eval_file(l2), &report)?;
            Ok(report)
        })
        .collect()
}

/// Profiles (TS, TF, pooled) and TS-TF tests for every configured metric.
#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub profiles: Vec<AlignmentProfile>,
    pub deltas: Vec<TsTfDelta>,
}

pub fn run_align(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    generic: Option<&ParallelCorpus>,
    l2: &str,
    eval: &EvalReport,
    metrics: &[Metric],
    alpha: f64,
) -> Result<AlignOutput> {
    let pool = eval.english_correct();
    let mut profiles = Vec::new();
    let mut deltas = Vec::new();
    for &metric in metrics {
        if metric.per_instance() {
            if pool.is_empty() {
                return Err(Error::EmptySubset);
            }
            let bits = alignment_bits(model, tok, corpus, ENGLISH, l2, metric, &pool)?;
            let groups = [("TS", &eval.ts_ids), ("TF", &eval.tf_ids)];
            let mut by_group = BTreeMap::new();
            for (name, ids) in groups {
                if !ids.is_empty() {
                    by_group.insert(name, AlignmentProfile::from_bits(bits.select(ids)?, name)?);
                }
            }
            if let (Some(ts), Some(tf)) = (by_group.get("TS"), by_group.get("TF")) {
                deltas.push(ts_tf_delta(ts, tf, alpha)?);
            }
            profiles.push(AlignmentProfile::from_bits(bits, "all")?);
            profiles.extend(by_group.into_values());
        } else {
            let g = generic.ok_or_else(|| Error::MissingArtifact(PathBuf::from("generic")))?;
            let ids = g.ids();
            let bits = alignment_bits(model, tok, g, ENGLISH, l2, metric, &ids)?;
            profiles.push(AlignmentProfile::from_bits(bits, "all")?);
        }
    }
    Ok(AlignOutput { profiles, deltas })
}

pub const PROFILE_HEADER: [&str; 6] = ["metric", "lang", "group", "layer", "n", "frac_aligned"];
pub const DELTA_HEADER: [&str; 11] = [
    "metric",
    "lang",
    "lambda_max",
    "n_ts",
    "n_tf",
    "frac_ts",
    "frac_tf",
    "delta",
    "z",
    "p",
    "significant",
];

fn group_rank(g: &str) -> u8 {
    match g {
        "all" => 0,
        "TS" => 1,
        _ => 2,
    }
}

pub fn profile_rows(profiles: &[AlignmentProfile]) -> Vec<Vec<String>> {
    let mut ps: Vec<&AlignmentProfile> = profiles.iter().collect();
    ps.sort_by(|a, b| {
        (a.metric, &a.lang, group_rank(&a.group)).cmp(&(b.metric, &b.lang, group_rank(&b.group)))
    });
    ps.iter()
        .flat_map(|p| {
            p.fractions.iter().enumerate().map(move |(layer, &f)| {
                vec![
                    p.metric.to_string(),
                    p.lang.clone(),
                    p.group.clone(),
                    layer.to_string(),
                    p.n.to_string(),
                    fmt_g(f),
                ]
            })
        })
        .collect()
}

pub fn delta_rows(deltas: &[TsTfDelta]) -> Vec<Vec<String>> {
    let mut ds: Vec<&TsTfDelta> = deltas.iter().collect();
    ds.sort_by(|a, b| (a.metric, &a.lang).cmp(&(b.metric, &b.lang)));
    ds.iter()
        .map(|d| {
            vec![
                d.metric.to_string(),
                d.lang.clone(),
                d.lambda_max.to_string(),
                d.n_ts.to_string(),
                d.n_tf.to_string(),
                fmt_g(d.frac_ts),
                fmt_g(d.frac_tf),
                fmt_g(d.delta),
                fmt_g(d.test.z),
                fmt_g(d.test.p),
                d.test.significant.to_string(),
            ]
        })
        .collect()
}

pub fn cmd_align(ctx: &Context, metrics: &[Metric]) -> Result<Vec<PathBuf>> {
    let (model, tok) = load_artifacts(ctx)?;
    let corpus = load_task_corpus(ctx)?;
    let generic = if metrics.iter().any(|m| !m.per_instance()) {
        Some(load_corpus(&ctx.generic_dir(), &ctx.langs)?)
    } else {
        None
    };
    let mut profiles = Vec::new();
    let mut deltas = Vec::new();
    for l2 in ctx.l2s() {
        let eval = load_eval(ctx, l2)?;
        let out = run_align(
            &model,
            &tok,
            &corpus,
            generic.as_ref(),
            l2,
            &eval,
            metrics,
            ctx.config.alpha,
        )?;
        profiles.extend(out.profiles);
        deltas.extend(out.deltas);
    }
    Ok(vec![
        ctx.write_csv(PROFILE_CSV, &PROFILE_HEADER, &profile_rows(&profiles))?,
        ctx.write_csv(DELTA_CSV, &DELTA_HEADER, &delta_rows(&deltas))?,
    ])
}

pub const SWEEP_HEADER: [&str; 11] = [
    "mode",
    "lang",
    "position",
    "layer",
    "n",
    "flips",
    "flip_rate",
    "mean_gold_logit",
    "mean_orig_logit",
    "mean_entropy_all",
    "mean_entropy_flipped",
];
pub const DELTA_FLIP_HEADER: [&str; 4] = ["lang", "position", "layer", "delta_flip_rate"];
pub const ENTROPY_HEADER: [&str; 7] = [
    "lang",
    "position",
    "layer",
    "n_flipped_equivalent",
    "mean_entropy_equivalent",
    "n_flipped_control",
    "mean_entropy_control",
];

pub fn sweep_rows(cells: &[SweepCell]) -> Vec<Vec<String>> {
    let mut cs: Vec<&SweepCell> = cells.iter().collect();
    cs.sort_by(|a, b| (a.mode, &a.lang, a.position, a.layer).cmp(&(b.mode, &b.lang, b.position, b.layer)));
    cs.iter()
        .map(|c| {
            vec![
                c.mode.to_string(),
                c.lang.clone(),
                c.position.to_string(),
                c.layer.to_string(),
                c.n.to_string(),
                c.flips.to_string(),
                fmt_g(c.flip_rate),
                fmt_g(c.mean_gold_logit),
                fmt_g(c.mean_orig_logit),
                fmt_g(c.mean_entropy_all),
                opt_g(c.mean_entropy_flipped),
            ]
        })
        .collect()
}

pub fn delta_flip_rows(cells: &[DeltaCell]) -> Vec<Vec<String>> {
    cells
        .iter()
        .map(|c| {
            vec![
                c.lang.clone(),
                c.position.to_string(),
                c.layer.to_string(),
                fmt_g(c.delta_flip_rate),
            ]
        })
        .collect()
}

pub fn entropy_rows(cells: &[EntropyCell]) -> Vec<Vec<String>> {
    cells
        .iter()
        .map(|c| {
            vec![
                c.lang.clone(),
                c.position.to_string(),
                c.layer.to_string(),
                c.n_flipped_equivalent.to_string(),
                opt_g(c.mean_entropy_equivalent),
                c.n_flipped_control.to_string(),
                opt_g(c.mean_entropy_control),
            ]
        })
        .collect()
}

/// Sweep summaries, Δ flip rates and entropy cells of one patch run.
#[derive(Debug, Clone, Default)]
pub struct PatchOutput {
    pub cells: Vec<SweepCell>,
    pub delta: Vec<DeltaCell>,
    pub entropy: Vec<EntropyCell>,
}

pub fn run_patch(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    l2: &str,
    eval: &EvalReport,
    cfg: &PatchExperimentConfig,
) -> Result<PatchOutput> {
    if eval.tf_ids.is_empty() {
        return Err(Error::EmptyTfSet);
    }
    let pool = eval.english_correct();
    let results = patch_sweep(model, tok, corpus, ENGLISH, l2, &eval.tf_ids, &pool, cfg)?;
    let cells = flip_stats(&results)?;
    let mut out = PatchOutput {
        cells,
        ..PatchOutput::default()
    };
    let has = |m| cfg.modes.contains(&m);
    if has(PatchMode::Equivalent) && has(PatchMode::Control) {
        let split = |m: PatchMode| -> Vec<_> { results.iter().filter(|r| r.mode == m).cloned().collect() };
        let (eq, ctrl) = (split(PatchMode::Equivalent), split(PatchMode::Control));
        let cells_of =
            |m: PatchMode| -> Vec<SweepCell> { out.cells.iter().filter(|c| c.mode == m).cloned().collect() };
        out.delta = delta_flip(&cells_of(PatchMode::Equivalent), &cells_of(PatchMode::Control))?;
        out.entropy = entropy_comparison(&eq, &ctrl)?;
    }
    Ok(out)
}

pub fn cmd_patch(ctx: &Context) -> Result<Vec<PathBuf>> {
    let (model, tok) = load_artifacts(ctx)?;
    let corpus = load_task_corpus(ctx)?;
    let cfg = ctx.config.patch_config();
    let mut all = PatchOutput::default();
    for l2 in ctx.l2s() {
        let eval = load_eval(ctx, l2)?;
        let out = run_patch(&model, &tok, &corpus, l2, &eval, &cfg)?;
        all.cells.extend(out.cells);
        all.delta.extend(out.delta);
        all.entropy.extend(out.entropy);
    }
    let mut written = vec![ctx.write_csv(SWEEP_CSV, &SWEEP_HEADER, &sweep_rows(&all.cells))?];
    if !all.delta.is_empty() {
        written.push(ctx.write_csv(DELTA_FLIP_CSV, &DELTA_FLIP_HEADER, &delta_flip_rows(&all.delta))?);
        written.push(ctx.write_csv(ENTROPY_CSV, &ENTROPY_HEADER, &entropy_rows(&all.entropy))?);
    }
    Ok(written)
}

/// Parse one of our CSV files into JSON rows. Cells become integers, floats,
/// booleans, `null` (empty) or strings, in that order of preference.
pub fn read_csv(path: &Path) -> Result<Vec<Map<String, Value>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let cols: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(cols
                .iter()
                .zip(rec.iter())
                .map(|(c, cell)| (c.clone(), csv_value(cell)))
                .collect())
        })
        .collect()
}

fn csv_value(cell: &str) -> Value {
    if cell.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = cell.parse::<i64>() {
        return json!(i);
    }
    if let Ok(f) = cell.parse::<f64>() {
        if f.is_finite() {
            return json!(f);
        }
    }
    match cell {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(cell.to_string()),
    }
}

/// Merge evaluation reports and every CSV into `report.json`.
pub fn cmd_report(ctx: &Context) -> Result<PathBuf> {
    let mut eval = Map::new();
    for l2 in ctx.l2s() {
        let mut v = serde_json::to_value(load_eval(ctx, l2)?)?;
        if let Value::Object(m) = &mut v {
            m.remove("meta");
        }
        eval.insert(l2.clone(), v);
    }
    let mut report = Map::new();
    report.insert("eval".into(), Value::Object(eval));
    for (key, file, required) in [
        ("alignment_profile", PROFILE_CSV, true),
        ("ts_tf_delta", DELTA_CSV, true),
        ("patch_sweep", SWEEP_CSV, true),
        ("delta_flip", DELTA_FLIP_CSV, false),
        ("entropy", ENTROPY_CSV, false),
    ] {
        let path = ctx.out.join(file);
        if !required && !path.exists() {
            continue;
        }
        let rows = read_csv(&path)?;
        report.insert(
            key.into(),
            Value::Array(rows.into_iter().map(Value::Object).collect()),
        );
    }
    let path = ctx.out.join(REPORT_FILE);
    ctx.write_json(&path, &Value::Object(report))?;
    Ok(path)
}

/// One line per written file, for the CLI.
pub fn describe(paths: &[PathBuf]) -> String {
    let mut s = String::new();
    for p in paths {
        let _ = writeln!(s, "wrote {}", p.display());
    }
    s
}
