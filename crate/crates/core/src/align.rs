//! Layer-wise last-token embeddings and the instance-level alignment metrics.
//!
//! All comparisons are strict: an exact cosine tie counts as not aligned.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_concat, ParallelCorpus, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{forward, Model};
#[cfg(test)]
use crate::numeric::cosine_similarity;
use crate::numeric::{dot_unchecked, l2_norm, Matrix};
use crate::stats::{two_prop_ztest_alpha, ProportionTest};

/// Last-token residual states of one text, one row per layer `0..=Λ`.
pub type LayerEmbeddings = Matrix;

pub fn embed_tokens(model: &Model, tokens: &[u32]) -> Result<LayerEmbeddings> {
    let trace = forward(model, tokens)?;
    let last = trace.len() - 1;
    let d = model.spec().d_model;
    let mut out = Matrix::zeros(trace.n_layers() + 1, d);
    for layer in 0..=trace.n_layers() {
        out.row_mut(layer).copy_from_slice(&trace.capture(layer, last)?);
    }
    Ok(out)
}

/// One forward pass per text, in parallel; output order follows `texts`.
pub fn embed_last_token(model: &Model, tok: &Tokenizer, texts: &[String]) -> Result<Vec<LayerEmbeddings>> {
    texts
        .par_iter()
        .map(|t| embed_tokens(model, &tok.encode_text(t)?))
        .collect()
}

/// Embeddings of every `premise [SEP] option` text of one id in both
/// languages.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePairEmbeddings {
    pub id: String,
    pub l1: Vec<LayerEmbeddings>,
    pub l2: Vec<LayerEmbeddings>,
}

impl InstancePairEmbeddings {
    fn at(&self, layer: usize) -> Result<(Vec<&[f32]>, Vec<&[f32]>)> {
        if self.l1.len() != self.l2.len() {
            return Err(Error::LengthMismatch(self.l1.len(), self.l2.len()));
        }
        Ok((rows_at(&self.l1, layer)?, rows_at(&self.l2, layer)?))
    }
}

fn rows_at(side: &[LayerEmbeddings], layer: usize) -> Result<Vec<&[f32]>> {
    side.iter()
        .map(|m| {
            if layer < m.rows() {
                Ok(m.row(layer))
            } else {
                Err(Error::IndexOutOfRange(format!("layer {layer} of {}", m.rows())))
            }
        })
        .collect()
}

/// All pairwise cosines; equal bit for bit to [`cosine_similarity`] with
/// the norms computed once per vector.
fn sims(a: &[&[f32]], b: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    let Some(width) = a.first().or(b.first()).map(|x| x.len()) else {
        return Ok(vec![Vec::new(); a.len()]);
    };
    let norms = |side: &[&[f32]]| -> Result<Vec<f32>> {
        side.iter()
            .map(|x| {
                if x.len() != width {
                    return Err(Error::DimensionMismatch {
                        expected: width,
                        got: x.len(),
                    });
                }
                match l2_norm(x) {
                    0.0 => Err(Error::ZeroNormVector),
                    n => Ok(n),
                }
            })
            .collect()
    };
    let (na, nb) = (norms(a)?, norms(b)?);
    a.iter()
        .zip(&na)
        .map(|(x, &nx)| {
            b.iter()
                .zip(&nb)
                .map(|(y, &ny)| {
                    let c = dot_unchecked(x, y) / (nx * ny);
                    if c.is_finite() {
                        Ok(c.clamp(-1.0, 1.0))
                    } else {
                        Err(Error::NonFinite("cosine_similarity"))
                    }
                })
                .collect()
        })
        .collect()
}

fn check_pair(e: &[&[f32]], f: &[&[f32]]) -> Result<()> {
    if e.len() != f.len() {
        return Err(Error::LengthMismatch(e.len(), f.len()));
    }
    if e.len() < 2 {
        return Err(Error::IndexOutOfRange(format!(
            "{} options; need at least two",
            e.len()
        )));
    }
    Ok(())
}

/// L1-anchored: `S(e_i, f_i) > S(e_i, f_j)` for all `i != j`.
pub fn dali_vectors(e: &[&[f32]], f: &[&[f32]]) -> Result<bool> {
    check_pair(e, f)?;
    let s = sims(e, f)?;
    Ok((0..e.len()).all(|i| (0..e.len()).all(|j| i == j || s[i][i] > s[i][j])))
}

/// [`dali_vectors`] plus `S(e_i, f_i)` above every within-language
/// mismatched similarity, in both languages.
pub fn dali_strict_vectors(e: &[&[f32]], f: &[&[f32]]) -> Result<bool> {
    if !dali_vectors(e, f)? {
        return Ok(false);
    }
    let s = sims(e, f)?;
    let ee = sims(e, e)?;
    let ff = sims(f, f)?;
    let n = e.len();
    let worst_within = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| ee[i][j].max(ff[i][j]))
        .fold(f32::NEG_INFINITY, f32::max);
    Ok((0..n).all(|i| s[i][i] > worst_within))
}

/// Both directions: matched pairs beat `S(e_i, f_j)` and `S(e_j, f_i)`.
pub fn dali_symmetric_vectors(e: &[&[f32]], f: &[&[f32]]) -> Result<bool> {
    check_pair(e, f)?;
    let s = sims(e, f)?;
    let n = e.len();
    Ok((0..n).all(|i| (0..n).all(|j| i == j || (s[i][i] > s[i][j] && s[i][i] > s[j][i]))))
}

/// Per sample: `S(u_i, v_i)` beats every `S(u_i, v_j)` and `S(u_j, v_i)`,
/// `j != i`. A single sample has no competitors and is aligned.
pub fn mexa_flags(u: &[&[f32]], v: &[&[f32]]) -> Result<Vec<bool>> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    let s = sims(u, v)?;
    let n = u.len();
    Ok((0..n)
        .map(|i| (0..n).all(|j| j == i || (s[i][i] > s[i][j] && s[i][i] > s[j][i])))
        .collect())
}

pub fn dali(pair: &InstancePairEmbeddings, layer: usize) -> Result<bool> {
    let (e, f) = pair.at(layer)?;
    dali_vectors(&e, &f)
}

pub fn dali_strict(pair: &InstancePairEmbeddings, layer: usize) -> Result<bool> {
    let (e, f) = pair.at(layer)?;
    dali_strict_vectors(&e, &f)
}

pub fn dali_symmetric(pair: &InstancePairEmbeddings, layer: usize) -> Result<bool> {
    let (e, f) = pair.at(layer)?;
    dali_symmetric_vectors(&e, &f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Dali,
    DaliSt,
    /// Two-sided variant of DALI; not part of the default metric set.
    DaliSym,
    MexaT,
    MexaF,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Dali,
        Metric::DaliSt,
        Metric::DaliSym,
        Metric::MexaT,
        Metric::MexaF,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Dali => "dali",
            Metric::DaliSt => "dali-st",
            Metric::DaliSym => "dali-sym",
            Metric::MexaT => "mexa-t",
            Metric::MexaF => "mexa-f",
        }
    }

    /// Whether bits are defined per task instance (and so split by TS/TF).
    pub fn per_instance(self) -> bool {
        !matches!(self, Metric::MexaF)
    }

    fn is_dali(self) -> bool {
        matches!(self, Metric::Dali | Metric::DaliSt | Metric::DaliSym)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// Per-instance, per-layer alignment bits for one metric and language pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentBits {
    pub metric: Metric,
    pub lang: String,
    pub ids: Vec<String>,
    /// `bits[i][layer]`
    pub bits: Vec<Vec<bool>>,
}

impl AlignmentBits {
    /// Restrict to `ids`, keeping their order.
    pub fn select(&self, ids: &[String]) -> Result<AlignmentBits> {
        let index: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let bits = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.bits[i].clone())
                    .ok_or_else(|| Error::IndexOutOfRange(format!("id `{id}` not in the bit matrix")))
            })
            .collect::<Result<_>>()?;
        Ok(AlignmentBits {
            metric: self.metric,
            lang: self.lang.clone(),
            ids: ids.to_vec(),
            bits,
        })
    }
}

/// Fraction aligned per layer over one group of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentProfile {
    pub metric: Metric,
    pub lang: String,
    pub group: String,
    pub n: usize,
    /// Aligned count per layer.
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    /// Earliest layer with the maximum fraction.
    pub lambda_max: usize,
    pub bits: AlignmentBits,
}

/// Earliest index of the maximum.
pub fn earliest_argmax(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl AlignmentProfile {
    pub fn from_bits(bits: AlignmentBits, group: &str) -> Result<Self> {
        let n = bits.ids.len();
        if n == 0 {
            return Err(Error::EmptySubset);
        }
        let layers = bits.bits[0].len();
        let counts: Vec<usize> = (0..layers)
            .map(|l| bits.bits.iter().filter(|row| row[l]).count())
            .collect();
        let fractions = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self {
            metric: bits.metric,
            lang: bits.lang.clone(),
            group: group.to_string(),
            n,
            lambda_max: earliest_argmax(&counts),
            counts,
            fractions,
            bits,
        })
    }
}

/// Embeddings for every `premise [SEP] option` text of `ids` in both languages.
pub fn instance_pair_embeddings(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    l1: &str,
    l2: &str,
    ids: &[String],
) -> Result<Vec<InstancePairEmbeddings>> {
    ids.par_iter()
        .map(|id| {
            let side = |lang: &str| -> Result<Vec<LayerEmbeddings>> {
                let inst = corpus.get(lang, id)?;
                (0..inst.n_opt())
                    .map(|i| embed_tokens(model, &tok.encode_text(&render_concat(inst, i)?)?))
                    .collect()
            };
            Ok(InstancePairEmbeddings {
                id: id.clone(),
                l1: side(l1)?,
                l2: side(l2)?,
            })
        })
        .collect()
}

/// Bits of `metric` for `ids`. For the MEXA metrics the premises of `ids`
/// form the competitor pool.
pub fn alignment_bits(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    l1: &str,
    l2: &str,
    metric: Metric,
    ids: &[String],
) -> Result<AlignmentBits> {
    if ids.is_empty() {
        return Err(Error::EmptySubset);
    }
    let n_layers = model.spec().n_layers;
    let bits = if metric.is_dali() {
        let pairs = instance_pair_embeddings(model, tok, corpus, l1, l2, ids)?;
        let bit = match metric {
            Metric::Dali => dali,
            Metric::DaliSt => dali_strict,
            _ => dali_symmetric,
        };
        pairs
            .par_iter()
            .map(|p| (0..=n_layers).map(|l| bit(p, l)).collect())
            .collect::<Result<Vec<Vec<bool>>>>()?
    } else {
        let premises = |lang: &str| -> Result<Vec<String>> {
            ids.iter()
                .map(|id| corpus.get(lang, id).map(|i| i.full_premise()))
                .collect()
        };
        let u = embed_last_token(model, tok, &premises(l1)?)?;
        let v = embed_last_token(model, tok, &premises(l2)?)?;
        let per_layer = (0..=n_layers)
            .into_par_iter()
            .map(|l| {
                let ul: Vec<&[f32]> = u.iter().map(|m| m.row(l)).collect();
                let vl: Vec<&[f32]> = v.iter().map(|m| m.row(l)).collect();
                mexa_flags(&ul, &vl)
            })
            .collect::<Result<Vec<Vec<bool>>>>()?;
        (0..ids.len())
            .map(|i| per_layer.iter().map(|flags| flags[i]).collect())
            .collect()
    };
    Ok(AlignmentBits {
        metric,
        lang: l2.to_string(),
        ids: ids.to_vec(),
        bits,
    })
}

pub fn alignment_profile(
    model: &Model,
    tok: &Tokenizer,
    corpus: &ParallelCorpus,
    l1: &str,
    l2: &str,
    metric: Metric,
    subset: &[String],
    group: &str,
) -> Result<AlignmentProfile> {
    AlignmentProfile::from_bits(alignment_bits(model, tok, corpus, l1, l2, metric, subset)?, group)
}

/// TS-minus-TF difference at the pooled λ_max with a one-sided z-test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsTfDelta {
    pub metric: Metric,
    pub lang: String,
    pub lambda_max: usize,
    pub n_ts: usize,
    pub n_tf: usize,
    pub frac_ts: f64,
    pub frac_tf: f64,
    pub delta: f64,
    pub test: ProportionTest,
}

pub fn ts_tf_delta(ts: &AlignmentProfile, tf: &AlignmentProfile, alpha: f64) -> Result<TsTfDelta> {
    if ts.n == 0 {
        return Err(Error::EmptyGroup("TS"));
    }
    if tf.n == 0 {
        return Err(Error::EmptyGroup("TF"));
    }
    if ts.counts.len() != tf.counts.len() {
        return Err(Error::LengthMismatch(ts.counts.len(), tf.counts.len()));
    }
    let pooled: Vec<usize> = ts.counts.iter().zip(&tf.counts).map(|(a, b)| a + b).collect();
    let lambda_max = earliest_argmax(&pooled);
    let (x1, x2) = (ts.counts[lambda_max], tf.counts[lambda_max]);
    let test = two_prop_ztest_alpha(x1 as u64, ts.n as u64, x2 as u64, tf.n as u64, alpha)?;
    Ok(TsTfDelta {
        metric: ts.metric,
        lang: ts.lang.clone(),
        lambda_max,
        n_ts: ts.n,
        n_tf: tf.n,
        frac_ts: test.p1(),
        frac_tf: test.p2(),
        delta: test.p1() - test.p2(),
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn orthonormal_examples() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let f = e.clone();
        assert!(dali_vectors(&refs(&e), &refs(&f)).unwrap());
        assert!(dali_strict_vectors(&refs(&e), &refs(&f)).unwrap());
        let swapped = vec![f[1].clone(), f[0].clone()];
        assert!(!dali_vectors(&refs(&e), &refs(&swapped)).unwrap());
        assert!(matches!(
            dali_vectors(&refs(&e[..1]), &refs(&f[..1])),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(matches!(
            dali_vectors(&refs(&e), &refs(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_ties_are_not_aligned() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(!dali_vectors(&refs(&e), &refs(&e)).unwrap());
        assert_eq!(mexa_flags(&refs(&e), &refs(&e)).unwrap(), vec![false, false]);
    }

    #[test]
    fn mexa_examples() {
        let u = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(mexa_flags(&refs(&u), &refs(&u)).unwrap(), vec![true; 3]);
        assert_eq!(mexa_flags(&refs(&u[..1]), &refs(&u[1..2])).unwrap(), vec![true]);
        assert!(matches!(
            mexa_flags(&refs(&u[..2]), &refs(&u)),
            Err(Error::LengthMismatch(2, 3))
        ));
    }

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect()
    }

    /// Brute force over every inequality the definition lists.
    fn dali_oracle(e: &[Vec<f32>], f: &[Vec<f32>], strict: bool) -> bool {
        let s = |a: &[f32], b: &[f32]| cosine_similarity(a, b).unwrap();
        let n = e.len();
        let mut ok = true;
        for i in 0..n {
            for j in 0..n {
                if i != j && s(&e[i], &f[i]) <= s(&e[i], &f[j]) {
                    ok = false;
                }
            }
        }
        if strict {
            for m in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        if i != j
                            && (s(&e[m], &f[m]) <= s(&e[i], &e[j]) || s(&e[m], &f[m]) <= s(&f[i], &f[j]))
                        {
                            ok = false;
                        }
                    }
                }
            }
        }
        ok
    }

    fn mexa_oracle(u: &[Vec<f32>], v: &[Vec<f32>]) -> Vec<bool> {
        let s = |a: &[f32], b: &[f32]| cosine_similarity(a, b).unwrap();
        (0..u.len())
            .map(|i| {
                let mut competitors = Vec::new();
                for j in 0..u.len() {
                    if j != i {
                        competitors.push(s(&u[i], &v[j]));
                        competitors.push(s(&u[j], &v[i]));
                    }
                }
                let m = competitors.into_iter().fold(f32::NEG_INFINITY, f32::max);
                s(&u[i], &v[i]) > m
            })
            .collect()
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(2..=4);
            let d = rng.random_range(4..=32);
            let e = random_vecs(&mut rng, n, d);
            // correlated second language so both outcomes occur
            let f: Vec<Vec<f32>> = e
                .iter()
                .map(|x| x.iter().map(|a| a + rng.random_range(-0.8f32..0.8)).collect())
                .collect();
            assert_eq!(
                dali_vectors(&refs(&e), &refs(&f)).unwrap(),
                dali_oracle(&e, &f, false)
            );
            assert_eq!(
                dali_strict_vectors(&refs(&e), &refs(&f)).unwrap(),
                dali_oracle(&e, &f, true)
            );

            let n = rng.random_range(1..=16);
            let u = random_vecs(&mut rng, n, d);
            let v: Vec<Vec<f32>> = u
                .iter()
                .map(|x| x.iter().map(|a| a + rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            assert_eq!(mexa_flags(&refs(&u), &refs(&v)).unwrap(), mexa_oracle(&u, &v));
        }
    }

    proptest! {
        #[test]
        fn strict_implies_plain(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=4);
            let e = random_vecs(&mut rng, n, 6);
            let f = random_vecs(&mut rng, n, 6);
            let strict = dali_strict_vectors(&refs(&e), &refs(&f)).unwrap();
            let plain = dali_vectors(&refs(&e), &refs(&f)).unwrap();
            let sym = dali_symmetric_vectors(&refs(&e), &refs(&f)).unwrap();
            prop_assert!(!strict || plain);
            prop_assert!(!sym || plain);
        }

        #[test]
        fn positive_rescaling_is_invisible(seed in 0u64..5000, k in 0usize..4, c in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_vecs(&mut rng, 4, 8);
            let f = random_vecs(&mut rng, 4, 8);
            let mut g = f.clone();
            g[k].iter_mut().for_each(|x| *x *= c);
            // rescaling can move a cosine by an ulp; compare only clear cases
            let margin = |a: &[Vec<f32>], b: &[Vec<f32>]| {
                let s = sims(&refs(a), &refs(b)).unwrap();
                let mut m = f32::INFINITY;
                for i in 0..4 { for j in 0..4 { if i != j { m = m.min((s[i][i] - s[i][j]).abs()); } } }
                m
            };
            prop_assume!(margin(&e, &f) > 1e-4);
            prop_assert_eq!(dali_vectors(&refs(&e), &refs(&f)).unwrap(), dali_vectors(&refs(&e), &refs(&g)).unwrap());
        }

        #[test]
        fn mexa_flags_travel_with_samples(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_vecs(&mut rng, 6, 5);
            let v: Vec<Vec<f32>> = u.iter().map(|x| x.iter().map(|a| a + rng.random_range(-0.7f32..0.7)).collect()).collect();
            let flags = mexa_flags(&refs(&u), &refs(&v)).unwrap();
            let perm = [3usize, 0, 5, 1, 4, 2];
            let pu: Vec<Vec<f32>> = perm.iter().map(|&i| u[i].clone()).collect();
            let pv: Vec<Vec<f32>> = perm.iter().map(|&i| v[i].clone()).collect();
            let pf = mexa_flags(&refs(&pu), &refs(&pv)).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(pf[k], flags[i]);
            }
        }
    }

    #[test]
    fn iid_gaussian_mexa_is_near_chance() {
        use rand_distr::{Distribution, StandardNormal};
        let (n, d, seeds) = (8, 16, 200);
        let mut total = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || -> Vec<Vec<f32>> {
                (0..n)
                    .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect()
            };
            let (u, v) = (draw(), draw());
            let flags = mexa_flags(&refs(&u), &refs(&v)).unwrap();
            total += flags.iter().filter(|&&b| b).count() as f64 / n as f64;
        }
        let mean = total / seeds as f64;
        assert!((mean - 1.0 / 15.0).abs() <= 0.02, "{mean}");
    }

    fn bits(metric: Metric, rows: Vec<Vec<bool>>) -> AlignmentBits {
        AlignmentBits {
            metric,
            lang: "fra".into(),
            ids: (0..rows.len()).map(|i| format!("i-{i:06}")).collect(),
            bits: rows,
        }
    }

    #[test]
    fn profile_and_lambda_max() {
        let p = AlignmentProfile::from_bits(
            bits(
                Metric::Dali,
                vec![vec![false, true, true], vec![false, true, false]],
            ),
            "all",
        )
        .unwrap();
        assert_eq!(p.fractions, vec![0.0, 1.0, 0.5]);
        assert_eq!(p.lambda_max, 1);
        assert_eq!(earliest_argmax(&[2, 5, 5, 1]), 1);
        assert!(matches!(
            AlignmentProfile::from_bits(bits(Metric::Dali, vec![]), "x"),
            Err(Error::EmptySubset)
        ));
    }

    #[test]
    fn pooled_profile_is_the_weighted_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<bool>> = (0..50)
            .map(|_| (0..7).map(|_| rng.random_bool(0.4)).collect())
            .collect();
        let all = bits(Metric::Dali, rows);
        let (a, b) = (all.ids[..20].to_vec(), all.ids[20..].to_vec());
        let pa = AlignmentProfile::from_bits(all.select(&a).unwrap(), "TS").unwrap();
        let pb = AlignmentProfile::from_bits(all.select(&b).unwrap(), "TF").unwrap();
        let pooled = AlignmentProfile::from_bits(all, "all").unwrap();
        for l in 0..7 {
            let mix = (20.0 * pa.fractions[l] + 30.0 * pb.fractions[l]) / 50.0;
            assert!((pooled.fractions[l] - mix).abs() < 1e-12);
            let (lo, hi) = (
                pa.fractions[l].min(pb.fractions[l]),
                pa.fractions[l].max(pb.fractions[l]),
            );
            assert!(lo <= pooled.fractions[l] && pooled.fractions[l] <= hi);
        }
    }

    #[test]
    fn delta_examples() {
        let same =
            AlignmentProfile::from_bits(bits(Metric::Dali, vec![vec![true, false]; 10]), "TS").unwrap();
        let d = ts_tf_delta(&same, &same, 0.05).unwrap();
        assert_eq!((d.delta, d.test.p), (0.0, 0.5));

        let ts = AlignmentProfile::from_bits(bits(Metric::Dali, vec![vec![false, true]; 200]), "TS").unwrap();
        let tf =
            AlignmentProfile::from_bits(bits(Metric::Dali, vec![vec![false, false]; 200]), "TF").unwrap();
        let d = ts_tf_delta(&ts, &tf, 0.05).unwrap();
        assert_eq!(d.lambda_max, 1);
        assert_eq!(d.delta, 1.0);
        assert!(d.test.p < 1e-10 && d.test.significant);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("cka".parse::<Metric>().is_err());
    }
}
