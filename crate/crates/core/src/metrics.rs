//! Multi-reference evaluation: corpus BLEU, translation edit rate with
//! greedy shifts, embedding-based greedy matching, model perplexity over a
//! test corpus, bootstrap variance of any metric, and a paired
//! approximate-randomization significance test.
//!
//! Corpus scores are exact under reordering of the instance list: integer
//! count accumulation for BLEU and TER, and a sorted reduction for the
//! embedding score.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{Vocab, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{LossStats, Seq2Seq};
use crate::tensor::{Rng, Scalar};

/// One evaluation item: a source, the system output for it, and one or more
/// reference paraphrases, all whitespace-tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub source: Vec<String>,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalInstance {
    pub fn from_text(source: &str, candidate: &str, references: &[&str]) -> EvalInstance {
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        EvalInstance {
            source: words(source),
            candidate: words(candidate),
            references: references.iter().map(|r| words(r)).collect(),
        }
    }
}

fn check_instances(instances: &[EvalInstance]) -> Result<()> {
    if instances.is_empty() {
        return Err(Error::Argument("metric needs at least one instance".into()));
    }
    if let Some(i) = instances.iter().position(|x| x.references.is_empty()) {
        return Err(Error::Argument(format!("instance {i} has no references")));
    }
    Ok(())
}

/// Word vectors for the embedding metric; lookups are case-sensitive.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl EmbeddingTable {
    /// Text format: one `word v1 .. vd` per line; an optional first line of
    /// exactly two integers (`count dim`) is treated as a header. Later
    /// duplicates of a word overwrite earlier ones.
    pub fn from_text(text: &str) -> Result<EmbeddingTable> {
        let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
        let mut dim = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if lineno == 0
                && fields.len() == 2
                && fields[0].parse::<usize>().is_ok()
                && fields[1].parse::<usize>().is_ok()
            {
                continue;
            }
            if fields.len() < 2 {
                return Err(Error::Data(format!(
                    "embedding line {} has no vector components",
                    lineno + 1
                )));
            }
            let vec: Vec<f64> = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::Data(format!("bad embedding value '{f}' on line {}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if dim == 0 {
                dim = vec.len();
            } else if vec.len() != dim {
                return Err(Error::Data(format!(
                    "embedding line {} has {} components, expected {dim}",
                    lineno + 1,
                    vec.len()
                )));
            }
            vectors.insert(fields[0].to_string(), vec);
        }
        Ok(EmbeddingTable { vectors, dim })
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_pairs(pairs: Vec<(&str, Vec<f64>)>) -> Result<EmbeddingTable> {
        let mut vectors = HashMap::new();
        let mut dim = 0usize;
        for (w, v) in pairs {
            if dim == 0 {
                dim = v.len();
            } else if v.len() != dim {
                return Err(Error::Data(format!("vector for '{w}' has {} components, expected {dim}", v.len())));
            }
            vectors.insert(w.to_string(), v);
        }
        Ok(EmbeddingTable { vectors, dim })
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(|v| v.as_slice())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }
}

/// Corpus-level clipped n-gram counts: (matched, total) candidate n-grams,
/// where each distinct n-gram matches at most as many times as its highest
/// count in any single reference.
pub fn clipped_counts(candidate: &[String], references: &[Vec<String>], n: usize) -> (u64, u64) {
    if n == 0 || candidate.len() < n {
        return (0, 0);
    }
    let total = (candidate.len() - n + 1) as u64;
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    for w in candidate.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut matched = 0u64;
    for (gram, cnt) in counts {
        let cap = references
            .iter()
            .map(|r| r.windows(n).filter(|w| *w == gram).count() as u64)
            .max()
            .unwrap_or(0);
        matched += cnt.min(cap);
    }
    (matched, total)
}

/// Reference length closest to the candidate's, ties going to the shorter.
fn closest_ref_len(cand_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(cand_len), l))
        .expect("instances are validated to have references")
}

/// Corpus BLEU on a 0..100 scale: geometric mean of clipped n-gram
/// precisions up to `max_n`, scaled by the brevity penalty against the sum
/// of closest reference lengths. Unsmoothed, any empty precision gives 0;
/// with `smooth` on, orders above 1 get add-one smoothing (a diagnostic
/// mode, not for reported scores).
pub fn bleu(instances: &[EvalInstance], max_n: usize, smooth: bool) -> Result<f64> {
    check_instances(instances)?;
    if max_n == 0 {
        return Err(Error::Argument("BLEU needs at least unigrams".into()));
    }
    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for inst in instances {
        cand_len += inst.candidate.len() as u64;
        ref_len += closest_ref_len(inst.candidate.len(), &inst.references) as u64;
        for n in 1..=max_n {
            let (m, t) = clipped_counts(&inst.candidate, &inst.references, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 0..max_n {
        let (m, t) = if smooth && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let brevity = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_sum / max_n as f64).exp())
}

/// Plain word-level edit distance (substitution, insertion, deletion all
/// cost 1), two-row dynamic program.
fn lev_words(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const MAX_SHIFT_LEN: usize = 10;

fn apply_shift(seq: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(seq.len());
    rest.extend_from_slice(&seq[..start]);
    rest.extend_from_slice(&seq[start + len..]);
    let mut out = Vec::with_capacity(seq.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&seq[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Edits transforming `candidate` into `reference`: greedy block shifts
/// (each costing one edit) while a shift strictly lowers the total, then
/// word edit distance. Shift candidates are scanned in a fixed order (start,
/// then length capped at 10, then destination), keeping the first best, so
/// the result is deterministic.
fn ter_edits(candidate: &[String], reference: &[String]) -> usize {
    let mut cur: Vec<String> = candidate.to_vec();
    let mut cur_lev = lev_words(&cur, reference);
    let mut shifts = 0usize;
    while cur_lev > 1 {
        let n = cur.len();
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for start in 0..n {
            for len in 1..=MAX_SHIFT_LEN.min(n - start) {
                for dest in 0..=(n - len) {
                    if dest == start {
                        continue;
                    }
                    let moved = apply_shift(&cur, start, len, dest);
                    let lev = lev_words(&moved, reference);
                    if best.map_or(lev + 1 < cur_lev, |(b, ..)| lev < b) {
                        best = Some((lev, start, len, dest));
                    }
                }
            }
        }
        match best {
            Some((lev, start, len, dest)) => {
                cur = apply_shift(&cur, start, len, dest);
                cur_lev = lev;
                shifts += 1;
            }
            None => break,
        }
    }
    shifts + cur_lev
}

/// Corpus TER plus how many instances were skipped for having only empty
/// references.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerScore {
    pub score: f64,
    pub skipped: usize,
}

/// Translation edit rate: per instance the reference minimizing
/// edits / reference length, accumulated as total edits over total chosen
/// reference length.
pub fn ter(instances: &[EvalInstance]) -> Result<TerScore> {
    check_instances(instances)?;
    let mut total_edits = 0u64;
    let mut total_len = 0u64;
    let mut skipped = 0usize;
    for inst in instances {
        let mut best: Option<(f64, usize, usize)> = None;
        for r in &inst.references {
            if r.is_empty() {
                continue;
            }
            let edits = ter_edits(&inst.candidate, r);
            let rate = edits as f64 / r.len() as f64;
            if best.map_or(true, |(b, ..)| rate < b) {
                best = Some((rate, edits, r.len()));
            }
        }
        match best {
            Some((_, edits, len)) => {
                total_edits += edits as u64;
                total_len += len as u64;
            }
            None => skipped += 1,
        }
    }
    if total_len == 0 {
        return Err(Error::Data("every instance had only empty references".into()));
    }
    Ok(TerScore {
        score: total_edits as f64 / total_len as f64,
        skipped,
    })
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Greedy embedding score with skip accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbScore {
    pub score: f64,
    pub skipped_instances: usize,
    pub skipped_tokens: usize,
}

/// Mean over one side's covered tokens of the best cosine match on the
/// other side; None when the side has no covered tokens.
fn directional(from: &[&[f64]], to: &[&[f64]]) -> Option<f64> {
    if from.is_empty() || to.is_empty() {
        return None;
    }
    let sum: f64 = from
        .iter()
        .map(|u| to.iter().map(|v| cosine(u, v)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Some(sum / from.len() as f64)
}

/// Embedding greedy matching: per reference, average the two directional
/// mean-of-max cosine scores; per instance take the best reference; corpus
/// score is the mean over scored instances. Tokens without vectors are
/// skipped and counted; an instance with no usable reference pairing is
/// skipped and counted.
pub fn emb_greedy(instances: &[EvalInstance], table: &EmbeddingTable) -> Result<EmbScore> {
    check_instances(instances)?;
    if table.is_empty() {
        return Err(Error::Argument("embedding table is empty".into()));
    }
    let mut scores: Vec<f64> = Vec::with_capacity(instances.len());
    let mut skipped_instances = 0usize;
    let mut skipped_tokens = 0usize;
    for inst in instances {
        let mut cover = |tokens: &[String]| -> Vec<&[f64]> {
            let mut out = Vec::with_capacity(tokens.len());
            for t in tokens {
                match table.get(t) {
                    Some(v) => out.push(v),
                    None => skipped_tokens += 1,
                }
            }
            out
        };
        let cand = cover(&inst.candidate);
        let refs: Vec<Vec<&[f64]>> = inst.references.iter().map(|r| cover(r)).collect();
        let mut best: Option<f64> = None;
        for r in &refs {
            if let (Some(fwd), Some(bwd)) = (directional(&cand, r), directional(r, &cand)) {
                let s = 0.5 * (fwd + bwd);
                if best.map_or(true, |b| s > b) {
                    best = Some(s);
                }
            }
        }
        match best {
            Some(s) => scores.push(s),
            None => skipped_instances += 1,
        }
    }
    if scores.is_empty() {
        return Err(Error::Data("no instance had embeddings on both sides".into()));
    }
    // Sorted reduction: the corpus mean is identical under any input order.
    scores.sort_by(f64::total_cmp);
    let score = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(EmbScore {
        score,
        skipped_instances,
        skipped_tokens,
    })
}

/// Variance of a metric over with-replacement resamples of the item list.
pub fn bootstrap_variance<T: Clone>(
    items: &[T],
    metric: impl Fn(&[T]) -> Result<f64>,
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    if items.len() < 2 {
        return Err(Error::Argument("bootstrap needs at least two instances".into()));
    }
    if resamples == 0 {
        return Err(Error::Argument("bootstrap needs at least one resample".into()));
    }
    let mut rng = Rng::new(seed);
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let sample: Vec<T> = (0..items.len()).map(|_| items[rng.gen_range(items.len())].clone()).collect();
        values.push(metric(&sample)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64)
}

/// Paired approximate randomization: candidates swap sides per instance and
/// the metric gap is recomputed. With few instances (2^n assignments within
/// the iteration budget) every assignment is enumerated and the p-value is
/// the exact fraction at least as extreme as observed, the identity
/// included; otherwise `iterations` random assignments are drawn and the
/// add-one estimate (count + 1) / (iterations + 1) is returned.
pub fn ar_test(
    a: &[EvalInstance],
    b: &[EvalInstance],
    metric: impl Fn(&[EvalInstance]) -> Result<f64>,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "randomization test needs aligned systems, got {} and {} instances",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("randomization test needs at least one instance".into()));
    }
    if iterations == 0 {
        return Err(Error::Argument("randomization test needs at least one iteration".into()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.source != y.source || x.references != y.references {
            return Err(Error::Argument(format!(
                "instance {i} differs between systems in source or references"
            )));
        }
    }
    let n = a.len();
    let observed = (metric(a)? - metric(b)?).abs();

    let delta_for = |swap: &dyn Fn(usize) -> bool| -> Result<f64> {
        let mut pa = Vec::with_capacity(n);
        let mut pb = Vec::with_capacity(n);
        for i in 0..n {
            if swap(i) {
                pa.push(b[i].clone());
                pb.push(a[i].clone());
            } else {
                pa.push(a[i].clone());
                pb.push(b[i].clone());
            }
        }
        Ok((metric(&pa)? - metric(&pb)?).abs())
    };

    if n < 63 && (1u64 << n) <= iterations as u64 {
        let mut hits = 0u64;
        for mask in 0u64..(1u64 << n) {
            if delta_for(&|i| mask >> i & 1 == 1)? >= observed {
                hits += 1;
            }
        }
        Ok(hits as f64 / (1u64 << n) as f64)
    } else {
        let mut rng = Rng::new(seed);
        let mut hits = 0u64;
        for _ in 0..iterations {
            let flips: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
            if delta_for(&|i| flips[i])? >= observed {
                hits += 1;
            }
        }
        Ok((hits + 1) as f64 / (iterations + 1) as f64)
    }
}

/// Perplexity of the references under the model, teacher-forced from each
/// instance's source; every reference of every instance contributes its
/// tokens (end marker included) to the mean.
pub fn corpus_perplexity<F: Scalar>(
    model: &Seq2Seq<F>,
    vocab: &Vocab,
    instances: &[EvalInstance],
) -> Result<f64> {
    check_instances(instances)?;
    if vocab.size() != model.cfg.vocab_size {
        return Err(Error::Argument(format!(
            "model was built for a vocabulary of {}, this one has {}",
            model.cfg.vocab_size,
            vocab.size()
        )));
    }
    let ids = |tokens: &[String]| -> Vec<usize> { tokens.iter().map(|t| vocab.id(t)).collect() };
    let mut stats = LossStats::zero();
    for inst in instances {
        let src = ids(&inst.source);
        for r in &inst.references {
            let tgt = ids(r);
            let mut dec_in = vec![EOS_ID];
            dec_in.extend_from_slice(&tgt);
            let mut targets = tgt.clone();
            targets.push(EOS_ID);
            let mask = vec![true; dec_in.len()];
            stats.add(model.sequence_loss(&src, &dec_in, &targets, &mask)?);
        }
    }
    Ok(stats.perplexity())
}

/// Everything the evaluate command can produce, with skip accounting.
/// The embedding score is stored raw in [-1, 1] and rendered times 100.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub bleu: Option<f64>,
    pub ter: Option<TerScore>,
    pub emb: Option<EmbScore>,
    pub perplexity: Option<f64>,
    pub variances: Vec<(String, f64)>,
    pub p_values: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn check_finite(&self) -> Result<()> {
        let mut all: Vec<(String, f64)> = self.kv_pairs();
        all.retain(|(_, v)| !v.is_finite());
        if let Some((k, v)) = all.first() {
            return Err(Error::Numeric(format!("metric {k} is not finite: {v}")));
        }
        Ok(())
    }

    fn kv_pairs(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if let Some(b) = self.bleu {
            out.push(("bleu".to_string(), b));
        }
        if let Some(t) = self.ter {
            out.push(("ter".to_string(), t.score));
            out.push(("ter_skipped".to_string(), t.skipped as f64));
        }
        if let Some(e) = self.emb {
            out.push(("emb_greedy".to_string(), e.score * 100.0));
            out.push(("emb_skipped_instances".to_string(), e.skipped_instances as f64));
            out.push(("emb_skipped_tokens".to_string(), e.skipped_tokens as f64));
        }
        if let Some(p) = self.perplexity {
            out.push(("perplexity".to_string(), p));
        }
        for (k, v) in &self.variances {
            out.push((format!("variance_{k}"), *v));
        }
        for (k, v) in &self.p_values {
            out.push((format!("p_{k}"), *v));
        }
        out
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        self.kv_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v:.6}\n"))
            .collect()
    }

    /// Human-readable two-column table.
    pub fn to_table(&self) -> String {
        let pairs = self.kv_pairs();
        let width = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>10.4}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DimFix, ModelConfig};
    use crate::oracle;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn inst(source: &str, candidate: &str, refs: &[&str]) -> EvalInstance {
        EvalInstance::from_text(source, candidate, refs)
    }

    #[test]
    fn identical_corpus_scores_bleu_100() {
        let instances = vec![
            inst("s", "the cat sat on the mat", &["the cat sat on the mat"]),
            inst("s", "a quick brown fox", &["a quick brown fox"]),
        ];
        assert_eq!(bleu(&instances, 4, false).unwrap(), 100.0);
    }

    #[test]
    fn clipped_unigram_precision_of_repeated_word() {
        let i = inst("s", "the the the the the the the", &["the cat is on the mat"]);
        assert_eq!(clipped_counts(&i.candidate, &i.references, 1), (2, 7));
        // One-gram BLEU on this single instance: precision 2/7, no brevity
        // penalty (candidate longer than the reference).
        let b = bleu(&[i], 1, false).unwrap();
        assert!((b - 100.0 * 2.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_corpus_scores_zero() {
        let i = inst("s", "x y z", &["a b c"]);
        assert_eq!(bleu(&[i], 4, false).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference_preferring_shorter() {
        // Candidate of 4 with references of 3 and 5: both are one away, the
        // tie goes to 3, and a candidate longer than r takes no penalty.
        let i = inst("s", "a b c d", &["a b c", "a b c d e"]);
        assert_eq!(bleu(&[i], 2, false).unwrap(), 100.0);

        // Short candidate: r = 4, c = 2, penalty exp(1 - 4/2).
        let j = inst("s", "a b", &["a b c d"]);
        let b = bleu(&[j], 2, false).unwrap();
        assert!((b - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn smoothing_only_rescues_higher_orders() {
        // No bigram matches: unsmoothed 0, smoothed positive but small.
        let i = inst("s", "a c b", &["a b c"]);
        assert_eq!(bleu(&[i.clone()], 2, false).unwrap(), 0.0);
        let s = bleu(&[i], 2, true).unwrap();
        assert!(s > 0.0 && s < 100.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn clipped_counts_match_the_hand_counter(
            cand in prop::collection::vec(0u8..4, 0..8),
            r1 in prop::collection::vec(0u8..4, 0..8),
            r2 in prop::collection::vec(0u8..4, 0..8),
            n in 1usize..4
        ) {
            let w = |v: &[u8]| v.iter().map(|c| format!("w{c}")).collect::<Vec<_>>();
            let (cand, refs) = (w(&cand), vec![w(&r1), w(&r2)]);
            let got = clipped_counts(&cand, &refs, n);
            let want = oracle::ngram_clipped_counts(&cand, &refs, n);
            prop_assert_eq!(got, (want.0 as u64, want.1 as u64));
        }

        #[test]
        fn adding_a_reference_never_lowers_clipped_matches(
            cand in prop::collection::vec(0u8..3, 1..7),
            r1 in prop::collection::vec(0u8..3, 1..7),
            r2 in prop::collection::vec(0u8..3, 1..7),
            n in 1usize..3
        ) {
            let w = |v: &[u8]| v.iter().map(|c| format!("w{c}")).collect::<Vec<_>>();
            let cand = w(&cand);
            let one = clipped_counts(&cand, &[w(&r1)], n);
            let two = clipped_counts(&cand, &[w(&r1), w(&r2)], n);
            prop_assert!(two.0 >= one.0);
            prop_assert_eq!(two.1, one.1);
        }

        #[test]
        fn corpus_scores_ignore_instance_order(shuffle_seed in 0u64..500) {
            let mut instances = vec![
                inst("s", "a b c d", &["a b c d", "a b"]),
                inst("s", "b a d c", &["a b c d"]),
                inst("s", "x y", &["x y z"]),
                inst("s", "q", &["q r s t"]),
            ];
            let b0 = bleu(&instances, 4, false).unwrap();
            let t0 = ter(&instances).unwrap();
            let mut rng = Rng::new(shuffle_seed);
            rng.shuffle(&mut instances);
            prop_assert_eq!(bleu(&instances, 4, false).unwrap(), b0);
            prop_assert_eq!(ter(&instances).unwrap(), t0);
        }
    }

    #[test]
    fn ter_identical_is_zero() {
        let t = ter(&[inst("s", "a b c d", &["a b c d"])]).unwrap();
        assert_eq!(t.score, 0.0);
        assert_eq!(t.skipped, 0);
    }

    #[test]
    fn ter_one_substitution_in_four_words() {
        let t = ter(&[inst("s", "a b x d", &["a b c d"])]).unwrap();
        assert_eq!(t.score, 0.25);
    }

    #[test]
    fn ter_single_shift_beats_two_substitutions() {
        let t = ter(&[inst("s", "b a c d", &["a b c d"])]).unwrap();
        assert_eq!(t.score, 0.25);
    }

    #[test]
    fn ter_pure_deletion_is_one_over_reference_length() {
        let t = ter(&[inst("s", "a b c d", &["a b c"])]).unwrap();
        assert!((t.score - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ter_takes_the_best_reference() {
        let t = ter(&[inst("s", "a b", &["x y z w", "a b"])]).unwrap();
        assert_eq!(t.score, 0.0);
    }

    #[test]
    fn ter_skips_instances_with_only_empty_references() {
        let mut bad = inst("s", "a b", &[]);
        bad.references = vec![vec![]];
        let ok = inst("s", "a b", &["a b"]);
        let t = ter(&[bad, ok]).unwrap();
        assert_eq!(t.skipped, 1);
        assert_eq!(t.score, 0.0);
    }

    #[test]
    fn ter_edits_match_plain_edit_distance_when_shifts_cannot_help() {
        // Random small cases re-checked against the independent edit
        // distance: a shift is only taken when it strictly beats editing,
        // so TER edits never exceed the plain distance.
        let mut rng = Rng::new(3);
        let alphabet = ["a", "b", "c"];
        for _ in 0..40 {
            let mk = |rng: &mut Rng| -> Vec<String> {
                (0..1 + rng.gen_range(6)).map(|_| alphabet[rng.gen_range(3)].to_string()).collect()
            };
            let cand = mk(&mut rng);
            let reference = mk(&mut rng);
            let (s, i, d) = oracle::edit_distance_words(&cand, &reference);
            assert!(ter_edits(&cand, &reference) <= s + i + d, "{cand:?} vs {reference:?}");
        }
    }

    fn unit_table() -> EmbeddingTable {
        EmbeddingTable::from_pairs(vec![
            ("east", vec![1.0, 0.0]),
            ("north", vec![0.0, 1.0]),
            ("spring", vec![0.8, 0.6]),
            ("tide", vec![0.2, 0.96f64.sqrt()]),
        ])
        .unwrap()
    }

    #[test]
    fn identical_sentences_score_one() {
        let e = emb_greedy(&[inst("s", "east north", &["east north"])], &unit_table()).unwrap();
        assert!((e.score - 1.0).abs() < 1e-6);
        assert_eq!(e.skipped_tokens, 0);
    }

    #[test]
    fn orthogonal_single_tokens_score_zero() {
        let e = emb_greedy(&[inst("s", "east", &["north"])], &unit_table()).unwrap();
        assert!(e.score.abs() < 1e-12);
    }

    #[test]
    fn hand_computed_asymmetric_case_scores_065() {
        // Forward: the candidate's one token best-matches 0.8. Backward:
        // the two reference tokens match 0.8 and 0.2, mean 0.5.
        let e = emb_greedy(&[inst("s", "east", &["spring tide"])], &unit_table()).unwrap();
        assert!((e.score - 0.65).abs() < 1e-6);
    }

    #[test]
    fn best_reference_wins_and_oov_tokens_are_counted() {
        let e = emb_greedy(
            &[inst("s", "east unknownword", &["north", "east"])],
            &unit_table(),
        )
        .unwrap();
        assert_eq!(e.skipped_tokens, 1);
        assert!((e.score - 1.0).abs() < 1e-6, "the matching reference must win");
    }

    #[test]
    fn uncovered_instances_are_skipped_not_fatal() {
        let covered = inst("s", "east", &["east"]);
        let uncovered = inst("s", "zzz qqq", &["east"]);
        let e = emb_greedy(&[covered, uncovered], &unit_table()).unwrap();
        assert_eq!(e.skipped_instances, 1);
        assert!((e.score - 1.0).abs() < 1e-6);

        let none = inst("s", "zzz", &["qqq"]);
        assert!(emb_greedy(&[none], &unit_table()).is_err());
    }

    #[test]
    fn emb_corpus_mean_is_exactly_order_free() {
        let a = inst("s", "east", &["spring tide"]);
        let b = inst("s", "north", &["north"]);
        let c = inst("s", "spring", &["east north"]);
        let x = emb_greedy(&[a.clone(), b.clone(), c.clone()], &unit_table()).unwrap();
        let y = emb_greedy(&[c, a, b], &unit_table()).unwrap();
        assert_eq!(x.score.to_bits(), y.score.to_bits());
    }

    #[test]
    fn embedding_text_format_round_trips() {
        let table = EmbeddingTable::from_text("2 3\nfoo 1 0 0\nbar 0 1 0\n").unwrap();
        assert_eq!(table.dim(), 3);
        assert_eq!(table.len(), 2);
        assert_eq!(table.get("foo"), Some(&[1.0, 0.0, 0.0][..]));
        assert!(table.get("Foo").is_none(), "lookups are case-sensitive");

        assert!(EmbeddingTable::from_text("foo 1 2\nbar 1\n").is_err());
        assert!(EmbeddingTable::from_text("foo x y\n").is_err());
    }

    #[test]
    fn bootstrap_of_constant_metric_is_zero() {
        let items = vec![1.0f64, 1.0, 1.0];
        let v = bootstrap_variance(&items, |xs| Ok(xs.iter().sum::<f64>() / xs.len() as f64), 200, 9)
            .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let items = vec![0.0f64, 1.0, 0.5, 0.25];
        let m = |xs: &[f64]| Ok(xs.iter().sum::<f64>() / xs.len() as f64);
        let a = bootstrap_variance(&items, m, 300, 42).unwrap();
        let b = bootstrap_variance(&items, m, 300, 42).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = bootstrap_variance(&items, m, 300, 43).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn two_item_bootstrap_matches_the_binomial_closed_form() {
        // Resampling {a, b} with replacement: mean is a, (a+b)/2, or b with
        // probabilities 1/4, 1/2, 1/4, so the estimator variance is
        // (a-b)^2 / 8. Monte-Carlo with 2000 draws sits within ~10%.
        let (a, b) = (0.2f64, 0.9);
        let v = bootstrap_variance(&[a, b], |xs| Ok(xs.iter().sum::<f64>() / xs.len() as f64), 2000, 5)
            .unwrap();
        let closed = (a - b) * (a - b) / 8.0;
        assert!((v - closed).abs() < 0.1 * closed, "{v} vs {closed}");
    }

    fn mean_len_metric(xs: &[EvalInstance]) -> Result<f64> {
        Ok(xs.iter().map(|i| i.candidate.len() as f64).sum::<f64>() / xs.len() as f64)
    }

    #[test]
    fn identical_systems_get_p_exactly_one() {
        let a = vec![inst("s", "x y", &["x y"]), inst("t", "z", &["z"])];
        let p = ar_test(&a, &a, mean_len_metric, 10_000, 1).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn tiny_case_matches_the_exhaustive_oracle_exactly() {
        let a = vec![
            inst("s1", "a b c", &["a b c"]),
            inst("s2", "d", &["d e"]),
            inst("s3", "f g", &["f g h"]),
        ];
        let b = vec![
            inst("s1", "a b", &["a b c"]),
            inst("s2", "d e", &["d e"]),
            inst("s3", "f", &["f g h"]),
        ];
        let p = ar_test(&a, &b, mean_len_metric, 10_000, 1).unwrap();
        let oracle_p =
            oracle::exhaustive_ar_p(&a, &b, |xs| mean_len_metric(xs).unwrap()).unwrap();
        assert_eq!(p, oracle_p);
    }

    #[test]
    fn misaligned_systems_are_rejected() {
        let a = vec![inst("s1", "a", &["a"])];
        let b = vec![inst("s2", "a", &["a"])];
        assert!(matches!(ar_test(&a, &b, mean_len_metric, 100, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn sampled_mode_is_seeded_and_in_range() {
        // 12 instances would need 4096 assignments; 100 iterations forces
        // the sampled path.
        let a: Vec<EvalInstance> = (0..12).map(|i| inst(&format!("s{i}"), "a b c", &["a b"])).collect();
        let b: Vec<EvalInstance> = (0..12).map(|i| inst(&format!("s{i}"), "a", &["a b"])).collect();
        let p1 = ar_test(&a, &b, mean_len_metric, 100, 7).unwrap();
        let p2 = ar_test(&a, &b, mean_len_metric, 100, 7).unwrap();
        assert_eq!(p1.to_bits(), p2.to_bits());
        assert!(p1 > 0.0 && p1 <= 1.0);
    }

    #[test]
    fn uniform_model_perplexity_is_the_vocabulary_size() {
        let vocab = Vocab::build(["a b c d e"], 8).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            hidden: 4,
            num_layers: 2,
            residual_every: 2,
            dim_fix: DimFix::Pad,
            reverse_source: false,
        };
        let mut model = Seq2Seq::<f64>::init(cfg, &mut Rng::new(4), 0.3, 0.0).unwrap();
        model.scale(0.0);
        let instances = vec![
            inst("a b", "c", &["c d", "e"]),
            inst("d e", "a", &["a b c"]),
        ];
        let p = corpus_perplexity(&model, &vocab, &instances).unwrap();
        let v = vocab.size() as f64;
        assert!((p - v).abs() < 0.01 * v, "{p} vs {v}");
    }

    #[test]
    fn report_rendering_scales_the_embedding_score() {
        let report = MetricReport {
            bleu: Some(36.7),
            emb: Some(EmbScore { score: 0.65, skipped_instances: 0, skipped_tokens: 2 }),
            ..MetricReport::default()
        };
        report.check_finite().unwrap();
        let kv = report.to_kv();
        assert!(kv.contains("bleu=36.700000"));
        assert!(kv.contains("emb_greedy=65.000000"));
        assert!(kv.contains("emb_skipped_tokens=2.000000"));

        let bad = MetricReport { bleu: Some(f64::NAN), ..MetricReport::default() };
        assert!(bad.check_finite().is_err());
    }
}
