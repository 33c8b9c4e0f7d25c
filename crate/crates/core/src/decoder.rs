//! Beam-search decoding. Hypotheses advance in lockstep, one token per
//! round: every live hypothesis is expanded over the full vocabulary, the
//! best `beam_size` children survive, and a surviving child that just
//! emitted the end marker retires into the finished pool. The search stops
//! once no live hypothesis could still beat the pool, or when the length
//! cap forces the remaining hypotheses to terminate.
//!
//! Scores are raw sums of step log-probabilities; an optional flag divides
//! by length for ranking. All ties break deterministically: better score,
//! then shorter, then lexicographically smaller token sequence.

use crate::data::{tokenize, Vocab, EOS_ID};
use crate::error::{Error, Result};
use crate::lstm::LstmState;
use crate::model::Seq2Seq;
use crate::tensor::Scalar;

/// One decoding candidate. `tokens` holds content tokens while the
/// hypothesis is live and gains the terminal end marker when it finishes;
/// `log_prob` is the exact sum of the chosen steps' log-probabilities.
#[derive(Debug, Clone)]
pub struct Hypothesis<F> {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub states: Vec<LstmState<F>>,
    pub finished: bool,
}

impl<F> Hypothesis<F> {
    /// Ranking key: the raw score, or the per-token average when length
    /// normalization is on.
    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Total tokens including the end marker; `None` derives
    /// 2 x source length + 5.
    pub max_len: Option<usize>,
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_len: None,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    fn resolve_max_len(&self, src_len: usize) -> Result<usize> {
        let m = self.max_len.unwrap_or(2 * src_len + 5);
        if m == 0 {
            return Err(Error::Argument(
                "max_len must leave room for at least the end marker".into(),
            ));
        }
        Ok(m)
    }
}

fn score_of(log_prob: f64, len: usize, normalize: bool) -> f64 {
    if normalize && len > 0 {
        log_prob / len as f64
    } else {
        log_prob
    }
}

/// Candidate ordering: score descending, then shorter, then lexicographic.
fn better(score_a: f64, tokens_a: &[usize], score_b: f64, tokens_b: &[usize]) -> std::cmp::Ordering {
    score_b
        .total_cmp(&score_a)
        .then(tokens_a.len().cmp(&tokens_b.len()))
        .then_with(|| tokens_a.cmp(tokens_b))
}

/// Search for the highest-scoring terminated sequences. Returns at most
/// `beam_size` finished hypotheses, best first; every returned token
/// sequence ends with the end marker and is at most `max_len` long.
pub fn beam_decode<F: Scalar>(
    model: &Seq2Seq<F>,
    src: &[usize],
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis<F>>> {
    if config.beam_size == 0 {
        return Err(Error::Argument("beam size must be at least 1".into()));
    }
    let max_len = config.resolve_max_len(src.len())?;
    let normalize = config.length_normalize;

    let mut live: Vec<Hypothesis<F>> = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        states: model.encode(src)?,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis<F>> = Vec::new();

    struct Child {
        parent: usize,
        tokens: Vec<usize>,
        log_prob: f64,
    }

    while !live.is_empty() {
        let len_now = live[0].tokens.len();
        // One decoder step per parent, reused by all of its children.
        let mut advanced = Vec::with_capacity(live.len());
        for hyp in &live {
            let prev = *hyp.tokens.last().unwrap_or(&EOS_ID);
            advanced.push(model.decode_step(&hyp.states, prev)?);
        }

        let force_eos = len_now + 1 == max_len;
        let mut children: Vec<Child> = Vec::new();
        for (p, hyp) in live.iter().enumerate() {
            let (log_probs, _) = &advanced[p];
            for tok in 0..log_probs.len() {
                if force_eos && tok != EOS_ID {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                children.push(Child {
                    parent: p,
                    tokens,
                    log_prob: hyp.log_prob + log_probs[tok].to_f64(),
                });
            }
        }
        children.sort_unstable_by(|a, b| {
            better(
                score_of(a.log_prob, a.tokens.len(), normalize),
                &a.tokens,
                score_of(b.log_prob, b.tokens.len(), normalize),
                &b.tokens,
            )
        });
        children.truncate(config.beam_size);

        let mut next_live = Vec::new();
        for child in children {
            let states = advanced[child.parent].1.clone();
            if *child.tokens.last().expect("children carry a token") == EOS_ID {
                pool.push(Hypothesis {
                    tokens: child.tokens,
                    log_prob: child.log_prob,
                    // States from before the end marker; nothing consumes it.
                    states: live[child.parent].states.clone(),
                    finished: true,
                });
            } else {
                next_live.push(Hypothesis {
                    tokens: child.tokens,
                    log_prob: child.log_prob,
                    states,
                    finished: false,
                });
            }
        }
        pool.sort_by(|a, b| better(a.score(normalize), &a.tokens, b.score(normalize), &b.tokens));
        pool.truncate(config.beam_size);
        live = next_live;

        if pool.len() == config.beam_size {
            // The tightest score any live hypothesis could still reach: raw
            // scores only shrink, and a normalized one is maximized by
            // stretching to the length cap.
            let bound = live
                .iter()
                .map(|h| {
                    if normalize {
                        h.log_prob / max_len as f64
                    } else {
                        h.log_prob
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let worst = pool.last().expect("pool is full").score(normalize);
            if worst >= bound {
                break;
            }
        }
    }
    Ok(pool)
}

/// Decode a raw text line: words the vocabulary does not know become the
/// unknown marker, the beam runs, and each hypothesis comes back as plain
/// text with all reserved tokens stripped, best first.
pub fn generate<F: Scalar>(
    model: &Seq2Seq<F>,
    vocab: &Vocab,
    source_text: &str,
    config: &DecodeConfig,
) -> Result<Vec<(String, f64)>> {
    if vocab.size() != model.cfg.vocab_size {
        return Err(Error::Argument(format!(
            "model was built for a vocabulary of {}, this one has {}",
            model.cfg.vocab_size,
            vocab.size()
        )));
    }
    let tokens: Vec<usize> = tokenize(source_text).iter().map(|w| vocab.id(w)).collect();
    let hyps = beam_decode(model, &tokens, config)?;
    hyps.iter()
        .map(|h| Ok((vocab.decode_content(&h.tokens)?, h.score(config.length_normalize))))
        .collect()
}
