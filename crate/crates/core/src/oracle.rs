//! Brute-force reference implementations used only by tests and the
//! gradient-check command: a scalar-loop LSTM evaluator, a central-difference
//! gradient engine, an exhaustive decoder-sequence enumerator, a
//! dynamic-programming word edit distance, an exhaustive paired-permutation
//! p-value, and a hand-count n-gram scorer.
//!
//! Nothing here shares algorithm code with the production paths; when an
//! oracle and the engine disagree, the disagreement is meaningful. Everything
//! runs in double precision and stays single-threaded.

use crate::data::EOS_ID;
use crate::error::{Error, Result};
use crate::lstm::LstmParams;
use crate::model::Seq2Seq;
use crate::tensor::{Scalar, TensorSet};

/// Caps on exhaustive work so a typo in a test never burns hours.
#[derive(Debug, Clone, Copy)]
pub struct OracleBudget {
    pub max_vocab: usize,
    pub max_len: usize,
    pub max_params: usize,
}

/// Hard cap on enumeration tree nodes regardless of the other limits.
const MAX_ENUM_STATES: u128 = 1_000_000;

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget {
            max_vocab: 64,
            max_len: 8,
            max_params: 200_000,
        }
    }
}

/// Central-difference gradient of `loss` with respect to every parameter in
/// `subject`, in tensor order. Each parameter is perturbed and then restored
/// to its exact original bits, so the subject is unchanged on return.
pub fn fd_gradient<C, L>(subject: &mut C, loss: L, eps: f64, budget: &OracleBudget) -> Result<Vec<f64>>
where
    C: TensorSet<f64>,
    L: Fn(&C) -> f64,
{
    let n = subject.param_count();
    if n > budget.max_params {
        return Err(Error::Oracle(format!(
            "finite differences over {n} parameters exceeds the budget of {}",
            budget.max_params
        )));
    }
    let mut out = Vec::with_capacity(n);
    for idx in 0..subject.tensor_count() {
        for j in 0..subject.tensor_at(idx).len() {
            let old = subject.tensor_at(idx)[j];
            subject.tensor_at_mut(idx)[j] = old + eps;
            let up = loss(subject);
            subject.tensor_at_mut(idx)[j] = old - eps;
            let down = loss(subject);
            subject.tensor_at_mut(idx)[j] = old;
            out.push((up - down) / (2.0 * eps));
        }
    }
    Ok(out)
}

/// Every parameter of a tensor set as one flat vector, in tensor order.
pub fn flatten<C: TensorSet<f64>>(subject: &C) -> Vec<f64> {
    let mut out = Vec::with_capacity(subject.param_count());
    for idx in 0..subject.tensor_count() {
        out.extend_from_slice(subject.tensor_at(idx));
    }
    out
}

/// Relative disagreement of two gradient vectors as a norm ratio:
/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn grad_check_ratio(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient vectors must align");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Worst per-parameter relative error between two gradient vectors. The
/// denominator is floored at 1e-3 so parameters with near-zero gradients,
/// where differences are pure rounding noise, do not dominate.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient vectors must align");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn scalar_sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// One LSTM step written as plain scalar loops, independently of the matrix
/// routines. Returns (h, c).
pub fn scalar_lstm_step(
    p: &LstmParams<f64>,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hidden = p.hidden_dim();
    let input = p.input_dim();
    let gate = |wx: &crate::tensor::Matrix<f64>,
                wh: &crate::tensor::Matrix<f64>,
                b: &[f64],
                k: usize| {
        let mut a = b[k];
        for j in 0..input {
            a += wx.at(k, j) * x[j];
        }
        for j in 0..hidden {
            a += wh.at(k, j) * h_prev[j];
        }
        a
    };
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for k in 0..hidden {
        let i = scalar_sigmoid(gate(&p.w_xi, &p.w_hi, &p.b_i, k));
        let f = scalar_sigmoid(gate(&p.w_xf, &p.w_hf, &p.b_f, k));
        let o = scalar_sigmoid(gate(&p.w_xo, &p.w_ho, &p.b_o, k));
        let g = gate(&p.w_xc, &p.w_hc, &p.b_c, k).tanh();
        c[k] = f * c_prev[k] + i * g;
        h[k] = o * c[k].tanh();
    }
    (h, c)
}

/// Every terminated sequence the decoder could emit for `src` within
/// `max_len` total tokens, scored by summed log-probability and sorted best
/// first (score descending, then shorter, then lexicographic). Token lists
/// include the terminal end marker.
pub fn enumerate_ranked<F: Scalar>(
    model: &Seq2Seq<F>,
    src: &[usize],
    max_len: usize,
    budget: &OracleBudget,
) -> Result<Vec<(Vec<usize>, f64)>> {
    if max_len == 0 {
        return Err(Error::Argument("enumeration needs room for at least the end marker".into()));
    }
    let vocab = model.cfg.vocab_size;
    if vocab > budget.max_vocab || max_len > budget.max_len {
        return Err(Error::Oracle(format!(
            "enumeration over vocab {vocab}, length {max_len} exceeds the budget ({} / {})",
            budget.max_vocab, budget.max_len
        )));
    }
    // Tree nodes: one decoder step per prefix of content tokens.
    let mut states: u128 = 0;
    let mut pw: u128 = 1;
    for _ in 0..max_len {
        states = states.saturating_add(pw);
        pw = pw.saturating_mul((vocab - 1) as u128);
    }
    if states > MAX_ENUM_STATES {
        return Err(Error::Oracle(format!(
            "enumeration would visit {states} states, over the cap of {MAX_ENUM_STATES}"
        )));
    }

    fn walk<F: Scalar>(
        model: &Seq2Seq<F>,
        states: &[crate::lstm::LstmState<F>],
        prev: usize,
        prefix: &mut Vec<usize>,
        score: f64,
        content_left: usize,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) -> Result<()> {
        let (log_probs, next) = model.decode_step(states, prev)?;
        let mut done = prefix.clone();
        done.push(EOS_ID);
        out.push((done, score + log_probs[EOS_ID].to_f64()));
        if content_left == 0 {
            return Ok(());
        }
        for tok in 0..log_probs.len() {
            if tok == EOS_ID {
                continue;
            }
            prefix.push(tok);
            walk(model, &next, tok, prefix, score + log_probs[tok].to_f64(), content_left - 1, out)?;
            prefix.pop();
        }
        Ok(())
    }

    let init = model.encode(src)?;
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    walk(model, &init, EOS_ID, &mut prefix, 0.0, max_len - 1, &mut out)?;
    out.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.len().cmp(&b.0.len()))
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(out)
}

/// Best terminated sequence and its log-probability.
pub fn enumerate_best_sequence<F: Scalar>(
    model: &Seq2Seq<F>,
    src: &[usize],
    max_len: usize,
    budget: &OracleBudget,
) -> Result<(Vec<usize>, f64)> {
    let ranked = enumerate_ranked(model, src, max_len, budget)?;
    Ok(ranked.into_iter().next().expect("max_len >= 1 always yields the bare end marker"))
}

/// Minimum word edit script transforming `a` into `b`, as (substitutions,
/// insertions, deletions). Among scripts of equal total length the one with
/// the fewest substitutions is reported, which keeps the counts symmetric:
/// swapping the arguments swaps insertions and deletions exactly.
pub fn edit_distance_words(a: &[String], b: &[String]) -> (usize, usize, usize) {
    // dp entries are (total, subs); insertions and deletions follow from the
    // totals and the length difference, tracked explicitly anyway.
    #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
    struct Cell {
        total: usize,
        subs: usize,
        ins: usize,
        dels: usize,
    }
    let mut dp = vec![vec![Cell { total: 0, subs: 0, ins: 0, dels: 0 }; b.len() + 1]; a.len() + 1];
    for j in 1..=b.len() {
        dp[0][j] = Cell { total: j, subs: 0, ins: j, dels: 0 };
    }
    for i in 1..=a.len() {
        dp[i][0] = Cell { total: i, subs: 0, ins: 0, dels: i };
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            if a[i - 1] == b[j - 1] {
                dp[i][j] = dp[i - 1][j - 1];
                continue;
            }
            let sub = Cell { total: dp[i - 1][j - 1].total + 1, subs: dp[i - 1][j - 1].subs + 1, ..dp[i - 1][j - 1] };
            let ins = Cell { total: dp[i][j - 1].total + 1, ins: dp[i][j - 1].ins + 1, ..dp[i][j - 1] };
            let del = Cell { total: dp[i - 1][j].total + 1, dels: dp[i - 1][j].dels + 1, ..dp[i - 1][j] };
            let mut best = sub;
            for cand in [ins, del] {
                if (cand.total, cand.subs) < (best.total, best.subs) {
                    best = cand;
                }
            }
            dp[i][j] = best;
        }
    }
    let c = dp[a.len()][b.len()];
    (c.subs, c.ins, c.dels)
}

/// Exact paired-permutation p-value: over all 2^n assignments of each
/// aligned pair to one system or the other (the identity included), the
/// fraction whose absolute metric difference is at least the observed one.
pub fn exhaustive_ar_p<T: Clone>(a: &[T], b: &[T], metric: impl Fn(&[T]) -> f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "paired permutation needs aligned lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n >= 20 {
        return Err(Error::Oracle(format!("2^{n} assignments is beyond exhaustive reach")));
    }
    let observed = (metric(a) - metric(b)).abs();
    let mut hits = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut pa = Vec::with_capacity(n);
        let mut pb = Vec::with_capacity(n);
        for i in 0..n {
            if mask >> i & 1 == 1 {
                pa.push(b[i].clone());
                pb.push(a[i].clone());
            } else {
                pa.push(a[i].clone());
                pb.push(b[i].clone());
            }
        }
        if (metric(&pa) - metric(&pb)).abs() >= observed {
            hits += 1;
        }
    }
    Ok(hits as f64 / (1u64 << n) as f64)
}

/// Clipped n-gram counts by explicit scanning: how many of the candidate's
/// n-grams are covered by any reference, each reference n-gram usable at
/// most as many times as its maximum count in a single reference, plus the
/// total number of candidate n-grams.
pub fn ngram_clipped_counts(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    if candidate.len() < n || n == 0 {
        return (0, 0);
    }
    let grams = |s: &[String]| -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let cand = grams(candidate);
    let mut matched = 0usize;
    for (pos, g) in cand.iter().enumerate() {
        // This occurrence of g matches only while the reference cap covers it.
        let occurrence = cand[..=pos].iter().filter(|s| *s == g).count();
        let cap = references
            .iter()
            .map(|r| grams(r).iter().filter(|rg| *rg == g).count())
            .max()
            .unwrap_or(0);
        if occurrence <= cap {
            matched += 1;
        }
    }
    (matched, cand.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn string_words(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn quadratic_loss_gradient_is_the_parameter_vector() {
        let mut rng = Rng::new(5);
        let mut p = LstmParams::<f64>::init(&mut rng, 2, 3, 0.5, 0.0);
        let loss = |q: &LstmParams<f64>| -> f64 {
            0.5 * (0..12).map(|i| q.tensor(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        };
        let fd = fd_gradient(&mut p, loss, 1e-5, &OracleBudget::default()).unwrap();
        let expect = flatten(&p);
        for (g, e) in fd.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-8, "{g} vs {e}");
        }
    }

    #[test]
    fn linear_loss_gradient_is_the_coefficient_vector() {
        let mut rng = Rng::new(6);
        let mut p = LstmParams::<f64>::init(&mut rng, 2, 2, 0.5, 0.0);
        let coeffs: Vec<f64> = (0..p.param_count()).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let loss = {
            let coeffs = coeffs.clone();
            move |q: &LstmParams<f64>| -> f64 {
                flatten(q).iter().zip(&coeffs).map(|(v, c)| v * c).sum()
            }
        };
        let fd = fd_gradient(&mut p, loss, 1e-5, &OracleBudget::default()).unwrap();
        for (g, c) in fd.iter().zip(&coeffs) {
            assert!((g - c).abs() < 1e-9, "{g} vs {c}");
        }
    }

    #[test]
    fn fd_gradient_restores_parameters_exactly() {
        let mut rng = Rng::new(7);
        let mut p = LstmParams::<f64>::init(&mut rng, 2, 2, 0.5, 0.0);
        let before = flatten(&p);
        let _ = fd_gradient(&mut p, |_| 1.0, 1e-5, &OracleBudget::default()).unwrap();
        let after = flatten(&p);
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn fd_budget_is_enforced() {
        let mut p = LstmParams::<f64>::zeros(2, 2);
        let tight = OracleBudget { max_params: 3, ..OracleBudget::default() };
        let err = fd_gradient(&mut p, |_| 0.0, 1e-5, &tight).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn edit_distance_base_cases() {
        let a = string_words("a b c");
        assert_eq!(edit_distance_words(&a, &a), (0, 0, 0));
        assert_eq!(edit_distance_words(&a, &string_words("a c")), (0, 0, 1));
        assert_eq!(edit_distance_words(&string_words("a c"), &a), (0, 1, 0));
        assert_eq!(edit_distance_words(&string_words("a x c"), &a), (1, 0, 0));
        assert_eq!(edit_distance_words(&[], &a), (0, 3, 0));
    }

    #[test]
    fn edit_distance_is_symmetric_with_roles_swapped() {
        let mut rng = Rng::new(77);
        let alphabet = ["a", "b", "c", "d"];
        for _ in 0..60 {
            let mk = |rng: &mut Rng| -> Vec<String> {
                (0..rng.gen_range(7)).map(|_| alphabet[rng.gen_range(4)].to_string()).collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let (s1, i1, d1) = edit_distance_words(&a, &b);
            let (s2, i2, d2) = edit_distance_words(&b, &a);
            assert_eq!((s1, i1, d1), (s2, d2, i2), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn uniform_model_enumeration_is_ranked_and_complete() {
        use crate::model::{DimFix, ModelConfig};
        let cfg = ModelConfig {
            vocab_size: 3,
            hidden: 3,
            num_layers: 1,
            residual_every: 0,
            dim_fix: DimFix::Pad,
            reverse_source: false,
        };
        let mut rng = Rng::new(1);
        let mut model = Seq2Seq::<f64>::init(cfg, &mut rng, 0.1, 0.0).unwrap();
        model.scale(0.0);
        let ranked = enumerate_ranked(&model, &[1], 2, &OracleBudget::default()).unwrap();
        // Terminated sequences of up to 2 tokens: the bare end marker plus
        // one content token from {1, 2} followed by it.
        assert_eq!(ranked.len(), 3);
        let ln3 = (3f64).ln();
        assert_eq!(ranked[0].0, vec![EOS_ID]);
        assert!((ranked[0].1 + ln3).abs() < 1e-12);
        assert_eq!(ranked[1].0, vec![1, EOS_ID]);
        assert_eq!(ranked[2].0, vec![2, EOS_ID]);
        assert!((ranked[1].1 + 2.0 * ln3).abs() < 1e-12);
        assert!((ranked[2].1 + 2.0 * ln3).abs() < 1e-12);
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        use crate::model::{DimFix, ModelConfig};
        let cfg = ModelConfig {
            vocab_size: 4,
            hidden: 2,
            num_layers: 1,
            residual_every: 0,
            dim_fix: DimFix::Pad,
            reverse_source: false,
        };
        let mut rng = Rng::new(2);
        let model = Seq2Seq::<f64>::init(cfg, &mut rng, 0.1, 0.0).unwrap();
        let err = enumerate_ranked(&model, &[1], 9, &OracleBudget::default()).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn identical_systems_always_get_p_one() {
        let a = vec![0.3, 0.5, 0.9];
        let metric = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let p = exhaustive_ar_p(&a, &a, metric).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn hand_counted_clipped_unigrams() {
        let cand = string_words("the the the the the the the");
        let refs = vec![string_words("the cat is on the mat")];
        assert_eq!(ngram_clipped_counts(&cand, &refs, 1), (2, 7));
        let refs2 = vec![string_words("the cat"), string_words("the the the cat")];
        assert_eq!(ngram_clipped_counts(&cand, &refs2, 1), (3, 7));
    }
}
