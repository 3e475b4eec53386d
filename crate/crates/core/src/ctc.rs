//! CTC loss, greedy decoding, prefix beam search with shallow LM fusion and
//! joint CTC/attention n-best rescoring. The blank symbol is always index 0.

use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::tensor::{log_add, logsumexp, Graph, Tensor, Var};

pub const BLANK: usize = 0;

pub type Token = usize;
/// Label sequence without blanks.
pub type Transcript = Vec<Token>;

/// Per-frame log-probabilities, `M × V`, each row a log-distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix(Tensor);

impl LogProbMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.last_dim() < 2 {
            return Err(contract(format!(
                "log-prob matrix must be M×V with V ≥ 2, got {:?}",
                values.shape()
            )));
        }
        for r in 0..values.rows() {
            let lse = logsumexp(values.row(r));
            if (lse).abs() > 1e-9 {
                return Err(contract(format!(
                    "row {r} is not a log-distribution (logsumexp {lse:e})"
                )));
            }
        }
        Ok(Self(values))
    }

    /// Normalizes raw scores row-wise.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let c = logits.last_dim();
        let mut data = logits.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Self::new(Tensor::new(logits.shape().to_vec(), data)?)
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.0.get(t, k)
    }
}

/// Number of adjacent equal pairs; each one needs a separating blank frame.
pub fn adjacent_repeats(target: &[Token]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_feasible(frames: usize, target: &[Token]) -> Result<()> {
    let repeats = adjacent_repeats(target);
    if frames < target.len() + repeats {
        return Err(Error::InfeasibleAlignment {
            frames,
            tokens: target.len(),
            repeats,
        });
    }
    Ok(())
}

/// `-log P(target | logp)` and its gradient with respect to every entry of
/// `logp` (the negated state-occupancy posteriors).
pub fn ctc_forward_backward(logp: &Tensor, target: &[Token]) -> Result<(f64, Vec<f64>)> {
    let (frames, vocab) = match logp.shape() {
        [m, v] => (*m, *v),
        other => {
            return Err(contract(format!("ctc expects an M×V matrix, got {other:?}")));
        }
    };
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= vocab) {
        return Err(contract(format!("target token {bad} outside [1, {})", vocab)));
    }
    if frames == 0 {
        return Err(Error::InfeasibleAlignment {
            frames,
            tokens: target.len(),
            repeats: adjacent_repeats(target),
        });
    }
    check_feasible(frames, target)?;

    let states: Vec<Token> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&y| [y, BLANK]))
        .collect();
    let s_len = states.len();
    let skip_ok = |s: usize| s >= 2 && states[s] != BLANK && states[s] != states[s - 2];
    let neg_inf = f64::NEG_INFINITY;
    let lp = |t: usize, k: usize| logp.data()[t * vocab + k];

    let mut alpha = vec![neg_inf; frames * s_len];
    alpha[0] = lp(0, states[0]);
    if s_len > 1 {
        alpha[1] = lp(0, states[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg_inf { neg_inf } else { a + lp(t, states[s]) };
        }
    }

    // beta[t][s]: log-probability of the suffix after frame t given state s at t.
    let mut beta = vec![neg_inf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = 0.0;
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, states[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, states[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, states[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }

    let end = last * s_len;
    let log_total = if s_len > 1 {
        log_add(alpha[end + s_len - 1], alpha[end + s_len - 2])
    } else {
        alpha[end]
    };
    if !log_total.is_finite() {
        return Err(Error::Internal(format!(
            "ctc total log-probability is {log_total}"
        )));
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s];
            if occ > neg_inf {
                grad[t * vocab + states[s]] -= (occ - log_total).exp();
            }
        }
    }
    Ok((-log_total, grad))
}

/// Differentiable CTC loss on a log-probability node.
pub fn ctc_loss(g: &mut Graph, logp: Var, target: &[Token]) -> Result<Var> {
    let (loss, grad) = ctc_forward_backward(g.value(logp), target)?;
    g.scalar_fn(logp, loss, grad)
}

/// Same as [`ctc_loss`] but with the backward sign flipped. Only used to
/// confirm that the gradient suite detects a broken backward pass.
#[doc(hidden)]
pub fn ctc_loss_with_flipped_gradient(g: &mut Graph, logp: Var, target: &[Token]) -> Result<Var> {
    let (loss, grad) = ctc_forward_backward(g.value(logp), target)?;
    g.scalar_fn(logp, loss, grad.into_iter().map(|d| -d).collect())
}

/// Frame-wise argmax (ties to the lowest index), collapse repeats, drop blanks.
pub fn greedy_decode(logp: &LogProbMatrix) -> Transcript {
    let path: Vec<Token> = (0..logp.frames())
        .map(|t| {
            let row = logp.tensor().row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Collapses a frame-level path into its transcript.
pub fn collapse(path: &[Token]) -> Transcript {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Next-token scorer used for shallow fusion.
pub trait LanguageModel {
    /// Log-probabilities of every vocabulary entry following `prefix`.
    fn next_token_logprobs(&self, prefix: &[Token]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub prefix: Transcript,
    pub log_p_blank: f64,
    pub log_p_nonblank: f64,
    pub lm_score: f64,
}

impl BeamHypothesis {
    pub fn acoustic(&self) -> f64 {
        log_add(self.log_p_blank, self.log_p_nonblank)
    }

    pub fn total(&self, lm_weight: f64) -> f64 {
        self.acoustic() + lm_weight * self.lm_score
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTranscript {
    pub tokens: Transcript,
    pub score: f64,
}

/// Orders by score descending, then by token sequence ascending.
fn rank(a_score: f64, a: &[Token], b_score: f64, b: &[Token]) -> std::cmp::Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

/// CTC prefix beam search. The LM contributes `lm_weight` times its
/// next-token log-probability once per emitted token; no length bonus and no
/// end-of-sequence term.
pub fn prefix_beam_search(
    logp: &LogProbMatrix,
    beam: usize,
    lm: Option<&dyn LanguageModel>,
    lm_weight: f64,
) -> Result<Vec<ScoredTranscript>> {
    if beam < 1 {
        return Err(contract("beam size must be at least 1"));
    }
    if !(lm_weight >= 0.0) {
        return Err(contract(format!("lm_weight must be ≥ 0, got {lm_weight}")));
    }
    let lm = if lm_weight > 0.0 {
        Some(lm.ok_or_else(|| contract("lm_weight > 0 requires a language model"))?)
    } else {
        None
    };
    let vocab = logp.vocab();
    let neg_inf = f64::NEG_INFINITY;
    let mut lm_cache: HashMap<Transcript, Vec<f64>> = HashMap::new();

    let mut hyps = vec![BeamHypothesis {
        prefix: Vec::new(),
        log_p_blank: 0.0,
        log_p_nonblank: neg_inf,
        lm_score: 0.0,
    }];

    for t in 0..logp.frames() {
        let mut next: HashMap<Transcript, BeamHypothesis> = HashMap::new();
        let mut add = |prefix: &Transcript, lm_score: f64, blank: f64, nonblank: f64| {
            let e = next.entry(prefix.clone()).or_insert_with(|| BeamHypothesis {
                prefix: prefix.clone(),
                log_p_blank: neg_inf,
                log_p_nonblank: neg_inf,
                lm_score,
            });
            e.log_p_blank = log_add(e.log_p_blank, blank);
            e.log_p_nonblank = log_add(e.log_p_nonblank, nonblank);
        };
        for h in &hyps {
            let total = h.acoustic();
            let last = h.prefix.last().copied();
            let lm_row = match lm {
                Some(model) => {
                    if !lm_cache.contains_key(&h.prefix) {
                        let row = model.next_token_logprobs(&h.prefix)?;
                        lm_cache.insert(h.prefix.clone(), row);
                    }
                    Some(&lm_cache[&h.prefix])
                }
                None => None,
            };
            for k in 0..vocab {
                let p = logp.get(t, k);
                if p == neg_inf {
                    continue;
                }
                if k == BLANK {
                    add(&h.prefix, h.lm_score, total + p, neg_inf);
                    continue;
                }
                let mut extended = h.prefix.clone();
                extended.push(k);
                let ext_lm = h.lm_score + lm_row.map_or(0.0, |row| row[k]);
                if Some(k) == last {
                    // a repeat only extends when a blank separated it
                    add(&extended, ext_lm, neg_inf, h.log_p_blank + p);
                    add(&h.prefix, h.lm_score, neg_inf, h.log_p_nonblank + p);
                } else {
                    add(&extended, ext_lm, neg_inf, total + p);
                }
            }
        }
        let mut merged: Vec<BeamHypothesis> = next.into_values().collect();
        merged.sort_by(|a, b| rank(a.total(lm_weight), &a.prefix, b.total(lm_weight), &b.prefix));
        merged.truncate(beam);
        hyps = merged;
    }

    Ok(hyps
        .into_iter()
        .map(|h| ScoredTranscript {
            score: h.total(lm_weight),
            tokens: h.prefix,
        })
        .collect())
}

/// Re-ranks an n-best list by `gamma·ctc + (1−gamma)·att` (stable).
pub fn joint_rescore<F>(nbest: &[ScoredTranscript], mut att_scorer: F, gamma: f64) -> Result<Vec<ScoredTranscript>>
where
    F: FnMut(&[Token]) -> Result<f64>,
{
    if !(0.0..=1.0).contains(&gamma) {
        return Err(contract(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if nbest.is_empty() {
        return Err(contract("joint rescoring needs a non-empty n-best list"));
    }
    let mut out = Vec::with_capacity(nbest.len());
    for cand in nbest {
        let att = att_scorer(&cand.tokens)?;
        out.push(ScoredTranscript {
            tokens: cand.tokens.clone(),
            score: gamma * cand.score + (1.0 - gamma) * att,
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(m: usize, v: usize) -> Tensor {
        Tensor::full(&[m, v], -(v as f64).ln())
    }

    #[test]
    fn single_frame_single_token() {
        let (loss, _) = ctc_forward_backward(&uniform(1, 2), &[1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        // a·a, a·blank, blank·a out of four equiprobable paths
        let (loss, _) = ctc_forward_backward(&uniform(2, 2), &[1]).unwrap();
        assert!((loss + (0.75f64).ln()).abs() < 1e-12);
        assert!((loss - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn repeat_needs_blank_frame() {
        let err = ctc_forward_backward(&uniform(1, 2), &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAlignment { repeats: 1, .. }));
    }

    #[test]
    fn blank_in_target_is_rejected() {
        assert!(ctc_forward_backward(&uniform(3, 3), &[0]).is_err());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let (loss, _) = ctc_forward_backward(&uniform(3, 2), &[]).unwrap();
        assert!((loss - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    fn peaked(path: &[usize], v: usize) -> LogProbMatrix {
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&k| (0..v).map(|j| if j == k { 0.0 } else { -10.0 }).collect())
            .collect();
        LogProbMatrix::from_logits(&Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_decode(&peaked(&[1, 1, 0, 2], 3)), vec![1, 2]);
        assert_eq!(greedy_decode(&peaked(&[0, 0, 0], 3)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&peaked(&[1, 0, 1], 3)), vec![1, 1]);
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let lp = LogProbMatrix::new(uniform(2, 3)).unwrap();
        assert!(greedy_decode(&lp).is_empty());
    }

    #[test]
    fn beam_rejects_zero_and_missing_lm() {
        let lp = peaked(&[1], 3);
        assert!(prefix_beam_search(&lp, 0, None, 0.0).is_err());
        assert!(prefix_beam_search(&lp, 2, None, 0.3).is_err());
    }

    #[test]
    fn joint_rescore_examples() {
        let nbest = vec![
            ScoredTranscript { tokens: vec![1], score: -1.0 },
            ScoredTranscript { tokens: vec![2], score: -2.0 },
        ];
        let att = |t: &[Token]| Ok(if t == [1] { -3.0 } else { -1.0 });
        let mixed = joint_rescore(&nbest, att, 0.5).unwrap();
        assert_eq!(mixed[0].tokens, vec![2]);
        assert!((mixed[0].score + 1.5).abs() < 1e-12);
        assert!((mixed[1].score + 2.0).abs() < 1e-12);

        let ctc_only = joint_rescore(&nbest, att, 1.0).unwrap();
        assert_eq!(ctc_only[0].tokens, vec![1]);
        let att_only = joint_rescore(&nbest, att, 0.0).unwrap();
        assert_eq!(att_only[0].tokens, vec![2]);
        assert!(joint_rescore(&nbest, att, 1.5).is_err());
    }

    #[test]
    fn log_prob_matrix_validates_rows() {
        assert!(LogProbMatrix::new(Tensor::zeros(&[2, 3])).is_err());
        assert!(LogProbMatrix::new(uniform(2, 3)).is_ok());
    }
}
