//! Self-check suites: brute-force CTC oracle, finite-difference gradients,
//! integrate-and-fire invariants, causal masking, and decoder equivalences.
//! Every case draws from a stream derived from `(seed, suite, case)`, so a
//! reported failure can be replayed exactly.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{cif_fire, cif_weights, mha_cross, scale_weights, subsequent_mask, AttentionParams, AttentionShape};
use crate::ctc::{
    check_feasible, collapse, ctc_forward_backward, ctc_loss, ctc_loss_with_flipped_gradient, greedy_decode,
    prefix_beam_search, LanguageModel, LogProbMatrix, Token, Transcript,
};
use crate::error::Result;
use crate::gradcheck::check_gradients;
use crate::losses::{cosine_embedding_loss, cross_entropy, mse_aux_loss, LossConfig};
use crate::model::{encode, init_params, ModelConfig, Variant, CIF_FC};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream};
use crate::synthdata::Utterance;
use crate::teacher::{build_teacher, Directionality, TeacherConfig, TeacherLM};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{forward_with_target, teacher_target};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
/// Cases whose cumulative CIF weight lies this close to an integer are
/// skipped by the gradient suite: the fire split is only piecewise smooth.
pub const FIRE_BOUNDARY_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Swap the CTC backward for one with a flipped sign (fault-injection check).
    pub inject_ctc_sign_error: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub case: String,
    /// Seed of the failing case's random stream.
    pub case_seed: u64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub secs: f64,
    pub first_failure: Option<Failure>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.total && self.first_failure.is_none()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::ok)
    }
}

struct Tally {
    name: &'static str,
    suite_id: u64,
    base: u64,
    passed: usize,
    total: usize,
    first_failure: Option<Failure>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str, suite_id: u64, base: u64) -> Self {
        Self { name, suite_id, base, passed: 0, total: 0, first_failure: None, start: Instant::now() }
    }

    fn seed(&self, case: u64) -> u64 {
        derive_seed(self.base, &[self.suite_id, case])
    }

    fn rng(&self, case: u64) -> ChaCha8Rng {
        stream(self.base, &[self.suite_id, case])
    }

    /// Records one case; errors raised by the case count as failures.
    fn record(&mut self, case: String, case_no: u64, outcome: Result<std::result::Result<(), String>>) {
        self.total += 1;
        let detail = match outcome {
            Ok(Ok(())) => {
                self.passed += 1;
                return;
            }
            Ok(Err(d)) => d,
            Err(e) => format!("error: {e}"),
        };
        if self.first_failure.is_none() {
            self.first_failure = Some(Failure { case, case_seed: self.seed(case_no), detail });
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name,
            passed: self.passed,
            total: self.total,
            secs: self.start.elapsed().as_secs_f64(),
            first_failure: self.first_failure,
        }
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Row-normalized random log-probabilities.
pub fn random_log_probs(rng: &mut impl Rng, frames: usize, vocab: usize) -> Tensor {
    let logits = random_matrix(rng, frames, vocab, 3.0);
    LogProbMatrix::from_logits(&logits).expect("finite logits").tensor().clone()
}

/// Visits every length-`frames` path over `vocab` symbols with its log-probability.
pub fn for_each_path(logp: &Tensor, mut f: impl FnMut(&[Token], f64)) {
    let (frames, vocab) = (logp.shape()[0], logp.shape()[1]);
    let mut path = vec![0; frames];
    loop {
        let score: f64 = path.iter().enumerate().map(|(t, &k)| logp.get(t, k)).sum();
        f(&path, score);
        let mut i = 0;
        loop {
            if i == frames {
                return;
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// `p(target | logp)` by explicit enumeration of all paths.
pub fn brute_force_ctc_prob(logp: &Tensor, target: &[Token]) -> f64 {
    let mut p = 0.0;
    for_each_path(logp, |path, score| {
        if collapse(path) == target {
            p += score.exp();
        }
    });
    p
}

/// Posterior probability of every transcript reachable in `frames` steps.
pub fn exhaustive_posteriors(logp: &Tensor) -> BTreeMap<Transcript, f64> {
    let mut out = BTreeMap::new();
    for_each_path(logp, |path, score| {
        *out.entry(collapse(path)).or_insert(0.0) += score.exp();
    });
    out
}

fn random_target(rng: &mut impl Rng, max_len: usize, labels: usize) -> Transcript {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| rng.gen_range(1..=labels)).collect()
}

pub fn ctc_oracle_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut t = Tally::new("ctc-oracle", 1, opts.seed);
    for case in 0..200u64 {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=4);
        let target = random_target(&mut rng, 3, vocab - 1);
        let logp = random_log_probs(&mut rng, frames, vocab);
        let outcome = (|| {
            let brute = brute_force_ctc_prob(&logp, &target);
            if check_feasible(frames, &target).is_err() {
                return Ok(if brute == 0.0 && ctc_forward_backward(&logp, &target).is_err() {
                    Ok(())
                } else {
                    Err(format!("infeasible target {target:?} handled wrongly (brute p = {brute})"))
                });
            }
            let (loss, _) = ctc_forward_backward(&logp, &target)?;
            let diff = (loss + brute.ln()).abs();
            Ok(if diff <= 1e-9 { Ok(()) } else { Err(format!("loss {loss} vs brute {} (Δ {diff:e})", -brute.ln())) })
        })();
        t.record(format!("loss M={frames} V={vocab} y={target:?}"), case, outcome);
    }
    for case in 200..220u64 {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(1..=5);
        let vocab = rng.gen_range(2..=4);
        let logp = random_log_probs(&mut rng, frames, vocab);
        let outcome = (|| {
            let mut total = 0.0;
            for y in exhaustive_posteriors(&logp).keys() {
                total += if y.is_empty() {
                    (0..frames).map(|f| logp.get(f, 0)).sum::<f64>().exp()
                } else {
                    (-ctc_forward_backward(&logp, y)?.0).exp()
                };
            }
            Ok(if (total - 1.0).abs() <= 1e-6 { Ok(()) } else { Err(format!("total probability {total}")) })
        })();
        t.record(format!("conservation M={frames} V={vocab}"), case, outcome);
    }
    t.finish()
}

fn grad_outcome(report: Result<crate::gradcheck::GradCheckReport>) -> Result<std::result::Result<(), String>> {
    let r = report?;
    Ok(if r.max_rel_err <= GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(format!(
            "rel err {:e} at input {} element {} (analytic {}, numeric {})",
            r.max_rel_err, r.worst.0, r.worst.1, r.analytic, r.numeric
        ))
    })
}

/// Reduces any tensor to a scalar through a fixed random projection.
fn project(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Distance of the closest cumulative weight to an interior integer.
pub fn fire_boundary_distance(w_hat: &[f64]) -> f64 {
    let total: f64 = w_hat.iter().sum();
    let mut acc = 0.0;
    let mut best = f64::INFINITY;
    for &w in w_hat {
        acc += w;
        let nearest = acc.round();
        if nearest >= 1.0 && nearest < total.round() {
            best = best.min((acc - nearest).abs());
        }
    }
    best
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig { d_in: 3, d_model: 4, heads: 2, enc_layers: 1, d_ff: 6, classes: 4, dropout: 0.0 }
}

pub fn tiny_teacher(directionality: Directionality, seed: u64) -> Result<TeacherLM> {
    build_teacher(TeacherConfig { vocab_size: 4, d_model: 4, layers: 2, heads: 2, directionality, seed })
}

fn tiny_utterance(rng: &mut impl Rng, frames: usize, tokens: usize) -> Result<Utterance> {
    Ok(Utterance {
        id: "case".into(),
        frames: random_matrix(rng, frames, 3, 1.0),
        transcript: (0..tokens).map(|_| rng.gen_range(1..=3)).collect(),
    })
}

fn cif_margin(params: &ParamSet, cfg: &ModelConfig, utt: &Utterance) -> Result<f64> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let h = encode(&mut g, &b, cfg, &utt.frames, None)?;
    let w = cif_weights(&mut g, h, b.var(&format!("{CIF_FC}.w"))?, b.var(&format!("{CIF_FC}.b"))?)?;
    let w_hat = scale_weights(&mut g, w, utt.transcript.len())?;
    Ok(fire_boundary_distance(g.value(w_hat).data()))
}

pub fn gradient_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut t = Tally::new("finite-difference", 2, opts.seed);
    let flip = opts.inject_ctc_sign_error;
    const SEEDS: u64 = 20;

    for case in 0..SEEDS {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(3..=6);
        let vocab = rng.gen_range(3..=4);
        let target = random_target(&mut rng, frames / 2, vocab - 1);
        let logits = random_matrix(&mut rng, frames, vocab, 2.0);
        let out = grad_outcome(check_gradients(&[logits], GRAD_STEP, |g, v| {
            let logp = g.log_softmax(v[0])?;
            if flip {
                ctc_loss_with_flipped_gradient(g, logp, &target)
            } else {
                ctc_loss(g, logp, &target)
            }
        }));
        t.record(format!("ctc y={target:?}"), case, out);
    }

    for case in SEEDS..2 * SEEDS {
        let mut rng = t.rng(case);
        let (n, d) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let l = random_matrix(&mut rng, n, d, 1.0);
        let e = random_matrix(&mut rng, n, d, 1.0);
        let out = grad_outcome(check_gradients(&[l.clone(), e.clone()], GRAD_STEP, |g, v| {
            cosine_embedding_loss(g, v[0], v[1], 20.0)
        }));
        t.record("cosine".into(), case, out);
        let out = grad_outcome(check_gradients(&[l, e], GRAD_STEP, |g, v| mse_aux_loss(g, v[0], v[1])));
        t.record("mse".into(), case, out);
    }

    for case in 2 * SEEDS..3 * SEEDS {
        let mut rng = t.rng(case);
        let (n, c) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let logits = random_matrix(&mut rng, n, c, 2.0);
        let target: Vec<Token> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let out = grad_outcome(check_gradients(&[logits], GRAD_STEP, |g, v| cross_entropy(g, v[0], &target)));
        t.record("cross-entropy".into(), case, out);
    }

    for case in 3 * SEEDS..4 * SEEDS {
        let mut rng = t.rng(case);
        let shape = AttentionShape::new(4, 2).expect("valid shape");
        let lq = rng.gen_range(1..=4);
        let masked = case % 2 == 0;
        let lk = if masked { lq } else { rng.gen_range(1..=5) };
        let inputs = vec![
            random_matrix(&mut rng, lq, 4, 1.0),
            random_matrix(&mut rng, lk, 4, 1.0),
            random_matrix(&mut rng, 4, 4, 0.8),
            random_matrix(&mut rng, 4, 4, 0.8),
            random_matrix(&mut rng, 4, 4, 0.8),
            random_matrix(&mut rng, 4, 4, 0.8),
        ];
        let proj = random_matrix(&mut rng, lq, 4, 1.0);
        let mask = if masked { subsequent_mask(lq).ok() } else { None };
        let out = grad_outcome(check_gradients(&inputs, GRAD_STEP, |g, v| {
            let att = AttentionParams { wq: v[2], wk: v[3], wv: v[4], wo: v[5], shape };
            let o = mha_cross(g, v[0], v[1], &att, mask.as_ref())?.out;
            project(g, o, &proj)
        }));
        t.record(format!("mha_cross masked={masked}"), case, out);
    }

    let mut case = 4 * SEEDS;
    let mut cif_cases = 0;
    while cif_cases < SEEDS {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(2..=7);
        let n = rng.gen_range(1..=frames);
        let inputs = vec![
            random_matrix(&mut rng, frames, 3, 1.0),
            random_matrix(&mut rng, 3, 4, 1.0),
            random_matrix(&mut rng, 1, 4, 0.5).reshaped(vec![4]).expect("same size"),
        ];
        let proj = random_matrix(&mut rng, n, 3, 1.0);
        let margin = {
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
            cif_weights(&mut g, v[0], v[1], v[2])
                .and_then(|w| scale_weights(&mut g, w, n))
                .map(|w| fire_boundary_distance(g.value(w).data()))
                .unwrap_or(0.0)
        };
        if margin > FIRE_BOUNDARY_MARGIN {
            let out = grad_outcome(check_gradients(&inputs, GRAD_STEP, |g, v| {
                let w = cif_weights(g, v[0], v[1], v[2])?;
                let w_hat = scale_weights(g, w, n)?;
                let fired = cif_fire(g, w_hat, v[0], n)?;
                project(g, fired.repr, &proj)
            }));
            t.record(format!("cif M={frames} N={n}"), case, out);
            cif_cases += 1;
        }
        case += 1;
    }

    let cfg = tiny_model();
    for variant in Variant::ALL {
        let mut done = 0;
        let mut case = 1000 * (variant as u64 + 1);
        while done < SEEDS {
            let mut rng = t.rng(case);
            let outcome = (|| -> Result<Option<std::result::Result<(), String>>> {
                let frames = rng.gen_range(4..=7);
                let utt = tiny_utterance(&mut rng, frames, 2)?;
                let params = init_params(&cfg, variant, rng.gen())?;
                if variant == Variant::KtRlCif && cif_margin(&params, &cfg, &utt)? <= FIRE_BOUNDARY_MARGIN {
                    return Ok(None);
                }
                let dir = if variant == Variant::KtCl { Directionality::Unidirectional } else { Directionality::Bidirectional };
                let teacher = tiny_teacher(dir, rng.gen())?;
                let target = teacher_target(variant, Some(&teacher), &cfg, &utt.transcript)?;
                let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
                let loss_cfg = LossConfig::default();
                let report = check_gradients(&inputs, GRAD_STEP, |g, v| {
                    let bound = params.bind_existing(v)?;
                    Ok(forward_with_target(g, &bound, &cfg, variant, &loss_cfg, &utt, target.as_ref(), None)?.loss)
                });
                grad_outcome(report).map(Some)
            })();
            match outcome {
                Ok(None) => {}
                Ok(Some(r)) => {
                    t.record(format!("variant {variant}"), case, Ok(r));
                    done += 1;
                }
                Err(e) => {
                    t.record(format!("variant {variant}"), case, Err(e));
                    done += 1;
                }
            }
            case += 1;
        }
    }
    t.finish()
}

pub fn cif_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut t = Tally::new("cif-invariants", 3, opts.seed);
    for case in 0..500u64 {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(1..=20);
        let n = rng.gen_range(1..=frames.min(8) * 2);
        let w: Vec<f64> = (0..frames).map(|_| rng.gen_range(0.01..1.0)).collect();
        let d = rng.gen_range(1..=4);
        let h = random_matrix(&mut rng, frames, d, 1.0);
        let outcome = (|| {
            let mut g = Graph::new();
            let wv = g.constant(Tensor::vector(w.clone()));
            let hv = g.constant(h.clone());
            let w_hat = scale_weights(&mut g, wv, n)?;
            let w_hat_vals = g.value(w_hat).data().to_vec();
            let sum: f64 = w_hat_vals.iter().sum();
            if (sum - n as f64).abs() > 1e-9 {
                return Ok(Err(format!("Σŵ = {sum}, expected {n}")));
            }
            let out = cif_fire(&mut g, w_hat, hv, n)?;
            let fired = g.value(out.repr).shape()[0];
            if fired != n {
                return Ok(Err(format!("fired {fired} vectors, expected {n}")));
            }
            let coeffs = out.coefficient_matrix(n, frames);
            for (i, row) in coeffs.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|&c| c < 0.0) {
                    return Ok(Err(format!("fire {i} coefficients sum to {s}")));
                }
            }
            for (m, &wm) in w_hat_vals.iter().enumerate() {
                let used: f64 = coeffs.iter().map(|r| r[m]).sum();
                if (used - wm).abs() > 1e-9 {
                    return Ok(Err(format!("frame {m} consumed {used}, weight {wm}")));
                }
            }
            // fired vectors are the coefficient-weighted sums of frames
            let repr = g.value(out.repr);
            for (i, row) in coeffs.iter().enumerate() {
                for j in 0..d {
                    let expect: f64 = row.iter().enumerate().map(|(m, c)| c * h.get(m, j)).sum();
                    if (repr.get(i, j) - expect).abs() > 1e-9 {
                        return Ok(Err(format!("fired vector {i} differs from its coefficients")));
                    }
                }
            }
            Ok(Ok(()))
        })();
        t.record(format!("M={frames} N={n}"), case, outcome);
    }
    t.finish()
}

/// Replaces every token after position `n` with a different one.
fn perturb_future(rng: &mut impl Rng, y: &[Token], n: usize, labels: usize) -> Transcript {
    let mut out = y.to_vec();
    for tok in out.iter_mut().skip(n + 1) {
        let mut new = rng.gen_range(1..=labels);
        while new == *tok {
            new = rng.gen_range(1..=labels);
        }
        *tok = new;
    }
    out
}

fn max_row_diff(a: &Tensor, b: &Tensor, rows: usize) -> f64 {
    (0..rows)
        .flat_map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

pub fn masking_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut t = Tally::new("masking", 4, opts.seed);
    let cfg = tiny_model();
    for case in 0..50u64 {
        let mut rng = t.rng(case);
        let outcome = (|| {
            let len = rng.gen_range(3..=6);
            let n = rng.gen_range(0..len - 1);
            let utt = tiny_utterance(&mut rng, 2 * len + 1, len)?;
            let other = Utterance { transcript: perturb_future(&mut rng, &utt.transcript, n, 3), ..utt.clone() };
            let params = init_params(&cfg, Variant::KtCl, rng.gen())?;
            let teacher = tiny_teacher(Directionality::Unidirectional, rng.gen())?;
            let logits = |u: &Utterance| -> Result<Tensor> {
                let target = teacher_target(Variant::KtCl, Some(&teacher), &cfg, &u.transcript)?;
                let mut g = Graph::new();
                let b = params.bind(&mut g, false);
                let f = forward_with_target(&mut g, &b, &cfg, Variant::KtCl, &LossConfig::default(), u, target.as_ref(), None)?;
                Ok(g.value(f.head_output.expect("classifier head")).clone())
            };
            let diff = max_row_diff(&logits(&utt)?, &logits(&other)?, n + 1);
            Ok(if diff <= 1e-12 { Ok(()) } else { Err(format!("classifier rows ≤ {n} moved by {diff:e}")) })
        })();
        t.record("joint-classifier causal".into(), case, outcome);
    }
    for case in 50..100u64 {
        let mut rng = t.rng(case);
        let outcome = (|| {
            let len = rng.gen_range(3..=6);
            let n = rng.gen_range(0..len - 1);
            let y: Transcript = (0..len).map(|_| rng.gen_range(1..=3)).collect();
            let y2 = perturb_future(&mut rng, &y, n, 3);
            let teacher = tiny_teacher(Directionality::Unidirectional, rng.gen())?;
            let diff = max_row_diff(&teacher.embed(&y)?, &teacher.embed(&y2)?, n + 1);
            Ok(if diff <= 1e-12 { Ok(()) } else { Err(format!("causal teacher rows ≤ {n} moved by {diff:e}")) })
        })();
        t.record("unidirectional teacher".into(), case, outcome);
    }
    for case in 100..150u64 {
        let mut rng = t.rng(case);
        let outcome = (|| {
            let len = rng.gen_range(3..=6);
            let n = rng.gen_range(0..len - 1);
            let y: Transcript = (0..len).map(|_| rng.gen_range(1..=3)).collect();
            let y2 = perturb_future(&mut rng, &y, n, 3);
            let teacher = tiny_teacher(Directionality::Bidirectional, rng.gen())?;
            let diff = max_row_diff(&teacher.embed(&y)?, &teacher.embed(&y2)?, n + 1);
            Ok(if diff > 1e-9 { Ok(()) } else { Err(format!("bidirectional teacher ignored the future (Δ {diff:e})")) })
        })();
        t.record("bidirectional teacher".into(), case, outcome);
    }
    t.finish()
}

/// Log-probabilities dominated by one random symbol per frame.
pub fn peaked_log_probs(rng: &mut impl Rng, frames: usize, vocab: usize) -> Tensor {
    let mut logits = random_matrix(rng, frames, vocab, 0.5);
    for f in 0..frames {
        let k = rng.gen_range(0..vocab);
        logits.data_mut()[f * vocab + k] += 8.0;
    }
    LogProbMatrix::from_logits(&logits).expect("finite").tensor().clone()
}

pub fn decoder_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut t = Tally::new("decoder", 5, opts.seed);
    for case in 0..200u64 {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(1..=4);
        let vocab = rng.gen_range(2..=3);
        let logp = random_log_probs(&mut rng, frames, vocab);
        let outcome = (|| {
            let post = exhaustive_posteriors(&logp);
            let (best, &p) = post
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .expect("at least the empty transcript");
            let top = prefix_beam_search(&LogProbMatrix::new(logp.clone())?, 64, None, 0.0)?;
            let first = &top[0];
            if (first.score - p.ln()).abs() > 1e-9 {
                return Ok(Err(format!("top score {} vs exhaustive {}", first.score, p.ln())));
            }
            let tied = post.get(&first.tokens).is_some_and(|&q| (q - p).abs() <= 1e-12 * p);
            Ok(if &first.tokens == best || tied {
                Ok(())
            } else {
                Err(format!("beam top {:?} vs argmax {best:?}", first.tokens))
            })
        })();
        t.record(format!("exhaustive M={frames} V={vocab}"), case, outcome);
    }
    for case in 200..250u64 {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(1..=12);
        let logp = LogProbMatrix::new(peaked_log_probs(&mut rng, frames, 5)).expect("normalized");
        let outcome = (|| {
            let greedy = greedy_decode(&logp);
            let beam = prefix_beam_search(&logp, 1, None, 0.0)?;
            Ok(if beam[0].tokens == greedy { Ok(()) } else { Err(format!("beam-1 {:?} vs greedy {greedy:?}", beam[0].tokens)) })
        })();
        t.record("beam-1 equals greedy".into(), case, outcome);
    }
    for case in 250..300u64 {
        let mut rng = t.rng(case);
        let frames = rng.gen_range(1..=8);
        let logp = LogProbMatrix::new(random_log_probs(&mut rng, frames, 4)).expect("normalized");
        let outcome = (|| {
            let lm = tiny_teacher(Directionality::Unidirectional, rng.gen())?;
            let with = prefix_beam_search(&logp, 4, Some(&lm as &dyn LanguageModel), 0.0)?;
            let without = prefix_beam_search(&logp, 4, None, 0.0)?;
            Ok(if with == without { Ok(()) } else { Err("lm_weight 0 changed the n-best list".into()) })
        })();
        t.record("lm weight zero".into(), case, outcome);
    }
    t.finish()
}

pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        seed: opts.seed,
        suites: vec![
            ctc_oracle_suite(opts),
            gradient_suite(opts),
            cif_suite(opts),
            masking_suite(opts),
            decoder_suite(opts),
        ],
    }
}
