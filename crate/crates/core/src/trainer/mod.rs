//! Training and evaluation of the four model variants.
//!
//! Batch items are processed on a worker pool (size capped by the
//! `CTKT_THREADS` environment variable), each on its own graph; gradients are
//! summed in item order afterwards, so results do not depend on the number of
//! workers.

pub mod optim;

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    cif_fire, cif_weights, mha_cross, positional_queries, scale_weights, AttentionParams, FireTerm,
};
use crate::ctc::{
    ctc_loss, greedy_decode, joint_rescore, prefix_beam_search, LanguageModel, LogProbMatrix, Token,
};
use crate::error::{contract, Result};
use crate::losses::{aux_loss, cross_entropy, mtl_combine, LossConfig, LossReport, LossSummary};
use crate::model::{
    apply_linear, ctc_log_probs, encode, init_params, Dropout, ModelConfig, Variant, CIF_FC, CL_ATT, CL_CLS,
    CTC_FC, RL_ATT,
};
use crate::params::{Bound, ParamSet};
use crate::rng::stream;
use crate::synthdata::{Corpus, Utterance};
use crate::teacher::{Directionality, TeacherLM};
use crate::tensor::{Graph, Tensor, Var};

use optim::{adam_step, lr_schedule, AdamState};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CTKT_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub patience: usize,
    pub average_last: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub variant: Variant,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            base_lr: 0.1,
            warmup: 500,
            patience: 3,
            average_last: 10,
            seed: 1,
            loss: LossConfig::default(),
            variant: Variant::Vanilla,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(contract("epochs and batch_size must be positive"));
        }
        if self.warmup < 1 || self.patience < 1 || self.average_last < 1 {
            return Err(contract("warmup, patience and average_last must be at least 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(contract(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| crate::Error::Internal(format!("worker pool: {e}")))
}

/// Frozen per-utterance teacher output used as the auxiliary target: context
/// embeddings `E` for representation distillation, history embeddings `G`
/// for joint classification, nothing for vanilla CTC.
pub fn teacher_target(
    variant: Variant,
    teacher: Option<&TeacherLM>,
    model: &ModelConfig,
    transcript: &[Token],
) -> Result<Option<Tensor>> {
    if variant == Variant::Vanilla {
        return Ok(None);
    }
    let teacher = teacher.ok_or_else(|| contract(format!("variant {variant} needs a teacher")))?;
    check_teacher(variant, teacher, model)?;
    Ok(Some(match variant {
        Variant::KtCl => teacher.embed_history(transcript)?,
        _ => teacher.embed(transcript)?,
    }))
}

/// Joint classification needs a causal teacher; every teacher must match
/// the student width.
pub fn check_teacher(variant: Variant, teacher: &TeacherLM, model: &ModelConfig) -> Result<()> {
    if teacher.config().d_model != model.d_model {
        return Err(contract(format!(
            "teacher width {} differs from model width {}",
            teacher.config().d_model,
            model.d_model
        )));
    }
    if variant == Variant::KtCl && teacher.directionality() != Directionality::Unidirectional {
        return Err(contract("joint classification needs a unidirectional teacher"));
    }
    Ok(())
}

/// Graph handles and scalars of one variant forward pass.
pub struct Forward {
    pub loss: Var,
    pub report: LossReport,
    /// Fire terms of the integrate-and-fire alignment (KT-RL-CIF only).
    pub cif_terms: Option<Vec<FireTerm>>,
    /// Linguistic representations `L` (KT-RL variants) or classifier logits `O·W` (KT-CL).
    pub head_output: Option<Var>,
}

/// Builds the training objective for one utterance on `g`, given its
/// precomputed teacher target.
#[allow(clippy::too_many_arguments)]
pub fn forward_with_target(
    g: &mut Graph,
    bound: &Bound,
    model: &ModelConfig,
    variant: Variant,
    loss_cfg: &LossConfig,
    utt: &Utterance,
    target: Option<&Tensor>,
    dropout: Option<&mut Dropout>,
) -> Result<Forward> {
    let h = encode(g, bound, model, &utt.frames, dropout)?;
    let logp = ctc_log_probs(g, bound, h)?;
    let l_ctc = ctc_loss(g, logp, &utt.transcript)?;
    let ctc_value = g.value(l_ctc).item();
    let n = utt.transcript.len();
    if variant == Variant::Vanilla {
        return Ok(Forward {
            loss: l_ctc,
            report: LossReport { l_ctc: ctc_value, l_aux: None, l_ce: None, l_mtl: ctc_value },
            cif_terms: None,
            head_output: None,
        });
    }
    let target = target.ok_or_else(|| contract(format!("variant {variant} needs a teacher target")))?;
    if target.shape() != [n, model.d_model] {
        return Err(crate::Error::Dimension {
            op: "teacher target",
            lhs: target.shape().to_vec(),
            rhs: vec![n, model.d_model],
        });
    }
    let target = g.constant(target.clone());
    let shape = model.attention_shape();
    let mut cif_terms = None;
    let (head, main, weight, is_ce) = match variant {
        Variant::KtRlCif => {
            let fc_w = bound.var(&format!("{CIF_FC}.w"))?;
            let fc_b = bound.var(&format!("{CIF_FC}.b"))?;
            let w = cif_weights(g, h, fc_w, fc_b)?;
            let w_hat = scale_weights(g, w, n)?;
            let fired = cif_fire(g, w_hat, h, n)?;
            cif_terms = Some(fired.terms);
            let aux = aux_loss(g, loss_cfg.aux_kind, fired.repr, target, loss_cfg.k)?;
            (fired.repr, aux, loss_cfg.lambda, false)
        }
        Variant::KtRlAtt => {
            let q = g.constant(positional_queries(n, model.d_model)?);
            let att = AttentionParams::bind(bound, RL_ATT, shape)?;
            let l = mha_cross(g, q, h, &att, None)?.out;
            let aux = aux_loss(g, loss_cfg.aux_kind, l, target, loss_cfg.k)?;
            (l, aux, loss_cfg.lambda, false)
        }
        Variant::KtCl => {
            let att = AttentionParams::bind(bound, CL_ATT, shape)?;
            let o = mha_cross(g, target, h, &att, None)?.out;
            let logits = apply_linear(g, bound, CL_CLS, o)?;
            let ce = cross_entropy(g, logits, &utt.transcript)?;
            (logits, ce, loss_cfg.beta, true)
        }
        Variant::Vanilla => unreachable!("handled above"),
    };
    let aux_value = g.value(main).item();
    let loss = mtl_combine(g, l_ctc, main, weight)?;
    let total = g.value(loss).item();
    Ok(Forward {
        loss,
        report: LossReport {
            l_ctc: ctc_value,
            l_aux: (!is_ce).then_some(aux_value),
            l_ce: is_ce.then_some(aux_value),
            l_mtl: total,
        },
        cif_terms,
        head_output: Some(head),
    })
}

/// Loss report of one utterance without dropout and without gradients.
pub fn forward_variant(
    params: &ParamSet,
    model: &ModelConfig,
    utt: &Utterance,
    variant: Variant,
    teacher: Option<&TeacherLM>,
    loss_cfg: &LossConfig,
) -> Result<LossReport> {
    let target = teacher_target(variant, teacher, model, &utt.transcript)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    Ok(forward_with_target(&mut g, &bound, model, variant, loss_cfg, utt, target.as_ref(), None)?.report)
}

struct ItemResult {
    report: LossReport,
    grads: Vec<Tensor>,
    forward: Duration,
    backward: Duration,
}

/// Forward/backward time and loss of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTiming {
    pub forward_secs: f64,
    pub backward_secs: f64,
}

impl IterationTiming {
    pub fn total(&self) -> f64 {
        self.forward_secs + self.backward_secs
    }
}

/// Mutable training state shared by the epoch loop and the timing benchmark.
struct Session<'a> {
    cfg: &'a TrainConfig,
    train: &'a [Utterance],
    targets: Vec<Option<Tensor>>,
    params: ParamSet,
    adam: AdamState,
    pool: rayon::ThreadPool,
}

impl<'a> Session<'a> {
    fn new(cfg: &'a TrainConfig, train: &'a [Utterance], teacher: Option<&TeacherLM>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(contract("training split is empty"));
        }
        let pool = worker_pool()?;
        let targets = pool.install(|| {
            train
                .par_iter()
                .map(|u| teacher_target(cfg.variant, teacher, &cfg.model, &u.transcript))
                .collect::<Result<Vec<_>>>()
        })?;
        let params = init_params(&cfg.model, cfg.variant, cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self { cfg, train, targets, params, adam, pool })
    }

    fn item(&self, index: usize, epoch: usize, step: u64) -> Result<ItemResult> {
        let utt = &self.train[index];
        let start = Instant::now();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let mut dropout = (self.cfg.model.dropout > 0.0)
            .then(|| Dropout::new(self.cfg.model.dropout, self.cfg.seed, &[0xd509, epoch as u64, step, index as u64]));
        let fwd = forward_with_target(
            &mut g,
            &bound,
            &self.cfg.model,
            self.cfg.variant,
            &self.cfg.loss,
            utt,
            self.targets[index].as_ref(),
            dropout.as_mut(),
        )?;
        let forward = start.elapsed();
        let start = Instant::now();
        g.backward(fwd.loss)?;
        let grads = bound
            .vars()
            .iter()
            .zip(self.params.iter())
            .map(|(v, (_, p))| g.take_grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let backward = start.elapsed();
        Ok(ItemResult { report: fwd.report, grads, forward, backward })
    }

    /// One optimizer step on the mean loss of `items`.
    fn step(&mut self, items: &[usize], epoch: usize) -> Result<(Vec<LossReport>, IterationTiming)> {
        let step = self.adam.step() + 1;
        let results = {
            let this = &*self;
            this.pool
                .install(|| items.par_iter().map(|&i| this.item(i, epoch, step)).collect::<Result<Vec<_>>>())?
        };
        let scale = 1.0 / items.len() as f64;
        let mut sum: Vec<Tensor> = self.params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        let mut timing = IterationTiming::default();
        let mut reports = Vec::with_capacity(items.len());
        for r in results {
            for (acc, g) in sum.iter_mut().zip(&r.grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            timing.forward_secs += r.forward.as_secs_f64();
            timing.backward_secs += r.backward.as_secs_f64();
            reports.push(r.report);
        }
        let grads: Vec<Option<Tensor>> = sum
            .into_iter()
            .map(|mut t| {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
                Some(t)
            })
            .collect();
        let lr = lr_schedule(step, self.cfg.base_lr, self.cfg.warmup)?;
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        Ok((reports, timing))
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[0x0de5, epoch as u64]));
        order
    }
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub variant: Variant,
    pub seed: u64,
    pub train: LossSummary,
    pub dev_cer: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Mean per-iteration forward time (summed over batch items), seconds.
    pub forward_secs_per_iter: f64,
    pub backward_secs_per_iter: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// The record with all wall-clock measurements zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            forward_secs_per_iter: 0.0,
            backward_secs_per_iter: 0.0,
            wall_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Stops once the monitored error has failed to improve for more than
/// `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, bad: 0 }
    }

    /// Records one epoch's error; returns `true` when training should stop.
    pub fn observe(&mut self, error: f64) -> bool {
        if error < self.best {
            self.best = error;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad > self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

pub struct TrainOutcome {
    /// Parameter-wise mean of the last `average_last` epoch checkpoints.
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// 1-based epochs that entered the average.
    pub averaged_epochs: Vec<usize>,
}

/// Full recipe: shuffled mini-batches, warmup/decay Adam, greedy dev CER
/// after each epoch, early stopping, and checkpoint averaging. `on_epoch`
/// sees every epoch's record and parameters (e.g. to persist them).
pub fn train_experiment<F>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    teacher: Option<&TeacherLM>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ParamSet) -> Result<()>,
{
    if corpus.dev.is_empty() {
        return Err(contract("dev split is empty"));
    }
    let mut session = Session::new(cfg, &corpus.train, teacher)?;
    let mut history = Vec::new();
    let mut recent: VecDeque<(usize, ParamSet)> = VecDeque::new();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = session.epoch_order(epoch);
        let mut reports = Vec::with_capacity(order.len());
        let mut timing = IterationTiming::default();
        let mut iterations = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (r, t) = session.step(batch, epoch)?;
            reports.extend(r);
            timing.forward_secs += t.forward_secs;
            timing.backward_secs += t.backward_secs;
            iterations += 1;
        }
        let ctx = EvalContext { params: &session.params, model: &cfg.model, lm: None, cl_teacher: None };
        let dev = evaluate_in(&session.pool, &ctx, &corpus.dev, DecodeMode::Greedy)?;
        let record = EpochRecord {
            epoch,
            variant: cfg.variant,
            seed: cfg.seed,
            train: LossSummary::from_reports(&reports),
            dev_cer: dev.cer,
            lr: lr_schedule(session.adam.step().max(1), cfg.base_lr, cfg.warmup)?,
            iterations,
            forward_secs_per_iter: timing.forward_secs / iterations as f64,
            backward_secs_per_iter: timing.backward_secs / iterations as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &session.params)?;
        history.push(record);
        recent.push_back((epoch, session.params.clone()));
        if recent.len() > cfg.average_last {
            recent.pop_front();
        }
        if stopper.observe(dev.cer) {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let (averaged_epochs, sets): (Vec<usize>, Vec<ParamSet>) = recent.into_iter().unzip();
    Ok(TrainOutcome {
        params: ParamSet::average(&sets)?,
        history,
        stopped_early,
        averaged_epochs,
    })
}

/// Runs `iterations` real optimizer steps (cycling through the training
/// data) and returns the per-iteration forward/backward timings.
pub fn benchmark_iterations(
    cfg: &TrainConfig,
    train: &[Utterance],
    teacher: Option<&TeacherLM>,
    iterations: usize,
) -> Result<Vec<IterationTiming>> {
    let mut session = Session::new(cfg, train, teacher)?;
    let mut out = Vec::with_capacity(iterations);
    let mut epoch = 1;
    while out.len() < iterations {
        let order = session.epoch_order(epoch);
        for batch in order.chunks(cfg.batch_size) {
            if out.len() == iterations {
                break;
            }
            out.push(session.step(batch, epoch)?.1);
        }
        epoch += 1;
    }
    Ok(out)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(hyp: &[Token], reference: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance over reference length; may exceed 1.
pub fn cer(hyp: &[Token], reference: &[Token]) -> Result<f64> {
    if reference.is_empty() {
        return Err(contract("CER needs a non-empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam { size: usize, lm_weight: f64 },
    /// Beam search followed by rescoring with the joint-classification head.
    Joint { size: usize, lm_weight: f64, gamma: f64 },
}

/// Read-only inputs of decoding.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub params: &'a ParamSet,
    pub model: &'a ModelConfig,
    /// Causal teacher used for shallow fusion.
    pub lm: Option<&'a TeacherLM>,
    /// Causal teacher feeding the joint-classification head.
    pub cl_teacher: Option<&'a TeacherLM>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttResult {
    pub id: String,
    pub hyp: Vec<Token>,
    pub reference: Vec<Token>,
    pub errors: usize,
    pub cer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Total edit distance over total reference length.
    pub cer: f64,
    pub errors: usize,
    pub ref_tokens: usize,
    pub utterances: Vec<UttResult>,
}

/// CTC log-probabilities of one utterance plus its encoder output.
pub fn infer(params: &ParamSet, model: &ModelConfig, frames: &Tensor) -> Result<(LogProbMatrix, Tensor)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let h = encode(&mut g, &bound, model, frames, None)?;
    let logp = ctc_log_probs(&mut g, &bound, h)?;
    Ok((LogProbMatrix::new(g.value(logp).clone())?, g.value(h).clone()))
}

/// `Σ_n log softmax(cls(o_n))[y_n]` of the joint-classification head for a
/// candidate transcript, given encoder output `h`. An empty candidate scores 0.
pub fn classifier_score(
    params: &ParamSet,
    model: &ModelConfig,
    teacher: &TeacherLM,
    h: &Tensor,
    tokens: &[Token],
) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    check_teacher(Variant::KtCl, teacher, model)?;
    let history = teacher.embed_history(tokens)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let q = g.constant(history);
    let kv = g.constant(h.clone());
    let att = AttentionParams::bind(&bound, CL_ATT, model.attention_shape())?;
    let o = mha_cross(&mut g, q, kv, &att, None)?.out;
    let logits = apply_linear(&mut g, &bound, CL_CLS, o)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_per_row(logp, tokens)?;
    Ok(g.value(picked).data().iter().sum())
}

fn decode_one(ctx: &EvalContext, utt: &Utterance, mode: DecodeMode) -> Result<UttResult> {
    let (logp, h) = infer(ctx.params, ctx.model, &utt.frames)?;
    let lm = ctx.lm.map(|t| t as &dyn LanguageModel);
    let hyp = match mode {
        DecodeMode::Greedy => greedy_decode(&logp),
        DecodeMode::Beam { size, lm_weight } => prefix_beam_search(&logp, size, lm, lm_weight)?
            .into_iter()
            .next()
            .map(|s| s.tokens)
            .unwrap_or_default(),
        DecodeMode::Joint { size, lm_weight, gamma } => {
            let teacher = ctx
                .cl_teacher
                .ok_or_else(|| contract("joint decoding needs the classification teacher"))?;
            let nbest = prefix_beam_search(&logp, size, lm, lm_weight)?;
            joint_rescore(&nbest, |y| classifier_score(ctx.params, ctx.model, teacher, &h, y), gamma)?
                .into_iter()
                .next()
                .map(|s| s.tokens)
                .unwrap_or_default()
        }
    };
    let errors = edit_distance(&hyp, &utt.transcript);
    Ok(UttResult {
        id: utt.id.clone(),
        cer: cer(&hyp, &utt.transcript)?,
        hyp,
        reference: utt.transcript.clone(),
        errors,
    })
}

fn evaluate_in(pool: &rayon::ThreadPool, ctx: &EvalContext, utts: &[Utterance], mode: DecodeMode) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(contract("cannot evaluate an empty split"));
    }
    if let DecodeMode::Joint { .. } = mode {
        if ctx.params.get(&format!("{CL_CLS}.w")).is_none() {
            return Err(contract("joint decoding needs a model with the joint-classification head"));
        }
    }
    if ctx.params.get(&format!("{CTC_FC}.w")).is_none() {
        return Err(contract("parameters lack the CTC classifier"));
    }
    let utterances = pool.install(|| utts.par_iter().map(|u| decode_one(ctx, u, mode)).collect::<Result<Vec<_>>>())?;
    let errors = utterances.iter().map(|u| u.errors).sum();
    let ref_tokens: usize = utterances.iter().map(|u| u.reference.len()).sum();
    Ok(EvalReport {
        cer: errors as f64 / ref_tokens as f64,
        errors,
        ref_tokens,
        utterances,
    })
}

/// Decodes every utterance and scores it against its transcript.
pub fn evaluate(ctx: &EvalContext, utts: &[Utterance], mode: DecodeMode) -> Result<EvalReport> {
    evaluate_in(&worker_pool()?, ctx, utts, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((cer(&[1, 9, 3], &[1, 2, 3]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[1, 3]), 2);
        assert_eq!(cer(&[1, 2, 3, 4], &[1, 3]).unwrap(), 1.0);
        assert!(cer(&[1], &[]).is_err());
        assert_eq!(cer(&[5, 5, 5, 5], &[1]).unwrap(), 4.0);
    }

    #[test]
    fn patience_one_stops_on_second_bad_epoch() {
        let mut s = EarlyStopper::new(1);
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.6));
        assert!(s.observe(0.7));
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = EarlyStopper::new(2);
        for (e, stop) in [(0.5, false), (0.6, false), (0.4, false), (0.4, false), (0.45, false), (0.5, true)] {
            assert_eq!(s.observe(e), stop);
        }
        assert_eq!(s.best(), 0.4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { warmup: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
