//! Frozen stand-ins for the pre-trained language models: small seeded
//! transformer stacks over the label vocabulary that yield per-token context
//! embeddings (bidirectional or causal) and, when causal, next-token scores
//! for shallow fusion.
//!
//! Token ids are shared with the student (`0` is the blank slot and never
//! occurs in transcripts). One extra id, `vocab_size`, is the
//! begin-of-sequence token; bidirectional teachers reuse it as the mask token
//! while being fit.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{positional_queries, subsequent_mask, AttentionShape};
use crate::ctc::{LanguageModel, Token, Transcript};
use crate::error::{contract, Error, Result};
use crate::losses::cross_entropy;
use crate::model::{apply_layer_norm, init_layer_norm, init_transformer_layer, transformer_layer};
use crate::params::{Bound, ParamSet};
use crate::rng::{glorot, stream};
use crate::tensor::{logsumexp, Graph, Tensor, Var};
use crate::trainer::optim::{adam_step, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directionality {
    Bidirectional,
    Unidirectional,
}

impl std::str::FromStr for Directionality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(Self::Bidirectional),
            "unidirectional" => Ok(Self::Unidirectional),
            other => Err(Error::Config(format!("unknown directionality {other:?}"))),
        }
    }
}

impl std::fmt::Display for Directionality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bidirectional => "bidirectional",
            Self::Unidirectional => "unidirectional",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Number of token ids, blank slot included.
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub directionality: Directionality,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLM {
    config: TeacherConfig,
    params: ParamSet,
}

const TOKENS: &str = "tok";
const FINAL_NORM: &str = "ln_f";

fn layer_prefix(l: usize) -> String {
    format!("layer.{l}")
}

/// Seeded, deterministic teacher construction.
pub fn build_teacher(config: TeacherConfig) -> Result<TeacherLM> {
    if config.vocab_size == 0 {
        return Err(contract("teacher vocab_size must be positive"));
    }
    let shape = AttentionShape::new(config.d_model, config.heads)?;
    if !config.d_model.is_multiple_of(2) {
        return Err(contract("teacher d_model must be even"));
    }
    let mut rng = stream(config.seed, &[0x7eac_4e12]);
    let mut params = ParamSet::new();
    let rows = config.vocab_size + 1;
    params.insert(TOKENS, glorot(&mut rng, rows, config.d_model))?;
    for l in 0..config.layers {
        init_transformer_layer(&mut params, &layer_prefix(l), shape, 2 * config.d_model, &mut rng)?;
    }
    init_layer_norm(&mut params, FINAL_NORM, config.d_model)?;
    Ok(TeacherLM { config, params })
}

impl TeacherLM {
    pub fn from_parts(config: TeacherConfig, params: ParamSet) -> Result<Self> {
        let reference = build_teacher(config)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("teacher parameter {name} missing or reshaped"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("teacher checkpoint has extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn directionality(&self) -> Directionality {
        self.config.directionality
    }

    pub fn bos(&self) -> Token {
        self.config.vocab_size
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Every layer runs under the subsequent mask when the teacher is causal.
    pub fn layer_masks_causal(&self) -> bool {
        self.config.directionality == Directionality::Unidirectional
    }

    fn shape(&self) -> AttentionShape {
        AttentionShape::new(self.config.d_model, self.config.heads).expect("validated at build")
    }

    /// Embedding-layer output followed by each layer's output.
    fn hidden_states(&self, g: &mut Graph, bound: &Bound, ids: &[Token]) -> Result<Vec<Var>> {
        if ids.is_empty() {
            return Err(contract("teacher input must be non-empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t > self.config.vocab_size) {
            return Err(contract(format!("token {bad} outside the teacher vocabulary")));
        }
        let n = ids.len();
        let table = bound.var(TOKENS)?;
        let h0 = g.gather_rows(table, ids)?;
        let pe = g.constant(positional_queries(n, self.config.d_model)?);
        let mask = match self.config.directionality {
            Directionality::Unidirectional => Some(subsequent_mask(n)?),
            Directionality::Bidirectional => None,
        };
        let mut states = vec![h0];
        let mut x = g.add(h0, pe)?;
        for l in 0..self.config.layers {
            x = transformer_layer(g, bound, &layer_prefix(l), self.shape(), x, mask.as_ref(), &mut None)?;
            states.push(x);
        }
        Ok(states)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(contract(format!(
                "token {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn averaged(&self, ids: &[Token]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let states = self.hidden_states(&mut g, &bound, ids)?;
        let mut data = vec![0.0; g.value(states[0]).numel()];
        for s in &states {
            data.iter_mut().zip(g.value(*s).data()).for_each(|(a, v)| *a += v);
        }
        let k = states.len() as f64;
        data.iter_mut().for_each(|v| *v /= k);
        Tensor::new(vec![ids.len(), self.config.d_model], data)
    }

    /// Context embeddings of `tokens`, averaged over the embedding layer and
    /// every transformer layer (`N × d_model`).
    pub fn embed(&self, tokens: &[Token]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        self.averaged(tokens)
    }

    /// Embeddings of the ground-truth history: position `n` sees
    /// `BOS, y_1, …, y_{n−1}` only (given a causal teacher).
    pub fn embed_history(&self, tokens: &[Token]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let ids: Vec<Token> = std::iter::once(self.bos())
            .chain(tokens.iter().copied().take(tokens.len().saturating_sub(1)))
            .collect();
        self.averaged(&ids)
    }

    fn readout(&self, g: &mut Graph, bound: &Bound, top: Var) -> Result<Var> {
        let normed = apply_layer_norm(g, bound, FINAL_NORM, top)?;
        let table = bound.var(TOKENS)?;
        let rows: Vec<usize> = (0..self.config.vocab_size).collect();
        let out_emb = g.gather_rows(table, &rows)?;
        let out_t = g.transpose(out_emb)?;
        g.matmul(normed, out_t)
    }

    /// `log p(candidate | prefix)` under a causal teacher.
    pub fn next_token_logprob(&self, prefix: &[Token], candidate: Token) -> Result<f64> {
        let row = self.next_token_distribution(prefix)?;
        row.get(candidate)
            .copied()
            .ok_or_else(|| contract(format!("candidate {candidate} outside vocabulary")))
    }

    pub fn next_token_distribution(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        if self.config.directionality != Directionality::Unidirectional {
            return Err(contract("next-token scoring needs a unidirectional teacher"));
        }
        self.check_tokens(prefix)?;
        let ids: Vec<Token> = std::iter::once(self.bos()).chain(prefix.iter().copied()).collect();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let states = self.hidden_states(&mut g, &bound, &ids)?;
        let top = *states.last().expect("embedding state always present");
        let last = g.row(top, ids.len() - 1)?;
        let logits = self.readout(&mut g, &bound, last)?;
        let row = g.value(logits).data().to_vec();
        let lse = logsumexp(&row);
        Ok(row.into_iter().map(|v| v - lse).collect())
    }

    /// Light seeded fit on label sequences: next-token prediction for causal
    /// teachers, masked-token prediction for bidirectional ones. Returns the
    /// mean loss of each epoch.
    pub fn fit(&mut self, transcripts: &[Transcript], epochs: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let data: Vec<&Transcript> = transcripts.iter().filter(|t| !t.is_empty()).collect();
        if data.is_empty() {
            return Err(contract("teacher fit needs at least one non-empty transcript"));
        }
        let mut state = AdamState::new(&self.params);
        let mut history = Vec::with_capacity(epochs);
        const BATCH: usize = 16;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut stream(seed, &[0xf17, epoch as u64]));
            let mut total = 0.0;
            for (b, chunk) in order.chunks(BATCH).enumerate() {
                let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
                for &i in chunk {
                    let mut rng = stream(seed, &[0xf17, epoch as u64, b as u64, i as u64]);
                    let (loss, g_item) = self.fit_item(data[i], &mut rng)?;
                    total += loss;
                    for (acc, gi) in grads.iter_mut().zip(g_item) {
                        match (acc.as_mut(), gi) {
                            (Some(a), Some(gi)) => {
                                a.data_mut().iter_mut().zip(gi.data()).for_each(|(x, y)| *x += y)
                            }
                            (None, gi) => *acc = gi,
                            (Some(_), None) => {}
                        }
                    }
                }
                let scale = 1.0 / chunk.len() as f64;
                let grads: Vec<Option<Tensor>> = grads
                    .into_iter()
                    .zip(self.params.iter())
                    .map(|(g, (_, p))| {
                        let mut g = g.unwrap_or_else(|| Tensor::zeros(p.shape()));
                        g.data_mut().iter_mut().for_each(|v| *v *= scale);
                        Some(g)
                    })
                    .collect();
                adam_step(&mut self.params, &grads, &mut state, lr)?;
            }
            history.push(total / data.len() as f64);
        }
        Ok(history)
    }

    fn fit_item(&self, tokens: &[Token], rng: &mut impl Rng) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let (ids, positions, targets): (Vec<Token>, Vec<usize>, Vec<Token>) = match self.config.directionality {
            Directionality::Unidirectional => {
                let ids = std::iter::once(self.bos())
                    .chain(tokens.iter().copied().take(tokens.len() - 1))
                    .collect();
                (ids, (0..tokens.len()).collect(), tokens.to_vec())
            }
            Directionality::Bidirectional => {
                let mut positions: Vec<usize> = (0..tokens.len()).filter(|_| rng.gen::<f64>() < 0.15).collect();
                if positions.is_empty() {
                    positions.push(rng.gen_range(0..tokens.len()));
                }
                let mut ids = tokens.to_vec();
                for &p in &positions {
                    ids[p] = self.bos();
                }
                let targets = positions.iter().map(|&p| tokens[p]).collect();
                (ids, positions, targets)
            }
        };
        let states = self.hidden_states(&mut g, &bound, &ids)?;
        let top = *states.last().expect("embedding state always present");
        let picked = g.gather_rows(top, &positions)?;
        let logits = self.readout(&mut g, &bound, picked)?;
        let loss = cross_entropy(&mut g, logits, &targets)?;
        g.backward(loss)?;
        let value = g.value(loss).item();
        let grads = bound.vars().iter().map(|v| g.grad(*v).cloned()).collect();
        Ok((value, grads))
    }
}

impl LanguageModel for TeacherLM {
    fn next_token_logprobs(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        self.next_token_distribution(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: Directionality, layers: usize) -> TeacherConfig {
        TeacherConfig {
            vocab_size: 6,
            d_model: 8,
            layers,
            heads: 2,
            directionality: dir,
            seed: 11,
        }
    }

    #[test]
    fn seeded_construction_is_bit_identical() {
        let a = build_teacher(cfg(Directionality::Bidirectional, 2)).unwrap();
        let b = build_teacher(cfg(Directionality::Bidirectional, 2)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn construction_errors() {
        assert!(build_teacher(TeacherConfig { vocab_size: 0, ..cfg(Directionality::Bidirectional, 1) }).is_err());
        assert!(build_teacher(TeacherConfig { heads: 3, ..cfg(Directionality::Bidirectional, 1) }).is_err());
    }

    #[test]
    fn unidirectional_masks_every_layer() {
        assert!(build_teacher(cfg(Directionality::Unidirectional, 3)).unwrap().layer_masks_causal());
        assert!(!build_teacher(cfg(Directionality::Bidirectional, 3)).unwrap().layer_masks_causal());
    }

    #[test]
    fn zero_layers_returns_table_rows() {
        let t = build_teacher(cfg(Directionality::Bidirectional, 0)).unwrap();
        let e = t.embed(&[3, 1, 5]).unwrap();
        let table = t.params().get(TOKENS).unwrap();
        for (i, tok) in [3, 1, 5].into_iter().enumerate() {
            assert_eq!(e.row(i), table.row(tok));
        }
    }

    #[test]
    fn out_of_vocab_and_direction_errors() {
        let bi = build_teacher(cfg(Directionality::Bidirectional, 1)).unwrap();
        assert!(bi.embed(&[6]).is_err());
        assert!(bi.next_token_logprob(&[1], 2).is_err());
    }

    #[test]
    fn next_token_distribution_is_normalized() {
        let uni = build_teacher(cfg(Directionality::Unidirectional, 2)).unwrap();
        for prefix in [vec![], vec![1], vec![2, 3, 4]] {
            let row = uni.next_token_distribution(&prefix).unwrap();
            assert_eq!(row.len(), 6);
            assert!(logsumexp(&row).abs() < 1e-9);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fit_reduces_loss() {
        let data: Vec<Transcript> = (0..40).map(|i| vec![1 + i % 5, 1 + (i + 1) % 5, 1 + (i + 2) % 5]).collect();
        let mut t = build_teacher(cfg(Directionality::Unidirectional, 1)).unwrap();
        let hist = t.fit(&data, 4, 1e-2, 3).unwrap();
        assert!(hist[3] < hist[0], "{hist:?}");
    }
}
