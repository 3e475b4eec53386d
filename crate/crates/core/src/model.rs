//! Student ASR model: a small transformer encoder over frame features with
//! a CTC classifier and the variant-specific training heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{positional_queries, AttentionParams, AttentionShape, Mask};
use crate::error::{contract, Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::{glorot, stream};
use crate::tensor::{Graph, Tensor, Var};

/// Which training objective a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "kt-rl-cif")]
    KtRlCif,
    #[serde(rename = "kt-rl-att")]
    KtRlAtt,
    #[serde(rename = "kt-cl")]
    KtCl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Vanilla, Self::KtRlCif, Self::KtRlAtt, Self::KtCl];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::KtRlCif => "kt-rl-cif",
            Self::KtRlAtt => "kt-rl-att",
            Self::KtCl => "kt-cl",
        }
    }

    pub fn is_representation(self) -> bool {
        matches!(self, Self::KtRlCif | Self::KtRlAtt)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub d_ff: usize,
    /// Output classes including blank (labels are `1..classes`).
    pub classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            d_ff: 128,
            classes: 17,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_ff == 0 {
            return Err(contract("d_in and d_ff must be positive"));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(contract(format!("d_model must be even, got {}", self.d_model)));
        }
        AttentionShape::new(self.d_model, self.heads)?;
        if self.classes < 2 {
            return Err(contract("need at least blank plus one label"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn attention_shape(&self) -> AttentionShape {
        AttentionShape::new(self.d_model, self.heads).expect("validated")
    }
}

/// Inverted dropout driven by a dedicated random stream.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64, path: &[u64]) -> Self {
        Self { p, rng: stream(seed, path) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

fn maybe_dropout(g: &mut Graph, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// `x·W + b` over the rows of `x`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = g.value(x).shape()[0];
    let proj = g.matmul(x, w)?;
    let bias = g.expand_rows(b, rows);
    g.add(proj, bias)
}

pub fn init_linear(params: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
    params.insert(format!("{prefix}.w"), glorot(rng, fan_in, fan_out))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]))
}

pub fn apply_linear(g: &mut Graph, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.w"))?;
    let b = bound.var(&format!("{prefix}.b"))?;
    linear(g, x, w, b)
}

pub fn apply_layer_norm(g: &mut Graph, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = bound.var(&format!("{prefix}.g"))?;
    let beta = bound.var(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Parameters of one pre-norm transformer layer.
pub fn init_transformer_layer(
    params: &mut ParamSet,
    prefix: &str,
    shape: AttentionShape,
    d_ff: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_layer_norm(params, &format!("{prefix}.ln1"), shape.d_model)?;
    AttentionParams::init(params, &format!("{prefix}.att"), shape, rng)?;
    init_layer_norm(params, &format!("{prefix}.ln2"), shape.d_model)?;
    init_linear(params, &format!("{prefix}.ff1"), shape.d_model, d_ff, rng)?;
    init_linear(params, &format!("{prefix}.ff2"), d_ff, shape.d_model, rng)
}

/// `x + Att(LN(x))` then `x + FF(LN(x))`, with optional self-attention mask.
pub fn transformer_layer(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    shape: AttentionShape,
    x: Var,
    mask: Option<&Mask>,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let a = apply_layer_norm(g, bound, &format!("{prefix}.ln1"), x)?;
    let att = AttentionParams::bind(bound, &format!("{prefix}.att"), shape)?;
    let att_out = crate::alignment::mha_cross(g, a, a, &att, mask)?.out;
    let att_out = maybe_dropout(g, att_out, dropout)?;
    let x = g.add(x, att_out)?;
    let f = apply_layer_norm(g, bound, &format!("{prefix}.ln2"), x)?;
    let hidden = apply_linear(g, bound, &format!("{prefix}.ff1"), f)?;
    let hidden = g.relu(hidden);
    let ff_out = apply_linear(g, bound, &format!("{prefix}.ff2"), hidden)?;
    let ff_out = maybe_dropout(g, ff_out, dropout)?;
    g.add(x, ff_out)
}

pub const CIF_FC: &str = "cif.fc";
pub const RL_ATT: &str = "ktrl.att";
pub const CL_ATT: &str = "ktcl.att";
pub const CL_CLS: &str = "ktcl.cls";
pub const CTC_FC: &str = "ctc.fc";

/// Initializes all parameters for `variant`. The CIF weight FC has the same
/// size as, but is separate from, the CTC classifier.
pub fn init_params(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = stream(seed, &[0x5eed_0001]);
    let shape = cfg.attention_shape();
    let mut p = ParamSet::new();
    init_linear(&mut p, "enc.in", cfg.d_in, cfg.d_model, &mut rng)?;
    for l in 0..cfg.enc_layers {
        init_transformer_layer(&mut p, &format!("enc.{l}"), shape, cfg.d_ff, &mut rng)?;
    }
    init_layer_norm(&mut p, "enc.ln", cfg.d_model)?;
    init_linear(&mut p, CTC_FC, cfg.d_model, cfg.classes, &mut rng)?;
    match variant {
        Variant::Vanilla => {}
        Variant::KtRlCif => init_linear(&mut p, CIF_FC, cfg.d_model, cfg.classes, &mut rng)?,
        Variant::KtRlAtt => AttentionParams::init(&mut p, RL_ATT, shape, &mut rng)?,
        Variant::KtCl => {
            AttentionParams::init(&mut p, CL_ATT, shape, &mut rng)?;
            init_linear(&mut p, CL_CLS, cfg.d_model, cfg.classes, &mut rng)?;
        }
    }
    Ok(p)
}

/// Encoder output `H` (`M × d_model`) for one utterance.
pub fn encode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    frames: &Tensor,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let m = frames.shape()[0];
    if frames.shape() != [m, cfg.d_in] {
        return Err(Error::Dimension {
            op: "encode",
            lhs: frames.shape().to_vec(),
            rhs: vec![m, cfg.d_in],
        });
    }
    let x = g.constant(frames.clone());
    let x = apply_linear(g, bound, "enc.in", x)?;
    let pe = g.constant(positional_queries(m, cfg.d_model)?);
    let mut x = g.add(x, pe)?;
    x = maybe_dropout(g, x, &mut dropout)?;
    let shape = cfg.attention_shape();
    for l in 0..cfg.enc_layers {
        x = transformer_layer(g, bound, &format!("enc.{l}"), shape, x, None, &mut dropout)?;
    }
    apply_layer_norm(g, bound, "enc.ln", x)
}

/// Per-frame CTC log-probabilities (`M × classes`).
pub fn ctc_log_probs(g: &mut Graph, bound: &Bound, h: Var) -> Result<Var> {
    let logits = apply_linear(g, bound, CTC_FC, h)?;
    g.log_softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_per_variant() {
        let cfg = ModelConfig::default();
        let v = init_params(&cfg, Variant::Vanilla, 1).unwrap();
        assert!(v.get("cif.fc.w").is_none());
        let c = init_params(&cfg, Variant::KtRlCif, 1).unwrap();
        assert_eq!(c.get("cif.fc.w").unwrap().shape(), &[64, 17]);
        let k = init_params(&cfg, Variant::KtCl, 1).unwrap();
        assert!(k.get("ktcl.att.wq").is_some() && k.get("ktcl.cls.w").is_some());
        assert_eq!(v.checksum(), init_params(&cfg, Variant::Vanilla, 1).unwrap().checksum());
    }

    #[test]
    fn encoder_shapes() {
        let cfg = ModelConfig { d_model: 8, heads: 2, d_ff: 16, d_in: 3, classes: 5, ..Default::default() };
        let p = init_params(&cfg, Variant::Vanilla, 3).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        let h = encode(&mut g, &b, &cfg, &Tensor::full(&[7, 3], 0.2), None).unwrap();
        assert_eq!(g.value(h).shape(), &[7, 8]);
        let lp = ctc_log_probs(&mut g, &b, h).unwrap();
        assert_eq!(g.value(lp).shape(), &[7, 5]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }
}
