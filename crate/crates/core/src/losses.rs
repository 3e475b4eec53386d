//! Auxiliary objectives and their combination with the CTC loss.

use serde::{Deserialize, Serialize};

use crate::ctc::Token;
use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    Cosine,
    Mse,
}

impl std::str::FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("unknown aux loss {other:?}"))),
        }
    }
}

impl std::fmt::Display for AuxKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Mse => "mse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Scale of the cosine embedding loss.
    pub k: f64,
    /// CTC share of the representation-distillation objective.
    pub lambda: f64,
    /// CTC share of the joint-classification objective.
    pub beta: f64,
    pub aux_kind: AuxKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: 20.0,
            lambda: 0.3,
            beta: 0.3,
            aux_kind: AuxKind::Cosine,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(contract(format!("k must be positive, got {}", self.k)));
        }
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(contract(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// `k · Σ_n (1 − cos(l_n, e_n))` over the `N` row pairs.
pub fn cosine_embedding_loss(g: &mut Graph, l: Var, e: Var, k: f64) -> Result<Var> {
    let cos = g.row_cosine(l, e)?;
    let total = g.sum(cos);
    let rows = g.value(cos).numel() as f64;
    let neg = g.scale(total, -k);
    Ok(g.add_const(neg, k * rows))
}

/// Mean squared difference over all `N·d` elements.
pub fn mse_aux_loss(g: &mut Graph, l: Var, e: Var) -> Result<Var> {
    if g.value(l).shape() != g.value(e).shape() {
        return Err(Error::Dimension {
            op: "mse",
            lhs: g.value(l).shape().to_vec(),
            rhs: g.value(e).shape().to_vec(),
        });
    }
    let diff = g.sub(l, e)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

pub fn aux_loss(g: &mut Graph, kind: AuxKind, l: Var, e: Var, k: f64) -> Result<Var> {
    match kind {
        AuxKind::Cosine => cosine_embedding_loss(g, l, e, k),
        AuxKind::Mse => mse_aux_loss(g, l, e),
    }
}

/// Mean over positions of `−log softmax(logits)[n, y_n]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: &[Token]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![target.len()],
        });
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= shape[1]) {
        return Err(contract(format!("target {bad} out of range for {} classes", shape[1])));
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_per_row(logp, target)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// `weight·main + (1 − weight)·aux` with `weight` strictly inside (0, 1).
pub fn mtl_combine(g: &mut Graph, main: Var, aux: Var, weight: f64) -> Result<Var> {
    check_mix_weight(weight)?;
    let a = g.scale(main, weight);
    let b = g.scale(aux, 1.0 - weight);
    g.add(a, b)
}

/// Plain-number form of [`mtl_combine`].
pub fn mtl_value(main: f64, aux: f64, weight: f64) -> Result<f64> {
    check_mix_weight(weight)?;
    Ok(weight * main + (1.0 - weight) * aux)
}

fn check_mix_weight(weight: f64) -> Result<()> {
    if !(weight > 0.0 && weight < 1.0) {
        return Err(contract(format!("mixing weight must lie in (0, 1), got {weight}")));
    }
    Ok(())
}

/// Per-utterance scalar losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ctc: f64,
    pub l_aux: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_mtl: f64,
}

/// Batch means of [`LossReport`] fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub l_ctc: f64,
    pub l_aux: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_mtl: f64,
    pub count: usize,
}

impl LossSummary {
    pub fn from_reports(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean_opt = |f: fn(&LossReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Self {
            l_ctc: reports.iter().map(|r| r.l_ctc).sum::<f64>() / n,
            l_aux: mean_opt(|r| r.l_aux),
            l_ce: mean_opt(|r| r.l_ce),
            l_mtl: reports.iter().map(|r| r.l_mtl).sum::<f64>() / n,
            count: reports.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn cos_loss(l: Tensor, e: Tensor, k: f64) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (g.constant(l), g.constant(e));
        let out = cosine_embedding_loss(&mut g, a, b, k).unwrap();
        g.value(out).item()
    }

    #[test]
    fn cosine_examples() {
        let x = m(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert!(cos_loss(x.clone(), x, 20.0).abs() < 1e-12);
        let l = m(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let e = m(&[vec![0.0, 1.0], vec![5.0, 0.0]]);
        assert!((cos_loss(l, e, 20.0) - 40.0).abs() < 1e-12);
        assert!((cos_loss(m(&[vec![1.0, 1.0]]), m(&[vec![-2.0, -2.0]]), 1.0) - 2.0).abs() < 1e-12);
    }

    fn mse(l: Tensor, e: Tensor) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (g.constant(l), g.constant(e));
        let out = mse_aux_loss(&mut g, a, b).unwrap();
        g.value(out).item()
    }

    #[test]
    fn mse_examples() {
        let x = m(&[vec![1.0, 2.0]]);
        assert_eq!(mse(x.clone(), x), 0.0);
        assert_eq!(mse(m(&[vec![2.0, 3.0], vec![1.0, 1.0]]), m(&[vec![1.0, 2.0], vec![0.0, 0.0]])), 1.0);
        assert_eq!(mse(m(&[vec![1.0, 3.0]]), m(&[vec![0.0, 0.0]])), 5.0);
        let mut g = Graph::new();
        let (a, b) = (g.constant(Tensor::zeros(&[1, 2])), g.constant(Tensor::zeros(&[2, 2])));
        assert!(matches!(mse_aux_loss(&mut g, a, b), Err(Error::Dimension { .. })));
    }

    fn ce(logits: Tensor, target: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(logits);
        let out = cross_entropy(&mut g, a, target)?;
        Ok(g.value(out).item())
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce(Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(ce(m(&[vec![0.0, 20.0, 0.0]]), &[1]).unwrap() < 1e-8);
        let e = 1f64.exp();
        let expect = -((e / (1.0 + e)).ln() + (1.0 / (1.0 + e)).ln()) / 2.0;
        let got = ce(m(&[vec![0.0, 1.0], vec![0.0, 1.0]]), &[1, 0]).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.813_261_687_518_223_2).abs() < 1e-12);
        assert!(matches!(ce(Tensor::zeros(&[1, 2]), &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn mtl_examples() {
        assert_eq!(mtl_value(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!((mtl_value(1.0, 0.0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        let (l, other) = (1.7, -40.0);
        assert!((mtl_value(l, other, 0.999).unwrap() - l).abs() <= 0.001 * (other - l).abs() + 1e-12);
        assert!(mtl_value(1.0, 1.0, 0.0).is_err());
        assert!(mtl_value(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { lambda: 1.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
    }
}
