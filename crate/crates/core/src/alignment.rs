//! Length-M → length-N alignment: continuous integrate-and-fire over
//! per-frame weights, sinusoidal positional queries with multi-head cross
//! attention, and the attention masks shared with the joint classifier.

use std::io::Write;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::glorot;
use crate::tensor::{Graph, Tensor, Var};

/// Shortfall below 1 that still fires the last vector.
pub const FINAL_FIRE_TOLERANCE: f64 = 1e-6;

/// `w_m = sigmoid(max_j FC(h_m)_j)` for every frame, shape `[M]`.
pub fn cif_weights(g: &mut Graph, h: Var, fc_w: Var, fc_b: Var) -> Result<Var> {
    let frames = g.value(h).shape()[0];
    if frames == 0 {
        return Err(contract("cif_weights needs at least one frame"));
    }
    let proj = g.matmul(h, fc_w)?;
    let bias = g.expand_rows(fc_b, frames);
    let logits = g.add(proj, bias)?;
    let peak = g.max_last(logits);
    Ok(g.sigmoid(peak))
}

/// Rescales weights so they sum to the target length: `ŵ = w / Σw · N`.
pub fn scale_weights(g: &mut Graph, w: Var, target_len: usize) -> Result<Var> {
    if target_len == 0 {
        return Err(contract("target length must be at least 1"));
    }
    let total = g.sum(w);
    let sum = g.value(total).item();
    if !(sum > 1e-12) {
        return Err(Error::DegenerateWeights { sum });
    }
    let normalized = g.div(w, total)?;
    Ok(g.scale(normalized, target_len as f64))
}

/// One term of a fired vector: frame `frame` contributed `coefficient · h_frame` to output `output`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FireTerm {
    pub output: usize,
    pub frame: usize,
    pub coefficient: f64,
}

#[derive(Clone, Debug)]
pub struct CifOutput {
    /// `N × d_model` linguistic representations.
    pub repr: Var,
    pub terms: Vec<FireTerm>,
}

impl CifOutput {
    /// Dense `N × M` coefficient matrix.
    pub fn coefficient_matrix(&self, outputs: usize, frames: usize) -> Vec<Vec<f64>> {
        let mut c = vec![vec![0.0; frames]; outputs];
        for t in &self.terms {
            c[t.output][t.frame] += t.coefficient;
        }
        c
    }
}

struct Accumulator {
    mass: Option<Var>,
    state: Option<Var>,
}

/// Integrate-and-fire: walks the frames once, accumulating `ŵ_m` and
/// `ŵ_m·h_m`. When the accumulated weight would reach 1 the frame's weight is
/// split into the part that fills the current vector to exactly 1 and the
/// remainder that seeds the next one. A final shortfall below
/// [`FINAL_FIRE_TOLERANCE`] force-fires the last vector.
pub fn cif_fire(g: &mut Graph, w_hat: Var, h: Var, target_len: usize) -> Result<CifOutput> {
    let frames = g.value(w_hat).numel();
    let hs = g.value(h).shape().to_vec();
    if hs.len() != 2 || hs[0] != frames {
        return Err(Error::Dimension {
            op: "cif_fire",
            lhs: vec![frames],
            rhs: hs,
        });
    }
    let total: f64 = g.value(w_hat).data().iter().sum();
    if (total - target_len as f64).abs() > FINAL_FIRE_TOLERANCE {
        return Err(contract(format!(
            "weights sum to {total}, expected {target_len}"
        )));
    }

    let mut fired: Vec<Var> = Vec::with_capacity(target_len);
    let mut terms = Vec::new();
    let mut acc = Accumulator { mass: None, state: None };
    let mut acc_val = 0.0;

    for m in 0..frames {
        if fired.len() == target_len {
            break;
        }
        let mut rem = g.index(w_hat, m)?;
        let mut rem_val = g.value(rem).item();
        let h_m = g.row(h, m)?;

        while fired.len() < target_len && acc_val + rem_val >= 1.0 {
            // part that fills the accumulation to exactly one
            let part = match acc.mass {
                Some(mass) => {
                    let neg = g.scale(mass, -1.0);
                    g.add_const(neg, 1.0)
                }
                None => g.constant(Tensor::scalar(1.0)),
            };
            let part_val = g.value(part).item();
            let contrib = g.mul(part, h_m)?;
            let out = match acc.state {
                Some(state) => g.add(state, contrib)?,
                None => contrib,
            };
            terms.push(FireTerm {
                output: fired.len(),
                frame: m,
                coefficient: part_val,
            });
            fired.push(out);
            rem = g.sub(rem, part)?;
            rem_val = g.value(rem).item();
            acc = Accumulator { mass: None, state: None };
            acc_val = 0.0;
        }

        if fired.len() < target_len && rem_val > 0.0 {
            let contrib = g.mul(rem, h_m)?;
            acc.state = Some(match acc.state {
                Some(state) => g.add(state, contrib)?,
                None => contrib,
            });
            acc.mass = Some(match acc.mass {
                Some(mass) => g.add(mass, rem)?,
                None => rem,
            });
            acc_val = g.value(acc.mass.expect("just set")).item();
            terms.push(FireTerm {
                output: fired.len(),
                frame: m,
                coefficient: rem_val,
            });
        }
    }

    if fired.len() + 1 == target_len {
        if let Some(state) = acc.state {
            if 1.0 - acc_val < FINAL_FIRE_TOLERANCE {
                fired.push(state);
            }
        }
    }
    if fired.len() != target_len {
        return Err(Error::Internal(format!(
            "integrate-and-fire produced {} vectors, expected {target_len}",
            fired.len()
        )));
    }
    // terms recorded after the last fire belong to no output
    terms.retain(|t| t.output < target_len);
    let repr = g.stack_rows(&fired)?;
    Ok(CifOutput { repr, terms })
}

/// Writes `n,m,coefficient` rows for one utterance.
pub fn write_alignment_csv<W: Write>(mut out: W, utt_id: &str, terms: &[FireTerm]) -> Result<()> {
    writeln!(out, "utt,n,m,coefficient")?;
    for t in terms {
        writeln!(out, "{utt_id},{},{},{:.17e}", t.output, t.frame, t.coefficient)?;
    }
    Ok(())
}

/// Sinusoidal encoding: `P[n,2i] = sin(n/10000^(2i/d))`, `P[n,2i+1] = cos(…)`.
pub fn positional_queries(len: usize, d_model: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(contract("positional queries need N ≥ 1"));
    }
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(contract(format!("d_model must be even, got {d_model}")));
    }
    let mut data = Vec::with_capacity(len * d_model);
    for n in 0..len {
        for i in 0..d_model / 2 {
            let angle = n as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![len, d_model], data)
}

/// Boolean attention mask, `true` = attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Dimension {
                op: "mask",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Additive form: 0 where allowed, `-inf` where forbidden.
    fn additive(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape")
    }
}

/// Lower-triangular mask: position `i` may see `j ≤ i`.
pub fn subsequent_mask(len: usize) -> Result<Mask> {
    if len == 0 {
        return Err(contract("subsequent mask needs N ≥ 1"));
    }
    let allowed = (0..len)
        .flat_map(|i| (0..len).map(move |j| j <= i))
        .collect();
    Mask::new(len, len, allowed)
}

/// Shapes of one multi-head attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl AttentionShape {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(contract(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            d_model,
            heads,
            d_head: d_model / heads,
        })
    }
}

/// Graph handles of one attention block. The per-head projections are stored
/// side by side: head `i` owns columns `i·d_head..(i+1)·d_head` of `wq`, `wk`, `wv`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub shape: AttentionShape,
}

impl AttentionParams {
    pub fn init(params: &mut ParamSet, prefix: &str, shape: AttentionShape, rng: &mut impl Rng) -> Result<()> {
        let inner = shape.heads * shape.d_head;
        params.insert(format!("{prefix}.wq"), glorot(rng, shape.d_model, inner))?;
        params.insert(format!("{prefix}.wk"), glorot(rng, shape.d_model, inner))?;
        params.insert(format!("{prefix}.wv"), glorot(rng, shape.d_model, inner))?;
        params.insert(format!("{prefix}.wo"), glorot(rng, inner, shape.d_model))?;
        Ok(())
    }

    pub fn bind(bound: &Bound, prefix: &str, shape: AttentionShape) -> Result<Self> {
        Ok(Self {
            wq: bound.var(&format!("{prefix}.wq"))?,
            wk: bound.var(&format!("{prefix}.wk"))?,
            wv: bound.var(&format!("{prefix}.wv"))?,
            wo: bound.var(&format!("{prefix}.wo"))?,
            shape,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `Lq × Lk` attention weights.
    pub weights: Vec<Var>,
}

/// Multi-head cross attention:
/// `head_i = softmax((Q·Wq_i)(KV·Wk_i)ᵀ/√d_head + mask)·(KV·Wv_i)`,
/// `out = concat(head_1..head_h)·Wo`.
pub fn mha_cross(
    g: &mut Graph,
    q_src: Var,
    kv_src: Var,
    att: &AttentionParams,
    mask: Option<&Mask>,
) -> Result<AttentionOutput> {
    let lq = g.value(q_src).shape()[0];
    let lk = g.value(kv_src).shape()[0];
    let additive = match mask {
        Some(m) => {
            if m.rows() != lq || m.cols() != lk {
                return Err(Error::Dimension {
                    op: "mha_cross mask",
                    lhs: vec![lq, lk],
                    rhs: vec![m.rows(), m.cols()],
                });
            }
            if let Some(row) = (0..lq).find(|&i| (0..lk).all(|j| !m.get(i, j))) {
                return Err(Error::DegenerateRow { op: "mha_cross", row });
            }
            Some(g.constant(m.additive()))
        }
        None => None,
    };

    let q = g.matmul(q_src, att.wq)?;
    let k = g.matmul(kv_src, att.wk)?;
    let v = g.matmul(kv_src, att.wv)?;
    let dh = att.shape.d_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(att.shape.heads);
    let mut weights = Vec::with_capacity(att.shape.heads);
    for i in 0..att.shape.heads {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let qi = g.slice_cols(q, lo, hi)?;
        let ki = g.slice_cols(k, lo, hi)?;
        let vi = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(ki)?;
        let raw = g.matmul(qi, kt)?;
        let mut scores = g.scale(raw, scale);
        if let Some(mask) = additive {
            scores = g.add(scores, mask)?;
        }
        let w = g.softmax(scores)?;
        heads.push(g.matmul(w, vi)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.matmul(cat, att.wo)?;
    Ok(AttentionOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn cif_weight_examples() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::identity(3));
        let w = g.constant(Tensor::zeros(&[3, 3]));
        let b = g.constant(Tensor::vector(vec![-1.0, 3.0, 0.0]));
        let out = cif_weights(&mut g, h, w, b).unwrap();
        for v in g.value(out).data() {
            assert!((v - 0.952_574_126_822_433_4).abs() < 1e-12);
        }
        let zb = g.constant(Tensor::zeros(&[3]));
        let out = cif_weights(&mut g, h, w, zb).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scale_weight_examples() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::vector(vec![0.3; 4]));
        let s = scale_weights(&mut g, w, 2).unwrap();
        assert!(g.value(s).data().iter().all(|v| (v - 0.5).abs() < 1e-15));

        let w = g.constant(Tensor::vector(vec![0.2, 0.6]));
        let s = scale_weights(&mut g, w, 1).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);

        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(
            scale_weights(&mut g, z, 1),
            Err(Error::DegenerateWeights { .. })
        ));
    }

    fn fire(w: &[f64], h: &Tensor, n: usize) -> (Tensor, CifOutput) {
        let mut g = Graph::new();
        let wv = g.constant(Tensor::vector(w.to_vec()));
        let hv = g.constant(h.clone());
        let out = cif_fire(&mut g, wv, hv, n).unwrap();
        (g.value(out.repr).clone(), out)
    }

    #[test]
    fn cif_one_frame_per_fire() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let (l, _) = fire(&[1.0, 1.0, 1.0], &h, 3);
        assert_eq!(l, h);
    }

    #[test]
    fn cif_single_fire_consumes_both() {
        let h = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let (l, _) = fire(&[0.5, 0.5], &h, 1);
        assert_eq!(l.data(), &[1.0, 2.0]);
    }

    #[test]
    fn cif_split_boundary_by_hand() {
        // acc 0.8 | 0.8 splits into 0.2 + 0.6 | 0.6 + 0.4 fills the second
        let h = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let (l, out) = fire(&[0.8, 0.8, 0.4], &h, 2);
        let expect = [0.8, 0.2, 0.0, 0.0, 0.6, 0.4];
        for (a, b) in l.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", l.data());
        }
        assert_eq!(out.terms.len(), 4);
    }

    #[test]
    fn cif_heavy_frame_fires_twice() {
        let h = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let (l, _) = fire(&[0.05, 2.9, 0.05], &h, 3);
        let expect = [0.05 * 1.0 + 0.95 * 2.0, 2.0, 0.95 * 2.0 + 0.05 * 3.0];
        for (a, b) in l.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cif_rejects_wrong_mass() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::vector(vec![0.5, 0.4]));
        let h = g.constant(Tensor::zeros(&[2, 1]));
        assert!(cif_fire(&mut g, w, h, 1).is_err());
    }

    #[test]
    fn positional_examples() {
        let p = positional_queries(3, 4).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.get(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert_eq!(p, positional_queries(3, 4).unwrap());
        assert!(positional_queries(2, 3).is_err());
    }

    #[test]
    fn subsequent_mask_examples() {
        assert_eq!(subsequent_mask(1).unwrap().allowed, vec![true]);
        assert_eq!(
            subsequent_mask(2).unwrap().allowed,
            vec![true, false, true, true]
        );
        let m = subsequent_mask(5).unwrap();
        for i in 0..5 {
            assert_eq!((0..5).filter(|&j| m.get(i, j)).count(), i + 1);
        }
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::new();
        let eye = Tensor::identity(3);
        let att = AttentionParams {
            wq: g.constant(eye.clone()),
            wk: g.constant(eye.clone()),
            wv: g.constant(eye.clone()),
            wo: g.constant(eye),
            shape: AttentionShape::new(3, 1).unwrap(),
        };
        let q = g.constant(Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap());
        let kv = g.constant(Tensor::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap());
        let out = mha_cross(&mut g, q, kv, &att, None).unwrap();
        assert_eq!(g.value(out.out).row(0), &[4.0, 5.0, 6.0]);
        assert_eq!(g.value(out.out).row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let mut p = ParamSet::new();
        let shape = AttentionShape::new(4, 2).unwrap();
        AttentionParams::init(&mut p, "a", shape, &mut stream(1, &[])).unwrap();
        let b = p.bind(&mut g, false);
        let att = AttentionParams::bind(&b, "a", shape).unwrap();
        let x = g.constant(Tensor::full(&[2, 4], 0.1));
        let mask = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert!(matches!(
            mha_cross(&mut g, x, x, &att, Some(&mask)),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }
}
