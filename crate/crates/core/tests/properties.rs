use proptest::prelude::*;

use ctkt::alignment::{cif_fire, mha_cross, scale_weights, AttentionParams, AttentionShape};
use ctkt::ctc::{collapse, ctc_forward_backward, prefix_beam_search, LogProbMatrix};
use ctkt::gradcheck::check_gradients;
use ctkt::losses::{cosine_embedding_loss, mtl_value};
use ctkt::params::ParamSet;
use ctkt::rng::stream;
use ctkt::tensor::{Graph, Tensor};
use ctkt::verify::{brute_force_ctc_prob, exhaustive_posteriors, random_log_probs};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c, 3.0))
}

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(x in sized_matrix(5, 6), shift in -50.0..50.0f64) {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let s = g.softmax(a).unwrap();
        let shifted = g.add_const(a, shift);
        let s2 = g.softmax(shifted).unwrap();
        let (p, q) = (g.value(s).clone(), g.value(s2).clone());
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (u, v) in p.row(i).iter().zip(q.row(i)) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shared_input_sums_both_contributions(x in sized_matrix(4, 4)) {
        // f = Σ (x⊙x + sigmoid(x)) so x feeds three consumers
        let report = check_gradients(std::slice::from_ref(&x), STEP, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let sg = g.sigmoid(v[0]);
            let s = g.add(sq, sg)?;
            Ok(g.sum(s))
        }).unwrap();
        prop_assert!(report.max_rel_err <= TOL, "{report:?}");
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let sq = g.mul(v, v).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        for (gr, xv) in g.grad(v).unwrap().data().iter().zip(x.data()) {
            prop_assert!((gr - 2.0 * xv).abs() <= 1e-12);
        }
    }

    #[test]
    fn matrix_ops_match_finite_differences(a in matrix(3, 4, 2.0), b in matrix(4, 2, 2.0), w in matrix(3, 2, 2.0)) {
        let report = check_gradients(&[a, b, w], STEP, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let e = g.exp(m);
            let ls = g.log_softmax(m)?;
            let t = g.transpose(v[2])?;
            let tt = g.transpose(t)?;
            let p = g.mul(ls, tt)?;
            let q = g.div(p, e)?;
            let s = g.sum(q);
            let mx = g.max_last(m);
            let mx = g.sum(mx);
            g.add(s, mx)
        }).unwrap();
        prop_assert!(report.max_rel_err <= TOL, "{report:?}");
    }

    #[test]
    fn row_ops_match_finite_differences(x in matrix(3, 5, 2.0), gamma in matrix(1, 5, 2.0), beta in matrix(1, 5, 2.0), y in matrix(3, 5, 2.0)) {
        let gamma = gamma.reshaped(vec![5]).unwrap();
        let beta = beta.reshaped(vec![5]).unwrap();
        let report = check_gradients(&[x, gamma, beta, y], STEP, |g, v| {
            let ln = g.layer_norm(v[0], v[1], v[2])?;
            let cos = g.row_cosine(ln, v[3])?;
            let picked = g.pick_per_row(v[3], &[0, 2, 4])?;
            let left = g.slice_cols(v[0], 1, 3)?;
            let joined = g.concat_cols(&[left, v[3]])?;
            let stacked = g.stack_rows(&[joined, joined])?;
            let sig = g.sigmoid(stacked);
            let a = g.sum(cos);
            let b = g.sum(picked);
            let c = g.mean(sig);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        }).unwrap();
        prop_assert!(report.max_rel_err <= TOL, "{report:?}");
    }

    #[test]
    fn ctc_matches_enumeration(seed in any::<u64>(), frames in 1usize..=6, vocab in 2usize..=4) {
        let mut rng = stream(seed, &[]);
        let logp = random_log_probs(&mut rng, frames, vocab);
        for (target, p) in exhaustive_posteriors(&logp) {
            let (loss, _) = ctc_forward_backward(&logp, &target).unwrap();
            prop_assert!((loss + p.ln()).abs() <= 1e-9);
            prop_assert!((p - brute_force_ctc_prob(&logp, &target)).abs() <= 1e-12);
        }
    }

    #[test]
    fn ctc_gradient_rows_sum_to_minus_one(seed in any::<u64>(), frames in 2usize..=12, vocab in 2usize..=6) {
        // ∂loss/∂logp = −posterior occupancy, which sums to 1 per frame
        let mut rng = stream(seed, &[]);
        let logp = random_log_probs(&mut rng, frames, vocab);
        let target: Vec<usize> = (0..frames / 2).map(|i| 1 + (seed as usize + i) % (vocab - 1)).collect();
        let target = collapse(&target);
        let (loss, grad) = ctc_forward_backward(&logp, &target).unwrap();
        prop_assert!(loss >= 0.0);
        for row in grad.chunks(vocab) {
            prop_assert!((row.iter().sum::<f64>() + 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v <= 1e-15));
        }
    }

    #[test]
    fn beam_scores_are_non_increasing(seed in any::<u64>(), frames in 1usize..=10, vocab in 2usize..=5, beam in 1usize..=8) {
        let mut rng = stream(seed, &[]);
        let logp = LogProbMatrix::new(random_log_probs(&mut rng, frames, vocab)).unwrap();
        let out = prefix_beam_search(&logp, beam, None, 0.0).unwrap();
        prop_assert!(!out.is_empty() && out.len() <= beam);
        for w in out.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
            prop_assert!(w[0].tokens != w[1].tokens);
        }
    }

    #[test]
    fn cif_fires_exactly_n_convex_vectors(
        w in prop::collection::vec(0.01..1.0f64, 1..=24),
        n_frac in 0.0..1.0f64,
        d in 1usize..=4,
    ) {
        let frames = w.len();
        let n = 1 + (n_frac * (2 * frames - 1) as f64) as usize;
        let h = Tensor::new(vec![frames, d], (0..frames * d).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let wv = g.constant(Tensor::vector(w));
        let hv = g.constant(h);
        let w_hat = scale_weights(&mut g, wv, n).unwrap();
        let w_hat_vals = g.value(w_hat).data().to_vec();
        prop_assert!((w_hat_vals.iter().sum::<f64>() - n as f64).abs() <= 1e-9);
        let out = cif_fire(&mut g, w_hat, hv, n).unwrap();
        prop_assert_eq!(g.value(out.repr).shape()[0], n);
        let c = out.coefficient_matrix(n, frames);
        for row in &c {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for (m, wm) in w_hat_vals.iter().enumerate() {
            prop_assert!((c.iter().map(|r| r[m]).sum::<f64>() - wm).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_is_key_permutation_covariant(seed in any::<u64>(), lq in 1usize..=4, lk in 2usize..=6) {
        let shape = AttentionShape::new(4, 2).unwrap();
        let mut params = ParamSet::new();
        let mut rng = stream(seed, &[1]);
        AttentionParams::init(&mut params, "att", shape, &mut rng).unwrap();
        let q = random_log_probs(&mut rng, lq, 4);
        let kv = random_log_probs(&mut rng, lk, 4);
        let perm: Vec<usize> = (0..lk).rev().collect();
        let run = |kv: Tensor| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let att = AttentionParams::bind(&bound, "att", shape).unwrap();
            let (qv, kvv) = (g.constant(q.clone()), g.constant(kv));
            let out = mha_cross(&mut g, qv, kvv, &att, None).unwrap();
            g.value(out.out).clone()
        };
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| kv.row(i).to_vec()).collect();
        let a = run(kv.clone());
        let b = run(Tensor::from_rows(&permuted).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn cosine_loss_scale_invariant_and_bounded(l in matrix(4, 3, 2.0), e in matrix(4, 3, 2.0), c in 0.01..100.0f64, k in 0.1..30.0f64) {
        prop_assume!(l.data().chunks(3).chain(e.data().chunks(3)).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let value = |l: Tensor, e: Tensor| {
            let mut g = Graph::new();
            let (lv, ev) = (g.constant(l), g.constant(e));
            let out = cosine_embedding_loss(&mut g, lv, ev, k).unwrap();
            g.value(out).item()
        };
        let base = value(l.clone(), e.clone());
        let scaled = Tensor::new(l.shape().to_vec(), l.data().iter().map(|v| v * c).collect()).unwrap();
        prop_assert!((base - value(scaled.clone(), e.clone())).abs() < 1e-9);
        prop_assert!((-1e-12..=2.0 * k * 4.0 + 1e-12).contains(&base));
        prop_assert!(value(scaled, l).abs() <= 1e-9);
    }

    #[test]
    fn mtl_is_linear_and_monotone(main in 0.0..50.0f64, aux in 0.0..50.0f64, d in 0.0..5.0f64, w in 0.01..0.99f64) {
        let v = mtl_value(main, aux, w).unwrap();
        prop_assert!((v - (w * main + (1.0 - w) * aux)).abs() <= 1e-12);
        prop_assert!(mtl_value(main + d, aux, w).unwrap() >= v);
        prop_assert!(mtl_value(main, aux + d, w).unwrap() >= v);
    }
}
