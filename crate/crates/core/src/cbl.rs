//! Concept-boundary loss terms: prompt grounding against manual anchors and
//! patch tokens, focal plus dice segmentation, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::abf::anchor_sims_graph;
use crate::error::{Error, Result};
use crate::numgrad::{Graph, Mat, Var, LOG_FLOOR};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_abf: f64,
    pub lambda_psg: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_abf: 1.0,
            lambda_psg: 1.0,
            lambda_seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, x) in [
            ("lambda_abf", self.lambda_abf),
            ("lambda_psg", self.lambda_psg),
            ("lambda_seg", self.lambda_seg),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{key} must be nonnegative, got {x}")));
            }
        }
        Ok(())
    }
}

pub fn cbl_total(l_abf: f64, l_psg: f64, l_seg: f64, w: &LossWeights) -> f64 {
    w.lambda_abf * l_abf + w.lambda_psg * l_psg + w.lambda_seg * l_seg
}

/// Predicted anomaly probabilities with the ground-truth mask, one entry per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTarget {
    pub pred: Vec<f64>,
    pub mask: Vec<f64>,
}

impl SegTarget {
    pub fn new(pred: Vec<f64>, mask: Vec<f64>) -> Result<Self> {
        if pred.len() != mask.len() {
            return Err(Error::format(
                "seg target",
                format!("{} predictions for {} mask cells", pred.len(), mask.len()),
            ));
        }
        if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::format("seg target", "prediction outside [0, 1]"));
        }
        Ok(Self { pred, mask })
    }
}

/// Mean over cells of `−α_t (1 − p_t)^γ ln p_t`.
pub fn focal_loss(t: &SegTarget) -> f64 {
    let sum: f64 = t
        .pred
        .iter()
        .zip(&t.mask)
        .map(|(&p, &y)| {
            let pt = y * p + (1.0 - y) * (1.0 - p);
            let at = y * FOCAL_ALPHA + (1.0 - y) * (1.0 - FOCAL_ALPHA);
            -at * (1.0 - pt).powf(FOCAL_GAMMA) * pt.max(LOG_FLOOR).ln()
        })
        .sum();
    sum / t.pred.len() as f64
}

pub fn dice_loss(t: &SegTarget) -> f64 {
    let inter: f64 = t.pred.iter().zip(&t.mask).map(|(p, y)| p * y).sum();
    let sp: f64 = t.pred.iter().sum();
    let sy: f64 = t.mask.iter().sum();
    1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH)
}

pub fn seg_loss(t: &SegTarget) -> f64 {
    focal_loss(t) + dice_loss(t)
}

/// Focal loss of a column of probabilities against a fixed mask.
pub fn focal_graph(g: &mut Graph, pred: Var, mask: &[f64]) -> Var {
    let n = mask.len();
    let sign = g.constant(Mat::from_vec(n, 1, mask.iter().map(|y| 2.0 * y - 1.0).collect()));
    let base = g.constant(Mat::from_vec(n, 1, mask.iter().map(|y| 1.0 - y).collect()));
    let alpha = g.constant(Mat::from_vec(
        n,
        1,
        mask.iter().map(|y| y * FOCAL_ALPHA + (1.0 - y) * (1.0 - FOCAL_ALPHA)).collect(),
    ));
    let sp = g.mul(pred, sign);
    let pt = g.add(sp, base);
    let npt = g.neg(pt);
    let q = g.offset(npt, 1.0);
    let mod_ = g.pow(q, FOCAL_GAMMA);
    let lp = g.ln_floor(pt, LOG_FLOOR);
    let t = g.mul(mod_, lp);
    let t = g.mul(t, alpha);
    let m = g.mean(t);
    g.neg(m)
}

pub fn dice_graph(g: &mut Graph, pred: Var, mask: &[f64]) -> Var {
    let n = mask.len();
    let y = g.constant(Mat::from_vec(n, 1, mask.to_vec()));
    let py = g.mul(pred, y);
    let inter = g.sum(py);
    let num = g.scale(inter, 2.0);
    let num = g.offset(num, DICE_SMOOTH);
    let sp = g.sum(pred);
    let den = g.offset(sp, mask.iter().sum::<f64>() + DICE_SMOOTH);
    let inv = g.pow(den, -1.0);
    let ratio = g.mul(num, inv);
    let neg = g.neg(ratio);
    g.offset(neg, 1.0)
}

pub fn seg_graph(g: &mut Graph, pred: Var, mask: &[f64]) -> Var {
    let f = focal_graph(g, pred, mask);
    let d = dice_graph(g, pred, mask);
    g.add(f, d)
}

/// Per-cell `P(abnormal)` from `softmax((sim(u, p_neg), sim(u, p_pos)) / tau)`,
/// as a column over the rows of `patches`.
pub fn anomaly_prob_graph(g: &mut Graph, patches: Var, p_pos: Var, p_neg: Var, tau: f64) -> Var {
    let sims = anchor_sims_graph(g, patches, p_neg, p_pos);
    let p = g.softmax_rows(sims, tau);
    let pick = g.constant(Mat::from_vec(2, 1, vec![1.0, 0.0]));
    g.matmul(p, pick)
}

/// Coarse grounding of the instance concepts against the manual anchors.
/// All four inputs are `1 × D` unit rows.
pub fn psg_text_graph(g: &mut Graph, q_pos: Var, q_neg: Var, m_pos: Var, m_neg: Var) -> Var {
    let a = g.dot_rows(q_pos, m_pos);
    let b = g.dot_rows(q_neg, m_neg);
    let c = g.dot_rows(q_neg, m_pos);
    let d = g.dot_rows(q_pos, m_neg);
    let ab = g.add(a, b);
    let cd = g.add(c, d);
    let s = g.sub(cd, ab);
    let s = g.offset(s, 2.0);
    g.scale(s, 0.25)
}

pub fn psg_text_loss(q_pos: &[f64], q_neg: &[f64], m_pos: &[f64], m_neg: &[f64]) -> f64 {
    let mut g = Graph::new();
    let [a, b, c, d] = [q_pos, q_neg, m_pos, m_neg].map(|v| g.constant(Mat::row_vec(v)));
    let l = psg_text_graph(&mut g, a, b, c, d);
    g.scalar(l)
}

/// Token-to-patch grounding for one polarity:
/// `(1/2N) Σ_i [CE_i(S_ti, I) + CE_i(S_it, I)]` with `N` tokens.
pub fn psg_fg_graph(g: &mut Graph, tokens: Var, patches: Var) -> Var {
    let n = g.value(tokens).rows;
    let logits = g.matmul_t(tokens, patches);
    let att = g.softmax_rows(logits, 1.0);
    let grp = g.matmul(att, patches);
    let s_ti = g.matmul_t(tokens, grp);
    let s_it = g.transpose(s_ti);
    let eye = g.constant(Mat::identity(n));
    let mut total = None;
    for s in [s_ti, s_it] {
        let ls = g.log_softmax_rows(s, 1.0);
        let diag = g.mul(ls, eye);
        let d = g.sum(diag);
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d),
        });
    }
    let t = total.expect("two terms");
    g.scale(t, -1.0 / (2 * n) as f64)
}

pub fn psg_finegrained_loss(tokens: &Mat, patches: &Mat) -> f64 {
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let v = g.constant(patches.clone());
    let l = psg_fg_graph(&mut g, t, v);
    g.scalar(l)
}

/// Both polarities averaged: `(1/4N) Σ_i` over the four cross-entropy terms.
pub fn psg_fg_pair_graph(g: &mut Graph, tokens_pos: Var, tokens_neg: Var, patches: Var) -> Var {
    let a = psg_fg_graph(g, tokens_pos, patches);
    let b = psg_fg_graph(g, tokens_neg, patches);
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{check_gradient, l2_normalize};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    /// Direct evaluation with explicit loops, used as an oracle.
    fn fg_oracle(t: &Mat, v: &Mat) -> f64 {
        let n = t.rows;
        let mut grp = Mat::zeros(n, v.cols);
        for i in 0..n {
            let logits: Vec<f64> = (0..v.rows).map(|j| crate::numgrad::dot(t.row(i), v.row(j))).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..v.rows {
                for k in 0..v.cols {
                    grp.data[i * v.cols + k] += w[j] / z * v.get(j, k);
                }
            }
        }
        let s = t.matmul_t(&grp);
        let ce = |s: &Mat| -> f64 {
            (0..n)
                .map(|i| {
                    let lse = s.row(i).iter().map(|x| x.exp()).sum::<f64>().ln();
                    lse - s.get(i, i)
                })
                .sum()
        };
        (ce(&s) + ce(&s.transpose())) / (2 * n) as f64
    }

    #[test]
    fn psg_text_examples() {
        let (p, n) = (e(4, 0), e(4, 1));
        assert_eq!(psg_text_loss(&p, &n, &p, &n), 0.0);
        assert_eq!(psg_text_loss(&n, &p, &p, &n), 1.0);
        let s = 0.3f64;
        let m = vec![s, (1.0 - s * s).sqrt(), 0.0, 0.0];
        assert!((psg_text_loss(&p, &m, &p, &m) - s / 2.0).abs() < 1e-15);
    }

    #[test]
    fn fg_single_token_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Mat::randn(1, 6, 1.0, &mut rng);
        let v = Mat::randn(9, 6, 1.0, &mut rng);
        assert_eq!(psg_finegrained_loss(&t, &v), 0.0);
    }

    #[test]
    fn fg_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let t = Mat::randn(4, 6, 0.7, &mut rng);
            let v = Mat::randn(9, 6, 0.7, &mut rng);
            assert!((psg_finegrained_loss(&t, &v) - fg_oracle(&t, &v)).abs() < 1e-12);
        }
    }

    #[test]
    fn fg_prefers_aligned_patches() {
        let t = Mat::identity(4);
        let aligned = psg_finegrained_loss(&t, &t);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut v = Mat::randn(4, 4, 1.0, &mut rng);
            for r in 0..4 {
                let u = l2_normalize(v.row(r)).unwrap();
                v.row_mut(r).copy_from_slice(&u);
            }
            assert!(aligned < psg_finegrained_loss(&t, &v));
        }
    }

    #[test]
    fn fg_is_invariant_to_patch_order_but_not_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Mat::randn(3, 5, 1.0, &mut rng);
        let v = Mat::randn(8, 5, 1.0, &mut rng);
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut rng);
        let rows: Vec<&[f64]> = order.iter().map(|&r| v.row(r)).collect();
        let shuffled = Mat::from_rows(&rows);
        let a = psg_finegrained_loss(&t, &v);
        assert!((a - psg_finegrained_loss(&t, &shuffled)).abs() < 1e-12);
        let b = psg_finegrained_loss(&t.scaled(10.0), &v);
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn seg_examples() {
        let mask = vec![1.0, 0.0, 0.0, 1.0];
        let exact = SegTarget::new(mask.clone(), mask.clone()).unwrap();
        assert_eq!(seg_loss(&exact), 0.0);
        let empty = SegTarget::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(seg_loss(&empty), 0.0);
        let half = SegTarget::new(vec![0.5; 4], mask).unwrap();
        // 2·(0.25 + 0.75)·0.25·ln 2 / 4 = ln 2 / 8
        assert!((focal_loss(&half) - 2f64.ln() / 8.0).abs() < 1e-15);
        assert!((dice_loss(&half) - 0.4).abs() < 1e-15);
        assert!((seg_loss(&half) - 0.486_643_397_569_993_2).abs() < 1e-12);
    }

    #[test]
    fn seg_target_shape_mismatch() {
        assert!(matches!(SegTarget::new(vec![0.5; 3], vec![0.0; 4]), Err(Error::FormatError { .. })));
    }

    #[test]
    fn graph_forms_agree_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred: Vec<f64> = (0..9).map(|_| rand::Rng::random_range(&mut rng, 0.01..0.99)).collect();
        let mask: Vec<f64> = (0..9).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let t = SegTarget::new(pred.clone(), mask.clone()).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Mat::from_vec(9, 1, pred));
        let f = focal_graph(&mut g, p, &mask);
        let d = dice_graph(&mut g, p, &mask);
        assert!((g.scalar(f) - focal_loss(&t)).abs() < 1e-14);
        assert!((g.scalar(d) - dice_loss(&t)).abs() < 1e-14);
    }

    #[test]
    fn anomaly_prob_prefers_the_negative_anchor() {
        let mut g = Graph::new();
        let u = g.constant(Mat::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]]));
        let p = g.constant(Mat::row_vec(&e(3, 0)));
        let n = g.constant(Mat::row_vec(&e(3, 1)));
        let prob = anomaly_prob_graph(&mut g, u, p, n, 0.1);
        let v = &g.value(prob).data;
        assert!(v[0] > 0.99 && v[1] < 0.01);
        assert!((v[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cbl_total_examples() {
        let zero = LossWeights { lambda_abf: 0.0, lambda_psg: 0.0, lambda_seg: 0.0 };
        assert_eq!(cbl_total(1.0, 2.0, 3.0, &zero), 0.0);
        let proj = LossWeights { lambda_abf: 1.0, lambda_psg: 0.0, lambda_seg: 0.0 };
        assert_eq!(cbl_total(-0.5, 5.0, 7.0, &proj), -0.5);
        let w = LossWeights { lambda_abf: 0.5, lambda_psg: 2.0, lambda_seg: 1.5 };
        let w2 = LossWeights { lambda_abf: 1.0, lambda_psg: 4.0, lambda_seg: 3.0 };
        assert_eq!(cbl_total(0.3, -0.2, 0.7, &w2), 2.0 * cbl_total(0.3, -0.2, 0.7, &w));
        assert!(LossWeights { lambda_seg: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask: Vec<f64> = (0..6).map(|i| (i < 2) as u8 as f64).collect();
        for _ in 0..20 {
            let anchors = Mat::randn(3, 5, 1.0, &mut rng);
            let unit = |r: usize| Mat::row_vec(&l2_normalize(anchors.row(r)).unwrap());
            let (m0, m1, q1) = (unit(0), unit(1), unit(2));
            let q = Mat::row_vec(&l2_normalize(&Mat::randn(1, 5, 1.0, &mut rng).data).unwrap());
            let text = |g: &mut Graph, x: Var| {
                let [a, b, c] = [&q1, &m0, &m1].map(|m| g.constant(m.clone()));
                psg_text_graph(g, x, a, b, c)
            };
            assert!(check_gradient(text, &q, 1e-5).unwrap() < 1e-4);

            let t = Mat::randn(4, 5, 0.5, &mut rng);
            let v = Mat::randn(7, 5, 0.5, &mut rng);
            let (vc, tc) = (v.clone(), t.clone());
            let fg_t = move |g: &mut Graph, x: Var| {
                let p = g.constant(vc.clone());
                psg_fg_graph(g, x, p)
            };
            assert!(check_gradient(fg_t, &t, 1e-5).unwrap() < 1e-4);
            let fg_v = move |g: &mut Graph, x: Var| {
                let tk = g.constant(tc.clone());
                psg_fg_graph(g, tk, x)
            };
            assert!(check_gradient(fg_v, &v, 1e-5).unwrap() < 1e-4);

            let pred = Mat::from_vec(6, 1, (0..6).map(|_| rand::Rng::random_range(&mut rng, 0.05..0.95)).collect());
            let m1c = mask.clone();
            let focal = move |g: &mut Graph, x: Var| focal_graph(g, x, &m1c);
            assert!(check_gradient(focal, &pred, 1e-5).unwrap() < 1e-4);
            let m2c = mask.clone();
            let dice = move |g: &mut Graph, x: Var| dice_graph(g, x, &m2c);
            assert!(check_gradient(dice, &pred, 1e-5).unwrap() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn seg_loss_is_permutation_equivariant(
            cells in proptest::collection::vec((0.0f64..=1.0, proptest::bool::ANY), 1..30),
            seed in any::<u64>(),
        ) {
            let pred: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let mask: Vec<f64> = cells.iter().map(|c| c.1 as u8 as f64).collect();
            let mut order: Vec<usize> = (0..cells.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = SegTarget::new(pred.clone(), mask.clone()).unwrap();
            let b = SegTarget::new(
                order.iter().map(|&i| pred[i]).collect(),
                order.iter().map(|&i| mask[i]).collect(),
            ).unwrap();
            prop_assert!((focal_loss(&a) - focal_loss(&b)).abs() < 1e-12);
            prop_assert!((dice_loss(&a) - dice_loss(&b)).abs() < 1e-12);
        }

        #[test]
        fn psg_text_is_bounded_in_the_anchor_quadrant(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let h = std::f64::consts::FRAC_PI_2;
            let qa = [(a * h).cos(), (a * h).sin(), 0.0];
            let qb = [(b * h).cos(), (b * h).sin(), 0.0];
            let l = psg_text_loss(&qa, &qb, &e(3, 0), &e(3, 1));
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        }

        #[test]
        fn psg_text_is_bounded_for_unit_prompts(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            prop_assume!(crate::numgrad::norm(&a) > 1e-3 && crate::numgrad::norm(&b) > 1e-3);
            let (qa, qb) = (l2_normalize(&a).unwrap(), l2_normalize(&b).unwrap());
            let l = psg_text_loss(&qa, &qb, &e(4, 0), &e(4, 1));
            let r = std::f64::consts::SQRT_2 / 2.0;
            prop_assert!((0.5 - r - 1e-12..=0.5 + r + 1e-12).contains(&l));
        }
    }
}
