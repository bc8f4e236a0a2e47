//! Numeric kernel: vectors, similarity, tempered softmax and reverse-mode
//! differentiation checked against central differences.

mod graph;
mod mat;

pub use graph::{Gradients, Graph, Var};
pub use mat::{dot, norm, Mat};

pub(crate) use graph::softmax_in_place;

use crate::error::{Error, Result};

/// Floor applied inside every `ln` of an entropy or cross-entropy term.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax of `logits / tau`, computed with max-subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("logits must be finite".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, tau);
    Ok(out)
}

/// Shannon entropy (nats) with the log floor.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&q| q * q.max(LOG_FLOOR).ln()).sum::<f64>()
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `h`. Returns the max over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn check_gradient<F>(f: F, x: &Mat, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidParameter(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let eval = |point: &Mat| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v);
        let y = g.scalar(out);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::EvaluationError(format!("f = {y}")))
        }
    };

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&mut g, leaf);
    let y0 = g.scalar(out);
    if !y0.is_finite() {
        return Err(Error::EvaluationError(format!("f(x) = {y0}")));
    }
    let analytic = g.backward(out).wrt(leaf);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = eval(&probe)?;
        probe.data[i] = orig - h;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-8);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_temp(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax_temp(&[0.6, 0.2], 0.1).unwrap();
        // logistic(4)
        let expect = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((p[0] - 0.98201).abs() < 1e-5 && (p[1] - 0.01799).abs() < 1e-5);
        assert_eq!(softmax_temp(&[5.0], 0.1).unwrap(), vec![1.0]);
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(Error::InvalidParameter(_))));
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn gradient_of_squared_norm_is_exact() {
        let x = Mat::row_vec(&[0.3, -1.2, 2.5, 0.0]);
        let err = check_gradient(
            |g, v| {
                let sq = g.mul(v, v);
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn gradient_check_rejects_bad_step_and_nan() {
        let x = Mat::row_vec(&[1.0]);
        assert!(check_gradient(|g, v| g.sum(v), &x, 1e-1).is_err());
        let r = check_gradient(
            |g, v| {
                let l = g.ln_floor(v, 0.0);
                let n = g.scale(l, f64::NAN);
                g.sum(n)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::EvaluationError(_))));
    }

    #[test]
    fn graph_primitives_match_finite_differences() {
        let x = Mat::from_vec(3, 4, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1).collect());
        let w = Mat::from_vec(4, 2, (0..8).map(|i| (i as f64 - 3.5) * 0.2).collect());
        let err = check_gradient(
            |g, v| {
                let wv = g.constant(w.clone());
                let c = g.causal_mean(v);
                let n = g.normalize_rows(c);
                let h = g.matmul(n, wv);
                let t = g.tanh(h);
                let s = g.softmax_rows(t, 0.3);
                let ls = g.log_softmax_rows(h, 0.7);
                let m = g.mul(s, ls);
                let vt = g.transpose(v);
                let gram = g.matmul(v, vt);
                let sg = g.sigmoid(gram);
                let r = g.norm_rows(sg);
                let a = g.sum(m);
                let b = g.sum(r);
                g.add(a, b)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            logits in prop::collection::vec(-5.0f64..5.0, 1..8),
            shift in -100.0f64..100.0,
            tau in 0.05f64..3.0,
        ) {
            let a = softmax_temp(&logits, tau).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let b = softmax_temp(&shifted, tau).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn softmax_preserves_order(logits in prop::collection::vec(-5.0f64..5.0, 2..8)) {
            let p = softmax_temp(&logits, 0.1).unwrap();
            for i in 0..logits.len() {
                for j in 0..logits.len() {
                    if logits[i] > logits[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((norm(&once) - 1.0).abs() < 1e-6);
        }
    }
}
