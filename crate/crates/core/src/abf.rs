//! Adversarial boundary forging: sign-gradient PGD toward the normal/abnormal
//! cosine bisector, and the entropy loss on the detached result.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{cosine_sim, dot, l2_normalize, softmax_in_place, Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// Weight of the dispersion term.
    pub beta: f64,
    /// Weight of the summed balance term; 0 turns it off.
    pub balance_weight: f64,
    pub tau: f64,
    /// Half-width of the uniform start noise.
    pub init_noise_scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            alpha: 1.0,
            epsilon: 10.0,
            beta: 0.1,
            balance_weight: 1.0,
            tau: 0.1,
            init_noise_scale: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("alpha", self.alpha), ("epsilon", self.epsilon), ("tau", self.tau)];
        for (key, x) in positive {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{key} must be positive, got {x}")));
            }
        }
        let nonneg = [
            ("beta", self.beta),
            ("balance_weight", self.balance_weight),
            ("init_noise_scale", self.init_noise_scale),
        ];
        for (key, x) in nonneg {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{key} must be nonnegative, got {x}")));
            }
        }
        Ok(())
    }
}

/// Forged boundary features. `forged` holds plain values, so anything built
/// from it in a graph is a constant and blocks gradient flow to `originals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FenceBatch {
    pub originals: Vec<Vec<f64>>,
    pub forged: Vec<Vec<f64>>,
    /// Per-sample balance gaps right after the noise start.
    pub initial_gaps: Vec<f64>,
    /// Per-sample balance gaps of `forged`.
    pub gaps: Vec<f64>,
    /// Attack loss before each step, followed by the loss at the output.
    pub loss_trace: Vec<f64>,
}

impl FenceBatch {
    pub fn len(&self) -> usize {
        self.forged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forged.is_empty()
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn mean_gap(&self) -> f64 {
        mean(&self.gaps)
    }

    pub fn mean_initial_gap(&self) -> f64 {
        mean(&self.initial_gaps)
    }

    /// Largest coordinate displacement over the batch.
    pub fn max_displacement(&self) -> f64 {
        self.forged
            .iter()
            .zip(&self.originals)
            .flat_map(|(f, o)| f.iter().zip(o).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    pub fn forged_mat(&self) -> Mat {
        rows_to_mat(&self.forged)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn rows_to_mat(rows: &[Vec<f64>]) -> Mat {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Mat::from_rows(&refs)
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|cos(v, p_pos) − cos(v, p_neg)|` for unit-norm anchors.
pub fn balance_loss(v: &[f64], p_pos: &[f64], p_neg: &[f64]) -> Result<f64> {
    let u = l2_normalize(v)?;
    Ok((dot(&u, p_pos) - dot(&u, p_neg)).abs())
}

/// Negative mean pairwise Euclidean distance.
pub fn dispersion_loss(batch: &[Vec<f64>]) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidBatch(format!("dispersion needs at least 2 vectors, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = batch[i].iter().zip(&batch[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d.sqrt();
        }
    }
    Ok(-2.0 * total / (n * (n - 1)) as f64)
}

/// Cosine similarities of each row of `v` to the anchors `[p_pos; p_neg]`, as `N × 2`.
pub fn anchor_sims_graph(g: &mut Graph, v: Var, p_pos: Var, p_neg: Var) -> Var {
    let u = g.normalize_rows(v);
    let anchors = g.concat_rows(&[p_pos, p_neg]);
    g.matmul_t(u, anchors)
}

/// Per-row balance gaps as an `N × 1` column.
pub fn balance_graph(g: &mut Graph, v: Var, p_pos: Var, p_neg: Var) -> Var {
    let u = g.normalize_rows(v);
    let pos = g.matmul_t(u, p_pos);
    let neg = g.matmul_t(u, p_neg);
    let d = g.sub(pos, neg);
    g.abs(d)
}

/// Dispersion of the rows of `v` (`N ≥ 2`).
pub fn dispersion_graph(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).rows;
    assert!(n >= 2, "dispersion needs at least 2 rows");
    let pairs = n * (n - 1) / 2;
    let mut e = Mat::zeros(pairs, n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            e.set(k, i, 1.0);
            e.set(k, j, -1.0);
            k += 1;
        }
    }
    let e = g.constant(e);
    let diffs = g.matmul(e, v);
    let dist = g.norm_rows(diffs);
    let m = g.mean(dist);
    g.neg(m)
}

/// `balance_weight · Σ balance + beta · dispersion` over the rows of `v`.
pub fn attack_loss_graph(g: &mut Graph, v: Var, p_pos: Var, p_neg: Var, cfg: &AttackConfig) -> Var {
    let gaps = balance_graph(g, v, p_pos, p_neg);
    let bal = g.sum(gaps);
    let mut loss = g.scale(bal, cfg.balance_weight);
    if cfg.beta != 0.0 {
        let disp = dispersion_graph(g, v);
        let disp = g.scale(disp, cfg.beta);
        loss = g.add(loss, disp);
    }
    loss
}

/// Mean negative two-class entropy of `softmax((sim+, sim−) / tau)` over the rows of `v`.
pub fn entropy_loss_graph(g: &mut Graph, v: Var, p_pos: Var, p_neg: Var, tau: f64) -> Var {
    let sims = anchor_sims_graph(g, v, p_pos, p_neg);
    let p = g.softmax_rows(sims, tau);
    let logp = g.log_softmax_rows(sims, tau);
    let plogp = g.mul(p, logp);
    let s = g.sum(plogp);
    let n = g.value(v).rows as f64;
    g.scale(s, 1.0 / n)
}

/// Phase-2 loss on a fence. The forged rows enter the graph as constants.
pub fn abf_entropy_graph(g: &mut Graph, fence: &FenceBatch, p_pos: Var, p_neg: Var, tau: f64) -> Var {
    let v = g.constant(fence.forged_mat());
    entropy_loss_graph(g, v, p_pos, p_neg, tau)
}

pub fn abf_entropy_loss(fence: &FenceBatch, p_pos: &[f64], p_neg: &[f64], tau: f64) -> Result<f64> {
    if fence.is_empty() {
        return Err(Error::InvalidBatch("empty fence".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {tau}")));
    }
    let mut total = 0.0;
    for v in &fence.forged {
        let u = l2_normalize(v)?;
        let mut p = [dot(&u, p_pos), dot(&u, p_neg)];
        softmax_in_place(&mut p, tau);
        total -= crate::numgrad::entropy(&p);
    }
    Ok(total / fence.len() as f64)
}

/// Predictive entropy of a single feature against the anchors.
pub fn predictive_entropy(v: &[f64], p_pos: &[f64], p_neg: &[f64], tau: f64) -> Result<f64> {
    let u = l2_normalize(v)?;
    let mut p = [dot(&u, p_pos), dot(&u, p_neg)];
    softmax_in_place(&mut p, tau);
    Ok(crate::numgrad::entropy(&p))
}

fn check_anchors(p_pos: &[f64], p_neg: &[f64]) -> Result<()> {
    if p_pos.len() != p_neg.len() {
        return Err(Error::InvalidParameter("anchor lengths differ".into()));
    }
    if p_pos == p_neg || cosine_sim(p_pos, p_neg)? >= 1.0 {
        return Err(Error::DegenerateAnchors);
    }
    Ok(())
}

fn gaps_of(v: &Mat, p_pos: &[f64], p_neg: &[f64]) -> Result<Vec<f64>> {
    (0..v.rows).map(|r| balance_loss(v.row(r), p_pos, p_neg)).collect()
}

fn attack_value_and_grad(v: &Mat, pp: &Mat, pn: &Mat, cfg: &AttackConfig) -> Result<(f64, Mat)> {
    for r in 0..v.rows {
        if v.row(r).iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateInput("fence feature collapsed to zero"));
        }
    }
    let mut g = Graph::new();
    let x = g.leaf(v.clone());
    let p = g.constant(pp.clone());
    let n = g.constant(pn.clone());
    let loss = attack_loss_graph(&mut g, x, p, n, cfg);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::EvaluationError(format!("attack loss = {value}")));
    }
    Ok((value, g.backward(loss).wrt(x)))
}

/// Phase 1. Starts from `v + U(−s, s)`, then takes `steps` sign-gradient
/// descent steps on the attack loss, projecting onto the L∞ ball of radius
/// `epsilon` around the originals after the start and after every step.
pub fn forge_fence<R: Rng + ?Sized>(
    originals: &[Vec<f64>],
    p_pos: &[f64],
    p_neg: &[f64],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<FenceBatch> {
    cfg.validate()?;
    check_anchors(p_pos, p_neg)?;
    let n = originals.len();
    if n == 0 || (cfg.beta != 0.0 && n < 2) {
        return Err(Error::InvalidBatch(format!("fence batch of {n} with dispersion active")));
    }
    let dim = p_pos.len();
    if originals.iter().any(|o| o.len() != dim) {
        return Err(Error::InvalidParameter("feature length differs from anchors".into()));
    }

    let base = rows_to_mat(originals);
    let project = |v: &mut Mat| {
        for (x, o) in v.data.iter_mut().zip(&base.data) {
            *x = x.clamp(o - cfg.epsilon, o + cfg.epsilon);
        }
    };
    let mut v = base.clone();
    if cfg.init_noise_scale > 0.0 {
        let s = cfg.init_noise_scale;
        for x in &mut v.data {
            *x += rng.random_range(-s..s);
        }
    }
    project(&mut v);
    let initial_gaps = gaps_of(&v, p_pos, p_neg)?;

    let pp = Mat::row_vec(p_pos);
    let pn = Mat::row_vec(p_neg);
    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (value, grad) = attack_value_and_grad(&v, &pp, &pn, cfg)?;
        loss_trace.push(value);
        for (x, d) in v.data.iter_mut().zip(&grad.data) {
            *x -= cfg.alpha * sign0(*d);
        }
        project(&mut v);
    }
    loss_trace.push(attack_value_and_grad(&v, &pp, &pn, cfg)?.0);

    let gaps = gaps_of(&v, p_pos, p_neg)?;
    let forged = (0..n).map(|r| v.row(r).to_vec()).collect();
    Ok(FenceBatch {
        originals: originals.to_vec(),
        forged,
        initial_gaps,
        gaps,
        loss_trace,
    })
}
