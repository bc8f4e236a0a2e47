use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{l2_normalize, Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.25,
            init_std: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.alpha.is_finite() && self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidParameter("alpha and init_std must be finite".into()));
        }
        Ok(())
    }
}

/// Low-rank residual branch on frozen features: `f' = normalize(f + s·(f A) B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `dim × rank`
    pub a: Mat,
    /// `rank × dim`, zero at initialization
    pub b: Mat,
    pub scaling: f64,
    pub dropout: f64,
}

impl AdapterParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &AdapterConfig, rng: &mut R) -> Self {
        Self {
            a: Mat::randn(dim, cfg.rank, cfg.init_std, rng),
            b: Mat::zeros(cfg.rank, dim),
            scaling: cfg.scaling(),
            dropout: cfg.dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.rows
    }

    pub fn rank(&self) -> usize {
        self.a.cols
    }

    /// Inverted-dropout keep mask for `rows` features, or `None` outside training.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, rows: usize, training: bool, rng: &mut R) -> Option<Mat> {
        if !training || self.dropout == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.dropout);
        let data = (0..rows * self.dim())
            .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
            .collect();
        Some(Mat::from_vec(rows, self.dim(), data))
    }
}

/// Adapts every row of `x`. `a` and `b` are the adapter tensors as graph nodes.
pub fn adapt_graph(g: &mut Graph, x: Var, a: Var, b: Var, scaling: f64, keep: Option<&Mat>) -> Var {
    let branch_in = match keep {
        Some(m) => {
            let k = g.constant(m.clone());
            g.mul(x, k)
        }
        None => x,
    };
    let h = g.matmul(branch_in, a);
    let o = g.matmul(h, b);
    let o = g.scale(o, scaling);
    let y = g.add(x, o);
    g.normalize_rows(y)
}

/// Single-feature adaptation. With `training = false` no randomness is drawn.
pub fn apply_adapter<R: Rng + ?Sized>(
    f: &[f64],
    ad: &AdapterParams,
    training: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let keep = ad.dropout_mask(1, training, rng);
    let input: Vec<f64> = match &keep {
        Some(k) => f.iter().zip(&k.data).map(|(x, m)| x * m).collect(),
        None => f.to_vec(),
    };
    let h = Mat::row_vec(&input).matmul(&ad.a).matmul(&ad.b);
    let y: Vec<f64> = f.iter().zip(&h.data).map(|(x, o)| x + ad.scaling * o).collect();
    l2_normalize(&y)
}

/// Deterministic adaptation of a batch of rows (inference mode).
pub fn adapt_rows(x: &Mat, ad: &AdapterParams) -> Mat {
    let mut y = x.clone();
    let o = x.matmul(&ad.a).matmul(&ad.b);
    for r in 0..y.rows {
        let row = y.row_mut(r);
        for (v, d) in row.iter_mut().zip(o.row(r)) {
            *v += ad.scaling * d;
        }
        let n = crate::numgrad::norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    y
}
