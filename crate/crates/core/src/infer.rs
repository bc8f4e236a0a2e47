//! Class-agnostic scoring: Gaussian class identification, per-layer patch
//! banks, text and visual anomaly maps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bundle::{EmbeddingBundle, Sample, Shape};
use crate::dcf::Polarity;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numgrad::{dot, l2_normalize, softmax_in_place, Mat};
use crate::trainer::{adapt_rows, layer_mat};

pub const SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub tau: f64,
    pub text_weight: f64,
    pub vis_weight: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            text_weight: 1.0,
            vis_weight: 1.0,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        for (key, x) in [("text_weight", self.text_weight), ("vis_weight", self.vis_weight)] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{key} must be nonnegative, got {x}")));
            }
        }
        Ok(())
    }
}

/// Shrunk Gaussian over adapted global features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussian {
    pub mu: Vec<f64>,
    pub sigma: DMatrix<f64>,
    inverse: DMatrix<f64>,
    log_det: f64,
}

impl ClassGaussian {
    /// `Σ = (1 − ρ) Σ_emp + ρ (tr Σ_emp / D) I` with divisor `N − 1`; identity
    /// when `N = 1` or the trace vanishes.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        let d = samples.first().ok_or(Error::EmptyDataset)?.len();
        let mut mu = vec![0.0; d];
        for s in samples {
            mu.iter_mut().zip(s).for_each(|(m, x)| *m += x);
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);

        let mut emp = DMatrix::<f64>::zeros(d, d);
        if n > 1 {
            for s in samples {
                let c = DVector::from_iterator(d, s.iter().zip(&mu).map(|(x, m)| x - m));
                emp += &c * c.transpose();
            }
            emp /= (n - 1) as f64;
        }
        let trace = emp.trace();
        let sigma = if n == 1 || trace <= 0.0 {
            DMatrix::identity(d, d)
        } else {
            emp * (1.0 - SHRINKAGE) + DMatrix::identity(d, d) * (SHRINKAGE * trace / d as f64)
        };
        Self::from_parts(mu, sigma)
    }

    pub fn from_parts(mu: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or(Error::DegenerateInput("covariance is not positive definite"))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let inverse = chol.inverse();
        Ok(Self {
            mu,
            sigma,
            inverse,
            log_det,
        })
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let d = self.mu.len();
        let c = DVector::from_iterator(d, x.iter().zip(&self.mu).map(|(a, m)| a - m));
        let maha = (c.transpose() * &self.inverse * &c)[(0, 0)];
        -0.5 * (maha + self.log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Index of the highest log-likelihood; ties go to the earliest class.
/// Classes without a fitted Gaussian are skipped.
pub fn identify_class(x: &[f64], gaussians: &[Option<ClassGaussian>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in gaussians.iter().enumerate() {
        if let Some(g) = g {
            let ll = g.log_likelihood(x);
            if best.is_none_or(|(_, b)| ll > b) {
                best = Some((k, ll));
            }
        }
    }
    best.map(|b| b.0)
}

/// Adapted, normalized training globals per class.
fn adapted_globals(samples: &[Sample], model: &Model) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| adapt_rows(&Mat::row_vec(&s.global_f64()), &model.adapter).data)
        .collect()
}

pub fn fit_class_gaussians(bundle: &EmbeddingBundle, model: &Model) -> Result<Vec<Option<ClassGaussian>>> {
    bundle
        .classes
        .iter()
        .map(|c| {
            if c.train_normals.is_empty() {
                Ok(None)
            } else {
                ClassGaussian::fit(&adapted_globals(&c.train_normals, model)).map(Some)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    pub gaussian: ClassGaussian,
    /// Per layer, every training patch as a unit row.
    pub patches: Vec<Mat>,
    /// Averaged `[pos, neg]` concept vectors.
    pub text: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBanks {
    pub shape: Shape,
    pub classes: Vec<Option<ClassBank>>,
}

impl MemoryBanks {
    pub fn build(bundle: &EmbeddingBundle, model: &Model) -> Result<Self> {
        let shape = bundle.shape;
        let gaussians = fit_class_gaussians(bundle, model)?;
        let mut classes = Vec::with_capacity(bundle.classes.len());
        for (k, (c, gauss)) in bundle.classes.iter().zip(gaussians).enumerate() {
            let Some(gaussian) = gauss else {
                classes.push(None);
                continue;
            };
            let patches = (0..shape.layers)
                .map(|l| {
                    let mut rows = Vec::with_capacity(c.train_normals.len() * shape.cells() * shape.dim);
                    for s in &c.train_normals {
                        rows.extend(adapt_rows(&layer_mat(s, &shape, l), &model.adapter).data);
                    }
                    Mat::from_vec(c.train_normals.len() * shape.cells(), shape.dim, rows)
                })
                .collect();
            let globals = adapted_globals(&c.train_normals, model);
            let mut text = [vec![0.0; shape.dim], vec![0.0; shape.dim]];
            for v in &globals {
                for pol in Polarity::BOTH {
                    let cv = model.dcf.concept_vector(v, k, pol)?;
                    text[pol.index()].iter_mut().zip(&cv).for_each(|(t, x)| *t += x);
                }
            }
            let text = [l2_normalize(&text[0])?, l2_normalize(&text[1])?];
            classes.push(Some(ClassBank {
                gaussian,
                patches,
                text,
            }));
        }
        Ok(Self { shape, classes })
    }

    pub fn gaussians(&self) -> Vec<Option<ClassGaussian>> {
        self.classes.iter().map(|c| c.as_ref().map(|b| b.gaussian.clone())).collect()
    }

    pub fn bank(&self, class: usize) -> Result<&ClassBank> {
        self.classes
            .get(class)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingBank(class))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub text: Vec<f64>,
    pub vis: Vec<f64>,
    pub fused: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub class_pred: usize,
    pub map: AnomalyMap,
}

/// `M_text` cell values from unit patch rows and the fused anchors.
pub fn text_map(patches: &Mat, p_pos: &[f64], p_neg: &[f64], tau: f64) -> Vec<f64> {
    (0..patches.rows)
        .map(|r| {
            let u = patches.row(r);
            let n = dot(u, u).sqrt();
            let mut p = [dot(u, p_neg) / n, dot(u, p_pos) / n];
            softmax_in_place(&mut p, tau);
            p[0]
        })
        .collect()
}

/// `1 − max cos` of each row of `query` against `bank`, both with unit rows.
pub fn nearest_distance(query: &Mat, bank: &Mat) -> Vec<f64> {
    let sims = query.matmul_t(bank);
    (0..query.rows)
        .map(|r| {
            let best = sims.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (1.0 - best.clamp(-1.0, 1.0)).max(0.0)
        })
        .collect()
}

/// Scores one sample. `class` overrides identification when given.
pub fn score_image(
    sample: &Sample,
    banks: &MemoryBanks,
    model: &Model,
    cfg: &ScoreConfig,
    class: Option<usize>,
) -> Result<ScoredSample> {
    let shape = banks.shape;
    let v = adapt_rows(&Mat::row_vec(&sample.global_f64()), &model.adapter).data;
    let class_pred = match class {
        Some(k) => k,
        None => identify_class(&v, &banks.gaussians()).ok_or(Error::EmptyDataset)?,
    };
    let bank = banks.bank(class_pred)?;

    let mut anchors = [Vec::new(), Vec::new()];
    for pol in Polarity::BOTH {
        let inst = model.dcf.concept_vector(&v, class_pred, pol)?;
        let mixed: Vec<f64> = inst.iter().zip(&bank.text[pol.index()]).map(|(a, b)| (a + b) / 2.0).collect();
        anchors[pol.index()] = l2_normalize(&mixed)?;
    }

    let cells = shape.cells();
    let mut vis = vec![0.0; cells];
    let mut avg = Mat::zeros(cells, shape.dim);
    for l in 0..shape.layers {
        let u = adapt_rows(&layer_mat(sample, &shape, l), &model.adapter);
        for (acc, d) in vis.iter_mut().zip(nearest_distance(&u, &bank.patches[l])) {
            *acc += d / shape.layers as f64;
        }
        avg.add_assign(&u.scaled(1.0 / shape.layers as f64));
    }
    let text = text_map(&avg, &anchors[0], &anchors[1], cfg.tau);
    let fused: Vec<f64> = text
        .iter()
        .zip(&vis)
        .map(|(t, v)| cfg.text_weight * t + cfg.vis_weight * v)
        .collect();
    let score = fused.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoredSample {
        class_pred,
        map: AnomalyMap {
            height: shape.height,
            width: shape.width,
            text,
            vis,
            fused,
            score,
        },
    })
}
