//! Single-stage joint training of the DCF prompts and the feature adapter.

mod adapter;
mod optim;

pub use adapter::{adapt_graph, adapt_rows, apply_adapter, AdapterConfig, AdapterParams};
pub use optim::{cosine_lr, Adam};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abf::{abf_entropy_graph, forge_fence, predictive_entropy, AttackConfig};
use crate::bundle::{synthesize_anomaly, EmbeddingBundle, Sample, Shape};
use crate::cbl::{anomaly_prob_graph, psg_fg_pair_graph, psg_text_graph, seg_graph, LossWeights};
use crate::dcf::{DcfConfig, Polarity};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numgrad::{Graph, Mat, Var};

/// RNG streams at or above this value are per-step streams.
const STEP_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate for the DCF parameters.
    pub lr: f64,
    pub adapter_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub attack: AttackConfig,
    pub dcf: DcfConfig,
    pub adapter: AdapterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1,
            lr: 1.5e-2,
            adapter_lr: 2e-5,
            weight_decay: 1e-5,
            seed: 0,
            weights: LossWeights::default(),
            attack: AttackConfig::default(),
            dcf: DcfConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::InvalidParameter("batch_size must be 1".into()));
        }
        for (key, x) in [("lr", self.lr), ("adapter_lr", self.adapter_lr)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{key} must be positive, got {x}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter("weight_decay must be nonnegative".into()));
        }
        self.weights.validate().map_err(|e| e.within("weights"))?;
        self.attack.validate().map_err(|e| e.within("attack"))?;
        self.dcf.validate().map_err(|e| e.within("dcf"))?;
        self.adapter.validate().map_err(|e| e.within("adapter"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub abf: f64,
    pub psg: f64,
    pub seg: f64,
    pub total: f64,
    /// Mean balance gap after the noise start, then after the attack.
    pub attack_gap_initial: f64,
    pub attack_gap_final: f64,
    pub attack_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    abf: f64,
    psg: f64,
    seg: f64,
    total: f64,
    gap0: f64,
    gap1: f64,
    attack: f64,
}

/// Training state that can be advanced one epoch at a time.
pub struct Trainer<'a> {
    pub model: Model,
    cfg: TrainConfig,
    bundle: &'a EmbeddingBundle,
    manual: [Mat; 2],
    opt_dcf: Adam,
    opt_adapter: Adam,
    step: usize,
    total_steps: usize,
    epochs: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a EmbeddingBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let per_epoch: usize = bundle.classes.iter().map(|c| c.train_normals.len()).sum();
        if per_epoch == 0 {
            return Err(Error::EmptyDataset);
        }
        if cfg.dcf.dim != bundle.shape.dim {
            return Err(Error::InvalidParameter(format!(
                "dcf.dim {} does not match bundle dim {}",
                cfg.dcf.dim, bundle.shape.dim
            )));
        }
        let model = Model::new(cfg.dcf.clone(), cfg.adapter, bundle.class_names(), cfg.seed)?;
        let manual = model.dcf.manual_anchors().map(|v| Mat::row_vec(&v));
        let shapes: Vec<_> = model.dcf.params.values().iter().map(Mat::shape).collect();
        let opt_dcf = Adam::new(&shapes, cfg.weight_decay);
        let opt_adapter = Adam::new(&[model.adapter.a.shape(), model.adapter.b.shape()], cfg.weight_decay);
        Ok(Self {
            model,
            manual,
            opt_dcf,
            opt_adapter,
            step: 0,
            total_steps: per_epoch * cfg.epochs,
            epochs: Vec::new(),
            cfg,
            bundle,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs.len()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Classes in manifest order, each training normal once.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut acc = StepStats::default();
        let mut n = 0.0;
        for k in 0..self.bundle.classes.len() {
            for i in 0..self.bundle.classes[k].train_normals.len() {
                let s = self.train_step(k, i)?;
                acc.abf += s.abf;
                acc.psg += s.psg;
                acc.seg += s.seg;
                acc.total += s.total;
                acc.gap0 += s.gap0;
                acc.gap1 += s.gap1;
                acc.attack += s.attack;
                n += 1.0;
            }
        }
        let rec = EpochRecord {
            epoch: self.epochs.len() + 1,
            abf: acc.abf / n,
            psg: acc.psg / n,
            seg: acc.seg / n,
            total: acc.total / n,
            attack_gap_initial: acc.gap0 / n,
            attack_gap_final: acc.gap1 / n,
            attack_loss: acc.attack / n,
        };
        self.epochs.push(rec.clone());
        Ok(rec)
    }

    pub fn finish(self) -> (Model, TrainReport) {
        let report = TrainReport {
            seed: self.cfg.seed,
            steps: self.step,
            epochs: self.epochs,
            checkpoint: None,
        };
        (self.model, report)
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STEP_STREAM_BASE + self.step as u64);
        rng
    }

    fn train_step(&mut self, k: usize, i: usize) -> Result<StepStats> {
        let bundle = self.bundle;
        let shape = bundle.shape;
        let class = &bundle.classes[k];
        let sample = &class.train_normals[i];
        let model = &self.model;
        let ad = &model.adapter;
        let anchors = model.dcf.proxy.anchors();
        let tau = self.cfg.attack.tau;
        let mut rng = self.step_rng();
        let prefix = [rng.random_range(0..anchors), rng.random_range(0..anchors)];

        let mut g = Graph::new();
        let p = model.dcf.params.leaves(&mut g);
        let a = g.leaf(ad.a.clone());
        let b = g.leaf(ad.b.clone());
        let adapt = |g: &mut Graph, x: Mat, rng: &mut ChaCha8Rng| {
            let keep = ad.dropout_mask(x.rows, true, rng);
            let x = g.constant(x);
            adapt_graph(g, x, a, b, ad.scaling, keep.as_ref())
        };

        let v_cls = adapt(&mut g, Mat::row_vec(&sample.global_f64()), &mut rng);
        let mut concepts = Vec::with_capacity(2);
        let mut shallow = Vec::with_capacity(2);
        for pol in Polarity::BOTH {
            let (c, pv) = model.dcf.concept_graph(&mut g, &p, v_cls, k, pol, prefix[pol.index()])?;
            concepts.push(c);
            shallow.push(pv.shallow);
        }
        let (c_pos, c_neg) = (concepts[0], concepts[1]);

        // Phase 1 runs on plain values; only the forged result re-enters the graph.
        let originals = fence_originals(&class.train_normals, ad)?;
        let fence = forge_fence(
            &originals,
            &g.value(c_pos).data,
            &g.value(c_neg).data,
            &self.cfg.attack,
            &mut rng,
        )?;
        let l_abf = abf_entropy_graph(&mut g, &fence, c_pos, c_neg, tau);

        let m_pos = g.constant(self.manual[0].clone());
        let m_neg = g.constant(self.manual[1].clone());
        let l_text = psg_text_graph(&mut g, c_pos, c_neg, m_pos, m_neg);
        let v0 = adapt(&mut g, layer_mat(sample, &shape, 0), &mut rng);
        let l_fg = psg_fg_pair_graph(&mut g, shallow[0], shallow[1], v0);
        let l_psg = g.add(l_text, l_fg);

        let l_seg = match pick_donor(bundle, k, &mut rng) {
            Some((dk, di)) => {
                let donor = &bundle.classes[dk];
                let anomaly = synthesize_anomaly(
                    sample,
                    &class.name,
                    &donor.train_normals[di],
                    &donor.name,
                    &shape,
                    &mut rng,
                )?;
                let v_an = adapt(&mut g, Mat::row_vec(&anomaly.global_f64()), &mut rng);
                let mut cs = [c_pos, c_neg];
                for pol in Polarity::BOTH {
                    cs[pol.index()] = model.dcf.concept_graph(&mut g, &p, v_an, k, pol, prefix[pol.index()])?.0;
                }
                let all = adapt(&mut g, all_layers_mat(&anomaly, &shape), &mut rng);
                let avg = g.constant(layer_average_matrix(&shape));
                let u = g.matmul(avg, all);
                let pred = anomaly_prob_graph(&mut g, u, cs[0], cs[1], tau);
                let mask: Vec<f64> = anomaly
                    .mask
                    .as_ref()
                    .expect("synthesized anomalies carry a mask")
                    .iter()
                    .map(|&m| m as f64)
                    .collect();
                Some(seg_graph(&mut g, pred, &mask))
            }
            None => None,
        };

        let w = self.cfg.weights;
        let mut terms = vec![(w.lambda_abf, l_abf), (w.lambda_psg, l_psg)];
        terms.extend(l_seg.map(|l| (w.lambda_seg, l)));
        let mut total: Option<Var> = None;
        for (lambda, l) in terms {
            if lambda == 0.0 {
                continue;
            }
            let t = g.scale(l, lambda);
            total = Some(match total {
                Some(acc) => g.add(acc, t),
                None => t,
            });
        }

        let stats = StepStats {
            abf: g.scalar(l_abf),
            psg: g.scalar(l_psg),
            seg: l_seg.map_or(0.0, |l| g.scalar(l)),
            total: total.map_or(0.0, |t| g.scalar(t)),
            gap0: fence.mean_initial_gap(),
            gap1: fence.mean_gap(),
            attack: fence.final_loss(),
        };
        if !stats.total.is_finite() {
            return Err(Error::EvaluationError(format!("training loss {} at step {}", stats.total, self.step)));
        }

        if let Some(total) = total {
            let grads = g.backward(total);
            let lr = cosine_lr(self.step, self.total_steps, self.cfg.lr)?;
            let lr_ad = cosine_lr(self.step, self.total_steps, self.cfg.adapter_lr)?;
            for (j, var) in p.iter().enumerate() {
                if grads.reached(*var) {
                    let grad = grads.wrt(*var);
                    self.opt_dcf.step(j, self.model.dcf.params.get_mut(j), &grad, lr);
                }
            }
            if grads.reached(a) {
                self.opt_adapter.step(0, &mut self.model.adapter.a, &grads.wrt(a), lr_ad);
            }
            if grads.reached(b) {
                self.opt_adapter.step(1, &mut self.model.adapter.b, &grads.wrt(b), lr_ad);
            }
        }
        self.step += 1;
        Ok(stats)
    }
}

/// Runs every epoch and returns the trained model with its report.
pub fn fit(bundle: &EmbeddingBundle, cfg: TrainConfig) -> Result<(Model, TrainReport)> {
    let mut t = Trainer::new(bundle, cfg)?;
    for _ in 0..t.cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

/// Adapted training globals of a class, padded with their mean to at least two.
pub fn fence_originals(train: &[Sample], ad: &AdapterParams) -> Result<Vec<Vec<f64>>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let globals: Vec<&[f32]> = train.iter().map(|s| s.global.as_slice()).collect();
    let x = f32_rows(&globals);
    let y = adapt_rows(&x, ad);
    let mut rows: Vec<Vec<f64>> = (0..y.rows).map(|r| y.row(r).to_vec()).collect();
    if rows.len() == 1 {
        rows.push(rows[0].clone());
    }
    Ok(rows)
}

/// Mean predictive entropy of fence features forged as in training: for
/// every class, every adapted training normal and every pair of prefix
/// anchors, a fence is forged against that sample's concepts. The attack RNG
/// is fixed by `seed`, so two models can be compared directly.
pub fn fence_entropy(model: &Model, bundle: &EmbeddingBundle, attack: &AttackConfig, seed: u64) -> Result<f64> {
    let anchors = model.dcf.proxy.anchors();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut stream = 0u64;
    for (k, class) in bundle.classes.iter().enumerate() {
        if class.train_normals.is_empty() {
            continue;
        }
        let originals = fence_originals(&class.train_normals, &model.adapter)?;
        for v in originals.iter().take(class.train_normals.len()) {
            for a in 0..anchors {
                let p = model.dcf.concept_at(v, k, Polarity::Pos, a)?;
                for b in 0..anchors {
                    let n = model.dcf.concept_at(v, k, Polarity::Neg, b)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(stream);
                    stream += 1;
                    let fence = forge_fence(&originals, &p, &n, attack, &mut rng)?;
                    for f in &fence.forged {
                        total += predictive_entropy(f, &p, &n, attack.tau)?;
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}

fn pick_donor(bundle: &EmbeddingBundle, k: usize, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let others: Vec<usize> = (0..bundle.classes.len())
        .filter(|&j| j != k && !bundle.classes[j].train_normals.is_empty())
        .collect();
    if others.is_empty() {
        return None;
    }
    let dk = others[rng.random_range(0..others.len())];
    let di = rng.random_range(0..bundle.classes[dk].train_normals.len());
    Some((dk, di))
}

fn f32_rows(rows: &[&[f32]]) -> Mat {
    let cols = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.iter().map(|&x| x as f64)).collect();
    Mat::from_vec(rows.len(), cols, data)
}

/// One layer's patch grid as a `cells × dim` matrix.
pub fn layer_mat(s: &Sample, shape: &Shape, layer: usize) -> Mat {
    Mat::from_vec(shape.cells(), shape.dim, s.layer_f64(shape, layer))
}

/// Every layer stacked, `(layers · cells) × dim`.
pub fn all_layers_mat(s: &Sample, shape: &Shape) -> Mat {
    let data = s.patches.iter().map(|&x| x as f64).collect();
    Mat::from_vec(shape.layers * shape.cells(), shape.dim, data)
}

/// `cells × (layers · cells)` matrix averaging a cell across layers.
pub fn layer_average_matrix(shape: &Shape) -> Mat {
    let cells = shape.cells();
    let mut m = Mat::zeros(cells, shape.layers * cells);
    let w = 1.0 / shape.layers as f64;
    for l in 0..shape.layers {
        for c in 0..cells {
            m.set(c, l * cells + c, w);
        }
    }
    m
}
