//! Dynamic concept fusion: image-conditioned prompt generation.
//!
//! A gating MLP turns the global image feature into mixture weights over a
//! small dictionary of expert prompts (shared across classes); per-class
//! prompt tokens are appended. At the shallow level both halves receive a
//! SwiGLU offset computed from the same feature; deep prompts skip the
//! offset. Prompts are produced separately for the normal-like (`Pos`) and
//! abnormal-like (`Neg`) polarity and encoded by a frozen text proxy.

mod proxy;

pub use proxy::TextEncoderProxy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{l2_normalize, Graph, Mat, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Pos, Polarity::Neg];

    pub fn index(self) -> usize {
        match self {
            Polarity::Pos => 0,
            Polarity::Neg => 1,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Polarity::Pos => "pos",
            Polarity::Neg => "neg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcfConfig {
    pub dim: usize,
    pub shared_tokens: usize,
    pub class_tokens: usize,
    pub experts: usize,
    /// One shallow prompt plus `depth − 1` deep prompts.
    pub depth: usize,
    pub modulator_hidden: usize,
    pub prefix_anchors: usize,
    pub prefix_len: usize,
    pub context_length: usize,
    pub prompt_init_std: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            shared_tokens: 8,
            class_tokens: 4,
            experts: 4,
            depth: 7,
            modulator_hidden: 16,
            prefix_anchors: 3,
            prefix_len: 2,
            context_length: 77,
            prompt_init_std: 0.02,
        }
    }
}

impl DcfConfig {
    pub fn prompt_tokens(&self) -> usize {
        self.shared_tokens + self.class_tokens
    }

    pub fn gate_hidden(&self) -> usize {
        (self.dim / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.shared_tokens == 0
            || self.class_tokens == 0
            || self.experts == 0
            || self.depth == 0
            || self.modulator_hidden == 0
            || self.prefix_anchors == 0
            || self.prefix_len == 0
        {
            return Err(Error::InvalidParameter("sizes must all be positive".into()));
        }
        let needed = 2 + self.prompt_tokens() + self.prefix_len;
        if needed > self.context_length {
            return Err(Error::PromptTooLong {
                needed,
                limit: self.context_length,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Swiglu {
    w1: usize,
    w2: usize,
    w3: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    gate_w1: usize,
    gate_b1: usize,
    gate_w2: usize,
    gate_b2: usize,
    /// `[polarity][layer]`, each `experts × (shared_tokens · dim)`.
    experts: [Vec<usize>; 2],
    /// `[polarity]` → (shared offset, class offset).
    modulators: [(Swiglu, Swiglu); 2],
    /// `[class][polarity][layer]`, each `class_tokens × dim`.
    class_prompts: Vec<[Vec<usize>; 2]>,
}

/// Trainable DCF state plus the frozen proxy it is read through.
#[derive(Debug, Clone, PartialEq)]
pub struct DcfModel {
    pub config: DcfConfig,
    pub classes: Vec<String>,
    pub params: ParamStore,
    pub proxy: TextEncoderProxy,
    layout: Layout,
}

/// Generated prompt matrices for both polarities.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// `[polarity]`, `(shared + class tokens) × dim`.
    pub shallow: [Mat; 2],
    /// `[polarity][i]` for deep levels `1..depth`.
    pub deep: [Vec<Mat>; 2],
}

/// Graph handles for one polarity's prompts.
#[derive(Debug, Clone)]
pub struct PromptVars {
    pub shallow: Var,
    pub deep: Vec<Var>,
}

impl DcfModel {
    pub fn new(config: DcfConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let d = config.dim;
        let hid = config.gate_hidden();
        let std = config.prompt_init_std;
        let mut p = ParamStore::new();

        let gate_w1 = p.push("gate.w1", Mat::randn(d, hid, 1.0 / (d as f64).sqrt(), &mut rng));
        let gate_b1 = p.push("gate.b1", Mat::zeros(1, hid));
        let gate_w2 = p.push(
            "gate.w2",
            Mat::randn(hid, config.experts, 1.0 / (hid as f64).sqrt(), &mut rng),
        );
        let gate_b2 = p.push("gate.b2", Mat::zeros(1, config.experts));

        let experts = Polarity::BOTH.map(|pol| {
            (0..config.depth)
                .map(|l| {
                    p.push(
                        format!("experts.{}.{l}", pol.tag()),
                        Mat::randn(config.experts, config.shared_tokens * d, std, &mut rng),
                    )
                })
                .collect::<Vec<_>>()
        });

        let mut swiglu = |name: String, tokens: usize| {
            let h = config.modulator_hidden;
            let g = 1.0 / (d as f64).sqrt();
            Swiglu {
                w1: p.push(format!("{name}.w1"), Mat::randn(d, h, g, &mut rng)),
                w2: p.push(format!("{name}.w2"), Mat::randn(d, h, g, &mut rng)),
                // zero output projection: offsets start at exactly zero
                w3: p.push(format!("{name}.w3"), Mat::zeros(h, tokens * d)),
            }
        };
        let modulators = Polarity::BOTH.map(|pol| {
            (
                swiglu(format!("modulator.{}.shared", pol.tag()), config.shared_tokens),
                swiglu(format!("modulator.{}.class", pol.tag()), config.class_tokens),
            )
        });

        let class_prompts = classes
            .iter()
            .enumerate()
            .map(|(k, _)| {
                Polarity::BOTH.map(|pol| {
                    (0..config.depth)
                        .map(|l| {
                            p.push(
                                format!("class.{k}.{}.{l}", pol.tag()),
                                Mat::randn(config.class_tokens, d, std, &mut rng),
                            )
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();

        let proxy = TextEncoderProxy::new(
            d,
            config.depth,
            config.prefix_anchors,
            config.prefix_len,
            config.context_length,
            seed,
        );

        Ok(Self {
            config,
            classes,
            params: p,
            proxy,
            layout: Layout {
                gate_w1,
                gate_b1,
                gate_w2,
                gate_b2,
                experts,
                modulators,
                class_prompts,
            },
        })
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Mixture weights over experts: `softmax(MLP(v_cls))`.
    pub fn gate_weights_graph(&self, g: &mut Graph, p: &[Var], v_cls: Var) -> Var {
        let l = &self.layout;
        let h = g.matmul(v_cls, p[l.gate_w1]);
        let h = g.add_row(h, p[l.gate_b1]);
        let h = g.tanh(h);
        let logits = g.matmul(h, p[l.gate_w2]);
        let logits = g.add_row(logits, p[l.gate_b2]);
        g.softmax_rows(logits, 1.0)
    }

    /// `Σ_k w_k E_k` reshaped to `shared_tokens × dim`.
    pub fn fuse_shared_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        w: Var,
        polarity: Polarity,
        layer: usize,
    ) -> Var {
        let flat = g.matmul(w, p[self.layout.experts[polarity.index()][layer]]);
        g.reshape(flat, self.config.shared_tokens, self.config.dim)
    }

    fn swiglu_graph(&self, g: &mut Graph, p: &[Var], s: Swiglu, v: Var, tokens: usize) -> Var {
        let a = g.matmul(v, p[s.w1]);
        let b = g.matmul(v, p[s.w2]);
        let gate = g.silu(b);
        let h = g.mul(a, gate);
        let out = g.matmul(h, p[s.w3]);
        g.reshape(out, tokens, self.config.dim)
    }

    /// Shallow and deep prompts for one polarity.
    pub fn assemble_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        v_cls: Var,
        class: usize,
        polarity: Polarity,
    ) -> Result<PromptVars> {
        let class_layers = self
            .layout
            .class_prompts
            .get(class)
            .ok_or_else(|| Error::UnknownClass(format!("#{class}")))?[polarity.index()]
        .clone();
        // one gating decision per sample, reused at every depth
        let w = self.gate_weights_graph(g, p, v_cls);
        let (m_sa, m_sp) = self.layout.modulators[polarity.index()];

        let sa0 = self.fuse_shared_graph(g, p, w, polarity, 0);
        let d_sa = self.swiglu_graph(g, p, m_sa, v_cls, self.config.shared_tokens);
        let d_sp = self.swiglu_graph(g, p, m_sp, v_cls, self.config.class_tokens);
        let sa = g.add(sa0, d_sa);
        let sp = g.add(p[class_layers[0]], d_sp);
        let shallow = g.concat_rows(&[sa, sp]);

        let deep = (1..self.config.depth)
            .map(|l| {
                let sa = self.fuse_shared_graph(g, p, w, polarity, l);
                g.concat_rows(&[sa, p[class_layers[l]]])
            })
            .collect();
        Ok(PromptVars { shallow, deep })
    }

    /// Unit concept vector for one polarity and prefix anchor.
    pub fn concept_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        v_cls: Var,
        class: usize,
        polarity: Polarity,
        prefix_index: usize,
    ) -> Result<(Var, PromptVars)> {
        let prompts = self.assemble_graph(g, p, v_cls, class, polarity)?;
        let c = self
            .proxy
            .encode(g, Some(prompts.shallow), &prompts.deep, polarity, prefix_index)?;
        Ok((c, prompts))
    }

    pub fn gate_weights(&self, v_cls: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.params.constants(&mut g);
        let v = g.constant(Mat::row_vec(v_cls));
        let w = self.gate_weights_graph(&mut g, &p, v);
        g.value(w).data.clone()
    }

    pub fn assemble_prompts(&self, v_cls: &[f64], class: usize) -> Result<PromptSet> {
        let mut g = Graph::new();
        let p = self.params.constants(&mut g);
        let v = g.constant(Mat::row_vec(v_cls));
        let mut shallow = Vec::with_capacity(2);
        let mut deep = Vec::with_capacity(2);
        for pol in Polarity::BOTH {
            let pv = self.assemble_graph(&mut g, &p, v, class, pol)?;
            shallow.push(g.value(pv.shallow).clone());
            deep.push(pv.deep.iter().map(|d| g.value(*d).clone()).collect::<Vec<_>>());
        }
        let [s0, s1]: [Mat; 2] = shallow.try_into().expect("two polarities");
        let [d0, d1]: [Vec<Mat>; 2] = deep.try_into().expect("two polarities");
        Ok(PromptSet {
            shallow: [s0, s1],
            deep: [d0, d1],
        })
    }

    /// Unit concept vector for one prefix anchor.
    pub fn concept_at(&self, v_cls: &[f64], class: usize, polarity: Polarity, prefix_index: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.constants(&mut g);
        let v = g.constant(Mat::row_vec(v_cls));
        let (c, _) = self.concept_graph(&mut g, &p, v, class, polarity, prefix_index)?;
        Ok(g.value(c).data.clone())
    }

    /// Concept vector averaged over all prefix anchors, renormalized.
    pub fn concept_vector(&self, v_cls: &[f64], class: usize, polarity: Polarity) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.constants(&mut g);
        let v = g.constant(Mat::row_vec(v_cls));
        let prompts = self.assemble_graph(&mut g, &p, v, class, polarity)?;
        let mut acc = vec![0.0; self.config.dim];
        for j in 0..self.proxy.anchors() {
            let c = self
                .proxy
                .encode(&mut g, Some(prompts.shallow), &prompts.deep, polarity, j)?;
            for (a, x) in acc.iter_mut().zip(&g.value(c).data) {
                *a += x;
            }
        }
        l2_normalize(&acc)
    }

    pub fn manual_anchors(&self) -> [Vec<f64>; 2] {
        Polarity::BOTH.map(|pol| self.proxy.manual_anchor(pol))
    }

    pub(crate) fn from_parts(
        config: DcfConfig,
        classes: Vec<String>,
        seed: u64,
        params: ParamStore,
    ) -> Result<Self> {
        let mut model = Self::new(config, classes, seed)?;
        if model.params.len() != params.len()
            || (0..params.len()).any(|i| {
                model.params.name(i) != params.name(i)
                    || model.params.get(i).shape() != params.get(i).shape()
            })
        {
            return Err(Error::format("checkpoint", "parameter list does not match the model layout"));
        }
        model.params = params;
        Ok(model)
    }
}

/// Encodes an already assembled prompt set through the proxy.
pub fn encode_prompt(
    ps: &PromptSet,
    prefix_index: usize,
    polarity: Polarity,
    proxy: &TextEncoderProxy,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let i = polarity.index();
    let shallow = g.constant(ps.shallow[i].clone());
    let deep: Vec<Var> = ps.deep[i].iter().map(|m| g.constant(m.clone())).collect();
    let c = proxy.encode(&mut g, Some(shallow), &deep, polarity, prefix_index)?;
    Ok(g.value(c).data.clone())
}

/// `Σ_k w_k E_k` for a dictionary given as `K` matrices.
pub fn fuse_shared_prompt(w: &[f64], experts: &[Mat]) -> Result<Mat> {
    if w.len() != experts.len() || experts.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} weights for {} experts",
            w.len(),
            experts.len()
        )));
    }
    let mut out = Mat::zeros(experts[0].rows, experts[0].cols);
    for (wk, e) in w.iter().zip(experts) {
        out.add_assign(&e.scaled(*wk));
    }
    Ok(out)
}
