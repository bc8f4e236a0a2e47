use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Polarity;
use crate::error::{Error, Result};
use crate::numgrad::{l2_normalize, Graph, Mat, Var};

/// Frozen stand-in for a text encoder.
///
/// A token sequence `[SOT] prompt prefix [EOT] [PAD]…` runs through `depth`
/// residual stages `X ← X + tanh(causal_mean(X) · W_i)`. Before every stage
/// after the first, the prompt rows are replaced by the next deep prompt.
/// The concept vector is `normalize(x_EOT · W_out)`.
///
/// Token mixing is causal, so rows after EOT never influence the output and
/// only the prefix `0..=EOT` of the padded sequence is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderProxy {
    pub dim: usize,
    pub context_length: usize,
    pub sot: Mat,
    pub eot: Mat,
    pub pad: Mat,
    /// `prefixes[polarity][anchor]`, each `prefix_len × dim` with unit rows.
    pub prefixes: [Vec<Mat>; 2],
    pub stages: Vec<Mat>,
    pub out_proj: Mat,
}

/// SOT/EOT rows are shorter than content rows so the shared delimiters do
/// not swamp the prefix in the mixed EOT state.
const DELIMITER_SCALE: f64 = 0.3;

fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::randn(rows, dim, 1.0, rng);
    for r in 0..rows {
        let n = l2_normalize(m.row(r)).expect("gaussian row is nonzero");
        m.row_mut(r).copy_from_slice(&n);
    }
    m
}

impl TextEncoderProxy {
    pub fn new(
        dim: usize,
        depth: usize,
        anchors: usize,
        prefix_len: usize,
        context_length: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let sot = unit_rows(1, dim, &mut rng).scaled(DELIMITER_SCALE);
        let eot = unit_rows(1, dim, &mut rng).scaled(DELIMITER_SCALE);
        let pad = unit_rows(1, dim, &mut rng);
        let prefixes = [
            (0..anchors).map(|_| unit_rows(prefix_len, dim, &mut rng)).collect(),
            (0..anchors).map(|_| unit_rows(prefix_len, dim, &mut rng)).collect(),
        ];
        let gain = 1.0 / (dim as f64).sqrt();
        let stages = (0..depth).map(|_| Mat::randn(dim, dim, gain, &mut rng)).collect();
        let out_proj = Mat::randn(dim, dim, gain, &mut rng);
        Self {
            dim,
            context_length,
            sot,
            eot,
            pad,
            prefixes,
            stages,
            out_proj,
        }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn anchors(&self) -> usize {
        self.prefixes[0].len()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefixes[0].first().map_or(0, |m| m.rows)
    }

    /// Encodes `[SOT] shallow prefix [EOT]` with deep prompts substituted at
    /// stages `1..depth`. `deep` may be empty only when `shallow` is `None`.
    pub fn encode(
        &self,
        g: &mut Graph,
        shallow: Option<Var>,
        deep: &[Var],
        polarity: Polarity,
        prefix_index: usize,
    ) -> Result<Var> {
        self.encode_inner(g, shallow, deep, polarity, prefix_index, None)
    }

    pub(crate) fn encode_inner(
        &self,
        g: &mut Graph,
        shallow: Option<Var>,
        deep: &[Var],
        polarity: Polarity,
        prefix_index: usize,
        pad_rows: Option<&Mat>,
    ) -> Result<Var> {
        let prefix = self.prefixes[polarity.index()]
            .get(prefix_index)
            .ok_or_else(|| Error::InvalidParameter(format!("prefix index {prefix_index}")))?;
        let prompt_len = shallow.map_or(0, |s| g.value(s).rows);
        if shallow.is_some() && deep.len() + 1 != self.depth() {
            return Err(Error::InvalidParameter(format!(
                "{} deep prompts for a {}-stage proxy",
                deep.len(),
                self.depth()
            )));
        }
        let needed = 1 + prompt_len + prefix.rows + 1;
        if needed > self.context_length {
            return Err(Error::PromptTooLong {
                needed,
                limit: self.context_length,
            });
        }

        let sot = g.constant(self.sot.clone());
        let pre = g.constant(prefix.clone());
        let eot = g.constant(self.eot.clone());
        let mut parts = vec![sot];
        parts.extend(shallow);
        parts.extend([pre, eot]);
        if let Some(pad) = pad_rows {
            parts.push(g.constant(pad.clone()));
        }
        let mut x = g.concat_rows(&parts);
        let total = g.value(x).rows;

        for (i, w) in self.stages.iter().enumerate() {
            if i > 0 && prompt_len > 0 {
                let head = g.slice_rows(x, 0, 1);
                let tail = g.slice_rows(x, 1 + prompt_len, total - 1 - prompt_len);
                x = g.concat_rows(&[head, deep[i - 1], tail]);
            }
            let wv = g.constant(w.clone());
            let mixed = g.causal_mean(x);
            let h = g.matmul(mixed, wv);
            let t = g.tanh(h);
            x = g.add(x, t);
        }

        let eot_row = g.slice_rows(x, needed - 1, 1);
        let wout = g.constant(self.out_proj.clone());
        let y = g.matmul(eot_row, wout);
        Ok(g.normalize_rows(y))
    }

    /// Average over anchors of the anchor-only encoding, renormalized.
    pub fn manual_anchor(&self, polarity: Polarity) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for j in 0..self.anchors() {
            let mut g = Graph::new();
            let v = self
                .encode(&mut g, None, &[], polarity, j)
                .expect("anchor-only prompt fits the context");
            for (a, x) in acc.iter_mut().zip(&g.value(v).data) {
                *a += x;
            }
        }
        l2_normalize(&acc).expect("anchor average is nonzero")
    }
}
