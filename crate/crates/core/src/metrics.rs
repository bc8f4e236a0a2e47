//! Ranking and localization metrics: AUROC, average precision, PRO.

use crate::error::{Error, Result};

/// Scores with binary labels (`true` = anomaly).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::InvalidParameter(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidParameter("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Indices in descending score order, stable on ties.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Runs of equal scores in a descending order, as `(positives, negatives)`.
fn tie_groups(s: &ScoredSet, order: &[usize]) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let v = s.scores[order[i]];
        let (mut p, mut n) = (0, 0);
        while i < order.len() && s.scores[order[i]] == v {
            if s.labels[order[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        groups.push((p, n));
    }
    groups
}

/// Mann–Whitney estimate of `P(pos > neg) + ½ P(pos = neg)`.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let pos = s.positives();
    let neg = s.labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both labels"));
    }
    let mut wins = 0.0;
    let mut neg_below = neg as f64;
    for (p, n) in tie_groups(s, &s.descending()) {
        neg_below -= n as f64;
        wins += p as f64 * (neg_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision; each tie group is one threshold.
pub fn aupr(s: &ScoredSet) -> Result<f64> {
    let pos = s.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive"));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in tie_groups(s, &s.descending()) {
        tp += p;
        seen += p + n;
        ap += (tp as f64 / seen as f64) * p as f64;
    }
    Ok(ap / pos as f64)
}

/// 4-connected components of a binary mask, labelled `1..=count` (0 = background).
pub fn label_components(mask: &[u8], height: usize, width: usize) -> (Vec<usize>, usize) {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let n = height * width;
    let mut parent: Vec<usize> = (0..n).collect();
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if mask[i] == 0 {
                continue;
            }
            for j in [(c + 1 < width).then(|| i + 1), (r + 1 < height).then(|| i + width)]
                .into_iter()
                .flatten()
            {
                if mask[j] != 0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = vec![0; n];
    let mut ids = vec![0usize; n];
    let mut count = 0;
    for i in 0..n {
        if mask[i] == 0 {
            continue;
        }
        let root = find(&mut parent, i);
        if ids[root] == 0 {
            count += 1;
            ids[root] = count;
        }
        labels[i] = ids[root];
    }
    (labels, count)
}

/// Area under a piecewise-linear `(fpr, pro)` curve from 0 to `limit`,
/// divided by `limit`. Points must be sorted by fpr. The curve is held flat
/// after its last point.
fn normalized_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            return area / limit;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            return area / limit;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    let (x, y) = *points.last().expect("curve has a start point");
    area += (limit - x).max(0.0) * y;
    area / limit
}

struct ProInput {
    scores: Vec<f64>,
    /// component id per pixel, 0 for background; ids are global across maps
    component: Vec<usize>,
    sizes: Vec<usize>,
    negatives: usize,
}

fn pro_input(maps: &[Vec<f64>], masks: &[Vec<u8>], height: usize, width: usize) -> Result<ProInput> {
    if maps.len() != masks.len() {
        return Err(Error::InvalidParameter(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let cells = height * width;
    let mut scores = Vec::with_capacity(maps.len() * cells);
    let mut component = Vec::with_capacity(maps.len() * cells);
    let mut sizes = vec![0];
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != cells || mask.len() != cells {
            return Err(Error::InvalidParameter(format!("map or mask is not {height}×{width}")));
        }
        if map.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidParameter("NaN score".into()));
        }
        let (labels, count) = label_components(mask, height, width);
        let base = sizes.len() - 1;
        sizes.resize(sizes.len() + count, 0);
        for &l in &labels {
            let id = if l == 0 { 0 } else { base + l };
            sizes[id] += (l != 0) as usize;
            component.push(id);
        }
        scores.extend_from_slice(map);
    }
    if sizes.len() == 1 {
        return Err(Error::UndefinedMetric("PRO needs at least one anomalous region"));
    }
    let negatives = component.iter().filter(|&&c| c == 0).count();
    Ok(ProInput {
        scores,
        component,
        sizes,
        negatives,
    })
}

fn pro_point(overlap: &[usize], sizes: &[usize], fp: usize, negatives: usize) -> (f64, f64) {
    let regions = sizes.len() - 1;
    let mean: f64 = (1..sizes.len()).map(|c| overlap[c] as f64 / sizes[c] as f64).sum::<f64>() / regions as f64;
    let fpr = if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 };
    (fpr, mean)
}

/// Per-region overlap integrated over false-positive rate up to `fpr_limit`.
///
/// Cells are predicted anomalous when their score is strictly above the
/// threshold; thresholds run over every distinct score, giving the exact
/// curve from `(0, 0)`.
pub fn pro(maps: &[Vec<f64>], masks: &[Vec<u8>], height: usize, width: usize, fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidParameter(format!("fpr limit {fpr_limit} outside (0, 1]")));
    }
    let input = pro_input(maps, masks, height, width)?;
    let mut order: Vec<usize> = (0..input.scores.len()).collect();
    order.sort_by(|&a, &b| input.scores[b].total_cmp(&input.scores[a]));

    let mut overlap = vec![0usize; input.sizes.len()];
    let mut fp = 0;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let v = input.scores[order[i]];
        points.push(pro_point(&overlap, &input.sizes, fp, input.negatives));
        while i < order.len() && input.scores[order[i]] == v {
            match input.component[order[i]] {
                0 => fp += 1,
                c => overlap[c] += 1,
            }
            i += 1;
        }
    }
    Ok(normalized_area(&points, fpr_limit))
}

/// PRO with `n` evenly spaced thresholds over the observed score range.
pub fn pro_sampled(
    maps: &[Vec<f64>],
    masks: &[Vec<u8>],
    height: usize,
    width: usize,
    fpr_limit: f64,
    n: usize,
) -> Result<f64> {
    if n < 2 || !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidParameter("need n ≥ 2 thresholds and a limit in (0, 1]".into()));
    }
    let input = pro_input(maps, masks, height, width)?;
    let lo = input.scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = input.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut points = vec![(0.0, 0.0)];
    for k in (0..n).rev() {
        let t = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let mut overlap = vec![0usize; input.sizes.len()];
        let mut fp = 0;
        for (s, &c) in input.scores.iter().zip(&input.component) {
            if *s > t {
                match c {
                    0 => fp += 1,
                    c => overlap[c] += 1,
                }
            }
        }
        points.push(pro_point(&overlap, &input.sizes, fp, input.negatives));
    }
    Ok(normalized_area(&points, fpr_limit))
}
