use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassRecord, EmbeddingBundle, Sample, Shape, Split};
use crate::error::{Error, Result};
use crate::numgrad::{dot, l2_normalize};

const MAX_PROTOTYPE_TRIES: usize = 10_000;
/// Prototypes are at least 60° apart.
const MAX_PROTOTYPE_COSINE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub shots: usize,
    pub n_test_normal: usize,
    pub n_test_anomaly: usize,
    pub noise_sigma: f64,
    pub anomaly_strength: f64,
    pub anomaly_patch_count: usize,
    pub dim: usize,
    pub layers: usize,
    pub grid: [usize; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            shots: 2,
            n_test_normal: 10,
            n_test_anomaly: 10,
            noise_sigma: 0.05,
            anomaly_strength: 0.8,
            anomaly_patch_count: 2,
            dim: 64,
            layers: 4,
            grid: [8, 8],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn shape(&self) -> Shape {
        Shape {
            dim: self.dim,
            layers: self.layers,
            height: self.grid[0],
            width: self.grid[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes", self.n_classes),
            ("shots", self.shots),
            ("n_test_normal", self.n_test_normal),
            ("n_test_anomaly", self.n_test_anomaly),
            ("anomaly_patch_count", self.anomaly_patch_count),
            ("dim", self.dim),
            ("layers", self.layers),
            ("grid", self.grid[0].min(self.grid[1])),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
            }
        }
        if self.dim < 2 {
            return Err(Error::InvalidParameter("dim must be at least 2".into()));
        }
        // zero noise / zero strength are accepted as degenerate calibration cases
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("anomaly_strength", self.anomaly_strength),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Generator ground truth: unit class prototypes and their defect directions.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub prototypes: Vec<Vec<f64>>,
    pub defect_directions: Vec<Vec<f64>>,
}

/// Axis-aligned rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn cells(&self, grid_w: usize) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| r * grid_w + c))
    }

    /// Uniform size in `[1, max_h] × [1, max_w]`, uniform valid position.
    fn random<R: Rng + ?Sized>(rng: &mut R, shape: &Shape, max_h: usize, max_w: usize) -> Rect {
        let height = rng.random_range(1..=max_h.min(shape.height));
        let width = rng.random_range(1..=max_w.min(shape.width));
        let top = rng.random_range(0..=shape.height - height);
        let left = rng.random_range(0..=shape.width - width);
        Rect {
            top,
            left,
            height,
            width,
        }
    }
}

pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<EmbeddingBundle> {
    synthesize_with_truth(cfg).map(|(b, _)| b)
}

pub fn synthesize_with_truth(cfg: &SynthConfig) -> Result<(EmbeddingBundle, SynthTruth)> {
    cfg.validate()?;
    let shape = cfg.shape();
    let truth = draw_truth(cfg)?;

    let mut classes = Vec::with_capacity(cfg.n_classes);
    let mut sample_index = 0u64;
    for k in 0..cfg.n_classes {
        let mut rec = ClassRecord {
            name: format!("class_{k}"),
            train_normals: Vec::new(),
            test_normals: Vec::new(),
            test_anomalies: Vec::new(),
        };
        for split in Split::ALL {
            let n = match split {
                Split::TrainNormal => cfg.shots,
                Split::TestNormal => cfg.n_test_normal,
                Split::TestAnomaly => cfg.n_test_anomaly,
            };
            for _ in 0..n {
                let mut rng = sample_stream(cfg.seed, sample_index);
                sample_index += 1;
                let s = if split == Split::TestAnomaly {
                    anomalous_sample(cfg, &shape, &truth, k, &mut rng)
                } else {
                    normal_sample(cfg, &shape, &truth.prototypes[k], &mut rng)
                };
                rec.split_mut(split).push(s);
            }
        }
        classes.push(rec);
    }

    Ok((
        EmbeddingBundle {
            shape,
            classes,
            seed: cfg.seed,
        },
        truth,
    ))
}

/// Independent stream per sample: seed XOR sample index.
fn sample_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index);
    rng.set_stream(1);
    rng
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn draw_truth(cfg: &SynthConfig) -> Result<SynthTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    let mut tries = 0;
    while prototypes.len() < cfg.n_classes {
        if tries == MAX_PROTOTYPE_TRIES {
            return Err(Error::GenerationError(format!(
                "could not place {} prototypes {}° apart in dimension {}",
                cfg.n_classes, 60, cfg.dim
            )));
        }
        tries += 1;
        let Ok(candidate) = l2_normalize(&gaussian_vec(&mut rng, cfg.dim)) else {
            continue;
        };
        if prototypes
            .iter()
            .all(|p| dot(p, &candidate) <= MAX_PROTOTYPE_COSINE)
        {
            prototypes.push(candidate);
        }
    }

    let mut defect_directions = Vec::with_capacity(cfg.n_classes);
    for mu in &prototypes {
        loop {
            let mut d = gaussian_vec(&mut rng, cfg.dim);
            let along = dot(&d, mu);
            for (x, m) in d.iter_mut().zip(mu) {
                *x -= along * m;
            }
            if let Ok(d) = l2_normalize(&d) {
                defect_directions.push(d);
                break;
            }
        }
    }
    Ok(SynthTruth {
        prototypes,
        defect_directions,
    })
}

fn noisy_unit<R: Rng + ?Sized>(mu: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = mu
        .iter()
        .map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    l2_normalize(&v).unwrap_or_else(|_| mu.to_vec())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn normal_sample<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    shape: &Shape,
    mu: &[f64],
    rng: &mut R,
) -> Sample {
    let global = noisy_unit(mu, cfg.noise_sigma, rng);
    let mut patches = Vec::with_capacity(shape.patch_len());
    for _ in 0..shape.layers * shape.cells() {
        patches.extend(to_f32(&noisy_unit(mu, cfg.noise_sigma, rng)));
    }
    Sample {
        global: to_f32(&global),
        patches,
        mask: None,
    }
}

fn anomalous_sample<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    shape: &Shape,
    truth: &SynthTruth,
    class: usize,
    rng: &mut R,
) -> Sample {
    let mut s = normal_sample(cfg, shape, &truth.prototypes[class], rng);
    let mut region = vec![false; shape.cells()];
    let max_side = |n: usize| n.div_ceil(2);
    for _ in 0..cfg.anomaly_patch_count {
        let rect = Rect::random(rng, shape, max_side(shape.height), max_side(shape.width));
        for cell in rect.cells(shape.width) {
            region[cell] = true;
        }
    }

    let shifted = cfg.anomaly_strength > 0.0;
    let defect = &truth.defect_directions[class];
    if shifted {
        for layer in 0..shape.layers {
            for (cell, _) in region.iter().enumerate().filter(|(_, &r)| r) {
                let start = (layer * shape.cells() + cell) * shape.dim;
                let slot = &mut s.patches[start..start + shape.dim];
                let moved: Vec<f64> = slot
                    .iter()
                    .zip(defect)
                    .map(|(&x, d)| x as f64 + cfg.anomaly_strength * d)
                    .collect();
                let moved = l2_normalize(&moved).expect("shifted patch is nonzero");
                for (o, v) in slot.iter_mut().zip(&moved) {
                    *o = *v as f32;
                }
            }
        }
    }

    let mut mean = vec![0.0f64; shape.dim];
    for chunk in s.patches.chunks(shape.dim) {
        for (m, &x) in mean.iter_mut().zip(chunk) {
            *m += x as f64;
        }
    }
    s.global = to_f32(&l2_normalize(&mean).unwrap_or_else(|_| truth.prototypes[class].clone()));
    s.mask = Some(region.iter().map(|&r| u8::from(r && shifted)).collect());
    s
}

/// Copies the donor's patch features inside `rect` into `s` on every layer.
/// The global feature becomes the normalized mean of layer-0 patches.
pub fn transplant(s: &Sample, donor: &Sample, shape: &Shape, rect: Rect) -> Sample {
    let mut out = s.clone();
    let mut mask = vec![0u8; shape.cells()];
    for cell in rect.cells(shape.width) {
        mask[cell] = 1;
        for layer in 0..shape.layers {
            let start = (layer * shape.cells() + cell) * shape.dim;
            out.patches[start..start + shape.dim]
                .copy_from_slice(&donor.patches[start..start + shape.dim]);
        }
    }
    let mut mean = vec![0.0f64; shape.dim];
    for cell in 0..shape.cells() {
        for (m, &x) in mean.iter_mut().zip(out.patch(shape, 0, cell)) {
            *m += x as f64;
        }
    }
    // a zero mean cannot occur for unit patches unless they cancel exactly; keep the old global then
    if let Ok(g) = l2_normalize(&mean) {
        out.global = to_f32(&g);
    }
    out.mask = Some(mask);
    out
}

/// Cut-and-paste anomaly: a random rectangle with sides in `[1, ⌈side/2⌉]`
/// transplanted from a donor of another class.
pub fn synthesize_anomaly<R: Rng + ?Sized>(
    s: &Sample,
    s_class: &str,
    donor: &Sample,
    donor_class: &str,
    shape: &Shape,
    rng: &mut R,
) -> Result<Sample> {
    if s_class == donor_class {
        return Err(Error::InvalidDonor(s_class.to_string()));
    }
    let rect = Rect::random(rng, shape, shape.height.div_ceil(2), shape.width.div_ceil(2));
    Ok(transplant(s, donor, shape, rect))
}
