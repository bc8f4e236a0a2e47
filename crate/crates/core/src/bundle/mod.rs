//! Embedding bundles: per-class normal/anomalous samples of global and
//! per-layer patch features, their on-disk layout, and a deterministic
//! synthetic generator.

mod io;
mod synth;

pub use io::{load_bundle, save_bundle, MANIFEST_FILE, VERSION};
pub use synth::{
    synthesize_anomaly, synthesize_dataset, synthesize_with_truth, transplant, Rect, SynthConfig,
    SynthTruth,
};

use crate::numgrad::norm;

/// Feature geometry shared by every sample of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub dim: usize,
    pub layers: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.layers * self.cells() * self.dim
    }
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            height: 8,
            width: 8,
        }
    }
}

/// One image's features. Patches are laid out `layer × row × col × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub global: Vec<f32>,
    pub patches: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Sample {
    pub fn patch(&self, shape: &Shape, layer: usize, cell: usize) -> &[f32] {
        let start = (layer * shape.cells() + cell) * shape.dim;
        &self.patches[start..start + shape.dim]
    }

    pub fn global_f64(&self) -> Vec<f64> {
        self.global.iter().map(|&x| x as f64).collect()
    }

    /// Patch vectors of one layer as `cells × dim` doubles.
    pub fn layer_f64(&self, shape: &Shape, layer: usize) -> Vec<f64> {
        let n = shape.cells() * shape.dim;
        self.patches[layer * n..(layer + 1) * n]
            .iter()
            .map(|&x| x as f64)
            .collect()
    }

    pub fn is_anomalous(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.iter().any(|&x| x != 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    TrainNormal,
    TestNormal,
    TestAnomaly,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainNormal, Split::TestNormal, Split::TestAnomaly];

    pub fn key(self) -> &'static str {
        match self {
            Split::TrainNormal => "train_normal",
            Split::TestNormal => "test_normal",
            Split::TestAnomaly => "test_anomaly",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub name: String,
    pub train_normals: Vec<Sample>,
    pub test_normals: Vec<Sample>,
    pub test_anomalies: Vec<Sample>,
}

impl ClassRecord {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::TrainNormal => &self.train_normals,
            Split::TestNormal => &self.test_normals,
            Split::TestAnomaly => &self.test_anomalies,
        }
    }

    pub(crate) fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::TrainNormal => &mut self.train_normals,
            Split::TestNormal => &mut self.test_normals,
            Split::TestAnomaly => &mut self.test_anomalies,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub shape: Shape,
    pub classes: Vec<ClassRecord>,
    pub seed: u64,
}

/// Reference to one test sample of a bundle, in manifest order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestRef {
    pub class: usize,
    pub split: Split,
    pub index: usize,
}

impl EmbeddingBundle {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// The first `k` training normals of every class, in manifest order.
    pub fn with_shots(&self, k: usize) -> EmbeddingBundle {
        let mut out = self.clone();
        for c in &mut out.classes {
            c.train_normals.truncate(k);
        }
        out
    }

    /// Every test sample (normals before anomalies, class-major).
    pub fn test_refs(&self) -> Vec<TestRef> {
        let mut refs = Vec::new();
        for (class, rec) in self.classes.iter().enumerate() {
            for split in [Split::TestNormal, Split::TestAnomaly] {
                for index in 0..rec.split(split).len() {
                    refs.push(TestRef { class, split, index });
                }
            }
        }
        refs
    }

    pub fn sample(&self, r: TestRef) -> &Sample {
        &self.classes[r.class].split(r.split)[r.index]
    }

    /// Largest deviation from unit norm over every stored vector.
    pub fn max_norm_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for c in &self.classes {
            for split in Split::ALL {
                for s in c.split(split) {
                    let g: Vec<f64> = s.global_f64();
                    worst = worst.max((norm(&g) - 1.0).abs());
                    for chunk in s.patches.chunks(self.shape.dim) {
                        let v: Vec<f64> = chunk.iter().map(|&x| x as f64).collect();
                        worst = worst.max((norm(&v) - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}
