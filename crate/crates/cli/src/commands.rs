//! The five subcommands. Each reads its inputs, writes its artifacts under
//! the run directory and never touches the inputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use abound::abf::{forge_fence, FenceBatch};
use abound::bundle::{load_bundle, save_bundle, synthesize_dataset, EmbeddingBundle, Split};
use abound::dcf::Polarity;
use abound::infer::{score_image, MemoryBanks, ScoredSample};
use abound::metrics::{aupr, auroc, pro, pro_sampled, ScoredSet};
use abound::model::Model;
use abound::numgrad::l2_normalize;
use abound::trainer::{fence_entropy, fence_originals, TrainReport, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::CliError;

pub const BUNDLE_DIR: &str = "bundle";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const FENCE_FILE: &str = "fences.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const MAPS_DIR: &str = "maps";
pub const METRICS_FILE: &str = "metrics.json";

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::from_io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::from_io(path, e))
}

/// Creates the run directory and writes the resolved config into it.
pub fn prepare_run(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.run_dir(command);
    create_dir(&dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    Ok(dir)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool starts"))
}

fn load_inputs(cfg: &RunConfig) -> Result<(EmbeddingBundle, Model)> {
    let bundle = load_bundle(&cfg.input("bundle")?)?;
    let model = Model::load(&cfg.input("checkpoint")?)?;
    if model.dcf.classes != bundle.class_names() {
        return Err(CliError::Config("paths.checkpoint: classes differ from the bundle's".into()));
    }
    if model.dcf.config.dim != bundle.shape.dim {
        return Err(CliError::Config("paths.checkpoint: feature dimension differs from the bundle's".into()));
    }
    Ok((bundle, model))
}

pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let bundle = synthesize_dataset(&cfg.synth)?;
    save_bundle(&bundle, &dir.join(BUNDLE_DIR))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FenceEntropy {
    pub after_epoch_1: f64,
    #[serde(rename = "final")]
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    #[serde(flatten)]
    pub report: TrainReport,
    pub fence_entropy: FenceEntropy,
}

pub fn train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let bundle = load_bundle(&cfg.input("bundle")?)?;
    let attack = cfg.train.attack;
    let seed = cfg.train.seed;
    let mut trainer = Trainer::new(&bundle, cfg.train.clone())?;
    trainer.run_epoch()?;
    let after_epoch_1 = fence_entropy(&trainer.model, &bundle, &attack, seed)?;
    while trainer.epochs_done() < cfg.train.epochs {
        trainer.run_epoch()?;
    }
    let (model, mut report) = trainer.finish();
    let last = fence_entropy(&model, &bundle, &attack, seed)?;
    model.save(&dir.join(CHECKPOINT_FILE))?;
    report.checkpoint = Some(CHECKPOINT_FILE.into());
    write_json(
        &dir.join(TRAIN_REPORT_FILE),
        &TrainOutput {
            report,
            fence_entropy: FenceEntropy { after_epoch_1, last },
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFence {
    pub class: String,
    pub p_pos: Vec<f64>,
    pub p_neg: Vec<f64>,
    pub fence: FenceBatch,
}

/// Fences against each class's concepts at the mean adapted training global.
pub fn forge(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (bundle, model) = load_inputs(cfg)?;
    let mut out = Vec::with_capacity(bundle.classes.len());
    for (k, class) in bundle.classes.iter().enumerate() {
        if class.train_normals.is_empty() {
            continue;
        }
        let originals = fence_originals(&class.train_normals, &model.adapter)?;
        let mut mean = vec![0.0; bundle.shape.dim];
        for o in &originals {
            mean.iter_mut().zip(o).for_each(|(m, x)| *m += x);
        }
        let v = l2_normalize(&mean)?;
        let p_pos = model.dcf.concept_vector(&v, k, Polarity::Pos)?;
        let p_neg = model.dcf.concept_vector(&v, k, Polarity::Neg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(k as u64);
        let fence = forge_fence(&originals, &p_pos, &p_neg, &cfg.train.attack, &mut rng)?;
        out.push(ClassFence {
            class: class.name.clone(),
            p_pos,
            p_neg,
            fence,
        });
    }
    write_json(&dir.join(FENCE_FILE), &out)
}

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub class: String,
    pub split: String,
    pub index: usize,
    pub label: u8,
    pub class_pred: String,
    pub score: f64,
    /// Fused map, `height × width` little-endian f32, relative to the scores directory.
    pub map: String,
    pub height: usize,
    pub width: usize,
}

fn pgm(values: &[f64], height: usize, width: usize) -> String {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| {
                let x = if span > 0.0 { (v - lo) / span } else { 0.0 };
                ((x * 255.0).round() as u8).to_string()
            })
            .collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

pub fn score(cfg: &RunConfig, dir: &Path, jobs: usize) -> Result<()> {
    let (bundle, model) = load_inputs(cfg)?;
    let banks = MemoryBanks::build(&bundle, &model)?;
    let refs = bundle.test_refs();
    let scored: Vec<ScoredSample> = pool(jobs)?.install(|| {
        refs.par_iter()
            .map(|r| score_image(bundle.sample(*r), &banks, &model, &cfg.score, None))
            .collect::<abound::Result<_>>()
    })?;

    let maps = dir.join(MAPS_DIR);
    create_dir(&maps)?;
    let names = bundle.class_names();
    let mut lines = Vec::new();
    for (n, (r, s)) in refs.iter().zip(&scored).enumerate() {
        let map_name = format!("{MAPS_DIR}/{n:05}.f32");
        let bytes: Vec<u8> = s.map.fused.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        write_file(&dir.join(&map_name), &bytes)?;
        if cfg.output.pgm {
            let text = pgm(&s.map.fused, s.map.height, s.map.width);
            write_file(&maps.join(format!("{n:05}.pgm")), text.as_bytes())?;
        }
        let record = ScoreRecord {
            class: names[r.class].clone(),
            split: r.split.key().into(),
            index: r.index,
            label: (r.split == Split::TestAnomaly) as u8,
            class_pred: names[s.class_pred].clone(),
            score: s.map.score,
            map: map_name,
            height: s.map.height,
            width: s.map.width,
        };
        serde_json::to_writer(&mut lines, &record).expect("record serializes");
        lines.push(b'\n');
    }
    write_file(&dir.join(SCORES_FILE), &lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub auroc: Option<f64>,
    pub pro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub samples: usize,
    pub image: ImageMetrics,
    pub pixel: PixelMetrics,
    pub class_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(flatten)]
    pub overall: GroupMetrics,
    pub per_class: BTreeMap<String, GroupMetrics>,
}

struct Scored {
    class: String,
    label: bool,
    correct: bool,
    score: f64,
    map: Vec<f64>,
    mask: Vec<u8>,
}

/// `None` where the metric is undefined for this subset.
fn defined(r: abound::Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(x) => Ok(Some(x)),
        Err(abound::Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn group_metrics(items: &[&Scored], height: usize, width: usize, cfg: &RunConfig) -> Result<GroupMetrics> {
    let image = ScoredSet::new(items.iter().map(|s| s.score).collect(), items.iter().map(|s| s.label).collect())?;
    let pixel = ScoredSet::new(
        items.iter().flat_map(|s| s.map.iter().copied()).collect(),
        items.iter().flat_map(|s| s.mask.iter().map(|&m| m != 0)).collect(),
    )?;
    let maps: Vec<Vec<f64>> = items.iter().map(|s| s.map.clone()).collect();
    let masks: Vec<Vec<u8>> = items.iter().map(|s| s.mask.clone()).collect();
    let limit = cfg.eval.fpr_limit;
    let pro_value = match cfg.eval.pro_thresholds {
        None => pro(&maps, &masks, height, width, limit),
        Some(n) => pro_sampled(&maps, &masks, height, width, limit, n),
    };
    let correct = items.iter().filter(|s| s.correct).count();
    Ok(GroupMetrics {
        samples: items.len(),
        image: ImageMetrics {
            auroc: defined(auroc(&image))?,
            aupr: defined(aupr(&image))?,
        },
        pixel: PixelMetrics {
            auroc: defined(auroc(&pixel))?,
            pro: defined(pro_value)?,
        },
        class_accuracy: if items.is_empty() { 0.0 } else { correct as f64 / items.len() as f64 },
    })
}

fn read_scores(cfg: &RunConfig, bundle: &EmbeddingBundle) -> Result<Vec<Scored>> {
    let scores_dir = cfg.input("scores")?;
    let path = scores_dir.join(SCORES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::from_io(&path, e))?;
    let shape = bundle.shape;
    let bad = |line: usize, msg: String| -> CliError {
        CliError::Run(abound::Error::FormatError {
            file: format!("{}:{line}", path.display()),
            msg,
        })
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ScoreRecord = serde_json::from_str(line).map_err(|e| bad(n + 1, e.to_string()))?;
        let k = bundle
            .class_index(&rec.class)
            .ok_or_else(|| bad(n + 1, format!("unknown class `{}`", rec.class)))?;
        let split = [Split::TestNormal, Split::TestAnomaly]
            .into_iter()
            .find(|s| s.key() == rec.split)
            .ok_or_else(|| bad(n + 1, format!("unknown split `{}`", rec.split)))?;
        let sample = bundle.classes[k]
            .split(split)
            .get(rec.index)
            .ok_or_else(|| bad(n + 1, format!("index {} out of range", rec.index)))?;
        if (rec.height, rec.width) != (shape.height, shape.width) {
            return Err(bad(n + 1, "map size differs from the bundle grid".into()));
        }
        let map_path = scores_dir.join(&rec.map);
        let bytes = fs::read(&map_path).map_err(|e| CliError::from_io(&map_path, e))?;
        if bytes.len() != 4 * shape.cells() {
            return Err(bad(n + 1, format!("{} has {} bytes", rec.map, bytes.len())));
        }
        let map = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(Scored {
            correct: rec.class_pred == rec.class,
            class: rec.class,
            label: split == Split::TestAnomaly,
            score: rec.score,
            map,
            mask: sample.mask.clone().unwrap_or_else(|| vec![0; shape.cells()]),
        });
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig, dir: &Path, jobs: usize) -> Result<()> {
    let bundle = load_bundle(&cfg.input("bundle")?)?;
    let scored = read_scores(cfg, &bundle)?;
    let (h, w) = (bundle.shape.height, bundle.shape.width);
    let names = bundle.class_names();
    let groups: Vec<Vec<&Scored>> = names
        .iter()
        .map(|name| scored.iter().filter(|s| &s.class == name).collect())
        .collect();
    let pool = pool(jobs)?;
    let (overall, per_class) = pool.install(|| {
        rayon::join(
            || group_metrics(&scored.iter().collect::<Vec<_>>(), h, w, cfg),
            || {
                groups
                    .par_iter()
                    .map(|g| group_metrics(g, h, w, cfg))
                    .collect::<Result<Vec<_>>>()
            },
        )
    });
    let metrics = Metrics {
        overall: overall?,
        per_class: names.into_iter().zip(per_class?).collect(),
    };
    write_json(&dir.join(METRICS_FILE), &metrics)
}

/// Flushes a line to stdout, ignoring a closed pipe.
pub fn announce(dir: &Path) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", dir.display());
}
