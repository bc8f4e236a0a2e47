//! Bundle directory layout: `manifest.json` plus one little-endian binary
//! file per (class, split, array). Globals are `N × D` float32, patches
//! `N × L × H × W × D` float32, masks `N × H × W` u8 in {0, 1}.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassRecord, EmbeddingBundle, Sample, Shape, Split};
use crate::error::{Error, Result};

pub const VERSION: &str = "abound-bundle/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    dim: usize,
    layers: usize,
    grid: [usize; 2],
    seed: u64,
    classes: Vec<ManifestClass>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestClass {
    name: String,
    files: ManifestFiles,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFiles {
    train_normal: SplitFiles,
    test_normal: SplitFiles,
    test_anomaly: SplitFiles,
}

impl ManifestFiles {
    fn get(&self, split: Split) -> &SplitFiles {
        match split {
            Split::TrainNormal => &self.train_normal,
            Split::TestNormal => &self.test_normal,
            Split::TestAnomaly => &self.test_anomaly,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFiles {
    count: usize,
    globals: String,
    patches: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masks: Option<String>,
}

pub fn save_bundle(bundle: &EmbeddingBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = bundle.shape;
    let mut classes = Vec::with_capacity(bundle.classes.len());

    for (k, rec) in bundle.classes.iter().enumerate() {
        let mut files = Vec::with_capacity(3);
        for split in Split::ALL {
            let samples = rec.split(split);
            let stem = format!("{k}_{}", split.key());
            let globals = format!("{stem}_globals.f32");
            let patches = format!("{stem}_patches.f32");
            let has_masks = samples.iter().any(|s| s.mask.is_some());
            let masks = has_masks.then(|| format!("{stem}_masks.u8"));

            let mut gbuf = Vec::with_capacity(samples.len() * shape.dim * 4);
            let mut pbuf = Vec::with_capacity(samples.len() * shape.patch_len() * 4);
            let mut mbuf = Vec::new();
            for s in samples {
                check_sample(s, &shape, &globals)?;
                gbuf.extend(s.global.iter().flat_map(|x| x.to_le_bytes()));
                pbuf.extend(s.patches.iter().flat_map(|x| x.to_le_bytes()));
                if has_masks {
                    match &s.mask {
                        Some(m) => mbuf.extend_from_slice(m),
                        None => {
                            return Err(Error::format(
                                stem.clone(),
                                "split mixes masked and unmasked samples",
                            ))
                        }
                    }
                }
            }
            write(dir, &globals, &gbuf)?;
            write(dir, &patches, &pbuf)?;
            if let Some(m) = &masks {
                write(dir, m, &mbuf)?;
            }
            files.push(SplitFiles {
                count: samples.len(),
                globals,
                patches,
                masks,
            });
        }
        let mut it = files.into_iter();
        classes.push(ManifestClass {
            name: rec.name.clone(),
            files: ManifestFiles {
                train_normal: it.next().unwrap(),
                test_normal: it.next().unwrap(),
                test_anomaly: it.next().unwrap(),
            },
        });
    }

    let manifest = Manifest {
        version: VERSION.to_string(),
        dim: shape.dim,
        layers: shape.layers,
        grid: [shape.height, shape.width],
        seed: bundle.seed,
        classes,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        file: MANIFEST_FILE.into(),
        source: e,
    })?;
    write(dir, MANIFEST_FILE, text.as_bytes())
}

pub fn load_bundle(dir: &Path) -> Result<EmbeddingBundle> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let json_err = |e| Error::Json {
        file: MANIFEST_FILE.into(),
        source: e,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    match raw.get("version").and_then(|v| v.as_str()) {
        Some(VERSION) => {}
        other => {
            return Err(Error::VersionError {
                found: other.unwrap_or("<missing>").to_string(),
                expected: VERSION,
            })
        }
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(json_err)?;
    let shape = Shape {
        dim: manifest.dim,
        layers: manifest.layers,
        height: manifest.grid[0],
        width: manifest.grid[1],
    };
    if shape.dim == 0 || shape.layers == 0 || shape.cells() == 0 {
        return Err(Error::format(MANIFEST_FILE, "dim, layers and grid must be positive"));
    }

    let mut classes: Vec<ClassRecord> = Vec::with_capacity(manifest.classes.len());
    for mc in &manifest.classes {
        if classes.iter().any(|c| c.name == mc.name) {
            return Err(Error::format(
                MANIFEST_FILE,
                format!("duplicate class name `{}`", mc.name),
            ));
        }
        let mut rec = ClassRecord {
            name: mc.name.clone(),
            train_normals: Vec::new(),
            test_normals: Vec::new(),
            test_anomalies: Vec::new(),
        };
        for split in Split::ALL {
            *rec.split_mut(split) = read_split(dir, mc.files.get(split), &shape, split)?;
        }
        classes.push(rec);
    }

    Ok(EmbeddingBundle {
        shape,
        classes,
        seed: manifest.seed,
    })
}

fn check_sample(s: &Sample, shape: &Shape, file: &str) -> Result<()> {
    if s.global.len() != shape.dim || s.patches.len() != shape.patch_len() {
        return Err(Error::format(file, "sample shape does not match bundle shape"));
    }
    if s.mask.as_ref().is_some_and(|m| m.len() != shape.cells()) {
        return Err(Error::format(file, "mask shape does not match grid"));
    }
    Ok(())
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn read_exact_len(dir: &Path, name: &str, expected: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            name,
            format!("expected {expected} bytes from the manifest shape, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

fn read_split(dir: &Path, files: &SplitFiles, shape: &Shape, split: Split) -> Result<Vec<Sample>> {
    let n = files.count;
    let gbytes = read_exact_len(dir, &files.globals, n * shape.dim * 4)?;
    let pbytes = read_exact_len(dir, &files.patches, n * shape.patch_len() * 4)?;
    let masks = match &files.masks {
        Some(name) => {
            let m = read_exact_len(dir, name, n * shape.cells())?;
            if m.iter().any(|&x| x > 1) {
                return Err(Error::format(name.as_str(), "mask values must be 0 or 1"));
            }
            Some(m)
        }
        None if split == Split::TestAnomaly && n > 0 => {
            return Err(Error::format(
                files.globals.as_str(),
                "anomaly split has no mask file",
            ))
        }
        None => None,
    };

    let globals: Vec<f32> = f32s(&gbytes).collect();
    let patches: Vec<f32> = f32s(&pbytes).collect();
    Ok((0..n)
        .map(|i| Sample {
            global: globals[i * shape.dim..(i + 1) * shape.dim].to_vec(),
            patches: patches[i * shape.patch_len()..(i + 1) * shape.patch_len()].to_vec(),
            mask: masks
                .as_ref()
                .map(|m| m[i * shape.cells()..(i + 1) * shape.cells()].to_vec()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{synthesize_dataset, SynthConfig};

    fn cfg() -> SynthConfig {
        SynthConfig {
            n_classes: 2,
            shots: 2,
            n_test_normal: 2,
            n_test_anomaly: 2,
            dim: 8,
            layers: 2,
            grid: [3, 3],
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = synthesize_dataset(&cfg()).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(b, back);
        assert!(back.max_norm_deviation() < 1e-5);
    }

    #[test]
    fn saving_twice_gives_identical_bytes() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let b = synthesize_dataset(&cfg()).unwrap();
        save_bundle(&b, d1.path()).unwrap();
        save_bundle(&b, d2.path()).unwrap();
        for entry in fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(d1.path().join(&name)).unwrap(),
                fs::read(d2.path().join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn wrong_dim_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let b = synthesize_dataset(&cfg()).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"dim\": 8", "\"dim\": 16");
        fs::write(&mpath, text).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::FormatError { file, .. }) => assert_eq!(file, "0_train_normal_globals.f32"),
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let b = synthesize_dataset(&cfg()).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let p = dir.path().join("1_test_anomaly_patches.f32");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::FormatError { file, .. }) => assert_eq!(file, "1_test_anomaly_patches.f32"),
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&synthesize_dataset(&cfg()).unwrap(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace(VERSION, "abound-bundle/9");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::VersionError { .. })));
    }

    #[test]
    fn binary_layout_is_little_endian_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let b = synthesize_dataset(&cfg()).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("0_train_normal_globals.f32")).unwrap();
        let second_row_first = f32::from_le_bytes(bytes[32..36].try_into().unwrap());
        assert_eq!(second_row_first, b.classes[0].train_normals[1].global[0]);
        let masks = fs::read(dir.path().join("0_test_anomaly_masks.u8")).unwrap();
        assert_eq!(&masks[9..18], b.classes[0].test_anomalies[1].mask.as_ref().unwrap().as_slice());
    }
}
