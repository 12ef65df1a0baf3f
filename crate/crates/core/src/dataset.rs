//! On-disk datasets: JSON-lines manifests referencing per-sample containers.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch::{Sample, TextInput};
use crate::container::{read_container, write_container, TensorContainer};
use crate::error::{DcerError, Result};
use crate::synthetic::{generate, Splits, SyntheticSpec};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Text reference: inline token ids, or a container path holding a
/// `text` embedding tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextRef {
    Tokens(Vec<usize>),
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub label: f32,
    pub audio: String,
    pub video: String,
    pub text: TextRef,
}

fn sample_file(id: &str) -> String {
    format!("samples/{id}.dctc")
}

/// Writes a generated dataset under `dir`: `spec.json`, one manifest per
/// split, and one container per sample holding `audio` and `video`.
pub fn write_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<Splits> {
    let splits = generate(spec)?;
    fs::create_dir_all(dir.join("samples")).map_err(|e| DcerError::io(dir, e))?;
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| DcerError::io(&spec_path, e))?;
    for (name, samples) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let path = dir.join(format!("{name}.jsonl"));
        let file = fs::File::create(&path).map_err(|e| DcerError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for s in samples {
            let rel = sample_file(&s.id);
            let mut c = TensorContainer::new();
            c.insert("audio", s.audio.clone())?;
            c.insert("video", s.video.clone())?;
            let text = match &s.text {
                TextInput::Tokens(t) => TextRef::Tokens(t.clone()),
                TextInput::Embeddings(e) => {
                    c.insert("text", e.clone())?;
                    TextRef::Path(rel.clone())
                }
            };
            write_container(&dir.join(&rel), &c)?;
            let rec = ManifestRecord {
                id: s.id.clone(),
                label: s.label,
                audio: rel.clone(),
                video: rel,
                text,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| DcerError::io(&path, e))?;
        }
        w.flush().map_err(|e| DcerError::io(&path, e))?;
    }
    Ok(splits)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| DcerError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DcerError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DcerError::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_entry(base: &Path, file: &str, name: &str) -> Result<crate::tensor::Tensor> {
    let path = resolve(base, file);
    let c = read_container(&path)?;
    c.get(name).cloned().ok_or_else(|| DcerError::Format {
        path,
        reason: format!("missing tensor {name}"),
    })
}

/// Loads one split, validating labels against `label_range`.
pub fn load_split(dir: &Path, split: &str, label_range: (f32, f32)) -> Result<Vec<Sample>> {
    let manifest = dir.join(format!("{split}.jsonl"));
    let records = read_manifest(&manifest)?;
    records
        .into_iter()
        .map(|r| {
            if !(label_range.0..=label_range.1).contains(&r.label) {
                return Err(DcerError::Input(format!(
                    "sample {} label {} outside {:?}",
                    r.id, r.label, label_range
                )));
            }
            let text = match &r.text {
                TextRef::Tokens(t) => TextInput::Tokens(t.clone()),
                TextRef::Path(p) => TextInput::Embeddings(load_entry(dir, p, "text")?),
            };
            Ok(Sample {
                audio: load_entry(dir, &r.audio, "audio")?,
                video: load_entry(dir, &r.video, "video")?,
                id: r.id,
                label: r.label,
                text,
            })
        })
        .collect()
}

/// Reads the generator spec stored next to the manifests, if any.
pub fn read_spec(dir: &Path) -> Result<SyntheticSpec> {
    let path = dir.join("spec.json");
    let text = fs::read_to_string(&path).map_err(|e| DcerError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_splits(dir: &Path, label_range: (f32, f32)) -> Result<Splits> {
    Ok(Splits {
        train: load_split(dir, "train", label_range)?,
        val: load_split(dir, "val", label_range)?,
        test: load_split(dir, "test", label_range)?,
    })
}
