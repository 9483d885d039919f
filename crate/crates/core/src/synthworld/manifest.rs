//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.jsonl    one record per image (train and eval)
//! <dir>/hidden_gt.jsonl   full boxes of image-level training images
//! <dir>/rasters/<id>.csrf
//! ```
//!
//! A manifest record is `{id, split, raster_path, supervision, label}` for
//! image-level data or `{id, split, raster_path, supervision, boxes}` with
//! `boxes: [{box: [x1, y1, x2, y2], category}]` for box-level data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Annotation, Dataset, Supervision, WorldError};
use crate::raster::{Raster, RasterError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const HIDDEN_FILE: &str = "hidden_gt.jsonl";
const RASTER_DIR: &str = "rasters";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    split: String,
    raster_path: String,
    supervision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<Annotation>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HiddenRecord {
    id: String,
    boxes: Vec<Annotation>,
}

fn record_for(im: &AnnotatedImage, split: &str) -> Record {
    let (supervision, label, boxes) = match &im.supervision {
        Supervision::BoxLevel(anns) => ("box", None, Some(anns.clone())),
        Supervision::ImageLevel(l) => ("image", Some(l.clone()), None),
    };
    Record {
        id: im.id.clone(),
        split: split.to_string(),
        raster_path: format!("{RASTER_DIR}/{}.csrf", im.id),
        supervision: supervision.to_string(),
        label,
        boxes,
    }
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), WorldError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the dataset under `dir` and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf, WorldError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(RASTER_DIR))?;
    let records: Vec<(Record, &AnnotatedImage)> = dataset
        .train
        .iter()
        .map(|im| (record_for(im, "train"), im))
        .chain(dataset.eval.iter().map(|im| (record_for(im, "eval"), im)))
        .collect();
    for (rec, im) in &records {
        im.raster.save(dir.join(&rec.raster_path))?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_lines(&manifest, records.iter().map(|(r, _)| r))?;
    write_lines(
        &dir.join(HIDDEN_FILE),
        dataset.hidden.iter().map(|(id, boxes)| HiddenRecord {
            id: id.clone(),
            boxes: boxes.clone(),
        }),
    )?;
    Ok(manifest)
}

fn format_error(line: usize, msg: impl Into<String>) -> WorldError {
    WorldError::FormatError {
        line,
        msg: msg.into(),
    }
}

/// Loads a dataset from its manifest path (or the directory holding it).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, WorldError> {
    let path = path.as_ref();
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest)?;
    let mut dataset = Dataset::default();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|s| s.as_str()).map(String::from));
            match id {
                Some(id) => format_error(n, format!("record {id}: {e}")),
                None => format_error(n, format!("unreadable record: {e}")),
            }
        })?;
        let supervision = match (rec.supervision.as_str(), rec.label, rec.boxes) {
            ("box", None, Some(boxes)) => Supervision::BoxLevel(boxes),
            ("image", Some(label), None) => Supervision::ImageLevel(label),
            (s, _, _) => {
                return Err(format_error(
                    n,
                    format!("record {}: supervision `{s}` with mismatched label/boxes", rec.id),
                ))
            }
        };
        let raster_path = dir.join(&rec.raster_path);
        if !raster_path.is_file() {
            return Err(WorldError::MissingRaster {
                id: rec.id,
                path: raster_path,
            });
        }
        let raster = Raster::load(&raster_path).map_err(|e| match e {
            RasterError::Io(io) => WorldError::Io(io),
            other => WorldError::Raster(other),
        })?;
        let im = AnnotatedImage {
            id: rec.id,
            raster,
            supervision,
        };
        match rec.split.as_str() {
            "train" => dataset.train.push(im),
            "eval" if im.is_box_level() => dataset.eval.push(im),
            other => {
                return Err(format_error(
                    n,
                    format!("record {}: bad split `{other}`", im.id),
                ))
            }
        }
    }
    let hidden_path = dir.join(HIDDEN_FILE);
    if hidden_path.is_file() {
        let mut hidden = BTreeMap::new();
        for (i, line) in fs::read_to_string(hidden_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: HiddenRecord = serde_json::from_str(line)
                .map_err(|e| format_error(i + 1, format!("{HIDDEN_FILE}: {e}")))?;
            hidden.insert(rec.id, rec.boxes);
        }
        dataset.hidden = hidden;
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, WorldConfig};
    use super::*;

    fn tiny() -> Dataset {
        generate_dataset(&WorldConfig {
            train_box_images: 4,
            train_image_images: 4,
            eval_images: 3,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        let manifest = save_dataset(&d, dir.path()).unwrap();
        assert_eq!(manifest, dir.path().join(MANIFEST_FILE));
        assert_eq!(load_dataset(&manifest).unwrap(), d);
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn image_records_carry_no_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&tiny(), dir.path()).unwrap();
        for line in fs::read_to_string(manifest).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if v["supervision"] == "image" {
                assert!(v.get("boxes").is_none());
                assert!(v["label"].is_string());
            }
        }
    }

    #[test]
    fn truncated_manifest_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let cut = &text[..text.len() - 20];
        fs::write(&manifest, cut).unwrap();
        match load_dataset(&manifest) {
            Err(WorldError::FormatError { line, msg }) => {
                assert_eq!(line, 11);
                assert!(msg.contains("unreadable"), "{msg}");
            }
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn invalid_record_is_reported_with_its_id() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let broken = text.replacen("\"supervision\":\"image\"", "\"supervision\":\"box\"", 1);
        fs::write(&manifest, broken).unwrap();
        match load_dataset(&manifest) {
            Err(WorldError::FormatError { msg, .. }) => assert!(msg.contains("train_img_00000")),
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn missing_raster_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("rasters/eval_00001.csrf")).unwrap();
        match load_dataset(&manifest) {
            Err(WorldError::MissingRaster { id, .. }) => assert_eq!(id, "eval_00001"),
            other => panic!("expected MissingRaster, got {other:?}"),
        }
    }
}
