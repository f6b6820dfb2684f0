//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/episode_0000/frame_0000.png
//! <root>/episode_0000/labels.jsonl      one {"step", "labels"} object per frame
//! ```
//!
//! Image-folder datasets (`<root>/<class>/<image>`) are also readable; each
//! image becomes a one-frame episode labelled with its class index.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::world::SyntheticWorldSpec;
use super::{AnnotatedFrame, Category, Dataset, Episode, LabelSchema, VariableSpec};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub id: usize,
    pub dir: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub episodes: Vec<EpisodeEntry>,
    pub spec_hash: String,
    pub seed: u64,
    pub schema: LabelSchema,
    /// `[height, width, channels]`
    pub shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    step: usize,
    labels: BTreeMap<String, i64>,
}

fn write_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    let level = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([level(image[[y as usize, x as usize, 0]])])
            });
            img.save(path)?;
        }
        3 => {
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([level(image[[y, x, 0]]), level(image[[y, x, 1]]), level(image[[y, x, 2]])])
            });
            img.save(path)?;
        }
        other => return Err(Error::Dataset(format!("cannot store {other}-channel images"))),
    }
    Ok(())
}

/// Reads an image as `H x W x channels` with `channels` 1 or 3.
pub fn read_image(path: &Path, channels: usize) -> Result<Array3<f32>> {
    let img = image::open(path)?;
    match channels {
        1 => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Ok(Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
            }))
        }
        3 => {
            let g = img.to_rgb8();
            let (w, h) = g.dimensions();
            Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| {
                g.get_pixel(x as u32, y as u32)[k] as f32 / 255.0
            }))
        }
        other => Err(Error::Dataset(format!("unsupported channel count {other}"))),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `data` under `root` and returns the manifest.
pub fn write_dataset(root: &Path, data: &Dataset, spec_hash: &str, seed: u64) -> Result<Manifest> {
    create_dir(root)?;
    let shape = data
        .frame_shape()
        .ok_or_else(|| Error::Dataset("refusing to write an empty dataset".into()))?;
    let mut entries = Vec::new();
    for ep in &data.episodes {
        let dir = format!("episode_{:04}", ep.id);
        let ep_path = root.join(&dir);
        create_dir(&ep_path)?;
        let labels_path = ep_path.join("labels.jsonl");
        let mut labels = fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        for (t, frame) in ep.frames.iter().enumerate() {
            write_png(&ep_path.join(format!("frame_{t:04}.png")), &frame.image)?;
            let line = serde_json::to_string(&LabelLine {
                step: t,
                labels: frame.labels.clone(),
            })?;
            writeln!(labels, "{line}").map_err(|e| Error::io(&labels_path, e))?;
        }
        entries.push(EpisodeEntry {
            id: ep.id,
            dir,
            frames: ep.frames.len(),
        });
    }
    let manifest = Manifest {
        episodes: entries,
        spec_hash: spec_hash.to_string(),
        seed,
        schema: data.schema.clone(),
        shape: [shape.0, shape.1, shape.2],
    };
    let path = root.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates the world's episodes and writes them under `root`.
pub fn generate_to_dir(spec: &SyntheticWorldSpec, root: &Path) -> Result<Manifest> {
    let data = spec.generate()?;
    write_dataset(root, &data, &spec.spec_hash(), spec.seed)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads an episode dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut episodes = Vec::new();
    for entry in &manifest.episodes {
        let ep_path = root.join(&entry.dir);
        let labels_path = ep_path.join("labels.jsonl");
        let file = fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut frames = Vec::with_capacity(entry.frames);
        for (t, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&labels_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LabelLine = serde_json::from_str(&line)?;
            if parsed.step != t {
                return Err(Error::Dataset(format!(
                    "{}: line {} has step {}",
                    labels_path.display(),
                    t + 1,
                    parsed.step
                )));
            }
            let image = read_image(&ep_path.join(format!("frame_{t:04}.png")), manifest.shape[2])?;
            frames.push(AnnotatedFrame {
                image,
                labels: parsed.labels,
            });
        }
        if frames.len() != entry.frames {
            return Err(Error::Dataset(format!(
                "{} lists {} frames, found {}",
                entry.dir,
                entry.frames,
                frames.len()
            )));
        }
        episodes.push(Episode { id: entry.id, frames });
    }
    Dataset::new(manifest.schema, episodes)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `<root>/<class>/<image>` trees. Images must already have the
/// requested size; classes are numbered in sorted directory order.
pub fn read_image_folder(root: &Path, shape: (usize, usize, usize)) -> Result<Dataset> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", root.display())));
    }
    let mut episodes = Vec::new();
    for (class, dir) in classes.iter().enumerate() {
        for path in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let image = read_image(&path, shape.2)?;
            if image.dim() != shape {
                return Err(Error::Dataset(format!(
                    "{} is {:?}, expected {:?}",
                    path.display(),
                    image.dim(),
                    shape
                )));
            }
            let labels = BTreeMap::from([("class".to_string(), class as i64)]);
            episodes.push(Episode {
                id: episodes.len(),
                frames: vec![AnnotatedFrame { image, labels }],
            });
        }
    }
    let schema = LabelSchema {
        variables: vec![VariableSpec {
            name: "class".into(),
            category: Category::Misc,
            num_classes: classes.len(),
        }],
    };
    Dataset::new(schema, episodes)
}

/// Reads whichever layout is present at `root`.
pub fn read_any(root: &Path, shape: (usize, usize, usize)) -> Result<Dataset> {
    if root.join(MANIFEST).exists() {
        read_dataset(root)
    } else {
        read_image_folder(root, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticWorldSpec {
            episodes: 2,
            episode_length: 3,
            noise: 20,
            ..Default::default()
        };
        let data = spec.generate().unwrap();
        let m1 = generate_to_dir(&spec, dir.path()).unwrap();
        assert_eq!(m1.episodes.len(), 2);
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
        let first = fs::read(dir.path().join(MANIFEST)).unwrap();
        generate_to_dir(&spec, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), first);
    }

    #[test]
    fn image_folder_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (class, value) in [("cat", 0.2f32), ("dog", 0.8)] {
            let d = dir.path().join(class);
            fs::create_dir_all(&d).unwrap();
            write_png(&d.join("a.png"), &Array3::from_elem((4, 4, 3), value)).unwrap();
        }
        let data = read_image_folder(dir.path(), (4, 4, 3)).unwrap();
        assert_eq!(data.episodes.len(), 2);
        assert_eq!(data.episodes[1].frames[0].labels["class"], 1);
        assert!(read_image_folder(dir.path(), (5, 4, 3)).is_err());
    }
}
