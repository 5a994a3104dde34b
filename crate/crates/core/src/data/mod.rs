//! Dataset plumbing: YOLO-style text labels, portable-anymap images, the
//! `images/ labels/ classes.txt` directory layout, seeded splits and the
//! synthetic scene generator.

mod pnm;
mod synth;


use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use pnm::{decode_pnm, encode_pnm, load_image, save_image};
pub use synth::{
    scene_id, synth_dataset, synth_scene, synth_scene_with_meta, Background, SynthConfig, SynthScene, SynthTarget,
};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, c, h, w)` with values in `[0, 1]`.
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
    pub id: String,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.w, s.h)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// The samples whose ids are listed, in the listed order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let samples = ids
            .iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Error::invalid("Dataset::subset", format!("unknown id {id:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            classes: self.classes.clone(),
            samples,
        })
    }
}

/// Parses `class cx cy w h` lines (normalized coordinates) into pixel boxes
/// for a `width x height` image. Blank lines are skipped; boxes are clipped
/// to the image.
pub fn parse_labels(text: &str, path: &Path, width: usize, height: usize) -> Result<Vec<GroundTruth>> {
    let err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(lineno, format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("class {:?} is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            let x: f64 = f.parse().map_err(|_| err(lineno, format!("{f:?} is not a number")))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(err(lineno, format!("value {x} outside [0, 1]")));
            }
            v[k] = x;
        }
        if v[2] == 0.0 || v[3] == 0.0 {
            return Err(err(lineno, "zero-size box".into()));
        }
        let (w, h) = (width as f64, height as f64);
        let bbox = BBox::new(v[0] * w, v[1] * h, v[2] * w, v[3] * h).clamp_to(w, h);
        if !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(err(lineno, "box lies outside the image".into()));
        }
        out.push(GroundTruth::new(bbox, class_id));
    }
    Ok(out)
}

pub fn load_labels(path: &Path, width: usize, height: usize) -> Result<Vec<GroundTruth>> {
    parse_labels(&fs::read_to_string(path)?, path, width, height)
}

pub fn format_labels(gts: &[GroundTruth], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    gts.iter()
        .map(|g| {
            let b = &g.bbox;
            format!("{} {:.6} {:.6} {:.6} {:.6}\n", g.class_id, b.cx / w, b.cy / h, b.w / w, b.h / h)
        })
        .collect()
}

pub fn save_labels(path: &Path, gts: &[GroundTruth], width: usize, height: usize) -> Result<()> {
    fs::write(path, format_labels(gts, width, height))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then `floor(n * r)` ids each for train and val and the
/// remainder for test.
pub fn split_dataset(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split_dataset", format!("ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() as f64;
    // The tolerance keeps products like 10 * 0.7 from flooring to 6.
    let n_train = (n * ratios[0] + 1e-9).floor() as usize;
    let n_val = ((n * ratios[1] + 1e-9).floor() as usize).min(order.len() - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split { train: order, val, test })
}

/// Writes `images/<id>.pgm`, `labels/<id>.txt` and `classes.txt`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let classes: String = data.classes.iter().map(|c| format!("{c}\n")).collect();
    fs::write(dir.join("classes.txt"), classes)?;
    for s in &data.samples {
        let (w, h) = s.size();
        save_image(&s.image, &dir.join("images").join(format!("{}.pgm", s.id)))?;
        save_labels(&dir.join("labels").join(format!("{}.txt", s.id)), &s.gts, w, h)?;
    }
    Ok(())
}

/// Reads a dataset directory; samples are ordered by id. An image without a
/// label file has no targets.
pub fn load_dataset(dir: &Path, channels: usize) -> Result<Dataset> {
    let classes: Vec<String> = fs::read_to_string(dir.join("classes.txt"))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir.join("images"))? {
        let path = entry?.path();
        let is_pnm = matches!(path.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm"));
        if let (true, Some(stem)) = (is_pnm, path.file_stem().and_then(|s| s.to_str())) {
            ids.push((stem.to_string(), path.clone()));
        }
    }
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    for (id, path) in ids {
        let image = load_image(&path, channels)?;
        let s = image.shape();
        let label_path = dir.join("labels").join(format!("{id}.txt"));
        let gts = if label_path.exists() {
            load_labels(&label_path, s.w, s.h)?
        } else {
            Vec::new()
        };
        if let Some(g) = gts.iter().find(|g| g.class_id >= classes.len()) {
            return Err(Error::Parse {
                path: label_path,
                line: 0,
                detail: format!("class {} not listed in classes.txt", g.class_id),
            });
        }
        samples.push(Sample { image, gts, id });
    }
    Ok(Dataset { classes, samples })
}

/// Stacks the images of `samples` into one `(n, c, h, w)` batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}
