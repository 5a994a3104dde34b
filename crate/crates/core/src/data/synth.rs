//! Synthetic infrared scenes: a smooth background, Gaussian sensor noise and a
//! few small Gaussian-profile hot spots. Every scene is a pure function of
//! `(seed, index)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pnm::quantize;
use super::{Dataset, Sample};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Linear ramp in a random direction.
    Gradient,
    /// Base level plus a few broad Gaussian blobs.
    #[default]
    Clouds,
    /// Clouds plus a periodic texture.
    Clutter,
}

impl std::str::FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Background::Gradient),
            "clouds" => Ok(Background::Clouds),
            "clutter" => Ok(Background::Clutter),
            _ => Err(Error::Config(format!("unknown background {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub img_size: usize,
    /// Inclusive range of targets per scene.
    pub targets_per_image: [usize; 2],
    /// Inclusive range of target extents in pixels (the 3-sigma box side).
    pub target_size: [f64; 2],
    /// Range of peak contrast above the local background.
    pub target_intensity: [f64; 2],
    pub noise_sigma: f64,
    pub background: Background,
    pub seed: u64,
    /// Class boundaries on target size: class `k` holds sizes in
    /// `(size_buckets[k - 1], size_buckets[k]]`.
    pub size_buckets: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            img_size: 160,
            targets_per_image: [1, 3],
            target_size: [4.0, 12.0],
            target_intensity: [0.3, 0.5],
            noise_sigma: 0.03,
            background: Background::Clouds,
            seed: 0,
            size_buckets: vec![6.0],
        }
    }
}

/// Pixel gap kept between target boxes.
const TARGET_GAP: f64 = 4.0;
const PLACEMENT_RETRIES: usize = 100;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [tmin, tmax] = self.targets_per_image;
        let [smin, smax] = self.target_size;
        let [imin, imax] = self.target_intensity;
        if self.img_size < 8 {
            return bad(format!("img_size {} is below 8", self.img_size));
        }
        if tmin > tmax {
            return bad(format!("targets_per_image {tmin}..{tmax} is empty"));
        }
        if !(smin >= 1.0 && smin <= smax && smax < self.img_size as f64) {
            return bad(format!("target_size {smin}..{smax} must satisfy 1 <= min <= max < img_size"));
        }
        if !(imin >= 0.0 && imin <= imax && imax <= 1.0) {
            return bad(format!("target_intensity {imin}..{imax} must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if self.size_buckets.windows(2).any(|w| w[0] >= w[1]) || self.size_buckets.iter().any(|b| !(*b > 0.0)) {
            return bad("size_buckets must be positive and increasing".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_classes(&self) -> usize {
        self.size_buckets.len() + 1
    }

    pub fn class_of(&self, size: f64) -> usize {
        self.size_buckets.iter().filter(|&&b| size > b).count()
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.size_buckets.iter().map(|b| format!("size_le_{b}")).collect();
        match self.size_buckets.last() {
            Some(b) => names.push(format!("size_gt_{b}")),
            None => names.push("target".into()),
        }
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTarget {
    pub bbox: BBox,
    pub sigma: f64,
    pub contrast: f64,
    pub class_id: usize,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub sample: Sample,
    pub targets: Vec<SynthTarget>,
    /// Targets drawn before placement; more than `targets.len()` when some
    /// could not be placed without overlap.
    pub requested: usize,
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.img_size;
    let size = n as f64;
    let base = rng.random_range(0.15..0.3);
    let mut img = vec![base; n * n];
    match cfg.background {
        Background::Gradient => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.05..0.2);
            let (c, s) = (theta.cos(), theta.sin());
            for y in 0..n {
                for x in 0..n {
                    let u = ((x as f64 + 0.5) / size - 0.5) * c + ((y as f64 + 0.5) / size - 0.5) * s;
                    img[y * n + x] += amp * (u + 0.5);
                }
            }
        }
        Background::Clouds | Background::Clutter => {
            for _ in 0..4 {
                let (bx, by) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
                let sigma = rng.random_range(0.15..0.4) * size;
                let amp = rng.random_range(-0.06..0.12);
                for y in 0..n {
                    for x in 0..n {
                        let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                        img[y * n + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            if cfg.background == Background::Clutter {
                let period = rng.random_range(8.0..20.0);
                let theta = rng.random_range(0.0..PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                let (c, s) = (theta.cos(), theta.sin());
                for y in 0..n {
                    for x in 0..n {
                        let u = (x as f64 * c + y as f64 * s) * 2.0 * PI / period + phase;
                        img[y * n + x] += 0.04 * u.sin();
                    }
                }
            }
        }
    }
    img
}

fn separated(a: &BBox, b: &BBox) -> bool {
    a.x2() + TARGET_GAP <= b.x1()
        || b.x2() + TARGET_GAP <= a.x1()
        || a.y2() + TARGET_GAP <= b.y1()
        || b.y2() + TARGET_GAP <= a.y1()
}

/// Generates scene `index`: targets are centred on pixel centres so the peak
/// pixel carries the full contrast, and the image is quantized to the 256
/// levels an 8-bit file can hold.
pub fn synth_scene_with_meta(cfg: &SynthConfig, index: usize) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let n = cfg.img_size;
    let mut img = background(cfg, &mut rng);
    let requested = rng.random_range(cfg.targets_per_image[0]..=cfg.targets_per_image[1]);
    let mut targets: Vec<SynthTarget> = Vec::new();
    for _ in 0..requested {
        let size = uniform(&mut rng, cfg.target_size);
        let contrast = uniform(&mut rng, cfg.target_intensity);
        let half = (size / 2.0).ceil() as usize;
        for _ in 0..PLACEMENT_RETRIES {
            let px = rng.random_range(half..=n - half);
            let py = rng.random_range(half..=n - half);
            let bbox = BBox::new(px as f64 + 0.5, py as f64 + 0.5, size, size).clamp_to(n as f64, n as f64);
            if targets.iter().all(|t| separated(&t.bbox, &bbox)) {
                targets.push(SynthTarget {
                    bbox,
                    sigma: size / 6.0,
                    contrast,
                    class_id: cfg.class_of(size),
                });
                break;
            }
        }
    }
    for t in &targets {
        let reach = (4.0 * t.sigma).ceil() as isize + 1;
        let (cx, cy) = (t.bbox.cx, t.bbox.cy);
        let (px, py) = (cx.floor() as isize, cy.floor() as isize);
        for y in (py - reach).max(0)..(py + reach + 1).min(n as isize) {
            for x in (px - reach).max(0)..(px + reach + 1).min(n as isize) {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                img[y as usize * n + x as usize] += t.contrast * (-d2 / (2.0 * t.sigma * t.sigma)).exp();
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in &mut img {
            *v += noise.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = quantize(*v) as f64 / 255.0;
    }
    let gts = targets.iter().map(|t| GroundTruth::new(t.bbox, t.class_id)).collect();
    Ok(SynthScene {
        sample: Sample {
            image: Tensor::from_vec(Shape::new(1, 1, n, n), img)?,
            gts,
            id: scene_id(index),
        },
        targets,
        requested,
    })
}

pub fn synth_scene(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    Ok(synth_scene_with_meta(cfg, index)?.sample)
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Scenes `0..count` of `cfg`.
pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<Dataset> {
    let samples = (0..count).map(|i| synth_scene(cfg, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: cfg.class_names(),
        samples,
    })
}
