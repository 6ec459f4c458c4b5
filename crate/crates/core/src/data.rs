//! Dataset loading, synthetic imbalanced dataset generation, and flip
//! augmentation.
//!
//! Synthetic images are per-class geometric templates (quadrants, then
//! stripes) plus clipped Gaussian noise, so class imbalance rather than
//! separability drives accuracy differences.

use crate::error::{Error, Result};
use crate::tensor::cutn;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
}

impl Dataset {
    /// Wraps an image stack `[N, ch, H, W]` and its labels; `num_classes`
    /// fixes the count vector length and bounds the labels.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Data(format!(
                "image stack must be [N, ch, H, W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        let mut class_counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::LabelRange {
                    label: y,
                    classes: num_classes,
                });
            }
            class_counts[y] += 1;
        }
        if !images.all_finite() {
            return Err(Error::Data("image stack contains non-finite values".into()));
        }
        Ok(Dataset {
            images,
            labels,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// `[ch, H, W]` of a single sample.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let per = self.images.numel() / self.len().max(1);
        &self.images.data()[index * per..(index + 1) * per]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_counts: Vec<usize>,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_counts.is_empty() {
            return Err(Error::Config("synth spec needs at least one class".into()));
        }
        if let Some(pos) = self.class_counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!(
                "synth class {pos} has count 0; every class needs at least 1 sample"
            )));
        }
        if self.image_size == 0 {
            return Err(Error::Config("synth image size must be positive".into()));
        }
        let classes = self.class_counts.len();
        if classes > 4 && (self.image_size >> (classes - 4)) == 0 {
            return Err(Error::Config(format!(
                "{classes} classes need image size of at least {} for distinct stripe patterns",
                1usize << (classes - 4)
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "noise std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Binary template for one class: quadrants for the first four classes,
/// horizontal stripe patterns of distinct periods after that.
fn template(class: usize, size: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; size * size];
    if class < 4 {
        let half = size / 2;
        let (r0, c0) = match class {
            0 => (0, 0),
            1 => (0, half),
            2 => (half, 0),
            _ => (half, half),
        };
        let rh = if size == 1 { 1 } else { size - half };
        for r in r0..(r0 + rh).min(size) {
            for c in c0..(c0 + rh).min(size) {
                img[r * size + c] = 1.0;
            }
        }
    } else {
        let band = (size >> (class - 3)).max(1);
        for r in 0..size {
            if (r / band) % 2 == 0 {
                for c in 0..size {
                    img[r * size + c] = 1.0;
                }
            }
        }
    }
    img
}

/// Deterministic in `spec.seed`: same spec, bitwise-identical dataset.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let size = spec.image_size;
    let classes = spec.class_counts.len();
    let total: usize = spec.class_counts.iter().sum();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| {
            Error::Config(format!("bad noise distribution: {e}"))
        })?)
    } else {
        None
    };
    let mut data = Vec::with_capacity(total * size * size);
    let mut labels = Vec::with_capacity(total);
    for (class, &count) in spec.class_counts.iter().enumerate() {
        let base = template(class, size);
        for _ in 0..count {
            labels.push(class);
            match noise {
                Some(dist) => {
                    for &v in &base {
                        let noisy = f64::from(v) + dist.sample(&mut rng);
                        data.push(noisy.clamp(0.0, 1.0) as f32);
                    }
                }
                None => data.extend_from_slice(&base),
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![total, 1, size, size], data)?,
        labels,
        classes,
    )
}

const MANIFEST_HEADER: &str = "path,label";

/// Reads a `path,label` manifest (header mandatory) and stacks the CUTN
/// images it references, u8 payloads scaled to [0,1]. Paths resolve
/// relative to the manifest's directory. With `num_classes` unset the
/// class count is one past the largest label.
pub fn load_dataset(manifest: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines();
    match lines.next() {
        Some(MANIFEST_HEADER) => {}
        other => {
            return Err(Error::Format {
                format: "manifest".into(),
                detail: format!("first line must be `{MANIFEST_HEADER}`, got {other:?}"),
            })
        }
    }
    let mut images: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<Vec<usize>> = None;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (path, label) = line.rsplit_once(',').ok_or_else(|| Error::Format {
            format: "manifest".into(),
            detail: format!("line {}: expected `path,label`", lineno + 2),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::Format {
            format: "manifest".into(),
            detail: format!("line {}: bad label {label:?}", lineno + 2),
        })?;
        let img = cutn::load_f32_image(&dir.join(path))?;
        match &dims {
            None => {
                if img.shape().len() != 3 {
                    return Err(Error::Data(format!(
                        "{path}: image must be [ch, H, W], got {:?}",
                        img.shape()
                    )));
                }
                dims = Some(img.shape().to_vec());
            }
            Some(d) if d != img.shape() => {
                return Err(Error::Data(format!(
                    "{path}: shape {:?} disagrees with first image {d:?}",
                    img.shape()
                )));
            }
            Some(_) => {}
        }
        images.extend_from_slice(img.data());
        labels.push(label);
    }
    let dims = dims.ok_or_else(|| Error::Data(format!("{}: no samples", manifest.display())))?;
    let classes = match num_classes {
        Some(c) => c,
        None => labels.iter().max().copied().unwrap_or(0) + 1,
    };
    let shape = vec![labels.len(), dims[0], dims[1], dims[2]];
    Dataset::new(Tensor::new(shape, images)?, labels, classes)
}

/// Writes each image as `img{index:05}.cutn` (f32) plus a manifest CSV,
/// and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (ch, h, w) = dataset.image_dims();
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for i in 0..dataset.len() {
        let name = format!("img{i:05}.cutn");
        let img = Tensor::new(vec![ch, h, w], dataset.image(i).to_vec())?;
        cutn::save(&dir.join(&name), &img)?;
        manifest.push_str(&format!("{name},{}\n", dataset.labels[i]));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

pub(crate) fn flip_horizontal(image: &mut [f32], ch: usize, h: usize, w: usize) {
    for c in 0..ch {
        for r in 0..h {
            image[(c * h + r) * w..(c * h + r + 1) * w].reverse();
        }
    }
}

/// Horizontal flip with probability `flip_prob`, otherwise identity.
pub fn augment(image: &Tensor<f32>, rng: &mut impl Rng, flip_prob: f64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Config(format!(
            "flip probability must be in [0,1], got {flip_prob}"
        )));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "augment",
            format!("image must be [ch, H, W], got {s:?}"),
        ));
    }
    let mut out = image.clone();
    if flip_prob > 0.0 && rng.gen_bool(flip_prob) {
        let (ch, h, w) = (s[0], s[1], s[2]);
        flip_horizontal(out.data_mut(), ch, h, w);
    }
    Ok(out)
}
