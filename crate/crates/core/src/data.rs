//! Labelled image collections, the synthetic generator and augmentation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Images `[H, W, C]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape("dataset", &[images.len()], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: num_classes,
            });
        }
        if let Some(first) = images.first() {
            if let Some(odd) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(Error::shape("dataset image", first.shape(), odd.shape()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W, C)` of the images.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| {
            let s = im.shape();
            (s[0], s[1], s[2])
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Deterministic stratified split; returns `(train, held_out)` with
    /// roughly `held_out_fraction` of every class held out.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut held = Vec::new();
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            members.shuffle(&mut rng);
            let k = (members.len() as f64 * held_out_fraction).round() as usize;
            held.extend_from_slice(&members[..k]);
            train.extend_from_slice(&members[k..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        (self.subset(&train), self.subset(&held))
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Std of the per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Maximum blob-centre shift per image, as a fraction of the side.
    pub center_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            images_per_class: 16,
            image_size: 32,
            seed: 0,
            noise_std: 0.05,
            center_jitter: 0.08,
        }
    }
}

const BLOBS_PER_CLASS: usize = 3;

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    color: [f64; 3],
}

/// Class-conditional RGB images: each class owns a few coloured Gaussian
/// blobs on a tinted background; every image jitters the blob centres and
/// adds pixel noise. Labels are balanced and ordered by class.
pub fn synthetic_dataset<T: Real>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    if spec.num_classes == 0 || spec.image_size == 0 {
        return Err(Error::InvalidConfig("synthetic dataset needs classes and a size".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) || !(0.0..0.5).contains(&spec.center_jitter) {
        return Err(Error::InvalidConfig("synthetic noise must be finite and non-negative, jitter in [0, 0.5)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("valid std");
    let size = spec.image_size;
    let mut images = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.num_classes {
        let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
        let blobs: Vec<Blob> = (0..BLOBS_PER_CLASS)
            .map(|_| Blob {
                cy: rng.random_range(0.2..0.8),
                cx: rng.random_range(0.2..0.8),
                radius: rng.random_range(0.08..0.2),
                color: std::array::from_fn(|_| rng.random_range(0.2..1.0)),
            })
            .collect();
        for _ in 0..spec.images_per_class {
            let shifts: Vec<(f64, f64)> = (0..BLOBS_PER_CLASS)
                .map(|_| {
                    let j = spec.center_jitter;
                    if j == 0.0 {
                        (0.0, 0.0)
                    } else {
                        (rng.random_range(-j..j), rng.random_range(-j..j))
                    }
                })
                .collect();
            let mut data = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = ((y as f64 + 0.5) / size as f64, (x as f64 + 0.5) / size as f64);
                    let mut pixel = background;
                    for (blob, (dy, dx)) in blobs.iter().zip(&shifts) {
                        let d2 = (py - blob.cy - dy).powi(2) + (px - blob.cx - dx).powi(2);
                        let w = (-d2 / (2.0 * blob.radius * blob.radius)).exp();
                        for (p, c) in pixel.iter_mut().zip(blob.color) {
                            *p = *p * (1.0 - w) + c * w;
                        }
                    }
                    for p in pixel {
                        let v: f64 = p + noise.sample(&mut rng);
                        data.push(T::c(v.clamp(0.0, 1.0)));
                    }
                }
            }
            images.push(Tensor::new(&[size, size, 3], data)?);
            labels.push(class);
        }
    }
    Dataset::new(images, labels, spec.num_classes)
}

/// Image file formats accepted by the folder loader.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ImageFormat {
    #[default]
    Ppm,
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ppm")
    }
}

impl FromStr for ImageFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ppm" => Ok(ImageFormat::Ppm),
            other => Err(format!("unsupported image format `{other}` (ppm)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Folder { path: PathBuf, format: ImageFormat },
}

/// Random resized crop followed by brightness, contrast and saturation
/// jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropJitter {
    /// Smallest crop side as a fraction of the image side.
    pub min_scale: f64,
    /// Each jitter factor is drawn from `[1 - j, 1 + j]`.
    pub color_jitter: f64,
}

impl Default for CropJitter {
    fn default() -> Self {
        Self {
            min_scale: 0.6,
            color_jitter: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Augment {
    #[default]
    None,
    CropJitter(CropJitter),
}

impl Augment {
    pub fn name(&self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::CropJitter(_) => "crop_jitter",
        }
    }

    /// Augmented copy with unchanged dimensions.
    pub fn apply<T: Real, R: Rng + ?Sized>(&self, image: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        match self {
            Augment::None => Ok(image.clone()),
            Augment::CropJitter(cj) => crop_jitter(image, cj, rng),
        }
    }
}

fn crop_jitter<T: Real, R: Rng + ?Sized>(image: &Tensor<T>, cj: &CropJitter, rng: &mut R) -> Result<Tensor<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape("augment", image.shape(), &[0, 0, 0]));
    };
    let scale = rng.random_range(cj.min_scale.min(1.0)..=1.0);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let j = cj.color_jitter;
    let factor = |rng: &mut R| if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
    let (brightness, contrast, saturation) = (factor(rng), factor(rng), factor(rng));

    let src = image.data();
    let mut out = vec![0.0f64; h * w * c];
    for y in 0..h {
        let sy = top + (y * ch) / h;
        for x in 0..w {
            let sx = left + (x * cw) / w;
            for k in 0..c {
                out[(y * w + x) * c + k] = src[(sy * w + sx) * c + k].as_f64() * brightness;
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v = mean + (*v - mean) * contrast);
    for px in out.chunks_mut(c.max(1)) {
        let gray = px.iter().sum::<f64>() / c as f64;
        px.iter_mut().for_each(|v| *v = gray + (*v - gray) * saturation);
    }
    Tensor::new(image.shape(), out.into_iter().map(|v| T::c(v.clamp(0.0, 1.0))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub augment: Augment,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            augment: Augment::None,
        }
    }
}

impl DatasetSpec {
    pub fn load<T: Real>(&self) -> Result<Dataset<T>> {
        match &self.source {
            DataSource::Synthetic(spec) => synthetic_dataset(spec),
            DataSource::Folder { path, format } => crate::io::load_image_folder(path, *format),
        }
    }
}

/// Endless shuffled index stream; each pass over the data is a fresh
/// permutation.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Self {
            len,
            order: Vec::new(),
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && self.len > 0 {
            if self.cursor == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
