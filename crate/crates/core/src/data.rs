//! Datasets, CIFAR binary records, the synthetic shape/colour dataset,
//! normalisation and shuffled batching.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::augment::ImageU8;
use crate::error::{CrldError, Result};
use crate::rng::{Lane, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-channel mean and standard deviation of `v / 255`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Population statistics over every pixel of `images`.
    pub fn compute(images: &[ImageU8]) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            for p in img.pixels.chunks_exact(3) {
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += img.height * img.width;
        }
        if count == 0 {
            return ChannelStats::IDENTITY;
        }
        let n = count as f64;
        let mut stats = ChannelStats::IDENTITY;
        for c in 0..3 {
            let m = sum[c] / n;
            let var = (sq[c] / n - m * m).max(0.0);
            stats.mean[c] = m as f32;
            // a flat channel keeps unit scale rather than dividing by zero
            stats.std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        stats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageU8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub stats: ChannelStats,
}

impl Dataset {
    /// Validates labels and image sizes. Statistics are computed from the
    /// images themselves; a test split should then adopt the train split's
    /// statistics via [`Dataset::with_stats`].
    pub fn new(images: Vec<ImageU8>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(CrldError::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(CrldError::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.height != first.height || i.width != first.width) {
                return Err(CrldError::Dataset("images differ in size".into()));
            }
        }
        let stats = ChannelStats::compute(&images);
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            stats,
        })
    }

    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = stats;
        self
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W)` of the images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height, i.width))
    }

    /// Normalised `N×3×H×W` tensor of the samples at `indices`, unaugmented.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let imgs: Vec<&ImageU8> = indices.iter().map(|&i| &self.images[i]).collect();
        normalize_batch(&imgs, &self.stats)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

// ---- normalisation -----------------------------------------------------

fn check_std(stats: &ChannelStats) -> Result<()> {
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(CrldError::InvalidArgument(format!(
            "channel std must be positive, got {:?}",
            stats.std
        )));
    }
    Ok(())
}

fn normalize_into(img: &ImageU8, stats: &ChannelStats, out: &mut [f32]) {
    let plane = img.height * img.width;
    for (i, p) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (p[c] as f32 / 255.0 - stats.mean[c]) / stats.std[c];
        }
    }
}

/// Planar `3×H×W` tensor of `(v/255 − mean) / std`.
pub fn normalize(img: &ImageU8, stats: &ChannelStats) -> Result<Tensor> {
    check_std(stats)?;
    let mut out = vec![0.0; img.pixels.len()];
    normalize_into(img, stats, &mut out);
    Tensor::new(vec![3, img.height, img.width], out)
}

/// Inverse of [`normalize`], rounding to the nearest byte.
pub fn denormalize(t: &Tensor, stats: &ChannelStats) -> Result<ImageU8> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(CrldError::shape("denormalize", format!("{shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut px = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let v = (t.data()[c * plane + i] * stats.std[c] + stats.mean[c]) * 255.0;
            px[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    ImageU8::new(h, w, px)
}

pub fn normalize_batch<I: AsRef<ImageU8>>(imgs: &[I], stats: &ChannelStats) -> Result<Tensor> {
    check_std(stats)?;
    let first = imgs
        .first()
        .ok_or_else(|| CrldError::Dataset("empty batch".into()))?
        .as_ref();
    let (h, w) = (first.height, first.width);
    let per = 3 * h * w;
    let mut out = vec![0.0; imgs.len() * per];
    for (img, dst) in imgs.iter().zip(out.chunks_exact_mut(per)) {
        let img = img.as_ref();
        if img.height != h || img.width != w {
            return Err(CrldError::shape("batch", "images differ in size"));
        }
        normalize_into(img, stats, dst);
    }
    Tensor::new(vec![imgs.len(), 3, h, w], out)
}

impl AsRef<ImageU8> for ImageU8 {
    fn as_ref(&self) -> &ImageU8 {
        self
    }
}

// ---- CIFAR binary ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        self.label_bytes() + 3072
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

impl FromStr for CifarVariant {
    type Err = CrldError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            other => Err(CrldError::Config(format!("unknown cifar variant {other:?}"))),
        }
    }
}

impl fmt::Display for CifarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        })
    }
}

/// Decodes 32×32 records with plane-major R, G, B bytes. CIFAR-100 records
/// carry a coarse then a fine label; the fine one is used.
pub fn parse_cifar_binary(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(CrldError::Dataset(format!(
            "{} bytes is not a multiple of the {rec}-byte {variant} record",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for r in bytes.chunks_exact(rec) {
        let label = r[variant.label_bytes() - 1] as usize;
        let planes = &r[variant.label_bytes()..];
        let mut px = vec![0u8; 3072];
        for i in 0..1024 {
            for c in 0..3 {
                px[i * 3 + c] = planes[c * 1024 + i];
            }
        }
        images.push(ImageU8::new(32, 32, px)?);
        labels.push(label);
    }
    Dataset::new(images, labels, variant.num_classes(), split)
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| CrldError::io(path, e))?;
    parse_cifar_binary(&bytes, variant, split)
}

/// Encodes 32×32 images in the record layout. CIFAR-100 coarse labels are
/// not tracked and are written as 0.
pub fn encode_cifar_binary(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.num_classes > variant.num_classes() {
        return Err(CrldError::Dataset(format!(
            "{} classes do not fit {variant}",
            ds.num_classes
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for (img, &y) in ds.images.iter().zip(&ds.labels) {
        if img.height != 32 || img.width != 32 {
            return Err(CrldError::Dataset(format!(
                "cifar records are 32x32, got {}x{}",
                img.height, img.width
            )));
        }
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(y as u8);
        for c in 0..3 {
            out.extend(img.pixels.iter().skip(c).step_by(3));
        }
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &Dataset, path: &Path, variant: CifarVariant) -> Result<()> {
    let bytes = encode_cifar_binary(ds, variant)?;
    fs::write(path, bytes).map_err(|e| CrldError::io(path, e))
}

// ---- synthetic shapes --------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk,
    Cross,
    Triangle,
    Ring,
}

const SHAPES: [Shape; 4] = [Shape::Disk, Shape::Cross, Shape::Triangle, Shape::Ring];

impl Shape {
    /// Membership of the point `(x, y)` given relative to the shape centre,
    /// in units of its radius, after undoing the rotation.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk => x * x + y * y <= 1.0,
            Shape::Cross => x.abs().max(y.abs()) <= 0.9 && x.abs().min(y.abs()) <= 0.3,
            Shape::Triangle => {
                // upward triangle inscribed in the unit circle
                y <= 0.5 && y >= -1.0 + 1.732 * x.abs() * 0.866
            }
            Shape::Ring => {
                let r2 = x * x + y * y;
                (0.36..=1.0).contains(&r2)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Parameters of the synthetic shape/colour dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
    /// Square image side.
    pub size: usize,
}

/// Renders one sample of class `class`.
///
/// Class `c` is keyed by a shape (`c mod 4`) and a hue band (`c div 4`,
/// bands spread evenly round the colour wheel). Each sample jitters the
/// position, radius, rotation, hue within its band and background, then adds
/// pixel noise.
fn render(class: usize, num_classes: usize, size: usize, rng: &mut RngStream) -> ImageU8 {
    let bands = num_classes.div_ceil(4).max(1);
    let shape = SHAPES[class % 4];
    let band = class / 4;
    let s = size as f64;
    let radius = s * (0.24 + 0.12 * rng.uniform());
    let margin = radius * 0.9;
    let cx = margin + (s - 2.0 * margin) * rng.uniform();
    let cy = margin + (s - 2.0 * margin) * rng.uniform();
    let theta = 2.0 * PI * rng.uniform();
    let (sin, cos) = theta.sin_cos();
    let band_width = 360.0 / bands as f64;
    let hue = band as f64 * band_width + band_width * (0.15 + 0.7 * rng.uniform());
    let fg = hsv_to_rgb(hue, 0.55 + 0.4 * rng.uniform(), 0.6 + 0.4 * rng.uniform());
    let bg_level = 20.0 + 90.0 * rng.uniform();
    let bg_tint = hsv_to_rgb(360.0 * rng.uniform(), 0.3 * rng.uniform(), 1.0);
    let mut px = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let (rx, ry) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let inside = shape.contains(rx, ry);
            for c in 0..3 {
                let base = if inside { fg[c] } else { bg_level * bg_tint[c] / 255.0 };
                let v = base + 12.0 * rng.normal();
                px[(y * size + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageU8 {
        height: size,
        width: size,
        pixels: px,
    }
}

/// Deterministic balanced dataset; sample `i` has class `i mod num_classes`.
/// The two splits draw from disjoint streams of the same seed.
pub fn synthetic_dataset(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(CrldError::Dataset("synthetic data needs at least 2 classes".into()));
    }
    if spec.size < 8 {
        return Err(CrldError::Dataset("synthetic images need side >= 8".into()));
    }
    let slot = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let n = spec.num_classes * spec.per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        let mut rng = RngStream::new(spec.seed, Lane::Synthetic, slot, i as u64);
        images.push(render(class, spec.num_classes, spec.size, &mut rng));
        labels.push(class);
    }
    Dataset::new(images, labels, spec.num_classes, split)
}

/// Train and test splits, the test split normalised with train statistics.
pub fn synthetic_pair(spec: &SyntheticSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let train = synthetic_dataset(spec, Split::Train)?;
    let test = synthetic_dataset(
        &SyntheticSpec {
            per_class: test_per_class,
            ..*spec
        },
        Split::Test,
    )?
    .with_stats(train.stats);
    Ok((train, test))
}

// ---- batching ----------------------------------------------------------

/// Shuffled epoch order, fully determined by `(seed, epoch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub epoch: u64,
    pub batch_size: usize,
    pub permutation: Vec<usize>,
}

impl BatchPlan {
    pub fn new(seed: u64, epoch: u64, len: usize, batch_size: usize) -> Result<Self> {
        if len == 0 {
            return Err(CrldError::Dataset("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > len {
            return Err(CrldError::InvalidArgument(format!(
                "batch size {batch_size} for {len} samples"
            )));
        }
        let mut permutation: Vec<usize> = (0..len).collect();
        let mut rng = RngStream::new(seed, Lane::Shuffle, epoch, 0);
        permutation.shuffle(rng.inner());
        Ok(BatchPlan {
            seed,
            epoch,
            batch_size,
            permutation,
        })
    }

    /// Consecutive chunks of the permutation. The last partial batch is kept
    /// unless it holds a single sample, which batch statistics cannot
    /// normalise; that one is dropped with a warning.
    pub fn batches(&self) -> Vec<&[usize]> {
        let mut out: Vec<&[usize]> = self.permutation.chunks(self.batch_size).collect();
        if self.batch_size > 1 && out.last().is_some_and(|b| b.len() == 1) {
            log::warn!(
                "epoch {}: dropping trailing batch of one sample ({})",
                self.epoch,
                out[out.len() - 1][0]
            );
            out.pop();
        }
        out
    }
}
