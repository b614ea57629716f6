//! Synthetic shapes dataset, labeled/unlabeled partitions and batch streams.
//!
//! Each sample is a `3×H×W` image in `[0, 1]` with a textured background
//! (class 0) and one to four filled shapes. Object class `c ≥ 1` fixes both
//! the shape kind (`(c − 1) mod 3`: rectangle, ellipse, triangle) and a
//! color family (`(c − 1) / 3`). Classes inside a family share a base hue
//! and differ only by a small color offset, so shape is needed to tell them
//! apart.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Error, Result};
use crate::guard::AccessCounter;
use crate::losses::LabelMap;
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const BACKGROUND: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub id: usize,
    /// `[3, H, W]`
    pub image: Tensor,
    /// `H×W`, row-major.
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub samples: Vec<ToySample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorParams {
    /// Per-pixel Gaussian noise on the whole image.
    pub pixel_noise: f64,
    /// Per-shape uniform jitter applied to each color channel.
    pub color_jitter: f64,
    /// Offset separating classes inside one color family.
    pub class_offset: f64,
    /// Amplitude of the sinusoidal background texture.
    pub texture: f64,
    /// Each image holds 1..=max_shapes objects.
    pub max_shapes: usize,
    /// Bounding-box side range as a fraction of the shorter image side.
    pub shape_size: (f64, f64),
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            pixel_noise: 0.08,
            color_jitter: 0.12,
            class_offset: 0.25,
            texture: 0.12,
            max_shapes: 8,
            shape_size: (0.25, 0.5),
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shape_size;
        if self.max_shapes == 0 {
            return Err(arg_err!("max_shapes must be >= 1"));
        }
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(arg_err!(
                "shape_size ({lo}, {hi}) must satisfy 0 < min < max <= 1"
            ));
        }
        let amounts = [
            self.pixel_noise,
            self.color_jitter,
            self.class_offset,
            self.texture,
        ];
        if amounts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(arg_err!(
                "noise, jitter, offset and texture must be finite and >= 0"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class - 1) % 3 {
            0 => Self::Rectangle,
            1 => Self::Ellipse,
            _ => Self::Triangle,
        }
    }

    fn contains(self, u: f64, v: f64) -> bool {
        // (u, v) in [0, 1]² within the bounding box
        match self {
            Self::Rectangle => true,
            Self::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // apex at top center, base along the bottom edge
            Self::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

/// Mean RGB color of an object class.
pub fn class_color(class: u8, params: &GeneratorParams) -> [f64; 3] {
    let family = (class - 1) / 3;
    let within = ((class - 1) % 3) as f64 - 1.0;
    let hue = (0.02 + 0.38 * family as f64).fract();
    let [r, g, b] = hsv_to_rgb(hue, 0.75, 0.85);
    let off = within * params.class_offset;
    [clamp01(r + off), clamp01(g + off), clamp01(b - off)]
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn generate_sample(
    id: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    params: &GeneratorParams,
) -> ToySample {
    let mut rng = rng_for(seed, stream::SAMPLE, id as u64);
    let n = height * width;
    let mut image = vec![0.0; CHANNELS * n];
    let mut labels = vec![BACKGROUND; n];

    let base: f64 = rng.random_range(0.3..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let (fx, fy) = (rng.random_range(0.05..0.35), rng.random_range(0.05..0.35));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..height {
        for x in 0..width {
            let t = params.texture * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..CHANNELS {
                image[c * n + y * width + x] = base + tint[c] + t;
            }
        }
    }

    let shapes = rng.random_range(1..=params.max_shapes);
    let side = height.min(width) as f64;
    for _ in 0..shapes {
        let class = rng.random_range(1..num_classes) as u8;
        let kind = ShapeKind::for_class(class);
        let sh = ((rng.random_range(params.shape_size.0..params.shape_size.1) * side).round()
            as usize)
            .max(3);
        let sw = ((rng.random_range(params.shape_size.0..params.shape_size.1) * side).round()
            as usize)
            .max(3);
        let top = rng.random_range(0..=height - sh);
        let left = rng.random_range(0..=width - sw);
        let mut color = class_color(class, params);
        for c in color.iter_mut() {
            *c = clamp01(*c + rng.random_range(-params.color_jitter..=params.color_jitter));
        }
        for y in top..top + sh {
            for x in left..left + sw {
                let u = (x - left) as f64 / (sw - 1) as f64;
                let v = (y - top) as f64 / (sh - 1) as f64;
                if kind.contains(u, v) {
                    labels[y * width + x] = class;
                    for c in 0..CHANNELS {
                        image[c * n + y * width + x] = color[c];
                    }
                }
            }
        }
    }

    if params.pixel_noise > 0.0 {
        let noise = Normal::new(0.0, params.pixel_noise).expect("noise sigma is positive");
        for v in image.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    image.iter_mut().for_each(|v| *v = clamp01(*v));
    ToySample {
        id,
        image: Tensor::new(&[CHANNELS, height, width], image).expect("shape matches buffer"),
        labels,
    }
}

pub fn generate_toy_dataset(
    n: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_with(
        n,
        height,
        width,
        num_classes,
        seed,
        &GeneratorParams::default(),
    )
}

pub fn generate_with(
    n: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<Dataset> {
    if n == 0 {
        return Err(arg_err!("dataset size must be >= 1"));
    }
    if height < 16 || width < 16 {
        return Err(arg_err!("image size {height}x{width} below 16x16"));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(arg_err!(
            "num_classes must be in 2..=255, got {num_classes}"
        ));
    }
    params.validate()?;
    let samples = (0..n)
        .map(|id| generate_sample(id, height, width, num_classes, seed, params))
        .collect();
    Ok(Dataset {
        height,
        width,
        num_classes,
        seed,
        samples,
    })
}

/// Held-out split drawn from a stream independent of the training samples.
pub fn generate_validation(
    n: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<Dataset> {
    generate_with(
        n,
        height,
        width,
        num_classes,
        derive_seed(seed, stream::VALIDATION, 0),
        params,
    )
}

/// Labeled fraction `num/den`, `0 < num/den ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(arg_err!("ratio {num}/{den} is not in (0, 1]"));
        }
        Ok(Self { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(ratio·n)` with halves rounded up, at least 1.
    pub fn labeled_count(&self, n: usize) -> usize {
        let (num, den) = (self.num as usize, self.den as usize);
        ((2 * num * n + den) / (2 * den)).max(1).min(n)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let num = a
                .trim()
                .parse()
                .map_err(|_| arg_err!("bad ratio numerator in {s:?}"))?;
            let den = b
                .trim()
                .parse()
                .map_err(|_| arg_err!("bad ratio denominator in {s:?}"))?;
            return Ratio::new(num, den);
        }
        let v: f64 = s.parse().map_err(|_| arg_err!("bad ratio {s:?}"))?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(arg_err!("ratio {v} is not in (0, 1]"));
        }
        // decimal ratios are stored over 10^6
        let den = 1_000_000u32;
        Ratio::new(((v * den as f64).round() as u32).max(1), den)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionProtocol {
    pub ratio: Ratio,
    pub seed: u64,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl PartitionProtocol {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Everything labeled: the supervised-only view of the same protocol.
    pub fn without_unlabeled(&self) -> Self {
        Self {
            unlabeled: Vec::new(),
            ..self.clone()
        }
    }
}

pub fn partition(n: usize, ratio: Ratio, seed: u64) -> Result<PartitionProtocol> {
    if n == 0 {
        return Err(arg_err!("cannot partition an empty dataset"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng_for(seed, stream::PARTITION, 0));
    let k = ratio.labeled_count(n);
    let mut labeled = ids[..k].to_vec();
    let mut unlabeled = ids[k..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(PartitionProtocol {
        ratio,
        seed,
        labeled,
        unlabeled,
    })
}

/// One iteration's sample ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIds {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Independent shuffled streams over the labeled and unlabeled ids. An
/// epoch is one pass over the labeled stream; the unlabeled stream keeps its
/// position across epochs and reshuffles whenever it is exhausted.
#[derive(Clone, Debug)]
pub struct BatchIter {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    batch_labeled: usize,
    batch_unlabeled: usize,
    seed: u64,
    epoch: u64,
    unlabeled_pass: u64,
    unlabeled_order: Vec<usize>,
    unlabeled_cursor: usize,
}

impl BatchIter {
    pub fn new(
        protocol: &PartitionProtocol,
        batch_labeled: usize,
        batch_unlabeled: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_labeled == 0 || batch_unlabeled == 0 {
            return Err(arg_err!("batch sizes must be >= 1"));
        }
        if protocol.labeled.is_empty() {
            return Err(arg_err!("protocol has no labeled samples"));
        }
        Ok(Self {
            labeled: protocol.labeled.clone(),
            unlabeled: protocol.unlabeled.clone(),
            batch_labeled,
            batch_unlabeled,
            seed,
            epoch: 0,
            unlabeled_pass: 0,
            unlabeled_order: Vec::new(),
            unlabeled_cursor: 0,
        })
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.labeled.len().div_ceil(self.batch_labeled)
    }

    fn next_unlabeled(&mut self) -> usize {
        if self.unlabeled_cursor == self.unlabeled_order.len() {
            self.unlabeled_order = self.unlabeled.clone();
            self.unlabeled_order.shuffle(&mut rng_for(
                self.seed,
                stream::UNLABELED_ORDER,
                self.unlabeled_pass,
            ));
            self.unlabeled_pass += 1;
            self.unlabeled_cursor = 0;
        }
        self.unlabeled_cursor += 1;
        self.unlabeled_order[self.unlabeled_cursor - 1]
    }

    pub fn next_epoch(&mut self) -> Vec<BatchIds> {
        let mut order = self.labeled.clone();
        order.shuffle(&mut rng_for(self.seed, stream::LABELED_ORDER, self.epoch));
        self.epoch += 1;
        let iters = self.iterations_per_epoch();
        (0..iters)
            .map(|it| {
                let labeled = (0..self.batch_labeled)
                    .map(|j| order[(it * self.batch_labeled + j) % order.len()])
                    .collect();
                let unlabeled = if self.unlabeled.is_empty() {
                    Vec::new()
                } else {
                    (0..self.batch_unlabeled)
                        .map(|_| self.next_unlabeled())
                        .collect()
                };
                BatchIds { labeled, unlabeled }
            })
            .collect()
    }
}

pub fn batch_iter(
    protocol: &PartitionProtocol,
    batch_labeled: usize,
    batch_unlabeled: usize,
    seed: u64,
) -> Result<BatchIter> {
    BatchIter::new(protocol, batch_labeled, batch_unlabeled, seed)
}

/// Training-time view of a dataset that counts every read of an
/// unlabeled sample's ground truth.
#[derive(Debug)]
pub struct GuardedDataset<'a> {
    data: &'a Dataset,
    unlabeled: Vec<bool>,
    unlabeled_gt_reads: AccessCounter,
}

impl<'a> GuardedDataset<'a> {
    pub fn new(data: &'a Dataset, protocol: &PartitionProtocol) -> Result<Self> {
        if protocol.len() != data.len() {
            return Err(arg_err!(
                "protocol covers {} ids but the dataset has {} samples",
                protocol.len(),
                data.len()
            ));
        }
        let mut unlabeled = vec![false; data.len()];
        for &id in &protocol.unlabeled {
            unlabeled[id] = true;
        }
        Ok(Self {
            data,
            unlabeled,
            unlabeled_gt_reads: AccessCounter::default(),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.data
    }

    pub fn image(&self, id: usize) -> &Tensor {
        &self.data.samples[id].image
    }

    pub fn labels(&self, id: usize) -> &[u8] {
        if self.unlabeled[id] {
            self.unlabeled_gt_reads.hit();
        }
        &self.data.samples[id].labels
    }

    pub fn unlabeled_gt_reads(&self) -> usize {
        self.unlabeled_gt_reads.count()
    }

    /// `[B, 3, H, W]` stack of the given images.
    pub fn images(&self, ids: &[usize]) -> Result<Tensor> {
        Tensor::stack(&ids.iter().map(|&i| self.image(i)).collect::<Vec<_>>())
    }

    pub fn label_map(&self, ids: &[usize]) -> Result<LabelMap> {
        let mut labels = Vec::with_capacity(ids.len() * self.data.height * self.data.width);
        for &i in ids {
            labels.extend_from_slice(self.labels(i));
        }
        LabelMap::new(ids.len(), self.data.height, self.data.width, labels)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"CPSLDATA";
const CACHE_VERSION: u32 = 1;

/// Writes the dataset cache. Layout (little-endian): magic `CPSLDATA`,
/// `u32` version, `u32` n, `u32` H, `u32` W, `u32` K, `u64` seed, then per
/// sample `u32` id, `3·H·W` `f64` image values (CHW), `H·W` `u8` labels.
pub fn write_cache(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CACHE_MAGIC)?;
    for v in [
        CACHE_VERSION,
        data.len() as u32,
        data.height as u32,
        data.width as u32,
        data.num_classes as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&data.seed.to_le_bytes())?;
    for s in &data.samples {
        out.write_all(&(s.id as u32).to_le_bytes())?;
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&s.labels)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a dataset cache",
            path.display()
        )));
    }
    let mut u32s = [0u32; 5];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, n, h, w, k] = u32s.map(|v| v as usize);
    if version != CACHE_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported dataset cache version {version}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let id = u32::from_le_bytes(b4) as usize;
        let mut image = vec![0.0; CHANNELS * h * w];
        for v in image.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        let mut labels = vec![0u8; h * w];
        r.read_exact(&mut labels)?;
        samples.push(ToySample {
            id,
            image: Tensor::new(&[CHANNELS, h, w], image)?,
            labels,
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        num_classes: k,
        seed,
        samples,
    })
}

/// Binary PPM (P6) of a `[3, H, W]` image in `[0, 1]`.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = image.data();
    for i in 0..h * w {
        for c in 0..CHANNELS {
            out.write_all(&[(d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Binary PGM (P5) of a label map, classes spread over the gray range.
pub fn write_label_pgm(
    labels: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    path: &Path,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    let step = 255 / (num_classes.max(2) - 1);
    let bytes: Vec<u8> = labels
        .iter()
        .map(|&l| {
            if (l as usize) < num_classes {
                (l as usize * step) as u8
            } else {
                255
            }
        })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}
