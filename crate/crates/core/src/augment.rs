//! CutMix masks and mixing, plus the weak/strong/multi-scale image
//! augmentations. Images are `[C, H, W]` (or any `[.., H, W]` stack for the
//! mixing ops); label maps are `H×W` bytes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, dim_err, Result};
use crate::losses::{LabelMap, PseudoLabelMap, IGNORE};
use crate::tensor::Tensor;

/// Scales drawn by multi-scale training.
pub const SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutMixParams {
    pub min_area: f64,
    pub max_area: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
}

impl Default for CutMixParams {
    fn default() -> Self {
        Self {
            min_area: 0.25,
            max_area: 0.5,
            min_aspect: 0.5,
            max_aspect: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Rectangular CutMix region; pixels inside take the first source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutMixMask {
    pub height: usize,
    pub width: usize,
    pub rect: Rect,
}

impl CutMixMask {
    pub fn to_pixel_mask(&self) -> PixelMask {
        let mut bits = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                bits.push(self.rect.contains(y, x));
            }
        }
        PixelMask {
            height: self.height,
            width: self.width,
            bits,
        }
    }
}

/// Arbitrary binary `H×W` mask; `true` selects the first source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl From<&CutMixMask> for PixelMask {
    fn from(m: &CutMixMask) -> Self {
        m.to_pixel_mask()
    }
}

pub fn sample_cutmix_mask(
    height: usize,
    width: usize,
    params: &CutMixParams,
    rng: &mut impl Rng,
) -> Result<CutMixMask> {
    if height < 4 || width < 4 {
        return Err(arg_err!(
            "cutmix frame {height}x{width} is smaller than 4x4"
        ));
    }
    let total = (height * width) as f64;
    let min_area = (params.min_area * total).ceil() as usize;
    let max_area = (params.max_area * total).floor() as usize;
    if min_area == 0 || min_area > max_area || max_area >= height * width {
        return Err(arg_err!(
            "cutmix area range {:?} infeasible for {height}x{width}",
            params
        ));
    }
    let ratio = rng.random_range(params.min_area..=params.max_area);
    let aspect = rng.random_range(params.min_aspect..=params.max_aspect);
    let area = ratio * total;
    let h0 = ((area * aspect).sqrt().round() as usize).clamp(1, height);
    let w0 = (area / h0 as f64).round() as usize;

    // nearest feasible height to the drawn one, then the closest width
    let mut rect_hw = None;
    let mut candidates: Vec<usize> = (1..=height).collect();
    candidates.sort_by_key(|&h| (h as isize - h0 as isize).unsigned_abs());
    for h in candidates {
        let lo = min_area.div_ceil(h).max(1);
        let hi = (max_area / h).min(width);
        if lo <= hi {
            rect_hw = Some((h, w0.clamp(lo, hi)));
            break;
        }
    }
    let (rh, rw) = rect_hw.ok_or_else(|| arg_err!("no cutmix rectangle fits {height}x{width}"))?;
    let top = rng.random_range(0..=height - rh);
    let left = rng.random_range(0..=width - rw);
    Ok(CutMixMask {
        height,
        width,
        rect: Rect {
            top,
            left,
            height: rh,
            width: rw,
        },
    })
}

/// `mask ⊙ a + (1 − mask) ⊙ b`, with the mask broadcast over every leading axis.
pub fn apply_cutmix(a: &Tensor, b: &Tensor, mask: &PixelMask) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "apply_cutmix: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    let shape = a.shape();
    let r = shape.len();
    if r < 2 || shape[r - 2] != mask.height || shape[r - 1] != mask.width {
        return Err(dim_err!(
            "apply_cutmix: mask {}x{} does not match image shape {shape:?}",
            mask.height,
            mask.width
        ));
    }
    let n = mask.bits.len();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| if mask.bits[i % n] { x } else { y })
        .collect();
    Tensor::new(shape, data)
}

/// Per-pixel select between two pseudo maps with the image mask semantics.
pub fn mix_pseudo_maps(
    ya: &PseudoLabelMap,
    yb: &PseudoLabelMap,
    mask: &PixelMask,
) -> Result<PseudoLabelMap> {
    let (a, b) = (&ya.0, &yb.0);
    if a.dims() != b.dims() {
        return Err(dim_err!(
            "mix_pseudo_maps: {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    if (a.height, a.width) != (mask.height, mask.width) {
        return Err(dim_err!(
            "mix_pseudo_maps: mask {}x{} vs maps {}x{}",
            mask.height,
            mask.width,
            a.height,
            a.width
        ));
    }
    let n = mask.bits.len();
    let labels = a
        .labels
        .iter()
        .zip(&b.labels)
        .enumerate()
        .map(|(i, (&x, &y))| if mask.bits[i % n] { x } else { y })
        .collect();
    Ok(PseudoLabelMap(LabelMap::new(
        a.batch, a.height, a.width, labels,
    )?))
}

/// Pairwise CutMix over two stacks: sample `i` of the output mixes
/// `a[i]` and `b[i]` with `masks[i]`.
pub fn cutmix_batch(a: &Tensor, b: &Tensor, masks: &[PixelMask]) -> Result<Tensor> {
    let batch = a.shape()[0];
    if masks.len() != batch || a.shape() != b.shape() {
        return Err(dim_err!(
            "cutmix_batch: {} masks for batch {batch}",
            masks.len()
        ));
    }
    let mut out = Vec::with_capacity(a.numel());
    for (i, m) in masks.iter().enumerate() {
        let mixed = apply_cutmix(&a.slice_batch(i, 1)?, &b.slice_batch(i, 1)?, m)?;
        out.extend_from_slice(mixed.data());
    }
    Tensor::new(a.shape(), out)
}

pub fn mix_pseudo_batch(
    ya: &PseudoLabelMap,
    yb: &PseudoLabelMap,
    masks: &[PixelMask],
) -> Result<PseudoLabelMap> {
    let (a, b) = (&ya.0, &yb.0);
    if masks.len() != a.batch || a.dims() != b.dims() {
        return Err(dim_err!(
            "mix_pseudo_batch: {} masks for batch {}",
            masks.len(),
            a.batch
        ));
    }
    let n = a.pixels_per_image();
    let mut labels = Vec::with_capacity(a.labels.len());
    for (i, m) in masks.iter().enumerate() {
        let one = |l: &LabelMap| {
            PseudoLabelMap(LabelMap::new(1, l.height, l.width, l.image(i).to_vec()).unwrap())
        };
        let mixed = mix_pseudo_maps(&one(a), &one(b), m)?;
        labels.extend_from_slice(&mixed.0.labels[..n]);
    }
    Ok(PseudoLabelMap(LabelMap::new(
        a.batch, a.height, a.width, labels,
    )?))
}

/// Everything needed to replay an augmentation exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugRecord {
    pub flip: bool,
    pub scale: f64,
    pub crop: (usize, usize),
    pub noise_seed: u64,
}

impl AugRecord {
    pub fn identity() -> Self {
        Self {
            flip: false,
            scale: 1.0,
            crop: (0, 0),
            noise_seed: 0,
        }
    }
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(dim_err!("expected a [C, H, W] image, got {s:?}")),
    }
}

pub fn hflip_image(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = image_dims(img)?;
    let mut data = img.data().to_vec();
    data.chunks_mut(w).for_each(|row| row.reverse());
    Tensor::new(img.shape(), data)
}

pub fn hflip_labels(labels: &[u8], width: usize) -> Vec<u8> {
    let mut out = labels.to_vec();
    out.chunks_mut(width).for_each(|row| row.reverse());
    out
}

/// Flips a batched label map image by image.
pub fn hflip_label_map(map: &LabelMap) -> LabelMap {
    LabelMap {
        labels: hflip_labels(&map.labels, map.width),
        ..map.clone()
    }
}

/// Horizontal flip with probability 0.5; labels follow the image.
pub fn weak_augment(
    img: &Tensor,
    labels: Option<&[u8]>,
    rng: &mut impl Rng,
) -> Result<(Tensor, Option<Vec<u8>>, AugRecord)> {
    let record = AugRecord {
        flip: rng.random_bool(0.5),
        ..AugRecord::identity()
    };
    let (out, lab) = replay_weak(img, labels, &record)?;
    Ok((out, lab, record))
}

pub fn replay_weak(
    img: &Tensor,
    labels: Option<&[u8]>,
    record: &AugRecord,
) -> Result<(Tensor, Option<Vec<u8>>)> {
    let (_, h, w) = image_dims(img)?;
    if let Some(l) = labels {
        if l.len() != h * w {
            return Err(dim_err!("label map has {} pixels, image {h}x{w}", l.len()));
        }
    }
    if record.flip {
        Ok((hflip_image(img)?, labels.map(|l| hflip_labels(l, w))))
    } else {
        Ok((img.clone(), labels.map(|l| l.to_vec())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongParams {
    /// Gaussian pixel noise, as a fraction of the `[0, 1]` dynamic range.
    pub noise_sigma: f64,
    pub brightness: (f64, f64),
}

impl Default for StrongParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            brightness: (0.7, 1.3),
        }
    }
}

impl StrongParams {
    pub fn null() -> Self {
        Self {
            noise_sigma: 0.0,
            brightness: (1.0, 1.0),
        }
    }
}

/// Weak flip, then per-channel brightness scaling and additive Gaussian noise.
/// Geometry only changes through the flip.
pub fn strong_augment(
    img: &Tensor,
    params: &StrongParams,
    rng: &mut impl Rng,
) -> Result<(Tensor, AugRecord)> {
    let (_, _, weak) = weak_augment(img, None, rng)?;
    let record = AugRecord {
        noise_seed: rng.random(),
        ..weak
    };
    Ok((replay_strong(img, params, &record)?, record))
}

pub fn replay_strong(img: &Tensor, params: &StrongParams, record: &AugRecord) -> Result<Tensor> {
    let (flipped, _) = replay_weak(img, None, record)?;
    let (c, h, w) = image_dims(&flipped)?;
    if params.noise_sigma < 0.0 || params.brightness.0 > params.brightness.1 {
        return Err(arg_err!(
            "invalid strong augmentation parameters {params:?}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(record.noise_seed);
    let gains: Vec<f64> = (0..c)
        .map(|_| {
            let (lo, hi) = params.brightness;
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        })
        .collect();
    let mut data = flipped.into_data();
    let noise = (params.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, params.noise_sigma).expect("sigma >= 0"));
    for (ch, plane) in data.chunks_mut(h * w).enumerate() {
        for v in plane {
            *v *= gains[ch];
            if let Some(n) = &noise {
                *v += n.sample(&mut rng);
            }
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Multi-scale training augmentation: rescale by a scale from [`SCALES`]
/// (bilinear for the image, nearest for labels), then crop or pad back to
/// the original size. Padding uses zeros and [`IGNORE`].
pub fn scale_crop_augment(
    img: &Tensor,
    labels: &[u8],
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<u8>, AugRecord)> {
    let (_, h, w) = image_dims(img)?;
    let scale = SCALES[rng.random_range(0..SCALES.len())];
    let (sh, sw) = scaled_size(h, w, scale);
    let crop = (
        rng.random_range(0..=sh.abs_diff(h)),
        rng.random_range(0..=sw.abs_diff(w)),
    );
    let record = AugRecord {
        scale,
        crop,
        ..AugRecord::identity()
    };
    let (out, lab) = replay_scale_crop(img, labels, &record)?;
    Ok((out, lab, record))
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

pub fn replay_scale_crop(
    img: &Tensor,
    labels: &[u8],
    record: &AugRecord,
) -> Result<(Tensor, Vec<u8>)> {
    let (c, h, w) = image_dims(img)?;
    if labels.len() != h * w {
        return Err(dim_err!(
            "label map has {} pixels, image {h}x{w}",
            labels.len()
        ));
    }
    let (sh, sw) = scaled_size(h, w, record.scale);
    let src = img.data();
    // align-corners-false resample
    let coord = |o: usize, out_len: usize, in_len: usize| {
        let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(in_len - 1);
        (i0, (i0 + 1).min(in_len - 1), s - i0 as f64)
    };
    let mut scaled = vec![0.0; c * sh * sw];
    let mut scaled_lab = vec![0u8; sh * sw];
    for y in 0..sh {
        let (y0, y1, ly) = coord(y, sh, h);
        let ny = (((y as f64 + 0.5) * h as f64 / sh as f64) as usize).min(h - 1);
        for x in 0..sw {
            let (x0, x1, lx) = coord(x, sw, w);
            let nx = (((x as f64 + 0.5) * w as f64 / sw as f64) as usize).min(w - 1);
            scaled_lab[y * sw + x] = labels[ny * w + nx];
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                scaled[(ch * sh + y) * sw + x] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    let mut out_lab = vec![IGNORE; h * w];
    let (cy, cx) = record.crop;
    for y in 0..h {
        for x in 0..w {
            // crop when the scaled frame is larger, pad when smaller
            let pick = |o: usize, origin: usize, scaled_len: usize, len: usize| {
                if scaled_len >= len {
                    Some(o + origin)
                } else {
                    o.checked_sub(origin).filter(|&v| v < scaled_len)
                }
            };
            if let (Some(sy), Some(sx)) = (pick(y, cy, sh, h), pick(x, cx, sw, w)) {
                out_lab[y * w + x] = scaled_lab[sy * sw + sx];
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = scaled[(ch * sh + sy) * sw + sx];
                }
            }
        }
    }
    Ok((Tensor::new(&[c, h, w], out)?, out_lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn cutmix_mask_determinism_and_bounds() {
        let p = CutMixParams::default();
        let a = sample_cutmix_mask(64, 64, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_cutmix_mask(64, 64, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..1000 {
            let (h, w) = [(64, 64), (4, 4), (5, 9), (33, 16)][i % 4];
            let m = sample_cutmix_mask(h, w, &p, &mut rng).unwrap();
            let ratio = m.rect.area() as f64 / (h * w) as f64;
            assert!((0.25..=0.5).contains(&ratio), "{ratio} for {m:?}");
            assert!(m.rect.top + m.rect.height <= h && m.rect.left + m.rect.width <= w);
            let pm = m.to_pixel_mask();
            assert_eq!(pm.area(), m.rect.area());
            // contiguity: every row is either empty or one run of rect.width
            for y in 0..h {
                let row = &pm.bits[y * w..(y + 1) * w];
                let on: Vec<usize> = (0..w).filter(|&x| row[x]).collect();
                if !on.is_empty() {
                    assert_eq!(on.len(), m.rect.width);
                    assert_eq!(on[on.len() - 1] - on[0] + 1, on.len());
                }
            }
        }
        assert!(sample_cutmix_mask(3, 10, &p, &mut rng).is_err());
    }

    #[test]
    fn apply_cutmix_cases() {
        let a = rand_image(3, 6, 5, 1);
        let b = rand_image(3, 6, 5, 2);
        assert_eq!(apply_cutmix(&a, &b, &PixelMask::ones(6, 5)).unwrap(), a);
        assert_eq!(apply_cutmix(&a, &b, &PixelMask::zeros(6, 5)).unwrap(), b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_cutmix_mask(6, 5, &CutMixParams::default(), &mut rng)
            .unwrap()
            .to_pixel_mask();
        let mixed = apply_cutmix(&a, &b, &m).unwrap();
        for (i, v) in mixed.data().iter().enumerate() {
            assert!(*v == a.data()[i] || *v == b.data()[i]);
            let expect = if m.bits[i % 30] {
                a.data()[i]
            } else {
                b.data()[i]
            };
            assert_eq!(*v, expect);
        }
        assert_eq!(apply_cutmix(&a, &a, &m).unwrap(), a);
        assert!(apply_cutmix(&a, &rand_image(3, 5, 6, 3), &m).is_err());
        assert!(apply_cutmix(&a, &b, &PixelMask::ones(5, 5)).is_err());
    }

    #[test]
    fn mix_pseudo_cases() {
        let mk = |v: Vec<u8>| PseudoLabelMap(LabelMap::new(1, 2, 3, v).unwrap());
        let ya = mk(vec![0, 1, 2, 3, 4, 0]);
        let yb = mk(vec![4, 4, 4, 1, 1, 1]);
        assert_eq!(
            mix_pseudo_maps(&ya, &ya, &PixelMask::zeros(2, 3)).unwrap(),
            ya
        );
        assert_eq!(
            mix_pseudo_maps(&ya, &yb, &PixelMask::ones(2, 3)).unwrap(),
            ya
        );
        let m = PixelMask {
            height: 2,
            width: 3,
            bits: vec![true, false, true, false, false, true],
        };
        let mixed = mix_pseudo_maps(&ya, &yb, &m).unwrap();
        for i in 0..6 {
            let want = if m.bits[i] {
                ya.0.labels[i]
            } else {
                yb.0.labels[i]
            };
            assert_eq!(mixed.0.labels[i], want);
        }
        assert!(mix_pseudo_maps(&ya, &mk(vec![0; 6]), &PixelMask::ones(3, 2)).is_err());
    }

    #[test]
    fn mixed_labels_follow_mixed_image_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (8, 8);
        // images whose value encodes the label, so sources are traceable
        let la: Vec<u8> = (0..h * w).map(|i| (i % 3) as u8).collect();
        let lb: Vec<u8> = (0..h * w).map(|i| 3 + (i % 2) as u8).collect();
        let img =
            |l: &[u8]| Tensor::new(&[1, h, w], l.iter().map(|&v| v as f64).collect()).unwrap();
        for _ in 0..20 {
            let m = sample_cutmix_mask(h, w, &CutMixParams::default(), &mut rng)
                .unwrap()
                .to_pixel_mask();
            let xi = apply_cutmix(&img(&la), &img(&lb), &m).unwrap();
            let yi = mix_pseudo_maps(
                &PseudoLabelMap(LabelMap::new(1, h, w, la.clone()).unwrap()),
                &PseudoLabelMap(LabelMap::new(1, h, w, lb.clone()).unwrap()),
                &m,
            )
            .unwrap();
            for i in 0..h * w {
                assert_eq!(xi.data()[i], yi.0.labels[i] as f64);
            }
        }
    }

    #[test]
    fn weak_augment_cases() {
        let img = rand_image(3, 4, 5, 7);
        let labels: Vec<u8> = (0..20).map(|i| (i % 5) as u8).collect();
        let flip = AugRecord {
            flip: true,
            ..AugRecord::identity()
        };
        let (once, l1) = replay_weak(&img, Some(&labels), &flip).unwrap();
        let (twice, l2) = replay_weak(&once, l1.as_deref(), &flip).unwrap();
        assert_eq!(twice, img);
        assert_eq!(l2.unwrap(), labels);
        let (same, _) = replay_weak(&img, None, &AugRecord::identity()).unwrap();
        assert_eq!(same, img);

        // coordinate oracle: flipped label at (y, x) is the source at (y, W-1-x)
        let l1 = l1.unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(l1[y * 5 + x], labels[y * 5 + (4 - x)]);
                for c in 0..3 {
                    assert_eq!(
                        once.data()[(c * 4 + y) * 5 + x],
                        img.data()[(c * 4 + y) * 5 + 4 - x]
                    );
                }
            }
        }

        let (a, la, ra) =
            weak_augment(&img, Some(&labels), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, lb, rb) =
            weak_augment(&img, Some(&labels), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((a.clone(), la.clone(), ra), (b, lb, rb));
        assert_eq!(replay_weak(&img, Some(&labels), &ra).unwrap(), (a, la));
    }

    #[test]
    fn strong_augment_cases() {
        let img = rand_image(3, 8, 8, 9);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let (s, rec) = strong_augment(&img, &StrongParams::null(), &mut r1).unwrap();
        let (w, _, wrec) = weak_augment(&img, None, &mut r2).unwrap();
        assert_eq!(rec.flip, wrec.flip);
        assert_eq!(s, w);

        let p = StrongParams::default();
        let (a, ra) = strong_augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (b, rb) = strong_augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!((&a, ra), (&b, rb));
        assert_eq!(replay_strong(&img, &p, &ra).unwrap(), a);

        // brightness-only on a constant image: every channel mean stays in [0.7c, 1.3c]
        let c = 0.4;
        let flat = Tensor::full(&[3, 16, 16], c);
        let bright = StrongParams {
            noise_sigma: 0.0,
            ..StrongParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (out, _) = strong_augment(&flat, &bright, &mut rng).unwrap();
            for plane in out.data().chunks(256) {
                let mean = plane.iter().sum::<f64>() / 256.0;
                assert!(mean >= 0.7 * c - 1e-12 && mean <= 1.3 * c + 1e-12);
            }
            // with noise the shift also carries the noise mean, a few standard errors wide
            let (noisy, _) = strong_augment(&flat, &p, &mut rng).unwrap();
            for plane in noisy.data().chunks(256) {
                let mean = plane.iter().sum::<f64>() / 256.0;
                let slack = 5.0 * p.noise_sigma / 16.0;
                assert!(mean >= 0.7 * c - slack && mean <= 1.3 * c + slack);
            }
        }
    }

    #[test]
    fn scale_crop_cases() {
        let img = rand_image(3, 16, 16, 13);
        let labels: Vec<u8> = (0..256).map(|i| (i % 5) as u8).collect();
        let unit = AugRecord::identity();
        let (same, lab) = replay_scale_crop(&img, &labels, &unit).unwrap();
        assert_eq!(same, img);
        assert_eq!(lab, labels);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let (out, lab, rec) = scale_crop_augment(&img, &labels, &mut rng).unwrap();
            assert!(SCALES.contains(&rec.scale));
            assert_eq!(out.shape(), &[3, 16, 16]);
            assert!(lab.iter().all(|&l| l < 5 || l == IGNORE));
            if rec.scale < 1.0 {
                assert!(lab.contains(&IGNORE));
            } else {
                assert!(!lab.contains(&IGNORE));
            }
            assert_eq!(replay_scale_crop(&img, &labels, &rec).unwrap(), (out, lab));
        }
    }
}
