//! Segmentation metrics: confusion matrix, mean IoU and the two-network
//! overlap ratio.

use crate::data::Dataset;
use crate::error::{arg_err, Error, Result};
use crate::losses::{argmax_channels, LabelMap};
use crate::model::SegNet;
use crate::tensor::Tensor;

/// `counts[gt * K + pred]`; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(arg_err!("confusion matrix needs at least one class"));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::Data(format!(
                    "class pair (gt {g}, pred {p}) outside 0..{k}"
                )));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(arg_err!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes,
                other.num_classes
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn accumulate(
    mut conf: ConfusionMatrix,
    pred: &[u8],
    gt: &[u8],
    ignore: u8,
) -> Result<ConfusionMatrix> {
    conf.accumulate(pred, gt, ignore)?;
    Ok(conf)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// IoU per class and their mean over classes with a nonzero denominator.
pub fn miou(conf: &ConfusionMatrix) -> Result<MiouReport> {
    let k = conf.num_classes;
    let mut per_class = Vec::with_capacity(k);
    let (mut sum, mut present) = (0.0, 0usize);
    for c in 0..k {
        let diag = conf.get(c, c);
        let row: u64 = (0..k).map(|j| conf.get(c, j)).sum();
        let col: u64 = (0..k).map(|i| conf.get(i, c)).sum();
        let den = row + col - diag;
        if den == 0 {
            per_class.push(None);
        } else {
            let iou = diag as f64 / den as f64;
            sum += iou;
            present += 1;
            per_class.push(Some(iou));
        }
    }
    if present == 0 {
        return Err(Error::Evaluation(
            "no class present in prediction or ground truth".into(),
        ));
    }
    Ok(MiouReport {
        per_class,
        mean: sum / present as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub ratio: f64,
    /// Number of pixels the ratio was computed over; 0 means the ratio is a
    /// placeholder.
    pub pixels: usize,
}

impl Overlap {
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }
}

/// Which pixels count as the object region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OverlapRegion {
    /// Ground truth is not background.
    #[default]
    GroundTruth,
    /// Ground truth is not background and neither prediction is background.
    GroundTruthAndPredictions,
}

/// Fraction of object pixels where the two prediction maps agree.
pub fn overlap_ratio(y1: &[u8], y2: &[u8], gt: &[u8]) -> Result<Overlap> {
    overlap_ratio_in(y1, y2, gt, OverlapRegion::GroundTruth)
}

pub fn overlap_ratio_in(y1: &[u8], y2: &[u8], gt: &[u8], region: OverlapRegion) -> Result<Overlap> {
    let mut counter = OverlapCounter::default();
    counter.add(y1, y2, gt, region)?;
    Ok(counter.finish())
}

/// Accumulates overlap counts across batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OverlapCounter {
    agree: usize,
    pixels: usize,
}

impl OverlapCounter {
    pub fn add(&mut self, y1: &[u8], y2: &[u8], gt: &[u8], region: OverlapRegion) -> Result<()> {
        if y1.len() != y2.len() || y1.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "overlap maps have {}, {} and {} pixels",
                y1.len(),
                y2.len(),
                gt.len()
            )));
        }
        let (mut agree, mut pixels) = (0usize, 0usize);
        for ((&a, &b), &g) in y1.iter().zip(y2).zip(gt) {
            let inside = match region {
                OverlapRegion::GroundTruth => g != 0,
                OverlapRegion::GroundTruthAndPredictions => g != 0 && a != 0 && b != 0,
            };
            if inside {
                pixels += 1;
                agree += usize::from(a == b);
            }
        }
        self.agree += agree;
        self.pixels += pixels;
        Ok(())
    }

    pub fn finish(&self) -> Overlap {
        let ratio = if self.pixels == 0 {
            0.0
        } else {
            self.agree as f64 / self.pixels as f64
        };
        Overlap {
            ratio,
            pixels: self.pixels,
        }
    }
}

pub const EVAL_BATCH: usize = 16;

fn predict_batches(
    net: &SegNet,
    data: &Dataset,
    mut f: impl FnMut(usize, &LabelMap) -> Result<()>,
) -> Result<()> {
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let imgs: Vec<&Tensor> = data.samples[start..end].iter().map(|s| &s.image).collect();
        let pred = argmax_channels(&net.predict(&Tensor::stack(&imgs)?)?)?;
        f(start, &pred)?;
    }
    Ok(())
}

/// Single-scale prediction of every sample.
pub fn predict_dataset(net: &SegNet, data: &Dataset) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(data.len());
    predict_batches(net, data, |_, pred| {
        for b in 0..pred.batch {
            out.push(pred.image(b).to_vec());
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn confusion_on(net: &SegNet, data: &Dataset) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(data.num_classes)?;
    predict_batches(net, data, |start, pred| {
        for b in 0..pred.batch {
            conf.accumulate(
                pred.image(b),
                &data.samples[start + b].labels,
                crate::losses::IGNORE,
            )?;
        }
        Ok(())
    })?;
    Ok(conf)
}

pub fn evaluate_miou(net: &SegNet, data: &Dataset) -> Result<MiouReport> {
    miou(&confusion_on(net, data)?)
}

pub fn evaluate_overlap(
    net1: &SegNet,
    net2: &SegNet,
    data: &Dataset,
    region: OverlapRegion,
) -> Result<Overlap> {
    let p1 = predict_dataset(net1, data)?;
    let p2 = predict_dataset(net2, data)?;
    let mut counter = OverlapCounter::default();
    for ((a, b), s) in p1.iter().zip(&p2).zip(&data.samples) {
        counter.add(a, b, &s.labels, region)?;
    }
    Ok(counter.finish())
}
