//! Training methods behind a common trait, a name-keyed registry, and the
//! shared epoch loop.

mod config;
pub mod steps;
mod trainers;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;

pub use config::{DataConfig, Seeds, TrainConfig};
pub use trainers::{pseudo_label_dataset, PseudoLabels};

use crate::augment::{scale_crop_augment, weak_augment};
use crate::data::{
    batch_iter, generate_validation, generate_with, partition, Dataset, GuardedDataset,
    PartitionProtocol,
};
use crate::error::{arg_err, config_err, Error, Result};
use crate::eval::{evaluate_miou, evaluate_overlap};
use crate::losses::{GroundTruthMap, LabelMap, LossBreakdown};
use crate::model::SegNet;
use crate::rng::{rng_for, stream};
use crate::tensor::{poly_lr, Tensor};
use steps::StepInput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    Supervised,
    Cps,
    CpsCutMix,
    Cpc,
    MeanTeacher,
    Sps,
    SpsCutMix,
    PseudoSegStyle,
    SelfTraining,
    CpsSelfTraining,
}

impl MethodKind {
    pub const ALL: [MethodKind; 10] = [
        Self::Supervised,
        Self::Cps,
        Self::CpsCutMix,
        Self::Cpc,
        Self::MeanTeacher,
        Self::Sps,
        Self::SpsCutMix,
        Self::PseudoSegStyle,
        Self::SelfTraining,
        Self::CpsSelfTraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::Cps => "cps",
            Self::CpsCutMix => "cps-cutmix",
            Self::Cpc => "cpc",
            Self::MeanTeacher => "mean-teacher",
            Self::Sps => "sps",
            Self::SpsCutMix => "sps-cutmix",
            Self::PseudoSegStyle => "pseudoseg",
            Self::SelfTraining => "self-training",
            Self::CpsSelfTraining => "cps-self-training",
        }
    }

    /// Two independently initialized networks trained jointly.
    pub fn is_dual(self) -> bool {
        matches!(
            self,
            Self::Cps | Self::CpsCutMix | Self::Cpc | Self::CpsSelfTraining
        )
    }

    pub fn uses_cutmix(self) -> bool {
        matches!(self, Self::CpsCutMix | Self::SpsCutMix)
    }

    /// The CutMix variant of a method, if it has one.
    pub fn with_cutmix(self) -> Option<Self> {
        match self {
            Self::Cps | Self::CpsCutMix => Some(Self::CpsCutMix),
            Self::Sps | Self::SpsCutMix => Some(Self::SpsCutMix),
            _ => None,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| arg_err!("unknown method {s:?}"))
    }
}

/// Inputs of one iteration after augmentation.
#[derive(Clone, Debug)]
pub struct Batch {
    pub labeled: Tensor,
    pub gt: GroundTruthMap,
    pub unlabeled: Option<Tensor>,
    /// Fixed pseudo labels for the unlabeled images (self-training only).
    pub pseudo: Option<LabelMap>,
}

impl Batch {
    pub fn input(&self) -> StepInput<'_> {
        StepInput {
            labeled: &self.labeled,
            gt: &self.gt,
            unlabeled: self.unlabeled.as_ref(),
        }
    }
}

/// One method's mutable training state.
pub trait Trainer {
    fn step(&mut self, batch: &Batch, lr: f64, rng: &mut ChaCha8Rng) -> Result<LossBreakdown>;

    /// The network used for evaluation.
    fn primary(&self) -> &SegNet;

    /// The partner network for the overlap diagnostic, if any.
    fn secondary(&self) -> Option<&SegNet> {
        None
    }

    /// Reads of the second network so far.
    fn secondary_reads(&self) -> usize {
        0
    }

    fn into_networks(self: Box<Self>) -> (SegNet, Option<SegNet>);
}

/// A registered training method.
pub trait Method: Send + Sync {
    fn kind(&self) -> MethodKind;

    fn uses_unlabeled(&self) -> bool {
        true
    }

    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>>;

    fn run(&self, cfg: &TrainConfig, data: &TrainData) -> Result<RunResult> {
        let start = Instant::now();
        let guarded = GuardedDataset::new(data.train, data.protocol)?;
        let mut trainer = self.build(cfg)?;
        let protocol = if self.uses_unlabeled() {
            data.protocol.clone()
        } else {
            data.protocol.without_unlabeled()
        };
        let outcome = run_loop(trainer.as_mut(), cfg, &guarded, &protocol, data.val, None)?;
        let (net1, net2) = trainer.into_networks();
        Ok(RunResult {
            config: cfg.clone(),
            records: outcome.records,
            stage1: Vec::new(),
            net1,
            net2,
            iterations: outcome.iterations,
            unlabeled_gt_reads: guarded.unlabeled_gt_reads(),
            secondary_eval_reads: outcome.secondary_eval_reads,
            wall_time: start.elapsed(),
        })
    }
}

pub struct Registry {
    methods: Vec<Box<dyn Method>>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self {
            methods: Vec::new(),
        };
        trainers::register_all(&mut r);
        r
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            methods: Vec::new(),
        }
    }

    pub fn register(&mut self, method: Box<dyn Method>) {
        self.methods.retain(|m| m.kind() != method.kind());
        self.methods.push(method);
    }

    pub fn get(&self, kind: MethodKind) -> Result<&dyn Method> {
        self.methods
            .iter()
            .find(|m| m.kind() == kind)
            .map(|m| m.as_ref())
            .ok_or_else(|| config_err!("no trainer registered for {kind}"))
    }

    pub fn by_name(&self, name: &str) -> Result<&dyn Method> {
        self.get(name.parse()?)
    }

    pub fn kinds(&self) -> Vec<MethodKind> {
        self.methods.iter().map(|m| m.kind()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub protocol: &'a PartitionProtocol,
    pub val: &'a Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the epoch's first iteration.
    pub lr: f64,
    pub l_s: f64,
    pub l_cps_labeled: f64,
    pub l_cps_unlabeled: f64,
    pub l_cpc: f64,
    pub miou: f64,
    /// Absent for single-network methods.
    pub overlap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    /// Records of the first stage of two-stage methods.
    pub stage1: Vec<EpochRecord>,
    pub net1: SegNet,
    pub net2: Option<SegNet>,
    pub iterations: usize,
    pub unlabeled_gt_reads: usize,
    /// Reads of the second network made while computing validation mIoU.
    pub secondary_eval_reads: usize,
    pub wall_time: Duration,
}

impl RunResult {
    pub fn final_miou(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.miou)
    }
}

pub(crate) struct LoopOutcome {
    pub records: Vec<EpochRecord>,
    pub iterations: usize,
    pub secondary_eval_reads: usize,
}

fn augment_labeled(
    guarded: &GuardedDataset,
    ids: &[usize],
    multi_scale: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, GroundTruthMap)> {
    let d = guarded.dataset();
    let mut imgs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len() * d.height * d.width);
    for &id in ids {
        let (img, lab) = if multi_scale {
            let (i, l, _) = scale_crop_augment(guarded.image(id), guarded.labels(id), rng)?;
            (i, l)
        } else {
            (guarded.image(id).clone(), guarded.labels(id).to_vec())
        };
        let (img, lab, _) = weak_augment(&img, Some(&lab), rng)?;
        imgs.push(img);
        labels.extend(lab.expect("labels were passed"));
    }
    let gt = LabelMap::new(ids.len(), d.height, d.width, labels)?;
    Ok((
        Tensor::stack(&imgs.iter().collect::<Vec<_>>())?,
        GroundTruthMap(gt),
    ))
}

/// Unlabeled images (and their fixed pseudo labels, when given) after
/// augmentation. Ground truth is never touched.
fn augment_unlabeled(
    guarded: &GuardedDataset,
    ids: &[usize],
    pseudo: Option<&PseudoLabels>,
    multi_scale: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<LabelMap>)> {
    let d = guarded.dataset();
    let blank = vec![0u8; d.height * d.width];
    let mut imgs = Vec::with_capacity(ids.len());
    let mut labels = Vec::new();
    for &id in ids {
        let carried = pseudo.map(|p| p.get(id)).transpose()?.unwrap_or(&blank);
        let (img, lab) = if multi_scale {
            let (i, l, _) = scale_crop_augment(guarded.image(id), carried, rng)?;
            (i, l)
        } else {
            (guarded.image(id).clone(), carried.to_vec())
        };
        let (img, lab, _) = weak_augment(&img, Some(&lab), rng)?;
        imgs.push(img);
        labels.extend(lab.expect("labels were passed"));
    }
    let images = Tensor::stack(&imgs.iter().collect::<Vec<_>>())?;
    let pseudo = match pseudo {
        Some(_) => Some(LabelMap::new(ids.len(), d.height, d.width, labels)?),
        None => None,
    };
    Ok((images, pseudo))
}

fn mean_parts(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.l_s += p.l_s;
        m.l_cps_labeled += p.l_cps_labeled;
        m.l_cps_unlabeled += p.l_cps_unlabeled;
        m.l_cpc += p.l_cpc;
        m.total += p.total;
        m.lambda = p.lambda;
    }
    m.l_s /= n;
    m.l_cps_labeled /= n;
    m.l_cps_unlabeled /= n;
    m.l_cpc /= n;
    m.total /= n;
    m
}

/// Runs `cfg.epochs` epochs of `trainer`, evaluating after each one.
pub(crate) fn run_loop(
    trainer: &mut dyn Trainer,
    cfg: &TrainConfig,
    guarded: &GuardedDataset,
    protocol: &PartitionProtocol,
    val: &Dataset,
    pseudo: Option<&PseudoLabels>,
) -> Result<LoopOutcome> {
    let aug_seed = cfg.seeds.aug;
    let mut batches = batch_iter(protocol, cfg.batch_labeled, cfg.batch_unlabeled, aug_seed)?;
    let per_epoch = batches.iterations_per_epoch();
    let total = cfg.epochs * per_epoch;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut secondary_eval_reads = 0;
    let mut it = 0;
    for epoch in 1..=cfg.epochs {
        let epoch_lr = poly_lr(cfg.base_lr, it, total)?;
        let mut parts = Vec::with_capacity(per_epoch);
        for ids in batches.next_epoch() {
            let lr = poly_lr(cfg.base_lr, it, total)?;
            let mut lrng = rng_for(aug_seed, stream::LABELED_AUG, it as u64);
            let (labeled, gt) = augment_labeled(guarded, &ids.labeled, cfg.multi_scale, &mut lrng)?;
            let (unlabeled, pseudo_map) = if ids.unlabeled.is_empty() {
                (None, None)
            } else {
                let mut urng = rng_for(aug_seed, stream::UNLABELED_AUG, it as u64);
                let (u, p) =
                    augment_unlabeled(guarded, &ids.unlabeled, pseudo, cfg.multi_scale, &mut urng)?;
                (Some(u), p)
            };
            let batch = Batch {
                labeled,
                gt,
                unlabeled,
                pseudo: pseudo_map,
            };
            let mut mrng = rng_for(aug_seed, stream::METHOD_AUG, it as u64);
            let p = trainer.step(&batch, lr, &mut mrng)?;
            if !p.total.is_finite() {
                return Err(Error::Evaluation(format!(
                    "loss diverged at iteration {it}: {p:?}"
                )));
            }
            log::debug!(
                "iteration {it}: lr {lr:.5} l_s {:.4} l_cps {:.4}/{:.4} l_cpc {:.4}",
                p.l_s,
                p.l_cps_labeled,
                p.l_cps_unlabeled,
                p.l_cpc
            );
            parts.push(p);
            it += 1;
        }
        let before = trainer.secondary_reads();
        let miou = evaluate_miou(trainer.primary(), val)?.mean;
        secondary_eval_reads += trainer.secondary_reads() - before;
        let overlap = match trainer.secondary() {
            Some(net2) => {
                Some(evaluate_overlap(trainer.primary(), net2, val, cfg.overlap_region)?.ratio)
            }
            None => None,
        };
        let m = mean_parts(&parts);
        log::info!(
            "{} epoch {epoch}/{}: l_s {:.4} l_cps {:.4}/{:.4} l_cpc {:.4} miou {:.4}",
            cfg.method,
            cfg.epochs,
            m.l_s,
            m.l_cps_labeled,
            m.l_cps_unlabeled,
            m.l_cpc,
            miou
        );
        records.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            l_s: m.l_s,
            l_cps_labeled: m.l_cps_labeled,
            l_cps_unlabeled: m.l_cps_unlabeled,
            l_cpc: m.l_cpc,
            miou,
            overlap,
        });
    }
    Ok(LoopOutcome {
        records,
        iterations: it,
        secondary_eval_reads,
    })
}

/// Validates `cfg` and dispatches to the registered method.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<RunResult> {
    cfg.validate()?;
    let d = &cfg.data;
    for (name, set) in [("training", data.train), ("validation", data.val)] {
        if (set.height, set.width, set.num_classes) != (d.height, d.width, d.num_classes) {
            return Err(config_err!(
                "{name} set is {}x{} with {} classes, config expects {}x{} with {}",
                set.height,
                set.width,
                set.num_classes,
                d.height,
                d.width,
                d.num_classes
            ));
        }
    }
    if data.protocol.len() != data.train.len() {
        return Err(config_err!(
            "partition covers {} ids, dataset has {}",
            data.protocol.len(),
            data.train.len()
        ));
    }
    if cfg.method == MethodKind::Supervised && cfg.lambda > 0.0 {
        log::info!("supervised baseline ignores lambda = {}", cfg.lambda);
    }
    Registry::default().get(cfg.method)?.run(cfg, data)
}

/// Generated training set, validation set and partition for `cfg`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset, PartitionProtocol)> {
    let d = &cfg.data;
    let train = generate_with(
        d.n,
        d.height,
        d.width,
        d.num_classes,
        cfg.seeds.data,
        &d.generator,
    )?;
    let val = generate_validation(
        d.n_val,
        d.height,
        d.width,
        d.num_classes,
        cfg.seeds.data,
        &d.generator,
    )?;
    let protocol = partition(d.n, d.ratio, cfg.seeds.partition)?;
    Ok((train, val, protocol))
}

/// Generates data and trains in one call.
pub fn run_config(cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (train_set, val, protocol) = prepare_data(cfg)?;
    train(
        cfg,
        &TrainData {
            train: &train_set,
            protocol: &protocol,
            val: &val,
        },
    )
}
