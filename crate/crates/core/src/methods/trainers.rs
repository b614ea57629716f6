//! Trainer state for each method family and the registry entries.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::steps::{
    apply_objective, cps_pseudo_label_objective, flip_samples, predict_probs,
    pseudo_label_objective, sample_masks, step_cpc, step_cps, step_cps_cutmix, step_mean_teacher,
    step_pseudoseg_style, step_sps, step_supervised, strong_views, StepOptions,
};
use super::{
    run_loop, Batch, Method, MethodKind, Registry, RunResult, TrainConfig, TrainData, Trainer,
};
use crate::augment::{CutMixParams, PixelMask, StrongParams};
use crate::data::GuardedDataset;
use crate::error::{arg_err, Result};
use crate::eval::EVAL_BATCH;
use crate::losses::{LossBreakdown, IGNORE};
use crate::model::{init_dual, DualNetworks, SegNet};
use crate::rng::{derive_seed, stream};
use crate::tensor::{OptimizerState, Tape};

fn step_options(cfg: &TrainConfig) -> StepOptions {
    StepOptions {
        lambda: cfg.lambda,
        ohem: cfg.ohem,
        cps_on_labeled: cfg.cps_on_labeled,
    }
}

fn optimizer(net: &SegNet) -> OptimizerState {
    OptimizerState::with_defaults(net.params().iter().map(|p| &p.value))
}

fn masks_for(batch: &Batch, params: &CutMixParams, rng: &mut ChaCha8Rng) -> Result<Vec<PixelMask>> {
    match &batch.unlabeled {
        Some(u) => {
            let [b, _, h, w] = u.dims4()?;
            if b % 2 != 0 {
                return Err(arg_err!("CutMix needs an even unlabeled batch, got {b}"));
            }
            sample_masks(b / 2, h, w, params, rng)
        }
        None => Ok(Vec::new()),
    }
}

/// One network trained alone.
struct SingleTrainer {
    kind: MethodKind,
    net: SegNet,
    opt: OptimizerState,
    opts: StepOptions,
    cutmix: CutMixParams,
    strong: StrongParams,
}

impl SingleTrainer {
    fn new(kind: MethodKind, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let net = SegNet::new(cfg.model_config(seed))?;
        Ok(Self {
            kind,
            opt: optimizer(&net),
            net,
            opts: step_options(cfg),
            cutmix: CutMixParams::default(),
            strong: StrongParams::default(),
        })
    }
}

impl Trainer for SingleTrainer {
    fn step(&mut self, batch: &Batch, lr: f64, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let input = batch.input();
        let (net, opt, opts) = (&mut self.net, &mut self.opt, &self.opts);
        match self.kind {
            MethodKind::Supervised => step_supervised(net, opt, &input, opts, lr),
            MethodKind::Sps => step_sps(net, opt, &input, None, opts, lr),
            MethodKind::SpsCutMix => {
                let masks = masks_for(batch, &self.cutmix, rng)?;
                step_sps(net, opt, &input, Some(&masks), opts, lr)
            }
            MethodKind::PseudoSegStyle => {
                let strong = match input.unlabeled {
                    Some(u) => Some(strong_views(u, &self.strong, rng)?),
                    None => None,
                };
                step_pseudoseg_style(net, opt, &input, strong.as_ref(), opts, lr)
            }
            MethodKind::SelfTraining => {
                let mut tape = Tape::new();
                let obj =
                    pseudo_label_objective(&mut tape, net, &input, batch.pseudo.as_ref(), opts)?;
                apply_objective(&tape, &obj, &mut [(net, opt)], lr)?;
                Ok(obj.parts)
            }
            other => Err(arg_err!("{other} is not a single-network method")),
        }
    }

    fn primary(&self) -> &SegNet {
        &self.net
    }

    fn into_networks(self: Box<Self>) -> (SegNet, Option<SegNet>) {
        (self.net, None)
    }
}

/// Two networks with their own initializations and optimizers.
struct DualTrainer {
    kind: MethodKind,
    nets: DualNetworks,
    opt1: OptimizerState,
    opt2: OptimizerState,
    opts: StepOptions,
    cutmix: CutMixParams,
}

impl DualTrainer {
    fn new(kind: MethodKind, cfg: &TrainConfig, seed1: u64, seed2: u64) -> Result<Self> {
        let nets = init_dual(&cfg.model_config(seed1), seed1, seed2)?;
        let opt1 = optimizer(nets.net1());
        let opt2 = optimizer(nets.net1());
        Ok(Self {
            kind,
            nets,
            opt1,
            opt2,
            opts: step_options(cfg),
            cutmix: CutMixParams::default(),
        })
    }
}

impl Trainer for DualTrainer {
    fn step(&mut self, batch: &Batch, lr: f64, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let input = batch.input();
        let masks = match self.kind {
            MethodKind::CpsCutMix => masks_for(batch, &self.cutmix, rng)?,
            _ => Vec::new(),
        };
        let (n1, n2) = self.nets.both_mut();
        let opts = (&mut self.opt1, &mut self.opt2);
        match self.kind {
            MethodKind::Cps => step_cps((n1, n2), opts, &input, &self.opts, lr),
            MethodKind::Cpc => step_cpc((n1, n2), opts, &input, &self.opts, lr),
            MethodKind::CpsCutMix => {
                step_cps_cutmix((n1, n2), opts, &input, &masks, &self.opts, lr)
            }
            MethodKind::CpsSelfTraining => {
                let mut tape = Tape::new();
                let obj = cps_pseudo_label_objective(
                    &mut tape,
                    n1,
                    n2,
                    &input,
                    batch.pseudo.as_ref(),
                    &self.opts,
                )?;
                apply_objective(&tape, &obj, &mut [(n1, opts.0), (n2, opts.1)], lr)?;
                Ok(obj.parts)
            }
            other => Err(arg_err!("{other} is not a dual-network method")),
        }
    }

    fn primary(&self) -> &SegNet {
        self.nets.net1()
    }

    fn secondary(&self) -> Option<&SegNet> {
        Some(self.nets.net2())
    }

    fn secondary_reads(&self) -> usize {
        self.nets.net2_reads()
    }

    fn into_networks(self: Box<Self>) -> (SegNet, Option<SegNet>) {
        let (a, b) = self.nets.into_parts();
        (a, Some(b))
    }
}

/// Student trained by SGD, teacher tracking it by EMA.
struct MeanTeacherTrainer {
    student: SegNet,
    teacher: SegNet,
    opt: OptimizerState,
    alpha: f64,
    opts: StepOptions,
}

impl Trainer for MeanTeacherTrainer {
    fn step(&mut self, batch: &Batch, lr: f64, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let input = batch.input();
        // The teacher's view is the student's view re-flipped by an
        // independent draw; its output is flipped back before comparing.
        let view = match input.unlabeled {
            Some(u) => {
                let flags: Vec<bool> = (0..u.shape()[0]).map(|_| rng.random_bool(0.5)).collect();
                Some((flip_samples(u, &flags)?, flags))
            }
            None => None,
        };
        step_mean_teacher(
            &mut self.student,
            &mut self.teacher,
            &mut self.opt,
            &input,
            view.as_ref().map(|(v, f)| (v, f.as_slice())),
            self.alpha,
            &self.opts,
            lr,
        )
    }

    fn primary(&self) -> &SegNet {
        &self.student
    }

    fn secondary(&self) -> Option<&SegNet> {
        Some(&self.teacher)
    }

    fn into_networks(self: Box<Self>) -> (SegNet, Option<SegNet>) {
        (self.student, Some(self.teacher))
    }
}

struct SupervisedMethod;

impl Method for SupervisedMethod {
    fn kind(&self) -> MethodKind {
        MethodKind::Supervised
    }

    fn uses_unlabeled(&self) -> bool {
        false
    }

    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>> {
        Ok(Box::new(SingleTrainer::new(
            MethodKind::Supervised,
            cfg,
            cfg.seeds.net1,
        )?))
    }
}

struct CpsMethod {
    cutmix: bool,
}

impl Method for CpsMethod {
    fn kind(&self) -> MethodKind {
        if self.cutmix {
            MethodKind::CpsCutMix
        } else {
            MethodKind::Cps
        }
    }

    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>> {
        Ok(Box::new(DualTrainer::new(
            self.kind(),
            cfg,
            cfg.seeds.net1,
            cfg.seeds.net2,
        )?))
    }
}

struct CpcMethod;

impl Method for CpcMethod {
    fn kind(&self) -> MethodKind {
        MethodKind::Cpc
    }

    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>> {
        Ok(Box::new(DualTrainer::new(
            MethodKind::Cpc,
            cfg,
            cfg.seeds.net1,
            cfg.seeds.net2,
        )?))
    }
}

struct MeanTeacherMethod;

impl Method for MeanTeacherMethod {
    fn kind(&self) -> MethodKind {
        MethodKind::MeanTeacher
    }

    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>> {
        let student = SegNet::new(cfg.model_config(cfg.seeds.net1))?;
        Ok(Box::new(MeanTeacherTrainer {
            teacher: student.clone(),
            opt: optimizer(&student),
            student,
            alpha: cfg.ema_alpha,
            opts: step_options(cfg),
        }))
    }
}

struct SpsMethod {
    cutmix: bool,
}

impl Method for SpsMethod {
    fn kind(&self) -> MethodKind {
        if self.cutmix {
            MethodKind::SpsCutMix
        } else {
            MethodKind::Sps
        }
    }

    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>> {
        Ok(Box::new(SingleTrainer::new(
            self.kind(),
            cfg,
            cfg.seeds.net1,
        )?))
    }
}

struct PseudoSegMethod;

impl Method for PseudoSegMethod {
    fn kind(&self) -> MethodKind {
        MethodKind::PseudoSegStyle
    }

    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>> {
        Ok(Box::new(SingleTrainer::new(
            MethodKind::PseudoSegStyle,
            cfg,
            cfg.seeds.net1,
        )?))
    }
}

/// Fixed per-sample pseudo label maps, indexed by sample id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    maps: Vec<Option<Vec<u8>>>,
}

impl PseudoLabels {
    pub fn get(&self, id: usize) -> Result<&[u8]> {
        self.maps
            .get(id)
            .and_then(|m| m.as_deref())
            .ok_or_else(|| arg_err!("no pseudo label for sample {id}"))
    }

    pub fn len(&self) -> usize {
        self.maps.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Argmax labels of `net` on the images `ids`; with a threshold, pixels
/// whose top probability is below it become [`IGNORE`].
pub fn pseudo_label_dataset(
    net: &SegNet,
    data: &GuardedDataset,
    ids: &[usize],
    threshold: Option<f64>,
) -> Result<PseudoLabels> {
    let mut maps = vec![None; data.dataset().len()];
    for chunk in ids.chunks(EVAL_BATCH) {
        let probs = predict_probs(net, &data.images(chunk)?)?;
        let [_, k, h, w] = probs.dims4()?;
        let n = h * w;
        let p = probs.data();
        for (bi, &id) in chunk.iter().enumerate() {
            let base = bi * k * n;
            let labels = (0..n)
                .map(|i| {
                    let (mut best, mut best_p) = (0, p[base + i]);
                    for c in 1..k {
                        let v = p[base + c * n + i];
                        if v > best_p {
                            best = c;
                            best_p = v;
                        }
                    }
                    match threshold {
                        Some(t) if best_p < t => IGNORE,
                        _ => best as u8,
                    }
                })
                .collect();
            maps[id] = Some(labels);
        }
    }
    Ok(PseudoLabels { maps })
}

/// Train on the labeled set, pseudo-label the unlabeled set with the result,
/// then retrain from a fresh initialization on both.
struct SelfTrainingMethod {
    cps: bool,
}

impl SelfTrainingMethod {
    fn stage_kind(&self) -> MethodKind {
        if self.cps {
            MethodKind::Cps
        } else {
            MethodKind::Supervised
        }
    }
}

impl Method for SelfTrainingMethod {
    fn kind(&self) -> MethodKind {
        if self.cps {
            MethodKind::CpsSelfTraining
        } else {
            MethodKind::SelfTraining
        }
    }

    /// The retraining-stage trainer, freshly initialized.
    fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Trainer>> {
        let s1 = derive_seed(cfg.seeds.net1, stream::RETRAIN, 0);
        if self.cps {
            let s2 = derive_seed(cfg.seeds.net2, stream::RETRAIN, 0);
            Ok(Box::new(DualTrainer::new(self.kind(), cfg, s1, s2)?))
        } else {
            Ok(Box::new(SingleTrainer::new(self.kind(), cfg, s1)?))
        }
    }

    fn run(&self, cfg: &TrainConfig, data: &TrainData) -> Result<RunResult> {
        let start = Instant::now();
        let guarded = GuardedDataset::new(data.train, data.protocol)?;
        let stage_cfg = TrainConfig {
            method: self.stage_kind(),
            ..cfg.clone()
        };
        let registry = Registry::default();
        let first = registry.get(self.stage_kind())?;
        let mut trainer = first.build(&stage_cfg)?;
        let protocol = if first.uses_unlabeled() {
            data.protocol.clone()
        } else {
            data.protocol.without_unlabeled()
        };
        let stage1 = run_loop(
            trainer.as_mut(),
            &stage_cfg,
            &guarded,
            &protocol,
            data.val,
            None,
        )?;
        let pseudo = pseudo_label_dataset(
            trainer.primary(),
            &guarded,
            &data.protocol.unlabeled,
            cfg.pseudo_threshold,
        )?;
        let (protocol, pseudo) = if data.protocol.unlabeled.is_empty() {
            (data.protocol.without_unlabeled(), None)
        } else {
            (data.protocol.clone(), Some(&pseudo))
        };
        let mut retrain = self.build(cfg)?;
        let stage3 = run_loop(retrain.as_mut(), cfg, &guarded, &protocol, data.val, pseudo)?;
        let (net1, net2) = retrain.into_networks();
        Ok(RunResult {
            config: cfg.clone(),
            records: stage3.records,
            stage1: stage1.records,
            net1,
            net2,
            iterations: stage1.iterations + stage3.iterations,
            unlabeled_gt_reads: guarded.unlabeled_gt_reads(),
            secondary_eval_reads: stage1.secondary_eval_reads + stage3.secondary_eval_reads,
            wall_time: start.elapsed(),
        })
    }
}

pub(super) fn register_all(r: &mut Registry) {
    r.register(Box::new(SupervisedMethod));
    r.register(Box::new(CpsMethod { cutmix: false }));
    r.register(Box::new(CpsMethod { cutmix: true }));
    r.register(Box::new(CpcMethod));
    r.register(Box::new(MeanTeacherMethod));
    r.register(Box::new(SpsMethod { cutmix: false }));
    r.register(Box::new(SpsMethod { cutmix: true }));
    r.register(Box::new(PseudoSegMethod));
    r.register(Box::new(SelfTrainingMethod { cps: false }));
    r.register(Box::new(SelfTrainingMethod { cps: true }));
}
