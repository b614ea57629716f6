//! Per-iteration objectives and update steps for every method.
//!
//! Each `*_objective` records the full loss on a tape and returns the bound
//! parameter vars, so callers can differentiate it or just read its value.
//! The matching `step_*` runs backward and one SGD update per trained net.

use rand::Rng;

use crate::augment::{
    cutmix_batch, mix_pseudo_batch, replay_strong, sample_cutmix_mask, AugRecord, CutMixParams,
    PixelMask, StrongParams,
};
use crate::error::{arg_err, dim_err, Result};
use crate::losses::{
    argmax_channels, cpc_loss, cps_loss, cross_supervision, ohem_ce, pixel_ce, sps_loss,
    ConfidenceMap, GroundTruthMap, LabelMap, LossBreakdown, OhemConfig, PseudoLabelMap, IGNORE,
};
use crate::model::{ema_update, SegNet};
use crate::tensor::{sgd_step, OptimizerState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub lambda: f64,
    pub ohem: bool,
    /// Also apply the cross term to labeled-batch outputs.
    pub cps_on_labeled: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            lambda: 1.5,
            ohem: false,
            cps_on_labeled: true,
        }
    }
}

/// Augmented inputs of one iteration.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub labeled: &'a Tensor,
    pub gt: &'a GroundTruthMap,
    pub unlabeled: Option<&'a Tensor>,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    pub parts: LossBreakdown,
    /// Parameter vars of each trained network, in [`SegNet::params`] order.
    pub bound: Vec<Vec<Var>>,
}

pub fn forward_map(
    tape: &mut Tape,
    net: &SegNet,
    bound: &[Var],
    images: &Tensor,
) -> Result<ConfidenceMap> {
    let x = tape.leaf(images.clone());
    let logits = net.forward(tape, bound, x)?;
    ConfidenceMap::from_logits(tape, logits)
}

/// Gradient-free softmax output.
pub fn predict_probs(net: &SegNet, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let map = forward_map(&mut tape, net, &bound, images)?;
    Ok(map.probs(&tape).clone())
}

pub fn predict_labels(net: &SegNet, images: &Tensor) -> Result<PseudoLabelMap> {
    Ok(PseudoLabelMap(argmax_channels(&net.predict(images)?)?))
}

fn supervised_ce(
    tape: &mut Tape,
    map: &ConfidenceMap,
    target: &LabelMap,
    ohem: bool,
) -> Result<Var> {
    if ohem {
        let cfg = OhemConfig::for_pixels(target.labels.len());
        Ok(ohem_ce(tape, map.logp, target, cfg)?.loss)
    } else {
        Ok(pixel_ce(tape, map.logp, target, IGNORE)?.loss)
    }
}

fn value(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item())
}

fn add_opt(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    match (a, b) {
        (Some(a), Some(b)) => tape.add(a, b).map(Some),
        (a, None) => Ok(a),
        (None, b) => Ok(b),
    }
}

/// `l_s + λ·unsup`, filling in the scalar breakdown.
fn finish(
    tape: &mut Tape,
    l_s: Var,
    labeled: Option<Var>,
    unlabeled: Option<Var>,
    cpc: Option<Var>,
    lambda: f64,
    bound: Vec<Vec<Var>>,
) -> Result<Objective> {
    let unsup = add_opt(tape, labeled, unlabeled)?;
    let unsup = add_opt(tape, unsup, cpc)?;
    let loss = match unsup {
        Some(u) => {
            let scaled = tape.scale(u, lambda);
            tape.add(l_s, scaled)?
        }
        None => l_s,
    };
    let parts = LossBreakdown {
        l_s: tape.value(l_s).item(),
        l_cps_labeled: value(tape, labeled),
        l_cps_unlabeled: value(tape, unlabeled),
        l_cpc: value(tape, cpc),
        total: tape.value(loss).item(),
        lambda,
    };
    Ok(Objective { loss, parts, bound })
}

fn apply(net: &mut SegNet, opt: &mut OptimizerState, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    let mut params: Vec<&mut Tensor> = net.params_mut().iter_mut().map(|p| &mut p.value).collect();
    sgd_step(&mut params, grads, opt, lr)
}

/// Backward through the objective and one update for each `(net, opt)`.
pub fn apply_objective(
    tape: &Tape,
    obj: &Objective,
    nets: &mut [(&mut SegNet, &mut OptimizerState)],
    lr: f64,
) -> Result<()> {
    if nets.len() != obj.bound.len() {
        return Err(arg_err!(
            "{} networks for {} bound parameter sets",
            nets.len(),
            obj.bound.len()
        ));
    }
    let mut grads = tape.backward(obj.loss)?;
    for ((net, opt), bound) in nets.iter_mut().zip(&obj.bound) {
        let g: Vec<Vec<f64>> = bound.iter().map(|&v| grads.take(v)).collect();
        apply(net, opt, &g, lr)?;
    }
    Ok(())
}

pub fn supervised_objective(
    tape: &mut Tape,
    net: &SegNet,
    input: &StepInput,
    opts: &StepOptions,
) -> Result<Objective> {
    let bound = net.bind(tape);
    let p = forward_map(tape, net, &bound, input.labeled)?;
    let l_s = supervised_ce(tape, &p, &input.gt.0, opts.ohem)?;
    finish(tape, l_s, None, None, None, 0.0, vec![bound])
}

/// Labeled outputs and `L_s` of both nets.
struct DualLabeled {
    p1: ConfidenceMap,
    p2: ConfidenceMap,
    l_s: Var,
    b1: Vec<Var>,
    b2: Vec<Var>,
}

fn dual_labeled(
    tape: &mut Tape,
    net1: &SegNet,
    net2: &SegNet,
    input: &StepInput,
    ohem: bool,
) -> Result<DualLabeled> {
    let b1 = net1.bind(tape);
    let b2 = net2.bind(tape);
    let p1 = forward_map(tape, net1, &b1, input.labeled)?;
    let p2 = forward_map(tape, net2, &b2, input.labeled)?;
    let s1 = supervised_ce(tape, &p1, &input.gt.0, ohem)?;
    let s2 = supervised_ce(tape, &p2, &input.gt.0, ohem)?;
    let l_s = tape.add(s1, s2)?;
    Ok(DualLabeled {
        p1,
        p2,
        l_s,
        b1,
        b2,
    })
}

/// `L_s + λ(L_cps^l + L_cps^u)` over both networks.
pub fn cps_objective(
    tape: &mut Tape,
    net1: &SegNet,
    net2: &SegNet,
    input: &StepInput,
    opts: &StepOptions,
) -> Result<Objective> {
    let d = dual_labeled(tape, net1, net2, input, opts.ohem)?;
    let labeled = if opts.cps_on_labeled {
        Some(cps_loss(tape, &d.p1, &d.p2)?)
    } else {
        None
    };
    let unlabeled = match input.unlabeled {
        Some(u) => {
            let q1 = forward_map(tape, net1, &d.b1, u)?;
            let q2 = forward_map(tape, net2, &d.b2, u)?;
            Some(cps_loss(tape, &q1, &q2)?)
        }
        None => None,
    };
    finish(
        tape,
        d.l_s,
        labeled,
        unlabeled,
        None,
        opts.lambda,
        vec![d.b1, d.b2],
    )
}

/// Same layout as [`cps_objective`] with the probability-consistency term.
pub fn cpc_objective(
    tape: &mut Tape,
    net1: &SegNet,
    net2: &SegNet,
    input: &StepInput,
    opts: &StepOptions,
) -> Result<Objective> {
    let d = dual_labeled(tape, net1, net2, input, opts.ohem)?;
    let mut cpc = if opts.cps_on_labeled {
        Some(cpc_loss(tape, &d.p1, &d.p2)?)
    } else {
        None
    };
    if let Some(u) = input.unlabeled {
        let q1 = forward_map(tape, net1, &d.b1, u)?;
        let q2 = forward_map(tape, net2, &d.b2, u)?;
        let c = cpc_loss(tape, &q1, &q2)?;
        cpc = add_opt(tape, cpc, Some(c))?;
    }
    finish(tape, d.l_s, None, None, cpc, opts.lambda, vec![d.b1, d.b2])
}

/// Splits an unlabeled batch into consecutive `(a, b)` source pairs.
pub fn split_pairs(unlabeled: &Tensor) -> Result<(Tensor, Tensor)> {
    let [b, ..] = unlabeled.dims4()?;
    if b % 2 != 0 {
        return Err(arg_err!("CutMix needs an even unlabeled batch, got {b}"));
    }
    let a: Vec<Tensor> = (0..b / 2)
        .map(|i| unlabeled.slice_batch(2 * i, 1))
        .collect::<Result<_>>()?;
    let bb: Vec<Tensor> = (0..b / 2)
        .map(|i| unlabeled.slice_batch(2 * i + 1, 1))
        .collect::<Result<_>>()?;
    let cat = |v: &[Tensor]| -> Result<Tensor> {
        let mut out = v[0].clone();
        for t in &v[1..] {
            out = Tensor::concat_batch(&out, t)?;
        }
        Ok(out)
    };
    Ok((cat(&a)?, cat(&bb)?))
}

pub fn sample_masks(
    count: usize,
    height: usize,
    width: usize,
    params: &CutMixParams,
    rng: &mut impl Rng,
) -> Result<Vec<PixelMask>> {
    (0..count)
        .map(|_| sample_cutmix_mask(height, width, params, rng).map(|m| m.to_pixel_mask()))
        .collect()
}

/// Mixed image and each net's detached mixed pseudo map.
fn cutmix_sources(
    nets: &[&SegNet],
    unlabeled: &Tensor,
    masks: &[PixelMask],
) -> Result<(Tensor, Vec<PseudoLabelMap>)> {
    let (a, b) = split_pairs(unlabeled)?;
    if masks.len() != a.shape()[0] {
        return Err(dim_err!(
            "{} masks for {} source pairs",
            masks.len(),
            a.shape()[0]
        ));
    }
    let mixed = cutmix_batch(&a, &b, masks)?;
    let maps = nets
        .iter()
        .map(|net| {
            let ya = predict_labels(net, &a)?;
            let yb = predict_labels(net, &b)?;
            mix_pseudo_batch(&ya, &yb, masks)
        })
        .collect::<Result<_>>()?;
    Ok((mixed, maps))
}

/// CPS where the unlabeled term is computed on CutMixed pairs; each net's
/// mixed output is supervised by the other net's mixed pseudo map.
pub fn cps_cutmix_objective(
    tape: &mut Tape,
    net1: &SegNet,
    net2: &SegNet,
    input: &StepInput,
    masks: &[PixelMask],
    opts: &StepOptions,
) -> Result<Objective> {
    let d = dual_labeled(tape, net1, net2, input, opts.ohem)?;
    let labeled = if opts.cps_on_labeled {
        Some(cps_loss(tape, &d.p1, &d.p2)?)
    } else {
        None
    };
    let unlabeled = match input.unlabeled {
        Some(u) => {
            let (mixed, maps) = cutmix_sources(&[net1, net2], u, masks)?;
            let q1 = forward_map(tape, net1, &d.b1, &mixed)?;
            let q2 = forward_map(tape, net2, &d.b2, &mixed)?;
            Some(cross_supervision(tape, &q1, &maps[1], &q2, &maps[0])?)
        }
        None => None,
    };
    finish(
        tape,
        d.l_s,
        labeled,
        unlabeled,
        None,
        opts.lambda,
        vec![d.b1, d.b2],
    )
}

pub fn sps_objective(
    tape: &mut Tape,
    net: &SegNet,
    input: &StepInput,
    opts: &StepOptions,
) -> Result<Objective> {
    let bound = net.bind(tape);
    let p = forward_map(tape, net, &bound, input.labeled)?;
    let l_s = supervised_ce(tape, &p, &input.gt.0, opts.ohem)?;
    let unlabeled = match input.unlabeled {
        Some(u) => {
            let q = forward_map(tape, net, &bound, u)?;
            Some(sps_loss(tape, &q)?)
        }
        None => None,
    };
    finish(tape, l_s, None, unlabeled, None, opts.lambda, vec![bound])
}

pub fn sps_cutmix_objective(
    tape: &mut Tape,
    net: &SegNet,
    input: &StepInput,
    masks: &[PixelMask],
    opts: &StepOptions,
) -> Result<Objective> {
    let bound = net.bind(tape);
    let p = forward_map(tape, net, &bound, input.labeled)?;
    let l_s = supervised_ce(tape, &p, &input.gt.0, opts.ohem)?;
    let unlabeled = match input.unlabeled {
        Some(u) => {
            let (mixed, maps) = cutmix_sources(&[net], u, masks)?;
            let q = forward_map(tape, net, &bound, &mixed)?;
            Some(pixel_ce(tape, q.logp, &maps[0].0, IGNORE)?.loss)
        }
        None => None,
    };
    finish(tape, l_s, None, unlabeled, None, opts.lambda, vec![bound])
}

/// Strong views built on top of the weak views: photometric changes only,
/// so the weak flip is shared and weak-branch pseudo labels line up pixel
/// for pixel.
pub fn strong_views(weak: &Tensor, params: &StrongParams, rng: &mut impl Rng) -> Result<Tensor> {
    let [b, ..] = weak.dims4()?;
    let mut out = Vec::with_capacity(weak.numel());
    for i in 0..b {
        let img = weak.slice_batch(i, 1)?;
        let shape = img.shape()[1..].to_vec();
        let img = Tensor::new(&shape, img.into_data())?;
        let record = AugRecord {
            noise_seed: rng.random(),
            ..AugRecord::identity()
        };
        out.extend(replay_strong(&img, params, &record)?.into_data());
    }
    Tensor::new(weak.shape(), out)
}

/// `L_s + λ·ce(net(strong), argmax net(weak))`; only the strong branch is
/// on the tape.
pub fn pseudoseg_objective(
    tape: &mut Tape,
    net: &SegNet,
    input: &StepInput,
    strong: Option<&Tensor>,
    opts: &StepOptions,
) -> Result<Objective> {
    let bound = net.bind(tape);
    let p = forward_map(tape, net, &bound, input.labeled)?;
    let l_s = supervised_ce(tape, &p, &input.gt.0, opts.ohem)?;
    let unlabeled = match (input.unlabeled, strong) {
        (Some(weak), Some(strong)) => {
            let y_w = predict_labels(net, weak)?;
            let q = forward_map(tape, net, &bound, strong)?;
            Some(pixel_ce(tape, q.logp, &y_w.0, IGNORE)?.loss)
        }
        (None, None) => None,
        _ => {
            return Err(arg_err!(
                "weak and strong unlabeled views must both be present"
            ))
        }
    };
    finish(tape, l_s, None, unlabeled, None, opts.lambda, vec![bound])
}

/// Mirrors the width axis of the samples marked in `which`.
pub fn flip_samples(t: &Tensor, which: &[bool]) -> Result<Tensor> {
    let [b, k, h, w] = t.dims4()?;
    if which.len() != b {
        return Err(dim_err!("{} flip flags for batch {b}", which.len()));
    }
    let mut data = t.data().to_vec();
    for (bi, sample) in data.chunks_mut(k * h * w).enumerate() {
        if which[bi] {
            sample.chunks_mut(w).for_each(|row| row.reverse());
        }
    }
    Tensor::new(t.shape(), data)
}

/// Student `L_s` plus `λ` times the mean squared distance between student
/// and (constant) teacher probabilities on the unlabeled batch.
/// `teacher_probs` must already be in the student's coordinates.
pub fn mean_teacher_objective(
    tape: &mut Tape,
    student: &SegNet,
    input: &StepInput,
    teacher_probs: Option<&Tensor>,
    opts: &StepOptions,
) -> Result<Objective> {
    let bound = student.bind(tape);
    let p = forward_map(tape, student, &bound, input.labeled)?;
    let l_s = supervised_ce(tape, &p, &input.gt.0, opts.ohem)?;
    let cons = match (input.unlabeled, teacher_probs) {
        (Some(u), Some(t)) => {
            let q = forward_map(tape, student, &bound, u)?;
            let [b, _, h, w] = q.dims(tape);
            let target = tape.leaf(t.clone());
            Some(tape.sq_dist(q.probs, target, 1.0 / (b * h * w) as f64)?)
        }
        (None, None) => None,
        _ => return Err(arg_err!("teacher probabilities need an unlabeled batch")),
    };
    finish(tape, l_s, None, None, cons, opts.lambda, vec![bound])
}

pub fn step_supervised(
    net: &mut SegNet,
    opt: &mut OptimizerState,
    input: &StepInput,
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let obj = supervised_objective(&mut tape, net, input, opts)?;
    apply_objective(&tape, &obj, &mut [(net, opt)], lr)?;
    Ok(obj.parts)
}

#[allow(clippy::too_many_arguments)]
fn dual_step(
    net1: &mut SegNet,
    net2: &mut SegNet,
    opt1: &mut OptimizerState,
    opt2: &mut OptimizerState,
    lr: f64,
    build: impl FnOnce(&mut Tape, &SegNet, &SegNet) -> Result<Objective>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let obj = build(&mut tape, net1, net2)?;
    apply_objective(&tape, &obj, &mut [(net1, opt1), (net2, opt2)], lr)?;
    Ok(obj.parts)
}

pub fn step_cps(
    nets: (&mut SegNet, &mut SegNet),
    opts_state: (&mut OptimizerState, &mut OptimizerState),
    input: &StepInput,
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    dual_step(nets.0, nets.1, opts_state.0, opts_state.1, lr, |t, a, b| {
        cps_objective(t, a, b, input, opts)
    })
}

pub fn step_cpc(
    nets: (&mut SegNet, &mut SegNet),
    opts_state: (&mut OptimizerState, &mut OptimizerState),
    input: &StepInput,
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    dual_step(nets.0, nets.1, opts_state.0, opts_state.1, lr, |t, a, b| {
        cpc_objective(t, a, b, input, opts)
    })
}

pub fn step_cps_cutmix(
    nets: (&mut SegNet, &mut SegNet),
    opts_state: (&mut OptimizerState, &mut OptimizerState),
    input: &StepInput,
    masks: &[PixelMask],
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    dual_step(nets.0, nets.1, opts_state.0, opts_state.1, lr, |t, a, b| {
        cps_cutmix_objective(t, a, b, input, masks, opts)
    })
}

pub fn step_sps(
    net: &mut SegNet,
    opt: &mut OptimizerState,
    input: &StepInput,
    masks: Option<&[PixelMask]>,
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let obj = match masks {
        Some(m) => sps_cutmix_objective(&mut tape, net, input, m, opts)?,
        None => sps_objective(&mut tape, net, input, opts)?,
    };
    apply_objective(&tape, &obj, &mut [(net, opt)], lr)?;
    Ok(obj.parts)
}

pub fn step_pseudoseg_style(
    net: &mut SegNet,
    opt: &mut OptimizerState,
    input: &StepInput,
    strong: Option<&Tensor>,
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let obj = pseudoseg_objective(&mut tape, net, input, strong, opts)?;
    apply_objective(&tape, &obj, &mut [(net, opt)], lr)?;
    Ok(obj.parts)
}

/// Student update followed by the teacher's EMA update.
#[allow(clippy::too_many_arguments)]
pub fn step_mean_teacher(
    student: &mut SegNet,
    teacher: &mut SegNet,
    opt: &mut OptimizerState,
    input: &StepInput,
    teacher_view: Option<(&Tensor, &[bool])>,
    alpha: f64,
    opts: &StepOptions,
    lr: f64,
) -> Result<LossBreakdown> {
    let probs = match teacher_view {
        Some((view, align)) => Some(flip_samples(&predict_probs(teacher, view)?, align)?),
        None => None,
    };
    let mut tape = Tape::new();
    let obj = mean_teacher_objective(&mut tape, student, input, probs.as_ref(), opts)?;
    apply_objective(&tape, &obj, &mut [(student, opt)], lr)?;
    ema_update(teacher, student, alpha)?;
    Ok(obj.parts)
}

/// Supervised loss over labeled ground truth and pseudo-labeled unlabeled
/// images, taken as one batch.
pub fn pseudo_label_objective(
    tape: &mut Tape,
    net: &SegNet,
    input: &StepInput,
    pseudo: Option<&LabelMap>,
    opts: &StepOptions,
) -> Result<Objective> {
    let (images, target) = match (input.unlabeled, pseudo) {
        (Some(u), Some(y)) => (
            Tensor::concat_batch(input.labeled, u)?,
            LabelMap::concat(&[&input.gt.0, y])?,
        ),
        (None, None) => (input.labeled.clone(), input.gt.0.clone()),
        _ => return Err(arg_err!("pseudo labels need an unlabeled batch")),
    };
    let bound = net.bind(tape);
    let p = forward_map(tape, net, &bound, &images)?;
    let l_s = supervised_ce(tape, &p, &target, opts.ohem)?;
    finish(tape, l_s, None, None, None, 0.0, vec![bound])
}

/// CPS where the unlabeled batch also carries fixed pseudo labels that act
/// as extra `L_s` targets for both nets.
pub fn cps_pseudo_label_objective(
    tape: &mut Tape,
    net1: &SegNet,
    net2: &SegNet,
    input: &StepInput,
    pseudo: Option<&LabelMap>,
    opts: &StepOptions,
) -> Result<Objective> {
    let d = dual_labeled(tape, net1, net2, input, opts.ohem)?;
    let labeled = if opts.cps_on_labeled {
        Some(cps_loss(tape, &d.p1, &d.p2)?)
    } else {
        None
    };
    let (l_s, unlabeled) = match (input.unlabeled, pseudo) {
        (Some(u), Some(y)) => {
            let q1 = forward_map(tape, net1, &d.b1, u)?;
            let q2 = forward_map(tape, net2, &d.b2, u)?;
            let s1 = supervised_ce(tape, &q1, y, opts.ohem)?;
            let s2 = supervised_ce(tape, &q2, y, opts.ohem)?;
            let s = tape.add(s1, s2)?;
            let l_s = tape.add(d.l_s, s)?;
            (l_s, Some(cps_loss(tape, &q1, &q2)?))
        }
        (None, None) => (d.l_s, None),
        _ => return Err(arg_err!("pseudo labels need an unlabeled batch")),
    };
    finish(
        tape,
        l_s,
        labeled,
        unlabeled,
        None,
        opts.lambda,
        vec![d.b1, d.b2],
    )
}
