//! Supervision and consistency objectives. Every loss is recorded on a
//! [`Tape`] and returns a scalar [`Var`]; pseudo labels are plain integer
//! maps, so they never carry gradient.

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ground-truth value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Probability floor used where a loss is written in terms of stored
/// probabilities rather than log-softmax outputs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Integer label map over `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != batch * height * width {
            return Err(dim_err!(
                "label map [{batch}, {height}, {width}] given {} labels",
                labels.len()
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, b: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.labels[b * n..(b + 1) * n]
    }

    pub fn concat(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| dim_err!("cannot concat zero label maps"))?;
        let mut labels = Vec::new();
        let mut batch = 0;
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(dim_err!("label map spatial size mismatch"));
            }
            batch += m.batch;
            labels.extend_from_slice(&m.labels);
        }
        Self::new(batch, first.height, first.width, labels)
    }
}

/// Argmax one-hot map stored as class indices. Detached by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap(pub LabelMap);

/// Annotated labels; values are `< K` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMap(pub LabelMap);

/// Softmax-normalized network output. Keeps the log-probabilities so
/// cross-entropy never takes the log of a stored probability.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceMap {
    pub logp: Var,
    pub probs: Var,
}

impl ConfidenceMap {
    pub fn from_logits(tape: &mut Tape, logits: Var) -> Result<Self> {
        let logp = tape.log_softmax_channels(logits)?;
        let probs = tape.exp(logp);
        Ok(Self { logp, probs })
    }

    pub fn dims(&self, tape: &Tape) -> [usize; 4] {
        tape.value(self.probs)
            .dims4()
            .expect("confidence maps are rank 4")
    }

    pub fn probs<'t>(&self, tape: &'t Tape) -> &'t Tensor {
        tape.value(self.probs)
    }
}

/// Per-pixel argmax over the channel axis of `[B, K, H, W]`; ties go to the
/// lowest class index.
pub fn argmax_channels(values: &Tensor) -> Result<LabelMap> {
    let [b, k, h, w] = values.dims4()?;
    if k > IGNORE as usize {
        return Err(dim_err!("{k} classes do not fit the label encoding"));
    }
    let n = h * w;
    let data = values.data();
    let mut labels = Vec::with_capacity(b * n);
    for bi in 0..b {
        for i in 0..n {
            let mut best = 0;
            let mut best_v = data[bi * k * n + i];
            for c in 1..k {
                let v = data[(bi * k + c) * n + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMap::new(b, h, w, labels)
}

pub fn pseudo_label(tape: &Tape, map: &ConfidenceMap) -> Result<PseudoLabelMap> {
    argmax_channels(map.probs(tape)).map(PseudoLabelMap)
}

#[derive(Clone, Copy, Debug)]
pub struct PixelCe {
    pub loss: Var,
    /// Number of non-ignored pixels; zero means the loss is a constant 0.
    pub scored: usize,
}

fn check_map_dims(logp: [usize; 4], target: &LabelMap) -> Result<()> {
    let [b, _, h, w] = logp;
    if target.dims() != [b, h, w] {
        return Err(dim_err!(
            "target map {:?} does not match prediction [{b}, {h}, {w}]",
            target.dims()
        ));
    }
    Ok(())
}

/// Mean of `−log p[target]` over pixels whose target is not `ignore`.
pub fn pixel_ce(tape: &mut Tape, logp: Var, target: &LabelMap, ignore: u8) -> Result<PixelCe> {
    let dims = tape.value(logp).dims4()?;
    check_map_dims(dims, target)?;
    let k = dims[1];
    let mut scored = 0;
    for &t in &target.labels {
        if t != ignore {
            if t as usize >= k {
                return Err(Error::Data(format!(
                    "target class {t} out of range for {k} classes"
                )));
            }
            scored += 1;
        }
    }
    if scored == 0 {
        log::warn!("pixel_ce: every target pixel is ignored; loss is 0");
    }
    let w = if scored == 0 {
        0.0
    } else {
        1.0 / scored as f64
    };
    let weights = target
        .labels
        .iter()
        .map(|&t| if t == ignore { 0.0 } else { w })
        .collect();
    let targets = target.labels.iter().map(|&t| t as u32).collect();
    let loss = tape.pick_nll(logp, targets, weights)?;
    Ok(PixelCe { loss, scored })
}

/// `pixel_ce(p1, gt) + pixel_ce(p2, gt)`.
pub fn supervision_loss(
    tape: &mut Tape,
    p1: &ConfidenceMap,
    p2: &ConfidenceMap,
    gt: &GroundTruthMap,
) -> Result<Var> {
    let a = pixel_ce(tape, p1.logp, &gt.0, IGNORE)?;
    let b = pixel_ce(tape, p2.logp, &gt.0, IGNORE)?;
    tape.add(a.loss, b.loss)
}

/// Cross pseudo supervision: each map is supervised by the other's argmax.
pub fn cps_loss(tape: &mut Tape, p1: &ConfidenceMap, p2: &ConfidenceMap) -> Result<Var> {
    if p1.dims(tape) != p2.dims(tape) {
        return Err(dim_err!("cps_loss: maps have different shapes"));
    }
    let y1 = pseudo_label(tape, p1)?;
    let y2 = pseudo_label(tape, p2)?;
    cross_supervision(tape, p1, &y2, p2, &y1)
}

/// `mean ce(p1, y_for_1) + mean ce(p2, y_for_2)` with externally supplied
/// pseudo labels (mixed maps in the CutMix variant).
pub fn cross_supervision(
    tape: &mut Tape,
    p1: &ConfidenceMap,
    y_for_1: &PseudoLabelMap,
    p2: &ConfidenceMap,
    y_for_2: &PseudoLabelMap,
) -> Result<Var> {
    let a = pixel_ce(tape, p1.logp, &y_for_1.0, IGNORE)?;
    let b = pixel_ce(tape, p2.logp, &y_for_2.0, IGNORE)?;
    tape.add(a.loss, b.loss)
}

/// Same formula as [`cps_loss`], applied to labeled-batch outputs.
pub fn cps_loss_labeled(tape: &mut Tape, p1: &ConfidenceMap, p2: &ConfidenceMap) -> Result<Var> {
    cps_loss(tape, p1, p2)
}

/// Mean over pixels of `‖p1 − p2‖² + ‖p2 − p1‖²`.
pub fn cpc_loss(tape: &mut Tape, p1: &ConfidenceMap, p2: &ConfidenceMap) -> Result<Var> {
    let [b, _, h, w] = p1.dims(tape);
    if p1.dims(tape) != p2.dims(tape) {
        return Err(dim_err!("cpc_loss: maps have different shapes"));
    }
    tape.sq_dist(p1.probs, p2.probs, 2.0 / (b * h * w) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OhemConfig {
    pub threshold: f64,
    pub min_kept: usize,
}

impl OhemConfig {
    /// Threshold 0.7 and a sixteenth of the batch's pixels.
    pub fn for_pixels(pixels: usize) -> Self {
        Self {
            threshold: 0.7,
            min_kept: (pixels / 16).max(1),
        }
    }
}

/// Cross-entropy over hard pixels: those whose true-class probability is
/// below `threshold`, topped up with the hardest remaining pixels until at
/// least `min_kept` are used.
pub fn ohem_ce(tape: &mut Tape, logp: Var, target: &LabelMap, cfg: OhemConfig) -> Result<PixelCe> {
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(config_err!(
            "ohem threshold must be in (0, 1], got {}",
            cfg.threshold
        ));
    }
    if cfg.min_kept == 0 {
        return Err(config_err!("ohem min_kept must be >= 1"));
    }
    let dims = tape.value(logp).dims4()?;
    check_map_dims(dims, target)?;
    let [_, k, h, w] = dims;
    let n = h * w;
    let lp = tape.value(logp).data();
    let mut valid: Vec<(f64, usize)> = Vec::new();
    for (i, &t) in target.labels.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        if t as usize >= k {
            return Err(Error::Data(format!(
                "target class {t} out of range for {k} classes"
            )));
        }
        let (bi, pix) = (i / n, i % n);
        valid.push((lp[(bi * k + t as usize) * n + pix].exp(), i));
    }
    let mut keep = vec![false; target.labels.len()];
    let mut kept = 0;
    for &(p, i) in &valid {
        if p < cfg.threshold {
            keep[i] = true;
            kept += 1;
        }
    }
    if kept < cfg.min_kept {
        valid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in valid.iter().take(cfg.min_kept) {
            keep[i] = true;
        }
        kept = keep.iter().filter(|&&x| x).count();
    }
    let wt = if kept == 0 { 0.0 } else { 1.0 / kept as f64 };
    let weights = keep.iter().map(|&x| if x { wt } else { 0.0 }).collect();
    let targets = target.labels.iter().map(|&t| t as u32).collect();
    let loss = tape.pick_nll(logp, targets, weights)?;
    Ok(PixelCe { loss, scored: kept })
}

/// Single-network pseudo supervision: a map supervised by its own argmax.
pub fn sps_loss(tape: &mut Tape, p: &ConfidenceMap) -> Result<Var> {
    let y = pseudo_label(tape, p)?;
    Ok(pixel_ce(tape, p.logp, &y.0, IGNORE)?.loss)
}

/// Scalar parts of one training step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_cps_labeled: f64,
    pub l_cps_unlabeled: f64,
    pub l_cpc: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `l_s + λ·(l_cps_labeled + l_cps_unlabeled)`.
pub fn total_loss(parts: &LossBreakdown) -> Result<f64> {
    check_lambda(parts.lambda)?;
    Ok(parts.l_s + parts.lambda * (parts.l_cps_labeled + parts.l_cps_unlabeled))
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(config_err!("lambda must be >= 0, got {lambda}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            &shape,
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn map_from(tape: &mut Tape, logits: Tensor) -> (Var, ConfidenceMap) {
        let x = tape.leaf(logits);
        let m = ConfidenceMap::from_logits(tape, x).unwrap();
        (x, m)
    }

    /// Probability map with explicit per-pixel vectors, via log inputs.
    fn from_probs(tape: &mut Tape, shape: [usize; 4], probs: &[f64]) -> ConfidenceMap {
        let logits =
            Tensor::new(&shape, probs.iter().map(|p| p.max(1e-300).ln()).collect()).unwrap();
        map_from(tape, logits).1
    }

    // -- loop oracles, written against plain softmax over raw logits --

    fn softmax_at(l: &Tensor, b: usize, i: usize) -> Vec<f64> {
        let [_, k, h, w] = l.dims4().unwrap();
        let n = h * w;
        let z: Vec<f64> = (0..k).map(|c| l.data()[(b * k + c) * n + i]).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        z.iter().map(|v| (v - m).exp() / s).collect()
    }

    fn argmax(p: &[f64]) -> usize {
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }

    fn oracle_ce(l: &Tensor, target: &dyn Fn(usize, usize) -> Option<usize>) -> f64 {
        let [b, _, h, w] = l.dims4().unwrap();
        let (mut sum, mut count) = (0.0, 0);
        for bi in 0..b {
            for i in 0..h * w {
                if let Some(t) = target(bi, i) {
                    sum -= softmax_at(l, bi, i)[t].ln();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    const SHAPE: [usize; 4] = [2, 3, 4, 4];

    #[test]
    fn pseudo_label_cases() {
        let mut tape = Tape::new();
        let m = from_probs(&mut tape, [1, 3, 1, 1], &[0.1, 0.7, 0.2]);
        assert_eq!(pseudo_label(&tape, &m).unwrap().0.labels, vec![1]);
        let u = from_probs(&mut tape, [1, 4, 1, 1], &[0.25; 4]);
        assert_eq!(pseudo_label(&tape, &u).unwrap().0.labels, vec![0]);

        let l = random_logits([3, 4, 5, 5], 1);
        let (_, m) = map_from(&mut tape, l.clone());
        let got = pseudo_label(&tape, &m).unwrap();
        for b in 0..3 {
            for i in 0..25 {
                assert_eq!(
                    got.0.labels[b * 25 + i] as usize,
                    argmax(&softmax_at(&l, b, i))
                );
            }
        }
    }

    #[test]
    fn pixel_ce_cases() {
        let mut tape = Tape::new();
        let (_, u) = map_from(&mut tape, Tensor::zeros(&[1, 4, 2, 2]));
        let gt = LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let v = pixel_ce(&mut tape, u.logp, &gt, IGNORE).unwrap();
        assert!((tape.value(v.loss).item() - 4f64.ln()).abs() < 1e-12);

        let mut confident = vec![0.0; 4 * 4];
        for i in 0..4 {
            confident[i * 4 + i] = 50.0;
        }
        // channel-major layout: logit for class c at pixel i is index c*4+i
        let (_, c) = map_from(&mut tape, Tensor::new(&[1, 4, 2, 2], confident).unwrap());
        let v = pixel_ce(&mut tape, c.logp, &gt, IGNORE).unwrap();
        assert!(tape.value(v.loss).item() < 1e-20);

        let all_ignored = LabelMap::new(1, 2, 2, vec![IGNORE; 4]).unwrap();
        let v = pixel_ce(&mut tape, u.logp, &all_ignored, IGNORE).unwrap();
        assert_eq!((tape.value(v.loss).item(), v.scored), (0.0, 0));

        let bad = LabelMap::new(1, 2, 2, vec![0, 4, 0, 0]).unwrap();
        assert!(matches!(
            pixel_ce(&mut tape, u.logp, &bad, IGNORE),
            Err(Error::Data(_))
        ));

        let l = random_logits(SHAPE, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<u8> = (0..32)
            .map(|_| {
                if rng.random_bool(0.2) {
                    IGNORE
                } else {
                    rng.random_range(0..3)
                }
            })
            .collect();
        let gt = LabelMap::new(2, 4, 4, labels.clone()).unwrap();
        let (_, m) = map_from(&mut tape, l.clone());
        let v = pixel_ce(&mut tape, m.logp, &gt, IGNORE).unwrap();
        let oracle = oracle_ce(&l, &|b, i| {
            let t = labels[b * 16 + i];
            (t != IGNORE).then_some(t as usize)
        });
        assert!((tape.value(v.loss).item() - oracle).abs() < 1e-10);
    }

    #[test]
    fn supervision_loss_cases() {
        let mut tape = Tape::new();
        let (_, u1) = map_from(&mut tape, Tensor::zeros(&[1, 4, 2, 2]));
        let (_, u2) = map_from(&mut tape, Tensor::zeros(&[1, 4, 2, 2]));
        let gt = GroundTruthMap(LabelMap::new(1, 2, 2, vec![3, 1, 2, 0]).unwrap());
        let v = supervision_loss(&mut tape, &u1, &u2, &gt).unwrap();
        assert!((tape.value(v).item() - 2.0 * 4f64.ln()).abs() < 1e-12);

        let (l1, l2) = (random_logits(SHAPE, 4), random_logits(SHAPE, 5));
        let labels: Vec<u8> = (0..32).map(|i| (i * 7 % 3) as u8).collect();
        let gt = GroundTruthMap(LabelMap::new(2, 4, 4, labels.clone()).unwrap());
        let (_, p1) = map_from(&mut tape, l1.clone());
        let (_, p2) = map_from(&mut tape, l2.clone());
        let a = supervision_loss(&mut tape, &p1, &p2, &gt).unwrap();
        let b = supervision_loss(&mut tape, &p2, &p1, &gt).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
        let t = |b: usize, i: usize| Some(labels[b * 16 + i] as usize);
        let oracle = oracle_ce(&l1, &t) + oracle_ce(&l2, &t);
        assert!((tape.value(a).item() - oracle).abs() < 1e-10);
    }

    #[test]
    fn cps_fixed_point_is_zero() {
        let mut tape = Tape::new();
        let near = [1.0 - 1e-9, 1e-9 / 3.0, 1e-9 / 3.0, 1e-9 / 3.0];
        let p1 = from_probs(&mut tape, [1, 4, 1, 1], &near);
        let p2 = from_probs(&mut tape, [1, 4, 1, 1], &near);
        let v = cps_loss(&mut tape, &p1, &p2).unwrap();
        assert!(tape.value(v).item() < 1e-8);
        let l = cps_loss_labeled(&mut tape, &p1, &p2).unwrap();
        assert!(tape.value(l).item() < 1e-8);
    }

    #[test]
    fn cps_uniform_vs_one_hot_hand_value() {
        let mut tape = Tape::new();
        let p1 = from_probs(&mut tape, [1, 4, 1, 1], &[0.25; 4]);
        // one-hot on class 2, with the documented floor on the other classes
        let p2 = from_probs(
            &mut tape,
            [1, 4, 1, 1],
            &[PROB_FLOOR, PROB_FLOOR, 1.0, PROB_FLOOR],
        );
        let v = {
            let v = cps_loss(&mut tape, &p1, &p2).unwrap();
            tape.value(v).item()
        };
        // ce(p1, y2=2) = ln 4; ce(p2, y1=0) = −ln(floor / (1 + 3·floor))
        let hand = 4f64.ln() - (PROB_FLOOR / (1.0 + 3.0 * PROB_FLOOR)).ln();
        assert!((v - hand).abs() < 1e-9, "{v} vs {hand}");
    }

    #[test]
    fn cps_matches_oracle_and_is_symmetric() {
        let (l1, l2) = (random_logits(SHAPE, 6), random_logits(SHAPE, 7));
        let mut tape = Tape::new();
        let (_, p1) = map_from(&mut tape, l1.clone());
        let (_, p2) = map_from(&mut tape, l2.clone());
        let a = {
            let v = cps_loss(&mut tape, &p1, &p2).unwrap();
            tape.value(v).item()
        };
        let b = {
            let v = cps_loss(&mut tape, &p2, &p1).unwrap();
            tape.value(v).item()
        };
        let c = {
            let v = cps_loss_labeled(&mut tape, &p1, &p2).unwrap();
            tape.value(v).item()
        };
        assert_eq!(a, b);
        assert_eq!(a, c);
        let oracle = oracle_ce(&l1, &|b, i| Some(argmax(&softmax_at(&l2, b, i))))
            + oracle_ce(&l2, &|b, i| Some(argmax(&softmax_at(&l1, b, i))));
        assert!((a - oracle).abs() < 1e-10);
    }

    #[test]
    fn cps_gradient_ignores_label_path() {
        // d cps / d logits2 must equal d ce(p2, y1) / d logits2 alone: the
        // ce(p1, y2) term contributes nothing through y2.
        let (l1, l2) = (random_logits(SHAPE, 8), random_logits(SHAPE, 9));
        let mut tape = Tape::new();
        let (x1, p1) = map_from(&mut tape, l1.clone());
        let (x2, p2) = map_from(&mut tape, l2.clone());
        let loss = cps_loss(&mut tape, &p1, &p2).unwrap();
        let g2 = tape.backward(loss).unwrap().get(x2);
        let _ = x1;

        let mut tape = Tape::new();
        let (_, q1) = map_from(&mut tape, l1);
        let (z2, q2) = map_from(&mut tape, l2);
        let y1 = pseudo_label(&tape, &q1).unwrap();
        let only = pixel_ce(&mut tape, q2.logp, &y1.0, IGNORE).unwrap();
        let g2_only = tape.backward(only.loss).unwrap().get(z2);
        assert_eq!(g2, g2_only);
    }

    #[test]
    fn cpc_cases() {
        let mut tape = Tape::new();
        let l = random_logits(SHAPE, 10);
        let (_, a) = map_from(&mut tape, l.clone());
        let (_, b) = map_from(&mut tape, l);
        assert_eq!(
            {
                let v = cpc_loss(&mut tape, &a, &b).unwrap();
                tape.value(v).item()
            },
            0.0
        );

        let p1 = from_probs(&mut tape, [1, 2, 1, 1], &[1.0, 0.0]);
        let p2 = from_probs(&mut tape, [1, 2, 1, 1], &[0.0, 1.0]);
        let v = {
            let v = cpc_loss(&mut tape, &p1, &p2).unwrap();
            tape.value(v).item()
        };
        assert!((v - 4.0).abs() < 1e-12);

        let (l1, l2) = (random_logits(SHAPE, 11), random_logits(SHAPE, 12));
        let (_, p1) = map_from(&mut tape, l1.clone());
        let (_, p2) = map_from(&mut tape, l2.clone());
        let v = {
            let v = cpc_loss(&mut tape, &p1, &p2).unwrap();
            tape.value(v).item()
        };
        let w = {
            let v = cpc_loss(&mut tape, &p2, &p1).unwrap();
            tape.value(v).item()
        };
        let mut oracle = 0.0;
        for bi in 0..2 {
            for i in 0..16 {
                let (a, b) = (softmax_at(&l1, bi, i), softmax_at(&l2, bi, i));
                let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
                oracle += 2.0 * d;
            }
        }
        oracle /= 32.0;
        assert!((v - oracle).abs() < 1e-10);
        assert!((v - w).abs() < 1e-15);
    }

    #[test]
    fn ohem_cases() {
        let l = random_logits(SHAPE, 13);
        let labels: Vec<u8> = (0..32).map(|i| (i % 3) as u8).collect();
        let gt = LabelMap::new(2, 4, 4, labels.clone()).unwrap();
        let mut tape = Tape::new();
        let (_, m) = map_from(&mut tape, l.clone());
        let all = ohem_ce(
            &mut tape,
            m.logp,
            &gt,
            OhemConfig {
                threshold: 1.0,
                min_kept: 1,
            },
        )
        .unwrap();
        let plain = pixel_ce(&mut tape, m.logp, &gt, IGNORE).unwrap();
        assert!((tape.value(all.loss).item() - tape.value(plain.loss).item()).abs() < 1e-12);

        // confident-correct everywhere: only the single hardest pixel survives
        let mut logits = vec![0.0; 2 * 3 * 16];
        for (i, &t) in labels.iter().enumerate() {
            let (b, p) = (i / 16, i % 16);
            logits[(b * 3 + t as usize) * 16 + p] = 10.0 + p as f64 * 0.01 + b as f64;
        }
        let lt = Tensor::new(&SHAPE, logits).unwrap();
        let (_, c) = map_from(&mut tape, lt.clone());
        let hard = ohem_ce(
            &mut tape,
            c.logp,
            &gt,
            OhemConfig {
                threshold: 0.7,
                min_kept: 1,
            },
        )
        .unwrap();
        assert_eq!(hard.scored, 1);
        let hardest = -softmax_at(&lt, 0, 0)[0].ln();
        assert!((tape.value(hard.loss).item() - hardest).abs() < 1e-12);

        // sort-based brute force
        for (threshold, min_kept) in [(0.5, 3), (0.3, 20), (0.9, 5)] {
            let mut probs: Vec<(f64, usize)> = (0..32)
                .map(|i| (softmax_at(&l, i / 16, i % 16)[labels[i] as usize], i))
                .collect();
            probs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let below = probs.iter().filter(|p| p.0 < threshold).count();
            let n = below.max(min_kept).min(32);
            let oracle = probs[..n].iter().map(|p| -p.0.ln()).sum::<f64>() / n as f64;
            let got = ohem_ce(
                &mut tape,
                m.logp,
                &gt,
                OhemConfig {
                    threshold,
                    min_kept,
                },
            )
            .unwrap();
            assert_eq!(got.scored, n);
            assert!((tape.value(got.loss).item() - oracle).abs() < 1e-10);
        }
        assert!(ohem_ce(
            &mut tape,
            m.logp,
            &gt,
            OhemConfig {
                threshold: 0.0,
                min_kept: 1
            }
        )
        .is_err());
        assert_eq!(OhemConfig::for_pixels(64 * 64 * 4).min_kept, 1024);
    }

    #[test]
    fn sps_cases() {
        let mut tape = Tape::new();
        let near = from_probs(&mut tape, [1, 3, 1, 1], &[1e-12, 1.0, 1e-12]);
        assert!(
            {
                let v = sps_loss(&mut tape, &near).unwrap();
                tape.value(v).item()
            } < 1e-10
        );
        let u = from_probs(&mut tape, [1, 4, 1, 1], &[0.25; 4]);
        assert!(
            ({
                let v = sps_loss(&mut tape, &u).unwrap();
                tape.value(v).item()
            } - 4f64.ln())
            .abs()
                < 1e-12
        );

        let l = random_logits(SHAPE, 14);
        let (_, m) = map_from(&mut tape, l.clone());
        let v = {
            let v = sps_loss(&mut tape, &m).unwrap();
            tape.value(v).item()
        };
        let oracle = oracle_ce(&l, &|b, i| Some(argmax(&softmax_at(&l, b, i))));
        assert!((v - oracle).abs() < 1e-10);
    }

    #[test]
    fn total_loss_cases() {
        let base = LossBreakdown {
            l_s: 1.0,
            l_cps_labeled: 0.5,
            l_cps_unlabeled: 0.5,
            ..Default::default()
        };
        assert_eq!(
            total_loss(&LossBreakdown {
                lambda: 0.0,
                ..base
            })
            .unwrap(),
            1.0
        );
        assert_eq!(
            total_loss(&LossBreakdown {
                lambda: 1.5,
                ..base
            })
            .unwrap(),
            2.5
        );
        assert_eq!(
            total_loss(&LossBreakdown {
                lambda: 6.0,
                ..base
            })
            .unwrap(),
            7.0
        );
        assert!(matches!(
            total_loss(&LossBreakdown {
                lambda: -1.0,
                ..base
            }),
            Err(Error::Config(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn losses_are_non_negative(seed in 0u64..500) {
            let (l1, l2) = (random_logits(SHAPE, seed), random_logits(SHAPE, seed + 1000));
            let mut tape = Tape::new();
            let (_, p1) = map_from(&mut tape, l1);
            let (_, p2) = map_from(&mut tape, l2);
            for v in [
                cps_loss(&mut tape, &p1, &p2).unwrap(),
                cpc_loss(&mut tape, &p1, &p2).unwrap(),
                sps_loss(&mut tape, &p1).unwrap(),
            ] {
                proptest::prop_assert!(tape.value(v).item() >= 0.0);
            }
            let s1 = { let v = cpc_loss(&mut tape, &p1, &p2).unwrap(); tape.value(v).item() };
            let s2 = { let v = cpc_loss(&mut tape, &p2, &p1).unwrap(); tape.value(v).item() };
            proptest::prop_assert!((s1 - s2).abs() < 1e-14);
        }
    }
}
