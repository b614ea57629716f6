use cpslab::augment::{mix_pseudo_batch, PixelMask, StrongParams};
use cpslab::data::{generate_toy_dataset, Ratio};
use cpslab::eval::evaluate_miou;
use cpslab::losses::{cross_supervision, pixel_ce, GroundTruthMap, LabelMap, IGNORE};
use cpslab::methods::steps::{
    cps_cutmix_objective, forward_map, predict_labels, pseudoseg_objective, split_pairs,
    step_mean_teacher, StepInput, StepOptions,
};
use cpslab::methods::{prepare_data, run_config, train, MethodKind, TrainConfig, TrainData};
use cpslab::model::{SegNet, SegNetConfig};
use cpslab::rundir::{
    load_network, parse_metrics_csv, read_checkpoint, read_run_config, write_run_dir,
};
use cpslab::tensor::{OptimizerState, Tape, Tensor};

fn tiny(method: MethodKind) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.method = method;
    cfg.epochs = 2;
    cfg.widths = vec![4, 8];
    cfg.data.n = 16;
    cfg.data.n_val = 6;
    cfg.data.height = 16;
    cfg.data.width = 16;
    cfg.data.ratio = Ratio::new(1, 4).unwrap();
    cfg.batch_labeled = 2;
    cfg.batch_unlabeled = 2;
    cfg
}

fn params_of(net: &SegNet) -> Vec<Tensor> {
    net.params().iter().map(|p| p.value.clone()).collect()
}

fn net(seed: u64) -> SegNet {
    SegNet::new(SegNetConfig {
        in_channels: 3,
        num_classes: 5,
        widths: vec![4, 8],
        depth: 2,
        seed,
    })
    .unwrap()
}

fn batch(seed: u64, n: usize) -> (Tensor, GroundTruthMap) {
    let d = generate_toy_dataset(n, 16, 16, 5, seed).unwrap();
    let imgs: Vec<&Tensor> = d.samples.iter().map(|s| &s.image).collect();
    let labels = d.samples.iter().flat_map(|s| s.labels.clone()).collect();
    (
        Tensor::stack(&imgs).unwrap(),
        GroundTruthMap(LabelMap::new(n, 16, 16, labels).unwrap()),
    )
}

#[test]
fn same_config_gives_identical_runs() {
    let cfg = tiny(MethodKind::Cps);
    let a = run_config(&cfg).unwrap();
    let b = run_config(&cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(params_of(&a.net1), params_of(&b.net1));
    assert_eq!(
        params_of(a.net2.as_ref().unwrap()),
        params_of(b.net2.as_ref().unwrap())
    );
}

#[test]
fn supervised_ignores_lambda() {
    let mut cfg = tiny(MethodKind::Supervised);
    cfg.lambda = 0.0;
    let a = run_config(&cfg).unwrap();
    cfg.lambda = 3.0;
    let b = run_config(&cfg).unwrap();
    assert_eq!(
        a.records.iter().map(|r| r.l_s).collect::<Vec<_>>(),
        b.records.iter().map(|r| r.l_s).collect::<Vec<_>>()
    );
    assert_eq!(params_of(&a.net1), params_of(&b.net1));
}

#[test]
fn checkpoint_replays_recorded_miou() {
    let cfg = tiny(MethodKind::Cps);
    let result = run_config(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run_dir(dir.path(), &result).unwrap();

    let back_cfg = read_run_config(dir.path()).unwrap();
    assert_eq!(back_cfg, cfg);
    let entries = read_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    let net1 = load_network(&entries, "net1", &back_cfg).unwrap();
    let net2 = load_network(&entries, "net2", &back_cfg).unwrap();
    assert_eq!(params_of(&net1), params_of(&result.net1));
    assert_eq!(params_of(&net2), params_of(result.net2.as_ref().unwrap()));

    let (_, val, _) = prepare_data(&back_cfg).unwrap();
    let replayed = evaluate_miou(&net1, &val).unwrap().mean;
    assert_eq!(replayed, result.final_miou());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows = parse_metrics_csv(&csv).unwrap();
    assert_eq!(rows.len(), cfg.epochs);
    assert!((rows.last().unwrap().miou - replayed).abs() < 1e-6);
}

#[test]
fn self_training_with_no_unlabeled_images() {
    for kind in [MethodKind::SelfTraining, MethodKind::CpsSelfTraining] {
        let mut cfg = tiny(kind);
        cfg.data.ratio = Ratio::new(1, 1).unwrap();
        let r = run_config(&cfg).unwrap();
        assert_eq!(r.records.len(), cfg.epochs, "{kind}");
        assert_eq!(r.stage1.len(), cfg.epochs, "{kind}");
        assert!(r.final_miou().is_finite());
    }
}

#[test]
fn semi_supervised_runs_never_touch_hidden_labels() {
    for kind in MethodKind::ALL {
        let cfg = tiny(kind);
        let (tr, val, protocol) = prepare_data(&cfg).unwrap();
        let r = train(
            &cfg,
            &TrainData {
                train: &tr,
                protocol: &protocol,
                val: &val,
            },
        )
        .unwrap();
        assert_eq!(r.unlabeled_gt_reads, 0, "{kind}");
        assert_eq!(r.secondary_eval_reads, 0, "{kind}");
    }
}

#[test]
fn mean_teacher_ema_matches_hand_unrolled_update() {
    let (labeled, gt) = batch(1, 2);
    let (unlabeled, _) = batch(2, 2);
    let mut student = net(10);
    let mut teacher = student.clone();
    let mut opt = OptimizerState::with_defaults(student.params().iter().map(|p| &p.value));
    let opts = StepOptions::default();
    let alpha = 0.9;
    let input = StepInput {
        labeled: &labeled,
        gt: &gt,
        unlabeled: Some(&unlabeled),
    };
    let flags = [false, false];

    let mut expected_teacher: Vec<Vec<f64>> = params_of(&teacher)
        .iter()
        .map(|t| t.data().to_vec())
        .collect();
    for _ in 0..3 {
        step_mean_teacher(
            &mut student,
            &mut teacher,
            &mut opt,
            &input,
            Some((&unlabeled, &flags)),
            alpha,
            &opts,
            0.01,
        )
        .unwrap();
        for (e, s) in expected_teacher.iter_mut().zip(student.params()) {
            for (ev, sv) in e.iter_mut().zip(s.value.data()) {
                *ev = alpha * *ev + (1.0 - alpha) * sv;
            }
        }
    }
    for (e, t) in expected_teacher.iter().zip(teacher.params()) {
        assert_eq!(e.as_slice(), t.value.data());
    }
    assert_ne!(params_of(&teacher), params_of(&student));
}

/// Gradient of `objective` w.r.t. every parameter of `net`.
fn grads(
    net: &SegNet,
    f: impl Fn(&mut Tape, &[cpslab::tensor::Var]) -> cpslab::tensor::Var,
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let loss = f(&mut tape, &bound);
    let g = tape.backward(loss).unwrap();
    bound.iter().map(|v| g.get(*v)).collect()
}

#[test]
fn cutmix_pseudo_maps_carry_no_gradient() {
    let (labeled, gt) = batch(3, 2);
    let (unlabeled, _) = batch(4, 4);
    let (n1, n2) = (net(1), net(2));
    let mut bits = vec![false; 256];
    for y in 4..12 {
        for x in 2..10 {
            bits[y * 16 + x] = true;
        }
    }
    let masks = vec![
        PixelMask {
            height: 16,
            width: 16,
            bits: bits.clone(),
        },
        PixelMask::zeros(16, 16),
    ];
    let opts = StepOptions {
        lambda: 1.0,
        ohem: false,
        cps_on_labeled: false,
    };
    let input = StepInput {
        labeled: &labeled,
        gt: &gt,
        unlabeled: Some(&unlabeled),
    };

    let mut tape = Tape::new();
    let obj = cps_cutmix_objective(&mut tape, &n1, &n2, &input, &masks, &opts).unwrap();
    let g = tape.backward(obj.loss).unwrap();
    let full: Vec<Vec<f64>> = obj.bound[0].iter().map(|v| g.get(*v)).collect();

    // Reference: the same loss for net1 with the mixed map of net2 built
    // outside any tape, so it is a constant by construction.
    let (a, b) = split_pairs(&unlabeled).unwrap();
    let y2 = mix_pseudo_batch(
        &predict_labels(&n2, &a).unwrap(),
        &predict_labels(&n2, &b).unwrap(),
        &masks,
    )
    .unwrap();
    let mixed = cpslab::augment::cutmix_batch(&a, &b, &masks).unwrap();
    let frozen = grads(&n1, |t, bound| {
        let p = forward_map(t, &n1, bound, &labeled).unwrap();
        let ls = pixel_ce(t, p.logp, &gt.0, IGNORE).unwrap().loss;
        let q = forward_map(t, &n1, bound, &mixed).unwrap();
        let cross = pixel_ce(t, q.logp, &y2.0, IGNORE).unwrap().loss;
        t.add(ls, cross).unwrap()
    });
    for (x, y) in full.iter().flatten().zip(frozen.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }

    // And by central differences on a few head weights: moving net1 by h
    // leaves net2's map unchanged, so the loss derivative is the analytic one.
    let head = n1.params().len() - 2;
    let loss_at = |w: &SegNet| {
        let mut t = Tape::new();
        cps_cutmix_objective(&mut t, w, &n2, &input, &masks, &opts)
            .unwrap()
            .parts
            .total
    };
    for i in [0usize, 3, 7] {
        let h = 1e-6;
        let mut plus = n1.clone();
        plus.params_mut()[head].value.data_mut()[i] += h;
        let mut minus = n1.clone();
        minus.params_mut()[head].value.data_mut()[i] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let an = full[head][i];
        assert!(
            (fd - an).abs() < 1e-6 * (1.0 + an.abs()),
            "fd {fd} analytic {an}"
        );
    }
}

#[test]
fn pseudoseg_weak_branch_is_a_constant_target() {
    let (labeled, gt) = batch(5, 2);
    let (weak, _) = batch(6, 2);
    let n = net(3);
    let strong = cpslab::methods::steps::strong_views(
        &weak,
        &StrongParams::default(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )
    .unwrap();
    let opts = StepOptions {
        lambda: 0.7,
        ..StepOptions::default()
    };
    let input = StepInput {
        labeled: &labeled,
        gt: &gt,
        unlabeled: Some(&weak),
    };
    let mut tape = Tape::new();
    let obj = pseudoseg_objective(&mut tape, &n, &input, Some(&strong), &opts).unwrap();
    let g = tape.backward(obj.loss).unwrap();
    let full: Vec<Vec<f64>> = obj.bound[0].iter().map(|v| g.get(*v)).collect();

    let y_w = predict_labels(&n, &weak).unwrap();
    let frozen = grads(&n, |t, bound| {
        let p = forward_map(t, &n, bound, &labeled).unwrap();
        let ls = pixel_ce(t, p.logp, &gt.0, IGNORE).unwrap().loss;
        let q = forward_map(t, &n, bound, &strong).unwrap();
        let u = pixel_ce(t, q.logp, &y_w.0, IGNORE).unwrap().loss;
        let u = t.scale(u, 0.7);
        t.add(ls, u).unwrap()
    });
    for (x, y) in full.iter().flatten().zip(frozen.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn cross_supervision_is_symmetric_in_net_order() {
    let (u, _) = batch(7, 2);
    let (a, b) = (net(1), net(2));
    let mut t = Tape::new();
    let ba = a.bind(&mut t);
    let bb = b.bind(&mut t);
    let pa = forward_map(&mut t, &a, &ba, &u).unwrap();
    let pb = forward_map(&mut t, &b, &bb, &u).unwrap();
    let ya = predict_labels(&a, &u).unwrap();
    let yb = predict_labels(&b, &u).unwrap();
    let ab = cross_supervision(&mut t, &pa, &yb, &pb, &ya).unwrap();
    let ba_ = cross_supervision(&mut t, &pb, &ya, &pa, &yb).unwrap();
    assert_eq!(t.value(ab).item(), t.value(ba_).item());
}
