use dcr_core::{
    fit_cav_exact, implicit_jacobian, surrogate_penalty, CavState, ImplicitGradContext, RepresentationBatch,
};
use dcr_datagen::{ConceptDataset, ConceptSource, LabeledImageSet, Split, PLANE};
use dcr_nets::{Architecture, Cotangents, Depth, Model, ModelConfig, NormMode, ProbeFeatureMap, ProbePoint};
use dcr_trainer::{
    adversarial_update, dcr_update, erm_update, gather, init_probe_states, train_adversarial_baseline, train_dcr,
    train_erm, Batch, ConceptSampler, EvalSet, Method, Optimizer, OptimizerKind, RunDir, RunLog, TrainConfig,
    TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 3;

/// Two 13x13 convolutions: 28 -> 16 -> 4, probe widths 512 and 48.
fn tiny_config(probes: &[usize], decoder: bool) -> ModelConfig {
    let mut cfg =
        ModelConfig::new(Architecture::Plain { kernel: 13, channels: vec![2, 3] }, CLASSES).with_probes(probes, 0.1);
    cfg.decoder_enabled = decoder;
    cfg
}

/// Class `y` brightens row band `y`; noise elsewhere.
fn labeled(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * PLANE);
    let labels: Vec<u8> = (0..n).map(|i| (i % CLASSES) as u8).collect();
    for &y in &labels {
        for p in 0..PLANE {
            let band = (p / 28) * CLASSES / 28;
            let base = if band == y as usize { 0.6 } else { 0.1 };
            images.push(base + 0.3 * rng.random::<f32>());
        }
    }
    LabeledImageSet::new(1, images, labels, CLASSES, Split::Train).unwrap()
}

/// Concept examples carry a vertical stripe pattern.
fn concept(n: usize, seed: u64) -> ConceptDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concept_labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let mut images = Vec::with_capacity(n * PLANE);
    for &c in &concept_labels {
        for p in 0..PLANE {
            let stripe = c == 1 && (p % 28) % 4 < 2;
            images.push(if stripe { 0.9 } else { 0.4 * rng.random::<f32>() });
        }
    }
    ConceptDataset {
        channels: 1,
        images,
        concept_labels,
        source: ConceptSource::Custom,
        origin: (0..n as u32).collect(),
        angle_index: Vec::new(),
        disjoint_from_eval: true,
    }
}

fn cfg(method: Method, gamma: f64) -> TrainConfig {
    TrainConfig { method, gamma, batch_size: 8, cav_steps: 2, epochs: 2, eval_batch_size: 16, ..Default::default() }
}

fn concept_batches(set: &ConceptDataset, cfg: &TrainConfig, seed: u64) -> Vec<Batch<f64>> {
    let mut s = ConceptSampler::new(set, seed).unwrap();
    (0..cfg.cav_steps).map(|_| s.next_batch(set, cfg.batch_size).unwrap()).collect()
}

fn train_batch(set: &LabeledImageSet, n: usize) -> Batch<f64> {
    let idx: Vec<usize> = (0..n).collect();
    dcr_trainer::labeled_batch(set, &idx).unwrap()
}

#[test]
fn zero_gamma_dcr_step_is_bitwise_erm() {
    let train = labeled(16, 1);
    let cset = concept(32, 2);
    for decoder in [false, true] {
        let c = cfg(Method::Dcr, 0.0);
        let mut a = Model::<f64>::new(tiny_config(&[1, 2], decoder), 3).unwrap();
        let mut b = a.clone();
        let mut oa = Optimizer::new(c.optimizer, c.lr, a.num_params());
        let mut ob = oa.clone();
        let mut states = init_probe_states(&a, &c).unwrap();
        let batch = train_batch(&train, 8);
        for _ in 0..3 {
            let ma = dcr_update(&mut a, &mut oa, &batch, &concept_batches(&cset, &c, 5), &c, &mut states).unwrap();
            let mb = erm_update(&mut b, &mut ob, &batch, &c).unwrap();
            assert_eq!(ma.downstream, mb.downstream);
            assert_eq!(ma.adversarial, 0.0);
        }
        assert_eq!(a.params(), b.params());
        assert_eq!(a.running_stats(), b.running_stats());
    }
}

#[test]
fn zero_cav_gives_no_adversarial_gradient() {
    let model = Model::<f64>::new(tiny_config(&[1, 2], false), 4).unwrap();
    let c = cfg(Method::Dcr, 1.0);
    let batch = &concept_batches(&concept(16, 6), &c, 7)[0];
    let trace = model.forward(&batch.x, NormMode::Batch, Depth::Layer(2)).unwrap();
    let mut cot = Cotangents::default();
    for probe in &model.config().probe_points {
        let h = model.probe_activations(&trace, probe).unwrap();
        let state = CavState::zeros(h.cols(), 0.1).unwrap();
        let ctx = ImplicitGradContext::new(h.clone(), &state).unwrap();
        let pen = surrogate_penalty(&h, &batch.labels, &ctx).unwrap();
        assert_eq!(pen.value, 0.0);
        assert!(pen.grad.as_slice().iter().all(|&g| g == 0.0));
        cot.units.push((probe.layer, model.probe_cotangent(probe, &pen.grad).unwrap()));
    }
    let mut grads = vec![0.0; model.num_params()];
    model.backward(&trace, &cot, &mut grads).unwrap();
    assert!(grads.iter().all(|&g| g == 0.0));
}

#[test]
fn surrogate_step_gradient_matches_implicit_jacobian() {
    let model = Model::<f64>::new(tiny_config(&[2], false), 8).unwrap();
    let c = TrainConfig {
        cav_steps: 1,
        batch_size: 16,
        lr: 1.0,
        optimizer: OptimizerKind::Sgd { momentum: 0.0 },
        ..cfg(Method::Dcr, 1.0)
    };
    let cset = concept(64, 9);
    let concept_batch = concept_batches(&cset, &c, 10);
    let inputs = concept_batch[0].x.to_matrix();
    let labels = concept_batch[0].labels.clone();
    let probe = model.config().probe_points[0].clone();
    let fmap = ProbeFeatureMap { model: &model, probe: probe.clone() };
    let (jac, v_star) = implicit_jacobian(&fmap, model.params(), &inputs, &labels, 0.1, 1e-13).unwrap();
    let oracle = jac.t_matvec(v_star.v()).iter().map(|g| 2.0 * g).collect::<Vec<_>>();

    // warm start at the exact CAV; Step 1 then leaves an SGD approximation of it
    let mut states = init_probe_states(&model, &c).unwrap();
    states[0].v0 = v_star.clone();
    let train = train_batch(&labeled(16, 11), 8);
    let (mut a, mut b) = (model.clone(), model.clone());
    let mut oa = Optimizer::new(c.optimizer, c.lr, a.num_params());
    let mut ob = oa.clone();
    let m = dcr_update(&mut a, &mut oa, &train, &concept_batch, &c, &mut states).unwrap();
    erm_update(&mut b, &mut ob, &train, &c).unwrap();
    assert!(m.probes[0].surrogate.is_finite());
    let got: Vec<f64> = b.params().iter().zip(a.params()).map(|(pb, pa)| pb - pa).collect();

    let diff: f64 = got.iter().zip(&oracle).map(|(g, o)| (g - o).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = oracle.iter().map(|o| o * o).sum::<f64>().sqrt();
    assert!(norm > 1e-8, "degenerate instance");
    assert!(diff <= 1e-3 * norm, "relative error {}", diff / norm);
    // the head sits above every probe and gets nothing from the penalty
    let head = model.layout().iter().filter(|e| e.name.starts_with("head")).collect::<Vec<_>>();
    assert!(!head.is_empty());
    for e in head {
        assert_eq!(&a.params()[e.offset..e.offset + e.len], &b.params()[e.offset..e.offset + e.len]);
    }
}

#[test]
fn total_loss_is_the_exact_sum_of_components() {
    let train = labeled(16, 12);
    let cset = concept(32, 13);
    let c = TrainConfig { gamma: 0.7, recon_scale: 2.5, ..cfg(Method::Dcr, 0.7) };
    let mut model = Model::<f64>::new(tiny_config(&[1, 2], true), 14).unwrap();
    let mut opt = Optimizer::new(c.optimizer, c.lr, model.num_params());
    let mut states = init_probe_states(&model, &c).unwrap();
    for step in 0..3 {
        let m = dcr_update(
            &mut model,
            &mut opt,
            &train_batch(&train, 8),
            &concept_batches(&cset, &c, step),
            &c,
            &mut states,
        )
        .unwrap();
        assert_eq!(m.total, m.downstream + m.adversarial + m.reconstruction);
        let adv = m.probes.iter().fold(0.0, |acc, p| acc + 0.7 * p.surrogate);
        assert_eq!(m.adversarial, adv);
        assert!(m.reconstruction > 0.0);
        assert_eq!(m.probes.len(), 2);
    }
}

#[test]
fn underfull_buffer_and_missing_batches_are_state_errors() {
    let c = cfg(Method::Dcr, 1.0);
    let mut model = Model::<f64>::new(tiny_config(&[2], false), 15).unwrap();
    let mut opt = Optimizer::new(c.optimizer, c.lr, model.num_params());
    let mut states = init_probe_states(&model, &c).unwrap();
    let cset = concept(32, 16);
    let train = train_batch(&labeled(8, 17), 8);
    let mut batches = concept_batches(&cset, &c, 18);
    batches.pop();
    let err = dcr_update(&mut model, &mut opt, &train, &batches, &c, &mut states).unwrap_err();
    assert!(matches!(err, TrainError::State(_)), "{err}");

    let short: Vec<Batch<f64>> = concept_batches(&cset, &TrainConfig { batch_size: 4, ..c.clone() }, 18);
    let err = dcr_update(&mut model, &mut opt, &train, &short, &c, &mut states).unwrap_err();
    assert!(matches!(err, TrainError::State(_)), "{err}");
}

#[test]
fn adversarial_baseline_requires_annotations_and_reduces_to_erm() {
    let train = labeled(24, 19);
    let model = Model::<f64>::new(tiny_config(&[], false), 20).unwrap();
    let c = cfg(Method::Adversarial, 0.0);
    let err = train_adversarial_baseline(model.clone(), &train, None, &[], &c, None).unwrap_err();
    assert!(matches!(err, TrainError::InvalidInput(_)));
    let err = train_adversarial_baseline(model.clone(), &train, Some(&[0, 1]), &[], &c, None).unwrap_err();
    assert!(matches!(err, TrainError::InvalidInput(_)));

    let batch = train_batch(&train, 8);
    let ann = [0, 1, 1, 0, 1, 0, 0, 1];
    let (mut a, mut b) = (model.clone(), model);
    let mut oa = Optimizer::new(c.optimizer, c.lr, a.num_params());
    let mut ob = oa.clone();
    let mut adv = dcr_trainer::LinearAdversary::zeros(a.representation_dim());
    for _ in 0..3 {
        let m = adversarial_update(&mut a, &mut oa, &batch, &ann, &c, &mut adv).unwrap();
        erm_update(&mut b, &mut ob, &batch, &c).unwrap();
        assert_eq!(m.adversarial, 0.0);
        assert!(m.adversary_bce.unwrap().is_finite());
    }
    assert_eq!(a.params(), b.params());
}

#[test]
fn adversarial_term_pushes_adversary_loss_up() {
    let train = labeled(48, 21);
    let ann: Vec<u8> = train.labels.iter().map(|&y| u8::from(y == 0)).collect();
    let model = Model::<f64>::new(tiny_config(&[], false), 22).unwrap();
    let c = TrainConfig { epochs: 1, gamma: 1.0, ..cfg(Method::Adversarial, 1.0) };
    let out = train_adversarial_baseline(model, &train, Some(&ann), &[], &c, None).unwrap();
    let last = out.log.last().unwrap();
    assert_eq!(last.losses.adversarial, -last.adversary_bce.unwrap());
    assert_eq!(out.log.label, "adversarial");
}

#[test]
fn run_directory_is_deterministic_and_labels_gamma_zero_as_erm() {
    let train = labeled(24, 23);
    let test = labeled(12, 24);
    let cset = concept(32, 25);
    let evals = [EvalSet { name: "test", set: &test }];
    let run = |gamma: f64, dir: &std::path::Path| {
        let model = Model::<f64>::new(tiny_config(&[1, 2], false), 26).unwrap();
        let rd = RunDir::create(dir, false).unwrap();
        rd.write_json("config.json", &serde_json::json!({})).unwrap();
        let out = train_dcr(model, &train, &cset, &evals, &cfg(Method::Dcr, gamma), Some(&rd)).unwrap();
        (out, std::fs::read(dir.join("metrics.jsonl")).unwrap())
    };
    let tmp = tempfile::tempdir().unwrap();
    let (a, ma) = run(1.0, &tmp.path().join("a"));
    let (b, mb) = run(1.0, &tmp.path().join("b"));
    assert_eq!(ma, mb);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log.epochs.len(), 2);
    assert!(a.log.epochs[0].probes.iter().all(|p| p.cav_norm_sq > 0.0));
    assert!(tmp.path().join("a/checkpoints/last.ckpt").is_file());

    let reloaded = RunLog::load(&tmp.path().join("a")).unwrap();
    assert_eq!(reloaded.epochs, a.log.epochs);
    assert_eq!(reloaded.label, "dcr");
    assert_eq!(reloaded.series("test").unwrap().len(), 2);

    let (z, _) = run(0.0, &tmp.path().join("z"));
    assert_eq!(z.log.label, "erm");
    assert_eq!(z.log.method, "dcr");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("z/final_report.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "erm");
    assert_eq!(report["status"], "completed");

    assert!(RunDir::create(&tmp.path().join("a"), false).is_err());
    assert!(RunDir::create(&tmp.path().join("a"), true).is_ok());
}

#[test]
fn erm_learns_the_toy_task() {
    let train = labeled(96, 27);
    let test = labeled(30, 28);
    let model = Model::<f32>::new(tiny_config(&[], false), 29).unwrap();
    let c = TrainConfig { epochs: 4, lr: 1e-2, ..cfg(Method::Erm, 1.0) };
    let out = train_erm(model, &train, &[EvalSet { name: "test", set: &test }], &c, None).unwrap();
    let acc = out.log.last().unwrap().eval_accuracy["test"];
    assert!(acc >= 0.9, "test accuracy {acc}");
}

#[test]
fn divergence_is_reported_with_its_position() {
    let train = labeled(24, 30);
    let model = Model::<f32>::new(tiny_config(&[], false), 31).unwrap();
    let c = TrainConfig { lr: 1e30, optimizer: OptimizerKind::Sgd { momentum: 0.0 }, ..cfg(Method::Erm, 0.0) };
    let tmp = tempfile::tempdir().unwrap();
    let rd = RunDir::create(tmp.path(), false).unwrap();
    let err = train_erm(model, &train, &[], &c, Some(&rd)).unwrap_err();
    let TrainError::Divergence { epoch, step, .. } = err else { panic!("{err}") };
    assert!(epoch >= 1 && step >= 1);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("final_report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "diverged");
    assert!(tmp.path().join("checkpoints/last.ckpt").is_file());
}

#[test]
fn probes_without_batchnorm_are_rejected() {
    let mut mc = tiny_config(&[1], false);
    mc.probe_points = vec![ProbePoint { has_batchnorm: false, ..ProbePoint::new(1, 0.1) }];
    assert!(Model::<f64>::new(mc, 32).is_err());

    let mut mc = tiny_config(&[1, 2], false);
    mc.bn_affine = false;
    let model = Model::<f64>::new(mc, 35).unwrap();
    let batch: Batch<f64> = Batch {
        x: gather(&concept(8, 36).images, [1, 28, 28], &(0..8).collect::<Vec<_>>()).unwrap(),
        labels: vec![0; 8],
    };
    dcr_trainer::check_probe_batchnorm(&model, &batch).unwrap();
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::default().buffer_rows(), 320);
    for bad in [
        TrainConfig { gamma: -1.0, ..Default::default() },
        TrainConfig { batch_size: 1, ..Default::default() },
        TrainConfig { cav_steps: 0, ..Default::default() },
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { probe_lambdas: vec![0.1, -0.1], ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"gamma": 0.5, "optimizer": {"kind": "sgd"}}"#).unwrap();
    assert_eq!(parsed.optimizer, OptimizerKind::Sgd { momentum: 0.9 });
    assert!(serde_json::from_str::<TrainConfig>(r#"{"gama": 0.5}"#).is_err());
}

#[test]
fn fitted_state_on_concept_batch_is_a_stationary_point() {
    // sanity for the oracle: exact CAV on a probe batch of the tiny model has small BCE gradient
    let model = Model::<f64>::new(tiny_config(&[2], false), 37).unwrap();
    let c = cfg(Method::Dcr, 1.0);
    let b = &concept_batches(&concept(32, 38), &c, 39)[0];
    let trace = model.forward(&b.x, NormMode::Batch, Depth::Layer(2)).unwrap();
    let h = model.probe_activations(&trace, &model.config().probe_points[0]).unwrap();
    let rb = RepresentationBatch::new(h, b.labels.clone()).unwrap();
    let v = fit_cav_exact(&rb, 0.1, 1e-12).unwrap();
    let g = dcr_core::cav_gradient(&rb, v.v(), 0.1).unwrap();
    assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-10);
}
