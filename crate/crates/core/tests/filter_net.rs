use declutter::net::*;
use declutter::rng::stream;
use declutter::sequence::Sequence;
use declutter::tensor::gradcheck::DEFAULT_PERTURBATION;
use declutter::tensor::{grad_check, Graph, Mode, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = stream(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn random_seq(h: usize, w: usize, f: usize, seed: u64) -> Sequence {
    Sequence::new(h, w, f, random(&[h * w * f], seed, 0.0, 1.0).into_data()).unwrap()
}

fn tiny(levels: usize, base: usize) -> NetConfig {
    NetConfig {
        levels,
        base_channels: base,
        dropout_rate: 0.0,
        seed: 3,
        ..NetConfig::desk_scale()
    }
}

fn randomize_head(net: &mut FilterNet, seed: u64) {
    let shape = net.params.get("head.weight").unwrap().shape().to_vec();
    *net.params.get_mut("head.weight").unwrap() = random(&shape, seed, -0.5, 0.5);
}

#[test]
fn desk_parameter_count_matches_layer_sum() {
    let conv = |cin: usize, cout: usize, taps: usize| cout * cin * taps + cout;
    let bn = |c: usize| 2 * c;
    let gate = |fl: usize, fg: usize, fi: usize| fi * fl + fi * fg + fi + fi + 1;
    let layers = [
        conv(1, 8, 27) + bn(8),
        conv(8, 16, 27) + bn(16),
        conv(16, 16, 27) + bn(16),
        conv(16, 32, 27) + bn(32),
        conv(32, 32, 27) + bn(32),
        conv(32, 64, 27) + bn(64),
        gate(32, 64, 32),
        conv(96, 32, 27) + bn(32),
        conv(32, 32, 27) + bn(32),
        gate(16, 32, 16),
        conv(48, 16, 27) + bn(16),
        conv(16, 16, 27) + bn(16),
        16 + 1,
    ];
    let net = build_network(&NetConfig::desk_scale()).unwrap();
    assert_eq!(net.param_count(), layers.iter().sum::<usize>());
    assert_eq!(net.param_count(), 250_339);
}

#[test]
fn full_scale_parameter_count_in_band() {
    let n = build_network(&NetConfig::full_scale())
        .unwrap()
        .param_count();
    assert!((4_000_000..=5_500_000).contains(&n), "{n}");
}

#[test]
fn same_seed_same_weights() {
    let a = build_network(&NetConfig::desk_scale()).unwrap();
    let b = build_network(&NetConfig::desk_scale()).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    let mut c = NetConfig::desk_scale();
    c.seed = 1;
    assert_ne!(
        build_network(&c).unwrap().params.to_bytes(),
        a.params.to_bytes()
    );
}

fn gate_setup(seed: u64) -> Vec<Tensor> {
    vec![
        random(&[2, 3, 4, 4, 3], seed, -1.0, 1.0),
        random(&[2, 5, 2, 2, 3], seed + 1, -1.0, 1.0),
        random(&[3, 3, 1, 1, 1], seed + 2, -1.0, 1.0),
        random(&[3, 5, 1, 1, 1], seed + 3, -1.0, 1.0),
        random(&[3], seed + 4, -0.5, 0.5),
        random(&[1, 3, 1, 1, 1], seed + 5, -1.0, 1.0),
        random(&[1], seed + 6, -0.5, 0.5),
    ]
}

fn gate_params(v: &[declutter::tensor::Var]) -> AttentionGateParams {
    AttentionGateParams {
        w_x: v[2],
        w_g: v[3],
        b_xg: v[4],
        psi: v[5],
        b_psi: v[6],
    }
}

#[test]
fn gate_with_zero_psi_halves_input() {
    let mut t = gate_setup(10);
    t[5] = Tensor::zeros(&[1, 3, 1, 1, 1]);
    t[6] = Tensor::zeros(&[1]);
    let mut g = Graph::new();
    let v: Vec<_> = t.iter().map(|x| g.input(x.clone())).collect();
    let out = attention_gate_forward(&mut g, v[0], v[1], &gate_params(&v)).unwrap();
    assert!(g.value(out.alpha).data().iter().all(|&a| a == 0.5));
    for (o, x) in g.value(out.attended).data().iter().zip(t[0].data()) {
        assert_eq!(*o, 0.5 * x);
    }
}

#[test]
fn gate_saturates_to_identity() {
    let mut t = gate_setup(11);
    t[5] = Tensor::zeros(&[1, 3, 1, 1, 1]);
    t[6] = Tensor::scalar(20.0);
    let mut g = Graph::new();
    let v: Vec<_> = t.iter().map(|x| g.input(x.clone())).collect();
    let out = attention_gate_forward(&mut g, v[0], v[1], &gate_params(&v)).unwrap();
    let dev = g
        .value(out.attended)
        .data()
        .iter()
        .zip(t[0].data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(dev <= 1e-6);
}

#[test]
fn gate_rejects_misaligned_gating() {
    let t = gate_setup(12);
    let mut g = Graph::new();
    let v: Vec<_> = t.iter().map(|x| g.input(x.clone())).collect();
    let wrong = g.input(Tensor::zeros(&[2, 5, 4, 4, 3]));
    assert!(attention_gate_forward(&mut g, v[0], wrong, &gate_params(&v)).is_err());
}

#[test]
fn gate_gradients() {
    let t = gate_setup(13);
    let err = grad_check(
        |g, v| Ok(attention_gate_forward(g, v[0], v[1], &gate_params(v))?.attended),
        &t,
        DEFAULT_PERTURBATION,
        1,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn zero_head_with_residual_is_identity() {
    let net = build_network(&NetConfig::desk_scale()).unwrap();
    let x = random_seq(16, 16, 4, 1);
    let t = sequences_to_tensor(std::slice::from_ref(&x)).unwrap();
    let out = net.forward_tensor(&t).unwrap();
    assert_eq!(out.data(), t.data());
    assert_eq!(net.filter_sequence(&x).unwrap(), x);
}

#[test]
fn all_zero_without_residual_outputs_zero() {
    let mut cfg = NetConfig::desk_scale();
    cfg.use_residual_skip = false;
    let mut net = build_network(&cfg).unwrap();
    let names: Vec<String> = net.params.trainable_names().map(str::to_string).collect();
    for n in names {
        net.params.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let out = net.forward_filter(&[random_seq(8, 8, 3, 2)]).unwrap();
    assert!(out[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn shapes_preserved_and_divisibility_checked() {
    for temporal in [true, false] {
        let mut cfg = tiny(2, 2);
        cfg.temporal_kernels = temporal;
        let mut net = build_network(&cfg).unwrap();
        randomize_head(&mut net, 4);
        let out = net
            .forward_filter(&[random_seq(8, 12, 5, 3), random_seq(8, 12, 5, 4)])
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].dims(), (8, 12, 5));
        assert!(net.forward_filter(&[random_seq(6, 8, 5, 3)]).is_err());
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut net = build_network(&tiny(2, 4)).unwrap();
    randomize_head(&mut net, 5);
    let t = sequences_to_tensor(&[random_seq(8, 8, 4, 6)]).unwrap();
    assert_eq!(
        net.forward_tensor(&t).unwrap(),
        net.forward_tensor(&t).unwrap()
    );
}

#[test]
fn two_d_variant_is_frame_equivariant() {
    let x = random_seq(8, 8, 6, 7);
    let order = [3, 0, 5, 1, 4, 2];
    let xp = x.with_frame_order(&order).unwrap();
    let mut cfg = tiny(2, 3);
    cfg.temporal_kernels = false;
    let mut net2d = build_network(&cfg).unwrap();
    randomize_head(&mut net2d, 8);
    let a = net2d
        .forward_tensor(&sequences_to_tensor(std::slice::from_ref(&x)).unwrap())
        .unwrap();
    let b = net2d
        .forward_tensor(&sequences_to_tensor(std::slice::from_ref(&xp)).unwrap())
        .unwrap();
    let unpack = |t: &Tensor| {
        tensor_to_sequences(t, |d| Sequence::from_clamped(8, 8, 6, d))
            .unwrap()
            .remove(0)
    };
    let (sa, sb) = (unpack(&a), unpack(&b));
    let permuted = sa.with_frame_order(&order).unwrap();
    for (p, q) in permuted.data().iter().zip(sb.data()) {
        assert!((p - q).abs() <= 1e-6);
    }

    cfg.temporal_kernels = true;
    let mut net3d = build_network(&cfg).unwrap();
    randomize_head(&mut net3d, 8);
    let a = unpack(
        &net3d
            .forward_tensor(&sequences_to_tensor(&[x]).unwrap())
            .unwrap(),
    );
    let b = unpack(
        &net3d
            .forward_tensor(&sequences_to_tensor(&[xp]).unwrap())
            .unwrap(),
    );
    let permuted = a.with_frame_order(&order).unwrap();
    let diff = permuted
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f32::max);
    assert!(diff > 1e-4);
}

#[test]
fn tiny_network_gradient_check() {
    let mut net = build_network(&tiny(1, 2)).unwrap();
    randomize_head(&mut net, 9);
    let names: Vec<String> = net.params.trainable_names().map(str::to_string).collect();
    let mut inputs = vec![random(&[2, 1, 8, 8, 4], 20, 0.0, 1.0)];
    inputs.extend(names.iter().map(|n| net.params.get(n).unwrap().clone()));
    let target = random(&[2, 1, 8, 8, 4], 21, 0.0, 1.0);
    let err = grad_check(
        |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let out = net.forward_graph(g, &bound, v[0], Mode::Train, 0)?.output;
            let y = g.input(target.clone());
            loss_rec(g, out, y)
        },
        &inputs,
        DEFAULT_PERTURBATION,
        2,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn losses_are_non_negative_and_zero_on_match() {
    let mut g = Graph::new();
    let a = g.input(random(&[1, 1, 4, 4, 2], 30, 0.0, 1.0));
    let b = g.input(random(&[1, 1, 4, 4, 2], 31, 0.0, 1.0));
    let same = loss_rec(&mut g, a, a).unwrap();
    let diff = loss_rec(&mut g, a, b).unwrap();
    assert_eq!(g.scalar(same), 0.0);
    assert!(g.scalar(diff) > 0.0);
}

fn neutral_discriminator() -> Discriminator {
    let mut d = Discriminator::new(&DiscriminatorConfig::default()).unwrap();
    d.params
        .get_mut("disc.head.weight")
        .unwrap()
        .data_mut()
        .fill(0.0);
    d.params
        .get_mut("disc.head.bias")
        .unwrap()
        .data_mut()
        .fill(0.0);
    d
}

#[test]
fn discriminator_at_half_gives_two_log_two() {
    let d = neutral_discriminator();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &d.params, false).unwrap();
    let p = g.input(random(&[2, 1, 8, 8, 4], 32, 0.0, 1.0));
    let t = g.input(random(&[2, 1, 8, 8, 4], 33, 0.0, 1.0));
    let m = g.input(Tensor::filled(&[2, 1, 8, 8, 4], 1.0));
    let mut upd = BnUpdates::default();
    let adv = loss_adversarial(&mut g, p, t, m, &d, &bound, Mode::Train, &mut upd).unwrap();
    assert!((g.scalar(adv.discriminator) - 2.0 * 2f64.ln()).abs() < 1e-6);
    assert!((g.scalar(adv.generator) - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn empty_mask_blocks_generator_gradient() {
    let d = Discriminator::new(&DiscriminatorConfig::default()).unwrap();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &d.params, false).unwrap();
    let p = g.leaf(random(&[2, 1, 8, 8, 4], 34, 0.0, 1.0), true);
    let t = g.input(random(&[2, 1, 8, 8, 4], 35, 0.0, 1.0));
    let m = g.input(Tensor::zeros(&[2, 1, 8, 8, 4]));
    let mut upd = BnUpdates::default();
    let adv = loss_adversarial(&mut g, p, t, m, &d, &bound, Mode::Train, &mut upd).unwrap();
    g.backward(adv.generator).unwrap();
    assert!(g.grad(p).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
}

#[test]
fn one_discriminator_step_lowers_its_loss() {
    let mut d = Discriminator::new(&DiscriminatorConfig::default()).unwrap();
    let pred = random(&[2, 1, 8, 8, 4], 36, 0.0, 0.5);
    let target = random(&[2, 1, 8, 8, 4], 37, 0.5, 1.0);
    let mask = Tensor::filled(&[2, 1, 8, 8, 4], 1.0);
    let eval = |d: &Discriminator, train: bool| {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &d.params, train).unwrap();
        let (p, t, m) = (
            g.input(pred.clone()),
            g.input(target.clone()),
            g.input(mask.clone()),
        );
        let mut upd = BnUpdates::default();
        let adv = loss_adversarial(&mut g, p, t, m, d, &bound, Mode::Train, &mut upd).unwrap();
        let v = g.scalar(adv.discriminator);
        if train {
            g.backward(adv.discriminator).unwrap();
            (v, Some(bound.grads(&g, &d.params).unwrap()))
        } else {
            (v, None)
        }
    };
    let (before, grads) = eval(&d, true);
    let mut adam = declutter::tensor::AdamState::new();
    adam.step(&mut d.params, &grads.unwrap(), 1e-3).unwrap();
    let (after, _) = eval(&d, false);
    assert!(after < before, "{after} !< {before}");
}

fn perceptual(seed: u64) -> PerceptualNet {
    let mut cfg = tiny(2, 2);
    cfg.seed = seed;
    PerceptualNet::from_net(PerceptualNet::untrained(&cfg).unwrap()).unwrap()
}

#[test]
fn perceptual_loss_zero_on_match_and_closed_form() {
    let p = perceptual(40);
    let mut g = Graph::new();
    let bound = p.bind(&mut g).unwrap();
    let x = g.input(random(&[1, 1, 8, 8, 4], 41, 0.0, 1.0));
    let l = loss_perceptual(&mut g, x, x, &p, &bound).unwrap();
    assert_eq!(g.scalar(l), 0.0);

    let c = 0.3f32;
    let f1 = random(&[1, 4, 8, 8, 4], 42, -1.0, 1.0);
    let f1c = Tensor::new(
        f1.shape().to_vec(),
        f1.data().iter().map(|v| v + c).collect(),
    )
    .unwrap();
    let f2 = random(&[1, 8, 4, 4, 4], 43, -1.0, 1.0);
    let mut g = Graph::new();
    let (a, b, e) = (g.input(f1), g.input(f1c), g.input(f2));
    let l = perceptual_from_features(&mut g, (a, b), (e, e)).unwrap();
    assert!((g.scalar(l) - (c as f64).powi(2)).abs() < 1e-6);
}

#[test]
fn perceptual_gradient_through_frozen_net() {
    let p = perceptual(44);
    let target = random(&[1, 1, 8, 8, 4], 45, 0.0, 1.0);
    let err = grad_check(
        |g, v| {
            let bound = p.bind(g)?;
            let t = g.input(target.clone());
            loss_perceptual(g, v[0], t, &p, &bound)
        },
        &[random(&[1, 1, 8, 8, 4], 46, 0.0, 1.0)],
        DEFAULT_PERTURBATION,
        3,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn perceptual_rejects_gated_net() {
    assert!(PerceptualNet::from_net(build_network(&tiny(1, 2)).unwrap()).is_err());
}

fn identity_pairs(n: usize, seed: u64) -> Vec<TrainingPair> {
    (0..n)
        .map(|i| {
            let s = random_seq(8, 8, 4, seed + i as u64);
            TrainingPair {
                id: format!("p{i}"),
                input: s.clone(),
                target: s.clone(),
                mask: s,
            }
        })
        .collect()
}

#[test]
fn stalled_run_decays_learning_rate() {
    // Input equals target and the head starts at zero, so every gradient is
    // zero and the validation loss never improves after the first epoch.
    let mut net = build_network(&tiny(1, 2)).unwrap();
    let pairs = identity_pairs(2, 50);
    let mut cfg = TrainConfig::new(LossKind::Rec);
    cfg.epochs = 15;
    let out = train_pairs(&mut net, &pairs, &pairs, &cfg, None, |_| {}).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
    let mut want = vec![1e-4; 5];
    want.extend([1e-5; 4]);
    want.extend([1e-6; 4]);
    want.extend([1e-7; 2]);
    assert_eq!(lrs, want);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn best_epoch_is_argmin_and_weights_restored() {
    let mut net = build_network(&tiny(1, 2)).unwrap();
    let train = {
        let mut p = identity_pairs(4, 60);
        for (i, pair) in p.iter_mut().enumerate() {
            pair.input = random_seq(8, 8, 4, 70 + i as u64);
        }
        p
    };
    let mut cfg = TrainConfig::new(LossKind::Rec);
    cfg.epochs = 4;
    cfg.initial_lr = 1e-2;
    let mut seen = Vec::new();
    let out = train_pairs(&mut net, &train, &train[..2], &cfg, None, |r| {
        seen.push(r.clone())
    })
    .unwrap();
    assert_eq!(seen, out.log);
    let argmin = out
        .log
        .iter()
        .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
        .unwrap()
        .epoch;
    assert_eq!(out.best_epoch, argmin);
    // The restored weights reproduce the best validation loss.
    let mut total = 0.0;
    for p in &train[..2] {
        let y = net
            .forward_tensor(&sequences_to_tensor(std::slice::from_ref(&p.input)).unwrap())
            .unwrap();
        let t = sequences_to_tensor(std::slice::from_ref(&p.target)).unwrap();
        let se: f64 = y
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        total += se / y.len() as f64;
    }
    assert!((total / 2.0 - out.best_val_loss).abs() < 1e-9);
}

#[test]
fn training_is_deterministic_per_seed() {
    let run = || {
        let mut net = build_network(&tiny(1, 2)).unwrap();
        let mut pairs = identity_pairs(3, 80);
        pairs[0].input = random_seq(8, 8, 4, 90);
        let mut cfg = TrainConfig::new(LossKind::Rec);
        cfg.epochs = 2;
        cfg.initial_lr = 1e-3;
        let out = train_pairs(&mut net, &pairs, &pairs[..1], &cfg, None, |_| {}).unwrap();
        (out.log, net.params.to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn adversarial_and_perceptual_runs_complete() {
    let pairs = identity_pairs(2, 100);
    let mut net = build_network(&tiny(1, 2)).unwrap();
    let mut cfg = TrainConfig::new(LossKind::RecAdv);
    cfg.epochs = 1;
    cfg.discriminator.base_channels = 2;
    let out = train_pairs(&mut net, &pairs, &pairs, &cfg, None, |_| {}).unwrap();
    assert!(out.log[0].train_loss.is_finite());

    let p = perceptual(101);
    let mut cfg = TrainConfig::new(LossKind::RecPrc);
    cfg.epochs = 1;
    let mut net = build_network(&tiny(2, 2)).unwrap();
    assert!(train_pairs(&mut net, &pairs, &pairs, &cfg, None, |_| {}).is_err());
    let out = train_pairs(&mut net, &pairs, &pairs, &cfg, Some(&p), |_| {}).unwrap();
    assert!(out.log[0].val_loss.is_finite());
}

#[test]
fn config_validation() {
    let mut cfg = TrainConfig::new(LossKind::Rec);
    cfg.lambda_adv = 0.5;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::new(LossKind::RecAdv);
    cfg.lambda_rec = -1.0;
    assert!(cfg.validate().is_err());
    let mut net = build_network(&tiny(1, 2)).unwrap();
    let cfg = TrainConfig::new(LossKind::Rec);
    assert!(train_pairs(&mut net, &[], &identity_pairs(1, 0), &cfg, None, |_| {}).is_err());
    assert_eq!("rec_adv".parse::<LossKind>().unwrap(), LossKind::RecAdv);
    assert!("gan".parse::<LossKind>().is_err());
}

#[test]
fn attention_dump_shapes_and_range() {
    let mut net = build_network(&tiny(2, 2)).unwrap();
    randomize_head(&mut net, 110);
    let maps = dump_attention(&net, &random_seq(16, 8, 3, 111)).unwrap();
    assert_eq!(maps.len(), 2);
    for m in &maps {
        let s = 1usize << (m.scale - 1);
        assert_eq!(m.final_map.dims(), (16 / s, 8 / s, 3));
        assert_eq!(m.intermediate.dims(), (16 / s, 8 / s, 3));
        assert!(m.final_map.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
    let mut cfg = tiny(2, 2);
    cfg.use_attention = false;
    let plain = build_network(&cfg).unwrap();
    assert!(dump_attention(&plain, &random_seq(16, 8, 3, 111)).is_err());
}
