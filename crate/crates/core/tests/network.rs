use hmanet_core::data::{generate_dataset, NUM_CLASSES, PALETTE};
use hmanet_core::network::{build, evaluate_model, train, train_step, LossWeights, NetConfig, Sgd, TrainConfig};
use hmanet_core::params::Session;
use hmanet_core::tensor::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> NetConfig {
    NetConfig {
        gh: 2,
        gw: 2,
        alpha: 8,
        ..Default::default()
    }
}

/// Two 16×16 images whose labels are constant on 8×8 blocks, the finest
/// pattern logits at stride 8 can represent exactly.
fn block_batch(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, h) = (2, 16);
    let mut labels = vec![0; b * h * h];
    let mut img = vec![0.0; b * 3 * h * h];
    for bi in 0..b {
        for block in 0..4 {
            let k = rng.random_range(0..NUM_CLASSES);
            for y in 0..8 {
                for x in 0..8 {
                    let i = ((block / 2) * 8 + y) * h + (block % 2) * 8 + x;
                    labels[bi * h * h + i] = k;
                    for c in 0..3 {
                        img[(bi * 3 + c) * h * h + i] = PALETTE[k][c] as f64 / 255.0 + 0.05 * rng.random::<f64>();
                    }
                }
            }
        }
    }
    (Tensor::from_vec(&[b, 3, h, h], img), labels)
}

fn overfit(steps: usize) -> (f64, f64) {
    let (net, mut store) = build(small(), 3).unwrap();
    let (img, labels) = block_batch(1);
    let mut opt = Sgd::new(0.9, 5e-4);
    let w = LossWeights::default();
    let first = train_step(&net, &mut store, &mut opt, &img, &labels, 0.01, &w).unwrap().total;
    let mut last = first;
    for _ in 1..steps {
        last = train_step(&net, &mut store, &mut opt, &img, &labels, 0.01, &w).unwrap().total;
    }
    (first, last)
}

#[test]
fn overfits_one_batch() {
    let (first, last) = overfit(200);
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn fifty_steps_halve_the_loss() {
    let (first, last) = overfit(50);
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn zero_input_gives_finite_logits() {
    for train_mode in [true, false] {
        let (net, mut store) = build(small(), 0).unwrap();
        let mut s = Session::new(&mut store, train_mode);
        let x = s.tape.leaf(Tensor::zeros(&[2, 3, 32, 32], DType::F64).unwrap());
        let out = net.forward(&mut s, x).unwrap();
        assert!(s.value(out.logits).all_finite());
        assert!(s.value(out.aux_logits).all_finite());
    }
}

#[test]
fn removing_branches_keeps_shapes() {
    for (caa, cca, rsa) in [(true, true, true), (true, false, true), (false, false, true), (true, true, false), (false, false, false)] {
        let cfg = NetConfig {
            use_caa: caa,
            use_cca: cca,
            use_rsa: rsa,
            ..small()
        };
        let (net, mut store) = build(cfg, 1).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.tape.leaf(Tensor::full(&[1, 3, 32, 48], 0.3, DType::F64).unwrap());
        let out = net.forward(&mut s, x).unwrap();
        assert_eq!(s.value(out.logits).dims(), &[1, 6, 32, 48]);
        assert_eq!(s.value(out.aux_logits).dims(), &[1, 6, 32, 48]);
        assert_eq!(out.class_logits.map(|v| s.value(v).dims().to_vec()), caa.then(|| vec![1, 6, 4, 6]));
        let labels = vec![2; 32 * 48];
        let (loss, br) = net.loss(&mut s, &out, &labels, &LossWeights::default()).unwrap();
        assert!(s.value(loss).item().is_finite());
        assert_eq!(br.cls.is_some(), caa);
    }
}

#[test]
fn training_is_reproducible() {
    let scenes = generate_dataset(2, 4, 32, 32).unwrap();
    let cfg = TrainConfig {
        iterations: 6,
        batch_size: 2,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let (net, mut store) = build(small(), 5).unwrap();
        let log = train(&net, &mut store, &scenes, &cfg, |_| {}).unwrap();
        let cm = evaluate_model(&net, &mut store, &scenes, 3).unwrap();
        (log, store, cm)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
