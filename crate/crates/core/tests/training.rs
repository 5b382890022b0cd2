use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemseg::classes::LabelMask;
use stemseg::dataio::{synth_samples, SynthConfig};
use stemseg::netarch::{he_init, NetworkConfig};
use stemseg::tensor::Tensor;
use stemseg::trainer::{compute_step, predict, prepare_all, Prepared, TrainConfig, Trainer};

fn random_item(r: &mut ChaCha8Rng, size: usize) -> Prepared {
    let n = size * size;
    let stem: Vec<u8> = (0..n).map(|_| if r.gen_bool(0.1) { r.gen_range(1..3) } else { 0 }).collect();
    Prepared {
        id: "rand".into(),
        input: Tensor::from_fn([4, size, size], |_| r.gen_range(-0.5f32..0.5)),
        plant: LabelMask::new(size, size, (0..n).map(|_| r.gen_range(0..4)).collect()).unwrap(),
        stem: LabelMask::new(size, size, stem).unwrap(),
        stems: Vec::new(),
    }
}

fn synth_items(images: usize, size: usize, seed: u64, cfg: &TrainConfig) -> Vec<Prepared> {
    let synth = SynthConfig {
        images,
        width: size,
        height: size,
        seed,
        ..SynthConfig::default()
    };
    let samples: Vec<_> = synth_samples(&synth).unwrap().into_iter().map(|s| s.sample).collect();
    prepare_all(&samples, cfg).unwrap()
}

#[test]
fn small_gradient_steps_do_not_increase_the_loss() {
    let net = NetworkConfig::tiny();
    let cfg = TrainConfig::default();
    let lr = 1e-4f32;
    let mut ok = 0;
    for trial in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(trial);
        let items: Vec<Prepared> = (0..2).map(|_| random_item(&mut r, 8)).collect();
        let refs: Vec<&Prepared> = items.iter().collect();
        let mut params = he_init::<f32>(&net, trial).unwrap();
        let before = compute_step(&mut params, &net, &cfg, &refs, trial).unwrap();
        for (name, g) in &before.grads {
            let t = params.tensors.get_mut(name).unwrap();
            for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        let after = compute_step(&mut params, &net, &cfg, &refs, trial).unwrap();
        if after.loss <= before.loss {
            ok += 1;
        }
    }
    assert!(ok >= 95, "only {ok}/100 steps were non-increasing");
}

#[test]
fn tiny_network_fits_a_handful_of_images() {
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let items = synth_items(8, 64, 3, &cfg);
    let mut t = Trainer::new(NetworkConfig::tiny(), cfg).unwrap();
    t.fit(&items, &[], 1.0, None, |_| {}).unwrap();
    let first = t.log.first().unwrap().train_loss;
    let last = t.log.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let cfg = TrainConfig {
        epochs: 4,
        eval_every: 2,
        ..TrainConfig::default()
    };
    let items = synth_items(6, 64, 11, &cfg);
    let (train, val) = items.split_at(4);

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(NetworkConfig::tiny(), cfg.clone()).unwrap();
    full.fit(train, val, 1.0, Some(full_dir.path()), |_| {}).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut part = Trainer::new(
        NetworkConfig::tiny(),
        TrainConfig {
            epochs: 2,
            ..cfg.clone()
        },
    )
    .unwrap();
    part.fit(train, val, 1.0, Some(part_dir.path()), |_| {}).unwrap();
    let mut resumed = Trainer::resume(&part_dir.path().join("last.ckpt")).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.cfg.epochs = 4;
    resumed.fit(train, val, 1.0, Some(part_dir.path()), |_| {}).unwrap();

    assert_eq!(resumed.optimizer.step, full.optimizer.step);
    assert_eq!(resumed.best_score, full.best_score);
    for (name, a) in &full.params.tensors {
        let b = &resumed.params.tensors[name];
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} differs");
    }
    let losses = |t: &Trainer| t.log.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&full), losses(&resumed));
    assert_eq!(
        std::fs::read(full_dir.path().join("train_log.csv")).unwrap(),
        std::fs::read(part_dir.path().join("train_log.csv")).unwrap()
    );
}

#[test]
fn same_seed_same_epoch_and_predictions() {
    let cfg = TrainConfig::default();
    let items = synth_items(4, 64, 5, &cfg);
    let run = || {
        let mut t = Trainer::new(NetworkConfig::tiny(), cfg.clone()).unwrap();
        let loss = t.run_epoch(&items).unwrap();
        let refs: Vec<&Prepared> = items.iter().collect();
        let preds = predict(&t.params, &t.net, &refs, 2, &cfg.extract).unwrap();
        let bits: Vec<u32> = preds
            .iter()
            .flat_map(|p| p.plant.data().iter().chain(p.stem.data()).map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (loss.to_bits(), bits)
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_training_split_is_rejected() {
    let mut t = Trainer::new(NetworkConfig::tiny(), TrainConfig::default()).unwrap();
    assert!(t.run_epoch(&[]).is_err());
    assert!(t.fit(&[], &[], 1.0, None, |_| {}).is_err());
}
