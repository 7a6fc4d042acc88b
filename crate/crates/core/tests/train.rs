use mposhare::init::{init_from_donor, xavier_init, DonorCheckpoint, Extension};
use mposhare::mlm::FIRST_REGULAR_ID;
use mposhare::model::{Grads, ModelConfig, ToyTransformer};
use mposhare::persist::{load_donor, save_donor};
use mposhare::tensor::DenseTensor;
use mposhare::train::{
    clip_gradients, donor_config, make_toy_corpus, sample_batch, train, train_donor, TrainConfig,
};
use mposhare::Error;

fn small() -> ModelConfig {
    let mut c = ModelConfig::toy(2, 8, 2, 11, 8);
    c.mpo_order = 3;
    c.adapter_rank = 2;
    c
}

fn quick(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        seq_len: 4,
        lr,
        seed: 3,
        clip: Some(1.0),
    }
}

#[test]
fn bigram_statistics_match_generator() {
    let corpus = make_toy_corpus(5, 1000, 1001, 12).unwrap();
    let v = corpus.vocab_size;
    let mut joint = vec![vec![0.0; v]; v];
    let mut from = vec![0.0; v];
    let mut total = 0.0;
    for s in &corpus.sequences {
        for w in s.windows(2) {
            joint[w[0]][w[1]] += 1.0;
            from[w[0]] += 1.0;
            total += 1.0;
        }
    }
    assert!(total >= 1e6);
    // TV between empirical bigrams and (empirical predecessor) × (true transition)
    let mut tv = 0.0;
    for a in 0..v {
        for b in 0..v {
            tv += (joint[a][b] / total - from[a] / total * corpus.transitions[a][b]).abs();
        }
    }
    tv *= 0.5;
    assert!(tv < 0.05, "{tv}");
    assert!(corpus.sequences.iter().flatten().all(|&t| t >= FIRST_REGULAR_ID));
}

#[test]
fn zero_rate_leaves_the_model_and_each_step_loss_unchanged() {
    use rand::SeedableRng;
    let corpus = make_toy_corpus(1, 16, 8, 11).unwrap();
    let mut model = xavier_init(small(), 1).unwrap();
    let before = model.clone();
    let cfg = quick(5, 0.0);
    let curve = train(&mut model, &corpus, &cfg).unwrap();
    let mut values = Vec::new();
    before.visit(&mut |n, t| values.push((n.to_string(), t.clone())));
    for (name, t) in values {
        assert_eq!(model.param(&name).unwrap(), t, "{name}");
    }
    // replay the batch stream against the frozen model
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    for &loss in &curve.losses {
        let batch = sample_batch(&corpus, cfg.batch_size, cfg.seq_len, &mut rng).unwrap();
        assert_eq!(before.loss_and_grads(&batch).unwrap().0, loss);
    }
}

#[test]
fn training_is_deterministic_and_moves_centrals() {
    let corpus = make_toy_corpus(2, 32, 8, 11).unwrap();
    let mut c = small();
    c.layers = 4;
    c.num_groups = 2;
    let mut a = xavier_init(c.clone(), 4).unwrap();
    let mut b = xavier_init(c, 4).unwrap();
    let start = a.store.clone();
    let ca = train(&mut a, &corpus, &quick(6, 0.1)).unwrap();
    let cb = train(&mut b, &corpus, &quick(6, 0.1)).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a, b);
    for ((k, before), (_, after)) in start.iter().zip(a.store.iter()) {
        assert_ne!(before, after, "central {k:?} did not move");
    }
    // layers of one group still resolve to the same central
    for layer in [0, 1] {
        let q = a.layers[layer].linear(mposhare::shared::Role::Query);
        assert_eq!(q.group(), 0);
    }
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = Grads::default();
    g.add("a".into(), DenseTensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
    g.add("b".into(), DenseTensor::new(vec![1], vec![12.0]).unwrap()).unwrap();
    assert_eq!(clip_gradients(&mut g, 2.0), 13.0);
    assert!((g.global_norm() - 2.0).abs() < 1e-12);
    assert_eq!(clip_gradients(&mut g, 5.0), g.global_norm());
    assert!((g.global_norm() - 2.0).abs() < 1e-12);
}

#[test]
fn non_finite_loss_aborts() {
    let corpus = make_toy_corpus(1, 8, 8, 11).unwrap();
    let mut model = xavier_init(small(), 1).unwrap();
    model.out_bias.data_mut()[3] = f64::NAN;
    assert!(matches!(
        train(&mut model, &corpus, &quick(3, 0.1)),
        Err(Error::NonFiniteLoss { step: 0, .. })
    ));
}

#[test]
fn donor_round_trip_and_reproduction() {
    let corpus = make_toy_corpus(3, 32, 8, 11).unwrap();
    let target = small();
    let (donor, curve) = train_donor(donor_config(&target, 2), &corpus, &quick(10, 0.1), 5).unwrap();
    assert_eq!(curve.losses.len(), 10);
    assert_eq!(donor.donor_depth(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("donor");
    save_donor(&donor, &path).unwrap();
    let back: DonorCheckpoint = load_donor(&path).unwrap();
    assert_eq!(back, donor);

    let model: ToyTransformer = init_from_donor(&donor, target, Extension::ScaledDonor, 0).unwrap();
    let toks = vec![vec![2, 4, 6, 8], vec![10, 9, 3, 2]];
    let a = model.logits(&toks).unwrap();
    let b = donor.to_model(2).unwrap().logits(&toks).unwrap();
    assert!(a.sub(&b).unwrap().max_abs() < 1e-8);
}

#[test]
fn donor_must_share_every_layer() {
    let corpus = make_toy_corpus(3, 8, 8, 11).unwrap();
    assert!(matches!(
        train_donor(small(), &corpus, &quick(1, 0.1), 0),
        Err(Error::InvalidConfig(_))
    ));
}
