use super::*;
use crate::diffcore::{Gradients, ParamStore, Tensor};
use crate::embedstore::EmbeddingStore;
use crate::synthetic::{generate, SyntheticData};

fn scalar_store(value: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("p", Tensor::scalar(value)).unwrap();
    s
}

fn grads(value: f64) -> Gradients<f64> {
    Gradients::from_vec(vec![Tensor::scalar(value)])
}

#[test]
fn decay_only_update() {
    let mut p = scalar_store(1.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    opt.step(&mut p, &grads(0.0)).unwrap();
    assert!((p.get(first_id(&p)).value.item() - 0.999999).abs() < 1e-15);
}

fn first_id<T: crate::diffcore::Scalar>(p: &ParamStore<T>) -> crate::diffcore::ParamId {
    p.ids().next().unwrap()
}

#[test]
fn no_decay_no_gradient_is_identity() {
    let mut p = scalar_store(0.75);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &p);
    for _ in 0..3 {
        opt.step(&mut p, &grads(0.0)).unwrap();
    }
    assert_eq!(p.get(first_id(&p)).value.item(), 0.75);
}

#[test]
fn first_step_from_zero() {
    let mut p = scalar_store(0.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    opt.step(&mut p, &grads(1.0)).unwrap();
    // m_hat = v_hat = 1, so the step is lr / (1 + eps)
    let expected = -1e-4 / (1.0 + 1e-8);
    let got = p.get(first_id(&p)).value.item();
    assert!((got - expected).abs() < 1e-18, "{got:e}");
    assert!((got - -9.9999999e-5).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_aborts_step() {
    let mut p = scalar_store(0.5);
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    let err = opt.step(&mut p, &grads(f64::NAN)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
    assert_eq!(p.get(first_id(&p)).value.item(), 0.5);
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn zero_gradients_scale_every_parameter_exactly() {
    let model = VagfemModel::<f32>::init(small_fusion(8), 3).unwrap();
    let mut params = model.params().clone();
    let before = params.clone();
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg, &params);
    opt.step(&mut params, &Gradients::zeros_like(&before)).unwrap();
    let factor = (1.0 - cfg.lr * cfg.weight_decay) as f32;
    for (a, b) in before.iter().zip(params.iter()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(x * factor, *y);
        }
    }
}

fn small_fusion(d: usize) -> FusionConfig {
    FusionConfig {
        model_dim: 16,
        heads: 2,
        head_dim: 8,
        layers: 1,
        ..FusionConfig::new(d)
    }
}

fn small_config(d: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        seed: 11,
        fusion: small_fusion(d),
        ..TrainConfig::new(d)
    }
}

fn stores(data: &SyntheticData) -> Stores<'_> {
    Stores::new(&data.images, &data.texts, &data.gallery).unwrap()
}

#[test]
fn schedule_keeps_short_last_batch() {
    let data = generate(10, 8, 1).unwrap();
    let mut cfg = small_config(8);
    cfg.batch_size = 4;
    let mut t = Trainer::new(cfg, &data.triplets, stores(&data)).unwrap();
    assert_eq!(t.steps_per_epoch(), 3);
    assert_eq!(t.total_steps(), 6);
    t.run_to_end().unwrap();
    let sizes: Vec<usize> = t.log().steps.iter().map(|s| s.batch_size).collect();
    assert_eq!(sizes, vec![4, 4, 2, 4, 4, 2]);
    let epochs: Vec<usize> = t.log().steps.iter().map(|s| s.epoch).collect();
    assert_eq!(epochs, vec![0, 0, 0, 1, 1, 1]);
}

#[test]
fn each_epoch_visits_every_record_once() {
    let data = generate(21, 8, 2).unwrap();
    let mut t = Trainer::new(small_config(8), &data.triplets, stores(&data)).unwrap();
    for epoch in 0..2u64 {
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(epoch * 3 + s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..21).collect::<Vec<_>>());
    }
    assert_ne!(t.batch_indices(0), t.batch_indices(3));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = generate(24, 8, 3).unwrap();
    let (a, log_a) = train(small_config(8), &data.triplets, stores(&data)).unwrap();
    let (b, _) = train(small_config(8), &data.triplets, stores(&data)).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(log_a.steps.len(), 6);
    let mut other = small_config(8);
    other.seed = 12;
    let (c, _) = train(other, &data.triplets, stores(&data)).unwrap();
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = generate(24, 8, 4).unwrap();
    let (full, _) = train(small_config(8), &data.triplets, stores(&data)).unwrap();
    for k in [1u64, 3, 5] {
        let mut first = Trainer::new(small_config(8), &data.triplets, stores(&data)).unwrap();
        first.run_steps(k).unwrap();
        let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes().unwrap()).unwrap();
        assert_eq!(saved.step, k);
        let mut second = Trainer::resume(saved, &data.triplets, stores(&data)).unwrap();
        second.run_to_end().unwrap();
        assert_eq!(second.log().steps.first().unwrap().step, k);
        assert_eq!(second.checkpoint().to_bytes().unwrap(), full.to_bytes().unwrap());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = generate(12, 8, 5).unwrap();
    let mut t = Trainer::new(small_config(8), &data.triplets, stores(&data)).unwrap();
    t.run_steps(1).unwrap();
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fgck");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    for (a, b) in loaded.params.iter().zip(ckpt.params.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(&std::fs::read(&path).unwrap()[..4], CHECKPOINT_MAGIC);
    assert_eq!(checkpoint_id(&path).unwrap().len(), 64);
}

#[test]
fn checkpoint_rejects_bad_version_and_magic() {
    let data = generate(6, 8, 6).unwrap();
    let t = Trainer::new(small_config(8), &data.triplets, stores(&data)).unwrap();
    let mut bytes = t.checkpoint().to_bytes().unwrap();
    bytes[4] = 2;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let good = t.checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&good[..good.len() - 3]).is_err());
}

#[test]
fn wrong_dimension_is_a_shape_mismatch() {
    let data = generate(6, 8, 7).unwrap();
    let t = Trainer::new(small_config(8), &data.triplets, stores(&data)).unwrap();
    let mut ckpt = t.checkpoint();
    ckpt.config.fusion.embed_dim = 12;
    let err = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(m) if m.contains("shape")));

    let other = generate(6, 12, 7).unwrap();
    let err = Trainer::resume(t.checkpoint(), &other.triplets, stores(&other)).err().unwrap();
    assert!(matches!(err, Error::DimMismatch { expected: 8, got: 12 }));
}

#[test]
fn cap_uses_exactly_that_many_records() {
    let data = generate(100, 8, 8).unwrap();
    let mut cfg = small_config(8);
    cfg.max_triplets = Some(10);
    let t = Trainer::new(cfg.clone(), &data.triplets, stores(&data)).unwrap();
    assert_eq!(t.records_used(), 10);
    assert_eq!(t.log().records_used, 10);
    assert_eq!(t.log().records_available, 100);
    let picked = stratified_subsample(&data.triplets, 10, &mut cfg.data_rng(SUBSAMPLE_STREAM));
    let count = |task| picked.iter().filter(|&&i| data.triplets[i].task == task).count();
    // 34/33/33 split, largest remainder gives CIR the spare slot
    assert_eq!((count(Task::Cir), count(Task::Sbir), count(Task::Cstbir)), (4, 3, 3));
    assert!(picked.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn cap_above_size_uses_everything() {
    let data = generate(9, 8, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(stratified_subsample(&data.triplets, 50, &mut rng), (0..9).collect::<Vec<_>>());
}

#[test]
fn empty_and_unresolvable_inputs() {
    let data = generate(6, 8, 9).unwrap();
    assert!(matches!(
        Trainer::new(small_config(8), &[], stores(&data)).err().unwrap(),
        Error::Empty(_)
    ));
    let mut records = data.triplets.clone();
    records[4].target_ids = vec!["nope".into()];
    let err = Trainer::new(small_config(8), &records, stores(&data)).err().unwrap();
    assert!(matches!(err, Error::UnresolvedId { index: 4, kind: "target", .. }));
}

#[test]
fn missing_empty_prompt_is_reported() {
    let data = generate(6, 8, 10).unwrap();
    let keep: Vec<usize> = (0..data.texts.len() - 1).collect();
    let texts = EmbeddingStore::new(
        data.texts.ids()[..keep.len()].to_vec(),
        data.texts.gather(&keep).into_data(),
        8,
        true,
    )
    .unwrap();
    let cir: Vec<TripletRecord> = data.triplets.iter().filter(|r| r.task != Task::Sbir).cloned().collect();
    let s = Stores::new(&data.images, &texts, &data.gallery).unwrap();
    assert!(Trainer::new(small_config(8), &cir, s).is_err());
    let mut cfg = small_config(8);
    cfg.loss.negative_source = NegativeSource::RawReference;
    assert!(Trainer::new(cfg, &cir, s).is_ok());
}

#[test]
fn epoch_means_are_step_means() {
    let data = generate(20, 8, 11).unwrap();
    let (_, log) = train(small_config(8), &data.triplets, stores(&data)).unwrap();
    let summaries = log.epoch_summaries();
    assert_eq!(summaries.len(), 2);
    for s in &summaries {
        let steps: Vec<&StepRecord> = log.steps.iter().filter(|x| x.epoch == s.epoch).collect();
        let mean = steps.iter().map(|x| x.total).sum::<f64>() / steps.len() as f64;
        assert_eq!(s.mean.total, mean);
    }
    let jsonl = log.to_jsonl();
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "config");
    assert_eq!(first["config"]["loss"]["temperature"], 0.01);
    assert_eq!(first["config"]["loss"]["margin"], 0.3);
    assert_eq!(first["config"]["loss"]["lambda"], 0.2);
    assert_eq!(jsonl.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), log.steps.len());
}

#[test]
fn config_validation() {
    let mut cfg = TrainConfig::new(8);
    assert!(cfg.validate().is_ok());
    cfg.batch_size = 0;
    assert!(cfg.validate().is_err());
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::new(8)
    };
    assert!(cfg.validate().is_err());
}
