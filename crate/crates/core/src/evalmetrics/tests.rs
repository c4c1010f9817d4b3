use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embedstore::EmbeddingStore;
use crate::synthetic::generate;
use crate::vagfem::FusionConfig;

fn rel(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

fn ranking(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("g{i}")).collect()
}

#[test]
fn average_precision_examples() {
    let r = ranking(20);
    assert_eq!(average_precision_at_k(&r, &rel(&["g0"]), 10).unwrap(), 1.0);
    assert_eq!(average_precision_at_k(&r, &rel(&["g1"]), 10).unwrap(), 0.5);
    assert_eq!(average_precision_at_k(&r, &rel(&["g15"]), 10).unwrap(), 0.0);
    assert!(matches!(average_precision_at_k(&r, &rel(&[]), 10), Err(Error::Empty(_))));
}

#[test]
fn recall_precision_rank1_examples() {
    let r = ranking(20);
    assert_eq!(recall_at_k(&r, &rel(&["g9"]), 10).unwrap(), 1.0);
    assert_eq!(recall_at_k(&r, &rel(&["g10"]), 10).unwrap(), 0.0);
    assert_eq!(precision_at_k(&r, &rel(&["g2", "g5"]), 10).unwrap(), 0.2);
    assert_eq!(precision_at_k(&r, &rel(&["g0", "g1"]), 2).unwrap(), 1.0);
    assert_eq!(precision_at_k(&r, &rel(&["g19"]), 10).unwrap(), 0.0);
    assert_eq!(rank1(&r, &rel(&["g0"])).unwrap(), 1.0);
    assert_eq!(rank1(&r, &rel(&["g1"])).unwrap(), 0.0);
    assert_eq!(rank1(&r, &rel(&["g1", "g2"])).unwrap(), 0.0);
    assert!(rank1::<String>(&[], &rel(&["g0"])).is_err());
}

#[test]
fn dataset_recall_is_query_mean() {
    let hit = QueryMetrics::compute(&ranking(20), &rel(&["g0"]), 20).unwrap();
    let miss = QueryMetrics::compute(&ranking(20), &rel(&["g19"]), 20).unwrap();
    let m = TaskMetrics::mean(&[hit, miss]).unwrap();
    assert_eq!(m.recall_at_10, 0.5);
    assert_eq!(m.queries, 2);
}

/// Precision at each relevant position, recounted from scratch.
fn oracle_ap(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let top = &ranked[..k.min(ranked.len())];
    let mut total = 0.0;
    for (pos, id) in top.iter().enumerate() {
        if relevant.contains(id) {
            let upto = top[..=pos].iter().filter(|x| relevant.contains(*x)).count();
            total += upto as f64 / (pos + 1) as f64;
        }
    }
    total / std::cmp::min(k, relevant.len()) as f64
}

fn oracle_recall(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let found = relevant.iter().any(|r| ranked.iter().position(|x| x == r).is_some_and(|p| p < k));
    f64::from(u8::from(found))
}

fn oracle_precision(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let mut hits = 0.0;
    for r in relevant {
        if ranked.iter().take(k).any(|x| x == r) {
            hits += 1.0;
        }
    }
    hits / k as f64
}

#[test]
fn metrics_match_brute_force_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let g = rng.random_range(1..=50);
        let mut r = ranking(g);
        r.shuffle(&mut rng);
        let n_rel = rng.random_range(1..=5);
        // relevant ids may fall outside the ranking
        let relevant: BTreeSet<String> = (0..n_rel).map(|_| format!("g{}", rng.random_range(0..g + 3))).collect();
        let k = rng.random_range(1..=20);
        assert!((average_precision_at_k(&r, &relevant, k).unwrap() - oracle_ap(&r, &relevant, k)).abs() <= 1e-12);
        assert_eq!(recall_at_k(&r, &relevant, k).unwrap(), oracle_recall(&r, &relevant, k));
        assert!((precision_at_k(&r, &relevant, k).unwrap() - oracle_precision(&r, &relevant, k)).abs() <= 1e-12);
        assert_eq!(rank1(&r, &relevant).unwrap(), f64::from(u8::from(relevant.contains(&r[0]))));
    }
}

#[test]
fn metrics_monotone_in_k_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut r = ranking(40);
        r.shuffle(&mut rng);
        let relevant: BTreeSet<String> = (0..3).map(|_| format!("g{}", rng.random_range(0..40))).collect();
        let mut last_ap = 0.0;
        let mut last_r = 0.0;
        for k in 1..=40 {
            let ap = average_precision_at_k(&r, &relevant, k).unwrap();
            let rc = recall_at_k(&r, &relevant, k).unwrap();
            assert!((0.0..=1.0).contains(&ap));
            // the min(K, R) normalizer is constant once K reaches R
            if k > relevant.len() {
                assert!(ap + 1e-15 >= last_ap);
            }
            assert!(rc >= last_r);
            last_ap = ap;
            last_r = rc;
        }
    }
}

#[test]
fn truncated_ap_can_drop_while_k_is_below_r() {
    let r = ranking(5);
    let relevant = rel(&["g0", "g3", "g4"]);
    assert_eq!(average_precision_at_k(&r, &relevant, 1).unwrap(), 1.0);
    assert_eq!(average_precision_at_k(&r, &relevant, 2).unwrap(), 0.5);
}

#[test]
fn relabeling_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut r = ranking(30);
    r.shuffle(&mut rng);
    let relevant = rel(&["g3", "g7"]);
    let rename = |s: &String| format!("x_{}", s.trim_start_matches('g').parse::<usize>().unwrap() * 7 + 1);
    let r2: Vec<String> = r.iter().map(rename).collect();
    let rel2: BTreeSet<String> = relevant.iter().map(rename).collect();
    assert_eq!(
        QueryMetrics::compute(&r, &relevant, 30).unwrap(),
        QueryMetrics::compute(&r2, &rel2, 30).unwrap()
    );
}

#[test]
fn absent_tasks_and_macro() {
    let m = QueryMetrics::compute(&ranking(10), &rel(&["g1"]), 10).unwrap();
    let (per, avg) = aggregate(&[Task::Cir, Task::Cir], &[m.clone(), m.clone()]);
    assert!(per.sbir.is_none() && per.cstbir.is_none());
    assert_eq!(avg, Some(per.cir.as_ref().unwrap().map_at_100));
    let json = serde_json::to_value(&per).unwrap();
    assert!(json.get("SBIR").is_none());

    let perfect = QueryMetrics::compute(&ranking(10), &rel(&["g0"]), 10).unwrap();
    let (_, avg) = aggregate(&[Task::Cir, Task::Sbir], &[m, perfect]);
    assert_eq!(avg, Some((0.5 + 1.0) / 2.0));
}

fn small_model(d: usize) -> VagfemModel<f32> {
    let cfg = FusionConfig {
        model_dim: 16,
        heads: 2,
        head_dim: 8,
        layers: 1,
        ..FusionConfig::new(d)
    };
    VagfemModel::init(cfg, 1).unwrap()
}

#[test]
fn oracle_embeddings_score_perfectly() {
    let data = generate(30, 16, 2).unwrap();
    let stores = Stores::new(&data.images, &data.texts, &data.gallery).unwrap();
    let rows: Vec<usize> = data
        .triplets
        .iter()
        .map(|r| data.gallery.index_of(&r.target_ids[0]).unwrap())
        .collect();
    let emb = data.gallery.gather(&rows);
    let ev = evaluate_embeddings(&data.triplets, &emb, &stores, &EvalConfig::default()).unwrap();
    for task in Task::ALL {
        let m = ev.report.tasks.get(task).unwrap();
        for (name, v) in m.columns() {
            if !name.starts_with("P@") {
                assert_eq!(v, 1.0, "{name}");
            }
        }
        assert!((m.precision_at_10 - 0.1).abs() < 1e-12);
    }
    assert_eq!(ev.report.macro_map_at_100, Some(1.0));
    assert_eq!(ev.report.metadata.gallery_size, 120);
}

#[test]
fn self_exclusion_flags_unreachable_queries() {
    let ids = vec!["a".to_string(), "b".to_string()];
    let gallery = EmbeddingStore::new(ids.clone(), vec![1.0, 0.0, 0.0, 1.0], 2, true).unwrap();
    let texts = EmbeddingStore::new(vec![crate::embedstore::EMPTY_TEXT_ID.into()], vec![0.0, 1.0], 2, true).unwrap();
    let records = vec![
        TripletRecord {
            task: Task::Sbir,
            ref_id: "a".into(),
            text: None,
            text_id: None,
            target_ids: vec!["a".into()],
        },
        TripletRecord {
            task: Task::Sbir,
            ref_id: "a".into(),
            text: None,
            text_id: None,
            target_ids: vec!["b".into()],
        },
    ];
    let stores = Stores::new(&gallery, &texts, &gallery).unwrap();
    let emb = Tensor::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
    let ev = evaluate_embeddings(&records, &emb, &stores, &EvalConfig::default()).unwrap();
    assert_eq!(ev.report.metadata.fully_excluded_queries, 1);
    assert_eq!(ev.per_query[0].map_all, 0.0);
    assert_eq!(ev.per_query[1].rank1, 1.0);
    assert!(ev.rankings[1].ids().all(|id| id != "a"));

    let no_excl = EvalConfig {
        self_exclusion: false,
        ..EvalConfig::default()
    };
    let ev = evaluate_embeddings(&records, &emb, &stores, &no_excl).unwrap();
    assert_eq!(ev.report.metadata.fully_excluded_queries, 0);
    assert_eq!(ev.per_query[0].rank1, 1.0);
}

#[test]
fn evaluation_independent_of_batch_size_and_shards() {
    let data = generate(40, 16, 3).unwrap();
    let stores = Stores::new(&data.images, &data.texts, &data.gallery).unwrap();
    let model = small_model(16);
    let base = evaluate(&data.triplets, &model, &stores, &EvalConfig::default()).unwrap();
    for (batch_size, shards) in [(1, 1), (7, 3), (40, 8)] {
        let cfg = EvalConfig {
            batch_size,
            shards,
            ..EvalConfig::default()
        };
        let ev = evaluate(&data.triplets, &model, &stores, &cfg).unwrap();
        assert_eq!(ev.report.tasks, base.report.tasks);
        assert_eq!(ev.rankings, base.rankings);
    }
}

#[test]
fn zero_ratio_matches_baseline_report() {
    let data = generate(30, 16, 4).unwrap();
    let stores = Stores::new(&data.images, &data.texts, &data.gallery).unwrap();
    let model = small_model(16);
    let baseline = EvalConfig {
        mode: Mode::Baseline,
        ..EvalConfig::default()
    };
    let zero = EvalConfig {
        mask_ratio: Some(0.0),
        ..EvalConfig::default()
    };
    let a = evaluate(&data.triplets, &model, &stores, &baseline).unwrap();
    let b = evaluate(&data.triplets, &model, &stores, &zero).unwrap();
    assert_eq!(a.report.tasks, b.report.tasks);
    assert_eq!(a.report.macro_map_at_100, b.report.macro_map_at_100);
    assert_eq!(a.rankings, b.rankings);
}

#[test]
fn report_serializes_in_table_schema() {
    let data = generate(9, 8, 5).unwrap();
    let stores = Stores::new(&data.images, &data.texts, &data.gallery).unwrap();
    let ev = evaluate(&data.triplets, &small_model(8), &stores, &EvalConfig::default()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&ev.report.to_json()).unwrap();
    assert!(json["tasks"]["CIR"]["mAP@100"].is_number());
    assert!(json["mAP@100 Average"].is_number());
    assert_eq!(json["metadata"]["map_definition"], MAP_DEFINITION);
    let tsv = ev.report.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 5);
    let width = lines[0].split('\t').count();
    assert!(lines.iter().all(|l| l.split('\t').count() == width));
    assert!(lines[4].starts_with("mAP@100 Average"));
    let back: MetricReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, ev.report);
}

#[test]
fn unresolvable_query_is_reported() {
    let data = generate(6, 8, 6).unwrap();
    let stores = Stores::new(&data.images, &data.texts, &data.gallery).unwrap();
    let mut records = data.triplets.clone();
    records[2].ref_id = "missing".into();
    let err = evaluate(&records, &small_model(8), &stores, &EvalConfig::default()).err().unwrap();
    assert!(matches!(err, Error::UnresolvedId { index: 2, kind: "reference", .. }));
}
