//! Exact top-K dot-product search over a gallery store.
//!
//! Results are ordered by score descending, then gallery id ascending, so
//! rankings are total and independent of how the gallery is sharded.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::dot;
use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub results: Vec<Hit>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.results.iter().map(|h| h.id.as_str())
    }
}

/// One query vector with an optional gallery id to leave out.
#[derive(Debug, Clone)]
pub struct SearchQuery {
    pub key: String,
    pub vector: Vec<f32>,
    pub exclude: Option<String>,
}

fn rank_order(gallery: &EmbeddingStore, a: (usize, f32), b: (usize, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| gallery.id(a.0).cmp(gallery.id(b.0)))
}

/// Top `k` of gallery rows `range`, sorted.
fn shard_topk(
    q: &[f32],
    gallery: &EmbeddingStore,
    range: std::ops::Range<usize>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<(usize, f32)> {
    let mut scored: Vec<(usize, f32)> = range
        .filter(|&r| Some(r) != exclude)
        .map(|r| (r, dot(q, gallery.row(r))))
        .collect();
    let cmp = |a: &(usize, f32), b: &(usize, f32)| rank_order(gallery, *a, *b);
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored
}

/// Merges sorted shard results by repeatedly taking the best head.
fn merge(gallery: &EmbeddingStore, shards: Vec<Vec<(usize, f32)>>, k: usize) -> Vec<(usize, f32)> {
    let mut heads = vec![0usize; shards.len()];
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mut best: Option<usize> = None;
        for (s, list) in shards.iter().enumerate() {
            if let Some(&cand) = list.get(heads[s]) {
                let better = match best {
                    None => true,
                    Some(b) => rank_order(gallery, cand, shards[b][heads[b]]) == Ordering::Less,
                };
                if better {
                    best = Some(s);
                }
            }
        }
        match best {
            Some(s) => {
                out.push(shards[s][heads[s]]);
                heads[s] += 1;
            }
            None => break,
        }
    }
    out
}

/// Exact top-`k` search with the gallery split into `shards` contiguous
/// parts. The result does not depend on `shards`.
pub fn search_sharded(
    q: &[f32],
    gallery: &EmbeddingStore,
    k: usize,
    exclude: Option<&str>,
    shards: usize,
) -> Result<Vec<Hit>> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if q.len() != gallery.dim() {
        return Err(Error::DimMismatch {
            expected: gallery.dim(),
            got: q.len(),
        });
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let exclude = exclude.and_then(|id| gallery.index_of(id));
    let n = gallery.len();
    let shards = shards.clamp(1, n);
    let per = n.div_ceil(shards);
    let parts: Vec<Vec<(usize, f32)>> = (0..n)
        .step_by(per)
        .map(|start| shard_topk(q, gallery, start..(start + per).min(n), k, exclude))
        .collect();
    Ok(merge(gallery, parts, k)
        .into_iter()
        .map(|(r, score)| Hit {
            id: gallery.id(r).to_string(),
            score,
        })
        .collect())
}

pub fn search_topk(q: &[f32], gallery: &EmbeddingStore, k: usize, exclude: Option<&str>) -> Result<Vec<Hit>> {
    search_sharded(q, gallery, k, exclude, 1)
}

/// Searches every query in parallel; output order follows input order.
pub fn batch_search(queries: &[SearchQuery], gallery: &EmbeddingStore, k: usize, shards: usize) -> Result<Vec<RankedList>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(index, q)| {
            let results = search_sharded(&q.vector, gallery, k, q.exclude.as_deref(), shards).map_err(|e| Error::Query {
                index,
                source: Box::new(e),
            })?;
            Ok(RankedList {
                query: q.key.clone(),
                results,
            })
        })
        .collect()
}

pub fn write_rankings(path: impl AsRef<Path>, lists: &[RankedList]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for l in lists {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn axes() -> EmbeddingStore {
        EmbeddingStore::new(vec!["a".into(), "b".into()], vec![1.0, 0.0, 0.0, 1.0], 2, true).unwrap()
    }

    fn pairs(hits: &[Hit]) -> Vec<(&str, f32)> {
        hits.iter().map(|h| (h.id.as_str(), h.score)).collect()
    }

    #[test]
    fn orthogonal_axes() {
        let hits = search_topk(&[1.0, 0.0], &axes(), 2, None).unwrap();
        assert_eq!(pairs(&hits), vec![("a", 1.0), ("b", 0.0)]);
    }

    #[test]
    fn exclusion_removes_candidate() {
        let hits = search_topk(&[1.0, 0.0], &axes(), 2, Some("a")).unwrap();
        assert_eq!(pairs(&hits), vec![("b", 0.0)]);
        // an id outside the gallery excludes nothing
        assert_eq!(search_topk(&[1.0, 0.0], &axes(), 2, Some("zz")).unwrap().len(), 2);
    }

    #[test]
    fn equal_scores_sort_by_id() {
        let ids = ["d", "b", "c", "a"].map(String::from).to_vec();
        let g = EmbeddingStore::new(ids, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 2, true).unwrap();
        let hits = search_topk(&[0.0, 1.0], &g, 4, None).unwrap();
        assert_eq!(hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            search_topk(&[1.0, 0.0, 0.0], &axes(), 1, None),
            Err(Error::DimMismatch { expected: 2, got: 3 })
        ));
        let empty = EmbeddingStore::new(vec![], vec![], 2, true).unwrap();
        assert!(matches!(search_topk(&[1.0, 0.0], &empty, 1, None), Err(Error::Empty(_))));
        let q = SearchQuery {
            key: "q".into(),
            vector: vec![1.0],
            exclude: None,
        };
        let ok = SearchQuery {
            key: "ok".into(),
            vector: vec![1.0, 0.0],
            exclude: None,
        };
        assert!(matches!(
            batch_search(&[ok, q], &axes(), 1, 1),
            Err(Error::Query { index: 1, .. })
        ));
    }

    #[test]
    fn batch_matches_single_and_handles_empty() {
        let q = SearchQuery {
            key: "q".into(),
            vector: vec![0.6, 0.8],
            exclude: None,
        };
        let lists = batch_search(std::slice::from_ref(&q), &axes(), 2, 1).unwrap();
        assert_eq!(lists[0].results, search_topk(&q.vector, &axes(), 2, None).unwrap());
        assert!(batch_search(&[], &axes(), 2, 1).unwrap().is_empty());
    }

    fn random_gallery(rng: &mut ChaCha8Rng, n: usize, d: usize, levels: i32) -> EmbeddingStore {
        // coarse values make exact score ties common
        let data = (0..n * d).map(|_| rng.random_range(-levels..=levels) as f32 / levels as f32).collect();
        let ids = (0..n).map(|i| format!("g{:03}", (i * 37) % 1000)).collect();
        EmbeddingStore::new(ids, data, d, false).unwrap()
    }

    /// Full sort of every gallery row by (score desc, id asc).
    fn oracle(q: &[f32], g: &EmbeddingStore, k: usize, exclude: Option<&str>) -> Vec<Hit> {
        let mut all: Vec<Hit> = (0..g.len())
            .filter(|&r| Some(g.id(r)) != exclude)
            .map(|r| Hit {
                id: g.id(r).to_string(),
                score: q.iter().zip(g.row(r)).map(|(a, b)| a * b).sum(),
            })
            .collect();
        all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..100 {
            let n = rng.random_range(1..=200);
            let d = rng.random_range(1..=32);
            let g = random_gallery(&mut rng, n, d, 2);
            let q: Vec<f32> = (0..d).map(|_| rng.random_range(-2..=2) as f32 / 2.0).collect();
            let k = rng.random_range(1..=n + 3);
            let exclude = (trial % 3 == 0).then(|| g.id(rng.random_range(0..n)).to_string());
            let expected = oracle(&q, &g, k, exclude.as_deref());
            for shards in [1, 2, 4, 7] {
                let got = search_sharded(&q, &g, k, exclude.as_deref(), shards).unwrap();
                assert_eq!(got, expected, "trial {trial} shards {shards}");
            }
        }
    }

    proptest! {
        #[test]
        fn top_k_is_prefix_of_top_k_plus_one(seed in 0u64..5000, k in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gallery(&mut rng, 40, 6, 3);
            let q: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = search_topk(&q, &g, k, None).unwrap();
            let b = search_topk(&q, &g, k + 1, None).unwrap();
            prop_assert_eq!(&b[..a.len()], &a[..]);
            prop_assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
