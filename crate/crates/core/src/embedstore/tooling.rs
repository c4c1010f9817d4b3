//! Similarity-threshold filtering and per-class dataset statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StoreError, Task, TripletRecord};

/// Slack allowed on cosine scores that drift just past ±1.
const SCORE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub image_id: String,
    pub text_id: String,
    pub score: f64,
}

/// Keeps the pairs whose score is strictly above `threshold`, in input order.
pub fn clip_filter(pairs: &[ScoredPair], threshold: f64) -> Result<Vec<ScoredPair>, StoreError> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(StoreError::Threshold(threshold));
    }
    for (index, p) in pairs.iter().enumerate() {
        if !(p.score.abs() <= 1.0 + SCORE_SLACK) {
            return Err(StoreError::ScoreRange { index, score: p.score });
        }
    }
    Ok(pairs.iter().filter(|p| p.score > threshold).cloned().collect())
}

pub fn read_scored_pairs(path: impl AsRef<Path>) -> Result<Vec<ScoredPair>, StoreError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Triplet {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("malformed scored pair: {e}"),
            })
        })
        .collect()
}

pub fn write_scored_pairs(path: impl AsRef<Path>, pairs: &[ScoredPair]) -> Result<(), StoreError> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| StoreError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStats {
    pub count: usize,
    /// Mean whitespace-token count over records that carry text; `None` when
    /// no record does.
    pub mean_text_words: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub per_task: BTreeMap<Task, TaskStats>,
    pub total: TaskStats,
}

#[derive(Default)]
struct Acc {
    count: usize,
    texts: usize,
    words: usize,
}

impl Acc {
    fn finish(&self) -> TaskStats {
        TaskStats {
            count: self.count,
            mean_text_words: (self.texts > 0).then(|| self.words as f64 / self.texts as f64),
        }
    }
}

pub fn dataset_stats(records: &[TripletRecord]) -> DatasetStats {
    let mut per: BTreeMap<Task, Acc> = Task::ALL.iter().map(|&t| (t, Acc::default())).collect();
    let mut total = Acc::default();
    for r in records {
        let words = r.text.as_deref().map(|t| t.split_whitespace().count());
        for acc in [per.get_mut(&r.task).expect("all tasks present"), &mut total] {
            acc.count += 1;
            if let Some(w) = words {
                acc.texts += 1;
                acc.words += w;
            }
        }
    }
    DatasetStats {
        per_task: per.iter().map(|(&t, a)| (t, a.finish())).collect(),
        total: total.finish(),
    }
}

impl DatasetStats {
    /// Plain-text table with one row per class and a total row; classes
    /// without text print `--` for length.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>10} {:>12}", "Class", "# Triplets", "Text Length");
        let fmt_len = |s: &TaskStats| s.mean_text_words.map_or("--".to_string(), |m| format!("{m:.2}"));
        for (task, s) in &self.per_task {
            let _ = writeln!(out, "{:<8} {:>10} {:>12}", task.as_str(), s.count, fmt_len(s));
        }
        let _ = writeln!(out, "{:<8} {:>10} {:>12}", "TOTAL", self.total.count, fmt_len(&self.total));
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pair(score: f64) -> ScoredPair {
        ScoredPair {
            image_id: format!("i{score}"),
            text_id: "t".into(),
            score,
        }
    }

    fn rec(task: Task, text: Option<&str>) -> TripletRecord {
        TripletRecord {
            task,
            ref_id: "r".into(),
            text: text.map(str::to_string),
            text_id: text.map(|_| "t".to_string()),
            target_ids: vec!["g".into()],
        }
    }

    #[test]
    fn filter_is_strictly_above_threshold() {
        let kept = clip_filter(&[pair(0.95), pair(0.85), pair(0.90)], 0.9).unwrap();
        assert_eq!(kept, vec![pair(0.95)]);
    }

    #[test]
    fn filter_rejects_bad_threshold_and_scores() {
        assert!(matches!(clip_filter(&[], 1.5), Err(StoreError::Threshold(_))));
        assert!(matches!(clip_filter(&[pair(1.2)], 0.9), Err(StoreError::ScoreRange { index: 0, .. })));
        assert!(matches!(clip_filter(&[pair(f64::NAN)], 0.9), Err(StoreError::ScoreRange { .. })));
    }

    #[test]
    fn stats_counts_words_per_task() {
        let stats = dataset_stats(&[rec(Task::Cir, Some("a b c")), rec(Task::Cir, Some("d e"))]);
        let cir = &stats.per_task[&Task::Cir];
        assert_eq!(cir.count, 2);
        assert_eq!(cir.mean_text_words, Some(2.5));
        assert_eq!(stats.per_task[&Task::Sbir].count, 0);
    }

    #[test]
    fn text_free_task_reports_absent_length() {
        let stats = dataset_stats(&[rec(Task::Sbir, None), rec(Task::Sbir, None)]);
        assert_eq!(stats.per_task[&Task::Sbir].count, 2);
        assert_eq!(stats.per_task[&Task::Sbir].mean_text_words, None);
        assert!(stats.render_table().contains("--"));
    }

    #[test]
    fn empty_input_is_all_zero() {
        let stats = dataset_stats(&[]);
        assert!(stats.per_task.values().all(|s| s.count == 0 && s.mean_text_words.is_none()));
        assert_eq!(stats.total.count, 0);
    }

    proptest! {
        #[test]
        fn filter_idempotent_and_order_preserving(
            scores in proptest::collection::vec(-1.0f64..=1.0, 0..40),
            t in -1.0f64..=1.0,
        ) {
            let pairs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| ScoredPair {
                image_id: i.to_string(), text_id: "t".into(), score: s,
            }).collect();
            let once = clip_filter(&pairs, t).unwrap();
            let twice = clip_filter(&once, t).unwrap();
            prop_assert_eq!(&once, &twice);
            let idx: Vec<usize> = once.iter().map(|p| p.image_id.parse().unwrap()).collect();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn totals_equal_sum_of_tasks(tags in proptest::collection::vec(0usize..3, 0..50)) {
            let recs: Vec<_> = tags.iter().map(|&i| rec(Task::ALL[i], (i != 1).then_some("w w"))).collect();
            let stats = dataset_stats(&recs);
            let sum: usize = stats.per_task.values().map(|s| s.count).sum();
            prop_assert_eq!(sum, stats.total.count);
        }
    }
}
