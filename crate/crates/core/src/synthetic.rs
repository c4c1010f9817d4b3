//! Seeded synthetic fixture: random unit image and text embeddings whose
//! targets are the normalized sum of both, plus random gallery distractors.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedstore::{save_store, write_triplets, EmbeddingStore, Task, TripletRecord, EMPTY_TEXT_ID};
use crate::error::{Error, Result};

/// Standard deviation of the per-component target noise.
pub const TARGET_NOISE: f64 = 0.05;
/// Gallery distractors per triplet.
pub const DISTRACTORS_PER_TARGET: usize = 3;

pub const IMAGES_FILE: &str = "images.fige";
pub const TEXTS_FILE: &str = "texts.fige";
pub const GALLERY_FILE: &str = "gallery.fige";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";

const WORDS: &[&str] = &[
    "red", "blue", "green", "small", "large", "wooden", "striped", "shiny", "with", "a", "the", "hat", "dog", "car",
    "tree", "window", "sleeves", "collar", "pattern", "background", "darker", "brighter", "two", "three", "near",
    "under", "beside", "more", "less", "instead", "of", "and", "cloudy", "sunny", "vintage", "modern",
];

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub images: EmbeddingStore,
    /// One row per record with text, plus the empty prompt.
    pub texts: EmbeddingStore,
    /// Targets followed by distractors, `4 n` rows.
    pub gallery: EmbeddingStore,
    pub triplets: Vec<TripletRecord>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn to_f32(rows: &[Vec<f64>]) -> Vec<f32> {
    rows.iter().flatten().map(|&x| x as f32).collect()
}

/// Builds the fixture. Task tags cycle CIR, SBIR, CSTBIR; SBIR records have
/// no text and their targets are built from the empty-prompt embedding.
pub fn generate(n: usize, dim: usize, seed: u64) -> Result<SyntheticData> {
    if n == 0 {
        return Err(Error::Config("synthetic fixture needs at least one triplet".into()));
    }
    if dim < 4 {
        return Err(Error::Config(format!("synthetic dimension must be at least 4, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = unit_gaussian(&mut rng, dim);

    let mut image_ids = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut text_ids = Vec::new();
    let mut texts = Vec::new();
    let mut gallery_ids = Vec::with_capacity(4 * n);
    let mut gallery = Vec::with_capacity(4 * n);
    let mut triplets = Vec::with_capacity(n);

    for i in 0..n {
        let task = Task::ALL[i % 3];
        let v = unit_gaussian(&mut rng, dim);
        let t = unit_gaussian(&mut rng, dim);
        let noise: Vec<f64> = (0..dim)
            .map(|_| TARGET_NOISE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let words = rng.random_range(5..=20);
        let phrase: Vec<&str> = (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();

        let (img_id, txt_id, tgt_id) = (format!("img_{i:05}"), format!("txt_{i:05}"), format!("tgt_{i:05}"));
        let used_text = if task == Task::Sbir { &empty } else { &t };
        let target = normalize((0..dim).map(|d| v[d] + used_text[d] + noise[d]).collect());

        image_ids.push(img_id.clone());
        images.push(v);
        gallery_ids.push(tgt_id.clone());
        gallery.push(target);
        let (text, text_id) = if task == Task::Sbir {
            (None, None)
        } else {
            text_ids.push(txt_id.clone());
            texts.push(t);
            (Some(phrase.join(" ")), Some(txt_id))
        };
        triplets.push(TripletRecord {
            task,
            ref_id: img_id,
            text,
            text_id,
            target_ids: vec![tgt_id],
        });
    }
    for j in 0..DISTRACTORS_PER_TARGET * n {
        gallery_ids.push(format!("dis_{j:05}"));
        gallery.push(unit_gaussian(&mut rng, dim));
    }
    text_ids.push(EMPTY_TEXT_ID.to_string());
    texts.push(empty);

    Ok(SyntheticData {
        images: EmbeddingStore::from_unnormalized(image_ids, to_f32(&images), dim)?,
        texts: EmbeddingStore::from_unnormalized(text_ids, to_f32(&texts), dim)?,
        gallery: EmbeddingStore::from_unnormalized(gallery_ids, to_f32(&gallery), dim)?,
        triplets,
    })
}

impl SyntheticData {
    /// Writes the three stores and the triplet file into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_store(&self.images, dir.join(IMAGES_FILE))?;
        save_store(&self.texts, dir.join(TEXTS_FILE))?;
        save_store(&self.gallery, dir.join(GALLERY_FILE))?;
        write_triplets(dir.join(TRIPLETS_FILE), &self.triplets)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::dot;

    #[test]
    fn sizes_and_tags() {
        let data = generate(10, 8, 1).unwrap();
        assert_eq!(data.gallery.len(), 40);
        assert_eq!(data.images.len(), 10);
        // 10 records: 4 CIR, 3 SBIR, 3 CSTBIR; texts for 7 plus the empty prompt
        assert_eq!(data.texts.len(), 8);
        assert!(data.texts.contains(EMPTY_TEXT_ID));
        let tags: Vec<Task> = data.triplets.iter().map(|r| r.task).collect();
        assert_eq!(&tags[..4], &[Task::Cir, Task::Sbir, Task::Cstbir, Task::Cir]);
        assert!(data.triplets.iter().all(|r| (r.task == Task::Sbir) == r.text.is_none()));
        for r in &data.triplets {
            if let Some(t) = &r.text {
                let words = t.split_whitespace().count();
                assert!((5..=20).contains(&words));
            }
        }
    }

    #[test]
    fn target_is_nearest_to_noise_free_sum() {
        let data = generate(64, 16, 3).unwrap();
        for r in &data.triplets {
            let v = data.images.lookup(&r.ref_id).unwrap();
            let t = data.texts.lookup(r.text_key()).unwrap();
            let sum: Vec<f32> = v.iter().zip(t).map(|(a, b)| a + b).collect();
            let best = (0..data.gallery.len())
                .max_by(|&a, &b| dot(&sum, data.gallery.row(a)).total_cmp(&dot(&sum, data.gallery.row(b))))
                .unwrap();
            assert_eq!(data.gallery.id(best), r.target_ids[0]);
        }
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(generate(0, 8, 1).is_err());
        assert!(generate(4, 3, 1).is_err());
    }
}
