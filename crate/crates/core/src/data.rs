//! Resolution of triplet records against the image, text and gallery stores.

use crate::diffcore::{Scalar, Tensor};
use crate::embedstore::{EmbeddingStore, TripletRecord, EMPTY_TEXT_ID};
use crate::error::{Error, Result};

/// Store row indices for one triplet record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedRecord {
    pub ref_row: usize,
    pub text_row: usize,
    /// Gallery rows of every target, in record order.
    pub target_rows: Vec<usize>,
}

/// The three stores a query needs, checked to share one dimension.
#[derive(Debug, Clone, Copy)]
pub struct Stores<'a> {
    pub images: &'a EmbeddingStore,
    pub texts: &'a EmbeddingStore,
    pub gallery: &'a EmbeddingStore,
}

impl<'a> Stores<'a> {
    pub fn new(images: &'a EmbeddingStore, texts: &'a EmbeddingStore, gallery: &'a EmbeddingStore) -> Result<Self> {
        for s in [texts, gallery] {
            if s.dim() != images.dim() {
                return Err(Error::DimMismatch {
                    expected: images.dim(),
                    got: s.dim(),
                });
            }
        }
        Ok(Self { images, texts, gallery })
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    /// Row of the empty-prompt text embedding.
    pub fn empty_text_row(&self) -> Result<usize> {
        self.texts.index_of(EMPTY_TEXT_ID).ok_or_else(|| Error::UnresolvedId {
            index: 0,
            kind: "text",
            id: EMPTY_TEXT_ID.to_string(),
        })
    }

    /// Looks every id up; the error names the first failing record.
    pub fn resolve(&self, records: &[TripletRecord]) -> Result<Vec<ResolvedRecord>> {
        records
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let find = |store: &EmbeddingStore, kind: &'static str, id: &str| {
                    store.index_of(id).ok_or_else(|| Error::UnresolvedId {
                        index,
                        kind,
                        id: id.to_string(),
                    })
                };
                Ok(ResolvedRecord {
                    ref_row: find(self.images, "reference", &r.ref_id)?,
                    text_row: find(self.texts, "text", r.text_key())?,
                    target_rows: r
                        .target_ids
                        .iter()
                        .map(|t| find(self.gallery, "target", t))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }
}

/// Dense inputs for one batch of resolved records.
#[derive(Debug, Clone)]
pub struct QueryInputs<T> {
    pub reference: Tensor<T>,
    pub text: Tensor<T>,
}

impl<T: Scalar> QueryInputs<T> {
    pub fn gather(stores: &Stores<'_>, records: &[&ResolvedRecord]) -> Self {
        let refs: Vec<usize> = records.iter().map(|r| r.ref_row).collect();
        let texts: Vec<usize> = records.iter().map(|r| r.text_row).collect();
        Self {
            reference: stores.images.gather(&refs).cast(),
            text: stores.texts.gather(&texts).cast(),
        }
    }

    pub fn len(&self) -> usize {
        self.reference.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Query inputs plus the positive target and the empty-prompt text rows
/// used to form the reference negative.
#[derive(Debug, Clone)]
pub struct TrainingBatch<T> {
    pub query: QueryInputs<T>,
    /// First target of each record.
    pub positive: Tensor<T>,
    pub empty_text: Tensor<T>,
}

impl<T: Scalar> TrainingBatch<T> {
    pub fn gather(stores: &Stores<'_>, records: &[&ResolvedRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let positives: Vec<usize> = records.iter().map(|r| r.target_rows[0]).collect();
        let empty = vec![stores.empty_text_row()?; records.len()];
        Ok(Self {
            query: QueryInputs::gather(stores, records),
            positive: stores.gallery.gather(&positives).cast(),
            empty_text: stores.texts.gather(&empty).cast(),
        })
    }
}
