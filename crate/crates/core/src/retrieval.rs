//! Query retrieval and localization over a memory snapshot.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ResponseTrack;
use crate::memory::{ObjectId, ObjectMemory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite feature value".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, content: &[u8]) -> Result<FeatureVector>;
}

/// Similarity in `[0, 1]`.
pub trait SimilarityFn: Send + Sync {
    fn similarity(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64>;
}

/// Cosine similarity rescaled from `[-1, 1]` to `[0, 1]`.
pub fn cosine_unit_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Degenerate(format!(
            "dimension mismatch {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero vector".into()));
    }
    Ok(((1.0 + dot / (na * nb)) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CosineUnit;

impl SimilarityFn for CosineUnit {
    fn similarity(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
        cosine_unit_similarity(a, b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub matched: Option<ObjectId>,
    pub score: f64,
    pub track: Option<ResponseTrack>,
    pub similarity_ops: u64,
    pub timing: Timing,
}

impl RetrievalResult {
    pub fn no_match(score: f64, similarity_ops: u64) -> Self {
        Self {
            matched: None,
            score,
            track: None,
            similarity_ops,
            timing: Timing::default(),
        }
    }
}

/// Matches a query against every relevant patch in `memory`, averages the
/// similarities per object, and returns the latest contiguous segment of the
/// best object when its score strictly exceeds `lambda_ret`. Ties go to the
/// lowest object id.
pub fn localize(
    query: &[u8],
    memory: &ObjectMemory,
    embedder: &dyn Embedder,
    similarity: &dyn SimilarityFn,
    lambda_ret: f64,
) -> Result<RetrievalResult> {
    let started = Instant::now();
    let q = embedder.embed(query)?;
    let mut ops = 0u64;
    let mut best: Option<(ObjectId, f64)> = None;

    for entry in memory.entries() {
        let (mut sum, mut n) = (0.0, 0u64);
        for rec in entry.relevant_records() {
            let key = rec.patch_ref.ok_or_else(|| {
                Error::Input(format!("relevant record without patch (object {}, t={})", entry.id, rec.t))
            })?;
            let patch = memory
                .patch(&key)
                .ok_or_else(|| Error::Input(format!("missing patch for object {}", entry.id)))?;
            sum += similarity.similarity(&q, &embedder.embed(&patch.content)?)?;
            ops += 1;
            n += 1;
        }
        if n == 0 {
            continue;
        }
        let r = sum / n as f64;
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((entry.id, r));
        }
    }

    let mut result = match best {
        Some((id, r)) if r > lambda_ret => RetrievalResult {
            matched: Some(id),
            score: r,
            track: Some(memory.latest_segment(id)?),
            similarity_ops: ops,
            timing: Timing::default(),
        },
        Some((_, r)) => RetrievalResult::no_match(r, ops),
        None => RetrievalResult::no_match(0.0, ops),
    };
    result.timing.elapsed_s = started.elapsed().as_secs_f64();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = fv(&[1.0, 2.0, -3.0]);
        assert!((cosine_unit_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = fv(&[-1.0, -2.0, 3.0]);
        assert!(cosine_unit_similarity(&a, &neg).unwrap().abs() < 1e-12);
        let x = fv(&[1.0, 0.0]);
        let y = fv(&[0.0, 5.0]);
        assert_eq!(cosine_unit_similarity(&x, &y).unwrap(), 0.5);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let z = fv(&[0.0, 0.0]);
        assert!(matches!(cosine_unit_similarity(&z, &fv(&[1.0, 0.0])), Err(Error::Degenerate(_))));
        assert!(cosine_unit_similarity(&fv(&[1.0]), &fv(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn non_finite_features_rejected() {
        assert!(FeatureVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn empty_memory_is_no_match() {
        struct Fixed;
        impl Embedder for Fixed {
            fn embed(&self, _: &[u8]) -> Result<FeatureVector> {
                FeatureVector::new(vec![1.0])
            }
        }
        let r = localize(&[], &ObjectMemory::default(), &Fixed, &CosineUnit, 0.5).unwrap();
        assert_eq!(r.matched, None);
        assert_eq!(r.score, 0.0);
        assert_eq!(r.similarity_ops, 0);
        assert!(r.track.is_none());
    }

    use crate::geometry::BoundingBox;
    use crate::memory::{RecordDraft, WriteTarget};
    use crate::relevance::{AlwaysSuitable, RelevanceLabeler, RelevanceStrategy};
    use proptest::prelude::*;
    use std::sync::Arc;

    /// Patch bytes are similarity scores in tenths.
    struct Tenths;

    impl Embedder for Tenths {
        fn embed(&self, content: &[u8]) -> Result<FeatureVector> {
            FeatureVector::new(content.iter().map(|&b| f64::from(b) / 10.0).collect())
        }
    }

    /// Similarity is the stored scalar times `scale`; the query is ignored.
    struct Stored {
        scale: f64,
    }

    impl SimilarityFn for Stored {
        fn similarity(&self, _q: &FeatureVector, patch: &FeatureVector) -> Result<f64> {
            Ok(patch.values()[0] * self.scale)
        }
    }

    fn memory_with(objects: &[&[u8]]) -> ObjectMemory {
        let labeler = RelevanceLabeler::new(RelevanceStrategy::Mr2, Arc::new(AlwaysSuitable));
        let mut m = ObjectMemory::default();
        for (k, sims) in objects.iter().enumerate() {
            let mut target = WriteTarget::Fresh;
            for (t, &s) in sims.iter().enumerate() {
                let draft = RecordDraft {
                    t: t as u64,
                    bbox: BoundingBox::new(k as f64 * 20.0, 0.0, 10.0, 10.0).unwrap(),
                    confidence: 1.0,
                    frame_content: vec![],
                    patch_content: vec![s],
                };
                let out = m.write(target, draft, &labeler).unwrap();
                target = WriteTarget::Existing(out.object_id);
            }
        }
        m
    }

    #[test]
    fn mean_then_argmax() {
        let m = memory_with(&[&[9, 3], &[7]]);
        let r = localize(&[1], &m, &Tenths, &Stored { scale: 1.0 }, 0.5).unwrap();
        assert_eq!(r.matched, Some(ObjectId(1)));
        assert!((r.score - 0.7).abs() < 1e-12);
        assert_eq!(r.similarity_ops, 3);
        assert_eq!(r.track.unwrap().len(), 1);
    }

    #[test]
    fn threshold_is_strict() {
        let m = memory_with(&[&[5]]);
        let r = localize(&[1], &m, &Tenths, &Stored { scale: 1.0 }, 0.5).unwrap();
        assert_eq!(r.matched, None);
        assert_eq!(r.score, 0.5);
        assert!(r.track.is_none());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let m = memory_with(&[&[8], &[8]]);
        let r = localize(&[1], &m, &Tenths, &Stored { scale: 1.0 }, 0.5).unwrap();
        assert_eq!(r.matched, Some(ObjectId(0)));
    }

    #[test]
    fn identical_patch_scores_one() {
        let m = memory_with(&[&[4, 2, 7]]);
        let query = m.patch(&m.entries().next().unwrap().records[2].patch_ref.unwrap()).unwrap().content.clone();
        let r = localize(&query, &m, &Tenths, &CosineUnit, 0.5).unwrap();
        assert_eq!(r.matched, Some(ObjectId(0)));
        assert_eq!(r.score, 1.0);
        assert_eq!(r.track.unwrap().end(), 2);
    }

    #[test]
    fn snapshot_answers_like_a_copy() {
        let mut m = memory_with(&[&[9, 3], &[7]]);
        let snap = m.snapshot();
        let copy = m.clone();
        m = memory_with(&[&[1]]);
        let a = localize(&[1], &snap, &Tenths, &Stored { scale: 1.0 }, 0.5).unwrap();
        let b = localize(&[1], &copy, &Tenths, &Stored { scale: 1.0 }, 0.5).unwrap();
        assert_eq!((a.matched, a.score, a.track, a.similarity_ops), (b.matched, b.score, b.track, b.similarity_ops));
        assert_eq!(m.len(), 1);
    }

    proptest! {
        #[test]
        fn argmax_survives_common_scaling(
            objects in prop::collection::vec(prop::collection::vec(1u8..=10, 1..5), 1..6),
            scale in 0.01..=1.0f64,
        ) {
            // exact rational means; ties are excluded since rounding may split them
            let sums: Vec<(u64, u64)> = objects.iter().map(|v| (v.iter().map(|&b| u64::from(b)).sum(), v.len() as u64)).collect();
            let top = sums.iter().copied().fold((0, 1), |b, c| if c.0 * b.1 > b.0 * c.1 { c } else { b });
            prop_assume!(sums.iter().filter(|&&(s, n)| s * top.1 == top.0 * n).count() == 1);
            let refs: Vec<&[u8]> = objects.iter().map(|v| v.as_slice()).collect();
            let m = memory_with(&refs);
            let a = localize(&[1], &m, &Tenths, &Stored { scale: 1.0 }, 0.0).unwrap();
            let b = localize(&[1], &m, &Tenths, &Stored { scale }, 0.0).unwrap();
            prop_assert_eq!(a.matched, b.matched);
            let relevant: usize = m.entries().map(|e| e.relevant_records().count()).sum();
            prop_assert_eq!(a.similarity_ops as usize, relevant);
            let again = localize(&[1], &m, &Tenths, &Stored { scale: 1.0 }, 0.0).unwrap();
            prop_assert_eq!((a.matched, a.score, a.similarity_ops), (again.matched, again.score, again.similarity_ops));
        }
    }
}
