//! Visual query sampling and the offline backward-scan baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patch::{derive_seed, perturb, SimPatch};
use super::{World, WorldObject};
use crate::error::Result;
use crate::geometry::{FrameIndex, ResponseTrack};
use crate::retrieval::{Embedder, SimilarityFn};

const QUERY_STREAM: u64 = 0x5155_4552_59;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualQuery {
    pub query_id: u64,
    pub object_gt: u64,
    pub query_t: FrameIndex,
    pub features: Vec<f64>,
    pub ground_truth: ResponseTrack,
}

impl VisualQuery {
    /// The query crop in the same byte format the memory stores patches in.
    pub fn content(&self) -> Vec<u8> {
        SimPatch {
            distinctiveness: 1.0,
            features: self.features.clone(),
        }
        .encode()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySampling {
    pub noise_sigma: f64,
    /// Ask every query after the last frame instead of at a random time.
    pub at_stream_end: bool,
}

impl Default for QuerySampling {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            at_stream_end: true,
        }
    }
}

/// Ground truth for a query about `gt_id` asked at time `t`.
pub fn ground_truth_track(world: &World, gt_id: u64, t: FrameIndex) -> Option<ResponseTrack> {
    world.object(gt_id)?.last_track_until(t)
}

/// Draws `n` queries. Objects are picked uniformly with replacement among
/// those already seen at the query time, so no query asks about an unseen
/// object.
pub fn sample_queries(world: &World, n: usize, seed: u64, sampling: &QuerySampling) -> Vec<VisualQuery> {
    if world.stream_length() == 0 {
        return Vec::new();
    }
    let last = world.stream_length() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[QUERY_STREAM]));
    if sampling.at_stream_end {
        return sample_queries_at(world, n, seed, last, sampling.noise_sigma, 0);
    }
    let seen: Vec<_> = world.objects.iter().filter(|o| !o.segments.is_empty()).collect();
    if seen.is_empty() {
        return Vec::new();
    }
    (0..n as u64)
        .map(|query_id| {
            let obj = seen[rng.random_range(0..seen.len())];
            let first = obj.first_appearance().expect("non-empty segments");
            let query_t = rng.random_range(first..=last);
            make_query(obj, query_id, query_t, seed, sampling.noise_sigma)
        })
        .collect()
}

/// Draws `n` queries all asked at time `t`, numbered from `first_id`.
pub fn sample_queries_at(
    world: &World,
    n: usize,
    seed: u64,
    t: FrameIndex,
    noise_sigma: f64,
    first_id: u64,
) -> Vec<VisualQuery> {
    let seen: Vec<_> = world
        .objects
        .iter()
        .filter(|o| o.first_appearance().is_some_and(|f| f <= t))
        .collect();
    if seen.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[QUERY_STREAM, t]));
    (first_id..first_id + n as u64)
        .map(|query_id| {
            let obj = seen[rng.random_range(0..seen.len())];
            make_query(obj, query_id, t, seed, noise_sigma)
        })
        .collect()
}

fn make_query(obj: &WorldObject, query_id: u64, query_t: FrameIndex, seed: u64, noise_sigma: f64) -> VisualQuery {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[QUERY_STREAM, query_id, query_t]));
    VisualQuery {
        query_id,
        object_gt: obj.id,
        query_t,
        features: perturb(&obj.appearance, noise_sigma, &mut noise_rng),
        ground_truth: obj.last_track_until(query_t).expect("query time after first appearance"),
    }
}

/// Brute-force baseline with full access to the annotated video: find the
/// best-matching instance seen up to `t` (ties to the lowest id), then walk
/// back from `t` to the frame where it was last visible and return its
/// containing segment, clipped at `t`.
pub fn offline_backward_scan(
    query: &VisualQuery,
    world: &World,
    t: FrameIndex,
    embedder: &dyn Embedder,
    similarity: &dyn SimilarityFn,
    lambda_ret: f64,
) -> Result<Option<ResponseTrack>> {
    let q = embedder.embed(&query.content())?;
    let mut best: Option<(u64, f64)> = None;
    for obj in &world.objects {
        if obj.first_appearance().is_none_or(|f| f > t) {
            continue;
        }
        let stored = SimPatch {
            distinctiveness: obj.distinctiveness,
            features: obj.appearance.clone(),
        };
        let s = similarity.similarity(&q, &embedder.embed(&stored.encode())?)?;
        let better = match best {
            None => true,
            Some((id, b)) => s > b || (s == b && obj.id < id),
        };
        if better {
            best = Some((obj.id, s));
        }
    }
    let Some((gt_id, score)) = best else {
        return Ok(None);
    };
    if score <= lambda_ret {
        return Ok(None);
    }
    let obj = world.object(gt_id).expect("id from world");
    let last_seen = (0..=t.min(world.stream_length().saturating_sub(1)))
        .rev()
        .find(|&f| obj.segment_at(f).is_some());
    Ok(last_seen.and_then(|f| obj.segment_at(f)).and_then(|(_, seg)| seg.track_until(t)))
}
