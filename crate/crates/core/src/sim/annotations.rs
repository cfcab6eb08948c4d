//! Reader for EgoTracks-style annotation files.
//!
//! ```json
//! {
//!   "clip_uid": "abc",
//!   "num_frames": 300,
//!   "frame_width": 1440, "frame_height": 1080,
//!   "objects": [
//!     { "object_id": 3, "appearance": [0.1, ...],
//!       "boxes": [ { "frame": 12, "bbox": [x, y, w, h] }, ... ] }
//!   ],
//!   "queries": [
//!     { "query_id": 0, "object_id": 3, "query_frame": 299,
//!       "crop_features": [0.1, ...] }
//!   ]
//! }
//! ```
//!
//! Consecutive annotated frames form one visibility segment. Objects without
//! an `appearance` vector take the mean of their query crops.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Segment, SegmentFrame, VisualQuery, World, WorldConfig, WorldObject};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub frame: FrameIndex,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub object_id: u64,
    #[serde(default)]
    pub appearance: Option<Vec<f64>>,
    #[serde(default = "full_distinctiveness")]
    pub distinctiveness: f64,
    pub boxes: Vec<AnnotatedBox>,
}

fn full_distinctiveness() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedQuery {
    pub query_id: u64,
    pub object_id: u64,
    pub query_frame: FrameIndex,
    pub crop_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotations {
    pub clip_uid: String,
    pub num_frames: u64,
    pub frame_width: f64,
    pub frame_height: f64,
    pub objects: Vec<AnnotatedObject>,
    #[serde(default)]
    pub queries: Vec<AnnotatedQuery>,
}

impl ClipAnnotations {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds a world and its queries. Queries asked before their object is
    /// first visible are dropped.
    pub fn into_world(self) -> Result<(World, Vec<VisualQuery>)> {
        let mut crops: BTreeMap<u64, Vec<&[f64]>> = BTreeMap::new();
        for q in &self.queries {
            crops.entry(q.object_id).or_default().push(&q.crop_features);
        }

        let mut objects = Vec::with_capacity(self.objects.len());
        let mut dim = None;
        for obj in &self.objects {
            let appearance = match (&obj.appearance, crops.get(&obj.object_id)) {
                (Some(a), _) => a.clone(),
                (None, Some(cs)) => mean(cs)?,
                (None, None) => {
                    return Err(Error::Input(format!(
                        "object {} has neither an appearance vector nor query crops",
                        obj.object_id
                    )))
                }
            };
            if *dim.get_or_insert(appearance.len()) != appearance.len() {
                return Err(Error::Input(format!("object {}: inconsistent feature dimension", obj.object_id)));
            }
            objects.push(WorldObject {
                id: obj.object_id,
                appearance,
                distinctiveness: obj.distinctiveness,
                segments: segments_of(obj)?,
            });
        }
        objects.sort_by_key(|o| o.id);

        let config = WorldConfig {
            n_objects: objects.len(),
            stream_length: self.num_frames,
            frame_width: self.frame_width,
            frame_height: self.frame_height,
            appearance_dim: dim.unwrap_or(1),
            ..WorldConfig::default()
        };
        let world = World {
            seed: 0,
            config,
            objects,
        };
        let issues = world.audit();
        if !issues.is_empty() {
            return Err(Error::Input(format!("clip {}: {}", self.clip_uid, issues.join("; "))));
        }

        let mut queries = Vec::new();
        for q in self.queries {
            let obj = world
                .object(q.object_id)
                .ok_or_else(|| Error::Input(format!("query {} names unknown object {}", q.query_id, q.object_id)))?;
            if let Some(ground_truth) = obj.last_track_until(q.query_frame) {
                queries.push(VisualQuery {
                    query_id: q.query_id,
                    object_gt: q.object_id,
                    query_t: q.query_frame,
                    features: q.crop_features,
                    ground_truth,
                });
            }
        }
        Ok((world, queries))
    }
}

fn mean(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input("query crops disagree on feature dimension".into()));
    }
    Ok((0..d)
        .map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / vectors.len() as f64)
        .collect())
}

fn segments_of(obj: &AnnotatedObject) -> Result<Vec<Segment>> {
    let mut boxes: Vec<&AnnotatedBox> = obj.boxes.iter().collect();
    boxes.sort_by_key(|b| b.frame);
    let mut segments: Vec<Segment> = Vec::new();
    for b in boxes {
        let [x, y, w, h] = b.bbox;
        let frame = SegmentFrame {
            bbox: BoundingBox::new(x, y, w, h)?,
            distinctiveness: obj.distinctiveness,
        };
        match segments.last_mut() {
            Some(seg) if seg.end() == b.frame => {
                return Err(Error::Input(format!("object {}: two boxes at frame {}", obj.object_id, b.frame)))
            }
            Some(seg) if seg.end() + 1 == b.frame => seg.frames.push(frame),
            _ => segments.push(Segment {
                start: b.frame,
                frames: vec![frame],
            }),
        }
    }
    Ok(segments)
}
