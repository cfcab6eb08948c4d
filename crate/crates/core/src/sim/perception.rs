//! Oracle and noise-perturbed stand-ins for the detector and tracker.
//!
//! With [`NoiseConfig::none`] the noisy components emit exactly what their
//! oracle counterparts emit.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::patch::derive_seed;
use super::ValueRange;
use crate::error::{Error, Result};
use crate::geometry::{box_iou, BoundingBox, FrameIndex};
use crate::memory::{ObjectId, TrackedObject};
use crate::population::{Detection, FrameObservation, ObjectDiscoverer, ObjectTracker, TrackUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorNoise {
    /// Chance, per frame, of detecting a visible instance not yet reported
    /// in its current segment.
    pub p_det: f64,
    /// Frames at the start of each visibility segment during which an
    /// instance can be detected at all; later frames are always missed.
    pub detection_window: u64,
    /// Chance of one false positive per frame.
    pub false_positive_rate: f64,
    pub box_jitter: f64,
    pub tp_score: ValueRange,
    pub fp_score: ValueRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerNoise {
    /// Chance, per visible frame, that an active track survives.
    pub p_persist: f64,
    /// Chance, per visible frame, that a lost track is picked up again.
    pub p_reacquire: f64,
    pub drift_sigma: f64,
    /// Chance of jumping to an overlapping instance.
    pub id_switch: f64,
    pub tp_score: ValueRange,
    /// Confidence reported while lost.
    pub loss_score: ValueRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderNoise {
    pub feature_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub detector: DetectorNoise,
    pub tracker: TrackerNoise,
    pub embedder: EmbedderNoise,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            p_det: 0.2,
            detection_window: 3,
            false_positive_rate: 0.2,
            box_jitter: 10.0,
            tp_score: ValueRange { min: 0.2, max: 1.0 },
            fp_score: ValueRange { min: 0.0, max: 0.6 },
        }
    }
}

impl Default for TrackerNoise {
    fn default() -> Self {
        Self {
            p_persist: 0.97,
            p_reacquire: 0.02,
            drift_sigma: 2.0,
            id_switch: 0.2,
            tp_score: ValueRange { min: 0.55, max: 1.0 },
            loss_score: ValueRange { min: 0.0, max: 0.45 },
        }
    }
}

impl Default for EmbedderNoise {
    fn default() -> Self {
        Self { feature_sigma: 0.0 }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            detector: DetectorNoise::default(),
            tracker: TrackerNoise::default(),
            embedder: EmbedderNoise::default(),
        }
    }
}

impl NoiseConfig {
    /// Noise-free settings under which noisy components behave as oracles.
    pub fn none() -> Self {
        Self {
            detector: DetectorNoise {
                p_det: 1.0,
                detection_window: 1,
                false_positive_rate: 0.0,
                box_jitter: 0.0,
                tp_score: ValueRange::fixed(1.0),
                fp_score: ValueRange::fixed(0.0),
            },
            tracker: TrackerNoise {
                p_persist: 1.0,
                p_reacquire: 1.0,
                drift_sigma: 0.0,
                id_switch: 0.0,
                tp_score: ValueRange::fixed(1.0),
                loss_score: ValueRange::fixed(0.0),
            },
            embedder: EmbedderNoise { feature_sigma: 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("detector.p_det", self.detector.p_det),
            ("detector.false_positive_rate", self.detector.false_positive_rate),
            ("tracker.p_persist", self.tracker.p_persist),
            ("tracker.p_reacquire", self.tracker.p_reacquire),
            ("tracker.id_switch", self.tracker.id_switch),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let sigmas = [
            ("detector.box_jitter", self.detector.box_jitter),
            ("tracker.drift_sigma", self.tracker.drift_sigma),
            ("embedder.feature_sigma", self.embedder.feature_sigma),
        ];
        for (name, s) in sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} = {s} must be a non-negative number")));
            }
        }
        if self.detector.detection_window == 0 {
            return Err(Error::Config("detector.detection_window must be at least 1".into()));
        }
        self.detector.tp_score.check("detector.tp_score", 0.0, 1.0)?;
        self.detector.fp_score.check("detector.fp_score", 0.0, 1.0)?;
        self.tracker.tp_score.check("tracker.tp_score", 0.0, 1.0)?;
        self.tracker.loss_score.check("tracker.loss_score", 0.0, 1.0)?;
        Ok(())
    }
}

fn gaussian(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
    }
}

/// Ground-truth instance best matching a discovery box (IoU > 0.5).
fn match_instance(bbox: &BoundingBox, frame: &FrameObservation) -> Option<u64> {
    frame
        .instances
        .iter()
        .map(|i| (box_iou(&i.bbox, bbox), i.gt_id))
        .filter(|(iou, _)| *iou > 0.5)
        .fold(None, |acc: Option<(f64, u64)>, cur| match acc {
            Some(best) if best.0 >= cur.0 => Some(best),
            _ => Some(cur),
        })
        .map(|(_, id)| id)
}

/// Emits every instance's exact box on the first frame of each of its
/// visibility segments.
#[derive(Debug, Clone, Default)]
pub struct OracleDiscoverer;

impl ObjectDiscoverer for OracleDiscoverer {
    fn discover(&mut self, frame: &FrameObservation) -> Vec<Detection> {
        frame
            .instances
            .iter()
            .filter(|i| i.segment_start)
            .map(|i| Detection {
                bbox: i.bbox,
                score: 1.0,
                source_gt: Some(i.gt_id),
            })
            .collect()
    }
}

/// Follows the instance matched at discovery, reporting its exact box with
/// confidence 1 whenever it is visible.
#[derive(Debug, Clone, Default)]
pub struct OracleTracker {
    assignment: BTreeMap<ObjectId, u64>,
}

impl ObjectTracker for OracleTracker {
    fn init(&mut self, id: ObjectId, bbox: &BoundingBox, frame: &FrameObservation) {
        if let Some(gt) = match_instance(bbox, frame) {
            self.assignment.insert(id, gt);
        }
    }

    fn track(&mut self, objects: &[TrackedObject], frame: &FrameObservation) -> Vec<TrackUpdate> {
        objects
            .iter()
            .filter_map(|o| {
                let gt = self.assignment.get(&o.id)?;
                let inst = frame.instance(*gt)?;
                Some(TrackUpdate {
                    id: o.id,
                    bbox: inst.bbox,
                    score: 1.0,
                })
            })
            .collect()
    }
}

const DETECT_STREAM: u64 = 0x4445_54;
const CLUTTER_STREAM: u64 = 0x4650;
const TRACK_STREAM: u64 = 0x5452_4b;

/// Every random decision draws from a generator keyed on the instance and
/// frame it concerns, so runs that differ only in noise levels or in the
/// other component see the same underlying events.
fn keyed_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

fn chance(p: f64, rng: &mut ChaCha8Rng) -> bool {
    rng.random::<f64>() < p
}

pub struct NoisyDiscoverer {
    noise: DetectorNoise,
    seed: u64,
    reported: BTreeSet<(u64, usize)>,
    first_seen: BTreeMap<(u64, usize), FrameIndex>,
    frame_size: (f64, f64),
}

impl NoisyDiscoverer {
    pub fn new(noise: DetectorNoise, frame_size: (f64, f64), seed: u64) -> Self {
        Self {
            noise,
            seed,
            reported: BTreeSet::new(),
            first_seen: BTreeMap::new(),
            frame_size,
        }
    }

    fn jitter(&self, b: &BoundingBox, rng: &mut ChaCha8Rng) -> BoundingBox {
        let s = self.noise.box_jitter;
        if s == 0.0 {
            return *b;
        }
        let dx = gaussian(s, rng);
        let dy = gaussian(s, rng);
        let w = (b.w() + gaussian(s, rng)).max(1.0);
        let h = (b.h() + gaussian(s, rng)).max(1.0);
        BoundingBox::new(b.x() + dx, b.y() + dy, w, h).unwrap_or(*b)
    }
}

impl ObjectDiscoverer for NoisyDiscoverer {
    fn discover(&mut self, frame: &FrameObservation) -> Vec<Detection> {
        let mut out = Vec::new();
        for inst in &frame.instances {
            let key = (inst.gt_id, inst.segment);
            let since = frame.t - *self.first_seen.entry(key).or_insert(frame.t);
            if self.reported.contains(&key) || since >= self.noise.detection_window {
                continue;
            }
            let mut rng = keyed_rng(self.seed, &[DETECT_STREAM, inst.gt_id, frame.t]);
            if !chance(self.noise.p_det, &mut rng) {
                continue;
            }
            self.reported.insert(key);
            let bbox = self.jitter(&inst.bbox, &mut rng);
            out.push(Detection {
                bbox,
                score: self.noise.tp_score.draw(&mut rng),
                source_gt: Some(inst.gt_id),
            });
        }
        let mut rng = keyed_rng(self.seed, &[CLUTTER_STREAM, frame.t]);
        if chance(self.noise.false_positive_rate, &mut rng) {
            let (fw, fh) = self.frame_size;
            let w = rng.random_range(20.0..=(fw / 6.0).max(21.0));
            let h = rng.random_range(20.0..=(fh / 6.0).max(21.0));
            let x = rng.random_range(0.0..=(fw - w).max(0.0));
            let y = rng.random_range(0.0..=(fh - h).max(0.0));
            let score = self.noise.fp_score.draw(&mut rng);
            if let Ok(bbox) = BoundingBox::new(x, y, w, h) {
                out.push(Detection {
                    bbox,
                    score,
                    source_gt: None,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct TrackState {
    gt: u64,
    active: bool,
    drift: (f64, f64),
    last_box: BoundingBox,
}

pub struct NoisyTracker {
    noise: TrackerNoise,
    seed: u64,
    states: BTreeMap<ObjectId, TrackState>,
}

impl NoisyTracker {
    pub fn new(noise: TrackerNoise, seed: u64) -> Self {
        Self {
            noise,
            seed,
            states: BTreeMap::new(),
        }
    }
}

impl ObjectTracker for NoisyTracker {
    fn init(&mut self, id: ObjectId, bbox: &BoundingBox, frame: &FrameObservation) {
        if let Some(gt) = match_instance(bbox, frame) {
            self.states.insert(
                id,
                TrackState {
                    gt,
                    active: true,
                    drift: (0.0, 0.0),
                    last_box: *bbox,
                },
            );
        }
    }

    fn track(&mut self, objects: &[TrackedObject], frame: &FrameObservation) -> Vec<TrackUpdate> {
        let mut out = Vec::new();
        for o in objects {
            let Some(state) = self.states.get_mut(&o.id) else {
                continue;
            };
            let Some(mut target) = frame.instance(state.gt) else {
                state.active = false;
                continue;
            };
            let mut rng = keyed_rng(self.seed, &[TRACK_STREAM, state.gt, frame.t]);
            let u = rng.random::<f64>();
            if state.active {
                state.active = u < self.noise.p_persist;
            } else if u < self.noise.p_reacquire {
                state.active = true;
                state.drift = (0.0, 0.0);
            }
            if !state.active {
                out.push(TrackUpdate {
                    id: o.id,
                    bbox: state.last_box,
                    score: self.noise.loss_score.draw(&mut rng),
                });
                continue;
            }
            let switch = chance(self.noise.id_switch, &mut rng);
            if switch {
                let crossing = frame
                    .instances
                    .iter()
                    .find(|i| i.gt_id != target.gt_id && box_iou(&i.bbox, &target.bbox) > 0.0);
                if let Some(other) = crossing {
                    state.gt = other.gt_id;
                    target = other;
                }
            }
            state.drift.0 += gaussian(self.noise.drift_sigma, &mut rng);
            state.drift.1 += gaussian(self.noise.drift_sigma, &mut rng);
            let bbox = target
                .bbox
                .translated(state.drift.0, state.drift.1)
                .unwrap_or(target.bbox);
            state.last_box = bbox;
            out.push(TrackUpdate {
                id: o.id,
                bbox,
                score: self.noise.tp_score.draw(&mut rng),
            });
        }
        out
    }
}
