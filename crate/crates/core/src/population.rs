//! Per-frame memory population: tracking of known objects, discovery of new
//! ones, and the gates between them.
//!
//! Each step runs in a fixed order:
//! 1. the tracker proposes one box per known object; boxes with
//!    `score <= lambda_ot` are dropped;
//! 2. surviving updates overlapping another by IoU above the duplicate
//!    threshold yield to the lower (older) object id;
//! 3. survivors are labeled and written;
//! 4. detections with `score <= lambda_od` are dropped, as are those with
//!    IoU above `lambda_iou` against any record already stamped `t`;
//! 5. remaining detections become new objects.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, BoundingBox, FrameIndex};
use crate::memory::{ObjectId, ObjectMemory, RecordDraft, TrackedObject, WriteTarget};
use crate::relevance::{RelevanceLabeler, RelevanceStrategy};

/// A ground-truth instance visible in a simulated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibleInstance {
    pub gt_id: u64,
    pub bbox: BoundingBox,
    pub appearance: Arc<[f64]>,
    pub distinctiveness: f64,
    /// Index of the visibility segment this frame belongs to.
    pub segment: usize,
    pub segment_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub t: FrameIndex,
    pub instances: Vec<VisibleInstance>,
    /// Opaque pixel payload descriptor.
    pub payload: Vec<u8>,
}

impl FrameObservation {
    pub fn instance(&self, gt_id: u64) -> Option<&VisibleInstance> {
        self.instances.iter().find(|i| i.gt_id == gt_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub source_gt: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackUpdate {
    pub id: ObjectId,
    pub bbox: BoundingBox,
    pub score: f64,
}

pub trait ObjectTracker: Send {
    /// Called once when a detection becomes a new object.
    fn init(&mut self, _id: ObjectId, _bbox: &BoundingBox, _frame: &FrameObservation) {}

    /// At most one update per object in `objects`.
    fn track(&mut self, objects: &[TrackedObject], frame: &FrameObservation) -> Vec<TrackUpdate>;
}

pub trait ObjectDiscoverer: Send {
    fn discover(&mut self, frame: &FrameObservation) -> Vec<Detection>;
}

/// Cuts the patch under `bbox` out of a frame.
pub trait PatchExtractor: Send + Sync {
    fn extract(&self, frame: &FrameObservation, bbox: &BoundingBox) -> Vec<u8>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmpConfig {
    pub lambda_ot: f64,
    pub lambda_od: f64,
    pub lambda_iou: f64,
    pub duplicate_iou: f64,
    pub strategy: RelevanceStrategy,
    pub assessor_threshold: f64,
}

impl Default for OmpConfig {
    fn default() -> Self {
        Self {
            lambda_ot: 0.5,
            lambda_od: 0.01,
            lambda_iou: 0.5,
            duplicate_iou: 0.5,
            strategy: RelevanceStrategy::Mr1Star,
            assessor_threshold: 0.5,
        }
    }
}

impl OmpConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_ot", self.lambda_ot),
            ("lambda_od", self.lambda_od),
            ("lambda_iou", self.lambda_iou),
            ("duplicate_iou", self.duplicate_iou),
            ("assessor_threshold", self.assessor_threshold),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: FrameIndex,
    pub track_proposals: usize,
    pub gated_tracks: usize,
    pub suppressed: Vec<ObjectId>,
    pub tracked: usize,
    pub detections: usize,
    pub gated_detections: usize,
    pub discarded: usize,
    pub discovered: Vec<ObjectId>,
    pub breaks: usize,
    pub frames_deleted: usize,
    pub evicted: Vec<ObjectId>,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationReport {
    pub frames: u64,
    pub tracked: u64,
    pub gated_tracks: u64,
    pub suppressed: u64,
    pub detections: u64,
    pub gated_detections: u64,
    pub discarded: u64,
    pub discovered: u64,
    pub breaks: u64,
    pub frames_deleted: u64,
    pub evicted: u64,
    pub final_objects: u64,
    pub final_size_bytes: u64,
    pub peak_size_bytes: u64,
    /// Raised if any step ended with a single object above the cap.
    pub over_budget_warning: bool,
}

impl PopulationReport {
    fn absorb(&mut self, step: &StepReport) {
        self.frames += 1;
        self.tracked += step.tracked as u64;
        self.gated_tracks += step.gated_tracks as u64;
        self.suppressed += step.suppressed.len() as u64;
        self.detections += step.detections as u64;
        self.gated_detections += step.gated_detections as u64;
        self.discarded += step.discarded as u64;
        self.discovered += step.discovered.len() as u64;
        self.breaks += step.breaks as u64;
        self.frames_deleted += step.frames_deleted as u64;
        self.evicted += step.evicted.len() as u64;
        self.peak_size_bytes = self.peak_size_bytes.max(step.size_bytes);
    }
}

/// The population loop state: perception components plus stream position.
pub struct Population {
    config: OmpConfig,
    tracker: Box<dyn ObjectTracker>,
    discoverer: Box<dyn ObjectDiscoverer>,
    extractor: Arc<dyn PatchExtractor>,
    labeler: RelevanceLabeler,
    budget_cap: Option<u64>,
    next_t: FrameIndex,
}

impl Population {
    pub fn new(
        config: OmpConfig,
        tracker: Box<dyn ObjectTracker>,
        discoverer: Box<dyn ObjectDiscoverer>,
        extractor: Arc<dyn PatchExtractor>,
        labeler: RelevanceLabeler,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tracker,
            discoverer,
            extractor,
            labeler,
            budget_cap: None,
            next_t: 0,
        })
    }

    pub fn with_budget(mut self, cap: Option<u64>) -> Self {
        self.budget_cap = cap;
        self
    }

    pub fn config(&self) -> &OmpConfig {
        &self.config
    }

    pub fn step(&mut self, memory: &mut ObjectMemory, frame: &FrameObservation) -> Result<StepReport> {
        let t = frame.t;
        if t != self.next_t {
            return Err(Error::Ordering {
                got: t,
                expected: format!("frame {}", self.next_t),
            });
        }
        let mut report = StepReport {
            t,
            ..StepReport::default()
        };

        if !memory.is_empty() {
            let context = memory.tracking_context();
            let proposals = self.tracker.track(&context, frame);
            report.track_proposals = proposals.len();
            check_tracker_output(&context, &proposals)?;

            let mut survivors: Vec<TrackUpdate> = proposals
                .into_iter()
                .filter(|u| u.score > self.config.lambda_ot)
                .collect();
            report.gated_tracks = report.track_proposals - survivors.len();

            survivors.sort_by_key(|u| u.id);
            let mut kept: Vec<TrackUpdate> = Vec::with_capacity(survivors.len());
            for update in survivors {
                let duplicate = kept
                    .iter()
                    .any(|k| box_iou(&k.bbox, &update.bbox) > self.config.duplicate_iou);
                if duplicate {
                    report.suppressed.push(update.id);
                } else {
                    kept.push(update);
                }
            }

            for update in kept {
                let draft = self.draft(frame, update.bbox, update.score);
                let outcome = memory.write(WriteTarget::Existing(update.id), draft, &self.labeler)?;
                report.tracked += 1;
                report.breaks += usize::from(outcome.break_detected);
                report.frames_deleted += outcome.frames_deleted;
            }
        }

        let mut detections = self.discoverer.discover(frame);
        report.detections = detections.len();
        detections.retain(|d| d.score > self.config.lambda_od);
        report.gated_detections = report.detections - detections.len();
        // Stable: equal scores keep detector order.
        detections.sort_by(|a, b| b.score.total_cmp(&a.score));

        let mut occupied: Vec<BoundingBox> = memory.read_time(t).into_iter().map(|(_, r)| r.bbox).collect();
        for det in detections {
            if occupied.iter().any(|b| box_iou(b, &det.bbox) > self.config.lambda_iou) {
                report.discarded += 1;
                continue;
            }
            let draft = self.draft(frame, det.bbox, det.score);
            let outcome = memory.write(WriteTarget::Fresh, draft, &self.labeler)?;
            self.tracker.init(outcome.object_id, &det.bbox, frame);
            occupied.push(det.bbox);
            report.discovered.push(outcome.object_id);
        }

        if let Some(cap) = self.budget_cap {
            report.evicted = memory.prune_to_budget(cap);
        }
        report.size_bytes = memory.size_bytes();
        self.next_t = t + 1;
        Ok(report)
    }

    /// Folds [`Population::step`] over a stream, consuming each frame once.
    /// `on_step` observes the memory after every step.
    pub fn run_stream<I, F>(
        &mut self,
        memory: &mut ObjectMemory,
        frames: I,
        mut on_step: F,
    ) -> Result<PopulationReport>
    where
        I: IntoIterator<Item = FrameObservation>,
        F: FnMut(&StepReport, &ObjectMemory) -> Result<()>,
    {
        let mut total = PopulationReport::default();
        for frame in frames {
            let step = self.step(memory, &frame)?;
            total.absorb(&step);
            total.over_budget_warning |= memory.over_budget_warning();
            on_step(&step, memory)?;
        }
        total.final_objects = memory.len() as u64;
        total.final_size_bytes = memory.size_bytes();
        Ok(total)
    }

    fn draft(&self, frame: &FrameObservation, bbox: BoundingBox, confidence: f64) -> RecordDraft {
        RecordDraft {
            t: frame.t,
            bbox,
            confidence,
            frame_content: frame.payload.clone(),
            patch_content: self.extractor.extract(frame, &bbox),
        }
    }
}

fn check_tracker_output(context: &[TrackedObject], proposals: &[TrackUpdate]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for u in proposals {
        if !(0.0..=1.0).contains(&u.score) {
            return Err(Error::TrackerContract(format!("score {} for object {}", u.score, u.id)));
        }
        if !seen.insert(u.id) {
            return Err(Error::TrackerContract(format!("two updates for object {}", u.id)));
        }
        if context.binary_search_by_key(&u.id, |o| o.id).is_err() {
            return Err(Error::TrackerContract(format!("update for unknown object {}", u.id)));
        }
    }
    Ok(())
}
