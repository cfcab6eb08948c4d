//! Seeded synthetic ground truth and perception stand-ins.
//!
//! Objects live in a latent appearance space; their boxes wander inside
//! grid cells so that no two visible objects ever overlap. Each object has
//! one or more visibility segments separated by at least one invisible frame.

pub mod annotations;
pub mod patch;
pub mod perception;
pub mod queries;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameIndex, ResponseTrack};
use crate::population::{FrameObservation, VisibleInstance};

pub use perception::{NoiseConfig, NoisyDiscoverer, NoisyTracker, OracleDiscoverer, OracleTracker};
pub use queries::{offline_backward_scan, sample_queries, sample_queries_at, QuerySampling, VisualQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: u64,
    pub max: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    fn check(&self, name: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && lo <= self.min && self.min <= self.max && self.max <= hi) {
            return Err(Error::Config(format!(
                "{name} range [{}, {}] must satisfy {lo} <= min <= max <= {hi}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_objects: usize,
    pub stream_length: u64,
    pub frame_width: f64,
    pub frame_height: f64,
    pub appearance_dim: usize,
    pub segments_per_object: CountRange,
    pub segment_length: CountRange,
    pub box_size: ValueRange,
    /// Random-walk step of box origins, in pixels per frame.
    pub motion_sigma: f64,
    pub distinctiveness: ValueRange,
    /// Per-frame distinctiveness varies uniformly by up to this much.
    pub distinctiveness_jitter: f64,
    /// Sampling rate of the abstract stream; metadata only.
    pub fps: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_objects: 20,
            stream_length: 2000,
            frame_width: 1440.0,
            frame_height: 1080.0,
            appearance_dim: 16,
            segments_per_object: CountRange { min: 1, max: 4 },
            segment_length: CountRange { min: 8, max: 80 },
            box_size: ValueRange { min: 40.0, max: 140.0 },
            motion_sigma: 3.0,
            distinctiveness: ValueRange { min: 0.35, max: 1.0 },
            distinctiveness_jitter: 0.2,
            fps: 5.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stream_length == 0 {
            return Err(Error::Config("stream_length must be positive".into()));
        }
        if self.appearance_dim == 0 {
            return Err(Error::Config("appearance_dim must be positive".into()));
        }
        let (s, l) = (self.segments_per_object, self.segment_length);
        if s.min == 0 || s.min > s.max || l.min == 0 || l.min > l.max {
            return Err(Error::Config("segment count and length ranges must be positive and ordered".into()));
        }
        if s.min * l.min + (s.min - 1) > self.stream_length {
            return Err(Error::Config(format!(
                "{} segments of at least {} frames do not fit in {} frames",
                s.min, l.min, self.stream_length
            )));
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return Err(Error::Config("frame size must be positive".into()));
        }
        self.box_size.check("box_size", f64::MIN_POSITIVE, f64::MAX)?;
        self.distinctiveness.check("distinctiveness", 0.0, 1.0)?;
        if !(self.motion_sigma >= 0.0 && self.distinctiveness_jitter >= 0.0) {
            return Err(Error::Config("sigmas must be non-negative".into()));
        }
        if self.n_objects > 0 {
            let (cw, ch) = self.cell_size();
            if self.box_size.max > cw || self.box_size.max > ch {
                return Err(Error::Config(format!(
                    "boxes up to {} px do not fit {}x{} px cells for {} objects",
                    self.box_size.max, cw, ch, self.n_objects
                )));
            }
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        let n = self.n_objects.max(1) as f64;
        let cols = (n * self.frame_width / self.frame_height).sqrt().ceil().max(1.0) as usize;
        let rows = (n / cols as f64).ceil().max(1.0) as usize;
        (cols, rows)
    }

    fn cell_size(&self) -> (f64, f64) {
        let (cols, rows) = self.grid();
        (self.frame_width / cols as f64, self.frame_height / rows as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFrame {
    pub bbox: BoundingBox,
    pub distinctiveness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: FrameIndex,
    pub frames: Vec<SegmentFrame>,
}

impl Segment {
    pub fn end(&self) -> FrameIndex {
        self.start + self.frames.len() as u64 - 1
    }

    pub fn contains(&self, t: FrameIndex) -> bool {
        self.start <= t && t <= self.end()
    }

    /// The segment as a track, cut off after frame `until`.
    pub fn track_until(&self, until: FrameIndex) -> Option<ResponseTrack> {
        if until < self.start {
            return None;
        }
        let n = ((until - self.start + 1) as usize).min(self.frames.len());
        ResponseTrack::from_boxes(self.start, self.frames[..n].iter().map(|f| f.bbox)).ok()
    }

    pub fn track(&self) -> ResponseTrack {
        self.track_until(self.end()).expect("segments are non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: u64,
    pub appearance: Vec<f64>,
    pub distinctiveness: f64,
    pub segments: Vec<Segment>,
}

impl WorldObject {
    pub fn first_appearance(&self) -> Option<FrameIndex> {
        self.segments.first().map(|s| s.start)
    }

    /// The last visibility segment starting at or before `t`, clipped at `t`.
    pub fn last_track_until(&self, t: FrameIndex) -> Option<ResponseTrack> {
        self.segments.iter().rev().find(|s| s.start <= t)?.track_until(t)
    }

    pub fn segment_at(&self, t: FrameIndex) -> Option<(usize, &Segment)> {
        self.segments.iter().enumerate().find(|(_, s)| s.contains(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub objects: Vec<WorldObject>,
}

pub fn generate(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = config.stream_length;
    let (smin, smax) = (config.segments_per_object.min, config.segments_per_object.max);
    let (lmin, lmax) = (config.segment_length.min, config.segment_length.max);

    struct Plan {
        appearance: Vec<f64>,
        distinctiveness: f64,
        spans: Vec<(u64, u64)>,
    }

    let mut plans = Vec::with_capacity(config.n_objects);
    for _ in 0..config.n_objects {
        let appearance: Vec<f64> = (0..config.appearance_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let distinctiveness = config.distinctiveness.draw(&mut rng);
        let mut k = rng.random_range(smin..=smax);
        let mut lengths: Vec<u64> = (0..k).map(|_| rng.random_range(lmin..=lmax)).collect();
        let fits = |lengths: &[u64]| lengths.iter().sum::<u64>() + lengths.len() as u64 - 1 <= l;
        while !fits(&lengths) && k > smin {
            k -= 1;
            lengths.pop();
        }
        while !fits(&lengths) {
            let longest = lengths.iter_mut().max().expect("k >= 1");
            *longest -= 1;
        }
        let slack = l - (lengths.iter().sum::<u64>() + k - 1);
        let mut cuts: Vec<u64> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut spans = Vec::with_capacity(k as usize);
        let mut cursor = 0u64;
        let mut prev_cut = 0u64;
        for (j, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
            cursor += cut - prev_cut + u64::from(j > 0);
            prev_cut = cut;
            spans.push((cursor, len));
            cursor += len;
        }
        plans.push(Plan {
            appearance,
            distinctiveness,
            spans,
        });
    }

    // cell assignment: at most one active segment per object at a time, and
    // at least as many cells as objects, so a free cell always exists
    let (cols, rows) = config.grid();
    let (cw, ch) = config.cell_size();
    let mut order: Vec<(u64, usize, usize)> = plans
        .iter()
        .enumerate()
        .flat_map(|(o, p)| p.spans.iter().enumerate().map(move |(s, span)| (span.0, o, s)))
        .collect();
    order.sort_unstable();
    let mut busy_until: Vec<Option<u64>> = vec![None; cols * rows];
    let mut cell_of: Vec<Vec<usize>> = plans.iter().map(|p| vec![0; p.spans.len()]).collect();
    for &(start, o, s) in &order {
        let free: Vec<usize> = (0..busy_until.len())
            .filter(|&c| busy_until[c].is_none_or(|b| b < start))
            .collect();
        let cell = free[rng.random_range(0..free.len())];
        busy_until[cell] = Some(start + plans[o].spans[s].1 - 1);
        cell_of[o][s] = cell;
    }

    let motion = (config.motion_sigma > 0.0).then(|| Normal::new(0.0, config.motion_sigma).unwrap());
    let mut objects = Vec::with_capacity(plans.len());
    for (o, plan) in plans.into_iter().enumerate() {
        let mut segments = Vec::with_capacity(plan.spans.len());
        for (s, &(start, len)) in plan.spans.iter().enumerate() {
            let cell = cell_of[o][s];
            let (cx, cy) = ((cell % cols) as f64 * cw, (cell / cols) as f64 * ch);
            let w = config.box_size.draw(&mut rng);
            let h = config.box_size.draw(&mut rng);
            let (xmax, ymax) = (cx + cw - w, cy + ch - h);
            let mut x = rng.random_range(cx..=xmax);
            let mut y = rng.random_range(cy..=ymax);
            let mut frames = Vec::with_capacity(len as usize);
            for k in 0..len {
                if k > 0 {
                    if let Some(m) = &motion {
                        x = (x + m.sample(&mut rng)).clamp(cx, xmax);
                        y = (y + m.sample(&mut rng)).clamp(cy, ymax);
                    }
                }
                let jitter = if config.distinctiveness_jitter > 0.0 {
                    rng.random_range(-config.distinctiveness_jitter..=config.distinctiveness_jitter)
                } else {
                    0.0
                };
                frames.push(SegmentFrame {
                    bbox: BoundingBox::new(x, y, w, h)?,
                    distinctiveness: (plan.distinctiveness + jitter).clamp(0.0, 1.0),
                });
            }
            segments.push(Segment { start, frames });
        }
        objects.push(WorldObject {
            id: o as u64,
            appearance: plan.appearance,
            distinctiveness: plan.distinctiveness,
            segments,
        });
    }

    Ok(World {
        seed,
        config: config.clone(),
        objects,
    })
}

/// Shared per-frame access counter for a stream.
#[derive(Debug, Clone)]
pub struct AccessLog(Arc<Vec<AtomicU32>>);

impl AccessLog {
    pub fn counts(&self) -> Vec<u32> {
        self.0.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }
}

/// Forward-only stream of observations derived from a world.
pub struct WorldStream {
    t: FrameIndex,
    end: FrameIndex,
    visible: Vec<Vec<(usize, usize)>>,
    objects: Vec<(u64, Arc<[f64]>, Vec<Segment>)>,
    log: AccessLog,
}

impl Iterator for WorldStream {
    type Item = FrameObservation;

    fn next(&mut self) -> Option<FrameObservation> {
        if self.t >= self.end {
            return None;
        }
        let t = self.t;
        self.t += 1;
        self.log.0[t as usize].fetch_add(1, Ordering::Relaxed);
        let instances = self.visible[t as usize]
            .iter()
            .map(|&(o, s)| {
                let (gt_id, appearance, segments) = &self.objects[o];
                let seg = &segments[s];
                let f = &seg.frames[(t - seg.start) as usize];
                VisibleInstance {
                    gt_id: *gt_id,
                    bbox: f.bbox,
                    appearance: Arc::clone(appearance),
                    distinctiveness: f.distinctiveness,
                    segment: s,
                    segment_start: t == seg.start,
                }
            })
            .collect();
        Some(FrameObservation {
            t,
            instances,
            payload: frame_payload(t),
        })
    }
}

/// Simulated pixel descriptor for frame `t`.
pub fn frame_payload(t: FrameIndex) -> Vec<u8> {
    let mut out = b"frame:".to_vec();
    out.extend(t.to_le_bytes());
    out
}

impl World {
    pub fn stream_length(&self) -> u64 {
        self.config.stream_length
    }

    pub fn stream(&self) -> WorldStream {
        self.stream_prefix(self.stream_length())
    }

    /// Stream of the first `frames` frames.
    pub fn stream_prefix(&self, frames: u64) -> WorldStream {
        let len = self.stream_length();
        let end = frames.min(len);
        let mut visible = vec![Vec::new(); len as usize];
        for (o, obj) in self.objects.iter().enumerate() {
            for (s, seg) in obj.segments.iter().enumerate() {
                for t in seg.start..=seg.end().min(len.saturating_sub(1)) {
                    visible[t as usize].push((o, s));
                }
            }
        }
        for v in &mut visible {
            v.sort_by_key(|&(o, _)| self.objects[o].id);
        }
        WorldStream {
            t: 0,
            end,
            visible,
            objects: self
                .objects
                .iter()
                .map(|o| (o.id, Arc::from(o.appearance.as_slice()), o.segments.clone()))
                .collect(),
            log: AccessLog(Arc::new((0..len).map(|_| AtomicU32::new(0)).collect())),
        }
    }

    pub fn object(&self, gt_id: u64) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.id == gt_id)
    }

    /// Lists every violated world invariant; empty when sound.
    pub fn audit(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let (w, h) = (self.config.frame_width, self.config.frame_height);
        let mut ids = std::collections::BTreeSet::new();
        for obj in &self.objects {
            if !ids.insert(obj.id) {
                issues.push(format!("duplicate object id {}", obj.id));
            }
            if obj.appearance.len() != self.config.appearance_dim {
                issues.push(format!("object {}: appearance dimension {}", obj.id, obj.appearance.len()));
            }
            if obj.appearance.iter().all(|v| *v == 0.0) {
                issues.push(format!("object {}: zero appearance vector", obj.id));
            }
            for (k, seg) in obj.segments.iter().enumerate() {
                if seg.frames.is_empty() {
                    issues.push(format!("object {} segment {k}: empty", obj.id));
                    continue;
                }
                if seg.end() >= self.stream_length() {
                    issues.push(format!("object {} segment {k}: ends after the stream", obj.id));
                }
                if k > 0 && seg.start <= obj.segments[k - 1].end() + 1 {
                    issues.push(format!("object {} segment {k}: overlaps or touches previous", obj.id));
                }
                for (j, f) in seg.frames.iter().enumerate() {
                    if !f.bbox.within(w, h) {
                        issues.push(format!("object {} frame {}: box out of bounds", obj.id, seg.start + j as u64));
                    }
                    if !(0.0..=1.0).contains(&f.distinctiveness) {
                        issues.push(format!("object {} frame {}: distinctiveness out of range", obj.id, seg.start + j as u64));
                    }
                }
            }
        }
        issues
    }
}

/// Wraps a world stream so its access counts can be inspected afterwards.
pub fn audited_stream(world: &World) -> (WorldStream, AccessLog) {
    let stream = world.stream();
    let log = stream.log.clone();
    (stream, log)
}
