//! Boxes, frame intervals, response tracks and their overlap measures.
//!
//! Boxes are real-valued `[x, y, w, h]` in pixels with the origin at the
//! top-left corner. Frame intervals use inclusive endpoints, so `[t, t]`
//! spans one frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame index within a stream.
pub type FrameIndex = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoundingBox::new(raw.x, raw.y, raw.w, raw.h)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite origin ({x}, {y})")));
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(Error::InvalidBox(format!("non-positive extent {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        // (x + w) - x can round away from w.
        if self == other {
            return self.area();
        }
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Same extent moved by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// True when the box lies entirely inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeInterval {
    start: FrameIndex,
    end: FrameIndex,
}

impl TimeInterval {
    pub fn new(start: FrameIndex, end: FrameIndex) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidInterval { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> FrameIndex {
        self.start
    }

    pub fn end(&self) -> FrameIndex {
        self.end
    }

    /// Number of frames covered, endpoints included.
    pub fn len(&self) -> u64 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: FrameIndex) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Frame-count IoU of two inclusive intervals.
pub fn temporal_iou(a: &TimeInterval, b: &TimeInterval) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    if lo > hi {
        return 0.0;
    }
    let inter = hi - lo + 1;
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub t: FrameIndex,
    pub bbox: BoundingBox,
}

/// A contiguous, non-empty run of `(frame, box)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TrackEntry>", into = "Vec<TrackEntry>")]
pub struct ResponseTrack {
    entries: Vec<TrackEntry>,
}

impl TryFrom<Vec<TrackEntry>> for ResponseTrack {
    type Error = Error;

    fn try_from(entries: Vec<TrackEntry>) -> Result<Self> {
        ResponseTrack::new(entries)
    }
}

impl From<ResponseTrack> for Vec<TrackEntry> {
    fn from(track: ResponseTrack) -> Self {
        track.entries
    }
}

impl ResponseTrack {
    pub fn new(entries: Vec<TrackEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidTrack("empty track".into()));
        }
        for pair in entries.windows(2) {
            if pair[1].t != pair[0].t + 1 {
                return Err(Error::InvalidTrack(format!(
                    "frames {} and {} are not consecutive",
                    pair[0].t, pair[1].t
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Builds a track from consecutive frames starting at `start`.
    pub fn from_boxes(start: FrameIndex, boxes: impl IntoIterator<Item = BoundingBox>) -> Result<Self> {
        let entries = boxes
            .into_iter()
            .enumerate()
            .map(|(k, bbox)| TrackEntry {
                t: start + k as u64,
                bbox,
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[TrackEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn start(&self) -> FrameIndex {
        self.entries[0].t
    }

    pub fn end(&self) -> FrameIndex {
        self.entries[self.entries.len() - 1].t
    }

    pub fn interval(&self) -> TimeInterval {
        TimeInterval {
            start: self.start(),
            end: self.end(),
        }
    }

    pub fn box_at(&self, t: FrameIndex) -> Option<&BoundingBox> {
        if t < self.start() || t > self.end() {
            return None;
        }
        Some(&self.entries[(t - self.start()) as usize].bbox)
    }
}

/// Volume-style spatio-temporal IoU: summed per-frame intersections over
/// summed per-frame unions, across the union of both tracks' frames.
/// A frame covered by only one track adds that track's box area to the
/// denominator.
pub fn tube_iou(a: &ResponseTrack, b: &ResponseTrack) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    let (ea, eb) = (a.entries(), b.entries());
    let (mut i, mut j) = (0, 0);
    while i < ea.len() || j < eb.len() {
        match (ea.get(i), eb.get(j)) {
            (Some(x), Some(y)) if x.t == y.t => {
                let overlap = x.bbox.intersection_area(&y.bbox);
                inter += overlap;
                union += x.bbox.area() + y.bbox.area() - overlap;
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x.t < y.t => {
                union += x.bbox.area();
                i += 1;
            }
            (Some(_), Some(y)) => {
                union += y.bbox.area();
                j += 1;
            }
            (Some(x), None) => {
                union += x.bbox.area();
                i += 1;
            }
            (None, Some(y)) => {
                union += y.bbox.area();
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
