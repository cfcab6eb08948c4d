//! The object memory: per-object record histories over a refcounted store
//! of frame payloads, plus separately stored retrieval patches.
//!
//! Frames are keyed by frame index and shared between every record that
//! points at them. When an object's history breaks (a gap of more than one
//! frame), the frames referenced by its previous segment are released; box
//! records always survive, with `frame_ref` cleared. Patches belong to a
//! single record and exist exactly while that record is labeled relevant.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameIndex, ResponseTrack, TrackEntry};
use crate::relevance::{RelevanceLabeler, RelevanceState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Synthetic byte costs used for size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryCosts {
    pub frame_bytes: u64,
    pub patch_bytes: u64,
    pub record_meta_bytes: u64,
}

impl Default for MemoryCosts {
    fn default() -> Self {
        Self {
            frame_bytes: 1_185_000,
            patch_bytes: 30_000,
            record_meta_bytes: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    FullFrame,
    Patch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePayload {
    pub t: FrameIndex,
    pub kind: PayloadKind,
    pub byte_size: u64,
    #[serde(with = "hex_bytes")]
    pub content: Vec<u8>,
}

impl FramePayload {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.content))
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&hex::encode(bytes))
        } else {
            s.serialize_bytes(bytes)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        if d.is_human_readable() {
            let s = String::deserialize(d)?;
            hex::decode(s).map_err(serde::de::Error::custom)
        } else {
            Vec::<u8>::deserialize(d)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchKey {
    pub object: ObjectId,
    pub t: FrameIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub t: FrameIndex,
    pub bbox: BoundingBox,
    /// Tracker or detector confidence that produced this record.
    pub confidence: f64,
    /// Cleared once the frame is released by a break.
    pub frame_ref: Option<FrameIndex>,
    pub patch_ref: Option<PatchKey>,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: ObjectId,
    pub records: Vec<ObjectRecord>,
    pub discovery_t: FrameIndex,
    pub max_confidence: f64,
    pub relevance: RelevanceState,
}

impl ObjectEntry {
    pub fn last(&self) -> &ObjectRecord {
        self.records.last().expect("entries always hold a record")
    }

    /// Index of the first record in the latest contiguous segment.
    pub fn latest_segment_start(&self) -> usize {
        let mut start = self.records.len() - 1;
        while start > 0 && self.records[start - 1].t + 1 == self.records[start].t {
            start -= 1;
        }
        start
    }

    pub fn latest_segment(&self) -> ResponseTrack {
        let entries = self.records[self.latest_segment_start()..]
            .iter()
            .map(|r| TrackEntry { t: r.t, bbox: r.bbox })
            .collect();
        ResponseTrack::new(entries).expect("latest segment is contiguous and non-empty")
    }

    pub fn relevant_records(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.records.iter().filter(|r| r.relevant)
    }

    fn record_mut(&mut self, t: FrameIndex) -> Option<&mut ObjectRecord> {
        self.records
            .binary_search_by_key(&t, |r| r.t)
            .ok()
            .map(|i| &mut self.records[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StoredFrame {
    payload: FramePayload,
    digest: String,
    refcount: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteTarget {
    Fresh,
    Existing(ObjectId),
}

/// Record fields supplied by a writer; payload costs are applied by the memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordDraft {
    pub t: FrameIndex,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub frame_content: Vec<u8>,
    pub patch_content: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteOutcome {
    pub object_id: ObjectId,
    pub created_new_object: bool,
    pub break_detected: bool,
    pub frames_deleted: usize,
    pub bytes_freed: u64,
}

/// Last known state of an object, handed to trackers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedObject {
    pub id: ObjectId,
    pub last_t: FrameIndex,
    pub last_bbox: BoundingBox,
    pub discovery_t: FrameIndex,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeAccounting {
    pub frame_bytes: u64,
    pub patch_bytes: u64,
    pub records: u64,
    pub stored_frames: u64,
    pub stored_patches: u64,
    pub total_bytes: u64,
}

/// Findings of [`ObjectMemory::audit`]; all zero for a sound memory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub refcount_discrepancies: usize,
    pub orphan_frames: usize,
    pub dangling_frame_refs: usize,
    /// Frame references held by records outside their object's latest segment.
    pub stale_frame_refs: usize,
    pub relevance_violations: usize,
    pub ordering_violations: usize,
    pub id_violations: usize,
    pub size_mismatch: bool,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        *self == AuditReport::default()
    }
}

#[derive(Debug, Clone)]
pub struct ObjectMemory {
    costs: MemoryCosts,
    entries: BTreeMap<ObjectId, ObjectEntry>,
    frames: BTreeMap<FrameIndex, StoredFrame>,
    patches: BTreeMap<PatchKey, FramePayload>,
    next_id: u64,
    records: u64,
    frame_bytes: u64,
    patch_bytes: u64,
    over_budget: bool,
}

impl Default for ObjectMemory {
    fn default() -> Self {
        Self::new(MemoryCosts::default())
    }
}

impl ObjectMemory {
    pub fn new(costs: MemoryCosts) -> Self {
        Self {
            costs,
            entries: BTreeMap::new(),
            frames: BTreeMap::new(),
            patches: BTreeMap::new(),
            next_id: 0,
            records: 0,
            frame_bytes: 0,
            patch_bytes: 0,
            over_budget: false,
        }
    }

    pub fn costs(&self) -> MemoryCosts {
        self.costs
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_id(&self) -> ObjectId {
        ObjectId(self.next_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.entries.values()
    }

    pub fn object_ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.entries.keys().copied()
    }

    /// Set when the last budget prune had to keep a lone object above the cap.
    pub fn over_budget_warning(&self) -> bool {
        self.over_budget
    }

    pub fn patch(&self, key: &PatchKey) -> Option<&FramePayload> {
        self.patches.get(key)
    }

    pub fn frame(&self, t: FrameIndex) -> Option<&FramePayload> {
        self.frames.get(&t).map(|f| &f.payload)
    }

    pub fn frame_refcount(&self, t: FrameIndex) -> u32 {
        self.frames.get(&t).map_or(0, |f| f.refcount)
    }

    pub fn stored_frames(&self) -> impl Iterator<Item = FrameIndex> + '_ {
        self.frames.keys().copied()
    }

    pub fn read_object(&self, id: ObjectId) -> Result<&ObjectEntry> {
        self.entries.get(&id).ok_or(Error::UnknownObject(id))
    }

    /// Records stamped exactly `t`, across all objects, in id order.
    pub fn read_time(&self, t: FrameIndex) -> Vec<(ObjectId, &ObjectRecord)> {
        self.entries
            .values()
            .filter_map(|e| {
                e.records
                    .binary_search_by_key(&t, |r| r.t)
                    .ok()
                    .map(|i| (e.id, &e.records[i]))
            })
            .collect()
    }

    pub fn latest_segment(&self, id: ObjectId) -> Result<ResponseTrack> {
        Ok(self.read_object(id)?.latest_segment())
    }

    pub fn tracking_context(&self) -> Vec<TrackedObject> {
        self.entries
            .values()
            .map(|e| {
                let last = e.last();
                TrackedObject {
                    id: e.id,
                    last_t: last.t,
                    last_bbox: last.bbox,
                    discovery_t: e.discovery_t,
                }
            })
            .collect()
    }

    pub fn size_bytes(&self) -> u64 {
        self.frame_bytes + self.patch_bytes + self.records * self.costs.record_meta_bytes
    }

    pub fn size_accounting(&self) -> SizeAccounting {
        SizeAccounting {
            frame_bytes: self.frame_bytes,
            patch_bytes: self.patch_bytes,
            records: self.records,
            stored_frames: self.frames.len() as u64,
            stored_patches: self.patches.len() as u64,
            total_bytes: self.size_bytes(),
        }
    }

    pub fn write(
        &mut self,
        target: WriteTarget,
        draft: RecordDraft,
        labeler: &RelevanceLabeler,
    ) -> Result<WriteOutcome> {
        let (id, created) = match target {
            WriteTarget::Fresh => {
                let id = ObjectId(self.next_id);
                self.next_id += 1;
                self.entries.insert(
                    id,
                    ObjectEntry {
                        id,
                        records: Vec::new(),
                        discovery_t: draft.t,
                        max_confidence: draft.confidence,
                        relevance: RelevanceState::default(),
                    },
                );
                (id, true)
            }
            WriteTarget::Existing(id) => {
                let entry = self.entries.get(&id).ok_or(Error::UnknownObject(id))?;
                let last_t = entry.last().t;
                if draft.t <= last_t {
                    return Err(Error::Ordering {
                        got: draft.t,
                        expected: format!("> {last_t} for object {id}"),
                    });
                }
                (id, false)
            }
        };

        let Self {
            costs,
            entries,
            frames,
            patches,
            frame_bytes,
            patch_bytes,
            records,
            ..
        } = self;
        let entry = entries.get_mut(&id).expect("entry resolved above");

        let mut outcome = WriteOutcome {
            object_id: id,
            created_new_object: created,
            break_detected: false,
            frames_deleted: 0,
            bytes_freed: 0,
        };

        if !created && draft.t - entry.last().t > 1 {
            outcome.break_detected = true;
            let start = entry.latest_segment_start();
            for rec in &mut entry.records[start..] {
                if let Some(ft) = rec.frame_ref.take() {
                    if let Some(freed) = release_frame(frames, ft) {
                        *frame_bytes -= freed;
                        outcome.frames_deleted += 1;
                        outcome.bytes_freed += freed;
                    }
                }
            }
            let released =
                labeler.finalize_segment(&mut entry.relevance, &entry.records[start..], entry.discovery_t);
            for t in released {
                outcome.bytes_freed += drop_patch(entry, patches, patch_bytes, t);
            }
        }

        let decision = labeler.label_on_write(
            &mut entry.relevance,
            &draft.patch_content,
            draft.t,
            created,
            entry.discovery_t,
        );
        if let Some(t) = decision.demote {
            outcome.bytes_freed += drop_patch(entry, patches, patch_bytes, t);
        }

        let slot = frames.entry(draft.t).or_insert_with(|| {
            let payload = FramePayload {
                t: draft.t,
                kind: PayloadKind::FullFrame,
                byte_size: costs.frame_bytes,
                content: draft.frame_content,
            };
            *frame_bytes += payload.byte_size;
            StoredFrame {
                digest: payload.digest(),
                payload,
                refcount: 0,
            }
        });
        slot.refcount += 1;

        let patch_ref = decision.relevant.then(|| {
            let key = PatchKey {
                object: id,
                t: draft.t,
            };
            patches.insert(
                key,
                FramePayload {
                    t: draft.t,
                    kind: PayloadKind::Patch,
                    byte_size: costs.patch_bytes,
                    content: draft.patch_content,
                },
            );
            *patch_bytes += costs.patch_bytes;
            key
        });

        entry.max_confidence = entry.max_confidence.max(draft.confidence);
        entry.records.push(ObjectRecord {
            t: draft.t,
            bbox: draft.bbox,
            confidence: draft.confidence,
            frame_ref: Some(draft.t),
            patch_ref,
            relevant: decision.relevant,
        });
        *records += 1;
        Ok(outcome)
    }

    /// Evicts whole objects, lowest peak confidence first and oldest first
    /// among ties, until the memory fits `cap`. A lone remaining object that
    /// still exceeds the cap is kept and the warning flag is raised.
    pub fn prune_to_budget(&mut self, cap: u64) -> Vec<ObjectId> {
        self.over_budget = false;
        if self.size_bytes() <= cap {
            return Vec::new();
        }
        let mut order: Vec<_> = self
            .entries
            .values()
            .map(|e| (e.max_confidence, e.discovery_t, e.id))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut evicted = Vec::new();
        for (_, _, id) in order {
            if self.size_bytes() <= cap {
                break;
            }
            if self.entries.len() == 1 {
                self.over_budget = true;
                break;
            }
            self.evict(id);
            evicted.push(id);
        }
        evicted
    }

    fn evict(&mut self, id: ObjectId) {
        let Some(entry) = self.entries.remove(&id) else {
            return;
        };
        for rec in &entry.records {
            if let Some(ft) = rec.frame_ref {
                if let Some(freed) = release_frame(&mut self.frames, ft) {
                    self.frame_bytes -= freed;
                }
            }
            if let Some(key) = rec.patch_ref {
                if let Some(p) = self.patches.remove(&key) {
                    self.patch_bytes -= p.byte_size;
                }
            }
        }
        self.records -= entry.records.len() as u64;
    }

    /// Immutable view for retrieval; later writes to `self` are not visible.
    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot(Arc::new(self.clone()))
    }

    /// Full consistency check of refcounts, frame coverage, relevance and
    /// size bookkeeping.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let mut live: BTreeMap<FrameIndex, u32> = BTreeMap::new();
        let mut frame_bytes = 0;
        let mut patch_bytes = 0;
        let mut records = 0u64;

        for (id, entry) in &self.entries {
            if *id != entry.id || id.0 >= self.next_id {
                report.id_violations += 1;
            }
            if entry.records.first().map(|r| r.t) != Some(entry.discovery_t) {
                report.ordering_violations += 1;
            }
            if entry.records.windows(2).any(|w| w[0].t >= w[1].t) {
                report.ordering_violations += 1;
            }
            if entry.records.is_empty() {
                continue;
            }
            records += entry.records.len() as u64;
            let start = entry.latest_segment_start();
            for (k, rec) in entry.records.iter().enumerate() {
                if let Some(ft) = rec.frame_ref {
                    *live.entry(ft).or_default() += 1;
                    if ft != rec.t {
                        report.dangling_frame_refs += 1;
                    }
                    if k < start {
                        report.stale_frame_refs += 1;
                    }
                }
                match (rec.relevant, rec.patch_ref) {
                    (true, Some(key)) => match self.patches.get(&key) {
                        Some(p) if key.object == *id && key.t == rec.t => patch_bytes += p.byte_size,
                        _ => report.relevance_violations += 1,
                    },
                    (false, None) => {}
                    _ => report.relevance_violations += 1,
                }
            }
        }
        let referenced_patches = self
            .entries
            .values()
            .flat_map(|e| e.records.iter().filter_map(|r| r.patch_ref))
            .count();
        if referenced_patches != self.patches.len() {
            report.relevance_violations += self.patches.len().abs_diff(referenced_patches);
        }

        for (t, stored) in &self.frames {
            frame_bytes += stored.payload.byte_size;
            if stored.refcount == 0 {
                report.orphan_frames += 1;
            }
            if live.get(t).copied().unwrap_or(0) != stored.refcount {
                report.refcount_discrepancies += 1;
            }
        }
        report.dangling_frame_refs += live.keys().filter(|t| !self.frames.contains_key(t)).count();

        report.size_mismatch = frame_bytes != self.frame_bytes
            || patch_bytes != self.patch_bytes
            || records != self.records;
        report
    }

    pub fn to_dump(&self) -> MemoryDump {
        MemoryDump {
            version: MemoryDump::VERSION,
            costs: self.costs,
            next_id: self.next_id,
            over_budget: self.over_budget,
            entries: self.entries.values().cloned().collect(),
            frames: self
                .frames
                .values()
                .map(|f| FrameDigest {
                    t: f.payload.t,
                    kind: f.payload.kind,
                    byte_size: f.payload.byte_size,
                    refcount: f.refcount,
                    digest: f.digest.clone(),
                })
                .collect(),
            patches: self
                .patches
                .iter()
                .map(|(key, payload)| StoredPatch {
                    key: *key,
                    payload: payload.clone(),
                })
                .collect(),
            size: self.size_accounting(),
        }
    }

    /// Rebuilds a memory from a dump. Frame pixel content is not part of a
    /// dump; restored frames keep their digest and byte size only.
    pub fn from_dump(dump: MemoryDump) -> Result<Self> {
        if dump.version != MemoryDump::VERSION {
            return Err(Error::Serialization(format!(
                "unsupported memory dump version {}",
                dump.version
            )));
        }
        let mut memory = ObjectMemory::new(dump.costs);
        memory.next_id = dump.next_id;
        memory.over_budget = dump.over_budget;
        for entry in dump.entries {
            memory.records += entry.records.len() as u64;
            memory.entries.insert(entry.id, entry);
        }
        for f in dump.frames {
            memory.frame_bytes += f.byte_size;
            memory.frames.insert(
                f.t,
                StoredFrame {
                    payload: FramePayload {
                        t: f.t,
                        kind: f.kind,
                        byte_size: f.byte_size,
                        content: Vec::new(),
                    },
                    digest: f.digest,
                    refcount: f.refcount,
                },
            );
        }
        for p in dump.patches {
            memory.patch_bytes += p.payload.byte_size;
            memory.patches.insert(p.key, p.payload);
        }
        if memory.size_accounting() != dump.size {
            return Err(Error::Audit("size accounting in dump does not match its contents".into()));
        }
        Ok(memory)
    }

    pub fn encode(&self, format: DumpFormat) -> Result<Vec<u8>> {
        let dump = self.to_dump();
        match format {
            DumpFormat::Json => Ok(serde_json::to_vec_pretty(&dump)?),
            DumpFormat::Binary => {
                let mut out = DUMP_MAGIC.to_vec();
                out.extend(bincode::serialize(&dump)?);
                Ok(out)
            }
        }
    }

    /// Decodes either dump format, detected from the leading bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let dump: MemoryDump = match bytes.strip_prefix(DUMP_MAGIC) {
            Some(body) => bincode::deserialize(body)?,
            None => serde_json::from_slice(bytes)?,
        };
        Self::from_dump(dump)
    }
}

fn release_frame(frames: &mut BTreeMap<FrameIndex, StoredFrame>, t: FrameIndex) -> Option<u64> {
    let stored = frames.get_mut(&t)?;
    stored.refcount -= 1;
    if stored.refcount == 0 {
        frames.remove(&t).map(|f| f.payload.byte_size)
    } else {
        None
    }
}

fn drop_patch(
    entry: &mut ObjectEntry,
    patches: &mut BTreeMap<PatchKey, FramePayload>,
    patch_bytes: &mut u64,
    t: FrameIndex,
) -> u64 {
    let Some(rec) = entry.record_mut(t) else {
        return 0;
    };
    rec.relevant = false;
    match rec.patch_ref.take().and_then(|key| patches.remove(&key)) {
        Some(p) => {
            *patch_bytes -= p.byte_size;
            p.byte_size
        }
        None => 0,
    }
}

const DUMP_MAGIC: &[u8] = b"OBJMEM\x00\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DumpFormat {
    #[default]
    Json,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDigest {
    pub t: FrameIndex,
    pub kind: PayloadKind,
    pub byte_size: u64,
    pub refcount: u32,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDump {
    pub version: u32,
    pub costs: MemoryCosts,
    pub next_id: u64,
    pub over_budget: bool,
    pub entries: Vec<ObjectEntry>,
    pub frames: Vec<FrameDigest>,
    pub patches: Vec<StoredPatch>,
    pub size: SizeAccounting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPatch {
    pub key: PatchKey,
    pub payload: FramePayload,
}

impl MemoryDump {
    pub const VERSION: u32 = 1;
}

/// Shared read-only view of a memory at one instant.
#[derive(Debug, Clone)]
pub struct MemorySnapshot(Arc<ObjectMemory>);

impl Deref for MemorySnapshot {
    type Target = ObjectMemory;

    fn deref(&self) -> &ObjectMemory {
        &self.0
    }
}
