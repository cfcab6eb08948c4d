//! Relevance labels `c` and the patch-retention strategies.
//!
//! | strategy  | discovery patch | latest segment                           |
//! |-----------|-----------------|------------------------------------------|
//! | `mr1star` | kept            | first and last assessor-valid patches    |
//! | `mr2`     | kept            | every assessor-valid patch               |
//! | `mr3`     | kept            | nothing                                  |
//! | `mr4`     | not protected   | first and last assessor-valid patches    |
//! | `none`    | kept            | every patch (assessor bypassed)          |
//!
//! Labels are maintained online: under `mr1star`/`mr4` the "last valid"
//! pointer moves on every newer valid patch and the previous holder is
//! demoted, so at any instant the labels match the static definition
//! applied to the segment seen so far.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::FrameIndex;
use crate::memory::ObjectRecord;
use crate::sim::patch::SimPatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceStrategy {
    #[default]
    Mr1Star,
    Mr2,
    Mr3,
    Mr4,
    None,
}

impl RelevanceStrategy {
    pub const ALL: [RelevanceStrategy; 5] = [
        RelevanceStrategy::Mr1Star,
        RelevanceStrategy::Mr2,
        RelevanceStrategy::Mr3,
        RelevanceStrategy::Mr4,
        RelevanceStrategy::None,
    ];

    fn keeps_discovery(self) -> bool {
        !matches!(self, RelevanceStrategy::Mr4)
    }
}

impl fmt::Display for RelevanceStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RelevanceStrategy::Mr1Star => "mr1star",
            RelevanceStrategy::Mr2 => "mr2",
            RelevanceStrategy::Mr3 => "mr3",
            RelevanceStrategy::Mr4 => "mr4",
            RelevanceStrategy::None => "none",
        };
        f.write_str(name)
    }
}

impl FromStr for RelevanceStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mr1star" | "mr1*" | "mr1" => Ok(RelevanceStrategy::Mr1Star),
            "mr2" => Ok(RelevanceStrategy::Mr2),
            "mr3" => Ok(RelevanceStrategy::Mr3),
            "mr4" => Ok(RelevanceStrategy::Mr4),
            "none" => Ok(RelevanceStrategy::None),
            other => Err(Error::Config(format!("unknown relevance strategy {other:?}"))),
        }
    }
}

/// Decides whether a patch is distinctive enough to take part in retrieval.
pub trait PatchQualityAssessor: Send + Sync {
    fn assess(&self, patch: &[u8]) -> bool;
}

/// Stand-in for a trained patch classifier: a patch is suitable iff its
/// distinctiveness is at least `threshold`.
pub fn simulated_assessor(distinctiveness: f64, threshold: f64) -> bool {
    distinctiveness >= threshold
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistinctivenessAssessor {
    pub threshold: f64,
}

impl Default for DistinctivenessAssessor {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl PatchQualityAssessor for DistinctivenessAssessor {
    fn assess(&self, patch: &[u8]) -> bool {
        SimPatch::decode(patch)
            .map(|p| simulated_assessor(p.distinctiveness, self.threshold))
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysSuitable;

impl PatchQualityAssessor for AlwaysSuitable {
    fn assess(&self, _patch: &[u8]) -> bool {
        true
    }
}

/// Per-object pointers into the active segment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceState {
    pub segment_first_valid: Option<FrameIndex>,
    pub segment_last_valid: Option<FrameIndex>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelDecision {
    pub relevant: bool,
    /// Earlier record of the same object whose label drops to 0.
    pub demote: Option<FrameIndex>,
}

#[derive(Clone)]
pub struct RelevanceLabeler {
    strategy: RelevanceStrategy,
    assessor: Arc<dyn PatchQualityAssessor>,
}

impl fmt::Debug for RelevanceLabeler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelevanceLabeler")
            .field("strategy", &self.strategy)
            .finish_non_exhaustive()
    }
}

impl RelevanceLabeler {
    pub fn new(strategy: RelevanceStrategy, assessor: Arc<dyn PatchQualityAssessor>) -> Self {
        Self { strategy, assessor }
    }

    pub fn strategy(&self) -> RelevanceStrategy {
        self.strategy
    }

    fn is_valid(&self, patch: &[u8]) -> bool {
        match self.strategy {
            RelevanceStrategy::None => true,
            _ => self.assessor.assess(patch),
        }
    }

    /// Labels the record being written at `t` and updates the object's
    /// segment pointers.
    pub fn label_on_write(
        &self,
        state: &mut RelevanceState,
        patch: &[u8],
        t: FrameIndex,
        is_discovery: bool,
        discovery_t: FrameIndex,
    ) -> LabelDecision {
        let keep = LabelDecision {
            relevant: true,
            demote: None,
        };
        let drop = LabelDecision {
            relevant: false,
            demote: None,
        };
        match self.strategy {
            RelevanceStrategy::Mr3 => {
                if is_discovery {
                    keep
                } else {
                    drop
                }
            }
            RelevanceStrategy::Mr2 | RelevanceStrategy::None => {
                if is_discovery || self.is_valid(patch) {
                    keep
                } else {
                    drop
                }
            }
            RelevanceStrategy::Mr1Star | RelevanceStrategy::Mr4 => {
                let protected = is_discovery && self.strategy.keeps_discovery();
                if !self.is_valid(patch) {
                    return LabelDecision {
                        relevant: protected,
                        demote: None,
                    };
                }
                if state.segment_first_valid.is_none() {
                    state.segment_first_valid = Some(t);
                    return keep;
                }
                let demote = state
                    .segment_last_valid
                    .replace(t)
                    .filter(|&prev| !(prev == discovery_t && self.strategy.keeps_discovery()));
                LabelDecision {
                    relevant: true,
                    demote,
                }
            }
        }
    }

    /// Called when a break closes a segment. Returns the timestamps in
    /// `closed` whose patches must be released, and resets the segment
    /// pointers.
    pub fn finalize_segment(
        &self,
        state: &mut RelevanceState,
        closed: &[ObjectRecord],
        discovery_t: FrameIndex,
    ) -> Vec<FrameIndex> {
        *state = RelevanceState::default();
        closed
            .iter()
            .filter(|r| r.relevant)
            .filter(|r| !(r.t == discovery_t && self.strategy.keeps_discovery()))
            .map(|r| r.t)
            .collect()
    }
}
