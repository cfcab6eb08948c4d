//! Online object memory for visual query localization in streaming video.
//!
//! A single pass over the stream populates an [`ObjectMemory`] with one
//! entry per discovered object. Queries are answered from the memory alone.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod memory;
pub mod metrics;
pub mod plot;
pub mod population;
pub mod relevance;
pub mod retrieval;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::{box_iou, temporal_iou, tube_iou, BoundingBox, FrameIndex, ResponseTrack, TimeInterval};
pub use memory::{DumpFormat, MemoryCosts, MemorySnapshot, ObjectId, ObjectMemory};
pub use metrics::{MetricsReport, QueryEvaluation};
pub use population::{OmpConfig, Population, PopulationReport, StepReport};
pub use relevance::{RelevanceLabeler, RelevanceStrategy};
pub use retrieval::{localize, CosineUnit, RetrievalResult};
