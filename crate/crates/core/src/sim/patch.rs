//! Simulated pixels: a patch is a distinctiveness score plus an appearance
//! sample, serialized to bytes so it can sit in the memory as an opaque
//! payload.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, BoundingBox};
use crate::population::{FrameObservation, PatchExtractor};
use crate::retrieval::{Embedder, FeatureVector};

const TAG: u8 = b'P';

#[derive(Debug, Clone, PartialEq)]
pub struct SimPatch {
    pub distinctiveness: f64,
    pub features: Vec<f64>,
}

impl SimPatch {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.features.len());
        out.push(TAG);
        out.extend(self.distinctiveness.to_le_bytes());
        out.extend((self.features.len() as u32).to_le_bytes());
        for v in &self.features {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Input("malformed patch payload".into());
        let (&tag, rest) = bytes.split_first().ok_or_else(bad)?;
        if tag != TAG || rest.len() < 12 {
            return Err(bad());
        }
        let distinctiveness = f64::from_le_bytes(rest[..8].try_into().unwrap());
        let n = u32::from_le_bytes(rest[8..12].try_into().unwrap()) as usize;
        let body = &rest[12..];
        if body.len() != 8 * n {
            return Err(bad());
        }
        let features = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            distinctiveness,
            features,
        })
    }
}

/// splitmix64 finalizer, used to derive independent sub-seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

/// `base + N(0, sigma)` elementwise; returns `base` unchanged when `sigma == 0`.
pub fn perturb(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated non-negative");
    base.iter().map(|v| v + normal.sample(rng)).collect()
}

/// Boxes overlapping an instance at least this much show all of it.
pub const FULL_VIEW_IOU: f64 = 0.5;

/// Extracts the appearance of the best-overlapping visible instance. Below
/// [`FULL_VIEW_IOU`] the sample is blended with background clutter with
/// weight `iou / FULL_VIEW_IOU`, and its distinctiveness scales the same way.
/// A box covering nothing yields pure background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimPatchExtractor {
    pub noise_sigma: f64,
    pub seed: u64,
    pub dim: usize,
}

impl SimPatchExtractor {
    fn background(&self, t: u64, bbox: &BoundingBox) -> Vec<f64> {
        let key = [t, bbox.x().to_bits(), bbox.y().to_bits(), bbox.w().to_bits(), u64::MAX];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &key));
        perturb(&vec![0.0; self.dim], 1.0, &mut rng)
    }
}

impl PatchExtractor for SimPatchExtractor {
    fn extract(&self, frame: &FrameObservation, bbox: &BoundingBox) -> Vec<u8> {
        let best = frame
            .instances
            .iter()
            .map(|i| (box_iou(&i.bbox, bbox), i))
            .filter(|(iou, _)| *iou > 0.0)
            .fold(None, |acc: Option<(f64, _)>, (iou, i)| match acc {
                Some((b, _)) if b >= iou => acc,
                _ => Some((iou, i)),
            });
        let patch = match best {
            Some((iou, inst)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[frame.t, inst.gt_id]));
                let mut features = perturb(&inst.appearance, self.noise_sigma, &mut rng);
                let weight = (iou / FULL_VIEW_IOU).min(1.0);
                if weight < 1.0 {
                    let clutter = self.background(frame.t, bbox);
                    for (f, c) in features.iter_mut().zip(clutter) {
                        *f = weight * *f + (1.0 - weight) * c;
                    }
                }
                SimPatch {
                    distinctiveness: inst.distinctiveness * weight,
                    features,
                }
            }
            None => SimPatch {
                distinctiveness: 0.0,
                features: self.background(frame.t, bbox),
            },
        };
        patch.encode()
    }
}

/// Reads the appearance sample straight out of a simulated patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEmbedder {
    pub dim: usize,
}

impl Embedder for SimEmbedder {
    fn embed(&self, content: &[u8]) -> Result<FeatureVector> {
        let patch = SimPatch::decode(content)?;
        if patch.features.len() != self.dim {
            return Err(Error::Input(format!(
                "feature dimension {} does not match embedder dimension {}",
                patch.features.len(),
                self.dim
            )));
        }
        FeatureVector::new(patch.features)
    }
}
