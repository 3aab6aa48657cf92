//! Core data model: per-frame instance observations, sequences, tracks and
//! lineage ground truth.
//!
//! Frame indices are 0-based everywhere. Instance ids are positive and unique
//! within a frame; track ids are positive and unique within a sequence.
//! Values are validated at construction where cheap; geometric consistency is
//! checked by [`validate_sequence`], which reports violations as data instead
//! of failing, so that imperfect inputs can still be inspected.

use std::collections::BTreeMap;

use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;

/// Relative slack for containment checks, absorbs rounding from text round-trips.
const BOX_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("frame {frame}: duplicate instance id {id}")]
    DuplicateInstanceId { frame: usize, id: u32 },
    #[error("frame {frame}: instance id 0 is reserved")]
    ZeroInstanceId { frame: usize },
}

/// One segmented cell instance in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceObservation {
    pub frame_index: usize,
    pub instance_id: u32,
    pub centroid: Vec3,
    pub bbox_min: Vec3,
    /// Axis-aligned box size; componentwise non-negative.
    pub bbox_extent: Vec3,
    /// Voxel-count volume. Equals `points.len()` when points are attached.
    pub volume: f64,
    /// Sampled interior points. May be empty when only summary features are
    /// available (e.g. a feature table without point clouds).
    pub points: Vec<Vec3>,
}

/// All instances of a single frame, keyed by instance id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameObservations {
    pub frame_index: usize,
    instances: BTreeMap<u32, InstanceObservation>,
}

impl FrameObservations {
    pub fn new(
        frame_index: usize,
        instances: Vec<InstanceObservation>,
    ) -> Result<Self, ModelError> {
        let mut map = BTreeMap::new();
        for obs in instances {
            if obs.instance_id == 0 {
                return Err(ModelError::ZeroInstanceId { frame: frame_index });
            }
            let id = obs.instance_id;
            if map.insert(id, obs).is_some() {
                return Err(ModelError::DuplicateInstanceId { frame: frame_index, id });
            }
        }
        Ok(Self { frame_index, instances: map })
    }

    pub fn empty(frame_index: usize) -> Self {
        Self { frame_index, instances: BTreeMap::new() }
    }

    pub fn get(&self, id: u32) -> Option<&InstanceObservation> {
        self.instances.get(&id)
    }

    /// Instances in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &InstanceObservation> {
        self.instances.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.instances.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// A time-ordered stack of frames with a fixed capture interval in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<FrameObservations>,
    pub frame_interval: f64,
}

impl Sequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// One trajectory: a contiguous run of frames with one centroid per frame.
///
/// `parent_id == 0` means no parent. A parented track starts on the frame
/// right after its parent ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u32,
    pub t_init: usize,
    pub t_fin: usize,
    pub centroids: Vec<Vec3>,
    pub parent_id: u32,
}

impl Track {
    pub fn duration(&self) -> usize {
        self.t_fin - self.t_init + 1
    }
}

/// A recorded division: `parent` ends at `frame - 1`, both children begin at
/// `frame`. `child_a` is the daughter designated as the association
/// continuation of the parent. The simulator creates it first, so there it
/// carries the smaller child id; the tracker's numbering follows assignment
/// order instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivisionEvent {
    pub parent: u32,
    pub child_a: u32,
    pub child_b: u32,
    pub frame: usize,
}

/// Reference lineage for a sequence: the full track forest plus its division
/// events.
///
/// Under the oracle-segmentation convention used throughout this crate, the
/// per-frame instance id of a ground-truth track equals its track id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthLineage {
    pub tracks: Vec<Track>,
    pub division_events: Vec<DivisionEvent>,
}

impl GroundTruthLineage {
    pub fn track(&self, id: u32) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == id)
    }
}

/// Checks geometric and structural invariants of a sequence. Returns one
/// human-readable description per violation; an empty list means the sequence
/// is consistent. Deterministic and order-stable.
pub fn validate_sequence(seq: &Sequence) -> Vec<String> {
    let mut out = Vec::new();
    for (pos, frame) in seq.frames.iter().enumerate() {
        if frame.frame_index != pos {
            out.push(format!(
                "frame at position {pos}: frame_index {} breaks contiguous 0-based ordering",
                frame.frame_index
            ));
        }
        for obs in frame.iter() {
            let tag = format!("frame {} instance {}", frame.frame_index, obs.instance_id);
            if obs.frame_index != frame.frame_index {
                out.push(format!(
                    "{tag}: instance frame_index {} differs from containing frame",
                    obs.frame_index
                ));
            }
            if obs.bbox_extent.iter().any(|&e| e < 0.0) {
                out.push(format!("{tag}: negative bbox extent"));
            }
            if !(obs.volume > 0.0) {
                out.push(format!("{tag}: volume {} is not positive", obs.volume));
            }
            if !inside_box(&obs.centroid, &obs.bbox_min, &obs.bbox_extent) {
                out.push(format!("{tag}: centroid lies outside its bounding box"));
            }
            let outside = obs
                .points
                .iter()
                .filter(|p| !inside_box(p, &obs.bbox_min, &obs.bbox_extent))
                .count();
            if outside > 0 {
                out.push(format!("{tag}: {outside} point(s) lie outside the bounding box"));
            }
            if !obs.points.is_empty() && obs.volume != obs.points.len() as f64 {
                out.push(format!(
                    "{tag}: volume {} does not equal point count {}",
                    obs.volume,
                    obs.points.len()
                ));
            }
        }
    }
    out
}

fn inside_box(p: &Vec3, min: &Vec3, extent: &Vec3) -> bool {
    (0..3).all(|k| {
        let slack = BOX_EPS * (1.0 + extent[k].abs());
        p[k] >= min[k] - slack && p[k] <= min[k] + extent[k] + slack
    })
}
