//! Per-instance geometric features and short temporal context windows.
//!
//! Each instance contributes a 9-vector: centroid, box corner, box size.
//! For association, a source's last `r + 1` feature vectors are concatenated
//! with one candidate target's vector into a single flat window of
//! `9 * (r + 2)` values; sources younger than `r + 1` frames replicate their
//! earliest known vector to fill the window.

use std::collections::BTreeMap;

use crate::model::{FrameObservations, InstanceObservation, Vec3};

pub const FEATURE_WIDTH: usize = 9;

/// Geometric summary of one instance: `[cx, cy, cz, bx, by, bz, ex, ey, ez]`
/// (centroid, bbox corner, bbox extent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector9(pub [f64; FEATURE_WIDTH]);

impl FeatureVector9 {
    pub fn centroid(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }
}

pub fn instance_feature(obs: &InstanceObservation) -> FeatureVector9 {
    FeatureVector9([
        obs.centroid.x,
        obs.centroid.y,
        obs.centroid.z,
        obs.bbox_min.x,
        obs.bbox_min.y,
        obs.bbox_min.z,
        obs.bbox_extent.x,
        obs.bbox_extent.y,
        obs.bbox_extent.z,
    ])
}

/// Flat association window: `r + 1` source vectors (oldest first, ending at
/// the current frame) followed by one candidate target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatiotemporalFeature {
    values: Vec<f64>,
    history_depth: usize,
}

impl SpatiotemporalFeature {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn history_depth(&self) -> usize {
        self.history_depth
    }

    fn block(&self, i: usize) -> &[f64] {
        &self.values[i * FEATURE_WIDTH..(i + 1) * FEATURE_WIDTH]
    }

    /// Source feature at the current frame.
    pub fn source_now(&self) -> &[f64] {
        self.block(self.history_depth)
    }

    /// Source feature one frame back; equals `source_now` when `r == 0` or
    /// the window was padded, which encodes "no observed motion".
    pub fn source_prev(&self) -> &[f64] {
        self.block(self.history_depth.saturating_sub(1))
    }

    pub fn target(&self) -> &[f64] {
        self.block(self.history_depth + 1)
    }

    /// Expected value count for a given history depth.
    pub fn width_for(history_depth: usize) -> usize {
        FEATURE_WIDTH * (history_depth + 2)
    }
}

/// Concatenates the last `r + 1` entries of a source's feature chain with a
/// candidate target feature. `chain` must end at the current frame; when it
/// holds fewer than `r + 1` entries the earliest entry is replicated on the
/// left. Panics if `chain` is empty.
pub fn build_history(
    chain: &[FeatureVector9],
    candidate: &FeatureVector9,
    r: usize,
) -> SpatiotemporalFeature {
    assert!(!chain.is_empty(), "source feature chain must not be empty");
    let mut values = Vec::with_capacity(SpatiotemporalFeature::width_for(r));
    for slot in 0..=r {
        // slot 0 is the oldest entry (t - r), slot r the current frame; a
        // chain shorter than the window saturates onto its first entry.
        let back = r - slot;
        let idx = chain.len().saturating_sub(1 + back);
        values.extend_from_slice(&chain[idx].0);
    }
    values.extend_from_slice(&candidate.0);
    SpatiotemporalFeature { values, history_depth: r }
}

/// How a source's position is projected into the next frame before the
/// nearest-neighbour candidate search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// Search around the source's current centroid.
    #[default]
    ConstantPosition,
    /// Add the previous frame-to-frame displacement when one is known; falls
    /// back to the current centroid otherwise.
    ConstantVelocity,
}

/// One candidate link with its assembled feature window. `score` stays unset
/// until a scorer fills it in.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateAssociation {
    pub source_id: u32,
    pub target_id: u32,
    pub feature: SpatiotemporalFeature,
    pub score: Option<f64>,
}

/// Generates up to `n_candidates` nearest-neighbour candidates per source,
/// measured from the projected source location to target centroids.
/// Candidates per source are ordered by ascending distance with ties toward
/// the smaller target id; the overall output is sorted by (source id, rank).
///
/// `displacements` holds each source's last frame-to-frame centroid motion
/// (used only by [`ProjectionMode::ConstantVelocity`]); `chains` holds each
/// source's feature history ending at the current frame. A source missing
/// from `chains` falls back to its own current feature as a length-1 chain.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    frame_t: &FrameObservations,
    frame_t1: &FrameObservations,
    n_candidates: usize,
    projection: ProjectionMode,
    displacements: &BTreeMap<u32, Vec3>,
    chains: &BTreeMap<u32, Vec<FeatureVector9>>,
    r: usize,
) -> Vec<CandidateAssociation> {
    let mut out = Vec::new();
    if frame_t1.is_empty() || n_candidates == 0 {
        return out;
    }
    let targets: Vec<(&InstanceObservation, FeatureVector9)> =
        frame_t1.iter().map(|o| (o, instance_feature(o))).collect();
    for source in frame_t.iter() {
        let projected = match projection {
            ProjectionMode::ConstantPosition => source.centroid,
            ProjectionMode::ConstantVelocity => {
                source.centroid
                    + displacements.get(&source.instance_id).copied().unwrap_or_else(Vec3::zeros)
            }
        };
        let mut ranked: Vec<(f64, usize)> = targets
            .iter()
            .enumerate()
            .map(|(i, (obs, _))| ((obs.centroid - projected).norm(), i))
            .collect();
        ranked.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then(targets[a.1].0.instance_id.cmp(&targets[b.1].0.instance_id))
        });
        let own_feature = [instance_feature(source)];
        let chain: &[FeatureVector9] =
            chains.get(&source.instance_id).map(Vec::as_slice).unwrap_or(&own_feature);
        for &(_, i) in ranked.iter().take(n_candidates) {
            out.push(CandidateAssociation {
                source_id: source.instance_id,
                target_id: targets[i].0.instance_id,
                feature: build_history(chain, &targets[i].1, r),
                score: None,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrameObservations;

    fn obs_at(frame: usize, id: u32, c: [f64; 3]) -> InstanceObservation {
        InstanceObservation {
            frame_index: frame,
            instance_id: id,
            centroid: Vec3::new(c[0], c[1], c[2]),
            bbox_min: Vec3::new(c[0] - 1.0, c[1] - 2.0, c[2] - 3.0),
            bbox_extent: Vec3::new(2.0, 4.0, 6.0),
            volume: 10.0,
            points: Vec::new(),
        }
    }

    fn fv(tag: f64) -> FeatureVector9 {
        FeatureVector9([tag; 9])
    }

    // ==================== instance_feature ====================

    #[test]
    fn feature_is_a_field_copy_in_declared_order() {
        let o = obs_at(0, 1, [1.0, 2.0, 3.0]);
        let f = instance_feature(&o);
        assert_eq!(f.0, [1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn translation_shifts_position_blocks_but_not_extent() {
        let a = instance_feature(&obs_at(0, 1, [1.0, 2.0, 3.0]));
        let b = instance_feature(&obs_at(0, 1, [11.0, 22.0, 33.0]));
        for k in 0..3 {
            assert_eq!(b.0[k] - a.0[k], [10.0, 20.0, 30.0][k]); // centroid
            assert_eq!(b.0[3 + k] - a.0[3 + k], [10.0, 20.0, 30.0][k]); // corner
            assert_eq!(b.0[6 + k], a.0[6 + k]); // extent unchanged
        }
    }

    // ==================== build_history ====================

    #[test]
    fn full_chain_is_concatenated_oldest_first() {
        let w = build_history(&[fv(1.0), fv(2.0), fv(3.0)], &fv(9.0), 2);
        assert_eq!(w.len(), 36);
        assert_eq!(w.values()[0], 1.0);
        assert_eq!(w.values()[9], 2.0);
        assert_eq!(w.values()[18], 3.0);
        assert_eq!(w.values()[27], 9.0);
        assert_eq!(w.source_now()[0], 3.0);
        assert_eq!(w.target()[0], 9.0);
    }

    #[test]
    fn short_chain_replicates_earliest_entry() {
        let w = build_history(&[fv(5.0)], &fv(9.0), 2);
        assert_eq!(w.len(), 36);
        for slot in 0..3 {
            assert_eq!(w.values()[slot * 9], 5.0);
        }
        assert_eq!(w.values()[27], 9.0);
    }

    #[test]
    fn zero_depth_keeps_only_current_and_candidate() {
        let w = build_history(&[fv(1.0), fv(2.0)], &fv(9.0), 0);
        assert_eq!(w.len(), 18);
        assert_eq!(w.values()[0], 2.0);
        assert_eq!(w.values()[9], 9.0);
        assert_eq!(w.source_prev()[0], 2.0); // no look-back at r = 0
    }

    #[test]
    fn longer_chain_than_needed_keeps_most_recent_entries() {
        let w = build_history(&[fv(1.0), fv(2.0), fv(3.0), fv(4.0)], &fv(9.0), 1);
        assert_eq!(w.len(), 27);
        assert_eq!(w.values()[0], 3.0);
        assert_eq!(w.values()[9], 4.0);
        assert_eq!(w.values()[18], 9.0);
    }

    // ==================== generate_candidates ====================

    fn frame_with(frame: usize, centroids: &[(u32, [f64; 3])]) -> FrameObservations {
        FrameObservations::new(
            frame,
            centroids.iter().map(|&(id, c)| obs_at(frame, id, c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn picks_nearest_targets_in_ascending_distance_order() {
        let t0 = frame_with(0, &[(1, [0.0, 0.0, 0.0])]);
        let t1 = frame_with(
            1,
            &[
                (10, [5.0, 0.0, 0.0]),
                (11, [1.0, 0.0, 0.0]),
                (12, [3.0, 0.0, 0.0]),
                (13, [2.0, 0.0, 0.0]),
                (14, [4.0, 0.0, 0.0]),
            ],
        );
        let cands = generate_candidates(
            &t0,
            &t1,
            4,
            ProjectionMode::ConstantPosition,
            &BTreeMap::new(),
            &BTreeMap::new(),
            2,
        );
        let order: Vec<u32> = cands.iter().map(|c| c.target_id).collect();
        assert_eq!(order, vec![11, 13, 12, 14]);
        assert!(cands.iter().all(|c| c.score.is_none()));
        assert!(cands.iter().all(|c| c.feature.len() == 36));
    }

    #[test]
    fn distance_ties_prefer_smaller_target_id() {
        let t0 = frame_with(0, &[(1, [0.0, 0.0, 0.0])]);
        let t1 = frame_with(1, &[(8, [1.0, 0.0, 0.0]), (3, [-1.0, 0.0, 0.0])]);
        let cands = generate_candidates(
            &t0,
            &t1,
            2,
            ProjectionMode::ConstantPosition,
            &BTreeMap::new(),
            &BTreeMap::new(),
            0,
        );
        assert_eq!(cands[0].target_id, 3);
        assert_eq!(cands[1].target_id, 8);
    }

    #[test]
    fn constant_velocity_projects_along_previous_displacement() {
        let t0 = frame_with(0, &[(1, [0.0, 0.0, 0.0])]);
        // Nearest to the raw centroid is target 21; nearest to the projected
        // location (10, 0, 0) is target 22.
        let t1 = frame_with(1, &[(21, [1.0, 0.0, 0.0]), (22, [9.0, 0.0, 0.0])]);
        let mut disp = BTreeMap::new();
        disp.insert(1u32, Vec3::new(10.0, 0.0, 0.0));
        let velocity = generate_candidates(
            &t0,
            &t1,
            1,
            ProjectionMode::ConstantVelocity,
            &disp,
            &BTreeMap::new(),
            0,
        );
        assert_eq!(velocity[0].target_id, 22);
        // Without a stored displacement the mode degrades to constant position.
        let fallback = generate_candidates(
            &t0,
            &t1,
            1,
            ProjectionMode::ConstantVelocity,
            &BTreeMap::new(),
            &BTreeMap::new(),
            0,
        );
        assert_eq!(fallback[0].target_id, 21);
    }

    #[test]
    fn empty_next_frame_yields_no_candidates() {
        let t0 = frame_with(0, &[(1, [0.0, 0.0, 0.0])]);
        let t1 = FrameObservations::empty(1);
        let cands = generate_candidates(
            &t0,
            &t1,
            4,
            ProjectionMode::ConstantPosition,
            &BTreeMap::new(),
            &BTreeMap::new(),
            2,
        );
        assert!(cands.is_empty());
    }

    #[test]
    fn output_is_grouped_by_source_in_ascending_id_order() {
        let t0 = frame_with(0, &[(2, [0.0, 0.0, 0.0]), (1, [10.0, 0.0, 0.0])]);
        let t1 = frame_with(1, &[(5, [0.5, 0.0, 0.0]), (6, [10.5, 0.0, 0.0])]);
        let cands = generate_candidates(
            &t0,
            &t1,
            2,
            ProjectionMode::ConstantPosition,
            &BTreeMap::new(),
            &BTreeMap::new(),
            0,
        );
        let keys: Vec<(u32, u32)> = cands.iter().map(|c| (c.source_id, c.target_id)).collect();
        assert_eq!(keys, vec![(1, 6), (1, 5), (2, 5), (2, 6)]);
    }

    #[test]
    fn chains_feed_the_assembled_windows() {
        let t0 = frame_with(0, &[(1, [0.0, 0.0, 0.0])]);
        let t1 = frame_with(1, &[(5, [1.0, 0.0, 0.0])]);
        let mut chains = BTreeMap::new();
        chains.insert(1u32, vec![fv(7.0), instance_feature(t0.get(1).unwrap())]);
        let cands = generate_candidates(
            &t0,
            &t1,
            1,
            ProjectionMode::ConstantPosition,
            &BTreeMap::new(),
            &chains,
            1,
        );
        assert_eq!(cands[0].feature.values()[0], 7.0);
        assert_eq!(cands[0].feature.source_now()[0], 0.0);
    }
}
