//! Frame-by-frame track construction.
//!
//! For every consecutive frame pair the tracker generates candidate links
//! from each live track's accumulated feature history, scores them, solves
//! the one-to-one matching, propagates track ids onto the matched targets,
//! hands fresh ids to new appearances, and finally checks the unmatched
//! targets for divisions. A detected division relabels the daughter that
//! inherited the parent's id, so the parent track always terminates at the
//! division and both daughters start fresh ids with the parent recorded.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::division::{detect_divisions_between, DEFAULT_VOLUME_BAND};
use crate::features::{
    generate_candidates, instance_feature, FeatureVector9, ProjectionMode,
};
use crate::matcher::{match_algorithm1, AssignmentProblem, CandidateLink, MatchError, MatchResult};
use crate::model::{DivisionEvent, Sequence, Track, Vec3};
use crate::scorer::{ScorerError, ScorerModel};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid tracker config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// History depth: feature windows span `r + 1` source frames.
    pub r: usize,
    /// Nearest-neighbour candidates per source.
    pub n_candidates: usize,
    pub projection: ProjectionMode,
    /// Candidates scoring below this are dropped before matching; 0 keeps
    /// every candidate. Must stay in [0, 1).
    pub score_threshold: f64,
    /// Accepted daughter/parent volume ratio range for division checks.
    pub division_band: (f64, f64),
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            r: 2,
            n_candidates: 4,
            projection: ProjectionMode::ConstantPosition,
            score_threshold: 0.0,
            division_band: DEFAULT_VOLUME_BAND,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    /// Ascending by track id.
    pub tracks: Vec<Track>,
    /// Per frame: instance id -> track id, one map per input frame.
    pub id_maps: Vec<BTreeMap<u32, u32>>,
    pub division_events: Vec<DivisionEvent>,
}

/// Propagates track ids across one matched frame pair: matched targets
/// inherit their source's track id, unmatched targets receive fresh ids in
/// ascending instance order. `next_fresh` advances past every id handed out.
pub fn assign_ids(
    matches: &MatchResult,
    prev_ids: &BTreeMap<u32, u32>,
    next_fresh: &mut u32,
) -> BTreeMap<u32, u32> {
    let mut ids = BTreeMap::new();
    for &(source, target) in &matches.matched_pairs {
        let track = *prev_ids.get(&source).expect("matched source has a track id");
        ids.insert(target, track);
    }
    let mut unmatched = matches.unmatched_targets.clone();
    unmatched.sort_unstable();
    for target in unmatched {
        ids.insert(target, *next_fresh);
        *next_fresh += 1;
    }
    ids
}

struct TrackState {
    /// Feature chain of each live track, trimmed to the window length.
    chains: BTreeMap<u32, Vec<FeatureVector9>>,
    /// Last frame-to-frame centroid displacement of each live track.
    displacements: BTreeMap<u32, Vec3>,
}

/// Runs the full sweep over a sequence. Deterministic for identical inputs.
pub fn track_sequence(
    seq: &Sequence,
    model: &ScorerModel,
    config: &TrackerConfig,
) -> Result<TrackingResult, TrackError> {
    if config.n_candidates == 0 {
        return Err(TrackError::BadConfig("n_candidates must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&config.score_threshold) {
        return Err(TrackError::BadConfig("score_threshold must be in [0, 1)".into()));
    }
    if !(config.division_band.0 > 0.0 && config.division_band.1 > config.division_band.0) {
        return Err(TrackError::BadConfig("division band must be an increasing pair".into()));
    }

    let mut id_maps: Vec<BTreeMap<u32, u32>> = Vec::with_capacity(seq.num_frames());
    let mut events: Vec<DivisionEvent> = Vec::new();
    // Track id -> parent track id, recorded when a division is detected.
    let mut parents: BTreeMap<u32, u32> = BTreeMap::new();
    let mut next_fresh: u32 = 1;
    let mut state = TrackState { chains: BTreeMap::new(), displacements: BTreeMap::new() };

    if seq.num_frames() == 0 {
        return Ok(TrackingResult { tracks: Vec::new(), id_maps, division_events: events });
    }

    // First appearances in frame 0, ascending instance order.
    let mut first = BTreeMap::new();
    for obs in seq.frames[0].iter() {
        first.insert(obs.instance_id, next_fresh);
        next_fresh += 1;
    }
    refresh_state(&mut state, &seq.frames[0], &first, config.r);
    id_maps.push(first);

    for t in 0..seq.num_frames() - 1 {
        let frame_t = &seq.frames[t];
        let frame_t1 = &seq.frames[t + 1];
        let prev_ids = id_maps[t].clone();

        // Candidate generation works in instance-id space; hand it each
        // source's track history under the source's instance id.
        let mut chains_by_instance: BTreeMap<u32, Vec<FeatureVector9>> = BTreeMap::new();
        let mut disp_by_instance: BTreeMap<u32, Vec3> = BTreeMap::new();
        for (&instance, &track) in &prev_ids {
            if let Some(chain) = state.chains.get(&track) {
                chains_by_instance.insert(instance, chain.clone());
            }
            if let Some(&d) = state.displacements.get(&track) {
                disp_by_instance.insert(instance, d);
            }
        }
        let mut candidates = generate_candidates(
            frame_t,
            frame_t1,
            config.n_candidates,
            config.projection,
            &disp_by_instance,
            &chains_by_instance,
            config.r,
        );
        model.score(&mut candidates)?;

        let links: Vec<CandidateLink> = candidates
            .iter()
            .filter(|c| c.score.unwrap_or(0.0) >= config.score_threshold)
            .map(|c| CandidateLink {
                source_id: c.source_id,
                target_id: c.target_id,
                score: c.score.expect("scored above"),
            })
            .collect();
        let sources: Vec<u32> = frame_t.ids().collect();
        let targets: Vec<u32> = frame_t1.ids().collect();
        let problem = AssignmentProblem::new(sources, targets, links)?;
        let matches = match_algorithm1(&problem);

        let mut ids = assign_ids(&matches, &prev_ids, &mut next_fresh);
        for div in detect_divisions_between(frame_t, frame_t1, &matches, config.division_band) {
            let parent_track = prev_ids[&div.parent_source];
            debug_assert_eq!(ids[&div.relabel_child], parent_track);
            // The continuation daughter gives up the inherited id so the
            // parent track ends at the division.
            let child_a = next_fresh;
            next_fresh += 1;
            ids.insert(div.relabel_child, child_a);
            let child_b = ids[&div.new_child];
            parents.insert(child_a, parent_track);
            parents.insert(child_b, parent_track);
            events.push(DivisionEvent { parent: parent_track, child_a, child_b, frame: t + 1 });
        }

        refresh_state(&mut state, frame_t1, &ids, config.r);
        id_maps.push(ids);
    }

    let tracks = build_tracks(seq, &id_maps, &parents);
    Ok(TrackingResult { tracks, id_maps, division_events: events })
}

/// Extends the per-track feature chains and displacements with one frame of
/// assignments; tracks absent from `ids` fell out of the sweep and are
/// dropped. Fresh tracks (relabeled daughters included) start clean chains.
fn refresh_state(
    state: &mut TrackState,
    frame: &crate::model::FrameObservations,
    ids: &BTreeMap<u32, u32>,
    r: usize,
) {
    let mut chains = BTreeMap::new();
    let mut displacements = BTreeMap::new();
    for (&instance, &track) in ids {
        let obs = frame.get(instance).expect("id map only names frame instances");
        let feature = instance_feature(obs);
        let mut chain = state.chains.remove(&track).unwrap_or_default();
        if let Some(last) = chain.last() {
            displacements.insert(track, obs.centroid - last.centroid());
        }
        chain.push(feature);
        if chain.len() > r + 1 {
            chain.remove(0);
        }
        chains.insert(track, chain);
    }
    state.chains = chains;
    state.displacements = displacements;
}

fn build_tracks(
    seq: &Sequence,
    id_maps: &[BTreeMap<u32, u32>],
    parents: &BTreeMap<u32, u32>,
) -> Vec<Track> {
    let mut spans: BTreeMap<u32, Track> = BTreeMap::new();
    for (t, ids) in id_maps.iter().enumerate() {
        let mut seen: Vec<u32> = Vec::with_capacity(ids.len());
        for (&instance, &track) in ids {
            debug_assert!(!seen.contains(&track), "track id repeated within a frame");
            seen.push(track);
            let obs = seq.frames[t].get(instance).expect("id map names frame instances");
            let entry = spans.entry(track).or_insert_with(|| Track {
                track_id: track,
                t_init: t,
                t_fin: t,
                centroids: Vec::new(),
                parent_id: parents.get(&track).copied().unwrap_or(0),
            });
            debug_assert!(
                entry.centroids.is_empty() || entry.t_fin + 1 == t,
                "track frames must be contiguous"
            );
            entry.t_fin = t;
            entry.centroids.push(obs.centroid);
        }
    }
    spans.into_values().collect()
}
