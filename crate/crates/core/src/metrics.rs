//! Lineage evaluation: edit-distance scores over lineage graphs and an
//! event-level score for divisions.
//!
//! Both the computed result and the reference are turned into graphs with one
//! vertex per (frame, track) occupancy and directed edges between consecutive
//! frames, tagged as plain track continuations or parent links. Because both
//! sides are built over the same oracle segmentation, vertices correspond
//! one to one and the comparison reduces to edge bookkeeping: edges to add,
//! edges to delete, and edges whose tag is wrong.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{DivisionEvent, Track};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("edge {0:?} -> {1:?} does not connect consecutive frames")]
    NonConsecutiveEdge(Vertex, Vertex),
    #[error("edge {0:?} -> {1:?} names a vertex outside the graph")]
    EdgeOutsideVertices(Vertex, Vertex),
    #[error("vertex {0:?} has more than one incoming track link")]
    DuplicateIncomingTrackLink(Vertex),
    #[error("vertex correspondence is not a bijection between the graphs")]
    CorrespondenceNotBijective,
    #[error("reference graph has no edges; the normalizing cost is undefined")]
    EmptyReference,
}

/// (frame, track id) occupancy.
pub type Vertex = (usize, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    /// Same track continuing to the next frame.
    TrackLink,
    /// Parent's last occupancy to a daughter's first.
    ParentLink,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LineageGraph {
    vertices: BTreeSet<Vertex>,
    edges: BTreeMap<(Vertex, Vertex), EdgeKind>,
}

impl LineageGraph {
    /// Builds the graph of a track forest. Parent links come from each
    /// track's `parent_id`.
    pub fn from_tracks(tracks: &[Track]) -> Self {
        let mut graph = LineageGraph::default();
        for track in tracks {
            for t in track.t_init..=track.t_fin {
                graph.vertices.insert((t, track.track_id));
            }
            for t in track.t_init..track.t_fin {
                graph
                    .edges
                    .insert(((t, track.track_id), (t + 1, track.track_id)), EdgeKind::TrackLink);
            }
        }
        for track in tracks {
            if track.parent_id == 0 {
                continue;
            }
            if let Some(parent) = tracks.iter().find(|p| p.track_id == track.parent_id) {
                graph.edges.insert(
                    ((parent.t_fin, parent.track_id), (track.t_init, track.track_id)),
                    EdgeKind::ParentLink,
                );
            }
        }
        graph
    }

    /// Builds a graph from explicit parts, validating the structural rules:
    /// edges connect consecutive frames between known vertices, and no vertex
    /// has two incoming track links.
    pub fn from_parts(
        vertices: impl IntoIterator<Item = Vertex>,
        edges: impl IntoIterator<Item = (Vertex, Vertex, EdgeKind)>,
    ) -> Result<Self, MetricsError> {
        let vertices: BTreeSet<Vertex> = vertices.into_iter().collect();
        let mut map = BTreeMap::new();
        let mut incoming: BTreeSet<Vertex> = BTreeSet::new();
        for (from, to, kind) in edges {
            if to.0 != from.0 + 1 {
                return Err(MetricsError::NonConsecutiveEdge(from, to));
            }
            if !vertices.contains(&from) || !vertices.contains(&to) {
                return Err(MetricsError::EdgeOutsideVertices(from, to));
            }
            if kind == EdgeKind::TrackLink && !incoming.insert(to) {
                return Err(MetricsError::DuplicateIncomingTrackLink(to));
            }
            map.insert((from, to), kind);
        }
        Ok(Self { vertices, edges: map })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges_of_kind(&self, kind: EdgeKind) -> usize {
        self.edges.values().filter(|&&k| k == kind).count()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Maps each computed vertex onto its reference counterpart.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VertexCorrespondence {
    forward: BTreeMap<Vertex, Vertex>,
}

impl VertexCorrespondence {
    /// Both graphs share a vertex namespace (reference against itself, or
    /// fixtures written directly in reference coordinates).
    pub fn identity(graph: &LineageGraph) -> Self {
        Self { forward: graph.vertices.iter().map(|&v| (v, v)).collect() }
    }

    /// From a tracker's per-frame instance-to-track maps, under the oracle
    /// convention that an instance id is the reference track id: computed
    /// vertex (t, track) corresponds to reference vertex (t, instance).
    pub fn from_id_maps(id_maps: &[BTreeMap<u32, u32>]) -> Self {
        let mut forward = BTreeMap::new();
        for (t, ids) in id_maps.iter().enumerate() {
            for (&instance, &track) in ids {
                forward.insert((t, track), (t, instance));
            }
        }
        Self { forward }
    }

    fn get(&self, v: &Vertex) -> Option<Vertex> {
        self.forward.get(v).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AogmBreakdown {
    /// Reference edges the computed graph is missing (edges to add).
    pub ed: usize,
    /// Computed edges absent from the reference (edges to delete).
    pub ea: usize,
    /// Edges present in both with the wrong tag.
    pub ec: usize,
    pub w_ed: f64,
    pub w_ea: f64,
    pub w_ec: f64,
    /// w_ed·ED + w_ea·EA + w_ec·EC.
    pub aogm: f64,
}

pub const DEFAULT_WEIGHTS: (f64, f64, f64) = (1.0, 1.0, 1.0);

/// Edge-edit cost of turning the computed graph into the reference, after
/// carrying computed edges into reference coordinates. The correspondence
/// must biject computed vertices onto reference vertices. A mistagged edge
/// counts only toward EC, never toward ED or EA.
pub fn aogm_weighted(
    computed: &LineageGraph,
    reference: &LineageGraph,
    correspondence: &VertexCorrespondence,
    weights: (f64, f64, f64),
) -> Result<AogmBreakdown, MetricsError> {
    let mut mapped: BTreeSet<Vertex> = BTreeSet::new();
    for v in &computed.vertices {
        let Some(m) = correspondence.get(v) else {
            return Err(MetricsError::CorrespondenceNotBijective);
        };
        if !mapped.insert(m) {
            return Err(MetricsError::CorrespondenceNotBijective);
        }
    }
    if mapped != reference.vertices {
        return Err(MetricsError::CorrespondenceNotBijective);
    }

    let mut computed_in_ref: BTreeMap<(Vertex, Vertex), EdgeKind> = BTreeMap::new();
    for (&(from, to), &kind) in &computed.edges {
        let edge = (
            correspondence.get(&from).expect("checked above"),
            correspondence.get(&to).expect("checked above"),
        );
        computed_in_ref.insert(edge, kind);
    }

    let mut ed = 0;
    let mut ea = 0;
    let mut ec = 0;
    for (edge, kind) in &reference.edges {
        match computed_in_ref.get(edge) {
            None => ed += 1,
            Some(k) if k != kind => ec += 1,
            Some(_) => {}
        }
    }
    for edge in computed_in_ref.keys() {
        if !reference.edges.contains_key(edge) {
            ea += 1;
        }
    }
    let (w_ed, w_ea, w_ec) = weights;
    let aogm = w_ed * ed as f64 + w_ea * ea as f64 + w_ec * ec as f64;
    Ok(AogmBreakdown { ed, ea, ec, w_ed, w_ea, w_ec, aogm })
}

pub fn aogm(
    computed: &LineageGraph,
    reference: &LineageGraph,
    correspondence: &VertexCorrespondence,
) -> Result<AogmBreakdown, MetricsError> {
    aogm_weighted(computed, reference, correspondence, DEFAULT_WEIGHTS)
}

/// Normalized tracking accuracy: 1 − min(AOGM, AOGM₀)/AOGM₀, where AOGM₀ is
/// the cost of building every reference edge from scratch. Errors when the
/// reference has no edges.
pub fn tra(
    computed: &LineageGraph,
    reference: &LineageGraph,
    correspondence: &VertexCorrespondence,
) -> Result<f64, MetricsError> {
    let breakdown = aogm(computed, reference, correspondence)?;
    let aogm_0 = breakdown.w_ed * reference.num_edges() as f64;
    if aogm_0 == 0.0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(1.0 - breakdown.aogm.min(aogm_0) / aogm_0)
}

/// How detected divisions are paired with reference divisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivisionMatching {
    /// Temporal proximity and the same parent identity (via `parent_map`).
    #[default]
    ParentIdentity,
    /// Temporal proximity alone.
    TimeOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivisionScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Majority-vote identity of each computed track: the reference track id
/// (instance id, under the oracle convention) it covers most often, ties
/// toward the smaller id. Used to compare division parents across id spaces.
pub fn majority_track_map(id_maps: &[BTreeMap<u32, u32>]) -> BTreeMap<u32, u32> {
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for ids in id_maps {
        for (&instance, &track) in ids {
            *counts.entry(track).or_default().entry(instance).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(track, per_instance)| {
            let best = per_instance
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("track seen in at least one frame");
            (track, best.0)
        })
        .collect()
}

/// One-to-one event matching within `tol` frames, greedy by ascending frame
/// difference (ties toward the smaller reference frame). With
/// [`DivisionMatching::ParentIdentity`], a pair also requires the detected
/// parent to map onto the reference parent; `parent_map` translates detected
/// parent ids (None means both lists already share one id space).
pub fn division_f1(
    detected: &[DivisionEvent],
    reference: &[DivisionEvent],
    tol: usize,
    matching: DivisionMatching,
    parent_map: Option<&BTreeMap<u32, u32>>,
) -> DivisionScore {
    let mut admissible: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (di, det) in detected.iter().enumerate() {
        for (ri, gt) in reference.iter().enumerate() {
            let gap = det.frame.abs_diff(gt.frame);
            if gap > tol {
                continue;
            }
            if matching == DivisionMatching::ParentIdentity {
                let det_parent = parent_map
                    .map(|m| m.get(&det.parent).copied().unwrap_or(0))
                    .unwrap_or(det.parent);
                if det_parent != gt.parent {
                    continue;
                }
            }
            admissible.push((gap, gt.frame, ri, di));
        }
    }
    admissible.sort_unstable();
    let mut det_used = vec![false; detected.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut tp = 0;
    for (_, _, ri, di) in admissible {
        if !det_used[di] && !ref_used[ri] {
            det_used[di] = true;
            ref_used[ri] = true;
            tp += 1;
        }
    }
    let fp = detected.len() - tp;
    let fn_count = reference.len() - tp;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_count);
    let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    DivisionScore {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_count,
        precision,
        recall,
        f1,
    }
}

/// Bundle of every score the evaluation emits.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub breakdown: AogmBreakdown,
    pub aogm_0: f64,
    pub tra: f64,
    pub division: DivisionScore,
}

impl EvaluationReport {
    pub fn build(
        computed: &LineageGraph,
        reference: &LineageGraph,
        correspondence: &VertexCorrespondence,
        detected_events: &[DivisionEvent],
        reference_events: &[DivisionEvent],
        tol: usize,
        matching: DivisionMatching,
        parent_map: Option<&BTreeMap<u32, u32>>,
    ) -> Result<Self, MetricsError> {
        let breakdown = aogm(computed, reference, correspondence)?;
        let aogm_0 = breakdown.w_ed * reference.num_edges() as f64;
        if aogm_0 == 0.0 {
            return Err(MetricsError::EmptyReference);
        }
        let tra = 1.0 - breakdown.aogm.min(aogm_0) / aogm_0;
        let division = division_f1(detected_events, reference_events, tol, matching, parent_map);
        Ok(Self { breakdown, aogm_0, tra, division })
    }

    /// Machine-readable block, one `key = value` per line. Reals carry 6
    /// significant digits, like every other text artifact.
    pub fn key_values(&self) -> String {
        format!(
            "TRA = {}\nED = {}\nEA = {}\nEC = {}\nAOGM = {}\nAOGM_0 = {}\nprecision = {}\nrecall = {}\nf1 = {}\n",
            crate::io::fmt_g(self.tra),
            self.breakdown.ed,
            self.breakdown.ea,
            self.breakdown.ec,
            crate::io::fmt_g(self.breakdown.aogm),
            crate::io::fmt_g(self.aogm_0),
            crate::io::fmt_g(self.division.precision),
            crate::io::fmt_g(self.division.recall),
            crate::io::fmt_g(self.division.f1),
        )
    }
}
