//! Division detection among unmatched instances.
//!
//! A rod's point cloud is summarized by its principal frame (centered
//! covariance eigenvectors). A freshly divided sibling lies along the major
//! axis, so among the instances inside a one-rod-length neighborhood the
//! sibling is the one whose point mean projects least onto the minor plane
//! (minimum "projection value"). A candidate division is confirmed when the
//! presumed sibling's volume dropped to roughly half of its predecessor's.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::matcher::MatchResult;
use crate::model::{FrameObservations, InstanceObservation, Sequence, Vec3};

/// Accepted range for `volume_now / volume_previous` at a division, around the
/// ideal halving.
pub const DEFAULT_VOLUME_BAND: (f64, f64) = (0.35, 0.65);

#[derive(Debug, Error)]
pub enum DivisionError {
    #[error("principal frame needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate geometry: points carry no spatial extent")]
    Degenerate,
    #[error("volumes must be positive, got now = {now}, previous = {prev}")]
    BadVolume { now: f64, prev: f64 },
}

/// Centered orthonormal frame of a point cloud, axes ordered by descending
/// covariance singular value.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalFrame {
    pub centroid: Vec3,
    pub axes: [Vec3; 3],
    pub singular_values: [f64; 3],
}

/// Decomposes a point cloud into its principal frame.
///
/// Coordinates are centered about their mean before the covariance is formed,
/// so the leading axis is the geometric major axis regardless of position.
/// Each axis is sign-normalized so its largest-magnitude component is
/// positive. Collinear clouds are accepted (the minor singular values are
/// simply ~0; the minor *plane* stays well defined, which is all downstream
/// projection needs); only clouds with no extent at all are rejected.
pub fn principal_frame(points: &[Vec3]) -> Result<PrincipalFrame, DivisionError> {
    if points.len() < 3 {
        return Err(DivisionError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let mean: Vec3 = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    if cov.trace() <= 0.0 {
        return Err(DivisionError::Degenerate);
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = [Vec3::zeros(); 3];
    let mut singular_values = [0.0f64; 3];
    for (slot, &col) in order.iter().enumerate() {
        let mut v: Vec3 = eig.eigenvectors.column(col).into();
        let k = (0..3).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        if v[k] < 0.0 {
            v = -v;
        }
        axes[slot] = v;
        singular_values[slot] = eig.eigenvalues[col].max(0.0);
    }
    Ok(PrincipalFrame { centroid: mean, axes, singular_values })
}

/// Norm of the neighbor's point mean, expressed relative to the reference
/// centroid, projected onto the minor plane `[v2, v3]`. Zero means the
/// neighbor sits on the reference instance's major axis.
pub fn projection_value(frame_of_x: &PrincipalFrame, neighbor_points: &[Vec3]) -> f64 {
    let n = neighbor_points.len() as f64;
    let mean: Vec3 = neighbor_points.iter().sum::<Vec3>() / n;
    let rel = mean - frame_of_x.centroid;
    let p2 = rel.dot(&frame_of_x.axes[1]);
    let p3 = rel.dot(&frame_of_x.axes[2]);
    (p2 * p2 + p3 * p3).sqrt()
}

/// `X`'s full extent along its major axis (twice the rod half-length): half
/// the neighborhood radius used by the sibling search.
fn major_extent(x: &InstanceObservation, pf: &PrincipalFrame) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in &x.points {
        let t = (p - pf.centroid).dot(&pf.axes[0]);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    hi - lo
}

fn pv_of(pf: &PrincipalFrame, obs: &InstanceObservation) -> f64 {
    if obs.points.is_empty() {
        // The point mean equals the centroid for consistent instances, so a
        // summary-only neighbor can still be scored.
        projection_value(pf, std::slice::from_ref(&obs.centroid))
    } else {
        projection_value(pf, &obs.points)
    }
}

/// Members of `X`'s neighborhood (centroid to centroid within twice `X`'s
/// major extent, excluding `X` itself), in ascending id order.
///
/// An end-to-end sibling sits exactly one true rod length away while the
/// sampled extent systematically underestimates that length, so a one-extent
/// radius would make the borderline case a coin flip. Doubling buys real
/// slack; the projection value and the volume gate still reject bystanders.
fn neighborhood<'a>(
    x: &InstanceObservation,
    pf: &PrincipalFrame,
    frame: &'a FrameObservations,
) -> Vec<&'a InstanceObservation> {
    let radius = 2.0 * major_extent(x, pf);
    frame
        .iter()
        .filter(|o| o.instance_id != x.instance_id)
        .filter(|o| (o.centroid - x.centroid).norm() <= radius)
        .collect()
}

/// Picks the most likely sibling of `X` within its frame: the neighborhood
/// member with minimum projection value, ties toward the smaller id. `None`
/// when no instance lies within the neighborhood radius.
pub fn find_sibling(
    x: &InstanceObservation,
    frame: &FrameObservations,
) -> Result<Option<u32>, DivisionError> {
    let pf = principal_frame(&x.points)?;
    let members = neighborhood(x, &pf, frame);
    Ok(members
        .iter()
        .map(|o| (pv_of(&pf, o), o.instance_id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id))
}

/// True when the volume dropped into the division band: halving within
/// tolerance. Errors on non-positive volumes.
pub fn confirm_division(
    volume_now: f64,
    volume_prev: f64,
    band: (f64, f64),
) -> Result<bool, DivisionError> {
    if !(volume_now > 0.0) || !(volume_prev > 0.0) {
        return Err(DivisionError::BadVolume { now: volume_now, prev: volume_prev });
    }
    let ratio = volume_now / volume_prev;
    Ok(ratio >= band.0 && ratio <= band.1)
}

/// One confirmed division, in instance-id terms, between a frame pair.
///
/// `relabel_child` inherited its predecessor's identity through matching and
/// must be given a fresh track id by the caller; `new_child` is the unmatched
/// daughter that triggered the check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameDivision {
    /// Frame of the daughters (t + 1).
    pub frame: usize,
    /// Unmatched daughter instance in frame t + 1.
    pub new_child: u32,
    /// Sibling instance in frame t + 1 currently carrying the parent identity.
    pub relabel_child: u32,
    /// The sibling's matched predecessor instance in frame t (the parent).
    pub parent_source: u32,
}

/// Scans the unmatched targets of one frame pair for divisions.
///
/// For each unmatched instance X (ascending id): locate its sibling X'; when
/// X' is matched to a predecessor and the volume test passes, record a
/// division. When X' is itself unmatched, the nearest *matched* neighborhood
/// member stands in for it; with no matched neighbor there is no event. Each
/// predecessor is consumed by at most one event per frame pair. Geometry or
/// volume failures simply yield no event (the daughter then surfaces as a
/// plain new appearance).
pub fn detect_divisions_between(
    frame_t: &FrameObservations,
    frame_t1: &FrameObservations,
    result: &MatchResult,
    band: (f64, f64),
) -> Vec<FrameDivision> {
    let mut events = Vec::new();
    let mut consumed: Vec<u32> = Vec::new();
    let target_to_source: std::collections::BTreeMap<u32, u32> =
        result.matched_pairs.iter().map(|&(s, t)| (t, s)).collect();
    for &x_id in &result.unmatched_targets {
        let Some(x) = frame_t1.get(x_id) else { continue };
        let Ok(pf) = principal_frame(&x.points) else { continue };
        let members = neighborhood(x, &pf, frame_t1);
        if members.is_empty() {
            continue;
        }
        let sibling = members
            .iter()
            .map(|o| (pv_of(&pf, o), o.instance_id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
            .expect("nonempty");
        let effective = if target_to_source.contains_key(&sibling) {
            Some(sibling)
        } else {
            // Both daughters unmatched: fall back to the nearest matched
            // neighbor's volume history.
            members
                .iter()
                .filter(|o| target_to_source.contains_key(&o.instance_id))
                .map(|o| ((o.centroid - x.centroid).norm(), o.instance_id))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, id)| id)
        };
        let Some(sib_id) = effective else { continue };
        let parent_source = target_to_source[&sib_id];
        if consumed.contains(&parent_source) {
            continue;
        }
        let (Some(sib_obs), Some(parent_obs)) = (frame_t1.get(sib_id), frame_t.get(parent_source))
        else {
            continue;
        };
        match confirm_division(sib_obs.volume, parent_obs.volume, band) {
            Ok(true) => {
                consumed.push(parent_source);
                events.push(FrameDivision {
                    frame: frame_t1.frame_index,
                    new_child: x_id,
                    relabel_child: sib_id,
                    parent_source,
                });
            }
            _ => {}
        }
    }
    events
}

/// Folds [`detect_divisions_between`] over a whole sequence.
/// `results[t]` must be the matching between frames `t` and `t + 1`.
pub fn detect_divisions(
    seq: &Sequence,
    results: &[MatchResult],
    band: (f64, f64),
) -> Vec<FrameDivision> {
    assert_eq!(
        results.len() + 1,
        seq.frames.len(),
        "need one match result per consecutive frame pair"
    );
    let mut events = Vec::new();
    for (t, result) in results.iter().enumerate() {
        events.extend(detect_divisions_between(
            &seq.frames[t],
            &seq.frames[t + 1],
            result,
            band,
        ));
    }
    events
}
