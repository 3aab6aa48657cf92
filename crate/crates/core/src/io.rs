//! Plain-text artifact formats.
//!
//! Every format is UTF-8 with one record per line and real numbers printed
//! with 6 significant digits via [`fmt_g`]. Writers emit a canonical form
//! (sorted keys, `\n` endings, trailing newline); reading a canonical file
//! and writing it back reproduces it byte for byte. Readers report the
//! 1-based line number of the first malformed record.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{DivisionEvent, FrameObservations, InstanceObservation, Sequence, Track, Vec3};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Data(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { line, message: message.into() }
}

// ==================== number formatting ====================

/// Formats with 6 significant digits, in the style of printf's `%.6g`:
/// fixed notation for moderate exponents, scientific otherwise, trailing
/// zeros trimmed. Idempotent under reparsing: printing the parsed value
/// reproduces the string.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    // Decimal exponent after rounding to 6 significant digits; formatting in
    // scientific form first catches values that round up across a decade.
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-4..6).contains(&exp) {
        let fixed = format!("{:.*}", (5 - exp) as usize, x);
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn field_f64(s: &str, line: usize, name: &str) -> Result<f64, IoError> {
    s.trim().parse().map_err(|_| parse_err(line, format!("bad {name} '{}'", s.trim())))
}

fn field_u32(s: &str, line: usize, name: &str) -> Result<u32, IoError> {
    s.trim().parse().map_err(|_| parse_err(line, format!("bad {name} '{}'", s.trim())))
}

fn field_usize(s: &str, line: usize, name: &str) -> Result<usize, IoError> {
    s.trim().parse().map_err(|_| parse_err(line, format!("bad {name} '{}'", s.trim())))
}

// ==================== feature table ====================

pub const FEATURE_TABLE_HEADER: &str = "t,id,cx,cy,cz,bx,by,bz,ex,ey,ez,vol";

/// One row per instance per frame: frame index, instance id, centroid,
/// box minimum, box extent, volume. Rows ascend by frame, then by id.
pub fn write_feature_table(seq: &Sequence) -> String {
    let mut out = String::from(FEATURE_TABLE_HEADER);
    out.push('\n');
    for frame in &seq.frames {
        for obs in frame.iter() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                frame.frame_index,
                obs.instance_id,
                fmt_g(obs.centroid.x),
                fmt_g(obs.centroid.y),
                fmt_g(obs.centroid.z),
                fmt_g(obs.bbox_min.x),
                fmt_g(obs.bbox_min.y),
                fmt_g(obs.bbox_min.z),
                fmt_g(obs.bbox_extent.x),
                fmt_g(obs.bbox_extent.y),
                fmt_g(obs.bbox_extent.z),
                fmt_g(obs.volume),
            ));
        }
    }
    out
}

/// Parses a feature table into a sequence with empty point sets. The table
/// does not record the capture interval, so the caller supplies it. Frames
/// absent from the table come back empty up to the highest frame index seen.
pub fn read_feature_table(text: &str, frame_interval: f64) -> Result<Sequence, IoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == FEATURE_TABLE_HEADER => {}
        Some((_, header)) => {
            return Err(parse_err(1, format!("unexpected header '{}'", header.trim_end())))
        }
        None => return Err(parse_err(1, "empty file")),
    }
    let mut per_frame: BTreeMap<usize, Vec<InstanceObservation>> = BTreeMap::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 12 {
            return Err(parse_err(line, format!("row has {} fields, expected 12", fields.len())));
        }
        let t = field_usize(fields[0], line, "frame index")?;
        let id = field_u32(fields[1], line, "instance id")?;
        if id == 0 {
            return Err(parse_err(line, "instance id 0 is reserved"));
        }
        let mut reals = [0.0; 10];
        for (k, slot) in reals.iter_mut().enumerate() {
            *slot = field_f64(fields[k + 2], line, "value")?;
        }
        let bucket = per_frame.entry(t).or_default();
        if bucket.iter().any(|o| o.instance_id == id) {
            return Err(parse_err(line, format!("duplicate instance id {id} in frame {t}")));
        }
        bucket.push(InstanceObservation {
            frame_index: t,
            instance_id: id,
            centroid: Vec3::new(reals[0], reals[1], reals[2]),
            bbox_min: Vec3::new(reals[3], reals[4], reals[5]),
            bbox_extent: Vec3::new(reals[6], reals[7], reals[8]),
            volume: reals[9],
            points: Vec::new(),
        });
    }
    let num_frames = per_frame.keys().next_back().map_or(0, |&t| t + 1);
    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let instances = per_frame.remove(&t).unwrap_or_default();
        frames.push(
            FrameObservations::new(t, instances).map_err(|e| IoError::Data(e.to_string()))?,
        );
    }
    Ok(Sequence { frames, frame_interval })
}

// ==================== point clouds ====================

/// Canonical file name for one frame's point cloud.
pub fn points_file_name(frame_index: usize) -> String {
    format!("points_{frame_index:04}.csv")
}

/// Headerless rows `id,x,y,z`, instances ascending, points in stored order.
pub fn write_points_frame(frame: &FrameObservations) -> String {
    let mut out = String::new();
    for obs in frame.iter() {
        for p in &obs.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                obs.instance_id,
                fmt_g(p.x),
                fmt_g(p.y),
                fmt_g(p.z)
            ));
        }
    }
    out
}

pub fn read_points_frame(text: &str) -> Result<BTreeMap<u32, Vec<Vec3>>, IoError> {
    let mut map: BTreeMap<u32, Vec<Vec3>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(line, format!("row has {} fields, expected 4", fields.len())));
        }
        let id = field_u32(fields[0], line, "instance id")?;
        if id == 0 {
            return Err(parse_err(line, "instance id 0 is reserved"));
        }
        let x = field_f64(fields[1], line, "x")?;
        let y = field_f64(fields[2], line, "y")?;
        let z = field_f64(fields[3], line, "z")?;
        map.entry(id).or_default().push(Vec3::new(x, y, z));
    }
    Ok(map)
}

/// Copy of `frame` with each instance's points replaced from `points`.
/// Instances missing from the map keep an empty point set; ids in the map
/// that the frame does not contain are an error.
///
/// Both the box and the points were rounded to 6 significant digits
/// independently, so a reloaded point can poke out of the reloaded box by a
/// sliver. The box is the points' bounding box by definition, so it is
/// re-expanded just enough to cover them again.
pub fn with_points(
    frame: &FrameObservations,
    points: &BTreeMap<u32, Vec<Vec3>>,
) -> Result<FrameObservations, IoError> {
    for id in points.keys() {
        if frame.get(*id).is_none() {
            return Err(IoError::Data(format!(
                "point file names instance {id} absent from frame {}",
                frame.frame_index
            )));
        }
    }
    let instances = frame
        .iter()
        .map(|obs| {
            let mut obs = obs.clone();
            obs.points = points.get(&obs.instance_id).cloned().unwrap_or_default();
            for k in 0..3 {
                let mut lo = obs.bbox_min[k];
                let mut hi = obs.bbox_min[k] + obs.bbox_extent[k];
                for p in &obs.points {
                    lo = lo.min(p[k]);
                    hi = hi.max(p[k]);
                }
                obs.bbox_min[k] = lo;
                obs.bbox_extent[k] = hi - lo;
            }
            obs
        })
        .collect();
    FrameObservations::new(frame.frame_index, instances).map_err(|e| IoError::Data(e.to_string()))
}

// ==================== track file ====================

/// One track per line, `L B E P` (label, begin frame, end frame, parent
/// label, 0 for none), ascending label.
pub fn write_tracks(tracks: &[Track]) -> String {
    let mut sorted: Vec<&Track> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.track_id);
    let mut out = String::new();
    for t in sorted {
        out.push_str(&format!("{} {} {} {}\n", t.track_id, t.t_init, t.t_fin, t.parent_id));
    }
    out
}

/// Parses a track file. The file stores topology only, so the returned
/// tracks carry zeroed centroids of the right length.
pub fn read_tracks(text: &str) -> Result<Vec<Track>, IoError> {
    let mut tracks: Vec<Track> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(line, format!("row has {} fields, expected 4", fields.len())));
        }
        let label = field_u32(fields[0], line, "label")?;
        if label == 0 {
            return Err(parse_err(line, "label 0 is reserved for 'no parent'"));
        }
        let begin = field_usize(fields[1], line, "begin frame")?;
        let end = field_usize(fields[2], line, "end frame")?;
        if end < begin {
            return Err(parse_err(line, format!("end frame {end} precedes begin frame {begin}")));
        }
        let parent = field_u32(fields[3], line, "parent label")?;
        if tracks.iter().any(|t| t.track_id == label) {
            return Err(parse_err(line, format!("duplicate label {label}")));
        }
        tracks.push(Track {
            track_id: label,
            t_init: begin,
            t_fin: end,
            centroids: vec![Vec3::zeros(); end - begin + 1],
            parent_id: parent,
        });
    }
    Ok(tracks)
}

// ==================== events file ====================

/// Rows `parent childA childB frame`, ascending by frame then parent.
pub fn write_events(events: &[DivisionEvent]) -> String {
    let mut sorted: Vec<&DivisionEvent> = events.iter().collect();
    sorted.sort_by_key(|e| (e.frame, e.parent));
    let mut out = String::new();
    for e in sorted {
        out.push_str(&format!("{} {} {} {}\n", e.parent, e.child_a, e.child_b, e.frame));
    }
    out
}

pub fn read_events(text: &str) -> Result<Vec<DivisionEvent>, IoError> {
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(line, format!("row has {} fields, expected 4", fields.len())));
        }
        events.push(DivisionEvent {
            parent: field_u32(fields[0], line, "parent")?,
            child_a: field_u32(fields[1], line, "first child")?,
            child_b: field_u32(fields[2], line, "second child")?,
            frame: field_usize(fields[3], line, "frame")?,
        });
    }
    Ok(events)
}

/// Reconstructs division events from track topology: a label with exactly
/// two children starting on the same frame divided there. The smaller child
/// label is reported first, which for ground-truth files is the daughter
/// that continues the parent's identity.
pub fn events_from_tracks(tracks: &[Track]) -> Vec<DivisionEvent> {
    let mut groups: BTreeMap<(u32, usize), Vec<u32>> = BTreeMap::new();
    for t in tracks {
        if t.parent_id != 0 {
            groups.entry((t.parent_id, t.t_init)).or_default().push(t.track_id);
        }
    }
    let mut events: Vec<DivisionEvent> = groups
        .into_iter()
        .filter(|(_, children)| children.len() == 2)
        .map(|((parent, frame), mut children)| {
            children.sort_unstable();
            DivisionEvent { parent, child_a: children[0], child_b: children[1], frame }
        })
        .collect();
    events.sort_by_key(|e| (e.frame, e.parent));
    events
}

// ==================== config ====================

/// Flat `key = value` text. `#` starts a comment anywhere on a line; blank
/// lines are skipped. Duplicate keys are an error; which keys are legal is
/// the consumer's decision.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, IoError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.split('#').next().unwrap_or("").trim();
        if row.is_empty() {
            continue;
        }
        let Some((key, value)) = row.split_once('=') else {
            return Err(parse_err(line, format!("expected 'key = value', got '{row}'")));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(parse_err(line, "empty key"));
        }
        if value.is_empty() {
            return Err(parse_err(line, format!("key '{key}' has no value")));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(parse_err(line, format!("duplicate key '{key}'")));
        }
    }
    Ok(map)
}

// ==================== id maps ====================

pub const ID_MAP_HEADER: &str = "t,id,track";

/// Per-frame instance-to-track assignment, rows ascending by frame then
/// instance id.
pub fn write_id_maps(id_maps: &[BTreeMap<u32, u32>]) -> String {
    let mut out = String::from(ID_MAP_HEADER);
    out.push('\n');
    for (t, ids) in id_maps.iter().enumerate() {
        for (instance, track) in ids {
            out.push_str(&format!("{t},{instance},{track}\n"));
        }
    }
    out
}

pub fn read_id_maps(text: &str) -> Result<Vec<BTreeMap<u32, u32>>, IoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == ID_MAP_HEADER => {}
        Some((_, header)) => {
            return Err(parse_err(1, format!("unexpected header '{}'", header.trim_end())))
        }
        None => return Err(parse_err(1, "empty file")),
    }
    let mut per_frame: BTreeMap<usize, BTreeMap<u32, u32>> = BTreeMap::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(line, format!("row has {} fields, expected 3", fields.len())));
        }
        let t = field_usize(fields[0], line, "frame index")?;
        let instance = field_u32(fields[1], line, "instance id")?;
        let track = field_u32(fields[2], line, "track id")?;
        if per_frame.entry(t).or_default().insert(instance, track).is_some() {
            return Err(parse_err(line, format!("duplicate instance {instance} in frame {t}")));
        }
    }
    let num_frames = per_frame.keys().next_back().map_or(0, |&t| t + 1);
    Ok((0..num_frames).map(|t| per_frame.remove(&t).unwrap_or_default()).collect())
}

// ==================== loss log ====================

pub const LOSS_LOG_HEADER: &str = "epoch,loss";

/// One row per completed epoch, 1-based.
pub fn write_loss_log(history: &[f64]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for (i, loss) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, fmt_g(*loss)));
    }
    out
}

pub fn read_loss_log(text: &str) -> Result<Vec<f64>, IoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == LOSS_LOG_HEADER => {}
        Some((_, header)) => {
            return Err(parse_err(1, format!("unexpected header '{}'", header.trim_end())))
        }
        None => return Err(parse_err(1, "empty file")),
    }
    let mut history = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let Some((epoch, loss)) = row.split_once(',') else {
            return Err(parse_err(line, "expected 'epoch,loss'"));
        };
        let epoch = field_usize(epoch, line, "epoch")?;
        if epoch != history.len() + 1 {
            return Err(parse_err(line, format!("epoch {epoch} out of order")));
        }
        history.push(field_f64(loss, line, "loss")?);
    }
    Ok(history)
}
