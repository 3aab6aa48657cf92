//! Batch front end for the cell-tracking pipeline: simulate a colony, train
//! the association scorer, track a sequence, score the result against a
//! reference, and export per-track plot series.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use biotrack::features::{ProjectionMode, SpatiotemporalFeature};
use biotrack::io;
use biotrack::metrics::{
    majority_track_map, DivisionMatching, EvaluationReport, LineageGraph, VertexCorrespondence,
};
use biotrack::model::{DivisionEvent, GroundTruthLineage, Sequence, Track, validate_sequence};
use biotrack::scorer::{make_training_pairs, train, ScorerError, ScorerModel, TrainConfig};
use biotrack::sim::{simulate, SimConfig};
use biotrack::tracker::{track_sequence, TrackError, TrackerConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

struct CliError {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, message: message.into() }
}

fn data(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_DATA, message: message.into() }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "biotrack",
    version,
    about = "Track dividing rod-shaped cells across 3D point-cloud frames"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ProjectionArg {
    /// Look for candidates around the source's current position.
    ConstantPosition,
    /// Extrapolate the source's last displacement first.
    ConstantVelocity,
}

impl From<ProjectionArg> for ProjectionMode {
    fn from(p: ProjectionArg) -> Self {
        match p {
            ProjectionArg::ConstantPosition => ProjectionMode::ConstantPosition,
            ProjectionArg::ConstantVelocity => ProjectionMode::ConstantVelocity,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Grow a synthetic colony and write features, point clouds, and
    /// ground-truth tracks.
    Simulate {
        /// Flat `key = value` file mirroring the simulation settings.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the neural association scorer on a sequence with known lineage.
    Train {
        /// Feature table of the training sequence.
        #[arg(long)]
        features: PathBuf,
        /// Ground-truth track file for the same sequence.
        #[arg(long)]
        tracks: PathBuf,
        /// Where to write the model file.
        #[arg(long)]
        model_out: PathBuf,
        /// Loss log destination; defaults to the model path with a
        /// `loss.csv` extension.
        #[arg(long)]
        loss_out: Option<PathBuf>,
        /// History depth r: feature windows span r + 1 source frames.
        #[arg(long, default_value_t = 2)]
        r: usize,
        /// Nearest-neighbour candidates per source.
        #[arg(long, default_value_t = 4)]
        candidates: usize,
        /// Hidden layer sizes, comma separated.
        #[arg(long, default_value = "64,32")]
        hidden: String,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Seed for weight initialization and batch shuffling.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Link instances across frames and emit tracks plus division events.
    Track {
        #[arg(long)]
        features: PathBuf,
        /// Directory holding per-frame `points_NNNN.csv` files; without it,
        /// divisions cannot be geometrically confirmed.
        #[arg(long)]
        points_dir: Option<PathBuf>,
        /// Model file path, or the literal `baseline` for the
        /// distance-based scorer.
        #[arg(long)]
        model: String,
        #[arg(long)]
        tracks_out: PathBuf,
        #[arg(long)]
        events_out: PathBuf,
        /// Optional per-frame instance-to-track table, needed later to
        /// evaluate against a reference with different labels.
        #[arg(long)]
        id_map_out: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 4)]
        candidates: usize,
        #[arg(long, value_enum, default_value_t = ProjectionArg::ConstantPosition)]
        projection: ProjectionArg,
        /// Candidates scoring below this are dropped before matching.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Daughter/parent volume ratio accepted as a division.
        #[arg(long, default_value_t = 0.35)]
        band_low: f64,
        #[arg(long, default_value_t = 0.65)]
        band_high: f64,
    },
    /// Score a computed track file against a reference.
    Evaluate {
        #[arg(long)]
        computed: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Division events of the computed result; derived from the track
        /// file when absent.
        #[arg(long)]
        computed_events: Option<PathBuf>,
        #[arg(long)]
        reference_events: Option<PathBuf>,
        /// Instance-to-track table of the computed result. Without it,
        /// labels are compared as-is.
        #[arg(long)]
        computed_id_map: Option<PathBuf>,
        /// Frame tolerance when pairing division events.
        #[arg(long, default_value_t = 1)]
        tol: usize,
        /// Pair divisions by time alone, ignoring parent identity.
        #[arg(long)]
        time_only: bool,
    },
    /// Export space-time and volume-over-time series for one track.
    PlotData {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Track label to follow.
        #[arg(long)]
        track: u32,
        #[arg(long)]
        out: PathBuf,
        /// Events file naming each division's continuation daughter;
        /// derived from the track file when absent.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Instance-to-track table when the track file does not use
        /// instance labels.
        #[arg(long)]
        id_map: Option<PathBuf>,
        /// Stop at the track's own last frame instead of following the
        /// continuation daughter through divisions.
        #[arg(long)]
        no_follow: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Train {
            features,
            tracks,
            model_out,
            loss_out,
            r,
            candidates,
            hidden,
            learning_rate,
            epochs,
            batch_size,
            seed,
        } => {
            let loss_out =
                loss_out.unwrap_or_else(|| model_out.with_extension("loss.csv"));
            let config = TrainConfig {
                hidden: parse_hidden(&hidden)?,
                learning_rate,
                epochs,
                batch_size,
                rng_seed: seed,
            };
            cmd_train(&features, &tracks, &model_out, &loss_out, r, candidates, &config)
        }
        Command::Track {
            features,
            points_dir,
            model,
            tracks_out,
            events_out,
            id_map_out,
            r,
            candidates,
            projection,
            threshold,
            band_low,
            band_high,
        } => {
            let config = TrackerConfig {
                r,
                n_candidates: candidates,
                projection: projection.into(),
                score_threshold: threshold,
                division_band: (band_low, band_high),
            };
            cmd_track(
                &features,
                points_dir.as_deref(),
                &model,
                &tracks_out,
                &events_out,
                id_map_out.as_deref(),
                &config,
            )
        }
        Command::Evaluate {
            computed,
            reference,
            computed_events,
            reference_events,
            computed_id_map,
            tol,
            time_only,
        } => cmd_evaluate(
            &computed,
            &reference,
            computed_events.as_deref(),
            reference_events.as_deref(),
            computed_id_map.as_deref(),
            tol,
            time_only,
        ),
        Command::PlotData { tracks, features, track, out, events, id_map, no_follow } => {
            cmd_plot_data(
                &tracks,
                &features,
                track,
                &out,
                events.as_deref(),
                id_map.as_deref(),
                no_follow,
            )
        }
    }
}

// ==================== shared file helpers ====================

fn read_text(path: &Path, code: u8) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError {
        code,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| data(format!("cannot write {}: {e}", path.display())))
}

fn read_sequence(path: &Path) -> Result<Sequence, CliError> {
    let text = read_text(path, EXIT_DATA)?;
    io::read_feature_table(&text, 1.0)
        .map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_track_file(path: &Path) -> Result<Vec<Track>, CliError> {
    let text = read_text(path, EXIT_DATA)?;
    io::read_tracks(&text).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// A parented track must begin on the frame after its parent ends;
/// otherwise the lineage graph would contain a same-frame edge.
fn check_lineage(tracks: &[Track], path: &Path) -> Result<(), CliError> {
    for t in tracks.iter().filter(|t| t.parent_id != 0) {
        let Some(parent) = tracks.iter().find(|p| p.track_id == t.parent_id) else {
            return Err(data(format!(
                "{}: track {} names missing parent {}",
                path.display(),
                t.track_id,
                t.parent_id
            )));
        };
        if t.t_init != parent.t_fin + 1 {
            return Err(data(format!(
                "{}: track {} starts at frame {} but its parent {} ends at frame {}",
                path.display(),
                t.track_id,
                t.t_init,
                parent.track_id,
                parent.t_fin
            )));
        }
    }
    Ok(())
}

fn read_events_or_derive(
    path: Option<&Path>,
    tracks: &[Track],
) -> Result<Vec<DivisionEvent>, CliError> {
    match path {
        Some(p) => {
            let text = read_text(p, EXIT_DATA)?;
            io::read_events(&text).map_err(|e| data(format!("{}: {e}", p.display())))
        }
        None => Ok(io::events_from_tracks(tracks)),
    }
}

fn parse_hidden(spec: &str) -> Result<Vec<usize>, CliError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad hidden layer size '{}'", s.trim())))
        })
        .collect()
}

// ==================== simulate ====================

fn cmd_simulate(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = read_text(config_path, EXIT_USAGE)?;
    let map = io::parse_config(&text)
        .map_err(|e| usage(format!("{}: {e}", config_path.display())))?;
    let config = sim_config_from_map(&map)?;
    let (seq, gt) = simulate(&config).map_err(|e| usage(e.to_string()))?;

    fs::create_dir_all(out_dir)
        .map_err(|e| data(format!("cannot create {}: {e}", out_dir.display())))?;
    write_text(&out_dir.join("features.csv"), &io::write_feature_table(&seq))?;
    for frame in &seq.frames {
        write_text(
            &out_dir.join(io::points_file_name(frame.frame_index)),
            &io::write_points_frame(frame),
        )?;
    }
    write_text(&out_dir.join("tracks_gt.txt"), &io::write_tracks(&gt.tracks))?;

    println!(
        "simulated {} frames: {} tracks, {} divisions -> {}",
        seq.num_frames(),
        gt.tracks.len(),
        gt.division_events.len(),
        out_dir.display()
    );
    Ok(())
}

fn sim_config_from_map(map: &BTreeMap<String, String>) -> Result<SimConfig, CliError> {
    let mut config = SimConfig::default();
    for (key, value) in map {
        let bad = |what: &str| usage(format!("config key '{key}': bad {what} '{value}'"));
        match key.as_str() {
            "seed_count" => config.seed_count = value.parse().map_err(|_| bad("count"))?,
            "frames" => config.frames = value.parse().map_err(|_| bad("count"))?,
            "frame_interval_s" => {
                config.frame_interval_s = value.parse().map_err(|_| bad("number"))?
            }
            "growth_rate" => config.growth_rate = value.parse().map_err(|_| bad("number"))?,
            "division_length" => {
                config.division_length = value.parse().map_err(|_| bad("number"))?
            }
            "division_noise_deg" => {
                config.division_noise_deg = value.parse().map_err(|_| bad("number"))?
            }
            "domain_extent" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad("extent triple, expected 'x,y,z'"));
                }
                for (k, part) in parts.iter().enumerate() {
                    config.domain_extent[k] = part.parse().map_err(|_| bad("number"))?;
                }
            }
            "points_per_cell" => {
                config.points_per_cell = value.parse().map_err(|_| bad("count"))?
            }
            "rng_seed" => config.rng_seed = value.parse().map_err(|_| bad("seed"))?,
            _ => return Err(usage(format!("unknown config key '{key}'"))),
        }
    }
    Ok(config)
}

// ==================== train ====================

fn cmd_train(
    features: &Path,
    tracks: &Path,
    model_out: &Path,
    loss_out: &Path,
    r: usize,
    candidates: usize,
    config: &TrainConfig,
) -> Result<(), CliError> {
    let seq = read_sequence(features)?;
    let gt_tracks = read_track_file(tracks)?;
    let gt = GroundTruthLineage {
        division_events: io::events_from_tracks(&gt_tracks),
        tracks: gt_tracks,
    };

    let set = make_training_pairs(&seq, &gt, r, candidates);
    let (model, history) = train(&set, config).map_err(|e| match e {
        ScorerError::BadHyper(_) => usage(e.to_string()),
        other => data(other.to_string()),
    })?;

    ScorerModel::Neural(model)
        .save(model_out)
        .map_err(|e| data(format!("cannot write {}: {e}", model_out.display())))?;
    write_text(loss_out, &io::write_loss_log(&history))?;

    match history.last() {
        Some(last) => println!(
            "trained on {} samples for {} epochs: loss {} -> {}",
            set.len(),
            history.len(),
            io::fmt_g(history[0]),
            io::fmt_g(*last)
        ),
        None => println!("initialized untrained model from {} samples", set.len()),
    }
    Ok(())
}

// ==================== track ====================

fn cmd_track(
    features: &Path,
    points_dir: Option<&Path>,
    model_arg: &str,
    tracks_out: &Path,
    events_out: &Path,
    id_map_out: Option<&Path>,
    config: &TrackerConfig,
) -> Result<(), CliError> {
    let model = if model_arg == "baseline" {
        ScorerModel::DistanceBaseline {
            scale: None,
            use_velocity: config.projection == ProjectionMode::ConstantVelocity,
        }
    } else {
        ScorerModel::load(Path::new(model_arg))
            .map_err(|e| data(format!("cannot load model {model_arg}: {e}")))?
    };
    if let ScorerModel::Neural(net) = &model {
        let expected = net.input_width();
        let found = SpatiotemporalFeature::width_for(config.r);
        if expected != found {
            return Err(usage(format!(
                "model expects input width {expected}, but history depth r={} yields width {found}",
                config.r
            )));
        }
    }

    let mut seq = read_sequence(features)?;
    if let Some(dir) = points_dir {
        for t in 0..seq.num_frames() {
            let path = dir.join(io::points_file_name(t));
            let text = read_text(&path, EXIT_DATA)?;
            let points =
                io::read_points_frame(&text).map_err(|e| data(format!("{}: {e}", path.display())))?;
            seq.frames[t] = io::with_points(&seq.frames[t], &points)
                .map_err(|e| data(format!("{}: {e}", path.display())))?;
        }
    }
    let violations = validate_sequence(&seq);
    if !violations.is_empty() {
        let shown = violations.iter().take(5).cloned().collect::<Vec<_>>().join("; ");
        return Err(data(format!(
            "input sequence is inconsistent ({} problem(s)): {shown}",
            violations.len()
        )));
    }

    let result = track_sequence(&seq, &model, config).map_err(|e| match e {
        TrackError::BadConfig(_) => usage(e.to_string()),
        other => data(other.to_string()),
    })?;

    write_text(tracks_out, &io::write_tracks(&result.tracks))?;
    write_text(events_out, &io::write_events(&result.division_events))?;
    if let Some(path) = id_map_out {
        write_text(path, &io::write_id_maps(&result.id_maps))?;
    }

    println!(
        "tracked {} frames: {} tracks, {} division events",
        seq.num_frames(),
        result.tracks.len(),
        result.division_events.len()
    );
    Ok(())
}

// ==================== evaluate ====================

fn cmd_evaluate(
    computed: &Path,
    reference: &Path,
    computed_events: Option<&Path>,
    reference_events: Option<&Path>,
    computed_id_map: Option<&Path>,
    tol: usize,
    time_only: bool,
) -> Result<(), CliError> {
    let computed_tracks = read_track_file(computed)?;
    check_lineage(&computed_tracks, computed)?;
    let reference_tracks = read_track_file(reference)?;
    check_lineage(&reference_tracks, reference)?;
    let detected = read_events_or_derive(computed_events, &computed_tracks)?;
    let gt_events = read_events_or_derive(reference_events, &reference_tracks)?;

    let computed_graph = LineageGraph::from_tracks(&computed_tracks);
    let reference_graph = LineageGraph::from_tracks(&reference_tracks);

    let id_maps = match computed_id_map {
        Some(path) => {
            let text = read_text(path, EXIT_DATA)?;
            Some(io::read_id_maps(&text).map_err(|e| data(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let correspondence = match &id_maps {
        Some(maps) => VertexCorrespondence::from_id_maps(maps),
        None => VertexCorrespondence::identity(&computed_graph),
    };
    let parent_map = id_maps.as_ref().map(|maps| majority_track_map(maps));
    let matching =
        if time_only { DivisionMatching::TimeOnly } else { DivisionMatching::ParentIdentity };

    let report = EvaluationReport::build(
        &computed_graph,
        &reference_graph,
        &correspondence,
        &detected,
        &gt_events,
        tol,
        matching,
        parent_map.as_ref(),
    )
    .map_err(|e| data(e.to_string()))?;

    println!(
        "lineage: {} reference edges; {} to add, {} to delete, {} to retag",
        reference_graph.num_edges(),
        report.breakdown.ed,
        report.breakdown.ea,
        report.breakdown.ec
    );
    println!(
        "divisions: {} matched, {} spurious, {} missed (frame tolerance {tol}, {})",
        report.division.true_positives,
        report.division.false_positives,
        report.division.false_negatives,
        if time_only { "time only" } else { "parent identity" }
    );
    println!();
    print!("{}", report.key_values());
    Ok(())
}

// ==================== plot data ====================

fn cmd_plot_data(
    tracks: &Path,
    features: &Path,
    track_id: u32,
    out_dir: &Path,
    events: Option<&Path>,
    id_map: Option<&Path>,
    no_follow: bool,
) -> Result<(), CliError> {
    let track_list = read_track_file(tracks)?;
    let seq = read_sequence(features)?;
    let event_list = read_events_or_derive(events, &track_list)?;
    let id_maps = match id_map {
        Some(path) => {
            let text = read_text(path, EXIT_DATA)?;
            Some(io::read_id_maps(&text).map_err(|e| data(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };

    // Follow the continuation daughter through divisions so the series
    // shows the sawtooth of repeated growth and halving.
    let mut chain = vec![track_id];
    if !no_follow {
        let mut current = track_id;
        while let Some(event) = event_list.iter().find(|e| e.parent == current) {
            if chain.contains(&event.child_a) {
                return Err(data(format!("division events cycle at track {}", event.child_a)));
            }
            current = event.child_a;
            chain.push(current);
        }
    }

    let mut spacetime = String::from("t,x,y\n");
    let mut volume = String::from("t,vol\n");
    for label in &chain {
        let track = track_list
            .iter()
            .find(|t| t.track_id == *label)
            .ok_or_else(|| data(format!("track {label} not found in {}", tracks.display())))?;
        for t in track.t_init..=track.t_fin {
            let instance = match &id_maps {
                Some(maps) => maps
                    .get(t)
                    .and_then(|m| m.iter().find(|(_, &tr)| tr == *label))
                    .map(|(&i, _)| i)
                    .ok_or_else(|| {
                        data(format!("id map has no instance for track {label} in frame {t}"))
                    })?,
                None => *label,
            };
            let obs = seq
                .frames
                .get(t)
                .and_then(|f| f.get(instance))
                .ok_or_else(|| {
                    data(format!("feature table lacks instance {instance} in frame {t}"))
                })?;
            spacetime.push_str(&format!(
                "{t},{},{}\n",
                io::fmt_g(obs.centroid.x),
                io::fmt_g(obs.centroid.y)
            ));
            volume.push_str(&format!("{t},{}\n", io::fmt_g(obs.volume)));
        }
    }

    fs::create_dir_all(out_dir)
        .map_err(|e| data(format!("cannot create {}: {e}", out_dir.display())))?;
    let spacetime_path = out_dir.join(format!("spacetime_{track_id}.csv"));
    let volume_path = out_dir.join(format!("volume_{track_id}.csv"));
    write_text(&spacetime_path, &spacetime)?;
    write_text(&volume_path, &volume)?;

    println!(
        "wrote {} and {} ({} tracks in chain)",
        spacetime_path.display(),
        volume_path.display(),
        chain.len()
    );
    Ok(())
}
