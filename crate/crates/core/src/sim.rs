//! Agent-based colony simulator for rod-shaped cells.
//!
//! Cells are spherocylinders parameterized by pole-to-pole length and cap
//! radius (caps are inscribed: the axis segment spans `length - 2 * radius`,
//! so `length -> 2 * radius` degenerates toward a sphere). Lengths grow
//! exponentially; a cell splits into two equal halves placed end-to-end once
//! it reaches the division length, with a small random tilt between the
//! daughters. Overlaps are resolved by iterative pairwise push-apart, not a
//! physics engine. Every frame emits sampled point clouds as instances whose
//! instance id equals the ground-truth track id, so the lineage doubles as an
//! oracle segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::UnitSphere;
use thiserror::Error;

use crate::model::{
    DivisionEvent, FrameObservations, GroundTruthLineage, InstanceObservation, Sequence, Track,
    Vec3,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("expected final population {expected:.0} exceeds the guard of {cap} agents")]
    PopulationGuard { expected: f64, cap: usize },
}

/// One live cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAgent {
    pub centroid: Vec3,
    /// Unit vector along the rod axis.
    pub orientation: Vec3,
    /// Pole-to-pole length; at least `radius`.
    pub length: f64,
    pub radius: f64,
    pub track_id: u32,
    /// 0 for seed cells.
    pub parent_id: u32,
}

impl CellAgent {
    /// Effective cap radius: shrinks for near-degenerate short cells.
    fn cap_radius(&self) -> f64 {
        self.radius.min(self.length / 2.0)
    }

    /// Half-length of the cap-center axis segment.
    fn half_axis(&self) -> f64 {
        (self.length / 2.0 - self.cap_radius()).max(0.0)
    }

    fn axis_endpoints(&self) -> (Vec3, Vec3) {
        let h = self.half_axis();
        (self.centroid - self.orientation * h, self.centroid + self.orientation * h)
    }

    /// Geometric volume of the spherocylinder.
    pub fn volume(&self) -> f64 {
        let r = self.cap_radius();
        let a = (self.length - 2.0 * r).max(0.0);
        std::f64::consts::PI * r * r * a + 4.0 / 3.0 * std::f64::consts::PI * r.powi(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed_count: usize,
    pub frames: usize,
    /// Seconds between frames.
    pub frame_interval_s: f64,
    /// Per-second exponential length growth rate.
    pub growth_rate: f64,
    /// Length at which a cell divides.
    pub division_length: f64,
    /// Maximum tilt of each daughter away from the parent axis, degrees.
    pub division_noise_deg: f64,
    pub domain_extent: Vec3,
    /// Sampled point count for a freshly divided cell; larger cells scale up
    /// proportionally to their volume.
    pub points_per_cell: usize,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed_count: 1,
            frames: 40,
            frame_interval_s: 10.0,
            growth_rate: 0.0071,
            division_length: 20.0,
            division_noise_deg: 6.0,
            domain_extent: Vec3::new(80.0, 80.0, 40.0),
            points_per_cell: 60,
            rng_seed: 1,
        }
    }
}

const POPULATION_CAP: usize = 10_000;
const RELAX_ITERATIONS: usize = 50;
/// Two rods are pushed apart until their axis segments are at least this
/// fraction of the radius sum apart.
const SEPARATION_FRACTION: f64 = 0.9;

fn validate(config: &SimConfig) -> Result<(), SimError> {
    let bad = |what: &str| Err(SimError::InvalidConfig(what.to_string()));
    if config.seed_count < 1 {
        return bad("seed_count must be >= 1");
    }
    if config.frames < 2 {
        return bad("frames must be >= 2");
    }
    if !(config.frame_interval_s > 0.0) {
        return bad("frame_interval_s must be positive");
    }
    if !(config.growth_rate > 0.0) {
        return bad("growth_rate must be positive");
    }
    if !(config.division_length > 0.0) {
        return bad("division_length must be positive");
    }
    if config.division_noise_deg < 0.0 {
        return bad("division_noise_deg must be >= 0");
    }
    if config.domain_extent.iter().any(|&e| !(e > 0.0)) {
        return bad("domain_extent components must be positive");
    }
    if config.points_per_cell < 30 {
        return bad("points_per_cell must be >= 30");
    }
    // Population multiplies by e^(growth * time); biomass and cell count grow
    // together under exponential length growth.
    let total_time = config.frame_interval_s * (config.frames - 1) as f64;
    let expected = config.seed_count as f64 * (config.growth_rate * total_time).exp();
    if expected > POPULATION_CAP as f64 {
        return Err(SimError::PopulationGuard { expected, cap: POPULATION_CAP });
    }
    Ok(())
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let v: [f64; 3] = rng.sample(UnitSphere);
    Vec3::new(v[0], v[1], v[2])
}

/// Deterministic orthonormal basis completing `axis`.
fn perpendicular_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let reference = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = axis.cross(&reference).normalize();
    let b2 = axis.cross(&b1);
    (b1, b2)
}

/// Uniformly samples `n` points inside the agent's spherocylinder.
pub fn sample_rod_points(agent: &CellAgent, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let r = agent.cap_radius();
    let h = agent.half_axis();
    let v_cyl = std::f64::consts::PI * r * r * (2.0 * h);
    let v_ball = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
    let cyl_share = v_cyl / (v_cyl + v_ball);
    let (b1, b2) = perpendicular_basis(&agent.orientation);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.gen::<f64>() < cyl_share {
            let z = rng.gen_range(-h..=h);
            let rho = r * rng.gen::<f64>().sqrt();
            let phi = rng.gen::<f64>() * std::f64::consts::TAU;
            out.push(
                agent.centroid
                    + agent.orientation * z
                    + b1 * (rho * phi.cos())
                    + b2 * (rho * phi.sin()),
            );
        } else {
            // Caps: a uniform ball split into two hemispheres, each attached
            // to the axis end it points away from.
            let dir = unit_vector(rng);
            let p = dir * (r * rng.gen::<f64>().cbrt());
            let end = if p.dot(&agent.orientation) >= 0.0 { h } else { -h };
            out.push(agent.centroid + agent.orientation * end + p);
        }
    }
    out
}

/// Splits a parent into two half-length daughters placed end-to-end along the
/// parent axis, each tilted by up to `noise_deg`. Track ids are left at 0 for
/// the caller to assign; `parent_id` is set to the parent's track.
pub fn divide(parent: &CellAgent, noise_deg: f64, rng: &mut ChaCha8Rng) -> (CellAgent, CellAgent) {
    let u = parent.orientation;
    let offset = u * (parent.length / 4.0);
    let mut make = |centroid: Vec3| {
        let theta = noise_deg.to_radians() * rng.gen::<f64>();
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        let (b1, b2) = perpendicular_basis(&u);
        let perp = b1 * phi.cos() + b2 * phi.sin();
        let orientation = (u * theta.cos() + perp * theta.sin()).normalize();
        CellAgent {
            centroid,
            orientation,
            length: parent.length / 2.0,
            radius: parent.radius,
            track_id: 0,
            parent_id: parent.track_id,
        }
    };
    (make(parent.centroid - offset), make(parent.centroid + offset))
}

/// Closest distance between two segments [a0, a1] and [b0, b1].
fn segment_distance(a0: Vec3, a1: Vec3, b0: Vec3, b1: Vec3) -> f64 {
    let d1 = a1 - a0;
    let d2 = b1 - b0;
    let r = a0 - b0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= 1e-12 && e <= 1e-12 {
        return (a0 - b0).norm();
    }
    if a <= 1e-12 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-12 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let s0 = if denom.abs() > 1e-12 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let t0 = ((b * s0 + f) / e).clamp(0.0, 1.0);
            let s1 = ((b * t0 - c) / a).clamp(0.0, 1.0);
            s = s1;
            t = t0;
        }
    }
    let closest_a = a0 + d1 * s;
    let closest_b = b0 + d2 * t;
    (closest_a - closest_b).norm()
}

/// Distance between the cap-center axis segments of two agents.
pub fn axis_distance(a: &CellAgent, b: &CellAgent) -> f64 {
    let (a0, a1) = a.axis_endpoints();
    let (b0, b1) = b.axis_endpoints();
    segment_distance(a0, a1, b0, b1)
}

/// Iterative pairwise separation until every axis pair is at least
/// `SEPARATION_FRACTION * (r_i + r_j)` apart, capped at `RELAX_ITERATIONS`.
fn relax(agents: &mut [CellAgent]) {
    for _ in 0..RELAX_ITERATIONS {
        let mut moved = false;
        for i in 0..agents.len() {
            for j in i + 1..agents.len() {
                let need = SEPARATION_FRACTION * (agents[i].radius + agents[j].radius);
                let dist = axis_distance(&agents[i], &agents[j]);
                if dist >= need {
                    continue;
                }
                let mut dir = agents[j].centroid - agents[i].centroid;
                if dir.norm() < 1e-9 {
                    dir = Vec3::x();
                }
                let dir = dir.normalize();
                let shift = (need - dist) / 2.0 + 1e-6;
                agents[i].centroid -= dir * shift;
                agents[j].centroid += dir * shift;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

struct TrackBuilder {
    track_id: u32,
    parent_id: u32,
    t_init: usize,
    centroids: Vec<Vec3>,
}

/// Runs the colony forward and emits the observed sequence plus its lineage.
/// Bit-reproducible for a fixed config.
pub fn simulate(config: &SimConfig) -> Result<(Sequence, GroundTruthLineage), SimError> {
    validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let radius = config.division_length / 8.0;
    let dt = config.frame_interval_s;
    let growth_factor = (config.growth_rate * dt).exp();
    // Point budget is proportional to geometric volume; a freshly divided
    // cell (half the division length) gets `points_per_cell` points.
    let newborn = CellAgent {
        centroid: Vec3::zeros(),
        orientation: Vec3::x(),
        length: config.division_length / 2.0,
        radius,
        track_id: 0,
        parent_id: 0,
    };
    let density = config.points_per_cell as f64 / newborn.volume();

    let mut agents: Vec<CellAgent> = Vec::new();
    // Division threshold jitter per agent: -1, 0 or +1 frames worth of growth.
    let mut jitter: Vec<i8> = Vec::new();
    let mut next_track: u32 = 1;
    let mut builders: Vec<TrackBuilder> = Vec::new();
    let mut events: Vec<DivisionEvent> = Vec::new();

    for _ in 0..config.seed_count {
        let frac = Vec3::new(
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
        );
        let centroid = Vec3::new(
            frac.x * config.domain_extent.x,
            frac.y * config.domain_extent.y,
            frac.z * config.domain_extent.z,
        );
        let length = config.division_length * rng.gen_range(0.50..0.55);
        agents.push(CellAgent {
            centroid,
            orientation: unit_vector(&mut rng),
            length,
            radius,
            track_id: next_track,
            parent_id: 0,
        });
        jitter.push(rng.gen_range(-1..=1) as i8);
        builders.push(TrackBuilder {
            track_id: next_track,
            parent_id: 0,
            t_init: 0,
            centroids: Vec::new(),
        });
        next_track += 1;
    }
    relax(&mut agents);

    let mut frames: Vec<FrameObservations> = Vec::new();
    for t in 0..config.frames {
        if t > 0 {
            for agent in agents.iter_mut() {
                agent.length *= growth_factor;
            }
            let mut new_agents: Vec<CellAgent> = Vec::new();
            let mut new_jitter: Vec<i8> = Vec::new();
            for (k, agent) in agents.iter().enumerate() {
                let threshold =
                    config.division_length * (config.growth_rate * dt * jitter[k] as f64).exp();
                if agent.length >= threshold {
                    let (da, db) = divide(agent, config.division_noise_deg, &mut rng);
                    let id_a = next_track;
                    let id_b = next_track + 1;
                    next_track += 2;
                    for (id, daughter) in [(id_a, da), (id_b, db)] {
                        let mut daughter = daughter;
                        daughter.track_id = id;
                        builders.push(TrackBuilder {
                            track_id: id,
                            parent_id: agent.track_id,
                            t_init: t,
                            centroids: Vec::new(),
                        });
                        new_agents.push(daughter);
                        new_jitter.push(rng.gen_range(-1..=1) as i8);
                    }
                    events.push(DivisionEvent {
                        parent: agent.track_id,
                        child_a: id_a,
                        child_b: id_b,
                        frame: t,
                    });
                } else {
                    new_agents.push(agent.clone());
                    new_jitter.push(jitter[k]);
                }
            }
            agents = new_agents;
            jitter = new_jitter;
            relax(&mut agents);
        }

        let mut observations = Vec::with_capacity(agents.len());
        for agent in &agents {
            let n = ((density * agent.volume()).round() as usize).max(8);
            let points = sample_rod_points(agent, n, &mut rng);
            let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
            let mut min = points[0];
            let mut max = points[0];
            for p in &points {
                for k in 0..3 {
                    min[k] = min[k].min(p[k]);
                    max[k] = max[k].max(p[k]);
                }
            }
            let builder = builders
                .iter_mut()
                .find(|b| b.track_id == agent.track_id)
                .expect("every live agent has a track builder");
            builder.centroids.push(centroid);
            observations.push(InstanceObservation {
                frame_index: t,
                instance_id: agent.track_id,
                centroid,
                bbox_min: min,
                bbox_extent: max - min,
                volume: points.len() as f64,
                points,
            });
        }
        frames.push(
            FrameObservations::new(t, observations).expect("track ids are unique per frame"),
        );
    }

    let tracks = builders
        .into_iter()
        .map(|b| Track {
            track_id: b.track_id,
            t_init: b.t_init,
            t_fin: b.t_init + b.centroids.len() - 1,
            centroids: b.centroids,
            parent_id: b.parent_id,
        })
        .collect();
    Ok((
        Sequence { frames, frame_interval: config.frame_interval_s },
        GroundTruthLineage { tracks, division_events: events },
    ))
}
