//! Trajectory text files and synthetic scenes.
//!
//! The text format holds one record per line: `frame_id agent_id x y`,
//! separated by whitespace. Frame ids are spaced uniformly; the spacing is
//! the smallest positive difference between two distinct ids in the file.
//! Lines that are blank or start with `#` are ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LtnError, Result};
use crate::config::ModelConfig;
use crate::scene::{
    build_prediction_instances, default_perception_distance, AgentTrack, Category, Horizon, InstanceOptions, Point,
    PredictionInstance, Scene,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub frame_id: i64,
    pub agent_id: u64,
    pub x: f64,
    pub y: f64,
}

fn integral(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| LtnError::Parse(format!("line {line}: bad {what} `{field}`")))?;
    if !v.is_finite() || v.fract() != 0.0 {
        return Err(LtnError::Parse(format!("line {line}: {what} `{field}` is not an integer")));
    }
    Ok(v)
}

/// Parses records, rejecting malformed lines and repeated
/// `(frame_id, agent_id)` pairs.
pub fn parse_records(text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(LtnError::Parse(format!("line {line}: expected 4 columns, found {}", fields.len())));
        }
        let frame_id = integral(fields[0], line, "frame id")? as i64;
        let agent = integral(fields[1], line, "agent id")?;
        if agent < 0.0 {
            return Err(LtnError::Parse(format!("line {line}: negative agent id")));
        }
        let coord = |f: &str| -> Result<f64> {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| LtnError::Parse(format!("line {line}: bad coordinate `{f}`")))
        };
        let rec = TrajectoryRecord {
            frame_id,
            agent_id: agent as u64,
            x: coord(fields[2])?,
            y: coord(fields[3])?,
        };
        if !seen.insert((rec.frame_id, rec.agent_id)) {
            return Err(LtnError::Parse(format!(
                "line {line}: duplicate record for frame {} agent {}",
                rec.frame_id, rec.agent_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Builds scenes from records. Frame ids are mapped onto a step grid;
/// stretches of frames with no record at all separate scenes, and an id
/// may recur in several scenes. Within a scene, a track with a gap is split
/// and the later pieces get fresh ids above the largest id in the file. The longest track (lowest id on ties)
/// is the robot; it stays in `agents` as well.
pub fn scenes_from_records(records: &[TrajectoryRecord], dt: f64) -> Result<Vec<Scene>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let mut frames: Vec<i64> = records.iter().map(|r| r.frame_id).collect();
    frames.sort_unstable();
    frames.dedup();
    let spacing = frames.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(1);
    let base = frames[0];
    let mut by_agent: BTreeMap<u64, Vec<(i64, Point)>> = BTreeMap::new();
    for r in records {
        let off = r.frame_id - base;
        if off % spacing != 0 {
            return Err(LtnError::Parse(format!(
                "frame {} is off the {spacing}-frame grid",
                r.frame_id
            )));
        }
        by_agent.entry(r.agent_id).or_default().push((off / spacing, Point::new(r.x, r.y)));
    }

    // Scene boundaries: gaps in the set of occupied steps.
    let steps: Vec<i64> = frames.iter().map(|f| (f - base) / spacing).collect();
    let mut bounds = vec![(steps[0], steps[0])];
    for &s in &steps[1..] {
        let last = bounds.last_mut().expect("non-empty");
        if s == last.1 + 1 {
            last.1 = s;
        } else {
            bounds.push((s, s));
        }
    }

    let mut next_id = by_agent.keys().next_back().copied().unwrap_or(0) + 1;
    let mut per_scene: Vec<Vec<AgentTrack>> = vec![Vec::new(); bounds.len()];
    for (&id, recs) in &mut by_agent {
        recs.sort_by_key(|r| r.0);
        let mut pieces: Vec<Vec<(i64, Point)>> = Vec::new();
        for &r in recs.iter() {
            match pieces.last_mut() {
                Some(p) if p.last().expect("non-empty").0 + 1 == r.0 => p.push(r),
                _ => pieces.push(vec![r]),
            }
        }
        let mut used = HashSet::new();
        for piece in pieces {
            let start = piece[0].0;
            let scene = bounds.partition_point(|b| b.1 < start);
            let track_id = if used.insert(scene) {
                id
            } else {
                next_id += 1;
                next_id - 1
            };
            let (lo, _) = bounds[scene];
            let positions = piece.iter().map(|r| r.1).collect();
            per_scene[scene].push(AgentTrack::contiguous(track_id, Category::Pedestrian, start - lo, positions));
        }
    }

    let mut scenes = Vec::new();
    for mut agents in per_scene {
        agents.sort_by_key(|a| a.id);
        let robot = agents
            .iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then(b.id.cmp(&a.id)))
            .expect("every scene has a record")
            .clone();
        scenes.push(Scene {
            robot,
            agents,
            dt,
            map: None,
        });
    }
    Ok(scenes)
}

pub fn load_trajectory_text(text: &str, dt: f64) -> Result<Vec<Scene>> {
    scenes_from_records(&parse_records(text)?, dt)
}

pub fn load_trajectory_file(path: &Path, dt: f64) -> Result<Vec<Scene>> {
    load_trajectory_text(&std::fs::read_to_string(path)?, dt)
}

/// Writes scenes in the text format. Scene `k` is shifted so that at least
/// one empty frame separates it from scene `k-1`, which makes the output
/// load back into the same scenes.
pub fn scenes_to_text(scenes: &[Scene]) -> String {
    let mut out = String::new();
    let mut offset = 0i64;
    for scene in scenes {
        let lo = scene.agents.iter().filter_map(AgentTrack::first_frame).min().unwrap_or(0);
        let hi = scene.agents.iter().filter_map(AgentTrack::last_frame).max().unwrap_or(0);
        let mut rows: Vec<(i64, u64, Point)> = scene
            .agents
            .iter()
            .flat_map(|a| a.frames.iter().zip(&a.positions).map(move |(&f, &p)| (f, a.id, p)))
            .collect();
        rows.sort_by_key(|r| (r.0, r.1));
        for (f, id, p) in rows {
            let _ = writeln!(out, "{} {} {:?} {:?}", f - lo + offset, id, p.x, p.y);
        }
        offset += hi - lo + 2;
    }
    out
}

pub fn write_trajectory_file(path: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::write(path, scenes_to_text(scenes))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dynamics {
    ConstantVelocity,
    Turning,
    SocialRepulsion,
}

impl FromStr for Dynamics {
    type Err = LtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_velocity" => Ok(Self::ConstantVelocity),
            "turning" => Ok(Self::Turning),
            "social_repulsion" => Ok(Self::SocialRepulsion),
            _ => Err(LtnError::Parse(format!("unknown dynamics `{s}`"))),
        }
    }
}

impl std::fmt::Display for Dynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ConstantVelocity => "constant_velocity",
            Self::Turning => "turning",
            Self::SocialRepulsion => "social_repulsion",
        })
    }
}

/// Cap on the magnitude of each pairwise repulsion, m/s².
pub const MAX_REPULSION: f64 = 2.0;
pub const SYNTH_DT: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub position: Point,
    pub velocity: Point,
    /// Heading change per second, used by `Turning`.
    pub turn_rate: f64,
    /// Destination used by `SocialRepulsion`.
    pub goal: Point,
    pub preferred_speed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SocialForce {
    /// Repulsion numerator, m²/s²: acceleration is `strength / distance`.
    pub strength: f64,
    /// Relaxation time towards the preferred velocity, s.
    pub relaxation: f64,
}

impl Default for SocialForce {
    fn default() -> Self {
        Self {
            strength: 1.5,
            relaxation: 1.0,
        }
    }
}

fn rotate(v: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    Point::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Acceleration on agent `i` from every other agent.
pub fn repulsion(states: &[AgentState], i: usize, force: &SocialForce) -> Point {
    let mut a = Point::default();
    for (j, other) in states.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = states[i].position - other.position;
        let dist = d.norm().max(1e-6);
        let mag = (force.strength / dist).min(MAX_REPULSION);
        a = a + d.scale(mag / dist);
    }
    a
}

/// Positions of every agent at `frames` steps of `dt`, frame 0 being the
/// initial state.
pub fn simulate(
    initial: &[AgentState],
    dynamics: Dynamics,
    frames: usize,
    dt: f64,
    force: &SocialForce,
) -> Vec<Vec<Point>> {
    let mut states = initial.to_vec();
    let mut out: Vec<Vec<Point>> = states.iter().map(|s| vec![s.position]).collect();
    for _ in 1..frames {
        match dynamics {
            Dynamics::ConstantVelocity => {}
            Dynamics::Turning => {
                for s in &mut states {
                    s.velocity = rotate(s.velocity, s.turn_rate * dt);
                }
            }
            Dynamics::SocialRepulsion => {
                let acc: Vec<Point> = (0..states.len())
                    .map(|i| {
                        let s = &states[i];
                        let to_goal = s.goal - s.position;
                        let desired = if to_goal.norm() > 1e-9 {
                            to_goal.scale(s.preferred_speed / to_goal.norm())
                        } else {
                            Point::default()
                        };
                        (desired - s.velocity).scale(1.0 / force.relaxation) + repulsion(&states, i, force)
                    })
                    .collect();
                for (s, a) in states.iter_mut().zip(acc) {
                    s.velocity = s.velocity + a.scale(dt);
                }
            }
        }
        for (s, track) in states.iter_mut().zip(&mut out) {
            s.position = s.position + s.velocity.scale(dt);
            track.push(s.position);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub agents_per_scene: usize,
    pub dynamics: Dynamics,
    pub frames: usize,
    pub dt: f64,
    /// Standard deviation of Gaussian noise added to recorded positions.
    pub noise: f64,
    pub force: SocialForce,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 10,
            agents_per_scene: 3,
            dynamics: Dynamics::ConstantVelocity,
            frames: 20,
            dt: SYNTH_DT,
            noise: 0.0,
            force: SocialForce::default(),
        }
    }
}

/// Random initial states. Agents start near a circle of radius 6 m and head
/// for the far side, so paths cross near the centre.
fn initial_states(rng: &mut ChaCha8Rng, n: usize) -> Vec<AgentState> {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|k| {
            let angle = phase + std::f64::consts::TAU * k as f64 / n as f64 + rng.random_range(-0.4..0.4);
            let radius = rng.random_range(5.0..7.0);
            let position = Point::new(radius * angle.cos(), radius * angle.sin());
            let goal = Point::new(-position.x, -position.y) + Point::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let speed = rng.random_range(0.8..1.6);
            let heading = goal - position;
            let velocity = heading.scale(speed / heading.norm());
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            AgentState {
                position,
                velocity,
                turn_rate: sign * rng.random_range(0.1..0.4),
                goal,
                preferred_speed: speed,
            }
        })
        .collect()
}

/// Deterministic scenes; agent ids run `0..agents_per_scene` and agent 0 is
/// the robot.
pub fn generate_synthetic_scenes(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    if cfg.n_scenes == 0 || cfg.agents_per_scene == 0 || cfg.frames == 0 || cfg.dt <= 0.0 || cfg.noise < 0.0 {
        return Err(LtnError::Invalid("synthetic parameters must be positive".into()));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| LtnError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for _ in 0..cfg.n_scenes {
        let init = initial_states(&mut rng, cfg.agents_per_scene);
        let paths = simulate(&init, cfg.dynamics, cfg.frames, cfg.dt, &cfg.force);
        let agents: Vec<AgentTrack> = paths
            .into_iter()
            .enumerate()
            .map(|(id, path)| {
                let positions = path
                    .into_iter()
                    .map(|p| {
                        if cfg.noise > 0.0 {
                            p + Point::new(noise.sample(&mut rng), noise.sample(&mut rng))
                        } else {
                            p
                        }
                    })
                    .collect();
                AgentTrack::contiguous(id as u64, Category::Pedestrian, 0, positions)
            })
            .collect();
        scenes.push(Scene {
            robot: agents[0].clone(),
            agents,
            dt: cfg.dt,
            map: None,
        });
    }
    Ok(scenes)
}

/// Splits scenes into `(train, held_out)` with every `1/fraction`-th scene
/// held out.
pub fn split_scenes(scenes: Vec<Scene>, held_out_fraction: f64) -> (Vec<Scene>, Vec<Scene>) {
    if held_out_fraction <= 0.0 {
        return (scenes, Vec::new());
    }
    let every = (1.0 / held_out_fraction).round().max(1.0) as usize;
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, s) in scenes.into_iter().enumerate() {
        if i % every == every - 1 {
            held.push(s);
        } else {
            train.push(s);
        }
    }
    (train, held)
}

/// Instance with a stable name: `s<scene>_a<agent>_f<start frame>`.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedInstance {
    pub id: String,
    pub scene: usize,
    pub instance: PredictionInstance,
}

/// Windows of every scene under the model's horizon and perception
/// distance (scene default when the configured distance is 0).
pub fn scene_instances(scenes: &[Scene], cfg: &ModelConfig, with_future: bool) -> Vec<NamedInstance> {
    let mut out = Vec::new();
    for (k, scene) in scenes.iter().enumerate() {
        let opts = InstanceOptions {
            perception_distance: if cfg.perception_distance > 0.0 {
                cfg.perception_distance
            } else {
                default_perception_distance(scene)
            },
            horizon: Horizon::from_frames(cfg.obs_frames, cfg.pred_frames),
            patch_cells: cfg.patch_cells,
            with_future,
        };
        for inst in build_prediction_instances(scene, &opts).instances {
            out.push(NamedInstance {
                id: format!("s{k}_a{}_f{}", inst.agent_id, inst.start_frame),
                scene: k,
                instance: inst,
            });
        }
    }
    out
}
