//! Robot-centric scenes, perception-radius neighbor selection, and the
//! sliding-window construction of per-agent prediction instances.

use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Category {
    #[default]
    Pedestrian,
    Vehicle,
}

/// One agent's positions on the scene's frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub id: u64,
    pub category: Category,
    /// Frame indices in scene steps (not raw dataset frame ids).
    pub frames: Vec<i64>,
    pub positions: Vec<Point>,
}

impl AgentTrack {
    pub fn new(id: u64, category: Category, frames: Vec<i64>, positions: Vec<Point>) -> Self {
        debug_assert_eq!(frames.len(), positions.len());
        Self {
            id,
            category,
            frames,
            positions,
        }
    }

    /// Track covering `start, start+1, ...`.
    pub fn contiguous(id: u64, category: Category, start: i64, positions: Vec<Point>) -> Self {
        let frames = (0..positions.len() as i64).map(|k| start + k).collect();
        Self::new(id, category, frames, positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn first_frame(&self) -> Option<i64> {
        self.frames.first().copied()
    }

    pub fn last_frame(&self) -> Option<i64> {
        self.frames.last().copied()
    }

    /// Frames strictly increasing with unit spacing.
    pub fn is_contiguous(&self) -> bool {
        self.frames.windows(2).all(|w| w[1] - w[0] == 1)
    }

    pub fn position_at(&self, frame: i64) -> Option<Point> {
        let first = self.first_frame()?;
        if self.is_contiguous() {
            let k = frame - first;
            return (k >= 0 && (k as usize) < self.len()).then(|| self.positions[k as usize]);
        }
        self.frames
            .binary_search(&frame)
            .ok()
            .map(|k| self.positions[k])
    }

    pub fn covers(&self, from: i64, to: i64) -> bool {
        (from..=to).all(|f| self.position_at(f).is_some())
    }
}

/// Binary traversability raster. Row `r` spans `y` in
/// `[origin_y + r*cell, origin_y + (r+1)*cell)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub origin: Point,
    /// Row-major, `true` = traversable.
    pub cells: Vec<bool>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GridParseError {
    #[error("missing grid header")]
    MissingHeader,
    #[error("bad grid header: {0}")]
    BadHeader(String),
    #[error("grid row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("grid has {found} rows, header says {expected}")]
    RowCount { expected: usize, found: usize },
}

impl OccupancyGrid {
    pub fn uniform(width: usize, height: usize, cell_size: f64, origin: Point, traversable: bool) -> Self {
        Self {
            width,
            height,
            cell_size,
            origin,
            cells: vec![traversable; width * height],
        }
    }

    pub fn get(&self, row: i64, col: i64) -> Option<bool> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            return None;
        }
        Some(self.cells[row as usize * self.width + col as usize])
    }

    /// `(row, col)` of the cell containing `p`, possibly outside the grid.
    pub fn cell_of(&self, p: Point) -> (i64, i64) {
        (
            ((p.y - self.origin.y) / self.cell_size).floor() as i64,
            ((p.x - self.origin.x) / self.cell_size).floor() as i64,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {} {}\n",
            self.width, self.height, self.cell_size, self.origin.x, self.origin.y
        );
        for row in self.cells.chunks(self.width.max(1)) {
            out.extend(row.iter().map(|c| if *c { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

impl FromStr for OccupancyGrid {
    type Err = GridParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or(GridParseError::MissingHeader)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(GridParseError::BadHeader(header.to_string()));
        }
        let bad = |_| GridParseError::BadHeader(header.to_string());
        let width: usize = fields[0].parse().map_err(bad)?;
        let height: usize = fields[1].parse().map_err(bad)?;
        let badf = |_| GridParseError::BadHeader(header.to_string());
        let cell_size: f64 = fields[2].parse().map_err(badf)?;
        let ox: f64 = fields[3].parse().map_err(badf)?;
        let oy: f64 = fields[4].parse().map_err(badf)?;
        if !(cell_size > 0.0) {
            return Err(GridParseError::BadHeader(header.to_string()));
        }
        let mut cells = Vec::with_capacity(width * height);
        let mut rows = 0;
        for (r, line) in lines.enumerate() {
            if line.chars().count() != width {
                return Err(GridParseError::BadRow {
                    row: r,
                    reason: format!("expected {width} cells, found {}", line.chars().count()),
                });
            }
            for ch in line.chars() {
                cells.push(match ch {
                    '1' => true,
                    '0' => false,
                    other => {
                        return Err(GridParseError::BadRow {
                            row: r,
                            reason: format!("unexpected character {other:?}"),
                        })
                    }
                });
            }
            rows += 1;
        }
        if rows != height {
            return Err(GridParseError::RowCount {
                expected: height,
                found: rows,
            });
        }
        Ok(Self {
            width,
            height,
            cell_size,
            origin: Point::new(ox, oy),
            cells,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub robot: AgentTrack,
    pub agents: Vec<AgentTrack>,
    /// Seconds between frames.
    pub dt: f64,
    pub map: Option<OccupancyGrid>,
}

impl Scene {
    pub fn has_vehicle(&self) -> bool {
        self.agents.iter().any(|a| a.category == Category::Vehicle)
    }

    pub fn agent(&self, id: u64) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }
}

/// 10 m for pedestrian-only scenes, 30 m once a vehicle is present.
pub fn default_perception_distance(scene: &Scene) -> f64 {
    if scene.has_vehicle() {
        30.0
    } else {
        10.0
    }
}

/// Observation/prediction split. Frame `0..=t_obs` is observed and
/// `t_obs+1..=t_future` is predicted, relative to the window start.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Horizon {
    pub t_obs: usize,
    pub t_future: usize,
}

impl Horizon {
    /// `obs_frames` observed frames followed by `pred_frames` predicted ones.
    pub fn from_frames(obs_frames: usize, pred_frames: usize) -> Self {
        assert!(obs_frames >= 1 && pred_frames >= 1);
        Self {
            t_obs: obs_frames - 1,
            t_future: obs_frames + pred_frames - 1,
        }
    }

    pub fn obs_len(&self) -> usize {
        self.t_obs + 1
    }

    pub fn future_len(&self) -> usize {
        self.t_future - self.t_obs
    }

    pub fn window_len(&self) -> usize {
        self.t_future + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTrack {
    pub agent_id: u64,
    pub category: Category,
    /// `obs_len` positions; frames the neighbor was not tracked are filled
    /// with its nearest tracked position.
    pub history: Vec<Point>,
    /// `future_len` positions when the neighbor is tracked at any future
    /// frame of the window, padded the same way.
    pub future: Option<Vec<Point>>,
}

/// Square local raster around an agent, `1.0` = traversable.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPatch {
    pub size: usize,
    pub cells: Vec<f64>,
    /// `false` when the scene had no map and the patch is a placeholder.
    pub has_map: bool,
}

impl MapPatch {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.size + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionInstance {
    pub agent_id: u64,
    pub category: Category,
    /// Scene frame of the window start.
    pub start_frame: i64,
    pub horizon: Horizon,
    pub dt: f64,
    pub target_history: Vec<Point>,
    pub neighbors: Vec<NeighborTrack>,
    pub map_patch: Option<MapPatch>,
    pub target_future: Option<Vec<Point>>,
}

impl PredictionInstance {
    pub fn last_observed(&self) -> Point {
        *self.target_history.last().expect("history is never empty")
    }

    /// Copy with the ground truth removed, as seen at inference time.
    pub fn without_future(&self) -> Self {
        let mut out = self.clone();
        out.target_future = None;
        for n in &mut out.neighbors {
            n.future = None;
        }
        out
    }
}

/// Every other agent within `d` of `target` at some frame of `observed`
/// where both are tracked, ordered by agent id.
pub fn select_neighbors<'a>(
    scene: &'a Scene,
    target: &AgentTrack,
    d: f64,
    observed: (i64, i64),
) -> Vec<&'a AgentTrack> {
    let mut out: Vec<&AgentTrack> = scene
        .agents
        .iter()
        .filter(|a| a.id != target.id)
        .filter(|a| {
            (observed.0..=observed.1).any(|f| match (target.position_at(f), a.position_at(f)) {
                (Some(p), Some(q)) => p.distance(q) <= d,
                _ => false,
            })
        })
        .collect();
    out.sort_by_key(|a| a.id);
    out
}

/// Positions of `track` over `from..=to`, holding the nearest tracked value
/// across untracked frames. `None` if the track has no frame in the range.
fn padded_positions(track: &AgentTrack, from: i64, to: i64) -> Option<Vec<Point>> {
    let raw: Vec<Option<Point>> = (from..=to).map(|f| track.position_at(f)).collect();
    let first = raw.iter().position(Option::is_some)?;
    let mut out = Vec::with_capacity(raw.len());
    let mut last = raw[first].expect("found above");
    for p in raw {
        if let Some(p) = p {
            last = p;
        }
        out.push(last);
    }
    Some(out)
}

/// Patch of `patch_cells x patch_cells` cells centered on the cell holding
/// `position`. Cells beyond the grid are non-traversable; with no grid the
/// patch is all traversable and flagged.
pub fn extract_map_patch(grid: Option<&OccupancyGrid>, position: Point, patch_cells: usize) -> MapPatch {
    let Some(grid) = grid else {
        return MapPatch {
            size: patch_cells,
            cells: vec![1.0; patch_cells * patch_cells],
            has_map: false,
        };
    };
    let (cr, cc) = grid.cell_of(position);
    let half = (patch_cells / 2) as i64;
    let mut cells = Vec::with_capacity(patch_cells * patch_cells);
    for r in 0..patch_cells as i64 {
        for c in 0..patch_cells as i64 {
            let v = grid.get(cr - half + r, cc - half + c).unwrap_or(false);
            cells.push(if v { 1.0 } else { 0.0 });
        }
    }
    MapPatch {
        size: patch_cells,
        cells,
        has_map: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceOptions {
    pub perception_distance: f64,
    pub horizon: Horizon,
    pub patch_cells: usize,
    /// Keep ground-truth futures on the instances.
    pub with_future: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceSet {
    pub instances: Vec<PredictionInstance>,
    /// Tracks skipped because their frames were not contiguous.
    pub skipped_gapped: usize,
}

/// One instance per (agent, window start) for agents within the perception
/// distance of the robot during the observed part of the window. Windows
/// advance one frame at a time.
pub fn build_prediction_instances(scene: &Scene, opts: &InstanceOptions) -> InstanceSet {
    let h = opts.horizon;
    let d = opts.perception_distance;
    let mut set = InstanceSet::default();
    for agent in &scene.agents {
        if !agent.is_contiguous() {
            log::warn!("skipping track {} with frame gaps", agent.id);
            set.skipped_gapped += 1;
            continue;
        }
        if agent.len() < h.window_len() {
            continue;
        }
        let first = agent.first_frame().expect("non-empty");
        for s in 0..=(agent.len() - h.window_len()) {
            let start = first + s as i64;
            let obs_end = start + h.t_obs as i64;
            let near_robot = (start..=obs_end).any(|f| match (agent.position_at(f), scene.robot.position_at(f)) {
                (Some(p), Some(q)) => p.distance(q) <= d,
                _ => false,
            });
            if !near_robot {
                continue;
            }
            let window = &agent.positions[s..s + h.window_len()];
            let target_history = window[..h.obs_len()].to_vec();
            let target_future = opts.with_future.then(|| window[h.obs_len()..].to_vec());
            let fut_range = (obs_end + 1, start + h.t_future as i64);
            let neighbors = select_neighbors(scene, agent, d, (start, obs_end))
                .into_iter()
                .filter_map(|n| {
                    let history = padded_positions(n, start, obs_end)?;
                    let future = if opts.with_future {
                        padded_positions(n, fut_range.0, fut_range.1)
                    } else {
                        None
                    };
                    Some(NeighborTrack {
                        agent_id: n.id,
                        category: n.category,
                        history,
                        future,
                    })
                })
                .collect();
            let last = *target_history.last().expect("obs_len >= 1");
            let map_patch = scene
                .map
                .as_ref()
                .map(|g| extract_map_patch(Some(g), last, opts.patch_cells));
            set.instances.push(PredictionInstance {
                agent_id: agent.id,
                category: agent.category,
                start_frame: start,
                horizon: h,
                dt: scene.dt,
                target_history,
                neighbors,
                map_patch,
                target_future,
            });
        }
    }
    set
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Pedestrian => "pedestrian",
            Category::Vehicle => "vehicle",
        })
    }
}
