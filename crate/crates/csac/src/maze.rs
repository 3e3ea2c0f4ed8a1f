//! Continuous 2-D multi-room maze with a unicycle agent.
//!
//! The maze is a row of axis-aligned rooms. Each dividing wall carries two
//! door gaps into the next room; behind one of them sits an enclosed
//! dead-end pocket (part of the next room) whose only opening is that door,
//! and the pocket door is always the one nearer the room centre — the greedy
//! exit leads into the trap. Observations are a ring of raycast laser
//! ranges plus global position and heading encoding. Each room is one
//! subtask; its reward channel pays an exit bonus when the agent crosses
//! forward into the next room and a small living cost while the subtask is
//! active.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MazeError {
    #[error("unsupported room count {0} (builtin layouts cover 2, 3 and 4)")]
    UnsupportedRoomCount(usize),
    #[error("raycast origin ({0}, {1}) lies outside free space")]
    OriginOutsideFreeSpace(f64, f64),
    #[error("non-finite action ({0}, {1})")]
    NonFiniteAction(f64, f64),
    #[error("invalid maze layout:\n{}", .0.join("\n"))]
    InvalidLayout(Vec<String>),
    #[error("layout file error: {0}")]
    LayoutFile(String),
}

// ── geometry primitives ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub ax: f64,
    pub ay: f64,
    pub bx: f64,
    pub by: f64,
}

impl Segment {
    pub fn new(ax: f64, ay: f64, bx: f64, by: f64) -> Segment {
        Segment { ax, ay, bx, by }
    }

    pub fn midpoint(&self) -> (f64, f64) {
        ((self.ax + self.bx) / 2.0, (self.ay + self.by) / 2.0)
    }

    pub fn length(&self) -> f64 {
        ((self.bx - self.ax).powi(2) + (self.by - self.ay).powi(2)).sqrt()
    }

    /// Distance from a point to this segment.
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let (ex, ey) = (self.bx - self.ax, self.by - self.ay);
        let len2 = ex * ex + ey * ey;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((x - self.ax) * ex + (y - self.ay) * ey) / len2).clamp(0.0, 1.0)
        };
        let (px, py) = (self.ax + t * ex, self.ay + t * ey);
        ((x - px).powi(2) + (y - py).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Rect {
        Rect { x0, y0, x1, y1 }
    }

    /// Half-open containment: the left/bottom edges belong to the rect, the
    /// right/top edges do not, so adjoining rooms partition space cleanly.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// Intersection of a ray `(ox, oy) + t (dx, dy)` with a segment.
/// Returns the ray parameter `t >= 0` if they meet.
fn ray_segment_intersection(ox: f64, oy: f64, dx: f64, dy: f64, seg: &Segment) -> Option<f64> {
    let (ex, ey) = (seg.bx - seg.ax, seg.by - seg.ay);
    let denom = dx * ey - dy * ex;
    if denom.abs() < 1e-12 {
        return None; // parallel
    }
    let (wx, wy) = (seg.ax - ox, seg.ay - oy);
    let t = (wx * ey - wy * ex) / denom;
    let s = (wx * dy - wy * dx) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&s) {
        Some(t)
    } else {
        None
    }
}

// ── maze specification ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Door {
    pub gap: Segment,
    /// Whether this door opens into the dead-end pocket of its transition.
    pub dead_end: bool,
}

/// The two doors between room `i` and room `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub doors: [Door; 2],
}

fn default_laser_beams() -> usize {
    16
}
fn default_laser_max_range() -> f64 {
    10.0
}
fn default_dt() -> f64 {
    0.1
}
fn default_v_max() -> f64 {
    1.0
}
fn default_omega_max() -> f64 {
    PI
}
fn default_exit_bonus() -> f64 {
    10.0
}
fn default_living_cost() -> f64 {
    0.01
}
fn default_max_episode_steps() -> usize {
    1000
}

/// Declarative maze layout plus kinematics, sensor and reward parameters.
///
/// The struct serialises directly to the TOML layout-file format; the three
/// builtin layouts under `layouts/` are exactly these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    /// Rooms ordered along the traversal direction (increasing x).
    pub rooms: Vec<Rect>,
    pub walls: Vec<Segment>,
    /// One entry per adjacent room pair, in order.
    pub transitions: Vec<Transition>,
    /// Pocket `i` is the dead-end region of transition `i`, lying inside
    /// room `i + 1`.
    pub pockets: Vec<Rect>,
    pub start_area: Rect,
    pub goal_area: Rect,
    #[serde(default = "default_laser_beams")]
    pub laser_beams: usize,
    #[serde(default = "default_laser_max_range")]
    pub laser_max_range: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_omega_max")]
    pub omega_max: f64,
    #[serde(default = "default_exit_bonus")]
    pub exit_bonus: f64,
    #[serde(default = "default_living_cost")]
    pub living_cost: f64,
    #[serde(default = "default_max_episode_steps")]
    pub max_episode_steps: usize,
}

/// Geometry scale for the builtin layouts. `Paper` is the full-size domain;
/// `Desk` shrinks the rooms so training fits a desktop time budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl MazeSpec {
    pub fn room_count(&self) -> usize {
        self.rooms.len()
    }

    /// Index of the room containing a point, if any. Pocket interiors
    /// belong to the room that geometrically contains them (the room after
    /// their transition).
    pub fn room_of(&self, x: f64, y: f64) -> Option<usize> {
        self.rooms.iter().position(|r| r.contains(x, y))
    }

    pub fn in_free_space(&self, x: f64, y: f64) -> bool {
        self.room_of(x, y).is_some()
    }

    /// Bounding box over all rooms.
    pub fn bounds(&self) -> Rect {
        let mut b = self.rooms[0];
        for r in &self.rooms {
            b.x0 = b.x0.min(r.x0);
            b.y0 = b.y0.min(r.y0);
            b.x1 = b.x1.max(r.x1);
            b.y1 = b.y1.max(r.y1);
        }
        b
    }

    /// Observation width: laser beams + (x, y) + (sin heading, cos heading).
    pub fn observation_dim(&self) -> usize {
        self.laser_beams + 4
    }

    /// Per-feature scale that maps observations to roughly unit range, used
    /// as the network-side input normaliser.
    pub fn observation_scale(&self) -> Vec<f64> {
        let b = self.bounds();
        let mut s = vec![1.0 / self.laser_max_range; self.laser_beams];
        s.push(1.0 / b.x1.max(1.0));
        s.push(1.0 / b.y1.max(1.0));
        s.push(1.0);
        s.push(1.0);
        s
    }

    /// Distance from an origin along `angle` to the nearest wall, capped at
    /// the laser range.
    pub fn raycast(&self, ox: f64, oy: f64, angle: f64) -> Result<f64, MazeError> {
        if !self.in_free_space(ox, oy) {
            return Err(MazeError::OriginOutsideFreeSpace(ox, oy));
        }
        Ok(self.raycast_unchecked(ox, oy, angle))
    }

    fn raycast_unchecked(&self, ox: f64, oy: f64, angle: f64) -> f64 {
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut best = self.laser_max_range;
        for seg in &self.walls {
            if let Some(t) = ray_segment_intersection(ox, oy, dx, dy, seg) {
                if t < best {
                    best = t;
                }
            }
        }
        best.max(1e-9)
    }

    /// First wall hit along the motion from `(x, y)` by `(mx, my)`, as a
    /// distance along the motion plus the segment index, if any.
    fn sweep_hit(&self, x: f64, y: f64, mx: f64, my: f64) -> Option<(f64, usize)> {
        let len = (mx * mx + my * my).sqrt();
        if len < 1e-15 {
            return None;
        }
        let (dx, dy) = (mx / len, my / len);
        let mut best: Option<(f64, usize)> = None;
        for (i, seg) in self.walls.iter().enumerate() {
            if let Some(t) = ray_segment_intersection(x, y, dx, dy, seg) {
                if t <= len && best.map_or(true, |(b, _)| t < b) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    /// Resolves one translation with wall sliding: on contact the agent
    /// stops a clearance short of the wall and the unspent motion is
    /// projected onto the wall tangent; a second contact stops it.
    pub(crate) fn resolve_motion(&self, x: f64, y: f64, mx: f64, my: f64) -> (f64, f64) {
        let len = (mx * mx + my * my).sqrt();
        let Some((hit, seg_index)) = self.sweep_hit(x, y, mx, my) else {
            return (x + mx, y + my);
        };
        let stop = (hit - COLLISION_EPS).max(0.0);
        let (px, py) = (x + mx / len * stop, y + my / len * stop);
        // Project the unspent motion onto the wall tangent.
        let seg = &self.walls[seg_index];
        let (tx, ty) = {
            let (ex, ey) = (seg.bx - seg.ax, seg.by - seg.ay);
            let e_len = (ex * ex + ey * ey).sqrt();
            (ex / e_len, ey / e_len)
        };
        let leftover = len - stop;
        let along = (mx / len * tx + my / len * ty) * leftover;
        let (sx, sy) = (tx * along, ty * along);
        match self.sweep_hit(px, py, sx, sy) {
            None => (px + sx, py + sy),
            Some((hit2, _)) => {
                let slide_len = (sx * sx + sy * sy).sqrt();
                if slide_len < 1e-15 {
                    return (px, py);
                }
                let stop2 = (hit2 - COLLISION_EPS).max(0.0);
                (px + sx / slide_len * stop2, py + sy / slide_len * stop2)
            }
        }
    }

    /// Structural invariant check; returns the list of violations.
    pub fn validate(&self) -> Result<(), MazeError> {
        let mut issues = Vec::new();
        let n = self.rooms.len();
        if n == 0 {
            issues.push("no rooms".to_string());
            return Err(MazeError::InvalidLayout(issues));
        }
        for i in 0..n {
            for j in i + 1..n {
                if self.rooms[i].overlaps(&self.rooms[j]) {
                    issues.push(format!("rooms {i} and {j} overlap"));
                }
            }
        }
        for w in self.rooms.windows(2) {
            if w[0].x1 > w[1].x0 + 1e-9 {
                issues.push("rooms are not ordered along +x".to_string());
            }
        }
        if self.transitions.len() != n.saturating_sub(1) {
            issues.push(format!(
                "expected {} transitions, found {}",
                n.saturating_sub(1),
                self.transitions.len()
            ));
        }
        if self.pockets.len() != self.transitions.len() {
            issues.push(format!(
                "expected {} pockets, found {}",
                self.transitions.len(),
                self.pockets.len()
            ));
        }
        for (t, tr) in self.transitions.iter().enumerate() {
            let dead_ends = tr.doors.iter().filter(|d| d.dead_end).count();
            if dead_ends != 1 {
                issues.push(format!("transition {t} has {dead_ends} dead-end doors, expected exactly 1"));
            }
            if t + 1 < n {
                let boundary_x = self.rooms[t].x1;
                for (di, door) in tr.doors.iter().enumerate() {
                    if (door.gap.ax - boundary_x).abs() > 1e-9 || (door.gap.bx - boundary_x).abs() > 1e-9 {
                        issues.push(format!(
                            "transition {t} door {di} does not lie on the shared wall x = {boundary_x}"
                        ));
                    }
                }
                let span = |d: &Door| {
                    let (lo, hi) = (d.gap.ay.min(d.gap.by), d.gap.ay.max(d.gap.by));
                    (lo, hi)
                };
                let (a_lo, a_hi) = span(&tr.doors[0]);
                let (b_lo, b_hi) = span(&tr.doors[1]);
                if a_lo < b_hi && b_lo < a_hi {
                    issues.push(format!("transition {t} doors overlap"));
                }
                if let Some(pocket) = self.pockets.get(t) {
                    for door in tr.doors.iter().filter(|d| !d.dead_end) {
                        let (lo, hi) = span(door);
                        if lo < pocket.y1 && pocket.y0 < hi {
                            issues.push(format!(
                                "transition {t}: safe door overlaps the pocket mouth"
                            ));
                        }
                    }
                }
                // The greedy exit must be the trapped one: the dead-end door
                // sits strictly nearer the room centre than the safe door.
                let (cx, cy) = self.rooms[t].center();
                let dist = |d: &Door| {
                    let (mx, my) = d.gap.midpoint();
                    ((mx - cx).powi(2) + (my - cy).powi(2)).sqrt()
                };
                let dead = tr.doors.iter().find(|d| d.dead_end);
                let safe = tr.doors.iter().find(|d| !d.dead_end);
                if let (Some(dead), Some(safe)) = (dead, safe) {
                    if dist(dead) >= dist(safe) {
                        issues.push(format!(
                            "transition {t}: dead-end door is not the nearer exit from the room centre"
                        ));
                    }
                }
            }
            if let Some(pocket) = self.pockets.get(t) {
                if t + 1 < n {
                    let room = &self.rooms[t + 1];
                    if !(pocket.x0 >= room.x0 - 1e-9
                        && pocket.x1 <= room.x1 + 1e-9
                        && pocket.y0 >= room.y0 - 1e-9
                        && pocket.y1 <= room.y1 + 1e-9)
                    {
                        issues.push(format!("pocket {t} is not inside room {}", t + 1));
                    }
                }
            }
        }
        if self.room_of(self.start_area.center().0, self.start_area.center().1) != Some(0) {
            issues.push("start area is not inside room 1".to_string());
        }
        if self.room_of(self.goal_area.center().0, self.goal_area.center().1) != Some(n - 1) {
            issues.push("goal area is not inside the final room".to_string());
        }
        for (p, pocket) in self.pockets.iter().enumerate() {
            if pocket.overlaps(&self.goal_area) {
                issues.push(format!("pocket {p} overlaps the goal area"));
            }
        }
        if !self.start_to_goal_connected() {
            issues.push("free space is not connected from start to goal".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(MazeError::InvalidLayout(issues))
        }
    }

    /// Grid BFS over free space; cell moves are blocked by wall crossings.
    fn start_to_goal_connected(&self) -> bool {
        let door_w = self
            .transitions
            .iter()
            .flat_map(|t| t.doors.iter())
            .map(|d| d.gap.length())
            .fold(f64::INFINITY, f64::min);
        let step = if door_w.is_finite() { (door_w / 4.0).clamp(0.02, 0.25) } else { 0.25 };
        let b = self.bounds();
        let nx = ((b.x1 - b.x0) / step).ceil() as usize + 1;
        let ny = ((b.y1 - b.y0) / step).ceil() as usize + 1;
        let pos = |ix: usize, iy: usize| (b.x0 + ix as f64 * step, b.y0 + iy as f64 * step);
        let cell_of = |x: f64, y: f64| {
            (((x - b.x0) / step).round() as usize, ((y - b.y0) / step).round() as usize)
        };
        let (sx, sy) = self.start_area.center();
        let (gx, gy) = self.goal_area.center();
        let start = cell_of(sx, sy);
        let goal = cell_of(gx, gy);
        let mut seen = vec![false; nx * ny];
        let mut queue = std::collections::VecDeque::new();
        seen[start.1 * nx + start.0] = true;
        queue.push_back(start);
        while let Some((ix, iy)) = queue.pop_front() {
            if (ix, iy) == goal {
                return true;
            }
            let (x, y) = pos(ix, iy);
            let neighbours = [
                (ix.wrapping_sub(1), iy),
                (ix + 1, iy),
                (ix, iy.wrapping_sub(1)),
                (ix, iy + 1),
            ];
            for (jx, jy) in neighbours {
                if jx >= nx || jy >= ny || seen[jy * nx + jx] {
                    continue;
                }
                let (x2, y2) = pos(jx, jy);
                if !self.in_free_space(x2, y2) {
                    continue;
                }
                if self.sweep_hit(x, y, x2 - x, y2 - y).is_some() {
                    continue;
                }
                seen[jy * nx + jx] = true;
                queue.push_back((jx, jy));
            }
        }
        false
    }

    /// Serialises the layout to the TOML layout-file format.
    pub fn to_layout_toml(&self) -> String {
        toml::to_string_pretty(self).expect("maze spec serialises")
    }

    /// Parses a layout file and validates its invariants.
    pub fn from_layout_toml(text: &str) -> Result<MazeSpec, MazeError> {
        let spec: MazeSpec =
            toml::from_str(text).map_err(|e| MazeError::LayoutFile(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

// ── builtin layouts ─────────────────────────────────────────────────

struct BuiltinDims {
    room_w: f64,
    room_h: f64,
    door_w: f64,
    pocket_depth: f64,
    pocket_h: f64,
    laser_max_range: f64,
    max_episode_steps: usize,
    /// Goal box as fractions of the last room: (x0, x1, y0, y1).
    goal_frac: (f64, f64, f64, f64),
}

fn builtin_dims(scale: Scale) -> BuiltinDims {
    match scale {
        Scale::Paper => BuiltinDims {
            room_w: 10.0,
            room_h: 10.0,
            door_w: 1.2,
            pocket_depth: 3.0,
            pocket_h: 2.4,
            laser_max_range: 10.0,
            max_episode_steps: 1000,
            goal_frac: (0.75, 0.95, 0.4, 0.6),
        },
        Scale::Desk => BuiltinDims {
            room_w: 2.6,
            room_h: 4.0,
            door_w: 1.1,
            pocket_depth: 1.0,
            pocket_h: 1.4,
            laser_max_range: 5.0,
            max_episode_steps: 300,
            // Wall-adjacent and tall: reachable by wall-following random
            // walks often enough to seed the critic at desk budgets.
            goal_frac: (0.8, 0.995, 0.3, 0.7),
        },
    }
}

/// Builds one of the three builtin maze layouts (2, 3 or 4 rooms).
///
/// Every dividing wall has two doors into the next room: a mid-height door
/// aligned with the room centre (the nearer, greedy exit) that opens into a
/// dead-end pocket, and a safe door alternating between the top and bottom
/// of the wall.
pub fn builtin_maze(room_count: usize, scale: Scale) -> Result<MazeSpec, MazeError> {
    if !(2..=4).contains(&room_count) {
        return Err(MazeError::UnsupportedRoomCount(room_count));
    }
    let d = builtin_dims(scale);
    let (w, h) = (d.room_w, d.room_h);
    let total_w = w * room_count as f64;

    let rooms: Vec<Rect> =
        (0..room_count).map(|i| Rect::new(i as f64 * w, 0.0, (i + 1) as f64 * w, h)).collect();

    let mut walls = vec![
        Segment::new(0.0, 0.0, total_w, 0.0),
        Segment::new(total_w, 0.0, total_w, h),
        Segment::new(total_w, h, 0.0, h),
        Segment::new(0.0, h, 0.0, 0.0),
    ];
    let mut transitions = Vec::new();
    let mut pockets = Vec::new();

    for t in 0..room_count - 1 {
        let x = (t + 1) as f64 * w;
        // Dead-end door: centred at mid height (nearest to the room centre).
        let dead_lo = h / 2.0 - d.door_w / 2.0;
        let dead_hi = h / 2.0 + d.door_w / 2.0;
        // Safe door: centred in the band between the pocket mouth and the
        // outer wall, alternating top/bottom across transitions so the
        // greedy door stays nearer wherever the agent entered the room.
        let band = h / 2.0 - d.pocket_h / 2.0;
        let inset = (band - d.door_w) / 2.0;
        let (safe_lo, safe_hi) = if t % 2 == 0 {
            (h / 2.0 + d.pocket_h / 2.0 + inset, h / 2.0 + d.pocket_h / 2.0 + inset + d.door_w)
        } else {
            (band - inset - d.door_w, band - inset)
        };

        // Divider wall segments around the two gaps.
        let mut gaps = [(dead_lo, dead_hi), (safe_lo, safe_hi)];
        gaps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        walls.push(Segment::new(x, 0.0, x, gaps[0].0));
        walls.push(Segment::new(x, gaps[0].1, x, gaps[1].0));
        walls.push(Segment::new(x, gaps[1].1, x, h));

        // Pocket behind the dead-end door, inside the next room: three
        // walls; the divider gap is its only opening.
        let p = Rect::new(x, h / 2.0 - d.pocket_h / 2.0, x + d.pocket_depth, h / 2.0 + d.pocket_h / 2.0);
        walls.push(Segment::new(p.x0, p.y0, p.x1, p.y0));
        walls.push(Segment::new(p.x1, p.y0, p.x1, p.y1));
        walls.push(Segment::new(p.x1, p.y1, p.x0, p.y1));
        // Divider stubs between the door gap and the pocket mouth corners.
        walls.push(Segment::new(x, p.y0, x, dead_lo));
        walls.push(Segment::new(x, dead_hi, x, p.y1));

        transitions.push(Transition {
            doors: [
                Door { gap: Segment::new(x, dead_lo, x, dead_hi), dead_end: true },
                Door { gap: Segment::new(x, safe_lo, x, safe_hi), dead_end: false },
            ],
        });
        pockets.push(p);
    }

    let last_x = (room_count - 1) as f64 * w;
    let spec = MazeSpec {
        rooms,
        walls,
        transitions,
        pockets,
        start_area: Rect::new(0.05 * w, 0.4 * h, 0.25 * w, 0.6 * h),
        goal_area: Rect::new(
            last_x + d.goal_frac.0 * w,
            d.goal_frac.2 * h,
            last_x + d.goal_frac.1 * w,
            d.goal_frac.3 * h,
        ),
        laser_beams: default_laser_beams(),
        laser_max_range: d.laser_max_range,
        dt: default_dt(),
        v_max: default_v_max(),
        omega_max: default_omega_max(),
        exit_bonus: default_exit_bonus(),
        living_cost: default_living_cost(),
        max_episode_steps: d.max_episode_steps,
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

/// The shipped layout files under `layouts/`, embedded for tests and for
/// builds that run away from the repository root.
pub fn shipped_layout_toml(room_count: usize, scale: Scale) -> Option<&'static str> {
    Some(match (room_count, scale) {
        (2, Scale::Desk) => include_str!("../layouts/maze2_desk.toml"),
        (3, Scale::Desk) => include_str!("../layouts/maze3_desk.toml"),
        (4, Scale::Desk) => include_str!("../layouts/maze4_desk.toml"),
        (2, Scale::Paper) => include_str!("../layouts/maze2_paper.toml"),
        (3, Scale::Paper) => include_str!("../layouts/maze3_paper.toml"),
        (4, Scale::Paper) => include_str!("../layouts/maze4_paper.toml"),
        _ => return None,
    })
}

// ── environment ─────────────────────────────────────────────────────

/// Agent pose plus the active subtask (0-based room index).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading in [-pi, pi).
    pub heading: f64,
    pub subtask: usize,
}

/// What the agent senses: laser ranges, global position, heading encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub laser_ranges: Vec<f64>,
    pub position: (f64, f64),
    pub heading_sin_cos: (f64, f64),
}

impl Observation {
    /// Flat feature vector: lasers, x, y, sin, cos.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.laser_ranges.clone();
        v.push(self.position.0);
        v.push(self.position.1);
        v.push(self.heading_sin_cos.0);
        v.push(self.heading_sin_cos.1);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// One reward per subtask, every step.
    pub rewards: Vec<f64>,
    /// Subtask after the step (0-based room index).
    pub subtask: usize,
    /// Episode over: goal reached or step limit expired.
    pub done: bool,
    /// True task completion (used as the terminal flag for bootstrapping).
    pub reached_goal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    /// Spawn uniformly in the start area (measured performance).
    Evaluation,
    /// Spawn uniformly over all free space (broad data gathering).
    Exploration,
}

/// A maze instance with the current agent state. Deterministic: all
/// randomness comes through the `Rng` arguments.
#[derive(Debug, Clone)]
pub struct MazeEnv {
    spec: MazeSpec,
    state: AgentState,
    steps_in_episode: usize,
    /// Subtasks whose exit bonus has been paid this episode. The bonus is
    /// once per episode: re-crossing a divider pays nothing, so oscillating
    /// through a door cannot farm reward.
    completed: Vec<bool>,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

/// Clearance kept between the agent and any wall after a collision stop.
pub const COLLISION_EPS: f64 = 1e-3;

impl MazeEnv {
    pub fn new(spec: MazeSpec) -> MazeEnv {
        let (sx, sy) = spec.start_area.center();
        let subtask = spec.room_of(sx, sy).unwrap_or(0);
        let completed = vec![false; spec.room_count()];
        MazeEnv {
            spec,
            state: AgentState { x: sx, y: sy, heading: 0.0, subtask },
            steps_in_episode: 0,
            completed,
        }
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.spec
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn steps_in_episode(&self) -> usize {
        self.steps_in_episode
    }

    /// Places the agent at an explicit pose (diagnostics and tests). The
    /// pose must lie in free space.
    pub fn force_state(&mut self, x: f64, y: f64, heading: f64) -> Result<(), MazeError> {
        let room = self
            .spec
            .room_of(x, y)
            .ok_or(MazeError::OriginOutsideFreeSpace(x, y))?;
        self.state = AgentState { x, y, heading: wrap_angle(heading), subtask: room };
        self.steps_in_episode = 0;
        self.completed.fill(false);
        Ok(())
    }

    /// Resets the episode; returns the first observation and the subtask.
    pub fn reset(&mut self, mode: ResetMode, rng: &mut impl Rng) -> (Observation, usize) {
        let (x, y) = match mode {
            ResetMode::Evaluation => {
                let a = &self.spec.start_area;
                (rng.gen_range(a.x0..a.x1), rng.gen_range(a.y0..a.y1))
            }
            ResetMode::Exploration => {
                let b = self.spec.bounds();
                loop {
                    let x = rng.gen_range(b.x0..b.x1);
                    let y = rng.gen_range(b.y0..b.y1);
                    if self.spec.in_free_space(x, y)
                        && self.spec.walls.iter().all(|w| w.distance_to(x, y) > 10.0 * COLLISION_EPS)
                    {
                        break (x, y);
                    }
                }
            }
        };
        let heading = wrap_angle(rng.gen_range(-PI..PI));
        let subtask = self.spec.room_of(x, y).expect("reset pose is in free space");
        self.state = AgentState { x, y, heading, subtask };
        self.steps_in_episode = 0;
        self.completed.fill(false);
        (self.observe(), subtask)
    }

    /// Current observation from the agent pose.
    pub fn observe(&self) -> Observation {
        let k = self.spec.laser_beams;
        let mut ranges = Vec::with_capacity(k);
        for beam in 0..k {
            let angle = self.state.heading + 2.0 * PI * beam as f64 / k as f64;
            ranges.push(self.spec.raycast_unchecked(self.state.x, self.state.y, angle));
        }
        Observation {
            laser_ranges: ranges,
            position: (self.state.x, self.state.y),
            heading_sin_cos: (self.state.heading.sin(), self.state.heading.cos()),
        }
    }

    /// Advances one timestep with a normalised action `(v, omega)` in
    /// `(-1, 1)^2`, affinely scaled to the velocity limits.
    ///
    /// Unicycle integration with the pre-step heading; on contact the agent
    /// keeps a small clearance off the wall and the unspent motion slides
    /// along it (a second contact stops it, so corners hold). The subtask
    /// is recomputed from room membership.
    pub fn step(&mut self, action: (f64, f64)) -> Result<StepResult, MazeError> {
        if !action.0.is_finite() || !action.1.is_finite() {
            return Err(MazeError::NonFiniteAction(action.0, action.1));
        }
        let v = action.0.clamp(-1.0, 1.0) * self.spec.v_max;
        let omega = action.1.clamp(-1.0, 1.0) * self.spec.omega_max;
        let dt = self.spec.dt;

        let prev = self.state;
        let (mx, my) = (v * prev.heading.cos() * dt, v * prev.heading.sin() * dt);
        let (nx, ny) = self.spec.resolve_motion(prev.x, prev.y, mx, my);
        let heading = wrap_angle(prev.heading + omega * dt);
        let subtask = self.spec.room_of(nx, ny).unwrap_or(prev.subtask);
        self.state = AgentState { x: nx, y: ny, heading, subtask };
        self.steps_in_episode += 1;

        let reached_goal =
            prev.subtask == self.spec.room_count() - 1 && self.spec.goal_area.contains(nx, ny);
        let rewards = compute_rewards(
            &self.spec,
            prev.subtask,
            subtask,
            reached_goal,
            &mut self.completed,
        );
        let done = reached_goal || self.steps_in_episode >= self.spec.max_episode_steps;

        Ok(StepResult { observation: self.observe(), rewards, subtask, done, reached_goal })
    }

    /// Which subtasks have paid their exit bonus this episode.
    pub fn completed_subtasks(&self) -> &[bool] {
        &self.completed
    }
}

/// Reward vector for a step from room `prev` to room `next`, updating the
/// per-episode completion flags.
///
/// Channel `j` pays the exit bonus on the first step this episode that
/// crosses forward out of room `j` (into room `j + 1`, or into the goal
/// area for the final room), a living cost on every other step while the
/// agent is in room `j`, and zero otherwise. The bonus is paid at most
/// once per subtask per episode: a repeatable crossing bonus would make
/// oscillating through a door the highest-return policy, displacing the
/// task the domain is meant to pose.
pub fn compute_rewards(
    spec: &MazeSpec,
    prev: usize,
    next: usize,
    reached_goal: bool,
    completed: &mut [bool],
) -> Vec<f64> {
    let n = spec.room_count();
    let mut r = vec![0.0; n];
    let exit_event = if reached_goal && prev == n - 1 {
        Some(n - 1)
    } else if next == prev + 1 {
        Some(prev)
    } else {
        None
    };
    match exit_event {
        Some(j) if !completed[j] => {
            completed[j] = true;
            r[j] = spec.exit_bonus;
        }
        _ => r[prev] = -spec.living_cost,
    }
    r
}
