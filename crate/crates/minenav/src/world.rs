//! Mine-tunnel geometry and spatial queries.
//!
//! Top view uses a left-handed frame: x runs down the tunnel, +y is to the
//! left and +z points along gravity (down). The ground sits at z = 0, so
//! everything above ground has negative z. Walls are vertical quads extruded
//! from 2D segments, obstacles are boxes standing on the ground, and the
//! target is a sphere resting in one of the two fork branches.
//!
//! The fork is a Y junction whose branches are narrower than the main
//! corridor and dog-leg outward partway along. The bend tucks the target
//! behind the elbow of each branch's outer wall, so no straight sight line
//! from the corridor reaches it. The occlusion is asserted numerically in
//! the tests.

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use rand::Rng;
use std::fmt::Write as _;

pub const DEFAULT_WALL_HEIGHT: f64 = 6.0;
pub const DEFAULT_OBSTACLE_HEIGHT: f64 = 2.0;

/// 2D wall segment, extruded over z in [-wall_height, 0].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

/// Oriented box obstacle standing on the ground, z in [-obstacle_height, 0].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    pub rotation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantName {
    Original,
    Complex,
    ShortCorridor,
    ShortFork,
}

impl VariantName {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantName::Original => "original",
            VariantName::Complex => "complex",
            VariantName::ShortCorridor => "short_corridor",
            VariantName::ShortFork => "short_fork",
        }
    }
}

/// Tunable environment layout. `original` and `complex` mirror the two
/// evaluation scenes; the short variants are desk-scale layouts used by the
/// fast training probes in the acceptance suite.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvVariant {
    pub name: VariantName,
    pub corridor_length: f64,
    pub corridor_width: f64,
    /// Heading of the first branch leg, degrees off the corridor axis.
    pub fork_half_angle: f64,
    /// Heading of the second (target-holding) branch leg for the left
    /// branch, degrees; mirrored for the right branch. Values past 90 curl
    /// the branch outward and backward, which tucks the target behind the
    /// elbow of the outer wall so the straight corridor never sees it.
    pub target_branch_angle: f64,
    pub obstacle_layout_id: u32,
    pub branch_width: f64,
    /// Length of the first branch leg, measured along the centerline from
    /// the crossroad center.
    pub leg1_length: f64,
    /// Total centerline length of each branch (leg1 + leg2).
    pub branch_length: f64,
    /// Where the target sits, measured along the branch centerline path.
    pub target_path_dist: f64,
    pub target_radius: f64,
    pub has_fork: bool,
    pub num_obstacles: usize,
    /// Max per-obstacle positional jitter (m); 0 disables.
    pub obstacle_jitter: f64,
    pub wall_height: f64,
    pub obstacle_height: f64,
}

impl EnvVariant {
    pub fn original() -> Self {
        EnvVariant {
            name: VariantName::Original,
            corridor_length: 60.0,
            corridor_width: 10.0,
            fork_half_angle: 30.0,
            target_branch_angle: 105.0,
            obstacle_layout_id: 0,
            branch_width: 5.0,
            leg1_length: 12.0,
            branch_length: 25.0,
            target_path_dist: 20.0,
            target_radius: 1.0,
            has_fork: true,
            num_obstacles: 6,
            obstacle_jitter: 0.0,
            wall_height: DEFAULT_WALL_HEIGHT,
            obstacle_height: DEFAULT_OBSTACLE_HEIGHT,
        }
    }

    pub fn complex() -> Self {
        EnvVariant {
            name: VariantName::Complex,
            corridor_width: 15.0,
            fork_half_angle: 40.0,
            obstacle_jitter: 2.0,
            ..EnvVariant::original()
        }
    }

    /// 20 m corridor, two obstacles, no fork; target near the far end.
    pub fn short_corridor() -> Self {
        EnvVariant {
            name: VariantName::ShortCorridor,
            corridor_length: 20.0,
            num_obstacles: 2,
            has_fork: false,
            ..EnvVariant::original()
        }
    }

    /// 25 m corridor with a compact fork; used by the staged-training probe.
    pub fn short_fork() -> Self {
        EnvVariant {
            name: VariantName::ShortFork,
            corridor_length: 25.0,
            num_obstacles: 2,
            leg1_length: 8.0,
            branch_length: 15.0,
            target_path_dist: 12.0,
            ..EnvVariant::original()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "original" => Some(Self::original()),
            "complex" => Some(Self::complex()),
            "short_corridor" => Some(Self::short_corridor()),
            "short_fork" => Some(Self::short_fork()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if !(4.0..=30.0).contains(&self.corridor_width) {
            return err(format!(
                "corridor_width {} outside valid range 4..=30 m",
                self.corridor_width
            ));
        }
        if self.has_fork && !(10.0..=80.0).contains(&self.fork_half_angle) {
            return err(format!(
                "fork_half_angle {} outside valid range 10..=80 degrees",
                self.fork_half_angle
            ));
        }
        if self.corridor_length <= 4.0 {
            return err(format!("corridor_length {} too short", self.corridor_length));
        }
        if self.target_radius <= 0.0 {
            return err(format!("target_radius {} must be positive", self.target_radius));
        }
        if self.has_fork {
            let hb = self.branch_width / 2.0;
            let ang = self.fork_half_angle.to_radians();
            if hb * ang.cos() > self.corridor_width / 2.0 {
                return err("branch too wide for the fork mouth".into());
            }
            // The wedge apex must sit before the bend.
            if hb / ang.sin() >= self.leg1_length {
                return err(format!(
                    "leg1_length {} shorter than the junction wedge",
                    self.leg1_length
                ));
            }
            if self.branch_length <= self.leg1_length {
                return err("branch_length must exceed leg1_length".into());
            }
            let bend = (self.fork_half_angle - self.target_branch_angle).to_radians();
            if bend.cos() <= -0.8 {
                return err("branch bend too sharp to mitre the walls".into());
            }
            if self.target_path_dist <= self.leg1_length + self.target_radius
                || self.target_path_dist >= self.branch_length - self.target_radius
            {
                return err(format!(
                    "target_path_dist {} must lie inside the second branch leg",
                    self.target_path_dist
                ));
            }
            if hb <= self.target_radius {
                return err("branch too narrow for the target sphere".into());
            }
        }
        if self.num_obstacles > 0 {
            let last_x = 8.0 * self.num_obstacles as f64;
            if last_x + 2.0 > self.corridor_length {
                return err(format!(
                    "{} obstacles do not fit a {} m corridor",
                    self.num_obstacles, self.corridor_length
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitKind {
    Wall,
    Obstacle,
    Target,
    None,
}

impl HitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HitKind::Wall => "wall",
            HitKind::Obstacle => "obstacle",
            HitKind::Target => "target",
            HitKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub hit_kind: HitKind,
    pub normalized_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldGeometry {
    pub wall_segments: Vec<Wall>,
    pub obstacles: Vec<Obstacle>,
    pub corridor_width: f64,
    pub corridor_length: f64,
    pub fork_half_angle: f64,
    pub branch_length: f64,
    pub x_cross: f64,
    pub target_position: [f64; 2],
    pub target_radius: f64,
    pub d_cross: f64,
    pub wall_height: f64,
    pub obstacle_height: f64,
    pub branch_half_width: f64,
    pub target_in_left: bool,
    /// Centerline polylines [crossroad, bend, end] for the two branches,
    /// empty when the layout has no fork. Index 0 = left branch.
    pub branch_centerlines: Vec<Vec<[f64; 2]>>,
}

#[inline]
fn finite3(v: [f64; 3]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Squared distance from a 2D point to a segment.
fn seg_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let apx = p[0] - a[0];
    let apy = p[1] - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = apx - t * abx;
    let dy = apy - t * aby;
    dx * dx + dy * dy
}

#[inline]
fn interval_dist(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo - x
    } else if x > hi {
        x - hi
    } else {
        0.0
    }
}

/// Ray/segment intersection in the xy plane; returns (t, u) where t is the
/// 3D ray parameter (direction not renormalized) and u the segment fraction.
#[inline]
fn ray_segment(o: [f64; 2], d: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<(f64, f64)> {
    let sx = b[0] - a[0];
    let sy = b[1] - a[1];
    let denom = d[0] * sy - sx * d[1];
    if denom.abs() < 1e-14 {
        return None;
    }
    let qx = a[0] - o[0];
    let qy = a[1] - o[1];
    let t = (qx * sy - sx * qy) / denom;
    let u = (qx * d[1] - d[0] * qy) / denom;
    Some((t, u))
}

/// Slab test against an axis-aligned box; returns the entry parameter
/// (0 when the origin is inside).
fn ray_aabb(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for i in 0..3 {
        if d[i].abs() < 1e-14 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
        } else {
            let inv = 1.0 / d[i];
            let mut t1 = (lo[i] - o[i]) * inv;
            let mut t2 = (hi[i] - o[i]) * inv;
            if t1 > t2 {
                std::mem::swap(&mut t1, &mut t2);
            }
            tmin = tmin.max(t1);
            tmax = tmax.min(t2);
            if tmin > tmax {
                return None;
            }
        }
    }
    Some(tmin)
}

impl WorldGeometry {
    fn ray_wall(&self, o: [f64; 3], d: [f64; 3], wall: &Wall) -> Option<f64> {
        let (t, u) = ray_segment([o[0], o[1]], [d[0], d[1]], wall.a, wall.b)?;
        if t < 1e-9 || !(0.0..=1.0).contains(&u) {
            return None;
        }
        let z = o[2] + t * d[2];
        if (-self.wall_height..=0.0).contains(&z) {
            Some(t)
        } else {
            None
        }
    }

    fn ray_obstacle(&self, o: [f64; 3], d: [f64; 3], ob: &Obstacle) -> Option<f64> {
        let (sin, cos) = (-ob.rotation).sin_cos();
        let px = o[0] - ob.center[0];
        let py = o[1] - ob.center[1];
        let ol = [px * cos - py * sin, px * sin + py * cos, o[2]];
        let dl = [d[0] * cos - d[1] * sin, d[0] * sin + d[1] * cos, d[2]];
        let lo = [-ob.half_extents[0], -ob.half_extents[1], -self.obstacle_height];
        let hi = [ob.half_extents[0], ob.half_extents[1], 0.0];
        let t = ray_aabb(ol, dl, lo, hi)?;
        if t >= 1e-9 || t == 0.0 {
            Some(t)
        } else {
            None
        }
    }

    fn ray_target(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let c = [
            self.target_position[0],
            self.target_position[1],
            -self.target_radius,
        ];
        let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
        let b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
        let cc = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - self.target_radius * self.target_radius;
        let disc = b * b - cc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t0 = -b - sq;
        if t0 >= 1e-9 {
            Some(t0)
        } else {
            let t1 = -b + sq;
            if t1 >= 1e-9 {
                Some(0.0) // origin inside the sphere
            } else {
                None
            }
        }
    }

    /// Nearest hit among walls, obstacles and optionally the target sphere.
    pub fn raycast_filtered(
        &self,
        origin: [f64; 3],
        direction: [f64; 3],
        max_range: f64,
        include_target: bool,
    ) -> Result<RayHit> {
        if !finite3(origin) || !finite3(direction) {
            return Err(Error::NumericInput("raycast origin/direction must be finite".into()));
        }
        let norm = (direction[0] * direction[0]
            + direction[1] * direction[1]
            + direction[2] * direction[2])
            .sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::NumericInput(format!(
                "raycast direction must be unit length, got norm {norm}"
            )));
        }
        if !(max_range > 0.0) {
            return Err(Error::NumericInput(format!("max_range must be positive, got {max_range}")));
        }
        let mut best = max_range;
        let mut kind = HitKind::None;
        for wall in &self.wall_segments {
            if let Some(t) = self.ray_wall(origin, direction, wall) {
                if t < best {
                    best = t;
                    kind = HitKind::Wall;
                }
            }
        }
        for ob in &self.obstacles {
            if let Some(t) = self.ray_obstacle(origin, direction, ob) {
                if t < best {
                    best = t;
                    kind = HitKind::Obstacle;
                }
            }
        }
        if include_target {
            if let Some(t) = self.ray_target(origin, direction) {
                if t < best {
                    best = t;
                    kind = HitKind::Target;
                }
            }
        }
        Ok(RayHit {
            distance: best,
            hit_kind: kind,
            normalized_distance: best / max_range,
        })
    }

    /// Distance from a point to the nearest collision geometry (walls and
    /// obstacles; the target is not a collision body).
    pub fn clearance(&self, center: [f64; 3]) -> f64 {
        let mut best2 = f64::INFINITY;
        let p2 = [center[0], center[1]];
        for wall in &self.wall_segments {
            let dz = interval_dist(center[2], -self.wall_height, 0.0);
            let d2 = seg_dist2(p2, wall.a, wall.b) + dz * dz;
            best2 = best2.min(d2);
        }
        for ob in &self.obstacles {
            let (sin, cos) = (-ob.rotation).sin_cos();
            let px = center[0] - ob.center[0];
            let py = center[1] - ob.center[1];
            let lx = px * cos - py * sin;
            let ly = px * sin + py * cos;
            let dx = interval_dist(lx, -ob.half_extents[0], ob.half_extents[0]);
            let dy = interval_dist(ly, -ob.half_extents[1], ob.half_extents[1]);
            let dz = interval_dist(center[2], -self.obstacle_height, 0.0);
            best2 = best2.min(dx * dx + dy * dy + dz * dz);
        }
        best2.sqrt()
    }

    /// True when a body sphere at `center` touches any wall or obstacle.
    pub fn check_collision(&self, center: [f64; 3], body_radius: f64) -> Result<bool> {
        if !finite3(center) || !body_radius.is_finite() || body_radius <= 0.0 {
            return Err(Error::NumericInput(
                "collision query needs a finite center and positive radius".into(),
            ));
        }
        Ok(self.clearance(center) <= body_radius)
    }

    /// Which branch strip contains the 2D point, if any (0 = left, 1 = right).
    pub fn branch_containing(&self, p: [f64; 2]) -> Option<usize> {
        for (i, line) in self.branch_centerlines.iter().enumerate() {
            for pair in line.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if seg_dist2(p, a, b) <= self.branch_half_width * self.branch_half_width {
                    return Some(i);
                }
            }
        }
        None
    }

    pub fn in_straight_corridor(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0
            && p[0] <= self.corridor_length
            && p[1].abs() <= self.corridor_width / 2.0
    }

    /// Versioned plain-text form consumed by the SVG renderer.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        out.push_str("minenav-geom 1\n");
        let mut meta = |k: &str, v: f64| {
            let _ = writeln!(out, "meta {k} {v}");
        };
        meta("corridor_length", self.corridor_length);
        meta("corridor_width", self.corridor_width);
        meta("fork_half_angle", self.fork_half_angle);
        meta("branch_length", self.branch_length);
        meta("x_cross", self.x_cross);
        meta("d_cross", self.d_cross);
        meta("wall_height", self.wall_height);
        meta("obstacle_height", self.obstacle_height);
        meta("branch_half_width", self.branch_half_width);
        meta("target_in_left", if self.target_in_left { 1.0 } else { 0.0 });
        for w in &self.wall_segments {
            let _ = writeln!(out, "wall {} {} {} {}", w.a[0], w.a[1], w.b[0], w.b[1]);
        }
        for ob in &self.obstacles {
            let _ = writeln!(
                out,
                "obstacle {} {} {} {} {}",
                ob.center[0], ob.center[1], ob.half_extents[0], ob.half_extents[1], ob.rotation
            );
        }
        for line in &self.branch_centerlines {
            let mut row = String::from("branch");
            for p in line {
                let _ = write!(row, " {} {}", p[0], p[1]);
            }
            let _ = writeln!(out, "{row}");
        }
        let _ = writeln!(
            out,
            "target {} {} {}",
            self.target_position[0], self.target_position[1], self.target_radius
        );
        out
    }

    /// Parses the text emitted by [`export_text`](Self::export_text).
    pub fn parse_text(text: &str) -> Result<WorldGeometry> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != "minenav-geom 1" {
            return Err(Error::Config(format!(
                "unsupported geometry header {header:?}, expected \"minenav-geom 1\""
            )));
        }
        let mut meta = std::collections::HashMap::new();
        let mut walls = Vec::new();
        let mut obstacles = Vec::new();
        let mut branches = Vec::new();
        let mut target = None;
        let parse_f = |tok: &str, line_no: usize| -> Result<f64> {
            tok.parse::<f64>().map_err(|_| {
                Error::Config(format!("geometry line {line_no}: bad number {tok:?}"))
            })
        };
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let kind = toks.next().unwrap();
            let rest: Vec<&str> = toks.collect();
            match kind {
                "meta" => {
                    if rest.len() != 2 {
                        return Err(Error::Config(format!("geometry line {line_no}: meta needs key and value")));
                    }
                    meta.insert(rest[0].to_string(), parse_f(rest[1], line_no)?);
                }
                "wall" => {
                    if rest.len() != 4 {
                        return Err(Error::Config(format!("geometry line {line_no}: wall needs 4 numbers")));
                    }
                    let v: Result<Vec<f64>> = rest.iter().map(|t| parse_f(*t, line_no)).collect();
                    let v = v?;
                    walls.push(Wall { a: [v[0], v[1]], b: [v[2], v[3]] });
                }
                "obstacle" => {
                    if rest.len() != 5 {
                        return Err(Error::Config(format!("geometry line {line_no}: obstacle needs 5 numbers")));
                    }
                    let v: Result<Vec<f64>> = rest.iter().map(|t| parse_f(*t, line_no)).collect();
                    let v = v?;
                    obstacles.push(Obstacle {
                        center: [v[0], v[1]],
                        half_extents: [v[2], v[3]],
                        rotation: v[4],
                    });
                }
                "branch" => {
                    if rest.len() % 2 != 0 || rest.is_empty() {
                        return Err(Error::Config(format!("geometry line {line_no}: branch needs point pairs")));
                    }
                    let v: Result<Vec<f64>> = rest.iter().map(|t| parse_f(*t, line_no)).collect();
                    let v = v?;
                    branches.push(v.chunks(2).map(|c| [c[0], c[1]]).collect());
                }
                "target" => {
                    if rest.len() != 3 {
                        return Err(Error::Config(format!("geometry line {line_no}: target needs 3 numbers")));
                    }
                    let v: Result<Vec<f64>> = rest.iter().map(|t| parse_f(*t, line_no)).collect();
                    let v = v?;
                    target = Some(([v[0], v[1]], v[2]));
                }
                other => {
                    return Err(Error::Config(format!(
                        "geometry line {line_no}: unknown primitive {other:?}"
                    )));
                }
            }
        }
        let need = |key: &str| -> Result<f64> {
            meta.get(key)
                .copied()
                .ok_or_else(|| Error::Config(format!("geometry file missing meta {key}")))
        };
        let (target_position, target_radius) =
            target.ok_or_else(|| Error::Config("geometry file missing target".into()))?;
        Ok(WorldGeometry {
            wall_segments: walls,
            obstacles,
            corridor_width: need("corridor_width")?,
            corridor_length: need("corridor_length")?,
            fork_half_angle: need("fork_half_angle")?,
            branch_length: need("branch_length")?,
            x_cross: need("x_cross")?,
            target_position,
            target_radius,
            d_cross: need("d_cross")?,
            wall_height: need("wall_height")?,
            obstacle_height: need("obstacle_height")?,
            branch_half_width: need("branch_half_width")?,
            target_in_left: need("target_in_left")? != 0.0,
            branch_centerlines: branches,
        })
    }
}

/// Public raycast: walls, obstacles and the target sphere all participate.
pub fn raycast(
    world: &WorldGeometry,
    origin: [f64; 3],
    direction: [f64; 3],
    max_range: f64,
) -> Result<RayHit> {
    world.raycast_filtered(origin, direction, max_range, true)
}

pub fn check_collision(world: &WorldGeometry, center: [f64; 3], body_radius: f64) -> Result<bool> {
    world.check_collision(center, body_radius)
}

#[inline]
fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

#[inline]
fn left_normal(angle: f64) -> [f64; 2] {
    [-angle.sin(), angle.cos()]
}

#[inline]
fn madd(p: [f64; 2], v: [f64; 2], s: f64) -> [f64; 2] {
    [p[0] + s * v[0], p[1] + s * v[1]]
}

/// Builds the tunnel for a variant. The target branch (and, for jittered
/// layouts, obstacle offsets) come from the seed; identical (variant, seed)
/// pairs produce identical geometry.
pub fn build_world(variant: &EnvVariant, seed: u64) -> Result<WorldGeometry> {
    variant.validate()?;
    let tree = SeedTree::new(seed);
    let hw = variant.corridor_width / 2.0;
    let lc = variant.corridor_length;

    let mut walls = vec![
        Wall { a: [0.0, hw], b: [lc, hw] },
        Wall { a: [0.0, -hw], b: [lc, -hw] },
        Wall { a: [0.0, -hw], b: [0.0, hw] },
    ];

    let mut obstacles = Vec::with_capacity(variant.num_obstacles);
    let mut jitter_rng = tree.stream_indexed("world/obstacles", variant.obstacle_layout_id as usize);
    for i in 0..variant.num_obstacles {
        let mut cx = 8.0 * (i + 1) as f64;
        let mut cy = if i % 2 == 0 { 2.5 } else { -2.5 };
        if variant.obstacle_jitter > 0.0 {
            let j = variant.obstacle_jitter;
            cx += jitter_rng.gen_range(-j..=j);
            cy += jitter_rng.gen_range(-j / 2.0..=j / 2.0);
        }
        obstacles.push(Obstacle {
            center: [cx, cy],
            half_extents: [1.0, 0.5],
            rotation: 0.0,
        });
    }

    let world = if variant.has_fork {
        let hb = variant.branch_width / 2.0;
        let ang = variant.fork_half_angle.to_radians();
        let ang2 = variant.target_branch_angle.to_radians();
        let l1 = variant.leg1_length;
        let l2 = variant.branch_length - variant.leg1_length;

        // Place the crossroad center so each branch's outer wall line
        // passes exactly through the corridor wall end (lc, ±hw).
        let t0 = (hw - hb * ang.cos()) / ang.sin();
        let x_cross = lc - t0 * ang.cos() + hb * ang.sin();
        let c = [x_cross, 0.0];
        let apex = [x_cross + hb / ang.sin(), 0.0];

        let mut centerlines = Vec::with_capacity(2);
        let target_in_left = tree.stream("world/branch").gen::<bool>();
        let mut target_position = [0.0, 0.0];

        for (idx, side) in [1.0f64, -1.0].iter().enumerate() {
            let a1 = side * ang;
            let a2 = side * ang2;
            let u1 = unit(a1);
            let u2 = unit(a2);
            let n1 = left_normal(a1);
            let n2 = left_normal(a2);
            let b = madd(c, u1, l1);
            let e = madd(b, u2, l2);
            // Mitre joint at the bend; validated against degenerate angles.
            let c12 = n1[0] * n2[0] + n1[1] * n2[1];
            let mx = hb * (n1[0] + n2[0]) / (1.0 + c12);
            let my = hb * (n1[1] + n2[1]) / (1.0 + c12);
            let (m_out, m_in) = ([b[0] + mx, b[1] + my], [b[0] - mx, b[1] - my]);
            // Outer wall joins the corridor at its wall end; inner wall
            // starts at the shared wedge apex.
            let a_out = [lc, side * hw];
            let (a_out, m_out, m_in) = if *side > 0.0 {
                (a_out, m_out, m_in)
            } else {
                // Mirrored branch: the left offset becomes the inner side.
                (a_out, m_in, m_out)
            };
            let e_out = madd(e, n2, side * hb);
            let e_in = madd(e, n2, -side * hb);
            walls.push(Wall { a: a_out, b: m_out });
            walls.push(Wall { a: m_out, b: e_out });
            walls.push(Wall { a: apex, b: m_in });
            walls.push(Wall { a: m_in, b: e_in });
            walls.push(Wall { a: e_out, b: e_in });
            centerlines.push(vec![c, b, e]);

            let is_target_branch = (idx == 0) == target_in_left;
            if is_target_branch {
                target_position = madd(b, u2, variant.target_path_dist - l1);
            }
        }

        let dx = target_position[0] - c[0];
        let dy = target_position[1] - c[1];
        WorldGeometry {
            wall_segments: walls,
            obstacles,
            corridor_width: variant.corridor_width,
            corridor_length: lc,
            fork_half_angle: variant.fork_half_angle,
            branch_length: variant.branch_length,
            x_cross,
            target_position,
            target_radius: variant.target_radius,
            d_cross: (dx * dx + dy * dy).sqrt(),
            wall_height: variant.wall_height,
            obstacle_height: variant.obstacle_height,
            branch_half_width: hb,
            target_in_left,
            branch_centerlines: centerlines,
        }
    } else {
        // Dead-end corridor: cap the far end, target on the axis near it.
        walls.push(Wall { a: [lc, -hw], b: [lc, hw] });
        let target_position = [lc - 2.0, 0.0];
        let x_cross = target_position[0] - 5.0;
        WorldGeometry {
            wall_segments: walls,
            obstacles,
            corridor_width: variant.corridor_width,
            corridor_length: lc,
            fork_half_angle: 0.0,
            branch_length: 0.0,
            x_cross,
            target_position,
            target_radius: variant.target_radius,
            d_cross: 5.0,
            wall_height: variant.wall_height,
            obstacle_height: variant.obstacle_height,
            branch_half_width: 0.0,
            target_in_left: false,
            branch_centerlines: Vec::new(),
        }
    };

    // The target sphere must not poke through any wall.
    for wall in &world.wall_segments {
        let d2 = seg_dist2(world.target_position, wall.a, wall.b);
        if d2 < world.target_radius * world.target_radius {
            return Err(Error::Config(
                "target sphere intersects a wall; adjust the variant geometry".into(),
            ));
        }
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(seed: u64) -> WorldGeometry {
        build_world(&EnvVariant::original(), seed).unwrap()
    }

    #[test]
    fn deterministic_build() {
        let a = build_world(&EnvVariant::original(), 7).unwrap();
        let b = build_world(&EnvVariant::original(), 7).unwrap();
        assert_eq!(a.export_text(), b.export_text());
        assert_eq!(a, b);
    }

    #[test]
    fn complex_dimensions() {
        let w = build_world(&EnvVariant::complex(), 3).unwrap();
        assert_eq!(w.corridor_width, 15.0);
        assert_eq!(w.fork_half_angle, 40.0);
    }

    #[test]
    fn branch_choice_is_binomial() {
        let variant = EnvVariant::original();
        let left = (0..10_000)
            .filter(|&s| build_world(&variant, s).unwrap().target_in_left)
            .count() as i64;
        assert!((left - 5000).abs() <= 150, "left branch count {left} outside 5000 +/- 150");
    }

    #[test]
    fn invalid_variant_ranges_rejected() {
        let mut v = EnvVariant::original();
        v.corridor_width = 2.0;
        assert!(matches!(build_world(&v, 0), Err(Error::Config(_))));
        let mut v = EnvVariant::original();
        v.fork_half_angle = 85.0;
        assert!(matches!(build_world(&v, 0), Err(Error::Config(_))));
    }

    #[test]
    fn target_sits_inside_one_branch_only() {
        for seed in 0..50 {
            let w = world(seed);
            let hit = w.branch_containing(w.target_position);
            assert!(hit.is_some(), "seed {seed}: target not inside any branch strip");
            assert_eq!(hit, Some(if w.target_in_left { 0 } else { 1 }));
            assert!(
                !w.in_straight_corridor(w.target_position),
                "seed {seed}: target inside the straight corridor"
            );
        }
    }

    #[test]
    fn perpendicular_wall_distance() {
        let w = world(1);
        // Beam at +90 degrees from a point on the axis: half width away.
        let hit = raycast(&w, [30.0, 0.0, -2.0], [0.0, 1.0, 0.0], 20.0).unwrap();
        assert_eq!(hit.hit_kind, HitKind::Wall);
        assert!((hit.distance - 5.0).abs() < 1e-12, "distance {}", hit.distance);
    }

    #[test]
    fn miss_returns_max_range() {
        let w = world(1);
        // Down the corridor from the entrance: more than 20 m of free space.
        let hit = raycast(&w, [1.0, -4.0, -3.0], [1.0, 0.0, 0.0], 20.0).unwrap();
        assert_eq!(hit.hit_kind, HitKind::None);
        assert_eq!(hit.distance, 20.0);
        assert_eq!(hit.normalized_distance, 1.0);
    }

    #[test]
    fn ray_sees_obstacle_only_at_its_height() {
        let w = world(1);
        // First obstacle is centered at (8, 2.5); aim along +x at its height.
        let low = raycast(&w, [5.0, 2.5, -1.0], [1.0, 0.0, 0.0], 20.0).unwrap();
        assert_eq!(low.hit_kind, HitKind::Obstacle);
        assert!((low.distance - 2.0).abs() < 1e-12);
        // Above the 2 m obstacle top the same beam passes over it.
        let high = raycast(&w, [5.0, 2.5, -3.0], [1.0, 0.0, 0.0], 20.0).unwrap();
        assert_ne!(high.hit_kind, HitKind::Obstacle);
    }

    #[test]
    fn ray_finds_target_when_unoccluded() {
        let w = world(2);
        let t = w.target_position;
        // Stand 4 m short of the target along the second branch leg.
        let line = &w.branch_centerlines[if w.target_in_left { 0 } else { 1 }];
        let (b, e) = (line[1], line[2]);
        let len = ((e[0] - b[0]).powi(2) + (e[1] - b[1]).powi(2)).sqrt();
        let u = [(e[0] - b[0]) / len, (e[1] - b[1]) / len];
        let origin = [t[0] - 4.0 * u[0], t[1] - 4.0 * u[1], -1.0];
        let hit = raycast(&w, origin, [u[0], u[1], 0.0], 20.0).unwrap();
        assert_eq!(hit.hit_kind, HitKind::Target);
        assert!((hit.distance - 3.0).abs() < 1e-9, "distance {}", hit.distance);
    }

    #[test]
    fn target_occluded_from_entire_straight_corridor() {
        // The central claim of the layout: no sight line from the straight
        // corridor reaches the target, including from the doorway corners.
        for seed in [0, 1, 2, 3, 11] {
            let w = world(seed);
            let hw = w.corridor_width / 2.0;
            let mut points = Vec::new();
            for xi in 0..=40 {
                for yi in 0..=10 {
                    let x = 0.05 + w.corridor_length * xi as f64 / 40.0;
                    let y = -hw + 0.05 + (2.0 * hw - 0.1) * yi as f64 / 10.0;
                    points.push([x.min(w.corridor_length - 1e-3), y]);
                }
            }
            for corner in [[w.corridor_length - 1e-3, hw - 1e-3], [w.corridor_length - 1e-3, -hw + 1e-3]] {
                points.push(corner);
            }
            for p in points {
                for z in [-1.0, -2.5, -3.9] {
                    let origin = [p[0], p[1], z];
                    let to = [
                        w.target_position[0] - origin[0],
                        w.target_position[1] - origin[1],
                        -1.0 - z,
                    ];
                    let n = (to[0] * to[0] + to[1] * to[1] + to[2] * to[2]).sqrt();
                    let dir = [to[0] / n, to[1] / n, to[2] / n];
                    let hit = raycast(&w, origin, dir, n + 5.0).unwrap();
                    assert_ne!(
                        hit.hit_kind,
                        HitKind::Target,
                        "seed {seed}: target visible from ({}, {}, {z})",
                        p[0],
                        p[1]
                    );
                }
            }
        }
    }

    #[test]
    fn collision_trivials() {
        let w = world(1);
        assert!(!check_collision(&w, [30.0, 0.0, -2.0], 0.3).unwrap());
        // Center exactly on the top corridor wall.
        assert!(check_collision(&w, [30.0, 5.0, -2.0], 0.3).unwrap());
    }

    #[test]
    fn collision_flips_once_on_wall_approach() {
        let w = world(1);
        let radius = 0.3;
        let mut flips = 0;
        let mut prev = check_collision(&w, [30.0, 4.0, -2.0], radius).unwrap();
        assert!(!prev);
        let mut flip_y = f64::NAN;
        let mut y = 4.0;
        while y <= 5.0 {
            let hit = check_collision(&w, [30.0, y, -2.0], radius).unwrap();
            if hit != prev {
                flips += 1;
                flip_y = y;
                prev = hit;
            }
            y += 0.001;
        }
        assert_eq!(flips, 1);
        // Signed distance to the wall at the flip must not exceed the radius.
        assert!(5.0 - flip_y <= radius + 1e-9, "flip at y = {flip_y}");
        assert!(5.0 - flip_y >= radius - 2e-3, "flip at y = {flip_y}");
    }

    #[test]
    fn uav_altitude_clears_obstacles_but_not_walls() {
        let w = world(1);
        // 3 m altitude: obstacle tops are 1 m below, walls still reach.
        assert!(!check_collision(&w, [8.0, 2.5, -3.0], 0.3).unwrap());
        assert!(check_collision(&w, [8.0, 2.5, -1.0], 0.3).unwrap());
        assert!(check_collision(&w, [30.0, 4.8, -3.0], 0.3).unwrap());
    }

    #[test]
    fn rays_agree_with_clearance() {
        // No ray may report a hit closer than the point's clearance.
        let w = world(5);
        let mut rng = crate::rng::SeedTree::new(40).stream("test/rays");
        for _ in 0..500 {
            let p = [
                rng.gen_range(0.0..w.corridor_length),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..-0.5),
            ];
            let c = w.clearance(p);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let zc = rng.gen_range(-0.9..0.9f64);
            let s = (1.0 - zc * zc).sqrt();
            let dir = [s * theta.cos(), s * theta.sin(), zc];
            let hit = w.raycast_filtered(p, dir, 20.0, false).unwrap();
            assert!(
                hit.distance >= c.min(20.0) - 1e-6,
                "hit {} closer than clearance {c}",
                hit.distance
            );
        }
    }

    #[test]
    fn export_parse_roundtrip() {
        let w = world(9);
        let text = w.export_text();
        let back = WorldGeometry::parse_text(&text).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(WorldGeometry::parse_text("nonsense").is_err());
        let w = world(1);
        let bad = w.export_text().replace("wall", "wible");
        assert!(WorldGeometry::parse_text(&bad).is_err());
    }

    #[test]
    fn short_variants_build() {
        let sc = build_world(&EnvVariant::short_corridor(), 0).unwrap();
        assert!(sc.branch_centerlines.is_empty());
        assert_eq!(sc.obstacles.len(), 2);
        assert_eq!(sc.target_position, [18.0, 0.0]);
        let sf = build_world(&EnvVariant::short_fork(), 0).unwrap();
        assert_eq!(sf.branch_centerlines.len(), 2);
        assert!(sf.branch_containing(sf.target_position).is_some());
    }

    #[test]
    fn raycast_rejects_bad_input() {
        let w = world(1);
        assert!(raycast(&w, [f64::NAN, 0.0, -1.0], [1.0, 0.0, 0.0], 20.0).is_err());
        assert!(raycast(&w, [1.0, 0.0, -1.0], [2.0, 0.0, 0.0], 20.0).is_err());
        assert!(raycast(&w, [1.0, 0.0, -1.0], [1.0, 0.0, 0.0], 0.0).is_err());
    }
}
