//! Obstacle worlds, the straight rough path, and geometric queries.
//!
//! World file format, one statement per line, `#` starts a comment, meters:
//!
//! ```text
//! name env1_open
//! bounds -5 -12 0 75 12 12
//! path 0 0 6 60 0 6
//! box 10 -1 0 11 1 12
//! sphere 20 0 6 2
//! ```
//!
//! The bounds box is solid from the inside: leaving it counts as a collision.

use crate::error::{Error, Result};
use crate::Vec3;

/// Default collision radius of the vehicle.
pub const VEHICLE_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Unsigned distance from `p` to the box; zero inside.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let clamped = Vec3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]));
        (p - clamped).norm()
    }

    /// Distance from an interior point to the nearest face.
    fn interior_clearance(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|i| (p[i] - self.min[i]).min(self.max[i] - p[i]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Slab test. Returns the entry and exit parameters along the ray.
    fn ray_span(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - origin[i]) / dir[i];
            let b = (self.max[i] - origin[i]) / dir[i];
            t_near = t_near.max(a.min(b));
            t_far = t_far.min(a.max(b));
        }
        (t_near <= t_far).then_some((t_near, t_far))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Obstacle {
    Box(Aabb),
    Sphere { center: Vec3, radius: f64 },
}

impl Obstacle {
    /// Unsigned distance from `p` to the solid; zero inside.
    pub fn distance(&self, p: &Vec3) -> f64 {
        match self {
            Obstacle::Box(b) => b.distance(p),
            Obstacle::Sphere { center, radius } => ((p - center).norm() - radius).max(0.0),
        }
    }

    /// Nearest positive hit distance along a unit ray.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match self {
            Obstacle::Box(b) => {
                let (near, far) = b.ray_span(origin, dir)?;
                nearest_positive(near, far)
            }
            Obstacle::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                nearest_positive(-b - root, -b + root)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Obstacle::Box(b) => {
                if (0..3).any(|i| !(b.min[i] < b.max[i])) {
                    return Err(Error::Validation(format!(
                        "box min {:?} must be below max {:?} on every axis",
                        b.min.as_slice(),
                        b.max.as_slice()
                    )));
                }
            }
            Obstacle::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::Validation(format!(
                        "sphere radius must be positive, got {radius}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn nearest_positive(a: f64, b: f64) -> Option<f64> {
    if a > 0.0 {
        Some(a)
    } else if b > 0.0 {
        Some(b)
    } else {
        None
    }
}

/// Straight line from start to goal, known without obstacle information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoughPath {
    pub start: Vec3,
    pub end: Vec3,
    pub direction: Vec3,
    pub length: f64,
}

impl RoughPath {
    pub fn new(start: Vec3, end: Vec3) -> Result<Self> {
        let delta = end - start;
        let length = delta.norm();
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Validation("path start and end must differ".into()));
        }
        Ok(Self {
            start,
            end,
            direction: delta / length,
            length,
        })
    }

    /// Heading of the path in the horizontal plane.
    pub fn yaw(&self) -> f64 {
        self.direction.y.atan2(self.direction.x)
    }

    pub fn point_at(&self, distance: f64) -> Vec3 {
        if distance >= self.length {
            self.end
        } else {
            self.start + self.direction * distance.max(0.0)
        }
    }
}

/// Forward progress along the path, clamped to `[0, length]`.
pub fn path_progress(path: &RoughPath, position: &Vec3) -> f64 {
    (position - path.start)
        .dot(&path.direction)
        .clamp(0.0, path.length)
}

/// Perpendicular distance to the infinite line through the path.
pub fn path_deviation(path: &RoughPath, position: &Vec3) -> f64 {
    let rel = position - path.start;
    (rel - path.direction * rel.dot(&path.direction)).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub name: String,
    pub obstacles: Vec<Obstacle>,
    pub path_start: Vec3,
    pub path_end: Vec3,
    /// `None` means unbounded.
    pub bounds: Option<Aabb>,
}

impl WorldSpec {
    pub fn path(&self) -> Result<RoughPath> {
        RoughPath::new(self.path_start, self.path_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "world name `{}` must be a single non-empty token",
                self.name
            )));
        }
        self.path()?;
        if let Some(b) = &self.bounds {
            Obstacle::Box(*b).validate()?;
            for (label, p) in [("start", self.path_start), ("end", self.path_end)] {
                if !b.contains(&p) {
                    return Err(Error::Validation(format!("path {label} lies outside bounds")));
                }
            }
        }
        for o in &self.obstacles {
            o.validate()?;
        }
        Ok(())
    }

    /// Serializes to the world file format; [`load_world`] reads it back exactly.
    pub fn to_text(&self) -> String {
        fn join(values: &[f64]) -> String {
            values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
        }
        let mut out = format!("name {}\n", self.name);
        if let Some(b) = &self.bounds {
            out += &format!("bounds {}\n", join(&[b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z]));
        }
        let (s, e) = (self.path_start, self.path_end);
        out += &format!("path {}\n", join(&[s.x, s.y, s.z, e.x, e.y, e.z]));
        for o in &self.obstacles {
            match o {
                Obstacle::Box(b) => {
                    out += &format!("box {}\n", join(&[b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z]))
                }
                Obstacle::Sphere { center: c, radius } => {
                    out += &format!("sphere {}\n", join(&[c.x, c.y, c.z, *radius]))
                }
            }
        }
        out
    }
}

pub fn load_world(text: &str) -> Result<WorldSpec> {
    let mut name = None;
    let mut bounds = None;
    let mut path = None;
    let mut obstacles = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap_or_default();
        let args: Vec<&str> = tokens.collect();
        let parse_error = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let numbers = |count: usize| -> Result<Vec<f64>> {
            if args.len() != count {
                return Err(parse_error(format!(
                    "`{keyword}` takes {count} numbers, got {}",
                    args.len()
                )));
            }
            args.iter()
                .map(|a| {
                    a.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_error(format!("`{a}` is not a finite number")))
                })
                .collect()
        };
        match keyword {
            "name" => {
                if args.len() != 1 {
                    return Err(parse_error("`name` takes one token".into()));
                }
                name = Some(args[0].to_string());
            }
            "bounds" => {
                let v = numbers(6)?;
                bounds = Some(Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])));
            }
            "path" => {
                let v = numbers(6)?;
                path = Some((Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])));
            }
            "box" => {
                let v = numbers(6)?;
                obstacles.push(Obstacle::Box(Aabb::new(
                    Vec3::new(v[0], v[1], v[2]),
                    Vec3::new(v[3], v[4], v[5]),
                )));
            }
            "sphere" => {
                let v = numbers(4)?;
                obstacles.push(Obstacle::Sphere {
                    center: Vec3::new(v[0], v[1], v[2]),
                    radius: v[3],
                });
            }
            other => return Err(parse_error(format!("unknown statement `{other}`"))),
        }
    }
    let (path_start, path_end) =
        path.ok_or_else(|| Error::Validation("world file has no `path` statement".into()))?;
    let world = WorldSpec {
        name: name.unwrap_or_else(|| "unnamed".to_string()),
        obstacles,
        path_start,
        path_end,
        bounds,
    };
    world.validate()?;
    Ok(world)
}

/// Distance from `point` to the nearest solid surface, bounds included.
/// Zero when inside an obstacle or outside the bounds.
pub fn clearance(world: &WorldSpec, point: &Vec3) -> f64 {
    let walls = match &world.bounds {
        Some(b) if !b.contains(point) => return 0.0,
        Some(b) => b.interior_clearance(point),
        None => f64::INFINITY,
    };
    world
        .obstacles
        .iter()
        .map(|o| o.distance(point))
        .fold(walls, f64::min)
}

/// True when a sphere of `radius` at `point` overlaps any solid.
pub fn collision_check(world: &WorldSpec, point: &Vec3, radius: f64) -> bool {
    clearance(world, point) < radius
}

/// Index of the first waypoint in collision, if any.
pub fn sweep_collision(world: &WorldSpec, waypoints: &[Vec3], radius: f64) -> Option<usize> {
    waypoints
        .iter()
        .position(|p| collision_check(world, p, radius))
}

/// Nearest positive hit distance along a unit ray, bounds included.
pub fn ray_intersect(world: &WorldSpec, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    debug_assert!((dir.norm() - 1.0).abs() < 1e-9, "ray direction must be unit");
    let walls = world
        .bounds
        .as_ref()
        .and_then(|b| Obstacle::Box(*b).ray_hit(origin, dir));
    world
        .obstacles
        .iter()
        .filter_map(|o| o.ray_hit(origin, dir))
        .chain(walls)
        .min_by(f64::total_cmp)
}

/// Shared layout of the builtin worlds: a 60 m path along +x at 6 m altitude.
pub const PATH_LENGTH: f64 = 60.0;
const ALTITUDE: f64 = 6.0;
const CEILING: f64 = 12.0;
const HALF_SPAN: f64 = 12.0;

fn base_world(name: &str) -> WorldSpec {
    WorldSpec {
        name: name.to_string(),
        obstacles: Vec::new(),
        path_start: Vec3::new(0.0, 0.0, ALTITUDE),
        path_end: Vec3::new(PATH_LENGTH, 0.0, ALTITUDE),
        bounds: Some(Aabb::new(
            Vec3::new(-5.0, -HALF_SPAN, 0.0),
            Vec3::new(PATH_LENGTH + 15.0, HALF_SPAN, CEILING),
        )),
    }
}

fn cuboid(min: [f64; 3], max: [f64; 3]) -> Obstacle {
    Obstacle::Box(Aabb::new(Vec3::from(min), Vec3::from(max)))
}

fn sphere(center: [f64; 3], radius: f64) -> Obstacle {
    Obstacle::Sphere {
        center: Vec3::from(center),
        radius,
    }
}

/// Two full-height walls whose inner faces are `half_width` from the path.
fn corridor(half_width: f64) -> [Obstacle; 2] {
    let (x0, x1) = (-5.0, PATH_LENGTH + 5.0);
    [
        cuboid([x0, half_width, 0.0], [x1, half_width + 1.0, CEILING]),
        cuboid([x0, -half_width - 1.0, 0.0], [x1, -half_width, CEILING]),
    ]
}

/// 1 m thick walls at each `x` leaving a gap `[lo, hi]` on the lateral
/// (`vertical = false`) or vertical axis, alternating sides.
fn slalom(gates: &[f64], first_gap: (f64, f64), vertical: bool) -> Vec<Obstacle> {
    let mut out = Vec::new();
    for (i, &x) in gates.iter().enumerate() {
        let (lo, hi) = if i % 2 == 0 {
            first_gap
        } else if vertical {
            // Mirror about the path altitude.
            (2.0 * ALTITUDE - first_gap.1, 2.0 * ALTITUDE - first_gap.0)
        } else {
            (-first_gap.1, -first_gap.0)
        };
        let (x0, x1) = (x - 0.5, x + 0.5);
        if vertical {
            out.push(cuboid([x0, -HALF_SPAN, 0.0], [x1, HALF_SPAN, lo]));
            out.push(cuboid([x0, -HALF_SPAN, hi], [x1, HALF_SPAN, CEILING]));
        } else {
            out.push(cuboid([x0, -HALF_SPAN, 0.0], [x1, lo, CEILING]));
            out.push(cuboid([x0, hi, 0.0], [x1, HALF_SPAN, CEILING]));
        }
    }
    out
}

/// The ten builtin environments: seven training tracks (open, two corridors,
/// two left-right and two up-down slaloms) and three mixed-obstacle test tracks.
pub fn builtin_envs() -> Vec<WorldSpec> {
    let mut worlds = Vec::with_capacity(10);

    worlds.push(base_world("env1_open"));

    let mut w = base_world("env2_corridor_wide");
    w.obstacles.extend(corridor(4.0));
    worlds.push(w);

    let mut w = base_world("env3_corridor_narrow");
    w.obstacles.extend(corridor(2.0));
    worlds.push(w);

    let mut w = base_world("env4_slalom_lr");
    w.obstacles = slalom(&[10.0, 20.0, 30.0, 40.0, 50.0], (0.5, 3.5), false);
    worlds.push(w);

    let mut w = base_world("env5_slalom_lr_dense");
    w.obstacles = slalom(&[8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0], (-3.5, -0.5), false);
    worlds.push(w);

    let mut w = base_world("env6_slalom_ud");
    w.obstacles = slalom(&[10.0, 20.0, 30.0, 40.0, 50.0], (6.5, 9.5), true);
    worlds.push(w);

    let mut w = base_world("env7_slalom_ud_dense");
    w.obstacles = slalom(&[8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0], (2.5, 5.5), true);
    worlds.push(w);

    let mut w = base_world("env8_mixed_corridor");
    w.obstacles.extend(corridor(3.0));
    w.obstacles.extend([
        sphere([15.0, 1.5, 6.0], 1.0),
        cuboid([25.0, -3.0, 0.0], [26.0, -1.0, CEILING]),
        sphere([35.0, -1.0, 5.0], 1.2),
        cuboid([42.0, 0.5, 3.0], [43.0, 3.0, 9.0]),
        // Large sphere near the end leaving a narrow gap on the left.
        sphere([52.0, -0.5, 6.0], 2.0),
    ]);
    worlds.push(w);

    let mut w = base_world("env9_mixed_scatter");
    w.obstacles.extend([
        sphere([12.0, 0.5, 6.5], 1.5),
        cuboid([20.0, -4.0, 4.0], [22.0, -0.5, 8.0]),
        sphere([28.0, -2.0, 5.0], 1.0),
        cuboid([34.0, -1.0, 0.0], [35.0, 1.0, 7.5]),
        sphere([44.0, 2.0, 7.0], 2.5),
        sphere([50.0, -1.5, 6.0], 0.8),
        cuboid([55.0, 0.8, 2.0], [57.0, 3.0, 10.0]),
    ]);
    worlds.push(w);

    let mut w = base_world("env10_mixed_pillars");
    w.obstacles.extend(corridor(5.0));
    for (i, x) in [10.0, 18.0, 26.0, 34.0, 42.0, 50.0].into_iter().enumerate() {
        let y = if i % 2 == 0 { 0.6 } else { -0.6 };
        w.obstacles
            .push(cuboid([x - 0.4, y - 0.4, 0.0], [x + 0.4, y + 0.4, CEILING]));
    }
    w.obstacles.extend([sphere([22.0, 2.5, 8.0], 1.0), sphere([46.0, -2.5, 4.0], 1.0)]);
    worlds.push(w);

    worlds
}

/// Looks up a builtin world by full name, `envN`, or `N`.
pub fn builtin(name: &str) -> Option<WorldSpec> {
    let worlds = builtin_envs();
    let index = name
        .strip_prefix("env")
        .unwrap_or(name)
        .parse::<usize>()
        .ok()
        .filter(|i| (1..=worlds.len()).contains(i));
    match index {
        Some(i) => worlds.into_iter().nth(i - 1),
        None => worlds.into_iter().find(|w| w.name == name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unbounded(obstacles: Vec<Obstacle>) -> WorldSpec {
        WorldSpec {
            name: "test".into(),
            obstacles,
            path_start: Vec3::zeros(),
            path_end: Vec3::new(60.0, 0.0, 0.0),
            bounds: None,
        }
    }

    #[test]
    fn load_minimal_world() {
        let w = load_world("# empty\nbounds -1 -1 -1 70 1 1\npath 0 0 0 60 0 0\n").unwrap();
        assert!(w.obstacles.is_empty());
        assert_eq!(w.path().unwrap().length, 60.0);
    }

    #[test]
    fn load_sphere_statement() {
        let w = load_world("path 0 0 0 60 0 0\nsphere 10 0 0 2\n").unwrap();
        assert_eq!(
            w.obstacles,
            vec![Obstacle::Sphere {
                center: Vec3::new(10.0, 0.0, 0.0),
                radius: 2.0
            }]
        );
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            load_world("path 0 0 0 60 0 0\nbox 5 0 0 4 1 1\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            load_world("path 0 0 0 60 0 0\nsphere 1 2 3\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_world("path 0 0 0 60 0 0\ncone 1 2 3 4\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_world("path 0 0 0 x 0 0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(load_world("path 1 1 1 1 1 1\n").is_err());
        assert!(load_world("sphere 1 1 1 1\n").is_err());
        assert!(load_world("bounds 0 0 0 1 1 1\npath 0 0 0 60 0 0\n").is_err());
        assert!(load_world("path 0 0 0 60 0 0\nsphere 1 1 1 0\n").is_err());
    }

    #[test]
    fn builtin_worlds_are_valid_and_round_trip() {
        let worlds = builtin_envs();
        assert_eq!(worlds.len(), 10);
        for w in &worlds {
            w.validate().unwrap();
            assert_eq!(w.path().unwrap().length, PATH_LENGTH);
            assert!(!collision_check(w, &w.path_start, VEHICLE_RADIUS), "{}", w.name);
            assert_eq!(&load_world(&w.to_text()).unwrap(), w);
        }
        assert!(worlds[0].obstacles.is_empty());
        for w in &worlds[7..] {
            assert!(w.obstacles.iter().any(|o| matches!(o, Obstacle::Box(_))));
            assert!(w.obstacles.iter().any(|o| matches!(o, Obstacle::Sphere { .. })));
        }
    }

    fn corridor_width(w: &WorldSpec) -> f64 {
        let probe = Vec3::new(30.0, 0.0, ALTITUDE);
        let left = ray_intersect(w, &probe, &Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let right = ray_intersect(w, &probe, &Vec3::new(0.0, -1.0, 0.0)).unwrap();
        left + right
    }

    #[test]
    fn corridors_differ_in_width() {
        let worlds = builtin_envs();
        assert!(corridor_width(&worlds[2]) < corridor_width(&worlds[1]));
    }

    #[test]
    fn slaloms_block_the_straight_path() {
        for w in &builtin_envs()[3..7] {
            let path = w.path().unwrap();
            let hit = ray_intersect(w, &path.start, &path.direction).unwrap();
            assert!(hit < path.length, "{} is not blocked", w.name);
        }
    }

    #[test]
    fn builtin_lookup() {
        assert_eq!(builtin("env3").unwrap().name, "env3_corridor_narrow");
        assert_eq!(builtin("10").unwrap().name, "env10_mixed_pillars");
        assert_eq!(builtin("env1_open").unwrap().name, "env1_open");
        assert!(builtin("env11").is_none());
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn collision_examples() {
        let w = unbounded(vec![sphere([10.0, 0.0, 0.0], 2.0)]);
        assert!(!collision_check(&w, &Vec3::new(22.0, 0.0, 0.0), 0.3));
        assert!(collision_check(&w, &Vec3::new(10.0, 0.0, 0.0), 0.3));
        let b = unbounded(vec![cuboid([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])]);
        // 0.5 is exact in binary, so the face distance equals the radius.
        assert!(!collision_check(&b, &Vec3::new(1.5, 0.5, 0.5), 0.5));
        assert!(collision_check(&b, &Vec3::new(1.4, 0.5, 0.5), 0.5));
    }

    #[test]
    fn bounds_are_solid() {
        let w = base_world("b");
        assert!(collision_check(&w, &Vec3::new(0.0, 0.0, 0.1), 0.3));
        assert!(collision_check(&w, &Vec3::new(0.0, 0.0, -3.0), 0.3));
        assert!(!collision_check(&w, &Vec3::new(0.0, 0.0, 6.0), 0.3));
    }

    #[test]
    fn sweep_examples() {
        let w = unbounded(vec![cuboid([5.0, -1.0, -1.0], [6.0, 1.0, 1.0])]);
        let free: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(sweep_collision(&w, &free, 0.3), None);
        let ending_inside: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64 * 1.1, 0.0, 0.0)).collect();
        assert_eq!(sweep_collision(&w, &ending_inside, 0.3), Some(5));
        let through: Vec<Vec3> = (0..12).map(|i| Vec3::new(i as f64 * 0.5 + 2.0, 0.0, 0.0)).collect();
        // Sample 5 sits at x = 4.5, 0.5 m from the face; sample 6 at x = 5 is the first inside.
        assert_eq!(sweep_collision(&w, &through, 0.3), Some(6));
    }

    #[test]
    fn ray_examples() {
        let w = unbounded(vec![sphere([10.0, 0.0, 0.0], 2.0)]);
        let x = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(ray_intersect(&w, &Vec3::zeros(), &x), Some(8.0));
        assert_eq!(ray_intersect(&w, &Vec3::zeros(), &-x), None);

        // Tangent: the ray just touches the sphere at the foot of the
        // perpendicular from the centre, |c − o| projected on the ray = 10.
        let tangent = unbounded(vec![sphere([10.0, 2.0, 0.0], 2.0)]);
        assert_eq!(ray_intersect(&tangent, &Vec3::zeros(), &x), Some(10.0));

        let b = unbounded(vec![cuboid([4.0, -1.0, -1.0], [5.0, 1.0, 1.0])]);
        assert_eq!(ray_intersect(&b, &Vec3::zeros(), &x), Some(4.0));
        let bounded = base_world("b");
        let d = ray_intersect(&bounded, &Vec3::new(0.0, 0.0, 6.0), &Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(d, Some(6.0));
    }

    #[test]
    fn ray_hits_are_on_surfaces() {
        let w = builtin("env9").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 500 {
            let origin = Vec3::new(
                rng.gen_range(0.0..60.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(1.0..11.0),
            );
            if collision_check(&w, &origin, 0.05) {
                continue;
            }
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let d = ray_intersect(&w, &origin, &dir).expect("bounded world always hits");
            assert!(collision_check(&w, &(origin + dir * d), 1e-6));
            if d > 0.01 {
                assert!(!collision_check(&w, &(origin + dir * (d - 0.01)), 1e-9));
            }
            checked += 1;
        }
    }

    #[test]
    fn path_metrics() {
        let path = RoughPath::new(Vec3::new(0.0, 0.0, 6.0), Vec3::new(60.0, 0.0, 6.0)).unwrap();
        assert_eq!(path_progress(&path, &path.start), 0.0);
        assert_eq!(path_progress(&path, &path.end), 60.0);
        assert_eq!(path_progress(&path, &Vec3::new(65.0, 0.0, 6.0)), 60.0);
        assert_eq!(path_progress(&path, &Vec3::new(-3.0, 0.0, 6.0)), 0.0);
        assert_eq!(path_deviation(&path, &Vec3::new(12.0, 0.0, 6.0)), 0.0);
        assert_eq!(path_deviation(&path, &Vec3::new(12.0, 3.0, 6.0)), 3.0);
        assert_eq!(path_deviation(&path, &Vec3::new(12.0, 4.0, 9.0)), 5.0);
        assert_eq!(path.yaw(), 0.0);
    }

    /// Nearest point on each of the six face rectangles.
    fn face_distance(b: &Aabb, p: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for axis in 0..3 {
            for plane in [b.min[axis], b.max[axis]] {
                let mut q = *p;
                q[axis] = plane;
                for other in (0..3).filter(|&a| a != axis) {
                    q[other] = q[other].max(b.min[other]).min(b.max[other]);
                }
                best = best.min((p - q).norm());
            }
        }
        best
    }

    fn box_distance_by_faces(b: &Aabb, p: &Vec3) -> f64 {
        if b.contains(p) {
            0.0
        } else {
            face_distance(b, p)
        }
    }

    #[test]
    fn collision_matches_surface_oracle() {
        let w = builtin("env8").unwrap();
        let bounds = w.bounds.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.gen_range(-6.0..76.0),
                rng.gen_range(-13.0..13.0),
                rng.gen_range(-1.0..13.0),
            );
            let radius = rng.gen_range(0.05..1.5);
            let mut oracle = if bounds.contains(&p) {
                face_distance(&bounds, &p)
            } else {
                0.0
            };
            for o in &w.obstacles {
                let d = match o {
                    Obstacle::Box(b) => box_distance_by_faces(b, &p),
                    Obstacle::Sphere { center, radius: r } => {
                        // Dense sampling of the sphere surface, refined by the
                        // exact radial distance once the nearest sample is found.
                        let mut best = f64::INFINITY;
                        for i in 0..=36 {
                            let th = std::f64::consts::PI * i as f64 / 36.0;
                            for j in 0..72 {
                                let ph = 2.0 * std::f64::consts::PI * j as f64 / 72.0;
                                let s = center
                                    + Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
                                        * *r;
                                best = best.min((p - s).norm());
                            }
                        }
                        let radial = (p - center).norm() - r;
                        if radial > 0.0 {
                            assert!(best + 1e-9 >= radial && best - radial < r * 0.1);
                        }
                        radial.max(0.0)
                    }
                };
                oracle = oracle.min(d);
            }
            assert!((clearance(&w, &p) - oracle).abs() < 1e-6);
            if (oracle - radius).abs() > 1e-6 {
                assert_eq!(collision_check(&w, &p, radius), oracle < radius);
            }
        }
    }

    proptest! {
        #[test]
        fn progress_monotone_along_forward_motion(
            start in prop::array::uniform3(-10.0f64..70.0),
            step in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let path = RoughPath::new(Vec3::new(0.0, 0.0, 6.0), Vec3::new(60.0, 0.0, 6.0)).unwrap();
            let mut step = Vec3::from(step);
            if step.dot(&path.direction) < 0.0 {
                step = -step;
            }
            let mut p = Vec3::from(start);
            let mut last = path_progress(&path, &p);
            for _ in 0..20 {
                p += step;
                let now = path_progress(&path, &p);
                prop_assert!(now >= last);
                last = now;
            }
        }
    }
}
