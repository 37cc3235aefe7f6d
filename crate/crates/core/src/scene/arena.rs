use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, RigidTransform, Vec3};
use crate::seed;

/// Planar pose: position in meters and heading in degrees (counter-clockwise
/// from +x).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_deg: f64,
}

impl Pose2 {
    pub const fn new(x_m: f64, y_m: f64, heading_deg: f64) -> Self {
        Pose2 { x_m, y_m, heading_deg }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x_m, self.y_m)
    }

    /// Local-to-world transform.
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_pose2(self.x_m, self.y_m, self.heading_deg)
    }

    /// `self ⊕ local`: a pose given in this pose's frame, expressed in the
    /// parent frame.
    pub fn compose(&self, local: &Pose2) -> Pose2 {
        let p = self.transform().apply(Vec3::new(local.x_m, local.y_m, 0.0));
        Pose2::new(p.x, p.y, self.heading_deg + local.heading_deg)
    }

    /// `other` expressed in this pose's frame.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let p = self.transform().inverse().apply(Vec3::new(other.x_m, other.y_m, 0.0));
        Pose2::new(p.x, p.y, other.heading_deg - self.heading_deg)
    }

    pub fn heading_vector(&self) -> Vec3 {
        let h = self.heading_deg.to_radians();
        Vec3::new(h.cos(), h.sin(), 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x_m: f64,
    pub min_y_m: f64,
    pub max_x_m: f64,
    pub max_y_m: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x_m && x <= self.max_x_m && y >= self.min_y_m && y <= self.max_y_m
    }

    /// The four boundary walls.
    pub fn walls(&self) -> Vec<Wall> {
        let (a, b, c, d) = (self.min_x_m, self.min_y_m, self.max_x_m, self.max_y_m);
        vec![Wall::new(a, b, c, b), Wall::new(c, b, c, d), Wall::new(c, d, a, d), Wall::new(a, d, a, b)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub x1_m: f64,
    pub y1_m: f64,
    pub x2_m: f64,
    pub y2_m: f64,
}

impl Wall {
    pub const fn new(x1_m: f64, y1_m: f64, x2_m: f64, y2_m: f64) -> Self {
        Wall { x1_m, y1_m, x2_m, y2_m }
    }
}

/// Panel footprint. The long axis runs along `heading_deg`; the front face
/// (the one carrying wrenches by default) faces the axis rotated by +90°.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelPlacement {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_deg: f64,
    pub width_m: f64,
    pub thickness_m: f64,
}

impl PanelPlacement {
    pub fn center(&self) -> Point2 {
        Point2::new(self.x_m, self.y_m)
    }

    pub fn axis(&self) -> Point2 {
        let h = self.heading_deg.to_radians();
        Point2::new(h.cos(), h.sin())
    }

    /// Outward normal of the front face.
    pub fn front_normal(&self) -> Point2 {
        let a = self.axis();
        Point2::new(-a.y, a.x)
    }

    pub fn corners(&self) -> [Point2; 4] {
        rectangle_corners(self.center(), self.heading_deg, self.width_m, self.thickness_m)
    }
}

/// Static obstacle: a rectangle, or a single segment when `thickness_m` is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_deg: f64,
    pub length_m: f64,
    pub thickness_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArenaSpec {
    pub bounds: Bounds,
    #[serde(default)]
    pub walls: Vec<Wall>,
    pub panel: PanelPlacement,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
}

/// What a lidar beam hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HitOwner {
    Wall(usize),
    Panel,
    Distractor(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSegment {
    pub a: Point2,
    pub b: Point2,
    pub owner: HitOwner,
}

fn rectangle_corners(c: Point2, heading_deg: f64, length: f64, thickness: f64) -> [Point2; 4] {
    let h = heading_deg.to_radians();
    let (u, n) = ((h.cos(), h.sin()), (-h.sin(), h.cos()));
    let (hl, ht) = (length / 2.0, thickness / 2.0);
    let at = |s: f64, t: f64| Point2::new(c.x + u.0 * s + n.0 * t, c.y + u.1 * s + n.1 * t);
    [at(-hl, -ht), at(hl, -ht), at(hl, ht), at(-hl, ht)]
}

fn rectangle_segments(corners: [Point2; 4], owner: HitOwner, out: &mut Vec<WorldSegment>) {
    for i in 0..4 {
        out.push(WorldSegment { a: corners[i], b: corners[(i + 1) % 4], owner });
    }
}

impl ArenaSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.panel;
        if !(p.width_m > p.thickness_m && p.thickness_m > 0.0) {
            return Err(Error::Config(format!(
                "panel needs width > thickness > 0 (got {} × {})",
                p.width_m, p.thickness_m
            )));
        }
        if !self.bounds.contains(p.x_m, p.y_m) {
            return Err(Error::Config("panel lies outside the arena bounds".into()));
        }
        for d in &self.distractors {
            if !(d.length_m > 0.0 && d.thickness_m >= 0.0) {
                return Err(Error::Config("distractor sizes must be positive".into()));
            }
        }
        Ok(())
    }

    /// Every reflecting segment in the world.
    pub fn segments(&self) -> Vec<WorldSegment> {
        let mut out = Vec::new();
        for (i, w) in self.walls.iter().enumerate() {
            out.push(WorldSegment {
                a: Point2::new(w.x1_m, w.y1_m),
                b: Point2::new(w.x2_m, w.y2_m),
                owner: HitOwner::Wall(i),
            });
        }
        rectangle_segments(self.panel.corners(), HitOwner::Panel, &mut out);
        for (i, d) in self.distractors.iter().enumerate() {
            let c = Point2::new(d.x_m, d.y_m);
            if d.thickness_m > 0.0 {
                rectangle_segments(
                    rectangle_corners(c, d.heading_deg, d.length_m, d.thickness_m),
                    HitOwner::Distractor(i),
                    &mut out,
                );
            } else {
                let k = rectangle_corners(c, d.heading_deg, d.length_m, 0.0);
                out.push(WorldSegment { a: k[0], b: k[1], owner: HitOwner::Distractor(i) });
            }
        }
        out
    }
}

/// Distance along the unit ray `o + t·d` to segment `[a, b]`, if hit.
pub fn ray_segment_distance(o: Point2, d: Point2, a: Point2, b: Point2) -> Option<f64> {
    let e = (b.x - a.x, b.y - a.y);
    let denom = d.x * e.1 - d.y * e.0;
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = (a.x - o.x, a.y - o.y);
    let t = (w.0 * e.1 - w.1 * e.0) / denom;
    let s = (w.0 * d.y - w.1 * d.x) / denom;
    (t > 0.0 && (0.0..=1.0).contains(&s)).then_some(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserSpec {
    pub fov_deg: f64,
    pub resolution_deg: f64,
    pub min_range_m: f64,
    pub max_range_m: f64,
    pub range_noise_sigma_m: f64,
}

impl Default for LaserSpec {
    fn default() -> Self {
        LaserSpec {
            fov_deg: 270.0,
            resolution_deg: 0.25,
            min_range_m: 0.5,
            max_range_m: 50.0,
            range_noise_sigma_m: 0.01,
        }
    }
}

impl LaserSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return Err(Error::Config(format!("lidar fov must be in (0, 360], got {}", self.fov_deg)));
        }
        if !(self.resolution_deg > 0.0) {
            return Err(Error::Config("lidar resolution must be positive".into()));
        }
        if !(self.max_range_m > 0.0 && self.min_range_m >= 0.0 && self.min_range_m < self.max_range_m) {
            return Err(Error::Config("lidar range limits are inconsistent".into()));
        }
        if !(self.range_noise_sigma_m >= 0.0) {
            return Err(Error::Config("lidar noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn beam_count(&self) -> usize {
        (self.fov_deg / self.resolution_deg + 1e-9).floor() as usize + 1
    }
}

/// One lidar sweep. `ranges[i]` belongs to bearing
/// `start_angle_deg + i·resolution_deg` relative to the sensor heading;
/// `f64::INFINITY` marks beams without a return.
#[derive(Clone, Debug, PartialEq)]
pub struct LaserScan {
    pub origin: Pose2,
    pub start_angle_deg: f64,
    pub resolution_deg: f64,
    pub ranges: Vec<f64>,
}

impl LaserScan {
    pub fn bearing_deg(&self, i: usize) -> f64 {
        self.start_angle_deg + i as f64 * self.resolution_deg
    }

    /// Hit points in the sensor frame (z = 0); beams without return dropped.
    pub fn sensor_points(&self) -> Vec<Vec3> {
        self.ranges
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_finite())
            .map(|(i, r)| {
                let b = self.bearing_deg(i).to_radians();
                Vec3::new(r * b.cos(), r * b.sin(), 0.0)
            })
            .collect()
    }

    pub fn world_points(&self) -> Vec<Vec3> {
        let t = self.origin.transform();
        self.sensor_points().into_iter().map(|p| t.apply(p)).collect()
    }
}

/// Simulated sweep from a sensor at `sensor_pose` (world frame).
pub fn simulate_scan(arena: &ArenaSpec, sensor_pose: Pose2, spec: &LaserSpec, seed: u64) -> Result<LaserScan> {
    simulate_scan_labeled(arena, sensor_pose, spec, seed).map(|(s, _)| s)
}

/// Like [`simulate_scan`], also reporting which object each beam hit.
pub fn simulate_scan_labeled(
    arena: &ArenaSpec,
    sensor_pose: Pose2,
    spec: &LaserSpec,
    seed: u64,
) -> Result<(LaserScan, Vec<Option<HitOwner>>)> {
    spec.validate()?;
    if !arena.bounds.contains(sensor_pose.x_m, sensor_pose.y_m) {
        return Err(Error::Config(format!(
            "sensor at ({:.2}, {:.2}) is outside the arena",
            sensor_pose.x_m, sensor_pose.y_m
        )));
    }
    let segments = arena.segments();
    let n = spec.beam_count();
    let start = -spec.fov_deg / 2.0;
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, spec.range_noise_sigma_m.max(0.0))
        .map_err(|e| Error::Config(format!("lidar noise: {e}")))?;
    let o = sensor_pose.position();
    let mut ranges = Vec::with_capacity(n);
    let mut owners = Vec::with_capacity(n);
    for i in 0..n {
        let b = (sensor_pose.heading_deg + start + i as f64 * spec.resolution_deg).to_radians();
        let d = Point2::new(b.cos(), b.sin());
        let mut best: Option<(f64, HitOwner)> = None;
        for s in &segments {
            if let Some(t) = ray_segment_distance(o, d, s.a, s.b) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, s.owner));
                }
            }
        }
        // draw noise for every beam so the stream stays aligned with beam index
        let eps = if spec.range_noise_sigma_m > 0.0 {
            let s = spec.range_noise_sigma_m;
            noise.sample(&mut rng).clamp(-4.0 * s, 4.0 * s)
        } else {
            0.0
        };
        match best {
            Some((t, owner)) if t >= spec.min_range_m && t <= spec.max_range_m => {
                ranges.push((t + eps).clamp(spec.min_range_m, spec.max_range_m));
                owners.push(Some(owner));
            }
            _ => {
                ranges.push(f64::INFINITY);
                owners.push(None);
            }
        }
    }
    Ok((
        LaserScan { origin: sensor_pose, start_angle_deg: start, resolution_deg: spec.resolution_deg, ranges },
        owners,
    ))
}

/// Union of both scans' hit points in scan A's sensor frame.
/// `transform_ab` maps scan B's sensor frame into scan A's.
pub fn merge_scans(scan_a: &LaserScan, scan_b: &LaserScan, transform_ab: &RigidTransform) -> Vec<Vec3> {
    let mut out = scan_a.sensor_points();
    out.extend(scan_b.sensor_points().into_iter().map(|p| transform_ab.apply(p)));
    out
}

/// Lidar mounting on the robot base: two 270° sensors on opposite corners
/// give full coverage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub lidar_front: Pose2,
    pub lidar_rear: Pose2,
}

impl Default for RobotSpec {
    fn default() -> Self {
        RobotSpec {
            lidar_front: Pose2::new(0.35, 0.25, 45.0),
            lidar_rear: Pose2::new(-0.35, -0.25, -135.0),
        }
    }
}

/// Both lidar sweeps from the robot at `robot_pose`, merged into the base
/// frame.
pub fn merged_base_scan(
    arena: &ArenaSpec,
    robot_pose: Pose2,
    robot: &RobotSpec,
    laser: &LaserSpec,
    seed: u64,
) -> Result<Vec<Vec3>> {
    let front = simulate_scan(arena, robot_pose.compose(&robot.lidar_front), laser, seed::derive(seed, "lidar-front"))?;
    let rear = simulate_scan(arena, robot_pose.compose(&robot.lidar_rear), laser, seed::derive(seed, "lidar-rear"))?;
    let base_from_front = robot.lidar_front.transform();
    let base_from_rear = robot.lidar_rear.transform();
    let front_from_rear = base_from_front.inverse().compose(&base_from_rear);
    Ok(merge_scans(&front, &rear, &front_from_rear)
        .into_iter()
        .map(|p| base_from_front.apply(p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_arena() -> ArenaSpec {
        ArenaSpec {
            bounds: Bounds { min_x_m: -10.0, min_y_m: -10.0, max_x_m: 10.0, max_y_m: 10.0 },
            walls: vec![],
            panel: PanelPlacement { x_m: 5.0, y_m: 0.0, heading_deg: 90.0, width_m: 1.2, thickness_m: 0.1 },
            distractors: vec![],
        }
    }

    #[test]
    fn beam_count_matches_fov() {
        assert_eq!(LaserSpec::default().beam_count(), 1081);
    }

    #[test]
    fn empty_world_has_no_returns() {
        let mut a = open_arena();
        a.panel.x_m = 100.0; // far outside every beam's range
        a.bounds.max_x_m = 200.0;
        let spec = LaserSpec { range_noise_sigma_m: 0.0, ..LaserSpec::default() };
        let s = simulate_scan(&a, Pose2::new(0.0, 0.0, 180.0), &spec, 1).unwrap();
        assert!(s.ranges.iter().all(|r| r.is_infinite()));
    }

    #[test]
    fn perpendicular_wall_range_is_exact() {
        let mut a = open_arena();
        a.walls.push(Wall::new(1.0, -100.0, 1.0, 100.0));
        a.bounds = Bounds { min_x_m: -200.0, min_y_m: -200.0, max_x_m: 200.0, max_y_m: 200.0 };
        let spec = LaserSpec { fov_deg: 180.0, range_noise_sigma_m: 0.0, ..LaserSpec::default() };
        let s = simulate_scan(&a, Pose2::new(0.0, 0.0, 0.0), &spec, 1).unwrap();
        let mid = spec.beam_count() / 2;
        assert_eq!(s.bearing_deg(mid), 0.0);
        assert_eq!(s.ranges[mid], 1.0);
    }

    #[test]
    fn outside_bounds_is_config_error() {
        let a = open_arena();
        let r = simulate_scan(&a, Pose2::new(50.0, 0.0, 0.0), &LaserSpec::default(), 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_hits_lie_on_panel() {
        let a = open_arena();
        let spec = LaserSpec { range_noise_sigma_m: 0.0, ..LaserSpec::default() };
        let (s, owners) = simulate_scan_labeled(&a, Pose2::new(0.0, 0.0, 0.0), &spec, 1).unwrap();
        let pts = s.world_points();
        let hits: Vec<&Vec3> = pts.iter().collect();
        assert!(!hits.is_empty());
        let face_x = 5.0 - 0.05;
        for (p, o) in hits.iter().zip(owners.iter().flatten()) {
            assert_eq!(*o, HitOwner::Panel);
            assert!((p.x - face_x).abs() < 1e-9, "{p:?}");
            assert!(p.y.abs() <= 0.6 + 1e-9);
        }
    }

    #[test]
    fn noise_is_clamped_and_deterministic() {
        let mut a = open_arena();
        a.walls = a.bounds.walls();
        let spec = LaserSpec { range_noise_sigma_m: 0.05, ..LaserSpec::default() };
        let p = Pose2::new(1.0, 2.0, 30.0);
        let s1 = simulate_scan(&a, p, &spec, 7).unwrap();
        let s2 = simulate_scan(&a, p, &spec, 7).unwrap();
        assert_eq!(s1, s2);
        let clean = simulate_scan(&a, p, &LaserSpec { range_noise_sigma_m: 0.0, ..spec }, 7).unwrap();
        for (r, c) in s1.ranges.iter().zip(&clean.ranges) {
            assert!(r.is_finite() == c.is_finite());
            if r.is_finite() {
                assert!(*r >= c - 4.0 * 0.05 - 1e-12 && *r <= spec.max_range_m);
            }
        }
    }

    #[test]
    fn merge_keeps_duplicates_and_empty() {
        let mut a = open_arena();
        a.walls = a.bounds.walls();
        let spec = LaserSpec::default();
        let s = simulate_scan(&a, Pose2::new(0.0, 0.0, 0.0), &spec, 3).unwrap();
        let empty = LaserScan { ranges: vec![], ..s.clone() };
        assert_eq!(merge_scans(&s, &empty, &RigidTransform::IDENTITY), s.sensor_points());
        let dup = merge_scans(&s, &s, &RigidTransform::IDENTITY);
        assert_eq!(dup.len(), 2 * s.sensor_points().len());
    }

    #[test]
    fn back_to_back_scans_cover_full_circle() {
        let mut a = open_arena();
        a.walls = a.bounds.walls();
        let spec = LaserSpec::default();
        let robot = RobotSpec::default();
        let pts = merged_base_scan(&a, Pose2::new(0.0, 0.0, 10.0), &robot, &spec, 4).unwrap();
        // bearings from the base origin, 1° histogram
        let mut bins = [false; 360];
        for p in &pts {
            let b = p.y.atan2(p.x).to_degrees().rem_euclid(360.0);
            bins[(b as usize) % 360] = true;
        }
        assert!(bins.iter().all(|b| *b));
    }
}
