//! Panel search on merged lidar points: euclidean clustering, RANSAC line
//! filtering, OBB similarity ranking, docking angle and a docking simulation.

use std::collections::{HashMap, VecDeque};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{line_plane_angle, obb_of_cluster, wrap_deg, Line3, ObbExtent, Plane, RigidTransform, Vec3};
use crate::ransac::{ransac_line, LineFit, RansacParams};
use crate::scene::{merged_base_scan, ArenaSpec, LaserSpec, PanelPlacement, PanelSide, Pose2, RobotSpec};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub points: Vec<Vec3>,
}

impl Cluster {
    pub fn centroid(&self) -> Vec3 {
        crate::geometry::centroid(&self.points).unwrap_or(Vec3::ZERO)
    }
}

fn cell_of(p: Vec3, size: f64) -> (i64, i64, i64) {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64)
}

/// Connected components of the graph linking points at most `tolerance`
/// apart. Components smaller than `min_size` are dropped. Cluster ids follow
/// the smallest point index of each component; points keep input order.
pub fn euclidean_cluster(points: &[Vec3], tolerance: f64, min_size: usize) -> Result<Vec<Cluster>> {
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("clustering tolerance must be positive, got {tolerance}")));
    }
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(*p, tolerance)).or_default().push(i);
    }
    let t2 = tolerance * tolerance;
    let mut label = vec![usize::MAX; points.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for seed_idx in 0..points.len() {
        if label[seed_idx] != usize::MAX {
            continue;
        }
        let comp = clusters.len();
        label[seed_idx] = comp;
        queue.push_back(seed_idx);
        let mut members = vec![seed_idx];
        while let Some(i) = queue.pop_front() {
            let (cx, cy, cz) = cell_of(points[i], tolerance);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &j in bucket {
                            if label[j] == usize::MAX {
                                let d = points[j] - points[i];
                                if d.dot(d) <= t2 {
                                    label[j] = comp;
                                    members.push(j);
                                    queue.push_back(j);
                                }
                            }
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    Ok(clusters
        .into_iter()
        .filter(|m| m.len() >= min_size.max(1))
        .map(|m| Cluster { id: m[0], points: m.into_iter().map(|i| points[i]).collect() })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFilterParams {
    pub iterations: usize,
    pub inlier_dist_m: f64,
    pub max_outlier_ratio: f64,
}

impl Default for LineFilterParams {
    fn default() -> Self {
        LineFilterParams { iterations: 200, inlier_dist_m: 0.03, max_outlier_ratio: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineFilterResult {
    pub kept: bool,
    pub outlier_ratio: f64,
    pub fit: LineFit,
}

/// RANSAC line on a cluster; the cluster is kept when its outlier ratio is
/// at most `max_outlier_ratio`.
pub fn line_filter(cluster: &Cluster, params: &LineFilterParams, seed: u64) -> Result<LineFilterResult> {
    let fit = ransac_line(
        &cluster.points,
        &RansacParams { iterations: params.iterations, inlier_dist: params.inlier_dist_m },
        seed,
    )?;
    let outlier_ratio = fit.outlier_ratio(cluster.points.len());
    Ok(LineFilterResult { kept: outlier_ratio <= params.max_outlier_ratio, outlier_ratio, fit })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelCandidate {
    pub cluster_id: usize,
    pub transform: RigidTransform,
    pub extent: ObbExtent,
    pub similarity: f64,
    pub centroid: Vec3,
}

/// `exp(−Σ|e_i − d_i| / width)` over the two largest sorted OBB extents
/// against the sorted panel dimensions.
pub fn similarity(extent: &ObbExtent, dims: (f64, f64)) -> f64 {
    let e = extent.sorted_desc();
    let (w, t) = if dims.0 >= dims.1 { dims } else { (dims.1, dims.0) };
    (-((e[0] - w).abs() + (e[1] - t).abs()) / w).exp()
}

/// Scores every cluster against the panel size and sorts by similarity
/// (descending, ties by cluster id).
pub fn rank_candidates(clusters: &[Cluster], dims: (f64, f64)) -> Result<Vec<PanelCandidate>> {
    if !(dims.0 > 0.0 && dims.1 > 0.0) {
        return Err(Error::Config("panel dimensions must be positive".into()));
    }
    let mut out: Vec<PanelCandidate> = clusters
        .par_iter()
        .filter(|c| c.points.len() >= 2)
        .map(|c| {
            let (transform, extent) = obb_of_cluster(&c.points)?;
            Ok(PanelCandidate {
                cluster_id: c.id,
                transform,
                extent,
                similarity: similarity(&extent, dims),
                centroid: c.centroid(),
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.cluster_id.cmp(&b.cluster_id)));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelFinderParams {
    pub cluster_tolerance_m: f64,
    pub min_cluster_size: usize,
    /// Points farther than this from the robot are ignored.
    pub search_radius_m: f64,
    pub line: LineFilterParams,
    /// Best candidate must reach this similarity to count as the panel.
    pub min_similarity: f64,
}

impl Default for PanelFinderParams {
    fn default() -> Self {
        PanelFinderParams {
            cluster_tolerance_m: 0.2,
            min_cluster_size: 5,
            search_radius_m: 12.0,
            line: LineFilterParams::default(),
            min_similarity: 0.6,
        }
    }
}

/// Outcome of one panel search.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelSearch {
    pub clusters: Vec<Cluster>,
    /// Line-like clusters ranked by similarity.
    pub candidates: Vec<PanelCandidate>,
}

impl PanelSearch {
    pub fn best(&self, min_similarity: f64) -> Option<(&PanelCandidate, &Cluster)> {
        let c = self.candidates.first().filter(|c| c.similarity >= min_similarity)?;
        let cl = self.clusters.iter().find(|k| k.id == c.cluster_id)?;
        Some((c, cl))
    }
}

/// Full panel search on base-frame points.
pub fn find_panel(points: &[Vec3], dims: (f64, f64), params: &PanelFinderParams, seed: u64) -> Result<PanelSearch> {
    let r2 = params.search_radius_m * params.search_radius_m;
    let near: Vec<Vec3> = points.iter().copied().filter(|p| p.dot(*p) <= r2).collect();
    let clusters = euclidean_cluster(&near, params.cluster_tolerance_m, params.min_cluster_size)?;
    let kept: Vec<Cluster> = clusters
        .par_iter()
        .map(|c| {
            let r = line_filter(c, &params.line, seed::derive_indexed(seed, "line-filter", c.id as u64))?;
            Ok(r.kept.then(|| c.clone()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let candidates = rank_candidates(&kept, dims)?;
    Ok(PanelSearch { clusters: kept, candidates })
}

/// Angular window of bearings (base frame) expected to frame the panel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BearingWindow {
    pub center_deg: f64,
    pub half_width_deg: f64,
}

impl BearingWindow {
    pub fn contains(&self, p: Vec3) -> bool {
        let b = p.y.atan2(p.x).to_degrees();
        wrap_deg(b - self.center_deg).abs() <= self.half_width_deg
    }
}

/// Docking angle in [0, 180] between the panel line and the robot.
///
/// Points inside the bearing window get a RANSAC line; the [0, 90] angle
/// against `robot_side_plane` is then resolved to [0, 180] from the side of
/// the plane on which the line points lie relative to its intersection
/// with the plane.
pub fn estimate_docking_angle(
    points: &[Vec3],
    robot_side_plane: &Plane,
    window: &BearingWindow,
    params: &LineFilterParams,
    seed: u64,
) -> Result<f64> {
    let framed: Vec<Vec3> = points.iter().copied().filter(|p| window.contains(*p)).collect();
    if framed.len() < 2 {
        return Err(Error::InsufficientData(format!("{} points inside the bearing window", framed.len())));
    }
    let fit = ransac_line(&framed, &RansacParams { iterations: params.iterations, inlier_dist: params.inlier_dist_m }, seed)?;
    docking_angle_from_line(&fit.line, fit.inliers.iter().map(|&i| framed[i]), robot_side_plane)
}

/// Resolves the [0, 90] line–plane angle to [0, 180] using `support`
/// points on the line.
pub fn docking_angle_from_line(line: &Line3, support: impl Iterator<Item = Vec3>, plane: &Plane) -> Result<f64> {
    let alpha_prime = line_plane_angle(line, plane)?;
    let plane = plane.normalize()?;
    let Some(hit) = line.intersect_plane(&plane) else {
        return Ok(alpha_prime);
    };
    let n = plane.normal();
    let lateral = Vec3::Z.cross(n).normalized().unwrap_or_else(|| n.any_orthogonal());
    let score: f64 = support
        .map(|p| {
            let s = plane.signed_distance(p);
            let l = (plane.project(p) - hit).dot(lateral);
            s * l
        })
        .sum();
    Ok(if score >= 0.0 { alpha_prime } else { 180.0 - alpha_prime })
}

/// Pose error of a docked robot against the panel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DockingEstimate {
    /// Distance from the robot center to the nearer panel face, meters.
    pub d: f64,
    /// Offset along the face from the panel center, meters.
    pub o: f64,
    /// Heading relative to the panel axis, degrees in [0, 180).
    pub alpha: f64,
}

/// The face a point in the world lies in front of.
pub fn facing_side(panel: &PanelPlacement, x: f64, y: f64) -> PanelSide {
    let n = panel.front_normal();
    if (x - panel.x_m) * n.x + (y - panel.y_m) * n.y >= 0.0 {
        PanelSide::Front
    } else {
        PanelSide::Back
    }
}

/// Unit +X axis of a face frame, in world coordinates.
pub fn face_x_axis(panel: &PanelPlacement, side: PanelSide) -> (f64, f64) {
    let a = panel.axis();
    match side {
        PanelSide::Front => (-a.x, -a.y),
        PanelSide::Back => (a.x, a.y),
    }
}

pub fn docking_report(robot: &Pose2, panel: &PanelPlacement) -> DockingEstimate {
    let n = panel.front_normal();
    let (rx, ry) = (robot.x_m - panel.x_m, robot.y_m - panel.y_m);
    let side = facing_side(panel, robot.x_m, robot.y_m);
    let (ux, uy) = face_x_axis(panel, side);
    DockingEstimate {
        d: (rx * n.x + ry * n.y).abs() - panel.thickness_m / 2.0,
        o: rx * ux + ry * uy,
        alpha: (robot.heading_deg - panel.heading_deg).rem_euclid(180.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DockingParams {
    pub distance_m: f64,
    pub position_noise_m: f64,
    pub heading_noise_deg: f64,
    /// Scan → plan → move cycles.
    pub cycles: usize,
}

impl Default for DockingParams {
    fn default() -> Self {
        DockingParams { distance_m: 0.8, position_noise_m: 0.004, heading_noise_deg: 0.3, cycles: 2 }
    }
}

/// Docking goal in the base frame: parallel to the fitted panel face at
/// `distance` from it, panel on the robot's right, centered on the visible
/// face.
pub fn dock_goal(panel_points: &[Vec3], params: &LineFilterParams, distance: f64, seed: u64) -> Result<Pose2> {
    let fit = ransac_line(panel_points, &RansacParams { iterations: params.iterations, inlier_dist: params.inlier_dist_m }, seed)?;
    let line = fit.line;
    let u = line.direction;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &fit.inliers {
        let s = (panel_points[i] - line.point).dot(u);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let mid = line.point + u * (0.5 * (lo + hi));
    // normal from the face toward the robot (base origin)
    let to_robot = -mid;
    let mut n = Vec3::new(-u.y, u.x, 0.0);
    if n.dot(to_robot) < 0.0 {
        n = -n;
    }
    let goal = mid + n * distance;
    // heading such that −n points to the robot's right
    let heading = n.x.atan2(-n.y).to_degrees();
    Ok(Pose2::new(goal.x, goal.y, heading))
}

/// Result of a simulated docking run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DockingRun {
    pub final_pose: Pose2,
    pub report: DockingEstimate,
}

/// Scan, locate the panel, drive to the docking goal with actuation noise;
/// repeated `params.cycles` times.
#[allow(clippy::too_many_arguments)]
pub fn simulate_docking(
    arena: &ArenaSpec,
    start: Pose2,
    robot: &RobotSpec,
    laser: &LaserSpec,
    finder: &PanelFinderParams,
    params: &DockingParams,
    seed: u64,
) -> Result<DockingRun> {
    let dims = (arena.panel.width_m, arena.panel.thickness_m);
    let mut pose = start;
    let mut rng = seed::rng_for(seed, "actuation");
    let pos_noise = Normal::new(0.0, params.position_noise_m.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let head_noise = Normal::new(0.0, params.heading_noise_deg.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for cycle in 0..params.cycles.max(1) {
        let cs = seed::derive_indexed(seed, "dock-cycle", cycle as u64);
        let pts = merged_base_scan(arena, pose, robot, laser, seed::derive(cs, "scan"))?;
        let search = find_panel(&pts, dims, finder, seed::derive(cs, "find"))?;
        let (_, cluster) = search
            .best(finder.min_similarity)
            .ok_or_else(|| Error::InsufficientData("panel not visible while docking".into()))?;
        let goal = dock_goal(&cluster.points, &finder.line, params.distance_m, seed::derive(cs, "goal"))?;
        let target = pose.compose(&goal);
        pose = Pose2::new(
            target.x_m + pos_noise.sample(&mut rng),
            target.y_m + pos_noise.sample(&mut rng),
            target.heading_deg + head_noise.sample(&mut rng),
        );
    }
    Ok(DockingRun { final_pose: pose, report: docking_report(&pose, &arena.panel) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{angular_distance, Point2};
    use crate::scene::{simulate_scan, Bounds};
    use rand::Rng as _;

    fn grid_points(origin: Vec3, n: usize, step: f64) -> Vec<Vec3> {
        (0..n).map(|i| origin + Vec3::new(i as f64 * step, 0.0, 0.0)).collect()
    }

    #[test]
    fn two_groups_two_clusters() {
        let mut pts = grid_points(Vec3::ZERO, 10, 0.05);
        pts.extend(grid_points(Vec3::new(1.5, 0.0, 0.0), 10, 0.05));
        let c = euclidean_cluster(&pts, 0.3, 1).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(euclidean_cluster(&grid_points(Vec3::ZERO, 50, 0.1), 0.3, 1).unwrap().len(), 1);
        assert!(euclidean_cluster(&pts, 0.0, 1).is_err());
    }

    #[test]
    fn clustering_matches_brute_force_components() {
        let mut rng = seed::rng(21);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 0.0))
            .collect();
        let tol = 0.25;
        // union-find oracle on the full graph
        let mut parent: Vec<usize> = (0..pts.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if pts[i].distance(pts[j]) <= tol {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut comps: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..pts.len() {
            let r = find(&mut parent, i);
            comps.entry(r).or_default().push(i);
        }
        let min_size = 3;
        let expected: usize = comps.values().filter(|c| c.len() >= min_size).count();
        let got = euclidean_cluster(&pts, tol, min_size).unwrap();
        assert_eq!(got.len(), expected);
        let kept: usize = got.iter().map(|c| c.points.len()).sum();
        let dropped: usize = comps.values().filter(|c| c.len() < min_size).map(|c| c.len()).sum();
        assert_eq!(kept + dropped, pts.len());
    }

    #[test]
    fn line_filter_keeps_lines_rejects_blobs() {
        let line = Cluster { id: 0, points: grid_points(Vec3::ZERO, 100, 0.01) };
        let r = line_filter(&line, &LineFilterParams::default(), 1).unwrap();
        assert!(r.kept && r.outlier_ratio == 0.0);

        let mut rng = seed::rng(2);
        let blob = Cluster {
            id: 1,
            points: (0..300).map(|_| Vec3::new(rng.random(), rng.random(), 0.0)).collect(),
        };
        let p = LineFilterParams { inlier_dist_m: 0.02, ..LineFilterParams::default() };
        assert!(!line_filter(&blob, &p, 1).unwrap().kept);
    }

    #[test]
    fn exact_panel_scores_one() {
        let e = ObbExtent { sx: 0.1, sy: 1.2, sz: 0.0 };
        assert!((similarity(&e, (1.2, 0.1)) - 1.0).abs() < 1e-12);
        let long = ObbExtent { sx: 12.0, sy: 0.1, sz: 0.0 };
        assert!(similarity(&long, (1.2, 0.1)) < similarity(&e, (1.2, 0.1)));
    }

    fn docking_arena(alpha_deg: f64) -> (ArenaSpec, Pose2) {
        // robot at the origin heading +x; panel centered 1.2 m to its right
        let arena = ArenaSpec {
            bounds: Bounds { min_x_m: -10.0, min_y_m: -10.0, max_x_m: 10.0, max_y_m: 10.0 },
            walls: vec![],
            panel: PanelPlacement { x_m: 0.0, y_m: -1.2, heading_deg: alpha_deg, width_m: 1.2, thickness_m: 0.1 },
            distractors: vec![],
        };
        (arena, Pose2::new(0.0, 0.0, 0.0))
    }

    fn docking_error(alpha: f64, sigma: f64, seed: u64) -> f64 {
        let (arena, pose) = docking_arena(alpha);
        let spec = LaserSpec { range_noise_sigma_m: sigma, ..LaserSpec::default() };
        let scan = simulate_scan(&arena, pose, &spec, seed).unwrap();
        let plane = Plane::new(1.0, 0.0, 0.0, 0.0);
        let w = BearingWindow { center_deg: -90.0, half_width_deg: 75.0 };
        let est = estimate_docking_angle(&scan.sensor_points(), &plane, &w, &LineFilterParams::default(), seed).unwrap();
        assert!((0.0..=180.0).contains(&est));
        angular_distance(est, alpha, 180.0)
    }

    #[test]
    fn docking_angle_cases() {
        assert!(docking_error(0.0, 0.0, 1) < 0.5);
        assert!(docking_error(30.0, 0.01, 2) < 1.0);
        assert!(docking_error(150.0, 0.01, 3) < 1.0);
    }

    #[test]
    fn mirrored_scene_sums_to_180() {
        let (arena, pose) = docking_arena(35.0);
        let (mirror, _) = docking_arena(145.0);
        let spec = LaserSpec { range_noise_sigma_m: 0.0, ..LaserSpec::default() };
        let plane = Plane::new(1.0, 0.0, 0.0, 0.0);
        let w = BearingWindow { center_deg: -90.0, half_width_deg: 75.0 };
        let a = simulate_scan(&arena, pose, &spec, 1).unwrap().sensor_points();
        let b = simulate_scan(&mirror, pose, &spec, 1).unwrap().sensor_points();
        let p = LineFilterParams::default();
        let ea = estimate_docking_angle(&a, &plane, &w, &p, 1).unwrap();
        let eb = estimate_docking_angle(&b, &plane, &w, &p, 1).unwrap();
        assert!((ea + eb - 180.0).abs() < 0.5, "{ea} + {eb}");
    }

    #[test]
    fn empty_window_is_insufficient() {
        let plane = Plane::new(1.0, 0.0, 0.0, 0.0);
        let w = BearingWindow { center_deg: 90.0, half_width_deg: 5.0 };
        let pts = vec![Vec3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            estimate_docking_angle(&pts, &plane, &w, &LineFilterParams::default(), 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn report_at_goal_pose() {
        let panel = PanelPlacement { x_m: 2.0, y_m: 1.0, heading_deg: 30.0, width_m: 1.2, thickness_m: 0.1 };
        let n = panel.front_normal();
        let c = Point2::new(panel.x_m + n.x * 0.85, panel.y_m + n.y * 0.85);
        let r = docking_report(&Pose2::new(c.x, c.y, 30.0), &panel);
        assert!((r.d - 0.8).abs() < 1e-12 && r.o.abs() < 1e-12 && r.alpha.abs() < 1e-12);
    }

    #[test]
    fn docking_controller_reaches_standoff() {
        let arena = ArenaSpec {
            bounds: Bounds { min_x_m: -25.0, min_y_m: -30.0, max_x_m: 25.0, max_y_m: 30.0 },
            walls: Bounds { min_x_m: -25.0, min_y_m: -30.0, max_x_m: 25.0, max_y_m: 30.0 }.walls(),
            panel: PanelPlacement { x_m: 4.0, y_m: 3.0, heading_deg: 70.0, width_m: 1.2, thickness_m: 0.1 },
            distractors: vec![],
        };
        for s in 0..3 {
            let run = simulate_docking(
                &arena,
                Pose2::new(0.0, 0.0, 10.0 * s as f64),
                &RobotSpec::default(),
                &LaserSpec::default(),
                &PanelFinderParams::default(),
                &DockingParams::default(),
                s,
            )
            .unwrap();
            assert!((run.report.d - 0.8).abs() <= 0.02, "{:?}", run.report);
            assert!(angular_distance(run.report.alpha, 0.0, 180.0) < 2.0, "{:?}", run.report);
        }
    }
}
