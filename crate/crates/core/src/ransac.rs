//! Seeded RANSAC for 3D lines and planes with least-squares refits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fit_line, fit_plane, Line3, Plane, Vec3};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier distance threshold, meters.
    pub inlier_dist: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineFit {
    pub line: Line3,
    /// Sorted indices into the input.
    pub inliers: Vec<usize>,
}

impl LineFit {
    pub fn outlier_ratio(&self, total: usize) -> f64 {
        if total == 0 {
            return 1.0;
        }
        1.0 - self.inliers.len() as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    pub inliers: Vec<usize>,
}

fn sample_distinct<R: rand::Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..n);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn collect_inliers(points: &[Vec3], dist: impl Fn(Vec3) -> f64, thr: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| dist(**p) <= thr)
        .map(|(i, _)| i)
        .collect()
}

/// Best consensus line. Ties keep the earliest hypothesis; the winner is
/// refit on its inliers and the inlier set recomputed against the refit.
pub fn ransac_line(points: &[Vec3], params: &RansacParams, seed: u64) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateInput(format!("line RANSAC needs 2 points, got {}", points.len())));
    }
    let mut rng = seed::rng(seed);
    let mut best: Option<(Line3, usize)> = None;
    for _ in 0..params.iterations.max(1) {
        let s = sample_distinct(&mut rng, points.len(), 2);
        let Ok(line) = Line3::through(points[s[0]], points[s[1]]) else {
            continue;
        };
        let count = points.iter().filter(|p| line.distance(**p) <= params.inlier_dist).count();
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((line, count));
        }
    }
    let (line, _) = best.ok_or_else(|| Error::DegenerateInput("all sampled point pairs coincide".into()))?;
    let inliers = collect_inliers(points, |p| line.distance(p), params.inlier_dist);
    let subset: Vec<Vec3> = inliers.iter().map(|&i| points[i]).collect();
    let refit = if subset.len() >= 2 { fit_line(&subset).unwrap_or(line) } else { line };
    let refit_inliers = collect_inliers(points, |p| refit.distance(p), params.inlier_dist);
    if refit_inliers.len() >= inliers.len() {
        Ok(LineFit { line: refit, inliers: refit_inliers })
    } else {
        Ok(LineFit { line, inliers })
    }
}

/// Best consensus plane, refit by least squares on the inliers.
pub fn ransac_plane(points: &[Vec3], params: &RansacParams, seed: u64) -> Result<PlaneFit> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!("plane RANSAC needs 3 points, got {}", points.len())));
    }
    let mut rng = seed::rng(seed);
    let mut best: Option<(Plane, usize)> = None;
    for _ in 0..params.iterations.max(1) {
        let s = sample_distinct(&mut rng, points.len(), 3);
        let (a, b, c) = (points[s[0]], points[s[1]], points[s[2]]);
        let Ok(plane) = Plane::from_point_normal(a, (b - a).cross(c - a)) else {
            continue;
        };
        let count = points.iter().filter(|p| plane.signed_distance(**p).abs() <= params.inlier_dist).count();
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((plane, count));
        }
    }
    let (plane, _) = best.ok_or_else(|| Error::DegenerateInput("all sampled triples are collinear".into()))?;
    let inliers = collect_inliers(points, |p| plane.signed_distance(p).abs(), params.inlier_dist);
    let subset: Vec<Vec3> = inliers.iter().map(|&i| points[i]).collect();
    let refit = fit_plane(&subset).unwrap_or(plane);
    let refit_inliers = collect_inliers(points, |p| refit.signed_distance(p).abs(), params.inlier_dist);
    if refit_inliers.len() >= inliers.len() {
        Ok(PlaneFit { plane: refit, inliers: refit_inliers })
    } else {
        Ok(PlaneFit { plane, inliers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn collinear_points_all_inliers() {
        let pts: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64 * 0.01, 0.5, 0.0)).collect();
        let fit = ransac_line(&pts, &RansacParams { iterations: 50, inlier_dist: 0.01 }, 3).unwrap();
        assert_eq!(fit.inliers.len(), 100);
        assert!(fit.line.direction.y.abs() < 1e-9);
    }

    #[test]
    fn plane_rejects_outliers() {
        let mut rng = seed::rng(5);
        let mut pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.5))
            .collect();
        for _ in 0..40 {
            pts.push(Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.55));
        }
        let fit = ransac_plane(&pts, &RansacParams { iterations: 100, inlier_dist: 0.01 }, 1).unwrap();
        assert_eq!(fit.inliers, (0..200).collect::<Vec<_>>());
        assert!((fit.plane.normal().z.abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = seed::rng(9);
        let pts: Vec<Vec3> = (0..80).map(|_| Vec3::new(rng.random(), rng.random(), 0.0)).collect();
        let p = RansacParams { iterations: 30, inlier_dist: 0.05 };
        assert_eq!(ransac_line(&pts, &p, 4).unwrap(), ransac_line(&pts, &p, 4).unwrap());
    }
}
