//! Valve stem perception: edge segments, square hypothesis search, center
//! and orientation folded to [0, 90), stereo triangulation of the center.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fold_quarter, triangulate, PinholeCamera, Point2, StereoRig, Vec3};
use crate::image::{BBox, BinaryImage, RasterImage};
use crate::scene::{Intrinsics, PanelSceneSpec};
use crate::vision::{canny, probabilistic_hough, CannyParams, HoughParams, Segment2};

/// Canny edges, probabilistic Hough segments, then collinear fragments
/// merged.
pub fn extract_segments(
    roi: &RasterImage,
    canny_params: &CannyParams,
    hough: &HoughParams,
    seed: u64,
) -> Result<(BinaryImage, Vec<Segment2>)> {
    let edges = canny(roi, canny_params);
    let segments = probabilistic_hough(&edges, hough, seed)?;
    Ok((edges, merge_collinear(&segments, 3.0, 2.0, 2.0 * hough.max_gap as f64 + 2.0)))
}

/// Joins segments that share a direction (within `angle_tol_deg`), lie on
/// each other's line (within `dist_tol` px) and are at most `gap` px apart
/// along it. A merged segment spans the extreme projections onto the
/// longest member's line.
pub fn merge_collinear(segments: &[Segment2], angle_tol_deg: f64, dist_tol: f64, gap: f64) -> Vec<Segment2> {
    let n = segments.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let joinable = |s: &Segment2, t: &Segment2| {
        if dir_diff(s.angle_deg(), t.angle_deg()) > angle_tol_deg {
            return false;
        }
        if s.line_distance(t.a).max(s.line_distance(t.b)) > dist_tol && t.line_distance(s.a).max(t.line_distance(s.b)) > dist_tol {
            return false;
        }
        let l = s.length().max(1e-12);
        let (ux, uy) = ((s.b.x - s.a.x) / l, (s.b.y - s.a.y) / l);
        let proj = |p: Point2| (p.x - s.a.x) * ux + (p.y - s.a.y) * uy;
        let (t0, t1) = (proj(t.a).min(proj(t.b)), proj(t.a).max(proj(t.b)));
        t0 <= l + gap && t1 >= -gap
    };
    for i in 0..n {
        for j in i + 1..n {
            if joinable(&segments[i], &segments[j]) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut out = Vec::new();
    for r in 0..n {
        let members: Vec<&Segment2> = (0..n).filter(|&i| root(&mut parent, i) == r).map(|i| &segments[i]).collect();
        if members.is_empty() {
            continue;
        }
        let base = members.iter().max_by(|a, b| a.length().total_cmp(&b.length())).unwrap();
        let l = base.length().max(1e-12);
        let (ux, uy) = ((base.b.x - base.a.x) / l, (base.b.y - base.a.y) / l);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut off_sum, mut weight) = (0.0, 0.0);
        for m in &members {
            for p in [m.a, m.b] {
                let t = (p.x - base.a.x) * ux + (p.y - base.a.y) * uy;
                lo = lo.min(t);
                hi = hi.max(t);
                off_sum += (-(p.x - base.a.x) * uy + (p.y - base.a.y) * ux) * m.length();
                weight += m.length();
            }
        }
        // length-weighted lateral offset of the merged line
        let off = if weight > 0.0 { off_sum / weight } else { 0.0 };
        let at = |t: f64| Point2::new(base.a.x + ux * t - uy * off, base.a.y + uy * t + ux * off);
        out.push(Segment2::new(at(lo), at(hi)));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareParams {
    pub expected_edge_px: f64,
    /// Corner gap tolerance as a fraction of the expected edge.
    pub vertex_tol: f64,
    pub parallel_tol_deg: f64,
    pub perpendicular_tol_deg: f64,
    /// Allowed relative deviation of a parallel pair's spacing from the edge.
    pub spacing_tol: f64,
    /// Accepted segment lengths, as fractions of the expected edge.
    pub min_len_ratio: f64,
    pub max_len_ratio: f64,
    /// Only this many of the longest segments enter the search.
    pub max_segments: usize,
}

impl SquareParams {
    pub fn for_edge(expected_edge_px: f64) -> Self {
        SquareParams {
            expected_edge_px,
            vertex_tol: 0.10,
            parallel_tol_deg: 5.0,
            perpendicular_tol_deg: 5.0,
            spacing_tol: 0.25,
            min_len_ratio: 0.4,
            max_len_ratio: 1.3,
            max_segments: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareHypothesis {
    /// Three or four edges; parallel pair first.
    pub segments: Vec<Segment2>,
    /// Reconstructed corners.
    pub vertices: [Point2; 4],
    pub center_2d: Point2,
    pub score: f64,
}

/// Angle between two undirected directions, in [0, 90].
fn dir_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

fn line_intersection(s: &Segment2, t: &Segment2) -> Option<Point2> {
    let (d1x, d1y) = (s.b.x - s.a.x, s.b.y - s.a.y);
    let (d2x, d2y) = (t.b.x - t.a.x, t.b.y - t.a.y);
    let den = d1x * d2y - d1y * d2x;
    if den.abs() < 1e-9 {
        return None;
    }
    let u = ((t.a.x - s.a.x) * d2y - (t.a.y - s.a.y) * d2x) / den;
    Some(Point2::new(s.a.x + u * d1x, s.a.y + u * d1y))
}

/// Larger of the two segments' nearest-endpoint distances to their line
/// intersection.
fn corner_gap(s: &Segment2, t: &Segment2) -> Option<(Point2, f64)> {
    let p = line_intersection(s, t)?;
    let g = |q: &Segment2| q.a.distance(p).min(q.b.distance(p));
    Some((p, g(s).max(g(t))))
}

/// Distance between two nearly parallel segments' lines.
fn spacing(s: &Segment2, t: &Segment2) -> f64 {
    0.5 * (s.line_distance(t.midpoint()) + t.line_distance(s.midpoint()))
}

fn canonical(s: &Segment2) -> Segment2 {
    let key = |p: Point2| (p.x, p.y);
    if key(s.a).partial_cmp(&key(s.b)) == Some(std::cmp::Ordering::Greater) {
        Segment2::new(s.b, s.a)
    } else {
        *s
    }
}

/// Candidate pool: length-filtered, canonically ordered, capped.
fn candidate_pool(segments: &[Segment2], p: &SquareParams) -> Vec<Segment2> {
    let (lo, hi) = (p.min_len_ratio * p.expected_edge_px, p.max_len_ratio * p.expected_edge_px);
    let mut pool: Vec<Segment2> = segments
        .iter()
        .map(canonical)
        .filter(|s| (lo..=hi).contains(&s.length()))
        .collect();
    pool.sort_by(|a, b| {
        b.length()
            .total_cmp(&a.length())
            .then(a.a.x.total_cmp(&b.a.x))
            .then(a.a.y.total_cmp(&b.a.y))
            .then(a.b.x.total_cmp(&b.b.x))
            .then(a.b.y.total_cmp(&b.b.y))
    });
    pool.truncate(p.max_segments);
    pool
}

/// Scores a parallel pair `(s0, s1)` against perpendicular edges `cross`
/// (one or two). Returns the hypothesis when all constraints hold.
fn score_group(s0: &Segment2, s1: &Segment2, cross: &[Segment2], p: &SquareParams) -> Option<SquareHypothesis> {
    let e = p.expected_edge_px;
    let par = dir_diff(s0.angle_deg(), s1.angle_deg());
    if par > p.parallel_tol_deg {
        return None;
    }
    let gap = spacing(s0, s1);
    if (gap - e).abs() > p.spacing_tol * e {
        return None;
    }
    let mut score = par;
    if cross.len() == 2 {
        let cpar = dir_diff(cross[0].angle_deg(), cross[1].angle_deg());
        if cpar > p.parallel_tol_deg {
            return None;
        }
        let cgap = spacing(&cross[0], &cross[1]);
        if (cgap - e).abs() > p.spacing_tol * e {
            return None;
        }
        score += cpar;
    }
    let mut corners = Vec::with_capacity(4);
    let mut close = 0usize;
    for c in cross {
        let perp = 90.0 - dir_diff(s0.angle_deg(), c.angle_deg());
        if perp > p.perpendicular_tol_deg {
            return None;
        }
        score += perp;
        for s in [s0, s1] {
            let (pt, g) = corner_gap(s, c)?;
            if g <= p.vertex_tol * e {
                close += 1;
            }
            score += g.min(e) / e * 10.0;
            corners.push(pt);
        }
    }
    let need = if cross.len() == 2 { 2 } else { 1 };
    if close < need {
        return None;
    }
    let vertices = if cross.len() == 2 {
        [corners[0], corners[1], corners[3], corners[2]]
    } else {
        // missing edge: parallel to the cross edge, on the side of the pair
        let (c0, c1) = (corners[0], corners[1]);
        let mid = s0.midpoint().midpoint(s1.midpoint());
        let (dx, dy) = (c1.x - c0.x, c1.y - c0.y);
        let l = (dx * dx + dy * dy).sqrt();
        let mut n = (-dy / l, dx / l);
        let base = c0.midpoint(c1);
        if (mid.x - base.x) * n.0 + (mid.y - base.y) * n.1 < 0.0 {
            n = (-n.0, -n.1);
        }
        let side = 0.5 * (gap + l);
        [c0, c1, Point2::new(c1.x + n.0 * side, c1.y + n.1 * side), Point2::new(c0.x + n.0 * side, c0.y + n.1 * side)]
    };
    let center = Point2::new(
        vertices.iter().map(|v| v.x).sum::<f64>() / 4.0,
        vertices.iter().map(|v| v.y).sum::<f64>() / 4.0,
    );
    let mut segments = vec![*s0, *s1];
    segments.extend_from_slice(cross);
    Some(SquareHypothesis { segments, vertices, center_2d: center, score })
}

fn best_of(found: Vec<(Vec<usize>, SquareHypothesis)>) -> Option<SquareHypothesis> {
    found
        .into_iter()
        .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(&b.0)))
        .map(|(_, h)| h)
}

/// Best square among 4-segment groups, falling back to 3-segment groups.
pub fn find_square(segments: &[Segment2], params: &SquareParams) -> Result<SquareHypothesis> {
    if !(params.expected_edge_px > 0.0) {
        return Err(Error::Config("expected edge length must be positive".into()));
    }
    let pool = candidate_pool(segments, params);
    let n = pool.len();
    if n < 3 {
        return Err(Error::ValveNotFound);
    }
    let quads: Vec<(Vec<usize>, SquareHypothesis)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pool = &pool;
            (i + 1..n).flat_map(move |j| {
                (j + 1..n).flat_map(move |k| {
                    (k + 1..n).filter_map(move |l| {
                        let q = [i, j, k, l];
                        // the three ways to split four edges into two pairs
                        [(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2)]
                            .into_iter()
                            .filter_map(|(a, b, c, d)| {
                                score_group(&pool[q[a]], &pool[q[b]], &[pool[q[c]], pool[q[d]]], params)
                            })
                            .min_by(|x, y| x.score.total_cmp(&y.score))
                            .map(|h| (q.to_vec(), h))
                    })
                })
            })
        })
        .collect();
    if let Some(h) = best_of(quads) {
        return Ok(h);
    }
    let triples: Vec<(Vec<usize>, SquareHypothesis)> = (0..n)
        .flat_map(|i| (i + 1..n).flat_map(move |j| (j + 1..n).map(move |k| [i, j, k])))
        .filter_map(|q| {
            [(0, 1, 2), (0, 2, 1), (1, 2, 0)]
                .into_iter()
                .filter_map(|(a, b, c)| score_group(&pool[q[a]], &pool[q[b]], &[pool[q[c]]], params))
                .min_by(|x, y| x.score.total_cmp(&y.score))
                .map(|h| (q.to_vec(), h))
        })
        .collect();
    best_of(triples).ok_or(Error::ValveNotFound)
}

/// Total least-squares refit of a segment on the edge pixels within `band`
/// pixels of it. Keeps the original when too few pixels support it.
pub fn refine_segment(seg: &Segment2, edges: &BinaryImage, band: f64) -> Segment2 {
    let (x0, x1) = (seg.a.x.min(seg.b.x) - band, seg.a.x.max(seg.b.x) + band);
    let (y0, y1) = (seg.a.y.min(seg.b.y) - band, seg.a.y.max(seg.b.y) + band);
    let mut pts = Vec::new();
    for y in (y0.floor().max(0.0) as usize)..=(y1.ceil().max(0.0) as usize).min(edges.height.saturating_sub(1)) {
        for x in (x0.floor().max(0.0) as usize)..=(x1.ceil().max(0.0) as usize).min(edges.width.saturating_sub(1)) {
            let p = Point2::new(x as f64, y as f64);
            if edges.get(x, y) && seg.distance(p) <= band {
                pts.push(p);
            }
        }
    }
    if pts.len() < 5 {
        return *seg;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.x).sum::<f64>() / n, pts.iter().map(|p| p.y).sum::<f64>() / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (ux, uy) = (theta.cos(), theta.sin());
    let proj = |p: Point2| (p.x - mx) * ux + (p.y - my) * uy;
    let (ta, tb) = (proj(seg.a), proj(seg.b));
    Segment2::new(Point2::new(mx + ta * ux, my + ta * uy), Point2::new(mx + tb * ux, my + tb * uy))
}

/// Center and orientation in [0, 90): direction of the longest edge, with
/// the image v axis pointing up.
pub fn valve_center_orientation(hyp: &SquareHypothesis) -> (Point2, f64) {
    let longest = hyp
        .segments
        .iter()
        .max_by(|a, b| a.length().total_cmp(&b.length()))
        .copied()
        .unwrap_or(Segment2::new(Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)));
    let deg = (-(longest.b.y - longest.a.y)).atan2(longest.b.x - longest.a.x).to_degrees();
    (hyp.center_2d, fold_quarter(deg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValveParams {
    pub canny: CannyParams,
    pub hough: HoughParams,
    pub vertex_tol: f64,
    pub parallel_tol_deg: f64,
    pub perpendicular_tol_deg: f64,
    /// Edge pixels within this band refine each hypothesis edge.
    pub refine_band_px: f64,
    pub max_reprojection_px: f64,
}

impl Default for ValveParams {
    fn default() -> Self {
        ValveParams {
            canny: CannyParams::default(),
            hough: HoughParams::default(),
            vertex_tol: 0.10,
            parallel_tol_deg: 5.0,
            perpendicular_tol_deg: 5.0,
            refine_band_px: 1.5,
            max_reprojection_px: 5.0,
        }
    }
}

/// Single-view valve estimate, full-image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValveView {
    pub center_2d: Point2,
    pub angle_deg: f64,
    pub used_segments: usize,
    pub hypothesis: SquareHypothesis,
}

/// Segments → square → refined edges → center and angle, inside `roi`.
pub fn estimate_valve_view(
    image: &RasterImage,
    roi: &BBox,
    expected_edge_px: f64,
    params: &ValveParams,
    seed: u64,
) -> Result<ValveView> {
    let roi = roi
        .intersect(&image.bounds())
        .ok_or_else(|| Error::EmptyBbox("valve ROI outside the image".into()))?;
    let crop = image.crop(roi);
    let (edges, segments) = extract_segments(&crop, &params.canny, &params.hough, seed)?;
    let sp = SquareParams {
        vertex_tol: params.vertex_tol,
        parallel_tol_deg: params.parallel_tol_deg,
        perpendicular_tol_deg: params.perpendicular_tol_deg,
        ..SquareParams::for_edge(expected_edge_px)
    };
    let hyp = find_square(&segments, &sp)?;
    let refined: Vec<Segment2> = hyp.segments.iter().map(|s| refine_segment(s, &edges, params.refine_band_px)).collect();
    let hyp = rebuild(&hyp, refined, &sp).unwrap_or(hyp);
    let (c, angle) = valve_center_orientation(&hyp);
    let shift = |p: Point2| Point2::new(p.x + roi.x as f64, p.y + roi.y as f64);
    let used = hyp.segments.len();
    let hypothesis = SquareHypothesis {
        segments: hyp.segments.iter().map(|s| Segment2::new(shift(s.a), shift(s.b))).collect(),
        vertices: hyp.vertices.map(shift),
        center_2d: shift(hyp.center_2d),
        score: hyp.score,
    };
    Ok(ValveView { center_2d: shift(c), angle_deg: angle, used_segments: used, hypothesis })
}

/// Recomputes vertices and center from refined edges, keeping the pairing.
fn rebuild(hyp: &SquareHypothesis, refined: Vec<Segment2>, p: &SquareParams) -> Option<SquareHypothesis> {
    let loose = SquareParams { vertex_tol: 1.0, spacing_tol: 1.0, parallel_tol_deg: 90.0, perpendicular_tol_deg: 90.0, ..*p };
    let mut h = score_group(&refined[0], &refined[1], &refined[2..], &loose)?;
    h.score = hyp.score;
    Some(h)
}

/// Triangulated stem center (rig world frame), checked by reprojection.
pub fn triangulate_valve(left: Point2, right: Point2, rig: &StereoRig, max_reprojection_px: f64) -> Result<Vec3> {
    let p = triangulate(left, right, rig)?;
    let err = |cam: &PinholeCamera, q: Point2| cam.project(p).map_or(f64::INFINITY, |r| r.distance(q));
    let worst = err(&rig.left, left).max(err(&rig.right, right));
    if worst > max_reprojection_px {
        return Err(Error::StereoMismatch(worst));
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValveEstimate {
    pub center_3d: Vec3,
    pub stem_angle_deg: f64,
    pub used_segments: usize,
}

/// Stereo rig whose left camera sits `baseline/2` left of the stem, looking
/// straight at the face from `depth_m` above the stem top.
pub fn valve_rig(scene: &PanelSceneSpec, intr: &Intrinsics, depth_m: f64, baseline_m: f64, offset: Vec3) -> Result<StereoRig> {
    let top = scene.valve.stem_top_center();
    let left = intr.face_camera(Vec3::new(top.x - baseline_m / 2.0, top.y, top.z + depth_m) + offset)?;
    StereoRig::rectified(left, baseline_m)
}

pub const VALVE_CAMERA_DEPTH_M: f64 = 0.5;
pub const VALVE_BASELINE_M: f64 = 0.1;

/// Expected stem edge in pixels for a camera at `depth_m` from the stem top.
pub fn expected_edge_px(scene: &PanelSceneSpec, fx: f64, depth_m: f64) -> f64 {
    scene.valve.stem_edge_mm / 1000.0 * fx / depth_m
}

/// Both views, then triangulation. Angle is the mean of the two views'
/// estimates on the 90° circle.
#[allow(clippy::too_many_arguments)]
pub fn estimate_valve_stereo(
    left: &RasterImage,
    right: &RasterImage,
    roi_left: &BBox,
    roi_right: &BBox,
    rig: &StereoRig,
    expected_edge_px: f64,
    params: &ValveParams,
    seed: u64,
) -> Result<ValveEstimate> {
    let l = estimate_valve_view(left, roi_left, expected_edge_px, params, seed)?;
    let r = estimate_valve_view(right, roi_right, expected_edge_px, params, seed.wrapping_add(1))?;
    let center = triangulate_valve(l.center_2d, r.center_2d, rig, params.max_reprojection_px)?;
    let (s, c) = [l.angle_deg, r.angle_deg]
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + (a * 4.0).to_radians().sin(), c + (a * 4.0).to_radians().cos()));
    let angle = fold_quarter(s.atan2(c).to_degrees() / 4.0);
    Ok(ValveEstimate { center_3d: center, stem_angle_deg: angle, used_segments: l.used_segments.min(r.used_segments) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angular_distance;
    use crate::scene::{generate_scenario, render_panel_image, valve_roi, GenParams, RenderOptions};

    fn square(c: Point2, e: f64, deg: f64) -> Vec<Segment2> {
        let t = deg.to_radians();
        let (u, v) = ((t.cos(), -t.sin()), (t.sin(), t.cos()));
        let h = e / 2.0;
        let at = |a: f64, b: f64| Point2::new(c.x + u.0 * a + v.0 * b, c.y + u.1 * a + v.1 * b);
        let p = [at(-h, -h), at(h, -h), at(h, h), at(-h, h)];
        (0..4).map(|i| Segment2::new(p[i], p[(i + 1) % 4])).collect()
    }

    #[test]
    fn ideal_square_scores_zero() {
        let segs = square(Point2::new(50.0, 50.0), 60.0, 0.0);
        let h = find_square(&segs, &SquareParams::for_edge(60.0)).unwrap();
        assert!(h.score < 1e-9);
        assert_eq!(h.segments.len(), 4);
        let (c, a) = valve_center_orientation(&h);
        assert!(c.distance(Point2::new(50.0, 50.0)) < 1e-9);
        assert!(a.abs() < 1e-9);
    }

    #[test]
    fn clutter_is_ignored_and_order_does_not_matter() {
        let mut segs = square(Point2::new(80.0, 70.0), 60.0, 30.0);
        segs.push(Segment2::new(Point2::new(0.0, 0.0), Point2::new(50.0, 3.0)));
        segs.push(Segment2::new(Point2::new(150.0, 10.0), Point2::new(150.0, 60.0)));
        segs.push(Segment2::new(Point2::new(10.0, 140.0), Point2::new(60.0, 120.0)));
        let p = SquareParams::for_edge(60.0);
        let h = find_square(&segs, &p).unwrap();
        assert!(h.center_2d.distance(Point2::new(80.0, 70.0)) < 1e-6);
        assert!((valve_center_orientation(&h).1 - 30.0).abs() < 1e-6);
        let mut rev = segs.clone();
        rev.reverse();
        rev.rotate_left(2);
        assert_eq!(find_square(&rev, &p).unwrap(), h);
    }

    #[test]
    fn three_edge_fallback() {
        let mut segs = square(Point2::new(60.0, 60.0), 60.0, 20.0);
        segs.remove(1);
        let h = find_square(&segs, &SquareParams::for_edge(60.0)).unwrap();
        assert_eq!(h.segments.len(), 3);
        assert!(h.center_2d.distance(Point2::new(60.0, 60.0)) <= 3.0);
    }

    #[test]
    fn fold_examples() {
        for (deg, want) in [(120.0, 30.0), (90.0, 0.0)] {
            let h = find_square(&square(Point2::new(60.0, 60.0), 60.0, deg), &SquareParams::for_edge(60.0)).unwrap();
            assert!(angular_distance(valve_center_orientation(&h).1, want, 90.0) < 1e-6);
        }
    }

    #[test]
    fn blank_roi_has_no_segments() {
        let img = RasterImage::new(80, 80, 120);
        let (_, s) = extract_segments(&img, &CannyParams::default(), &HoughParams::default(), 1).unwrap();
        assert!(s.is_empty());
        assert_eq!(find_square(&s, &SquareParams::for_edge(60.0)), Err(Error::ValveNotFound));
    }

    #[test]
    fn stereo_round_trip_and_mismatch() {
        let sc = generate_scenario(&GenParams::default(), 1).unwrap();
        let intr = Intrinsics::default();
        let rig = valve_rig(&sc.scene, &intr, 0.8, VALVE_BASELINE_M, Vec3::ZERO).unwrap();
        let truth = sc.scene.valve.stem_top_center();
        let (l, r) = (rig.left.project(truth).unwrap(), rig.right.project(truth).unwrap());
        let p = triangulate_valve(l, r, &rig, 5.0).unwrap();
        assert!(p.distance(truth) < 1e-6);
        let bad = Point2::new(r.x, r.y + 50.0);
        assert!(matches!(triangulate_valve(l, bad, &rig, 5.0), Err(Error::StereoMismatch(_))));
    }

    #[test]
    fn rendered_valve_pose() {
        let intr = Intrinsics::default();
        for (seed, angle) in [(1u64, 0.0), (2, 30.0), (3, 75.0)] {
            let mut sc = generate_scenario(&GenParams::default(), seed).unwrap();
            sc.scene.valve.stem_angle_deg = angle;
            let scene = &sc.scene;
            let rig = valve_rig(scene, &intr, VALVE_CAMERA_DEPTH_M, VALVE_BASELINE_M, Vec3::ZERO).unwrap();
            let size = (intr.width, intr.height);
            let opts = RenderOptions::noiseless();
            let li = render_panel_image(scene, scene.wrench_side, &rig.left, size, &opts, 1).unwrap();
            let ri = render_panel_image(scene, scene.wrench_side, &rig.right, size, &opts, 2).unwrap();
            let e = expected_edge_px(scene, intr.fx, VALVE_CAMERA_DEPTH_M);
            let est = estimate_valve_stereo(
                &li,
                &ri,
                &valve_roi(scene, &rig.left, 0.2).unwrap(),
                &valve_roi(scene, &rig.right, 0.2).unwrap(),
                &rig,
                e,
                &ValveParams::default(),
                4,
            )
            .unwrap();
            assert!(angular_distance(est.stem_angle_deg, angle, 90.0) <= 1.0, "{angle}: {}", est.stem_angle_deg);
            assert!(est.center_3d.distance(scene.valve.stem_top_center()) <= 0.005, "{:?}", est.center_3d);
        }
    }
}
