//! Wrench perception: handle box from the head box, handle point-cloud
//! segmentation and grasp point, jaw grip center and orientation, 3D lift,
//! median accumulation over frames and target/backup selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    angular_distance, centroid, ray_plane_intersection, two_point_angle, wrap_deg, AngleFold, PinholeCamera, Plane, Point2,
    Vec3,
};
use crate::image::{BBox, RasterImage};
use crate::ransac::{ransac_plane, RansacParams};
use crate::scene::{Intrinsics, PanelSceneSpec};
use crate::vision::{convexity_defects, otsu_threshold, trace_contours};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandleBox {
    pub bbox: BBox,
    /// The raw extension crossed the image border.
    pub clipped: bool,
}

/// Handle box `(x, y − 2h, w, 2h)` for a head box `(x, y, w, h)`, clipped to
/// `image`.
pub fn extend_handle_bbox(head: &BBox, image: &BBox) -> Result<HandleBox> {
    if head.w <= 0 || head.h <= 0 {
        return Err(Error::EmptyBbox(format!("head box {}x{}", head.w, head.h)));
    }
    let raw = BBox::new(head.x, head.y - 2 * head.h, head.w, 2 * head.h);
    let bbox = raw
        .intersect(image)
        .ok_or_else(|| Error::EmptyBbox("handle box lies outside the image".into()))?;
    Ok(HandleBox { bbox, clipped: bbox != raw })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrenchParams {
    /// Points farther than this from the camera are dropped, meters.
    pub max_range_m: f64,
    /// Band around the mean depth, meters.
    pub depth_band_m: f64,
    pub plane_inlier_m: f64,
    pub plane_iterations: usize,
    pub min_points: usize,
    /// Head ROI is grown by this fraction of its size before binarization.
    pub roi_margin: f64,
    /// Jaw defects shallower than this fraction of the ROI size are ignored.
    pub min_defect_ratio: f64,
}

impl Default for WrenchParams {
    fn default() -> Self {
        WrenchParams {
            max_range_m: 1.0,
            depth_band_m: 0.015,
            plane_inlier_m: 0.01,
            plane_iterations: 200,
            min_points: 10,
            roi_margin: 0.15,
            min_defect_ratio: 0.12,
        }
    }
}

/// Camera-frame points whose projection falls inside `bbox`.
pub fn crop_cloud(cloud: &[Vec3], bbox: &BBox, camera: &PinholeCamera) -> Vec<Vec3> {
    cloud
        .iter()
        .copied()
        .filter(|p| {
            camera
                .project_camera(*p)
                .is_some_and(|q| bbox.contains_point(q.x + 0.5, q.y + 0.5))
        })
        .collect()
}

/// Range cut, band around the mean depth, then a RANSAC plane. Input and
/// output in the camera frame; the plane is the least-squares refit.
pub fn segment_handle(cloud: &[Vec3], params: &WrenchParams, seed: u64) -> Result<(Vec<Vec3>, Plane)> {
    if cloud.is_empty() {
        return Err(Error::SegmentationFailure("empty cloud".into()));
    }
    let near: Vec<Vec3> = cloud.iter().copied().filter(|p| p.z <= params.max_range_m).collect();
    let fail = |stage: &str, n: usize| Error::SegmentationFailure(format!("{n} points left after the {stage} filter"));
    if near.len() < params.min_points {
        return Err(fail("range", near.len()));
    }
    let zbar = near.iter().map(|p| p.z).sum::<f64>() / near.len() as f64;
    let band: Vec<Vec3> = near.into_iter().filter(|p| (p.z - zbar).abs() <= params.depth_band_m).collect();
    if band.len() < params.min_points {
        return Err(fail("depth band", band.len()));
    }
    let fit = ransac_plane(
        &band,
        &RansacParams { iterations: params.plane_iterations, inlier_dist: params.plane_inlier_m },
        seed,
    )?;
    if fit.inliers.len() < params.min_points {
        return Err(fail("plane", fit.inliers.len()));
    }
    let inliers = fit.inliers.iter().map(|&i| band[i]).collect();
    Ok((inliers, fit.plane))
}

pub fn grasp_point(inliers: &[Vec3]) -> Result<Vec3> {
    centroid(inliers).ok_or_else(|| Error::DegenerateInput("no handle points".into()))
}

/// Jaw geometry found in a head ROI, in ROI pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JawFeatures {
    /// Centroid of the triangle spanned by the jaw tips and the deep point.
    pub grip_center: Point2,
    pub deep_point: Point2,
    pub tips: [Point2; 2],
    pub depth_px: f64,
}

impl JawFeatures {
    /// Tip-to-tip distance minus one pixel: border pixel centers sit half a
    /// pixel inside the silhouette on each side of the slot.
    pub fn aperture_px(&self) -> f64 {
        (self.tips[0].distance(self.tips[1]) - 1.0).max(0.0)
    }

    pub fn offset(self, dx: f64, dy: f64) -> JawFeatures {
        let o = |p: Point2| Point2::new(p.x + dx, p.y + dy);
        JawFeatures {
            grip_center: o(self.grip_center),
            deep_point: o(self.deep_point),
            tips: [o(self.tips[0]), o(self.tips[1])],
            depth_px: self.depth_px,
        }
    }
}

/// Otsu → largest dark outer contour → deepest convexity defect.
pub fn head_grip_center(roi: &RasterImage, min_defect_ratio: f64) -> Result<JawFeatures> {
    if roi.is_empty() {
        return Err(Error::EmptyBbox("empty head ROI".into()));
    }
    let (_, bright) = otsu_threshold(roi);
    let dark = bright.inverted();
    let contour = trace_contours(&dark)
        .into_iter()
        .filter(|c| !c.is_hole && c.points.len() >= 3)
        .max_by(|a, b| a.polygon_area().total_cmp(&b.polygon_area()))
        .ok_or(Error::OpenJawNotFound)?;
    let pts = contour.as_points();
    let defects = convexity_defects(&pts).map_err(|_| Error::OpenJawNotFound)?;
    let best = defects
        .iter()
        .max_by(|a, b| a.depth.total_cmp(&b.depth).then(b.start.cmp(&a.start)))
        .ok_or(Error::OpenJawNotFound)?;
    let min_depth = (min_defect_ratio * roi.width.min(roi.height) as f64).max(2.0);
    if best.depth < min_depth {
        return Err(Error::OpenJawNotFound);
    }
    let (a, b) = (pts[best.start], pts[best.end]);
    let len = a.distance(b);
    let depth_of = |p: Point2| ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)).abs() / len;
    // tips: where the contour leaves the hull edge on either side of the slot
    let m = pts.len();
    let mut i = best.start;
    let mut tip_a = a;
    while i != best.deepest {
        if depth_of(pts[i]) < 1.0 {
            tip_a = pts[i];
        }
        i = (i + 1) % m;
    }
    let mut i = best.end;
    let mut tip_b = b;
    while i != best.deepest {
        if depth_of(pts[i]) < 1.0 {
            tip_b = pts[i];
        }
        i = (i + m - 1) % m;
    }
    // deep point: mean of the slot points farthest from the mouth midpoint
    let mouth = tip_a.midpoint(tip_b);
    let slot: Vec<Point2> = {
        let mut v = Vec::new();
        let mut i = best.start;
        while i != best.end {
            v.push(pts[i]);
            i = (i + 1) % m;
        }
        v
    };
    let far = slot.iter().map(|p| p.distance(mouth)).fold(0.0, f64::max);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for p in slot.iter().filter(|p| p.distance(mouth) >= far - 1.0) {
        sx += p.x;
        sy += p.y;
        n += 1;
    }
    let deep = Point2::new(sx / n as f64, sy / n as f64);
    let grip = Point2::new((tip_a.x + tip_b.x + deep.x) / 3.0, (tip_a.y + tip_b.y + deep.y) / 3.0);
    Ok(JawFeatures { grip_center: grip, deep_point: deep, tips: [tip_a, tip_b], depth_px: best.depth })
}

/// Direction of the jaw opening in degrees, counter-clockwise with the
/// image v axis pointing up: the angle from the deep point to the grip
/// center.
pub fn head_orientation(center: Point2, deep: Point2) -> Result<f64> {
    let up = |p: Point2| Point2::new(p.x, -p.y);
    two_point_angle(up(deep), up(center), AngleFold::Full)
}

/// Grip center pixel back-projected onto the handle plane (camera frame).
pub fn lift_center_to_3d(center: Point2, plane: &Plane, camera: &PinholeCamera) -> Result<Vec3> {
    ray_plane_intersection(center, camera, plane)
}

/// Single-frame wrench estimate. 3D quantities are in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrenchObservation {
    pub head_bbox: BBox,
    pub handle_bbox: HandleBox,
    pub grip_center_2d: Point2,
    pub deep_point_2d: Point2,
    pub grip_center_3d: Vec3,
    pub orientation_deg: f64,
    pub grasp_point: Vec3,
    pub handle_plane: Plane,
    /// Metric jaw opening, millimeters.
    pub jaw_width_mm: f64,
}

/// Runs the whole single-frame chain for one head box. `cloud` is the
/// camera-frame cloud covering at least the handle box.
pub fn observe_wrench(
    image: &RasterImage,
    cloud: &[Vec3],
    head_bbox: &BBox,
    camera: &PinholeCamera,
    params: &WrenchParams,
    seed: u64,
) -> Result<WrenchObservation> {
    let handle = extend_handle_bbox(head_bbox, &image.bounds())?;
    let handle_points = crop_cloud(cloud, &handle.bbox, camera);
    let (inliers, plane) = segment_handle(&handle_points, params, seed)?;
    let grasp = grasp_point(&inliers)?;

    let margin = (head_bbox.w.max(head_bbox.h) as f64 * params.roi_margin).round() as i32;
    let roi_box = head_bbox
        .inflate(margin)
        .intersect(&image.bounds())
        .ok_or_else(|| Error::EmptyBbox("head ROI outside the image".into()))?;
    let jaw = head_grip_center(&image.crop(roi_box), params.min_defect_ratio)?.offset(roi_box.x as f64, roi_box.y as f64);
    let grip3 = lift_center_to_3d(jaw.grip_center, &plane, camera)?;
    let orientation = head_orientation(jaw.grip_center, jaw.deep_point)?;
    Ok(WrenchObservation {
        head_bbox: *head_bbox,
        handle_bbox: handle,
        grip_center_2d: jaw.grip_center,
        deep_point_2d: jaw.deep_point,
        grip_center_3d: grip3,
        orientation_deg: orientation,
        grasp_point: grasp,
        handle_plane: plane,
        jaw_width_mm: jaw.aperture_px() * grip3.z / camera.fx * 1000.0,
    })
}

pub const MEDIAN_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedEstimate {
    pub grip_center_3d: Vec3,
    pub grasp_point: Vec3,
    pub orientation_deg: f64,
    pub jaw_width_mm: f64,
    pub frame_count: usize,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Angles unwrapped onto the branch `(ref − 180, ref + 180]`, where `ref` is
/// the circular medoid of the set.
pub fn unwrap_angles(angles: &[f64]) -> Vec<f64> {
    let Some(reference) = angles
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let cost = |x: f64| angles.iter().map(|&y| angular_distance(x, y, 360.0)).sum::<f64>();
            cost(a).total_cmp(&cost(b))
        })
    else {
        return Vec::new();
    };
    angles.iter().map(|&a| reference + wrap_deg(a - reference)).collect()
}

/// Component-wise median over exactly `window` frames.
pub fn accumulate_median(frames: &[WrenchObservation], window: usize) -> Result<AccumulatedEstimate> {
    if frames.len() != window || window == 0 {
        return Err(Error::IncompleteWindow { got: frames.len(), need: window });
    }
    let med = |f: &dyn Fn(&WrenchObservation) -> f64| {
        let mut v: Vec<f64> = frames.iter().map(f).collect();
        median(&mut v).unwrap_or(f64::NAN)
    };
    let vec_med = |f: &dyn Fn(&WrenchObservation) -> Vec3| Vec3::new(med(&|o| f(o).x), med(&|o| f(o).y), med(&|o| f(o).z));
    let mut angles = unwrap_angles(&frames.iter().map(|o| o.orientation_deg).collect::<Vec<_>>());
    Ok(AccumulatedEstimate {
        grip_center_3d: vec_med(&|o| o.grip_center_3d),
        grasp_point: vec_med(&|o| o.grasp_point),
        orientation_deg: wrap_deg(median(&mut angles).unwrap_or(f64::NAN)),
        jaw_width_mm: med(&|o| o.jaw_width_mm),
        frame_count: frames.len(),
    })
}

/// Wrench whose jaw width is closest to the target (within `tolerance_mm`)
/// and the runner-up as backup. `widths` pairs a wrench index with its
/// measured jaw width in millimeters.
pub fn select_target(widths: &[(usize, f64)], target_mm: f64, tolerance_mm: f64) -> Result<(usize, Option<usize>)> {
    if widths.is_empty() {
        return Err(Error::InsufficientData("no wrench widths".into()));
    }
    let mut ok: Vec<(usize, f64)> = widths
        .iter()
        .filter(|(_, w)| (w - target_mm).abs() <= tolerance_mm)
        .map(|&(i, w)| (i, (w - target_mm).abs()))
        .collect();
    ok.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    match ok.as_slice() {
        [] => Err(Error::TargetNotFound),
        [only] => Ok((only.0, None)),
        [first, second, ..] => Ok((first.0, Some(second.0))),
    }
}

/// Camera looking square at the wrench row from `depth_m` in front of the
/// wrench plane, shifted by `offset` (meters, face frame).
pub fn wrench_camera(scene: &PanelSceneSpec, intr: &Intrinsics, depth_m: f64, offset: Vec3) -> Result<PinholeCamera> {
    let n = scene.wrenches.len().max(1) as f64;
    let x = scene.wrenches.iter().map(|w| w.x_mm).sum::<f64>() / n / 1000.0;
    let y = scene.wrenches.iter().map(|w| w.y_mm).sum::<f64>() / n / 1000.0 + 0.06;
    intr.face_camera(Vec3::new(x, y, scene.standoff_m() + depth_m) + offset)
}

pub const WRENCH_CAMERA_DEPTH_M: f64 = 0.6;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        generate_scenario, handle_centroid_truth, head_bbox_truth, render_panel_image, synthesize_handle_cloud, CloudSpec,
        GenParams, RenderOptions,
    };

    #[test]
    fn handle_box_formula() {
        let img = BBox::new(0, 0, 964, 724);
        let h = extend_handle_bbox(&BBox::new(100, 300, 40, 60), &img).unwrap();
        assert_eq!(h.bbox, BBox::new(100, 180, 40, 120));
        assert!(!h.clipped);
        let top = extend_handle_bbox(&BBox::new(100, 50, 40, 60), &img).unwrap();
        assert!(top.clipped && top.bbox.h < 120 && top.bbox.y == 0);
        assert!(matches!(extend_handle_bbox(&BBox::new(1, 1, 10, 0), &img), Err(Error::EmptyBbox(_))));
    }

    fn plane_cloud(z: f64) -> Vec<Vec3> {
        (0..20).flat_map(|i| (0..20).map(move |j| Vec3::new(i as f64 * 0.002, j as f64 * 0.002, z))).collect()
    }

    #[test]
    fn noiseless_plane_exact() {
        let cloud = plane_cloud(0.5);
        let (inl, plane) = segment_handle(&cloud, &WrenchParams::default(), 1).unwrap();
        assert_eq!(inl.len(), cloud.len());
        let n = plane.normal();
        assert!((n.z.abs() - 1.0).abs() < 1e-6);
        assert!(plane.signed_distance(Vec3::new(0.3, -0.1, 0.5)).abs() < 1e-6);
        let g = grasp_point(&inl).unwrap();
        assert!(plane.signed_distance(g).abs() < 0.01);
    }

    #[test]
    fn far_cloud_fails() {
        assert!(matches!(
            segment_handle(&plane_cloud(1.5), &WrenchParams::default(), 1),
            Err(Error::SegmentationFailure(_))
        ));
        assert_eq!(grasp_point(&[Vec3::X]).unwrap(), Vec3::X);
    }

    /// Dark U-shape: disk of radius `r` with a slot of half-width `g` opening
    /// toward `theta` (degrees, v up).
    fn u_shape(size: usize, r: f64, g: f64, theta: f64) -> RasterImage {
        let c = (size as f64 - 1.0) / 2.0;
        let (dx, dy) = (theta.to_radians().cos(), -theta.to_radians().sin());
        RasterImage::from_fn(size, size, |x, y| {
            let (px, py) = (x as f64 - c, y as f64 - c);
            let a = px * dx + py * dy;
            let b = -px * dy + py * dx;
            let inside = px * px + py * py <= r * r;
            let slot = if a >= 0.0 { b.abs() <= g } else { a * a + b * b <= g * g };
            if inside && !slot {
                40
            } else {
                210
            }
        })
    }

    fn analytic_grip(size: usize, r: f64, g: f64, theta: f64) -> (Point2, Point2) {
        let c = (size as f64 - 1.0) / 2.0;
        let (dx, dy) = (theta.to_radians().cos(), -theta.to_radians().sin());
        let reach = (r * r - g * g).sqrt();
        let a = (2.0 * reach - g) / 3.0;
        (Point2::new(c + a * dx, c + a * dy), Point2::new(c - g * dx, c - g * dy))
    }

    #[test]
    fn u_shape_grip_center() {
        for theta in [-90.0, 0.0, 45.0] {
            let img = u_shape(121, 45.0, 18.0, theta);
            let jaw = head_grip_center(&img, 0.12).unwrap();
            let (g, d) = analytic_grip(121, 45.0, 18.0, theta);
            assert!(jaw.grip_center.distance(g) <= 2.0, "{theta}: {:?} vs {g:?}", jaw.grip_center);
            assert!(jaw.deep_point.distance(d) <= 2.0, "{theta}: {:?} vs {d:?}", jaw.deep_point);
            let o = head_orientation(jaw.grip_center, jaw.deep_point).unwrap();
            assert!(angular_distance(o, theta, 360.0) <= 2.0, "{theta} vs {o}");
        }
    }

    #[test]
    fn disk_has_no_jaw() {
        let img = RasterImage::from_fn(101, 101, |x, y| {
            let (dx, dy) = (x as f64 - 50.0, y as f64 - 50.0);
            if dx * dx + dy * dy <= 1600.0 {
                40
            } else {
                210
            }
        });
        assert_eq!(head_grip_center(&img, 0.12), Err(Error::OpenJawNotFound));
    }

    #[test]
    fn orientation_conventions() {
        let c = Point2::new(10.0, 10.0);
        assert_eq!(head_orientation(c, Point2::new(0.0, 10.0)).unwrap(), 0.0);
        assert!((head_orientation(Point2::new(11.0, 9.0), Point2::new(10.0, 10.0)).unwrap() - 45.0).abs() < 1e-12);
        let a = head_orientation(c, Point2::new(3.0, 14.0)).unwrap();
        let b = head_orientation(Point2::new(3.0, 14.0), c).unwrap();
        assert!((angular_distance(a, b, 360.0) - 180.0).abs() < 1e-9);
        assert!(head_orientation(c, c).is_err());
    }

    fn obs(x: f64, angle: f64) -> WrenchObservation {
        WrenchObservation {
            head_bbox: BBox::new(0, 0, 1, 1),
            handle_bbox: HandleBox { bbox: BBox::new(0, 0, 1, 1), clipped: false },
            grip_center_2d: Point2::default(),
            deep_point_2d: Point2::default(),
            grip_center_3d: Vec3::new(x, 0.0, 0.6),
            orientation_deg: angle,
            grasp_point: Vec3::new(x, 0.1, 0.6),
            handle_plane: Plane::new(0.0, 0.0, 1.0, -0.6),
            jaw_width_mm: 24.0,
        }
    }

    #[test]
    fn median_examples() {
        let same = vec![obs(0.5, -90.0); 10];
        let m = accumulate_median(&same, 10).unwrap();
        assert_eq!(m.grip_center_3d, same[0].grip_center_3d);
        assert_eq!(m.orientation_deg, -90.0);
        let mut frames = vec![obs(0.5, 10.0); 9];
        frames.push(obs(9.99, 10.0));
        assert_eq!(accumulate_median(&frames, 10).unwrap().grip_center_3d.x, 0.5);
        assert!(matches!(accumulate_median(&frames[..9], 10), Err(Error::IncompleteWindow { got: 9, need: 10 })));
    }

    #[test]
    fn median_across_the_branch_cut() {
        let angles = [179.0, -179.0, 178.0, -178.0, 180.0, 179.5, -179.5, 177.0, -177.0, 180.0];
        let frames: Vec<_> = angles.iter().map(|&a| obs(0.0, a)).collect();
        let m = accumulate_median(&frames, 10).unwrap();
        assert!(angular_distance(m.orientation_deg, 180.0, 360.0) < 1.0, "{}", m.orientation_deg);
    }

    #[test]
    fn target_selection() {
        let widths: Vec<(usize, f64)> = [19.0, 22.0, 24.0, 27.0, 30.0, 32.0].into_iter().enumerate().collect();
        assert_eq!(select_target(&widths, 24.0, 1.5).unwrap(), (2, None));
        assert_eq!(select_target(&widths, 10.0, 1.0), Err(Error::TargetNotFound));
        let two = [(0, 19.0), (1, 24.3), (2, 23.9), (3, 30.0)];
        assert_eq!(select_target(&two, 24.0, 1.5).unwrap(), (2, Some(1)));
    }

    #[test]
    fn rendered_scene_end_to_end() {
        let sc = generate_scenario(&GenParams::default(), 5).unwrap();
        let scene = &sc.scene;
        let intr = Intrinsics::default();
        let cam = wrench_camera(scene, &intr, WRENCH_CAMERA_DEPTH_M, Vec3::ZERO).unwrap();
        let img = render_panel_image(scene, scene.wrench_side, &cam, (intr.width, intr.height), &RenderOptions::noiseless(), 1)
            .unwrap();
        for i in 0..scene.wrenches.len() {
            let head = head_bbox_truth(scene, i, &cam).unwrap();
            let handle = extend_handle_bbox(&head, &img.bounds()).unwrap();
            let cloud = synthesize_handle_cloud(scene, i, &cam, &handle.bbox, &CloudSpec::default(), 7 + i as u64).unwrap();
            let o = observe_wrench(&img, &cloud, &head, &cam, &WrenchParams::default(), 3).unwrap();
            let truth = handle_centroid_truth(scene, i, &cam, &handle.bbox).unwrap();
            let err = cam.camera_to_world(o.grasp_point).distance(truth);
            assert!(err <= 0.005, "wrench {i}: grasp error {err}");
            let w = &scene.wrenches[i];
            assert!(angular_distance(o.orientation_deg, w.orientation_deg, 360.0) <= 2.0);
            assert!(o.handle_plane.signed_distance(o.grip_center_3d).abs() <= 1e-6);
            assert!((o.jaw_width_mm - w.jaw_mm).abs() <= 1.0, "wrench {i}: {} vs {}", o.jaw_width_mm, w.jaw_mm);
        }
    }
}
