use nalgebra::{Matrix3, SymmetricEigen};
use proptest::prelude::*;

use panelbot_core::cascade::{evaluate, Cascade, CascadeStage, Stump, CASCADE_FORMAT, CASCADE_VERSION};
use panelbot_core::geometry::*;
use panelbot_core::image::{BBox, RasterImage};
use panelbot_core::mission::{step, MissionEvent, MissionState, TransitionTable};
use panelbot_core::panel::{rank_candidates, similarity, Cluster};
use panelbot_core::ransac::{ransac_line, RansacParams};
use panelbot_core::scene::{
    simulate_scan, simulate_scan_labeled, ArenaSpec, Bounds, Distractor, LaserSpec, PanelPlacement, Pose2,
};
use panelbot_core::valve::{find_square, valve_center_orientation, SquareParams};
use panelbot_core::vision::{canny, convex_hull, lbp_features, sobel_gradient, CannyParams, Segment2, LBP_WINDOW};
use panelbot_core::wrench::{extend_handle_bbox, median, unwrap_angles};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Mat3> {
    (-180.0..180.0f64, -90.0..90.0f64, -180.0..180.0f64)
        .prop_map(|(a, b, c)| Mat3::rot_z(a).mul_mat(&Mat3::rot_y(b)).mul_mat(&Mat3::rot_x(c)))
}

fn cloud() -> impl Strategy<Value = Vec<Vec3>> {
    (0.2..3.0f64, 0.05..1.0f64, 0.01..0.3f64, prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 8..60))
        .prop_map(|(a, b, c, u)| u.into_iter().map(|(x, y, z)| Vec3::new(a * x, b * y, c * z)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn obb_extents_survive_rigid_motion(pts in cloud(), r in rotation(), t in vec3(5.0)) {
        let (_, e0) = obb_of_cluster(&pts).unwrap();
        let moved: Vec<Vec3> = pts.iter().map(|&p| r.mul_vec(p) + t).collect();
        let (_, e1) = obb_of_cluster(&moved).unwrap();
        let (a, b) = (e0.sorted_desc(), e1.sorted_desc());
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn eigen_reconstruction_matches_independent_solver(rows in prop::collection::vec(vec3(2.0), 3)) {
        // PSD matrix AᵀA
        let a = Mat3::from_rows(rows[0], rows[1], rows[2]);
        let c = a.transpose().mul_mat(&a);
        let pcs = principal_components(&c).unwrap();
        let mut rec = [[0.0; 3]; 3];
        for p in &pcs {
            for i in 0..3 {
                for j in 0..3 {
                    rec[i][j] += p.value * p.vector[i] * p.vector[j];
                }
            }
        }
        prop_assert!(Mat3(rec).max_abs_diff(&c) <= 1e-7 * c.max_abs().max(1.0));
        let m = Matrix3::from_fn(|i, j| c.0[i][j]);
        let mut oracle: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        oracle.sort_by(|x, y| y.total_cmp(x));
        for k in 0..3 {
            prop_assert!((pcs[k].value - oracle[k]).abs() <= 1e-8 * c.max_abs().max(1.0));
        }
    }

    #[test]
    fn ray_plane_undoes_projection(n in vec3(1.0), d in 0.5..4.0f64, u in 50.0..900.0f64, v in 50.0..650.0f64) {
        let Some(n) = Vec3::new(n.x, n.y, n.z.abs() + 0.5).normalized() else { return Ok(()) };
        let plane = Plane::from_point_normal(Vec3::new(0.0, 0.0, d), n).unwrap();
        let cam = PinholeCamera::new(1000.0, 1000.0, 481.5, 361.5, RigidTransform::default()).unwrap();
        let p = ray_plane_intersection(Point2::new(u, v), &cam, &plane).unwrap();
        prop_assert!(plane.residual(p).abs() <= 1e-9);
        let back = cam.project_camera(p).unwrap();
        prop_assert!((back.x - u).abs() <= 1e-6 && (back.y - v).abs() <= 1e-6);
    }

    #[test]
    fn line_plane_angle_in_range(a in vec3(1.0), b in vec3(1.0), c in vec3(1.0)) {
        let (Ok(line), Some(n)) = (Line3::new(a, b), c.normalized()) else { return Ok(()) };
        let plane = Plane::from_point_normal(Vec3::ZERO, n).unwrap();
        let ang = line_plane_angle(&line, &plane).unwrap();
        prop_assert!((0.0..=90.0).contains(&ang));
    }

    #[test]
    fn two_point_angle_reverses_by_half_turn(x0 in -100.0..100.0f64, y0 in -100.0..100.0f64, x1 in -100.0..100.0f64, y1 in -100.0..100.0f64) {
        let (a, b) = (Point2::new(x0, y0), Point2::new(x1, y1));
        if a.distance(b) < 1e-6 { return Ok(()) }
        let f = two_point_angle(a, b, AngleFold::Full).unwrap();
        let r = two_point_angle(b, a, AngleFold::Full).unwrap();
        prop_assert!(((f - r).abs() - 180.0).abs() <= 1e-9, "{f} {r}");
    }

    #[test]
    fn triangulation_round_trip(p in (-0.5..0.5f64, -0.4..0.4f64, 0.4..3.0f64), base in 0.05..0.3f64) {
        let left = PinholeCamera::new(1000.0, 1000.0, 481.5, 361.5, RigidTransform::default()).unwrap();
        let rig = StereoRig::rectified(left, base).unwrap();
        let w = Vec3::new(p.0, p.1, p.2);
        let q = triangulate(rig.left.project(w).unwrap(), rig.right.project(w).unwrap(), &rig).unwrap();
        prop_assert!(q.distance(w) <= 1e-6);
    }
}

fn box_arena(seed: u64) -> ArenaSpec {
    let k = seed as f64;
    ArenaSpec {
        bounds: Bounds { min_x_m: -10.0, min_y_m: -10.0, max_x_m: 10.0, max_y_m: 10.0 },
        walls: Bounds { min_x_m: -10.0, min_y_m: -10.0, max_x_m: 10.0, max_y_m: 10.0 }.walls(),
        panel: PanelPlacement { x_m: 3.0, y_m: 1.0 + k % 3.0, heading_deg: 17.0 * k % 180.0, width_m: 1.2, thickness_m: 0.1 },
        distractors: vec![Distractor { x_m: -3.0, y_m: 2.0, heading_deg: 40.0, length_m: 2.0, thickness_m: 0.2 }],
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn scan_ranges_bounded_and_deterministic(seed in 0u64..1000, sigma in 0.0..0.05f64) {
        let arena = box_arena(seed);
        let spec = LaserSpec { range_noise_sigma_m: sigma, ..LaserSpec::default() };
        let pose = Pose2::new(0.0, 0.0, (seed % 360) as f64);
        let noiseless = LaserSpec { range_noise_sigma_m: 0.0, ..spec };
        let (truth, _) = simulate_scan_labeled(&arena, pose, &noiseless, seed).unwrap();
        let a = simulate_scan(&arena, pose, &spec, seed).unwrap();
        let b = simulate_scan(&arena, pose, &spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for (r, t) in a.ranges.iter().zip(&truth.ranges) {
            if r.is_finite() {
                prop_assert!(*r <= spec.max_range_m);
                prop_assert!(*r >= t - 4.0 * sigma - 1e-12);
            }
        }
    }

    #[test]
    fn ranking_ignores_cluster_order(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(), scale in 0.5..2.0f64) {
        let clusters: Vec<Cluster> = (0..5)
            .map(|k| {
                let len = scale * (0.4 + 0.3 * k as f64);
                let pts = (0..30).map(|i| Vec3::new(len * i as f64 / 29.0, 0.02 * ((i * 7 + k) % 5) as f64, 0.0)).collect();
                Cluster { id: k, points: pts }
            })
            .collect();
        let shuffled: Vec<Cluster> = perm.iter().map(|&i| clusters[i].clone()).collect();
        let a: Vec<(usize, f64)> = rank_candidates(&clusters, (1.2, 0.1)).unwrap().iter().map(|c| (c.cluster_id, c.similarity)).collect();
        let b: Vec<(usize, f64)> = rank_candidates(&shuffled, (1.2, 0.1)).unwrap().iter().map(|c| (c.cluster_id, c.similarity)).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn similarity_falls_away_from_panel(w in 1.2..5.0f64, t in 0.1..1.0f64, dw in 0.0..2.0f64, dt in 0.0..1.0f64) {
        let e = ObbExtent { sx: w, sy: t, sz: 0.0 };
        let bigger = ObbExtent { sx: w + dw, sy: t + dt, sz: 0.0 };
        prop_assert!(similarity(&bigger, (1.2, 0.1)) <= similarity(&e, (1.2, 0.1)) + 1e-15);
    }

    #[test]
    fn ransac_repeats_for_a_seed(seed in any::<u64>(), pts in prop::collection::vec(vec3(2.0), 10..80)) {
        let p = RansacParams { iterations: 50, inlier_dist: 0.1 };
        let a = ransac_line(&pts, &p, seed).unwrap();
        let b = ransac_line(&pts, &p, seed).unwrap();
        prop_assert_eq!(a.inliers, b.inliers);
    }
}

fn random_image(w: usize, h: usize) -> impl Strategy<Value = RasterImage> {
    prop::collection::vec(0u8..200, w * h).prop_map(move |d| RasterImage::from_vec(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn hull_is_idempotent(pts in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 3..60)) {
        let pts: Vec<Point2> = pts.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
        if let Ok(h) = convex_hull(&pts) {
            prop_assert_eq!(convex_hull(&h).unwrap(), h);
        }
    }

    #[test]
    fn lbp_ignores_global_shift(img in random_image(LBP_WINDOW, LBP_WINDOW), k in 1u8..55) {
        let shifted = RasterImage::from_fn(LBP_WINDOW, LBP_WINDOW, |x, y| img.get(x, y) + k);
        prop_assert_eq!(lbp_features(&img, 4).unwrap(), lbp_features(&shifted, 4).unwrap());
    }

    #[test]
    fn canny_edges_are_gradient_maxima(img in random_image(40, 30)) {
        let p = CannyParams::default();
        let e = canny(&img, &p);
        let g = sobel_gradient(&img, p.sigma);
        let m = |x: usize, y: usize| g.magnitude[y * 40 + x];
        for y in 1..29 {
            for x in 1..39 {
                if e.get(x, y) {
                    let v = m(x, y);
                    let dirs = [((x - 1, y), (x + 1, y)), ((x, y - 1), (x, y + 1)), ((x - 1, y - 1), (x + 1, y + 1)), ((x + 1, y - 1), (x - 1, y + 1))];
                    prop_assert!(dirs.iter().any(|(a, b)| v >= m(a.0, a.1) && v >= m(b.0, b.1)));
                }
            }
        }
    }

    #[test]
    fn metric_bounds(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let labels: Vec<bool> = [(true, tp), (false, tn), (false, fp), (true, fn_)].iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n as usize)).collect();
        let preds: Vec<bool> = [(true, tp), (false, tn), (true, fp), (false, fn_)].iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n as usize)).collect();
        if labels.is_empty() { return Ok(()) }
        let m = evaluate(&preds, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.accuracy));
        let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
        prop_assert!(m.f2 >= lo - 1e-12 && m.f2 <= hi + 1e-12);
    }

    #[test]
    fn cascade_rejection_is_final(feats in prop::collection::vec(any::<u8>(), 4 * 4 * 256), stumps in prop::collection::vec((0usize..4096, 0u16..256, any::<bool>(), 0.1..2.0f64), 3..30)) {
        let stages: Vec<CascadeStage> = stumps
            .chunks(3)
            .map(|c| CascadeStage {
                stumps: c.iter().map(|&(f, t, p, w)| Stump { feature: f, threshold: t, polarity: if p { 1 } else { -1 }, weight: w }).collect(),
                threshold: 0.0,
                detection_rate: 1.0,
                false_positive_rate: 0.5,
            })
            .collect();
        let cascade = Cascade { format: CASCADE_FORMAT.into(), version: CASCADE_VERSION, window: LBP_WINDOW, grid: 4, object_span: (0.1, 0.9), stages };
        let k = cascade.stages_passed(&feats);
        prop_assert_eq!(cascade.evaluate(|i| feats[i]).is_some(), k == cascade.stages.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn median_holds_against_four_corrupt_frames(
        clean in prop::collection::vec(-50.0..50.0f64, 6),
        bad in prop::collection::vec(prop_oneof![Just(f64::MAX / 4.0), Just(-1e9), -1e6..1e6f64], 0..=4),
        order in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let mut all: Vec<f64> = clean.clone();
        all.extend(bad.iter().copied());
        all.extend(clean.iter().take(4 - bad.len()).copied());
        let mut v: Vec<f64> = order.iter().map(|&i| all[i]).collect();
        let m = median(&mut v).unwrap();
        let lo = clean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = clean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo && m <= hi, "{m} outside [{lo}, {hi}]");
    }

    #[test]
    fn unwrapped_angles_stay_near_the_cluster(base in -180.0..180.0f64, jitter in prop::collection::vec(-5.0..5.0f64, 10)) {
        let raw: Vec<f64> = jitter.iter().map(|j| wrap_deg(base + j)).collect();
        let u = unwrap_angles(&raw);
        let spread = u.iter().copied().fold(f64::NEG_INFINITY, f64::max) - u.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(spread <= 10.0 + 1e-9);
    }

    #[test]
    fn handle_box_formula(x in 0i32..800, y in 200i32..600, w in 1i32..150, h in 1i32..100) {
        let head = BBox::new(x, y, w, h);
        let img = BBox::new(0, 0, 964, 724);
        let hb = extend_handle_bbox(&head, &img).unwrap();
        if !hb.clipped {
            prop_assert_eq!(hb.bbox, BBox::new(x, y - 2 * h, w, 2 * h));
        }
    }
}

fn square(cx: f64, cy: f64, e: f64, deg: f64) -> Vec<Segment2> {
    let t = deg.to_radians();
    let (u, v) = ((t.cos(), -t.sin()), (t.sin(), t.cos()));
    let h = e / 2.0;
    let at = |a: f64, b: f64| Point2::new(cx + u.0 * a + v.0 * b, cy + u.1 * a + v.1 * b);
    let p = [at(-h, -h), at(h, -h), at(h, h), at(-h, h)];
    (0..4).map(|i| Segment2::new(p[i], p[(i + 1) % 4])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn square_angle_has_four_fold_symmetry(deg in -360.0..360.0f64, e in 40.0..90.0f64) {
        let p = SquareParams::for_edge(e);
        let (_, a) = valve_center_orientation(&find_square(&square(200.0, 150.0, e, deg), &p).unwrap());
        let (_, b) = valve_center_orientation(&find_square(&square(200.0, 150.0, e, deg + 90.0), &p).unwrap());
        prop_assert!((0.0..90.0).contains(&a));
        prop_assert!(angular_distance(a, b, 90.0) <= 1e-6);
        prop_assert!(angular_distance(a, deg, 90.0) <= 1e-6);
    }

    #[test]
    fn square_search_ignores_input_order(deg in 0.0..90.0f64, perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut segs = square(200.0, 150.0, 60.0, deg);
        segs.push(Segment2::new(Point2::new(20.0, 20.0), Point2::new(70.0, 25.0)));
        segs.push(Segment2::new(Point2::new(300.0, 40.0), Point2::new(310.0, 100.0)));
        segs.push(Segment2::new(Point2::new(50.0, 250.0), Point2::new(120.0, 260.0)));
        let shuffled: Vec<Segment2> = perm.iter().map(|&i| segs[i]).collect();
        let p = SquareParams::for_edge(60.0);
        let a = find_square(&segs, &p).unwrap();
        let b = find_square(&shuffled, &p).unwrap();
        prop_assert_eq!(valve_center_orientation(&a), valve_center_orientation(&b));
        prop_assert!((a.score - b.score).abs() <= 1e-12);
    }

    #[test]
    fn machine_never_leaves_emergency_stop(events in prop::collection::vec(0usize..13, 0..40)) {
        let t = TransitionTable::standard();
        let mut s = MissionState::NavigatePatrol;
        let mut stopped = false;
        for e in events {
            let ev = MissionEvent::ALL[e];
            s = step(s, ev, &t);
            if stopped {
                prop_assert_eq!(s, MissionState::EmergencyStop);
            }
            stopped |= s == MissionState::EmergencyStop;
        }
    }
}
