use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, PinholeCamera, Point2, RigidTransform, Vec3};
use crate::image::{BBox, RasterImage};
use crate::seed;

/// Which face of the panel. Each face has its own frame: X to the right as
/// seen by a viewer facing it, Y up, Z out of the face toward the viewer,
/// origin at the face center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PanelSide {
    Front,
    Back,
}

impl PanelSide {
    pub fn other(self) -> PanelSide {
        match self {
            PanelSide::Front => PanelSide::Back,
            PanelSide::Back => PanelSide::Front,
        }
    }
}

/// One wrench hanging on the panel. Lengths in millimeters, positions in
/// the face frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrenchSpec {
    /// Jaw opening (the nominal wrench size).
    pub jaw_mm: f64,
    pub handle_length_mm: f64,
    /// Head center.
    pub x_mm: f64,
    pub y_mm: f64,
    /// Direction the jaw opens toward, degrees counter-clockwise from +X.
    pub orientation_deg: f64,
}

/// Outer head radius relative to the jaw opening.
pub const HEAD_RADIUS_RATIO: f64 = 1.15;
/// Handle width relative to the jaw opening.
pub const HANDLE_WIDTH_RATIO: f64 = 0.7;
/// Handle starts this far (in head radii) behind the head center.
pub const HANDLE_START_RATIO: f64 = 0.6;

impl WrenchSpec {
    pub fn head_radius_mm(&self) -> f64 {
        HEAD_RADIUS_RATIO * self.jaw_mm
    }

    pub fn handle_width_mm(&self) -> f64 {
        HANDLE_WIDTH_RATIO * self.jaw_mm
    }

    fn frame(&self) -> (Point2, Point2, Point2) {
        let t = self.orientation_deg.to_radians();
        let c = Point2::new(self.x_mm / 1000.0, self.y_mm / 1000.0);
        (c, Point2::new(t.cos(), t.sin()), Point2::new(-t.sin(), t.cos()))
    }

    /// Membership of a face-frame point (meters) in the wrench silhouette:
    /// a disk minus a stadium-shaped slot opening along the orientation, plus
    /// a straight handle on the opposite side.
    pub fn contains(&self, p: Point2) -> bool {
        let (c, dir, perp) = self.frame();
        let r = self.head_radius_mm() / 1000.0;
        let g = self.jaw_mm / 2000.0;
        let rel = (p.x - c.x, p.y - c.y);
        let a = rel.0 * dir.x + rel.1 * dir.y;
        let b = rel.0 * perp.x + rel.1 * perp.y;
        let d2 = rel.0 * rel.0 + rel.1 * rel.1;
        if d2 <= r * r {
            let in_slot = if a >= 0.0 { b.abs() <= g } else { d2 <= g * g };
            return !in_slot;
        }
        let s = HANDLE_START_RATIO * r;
        let l = self.handle_length_mm / 1000.0;
        a <= -s && a >= -(s + l) && b.abs() <= self.handle_width_mm() / 2000.0
    }

    /// Conservative face-frame bounds (meters) of the silhouette.
    fn extent(&self) -> (Point2, f64) {
        let (c, _, _) = self.frame();
        let r = self.head_radius_mm() / 1000.0;
        (c, r * (1.0 + HANDLE_START_RATIO) + self.handle_length_mm / 1000.0 + self.handle_width_mm() / 1000.0)
    }

    /// Handle rectangle corners in the face frame (meters).
    pub fn handle_polygon(&self) -> [Point2; 4] {
        let (c, dir, perp) = self.frame();
        let r = self.head_radius_mm() / 1000.0;
        let s = HANDLE_START_RATIO * r;
        let e = s + self.handle_length_mm / 1000.0;
        let hw = self.handle_width_mm() / 2000.0;
        let at = |a: f64, b: f64| Point2::new(c.x + dir.x * a + perp.x * b, c.y + dir.y * a + perp.y * b);
        [at(-s, -hw), at(-s, hw), at(-e, hw), at(-e, -hw)]
    }

    /// Jaw triangle `(tip+, tip−, deepest slot point)` in the face frame.
    pub fn jaw_triangle(&self) -> [Point2; 3] {
        let (c, dir, perp) = self.frame();
        let r = self.head_radius_mm() / 1000.0;
        let g = self.jaw_mm / 2000.0;
        let reach = (r * r - g * g).sqrt();
        let at = |a: f64, b: f64| Point2::new(c.x + dir.x * a + perp.x * b, c.y + dir.y * a + perp.y * b);
        [at(reach, g), at(reach, -g), at(-g, 0.0)]
    }

    /// Grip center: centroid of the jaw triangle.
    pub fn grip_center(&self) -> Point2 {
        let t = self.jaw_triangle();
        Point2::new((t[0].x + t[1].x + t[2].x) / 3.0, (t[0].y + t[1].y + t[2].y) / 3.0)
    }

    pub fn deep_point(&self) -> Point2 {
        self.jaw_triangle()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValveSpec {
    pub stem_edge_mm: f64,
    pub flange_diameter_mm: f64,
    pub stem_height_mm: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub stem_angle_deg: f64,
}

impl ValveSpec {
    pub fn center(&self) -> Point2 {
        Point2::new(self.x_mm / 1000.0, self.y_mm / 1000.0)
    }

    /// Stem top face center in the face frame.
    pub fn stem_top_center(&self) -> Vec3 {
        Vec3::new(self.x_mm / 1000.0, self.y_mm / 1000.0, self.stem_height_mm / 1000.0)
    }

    pub fn stem_contains(&self, p: Point2) -> bool {
        let t = self.stem_angle_deg.to_radians();
        let c = self.center();
        let rel = (p.x - c.x, p.y - c.y);
        let a = rel.0 * t.cos() + rel.1 * t.sin();
        let b = -rel.0 * t.sin() + rel.1 * t.cos();
        let h = self.stem_edge_mm / 2000.0;
        a.abs() <= h && b.abs() <= h
    }

    pub fn flange_contains(&self, p: Point2) -> bool {
        p.distance(self.center()) <= self.flange_diameter_mm / 2000.0
    }

    /// Stem square corners in the face frame (at stem height).
    pub fn stem_corners(&self) -> [Vec3; 4] {
        let t = self.stem_angle_deg.to_radians();
        let (u, v) = ((t.cos(), t.sin()), (-t.sin(), t.cos()));
        let h = self.stem_edge_mm / 2000.0;
        let c = self.stem_top_center();
        let at = |a: f64, b: f64| Vec3::new(c.x + u.0 * a + v.0 * b, c.y + u.1 * a + v.1 * b, c.z);
        [at(-h, -h), at(h, -h), at(h, h), at(-h, h)]
    }
}

/// Face contents: six wrenches and a valve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelSceneSpec {
    /// Face carrying the wrenches and the valve.
    pub wrench_side: PanelSide,
    /// Distance of the hanging wrenches in front of the face.
    pub wrench_standoff_mm: f64,
    /// Jaw size of the usable wrenches.
    pub target_jaw_mm: f64,
    pub target_index: usize,
    pub backup_index: usize,
    #[serde(default)]
    pub wrenches: Vec<WrenchSpec>,
    pub valve: ValveSpec,
}

pub const WRENCH_COUNT: usize = 6;

impl PanelSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.wrenches.len() != WRENCH_COUNT {
            return Err(Error::Config(format!(
                "a panel carries exactly {WRENCH_COUNT} wrenches, got {}",
                self.wrenches.len()
            )));
        }
        let (t, b) = (self.target_index, self.backup_index);
        if t >= WRENCH_COUNT || b >= WRENCH_COUNT || t == b {
            return Err(Error::Config(format!("invalid usable wrench indices {t}, {b}")));
        }
        let usable: Vec<usize> = self.usable_indices();
        if usable.len() != 2 || !usable.contains(&t) || !usable.contains(&b) {
            return Err(Error::Config(format!(
                "exactly two wrenches (the target and the backup) must have the {} mm jaw",
                self.target_jaw_mm
            )));
        }
        for w in &self.wrenches {
            if !(w.jaw_mm > 0.0 && w.handle_length_mm > 0.0) {
                return Err(Error::Config("wrench sizes must be positive".into()));
            }
        }
        let v = &self.valve;
        if !(v.stem_edge_mm > 0.0 && v.flange_diameter_mm > v.stem_edge_mm * std::f64::consts::SQRT_2) {
            return Err(Error::Config("valve flange must enclose the stem square".into()));
        }
        if !(self.wrench_standoff_mm >= 0.0 && v.stem_height_mm > 0.0) {
            return Err(Error::Config("standoff and stem height must be positive".into()));
        }
        Ok(())
    }

    pub fn usable_indices(&self) -> Vec<usize> {
        self.wrenches
            .iter()
            .enumerate()
            .filter(|(_, w)| (w.jaw_mm - self.target_jaw_mm).abs() < 1e-9)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn standoff_m(&self) -> f64 {
        self.wrench_standoff_mm / 1000.0
    }

    /// Grip center and deep point of wrench `i` in the face frame.
    pub fn grip_truth(&self, i: usize) -> (Vec3, Vec3) {
        let w = &self.wrenches[i];
        let z = self.standoff_m();
        let c = w.grip_center();
        let d = w.deep_point();
        (Vec3::new(c.x, c.y, z), Vec3::new(d.x, d.y, z))
    }
}

/// Camera intrinsics and image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics { fx: 1000.0, fy: 1000.0, width: 964, height: 724 }
    }
}

impl Intrinsics {
    /// Camera at `eye` (face frame) looking straight at the face, image
    /// x along +X and image y along −Y. Pixel centers sit at integer
    /// coordinates.
    pub fn face_camera(&self, eye: Vec3) -> Result<PinholeCamera> {
        let rot = Mat3::diag(1.0, -1.0, -1.0);
        PinholeCamera::new(
            self.fx,
            self.fy,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            RigidTransform::new(rot, eye),
        )
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width as i32, self.height as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Additive gaussian noise, intensity units.
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of a linear illumination ramp.
    pub gradient: f64,
    /// Samples per pixel side on silhouette boundaries.
    pub supersample: usize,
    pub background: u8,
    pub wrench: u8,
    pub flange: u8,
    pub stem: u8,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            noise_sigma: 3.0,
            gradient: 20.0,
            supersample: 3,
            background: 205,
            wrench: 60,
            flange: 140,
            stem: 35,
        }
    }
}

impl RenderOptions {
    pub fn noiseless() -> Self {
        RenderOptions { noise_sigma: 0.0, gradient: 0.0, ..RenderOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Material {
    Background,
    Wrench,
    Flange,
    Stem,
}

struct Layer<'a> {
    z: f64,
    kind: LayerKind<'a>,
}

enum LayerKind<'a> {
    Wrenches(Vec<(&'a WrenchSpec, Point2, f64)>),
    Flange(&'a ValveSpec),
    Stem(&'a ValveSpec),
}

struct FaceModel<'a> {
    layers: Vec<Layer<'a>>,
    eye: Vec3,
    rot: Mat3,
}

impl<'a> FaceModel<'a> {
    fn new(scene: &'a PanelSceneSpec, side: PanelSide, camera: &PinholeCamera) -> Result<Self> {
        let eye = camera.center();
        let axis = camera.pose.apply_vector(Vec3::Z);
        if !(eye.z > 0.0) || !(axis.z < 0.0) {
            return Err(Error::Config("camera must be in front of the panel face and look at it".into()));
        }
        let mut layers = Vec::new();
        if side == scene.wrench_side {
            let v = &scene.valve;
            layers.push(Layer { z: v.stem_height_mm / 1000.0, kind: LayerKind::Stem(v) });
            layers.push(Layer { z: 0.002_f64.min(v.stem_height_mm / 2000.0), kind: LayerKind::Flange(v) });
            if !scene.wrenches.is_empty() {
                let ws = scene
                    .wrenches
                    .iter()
                    .map(|w| {
                        let (c, r) = w.extent();
                        (w, c, r)
                    })
                    .collect();
                layers.push(Layer { z: scene.standoff_m(), kind: LayerKind::Wrenches(ws) });
            }
        }
        layers.sort_by(|a, b| b.z.total_cmp(&a.z));
        Ok(FaceModel { layers, eye, rot: camera.pose.rotation })
    }

    fn material(&self, camera: &PinholeCamera, u: f64, v: f64) -> Material {
        let d = self.rot.mul_vec(camera.ray(Point2::new(u, v)));
        for layer in &self.layers {
            let t = (layer.z - self.eye.z) / d.z;
            if t <= 0.0 {
                continue;
            }
            let p = Point2::new(self.eye.x + t * d.x, self.eye.y + t * d.y);
            let hit = match &layer.kind {
                LayerKind::Wrenches(ws) => ws
                    .iter()
                    .any(|(w, c, r)| (p.x - c.x).abs() <= *r && (p.y - c.y).abs() <= *r && w.contains(p))
                    .then_some(Material::Wrench),
                LayerKind::Flange(vs) => vs.flange_contains(p).then_some(Material::Flange),
                LayerKind::Stem(vs) => vs.stem_contains(p).then_some(Material::Stem),
            };
            if let Some(m) = hit {
                return m;
            }
        }
        Material::Background
    }
}

fn intensity(m: Material, o: &RenderOptions) -> f64 {
    match m {
        Material::Background => o.background as f64,
        Material::Wrench => o.wrench as f64,
        Material::Flange => o.flange as f64,
        Material::Stem => o.stem as f64,
    }
}

/// Renders one panel face as seen by `camera`. Pixels whose material
/// differs from a 4-neighbour are supersampled; illumination ramp and noise
/// are drawn from `seed`.
pub fn render_panel_image(
    scene: &PanelSceneSpec,
    side: PanelSide,
    camera: &PinholeCamera,
    size: (usize, usize),
    options: &RenderOptions,
    seed: u64,
) -> Result<RasterImage> {
    let (w, h) = size;
    let model = FaceModel::new(scene, side, camera)?;
    let mut mats = vec![Material::Background; w * h];
    for y in 0..h {
        for x in 0..w {
            mats[y * w + x] = model.material(camera, x as f64, y as f64);
        }
    }
    let ss = options.supersample.max(1);
    let mut rng = seed::rng(seed);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, options.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let m = mats[y * w + x];
            let boundary = (x > 0 && mats[y * w + x - 1] != m)
                || (x + 1 < w && mats[y * w + x + 1] != m)
                || (y > 0 && mats[(y - 1) * w + x] != m)
                || (y + 1 < h && mats[(y + 1) * w + x] != m);
            let mut val = if boundary && ss > 1 {
                let mut acc = 0.0;
                for j in 0..ss {
                    for i in 0..ss {
                        let du = (i as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (j as f64 + 0.5) / ss as f64 - 0.5;
                        acc += intensity(model.material(camera, x as f64 + du, y as f64 + dv), options);
                    }
                }
                acc / (ss * ss) as f64
            } else {
                intensity(m, options)
            };
            if options.gradient != 0.0 {
                let s = (x as f64 / w as f64 - 0.5) * phi.cos() + (y as f64 / h as f64 - 0.5) * phi.sin();
                val += options.gradient * s;
            }
            if options.noise_sigma > 0.0 {
                val += noise.sample(&mut rng);
            }
            data.push(val.round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::from_vec(w, h, data)
}

fn project_bbox(camera: &PinholeCamera, pts: impl Iterator<Item = Vec3>) -> Option<BBox> {
    let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        let q = camera.project(p)?;
        lo_u = lo_u.min(q.x);
        hi_u = hi_u.max(q.x);
        lo_v = lo_v.min(q.y);
        hi_v = hi_v.max(q.y);
    }
    let (x0, y0) = (lo_u.ceil() as i32, lo_v.ceil() as i32);
    let (x1, y1) = (hi_u.floor() as i32, hi_v.floor() as i32);
    (x1 >= x0 && y1 >= y0).then(|| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

fn circle_points(c: Point2, r: f64, z: f64) -> impl Iterator<Item = Vec3> {
    (0..360).map(move |k| {
        let t = (k as f64).to_radians();
        Vec3::new(c.x + r * t.cos(), c.y + r * t.sin(), z)
    })
}

/// Pixel box of the pixels whose centers fall on wrench `i`'s head disk.
pub fn head_bbox_truth(scene: &PanelSceneSpec, i: usize, camera: &PinholeCamera) -> Option<BBox> {
    let w = &scene.wrenches[i];
    let (c, _, _) = w.frame();
    project_bbox(camera, circle_points(c, w.head_radius_mm() / 1000.0, scene.standoff_m()))
}

/// Pixel box around the valve flange, grown by `margin` (fraction of size).
pub fn valve_roi(scene: &PanelSceneSpec, camera: &PinholeCamera, margin: f64) -> Option<BBox> {
    let v = &scene.valve;
    let b = project_bbox(camera, circle_points(v.center(), v.flange_diameter_mm / 2000.0, 0.0))?;
    Some(b.inflate((b.w.max(b.h) as f64 * margin).round() as i32))
}

/// The face-frame region seen through the pixel box, on the plane `Z = z`.
fn bbox_footprint(camera: &PinholeCamera, bbox: &BBox, z: f64) -> Option<[Point2; 4]> {
    let (x0, y0) = (bbox.x as f64 - 0.5, bbox.y as f64 - 0.5);
    let (x1, y1) = (bbox.right() as f64 - 0.5, bbox.bottom() as f64 - 0.5);
    let eye = camera.center();
    let mut out = [Point2::default(); 4];
    for (k, (u, v)) in [(x0, y0), (x1, y0), (x1, y1), (x0, y1)].into_iter().enumerate() {
        let d = camera.pose.apply_vector(camera.ray(Point2::new(u, v)));
        let t = (z - eye.z) / d.z;
        if !(t > 0.0) {
            return None;
        }
        out[k] = Point2::new(eye.x + t * d.x, eye.y + t * d.y);
    }
    Some(out)
}

fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland–Hodgman clip of `subject` by the convex polygon `clip`.
fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut clip = clip.to_vec();
    if signed_area(&clip) < 0.0 {
        clip.reverse();
    }
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: Point2| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push(Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
            }
        }
        if out.is_empty() {
            break;
        }
    }
    out
}

fn polygon_centroid(poly: &[Point2]) -> Option<Point2> {
    let a = signed_area(poly);
    if a.abs() < 1e-15 {
        return None;
    }
    let n = poly.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let k = p.x * q.y - q.x * p.y;
        cx += (p.x + q.x) * k;
        cy += (p.y + q.y) * k;
    }
    Some(Point2::new(cx / (6.0 * a), cy / (6.0 * a)))
}

/// Face-frame centroid of the part of wrench `i`'s handle seen through the
/// pixel box `handle_bbox`: the reference for the grasp point.
pub fn handle_centroid_truth(scene: &PanelSceneSpec, i: usize, camera: &PinholeCamera, handle_bbox: &BBox) -> Option<Vec3> {
    let z = scene.standoff_m();
    let foot = bbox_footprint(camera, handle_bbox, z)?;
    let clipped = clip_convex(&scene.wrenches[i].handle_polygon(), &foot);
    if clipped.len() < 3 {
        return None;
    }
    polygon_centroid(&clipped).map(|c| Vec3::new(c.x, c.y, z))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub points: usize,
    /// Gaussian depth noise along the viewing ray, meters.
    pub noise_sigma_m: f64,
    /// Fraction of points placed on the panel face behind the handle.
    pub outlier_fraction: f64,
}

impl Default for CloudSpec {
    fn default() -> Self {
        CloudSpec { points: 2000, noise_sigma_m: 0.002, outlier_fraction: 0.2 }
    }
}

/// Camera-frame point cloud of wrench `i`'s handle: `points − ⌊f·points⌋`
/// samples on the handle surface with depth noise, followed by `⌊f·points⌋`
/// samples on the panel face inside the region seen through `handle_bbox`.
pub fn synthesize_handle_cloud(
    scene: &PanelSceneSpec,
    i: usize,
    camera: &PinholeCamera,
    handle_bbox: &BBox,
    spec: &CloudSpec,
    seed: u64,
) -> Result<Vec<Vec3>> {
    if !(0.0..0.5).contains(&spec.outlier_fraction) {
        return Err(Error::Config(format!("outlier fraction must be in [0, 0.5), got {}", spec.outlier_fraction)));
    }
    let w = scene
        .wrenches
        .get(i)
        .ok_or_else(|| Error::Config(format!("no wrench with index {i}")))?;
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, spec.noise_sigma_m.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let n_out = (spec.outlier_fraction * spec.points as f64).floor() as usize;
    let n_in = spec.points - n_out;
    let poly = w.handle_polygon();
    let z = scene.standoff_m();
    let to_cam = camera.pose.inverse();
    let mut out = Vec::with_capacity(spec.points);
    for _ in 0..n_in {
        let (s, t): (f64, f64) = (rng.random(), rng.random());
        // bilinear point in the rectangle
        let a = Point2::new(poly[0].x + (poly[1].x - poly[0].x) * s, poly[0].y + (poly[1].y - poly[0].y) * s);
        let b = Point2::new(poly[3].x + (poly[2].x - poly[3].x) * s, poly[3].y + (poly[2].y - poly[3].y) * s);
        let p = Point2::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
        let mut q = to_cam.apply(Vec3::new(p.x, p.y, z));
        if spec.noise_sigma_m > 0.0 {
            let dz = noise.sample(&mut rng);
            q = q * ((q.z + dz) / q.z);
        }
        out.push(q);
    }
    let foot = bbox_footprint(camera, handle_bbox, 0.0)
        .ok_or_else(|| Error::Config("handle box does not see the panel face".into()))?;
    for _ in 0..n_out {
        let (s, t): (f64, f64) = (rng.random(), rng.random());
        let a = Point2::new(foot[0].x + (foot[1].x - foot[0].x) * s, foot[0].y + (foot[1].y - foot[0].y) * s);
        let b = Point2::new(foot[3].x + (foot[2].x - foot[3].x) * s, foot[3].y + (foot[2].y - foot[3].y) * s);
        let p = Point2::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
        out.push(to_cam.apply(Vec3::new(p.x, p.y, 0.0)));
    }
    Ok(out)
}

/// Analytic area (m²) of a wrench silhouette, by fine grid integration.
pub fn wrench_silhouette_area(w: &WrenchSpec, step_m: f64) -> f64 {
    let (c, r) = w.extent();
    let n = (2.0 * r / step_m).ceil() as i64;
    let mut count = 0u64;
    for j in 0..n {
        for i in 0..n {
            let p = Point2::new(c.x - r + (i as f64 + 0.5) * step_m, c.y - r + (j as f64 + 0.5) * step_m);
            if w.contains(p) {
                count += 1;
            }
        }
    }
    count as f64 * step_m * step_m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::otsu_threshold;

    fn valve() -> ValveSpec {
        ValveSpec { stem_edge_mm: 32.0, flange_diameter_mm: 90.0, stem_height_mm: 40.0, x_mm: 600.0, y_mm: 0.0, stem_angle_deg: 0.0 }
    }

    fn scene_one(w: WrenchSpec) -> PanelSceneSpec {
        PanelSceneSpec {
            wrench_side: PanelSide::Front,
            wrench_standoff_mm: 40.0,
            target_jaw_mm: 24.0,
            target_index: 0,
            backup_index: 1,
            wrenches: vec![w],
            valve: valve(),
        }
    }

    fn wrench() -> WrenchSpec {
        WrenchSpec { jaw_mm: 24.0, handle_length_mm: 110.0, x_mm: 0.0, y_mm: 0.0, orientation_deg: -90.0 }
    }

    #[test]
    fn camera_behind_face_is_rejected() {
        let s = scene_one(wrench());
        let cam = Intrinsics::default().face_camera(Vec3::new(0.0, 0.0, -0.5)).unwrap();
        let r = render_panel_image(&s, PanelSide::Front, &cam, (64, 48), &RenderOptions::noiseless(), 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn empty_scene_shows_background_and_valve_only() {
        let mut s = scene_one(wrench());
        s.wrenches.clear();
        let intr = Intrinsics::default();
        let cam = intr.face_camera(Vec3::new(0.0, 0.05, 0.64)).unwrap();
        let img = render_panel_image(&s, PanelSide::Front, &cam, (intr.width, intr.height), &RenderOptions::noiseless(), 1).unwrap();
        let o = RenderOptions::noiseless();
        // no wrench-coloured interior pixels anywhere left of the valve
        let roi = valve_roi(&s, &cam, 0.0).unwrap();
        for y in 0..intr.height {
            for x in 0..(roi.x.clamp(0, intr.width as i32) as usize) {
                assert_eq!(img.get(x, y), o.background);
            }
        }
    }

    #[test]
    fn otsu_recovers_wrench_area() {
        let w = wrench();
        let s = scene_one(w);
        let intr = Intrinsics::default();
        let depth = 0.6;
        let cam = intr.face_camera(Vec3::new(0.0, 0.05, depth + s.standoff_m())).unwrap();
        let img = render_panel_image(&s, PanelSide::Front, &cam, (intr.width, intr.height), &RenderOptions::noiseless(), 1).unwrap();
        // valve out of view at this position
        let (_, bin) = otsu_threshold(&img);
        let px_area = (depth / intr.fx).powi(2);
        let measured = bin.inverted().count() as f64 * px_area;
        let analytic = wrench_silhouette_area(&w, 1e-5);
        assert!((measured - analytic).abs() / analytic < 0.02, "{measured} vs {analytic}");
    }

    #[test]
    fn seeds_change_pixels_not_centroids() {
        let s = scene_one(wrench());
        let intr = Intrinsics { width: 300, height: 300, ..Intrinsics::default() };
        let cam = intr.face_camera(Vec3::new(0.0, 0.05, 0.64)).unwrap();
        let o = RenderOptions::default();
        let a = render_panel_image(&s, PanelSide::Front, &cam, (300, 300), &o, 1).unwrap();
        let b = render_panel_image(&s, PanelSide::Front, &cam, (300, 300), &o, 2).unwrap();
        assert_ne!(a, b);
        let centroid = |img: &RasterImage| {
            let (_, bin) = otsu_threshold(img);
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..300 {
                for x in 0..300 {
                    if !bin.get(x, y) {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1.0;
                    }
                }
            }
            (sx / n, sy / n)
        };
        let (ca, cb) = (centroid(&a), centroid(&b));
        assert!((ca.0 - cb.0).abs() < 1.0 && (ca.1 - cb.1).abs() < 1.0);
    }

    #[test]
    fn aperture_in_pixels_matches_jaw() {
        let w = wrench();
        let s = scene_one(w);
        let intr = Intrinsics::default();
        let depth = 0.6;
        let cam = intr.face_camera(Vec3::new(0.0, 0.0, depth + s.standoff_m())).unwrap();
        let [a, b, _] = w.jaw_triangle();
        let z = s.standoff_m();
        let pa = cam.project(Vec3::new(a.x, a.y, z)).unwrap();
        let pb = cam.project(Vec3::new(b.x, b.y, z)).unwrap();
        assert!((pa.distance(pb) - w.jaw_mm / 1000.0 * intr.fx / depth).abs() < 1.0);
    }

    #[test]
    fn cloud_outlier_count_and_plane() {
        let s = scene_one(wrench());
        let intr = Intrinsics::default();
        let cam = intr.face_camera(Vec3::new(0.0, 0.05, 0.64)).unwrap();
        let head = head_bbox_truth(&s, 0, &cam).unwrap();
        let hb = BBox::new(head.x, head.y - 2 * head.h, head.w, 2 * head.h);
        let spec = CloudSpec { points: 1000, noise_sigma_m: 0.0, outlier_fraction: 0.2 };
        let cloud = synthesize_handle_cloud(&s, 0, &cam, &hb, &spec, 3).unwrap();
        assert_eq!(cloud.len(), 1000);
        let plane_z = 0.64 - 0.04;
        let on_plane = cloud.iter().filter(|p| (p.z - plane_z).abs() < 1e-9).count();
        let on_panel = cloud.iter().filter(|p| (p.z - 0.64).abs() < 1e-9).count();
        assert_eq!(on_panel, 200);
        assert_eq!(on_plane, 800);
        let bad = CloudSpec { outlier_fraction: 0.5, ..spec };
        assert!(synthesize_handle_cloud(&s, 0, &cam, &hb, &bad, 3).is_err());
    }

    #[test]
    fn clip_square_by_square() {
        let a = [Point2::new(0.0, 0.0), Point2::new(2.0, 0.0), Point2::new(2.0, 2.0), Point2::new(0.0, 2.0)];
        let b = [Point2::new(1.0, 1.0), Point2::new(3.0, 1.0), Point2::new(3.0, 3.0), Point2::new(1.0, 3.0)];
        let c = clip_convex(&a, &b);
        assert!((signed_area(&c).abs() - 1.0).abs() < 1e-12);
        let m = polygon_centroid(&c).unwrap();
        assert!((m.x - 1.5).abs() < 1e-12 && (m.y - 1.5).abs() < 1e-12);
    }
}
