//! Closed-form geometry: PCA bounding boxes, line/plane angles, ray casting
//! and sparse stereo triangulation.
//!
//! Angles cross public boundaries in degrees; radians are used internally.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector, or `None` for a (near) zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-300 && n.is_finite()).then(|| self / n)
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    /// Some unit vector orthogonal to `self` (which must be non-zero).
    pub fn any_orthogonal(self) -> Vec3 {
        let helper = if self.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        self.cross(helper).normalized().unwrap_or(Vec3::Z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// A pixel or planar point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn distance(self, o: Point2) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }

    pub fn midpoint(self, o: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + o.x), 0.5 * (self.y + o.y))
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3([r0.to_array(), r1.to_array(), r2.to_array()])
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Mat3::from_rows(c0, c1, c2).transpose()
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Mat3([[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.0[i])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.0[0][j], self.0[1][j], self.0[2][j])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn det(&self) -> f64 {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.0[i][j] - o.0[i][j]).abs());
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs_diff(&Mat3::ZERO)
    }

    /// Rotation about +z by `deg` degrees.
    pub fn rot_z(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn rot_x(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_y(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    fn outer(a: Vec3, b: Vec3) -> Mat3 {
        let (a, b) = (a.to_array(), b.to_array());
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = a[i] * b[j];
            }
        }
        Mat3(out)
    }

    fn add_scaled(&mut self, o: &Mat3, s: f64) {
        for i in 0..3 {
            for j in 0..3 {
                self.0[i][j] += s * o.0[i][j];
            }
        }
    }
}

/// Plane `a·x + b·y + c·z + d = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Plane {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Plane { a, b, c, d }
    }

    pub fn from_point_normal(point: Vec3, normal: Vec3) -> Result<Self> {
        let n = normal
            .normalized()
            .ok_or_else(|| Error::ContractViolation("zero plane normal".into()))?;
        Ok(Plane::new(n.x, n.y, n.z, -n.dot(point)))
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::new(self.a, self.b, self.c)
    }

    /// Rescales so that the normal has unit length.
    pub fn normalize(&self) -> Result<Plane> {
        let n = self.normal().norm();
        if n <= 1e-300 || !n.is_finite() || !self.d.is_finite() {
            return Err(Error::ContractViolation("plane normal has zero length".into()));
        }
        Ok(Plane::new(self.a / n, self.b / n, self.c / n, self.d / n))
    }

    /// Raw residual `a·x + b·y + c·z + d`.
    pub fn residual(&self, p: Vec3) -> f64 {
        self.a * p.x + self.b * p.y + self.c * p.z + self.d
    }

    /// Euclidean signed distance (normal need not be unit).
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.residual(p) / self.normal().norm()
    }

    pub fn project(&self, p: Vec3) -> Vec3 {
        let n = self.normal();
        p - n * (self.residual(p) / n.dot(n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line3 {
    pub point: Vec3,
    /// Unit direction.
    pub direction: Vec3,
}

impl Line3 {
    pub fn new(point: Vec3, direction: Vec3) -> Result<Self> {
        let direction = direction
            .normalized()
            .ok_or_else(|| Error::ContractViolation("zero line direction".into()))?;
        Ok(Line3 { point, direction })
    }

    pub fn through(a: Vec3, b: Vec3) -> Result<Self> {
        Line3::new(a, b - a)
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        (p - self.point).cross(self.direction).norm()
    }

    /// Intersection with a plane, `None` when parallel.
    pub fn intersect_plane(&self, plane: &Plane) -> Option<Vec3> {
        let denom = plane.normal().dot(self.direction);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = -plane.residual(self.point) / denom;
        Some(self.point + self.direction * t)
    }
}

/// `p ↦ rotation·p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        self.rotation.mul_vec(v)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -rt.mul_vec(self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation.mul_mat(&other.rotation),
            self.apply(other.translation),
        )
    }

    /// Planar pose `(x, y, heading)` lifted to 3D (rotation about z).
    pub fn from_pose2(x: f64, y: f64, heading_deg: f64) -> RigidTransform {
        RigidTransform::new(Mat3::rot_z(heading_deg), Vec3::new(x, y, 0.0))
    }

    /// Max deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        self.rotation
            .transpose()
            .mul_mat(&self.rotation)
            .max_abs_diff(&Mat3::IDENTITY)
    }
}

/// Side lengths of an oriented bounding box along its own axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObbExtent {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl ObbExtent {
    /// Extents in descending order.
    pub fn sorted_desc(&self) -> [f64; 3] {
        let mut e = [self.sx, self.sy, self.sz];
        e.sort_by(|a, b| b.total_cmp(a));
        e
    }
}

/// Pinhole camera; `pose` maps camera coordinates (x right, y down, z
/// forward) to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: RigidTransform,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, pose: RigidTransform) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive (fx={fx}, fy={fy})")));
        }
        Ok(PinholeCamera { fx, fy, cx, cy, pose })
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.pose.inverse().apply(p)
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        self.pose.apply(p)
    }

    /// Projects a camera-frame point; `None` when not in front of the camera.
    pub fn project_camera(&self, p: Vec3) -> Option<Point2> {
        (p.z > 1e-12).then(|| {
            Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
        })
    }

    pub fn project(&self, world: Vec3) -> Option<Point2> {
        self.project_camera(self.world_to_camera(world))
    }

    /// Ray coefficients `(x_ray, y_ray, 1)` of a pixel, camera frame.
    pub fn ray(&self, pixel: Point2) -> Vec3 {
        Vec3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }
}

/// Rectified stereo pair: identical intrinsics and orientation, right camera
/// displaced by `baseline` along the left camera's x axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub left: PinholeCamera,
    pub right: PinholeCamera,
    pub baseline: f64,
}

impl StereoRig {
    pub fn rectified(left: PinholeCamera, baseline: f64) -> Result<Self> {
        if !(baseline > 0.0) {
            return Err(Error::Config(format!("baseline must be positive, got {baseline}")));
        }
        let mut right = left;
        right.pose.translation = left.pose.apply(Vec3::new(baseline, 0.0, 0.0));
        Ok(StereoRig { left, right, baseline })
    }
}

/// Mean and covariance with the `1/(N−1)` normalization.
pub fn mean_and_covariance(points: &[Vec3]) -> Result<(Vec3, Mat3)> {
    let n = points.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("covariance needs at least 2 points, got {n}")));
    }
    let mut mean = Vec3::ZERO;
    for p in points {
        mean += *p;
    }
    mean = mean / n as f64;
    let mut cov = Mat3::ZERO;
    for p in points {
        let d = *p - mean;
        cov.add_scaled(&Mat3::outer(d, d), 1.0);
    }
    let inv = 1.0 / (n as f64 - 1.0);
    for row in cov.0.iter_mut() {
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok((mean, cov))
}

/// Eigenpair of a symmetric matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec3,
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Eigenvalues are returned in descending order with unit eigenvectors.
pub fn principal_components(cov: &Mat3) -> Result<[Eigenpair; 3]> {
    let scale = cov.max_abs().max(1.0);
    for i in 0..3 {
        for j in (i + 1)..3 {
            if (cov.0[i][j] - cov.0[j][i]).abs() > 1e-9 * scale {
                return Err(Error::ContractViolation(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    cov.0[i][j], cov.0[j][i]
                )));
            }
        }
    }
    if !cov.0.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::ContractViolation("matrix has non-finite entries".into()));
    }

    let mut a = cov.0;
    // symmetrize exactly
    for i in 0..3 {
        for j in (i + 1)..3 {
            let m = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = m;
            a[j][i] = m;
        }
    }
    let mut v = Mat3::IDENTITY.0;
    for _sweep in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        let diag = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if off <= f64::EPSILON * 1e-3 * diag.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J with J the (p,q) Givens rotation
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vkp = row[p];
                let vkq = row[q];
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
    }
    let vm = Mat3(v);
    let mut pairs: Vec<Eigenpair> = (0..3)
        .map(|i| Eigenpair {
            value: a[i][i],
            vector: vm.col(i).normalized().unwrap_or(Vec3::ZERO),
        })
        .collect();
    pairs.sort_by(|x, y| y.value.total_cmp(&x.value));
    Ok([pairs[0], pairs[1], pairs[2]])
}

/// PCA oriented bounding box of a cluster.
///
/// The returned transform has the principal axes as rotation rows and
/// translation `−E·μ`, so it maps world points into the box frame. When two
/// or three eigenvalues coincide the principal axes are not unique; the
/// free axes are then chosen to minimize the box area (or volume) so that
/// the extents remain well defined.
pub fn obb_of_cluster(points: &[Vec3]) -> Result<(RigidTransform, ObbExtent)> {
    let (mean, cov) = mean_and_covariance(points)?;
    let pcs = principal_components(&cov)?;
    let mut axes = [pcs[0].vector, pcs[1].vector, pcs[2].vector];
    let lam = [pcs[0].value, pcs[1].value, pcs[2].value];
    let tie_tol = 1e-9 * lam[0].abs().max(1e-300);
    let tie01 = lam[0] > 1e-300 && (lam[0] - lam[1]).abs() <= tie_tol;
    let tie12 = lam[0] > 1e-300 && (lam[1] - lam[2]).abs() <= tie_tol;

    let centered: Vec<Vec3> = points.iter().map(|p| *p - mean).collect();
    if tie01 && tie12 {
        if let Some(a) = min_volume_axes(&centered) {
            axes = a;
        }
    } else if tie01 {
        if let Some((u, v)) = min_area_axes(&centered, axes[0], axes[1]) {
            axes[0] = u;
            axes[1] = v;
        }
    } else if tie12 {
        if let Some((u, v)) = min_area_axes(&centered, axes[1], axes[2]) {
            axes[1] = u;
            axes[2] = v;
        }
    }

    let mut rot = Mat3::from_rows(axes[0], axes[1], axes[2]);
    if rot.det() < 0.0 {
        axes[2] = -axes[2];
        rot = Mat3::from_rows(axes[0], axes[1], axes[2]);
    }
    let transform = RigidTransform::new(rot, -rot.mul_vec(mean));
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let q = transform.apply(*p).to_array();
        for k in 0..3 {
            lo[k] = lo[k].min(q[k]);
            hi[k] = hi[k].max(q[k]);
        }
    }
    Ok((
        transform,
        ObbExtent {
            sx: (hi[0] - lo[0]).abs(),
            sy: (hi[1] - lo[1]).abs(),
            sz: (hi[2] - lo[2]).abs(),
        },
    ))
}

/// In-plane axes (spanned by `u`, `v`) of the minimum-area rectangle
/// enclosing the projected points. Larger extent first.
fn min_area_axes(points: &[Vec3], u: Vec3, v: Vec3) -> Option<(Vec3, Vec3)> {
    let projected: Vec<Point2> = points.iter().map(|p| Point2::new(p.dot(u), p.dot(v))).collect();
    let (dir, extents) = min_area_rectangle(&projected)?;
    let a = u * dir.0 + v * dir.1;
    let b = u * -dir.1 + v * dir.0;
    if extents.0 >= extents.1 {
        Some((a, b))
    } else {
        Some((b, a))
    }
}

/// Minimum-area enclosing rectangle by rotating calipers over hull edges.
/// Returns the unit direction of one rectangle side and the extents along
/// (side, normal).
pub(crate) fn min_area_rectangle(points: &[Point2]) -> Option<((f64, f64), (f64, f64))> {
    type Fit = (f64, (f64, f64), (f64, f64));
    let hull = crate::vision::convex_hull(points).ok()?;
    let mut best: Option<Fit> = None;
    for i in 0..hull.len() {
        let p = hull[i];
        let q = hull[(i + 1) % hull.len()];
        let len = p.distance(q);
        if len < 1e-15 {
            continue;
        }
        let d = ((q.x - p.x) / len, (q.y - p.y) / len);
        let (mut lo_a, mut hi_a, mut lo_b, mut hi_b) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for h in &hull {
            let a = h.x * d.0 + h.y * d.1;
            let b = -h.x * d.1 + h.y * d.0;
            lo_a = lo_a.min(a);
            hi_a = hi_a.max(a);
            lo_b = lo_b.min(b);
            hi_b = hi_b.max(b);
        }
        let area = (hi_a - lo_a) * (hi_b - lo_b);
        if best.as_ref().is_none_or(|b| area < b.0 - 1e-15) {
            best = Some((area, d, (hi_a - lo_a, hi_b - lo_b)));
        }
    }
    best.map(|(_, d, e)| (d, e))
}

/// Fully isotropic covariance: search axis candidates from point differences
/// and keep the minimum-volume box.
fn min_volume_axes(points: &[Vec3]) -> Option<[Vec3; 3]> {
    const MAX_POINTS: usize = 48;
    let sample: Vec<Vec3> = if points.len() <= MAX_POINTS {
        points.to_vec()
    } else {
        let step = points.len() as f64 / MAX_POINTS as f64;
        (0..MAX_POINTS).map(|i| points[(i as f64 * step) as usize]).collect()
    };
    let mut best: Option<(f64, [Vec3; 3])> = None;
    for i in 0..sample.len() {
        for j in (i + 1)..sample.len() {
            let Some(a) = (sample[j] - sample[i]).normalized() else {
                continue;
            };
            let b0 = a.any_orthogonal();
            let c0 = a.cross(b0);
            let Some((b, c)) = min_area_axes(points, b0, c0) else {
                continue;
            };
            let axes = [a, b, c];
            let vol: f64 = axes
                .iter()
                .map(|ax| {
                    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        let s = p.dot(*ax);
                        (lo.min(s), hi.max(s))
                    });
                    hi - lo
                })
                .product();
            if best.as_ref().is_none_or(|b| vol < b.0 * (1.0 - 1e-12)) {
                best = Some((vol, axes));
            }
        }
    }
    best.map(|(_, mut axes)| {
        // larger extents first, like the PCA ordering
        axes.sort_by(|x, y| {
            let ext = |ax: &Vec3| {
                let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let s = p.dot(*ax);
                    (lo.min(s), hi.max(s))
                });
                hi - lo
            };
            ext(y).total_cmp(&ext(x))
        });
        axes
    })
}

/// Docking angle between a line and a plane in degrees, in `[0, 90]`.
///
/// Evaluates the normalized dot product of the plane normal `(A, B, C)` and
/// the line direction `(a, b, c)` and returns its arccosine, i.e. the angle
/// between the line and the plane normal. A line along the normal gives 0°,
/// a line lying in the plane gives 90°.
pub fn line_plane_angle(line: &Line3, plane: &Plane) -> Result<f64> {
    let n = plane.normal();
    let d = line.direction;
    let (nn, dn) = (n.norm(), d.norm());
    if nn <= 1e-300 || dn <= 1e-300 {
        return Err(Error::ContractViolation("zero-length line direction or plane normal".into()));
    }
    let cos = (n.dot(d) / (nn * dn)).abs().min(1.0);
    Ok(cos.acos().to_degrees())
}

/// Back-projects `pixel` and intersects the ray with `plane`, both in the
/// camera frame: `t = −D / (A·x_ray + B·y_ray + C)`, point `(t·x_ray, t·y_ray, t)`.
pub fn ray_plane_intersection(pixel: Point2, camera: &PinholeCamera, plane: &Plane) -> Result<Vec3> {
    let ray = camera.ray(pixel);
    let denom = plane.a * ray.x + plane.b * ray.y + plane.c;
    if denom.abs() <= 1e-12 {
        return Err(Error::NoIntersection("ray is parallel to the plane".into()));
    }
    let t = -plane.d / denom;
    if t <= 0.0 {
        return Err(Error::NoIntersection(format!("plane lies behind the camera (t = {t})")));
    }
    Ok(Vec3::new(t * ray.x, t * ray.y, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AngleFold {
    /// Full-quadrant angle in (−180, 180].
    Full,
    /// Folded into [0, 90), for shapes with four-fold symmetry.
    Quarter,
}

/// Angle of the line through two image points, `atan((v₂−v₁)/(u₂−u₁))` with
/// quadrant resolution, in degrees.
pub fn two_point_angle(from: Point2, to: Point2, fold: AngleFold) -> Result<f64> {
    let du = to.x - from.x;
    let dv = to.y - from.y;
    if du.abs() < 1e-12 && dv.abs() < 1e-12 {
        return Err(Error::DegenerateInput("coincident points have no angle".into()));
    }
    let deg = dv.atan2(du).to_degrees();
    Ok(match fold {
        AngleFold::Full => {
            if deg <= -180.0 {
                deg + 360.0
            } else {
                deg
            }
        }
        AngleFold::Quarter => fold_quarter(deg),
    })
}

/// `deg` reduced modulo 90 into [0, 90).
pub fn fold_quarter(deg: f64) -> f64 {
    let r = deg.rem_euclid(90.0);
    if r >= 90.0 - 1e-12 {
        0.0
    } else {
        r
    }
}

/// Wraps into (−180, 180].
pub fn wrap_deg(deg: f64) -> f64 {
    let r = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if r <= -180.0 {
        r + 360.0
    } else {
        r
    }
}

/// Distance between two angles modulo `period` degrees.
pub fn angular_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Stereo triangulation: midpoint of the common perpendicular of the two
/// back-projected rays, world frame.
pub fn triangulate(left: Point2, right: Point2, rig: &StereoRig) -> Result<Vec3> {
    let disparity = left.x - right.x;
    if disparity <= 0.0 {
        return Err(Error::BehindCamera(format!("non-positive disparity {disparity:.4} px")));
    }
    let o1 = rig.left.center();
    let o2 = rig.right.center();
    let d1 = rig.left.pose.apply_vector(rig.left.ray(left));
    let d2 = rig.right.pose.apply_vector(rig.right.ray(right));
    let w0 = o1 - o2;
    let a = d1.dot(d1);
    let b = d1.dot(d2);
    let c = d2.dot(d2);
    let d = d1.dot(w0);
    let e = d2.dot(w0);
    let denom = a * c - b * b;
    if denom.abs() < 1e-15 {
        return Err(Error::DegenerateInput("stereo rays are parallel".into()));
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    if s <= 0.0 || t <= 0.0 {
        return Err(Error::BehindCamera("triangulated point is behind the rig".into()));
    }
    let p1 = o1 + d1 * s;
    let p2 = o2 + d2 * t;
    Ok((p1 + p2) * 0.5)
}

/// Least-squares plane through points (normal = smallest principal axis).
pub fn fit_plane(points: &[Vec3]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!("plane fit needs 3 points, got {}", points.len())));
    }
    let (mean, cov) = mean_and_covariance(points)?;
    let pcs = principal_components(&cov)?;
    Plane::from_point_normal(mean, pcs[2].vector)
}

/// Least-squares line through points (direction = largest principal axis).
pub fn fit_line(points: &[Vec3]) -> Result<Line3> {
    let (mean, cov) = mean_and_covariance(points)?;
    let pcs = principal_components(&cov)?;
    if pcs[0].value <= 0.0 {
        return Err(Error::DegenerateInput("all points coincide".into()));
    }
    Line3::new(mean, pcs[0].vector)
}

pub fn centroid(points: &[Vec3]) -> Option<Vec3> {
    if points.is_empty() {
        return None;
    }
    let mut s = Vec3::ZERO;
    for p in points {
        s += *p;
    }
    Some(s / points.len() as f64)
}
