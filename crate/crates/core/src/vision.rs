//! Classical image primitives: Otsu thresholding, border following, convex
//! hulls and convexity defects, Canny edges, the progressive probabilistic
//! Hough transform and local binary patterns.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::image::{BinaryImage, RasterImage};
use crate::seed;

/// Otsu threshold over the 256-bin histogram. Pixels `> threshold` are
/// foreground. Ties in between-class variance resolve to the lowest
/// threshold.
pub fn otsu_threshold(image: &RasterImage) -> (u8, BinaryImage) {
    let mut hist = [0u64; 256];
    for v in &image.data {
        hist[*v as usize] += 1;
    }
    let t = otsu_from_histogram(&hist);
    let mut bin = BinaryImage::new(image.width, image.height);
    for (b, v) in bin.bits.iter_mut().zip(&image.data) {
        *b = *v > t;
    }
    (t, bin)
}

/// Between-class variance (scaled by N²) of splitting at `t`: classes
/// `≤ t` and `> t`.
pub fn between_class_variance(hist: &[u64; 256], t: usize) -> f64 {
    let (mut w0, mut s0, mut w1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (v, &c) in hist.iter().enumerate() {
        let c = c as f64;
        if v <= t {
            w0 += c;
            s0 += c * v as f64;
        } else {
            w1 += c;
            s1 += c * v as f64;
        }
    }
    if w0 == 0.0 || w1 == 0.0 {
        return 0.0;
    }
    let d = s0 / w0 - s1 / w1;
    w0 * w1 * d * d
}

fn otsu_from_histogram(hist: &[u64; 256]) -> u8 {
    let total: f64 = hist.iter().map(|c| *c as f64).sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(v, c)| v as f64 * *c as f64).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best_t = 0u8;
    let mut best = -1.0;
    for t in 0..256 {
        w0 += hist[t] as f64;
        s0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        let var = if w0 == 0.0 || w1 == 0.0 {
            0.0
        } else {
            let d = s0 / w0 - (sum_all - s0) / w1;
            w0 * w1 * d * d
        };
        // relative tolerance so that equal variances computed along
        // different summation orders still count as ties
        if var > best * (1.0 + 1e-12) + 1e-9 {
            best = var;
            best_t = t as u8;
        }
    }
    best_t
}

/// A traced border.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contour {
    /// Ordered 8-connected border pixels `(x, y)`.
    pub points: Vec<(i32, i32)>,
    pub is_hole: bool,
    /// Index of the enclosing border in the returned list.
    pub parent: Option<usize>,
}

impl Contour {
    pub fn as_points(&self) -> Vec<Point2> {
        self.points.iter().map(|&(x, y)| Point2::new(x as f64, y as f64)).collect()
    }

    /// Shoelace area of the contour polygon (absolute value).
    pub fn polygon_area(&self) -> f64 {
        let n = self.points.len();
        if n < 3 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            let (x0, y0) = self.points[i];
            let (x1, y1) = self.points[(i + 1) % n];
            s += x0 as f64 * y1 as f64 - x1 as f64 * y0 as f64;
        }
        0.5 * s.abs()
    }
}

// Clockwise neighbourhood (y down): E, SE, S, SW, W, NW, N, NE.
const DIRS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

fn dir_index(from: (i64, i64), to: (i64, i64)) -> usize {
    let d = (to.0 - from.0, to.1 - from.1);
    DIRS.iter().position(|&x| x == d).expect("pixels are not 8-neighbours")
}

/// Suzuki–Abe topological border following. Returns outer borders and hole
/// borders with their parent links.
pub fn trace_contours(binary: &BinaryImage) -> Vec<Contour> {
    let w = binary.width as i64 + 2;
    let h = binary.height as i64 + 2;
    let mut f = vec![0i32; (w * h) as usize];
    for y in 0..binary.height {
        for x in 0..binary.width {
            if binary.get(x, y) {
                f[((y as i64 + 1) * w + x as i64 + 1) as usize] = 1;
            }
        }
    }
    let at = |x: i64, y: i64| (y * w + x) as usize;

    let mut contours: Vec<Contour> = Vec::new();
    // border NBD → index in `contours`; NBD 1 is the frame
    let mut nbd_index: Vec<Option<usize>> = vec![None, None];
    let mut nbd: i32 = 1;

    for y in 1..h - 1 {
        let mut lnbd: i32 = 1;
        for x in 1..w - 1 {
            let v = f[at(x, y)];
            if v == 0 {
                continue;
            }
            let start = if v == 1 && f[at(x - 1, y)] == 0 {
                Some((false, (x - 1, y)))
            } else if v >= 1 && f[at(x + 1, y)] == 0 {
                if v > 1 {
                    lnbd = v;
                }
                Some((true, (x + 1, y)))
            } else {
                None
            };

            if let Some((is_hole, from)) = start {
                nbd += 1;
                let parent_border = nbd_index.get(lnbd as usize).copied().flatten();
                let parent_is_hole = parent_border.map(|i| contours[i].is_hole).unwrap_or(true);
                let parent = if is_hole == parent_is_hole {
                    parent_border.and_then(|i| contours[i].parent)
                } else {
                    parent_border
                };
                let mut points = Vec::new();
                let origin = (x, y);

                // 3.1: clockwise search from `from` for a non-zero pixel
                let k0 = dir_index(origin, from);
                let first = (0..8)
                    .map(|k| (k0 + k) % 8)
                    .map(|k| (origin.0 + DIRS[k].0, origin.1 + DIRS[k].1))
                    .find(|&(px, py)| f[at(px, py)] != 0);
                match first {
                    None => {
                        f[at(x, y)] = -nbd;
                        points.push((x as i32 - 1, y as i32 - 1));
                    }
                    Some(p1) => {
                        let mut p2 = p1;
                        let mut p3 = origin;
                        loop {
                            points.push((p3.0 as i32 - 1, p3.1 as i32 - 1));
                            // 3.3: counter-clockwise search starting after p2
                            let k2 = dir_index(p3, p2);
                            let mut east_zero_examined = false;
                            let mut p4 = p2;
                            for step in 1..=8 {
                                let k = (k2 + 8 - step) % 8;
                                let q = (p3.0 + DIRS[k].0, p3.1 + DIRS[k].1);
                                if f[at(q.0, q.1)] != 0 {
                                    p4 = q;
                                    break;
                                }
                                if k == 0 {
                                    east_zero_examined = true;
                                }
                            }
                            // 3.4
                            let idx = at(p3.0, p3.1);
                            if east_zero_examined {
                                f[idx] = -nbd;
                            } else if f[idx] == 1 {
                                f[idx] = nbd;
                            }
                            // 3.5
                            if p4 == origin && p3 == p1 {
                                break;
                            }
                            p2 = p3;
                            p3 = p4;
                        }
                    }
                }
                contours.push(Contour { points, is_hole, parent });
                if nbd_index.len() <= nbd as usize {
                    nbd_index.resize(nbd as usize + 1, None);
                }
                nbd_index[nbd as usize] = Some(contours.len() - 1);
            }
            let v = f[at(x, y)];
            if v != 1 {
                lnbd = v.abs();
            }
        }
    }
    contours
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull by Andrew's monotone chain, counter-clockwise in `(x, y)`
/// with collinear vertices removed.
pub fn convex_hull(points: &[Point2]) -> Result<Vec<Point2>> {
    let idx = convex_hull_indices(points)?;
    Ok(idx.into_iter().map(|i| points[i]).collect())
}

/// Like [`convex_hull`] but returns indices into `points`.
pub fn convex_hull_indices(points: &[Point2]) -> Result<Vec<usize>> {
    if points.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .x
            .total_cmp(&points[b].x)
            .then(points[a].y.total_cmp(&points[b].y))
            .then(a.cmp(&b))
    });
    order.dedup_by(|a, b| points[*a] == points[*b]);
    if order.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    let mut hull: Vec<usize> = Vec::with_capacity(2 * order.len());
    for &i in &order {
        while hull.len() >= 2 && cross(points[hull[hull.len() - 2]], points[hull[hull.len() - 1]], points[i]) <= 0.0 {
            hull.pop();
        }
        hull.push(i);
    }
    let lower_len = hull.len() + 1;
    for &i in order.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && cross(points[hull[hull.len() - 2]], points[hull[hull.len() - 1]], points[i]) <= 0.0
        {
            hull.pop();
        }
        hull.push(i);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    Ok(hull)
}

/// A concavity between two consecutive hull vertices of a contour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexityDefect {
    /// Contour index of the hull vertex opening the defect.
    pub start: usize,
    /// Contour index of the hull vertex closing the defect.
    pub end: usize,
    /// Contour index of the point farthest from the hull edge.
    pub deepest: usize,
    /// Distance of `deepest` from the hull edge, pixels.
    pub depth: f64,
}

/// Convexity defects of a closed contour against its convex hull.
pub fn convexity_defects(contour: &[Point2]) -> Result<Vec<ConvexityDefect>> {
    let mut hull = convex_hull_indices(contour)?;
    hull.sort_unstable();
    let n = contour.len();
    let mut defects = Vec::new();
    for k in 0..hull.len() {
        let s = hull[k];
        let e = hull[(k + 1) % hull.len()];
        let a = contour[s];
        let b = contour[e];
        let len = a.distance(b);
        if len < 1e-12 {
            continue;
        }
        let mut best = (s, 0.0);
        let mut i = (s + 1) % n;
        while i != e {
            let d = cross(a, b, contour[i]).abs() / len;
            if d > best.1 {
                best = (i, d);
            }
            i = (i + 1) % n;
        }
        if best.1 > 0.0 {
            defects.push(ConvexityDefect { start: s, end: e, deepest: best.0, depth: best.1 });
        }
    }
    Ok(defects)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    /// Hysteresis thresholds on the gradient magnitude, in intensity units
    /// per pixel (Sobel response divided by 4).
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { low: 10.0, high: 25.0, sigma: 1.4 }
    }
}

fn gaussian_kernel_5(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Smoothed image and Sobel gradient magnitude/components.
pub struct Gradient {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// 5×5 Gaussian (separable) followed by 3×3 Sobel, replicated borders.
pub fn sobel_gradient(image: &RasterImage, sigma: f64) -> Gradient {
    let (w, h) = (image.width, image.height);
    let k = gaussian_kernel_5(sigma);
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * image.get(clamp(x as i64 + i as i64 - 2, w), y) as f64;
            }
            tmp[y * w + x] = s;
        }
    }
    let mut smooth = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[clamp(y as i64 + i as i64 - 2, h) * w + x];
            }
            smooth[y * w + x] = s;
        }
    }
    let px = |x: i64, y: i64| smooth[clamp(y, h) * w + clamp(x, w)];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut magnitude = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let sx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let sy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            gx[i] = sx / 4.0;
            gy[i] = sy / 4.0;
            magnitude[i] = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
        }
    }
    Gradient { width: w, height: h, gx, gy, magnitude }
}

/// Canny edge detector: Gaussian smoothing, Sobel gradient, non-maximum
/// suppression and hysteresis thresholding (8-connected).
pub fn canny(image: &RasterImage, params: &CannyParams) -> BinaryImage {
    let g = sobel_gradient(image, params.sigma);
    let (w, h) = (g.width, g.height);
    let mut edges = BinaryImage::new(w, h);
    if w < 3 || h < 3 {
        return edges;
    }
    let mag = |x: usize, y: usize| g.magnitude[y * w + x];
    // 0: strong, 1: weak, 2: none
    let mut class = vec![2u8; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = mag(x, y);
            if m < params.low || m == 0.0 {
                continue;
            }
            let i = y * w + x;
            let angle = g.gy[i].atan2(g.gx[i]).to_degrees().rem_euclid(180.0);
            let (a, b) = if !(22.5..157.5).contains(&angle) {
                (mag(x - 1, y), mag(x + 1, y))
            } else if angle < 67.5 {
                (mag(x - 1, y - 1), mag(x + 1, y + 1))
            } else if angle < 112.5 {
                (mag(x, y - 1), mag(x, y + 1))
            } else {
                (mag(x + 1, y - 1), mag(x - 1, y + 1))
            };
            if m > a && m >= b {
                class[i] = if m >= params.high { 0 } else { 1 };
            }
        }
    }
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| class[i] == 0).collect();
    for &i in &stack {
        edges.bits[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for (dx, dy) in DIRS {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if class[j] == 1 && !edges.bits[j] {
                edges.bits[j] = true;
                stack.push(j);
            }
        }
    }
    edges
}

/// Line segment in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment2 {
    pub a: Point2,
    pub b: Point2,
}

impl Segment2 {
    pub fn new(a: Point2, b: Point2) -> Self {
        Segment2 { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.distance(self.b)
    }

    /// Direction angle in [0, 180) degrees (image axes, v down).
    pub fn angle_deg(&self) -> f64 {
        (self.b.y - self.a.y).atan2(self.b.x - self.a.x).to_degrees().rem_euclid(180.0)
    }

    pub fn midpoint(&self) -> Point2 {
        self.a.midpoint(self.b)
    }

    /// Distance from `p` to the infinite line through the segment.
    pub fn line_distance(&self, p: Point2) -> f64 {
        cross(self.a, self.b, p).abs() / self.length().max(1e-12)
    }

    /// Distance from `p` to the segment itself.
    pub fn distance(&self, p: Point2) -> f64 {
        let (dx, dy) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let l2 = dx * dx + dy * dy;
        if l2 < 1e-24 {
            return p.distance(self.a);
        }
        let t = (((p.x - self.a.x) * dx + (p.y - self.a.y) * dy) / l2).clamp(0.0, 1.0);
        p.distance(Point2::new(self.a.x + t * dx, self.a.y + t * dy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoughParams {
    /// Distance resolution, pixels.
    pub rho_res: f64,
    /// Angle resolution, degrees.
    pub theta_res_deg: f64,
    /// Accumulator votes needed to attempt a segment.
    pub votes: u32,
    pub min_len: f64,
    pub max_gap: u32,
    /// The walk along a detected line also accepts edge pixels this many
    /// pixels off the line across its minor axis; 0 walks the line only.
    pub walk_tolerance: u32,
}

impl Default for HoughParams {
    fn default() -> Self {
        HoughParams { rho_res: 1.0, theta_res_deg: 1.0, votes: 25, min_len: 20.0, max_gap: 4, walk_tolerance: 1 }
    }
}

/// Progressive probabilistic Hough transform. Edge points are visited in a
/// seeded random order; a point whose line reaches `votes` triggers a walk
/// along that line collecting a segment, whose pixels are then withdrawn.
pub fn probabilistic_hough(edges: &BinaryImage, params: &HoughParams, seed: u64) -> Result<Vec<Segment2>> {
    if !(params.rho_res > 0.0 && params.theta_res_deg > 0.0) {
        return Err(Error::Config("Hough resolutions must be positive".into()));
    }
    let (w, h) = (edges.width as i64, edges.height as i64);
    let theta = params.theta_res_deg.to_radians();
    let irho = 1.0 / params.rho_res;
    let numangle = (std::f64::consts::PI / theta).round().max(1.0) as usize;
    let numrho = (((w + h) * 2 + 1) as f64 / params.rho_res).round() as i64;
    let trig: Vec<(f64, f64)> = (0..numangle)
        .map(|n| {
            let t = n as f64 * theta;
            (t.cos() * irho, t.sin() * irho)
        })
        .collect();
    let mut accum = vec![0i32; numangle * numrho as usize];
    let mut mask = vec![false; (w * h) as usize];
    let mut pts: Vec<(i64, i64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if edges.get(x as usize, y as usize) {
                pts.push((x, y));
                mask[(y * w + x) as usize] = true;
            }
        }
    }
    let rho_index = |n: usize, x: i64, y: i64| -> usize {
        let r = (x as f64 * trig[n].0 + y as f64 * trig[n].1).round() as i64 + (numrho - 1) / 2;
        n * numrho as usize + r as usize
    };

    const SHIFT: i64 = 16;
    let mut rng = seed::rng(seed);
    let mut lines = Vec::new();
    let mut count = pts.len();
    while count > 0 {
        let idx = rng.random_range(0..count);
        let (x, y) = pts[idx];
        pts[idx] = pts[count - 1];
        count -= 1;
        if !mask[(y * w + x) as usize] {
            continue;
        }
        let mut max_val = params.votes as i32 - 1;
        let mut max_n = 0usize;
        for n in 0..numangle {
            let i = rho_index(n, x, y);
            accum[i] += 1;
            if accum[i] > max_val {
                max_val = accum[i];
                max_n = n;
            }
        }
        if max_val < params.votes as i32 {
            continue;
        }
        let a = -trig[max_n].1;
        let b = trig[max_n].0;
        let (mut x0, mut y0) = (x, y);
        let (dx0, dy0, xflag);
        if a.abs() > b.abs() {
            xflag = true;
            dx0 = if a > 0.0 { 1 } else { -1 };
            dy0 = (b * (1i64 << SHIFT) as f64 / a.abs()).round() as i64;
            y0 = (y0 << SHIFT) + (1 << (SHIFT - 1));
        } else {
            xflag = false;
            dy0 = if b > 0.0 { 1 } else { -1 };
            dx0 = (a * (1i64 << SHIFT) as f64 / b.abs()).round() as i64;
            x0 = (x0 << SHIFT) + (1 << (SHIFT - 1));
        }
        let unpack = |px: i64, py: i64| if xflag { (px, py >> SHIFT) } else { (px >> SHIFT, py) };
        let tol = params.walk_tolerance as i64;
        // set pixels at and beside the line position, nearest first
        let lateral = |j: i64, i: i64| {
            (0..=2 * tol).map(move |k| if k % 2 == 0 { k / 2 } else { -(k + 1) / 2 }).filter_map(move |o| {
                let (jj, ii) = if xflag { (j, i + o) } else { (j + o, i) };
                (jj >= 0 && jj < w && ii >= 0 && ii < h).then_some((jj, ii))
            })
        };

        let mut line_end = [(x, y); 2];
        for (k, end) in line_end.iter_mut().enumerate() {
            let (dx, dy) = if k == 0 { (dx0, dy0) } else { (-dx0, -dy0) };
            let (mut px, mut py) = (x0, y0);
            let mut gap = 0u32;
            loop {
                let (j1, i1) = unpack(px, py);
                if j1 < 0 || j1 >= w || i1 < 0 || i1 >= h {
                    break;
                }
                if lateral(j1, i1).any(|(jj, ii)| mask[(ii * w + jj) as usize]) {
                    gap = 0;
                    *end = (j1, i1);
                } else {
                    gap += 1;
                    if gap > params.max_gap {
                        break;
                    }
                }
                px += dx;
                py += dy;
            }
        }
        let seg_len = (((line_end[1].0 - line_end[0].0).pow(2) + (line_end[1].1 - line_end[0].1).pow(2)) as f64).sqrt();
        let good = seg_len >= params.min_len;

        for (k, end) in line_end.iter().enumerate() {
            let (dx, dy) = if k == 0 { (dx0, dy0) } else { (-dx0, -dy0) };
            let (mut px, mut py) = (x0, y0);
            loop {
                let (j1, i1) = unpack(px, py);
                if j1 < 0 || j1 >= w || i1 < 0 || i1 >= h {
                    break;
                }
                for (jj, ii) in lateral(j1, i1) {
                    let mi = (ii * w + jj) as usize;
                    if mask[mi] {
                        if good {
                            for n in 0..numangle {
                                let i = rho_index(n, jj, ii);
                                accum[i] -= 1;
                            }
                        }
                        mask[mi] = false;
                    }
                }
                if (j1, i1) == *end {
                    break;
                }
                px += dx;
                py += dy;
            }
        }
        if good {
            lines.push(Segment2::new(
                Point2::new(line_end[0].0 as f64, line_end[0].1 as f64),
                Point2::new(line_end[1].0 as f64, line_end[1].1 as f64),
            ));
        }
    }
    Ok(lines)
}

/// Side of the square window the LBP descriptor is defined on.
pub const LBP_WINDOW: usize = 100;

/// 8-neighbour local binary pattern of pixel `(x, y)`; the neighbour bit is
/// set when `neighbour ≥ centre`. Bit 7 is the top-left neighbour and the
/// remaining bits follow clockwise. Caller guarantees an interior pixel.
#[inline]
pub fn lbp_code(image: &RasterImage, x: usize, y: usize) -> u8 {
    let c = image.get(x, y);
    let w = image.width;
    let d = &image.data;
    let r0 = (y - 1) * w;
    let r1 = y * w;
    let r2 = (y + 1) * w;
    let n = [
        d[r0 + x - 1],
        d[r0 + x],
        d[r0 + x + 1],
        d[r1 + x + 1],
        d[r2 + x + 1],
        d[r2 + x],
        d[r2 + x - 1],
        d[r1 + x - 1],
    ];
    let mut code = 0u8;
    for (i, v) in n.iter().enumerate() {
        if *v >= c {
            code |= 1 << (7 - i);
        }
    }
    code
}

/// LBP code image; the one-pixel image border has no code and is 0.
pub fn lbp_code_image(image: &RasterImage) -> RasterImage {
    let mut out = RasterImage::new(image.width, image.height, 0);
    if image.width < 3 || image.height < 3 {
        return out;
    }
    for y in 1..image.height - 1 {
        for x in 1..image.width - 1 {
            out.set(x, y, lbp_code(image, x, y));
        }
    }
    out
}

/// Per-cell 256-bin LBP histograms of a window, concatenated cell-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LbpHistogram {
    pub grid: usize,
    pub bins: Vec<u16>,
}

impl LbpHistogram {
    pub fn cell(&self, cx: usize, cy: usize) -> &[u16] {
        let i = (cy * self.grid + cx) * 256;
        &self.bins[i..i + 256]
    }

    pub fn feature(&self, index: usize) -> u16 {
        self.bins[index]
    }
}

/// Pixel range `[start, end)` of cell `c` along one window axis.
pub fn cell_span(window: usize, grid: usize, c: usize) -> (usize, usize) {
    (c * window / grid, (c + 1) * window / grid)
}

/// LBP histogram of a 100×100 window over a `grid × grid` cell layout.
/// Window border pixels are skipped (they lack a full neighbourhood).
pub fn lbp_features(window: &RasterImage, grid: usize) -> Result<LbpHistogram> {
    if window.width != LBP_WINDOW || window.height != LBP_WINDOW {
        return Err(Error::ContractViolation(format!(
            "LBP window must be {LBP_WINDOW}×{LBP_WINDOW}, got {}×{}",
            window.width, window.height
        )));
    }
    if grid == 0 || grid > LBP_WINDOW {
        return Err(Error::ContractViolation(format!("invalid LBP cell grid {grid}")));
    }
    let codes = lbp_code_image(window);
    Ok(histogram_from_codes(&codes, 0, 0, grid))
}

/// Cell histograms of the `LBP_WINDOW` window at `(x0, y0)` in a code
/// image, skipping the window's own border pixels.
pub fn histogram_from_codes(codes: &RasterImage, x0: usize, y0: usize, grid: usize) -> LbpHistogram {
    let mut bins = vec![0u16; grid * grid * 256];
    for cy in 0..grid {
        let (ys, ye) = cell_span(LBP_WINDOW, grid, cy);
        for cx in 0..grid {
            let (xs, xe) = cell_span(LBP_WINDOW, grid, cx);
            let base = (cy * grid + cx) * 256;
            for y in ys.max(1)..ye.min(LBP_WINDOW - 1) {
                let row = (y0 + y) * codes.width + x0;
                for x in xs.max(1)..xe.min(LBP_WINDOW - 1) {
                    bins[base + codes.data[row + x] as usize] += 1;
                }
            }
        }
    }
    LbpHistogram { grid, bins }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin_from(rows: &[&str]) -> BinaryImage {
        let h = rows.len();
        let w = rows[0].len();
        let mut b = BinaryImage::new(w, h);
        for (y, r) in rows.iter().enumerate() {
            for (x, c) in r.chars().enumerate() {
                b.set(x, y, c == '#');
            }
        }
        b
    }

    #[test]
    fn otsu_bimodal_and_constant() {
        let img = RasterImage::from_fn(10, 10, |x, _| if x < 5 { 50 } else { 200 });
        let (t, b) = otsu_threshold(&img);
        assert_eq!(t, 50);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(b.get(x, y), x >= 5);
            }
        }
        for v in [0u8, 128, 255] {
            let (_, b) = otsu_threshold(&RasterImage::new(6, 4, v));
            let c = b.count();
            assert!(c == 0 || c == 24);
        }
    }

    #[test]
    fn square_contour_has_eight_pixels() {
        let b = bin_from(&[".....", ".###.", ".###.", ".###.", "....."]);
        let c = trace_contours(&b);
        assert_eq!(c.len(), 1);
        assert!(!c[0].is_hole);
        assert_eq!(c[0].points.len(), 8);
        assert!(c[0].points.iter().all(|&(x, y)| b.get(x as usize, y as usize)));
        assert!(!c[0].points.contains(&(2, 2)));
    }

    #[test]
    fn ring_has_hole() {
        let b = bin_from(&[".......", ".#####.", ".#...#.", ".#...#.", ".#####.", "......."]);
        let c = trace_contours(&b);
        assert_eq!(c.len(), 2);
        assert_eq!(c.iter().filter(|c| c.is_hole).count(), 1);
        let hole = c.iter().position(|c| c.is_hole).unwrap();
        let outer = c.iter().position(|c| !c.is_hole).unwrap();
        assert_eq!(c[hole].parent, Some(outer));
    }

    #[test]
    fn empty_image_has_no_contours() {
        assert!(trace_contours(&BinaryImage::new(8, 8)).is_empty());
    }

    #[test]
    fn single_pixel_and_border_touching() {
        let b = bin_from(&["#..", "...", "..#"]);
        let c = trace_contours(&b);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| c.points.len() == 1));
    }

    #[test]
    fn hull_examples() {
        let sq = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.5, 0.5),
        ];
        assert_eq!(convex_hull(&sq).unwrap().len(), 4);
        let tri = [Point2::new(0.0, 0.0), Point2::new(4.0, 0.0), Point2::new(1.0, 3.0)];
        let h = convex_hull(&tri).unwrap();
        assert_eq!(h.len(), 3);
        for p in tri {
            assert!(h.contains(&p));
        }
        let line = [Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)];
        assert_eq!(convex_hull(&line), Err(Error::DegenerateHull));
        // collinear points on an edge are dropped
        let edge = [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(2.0, 0.0), Point2::new(1.0, 2.0)];
        assert_eq!(convex_hull(&edge).unwrap().len(), 3);
    }

    #[test]
    fn step_edge_is_single_line() {
        let img = RasterImage::from_fn(40, 30, |x, _| if x < 20 { 40 } else { 200 });
        let e = canny(&img, &CannyParams::default());
        for y in 3..27 {
            let xs: Vec<usize> = (0..40).filter(|&x| e.get(x, y)).collect();
            assert_eq!(xs.len(), 1, "row {y}: {xs:?}");
            assert!((xs[0] as i64 - 19).abs() <= 1);
        }
        assert_eq!(canny(&RasterImage::new(20, 20, 77), &CannyParams::default()).count(), 0);
    }

    #[test]
    fn hough_empty() {
        let e = BinaryImage::new(50, 50);
        assert!(probabilistic_hough(&e, &HoughParams::default(), 1).unwrap().is_empty());
    }

    #[test]
    fn lbp_constant_window_sets_all_bits() {
        let w = RasterImage::new(100, 100, 90);
        let h = lbp_features(&w, 8).unwrap();
        for cy in 0..8 {
            for cx in 0..8 {
                let cell = h.cell(cx, cy);
                let total: u32 = cell.iter().map(|v| *v as u32).sum();
                assert_eq!(cell[255] as u32, total);
            }
        }
        assert!(lbp_features(&RasterImage::new(99, 100, 0), 8).is_err());
    }

    #[test]
    fn lbp_single_pixels() {
        let mut img = RasterImage::new(5, 5, 100);
        img.set(2, 2, 200);
        assert_eq!(lbp_code(&img, 2, 2), 0);
        assert_eq!(lbp_code(&img, 1, 1), 255);
        // a dark pixel clears exactly the bit pointing at it
        let mut img = RasterImage::new(5, 5, 100);
        img.set(2, 2, 10);
        assert_eq!(lbp_code(&img, 2, 2), 255);
        assert_eq!(lbp_code(&img, 1, 1), !(1u8 << 3)); // centre is bottom-right of (1,1)
        assert_eq!(lbp_code(&img, 2, 1), !(1u8 << 2)); // bottom
        assert_eq!(lbp_code(&img, 3, 1), !(1u8 << 1)); // bottom-left
        assert_eq!(lbp_code(&img, 3, 2), !(1u8 << 0)); // left
        assert_eq!(lbp_code(&img, 3, 3), !(1u8 << 7)); // top-left
        assert_eq!(lbp_code(&img, 2, 3), !(1u8 << 6)); // top
        assert_eq!(lbp_code(&img, 1, 3), !(1u8 << 5)); // top-right
        assert_eq!(lbp_code(&img, 1, 2), !(1u8 << 4)); // right
    }
}
