//! 8-bit grayscale and binary rasters, bounding boxes, resampling and PGM I/O.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        RasterImage { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ContractViolation(format!(
                "image buffer has {} bytes, expected {}×{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(RasterImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        RasterImage { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Clamped access (replicated border).
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.get(x, y)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width as i32, self.height as i32)
    }

    /// Crop to `bbox ∩ image`.
    pub fn crop(&self, bbox: BBox) -> RasterImage {
        let b = bbox.intersect(&self.bounds()).unwrap_or(BBox::new(0, 0, 0, 0));
        RasterImage::from_fn(b.w as usize, b.h as usize, |x, y| {
            self.get(x + b.x as usize, y + b.y as usize)
        })
    }

    /// Area-averaging resample to `new_w × new_h` (box filter with
    /// fractional pixel coverage).
    pub fn resize_area(&self, new_w: usize, new_h: usize) -> RasterImage {
        self.resample_region(0.0, 0.0, self.width as f64, self.height as f64, new_w, new_h)
    }

    /// Area-averages the source rectangle `[x0, x0+w) × [y0, y0+h)` (in
    /// source pixels, may extend past the border, which is replicated) into
    /// an `out_w × out_h` image.
    pub fn resample_region(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> RasterImage {
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let xs = coverage_table(x0, sx, out_w);
        let ys = coverage_table(y0, sy, out_h);
        let mut out = Vec::with_capacity(out_w * out_h);
        for row in &ys {
            for col in &xs {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for &(yy, wy) in row {
                    for &(xx, wx) in col {
                        acc += self.get_clamped(xx, yy) as f64 * wx * wy;
                        wsum += wx * wy;
                    }
                }
                out.push((acc / wsum).round().clamp(0.0, 255.0) as u8);
            }
        }
        RasterImage { width: out_w, height: out_h, data: out }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    /// Binary portable graymap (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read_pgm(path: &Path) -> Result<RasterImage> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        RasterImage::from_pgm(&bytes)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<RasterImage> {
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(Error::Parse("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Parse(format!("unsupported PGM magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("PGM header: {e}")));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Parse(format!("only 8-bit PGM supported, maxval {maxval}")));
        }
        let data = bytes.get(i + 1..i + 1 + w * h).ok_or_else(|| Error::Parse("truncated PGM data".into()))?;
        RasterImage::from_vec(w, h, data.to_vec())
    }
}

fn coverage_table(origin: f64, scale: f64, n: usize) -> Vec<Vec<(i64, f64)>> {
    (0..n)
        .map(|k| {
            let a = origin + k as f64 * scale;
            let b = a + scale;
            let mut cells = Vec::new();
            let mut p = a.floor() as i64;
            while (p as f64) < b {
                let lo = a.max(p as f64);
                let hi = b.min(p as f64 + 1.0);
                if hi > lo {
                    cells.push((p, hi - lo));
                }
                p += 1;
            }
            cells
        })
        .collect()
}

/// Row-major binary image; `true` is foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryImage { width, height, bits: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn inverted(&self) -> BinaryImage {
        BinaryImage {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_raster(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            data: self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect(),
        }
    }
}

/// Axis-aligned pixel box `(x, y, width, height)`, y growing downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl BBox {
    pub const fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> i64 {
        self.w.max(0) as i64 * self.h.max(0) as i64
    }

    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn intersect(&self, o: &BBox) -> Option<BBox> {
        let x0 = self.x.max(o.x);
        let y0 = self.y.max(o.y);
        let x1 = self.right().min(o.right());
        let y1 = self.bottom().min(o.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersect(o).map_or(0, |b| b.area());
        let union = self.area() + o.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && x < self.right() as f64 && y >= self.y as f64 && y < self.bottom() as f64
    }

    pub fn inflate(&self, margin: i32) -> BBox {
        BBox::new(self.x - margin, self.y - margin, self.w + 2 * margin, self.h + 2 * margin)
    }
}
