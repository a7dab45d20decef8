//! Image and geometry primitives shared by every stage: rasters, boxes,
//! label masks and summed-area tables.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major float image with 1 or 3 channels, samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!("raster channels must be 1 or 3, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::contract("raster dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::contract(format!(
                "raster data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::contract(format!("raster sample {bad} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3);
        assert!((0.0..=1.0).contains(&value));
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width as i32, self.height as i32)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Sets a sample, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Single-channel view of one channel.
    pub fn channel(&self, c: usize) -> Raster {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Luma (Rec. 601 weights) as a single-channel raster.
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// HSV conversion with all three components in `[0, 1]` (hue wraps at 1).
    /// Gray inputs produce zero hue and saturation.
    pub fn to_hsv(&self) -> Raster {
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for i in 0..self.width * self.height {
            let (r, g, b) = if self.channels == 1 {
                let v = self.data[i];
                (v, v, v)
            } else {
                (self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2])
            };
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            let h = if delta <= 0.0 {
                0.0
            } else if max == r {
                ((g - b) / delta).rem_euclid(6.0) / 6.0
            } else if max == g {
                ((b - r) / delta + 2.0) / 6.0
            } else {
                ((r - g) / delta + 4.0) / 6.0
            };
            let s = if max <= 0.0 { 0.0 } else { delta / max };
            data.push(h.clamp(0.0, 1.0 - f64::EPSILON));
            data.push(s.clamp(0.0, 1.0));
            data.push(max);
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).map(|b| b.save(path))
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).map(|b| b.save(path))
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(image_err(path, e)),
            None => Err(Error::Internal("raster buffer size mismatch".into())),
        }
    }
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png" | "pgm" | "ppm" | "pnm" | "pbm") => {}
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "only PNG and PGM/PPM are supported".into(),
            })
        }
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads a PNG or PGM/PPM file. 8-bit samples map to `v / 255`, 16-bit to
/// `v / 65535`; gray stays single-channel, color becomes 3 channels (alpha
/// dropped).
pub fn load_image(path: &Path) -> Result<Raster> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, data): (usize, Vec<f64>) = if color.has_color() {
        if color.bytes_per_pixel() / color.channel_count() as u8 > 1 {
            let buf = img.to_rgb16();
            (3, buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
        } else {
            let buf = img.to_rgb8();
            (3, buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
    } else if color.bytes_per_pixel() / color.channel_count() as u8 > 1 {
        let buf = img.to_luma16();
        (1, buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
    } else {
        let buf = img.to_luma8();
        (1, buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
    };
    Raster::new(w, h, channels, data)
}

/// Writes a `[0,1]` map as a 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let raw: Vec<u16> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Internal("map buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Axis-aligned pixel box. Covers the `w * h` whole pixels with
/// `x <= px < x + w`, `y <= py < y + h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl BBox {
    pub const fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Self { x, y, w, h }
    }

    /// Box spanning the half-open corner range `[x0, x1) x [y0, y1)`.
    pub fn from_corners(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn is_valid(&self) -> bool {
        self.w >= 1 && self.h >= 1
    }

    #[inline]
    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> i64 {
        self.w as i64 * self.h as i64
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    #[inline]
    pub fn contains_point(&self, px: i32, py: i32) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::from_corners(x0, y0, x1, y1))
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        self.intersect(other).map_or(0, |b| b.area())
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.right().max(other.right()),
            self.bottom().max(other.bottom()),
        )
    }

    pub fn clip(&self, width: usize, height: usize) -> Option<BBox> {
        self.intersect(&BBox::new(0, 0, width as i32, height as i32))
    }

    pub fn expand(&self, margin: i32) -> BBox {
        BBox::new(self.x - margin, self.y - margin, self.w + 2 * margin, self.h + 2 * margin)
    }

    /// Scales the box about its center; the result keeps at least one pixel.
    pub fn scale(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        let w = (self.w as f64 * factor).round().max(1.0);
        let h = (self.h as f64 * factor).round().max(1.0);
        let x = (cx - w / 2.0 + 0.5).floor() as i32;
        let y = (cy - h / 2.0 + 0.5).floor() as i32;
        BBox::new(x, y, w as i32, h as i32)
    }

    pub fn translate(&self, dx: i32, dy: i32) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Intersection over union with pixel-count areas.
    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

/// `|a ∩ b| / |a ∪ b|` over whole pixels; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Ground-truth label palette.
pub mod label {
    pub const ROAD: u8 = 0;
    pub const OBSTACLE: u8 = 1;
    pub const NON_ROAD: u8 = 2;
    pub const IGNORE: u8 = 255;

    pub fn is_valid(v: u8) -> bool {
        matches!(v, ROAD | OBSTACLE | NON_ROAD | IGNORE)
    }
}

/// Per-pixel class labels aligned with an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::contract("mask length does not match its dimensions"));
        }
        if let Some(bad) = labels.iter().find(|v| !label::is_valid(**v)) {
            return Err(Error::Data(format!("mask label {bad} not in palette {{0,1,2,255}}")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(label::is_valid(value));
        Self {
            width,
            height,
            labels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(label::is_valid(v));
        self.labels[y * self.width + x] = v;
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Bounding box of all pixels whose label is in `classes`.
    pub fn bounding_box(&self, classes: &[u8]) -> Option<BBox> {
        let mut bb: Option<(i32, i32, i32, i32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if classes.contains(&self.get(x, y)) {
                    let (x, y) = (x as i32, y as i32);
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb.map(|(x0, y0, x1, y1)| BBox::from_corners(x0, y0, x1, y1))
    }

    /// Pixels on the obstacle contour: obstacle pixels with a 4-neighbor of
    /// another class (or the image border).
    pub fn obstacle_contour(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != label::OBSTACLE {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || self.get(x - 1, y) != label::OBSTACLE
                    || self.get(x + 1, y) != label::OBSTACLE
                    || self.get(x, y - 1) != label::OBSTACLE
                    || self.get(x, y + 1) != label::OBSTACLE;
                if edge {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = open_image(path)?;
        if img.color().has_color() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "label masks must be single-channel".into(),
            });
        }
        let buf = img.to_luma8();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        Mask::new(w, h, buf.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .ok_or_else(|| Error::Internal("mask buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| image_err(path, e))
    }
}

/// Summed-area table over a single-channel plane: a `(w+1) x (h+1)` grid
/// with a zero first row and column.
#[derive(Clone, Debug)]
pub struct IntegralMap {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl IntegralMap {
    pub fn from_raster(map: &Raster) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::contract(format!(
                "integral image needs a single-channel raster, got {} channels",
                map.channels()
            )));
        }
        Ok(Self::from_values(map.width(), map.height(), map.data()))
    }

    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Self {
        Self::from_fn(width, height, |x, y| values[y * width + x])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += f(x, y);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { width, height, sums }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Sum over the box; the box is clipped to the map first.
    pub fn box_sum(&self, b: &BBox) -> f64 {
        let Some(b) = b.clip(self.width, self.height) else {
            return 0.0;
        };
        let stride = self.width + 1;
        let (x0, y0, x1, y1) = (b.x as usize, b.y as usize, b.right() as usize, b.bottom() as usize);
        self.sums[y1 * stride + x1] - self.sums[y0 * stride + x1] - self.sums[y1 * stride + x0]
            + self.sums[y0 * stride + x0]
    }
}

/// Convenience: summed-area table of a raster (see [`IntegralMap`]).
pub fn integral(map: &Raster) -> Result<IntegralMap> {
    IntegralMap::from_raster(map)
}
