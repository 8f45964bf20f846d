//! 8-bit rasters, PGM I/O, and the summed-area tables behind constant-time
//! rectangle sums.
//!
//! Upright tables use the usual zero-padded `(width+1) x (height+1)` layout:
//! entry `(x, y)` holds the sum of all pixels strictly above and to the left.
//!
//! Rotated (45 degree) sums are answered from a second table indexed by the
//! diagonal coordinates of a pixel,
//!
//! ```text
//!     s = x + y            (constant along anti-diagonals)
//!     d = y - x            (constant along diagonals)
//! ```
//!
//! A [`RotRect`] is an axis-aligned box in `(s, d)` space. Pixel `(x, y)` is a
//! member iff `s0 <= x + y < s0 + s_len` and `d0 <= y - x < d0 + d_len`, i.e. its
//! centre lies inside the rotated rectangle or on one of its two upper edges.
//! Because membership is a box test in `(s, d)`, a prefix table over that grid
//! answers any rotated sum with four lookups.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit greyscale image.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    /// All-black image. Panics if either dimension is zero.
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        GrayImage {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "{}x{} image needs {} samples, got {}",
                width,
                height,
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    /// Left-right flip.
    pub fn mirrored(&self) -> GrayImage {
        let w = self.width as usize;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(w) {
            data.extend(row.iter().rev());
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn crop(&self, r: Rect) -> Result<GrayImage> {
        if !r.fits_within(self.width, self.height) {
            return Err(Error::Bounds(format!(
                "crop {r} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(r.area() as usize);
        for y in r.y..r.bottom() {
            let start = y as usize * self.width as usize + r.x as usize;
            data.extend_from_slice(&self.data[start..start + r.w as usize]);
        }
        GrayImage::from_raw(r.w, r.h, data)
    }
}

/// Source sample positions for resampling `src_len` pixels onto `dst_len`,
/// with pixel centres aligned: `(lower index, upper index, upper weight)`
/// over a common denominator `2 * dst_len`.
fn resample_taps(src_len: u32, dst_len: u32) -> Vec<(usize, usize, u64)> {
    let den = 2 * dst_len as i64;
    (0..dst_len as i64)
        .map(|d| {
            let num = ((2 * d + 1) * src_len as i64 - dst_len as i64).clamp(0, (src_len as i64 - 1) * den);
            let i0 = (num / den) as usize;
            let frac = (num % den) as u64;
            let i1 = (i0 + 1).min(src_len as usize - 1);
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling of `region` to `dst_w x dst_h`, in exact integer
/// arithmetic with centre-aligned sampling. A same-size region is copied
/// unchanged, and resampling commutes with a left-right flip.
pub fn resample_region(img: &GrayImage, region: Rect, dst_w: u32, dst_h: u32) -> Result<GrayImage> {
    if !region.fits_within(img.width(), img.height()) {
        return Err(Error::Bounds(format!(
            "region {region} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    if dst_w == 0 || dst_h == 0 {
        return Err(Error::InvalidInput("resample target must be at least 1x1".into()));
    }
    let tx = resample_taps(region.w, dst_w);
    let ty = resample_taps(region.h, dst_h);
    let dx = 2 * dst_w as u64;
    let dy = 2 * dst_h as u64;
    let den = dx * dy;
    let px = |x: usize, y: usize| img.get(region.x + x as u32, region.y + y as u32) as u64;
    let mut out = GrayImage::new(dst_w, dst_h);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = px(x0, y0) * (dx - fx) + px(x1, y0) * fx;
            let bottom = px(x0, y1) * (dx - fx) + px(x1, y1) * fx;
            let num = top * (dy - fy) + bottom * fy;
            out.set(ox as u32, oy as u32, ((num + den / 2) / den) as u8);
        }
    }
    Ok(out)
}

/// Upright rectangle `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    #[inline]
    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Reflection inside a window of the given width: `x -> width - x - w`.
    pub fn mirrored(&self, width: u32) -> Rect {
        Rect::new(width - self.x - self.w, self.y, self.w, self.h)
    }

    /// Centre in pixel coordinates; odd sides give an integral centre pixel.
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + (self.w as f64 - 1.0) / 2.0,
            self.y as f64 + (self.h as f64 - 1.0) / 2.0,
        )
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x, self.y, self.w, self.h)
    }
}

/// A 45 degree rotated rectangle, expressed as a box in diagonal coordinates
/// `s = x + y`, `d = y - x` (see the module docs for the membership rule).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RotRect {
    pub s: i64,
    pub d: i64,
    pub s_len: u32,
    pub d_len: u32,
}

impl RotRect {
    pub const fn new(s: i64, d: i64, s_len: u32, d_len: u32) -> Self {
        RotRect { s, d, s_len, d_len }
    }

    /// The rotated rectangle whose topmost pixel is `(x, y)`, spanning `w`
    /// diagonal steps down-right and `h` down-left. Covers `2 * w * h` pixels.
    pub fn from_corner(x: i64, y: i64, w: u32, h: u32) -> Self {
        RotRect::new(x + y, y - x, 2 * w, 2 * h)
    }

    /// The single pixel `(x, y)`.
    pub fn pixel(x: i64, y: i64) -> Self {
        RotRect::new(x + y, y - x, 1, 1)
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64) -> bool {
        let s = x + y;
        let d = y - x;
        s >= self.s && s < self.s + self.s_len as i64 && d >= self.d && d < self.d + self.d_len as i64
    }

    /// Number of member pixels (on an unbounded grid).
    pub fn pixel_count(&self) -> u64 {
        let a = self.s_len as u64;
        let b = self.d_len as u64;
        let ab = a * b;
        if ab % 2 == 0 {
            ab / 2
        } else if (self.s + self.d).rem_euclid(2) == 0 {
            ab.div_ceil(2)
        } else {
            ab / 2
        }
    }

    /// Inclusive pixel bounding box `(x_min, y_min, x_max, y_max)`, or `None`
    /// when no pixel centre falls inside.
    pub fn pixel_bounds(&self) -> Option<(i64, i64, i64, i64)> {
        if self.pixel_count() == 0 {
            return None;
        }
        let (s0, s1) = (self.s, self.s + self.s_len as i64 - 1);
        let (d0, d1) = (self.d, self.d + self.d_len as i64 - 1);
        // x = (s - d) / 2 and y = (s + d) / 2 need s and d of equal parity.
        let even_up = |v: i64| if v.rem_euclid(2) == 0 { v } else { v + 1 };
        let even_down = |v: i64| if v.rem_euclid(2) == 0 { v } else { v - 1 };
        let x_min = even_up(s0 - d1) / 2;
        let x_max = even_down(s1 - d0) / 2;
        let y_min = even_up(s0 + d0) / 2;
        let y_max = even_down(s1 + d1) / 2;
        Some((x_min, y_min, x_max, y_max))
    }

    /// Mirror inside a window of the given width (`x -> width - 1 - x`).
    pub fn mirrored(&self, width: u32) -> RotRect {
        let off = width as i64 - 1;
        RotRect::new(self.d + off, self.s - off, self.d_len, self.s_len)
    }

    pub fn translated(&self, dx: i64, dy: i64) -> RotRect {
        RotRect::new(self.s + dx + dy, self.d + dy - dx, self.s_len, self.d_len)
    }
}

/// Summed-area tables of one image.
#[derive(Clone)]
pub struct IntegralTables {
    width: u32,
    height: u32,
    sums: Vec<u64>,
    sq_sums: Vec<u64>,
    rot: Option<RotatedTable>,
}

impl fmt::Debug for IntegralTables {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegralTables")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("rotated", &self.rot.is_some())
            .finish()
    }
}

/// Prefix sums over the `(s, d + width - 1)` grid.
#[derive(Clone)]
struct RotatedTable {
    /// Number of distinct `s` (and `d`) values: `width + height - 1`.
    n: usize,
    /// `(n + 1) x (n + 1)` row-major, indexed `[s][v]`.
    prefix: Vec<u64>,
}

impl IntegralTables {
    pub fn new(image: &GrayImage, want_rotated: bool) -> Self {
        let w = image.width as usize;
        let h = image.height as usize;
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        let mut sq_sums = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            let mut row_sq = 0u64;
            let src = &image.data[y * w..(y + 1) * w];
            for x in 0..w {
                let v = src[x] as u64;
                row += v;
                row_sq += v * v;
                let i = (y + 1) * stride + x + 1;
                sums[i] = sums[i - stride] + row;
                sq_sums[i] = sq_sums[i - stride] + row_sq;
            }
        }
        let rot = want_rotated.then(|| RotatedTable::new(image));
        IntegralTables {
            width: image.width,
            height: image.height,
            sums,
            sq_sums,
            rot,
        }
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn has_rotated(&self) -> bool {
        self.rot.is_some()
    }

    /// Sum of pixels with `x' < x` and `y' < y`.
    #[inline]
    pub fn sum_at(&self, x: u32, y: u32) -> u64 {
        self.sums[y as usize * (self.width as usize + 1) + x as usize]
    }

    #[inline]
    pub fn sq_sum_at(&self, x: u32, y: u32) -> u64 {
        self.sq_sums[y as usize * (self.width as usize + 1) + x as usize]
    }

    pub fn total(&self) -> u64 {
        self.sum_at(self.width, self.height)
    }

    pub fn rect_sum(&self, r: &Rect) -> Result<u64> {
        if !r.fits_within(self.width, self.height) {
            return Err(Error::Bounds(format!(
                "rect {r} outside {}x{} tables",
                self.width, self.height
            )));
        }
        Ok(self.box_sum(r.x, r.y, r.right(), r.bottom()))
    }

    /// Sum over `[x0, x1) x [y0, y1)`; the caller guarantees bounds.
    #[inline]
    pub(crate) fn box_sum(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> u64 {
        let stride = self.width as usize + 1;
        let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
        let a = self.sums[y0 * stride + x0];
        let b = self.sums[y0 * stride + x1];
        let c = self.sums[y1 * stride + x0];
        let d = self.sums[y1 * stride + x1];
        (d + a) - (b + c)
    }

    #[inline]
    fn box_sq_sum(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> u64 {
        let stride = self.width as usize + 1;
        let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
        let a = self.sq_sums[y0 * stride + x0];
        let b = self.sq_sums[y0 * stride + x1];
        let c = self.sq_sums[y1 * stride + x0];
        let d = self.sq_sums[y1 * stride + x1];
        (d + a) - (b + c)
    }

    pub fn rotated_rect_sum(&self, r: &RotRect) -> Result<u64> {
        if self.rot.is_none() {
            return Err(Error::InvalidInput(
                "rotated sum requested from tables built without a rotated table".into(),
            ));
        }
        if let Some((x0, y0, x1, y1)) = r.pixel_bounds() {
            if x0 < 0 || y0 < 0 || x1 >= self.width as i64 || y1 >= self.height as i64 {
                return Err(Error::Bounds(format!(
                    "rotated rect {r:?} outside {}x{} tables",
                    self.width, self.height
                )));
            }
        }
        Ok(self.rot_box_sum(r))
    }

    /// Rotated sum without the bounds check. Pixels outside the image count
    /// as zero.
    #[inline]
    pub(crate) fn rot_box_sum(&self, r: &RotRect) -> u64 {
        let t = self.rot.as_ref().expect("rotated table");
        let n = t.n as i64;
        let off = self.width as i64 - 1;
        let clamp = |v: i64| v.clamp(0, n) as usize;
        let u0 = clamp(r.s);
        let u1 = clamp(r.s + r.s_len as i64);
        let v0 = clamp(r.d + off);
        let v1 = clamp(r.d + off + r.d_len as i64);
        let stride = t.n + 1;
        let p = &t.prefix;
        (p[u1 * stride + v1] + p[u0 * stride + v0]) - (p[u0 * stride + v1] + p[u1 * stride + v0])
    }

    /// `1 / sigma` of the window intensities, with sigma clamped below at one
    /// grey level.
    pub fn window_inv_stddev(&self, r: &Rect) -> Result<f64> {
        if !r.fits_within(self.width, self.height) {
            return Err(Error::Bounds(format!(
                "window {r} outside {}x{} tables",
                self.width, self.height
            )));
        }
        Ok(self.inv_stddev(r.x, r.y, r.right(), r.bottom()))
    }

    #[inline]
    pub(crate) fn inv_stddev(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> f64 {
        let n = (x1 - x0) as u128 * (y1 - y0) as u128;
        let sum = self.box_sum(x0, y0, x1, y1) as u128;
        let sq = self.box_sq_sum(x0, y0, x1, y1) as u128;
        // N^2 * variance, exact in integers.
        let scaled_var = n * sq - sum * sum;
        let var = scaled_var as f64 / (n * n) as f64;
        let sigma = var.sqrt();
        if sigma < 1.0 {
            1.0
        } else {
            1.0 / sigma
        }
    }
}

impl RotatedTable {
    fn new(image: &GrayImage) -> Self {
        let w = image.width as usize;
        let h = image.height as usize;
        let n = w + h - 1;
        let stride = n + 1;
        let mut prefix = vec![0u64; stride * stride];
        for y in 0..h {
            for x in 0..w {
                let u = x + y;
                let v = y + w - 1 - x;
                prefix[(u + 1) * stride + v + 1] = image.data[y * w + x] as u64;
            }
        }
        for u in 1..=n {
            let mut row = 0u64;
            for v in 1..=n {
                row += prefix[u * stride + v];
                prefix[u * stride + v] = prefix[(u - 1) * stride + v] + row;
            }
        }
        RotatedTable { n, prefix }
    }
}

// ---------------------------------------------------------------------------
// PGM

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

/// Decodes a binary (`P5`) or ASCII (`P2`) greymap with maxval <= 255.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "missing magic number"));
    }
    let binary = match &bytes[..2] {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(Error::format(0, "magic number is not P5 or P2")),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(maxval_at, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            maxval_at,
            format!("unsupported maxval {maxval}; only 1..=255 is supported"),
        ));
    }
    let count = width as usize * height as usize;
    let data = if binary {
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::format(cur.pos, "expected whitespace after maxval")),
        }
        let end = cur.pos + count;
        if bytes.len() < end {
            return Err(Error::format(
                bytes.len(),
                format!("truncated raster: expected {count} bytes"),
            ));
        }
        let data = bytes[cur.pos..end].to_vec();
        if let Some(i) = data.iter().position(|&v| v as u32 > maxval) {
            return Err(Error::format(cur.pos + i, "sample exceeds maxval"));
        }
        data
    } else {
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            cur.skip_space_and_comments();
            if cur.pos >= bytes.len() {
                return Err(Error::format(cur.pos, "truncated raster"));
            }
            let at = cur.pos;
            let v = cur.number("sample")?;
            if v > maxval {
                return Err(Error::format(at, "sample exceeds maxval"));
            }
            data.push(v as u8);
        }
        data
    };
    GrayImage::from_raw(width, height, data)
}

/// Encodes as binary `P5` with maxval 255.
pub fn save_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_pgm(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, save_pgm(image)).map_err(|e| Error::io(path, e))
}
