//! Line fitting, tilt estimation, rotation of points and images, eye-corner
//! completion and the inter-ocular success metric.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::raster::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(&self, o: &Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn midpoint(&self, o: &Point2) -> Point2 {
        Point2::new(0.5 * (self.x + o.x), 0.5 * (self.y + o.y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub m: f64,
    pub c: f64,
    /// Root-mean-square vertical residual.
    pub residual: f64,
}

/// Minimum-norm least-squares solution of `A x = b` for an `n x 2` design
/// matrix, through the SVD pseudoinverse. Singular values below `1e-10`
/// times the largest are treated as zero.
pub fn svd_lls(a: &[[f64; 2]], b: &[f64]) -> Result<[f64; 2]> {
    if a.len() < 2 {
        return Err(Error::InsufficientPoints(a.len()));
    }
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("{} rows but {} targets", a.len(), b.len())));
    }
    let m = DMatrix::from_fn(a.len(), 2, |i, j| a[i][j]);
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let x = svd
        .solve(&DVector::from_column_slice(b), 1e-10 * smax)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok([x[0], x[1]])
}

/// Fits `y = m x + c` with rows `(x, 1)`.
pub fn fit_line(points: &[Point2]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    if points.iter().all(|p| p.x == points[0].x) {
        return Err(Error::VerticalLine);
    }
    let a: Vec<[f64; 2]> = points.iter().map(|p| [p.x, 1.0]).collect();
    let b: Vec<f64> = points.iter().map(|p| p.y).collect();
    let [m, c] = svd_lls(&a, &b)?;
    let ss: f64 = points.iter().map(|p| (m * p.x + c - p.y).powi(2)).sum();
    Ok(LineFit {
        m,
        c,
        residual: (ss / points.len() as f64).sqrt(),
    })
}

/// Tilt angle `atan(m)` of the line through the eye corners.
pub fn estimate_tilt(eye_corners: &[Point2]) -> Result<f64> {
    Ok(fit_line(eye_corners)?.m.atan())
}

/// `x = xc + (x' - xc) cos a - (y' - yc) sin a`,
/// `y = yc + (x' - xc) sin a + (y' - yc) cos a`.
/// With y pointing down, positive `alpha` turns clockwise on screen.
pub fn rotate_point(p: Point2, center: Point2, alpha: f64) -> Point2 {
    let (s, c) = alpha.sin_cos();
    let (dx, dy) = (p.x - center.x, p.y - center.y);
    Point2::new(center.x + dx * c - dy * s, center.y + dx * s + dy * c)
}

pub fn image_center(img: &GrayImage) -> Point2 {
    Point2::new((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0)
}

/// Rotates image content by `alpha` about `center`: the source pixel at `q`
/// lands at `rotate_point(q, center, alpha)`. Bilinear sampling; samples
/// outside the source read as black.
pub fn rotate_image(img: &GrayImage, center: Point2, alpha: f64) -> GrayImage {
    if alpha == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    let px = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            img.get(x as u32, y as u32) as f64
        }
    };
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let s = rotate_point(Point2::new(x as f64, y as f64), center, -alpha);
        let (fx, fy) = (s.x.floor(), s.y.floor());
        let (tx, ty) = (s.x - fx, s.y - fy);
        let (x0, y0) = (fx as i64, fy as i64);
        let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1, y0) * tx;
        let bot = px(x0, y0 + 1) * (1.0 - tx) + px(x0 + 1, y0 + 1) * tx;
        let v = top * (1.0 - ty) + bot * ty;
        (v + 0.5).floor().clamp(0.0, 255.0) as u8
    })
}

/// Eye corners in image orientation: "left" is the eye with smaller x.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EyeCorner {
    LeftOuter,
    LeftInner,
    RightInner,
    RightOuter,
}

impl EyeCorner {
    pub const ALL: [EyeCorner; 4] = [
        EyeCorner::LeftOuter,
        EyeCorner::LeftInner,
        EyeCorner::RightInner,
        EyeCorner::RightOuter,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Fills in the one missing corner from the other eye's corner-to-corner
/// vector, assuming both eyes share width and alignment. `corners` is
/// ordered as [`EyeCorner::ALL`].
pub fn infer_fourth_corner(corners: [Option<Point2>; 4]) -> Result<(EyeCorner, Point2)> {
    let missing: Vec<EyeCorner> = EyeCorner::ALL.into_iter().filter(|c| corners[c.index()].is_none()).collect();
    let [m] = missing.as_slice() else {
        return Err(Error::InvalidInput(format!(
            "exactly one eye corner must be missing, {} are",
            missing.len()
        )));
    };
    let get = |c: EyeCorner| corners[c.index()].expect("present");
    // Left-to-right vector across each eye.
    let across = |l: EyeCorner, r: EyeCorner| {
        let (a, b) = (get(l), get(r));
        Point2::new(b.x - a.x, b.y - a.y)
    };
    use EyeCorner::*;
    let p = match m {
        RightOuter => {
            let v = across(LeftOuter, LeftInner);
            let k = get(RightInner);
            Point2::new(k.x + v.x, k.y + v.y)
        }
        RightInner => {
            let v = across(LeftOuter, LeftInner);
            let k = get(RightOuter);
            Point2::new(k.x - v.x, k.y - v.y)
        }
        LeftOuter => {
            let v = across(RightInner, RightOuter);
            let k = get(LeftInner);
            Point2::new(k.x - v.x, k.y - v.y)
        }
        LeftInner => {
            let v = across(RightInner, RightOuter);
            let k = get(LeftOuter);
            Point2::new(k.x + v.x, k.y + v.y)
        }
    };
    Ok((*m, p))
}

/// Success iff the detection lies within `fraction` of the inter-ocular
/// distance of the truth, boundary included.
pub fn interocular_success(
    detected: Point2,
    truth: Point2,
    left_eye: Point2,
    right_eye: Point2,
    fraction: f64,
) -> Result<bool> {
    let iod = left_eye.dist(&right_eye);
    if iod == 0.0 {
        return Err(Error::MetricUndefined);
    }
    Ok(detected.dist(&truth) <= fraction * iod)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum TiltMode {
    #[default]
    None,
    Full,
    Half,
}

impl TiltMode {
    pub const ALL: [TiltMode; 3] = [TiltMode::None, TiltMode::Full, TiltMode::Half];

    pub fn name(self) -> &'static str {
        match self {
            TiltMode::None => "none",
            TiltMode::Full => "full",
            TiltMode::Half => "half",
        }
    }
}

impl fmt::Display for TiltMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TiltMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TiltMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown tilt mode {s:?} (none|full|half)")))
    }
}

/// Tilt carried between frames of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TiltState {
    pub alpha: f64,
    pub mode: TiltMode,
}

impl TiltState {
    pub fn new(mode: TiltMode) -> Self {
        TiltState { alpha: 0.0, mode }
    }

    /// Angle by which the next frame is counter-rotated.
    pub fn correction(&self) -> f64 {
        match self.mode {
            TiltMode::None => 0.0,
            TiltMode::Full => self.alpha,
            TiltMode::Half => 0.5 * self.alpha,
        }
    }

    pub fn reset(&mut self) {
        self.alpha = 0.0;
    }
}
