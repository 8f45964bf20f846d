//! Ground-truth markup, positive and negative sample generation, the sample
//! description log and the FPSET1 patch archive.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{estimate_tilt, image_center, rotate_image, rotate_point, Point2};
use crate::raster::{resample_region, GrayImage, Rect};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Mid,
}

/// The 20-point markup scheme. "Left" and "right" refer to image
/// orientation: left points have the smaller x on an upright face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Landmark {
    LeftPupil = 0,
    RightPupil,
    LeftMouthCorner,
    RightMouthCorner,
    LeftBrowOuter,
    LeftBrowInner,
    RightBrowInner,
    RightBrowOuter,
    LeftTemple,
    LeftEyeOuter,
    LeftEyeInner,
    RightEyeInner,
    RightEyeOuter,
    RightTemple,
    NoseTip,
    LeftNostril,
    RightNostril,
    UpperLip,
    LowerLip,
    Chin,
}

pub const SCHEME_SIZE: usize = 20;

impl Landmark {
    pub const ALL: [Landmark; SCHEME_SIZE] = [
        Landmark::LeftPupil,
        Landmark::RightPupil,
        Landmark::LeftMouthCorner,
        Landmark::RightMouthCorner,
        Landmark::LeftBrowOuter,
        Landmark::LeftBrowInner,
        Landmark::RightBrowInner,
        Landmark::RightBrowOuter,
        Landmark::LeftTemple,
        Landmark::LeftEyeOuter,
        Landmark::LeftEyeInner,
        Landmark::RightEyeInner,
        Landmark::RightEyeOuter,
        Landmark::RightTemple,
        Landmark::NoseTip,
        Landmark::LeftNostril,
        Landmark::RightNostril,
        Landmark::UpperLip,
        Landmark::LowerLip,
        Landmark::Chin,
    ];

    /// The fourteen points found by the detector.
    pub const DETECTED: [Landmark; 14] = [
        Landmark::LeftBrowOuter,
        Landmark::LeftBrowInner,
        Landmark::RightBrowInner,
        Landmark::RightBrowOuter,
        Landmark::LeftEyeOuter,
        Landmark::LeftEyeInner,
        Landmark::RightEyeInner,
        Landmark::RightEyeOuter,
        Landmark::LeftPupil,
        Landmark::RightPupil,
        Landmark::LeftNostril,
        Landmark::RightNostril,
        Landmark::LeftMouthCorner,
        Landmark::RightMouthCorner,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Landmark> {
        Landmark::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        use Landmark::*;
        match self {
            LeftPupil => "LEFT_PUPIL",
            RightPupil => "RIGHT_PUPIL",
            LeftMouthCorner => "LEFT_MOUTH_CORNER",
            RightMouthCorner => "RIGHT_MOUTH_CORNER",
            LeftBrowOuter => "LEFT_BROW_OUTER",
            LeftBrowInner => "LEFT_BROW_INNER",
            RightBrowInner => "RIGHT_BROW_INNER",
            RightBrowOuter => "RIGHT_BROW_OUTER",
            LeftTemple => "LEFT_TEMPLE",
            LeftEyeOuter => "LEFT_EYE_OUTER",
            LeftEyeInner => "LEFT_EYE_INNER",
            RightEyeInner => "RIGHT_EYE_INNER",
            RightEyeOuter => "RIGHT_EYE_OUTER",
            RightTemple => "RIGHT_TEMPLE",
            NoseTip => "NOSE_TIP",
            LeftNostril => "LEFT_NOSTRIL",
            RightNostril => "RIGHT_NOSTRIL",
            UpperLip => "UPPER_LIP",
            LowerLip => "LOWER_LIP",
            Chin => "CHIN",
        }
    }

    pub fn side(self) -> Side {
        let n = self.name();
        if n.starts_with("LEFT_") {
            Side::Left
        } else if n.starts_with("RIGHT_") {
            Side::Right
        } else {
            Side::Mid
        }
    }

    /// Left-right counterpart; midline points map to themselves.
    pub fn mirrored(self) -> Landmark {
        let n = self.name();
        let m = if let Some(r) = n.strip_prefix("LEFT_") {
            format!("RIGHT_{r}")
        } else if let Some(r) = n.strip_prefix("RIGHT_") {
            format!("LEFT_{r}")
        } else {
            return self;
        };
        m.parse().expect("every sided landmark has a counterpart")
    }
}

impl fmt::Display for Landmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Landmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(id) = s.parse::<usize>() {
            return Landmark::from_id(id).ok_or_else(|| Error::InvalidInput(format!("landmark id {id} out of range")));
        }
        let up = s.to_ascii_uppercase();
        Landmark::ALL
            .into_iter()
            .find(|l| l.name() == up)
            .ok_or_else(|| Error::InvalidInput(format!("unknown landmark {s:?}")))
    }
}

pub fn parse_points(text: &str) -> Result<Vec<Point2>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (n, l) = lines.next().ok_or_else(|| Error::parse(1, "empty points file"))?;
    if l != "PTS 1" {
        return Err(Error::parse(n, format!("expected \"PTS 1\", found {l:?}")));
    }
    let (n, l) = lines.next().ok_or_else(|| Error::parse(2, "missing count line"))?;
    let count: usize = l
        .strip_prefix("n ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::parse(n, format!("expected \"n <count>\", found {l:?}")))?;
    let mut pts = Vec::with_capacity(count.min(4096));
    let mut last = n;
    for (n, l) in lines {
        last = n;
        if pts.len() == count {
            return Err(Error::parse(n, format!("more than the declared {count} points")));
        }
        let mut it = l.split_ascii_whitespace();
        let mut coord = || -> Result<f64> {
            let t = it.next().ok_or_else(|| Error::parse(n, "expected \"<x> <y>\""))?;
            let v: f64 = t.parse().map_err(|_| Error::parse(n, format!("non-numeric token {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(n, format!("non-finite coordinate {t:?}")))
            }
        };
        let p = Point2::new(coord()?, coord()?);
        if let Some(t) = it.next() {
            return Err(Error::parse(n, format!("unexpected token {t:?}")));
        }
        pts.push(p);
    }
    if pts.len() != count {
        return Err(Error::parse(
            last,
            format!("declared {count} points, found {}", pts.len()),
        ));
    }
    Ok(pts)
}

pub fn write_points(points: &[Point2]) -> String {
    let mut s = format!("PTS 1\nn {}\n", points.len());
    for p in points {
        let _ = writeln!(s, "{} {}", p.x, p.y);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Markup {
    pub image_path: String,
    pub points: Vec<Point2>,
}

impl Markup {
    pub fn new(image_path: impl Into<String>, points: Vec<Point2>) -> Result<Self> {
        if points.len() != SCHEME_SIZE {
            return Err(Error::InvalidInput(format!(
                "markup has {} points, scheme needs {SCHEME_SIZE}",
                points.len()
            )));
        }
        Ok(Markup {
            image_path: image_path.into(),
            points,
        })
    }

    pub fn point(&self, l: Landmark) -> Point2 {
        self.points[l.id()]
    }

    pub fn eye_corners(&self) -> [Point2; 4] {
        [
            self.point(Landmark::LeftEyeOuter),
            self.point(Landmark::LeftEyeInner),
            self.point(Landmark::RightEyeInner),
            self.point(Landmark::RightEyeOuter),
        ]
    }

    pub fn left_eye_width(&self) -> f64 {
        self.point(Landmark::LeftEyeOuter).dist(&self.point(Landmark::LeftEyeInner))
    }

    pub fn right_eye_width(&self) -> f64 {
        self.point(Landmark::RightEyeOuter).dist(&self.point(Landmark::RightEyeInner))
    }

    /// Eye width on the landmark's side; midline points use the mean.
    pub fn local_eye_width(&self, l: Landmark) -> f64 {
        match l.side() {
            Side::Left => self.left_eye_width(),
            Side::Right => self.right_eye_width(),
            Side::Mid => 0.5 * (self.left_eye_width() + self.right_eye_width()),
        }
    }

    pub fn eye_centers(&self) -> (Point2, Point2) {
        (
            self.point(Landmark::LeftEyeOuter).midpoint(&self.point(Landmark::LeftEyeInner)),
            self.point(Landmark::RightEyeInner).midpoint(&self.point(Landmark::RightEyeOuter)),
        )
    }

    pub fn check_bounds(&self, w: u32, h: u32) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64) {
                return Err(Error::Bounds(format!(
                    "{}: point {i} ({}, {}) outside {w}x{h} image",
                    self.image_path, p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiltCorrected {
    pub image: GrayImage,
    pub markup: Markup,
    pub alpha: f64,
    /// Set when the tilt could not be estimated and nothing was rotated.
    pub warning: Option<String>,
}

/// Levels the eye-corner line: rotates image and points by `-alpha` about
/// the image centre.
pub fn tilt_correct_markup(image: &GrayImage, markup: &Markup) -> TiltCorrected {
    let corners = markup.eye_corners();
    let alpha = if corners.iter().all(|c| c.y == corners[0].y) {
        Ok(0.0)
    } else {
        estimate_tilt(&corners)
    };
    match alpha {
        Ok(a) if a != 0.0 => {
            let c = image_center(image);
            TiltCorrected {
                image: rotate_image(image, c, -a),
                markup: Markup {
                    image_path: markup.image_path.clone(),
                    points: markup.points.iter().map(|&p| rotate_point(p, c, -a)).collect(),
                },
                alpha: a,
                warning: None,
            }
        }
        other => TiltCorrected {
            image: image.clone(),
            markup: markup.clone(),
            alpha: 0.0,
            warning: other.err().map(|e| format!("{}: tilt not corrected: {e}", markup.image_path)),
        },
    }
}

/// Smallest sample side produced, so that the small scale `s - 2` still has
/// a centre pixel with a ring around it.
pub const MIN_SIDE: u32 = 7;

/// Nearest odd integer, exact midpoints going to the larger.
pub fn nearest_odd(v: f64) -> i64 {
    2 * ((v - 1.0) / 2.0 + 0.5).floor() as i64 + 1
}

/// Per-image odd sample side: local eye widths rescaled so their mean is
/// `base`, rounded to the nearest odd integer and clamped to [`MIN_SIDE`].
/// Images with zero eye width get `None`.
pub fn compute_scales(markups: &[Markup], point: Landmark, base: f64) -> Vec<Option<u32>> {
    let widths: Vec<f64> = markups.iter().map(|m| m.local_eye_width(point)).collect();
    let valid: Vec<f64> = widths.iter().copied().filter(|&w| w > 0.0).collect();
    if valid.is_empty() {
        return vec![None; markups.len()];
    }
    let factor = base / (valid.iter().sum::<f64>() / valid.len() as f64);
    widths
        .iter()
        .map(|&w| (w > 0.0).then(|| nearest_odd(w * factor).max(MIN_SIDE as i64) as u32))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleDescription {
    pub image_path: String,
    pub rects: Vec<Rect>,
}

fn round_point(p: Point2) -> (i64, i64) {
    ((p.x + 0.5).floor() as i64, (p.y + 0.5).floor() as i64)
}

/// Squares of side `s + 2`, `s` and `s - 2` centred on `point`, largest first.
pub fn positive_descriptions(
    image_path: &str,
    image_w: u32,
    image_h: u32,
    point: Point2,
    s: u32,
) -> Result<SampleDescription> {
    if s % 2 == 0 || s < MIN_SIDE {
        return Err(Error::InvalidInput(format!("sample side {s} must be odd and >= {MIN_SIDE}")));
    }
    let (cx, cy) = round_point(point);
    let mut rects = Vec::with_capacity(3);
    for side in [s + 2, s, s - 2] {
        let half = ((side - 1) / 2) as i64;
        let (x, y) = (cx - half, cy - half);
        if x < 0 || y < 0 || x + side as i64 > image_w as i64 || y + side as i64 > image_h as i64 {
            return Err(Error::Bounds(format!(
                "{image_path}: {side}x{side} sample at ({x}, {y}) leaves the {image_w}x{image_h} image"
            )));
        }
        rects.push(Rect::new(x as u32, y as u32, side, side));
    }
    Ok(SampleDescription {
        image_path: image_path.to_string(),
        rects,
    })
}

/// One line per image: `<path> <n> x y w h ...`. Paths must not contain
/// whitespace.
pub fn write_description_log(descriptions: &[SampleDescription]) -> String {
    let mut s = String::new();
    for d in descriptions {
        let _ = write!(s, "{} {}", d.image_path, d.rects.len());
        for r in &d.rects {
            let _ = write!(s, " {} {} {} {}", r.x, r.y, r.w, r.h);
        }
        s.push('\n');
    }
    s
}

pub fn parse_description_log(text: &str) -> Result<Vec<SampleDescription>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let toks: Vec<&str> = line.split_ascii_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let count: usize = toks
            .get(1)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(n, "expected \"<path> <count>\""))?;
        if toks.len() != 2 + 4 * count {
            return Err(Error::parse(
                n,
                format!("{count} rectangles need {} numbers, found {}", 4 * count, toks.len() - 2),
            ));
        }
        let nums: Vec<u32> = toks[2..]
            .iter()
            .map(|t| t.parse().map_err(|_| Error::parse(n, format!("bad integer {t:?}"))))
            .collect::<Result<_>>()?;
        out.push(SampleDescription {
            image_path: toks[0].to_string(),
            rects: nums.chunks(4).map(|c| Rect::new(c[0], c[1], c[2], c[3])).collect(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeParams {
    pub count_inner: usize,
    pub count_outer: usize,
    /// Admissible Chebyshev distances of inner sample centres.
    pub inner_distances: Vec<u32>,
    /// Outer centres closer than this (Chebyshev) are redrawn.
    pub outer_exclusion: u32,
    pub max_attempts: usize,
    pub patch_side: u32,
}

impl Default for NegativeParams {
    fn default() -> Self {
        NegativeParams {
            count_inner: 8,
            count_outer: 8,
            inner_distances: vec![3, 4, 5],
            outer_exclusion: 6,
            max_attempts: 1000,
            patch_side: 13,
        }
    }
}

/// Generator for image `index` under a global seed; independent of
/// processing order.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform point on the Chebyshev ring of radius `d` around the origin.
fn ring_offset(rng: &mut impl Rng, d: i64) -> (i64, i64) {
    let k = rng.random_range(0..8 * d);
    let side = k / (2 * d);
    let t = k % (2 * d) - d;
    match side {
        0 => (t, -d),
        1 => (d, t),
        2 => (-t, d),
        _ => (-d, -t),
    }
}

/// Inner negatives on Chebyshev rings around `point`, then outer negatives
/// uniform over the eye-width square around it. Returned rects are
/// `patch_side` squares, inner first.
pub fn generate_negatives(
    image_path: &str,
    image_w: u32,
    image_h: u32,
    point: Point2,
    eye_width: f64,
    params: &NegativeParams,
    rng: &mut impl Rng,
) -> Result<Vec<Rect>> {
    let (cx, cy) = round_point(point);
    let side = params.patch_side as i64;
    let half = (side - 1) / 2;
    let place = |dx: i64, dy: i64| {
        let (x, y) = (cx + dx - half, cy + dy - half);
        (x >= 0 && y >= 0 && x + side <= image_w as i64 && y + side <= image_h as i64)
            .then(|| Rect::new(x as u32, y as u32, side as u32, side as u32))
    };
    let fail = |what: &str, got: usize, want: usize| Error::Generation {
        image: image_path.to_string(),
        msg: format!("placed {got} of {want} {what} negatives in {} attempts", params.max_attempts),
    };
    let mut out = Vec::with_capacity(params.count_inner + params.count_outer);
    if params.count_inner > 0 && params.inner_distances.is_empty() {
        return Err(Error::InvalidInput("no inner distances".into()));
    }
    let mut attempts = 0;
    while out.len() < params.count_inner {
        if attempts == params.max_attempts {
            return Err(fail("inner", out.len(), params.count_inner));
        }
        attempts += 1;
        let d = params.inner_distances[rng.random_range(0..params.inner_distances.len())] as i64;
        let (dx, dy) = ring_offset(rng, d);
        if let Some(r) = place(dx, dy) {
            out.push(r);
        }
    }
    let reach = (eye_width / 2.0).floor() as i64;
    let excl = params.outer_exclusion as i64;
    let mut attempts = 0;
    while out.len() < params.count_inner + params.count_outer {
        if attempts == params.max_attempts {
            return Err(fail("outer", out.len() - params.count_inner, params.count_outer));
        }
        attempts += 1;
        let (dx, dy) = (rng.random_range(-reach..=reach), rng.random_range(-reach..=reach));
        if dx.abs().max(dy.abs()) < excl {
            continue;
        }
        if let Some(r) = place(dx, dy) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Bilinear resampling of `rect` to `target_side` squared; a copy when the
/// sizes already match.
pub fn extract_and_rescale(image: &GrayImage, rect: Rect, target_side: u32) -> Result<GrayImage> {
    resample_region(image, rect, target_side, target_side)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub w: u32,
    pub h: u32,
    pub records: Vec<(bool, GrayImage)>,
}

const FPSET_MAGIC: &[u8; 6] = b"FPSET1";
pub const FPSET_HEADER_LEN: usize = 14;

impl PatchSet {
    pub fn new(w: u32, h: u32) -> Self {
        PatchSet {
            w,
            h,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, label: bool, patch: GrayImage) -> Result<()> {
        if (patch.width(), patch.height()) != (self.w, self.h) {
            return Err(Error::InvalidInput(format!(
                "{}x{} patch in a {}x{} set",
                patch.width(),
                patch.height(),
                self.w,
                self.h
            )));
        }
        self.records.push((label, patch));
        Ok(())
    }

    pub fn patches(&self, label: bool) -> Vec<GrayImage> {
        self.records.iter().filter(|r| r.0 == label).map(|r| r.1.clone()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (w, h) = (
            u16::try_from(self.w).map_err(|_| Error::InvalidInput("patch width exceeds 65535".into()))?,
            u16::try_from(self.h).map_err(|_| Error::InvalidInput("patch height exceeds 65535".into()))?,
        );
        let count = u32::try_from(self.records.len()).map_err(|_| Error::InvalidInput("too many records".into()))?;
        let mut out = Vec::with_capacity(FPSET_HEADER_LEN + self.records.len() * (1 + (self.w * self.h) as usize));
        out.extend_from_slice(FPSET_MAGIC);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        for (label, p) in &self.records {
            out.push(*label as u8);
            out.extend_from_slice(p.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<PatchSet> {
        if b.len() < FPSET_HEADER_LEN {
            return Err(Error::format(b.len(), "truncated header"));
        }
        if &b[..6] != FPSET_MAGIC {
            return Err(Error::format(0, "bad magic, expected FPSET1"));
        }
        let count = u32::from_le_bytes(b[6..10].try_into().expect("4 bytes")) as usize;
        let w = u16::from_le_bytes([b[10], b[11]]) as u32;
        let h = u16::from_le_bytes([b[12], b[13]]) as u32;
        let rec = 1 + (w * h) as usize;
        let expected = FPSET_HEADER_LEN as u64 + count as u64 * rec as u64;
        if b.len() as u64 != expected {
            return Err(Error::format(
                b.len().min(expected as usize),
                format!("{count} records of {w}x{h} need {expected} bytes, file has {}", b.len()),
            ));
        }
        let mut records = Vec::with_capacity(count);
        for (i, chunk) in b[FPSET_HEADER_LEN..].chunks_exact(rec).enumerate() {
            let label = match chunk[0] {
                0 => false,
                1 => true,
                v => return Err(Error::format(FPSET_HEADER_LEN + i * rec, format!("label {v} is not 0 or 1"))),
            };
            records.push((label, GrayImage::from_raw(w, h, chunk[1..].to_vec())?));
        }
        Ok(PatchSet { w, h, records })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<PatchSet> {
        let path = path.as_ref();
        PatchSet::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// One annotated training image.
#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub image: GrayImage,
    pub markup: Markup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareParams {
    pub point: Landmark,
    pub window: u32,
    pub base_side: f64,
    pub negatives: NegativeParams,
    pub seed: u64,
}

impl Default for PrepareParams {
    fn default() -> Self {
        PrepareParams {
            point: Landmark::LeftEyeInner,
            window: 13,
            base_side: 13.0,
            negatives: NegativeParams::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub descriptions: Vec<SampleDescription>,
    pub positives: PatchSet,
    pub negatives: PatchSet,
    /// Per-image notes about skipped images or uncorrected tilt.
    pub warnings: Vec<String>,
}

/// Positive and negative archives for one left-side or midline landmark.
/// Positives come from tilt-corrected images at three scales; negatives
/// are cut unscaled from the original images.
pub fn prepare(images: &[AnnotatedImage], params: &PrepareParams) -> Result<Prepared> {
    if params.point.side() == Side::Right {
        return Err(Error::InvalidInput(format!(
            "{} is a right-side point; train {} and mirror the cascade",
            params.point,
            params.point.mirrored()
        )));
    }
    if params.negatives.patch_side != params.window {
        return Err(Error::InvalidInput("negative patch side must equal the window".into()));
    }
    let corrected: Vec<TiltCorrected> = images
        .par_iter()
        .map(|a| tilt_correct_markup(&a.image, &a.markup))
        .collect();
    let markups: Vec<Markup> = corrected.iter().map(|c| c.markup.clone()).collect();
    let scales = compute_scales(&markups, params.point, params.base_side);
    type PerImage = (Option<(SampleDescription, Vec<GrayImage>)>, Vec<GrayImage>, Vec<String>);
    let per: Vec<Result<PerImage>> = images
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let c = &corrected[i];
            let mut warns: Vec<String> = c.warning.iter().cloned().collect();
            let pos = match scales[i] {
                None => {
                    warns.push(format!("{}: zero eye width, skipped", a.markup.image_path));
                    None
                }
                Some(s) => match positive_descriptions(
                    &a.markup.image_path,
                    c.image.width(),
                    c.image.height(),
                    c.markup.point(params.point),
                    s,
                ) {
                    Ok(d) => {
                        let patches = d
                            .rects
                            .iter()
                            .map(|&r| extract_and_rescale(&c.image, r, params.window))
                            .collect::<Result<Vec<_>>>()?;
                        Some((d, patches))
                    }
                    Err(e) => {
                        warns.push(format!("skipped: {e}"));
                        None
                    }
                },
            };
            let mut rng = image_rng(params.seed, i as u64);
            let rects = generate_negatives(
                &a.markup.image_path,
                a.image.width(),
                a.image.height(),
                a.markup.point(params.point),
                a.markup.local_eye_width(params.point),
                &params.negatives,
                &mut rng,
            )?;
            let negs = rects.iter().map(|&r| a.image.crop(r)).collect::<Result<Vec<_>>>()?;
            Ok((pos, negs, warns))
        })
        .collect();
    let mut out = Prepared {
        descriptions: Vec::new(),
        positives: PatchSet::new(params.window, params.window),
        negatives: PatchSet::new(params.window, params.window),
        warnings: Vec::new(),
    };
    for r in per {
        let (pos, negs, warns) = r?;
        if let Some((d, patches)) = pos {
            out.descriptions.push(d);
            for p in patches {
                out.positives.push(true, p)?;
            }
        }
        for n in negs {
            out.negatives.push(false, n)?;
        }
        out.warnings.extend(warns);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn landmark_table() {
        assert_eq!(Landmark::from_id(10), Some(Landmark::LeftEyeInner));
        assert_eq!(Landmark::from_id(20), None);
        for l in Landmark::ALL {
            assert_eq!(l.mirrored().mirrored(), l);
            assert_eq!(l.name().parse::<Landmark>().unwrap(), l);
            assert_eq!(l.id().to_string().parse::<Landmark>().unwrap(), l);
        }
        assert_eq!(Landmark::LeftEyeOuter.mirrored(), Landmark::RightEyeOuter);
        assert_eq!(Landmark::Chin.side(), Side::Mid);
        let d = Landmark::DETECTED;
        assert!(d.iter().all(|l| l.side() != Side::Mid && d.contains(&l.mirrored())));
    }

    #[test]
    fn points_file() {
        assert_eq!(parse_points("PTS 1\nn 1\n3.5 7.25\n").unwrap(), vec![Point2::new(3.5, 7.25)]);
        assert!(matches!(parse_points("PTS 1\nn 2\n3.5 7.25\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_points("PTS 1\nn 1\n3.5 x\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_points("PTS 1\nn 1\n1 2\n3 4\n"), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(parse_points("PTS 2\n"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn points_round_trip(pts in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 0..30)) {
            let pts: Vec<Point2> = pts.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
            let text = write_points(&pts);
            prop_assert_eq!(&parse_points(&text).unwrap(), &pts);
            prop_assert_eq!(write_points(&parse_points(&text).unwrap()), text);
        }

        #[test]
        fn log_round_trip(entries in proptest::collection::vec(("[a-z0-9_/.]{1,12}", proptest::collection::vec((0u32..500, 0u32..500, 1u32..60), 1..4)), 0..6)) {
            let ds: Vec<SampleDescription> = entries
                .into_iter()
                .map(|(p, rs)| SampleDescription { image_path: p, rects: rs.into_iter().map(|(x, y, s)| Rect::new(x, y, s, s)).collect() })
                .collect();
            let text = write_description_log(&ds);
            prop_assert_eq!(&parse_description_log(&text).unwrap(), &ds);
            prop_assert_eq!(write_description_log(&parse_description_log(&text).unwrap()), text);
        }

        #[test]
        fn patchset_round_trip(w in 1u32..8, h in 1u32..8, labels in proptest::collection::vec(any::<bool>(), 0..10), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set = PatchSet::new(w, h);
            for l in labels {
                set.push(l, GrayImage::from_fn(w, h, |_, _| rng.random())).unwrap();
            }
            let bytes = set.to_bytes().unwrap();
            let back = PatchSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn positives_are_nested_odd_squares(px in 20.0f64..80.0, py in 20.0f64..80.0, k in 3u32..8) {
            let s = 2 * k + 1;
            let d = positive_descriptions("a.pgm", 100, 100, Point2::new(px, py), s).unwrap();
            let (cx, cy) = round_point(Point2::new(px, py));
            for (i, r) in d.rects.iter().enumerate() {
                prop_assert!(r.w == r.h && r.w % 2 == 1);
                prop_assert_eq!((r.x as i64 + (r.w as i64 - 1) / 2, r.y as i64 + (r.h as i64 - 1) / 2), (cx, cy));
                if i > 0 {
                    let outer = d.rects[i - 1];
                    prop_assert!(r.x > outer.x && r.y > outer.y && r.right() < outer.right() && r.bottom() < outer.bottom());
                }
            }
        }
    }

    #[test]
    fn log_line_example() {
        let d = positive_descriptions("BioID_0000.pgm", 384, 286, Point2::new(196.0, 175.0), 23).unwrap();
        assert_eq!(
            d.rects,
            vec![Rect::new(184, 163, 25, 25), Rect::new(185, 164, 23, 23), Rect::new(186, 165, 21, 21)]
        );
        assert_eq!(
            write_description_log(&[d]),
            "BioID_0000.pgm 3 184 163 25 25 185 164 23 23 186 165 21 21\n"
        );
        assert_eq!(write_description_log(&[]), "");
        assert!(positive_descriptions("a", 30, 30, Point2::new(3.0, 15.0), 9).is_err());
    }

    #[test]
    fn patchset_sizes_and_errors() {
        let set = PatchSet::new(13, 13);
        assert_eq!(set.to_bytes().unwrap().len(), FPSET_HEADER_LEN);
        let mut one = set.clone();
        one.push(true, GrayImage::filled(13, 13, 4)).unwrap();
        let b = one.to_bytes().unwrap();
        assert_eq!(b.len(), FPSET_HEADER_LEN + 170);
        assert!(matches!(PatchSet::from_bytes(&b[..b.len() - 1]), Err(Error::Format { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(PatchSet::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = b;
        bad[FPSET_HEADER_LEN] = 2;
        assert!(matches!(PatchSet::from_bytes(&bad), Err(Error::Format { offset: 14, .. })));
        assert!(one.push(false, GrayImage::filled(12, 13, 0)).is_err());
    }

    fn level_markup(scale: f64) -> Markup {
        let mut pts = vec![Point2::new(50.0, 50.0); SCHEME_SIZE];
        pts[Landmark::LeftEyeOuter.id()] = Point2::new(30.0, 40.0);
        pts[Landmark::LeftEyeInner.id()] = Point2::new(30.0 + scale, 40.0);
        pts[Landmark::RightEyeInner.id()] = Point2::new(60.0, 40.0);
        pts[Landmark::RightEyeOuter.id()] = Point2::new(60.0 + scale, 40.0);
        Markup::new("m.pgm", pts).unwrap()
    }

    #[test]
    fn odd_rounding_and_scales() {
        assert_eq!(nearest_odd(11.304), 11);
        assert_eq!(nearest_odd(14.696), 15);
        assert_eq!(nearest_odd(12.0), 13);
        assert_eq!(nearest_odd(13.0), 13);
        assert_eq!(nearest_odd(14.0), 15);
        let ms = vec![level_markup(20.0), level_markup(20.0)];
        assert_eq!(compute_scales(&ms, Landmark::LeftEyeInner, 13.0), vec![Some(13), Some(13)]);
        let ms = vec![level_markup(20.0), level_markup(26.0)];
        assert_eq!(compute_scales(&ms, Landmark::LeftEyeInner, 13.0), vec![Some(11), Some(15)]);
        let ms = vec![level_markup(2.0), level_markup(60.0), level_markup(0.0)];
        assert_eq!(compute_scales(&ms, Landmark::LeftEyeInner, 13.0), vec![Some(7), Some(25), None]);
    }

    #[test]
    fn tilt_correction() {
        let img = GrayImage::from_fn(100, 90, |x, y| (x * 2 + y) as u8);
        let m = level_markup(15.0);
        let t = tilt_correct_markup(&img, &m);
        assert_eq!((t.alpha, &t.image, &t.markup), (0.0, &img, &m));

        let c = image_center(&img);
        let phi = 10f64.to_radians();
        let rotated = Markup {
            points: m.points.iter().map(|&p| rotate_point(p, c, phi)).collect(),
            ..m.clone()
        };
        let t = tilt_correct_markup(&img, &rotated);
        assert!((t.alpha - phi).abs() < 1e-9);
        let fit = crate::geom::fit_line(&t.markup.eye_corners()).unwrap();
        assert!(fit.m.abs() < 1e-6);
        let before = crate::geom::fit_line(&rotated.eye_corners()).unwrap();
        assert!((fit.residual - before.residual).abs() < 1e-9);

        let mut vertical = m.clone();
        for (k, l) in [Landmark::LeftEyeOuter, Landmark::LeftEyeInner, Landmark::RightEyeInner, Landmark::RightEyeOuter]
            .into_iter()
            .enumerate()
        {
            vertical.points[l.id()] = Point2::new(40.0, 10.0 * k as f64);
        }
        let t = tilt_correct_markup(&img, &vertical);
        assert!(t.warning.is_some() && t.alpha == 0.0 && t.markup == vertical);
    }

    #[test]
    fn negatives_respect_geometry_and_seed() {
        let p = Point2::new(40.0, 40.0);
        let params = NegativeParams::default();
        let gen = |seed| generate_negatives("a", 80, 80, p, 24.0, &params, &mut image_rng(seed, 3)).unwrap();
        let a = gen(1);
        assert_eq!(a, gen(1));
        assert_ne!(a, gen(2));
        assert_eq!(a.len(), 16);
        for (i, r) in a.iter().enumerate() {
            assert_eq!((r.w, r.h), (13, 13));
            let (cx, cy) = (r.x as i64 + 6, r.y as i64 + 6);
            let d = (cx - 40).abs().max((cy - 40).abs());
            if i < 8 {
                assert!((3..=5).contains(&d));
            } else {
                assert!((6..=12).contains(&d));
            }
            // The feature point is outside the 3x3 centre block.
            assert!(d > 1);
        }
        // No admissible outer centre within a tiny eye width.
        let e = generate_negatives("tiny.pgm", 80, 80, p, 8.0, &params, &mut image_rng(0, 0));
        assert!(matches!(e, Err(Error::Generation { ref image, .. }) if image == "tiny.pgm"));
    }

    #[test]
    fn negative_distribution() {
        let params = NegativeParams {
            count_inner: 1,
            count_outer: 1,
            ..Default::default()
        };
        let mut rng = image_rng(7, 0);
        let mut dist = [0usize; 3];
        let mut outer = std::collections::HashMap::<(i64, i64), usize>::new();
        let n = 100_000;
        for _ in 0..n {
            let r = generate_negatives("a", 200, 200, Point2::new(100.0, 100.0), 24.0, &params, &mut rng).unwrap();
            let (dx, dy) = (r[0].x as i64 + 6 - 100, r[0].y as i64 + 6 - 100);
            dist[(dx.abs().max(dy.abs()) - 3) as usize] += 1;
            *outer.entry((r[1].x as i64 + 6 - 100, r[1].y as i64 + 6 - 100)).or_default() += 1;
        }
        let e = n as f64 / 3.0;
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in dist {
            assert!((c as f64 - e).abs() < 3.0 * sd, "{dist:?}");
        }
        // 25x25 square minus the 11x11 exclusion block.
        let cells = 25 * 25 - 11 * 11;
        assert_eq!(outer.len(), cells);
        let e = n as f64 / cells as f64;
        let chi2: f64 = outer.values().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 503 degrees of freedom; 0.999 quantile is about 609.
        assert!(chi2 < 609.0, "chi2 {chi2}");
    }

    #[test]
    fn rescale_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let img = GrayImage::from_fn(40, 40, |_, _| rng.random());
        let r = Rect::new(5, 7, 13, 13);
        assert_eq!(extract_and_rescale(&img, r, 13).unwrap(), img.crop(r).unwrap());
        let u = GrayImage::filled(40, 40, 77);
        assert_eq!(extract_and_rescale(&u, Rect::new(1, 2, 29, 29), 13).unwrap(), GrayImage::filled(13, 13, 77));
        let mut blob = GrayImage::filled(27, 27, 10);
        for y in 12..15 {
            for x in 12..15 {
                blob.set(x, y, 250);
            }
        }
        let s = extract_and_rescale(&blob, Rect::new(0, 0, 27, 27), 13).unwrap();
        let max = s.as_bytes().iter().copied().max().unwrap();
        assert_eq!(s.get(6, 6), max);
        assert!(extract_and_rescale(&img, Rect::new(30, 30, 13, 13), 13).is_err());
    }
}
