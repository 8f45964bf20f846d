//! Haar-like features: kinds, cell layouts, enumeration, scaling and
//! evaluation.
//!
//! Cell layouts at unit scale, with `(x, y)` the feature's top-left pixel and
//! `(w, h)` the size of one cell. Weights in brackets.
//!
//! ```text
//! EDGE_H  [-1|+1]          EDGE_V  [-1]          LINE_H  [-1|+2|-1]
//!                                  [+1]
//!
//! LINE_V  [-1]             DIAG    [-1|+1]       CENTER_SURROUND  3w x 3h [-1]
//!         [+2]                     [+1|-1]                 with the middle
//!         [-1]                                             w x h cell [+9]
//! ```
//!
//! The four 45 degree kinds take `(x, y)` as the topmost pixel of the shape
//! and lay their cells out in diagonal coordinates (see [`crate::raster`]).
//! Each cell spans `2w` along `s = x + y` (down-right) and `2h` along
//! `d = y - x` (down-left):
//!
//! ```text
//! EDGE_H_45  two cells along s     [-1, +1]
//! EDGE_V_45  two cells along d     [-1, +1]
//! LINE_H_45  three cells along s   [-1, +2, -1]
//! LINE_V_45  three cells along d   [-1, +2, -1]
//! ```
//!
//! Every layout has zero total weight-times-area, so a uniform image yields 0.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::{IntegralTables, Rect, RotRect};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    EdgeH,
    EdgeV,
    LineH,
    LineV,
    Diag,
    CenterSurround,
    EdgeH45,
    EdgeV45,
    LineH45,
    LineV45,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 10] = [
        FeatureKind::EdgeH,
        FeatureKind::EdgeV,
        FeatureKind::LineH,
        FeatureKind::LineV,
        FeatureKind::Diag,
        FeatureKind::CenterSurround,
        FeatureKind::EdgeH45,
        FeatureKind::EdgeV45,
        FeatureKind::LineH45,
        FeatureKind::LineV45,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::EdgeH => "EDGE_H",
            FeatureKind::EdgeV => "EDGE_V",
            FeatureKind::LineH => "LINE_H",
            FeatureKind::LineV => "LINE_V",
            FeatureKind::Diag => "DIAG",
            FeatureKind::CenterSurround => "CENTER_SURROUND",
            FeatureKind::EdgeH45 => "EDGE_H_45",
            FeatureKind::EdgeV45 => "EDGE_V_45",
            FeatureKind::LineH45 => "LINE_H_45",
            FeatureKind::LineV45 => "LINE_V_45",
        }
    }

    pub fn is_rotated(self) -> bool {
        matches!(
            self,
            FeatureKind::EdgeH45 | FeatureKind::EdgeV45 | FeatureKind::LineH45 | FeatureKind::LineV45
        )
    }

    /// Footprint in cell units: `(across, down)` for upright kinds, `(along s,
    /// along d)` for rotated kinds.
    pub fn units(self) -> (u32, u32) {
        match self {
            FeatureKind::EdgeH | FeatureKind::EdgeH45 => (2, 1),
            FeatureKind::EdgeV | FeatureKind::EdgeV45 => (1, 2),
            FeatureKind::LineH | FeatureKind::LineH45 => (3, 1),
            FeatureKind::LineV | FeatureKind::LineV45 => (1, 3),
            FeatureKind::Diag => (2, 2),
            FeatureKind::CenterSurround => (3, 3),
        }
    }

    /// Whether a left-right flip negates the response (the layout is
    /// antisymmetric about its vertical axis).
    pub fn mirror_negates(self) -> bool {
        matches!(self, FeatureKind::EdgeH | FeatureKind::Diag)
    }

    /// Kind produced by a left-right flip.
    pub fn mirrored(self) -> FeatureKind {
        match self {
            FeatureKind::EdgeH45 => FeatureKind::EdgeV45,
            FeatureKind::EdgeV45 => FeatureKind::EdgeH45,
            FeatureKind::LineH45 => FeatureKind::LineV45,
            FeatureKind::LineV45 => FeatureKind::LineH45,
            k => k,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown feature kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum FeatureSet {
    /// Upright two-, three- and four-rectangle kinds.
    #[default]
    Basic,
    /// Basic plus centre-surround and the 45 degree kinds.
    All,
}

impl FeatureSet {
    pub fn kinds(self) -> &'static [FeatureKind] {
        match self {
            FeatureSet::Basic => &FeatureKind::ALL[..5],
            FeatureSet::All => &FeatureKind::ALL[..],
        }
    }

    pub fn contains(self, kind: FeatureKind) -> bool {
        self.kinds().contains(&kind)
    }

    pub fn needs_rotated(self) -> bool {
        self == FeatureSet::All
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Basic => "BASIC",
            FeatureSet::All => "ALL",
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BASIC" => Ok(FeatureSet::Basic),
            "ALL" => Ok(FeatureSet::All),
            _ => Err(Error::InvalidInput(format!(
                "unknown feature set {s:?} (expected BASIC or ALL)"
            ))),
        }
    }
}

/// Cell geometry in window coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellGeom {
    Upright(Rect),
    Rotated(RotRect),
}

impl CellGeom {
    pub fn area(&self) -> u64 {
        match self {
            CellGeom::Upright(r) => r.area(),
            CellGeom::Rotated(r) => r.pixel_count(),
        }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        match self {
            CellGeom::Upright(r) => {
                x >= r.x as i64 && y >= r.y as i64 && x < r.right() as i64 && y < r.bottom() as i64
            }
            CellGeom::Rotated(r) => r.contains(x, y),
        }
    }

    fn sum(&self, t: &IntegralTables, ox: u32, oy: u32) -> u64 {
        match self {
            CellGeom::Upright(r) => t.box_sum(ox + r.x, oy + r.y, ox + r.right(), oy + r.bottom()),
            CellGeom::Rotated(r) => t.rot_box_sum(&r.translated(ox as i64, oy as i64)),
        }
    }
}

/// Five-dimensional feature: kind, position and cell size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HaarFeature {
    pub kind: FeatureKind,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl HaarFeature {
    pub fn new(kind: FeatureKind, x: u32, y: u32, w: u32, h: u32) -> Self {
        HaarFeature { kind, x, y, w, h }
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)`.
    pub fn footprint(&self) -> (i64, i64, i64, i64) {
        let (ux, uy) = self.kind.units();
        let (x, y) = (self.x as i64, self.y as i64);
        if self.kind.is_rotated() {
            let a = (ux * self.w) as i64;
            let b = (uy * self.h) as i64;
            (x - b + 1, y, x + a - 1, y + a + b - 1)
        } else {
            let fw = (ux * self.w) as i64;
            let fh = (uy * self.h) as i64;
            (x, y, x + fw - 1, y + fh - 1)
        }
    }

    pub fn fits(&self, window_w: u32, window_h: u32) -> bool {
        if self.w == 0 || self.h == 0 {
            return false;
        }
        let (x0, y0, x1, y1) = self.footprint();
        x0 >= 0 && y0 >= 0 && x1 < window_w as i64 && y1 < window_h as i64
    }

    /// Unit-scale cells with integer weights, in summation order.
    pub fn cells(&self) -> Vec<(CellGeom, i32)> {
        let (x, y, w, h) = (self.x, self.y, self.w, self.h);
        let up = |dx: u32, dy: u32, cw: u32, ch: u32| CellGeom::Upright(Rect::new(x + dx, y + dy, cw, ch));
        let s0 = x as i64 + y as i64;
        let d0 = y as i64 - x as i64;
        let (sl, dl) = (2 * w, 2 * h);
        let rot = |i: i64, j: i64| {
            CellGeom::Rotated(RotRect::new(s0 + i * sl as i64, d0 + j * dl as i64, sl, dl))
        };
        match self.kind {
            FeatureKind::EdgeH => vec![(up(0, 0, w, h), -1), (up(w, 0, w, h), 1)],
            FeatureKind::EdgeV => vec![(up(0, 0, w, h), -1), (up(0, h, w, h), 1)],
            FeatureKind::LineH => vec![
                (up(0, 0, w, h), -1),
                (up(w, 0, w, h), 2),
                (up(2 * w, 0, w, h), -1),
            ],
            FeatureKind::LineV => vec![
                (up(0, 0, w, h), -1),
                (up(0, h, w, h), 2),
                (up(0, 2 * h, w, h), -1),
            ],
            FeatureKind::Diag => vec![
                (up(0, 0, w, h), -1),
                (up(w, 0, w, h), 1),
                (up(0, h, w, h), 1),
                (up(w, h, w, h), -1),
            ],
            FeatureKind::CenterSurround => {
                vec![(up(0, 0, 3 * w, 3 * h), -1), (up(w, h, w, h), 9)]
            }
            FeatureKind::EdgeH45 => vec![(rot(0, 0), -1), (rot(1, 0), 1)],
            FeatureKind::EdgeV45 => vec![(rot(0, 0), -1), (rot(0, 1), 1)],
            FeatureKind::LineH45 => vec![(rot(0, 0), -1), (rot(1, 0), 2), (rot(2, 0), -1)],
            FeatureKind::LineV45 => vec![(rot(0, 0), -1), (rot(0, 1), 2), (rot(0, 2), -1)],
        }
    }

    /// `sum(weight * cell sum)` at unit scale with the window at `(ox, oy)`.
    /// Exact integer arithmetic; the caller guarantees bounds.
    pub fn unit_sum(&self, t: &IntegralTables, ox: u32, oy: u32) -> i64 {
        self.cells()
            .iter()
            .map(|(c, wgt)| *wgt as i64 * c.sum(t, ox, oy) as i64)
            .sum()
    }

    /// Left-right flip inside a window of width `window_w`. The flag is set
    /// when the flipped feature's response is the negation of the original's.
    pub fn mirrored(&self, window_w: u32) -> (HaarFeature, bool) {
        let k = self.kind;
        if k.is_rotated() {
            let f = HaarFeature::new(k.mirrored(), window_w - 1 - self.x, self.y, self.h, self.w);
            (f, false)
        } else {
            let fw = k.units().0 * self.w;
            let f = HaarFeature::new(k, window_w - self.x - fw, self.y, self.w, self.h);
            (f, k.mirror_negates())
        }
    }
}

impl fmt::Display for HaarFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} x {} y {} w {} h {}",
            self.kind, self.x, self.y, self.w, self.h
        )
    }
}

/// Every feature of the set that fits a `window_w x window_h` window, ordered
/// by kind, then `y`, `x`, `h`, `w` ascending.
pub fn enumerate_features(window_w: u32, window_h: u32, set: FeatureSet) -> Vec<HaarFeature> {
    enumerate_features_strided(window_w, window_h, set, 1)
}

/// As [`enumerate_features`], keeping only positions whose `x` and `y` are
/// multiples of `stride`. For rotated kinds the stride applies to the
/// position of the topmost pixel.
pub fn enumerate_features_strided(
    window_w: u32,
    window_h: u32,
    set: FeatureSet,
    stride: u32,
) -> Vec<HaarFeature> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for &kind in set.kinds() {
        enumerate_kind(window_w, window_h, kind, stride, &mut out);
    }
    out
}

fn enumerate_kind(ww: u32, wh: u32, kind: FeatureKind, stride: u32, out: &mut Vec<HaarFeature>) {
    for y in (0..wh).step_by(stride as usize) {
        for x in (0..ww).step_by(stride as usize) {
            for h in 1..=wh {
                for w in 1..=ww {
                    let f = HaarFeature::new(kind, x, y, w, h);
                    if f.fits(ww, wh) {
                        out.push(f);
                    } else if f.footprint().2 >= ww as i64 {
                        break;
                    }
                }
            }
        }
    }
}

/// Closed-form number of features of one kind that fit the window.
pub fn count_features(window_w: u32, window_h: u32, kind: FeatureKind) -> u64 {
    let (ux, uy) = kind.units();
    let (ww, wh) = (window_w as i64, window_h as i64);
    let mut total = 0i64;
    for w in 1..=ww {
        for h in 1..=wh {
            let (a, b) = (ux as i64 * w, uy as i64 * h);
            let (nx, ny) = if kind.is_rotated() {
                (ww - (a + b - 1) + 1, wh - (a + b) + 1)
            } else {
                (ww - a + 1, wh - b + 1)
            };
            if nx > 0 && ny > 0 {
                total += nx * ny;
            }
        }
    }
    total as u64
}

/// Window size at some detection scale relative to the training window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowScale {
    pub base_w: u32,
    pub base_h: u32,
    pub w: u32,
    pub h: u32,
}

impl WindowScale {
    pub fn unit(base_w: u32, base_h: u32) -> Self {
        WindowScale {
            base_w,
            base_h,
            w: base_w,
            h: base_h,
        }
    }

    /// Scaled window of `round(base * factor)` on each side.
    pub fn from_factor(base_w: u32, base_h: u32, factor: f64) -> Self {
        WindowScale {
            base_w,
            base_h,
            w: round_half_up(base_w as f64 * factor) as u32,
            h: round_half_up(base_h as f64 * factor) as u32,
        }
    }

    pub fn fx(&self) -> f64 {
        self.w as f64 / self.base_w as f64
    }

    pub fn fy(&self) -> f64 {
        self.h as f64 / self.base_h as f64
    }

    pub fn is_unit(&self) -> bool {
        self.w == self.base_w && self.h == self.base_h
    }

    /// Vertical edges are rounded from whichever window side is nearer, so
    /// the scaled layout of a mirrored feature is the mirror of the scaled
    /// layout.
    fn map_x(&self, e: u32) -> u32 {
        let fx = self.fx();
        match (2 * e).cmp(&self.base_w) {
            std::cmp::Ordering::Less => round_half_up(e as f64 * fx) as u32,
            std::cmp::Ordering::Greater => {
                self.w - round_half_up((self.base_w - e) as f64 * fx) as u32
            }
            std::cmp::Ordering::Equal => self.w / 2,
        }
    }

    fn map_y(&self, e: u32) -> u32 {
        if e == self.base_h {
            self.h
        } else {
            round_half_up(e as f64 * self.fy()) as u32
        }
    }

    /// Diagonal coordinates scale by the smaller factor, so rotated
    /// footprints keep their shape and stay inside the window.
    fn rot_factor(&self) -> f64 {
        self.fx().min(self.fy())
    }

    /// `s` is measured from the top-right corner and `d` from the top-left,
    /// so a flip (which swaps the two) commutes with scaling.
    fn map_s(&self, s: i64) -> i64 {
        let off = self.base_w as i64 - 1;
        round_half_up((s - off) as f64 * self.rot_factor()) as i64 + (self.w as i64 - 1)
    }

    fn map_d(&self, d: i64) -> i64 {
        round_half_up(d as f64 * self.rot_factor()) as i64
    }
}

/// Scaled cells of a rotated feature. Cell boundaries are mapped one by one.
/// A footprint that pokes out of one side of the scaled window is shifted
/// back in; one wider or taller than the window has its outer bounds pulled
/// in from both sides. Both rules commute with a left-right flip.
fn scale_rotated(f: &HaarFeature, scale: &WindowScale) -> Result<Vec<RotRect>> {
    let (ns, nd) = f.kind.units();
    let (ns, nd) = (ns as usize, nd as usize);
    let s0 = f.x as i64 + f.y as i64;
    let d0 = f.y as i64 - f.x as i64;
    let mut sb: Vec<i64> = (0..=ns)
        .map(|i| scale.map_s(s0 + (i as i64) * 2 * f.w as i64))
        .collect();
    let mut db: Vec<i64> = (0..=nd)
        .map(|j| scale.map_d(d0 + (j as i64) * 2 * f.h as i64))
        .collect();
    let (w, h) = (scale.w as i64, scale.h as i64);
    let out_of_window = || Error::Bounds(format!("feature {f} does not fit a {w}x{h} window"));
    loop {
        if sb[ns] <= sb[0] || db[nd] <= db[0] {
            return Err(out_of_window());
        }
        let outer = RotRect::new(sb[0], db[0], (sb[ns] - sb[0]) as u32, (db[nd] - db[0]) as u32);
        let (x0, y0, x1, y1) = outer.pixel_bounds().ok_or_else(out_of_window)?;
        let (left, right, top, bottom) = (x0 < 0, x1 >= w, y0 < 0, y1 >= h);
        if !(left || right || top || bottom) {
            break;
        }
        let shift = |b: &mut Vec<i64>, by: i64| b.iter_mut().for_each(|v| *v += by);
        if x1 - x0 + 1 > w {
            db[nd] -= 1;
            sb[ns] -= 1;
        } else if left {
            // One pixel right: s + 1, d - 1.
            shift(&mut sb, 1);
            shift(&mut db, -1);
        } else if right {
            shift(&mut sb, -1);
            shift(&mut db, 1);
        }
        if y1 - y0 + 1 > h {
            sb[0] += 1;
            db[0] += 1;
            sb[ns] -= 1;
            db[nd] -= 1;
        } else if top {
            shift(&mut sb, 1);
            shift(&mut db, 1);
        } else if bottom {
            shift(&mut sb, -1);
            shift(&mut db, -1);
        }
    }
    let mut cells = Vec::with_capacity(3);
    for i in 0..ns {
        for j in 0..nd {
            let (sl, dl) = (sb[i + 1] - sb[i], db[j + 1] - db[j]);
            if sl <= 0 || dl <= 0 {
                return Err(out_of_window());
            }
            cells.push(RotRect::new(sb[i], db[j], sl as u32, dl as u32));
        }
    }
    Ok(cells)
}

#[inline]
fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledCell {
    pub geom: CellGeom,
    /// Weight such that `sum(weight * area)` is zero at the rounded geometry.
    pub weight: f64,
    /// Unit-scale weight times unit-scale area.
    coef: f64,
    area: f64,
}

/// A feature realised at one window scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledFeature {
    pub feature: HaarFeature,
    pub scale: WindowScale,
    pub cells: Vec<ScaledCell>,
}

impl ScaledFeature {
    pub fn new(f: &HaarFeature, scale: WindowScale) -> Result<Self> {
        if !f.fits(scale.base_w, scale.base_h) {
            return Err(Error::Bounds(format!(
                "feature {f} does not fit a {}x{} window",
                scale.base_w, scale.base_h
            )));
        }
        let unit = f.cells();
        let geoms: Vec<CellGeom> = if f.kind.is_rotated() {
            scale_rotated(f, &scale)?
                .into_iter()
                .map(CellGeom::Rotated)
                .collect()
        } else {
            unit.iter()
                .map(|(g, _)| {
                    let CellGeom::Upright(r) = g else {
                        unreachable!()
                    };
                    let x0 = scale.map_x(r.x);
                    let x1 = scale.map_x(r.right());
                    let y0 = scale.map_y(r.y);
                    let y1 = scale.map_y(r.bottom());
                    CellGeom::Upright(Rect::new(x0, y0, x1 - x0, y1 - y0))
                })
                .collect()
        };
        let area_scale = scale.fx() * scale.fy();
        let mut cells = Vec::with_capacity(4);
        for ((unit_geom, wgt), g) in unit.iter().zip(geoms) {
            let area = g.area() as f64;
            if area == 0.0 {
                return Err(Error::Bounds(format!(
                    "feature {f} has an empty cell at {}x{}",
                    scale.w, scale.h
                )));
            }
            let coef = *wgt as f64 * unit_geom.area() as f64;
            cells.push(ScaledCell {
                geom: g,
                weight: coef * area_scale / area,
                coef,
                area,
            });
        }
        Ok(ScaledFeature {
            feature: *f,
            scale,
            cells,
        })
    }

    /// Area-normalised response: each cell contributes its mean intensity
    /// times its unit-scale weight and area. Equals [`HaarFeature::unit_sum`]
    /// exactly at unit scale and is exactly zero on uniform input at any
    /// scale. The summation order pairs cells that swap under a flip so the
    /// mirrored feature reproduces the value bit for bit.
    #[inline]
    pub fn response(&self, t: &IntegralTables, ox: u32, oy: u32) -> f64 {
        let term = |c: &ScaledCell| (c.coef * c.geom.sum(t, ox, oy) as f64) / c.area;
        match self.cells.as_slice() {
            [a, b] => term(a) + term(b),
            [a, b, c] => (term(a) + term(c)) + term(b),
            [a, b, c, d] => (term(a) + term(b)) + (term(c) + term(d)),
            _ => unreachable!("features have two to four cells"),
        }
    }
}

/// Scales `f` from its `window_w x window_h` training window by `factor`.
pub fn scale_feature(f: &HaarFeature, window_w: u32, window_h: u32, factor: f64) -> Result<ScaledFeature> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidInput(format!("scale factor {factor} must be >= 1")));
    }
    ScaledFeature::new(f, WindowScale::from_factor(window_w, window_h, factor))
}

/// `inv_sigma * sum(weight * cell sum)` for the feature scaled to `scale` and
/// placed with its window at `origin`.
pub fn feature_value(
    f: &HaarFeature,
    t: &IntegralTables,
    origin: (u32, u32),
    scale: WindowScale,
    inv_sigma: f64,
) -> Result<f64> {
    let sf = ScaledFeature::new(f, scale)?;
    if !(Rect::new(origin.0, origin.1, scale.w, scale.h)).fits_within(t.width(), t.height()) {
        return Err(Error::Bounds(format!(
            "{}x{} window at ({}, {}) outside {}x{} image",
            scale.w,
            scale.h,
            origin.0,
            origin.1,
            t.width(),
            t.height()
        )));
    }
    if f.kind.is_rotated() && !t.has_rotated() {
        return Err(Error::InvalidInput(format!(
            "feature {f} needs rotated tables"
        )));
    }
    Ok(inv_sigma * scale.fx() * scale.fy() * sf.response(t, origin.0, origin.1))
}
