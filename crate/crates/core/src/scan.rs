//! Multi-scale sliding-window search, grouping of raw hits, result
//! selection, mirrored detection of right-side points, and the
//! face, feature and point hierarchy.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::cascade::{Cascade, ScaledCascade};
use crate::error::{Error, Result};
use crate::geom::{estimate_tilt, image_center, infer_fourth_corner, rotate_image, rotate_point, EyeCorner, Point2, TiltState};
use crate::haar::WindowScale;
use crate::raster::{GrayImage, IntegralTables, Rect};
use crate::samples::{Landmark, Side};

#[derive(Clone, Debug)]
pub struct DetectorConfig {
    pub cascade: Arc<Cascade>,
    /// Search region; `None` means the whole image.
    pub roi: Option<Rect>,
    pub scale_factor: f64,
    pub min_neighbors: usize,
    pub min_w: u32,
    pub min_h: u32,
    /// Report the best-supported point instead of the largest region.
    pub is_point: bool,
    /// Search the mirrored roi with a cascade trained on the left side.
    pub on_right_side: bool,
    /// Whether the last run found something.
    pub ok: bool,
}

impl DetectorConfig {
    /// Point detector defaults: minimum size equal to the window, factor 1.1,
    /// 3 neighbours.
    pub fn point(cascade: Arc<Cascade>) -> Self {
        let (w, h) = (cascade.window_w, cascade.window_h);
        DetectorConfig {
            cascade,
            roi: None,
            scale_factor: 1.1,
            min_neighbors: 3,
            min_w: w,
            min_h: h,
            is_point: true,
            on_right_side: false,
            ok: false,
        }
    }

    /// Region detector defaults: factor 1.2, 3 neighbours, at least 40x40.
    pub fn region(cascade: Arc<Cascade>) -> Self {
        let (w, h) = (cascade.window_w.max(40), cascade.window_h.max(40));
        DetectorConfig {
            min_w: w,
            min_h: h,
            scale_factor: 1.2,
            is_point: false,
            ..DetectorConfig::point(cascade)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor > 1.0 && self.scale_factor.is_finite()) {
            return Err(Error::InvalidInput(format!("scale factor {} must exceed 1", self.scale_factor)));
        }
        if self.min_w < self.cascade.window_w || self.min_h < self.cascade.window_h {
            return Err(Error::InvalidInput(format!(
                "minimum size {}x{} below the {}x{} cascade window",
                self.min_w, self.min_h, self.cascade.window_w, self.cascade.window_h
            )));
        }
        if self.min_neighbors == 0 {
            return Err(Error::InvalidInput("min_neighbors must be at least 1".into()));
        }
        Ok(())
    }
}

/// A hit or a group of hits. Centre and size sums are kept exactly (centres
/// in doubled coordinates) and the rect is derived from them, so a group
/// mirrored and mirrored back is unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Detection {
    /// Mean rect, rounded.
    pub rect: Rect,
    pub neighbors: usize,
    sum_cx2: u64,
    sum_cy2: u64,
    sum_w: u64,
    sum_h: u64,
}

impl Detection {
    pub fn single(rect: Rect) -> Self {
        Detection {
            rect,
            neighbors: 1,
            sum_cx2: 2 * rect.x as u64 + rect.w as u64 - 1,
            sum_cy2: 2 * rect.y as u64 + rect.h as u64 - 1,
            sum_w: rect.w as u64,
            sum_h: rect.h as u64,
        }
    }

    fn from_sums(neighbors: usize, sum_cx2: u64, sum_cy2: u64, sum_w: u64, sum_h: u64) -> Self {
        let n = neighbors as u64;
        let w = ((2 * sum_w + n) / (2 * n)) as u32;
        let h = ((2 * sum_h + n) / (2 * n)) as u32;
        let left = |s2: u64, side: u32| -> u32 {
            let num = s2 as i128 - n as i128 * (side as i128 - 1);
            if num <= 0 {
                0
            } else {
                div_round_even(num as u64, 2 * n) as u32
            }
        };
        Detection {
            rect: Rect::new(left(sum_cx2, w), left(sum_cy2, h), w, h),
            neighbors,
            sum_cx2,
            sum_cy2,
            sum_w,
            sum_h,
        }
    }

    /// Mean centre of the grouped hits, rounded half to even.
    pub fn point(&self) -> (u32, u32) {
        let n = 2 * self.neighbors as u64;
        (div_round_even(self.sum_cx2, n) as u32, div_round_even(self.sum_cy2, n) as u32)
    }

    fn translated(&self, dx: u32, dy: u32) -> Detection {
        let n = self.neighbors as u64;
        Detection::from_sums(
            self.neighbors,
            self.sum_cx2 + 2 * n * dx as u64,
            self.sum_cy2 + 2 * n * dy as u64,
            self.sum_w,
            self.sum_h,
        )
    }

    /// Reflection inside a region of width `w`.
    fn mirrored(&self, w: u32) -> Detection {
        let n = self.neighbors as u64;
        Detection::from_sums(
            self.neighbors,
            2 * n * (w as u64 - 1) - self.sum_cx2,
            self.sum_cy2,
            self.sum_w,
            self.sum_h,
        )
    }
}

fn div_round_even(num: u64, den: u64) -> u64 {
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

fn round_half_up(v: f64) -> u32 {
    (v + 0.5).floor() as u32
}

/// Window sizes searched in a `roi_w x roi_h` region: the minimum size grown
/// by `scale_factor` per step while it fits. For an even window width the
/// scaled width stays even, which keeps scaled features mirror-exact.
pub fn scan_scales(cascade: &Cascade, cfg: &DetectorConfig, roi_w: u32, roi_h: u32) -> Vec<WindowScale> {
    let (ww, wh) = (cascade.window_w, cascade.window_h);
    let base = (cfg.min_w as f64 / ww as f64).max(cfg.min_h as f64 / wh as f64);
    let mut out: Vec<WindowScale> = Vec::new();
    let mut f = base;
    loop {
        let mut s = WindowScale::from_factor(ww, wh, f);
        s.w = s.w.max(ww);
        s.h = s.h.max(wh);
        if ww % 2 == 0 && s.w % 2 == 1 {
            s.w += 1;
        }
        if s.w > roi_w || s.h > roi_h {
            break;
        }
        if out.last().is_none_or(|l| s.w > l.w || s.h > l.h) {
            out.push(s);
        }
        f *= cfg.scale_factor;
    }
    out
}

/// Window offsets along an axis with `span` free pixels: multiples of `step`
/// from both ends, so the grid is symmetric under reflection.
pub fn scan_positions(span: u32, step: u32) -> Vec<u32> {
    let mut v: Vec<u32> = (0..=span)
        .step_by(step as usize)
        .take_while(|&p| 2 * p <= span)
        .flat_map(|p| [p, span - p])
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

pub fn scan_step(scale: &WindowScale) -> u32 {
    round_half_up(scale.w as f64 / scale.base_w as f64).max(1)
}

fn scan_patch(patch: &GrayImage, cascade: &Cascade, cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    let scales = scan_scales(cascade, cfg, patch.width(), patch.height());
    if scales.is_empty() {
        return Ok(Vec::new());
    }
    let t = IntegralTables::new(patch, cascade.needs_rotated());
    let per_scale: Vec<Result<Vec<Detection>>> = scales
        .par_iter()
        .map(|s| {
            let sc = ScaledCascade::new(cascade, *s)?;
            let step = scan_step(s);
            let xs = scan_positions(patch.width() - s.w, step);
            let ys = scan_positions(patch.height() - s.h, step);
            let mut hits = Vec::new();
            for &y in &ys {
                for &x in &xs {
                    if sc.classify(&t, x, y).is_none() {
                        hits.push(Detection::single(Rect::new(x, y, s.w, s.h)));
                    }
                }
            }
            Ok(hits)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_scale {
        out.extend(r?);
    }
    Ok(out)
}

fn resolve_roi(image: &GrayImage, roi: Option<Rect>) -> Result<Rect> {
    let roi = roi.unwrap_or(image.bounds());
    if !roi.fits_within(image.width(), image.height()) {
        return Err(Error::Bounds(format!(
            "roi {roi} outside {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(roi)
}

/// Every window the cascade accepts inside the roi, in image coordinates,
/// ordered by scale then row then column.
pub fn scan_roi(cascade: &Cascade, image: &GrayImage, cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let roi = resolve_roi(image, cfg.roi)?;
    let patch = image.crop(roi)?;
    Ok(scan_patch(&patch, cascade, cfg)?
        .into_iter()
        .map(|d| d.translated(roi.x, roi.y))
        .collect())
}

fn similar(a: &Detection, b: &Detection) -> bool {
    let (ra, rb) = (&a.rect, &b.rect);
    let (acx, acy) = (a.sum_cx2, a.sum_cy2);
    let (bcx, bcy) = (b.sum_cx2, b.sum_cy2);
    let mw = ra.w.max(rb.w) as u64;
    let mh = ra.h.max(rb.h) as u64;
    5 * acx.abs_diff(bcx) <= 2 * mw
        && 5 * acy.abs_diff(bcy) <= 2 * mh
        && 5 * (ra.w.abs_diff(rb.w) as u64) <= mw
        && 5 * (ra.h.abs_diff(rb.h) as u64) <= mh
}

/// Connected components of raw hits under [`similar`].
pub fn cluster_labels(raw: &[Detection]) -> Vec<usize> {
    let n = raw.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if similar(&raw[i], &raw[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Merges raw hits whose centres lie within 20% of the larger side and
/// whose sizes differ by at most 20%, taking the transitive closure. Groups
/// smaller than `min_neighbors` are dropped. Output is sorted by `(y, x)`.
pub fn group_detections(raw: &[Detection], min_neighbors: usize) -> Vec<Detection> {
    let labels = cluster_labels(raw);
    let mut groups: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
    for (d, l) in raw.iter().zip(labels) {
        groups.entry(l).or_default().push(d);
    }
    let mut out: Vec<Detection> = groups
        .into_values()
        .filter(|g| g.iter().map(|d| d.neighbors).sum::<usize>() >= min_neighbors)
        .map(|g| {
            let sum = |f: fn(&Detection) -> u64| g.iter().map(|d| f(d)).sum::<u64>();
            Detection::from_sums(
                g.iter().map(|d| d.neighbors).sum(),
                sum(|d| d.sum_cx2),
                sum(|d| d.sum_cy2),
                sum(|d| d.sum_w),
                sum(|d| d.sum_h),
            )
        })
        .collect();
    out.sort_by_key(|d| (d.rect.y, d.rect.x, d.rect.w, d.rect.h, d.neighbors));
    out
}

/// Picks one detection. Regions: largest area, then most neighbours. Points:
/// most neighbours, then nearest the roi centre. Remaining ties go to the
/// smallest mean centre `(y, x)`, or with `mirrored_ties` to the smallest `y`
/// and largest `x`, which is the same choice seen in a mirrored roi.
pub fn select_result(
    ds: &[Detection],
    is_point: bool,
    roi: Rect,
    mirrored_ties: bool,
) -> Option<Detection> {
    let c2 = (
        2 * roi.x as i128 + roi.w as i128 - 1,
        2 * roi.y as i128 + roi.h as i128 - 1,
    );
    // Exact fractions compared by cross-multiplication.
    let frac = |a: i128, an: i128, b: i128, bn: i128| (a * bn).cmp(&(b * an));
    let cmp = |a: &Detection, b: &Detection| {
        let (an, bn) = (a.neighbors as i128, b.neighbors as i128);
        let primary = if is_point {
            let dist = |d: &Detection, n: i128| {
                let dx = d.sum_cx2 as i128 - n * c2.0;
                let dy = d.sum_cy2 as i128 - n * c2.1;
                dx * dx + dy * dy
            };
            bn.cmp(&an).then(frac(dist(a, an), an * an, dist(b, bn), bn * bn))
        } else {
            b.rect.area().cmp(&a.rect.area()).then(bn.cmp(&an))
        };
        let x_order = frac(a.sum_cx2 as i128, an, b.sum_cx2 as i128, bn);
        primary
            .then(frac(a.sum_cy2 as i128, an, b.sum_cy2 as i128, bn))
            .then(if mirrored_ties { x_order.reverse() } else { x_order })
            .then(frac(a.sum_w as i128, an, b.sum_w as i128, bn))
            .then(frac(a.sum_h as i128, an, b.sum_h as i128, bn))
    };
    ds.iter().copied().min_by(cmp)
}

/// Scans, groups and selects within the configured roi. Right-side
/// detectors search the mirrored roi and map the result back.
pub fn detect(image: &GrayImage, cfg: &mut DetectorConfig) -> Result<Option<Detection>> {
    cfg.validate()?;
    let roi = resolve_roi(image, cfg.roi)?;
    let mut patch = image.crop(roi)?;
    if cfg.on_right_side {
        patch = patch.mirrored();
    }
    let raw = scan_patch(&patch, &cfg.cascade, cfg)?;
    let grouped = group_detections(&raw, cfg.min_neighbors);
    let local = Rect::new(0, 0, roi.w, roi.h);
    let best = select_result(&grouped, cfg.is_point, local, cfg.on_right_side).map(|d| {
        let d = if cfg.on_right_side { d.mirrored(roi.w) } else { d };
        d.translated(roi.x, roi.y)
    });
    cfg.ok = best.is_some();
    Ok(best)
}

/// Point location in image coordinates, or `None` with `cfg.ok` cleared.
pub fn detect_point(image: &GrayImage, cfg: &mut DetectorConfig) -> Result<Option<(u32, u32)>> {
    Ok(detect(image, cfg)?.map(|d| d.point()))
}

/// Feature search regions as fractions `(x, y, w, h)` of the face rect, and
/// the growth applied to a feature rect to search for its points.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceLayout {
    pub left_eye: [f64; 4],
    pub right_eye: [f64; 4],
    pub nose: [f64; 4],
    pub mouth: [f64; 4],
    /// Added to each side of a feature rect, as a fraction of its size.
    pub point_expand: f64,
}

impl Default for FaceLayout {
    fn default() -> Self {
        FaceLayout {
            left_eye: [0.0, 0.0, 0.5, 0.55],
            right_eye: [0.5, 0.0, 0.5, 0.55],
            nose: [0.3, 0.3, 0.4, 0.45],
            mouth: [0.15, 2.0 / 3.0, 0.7, 1.0 / 3.0],
            point_expand: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FacialFeature {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl FacialFeature {
    pub const ALL: [FacialFeature; 4] = [
        FacialFeature::LeftEye,
        FacialFeature::RightEye,
        FacialFeature::Nose,
        FacialFeature::Mouth,
    ];

    /// The region searched for a landmark.
    pub fn of(l: Landmark) -> FacialFeature {
        use Landmark::*;
        match l {
            LeftNostril | RightNostril | NoseTip => FacialFeature::Nose,
            LeftMouthCorner | RightMouthCorner | UpperLip | LowerLip | Chin => FacialFeature::Mouth,
            _ => match l.side() {
                Side::Right => FacialFeature::RightEye,
                _ => FacialFeature::LeftEye,
            },
        }
    }
}

/// Sub-rect of `r` given by fractions, clamped to the image.
pub fn fraction_rect(r: Rect, f: [f64; 4], image_w: u32, image_h: u32) -> Rect {
    let x0 = r.x as f64 + f[0] * r.w as f64;
    let y0 = r.y as f64 + f[1] * r.h as f64;
    clamp_rect(x0, y0, x0 + f[2] * r.w as f64, y0 + f[3] * r.h as f64, image_w, image_h)
}

/// `r` grown by `frac` of its size on every side, clamped to the image.
pub fn expand_rect(r: Rect, frac: f64, image_w: u32, image_h: u32) -> Rect {
    let (dx, dy) = (frac * r.w as f64, frac * r.h as f64);
    clamp_rect(
        r.x as f64 - dx,
        r.y as f64 - dy,
        r.right() as f64 + dx,
        r.bottom() as f64 + dy,
        image_w,
        image_h,
    )
}

fn clamp_rect(x0: f64, y0: f64, x1: f64, y1: f64, w: u32, h: u32) -> Rect {
    let cx = |v: f64| (v.round().max(0.0) as u32).min(w);
    let cy = |v: f64| (v.round().max(0.0) as u32).min(h);
    let (a, b, c, d) = (cx(x0), cy(y0), cx(x1), cy(y1));
    Rect::new(a, b, c.saturating_sub(a), d.saturating_sub(b))
}

/// Detectors for the whole hierarchy. Feature detectors are optional; when
/// absent, points are searched in the expanded layout region.
#[derive(Clone, Debug)]
pub struct HierarchyConfig {
    pub face: DetectorConfig,
    pub features: BTreeMap<FacialFeature, DetectorConfig>,
    pub points: BTreeMap<Landmark, DetectorConfig>,
    pub layout: FaceLayout,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoundPoint {
    /// Position in the input image frame.
    pub p: Point2,
    /// Completed from the other eye rather than detected.
    pub inferred: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStatus {
    Ok,
    FaceAbsent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyResult {
    pub status: FrameStatus,
    /// Face rect in the tilt-corrected frame.
    pub face: Option<Rect>,
    pub features: BTreeMap<FacialFeature, Rect>,
    pub points: BTreeMap<Landmark, FoundPoint>,
    /// Counter-rotation applied to this frame.
    pub correction: f64,
}

/// Face, then features, then points. The frame is first counter-rotated by
/// the tilt state's correction; found eye corners update the tilt estimate
/// for the next frame.
pub fn detect_hierarchy(
    image: &GrayImage,
    cfg: &mut HierarchyConfig,
    tilt: &mut TiltState,
) -> Result<HierarchyResult> {
    let correction = tilt.correction();
    let center = image_center(image);
    let rotated;
    let frame = if correction != 0.0 {
        rotated = rotate_image(image, center, -correction);
        &rotated
    } else {
        image
    };
    let (iw, ih) = (frame.width(), frame.height());
    let mut result = HierarchyResult {
        status: FrameStatus::FaceAbsent,
        face: None,
        features: BTreeMap::new(),
        points: BTreeMap::new(),
        correction,
    };
    cfg.face.roi = None;
    let Some(face) = detect(frame, &mut cfg.face)? else {
        tilt.reset();
        return Ok(result);
    };
    result.status = FrameStatus::Ok;
    result.face = Some(face.rect);
    let layout = cfg.layout.clone();
    for f in FacialFeature::ALL {
        let frac = match f {
            FacialFeature::LeftEye => layout.left_eye,
            FacialFeature::RightEye => layout.right_eye,
            FacialFeature::Nose => layout.nose,
            FacialFeature::Mouth => layout.mouth,
        };
        let region = fraction_rect(face.rect, frac, iw, ih);
        match cfg.features.get_mut(&f) {
            None => {
                result.features.insert(f, region);
            }
            Some(d) if region.w >= d.min_w && region.h >= d.min_h => {
                d.roi = Some(region);
                if let Some(hit) = detect(frame, d)? {
                    result.features.insert(f, hit.rect);
                }
            }
            Some(d) => d.ok = false,
        }
    }
    let mut local: BTreeMap<Landmark, Point2> = BTreeMap::new();
    for (&l, d) in cfg.points.iter_mut() {
        d.ok = false;
        let Some(&fr) = result.features.get(&FacialFeature::of(l)) else {
            continue;
        };
        let roi = expand_rect(fr, layout.point_expand, iw, ih);
        if roi.w < d.min_w || roi.h < d.min_h {
            continue;
        }
        d.roi = Some(roi);
        if let Some((x, y)) = detect_point(frame, d)? {
            local.insert(l, Point2::new(x as f64, y as f64));
        }
    }
    let corner_ids = [
        Landmark::LeftEyeOuter,
        Landmark::LeftEyeInner,
        Landmark::RightEyeInner,
        Landmark::RightEyeOuter,
    ];
    let corners = corner_ids.map(|l| local.get(&l).copied());
    let mut inferred = None;
    if corners.iter().filter(|c| c.is_some()).count() == 3 {
        if let Ok((which, p)) = infer_fourth_corner(corners) {
            let idx = EyeCorner::ALL.iter().position(|&c| c == which).expect("corner");
            inferred = Some((corner_ids[idx], p));
        }
    }
    let back = |p: Point2| {
        if correction != 0.0 {
            rotate_point(p, center, correction)
        } else {
            p
        }
    };
    for (l, p) in &local {
        result.points.insert(*l, FoundPoint { p: back(*p), inferred: false });
    }
    if let Some((l, p)) = inferred {
        result.points.insert(l, FoundPoint { p: back(p), inferred: true });
    }
    let found: Vec<Point2> = corner_ids.iter().filter_map(|l| result.points.get(l).map(|f| f.p)).collect();
    if found.len() >= 2 {
        if let Ok(a) = estimate_tilt(&found) {
            tilt.alpha = a;
        }
    }
    Ok(result)
}
