//! Subcommand bodies. Each takes the merged [`RunConfig`] and writes its
//! report to `out`; notes and warnings go to `log`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use super::config::RunConfig;
use super::report::{evaluate, DetectionReport, FrameDetections};
use super::CliError;
use crate::cascade::{
    train_cascade, ArchiveSource, BackgroundMiner, Cascade, ChainSource, NegativeSource, TrainEvent,
};
use crate::error::{Error, Result};
use crate::geom::{Point2, TiltMode, TiltState};
use crate::raster::read_pgm;
use crate::samples::{
    parse_points, prepare, write_description_log, AnnotatedImage, Landmark, Markup, NegativeParams, PatchSet,
    PrepareParams, Side,
};
use crate::scan::{detect_hierarchy, DetectorConfig, FacialFeature, FaceLayout, FrameStatus, HierarchyConfig};

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn emit(w: &mut dyn Write, s: &str) -> CliResult<()> {
    w.write_all(s.as_bytes())
        .map_err(|e| CliError::Run(Error::InvalidInput(format!("write failed: {e}"))))
}

/// `.pgm` files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    v.sort();
    Ok(v)
}

/// Key matching frames to ground truth: the file stem.
pub fn frame_key(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// `point_order` lists, for each scheme id, the index of that landmark in
/// the points files.
fn point_order(cfg: &RunConfig) -> CliResult<Option<Vec<usize>>> {
    let Some(v) = cfg.raw("point_order") else {
        return Ok(None);
    };
    let order: Vec<usize> = v
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("point_order: {e}")))?;
    if order.len() != crate::samples::SCHEME_SIZE {
        return Err(CliError::Usage(format!(
            "point_order needs {} indices, found {}",
            crate::samples::SCHEME_SIZE,
            order.len()
        )));
    }
    Ok(Some(order))
}

pub fn read_markup(path: &Path, image_name: &str, order: Option<&[usize]>) -> Result<Markup> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pts = parse_points(&text)?;
    let pts = match order {
        None => pts,
        Some(o) => o
            .iter()
            .map(|&i| {
                pts.get(i).copied().ok_or_else(|| {
                    Error::InvalidInput(format!("{}: point_order index {i} beyond {} points", path.display(), pts.len()))
                })
            })
            .collect::<Result<_>>()?,
    };
    Markup::new(image_name, pts)
}

/// Ground truth for every `.pts` file in `dir`, keyed by stem.
fn read_truth(dir: &Path, order: Option<&[usize]>) -> Result<BTreeMap<String, Markup>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "pts") {
            let key = frame_key(&p.to_string_lossy());
            out.insert(key.clone(), read_markup(&p, &key, order)?);
        }
    }
    Ok(out)
}

pub struct PrepareSummary {
    pub images: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Writes `positives.fpset`, `negatives.fpset` and `samples.log` into the
/// `output` directory.
pub fn cmd_prepare(cfg: &RunConfig, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<PrepareSummary> {
    let images_dir = cfg.require_path("images").map_err(usage)?;
    let markups_dir = cfg.require_path("markups").map_err(usage)?;
    let out_dir = cfg.require_path("output").map_err(usage)?;
    let point: Landmark = cfg
        .get("point")
        .map_err(usage)?
        .ok_or_else(|| CliError::Usage("missing required setting \"point\"".into()))?;
    let w: u32 = cfg.get_or("w", 13).map_err(usage)?;
    if cfg.get_or("h", w).map_err(usage)? != w {
        return Err(CliError::Usage("samples are square: -w and -h must agree".into()));
    }
    let params = PrepareParams {
        point,
        window: w,
        base_side: cfg.get_or("base_side", w as f64).map_err(usage)?,
        negatives: NegativeParams {
            patch_side: w,
            ..NegativeParams::default()
        },
        seed: cfg.get_or("seed", 0).map_err(usage)?,
    };
    let order = point_order(cfg)?;
    let mut annotated = Vec::new();
    for img in list_images(&images_dir)? {
        let name = img.file_name().expect("file").to_string_lossy().into_owned();
        let pts = markups_dir.join(format!("{}.pts", frame_key(&name)));
        if !pts.exists() {
            emit(log, &format!("warning: no markup for {name}, skipped\n"))?;
            continue;
        }
        annotated.push(AnnotatedImage {
            image: read_pgm(&img)?,
            markup: read_markup(&pts, &name, order.as_deref())?,
        });
    }
    if annotated.is_empty() {
        return Err(CliError::Run(Error::InvalidInput(format!(
            "no annotated images in {}",
            images_dir.display()
        ))));
    }
    let prepared = prepare(&annotated, &params)?;
    for w in &prepared.warnings {
        emit(log, &format!("warning: {w}\n"))?;
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    prepared.positives.write(out_dir.join("positives.fpset"))?;
    prepared.negatives.write(out_dir.join("negatives.fpset"))?;
    let log_path = out_dir.join("samples.log");
    std::fs::write(&log_path, write_description_log(&prepared.descriptions)).map_err(|e| Error::io(&log_path, e))?;
    let s = PrepareSummary {
        images: annotated.len(),
        positives: prepared.positives.patches(true).len(),
        negatives: prepared.negatives.patches(false).len(),
    };
    emit(
        out,
        &format!(
            "{} images, {} with positives x 3 scales = {} positives, {} negatives ({} at {}x{})\n",
            s.images,
            prepared.descriptions.len(),
            s.positives,
            s.negatives,
            point,
            w,
            w
        ),
    )?;
    Ok(s)
}

pub struct TrainInputs {
    pub positives: PathBuf,
    pub negatives: PathBuf,
    pub output: PathBuf,
    /// Accepted for compatibility; neither changes training.
    pub nsplits: Option<u32>,
    pub mem: Option<u64>,
}

/// Trains a cascade and writes it to `output`. When a stage gets stuck the
/// completed stages are still written and the plateau is reported.
pub fn cmd_train(cfg: &RunConfig, inp: &TrainInputs, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Cascade> {
    if let Some(m) = inp.mem {
        emit(log, &format!("note: -mem {m} ignored; sample values are held in memory\n"))?;
    }
    if let Some(n) = inp.nsplits {
        if n != 1 {
            emit(log, &format!("note: -nsplits {n} ignored; weak classifiers are single-split stumps\n"))?;
        }
    }
    let params = cfg.train_params().map_err(usage)?;
    let pos = PatchSet::read(&inp.positives)?;
    let neg = PatchSet::read(&inp.negatives)?;
    let (ww, wh) = (pos.w, pos.h);
    if (neg.w, neg.h) != (ww, wh) {
        return Err(CliError::Run(Error::InvalidInput(format!(
            "negative archive is {}x{}, positives are {ww}x{wh}",
            neg.w, neg.h
        ))));
    }
    for (key, v) in [("w", ww), ("h", wh)] {
        if let Some(want) = cfg.get::<u32>(key).map_err(usage)? {
            if want != v {
                return Err(CliError::Usage(format!("-{key} {want} does not match the {ww}x{wh} archive")));
            }
        }
    }
    let mut sources: Vec<Box<dyn NegativeSource + Send>> = vec![Box::new(ArchiveSource::new(neg.patches(false)))];
    if let Some(dir) = cfg.path("background") {
        let bgs = list_images(&dir)?.iter().map(read_pgm).collect::<Result<Vec<_>>>()?;
        emit(log, &format!("mining negatives from {} background images\n", bgs.len()))?;
        let draws = cfg.get_or("mine_draws", 200_000usize).map_err(usage)?;
        sources.push(Box::new(BackgroundMiner::new(bgs, ww, wh, params.seed, draws)));
    }
    let mut source = ChainSource(sources);
    let mut done: Vec<crate::cascade::Stage> = Vec::new();
    let mut lines = String::new();
    let result = train_cascade(&pos.patches(true), &mut source, ww, wh, &params, &mut |ev| match ev {
        TrainEvent::StageStart { stage, positives, negatives } => {
            lines += &format!(
                "stage {stage}: {positives} positives, {negatives} negatives\n{:>4} | {:>8} | {:>8} | {:>12} | feature\n",
                "N", "HR", "FA", "ST.THR"
            );
        }
        TrainEvent::Round { info, threshold, hit_rate, false_alarm, .. } => {
            lines += &format!(
                "{:>4} | {:>8.6} | {:>8.6} | {:>12.6} | {}\n",
                info.round,
                hit_rate,
                false_alarm,
                threshold,
                info.feature_index
            );
        }
        TrainEvent::StageDone { stage, stage_data } => {
            lines += &format!(
                "stage {stage} done: {} weak, HR {:.6}, FA {:.6}\n",
                stage_data.strong.rounds.len(),
                stage_data.hit_rate,
                stage_data.false_alarm
            );
            done.push(stage_data.clone());
        }
        TrainEvent::NegativesExhausted { stage } => {
            lines += &format!("no negatives pass the first {stage} stages; training ends\n");
        }
    });
    emit(out, &lines)?;
    match result {
        Ok(c) => {
            c.save(&inp.output)?;
            emit(out, &format!("wrote {} stages to {}\n", c.stages.len(), inp.output.display()))?;
            Ok(c)
        }
        Err(e @ Error::StageStuck { .. }) => {
            if !done.is_empty() {
                let partial = Cascade {
                    window_w: ww,
                    window_h: wh,
                    feature_set: params.mode,
                    stages: done,
                };
                partial.save(&inp.output)?;
                emit(
                    log,
                    &format!("wrote the {} completed stages to {}\n", partial.stages.len(), inp.output.display()),
                )?;
            }
            Err(CliError::Run(e))
        }
        Err(e) => Err(CliError::Run(e)),
    }
}

pub fn cmd_mirror(input: &Path, output: &Path) -> CliResult<()> {
    Cascade::load(input)?.mirrored().save(output)?;
    Ok(())
}

pub fn cmd_inspect(path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let c = Cascade::load(path)?;
    let mut s = format!(
        "window {}x{}, mode {}, {} stages, {} weak classifiers\n",
        c.window_w,
        c.window_h,
        c.feature_set,
        c.stages.len(),
        c.weak_count()
    );
    let (hr, fa) = c
        .stages
        .iter()
        .fold((1.0, 1.0), |(h, f), st| (h * st.hit_rate, f * st.false_alarm));
    s += &format!("{:>5} | {:>4} | {:>12} | {:>8} | {:>8}\n", "stage", "weak", "theta", "HR", "FA");
    for (i, st) in c.stages.iter().enumerate() {
        s += &format!(
            "{:>5} | {:>4} | {:>12.6} | {:>8.6} | {:>8.6}\n",
            i,
            st.strong.rounds.len(),
            st.strong.threshold,
            st.hit_rate,
            st.false_alarm
        );
    }
    s += &format!("compound training HR {hr:.6}, FA {fa:.3e}\n");
    emit(out, &s)
}

fn load_cached(cache: &mut BTreeMap<PathBuf, Arc<Cascade>>, p: &Path) -> Result<Arc<Cascade>> {
    if let Some(c) = cache.get(p) {
        return Ok(c.clone());
    }
    let c = Arc::new(Cascade::load(p)?);
    cache.insert(p.to_path_buf(), c.clone());
    Ok(c)
}

fn tune(cfg: &RunConfig, d: &mut DetectorConfig, prefix: &str) -> CliResult<()> {
    let k = |s: &str| format!("{prefix}{s}");
    d.scale_factor = cfg.get_or(&k("scale_factor"), d.scale_factor).map_err(usage)?;
    d.min_neighbors = cfg.get_or(&k("min_neighbors"), d.min_neighbors).map_err(usage)?;
    if let Some(m) = cfg.get::<u32>(&k("min_size")).map_err(usage)? {
        d.min_w = m.max(d.cascade.window_w);
        d.min_h = m.max(d.cascade.window_h);
    }
    d.validate().map_err(usage)
}

/// Detector hierarchy described by the config. Right-side points without a
/// cascade of their own use the left counterpart's cascade on the mirrored
/// region; the right eye uses `eye_cascade` the same way.
pub fn hierarchy_from_config(cfg: &RunConfig) -> CliResult<HierarchyConfig> {
    let mut cache = BTreeMap::new();
    let face_path = cfg.require_path("face_cascade").map_err(usage)?;
    let mut face = DetectorConfig::region(load_cached(&mut cache, &face_path)?);
    tune(cfg, &mut face, "face_")?;
    let mut features = BTreeMap::new();
    let feature_det = |c: Arc<Cascade>, right: bool| -> CliResult<DetectorConfig> {
        let mut d = DetectorConfig {
            is_point: false,
            scale_factor: 1.2,
            on_right_side: right,
            ..DetectorConfig::point(c)
        };
        tune(cfg, &mut d, "feature_")?;
        Ok(d)
    };
    if let Some(p) = cfg.path("eye_cascade") {
        let c = load_cached(&mut cache, &p)?;
        features.insert(FacialFeature::LeftEye, feature_det(c.clone(), false)?);
        features.insert(FacialFeature::RightEye, feature_det(c, true)?);
    }
    for (key, f) in [("nose_cascade", FacialFeature::Nose), ("mouth_cascade", FacialFeature::Mouth)] {
        if let Some(p) = cfg.path(key) {
            features.insert(f, feature_det(load_cached(&mut cache, &p)?, false)?);
        }
    }
    let explicit = cfg.point_cascades().map_err(usage)?;
    let mut points = BTreeMap::new();
    for l in Landmark::DETECTED {
        let (path, right) = match explicit.get(&l) {
            Some(p) => (p.clone(), false),
            None if l.side() == Side::Right => match explicit.get(&l.mirrored()) {
                Some(p) => (p.clone(), true),
                None => continue,
            },
            None => continue,
        };
        let mut d = DetectorConfig::point(load_cached(&mut cache, &path)?);
        d.on_right_side = right;
        tune(cfg, &mut d, "")?;
        points.insert(l, d);
    }
    if points.is_empty() {
        return Err(CliError::Usage("no point cascades configured (point.<NAME> = path)".into()));
    }
    let layout = FaceLayout {
        point_expand: cfg.get_or("point_expand", FaceLayout::default().point_expand).map_err(usage)?,
        ..FaceLayout::default()
    };
    Ok(HierarchyConfig { face, features, points, layout })
}

fn coord(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    format!("{}", if r == 0.0 { 0.0 } else { r })
}

fn detect_one(path: &Path, cfg: &mut HierarchyConfig, tilt: &mut TiltState) -> String {
    let mut s = format!("image {}\n", path.display());
    let run = read_pgm(path).and_then(|img| detect_hierarchy(&img, cfg, tilt));
    match run {
        Err(e) => {
            tilt.reset();
            s += &format!("error {e}\n");
        }
        Ok(r) => {
            let mut names: Vec<Landmark> = cfg.points.keys().copied().collect();
            names.extend(r.points.keys().copied());
            names.sort_by_key(|l| Landmark::DETECTED.iter().position(|d| d == l));
            names.dedup();
            for l in names {
                match r.points.get(&l) {
                    Some(fp) if r.status == FrameStatus::Ok => {
                        s += &format!("{} {} {}", l, coord(fp.p.x), coord(fp.p.y));
                        s += if fp.inferred { " # inferred\n" } else { "\n" };
                    }
                    _ => s += &format!("{l} none\n"),
                }
            }
        }
    }
    s
}

/// Images to run on: files, directories of `.pgm` files, or a frame list.
pub enum DetectInput {
    /// Independent images, processed in parallel.
    Images(Vec<PathBuf>),
    /// Ordered frames sharing tilt state.
    Frames(Vec<PathBuf>),
}

impl DetectInput {
    pub fn from_paths(paths: &[PathBuf]) -> Result<DetectInput> {
        let mut v = Vec::new();
        for p in paths {
            if p.is_dir() {
                v.extend(list_images(p)?);
            } else {
                v.push(p.clone());
            }
        }
        Ok(DetectInput::Images(v))
    }

    /// One path per line, `#` comments; relative paths are taken from the
    /// list's directory.
    pub fn from_frame_list(list: &Path) -> Result<DetectInput> {
        let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
        let base = list.parent().unwrap_or(Path::new(""));
        Ok(DetectInput::Frames(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(|l| base.join(l))
                .collect(),
        ))
    }
}

/// Detection output, one block per image in input order.
pub fn run_detect(h: &HierarchyConfig, input: &DetectInput, mode: TiltMode) -> String {
    match input {
        DetectInput::Images(v) => v
            .par_iter()
            .map(|p| detect_one(p, &mut h.clone(), &mut TiltState::new(mode)))
            .collect::<Vec<_>>()
            .concat(),
        DetectInput::Frames(v) => {
            let mut cfg = h.clone();
            let mut tilt = TiltState::new(mode);
            v.iter().map(|p| detect_one(p, &mut cfg, &mut tilt)).collect()
        }
    }
}

pub fn cmd_detect(cfg: &RunConfig, input: &DetectInput, out: &mut dyn Write) -> CliResult<()> {
    let h = hierarchy_from_config(cfg)?;
    let mode = cfg.tilt_mode().map_err(usage)?;
    emit(out, &run_detect(&h, input, mode))
}

/// Reads `detect` output back into frames keyed by image stem.
pub fn parse_detections(text: &str) -> Result<Vec<FrameDetections>> {
    let mut frames: Vec<FrameDetections> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_ascii_whitespace().collect();
        match toks[0] {
            "image" => {
                let path = line["image".len()..].trim();
                frames.push(FrameDetections {
                    key: frame_key(path),
                    points: BTreeMap::new(),
                });
            }
            "error" => {}
            name => {
                let f = frames
                    .last_mut()
                    .ok_or_else(|| Error::parse(i + 1, "point line before any \"image\" line"))?;
                let l: Landmark = name.parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?;
                let p = match toks[1..] {
                    ["none"] => None,
                    [x, y] => {
                        let num = |t: &str| t.parse::<f64>().map_err(|_| Error::parse(i + 1, format!("bad coordinate {t:?}")));
                        Some(Point2::new(num(x)?, num(y)?))
                    }
                    _ => return Err(Error::parse(i + 1, "expected \"<name> <x> <y>\" or \"<name> none\"")),
                };
                f.points.insert(l, p);
            }
        }
    }
    Ok(frames)
}

pub enum EvalSource {
    /// Saved `detect` outputs, one per tilt mode.
    Files(Vec<(TiltMode, PathBuf)>),
    /// Run the hierarchy on a frame list once per configured tilt mode.
    Live(DetectInput),
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    source: &EvalSource,
    csv: Option<&Path>,
    out: &mut dyn Write,
    log: &mut dyn Write,
) -> CliResult<DetectionReport> {
    let markups = cfg.require_path("markups").map_err(usage)?;
    let fraction: f64 = cfg.get_or("fraction", 0.10).map_err(usage)?;
    if !(fraction > 0.0 && fraction.is_finite()) {
        return Err(CliError::Usage(format!("fraction {fraction} must be positive")));
    }
    let order = point_order(cfg)?;
    let truth = read_truth(&markups, order.as_deref())?;
    let runs: Vec<(TiltMode, Vec<FrameDetections>)> = match source {
        EvalSource::Files(files) => files
            .iter()
            .map(|(m, p)| {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok((*m, parse_detections(&text)?))
            })
            .collect::<Result<_>>()?,
        EvalSource::Live(input) => {
            let h = hierarchy_from_config(cfg)?;
            cfg.tilt_modes()
                .map_err(usage)?
                .into_iter()
                .map(|m| Ok((m, parse_detections(&run_detect(&h, input, m))?)))
                .collect::<Result<_>>()?
        }
    };
    let report = evaluate(&truth, &runs, fraction)?;
    for (m, n) in report.modes.iter().zip(&report.skipped) {
        if *n > 0 {
            emit(log, &format!("warning: {n} frames without ground truth skipped ({m})\n"))?;
        }
    }
    emit(out, &report.render_text())?;
    if let Some(p) = csv {
        std::fs::write(p, report.render_csv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}
