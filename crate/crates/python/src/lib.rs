//! Python bindings: images, integral tables, features, cascades, detection,
//! sample archives and the command line.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use fidpoint::cascade::Cascade;
use fidpoint::cli::commands::hierarchy_from_config;
use fidpoint::cli::RunConfig;
use fidpoint::geom::{self, Point2, TiltMode, TiltState};
use fidpoint::haar::{self, FeatureKind, FeatureSet};
use fidpoint::raster::{self, IntegralTables, Rect};
use fidpoint::samples::{self, Landmark, PatchSet};
use fidpoint::scan::{self, DetectorConfig, FrameStatus, HierarchyConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: fidpoint::Error) -> PyErr {
    match e {
        fidpoint::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = fidpoint::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// 8-bit grayscale image.
#[pyclass(name = "GrayImage", module = "fidpoint_py", skip_from_py_object)]
#[derive(Clone)]
struct PyGrayImage(raster::GrayImage);

#[pymethods]
impl PyGrayImage {
    /// Row-major pixel bytes of length `width * height`.
    #[new]
    fn new(width: u32, height: u32, data: Vec<u8>) -> PyResult<Self> {
        raster::GrayImage::from_raw(width, height, data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn read_pgm(path: PathBuf) -> PyResult<Self> {
        raster::read_pgm(path).map(Self).map_err(err)
    }

    fn write_pgm(&self, path: PathBuf) -> PyResult<()> {
        raster::write_pgm(path, &self.0).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn get(&self, x: u32, y: u32) -> PyResult<u8> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside image")));
        }
        Ok(self.0.get(x, y))
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.as_bytes())
    }

    fn mirrored(&self) -> Self {
        Self(self.0.mirrored())
    }

    fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> PyResult<Self> {
        self.0.crop(Rect { x, y, w, h }).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("GrayImage({}x{})", self.0.width(), self.0.height())
    }
}

/// Upright (and optionally 45-degree) summed-area tables.
#[pyclass(name = "IntegralTables", module = "fidpoint_py")]
struct PyIntegralTables(IntegralTables);

#[pymethods]
impl PyIntegralTables {
    #[new]
    #[pyo3(signature = (image, rotated = false))]
    fn new(image: &PyGrayImage, rotated: bool) -> Self {
        Self(IntegralTables::new(&image.0, rotated))
    }

    fn rect_sum(&self, x: u32, y: u32, w: u32, h: u32) -> PyResult<u64> {
        self.0.rect_sum(&Rect { x, y, w, h }).map_err(err)
    }

    /// Sum over the 45-degree rectangle whose top corner is `(x, y)`.
    fn rotated_rect_sum(&self, x: i64, y: i64, w: u32, h: u32) -> PyResult<u64> {
        self.0.rotated_rect_sum(&raster::RotRect::from_corner(x, y, w, h)).map_err(err)
    }

    fn window_inv_stddev(&self, x: u32, y: u32, w: u32, h: u32) -> PyResult<f64> {
        self.0.window_inv_stddev(&Rect { x, y, w, h }).map_err(err)
    }
}

/// Closed-form count of one feature kind in a `w x h` window.
#[pyfunction]
fn count_features(w: u32, h: u32, kind: &str) -> PyResult<u64> {
    Ok(haar::count_features(w, h, parse::<FeatureKind>(kind)?))
}

/// Features of a set (`BASIC` or `ALL`) as `(kind, x, y, w, h)` tuples.
#[pyfunction]
#[pyo3(signature = (w, h, set = "BASIC", stride = 1))]
fn enumerate_features(w: u32, h: u32, set: &str, stride: u32) -> PyResult<Vec<(String, u32, u32, u32, u32)>> {
    let set: FeatureSet = parse(set)?;
    let fs = if stride == 1 {
        haar::enumerate_features(w, h, set)
    } else {
        haar::enumerate_features_strided(w, h, set, stride)
    };
    Ok(fs.into_iter().map(|f| (f.kind.name().to_string(), f.x, f.y, f.w, f.h)).collect())
}

/// Trained boosted cascade.
#[pyclass(name = "Cascade", module = "fidpoint_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCascade(Arc<Cascade>);

#[pymethods]
impl PyCascade {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Cascade::load(path).map(|c| Self(Arc::new(c))).map_err(err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Cascade::deserialize(text).map(|c| Self(Arc::new(c))).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn serialize(&self) -> String {
        self.0.serialize()
    }

    fn mirrored(&self) -> Self {
        Self(Arc::new(self.0.mirrored()))
    }

    #[getter]
    fn window(&self) -> (u32, u32) {
        (self.0.window_w, self.0.window_h)
    }

    #[getter]
    fn n_stages(&self) -> usize {
        self.0.stages.len()
    }

    #[getter]
    fn n_weak(&self) -> usize {
        self.0.weak_count()
    }

    /// Per-stage `(hit_rate, false_alarm)` recorded during training.
    fn stage_rates(&self) -> Vec<(f64, f64)> {
        self.0.stages.iter().map(|s| (s.hit_rate, s.false_alarm)).collect()
    }

    /// True if the window at `(x, y)` at base size passes every stage.
    fn accepts(&self, image: &PyGrayImage, x: u32, y: u32) -> PyResult<bool> {
        let t = IntegralTables::new(&image.0, self.0.needs_rotated());
        let scale = haar::WindowScale::unit(self.0.window_w, self.0.window_h);
        fidpoint::cascade::classify_window(&self.0, &t, (x, y), scale)
            .map(|(ok, _)| ok)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Cascade({}x{}, {} stages, {} weak)",
            self.0.window_w,
            self.0.window_h,
            self.0.stages.len(),
            self.0.weak_count()
        )
    }
}

fn detector(cascade: &PyCascade, kind: &str, scale_factor: Option<f64>, min_neighbors: Option<usize>) -> PyResult<DetectorConfig> {
    let mut cfg = match kind {
        "point" => DetectorConfig::point(cascade.0.clone()),
        "region" => DetectorConfig::region(cascade.0.clone()),
        _ => return Err(PyValueError::new_err(format!("unknown detector kind {kind:?} (point|region)"))),
    };
    if let Some(s) = scale_factor {
        cfg.scale_factor = s;
    }
    if let Some(n) = min_neighbors {
        cfg.min_neighbors = n;
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Best grouped detection as `(x, y, w, h, neighbors)`, or None.
#[pyfunction]
#[pyo3(signature = (image, cascade, kind = "region", scale_factor = None, min_neighbors = None))]
fn detect(
    py: Python<'_>,
    image: &PyGrayImage,
    cascade: &PyCascade,
    kind: &str,
    scale_factor: Option<f64>,
    min_neighbors: Option<usize>,
) -> PyResult<Option<(u32, u32, u32, u32, usize)>> {
    let mut cfg = detector(cascade, kind, scale_factor, min_neighbors)?;
    let img = image.0.clone();
    let d = py.detach(move || scan::detect(&img, &mut cfg)).map_err(err)?;
    Ok(d.map(|d| (d.rect.x, d.rect.y, d.rect.w, d.rect.h, d.neighbors)))
}

/// Point detection: the centre of the best window, or None.
#[pyfunction]
#[pyo3(signature = (image, cascade, scale_factor = None, min_neighbors = None))]
fn detect_point(
    py: Python<'_>,
    image: &PyGrayImage,
    cascade: &PyCascade,
    scale_factor: Option<f64>,
    min_neighbors: Option<usize>,
) -> PyResult<Option<(u32, u32)>> {
    let mut cfg = detector(cascade, "point", scale_factor, min_neighbors)?;
    let img = image.0.clone();
    py.detach(move || scan::detect_point(&img, &mut cfg)).map_err(err)
}

/// Face, feature and point hierarchy built from a config file, with tilt
/// state carried across successive `detect` calls.
#[pyclass(name = "PointDetector", module = "fidpoint_py")]
struct PyPointDetector {
    cfg: HierarchyConfig,
    tilt: TiltState,
}

#[pymethods]
impl PyPointDetector {
    #[new]
    #[pyo3(signature = (config, tilt_mode = "none"))]
    fn new(config: PathBuf, tilt_mode: &str) -> PyResult<Self> {
        let rc = RunConfig::load(&config).map_err(err)?;
        let cfg = hierarchy_from_config(&rc).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { cfg, tilt: TiltState::new(parse::<TiltMode>(tilt_mode)?) })
    }

    /// Points found in one frame as `{name: (x, y, inferred)}`; empty when
    /// no face is found.
    fn detect(&mut self, py: Python<'_>, image: &PyGrayImage) -> PyResult<BTreeMap<String, (f64, f64, bool)>> {
        let (cfg, tilt) = (&mut self.cfg, &mut self.tilt);
        let r = py.detach(|| scan::detect_hierarchy(&image.0, cfg, tilt)).map_err(err)?;
        if r.status == FrameStatus::FaceAbsent {
            return Ok(BTreeMap::new());
        }
        Ok(r.points.iter().map(|(l, f)| (l.name().to_string(), (f.p.x, f.p.y, f.inferred))).collect())
    }

    #[getter]
    fn tilt(&self) -> f64 {
        self.tilt.alpha
    }

    fn reset(&mut self) {
        self.tilt.reset();
    }
}

/// Labelled patch archive.
#[pyclass(name = "PatchSet", module = "fidpoint_py")]
struct PyPatchSet(PatchSet);

#[pymethods]
impl PyPatchSet {
    #[new]
    fn new(w: u32, h: u32) -> Self {
        Self(PatchSet::new(w, h))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        PatchSet::read(path).map(Self).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(path).map_err(err)
    }

    fn push(&mut self, label: bool, patch: &PyGrayImage) -> PyResult<()> {
        self.0.push(label, patch.0.clone()).map_err(err)
    }

    #[getter]
    fn size(&self) -> (u32, u32) {
        (self.0.w, self.0.h)
    }

    fn patches(&self, label: bool) -> Vec<PyGrayImage> {
        self.0.patches(label).into_iter().map(PyGrayImage).collect()
    }

    fn __len__(&self) -> usize {
        self.0.records.len()
    }
}

/// Landmark names in scheme id order.
#[pyfunction]
fn landmarks() -> Vec<String> {
    (0..samples::SCHEME_SIZE).filter_map(Landmark::from_id).map(|l| l.name().to_string()).collect()
}

#[pyfunction]
fn parse_points(text: &str) -> PyResult<Vec<(f64, f64)>> {
    Ok(samples::parse_points(text).map_err(err)?.into_iter().map(|p| (p.x, p.y)).collect())
}

#[pyfunction]
fn write_points(points: Vec<(f64, f64)>) -> String {
    samples::write_points(&points.into_iter().map(|(x, y)| Point2::new(x, y)).collect::<Vec<_>>())
}

/// Head tilt in radians from the four eye corners.
#[pyfunction]
fn estimate_tilt(eye_corners: Vec<(f64, f64)>) -> PyResult<f64> {
    geom::estimate_tilt(&eye_corners.into_iter().map(|(x, y)| Point2::new(x, y)).collect::<Vec<_>>()).map_err(err)
}

/// True if `detected` lies within `fraction` of the inter-ocular distance of `truth`.
#[pyfunction]
#[pyo3(signature = (detected, truth, left_eye, right_eye, fraction = 0.1))]
fn interocular_success(
    detected: (f64, f64),
    truth: (f64, f64),
    left_eye: (f64, f64),
    right_eye: (f64, f64),
    fraction: f64,
) -> PyResult<bool> {
    let p = |t: (f64, f64)| Point2::new(t.0, t.1);
    geom::interocular_success(p(detected), p(truth), p(left_eye), p(right_eye), fraction).map_err(err)
}

/// Runs the `fidpoint` command line; returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let argv = std::iter::once("fidpoint".to_string()).chain(args).map(std::ffi::OsString::from);
        let (mut out, mut log) = (Vec::new(), Vec::new());
        let code = fidpoint::cli::run(argv, &mut out, &mut log);
        (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&log).into_owned())
    })
}

#[pymodule]
fn fidpoint_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrayImage>()?;
    m.add_class::<PyIntegralTables>()?;
    m.add_class::<PyCascade>()?;
    m.add_class::<PyPointDetector>()?;
    m.add_class::<PyPatchSet>()?;
    m.add_function(wrap_pyfunction!(count_features, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_features, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(detect_point, m)?)?;
    m.add_function(wrap_pyfunction!(landmarks, m)?)?;
    m.add_function(wrap_pyfunction!(parse_points, m)?)?;
    m.add_function(wrap_pyfunction!(write_points, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tilt, m)?)?;
    m.add_function(wrap_pyfunction!(interocular_success, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
