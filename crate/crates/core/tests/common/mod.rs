//! Synthetic data shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use fidpoint::geom::Point2;
use fidpoint::raster::{write_pgm, GrayImage};
use fidpoint::samples::{write_points, Landmark, Markup, SCHEME_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: u32 = 60;
/// Eye width written into synthetic markups.
pub const EYE_WIDTH: f64 = 24.0;

/// Smoothed uniform noise in roughly [70, 180] cluttered with flat
/// rectangles of random size and shade.
pub fn texture(rng: &mut impl Rng, w: u32, h: u32) -> GrayImage {
    let raw: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
    let at = |x: i64, y: i64| raw[(y.clamp(0, h as i64 - 1) * w as i64 + x.clamp(0, w as i64 - 1)) as usize];
    let mut img = GrayImage::from_fn(w, h, |x, y| {
        let mut s = 0.0f64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                s += at(x as i64 + dx, y as i64 + dy);
            }
        }
        (70.0 + 110.0 * s / 9.0).round() as u8
    });
    for _ in 0..8 {
        let (rw, rh) = (rng.random_range(3..16u32), rng.random_range(3..16u32));
        let (x0, y0) = (rng.random_range(0..w - rw), rng.random_range(0..h - rh));
        let v = rng.random_range(40..220u32) as u8;
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                img.set(x, y, v);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y) as f64 + rng.random_range(-12.0..12.0);
            img.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

/// Corner pattern at `(px, py)`: a bright block extending right and down
/// from the point, bordered above and to the left by a dark band.
pub fn plant(img: &mut GrayImage, px: u32, py: u32, rng: &mut impl Rng) {
    let (a, b) = (rng.random_range(5..=7i64), rng.random_range(5..=7i64));
    let t = rng.random_range(2..=4i64);
    let dark: f64 = rng.random_range(15.0..70.0);
    let bright: f64 = rng.random_range(180.0..240.0);
    for dy in -t..b {
        for dx in -t..a {
            let v = if dx >= 0 && dy >= 0 { bright } else { dark };
            let noisy = v + rng.random_range(-12.0..12.0);
            img.set((px as i64 + dx) as u32, (py as i64 + dy) as u32, noisy.round().clamp(0.0, 255.0) as u8);
        }
    }
}

/// Markup with the planted point as the left inner eye corner and level
/// eye corners `EYE_WIDTH` apart.
pub fn markup_for(name: &str, px: u32, py: u32) -> Markup {
    let p = Point2::new(px as f64, py as f64);
    let mut pts = vec![p; SCHEME_SIZE];
    pts[Landmark::LeftEyeOuter.id()] = Point2::new(p.x - EYE_WIDTH, p.y);
    pts[Landmark::RightEyeInner.id()] = Point2::new(p.x + 8.0, p.y);
    pts[Landmark::RightEyeOuter.id()] = Point2::new(p.x + 8.0 + EYE_WIDTH, p.y);
    pts[Landmark::LeftPupil.id()] = Point2::new(p.x - EYE_WIDTH / 2.0, p.y);
    pts[Landmark::RightPupil.id()] = Point2::new(p.x + 8.0 + EYE_WIDTH / 2.0, p.y);
    Markup::new(name, pts).expect("markup")
}

pub struct Synthetic {
    pub image: GrayImage,
    pub point: (u32, u32),
    /// Annotated position: the point with up to 1 px of marking noise.
    pub marked: (u32, u32),
}

/// Image `index` of a stream: textured background with the pattern planted
/// at a random point at least 14 px from the border.
pub fn synthetic(seed: u64, index: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut image = texture(&mut rng, SIDE, SIDE);
    let point = (rng.random_range(14..=SIDE - 14), rng.random_range(14..=SIDE - 14));
    plant(&mut image, point.0, point.1, &mut rng);
    let jitter = |v: u32, r: &mut ChaCha8Rng| (v as i64 + r.random_range(-1..=1i64)) as u32;
    let marked = (jitter(point.0, &mut rng), jitter(point.1, &mut rng));
    Synthetic { image, point, marked }
}

/// Pattern-free backgrounds for negative mining.
pub fn background(seed: u64, index: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    rng.set_stream(index);
    texture(&mut rng, SIDE, SIDE)
}

/// Writes `n` images with markups as `img_XXXX.pgm` / `img_XXXX.pts`, plus
/// `nbg` backgrounds under `bg/`.
pub fn write_dataset(dir: &Path, seed: u64, n: usize, nbg: usize) {
    let images = dir.join("images");
    let markups = dir.join("markups");
    let bg = dir.join("bg");
    for d in [&images, &markups, &bg] {
        std::fs::create_dir_all(d).expect("mkdir");
    }
    for i in 0..n {
        let s = synthetic(seed, i as u64);
        let name = format!("img_{i:04}");
        write_pgm(images.join(format!("{name}.pgm")), &s.image).expect("write image");
        let m = markup_for(&format!("{name}.pgm"), s.marked.0, s.marked.1);
        std::fs::write(markups.join(format!("{name}.pts")), write_points(&m.points)).expect("write points");
    }
    for i in 0..nbg {
        write_pgm(bg.join(format!("bg_{i:04}.pgm")), &background(seed, i as u64)).expect("write background");
    }
}

pub struct EndToEnd {
    pub stages: usize,
    pub stage_rates: Vec<(f64, f64)>,
    pub within_3: usize,
    pub false_points: usize,
    pub missed: usize,
    pub held_out: usize,
    pub seconds: f64,
}

/// Prepare, train and detect through the command layer on a fresh
/// synthetic dataset.
pub fn end_to_end(dir: &Path, n_train: usize, n_test: usize, nbg: usize, nstages: usize) -> EndToEnd {
    use fidpoint::cascade::Cascade;
    use fidpoint::cli::commands::{cmd_prepare, cmd_train, TrainInputs};
    use fidpoint::cli::RunConfig;
    use fidpoint::scan::{detect_point, DetectorConfig};
    use std::sync::Arc;

    let t0 = std::time::Instant::now();
    write_dataset(dir, 7, n_train, nbg);
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("images", dir.join("images").display().to_string()),
        ("markups", dir.join("markups").display().to_string()),
        ("output", dir.join("data").display().to_string()),
        ("background", dir.join("bg").display().to_string()),
        ("point", "LEFT_EYE_INNER".to_string()),
        ("w", "13".to_string()),
        ("h", "13".to_string()),
        ("nstages", nstages.to_string()),
        ("seed", "1".to_string()),
    ] {
        cfg.set(&k, v).expect("config key");
    }
    let (mut out, mut log) = (Vec::new(), Vec::new());
    cmd_prepare(&cfg, &mut out, &mut log).expect("prepare");
    let inp = TrainInputs {
        positives: dir.join("data/positives.fpset"),
        negatives: dir.join("data/negatives.fpset"),
        output: dir.join("data/cascade.txt"),
        nsplits: None,
        mem: None,
    };
    let trained = cmd_train(&cfg, &inp, &mut out, &mut log);
    if std::env::var_os("FIDPOINT_VERBOSE").is_some() {
        eprintln!("{}{}", String::from_utf8_lossy(&out), String::from_utf8_lossy(&log));
    }
    let cascade = trained.expect("train");
    let reloaded = Cascade::load(dir.join("data/cascade.txt")).expect("reload");
    assert_eq!(reloaded.serialize(), cascade.serialize());
    let det = DetectorConfig::point(Arc::new(cascade.clone()));
    let results: Vec<Option<f64>> = {
        use rayon::prelude::*;
        (0..n_test)
            .into_par_iter()
            .map(|i| {
                let s = synthetic(8, i as u64);
                let mut d = det.clone();
                detect_point(&s.image, &mut d).expect("detect").map(|(x, y)| {
                    Point2::new(x as f64, y as f64).dist(&Point2::new(s.point.0 as f64, s.point.1 as f64))
                })
            })
            .collect()
    };
    EndToEnd {
        stages: cascade.stages.len(),
        stage_rates: cascade.stages.iter().map(|s| (s.hit_rate, s.false_alarm)).collect(),
        within_3: results.iter().filter(|r| matches!(r, Some(d) if *d <= 3.0)).count(),
        false_points: results.iter().filter(|r| matches!(r, Some(d) if *d > 6.0)).count(),
        missed: results.iter().filter(|r| r.is_none()).count(),
        held_out: n_test,
        seconds: t0.elapsed().as_secs_f64(),
    }
}
