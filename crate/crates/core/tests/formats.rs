//! Golden files and byte-exact round trips of every data format.

mod common;

use std::path::{Path, PathBuf};

use fidpoint::cascade::Cascade;
use fidpoint::cli::commands::{cmd_prepare, cmd_train, TrainInputs};
use fidpoint::cli::RunConfig;
use fidpoint::raster::{load_pgm, read_pgm, save_pgm};
use fidpoint::samples::{parse_description_log, parse_points, write_description_log, write_points, PatchSet};

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn read(name: &str) -> Vec<u8> {
    std::fs::read(golden().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn text(name: &str) -> String {
    String::from_utf8(read(name)).expect("utf-8")
}

#[test]
fn golden_cascade_round_trips() {
    let t = text("cascade.txt");
    let c = Cascade::deserialize(&t).unwrap();
    assert_eq!(c.serialize(), t);
    assert!(c.stages.len() >= 2);
    assert_eq!(c.mirrored().mirrored().serialize(), t);
}

#[test]
fn golden_log_points_and_patches_round_trip() {
    let log = text("samples.log");
    let d = parse_description_log(&log).unwrap();
    assert!(d.iter().all(|d| d.rects.len() == 3));
    assert_eq!(write_description_log(&d), log);
    let pts = text("image.pts");
    assert_eq!(write_points(&parse_points(&pts).unwrap()), pts);
    let b = read("patches.fpset");
    let set = PatchSet::from_bytes(&b).unwrap();
    assert_eq!((set.w, set.h), (13, 13));
    assert_eq!(set.to_bytes().unwrap(), b);
    let img = read("image.pgm");
    assert_eq!(save_pgm(&load_pgm(&img).unwrap()), img);
}

/// Log line of a 384x286 image with the point at (196, 175) and sample side
/// 23: squares of 25, 23 and 21 centred on the point.
#[test]
fn prepare_reproduces_reference_log_line() {
    let dir = tempfile::tempdir().unwrap();
    let (images, markups) = (dir.path().join("images"), dir.path().join("markups"));
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&markups).unwrap();
    let img = fidpoint::raster::GrayImage::from_fn(384, 286, |x, y| ((x * 7 + y * 3) % 251) as u8);
    fidpoint::raster::write_pgm(images.join("BioID_0000.pgm"), &img).unwrap();
    let m = common::markup_for("BioID_0000.pgm", 196, 175);
    std::fs::write(markups.join("BioID_0000.pts"), write_points(&m.points)).unwrap();
    let mut cfg = RunConfig::default();
    cfg.set("images", images.display().to_string()).unwrap();
    cfg.set("markups", markups.display().to_string()).unwrap();
    cfg.set("output", dir.path().join("out").display().to_string()).unwrap();
    cfg.set("point", "LEFT_EYE_INNER").unwrap();
    cfg.set("base_side", "23").unwrap();
    let (mut out, mut log) = (Vec::new(), Vec::new());
    let s = cmd_prepare(&cfg, &mut out, &mut log).unwrap();
    assert_eq!((s.positives, s.negatives), (3, 16));
    let log = std::fs::read_to_string(dir.path().join("out/samples.log")).unwrap();
    assert_eq!(log, "BioID_0000.pgm 3 184 163 25 25 185 164 23 23 186 165 21 21\n");
}

/// Rewrites the golden files: `cargo test --test formats -- --ignored`.
#[test]
#[ignore]
fn regenerate_golden() {
    let dir = tempfile::tempdir().unwrap();
    common::write_dataset(dir.path(), 11, 6, 4);
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("images", dir.path().join("images")),
        ("markups", dir.path().join("markups")),
        ("output", dir.path().join("data")),
        ("background", dir.path().join("bg")),
    ] {
        cfg.set(k, v.display().to_string()).unwrap();
    }
    cfg.set("point", "LEFT_EYE_INNER").unwrap();
    cfg.set("nstages", "3").unwrap();
    cfg.set("max_weak", "10").unwrap();
    let (mut out, mut log) = (Vec::new(), Vec::new());
    cmd_prepare(&cfg, &mut out, &mut log).unwrap();
    let data = dir.path().join("data");
    let inp = TrainInputs {
        positives: data.join("positives.fpset"),
        negatives: data.join("negatives.fpset"),
        output: golden().join("cascade.txt"),
        nsplits: None,
        mem: None,
    };
    cmd_train(&cfg, &inp, &mut out, &mut log).unwrap();
    let mut set = PatchSet::read(data.join("positives.fpset")).unwrap();
    set.records.extend(PatchSet::read(data.join("negatives.fpset")).unwrap().records.into_iter().take(16));
    set.write(golden().join("patches.fpset")).unwrap();
    std::fs::copy(data.join("samples.log"), golden().join("samples.log")).unwrap();
    std::fs::copy(dir.path().join("markups/img_0000.pts"), golden().join("image.pts")).unwrap();
    let img = read_pgm(dir.path().join("images/img_0000.pgm")).unwrap();
    fidpoint::raster::write_pgm(golden().join("image.pgm"), &img).unwrap();
}
