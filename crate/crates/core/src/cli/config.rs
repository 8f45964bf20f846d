//! `key = value` run configuration shared by all commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cascade::TrainParams;
use crate::error::{Error, Result};
use crate::geom::TiltMode;
use crate::haar::FeatureSet;
use crate::samples::Landmark;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "FIDPOINT_CONFIG";

/// Recognised keys besides `point.<LANDMARK>`.
pub const KEYS: &[&str] = &[
    "nstages",
    "npos",
    "nneg",
    "minhitrate",
    "maxfalsealarm",
    "mode",
    "w",
    "h",
    "seed",
    "max_weak",
    "mine_draws",
    "scale_factor",
    "min_neighbors",
    "min_size",
    "face_scale_factor",
    "face_min_neighbors",
    "face_min_size",
    "feature_scale_factor",
    "feature_min_neighbors",
    "feature_min_size",
    "point_expand",
    "tilt_mode",
    "tilt_modes",
    "fraction",
    "point",
    "point_order",
    "base_side",
    "images",
    "markups",
    "output",
    "background",
    "face_cascade",
    "eye_cascade",
    "nose_cascade",
    "mouth_cascade",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    base: Option<PathBuf>,
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        return Ok(());
    }
    if let Some(name) = key.strip_prefix("point.") {
        return name.parse::<Landmark>().map(|_| ());
    }
    Err(Error::InvalidInput(format!("unknown config key {key:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected \"key = value\", found {line:?}")))?;
            let k = k.trim();
            check_key(k).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(RunConfig { values, base: None })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::parse(&text)?;
        c.base = path.parent().map(Path::to_path_buf);
        Ok(c)
    }

    /// Config from an explicit path, else from [`CONFIG_ENV`], else empty.
    pub fn discover(explicit: Option<&Path>) -> Result<RunConfig> {
        match explicit {
            Some(p) => RunConfig::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => RunConfig::load(Path::new(&p)),
                _ => Ok(RunConfig::default()),
            },
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        check_key(key)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("expected key=value, found {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::InvalidInput(format!("config {key} = {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| self.resolve(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::InvalidInput(format!("missing required setting {key:?}")))
    }

    fn resolve(&self, v: &str) -> PathBuf {
        let p = PathBuf::from(v);
        match &self.base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        }
    }

    /// `point.<LANDMARK>` cascade paths.
    pub fn point_cascades(&self) -> Result<BTreeMap<Landmark, PathBuf>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.values {
            if let Some(name) = k.strip_prefix("point.") {
                out.insert(name.parse()?, self.resolve(v));
            }
        }
        Ok(out)
    }

    pub fn train_params(&self) -> Result<TrainParams> {
        let d = TrainParams::default();
        let p = TrainParams {
            nstages: self.get_or("nstages", d.nstages)?,
            npos: self.get_or("npos", d.npos)?,
            nneg: self.get_or("nneg", d.nneg)?,
            minhitrate: self.get_or("minhitrate", d.minhitrate)?,
            maxfalsealarm: self.get_or("maxfalsealarm", d.maxfalsealarm)?,
            mode: self.get_or::<FeatureSet>("mode", d.mode)?,
            max_weak_per_stage: self.get_or("max_weak", d.max_weak_per_stage)?,
            seed: self.get_or("seed", d.seed)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn tilt_mode(&self) -> Result<TiltMode> {
        self.get_or("tilt_mode", TiltMode::None)
    }

    /// Modes compared by `evaluate`, default all three.
    pub fn tilt_modes(&self) -> Result<Vec<TiltMode>> {
        match self.raw("tilt_modes") {
            None => Ok(TiltMode::ALL.to_vec()),
            Some(v) => v.split(',').map(|m| m.trim().parse()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_validate() {
        let c = RunConfig::parse("# training\nnstages = 12\nminhitrate=0.99 # inline\n\nmode = ALL\npoint.LEFT_EYE_INNER = a.txt\n").unwrap();
        let p = c.train_params().unwrap();
        assert_eq!((p.nstages, p.minhitrate, p.mode), (12, 0.99, FeatureSet::All));
        assert_eq!(c.point_cascades().unwrap()[&Landmark::LeftEyeInner], PathBuf::from("a.txt"));
        assert!(matches!(RunConfig::parse("a = 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("\nnstages 3\n"), Err(Error::Parse { line: 2, .. })));
        assert!(RunConfig::parse("point.NOSE = x\n").is_err());
        let bad = RunConfig::parse("maxfalsealarm = 1.5\n").unwrap();
        assert!(bad.train_params().is_err());
        let bad = RunConfig::parse("nstages = many\n").unwrap();
        assert!(bad.train_params().is_err());
    }

    #[test]
    fn overrides_and_modes() {
        let mut c = RunConfig::parse("tilt_modes = none, half\n").unwrap();
        assert_eq!(c.tilt_modes().unwrap(), vec![TiltMode::None, TiltMode::Half]);
        c.set_pair("nstages=3").unwrap();
        assert_eq!(c.get::<usize>("nstages").unwrap(), Some(3));
        assert!(c.set_pair("bogus=1").is_err());
        assert_eq!(RunConfig::default().tilt_modes().unwrap().len(), 3);
    }
}
