//! Stage assembly, cascade training with negative bootstrapping, the text
//! cascade format, and left-right mirroring.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boost::{Booster, Parity, RoundInfo, StrongClassifier, Stump, TrainingData, WeakClassifier, WeightedWeak};
use crate::error::{Error, Result};
use crate::haar::{enumerate_features, FeatureSet, HaarFeature, ScaledFeature, WindowScale};
use crate::raster::{resample_region, GrayImage, IntegralTables, Rect};

pub const FORMAT_HEADER: &str = "FIDCASCADE 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub strong: StrongClassifier,
    pub hit_rate: f64,
    pub false_alarm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub window_w: u32,
    pub window_h: u32,
    pub feature_set: FeatureSet,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub nstages: usize,
    pub npos: usize,
    pub nneg: usize,
    pub minhitrate: f64,
    pub maxfalsealarm: f64,
    pub mode: FeatureSet,
    pub max_weak_per_stage: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            nstages: 20,
            npos: 4563,
            nneg: 4000,
            minhitrate: 0.995,
            maxfalsealarm: 0.5,
            mode: FeatureSet::Basic,
            max_weak_per_stage: 100,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.maxfalsealarm > 0.0 && self.maxfalsealarm < 1.0) {
            return bad(format!("maxfalsealarm {} must lie in (0, 1)", self.maxfalsealarm));
        }
        if !(self.minhitrate > 0.0 && self.minhitrate <= 1.0) {
            return bad(format!("minhitrate {} must lie in (0, 1]", self.minhitrate));
        }
        if self.minhitrate <= self.maxfalsealarm {
            return bad("minhitrate must exceed maxfalsealarm".into());
        }
        if self.nstages == 0 || self.npos == 0 || self.nneg == 0 || self.max_weak_per_stage == 0 {
            return bad("nstages, npos, nneg and max_weak_per_stage must be positive".into());
        }
        Ok(())
    }
}

/// Worst-case cascade hit rate and false-alarm rate after `n` stages that each
/// just meet their targets.
pub fn compound_bounds(minhitrate: f64, maxfalsealarm: f64, n: usize) -> (f64, f64) {
    (minhitrate.powi(n as i32), maxfalsealarm.powi(n as i32))
}

/// Stage threshold for a target hit rate. With `n` positive scores sorted
/// descending, `k = ceil(minhitrate * n)` of them must pass, so the threshold
/// is the `k`-th largest score (every score at or above it passes, ties
/// included). It never exceeds the boosting default `sum(alpha) / 2`.
pub fn adapt_threshold(sc: &StrongClassifier, positive_scores: &[f64], minhitrate: f64) -> f64 {
    let default = 0.5 * sc.alpha_sum();
    if positive_scores.is_empty() {
        return default;
    }
    let n = positive_scores.len();
    let k = ((minhitrate * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = positive_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1].min(default)
}

fn rate(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

/// Training progress notifications.
#[derive(Clone, Debug)]
pub enum TrainEvent {
    StageStart {
        stage: usize,
        positives: usize,
        negatives: usize,
    },
    Round {
        stage: usize,
        info: RoundInfo,
        threshold: f64,
        hit_rate: f64,
        false_alarm: f64,
    },
    StageDone {
        stage: usize,
        stage_data: Stage,
    },
    /// Every available negative is already rejected.
    NegativesExhausted {
        stage: usize,
    },
}

/// Boosts one stage on a prepared sample table, adding weak classifiers until
/// the adapted threshold yields a false-alarm rate within target.
pub fn train_stage_on(
    data: &TrainingData,
    params: &TrainParams,
    stage: usize,
    sink: &mut dyn FnMut(&TrainEvent),
) -> Result<Stage> {
    let mut booster = Booster::new(data)?;
    let labels = data.labels();
    let mut last = (0.0, 1.0);
    for _ in 0..params.max_weak_per_stage {
        let info = booster.round();
        let strong = booster.strong();
        let scores = booster.scores();
        let pos: Vec<f64> = (0..data.len()).filter(|&i| labels[i]).map(|i| scores[i]).collect();
        let neg: Vec<f64> = (0..data.len()).filter(|&i| !labels[i]).map(|i| scores[i]).collect();
        let threshold = adapt_threshold(&strong, &pos, params.minhitrate);
        let hit_rate = rate(&pos, threshold);
        let false_alarm = rate(&neg, threshold);
        sink(&TrainEvent::Round {
            stage,
            info,
            threshold,
            hit_rate,
            false_alarm,
        });
        last = (hit_rate, false_alarm);
        if false_alarm <= params.maxfalsealarm {
            return Ok(Stage {
                strong: StrongClassifier { threshold, ..strong },
                hit_rate,
                false_alarm,
            });
        }
    }
    Err(Error::StageStuck {
        stage,
        hit_rate: last.0,
        false_alarm: last.1,
        nweak: params.max_weak_per_stage,
    })
}

pub fn train_stage(
    positives: &[GrayImage],
    negatives: &[GrayImage],
    features: &[HaarFeature],
    params: &TrainParams,
) -> Result<Stage> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateSamples {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let data = TrainingData::new(features.to_vec(), positives, negatives)?;
    train_stage_on(&data, params, 0, &mut |_| {})
}

/// Supplier of window-sized negative patches.
pub trait NegativeSource {
    /// The next candidate, or `None` once exhausted.
    fn next_patch(&mut self) -> Option<GrayImage>;
}

/// A fixed list of patches, each offered once.
pub struct ArchiveSource {
    patches: std::vec::IntoIter<GrayImage>,
}

impl ArchiveSource {
    pub fn new(patches: Vec<GrayImage>) -> Self {
        ArchiveSource {
            patches: patches.into_iter(),
        }
    }
}

impl NegativeSource for ArchiveSource {
    fn next_patch(&mut self) -> Option<GrayImage> {
        self.patches.next()
    }
}

/// Random windows cut from background images at random positions and
/// scales, resampled to the training window. Stops after `max_draws`.
pub struct BackgroundMiner {
    images: Vec<GrayImage>,
    window_w: u32,
    window_h: u32,
    rng: ChaCha8Rng,
    remaining: usize,
}

impl BackgroundMiner {
    pub fn new(images: Vec<GrayImage>, window_w: u32, window_h: u32, seed: u64, max_draws: usize) -> Self {
        let images = images
            .into_iter()
            .filter(|i| i.width() >= window_w && i.height() >= window_h)
            .collect();
        BackgroundMiner {
            images,
            window_w,
            window_h,
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: max_draws,
        }
    }
}

impl NegativeSource for BackgroundMiner {
    fn next_patch(&mut self) -> Option<GrayImage> {
        if self.remaining == 0 || self.images.is_empty() {
            return None;
        }
        self.remaining -= 1;
        let img = &self.images[self.rng.random_range(0..self.images.len())];
        let max_f = (img.width() as f64 / self.window_w as f64).min(img.height() as f64 / self.window_h as f64);
        let f = if max_f > 1.0 {
            self.rng.random_range(1.0..max_f)
        } else {
            1.0
        };
        let w = ((self.window_w as f64 * f).round() as u32).clamp(self.window_w, img.width());
        let h = ((self.window_h as f64 * f).round() as u32).clamp(self.window_h, img.height());
        let x = self.rng.random_range(0..=img.width() - w);
        let y = self.rng.random_range(0..=img.height() - h);
        resample_region(img, Rect::new(x, y, w, h), self.window_w, self.window_h).ok()
    }
}

/// Sources drained in order.
pub struct ChainSource(pub Vec<Box<dyn NegativeSource + Send>>);

impl NegativeSource for ChainSource {
    fn next_patch(&mut self) -> Option<GrayImage> {
        for s in &mut self.0 {
            if let Some(p) = s.next_patch() {
                return Some(p);
            }
        }
        None
    }
}

/// Trains stage after stage. Before each stage the positive and negative
/// pools are cut to the samples the cascade so far still accepts, and the
/// negative pool is topped up to `nneg` with accepted candidates from
/// `negatives`. Training ends after `nstages`, or early once no accepted
/// negative remains.
pub fn train_cascade(
    positives: &[GrayImage],
    negatives: &mut dyn NegativeSource,
    window_w: u32,
    window_h: u32,
    params: &TrainParams,
    sink: &mut dyn FnMut(&TrainEvent),
) -> Result<Cascade> {
    params.validate()?;
    if let Some(p) = positives.iter().find(|p| (p.width(), p.height()) != (window_w, window_h)) {
        return Err(Error::InvalidInput(format!(
            "positive patch is {}x{}, expected {window_w}x{window_h}",
            p.width(),
            p.height()
        )));
    }
    let features = enumerate_features(window_w, window_h, params.mode);
    let mut cascade = Cascade {
        window_w,
        window_h,
        feature_set: params.mode,
        stages: Vec::new(),
    };
    let mut pool: Vec<GrayImage> = Vec::new();
    for stage in 0..params.nstages {
        let sc = ScaledCascade::new(&cascade, WindowScale::unit(window_w, window_h))?;
        let accepts = |p: &GrayImage| {
            let t = IntegralTables::new(p, sc.needs_rotated());
            sc.classify(&t, 0, 0).is_none()
        };
        let pos: Vec<GrayImage> = positives.iter().filter(|p| accepts(p)).take(params.npos).cloned().collect();
        pool.retain(|p| accepts(p));
        while pool.len() < params.nneg {
            let Some(p) = negatives.next_patch() else {
                break;
            };
            if (p.width(), p.height()) == (window_w, window_h) && accepts(&p) {
                pool.push(p);
            }
        }
        if pool.is_empty() {
            sink(&TrainEvent::NegativesExhausted { stage });
            break;
        }
        if pos.is_empty() {
            return Err(Error::DegenerateSamples {
                positives: 0,
                negatives: pool.len(),
            });
        }
        sink(&TrainEvent::StageStart {
            stage,
            positives: pos.len(),
            negatives: pool.len(),
        });
        let data = TrainingData::new(features.clone(), &pos, &pool)?;
        let st = train_stage_on(&data, params, stage, sink)?;
        sink(&TrainEvent::StageDone {
            stage,
            stage_data: st.clone(),
        });
        cascade.stages.push(st);
    }
    Ok(cascade)
}

#[derive(Clone, Debug)]
struct ScaledWeak {
    feature: ScaledFeature,
    stump: Stump,
    alpha: f64,
}

#[derive(Clone, Debug)]
struct ScaledStage {
    weaks: Vec<ScaledWeak>,
    threshold: f64,
}

/// A cascade with every feature realised at one window scale, ready for
/// repeated evaluation.
#[derive(Clone, Debug)]
pub struct ScaledCascade {
    scale: WindowScale,
    stages: Vec<ScaledStage>,
    rotated: bool,
}

impl ScaledCascade {
    pub fn new(c: &Cascade, scale: WindowScale) -> Result<Self> {
        let mut stages = Vec::with_capacity(c.stages.len());
        let mut rotated = false;
        for st in &c.stages {
            let mut weaks = Vec::with_capacity(st.strong.rounds.len());
            for r in &st.strong.rounds {
                rotated |= r.weak.feature.kind.is_rotated();
                weaks.push(ScaledWeak {
                    feature: ScaledFeature::new(&r.weak.feature, scale)?,
                    stump: r.weak.stump,
                    alpha: r.alpha,
                });
            }
            stages.push(ScaledStage {
                weaks,
                threshold: st.strong.threshold,
            });
        }
        Ok(ScaledCascade { scale, stages, rotated })
    }

    pub fn scale(&self) -> WindowScale {
        self.scale
    }

    pub fn needs_rotated(&self) -> bool {
        self.rotated
    }

    /// Index of the rejecting stage, or `None` when the window at `(ox, oy)`
    /// passes every stage. The caller guarantees bounds.
    #[inline]
    pub fn classify(&self, t: &IntegralTables, ox: u32, oy: u32) -> Option<usize> {
        if self.stages.is_empty() {
            return None;
        }
        let inv_sigma = t.inv_stddev(ox, oy, ox + self.scale.w, oy + self.scale.h);
        for (i, st) in self.stages.iter().enumerate() {
            if stage_score(st, t, ox, oy, inv_sigma) < st.threshold {
                return Some(i);
            }
        }
        None
    }

    /// Per-stage `(score, passed)` for every stage, without early exit.
    pub fn stage_scores(&self, t: &IntegralTables, ox: u32, oy: u32) -> Vec<(f64, bool)> {
        let inv_sigma = t.inv_stddev(ox, oy, ox + self.scale.w, oy + self.scale.h);
        self.stages
            .iter()
            .map(|st| {
                let s = stage_score(st, t, ox, oy, inv_sigma);
                (s, s >= st.threshold)
            })
            .collect()
    }
}

#[inline]
fn stage_score(st: &ScaledStage, t: &IntegralTables, ox: u32, oy: u32, inv_sigma: f64) -> f64 {
    let mut score = 0.0;
    for w in &st.weaks {
        if w.stump.classify(w.feature.response(t, ox, oy) * inv_sigma) {
            score += w.alpha;
        }
    }
    score
}

/// Cascade verdict for the window at `origin` scaled to `scale`:
/// `(accepted, rejecting stage)`. A cascade without stages accepts.
pub fn classify_window(
    c: &Cascade,
    t: &IntegralTables,
    origin: (u32, u32),
    scale: WindowScale,
) -> Result<(bool, Option<usize>)> {
    if !Rect::new(origin.0, origin.1, scale.w, scale.h).fits_within(t.width(), t.height()) {
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
    let sc = ScaledCascade::new(c, scale)?;
    if sc.needs_rotated() && !t.has_rotated() {
        return Err(Error::InvalidInput("cascade needs rotated tables".into()));
    }
    let r = sc.classify(t, origin.0, origin.1);
    Ok((r.is_none(), r))
}

impl Cascade {
    /// Left-right mirror image: every classifier sees the flipped window
    /// exactly as the original sees the unflipped one.
    pub fn mirrored(&self) -> Cascade {
        let stages = self
            .stages
            .iter()
            .map(|st| {
                let rounds = st
                    .strong
                    .rounds
                    .iter()
                    .map(|r| {
                        let (feature, negate) = r.weak.feature.mirrored(self.window_w);
                        let stump = if negate {
                            Stump {
                                threshold: -r.weak.stump.threshold,
                                parity: r.weak.stump.parity.flipped(),
                                error: r.weak.stump.error,
                            }
                        } else {
                            r.weak.stump
                        };
                        WeightedWeak {
                            alpha: r.alpha,
                            weak: WeakClassifier { feature, stump },
                        }
                    })
                    .collect();
                Stage {
                    strong: StrongClassifier {
                        rounds,
                        threshold: st.strong.threshold,
                    },
                    ..st.clone()
                }
            })
            .collect();
        Cascade {
            stages,
            ..self.clone()
        }
    }

    pub fn needs_rotated(&self) -> bool {
        self.stages
            .iter()
            .flat_map(|s| &s.strong.rounds)
            .any(|r| r.weak.feature.kind.is_rotated())
    }

    pub fn weak_count(&self) -> usize {
        self.stages.iter().map(|s| s.strong.rounds.len()).sum()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(out, "window {} {}", self.window_w, self.window_h);
        let _ = writeln!(out, "features {}", self.feature_set);
        let _ = writeln!(out, "stages {}", self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(
                out,
                "stage {i} threshold {} nweak {} hr {} fa {}",
                real(st.strong.threshold),
                st.strong.rounds.len(),
                real(st.hit_rate),
                real(st.false_alarm)
            );
            for r in &st.strong.rounds {
                let f = r.weak.feature;
                let _ = writeln!(
                    out,
                    "weak alpha {} parity {} thresh {} kind {} x {} y {} w {} h {}",
                    real(r.alpha),
                    if r.weak.stump.parity == Parity::Pos { "+1" } else { "-1" },
                    real(r.weak.stump.threshold),
                    f.kind,
                    f.x,
                    f.y,
                    f.w,
                    f.h
                );
            }
        }
        out
    }

    /// Parses the text format. The per-weak training error is not stored;
    /// it is reconstructed from alpha as `1 / (1 + e^alpha)`.
    pub fn deserialize(text: &str) -> Result<Cascade> {
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .filter(|(_, l)| !l.is_empty())
                .ok_or_else(|| Error::parse(0, format!("unexpected end of file, expected {what}")))
        };
        let (n, l) = next("header")?;
        if l != FORMAT_HEADER {
            return Err(Error::parse(n, format!("expected {FORMAT_HEADER:?}, found {l:?}")));
        }
        let (n, l) = next("window line")?;
        let mut tk = Tokens::new(n, l);
        tk.keyword("window")?;
        let window_w: u32 = tk.value()?;
        let window_h: u32 = tk.value()?;
        tk.end()?;
        if window_w == 0 || window_h == 0 {
            return Err(Error::parse(n, "window dimensions must be positive"));
        }
        let (n, l) = next("features line")?;
        let mut tk = Tokens::new(n, l);
        tk.keyword("features")?;
        let feature_set: FeatureSet = tk.value_with(|s| s.parse())?;
        tk.end()?;
        let (n, l) = next("stages line")?;
        let mut tk = Tokens::new(n, l);
        tk.keyword("stages")?;
        let nstages: usize = tk.value()?;
        tk.end()?;
        let mut stages = Vec::with_capacity(nstages.min(1024));
        for i in 0..nstages {
            let (n, l) = next("stage line")?;
            let mut tk = Tokens::new(n, l);
            tk.keyword("stage")?;
            let idx: usize = tk.value()?;
            if idx != i {
                return Err(Error::parse(n, format!("expected stage {i}, found {idx}")));
            }
            let threshold = tk.field("threshold")?;
            let nweak: usize = tk.field("nweak")?;
            let hit_rate = tk.field("hr")?;
            let false_alarm = tk.field("fa")?;
            tk.end()?;
            let mut rounds = Vec::with_capacity(nweak.min(4096));
            for _ in 0..nweak {
                let (n, l) = next("weak line")?;
                let mut tk = Tokens::new(n, l);
                tk.keyword("weak")?;
                let alpha: f64 = tk.field("alpha")?;
                tk.keyword("parity")?;
                let parity = tk.value_with(|s| match s {
                    "+1" => Ok(Parity::Pos),
                    "-1" => Ok(Parity::Neg),
                    _ => Err(Error::InvalidInput(format!("parity must be +1 or -1, found {s:?}"))),
                })?;
                let thresh = tk.field("thresh")?;
                tk.keyword("kind")?;
                let kind = tk.value_with(|s| s.parse())?;
                let f = HaarFeature::new(kind, tk.field("x")?, tk.field("y")?, tk.field("w")?, tk.field("h")?);
                tk.end()?;
                if !feature_set.contains(kind) {
                    return Err(Error::parse(n, format!("kind {kind} not in feature set {feature_set}")));
                }
                if !f.fits(window_w, window_h) {
                    return Err(Error::Bounds(format!(
                        "line {n}: feature {f} does not fit the {window_w}x{window_h} window"
                    )));
                }
                rounds.push(WeightedWeak {
                    alpha,
                    weak: WeakClassifier {
                        feature: f,
                        stump: Stump {
                            threshold: thresh,
                            parity,
                            error: 1.0 / (1.0 + alpha.exp()),
                        },
                    },
                });
            }
            stages.push(Stage {
                strong: StrongClassifier { rounds, threshold },
                hit_rate,
                false_alarm,
            });
        }
        for (n, l) in lines {
            if !l.is_empty() {
                return Err(Error::parse(n, "trailing content after last stage"));
            }
        }
        Ok(Cascade {
            window_w,
            window_h,
            feature_set,
            stages,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Cascade> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Cascade::deserialize(&text)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }
}

/// Seventeen significant digits: enough for an exact `f64` round trip.
fn real(v: f64) -> String {
    format!("{v:.16e}")
}

struct Tokens<'a> {
    line: usize,
    it: std::str::SplitAsciiWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        Tokens {
            line,
            it: text.split_ascii_whitespace(),
        }
    }

    fn keyword(&mut self, k: &str) -> Result<()> {
        match self.it.next() {
            Some(t) if t == k => Ok(()),
            Some(t) => Err(Error::parse(self.line, format!("expected {k:?}, found {t:?}"))),
            None => Err(Error::parse(self.line, format!("expected {k:?}"))),
        }
    }

    fn value_with<T>(&mut self, parse: impl FnOnce(&str) -> Result<T>) -> Result<T> {
        let t = self
            .it
            .next()
            .ok_or_else(|| Error::parse(self.line, "missing value"))?;
        parse(t).map_err(|e| Error::parse(self.line, format!("bad value {t:?}: {e}")))
    }

    fn value<T: std::str::FromStr>(&mut self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value_with(|s| s.parse::<T>().map_err(|e| Error::InvalidInput(e.to_string())))
    }

    fn field<T: std::str::FromStr>(&mut self, k: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.keyword(k)?;
        self.value()
    }

    fn end(&mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(t) => Err(Error::parse(self.line, format!("unexpected token {t:?}"))),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::haar::FeatureKind;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_cascade(rng: &mut impl Rng, ww: u32, wh: u32, set: FeatureSet, nstages: usize) -> Cascade {
        let feats = enumerate_features(ww, wh, set);
        let stages = (0..nstages)
            .map(|_| {
                let rounds: Vec<WeightedWeak> = (0..rng.random_range(1..6))
                    .map(|_| {
                        let alpha = rng.random_range(0.05..3.0);
                        WeightedWeak {
                            alpha,
                            weak: WeakClassifier {
                                feature: feats[rng.random_range(0..feats.len())],
                                stump: Stump {
                                    threshold: rng.random_range(-3.0..3.0),
                                    parity: if rng.random() { Parity::Pos } else { Parity::Neg },
                                    error: 1.0 / (1.0 + f64::exp(alpha)),
                                },
                            },
                        }
                    })
                    .collect();
                let total: f64 = rounds.iter().map(|r| r.alpha).sum();
                Stage {
                    strong: StrongClassifier {
                        threshold: rng.random_range(0.0..total),
                        rounds,
                    },
                    hit_rate: rng.random(),
                    false_alarm: rng.random(),
                }
            })
            .collect();
        Cascade {
            window_w: ww,
            window_h: wh,
            feature_set: set,
            stages,
        }
    }

    #[test]
    fn adapt_threshold_cases() {
        let big = |t: f64| StrongClassifier {
            rounds: vec![WeightedWeak {
                alpha: 2.0 * t,
                weak: WeakClassifier {
                    feature: HaarFeature::new(FeatureKind::EdgeH, 0, 0, 1, 1),
                    stump: Stump {
                        threshold: 0.0,
                        parity: Parity::Pos,
                        error: 0.1,
                    },
                },
            }],
            threshold: t,
        };
        assert_eq!(adapt_threshold(&big(100.0), &[1.0, 2.0, 3.0, 4.0], 1.0), 1.0);
        assert_eq!(adapt_threshold(&big(100.0), &[1.0, 2.0, 3.0, 4.0], 0.75), 2.0);
        assert_eq!(adapt_threshold(&big(1.5), &[1.0, 2.0, 3.0, 4.0], 0.5), 1.5);
    }

    proptest! {
        #[test]
        fn adapted_threshold_meets_hit_rate(scores in proptest::collection::vec(-10.0f64..10.0, 1..80), mhr in 0.01f64..1.0) {
            let sc = StrongClassifier {
                rounds: vec![WeightedWeak {
                    alpha: 100.0,
                    weak: WeakClassifier {
                        feature: HaarFeature::new(FeatureKind::EdgeH, 0, 0, 1, 1),
                        stump: Stump { threshold: 0.0, parity: Parity::Pos, error: 0.1 },
                    },
                }],
                threshold: 50.0,
            };
            let t = adapt_threshold(&sc, &scores, mhr);
            prop_assert!(rate(&scores, t) >= mhr);
            prop_assert!(t <= 0.5 * sc.alpha_sum());
        }
    }

    #[test]
    fn compound_bound_values() {
        let (hr, fa) = compound_bounds(0.995, 0.5, 15);
        assert!((hr - 0.995f64.powi(15)).abs() < 1e-15);
        assert!(((hr - 0.9276) / 0.9276).abs() < 1e-4);
        assert!(((fa - 3.0517578125e-5) / 3.05e-5).abs() < 1e-4);
    }

    #[test]
    fn params_validation() {
        assert!(TrainParams::default().validate().is_ok());
        let bad = TrainParams {
            maxfalsealarm: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainParams {
            minhitrate: 0.4,
            maxfalsealarm: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_stage_accepts_and_impossible_stage_rejects() {
        let img = GrayImage::filled(20, 20, 9);
        let t = IntegralTables::new(&img, false);
        let mut c = Cascade {
            window_w: 8,
            window_h: 8,
            feature_set: FeatureSet::Basic,
            stages: vec![],
        };
        assert_eq!(classify_window(&c, &t, (3, 3), WindowScale::unit(8, 8)).unwrap(), (true, None));
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut r = random_cascade(&mut rng, 8, 8, FeatureSet::Basic, 1);
        r.stages[0].strong.threshold = r.stages[0].strong.alpha_sum() + 1.0;
        c.stages = r.stages;
        assert_eq!(classify_window(&c, &t, (3, 3), WindowScale::unit(8, 8)).unwrap(), (false, Some(0)));
        assert!(classify_window(&c, &t, (13, 3), WindowScale::unit(8, 8)).is_err());
    }

    #[test]
    fn early_exit_matches_full_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(1..5);
            let c = random_cascade(&mut rng, 10, 9, FeatureSet::All, n);
            let img = GrayImage::from_fn(30, 30, |_, _| rng.random());
            let t = IntegralTables::new(&img, true);
            let scale = WindowScale::from_factor(10, 9, rng.random_range(1.0..2.5));
            let sc = ScaledCascade::new(&c, scale).unwrap();
            let (ox, oy) = (rng.random_range(0..=30 - scale.w), rng.random_range(0..=30 - scale.h));
            let full = sc.stage_scores(&t, ox, oy);
            let naive = full.iter().position(|&(_, ok)| !ok);
            assert_eq!(sc.classify(&t, ox, oy), naive);
            // Stage scores agree with eval_strong.
            let inv = t.window_inv_stddev(&Rect::new(ox, oy, scale.w, scale.h)).unwrap();
            for (st, &(s, _)) in c.stages.iter().zip(&full) {
                let (e, _) = crate::boost::eval_strong(&st.strong, &t, (ox, oy), scale, inv).unwrap();
                assert_eq!(e, s);
            }
        }
    }

    #[test]
    fn mirror_worked_example() {
        let f = HaarFeature::new(FeatureKind::EdgeV, 10, 0, 2, 9);
        assert_eq!(f.mirrored(13).0, HaarFeature::new(FeatureKind::EdgeV, 1, 0, 2, 9));
        let f = HaarFeature::new(FeatureKind::EdgeV, 5, 2, 3, 2);
        assert_eq!(f.mirrored(13).0, f);
    }

    #[test]
    fn mirror_is_an_exact_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..50 {
            let c = random_cascade(&mut rng, 13, 13, FeatureSet::All, 3);
            assert_eq!(c.mirrored().mirrored(), c);
            assert_eq!(c.mirrored().mirrored().serialize(), c.serialize());
        }
    }

    #[test]
    fn mirrored_cascade_on_mirrored_window_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for (ww, wh) in [(13u32, 13u32), (12, 10)] {
            for _ in 0..100 {
                let c = random_cascade(&mut rng, ww, wh, FeatureSet::All, 4);
                let m = c.mirrored();
                let mut factor = rng.random_range(1.0..2.5);
                let mut scale = WindowScale::from_factor(ww, wh, factor);
                while scale.w % 2 != ww % 2 {
                    factor += 0.01;
                    scale = WindowScale::from_factor(ww, wh, factor);
                }
                let img = GrayImage::from_fn(scale.w, scale.h, |_, _| rng.random());
                let t = IntegralTables::new(&img, true);
                let mt = IntegralTables::new(&img.mirrored(), true);
                let a = ScaledCascade::new(&c, scale).unwrap().stage_scores(&t, 0, 0);
                let b = ScaledCascade::new(&m, scale).unwrap().stage_scores(&mt, 0, 0);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn serialization_round_trips() {
        let empty = Cascade {
            window_w: 13,
            window_h: 13,
            feature_set: FeatureSet::Basic,
            stages: vec![],
        };
        let text = empty.serialize();
        assert_eq!(text, "FIDCASCADE 1\nwindow 13 13\nfeatures BASIC\nstages 0\n");
        assert_eq!(Cascade::deserialize(&text).unwrap(), empty);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..50 {
            let mut c = random_cascade(&mut rng, 13, 11, FeatureSet::All, 3);
            c.stages[0].strong.threshold = f64::NEG_INFINITY;
            let text = c.serialize();
            let back = Cascade::deserialize(&text).unwrap();
            assert_eq!(back.serialize(), text);
            assert_eq!(Cascade::deserialize(&back.serialize()).unwrap(), back);
            assert_eq!(back, c);
        }
    }

    #[test]
    fn deserialization_errors() {
        let head = "FIDCASCADE 1\nwindow 13 13\nfeatures BASIC\nstages 1\nstage 0 threshold 1.0e0 nweak 1 hr 1.0e0 fa 5.0e-1\n";
        let oob = format!("{head}weak alpha 1.0e0 parity +1 thresh 0.0e0 kind EDGE_V x 12 y 0 w 2 h 3\n");
        assert!(matches!(Cascade::deserialize(&oob), Err(Error::Bounds(_))));
        let ok = format!("{head}weak alpha 1.0e0 parity +1 thresh 0.0e0 kind EDGE_V x 11 y 0 w 2 h 3\n");
        assert!(Cascade::deserialize(&ok).is_ok());
        assert!(matches!(
            Cascade::deserialize("FIDCASCADE 2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        let bad_parity = ok.replace("parity +1", "parity 1");
        assert!(matches!(Cascade::deserialize(&bad_parity), Err(Error::Parse { line: 6, .. })));
        let bad_kind = ok.replace("EDGE_V", "EDGE_V_45");
        assert!(matches!(Cascade::deserialize(&bad_kind), Err(Error::Parse { line: 6, .. })));
        let truncated = head.to_string();
        assert!(Cascade::deserialize(&truncated).is_err());
    }

    fn blob_patches(rng: &mut impl Rng, n: usize, pos: bool) -> Vec<GrayImage> {
        (0..n)
            .map(|_| {
                GrayImage::from_fn(8, 8, |x, y| {
                    let inside = (2..6).contains(&x) && (2..6).contains(&y);
                    if pos && inside {
                        rng.random_range(180..=255)
                    } else {
                        rng.random_range(0..120)
                    }
                })
            })
            .collect()
    }

    #[test]
    fn separable_stage_needs_one_weak() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let pos = blob_patches(&mut rng, 30, true);
        let neg = blob_patches(&mut rng, 30, false);
        let params = TrainParams::default();
        let st = train_stage(&pos, &neg, &enumerate_features(8, 8, FeatureSet::Basic), &params).unwrap();
        assert_eq!(st.strong.rounds.len(), 1);
        assert!(st.hit_rate >= params.minhitrate && st.false_alarm <= params.maxfalsealarm);
    }

    #[test]
    fn unlearnable_stage_gets_stuck() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let pats: Vec<GrayImage> = (0..60).map(|_| GrayImage::from_fn(6, 6, |_, _| rng.random())).collect();
        let params = TrainParams {
            max_weak_per_stage: 2,
            minhitrate: 0.999,
            maxfalsealarm: 0.01,
            ..Default::default()
        };
        let r = train_stage(&pats[..30], &pats[30..], &enumerate_features(6, 6, FeatureSet::Basic), &params);
        assert!(matches!(r, Err(Error::StageStuck { nweak: 2, .. })), "{r:?}");
    }

    #[test]
    fn cascade_training_bootstraps() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let pos = blob_patches(&mut rng, 60, true);
        let mut neg: Vec<GrayImage> = blob_patches(&mut rng, 200, false);
        neg.extend((0..200).map(|_| GrayImage::from_fn(8, 8, |_, _| rng.random())));
        let params = TrainParams {
            nstages: 4,
            nneg: 100,
            ..Default::default()
        };
        let mut src = ArchiveSource::new(neg.clone());
        let mut events = Vec::new();
        let c = train_cascade(&pos, &mut src, 8, 8, &params, &mut |e| events.push(e.clone())).unwrap();
        assert!(!c.stages.is_empty());
        for st in &c.stages {
            assert!(st.hit_rate >= params.minhitrate);
            assert!(st.false_alarm <= params.maxfalsealarm);
            assert!(st.strong.threshold <= 0.5 * st.strong.alpha_sum());
        }
        let sc = ScaledCascade::new(&c, WindowScale::unit(8, 8)).unwrap();
        let fa = neg
            .iter()
            .filter(|p| sc.classify(&IntegralTables::new(p, false), 0, 0).is_none())
            .count() as f64
            / neg.len() as f64;
        assert!(fa <= params.maxfalsealarm.powi(c.stages.len() as i32) + 1e-12);
        // A one-stage cascade decides exactly as its stage.
        let one = Cascade {
            stages: c.stages[..1].to_vec(),
            ..c.clone()
        };
        let sc1 = ScaledCascade::new(&one, WindowScale::unit(8, 8)).unwrap();
        for p in pos.iter().chain(&neg) {
            let t = IntegralTables::new(p, false);
            let (s, _) = crate::boost::eval_strong(&one.stages[0].strong, &t, (0, 0), WindowScale::unit(8, 8), t.inv_stddev(0, 0, 8, 8)).unwrap();
            assert_eq!(sc1.classify(&t, 0, 0).is_none(), s >= one.stages[0].strong.threshold);
        }
    }

    #[test]
    fn background_miner_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let bg: Vec<GrayImage> = (0..3).map(|_| GrayImage::from_fn(40, 30, |_, _| rng.random())).collect();
        let draw = |seed| {
            let mut m = BackgroundMiner::new(bg.clone(), 13, 13, seed, 5);
            std::iter::from_fn(|| m.next_patch()).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
        assert_eq!(draw(1).len(), 5);
        assert!(draw(1).iter().all(|p| (p.width(), p.height()) == (13, 13)));
    }
}
