//! Discrete AdaBoost over single-feature threshold stumps.
//!
//! Each round normalises the sample weights, searches every feature for its
//! minimum-error stump, keeps the best one, and multiplies the weights of
//! correctly classified samples by `beta = eps / (1 - eps)`.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::haar::{HaarFeature, ScaledFeature, WindowScale};
use crate::raster::{GrayImage, IntegralTables};

pub const EPS_MIN: f64 = 1e-10;
pub const EPS_MAX: f64 = 0.5 - 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parity {
    /// Positive when `value < threshold`.
    Pos,
    /// Positive when `value > threshold`.
    Neg,
}

impl Parity {
    pub fn sign(self) -> i32 {
        match self {
            Parity::Pos => 1,
            Parity::Neg => -1,
        }
    }

    pub fn flipped(self) -> Parity {
        match self {
            Parity::Pos => Parity::Neg,
            Parity::Neg => Parity::Pos,
        }
    }
}

/// A threshold test on one feature value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stump {
    pub threshold: f64,
    pub parity: Parity,
    /// Weighted training error.
    pub error: f64,
}

impl Stump {
    /// `parity * value < parity * threshold`.
    #[inline]
    pub fn classify(&self, value: f64) -> bool {
        match self.parity {
            Parity::Pos => value < self.threshold,
            Parity::Neg => value > self.threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakClassifier {
    pub feature: HaarFeature,
    pub stump: Stump,
}

impl WeakClassifier {
    #[inline]
    pub fn classify(&self, value: f64) -> bool {
        self.stump.classify(value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedWeak {
    pub alpha: f64,
    pub weak: WeakClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongClassifier {
    pub rounds: Vec<WeightedWeak>,
    pub threshold: f64,
}

impl StrongClassifier {
    pub fn alpha_sum(&self) -> f64 {
        self.rounds.iter().map(|r| r.alpha).sum()
    }

    /// `sum(alpha_t * h_t)` given the feature value of each round.
    pub fn score_from_values(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        let mut score = 0.0;
        for (r, v) in self.rounds.iter().zip(values) {
            if r.weak.classify(v) {
                score += r.alpha;
            }
        }
        score
    }
}

/// `beta_t` and `alpha_t = ln(1 / beta_t)` for a round error, with the error
/// clamped to `[EPS_MIN, EPS_MAX]`.
pub fn beta_alpha(eps: f64) -> (f64, f64) {
    let e = eps.clamp(EPS_MIN, EPS_MAX);
    let beta = e / (1.0 - e);
    (beta, (1.0 / beta).ln())
}

/// Initial weights: `1/(2m)` for each of the `m` negatives and `1/(2l)` for
/// each of the `l` positives.
pub fn init_weights(labels: &[bool]) -> Result<Vec<f64>> {
    let l = labels.iter().filter(|&&p| p).count();
    let m = labels.len() - l;
    if l == 0 || m == 0 {
        return Err(Error::DegenerateSamples {
            positives: l,
            negatives: m,
        });
    }
    let wp = 1.0 / (2.0 * l as f64);
    let wn = 1.0 / (2.0 * m as f64);
    Ok(labels.iter().map(|&p| if p { wp } else { wn }).collect())
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    if m <= a {
        b
    } else {
        m
    }
}

/// Minimum-error stump over samples visited in ascending value order.
/// Candidates run from `-inf` through the midpoints of consecutive distinct
/// values to `+inf`; ties keep the smaller threshold, then `Parity::Pos`.
#[inline]
fn scan_sorted(
    mut items: impl Iterator<Item = (f64, bool, f64)>,
    total_pos: f64,
    total_neg: f64,
) -> Stump {
    let mut best = Stump {
        threshold: f64::NEG_INFINITY,
        parity: Parity::Pos,
        error: total_pos,
    };
    if total_neg < best.error {
        best.parity = Parity::Neg;
        best.error = total_neg;
    }
    let mut pos_below = 0.0;
    let mut neg_below = 0.0;
    let Some(mut cur) = items.next() else {
        return best;
    };
    loop {
        if cur.1 {
            pos_below += cur.2;
        } else {
            neg_below += cur.2;
        }
        let next = items.next();
        let threshold = match next {
            Some(n) if n.0 == cur.0 => {
                cur = n;
                continue;
            }
            Some(n) => midpoint(cur.0, n.0),
            None => f64::INFINITY,
        };
        let err_pos = neg_below + (total_pos - pos_below);
        let err_neg = pos_below + (total_neg - neg_below);
        if err_pos < best.error {
            best = Stump {
                threshold,
                parity: Parity::Pos,
                error: err_pos,
            };
        }
        if err_neg < best.error {
            best = Stump {
                threshold,
                parity: Parity::Neg,
                error: err_neg,
            };
        }
        match next {
            Some(n) => cur = n,
            None => return best,
        }
    }
}

/// Weighted minimum-error stump for one feature's values.
pub fn train_weak(values: &[f64], labels: &[bool], weights: &[f64]) -> Stump {
    assert_eq!(values.len(), labels.len());
    assert_eq!(values.len(), weights.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let (mut tp, mut tn) = (0.0, 0.0);
    for i in 0..values.len() {
        if labels[i] {
            tp += weights[i];
        } else {
            tn += weights[i];
        }
    }
    scan_sorted(
        order.iter().map(|&i| (values[i], labels[i], weights[i])),
        tp,
        tn,
    )
}

/// Window-sized training patches with every feature value precomputed and
/// pre-sorted. Values are weight-independent, so one table serves every
/// boosting round of a stage.
pub struct TrainingData {
    features: Vec<HaarFeature>,
    labels: Vec<bool>,
    inv_sigma: Vec<f64>,
    /// Feature-major unit-scale integer responses.
    raw: Vec<i32>,
    /// Feature-major sample indices in ascending value order.
    order: Vec<u32>,
}

impl fmt::Debug for TrainingData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainingData")
            .field("features", &self.features.len())
            .field("samples", &self.labels.len())
            .finish()
    }
}

impl TrainingData {
    pub fn new(features: Vec<HaarFeature>, positives: &[GrayImage], negatives: &[GrayImage]) -> Result<Self> {
        let labels: Vec<bool> = positives
            .iter()
            .map(|_| true)
            .chain(negatives.iter().map(|_| false))
            .collect();
        let patches: Vec<&GrayImage> = positives.iter().chain(negatives).collect();
        Self::from_patches(features, &patches, labels)
    }

    pub fn from_patches(features: Vec<HaarFeature>, patches: &[&GrayImage], labels: Vec<bool>) -> Result<Self> {
        assert_eq!(patches.len(), labels.len());
        let n = patches.len();
        let Some(first) = patches.first() else {
            return Ok(TrainingData {
                features,
                labels,
                inv_sigma: Vec::new(),
                raw: Vec::new(),
                order: Vec::new(),
            });
        };
        let (ww, wh) = (first.width(), first.height());
        if let Some(p) = patches.iter().find(|p| (p.width(), p.height()) != (ww, wh)) {
            return Err(Error::InvalidInput(format!(
                "training patches differ in size: {ww}x{wh} and {}x{}",
                p.width(),
                p.height()
            )));
        }
        if let Some(f) = features.iter().find(|f| !f.fits(ww, wh)) {
            return Err(Error::Bounds(format!("feature {f} does not fit the {ww}x{wh} window")));
        }
        let rotated = features.iter().any(|f| f.kind.is_rotated());
        let tables: Vec<IntegralTables> = patches
            .par_iter()
            .map(|p| IntegralTables::new(p, rotated))
            .collect();
        let inv_sigma: Vec<f64> = tables
            .iter()
            .map(|t| t.inv_stddev(0, 0, ww, wh))
            .collect();
        let mut raw = vec![0i32; features.len() * n];
        let mut order = vec![0u32; features.len() * n];
        raw.par_chunks_mut(n.max(1))
            .zip(order.par_chunks_mut(n.max(1)))
            .zip(features.par_iter())
            .for_each(|((raw_col, order_col), f)| {
                for (r, t) in raw_col.iter_mut().zip(&tables) {
                    *r = f.unit_sum(t, 0, 0) as i32;
                }
                let value = |i: usize| raw_col[i] as f64 * inv_sigma[i];
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_unstable_by(|&a, &b| {
                    value(a as usize)
                        .total_cmp(&value(b as usize))
                        .then(a.cmp(&b))
                });
                order_col.copy_from_slice(&idx);
            });
        Ok(TrainingData {
            features,
            labels,
            inv_sigma,
            raw,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[HaarFeature] {
        &self.features
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Variance-normalised value of feature `k` on sample `i`; identical to
    /// what detection computes for the same window at unit scale.
    #[inline]
    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.raw[k * self.labels.len() + i] as f64 * self.inv_sigma[i]
    }

    fn best_stump(&self, k: usize, weights: &[f64], total_pos: f64, total_neg: f64) -> Stump {
        let n = self.labels.len();
        let order = &self.order[k * n..(k + 1) * n];
        scan_sorted(
            order.iter().map(|&i| {
                let i = i as usize;
                (self.value(k, i), self.labels[i], weights[i])
            }),
            total_pos,
            total_neg,
        )
    }
}

/// Outcome of one boosting round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundInfo {
    pub round: usize,
    pub feature_index: usize,
    pub error: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl fmt::Display for RoundInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round {} feature {} eps {:.6} alpha {:.6}",
            self.round, self.feature_index, self.error, self.alpha
        )
    }
}

/// Incremental AdaBoost state: one call to [`Booster::round`] adds one weak
/// classifier.
pub struct Booster<'a> {
    data: &'a TrainingData,
    weights: Vec<f64>,
    rounds: Vec<WeightedWeak>,
    scores: Vec<f64>,
}

impl<'a> Booster<'a> {
    pub fn new(data: &'a TrainingData) -> Result<Self> {
        let weights = init_weights(&data.labels)?;
        if data.features.is_empty() {
            return Err(Error::InvalidInput("no features to boost over".into()));
        }
        Ok(Booster {
            data,
            weights,
            rounds: Vec::new(),
            scores: vec![0.0; data.len()],
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Per-sample `sum(alpha_t * h_t)` over the rounds so far.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn rounds(&self) -> &[WeightedWeak] {
        &self.rounds
    }

    pub fn normalize(&mut self) {
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
    }

    pub fn round(&mut self) -> RoundInfo {
        self.normalize();
        let data = self.data;
        let (mut tp, mut tn) = (0.0, 0.0);
        for (w, &p) in self.weights.iter().zip(&data.labels) {
            if p {
                tp += w;
            } else {
                tn += w;
            }
        }
        let weights = &self.weights;
        let (k, stump) = (0..data.features.len())
            .into_par_iter()
            .map(|k| (k, data.best_stump(k, weights, tp, tn)))
            .reduce_with(|a, b| {
                if (b.1.error, b.0) < (a.1.error, a.0) {
                    b
                } else {
                    a
                }
            })
            .expect("at least one feature");
        let (beta, alpha) = beta_alpha(stump.error);
        let weak = WeakClassifier {
            feature: data.features[k],
            stump,
        };
        for i in 0..data.len() {
            let h = stump.classify(data.value(k, i));
            if h == data.labels[i] {
                self.weights[i] *= beta;
            }
            if h {
                self.scores[i] += alpha;
            }
        }
        self.rounds.push(WeightedWeak { alpha, weak });
        RoundInfo {
            round: self.rounds.len(),
            feature_index: k,
            error: stump.error,
            beta,
            alpha,
        }
    }

    /// The classifier so far with the default threshold `sum(alpha) / 2`.
    pub fn strong(&self) -> StrongClassifier {
        let sc = StrongClassifier {
            rounds: self.rounds.clone(),
            threshold: 0.0,
        };
        StrongClassifier {
            threshold: 0.5 * sc.alpha_sum(),
            ..sc
        }
    }
}

/// `rounds` boosting rounds; `sink` receives each round's summary.
pub fn adaboost(
    data: &TrainingData,
    rounds: usize,
    sink: &mut dyn FnMut(&RoundInfo),
) -> Result<StrongClassifier> {
    if rounds == 0 {
        return Err(Error::InvalidInput("at least one boosting round is required".into()));
    }
    let mut b = Booster::new(data)?;
    for _ in 0..rounds {
        let info = b.round();
        sink(&info);
    }
    Ok(b.strong())
}

/// Score and decision of a strong classifier on the window at `origin`,
/// scaled from its training window to `scale`.
pub fn eval_strong(
    sc: &StrongClassifier,
    tables: &IntegralTables,
    origin: (u32, u32),
    scale: WindowScale,
    inv_sigma: f64,
) -> Result<(f64, bool)> {
    let mut values = Vec::with_capacity(sc.rounds.len());
    for r in &sc.rounds {
        let sf = ScaledFeature::new(&r.weak.feature, scale)?;
        if !crate::raster::Rect::new(origin.0, origin.1, scale.w, scale.h)
            .fits_within(tables.width(), tables.height())
        {
            return Err(Error::Bounds(format!(
                "window at ({}, {}) outside the image",
                origin.0, origin.1
            )));
        }
        values.push(sf.response(tables, origin.0, origin.1) * inv_sigma);
    }
    let score = sc.score_from_values(values);
    Ok((score, score >= sc.threshold))
}
