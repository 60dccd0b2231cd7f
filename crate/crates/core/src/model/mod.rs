//! Crosstalk filtering classifier, delta-delay regressor and quiet-delay
//! regressor, trained on oracle-labeled samples.
//!
//! Models take z-scored feature vectors. [`TwoStepModel`] carries the
//! statistics and does the scaling itself.

mod tree;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use tree::{Boosted, Forest, Matrix, Tree};
use tree::{BoostParams, ForestParams, GrowParams};

use crate::error::ModelError;
use crate::features::{
    write_samples, Dataset, FeatureVector, LabelClass, NormStats, Sample, Split, FEATURE_COUNT,
    NOSI_FEATURES,
};
use crate::layout::SegmentId;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "xtalk-model";

/// Golden values at or below this are left out of the accuracy ratio (ps).
pub const RATIO_FLOOR: f64 = 1.0;

/// Fewest training samples a regressor accepts.
pub const MIN_REGRESSION_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `round(√d)` when absent.
    pub mtry: Option<usize>,
    pub min_samples_leaf: usize,
    /// Vote fraction at or above which a sample is TSI.
    pub threshold: f64,
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            mtry: None,
            min_samples_leaf: 1,
            threshold: 0.5,
            max_bins: 256,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
    /// Kept for reproducibility records; boosting itself draws nothing at
    /// random.
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            n_trees: 300,
            learning_rate: 0.1,
            max_leaves: 31,
            min_samples_leaf: 20,
            max_bins: 256,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub classifier: ClassifierConfig,
    pub regressor: RegressorConfig,
    pub nosi: RegressorConfig,
    /// Pick step-1 depth × tree count and step-2 learning rate × leaves
    /// from a 3 × 3 grid on a validation slice of the training split.
    pub grid: bool,
    /// Also fit the single-regressor baseline.
    pub onestep: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            regressor: RegressorConfig::default(),
            nosi: RegressorConfig::default(),
            grid: false,
            onestep: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub forest: Forest,
    pub threshold: f64,
    pub config: ClassifierConfig,
}

impl ClassifierModel {
    /// Share of trees voting TSI.
    pub fn vote(&self, z: &[f64; FEATURE_COUNT]) -> f64 {
        self.forest.vote(z)
    }

    pub fn is_tsi(&self, z: &[f64; FEATURE_COUNT]) -> bool {
        self.vote(z) >= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub ensemble: Boosted,
    /// Columns of the full feature vector the ensemble reads.
    pub features: Vec<usize>,
    pub config: RegressorConfig,
}

impl RegressorModel {
    pub fn predict(&self, z: &[f64; FEATURE_COUNT]) -> f64 {
        if self.features.len() == FEATURE_COUNT {
            return self.ensemble.predict(z);
        }
        let x: Vec<f64> = self.features.iter().map(|&j| z[j]).collect();
        self.ensemble.predict(&x)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// TSI-positive classification scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
}

impl ClassMetrics {
    /// Precision and recall with no positive predictions (or no positives)
    /// are reported as 1.
    pub fn from_confusion(c: Confusion) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            confusion: c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    /// Mean prediction/golden over samples whose golden value exceeds
    /// [`RATIO_FLOOR`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassMetrics>,
}

/// `1 − SS_res / SS_tot`. A constant target scores 1 when matched exactly
/// and 0 otherwise.
pub fn r_squared(pred: &[f64], golden: &[f64]) -> f64 {
    assert_eq!(pred.len(), golden.len());
    let n = golden.len() as f64;
    let mean = golden.iter().sum::<f64>() / n;
    let ss_tot: f64 = golden.iter().map(|g| (g - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(golden).map(|(p, g)| (g - p).powi(2)).sum();
    if ss_tot == 0.0 {
        log::warn!("target is constant; R² reported by convention");
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Mean of `pred / golden` over pairs with `golden > RATIO_FLOOR`.
pub fn accuracy_ratio(pred: &[f64], golden: &[f64]) -> Option<f64> {
    let r: Vec<f64> = pred
        .iter()
        .zip(golden)
        .filter(|(_, g)| **g > RATIO_FLOOR)
        .map(|(p, g)| p / g)
        .collect();
    (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
}

/// Regression metrics for paired predictions.
pub fn regression_metrics(pred: &[f64], golden: &[f64]) -> Result<EvalMetrics, ModelError> {
    if golden.is_empty() {
        return Err(ModelError::EmptyEval);
    }
    Ok(EvalMetrics {
        samples: golden.len(),
        r2: Some(r_squared(pred, golden)),
        accuracy_ratio: accuracy_ratio(pred, golden),
        classification: None,
    })
}

fn stats_of(ds: &Dataset) -> Result<NormStats, ModelError> {
    match ds.stats() {
        Some(s) => Ok(*s),
        None => Ok(ds.clone().normalize()?.stats().copied().expect("normalize sets stats")),
    }
}

fn labeled(ds: &Dataset, which: Split) -> Vec<&Sample> {
    ds.subset(which).into_iter().filter(|s| s.label.is_some()).collect()
}

fn is_tsi(s: &Sample) -> bool {
    s.class() == Some(LabelClass::Tsi)
}

fn label_of(s: &Sample) -> crate::features::Label {
    s.label.expect("only labeled samples reach training")
}

fn default_mtry(d: usize) -> usize {
    ((d as f64).sqrt().round() as usize).clamp(1, d)
}

fn fit_classifier(rows: &[[f64; FEATURE_COUNT]], y: &[f64], cfg: &ClassifierConfig) -> ClassifierModel {
    let x = Matrix::from_rows(rows, FEATURE_COUNT);
    let forest = Forest::fit(
        &x,
        y,
        ForestParams {
            n_trees: cfg.n_trees,
            grow: GrowParams {
                max_depth: cfg.max_depth,
                max_leaves: 0,
                min_leaf: cfg.min_samples_leaf.max(1) as f64,
                mtry: cfg.mtry.unwrap_or_else(|| default_mtry(FEATURE_COUNT)),
            },
            seed: cfg.seed,
            max_bins: cfg.max_bins,
        },
    );
    ClassifierModel {
        forest,
        threshold: cfg.threshold,
        config: cfg.clone(),
    }
}

fn fit_regressor(rows: &[[f64; FEATURE_COUNT]], y: &[f64], features: &[usize], cfg: &RegressorConfig) -> RegressorModel {
    let sub: Vec<Vec<f64>> = rows.iter().map(|r| features.iter().map(|&j| r[j]).collect()).collect();
    let x = Matrix::from_rows(&sub, features.len());
    let ensemble = Boosted::fit(
        &x,
        y,
        BoostParams {
            n_trees: cfg.n_trees,
            learning_rate: cfg.learning_rate,
            grow: GrowParams {
                max_depth: 0,
                max_leaves: cfg.max_leaves.max(2),
                min_leaf: cfg.min_samples_leaf.max(1) as f64,
                mtry: features.len(),
            },
            seed: cfg.seed,
            max_bins: cfg.max_bins,
        },
    );
    RegressorModel {
        ensemble,
        features: features.to_vec(),
        config: cfg.clone(),
    }
}

fn classify_metrics(model: &ClassifierModel, rows: &[[f64; FEATURE_COUNT]], y: &[f64]) -> Result<EvalMetrics, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::EmptyEval);
    }
    let mut c = Confusion::default();
    for (r, &t) in rows.iter().zip(y) {
        c.add(model.is_tsi(r), t > 0.5);
    }
    Ok(EvalMetrics {
        samples: rows.len(),
        r2: None,
        accuracy_ratio: None,
        classification: Some(ClassMetrics::from_confusion(c)),
    })
}

/// Test rows, or the training rows with a warning when there is no test
/// split.
fn eval_rows<'a>(ds: &'a Dataset, keep: impl Fn(&Sample) -> bool) -> Vec<&'a Sample> {
    let test: Vec<&Sample> = labeled(ds, Split::Test).into_iter().filter(|s| keep(s)).collect();
    if !test.is_empty() {
        return test;
    }
    log::warn!("no held-out samples; reporting training metrics");
    labeled(ds, Split::Train).into_iter().filter(|s| keep(s)).collect()
}

fn rows_of(stats: &NormStats, s: &[&Sample]) -> Vec<[f64; FEATURE_COUNT]> {
    s.iter().map(|x| stats.apply(&x.features)).collect()
}

/// Step 1: TSI versus everything else, trained on the training split and
/// scored on the test split.
pub fn train_classifier(ds: &Dataset, cfg: &ClassifierConfig) -> Result<(ClassifierModel, EvalMetrics), ModelError> {
    let stats = stats_of(ds)?;
    let train = labeled(ds, Split::Train);
    let y: Vec<f64> = train.iter().map(|s| is_tsi(s) as u8 as f64).collect();
    let pos = y.iter().filter(|&&v| v > 0.5).count();
    if pos == 0 || pos == y.len() {
        return Err(ModelError::SingleClass);
    }
    let model = fit_classifier(&rows_of(&stats, &train), &y, cfg);
    let test = eval_rows(ds, |_| true);
    let ty: Vec<f64> = test.iter().map(|s| is_tsi(s) as u8 as f64).collect();
    let m = classify_metrics(&model, &rows_of(&stats, &test), &ty)?;
    Ok((model, m))
}

fn train_target(
    ds: &Dataset,
    cfg: &RegressorConfig,
    features: &[usize],
    keep: impl Fn(&Sample) -> bool + Copy,
    target: impl Fn(&Sample) -> f64,
) -> Result<(RegressorModel, EvalMetrics), ModelError> {
    let stats = stats_of(ds)?;
    let train: Vec<&Sample> = labeled(ds, Split::Train).into_iter().filter(|s| keep(s)).collect();
    if train.len() < MIN_REGRESSION_SAMPLES {
        return Err(ModelError::InsufficientSamples {
            needed: MIN_REGRESSION_SAMPLES,
            have: train.len(),
        });
    }
    let y: Vec<f64> = train.iter().map(|s| target(s)).collect();
    if y.iter().all(|&v| v == y[0]) {
        log::warn!("regression target is constant ({}); model predicts it everywhere", y[0]);
    }
    let model = fit_regressor(&rows_of(&stats, &train), &y, features, cfg);
    let test = eval_rows(ds, keep);
    let pred: Vec<f64> = rows_of(&stats, &test).iter().map(|r| model.predict(r)).collect();
    let gold: Vec<f64> = test.iter().map(|s| target(s)).collect();
    let m = regression_metrics(&pred, &gold)?;
    Ok((model, m))
}

const ALL: [usize; FEATURE_COUNT] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

/// Step 2: delta delay of TSI samples.
pub fn train_regressor(ds: &Dataset, cfg: &RegressorConfig) -> Result<(RegressorModel, EvalMetrics), ModelError> {
    train_target(ds, cfg, &ALL, is_tsi, |s| label_of(s).delta)
}

/// Quiet segment delay from driver, slew, length and layer features, fitted
/// on every labeled segment.
pub fn train_nosi(ds: &Dataset, cfg: &RegressorConfig) -> Result<(RegressorModel, EvalMetrics), ModelError> {
    train_target(ds, cfg, &NOSI_FEATURES, |_| true, |s| label_of(s).tau_nosi)
}

/// Single regressor for quiet delay plus delta on every sample, with no
/// filtering step.
pub fn train_onestep_baseline(ds: &Dataset, cfg: &RegressorConfig) -> Result<(RegressorModel, EvalMetrics), ModelError> {
    train_target(ds, cfg, &ALL, |_| true, total_target)
}

fn total_target(s: &Sample) -> f64 {
    let l = label_of(s);
    l.tau_nosi + l.delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// SHA-256 of the canonical training split.
    pub dataset_hash: String,
    pub split_seed: Option<u64>,
    pub train_samples: usize,
    pub config: TrainConfig,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepModel {
    pub classifier: ClassifierModel,
    pub regressor: RegressorModel,
    pub nosi_regressor: RegressorModel,
    pub stats: NormStats,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub classifier: EvalMetrics,
    pub regressor: EvalMetrics,
    pub nosi: EvalMetrics,
    /// Quiet delay plus filtered delta against the segment total.
    pub two_step: EvalMetrics,
    /// Same comparison restricted to TSI samples.
    pub two_step_tsi: EvalMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onestep: Option<EvalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onestep_tsi: Option<EvalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<(ClassifierConfig, RegressorConfig)>,
}

/// Hash of the samples in `which`, in canonical order.
pub fn dataset_hash(ds: &Dataset, which: Split) -> String {
    let rows: Vec<Sample> = ds.subset(which).into_iter().cloned().collect();
    let mut buf = Vec::new();
    write_samples(&rows, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

/// Trains all three models and scores them on the test split.
pub fn train_two_step(ds: &Dataset, cfg: &TrainConfig) -> Result<(TwoStepModel, TrainReport), ModelError> {
    let ds = if ds.stats().is_some() {
        ds.clone()
    } else {
        ds.clone().normalize()?
    };
    let mut cfg = cfg.clone();
    let chosen = if cfg.grid {
        let c = grid_search(&ds, &cfg)?;
        cfg.classifier = c.0.clone();
        cfg.regressor = c.1.clone();
        Some(c)
    } else {
        None
    };
    let (classifier, cm) = train_classifier(&ds, &cfg.classifier)?;
    let (regressor, rm) = train_regressor(&ds, &cfg.regressor)?;
    let (nosi_regressor, nm) = train_nosi(&ds, &cfg.nosi)?;
    let model = TwoStepModel {
        classifier,
        regressor,
        nosi_regressor,
        stats: *ds.stats().expect("normalized above"),
        meta: ModelMeta {
            dataset_hash: dataset_hash(&ds, Split::Train),
            split_seed: ds.split_seed(),
            train_samples: labeled(&ds, Split::Train).len(),
            config: cfg.clone(),
            feature_names: crate::features::FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        },
    };
    let test = eval_rows(&ds, |_| true);
    let tsi: Vec<&Sample> = test.iter().copied().filter(|s| is_tsi(s)).collect();
    let two_step = model.evaluate(&test)?;
    let two_step_tsi = model.evaluate(&tsi)?;
    let (onestep, onestep_tsi) = if cfg.onestep {
        let (one, om) = train_onestep_baseline(&ds, &cfg.regressor)?;
        let pred: Vec<f64> = tsi.iter().map(|s| one.predict(&model.stats.apply(&s.features))).collect();
        let gold: Vec<f64> = tsi.iter().map(|s| total_target(s)).collect();
        (Some(om), Some(regression_metrics(&pred, &gold)?))
    } else {
        (None, None)
    };
    Ok((
        model,
        TrainReport {
            classifier: cm,
            regressor: rm,
            nosi: nm,
            two_step,
            two_step_tsi,
            onestep,
            onestep_tsi,
            chosen,
        },
    ))
}

/// Holds out a fifth of the training split, scores each grid point on it
/// and returns the best step-1 and step-2 configurations.
fn grid_search(ds: &Dataset, cfg: &TrainConfig) -> Result<(ClassifierConfig, RegressorConfig), ModelError> {
    let stats = stats_of(ds)?;
    let mut train = labeled(ds, Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.classifier.seed ^ 0x9e37_79b9_7f4a_7c15);
    train.shuffle(&mut rng);
    let cut = train.len() * 4 / 5;
    let (fit, val) = train.split_at(cut);
    let xf = rows_of(&stats, fit);
    let xv = rows_of(&stats, val);
    let yf: Vec<f64> = fit.iter().map(|s| is_tsi(s) as u8 as f64).collect();
    let yv: Vec<f64> = val.iter().map(|s| is_tsi(s) as u8 as f64).collect();

    let mut best_c = (f64::NEG_INFINITY, cfg.classifier.clone());
    for depth in [8, 12, 16] {
        for n_trees in [50, 100, 200] {
            let c = ClassifierConfig {
                max_depth: depth,
                n_trees,
                ..cfg.classifier.clone()
            };
            let m = fit_classifier(&xf, &yf, &c);
            let acc = classify_metrics(&m, &xv, &yv)?.classification.expect("set").accuracy;
            log::info!("grid: depth {depth}, {n_trees} trees -> accuracy {acc:.5}");
            if acc > best_c.0 {
                best_c = (acc, c);
            }
        }
    }

    let pick = |s: &[&Sample]| -> (Vec<[f64; FEATURE_COUNT]>, Vec<f64>) {
        let t: Vec<&Sample> = s.iter().copied().filter(|s| is_tsi(s)).collect();
        (rows_of(&stats, &t), t.iter().map(|s| label_of(s).delta).collect())
    };
    let (rf, ryf) = pick(fit);
    let (rv, ryv) = pick(val);
    if rf.len() < MIN_REGRESSION_SAMPLES || rv.is_empty() {
        return Err(ModelError::InsufficientSamples {
            needed: MIN_REGRESSION_SAMPLES,
            have: rf.len(),
        });
    }
    let mut best_r = (f64::NEG_INFINITY, cfg.regressor.clone());
    for lr in [0.05, 0.1, 0.2] {
        for leaves in [15, 31, 63] {
            let c = RegressorConfig {
                learning_rate: lr,
                max_leaves: leaves,
                ..cfg.regressor.clone()
            };
            let m = fit_regressor(&rf, &ryf, &ALL, &c);
            let pred: Vec<f64> = rv.iter().map(|r| m.predict(r)).collect();
            let r2 = r_squared(&pred, &ryv);
            log::info!("grid: learning rate {lr}, {leaves} leaves -> R² {r2:.5}");
            if r2 > best_r.0 {
                best_r = (r2, c);
            }
        }
    }
    Ok((best_c.1, best_r.1))
}

/// Prediction for one aggressor of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub aggressor_segment_id: SegmentId,
    pub tsi: bool,
    pub vote: f64,
    /// Predicted delta; zero when filtered out (ps).
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub segment_id: SegmentId,
    pub tau_nosi: f64,
    pub pairs: Vec<PairPrediction>,
    /// Sum of the TSI pairs' deltas (ps).
    pub delta: f64,
}

/// Raw features of one segment: the vector its quiet delay is predicted
/// from, as produced for its dataset sample, and one vector per aggressor.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    pub segment_id: SegmentId,
    pub features: FeatureVector,
    pub pairs: Vec<(SegmentId, FeatureVector)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePrediction {
    pub d_driver: f64,
    pub segments: Vec<SegmentPrediction>,
    pub d_net: f64,
    pub d_stage: f64,
}

impl TwoStepModel {
    pub fn normalize(&self, f: &FeatureVector) -> [f64; FEATURE_COUNT] {
        self.stats.apply(f)
    }

    pub fn is_tsi(&self, f: &FeatureVector) -> bool {
        self.classifier.is_tsi(&self.normalize(f))
    }

    pub fn tau_nosi(&self, f: &FeatureVector) -> f64 {
        self.nosi_regressor.predict(&self.normalize(f))
    }

    pub fn delta(&self, f: &FeatureVector) -> f64 {
        self.regressor.predict(&self.normalize(f))
    }

    /// Quiet delay plus the delta when the classifier keeps the sample.
    pub fn segment_total(&self, f: &FeatureVector) -> f64 {
        let z = self.normalize(f);
        let mut t = self.nosi_regressor.predict(&z);
        if self.classifier.is_tsi(&z) {
            t += self.regressor.predict(&z);
        }
        t
    }

    fn predict_pair(&self, aggressor: SegmentId, f: &FeatureVector) -> PairPrediction {
        let z = self.normalize(f);
        let vote = self.classifier.vote(&z);
        let tsi = vote >= self.classifier.threshold;
        PairPrediction {
            aggressor_segment_id: aggressor,
            tsi,
            vote,
            delta: if tsi { self.regressor.predict(&z) } else { 0.0 },
        }
    }

    /// Segment totals against golden quiet delay plus delta, with TSI
    /// classification scores when both classes can occur.
    pub fn evaluate(&self, samples: &[&Sample]) -> Result<EvalMetrics, ModelError> {
        let s: Vec<&Sample> = samples.iter().copied().filter(|s| s.label.is_some()).collect();
        if s.is_empty() {
            return Err(ModelError::EmptyEval);
        }
        let mut c = Confusion::default();
        let mut pred = Vec::with_capacity(s.len());
        let mut gold = Vec::with_capacity(s.len());
        for x in &s {
            let z = self.normalize(&x.features);
            let tsi = self.classifier.is_tsi(&z);
            c.add(tsi, is_tsi(x));
            let mut t = self.nosi_regressor.predict(&z);
            if tsi {
                t += self.regressor.predict(&z);
            }
            pred.push(t);
            gold.push(total_target(x));
        }
        let mut m = regression_metrics(&pred, &gold)?;
        m.classification = Some(ClassMetrics::from_confusion(c));
        Ok(m)
    }
}

/// Net delay as quiet segment delays plus the deltas of classifier-kept
/// pairs; filtered pairs add nothing.
pub fn predict_stage(d_driver: f64, segments: &[SegmentInput], model: &TwoStepModel) -> StagePrediction {
    let mut d_net = 0.0;
    let segments: Vec<SegmentPrediction> = segments
        .iter()
        .map(|s| {
            let tau_nosi = model.tau_nosi(&s.features);
            let pairs: Vec<PairPrediction> = s.pairs.iter().map(|(a, f)| model.predict_pair(*a, f)).collect();
            let delta = pairs.iter().filter(|p| p.tsi).map(|p| p.delta).sum::<f64>();
            d_net += tau_nosi;
            d_net += delta;
            SegmentPrediction {
                segment_id: s.segment_id,
                tau_nosi,
                pairs,
                delta,
            }
        })
        .collect();
    StagePrediction {
        d_driver,
        segments,
        d_net,
        d_stage: d_driver + d_net,
    }
}

/// Header line, then the JSON payload whose SHA-256 the header carries.
pub fn model_to_bytes(model: &TwoStepModel) -> Vec<u8> {
    let payload = serde_json::to_vec(model).expect("model serializes");
    let mut out = format!("{MAGIC} v{FORMAT_VERSION} sha256={}\n", hex::encode(Sha256::digest(&payload))).into_bytes();
    out.extend_from_slice(&payload);
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TwoStepModel, ModelError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Malformed("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| ModelError::Malformed("header is not text".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(ModelError::Malformed(format!("not a model file (header `{header}`)")));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| ModelError::Malformed(format!("bad version in header `{header}`")))?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let sum = parts
        .next()
        .and_then(|s| s.strip_prefix("sha256="))
        .ok_or_else(|| ModelError::Malformed(format!("missing checksum in header `{header}`")))?;
    let payload = &bytes[nl + 1..];
    if hex::encode(Sha256::digest(payload)) != sum {
        return Err(ModelError::Checksum);
    }
    let model: TwoStepModel = serde_json::from_slice(payload).map_err(|e| ModelError::Malformed(e.to_string()))?;
    model.check()?;
    Ok(model)
}

impl TwoStepModel {
    fn check(&self) -> Result<(), ModelError> {
        let bad = |e: String| ModelError::Malformed(e);
        if self.classifier.forest.width != FEATURE_COUNT {
            return Err(ModelError::Dimension {
                expected: FEATURE_COUNT,
                found: self.classifier.forest.width,
            });
        }
        for t in &self.classifier.forest.trees {
            t.check(FEATURE_COUNT).map_err(bad)?;
        }
        for r in [&self.regressor, &self.nosi_regressor] {
            if r.features.len() != r.ensemble.width || r.features.iter().any(|&j| j >= FEATURE_COUNT) {
                return Err(ModelError::Dimension {
                    expected: r.ensemble.width,
                    found: r.features.len(),
                });
            }
            for t in &r.ensemble.trees {
                t.check(r.ensemble.width).map_err(bad)?;
            }
        }
        Ok(())
    }
}

pub fn save_model(model: &TwoStepModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TwoStepModel, ModelError> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Splits, normalizes and trains in one go.
pub fn split_and_train(samples: Vec<Sample>, fraction: f64, seed: u64, cfg: &TrainConfig) -> Result<(TwoStepModel, TrainReport, Dataset), ModelError> {
    let ds = Dataset::new(samples).split(fraction, seed)?.normalize()?;
    let (m, r) = train_two_step(&ds, cfg)?;
    Ok((m, r, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Label, Trace};

    fn sample(i: usize, f: FeatureVector, label: Label) -> Sample {
        Sample {
            features: f,
            label: Some(label),
            trace: Trace {
                design: "toy".into(),
                net_id: i as u32,
                segment_id: i as u32,
                aggressor_segment_id: None,
            },
        }
    }

    fn toy(n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        (0..n)
            .map(|i| {
                let mut a = [0.0f64; FEATURE_COUNT];
                for v in a.iter_mut() {
                    *v = rng.gen_range(0.0..100.0);
                }
                // Integer skews so the class boundary is sampled on both sides.
                a[0] = a[0].floor();
                let f = FeatureVector::from_array(a);
                let tsi = f.dskew < 50.0;
                sample(
                    i,
                    f,
                    Label {
                        class: if tsi { LabelClass::Tsi } else { LabelClass::Fsi },
                        delta: if tsi { 3.0 * f.l_si } else { 0.0 },
                        tau_nosi: 2.0 * f.wire_len + 5.0,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn separable_classifier_is_exact() {
        let ds = Dataset::new(toy(600)).split(0.7, 1).unwrap().normalize().unwrap();
        let (_, m) = train_classifier(&ds, &ClassifierConfig::default()).unwrap();
        assert_eq!(m.classification.unwrap().accuracy, 1.0);
    }

    #[test]
    fn planted_linear_delta() {
        let ds = Dataset::new(toy(2000)).split(0.7, 1).unwrap().normalize().unwrap();
        let (_, m) = train_regressor(&ds, &RegressorConfig::default()).unwrap();
        assert!(m.r2.unwrap() >= 0.99, "{m:?}");
    }

    #[test]
    fn r2_conventions() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(r_squared(&[4.0, 4.0], &[4.0, 4.0]), 1.0);
        assert_eq!(accuracy_ratio(&[2.0, 5.0], &[2.0, 0.5]), Some(1.0));
    }

    #[test]
    fn too_few_regression_samples() {
        let ds = Dataset::new(toy(50)).normalize().unwrap();
        assert!(matches!(
            train_regressor(&ds, &RegressorConfig::default()),
            Err(ModelError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn checksum_and_version() {
        let (m, _, _) = split_and_train(toy(800), 0.7, 3, &TrainConfig {
            classifier: ClassifierConfig { n_trees: 5, ..Default::default() },
            regressor: RegressorConfig { n_trees: 10, ..Default::default() },
            nosi: RegressorConfig { n_trees: 10, ..Default::default() },
            ..Default::default()
        })
        .unwrap();
        let bytes = model_to_bytes(&m);
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 10]), Err(ModelError::Checksum)));
        let mut v2 = bytes.clone();
        let pos = v2.iter().position(|&b| b == b'1').unwrap();
        v2[pos] = b'2';
        assert!(matches!(model_from_bytes(&v2), Err(ModelError::Version { found: 2, .. })));
    }
}
