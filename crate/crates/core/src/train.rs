//! Adam, the epoch loop, evaluation and cross-validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, make_folds, FoldPlan, SegmentDataset};
use crate::error::{Error, Result};
use crate::models::{ModelGraph, Named, Topology};
use crate::nn::Mode;
use crate::tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Named]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Named], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!("adam: gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of every epoch.
    pub losses: Vec<f64>,
    pub segments: usize,
    pub seed: u64,
}

/// Minibatches of a shuffled index list. A trailing batch of one sample
/// joins the previous batch, since batch normalization needs two.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Trains `model` on the segments `train` of `ds`. `seed` drives the
/// per-epoch shuffles.
pub fn train(model: &mut ModelGraph, ds: &SegmentDataset, train: &[usize], cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 segments, got {}",
            train.len()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(cfg.adam, model.params());
    let mut order = train.to_vec();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, cfg.batch_size) {
            let inputs = ds.gather(batch);
            let labels = ds.labels(batch);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let (logits, updates) = model.forward(&mut tape, &vars, &inputs, Mode::Train)?;
            let loss = tape.softmax_crossentropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            adam_step(model.params_mut(), &grads, &mut adam)?;
            model.apply_bn_updates(&updates);
            total += value * batch.len() as f64;
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        losses.push(mean);
    }
    Ok(TrainReport {
        losses,
        segments: train.len(),
        seed,
    })
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode class predictions for the segments `idx`.
pub fn predict(model: &ModelGraph, ds: &SegmentDataset, idx: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = model.logits(&ds.gather(chunk))?;
        out.extend(logits.data().chunks_exact(2).map(|r| (r[1] > r[0]) as usize));
    }
    Ok(out)
}

/// Fraction of `idx` classified correctly.
pub fn evaluate(model: &ModelGraph, ds: &SegmentDataset, idx: &[usize]) -> Result<f64> {
    let pred = predict(model, ds, idx)?;
    let correct = pred.iter().zip(ds.labels(idx)).filter(|(p, l)| **p == *l).count();
    Ok(correct as f64 / idx.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    /// Seeds the fold assignment.
    pub fold_seed: u64,
    /// Seeds model initialization and shuffling; every fold derives its own.
    pub seed: u64,
    /// Run only these folds (all when absent).
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 5,
            fold_seed: 0,
            seed: 0,
            folds: None,
            jobs: 1,
        }
    }
}

/// Seed of fold `f` for purpose `tag` (0 = init, 1 = shuffle).
pub fn fold_seed(base: u64, f: usize, tag: u64) -> u64 {
    let mut x = base ^ (f as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetAccuracy {
    pub offset: i32,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub train_segments: usize,
    pub test_segments: usize,
    pub test_trials: Vec<String>,
    pub accuracy: f64,
    /// Majority vote over each test trial's segments.
    pub trial_accuracy: f64,
    pub per_offset: Vec<OffsetAccuracy>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectAccuracy {
    pub subject: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub library_version: String,
    pub model: String,
    pub topology: Topology,
    pub train: TrainConfig,
    pub cv: CvConfig,
    /// Caller-supplied description of the whole run.
    pub config: serde_json::Value,
    pub folds: Vec<FoldReport>,
    /// Mean of the fold accuracies.
    pub mean_accuracy: f64,
    /// Sample standard deviation of the fold accuracies.
    pub std_accuracy: f64,
    pub mean_trial_accuracy: f64,
    /// Test segments pooled over folds, one entry per window offset.
    pub per_offset: Vec<OffsetAccuracy>,
    pub per_subject: Vec<SubjectAccuracy>,
    /// Mean of the per-subject accuracies.
    pub subject_mean_accuracy: f64,
}

impl CvReport {
    /// Flat `(fold, offset, accuracy)` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,offset,correct,total,accuracy\n");
        for f in &self.folds {
            for o in &f.per_offset {
                s.push_str(&format!("{},{},{},{},{}\n", f.fold, o.offset, o.correct, o.total, o.accuracy));
            }
        }
        s
    }
}

fn per_offset(pairs: impl Iterator<Item = (i32, bool)>) -> Vec<OffsetAccuracy> {
    let mut table: BTreeMap<i32, (usize, usize)> = data::offsets().map(|o| (o, (0, 0))).collect();
    for (o, ok) in pairs {
        let e = table.entry(o).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    table
        .into_iter()
        .map(|(offset, (correct, total))| OffsetAccuracy {
            offset,
            correct,
            total,
            accuracy: if total == 0 { f64::NAN } else { correct as f64 / total as f64 },
        })
        .collect()
}

struct FoldOutcome {
    report: FoldReport,
    /// `(segment, correct)` for every test segment.
    hits: Vec<(usize, bool)>,
}

fn run_fold(topology: &Topology, ds: &SegmentDataset, plan: &FoldPlan, f: usize, cfg: &TrainConfig, cv: &CvConfig) -> Result<FoldOutcome> {
    let (train_idx, test_idx) = plan.split(ds, f);
    plan.assert_disjoint(ds, &train_idx, &test_idx)?;
    let init_seed = fold_seed(cv.seed, f, 0);
    let shuffle_seed = fold_seed(cv.seed, f, 1);
    let mut model = ModelGraph::new(topology.clone(), init_seed)?;
    let tr = train(&mut model, ds, &train_idx, cfg, shuffle_seed)?;
    let pred = predict(&model, ds, &test_idx)?;
    let hits: Vec<(usize, bool)> = test_idx
        .iter()
        .zip(&pred)
        .map(|(&i, &p)| (i, ds.segments[i].label == p))
        .collect();
    let correct = hits.iter().filter(|h| h.1).count();

    let mut votes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&i, &p) in test_idx.iter().zip(&pred) {
        let v = votes.entry(ds.segments[i].trial).or_default();
        v.0 += p;
        v.1 += 1;
    }
    // majority class 1 when more than half of the segments vote for it
    let trial_hits = votes
        .iter()
        .filter(|(&t, &(ones, n))| ((2 * ones > n) as usize) == ds.trials[t].label)
        .count();

    Ok(FoldOutcome {
        report: FoldReport {
            fold: f,
            init_seed,
            shuffle_seed,
            train_segments: train_idx.len(),
            test_segments: test_idx.len(),
            test_trials: votes.keys().map(|&t| ds.trials[t].id.clone()).collect(),
            accuracy: correct as f64 / test_idx.len().max(1) as f64,
            trial_accuracy: trial_hits as f64 / votes.len().max(1) as f64,
            per_offset: per_offset(hits.iter().map(|&(i, ok)| (ds.segments[i].offset, ok))),
            losses: tr.losses,
        },
        hits,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// k-fold cross-validation with trial-disjoint folds. Each fold trains a
/// fresh model; folds may run on `cv.jobs` threads and are merged by fold
/// index, so the report does not depend on the thread count.
pub fn cross_validate(topology: &Topology, ds: &SegmentDataset, cfg: &TrainConfig, cv: &CvConfig, config: serde_json::Value) -> Result<CvReport> {
    topology.validate()?;
    let plan = make_folds(ds, cv.k, cv.fold_seed)?;
    let folds: Vec<usize> = match &cv.folds {
        Some(f) => f.clone(),
        None => (0..cv.k).collect(),
    };
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no folds selected".into()));
    }
    if let Some(&bad) = folds.iter().find(|&&f| f >= cv.k) {
        return Err(Error::InvalidArgument(format!("fold {bad} out of range for k = {}", cv.k)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cv.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<FoldOutcome> = pool.install(|| {
        folds
            .par_iter()
            .map(|&f| run_fold(topology, ds, &plan, f, cfg, cv))
            .collect::<Result<Vec<_>>>()
    })?;

    let accs: Vec<f64> = outcomes.iter().map(|o| o.report.accuracy).collect();
    let m = mean(&accs);
    let std = match accs.len() {
        1 => 0.0,
        n => (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
    };
    let all_hits: Vec<(usize, bool)> = outcomes.iter().flat_map(|o| o.hits.iter().copied()).collect();
    let mut subjects: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for &(i, ok) in &all_hits {
        let s = subjects.entry(ds.trials[ds.segments[i].trial].subject.as_str()).or_default();
        s.0 += ok as usize;
        s.1 += 1;
    }
    let per_subject: Vec<SubjectAccuracy> = subjects
        .into_iter()
        .map(|(subject, (correct, total))| SubjectAccuracy {
            subject: subject.to_string(),
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    let subject_accs: Vec<f64> = per_subject.iter().map(|s| s.accuracy).collect();
    Ok(CvReport {
        library_version: VERSION.to_string(),
        model: topology.label(),
        topology: topology.clone(),
        train: cfg.clone(),
        cv: cv.clone(),
        config,
        mean_accuracy: m,
        std_accuracy: std,
        mean_trial_accuracy: mean(&outcomes.iter().map(|o| o.report.trial_accuracy).collect::<Vec<_>>()),
        per_offset: per_offset(all_hits.iter().map(|&(i, ok)| (ds.segments[i].offset, ok))),
        subject_mean_accuracy: mean(&subject_accs),
        per_subject,
        folds: outcomes.into_iter().map(|o| o.report).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(values: Vec<f64>) -> Vec<Named> {
        vec![Named {
            name: "w".into(),
            value: Tensor::vector(values),
        }]
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = named(vec![1.0, -2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[Tensor::vector(vec![1.0, 1.0])], &mut st).unwrap();
        let before = p.clone();
        let m_before = st.m[0].clone();
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st).unwrap();
        // the bias-corrected first moment still moves the weights; with
        // a zero gradient from the start nothing moves
        assert_ne!(before, p);
        assert_eq!(st.m[0], m_before.scale(0.9));

        let mut q = named(vec![1.0, -2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &q);
        for _ in 0..5 {
            adam_step(&mut q, &[Tensor::zeros(&[2])], &mut st).unwrap();
        }
        assert_eq!(q, named(vec![1.0, -2.0]));
        assert_eq!(st.step, 5);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = named(vec![0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(cfg, &p);
        let g = Tensor::vector(vec![3.0, -0.01]);
        let mut prev = p[0].value.clone();
        for _ in 0..200 {
            adam_step(&mut p, &[g.clone()], &mut st).unwrap();
            let step = p[0].value.sub(&prev).unwrap();
            prev = p[0].value.clone();
            assert!((step.get(&[0]) + cfg.lr).abs() < 1e-6);
            assert!((step.get(&[1]) - cfg.lr).abs() < 1e-5);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = Tensor::vector(vec![0.3, -0.7, 0.05]);
        let mut p = named(vec![0.0; 3]);
        let mut st = AdamState::new(AdamConfig { lr: 0.01, ..AdamConfig::default() }, &p);
        for _ in 0..2000 {
            let g = p[0].value.sub(&target).unwrap().scale(2.0);
            adam_step(&mut p, &[g], &mut st).unwrap();
        }
        assert!(p[0].value.sub(&target).unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let mut p = named(vec![0.5, 1.5]);
        let mut st = AdamState::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &p);
        for i in 0..50 {
            adam_step(&mut p, &[Tensor::vector(vec![i as f64, -3.0])], &mut st).unwrap();
        }
        assert_eq!(p, named(vec![0.5, 1.5]));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = named(vec![0.0]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut st).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..33).collect();
        let b = batches(&order, 16);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![16, 17]);
        let b = batches(&order[..34.min(order.len())], 8);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![8, 8, 8, 9]);
        assert_eq!(batches(&order[..20], 16).iter().map(|x| x.len()).collect::<Vec<_>>(), vec![16, 4]);
    }

    #[test]
    fn fold_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..5).flat_map(|f| [fold_seed(7, f, 0), fold_seed(7, f, 1)]).collect();
        assert_eq!(s.len(), 10);
    }
}
