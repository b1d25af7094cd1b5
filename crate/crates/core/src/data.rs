//! Trial recordings, sliding-window segments, synthetic data and folds.
//!
//! A trial spans 35 s around its task onset: 10 s of rest before, 10 s of
//! task and 15 s of rest after. It is cut into 33 windows of 3 s with a 1 s
//! step, starting at offsets −10, −9, …, 22 s from onset. EEG is sampled
//! at 200 Hz (600 samples per window) and NIRS at 10 Hz (30 samples).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{write_atomic, Inputs, EEG_CHANNELS, EEG_SAMPLES, NIRS_CHANNELS, NIRS_SAMPLES};
use crate::tensor::Tensor;

pub const EEG_RATE_HZ: usize = 200;
pub const NIRS_RATE_HZ: usize = 10;
pub const FIRST_OFFSET_S: i32 = -10;
pub const LAST_OFFSET_S: i32 = 22;
pub const SEGMENTS_PER_TRIAL: usize = 33;
pub const WINDOW_S: usize = 3;

/// Window start offsets in seconds relative to task onset.
pub fn offsets() -> impl Iterator<Item = i32> {
    FIRST_OFFSET_S..=LAST_OFFSET_S
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mi,
    Ma,
}

/// One continuous trial, already filtered and converted upstream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecording {
    pub id: String,
    pub subject: String,
    pub task: Task,
    pub label: usize,
    /// `[30, T_eeg]` at 200 Hz.
    pub eeg: Tensor,
    /// `[36, T_nirs]` at 10 Hz.
    pub oxy: Tensor,
    pub deoxy: Tensor,
    /// Task onset as an EEG sample index.
    pub eeg_onset: usize,
    /// Task onset as a NIRS sample index.
    pub nirs_onset: usize,
}

/// Identity and label shared by every segment of a trial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub id: String,
    pub subject: String,
    pub task: Task,
    pub label: usize,
}

/// One 3 s tri-modal window.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalSegment {
    /// Index into [`SegmentDataset::trials`].
    pub trial: usize,
    pub offset: i32,
    pub label: usize,
    /// `[30, 600]`
    pub eeg: Tensor,
    /// `[36, 30]`
    pub oxy: Tensor,
    /// `[36, 30]`
    pub deoxy: Tensor,
    /// Planted per-modality amplitudes of synthetic segments.
    pub latent: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentDataset {
    pub trials: Vec<TrialInfo>,
    pub segments: Vec<ModalSegment>,
}

/// Columns `[start, start + len)` of a `[C, T]` tensor.
fn window(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(c * len);
    for row in x.data().chunks_exact(t) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(vec![c, len], out).expect("window within bounds")
}

fn check_span(trial: &str, what: &str, x: &Tensor, channels: usize, onset: usize, rate: usize) -> Result<()> {
    if x.order() != 2 || x.shape()[0] != channels {
        return Err(Error::Shape(format!(
            "trial {trial}: {what} has shape {:?}, expected [{channels}, T]",
            x.shape()
        )));
    }
    let len = x.shape()[1];
    let before = (-FIRST_OFFSET_S) as usize * rate;
    let after = (LAST_OFFSET_S as usize + WINDOW_S) * rate;
    let mut missing = Vec::new();
    if onset < before {
        missing.push(format!("{} s before onset", (before - onset) as f64 / rate as f64));
    }
    if onset + after > len {
        missing.push(format!("{} s after the end", (onset + after - len) as f64 / rate as f64));
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::ShortRecording {
            trial: trial.to_string(),
            missing: format!("{what} lacks {}", missing.join(" and ")),
        })
    }
}

/// Cuts a recording into its 33 windows.
pub fn segment_trial(rec: &TrialRecording, trial_index: usize) -> Result<Vec<ModalSegment>> {
    check_span(&rec.id, "eeg", &rec.eeg, EEG_CHANNELS, rec.eeg_onset, EEG_RATE_HZ)?;
    check_span(&rec.id, "oxy", &rec.oxy, NIRS_CHANNELS, rec.nirs_onset, NIRS_RATE_HZ)?;
    check_span(&rec.id, "deoxy", &rec.deoxy, NIRS_CHANNELS, rec.nirs_onset, NIRS_RATE_HZ)?;
    Ok(offsets()
        .map(|k| {
            let e0 = (rec.eeg_onset as i64 + k as i64 * EEG_RATE_HZ as i64) as usize;
            let n0 = (rec.nirs_onset as i64 + k as i64 * NIRS_RATE_HZ as i64) as usize;
            ModalSegment {
                trial: trial_index,
                offset: k,
                label: rec.label,
                eeg: window(&rec.eeg, e0, EEG_SAMPLES),
                oxy: window(&rec.oxy, n0, NIRS_SAMPLES),
                deoxy: window(&rec.deoxy, n0, NIRS_SAMPLES),
                latent: None,
            }
        })
        .collect())
}

impl SegmentDataset {
    /// Segments every recording.
    pub fn from_recordings(recs: &[TrialRecording]) -> Result<Self> {
        let mut ds = SegmentDataset::default();
        let mut ids = HashSet::new();
        for rec in recs {
            if !ids.insert(rec.id.as_str()) {
                return Err(Error::Validation(vec![format!("duplicate trial id {:?}", rec.id)]));
            }
            let segs = segment_trial(rec, ds.trials.len())?;
            ds.trials.push(TrialInfo {
                id: rec.id.clone(),
                subject: rec.subject.clone(),
                task: rec.task,
                label: rec.label,
            });
            ds.segments.extend(segs);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.segments[i].label).collect()
    }

    /// Stacks the selected segments into a batch.
    pub fn gather(&self, indices: &[usize]) -> Inputs {
        let stack = |f: &dyn Fn(&ModalSegment) -> &Tensor| {
            let first = f(&self.segments[indices[0]]);
            let mut shape = vec![indices.len()];
            shape.extend_from_slice(first.shape());
            let mut data = Vec::with_capacity(indices.len() * first.len());
            for &i in indices {
                data.extend_from_slice(f(&self.segments[i]).data());
            }
            Tensor::new(shape, data).expect("segments share shapes")
        };
        Inputs {
            eeg: stack(&|s| &s.eeg),
            oxy: stack(&|s| &s.oxy),
            deoxy: stack(&|s| &s.deoxy),
        }
    }

    /// Copy with segment labels permuted at random, destroying any link
    /// between signal and label while keeping the class balance.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = self.segments.iter().map(|s| s.label).collect();
        labels.shuffle(&mut rng);
        let mut out = self.clone();
        for (s, l) in out.segments.iter_mut().zip(labels) {
            s.label = l;
        }
        out
    }

    /// Segment indices grouped by trial.
    pub fn segments_by_trial(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.trials.len()];
        for (i, s) in self.segments.iter().enumerate() {
            out[s.trial].push(i);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Each modality carries `±signal` times a fixed spatial pattern, with
    /// the sign given by the label.
    Additive,
    /// Each modality carries amplitude `a_k` times a fixed spatial pattern,
    /// with the label given by the sign of `a₁·a₂·a₃`. Any one or two
    /// modalities are independent of the label.
    Interaction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub generator: Generator,
    #[serde(default = "one")]
    pub subjects: usize,
    pub trials_per_subject: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Amplitude of the additive signal.
    #[serde(default = "one_f")]
    pub signal: f64,
    #[serde(default = "default_task")]
    pub task: Task,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_task() -> Task {
    Task::Mi
}

impl SynthSpec {
    pub fn new(generator: Generator, subjects: usize, trials_per_subject: usize, noise: f64) -> Self {
        SynthSpec {
            generator,
            subjects,
            trials_per_subject,
            noise,
            signal: 1.0,
            task: Task::Mi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.subjects == 0 {
            errs.push("subjects must be positive".to_string());
        }
        if self.trials_per_subject < 2 || self.trials_per_subject % 2 != 0 {
            errs.push(format!(
                "trials_per_subject must be a positive even number for balanced classes, got {}",
                self.trials_per_subject
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            errs.push(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if !(self.signal.is_finite() && self.signal > 0.0) {
            errs.push(format!("signal must be finite and positive, got {}", self.signal));
        }
        match errs.is_empty() {
            true => Ok(()),
            false => Err(Error::Validation(errs)),
        }
    }
}

/// Random unit-norm spatial pattern.
fn pattern(channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    g.into_iter().map(|v| v / n * (channels as f64).sqrt()).collect()
}

fn planted(pattern: &[f64], amplitude: f64, len: usize, noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(pattern.len() * len);
    for &g in pattern {
        let base = amplitude * g;
        for _ in 0..len {
            let e: f64 = StandardNormal.sample(rng);
            data.push(base + noise * e);
        }
    }
    Tensor::new(vec![pattern.len(), len], data).expect("consistent dims")
}

/// Deterministic synthetic dataset with the real segment shapes.
///
/// Half the trials of every subject carry each label. Every segment draws
/// fresh amplitudes and noise.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<SegmentDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = [
        pattern(EEG_CHANNELS, &mut rng),
        pattern(NIRS_CHANNELS, &mut rng),
        pattern(NIRS_CHANNELS, &mut rng),
    ];
    let magnitude = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
    let mut ds = SegmentDataset::default();
    for s in 0..spec.subjects {
        let mut labels: Vec<usize> = (0..spec.trials_per_subject).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        for (t, &label) in labels.iter().enumerate() {
            let trial = ds.trials.len();
            ds.trials.push(TrialInfo {
                id: format!("s{s:02}-t{t:03}"),
                subject: format!("s{s:02}"),
                task: spec.task,
                label,
            });
            let sign = if label == 1 { 1.0 } else { -1.0 };
            for offset in offsets() {
                let amps = match spec.generator {
                    Generator::Additive => [sign * spec.signal; 3],
                    Generator::Interaction => {
                        let s1: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        let s2: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        let s3 = sign * s1 * s2;
                        [s1, s2, s3].map(|sk| sk * magnitude.sample(&mut rng))
                    }
                };
                ds.segments.push(ModalSegment {
                    trial,
                    offset,
                    label,
                    eeg: planted(&patterns[0], amps[0], EEG_SAMPLES, spec.noise, &mut rng),
                    oxy: planted(&patterns[1], amps[1], NIRS_SAMPLES, spec.noise, &mut rng),
                    deoxy: planted(&patterns[2], amps[2], NIRS_SAMPLES, spec.noise, &mut rng),
                    latent: Some(amps),
                });
            }
        }
    }
    Ok(ds)
}

/// Continuous 35 s recordings from the same generators, one amplitude
/// triple per trial, for exercising the segmentation path.
pub fn synth_recordings(spec: &SynthSpec, seed: u64) -> Result<Vec<TrialRecording>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = [
        pattern(EEG_CHANNELS, &mut rng),
        pattern(NIRS_CHANNELS, &mut rng),
        pattern(NIRS_CHANNELS, &mut rng),
    ];
    let magnitude = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
    let span = (LAST_OFFSET_S - FIRST_OFFSET_S) as usize + WINDOW_S;
    let before = (-FIRST_OFFSET_S) as usize;
    let mut out = Vec::new();
    for s in 0..spec.subjects {
        let mut labels: Vec<usize> = (0..spec.trials_per_subject).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        for (t, &label) in labels.iter().enumerate() {
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let amps = match spec.generator {
                Generator::Additive => [sign * spec.signal; 3],
                Generator::Interaction => {
                    let s1: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let s2: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    [s1, s2, sign * s1 * s2].map(|sk| sk * magnitude.sample(&mut rng))
                }
            };
            out.push(TrialRecording {
                id: format!("s{s:02}-t{t:03}"),
                subject: format!("s{s:02}"),
                task: spec.task,
                label,
                eeg: planted(&patterns[0], amps[0], span * EEG_RATE_HZ, spec.noise, &mut rng),
                oxy: planted(&patterns[1], amps[1], span * NIRS_RATE_HZ, spec.noise, &mut rng),
                deoxy: planted(&patterns[2], amps[2], span * NIRS_RATE_HZ, spec.noise, &mut rng),
                eeg_onset: before * EEG_RATE_HZ,
                nirs_onset: before * NIRS_RATE_HZ,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Folds

/// Trial-level assignment to `k` cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index of every trial.
    pub assignment: Vec<usize>,
}

/// Stratified trial-level folds: within each subject, each label's trials
/// are shuffled and dealt round-robin, continuing where the previous group
/// stopped so fold sizes stay within one trial of each other.
pub fn make_folds(ds: &SegmentDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut per_label: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &ds.trials {
        *per_label.entry(t.label).or_default() += 1;
    }
    if per_label.len() < 2 {
        return Err(Error::TooFewTrials("dataset holds a single class".into()));
    }
    for (label, &n) in &per_label {
        if n < k {
            return Err(Error::TooFewTrials(format!("label {label} has {n} trials for {k} folds")));
        }
    }
    let mut groups: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, t) in ds.trials.iter().enumerate() {
        groups.entry((t.subject.as_str(), t.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; ds.trials.len()];
    let mut next = 0;
    for (_, mut trials) in groups {
        trials.shuffle(&mut rng);
        for t in trials {
            assignment[t] = next % k;
            next += 1;
        }
    }
    Ok(FoldPlan { k, assignment })
}

impl FoldPlan {
    /// `(train, test)` segment indices for fold `f`.
    pub fn split(&self, ds: &SegmentDataset, f: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in ds.segments.iter().enumerate() {
            match self.assignment[s.trial] == f {
                true => test.push(i),
                false => train.push(i),
            }
        }
        (train, test)
    }

    pub fn test_trials(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&t| self.assignment[t] == f).collect()
    }

    /// Checks that no trial contributes segments to both sides of `f`.
    pub fn assert_disjoint(&self, ds: &SegmentDataset, train: &[usize], test: &[usize]) -> Result<()> {
        let a: HashSet<usize> = train.iter().map(|&i| ds.segments[i].trial).collect();
        let b: HashSet<usize> = test.iter().map(|&i| ds.segments[i].trial).collect();
        match a.intersection(&b).next() {
            None => Ok(()),
            Some(&t) => Err(Error::Validation(vec![format!(
                "trial {} appears in both train and test",
                ds.trials[t].id
            )])),
        }
    }
}

// ---------------------------------------------------------------------------
// Manifests

pub const SEGMENT_FORMAT: &str = "polyfusion-segments-1";
pub const TRIAL_FORMAT: &str = "polyfusion-trials-1";

/// On-disk index of a segmented dataset. Tensor paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentManifest {
    pub format: String,
    pub trials: Vec<SegmentManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentManifestEntry {
    pub id: String,
    pub subject: String,
    pub task: Task,
    pub label: usize,
    /// Window offset in seconds of each stacked segment.
    pub offsets: Vec<i32>,
    /// `[S, 30, 600]`
    pub eeg: String,
    /// `[S, 36, 30]`
    pub oxy: String,
    /// `[S, 36, 30]`
    pub deoxy: String,
}

/// On-disk index of continuous trial recordings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialManifest {
    pub format: String,
    pub trials: Vec<TrialManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialManifestEntry {
    pub id: String,
    pub subject: String,
    pub task: Task,
    pub label: usize,
    /// `[30, T]` at 200 Hz.
    pub eeg: String,
    /// `[36, T']` at 10 Hz.
    pub oxy: String,
    pub deoxy: String,
    pub eeg_onset: usize,
    pub nirs_onset: usize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_common(errs: &mut Vec<String>, seen: &mut HashSet<String>, id: &str, label: usize) {
    if !seen.insert(id.to_string()) {
        errs.push(format!("duplicate trial id {id:?}"));
    }
    if label > 1 {
        errs.push(format!("trial {id}: unknown label {label} (expected 0 or 1)"));
    }
}

/// Loads a tensor whose shape must match `pattern` (`None` = any length).
fn load_checked(errs: &mut Vec<String>, dir: &Path, id: &str, what: &str, file: &str, pattern: &[Option<usize>]) -> Option<Tensor> {
    match Tensor::load(dir.join(file)) {
        Err(e) => {
            errs.push(format!("trial {id}: {what}: {e}"));
            None
        }
        Ok(t) => {
            let ok = t.order() == pattern.len() && t.shape().iter().zip(pattern).all(|(&d, p)| p.is_none_or(|p| p == d));
            if ok {
                return Some(t);
            }
            let want: Vec<String> = pattern.iter().map(|p| p.map_or("_".to_string(), |d| d.to_string())).collect();
            errs.push(format!("trial {id}: {what} has shape {:?}, expected [{}]", t.shape(), want.join(", ")));
            None
        }
    }
}

/// Loads a segment manifest and its tensors, reporting every problem found.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<SegmentDataset> {
    let path = path.as_ref();
    let manifest: SegmentManifest = read_json(path)?;
    let dir = base_dir(path);
    let mut errs = Vec::new();
    if manifest.format != SEGMENT_FORMAT {
        errs.push(format!("format {:?}, expected {SEGMENT_FORMAT:?}", manifest.format));
    }
    let mut seen = HashSet::new();
    let mut ds = SegmentDataset::default();
    for e in &manifest.trials {
        check_common(&mut errs, &mut seen, &e.id, e.label);
        let s = e.offsets.len();
        let eeg = load_checked(&mut errs, &dir, &e.id, "eeg", &e.eeg, &[Some(s), Some(EEG_CHANNELS), Some(EEG_SAMPLES)]);
        let oxy = load_checked(&mut errs, &dir, &e.id, "oxy", &e.oxy, &[Some(s), Some(NIRS_CHANNELS), Some(NIRS_SAMPLES)]);
        let deoxy = load_checked(&mut errs, &dir, &e.id, "deoxy", &e.deoxy, &[Some(s), Some(NIRS_CHANNELS), Some(NIRS_SAMPLES)]);
        if let Some(&bad) = e.offsets.iter().find(|o| !(FIRST_OFFSET_S..=LAST_OFFSET_S).contains(*o)) {
            errs.push(format!("trial {}: offset {bad} outside {FIRST_OFFSET_S}..={LAST_OFFSET_S}", e.id));
        }
        let (Some(eeg), Some(oxy), Some(deoxy)) = (eeg, oxy, deoxy) else {
            continue;
        };
        let trial = ds.trials.len();
        ds.trials.push(TrialInfo {
            id: e.id.clone(),
            subject: e.subject.clone(),
            task: e.task,
            label: e.label,
        });
        let (es, ns) = (EEG_CHANNELS * EEG_SAMPLES, NIRS_CHANNELS * NIRS_SAMPLES);
        for (i, &offset) in e.offsets.iter().enumerate() {
            let slice = |t: &Tensor, n: usize, c: usize, l: usize| {
                Tensor::new(vec![c, l], t.data()[i * n..(i + 1) * n].to_vec()).unwrap()
            };
            ds.segments.push(ModalSegment {
                trial,
                offset,
                label: e.label,
                eeg: slice(&eeg, es, EEG_CHANNELS, EEG_SAMPLES),
                oxy: slice(&oxy, ns, NIRS_CHANNELS, NIRS_SAMPLES),
                deoxy: slice(&deoxy, ns, NIRS_CHANNELS, NIRS_SAMPLES),
                latent: None,
            });
        }
    }
    match errs.is_empty() {
        true => Ok(ds),
        false => Err(Error::Validation(errs)),
    }
}

/// Loads continuous recordings listed in a trial manifest.
pub fn load_trial_manifest(path: impl AsRef<Path>) -> Result<Vec<TrialRecording>> {
    let path = path.as_ref();
    let manifest: TrialManifest = read_json(path)?;
    let dir = base_dir(path);
    let mut errs = Vec::new();
    if manifest.format != TRIAL_FORMAT {
        errs.push(format!("format {:?}, expected {TRIAL_FORMAT:?}", manifest.format));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in &manifest.trials {
        check_common(&mut errs, &mut seen, &e.id, e.label);
        let eeg = load_checked(&mut errs, &dir, &e.id, "eeg", &e.eeg, &[Some(EEG_CHANNELS), None]);
        let oxy = load_checked(&mut errs, &dir, &e.id, "oxy", &e.oxy, &[Some(NIRS_CHANNELS), None]);
        let deoxy = load_checked(&mut errs, &dir, &e.id, "deoxy", &e.deoxy, &[Some(NIRS_CHANNELS), None]);
        if let (Some(eeg), Some(oxy), Some(deoxy)) = (eeg, oxy, deoxy) {
            out.push(TrialRecording {
                id: e.id.clone(),
                subject: e.subject.clone(),
                task: e.task,
                label: e.label,
                eeg,
                oxy,
                deoxy,
                eeg_onset: e.eeg_onset,
                nirs_onset: e.nirs_onset,
            });
        }
    }
    match errs.is_empty() {
        true => Ok(out),
        false => Err(Error::Validation(errs)),
    }
}

fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * t.len() + 64);
    t.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &bytes)
}

/// Writes `manifest.json` and one stacked tensor file per trial and
/// modality under `dir`. Returns the manifest path.
pub fn save_manifest(ds: &SegmentDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let tdir = dir.join("trials");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::with_capacity(ds.trials.len());
    for (t, segs) in ds.trials.iter().zip(ds.segments_by_trial()) {
        if segs.is_empty() {
            continue;
        }
        let batch = ds.gather(&segs);
        let stem = sanitize(&t.id);
        let mut files = Vec::new();
        for (what, tensor) in [("eeg", &batch.eeg), ("oxy", &batch.oxy), ("deoxy", &batch.deoxy)] {
            let rel = format!("trials/{stem}.{what}.bin");
            save_tensor(&dir.join(&rel), tensor)?;
            files.push(rel);
        }
        let [eeg, oxy, deoxy]: [String; 3] = files.try_into().expect("three modalities");
        entries.push(SegmentManifestEntry {
            id: t.id.clone(),
            subject: t.subject.clone(),
            task: t.task,
            label: t.label,
            offsets: segs.iter().map(|&i| ds.segments[i].offset).collect(),
            eeg,
            oxy,
            deoxy,
        });
    }
    let manifest = SegmentManifest {
        format: SEGMENT_FORMAT.into(),
        trials: entries,
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Writes recordings and a trial manifest under `dir`.
pub fn save_trial_manifest(recs: &[TrialRecording], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let tdir = dir.join("raw");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::new();
    for r in recs {
        let stem = sanitize(&r.id);
        let mut files = Vec::new();
        for (what, tensor) in [("eeg", &r.eeg), ("oxy", &r.oxy), ("deoxy", &r.deoxy)] {
            let rel = format!("raw/{stem}.{what}.bin");
            save_tensor(&dir.join(&rel), tensor)?;
            files.push(rel);
        }
        let [eeg, oxy, deoxy]: [String; 3] = files.try_into().expect("three modalities");
        entries.push(TrialManifestEntry {
            id: r.id.clone(),
            subject: r.subject.clone(),
            task: r.task,
            label: r.label,
            eeg,
            oxy,
            deoxy,
            eeg_onset: r.eeg_onset,
            nirs_onset: r.nirs_onset,
        });
    }
    let manifest = TrialManifest {
        format: TRIAL_FORMAT.into(),
        trials: entries,
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn recording(id: &str, label: usize, fill: impl Fn(usize, usize) -> f64) -> TrialRecording {
        let te = 35 * EEG_RATE_HZ;
        let tn = 35 * NIRS_RATE_HZ;
        let make = |c: usize, t: usize| {
            let mut x = Tensor::zeros(&[c, t]);
            for i in 0..c {
                for j in 0..t {
                    x.set(&[i, j], fill(i, j));
                }
            }
            x
        };
        TrialRecording {
            id: id.into(),
            subject: "s01".into(),
            task: Task::Ma,
            label,
            eeg: make(EEG_CHANNELS, te),
            oxy: make(NIRS_CHANNELS, tn),
            deoxy: make(NIRS_CHANNELS, tn),
            eeg_onset: 10 * EEG_RATE_HZ,
            nirs_onset: 10 * NIRS_RATE_HZ,
        }
    }

    #[test]
    fn thirty_three_windows_with_expected_spans() {
        // value = sample index, so window starts are readable
        let rec = recording("a", 1, |_, j| j as f64);
        let segs = segment_trial(&rec, 0).unwrap();
        assert_eq!(segs.len(), SEGMENTS_PER_TRIAL);
        assert_eq!(segs.iter().map(|s| s.offset).collect::<Vec<_>>(), offsets().collect::<Vec<_>>());
        assert_eq!(segs[0].eeg.shape(), &[30, 600]);
        assert_eq!(segs[0].oxy.shape(), &[36, 30]);
        // first window covers −10…−7 s, last covers 22…25 s
        assert_eq!(segs[0].eeg.get(&[0, 0]), 0.0);
        assert_eq!(segs[0].eeg.get(&[0, 599]), 599.0);
        assert_eq!(segs[32].eeg.get(&[0, 0]), (32 * 200) as f64);
        assert_eq!(segs[32].eeg.get(&[0, 599]), (35 * 200 - 1) as f64);
        assert_eq!(segs[32].deoxy.get(&[5, 29]), (35 * 10 - 1) as f64);
    }

    #[test]
    fn constant_recording_gives_identical_segments() {
        let rec = recording("c", 0, |_, _| 2.5);
        let segs = segment_trial(&rec, 0).unwrap();
        assert!(segs.windows(2).all(|w| w[0].eeg == w[1].eeg && w[0].oxy == w[1].oxy));
    }

    #[test]
    fn short_recording_names_missing_span() {
        let mut rec = recording("short", 0, |_, _| 0.0);
        rec.eeg = window(&rec.eeg, 0, 6800);
        let err = segment_trial(&rec, 0).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::ShortRecording { .. }));
        assert!(msg.contains("short") && msg.contains("1 s after"), "{msg}");
        let mut rec = recording("early", 0, |_, _| 0.0);
        rec.nirs_onset = 95;
        assert!(segment_trial(&rec, 0).unwrap_err().to_string().contains("0.5 s before"));
    }

    #[test]
    fn sixty_trials_make_equal_folds() {
        let ds = synth_dataset(&SynthSpec::new(Generator::Additive, 1, 60, 0.0), 1).unwrap();
        let plan = make_folds(&ds, 5, 7).unwrap();
        let mut seen = vec![0; ds.len()];
        for f in 0..5 {
            let (train, test) = plan.split(&ds, f);
            assert_eq!(test.len(), 396);
            assert_eq!(plan.test_trials(f).len(), 12);
            plan.assert_disjoint(&ds, &train, &test).unwrap();
            for i in test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn fold_plans_depend_on_seed() {
        let ds = synth_dataset(&SynthSpec::new(Generator::Additive, 2, 10, 0.0), 1).unwrap();
        let a = make_folds(&ds, 5, 3).unwrap();
        assert_eq!(a, make_folds(&ds, 5, 3).unwrap());
        let distinct = (0..100u64).filter(|&s| make_folds(&ds, 5, 1000 + s).unwrap() != a).count();
        assert!(distinct >= 99);
    }

    #[test]
    fn too_few_trials_rejected() {
        let ds = synth_dataset(&SynthSpec::new(Generator::Additive, 1, 8, 0.0), 1).unwrap();
        assert!(matches!(make_folds(&ds, 5, 0), Err(Error::TooFewTrials(_))));
    }

    #[test]
    fn interaction_labels_follow_planted_sign() {
        let ds = synth_dataset(&SynthSpec::new(Generator::Interaction, 1, 4, 0.0), 2).unwrap();
        for s in &ds.segments {
            let a = s.latent.unwrap();
            assert_eq!(s.label, (a[0] * a[1] * a[2] > 0.0) as usize);
            // noise 0: every EEG column equals the planted amplitude times the pattern
            assert_eq!(s.eeg.get(&[3, 0]), s.eeg.get(&[3, 599]));
        }
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SynthSpec::new(Generator::Interaction, 2, 6, 0.1);
        let a = synth_dataset(&spec, 9).unwrap();
        assert_eq!(a, synth_dataset(&spec, 9).unwrap());
        assert_ne!(a, synth_dataset(&spec, 10).unwrap());
        let ones = a.trials.iter().filter(|t| t.label == 1).count();
        assert_eq!(ones * 2, a.trials.len());
        assert!(SynthSpec::new(Generator::Additive, 1, 3, 0.1).validate().is_err());
    }

    #[test]
    fn shuffled_labels_keep_balance() {
        let ds = synth_dataset(&SynthSpec::new(Generator::Additive, 1, 4, 0.0), 2).unwrap();
        let sh = ds.with_shuffled_labels(1);
        let count = |d: &SegmentDataset| d.segments.iter().filter(|s| s.label == 1).count();
        assert_eq!(count(&ds), count(&sh));
        assert_ne!(ds.labels(&(0..ds.len()).collect::<Vec<_>>()), sh.labels(&(0..sh.len()).collect::<Vec<_>>()));
    }

    #[test]
    fn manifest_round_trip_is_byte_stable() {
        let ds = synth_dataset(&SynthSpec::new(Generator::Additive, 1, 2, 0.5), 4).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = save_manifest(&ds, d1.path()).unwrap();
        save_manifest(&ds, d2.path()).unwrap();
        let back = load_manifest(&p1).unwrap();
        assert_eq!(back.trials, ds.trials);
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.segments.iter().zip(&ds.segments) {
            assert_eq!((a.offset, a.label, &a.eeg, &a.oxy, &a.deoxy), (b.offset, b.label, &b.eeg, &b.oxy, &b.deoxy));
        }
        for f in ["manifest.json", "trials/s00-t000.eeg.bin", "trials/s00-t001.deoxy.bin"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn manifest_validation_lists_every_problem() {
        let ds = synth_dataset(&SynthSpec::new(Generator::Additive, 1, 2, 0.5), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_manifest(&ds, dir.path()).unwrap();
        let mut m: SegmentManifest = read_json(&path).unwrap();
        m.trials[1].id = m.trials[0].id.clone();
        m.trials[0].label = 3;
        m.trials[0].oxy = "trials/missing.bin".into();
        m.trials[1].eeg = m.trials[1].oxy.clone();
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Validation(errs) => {
                assert_eq!(errs.len(), 4, "{errs:#?}");
                assert!(errs.iter().any(|e| e.contains("duplicate")));
                assert!(errs.iter().any(|e| e.contains("unknown label 3")));
                assert!(errs.iter().any(|e| e.contains("missing.bin")));
                assert!(errs.iter().any(|e| e.contains("eeg has shape [33, 36, 30]")));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn synthetic_recordings_segment_cleanly() {
        let spec = SynthSpec::new(Generator::Interaction, 2, 4, 0.1);
        let recs = synth_recordings(&spec, 3).unwrap();
        assert_eq!(recs.len(), 8);
        let ds = SegmentDataset::from_recordings(&recs).unwrap();
        assert_eq!(ds.len(), 8 * SEGMENTS_PER_TRIAL);
        assert_eq!(recs, synth_recordings(&spec, 3).unwrap());
    }

    #[test]
    fn trial_manifest_feeds_segmentation() {
        let recs = vec![recording("x", 0, |i, j| (i + j) as f64), recording("y", 1, |_, _| 1.0)];
        let dir = tempfile::tempdir().unwrap();
        let path = save_trial_manifest(&recs, dir.path()).unwrap();
        let back = load_trial_manifest(&path).unwrap();
        assert_eq!(back, recs);
        let ds = SegmentDataset::from_recordings(&back).unwrap();
        assert_eq!(ds.len(), 66);
        assert_eq!(ds.segments_by_trial()[1].len(), 33);
    }
}
