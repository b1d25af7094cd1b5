//! Run configuration.
//!
//! Resolution order, later wins:
//! 1. profile preset (`desk` unless the flag or the file names another)
//! 2. config file
//! 3. command-line flags
//!
//! The output directory falls back to `$POLYFUSION_OUT/<task>` and then to
//! `runs/<task>` when neither the file nor a flag sets it.

use std::path::{Path, PathBuf};

use polyfusion::data::{Generator, SynthSpec};
use polyfusion::fusion::{FusionKind, FusionPath, FusionSpec};
use polyfusion::models::{ExtractorSpec, Modality, Topology};
use polyfusion::train::{CvConfig, TrainConfig};
use polyfusion::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUTPUT_ENV: &str = "POLYFUSION_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Hidden widths divided by 6, 30 epochs.
    Desk,
    /// Reference widths, 300 epochs.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Segment manifest written by `synth` or `segment`.
    Manifest(PathBuf),
    Synthetic { spec: SynthSpec, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Eeg,
    Oxy,
    Deoxy,
    Lf,
    Tf,
    Pf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    pub width_divisor: usize,
    pub output_dim: usize,
    pub rank: usize,
    pub order: usize,
    pub symmetric: bool,
    pub path: FusionPath,
    pub augment_one: bool,
    /// L2-normalize the LF output as well.
    pub l2_linear: bool,
}

impl ModelConfig {
    pub fn fusion_spec(&self) -> Option<FusionSpec> {
        let mut spec = match self.kind {
            ModelChoice::Lf => FusionSpec::linear([0; 3], self.output_dim),
            ModelChoice::Tf => FusionSpec::tensor([0; 3], self.output_dim, self.rank, self.path),
            ModelChoice::Pf => FusionSpec::polynomial([0; 3], self.output_dim, self.order, self.rank, self.symmetric, self.path),
            _ => return None,
        };
        spec.augment_one = self.augment_one && spec.kind != FusionKind::Lf;
        Some(spec)
    }

    pub fn topology(&self) -> Topology {
        let (e, n) = (ExtractorSpec::eeg(self.width_divisor), ExtractorSpec::nirs(self.width_divisor));
        let mut t = match self.kind {
            ModelChoice::Eeg => Topology::single(e, n, Modality::Eeg),
            ModelChoice::Oxy => Topology::single(e, n, Modality::Oxy),
            ModelChoice::Deoxy => Topology::single(e, n, Modality::Deoxy),
            _ => Topology::fused(e, n, self.fusion_spec().expect("fused kind")),
        };
        t.l2_linear = self.l2_linear;
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub profile: Profile,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Flag values that override the resolved configuration.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub data: Option<PathBuf>,
    pub model: Option<ModelChoice>,
    pub epochs: Option<usize>,
    pub folds: Option<Vec<usize>>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        let (width_divisor, epochs) = match profile {
            Profile::Desk => (6, 30),
            Profile::Full => (1, 300),
        };
        RunConfig {
            task: "run".into(),
            profile,
            data: DataSource::Synthetic {
                spec: SynthSpec::new(Generator::Interaction, 1, 124, 0.1),
                seed: 0,
            },
            model: ModelConfig {
                kind: ModelChoice::Pf,
                width_divisor,
                output_dim: 128,
                rank: 16,
                order: 3,
                symmetric: true,
                path: FusionPath::Factorized,
                augment_one: false,
                l2_linear: false,
            },
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            cv: CvConfig::default(),
            output_dir: None,
        }
    }

    /// Preset, then file, then flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let file_value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Some(serde_json::from_str::<Value>(&text)?)
            }
            None => None,
        };
        let file_profile = match file_value.as_ref().and_then(|v| v.get("profile")) {
            Some(p) => Some(serde_json::from_value::<Profile>(p.clone())?),
            None => None,
        };
        let profile = flags.profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut value = serde_json::to_value(Self::preset(profile))?;
        if let Some(f) = file_value {
            merge(&mut value, f, true);
        }
        value["profile"] = serde_json::to_value(profile)?;
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Validation(vec![format!("config: {e}")]))?;
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, flags: &Overrides) {
        if let Some(seed) = flags.seed {
            self.cv.seed = seed;
            self.cv.fold_seed = seed;
            if let DataSource::Synthetic { seed: s, .. } = &mut self.data {
                *s = seed;
            }
        }
        if let Some(j) = flags.jobs {
            self.cv.jobs = j;
        }
        if let Some(d) = &flags.data {
            self.data = DataSource::Manifest(d.clone());
        }
        if let Some(m) = flags.model {
            self.model.kind = m;
        }
        if let Some(e) = flags.epochs {
            self.train.epochs = e;
        }
        if let Some(f) = &flags.folds {
            self.cv.folds = Some(f.clone());
        }
        if let Some(o) = &flags.out {
            self.output_dir = Some(o.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.task.is_empty() || self.task.contains(['/', '\\']) {
            errs.push(format!("task must be a non-empty name without path separators, got {:?}", self.task));
        }
        if self.train.epochs == 0 {
            errs.push("train.epochs must be positive".into());
        }
        if self.train.batch_size < 2 {
            errs.push("train.batch_size must be at least 2".into());
        }
        if !(self.train.adam.lr.is_finite() && self.train.adam.lr > 0.0) {
            errs.push("train.adam.lr must be positive".into());
        }
        if self.cv.k < 2 {
            errs.push("cv.k must be at least 2".into());
        }
        if self.cv.jobs == 0 {
            errs.push("cv.jobs must be positive".into());
        }
        if self.model.width_divisor == 0 {
            errs.push("model.width_divisor must be positive".into());
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            if let Err(Error::Validation(v)) = spec.validate() {
                errs.extend(v.into_iter().map(|m| format!("data.synthetic.spec: {m}")));
            }
        }
        if let Err(e) = self.model.topology().validate() {
            match e {
                Error::Validation(v) => errs.extend(v.into_iter().map(|m| format!("model: {m}"))),
                other => errs.push(format!("model: {other}")),
            }
        }
        match errs.is_empty() {
            true => Ok(()),
            false => Err(Error::Validation(errs)),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        if let Some(o) = &self.output_dir {
            return o.clone();
        }
        let base = std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        base.join(&self.task)
    }

    pub fn fingerprint(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Recursive object merge. The `data` key is replaced whole, since its
/// variants do not combine.
fn merge(base: &mut Value, over: Value, top: bool) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if !(top && k == "data") => merge(slot, v, false),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn preset_round_trips() {
        for p in [Profile::Desk, Profile::Full] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            let back: RunConfig = serde_json::from_value(c.fingerprint()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let f = file(r#"{"profile": "full", "train": {"epochs": 7}, "cv": {"jobs": 2}, "model": {"kind": "tf"}}"#);
        let c = RunConfig::resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!((c.profile, c.model.width_divisor, c.train.epochs, c.cv.jobs, c.model.kind), (Profile::Full, 1, 7, 2, ModelChoice::Tf));
        assert_eq!(c.train.batch_size, 16);
        let flags = Overrides {
            profile: Some(Profile::Desk),
            epochs: Some(3),
            seed: Some(9),
            ..Default::default()
        };
        let c = RunConfig::resolve(Some(f.path()), &flags).unwrap();
        assert_eq!((c.profile, c.model.width_divisor, c.train.epochs, c.cv.seed, c.cv.fold_seed), (Profile::Desk, 6, 3, 9, 9));
        assert!(matches!(c.data, DataSource::Synthetic { seed: 9, .. }));
    }

    #[test]
    fn data_is_replaced_whole() {
        let f = file(r#"{"data": {"manifest": "x/manifest.json"}}"#);
        let c = RunConfig::resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(c.data, DataSource::Manifest("x/manifest.json".into()));
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [r#"{"epochs": 3}"#, r#"{"train": {"epoch": 3}}"#, r#"{"model": {"kind": "pf", "rnk": 2}}"#] {
            let f = file(text);
            let e = RunConfig::resolve(Some(f.path()), &Overrides::default()).unwrap_err();
            assert!(matches!(e, Error::Validation(_)), "{text}: {e}");
        }
    }

    #[test]
    fn validation_collects_every_problem() {
        let mut c = RunConfig::preset(Profile::Desk);
        c.train.epochs = 0;
        c.cv.k = 1;
        c.model.rank = 0;
        let Err(Error::Validation(v)) = c.validate() else { panic!() };
        assert!(v.len() >= 3, "{v:?}");
    }
}
