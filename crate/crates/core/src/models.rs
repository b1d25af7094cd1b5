//! CNN feature extractors, classifier heads and the assembled networks.
//!
//! Every network takes the three modalities of a segment batch
//! ([`Inputs`]) and returns two-class logits. Single-modal classifiers read
//! only their own modality.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{self, param_count, FusionKind, FusionParams, FusionSpec};
use crate::nn::{self, BatchStats, Conv1dSpec, Mode, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::Tensor;

pub const EEG_CHANNELS: usize = 30;
pub const EEG_SAMPLES: usize = 600;
pub const NIRS_CHANNELS: usize = 36;
pub const NIRS_SAMPLES: usize = 30;
pub const CLASSES: usize = 2;
pub const L2_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Oxy,
    Deoxy,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Eeg, Modality::Oxy, Modality::Deoxy];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Oxy => "oxy",
            Modality::Deoxy => "deoxy",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eeg" => Ok(Modality::Eeg),
            "oxy" => Ok(Modality::Oxy),
            "deoxy" => Ok(Modality::Deoxy),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?} (eeg, oxy, deoxy)"))),
        }
    }
}

/// Six Conv1D + BatchNorm + ReLU blocks followed by global average pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSpec {
    pub input_channels: usize,
    pub input_len: usize,
    pub layers: Vec<Conv1dSpec>,
}

fn chain(input_channels: usize, input_len: usize, widths: [usize; 6], geometry: [(usize, usize, usize); 6]) -> ExtractorSpec {
    let mut cin = input_channels;
    let layers = widths
        .iter()
        .zip(geometry)
        .map(|(&w, (f, s, p))| {
            let l = Conv1dSpec::new(cin, w, f, s, p);
            cin = w;
            l
        })
        .collect();
    ExtractorSpec {
        input_channels,
        input_len,
        layers,
    }
}

const EEG_GEOMETRY: [(usize, usize, usize); 6] = [(9, 4, 0), (3, 1, 0), (3, 1, 0), (9, 4, 0), (3, 1, 0), (3, 1, 0)];
const NIRS_GEOMETRY: [(usize, usize, usize); 6] = [(5, 2, 0), (3, 1, 0), (3, 1, 0), (3, 1, 0), (3, 1, 0), (3, 1, 0)];

fn scaled(widths: [usize; 6], divisor: usize) -> [usize; 6] {
    widths.map(|w| (w / divisor.max(1)).max(1))
}

impl ExtractorSpec {
    /// 30×600 → 120 with hidden widths divided by `width_divisor`.
    pub fn eeg(width_divisor: usize) -> Self {
        chain(EEG_CHANNELS, EEG_SAMPLES, scaled([60, 60, 60, 120, 120, 120], width_divisor), EEG_GEOMETRY)
    }

    /// 36×30 → 144 with hidden widths divided by `width_divisor`.
    pub fn nirs(width_divisor: usize) -> Self {
        chain(NIRS_CHANNELS, NIRS_SAMPLES, scaled([72, 72, 72, 144, 144, 144], width_divisor), NIRS_GEOMETRY)
    }

    /// EEG geometry at one sixth of every width (input included) on 128
    /// samples, the shortest convenient length the stride-4 layers accept.
    pub fn tiny_eeg() -> Self {
        chain(EEG_CHANNELS / 6, 128, scaled([60, 60, 60, 120, 120, 120], 6), EEG_GEOMETRY)
    }

    pub fn tiny_nirs() -> Self {
        chain(NIRS_CHANNELS / 6, NIRS_SAMPLES, scaled([72, 72, 72, 144, 144, 144], 6), NIRS_GEOMETRY)
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.out_channels)
    }

    /// Time length after each conv layer for an input of `len` samples.
    pub fn output_lens(&self, len: usize, prefix: &str) -> Result<Vec<usize>> {
        let mut cur = len;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.checked_output_len(cur, &format!("{prefix}.conv{}", i + 1))?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let mut cin = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != cin {
                return Err(Error::Shape(format!(
                    "{prefix}.conv{} takes {} channels but receives {cin}",
                    i + 1,
                    l.in_channels
                )));
            }
            cin = l.out_channels;
        }
        self.output_lens(self.input_len, prefix).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Extractor, Linear(f→f/2), ReLU, Linear(f/2→2).
    Single(Modality),
    /// Three extractors, a fusion layer and a single Linear(O→2).
    Fused(FusionSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub eeg: ExtractorSpec,
    pub nirs: ExtractorSpec,
    pub kind: ModelKind,
    /// Normalize LF outputs too (TF and PF are always normalized).
    #[serde(default)]
    pub l2_linear: bool,
}

impl Topology {
    pub fn single(eeg: ExtractorSpec, nirs: ExtractorSpec, modality: Modality) -> Self {
        Topology {
            eeg,
            nirs,
            kind: ModelKind::Single(modality),
            l2_linear: false,
        }
    }

    /// Fused topology; the spec's feature dims are overwritten with the
    /// extractor output lengths.
    pub fn fused(eeg: ExtractorSpec, nirs: ExtractorSpec, mut spec: FusionSpec) -> Self {
        spec.dims = [eeg.feature_dim(), nirs.feature_dim(), nirs.feature_dim()];
        Topology {
            eeg,
            nirs,
            kind: ModelKind::Fused(spec),
            l2_linear: false,
        }
    }

    pub fn extractor(&self, m: Modality) -> &ExtractorSpec {
        match m {
            Modality::Eeg => &self.eeg,
            _ => &self.nirs,
        }
    }

    fn modalities(&self) -> Vec<Modality> {
        match &self.kind {
            ModelKind::Single(m) => vec![*m],
            ModelKind::Fused(_) => Modality::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eeg.validate("eeg")?;
        self.nirs.validate("nirs")?;
        if let ModelKind::Fused(spec) = &self.kind {
            spec.validate()?;
            let expect = [self.eeg.feature_dim(), self.nirs.feature_dim(), self.nirs.feature_dim()];
            if spec.dims != expect {
                return Err(Error::Shape(format!(
                    "fusion dims {:?} do not match extractor features {expect:?}",
                    spec.dims
                )));
            }
        }
        Ok(())
    }

    fn normalizes(&self) -> bool {
        match &self.kind {
            ModelKind::Single(_) => false,
            ModelKind::Fused(s) => s.kind != FusionKind::Lf || self.l2_linear,
        }
    }

    /// Learnable parameter count, without allocating anything.
    pub fn param_count(&self) -> u128 {
        let mut n: u128 = 0;
        for m in self.modalities() {
            for l in &self.extractor(m).layers {
                let out = l.out_channels as u128;
                n += out * (l.in_channels * l.filter) as u128 + 3 * out;
            }
        }
        n + match &self.kind {
            ModelKind::Single(m) => {
                let f = self.extractor(*m).feature_dim() as u128;
                let h = (f / 2).max(1);
                f * h + h + h * CLASSES as u128 + CLASSES as u128
            }
            ModelKind::Fused(spec) => param_count(spec) + (spec.output_dim as u128 + 1) * CLASSES as u128,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ModelKind::Single(m) => m.name().to_string(),
            ModelKind::Fused(s) => match s.kind {
                FusionKind::Lf => "lf".into(),
                FusionKind::Tf => "tf".into(),
                FusionKind::Pf => format!("pf{}", s.order),
            },
        }
    }
}

/// A named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Named {
    pub name: String,
    pub value: Tensor,
}

/// One batch of segments, `[N, C, T]` per modality.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub eeg: Tensor,
    pub oxy: Tensor,
    pub deoxy: Tensor,
}

impl Inputs {
    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Eeg => &self.eeg,
            Modality::Oxy => &self.oxy,
            Modality::Deoxy => &self.deoxy,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.eeg.shape().first().copied().unwrap_or(0)
    }
}

/// Batch statistics of one train-mode BatchNorm call, keyed by the buffer
/// index of its running mean (the running variance follows it).
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub buffer: usize,
    pub stats: BatchStats,
}

/// Assembled network with its learned parameters and BatchNorm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    topology: Topology,
    params: Vec<Named>,
    buffers: Vec<Named>,
}

fn uniform_fan(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

impl ModelGraph {
    /// Builds and initializes a network from `seed`.
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let push = |v: &mut Vec<Named>, name: String, value: Tensor| v.push(Named { name, value });
        for m in topology.modalities() {
            let ex = topology.extractor(m);
            for (i, l) in ex.layers.iter().enumerate() {
                let p = format!("{}.conv{}", m.name(), i + 1);
                let fan = l.in_channels * l.filter;
                push(&mut params, format!("{p}.weight"), uniform_fan(&l.weight_shape(), fan, &mut rng));
                push(&mut params, format!("{p}.bias"), uniform_fan(&[l.out_channels], fan, &mut rng));
                let b = format!("{}.bn{}", m.name(), i + 1);
                push(&mut params, format!("{b}.gamma"), Tensor::ones(&[l.out_channels]));
                push(&mut params, format!("{b}.beta"), Tensor::zeros(&[l.out_channels]));
                push(&mut buffers, format!("{b}.running_mean"), Tensor::zeros(&[l.out_channels]));
                push(&mut buffers, format!("{b}.running_var"), Tensor::ones(&[l.out_channels]));
            }
        }
        match &topology.kind {
            ModelKind::Single(m) => {
                let f = topology.extractor(*m).feature_dim();
                let h = (f / 2).max(1);
                push(&mut params, "head.fc1.weight".into(), uniform_fan(&[f, h], f, &mut rng));
                push(&mut params, "head.fc1.bias".into(), uniform_fan(&[h], f, &mut rng));
                push(&mut params, "head.fc2.weight".into(), uniform_fan(&[h, CLASSES], h, &mut rng));
                push(&mut params, "head.fc2.bias".into(), uniform_fan(&[CLASSES], h, &mut rng));
            }
            ModelKind::Fused(spec) => {
                let fp = FusionParams::init(spec, &mut rng)?;
                for (name, t) in fp.names().into_iter().zip(fp.into_tensors()) {
                    push(&mut params, format!("fusion.{name}"), t);
                }
                let o = spec.output_dim;
                push(&mut params, "head.weight".into(), uniform_fan(&[o, CLASSES], o, &mut rng));
                push(&mut params, "head.bias".into(), uniform_fan(&[CLASSES], o, &mut rng));
            }
        }
        Ok(ModelGraph {
            topology,
            params,
            buffers,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &[Named] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|n| n.name == name).map(|n| &n.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|n| n.value.len()).sum()
    }

    /// Learned fusion parameters, for fused models.
    pub fn fusion_params(&self) -> Option<FusionParams> {
        let ModelKind::Fused(spec) = &self.topology.kind else {
            return None;
        };
        let tensors = self
            .params
            .iter()
            .filter(|n| n.name.starts_with("fusion."))
            .map(|n| n.value.clone())
            .collect();
        FusionParams::new(spec.clone(), tensors).ok()
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|n| tape.param(n.value.clone())).collect()
    }

    /// Records the network on `tape` using `vars` (one per parameter, in
    /// [`params`](Self::params) order). Returns `[N, 2]` logits and the
    /// BatchNorm statistics to fold in after a train-mode step.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &Inputs, mode: Mode) -> Result<(Var, Vec<BnUpdate>)> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let mut cursor = 0;
        let mut updates = Vec::new();
        let mut features = Vec::new();
        for m in self.topology.modalities() {
            let ex = self.topology.extractor(m);
            let x = inputs.get(m);
            let expect = [ex.input_channels, ex.input_len];
            if x.order() != 3 || x.shape()[1..] != expect {
                return Err(Error::Shape(format!(
                    "{} input {:?}, expected [N, {}, {}]",
                    m.name(),
                    x.shape(),
                    expect[0],
                    expect[1]
                )));
            }
            let mut h = tape.constant(x.clone());
            for (i, l) in ex.layers.iter().enumerate() {
                let (w, b, g, beta) = (vars[cursor], vars[cursor + 1], vars[cursor + 2], vars[cursor + 3]);
                cursor += 4;
                let buf = self.buffer_index(&format!("{}.bn{}.running_mean", m.name(), i + 1));
                h = tape.conv1d(h, w, b, l)?;
                h = match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batchnorm_train(h, g, beta, BN_EPSILON)?;
                        updates.push(BnUpdate { buffer: buf, stats });
                        y
                    }
                    Mode::Eval => tape.batchnorm_eval(
                        h,
                        g,
                        beta,
                        &self.buffers[buf].value,
                        &self.buffers[buf + 1].value,
                        BN_EPSILON,
                    )?,
                };
                h = tape.relu(h);
            }
            features.push(tape.global_avgpool(h)?);
        }
        let rest = &vars[cursor..];
        let logits = match &self.topology.kind {
            ModelKind::Single(_) => {
                let h = tape.linear(features[0], rest[0], rest[1])?;
                let h = tape.relu(h);
                tape.linear(h, rest[2], rest[3])?
            }
            ModelKind::Fused(spec) => {
                let nf = rest.len() - 2;
                let mut y = fusion::forward(tape, spec, &rest[..nf], [features[0], features[1], features[2]])?;
                if self.topology.normalizes() {
                    y = tape.l2_normalize_rows(y, L2_EPSILON)?;
                }
                tape.linear(y, rest[nf], rest[nf + 1])?
            }
        };
        Ok((logits, updates))
    }

    fn buffer_index(&self, name: &str) -> usize {
        self.buffers
            .iter()
            .position(|n| n.name == name)
            .expect("buffers follow the topology")
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let (head, tail) = self.buffers.split_at_mut(u.buffer + 1);
            u.stats
                .fold_into_tensors(&mut head[u.buffer].value, &mut tail[0].value, BN_MOMENTUM);
        }
    }

    /// Eval-mode logits, `[N, 2]`.
    pub fn logits(&self, inputs: &Inputs) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|n| tape.constant(n.value.clone())).collect();
        let (logits, _) = self.forward(&mut tape, &vars, inputs, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode class probabilities, `[N, 2]`.
    pub fn predict(&self, inputs: &Inputs) -> Result<Tensor> {
        nn::softmax(&self.logits(inputs)?)
    }

    /// Writes `manifest.json` plus one binary tensor file per parameter and
    /// buffer into `dir`. Each file is written to a temporary name and
    /// renamed; the manifest goes last.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let entry = |n: &Named| CheckpointEntry {
            name: n.name.clone(),
            shape: n.value.shape().to_vec(),
            file: format!("{}.bin", n.name),
        };
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            topology: self.topology.clone(),
            params: self.params.iter().map(entry).collect(),
            buffers: self.buffers.iter().map(entry).collect(),
        };
        for n in self.params.iter().chain(&self.buffers) {
            let mut bytes = Vec::with_capacity(8 * n.value.len() + 64);
            n.value.write_to(&mut bytes).map_err(|e| Error::io(dir, e))?;
            write_atomic(&dir.join(format!("{}.bin", n.name)), &bytes)?;
        }
        let text = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }

    /// Reads a checkpoint written by [`save`](Self::save), checking every
    /// tensor against the topology. All problems are reported together.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(vec![format!("unsupported checkpoint format {:?}", manifest.format)]));
        }
        let mut model = ModelGraph::new(manifest.topology, 0)?;
        let mut errs = Vec::new();
        for (slots, entries, what) in [
            (&mut model.params, &manifest.params, "parameter"),
            (&mut model.buffers, &manifest.buffers, "buffer"),
        ] {
            if slots.len() != entries.len() {
                errs.push(format!("expected {} {what}s, manifest lists {}", slots.len(), entries.len()));
            }
            for slot in slots.iter_mut() {
                let Some(e) = entries.iter().find(|e| e.name == slot.name) else {
                    errs.push(format!("missing {what} {}", slot.name));
                    continue;
                };
                match Tensor::load(dir.join(&e.file)) {
                    Ok(t) if t.shape() == slot.value.shape() => slot.value = t,
                    Ok(t) => errs.push(format!(
                        "{}: shape {:?}, expected {:?}",
                        slot.name,
                        t.shape(),
                        slot.value.shape()
                    )),
                    Err(err) => errs.push(format!("{}: {err}", slot.name)),
                }
            }
        }
        match errs.is_empty() {
            true => Ok(model),
            false => Err(Error::Validation(errs)),
        }
    }
}

const CHECKPOINT_FORMAT: &str = "polyfusion-checkpoint-1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    topology: Topology,
    params: Vec<CheckpointEntry>,
    buffers: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
