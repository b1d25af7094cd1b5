//! End-to-end self-checks: path equivalences, gradients, parameter counts
//! and extractor shapes.
//!
//! [`run`] executes every check whose name contains the filter and returns
//! one [`CheckResult`] per check. Checks never panic; failures and errors
//! are reported in the result.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::grad_check;
use crate::error::{Error, Result};
use crate::fusion::{self, blocks, param_count, FusionKind, FusionParams, FusionPath, FusionSpec};
use crate::models::{write_atomic, ExtractorSpec, Inputs, Modality, ModelGraph, Topology};
use crate::nn::{Conv1dSpec, Mode, BN_EPSILON};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(Option<&Path>) -> Result<(bool, String)>;

/// Names of all checks, in execution order.
pub const CHECKS: [&str; 7] = [
    "linear-blocks",
    "quadratic-blocks",
    "reconstruction",
    "fixtures",
    "gradients",
    "params",
    "shapes",
];

fn lookup(name: &str) -> CheckFn {
    match name {
        "linear-blocks" => |_| linear_blocks(100),
        "quadratic-blocks" => |_| quadratic_blocks(100),
        "reconstruction" => |_| reconstruction_sweep(),
        "fixtures" => fixtures_check,
        "gradients" => |_| gradients(Some(24)),
        "params" => |_| params_check(200),
        "shapes" => |_| shapes(),
        _ => unreachable!("unknown check {name}"),
    }
}

/// Runs the checks whose name contains `filter` (all when `None`).
/// `fixtures` points the fixture check at a directory written by
/// [`write_fixtures`]; without it that check uses freshly generated ones.
pub fn run(filter: Option<&str>, fixtures: Option<&Path>) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|n| filter.is_none_or(|f| n.contains(f)))
        .map(|&name| {
            let (passed, detail) = match lookup(name)(fixtures) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
            }
        })
        .collect()
}

fn rel(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_rel_diff(b)
}

/// Random vector of multiples of 1/16 in [-4, 4]: every sum and product in
/// the checks below is then exact in binary floating point.
fn dyadic(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(-64i32..=64) as f64 / 16.0).collect())
}

fn dyadic_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let d = dyadic(t.len(), rng);
    d.reshape(t.shape()).unwrap()
}

fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    [rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max)]
}

/// Concatenated LF against the three-block sum: bit-identical on dyadic
/// data, within 1e-12 on continuous data.
pub fn linear_blocks(instances: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut exact_failures = 0;
    for _ in 0..instances {
        let dims = random_dims(&mut rng, 8);
        let o = rng.random_range(1..=6);
        let spec = FusionSpec::linear(dims, o);
        let p = FusionParams::init(&spec, &mut rng)?;
        let z = dims.map(|d| Tensor::uniform(&[d], 1.0, &mut rng));
        let a = fusion::fuse_linear([&z[0], &z[1], &z[2]], &p)?;
        let b = blocks::linear_block_sum([&z[0], &z[1], &z[2]], &p)?;
        worst = worst.max(rel(&a, &b)?);

        let pd = FusionParams::new(spec, vec![dyadic_like(&p.tensors()[0], &mut rng)])?;
        let zd = dims.map(|d| dyadic(d, &mut rng));
        let a = fusion::fuse_linear([&zd[0], &zd[1], &zd[2]], &pd)?;
        let b = blocks::linear_block_sum([&zd[0], &zd[1], &zd[2]], &pd)?;
        if a != b {
            exact_failures += 1;
        }
    }
    Ok((
        exact_failures == 0 && worst < 1e-12,
        format!("{instances} instances, {exact_failures} inexact on exact data, max rel diff {worst:.2e}"),
    ))
}

/// Second-order PF on the full path against the nine-block expansion.
pub fn quadratic_blocks(instances: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let dims = random_dims(&mut rng, 5);
        let o = rng.random_range(1..=4);
        let spec = FusionSpec::polynomial(dims, o, 2, 1, false, FusionPath::Full);
        let p = FusionParams::init(&spec, &mut rng)?;
        let z = dims.map(|d| Tensor::uniform(&[d], 1.0, &mut rng));
        let a = fusion::fuse_polynomial([&z[0], &z[1], &z[2]], &p)?;
        let b = blocks::quadratic_block_sum([&z[0], &z[1], &z[2]], &p)?;
        worst = worst.max(rel(&a, &b)?);
    }
    Ok((worst < 1e-10, format!("{instances} instances, max rel diff {worst:.2e}")))
}

/// Splits `n` into three positive feature lengths.
fn split3(n: usize) -> [usize; 3] {
    let a = n / 3 + (n % 3 > 0) as usize;
    let b = n / 3 + (n % 3 > 1) as usize;
    [a, b, n - a - b]
}

/// Factorized forward against the full path on the reconstructed weight.
/// Returns the worst relative difference.
pub fn reconstruction_case(spec: &FusionSpec, rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = FusionParams::init(spec, rng)?;
    let full = fusion::to_full(&p)?;
    let z = spec.dims.map(|d| Tensor::uniform(&[d], 1.0, rng));
    let a = fusion::fuse([&z[0], &z[1], &z[2]], &p)?;
    let b = fusion::fuse([&z[0], &z[1], &z[2]], &full)?;
    rel(&a, &b)
}

/// PF with order 1–3 and concatenated length 3–6 at every rank up to
/// `n^(p-1)`, symmetric and not; TF with all dims up to 4 and ranks up to
/// the product of the two smaller dims, plus a few larger shapes.
pub fn reconstruction_sweep() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for p in 1..=3 {
        for n in 3..=6usize {
            let full_rank = n.pow(p as u32 - 1).max(1);
            for r in 1..=full_rank {
                for symmetric in [false, true] {
                    let o = 1 + (r + n) % 3;
                    let spec = FusionSpec::polynomial(split3(n), o, p, r, symmetric, FusionPath::Factorized);
                    worst = worst.max(reconstruction_case(&spec, &mut rng)?);
                    cases += 1;
                }
            }
        }
    }
    let mut tf_shapes: Vec<[usize; 3]> = Vec::new();
    for a in 1..=4 {
        for b in 1..=4 {
            for c in 1..=4 {
                tf_shapes.push([a, b, c]);
            }
        }
    }
    tf_shapes.extend([[6, 6, 6], [5, 6, 4], [6, 1, 6]]);
    for dims in tf_shapes {
        let mut sorted = dims;
        sorted.sort();
        let full_rank = sorted[0] * sorted[1];
        for r in 1..=full_rank {
            let o = 1 + r % 3;
            let spec = FusionSpec::tensor(dims, o, r, FusionPath::Factorized);
            worst = worst.max(reconstruction_case(&spec, &mut rng)?);
            cases += 1;
        }
    }
    Ok((worst < 1e-8, format!("{cases} cases, max rel diff {worst:.2e}")))
}

// ---------------------------------------------------------------------------
// Fixtures

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureManifest {
    fixtures: Vec<FixtureEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureEntry {
    name: String,
    spec: FusionSpec,
    /// Factor and mixing files, in layout order.
    params: Vec<String>,
    /// Reference dense weight.
    full: String,
    /// Input features and the expected output.
    inputs: [String; 3],
    output: String,
}

fn fixture_specs() -> Vec<(&'static str, FusionSpec)> {
    vec![
        ("tf", FusionSpec::tensor([4, 4, 4], 3, 48, FusionPath::Factorized)),
        ("pf2", FusionSpec::polynomial([2, 2, 2], 2, 2, 36, false, FusionPath::Factorized)),
        ("pf3-sym", FusionSpec::polynomial([2, 2, 2], 3, 3, 16, true, FusionPath::Factorized)),
    ]
}

fn save(dir: &Path, rel: &str, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    t.write_to(&mut bytes).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(rel), &bytes)
}

/// Writes CP factors, their reconstructed dense weights and a reference
/// input/output pair for a few layers into `dir`.
pub fn write_fixtures(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut entries = Vec::new();
    for (name, spec) in fixture_specs() {
        let p = FusionParams::init(&spec, &mut rng)?;
        let mut params = Vec::new();
        for (pn, t) in p.names().iter().zip(p.tensors()) {
            let rel = format!("{name}.{pn}.bin");
            save(dir, &rel, t)?;
            params.push(rel);
        }
        let full = fusion::reconstruct_full(&p)?;
        save(dir, &format!("{name}.full.bin"), &full)?;
        let z = spec.dims.map(|d| Tensor::uniform(&[d], 1.0, &mut rng));
        let y = fusion::fuse([&z[0], &z[1], &z[2]], &p)?;
        let inputs = [0, 1, 2].map(|k| format!("{name}.z{}.bin", k + 1));
        for (rel, t) in inputs.iter().zip(&z) {
            save(dir, rel, t)?;
        }
        save(dir, &format!("{name}.output.bin"), &y)?;
        entries.push(FixtureEntry {
            name: name.into(),
            spec,
            params,
            full: format!("{name}.full.bin"),
            inputs,
            output: format!("{name}.output.bin"),
        });
    }
    let text = serde_json::to_string_pretty(&FixtureManifest { fixtures: entries })?;
    write_atomic(&dir.join("fixtures.json"), text.as_bytes())
}

/// Reconstructs each stored factorization and compares it with the stored
/// dense weight, and both paths with the stored output.
fn fixtures_check(dir: Option<&Path>) -> Result<(bool, String)> {
    let tmp;
    let dir = match dir {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir().map_err(|e| Error::io("temporary directory", e))?;
            write_fixtures(tmp.path())?;
            tmp.path()
        }
    };
    let text = std::fs::read_to_string(dir.join("fixtures.json")).map_err(|e| Error::io(dir.join("fixtures.json"), e))?;
    let manifest: FixtureManifest = serde_json::from_str(&text)?;
    let mut failures = Vec::new();
    for f in &manifest.fixtures {
        let outcome = (|| -> Result<f64> {
            let tensors = f.params.iter().map(|r| Tensor::load(dir.join(r))).collect::<Result<Vec<_>>>()?;
            let p = FusionParams::new(f.spec.clone(), tensors)?;
            let full = Tensor::load(dir.join(&f.full))?;
            let z = f.inputs.iter().map(|r| Tensor::load(dir.join(r))).collect::<Result<Vec<_>>>()?;
            let y = Tensor::load(dir.join(&f.output))?;
            let dense = FusionParams::new(FusionSpec { path: FusionPath::Full, ..f.spec.clone() }, vec![full.clone()])?;
            let zs = [&z[0], &z[1], &z[2]];
            Ok(rel(&fusion::reconstruct_full(&p)?, &full)?
                .max(rel(&fusion::fuse(zs, &p)?, &y)?)
                .max(rel(&fusion::fuse(zs, &dense)?, &y)?))
        })();
        match outcome {
            Ok(d) if d < 1e-8 => {}
            Ok(d) => failures.push(format!("{}: max rel diff {d:.2e}", f.name)),
            Err(e) => failures.push(format!("{}: {e}", f.name)),
        }
    }
    let n = manifest.fixtures.len();
    Ok(match failures.is_empty() {
        true => (true, format!("{n} stored factorizations reproduce their dense weights")),
        false => (false, failures.join("; ")),
    })
}

// ---------------------------------------------------------------------------
// Gradients

fn probe_sum(t: &mut crate::autodiff::Tape, y: crate::autodiff::Var, probe: &Tensor) -> Result<crate::autodiff::Var> {
    let p = t.constant(probe.clone());
    let yp = t.mul(y, p)?;
    Ok(t.sum(yp))
}

fn nudged(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = if *v < 0.0 { -1e-3 } else { 1e-3 };
        }
    }
    t
}

/// Finite-difference checks of every primitive and of tiny clones of all
/// model kinds. Returns the labelled worst errors.
pub fn gradient_errors(max_coords: Option<usize>) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut out = Vec::new();
    let eps = 1e-6;
    let mut record = |name: &str, r: crate::autodiff::GradCheck| out.push((name.to_string(), r.max_error));

    let probe = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let mut p = vec![Tensor::uniform(&[3, 4], 1.0, &mut rng), Tensor::uniform(&[3, 4], 1.0, &mut rng)];
    record("add/sub/mul/scale", grad_check(|t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.mul(b, v[1])?;
        let d = t.scale(c, 1.5);
        probe_sum(t, d, &probe)
    }, &mut p, eps, max_coords)?);

    let mut p = vec![Tensor::uniform(&[2, 3, 4], 1.0, &mut rng), Tensor::uniform(&[4, 3, 2], 1.0, &mut rng)];
    let probe2 = Tensor::uniform(&[2, 2], 1.0, &mut rng);
    record("contract/reshape", grad_check(|t, v| {
        let c = t.contract(v[0], v[1], &[1, 2], &[1, 0])?;
        let r = t.reshape(c, &[4])?;
        let r = t.reshape(r, &[2, 2])?;
        probe_sum(t, r, &probe2)
    }, &mut p, eps, max_coords)?);

    let mut p = vec![Tensor::uniform(&[3, 2], 1.0, &mut rng), Tensor::uniform(&[3, 4], 1.0, &mut rng), Tensor::uniform(&[10], 1.0, &mut rng)];
    let probe3 = Tensor::uniform(&[3, 10], 1.0, &mut rng);
    record("outer_rows/concat_cols/add_row", grad_check(|t, v| {
        let o = t.outer_rows(v[0], v[1])?;
        let c = t.concat_cols(&[o, v[0]])?;
        let c = t.add_row(c, v[2])?;
        probe_sum(t, c, &probe3)
    }, &mut p, eps, max_coords)?);

    let spec = Conv1dSpec::new(2, 3, 3, 2, 1);
    let mut p = vec![
        Tensor::uniform(&[2, 2, 9], 1.0, &mut rng),
        Tensor::uniform(&spec.weight_shape(), 1.0, &mut rng),
        Tensor::uniform(&[3], 1.0, &mut rng),
    ];
    let probe4 = Tensor::uniform(&[2, 3, 5], 1.0, &mut rng);
    record("conv1d", grad_check(|t, v| {
        let y = t.conv1d(v[0], v[1], v[2], &spec)?;
        let y2 = t.mul(y, y)?;
        probe_sum(t, y2, &probe4)
    }, &mut p, eps, max_coords)?);

    let mut p = vec![Tensor::uniform(&[3, 2, 4], 1.0, &mut rng), Tensor::uniform(&[2], 1.0, &mut rng), Tensor::uniform(&[2], 1.0, &mut rng)];
    let probe5 = Tensor::uniform(&[3, 2, 4], 1.0, &mut rng);
    record("batchnorm (train)", grad_check(|t, v| {
        let (y, _) = t.batchnorm_train(v[0], v[1], v[2], BN_EPSILON)?;
        let y2 = t.mul(y, y)?;
        probe_sum(t, y2, &probe5)
    }, &mut p, eps, max_coords)?);
    let (rm, rv) = (Tensor::vector(vec![0.2, -0.1]), Tensor::vector(vec![0.7, 1.9]));
    record("batchnorm (eval)", grad_check(|t, v| {
        let y = t.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, BN_EPSILON)?;
        probe_sum(t, y, &probe5)
    }, &mut p, eps, max_coords)?);

    let mut p = vec![nudged(Tensor::uniform(&[4, 3, 5], 1.0, &mut rng)), Tensor::uniform(&[3, 2], 1.0, &mut rng), Tensor::uniform(&[2], 1.0, &mut rng)];
    let labels = [1, 0, 0, 1];
    record("relu/avgpool/linear/cross-entropy", grad_check(|t, v| {
        let h = t.relu(v[0]);
        let h = t.global_avgpool(h)?;
        let y = t.linear(h, v[1], v[2])?;
        t.softmax_crossentropy(y, &labels)
    }, &mut p, eps, max_coords)?);

    let mut p = vec![Tensor::uniform(&[3, 5], 1.0, &mut rng)];
    let probe6 = Tensor::uniform(&[3, 5], 1.0, &mut rng);
    record("l2_normalize", grad_check(|t, v| {
        let y = t.l2_normalize_rows(v[0], 1e-12)?;
        probe_sum(t, y, &probe6)
    }, &mut p, eps, max_coords)?);

    for spec in [
        FusionSpec::linear([2, 3, 2], 3),
        FusionSpec::tensor([2, 3, 2], 3, 4, FusionPath::Full),
        FusionSpec::tensor([2, 3, 2], 3, 4, FusionPath::Factorized),
        FusionSpec::polynomial([2, 3, 2], 3, 2, 4, false, FusionPath::Full),
        FusionSpec::polynomial([2, 3, 2], 3, 3, 4, false, FusionPath::Factorized),
        FusionSpec::polynomial([2, 3, 2], 3, 3, 4, true, FusionPath::Factorized),
    ] {
        let mut p = FusionParams::init(&spec, &mut rng)?.into_tensors();
        let np = p.len();
        for d in spec.dims {
            p.push(Tensor::uniform(&[3, d], 1.0, &mut rng));
        }
        let probe7 = Tensor::uniform(&[3, 3], 1.0, &mut rng);
        let label = format!("fusion {:?} {:?} p={} sym={}", spec.kind, spec.path, spec.order, spec.symmetric);
        let r = grad_check(|t, v| {
            let y = fusion::forward(t, &spec, &v[..np], [v[np], v[np + 1], v[np + 2]])?;
            probe_sum(t, y, &probe7)
        }, &mut p, eps, max_coords)?;
        record(&label, r);
    }

    for (label, topology) in tiny_topologies() {
        let model = ModelGraph::new(topology.clone(), 5)?;
        let inputs = tiny_inputs(&topology, 3, &mut rng);
        let labels = [0, 1, 1];
        let mut p: Vec<Tensor> = model.params().iter().map(|n| n.value.clone()).collect();
        let r = grad_check(|t, v| {
            let (logits, _) = model.forward(t, v, &inputs, Mode::Train)?;
            t.softmax_crossentropy(logits, &labels)
        }, &mut p, eps, max_coords)?;
        record(&format!("model {label}"), r);
    }
    Ok(out)
}

/// One tiny clone of each model kind.
pub fn tiny_topologies() -> Vec<(String, Topology)> {
    let (e, n) = (ExtractorSpec::tiny_eeg(), ExtractorSpec::tiny_nirs());
    let mut out: Vec<(String, Topology)> = Modality::ALL
        .iter()
        .map(|&m| (m.name().to_string(), Topology::single(e.clone(), n.clone(), m)))
        .collect();
    for (label, spec) in [
        ("lf", FusionSpec::linear([0; 3], 8)),
        ("tf", FusionSpec::tensor([0; 3], 8, 4, FusionPath::Factorized)),
        ("pf", FusionSpec::polynomial([0; 3], 8, 3, 4, true, FusionPath::Factorized)),
    ] {
        out.push((label.to_string(), Topology::fused(e.clone(), n.clone(), spec)));
    }
    out
}

pub fn tiny_inputs(t: &Topology, n: usize, rng: &mut ChaCha8Rng) -> Inputs {
    Inputs {
        eeg: Tensor::uniform(&[n, t.eeg.input_channels, t.eeg.input_len], 1.0, rng),
        oxy: Tensor::uniform(&[n, t.nirs.input_channels, t.nirs.input_len], 1.0, rng),
        deoxy: Tensor::uniform(&[n, t.nirs.input_channels, t.nirs.input_len], 1.0, rng),
    }
}

fn gradients(max_coords: Option<usize>) -> Result<(bool, String)> {
    let errs = gradient_errors(max_coords)?;
    let (worst_name, worst) = errs
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    Ok((
        worst < 1e-4,
        format!("{} checks, worst {worst:.2e} ({worst_name})", errs.len()),
    ))
}

// ---------------------------------------------------------------------------
// Parameter counts and shapes

/// Random small fusion spec.
pub fn random_spec(rng: &mut ChaCha8Rng) -> FusionSpec {
    let dims = random_dims(rng, 6);
    let o = rng.random_range(1..=5);
    let r = rng.random_range(1..=6);
    let path = if rng.random::<bool>() { FusionPath::Full } else { FusionPath::Factorized };
    let mut spec = match rng.random_range(0..3) {
        0 => FusionSpec::linear(dims, o),
        1 => FusionSpec::tensor(dims, o, r, path),
        _ => FusionSpec::polynomial(dims, o, rng.random_range(1..=3), r, rng.random::<bool>(), path),
    };
    spec.augment_one = spec.kind != FusionKind::Lf && rng.random_range(0..4) == 0;
    spec
}

fn params_check(instances: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = Vec::new();
    for _ in 0..instances {
        let spec = random_spec(&mut rng);
        let allocated = FusionParams::init(&spec, &mut rng)?.allocated() as u128;
        if allocated != param_count(&spec) {
            mismatches.push(format!("{spec:?}: {} vs {allocated}", param_count(&spec)));
        }
    }
    let dims = [120, 144, 144];
    let expected: [(FusionSpec, u128); 5] = [
        (FusionSpec::linear(dims, 128), 52_224),
        (FusionSpec::tensor(dims, 128, 16, FusionPath::Full), 318_504_960),
        (FusionSpec::tensor(dims, 128, 16, FusionPath::Factorized), 835_600),
        (FusionSpec::polynomial(dims, 128, 5, 16, true, FusionPath::Factorized), 835_600),
        (FusionSpec::polynomial(dims, 128, 5, 16, false, FusionPath::Factorized), 4_177_936),
    ];
    for (spec, want) in expected {
        let got = param_count(&spec);
        if got != want {
            mismatches.push(format!("{:?} {:?}: {got}, expected {want}", spec.kind, spec.path));
        }
    }
    Ok(match mismatches.is_empty() {
        true => (true, format!("{instances} random specs match allocation; reference dims match")),
        false => (false, mismatches.join("; ")),
    })
}

fn shapes() -> Result<(bool, String)> {
    let eeg = ExtractorSpec::eeg(1).output_lens(600, "eeg")?;
    let nirs = ExtractorSpec::nirs(1).output_lens(30, "nirs")?;
    let ok = eeg == [148, 146, 144, 34, 32, 30]
        && nirs == [13, 11, 9, 7, 5, 3]
        && ExtractorSpec::eeg(1).feature_dim() == 120
        && ExtractorSpec::nirs(1).feature_dim() == 144;
    Ok((ok, format!("eeg time {eeg:?} → 120, nirs time {nirs:?} → 144")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for r in run(Some("blocks"), None).into_iter().chain(run(Some("params"), None)).chain(run(Some("shapes"), None)) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let names: Vec<String> = run(Some("linear"), None).into_iter().map(|r| r.name).collect();
        assert_eq!(names, vec!["linear-blocks"]);
    }

    #[test]
    fn corrupted_factor_fails_fixture_check() {
        let dir = tempfile::tempdir().unwrap();
        write_fixtures(dir.path()).unwrap();
        assert!(fixtures_check(Some(dir.path())).unwrap().0);
        let path = dir.path().join("pf2.factor.1.bin");
        let mut t = Tensor::load(&path).unwrap();
        t.data_mut()[5] += 0.25;
        t.save(&path).unwrap();
        let (ok, detail) = fixtures_check(Some(dir.path())).unwrap();
        assert!(!ok);
        assert!(detail.contains("pf2"), "{detail}");
    }

    #[test]
    fn split3_partitions() {
        for n in 3..10 {
            let s = split3(n);
            assert_eq!(s.iter().sum::<usize>(), n);
            assert!(s.iter().all(|&d| d > 0));
        }
    }
}
