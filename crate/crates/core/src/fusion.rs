//! Linear, tensor and polynomial fusion of three feature vectors.
//!
//! Every fusion kind maps `(z¹, z², z³)` of lengths `(A, B, C)` to a fused
//! vector of length `O`:
//!
//! * **LF**: `y = [z¹ z² z³] · W` with `W` of shape `[A+B+C, O]`.
//! * **TF**: `y_o = Σ z¹_a z²_b z³_c 𝒲[a,b,c,o]`.
//! * **PF** of order `p`: the `p`-fold outer power of the concatenated vector
//!   `z = [z¹ z² z³]` contracted with a weight tensor of order `p + 1`.
//!
//! TF and PF have two interchangeable paths. The *full* path stores the
//! weight tensor densely. The *factorized* path stores CP factors `F_k` of
//! shape `[d_k, R, O]` and a mixing vector `w` of length `R`, with
//!
//! ```text
//! 𝒲[i₁,…,i_p,o] = Σ_r w[r] · F₁[i₁,r,o] ⋯ F_p[i_p,r,o]
//! y_o           = Σ_r w[r] · (zᵀF₁)[r,o] ⋯ (zᵀF_p)[r,o]
//! ```
//!
//! A symmetric PF layer stores a single factor and uses it at every position.
//!
//! [`FusionParams`] lays its tensors out as `[weight]` for LF and full paths,
//! and `[factor.0, …, factor.{m-1}, mixing]` for factorized paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Largest dense weight tensor the full path will allocate.
pub const MATERIALIZATION_LIMIT: u128 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[serde(alias = "linear")]
    Lf,
    #[serde(alias = "tensor")]
    Tf,
    #[serde(alias = "polynomial")]
    Pf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionPath {
    Full,
    Factorized,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub kind: FusionKind,
    /// Feature lengths `(A, B, C)`.
    pub dims: [usize; 3],
    pub output_dim: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default = "default_path")]
    pub path: FusionPath,
    /// Appends a constant 1 to the fused inputs so the layer also sees
    /// lower-degree terms. Off by default.
    #[serde(default)]
    pub augment_one: bool,
}

fn default_rank() -> usize {
    16
}
fn default_order() -> usize {
    3
}
fn default_path() -> FusionPath {
    FusionPath::Factorized
}

impl FusionSpec {
    pub fn linear(dims: [usize; 3], output_dim: usize) -> Self {
        FusionSpec {
            kind: FusionKind::Lf,
            dims,
            output_dim,
            rank: default_rank(),
            order: 1,
            symmetric: false,
            path: FusionPath::Full,
            augment_one: false,
        }
    }

    pub fn tensor(dims: [usize; 3], output_dim: usize, rank: usize, path: FusionPath) -> Self {
        FusionSpec {
            kind: FusionKind::Tf,
            rank,
            path,
            ..Self::linear(dims, output_dim)
        }
    }

    pub fn polynomial(dims: [usize; 3], output_dim: usize, order: usize, rank: usize, symmetric: bool, path: FusionPath) -> Self {
        FusionSpec {
            kind: FusionKind::Pf,
            order,
            rank,
            symmetric,
            path,
            ..Self::linear(dims, output_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.dims.contains(&0) {
            errs.push(format!("feature dims must be positive, got {:?}", self.dims));
        }
        if self.output_dim == 0 {
            errs.push("output_dim must be positive".to_string());
        }
        if self.kind != FusionKind::Lf && self.path == FusionPath::Factorized && self.rank == 0 {
            errs.push("rank must be positive".to_string());
        }
        if self.kind == FusionKind::Pf && self.order == 0 {
            errs.push("order must be at least 1".to_string());
        }
        match errs.is_empty() {
            true => Ok(()),
            false => Err(Error::Validation(errs)),
        }
    }

    /// `A + B + C`.
    pub fn concat_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Input lengths seen by the weights, after optional augmentation.
    fn effective_dims(&self) -> Vec<usize> {
        let aug = self.augment_one as usize;
        match self.kind {
            FusionKind::Lf => vec![self.concat_dim()],
            FusionKind::Tf => self.dims.iter().map(|d| d + aug).collect(),
            FusionKind::Pf => vec![self.concat_dim() + aug; self.order],
        }
    }

    fn is_factorized(&self) -> bool {
        self.kind != FusionKind::Lf && self.path == FusionPath::Factorized
    }

    /// Number of stored CP factors.
    fn factor_count(&self) -> usize {
        match self.kind {
            FusionKind::Lf => 0,
            FusionKind::Tf => 3,
            FusionKind::Pf if self.symmetric => 1,
            FusionKind::Pf => self.order,
        }
    }

    /// Entries in the dense weight tensor this spec describes.
    pub fn full_entries(&self) -> u128 {
        self.effective_dims()
            .iter()
            .fold(self.output_dim as u128, |acc, &d| acc.saturating_mul(d as u128))
    }

    /// Names and shapes of the learned tensors, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let dims = self.effective_dims();
        if !self.is_factorized() {
            let entries = self.full_entries();
            if entries > MATERIALIZATION_LIMIT {
                return Err(Error::MaterializationGuard {
                    entries,
                    limit: MATERIALIZATION_LIMIT,
                });
            }
            let mut shape = dims;
            if self.kind == FusionKind::Lf {
                shape = vec![self.concat_dim()];
            }
            shape.push(self.output_dim);
            return Ok(vec![("weight".to_string(), shape)]);
        }
        let mut out: Vec<(String, Vec<usize>)> = (0..self.factor_count())
            .map(|k| (format!("factor.{k}"), vec![dims[k], self.rank, self.output_dim]))
            .collect();
        out.push(("mixing".to_string(), vec![self.rank]));
        Ok(out)
    }
}

/// Exact count of learned fusion parameters for `spec`, without allocating.
pub fn param_count(spec: &FusionSpec) -> u128 {
    let n = spec.concat_dim() as u128 + if spec.kind == FusionKind::Pf { spec.augment_one as u128 } else { 0 };
    let o = spec.output_dim as u128;
    let r = spec.rank as u128;
    let p = spec.order as u32;
    match (spec.kind, spec.path) {
        (FusionKind::Lf, _) => spec.concat_dim() as u128 * o,
        (FusionKind::Tf, FusionPath::Full) => spec.full_entries(),
        (FusionKind::Tf, FusionPath::Factorized) => {
            let aug = spec.augment_one as u128;
            spec.dims.iter().map(|&d| d as u128 + aug).sum::<u128>() * r * o + r
        }
        (FusionKind::Pf, FusionPath::Full) => n.saturating_pow(p).saturating_mul(o),
        (FusionKind::Pf, FusionPath::Factorized) if spec.symmetric => n * r * o + r,
        (FusionKind::Pf, FusionPath::Factorized) => p as u128 * n * r * o + r,
    }
}

/// Learned tensors of one fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    spec: FusionSpec,
    tensors: Vec<Tensor>,
}

impl FusionParams {
    /// Wraps existing tensors after checking them against the spec layout.
    pub fn new(spec: FusionSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut errs = Vec::new();
        if shapes.len() != tensors.len() {
            errs.push(format!("expected {} tensors, got {}", shapes.len(), tensors.len()));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                errs.push(format!("{name}: expected shape {shape:?}, got {:?}", t.shape()));
            }
        }
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        Ok(FusionParams { spec, tensors })
    }

    /// Random initialization.
    ///
    /// Dense weights and LF use `±sqrt(1/fan_in)`. TF factors use
    /// `±d_k^(-1/2)`; PF factors use `±n^(-1/p)` for concatenated length `n`.
    /// The mixing vector starts at `1/R`.
    pub fn init<R: Rng + ?Sized>(spec: &FusionSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let fan_in = |shape: &[usize]| shape[..shape.len() - 1].iter().product::<usize>() as f64;
        let tensors = shapes
            .iter()
            .map(|(name, shape)| {
                if name == "mixing" {
                    Tensor::full(shape, 1.0 / spec.rank as f64)
                } else if name == "weight" {
                    Tensor::uniform(shape, fan_in(shape).recip().sqrt(), rng)
                } else {
                    let d = shape[0] as f64;
                    let bound = match spec.kind {
                        FusionKind::Pf => d.powf(-1.0 / spec.order as f64),
                        _ => d.powf(-0.5),
                    };
                    Tensor::uniform(shape, bound, rng)
                }
            })
            .collect();
        Ok(FusionParams { spec: spec.clone(), tensors })
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.spec
            .param_shapes()
            .expect("validated at construction")
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// Total stored entries.
    pub fn allocated(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Dense weight tensor of a full-path or LF layer.
    pub fn weight(&self) -> Option<&Tensor> {
        (!self.spec.is_factorized()).then(|| &self.tensors[0])
    }

    /// CP factors of a factorized layer, one per stored factor.
    pub fn factors(&self) -> &[Tensor] {
        match self.spec.is_factorized() {
            true => &self.tensors[..self.tensors.len() - 1],
            false => &[],
        }
    }

    pub fn mixing(&self) -> Option<&Tensor> {
        self.spec.is_factorized().then(|| self.tensors.last().unwrap())
    }

    /// The factor used at polynomial position `k`.
    fn factor_at(&self, k: usize) -> &Tensor {
        let f = self.factors();
        if self.spec.symmetric && self.spec.kind == FusionKind::Pf {
            &f[0]
        } else {
            &f[k]
        }
    }
}

// ---------------------------------------------------------------------------
// Single-sample forward

fn check_inputs(spec: &FusionSpec, z: [&Tensor; 3]) -> Result<()> {
    for (k, (zk, &d)) in z.iter().zip(&spec.dims).enumerate() {
        if zk.shape() != [d] {
            return Err(Error::Shape(format!(
                "modality {} feature has shape {:?}, layer expects [{d}]",
                k + 1,
                zk.shape()
            )));
        }
    }
    Ok(())
}

fn with_one(z: &Tensor, augment: bool) -> Tensor {
    match augment {
        true => tensor::concat(&[z, &Tensor::vector(vec![1.0])]).expect("order-1 inputs"),
        false => z.clone(),
    }
}

fn concatenated(spec: &FusionSpec, z: [&Tensor; 3]) -> Tensor {
    let zc = tensor::concat(&z).expect("checked order-1 inputs");
    with_one(&zc, spec.augment_one && spec.kind == FusionKind::Pf)
}

/// `y = [z¹ z² z³] · W`.
pub fn fuse_linear(z: [&Tensor; 3], params: &FusionParams) -> Result<Tensor> {
    let spec = params.spec();
    if spec.kind != FusionKind::Lf {
        return Err(Error::InvalidArgument(format!("fuse_linear given {:?} parameters", spec.kind)));
    }
    check_inputs(spec, z)?;
    let zc = tensor::concat(&z)?;
    tensor::contract(&zc, params.weight().unwrap(), &[0], &[0])
}

/// `y_o = Σ z¹_a z²_b z³_c 𝒲[a,b,c,o]`, dense or factorized per the spec.
pub fn fuse_tensor(z: [&Tensor; 3], params: &FusionParams) -> Result<Tensor> {
    let spec = params.spec();
    if spec.kind != FusionKind::Tf {
        return Err(Error::InvalidArgument(format!("fuse_tensor given {:?} parameters", spec.kind)));
    }
    check_inputs(spec, z)?;
    let zs: Vec<Tensor> = z.iter().map(|t| with_one(t, spec.augment_one)).collect();
    match spec.path {
        FusionPath::Full => {
            let outer = tensor::outer(&[&zs[0], &zs[1], &zs[2]])?;
            tensor::contract(&outer, params.weight().unwrap(), &[0, 1, 2], &[0, 1, 2])
        }
        FusionPath::Factorized => {
            let projections: Result<Vec<Tensor>> = zs
                .iter()
                .enumerate()
                .map(|(k, zk)| tensor::contract(zk, params.factor_at(k), &[0], &[0]))
                .collect();
            mix(projections?, params.mixing().unwrap())
        }
    }
}

/// `p`-fold outer power of the concatenated input contracted with the
/// weight tensor, dense or factorized per the spec.
pub fn fuse_polynomial(z: [&Tensor; 3], params: &FusionParams) -> Result<Tensor> {
    let spec = params.spec();
    if spec.kind != FusionKind::Pf {
        return Err(Error::InvalidArgument(format!("fuse_polynomial given {:?} parameters", spec.kind)));
    }
    check_inputs(spec, z)?;
    let zc = concatenated(spec, z);
    let p = spec.order;
    match spec.path {
        FusionPath::Full => {
            let copies = vec![&zc; p];
            let power = tensor::outer(&copies)?;
            let axes: Vec<usize> = (0..p).collect();
            tensor::contract(&power, params.weight().unwrap(), &axes, &axes)
        }
        FusionPath::Factorized => {
            let projections: Result<Vec<Tensor>> =
                (0..p).map(|k| tensor::contract(&zc, params.factor_at(k), &[0], &[0])).collect();
            mix(projections?, params.mixing().unwrap())
        }
    }
}

/// Dispatches on the parameter kind.
pub fn fuse(z: [&Tensor; 3], params: &FusionParams) -> Result<Tensor> {
    match params.spec().kind {
        FusionKind::Lf => fuse_linear(z, params),
        FusionKind::Tf => fuse_tensor(z, params),
        FusionKind::Pf => fuse_polynomial(z, params),
    }
}

/// `Σ_r w[r] Π_k P_k[r, o]` for projections of shape `[R, O]`.
fn mix(projections: Vec<Tensor>, w: &Tensor) -> Result<Tensor> {
    let mut it = projections.into_iter();
    let mut prod = it.next().expect("at least one projection");
    for p in it {
        prod = prod.mul(&p)?;
    }
    tensor::contract(w, &prod, &[0], &[0])
}

/// Dense weight tensor of a factorized layer, `[d₁, …, d_p, O]`.
///
/// Intended for testing; subject to the materialization guard.
pub fn reconstruct_full(params: &FusionParams) -> Result<Tensor> {
    let spec = params.spec();
    if !spec.is_factorized() {
        return Err(Error::InvalidArgument("reconstruct_full needs factorized parameters".into()));
    }
    let entries = spec.full_entries();
    if entries > MATERIALIZATION_LIMIT {
        return Err(Error::MaterializationGuard {
            entries,
            limit: MATERIALIZATION_LIMIT,
        });
    }
    let dims = spec.effective_dims();
    let (r, o) = (spec.rank, spec.output_dim);
    let ro = r * o;
    // acc[(i₁…i_k), r, o] = Π_{j≤k} F_j[i_j, r, o]
    let mut acc = params.factor_at(0).data().to_vec();
    for (k, &d) in dims.iter().enumerate().skip(1) {
        let f = params.factor_at(k).data();
        let rows = acc.len() / ro;
        let mut next = Vec::with_capacity(rows * d * ro);
        for prefix in acc.chunks_exact(ro) {
            for row in f.chunks_exact(ro) {
                next.extend(prefix.iter().zip(row).map(|(a, b)| a * b));
            }
        }
        acc = next;
    }
    let w = params.mixing().unwrap().data();
    let mut out = Vec::with_capacity(acc.len() / r);
    for block in acc.chunks_exact(ro) {
        for oi in 0..o {
            out.push((0..r).map(|ri| w[ri] * block[ri * o + oi]).sum());
        }
    }
    let mut shape = dims;
    shape.push(o);
    Tensor::new(shape, out)
}

/// Dense counterpart of a factorized layer: same spec on the full path with
/// the reconstructed weight.
pub fn to_full(params: &FusionParams) -> Result<FusionParams> {
    let weight = reconstruct_full(params)?;
    let spec = FusionSpec {
        path: FusionPath::Full,
        ..params.spec().clone()
    };
    FusionParams::new(spec, vec![weight])
}

/// Block-structured evaluation routes, kept as independent references for
/// the concatenated and outer-power forms.
pub mod blocks {
    use super::*;

    fn row_ranges(dims: [usize; 3]) -> [std::ops::Range<usize>; 3] {
        let [a, b, c] = dims;
        [0..a, a..a + b, a + b..a + b + c]
    }

    /// Rows `range` of a `[n, O]` matrix.
    fn row_block(w: &Tensor, range: std::ops::Range<usize>) -> Tensor {
        let o = w.shape()[1];
        Tensor::new(vec![range.len(), o], w.data()[range.start * o..range.end * o].to_vec()).unwrap()
    }

    /// `z¹W¹ + z²W² + z³W³` with `W^k` the row blocks of an LF weight.
    pub fn linear_block_sum(z: [&Tensor; 3], params: &FusionParams) -> Result<Tensor> {
        let spec = params.spec();
        if spec.kind != FusionKind::Lf {
            return Err(Error::InvalidArgument("linear_block_sum needs LF parameters".into()));
        }
        check_inputs(spec, z)?;
        let w = params.weight().unwrap();
        let mut y = Tensor::zeros(&[spec.output_dim]);
        for (zk, range) in z.iter().zip(row_ranges(spec.dims)) {
            y = y.add(&tensor::contract(zk, &row_block(w, range), &[0], &[0])?)?;
        }
        Ok(y)
    }

    /// Second-order PF as the sum of the nine blocks `z^j ⊗ z^k : 𝒲^{jk}`.
    pub fn quadratic_block_sum(z: [&Tensor; 3], params: &FusionParams) -> Result<Tensor> {
        let spec = params.spec();
        if spec.kind != FusionKind::Pf || spec.order != 2 || spec.path != FusionPath::Full || spec.augment_one {
            return Err(Error::InvalidArgument(
                "quadratic_block_sum needs full-path order-2 PF parameters without augmentation".into(),
            ));
        }
        check_inputs(spec, z)?;
        let w = params.weight().unwrap();
        let (n, o) = (spec.concat_dim(), spec.output_dim);
        let ranges = row_ranges(spec.dims);
        let mut y = Tensor::zeros(&[o]);
        for (zj, rj) in z.iter().zip(&ranges) {
            for (zk, rk) in z.iter().zip(&ranges) {
                let mut block = Vec::with_capacity(rj.len() * rk.len() * o);
                for i in rj.clone() {
                    for j in rk.clone() {
                        let at = (i * n + j) * o;
                        block.extend_from_slice(&w.data()[at..at + o]);
                    }
                }
                let block = Tensor::new(vec![rj.len(), rk.len(), o], block)?;
                let zz = tensor::outer(&[zj, zk])?;
                y = y.add(&tensor::contract(&zz, &block, &[0, 1], &[0, 1])?)?;
            }
        }
        Ok(y)
    }
}

// ---------------------------------------------------------------------------
// Batched tape forward

fn append_ones(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).shape()[0];
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    tape.concat_cols(&[x, ones])
}

/// Records the fusion layer for a batch `z_k` of shape `[N, d_k]`, returning
/// `[N, O]`. `params` holds one variable per stored tensor in layout order.
pub fn forward(tape: &mut Tape, spec: &FusionSpec, params: &[Var], z: [Var; 3]) -> Result<Var> {
    let expected = spec.param_shapes()?.len();
    if params.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "fusion layer expects {expected} parameter variables, got {}",
            params.len()
        )));
    }
    for (k, (&zk, &d)) in z.iter().zip(&spec.dims).enumerate() {
        let s = tape.value(zk).shape();
        if s.len() != 2 || s[1] != d {
            return Err(Error::Shape(format!("modality {} batch has shape {s:?}, expected [N, {d}]", k + 1)));
        }
    }
    let o = spec.output_dim;
    match (spec.kind, spec.is_factorized()) {
        (FusionKind::Lf, _) => {
            let zc = tape.concat_cols(&z)?;
            tape.contract(zc, params[0], &[1], &[0])
        }
        (FusionKind::Tf, false) => {
            let zs = augment_each(tape, spec, z)?;
            let ab = tape.outer_rows(zs[0], zs[1])?;
            let abc = tape.outer_rows(ab, zs[2])?;
            let rows = tape.value(abc).shape()[1];
            let w = tape.reshape(params[0], &[rows, o])?;
            tape.contract(abc, w, &[1], &[0])
        }
        (FusionKind::Tf, true) => {
            let zs = augment_each(tape, spec, z)?;
            let mut projections = Vec::with_capacity(3);
            for (k, &zk) in zs.iter().enumerate() {
                projections.push(tape.contract(zk, params[k], &[1], &[0])?);
            }
            mix_tape(tape, &projections, params[3])
        }
        (FusionKind::Pf, false) => {
            let zc = concat_tape(tape, spec, z)?;
            let mut power = zc;
            for _ in 1..spec.order {
                power = tape.outer_rows(power, zc)?;
            }
            let rows = tape.value(power).shape()[1];
            let w = tape.reshape(params[0], &[rows, o])?;
            tape.contract(power, w, &[1], &[0])
        }
        (FusionKind::Pf, true) => {
            let zc = concat_tape(tape, spec, z)?;
            let projections = if spec.symmetric {
                let shared = tape.contract(zc, params[0], &[1], &[0])?;
                vec![shared; spec.order]
            } else {
                let mut v = Vec::with_capacity(spec.order);
                for &f in &params[..spec.order] {
                    v.push(tape.contract(zc, f, &[1], &[0])?);
                }
                v
            };
            mix_tape(tape, &projections, *params.last().unwrap())
        }
    }
}

fn augment_each(tape: &mut Tape, spec: &FusionSpec, z: [Var; 3]) -> Result<[Var; 3]> {
    if !spec.augment_one {
        return Ok(z);
    }
    Ok([append_ones(tape, z[0])?, append_ones(tape, z[1])?, append_ones(tape, z[2])?])
}

fn concat_tape(tape: &mut Tape, spec: &FusionSpec, z: [Var; 3]) -> Result<Var> {
    let zc = tape.concat_cols(&z)?;
    match spec.augment_one {
        true => append_ones(tape, zc),
        false => Ok(zc),
    }
}

/// `Σ_r w[r] Π_k P_k[n, r, o]` for projections `[N, R, O]`.
fn mix_tape(tape: &mut Tape, projections: &[Var], mixing: Var) -> Result<Var> {
    let mut prod = projections[0];
    for &p in &projections[1..] {
        prod = tape.mul(prod, p)?;
    }
    tape.contract(prod, mixing, &[1], &[0])
}
