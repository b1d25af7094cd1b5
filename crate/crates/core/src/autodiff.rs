//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every differentiable operation evaluates eagerly and appends a node to a
//! [`Tape`]. Node ids are assigned in creation order, so the tape is already
//! topologically sorted and [`Tape::backward`] just walks it in reverse,
//! accumulating vector-Jacobian products into per-node gradients.
//!
//! ```
//! use polyfusion::autodiff::Tape;
//! use polyfusion::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `inputs` are the values of the op's inputs, `output` its own value and
/// `grad` the gradient flowing into the output. The returned vector has one
/// slot per input; slots whose `needs` flag is false may be `None`.
pub trait Backward {
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Append-only record of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Appends an evaluated op. The backward closure is dropped when no
    /// input needs a gradient.
    pub fn record<B: Backward + 'static>(&mut self, value: Tensor, inputs: &[Var], op: B) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward>),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::from_parts(root.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let contributions = op.backward(&grad, &inputs, &node.value, &needs)?;
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for ((&input, contribution), need) in node.inputs.iter().zip(contributions).zip(needs) {
                let (Some(c), true) = (contribution, need) else { continue };
                debug_assert_eq!(c.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &c)?,
                    slot @ None => *slot = Some(c),
                }
            }
            // interior gradients are consumed; leaves never reach this point
            if id == loss.0 {
                grads[id] = Some(grad);
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Generic primitives

struct AddOp;
impl Backward for AddOp {
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct SubOp;
impl Backward for SubOp {
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.scale(-1.0))])
    }
}

struct MulOp;
impl Backward for MulOp {
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let da = if needs[0] { Some(g.mul(x[1])?) } else { None };
        let db = if needs[1] { Some(g.mul(x[0])?) } else { None };
        Ok(vec![da, db])
    }
}

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

struct SumOp;
impl Backward for SumOp {
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(x[0].shape(), g.item()))])
    }
}

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.reshape(x[0].shape())?)])
    }
}

struct ContractOp {
    axes_a: Vec<usize>,
    axes_b: Vec<usize>,
}

/// Permutation that maps an intermediate axis layout back to `0..n` order:
/// `layout[k]` names the original axis held at position `k`.
fn inverse_layout(layout: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; layout.len()];
    for (pos, &axis) in layout.iter().enumerate() {
        inv[axis] = pos;
    }
    inv
}

impl Backward for ContractOp {
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (x[0], x[1]);
        let free_a: Vec<usize> = (0..a.order()).filter(|i| !self.axes_a.contains(i)).collect();
        let free_b: Vec<usize> = (0..b.order()).filter(|i| !self.axes_b.contains(i)).collect();
        let g_free_a: Vec<usize> = (0..free_a.len()).collect();
        let g_free_b: Vec<usize> = (free_a.len()..free_a.len() + free_b.len()).collect();

        let da = if needs[0] {
            // [free_a.., remaining b axes (ascending)..]
            let t = tensor::contract(g, b, &g_free_b, &free_b)?;
            let mut layout = free_a.clone();
            for axis_b in (0..b.order()).filter(|i| self.axes_b.contains(i)) {
                let pos = self.axes_b.iter().position(|&v| v == axis_b).unwrap();
                layout.push(self.axes_a[pos]);
            }
            Some(t.permute(&inverse_layout(&layout))?)
        } else {
            None
        };
        let db = if needs[1] {
            // [remaining a axes (ascending).., free_b..]
            let t = tensor::contract(a, g, &free_a, &g_free_a)?;
            let mut layout = Vec::new();
            for axis_a in (0..a.order()).filter(|i| self.axes_a.contains(i)) {
                let pos = self.axes_a.iter().position(|&v| v == axis_a).unwrap();
                layout.push(self.axes_b[pos]);
            }
            layout.extend(&free_b);
            Some(t.permute(&inverse_layout(&layout))?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

struct OuterRowsOp;
impl Backward for OuterRowsOp {
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (x[0], x[1]);
        let (n, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let mut da = needs[0].then(|| vec![0.0; n * p]);
        let mut db = needs[1].then(|| vec![0.0; n * q]);
        for r in 0..n {
            for i in 0..p {
                let row = &gd[(r * p + i) * q..(r * p + i + 1) * q];
                let bv = &bd[r * q..(r + 1) * q];
                if let Some(da) = da.as_mut() {
                    da[r * p + i] = row.iter().zip(bv).map(|(x, y)| x * y).sum();
                }
                if let Some(db) = db.as_mut() {
                    let av = ad[r * p + i];
                    for (d, &gv) in db[r * q..(r + 1) * q].iter_mut().zip(row) {
                        *d += gv * av;
                    }
                }
            }
        }
        Ok(vec![
            da.map(|d| Tensor::from_parts(vec![n, p], d)),
            db.map(|d| Tensor::from_parts(vec![n, q], d)),
        ])
    }
}

struct ConcatColsOp;
impl Backward for ConcatColsOp {
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let n = g.shape()[0];
        let total = g.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        let mut start = 0;
        for (t, &need) in x.iter().zip(needs) {
            let w = t.shape()[1];
            if need {
                let mut d = Vec::with_capacity(n * w);
                for r in 0..n {
                    d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                }
                out.push(Some(Tensor::from_parts(vec![n, w], d)));
            } else {
                out.push(None);
            }
            start += w;
        }
        Ok(out)
    }
}

struct AddRowOp;
impl Backward for AddRowOp {
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let m = x[1].len();
        let db = needs[1].then(|| {
            let mut d = vec![0.0; m];
            for row in g.data().chunks_exact(m) {
                for (acc, v) in d.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Tensor::from_parts(x[1].shape().to_vec(), d)
        });
        Ok(vec![Some(g.clone()), db])
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: operands {sa:?} and {sb:?}")));
    }
    Ok(())
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, m] => Ok((n, m)),
        _ => Err(Error::Shape(format!(
            "{what} expects an order-2 [batch, features] input, got {:?}",
            t.shape()
        ))),
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(v, &[a, b], AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(v, &[a, b], SubOp))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.record(v, &[a, b], MulOp))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).scale(alpha);
        self.record(v, &[a], ScaleOp(alpha))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, &[a], SumOp)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, &[a], ReshapeOp))
    }

    /// Differentiable [`tensor::contract`].
    pub fn contract(&mut self, a: Var, b: Var, axes_a: &[usize], axes_b: &[usize]) -> Result<Var> {
        let v = tensor::contract(self.value(a), self.value(b), axes_a, axes_b)?;
        Ok(self.record(
            v,
            &[a, b],
            ContractOp {
                axes_a: axes_a.to_vec(),
                axes_b: axes_b.to_vec(),
            },
        ))
    }

    /// Row-wise outer product: `[N, P] × [N, Q] → [N, P·Q]`, with
    /// `out[n, i·Q + j] = a[n, i] · b[n, j]`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = require_matrix(self.value(a), "outer_rows")?;
        let (n2, q) = require_matrix(self.value(b), "outer_rows")?;
        if n != n2 {
            return Err(Error::Shape(format!("outer_rows batch sizes {n} and {n2}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * p * q);
        for r in 0..n {
            let bv = &bd[r * q..(r + 1) * q];
            for &x in &ad[r * p..(r + 1) * p] {
                out.extend(bv.iter().map(|&y| x * y));
            }
        }
        Ok(self.record(Tensor::from_parts(vec![n, p * q], out), &[a, b], OuterRowsOp))
    }

    /// Column-wise concatenation of `[N, d_k]` blocks.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let mut n = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rows, w) = require_matrix(self.value(p), "concat_cols")?;
            if *n.get_or_insert(rows) != rows {
                return Err(Error::Shape("concat_cols blocks differ in batch size".into()));
            }
            widths.push(w);
        }
        let n = n.unwrap();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.record(Tensor::from_parts(vec![n, total], out), parts, ConcatColsOp))
    }

    /// Adds an order-1 `row` to every row of `x` (`[N, M] + [M]`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, m) = require_matrix(self.value(x), "add_row")?;
        if self.value(row).shape() != [m] {
            return Err(Error::Shape(format!(
                "add_row: row of shape {:?} for {m} columns",
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_exact_mut(m) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        Ok(self.record(v, &[x, row], AddRowOp))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checking

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_error: f64,
    /// `(parameter index, flat coordinate)` where `max_error` occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` receives a fresh tape and one [`Var`] per entry of `params` and must
/// return a scalar. Every coordinate is checked when `max_coords` is `None`;
/// otherwise up to `max_coords` evenly spaced coordinates per parameter.
pub fn grad_check<F>(mut f: F, params: &mut [Tensor], eps: f64, max_coords: Option<usize>) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check: loss at the unperturbed point".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let scalar_at = |params: &[Tensor], f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheck {
        max_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            params[pi].data_mut()[c] = orig + eps;
            let plus = scalar_at(params, &mut f);
            params[pi].data_mut()[c] = orig - eps;
            let minus = scalar_at(params, &mut f);
            params[pi].data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: loss at parameter {pi}, coordinate {c}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_error {
                report.max_error = err;
                report.worst = (pi, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
