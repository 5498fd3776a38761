//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an eager tape: every op computes its value at insertion and
//! records what backward needs. Graphs are built per training step and dropped
//! after [`Graph::backward`]; parameters live outside the graph as [`Param`]
//! handles and are re-inserted as leaves each step.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to a node in one graph. Only valid for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// A named, shared, mutable parameter tensor.
///
/// Cloning a `Param` clones the handle, not the storage, so a model and its
/// optimizer see the same values.
#[derive(Clone)]
pub struct Param {
    name: Rc<str>,
    value: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: Rc::from(name.into()),
            value: Rc::new(RefCell::new(value)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.value.borrow()
    }

    pub fn set_value(&self, t: Tensor) {
        *self.value.borrow_mut() = t;
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    /// Pointer identity; stable for the lifetime of the parameter.
    pub fn key(&self) -> usize {
        Rc::as_ptr(&self.value) as usize
    }

    /// FNV-1a over the exact bit pattern, for freezing-contract assertions.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.value.borrow().data() {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.value.borrow().shape())
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    MulScalar(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Transpose(usize),
    AddRow {
        x: usize,
        bias: usize,
    },
    ScaleRows {
        x: usize,
        w: usize,
    },
    Tanh(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    ClampMin {
        x: usize,
        floor: f64,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    MeanAll(usize),
    MeanAxis {
        x: usize,
        axis: usize,
    },
    L2Normalize {
        x: usize,
        axis: usize,
        norms: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    IndexSelect {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    BceWithLogits {
        logits: usize,
        targets: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Eager autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Param, usize)>,
    seed: u64,
    training: bool,
}

/// `c = op(a) . op(b) + beta * c` for stored row-major matrices.
/// `(ar, ac)` and `(br, bc)` are the stored shapes; `ta`/`tb` transpose on use.
fn gemm(
    ta: bool,
    tb: bool,
    a: &[f64],
    ar: usize,
    ac: usize,
    b: &[f64],
    br: usize,
    bc: usize,
    beta: f64,
    c: &mut [f64],
) -> (usize, usize) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output buffer");
    let (rsa, csa) = if ta {
        (1isize, ac as isize)
    } else {
        (ac as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, bc as isize)
    } else {
        (bc as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (m, n)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            seed,
            training: false,
        }
    }

    /// Enable training behavior (dropout active). Off by default.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` with respect to node `id`, if any was
    /// computed. Nodes a loss does not depend on never receive a gradient.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Like [`Graph::grad`], but yields zeros for untouched nodes.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    /// Gradient for a bound parameter, if it was inserted via [`Graph::param`]
    /// and the loss depends on it.
    pub fn grad_of(&self, p: &Param) -> Option<&[f64]> {
        let key = p.key();
        self.bindings
            .iter()
            .find(|(bp, _)| bp.key() == key)
            .and_then(|(_, idx)| self.nodes[*idx].grad.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        debug_assert!(value.is_all_finite(), "non-finite value produced");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Insert a trainable parameter leaf; its gradient is retrievable through
    /// [`Graph::grad_of`] after backward.
    pub fn param(&mut self, p: &Param) -> NodeId {
        let id = self.leaf(p.value().clone(), true);
        self.bindings.push((p.clone(), id.0));
        id
    }

    /// Insert a parameter as a frozen leaf: values flow forward, no gradient
    /// is computed for it.
    pub fn param_frozen(&mut self, p: &Param) -> NodeId {
        self.leaf(p.value().clone(), false)
    }

    /// Insert a parameter leaf, trainable or frozen.
    pub fn param_mode(&mut self, p: &Param, trainable: bool) -> NodeId {
        if trainable {
            self.param(p)
        } else {
            self.param_frozen(p)
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[b.0].value.data();
        let data: Vec<f64> = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[b.0].value.data().iter().any(|v| *v == 0.0) {
            return Err(Error::Numerical("division by zero".into()));
        }
        self.zip_elementwise("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, data).expect("same shape"), rg, op)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::MulScalar(a.0, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_value, Op::Gelu(a.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.data().iter().any(|v| *v <= 0.0) {
            return Err(Error::Numerical(
                "log of non-positive value".into(),
            ));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a.0)))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Numerical("sqrt of negative value".into()));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a.0)))
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, |x| x.max(floor), Op::ClampMin { x: a.0, floor })
    }

    /// `op(a) . op(b)` with optional transposition of either stored operand.
    pub fn matmul_opts(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul (2-D operands required)",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ar, ac) = (sa[0], sa[1]);
        let (br, bc) = (sb[0], sb[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            ta,
            tb,
            self.nodes[a.0].value.data(),
            ar,
            ac,
            self.nodes[b.0].value.data(),
            br,
            bc,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_opts(a, b, false, false)
    }

    /// `a . b^T`, the common layout for row-major weights and batch Grams.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_opts(a, b, false, true)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape();
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose (2-D required)",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(&[c, r], out)?, rg, Op::Transpose(a.0)))
    }

    /// Broadcast-add a length-`m` bias to each row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sb = self.nodes[bias.0].value.shape().to_vec();
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sx,
                rhs: sb,
            });
        }
        let (n, m) = (sx[0], sx[1]);
        let vx = self.nodes[x.0].value.data();
        let vb = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = vx[i * m + j] + vb[j];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(
            Tensor::from_vec(&sx, out)?,
            rg,
            Op::AddRow { x: x.0, bias: bias.0 },
        ))
    }

    /// Scale row `i` of an `[n, m]` matrix by `w[i]`; `w` is `[n]` or `[n, 1]`.
    pub fn scale_rows(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let n = sx[0];
        let ok = sx.len() == 2 && (sw == [n] || sw == [n, 1]);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sx,
                rhs: sw,
            });
        }
        let m = sx[1];
        let vx = self.nodes[x.0].value.data();
        let vw = self.nodes[w.0].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let wi = vw[i];
            for j in 0..m {
                out[i * m + j] = vx[i * m + j] * wi;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_vec(&sx, out)?,
            rg,
            Op::ScaleRows { x: x.0, w: w.0 },
        ))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| Error::invalid("layer_norm on 0-d"))?;
        let sg = self.nodes[gamma.0].value.shape().to_vec();
        let sb = self.nodes[beta.0].value.shape().to_vec();
        if sg != [d] || sb != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm (scale/shift vs last axis)",
                lhs: sx,
                rhs: sg,
            });
        }
        let vx = self.nodes[x.0].value.data();
        let vg = self.nodes[gamma.0].value.data();
        let vb = self.nodes[beta.0].value.data();
        let rows = vx.len() / d;
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let s = &vx[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (s[j] - mean) * inv * vg[j] + vb[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_vec(&sx, out)?,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        ))
    }

    /// Inverted dropout with keep-probability `1 - p`. Identity when the graph
    /// is not in training mode. The mask is drawn from a counter-style stream
    /// keyed by the graph seed and the node index, so a rebuilt graph with the
    /// same seed reproduces the same masks.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0,1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.numel();
        let mut r = rng::stream_indexed(self.seed, "dropout", self.nodes.len() as u64);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if r.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let vx = self.nodes[x.0].value.data();
        let out: Vec<f64> = vx.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            rg,
            Op::Dropout { x: x.0, mask },
        ))
    }

    fn softmax_like(&mut self, x: NodeId, axis: usize, log_form: bool) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let vx = self.nodes[x.0].value.data();
        let mut out = vec![0.0; vx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * len * inner + a * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..len {
                    mx = mx.max(vx[idx(a)]);
                }
                let mut z = 0.0;
                for a in 0..len {
                    z += (vx[idx(a)] - mx).exp();
                }
                if log_form {
                    let lz = z.ln() + mx;
                    for a in 0..len {
                        out[idx(a)] = vx[idx(a)] - lz;
                    }
                } else {
                    for a in 0..len {
                        out[idx(a)] = (vx[idx(a)] - mx).exp() / z;
                    }
                }
            }
        }
        let rg = self.rg(x);
        let op = if log_form {
            Op::LogSoftmax { x: x.0, axis }
        } else {
            Op::Softmax { x: x.0, axis }
        };
        Ok(self.push(Tensor::from_vec(&shape, out)?, rg, op))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_like(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_like(x, axis, true)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let d = self.nodes[x.0].value.data();
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::MeanAll(x.0))
    }

    fn reduce_axis(&mut self, x: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "reduction axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let vx = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += vx[o * len * inner + a * inner + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(x);
        let op = if mean {
            Op::MeanAxis { x: x.0, axis }
        } else {
            Op::SumAxis { x: x.0, axis }
        };
        Ok(self.push(Tensor::from_vec(&new_shape, out)?, rg, op))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(x, axis, true)
    }

    /// Normalize every slice along `axis` to unit L2 norm. Slices with norm
    /// below an internal floor are scaled by the floor instead, so zero input
    /// stays zero.
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "l2_normalize axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let vx = self.nodes[x.0].value.data();
        let mut out = vec![0.0; vx.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * len * inner + a * inner + i;
                let mut sq = 0.0;
                for a in 0..len {
                    sq += vx[idx(a)] * vx[idx(a)];
                }
                let norm = sq.sqrt().max(NORM_FLOOR);
                norms[o * inner + i] = norm;
                for a in 0..len {
                    out[idx(a)] = vx[idx(a)] / norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            rg,
            Op::L2Normalize {
                x: x.0,
                axis,
                norms,
            },
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape().to_vec();
            let plen = s[axis];
            let vp = self.nodes[p.0].value.data();
            for o in 0..outer {
                for a in 0..plen {
                    for i in 0..inner {
                        out[o * total * inner + (offset + a) * inner + i] =
                            vp[o * plen * inner + a * inner + i];
                    }
                }
            }
            offset += plen;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    /// Gather slices along `axis` in the given order; indices may repeat.
    pub fn index_select(&mut self, x: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "index_select axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if let Some(bad) = indices.iter().find(|i| **i >= len) {
            return Err(Error::invalid(format!(
                "index_select index {bad} out of range for axis length {len}"
            )));
        }
        let vx = self.nodes[x.0].value.data();
        let klen = indices.len();
        let mut out = vec![0.0; outer * klen * inner];
        for o in 0..outer {
            for (a, src) in indices.iter().enumerate() {
                for i in 0..inner {
                    out[o * klen * inner + a * inner + i] =
                        vx[o * len * inner + src * inner + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = klen;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&new_shape, out)?,
            rg,
            Op::IndexSelect {
                x: x.0,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Elementwise binary cross-entropy on logits:
    /// `softplus(z) - z * y`, computed in the overflow-safe form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.same_shape("bce_with_logits", logits, targets)?;
        let vz = self.nodes[logits.0].value.data();
        let vy = self.nodes[targets.0].value.data();
        let out: Vec<f64> = vz
            .iter()
            .zip(vy)
            .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let shape = self.nodes[logits.0].value.shape().to_vec();
        let rg = self.rg(logits) || self.rg(targets);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            rg,
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.0,
            },
        ))
    }

    fn add_sweep(&self, sweep: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64]) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut sweep[idx] {
            Some(buf) => {
                for (a, d) in buf.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => sweep[idx] = Some(delta.to_vec()),
        }
    }

    /// Ensure a zeroed sweep buffer exists; returns false for no-grad nodes.
    fn ensure_sweep(&self, sweep: &mut [Option<Vec<f64>>], idx: usize) -> bool {
        if !self.nodes[idx].requires_grad {
            return false;
        }
        if sweep[idx].is_none() {
            sweep[idx] = Some(vec![0.0; self.nodes[idx].value.numel()]);
        }
        true
    }

    /// Reverse sweep from a scalar loss. Each call computes one full gradient
    /// and adds it into the persisted node gradients, so repeated calls
    /// without zeroing accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].value.data()[0].is_finite() {
            return Err(Error::Numerical("loss is not finite".into()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut sweep: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        sweep[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = sweep[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut sweep);
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], sweep: &mut [Option<Vec<f64>>]) {
        // Ops own no node references; copy light metadata out to appease the
        // borrow checker, values are read through immutable indexing.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_sweep(sweep, a, g);
                self.add_sweep(sweep, b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_sweep(sweep, a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_sweep(sweep, b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                self.add_sweep(sweep, a, &da);
                self.add_sweep(sweep, b, &db);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a].value.data();
                let vb = self.nodes[b].value.data();
                let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.add_sweep(sweep, a, &da);
                self.add_sweep(sweep, b, &db);
            }
            Op::Neg(a) => {
                let a = *a;
                let da: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_sweep(sweep, a, &da);
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                self.add_sweep(sweep, a, &da);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (ar, ac) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let (br, bc) = {
                    let s = self.nodes[b].value.shape();
                    (s[0], s[1])
                };
                let (m, _k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                if self.ensure_sweep(sweep, a) {
                    let mut ga = sweep[a].take().expect("ensured");
                    let vb = self.nodes[b].value.data();
                    if !ta {
                        // dA = gC . op(B)^T
                        gemm(false, !tb, g, m, n, vb, br, bc, 1.0, &mut ga);
                    } else {
                        // stored A is used transposed: dA = op(B) . gC^T
                        gemm(tb, true, vb, br, bc, g, m, n, 1.0, &mut ga);
                    }
                    sweep[a] = Some(ga);
                }
                if self.ensure_sweep(sweep, b) {
                    let mut gb = sweep[b].take().expect("ensured");
                    let va = self.nodes[a].value.data();
                    if !tb {
                        // dB = op(A)^T . gC
                        gemm(!ta, false, va, ar, ac, g, m, n, 1.0, &mut gb);
                    } else {
                        // stored B is used transposed: dB = gC^T . op(A)
                        gemm(true, ta, g, m, n, va, ar, ac, 1.0, &mut gb);
                    }
                    sweep[b] = Some(gb);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let s = self.nodes[i].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; g.len()];
                for x in 0..r {
                    for y in 0..c {
                        da[y * r + x] = g[x * c + y];
                    }
                }
                self.add_sweep(sweep, a, &da);
            }
            Op::AddRow { x, bias } => {
                let (x, bias) = (*x, *bias);
                let s = self.nodes[i].value.shape();
                let (n, m) = (s[0], s[1]);
                self.add_sweep(sweep, x, g);
                let mut db = vec![0.0; m];
                for r in 0..n {
                    for j in 0..m {
                        db[j] += g[r * m + j];
                    }
                }
                self.add_sweep(sweep, bias, &db);
            }
            Op::ScaleRows { x, w } => {
                let (x, w) = (*x, *w);
                let s = self.nodes[i].value.shape();
                let (n, m) = (s[0], s[1]);
                let vx = self.nodes[x].value.data();
                let vw = self.nodes[w].value.data();
                let mut dx = vec![0.0; n * m];
                let mut dw = vec![0.0; n];
                for r in 0..n {
                    let wr = vw[r];
                    for j in 0..m {
                        dx[r * m + j] = g[r * m + j] * wr;
                        dw[r] += g[r * m + j] * vx[r * m + j];
                    }
                }
                self.add_sweep(sweep, x, &dx);
                self.add_sweep(sweep, w, &dw);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.add_sweep(sweep, a, &da);
            }
            Op::Gelu(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, x)| g * gelu_deriv(*x))
                    .collect();
                self.add_sweep(sweep, a, &da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.add_sweep(sweep, a, &da);
            }
            Op::Log(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.add_sweep(sweep, a, &da);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g / (2.0 * y))
                    .collect();
                self.add_sweep(sweep, a, &da);
            }
            Op::ClampMin { x, floor } => {
                let (x, floor) = (*x, *floor);
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x].value.data())
                    .map(|(g, v)| if *v > floor { *g } else { 0.0 })
                    .collect();
                self.add_sweep(sweep, x, &da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = *self.nodes[x].value.shape().last().expect("checked");
                let vx = self.nodes[x].value.data();
                let vg = self.nodes[gamma].value.data();
                let rows = vx.len() / d;
                let mut dx = vec![0.0; vx.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let s = &vx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = s.iter().sum::<f64>() / d as f64;
                    let var =
                        s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = s.iter().map(|v| (v - mean) * inv).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * vg[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.add_sweep(sweep, x, &dx);
                self.add_sweep(sweep, gamma, &dgamma);
                self.add_sweep(sweep, beta, &dbeta);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let da: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.add_sweep(sweep, x, &da);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |a: usize| o * len * inner + a * inner + ii;
                        let mut dot = 0.0;
                        for a in 0..len {
                            dot += g[idx(a)] * y[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                self.add_sweep(sweep, x, &dx);
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |a: usize| o * len * inner + a * inner + ii;
                        let mut gsum = 0.0;
                        for a in 0..len {
                            gsum += g[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] = g[idx(a)] - y[idx(a)].exp() * gsum;
                        }
                    }
                }
                self.add_sweep(sweep, x, &dx);
            }
            Op::SumAll(a) => {
                let a = *a;
                let da = vec![g[0]; self.nodes[a].value.numel()];
                self.add_sweep(sweep, a, &da);
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a].value.numel();
                let da = vec![g[0] / n as f64; n];
                self.add_sweep(sweep, a, &da);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let mean = matches!(self.nodes[i].op, Op::MeanAxis { .. });
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[x].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        for ii in 0..inner {
                            dx[o * len * inner + a * inner + ii] = g[o * inner + ii] * scale;
                        }
                    }
                }
                self.add_sweep(sweep, x, &dx);
            }
            Op::L2Normalize { x, axis, norms } => {
                let (x, axis) = (*x, *axis);
                let norms = norms.clone();
                let shape = self.nodes[x].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |a: usize| o * len * inner + a * inner + ii;
                        let n = norms[o * inner + ii];
                        let mut dot = 0.0;
                        for a in 0..len {
                            dot += g[idx(a)] * y[idx(a)];
                        }
                        let renormalized = n > NORM_FLOOR;
                        for a in 0..len {
                            dx[idx(a)] = if renormalized {
                                (g[idx(a)] - y[idx(a)] * dot) / n
                            } else {
                                g[idx(a)] / n
                            };
                        }
                    }
                }
                self.add_sweep(sweep, x, &dx);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&shape, axis);
                let mut offset = 0;
                for p in parts {
                    let plen = self.nodes[p].value.shape()[axis];
                    let mut dp = vec![0.0; self.nodes[p].value.numel()];
                    for o in 0..outer {
                        for a in 0..plen {
                            for ii in 0..inner {
                                dp[o * plen * inner + a * inner + ii] =
                                    g[o * total * inner + (offset + a) * inner + ii];
                            }
                        }
                    }
                    self.add_sweep(sweep, p, &dp);
                    offset += plen;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let (x, axis) = (*x, *axis);
                let indices = indices.clone();
                let shape = self.nodes[x].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let klen = indices.len();
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                for o in 0..outer {
                    for (a, src) in indices.iter().enumerate() {
                        for ii in 0..inner {
                            dx[o * len * inner + src * inner + ii] +=
                                g[o * klen * inner + a * inner + ii];
                        }
                    }
                }
                self.add_sweep(sweep, x, &dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let (logits, targets) = (*logits, *targets);
                let vz = self.nodes[logits].value.data();
                let vy = self.nodes[targets].value.data();
                let dz: Vec<f64> = g
                    .iter()
                    .zip(vz.iter().zip(vy))
                    .map(|(g, (z, y))| {
                        let sig = 1.0 / (1.0 + (-z).exp());
                        g * (sig - y)
                    })
                    .collect();
                let dy: Vec<f64> = g
                    .iter()
                    .zip(vz)
                    .map(|(g, z)| -g * z)
                    .collect();
                self.add_sweep(sweep, logits, &dz);
                self.add_sweep(sweep, targets, &dy);
            }
        }
    }
}
