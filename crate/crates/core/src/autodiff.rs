//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] lives for one forward pass. Every operation on [`Var`]s appends a
//! node holding its input ids and a backward closure over the forward values it
//! needs. [`Tape::backward`] walks the nodes in reverse id order, which is a
//! valid topological order because inputs are always recorded before outputs.
//!
//! Gradients are retained for leaves only; intermediate gradients are released
//! as soon as they have been propagated.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, NdArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    Matmul,
    Linear,
    Reshape,
    Permute,
    Sum,
    Broadcast,
    Narrow,
    Concat,
    Exp,
    Log,
    Sqrt,
    Maximum,
    Relu,
    Erf,
    Conv2d,
    MaxPool2d,
    Custom(&'static str),
}

/// Maps the upstream gradient of a node's output to gradients of its inputs
/// (`None` for inputs that need none).
pub type BackwardFn<T> = Box<dyn FnOnce(&NdArray<T>) -> Result<Vec<Option<NdArray<T>>>>>;

struct TapeNode<T> {
    kind: OpKind,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

struct TapeState<T> {
    nodes: Vec<TapeNode<T>>,
    grads: Vec<Option<NdArray<T>>>,
    grad_enabled: bool,
}

/// A single-threaded operation tape. Cloning shares the same tape.
pub struct Tape<T> {
    state: Rc<RefCell<TapeState<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            state: Rc::clone(&self.state),
        }
    }
}

/// A value recorded on a tape.
pub struct Var<T> {
    id: usize,
    value: Arc<NdArray<T>>,
    requires_grad: bool,
    tape: Tape<T>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            id: self.id,
            value: Arc::clone(&self.value),
            requires_grad: self.requires_grad,
            tape: self.tape.clone(),
        }
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that records no backward closures; for inference.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            state: Rc::new(RefCell::new(TapeState {
                nodes: Vec::new(),
                grads: Vec::new(),
                grad_enabled,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.state.borrow().grad_enabled
    }

    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn op_kind(&self, var: &Var<T>) -> OpKind {
        self.state.borrow().nodes[var.id].kind
    }

    pub fn inputs_of(&self, var: &Var<T>) -> Vec<usize> {
        self.state.borrow().nodes[var.id].inputs.clone()
    }

    pub fn leaf(&self, value: NdArray<T>, requires_grad: bool) -> Var<T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers an existing shared buffer as a leaf without copying it.
    pub fn leaf_shared(&self, value: Arc<NdArray<T>>, requires_grad: bool) -> Var<T> {
        let mut st = self.state.borrow_mut();
        let requires_grad = requires_grad && st.grad_enabled;
        let id = st.nodes.len();
        st.nodes.push(TapeNode {
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            requires_grad,
            backward: None,
        });
        Var {
            id,
            value,
            requires_grad,
            tape: self.clone(),
        }
    }

    pub fn constant(&self, value: NdArray<T>) -> Var<T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: T) -> Var<T> {
        self.constant(NdArray::scalar(v))
    }

    /// Appends an operation. `forward` receives the input values and whether a
    /// backward closure is needed, and returns the output plus that closure.
    pub fn record<F>(&self, kind: OpKind, inputs: &[&Var<T>], forward: F) -> Result<Var<T>>
    where
        F: FnOnce(&[Arc<NdArray<T>>], bool) -> Result<(NdArray<T>, Option<BackwardFn<T>>)>,
    {
        for v in inputs {
            assert!(
                Rc::ptr_eq(&v.tape.state, &self.state),
                "operation inputs must live on the same tape"
            );
        }
        let needs_grad = self.grad_enabled() && inputs.iter().any(|v| v.requires_grad);
        let values: Vec<Arc<NdArray<T>>> = inputs.iter().map(|v| Arc::clone(&v.value)).collect();
        let (out, backward) = forward(&values, needs_grad)?;
        let mut st = self.state.borrow_mut();
        let id = st.nodes.len();
        st.nodes.push(TapeNode {
            kind,
            inputs: inputs.iter().map(|v| v.id).collect(),
            shape: out.shape().to_vec(),
            requires_grad: needs_grad,
            backward: if needs_grad { backward } else { None },
        });
        Ok(Var {
            id,
            value: Arc::new(out),
            requires_grad: needs_grad,
            tape: self.clone(),
        })
    }

    /// Propagates d(root)/d(node) to every requires-grad leaf reachable from `root`.
    /// Consumes the recorded backward closures.
    pub fn backward(&self, root: &Var<T>) -> Result<()> {
        if root.value.len() != 1 {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        let mut st = self.state.borrow_mut();
        let n = st.nodes.len();
        st.grads = (0..n).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(());
        }
        st.grads[root.id] = Some(NdArray::ones(root.value.shape()));
        for id in (0..=root.id).rev() {
            let Some(backward) = st.nodes[id].backward.take() else {
                continue;
            };
            let Some(g) = st.grads[id].take() else {
                continue;
            };
            let input_grads = backward(&g)?;
            let inputs = st.nodes[id].inputs.clone();
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (input, grad) in inputs.into_iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !st.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(grad.shape(), st.nodes[input].shape.as_slice());
                match &mut st.grads[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, var: &Var<T>) -> Option<NdArray<T>> {
        self.state.borrow().grads.get(var.id).and_then(|g| g.clone())
    }

    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| p.value.shape().get(axis).copied().unwrap_or(0))
            .collect();
        self.record(OpKind::Concat, parts, move |xs, needs| {
            let refs: Vec<&NdArray<T>> = xs.iter().map(|x| x.as_ref()).collect();
            let out = NdArray::concat(&refs, axis)?;
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| {
                    let mut start = 0;
                    sizes
                        .iter()
                        .map(|&len| {
                            let part = g.narrow(axis, start, len);
                            start += len;
                            part.map(Some)
                        })
                        .collect()
                }) as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }
}

fn elementwise_backward<T: Element>(
    x: Arc<NdArray<T>>,
    y: Arc<NdArray<T>>,
    df: impl Fn(T, T) -> T + 'static,
) -> BackwardFn<T> {
    Box::new(move |g: &NdArray<T>| {
        let data = g
            .data()
            .iter()
            .zip(x.data().iter().zip(y.data()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        Ok(vec![Some(NdArray::new(x.shape(), data)?)])
    })
}

impl<T: Element> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &NdArray<T> {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<NdArray<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn grad(&self) -> Option<NdArray<T>> {
        self.tape.grad(self)
    }

    /// Same value as a new constant leaf; gradients stop here.
    pub fn detach(&self) -> Var<T> {
        self.tape.leaf_shared(Arc::clone(&self.value), false)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    /// Applies `f` elementwise with derivative `df(x, f(x))`.
    pub fn unary(
        &self,
        kind: OpKind,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        self.tape.record(kind, &[self], |xs, needs| {
            let x = Arc::clone(&xs[0]);
            let y = Arc::new(x.map(f));
            let bw = needs.then(|| elementwise_backward(x, Arc::clone(&y), df));
            let y = Arc::try_unwrap(y).unwrap_or_else(|rc| (*rc).clone());
            Ok((y, bw))
        })
    }

    fn binary(
        &self,
        other: &Var<T>,
        kind: OpKind,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(&NdArray<T>, &NdArray<T>, &NdArray<T>) -> Result<(NdArray<T>, NdArray<T>)>
            + 'static,
    ) -> Result<Var<T>> {
        self.tape.record(kind, &[self, other], |xs, needs| {
            let (a, b) = (Arc::clone(&xs[0]), Arc::clone(&xs[1]));
            let out = a.broadcast_zip(&b, op, f)?;
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| {
                    let (ga, gb) = grads(g, &a, &b)?;
                    Ok(vec![
                        Some(ga.sum_to_shape(a.shape())?),
                        Some(gb.sum_to_shape(b.shape())?),
                    ])
                }) as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, OpKind::Add, "add", |a, b| a + b, |g, _, _| {
            Ok((g.clone(), g.clone()))
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, OpKind::Sub, "sub", |a, b| a - b, |g, _, _| {
            Ok((g.clone(), g.map(|v| -v)))
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, OpKind::Mul, "mul", |a, b| a * b, |g, a, b| {
            Ok((
                g.broadcast_zip(b, "mul", |g, b| g * b)?,
                g.broadcast_zip(a, "mul", |g, a| g * a)?,
            ))
        })
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, OpKind::Div, "div", |a, b| a / b, |g, a, b| {
            let ga = g.broadcast_zip(b, "div", |g, b| g / b)?;
            let gb = g
                .broadcast_zip(a, "div", |g, a| g * a)?
                .broadcast_zip(b, "div", |ga, b| -ga / (b * b))?;
            Ok((ga, gb))
        })
    }

    /// Elementwise maximum; ties split the gradient equally.
    pub fn maximum(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, OpKind::Maximum, "maximum", |a, b| a.max(b), |g, a, b| {
            let half = T::of(0.5);
            let wa = a.broadcast_zip(b, "maximum", move |a, b| {
                if a > b {
                    T::one()
                } else if a < b {
                    T::zero()
                } else {
                    half
                }
            })?;
            let ga = g.broadcast_zip(&wa, "maximum", |g, w| g * w)?;
            let gb = g.broadcast_zip(&wa, "maximum", |g, w| g * (T::one() - w))?;
            Ok((ga, gb))
        })
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.unary(OpKind::Neg, |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: T) -> Result<Var<T>> {
        self.unary(OpKind::Scale, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<T>> {
        self.unary(OpKind::AddScalar, move |x| x + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary(OpKind::Exp, |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Var<T>> {
        if let Some(v) = self.value.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("negative input {v}"),
            });
        }
        self.unary(OpKind::Log, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        if let Some(v) = self.value.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        self.unary(OpKind::Sqrt, |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn erf(&self) -> Result<Var<T>> {
        let k = T::of(std::f64::consts::FRAC_2_SQRT_PI);
        self.unary(OpKind::Erf, |x| x.erf(), move |x, _| k * (-x * x).exp())
    }

    pub fn relu(&self) -> Result<Var<T>> {
        self.unary(
            OpKind::Relu,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU with the exact erf form: `x/2 * (1 + erf(x/sqrt 2))`.
    pub fn gelu(&self) -> Result<Var<T>> {
        let inner = self.scale(T::of(std::f64::consts::FRAC_1_SQRT_2))?.erf()?;
        let gate = inner.add_scalar(T::one())?.scale(T::of(0.5))?;
        self.mul(&gate)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let shape = shape.to_vec();
        self.tape.record(OpKind::Reshape, &[self], move |xs, needs| {
            let original = xs[0].shape().to_vec();
            let out = xs[0].reshape(&shape)?;
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| Ok(vec![Some(g.reshape(&original)?)])) as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }

    pub fn permute(&self, order: &[usize]) -> Result<Var<T>> {
        let order = order.to_vec();
        self.tape.record(OpKind::Permute, &[self], move |xs, needs| {
            let out = xs[0].permute(&order)?;
            let mut inverse = vec![0; order.len()];
            for (i, &o) in order.iter().enumerate() {
                inverse[o] = i;
            }
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| Ok(vec![Some(g.permute(&inverse)?)])) as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<T>> {
        let mut order: Vec<usize> = (0..self.shape().len()).collect();
        if a >= order.len() || b >= order.len() {
            return Err(Error::shape("transpose", format!("axes {a},{b} of {:?}", self.shape())));
        }
        order.swap(a, b);
        self.permute(&order)
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        let axes = axes.to_vec();
        self.tape.record(OpKind::Sum, &[self], move |xs, needs| {
            let shape = xs[0].shape().to_vec();
            let out = xs[0].sum_axes(&axes, keepdim)?;
            let kept: Vec<usize> = shape
                .iter()
                .enumerate()
                .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                .collect();
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| {
                    Ok(vec![Some(g.reshape(&kept)?.broadcast_to(&shape)?)])
                }) as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape().get(a).copied().unwrap_or(1))
            .product();
        self.sum_axes(axes, keepdim)?
            .scale(T::one() / T::of(count as f64))
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean_axes(&axes, false)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        let shape = shape.to_vec();
        self.tape.record(OpKind::Broadcast, &[self], move |xs, needs| {
            let original = xs[0].shape().to_vec();
            let out = xs[0].broadcast_to(&shape)?;
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| Ok(vec![Some(g.sum_to_shape(&original)?)]))
                    as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        self.tape.record(OpKind::Narrow, &[self], move |xs, needs| {
            let shape = xs[0].shape().to_vec();
            let out = xs[0].narrow(axis, start, len)?;
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| {
                    let mut parts = Vec::new();
                    let pad = |n: usize| {
                        let mut s = shape.clone();
                        s[axis] = n;
                        NdArray::zeros(&s)
                    };
                    let before = (start > 0).then(|| pad(start));
                    let after_len = shape[axis] - start - len;
                    let after = (after_len > 0).then(|| pad(after_len));
                    if let Some(b) = &before {
                        parts.push(b);
                    }
                    parts.push(g);
                    if let Some(a) = &after {
                        parts.push(a);
                    }
                    Ok(vec![Some(NdArray::concat(&parts, axis)?)])
                }) as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }

    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.tape.record(OpKind::Matmul, &[self, other], |xs, needs| {
            let (a, b) = (Arc::clone(&xs[0]), Arc::clone(&xs[1]));
            let out = a.matmul(&b)?;
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| {
                    let mut ga = g.matmul_t(false, &b, true)?;
                    if ga.shape() != a.shape() {
                        ga = ga.sum_to_shape(a.shape())?;
                    }
                    let gb = if b.ndim() == 2 && a.ndim() > 2 {
                        // shared right operand: fold the batch into the rows
                        let k = a.shape()[a.ndim() - 1];
                        let n = g.shape()[g.ndim() - 1];
                        let af = a.reshape(&[a.len() / k, k])?;
                        let gf = g.reshape(&[g.len() / n, n])?;
                        af.matmul_t(true, &gf, false)?
                    } else {
                        let gb = a.matmul_t(true, g, false)?;
                        if gb.shape() != b.shape() {
                            gb.sum_to_shape(b.shape())?
                        } else {
                            gb
                        }
                    };
                    Ok(vec![Some(ga), Some(gb)])
                }) as BackwardFn<T>
            });
            Ok((out, bw))
        })
    }

    /// `x W^T + b` over the last axis of `self`, with `W` shaped (out, in).
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.tape.record(OpKind::Linear, &inputs, |xs, needs| {
            let (x, w) = (Arc::clone(&xs[0]), Arc::clone(&xs[1]));
            let b = xs.get(2).cloned();
            if w.ndim() != 2 || x.ndim() == 0 || x.shape()[x.ndim() - 1] != w.shape()[1] {
                return Err(Error::shape(
                    "linear",
                    format!("input {:?} against weight {:?}", x.shape(), w.shape()),
                ));
            }
            let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
            if let Some(b) = &b {
                if b.shape() != [out_f] {
                    return Err(Error::shape("linear", format!("bias {:?}", b.shape())));
                }
            }
            let rows = x.len() / in_f;
            let x2 = x.reshape(&[rows, in_f])?;
            let mut y = x2.matmul_t(false, &w, true)?;
            if let Some(b) = &b {
                for row in y.data_mut().chunks_mut(out_f) {
                    row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = out_f;
            let y = y.into_reshaped(&shape)?;
            let has_bias = b.is_some();
            let bw: Option<BackwardFn<T>> = needs.then(|| {
                Box::new(move |g: &NdArray<T>| {
                    let g2 = g.reshape(&[rows, out_f])?;
                    let gx = g2.matmul(&w)?.into_reshaped(x.shape())?;
                    let gw = g2.matmul_t(true, &x2, false)?;
                    let mut grads = vec![Some(gx), Some(gw)];
                    if has_bias {
                        grads.push(Some(g2.sum_axes(&[0], false)?));
                    }
                    Ok(grads)
                }) as BackwardFn<T>
            });
            Ok((y, bw))
        })
    }

    /// Softmax along `axis`, stabilized by subtracting the (constant) maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let shift = self.tape.constant(self.value.max_axis_keepdim(axis)?);
        let e = self.sub(&shift)?.exp()?;
        let z = e.sum_axes(&[axis], true)?;
        e.div(&z)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<T>> {
        let shift = self.tape.constant(self.value.max_axis_keepdim(axis)?);
        let z = self.sub(&shift)?;
        let lse = z.exp()?.sum_axes(&[axis], true)?.log()?;
        z.sub(&lse)
    }
}
