//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar root walks the recorded nodes in reverse
//! and accumulates exact cotangents for every participating variable.
//!
//! The op set is deliberately small: elementwise arithmetic with NumPy-style
//! broadcasting, matrix products, axis reductions, shape movement, and the
//! handful of nonlinearities the models in this crate need. Gradients are
//! exact reverse-mode; the test module checks each op against central finite
//! differences.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use statrs::function::gamma::{digamma, ln_gamma};
use std::cell::RefCell;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Cotangents produced by [`Tape::backward`].
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a leaf tensor. Leaves have no parents; constants and
    /// trainable parameters are both leaves, the distinction is only
    /// whether their gradient is ever queried.
    pub fn var(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Register a 0-d scalar leaf.
    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.var(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Reverse sweep from a scalar root. Panics if the root is not a
    /// single-element tensor.
    pub fn backward(&self, root: Var<'_>) -> Gradients<'_> {
        let n = {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[root.idx].value.len(),
                1,
                "backward requires a scalar root, got shape {:?}",
                nodes[root.idx].value.shape()
            );
            nodes.len()
        };
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        let root_shape = self.value_of(root.idx).shape().to_vec();
        grads[root.idx] = Some(ArrayD::ones(IxDyn(&root_shape)));

        for i in (0..=root.idx).rev() {
            let cot = match &grads[i] {
                Some(c) => c.clone(),
                None => continue,
            };
            let (parents, parent_cots) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[i];
                match &node.backward {
                    Some(back) => (node.parents.clone(), back(&cot)),
                    None => continue,
                }
            };
            debug_assert_eq!(parents.len(), parent_cots.len());
            for (p, pc) in parents.into_iter().zip(parent_cots) {
                debug_assert_eq!(
                    pc.shape(),
                    self.value_of(p).shape(),
                    "cotangent shape mismatch at node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &pc,
                    slot @ None => *slot = Some(pc),
                }
            }
        }
        Gradients { tape: self, grads }
    }
}

impl<'t> Gradients<'t> {
    /// Gradient with respect to `v`; zeros if `v` did not influence the root.
    pub fn wrt(&self, v: Var<'t>) -> ArrayD<f64> {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let shape = self.tape.value_of(v.idx).shape().to_vec();
                ArrayD::zeros(IxDyn(&shape))
            }
        }
    }
}

/// NumPy-style broadcast shape of two operand shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "cannot broadcast shapes {a:?} and {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn bc(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.shape() == shape {
        a.clone()
    } else {
        a.broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?} failed", a.shape(), shape))
            .to_owned()
    }
}

/// Sum a cotangent down to `target` shape, undoing broadcasting.
fn reduce_to_shape(cot: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut r = cot.clone();
    while r.ndim() > target.len() {
        r = r.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn binary<F, G>(self, other: Var<'t>, f: F, back: G) -> Var<'t>
    where
        F: Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        G: Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    {
        self.same_tape(&other);
        let av = self.value();
        let bv = other.value();
        let shape = broadcast_shape(av.shape(), bv.shape());
        let out = f(&bc(&av, &shape), &bc(&bv, &shape));
        let (ashape, bshape) = (av.shape().to_vec(), bv.shape().to_vec());
        let (a_rc, b_rc) = (Rc::clone(&av), Rc::clone(&bv));
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(move |cot| {
                let (ca, cb) = back(cot, &a_rc, &b_rc);
                vec![reduce_to_shape(&ca, &ashape), reduce_to_shape(&cb, &bshape)]
            })),
        )
    }

    fn unary<F, G>(self, f: F, dback: G) -> Var<'t>
    where
        F: Fn(&ArrayD<f64>) -> ArrayD<f64>,
        G: Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    {
        let xv = self.value();
        let out = f(&xv);
        let out_rc = Rc::new(out.clone());
        let x_rc = Rc::clone(&xv);
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| vec![cot * &dback(&x_rc, &out_rc)])),
        )
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a + b, |cot, _, _| (cot.clone(), cot.clone()))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a - b, |cot, _, _| (cot.clone(), -cot))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(
            o,
            |a, b| a * b,
            |cot, a, b| {
                let shape = cot.shape().to_vec();
                (cot * &bc(b, &shape), cot * &bc(a, &shape))
            },
        )
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(
            o,
            |a, b| a / b,
            |cot, a, b| {
                let shape = cot.shape().to_vec();
                let bb = bc(b, &shape);
                let ab = bc(a, &shape);
                (cot / &bb, -(cot * &ab) / (&bb * &bb))
            },
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |x, _| ArrayD::from_elem(x.raw_dim(), -1.0))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |x, _| ArrayD::from_elem(x.raw_dim(), c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |x, _| ArrayD::ones(x.raw_dim()))
    }

    /// Elementwise multiply with a constant tensor (not differentiated).
    pub fn mul_const(self, c: &ArrayD<f64>) -> Var<'t> {
        let xv = self.value();
        let shape = broadcast_shape(xv.shape(), c.shape());
        let out = &bc(&xv, &shape) * &bc(c, &shape);
        let xshape = xv.shape().to_vec();
        let cc = bc(c, &shape);
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| vec![reduce_to_shape(&(cot * &cc), &xshape)])),
        )
    }

    /// Elementwise add of a constant tensor (not differentiated).
    pub fn add_const(self, c: &ArrayD<f64>) -> Var<'t> {
        let xv = self.value();
        let shape = broadcast_shape(xv.shape(), c.shape());
        let out = &bc(&xv, &shape) + &bc(c, &shape);
        let xshape = xv.shape().to_vec();
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| vec![reduce_to_shape(cot, &xshape)])),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            |x| x.mapv(|v| v.max(0.0)),
            |x, _| x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| x.mapv(|v| if v > 0.0 { v } else { slope * v }),
            move |x, _| x.mapv(|v| if v > 0.0 { 1.0 } else { slope }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| x.mapv(sigmoid_f),
            |_, out| out.mapv(|s| s * (1.0 - s)),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(|x| x.mapv(f64::tanh), |_, out| out.mapv(|t| 1.0 - t * t))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(|x| x.mapv(f64::exp), |_, out| out.clone())
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(|x| x.mapv(f64::ln), |x, _| x.mapv(|v| 1.0 / v))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(|x| x.mapv(f64::sqrt), |_, out| out.mapv(|s| 0.5 / s))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x.mapv(|v| v * v), |x, _| x.mapv(|v| 2.0 * v))
    }

    /// |x|, with subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        self.unary(
            |x| x.mapv(f64::abs),
            |x, _| x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        )
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(|x| x.mapv(|v| 1.0 / v), |x, _| x.mapv(|v| -1.0 / (v * v)))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(self) -> Var<'t> {
        self.unary(|x| x.mapv(softplus_f), |x, _| x.mapv(sigmoid_f))
    }

    /// Log-gamma; derivative is the digamma function.
    pub fn lgamma(self) -> Var<'t> {
        self.unary(|x| x.mapv(ln_gamma), |x, _| x.mapv(digamma))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let av = self.value();
        let bv = o.value();
        let out = as2(&av).dot(&as2(&bv)).into_dyn();
        let (a_rc, b_rc) = (Rc::clone(&av), Rc::clone(&bv));
        self.tape.push(
            out,
            vec![self.idx, o.idx],
            Some(Box::new(move |cot| {
                let c = as2(cot);
                vec![
                    c.dot(&as2(&b_rc).t()).into_dyn(),
                    as2(&a_rc).t().dot(&c).into_dyn(),
                ]
            })),
        )
    }

    /// Batched matrix product: (g, m, k) x (g, k, n) -> (g, m, n).
    pub fn bmm(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let av = self.value();
        let bv = o.value();
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = ArrayD::zeros(IxDyn(&[g, m, n]));
        for i in 0..g {
            let a2 = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let b2 = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            out.index_axis_mut(Axis(0), i).assign(&a2.dot(&b2));
        }
        let (a_rc, b_rc) = (Rc::clone(&av), Rc::clone(&bv));
        self.tape.push(
            out,
            vec![self.idx, o.idx],
            Some(Box::new(move |cot| {
                let mut ca = ArrayD::zeros(IxDyn(&[g, m, k]));
                let mut cb = ArrayD::zeros(IxDyn(&[g, k, n]));
                for i in 0..g {
                    let c2 = cot
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let a2 = a_rc
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let b2 = b_rc
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    ca.index_axis_mut(Axis(0), i).assign(&c2.dot(&b2.t()));
                    cb.index_axis_mut(Axis(0), i).assign(&a2.t().dot(&c2));
                }
                vec![ca, cb]
            })),
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), xv.sum());
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| {
                let c = *cot.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), c)]
            })),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping the reduced axes as size 1.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let mut out = (*xv).clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| vec![bc(cot, &in_shape)])),
        )
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let out = bc(&xv, shape);
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| vec![reduce_to_shape(cot, &in_shape)])),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let out = xv
            .to_shape(IxDyn(shape))
            .expect("reshape incompatible")
            .to_owned();
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| {
                vec![cot.to_shape(IxDyn(&in_shape)).unwrap().to_owned()]
            })),
        )
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let xv = self.value();
        let out = (*xv)
            .clone()
            .permuted_axes(perm.to_vec())
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| {
                vec![cot
                    .clone()
                    .permuted_axes(inv.clone())
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Index along `axis`, removing it (rank drops by one).
    pub fn select(self, axis: usize, i: usize) -> Var<'t> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let out = xv.index_axis(Axis(axis), i).to_owned();
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| {
                let mut g = ArrayD::zeros(IxDyn(&in_shape));
                g.index_axis_mut(Axis(axis), i).assign(cot);
                vec![g]
            })),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis` (rank preserved).
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let out = xv
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |cot| {
                let mut g = ArrayD::zeros(IxDyn(&in_shape));
                g.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(cot);
                vec![g]
            })),
        )
    }

    /// Softmax along `axis`, shift-stabilized. The max shift is treated as
    /// a constant, which is exact because softmax is shift-invariant.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let xv = self.value();
        let mut mx = xv.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        mx = mx.insert_axis(Axis(axis));
        let shifted = self.add_const(&mx.mapv(|v| -v));
        let e = shifted.exp();
        let denom = e.sum_axes(&[axis]);
        e.div(denom)
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}

/// Stack rank-r vars along a new axis, producing rank r+1.
pub fn stack<'t>(axis: usize, vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty());
    let tape = vars[0].tape;
    let values: Vec<Rc<ArrayD<f64>>> = vars.iter().map(|v| v.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::stack(Axis(axis), &views).expect("stack shape mismatch");
    let parents: Vec<usize> = vars.iter().map(|v| v.idx).collect();
    tape.push(
        out,
        parents,
        Some(Box::new(move |cot| {
            (0..cot.shape()[axis])
                .map(|i| cot.index_axis(Axis(axis), i).to_owned())
                .collect()
        })),
    )
}

/// Layer normalization over the last axis with learnable gain and bias.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
    let last = x.shape().len() - 1;
    let mean = x.mean_axes(&[last]);
    let centered = x - mean;
    let var = centered.square().mean_axes(&[last]);
    let norm = centered / var.add_scalar(eps).sqrt();
    norm * gain + bias
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_f(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
