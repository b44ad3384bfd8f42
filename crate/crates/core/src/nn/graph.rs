//! Define-by-run tape: every op appends a node, `backward` walks them in reverse.

use std::cell::RefCell;

use super::kernels::{self, ConvGeom, Padding};
use super::tensor::{Elem, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Relu(usize),
    Upsample {
        x: usize,
        factor: usize,
    },
    MaxPool2 {
        x: usize,
        arg: Vec<u32>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
        len: usize,
        inner: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        m: usize,
        n: usize,
    },
    Reshape(usize),
    Add(usize, usize),
    Scale(usize, T),
    Clamp01(usize),
    L1 {
        pred: usize,
        target: usize,
    },
    WeightedSum {
        x: usize,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Elem = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of one scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `vars[i]` into `params[i]`.
    pub fn accumulate_into(&self, vars: &[Var], params: &mut ParamSet<T>) -> Result<()> {
        for (v, t) in vars.iter().zip(params.tensors_mut()) {
            if let Some(g) = self.get(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Elem>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_owned<T: Elem>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Splits a shape into `(batch, m, n)` over its last two axes.
fn last_two(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [m, n] => Some((1, *m, *n)),
        [b, m, n] => Some((*b, *m, *n)),
        _ => None,
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a tensor as a leaf; it receives a gradient if `requires_grad`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} with {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Records every parameter as a leaf, in order.
    pub fn params(&self, p: &ParamSet<T>) -> Vec<Var> {
        p.tensors().iter().map(|t| self.leaf(t)).collect()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor::from_parts(nodes[v.0].shape.clone(), nodes[v.0].value.clone())
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].value.len(), 1, "scalar() on a non-scalar node");
        nodes[v.0].value[0]
    }

    /// 2-D cross-correlation. `x: [N,C,H,W]`, `w: [K,C,kh,kw]`, `b: [K]`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: Padding,
    ) -> Result<Var> {
        let (value, geom) = {
            let nodes = self.nodes.borrow();
            let geom = ConvGeom::new(&nodes[x.0].shape, &nodes[w.0].shape, stride, pad, mode)?;
            let bias = match b {
                Some(b) => {
                    if nodes[b.0].shape != [geom.k] {
                        return Err(Error::shape(
                            "conv2d",
                            format!("bias shape {:?}, expected [{}]", nodes[b.0].shape, geom.k),
                        ));
                    }
                    Some(nodes[b.0].value.as_slice())
                }
                None => None,
            };
            let value = kernels::conv2d_forward(&geom, &nodes[x.0].value, &nodes[w.0].value, bias);
            (value, geom)
        };
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.needs_grad(&ids);
        Ok(self.push(
            geom.out_shape(),
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (
                n.shape.clone(),
                n.value.iter().map(|&v| v.max(T::ZERO)).collect(),
            )
        };
        let rg = self.needs_grad(&[x.0]);
        self.push(shape, value, Op::Relu(x.0), rg)
    }

    /// Bilinear upsampling of an NCHW tensor by an integer factor, with
    /// half-pixel aligned centres and replicated borders.
    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let &[b, c, h, w] = n.shape.as_slice() else {
                return Err(Error::shape(
                    "upsample",
                    format!("need NCHW, got {:?}", n.shape),
                ));
            };
            if factor == 0 {
                return Err(Error::shape("upsample", "factor must be >= 1"));
            }
            (
                vec![b, c, h * factor, w * factor],
                kernels::upsample_forward(&n.value, b * c, h, w, factor),
            )
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(shape, value, Op::Upsample { x: x.0, factor }, rg))
    }

    pub fn maxpool2(&self, x: Var) -> Result<Var> {
        let (shape, value, arg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let &[b, c, h, w] = n.shape.as_slice() else {
                return Err(Error::shape(
                    "maxpool2",
                    format!("need NCHW, got {:?}", n.shape),
                ));
            };
            if h < 2 || w < 2 {
                return Err(Error::shape(
                    "maxpool2",
                    format!("spatial size {h}x{w} below 2x2"),
                ));
            }
            let (v, a) = kernels::maxpool2_forward(&n.value, b * c, h, w);
            (vec![b, c, h / 2, w / 2], v, a)
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(shape, value, Op::MaxPool2 { x: x.0, arg }, rg))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (&[n, ca, h, w], &[nb, cb, hb, wb]) = (sa.as_slice(), sb.as_slice()) else {
                return Err(Error::shape(
                    "concat",
                    format!("need NCHW, got {sa:?} and {sb:?}"),
                ));
            };
            if (n, h, w) != (nb, hb, wb) {
                return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
            }
            let (la, lb) = (ca * h * w, cb * h * w);
            let mut out = Vec::with_capacity(n * (la + lb));
            for i in 0..n {
                out.extend_from_slice(&nodes[a.0].value[i * la..(i + 1) * la]);
                out.extend_from_slice(&nodes[b.0].value[i * lb..(i + 1) * lb]);
            }
            (vec![n, ca + cb, h, w], out)
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(shape, value, Op::Concat { a: a.0, b: b.0 }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (shape, value, len, inner) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if axis >= n.shape.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {axis} of {:?}", n.shape),
                ));
            }
            let len = n.shape[axis];
            let inner = numel(&n.shape[axis + 1..]);
            (
                n.shape.clone(),
                kernels::softmax_forward(&n.value, len, inner),
                len,
                inner,
            )
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(shape, value, Op::Softmax { x: x.0, len, inner }, rg))
    }

    /// Matrix product over the last two axes; rank-3 operands are batched.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, dims) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (Some((ba, m, k)), Some((bb, kb, n))) = (last_two(sa), last_two(sb)) else {
                return Err(Error::shape(
                    "matmul",
                    format!("need rank 2 or 3, got {sa:?} and {sb:?}"),
                ));
            };
            if sa.len() != sb.len() || ba != bb || k != kb {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let mut out = vec![T::ZERO; ba * m * n];
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if m * n > 0 {
                par::for_each_chunk(&mut out, m * n, |i, c| {
                    T::gemm(
                        m,
                        k,
                        n,
                        &va[i * m * k..],
                        false,
                        &vb[i * k * n..],
                        false,
                        c,
                        false,
                    );
                });
            }
            let mut shape = sa.clone();
            *shape.last_mut().expect("rank >= 2") = n;
            (shape, out, (ba, m, k, n))
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        let (batch, m, k, n) = dims;
        Ok(self.push(
            shape,
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (shape, value, m, n) = {
            let nodes = self.nodes.borrow();
            let s = &nodes[x.0].shape;
            let Some((_, m, n)) = last_two(s) else {
                return Err(Error::shape(
                    "transpose",
                    format!("need rank 2 or 3, got {s:?}"),
                ));
            };
            let value = transpose_blocks(&nodes[x.0].value, m, n);
            let mut shape = s.clone();
            let r = shape.len();
            shape.swap(r - 1, r - 2);
            (shape, value, m, n)
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(shape, value, Op::Transpose { x: x.0, m, n }, rg))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            if numel(&shape) != nodes[x.0].value.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {shape:?}", nodes[x.0].shape),
                ));
            }
            nodes[x.0].value.clone()
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(shape, value, Op::Reshape(x.0), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            if nodes[a.0].shape != nodes[b.0].shape {
                return Err(Error::shape(
                    "add",
                    format!("{:?} vs {:?}", nodes[a.0].shape, nodes[b.0].shape),
                ));
            }
            let v = nodes[a.0]
                .value
                .iter()
                .zip(&nodes[b.0].value)
                .map(|(&x, &y)| x + y)
                .collect();
            (nodes[a.0].shape.clone(), v)
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(shape, value, Op::Add(a.0, b.0), rg))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].shape.clone(),
                nodes[x.0].value.iter().map(|&v| v * s).collect(),
            )
        };
        let rg = self.needs_grad(&[x.0]);
        self.push(shape, value, Op::Scale(x.0, s), rg)
    }

    /// Clamps to `[0, 1]`; the gradient is zero outside that interval.
    pub fn clamp01(&self, x: Var) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0]
                .value
                .iter()
                .map(|&v| {
                    if v < T::ZERO {
                        T::ZERO
                    } else if v > T::ONE {
                        T::ONE
                    } else {
                        v
                    }
                })
                .collect();
            (nodes[x.0].shape.clone(), v)
        };
        let rg = self.needs_grad(&[x.0]);
        self.push(shape, value, Op::Clamp01(x.0), rg)
    }

    /// Mean absolute error; the subgradient at zero residual is zero.
    pub fn l1_loss(&self, pred: Var, target: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (p, t) = (&nodes[pred.0], &nodes[target.0]);
            if p.shape != t.shape {
                return Err(Error::shape(
                    "l1_loss",
                    format!("{:?} vs {:?}", p.shape, t.shape),
                ));
            }
            if p.value.is_empty() {
                return Err(Error::shape("l1_loss", "empty input"));
            }
            let s: f64 = p
                .value
                .iter()
                .zip(&t.value)
                .map(|(&a, &b)| (a - b).abs().to_f64())
                .sum();
            T::from_f64(s / p.value.len() as f64)
        };
        let rg = self.needs_grad(&[pred.0, target.0]);
        Ok(self.push(
            vec![],
            vec![value],
            Op::L1 {
                pred: pred.0,
                target: target.0,
            },
            rg,
        ))
    }

    /// `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&self, x: Var, weights: Vec<T>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            if nodes[x.0].value.len() != weights.len() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!(
                        "{} values, {} weights",
                        nodes[x.0].value.len(),
                        weights.len()
                    ),
                ));
            }
            let s: f64 = nodes[x.0]
                .value
                .iter()
                .zip(&weights)
                .map(|(&a, &b)| (a * b).to_f64())
                .sum();
            T::from_f64(s)
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(vec![], vec![value], Op::WeightedSum { x: x.0, weights }, rg))
    }

    /// Reverse-mode sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let rg = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(
                        geom,
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        rg(*x),
                    );
                    if let Some(dx) = cg.dx {
                        add_owned(&mut grads[*x], dx);
                    }
                    if rg(*w) {
                        add_owned(&mut grads[*w], cg.dw);
                    }
                    if let Some(b) = b.filter(|&b| rg(b)) {
                        add_owned(&mut grads[b], cg.db);
                    }
                }
                Op::Relu(x) => {
                    let d = nodes[*x]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    add_owned(&mut grads[*x], d);
                }
                Op::Upsample { x, factor } => {
                    let s = &nodes[*x].shape;
                    let d = kernels::upsample_backward(&g, s[0] * s[1], s[2], s[3], *factor);
                    add_owned(&mut grads[*x], d);
                }
                Op::MaxPool2 { x, arg } => {
                    let s = &nodes[*x].shape;
                    let d = kernels::maxpool2_backward(&g, arg, s[0] * s[1], s[2], s[3]);
                    add_owned(&mut grads[*x], d);
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                    let hw = sa[2] * sa[3];
                    let (la, lb) = (sa[1] * hw, sb[1] * hw);
                    if rg(*a) {
                        let d: Vec<T> = (0..sa[0])
                            .flat_map(|i| g[i * (la + lb)..i * (la + lb) + la].iter().copied())
                            .collect();
                        add_owned(&mut grads[*a], d);
                    }
                    if rg(*b) {
                        let d: Vec<T> = (0..sa[0])
                            .flat_map(|i| {
                                g[i * (la + lb) + la..(i + 1) * (la + lb)].iter().copied()
                            })
                            .collect();
                        add_owned(&mut grads[*b], d);
                    }
                }
                Op::Softmax { x, len, inner } => {
                    let d = kernels::softmax_backward(&node.value, &g, *len, *inner);
                    add_owned(&mut grads[*x], d);
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if rg(*a) && m * k > 0 {
                        let mut da = vec![T::ZERO; batch * m * k];
                        par::for_each_chunk(&mut da, m * k, |i, c| {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &vb[i * k * n..],
                                true,
                                c,
                                false,
                            );
                        });
                        add_owned(&mut grads[*a], da);
                    }
                    if rg(*b) && k * n > 0 {
                        let mut db = vec![T::ZERO; batch * k * n];
                        par::for_each_chunk(&mut db, k * n, |i, c| {
                            T::gemm(
                                k,
                                m,
                                n,
                                &va[i * m * k..],
                                true,
                                &g[i * m * n..],
                                false,
                                c,
                                false,
                            );
                        });
                        add_owned(&mut grads[*b], db);
                    }
                }
                Op::Transpose { x, m, n } => {
                    add_owned(&mut grads[*x], transpose_blocks(&g, *n, *m));
                }
                Op::Reshape(x) => add_owned(&mut grads[*x], g),
                Op::Add(a, b) => {
                    if rg(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if rg(*b) {
                        add_owned(&mut grads[*b], g);
                    }
                }
                Op::Scale(x, s) => {
                    add_owned(&mut grads[*x], g.iter().map(|&v| v * *s).collect());
                }
                Op::Clamp01(x) => {
                    let d = nodes[*x]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| {
                            if v < T::ZERO || v > T::ONE {
                                T::ZERO
                            } else {
                                gv
                            }
                        })
                        .collect();
                    add_owned(&mut grads[*x], d);
                }
                Op::L1 { pred, target } => {
                    let (p, t) = (&nodes[*pred].value, &nodes[*target].value);
                    let scale = g[0] / T::from_f64(p.len() as f64);
                    let sign: Vec<T> = p
                        .iter()
                        .zip(t)
                        .map(|(&a, &b)| {
                            if a > b {
                                scale
                            } else if a < b {
                                -scale
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    if rg(*target) {
                        let neg: Vec<T> = sign.iter().map(|&v| -v).collect();
                        add_owned(&mut grads[*target], neg);
                    }
                    if rg(*pred) {
                        add_owned(&mut grads[*pred], sign);
                    }
                }
                Op::WeightedSum { x, weights } => {
                    add_owned(&mut grads[*x], weights.iter().map(|&w| w * g[0]).collect());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Transposes each `m x n` block of a contiguous batch.
fn transpose_blocks<T: Elem>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    if m * n == 0 {
        return out;
    }
    par::for_each_chunk(&mut out, m * n, |bi, o| {
        let src = &x[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                o[j * m + i] = src[i * n + j];
            }
        }
    });
    out
}
