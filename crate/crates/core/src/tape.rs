//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node holding
//! its value and an adjoint rule. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a topological order by construction.
//! Gradients accumulate across calls until [`Tape::zero_grad`].

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, gemm, gemm_nt, gemm_tn, numel, SparseMap, Tensor};

/// Adjoint rule: given the upstream gradient, the input values, the output
/// value and which inputs need a gradient, return one gradient per input.
pub type Backward = Box<dyn Fn(&[f64], &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, n.op, n.value.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: &'static str, value: Tensor, parents: Vec<usize>, backward: Option<Backward>) -> Result<Var<'_>> {
        let value = value.check_finite(op)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            backward,
        });
        self.grads.borrow_mut().push(None);
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        let value = value.check_finite("leaf")?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        self.grads.borrow_mut().push(None);
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is recorded by [`Tape::backward`].
    pub fn variable(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    /// Records a user-defined operation. `value` is the already computed
    /// output; `backward` is its adjoint rule.
    pub fn custom<'t>(&'t self, op: &'static str, inputs: &[Var<'t>], value: Tensor, backward: Backward) -> Result<Var<'t>> {
        self.push(op, value, inputs.iter().map(|v| v.id).collect(), Some(backward))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no tensors given"));
        }
        let (value, extents) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            let value = Tensor::concat(&vals, axis)?;
            let extents: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
            (value, extents)
        };
        let outer: usize = value.shape()[..axis].iter().product();
        let inner: usize = value.shape()[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        self.push(
            "concat",
            value,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |g, _, _, needs| {
                let mut offset = 0;
                extents
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let start = offset;
                        offset += n;
                        need.then(|| {
                            let mut out = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                out.extend_from_slice(&g[base..base + n * inner]);
                            }
                            out
                        })
                    })
                    .collect()
            })),
        )
    }

    /// Back-propagates from a scalar `loss`, adding into the stored gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = rule(&g, &inputs, &node.value, &needs);
                for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    if let (Some(pg), true) = (pg, need) {
                        debug_assert_eq!(pg.len(), nodes[p].value.numel(), "{} adjoint", node.op);
                        match &mut local[p] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
            if node.requires_grad {
                let mut grads = self.grads.borrow_mut();
                match &mut grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }
}

fn unary_map<'t>(
    x: Var<'t>,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var<'t>> {
    let value = x.with_value(|v| v.map(&f));
    x.tape.push(
        op,
        value,
        vec![x.id],
        Some(Box::new(move |g, inp, out, _| {
            vec![Some(
                g.iter()
                    .zip(inp[0].data().iter().zip(out.data()))
                    .map(|(g, (&xi, &yi))| g * dfdx(xi, yi))
                    .collect(),
            )]
        })),
    )
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.with_value(|v| Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("consistent node"))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of the last loss(es) with respect to this value.
    pub fn grad(&self) -> Option<Tensor> {
        let g = self.tape.grads.borrow()[self.id].clone()?;
        Some(Tensor::new(self.shape(), g).expect("gradient matches value shape"))
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a, b)));
        }
        Ok(())
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: fn(f64, f64) -> f64, rule: Backward) -> Result<Var<'t>> {
        self.same_shape(&other, op)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.zip_map(&nodes[other.id].value, op, f)?
        };
        self.tape.push(op, value, vec![self.id, other.id], Some(rule))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "add",
            |a, b| a + b,
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            Box::new(|g, _, _, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            Box::new(|g, inp, _, needs| {
                let prod = |w: &Tensor| g.iter().zip(w.data()).map(|(g, w)| g * w).collect();
                vec![needs[0].then(|| prod(inp[1])), needs[1].then(|| prod(inp[0]))]
            }),
        )
    }

    /// `self + bias`, where `bias` has the shape of a trailing suffix of `self`.
    pub fn add_broadcast(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (xs, bs) = (self.shape(), bias.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return Err(Error::shape("add_broadcast", format!("{:?} + {:?}", xs, bs)));
        }
        let inner = numel(&bs);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let b = nodes[bias.id].value.data();
            let mut v = nodes[self.id].value.clone();
            v.set_requires_grad(false);
            for chunk in v.data_mut().chunks_mut(inner.max(1)) {
                chunk.iter_mut().zip(b).for_each(|(x, b)| *x += b);
            }
            v
        };
        self.tape.push(
            "add_broadcast",
            value,
            vec![self.id, bias.id],
            Some(Box::new(move |g, _, _, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; inner];
                    for chunk in g.chunks(inner.max(1)) {
                        acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    acc
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            })),
        )
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        unary_map(self, "scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        unary_map(self, "add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        unary_map(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.with_value(|v| v.data().iter().any(|&x| x < 0.0)) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        unary_map(self, "sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        unary_map(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[rhs.id].value)?
        };
        self.tape.push(
            "matmul",
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, inp, _, needs| {
                let (m, k, n) = (inp[0].shape()[0], inp[0].shape()[1], inp[1].shape()[1]);
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, inp[1].data(), &mut ga, m, n, k);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(inp[0].data(), g, &mut gb, k, m, n);
                    gb
                });
                vec![ga, gb]
            })),
        )
    }

    /// Batched product `[g,m,k]·[g,k,n]`.
    pub fn bmm(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.bmm(&nodes[rhs.id].value)?
        };
        self.tape.push(
            "bmm",
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, inp, _, needs| {
                let s = inp[0].shape();
                let (b, m, k, n) = (s[0], s[1], s[2], inp[1].shape()[2]);
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; b * m * k];
                    for i in 0..b {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &inp[1].data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; b * k * n];
                    for i in 0..b {
                        gemm_tn(
                            &inp[0].data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            })),
        )
    }

    /// Batched product against transposed right operand: `[g,m,k]·[g,n,k]ᵀ`.
    pub fn bmm_nt(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            match (a.shape(), b.shape()) {
                (&[g, m, k], &[g2, n, k2]) if g == g2 && k == k2 => {
                    let mut out = vec![0.0; g * m * n];
                    for i in 0..g {
                        gemm_nt(
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &b.data()[i * n * k..(i + 1) * n * k],
                            &mut out[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::new(vec![g, m, n], out)?
                }
                (sa, sb) => return Err(Error::shape("bmm_nt", format!("{:?} x {:?}ᵀ", sa, sb))),
            }
        };
        self.tape.push(
            "bmm_nt",
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, inp, _, needs| {
                let s = inp[0].shape();
                let (b, m, k, n) = (s[0], s[1], s[2], inp[1].shape()[1]);
                // dA = G·B, dB = Gᵀ·A
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; b * m * k];
                    for i in 0..b {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            &inp[1].data()[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; b * n * k];
                    for i in 0..b {
                        gemm_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &inp[0].data()[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            })),
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis, "softmax")?;
        let value = self.with_value(|v| v.softmax(axis))?;
        self.tape.push(
            "softmax",
            value,
            vec![self.id],
            Some(Box::new(move |g, _, y, _| {
                let y = y.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|v| v.reshape(shape))?;
        self.tape.push(
            "reshape",
            value,
            vec![self.id],
            Some(Box::new(|g, _, _, _| vec![Some(g.to_vec())])),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|v| v.permute(axes))?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape = value.shape().to_vec();
        self.tape.push(
            "permute",
            value,
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                let gt = Tensor::new(out_shape.clone(), g.to_vec()).expect("gradient shape");
                vec![Some(gt.permute(&inverse).expect("inverse permutation").into_data())]
            })),
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let value = self.with_value(|v| v.slice(axis, start, len))?;
        let (outer, n, inner) = axis_split(&shape, axis, "slice")?;
        self.tape.push(
            "slice",
            value,
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            })),
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let (value, n) = self.with_value(|v| (Tensor::scalar(v.sum()), v.numel()));
        self.tape.push(
            "sum",
            value,
            vec![self.id],
            Some(Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])])),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.with_value(|v| v.numel());
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, n, inner) = axis_split(&shape, axis, "sum_axis")?;
        let value = self.with_value(|v| v.sum_axis(axis))?;
        self.tape.push(
            "sum_axis",
            value,
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Applies a fixed sparse linear operator to the flattened value.
    pub fn linear_map(self, map: &Arc<SparseMap>, out_shape: &[usize]) -> Result<Var<'t>> {
        if numel(out_shape) != map.out_len() {
            return Err(Error::shape(
                "linear_map",
                format!("map yields {} values, shape {:?}", map.out_len(), out_shape),
            ));
        }
        let data = self.with_value(|v| map.apply(v.data()))?;
        let value = Tensor::new(out_shape.to_vec(), data)?;
        let map = Arc::clone(map);
        self.tape.push(
            "linear_map",
            value,
            vec![self.id],
            Some(Box::new(move |g, _, _, _| {
                vec![Some(map.apply_transpose(g).expect("gradient length matches map"))]
            })),
        )
    }
}
