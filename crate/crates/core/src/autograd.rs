//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value, its parent
//! nodes, and a closure mapping the output gradient to parent gradients. Nodes
//! are appended in evaluation order, so walking the tape backwards visits every
//! node after all of its consumers.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(grad_out, parent_values, out_value) -> per-parent gradient`.
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[&Tensor<F>], &Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Rc<Tensor<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    scope: usize,
}

pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
    scopes: Vec<String>,
    scope_stack: Vec<usize>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), scopes: vec![String::from("<root>")], scope_stack: vec![0] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels subsequently recorded nodes with `name`, nested under the current scope.
    pub fn push_scope(&mut self, name: &str) {
        let parent = &self.scopes[*self.scope_stack.last().expect("root scope")];
        let full = if parent == "<root>" { name.to_string() } else { format!("{parent}.{name}") };
        self.scopes.push(full);
        self.scope_stack.push(self.scopes.len() - 1);
    }

    pub fn pop_scope(&mut self) {
        if self.scope_stack.len() > 1 {
            self.scope_stack.pop();
        }
    }

    pub fn scope_of(&self, v: Var) -> &str {
        &self.scopes[self.nodes[v.0].scope]
    }

    /// Scope of the first computed node whose value contains NaN or infinity.
    /// Inputs are skipped so a bad parameter is blamed on the layer using it.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.nodes.iter().find(|n| !n.parents.is_empty() && !n.value.is_finite()).map(|n| self.scopes[n.scope].as_str())
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&self, v: Var) -> Tensor<F> {
        (*self.nodes[v.0].value).clone()
    }

    fn insert(
        &mut self,
        value: Rc<Tensor<F>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
        requires_grad: bool,
    ) -> Var {
        let scope = *self.scope_stack.last().expect("root scope");
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            scope,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.insert(Rc::new(value), vec![], None, true)
    }

    pub fn leaf_shared(&mut self, value: Rc<Tensor<F>>) -> Var {
        self.insert(value, vec![], None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.insert(Rc::new(value), vec![], None, false)
    }

    /// Records a custom operation. The closure is dropped when no parent needs a
    /// gradient.
    pub fn record(&mut self, value: Tensor<F>, parents: &[Var], backward: BackwardFn<F>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.insert(Rc::new(value), parents.iter().map(|p| p.0).collect(), Some(backward), requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::dim("backward", format!("loss must be a scalar, got shape {:?}", lv.shape())));
        }
        self.backward_with(loss, Tensor::full(lv.shape(), F::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        seed.same_shape("backward_with", &self.nodes[output.0].value)?;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor<F>> = node.parents.iter().map(|&p| &*self.nodes[p].value).collect();
            let pg = back(&g, &parent_vals, &node.value);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(gp.shape(), self.nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients indexed by node; intermediate nodes are released during the sweep,
/// leaves are kept.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same<F: Real>(g: &Graph<F>, op: &'static str, a: Var, b: Var) -> Result<()> {
    g.value(a).same_shape(op, g.value(b))
}

// Elementwise and reduction primitives.
impl<F: Real> Graph<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same(self, "add", a, b)?;
        let v = self.value(a).add(self.value(b));
        Ok(self.record(v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same(self, "sub", a, b)?;
        let v = self.value(a).sub(self.value(b));
        Ok(self.record(v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-F::one()))])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same(self, "mul", a, b)?;
        let v = self.value(a).mul(self.value(b));
        Ok(self.record(v, &[a, b], Box::new(|g, p, _| vec![Some(g.mul(p[1])), Some(g.mul(p[0]))])))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).scale(s);
        self.record(v, &[a], Box::new(move |g, _, _| vec![Some(g.scale(s))]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.record(v, &[a], Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * y * (F::one() - y)))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(F::zero()));
        self.record(
            v,
            &[a],
            Box::new(|g, p, _| vec![Some(g.zip_map(p[0], |g, x| if x > F::zero() { g } else { F::zero() }))]),
        )
    }

    /// `max(x, 0)^2`.
    pub fn squared_relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            let r = x.max(F::zero());
            r * r
        });
        self.record(
            v,
            &[a],
            Box::new(|g, p, _| {
                let two = F::cst(2.0);
                vec![Some(g.zip_map(p[0], |g, x| g * two * x.max(F::zero())))]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, &[a], Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::cst(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, F::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.record(v, &[a], Box::new(|g, p, _| vec![Some(g.clone().reshape(p[0].shape()).expect("same numel"))])))
    }

    /// `y[b, c, ..] = s[c] * x[b, c, ..]` for `x` of rank >= 2 and `s: [C]`.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("channel_mul", "need rank >= 2"));
        }
        let c = xs[1];
        self.value(s).ensure_shape("channel_mul", &[c])?;
        let inner: usize = xs[2..].iter().product();
        let v = channel_apply(self.value(x), self.value(s), inner);
        Ok(self.record(
            v,
            &[x, s],
            Box::new(move |g, p, _| {
                let gx = channel_apply(g, p[1], inner);
                let mut gs = vec![F::zero(); c];
                for (blk, (gc, xc)) in g.data().chunks(inner).zip(p[0].data().chunks(inner)).enumerate() {
                    gs[blk % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<F>();
                }
                vec![Some(gx), Some(Tensor::new(vec![c], gs).expect("shape"))]
            }),
        ))
    }

    /// `sigmoid(raw) * a + (1 - sigmoid(raw)) * b`, gated per channel.
    pub fn gated_mix(&mut self, a: Var, b: Var, raw: Var) -> Result<Var> {
        let omega = self.sigmoid(raw);
        let diff = self.sub(a, b)?;
        let scaled = self.channel_mul(diff, omega)?;
        self.add(scaled, b)
    }

    /// `y[b, ..] = s[b, j] * x[b, ..]`.
    pub fn batch_scale(&mut self, x: Var, s: Var, j: usize) -> Result<Var> {
        let bsz = self.shape(x)[0];
        let k = match self.shape(s) {
            [sb, k] if *sb == bsz && j < *k => *k,
            other => {
                return Err(Error::Shape { op: "batch_scale", expected: vec![bsz, j + 1], actual: other.to_vec() })
            }
        };
        let per = self.value(x).numel() / bsz;
        let scale_of = move |s: &Tensor<F>, b: usize| s.data()[b * k + j];
        let mut v = self.value(x).clone();
        for (b, chunk) in v.data_mut().chunks_mut(per).enumerate() {
            let sc = scale_of(self.value(s), b);
            chunk.iter_mut().for_each(|e| *e *= sc);
        }
        Ok(self.record(
            v,
            &[x, s],
            Box::new(move |g, p, _| {
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(p[1].shape());
                for (b, (gc, xc)) in gx.data_mut().chunks_mut(per).zip(p[0].data().chunks(per)).enumerate() {
                    let sc = scale_of(p[1], b);
                    gs.data_mut()[b * k + j] = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                    gc.iter_mut().for_each(|e| *e *= sc);
                }
                vec![Some(gx), Some(gs)]
            }),
        ))
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = match self.shape(x) {
            [r, k] => (*r, *k),
            other => return Err(Error::dim("softmax", format!("expected rank 2, got {other:?}"))),
        };
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(k) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        debug_assert_eq!(v.numel(), rows * k);
        Ok(self.record(
            v,
            &[x],
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (ge, &ye) in gr.iter_mut().zip(yr) {
                        *ge = ye * (*ge - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = F::one() / F::cst(hw as f64);
        let data: Vec<F> = self.value(x).data().chunks(hw).map(|ch| ch.iter().copied().sum::<F>() * inv).collect();
        let v = Tensor::new(vec![b, c], data)?;
        Ok(self.record(
            v,
            &[x],
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for (chunk, &gv) in gx.data_mut().chunks_mut(hw).zip(g.data()) {
                    chunk.iter_mut().for_each(|e| *e = gv * inv);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&vals)?;
        let widths: Vec<usize> = vals.iter().map(|t| t.shape()[1]).collect();
        Ok(self.record(
            v,
            parts,
            Box::new(move |g, _, _| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let s = g.slice_channels(start, w).expect("concat layout");
                        start += w;
                        Some(s)
                    })
                    .collect()
            }),
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, len)?;
        Ok(self.record(
            v,
            &[x],
            Box::new(move |g, p, _| {
                let (b, c, h, w) = p[0].dims4().expect("rank 4");
                let hw = h * w;
                let mut gx = Tensor::zeros(p[0].shape());
                for bi in 0..b {
                    let dst = (bi * c + start) * hw;
                    let src = bi * len * hw;
                    gx.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let v = self.value(x).to_tokens()?;
        Ok(self.record(v, &[x], Box::new(move |g, _, _| vec![Some(g.to_map(h, w).expect("token layout"))])))
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn to_map(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let v = self.value(x).to_map(height, width)?;
        Ok(self.record(v, &[x], Box::new(|g, _, _| vec![Some(g.to_tokens().expect("map layout"))])))
    }
}

#[inline(always)]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn channel_apply<F: Real>(x: &Tensor<F>, s: &Tensor<F>, inner: usize) -> Tensor<F> {
    let c = s.numel();
    let mut out = x.clone();
    for (blk, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let sc = s.data()[blk % c];
        chunk.iter_mut().for_each(|e| *e *= sc);
    }
    out
}
