//! Named parameter storage and initializers.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::ConvGeometry;
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Parameters in insertion order. Values are reference counted so that
/// binding them into a graph does not copy.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F = f32> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<F>>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Mutable access; clones the tensor first if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        value.same_shape("ParamStore::set", self.get(id))?;
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        self.set(id, value)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter in `g`, as differentiable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.leaf_shared(v.clone()) } else { g.constant((**v).clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, for graphs built around externally created leaves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `rows x cols` with orthonormal rows or columns (whichever is shorter), times `scale`.
pub fn orthogonal<F: Real>(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Tensor<F> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    // `short` orthonormal vectors of length `long` by Gram-Schmidt.
    let raw: Tensor<f64> = normal_tensor(&[short, long], rng, 1.0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    for row in raw.data().chunks(long) {
        let mut v = row.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= n);
        basis.push(v);
    }
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let e = if rows >= cols { basis[c][r] } else { basis[r][c] };
        F::cst(e * scale)
    })
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<F: Real>(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| F::cst(rng.random_range(-bound..=bound)))
}

/// A convolution's weight and bias ids plus its geometry.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geo: ConvGeometry,
}

impl Conv {
    pub fn build<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geo: ConvGeometry,
    ) -> Self {
        let cin_g = cin / geo.groups;
        let shape = [cout, cin_g, kernel, kernel];
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &shape, cin_g * kernel * kernel));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, geo }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), Some(b.var(self.bias)), self.geo)
    }

    pub fn out_channels<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).shape()[0]
    }

    /// Sets the kernel to a centred delta so the layer copies input channel
    /// `i % cin_g` of its group into output `i`, with zero bias.
    pub fn set_identity<F: Real>(&self, store: &mut ParamStore<F>) {
        let w = store.get_mut(self.weight);
        let [cout, cin_g, k, _] = w.shape().try_into().expect("rank 4");
        let c = k / 2;
        for (i, e) in w.data_mut().iter_mut().enumerate() {
            let (kx, ky, ic, oc) = (i % k, (i / k) % k, (i / (k * k)) % cin_g, i / (k * k * cin_g));
            *e = if oc < cout && ic == oc % cin_g && ky == c && kx == c { F::one() } else { F::zero() };
        }
        store.get_mut(self.bias).data_mut().fill(F::zero());
    }

    pub fn set_zero<F: Real>(&self, store: &mut ParamStore<F>) {
        store.get_mut(self.weight).data_mut().fill(F::zero());
        store.get_mut(self.bias).data_mut().fill(F::zero());
    }
}

/// Scale and offset of a layer normalization over `channels`.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn build<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], F::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn tokens<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }

    pub fn map<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm_map(x, b.var(self.gamma), b.var(self.beta))
    }
}
