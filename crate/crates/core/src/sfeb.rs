//! Structural fidelity enhancement on skip connections: a convolutional spatial
//! path and a wavelet-domain path, fused by a two-way softmax gate computed
//! from pooled features.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::ConvGeometry;
use crate::params::{fan_in_uniform, Bound, Conv, Norm, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

const SCALES: [usize; 3] = [3, 5, 7];

/// Large-kernel stand-in: depthwise 7x7, then depthwise 3x3, then pointwise 1x1.
#[derive(Clone, Copy, Debug)]
pub struct LsConv {
    pub large: Conv,
    pub small: Conv,
    pub point: Conv,
}

impl LsConv {
    pub fn build<F: Real>(store: &mut ParamStore<F>, rng: &mut SeededRng, name: &str, c: usize) -> Self {
        Self {
            large: Conv::build(store, rng, &format!("{name}.dw7"), c, c, 7, ConvGeometry::depthwise(7, c)),
            small: Conv::build(store, rng, &format!("{name}.dw3"), c, c, 3, ConvGeometry::depthwise(3, c)),
            point: Conv::build(store, rng, &format!("{name}.pw"), c, c, 1, ConvGeometry::same(1)),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let y = self.large.forward(g, b, x)?;
        let y = self.small.forward(g, b, y)?;
        self.point.forward(g, b, y)
    }

    pub fn set_identity<F: Real>(&self, store: &mut ParamStore<F>) {
        for conv in [self.large, self.small, self.point] {
            conv.set_identity(store);
        }
    }
}

/// Depthwise 3x3 followed by pointwise 1x1.
#[derive(Clone, Copy, Debug)]
pub struct DsConv {
    pub depth: Conv,
    pub point: Conv,
}

impl DsConv {
    pub fn build<F: Real>(store: &mut ParamStore<F>, rng: &mut SeededRng, name: &str, c: usize) -> Self {
        Self {
            depth: Conv::build(store, rng, &format!("{name}.dw3"), c, c, 3, ConvGeometry::depthwise(3, c)),
            point: Conv::build(store, rng, &format!("{name}.pw"), c, c, 1, ConvGeometry::same(1)),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let y = self.depth.forward(g, b, x)?;
        self.point.forward(g, b, y)
    }
}

#[derive(Clone, Debug)]
pub struct Sfeb {
    pub channels: usize,
    pub spatial_conv: Conv,
    pub spatial_norm: Norm,
    pub spatial_ls: LsConv,
    pub ll_convs: [Conv; 3],
    pub ll_reduce: Conv,
    pub ll_ls: LsConv,
    pub hf_convs: [Conv; 3],
    pub hf_reduce: Conv,
    pub hf_norm: Norm,
    pub hf_ds: DsConv,
    /// `[2C, 2]`, producing `(w_freq, w_spatial)` logits.
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    /// Skips the high-frequency layer norm; only used to build exact identity paths in tests.
    pub hf_norm_enabled: bool,
}

/// Intermediate maps of one evaluation, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct SfebTrace {
    pub spatial: Var,
    pub freq: Var,
    /// Softmax weights `[B, 2]` as `(w_freq, w_spatial)`.
    pub gate: Var,
    pub out: Var,
}

fn multi_scale<F: Real>(store: &mut ParamStore<F>, rng: &mut SeededRng, name: &str, c: usize) -> [Conv; 3] {
    SCALES.map(|k| Conv::build(store, rng, &format!("{name}{k}"), c, c, k, ConvGeometry::same(k)))
}

impl Sfeb {
    pub fn build<F: Real>(store: &mut ParamStore<F>, rng: &mut SeededRng, name: &str, c: usize) -> Self {
        let c3 = 3 * c;
        Self {
            channels: c,
            spatial_conv: Conv::build(store, rng, &format!("{name}.spatial.conv3"), c, c, 3, ConvGeometry::same(3)),
            spatial_norm: Norm::build(store, &format!("{name}.spatial.ln"), c),
            spatial_ls: LsConv::build(store, rng, &format!("{name}.spatial.ls"), c),
            ll_convs: multi_scale(store, rng, &format!("{name}.ll.conv"), c),
            ll_reduce: Conv::build(store, rng, &format!("{name}.ll.reduce"), c3, c, 1, ConvGeometry::same(1)),
            ll_ls: LsConv::build(store, rng, &format!("{name}.ll.ls"), c),
            hf_convs: multi_scale(store, rng, &format!("{name}.hf.conv"), c3),
            hf_reduce: Conv::build(store, rng, &format!("{name}.hf.reduce"), 3 * c3, c3, 1, ConvGeometry::same(1)),
            hf_norm: Norm::build(store, &format!("{name}.hf.ln"), c3),
            hf_ds: DsConv::build(store, rng, &format!("{name}.hf.ds"), c3),
            gate_weight: store.add(format!("{name}.gate.weight"), fan_in_uniform(rng, &[2 * c, 2], 2 * c)),
            gate_bias: store.add(format!("{name}.gate.bias"), Tensor::zeros(&[2])),
            hf_norm_enabled: true,
        }
    }

    fn parallel<F: Real>(convs: &[Conv; 3], g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let outs = convs.iter().map(|c| c.forward(g, b, x)).collect::<Result<Vec<_>>>()?;
        g.concat_channels(&outs)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        Ok(self.trace(g, b, x)?.out)
    }

    pub fn trace<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<SfebTrace> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::Shape { op: "sfeb", expected: vec![self.channels], actual: vec![c] });
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("sfeb", format!("spatial size {h}x{w} must be even")));
        }

        g.push_scope("spatial");
        let s = self.spatial_conv.forward(g, b, x)?;
        let s = self.spatial_norm.map(g, b, s)?;
        let s = g.relu(s);
        let spatial = self.spatial_ls.forward(g, b, s)?;
        g.pop_scope();

        g.push_scope("low_freq");
        let bands = g.dwt2(x)?;
        let ll = g.slice_channels(bands, 0, c)?;
        let ll = Self::parallel(&self.ll_convs, g, b, ll)?;
        let ll = self.ll_reduce.forward(g, b, ll)?;
        let ll = self.ll_ls.forward(g, b, ll)?;
        g.pop_scope();

        g.push_scope("high_freq");
        let hf = g.slice_channels(bands, c, 3 * c)?;
        let hf = Self::parallel(&self.hf_convs, g, b, hf)?;
        let hf = self.hf_reduce.forward(g, b, hf)?;
        let hf = if self.hf_norm_enabled { self.hf_norm.map(g, b, hf)? } else { hf };
        let hf = g.relu(hf);
        let hf = self.hf_ds.forward(g, b, hf)?;
        let packed = g.concat_channels(&[ll, hf])?;
        let freq = g.idwt2(packed)?;
        g.pop_scope();

        g.push_scope("gate");
        let both = g.concat_channels(&[freq, spatial])?;
        let pooled = g.global_avg_pool(both)?;
        let logits = g.linear(pooled, b.var(self.gate_weight), Some(b.var(self.gate_bias)))?;
        let gate = g.softmax(logits)?;
        let wf = g.batch_scale(freq, gate, 0)?;
        let ws = g.batch_scale(spatial, gate, 1)?;
        let out = g.add(wf, ws)?;
        g.pop_scope();
        if !g.value(out).is_finite() {
            return Err(Error::Numerical { layer: g.first_non_finite().unwrap_or("sfeb").to_string() });
        }
        Ok(SfebTrace { spatial, freq, gate, out })
    }

    /// Makes the frequency path an exact identity for inputs whose detail bands
    /// stay above `-offset`: delta kernels throughout, the high-frequency norm
    /// disabled, and `offset` added before the ReLU and removed after it.
    pub fn set_identity_frequency_path<F: Real>(&mut self, store: &mut ParamStore<F>, offset: f64) {
        for (i, conv) in self.ll_convs.iter().chain(&self.hf_convs).enumerate() {
            if i % 3 == 0 {
                conv.set_identity(store);
            } else {
                conv.set_zero(store);
            }
        }
        self.ll_reduce.set_identity(store);
        self.ll_ls.set_identity(store);
        self.hf_reduce.set_identity(store);
        self.hf_ds.depth.set_identity(store);
        self.hf_ds.point.set_identity(store);
        store.get_mut(self.hf_reduce.bias).data_mut().fill(F::cst(offset));
        store.get_mut(self.hf_ds.point.bias).data_mut().fill(F::cst(-offset));
        self.hf_norm_enabled = false;
    }

    /// Saturates the gate so that `(w_freq, w_spatial) = (1, 0)` or `(0, 1)`.
    pub fn force_gate<F: Real>(&self, store: &mut ParamStore<F>, freq: bool) {
        store.get_mut(self.gate_weight).data_mut().fill(F::zero());
        let s = if freq { 50.0 } else { -50.0 };
        store
            .set(self.gate_bias, Tensor::new(vec![2], vec![F::cst(s), F::cst(-s)]).expect("shape"))
            .expect("gate bias shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::rng::{random_tensor, seeded};
    use crate::wavelet::dwt2;

    fn setup(c: usize, seed: u64) -> (ParamStore<f64>, Sfeb) {
        let mut store = ParamStore::new();
        let s = Sfeb::build(&mut store, &mut seeded(seed), "sfeb", c);
        (store, s)
    }

    fn run(store: &ParamStore<f64>, s: &Sfeb, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let t = s.trace(&mut g, &b, xv).unwrap();
        (g.take_value(t.spatial), g.take_value(t.freq), g.take_value(t.gate), g.take_value(t.out))
    }

    #[test]
    fn lsconv_identity_and_shape() {
        let mut store = ParamStore::<f64>::new();
        let ls = LsConv::build(&mut store, &mut seeded(1), "ls", 8);
        let x = random_tensor::<f64>(&[2, 8, 16, 16], 2, 1.0);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = ls.forward(&mut g, &b, xv).unwrap();
        assert_eq!(g.shape(y), x.shape());
        ls.set_identity(&mut store);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = ls.forward(&mut g, &b, xv).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn lsconv_averaging_keeps_constant_interior() {
        let mut store = ParamStore::<f64>::new();
        let ls = LsConv::build(&mut store, &mut seeded(3), "ls", 2);
        for conv in [ls.large, ls.small] {
            let k = store.get(conv.weight).shape()[2];
            let n = (k * k) as f64;
            store.get_mut(conv.weight).data_mut().fill(1.0 / n);
            store.get_mut(conv.bias).data_mut().fill(0.0);
        }
        store.get_mut(ls.point.weight).data_mut().copy_from_slice(&[0.25, 0.75, 0.5, 0.5]);
        store.get_mut(ls.point.bias).data_mut().fill(0.0);
        let x = Tensor::<f64>::full(&[1, 2, 16, 16], 0.4);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = ls.forward(&mut g, &b, xv).unwrap();
        // The receptive field is 9x9, so pixels at least 4 from every border are interior.
        for ch in 0..2 {
            for yy in 4..12 {
                for xx in 4..12 {
                    let v = g.value(y).data()[(ch * 16 + yy) * 16 + xx];
                    assert!((v - 0.4).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_is_a_simplex() {
        let (store, s) = setup(4, 4);
        for seed in 0..100 {
            let x = random_tensor::<f64>(&[1, 4, 4, 4], 100 + seed, 1.0);
            let (_, _, gate, out) = run(&store, &s, &x);
            let (wf, ws) = (gate.data()[0], gate.data()[1]);
            assert!(wf >= 0.0 && ws >= 0.0);
            assert!((wf + ws - 1.0).abs() <= 1e-6);
            assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn saturated_spatial_gate_selects_spatial_path() {
        let (mut store, s) = setup(4, 5);
        s.force_gate(&mut store, false);
        let x = random_tensor::<f64>(&[2, 4, 8, 8], 6, 1.0);
        let (spatial, _, _, out) = run(&store, &s, &x);
        assert_eq!(out, spatial);
    }

    #[test]
    fn identity_frequency_path_reconstructs_input() {
        let (mut store, mut s) = setup(4, 7);
        s.set_identity_frequency_path(&mut store, 10.0);
        s.force_gate(&mut store, true);
        let x = random_tensor::<f32>(&[1, 4, 8, 8], 8, 1.0).cast::<f64>();
        let (_, freq, _, out) = run(&store, &s, &x);
        assert!(freq.max_abs_diff(&x) <= 1e-4);
        assert!(out.max_abs_diff(&x) <= 1e-4);
    }

    #[test]
    fn zeroed_high_frequency_refinement_removes_detail() {
        let (mut store, s) = setup(4, 9);
        s.hf_ds.point.set_zero(&mut store);
        let x = random_tensor::<f64>(&[1, 4, 8, 8], 10, 1.0);
        let (_, freq, _, _) = run(&store, &s, &x);
        let before = dwt2(&x).unwrap().detail_energy();
        let after = dwt2(&freq).unwrap().detail_energy();
        assert!(after <= before);
        assert!(after < 1e-20);
    }

    #[test]
    fn rejects_odd_sizes() {
        let (store, s) = setup(2, 11);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(Tensor::zeros(&[1, 2, 5, 6]));
        assert!(matches!(s.forward(&mut g, &b, xv), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gradients() {
        let (store, s) = setup(4, 12);
        let x = random_tensor::<f64>(&[1, 4, 8, 8], 13, 1.0);
        let probe = random_tensor::<f64>(&[1, 4, 8, 8], 14, 1.0);
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(x);
        inputs.push(probe);
        let n = store.len();
        let r = check_gradients(
            "sfeb",
            &inputs,
            |g, v| {
                let b = Bound::from_vars(v[..n].to_vec());
                let y = s.forward(g, &b, v[n])?;
                let m = g.mul(y, v[n + 1])?;
                Ok(g.sum(m))
            },
            &GradCheckOptions::sampled(40),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
