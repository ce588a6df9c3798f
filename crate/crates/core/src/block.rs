//! The FS-RWKV block: pre-norm spatial mix (shifted projections into Bi-WKV,
//! receptance gate) and channel mix (squared-ReLU feed-forward, receptance
//! gate), each added back residually.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{orthogonal, Bound, Norm, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::shift::{FsoShiftVars, ShiftMode};
use crate::tensor::{Real, Tensor};
use crate::wkv::WkvParams;

/// Channel-mix hidden width as a multiple of the block width.
pub const HIDDEN_RATIO: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct ShiftGates {
    pub spatial: ParamId,
    pub ll: ParamId,
    pub out: ParamId,
}

impl ShiftGates {
    fn build<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            spatial: store.add(format!("{name}.omega_spatial"), Tensor::zeros(&[channels])),
            ll: store.add(format!("{name}.omega_ll"), Tensor::zeros(&[channels])),
            out: store.add(format!("{name}.omega_out"), Tensor::zeros(&[channels])),
        }
    }

    fn vars(&self, b: &Bound) -> FsoShiftVars {
        FsoShiftVars { omega_spatial: b.var(self.spatial), omega_ll: b.var(self.ll), omega_out: b.var(self.out) }
    }
}

fn build_gates<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    mode: &ShiftMode,
    c: usize,
    n: usize,
) -> Vec<ShiftGates> {
    if !mode.has_gates() {
        return Vec::new();
    }
    (0..n).map(|i| ShiftGates::build(store, &format!("{name}.shift{i}"), c)).collect()
}

/// Shifts `x: [B, T, C]` laid out on an `h x w` grid and returns tokens again.
fn shifted_tokens<F: Real>(
    g: &mut Graph<F>,
    b: &Bound,
    map: Var,
    mode: &ShiftMode,
    gates: Option<&ShiftGates>,
) -> Result<Var> {
    let s = g.token_shift(map, mode, gates.map(|p| p.vars(b)))?;
    g.to_tokens(s)
}

/// Parameter ids of a spatial mix. Linear weights are stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct SpatialMix {
    pub gates: Vec<ShiftGates>,
    pub wr: ParamId,
    pub br: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub decay: ParamId,
    pub bonus: ParamId,
}

impl SpatialMix {
    pub fn build<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
        name: &str,
        c: usize,
        mode: &ShiftMode,
    ) -> Self {
        let scale = 1.0 / (c as f64).sqrt();
        let gates = build_gates(store, name, mode, c, 3);
        let wkv = WkvParams::<F>::init(c);
        Self {
            gates,
            wr: store.add(format!("{name}.wr"), orthogonal(rng, c, c, scale)),
            br: store.add(format!("{name}.br"), Tensor::zeros(&[c])),
            wk: store.add(format!("{name}.wk"), orthogonal(rng, c, c, scale)),
            wv: store.add(format!("{name}.wv"), orthogonal(rng, c, c, scale)),
            wo: store.add(format!("{name}.wo"), Tensor::zeros(&[c, c])),
            decay: store.add(format!("{name}.decay"), wkv.w),
            bonus: store.add(format!("{name}.bonus"), wkv.u),
        }
    }

    /// `O_s = (sigmoid(R_s) * bi_wkv(K_s, V_s)) W_O` for normalized tokens `x`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        x: Var,
        h: usize,
        w: usize,
        mode: &ShiftMode,
    ) -> Result<Var> {
        let map = g.to_map(x, h, w)?;
        let sr = shifted_tokens(g, b, map, mode, self.gates.first())?;
        let sk = shifted_tokens(g, b, map, mode, self.gates.get(1))?;
        let sv = shifted_tokens(g, b, map, mode, self.gates.get(2))?;
        let r = g.linear(sr, b.var(self.wr), Some(b.var(self.br)))?;
        let k = g.linear(sk, b.var(self.wk), None)?;
        let v = g.linear(sv, b.var(self.wv), None)?;
        let wkv = g.bi_wkv(k, v, b.var(self.decay), b.var(self.bonus), h, w)?;
        let gate = g.sigmoid(r);
        let gated = g.mul(gate, wkv)?;
        g.linear(gated, b.var(self.wo), None)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelMix {
    pub gates: Vec<ShiftGates>,
    pub wr: ParamId,
    pub br: ParamId,
    /// `[C, 4C]`
    pub wk: ParamId,
    /// `[4C, C]`
    pub wv: ParamId,
    pub wo: ParamId,
}

impl ChannelMix {
    pub fn build<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
        name: &str,
        c: usize,
        mode: &ShiftMode,
    ) -> Self {
        let scale = 1.0 / (c as f64).sqrt();
        let hidden = HIDDEN_RATIO * c;
        let gates = build_gates(store, name, mode, c, 2);
        Self {
            gates,
            wr: store.add(format!("{name}.wr"), orthogonal(rng, c, c, scale)),
            br: store.add(format!("{name}.br"), Tensor::zeros(&[c])),
            wk: store.add(format!("{name}.wk"), orthogonal(rng, c, hidden, scale)),
            wv: store.add(format!("{name}.wv"), orthogonal(rng, hidden, c, scale)),
            wo: store.add(format!("{name}.wo"), Tensor::zeros(&[c, c])),
        }
    }

    /// `O_c = (sigmoid(R_c) * relu(K_c)^2 W_V) W_O`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        x: Var,
        h: usize,
        w: usize,
        mode: &ShiftMode,
    ) -> Result<Var> {
        let map = g.to_map(x, h, w)?;
        let sr = shifted_tokens(g, b, map, mode, self.gates.first())?;
        let sk = shifted_tokens(g, b, map, mode, self.gates.get(1))?;
        let r = g.linear(sr, b.var(self.wr), Some(b.var(self.br)))?;
        let k = g.linear(sk, b.var(self.wk), None)?;
        let act = g.squared_relu(k);
        let v = g.linear(act, b.var(self.wv), None)?;
        let gate = g.sigmoid(r);
        let gated = g.mul(gate, v)?;
        g.linear(gated, b.var(self.wo), None)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub spatial: SpatialMix,
    pub ln2: Norm,
    pub channel: ChannelMix,
    pub mode: ShiftMode,
}

impl Block {
    pub fn build<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
        name: &str,
        c: usize,
        mode: ShiftMode,
    ) -> Self {
        Self {
            ln1: Norm::build(store, &format!("{name}.ln1"), c),
            spatial: SpatialMix::build(store, rng, &format!("{name}.spatial"), c, &mode),
            ln2: Norm::build(store, &format!("{name}.ln2"), c),
            channel: ChannelMix::build(store, rng, &format!("{name}.channel"), c, &mode),
            mode,
        }
    }

    /// Tokens `[B, h*w, C]` in, same shape out.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        g.push_scope("spatial_mix");
        let n = self.ln1.tokens(g, b, x)?;
        let s = self.spatial.forward(g, b, n, h, w, &self.mode)?;
        let x = g.add(x, s)?;
        g.pop_scope();
        g.push_scope("channel_mix");
        let n = self.ln2.tokens(g, b, x)?;
        let c = self.channel.forward(g, b, n, h, w, &self.mode)?;
        let x = g.add(x, c)?;
        g.pop_scope();
        Ok(x)
    }

    /// Applies `forward` to a `[B, C, H, W]` map.
    pub fn forward_map<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let t = g.to_tokens(x)?;
        let y = self.forward(g, b, t, h, w)?;
        g.to_map(y, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::rng::{random_tensor, seeded};
    use crate::shift::neighborhood8;

    fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let noise = random_tensor::<f64>(store.get(id).shape(), seed + i as u64, scale);
            let v = store.get(id).add(&noise);
            store.set(id, v).unwrap();
        }
    }

    fn eval_block(store: &ParamStore<f64>, block: &Block, x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &b, xv, h, w).unwrap();
        g.take_value(y)
    }

    fn setup(c: usize, seed: u64) -> (ParamStore<f64>, Block) {
        let mut store = ParamStore::new();
        let mode = ShiftMode::fso(c, &neighborhood8()).unwrap();
        let block = Block::build(&mut store, &mut seeded(seed), "b", c, mode);
        (store, block)
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let (store, block) = setup(8, 1);
        let x = random_tensor::<f64>(&[2, 16, 8], 2, 1.0);
        assert_eq!(eval_block(&store, &block, &x, 4, 4), x);
    }

    #[test]
    fn stacked_blocks_compose() {
        let (mut store, block) = setup(8, 3);
        let mode = block.mode.clone();
        let second = Block::build(&mut store, &mut seeded(4), "b2", 8, mode);
        perturb(&mut store, 5, 0.3);
        let x = random_tensor::<f64>(&[1, 16, 8], 6, 1.0);
        let once = eval_block(&store, &block, &x, 4, 4);
        let twice = eval_block(&store, &second, &once, 4, 4);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &b, xv, 4, 4).unwrap();
        let y = second.forward(&mut g, &b, y, 4, 4).unwrap();
        assert_eq!(g.value(y), &twice);
        assert_eq!(twice.shape(), x.shape());
    }

    #[test]
    fn closed_receptance_silences_spatial_mix() {
        let (mut store, block) = setup(8, 7);
        perturb(&mut store, 8, 0.3);
        store.set(block.spatial.br, Tensor::full(&[8], -40.0)).unwrap();
        let x = random_tensor::<f64>(&[1, 16, 8], 9, 1.0);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = block.spatial.forward(&mut g, &b, xv, 4, 4, &block.mode).unwrap();
        assert!(g.value(y).max_abs() < 1e-12);
    }

    #[test]
    fn spatial_mix_matches_composition() {
        use crate::shift::FsoShiftParams;
        use crate::wkv::{bi_wkv_oracle, TokenSeq};
        let (mut store, block) = setup(8, 10);
        perturb(&mut store, 11, 0.5);
        let x = random_tensor::<f64>(&[1, 16, 8], 12, 1.0);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let got = block.spatial.forward(&mut g, &b, xv, 4, 4, &block.mode).unwrap();
        let got = g.take_value(got);

        let spec = block.mode.spec();
        let map = x.to_map(4, 4).unwrap();
        let shift = |gates: &ShiftGates| {
            let p = FsoShiftParams {
                omega_spatial: store.get(gates.spatial).clone(),
                omega_ll: store.get(gates.ll).clone(),
                omega_out: store.get(gates.out).clone(),
            };
            let mut g = Graph::new();
            let xv = g.constant(map.clone());
            let pv = FsoShiftVars::leaves(&mut g, &p);
            let y = g.fso_shift(xv, spec, pv).unwrap();
            g.value(y).to_tokens().unwrap()
        };
        let matmul = |x: &Tensor<f64>, w: ParamId| crate::nn::linear(x, store.get(w)).unwrap();
        let sp = &block.spatial;
        let r = matmul(&shift(&sp.gates[0]), sp.wr);
        let r = Tensor::from_fn(r.shape(), |i| r.data()[i] + store.get(sp.br).data()[i % 8]);
        let k = TokenSeq::new(matmul(&shift(&sp.gates[1]), sp.wk), 4, 4).unwrap();
        let v = TokenSeq::new(matmul(&shift(&sp.gates[2]), sp.wv), 4, 4).unwrap();
        let params = WkvParams::new(store.get(sp.decay).clone(), store.get(sp.bonus).clone()).unwrap();
        let wkv = bi_wkv_oracle(&k, &v, &params).unwrap();
        let gated = r.zip_map(&wkv.data, |r, y| y / (1.0 + (-r).exp()));
        let want = matmul(&gated, sp.wo);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn channel_mix_squared_relu_cases() {
        let (mut store, block) = setup(8, 13);
        perturb(&mut store, 14, 0.3);
        let cm = &block.channel;
        // With every shift gate closed both shifted inputs equal the input, so a
        // constant input row times an all-(1/8) key matrix gives K_c = x.
        for id in cm.gates.iter().flat_map(|s| [s.spatial, s.ll, s.out]) {
            store.set(id, Tensor::full(&[8], -40.0)).unwrap();
        }
        store.set(cm.wk, Tensor::full(&[8, 32], 0.125)).unwrap();
        store.set(cm.wv, Tensor::from_fn(&[32, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 })).unwrap();
        store.set(cm.wo, Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 })).unwrap();
        store.set(cm.br, Tensor::full(&[8], 40.0)).unwrap();
        for (level, want) in [(-1.0, 0.0), (2.0, 4.0)] {
            let x = Tensor::<f64>::full(&[1, 4, 8], level);
            let mut g = Graph::new();
            let b = store.bind(&mut g, false);
            let xv = g.constant(x);
            let y = cm.forward(&mut g, &b, xv, 2, 2, &block.mode).unwrap();
            for &e in g.value(y).data() {
                assert!((e - want).abs() < 1e-9, "{level}: {e}");
            }
        }
    }

    #[test]
    fn channel_mix_gradients() {
        let (mut store, block) = setup(8, 15);
        perturb(&mut store, 16, 0.4);
        let x = random_tensor::<f64>(&[1, 4, 8], 17, 1.0);
        let probe = random_tensor::<f64>(&[1, 4, 8], 18, 1.0);
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(x);
        inputs.push(probe);
        let n = store.len();
        let r = check_gradients(
            "channel_mix",
            &inputs,
            |g, v| {
                let b = Bound::from_vars(v[..n].to_vec());
                let y = block.channel.forward(g, &b, v[n], 2, 2, &block.mode)?;
                let m = g.mul(y, v[n + 1])?;
                Ok(g.sum(m))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn full_block_gradients() {
        let (mut store, block) = setup(8, 19);
        perturb(&mut store, 20, 0.3);
        let x = random_tensor::<f64>(&[1, 16, 8], 21, 1.0);
        let probe = random_tensor::<f64>(&[1, 16, 8], 22, 1.0);
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(x);
        inputs.push(probe);
        let n = store.len();
        let r = check_gradients(
            "fsrwkv_block",
            &inputs,
            |g, v| {
                let b = Bound::from_vars(v[..n].to_vec());
                let y = block.forward(g, &b, v[n], 4, 4)?;
                let m = g.mul(y, v[n + 1])?;
                Ok(g.sum(m))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
