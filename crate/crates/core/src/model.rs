//! The U-Net: conv embedding, encoder stages of blocks with strided-conv
//! downsampling, decoder stages that upsample, fuse an enhanced skip and run
//! more blocks, and a residual head bounded to (0, 1).

use crate::autograd::{Graph, Var};
use crate::block::Block;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::nn::ConvGeometry;
use crate::objectives::LossBreakdown;
use crate::params::{Bound, Conv, ParamStore};
use crate::rng::{mix_seed, seeded};
use crate::sfeb::Sfeb;
use crate::shift::ShiftMode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv,
    skip: Option<Sfeb>,
    fuse_point: Conv,
    fuse_spatial: Conv,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct FsRwkvModel<F = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    embed: Conv,
    encoder: Vec<Vec<Block>>,
    down: Vec<Conv>,
    /// Indexed by the stage it returns to, `0..stages-1`.
    decoder: Vec<DecoderStage>,
    head: Conv,
}

impl<F: Real> FsRwkvModel<F> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(mix_seed(cfg.seed, 0x6d6f64656c));
        let widths = &cfg.stage_widths;
        let stages = widths.len();
        let mode = |c: usize| -> Result<ShiftMode> {
            if cfg.fso_shift {
                ShiftMode::fso(c, &cfg.shift_offsets)
            } else {
                ShiftMode::uni(c)
            }
        };
        let conv3 = ConvGeometry::same(3);

        let embed = Conv::build(&mut store, &mut rng, "embed", cfg.in_channels, widths[0], 3, conv3);
        let mut encoder = Vec::with_capacity(stages);
        let mut down = Vec::with_capacity(stages - 1);
        for (i, &c) in widths.iter().enumerate() {
            if i > 0 {
                let geo = ConvGeometry { stride: 2, pad: 1, groups: 1 };
                down.push(Conv::build(&mut store, &mut rng, &format!("down{}", i - 1), widths[i - 1], c, 3, geo));
            }
            let blocks = (0..cfg.blocks_per_stage[i])
                .map(|j| Ok(Block::build(&mut store, &mut rng, &format!("enc{i}.block{j}"), c, mode(c)?)))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
        }
        let mut decoder = Vec::with_capacity(stages - 1);
        for i in 0..stages - 1 {
            let (c, below) = (widths[i], widths[i + 1]);
            let name = format!("dec{i}");
            let up = Conv::build(&mut store, &mut rng, &format!("{name}.up"), below, c, 3, conv3);
            let skip = cfg.sfeb.then(|| Sfeb::build(&mut store, &mut rng, &format!("{name}.sfeb"), c));
            let fuse_point =
                Conv::build(&mut store, &mut rng, &format!("{name}.fuse1"), 2 * c, c, 1, ConvGeometry::same(1));
            let fuse_spatial = Conv::build(&mut store, &mut rng, &format!("{name}.fuse3"), c, c, 3, conv3);
            let blocks = (0..cfg.blocks_per_stage[i])
                .map(|j| Ok(Block::build(&mut store, &mut rng, &format!("{name}.block{j}"), c, mode(c)?)))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderStage { up, skip, fuse_point, fuse_spatial, blocks });
        }
        let head = Conv::build(&mut store, &mut rng, "head", widths[0], cfg.out_channels, 3, conv3);
        head.set_zero(&mut store);
        let model = Self { cfg: cfg.clone(), store, embed, encoder, down, decoder, head };
        log::debug!("built model with {} parameters", model.param_count());
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Shift mode of every block, encoder first.
    pub fn shift_modes(&self) -> impl Iterator<Item = &ShiftMode> {
        self.encoder.iter().flatten().chain(self.decoder.iter().flat_map(|d| d.blocks.iter())).map(|b| &b.mode)
    }

    pub fn has_sfeb(&self) -> bool {
        self.decoder.iter().any(|d| d.skip.is_some())
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<G: Real>(&self) -> FsRwkvModel<G> {
        FsRwkvModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            embed: self.embed,
            encoder: self.encoder.clone(),
            down: self.down.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape { op: "model input", expected: vec![self.cfg.in_channels], actual: vec![c] });
        }
        self.cfg.check_input_size(h, w)
    }

    /// Records the forward pass of `x: [B, in, H, W]` into `g`.
    pub fn forward(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        let result = self.forward_unchecked(g, b, x);
        // A non-finite value anywhere is reported at the first layer that produced one.
        if let Some(layer) = g.first_non_finite() {
            return Err(Error::Numerical { layer: layer.to_string() });
        }
        result
    }

    fn forward_unchecked(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        g.push_scope("embed");
        let mut h = self.embed.forward(g, b, x)?;
        g.pop_scope();
        let mut skips = Vec::with_capacity(self.encoder.len() - 1);
        for (i, blocks) in self.encoder.iter().enumerate() {
            if i > 0 {
                skips.push(h);
                g.push_scope(&format!("down{}", i - 1));
                h = self.down[i - 1].forward(g, b, h)?;
                g.pop_scope();
            }
            for (j, blk) in blocks.iter().enumerate() {
                g.push_scope(&format!("enc{i}.block{j}"));
                h = blk.forward_map(g, b, h)?;
                g.pop_scope();
            }
        }
        for i in (0..self.decoder.len()).rev() {
            let d = &self.decoder[i];
            g.push_scope(&format!("dec{i}"));
            g.push_scope("up");
            let u = g.upsample2x(h)?;
            let u = d.up.forward(g, b, u)?;
            g.pop_scope();
            let s = match &d.skip {
                Some(sfeb) => {
                    g.push_scope("sfeb");
                    let s = sfeb.forward(g, b, skips[i])?;
                    g.pop_scope();
                    s
                }
                None => skips[i],
            };
            g.push_scope("fuse");
            let c = g.concat_channels(&[u, s])?;
            let c = d.fuse_point.forward(g, b, c)?;
            h = d.fuse_spatial.forward(g, b, c)?;
            g.pop_scope();
            for (j, blk) in d.blocks.iter().enumerate() {
                g.push_scope(&format!("block{j}"));
                h = blk.forward_map(g, b, h)?;
                g.pop_scope();
            }
            g.pop_scope();
        }
        g.push_scope("head");
        let r = self.head.forward(g, b, h)?;
        let out = g.residual_sigmoid(x, r)?;
        g.pop_scope();
        Ok(out)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv)?;
        Ok(g.take_value(y))
    }

    /// Composite loss against `gt` and its gradient for every parameter, in
    /// store order.
    pub fn loss_and_grads(&self, x: &Tensor<F>, gt: &Tensor<F>) -> Result<(LossBreakdown, Vec<Tensor<F>>)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv)?;
        let (loss, parts) = g.composite_loss(y, gt, self.cfg.loss_weights)?;
        if !parts.total.is_finite() {
            return Err(Error::Numerical { layer: "loss".into() });
        }
        let mut grads = g.backward(loss)?;
        let out = b
            .vars()
            .iter()
            .zip(self.store.iter())
            .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((parts, out))
    }
}

/// Prefix of checkpoint records that are not model parameters.
pub const OPTIMIZER_PREFIX: &str = "adamw.";

impl FsRwkvModel<f32> {
    /// Parameters in store order under the model's canonical config text.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_text(),
            records: self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the architecture from the `[model]` section of the checkpoint
    /// text and loads every parameter. Optimizer records are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_text(&ck.config)?;
        let mut model = Self::build(&cfg)?;
        let mut seen = 0;
        for (name, t) in &ck.records {
            if name.starts_with(OPTIMIZER_PREFIX) {
                continue;
            }
            model.store.set_by_name(name, t.clone())?;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {seen} parameters, the model needs {}",
                model.store.len()
            )));
        }
        Ok(model)
    }
}

/// Builds the model with FSO-Shift replaced by a single rightward shift and/or
/// SFEB replaced by a plain skip.
pub fn ablation_variant<F: Real>(cfg: &ModelConfig, disable_fso: bool, disable_sfeb: bool) -> Result<FsRwkvModel<F>> {
    let cfg = ModelConfig { fso_shift: cfg.fso_shift && !disable_fso, sfeb: cfg.sfeb && !disable_sfeb, ..cfg.clone() };
    FsRwkvModel::build(&cfg)
}

impl<F: Real> Graph<F> {
    /// `x e^r / (1 + x (e^r - 1))`, i.e. `sigmoid(logit(x) + r)` without
    /// evaluating the logit, so `r = 0` returns `x` exactly.
    pub fn residual_sigmoid(&mut self, x: Var, r: Var) -> Result<Var> {
        self.value(x).same_shape("residual_sigmoid", self.value(r))?;
        let out = self.value(x).zip_map(self.value(r), |x, r| {
            let e = r.exp();
            x * e / (F::one() + x * (e - F::one()))
        });
        Ok(self.record(
            out,
            &[x, r],
            Box::new(|g, p, out| {
                let gx = Tensor::from_fn(g.shape(), |i| {
                    let (x, e) = (p[0].data()[i], p[1].data()[i].exp());
                    let d = F::one() + x * (e - F::one());
                    g.data()[i] * e / (d * d)
                });
                let gr = Tensor::from_fn(g.shape(), |i| {
                    let o = out.data()[i];
                    g.data()[i] * o * (F::one() - o)
                });
                vec![Some(gx), Some(gr)]
            }),
        ))
    }
}
