//! Training loop, resumable state and the four-way ablation.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::config::{Document, ModelConfig, TrainConfig};
use crate::data::{augment, AugmentOptions, SplitData};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::io::Checkpoint;
use crate::model::FsRwkvModel;
use crate::objectives::LossBreakdown;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{fnv1a, mix_seed, seeded};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.fsrw";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based index of the update this loss was measured before.
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// CSV of a loss history: `step,lr,l1,ssim_loss,edge,total`.
pub fn history_csv(history: &[StepLog]) -> String {
    let mut s = String::from("step,lr,l1,ssim_loss,edge,total\n");
    for h in history {
        let l = &h.loss;
        let _ = writeln!(s, "{},{},{},{},{},{}", h.step, h.lr, l.l1, l.ssim_loss, l.edge, l.total);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: FsRwkvModel<f32>,
    pub opt: AdamW,
    /// Updates applied so far.
    pub step: usize,
}

fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = FsRwkvModel::build(&cfg.model)?;
        let opt = AdamW::new(&model.store, adamw_config(cfg));
        Ok(Self { cfg: cfg.clone(), model, opt, step: 0 })
    }

    /// Starts from `model` (for example a variant built elsewhere) instead of a
    /// fresh build of `cfg.model`.
    pub fn with_model(cfg: &TrainConfig, model: FsRwkvModel<f32>) -> Result<Self> {
        cfg.validate()?;
        let cfg = TrainConfig { model: model.cfg.clone(), ..cfg.clone() };
        let opt = AdamW::new(&model.store, adamw_config(&cfg));
        Ok(Self { cfg, model, opt, step: 0 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut config = self.cfg.to_text();
        let _ = write!(config, "\n[state]\nstep = {}\n", self.step);
        let mut records = self.model.checkpoint().records;
        records.extend(self.opt.records(&self.model.store));
        Checkpoint { config, records }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_text(&ck.config)?;
        let model = FsRwkvModel::from_checkpoint(ck)?;
        let step: usize = Document::parse(&ck.config)?.section("state").parse_or("step", 0)?;
        let opt = AdamW::restore(&model.store, adamw_config(&cfg), step as u64, ck)?;
        Ok(Self { cfg, model, opt, step })
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.cfg.steps, self.cfg.lr, self.cfg.min_lr)
    }

    fn augment_options(&self) -> AugmentOptions {
        AugmentOptions {
            crop: self.cfg.crop,
            flip: self.cfg.flip,
            rotate: self.cfg.rotate,
            mixup_prob: self.cfg.mixup_prob,
            mixup_alpha: self.cfg.mixup_alpha,
        }
    }

    /// The batch for the current step. It depends only on the seed and the
    /// step index, so a resumed run draws the same batches.
    pub fn batch(&self, data: &SplitData) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut rng = seeded(mix_seed(self.cfg.seed, self.step as u64));
        let opts = self.augment_options();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..self.cfg.batch_size {
            let i = rng.random_range(0..data.len());
            let j = rng.random_range(0..data.len());
            let (x, y) = augment(
                (&data.inputs[i], &data.targets[i]),
                Some((&data.inputs[j], &data.targets[j])),
                &opts,
                &mut rng,
            )?;
            let (c, h, w) = x.dims3()?;
            xs.push(x.reshape(&[1, c, h, w])?);
            ys.push(y.reshape(&[1, c, h, w])?);
        }
        let xr: Vec<_> = xs.iter().collect();
        let yr: Vec<_> = ys.iter().collect();
        Ok((Tensor::stack_batch(&xr)?, Tensor::stack_batch(&yr)?))
    }

    /// One optimizer update. A non-finite loss or activation aborts before any
    /// parameter changes.
    pub fn train_step(&mut self, data: &SplitData) -> Result<StepLog> {
        let (x, y) = self.batch(data)?;
        let lr = self.lr();
        let (loss, grads) = self.model.loss_and_grads(&x, &y)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical { layer: "backward".into() });
        }
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(StepLog { step: self.step, lr, loss })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Checkpoints go to `{out_dir}/checkpoint.fsrw`.
    pub out_dir: Option<&'a Path>,
    pub test: Option<&'a SplitData>,
    /// Stop after this many updates even if the schedule is longer.
    pub stop_at: Option<usize>,
}

/// Trains until `cfg.steps` (or `stop_at`). Checkpoints are written every
/// `checkpoint_interval` updates and at the end; an abort leaves the last one
/// in place.
pub fn run(state: &mut TrainState, data: &SplitData, opts: RunOptions<'_>) -> Result<Vec<StepLog>> {
    let end = opts.stop_at.unwrap_or(state.cfg.steps).min(state.cfg.steps);
    let save = |state: &TrainState| -> Result<()> {
        match opts.out_dir {
            Some(dir) => state.checkpoint().save(dir.join(CHECKPOINT_FILE)),
            None => Ok(()),
        }
    };
    let mut history = Vec::with_capacity(end.saturating_sub(state.step));
    let log_every = (state.cfg.steps / 20).max(1);
    while state.step < end {
        let rec = state.train_step(data).inspect_err(|e| log::error!("step {}: {e}", state.step + 1))?;
        if rec.step % log_every == 0 || rec.step == 1 {
            let l = &rec.loss;
            log::info!(
                "step {:>6} lr {:.3e} loss {:.5} (l1 {:.5} ssim {:.5} edge {:.5})",
                rec.step,
                rec.lr,
                l.total,
                l.l1,
                l.ssim_loss,
                l.edge
            );
        }
        history.push(rec);
        let k = state.step;
        if state.cfg.checkpoint_interval > 0 && k.is_multiple_of(state.cfg.checkpoint_interval) {
            save(state)?;
        }
        if let Some(test) = opts.test {
            if state.cfg.eval_interval > 0 && k.is_multiple_of(state.cfg.eval_interval) {
                let r = evaluate(&state.model, test)?;
                log::info!("step {k:>6} test PSNR {:.3} dB SSIM {:.4}", r.mean_psnr(), r.mean_ssim());
            }
        }
    }
    save(state)?;
    Ok(history)
}

/// Hash of every tensor in a split, for checking that runs share data.
pub fn data_hash(split: &SplitData) -> u64 {
    let mut bytes = Vec::new();
    for t in split.inputs.iter().chain(&split.targets) {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fnv1a(&bytes)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub fso_shift: bool,
    pub sfeb: bool,
    pub params: usize,
    pub config_hash: u64,
    pub data_hash: u64,
    pub seed: u64,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

impl AblationRow {
    pub fn is_full(&self) -> bool {
        self.fso_shift && self.sfeb
    }

    pub fn label(&self) -> &'static str {
        match (self.fso_shift, self.sfeb) {
            (false, false) => "Uni-Shift, plain skip",
            (true, false) => "FSO-Shift, plain skip",
            (false, true) => "Uni-Shift, SFEB",
            (true, true) => "FSO-Shift, SFEB",
        }
    }
}

/// Trains and evaluates the four shift/skip variants of `cfg.model` under the
/// same seed, data and budget. The full model comes last.
pub fn ablate(
    cfg: &TrainConfig,
    train: &SplitData,
    test: &SplitData,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let hash = data_hash(train) ^ data_hash(test).rotate_left(1);
    let mut rows = Vec::with_capacity(4);
    for (fso_shift, sfeb) in [(false, false), (true, false), (false, true), (true, true)] {
        let model_cfg = ModelConfig { fso_shift, sfeb, ..cfg.model.clone() };
        let model = FsRwkvModel::build(&model_cfg)?;
        let params = model.param_count();
        let mut state = TrainState::with_model(cfg, model)?;
        let dir = out_dir.map(|d| d.join(format!("fso{}_sfeb{}", fso_shift as u8, sfeb as u8)));
        log::info!("ablation variant fso_shift={fso_shift} sfeb={sfeb}: {params} parameters");
        let history = run(&mut state, train, RunOptions { out_dir: dir.as_deref(), ..RunOptions::default() })?;
        let metrics = evaluate(&state.model, test)?;
        rows.push(AblationRow {
            fso_shift,
            sfeb,
            params,
            config_hash: state.cfg.model.hash(),
            data_hash: hash,
            seed: state.cfg.seed,
            final_loss: history.last().map_or(f64::NAN, |h| h.loss.total),
            metrics,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<2}{:<24}{:>10}{:>6}{:>10}{:>10}{:>8}{:>9}",
        "", "variant", "FSO-Shift", "SFEB", "params", "PSNR(dB)", "SSIM", "RMSE"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<2}{:<24}{:>10}{:>6}{:>10}{:>10.3}{:>8.4}{:>9.5}",
            if r.is_full() { "*" } else { "" },
            r.label(),
            mark(r.fso_shift),
            mark(r.sfeb),
            r.params,
            m.mean_psnr(),
            m.mean_ssim(),
            m.mean_rmse()
        );
    }
    if let Some(r) = rows.first() {
        let _ = writeln!(s, "* full model; seed {} data {:016x}", r.seed, r.data_hash);
    }
    s
}

/// Ablation rows as CSV.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,fso_shift,sfeb,params,psnr_db,ssim,rmse,final_loss,full\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.label(),
            r.fso_shift,
            r.sfeb,
            r.params,
            m.mean_psnr(),
            m.mean_ssim(),
            m.mean_rmse(),
            r.final_loss,
            r.is_full()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DegradeSpec, Split};

    fn tiny() -> (TrainConfig, SplitData) {
        let cfg = TrainConfig {
            model: ModelConfig::smoke(),
            steps: 6,
            checkpoint_interval: 2,
            mixup_prob: 0.5,
            ..TrainConfig::default()
        };
        let data =
            SplitData::from_samples(&generate_split(3, Split::Train, 4, 16, 16, &DegradeSpec::default()).unwrap());
        (cfg, data)
    }

    #[test]
    fn zero_steps_checkpoint_is_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, data) = tiny();
        let cfg = TrainConfig { steps: 0, ..cfg };
        let mut state = TrainState::new(&cfg).unwrap();
        run(&mut state, &data, RunOptions { out_dir: Some(dir.path()), ..RunOptions::default() }).unwrap();
        let ck = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        let init = FsRwkvModel::<f32>::build(&cfg.model).unwrap();
        assert_eq!(FsRwkvModel::from_checkpoint(&ck).unwrap().checkpoint(), init.checkpoint());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (cfg, data) = tiny();
        let mut full = TrainState::new(&cfg).unwrap();
        let h_full = run(&mut full, &data, RunOptions::default()).unwrap();

        let mut first = TrainState::new(&cfg).unwrap();
        run(&mut first, &data, RunOptions { stop_at: Some(3), ..RunOptions::default() }).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut resumed =
            TrainState::from_checkpoint(&Checkpoint::from_bytes(Path::new("m"), &bytes).unwrap()).unwrap();
        assert_eq!(resumed.step, 3);
        assert_eq!(resumed.lr(), first.lr());
        let h_rest = run(&mut resumed, &data, RunOptions::default()).unwrap();
        assert_eq!(&h_full[3..], &h_rest[..]);
        assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    }

    #[test]
    fn nan_aborts_and_keeps_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, data) = tiny();
        let mut state = TrainState::new(&cfg).unwrap();
        run(&mut state, &data, RunOptions { out_dir: Some(dir.path()), stop_at: Some(2), ..RunOptions::default() })
            .unwrap();
        let before = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        let id = state.model.store.id_of("embed.weight").unwrap();
        state.model.store.get_mut(id).data_mut()[0] = f32::NAN;
        let err =
            run(&mut state, &data, RunOptions { out_dir: Some(dir.path()), ..RunOptions::default() }).unwrap_err();
        assert!(matches!(err, Error::Numerical { ref layer } if layer.starts_with("embed")), "{err}");
        assert_eq!(state.step, 2);
        assert_eq!(std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(), before);
    }

    #[test]
    fn batches_depend_on_seed_and_step_only() {
        let (cfg, data) = tiny();
        let cfg = TrainConfig { batch_size: 3, crop: 8, ..cfg };
        let a = TrainState::new(&cfg).unwrap();
        let (x, y) = a.batch(&data).unwrap();
        assert_eq!(x.shape(), &[3, 1, 8, 8]);
        assert_eq!(y.shape(), x.shape());
        assert_eq!(TrainState::new(&cfg).unwrap().batch(&data).unwrap(), (x, y));
    }
}
