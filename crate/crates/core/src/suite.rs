//! Cross-module properties, oracle comparisons and gradient checks gathered
//! into one report.

use std::fmt;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::block::Block;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{generate_split, DegradeSpec, Split, SplitData};
use crate::error::Result;
use crate::eval::evaluate;
use crate::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::io::{decode_ten, encode_ten, Checkpoint};
use crate::model::FsRwkvModel;
use crate::objectives::{edge_loss, psnr, rmse, smooth_l1, ssim, total_loss, LossWeights};
use crate::params::{Bound, ParamStore};
use crate::rng::{mix_seed, random_tensor, seeded};
use crate::sfeb::Sfeb;
use crate::shift::{neighborhood8, FsoShiftVars, ShiftMode, ShiftSpec};
use crate::tensor::{Real, Tensor};
use crate::train::{run, RunOptions, TrainState};
use crate::wavelet::{dwt2, idwt2};
use crate::wkv::{bi_wkv_oracle, bi_wkv_scan, relative_error, scan_with_decay_sign, TokenSeq, WkvParams};

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub module: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub results: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed).count()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag}  {:<14} {:<44} {}", r.module, r.name, r.detail)?;
        }
        write!(
            f,
            "{} of {} properties passed (seed {})",
            self.results.len() - self.failures(),
            self.results.len(),
            self.seed
        )
    }
}

struct Collector {
    results: Vec<PropertyResult>,
}

impl Collector {
    fn check(&mut self, module: &'static str, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        self.results.push(PropertyResult { module, name: name.to_string(), passed, detail });
    }
}

fn perturbed<F: Real>(store: &mut ParamStore<F>, seed: u64, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let noise = random_tensor::<F>(store.get(id).shape(), mix_seed(seed, i as u64), scale);
        let v = store.get(id).add(&noise);
        store.set(id, v).expect("same shape");
    }
}

/// Random keys, values and decay parameters for one equivalence case.
pub fn wkv_case<F: Real>(seed: u64, t: usize, c: usize) -> (TokenSeq<F>, TokenSeq<F>, WkvParams<F>) {
    let mut rng = seeded(seed);
    let kscale = rng.random_range(0.5..4.0);
    let k = TokenSeq::line(random_tensor(&[1, t, c], mix_seed(seed, 1), kscale)).expect("line");
    let v = TokenSeq::line(random_tensor(&[1, t, c], mix_seed(seed, 2), 1.0)).expect("line");
    let w = Tensor::from_fn(&[c], |_| F::cst(rng.random_range(-2.0..6.0)));
    let u = random_tensor(&[c], mix_seed(seed, 3), 2.0);
    (k, v, WkvParams::new(w, u).expect("finite"))
}

/// Largest relative deviation of the scan from the oracle over `cases`
/// random cases for every length in `lengths`, both in `F`.
pub fn oracle_equivalence<F: Real>(seed: u64, lengths: &[usize], cases: usize, c: usize) -> Result<f64> {
    oracle_deviation::<F>(seed, lengths, cases, c, F::one())
}

fn oracle_deviation<F: Real>(seed: u64, lengths: &[usize], cases: usize, c: usize, sign: F) -> Result<f64> {
    let mut worst = 0.0f64;
    for &t in lengths {
        for i in 0..cases {
            let (k, v, p) = wkv_case::<F>(mix_seed(mix_seed(seed, t as u64), i as u64), t, c);
            let s = scan_with_decay_sign(&k, &v, &p, sign)?;
            let o = bi_wkv_oracle(&k, &v, &p)?;
            worst = worst.max(relative_error(&s, &o));
        }
    }
    Ok(worst)
}

/// One finite-difference comparison in the suite. Every differentiable op
/// appears exactly once.
pub struct GradCheckCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub opts: GradCheckOptions,
    run: fn(u64, &GradCheckOptions) -> Result<GradCheckReport>,
}

impl GradCheckCase {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed, &self.opts)
    }
}

/// `sum(y * probe)` for a random fixed probe, so every output coordinate matters.
fn probe_sum(g: &mut Graph<f64>, y: Var, probe: Var) -> Result<Var> {
    let m = g.mul(y, probe)?;
    Ok(g.sum(m))
}

/// A loss returning its value and its gradient with respect to the prediction.
type LossFn = fn(&Tensor<f64>, &Tensor<f64>) -> Result<(f64, Tensor<f64>)>;

fn loss_node(g: &mut Graph<f64>, pred: Var, gt: &Tensor<f64>, f: LossFn) -> Result<Var> {
    let (value, grad) = f(g.value(pred), gt)?;
    Ok(g.record(Tensor::scalar(value), &[pred], Box::new(move |g, _, _| vec![Some(grad.scale(g.data()[0]))])))
}

fn image01(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random_tensor::<f64>(shape, seed, 0.45).map(|v| v + 0.5)
}

fn gc_wavelet(seed: u64, inverse: bool, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [1, 2, 6, 8];
    let (xs, ps) = if inverse { ([1, 8, 3, 4], shape) } else { (shape, [1, 8, 3, 4]) };
    let inputs = [random_tensor(&xs, seed, 1.0), random_tensor(&ps, seed + 1, 1.0)];
    let name = if inverse { "idwt2" } else { "dwt2" };
    check_gradients(
        name,
        &inputs,
        |g, v| {
            let y = if inverse { g.idwt2(v[0])? } else { g.dwt2(v[0])? };
            probe_sum(g, y, v[1])
        },
        opts,
    )
}

fn gc_bi_wkv(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (h, w, c) = (3, 4, 3);
    let inputs = [
        random_tensor(&[2, h * w, c], seed, 2.0),
        random_tensor(&[2, h * w, c], seed + 1, 1.0),
        random_tensor(&[c], seed + 2, 3.0),
        random_tensor(&[c], seed + 3, 1.0),
        random_tensor(&[2, h * w, c], seed + 4, 1.0),
    ];
    check_gradients(
        "bi_wkv",
        &inputs,
        |g, v| {
            let y = g.bi_wkv(v[0], v[1], v[2], v[3], h, w)?;
            probe_sum(g, y, v[4])
        },
        opts,
    )
}

fn gc_fso_shift(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let spec = ShiftSpec::build(8, &neighborhood8())?;
    let inputs = [
        random_tensor(&[1, 8, 4, 4], seed, 1.0),
        random_tensor(&[8], seed + 1, 1.0),
        random_tensor(&[8], seed + 2, 1.0),
        random_tensor(&[8], seed + 3, 1.0),
        random_tensor(&[1, 8, 4, 4], seed + 4, 1.0),
    ];
    check_gradients(
        "fso_shift",
        &inputs,
        |g, v| {
            let p = FsoShiftVars { omega_spatial: v[1], omega_ll: v[2], omega_out: v[3] };
            let y = g.fso_shift(v[0], &spec, p)?;
            probe_sum(g, y, v[4])
        },
        opts,
    )
}

#[derive(Clone, Copy)]
enum BlockPart {
    Spatial,
    Channel,
    Whole,
}

fn gc_block(seed: u64, part: BlockPart, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (c, h, w) = (8, 2, 4);
    let mut store = ParamStore::<f64>::new();
    let block = Block::build(&mut store, &mut seeded(seed), "b", c, ShiftMode::fso(c, &neighborhood8())?);
    perturbed(&mut store, seed + 1, 0.35);
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(random_tensor(&[1, h * w, c], seed + 2, 1.0));
    inputs.push(random_tensor(&[1, h * w, c], seed + 3, 1.0));
    let n = store.len();
    let name = match part {
        BlockPart::Spatial => "spatial_mix",
        BlockPart::Channel => "channel_mix",
        BlockPart::Whole => "fsrwkv_block",
    };
    check_gradients(
        name,
        &inputs,
        |g, v| {
            let b = Bound::from_vars(v[..n].to_vec());
            let y = match part {
                BlockPart::Spatial => block.spatial.forward(g, &b, v[n], h, w, &block.mode)?,
                BlockPart::Channel => block.channel.forward(g, &b, v[n], h, w, &block.mode)?,
                BlockPart::Whole => block.forward(g, &b, v[n], h, w)?,
            };
            probe_sum(g, y, v[n + 1])
        },
        opts,
    )
}

fn gc_sfeb(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let s = Sfeb::build(&mut store, &mut seeded(seed), "sfeb", 4);
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(random_tensor(&[1, 4, 8, 8], seed + 1, 1.0));
    inputs.push(random_tensor(&[1, 4, 8, 8], seed + 2, 1.0));
    let n = store.len();
    check_gradients(
        "sfeb",
        &inputs,
        |g, v| {
            let b = Bound::from_vars(v[..n].to_vec());
            let y = s.forward(g, &b, v[n])?;
            probe_sum(g, y, v[n + 1])
        },
        opts,
    )
}

fn gc_loss(seed: u64, which: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shape = [1, 1, 13, 14];
    let gt = image01(seed, &shape);
    let pred = image01(seed + 1, &shape);
    let fns: [(&str, LossFn); 3] = [("smooth_l1", smooth_l1), ("ssim", ssim), ("edge_loss", edge_loss)];
    if which == 3 {
        return check_gradients(
            "total_loss",
            &[pred],
            |g, v| Ok(g.composite_loss(v[0], &gt, LossWeights::default())?.0),
            opts,
        );
    }
    let (name, f) = fns[which];
    check_gradients(name, &[pred], |g, v| loss_node(g, v[0], &gt, f), opts)
}

/// Full smoke model in double precision with perturbed parameters; only a
/// sample of parameter coordinates is differenced.
fn gc_model(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = FsRwkvModel::<f64>::build(&ModelConfig { seed, ..ModelConfig::smoke() })?;
    perturbed(&mut model.store, seed + 1, 0.05);
    let x = image01(seed + 2, &[1, 1, 16, 16]);
    let gt = image01(seed + 3, &[1, 1, 16, 16]);
    let inputs: Vec<Tensor<f64>> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let lambdas = model.cfg.loss_weights;
    check_gradients(
        "model",
        &inputs,
        |g, v| {
            let b = Bound::from_vars(v.to_vec());
            let xv = g.constant(x.clone());
            let y = model.forward(g, &b, xv)?;
            Ok(g.composite_loss(y, &gt, lambdas)?.0)
        },
        opts,
    )
}

pub fn gradcheck_cases() -> Vec<GradCheckCase> {
    let exact = GradCheckOptions::default();
    let case = |name, shapes: &[&[usize]], opts: GradCheckOptions, run| GradCheckCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        opts,
        run,
    };
    vec![
        case("dwt2", &[&[1, 2, 6, 8]], exact.clone(), |s, o| gc_wavelet(s, false, o)),
        case("idwt2", &[&[1, 8, 3, 4]], exact.clone(), |s, o| gc_wavelet(s, true, o)),
        case("bi_wkv", &[&[2, 12, 3], &[2, 12, 3], &[3], &[3]], exact.clone(), gc_bi_wkv),
        case("fso_shift", &[&[1, 8, 4, 4], &[8], &[8], &[8]], exact.clone(), gc_fso_shift),
        case("spatial_mix", &[&[1, 8, 8]], exact.clone(), |s, o| gc_block(s, BlockPart::Spatial, o)),
        case("channel_mix", &[&[1, 8, 8]], exact.clone(), |s, o| gc_block(s, BlockPart::Channel, o)),
        case("fsrwkv_block", &[&[1, 8, 8]], exact.clone(), |s, o| gc_block(s, BlockPart::Whole, o)),
        case("sfeb", &[&[1, 4, 8, 8]], GradCheckOptions::sampled(60), gc_sfeb),
        case("smooth_l1", &[&[1, 1, 13, 14]], exact.clone(), |s, o| gc_loss(s, 0, o)),
        case("ssim", &[&[1, 1, 13, 14]], exact.clone(), |s, o| gc_loss(s, 1, o)),
        case("edge_loss", &[&[1, 1, 13, 14]], exact.clone(), |s, o| gc_loss(s, 2, o)),
        case("total_loss", &[&[1, 1, 13, 14]], exact, |s, o| gc_loss(s, 3, o)),
        case(
            "model",
            &[&[1, 1, 16, 16]],
            GradCheckOptions { h: 1e-4, ..GradCheckOptions::sampled(40).with_tol(1e-2) },
            gc_model,
        ),
    ]
}

/// Trains a tiny model twice from the same seed and compares checkpoint bytes
/// and metric CSVs.
pub fn reproducibility_probe(seed: u64, steps: usize) -> Result<(bool, usize)> {
    let spec = DegradeSpec::default();
    let train = SplitData::from_samples(&generate_split(seed, Split::Train, 4, 16, 16, &spec)?);
    let test = SplitData::from_samples(&generate_split(seed, Split::Test, 2, 16, 16, &spec)?);
    let cfg = TrainConfig {
        model: ModelConfig { seed, ..ModelConfig::smoke() },
        steps,
        seed,
        mixup_prob: 0.5,
        ..TrainConfig::default()
    };
    let once = || -> Result<(Vec<u8>, String)> {
        let mut state = TrainState::new(&cfg)?;
        run(&mut state, &train, RunOptions::default())?;
        Ok((state.checkpoint().to_bytes(), evaluate(&state.model, &test)?.to_csv()))
    };
    let (a, b) = (once()?, once()?);
    Ok((a == b, a.0.len()))
}

pub fn run_all(seed: u64) -> SuiteReport {
    let mut c = Collector { results: Vec::new() };

    c.check("wavelet", "perfect reconstruction and Parseval", || {
        let (mut recon, mut parseval) = (0.0f64, 0.0f64);
        for i in 0..20u64 {
            let (h, w) = (2 * (1 + i as usize % 5), 2 * (1 + (i as usize / 5) % 4));
            let x = random_tensor::<f64>(&[2, 3, h, w], mix_seed(seed, i), 1.0);
            let p = dwt2(&x)?;
            recon = recon.max(idwt2(&p)?.max_abs_diff(&x));
            let e = x.norm_sq();
            parseval = parseval.max((p.energy() - e).abs() / e.max(1e-300));
        }
        Ok((recon <= 1e-6 && parseval <= 1e-4, format!("max recon {recon:.2e}, max Parseval rel {parseval:.2e}")))
    });

    c.check("bi_wkv", "scan equals quadratic oracle", || {
        let e = oracle_equivalence::<f64>(seed, &[1, 2, 3, 8, 64], 10, 4)?;
        Ok((e <= 1e-5, format!("max rel err {e:.2e}")))
    });
    c.check("bi_wkv", "mutation probe: flipped decay sign detected", || {
        let e = oracle_deviation::<f64>(seed, &[8, 64], 4, 4, -1.0)?;
        Ok((e > 1e-3, format!("mutant rel err {e:.2e}")))
    });
    c.check("bi_wkv", "outputs are convex combinations of values", || {
        let mut worst = 0.0f64;
        for i in 0..10u64 {
            let (k, v, p) = wkv_case::<f64>(mix_seed(seed, 100 + i), 37, 3);
            let y = bi_wkv_scan(&k, &v, &p)?;
            for ch in 0..3 {
                let col = |t: &TokenSeq<f64>| (0..37).map(|j| t.data.data()[j * 3 + ch]).collect::<Vec<_>>();
                let vs = col(&v);
                let (lo, hi) = vs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                for yv in col(&y) {
                    worst = worst.max(lo - yv).max(yv - hi);
                }
            }
        }
        Ok((worst <= 1e-12, format!("max excursion {worst:.2e}")))
    });
    c.check("bi_wkv", "stable for extreme keys in f32", || {
        let t = 64;
        let mut k = random_tensor::<f32>(&[1, t, 2], mix_seed(seed, 200), 1.0);
        k.data_mut().iter_mut().step_by(5).for_each(|x| *x *= 80.0);
        let k = TokenSeq::line(k)?;
        let v = TokenSeq::line(random_tensor::<f32>(&[1, t, 2], mix_seed(seed, 201), 1.0))?;
        let p = WkvParams::new(Tensor::new(vec![2], vec![0.5, 8.0])?, Tensor::new(vec![2], vec![1.0, -1.0])?)?;
        let s = bi_wkv_scan(&k, &v, &p)?;
        let o = bi_wkv_oracle(&k, &v, &p)?;
        let e = relative_error(&s, &o);
        Ok((s.data.is_finite() && e <= 1e-5, format!("finite, rel err {e:.2e}")))
    });

    c.check("fso_shift", "C=96 8-neighborhood partition", || {
        let spec = ShiftSpec::build(96, &neighborhood8())?;
        Ok((spec.partition == [16, 16, 16, 16, 8, 8, 8, 8], format!("{:?}", spec.partition)))
    });
    c.check("fso_shift", "closed output gate is identity", || {
        let spec = ShiftSpec::build(8, &neighborhood8())?;
        let x = random_tensor::<f64>(&[1, 8, 6, 6], mix_seed(seed, 300), 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = crate::shift::FsoShiftParams::<f64>::constant(8, 0.0, 0.0, -60.0);
        let pv = FsoShiftVars::leaves(&mut g, &p);
        let y = g.fso_shift(xv, &spec, pv)?;
        let e = g.value(y).max_abs_diff(&x);
        Ok((e <= 1e-12, format!("max deviation {e:.2e}")))
    });

    c.check("fsrwkv_block", "zero output projections give identity", || {
        let mut store = ParamStore::<f64>::new();
        let block = Block::build(&mut store, &mut seeded(seed), "b", 8, ShiftMode::fso(8, &neighborhood8())?);
        let x = random_tensor::<f64>(&[2, 16, 8], mix_seed(seed, 400), 1.0);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &b, xv, 4, 4)?;
        Ok((g.value(y) == &x, "bit-identical".to_string()))
    });

    c.check("sfeb", "gate weights lie on the simplex", || {
        let mut store = ParamStore::<f64>::new();
        let s = Sfeb::build(&mut store, &mut seeded(seed), "s", 4);
        perturbed(&mut store, mix_seed(seed, 500), 0.5);
        let mut worst = 0.0f64;
        for i in 0..20u64 {
            let x = random_tensor::<f64>(&[2, 4, 8, 8], mix_seed(seed, 501 + i), 2.0);
            let mut g = Graph::new();
            let b = store.bind(&mut g, false);
            let xv = g.constant(x);
            let t = s.trace(&mut g, &b, xv)?;
            for pair in g.value(t.gate).data().chunks(2) {
                worst = worst.max((pair[0] + pair[1] - 1.0).abs());
                if pair.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                    worst = f64::INFINITY;
                }
            }
        }
        Ok((worst <= 1e-12, format!("max |sum - 1| {worst:.2e}")))
    });
    c.check("sfeb", "identity frequency path reconstructs input", || {
        let mut store = ParamStore::<f64>::new();
        let mut s = Sfeb::build(&mut store, &mut seeded(seed), "s", 4);
        s.set_identity_frequency_path(&mut store, 10.0);
        s.force_gate(&mut store, true);
        let x = random_tensor::<f64>(&[1, 4, 8, 8], mix_seed(seed, 600), 1.0);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = s.forward(&mut g, &b, xv)?;
        let e = g.value(y).max_abs_diff(&x);
        Ok((e <= 1e-4, format!("max deviation {e:.2e}")))
    });

    c.check("objectives", "loss closed forms and composition", || {
        let gt = image01(mix_seed(seed, 700), &[1, 1, 16, 16]);
        let shifted = gt.map(|v| v + 0.1);
        let (l1, _) = smooth_l1(&shifted, &gt)?;
        let want_l1 = 0.5 * 0.1f64 * 0.1;
        let (zero, _) = total_loss(&gt, &gt, LossWeights::default())?;
        let pred = image01(mix_seed(seed, 701), &[1, 1, 16, 16]);
        let (parts, _) = total_loss(&pred, &gt, LossWeights::default())?;
        let manual = parts.l1 + 0.4 * (1.0 - ssim(&pred, &gt)?.0) + 0.3 * edge_loss(&pred, &gt)?.0;
        let ok = (l1 - want_l1).abs() < 1e-12 && zero.total == 0.0 && (parts.total - manual).abs() <= 1e-7;
        Ok((
            ok,
            format!("l1 {l1:.3e}, pred=gt total {}, composition err {:.1e}", zero.total, (parts.total - manual).abs()),
        ))
    });
    c.check("objectives", "metric closed forms", || {
        let gt = Tensor::<f64>::full(&[1, 1, 12, 12], 0.25);
        let pred = gt.map(|v| v + 0.1);
        let p = psnr(&pred, &gt)?;
        let r = rmse(&pred, &gt)?;
        let s = ssim(&gt, &gt)?.0;
        let ok = (p - 20.0).abs() < 1e-9 && (r - 0.1).abs() < 1e-12 && s == 1.0 && psnr(&gt, &gt)? == f64::INFINITY;
        Ok((ok, format!("PSNR {p:.6} dB, RMSE {r:.6}, SSIM(x,x) {s}")))
    });

    c.check("data", ".ten and checkpoint round-trips", || {
        let t = random_tensor::<f32>(&[2, 1, 4, 4], mix_seed(seed, 800), 1.0);
        let bytes = encode_ten(&t);
        let back: Tensor<f32> = decode_ten(std::path::Path::new("mem"), &bytes)?;
        let model = FsRwkvModel::<f32>::build(&ModelConfig::smoke())?;
        let ck = model.checkpoint().to_bytes();
        let again = FsRwkvModel::from_checkpoint(&Checkpoint::from_bytes(std::path::Path::new("mem"), &ck)?)?;
        let ok = bytes.len() == 28 + 128 && back == t && again.checkpoint().to_bytes() == ck;
        Ok((ok, format!("{} tensor bytes, {} checkpoint bytes", bytes.len(), ck.len())))
    });

    c.check("cli", "same seed gives identical checkpoints and CSVs", || {
        let (same, len) = reproducibility_probe(seed, 3)?;
        Ok((same, format!("{len} checkpoint bytes compared")))
    });

    for case in gradcheck_cases() {
        c.check("gradcheck", case.name, || {
            let r = case.run(mix_seed(seed, 900))?;
            Ok((r.passed(), format!("max rel err {:.2e} (tol {:.0e}), {} coords", r.max_rel_err, r.tol, r.probed)))
        });
    }

    SuiteReport { seed, results: c.results }
}
