//! End-to-end acceptance gate. Runs every criterion in sequence (timings are
//! only meaningful without concurrent work on the same cores), prints one
//! PASS/FAIL line each and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fsrwkv::config::{ModelConfig, TrainConfig};
use fsrwkv::data::{generate_split, DegradeSpec, Split, SplitData};
use fsrwkv::eval::{evaluate, identity_baseline};
use fsrwkv::objectives::{edge_loss, smooth_l1, ssim, total_loss, LossWeights};
use fsrwkv::rng::{mix_seed, random_tensor};
use fsrwkv::shift::{neighborhood8, ShiftSpec};
use fsrwkv::suite::{gradcheck_cases, oracle_equivalence, reproducibility_probe};
use fsrwkv::timing::{scaling_ratios, time_wkv};
use fsrwkv::train::{ablate, ablation_table, run, RunOptions, TrainState};
use fsrwkv::wavelet::{dwt2, idwt2};
use fsrwkv::{Graph, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t <= limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn oracle_equivalence_criterion() -> Result<Outcome> {
    let start = Instant::now();
    let err = oracle_equivalence::<f32>(11, &[1, 2, 3, 8, 64, 256, 1024], 50, 4)?;
    let (fast, time) = within(Duration::from_secs(60), start);
    outcome(err <= 1e-5 && fast, format!("max rel err {err:.2e} (f32), {time}"))
}

fn scaling_criterion() -> Result<Outcome> {
    let start = Instant::now();
    let rows = time_wkv(&[2048, 4096], 8, 5, 12)?;
    let (scan, oracle) = scaling_ratios(&rows, 4096, 2048).expect("both lengths timed");
    let matches = rows.iter().all(|r| r.matches);
    let (fast, time) = within(Duration::from_secs(300), start);
    outcome(
        scan <= 2.6 && oracle >= 3.5 && matches && fast,
        format!("T 4096/2048: scan ratio {scan:.2} (<= 2.6), oracle ratio {oracle:.2} (>= 3.5), equivalence {matches}, {time}"),
    )
}

fn wavelet_criterion() -> Result<Outcome> {
    let (mut recon, mut parseval) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let side = 8 << (i % 4);
        let x =
            random_tensor::<f64>(&[1, 1 + (i % 3) as usize, side, side + 2 * (i % 5) as usize], mix_seed(13, i), 1.0);
        let p = dwt2(&x)?;
        recon = recon.max(idwt2(&p)?.max_abs_diff(&x));
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let bands: f64 = p.bands().iter().flat_map(|b| b.data()).map(|v| v * v).sum();
        parseval = parseval.max((bands - energy).abs() / energy);
    }
    outcome(
        recon <= 1e-6 && parseval <= 1e-4,
        format!("100 images: max |idwt2(dwt2(x)) - x| {recon:.2e}, max Parseval rel {parseval:.2e}"),
    )
}

fn gradcheck_criterion() -> Result<Outcome> {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst = Vec::new();
    for case in gradcheck_cases() {
        let r = case.run(14)?;
        if !r.passed() {
            failed.push(r.to_string());
        }
        worst.push(format!("{} {:.1e}", case.name, r.max_rel_err));
    }
    let (fast, time) = within(Duration::from_secs(600), start);
    let detail = if failed.is_empty() { worst.join(", ") } else { failed.join("; ") };
    outcome(failed.is_empty() && fast, format!("{detail}; {time}"))
}

fn partition_criterion() -> Result<Outcome> {
    let spec = ShiftSpec::build(96, &neighborhood8())?;
    // weights 1/d: four unit-distance offsets and four diagonals at distance 2,
    // so 96 * 1 / 6 = 16 and 96 * (1/2) / 6 = 8
    let expected = [16, 16, 16, 16, 8, 8, 8, 8];
    outcome(spec.partition == expected, format!("C=96 -> {:?}", spec.partition))
}

fn loss_criterion() -> Result<Outcome> {
    let lambdas = LossWeights::default();
    let pred = random_tensor::<f64>(&[1, 1, 24, 24], 15, 0.5).map(|v| v.abs().min(1.0));
    let gt = random_tensor::<f64>(&[1, 1, 24, 24], 16, 0.5).map(|v| v.abs().min(1.0));

    // smooth L1 with unit threshold, written out directly
    let l1 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| {
            let d = (p - g).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum::<f64>()
        / pred.numel() as f64;
    let manual = l1 + 0.4 * (1.0 - ssim(&pred, &gt)?.0) + 0.3 * edge_loss(&pred, &gt)?.0;
    let (direct, _) = total_loss(&pred, &gt, lambdas)?;
    let mut g = Graph::new();
    let pv = g.constant(pred.clone());
    let (gv, _) = g.composite_loss(pv, &gt, lambdas)?;
    let graph = g.value(gv).data()[0];
    let zero = total_loss(&gt, &gt, lambdas)?.0.total;
    let err = (direct.total - manual).abs().max((graph - manual).abs()).max((smooth_l1(&pred, &gt)?.0 - l1).abs());
    outcome(
        lambdas == LossWeights { ssim: 0.4, edge: 0.3 } && err <= 1e-7 && zero == 0.0,
        format!("lambdas ({}, {}), |total - manual| {err:.1e}, total(gt, gt) = {zero}", lambdas.ssim, lambdas.edge),
    )
}

fn smoke_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::smoke(),
        steps,
        eval_interval: 0,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

fn split(split: Split, count: usize, side: usize) -> Result<SplitData> {
    Ok(SplitData::from_samples(&generate_split(0, split, count, side, side, &DegradeSpec::default())?))
}

fn toy_criterion() -> Result<Outcome> {
    let start = Instant::now();
    let (train, test) = (split(Split::Train, 64, 64)?, split(Split::Test, 16, 64)?);
    let base = identity_baseline(&test)?;
    let mut state = TrainState::new(&smoke_train_config(2000))?;
    run(&mut state, &train, RunOptions::default())?;
    let r = evaluate(&state.model, &test)?;
    let (dp, ds) = (r.mean_psnr() - base.mean_psnr(), r.mean_ssim() - base.mean_ssim());
    let (fast, time) = within(Duration::from_secs(1800), start);
    outcome(
        dp >= 2.0 && ds >= 0.03 && fast,
        format!(
            "PSNR {:.2} -> {:.2} dB ({dp:+.2}), SSIM {:.4} -> {:.4} ({ds:+.4}), {time}",
            base.mean_psnr(),
            r.mean_psnr(),
            base.mean_ssim(),
            r.mean_ssim()
        ),
    )
}

fn ablation_criterion() -> Result<Outcome> {
    let (train, test) = (split(Split::Train, 16, 32)?, split(Split::Test, 4, 32)?);
    let rows = ablate(&smoke_train_config(200), &train, &test, None)?;
    let table = ablation_table(&rows);
    let shared = rows.iter().all(|r| r.data_hash == rows[0].data_hash && r.seed == rows[0].seed);
    let variants: Vec<_> = rows.iter().map(|r| (r.fso_shift, r.sfeb)).collect();
    let distinct = (0..4).all(|i| (0..i).all(|j| variants[i] != variants[j]));
    let finite = rows.iter().all(|r| r.final_loss.is_finite() && r.metrics.mean_psnr().is_finite());
    let marked = rows.iter().filter(|r| r.is_full()).count() == 1 && table.lines().any(|l| l.starts_with('*'));
    let psnr: Vec<_> = rows.iter().map(|r| format!("{} {:.2} dB", r.label(), r.metrics.mean_psnr())).collect();
    outcome(rows.len() == 4 && shared && distinct && finite && marked, psnr.join(", "))
}

fn reproducibility_criterion() -> Result<Outcome> {
    let (same, bytes) = reproducibility_probe(17, 25)?;
    outcome(same, format!("two 25-step runs: {bytes}-byte checkpoints and metric CSVs identical = {same}"))
}

fn overfit_criterion() -> Result<Outcome> {
    let pair = split(Split::Train, 1, 64)?;
    let cfg = TrainConfig { lr: 2e-3, flip: false, rotate: false, mixup_prob: 0.0, ..smoke_train_config(500) };
    let mut state = TrainState::new(&cfg)?;
    run(&mut state, &pair, RunOptions::default())?;
    let psnr = evaluate(&state.model, &pair)?.mean_psnr();
    outcome(psnr >= 35.0, format!("train PSNR after 500 steps {psnr:.2} dB (>= 35)"))
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("oracle equivalence", oracle_equivalence_criterion),
        ("linear-vs-quadratic scaling", scaling_criterion),
        ("wavelet reconstruction", wavelet_criterion),
        ("gradient checks", gradcheck_criterion),
        ("shift channel partition", partition_criterion),
        ("loss composition", loss_criterion),
        ("toy translation", toy_criterion),
        ("ablation harness", ablation_criterion),
        ("reproducibility", reproducibility_criterion),
        ("overfit capacity", overfit_criterion),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let (passed, detail) = match f() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!("{}  {name:<28} {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
