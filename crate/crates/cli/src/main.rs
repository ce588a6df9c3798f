use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fsrwkv::config::{ModelConfig, TrainConfig};
use fsrwkv::data::{load_split, write_dataset, DatasetSpec, DegradeSpec, Split, SplitData};
use fsrwkv::eval::{evaluate, predict_split, report, write_grids, MetricsReport};
use fsrwkv::io::{load_ten, save_pgm, save_ten, Checkpoint};
use fsrwkv::model::FsRwkvModel;
use fsrwkv::timing::{scaling_ratios, time_wkv, timing_csv};
use fsrwkv::train::{ablate, ablation_csv, ablation_table, history_csv, run, RunOptions, TrainState, CHECKPOINT_FILE};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "fsrwkv", version, about = "Wavelet-domain bidirectional RWKV image restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    SynthData(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Restore a single `.ten` image.
    Infer(InferArgs),
    /// Time the linear scan against the quadratic oracle.
    BenchWkv(BenchArgs),
    /// Train and compare the four shift/skip variants.
    Ablate(AblateArgs),
    /// Run the built-in property and gradient checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    /// Height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many updates without changing the schedule.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// CSV report; a table is written next to it with a `.txt` extension.
    #[arg(long)]
    report: PathBuf,
    /// Directory for input | prediction | target PGM grids.
    #[arg(long)]
    grids: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the prediction as an 8-bit PGM.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sequence lengths.
    #[arg(long = "T", value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
    lengths: Vec<usize>,
    #[arg(long = "C", default_value_t = 8)]
    channels: usize,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_test(data: &Path) -> anyhow::Result<Option<SplitData>> {
    let test = load_split(data, Split::Test)?;
    Ok((!test.is_empty()).then_some(test))
}

fn write_report(path: &Path, r: &MetricsReport) -> anyhow::Result<()> {
    write(path, r.to_csv())?;
    write(&path.with_extension("txt"), r.to_table())
}

fn synth_data(a: SynthArgs) -> anyhow::Result<()> {
    let (height, width) = (a.size[0], a.size[1]);
    let m = ModelConfig::default().size_multiple();
    if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
        return Err(fsrwkv::Error::Config(format!("size {height}x{width} must be a positive multiple of {m}")).into());
    }
    let spec =
        DatasetSpec { train: a.train, test: a.test, height, width, seed: a.seed, degrade: DegradeSpec::default() };
    write_dataset(&a.out, &spec)?;
    log::info!("wrote {} train and {} test pairs to {}", a.train, a.test, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let train = load_split(&a.data, Split::Train)?;
    if train.is_empty() {
        bail!(fsrwkv::Error::Config(format!("no training pairs in {}", a.data.display())));
    }
    let test = load_test(&a.data)?;
    let mut state = match &a.resume {
        Some(ck) => {
            let state = TrainState::from_checkpoint(&Checkpoint::load(ck)?)?;
            log::info!("resuming from {} at step {}", ck.display(), state.step);
            state
        }
        None => TrainState::new(&load_config(a.config.as_deref())?)?,
    };
    if let Some(sample) = train.inputs.first() {
        let (_, h, w) = sample.dims3()?;
        state.cfg.model.check_input_size(h, w)?;
    }
    write(&a.out.join("config.txt"), state.cfg.to_text())?;
    log::info!("{} parameters, {} steps", state.model.param_count(), state.cfg.steps);
    let first = state.step;
    let opts = RunOptions { out_dir: Some(&a.out), test: test.as_ref(), stop_at: a.stop_at };
    let history = run(&mut state, &train, opts)?;

    let log_path = a.out.join("train_log.csv");
    let csv = history_csv(&history);
    if first > 0 && log_path.exists() {
        let mut prev = fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
        prev.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
        write(&log_path, prev)?;
    } else {
        write(&log_path, csv)?;
    }
    if let Some(test) = &test {
        let r = evaluate(&state.model, test)?;
        log::info!("test PSNR {:.3} dB SSIM {:.4} RMSE {:.5}", r.mean_psnr(), r.mean_ssim(), r.mean_rmse());
        write_report(&a.out.join("metrics.csv"), &r)?;
    }
    log::info!("checkpoint at {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = FsRwkvModel::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let test = load_split(&a.data, Split::Test)?;
    let preds = predict_split(&model, &test)?;
    let r = report(&preds, &test, model.cfg.hash(), model.cfg.seed)?;
    write_report(&a.report, &r)?;
    if let Some(dir) = &a.grids {
        write_grids(dir, &test, &preds)?;
    }
    print!("{}", r.to_table());
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let model = FsRwkvModel::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let x = load_ten::<f32>(&a.input)?;
    let shape = x.shape().to_vec();
    let batch = match shape.len() {
        2 => x.reshape(&[1, 1, shape[0], shape[1]])?,
        3 => x.reshape(&[1, shape[0], shape[1], shape[2]])?,
        _ => x,
    };
    let y = model.predict(&batch)?;
    let y = if shape.len() < 4 { y.reshape(&shape)? } else { y };
    save_ten(&a.out, &y)?;
    if let Some(p) = &a.pgm {
        let (_, _, h, w) = batch.dims4()?;
        save_pgm(p, &y.reshape(&[1, h, w])?)?;
    }
    Ok(())
}

fn bench_wkv(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let rows = time_wkv(&a.lengths, a.channels, a.reps, a.seed)?;
    write(&a.csv, timing_csv(&rows))?;
    for r in &rows {
        println!(
            "T={:<6} scan {:>12} ns  oracle {:>14} ns  rel err {:.2e}",
            r.t, r.scan_ns, r.oracle_ns, r.max_rel_err
        );
    }
    if let Some((scan, oracle)) = scaling_ratios(&rows, 4096, 2048) {
        println!("T 4096/2048 time ratio: scan {scan:.2}, oracle {oracle:.2}");
    }
    if rows.iter().any(|r| !r.matches) {
        log::error!("scan disagrees with the oracle");
        return Ok(ExitCode::from(EXIT_NUMERICAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let train = load_split(&a.data, Split::Train)?;
    let test = load_split(&a.data, Split::Test)?;
    let rows = ablate(&cfg, &train, &test, Some(&a.out))?;
    let table = ablation_table(&rows);
    write(&a.out.join("ablation.txt"), &table)?;
    write(&a.out.join("ablation.csv"), ablation_csv(&rows))?;
    print!("{table}");
    Ok(())
}

fn check(a: CheckArgs) -> ExitCode {
    let report = fsrwkv::suite::run_all(a.seed);
    print!("{report}");
    if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<fsrwkv::Error>()) {
        Some(err) if !err.is_validation() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FSRWKV_THREADS") {
        let n: usize = v.parse().with_context(|| format!("FSRWKV_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.cmd {
        Command::SynthData(a) => synth_data(a).map(|()| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|()| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|()| ExitCode::SUCCESS),
        Command::Infer(a) => infer(a).map(|()| ExitCode::SUCCESS),
        Command::BenchWkv(a) => bench_wkv(a),
        Command::Ablate(a) => ablate_cmd(a).map(|()| ExitCode::SUCCESS),
        Command::Check(a) => Ok(check(a)),
    });
    result.unwrap_or_else(|e| {
        log::error!("{e:#}");
        ExitCode::from(exit_code(&e))
    })
}
