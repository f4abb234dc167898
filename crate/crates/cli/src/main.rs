use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use warpreg::bench::{self, BenchConfig};
use warpreg::error::{Error, Result};
use warpreg::gradsuite;
use warpreg::io::{self, pair_name, StoredPair};
use warpreg::loss::{total_loss, LossConfig};
use warpreg::metrics::{dice_jaccard, endpoint_error, threshold_mask, Metrics};
use warpreg::model::{cws_forward, ModelConfig, ModelParams, PyramidPair};
use warpreg::optim::AdamConfig;
use warpreg::synth::{gen_pair, SynthConfig};
use warpreg::train::{loss_csv_header, train, write_loss_row, TrainConfig};
use warpreg::KernelKind;

#[derive(Parser)]
#[command(name = "warpreg", version, about = "Deformable image registration with a coarse-to-fine warping network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic (source, target, ground-truth field) triples.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Register one image pair with a trained model.
    Register(RegisterArgs),
    /// Register every pair of a dataset directory and write metrics.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare displacement-field resamplers.
    InterpBench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Largest displacement in pixels.
    #[arg(long, default_value_t = 5.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Spacing in pixels of the random control grid.
    #[arg(long, default_value_t = 16)]
    control_grid: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV [default: <out>.loss.csv].
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Divides every hidden channel count.
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    #[arg(long, default_value = "bilinear")]
    image_kernel: KernelKind,
    #[arg(long, default_value = "catmull_rom")]
    dvf_kernel: KernelKind,
    /// Print progress every N iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IMGF or PGM (by extension).
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out_dvf: PathBuf,
    /// IMGF, or 8-bit PGM when the extension is `.pgm`.
    #[arg(long)]
    out_warped: PathBuf,
    /// Magenta/green PPM overlay of warped and target images.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// Metrics JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Intensity level separating foreground from background for overlap scores.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Seed of the synthetic training pairs.
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Iterations averaged into the final loss.
    #[arg(long, default_value_t = 20)]
    tail: usize,
    /// Side of the synthetic training images.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Side of the smooth test field for the resampling error.
    #[arg(long, default_value_t = 64)]
    field_size: usize,
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        size: a.size,
        amplitude: a.amplitude,
        control_grid: a.control_grid,
        seed: a.seed,
        count: a.count,
    };
    cfg.validate()?;
    for i in 0..cfg.count {
        let p = gen_pair(&cfg, i)?;
        io::write_pair(&a.out_dir, &pair_name(i), &p.source, &p.target, Some(&p.dvf))?;
    }
    println!("wrote {} pairs to {}", cfg.count, a.out_dir.display());
    Ok(())
}

fn pyramids(data: &[StoredPair], levels: usize) -> Result<Vec<PyramidPair>> {
    data.iter()
        .map(|p| PyramidPair::new(&p.source, &p.target, levels))
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = ModelConfig::default()
        .with_width_divisor(a.width_divisor)
        .with_levels(a.levels);
    config.image_warp_kernel = a.image_kernel;
    config.dvf_kernel = a.dvf_kernel;
    let cfg = TrainConfig {
        iters: a.iters,
        batch: a.batch,
        seed: a.seed,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        loss: LossConfig {
            lambda: a.lambda,
            ..LossConfig::default()
        },
    };
    cfg.validate()?;
    let mut params = ModelParams::init(config, a.seed)?;
    let data = pyramids(&io::read_dataset(&a.data_dir)?, a.levels)?;
    let csv_path = a
        .loss_csv
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", a.out.display())));
    let mut csv = create(&csv_path)?;
    writeln!(csv, "{}", loss_csv_header(a.levels))?;
    let log_every = a.log_every;
    let result = train(&mut params, &data, &cfg, |it, b| {
        write_loss_row(&mut csv, it, b)?;
        if log_every > 0 && (it % log_every == 0 || it + 1 == cfg.iters) {
            eprintln!("iter {it:>6}  total {:.6}  data {:.6}  reg {:.3e}", b.total, b.data, b.reg);
        }
        Ok(())
    });
    csv.flush()?;
    result?;
    io::write_checkpoint(&a.out, &params)?;
    println!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(())
}

fn register_cmd(a: RegisterArgs) -> Result<()> {
    let params = io::read_checkpoint(&a.checkpoint)?;
    let source = io::read_any_image(&a.source)?;
    let target = io::read_any_image(&a.target)?;
    let (u, warped) = warpreg::model::register(&source, &target, &params)?;
    io::write_dvf(&a.out_dvf, &u)?;
    if is_pgm(&a.out_warped) {
        io::write_pgm(&a.out_warped, &warped)?;
    } else {
        io::write_image(&a.out_warped, &warped)?;
    }
    if let Some(o) = &a.overlay {
        io::write_overlay(o, &warped, &target)?;
    }
    println!("max |u| = {:.4} px", u.max_magnitude());
    Ok(())
}

fn eval_one(params: &ModelParams, p: &StoredPair, threshold: f64, loss: &LossConfig) -> Result<Metrics> {
    let pyr = PyramidPair::new(&p.source, &p.target, params.config().levels)?;
    let out = cws_forward(&pyr, params)?;
    let overlap = dice_jaccard(&threshold_mask(&out.warped_final, threshold), &threshold_mask(&p.target, threshold))?;
    let (epe_mean, epe_max) = match &p.dvf {
        Some(gt) => endpoint_error(&out.u_final, gt)?,
        None => (f64::NAN, f64::NAN),
    };
    Ok(Metrics {
        name: Some(p.name.clone()),
        dice: overlap.dice,
        jaccard: overlap.jaccard,
        epe_mean,
        epe_max,
        loss_breakdown: total_loss(&out, &pyr.target, loss)?,
    })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let params = io::read_checkpoint(&a.checkpoint)?;
    let loss = LossConfig {
        lambda: a.lambda,
        ..LossConfig::default()
    };
    loss.validate()?;
    let data = io::read_dataset(&a.data_dir)?;
    let metrics = data
        .iter()
        .map(|p| eval_one(&params, p, a.threshold, &loss))
        .collect::<Result<Vec<_>>>()?;
    let n = metrics.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    println!(
        "{} pairs  dice {:.4}  jaccard {:.4}  epe {:.4} px  loss {:.6}",
        metrics.len(),
        mean(|m| m.dice),
        mean(|m| m.jaccard),
        mean(|m| m.epe_mean),
        mean(|m| m.loss_breakdown.total)
    );
    io::write_metrics(&a.out, &metrics)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let results = gradsuite::run_all(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{verdict:<4} {:<36} rel err {:.3e} (tol {:.0e}, {} of {} excluded as kinks)",
            r.name, r.error, r.tolerance, r.excluded, r.coordinates
        );
    }
    if let Some(out) = &a.out {
        let json = serde_json::to_vec_pretty(&results).map_err(|e| Error::Malformed(e.to_string()))?;
        std::fs::write(out, json)?;
    }
    if failed > 0 {
        return Err(Error::Config(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        field_size: a.field_size,
        synth: SynthConfig {
            size: a.size,
            seed: a.seed,
            ..defaults.synth
        },
        train: TrainConfig {
            iters: a.iters,
            ..defaults.train
        },
        tail: a.tail,
        ..defaults
    };
    let rows = bench::run(&cfg)?;
    let mut f = create(&a.out)?;
    bench::write_csv(&mut f, &rows)?;
    f.flush()?;
    bench::write_csv(&mut std::io::stdout(), &rows)?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("WARPREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("WARPREG_THREADS={v:?} is not a non-negative integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Register(a) => register_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::InterpBench(a) => bench_cmd(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_exit_with_two() {
        let e = Error::NonFinite {
            term: "data".into(),
            iteration: 3,
        };
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
    }

    #[test]
    fn pgm_detection() {
        assert!(is_pgm(Path::new("a/b.PGM")));
        assert!(!is_pgm(Path::new("a/b.imgf")));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
