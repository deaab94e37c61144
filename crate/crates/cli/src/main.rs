//! `ivr`: train, code and evaluate variable-rate image compression models.

mod error;
mod imageio;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ivr_core::checkpoint::{self, ModelHash};
use ivr_core::coder::{decode_image_with_hash, encode_image_with_hash, Bitstream};
use ivr_core::interpca::{interp_lambda, Alpha, RateControl};
use ivr_core::layers::{build_model, CompressionModel};
use ivr_core::metrics::{
    bd_quality, bd_rate, fine_rates, gate_statistics, grid_rates, latent_histograms, rd_sweep, read_curves, to_curve,
    write_curves, write_gate_statistics, Histogram, QualityKind, RdCurve,
};
use ivr_core::training::{median, parse_run_config, Corpus, LogWriter, RateMode, Trainer};

use error::{CliError, CliResult, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "ivr", version, about = "Variable-rate learned image compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of images or a procedural corpus.
    Train(TrainArgs),
    /// Compress one image into a `.ivr` bitstream.
    Encode(EncodeArgs),
    /// Reconstruct an image from a bitstream.
    Decode(DecodeArgs),
    /// Code images at one rate and report BPP, PSNR and MS-SSIM.
    Eval(EvalArgs),
    /// Sweep the whole lambda range on a 1/M grid and write an RD curve.
    RdSweep(RdSweepArgs),
    /// Step alpha down from 1 in units of 1/M inside one interval.
    FineSweep(FineSweepArgs),
    /// Histograms of the quantized latents with a Laplace fit.
    Histogram(HistogramArgs),
    /// Mean gate scale per gated layer and lambda.
    GateStats(GateStatsArgs),
    /// Bjøntegaard deltas between two RD curve files.
    BdRate(BdRateArgs),
}

#[derive(Args)]
struct RateArgs {
    /// Interval index: the rate lies between lambda[j] and lambda[j + 1].
    #[arg(long)]
    j: usize,
    #[arg(long, requires = "alpha_den")]
    alpha_num: Option<u16>,
    #[arg(long, requires = "alpha_num")]
    alpha_den: Option<u16>,
    /// Real alpha, snapped to the nearest multiple of 1/M.
    #[arg(long, conflicts_with_all = ["alpha_num", "alpha_den"])]
    alpha: Option<f64>,
    /// Grid density for `--alpha`.
    #[arg(long = "M", default_value_t = 1000)]
    m: u16,
}

impl RateArgs {
    fn resolve(&self, model: &CompressionModel) -> CliResult<RateControl> {
        let alpha = match (self.alpha_num, self.alpha_den, self.alpha) {
            (Some(n), Some(d), _) => Alpha::new(n, d)?,
            (_, _, Some(a)) => Alpha::nearest(a, self.m)?,
            _ => Alpha::ONE,
        };
        Ok(RateControl::new(&model.config.lambda_table, self.j, alpha)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of PNG/PPM training images.
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Train on this many procedural 128x128 images instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Step log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Train a single-rate network at this lambda with the gates bypassed.
    #[arg(long)]
    single_rate: Option<f64>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    rate: RateArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// PNG, or binary PPM for `.ppm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Image files or directories.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[command(flatten)]
    rate: RateArgs,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct RdSweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long = "M", default_value_t = 5)]
    m: u16,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "model")]
    label: String,
    /// psnr_db, msssim or msssim_db.
    #[arg(long, default_value = "psnr_db")]
    quality: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct FineSweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    j: usize,
    #[arg(long = "M")]
    m: u16,
    /// Number of rows, starting at alpha = 1.
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[command(flatten)]
    rate: RateArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GateStatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BdRateArgs {
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Curve label inside the anchor file; the first curve by default.
    #[arg(long)]
    anchor_label: Option<String>,
    #[arg(long)]
    test_label: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")));
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit as u8)
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::RdSweep(a) => rd_sweep_cmd(a),
        Command::FineSweep(a) => fine_sweep(a),
        Command::Histogram(a) => histogram(a),
        Command::GateStats(a) => gate_stats(a),
        Command::BdRate(a) => bd(a),
    }
}

fn load_model(path: &Path) -> CliResult<(CompressionModel, ModelHash)> {
    checkpoint::load(path).map_err(|e| match e {
        ivr_core::Error::Io(io) => CliError::io(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var("IVR_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::usage(format!("IVR_SEED must be an integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let (model_cfg, mut tc) = parse_run_config(&text)?;
    if let Some(seed) = seed_override()? {
        tc.seed = seed;
    }
    let corpus = match (&a.corpus, a.synthetic) {
        (Some(dir), _) => Corpus::new(imageio::load_all(std::slice::from_ref(dir))?.1)?,
        (None, Some(n)) => Corpus::dead_leaves(n, 128, 128, tc.seed ^ 0x5eed),
        (None, None) => return Err(CliError::usage("one of --corpus or --synthetic is required")),
    };
    let mut model = build_model(&model_cfg, tc.seed)?;
    let mode = match a.single_rate {
        Some(l) => RateMode::Fixed(l),
        None => RateMode::Sampled,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let mut log = LogWriter::new(create(&log_path)?)?;
    let mut trainer = Trainer::new(&model, tc.clone(), mode)?;
    let report_every = (tc.total_steps / 20).max(1);
    let mut recent = Vec::new();
    trainer.run(&mut model, &corpus, |s, m| {
        log.write(s)?;
        recent.push(s.total);
        let done = s.step + 1;
        if done % report_every == 0 || done == tc.total_steps {
            eprintln!("step {done}/{}: median loss {:.5}", tc.total_steps, median(&recent));
            recent.clear();
            log.flush()?;
        }
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 {
            checkpoint::save(m, &a.out)?;
        }
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save(&model, &a.out)?;
    println!("trained {} steps; checkpoint {}; log {}", tc.total_steps, a.out.display(), log_path.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> CliResult<()> {
    let (model, hash) = load_model(&a.model)?;
    let x = imageio::load_image(&a.image)?;
    let rate = a.rate.resolve(&model)?;
    let enc = encode_image_with_hash(&model, hash, &x, &rate)?;
    let bytes = enc.bitstream.to_bytes();
    std::fs::write(&a.out, &bytes).map_err(|e| CliError::io(format!("{}: {e}", a.out.display())))?;
    let [_, _, h, w] = x.shape();
    println!(
        "bits {} pixels {} bpp {:.6} lambda {}",
        bytes.len() * 8,
        h * w,
        enc.bitstream.bpp(),
        interp_lambda(&rate)?
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> CliResult<()> {
    let (model, hash) = load_model(&a.model)?;
    let bytes = std::fs::read(&a.input).map_err(|e| CliError::io(format!("{}: {e}", a.input.display())))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let dec = decode_image_with_hash(&model, hash, &bs)?;
    imageio::save_image(dec.output(), &a.out)?;
    println!("decoded {}x{} bpp {:.6}", bs.header.width, bs.header.height, bs.bpp());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (model, _) = load_model(&a.model)?;
    let (files, images) = imageio::load_all(&a.images)?;
    let rate = a.rate.resolve(&model)?;
    let points = rd_sweep(&model, &images, std::slice::from_ref(&rate), a.threads)?;
    let p = &points[0];
    println!("image,bpp,psnr_db,msssim");
    for (f, r) in files.iter().zip(&p.images) {
        println!("{},{:.6},{:.4},{:.6}", f.display(), r.bpp, r.psnr, r.msssim);
    }
    println!("mean,{:.6},{:.4},{:.6}", p.bpp, p.psnr, p.msssim);
    Ok(())
}

fn rd_sweep_cmd(a: RdSweepArgs) -> CliResult<()> {
    let kind: QualityKind = a.quality.parse()?;
    let (model, _) = load_model(&a.model)?;
    let (_, images) = imageio::load_all(&a.images)?;
    let rates = grid_rates(&model.config.lambda_table, a.m)?;
    let points = rd_sweep(&model, &images, &rates, a.threads)?;
    let curve = to_curve(&a.label, &points, kind);
    write_curves(create(&a.out)?, std::slice::from_ref(&curve))?;
    println!("{} rate points written to {}", curve.points.len(), a.out.display());
    Ok(())
}

fn fine_sweep(a: FineSweepArgs) -> CliResult<()> {
    let (model, _) = load_model(&a.model)?;
    let (_, images) = imageio::load_all(&a.images)?;
    let rates = fine_rates(&model.config.lambda_table, a.j, a.m, a.steps)?;
    let points = rd_sweep(&model, &images, &rates, a.threads)?;
    let mut out = create(&a.out)?;
    writeln!(out, "alpha,lambda,bpp,psnr_db,msssim,msssim_db")?;
    for p in &points {
        writeln!(out, "{},{},{:.7},{:.5},{:.7},{:.5}", p.alpha.value(), p.lambda, p.bpp, p.psnr, p.msssim, p.msssim_db)?;
    }
    out.flush()?;
    println!("{} rows written to {}", points.len(), a.out.display());
    Ok(())
}

fn histogram(a: HistogramArgs) -> CliResult<()> {
    let (model, _) = load_model(&a.model)?;
    let (_, images) = imageio::load_all(&a.images)?;
    let rate = a.rate.resolve(&model)?;
    let (y, z) = latent_histograms(&model, &images, &rate)?;
    let mut out = create(&a.out)?;
    writeln!(out, "latent,value,count,empirical,fitted")?;
    let mut rows = |name: &str, h: &Histogram| -> CliResult<()> {
        for (v, c) in h.rows() {
            writeln!(out, "{name},{v},{c},{},{}", h.prob(v), h.fitted_prob(v))?;
        }
        Ok(())
    };
    rows("y", &y)?;
    rows("z", &z)?;
    out.flush()?;
    for (name, h) in [("y", &y), ("z", &z)] {
        println!("{name}: n {} mu {:.4} b {:.4} zero_fraction {:.4}", h.total, h.mu_hat, h.b_hat, h.zero_fraction);
    }
    Ok(())
}

fn gate_stats(a: GateStatsArgs) -> CliResult<()> {
    let (model, _) = load_model(&a.model)?;
    let stats = gate_statistics(&model)?;
    if stats.is_empty() {
        return Err(CliError::usage("the model has no gates"));
    }
    write_gate_statistics(create(&a.out)?, &stats)?;
    println!("{} rows written to {}", stats.len(), a.out.display());
    Ok(())
}

fn pick(path: &Path, label: Option<&str>) -> CliResult<RdCurve> {
    let file = File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let curves = read_curves(file)?;
    match label {
        Some(l) => curves
            .into_iter()
            .find(|c| c.label == l)
            .ok_or_else(|| CliError::usage(format!("no curve labelled `{l}` in {}", path.display()))),
        None => curves.into_iter().next().ok_or_else(|| CliError::usage(format!("{} holds no curves", path.display()))),
    }
}

/// Fixed-point text without a negative sign on zero.
fn fixed(v: f64, digits: usize) -> String {
    let s = format!("{v:.digits$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn bd(a: BdRateArgs) -> CliResult<()> {
    let anchor = pick(&a.anchor, a.anchor_label.as_deref())?;
    let test = pick(&a.test, a.test_label.as_deref())?;
    let rate = bd_rate(&anchor, &test)?;
    let quality = bd_quality(&anchor, &test)?;
    println!("BD-rate: {}%", fixed(rate, 2));
    match anchor.kind() {
        QualityKind::Psnr => println!("BD-PSNR: {} dB", fixed(quality, 4)),
        QualityKind::MsSsimDb => println!("BD-MS-SSIM: {} dB", fixed(quality, 4)),
        QualityKind::MsSsim => println!("BD-MS-SSIM: {}", fixed(quality, 6)),
    }
    Ok(())
}
