//! `spikeflow` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikeflow::events::{sliding_window, FlowMap, HistogramSequence};
use spikeflow::gradcheck;
use spikeflow::model::Model;
use spikeflow::storage;
use spikeflow::training::{evaluate, model_from_checkpoint, Sample, Trainer};
use spikeflow::{Error, TensorError};

use config::RunConfig;

/// Target trainable-parameter count of the default network.
const PARAMETER_TARGET: usize = 1_220_000;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_) | Error::InvalidArgument(_)) => 1,
            CliError::Numerical(_)
            | CliError::Core(Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NonFinite { .. })) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "spikeflow", version, about = "Spiking U-Net optical flow from event-camera data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [model], [train], [window] and [synth] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.stem_channels=8`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic constant-flow recordings (.evt + .flw pairs).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode one window of an event file into a histogram file and print its statistics.
    Encode {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Index of the sliding window to encode.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Train, printing one report line per epoch and writing checkpoints.
    Train {
        /// Directory of .evt/.flw pairs; the synthetic suite is used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation directory; defaults to a synthetic suite when training on one.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write `epoch-NNNN.ckp` every this many epochs (0: only `last.ckp`).
        #[arg(long, default_value_t = 1)]
        checkpoint_every: usize,
    },
    /// AEE/AAE of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of .evt/.flw pairs; the synthetic validation suite when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict flow for one window and write `<out>.flw` and `<out>.ppm`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Event (.evt) or histogram (.hst) file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
        /// Magnitude rendered at full lightness; 99th percentile when absent.
        #[arg(long)]
        max_magnitude: Option<f64>,
    },
    /// Finite-difference gradient check of every op and a toy network (soft mode, f64).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Probed coordinates per parameter tensor of the toy network.
        #[arg(long, default_value_t = 6)]
        samples: usize,
    },
    /// Render a flow file as a binary PPM image.
    Render {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_magnitude: Option<f64>,
    },
    /// Per-layer parameter table and total.
    Params,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut overrides = cli.common.overrides;
    match &cli.command {
        Command::Synth { windows, seed, .. } => {
            overrides.extend(windows.map(|w| format!("synth.windows={w}")));
            overrides.extend(seed.map(|s| format!("synth.seed={s}")));
        }
        Command::Train { epochs, seed, .. } => {
            overrides.extend(epochs.map(|e| format!("train.epochs={e}")));
            overrides.extend(seed.map(|s| format!("train.seed={s}")));
        }
        _ => {}
    }
    let config = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { out, .. } => synth(config, &out),
        Command::Encode { events, out, window } => encode(config, &events, out.as_deref(), window),
        Command::Train {
            data,
            val,
            out,
            resume,
            checkpoint_every,
            ..
        } => train(config, data.as_deref(), val.as_deref(), &out, resume.as_deref(), checkpoint_every),
        Command::Eval { checkpoint, data } => eval(config, &checkpoint, data.as_deref()),
        Command::Predict {
            checkpoint,
            input,
            window,
            out,
            max_magnitude,
        } => predict(config, &checkpoint, &input, window, &out, max_magnitude),
        Command::Gradcheck {
            seed,
            tolerance,
            samples,
        } => run_gradcheck(seed, tolerance, samples),
        Command::Render {
            flow,
            out,
            max_magnitude,
        } => render(&flow, &out, max_magnitude),
        Command::Params => params(config),
    }
}

fn echo(config: &RunConfig) {
    print!("{}", config.echo());
}

fn synth(config: RunConfig, out: &Path) -> CliResult {
    config.validate()?;
    echo(&config);
    fs::create_dir_all(out)?;
    let suite = &config.synth;
    let mut total = 0usize;
    for i in 0..suite.windows {
        let (events, flow) = suite.recording(i)?;
        let stem = out.join(format!("{}-{i:04}", suite.name));
        storage::write_events(&stem.with_extension("evt"), suite.dims, &events)?;
        storage::write_flow(&stem.with_extension("flw"), &flow)?;
        total += events.len();
    }
    println!("recordings={} events={total} dir={}", suite.windows, out.display());
    Ok(())
}

fn nth_window(config: &RunConfig, path: &Path, index: usize) -> CliResult<HistogramSequence> {
    let (dims, events) = storage::read_events(path)?;
    sliding_window(&events, dims, &config.window)?
        .nth(index)
        .ok_or_else(|| CliError::Core(Error::InvalidArgument(format!("{} has no window #{index}", path.display()))))
}

fn encode(config: RunConfig, events: &Path, out: Option<&Path>, window: usize) -> CliResult {
    echo(&config);
    let h = nth_window(&config, events, window)?;
    let [c, t, hh, w] = h.shape();
    println!("window={window} shape={c}x{t}x{hh}x{w} events={}", h.total());
    for (ch, n) in h.channel_totals().iter().enumerate() {
        println!("channel={ch} count={n}");
    }
    for (k, occ) in h.frame_occupancy().iter().enumerate() {
        println!("frame={k} occupancy={occ:.6}");
    }
    if let Some(out) = out {
        storage::write_histograms(out, &h)?;
    }
    Ok(())
}

/// Training and validation windows: from directories when given, otherwise
/// the synthetic suite and a held-out suite seeded one higher.
fn datasets(config: &RunConfig, data: Option<&Path>, val: Option<&Path>) -> CliResult<(Vec<Sample>, Vec<Sample>)> {
    let train = match data {
        Some(dir) => storage::load_samples(dir, &config.window)?,
        None => config.synth.samples()?,
    };
    let val = match (val, data) {
        (Some(dir), _) => storage::load_samples(dir, &config.window)?,
        (None, Some(_)) => Vec::new(),
        (None, None) => held_out(config).samples()?,
    };
    Ok((train, val))
}

fn held_out(config: &RunConfig) -> spikeflow::dataset::SyntheticSuite {
    let s = &config.synth;
    spikeflow::dataset::SyntheticSuite {
        windows: (s.windows / 5).max(1),
        seed: s.seed.wrapping_add(1),
        name: format!("{}-val", s.name),
        ..s.clone()
    }
}

fn train(
    mut config: RunConfig,
    data: Option<&Path>,
    val: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: usize,
) -> CliResult {
    let mut trainer = match resume {
        Some(path) => {
            // the checkpoint's own configuration governs everything but the epoch budget
            let mut ck = storage::read_checkpoint(path)?;
            ck.train_config.epochs = config.train.epochs;
            config.model = ck.model_config.clone();
            config.train = ck.train_config.clone();
            Trainer::<f32>::from_checkpoint(&ck)?
        }
        None => {
            config.validate()?;
            Trainer::new(Model::<f32>::build(config.model.clone(), config.train.seed)?, config.train.clone())?
        }
    };
    config.validate()?;
    echo(&config);
    for w in config.train.warnings() {
        eprintln!("warning: {w}");
    }
    let (train_set, val_set) = datasets(&config, data, val)?;
    if train_set.is_empty() {
        return Err(CliError::Core(Error::InvalidArgument("training set is empty".into())));
    }
    fs::create_dir_all(out)?;
    let stdout = std::io::stdout();
    while trainer.epoch() < config.train.epochs {
        let report = trainer.train_epoch(&train_set)?;
        let e = trainer.epoch();
        let mut line = report.to_string();
        let every = config.train.eval_every;
        if !val_set.is_empty() && every > 0 && e % every == 0 {
            let v = trainer.evaluate(&val_set)?;
            let aae = v.aae.map_or_else(|| "n/a".to_string(), |a| format!("{a:.6}"));
            line.push_str(&format!(" val_aee={:.6} val_aae={aae}", v.aee));
        }
        writeln!(stdout.lock(), "{line}")?;
        if checkpoint_every > 0 && e % checkpoint_every == 0 {
            storage::write_checkpoint(&out.join(format!("epoch-{e:04}.ckp")), &trainer.checkpoint())?;
        }
    }
    storage::write_checkpoint(&out.join("last.ckp"), &trainer.checkpoint())?;
    Ok(())
}

fn eval(mut config: RunConfig, checkpoint: &Path, data: Option<&Path>) -> CliResult {
    let ck = storage::read_checkpoint(checkpoint)?;
    config.model = ck.model_config.clone();
    config.validate()?;
    echo(&config);
    let model = model_from_checkpoint::<f32>(&ck)?;
    let samples = match data {
        Some(dir) => storage::load_samples(dir, &config.window)?,
        None => held_out(&config).samples()?,
    };
    print!("{}", evaluate(&model, &samples)?);
    Ok(())
}

fn predict(
    mut config: RunConfig,
    checkpoint: &Path,
    input: &Path,
    window: usize,
    out: &Path,
    max_magnitude: Option<f64>,
) -> CliResult {
    let ck = storage::read_checkpoint(checkpoint)?;
    config.model = ck.model_config.clone();
    config.validate()?;
    echo(&config);
    let model = model_from_checkpoint::<f32>(&ck)?;
    let bytes = fs::read(input)?;
    let hist = if bytes.starts_with(b"HST1") {
        storage::decode_histograms(&bytes)?
    } else {
        nth_window(&config, input, window)?
    };
    let pred = model.predict(&hist.to_tensor())?;
    if pred.data().iter().any(|x| !x.is_finite()) {
        return Err(CliError::Numerical("prediction is not finite".into()));
    }
    let flow = FlowMap::from_tensor(&pred, vec![true; hist.dims().pixels()])?;
    let flw = out.with_extension("flw");
    let ppm = out.with_extension("ppm");
    storage::write_flow(&flw, &flow)?;
    fs::write(&ppm, storage::render_flow_ppm(&flow, max_magnitude)?)?;
    let n = flow.u.len() as f64;
    let mean_u = flow.u.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let mean_v = flow.v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    println!(
        "flow={} image={} mean_u={mean_u:.6} mean_v={mean_v:.6}",
        flw.display(),
        ppm.display()
    );
    Ok(())
}

fn run_gradcheck(seed: u64, tolerance: f64, samples: usize) -> CliResult {
    let mut reports = gradcheck::op_suite(seed)?;
    reports.push(gradcheck::toy_network(seed, samples)?);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(tolerance);
        println!(
            "op={} max_rel_error={:.3e} checked={} status={}",
            r.name,
            r.max_rel_error,
            r.checked,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max_rel_error={worst:.3e} tolerance={tolerance:.1e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn render(flow: &Path, out: &Path, max_magnitude: Option<f64>) -> CliResult {
    let flow = storage::read_flow(flow)?;
    fs::write(out, storage::render_flow_ppm(&flow, max_magnitude)?)?;
    println!(
        "image={} max_magnitude={:.6}",
        out.display(),
        max_magnitude.unwrap_or_else(|| storage::auto_max_magnitude(&flow))
    );
    Ok(())
}

fn params(config: RunConfig) -> CliResult {
    config.model.validate()?;
    echo(&config);
    let model = Model::<f32>::build(config.model.clone(), 0)?;
    for (name, shape, count) in model.parameter_table() {
        let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
        println!("{name:<32} {:<20} {count:>10}", dims.join("x"));
    }
    let total = model.count_parameters();
    let deviation = 100.0 * (total as f64 / PARAMETER_TARGET as f64 - 1.0);
    println!("total={total} target={PARAMETER_TARGET} deviation={deviation:+.2}%");
    Ok(())
}
