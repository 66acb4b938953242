//! `evtransfer` command line: corpus generation, training, evaluation and
//! diagnostics.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, unknown or
//! malformed settings), 2 when the command itself fails.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use evtransfer::analysis::{self, HEATMAP_FEATURE};
use evtransfer::datasets::{self, load_dataset, LoadedDataset, SynthConfig, MANIFEST_FILE};
use evtransfer::events::decode_event_file;
use evtransfer::snn::{EncodedInput, Network};
use evtransfer::transfer::{self, encode_static, Mode, TrainConfig, TrainingData, TransferError, CHECKPOINT_FILE};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Settings errors are the user's to fix; everything else is a failure of
/// the run.
fn transfer_err(e: TransferError) -> CliError {
    match e {
        TransferError::UnknownKey(_) | TransferError::InvalidConfig(_) => usage(e),
        other => runtime(other),
    }
}

#[derive(Debug, Parser)]
#[command(name = "evtransfer", version, about = "Static-to-event knowledge transfer for spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Probe {
    Event,
    Static,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic paired corpus.
    GenData(Common),
    /// Train one ablation arm.
    Train(Common),
    /// Accuracy of a checkpoint on the event test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint; defaults to `<out_dir>/model.mdl`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Layer-by-layer CKA between two checkpoints.
    AnalyzeCka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long, value_enum, default_value = "event")]
        probe: Probe,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Comma-separated LIF layer indices; all layers when omitted.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value = "cka")]
        run_id: String,
    },
    /// Membrane-potential histogram of one LIF layer.
    MpHist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, value_enum, default_value = "event")]
        probe: Probe,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value = "mp")]
        run_id: String,
    },
    /// Summarise an `.evt` file.
    InspectEvents { file: PathBuf },
}

/// Runs one command. `argv[0]` is the program name.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::Train(c) => train(&c),
        Command::Eval { common, model } => eval(&common, model),
        Command::AnalyzeCka {
            common,
            model_a,
            model_b,
            probe,
            samples,
            layers,
            run_id,
        } => analyze_cka(&common, &model_a, &model_b, probe, samples, layers.as_deref(), &run_id),
        Command::MpHist {
            common,
            model,
            layer,
            bins,
            probe,
            samples,
            run_id,
        } => mp_hist(&common, &model, layer, bins, probe, samples, &run_id),
        Command::InspectEvents { file } => inspect_events(&file),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn split_kv(kv: &str) -> Result<(&str, &str), CliError> {
    kv.split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))
}

/// Lines of a `key = value` file, without comments and blanks.
fn config_lines(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn train_config(c: &Common) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_text(&read_text(path)?).map_err(transfer_err)?;
    }
    for kv in &c.set {
        let (k, v) = split_kv(kv)?;
        cfg.set(k, v).map_err(transfer_err)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn gen_data(c: &Common) -> Result<(), CliError> {
    let mut cfg = SynthConfig::default();
    let mut pairs = match &c.config {
        Some(path) => config_lines(&read_text(path)?)?,
        None => Vec::new(),
    };
    for kv in &c.set {
        let (k, v) = split_kv(kv)?;
        pairs.push((k.to_string(), v.to_string()));
    }
    for (k, v) in pairs {
        cfg.set(&k, &v).map_err(usage)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    let root = c.out.as_ref().ok_or_else(|| usage("gen-data needs --out <dir>"))?;
    let m = datasets::generate_synthetic_pair_set(&cfg, root).map_err(runtime)?;
    write_file(&root.join("gen-data.config.txt"), cfg.to_text())?;
    println!(
        "wrote {} static, {} train and {} test event samples to {}",
        m.count(datasets::Domain::Static, datasets::Split::Train),
        m.count(datasets::Domain::Event, datasets::Split::Train),
        m.count(datasets::Domain::Event, datasets::Split::Test),
        root.display()
    );
    Ok(())
}

fn load(dir: &Path, timesteps: usize) -> Result<LoadedDataset, CliError> {
    load_dataset(&dir.join(MANIFEST_FILE), timesteps).map_err(runtime)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref().ok_or_else(|| usage(format!("{key} is not set")))
}

fn train(c: &Common) -> Result<(), CliError> {
    let cfg = train_config(c)?;
    cfg.validate().map_err(transfer_err)?;
    let out = require(&cfg.out_dir, "out_dir")?.clone();
    let event_dir = require(&cfg.event_dir, "event_dir")?;
    let events = load(event_dir, cfg.timesteps)?;
    let statics = match (cfg.mode, &cfg.static_dir) {
        (Mode::Baseline, _) => None,
        (_, Some(dir)) if dir == event_dir => Some(events.clone()),
        (_, Some(dir)) => Some(load(dir, cfg.timesteps)?),
        (_, None) => return Err(usage(format!("static_dir is not set (mode {})", cfg.mode))),
    };
    let data = TrainingData::from_loaded(statics.as_ref(), &events, cfg.timesteps).map_err(transfer_err)?;
    write_file(&out.join("train.config.txt"), cfg.to_text())?;
    let model = transfer::train(&cfg, &data, Some(&out), &mut |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  cls_s {:.4}  kt {:.4}  p {:.3}  test_acc {:.4}",
            r.epoch, r.train_loss_all, r.train_loss_cls_s, r.train_loss_kt, r.p_final_batch, r.test_acc
        );
    })
    .map_err(transfer_err)?;
    match model.log.last() {
        Some(r) => println!("{} seed {}: final test accuracy {:.4}", cfg.mode, cfg.seed, r.test_acc),
        None => println!("{} seed {}: no epochs run", cfg.mode, cfg.seed),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Network, CliError> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Network::load_checkpoint(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn eval(c: &Common, model: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = train_config(c)?;
    let model = match model {
        Some(m) => m,
        None => require(&cfg.out_dir, "out_dir")?.join(CHECKPOINT_FILE),
    };
    let net = load_model(&model)?;
    let events = load(require(&cfg.event_dir, "event_dir")?, cfg.timesteps)?;
    let data = TrainingData::from_loaded(None, &events, cfg.timesteps).map_err(transfer_err)?;
    let acc = transfer::evaluate(&net, &data.event_test).map_err(runtime)?;
    let line = format!(
        "accuracy {acc:.4} ({} of {})",
        (acc * data.event_test.len() as f64).round() as usize,
        data.event_test.len()
    );
    println!("{line}");
    if let Some(out) = &c.out {
        write_file(&out.join("eval.txt"), format!("model = {}\n{line}\n", model.display()))?;
        write_file(&out.join("eval.config.txt"), cfg.to_text())?;
    }
    Ok(())
}

/// The first `n` samples of the requested domain, in manifest order.
fn probe_inputs(cfg: &TrainConfig, probe: Probe, n: usize) -> Result<Vec<EncodedInput>, CliError> {
    if n == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    match probe {
        Probe::Event => {
            let d = load(require(&cfg.event_dir, "event_dir")?, cfg.timesteps)?;
            Ok(d.event_test
                .into_iter()
                .take(n)
                .map(|s| EncodedInput::from(s.input))
                .collect())
        }
        Probe::Static => {
            let d = load(require(&cfg.static_dir, "static_dir")?, cfg.timesteps)?;
            d.statics
                .iter()
                .take(n)
                .map(|s| encode_static(&s.input, cfg.timesteps).map_err(runtime))
                .collect()
        }
    }
}

fn out_dir(c: &Common, cfg: &TrainConfig) -> PathBuf {
    c.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn analyze_cka(
    c: &Common,
    model_a: &Path,
    model_b: &Path,
    probe: Probe,
    samples: usize,
    layers: Option<&str>,
    run_id: &str,
) -> Result<(), CliError> {
    let cfg = train_config(c)?;
    let a = load_model(model_a)?;
    let b = load_model(model_b)?;
    let taps: Vec<usize> = match layers {
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| usage(format!("bad layer index {t:?}"))))
            .collect::<Result<_, _>>()?,
        None => (0..a.lif_layers().len()).collect(),
    };
    let inputs = probe_inputs(&cfg, probe, samples)?;
    let h = analysis::cka_heatmap(&a, &b, &inputs, &taps).map_err(runtime)?;
    let out = out_dir(c, &cfg);
    analysis::export_csv(&analysis::heatmap_csv(&h), &out.join(format!("{run_id}_heatmap.csv"))).map_err(runtime)?;
    let snapshot = format!(
        "{}model_a = {}\nmodel_b = {}\nprobe = {probe:?}\nsamples = {}\nfeature = {HEATMAP_FEATURE}\n",
        cfg.to_text(),
        model_a.display(),
        model_b.display(),
        h.samples
    );
    write_file(&out.join(format!("{run_id}_heatmap.config.txt")), snapshot)?;
    println!("{} samples, mean diagonal CKA {:.6}", h.samples, h.mean_diagonal());
    for (r, name) in h.rows.iter().enumerate() {
        let cells: Vec<String> = (0..h.cols.len()).map(|col| format!("{:.4}", h.get(r, col))).collect();
        println!("{name:>12}  {}", cells.join("  "));
    }
    Ok(())
}

fn mp_hist(
    c: &Common,
    model: &Path,
    layer: usize,
    bins: usize,
    probe: Probe,
    samples: usize,
    run_id: &str,
) -> Result<(), CliError> {
    let cfg = train_config(c)?;
    let net = load_model(model)?;
    let inputs = probe_inputs(&cfg, probe, samples)?;
    let h = analysis::membrane_histogram(&net, &inputs, layer, bins).map_err(|e| match e {
        analysis::AnalysisError::TooFewBins(_) => usage(e),
        other => runtime(other),
    })?;
    let out = out_dir(c, &cfg);
    analysis::export_csv(&analysis::histogram_csv(&h), &out.join(format!("{run_id}_mp_hist.csv"))).map_err(runtime)?;
    let snapshot = format!(
        "{}model = {}\nlayer = {layer}\nbins = {bins}\nprobe = {probe:?}\nsamples = {}\n",
        cfg.to_text(),
        model.display(),
        inputs.len()
    );
    write_file(&out.join(format!("{run_id}_mp_hist.config.txt")), snapshot)?;
    println!(
        "{} potentials in {bins} bins over [{:.4}, {:.4}]",
        h.total(),
        h.edges[0],
        h.edges[bins]
    );
    Ok(())
}

fn inspect_events(file: &Path) -> Result<(), CliError> {
    let bytes = fs::read(file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    let s = decode_event_file(&bytes).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    let (off, on) = s.polarity_totals();
    println!("events: {}", s.len());
    println!("geometry: {}x{}", s.width(), s.height());
    println!("duration_us: {}", s.duration());
    println!("on: {on}");
    println!("off: {off}");
    Ok(())
}
