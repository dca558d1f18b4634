//! `evrep` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evrep::eval_harness::{
    aggregate, builtin_class_list, compare_representations, load_external_frames, read_records, EvalDataset,
    RepSource,
};
use evrep::events_io::{load_events_as, parse_class_list, window_events, EventFormat};
use evrep::generator::load_checkpoint;
use evrep::llm_client::{
    build_backend, caption, parse_prediction, recognize, BackendConfig, BackendKind, CaptionRequest, LlmBackend,
    Prediction, RecordingBackend, CAPTION_PROMPT,
};
use evrep::representation::{encode_event_frame, encode_tencode, export_png, load_png};
use evrep::trainer::{load_pairs, SemanticStrategy, Trainer, TrainerError};
use evrep::{DatasetIndex, Generator, RepImage, RepKind};

use config::{parse_size, preset, split_pair, RunConfig};

#[derive(Parser)]
#[command(name = "evrep", version, about = "Event streams to LLM-readable images: convert, train, eval, caption, report")]
struct Cli {
    /// Base directory for every relative path, including those in config files.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Seed for anything random; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode event files as PNG images.
    Convert(ConvertArgs),
    /// Train the generator.
    Train(TrainArgs),
    /// Zero-shot recognition accuracy per representation.
    Eval(EvalArgs),
    /// Caption (or classify) one event file or image.
    Caption(CaptionArgs),
    /// Rebuild accuracy tables from saved eval records.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Auto,
    Bin,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConvertRepr {
    Tencode,
    #[value(name = "event_frame")]
    EventFrame,
}

#[derive(Args)]
struct ConvertArgs {
    /// Event files (.bin N-MNIST records or t,x,y,p CSV).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    format: Format,
    /// Representations to write, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "tencode")]
    repr: Vec<ConvertRepr>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Split each stream into consecutive windows of this many microseconds.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    window_us: Option<u64>,
    /// Sensor resolution, e.g. 34x34.
    #[arg(long, value_parser = parse_size)]
    sensor: Option<[u32; 2]>,
}

#[derive(Args, Default)]
struct BackendArgs {
    /// mock, replay or http.
    #[arg(long, value_parser = clap::value_parser!(BackendKind))]
    backend: Option<BackendKind>,
    /// Replay fixture (JSON lines).
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Append every request and reply to this fixture file.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset directory.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// tiny or standard.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_size)]
    sensor: Option<[u32; 2]>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Semantic loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fidelity loss weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// spsa or staged.
    #[arg(long, value_parser = clap::value_parser!(SemanticStrategy))]
    strategy: Option<SemanticStrategy>,
    #[arg(long)]
    spsa_pairs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<u64>,
    #[arg(long)]
    patience: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Representations to compare, comma separated: event_frame, tencode, evrep or an external name.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generator checkpoint for the evrep representation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation dataset as NAME=DIR; replaces the config list.
    #[arg(long = "dataset", value_parser = split_pair)]
    datasets: Vec<(String, String)>,
    /// Class list for --dataset entries: built-in name or file.
    #[arg(long)]
    classes: Option<String>,
    /// Pre-rendered frames as NAME=DIR holding <sample id>.png.
    #[arg(long = "external", value_parser = split_pair)]
    external: Vec<(String, String)>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct CaptionArgs {
    /// Event file or PNG image.
    input: PathBuf,
    /// How to render event input.
    #[arg(long, default_value = "tencode")]
    repr: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Classify instead of caption: built-in list name, file, or comma-separated labels.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, value_parser = parse_size)]
    sensor: Option<[u32; 2]>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// records.jsonl files written by `eval`.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Defaults to the directory of the first records file.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

struct Ctx {
    workdir: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn config(&self, p: Option<&PathBuf>) -> Outcome<RunConfig> {
        match p {
            Some(p) => RunConfig::load(&self.path(p)).map_err(usage),
            None => Ok(RunConfig::default()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let ctx = Ctx {
        workdir: cli.workdir,
        seed: cli.seed,
    };
    let result = match cli.command {
        Command::Convert(a) => convert(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Caption(a) => caption_cmd(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn size(s: Option<[u32; 2]>) -> Option<(u32, u32)> {
    s.map(|[w, h]| (w, h))
}

fn convert(ctx: &Ctx, a: ConvertArgs) -> Outcome {
    let out = ctx.path(&a.out);
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let mut reprs = a.repr.clone();
    reprs.dedup();
    for input in &a.inputs {
        let path = ctx.path(input);
        let format = match a.format {
            Format::Auto => EventFormat::from_path(&path),
            Format::Bin => EventFormat::Bin,
            Format::Csv => EventFormat::Csv,
        };
        let stream = load_events_as(&path, format, size(a.sensor)).map_err(runtime)?;
        if stream.is_empty() {
            log::warn!("{}: no events, writing background-only image", path.display());
        }
        let (t0, t1) = stream.full_window();
        let windows: Vec<(u64, u64)> = match a.window_us {
            None => vec![(t0, t1)],
            Some(w) => (t0..t1).step_by(w as usize).map(|s| (s, (s + w).min(t1))).collect(),
        };
        let stem = path.file_stem().map_or("events".into(), |s| s.to_string_lossy().into_owned());
        for (i, &(w0, w1)) in windows.iter().enumerate() {
            let part = window_events(&stream, w0, w1).map_err(runtime)?;
            for r in &reprs {
                let (image, name) = match r {
                    ConvertRepr::Tencode => (encode_tencode(&part, w0, w1).map_err(runtime)?.into_rep(), "tencode"),
                    ConvertRepr::EventFrame => (encode_event_frame(&part, w0, w1).map_err(runtime)?, "event_frame"),
                };
                let file = if a.window_us.is_some() {
                    out.join(format!("{stem}_{name}_{i:04}.png"))
                } else {
                    out.join(format!("{stem}_{name}.png"))
                };
                export_png(&image, &file).map_err(runtime)?;
                println!("{}", file.display());
            }
        }
    }
    Ok(())
}

fn backend_config(ctx: &Ctx, base: &BackendConfig, a: &BackendArgs) -> Outcome<BackendConfig> {
    let mut c = base.clone();
    if let Some(k) = a.backend {
        c.kind = k;
    }
    if let Some(f) = &a.fixture {
        c.fixture = Some(f.clone());
    }
    c.fixture = c.fixture.map(|f| ctx.path(&f));
    if let Some(e) = &a.endpoint {
        c.endpoint = Some(e.clone());
    }
    if let Some(m) = &a.model {
        c.model = Some(m.clone());
    }
    if let Some(k) = &a.api_key_env {
        c.api_key_env = k.clone();
    }
    if let Some(n) = a.concurrency {
        c.concurrency = n;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

fn open_backend(ctx: &Ctx, base: &BackendConfig, a: &BackendArgs) -> Outcome<Box<dyn LlmBackend>> {
    let c = backend_config(ctx, base, a)?;
    let backend = build_backend(&c).map_err(runtime)?;
    Ok(match &a.record {
        Some(p) => Box::new(RecordingBackend::new(backend, ctx.path(p))),
        None => backend,
    })
}

fn train(ctx: &Ctx, a: TrainArgs) -> Outcome {
    let file = ctx.config(a.config.as_ref())?;
    let mut cfg = file.train.clone();
    if let Some(s) = ctx.seed.or(file.seed) {
        cfg.seed = s;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.lambda {
        cfg.weights.lambda_semantic = v;
    }
    if let Some(v) = a.gamma {
        cfg.weights.gamma_fidelity = v;
    }
    if let Some(v) = a.strategy {
        cfg.semantic_strategy = v;
    }
    if let Some(v) = a.spsa_pairs {
        cfg.spsa_pairs_per_batch = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if a.patience.is_some() {
        cfg.patience = a.patience;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(v) = a.checkpoint_interval {
        cfg.checkpoint_interval = v;
    }
    cfg.validate().map_err(usage)?;
    let gen_config = match &a.preset {
        Some(p) => preset(p),
        None => file.generator_config(),
    }
    .map_err(usage)?;
    let sensor = size(a.sensor.or(file.data.sensor));
    let train_dir = a
        .train
        .or(file.data.train.clone())
        .ok_or_else(|| usage("no training data: pass --train or set data.train"))?;
    let out = ctx.path(&a.out.or(file.out.clone()).unwrap_or_else(|| "runs/train".into()));

    let train_pairs = load_pairs(&DatasetIndex::open(&ctx.path(&train_dir)).map_err(runtime)?, sensor).map_err(runtime)?;
    let val_pairs = match a.val.or(file.data.val.clone()) {
        Some(v) => load_pairs(&DatasetIndex::open(&ctx.path(&v)).map_err(runtime)?, sensor).map_err(runtime)?,
        None => Vec::new(),
    };
    let backend = open_backend(ctx, &file.backend, &a.backend)?;
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;

    let trainer = match &a.resume {
        Some(p) => Trainer::resume_from(&ctx.path(p), &*backend, cfg.clone()),
        None => {
            let g = Generator::build(gen_config, cfg.seed).map_err(usage)?;
            Trainer::new(g, &*backend, cfg.clone())
        }
    };
    let mut trainer = trainer.map_err(runtime)?.with_output_dir(&out);
    eprintln!(
        "training on {} pairs ({} validation), {} parameters",
        train_pairs.len(),
        val_pairs.len(),
        trainer.generator().parameter_count()
    );
    match trainer.fit(&train_pairs, &val_pairs) {
        Ok(outcome) => {
            if let Some(last) = outcome.metrics.last() {
                eprintln!(
                    "step {}: semantic {:.4} fidelity {:.6} dual {:.6}",
                    last.step, last.loss.semantic, last.loss.fidelity, last.loss.dual
                );
            }
            if let Some(p) = &outcome.final_checkpoint {
                println!("checkpoint: {}", p.display());
            }
            if let Some(best) = outcome.best.as_ref().and_then(|b| b.path.as_ref()) {
                println!("best: {}", best.display());
            }
            println!("metrics: {}", out.join("metrics.csv").display());
            Ok(())
        }
        Err(e @ TrainerError::BackendFailure { .. }) => {
            if let TrainerError::BackendFailure { checkpoint: Some(p), .. } = &e {
                println!("checkpoint: {}", p.display());
            }
            Err(runtime(e))
        }
        Err(e) => Err(runtime(e)),
    }
}

fn class_spec(ctx: &Ctx, spec: &str) -> Outcome<Vec<String>> {
    if let Some(list) = builtin_class_list(spec) {
        return Ok(list);
    }
    let path = ctx.path(Path::new(spec));
    if path.is_file() {
        let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        return Ok(parse_class_list(&text));
    }
    let inline: Vec<String> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    if inline.len() < 2 {
        return Err(usage(format!("class list {spec:?} is neither a built-in list, a file nor a comma-separated list")));
    }
    Ok(inline)
}

fn load_generator(ctx: &Ctx, path: &Path) -> Outcome<Generator> {
    Ok(load_checkpoint(&ctx.path(path)).map_err(runtime)?.generator)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Outcome {
    let file = ctx.config(a.config.as_ref())?;
    let entries: Vec<config::DatasetEntry> = if a.datasets.is_empty() {
        file.eval.datasets.clone()
    } else {
        a.datasets
            .iter()
            .map(|(name, path)| config::DatasetEntry {
                name: name.clone(),
                path: path.into(),
                classes: a.classes.clone(),
                sensor: None,
            })
            .collect()
    };
    if entries.is_empty() {
        return Err(usage("no datasets: pass --dataset NAME=DIR or set eval.datasets"));
    }
    let checkpoint = a.checkpoint.or(file.eval.checkpoint.clone());
    let mut external: Vec<(String, PathBuf)> = file.eval.external.iter().map(|e| (e.name.clone(), e.dir.clone())).collect();
    external.extend(a.external.iter().map(|(n, d)| (n.clone(), PathBuf::from(d))));
    let kinds = if !a.kinds.is_empty() {
        a.kinds.clone()
    } else if !file.eval.kinds.is_empty() {
        file.eval.kinds.clone()
    } else {
        let mut k = vec!["event_frame".to_string(), "tencode".to_string()];
        if checkpoint.is_some() {
            k.push("evrep".into());
        }
        k.extend(external.iter().map(|(n, _)| n.clone()));
        k
    };
    let backend = open_backend(ctx, &file.backend, &a.backend)?;

    let mut datasets = Vec::new();
    for e in &entries {
        let mut index = DatasetIndex::open(&ctx.path(&e.path)).map_err(runtime)?;
        if let Some(spec) = &e.classes {
            index = DatasetIndex::new(index.samples().to_vec(), class_spec(ctx, spec)?).map_err(runtime)?;
        }
        datasets.push(EvalDataset {
            name: e.name.clone(),
            index,
            sensor: size(e.sensor),
        });
    }
    let mut sources = Vec::new();
    for k in &kinds {
        let source = match k.as_str() {
            "event_frame" => RepSource::new(RepKind::EventFrame),
            "tencode" => RepSource::new(RepKind::Tencode),
            "evrep" => match &checkpoint {
                Some(p) => RepSource::evrep(load_generator(ctx, p)?),
                None => RepSource::new(RepKind::Evrep),
            },
            name => {
                let (_, dir) = external.iter().find(|(n, _)| n == name).ok_or_else(|| {
                    usage(format!(
                        "unknown representation {name:?} (expected event_frame, tencode, evrep or an --external name)"
                    ))
                })?;
                let mut frames = std::collections::HashMap::new();
                for d in &datasets {
                    let sz = d.sensor.or_else(|| first_sensor(d));
                    frames.extend(load_external_frames(&ctx.path(dir), &d.index, sz).map_err(runtime)?.frames);
                }
                RepSource::external(name, frames)
            }
        };
        sources.push(source);
    }
    let out = ctx.path(&a.out.or(file.eval.out.clone()).unwrap_or_else(|| "runs/eval".into()));
    let seed = ctx.seed.or(file.seed);
    let cmp = compare_representations(&datasets, &sources, &[&*backend], &out, seed).map_err(|e| {
        runtime(format!("{e} (records so far in {})", out.join("records.jsonl").display()))
    })?;
    print!("{}", cmp.report.summary_table());
    eprintln!("report: {}", cmp.csv_path.display());
    eprintln!("report: {}", cmp.json_path.display());
    eprintln!("records: {}", cmp.records_path.display());
    Ok(())
}

/// Resolution of the first sample, so external frames match the native representations.
fn first_sensor(d: &EvalDataset) -> Option<(u32, u32)> {
    let s = d.index.samples().first()?;
    let stream = evrep::events_io::load_events(&s.events_path, None).ok()?;
    Some((stream.width(), stream.height()))
}

fn caption_cmd(ctx: &Ctx, a: CaptionArgs) -> Outcome {
    let file = ctx.config(a.config.as_ref())?;
    let backend = open_backend(ctx, &file.backend, &a.backend)?;
    let path = ctx.path(&a.input);
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let image: RepImage = if is_png {
        load_png(&path, RepKind::ExternalFrame, size(a.sensor)).map_err(runtime)?
    } else {
        let kind: RepKind = a.repr.parse().map_err(usage)?;
        let stream = load_events_as(&path, EventFormat::from_path(&path), size(a.sensor)).map_err(runtime)?;
        let (t0, t1) = stream.full_window();
        let tencode = encode_tencode(&stream, t0, t1).map_err(runtime)?.into_rep();
        match kind {
            RepKind::Tencode => tencode,
            RepKind::EventFrame => encode_event_frame(&stream, t0, t1).map_err(runtime)?,
            RepKind::Evrep => {
                let ckpt = a
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| usage("--repr evrep needs --checkpoint"))?;
                let g = load_generator(ctx, ckpt)?;
                RepImage::new(g.generate(&tencode.pixels).map_err(runtime)?, RepKind::Evrep)
            }
            RepKind::ExternalFrame => return Err(usage("--repr external_frame applies to PNG input only")),
        }
    };
    match &a.classes {
        Some(spec) => {
            let classes = class_spec(ctx, spec)?;
            let resp = recognize(&*backend, &image, &classes).map_err(runtime)?;
            println!("{}", resp.text.trim());
            match parse_prediction(&resp.text, &classes) {
                Prediction::Label(l) => println!("prediction: {l}"),
                Prediction::Unknown => println!("prediction: unknown"),
            }
        }
        None => {
            let prompt = a.prompt.clone().unwrap_or_else(|| CAPTION_PROMPT.to_string());
            let resp = caption(&*backend, &CaptionRequest::new(image, prompt)).map_err(runtime)?;
            println!("{}", resp.text.trim());
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, a: ReportArgs) -> Outcome {
    let mut records = Vec::new();
    for p in &a.records {
        records.extend(read_records(&ctx.path(p)).map_err(runtime)?);
    }
    let mut report = aggregate(&records).map_err(runtime)?;
    report.metadata.seed = ctx.seed;
    let out = match &a.out {
        Some(o) => ctx.path(o),
        None => ctx
            .path(&a.records[0])
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let csv = out.join("report.csv");
    let json = out.join("report.json");
    fs::write(&csv, report.to_csv()).map_err(|e| runtime(format!("{}: {e}", csv.display())))?;
    let body = serde_json::to_string_pretty(&report).map_err(runtime)?;
    fs::write(&json, body).map_err(|e| runtime(format!("{}: {e}", json.display())))?;
    print!("{}", report.summary_table());
    eprintln!("report: {}", csv.display());
    Ok(())
}
