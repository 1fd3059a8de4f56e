use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fpcil_core::genbridge::{
    emit_manifest, ingest_embedding_file, metadata_path_for, prompt_specs, read_lexicon, render_manifest,
    GenerationDefaults, PromptTemplate,
};
use fpcil_core::predictor::{
    overlap, predict_future, CompletionService, FixtureReplayer, RemoteClient, RestrictionThresholds,
};
use fpcil_core::protocol::{build_schedule, normalize_name, ClassCatalog, RunReport};
use fpcil_core::runner::{
    read_run_report, render_steps_csv, run_fpcil_scenario, run_matrix, scenario_schedule, write_run_report,
    ExperimentMatrix, ScenarioConfig,
};
use fpcil_core::{Error, Origin, Result, Split};

#[derive(Parser)]
#[command(name = "fpcil", version, about = "Future-class pretraining harness for exemplar-free class-incremental learning")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario for each of its evaluation seeds.
    Simulate(SimulateArgs),
    /// Run an experiment matrix.
    Matrix(MatrixArgs),
    /// Print the class schedule of a scenario.
    Schedule(ScheduleArgs),
    /// Predict future class names from completion transcripts.
    PredictFuture(PredictArgs),
    /// Emit an image-generation manifest from a lexicon.
    Manifest(ManifestArgs),
    /// Validate and summarize an embedding container.
    Ingest(IngestArgs),
    /// Re-render a stored run report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario TOML file; the reference simulation when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set world.dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Evaluation seed (repeatable); replaces `eval_seeds`.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    head: Option<HeadArg>,
    /// `none`, `oracle` or `partial:K`.
    #[arg(long)]
    aux: Option<String>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    composition: Option<CompositionArg>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Print the config that would run and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Ncm,
    Fetril,
    Fecam,
}

#[derive(Clone, Copy, ValueEnum)]
enum CompositionArg {
    #[value(name = "real+synthetic")]
    RealPlusSynthetic,
    #[value(name = "synthetic-only-future")]
    SyntheticOnlyFuture,
    #[value(name = "all-synthetic")]
    AllSynthetic,
}

#[derive(Args)]
struct MatrixArgs {
    /// Matrix TOML file.
    config: PathBuf,
    /// Override base-scenario fields.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Evaluation seed the schedule is derived for; the first of
    /// `eval_seeds` by default.
    #[arg(long)]
    seed: Option<u64>,
    /// Lexicon TSV used to print class names; its order seed is applied
    /// directly.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory of transcript files to replay.
    #[arg(long, conflicts_with = "remote", required_unless_present = "remote")]
    fixture: Option<PathBuf>,
    /// Query the completion endpoint named by FPCIL_COMPLETION_ENDPOINT.
    #[arg(long)]
    remote: bool,
    /// File with one initial class name per line.
    #[arg(long, conflicts_with = "lexicon")]
    initial: Option<PathBuf>,
    /// Lexicon TSV; with --base/--inc/--order-seed the first step becomes the
    /// prompt and the remaining classes the ground truth.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    base: usize,
    #[arg(long, default_value_t = 10)]
    inc: usize,
    #[arg(long, default_value_t = 1993)]
    order_seed: u64,
    /// File with one true future class name per line.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    repeats: u32,
    /// Keep only predicted names that appear in the lexicon.
    #[arg(long, requires = "lexicon")]
    filter_vocabulary: bool,
    /// Minimum counts for full, R1 and R2.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 7])]
    thresholds: Vec<u32>,
    /// Where remote transcripts are logged.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ManifestArgs {
    lexicon: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Keep only these class names (comma separated).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long, default_value = "cifar")]
    preset: Preset,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    photo_of: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Cifar,
    Imagenet,
}

#[derive(Args)]
struct IngestArgs {
    data: PathBuf,
    /// Metadata sidecar; `<data>.meta.jsonl` by default.
    #[arg(long)]
    metadata: Option<PathBuf>,
    #[arg(long)]
    expect_dim: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory or its report.json.
    path: PathBuf,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Matrix(a) => matrix(a),
        Command::Schedule(a) => schedule(a),
        Command::PredictFuture(a) => predict(a),
        Command::Manifest(a) => manifest(a),
        Command::Ingest(a) => ingest(a),
        Command::Report(a) => report(a),
    }
}

fn aux_literal(raw: &str) -> Result<String> {
    match raw {
        "none" | "oracle" => Ok(format!("{{ kind = \"{raw}\" }}")),
        _ => {
            let k = raw
                .strip_prefix("partial:")
                .and_then(|k| k.parse::<u32>().ok())
                .ok_or_else(|| Error::Config(format!("--aux expects none, oracle or partial:K, got {raw:?}")))?;
            Ok(format!("{{ kind = \"partial\", k = {k} }}"))
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut overrides = Vec::new();
    if !a.seeds.is_empty() {
        let list: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("eval_seeds=[{}]", list.join(",")));
    }
    if let Some(h) = a.head {
        let name = h.to_possible_value().unwrap().get_name().to_string();
        overrides.push(format!("head.kind=\"{name}\""));
    }
    if let Some(aux) = &a.aux {
        overrides.push(format!("auxiliary.mode={}", aux_literal(aux)?));
    }
    if let Some(n) = a.n_per_class {
        overrides.push(format!("auxiliary.n_per_class={n}"));
    }
    if let Some(c) = a.composition {
        let name = c.to_possible_value().unwrap().get_name().to_string();
        overrides.push(format!("initial_composition=\"{name}\""));
    }
    overrides.extend(a.config.overrides);
    let mut cfg = ScenarioConfig::load_with_overrides(a.config.config.as_deref(), &overrides)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    if a.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    for &seed in &cfg.eval_seeds {
        let outcome = run_fpcil_scenario(&cfg, seed)?;
        let dir = write_run_report(&cfg.output_dir, &outcome.report)?;
        println!(
            "{} seed {seed}: AIA {:.2}%, last {:.2}% -> {}",
            cfg.name,
            100.0 * outcome.report.average_incremental_accuracy,
            100.0 * outcome.report.last_accuracy,
            dir.display()
        );
    }
    Ok(())
}

fn matrix(a: MatrixArgs) -> Result<()> {
    let mut m = ExperimentMatrix::load(&a.config, &a.overrides)?;
    let out = a.output_dir.unwrap_or_else(|| m.scenarios[0].output_dir.join(&m.name));
    for s in &mut m.scenarios {
        s.output_dir = out.clone();
    }
    let result = run_matrix(&m)?;
    result.write(&out)?;
    print!("{}", result.render_table());
    println!("results in {}", out.display());
    Ok(())
}

fn schedule(a: ScheduleArgs) -> Result<()> {
    let cfg = ScenarioConfig::load_with_overrides(a.config.config.as_deref(), &a.config.overrides)?;
    let (schedule, catalog) = match &a.lexicon {
        Some(path) => {
            let catalog = read_lexicon(path)?;
            let s = build_schedule(&catalog, cfg.schedule.base_size, cfg.schedule.inc_size, cfg.schedule.order_seed)?;
            (s, catalog)
        }
        None => {
            let seed = a.seed.or_else(|| cfg.eval_seeds.first().copied()).unwrap_or(0);
            (scenario_schedule(&cfg, seed)?, ClassCatalog::synthetic(cfg.world.num_classes))
        }
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&schedule).expect("schedule serializes"));
        return Ok(());
    }
    println!("{} ({} steps)", schedule.name(), schedule.num_steps());
    for (i, step) in schedule.steps.iter().enumerate() {
        let names: Vec<&str> = step
            .iter()
            .map(|c| catalog.get(*c).map_or("?", |e| e.name.as_str()))
            .collect();
        println!("step {:>2}: {}", i + 1, names.join(", "));
    }
    Ok(())
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn predict(a: PredictArgs) -> Result<()> {
    let [full, r1, r2] = a.thresholds[..] else {
        return Err(Error::Config("--thresholds needs three values".into()));
    };
    let thresholds = RestrictionThresholds { full, r1, r2 };
    let (initial, mut truth, vocabulary) = match (&a.initial, &a.lexicon) {
        (Some(path), _) => (read_names(path)?, None, None),
        (None, Some(path)) => {
            let catalog = read_lexicon(path)?;
            let s = build_schedule(&catalog, a.base, a.inc, a.order_seed)?;
            let name = |c: &u32| catalog.get(*c).expect("scheduled class").name.clone();
            let initial: Vec<String> = s.initial().iter().map(name).collect();
            let future: BTreeSet<String> = s.future().iter().map(|c| normalize_name(&name(c))).collect();
            let vocabulary: Option<HashSet<String>> = a
                .filter_vocabulary
                .then(|| catalog.entries().iter().map(|e| normalize_name(&e.name)).collect());
            (initial, Some(future), vocabulary)
        }
        (None, None) => return Err(Error::Config("give --initial or --lexicon".into())),
    };
    if let Some(path) = &a.truth {
        truth = Some(read_names(path)?.iter().map(|n| normalize_name(n)).collect());
    }
    let service: Box<dyn CompletionService> = match &a.fixture {
        Some(dir) => Box::new(FixtureReplayer::new(dir)),
        None => {
            let mut client = RemoteClient::from_env()?;
            if let Some(dir) = &a.run_dir {
                client = client.with_log_dir(dir);
            }
            Box::new(client)
        }
    };
    let prediction = predict_future(service.as_ref(), &initial, a.repeats, &thresholds, vocabulary.as_ref())?;
    if a.json {
        let mut value = serde_json::to_value(&prediction).expect("prediction serializes");
        value["tally"]
            .as_object_mut()
            .map(|t| t.remove("source_transcripts"));
        println!("{}", serde_json::to_string_pretty(&value).unwrap());
        return Ok(());
    }
    println!("prompt: {}", prediction.prompt);
    for (level, names) in &prediction.selections {
        match &truth {
            Some(t) => {
                let (hits, ratio) = overlap(names, t);
                println!(
                    "{:13} {:>4} names, {:>3} of {} true future classes ({:.1}%)",
                    level.label(),
                    names.len(),
                    hits,
                    t.len(),
                    100.0 * ratio
                );
            }
            None => println!("{:13} {:>4} names", level.label(), names.len()),
        }
    }
    for (name, count) in prediction.tally.ranked().iter().take(20) {
        println!("  {count:>2}  {name}");
    }
    Ok(())
}

fn manifest(a: ManifestArgs) -> Result<()> {
    let catalog = read_lexicon(&a.lexicon)?;
    let mut defaults = match a.preset {
        Preset::Cifar => GenerationDefaults::cifar(),
        Preset::Imagenet => GenerationDefaults::imagenet(),
    };
    defaults.seed = a.seed;
    if let Some(n) = a.n_samples {
        defaults.n_samples = n;
    }
    if let Some(g) = a.guidance_scale {
        defaults.guidance_scale = g;
    }
    if a.photo_of {
        defaults.template = PromptTemplate::PhotoOf;
    }
    let wanted: HashSet<String> = a.classes.iter().map(|c| normalize_name(c)).collect();
    let entries: Vec<_> = catalog
        .entries()
        .iter()
        .filter(|e| wanted.is_empty() || wanted.contains(&normalize_name(&e.name)))
        .cloned()
        .collect();
    if entries.len() < wanted.len() {
        return Err(Error::Config(format!(
            "{} of the requested classes are not in the lexicon",
            wanted.len() - entries.len()
        )));
    }
    let specs = prompt_specs(&entries, &defaults)?;
    match a.output {
        Some(path) => {
            emit_manifest(&specs, &path)?;
            eprintln!("wrote {} records to {}", specs.len(), path.display());
        }
        None => print!("{}", render_manifest(&specs)?),
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let meta = a.metadata.unwrap_or_else(|| metadata_path_for(&a.data));
    let samples = ingest_embedding_file(&a.data, &meta)?;
    let dim = samples.first().map_or(0, |s| s.dim());
    if let Some(expected) = a.expect_dim {
        if dim != expected {
            return Err(Error::Shape { expected, actual: dim });
        }
    }
    let classes: BTreeSet<u32> = samples.iter().map(|s| s.class_id).collect();
    let count = |o: Origin| samples.iter().filter(|s| s.origin == o).count();
    let split = |p: Split| samples.iter().filter(|s| s.split == p).count();
    if a.json {
        let v = serde_json::json!({
            "samples": samples.len(),
            "dim": dim,
            "classes": classes,
            "real": count(Origin::Real),
            "synthetic": count(Origin::Synthetic),
            "train": split(Split::Train),
            "test": split(Split::Test),
        });
        println!("{}", serde_json::to_string_pretty(&v).unwrap());
    } else {
        println!(
            "{}: {} samples, dim {}, {} classes, {} real / {} synthetic, {} train / {} test",
            a.data.display(),
            samples.len(),
            dim,
            classes.len(),
            count(Origin::Real),
            count(Origin::Synthetic),
            split(Split::Train),
            split(Split::Test)
        );
    }
    Ok(())
}

fn render_table(r: &RunReport) -> String {
    let mut out = format!(
        "{} | {} | {} | seed {} | config {}\n",
        r.scenario,
        r.protocol,
        r.head,
        r.seed,
        &r.config_digest[..r.config_digest.len().min(12)]
    );
    let steps: Vec<String> = r.per_step.iter().map(|s| format!("{:.2}", 100.0 * s.top1)).collect();
    out += &format!("steps: {}\n", steps.join("  "));
    out += &format!(
        "AVG {:.2}  Last {:.2}\n",
        100.0 * r.average_incremental_accuracy,
        100.0 * r.last_accuracy
    );
    out
}

fn report(a: ReportArgs) -> Result<()> {
    let r = read_run_report(&a.path)?;
    match a.format {
        ReportFormat::Table => print!("{}", render_table(&r)),
        ReportFormat::Csv => print!("{}", render_steps_csv(&r)),
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&r).unwrap()),
    }
    Ok(())
}
