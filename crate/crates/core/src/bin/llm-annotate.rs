use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use llm_annotate::corpus::{self, Format};
use llm_annotate::inference::{InferenceClient, DEFAULT_API_KEY_ENV};
use llm_annotate::metrics::UnparsedPolicy;
use llm_annotate::mock::MockScript;
use llm_annotate::model::{GenerationConfig, LabelSchema, ModelProfile, Strategy};
use llm_annotate::runner::{
    self, cell_stem, GridSpec, PromptSet, RunOptions, RunnerError, StatusCounts,
};
use llm_annotate::template::TemplateRegistry;

const EXIT_USAGE: u8 = 1;

#[derive(Parser)]
#[command(name = "llm-annotate", version, about = "Annotate text corpora with chat LLMs and score them against gold labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print its label distribution.
    Ingest(IngestArgs),
    /// Run one prompt with one model over a corpus.
    Annotate(AnnotateArgs),
    /// Run a full prompt × model grid from a spec file.
    Grid(GridArgs),
    /// Score a record file against gold labels.
    Evaluate(EvaluateArgs),
    /// Rebuild summaries and the best-per-prompt table from a grid's records.
    Report(ReportArgs),
}

#[derive(Args)]
struct SchemaArgs {
    /// Prompt-set file whose label schema to use.
    #[arg(long, conflicts_with = "labels")]
    prompt_set: Option<PathBuf>,
    /// Comma-separated labels, in schema order.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
}

impl SchemaArgs {
    fn schema(&self) -> Result<LabelSchema, CliError> {
        match &self.prompt_set {
            Some(path) => Ok(PromptSet::load(path)?.schema),
            None if !self.labels.is_empty() => {
                LabelSchema::from_labels(&self.labels).map_err(|e| CliError::Usage(e.to_string()))
            }
            None => Err(CliError::Usage("pass --prompt-set or --labels".into())),
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    corpus: PathBuf,
    /// csv or jsonl; inferred from the extension by default.
    #[arg(long)]
    format: Option<Format>,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Args)]
struct ClientArgs {
    /// Maximum concurrent backend requests.
    #[arg(long)]
    max_inflight: Option<usize>,
    /// Reuse the base seed on every self-consistency path.
    #[arg(long)]
    identical_seeds: bool,
    /// Re-query up to N times with a one-word nudge when a reply is unparseable.
    #[arg(long, value_name = "N")]
    reparse_retry: Option<u32>,
    #[arg(long)]
    unparsed_policy: Option<UnparsedPolicy>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    prompt_set: PathBuf,
    /// Prompt name within the prompt set.
    #[arg(long)]
    prompt: String,
    /// Model name sent to the backend.
    #[arg(long)]
    model: String,
    /// Completion URL, or `mock:<id>` for a scripted backend.
    #[arg(long)]
    endpoint: String,
    #[arg(long, default_value = "structured_api")]
    template: String,
    /// Extra chat template definitions (JSON).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Scripted backend, `id=path.json`; repeatable.
    #[arg(long, value_name = "ID=PATH")]
    mock_script: Vec<String>,
    #[arg(long, default_value_t = 0.2)]
    temperature: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of self-consistency paths.
    #[arg(long)]
    paths: Option<u32>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct GridArgs {
    spec: PathBuf,
    /// Overrides the spec's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the spec's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides every model's temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, default_value = "as_wrong")]
    unparsed_policy: UnparsedPolicy,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    spec: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runner(#[from] RunnerError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runner(e) => e.exit_code() as u8,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

async fn run(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Ingest(args) => ingest(args),
        Command::Annotate(args) => annotate(args).await,
        Command::Grid(args) => grid(args).await,
        Command::Evaluate(args) => evaluate(args),
        Command::Report(args) => report(args),
    }
}

fn format_for(path: &Path, format: Option<Format>) -> Result<Format, CliError> {
    match format {
        Some(f) => Ok(f),
        None => Ok(Format::from_path(path).map_err(RunnerError::from)?),
    }
}

fn ingest(args: IngestArgs) -> Result<u8, CliError> {
    let schema = args.schema.schema()?;
    let format = format_for(&args.corpus, args.format)?;
    let items = corpus::ingest(&args.corpus, format, &schema).map_err(RunnerError::from)?;
    if items.iter().all(|i| i.gold().is_some()) {
        let dist = corpus::label_distribution(&items, &schema).map_err(RunnerError::from)?;
        println!("{dist}");
    } else {
        let labeled = items.iter().filter(|i| i.gold().is_some()).count();
        println!("{} items, {labeled} with gold labels", items.len());
    }
    Ok(0)
}

fn apply_client_args(opts: &mut RunOptions, args: &ClientArgs) -> Result<(), CliError> {
    if let Some(n) = args.max_inflight {
        if n == 0 {
            return Err(usage("--max-inflight must be at least 1"));
        }
        opts.max_inflight = n;
    }
    opts.identical_seeds |= args.identical_seeds;
    if let Some(n) = args.reparse_retry {
        opts.reparse_retry = n;
    }
    Ok(())
}

async fn annotate(args: AnnotateArgs) -> Result<u8, CliError> {
    // Checked before anything touches the network.
    let generation = GenerationConfig::new(args.temperature, args.seed).map_err(usage)?;
    let endpoint = args.endpoint.parse().map_err(usage)?;

    let set = PromptSet::load(&args.prompt_set)?;
    let mut plan = set
        .get(&args.prompt)
        .cloned()
        .ok_or_else(|| usage(format!("no prompt `{}` in {}", args.prompt, args.prompt_set.display())))?;
    if let Some(paths) = args.paths {
        if plan.strategy != Strategy::SelfConsistency {
            return Err(usage("--paths only applies to self-consistency prompts"));
        }
        plan.paths = Some(paths);
        llm_annotate::model::validate_plan(&plan, &set.schema).map_err(|v| usage(&v[0]))?;
    }

    let mut templates = TemplateRegistry::builtin();
    if let Some(path) = &args.templates {
        templates.load_file(path).map_err(RunnerError::from)?;
    }
    templates.get(&args.template).map_err(usage)?;

    let mut opts = RunOptions::default();
    apply_client_args(&mut opts, &args.client)?;
    let mut builder = InferenceClient::builder()
        .templates(templates)
        .max_inflight(opts.max_inflight)
        .api_key_from_env(&args.client.api_key_env);
    for spec in &args.mock_script {
        let (id, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--mock-script expects ID=PATH, got `{spec}`")))?;
        let script = MockScript::load(Path::new(path)).map_err(RunnerError::from)?;
        builder = builder.mock(id, script);
    }
    let client = builder.build().map_err(RunnerError::from)?;

    let profile = ModelProfile {
        model_name: args.model,
        template_id: args.template,
        endpoint,
        generation,
    };
    let items = corpus::ingest(&args.corpus, format_for(&args.corpus, args.format)?, &set.schema)
        .map_err(RunnerError::from)?;
    let stem = cell_stem(&plan.name, &profile.model_name);
    let record_path = args.out.join("records").join(format!("{stem}.jsonl"));
    let run = runner::run_cell(&client, &plan, &profile, &set.schema, &items, &record_path, &opts).await?;

    let counts = StatusCounts::of(&run.records);
    eprintln!(
        "{}: {} records ({} ok, {} tie_broken, {} unparsed)",
        record_path.display(),
        run.records.len(),
        counts.ok,
        counts.tie_broken,
        counts.unparsed
    );
    if items.iter().all(|i| i.gold().is_some()) {
        let policy = args.client.unparsed_policy.unwrap_or_default();
        let report = runner::evaluate(&run.records, &items, &set.schema, policy)?;
        runner::write_report(&args.out.join("reports"), &stem, &report)?;
        print!("{}", report.to_text());
    }
    Ok(0)
}

async fn grid(args: GridArgs) -> Result<u8, CliError> {
    let mut spec = GridSpec::load(&args.spec)?;
    if let Some(t) = args.temperature {
        for m in &mut spec.models {
            m.generation = m.generation.with_temperature(t).map_err(usage)?;
        }
    }
    if let Some(seed) = args.seed {
        spec.base_seed = Some(seed);
    }
    if let Some(out) = args.out {
        spec.output_dir = out;
    }
    if let Some(policy) = args.client.unparsed_policy {
        spec.unparsed_policy = policy;
    }
    apply_client_args(&mut spec.options, &args.client)?;
    let client = spec.build_client(&args.client.api_key_env)?;

    let run = runner::run_grid(&spec, &client).await?;
    print!("{}", runner::best_text(&run.best));
    let mut code = 0;
    for cell in run.failed() {
        eprintln!(
            "failed cell ({}, {}): {}",
            cell.prompt,
            cell.model,
            cell.error.as_deref().unwrap_or("unknown error")
        );
        code = code.max(if cell.error_kind == Some("backend") { 3 } else { 2 });
    }
    Ok(code)
}

fn evaluate(args: EvaluateArgs) -> Result<u8, CliError> {
    let schema = args.schema.schema()?;
    let format = format_for(&args.corpus, args.format)?;
    let items = corpus::ingest(&args.corpus, format, &schema).map_err(RunnerError::from)?;
    let records = runner::read_records(&args.records)?;
    let report = runner::evaluate(&records, &items, &schema, args.unparsed_policy)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(usage)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(0)
}

fn report(args: ReportArgs) -> Result<u8, CliError> {
    let mut spec = GridSpec::load(&args.spec)?;
    if let Some(out) = args.out {
        spec.output_dir = out;
    }
    let cells = runner::collect_cells(&spec)?;
    let best = runner::write_summaries(&spec.output_dir, &cells)?;
    print!("{}", runner::best_text(&best));
    let missing = cells.iter().filter(|c| c.report.is_none()).count();
    if missing > 0 {
        eprintln!("{missing} cells have no usable records");
        return Ok(2);
    }
    Ok(0)
}
