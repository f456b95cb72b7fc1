use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ragrank_core::config::AppConfig;
use ragrank_core::evaluation::{load_dataset, DatasetError, Pipeline, PipelineError, SweepSpec};
use ragrank_core::generation::{McqOption, QueryBundle, RecordStatus};
use ragrank_core::provenance::ProvenanceLog;
use ragrank_core::synthetic::{write_planted_set, SyntheticSpec};
use ragrank_core::{split_chunks, DocumentKind, QueryEmbeddingMode, VectorStore};
use ragrank_cli::server::{self, ServerState};

#[derive(Parser)]
#[command(name = "ragrank", version, about = "Local retrieval-augmented question answering")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Override a config key, e.g. `--set pr.top_k=6`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Direct,
    Hyde,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Text,
    Markdown,
    Pages,
}

impl From<Kind> for DocumentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Text => DocumentKind::PlainText,
            Kind::Markdown => DocumentKind::Markdown,
            Kind::Pages => DocumentKind::PdfPages,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question from the given files.
    Ask {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(short, long)]
        question: String,
        /// Multiple-choice option as `LABEL=text`. Repeatable.
        #[arg(short = 'o', long = "option", value_name = "LABEL=TEXT")]
        options: Vec<String>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run a dataset and report metrics.
    Eval {
        dataset: PathBuf,
        /// Results file (default: eval.results_path).
        #[arg(long)]
        results: Option<PathBuf>,
        /// Abort on the first malformed dataset line.
        #[arg(long)]
        strict: bool,
        /// Sweep one parameter instead, e.g. `pr.top_k=1,3,6,9,12`.
        #[arg(long, value_name = "PARAM=V1,V2,...")]
        sweep: Option<String>,
        /// Directory for per-value results and the sweep CSV.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run one batch per parameter value; several specs give several tables.
    Sweep {
        dataset: PathBuf,
        #[arg(required = true, value_name = "PARAM=V1,V2,...")]
        specs: Vec<String>,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Print the chunks of one file.
    Chunks {
        file: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Write a synthetic planted-evidence dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(short = 'n', long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn store_for(cfg: &AppConfig) -> anyhow::Result<Arc<VectorStore>> {
    let log = ProvenanceLog::open(&cfg.server.provenance_log)
        .with_context(|| format!("opening provenance log {}", cfg.server.provenance_log.display()))?;
    Ok(Arc::new(VectorStore::with_provenance(Arc::new(log))))
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn parse_option(s: &str) -> anyhow::Result<McqOption> {
    let (label, text) = s.split_once('=').context("options look like LABEL=text")?;
    let mut chars = label.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => Ok(McqOption::new(c, text.trim())),
        _ => bail!("option label {label:?} must be one uppercase letter"),
    }
}

fn ask(cli: &Cli, cfg: AppConfig, files: &[PathBuf], question: &str, options: &[String], mode: Option<Mode>) -> anyhow::Result<bool> {
    for f in files {
        if !f.is_file() {
            bail!("cannot read {}: no such file", f.display());
        }
    }
    let options: Vec<McqOption> = options.iter().map(|o| parse_option(o)).collect::<Result<_, _>>()?;
    let options = (!options.is_empty()).then_some(options);
    let instruction = if options.is_some() { &cfg.llm.instruction } else { &cfg.llm.open_instruction }.clone();
    let mode = match mode {
        Some(Mode::Direct) => QueryEmbeddingMode::Direct,
        Some(Mode::Hyde) => QueryEmbeddingMode::Hyde,
        None => cfg.embedding.mode,
    };
    let bundle = QueryBundle::new(question, options, instruction, mode)?;
    let pipeline = Pipeline::from_config(cfg.clone(), store_for(&cfg)?)?;
    let rec = pipeline.answer(files, &bundle, None)?;
    if cli.json {
        print_json(&rec)?;
    } else {
        print!("{}", ragrank_cli::render_answer(&rec));
    }
    if rec.status == RecordStatus::Failed {
        eprintln!("error: {}", rec.error.as_deref().unwrap_or("pipeline failed"));
        return Ok(false);
    }
    Ok(true)
}

fn dataset(path: &Path, strict: bool) -> anyhow::Result<Vec<ragrank_core::EvalInstance>> {
    let (instances, issues) = match load_dataset(path, strict) {
        Ok(x) => x,
        Err(DatasetError::Empty) => bail!("{}: dataset contains no usable instances", path.display()),
        Err(e) => return Err(e.into()),
    };
    for i in &issues {
        eprintln!("warning: {}: line {}: {} (skipped)", path.display(), i.line, i.message);
    }
    Ok(instances)
}

fn sweep_tables(
    cli: &Cli,
    pipeline: &Pipeline,
    data: &[ragrank_core::EvalInstance],
    specs: &[String],
    out_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let specs: Vec<SweepSpec> = specs.iter().map(|s| SweepSpec::parse(s)).collect::<Result<_, _>>()?;
    // Every value of every spec is checked before anything runs.
    for s in &specs {
        s.configs(pipeline.config())?;
    }
    let mut all = Vec::new();
    for spec in &specs {
        let dir = out_dir.map(|d| d.join(spec.parameter.key()));
        let table = pipeline.run_sweep(data, spec, dir.as_deref())?;
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d)?;
            let path = d.join(format!("{}.csv", spec.parameter.key()));
            std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        }
        if !cli.json {
            println!("{}", table.render());
        }
        all.push(table);
    }
    if cli.json {
        print_json(&all)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = AppConfig::from_sources(cli.config.as_deref(), &cli.set)?;
    match &cli.command {
        Command::Ask {
            files,
            question,
            options,
            mode,
        } => ask(cli, cfg, files, question, options, *mode),
        Command::Eval {
            dataset: path,
            results,
            strict,
            sweep,
            out_dir,
        } => {
            let data = dataset(path, *strict || cfg.eval.strict)?;
            let pipeline = Pipeline::from_config(cfg.clone(), store_for(&cfg)?)?;
            if let Some(spec) = sweep {
                sweep_tables(cli, &pipeline, &data, std::slice::from_ref(spec), out_dir.as_deref())?;
                return Ok(true);
            }
            let results = results.clone().unwrap_or_else(|| cfg.eval.results_path.clone());
            let outcome = pipeline.run_batch(&data, Some(&results))?;
            if cli.json {
                print_json(&outcome.report)?;
            } else {
                println!("{}", outcome.report.render());
                println!("results: {}", results.display());
            }
            Ok(true)
        }
        Command::Sweep {
            dataset: path,
            specs,
            strict,
            out_dir,
        } => {
            let data = dataset(path, *strict || cfg.eval.strict)?;
            let pipeline = Pipeline::from_config(cfg.clone(), store_for(&cfg)?)?;
            sweep_tables(cli, &pipeline, &data, specs, out_dir.as_deref())?;
            Ok(true)
        }
        Command::Serve { host, port } => {
            let host = host.clone().unwrap_or_else(|| cfg.server.host.clone());
            let port = port.unwrap_or(cfg.server.port);
            let state = ServerState::from_config(cfg)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                server::run(state, listener, server::shutdown_signal()).await?;
                anyhow::Ok(())
            })?;
            Ok(true)
        }
        Command::Chunks { file, kind } => {
            let kind = kind.map_or_else(|| DocumentKind::infer(file), DocumentKind::from);
            let doc = ragrank_core::load_document(file, kind).map_err(PipelineError::from)?;
            let pipeline = Pipeline::from_config(cfg.clone(), Arc::new(VectorStore::new()))?;
            let chunks = split_chunks(&doc, &cfg.chunk.to_chunking(), pipeline.counter().as_ref()).map_err(PipelineError::from)?;
            if cli.json {
                print_json(&chunks)?;
            } else {
                for c in &chunks {
                    println!(
                        "--- {} p.{} chunk {} ({} tokens, {} overlap)",
                        c.filename, c.page, c.seq, c.token_len, c.overlap_tokens
                    );
                    println!("{}", c.text);
                }
            }
            Ok(true)
        }
        Command::Synth { out, instances, seed } => {
            let spec = SyntheticSpec {
                instances: *instances,
                seed: *seed,
                ..Default::default()
            };
            let set = write_planted_set(out, &spec).with_context(|| format!("writing {}", out.display()))?;
            if cli.json {
                print_json(&set)?;
            } else {
                println!("{}", set.dataset_path.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
