use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sae_sensitivity::annotation::{self, AppState, Mix};
use sae_sensitivity::pipeline::{build_session_from_run, Overrides, RunConfig, Runner, StageOutcome};

/// Explanation-free sensitivity evaluation of SAE features.
#[derive(Parser)]
#[command(name = "sae-sensitivity", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated feature ids, replacing random sampling.
    #[arg(long, global = true, value_delimiter = ',')]
    features: Option<Vec<u32>>,
    #[arg(long, global = true)]
    cutoff_truncation: Option<f64>,
    #[arg(long, global = true)]
    cutoff_count: Option<usize>,
    /// `synthetic`, `remote`, or a backend URL.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Run output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample features, mine activating examples and filter them.
    Collect,
    /// Generate texts for every feature that passed filtering.
    Generate,
    /// Score generated texts against the SAE.
    Score,
    /// Aggregate scores into per-SAE reports and summary tables.
    Analyze,
    /// Run collect, generate, score and analyze in order.
    Run,
    /// Serve annotation sessions over HTTP.
    Serve(ServeArgs),
    /// Write the synthetic demo fixture (inputs plus config.toml).
    Fixture {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Annotation session management.
    Session {
        #[command(subcommand)]
        command: SessionCommand,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory holding sessions and the ratings log.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Build a session with this seed before serving.
    #[arg(long)]
    session_seed: Option<u64>,
    /// Mix used with --session-seed, e.g. `0.2,0.2,0.6`.
    #[arg(long)]
    mix: Option<String>,
    /// Static dashboard assets.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SessionCommand {
    /// Assemble a blinded session from a scored run.
    Build {
        #[arg(long, default_value = "session")]
        id: String,
        #[arg(long)]
        n_items: Option<usize>,
        #[arg(long)]
        session_seed: Option<u64>,
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            features: self.features.clone(),
            cutoff_truncation: self.cutoff_truncation,
            cutoff_count: self.cutoff_count,
            backend: self.backend.clone(),
            out: self.out.clone(),
        }
    }

    fn load_config(&self) -> Result<RunConfig> {
        let Some(path) = &self.config else {
            bail!("--config is required for this command");
        };
        let mut config = RunConfig::load(path)?;
        config.apply(&self.overrides());
        Ok(config)
    }
}

fn report(stage: &str, outcome: &StageOutcome) {
    for note in &outcome.notes {
        tracing::info!(stage, "{note}");
    }
    if outcome.partial {
        tracing::warn!(stage, "finished with unevaluated features");
    }
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    let partial = match cli.command {
        Command::Collect | Command::Generate | Command::Score | Command::Analyze | Command::Run => {
            let runner = Runner::new(g.load_config()?)?;
            let (name, outcome) = match cli.command {
                Command::Collect => ("collect", runner.collect()?),
                Command::Generate => ("generate", runner.generate()?),
                Command::Score => ("score", runner.score()?),
                Command::Analyze => ("analyze", runner.analyze()?),
                _ => ("run", runner.run_all()?),
            };
            report(name, &outcome);
            outcome.partial
        }
        Command::Session {
            command:
                SessionCommand::Build {
                    id,
                    n_items,
                    session_seed,
                    mix,
                    data_dir,
                },
        } => {
            let mut config = g.load_config()?;
            if let Some(d) = data_dir {
                config.annotation.data_dir = Some(std::path::absolute(d)?);
            }
            let mix: Mix = mix.as_deref().unwrap_or(&config.annotation.mix).parse()?;
            let seed = session_seed.unwrap_or(config.annotation.session_seed);
            let n = n_items.unwrap_or(config.annotation.n_items);
            let path = build_session_from_run(&config, &id, seed, mix, n)?;
            println!("{}", path.display());
            false
        }
        Command::Fixture { dir } => {
            let config = sae_sensitivity::fixture::write_fixture(&dir)
                .with_context(|| format!("writing fixture to {}", dir.display()))?;
            println!("{}", config.display());
            false
        }
        Command::Serve(args) => {
            serve(g, args)?;
            false
        }
    };
    Ok(partial)
}

fn serve(g: &Global, args: ServeArgs) -> Result<()> {
    let config = match &g.config {
        Some(_) => Some(g.load_config()?),
        None => None,
    };
    let settings = config.as_ref().map(|c| c.annotation.clone()).unwrap_or_default();
    let data_dir = match (&args.data_dir, &config) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => c.annotation_dir(),
        (None, None) => bail!("serve needs --data-dir or --config"),
    };
    if let Some(seed) = args.session_seed {
        let Some(mut config) = config.clone() else {
            bail!("--session-seed needs --config to locate run artifacts");
        };
        config.annotation.data_dir = Some(std::path::absolute(&data_dir)?);
        let mix: Mix = args.mix.as_deref().unwrap_or(&settings.mix).parse()?;
        let id = format!("session-{seed}");
        build_session_from_run(&config, &id, seed, mix, settings.n_items)?;
        tracing::info!(session = id.as_str(), "session built");
    }
    let state = Arc::new(AppState::open(&data_dir)?);
    let static_dir = args
        .static_dir
        .or_else(|| {
            let c = config.as_ref()?;
            Some(c.resolve(c.annotation.static_dir.as_ref()?))
        });
    let app = annotation::router(state, static_dir.as_deref());
    let port = args.port.unwrap_or(settings.port);
    let addr = format!("{}:{port}", args.host);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, data_dir = %data_dir.display(), "annotation service listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            let report = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
