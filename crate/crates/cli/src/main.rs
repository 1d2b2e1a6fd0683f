use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use interassort_core::{estimate_frequency, estimate_mle, EstimationError, MleOptions, ProductId};
use interassort_service::datastore::{
    ingest_catalog, ingest_parameters, ingest_transactions, normalize_name, read_observations,
    IngestError, ParameterKey, Store, StoreError,
};
use interassort_service::http;
use interassort_service::orchestrator::{Mode, Planner, SolveRequest};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "interassort",
    version,
    about = "Interactive MNL assortment planning"
)]
struct Cli {
    /// Directory holding the parameter store.
    #[arg(
        long,
        global = true,
        env = "INTERASSORT_DATA_DIR",
        default_value = "data"
    )]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a catalog, transaction or parameter file into the store.
    Ingest {
        kind: IngestKind,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        dataset: String,
    },
    /// Estimate MNL parameters for a dataset and store them.
    Estimate(EstimateArgs),
    /// Solve one assortment problem.
    Solve {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        cardinality: Option<u64>,
        /// Comma-separated product ids that must be offered.
        #[arg(long, value_delimiter = ',')]
        include: Vec<u64>,
        /// Comma-separated product ids that must not be offered.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<u64>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Chat with the planner on standard input.
    Chat {
        #[arg(long, env = "INTERASSORT_MODE")]
        mode: Option<ModeArg>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum IngestKind {
    Catalog,
    Transactions,
    Parameters,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Method {
    Freq,
    Mle,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Deterministic,
    Llm,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, value_enum)]
    method: Method,
    /// Name the estimated parameters are stored under.
    #[arg(long, default_value = "mnl")]
    model: String,
    #[arg(long, default_value_t = MleOptions::default().max_iters)]
    max_iters: usize,
    #[arg(long, default_value_t = MleOptions::default().tol)]
    tol: f64,
    /// Offer-set observations (`offered,chosen`), required for `mle`.
    #[arg(long)]
    observations: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(_) => Failure::Runtime(e.to_string()),
            StoreError::Ingest(inner) => inner.into(),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => Failure::Runtime(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<EstimationError> for Failure {
    fn from(e: EstimationError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value")
    );
}

fn ingest(store: &Store, kind: IngestKind, path: &Path, dataset: &str) -> Result<(), Failure> {
    let source = path.display().to_string();
    let dataset = normalize_name(dataset);
    match kind {
        IngestKind::Catalog => {
            let catalog = ingest_catalog(path, &dataset)?;
            let products = catalog.len();
            store.put_catalog(catalog, &source)?;
            print_json(&json!({"dataset": dataset, "kind": "catalog", "products": products}));
        }
        IngestKind::Transactions => {
            let catalog = store.catalog(&dataset)?;
            let (records, report) = ingest_transactions(path, &catalog)?;
            store.put_transactions(&dataset, &records)?;
            print_json(&serde_json::to_value(report).expect("report"));
        }
        IngestKind::Parameters => {
            let parsed = ingest_parameters(path)?;
            if let Some(other) = parsed.iter().find(|p| p.key.dataset() != dataset) {
                return Err(Failure::Validation(format!(
                    "{source}: rows for dataset `{}` do not match --dataset {dataset}",
                    other.key.dataset()
                )));
            }
            let mut stored = Vec::new();
            for p in parsed {
                if !p.dropped.is_empty() {
                    eprintln!(
                        "warning: {} product(s) with utility 0 left out of model {}",
                        p.dropped.len(),
                        p.key.model()
                    );
                }
                let utilities = p.params.utilities().len();
                store.put_parameters(&p.key, p.params)?;
                stored.push(json!({"model": p.key.model(), "utilities": utilities}));
            }
            print_json(&json!({"dataset": dataset, "kind": "parameters", "models": stored}));
        }
    }
    Ok(())
}

fn estimate(store: &Store, args: &EstimateArgs) -> Result<(), Failure> {
    let key = ParameterKey::new(&args.dataset, &args.model)?;
    let catalog = store.catalog(key.dataset())?;
    let summary = match args.method {
        Method::Freq => {
            let transactions = store.transactions(key.dataset())?;
            let params = estimate_frequency(&catalog, &transactions)?;
            store.put_parameters(&key, params)?;
            json!({"method": "freq", "transactions": transactions.len()})
        }
        Method::Mle => {
            let path = args.observations.as_ref().ok_or_else(|| {
                Failure::Validation("--observations is required for --method mle".into())
            })?;
            if args.max_iters == 0 || !(args.tol > 0.0) {
                return Err(Failure::Validation(
                    "--max-iters and --tol must be positive".into(),
                ));
            }
            let observations = read_observations(path)?;
            let options = MleOptions {
                max_iters: args.max_iters,
                tol: args.tol,
            };
            let fit = estimate_mle(&catalog, &observations, options)?;
            store.put_parameters(&key, fit.params)?;
            json!({
                "method": "mle",
                "observations": observations.len(),
                "converged": fit.converged,
                "boundary": fit.boundary,
                "iterations": fit.iterations,
                "log_likelihood": fit.log_likelihood.last(),
            })
        }
    };
    let mut summary = summary;
    summary["dataset"] = json!(key.dataset());
    summary["model"] = json!(key.model());
    summary["products"] = json!(catalog.len());
    print_json(&summary);
    Ok(())
}

fn solve(store: Arc<Store>, request: SolveRequest) -> Result<(), Failure> {
    let planner = Planner::new(store);
    match planner.solve_direct(&request) {
        Ok(output) => {
            println!("{}", output.reply_text);
            println!("---");
            print_json(&serde_json::to_value(&output.result).expect("result"));
            Ok(())
        }
        Err(e) if e.code.is_validation() => Err(Failure::Validation(e.to_string())),
        Err(e) => Err(Failure::Runtime(e.to_string())),
    }
}

fn planner_for(store: Arc<Store>, mode: Option<ModeArg>) -> Result<Planner, Failure> {
    let mode = mode.map(|m| match m {
        ModeArg::Deterministic => Mode::Deterministic,
        ModeArg::Llm => Mode::Llm,
    });
    Planner::from_env(store, mode).map_err(Failure::Runtime)
}

fn serve(
    store: Arc<Store>,
    data_dir: &Path,
    host: std::net::IpAddr,
    port: u16,
) -> Result<(), Failure> {
    let planner = Arc::new(planner_for(store, None)?);
    let snapshot = data_dir.join("sessions.json");
    if snapshot.exists() {
        match planner.restore(&snapshot) {
            Ok(n) => eprintln!("restored {n} session(s)"),
            Err(e) => eprintln!("warning: ignoring session snapshot: {e}"),
        }
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime
        .block_on(async {
            let (listener, addr) = http::bind((host, port).into()).await?;
            println!("listening on http://{addr}");
            std::io::stdout().flush()?;
            let shutdown = async {
                let _ = tokio::signal::ctrl_c().await;
            };
            http::serve(listener, planner.clone(), shutdown).await
        })
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    planner
        .snapshot(&snapshot)
        .map_err(|e| Failure::Runtime(format!("writing session snapshot: {e}")))
}

fn chat(store: Arc<Store>, mode: Option<ModeArg>) -> Result<(), Failure> {
    let planner = planner_for(store, mode)?;
    let interactive = std::io::stdin().is_terminal();
    let mut out = std::io::stdout().lock();
    let result = (|| -> std::io::Result<()> {
        if interactive {
            writeln!(
                out,
                "Type a planning request, \"help\" for examples, or \"exit\" to leave."
            )?;
        }
        let mut lines = std::io::stdin().lock().lines();
        loop {
            if interactive {
                write!(out, "> ")?;
                out.flush()?;
            }
            let Some(line) = lines.next() else {
                return Ok(());
            };
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            if matches!(text, "exit" | "quit") {
                return Ok(());
            }
            let reply = planner.handle_turn("local", text);
            writeln!(out, "{}\n", reply.reply_text)?;
        }
    })();
    match result {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Failure::Runtime(e.to_string()))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let store = Store::open(&cli.data_dir).map(Arc::new).map_err(|e| {
        Failure::Runtime(format!("opening store at {}: {e}", cli.data_dir.display()))
    })?;
    match cli.command {
        Command::Ingest {
            kind,
            path,
            dataset,
        } => ingest(&store, kind, &path, &dataset),
        Command::Estimate(args) => estimate(&store, &args),
        Command::Solve {
            dataset,
            model,
            cardinality,
            include,
            exclude,
        } => {
            let ids = |v: Vec<u64>| (!v.is_empty()).then(|| v.into_iter().map(ProductId).collect());
            let request = SolveRequest {
                dataset,
                model,
                cardinality,
                include_products: ids(include),
                exclude_products: ids(exclude),
            };
            solve(store, request)
        }
        Command::Serve { port, host } => serve(store, &cli.data_dir, host, port),
        Command::Chat { mode } => chat(store, mode),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    tracing_subscriber::fmt()
        .with_max_level(tracing_subscriber::filter::LevelFilter::WARN)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Validation(m) | Failure::Runtime(m)) = &failure;
            eprintln!("error: {m}");
            ExitCode::from(failure.code())
        }
    }
}
