//! `te`: ingest replicate embeddings, compute a snapshot, serve it, or
//! generate a synthetic fixture.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use te_core::api::{cors_layer, router, serve, AppState, Service, DEFAULT_ORIGINS};
use te_core::fixture::{generate, write_fixture, DriftSpec, FixtureError, FixtureSpec};
use te_core::pipeline::{self, ComputeParams, ErrorClass, IngestRequest, PipelineError};
use te_core::projection::TsneParams;
use te_core::snapshot::{read_snapshot, SnapshotError};

#[derive(Parser)]
#[command(name = "te", version, about = "Embedding stability analysis across corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus's replicate files and register them in a workspace
    Ingest(IngestArgs),
    /// Compute confidence, neighbor tables and projections into a snapshot
    Compute(ComputeArgs),
    /// Serve a snapshot over HTTP
    Serve(ServeArgs),
    /// Write a synthetic planted-cluster fixture
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Workspace directory (created if missing)
    #[arg(long, default_value = ".")]
    workspace: PathBuf,
    #[arg(long)]
    corpus_id: String,
    /// Display label, defaults to the corpus id
    #[arg(long)]
    label: Option<String>,
    /// Position of the corpus in the series
    #[arg(long, allow_negative_numbers = true)]
    order: i64,
    /// Replicate files in word2vec text format, at least two
    #[arg(long, num_args = 1.., required = true)]
    embeddings: Vec<PathBuf>,
    /// Terminology TSV
    #[arg(long)]
    terminology: Option<PathBuf>,
}

#[derive(Args)]
struct ComputeArgs {
    #[arg(long, default_value = ".")]
    workspace: PathBuf,
    /// Snapshot directory [default: <workspace>/snapshot]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Minimum EC@k for a concept to be high-confidence, in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Rows per aggregate neighbor table
    #[arg(long, default_value_t = 10)]
    n_neighbors: usize,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "TE_SNAPSHOT")]
    snapshot: PathBuf,
    #[arg(long, env = "TE_PORT", default_value_t = 8000)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Origin allowed cross-origin access; repeatable. Replaces the default
    /// localhost development origins.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    corpora: usize,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    #[arg(long, default_value_t = 50)]
    per_cluster: usize,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Standard deviation of per-replicate Gaussian noise
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Planted concepts: comma-separated `shift`, `pair`, or `none`
    #[arg(long, default_value = "shift,pair")]
    drift: DriftSpec,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
    fn data(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
    fn internal(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Internal => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<FixtureError> for Failure {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::InvalidDrift(_) | FixtureError::InvalidSize(_) => Failure::usage(e.to_string()),
            FixtureError::Io { .. } | FixtureError::Ingest(_) => Failure::internal(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Compute(a) => run_compute(a),
        Command::Serve(a) => run_serve(a),
        Command::Fixture(a) => run_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run_ingest(a: IngestArgs) -> Result<(), Failure> {
    let label = a.label.unwrap_or_else(|| a.corpus_id.clone());
    let out = pipeline::ingest(
        &a.workspace,
        IngestRequest {
            corpus_id: a.corpus_id,
            label,
            order_index: a.order,
            embeddings: a.embeddings,
            terminology: a.terminology,
        },
    )?;
    for (line, reason) in &out.malformed_rows {
        eprintln!("warning: terminology line {line} skipped: {reason}");
    }
    if out.replaced {
        println!("notice: replaced existing corpus `{}`", out.entry.id);
    }
    println!(
        "registered corpus `{}`: m={}, dim={}, replicate sizes {:?}, shared vocabulary {}",
        out.entry.id, out.m, out.dim, out.report.replicate_sizes, out.report.shared
    );
    Ok(())
}

fn run_compute(a: ComputeArgs) -> Result<(), Failure> {
    let params = ComputeParams {
        k: a.k,
        threshold: a.threshold,
        n_neighbors: a.n_neighbors,
        tsne: TsneParams {
            perplexity: a.perplexity,
            iterations: a.iterations,
            seed: a.seed,
        },
    };
    let out = a.out.unwrap_or_else(|| a.workspace.join("snapshot"));
    let outcome = pipeline::compute(&a.workspace, &out, &params)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", pipeline::format_summary(&outcome.summary));
    println!("snapshot written to {} (content digest {})", out.display(), outcome.digest.0);
    Ok(())
}

fn load_service(path: &Path) -> Result<Service, Failure> {
    if !path.is_dir() {
        return Err(Failure::data(format!("snapshot directory {} does not exist", path.display())));
    }
    let snapshot = read_snapshot(path).map_err(|e| {
        let msg = format!("cannot load snapshot {}: {e}", path.display());
        match e {
            SnapshotError::Io { .. } => Failure::internal(msg),
            _ => Failure::data(msg),
        }
    })?;
    Ok(Service::new(snapshot))
}

fn run_serve(a: ServeArgs) -> Result<(), Failure> {
    let service = load_service(&a.snapshot)?;
    let cors = if a.cors_origins.is_empty() {
        cors_layer(DEFAULT_ORIGINS)
    } else {
        cors_layer(&a.cors_origins)
    }
    .map_err(Failure::usage)?;
    let app = router(AppState::new(service), cors);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::internal(e.to_string()))?;
    runtime.block_on(async {
        let addr = SocketAddr::new(a.host, a.port);
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::internal(format!("cannot bind {addr}: {e}")))?;
        let bound = listener.local_addr().map_err(|e| Failure::internal(e.to_string()))?;
        println!("listening on http://{bound}");
        serve(listener, app).await.map_err(|e| Failure::internal(e.to_string()))
    })
}

fn run_fixture(a: FixtureArgs) -> Result<(), Failure> {
    let spec = FixtureSpec {
        corpora: a.corpora,
        clusters: a.clusters,
        per_cluster: a.per_cluster,
        dim: a.dim,
        m: a.m,
        noise: a.noise,
        drift: a.drift,
        seed: a.seed,
    };
    let fixture = generate(&spec)?;
    write_fixture(&a.out, &fixture)?;
    let concepts = fixture.sets.first().map_or(0, |s| s.shared_vocabulary().len());
    println!(
        "wrote {} corpora x {} replicates ({} concepts each) to {}",
        spec.corpora,
        spec.m,
        concepts,
        a.out.display()
    );
    Ok(())
}
