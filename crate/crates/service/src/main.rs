use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rollguard_core::config::Config;
use rollguard_core::harness::ExecRequest;
use rollguard_core::monitor::{Change, CrashPlan, Monitor, PruneRequest, RollbackRequest, SnapshotRequest, UpdateRequest};
use rollguard_core::records::{ObjectId, PruneReason, PruneReasonKind, VersionRef};
use rollguard_core::state::HeadTracking;
use rollguard_service::api::EligibilityQuery;
use rollguard_service::backend::{lineage_response_text, snapshots_response_text, tx_text};
use rollguard_service::bench::{self, BenchOp, BenchPlan, Stat};
use rollguard_service::{ApiError, Backend, Client};

const EXIT_REJECTED: u8 = 3;
const EXIT_INTEGRITY: u8 = 4;
const EXIT_UNAVAILABLE: u8 = 5;

#[derive(Parser)]
#[command(name = "rollguard", version, about = "Rollback-protected object store")]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, env = "ROLLGUARD_CONFIG", conflicts_with = "root")]
    config: Option<PathBuf>,
    /// Store directory, with default settings.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Talk to a running service instead of opening the store.
    #[arg(long, global = true, env = "ROLLGUARD_SERVER")]
    server: Option<String>,
    /// Print JSON responses.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "cli")]
    actor: String,
    #[arg(long, default_value = "")]
    justify: String,
    /// Idempotency key; a retry with the same key returns the first result.
    #[arg(long)]
    key: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Commit new versions, given as OBJECT=FILE.
    Update {
        #[arg(required = true, value_name = "OBJECT=FILE")]
        changes: Vec<String>,
        /// Treat the right-hand side as the content itself.
        #[arg(long)]
        literal: bool,
        /// Also tag a snapshot of the changed objects.
        #[arg(long)]
        snapshot: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Bind the current heads of OBJECTS under TAG.
    Snapshot {
        tag: String,
        #[arg(required = true)]
        objects: Vec<ObjectId>,
        #[command(flatten)]
        common: Common,
    },
    /// Restore earlier versions as new heads.
    Rollback {
        #[arg(long, conflicts_with = "target", required_unless_present = "target")]
        to_snapshot: Option<String>,
        /// OBJECT@VERSION, repeatable.
        #[arg(long)]
        target: Vec<VersionRef>,
        #[command(flatten)]
        common: Common,
    },
    /// De-authorize versions permanently.
    Prune {
        #[arg(long, conflicts_with = "target", required_unless_present = "target")]
        snapshot: Option<String>,
        #[arg(long)]
        target: Vec<VersionRef>,
        #[arg(long, value_enum, default_value_t = Reason::Other)]
        reason: Reason,
        #[arg(long, default_value = "")]
        detail: String,
        #[command(flatten)]
        common: Common,
    },
    /// Current authoritative checkpoint.
    Checkpoint,
    /// Snapshot tags and their members.
    Snapshots,
    /// Verified history of one object.
    Lineage { object: ObjectId },
    /// Whether OBJECT@VERSION may be used, optionally within a snapshot.
    Eligibility {
        target: VersionRef,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Re-verify every leaf against the sealed checkpoint.
    Verify,
    /// Measure latency and storage as the store grows.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Apply one operation read as JSON from stdin.
    #[command(hide = true)]
    Exec,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory for the store, bench.csv and bench.svg.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OpArg::Query)]
    op: OpArg,
    #[arg(long, default_value_t = 25)]
    objects: usize,
    #[arg(long, default_value_t = 2700)]
    until_leaves: u64,
    #[arg(long, default_value_t = 12)]
    points: usize,
    #[arg(long, default_value_t = 15)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    object_bytes: usize,
    /// Keep only this many snapshots.
    #[arg(long)]
    retention: Option<usize>,
    #[arg(long, value_enum, default_value_t = Tracking::VersionMetadata)]
    head_tracking: Tracking,
    /// Instead of latency, record storage after this many releases.
    #[arg(long)]
    storage_releases: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reason {
    RetentionExpired,
    Cve,
    Redaction,
    Other,
}

impl From<Reason> for PruneReasonKind {
    fn from(r: Reason) -> Self {
        match r {
            Reason::RetentionExpired => PruneReasonKind::RetentionExpired,
            Reason::Cve => PruneReasonKind::Cve,
            Reason::Redaction => PruneReasonKind::Redaction,
            Reason::Other => PruneReasonKind::Other,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Tracking {
    PointerLeaves,
    VersionMetadata,
}

impl From<Tracking> for HeadTracking {
    fn from(t: Tracking) -> Self {
        match t {
            Tracking::PointerLeaves => HeadTracking::PointerLeaves,
            Tracking::VersionMetadata => HeadTracking::VersionMetadata,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    Update,
    Snapshot,
    Rollback,
    Prune,
    Query,
    Lineage,
}

impl From<OpArg> for BenchOp {
    fn from(o: OpArg) -> Self {
        match o {
            OpArg::Update => BenchOp::Update,
            OpArg::Snapshot => BenchOp::Snapshot,
            OpArg::Rollback => BenchOp::Rollback,
            OpArg::Prune => BenchOp::Prune,
            OpArg::Query => BenchOp::Query,
            OpArg::Lineage => BenchOp::Lineage,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            if let Some(api) = e.downcast_ref::<ApiError>() {
                eprintln!("error: {api}");
                return ExitCode::from(exit_code(api));
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn exit_code(e: &ApiError) -> u8 {
    if e.is_integrity_failure() {
        EXIT_INTEGRITY
    } else if e.status == 0 || e.status == 503 {
        EXIT_UNAVAILABLE
    } else if (400..500).contains(&e.status) {
        EXIT_REJECTED
    } else {
        1
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    match (&cli.config, &cli.root) {
        (Some(path), _) => Ok(Config::load(path)?),
        (None, Some(root)) => Ok(Config::for_root(root)),
        (None, None) => bail!("pass --config, --root or --server"),
    }
}

fn backend(cli: &Cli) -> anyhow::Result<Box<dyn Backend>> {
    if let Some(url) = &cli.server {
        return Ok(Box::new(Client::new(url)?));
    }
    Ok(Box::new(Monitor::open(load_config(cli)?).map_err(ApiError::from)?))
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce(&T) -> String) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        let t = text(value);
        print!("{t}");
        if !t.ends_with('\n') {
            println!();
        }
    }
    Ok(())
}

fn parse_change(spec: &str, literal: bool) -> anyhow::Result<Change> {
    let (object, value) = spec
        .split_once('=')
        .with_context(|| format!("expected OBJECT=FILE, got {spec:?}"))?;
    let object: ObjectId = object.parse().map_err(anyhow::Error::msg)?;
    let bytes = if literal {
        value.as_bytes().to_vec()
    } else {
        std::fs::read(value).with_context(|| format!("reading {value}"))?
    };
    Ok(Change::new(object, bytes))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let json = cli.json;
    match &cli.cmd {
        Cmd::Update {
            changes,
            literal,
            snapshot,
            common,
        } => {
            let changes = changes.iter().map(|c| parse_change(c, *literal)).collect::<anyhow::Result<_>>()?;
            let mut req = UpdateRequest::new(&common.actor, changes).justify(&common.justify);
            req.idempotency_key = common.key.clone();
            if let Some(tag) = snapshot {
                req = req.with_snapshot(tag, vec![]);
            }
            emit(json, &backend(&cli)?.update(req)?, tx_text)?;
        }
        Cmd::Snapshot { tag, objects, common } => {
            let mut req = SnapshotRequest::new(&common.actor, tag, objects.clone());
            req.justification = common.justify.clone();
            req.idempotency_key = common.key.clone();
            emit(json, &backend(&cli)?.snapshot(req)?, tx_text)?;
        }
        Cmd::Rollback {
            to_snapshot,
            target,
            common,
        } => {
            let mut req = match to_snapshot {
                Some(tag) => RollbackRequest::to_snapshot(&common.actor, tag),
                None => RollbackRequest::selective(&common.actor, target.clone()),
            }
            .justify(&common.justify);
            req.idempotency_key = common.key.clone();
            emit(json, &backend(&cli)?.rollback(req)?, tx_text)?;
        }
        Cmd::Prune {
            snapshot,
            target,
            reason,
            detail,
            common,
        } => {
            let reason = PruneReason::new((*reason).into(), detail);
            let mut req = match snapshot {
                Some(tag) => PruneRequest::snapshot(&common.actor, tag, reason),
                None => PruneRequest::selective(&common.actor, target.clone(), reason),
            }
            .justify(&common.justify);
            req.idempotency_key = common.key.clone();
            emit(json, &backend(&cli)?.prune(req)?, tx_text)?;
        }
        Cmd::Checkpoint => {
            emit(json, &backend(&cli)?.checkpoint()?, |c| {
                format!(
                    "counter={} root={} catalog={} registry={} log={}",
                    c.counter, c.root, c.pad_sizes.catalog, c.pad_sizes.registry, c.pad_sizes.log
                )
            })?;
        }
        Cmd::Snapshots => emit(json, &backend(&cli)?.snapshots()?, snapshots_response_text)?,
        Cmd::Lineage { object } => emit(json, &backend(&cli)?.lineage(object)?, lineage_response_text)?,
        Cmd::Eligibility { target, tag } => {
            let q = EligibilityQuery {
                object: target.object.clone(),
                version: target.version,
                tag: tag.clone(),
            };
            let r = backend(&cli)?.eligibility(&q)?;
            let eligible = r.report.eligible;
            emit(json, &r, |r| match &r.report.reason {
                None => format!("{target} eligible at counter {}", r.report.checkpoint_counter),
                Some(why) => format!("{target} ineligible ({}) at counter {}", why.code(), r.report.checkpoint_counter),
            })?;
            if !eligible {
                return Ok(ExitCode::from(EXIT_REJECTED));
            }
        }
        Cmd::Verify => {
            emit(json, &backend(&cli)?.verify()?, |r| {
                let r = &r.report;
                format!(
                    "ok counter={} root={} leaves={} unmatched_intents={}",
                    r.counter,
                    r.root,
                    r.leaves_checked,
                    r.unmatched_intents.len()
                )
            })?;
        }
        Cmd::Bench(args) => run_bench(args, json)?,
        Cmd::Serve { listen } => {
            let config = load_config(&cli)?;
            let listen = listen.clone().unwrap_or_else(|| config.service.listen.clone());
            serve(config, &listen)?;
        }
        Cmd::Exec => exec()?,
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(config: Config, listen: &str) -> anyhow::Result<()> {
    let monitor = Arc::new(Monitor::open(config)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        rollguard_service::server::serve(listener, monitor, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

/// Used by the crash harness: the crash hook comes from the environment.
fn exec() -> anyhow::Result<()> {
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let req: ExecRequest = serde_json::from_str(&input).context("decoding exec request")?;
    let config: Config = toml::from_str(&req.config).context("decoding config")?;
    let authorizer = Box::new(config.policy.clone());
    let m = Monitor::open_with(config, authorizer, CrashPlan::from_env())?;
    let out = req.op.apply(&m)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn run_bench(args: &BenchArgs, json: bool) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let store = args.out.join("store");
    if store.exists() {
        bail!("{} already exists; use a fresh --out", store.display());
    }
    let mut plan = BenchPlan::new(args.op.into(), args.objects, args.until_leaves);
    plan.points = args.points;
    plan.samples = args.samples;
    plan.batch = args.batch;
    plan.object_bytes = args.object_bytes;
    plan.retention = args.retention;
    plan.head_tracking = args.head_tracking.into();

    if let Some(releases) = args.storage_releases {
        let rows = bench::storage_growth(&plan, releases, &store)?;
        bench::write_csv(&rows, &args.out.join("storage.csv"))?;
        bench::plot_storage(&rows, &args.out.join("storage.svg"))?;
        report_paths(&args.out, &["storage.csv", "storage.svg"]);
        return Ok(());
    }

    let records = bench::run(&plan, &store)?;
    bench::write_csv(&records, &args.out.join("bench.csv"))?;
    bench::plot_latency(&records, &args.out.join("bench.svg"), plan.op.name())?;
    let fit = match plan.op {
        BenchOp::Lineage => bench::fit_k_log_n(&records, Stat::Min),
        _ => bench::fit_log(&records, Stat::Min),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "records": records, "fit": fit }))?);
        return Ok(());
    }
    for r in &records {
        println!(
            "{:>8} leaves  min {:>9.1} us  median {:>9.1} us  p95 {:>9.1} us{}",
            r.pad_leaves,
            r.min_us,
            r.median_us,
            r.p95_us,
            r.max_proof_hashes.map(|h| format!("  proof {h} hashes")).unwrap_or_default()
        );
    }
    println!("fit of min: latency = {:.2} + {:.2} * x  (r2 {:.3})", fit.a, fit.b, fit.r2);
    report_paths(&args.out, &["bench.csv", "bench.svg"]);
    Ok(())
}

fn report_paths(dir: &Path, names: &[&str]) {
    for n in names {
        eprintln!("wrote {}", dir.join(n).display());
    }
}
