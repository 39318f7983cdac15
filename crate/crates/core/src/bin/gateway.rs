use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::Value;
use tokio::net::TcpListener;
use tracing::info;
use tracing_subscriber::EnvFilter;

use t411::botkit::{BotServer, Fixtures};
use t411::chatbot::{load_rules, RuleSet};
use t411::dispatch::Dispatcher;
use t411::pipeline::api::{self, RegisterRequest};
use t411::pipeline::config::{GatewayConfig, DEFAULT_CONTROL_ADDR};
use t411::pipeline::Gateway;
use t411::registry::RegistryStore;
use t411::simulator::script::{simulate, SimulateOptions};
use t411::simulator::SimWorld;
use t411::transport::{Endpoint, HttpTransport, Transport, TransportEndpoint};

#[derive(Parser)]
#[command(name = "gateway", version, about = "Keyed auto-responder gateway for a microblog account")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the engine and its control API
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reserve a key for a webhook
    Register {
        key: String,
        webhook: String,
        #[arg(long)]
        owner: String,
        /// Control API of a running gateway
        #[arg(long, default_value_t = format!("http://{DEFAULT_CONTROL_ADDR}"))]
        api: String,
        /// Write straight to a journal file instead of calling the API
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Release a key
    Unregister {
        key: String,
        #[arg(long)]
        owner: String,
        #[arg(long, default_value_t = format!("http://{DEFAULT_CONTROL_ADDR}"))]
        api: String,
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Show engine status
    Status {
        #[arg(long, default_value_t = format!("http://{DEFAULT_CONTROL_ADDR}"))]
        api: String,
    },
    /// Start a stopped engine
    Start {
        #[arg(long, default_value_t = format!("http://{DEFAULT_CONTROL_ADDR}"))]
        api: String,
    },
    /// Stop the engine after the current tick
    Stop {
        #[arg(long, default_value_t = format!("http://{DEFAULT_CONTROL_ADDR}"))]
        api: String,
    },
    /// Run a scenario script against the simulator
    Simulate {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "t411")]
        base_account: String,
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Serve the example quote, weather and echo webhooks
    Botkit {
        #[arg(long, default_value = "127.0.0.1:8412")]
        addr: SocketAddr,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
}

fn load_fixtures(path: Option<&PathBuf>) -> Result<Fixtures> {
    match path {
        Some(p) => Fixtures::load(p).with_context(|| format!("loading fixtures {}", p.display())),
        None => Ok(Fixtures::shipped()),
    }
}

fn load_rule_file(path: Option<&PathBuf>) -> Result<RuleSet> {
    match path {
        Some(p) => {
            let src = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(load_rules(&src)?)
        }
        None => Ok(RuleSet::default()),
    }
}

async fn api_call(method: reqwest::Method, url: String, body: Option<Value>) -> Result<Value> {
    let client = reqwest::Client::new();
    let mut req = client.request(method, &url);
    if let Some(b) = body {
        req = req.json(&b);
    }
    let resp = req.send().await.with_context(|| format!("calling {url}"))?;
    let status = resp.status();
    let value: Value = resp.json().await.unwrap_or(Value::Null);
    if !status.is_success() {
        bail!("{status}: {value}");
    }
    Ok(value)
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values print"));
}

async fn run(config: PathBuf) -> Result<()> {
    let cfg = GatewayConfig::load(&config)?;
    let registry = RegistryStore::open(&cfg.journal_path)?.into_shared();
    let endpoint = TransportEndpoint::parse(&cfg.transport, &cfg.base_account)?;
    let transport: Arc<dyn Transport> = match &endpoint.base {
        Endpoint::Simulated => Arc::new(SimWorld::with_budgets(&cfg.base_account, cfg.budgets)),
        Endpoint::Http(url) => Arc::new(HttpTransport::new(url, &cfg.base_account, cfg.budgets)),
    };
    let mut builder = Gateway::builder(transport, registry)
        .dispatcher(Dispatcher::with_parallelism(
            Arc::new(t411::dispatch::HttpExecutor::new()),
            cfg.workers,
        ))
        .rules(load_rule_file(cfg.rules_path.as_ref())?)
        .mode(cfg.mode)
        .poll_interval(cfg.poll_interval_seconds);
    if let Some(state) = &cfg.state_path {
        builder = builder.snapshot_path(state);
    }
    let gateway = Arc::new(builder.build()?);
    let _engine = gateway.spawn(cfg.workers);

    let listener = TcpListener::bind(cfg.control_addr)
        .await
        .with_context(|| format!("binding control API on {}", cfg.control_addr))?;
    info!(addr = %listener.local_addr()?, account = %cfg.base_account, "control API listening");
    axum::serve(listener, api::router(gateway))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => run(config).await?,
        Command::Register { key, webhook, owner, api, journal } => match journal {
            Some(path) => {
                let reg = RegistryStore::open(&path)?.register(&key, &webhook, &owner)?;
                print(&serde_json::to_value(reg)?);
            }
            None => {
                let body = serde_json::to_value(RegisterRequest { key, webhook, owner })?;
                print(&api_call(reqwest::Method::POST, format!("{api}/admin/services"), Some(body)).await?);
            }
        },
        Command::Unregister { key, owner, api, journal } => match journal {
            Some(path) => {
                RegistryStore::open(&path)?.unregister(&key, &owner)?;
                println!("removed {key}");
            }
            None => {
                let url = format!("{api}/admin/services/{key}?owner={}", t411::percent_encode(&owner));
                print(&api_call(reqwest::Method::DELETE, url, None).await?);
            }
        },
        Command::Status { api } => {
            print(&api_call(reqwest::Method::GET, format!("{api}/control/status"), None).await?)
        }
        Command::Start { api } => {
            print(&api_call(reqwest::Method::POST, format!("{api}/control/start"), None).await?)
        }
        Command::Stop { api } => {
            print(&api_call(reqwest::Method::POST, format!("{api}/control/stop"), None).await?)
        }
        Command::Simulate { script, base_account, fixtures, rules } => {
            let src = std::fs::read_to_string(&script)
                .with_context(|| format!("reading {}", script.display()))?;
            let opts = SimulateOptions {
                base_account,
                fixtures: load_fixtures(fixtures.as_ref())?,
                rules: load_rule_file(rules.as_ref())?,
                ..SimulateOptions::default()
            };
            match simulate(&src, opts).await {
                Ok(report) => {
                    println!(
                        "ok: {} steps, {} expectations met",
                        report.steps, report.expectations_met
                    );
                }
                Err(e) => {
                    eprintln!("FAILED: {e}");
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Botkit { addr, fixtures } => {
            let server = BotServer::start(addr, load_fixtures(fixtures.as_ref())?).await?;
            println!("serving /quote /weather /echo on {}", server.base_url());
            tokio::signal::ctrl_c().await?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
