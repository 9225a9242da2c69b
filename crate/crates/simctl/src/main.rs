use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use vigil_core::clock::{Clock, SystemClock};
use vigil_core::predicate::Predicate;
use vigil_core::store::{RetentionPolicy, Store};
use vigil_core::subscription::FilterSpec;
use vigil_net::{RegistryServer, Station, StationConfig, StationParts};
use vigil_repo::{RepoConfig, Repository};
use vigil_sim::config::RegistryFile;
use vigil_sim::control::{AdminClient, Reply};
use vigil_sim::{run_scenario, ScenarioConfig, REFERENCE_CONFIG};

#[derive(Parser)]
#[command(name = "vigil", version, about = "Run and control vigil services and simulations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve a registry from a TOML file.
    RunRegistry { #[arg(long)] config: PathBuf },
    /// Serve a station from a TOML file.
    RunStation { #[arg(long)] config: PathBuf },
    /// Serve the repository from a TOML file.
    RunRepo { #[arg(long)] config: PathBuf },
    /// Run a simulated deployment and print its JSON report.
    RunScenario {
        /// Scenario TOML; the reference scenario when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long)]
        time_factor: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the reference scenario.
    ReferenceConfig,
    /// Send an admin command through the repository.
    Admin {
        /// Repository base URL.
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
        #[arg(long, env = "VIGIL_ADMIN_TOKEN")]
        token: String,
        #[command(subcommand)]
        op: AdminOp,
    },
    /// Dump a store directory.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Compacted bins instead of raw points (CSV only).
        #[arg(long)]
        bins: bool,
    },
}

#[derive(Subcommand)]
enum AdminOp {
    /// Enable or disable a collector module on a station.
    ModuleToggle {
        #[arg(long)]
        service: String,
        #[arg(long)]
        module: String,
        #[arg(long, action = clap::ArgAction::Set)]
        enabled: bool,
    },
    /// Ask a station's supervisor to restart a watched target.
    RestartTarget {
        #[arg(long)]
        service: String,
        #[arg(long)]
        target: String,
    },
    /// Sign a filter spec (JSON file) with the repository's trust key.
    SignFilter { #[arg(long)] spec: PathBuf },
    /// Sign a filter spec and deploy it to a station.
    DeployFilter {
        #[arg(long)]
        service: String,
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn park() -> ! {
    loop {
        std::thread::park();
    }
}

fn print_reply(reply: &Reply) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(&reply.body)?);
    if !reply.ok() {
        bail!("request failed with status {}", reply.status);
    }
    Ok(())
}

fn read_spec(path: &PathBuf) -> anyhow::Result<FilterSpec> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    Ok(serde_json::from_str(&text)?)
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    match Cli::parse().cmd {
        Cmd::RunRegistry { config } => {
            let server = RegistryServer::start(RegistryFile::load(config)?.server_config(), clock)?;
            eprintln!("registry listening on {}", server.endpoint());
            park()
        }
        Cmd::RunStation { config } => {
            let station = Station::start(StationConfig::load(config)?, StationParts::default(), clock)?;
            eprintln!("station {} listening on {}", station.service_id(), station.endpoint());
            park()
        }
        Cmd::RunRepo { config } => {
            let repo = Repository::start(RepoConfig::load(config)?, clock)?;
            eprintln!("repository serving {}", repo.url());
            park()
        }
        Cmd::RunScenario {
            config,
            duration,
            time_factor,
            seed,
            report,
        } => {
            let mut cfg = match config {
                Some(path) => ScenarioConfig::load(path)?,
                None => ScenarioConfig::from_toml(REFERENCE_CONFIG)?,
            };
            cfg.duration_ms = duration.unwrap_or(cfg.duration_ms);
            cfg.time_factor = time_factor.unwrap_or(cfg.time_factor);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let out = serde_json::to_string_pretty(&run_scenario(cfg)?)?;
            match report {
                Some(path) => std::fs::write(path, out + "\n")?,
                None => println!("{out}"),
            }
            Ok(())
        }
        Cmd::ReferenceConfig => {
            print!("{REFERENCE_CONFIG}");
            Ok(())
        }
        Cmd::Admin { url, token, op } => {
            let client = AdminClient::new(url, token);
            let reply = match op {
                AdminOp::ModuleToggle { service, module, enabled } => client.module_toggle(&service, &module, enabled)?,
                AdminOp::RestartTarget { service, target } => client.restart_target(&service, &target)?,
                AdminOp::SignFilter { spec } => client.sign_filter(&read_spec(&spec)?)?,
                AdminOp::DeployFilter { service, spec } => {
                    let signed = client.sign_filter(&read_spec(&spec)?)?;
                    if !signed.ok() {
                        return print_reply(&signed);
                    }
                    client.deploy_filter(&service, &signed.body)?
                }
            };
            print_reply(&reply)
        }
        Cmd::Export { store, format, bins } => {
            let store = Store::open(&store, RetentionPolicy::default())?;
            let out = std::io::stdout().lock();
            match (format, bins) {
                (Format::Csv, false) => store.export_raw_csv(out)?,
                (Format::Csv, true) => store.export_bins_csv(out)?,
                (Format::Json, false) => {
                    let values = store.query_raw(&Predicate::any(), 0, u64::MAX)?;
                    serde_json::to_writer_pretty(out, &values)?;
                    println!();
                }
                (Format::Json, true) => bail!("bins are exported as CSV only"),
            }
            Ok(())
        }
    }
}
