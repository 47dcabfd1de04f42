//! Rendezvous broker: registry, sessions, signaling relay and subject routing
//! behind one WebSocket endpoint at `/ws`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use servicenet::broker::{serve, Broker, BrokerConfig, DEFAULT_POOL_CAP};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "servicenet-broker", version, about = "ServiceNet rendezvous broker")]
struct Args {
    /// Address to accept WebSocket connections on.
    #[arg(long, env = "SERVICENET_LISTEN", default_value = "127.0.0.1:7400")]
    listen: SocketAddr,
    /// SQLite file for the peer registry; in memory when omitted.
    #[arg(long, env = "SERVICENET_DB_PATH")]
    db_path: Option<PathBuf>,
    /// Registry queries allowed in flight at once.
    #[arg(long, env = "SERVICENET_DB_POOL_CAP", default_value_t = DEFAULT_POOL_CAP)]
    db_pool_cap: usize,
    /// Extra time each registry query holds its pool slot.
    #[arg(long, env = "SERVICENET_DB_DELAY_MS", default_value_t = 0)]
    db_delay_ms: u64,
    /// Expected client ping interval; silent sessions go after three.
    #[arg(long, env = "SERVICENET_HEARTBEAT_SECS", default_value_t = 15)]
    heartbeat_secs: u64,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    if args.db_pool_cap == 0 || args.heartbeat_secs == 0 {
        return Err("--db-pool-cap and --heartbeat-secs must be positive".into());
    }
    let config = BrokerConfig {
        db_path: args.db_path,
        pool_cap: args.db_pool_cap,
        db_delay: Duration::from_millis(args.db_delay_ms),
        heartbeat: Duration::from_secs(args.heartbeat_secs),
        ..Default::default()
    };
    let server = serve(Broker::open(config)?, args.listen).await?;
    tracing::info!(url = %server.url(), "broker listening");
    println!("{}", server.url());
    tokio::signal::ctrl_c().await?;
    tracing::info!("shutting down");
    server.shutdown().await;
    Ok(())
}
