//! Peer core command line. Every command logs in with the identity kept in
//! `--store`, prints line-delimited JSON on stdout and exits; `watch` and
//! `serve` stay up until interrupted.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use servicenet::model::{GeoPoint, MsgId, Pid};
use servicenet::p2p::P2pConfig;
use servicenet::peer::control::{execute, serve_control, Command};
use servicenet::peer::{Filter, NodeError, NodeEvent, PeerConfig, PeerNode, Predicate, DEFAULT_RADIUS_KM};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::sync::broadcast::error::RecvError;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "servicenet-peer", version, about = "ServiceNet peer core")]
struct Cli {
    /// Broker WebSocket URL.
    #[arg(long, global = true, env = "SERVICENET_BROKER", default_value = "ws://127.0.0.1:7400/ws")]
    broker: String,
    /// Directory holding this peer's database and identity.
    #[arg(long, global = true, env = "SERVICENET_STORE", default_value = "./peer-store")]
    store: PathBuf,
    /// Inbound filter `<pattern>[;pred…]`, e.g. `svc.request.>;within_km=25`.
    #[arg(long = "filter", global = true)]
    filters: Vec<Filter>,
    /// Outbound filter; publishing is unrestricted when none is given.
    #[arg(long = "out-filter", global = true)]
    out_filters: Vec<Filter>,
    /// This peer's position as `lat,lon`.
    #[arg(long, global = true, value_parser = parse_point, allow_hyphen_values = true)]
    location: Option<GeoPoint>,
    /// Never offer direct connections; chat goes through the broker relay.
    #[arg(long, global = true)]
    relay_only: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Create an identity and save it in the store.
    Register {
        #[arg(long)]
        email: String,
        #[arg(long)]
        nickname: String,
    },
    /// Log in and print the session status.
    Login,
    /// Publish a service request.
    PostWanted {
        #[arg(long)]
        category: String,
        /// Amount with optional currency, e.g. `40.00 USD`.
        #[arg(long)]
        budget: String,
        #[arg(long, default_value = "")]
        description: String,
        /// The job can be done from anywhere.
        #[arg(long)]
        remote: bool,
        /// Stay online this many seconds to print incoming quotes.
        #[arg(long, default_value_t = 0)]
        wait: u64,
    },
    /// Stream requests matching a subject pattern.
    Watch {
        pattern: String,
        /// Stop after this many seconds; 0 runs until interrupted.
        #[arg(long = "for", default_value_t = 0)]
        duration: u64,
    },
    /// Quote on a request seen earlier by `watch`.
    Quote {
        wanted_id: MsgId,
        #[arg(long)]
        price: String,
        #[arg(long, default_value = "")]
        note: String,
        #[arg(long, default_value_t = 0)]
        wait: u64,
    },
    /// List quotes on one of our requests, best first.
    Quotes { wanted_id: MsgId },
    /// Award a request and open a session with the provider.
    Accept {
        quote_id: MsgId,
        #[arg(long, default_value_t = 0)]
        wait: u64,
    },
    /// Chat with a peer. Sends `--message` or each stdin line.
    Chat {
        peer: Pid,
        #[arg(long)]
        message: Option<String>,
        #[arg(long, default_value_t = 0)]
        wait: u64,
    },
    /// Rate a peer from 1 to 5.
    Rate {
        ratee: Pid,
        #[arg(long)]
        score: i64,
        #[arg(long, default_value = "")]
        comment: String,
    },
    /// Serve the local control API for the web client.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7401")]
        control: SocketAddr,
    },
}

fn parse_point(s: &str) -> Result<GeoPoint, String> {
    let (lat, lon) = s.split_once(',').ok_or("expected lat,lon")?;
    let lat: f64 = lat.trim().parse().map_err(|e| format!("latitude: {e}"))?;
    let lon: f64 = lon.trim().parse().map_err(|e| format!("longitude: {e}"))?;
    GeoPoint::new(lat, lon).map_err(|e| e.to_string())
}

fn emit(v: &Value) {
    println!("{v}");
}

fn fail(e: &NodeError) -> ExitCode {
    eprintln!("{}", json!({ "error": { "code": e.code(), "detail": e.to_string() } }));
    ExitCode::FAILURE
}

/// Print events until `secs` elapse (0: until interrupted).
async fn linger(node: &Arc<PeerNode>, secs: u64, forever_if_zero: bool) {
    if secs == 0 && !forever_if_zero {
        return;
    }
    let mut rx = node.events();
    let deadline = async {
        if secs == 0 {
            std::future::pending::<()>().await
        } else {
            tokio::time::sleep(Duration::from_secs(secs)).await
        }
    };
    tokio::pin!(deadline);
    loop {
        tokio::select! {
            _ = &mut deadline => break,
            _ = tokio::signal::ctrl_c() => break,
            ev = rx.recv() => match ev {
                Ok(ev) => print_event(&ev),
                Err(RecvError::Lagged(n)) => emit(&json!({ "lagged": n })),
                Err(RecvError::Closed) => break,
            },
        }
    }
}

fn print_event(ev: &NodeEvent) {
    emit(&json!({ "event": ev }));
}

async fn run(cli: Cli) -> Result<(), NodeError> {
    let mut config = PeerConfig::new(cli.broker, cli.store);
    config.outbound = cli.out_filters;
    config.location = cli.location;
    if cli.relay_only {
        config.p2p = P2pConfig::relay_only();
    }
    let mut inbound = cli.filters;
    if let Cmd::Watch { pattern, .. } = &cli.command {
        if inbound.is_empty() {
            let f: Filter = pattern
                .parse()
                .map_err(|e: servicenet::peer::filter::FilterError| NodeError::Validation(e.to_string()))?;
            inbound.push(f.with(Predicate::within_km(DEFAULT_RADIUS_KM)));
        }
    }
    config.inbound = inbound;

    let node = match &cli.command {
        Cmd::Register { email, nickname } => PeerNode::register(config, email, nickname).await?,
        _ => PeerNode::login(config).await?,
    };
    let result = dispatch(&node, cli.command).await;
    node.shutdown().await;
    result
}

async fn dispatch(node: &Arc<PeerNode>, cmd: Cmd) -> Result<(), NodeError> {
    let once = |c| execute(node, c);
    match cmd {
        Cmd::Register { .. } | Cmd::Login => emit(&once(Command::Status).await?),
        Cmd::PostWanted {
            category,
            budget,
            description,
            remote,
            wait,
        } => {
            let location = node.gateway().profile().location;
            emit(
                &once(Command::PostWanted {
                    category,
                    description,
                    location,
                    remote_capable: remote,
                    budget,
                })
                .await?,
            );
            linger(node, wait, false).await;
        }
        Cmd::Watch { pattern, duration } => {
            emit(&once(Command::Watch { pattern }).await?);
            linger(node, duration, true).await;
        }
        Cmd::Quote {
            wanted_id,
            price,
            note,
            wait,
        } => {
            emit(&once(Command::Quote { wanted_id, price, note }).await?);
            linger(node, wait, false).await;
        }
        Cmd::Quotes { wanted_id } => {
            let Value::Array(rows) = once(Command::Quotes { wanted_id }).await? else {
                unreachable!("quotes are a list")
            };
            rows.iter().for_each(emit);
        }
        Cmd::Accept { quote_id, wait } => {
            emit(&once(Command::Accept { quote_id }).await?);
            linger(node, wait, false).await;
        }
        Cmd::Chat { peer, message, wait } => {
            emit(&once(Command::ChatSync { peer: peer.clone() }).await?);
            match message {
                Some(body) => emit(&once(Command::ChatSend { peer, body }).await?),
                None => chat_stdin(node, peer).await?,
            }
            linger(node, wait, false).await;
        }
        Cmd::Rate { ratee, score, comment } => emit(&once(Command::Rate { ratee, score, comment }).await?),
        Cmd::Serve { control } => {
            let server = serve_control(node.clone(), control)
                .await
                .map_err(|e| NodeError::State(format!("control listener: {e}")))?;
            emit(&json!({ "control": server.url(), "pid": node.pid() }));
            let _ = tokio::signal::ctrl_c().await;
            server.shutdown().await;
        }
    }
    Ok(())
}

/// Send each stdin line, printing incoming messages until EOF.
async fn chat_stdin(node: &Arc<PeerNode>, peer: Pid) -> Result<(), NodeError> {
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    let mut rx = node.events();
    loop {
        tokio::select! {
            line = lines.next_line() => match line {
                Ok(Some(body)) if body.trim().is_empty() => {}
                Ok(Some(body)) => emit(&execute(node, Command::ChatSend { peer: peer.clone(), body }).await?),
                _ => return Ok(()),
            },
            ev = rx.recv() => match ev {
                Ok(ev @ NodeEvent::Chat { .. }) => print_event(&ev),
                Ok(_) | Err(RecvError::Lagged(_)) => {}
                Err(RecvError::Closed) => return Ok(()),
            },
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
