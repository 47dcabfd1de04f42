//! Local WebSocket control API served at `/app`.
//!
//! Clients send command frames `{"id": …, "cmd": "…", …}` and receive one
//! `RESULT` frame per command plus unsolicited `EVENT` frames.

use std::net::SocketAddr;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;

use super::filter::Filter;
use super::node::{NodeError, NodeEvent, PeerNode, WantedDraft};
use super::records::Money;
use crate::client::LinkStatus;
use crate::model::{GeoPoint, MsgId, Pid};
use crate::protocol::ErrorCode;

pub const CONTROL_PATH: &str = "/app";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Status,
    PostWanted {
        category: String,
        #[serde(default)]
        description: String,
        #[serde(default)]
        location: Option<GeoPoint>,
        #[serde(default)]
        remote_capable: bool,
        budget: String,
    },
    Watch {
        pattern: String,
    },
    SetFilters {
        #[serde(default)]
        inbound: Option<Vec<Filter>>,
        #[serde(default)]
        outbound: Option<Vec<Filter>>,
    },
    MyWanted,
    Inbox,
    Quote {
        wanted_id: MsgId,
        price: String,
        #[serde(default)]
        note: String,
    },
    Quotes {
        wanted_id: MsgId,
    },
    Accept {
        quote_id: MsgId,
    },
    CloseWanted {
        wanted_id: MsgId,
    },
    ChatSend {
        peer: Pid,
        body: String,
    },
    ChatHistory {
        peer: Pid,
    },
    ChatSync {
        peer: Pid,
    },
    Rate {
        ratee: Pid,
        score: i64,
        #[serde(default)]
        comment: String,
    },
    Rating {
        pid: Pid,
    },
    GatewayStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub detail: String,
}

/// Frames the control server sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlFrame {
    Result {
        id: Value,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ApiError>,
    },
    Event {
        event: NodeEvent,
    },
    /// Events were dropped because this client fell behind.
    Lagged {
        missed: u64,
    },
}

impl ControlFrame {
    fn ok(id: Value, data: Value) -> Self {
        ControlFrame::Result {
            id,
            ok: true,
            data: Some(data),
            error: None,
        }
    }

    fn err(id: Value, code: ErrorCode, detail: impl Into<String>) -> Self {
        ControlFrame::Result {
            id,
            ok: false,
            data: None,
            error: Some(ApiError {
                code,
                detail: detail.into(),
            }),
        }
    }
}

fn to_json<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("api values serialize")
}

fn money(s: &str) -> Result<Money, NodeError> {
    s.parse().map_err(|e: super::records::RecordError| NodeError::Validation(e.to_string()))
}

/// Run one command against the node.
pub async fn execute(node: &Arc<PeerNode>, cmd: Command) -> Result<Value, NodeError> {
    Ok(match cmd {
        Command::Status => {
            let id = node.identity();
            let online = *node.client().status().borrow() == LinkStatus::Open;
            to_json(serde_json::json!({
                "pid": id.pid,
                "nickname": id.nickname,
                "tid": node.client().session().map(|s| s.tid),
                "online": online,
                "broker": node.client().url(),
                "location": node.gateway().profile().location,
                "inbound": node.gateway().inbound_filters(),
                "outbound": node.gateway().outbound_filters(),
            }))
        }
        Command::PostWanted {
            category,
            description,
            location,
            remote_capable,
            budget,
        } => to_json(
            node.publish_wanted(WantedDraft {
                category,
                description,
                location,
                remote_capable,
                budget: money(&budget)?,
            })
            .await?,
        ),
        Command::Watch { pattern } => to_json(serde_json::json!({ "sid": node.watch(&pattern).await? })),
        Command::SetFilters { inbound, outbound } => {
            if let Some(f) = inbound {
                node.gateway().set_inbound(f);
            }
            if let Some(f) = outbound {
                node.gateway().set_outbound(f);
            }
            to_json(serde_json::json!({
                "inbound": node.gateway().inbound_filters(),
                "outbound": node.gateway().outbound_filters(),
            }))
        }
        Command::MyWanted => to_json(node.my_wanted()?),
        Command::Inbox => to_json(node.inbox()?),
        Command::Quote { wanted_id, price, note } => to_json(node.submit_quote(wanted_id, money(&price)?, &note).await?),
        Command::Quotes { wanted_id } => to_json(node.list_quotes(&wanted_id)?),
        Command::Accept { quote_id } => {
            // The award stands even when the winner cannot be reached yet.
            let quote = node.award(quote_id).await?;
            match node.session_with(&quote.provider).await {
                Ok(s) => to_json(serde_json::json!({
                    "quote": quote,
                    "peer": s.remote(),
                    "session_id": s.id(),
                    "state": s.state().to_string(),
                })),
                Err(e) => to_json(serde_json::json!({
                    "quote": quote,
                    "peer": quote.provider,
                    "session_id": null,
                    "session_error": ApiError { code: e.code(), detail: e.to_string() },
                })),
            }
        }
        Command::CloseWanted { wanted_id } => to_json(node.close_wanted(&wanted_id)?),
        Command::ChatSend { peer, body } => to_json(node.chat(&peer, &body).await?),
        Command::ChatHistory { peer } => to_json(node.chat_history(&peer)?),
        Command::ChatSync { peer } => to_json(node.sync_chat(&peer).await?),
        Command::Rate { ratee, score, comment } => to_json(node.rate_peer(&ratee, score, &comment).await?),
        Command::Rating { pid } => to_json(serde_json::json!({ "pid": pid, "mean": node.mean_rating(&pid)? })),
        Command::GatewayStats => to_json(node.gateway().snapshot()),
    })
}

/// Parse and run one text frame.
pub async fn handle_text(node: &Arc<PeerNode>, text: &str) -> ControlFrame {
    let raw: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return ControlFrame::err(Value::Null, ErrorCode::BadFrame, e.to_string()),
    };
    let Value::Object(mut obj) = raw else {
        return ControlFrame::err(Value::Null, ErrorCode::BadFrame, "expected an object");
    };
    let id = obj.remove("id").unwrap_or(Value::Null);
    let cmd: Command = match serde_json::from_value(Value::Object(obj)) {
        Ok(c) => c,
        Err(e) => return ControlFrame::err(id, ErrorCode::BadFrame, e.to_string()),
    };
    match execute(node, cmd).await {
        Ok(data) => ControlFrame::ok(id, data),
        Err(e) => ControlFrame::err(id, e.code(), e.to_string()),
    }
}

/// A running control endpoint. Dropping it stops accepting clients.
pub struct ControlServer {
    addr: SocketAddr,
    stop: watch::Sender<bool>,
    task: Option<JoinHandle<()>>,
}

impl ControlServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}{CONTROL_PATH}", self.addr)
    }

    pub async fn shutdown(mut self) {
        let _ = self.stop.send(true);
        if let Some(t) = self.task.take() {
            let _ = t.await;
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
    }
}

pub async fn serve_control(node: Arc<PeerNode>, listen: SocketAddr) -> std::io::Result<ControlServer> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let (stop, mut stopped) = watch::channel(false);
    let stop_rx = stopped.clone();
    let task = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = stopped.changed() => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, _)) => {
                        tokio::spawn(handle_conn(node.clone(), stream, stop_rx.clone()));
                    }
                    Err(e) => tracing::warn!("control accept failed: {e}"),
                },
            }
        }
    });
    Ok(ControlServer {
        addr,
        stop,
        task: Some(task),
    })
}

fn check_path(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == CONTROL_PATH {
        Ok(resp)
    } else {
        let mut err = ErrorResponse::new(Some("not found".into()));
        *err.status_mut() = StatusCode::NOT_FOUND;
        Err(err)
    }
}

async fn handle_conn(node: Arc<PeerNode>, stream: TcpStream, mut stop: watch::Receiver<bool>) {
    let Ok(ws) = tokio_tungstenite::accept_hdr_async(stream, check_path).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ControlFrame>();
    let mut events = node.events();

    let writer = tokio::spawn(async move {
        loop {
            let frame = tokio::select! {
                f = rx.recv() => match f {
                    Some(f) => f,
                    None => break,
                },
                ev = events.recv() => match ev {
                    Ok(event) => ControlFrame::Event { event },
                    Err(broadcast::error::RecvError::Lagged(missed)) => ControlFrame::Lagged { missed },
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            let text = serde_json::to_string(&frame).expect("control frames serialize");
            if sink.send(Message::text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    loop {
        let msg = tokio::select! {
            _ = stop.changed() => break,
            m = source.next() => match m {
                Some(Ok(m)) => m,
                _ => break,
            },
        };
        match msg {
            Message::Text(text) => {
                // Commands run concurrently so a slow accept never stalls events.
                let node = node.clone();
                let tx = tx.clone();
                tokio::spawn(async move {
                    let _ = tx.send(handle_text(&node, text.as_str()).await);
                });
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    drop(tx);
    writer.abort();
}
