use std::net::SocketAddr;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;

use super::{Broker, BrokerError, ConnHandle, Outbound};
use crate::model::{DeviceUuid, MsgId, Pid, Tid};
use crate::protocol::{salvage_seq, ClientFrame, ErrorCode, ServerFrame};
use crate::pubsub::{Envelope, Subject};

/// A running broker endpoint. Dropping it stops the accept loop; live
/// connections are closed when their next read returns.
pub struct BrokerServer {
    broker: Arc<Broker>,
    addr: SocketAddr,
    stop: watch::Sender<bool>,
    task: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}/ws", self.addr)
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub async fn shutdown(mut self) {
        let _ = self.stop.send(true);
        if let Some(t) = self.task.take() {
            let _ = t.await;
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
    }
}

pub async fn serve(broker: Arc<Broker>, listen: SocketAddr) -> std::io::Result<BrokerServer> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let (stop, mut stopped) = watch::channel(false);
    let b = broker.clone();
    let stop_rx = stopped.clone();
    let task = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = stopped.changed() => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nodelay(true);
                        tokio::spawn(handle_conn(b.clone(), stream, peer, stop_rx.clone()));
                    }
                    Err(e) => tracing::warn!("accept failed: {e}"),
                },
            }
        }
    });
    Ok(BrokerServer {
        broker,
        addr,
        stop,
        task: Some(task),
    })
}

fn check_path(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == "/ws" {
        Ok(resp)
    } else {
        let mut err = ErrorResponse::new(Some("not found".into()));
        *err.status_mut() = StatusCode::NOT_FOUND;
        Err(err)
    }
}

async fn handle_conn(broker: Arc<Broker>, stream: TcpStream, peer: SocketAddr, mut stop: watch::Receiver<bool>) {
    let ws = match tokio_tungstenite::accept_hdr_async(stream, check_path).await {
        Ok(ws) => ws,
        Err(e) => {
            tracing::debug!("handshake with {peer} failed: {e}");
            return;
        }
    };
    let (mut sink, mut source) = ws.split();
    let (conn, mut rx) = ConnHandle::new();

    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Outbound::Frame(frame) => {
                    let text = serde_json::to_string(&frame).expect("server frames serialize");
                    if sink.send(Message::text(text)).await.is_err() {
                        break;
                    }
                }
                Outbound::Close => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            }
        }
        let _ = sink.close().await;
    });

    let reap_after = broker.config().reap_after();
    loop {
        let next = tokio::select! {
            _ = stop.changed() => break,
            n = tokio::time::timeout(reap_after, source.next()) => n,
        };
        let msg = match next {
            Err(_) => {
                tracing::debug!("reaping silent connection from {peer}");
                break;
            }
            Ok(None) | Ok(Some(Err(_))) => break,
            Ok(Some(Ok(m))) => m,
        };
        match msg {
            Message::Text(text) => {
                let reply = handle_text(&broker, &conn, text.as_str()).await;
                if let Some(frame) = reply {
                    if !conn.send(frame) {
                        break;
                    }
                }
            }
            Message::Binary(_) => {
                conn.send(ServerFrame::error(ErrorCode::BadFrame, None, "binary frames are not accepted"));
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    broker.drop_connection(conn.id());
    conn.close();
    drop(conn);
    let _ = writer.await;
}

async fn handle_text(broker: &Broker, conn: &ConnHandle, text: &str) -> Option<ServerFrame> {
    let frame: ClientFrame = match serde_json::from_str(text) {
        Ok(f) => f,
        Err(e) => return Some(ServerFrame::error(ErrorCode::BadFrame, salvage_seq(text), e.to_string())),
    };
    let seq = frame.seq();
    Some(match dispatch(broker, conn, frame).await {
        Ok(reply) => reply,
        Err(e) => e.to_frame(seq),
    })
}

fn parse<T: std::str::FromStr>(what: &str, raw: &str) -> Result<T, BrokerError> {
    raw.parse().map_err(|_| BrokerError::Validation(format!("invalid {what}: {raw:?}")))
}

fn session(broker: &Broker, conn: &ConnHandle, claimed: Option<&str>) -> Result<Tid, BrokerError> {
    let tid = broker.session_of_conn(conn.id()).ok_or(BrokerError::Session)?;
    match claimed {
        Some(raw) if parse::<Tid>("tid", raw).ok() != Some(tid) => Err(BrokerError::Session),
        _ => Ok(tid),
    }
}

async fn dispatch(broker: &Broker, conn: &ConnHandle, frame: ClientFrame) -> Result<ServerFrame, BrokerError> {
    match frame {
        ClientFrame::Register {
            seq,
            email,
            nickname,
            uuid,
        } => {
            let uuid: DeviceUuid = parse("uuid", &uuid)?;
            let out = broker.register(conn, &email, &nickname, uuid).await?;
            Ok(ServerFrame::Registered {
                seq,
                pid: out.pid,
                tid: out.tid,
            })
        }
        ClientFrame::Login { seq, credential, uuid } => {
            let uuid: DeviceUuid = parse("uuid", &uuid)?;
            let out = broker.login(conn, &credential, uuid).await?;
            Ok(ServerFrame::LoggedIn {
                seq,
                pid: out.pid,
                tid: out.tid,
            })
        }
        ClientFrame::FetchPeers {
            seq,
            tid,
            include_offline,
        } => {
            let tid = session(broker, conn, tid.as_deref())?;
            let peers = broker.fetch_peers(&tid, include_offline)?;
            Ok(ServerFrame::Peers { seq, peers })
        }
        ClientFrame::Signal { seq, to, payload } => {
            let tid = session(broker, conn, None)?;
            let to: Pid = parse("pid", &to)?;
            broker.relay_signal(&tid, &to, payload)?;
            Ok(ServerFrame::Ack { seq })
        }
        ClientFrame::Relay { seq, to, session: sess, data } => {
            let tid = session(broker, conn, None)?;
            let to: Pid = parse("pid", &to)?;
            broker.relay_data(&tid, &to, sess, data)?;
            Ok(ServerFrame::Ack { seq })
        }
        ClientFrame::Disconnect { seq } => {
            if let Some(tid) = broker.session_of_conn(conn.id()) {
                broker.disconnect(&tid);
            }
            Ok(ServerFrame::Bye { seq })
        }
        ClientFrame::Ping { seq } => Ok(ServerFrame::Pong { seq }),
        ClientFrame::Sub { seq, pattern } => {
            let tid = session(broker, conn, None)?;
            let sid = broker.subscribe(&tid, &pattern)?;
            Ok(ServerFrame::Subscribed { seq, sid })
        }
        ClientFrame::Unsub { seq, sid } => {
            let tid = session(broker, conn, None)?;
            broker.unsubscribe(&tid, sid)?;
            Ok(ServerFrame::Ack { seq })
        }
        ClientFrame::Pub {
            seq,
            subject,
            attrs,
            payload_b64,
            id,
            sender,
        } => {
            let tid = session(broker, conn, None)?;
            let own = broker.sessions.read().by_tid.get(&tid).cloned().ok_or(BrokerError::Session)?;
            let subject: Subject = subject.parse().map_err(|e| BrokerError::Validation(format!("{e}")))?;
            let payload = B64
                .decode(payload_b64.as_bytes())
                .map_err(|e| BrokerError::Validation(format!("payload_b64: {e}")))?;
            let sender = match sender {
                Some(raw) => parse::<Pid>("sender", &raw)?,
                None => own,
            };
            let mut env = Envelope::new(subject, sender, attrs, payload);
            if let Some(raw) = id {
                env.id = parse::<MsgId>("id", &raw)?;
            }
            let delivered = broker.publish(&tid, env)?;
            Ok(ServerFrame::Published { seq, delivered })
        }
    }
}
