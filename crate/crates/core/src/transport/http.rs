//! HTTP adapter for the generic microblog wire schema.
//!
//! | request | response |
//! |---|---|
//! | `GET {base}/mentions?since_id=N` | `{"messages":[...]}` ascending by id |
//! | `GET {base}/direct_messages?since_id=N` | same envelope |
//! | `POST {base}/statuses` `{"text","in_reply_to"}` | `{"id":N}` |
//! | `POST {base}/direct_messages` `{"recipient","text"}` | `{"id":N}` |
//! | `GET {base}/stream` | newline-delimited message objects with `"channel"` |
//!
//! HTTP 429 maps to `RateLimited`, connection failures to `Unavailable`.

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use futures::StreamExt;
use parking_lot::Mutex;
use reqwest::{Client, Response, StatusCode};
use tokio::sync::mpsc;
use tracing::{debug, warn};

use super::{
    ApiFamily, BudgetConfig, MessageStream, PollCursor, RateLimits, Transport, TransportError,
    WireDirectMessage, WireEnvelope, WireMessage, WirePosted, WireStatus,
};
use crate::dispatch::OutboundReply;
use crate::domain::{Channel, InboundMessage};

type StreamSender = mpsc::UnboundedSender<Result<InboundMessage, TransportError>>;

pub struct HttpTransport {
    client: Client,
    base: String,
    base_account: String,
    limits: RateLimits,
    stream: Mutex<Option<StreamSender>>,
}

impl HttpTransport {
    pub fn new(base_url: &url::Url, base_account: &str, budgets: BudgetConfig) -> Self {
        HttpTransport {
            client: Client::new(),
            base: base_url.as_str().trim_end_matches('/').to_string(),
            base_account: base_account.trim_start_matches('@').to_string(),
            limits: RateLimits::new(budgets, Utc::now()),
            stream: Mutex::new(None),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base, path)
    }

    fn channel_path(channel: Channel) -> &'static str {
        match channel {
            Channel::Mention => "mentions",
            Channel::DirectMessage => "direct_messages",
        }
    }

    async fn check(
        family: ApiFamily,
        result: reqwest::Result<Response>,
    ) -> Result<Response, TransportError> {
        let response = result.map_err(|e| TransportError::Unavailable(e.to_string()))?;
        match response.status() {
            StatusCode::TOO_MANY_REQUESTS => Err(TransportError::RateLimited(family)),
            s if s.is_success() => Ok(response),
            s => Err(TransportError::Unavailable(format!("HTTP {s}"))),
        }
    }
}

fn parse_line(line: &[u8]) -> Option<Result<InboundMessage, TransportError>> {
    let line = std::str::from_utf8(line).ok()?.trim();
    if line.is_empty() {
        return None;
    }
    let parsed = serde_json::from_str::<WireMessage>(line)
        .map_err(|e| TransportError::Protocol(e.to_string()))
        .and_then(|w| match w.channel {
            Some(channel) => w.into_message(channel),
            None => Err(TransportError::Protocol("stream message without channel".into())),
        });
    Some(parsed)
}

#[async_trait]
impl Transport for HttpTransport {
    fn base_account(&self) -> &str {
        &self.base_account
    }

    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn limits(&self) -> &RateLimits {
        &self.limits
    }

    async fn poll_new(
        &self,
        cursor: PollCursor,
    ) -> Result<(Vec<InboundMessage>, PollCursor), TransportError> {
        self.limits.acquire(ApiFamily::Rest, self.now())?;
        let url = self.url(Self::channel_path(cursor.channel));
        let response = Self::check(
            ApiFamily::Rest,
            self.client
                .get(url)
                .query(&[("since_id", cursor.since_id)])
                .send()
                .await,
        )
        .await?;
        let envelope: WireEnvelope = response
            .json()
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        let mut messages = envelope
            .messages
            .into_iter()
            .filter(|m| m.id > cursor.since_id)
            .map(|m| m.into_message(cursor.channel))
            .collect::<Result<Vec<_>, _>>()?;
        messages.sort_by_key(|m| m.id);
        let mut next = cursor;
        if let Some(last) = messages.last() {
            next.advance(last.id);
        }
        Ok((messages, next))
    }

    async fn open_stream(&self) -> Result<MessageStream, TransportError> {
        {
            let slot = self.stream.lock();
            if slot.as_ref().is_some_and(|tx| !tx.is_closed()) {
                return Err(TransportError::AlreadyStreaming);
            }
        }
        self.limits.acquire(ApiFamily::Streaming, self.now())?;
        let response = Self::check(
            ApiFamily::Streaming,
            self.client.get(self.url("stream")).send().await,
        )
        .await?;
        let (tx, rx) = mpsc::unbounded_channel();
        *self.stream.lock() = Some(tx.clone());
        let reader = tokio::spawn(async move {
            let mut body = response.bytes_stream();
            let mut buf: Vec<u8> = Vec::new();
            while let Some(chunk) = body.next().await {
                let chunk = match chunk {
                    Ok(c) => c,
                    Err(e) => {
                        let _ = tx.send(Err(TransportError::Unavailable(e.to_string())));
                        return;
                    }
                };
                buf.extend_from_slice(&chunk);
                while let Some(pos) = buf.iter().position(|b| *b == b'\n') {
                    let line: Vec<u8> = buf.drain(..=pos).collect();
                    if let Some(item) = parse_line(&line) {
                        if let Err(e) = &item {
                            warn!(error = %e, "skipping malformed stream line");
                            continue;
                        }
                        if tx.send(item).is_err() {
                            return;
                        }
                    }
                }
            }
            debug!("stream ended by server");
        });
        Ok(MessageStream::with_reader(rx, reader))
    }

    async fn post_reply(&self, reply: &OutboundReply) -> Result<u64, TransportError> {
        self.limits.acquire(ApiFamily::Rest, self.now())?;
        let request = match reply.channel {
            Channel::Mention => self.client.post(self.url("statuses")).json(&WireStatus {
                text: reply.text.clone(),
                in_reply_to: reply.in_reply_to,
            }),
            Channel::DirectMessage => {
                self.client
                    .post(self.url("direct_messages"))
                    .json(&WireDirectMessage {
                        recipient: reply.recipient.to_string(),
                        text: reply.text.clone(),
                    })
            }
        };
        let response = Self::check(ApiFamily::Rest, request.send().await).await?;
        let posted: WirePosted = response
            .json()
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        Ok(posted.id)
    }
}
