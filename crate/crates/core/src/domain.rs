//! Message grammar and the core value types shared by every other module.
//!
//! An inbound message addressed to the base account has the shape
//! `Key Optional_Text`. The key selects a registered service; the rest of the
//! text is forwarded to that service untouched.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;
use url::Url;

/// Upper bound on inbound text, in Unicode scalar values.
pub const MAX_INBOUND_SCALARS: usize = 1000;

/// Upper bound on key length after normalization.
pub const MAX_KEY_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("rejected key {0:?}: keys are 1-16 characters from [a-z0-9_]")]
    RejectedKey(String),
    #[error("invalid handle {0:?}")]
    InvalidHandle(String),
    #[error("invalid webhook {url:?}: {reason}")]
    InvalidWebhook { url: String, reason: String },
    #[error("message id must be positive")]
    ZeroId,
}

/// How a message reached the base account.
///
/// Mentions are public statuses, so replies to them are publicly visible.
/// Direct messages and their replies stay private between the two accounts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Mention,
    DirectMessage,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Mention, Channel::DirectMessage];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Mention => "mention",
            Channel::DirectMessage => "direct_message",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        match s.to_ascii_lowercase().as_str() {
            "mention" => Some(Channel::Mention),
            "direct_message" | "dm" => Some(Channel::DirectMessage),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An account name without the leading `@`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Handle(String);

impl Handle {
    /// Accepts `abava` or `@abava`; rejects empty names and names with whitespace.
    pub fn new(raw: &str) -> Result<Handle, DomainError> {
        let name = raw.strip_prefix('@').unwrap_or(raw);
        if name.is_empty() || name.chars().any(char::is_whitespace) || name.starts_with('@') {
            return Err(DomainError::InvalidHandle(raw.to_string()));
        }
        Ok(Handle(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `@name`
    pub fn mention(&self) -> String {
        format!("@{}", self.0)
    }
}

impl TryFrom<String> for Handle {
    type Error = DomainError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Handle::new(&value)
    }
}

impl From<Handle> for String {
    fn from(h: Handle) -> String {
        h.0
    }
}

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Handle {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// A normalized service key: lowercase, `[a-z0-9_]{1,16}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Key(String);

impl Key {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub(crate) fn is_normalized(s: &str) -> bool {
        (1..=MAX_KEY_LEN).contains(&s.len())
            && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
    }
}

impl TryFrom<String> for Key {
    type Error = DomainError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        normalize_key(&value)
    }
}

impl From<Key> for String {
    fn from(k: Key) -> String {
        k.0
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for Key {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Key {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Lowercases ASCII letters and accepts the result iff it matches `[a-z0-9_]{1,16}`.
pub fn normalize_key(raw: &str) -> Result<Key, DomainError> {
    let lowered = raw.to_ascii_lowercase();
    if Key::is_normalized(&lowered) {
        Ok(Key(lowered))
    } else {
        Err(DomainError::RejectedKey(raw.to_string()))
    }
}

/// One mention or direct message received by the base account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboundMessage {
    pub id: u64,
    pub author: Handle,
    pub text: String,
    pub channel: Channel,
    pub received_at: DateTime<Utc>,
}

impl InboundMessage {
    /// Builds a message, truncating `text` to [`MAX_INBOUND_SCALARS`].
    pub fn new(
        id: u64,
        author: Handle,
        text: impl Into<String>,
        channel: Channel,
        received_at: DateTime<Utc>,
    ) -> Result<InboundMessage, DomainError> {
        if id == 0 {
            return Err(DomainError::ZeroId);
        }
        let mut text = text.into();
        if let Some((cut, _)) = text.char_indices().nth(MAX_INBOUND_SCALARS) {
            warn!(id, author = %author, "inbound text exceeds {MAX_INBOUND_SCALARS} scalars, truncating");
            text.truncate(cut);
        }
        Ok(InboundMessage {
            id,
            author,
            text,
            channel,
            received_at: received_at.with_timezone(&Utc),
        })
    }
}

/// A message split into its key and optional remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCommand {
    /// First token, lowercased. Absent for empty input.
    pub key: Option<String>,
    pub text: String,
    /// Post-strip text, trimmed but otherwise verbatim.
    pub original: String,
}

/// A `<key, webhook>` service pair plus ownership metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRegistration {
    pub key: Key,
    pub webhook: String,
    pub owner: Handle,
    pub registered_at: DateTime<Utc>,
}

/// Checks that `raw` is an absolute http(s) URL with a host and no query or fragment.
pub fn validate_webhook(raw: &str) -> Result<(), DomainError> {
    let invalid = |reason: &str| DomainError::InvalidWebhook {
        url: raw.to_string(),
        reason: reason.to_string(),
    };
    if raw.trim() != raw || raw.is_empty() {
        return Err(invalid("surrounding whitespace"));
    }
    if raw.contains('?') {
        return Err(invalid("query strings are not allowed"));
    }
    if raw.contains('#') {
        return Err(invalid("fragments are not allowed"));
    }
    let url = Url::parse(raw).map_err(|e| invalid(&e.to_string()))?;
    if !matches!(url.scheme(), "http" | "https") {
        return Err(invalid("scheme must be http or https"));
    }
    if url.host_str().is_none_or(str::is_empty) {
        return Err(invalid("missing host"));
    }
    Ok(())
}

/// Removes the first whitespace-delimited token equal (ignoring case) to
/// `@base_account`, then rejoins the remaining tokens with single spaces.
pub fn strip_base_mention(text: &str, base_account: &str) -> String {
    let base = base_account.strip_prefix('@').unwrap_or(base_account);
    let target = format!("@{base}");
    let mut stripped = false;
    let mut tokens = Vec::new();
    for token in text.split_whitespace() {
        if !stripped && token.to_lowercase() == target.to_lowercase() {
            stripped = true;
            continue;
        }
        tokens.push(token);
    }
    if stripped {
        tokens.join(" ")
    } else {
        text.trim().to_string()
    }
}

/// Splits `Key Optional_Text`. Total over every input.
pub fn parse_command(stripped_text: &str) -> ParsedCommand {
    let original = stripped_text.trim();
    match original.split_once(char::is_whitespace) {
        _ if original.is_empty() => ParsedCommand {
            key: None,
            text: String::new(),
            original: String::new(),
        },
        Some((head, rest)) => ParsedCommand {
            key: Some(head.to_lowercase()),
            text: rest.trim().to_string(),
            original: original.to_string(),
        },
        None => ParsedCommand {
            key: Some(original.to_lowercase()),
            text: String::new(),
            original: original.to_string(),
        },
    }
}

impl ParsedCommand {
    /// The key if it is a well-formed registry key.
    pub fn registry_key(&self) -> Option<Key> {
        self.key.as_deref().and_then(|k| normalize_key(k).ok())
    }
}
