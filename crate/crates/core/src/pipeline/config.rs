//! `key=value` gateway configuration.
//!
//! ```text
//! base_account=t411
//! transport=simulated
//! poll_interval_seconds=60
//! rest_capacity=15
//! rest_window_seconds=900
//! stream_capacity=3
//! journal_path=registry.jsonl
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use super::{Mode, DEFAULT_POLL_INTERVAL_SECONDS};
use crate::transport::{BudgetConfig, TransportEndpoint, DEFAULT_WINDOW_SECONDS};

pub const DEFAULT_CONTROL_ADDR: &str = "127.0.0.1:8411";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for {key}: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("missing required key {0}")]
    Missing(&'static str),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub base_account: String,
    pub transport: String,
    pub poll_interval_seconds: u64,
    pub budgets: BudgetConfig,
    pub journal_path: PathBuf,
    pub state_path: Option<PathBuf>,
    pub rules_path: Option<PathBuf>,
    pub fixtures_path: Option<PathBuf>,
    pub control_addr: SocketAddr,
    pub mode: Mode,
    pub workers: usize,
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        line,
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn positive<T: FromStr + PartialEq + Default>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let n: T = parse_num(line, key, v)?;
    if n == T::default() {
        return Err(ConfigError::Value {
            line,
            key: key.to_string(),
            reason: "must be positive".into(),
        });
    }
    Ok(n)
}

impl GatewayConfig {
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let mut base_account = None;
        let mut transport = None;
        let mut journal_path = None;
        let mut cfg = GatewayConfig {
            base_account: String::new(),
            transport: String::new(),
            poll_interval_seconds: DEFAULT_POLL_INTERVAL_SECONDS,
            budgets: BudgetConfig::default(),
            journal_path: PathBuf::new(),
            state_path: None,
            rules_path: None,
            fixtures_path: None,
            control_addr: DEFAULT_CONTROL_ADDR.parse().unwrap(),
            mode: Mode::Poll,
            workers: crate::dispatch::DEFAULT_PARALLELISM,
        };
        for (idx, raw) in src.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "base_account" => base_account = Some(value.trim_start_matches('@').to_string()),
                "transport" => transport = Some(value.to_string()),
                "poll_interval_seconds" => cfg.poll_interval_seconds = parse_num(line, key, value)?,
                "rest_capacity" => cfg.budgets.rest_capacity = positive(line, key, value)?,
                "rest_window_seconds" => cfg.budgets.rest_window_seconds = positive(line, key, value)?,
                "stream_capacity" => cfg.budgets.stream_capacity = positive(line, key, value)?,
                "stream_window_seconds" => {
                    cfg.budgets.stream_window_seconds = positive(line, key, value)?
                }
                "journal_path" => journal_path = Some(PathBuf::from(value)),
                "state_path" => cfg.state_path = Some(PathBuf::from(value)),
                "rules_path" => cfg.rules_path = Some(PathBuf::from(value)),
                "fixtures_path" => cfg.fixtures_path = Some(PathBuf::from(value)),
                "control_addr" => cfg.control_addr = parse_num(line, key, value)?,
                "workers" => cfg.workers = positive(line, key, value)?,
                "mode" => {
                    cfg.mode = match value {
                        "poll" => Mode::Poll,
                        "stream" => Mode::Stream,
                        _ => {
                            return Err(ConfigError::Value {
                                line,
                                key: key.into(),
                                reason: "expected poll or stream".into(),
                            })
                        }
                    }
                }
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        cfg.base_account = base_account
            .filter(|b| !b.is_empty())
            .ok_or(ConfigError::Missing("base_account"))?;
        cfg.transport = transport.ok_or(ConfigError::Missing("transport"))?;
        TransportEndpoint::parse(&cfg.transport, &cfg.base_account).map_err(|e| ConfigError::Value {
            line: 0,
            key: "transport".into(),
            reason: e.to_string(),
        })?;
        cfg.journal_path = journal_path.ok_or(ConfigError::Missing("journal_path"))?;
        if cfg.budgets.stream_window_seconds == 0 {
            cfg.budgets.stream_window_seconds = DEFAULT_WINDOW_SECONDS;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        // Relative paths are resolved against the config file's directory.
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut cfg.journal_path);
            cfg.state_path.as_mut().map(fix);
            cfg.rules_path.as_mut().map(fix);
            cfg.fixtures_path.as_mut().map(fix);
        }
        Ok(cfg)
    }
}
