//! Scenario scripts for the simulated world.
//!
//! ```text
//! REGISTER w {botkit}/weather ops
//! INJECT mention abava @t411 w msk
//! ADVANCE 60
//! EXPECT_REPLY abava @abava Moscow: ...
//! ```
//!
//! `{botkit}` expands to the base URL of the local example-webhook server.
//! Each `EXPECT_REPLY` first runs the engine until it is idle, then looks for
//! the next matching reply in the outbox.

use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tracing::info;

use super::SimWorld;
use crate::botkit::{BotServer, Fixtures};
use crate::chatbot::RuleSet;
use crate::dispatch::Dispatcher;
use crate::domain::Channel;
use crate::pipeline::Gateway;
use crate::registry::RegistryStore;
use crate::transport::BudgetConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Register { key: String, webhook: String, owner: String },
    Inject { channel: Channel, author: String, text: String },
    Advance(u64),
    ExpectReply { author: String, text: String },
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: {reason}")]
    Step { line: usize, reason: String },
    #[error("line {line}: expected reply to {author}: {expected:?}; unmatched replies: {got:?}")]
    ExpectFailed {
        line: usize,
        author: String,
        expected: String,
        got: Vec<String>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn split_word(s: &str) -> Option<(&str, &str)> {
    let s = s.trim_start();
    if s.is_empty() {
        return None;
    }
    match s.split_once(char::is_whitespace) {
        Some((w, rest)) => Some((w, rest.trim_start())),
        None => Some((s, "")),
    }
}

pub fn parse_script(src: &str) -> Result<Vec<(usize, Directive)>, ScriptError> {
    let mut out = Vec::new();
    for (idx, raw) in src.lines().enumerate() {
        let line = idx + 1;
        let bad = |reason: &str| ScriptError::Parse {
            line,
            reason: reason.to_string(),
        };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (verb, rest) = split_word(trimmed).expect("non-empty line");
        let directive = match verb {
            "REGISTER" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [key, webhook, owner] = parts[..] else {
                    return Err(bad("usage: REGISTER <key> <webhook> <owner>"));
                };
                Directive::Register {
                    key: key.into(),
                    webhook: webhook.into(),
                    owner: owner.into(),
                }
            }
            "INJECT" => {
                let (channel, rest) = split_word(rest).ok_or_else(|| bad("missing channel"))?;
                let channel = Channel::parse(channel).ok_or_else(|| bad("unknown channel"))?;
                let (author, text) = split_word(rest).ok_or_else(|| bad("missing author"))?;
                Directive::Inject {
                    channel,
                    author: author.into(),
                    text: text.into(),
                }
            }
            "ADVANCE" => Directive::Advance(rest.trim().parse().map_err(|_| bad("bad seconds"))?),
            "EXPECT_REPLY" => {
                let (author, text) = split_word(rest).ok_or_else(|| bad("missing author"))?;
                Directive::ExpectReply {
                    author: author.trim_start_matches('@').into(),
                    text: text.into(),
                }
            }
            other => return Err(bad(&format!("unknown directive {other}"))),
        };
        out.push((line, directive));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptReport {
    pub steps: usize,
    pub expectations_met: usize,
}

/// Runs the engine until the bus and retry queue stop changing.
pub async fn settle(gateway: &Gateway) {
    for _ in 0..16 {
        let before = (gateway.bus().len(), gateway.retry_queue().len());
        let _ = gateway.tick().await;
        let _ = gateway.process_all().await;
        let after = (gateway.bus().len(), gateway.retry_queue().len());
        if after == (0, 0) || after == before {
            break;
        }
    }
}

/// Executes `steps`, stopping at the first failure.
pub async fn run_script(
    steps: &[(usize, Directive)],
    gateway: &Gateway,
    world: &SimWorld,
    botkit_base: &str,
) -> Result<ScriptReport, ScriptError> {
    let mut report = ScriptReport::default();
    let mut outbox_pos = 0;
    for (line, step) in steps {
        let line = *line;
        match step {
            Directive::Register { key, webhook, owner } => {
                let webhook = webhook.replace("{botkit}", botkit_base);
                gateway
                    .registry()
                    .write()
                    .register_at(key, &webhook, owner, world.clock())
                    .map_err(|e| ScriptError::Step {
                        line,
                        reason: e.to_string(),
                    })?;
            }
            Directive::Inject { channel, author, text } => {
                world.inject(author, text, *channel).map_err(|e| ScriptError::Step {
                    line,
                    reason: e.to_string(),
                })?;
            }
            Directive::Advance(secs) => {
                world.advance_clock(*secs);
            }
            Directive::ExpectReply { author, text } => {
                settle(gateway).await;
                let outbox = world.read_outbox();
                let found = outbox[outbox_pos..]
                    .iter()
                    .position(|p| p.reply.recipient.as_str() == author && &p.reply.text == text);
                match found {
                    Some(offset) => {
                        outbox_pos += offset + 1;
                        report.expectations_met += 1;
                        info!(line, %author, "expectation met");
                    }
                    None => {
                        return Err(ScriptError::ExpectFailed {
                            line,
                            author: author.clone(),
                            expected: text.clone(),
                            got: outbox[outbox_pos..].iter().map(|p| p.reply.text.clone()).collect(),
                        })
                    }
                }
            }
        }
        report.steps += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub base_account: String,
    pub budgets: BudgetConfig,
    pub fixtures: Fixtures,
    pub rules: RuleSet,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            base_account: "t411".into(),
            budgets: BudgetConfig::default(),
            fixtures: Fixtures::shipped(),
            rules: RuleSet::default(),
        }
    }
}

/// Runs a script against a fresh world, a local fixture server and an
/// in-memory registry.
pub async fn simulate(src: &str, opts: SimulateOptions) -> Result<ScriptReport, ScriptError> {
    let steps = parse_script(src)?;
    let bots = BotServer::start(SocketAddr::from(([127, 0, 0, 1], 0)), opts.fixtures).await?;
    let world = SimWorld::with_budgets(&opts.base_account, opts.budgets);
    let gateway = Gateway::builder(Arc::new(world.clone()), RegistryStore::in_memory().into_shared())
        .dispatcher(Dispatcher::http().timeout_seconds(5))
        .rules(opts.rules)
        .poll_interval(0)
        .build()
        .map_err(|e| ScriptError::Step {
            line: 0,
            reason: e.to_string(),
        })?;
    run_script(&steps, &gateway, &world, &bots.base_url()).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_directives() {
        let steps = parse_script(
            "# demo\nREGISTER w {botkit}/weather ops\nINJECT dm abava w  msk\nADVANCE 30\nEXPECT_REPLY @abava hi there\n",
        )
        .unwrap();
        assert_eq!(steps.len(), 4);
        assert_eq!(
            steps[1],
            (
                3,
                Directive::Inject {
                    channel: Channel::DirectMessage,
                    author: "abava".into(),
                    text: "w  msk".into()
                }
            )
        );
        assert_eq!(steps[2].1, Directive::Advance(30));
        assert_eq!(
            steps[3].1,
            Directive::ExpectReply {
                author: "abava".into(),
                text: "hi there".into()
            }
        );
    }

    #[test]
    fn reports_parse_errors_with_line() {
        assert!(matches!(parse_script("\nFLY away"), Err(ScriptError::Parse { line: 2, .. })));
        assert!(matches!(parse_script("ADVANCE soon"), Err(ScriptError::Parse { line: 1, .. })));
        assert!(matches!(parse_script("INJECT pigeon a b"), Err(ScriptError::Parse { .. })));
    }

    #[tokio::test]
    async fn failed_expectation_stops_the_run() {
        let err = simulate(
            "INJECT mention abava @t411 how are you?\nEXPECT_REPLY abava @abava wrong\n",
            SimulateOptions::default(),
        )
        .await
        .unwrap_err();
        match err {
            ScriptError::ExpectFailed { line, got, .. } => {
                assert_eq!(line, 2);
                assert_eq!(got, vec!["@abava Let me see, just a minute please.".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
