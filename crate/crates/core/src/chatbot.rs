//! Pattern/effect chatbot used when a message carries no registered key.
//!
//! Rule file lines are `pattern<TAB>effect`. Lines starting with `#` are
//! comments, and a first rule line `DEFAULT<TAB>effect` sets the fallback.
//! Patterns match the whole text, ignoring case. Effects may use `$0`..`$9`
//! for capture groups and `$u` for the author.

use regex::{Captures, Regex, RegexBuilder};
use thiserror::Error;

/// The rule set shipped with the gateway.
pub const DEFAULT_RULES: &str = include_str!("../assets/default.rules");

const DEFAULT_FALLBACK: &str = "Sorry, I did not understand that.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("line {line}: bad pattern: {reason}")]
    BadPattern { line: usize, reason: String },
    #[error("line {line}: effect refers to group ${group}, pattern has {groups} group(s)")]
    BadEffect { line: usize, group: usize, groups: usize },
    #[error("line {line}: expected `pattern<TAB>effect`")]
    Malformed { line: usize },
}

#[derive(Debug, Clone)]
pub struct ChatRule {
    pub pattern: String,
    pub effect: String,
    pub priority: usize,
    compiled: Regex,
}

impl ChatRule {
    pub fn new(pattern: &str, effect: &str, priority: usize) -> Result<ChatRule, RuleError> {
        Self::at_line(pattern, effect, priority, priority + 1)
    }

    fn at_line(pattern: &str, effect: &str, priority: usize, line: usize) -> Result<ChatRule, RuleError> {
        check_dialect(pattern).map_err(|reason| RuleError::BadPattern { line, reason })?;
        let compiled = RegexBuilder::new(&format!("^(?:{pattern})$"))
            .case_insensitive(true)
            .build()
            .map_err(|e| RuleError::BadPattern {
                line,
                reason: e.to_string(),
            })?;
        let groups = compiled.captures_len() - 1;
        if let Some(group) = effect_groups(effect).into_iter().find(|g| *g > groups) {
            return Err(RuleError::BadEffect { line, group, groups });
        }
        Ok(ChatRule {
            pattern: pattern.to_string(),
            effect: effect.to_string(),
            priority,
            compiled,
        })
    }
}

/// Ordered rules plus the effect used when nothing matches.
#[derive(Debug, Clone)]
pub struct RuleSet {
    pub rules: Vec<ChatRule>,
    pub default_effect: String,
}

impl Default for RuleSet {
    fn default() -> Self {
        load_rules(DEFAULT_RULES).expect("shipped rule set is valid")
    }
}

// Inline flags, lookaround and backreferences are outside the portable subset.
fn check_dialect(pattern: &str) -> Result<(), String> {
    let mut chars = pattern.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(d) if d.is_ascii_digit() && d != '0' => {
                    return Err(format!("backreference \\{d} is not supported"))
                }
                Some('p' | 'P') => return Err("unicode classes are not supported".into()),
                _ => {}
            },
            '(' if chars.peek() == Some(&'?') => {
                chars.next();
                if chars.peek() != Some(&':') {
                    return Err("only (?:...) groups are supported".into());
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn effect_groups(effect: &str) -> Vec<usize> {
    let mut groups = Vec::new();
    let mut chars = effect.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '$' {
            if let Some(d) = chars.peek().and_then(|d| d.to_digit(10)) {
                groups.push(d as usize);
                chars.next();
            }
        }
    }
    groups
}

fn render(effect: &str, caps: Option<&Captures<'_>>, author: &str) -> String {
    let mut out = String::with_capacity(effect.len());
    let mut chars = effect.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '$' {
            out.push(c);
            continue;
        }
        match chars.peek().copied() {
            Some('u') => {
                chars.next();
                out.push_str(author);
            }
            Some(d @ '0'..='9') => {
                chars.next();
                let idx = d.to_digit(10).unwrap() as usize;
                if let Some(m) = caps.and_then(|c| c.get(idx)) {
                    out.push_str(m.as_str());
                }
            }
            _ => out.push('$'),
        }
    }
    out
}

/// Parses and eagerly compiles a rule file.
pub fn load_rules(source: &str) -> Result<RuleSet, RuleError> {
    let mut rules = Vec::new();
    let mut default_effect = None;
    let mut seen_rule_line = false;
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let (pattern, effect) = raw.split_once('\t').ok_or(RuleError::Malformed { line })?;
        if pattern == "DEFAULT" && !seen_rule_line {
            if let Some(group) = effect_groups(effect).into_iter().find(|g| *g > 0) {
                return Err(RuleError::BadEffect { line, group, groups: 0 });
            }
            default_effect = Some(effect.to_string());
        } else {
            rules.push(ChatRule::at_line(pattern, effect, rules.len(), line)?);
        }
        seen_rule_line = true;
    }
    Ok(RuleSet {
        rules,
        default_effect: default_effect.unwrap_or_else(|| DEFAULT_FALLBACK.to_string()),
    })
}

impl RuleSet {
    /// Effect of the first rule that fully matches `text`, else the default.
    pub fn respond(&self, text: &str, author: &str) -> String {
        for rule in &self.rules {
            if let Some(caps) = rule.compiled.captures(text) {
                return render(&rule.effect, Some(&caps), author);
            }
        }
        render(&self.default_effect, None, author)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Free-function form of [`RuleSet::respond`].
pub fn respond(rules: &RuleSet, text: &str, author: &str) -> String {
    rules.respond(text, author)
}
