//! Line-oriented text checkpoints.
//!
//! ```text
//! VCRD-CKPT v1
//! vocab=<comma-separated symbols>
//! window=<W> pad=<index>
//! <W space-separated token indices> | <V space-separated logits>
//! ```
//!
//! Logits are written with Rust's shortest round-trip float formatting, so a
//! load reproduces every stored value bit for bit.

use std::fmt::Write as _;

use super::{PolicyError, Result, StateKey, TabularPolicy, Vocab};

pub const CHECKPOINT_MAGIC: &str = "VCRD-CKPT v1";

pub fn save_checkpoint(policy: &TabularPolicy) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    let _ = writeln!(out, "vocab={}", policy.vocab().symbols().join(","));
    let _ = writeln!(out, "window={} pad={}", policy.window(), policy.pad());
    for (key, logits) in policy.states() {
        let _ = write!(out, "{key} |");
        for z in logits {
            let _ = write!(out, " {z:?}");
        }
        out.push('\n');
    }
    out
}

fn malformed(line: usize, reason: impl Into<String>) -> PolicyError {
    PolicyError::MalformedCheckpoint {
        line,
        reason: reason.into(),
    }
}

pub fn load_checkpoint(text: &str) -> Result<TabularPolicy> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, version) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty checkpoint"))?;
    if version.trim_end() != CHECKPOINT_MAGIC {
        return Err(PolicyError::UnsupportedVersion(version.to_string()));
    }

    let (n, vocab_line) = lines
        .next()
        .ok_or_else(|| malformed(2, "missing vocab line"))?;
    let symbols = vocab_line
        .strip_prefix("vocab=")
        .ok_or_else(|| malformed(n, "expected `vocab=`"))?;
    let vocab = Vocab::new(symbols.split(','))?;

    let (n, header) = lines
        .next()
        .ok_or_else(|| malformed(3, "missing window line"))?;
    let mut window = None;
    let mut pad = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("window", v)) => {
                window = Some(
                    v.parse::<usize>()
                        .map_err(|e| malformed(n, e.to_string()))?,
                )
            }
            Some(("pad", v)) => {
                pad = Some(
                    v.parse::<usize>()
                        .map_err(|e| malformed(n, e.to_string()))?,
                )
            }
            _ => return Err(malformed(n, format!("unexpected field {field:?}"))),
        }
    }
    let window = window.ok_or_else(|| malformed(n, "missing window"))?;
    let pad = pad.ok_or_else(|| malformed(n, "missing pad"))?;
    let mut policy = TabularPolicy::new(vocab, window, pad)?;

    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (key_part, logit_part) = line
            .split_once('|')
            .ok_or_else(|| malformed(n, "expected `<key> | <logits>`"))?;
        let key = key_part
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| malformed(n, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let logits = logit_part
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| malformed(n, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let key = StateKey(key);
        if policy.logits(&key).is_some() {
            return Err(PolicyError::DuplicateState {
                state: key,
                line: n,
            });
        }
        policy
            .set_logits(key, logits)
            .map_err(|e| malformed(n, e.to_string()))?;
    }
    Ok(policy)
}
