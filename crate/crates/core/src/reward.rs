//! Rule-based rewards on rendered response text.
//!
//! All functions are total over arbitrary strings.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::Mode;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardWeights {
    pub format: f64,
    pub accuracy: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            format: 1.0,
            accuracy: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub accuracy: u8,
    pub total: f64,
}

/// 1 if the text has the required tag layout for `mode`, else 0.
///
/// Think: `<think>…</think>` then `<answer>…</answer>`, each tag exactly once,
/// only whitespace between or around them. NoThink: exactly one
/// `<answer>…</answer>` pair and nothing else around it.
pub fn format_reward(text: &str, mode: Mode) -> u8 {
    let t = text.trim();
    let ok = match mode {
        Mode::Think => {
            [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
                .iter()
                .all(|tag| t.matches(tag).count() == 1)
                && t.starts_with(THINK_OPEN)
                && t.ends_with(ANSWER_CLOSE)
                && match (t.find(THINK_CLOSE), t.find(ANSWER_OPEN)) {
                    (Some(tc), Some(ao)) => {
                        tc < ao && t[tc + THINK_CLOSE.len()..ao].trim().is_empty()
                    }
                    _ => false,
                }
        }
        Mode::NoThink => {
            t.matches(ANSWER_OPEN).count() == 1
                && t.matches(ANSWER_CLOSE).count() == 1
                && t.starts_with(ANSWER_OPEN)
                && t.ends_with(ANSWER_CLOSE)
                && t.len() >= ANSWER_OPEN.len() + ANSWER_CLOSE.len()
        }
    };
    ok as u8
}

/// Content of the first `<answer>…</answer>` pair, if any.
fn answer_span(text: &str) -> Option<&str> {
    let open = text.find(ANSWER_OPEN)? + ANSWER_OPEN.len();
    let close = text[open..].find(ANSWER_CLOSE)?;
    Some(&text[open..open + close])
}

/// Leading option letter of the answer, upper-cased.
///
/// The letter must be the first non-space character and be followed by
/// `)`, `.`, `:`, whitespace or the end of the text.
pub fn extract_answer(text: &str) -> Option<char> {
    let body = answer_span(text).unwrap_or(text).trim();
    let mut chars = body.chars();
    let letter = chars.next()?.to_ascii_uppercase();
    if !matches!(letter, 'A'..='D') {
        return None;
    }
    match chars.next() {
        None | Some(')' | '.' | ':') => Some(letter),
        Some(c) if c.is_whitespace() => Some(letter),
        Some(_) => None,
    }
}

fn ground_truth_letter(ground_truth: &str) -> Result<char> {
    match ground_truth {
        "A" | "B" | "C" | "D" => Ok(ground_truth.chars().next().unwrap()),
        other => Err(Error::invalid(
            "ground_truth",
            format!("{other:?} is not one of A, B, C, D"),
        )),
    }
}

pub fn accuracy_reward(text: &str, ground_truth: &str) -> Result<u8> {
    let gt = ground_truth_letter(ground_truth)?;
    Ok((extract_answer(text) == Some(gt)) as u8)
}

pub fn total_reward(text: &str, ground_truth: &str, mode: Mode) -> Result<RewardBreakdown> {
    weighted_reward(text, ground_truth, mode, RewardWeights::default())
}

/// As [`total_reward`] with explicit weights. NoThink drops the format term.
pub fn weighted_reward(
    text: &str,
    ground_truth: &str,
    mode: Mode,
    weights: RewardWeights,
) -> Result<RewardBreakdown> {
    let accuracy = accuracy_reward(text, ground_truth)?;
    let format = format_reward(text, mode);
    let total = match mode {
        Mode::Think => weights.format * format as f64 + weights.accuracy * accuracy as f64,
        Mode::NoThink => weights.accuracy * accuracy as f64,
    };
    Ok(RewardBreakdown {
        format,
        accuracy,
        total,
    })
}
