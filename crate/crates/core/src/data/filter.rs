use std::fmt;

use serde::{Deserialize, Serialize};

use super::tokenize::{tokenize_spans, truncate_to_tokens};
use super::PairRecord;

/// Fraction of alphabetic characters that must be ASCII letters.
pub const ENGLISH_ASCII_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_tokens: usize,
    pub max_text_tokens: usize,
    pub max_code_tokens: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_tokens: 3,
            max_text_tokens: 256,
            max_code_tokens: 256,
        }
    }
}

/// Per-rule counts from one filtering pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub dropped_too_few_tokens: usize,
    pub dropped_non_english: usize,
    pub truncated_text: usize,
    pub truncated_code: usize,
    pub kept: usize,
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}", self.input)?;
        writeln!(f, "dropped_too_few_tokens {}", self.dropped_too_few_tokens)?;
        writeln!(f, "dropped_non_english {}", self.dropped_non_english)?;
        writeln!(f, "truncated_text {}", self.truncated_text)?;
        writeln!(f, "truncated_code {}", self.truncated_code)?;
        write!(f, "kept {}", self.kept)
    }
}

/// English heuristic: at least 90% of alphabetic characters are ASCII letters.
/// Text without any alphabetic character is not considered English.
pub fn is_probably_english(text: &str) -> bool {
    let (mut alpha, mut ascii) = (0usize, 0usize);
    for c in text.chars().filter(|c| c.is_alphabetic()) {
        alpha += 1;
        if c.is_ascii_alphabetic() {
            ascii += 1;
        }
    }
    alpha > 0 && ascii as f64 >= ENGLISH_ASCII_RATIO * alpha as f64
}

/// Drops short or non-English pairs and truncates over-long sides. Output
/// order follows input order.
pub fn filter_pairs(records: &[PairRecord], cfg: &FilterConfig) -> (Vec<PairRecord>, FilterReport) {
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        let text_len = tokenize_spans(&r.text).len();
        let code_len = tokenize_spans(&r.code).len();
        if text_len < cfg.min_tokens || code_len < cfg.min_tokens {
            report.dropped_too_few_tokens += 1;
            continue;
        }
        let text = truncate_to_tokens(&r.text, cfg.max_text_tokens);
        // judged on the truncated text so that a second pass agrees
        if !is_probably_english(text) {
            report.dropped_non_english += 1;
            continue;
        }
        let mut out = r.clone();
        if text_len > cfg.max_text_tokens {
            out.text = text.to_string();
            report.truncated_text += 1;
        }
        if code_len > cfg.max_code_tokens {
            out.code = truncate_to_tokens(&r.code, cfg.max_code_tokens).to_string();
            report.truncated_code += 1;
        }
        kept.push(out);
    }
    report.kept = kept.len();
    (kept, report)
}
