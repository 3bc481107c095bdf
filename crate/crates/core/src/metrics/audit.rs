use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::peft::{count_trainable, AdapterConfig};

/// Size of the reference embedding model used as the percentage base.
pub const REFERENCE_BASE_PARAMS: u64 = 110_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub method: String,
    pub trainable: usize,
    pub percent: f64,
}

pub fn audit_rows(enc: &EncoderConfig, adapters: &[AdapterConfig], base: u64) -> Vec<AuditRow> {
    adapters
        .iter()
        .map(|a| {
            let trainable = count_trainable(a, enc);
            AuditRow {
                method: a.method().to_string(),
                trainable,
                percent: 100.0 * trainable as f64 / base as f64,
            }
        })
        .collect()
}

/// Aligned text table: method, trainable count, percent of `base`.
pub fn audit_report(enc: &EncoderConfig, adapters: &[AdapterConfig], base: u64) -> String {
    let mut out = format!("{:<8} {:>12} {:>9}\n", "method", "trainable", "percent");
    for r in audit_rows(enc, adapters, base) {
        out.push_str(&format!("{:<8} {:>12} {:>8.3}%\n", r.method, r.trainable, r.percent));
    }
    out
}
