//! Retrieval and generation metrics plus the trainable-parameter audit.

mod audit;
mod mrr;
mod rouge;

pub use audit::{audit_report, audit_rows, AuditRow, REFERENCE_BASE_PARAMS};
pub use mrr::{
    mrr_all_pairs, mrr_chunked, mrr_from_scores, rank_of_match, CutoffRule, MrrProtocol, MrrReport,
    DEFAULT_CHUNK_SIZE, DEFAULT_CUTOFF,
};
pub use rouge::{rouge, rouge_all, RougeReport, RougeScore, RougeVariant};
