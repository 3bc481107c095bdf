use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "rouge1")]
    One,
    #[serde(rename = "rouge2")]
    Two,
    #[serde(rename = "rougeL")]
    L,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_overlap(overlap: usize, cand: usize, refr: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let recall = if refr == 0 { 0.0 } else { overlap as f64 / refr as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
}

impl RougeReport {
    /// Component-wise mean of several reports.
    pub fn mean(reports: &[RougeReport]) -> RougeReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&RougeReport) -> RougeScore| {
            let mut s = RougeScore::default();
            for r in reports {
                let x = f(r);
                s.precision += x.precision / n;
                s.recall += x.recall / n;
                s.f1 += x.f1 / n;
            }
            s
        };
        RougeReport {
            rouge1: avg(|r| r.rouge1),
            rouge2: avg(|r| r.rouge2),
            rouge_l: avg(|r| r.rouge_l),
        }
    }
}

impl fmt::Display for RougeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>9} {:>9} {:>9}", "metric", "precision", "recall", "f1")?;
        for (name, s) in [("rouge1", self.rouge1), ("rouge2", self.rouge2), ("rougeL", self.rouge_l)] {
            writeln!(f, "{name:<8} {:>9.4} {:>9.4} {:>9.4}", s.precision, s.recall, s.f1)?;
        }
        Ok(())
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge<S: AsRef<str>>(candidate: &[S], reference: &[S], variant: RougeVariant) -> RougeScore {
    if candidate.is_empty() && reference.is_empty() {
        log::warn!("ROUGE on two empty sequences; reporting zeros");
        return RougeScore::default();
    }
    match variant {
        RougeVariant::L => RougeScore::from_overlap(lcs_len(candidate, reference), candidate.len(), reference.len()),
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (c, r) = (ngram_counts(candidate, n), ngram_counts(reference, n));
            let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
            let total = |m: &HashMap<_, usize>| m.values().sum::<usize>();
            RougeScore::from_overlap(overlap, total(&c), total(&r))
        }
    }
}

pub fn rouge_all<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeReport {
    RougeReport {
        rouge1: rouge(candidate, reference, RougeVariant::One),
        rouge2: rouge(candidate, reference, RougeVariant::Two),
        rouge_l: rouge(candidate, reference, RougeVariant::L),
    }
}
