//! Overlap and diversity metrics for generated text: ROUGE-L, BLEU,
//! n-gram repetition, log-diversity, length statistics, and fixed-prefix
//! chunking with per-dataset cutoffs.
//!
//! All functions are pure. Text normalization is documented exactly so
//! scores are reproducible: lowercase, split on whitespace, strip leading
//! and trailing non-alphanumeric characters from each token, drop tokens
//! that end up empty.
//!
//! Reproducibility choices worth knowing when comparing to other tools:
//! ROUGE-L F defaults to the harmonic mean (β = 1), BLEU is sentence-level
//! with no smoothing (an order with zero matching or zero candidate
//! n-grams zeroes the score), and log-diversity is −Σ ln rep_n over
//! n = 2..4 with each rep_n floored at one over that order's n-gram count.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FORMAT_VERSION: u32 = 1;

/// Whitespace-split, punctuation-stripped word tokens. Never contains an
/// empty token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSequence {
    tokens: Vec<String>,
}

impl WordSequence {
    /// Applies the documented normalizer to raw text.
    pub fn normalize(text: &str) -> WordSequence {
        let tokens = text
            .to_lowercase()
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
            .filter(|w| !w.is_empty())
            .collect();
        WordSequence { tokens }
    }

    /// Wraps pre-tokenized words, rejecting empty tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<WordSequence> {
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::invalid("word sequences must not contain empty tokens"));
        }
        Ok(WordSequence { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Classic LCS dynamic program in two rows.
pub fn lcs_length(a: &WordSequence, b: &WordSequence) -> usize {
    lcs_slices(a.tokens(), b.tokens())
}

fn lcs_slices<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with the harmonic-mean F (β = 1).
pub fn rouge_l(candidate: &WordSequence, reference: &WordSequence) -> OverlapScore {
    rouge_l_beta(candidate, reference, 1.0)
}

/// ROUGE-L with an explicit β: F = (1 + β²)·P·R / (R + β²·P). Larger β
/// weights recall more heavily. Degenerate inputs (either side empty)
/// score zero.
pub fn rouge_l_beta(candidate: &WordSequence, reference: &WordSequence, beta: f64) -> OverlapScore {
    if candidate.is_empty() || reference.is_empty() {
        return OverlapScore {
            precision: 0.0,
            recall: 0.0,
            f: 0.0,
        };
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let denom = recall + beta * beta * precision;
    let f = if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta * beta) * precision * recall / denom
    };
    OverlapScore {
        precision,
        recall,
        f,
    }
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU with clipped n-gram counts up to `max_n`, no
/// smoothing, and the standard brevity penalty exp(1 − |ref|/|cand|) when
/// the candidate is shorter than the reference. Any order with zero
/// matches (including orders longer than the candidate) zeroes the score.
pub fn bleu(candidate: &WordSequence, reference: &WordSequence, max_n: usize) -> f64 {
    if candidate.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate.tokens(), n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let refc = ngram_counts(reference.tokens(), n);
        let clipped: usize = cand
            .iter()
            .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let mut score = (log_sum / max_n as f64).exp();
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    if c < r {
        score *= (1.0 - r / c).exp();
    }
    score.clamp(0.0, 1.0)
}

/// Fraction of repeated n-grams: 1 − distinct/total. `None` when the
/// sequence is shorter than `n` (or `n` is zero).
pub fn ngram_repetition(tokens: &[String], n: usize) -> Option<f64> {
    if n == 0 || tokens.len() < n {
        return None;
    }
    let counts = ngram_counts(tokens, n);
    let total = tokens.len() - n + 1;
    Some(1.0 - counts.len() as f64 / total as f64)
}

fn log_diversity_from_parts(parts: &[(f64, usize)]) -> f64 {
    parts
        .iter()
        .map(|&(rep, total)| -(rep.max(1.0 / total as f64)).ln())
        .sum()
}

/// −Σ_{n=2..4} ln(max(rep_n, 1/total_n)): higher means less repetitive.
/// The floor keeps fully distinct chunks finite. `None` below 4 tokens.
pub fn log_diversity(tokens: &[String]) -> Option<f64> {
    if tokens.len() < 4 {
        return None;
    }
    let parts: Vec<(f64, usize)> = (2..=4)
        .map(|n| (ngram_repetition(tokens, n).unwrap(), tokens.len() - n + 1))
        .collect();
    Some(log_diversity_from_parts(&parts))
}

/// Repetition and length summary for one chunk of text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub rep2: Option<f64>,
    pub rep3: Option<f64>,
    pub rep4: Option<f64>,
    pub log_diversity: Option<f64>,
    pub char_length: usize,
    pub whitespace_length: usize,
}

/// First `cutoff` tokens, or `None` when the sequence is shorter. Corpus
/// statistics are computed only over present chunks.
pub fn chunk_prefix(seq: &WordSequence, cutoff: usize) -> Option<WordSequence> {
    if cutoff == 0 || seq.len() < cutoff {
        return None;
    }
    Some(WordSequence {
        tokens: seq.tokens[..cutoff].to_vec(),
    })
}

/// Chunk cutoff in whitespace tokens for a known dataset tag.
pub fn cutoff_for_tag(tag: &str) -> Result<usize> {
    match tag.to_lowercase().as_str() {
        "alpaca" => Ok(50),
        "evol-instruct" | "evol_instruct" => Ok(100),
        "sharegpt" => Ok(150),
        "openplatypus" | "open-platypus" => Ok(150),
        other => Err(Error::invalid(format!(
            "no chunk cutoff configured for dataset tag {other:?} \
             (known: alpaca, evol-instruct, sharegpt, openplatypus)"
        ))),
    }
}

/// Character count of the raw text and token count after whitespace split.
pub fn length_stats(text: &str) -> (usize, usize) {
    (text.chars().count(), text.split_whitespace().count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub char_length: usize,
    pub whitespace_length: usize,
    pub rep2: Option<f64>,
    pub rep3: Option<f64>,
    pub rep4: Option<f64>,
    pub log_diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge_l_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge_l_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge_l_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
}

/// Means over samples; chunk-dependent fields average only the samples
/// whose chunks exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub char_length: f64,
    pub whitespace_length: f64,
    pub rep2: Option<f64>,
    pub rep3: Option<f64>,
    pub rep4: Option<f64>,
    pub log_diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge_l_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge_l_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge_l_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub dataset_tag: String,
    pub cutoff: usize,
    pub per_sample: Vec<SampleMetrics>,
    pub means: MetricMeans,
    #[serde(skip, default)]
    has_references: bool,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Scores every generation: raw-text lengths, repetition and log-diversity
/// over the tag's fixed-length prefix chunk, and (when references are
/// supplied) ROUGE-L and BLEU against the paired reference over the full
/// normalized sequences.
pub fn corpus_report(
    generations: &[String],
    references: Option<&[String]>,
    dataset_tag: &str,
) -> Result<MetricsReport> {
    if generations.is_empty() {
        return Err(Error::invalid("corpus_report needs at least one generation"));
    }
    if let Some(refs) = references {
        if refs.len() != generations.len() {
            return Err(Error::invalid(format!(
                "{} references for {} generations",
                refs.len(),
                generations.len()
            )));
        }
    }
    let cutoff = cutoff_for_tag(dataset_tag)?;

    let per_sample: Vec<SampleMetrics> = generations
        .iter()
        .enumerate()
        .map(|(index, text)| {
            let (char_length, whitespace_length) = length_stats(text);
            let words = WordSequence::normalize(text);
            let chunk = chunk_prefix(&words, cutoff);
            let chunk_tokens = chunk.as_ref().map(WordSequence::tokens);
            let (rouge, bleu_score) = match references {
                Some(refs) => {
                    let r = WordSequence::normalize(&refs[index]);
                    (Some(rouge_l(&words, &r)), Some(bleu(&words, &r, 4)))
                }
                None => (None, None),
            };
            SampleMetrics {
                index,
                char_length,
                whitespace_length,
                rep2: chunk_tokens.and_then(|t| ngram_repetition(t, 2)),
                rep3: chunk_tokens.and_then(|t| ngram_repetition(t, 3)),
                rep4: chunk_tokens.and_then(|t| ngram_repetition(t, 4)),
                log_diversity: chunk_tokens.and_then(log_diversity),
                rouge_l_precision: rouge.map(|s| s.precision),
                rouge_l_recall: rouge.map(|s| s.recall),
                rouge_l_f: rouge.map(|s| s.f),
                bleu: bleu_score,
            }
        })
        .collect();

    let n = per_sample.len() as f64;
    let means = MetricMeans {
        char_length: per_sample.iter().map(|s| s.char_length as f64).sum::<f64>() / n,
        whitespace_length: per_sample
            .iter()
            .map(|s| s.whitespace_length as f64)
            .sum::<f64>()
            / n,
        rep2: mean_opt(per_sample.iter().map(|s| s.rep2)),
        rep3: mean_opt(per_sample.iter().map(|s| s.rep3)),
        rep4: mean_opt(per_sample.iter().map(|s| s.rep4)),
        log_diversity: mean_opt(per_sample.iter().map(|s| s.log_diversity)),
        rouge_l_precision: mean_opt(per_sample.iter().map(|s| s.rouge_l_precision)),
        rouge_l_recall: mean_opt(per_sample.iter().map(|s| s.rouge_l_recall)),
        rouge_l_f: mean_opt(per_sample.iter().map(|s| s.rouge_l_f)),
        bleu: mean_opt(per_sample.iter().map(|s| s.bleu)),
    };

    Ok(MetricsReport {
        format_version: METRICS_FORMAT_VERSION,
        dataset_tag: dataset_tag.to_string(),
        cutoff,
        per_sample,
        means,
        has_references: references.is_some(),
    })
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// One row per sample. The overlap columns appear only when the report
    /// was built with references; `format_version` is always the trailing
    /// column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("index,char_length,whitespace_length,rep2,rep3,rep4,log_diversity");
        if self.has_references {
            out.push_str(",rouge_l_precision,rouge_l_recall,rouge_l_f,bleu");
        }
        out.push_str(",format_version\n");
        for s in &self.per_sample {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                s.index,
                s.char_length,
                s.whitespace_length,
                csv_field(s.rep2),
                csv_field(s.rep3),
                csv_field(s.rep4),
                csv_field(s.log_diversity),
            ));
            if self.has_references {
                out.push_str(&format!(
                    ",{},{},{},{}",
                    csv_field(s.rouge_l_precision),
                    csv_field(s.rouge_l_recall),
                    csv_field(s.rouge_l_f),
                    csv_field(s.bleu),
                ));
            }
            out.push_str(&format!(",{}\n", self.format_version));
        }
        out
    }
}
