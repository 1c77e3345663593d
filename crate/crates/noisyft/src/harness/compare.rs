//! Pairwise model comparison with position-debiased presentation.
//!
//! Each prompt's two candidate outputs are shown to a judge in an order
//! decided by a seeded coin, and the verdict is mapped back to the
//! original sides. The summary score is wins_a / (total - ties), the
//! tie-discarding win rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::judge::{Judge, Verdict};

/// Tie-discarding win rate: wins / (total - ties). Errors when total is
/// zero, when counts are inconsistent, or when every item tied (the rate
/// is undefined there; callers surface it as absent instead).
pub fn win_score(wins: u64, ties: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("win_score: total is zero"));
    }
    if wins + ties > total {
        return Err(Error::invalid(format!(
            "win_score: wins {wins} + ties {ties} exceed total {total}"
        )));
    }
    if ties == total {
        return Err(Error::invalid("win_score: all items tied, rate undefined"));
    }
    Ok(wins as f64 / (total - ties) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub index: usize,
    /// True when side B was shown to the judge first.
    pub swapped: bool,
    /// Verdict in original-side terms; None when the judge failed.
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub wins_a: u64,
    pub wins_b: u64,
    pub ties: u64,
    /// Items the judge failed on; excluded from the score's total.
    pub unjudged: u64,
    /// wins_a / (judged - ties); None when every judged item tied or
    /// nothing was judged.
    pub win_score_a: Option<f64>,
    pub items: Vec<ItemOutcome>,
}

/// Judges each aligned (prompt, output_a, output_b) triple. One
/// presentation coin per item is drawn in index order from a dedicated
/// generator seeded with `presentation_seed`, so the swap pattern depends
/// only on the seed and the item index, never on verdicts or judge
/// failures.
pub fn pairwise_compare(
    prompts: &[String],
    outputs_a: &[String],
    outputs_b: &[String],
    judge: &mut dyn Judge,
    presentation_seed: u64,
) -> Result<ComparisonResult> {
    if prompts.len() != outputs_a.len() || prompts.len() != outputs_b.len() {
        return Err(Error::invalid(format!(
            "pairwise_compare: {} prompts vs {} / {} outputs",
            prompts.len(),
            outputs_a.len(),
            outputs_b.len()
        )));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("pairwise_compare: no items"));
    }

    let mut coin_rng = ChaCha8Rng::seed_from_u64(presentation_seed);
    let mut result = ComparisonResult {
        wins_a: 0,
        wins_b: 0,
        ties: 0,
        unjudged: 0,
        win_score_a: None,
        items: Vec::with_capacity(prompts.len()),
    };

    for (index, ((prompt, a), b)) in prompts
        .iter()
        .zip(outputs_a)
        .zip(outputs_b)
        .enumerate()
    {
        let swapped: bool = coin_rng.random();
        let (first, second) = if swapped { (b, a) } else { (a, b) };
        let verdict = match judge.judge(prompt, first, second) {
            Ok(v) => {
                let v = if swapped { v.flipped() } else { v };
                match v {
                    Verdict::A => result.wins_a += 1,
                    Verdict::B => result.wins_b += 1,
                    Verdict::Tie => result.ties += 1,
                }
                Some(v)
            }
            Err(e) => {
                log::warn!("item {index} unjudged: {e}");
                result.unjudged += 1;
                None
            }
        };
        result.items.push(ItemOutcome {
            index,
            swapped,
            verdict,
        });
    }

    let judged = result.wins_a + result.wins_b + result.ties;
    result.win_score_a = if judged > 0 && result.ties < judged {
        Some(win_score(result.wins_a, result.ties, judged)?)
    } else {
        None
    };
    Ok(result)
}
