//! Embedding-table perturbation analyses: nearest-neighbor token flips
//! under scaled noise, similarity matrices, and their top-k eigenvalues.
//!
//! Flip trials draw from per-(unit, trial) ChaCha substreams, so results
//! are independent of evaluation order and of anything previously drawn
//! from the master generator; only its seed matters.

use std::collections::BTreeSet;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::noise::noise_scale;
use crate::tensor::Element;

/// V × d table of embedding rows, always held as f64 for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    v: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(v: usize, d: usize, data: Vec<f64>) -> Result<EmbeddingTable> {
        if v == 0 || d == 0 {
            return Err(Error::invalid("embedding table needs v ≥ 1 and d ≥ 1"));
        }
        if data.len() != v * d {
            return Err(Error::invalid(format!(
                "embedding table data holds {} values, expected {}",
                data.len(),
                v * d
            )));
        }
        Ok(EmbeddingTable { v, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<EmbeddingTable> {
        let v = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("embedding rows must share one length"));
        }
        EmbeddingTable::new(v, d, rows.concat())
    }

    /// Copies the token-embedding matrix out of a model.
    pub fn from_model<T: Element>(params: &ModelParams<T>) -> EmbeddingTable {
        let shape = params.embed_tokens.shape();
        EmbeddingTable {
            v: shape[0],
            d: shape[1],
            data: params.embed_tokens.data().iter().map(|&x| x.to_f64()).collect(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Lowest id holding a row bitwise identical to row `i`, for every row.
    /// Identity permutation iff the table has no duplicate rows.
    fn canonical_ids(&self) -> Vec<u32> {
        let mut first_seen: HashMap<Vec<u64>, u32> = HashMap::new();
        (0..self.v)
            .map(|i| {
                let key: Vec<u64> = self.row(i).iter().map(|x| x.to_bits()).collect();
                *first_seen.entry(key).or_insert(i as u32)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

/// Euclidean nearest row, ties to the lowest id. Panics if the query
/// length differs from the table dimension (caller bug, not a data error).
pub fn nearest_token(table: &EmbeddingTable, query: &[f64]) -> u32 {
    nearest_token_with(table, query, Metric::Euclidean).unwrap()
}

/// Nearest row under the chosen metric, ties to the lowest id. Cosine
/// rejects zero-norm rows and queries.
pub fn nearest_token_with(table: &EmbeddingTable, query: &[f64], metric: Metric) -> Result<u32> {
    assert_eq!(query.len(), table.d, "query length must equal table dim");
    match metric {
        Metric::Euclidean => {
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for i in 0..table.v {
                let dist: f64 = table
                    .row(i)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = i as u32;
                }
            }
            Ok(best)
        }
        Metric::Cosine => {
            let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
            if qn == 0.0 {
                return Err(Error::invalid("cosine nearest-token needs a nonzero query"));
            }
            let mut best = 0u32;
            let mut best_c = f64::NEG_INFINITY;
            for i in 0..table.v {
                let row = table.row(i);
                let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if rn == 0.0 {
                    return Err(Error::invalid(format!(
                        "cosine nearest-token: row {i} has zero norm"
                    )));
                }
                let cos = row.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (rn * qn);
                if cos > best_c {
                    best_c = cos;
                    best = i as u32;
                }
            }
            Ok(best)
        }
    }
}

/// Whether a flip event is tallied once per noisy draw or once per token
/// id that flipped at least once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlipCounting {
    #[default]
    PerDraw,
    UniqueTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub alpha: f64,
    pub l_used: usize,
    pub trials: usize,
    /// Positions (sentence mode) or vocabulary ids (vocab mode) examined
    /// per trial.
    pub examined: usize,
    pub flips: usize,
    /// flips / (examined × trials) for per-draw counting,
    /// flips / examined for unique-token counting.
    pub flip_fraction: f64,
    /// Unique original ids that flipped at least once, ascending.
    pub flipped_ids: Vec<u32>,
}

fn flip_scan(
    table: &EmbeddingTable,
    units: &[u32],
    alpha: f64,
    l: usize,
    trials: usize,
    metric: Metric,
    counting: FlipCounting,
    master: &ChaCha8Rng,
) -> Result<FlipReport> {
    if trials == 0 {
        return Err(Error::invalid("flip analysis needs trials ≥ 1"));
    }
    let scale = noise_scale(alpha, l, table.d)?;
    if let Some(bad) = units.iter().find(|&&id| id as usize >= table.v) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocab size {}",
            table.v
        )));
    }
    let canonical = table.canonical_ids();
    if canonical.iter().enumerate().any(|(i, &c)| c != i as u32) {
        log::warn!(
            "embedding table has duplicate rows; flips onto an exact duplicate count as non-flips"
        );
    }

    let mut events = 0usize;
    let mut flipped: BTreeSet<u32> = BTreeSet::new();
    let mut noised = vec![0.0f64; table.d];
    if alpha > 0.0 {
        for (unit_idx, &orig) in units.iter().enumerate() {
            let row = table.row(orig as usize);
            for trial in 0..trials {
                let mut rng = master.clone();
                rng.set_stream(unit_idx as u64 * trials as u64 + trial as u64);
                rng.set_word_pos(0);
                f64::fill_uniform_pm1(&mut rng, &mut noised);
                for (n, &r) in noised.iter_mut().zip(row) {
                    *n = r + scale * *n;
                }
                let hit = nearest_token_with(table, &noised, metric)?;
                if canonical[hit as usize] != canonical[orig as usize] {
                    events += 1;
                    flipped.insert(orig);
                }
            }
        }
    }

    let flips = match counting {
        FlipCounting::PerDraw => events,
        FlipCounting::UniqueTokens => flipped.len(),
    };
    let denom = match counting {
        FlipCounting::PerDraw => units.len() * trials,
        FlipCounting::UniqueTokens => units.len(),
    };
    Ok(FlipReport {
        alpha,
        l_used: l,
        trials,
        examined: units.len(),
        flips,
        flip_fraction: flips as f64 / denom as f64,
        flipped_ids: flipped.into_iter().collect(),
    })
}

/// Per-trial, noises every position's embedding at scale α/√(L·d) and
/// counts positions whose nearest row changes; reports the mean fraction.
pub fn sentence_flip_rate(
    table: &EmbeddingTable,
    token_ids: &[u32],
    alpha: f64,
    l: usize,
    trials: usize,
    rng: &ChaCha8Rng,
) -> Result<FlipReport> {
    sentence_flip_rate_with(
        table,
        token_ids,
        alpha,
        l,
        trials,
        Metric::Euclidean,
        FlipCounting::PerDraw,
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn sentence_flip_rate_with(
    table: &EmbeddingTable,
    token_ids: &[u32],
    alpha: f64,
    l: usize,
    trials: usize,
    metric: Metric,
    counting: FlipCounting,
    rng: &ChaCha8Rng,
) -> Result<FlipReport> {
    if token_ids.is_empty() {
        return Err(Error::invalid("sentence flip rate needs a nonempty sentence"));
    }
    flip_scan(table, token_ids, alpha, l, trials, metric, counting, rng)
}

/// Sweeps every vocabulary id once per trial.
pub fn vocab_flip_count(
    table: &EmbeddingTable,
    alpha: f64,
    l: usize,
    trials: usize,
    rng: &ChaCha8Rng,
) -> Result<FlipReport> {
    vocab_flip_count_with(
        table,
        alpha,
        l,
        trials,
        Metric::Euclidean,
        FlipCounting::PerDraw,
        rng,
    )
}

pub fn vocab_flip_count_with(
    table: &EmbeddingTable,
    alpha: f64,
    l: usize,
    trials: usize,
    metric: Metric,
    counting: FlipCounting,
    rng: &ChaCha8Rng,
) -> Result<FlipReport> {
    let ids: Vec<u32> = (0..table.v as u32).collect();
    flip_scan(table, &ids, alpha, l, trials, metric, counting, rng)
}

pub const FLIP_CSV_HEADER: &str = "alpha,l,trials,flips,flip_fraction,format_version";
pub const FLIP_CSV_FORMAT_VERSION: u32 = 1;

pub fn flip_sweep_csv(reports: &[FlipReport]) -> String {
    let mut out = String::from(FLIP_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.alpha, r.l_used, r.trials, r.flips, r.flip_fraction, FLIP_CSV_FORMAT_VERSION
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Cosine,
    Gram,
}

/// Dense symmetric matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<SquareMatrix> {
        if n == 0 || data.len() != n * n {
            return Err(Error::invalid(format!(
                "square matrix needs n ≥ 1 and n² values, got n = {n}, len = {}",
                data.len()
            )));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn is_symmetric(&self) -> bool {
        let scale = 1.0 + self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if (self.get(i, j) - self.get(j, i)).abs() > 1e-12 * scale {
                    return false;
                }
            }
        }
        true
    }
}

/// Cosine similarity (unit diagonal, zero-norm rows rejected) or the raw
/// Gram matrix of inner products.
pub fn similarity_matrix(table: &EmbeddingTable, kind: SimilarityKind) -> Result<SquareMatrix> {
    let v = table.v;
    let norms: Vec<f64> = (0..v)
        .map(|i| table.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if kind == SimilarityKind::Cosine {
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::invalid(format!(
                "cosine similarity: row {i} has zero norm"
            )));
        }
    }
    let mut data = vec![0.0f64; v * v];
    for i in 0..v {
        for j in i..v {
            let dot: f64 = table.row(i).iter().zip(table.row(j)).map(|(a, b)| a * b).sum();
            let s = match kind {
                SimilarityKind::Cosine => {
                    if i == j {
                        1.0
                    } else {
                        dot / (norms[i] * norms[j])
                    }
                }
                SimilarityKind::Gram => dot,
            };
            data[i * v + j] = s;
            data[j * v + i] = s;
        }
    }
    SquareMatrix::new(v, data)
}

const EIGEN_TOL: f64 = 1e-10;
const EIGEN_MAX_ITERS: usize = 10_000;
const EIGEN_SEED: u64 = 0x9d1e_57a6;

fn matvec(s: &SquareMatrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = s.data[i * s.n..(i + 1) * s.n]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Subtracts the projections of `v` onto each basis vector.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        for (x, &y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

/// Matrices up to this order get a full dense decomposition; larger ones
/// use deflated power iteration. The iterative path's convergence rate
/// degrades when the positivity shift dwarfs the eigengaps, which is
/// common already at moderate sizes, so dense is the default for every
/// vocabulary this lab actually runs.
pub const DENSE_EIGEN_MAX_N: usize = 512;

const JACOBI_MAX_SWEEPS: usize = 64;

/// Top-k eigenvalues of a symmetric matrix, descending. Small matrices
/// (n ≤ [`DENSE_EIGEN_MAX_N`]) are fully diagonalized with cyclic Jacobi
/// rotations; larger ones use deflated power iteration on the
/// Gershgorin-shifted matrix A + cI (the shift makes the spectrum
/// non-negative so each deflation step's dominant eigenvalue is the
/// next-largest eigenvalue of A). Both paths are deterministic: Jacobi
/// uses no randomness and the power path's start vectors come from a
/// fixed internal seed.
pub fn topk_eigenvalues(s: &SquareMatrix, k: usize) -> Result<Vec<f64>> {
    if !s.is_symmetric() {
        return Err(Error::invalid("eigenvalue analysis needs a symmetric matrix"));
    }
    if k > s.n {
        return Err(Error::invalid(format!(
            "asked for {k} eigenvalues of a {n}×{n} matrix",
            n = s.n
        )));
    }
    if s.n <= DENSE_EIGEN_MAX_N {
        let mut eigs = jacobi_eigenvalues(s)?;
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eigs.truncate(k);
        Ok(eigs)
    } else {
        deflated_power_topk(s, k)
    }
}

/// Full spectrum by cyclic Jacobi: repeatedly applies Givens rotations
/// zeroing each off-diagonal entry until the off-diagonal Frobenius norm
/// falls below tolerance. Quadratically convergent; sweep exhaustion is
/// reported as non-convergence with the remaining residual.
fn jacobi_eigenvalues(s: &SquareMatrix) -> Result<Vec<f64>> {
    let n = s.n;
    let mut a = s.data.clone();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let mut off = off_diagonal_norm(&a, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off <= EIGEN_TOL * scale {
            return Ok((0..n).map(|i| a[i * n + i]).collect());
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle zeroing a[p][q] (Golub & Van Loan).
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // A ← A·G, then A ← Gᵀ·A.
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - sn * aiq;
                    a[i * n + q] = sn * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - sn * aqj;
                    a[q * n + j] = sn * apj + c * aqj;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
            }
        }
        off = off_diagonal_norm(&a, n);
    }
    Err(Error::EigenNoConvergence {
        iters: JACOBI_MAX_SWEEPS,
        residual: off,
    })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[i * n + j] * a[i * n + j];
            }
        }
    }
    sum.sqrt()
}

fn deflated_power_topk(s: &SquareMatrix, k: usize) -> Result<Vec<f64>> {
    let n = s.n;
    // c ≥ −λ_min via Gershgorin: λ ≥ min_i (a_ii − Σ_{j≠i} |a_ij|).
    let c = (0..n)
        .map(|i| {
            let off: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| s.get(i, j).abs())
                .sum();
            off - s.get(i, i)
        })
        .fold(0.0f64, f64::max);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(EIGEN_SEED);
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut mus: Vec<f64> = Vec::new();
    let mut w = vec![0.0f64; n];

    while mus.len() < k {
        let mut v = loop {
            let mut cand: Vec<f64> = (0..n).map(|_| f64::std_normal(&mut rng)).collect();
            orthogonalize(&mut cand, &found);
            let nv = norm(&cand);
            if nv > 1e-8 {
                for x in cand.iter_mut() {
                    *x /= nv;
                }
                break cand;
            }
        };

        let mut converged = false;
        let mut residual = f64::INFINITY;
        for _ in 0..EIGEN_MAX_ITERS {
            // w = (A + cI)v deflated by the eigenpairs already found.
            matvec(s, &v, &mut w);
            for (wi, &vi) in w.iter_mut().zip(&v) {
                *wi += c * vi;
            }
            for (b, &mu) in found.iter().zip(&mus) {
                let p = mu * dot(&v, b);
                for (wi, &bi) in w.iter_mut().zip(b) {
                    *wi -= p * bi;
                }
            }
            orthogonalize(&mut w, &found);

            let mu = dot(&v, &w);
            residual = w
                .iter()
                .zip(&v)
                .map(|(&wi, &vi)| (wi - mu * vi) * (wi - mu * vi))
                .sum::<f64>()
                .sqrt();
            if residual <= EIGEN_TOL * mu.abs().max(1.0) {
                mus.push(mu);
                found.push(v.clone());
                converged = true;
                break;
            }
            let nw = norm(&w);
            if nw == 0.0 {
                // v spans the null space of the deflated shifted matrix.
                mus.push(0.0);
                found.push(v.clone());
                converged = true;
                break;
            }
            for (vi, &wi) in v.iter_mut().zip(&w) {
                *vi = wi / nw;
            }
        }
        if !converged {
            return Err(Error::EigenNoConvergence {
                iters: EIGEN_MAX_ITERS,
                residual,
            });
        }
    }

    let mut eigs: Vec<f64> = mus.into_iter().map(|mu| mu - c).collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(eigs)
}

pub const EIGEN_CSV_HEADER: &str = "index,eigenvalue,format_version";

pub fn eigenvalues_csv(eigs: &[f64]) -> String {
    let mut out = String::from(EIGEN_CSV_HEADER);
    out.push('\n');
    for (i, e) in eigs.iter().enumerate() {
        out.push_str(&format!("{i},{e},{}\n", FLIP_CSV_FORMAT_VERSION));
    }
    out
}
