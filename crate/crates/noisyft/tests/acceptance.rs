//! Acceptance checklist: ten end-to-end checks, one test and one printed
//! pass/fail line each. Run with `--nocapture` to see the lines for
//! passing tests; failures always show theirs.
//!
//!  1. Scaled-noise norm law: mean ‖noise‖ ≈ α/√3 across shapes.
//!  2. α=0 training is bit-identical to a loop with no noise path at all.
//!  3. Analytic gradients match central finite differences.
//!  4. Direction of effect: embedding noise hurts training-set
//!     memorization (higher clean train loss, lower train ROUGE-L).
//!  5. ROUGE-L and BLEU match exhaustive oracles plus a worked example.
//!  6. Nearest-neighbor flips: zero at α=0, monotone in α, zero on a
//!     well-separated orthonormal table.
//!  7. Top-k eigenvalues match a dense eigensolver.
//!  8. Tie-discarding win score reproduces the (88, 22, 140) reference.
//!  9. Decoding contracts: EOS blocking, repetition-penalty flip,
//!     greedy determinism.
//! 10. Freeze flags pin exactly their parameter block.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noisyft::embedlab::{
    similarity_matrix, topk_eigenvalues, vocab_flip_count, EmbeddingTable, SimilarityKind,
};
use noisyft::generate::{
    adjust_logits_repetition_penalty, generate, DecodeMode, GenerationConfig,
};
use noisyft::model::{
    embed_lookup, forward, init_model, masked_cross_entropy_grad, Batch, ModelConfig, ModelParams,
    ParamBlock,
};
use noisyft::noise::{
    expected_noise_norm, frobenius_norm, sample_scaled_noise_into, NoiseSpec,
};
use noisyft::optim::{FreezeSpec, OptState, OptimizerConfig};
use noisyft::textmetrics::{bleu, lcs_length, rouge_l, WordSequence};
use noisyft::train::{eval_loss, train_step};
use noisyft::vocab::{Vocab, EOS_ID};

fn report(name: &str, ok: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

/// Builds a next-token batch from (ids, prompt_len) pairs: inputs are
/// ids[..n-1], targets ids[1..], and position t enters the loss iff its
/// target index t+1 is at or past prompt_len.
fn make_batch(seqs: &[(Vec<u32>, usize)], pad: u32) -> Batch {
    let max_len = seqs.iter().map(|(ids, _)| ids.len() - 1).max().unwrap();
    let mut token_ids = vec![pad; seqs.len() * max_len];
    let mut targets = vec![pad; seqs.len() * max_len];
    let mut loss_mask = vec![false; seqs.len() * max_len];
    let mut lengths = Vec::with_capacity(seqs.len());
    for (b, (ids, prompt_len)) in seqs.iter().enumerate() {
        let n = ids.len() - 1;
        lengths.push(n);
        for t in 0..n {
            token_ids[b * max_len + t] = ids[t];
            targets[b * max_len + t] = ids[t + 1];
            loss_mask[b * max_len + t] = t + 1 >= *prompt_len;
        }
    }
    Batch {
        token_ids,
        lengths,
        loss_mask,
        targets,
        max_len,
    }
}

fn all_bits<T: noisyft::tensor::Element>(params: &ModelParams<T>) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    params.visit(|name, _, t| {
        out.push((name, t.data().iter().map(|&v| v.to_f64().to_bits()).collect()));
    });
    out
}

// 1 ─────────────────────────────────────────────────────────────────────

#[test]
fn noise_norm_law_holds_across_shapes() {
    let cases = [(5.0, 256usize, 256usize), (10.0, 512, 128), (15.0, 64, 1024)];
    let draws = 10_000;
    let mut ok = true;
    let mut details = Vec::new();
    for (alpha, l, d) in cases {
        let spec = NoiseSpec::uniform(alpha, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
        let mut buf = vec![0f32; l * d];
        let mut sum = 0.0f64;
        for _ in 0..draws {
            sample_scaled_noise_into(&mut buf, 1, l, d, &[l], &spec, &mut rng).unwrap();
            sum += frobenius_norm(&buf);
        }
        let mean = sum / draws as f64;
        let target = expected_noise_norm(alpha);
        let rel = (mean - target).abs() / target;
        ok &= rel < 0.02;
        details.push(format!("α={alpha} L={l} d={d}: mean {mean:.4} vs {target:.4} (rel {rel:.2e})"));
    }
    report(
        "noise-norm law (mean ‖noise‖ within 2% of α/√3 over 1e4 draws)",
        ok,
        &details.join("; "),
    );
}

// 2 ─────────────────────────────────────────────────────────────────────

#[test]
fn zero_alpha_training_is_bitwise_identical_to_noise_free_loop() {
    // ~100-symbol vocabulary: printable ASCII plus a few extras.
    let mut charset: String = (33u8..=126).map(|b| b as char).collect();
    charset.push(' ');
    charset.push_str("äöüß");
    let vocab = Vocab::from_corpus([charset.as_str()]).unwrap();

    let config = ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 64,
        max_seq_len: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 128,
        tie_lm_head: false,
    };
    let chars: Vec<char> = charset.chars().collect();
    let seqs: Vec<(Vec<u32>, usize)> = (0..8)
        .map(|i| {
            let text: String = chars.iter().cycle().skip(7 * i).take(32).collect();
            (vocab.encode(&text), 1)
        })
        .collect();
    let batch = make_batch(&seqs, 0);

    let steps = 50;
    let opt_config = OptimizerConfig {
        learning_rate: 1e-3,
        ..OptimizerConfig::default()
    };

    // Route A: the training step with the noise machinery at α = 0.
    let mut a: ModelParams<f32> = init_model(&config, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let mut opt_a = OptState::new(&a, opt_config.clone());
    let spec = NoiseSpec::uniform(0.0, 7);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(7);
    let rng_pos_before = noise_rng.get_word_pos();
    for _ in 0..steps {
        train_step(&mut a, &mut opt_a, &batch, &spec, &FreezeSpec::default(), &mut noise_rng)
            .unwrap();
    }
    let rng_untouched = noise_rng.get_word_pos() == rng_pos_before;

    // Route B: a hand-rolled loop that never touches the noise module.
    let mut b: ModelParams<f32> = init_model(&config, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let mut opt_b = OptState::new(&b, opt_config);
    for _ in 0..steps {
        b.zero_grads();
        let x = embed_lookup(&b, &batch).unwrap();
        let trace = forward(&b, &x, &batch.lengths).unwrap();
        let ce = masked_cross_entropy_grad(&trace.logits, &batch).unwrap();
        let mut dlogits = ce.dlogits_unscaled;
        let scale = 1.0 / ce.count as f32;
        for v in dlogits.data_mut() {
            *v *= scale;
        }
        noisyft::model::backward(&mut b, &batch, &trace, &dlogits).unwrap();
        opt_b.apply_step(&mut b, &FreezeSpec::default()).unwrap();
    }

    let identical = all_bits(&a) == all_bits(&b);
    report(
        "zero-noise reduction (α=0 bit-identical to noise-free loop, 50 steps)",
        identical && rng_untouched,
        &format!(
            "vocab {} params, bitwise equal: {identical}, rng untouched: {rng_untouched}",
            vocab.size()
        ),
    );
}

// 3 ─────────────────────────────────────────────────────────────────────

#[test]
fn analytic_gradients_match_finite_differences() {
    let config = ModelConfig {
        vocab_size: 32,
        embed_dim: 16,
        max_seq_len: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 24,
        tie_lm_head: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut params: ModelParams<f64> = init_model(&config, &mut rng).unwrap();
    let seqs: Vec<(Vec<u32>, usize)> = [9usize, 7]
        .iter()
        .map(|&n| {
            let ids: Vec<u32> = (0..=n).map(|_| rng.random_range(0..32)).collect();
            (ids, 3)
        })
        .collect();
    let batch = make_batch(&seqs, 0);
    let r = noisyft::model::gradcheck::finite_difference_check(&mut params, &batch, 200, &mut rng)
        .unwrap();
    let ok = r.max_rel_err < 1e-4 && r.checked >= 150;
    report(
        "gradient oracle (autodiff vs central differences, 200 samples, <1e-4)",
        ok,
        &format!("max rel err {:.3e} over {} checked ({} skipped)", r.max_rel_err, r.checked, r.skipped),
    );
}

// 4 ─────────────────────────────────────────────────────────────────────

const ADJS: [&str; 8] = ["quiet", "bright", "ancient", "velvet", "shiny", "hollow", "amber", "misty"];
const NOUNS: [&str; 8] = ["river", "lantern", "falcon", "meadow", "anchor", "thimble", "orchard", "compass"];
const COLORS: [&str; 8] = ["red", "blue", "green", "golden", "silver", "violet", "crimson", "teal"];
const OBJECTS: [&str; 8] = ["stone", "feather", "ribbon", "candle", "marble", "button", "acorn", "bell"];
const PLACES: [&str; 8] = ["gate", "harbor", "bridge", "tower", "garden", "valley", "market", "shore"];

fn memorization_pairs() -> Vec<(String, String)> {
    (0..64)
        .map(|i| {
            let instruction = format!("describe the {} {}", ADJS[i % 8], NOUNS[i / 8]);
            let output = format!(
                "a {} {} rests near the {}",
                COLORS[(i * 3 + 1) % 8],
                OBJECTS[(i * 5 + 2) % 8],
                PLACES[(i * 7 + 3) % 8]
            );
            (instruction, output)
        })
        .collect()
}

struct MemorizationOutcome {
    clean_loss: f64,
    rouge_f: f64,
}

/// Trains on the 64 pairs and reports final noise-free train loss plus
/// mean greedy train-set ROUGE-L F1.
fn train_memorizer(alpha: f64, master_seed: u64) -> MemorizationOutcome {
    let pairs = memorization_pairs();
    let corpus: Vec<String> = pairs
        .iter()
        .map(|(ins, out)| format!("{ins}\n{out}"))
        .collect();
    let vocab = Vocab::from_corpus(corpus.iter().map(|s| s.as_str())).unwrap();

    let config = ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 32,
        max_seq_len: 80,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 64,
        tie_lm_head: false,
    };

    let seqs: Vec<(Vec<u32>, usize)> = pairs
        .iter()
        .map(|(ins, out)| {
            let prompt_len = vocab.encode(&format!("{ins}\n")).len();
            let mut ids = vocab.encode(&format!("{ins}\n{out}"));
            ids.push(EOS_ID);
            (ids, prompt_len)
        })
        .collect();

    let mut params: ModelParams<f32> =
        init_model(&config, &mut ChaCha8Rng::seed_from_u64(master_seed)).unwrap();
    let mut opt = OptState::new(
        &params,
        OptimizerConfig {
            learning_rate: 2e-3,
            ..OptimizerConfig::default()
        },
    );
    let spec = NoiseSpec::uniform(alpha, master_seed.wrapping_add(2));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(master_seed.wrapping_add(1));

    let epochs = 75;
    let batch_size = 16;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut data_rng);
        for chunk in order.chunks(batch_size) {
            let batch_seqs: Vec<(Vec<u32>, usize)> =
                chunk.iter().map(|&i| seqs[i].clone()).collect();
            let batch = make_batch(&batch_seqs, 0);
            train_step(&mut params, &mut opt, &batch, &spec, &FreezeSpec::default(), &mut noise_rng)
                .unwrap();
        }
    }

    let eval_batches: Vec<Batch> = seqs.chunks(batch_size).map(|c| make_batch(c, 0)).collect();
    let clean_loss = eval_loss(&params, &eval_batches).unwrap();

    let gen = GenerationConfig {
        mode: DecodeMode::Greedy,
        repetition_penalty: 1.0,
        max_new_tokens: 48,
        ..GenerationConfig::default()
    };
    let mut sample_rng = ChaCha8Rng::seed_from_u64(master_seed.wrapping_add(3));
    let mut rouge_sum = 0.0;
    for (ins, out) in &pairs {
        let prompt = vocab.encode(&format!("{ins}\n"));
        let completion_ids = generate(&params, &prompt, &gen, &mut sample_rng).unwrap();
        let completion = vocab.decode(&completion_ids);
        rouge_sum += rouge_l(
            &WordSequence::normalize(&completion),
            &WordSequence::normalize(out),
        )
        .f;
    }
    MemorizationOutcome {
        clean_loss,
        rouge_f: rouge_sum / pairs.len() as f64,
    }
}

#[test]
fn embedding_noise_impairs_training_set_memorization() {
    let seeds = [1000u64, 2000, 3000];
    let baselines: Vec<MemorizationOutcome> =
        seeds.iter().map(|&s| train_memorizer(0.0, s)).collect();

    let mut ok = true;
    let mut details = Vec::new();
    for alpha in [5.0, 15.0] {
        let noised: Vec<MemorizationOutcome> =
            seeds.iter().map(|&s| train_memorizer(alpha, s)).collect();
        let loss_up = noised
            .iter()
            .zip(&baselines)
            .filter(|(n, b)| n.clean_loss > b.clean_loss)
            .count();
        let rouge_down = noised
            .iter()
            .zip(&baselines)
            .filter(|(n, b)| n.rouge_f < b.rouge_f)
            .count();
        ok &= loss_up >= 2 && rouge_down >= 2;
        let fmt = |v: &[MemorizationOutcome]| {
            v.iter()
                .map(|o| format!("{:.4}/{:.4}", o.clean_loss, o.rouge_f))
                .collect::<Vec<_>>()
                .join(" ")
        };
        details.push(format!(
            "α={alpha}: clean train loss up in {loss_up}/3 seeds, train ROUGE-L down in {rouge_down}/3 \
             (loss/rouge per seed: base [{}], noised [{}])",
            fmt(&baselines),
            fmt(&noised),
        ));
    }
    report(
        "overfitting direction (noise raises clean train loss and lowers train ROUGE-L in ≥2/3 seeds)",
        ok,
        &details.join("; "),
    );
}

// 5 ─────────────────────────────────────────────────────────────────────

/// Longest subsequence of `a` that is also a subsequence of `b`, by
/// enumerating all 2^|a| subsequences.
fn lcs_exhaustive(a: &[&str], b: &[&str]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let picked: Vec<&str> = (0..a.len())
            .filter(|&i| mask >> i & 1 == 1)
            .map(|i| a[i])
            .collect();
        if picked.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if picked.iter().all(|w| it.any(|x| x == w)) {
            best = picked.len();
        }
    }
    best
}

/// Direct BLEU recomputation from positional n-gram counting.
fn bleu_brute(candidate: &[&str], reference: &[&str], max_n: usize) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if candidate.len() < n {
            return 0.0;
        }
        let total = candidate.len() - n + 1;
        let mut clipped = 0usize;
        let mut used = vec![false; reference.len()];
        for i in 0..total {
            let gram = &candidate[i..i + n];
            let found = (0..reference.len().saturating_sub(n - 1)).find(|&j| {
                !used[j] && &reference[j..j + n] == gram
            });
            if let Some(j) = found {
                used[j] = true;
                clipped += 1;
            }
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision_part = (log_sum / max_n as f64).exp();
    let bp = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    precision_part * bp
}

fn word_seq(words: &[&str]) -> WordSequence {
    WordSequence::from_tokens(words.iter().map(|w| w.to_string()).collect()).unwrap()
}

#[test]
fn overlap_metrics_match_exhaustive_oracles() {
    let alphabet = ["a", "b", "c", "d"];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut lcs_ok = true;
    for _ in 0..1000 {
        let len_a = rng.random_range(0..=10usize);
        let len_b = rng.random_range(0..=10usize);
        let a: Vec<&str> = (0..len_a).map(|_| alphabet[rng.random_range(0..4)]).collect();
        let b: Vec<&str> = (0..len_b).map(|_| alphabet[rng.random_range(0..4)]).collect();
        let fast = lcs_length(&word_seq(&a), &word_seq(&b));
        let slow = lcs_exhaustive(&a, &b);
        lcs_ok &= fast == slow;
    }

    let mut bleu_ok = true;
    for _ in 0..300 {
        let len_c = rng.random_range(0..=12usize);
        let len_r = rng.random_range(0..=12usize);
        let c: Vec<&str> = (0..len_c).map(|_| alphabet[rng.random_range(0..3)]).collect();
        let r: Vec<&str> = (0..len_r).map(|_| alphabet[rng.random_range(0..3)]).collect();
        let fast = bleu(&word_seq(&c), &word_seq(&r), 4);
        let slow = bleu_brute(&c, &r, 4);
        bleu_ok &= (fast - slow).abs() < 1e-12;
    }

    let worked = bleu(
        &WordSequence::normalize("a b c d"),
        &WordSequence::normalize("a b c d e"),
        4,
    );
    let worked_ok = (worked - 0.7788).abs() < 1e-4;

    report(
        "metric oracles (LCS exhaustive ×1000, BLEU brute force ×300, worked example)",
        lcs_ok && bleu_ok && worked_ok,
        &format!("lcs {lcs_ok}, bleu {bleu_ok}, \"a b c d\" vs \"a b c d e\" = {worked:.4}"),
    );
}

// 6 ─────────────────────────────────────────────────────────────────────

fn random_table(v: usize, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..v)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    EmbeddingTable::from_rows(&rows).unwrap()
}

#[test]
fn flip_rates_are_zero_at_alpha_zero_monotone_in_alpha_and_zero_when_separated() {
    let rng = ChaCha8Rng::seed_from_u64(0xF11B);

    let small = random_table(16, 8, 1);
    let zero = vocab_flip_count(&small, 0.0, 16, 50, &rng).unwrap();
    let zero_ok = zero.flips == 0;

    let table = random_table(64, 32, 2);
    let fractions: Vec<f64> = [1.0, 10.0, 100.0]
        .iter()
        .map(|&a| vocab_flip_count(&table, a, 16, 200, &rng).unwrap().flip_fraction)
        .collect();
    let monotone_ok =
        fractions[0] <= fractions[1] && fractions[1] <= fractions[2] && fractions[2] > 0.0;

    // Orthonormal rows at pairwise distance √2; with α=15, L=512, d=8 the
    // noise norm is bounded by 15/√512 · √8 ≈ 0.66 < √2/2, so no draw can
    // cross a midpoint and flips are impossible, not merely rare.
    let eye: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let ortho = EmbeddingTable::from_rows(&eye).unwrap();
    let sep = vocab_flip_count(&ortho, 15.0, 512, 500, &rng).unwrap();
    let sep_ok = sep.flips == 0;

    report(
        "flip analysis (α=0 → 0; monotone over α∈{1,10,100}; separated table → 0)",
        zero_ok && monotone_ok && sep_ok,
        &format!(
            "zero-α flips {}, fractions {:?}, orthonormal flips {} over {} draws",
            zero.flips,
            fractions,
            sep.flips,
            sep.examined * sep.trials
        ),
    );
}

// 7 ─────────────────────────────────────────────────────────────────────

fn random_symmetric(n: usize, seed: u64) -> noisyft::embedlab::SquareMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rng.random_range(-1.0..1.0);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    noisyft::embedlab::SquareMatrix::new(n, data).unwrap()
}

fn dense_top_eigenvalues(m: &noisyft::embedlab::SquareMatrix, k: usize) -> Vec<f64> {
    let n = m.n();
    let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| m.get(i, j));
    let mut eigs: Vec<f64> = dm.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs.truncate(k);
    eigs
}

#[test]
fn topk_eigenvalues_match_dense_oracle() {
    let mut ok = true;
    let mut details = Vec::new();
    for (n, seed) in [(8usize, 3u64), (64, 4)] {
        let m = random_symmetric(n, seed);
        let mine = topk_eigenvalues(&m, 8.min(n)).unwrap();
        let oracle = dense_top_eigenvalues(&m, 8.min(n));
        let scale = oracle.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        let err = mine
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0f64, f64::max);
        ok &= err < 1e-6;
        details.push(format!("{n}×{n} rel err {err:.2e}"));
    }

    let eye: Vec<Vec<f64>> = (0..6)
        .map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let table = EmbeddingTable::from_rows(&eye).unwrap();
    let sim = similarity_matrix(&table, SimilarityKind::Cosine).unwrap();
    let spectrum = topk_eigenvalues(&sim, 6).unwrap();
    let identity_ok = spectrum.iter().all(|v| (v - 1.0).abs() < 1e-9);
    ok &= identity_ok;
    details.push(format!("identity cosine spectrum {spectrum:?}"));

    report(
        "eigenvalue oracle (topk vs independent dense solver, <1e-6 of spectral radius)",
        ok,
        &details.join("; "),
    );
}

// 8 ─────────────────────────────────────────────────────────────────────

#[test]
fn win_score_reproduces_reference_value() {
    let s = noisyft::harness::win_score(88, 22, 140).unwrap();
    let ok = (s - 0.7458).abs() < 5e-4
        && noisyft::harness::win_score(0, 0, 5).unwrap() == 0.0
        && noisyft::harness::win_score(5, 0, 5).unwrap() == 1.0;
    report(
        "win-score formula ((88, 22, 140) → 0.7458 ± 5e-4)",
        ok,
        &format!("88/(140−22) = {s:.6}"),
    );
}

// 9 ─────────────────────────────────────────────────────────────────────

/// All-zero model whose logits equal `bias` at every position.
fn rigged_model(vocab: usize, bias: &[f64]) -> ModelParams<f64> {
    let config = ModelConfig {
        vocab_size: vocab,
        embed_dim: 4,
        max_seq_len: 32,
        n_layers: 1,
        n_heads: 1,
        ffn_dim: 4,
        tie_lm_head: false,
    };
    let mut params: ModelParams<f64> =
        init_model(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    params.visit_mut(|_, _, t| t.data_mut().fill(0.0));
    for layer in &mut params.layers {
        layer.ln1_gamma.data_mut().fill(1.0);
        layer.ln2_gamma.data_mut().fill(1.0);
    }
    params.final_norm_gamma.data_mut().fill(1.0);
    params.head_b.data_mut().copy_from_slice(bias);
    params
}

#[test]
fn decoding_contracts_hold() {
    // EOS carries the top logit; id 4 is runner-up. Five forced emissions,
    // then EOS ends generation without being returned.
    let params = rigged_model(6, &[0.0, 3.0, 0.0, 0.0, 2.0, 0.5]);
    let gen = GenerationConfig {
        mode: DecodeMode::Greedy,
        repetition_penalty: 1.0,
        min_new_tokens: 5,
        max_new_tokens: 10,
        ..GenerationConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = generate(&params, &[3], &gen, &mut rng).unwrap();
    let eos_ok = out == vec![4, 4, 4, 4, 4];

    let mut row = [1.1, 1.0];
    adjust_logits_repetition_penalty(&mut row, [0u32], 1.2);
    let flip_argmax = if row[1] > row[0] { 1 } else { 0 };
    let flip_ok = flip_argmax == 1;

    let config = ModelConfig {
        vocab_size: 24,
        embed_dim: 16,
        max_seq_len: 32,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 24,
        tie_lm_head: false,
    };
    let model: ModelParams<f32> = init_model(&config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let greedy = GenerationConfig {
        mode: DecodeMode::Greedy,
        max_new_tokens: 16,
        ..GenerationConfig::default()
    };
    let runs: Vec<Vec<u32>> = (0..10)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            generate(&model, &[5, 3, 2], &greedy, &mut rng).unwrap()
        })
        .collect();
    let deterministic_ok = runs.windows(2).all(|w| w[0] == w[1]);

    report(
        "decoding contracts (EOS blocking, penalty flip, greedy determinism ×10)",
        eos_ok && flip_ok && deterministic_ok,
        &format!(
            "min-new output {out:?}, penalized row {row:?} → argmax {flip_argmax}, deterministic {deterministic_ok}"
        ),
    );
}

// 10 ────────────────────────────────────────────────────────────────────

#[test]
fn freeze_flags_pin_exactly_their_parameter_block() {
    let config = ModelConfig {
        vocab_size: 20,
        embed_dim: 16,
        max_seq_len: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 24,
        tie_lm_head: false,
    };
    let mut data_rng = ChaCha8Rng::seed_from_u64(77);
    let seqs: Vec<(Vec<u32>, usize)> = (0..2)
        .map(|_| {
            let ids: Vec<u32> = (0..13).map(|_| data_rng.random_range(0..20u32)).collect();
            (ids, 1)
        })
        .collect();
    let batch = make_batch(&seqs, 0);

    let freeze_cases = [
        (
            "freeze_embed",
            FreezeSpec {
                freeze_embed: true,
                ..FreezeSpec::default()
            },
            ParamBlock::Embed,
        ),
        (
            "freeze_attention_blocks",
            FreezeSpec {
                freeze_attention_blocks: true,
                ..FreezeSpec::default()
            },
            ParamBlock::Attention,
        ),
        (
            "freeze_lm_head",
            FreezeSpec {
                freeze_lm_head: true,
                ..FreezeSpec::default()
            },
            ParamBlock::Head,
        ),
    ];

    let mut ok = true;
    let mut details = Vec::new();
    for (flag_name, freeze, frozen_block) in freeze_cases {
        let mut params: ModelParams<f32> =
            init_model(&config, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let before = all_bits(&params);
        let mut opt = OptState::new(
            &params,
            OptimizerConfig {
                learning_rate: 1e-2,
                ..OptimizerConfig::default()
            },
        );
        let spec = NoiseSpec::uniform(0.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            train_step(&mut params, &mut opt, &batch, &spec, &freeze, &mut rng).unwrap();
        }

        let mut blocks: Vec<(String, ParamBlock)> = Vec::new();
        params.visit(|name, block, _| blocks.push((name, block)));
        let after = all_bits(&params);
        let mut frozen_intact = true;
        let mut others_changed = true;
        for (((name, block), (_, bits_before)), (_, bits_after)) in
            blocks.iter().zip(&before).zip(&after)
        {
            let unchanged = bits_before == bits_after;
            if *block == frozen_block {
                frozen_intact &= unchanged;
            } else {
                others_changed &= !unchanged;
            }
            if (*block == frozen_block) != unchanged {
                details.push(format!("{flag_name}: unexpected state for {name}"));
            }
        }
        ok &= frozen_intact && others_changed;
        details.push(format!(
            "{flag_name}: frozen intact {frozen_intact}, others changed {others_changed}"
        ));
    }

    report(
        "freezing contract (each flag pins its block over 20 steps, others move)",
        ok,
        &details.join("; "),
    );
}
