//! Run orchestration: tokenize, batch, train with gradient accumulation,
//! and dump generations from checkpoints.
//!
//! A run directory is named `{config-hash}_{UTC-timestamp}` (with a
//! numeric suffix on collision) and receives the resolved config, a loss
//! CSV, and `init`/`final` checkpoints. Files are only ever added within
//! a run directory, never overwritten, so sweeps cannot clobber each
//! other. Everything downstream of the seeds is deterministic: identical
//! configs produce byte-identical checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::generate::{generate, DecodeMode, GenerationConfig};
use crate::model::{init_model, Batch, ModelParams};
use crate::optim::OptState;
use crate::train::{accumulate_grads, eval_loss};
use crate::vocab::{Vocab, EOS_ID, PAD_ID};

use super::config::RunConfig;
use super::dataset::load_dataset;
use super::prompt::build_prompt;

pub const LOSS_CSV_HEADER: &str = "step,train_loss,train_loss_clean,eval_loss,format_version";
pub const LOSS_CSV_FORMAT_VERSION: u32 = 1;
pub const GENERATION_FORMAT_VERSION: u32 = 1;

/// One tokenized training example: prompt ids are a prefix of `ids`,
/// which ends with EOS unless the length cap truncated it.
#[derive(Debug, Clone)]
struct PreparedExample {
    ids: Vec<u32>,
    prompt_len: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub final_checkpoint: Option<PathBuf>,
    pub vocab_size: usize,
}

fn prepare_examples(
    config: &RunConfig,
    examples: &[super::dataset::InstructionExample],
    seq_len: usize,
    vocab: &Vocab,
) -> Result<Vec<PreparedExample>> {
    let mut prepared = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let prompt = build_prompt(ex, config.template, config.meta_prompt);
        let mut ids = vocab.encode(&format!("{prompt}{}", ex.output));
        ids.push(EOS_ID);
        if ids.len() > seq_len + 1 {
            ids.truncate(seq_len + 1);
        }
        let prompt_len = vocab.encode(&prompt).len();
        if prompt_len + 1 >= ids.len() {
            return Err(Error::Config(format!(
                "example {i}: sequence cap {seq_len} leaves no completion tokens \
                 (prompt alone spans {prompt_len} tokens)"
            )));
        }
        prepared.push(PreparedExample { ids, prompt_len });
    }
    Ok(prepared)
}

/// Pads a group of examples into one batch. Inputs are `ids[..n-1]`,
/// targets the ids shifted by one; only positions whose target falls in
/// the completion (or EOS) carry loss.
fn build_batch(prepared: &[PreparedExample], idxs: &[usize]) -> Batch {
    let max_len = idxs.iter().map(|&i| prepared[i].ids.len() - 1).max().unwrap();
    let b = idxs.len();
    let mut token_ids = vec![PAD_ID; b * max_len];
    let mut targets = vec![PAD_ID; b * max_len];
    let mut loss_mask = vec![false; b * max_len];
    let mut lengths = Vec::with_capacity(b);
    for (row, &i) in idxs.iter().enumerate() {
        let ex = &prepared[i];
        let n = ex.ids.len();
        let base = row * max_len;
        token_ids[base..base + n - 1].copy_from_slice(&ex.ids[..n - 1]);
        targets[base..base + n - 1].copy_from_slice(&ex.ids[1..]);
        for t in 0..n - 1 {
            loss_mask[base + t] = t + 1 >= ex.prompt_len;
        }
        lengths.push(n - 1);
    }
    Batch {
        token_ids,
        lengths,
        loss_mask,
        targets,
        max_len,
    }
}

fn create_run_dir(out_root: &Path, hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(out_root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{hash}_{stamp}");
    let mut name = base.clone();
    let mut suffix = 0u32;
    loop {
        let dir = out_root.join(&name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                suffix += 1;
                name = format!("{base}_{suffix}");
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains per the config and returns the populated run directory.
pub fn run_train(config: &RunConfig, out_root: &Path) -> Result<RunSummary> {
    let examples = load_dataset(&config.dataset)?;
    let corpus: Vec<String> = examples
        .iter()
        .map(|ex| format!("{}{}", build_prompt(ex, config.template, config.meta_prompt), ex.output))
        .collect();
    let vocab = Vocab::from_corpus(corpus.iter().map(String::as_str))?;
    let resolved = config.resolve(vocab.size())?;
    let prepared = prepare_examples(&resolved, &examples, resolved.seq_len, &vocab)?;

    let run_dir = create_run_dir(out_root, &resolved.hash())?;
    fs::write(run_dir.join("config.json"), resolved.to_canonical_json())?;

    let mut data_rng = ChaCha8Rng::seed_from_u64(resolved.seeds.data);
    let n = prepared.len();
    let (train_idx, eval_idx) = if resolved.eval_fraction > 0.0 {
        let n_eval = ((n as f64 * resolved.eval_fraction).ceil() as usize).max(1);
        if n_eval >= n {
            return Err(Error::Config(format!(
                "eval_fraction {} holds out all {n} examples",
                resolved.eval_fraction
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut data_rng);
        let mut eval: Vec<usize> = order[..n_eval].to_vec();
        let mut train: Vec<usize> = order[n_eval..].to_vec();
        eval.sort_unstable();
        train.sort_unstable();
        (train, eval)
    } else {
        ((0..n).collect(), Vec::new())
    };

    let mut params: ModelParams<f32> = init_model(
        &resolved.model,
        &mut ChaCha8Rng::seed_from_u64(resolved.seeds.init),
    )?;
    let mut opt = OptState::<f32>::new(&params, resolved.optimizer);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(resolved.noise.seed);

    let ckpt_root = run_dir.join("checkpoints");
    let init_dir = ckpt_root.join("init");
    save_checkpoint(&init_dir, &params, 0, &resolved.seeds, &vocab)?;

    // Fixed-order batches for the noise-free loss columns.
    let clean_batches: Vec<Batch> = train_idx
        .chunks(resolved.micro_batch)
        .map(|c| build_batch(&prepared, c))
        .collect();
    let eval_batches: Vec<Batch> = eval_idx
        .chunks(resolved.micro_batch)
        .map(|c| build_batch(&prepared, c))
        .collect();

    let mut loss_csv = fs::File::create(run_dir.join("loss.csv"))?;
    writeln!(loss_csv, "{LOSS_CSV_HEADER}")?;

    let steps_per_epoch = train_idx.len().div_ceil(resolved.effective_batch) as u64;
    let total_steps = resolved.epochs as u64 * steps_per_epoch;
    let mut step = 0u64;
    let log_row = |step: u64,
                   train_loss: f64,
                   params: &ModelParams<f32>,
                   loss_csv: &mut fs::File|
     -> Result<()> {
        let clean = eval_loss(params, &clean_batches)?;
        let held_out = if eval_batches.is_empty() {
            None
        } else {
            Some(eval_loss(params, &eval_batches)?)
        };
        writeln!(
            loss_csv,
            "{step},{train_loss},{clean},{},{LOSS_CSV_FORMAT_VERSION}",
            fmt_loss(held_out)
        )?;
        Ok(())
    };

    for _ in 0..resolved.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut data_rng);
        for effective in order.chunks(resolved.effective_batch) {
            let micro_batches: Vec<Batch> = effective
                .chunks(resolved.micro_batch)
                .map(|c| build_batch(&prepared, c))
                .collect();
            let total: usize = micro_batches.iter().map(Batch::masked_count).sum();
            params.zero_grads();
            let mut noised_sum = 0.0;
            for batch in &micro_batches {
                let (sum, _) = accumulate_grads(
                    &mut params,
                    batch,
                    &resolved.noise,
                    &mut noise_rng,
                    1.0 / total as f64,
                )?;
                noised_sum += sum;
            }
            let train_loss = noised_sum / total as f64;
            if !train_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    value: train_loss,
                    last_checkpoint: Some(init_dir.display().to_string()),
                });
            }
            opt.apply_step(&mut params, &resolved.freeze)?;
            step += 1;
            if step % resolved.log_interval == 0 || step == total_steps {
                log_row(step, train_loss, &params, &mut loss_csv)?;
            }
        }
    }

    let final_checkpoint = if resolved.epochs > 0 {
        let dir = ckpt_root.join("final");
        save_checkpoint(&dir, &params, step, &resolved.seeds, &vocab)?;
        Some(dir)
    } else {
        None
    };
    loss_csv.flush()?;

    Ok(RunSummary {
        run_dir,
        steps: step,
        final_checkpoint,
        vocab_size: vocab.size(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub format_version: u32,
    pub prompt: String,
    pub completion: String,
    pub token_count: usize,
    pub char_count: usize,
    /// Recorded only for sampling decode modes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sampling_seed: Option<u64>,
}

/// Decodes a completion per prompt from a checkpoint, in order, and
/// optionally writes them as JSONL.
pub fn run_generate(
    checkpoint_dir: &Path,
    prompts: &[String],
    gen: &GenerationConfig,
    sampling_seed: u64,
    out_file: Option<&Path>,
) -> Result<Vec<GenerationRecord>> {
    let (params, manifest) = load_checkpoint::<f32>(checkpoint_dir)?;
    let vocab = manifest.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed);
    let seed_field = match gen.mode {
        DecodeMode::Greedy => None,
        DecodeMode::TopP => Some(sampling_seed),
    };

    let mut records = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let ids = vocab.encode(prompt);
        let out = generate(&params, &ids, gen, &mut rng)?;
        let completion = vocab.decode(&out);
        records.push(GenerationRecord {
            format_version: GENERATION_FORMAT_VERSION,
            prompt: prompt.clone(),
            completion: completion.clone(),
            token_count: out.len(),
            char_count: completion.chars().count(),
            sampling_seed: seed_field,
        });
    }

    if let Some(path) = out_file {
        let mut f = fs::File::create(path)?;
        for r in &records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
    }
    Ok(records)
}

/// Reads a generation JSONL dump back in.
pub fn load_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: GenerationRecord = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("{}: line {}: {e}", path.display(), idx + 1)))?;
        records.push(r);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::seeds_from_master;
    use crate::harness::prompt::{MetaPrompt, TemplateId};
    use crate::model::ModelConfig;
    use crate::noise::NoiseSpec;
    use crate::optim::{FreezeSpec, OptimizerConfig};
    use std::io::Write;

    fn tiny_dataset(dir: &Path) -> PathBuf {
        let path = dir.join("data.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        for (ins, out) in [
            ("add 1 and 2", "3"),
            ("name a color", "red"),
            ("say hi", "hi"),
            ("biggest digit", "9"),
        ] {
            writeln!(
                f,
                "{}",
                serde_json::json!({ "instruction": ins, "output": out })
            )
            .unwrap();
        }
        path
    }

    fn tiny_config(dataset: PathBuf) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                vocab_size: 0,
                embed_dim: 16,
                max_seq_len: 256,
                n_layers: 1,
                n_heads: 2,
                ffn_dim: 32,
                tie_lm_head: false,
            },
            noise: NoiseSpec::default(),
            freeze: FreezeSpec::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            effective_batch: 4,
            micro_batch: 2,
            seq_len: 0,
            dataset,
            dataset_tag: "alpaca".to_string(),
            template: TemplateId::Alpaca,
            meta_prompt: MetaPrompt::None,
            generation: GenerationConfig {
                max_new_tokens: 8,
                ..GenerationConfig::default()
            },
            seeds: seeds_from_master(11),
            eval_fraction: 0.0,
            log_interval: 1,
        }
    }

    #[test]
    fn run_train_writes_the_expected_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tiny_dataset(tmp.path()));
        let summary = run_train(&cfg, &tmp.path().join("runs")).unwrap();
        assert_eq!(summary.steps, 1, "4 examples in one effective batch");

        let dir = &summary.run_dir;
        let saved = RunConfig::from_json(&fs::read_to_string(dir.join("config.json")).unwrap())
            .unwrap();
        assert!(saved.model.vocab_size > 3, "vocab size materialized");
        assert_eq!(saved.micro_batch, 2);

        let csv = fs::read_to_string(dir.join("loss.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), LOSS_CSV_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,"), "{row}");
        assert!(row.ends_with(",1"), "{row}");
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert!(fields[1].parse::<f64>().unwrap().is_finite());
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
        assert_eq!(fields[3], "", "no holdout configured");

        assert!(dir.join("checkpoints/init/manifest.json").exists());
        assert!(summary.final_checkpoint.as_ref().unwrap().join("params.bin").exists());

        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let resolved = cfg.resolve(summary.vocab_size).unwrap();
        assert!(name.starts_with(&resolved.hash()), "{name}");
    }

    #[test]
    fn epochs_zero_saves_only_the_initial_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tiny_dataset(tmp.path()));
        cfg.epochs = 0;
        let summary = run_train(&cfg, &tmp.path().join("runs")).unwrap();
        assert_eq!(summary.steps, 0);
        assert!(summary.final_checkpoint.is_none());
        assert!(summary.run_dir.join("checkpoints/init").exists());
        assert!(!summary.run_dir.join("checkpoints/final").exists());
        let csv = fs::read_to_string(summary.run_dir.join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1, "header only");
    }

    #[test]
    fn identical_configs_produce_byte_identical_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tiny_dataset(tmp.path()));
        cfg.epochs = 2;
        cfg.noise = NoiseSpec::uniform(5.0, 0);
        let a = run_train(&cfg, &tmp.path().join("runs_a")).unwrap();
        let b = run_train(&cfg, &tmp.path().join("runs_b")).unwrap();
        for file in ["manifest.json", "params.bin"] {
            let fa = fs::read(a.final_checkpoint.as_ref().unwrap().join(file)).unwrap();
            let fb = fs::read(b.final_checkpoint.as_ref().unwrap().join(file)).unwrap();
            assert_eq!(fa, fb, "{file}");
        }
    }

    #[test]
    fn zero_alpha_ignores_the_noise_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tiny_dataset(tmp.path()));
        cfg.epochs = 2;
        let a = run_train(&cfg, &tmp.path().join("runs_a")).unwrap();
        cfg.seeds.noise = 777;
        let b = run_train(&cfg, &tmp.path().join("runs_b")).unwrap();
        let fa = fs::read(a.final_checkpoint.as_ref().unwrap().join("params.bin")).unwrap();
        let fb = fs::read(b.final_checkpoint.as_ref().unwrap().join("params.bin")).unwrap();
        assert_eq!(fa, fb, "alpha 0 must never touch the noise stream");
    }

    #[test]
    fn noise_changes_training() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tiny_dataset(tmp.path()));
        let a = run_train(&cfg, &tmp.path().join("runs_a")).unwrap();
        cfg.noise = NoiseSpec::uniform(5.0, 0);
        let b = run_train(&cfg, &tmp.path().join("runs_b")).unwrap();
        let fa = fs::read(a.final_checkpoint.as_ref().unwrap().join("params.bin")).unwrap();
        let fb = fs::read(b.final_checkpoint.as_ref().unwrap().join("params.bin")).unwrap();
        assert_ne!(fa, fb);
    }

    #[test]
    fn holdout_split_populates_the_eval_column() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tiny_dataset(tmp.path()));
        cfg.eval_fraction = 0.5;
        let summary = run_train(&cfg, &tmp.path().join("runs")).unwrap();
        let csv = fs::read_to_string(summary.run_dir.join("loss.csv")).unwrap();
        let row = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert!(fields[3].parse::<f64>().unwrap().is_finite(), "{row}");
    }

    #[test]
    fn overtight_sequence_cap_is_rejected_with_the_example_index() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tiny_dataset(tmp.path()));
        cfg.model.max_seq_len = 64;
        cfg.seq_len = 64;
        let err = run_train(&cfg, &tmp.path().join("runs")).unwrap_err();
        assert!(err.to_string().contains("example 0"), "{err}");
    }

    #[test]
    fn generate_round_trip_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tiny_dataset(tmp.path()));
        let summary = run_train(&cfg, &tmp.path().join("runs")).unwrap();
        let ckpt = summary.final_checkpoint.unwrap();

        let prompts = vec!["add 1".to_string(), "name a".to_string()];
        let out_a = tmp.path().join("gen_a.jsonl");
        let recs = run_generate(&ckpt, &prompts, &cfg.generation, 3, Some(&out_a)).unwrap();
        assert_eq!(recs.len(), 2);
        for (r, p) in recs.iter().zip(&prompts) {
            assert_eq!(&r.prompt, p);
            assert_eq!(r.char_count, r.completion.chars().count());
            assert!(r.sampling_seed.is_none(), "greedy records no seed");
        }

        let out_b = tmp.path().join("gen_b.jsonl");
        run_generate(&ckpt, &prompts, &cfg.generation, 99, Some(&out_b)).unwrap();
        assert_eq!(
            fs::read(&out_a).unwrap(),
            fs::read(&out_b).unwrap(),
            "greedy generation ignores the sampling seed"
        );

        let loaded = load_generations(&out_a).unwrap();
        assert_eq!(loaded, recs);

        let sampled = run_generate(
            &ckpt,
            &prompts,
            &GenerationConfig {
                mode: DecodeMode::TopP,
                max_new_tokens: 4,
                ..GenerationConfig::default()
            },
            41,
            None,
        )
        .unwrap();
        assert_eq!(sampled[0].sampling_seed, Some(41));
    }

    #[test]
    fn generate_rejects_prompts_beyond_the_context() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tiny_dataset(tmp.path()));
        let summary = run_train(&cfg, &tmp.path().join("runs")).unwrap();
        let ckpt = summary.final_checkpoint.unwrap();
        let long = "x".repeat(400);
        let err = run_generate(&ckpt, &[long], &cfg.generation, 0, None).unwrap_err();
        assert!(err.to_string().contains("max_seq_len"), "{err}");
    }
}
