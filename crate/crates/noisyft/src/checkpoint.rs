//! Checkpoints: a `manifest.json` describing the run plus a flat `params.bin`
//! of little-endian f32 values in parameter visit order.
//!
//! The manifest carries no timestamps or host details, so saving the same
//! state twice produces byte-identical files. The binary payload is always
//! f32; loading into an f64 model upcasts each value exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{empty_model, ModelConfig, ModelParams};
use crate::tensor::Element;
use crate::vocab::Vocab;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// The seeds a run was launched with, kept so a checkpoint records its
/// full provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SeedLineage {
    pub init: u64,
    pub data: u64,
    pub noise: u64,
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset (not bytes) into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub seeds: SeedLineage,
    pub vocab: Vocab,
    pub params: Vec<ParamEntry>,
}

fn layout<T: Element>(params: &ModelParams<T>) -> Vec<ParamEntry> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    params.visit(|name, _, t| {
        entries.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    });
    entries
}

/// Writes `manifest.json` and `params.bin` into `dir`, creating it if
/// needed. Values are stored as f32 regardless of the model element type.
pub fn save_checkpoint<T: Element>(
    dir: &Path,
    params: &ModelParams<T>,
    step: u64,
    seeds: &SeedLineage,
    vocab: &Vocab,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: params.config.clone(),
        step,
        seeds: *seeds,
        vocab: vocab.clone(),
        params: layout(params),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;

    let file = fs::File::create(dir.join(PARAMS_FILE))?;
    let mut w = BufWriter::new(file);
    let mut io_err: Option<std::io::Error> = None;
    params.visit(|_, _, t| {
        if io_err.is_some() {
            return;
        }
        for &v in t.data() {
            if let Err(e) = w.write_all(&(v.to_f64() as f32).to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a model of element type `T`. The stored
/// f32 values upcast exactly when `T` is f64.
pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<(ModelParams<T>, Manifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (expected {})",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    let mut params: ModelParams<T> = empty_model(&manifest.config)?;

    let expected = layout(&params);
    if expected != manifest.params {
        return Err(Error::Checkpoint(
            "manifest parameter table does not match the declared model config".into(),
        ));
    }
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();

    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    if bytes.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "params.bin holds {} bytes, expected {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut cursor = 0usize;
    params.visit_mut(|_, _, t| {
        for v in t.data_mut() {
            let raw = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            *v = T::from_f64(raw as f64);
            cursor += 4;
        }
    });
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_setup() -> (ModelParams<f32>, SeedLineage, Vocab) {
        let cfg = ModelConfig {
            vocab_size: 11,
            embed_dim: 8,
            max_seq_len: 10,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            tie_lm_head: false,
        };
        let params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let seeds = SeedLineage {
            init: 1,
            data: 2,
            noise: 3,
            sampling: 4,
        };
        let vocab = Vocab::from_corpus(["abcdefgh"]).unwrap();
        (params, seeds, vocab)
    }

    #[test]
    fn roundtrip_is_bitwise_for_f32() {
        let (params, seeds, vocab) = sample_setup();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, 17, &seeds, &vocab).unwrap();
        let (loaded, manifest) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.seeds, seeds);
        assert_eq!(manifest.vocab, vocab);
        assert_eq!(manifest.config, params.config);
        let mut orig = Vec::new();
        params.visit(|_, _, t| orig.push(t.data().to_vec()));
        let mut back = Vec::new();
        loaded.visit(|_, _, t| back.push(t.data().to_vec()));
        assert_eq!(orig, back);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (params, seeds, vocab) = sample_setup();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(a.path(), &params, 5, &seeds, &vocab).unwrap();
        save_checkpoint(b.path(), &params, 5, &seeds, &vocab).unwrap();
        for f in [MANIFEST_FILE, PARAMS_FILE] {
            let fa = fs::read(a.path().join(f)).unwrap();
            let fb = fs::read(b.path().join(f)).unwrap();
            assert_eq!(fa, fb, "{f} differs between identical saves");
        }
    }

    #[test]
    fn loading_into_f64_upcasts_exactly() {
        let (params, seeds, vocab) = sample_setup();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, 0, &seeds, &vocab).unwrap();
        let (loaded, _) = load_checkpoint::<f64>(dir.path()).unwrap();
        let mut orig = Vec::new();
        params.visit(|_, _, t| orig.extend(t.data().iter().map(|&v| v as f64)));
        let mut back = Vec::new();
        loaded.visit(|_, _, t| back.extend_from_slice(t.data()));
        assert_eq!(orig, back);
    }

    #[test]
    fn offsets_are_contiguous_in_visit_order() {
        let (params, ..) = sample_setup();
        let entries = layout(&params);
        let mut expect = 0usize;
        for e in &entries {
            assert_eq!(e.offset, expect, "{}", e.name);
            expect += e.shape.iter().product::<usize>();
        }
        assert_eq!(expect, params.param_count());
        assert_eq!(entries[0].name, "embed.tokens");
        assert_eq!(entries.last().unwrap().name, "head.bias");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (params, seeds, vocab) = sample_setup();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, 0, &seeds, &vocab).unwrap();
        let bin = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn wrong_format_version_is_rejected() {
        let (params, seeds, vocab) = sample_setup();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, 0, &seeds, &vocab).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let json = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, json).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("format version"), "{err}");
    }

    #[test]
    fn mismatched_shape_table_is_rejected() {
        let (params, seeds, vocab) = sample_setup();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, 0, &seeds, &vocab).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        // Claim a different layer count than the parameter table encodes.
        let json = fs::read_to_string(&path)
            .unwrap()
            .replace("\"n_layers\": 2", "\"n_layers\": 1");
        fs::write(&path, json).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn tied_model_roundtrips_without_head_weight() {
        let cfg = ModelConfig {
            vocab_size: 9,
            embed_dim: 6,
            max_seq_len: 8,
            n_layers: 1,
            n_heads: 1,
            ffn_dim: 8,
            tie_lm_head: true,
        };
        let params: ModelParams<f32> =
            init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let vocab = Vocab::from_corpus(["abcdef"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, 3, &SeedLineage::default(), &vocab).unwrap();
        let (loaded, manifest) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert!(loaded.head_w.is_none());
        assert!(manifest.params.iter().all(|e| e.name != "head.weight"));
        assert_eq!(loaded.embed_tokens.data(), params.embed_tokens.data());
    }
}
