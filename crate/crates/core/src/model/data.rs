//! Synthetic utterances: every target token is rendered as a run of noisy
//! copies of a one-hot template, with silence (the blank template) before
//! and after.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Matrix, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_items: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_token: usize,
    pub noise_std: f32,
    /// Silence frames before and after the tokens.
    pub lead_frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_items: 1000,
            vocab_size: 8,
            feat_dim: 16,
            min_len: 2,
            max_len: 8,
            frames_per_token: 3,
            noise_std: 0.2,
            lead_frames: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Matrix,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub items: Vec<Utterance>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidArgument("vocab_size must be at least 2".into()));
        }
        if self.min_len > self.max_len {
            return Err(ModelError::InvalidArgument(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if self.feat_dim == 0 || self.frames_per_token == 0 {
            return Err(ModelError::InvalidArgument("feat_dim and frames_per_token must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(ModelError::InvalidArgument("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// One-hot template for token `k` (0 is silence); tokens share a
    /// dimension when `feat_dim < vocab_size`.
    pub fn template(&self, k: u32) -> Vec<f32> {
        let mut row = vec![0.0; self.feat_dim];
        row[k as usize % self.feat_dim] = 1.0;
        row
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| ModelError::InvalidArgument(e.to_string()))?;
    let tokens = cfg.vocab_size as u32 - 1;
    let mut items = Vec::with_capacity(cfg.num_items);
    for _ in 0..cfg.num_items {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut targets: Vec<u32> = Vec::with_capacity(len);
        for _ in 0..len {
            // No immediate repeats: a per-frame encoder cannot tell where one
            // run of identical frames ends and the next begins.
            let token = match targets.last() {
                Some(&prev) if tokens > 1 => {
                    let k = rng.random_range(1..tokens);
                    if k >= prev {
                        k + 1
                    } else {
                        k
                    }
                }
                _ => rng.random_range(1..=tokens),
            };
            targets.push(token);
        }
        let mut frames: Vec<u32> = vec![0; cfg.lead_frames];
        for &k in &targets {
            frames.extend(std::iter::repeat_n(k, cfg.frames_per_token));
        }
        frames.extend(std::iter::repeat_n(0, cfg.lead_frames));
        let mut data = Vec::with_capacity(frames.len() * cfg.feat_dim);
        for &k in &frames {
            for v in cfg.template(k) {
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(v + n);
            }
        }
        items.push(Utterance {
            features: Matrix::from_vec(frames.len(), cfg.feat_dim, data)?,
            targets,
        });
    }
    Ok(SyntheticDataset { config: *cfg, items })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: SynthConfig,
    items: Vec<ManifestItem>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    file: String,
    frames: usize,
    targets: Vec<u32>,
}

/// Writes `manifest.json` plus one feature blob per utterance to `dir`.
///
/// A blob is `u32 T`, `u32 feat_dim`, then `T * feat_dim` `f32`, all
/// little-endian.
pub fn save_dataset(dir: &Path, dataset: &SyntheticDataset) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(dataset.len());
    for (i, utt) in dataset.items.iter().enumerate() {
        let file = format!("utt_{i:05}.bin");
        let f = &utt.features;
        let mut bytes = Vec::with_capacity(8 + 4 * f.data().len());
        bytes.extend((f.rows() as u32).to_le_bytes());
        bytes.extend((f.cols() as u32).to_le_bytes());
        for v in f.data() {
            bytes.extend(v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        items.push(ManifestItem {
            file,
            frames: f.rows(),
            targets: utt.targets.clone(),
        });
    }
    let manifest = Manifest {
        config: dataset.config,
        items,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset, ModelError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut items = Vec::with_capacity(manifest.items.len());
    for item in manifest.items {
        let bytes = fs::read(dir.join(&item.file))?;
        let corrupt = |why: &str| ModelError::Corrupt(format!("{}: {why}", item.file));
        if bytes.len() < 8 {
            return Err(corrupt("missing header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (rows, cols) = (word(0), word(4));
        if rows != item.frames || cols != manifest.config.feat_dim {
            return Err(corrupt("header disagrees with the manifest"));
        }
        if bytes.len() != 8 + 4 * rows * cols {
            return Err(corrupt("wrong blob length"));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        items.push(Utterance {
            features: Matrix::from_vec(rows, cols, data)?,
            targets: item.targets,
        });
    }
    Ok(SyntheticDataset {
        config: manifest.config,
        items,
    })
}

fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// `1 - total edit distance / total reference length`.
pub fn token_accuracy(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let errors: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(h, r)).sum();
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return if errors == 0 { 1.0 } else { 0.0 };
    }
    1.0 - errors as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_features_are_templates() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            num_items: 5,
            ..Default::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        for utt in &ds.items {
            let k = cfg.frames_per_token;
            assert_eq!(utt.features.rows(), k * utt.targets.len() + 2 * cfg.lead_frames);
            assert_eq!(utt.features.row(0), cfg.template(0).as_slice());
            for (u, &tok) in utt.targets.iter().enumerate() {
                for f in 0..k {
                    assert_eq!(utt.features.row(cfg.lead_frames + u * k + f), cfg.template(tok).as_slice());
                }
            }
            assert!(utt.targets.iter().all(|&t| t != 0 && t < 8));
            assert!(utt.targets.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn empty_and_deterministic() {
        let cfg = SynthConfig {
            num_items: 0,
            ..Default::default()
        };
        assert!(synth_dataset(&cfg).unwrap().is_empty());
        let cfg = SynthConfig::default();
        assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
        let bad = SynthConfig {
            min_len: 5,
            max_len: 4,
            ..Default::default()
        };
        assert!(synth_dataset(&bad).is_err());
    }

    #[test]
    fn lengths_are_uniform() {
        let cfg = SynthConfig {
            num_items: 1000,
            min_len: 1,
            max_len: 5,
            ..Default::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        let mut counts = [0f64; 5];
        for utt in &ds.items {
            counts[utt.targets.len() - 1] += 1.0;
        }
        let expected = 200.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, 99.9th percentile.
        assert!(chi2 < 18.47, "chi-square {chi2}");
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&SynthConfig {
            num_items: 4,
            ..Default::default()
        })
        .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let blob = dir.path().join("utt_00001.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn accuracy_counts_edits() {
        assert_eq!(token_accuracy(&[vec![1, 2, 3]], &[vec![1, 2, 3]]), 1.0);
        assert!((token_accuracy(&[vec![1, 3]], &[vec![1, 2, 3, 4]]) - 0.5).abs() < 1e-12);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[2, 1], &[1, 2]), 2);
    }
}
