use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_patch, AUGMENTATIONS};
use crate::raster::{mask_to_tensor, read_msr, scene_to_tensor};
use crate::synth::Manifest;
use crate::{Error, Result, Tensor};

/// Train / validation / test fractions.
pub const DEFAULT_RATIOS: [f64; 3] = [0.90, 0.05, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" | "validation" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train, val or test)"))),
        }
    }
}

/// Disjoint lists of source-patch ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn part(&self, which: SplitPart) -> &[usize] {
        match which {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }

    /// Ids of the augmented variants: source `s` owns `8s .. 8s + 8`.
    pub fn augmented(ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .flat_map(|&s| (0..AUGMENTATIONS).map(move |k| s * AUGMENTATIONS + k))
            .collect()
    }
}

/// Seeded shuffle of `0..n_sources`, then contiguous cuts at the rounded
/// cumulative ratios.
pub fn split_dataset(n_sources: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Config(format!("split ratios {ratios:?} must lie in [0, 1]")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} sum to {total}, not 1")));
    }
    let mut ids: Vec<usize> = (0..n_sources).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = n_sources as f64;
    let cut1 = ((ratios[0] * n).round() as usize).min(n_sources);
    let cut2 = (((ratios[0] + ratios[1]) * n).round() as usize).clamp(cut1, n_sources);
    Ok(DatasetSplit {
        train: ids[..cut1].to_vec(),
        validation: ids[cut1..cut2].to_vec(),
        test: ids[cut2..].to_vec(),
        seed,
    })
}

/// A normalised patch `(1, 4, s, s)` and its 0/1 mask `(1, 1, s, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

/// Loads every pair listed in `dir/manifest.txt`.
pub fn load_samples(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest = Manifest::read_dir(dir)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let scene = read_msr(&e.scene)?;
            let mask = read_msr(&e.mask)?;
            if (scene.width, scene.height) != (mask.width, mask.height) {
                return Err(Error::Shape(format!(
                    "{}: mask is {}x{} but scene is {}x{}",
                    e.mask.display(),
                    mask.width,
                    mask.height,
                    scene.width,
                    scene.height
                )));
            }
            Ok(Sample {
                image: scene_to_tensor(&scene)?,
                mask: mask_to_tensor(&mask)?,
            })
        })
        .collect()
}

/// Samples for `ids`. With `group` > 1, consecutive runs of `group` samples are
/// treated as one source (a pre-augmented corpus), so `ids` index groups.
pub fn select(samples: &[Sample], ids: &[usize], group: usize) -> Vec<Sample> {
    ids.iter()
        .flat_map(|&s| (s * group..(s + 1) * group).map(|i| samples[i].clone()))
        .collect()
}

/// Expands each sample into its eight augmented variants.
pub fn augment_all(samples: &[Sample]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len() * AUGMENTATIONS);
    for s in samples {
        for (image, mask) in augment_patch(&s.image, &s.mask)? {
            out.push(Sample { image, mask });
        }
    }
    Ok(out)
}
