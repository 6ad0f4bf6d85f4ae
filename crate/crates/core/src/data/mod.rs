//! Datasets: class records, splits and regimes, the Omniglot loader and a
//! synthetic generator.

pub mod image;
pub mod omniglot;
pub mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use image::Rotation;
pub use omniglot::{load_omniglot, OmniglotOptions};
pub use synthetic::{make_synthetic, SyntheticSpec};

/// Side length of every stored image.
pub const IMAGE_SIZE: usize = 28;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every task draws its classes from a single alphabet.
    WithinAlphabet,
    /// Tasks may mix alphabets; classes are augmented with rotations.
    #[default]
    BetweenAlphabet,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within" | "within_alphabet" => Ok(Regime::WithinAlphabet),
            "between" | "between_alphabet" => Ok(Regime::BetweenAlphabet),
            other => Err(Error::UnknownStrategy {
                kind: "regime",
                name: other.to_string(),
                available: "within, between".into(),
            }),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::WithinAlphabet => "within",
            Regime::BetweenAlphabet => "between",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class_id: usize,
    pub alphabet_id: usize,
    pub rotation: Rotation,
    /// Source character name, e.g. `Latin/character01`.
    pub source: String,
    /// `1 x 28 x 28` grayscale images in `[0, 1]`, ink near 1.
    pub examples: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub regime: Regime,
    pub examples_per_class: usize,
    pub train: Vec<ClassRecord>,
    pub validation: Vec<ClassRecord>,
    pub test: Vec<ClassRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl DatasetSplit {
    pub fn partition(&self, p: Partition) -> &[ClassRecord] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn total_classes(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Checks class-count, disjointness and (within-alphabet) alphabet
    /// separation invariants.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut sources = HashSet::new();
        for class in self.train.iter().chain(&self.validation).chain(&self.test) {
            if class.examples.len() != self.examples_per_class {
                return Err(Error::Config(format!(
                    "class {} has {} examples, expected {}",
                    class.class_id,
                    class.examples.len(),
                    self.examples_per_class
                )));
            }
            if !ids.insert(class.class_id) {
                return Err(Error::Config(format!("class id {} appears twice", class.class_id)));
            }
            if !sources.insert((class.source.as_str(), class.rotation)) {
                return Err(Error::Config(format!(
                    "character {} at {:?} appears twice",
                    class.source, class.rotation
                )));
            }
        }
        let alphabets = |classes: &[ClassRecord]| -> HashSet<usize> {
            classes.iter().map(|c| c.alphabet_id).collect()
        };
        let (a, b, c) = (alphabets(&self.train), alphabets(&self.validation), alphabets(&self.test));
        if !a.is_disjoint(&b) || !a.is_disjoint(&c) || !b.is_disjoint(&c) {
            return Err(Error::Config("alphabets overlap across splits".into()));
        }
        Ok(())
    }
}

/// Where a run's classes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, seed: u64 },
    Omniglot { root: PathBuf, split_seed: u64 },
}

impl DataSource {
    pub fn load(&self, regime: Regime) -> Result<DatasetSplit> {
        match self {
            DataSource::Synthetic { spec, seed } => {
                let spec = SyntheticSpec { regime, ..*spec };
                Ok(make_synthetic(&spec, *seed)?.split)
            }
            DataSource::Omniglot { root, split_seed } => load_omniglot(
                root,
                regime,
                OmniglotOptions {
                    split_seed: *split_seed,
                    ..Default::default()
                },
            ),
        }
    }
}

/// Deterministic split of `count` alphabets into train/validation/test
/// counts: 33/5/12 for the full 50, proportional otherwise.
pub fn alphabet_counts(count: usize) -> Result<(usize, usize, usize)> {
    if count == 50 {
        return Ok((33, 5, 12));
    }
    if count < 3 {
        return Err(Error::Config(format!(
            "need at least 3 alphabets to form train/validation/test splits, found {count}"
        )));
    }
    let val = ((count as f64 * 5.0 / 50.0).round() as usize).max(1);
    let test = ((count as f64 * 12.0 / 50.0).round() as usize).max(1);
    let train = count.checked_sub(val + test).filter(|&t| t >= 1).unwrap_or(1);
    let test = count - train - val;
    Ok((train, val, test))
}
